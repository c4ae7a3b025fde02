//! File formats: a minimal single-file NIfTI-1 reader/writer, the XMOD
//! checkpoint container, and the deterministic paired-phantom generator.
//!
//! All multi-byte values are little-endian. The NIfTI support covers exactly
//! what the pipeline needs: uncompressed `.nii` files with 2D or 3D data in
//! uint8, int16, or float32, with scl_slope/scl_inter applied on read.

use std::io::{Cursor, Read as _, Write as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3, Axis, ShapeBuilder};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nets::{ArchConfig, DenoiserModel, ParamTree};
use crate::rng;
use crate::volume::{IntensityMeta, Volume};

const NIFTI_HEADER_SIZE: usize = 348;
const NIFTI_VOX_OFFSET: u64 = 352;
const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

/// Read an uncompressed single-file NIfTI-1 volume. 2D images come back as
/// a volume with one slice. scl_slope = 0 is treated as identity scaling.
pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < NIFTI_HEADER_SIZE {
        return Err(Error::TruncatedFile {
            expected: NIFTI_HEADER_SIZE,
            got: bytes.len(),
        });
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::MagicMismatch);
    }
    let mut c = Cursor::new(&bytes[40..]);
    let mut dim = [0i16; 8];
    for d in dim.iter_mut() {
        *d = c.read_i16::<LittleEndian>()?;
    }
    let ndim = dim[0];
    if !(2..=3).contains(&ndim) {
        return Err(Error::InvalidArgument(format!(
            "unsupported NIfTI rank {ndim} (need 2 or 3)"
        )));
    }
    let nx = dim[1].max(1) as usize;
    let ny = dim[2].max(1) as usize;
    let nz = if ndim == 3 { dim[3].max(1) as usize } else { 1 };

    let mut c = Cursor::new(&bytes[70..]);
    let datatype = c.read_i16::<LittleEndian>()?;
    let mut c = Cursor::new(&bytes[76..]);
    let mut pixdim = [0f32; 8];
    for p in pixdim.iter_mut() {
        *p = c.read_f32::<LittleEndian>()?;
    }
    let mut c = Cursor::new(&bytes[108..]);
    let vox_offset = c.read_f32::<LittleEndian>()? as usize;
    let scl_slope = c.read_f32::<LittleEndian>()?;
    let scl_inter = c.read_f32::<LittleEndian>()?;
    let slope = if scl_slope == 0.0 { 1.0 } else { scl_slope as f64 };
    let inter = scl_inter as f64;

    let n = nx * ny * nz;
    let elem = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let need = vox_offset + n * elem;
    if bytes.len() < need {
        return Err(Error::TruncatedFile {
            expected: need,
            got: bytes.len(),
        });
    }
    let mut c = Cursor::new(&bytes[vox_offset..need]);
    let mut raw = Vec::with_capacity(n);
    for _ in 0..n {
        let v = match datatype {
            DT_UINT8 => c.read_u8()? as f64,
            DT_INT16 => c.read_i16::<LittleEndian>()? as f64,
            _ => c.read_f32::<LittleEndian>()? as f64,
        };
        raw.push(slope * v + inter);
    }
    // NIfTI stores x fastest: column-major for (x, y, z)
    let data = Array3::from_shape_vec((nx, ny, nz).f(), raw)
        .expect("shape/product mismatch");
    let spacing = (
        pos_or_one(pixdim[1]),
        pos_or_one(pixdim[2]),
        pos_or_one(pixdim[3]),
    );
    Volume::new(data, spacing, IntensityMeta::RawHu)
}

fn pos_or_one(p: f32) -> f64 {
    if p > 0.0 {
        p as f64
    } else {
        1.0
    }
}

/// Write a volume as single-file NIfTI-1, float32 with identity scaling.
pub fn write_nifti(volume: &Volume, path: &Path) -> Result<()> {
    let (nx, ny, nz) = volume.data.dim();
    let check = |n: usize| -> Result<i16> {
        i16::try_from(n).map_err(|_| Error::InvalidArgument(format!("dimension {n} exceeds NIfTI i16 range")))
    };
    let mut header = vec![0u8; NIFTI_VOX_OFFSET as usize];
    {
        let mut c = Cursor::new(&mut header[..]);
        c.write_i32::<LittleEndian>(NIFTI_HEADER_SIZE as i32)?; // sizeof_hdr
        c.set_position(40);
        for d in [3, check(nx)?, check(ny)?, check(nz)?, 1, 1, 1, 1] {
            c.write_i16::<LittleEndian>(d)?;
        }
        c.set_position(70);
        c.write_i16::<LittleEndian>(DT_FLOAT32)?; // datatype
        c.write_i16::<LittleEndian>(32)?; // bitpix
        c.set_position(76);
        for p in [
            1.0,
            volume.spacing.0 as f32,
            volume.spacing.1 as f32,
            volume.spacing.2 as f32,
            1.0,
            1.0,
            1.0,
            1.0,
        ] {
            c.write_f32::<LittleEndian>(p)?;
        }
        c.set_position(108);
        c.write_f32::<LittleEndian>(NIFTI_VOX_OFFSET as f32)?; // vox_offset
        c.write_f32::<LittleEndian>(1.0)?; // scl_slope
        c.write_f32::<LittleEndian>(0.0)?; // scl_inter
        c.set_position(344);
        c.write_all(b"n+1\0")?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&header)?;
    // x fastest
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                out.write_f32::<LittleEndian>(volume.data[[x, y, z]] as f32)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

const XMOD_MAGIC: &[u8; 4] = b"XMOD";
const XMOD_VERSION: u32 = 1;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn write_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    buf.write_u32::<LittleEndian>(s.len() as u32)?;
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

fn read_str(c: &mut Cursor<&[u8]>) -> Result<String> {
    let len = c.read_u32::<LittleEndian>()? as usize;
    let mut bytes = vec![0u8; len];
    c.read_exact(&mut bytes)
        .map_err(|_| Error::CorruptCheckpoint("truncated string field".into()))?;
    String::from_utf8(bytes).map_err(|_| Error::CorruptCheckpoint("invalid utf-8".into()))
}

/// Save a model checkpoint: magic, version, config JSON, schedule
/// descriptor, named f32 tensor table, and a trailing checksum over
/// everything before it.
pub fn save_checkpoint(path: &Path, model: &DenoiserModel, schedule_desc: &str) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(XMOD_MAGIC);
    buf.write_u32::<LittleEndian>(XMOD_VERSION)?;
    write_str(&mut buf, &serde_json::to_string(&model.config)?)?;
    write_str(&mut buf, schedule_desc)?;
    buf.write_u32::<LittleEndian>(model.params.tensors.len() as u32)?;
    for (name, tensor) in &model.params.tensors {
        write_str(&mut buf, name)?;
        buf.write_u32::<LittleEndian>(tensor.ndim() as u32)?;
        for d in tensor.shape() {
            buf.write_u32::<LittleEndian>(*d as u32)?;
        }
        for v in tensor.iter() {
            buf.write_f32::<LittleEndian>(*v)?;
        }
    }
    let sum = fnv1a64(&buf);
    buf.write_u64::<LittleEndian>(sum)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Load an XMOD checkpoint; returns the model and its schedule descriptor.
pub fn load_checkpoint(path: &Path) -> Result<(DenoiserModel, String)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 + 8 {
        return Err(Error::CorruptCheckpoint("file too short".into()));
    }
    if &bytes[0..4] != XMOD_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = Cursor::new(tail).read_u64::<LittleEndian>()?;
    if fnv1a64(body) != stored {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    let mut c = Cursor::new(body);
    c.set_position(4);
    let version = c.read_u32::<LittleEndian>()?;
    if version != XMOD_VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let body_ref: &[u8] = body;
    let mut c = Cursor::new(body_ref);
    c.set_position(8);
    let config: ArchConfig = serde_json::from_str(&read_str(&mut c)?)?;
    config.validate()?;
    let schedule_desc = read_str(&mut c)?;
    let count = c.read_u32::<LittleEndian>()? as usize;
    let mut params = ParamTree::<f32>::default();
    for _ in 0..count {
        let name = read_str(&mut c)?;
        let ndim = c.read_u32::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.read_u32::<LittleEndian>()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            vals.push(
                c.read_f32::<LittleEndian>()
                    .map_err(|_| Error::CorruptCheckpoint("truncated tensor data".into()))?,
            );
        }
        params.tensors.insert(
            name,
            ndarray::ArrayD::from_shape_vec(shape, vals).expect("shape/product mismatch"),
        );
    }
    if !params.all_finite() {
        return Err(Error::CorruptCheckpoint("non-finite parameter".into()));
    }
    Ok((DenoiserModel { config, params }, schedule_desc))
}

/// Parameters of the synthetic paired dataset.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PhantomSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub blob_count: (usize, usize),
    pub tube_count: (usize, usize),
    pub noise_sigma: f64,
}

impl PhantomSpec {
    pub fn new(count: usize, size: usize, seed: u64) -> Self {
        PhantomSpec {
            count,
            size,
            seed,
            blob_count: (2, 5),
            tube_count: (1, 3),
            noise_sigma: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::InvalidArgument("phantom count must be >= 1".into()));
        }
        if self.size < 16 || self.size % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "phantom size must be even and >= 16, got {}",
                self.size
            )));
        }
        if self.blob_count.0 > self.blob_count.1
            || self.tube_count.0 > self.tube_count.1
            || self.blob_count.0 == 0
        {
            return Err(Error::InvalidArgument("invalid blob/tube count range".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Generate paired (source, target) slices. The source is a smooth sum of
/// Gaussian blobs plus bright tubular curves on a dark background; the
/// target applies a fixed monotone nonlinearity to the same geometry, adds
/// a bright ring near the boundary, and Gaussian noise. Values in [-1, 1].
pub fn gen_phantom_pairs(spec: &PhantomSpec) -> Result<Vec<(Array2<f32>, Array2<f32>)>> {
    spec.validate()?;
    let n = spec.size;
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut r = rng::stream(spec.seed, i as u64, 0);
        let mut geom = Array2::<f64>::zeros((n, n));
        let nb = r.gen_range(spec.blob_count.0..=spec.blob_count.1);
        for _ in 0..nb {
            let cy = r.gen_range(0.2..0.8) * n as f64;
            let cx = r.gen_range(0.2..0.8) * n as f64;
            let s = r.gen_range(0.08..0.2) * n as f64;
            let amp = r.gen_range(0.3..0.7);
            for y in 0..n {
                for x in 0..n {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    geom[[y, x]] += amp * (-d2 / (2.0 * s * s)).exp();
                }
            }
        }
        let nt = r.gen_range(spec.tube_count.0..=spec.tube_count.1);
        for _ in 0..nt {
            // sinusoidal curve across the image, drawn as a bright tube
            let phase = r.gen_range(0.0..std::f64::consts::TAU);
            let freq = r.gen_range(1.0..2.5);
            let off = r.gen_range(0.3..0.7) * n as f64;
            let ampl = r.gen_range(0.05..0.15) * n as f64;
            let width = r.gen_range(0.8..2.0);
            let vertical = r.gen_range(0..2) == 0;
            for a in 0..n {
                let center = off
                    + ampl * (freq * std::f64::consts::TAU * a as f64 / n as f64 + phase).sin();
                for b in 0..n {
                    let d = b as f64 - center;
                    let v = 0.9 * (-d * d / (2.0 * width * width)).exp();
                    let (y, x) = if vertical { (a, b) } else { (b, a) };
                    geom[[y, x]] += v;
                }
            }
        }
        // faint circular rim tube in the shared geometry: it anchors the
        // target's bright ring so the mapping stays locally predictable
        // from the source under random crops
        let rim_r = 0.45 * n as f64;
        let rim_w = (0.03 * n as f64).max(1.0);
        let cc = (n as f64 - 1.0) / 2.0;
        for y in 0..n {
            for x in 0..n {
                let rr = ((y as f64 - cc).powi(2) + (x as f64 - cc).powi(2)).sqrt();
                geom[[y, x]] += 0.4 * (-(rr - rim_r).powi(2) / (2.0 * rim_w * rim_w)).exp();
            }
        }
        let source = geom.mapv(|v| (2.0 * v.clamp(0.0, 1.0) - 1.0).clamp(-1.0, 1.0));

        // target: monotone remap of the same geometry + skull-like ring + noise
        let ring_r = 0.45 * n as f64;
        let ring_w = 0.03 * n as f64;
        let c = (n as f64 - 1.0) / 2.0;
        let mut tgt = Array2::<f64>::zeros((n, n));
        for y in 0..n {
            for x in 0..n {
                let g = geom[[y, x]].clamp(0.0, 1.0);
                let mapped = g.powf(0.7); // fixed monotone nonlinearity
                let rr = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
                let ring = (-(rr - ring_r).powi(2) / (2.0 * ring_w * ring_w)).exp();
                tgt[[y, x]] = mapped.max(ring);
            }
        }
        let noise = rng::standard_normal(&mut rng::stream(spec.seed, i as u64, 1), &[n, n]);
        let noise = noise.into_dimensionality::<ndarray::Ix2>().unwrap();
        let target = ndarray::Zip::from(&tgt)
            .and(&noise)
            .map_collect(|t, e| ((2.0 * t - 1.0) + spec.noise_sigma * e).clamp(-1.0, 1.0));
        out.push((source.mapv(|v| v as f32), target.mapv(|v| v as f32)));
    }
    Ok(out)
}

/// Stack generated phantom pairs into (source, target) volumes with one
/// slice per pair — the evaluation-side view of the same dataset.
pub fn phantom_volumes(pairs: &[(Array2<f32>, Array2<f32>)]) -> Result<(Volume, Volume)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no phantom pairs".into()));
    }
    let (h, w) = pairs[0].0.dim();
    let mut src = Array3::zeros((h, w, pairs.len()));
    let mut tgt = Array3::zeros((h, w, pairs.len()));
    for (k, (s, t)) in pairs.iter().enumerate() {
        src.index_axis_mut(Axis(2), k)
            .assign(&s.mapv(|v| v as f64));
        tgt.index_axis_mut(Axis(2), k)
            .assign(&t.mapv(|v| v as f64));
    }
    Ok((
        Volume::new(src, (1.0, 1.0, 1.0), IntensityMeta::Normalized(-1.0, 1.0))?,
        Volume::new(tgt, (1.0, 1.0, 1.0), IntensityMeta::Normalized(-1.0, 1.0))?,
    ))
}
