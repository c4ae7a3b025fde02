//! `angiodiff` — train, sample, translate, and evaluate diffusion-based
//! cross-modality image translation models.
//!
//! Every subcommand is deterministic given its full flag set (including
//! `--seed`) and writes a JSON manifest of the resolved parameters next to
//! its main output, so any run can be reproduced exactly.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::{Array2, ArrayD};
use serde::Serialize;

use angiodiff_core::diffusion::LossWeightConfig;
use angiodiff_core::error::{Error, Result};
use angiodiff_core::io as adio;
use angiodiff_core::metrics::FeatureExtractor;
use angiodiff_core::nets::{Arch, ArchConfig, Preset};
use angiodiff_core::sampler::{
    self, GaussianOracleDenoiser, PosteriorSamplingOracle, SamplerConfig, SamplerKind,
};
use angiodiff_core::schedule::NoiseSchedule;
use angiodiff_core::train::{train, TrainConfig};
use angiodiff_core::volume::{self, Volume};

#[derive(Parser)]
#[command(name = "angiodiff", version, about = "Diffusion-based TOF-MRA to CTA image translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SamplerArg {
    Ddpm,
    Ddim,
}

impl From<SamplerArg> for SamplerKind {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Ddpm => SamplerKind::Ddpm,
            SamplerArg::Ddim => SamplerKind::Ddim,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser on paired slices
    Train {
        /// Architecture: unet | adm | uvit | dit
        #[arg(long)]
        arch: String,
        /// Size preset: paper | lite
        #[arg(long, default_value = "lite")]
        preset: String,
        /// Data source: a directory with source.nii/target.nii, or
        /// phantom:count=N,size=S,seed=K for an in-memory synthetic set
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 2000)]
        steps: u64,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 32)]
        crop: usize,
        /// Noise schedule descriptor, e.g. cosine, shifted-cosine:d=64,
        /// sigmoid:s=0,e=3,tau=0.9
        #[arg(long, default_value = "cosine")]
        schedule: String,
        /// Min-SNR loss-weight gamma
        #[arg(long, default_value_t = 5.0)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate a source volume slice-wise through a trained model
    Translate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = SamplerArg::Ddpm)]
        sampler: SamplerArg,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        #[arg(long, default_value_t = 256)]
        work_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare two volumes and write a metric report
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Feature extractor: down8 | randproj:dim=256,seed=S | file:<path>
        #[arg(long, default_value = "down8")]
        features: String,
        /// Evaluation window low,high
        #[arg(long, default_value = "-50,350")]
        range: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Print a t, lambda, alpha, sigma table for a schedule
    InspectSchedule {
        #[arg(long, default_value = "cosine")]
        schedule: String,
        #[arg(long, default_value_t = 1001)]
        points: usize,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Gaussian-oracle sampler convergence table
    OracleBench {
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, value_enum, default_value_t = SamplerArg::Ddim)]
        sampler: SamplerArg,
        /// Comma-separated step counts
        #[arg(long, default_value = "4,16,64,256")]
        steps: String,
        #[arg(long, default_value_t = 4096)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Generate a paired phantom dataset as source.nii/target.nii
    GenPhantom {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn write_manifest<T: Serialize>(path: &Path, manifest: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn parse_kv(spec: &str) -> Result<Vec<(String, String)>> {
    spec.split(',')
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got `{p}`")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn parse_features(spec: &str) -> Result<FeatureExtractor> {
    if spec == "down8" {
        return Ok(FeatureExtractor::DownsampleFlatten);
    }
    if let Some(rest) = spec.strip_prefix("randproj:") {
        let mut dim = 256usize;
        let mut seed = 0u64;
        for (k, v) in parse_kv(rest)? {
            match k.as_str() {
                "dim" => dim = v.parse().map_err(|_| bad_flag("dim", &v))?,
                "seed" => seed = v.parse().map_err(|_| bad_flag("seed", &v))?,
                _ => return Err(Error::InvalidArgument(format!("unknown randproj key `{k}`"))),
            }
        }
        return Ok(FeatureExtractor::RandomProjection { seed, dim });
    }
    if let Some(path) = spec.strip_prefix("file:") {
        return Ok(FeatureExtractor::External(PathBuf::from(path)));
    }
    Err(Error::InvalidArgument(format!(
        "unknown feature extractor `{spec}` (expected down8, randproj:..., file:...)"
    )))
}

fn bad_flag(name: &str, value: &str) -> Error {
    Error::InvalidArgument(format!("invalid {name} value `{value}`"))
}

fn parse_range(spec: &str) -> Result<(f64, f64)> {
    let (lo, hi) = spec
        .split_once(',')
        .ok_or_else(|| Error::InvalidArgument(format!("expected low,high got `{spec}`")))?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad_flag("range low", lo))?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad_flag("range high", hi))?;
    if lo >= hi {
        return Err(Error::InvalidArgument(format!("range low {lo} >= high {hi}")));
    }
    Ok((lo, hi))
}

fn volume_to_pairs(src: &Volume, tgt: &Volume) -> Result<Vec<(Array2<f32>, Array2<f32>)>> {
    if src.data.shape() != tgt.data.shape() {
        return Err(Error::ShapeMismatch {
            expected: src.data.shape().to_vec(),
            got: tgt.data.shape().to_vec(),
        });
    }
    Ok((0..src.n_slices())
        .map(|k| {
            (
                src.slice(k).mapv(|v| v as f32),
                tgt.slice(k).mapv(|v| v as f32),
            )
        })
        .collect())
}

fn load_training_data(spec: &str) -> Result<Vec<(Array2<f32>, Array2<f32>)>> {
    if let Some(rest) = spec.strip_prefix("phantom:") {
        let mut ps = adio::PhantomSpec::new(100, 64, 0);
        for (k, v) in parse_kv(rest)? {
            match k.as_str() {
                "count" => ps.count = v.parse().map_err(|_| bad_flag("count", &v))?,
                "size" => ps.size = v.parse().map_err(|_| bad_flag("size", &v))?,
                "seed" => ps.seed = v.parse().map_err(|_| bad_flag("seed", &v))?,
                "noise_sigma" => {
                    ps.noise_sigma = v.parse().map_err(|_| bad_flag("noise_sigma", &v))?
                }
                _ => return Err(Error::InvalidArgument(format!("unknown phantom key `{k}`"))),
            }
        }
        return adio::gen_phantom_pairs(&ps);
    }
    let dir = Path::new(spec);
    let src = adio::read_nifti(&dir.join("source.nii"))?;
    let tgt = adio::read_nifti(&dir.join("target.nii"))?;
    volume_to_pairs(&src, &tgt)
}

#[derive(Serialize)]
struct TrainManifest<'a> {
    command: &'a str,
    arch: &'a str,
    preset: &'a str,
    data: &'a str,
    steps: u64,
    lr: f64,
    batch: usize,
    crop: usize,
    schedule: String,
    gamma: f64,
    seed: u64,
    out: &'a Path,
    n_pairs: usize,
    param_count: usize,
    final_loss: f32,
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    arch: String,
    preset: String,
    data: String,
    steps: u64,
    lr: f64,
    batch: usize,
    crop: usize,
    schedule: String,
    gamma: f64,
    seed: u64,
    out: PathBuf,
) -> Result<()> {
    let arch_e: Arch = arch.parse()?;
    let preset_e: Preset = preset.parse()?;
    let cfg = ArchConfig::new(arch_e, preset_e);
    let sched = NoiseSchedule::parse(&schedule)?;
    let pairs = load_training_data(&data)?;
    let mut tc = TrainConfig::new(steps, batch, crop, seed);
    tc.lr = lr;
    tc.schedule = sched;
    tc.weight = LossWeightConfig {
        gamma,
        ..LossWeightConfig::default()
    };
    let (model, losses) = train(&cfg, &pairs, &tc)?;
    adio::save_checkpoint(&out, &model, &sched.descriptor())?;
    let manifest = TrainManifest {
        command: "train",
        arch: &arch,
        preset: &preset,
        data: &data,
        steps,
        lr,
        batch,
        crop,
        schedule: sched.descriptor(),
        gamma,
        seed,
        out: &out,
        n_pairs: pairs.len(),
        param_count: model.param_count(),
        final_loss: *losses.last().unwrap_or(&f32::NAN),
    };
    write_manifest(&manifest_path(&out), &manifest)?;
    println!(
        "trained {arch}/{preset}: {} params, {} steps, final loss {:.6}",
        model.param_count(),
        steps,
        manifest.final_loss
    );
    Ok(())
}

#[derive(Serialize)]
struct TranslateManifest<'a> {
    command: &'a str,
    model: &'a Path,
    input: &'a Path,
    output: &'a Path,
    sampler: String,
    steps: usize,
    work_size: usize,
    seed: u64,
    schedule: String,
    n_slices: usize,
}

fn cmd_translate(
    model_path: PathBuf,
    input: PathBuf,
    output: PathBuf,
    sampler: SamplerArg,
    steps: usize,
    work_size: usize,
    seed: u64,
) -> Result<()> {
    let (model, sched_desc) = adio::load_checkpoint(&model_path)?;
    let sched = NoiseSchedule::parse(&sched_desc)?;
    let raw = adio::read_nifti(&input)?;
    // map the source to [-1, 1] by its own min/max (identity for data
    // already spanning that range)
    let lo = raw.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let src = if hi > lo {
        volume::window_and_scale(&raw, lo, hi)?
    } else {
        return Err(Error::InvalidArgument("input volume is constant".into()));
    };
    let cfg = SamplerConfig {
        kind: sampler.into(),
        steps,
        clip: Some((-1.0, 1.0)),
        seed,
    };
    let out = if model.config.arch == Arch::UNetDirect {
        let adapter = angiodiff_core::nets::DirectAdapter {
            model: &model,
            schedule: sched,
        };
        volume::translate_volume(&adapter, &src, &cfg, &sched, work_size, volume::DEFAULT_WINDOW)?
    } else {
        volume::translate_volume(&model, &src, &cfg, &sched, work_size, volume::DEFAULT_WINDOW)?
    };
    adio::write_nifti(&out, &output)?;
    let manifest = TranslateManifest {
        command: "translate",
        model: &model_path,
        input: &input,
        output: &output,
        sampler: format!("{:?}", cfg.kind).to_lowercase(),
        steps,
        work_size,
        seed,
        schedule: sched_desc,
        n_slices: out.n_slices(),
    };
    write_manifest(&manifest_path(&output), &manifest)?;
    println!("translated {} slices -> {}", out.n_slices(), output.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalManifest<'a> {
    command: &'a str,
    pred: &'a Path,
    target: &'a Path,
    features: &'a str,
    range: (f64, f64),
    report: &'a Path,
}

fn cmd_eval(
    pred: PathBuf,
    target: PathBuf,
    features: String,
    range: String,
    report: PathBuf,
) -> Result<()> {
    let window = parse_range(&range)?;
    let extractor = parse_features(&features)?;
    let p = adio::read_nifti(&pred)?;
    let t = adio::read_nifti(&target)?;
    let r = volume::evaluate_volumes(&p, &t, &extractor, window)?;
    let json = serde_json::to_string_pretty(&r)?;
    std::fs::write(&report, json.clone() + "\n")?;
    let manifest = EvalManifest {
        command: "eval",
        pred: &pred,
        target: &target,
        features: &features,
        range: window,
        report: &report,
    };
    write_manifest(&manifest_path(&report), &manifest)?;
    println!("{json}");
    Ok(())
}

#[derive(Serialize)]
struct InspectManifest {
    command: &'static str,
    schedule: String,
    points: usize,
}

fn cmd_inspect_schedule(schedule: String, points: usize, manifest: Option<PathBuf>) -> Result<()> {
    if points < 2 {
        return Err(Error::InvalidArgument("need at least 2 points".into()));
    }
    let sched = NoiseSchedule::parse(&schedule)?;
    println!("t\tlambda\talpha\tsigma");
    for i in 0..points {
        let t = i as f64 / (points - 1) as f64;
        let lambda = sched.log_snr(t)?;
        let (a, s) = sched.alpha_sigma(t)?;
        println!("{t:.6}\t{lambda:.7}\t{a:.7}\t{s:.7}");
    }
    if let Some(path) = manifest {
        write_manifest(
            &path,
            &InspectManifest {
                command: "inspect-schedule",
                schedule: sched.descriptor(),
                points,
            },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct OracleBenchManifest {
    command: &'static str,
    dim: usize,
    sampler: String,
    steps: Vec<usize>,
    samples: usize,
    seed: u64,
}

fn cmd_oracle_bench(
    dim: usize,
    sampler: SamplerArg,
    steps: String,
    samples: usize,
    seed: u64,
    manifest: Option<PathBuf>,
) -> Result<()> {
    let step_list: Vec<usize> = steps
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| bad_flag("steps", s)))
        .collect::<Result<_>>()?;
    // wide log-SNR clamp so the analytic endpoint values are hit exactly
    let sched = NoiseSchedule::cosine().with_lambda_clamp(-80.0, 80.0)?;
    let oracle = GaussianOracleDenoiser::<f64>::new(
        ArrayD::zeros(vec![dim]),
        ArrayD::ones(vec![dim]),
    )?;
    match sampler {
        SamplerArg::Ddim => {
            println!("steps\tscale\texpected");
            for &n in &step_list {
                let scale = sampler::ddim_oracle_scale(n, &sched)?;
                let expected = (std::f64::consts::PI / (2.0 * n as f64)).cos().powi(n as i32);
                println!("{n}\t{scale:.7}\t{expected:.7}");
            }
        }
        SamplerArg::Ddpm => {
            println!("steps\tmean_max_abs\tcov_max_err\tse_bound");
            for &n in &step_list {
                let mut draws: Vec<ArrayD<f64>> = Vec::with_capacity(samples);
                for k in 0..samples {
                    let model = PosteriorSamplingOracle {
                        oracle: &oracle,
                        schedule: sched,
                        seed: angiodiff_core::rng::derive_seed(seed, k as u64),
                    };
                    let cfg = SamplerConfig {
                        kind: SamplerKind::Ddpm,
                        steps: n,
                        clip: None,
                        seed: angiodiff_core::rng::derive_seed(seed ^ 0x5a5a, k as u64),
                    };
                    draws.push(sampler::sample(&model, None, &[dim], &cfg, &sched)?);
                }
                let (mean_max, cov_err) = moment_errors(&draws, dim);
                let se = 4.0 / (samples as f64).sqrt();
                println!("{n}\t{mean_max:.5}\t{cov_err:.5}\t{se:.5}");
            }
        }
    }
    if let Some(path) = manifest {
        write_manifest(
            &path,
            &OracleBenchManifest {
                command: "oracle-bench",
                dim,
                sampler: format!("{sampler:?}").to_lowercase(),
                steps: step_list,
                samples,
                seed,
            },
        )?;
    }
    Ok(())
}

// max |mean| and max |cov - I| entries over draws
fn moment_errors(draws: &[ArrayD<f64>], dim: usize) -> (f64, f64) {
    let n = draws.len() as f64;
    let mut mean = vec![0.0; dim];
    for d in draws {
        for i in 0..dim {
            mean[i] += d[[i]] / n;
        }
    }
    let mut cov_err = 0.0f64;
    for i in 0..dim {
        for j in 0..dim {
            let mut c = 0.0;
            for d in draws {
                c += (d[[i]] - mean[i]) * (d[[j]] - mean[j]);
            }
            c /= n - 1.0;
            let target = if i == j { 1.0 } else { 0.0 };
            cov_err = cov_err.max((c - target).abs());
        }
    }
    let mean_max = mean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (mean_max, cov_err)
}

#[derive(Serialize)]
struct GenPhantomManifest<'a> {
    command: &'a str,
    count: usize,
    size: usize,
    seed: u64,
    out: &'a Path,
}

fn cmd_gen_phantom(count: usize, size: usize, seed: u64, out: PathBuf) -> Result<()> {
    let spec = adio::PhantomSpec::new(count, size, seed);
    let pairs = adio::gen_phantom_pairs(&spec)?;
    let (src, tgt) = adio::phantom_volumes(&pairs)?;
    std::fs::create_dir_all(&out)?;
    adio::write_nifti(&src, &out.join("source.nii"))?;
    adio::write_nifti(&tgt, &out.join("target.nii"))?;
    write_manifest(
        &out.join("manifest.json"),
        &GenPhantomManifest {
            command: "gen-phantom",
            count,
            size,
            seed,
            out: &out,
        },
    )?;
    println!("wrote {count} paired slices to {}", out.display());
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            arch,
            preset,
            data,
            steps,
            lr,
            batch,
            crop,
            schedule,
            gamma,
            seed,
            out,
        } => cmd_train(arch, preset, data, steps, lr, batch, crop, schedule, gamma, seed, out),
        Command::Translate {
            model,
            input,
            output,
            sampler,
            steps,
            work_size,
            seed,
        } => cmd_translate(model, input, output, sampler, steps, work_size, seed),
        Command::Eval {
            pred,
            target,
            features,
            range,
            report,
        } => cmd_eval(pred, target, features, range, report),
        Command::InspectSchedule {
            schedule,
            points,
            manifest,
        } => cmd_inspect_schedule(schedule, points, manifest),
        Command::OracleBench {
            dim,
            sampler,
            steps,
            samples,
            seed,
            manifest,
        } => cmd_oracle_bench(dim, sampler, steps, samples, seed, manifest),
        Command::GenPhantom {
            count,
            size,
            seed,
            out,
        } => cmd_gen_phantom(count, size, seed, out),
    }
}
