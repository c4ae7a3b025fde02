//! Denoiser architectures and their training step.
//!
//! Four models share one layer vocabulary: the direct U-Net baseline
//! (condition in, target out, no diffusion), the ADM-style diffusion U-Net
//! with multi-resolution attention, the U-ViT (ADM body with a transformer
//! middle and a one-level wavelet front/back end), and a DiT. All are
//! expressed as pure functions over an autodiff [`Graph`], so the same code
//! path serves f32 training/inference and f64 gradient checking.
//!
//! Parameters live in a flat, insertion-ordered name -> tensor map
//! ([`ParamTree`]); the network structure itself assigns names, so building,
//! loading, and differentiating all walk the identical forward code.

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn, NdFloat};
use num_traits::NumCast;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::sampler::Denoiser;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    UNetDirect,
    Adm,
    UVit,
    DiT,
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Arch::UNetDirect),
            "adm" => Ok(Arch::Adm),
            "uvit" => Ok(Arch::UVit),
            "dit" => Ok(Arch::DiT),
            _ => Err(Error::BadArchConfig(format!("unknown arch `{s}`"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::UNetDirect => "unet",
            Arch::Adm => "adm",
            Arch::UVit => "uvit",
            Arch::DiT => "dit",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    Paper,
    Lite,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "lite" => Ok(Preset::Lite),
            _ => Err(Error::BadArchConfig(format!("unknown preset `{s}`"))),
        }
    }
}

/// Full structural description of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub arch: Arch,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks_per_stage: usize,
    pub attention_heads: usize,
    pub transformer_depth: usize,
    pub hidden_size: usize,
    pub patch_size: usize,
    pub norm_groups: usize,
    pub preset: Preset,
}

impl ArchConfig {
    pub fn new(arch: Arch, preset: Preset) -> Self {
        let lite = preset == Preset::Lite;
        let c = if lite { 24 } else { 128 };
        ArchConfig {
            arch,
            base_channels: c,
            channel_multipliers: vec![1, 2, 4],
            res_blocks_per_stage: if lite || arch == Arch::UNetDirect { 1 } else { 2 },
            attention_heads: if arch == Arch::DiT && !lite { 16 } else { 4 },
            transformer_depth: match (arch, lite) {
                (Arch::DiT, false) => 24,
                (Arch::UVit, false) => 16,
                _ => 4,
            },
            hidden_size: match (arch, lite) {
                (Arch::DiT, false) => 1024,
                (Arch::UVit, false) => 512,
                _ => 128,
            },
            patch_size: if lite { 4 } else { 16 },
            norm_groups: if lite { 8 } else { 32 },
            preset,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.base_channels > 0
            && self.channel_multipliers == [1, 2, 4]
            && self.res_blocks_per_stage >= 1
            && self.attention_heads >= 1
            && self.hidden_size % self.attention_heads == 0
            && self.norm_groups >= 1
            && self
                .channel_multipliers
                .iter()
                .all(|m| (m * self.base_channels) % self.norm_groups == 0)
            && self.patch_size >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::BadArchConfig(format!("{self:?}")))
        }
    }

    fn time_dim(&self) -> usize {
        match self.arch {
            Arch::DiT => self.hidden_size,
            _ => 4 * self.base_channels,
        }
    }

    /// Spatial granularity the input is zero-padded up to.
    pub fn stride_multiple(&self) -> usize {
        match self.arch {
            Arch::UNetDirect | Arch::Adm => 4,
            Arch::UVit => 8,
            Arch::DiT => self.patch_size,
        }
    }
}

/// Flat, insertion-ordered parameter storage.
#[derive(Debug, Clone)]
pub struct ParamTree<F: NdFloat> {
    pub tensors: IndexMap<String, ArrayD<F>>,
}

impl<F: NdFloat> Default for ParamTree<F> {
    fn default() -> Self {
        ParamTree { tensors: IndexMap::new() }
    }
}

impl<F: NdFloat> ParamTree<F> {
    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.tensors.get(name)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamTree {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), ArrayD::zeros(t.raw_dim())))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Truncated normal (resample beyond 2 sigma) with std 1/sqrt(fan_in).
    FanIn(usize),
    Zero,
    /// Ones — normalization scales.
    One,
}

fn cast<F: NdFloat>(x: f64) -> F {
    <F as NumCast>::from(x).expect("cast")
}

fn init_tensor<F: NdFloat>(shape: &[usize], init: Init, rng: &mut rand_chacha::ChaCha12Rng) -> ArrayD<F> {
    match init {
        Init::Zero => ArrayD::zeros(IxDyn(shape)),
        Init::One => ArrayD::from_elem(IxDyn(shape), F::one()),
        Init::FanIn(fan_in) => {
            let std = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data: Vec<F> = (0..n)
                .map(|_| {
                    let mut x: f64 = rng.sample(StandardNormal);
                    while x.abs() > 2.0 {
                        x = rng.sample(StandardNormal);
                    }
                    cast::<F>(x * std)
                })
                .collect();
            ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape")
        }
    }
}

enum BinderMode<'t, F: NdFloat> {
    Build { seed: u64, counter: u64 },
    Use { tree: &'t ParamTree<F>, trainable: bool },
}

/// Supplies parameter tensors to a forward pass, either freshly initialized
/// (build) or from an existing [`ParamTree`] (inference/training).
pub struct Binder<'t, F: NdFloat> {
    mode: BinderMode<'t, F>,
    vars: IndexMap<String, Var>,
}

impl<'t, F: NdFloat> Binder<'t, F> {
    pub fn build(seed: u64) -> Self {
        Binder {
            mode: BinderMode::Build { seed, counter: 0 },
            vars: IndexMap::new(),
        }
    }

    pub fn from_tree(tree: &'t ParamTree<F>, trainable: bool) -> Self {
        Binder {
            mode: BinderMode::Use { tree, trainable },
            vars: IndexMap::new(),
        }
    }

    /// Name -> graph node of every parameter touched by the forward pass.
    pub fn vars(&self) -> &IndexMap<String, Var> {
        &self.vars
    }

    /// Extract the initialized tensors after a build-mode forward pass.
    pub fn into_tree(self, graph: Graph<F>) -> ParamTree<F> {
        let mut values: Vec<Option<ArrayD<F>>> = graph.into_values().into_iter().map(Some).collect();
        ParamTree {
            tensors: self
                .vars
                .into_iter()
                .map(|(name, var)| (name, values[var.0].take().expect("unique param var")))
                .collect(),
        }
    }

    fn param(&mut self, g: &mut Graph<F>, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let var = match &mut self.mode {
            BinderMode::Build { seed, counter } => {
                let mut rng = crate::rng::stream(*seed, *counter, 11);
                *counter += 1;
                let t = init_tensor(shape, init, &mut rng);
                g.constant(t)
            }
            BinderMode::Use { tree, trainable } => {
                let t = tree.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
                if t.shape() != shape {
                    return Err(Error::ShapeMismatch {
                        expected: shape.to_vec(),
                        got: t.shape().to_vec(),
                    });
                }
                if *trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            }
        };
        self.vars.insert(name.to_string(), var);
        Ok(var)
    }
}

/// Interleaved sin/cos embedding of a scalar with geometric frequencies
/// spanning 1 to 10^4.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("embedding dim {dim} must be even")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = if half > 1 {
            1.0e4f64.powf(i as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    Ok(out)
}

// helper threading the graph/binder/config through the layer constructors
struct Net<'g, 't, F: NdFloat> {
    g: &'g mut Graph<F>,
    b: &'g mut Binder<'t, F>,
    cfg: &'g ArchConfig,
}

impl<F: NdFloat> Net<'_, '_, F> {
    fn conv(&mut self, x: Var, name: &str, cin: usize, cout: usize, k: usize, init: Init) -> Result<Var> {
        let w = self.b.param(self.g, &format!("{name}.w"), &[cout, cin, k, k], init)?;
        let bias = self.b.param(self.g, &format!("{name}.b"), &[cout], Init::Zero)?;
        let y = self.g.conv2d(x, w, k / 2)?;
        self.g.add_bias_channel(y, bias)
    }

    /// Linear on the last axis of (B, D) or (B, N, D) input.
    fn linear(&mut self, x: Var, name: &str, din: usize, dout: usize, bias: bool, init: Init) -> Result<Var> {
        let w = self.b.param(self.g, &format!("{name}.w"), &[din, dout], init)?;
        let shape = self.g.value(x).shape().to_vec();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let x2 = self.g.reshape(x, &[rows, din])?;
        let mut y = self.g.matmul(x2, w)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = dout;
        y = self.g.reshape(y, &out_shape)?;
        if bias {
            let bv = self.b.param(self.g, &format!("{name}.b"), &[dout], Init::Zero)?;
            y = self.g.add_bias_last(y, bv)?;
        }
        Ok(y)
    }

    fn res_block(&mut self, x: Var, temb: Option<Var>, name: &str, cin: usize, cout: usize) -> Result<Var> {
        let groups = self.cfg.norm_groups;
        let g1 = self.b.param(self.g, &format!("{name}.norm1.g"), &[cin], Init::One)?;
        let mut h = self.g.group_norm(x, g1, groups)?;
        h = self.g.silu(h);
        h = self.conv(h, &format!("{name}.conv1"), cin, cout, 3, Init::FanIn(9 * cin))?;
        if let Some(te) = temb {
            let tdim = self.cfg.time_dim();
            let ts = self.g.silu(te);
            let proj = self.linear(ts, &format!("{name}.temb"), tdim, cout, true, Init::FanIn(tdim))?;
            h = self.g.add_channel_vec(h, proj)?;
        }
        let g2 = self.b.param(self.g, &format!("{name}.norm2.g"), &[cout], Init::One)?;
        h = self.g.group_norm(h, g2, groups)?;
        h = self.g.silu(h);
        h = self.conv(h, &format!("{name}.conv2"), cout, cout, 3, Init::Zero)?;
        let skip = if cin != cout {
            self.conv(x, &format!("{name}.skip"), cin, cout, 1, Init::FanIn(cin))?
        } else {
            x
        };
        self.g.add(skip, h)
    }

    /// Multi-head self-attention core on (B, N, D) without norms/residual.
    fn attn_core(&mut self, x: Var, name: &str, d: usize, heads: usize) -> Result<Var> {
        let shape = self.g.value(x).shape().to_vec();
        let (bsz, n) = (shape[0], shape[1]);
        let dh = d / heads;
        let qkv = self.linear(x, &format!("{name}.qkv"), d, 3 * d, true, Init::FanIn(d))?;
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let p = self.g.narrow(qkv, 2, i * d, d)?;
            let p = self.g.reshape(p, &[bsz, n, heads, dh])?;
            let p = self.g.permute(p, &[0, 2, 1, 3])?;
            parts.push(self.g.reshape(p, &[bsz * heads, n, dh])?);
        }
        let (q, k, v) = (parts[0], parts[1], parts[2]);
        let kt = self.g.permute(k, &[0, 2, 1])?;
        let mut att = self.g.bmm(q, kt)?;
        att = self.g.scale(att, 1.0 / (dh as f64).sqrt());
        att = self.g.softmax_last(att);
        let mut out = self.g.bmm(att, v)?;
        out = self.g.reshape(out, &[bsz, heads, n, dh])?;
        out = self.g.permute(out, &[0, 2, 1, 3])?;
        out = self.g.reshape(out, &[bsz, n, d])?;
        self.linear(out, &format!("{name}.out"), d, d, true, Init::Zero)
    }

    /// Residual attention block on (B, C, H, W) feature maps.
    fn attn_spatial(&mut self, x: Var, name: &str, c: usize) -> Result<Var> {
        let shape = self.g.value(x).shape().to_vec();
        let (bsz, h, w) = (shape[0], shape[2], shape[3]);
        let gsc = self.b.param(self.g, &format!("{name}.norm.g"), &[c], Init::One)?;
        let mut tok = self.g.group_norm(x, gsc, self.cfg.norm_groups)?;
        tok = self.g.permute(tok, &[0, 2, 3, 1])?;
        tok = self.g.reshape(tok, &[bsz, h * w, c])?;
        let out = self.attn_core(tok, name, c, self.cfg.attention_heads)?;
        let out = self.g.reshape(out, &[bsz, h, w, c])?;
        let out = self.g.permute(out, &[0, 3, 1, 2])?;
        self.g.add(x, out)
    }

    fn downsample(&mut self, x: Var, name: &str, cin: usize, cout: usize) -> Result<Var> {
        let d = self.g.pixel_unshuffle(x, 2)?;
        self.conv(d, name, 4 * cin, cout, 1, Init::FanIn(4 * cin))
    }

    fn upsample(&mut self, x: Var, name: &str, cin: usize, cout: usize) -> Result<Var> {
        let u = self.conv(x, name, cin, 4 * cout, 1, Init::FanIn(cin))?;
        self.g.pixel_shuffle(u, 2)
    }

    fn swiglu(&mut self, x: Var, name: &str, d: usize, m: usize) -> Result<Var> {
        let gate = self.linear(x, &format!("{name}.gate"), d, m, false, Init::FanIn(d))?;
        let val = self.linear(x, &format!("{name}.val"), d, m, false, Init::FanIn(d))?;
        let act = self.g.silu(gate);
        let hidden = self.g.mul(act, val)?;
        self.linear(hidden, &format!("{name}.out"), m, d, false, Init::FanIn(m))
    }

    /// Pre-norm transformer block with adaLN time modulation on (B, N, D).
    fn transformer_block(&mut self, x: Var, temb: Var, name: &str, d: usize, tdim: usize) -> Result<Var> {
        let heads = self.cfg.attention_heads;
        let ts = self.g.silu(temb);
        let ada = self.linear(ts, &format!("{name}.ada"), tdim, 6 * d, true, Init::Zero)?;
        let mut mods = Vec::with_capacity(6);
        for i in 0..6 {
            mods.push(self.g.narrow(ada, 1, i * d, d)?);
        }
        let bsz = self.g.value(x).shape()[0];
        let one = self.g.constant(ArrayD::from_elem(vec![bsz, d], F::one()));

        let n1 = self.b.param(self.g, &format!("{name}.norm1.g"), &[d], Init::One)?;
        let mut h = self.g.rmsnorm(x, n1)?;
        let s1 = self.g.add(one, mods[1])?;
        h = self.g.mul_row_vec(h, s1)?;
        h = self.g.add_row_vec(h, mods[0])?;
        h = self.attn_core(h, &format!("{name}.attn"), d, heads)?;
        h = self.g.mul_row_vec(h, mods[2])?;
        let x = self.g.add(x, h)?;

        let n2 = self.b.param(self.g, &format!("{name}.norm2.g"), &[d], Init::One)?;
        let mut h = self.g.rmsnorm(x, n2)?;
        let s2 = self.g.add(one, mods[4])?;
        h = self.g.mul_row_vec(h, s2)?;
        h = self.g.add_row_vec(h, mods[3])?;
        h = self.swiglu(h, &format!("{name}.mlp"), d, 4 * d)?;
        h = self.g.mul_row_vec(h, mods[5])?;
        self.g.add(x, h)
    }

    fn time_embedding(&mut self, t: &[f64], tdim: usize) -> Result<Var> {
        let bsz = t.len();
        let mut data = Vec::with_capacity(bsz * tdim);
        for ti in t {
            data.extend(sinusoidal_embedding(*ti, tdim)?.into_iter().map(cast::<F>));
        }
        let emb = ArrayD::from_shape_vec(IxDyn(&[bsz, tdim]), data).expect("shape");
        let e = self.g.constant(emb);
        let e = self.linear(e, "time.fc1", tdim, tdim, true, Init::FanIn(tdim))?;
        let e = self.g.silu(e);
        self.linear(e, "time.fc2", tdim, tdim, true, Init::FanIn(tdim))
    }

    fn token_position_embedding(&mut self, bsz: usize, n: usize, d: usize) -> Result<Var> {
        let mut data = Vec::with_capacity(bsz * n * d);
        for _ in 0..bsz {
            for i in 0..n {
                data.extend(
                    sinusoidal_embedding(i as f64 / n as f64, d)?.into_iter().map(cast::<F>),
                );
            }
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&[bsz, n, d]), data).expect("shape");
        Ok(self.g.constant(arr))
    }

    /// Shared encoder/middle/decoder skeleton for the three U-shaped nets.
    fn unet_body(&mut self, input: Var, temb: Option<Var>, in_ch: usize, out_ch: usize) -> Result<Var> {
        let cfg = self.cfg;
        let chans: Vec<usize> = cfg
            .channel_multipliers
            .iter()
            .map(|m| m * cfg.base_channels)
            .collect();
        let attn_stages: &[usize] = match cfg.arch {
            Arch::UNetDirect => &[],
            _ => &[1, 2],
        };
        let rb = cfg.res_blocks_per_stage;
        let n_stages = chans.len();

        let mut h = self.conv(input, "stem", in_ch, chans[0], 3, Init::FanIn(9 * in_ch))?;
        let mut skips = Vec::with_capacity(n_stages);
        let mut cur = chans[0];
        for (i, &c) in chans.iter().enumerate() {
            for j in 0..rb {
                h = self.res_block(h, temb, &format!("enc{i}.res{j}"), cur, c)?;
                cur = c;
                if attn_stages.contains(&i) {
                    h = self.attn_spatial(h, &format!("enc{i}.attn{j}"), c)?;
                }
            }
            skips.push(h);
            if i + 1 < n_stages {
                h = self.downsample(h, &format!("down{i}"), c, chans[i + 1])?;
                cur = chans[i + 1];
            }
        }

        h = match cfg.arch {
            Arch::UNetDirect => h,
            Arch::Adm => self.attn_spatial(h, "mid.attn", cur)?,
            Arch::UVit => self.uvit_middle(h, temb.expect("uvit is conditioned on t"), cur)?,
            Arch::DiT => unreachable!("DiT has no U-shaped body"),
        };

        for i in (0..n_stages).rev() {
            let c = chans[i];
            if i + 1 < n_stages {
                h = self.upsample(h, &format!("up{i}"), cur, c)?;
                cur = c;
            }
            h = self.g.add(h, skips[i])?;
            for j in 0..rb {
                h = self.res_block(h, temb, &format!("dec{i}.res{j}"), cur, c)?;
                cur = c;
                if attn_stages.contains(&i) {
                    h = self.attn_spatial(h, &format!("dec{i}.attn{j}"), c)?;
                }
            }
        }

        let go = self.b.param(self.g, "out.norm.g", &[cur], Init::One)?;
        h = self.g.group_norm(h, go, cfg.norm_groups)?;
        h = self.g.silu(h);
        self.conv(h, "out.conv", cur, out_ch, 3, Init::Zero)
    }

    fn uvit_middle(&mut self, h: Var, temb: Var, c: usize) -> Result<Var> {
        let cfg = self.cfg;
        let d = cfg.hidden_size;
        let tdim = cfg.time_dim();
        let shape = self.g.value(h).shape().to_vec();
        let (bsz, hh, ww) = (shape[0], shape[2], shape[3]);
        let n = hh * ww;
        let mut tok = self.g.permute(h, &[0, 2, 3, 1])?;
        tok = self.g.reshape(tok, &[bsz, n, c])?;
        tok = self.linear(tok, "mid.in", c, d, true, Init::FanIn(c))?;
        let pos = self.token_position_embedding(bsz, n, d)?;
        tok = self.g.add(tok, pos)?;
        for k in 0..cfg.transformer_depth {
            tok = self.transformer_block(tok, temb, &format!("mid.blk{k}"), d, tdim)?;
        }
        tok = self.linear(tok, "mid.out", d, c, true, Init::FanIn(d))?;
        let mut out = self.g.reshape(tok, &[bsz, hh, ww, c])?;
        out = self.g.permute(out, &[0, 3, 1, 2])?;
        self.g.add(h, out)
    }

    fn dit_forward(&mut self, input: Var, t: &[f64], in_ch: usize, out_ch: usize) -> Result<Var> {
        let cfg = self.cfg;
        let d = cfg.hidden_size;
        let p = cfg.patch_size;
        let shape = self.g.value(input).shape().to_vec();
        let (bsz, hh, ww) = (shape[0], shape[2], shape[3]);
        let temb = self.time_embedding(t, d)?;
        let mut tok = self.g.patchify(input, p)?;
        tok = self.linear(tok, "patch", p * p * in_ch, d, true, Init::FanIn(p * p * in_ch))?;
        let n = (hh / p) * (ww / p);
        let pos = self.token_position_embedding(bsz, n, d)?;
        tok = self.g.add(tok, pos)?;
        for k in 0..cfg.transformer_depth {
            tok = self.transformer_block(tok, temb, &format!("blk{k}"), d, d)?;
        }
        let ng = self.b.param(self.g, "final.norm.g", &[d], Init::One)?;
        tok = self.g.rmsnorm(tok, ng)?;
        let ts = self.g.silu(temb);
        let ada = self.linear(ts, "final.ada", d, 2 * d, true, Init::Zero)?;
        let shift = self.g.narrow(ada, 1, 0, d)?;
        let scale = self.g.narrow(ada, 1, d, d)?;
        let one = self.g.constant(ArrayD::from_elem(vec![bsz, d], F::one()));
        let sp = self.g.add(one, scale)?;
        tok = self.g.mul_row_vec(tok, sp)?;
        tok = self.g.add_row_vec(tok, shift)?;
        tok = self.linear(tok, "final.proj", d, p * p * out_ch, true, Init::Zero)?;
        self.g.unpatchify(tok, p, out_ch, hh, ww)
    }
}

/// Run one forward pass of `cfg` on the tape. `z` and `cond` are
/// (B, 1, H, W); the output has the same shape. Inputs whose spatial size is
/// not a multiple of the architecture's stride are zero-padded and the
/// output cropped back.
pub fn forward<F: NdFloat>(
    g: &mut Graph<F>,
    binder: &mut Binder<F>,
    cfg: &ArchConfig,
    z: Var,
    t: &[f64],
    cond: Var,
) -> Result<Var> {
    cfg.validate()?;
    let zs = g.value(z).shape().to_vec();
    let cs = g.value(cond).shape().to_vec();
    if zs.len() != 4 || zs != cs {
        return Err(Error::ShapeMismatch { expected: zs, got: cs });
    }
    if zs[0] != t.len() {
        return Err(Error::InvalidArgument(format!(
            "batch {} but {} time values",
            zs[0],
            t.len()
        )));
    }
    let (h, w) = (zs[2], zs[3]);
    let mult = cfg.stride_multiple();
    let ph = h.div_ceil(mult) * mult - h;
    let pw = w.div_ceil(mult) * mult - w;

    let mut input = match cfg.arch {
        Arch::UNetDirect => cond,
        _ => g.concat(&[z, cond], 1)?,
    };
    if ph > 0 || pw > 0 {
        input = g.pad2d(input, [0, ph, 0, pw])?;
    }

    let mut net = Net { g, b: binder, cfg };
    let out = match cfg.arch {
        Arch::UNetDirect => net.unet_body(input, None, 1, 1)?,
        Arch::Adm => {
            let temb = net.time_embedding(t, cfg.time_dim())?;
            net.unet_body(input, Some(temb), 2, 1)?
        }
        Arch::UVit => {
            let temb = net.time_embedding(t, cfg.time_dim())?;
            let bands = net.g.dwt2(input)?;
            let body = net.unet_body(bands, Some(temb), 8, 4)?;
            net.g.idwt2(body)?
        }
        Arch::DiT => net.dit_forward(input, t, 2, 1)?,
    };
    let mut out = out;
    if ph > 0 {
        out = g.narrow(out, 2, 0, h)?;
    }
    if pw > 0 {
        out = g.narrow(out, 3, 0, w)?;
    }
    Ok(out)
}

/// A built model: structure plus parameters.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub config: ArchConfig,
    pub params: ParamTree<f32>,
}

impl DenoiserModel {
    /// Initialize parameters deterministically from `seed`.
    pub fn build(cfg: &ArchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut g = Graph::<f32>::new();
        let mut binder = Binder::build(seed);
        let m = cfg.stride_multiple().max(4);
        let z = g.constant(ArrayD::zeros(vec![1, 1, m, m]));
        let cond = g.constant(ArrayD::zeros(vec![1, 1, m, m]));
        forward(&mut g, &mut binder, cfg, z, &[0.5], cond)?;
        Ok(DenoiserModel {
            config: cfg.clone(),
            params: binder.into_tree(g),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Pure inference pass; (B, 1, H, W) in and out.
    pub fn apply(&self, z: &ArrayD<f32>, t: &[f64], cond: &ArrayD<f32>) -> Result<ArrayD<f32>> {
        let mut g = Graph::<f32>::new();
        let zv = g.constant(z.clone());
        let cv = g.constant(cond.clone());
        let mut binder = Binder::from_tree(&self.params, false);
        let out = forward(&mut g, &mut binder, &self.config, zv, t, cv)?;
        Ok(g.value(out).clone())
    }
}

impl Denoiser<f32> for DenoiserModel {
    fn predict_v(
        &self,
        z: &ArrayD<f32>,
        t: f64,
        condition: Option<&ArrayD<f32>>,
        _step: usize,
    ) -> Result<ArrayD<f32>> {
        let cond = condition.ok_or_else(|| {
            Error::InvalidArgument("translation models require a condition image".into())
        })?;
        let ts = vec![t; z.shape()[0]];
        self.apply(z, &ts, cond)
    }
}

/// Adapts the direct-regression baseline to the sampling interface: the
/// network output is a clean-image estimate, re-expressed as the equivalent
/// v so every sampler step lands exactly on that estimate.
pub struct DirectAdapter<'a> {
    pub model: &'a DenoiserModel,
    pub schedule: crate::schedule::NoiseSchedule,
}

impl Denoiser<f32> for DirectAdapter<'_> {
    fn predict_v(
        &self,
        z: &ArrayD<f32>,
        t: f64,
        condition: Option<&ArrayD<f32>>,
        _step: usize,
    ) -> Result<ArrayD<f32>> {
        let cond = condition.ok_or_else(|| {
            Error::InvalidArgument("translation models require a condition image".into())
        })?;
        let ts = vec![t; z.shape()[0]];
        let x_hat = self.model.apply(z, &ts, cond)?;
        // v with x_from_v(z, v) == x_hat
        let (a, sg) = self.schedule.alpha_sigma(t)?;
        Ok((z.mapv(|v| v * a as f32) - &x_hat).mapv(|v| v / sg as f32))
    }
}

/// Adam first/second-moment accumulators.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ParamTree<f32>,
    pub v: ParamTree<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamTree<f32>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

pub const ADAM_LR: f64 = 1e-4;
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// One Adam update with bias correction. Parameters missing a gradient
/// (e.g. layers unused on this pass) are left untouched but their moments
/// still decay.
pub fn adam_step(
    params: &mut ParamTree<f32>,
    grads: &ParamTree<f32>,
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    state.step += 1;
    let (b1, b2) = (betas.0 as f32, betas.1 as f32);
    let bc1 = 1.0 - betas.0.powi(state.step as i32) as f32;
    let bc2 = 1.0 - betas.1.powi(state.step as i32) as f32;
    let lr = lr as f32;
    let eps = eps as f32;
    for (name, p) in params.tensors.iter_mut() {
        let m = state.m.tensors.get_mut(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
        let v = state.v.tensors.get_mut(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
        let zero;
        let g = match grads.get(name) {
            Some(g) => {
                if g.shape() != p.shape() {
                    return Err(Error::ShapeMismatch {
                        expected: p.shape().to_vec(),
                        got: g.shape().to_vec(),
                    });
                }
                g
            }
            None => {
                zero = ArrayD::zeros(p.raw_dim());
                &zero
            }
        };
        azip_adam(p, g, m, v, b1, b2, bc1, bc2, lr, eps);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn azip_adam(
    p: &mut ArrayD<f32>,
    g: &ArrayD<f32>,
    m: &mut ArrayD<f32>,
    v: &mut ArrayD<f32>,
    b1: f32,
    b2: f32,
    bc1: f32,
    bc2: f32,
    lr: f32,
    eps: f32,
) {
    ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mh = *m / bc1;
        let vh = *v / bc2;
        *p -= lr * mh / (vh.sqrt() + eps);
    });
}
