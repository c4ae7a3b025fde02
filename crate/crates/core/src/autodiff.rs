//! Minimal reverse-mode automatic differentiation over dynamic-rank arrays.
//!
//! A [`Graph`] is an append-only tape: every operation records its parents
//! and enough metadata to replay the chain rule in reverse. The op set is
//! fixed to what the denoiser architectures need — elementwise arithmetic,
//! matrix/batched-matrix products, im2col convolution, reshapes/permutes,
//! normalizations, softmax, concat/slice/pad, pixel-shuffle, patchify, and
//! the wavelet transform pair. Convolution recomputes its im2col buffer in
//! the backward pass instead of caching it, trading a little CPU for memory.
//!
//! The graph is generic over `f32` (training/inference) and `f64`
//! (finite-difference gradient checks).

use ndarray::{ArrayD, Axis, Ix2, Ix3, Ix4, IxDyn, NdFloat};
use num_traits::NumCast;

use crate::error::{Error, Result};
use crate::wavelet::{self, Subbands};

pub const NORM_EPS: f64 = 1e-6;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddBiasLast,
    AddBiasChannel,
    AddChannelVec,
    AddRowVec,
    MulRowVec,
    Matmul,
    Bmm,
    Conv2d { pad: usize },
    Reshape,
    Permute { axes: Vec<usize> },
    MeanAll,
    Silu,
    Sigmoid,
    RmsNorm,
    GroupNorm { groups: usize },
    SoftmaxLast,
    Concat { axis: usize },
    Narrow { axis: usize, start: usize },
    Pad2d { pads: [usize; 4] },
    PixelShuffle { r: usize },
    PixelUnshuffle { r: usize },
    Patchify { p: usize },
    Unpatchify { p: usize },
    Dwt2,
    Idwt2,
}

struct Node<F: NdFloat> {
    value: ArrayD<F>,
    parents: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<F: NdFloat> {
    nodes: Vec<Node<F>>,
}

fn cast<F: NdFloat>(x: f64) -> F {
    <F as NumCast>::from(x).expect("cast")
}

impl<F: NdFloat> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: NdFloat> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    /// Consume the tape and hand back every node value, indexed by
    /// [`Var`] position. Lets a builder extract freshly initialized
    /// parameters without copying them.
    pub fn into_values(self) -> Vec<ArrayD<F>> {
        self.nodes.into_iter().map(|n| n.value).collect()
    }

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar(&self, v: Var) -> F {
        *self.nodes[v.0].value.iter().next().expect("empty tensor")
    }

    fn push(&mut self, value: ArrayD<F>, parents: Vec<usize>, op: Op) -> Var {
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => parents.iter().any(|&p| self.nodes[p].requires_grad),
        };
        self.nodes.push(Node {
            value,
            parents,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input (gradients are tracked).
    pub fn leaf(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, vec![], Op::Leaf)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, vec![], Op::Constant)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                expected: sa.to_vec(),
                got: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(v, vec![a.0, b.0], Op::Add))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        Ok(self.push(v, vec![a.0, b.0], Op::Sub))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        Ok(self.push(v, vec![a.0, b.0], Op::Mul))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * cast::<F>(c));
        self.push(v, vec![a.0], Op::Scale(c))
    }

    /// x (..., D) + b (D), broadcast over leading axes.
    pub fn add_bias_last(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let bs = self.nodes[b.0].value.shape();
        if bs.len() != 1 || bs[0] != *xs.last().unwrap() {
            return Err(Error::ShapeMismatch {
                expected: vec![*xs.last().unwrap()],
                got: bs.to_vec(),
            });
        }
        let d = bs[0];
        let mut v = self.nodes[x.0].value.clone();
        let bias = self.nodes[b.0].value.clone();
        for mut lane in v.lanes_mut(Axis(xs.len() - 1)) {
            for i in 0..d {
                lane[i] = lane[i] + bias[i];
            }
        }
        Ok(self.push(v, vec![x.0, b.0], Op::AddBiasLast))
    }

    /// x (B, C, H, W) + b (C).
    pub fn add_bias_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let bs = self.nodes[b.0].value.shape();
        if xs.len() != 4 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::ShapeMismatch {
                expected: vec![xs.get(1).copied().unwrap_or(0)],
                got: bs.to_vec(),
            });
        }
        let mut v = self.nodes[x.0].value.clone();
        let bias = self.nodes[b.0].value.clone();
        for (c, mut sub) in v.axis_iter_mut(Axis(1)).enumerate() {
            sub.mapv_inplace(|u| u + bias[c]);
        }
        Ok(self.push(v, vec![x.0, b.0], Op::AddBiasChannel))
    }

    /// x (B, C, H, W) + v (B, C), broadcast over spatial axes.
    pub fn add_channel_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let vs = self.nodes[v.0].value.shape();
        if xs.len() != 4 || vs != [xs[0], xs[1]] {
            return Err(Error::ShapeMismatch {
                expected: vec![xs[0], xs[1]],
                got: vs.to_vec(),
            });
        }
        let mut out = self.nodes[x.0].value.clone();
        let vec = self.nodes[v.0].value.clone();
        for b in 0..xs[0] {
            for c in 0..xs[1] {
                let add = vec[[b, c]];
                for h in 0..xs[2] {
                    for w in 0..xs[3] {
                        out[[b, c, h, w]] = out[[b, c, h, w]] + add;
                    }
                }
            }
        }
        Ok(self.push(out, vec![x.0, v.0], Op::AddChannelVec))
    }

    fn rowvec_check(&self, x: Var, v: Var) -> Result<(usize, usize, usize)> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let vs = self.nodes[v.0].value.shape();
        if xs.len() != 3 || vs != [xs[0], xs[2]] {
            return Err(Error::ShapeMismatch {
                expected: vec![xs[0], *xs.last().unwrap_or(&0)],
                got: vs.to_vec(),
            });
        }
        Ok((xs[0], xs[1], xs[2]))
    }

    /// x (B, N, D) + v (B, D), broadcast over the token axis.
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (b, n, d) = self.rowvec_check(x, v)?;
        let mut out = self.nodes[x.0].value.clone();
        let vec = self.nodes[v.0].value.clone();
        for bi in 0..b {
            for ni in 0..n {
                for di in 0..d {
                    out[[bi, ni, di]] = out[[bi, ni, di]] + vec[[bi, di]];
                }
            }
        }
        Ok(self.push(out, vec![x.0, v.0], Op::AddRowVec))
    }

    /// x (B, N, D) * v (B, D), broadcast over the token axis.
    pub fn mul_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (b, n, d) = self.rowvec_check(x, v)?;
        let mut out = self.nodes[x.0].value.clone();
        let vec = self.nodes[v.0].value.clone();
        for bi in 0..b {
            for ni in 0..n {
                for di in 0..d {
                    out[[bi, ni, di]] = out[[bi, ni, di]] * vec[[bi, di]];
                }
            }
        }
        Ok(self.push(out, vec![x.0, v.0], Op::MulRowVec))
    }

    /// (N, K) x (K, M) matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::InvalidArgument("matmul expects 2D".into()))?;
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::InvalidArgument("matmul expects 2D".into()))?;
        if av.ncols() != bv.nrows() {
            return Err(Error::ShapeMismatch {
                expected: vec![av.ncols()],
                got: vec![bv.nrows()],
            });
        }
        let v = av.dot(&bv).into_dyn();
        Ok(self.push(v, vec![a.0, b.0], Op::Matmul))
    }

    /// (G, N, K) x (G, K, M) batched matrix product.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|_| Error::InvalidArgument("bmm expects 3D".into()))?;
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|_| Error::InvalidArgument("bmm expects 3D".into()))?;
        let (g, n, k) = av.dim();
        let (g2, k2, m) = bv.dim();
        if g != g2 || k != k2 {
            return Err(Error::ShapeMismatch {
                expected: vec![g, k],
                got: vec![g2, k2],
            });
        }
        let mut out = ndarray::Array3::<F>::zeros((g, n, m));
        for gi in 0..g {
            let prod = av.index_axis(Axis(0), gi).dot(&bv.index_axis(Axis(0), gi));
            out.index_axis_mut(Axis(0), gi).assign(&prod);
        }
        Ok(self.push(out.into_dyn(), vec![a.0, b.0], Op::Bmm))
    }

    /// Stride-1 2D convolution: x (B, Cin, H, W) * w (Cout, Cin, kh, kw),
    /// symmetric zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| Error::InvalidArgument("conv2d input must be 4D".into()))?;
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| Error::InvalidArgument("conv2d weight must be 4D".into()))?;
        let (bsz, cin, h, wd) = xv.dim();
        let (cout, cin2, kh, kw) = wv.dim();
        if cin != cin2 {
            return Err(Error::ShapeMismatch {
                expected: vec![cin],
                got: vec![cin2],
            });
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::InvalidArgument("kernel larger than padded input".into()));
        }
        let h2 = h + 2 * pad - kh + 1;
        let w2 = wd + 2 * pad - kw + 1;
        let wmat = wv
            .to_shape((cout, cin * kh * kw))
            .expect("standard layout")
            .to_owned();
        let mut out = ndarray::Array4::<F>::zeros((bsz, cout, h2, w2));
        for b in 0..bsz {
            let cols = im2col(&xv.index_axis(Axis(0), b), kh, kw, pad);
            let prod = wmat.dot(&cols); // (Cout, h2*w2)
            let prod = prod.to_shape((cout, h2, w2)).expect("reshape").to_owned();
            out.index_axis_mut(Axis(0), b).assign(&prod);
        }
        Ok(self.push(out.into_dyn(), vec![x.0, w.0], Op::Conv2d { pad }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.len() {
            return Err(Error::ShapeMismatch {
                expected: self.nodes[x.0].value.shape().to_vec(),
                got: shape.to_vec(),
            });
        }
        let v = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("checked length");
        Ok(self.push(v, vec![x.0], Op::Reshape))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        if axes.len() != self.nodes[x.0].value.ndim() {
            return Err(Error::InvalidArgument("permute axes rank mismatch".into()));
        }
        let v = self.nodes[x.0]
            .value
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        Ok(self.push(v, vec![x.0], Op::Permute { axes: axes.to_vec() }))
    }

    /// Mean over all elements; output is 0-d.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = cast::<F>(self.nodes[x.0].value.len() as f64);
        let m = self.nodes[x.0].value.sum() / n;
        let v = ArrayD::from_elem(IxDyn(&[]), m);
        self.push(v, vec![x.0], Op::MeanAll)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|u| u * sigmoid_s(u));
        self.push(v, vec![x.0], Op::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(sigmoid_s);
        self.push(v, vec![x.0], Op::Sigmoid)
    }

    /// RMS normalization over the last axis with a learned scale:
    /// y = x / sqrt(mean(x^2) + eps) * scale.
    pub fn rmsnorm(&mut self, x: Var, scale: Var) -> Result<Var> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let d = *xs.last().ok_or_else(|| Error::InvalidArgument("rmsnorm on 0-d".into()))?;
        let ss = self.nodes[scale.0].value.shape();
        if ss != [d] {
            return Err(Error::ShapeMismatch {
                expected: vec![d],
                got: ss.to_vec(),
            });
        }
        let g = self.nodes[scale.0].value.clone();
        let mut v = self.nodes[x.0].value.clone();
        let eps = cast::<F>(NORM_EPS);
        let dn = cast::<F>(d as f64);
        for mut lane in v.lanes_mut(Axis(xs.len() - 1)) {
            let mut m = F::zero();
            for i in 0..d {
                m = m + lane[i] * lane[i];
            }
            let r = (m / dn + eps).sqrt();
            for i in 0..d {
                lane[i] = lane[i] / r * g[i];
            }
        }
        Ok(self.push(v, vec![x.0, scale.0], Op::RmsNorm))
    }

    /// Group normalization of (B, C, H, W) with a learned per-channel scale
    /// (no shift): y = (x - mu) / sqrt(var + eps) * gamma.
    pub fn group_norm(&mut self, x: Var, gamma: Var, groups: usize) -> Result<Var> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::InvalidArgument("group_norm expects 4D".into()));
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if c % groups != 0 || groups == 0 {
            return Err(Error::InvalidArgument(format!(
                "channels {c} not divisible by groups {groups}"
            )));
        }
        if self.nodes[gamma.0].value.shape() != [c] {
            return Err(Error::ShapeMismatch {
                expected: vec![c],
                got: self.nodes[gamma.0].value.shape().to_vec(),
            });
        }
        let g = self.nodes[gamma.0].value.clone();
        let mut v = self.nodes[x.0].value.clone();
        let cpg = c / groups;
        let n = cast::<F>((cpg * h * w) as f64);
        let eps = cast::<F>(NORM_EPS);
        for b in 0..bsz {
            for gi in 0..groups {
                let mut mean = F::zero();
                for ci in gi * cpg..(gi + 1) * cpg {
                    for hi in 0..h {
                        for wi in 0..w {
                            mean = mean + v[[b, ci, hi, wi]];
                        }
                    }
                }
                mean = mean / n;
                let mut var = F::zero();
                for ci in gi * cpg..(gi + 1) * cpg {
                    for hi in 0..h {
                        for wi in 0..w {
                            let d = v[[b, ci, hi, wi]] - mean;
                            var = var + d * d;
                        }
                    }
                }
                var = var / n;
                let inv = F::one() / (var + eps).sqrt();
                for ci in gi * cpg..(gi + 1) * cpg {
                    for hi in 0..h {
                        for wi in 0..w {
                            v[[b, ci, hi, wi]] = (v[[b, ci, hi, wi]] - mean) * inv * g[ci];
                        }
                    }
                }
            }
        }
        Ok(self.push(v, vec![x.0, gamma.0], Op::GroupNorm { groups }))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let nd = self.nodes[x.0].value.ndim();
        let mut v = self.nodes[x.0].value.clone();
        for mut lane in v.lanes_mut(Axis(nd - 1)) {
            let mut mx = lane[0];
            for u in lane.iter() {
                if *u > mx {
                    mx = *u;
                }
            }
            let mut sum = F::zero();
            for u in lane.iter_mut() {
                *u = (*u - mx).exp();
                sum = sum + *u;
            }
            for u in lane.iter_mut() {
                *u = *u / sum;
            }
        }
        self.push(v, vec![x.0], Op::SoftmaxLast)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of nothing".into()));
        }
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views)
            .map_err(|e| Error::InvalidArgument(format!("concat: {e}")))?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(v, ids, Op::Concat { axis }))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sh = self.nodes[x.0].value.shape().to_vec();
        if axis >= sh.len() || start + len > sh[axis] {
            return Err(Error::InvalidArgument(format!(
                "narrow [{start}, {}) out of bounds on axis {axis} of {sh:?}",
                start + len
            )));
        }
        let v = self.nodes[x.0]
            .value
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        Ok(self.push(v, vec![x.0], Op::Narrow { axis, start }))
    }

    /// Zero-pad (B, C, H, W) by (top, bottom, left, right).
    pub fn pad2d(&mut self, x: Var, pads: [usize; 4]) -> Result<Var> {
        let sh = self.nodes[x.0].value.shape().to_vec();
        if sh.len() != 4 {
            return Err(Error::InvalidArgument("pad2d expects 4D".into()));
        }
        let [t, b, l, r] = pads;
        let mut v = ArrayD::zeros(vec![sh[0], sh[1], sh[2] + t + b, sh[3] + l + r]);
        let src = &self.nodes[x.0].value;
        for bi in 0..sh[0] {
            for ci in 0..sh[1] {
                for hi in 0..sh[2] {
                    for wi in 0..sh[3] {
                        v[[bi, ci, hi + t, wi + l]] = src[[bi, ci, hi, wi]];
                    }
                }
            }
        }
        Ok(self.push(v, vec![x.0], Op::Pad2d { pads }))
    }

    /// (B, C*r^2, H, W) -> (B, C, H*r, W*r).
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let sh = self.nodes[x.0].value.shape().to_vec();
        if sh.len() != 4 || sh[1] % (r * r) != 0 {
            return Err(Error::InvalidArgument(format!(
                "pixel_shuffle: channels {} not divisible by {}",
                sh.get(1).copied().unwrap_or(0),
                r * r
            )));
        }
        let v = shuffle_fwd(&self.nodes[x.0].value, r);
        Ok(self.push(v, vec![x.0], Op::PixelShuffle { r }))
    }

    /// (B, C, H, W) -> (B, C*r^2, H/r, W/r).
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let sh = self.nodes[x.0].value.shape().to_vec();
        if sh.len() != 4 || sh[2] % r != 0 || sh[3] % r != 0 {
            return Err(Error::InvalidArgument(format!(
                "pixel_unshuffle: spatial dims {:?} not divisible by {r}",
                &sh[2..]
            )));
        }
        let v = unshuffle_fwd(&self.nodes[x.0].value, r);
        Ok(self.push(v, vec![x.0], Op::PixelUnshuffle { r }))
    }

    /// (B, C, H, W) -> (B, (H/p)(W/p), p*p*C) token sequence.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let sh = self.nodes[x.0].value.shape().to_vec();
        if sh.len() != 4 || sh[2] % p != 0 || sh[3] % p != 0 {
            return Err(Error::InvalidArgument(format!(
                "patchify: spatial dims {:?} not divisible by {p}",
                &sh[2..]
            )));
        }
        let v = patchify_fwd(&self.nodes[x.0].value, p);
        Ok(self.push(v, vec![x.0], Op::Patchify { p }))
    }

    /// Inverse of [`Graph::patchify`] for a known (C, H, W).
    pub fn unpatchify(&mut self, x: Var, p: usize, c: usize, h: usize, w: usize) -> Result<Var> {
        let sh = self.nodes[x.0].value.shape().to_vec();
        if sh.len() != 3 || sh[1] != (h / p) * (w / p) || sh[2] != p * p * c {
            return Err(Error::InvalidArgument(format!(
                "unpatchify: sequence {sh:?} incompatible with ({c}, {h}, {w}) / p={p}"
            )));
        }
        let v = unpatchify_fwd(&self.nodes[x.0].value, p, c, h, w);
        Ok(self.push(v, vec![x.0], Op::Unpatchify { p }))
    }

    /// Batched one-level wavelet analysis: (B, C, H, W) -> (B, 4C, H/2, W/2),
    /// channels ordered LL, LH, HL, HH.
    pub fn dwt2(&mut self, x: Var) -> Result<Var> {
        let sh = self.nodes[x.0].value.shape().to_vec();
        if sh.len() != 4 {
            return Err(Error::InvalidArgument("dwt2 expects 4D".into()));
        }
        let mut out = ArrayD::zeros(vec![sh[0], 4 * sh[1], sh[2] / 2, sh[3] / 2]);
        for b in 0..sh[0] {
            let plane = self.nodes[x.0].value.index_axis(Axis(0), b).to_owned();
            let bands = wavelet::dwt2(&plane)?;
            pack_bands(&mut out, b, &bands, sh[1]);
        }
        Ok(self.push(out, vec![x.0], Op::Dwt2))
    }

    /// Batched synthesis: (B, 4C, H, W) -> (B, C, 2H, 2W).
    pub fn idwt2(&mut self, x: Var) -> Result<Var> {
        let sh = self.nodes[x.0].value.shape().to_vec();
        if sh.len() != 4 || sh[1] % 4 != 0 {
            return Err(Error::InvalidArgument("idwt2 expects 4D with 4k channels".into()));
        }
        let c = sh[1] / 4;
        let mut out = ArrayD::zeros(vec![sh[0], c, 2 * sh[2], 2 * sh[3]]);
        for b in 0..sh[0] {
            let bands = unpack_bands(&self.nodes[x.0].value, b, c);
            let img = wavelet::idwt2(&bands)?;
            out.index_axis_mut(Axis(0), b).assign(&img);
        }
        Ok(self.push(out, vec![x.0], Op::Idwt2))
    }

    /// Reverse-mode gradients of a 0-d `loss` node with respect to every
    /// grad-requiring node; index the result with [`Gradients::get`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if !self.nodes[loss.0].value.shape().is_empty() {
            return Err(Error::InvalidArgument("backward expects a 0-d loss".into()));
        }
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[]), F::one()));
        for i in (0..=loss.0).rev() {
            let Some(go) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let pgrads = self.op_backward(node, &go)?;
            for (slot, pg) in node.parents.iter().zip(pgrads.into_iter()) {
                if !self.nodes[*slot].requires_grad {
                    continue;
                }
                match &mut grads[*slot] {
                    Some(acc) => *acc = &*acc + &pg,
                    g @ None => *g = Some(pg),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(go);
            }
        }
        Ok(Gradients { grads })
    }

    fn op_backward(&self, node: &Node<F>, go: &ArrayD<F>) -> Result<Vec<ArrayD<F>>> {
        let pv = |k: usize| &self.nodes[node.parents[k]].value;
        Ok(match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add => vec![go.clone(), go.clone()],
            Op::Sub => vec![go.clone(), go.mapv(|u| -u)],
            Op::Mul => vec![go * pv(1), go * pv(0)],
            Op::Scale(c) => vec![go.mapv(|u| u * cast::<F>(*c))],
            Op::AddBiasLast => {
                let d = pv(1).len();
                let mut gb = ArrayD::zeros(vec![d]);
                for lane in go.lanes(Axis(go.ndim() - 1)) {
                    for i in 0..d {
                        gb[i] = gb[i] + lane[i];
                    }
                }
                vec![go.clone(), gb]
            }
            Op::AddBiasChannel => {
                let c = pv(1).len();
                let mut gb = ArrayD::zeros(vec![c]);
                for (ci, sub) in go.axis_iter(Axis(1)).enumerate() {
                    gb[ci] = sub.sum();
                }
                vec![go.clone(), gb]
            }
            Op::AddChannelVec => {
                let sh = go.shape();
                let mut gv = ArrayD::zeros(vec![sh[0], sh[1]]);
                for b in 0..sh[0] {
                    for c in 0..sh[1] {
                        let mut s = F::zero();
                        for h in 0..sh[2] {
                            for w in 0..sh[3] {
                                s = s + go[[b, c, h, w]];
                            }
                        }
                        gv[[b, c]] = s;
                    }
                }
                vec![go.clone(), gv]
            }
            Op::AddRowVec => {
                let sh = go.shape();
                let mut gv = ArrayD::zeros(vec![sh[0], sh[2]]);
                for b in 0..sh[0] {
                    for n in 0..sh[1] {
                        for d in 0..sh[2] {
                            gv[[b, d]] = gv[[b, d]] + go[[b, n, d]];
                        }
                    }
                }
                vec![go.clone(), gv]
            }
            Op::MulRowVec => {
                let x = pv(0);
                let v = pv(1);
                let sh = go.shape();
                let mut gx = go.clone();
                let mut gv = ArrayD::zeros(vec![sh[0], sh[2]]);
                for b in 0..sh[0] {
                    for n in 0..sh[1] {
                        for d in 0..sh[2] {
                            gv[[b, d]] = gv[[b, d]] + go[[b, n, d]] * x[[b, n, d]];
                            gx[[b, n, d]] = go[[b, n, d]] * v[[b, d]];
                        }
                    }
                }
                vec![gx, gv]
            }
            Op::Matmul => {
                let a = pv(0).view().into_dimensionality::<Ix2>().unwrap();
                let b = pv(1).view().into_dimensionality::<Ix2>().unwrap();
                let g = go.view().into_dimensionality::<Ix2>().unwrap();
                vec![g.dot(&b.t()).into_dyn(), a.t().dot(&g).into_dyn()]
            }
            Op::Bmm => {
                let a = pv(0).view().into_dimensionality::<Ix3>().unwrap();
                let b = pv(1).view().into_dimensionality::<Ix3>().unwrap();
                let g = go.view().into_dimensionality::<Ix3>().unwrap();
                let mut ga = ndarray::Array3::<F>::zeros(a.dim());
                let mut gb = ndarray::Array3::<F>::zeros(b.dim());
                for i in 0..a.dim().0 {
                    let gi = g.index_axis(Axis(0), i);
                    ga.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&b.index_axis(Axis(0), i).t()));
                    gb.index_axis_mut(Axis(0), i)
                        .assign(&a.index_axis(Axis(0), i).t().dot(&gi));
                }
                vec![ga.into_dyn(), gb.into_dyn()]
            }
            Op::Conv2d { pad } => {
                let x = pv(0).view().into_dimensionality::<Ix4>().unwrap();
                let w = pv(1).view().into_dimensionality::<Ix4>().unwrap();
                let g = go.view().into_dimensionality::<Ix4>().unwrap();
                let (bsz, _cin, h, wd) = x.dim();
                let (cout, cin, kh, kw) = w.dim();
                let (_, _, h2, w2) = g.dim();
                let wmat = w.to_shape((cout, cin * kh * kw)).unwrap().to_owned();
                let mut gw = ndarray::Array2::<F>::zeros((cout, cin * kh * kw));
                let mut gx = ndarray::Array4::<F>::zeros(x.dim());
                for b in 0..bsz {
                    // im2col is recomputed here rather than cached at forward
                    let cols = im2col(&x.index_axis(Axis(0), b), kh, kw, *pad);
                    let gmat = g
                        .index_axis(Axis(0), b)
                        .to_shape((cout, h2 * w2))
                        .unwrap()
                        .to_owned();
                    gw += &gmat.dot(&cols.t());
                    let gcols = wmat.t().dot(&gmat);
                    col2im(&gcols, &mut gx.index_axis_mut(Axis(0), b), kh, kw, *pad, h, wd);
                }
                vec![
                    gx.into_dyn(),
                    gw.into_shape_with_order((cout, cin, kh, kw)).unwrap().into_dyn(),
                ]
            }
            Op::Reshape => {
                let v = go
                    .clone()
                    .into_shape_with_order(IxDyn(pv(0).shape()))
                    .expect("same length");
                vec![v]
            }
            Op::Permute { axes } => {
                let mut inv = vec![0usize; axes.len()];
                for (i, a) in axes.iter().enumerate() {
                    inv[*a] = i;
                }
                let v = go
                    .clone()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned();
                vec![v]
            }
            Op::MeanAll => {
                let n = cast::<F>(pv(0).len() as f64);
                let g = *go.iter().next().unwrap() / n;
                vec![ArrayD::from_elem(IxDyn(pv(0).shape()), g)]
            }
            Op::Silu => {
                let gx = pv(0).mapv(|u| {
                    let s = sigmoid_s(u);
                    s * (F::one() + u * (F::one() - s))
                });
                vec![&gx * go]
            }
            Op::Sigmoid => {
                let gx = node.value.mapv(|s| s * (F::one() - s));
                vec![&gx * go]
            }
            Op::RmsNorm => {
                let x = pv(0);
                let g = pv(1);
                let xs = x.shape().to_vec();
                let d = *xs.last().unwrap();
                let dn = cast::<F>(d as f64);
                let eps = cast::<F>(NORM_EPS);
                let mut gx = ArrayD::zeros(x.raw_dim());
                let mut gg = ArrayD::<F>::zeros(vec![d]);
                let last = Axis(xs.len() - 1);
                for ((xl, gol), mut gxl) in x
                    .lanes(last)
                    .into_iter()
                    .zip(go.lanes(last))
                    .zip(gx.lanes_mut(last))
                {
                    let mut m = F::zero();
                    for i in 0..d {
                        m = m + xl[i] * xl[i];
                    }
                    let r = (m / dn + eps).sqrt();
                    let r3 = r * r * r;
                    let mut s = F::zero();
                    for i in 0..d {
                        s = s + gol[i] * g[i] * xl[i];
                    }
                    for i in 0..d {
                        gxl[i] = gol[i] * g[i] / r - xl[i] * s / (dn * r3);
                        gg[i] = gg[i] + gol[i] * xl[i] / r;
                    }
                }
                vec![gx, gg]
            }
            Op::GroupNorm { groups } => {
                let x = pv(0);
                let gamma = pv(1);
                let sh = x.shape().to_vec();
                let (bsz, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                let cpg = c / groups;
                let n = cast::<F>((cpg * h * w) as f64);
                let eps = cast::<F>(NORM_EPS);
                let mut gx = ArrayD::zeros(x.raw_dim());
                let mut ggamma = ArrayD::<F>::zeros(vec![c]);
                for b in 0..bsz {
                    for gi in 0..*groups {
                        let crange = gi * cpg..(gi + 1) * cpg;
                        let mut mean = F::zero();
                        for ci in crange.clone() {
                            for hi in 0..h {
                                for wi in 0..w {
                                    mean = mean + x[[b, ci, hi, wi]];
                                }
                            }
                        }
                        mean = mean / n;
                        let mut var = F::zero();
                        for ci in crange.clone() {
                            for hi in 0..h {
                                for wi in 0..w {
                                    let dv = x[[b, ci, hi, wi]] - mean;
                                    var = var + dv * dv;
                                }
                            }
                        }
                        var = var / n;
                        let inv = F::one() / (var + eps).sqrt();
                        // accumulate the two reductions of the normalization backward
                        let mut sum_g = F::zero();
                        let mut sum_gx = F::zero();
                        for ci in crange.clone() {
                            for hi in 0..h {
                                for wi in 0..w {
                                    let xh = (x[[b, ci, hi, wi]] - mean) * inv;
                                    let gp = go[[b, ci, hi, wi]] * gamma[ci];
                                    sum_g = sum_g + gp;
                                    sum_gx = sum_gx + gp * xh;
                                    ggamma[ci] = ggamma[ci] + go[[b, ci, hi, wi]] * xh;
                                }
                            }
                        }
                        let mg = sum_g / n;
                        let mgx = sum_gx / n;
                        for ci in crange {
                            for hi in 0..h {
                                for wi in 0..w {
                                    let xh = (x[[b, ci, hi, wi]] - mean) * inv;
                                    let gp = go[[b, ci, hi, wi]] * gamma[ci];
                                    gx[[b, ci, hi, wi]] = inv * (gp - mg - xh * mgx);
                                }
                            }
                        }
                    }
                }
                vec![gx, ggamma]
            }
            Op::SoftmaxLast => {
                let y = &node.value;
                let last = Axis(y.ndim() - 1);
                let mut gx = ArrayD::zeros(y.raw_dim());
                for ((yl, gol), mut gxl) in y
                    .lanes(last)
                    .into_iter()
                    .zip(go.lanes(last))
                    .zip(gx.lanes_mut(last))
                {
                    let mut dot = F::zero();
                    for i in 0..yl.len() {
                        dot = dot + yl[i] * gol[i];
                    }
                    for i in 0..yl.len() {
                        gxl[i] = yl[i] * (gol[i] - dot);
                    }
                }
                vec![gx]
            }
            Op::Concat { axis } => {
                let mut out = Vec::with_capacity(node.parents.len());
                let mut offset = 0;
                for p in &node.parents {
                    let len = self.nodes[*p].value.shape()[*axis];
                    out.push(
                        go.slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + len))
                            .to_owned(),
                    );
                    offset += len;
                }
                out
            }
            Op::Narrow { axis, start } => {
                let mut gx = ArrayD::zeros(IxDyn(pv(0).shape()));
                let len = go.shape()[*axis];
                gx.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*start + len))
                    .assign(go);
                vec![gx]
            }
            Op::Pad2d { pads } => {
                let [t, _b, l, _r] = *pads;
                let sh = pv(0).shape();
                let v = go
                    .slice_axis(Axis(2), ndarray::Slice::from(t..t + sh[2]))
                    .slice_axis(Axis(3), ndarray::Slice::from(l..l + sh[3]))
                    .to_owned();
                vec![v]
            }
            Op::PixelShuffle { r } => vec![unshuffle_fwd(go, *r)],
            Op::PixelUnshuffle { r } => vec![shuffle_fwd(go, *r)],
            Op::Patchify { p } => {
                let sh = pv(0).shape();
                vec![unpatchify_fwd(go, *p, sh[1], sh[2], sh[3])]
            }
            Op::Unpatchify { p, .. } => vec![patchify_fwd(go, *p)],
            Op::Dwt2 => {
                let c = pv(0).shape()[1];
                let bsz = go.shape()[0];
                let mut gx = ArrayD::zeros(IxDyn(pv(0).shape()));
                for b in 0..bsz {
                    let bands = unpack_bands(go, b, c);
                    let g = wavelet::dwt2_adjoint(&bands)?;
                    gx.index_axis_mut(Axis(0), b).assign(&g);
                }
                vec![gx]
            }
            Op::Idwt2 => {
                let sh = pv(0).shape().to_vec();
                let c = sh[1] / 4;
                let mut gx = ArrayD::zeros(IxDyn(&sh));
                for b in 0..sh[0] {
                    let plane = go.index_axis(Axis(0), b).to_owned();
                    let bands = wavelet::idwt2_adjoint(&plane)?;
                    pack_bands(&mut gx, b, &bands, c);
                }
                vec![gx]
            }
        })
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<F: NdFloat> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: NdFloat> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn sigmoid_s<F: NdFloat>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn im2col<F: NdFloat>(
    x: &ndarray::ArrayView3<'_, F>,
    kh: usize,
    kw: usize,
    pad: usize,
) -> ndarray::Array2<F> {
    let (cin, h, w) = x.dim();
    let h2 = h + 2 * pad - kh + 1;
    let w2 = w + 2 * pad - kw + 1;
    let owned;
    let xs: &[F] = match x.as_slice() {
        Some(s) => s,
        None => {
            owned = x.to_owned();
            owned.as_slice().unwrap()
        }
    };
    let mut cols = ndarray::Array2::<F>::zeros((cin * kh * kw, h2 * w2));
    let cs = cols.as_slice_mut().unwrap();
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let rbase = ((c * kh + ky) * kw + kx) * h2 * w2;
                for oy in 0..h2 {
                    let iy = oy + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    // valid ox range keeps ix = ox + kx inside the padded image
                    let ox_lo = pad.saturating_sub(kx);
                    let ox_hi = (w + pad - kx).min(w2);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let len = ox_hi - ox_lo;
                    let src = (c * h + (iy - pad)) * w + (ox_lo + kx - pad);
                    let dst = rbase + oy * w2 + ox_lo;
                    cs[dst..dst + len].copy_from_slice(&xs[src..src + len]);
                }
            }
        }
    }
    cols
}

fn col2im<F: NdFloat>(
    gcols: &ndarray::Array2<F>,
    gx: &mut ndarray::ArrayViewMut3<F>,
    kh: usize,
    kw: usize,
    pad: usize,
    h: usize,
    w: usize,
) {
    let cin = gx.dim().0;
    let h2 = h + 2 * pad - kh + 1;
    let w2 = w + 2 * pad - kw + 1;
    let gs = gcols.as_slice().unwrap();
    let gxs = gx.as_slice_mut().expect("standard layout");
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let rbase = ((c * kh + ky) * kw + kx) * h2 * w2;
                for oy in 0..h2 {
                    let iy = oy + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let ox_lo = pad.saturating_sub(kx);
                    let ox_hi = (w + pad - kx).min(w2);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let len = ox_hi - ox_lo;
                    let src = rbase + oy * w2 + ox_lo;
                    let dst = (c * h + (iy - pad)) * w + (ox_lo + kx - pad);
                    for i in 0..len {
                        gxs[dst + i] = gxs[dst + i] + gs[src + i];
                    }
                }
            }
        }
    }
}

fn shuffle_fwd<F: NdFloat>(x: &ArrayD<F>, r: usize) -> ArrayD<F> {
    let sh = x.shape();
    let (b, c2, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let c = c2 / (r * r);
    let mut out = ArrayD::zeros(vec![b, c, h * r, w * r]);
    for bi in 0..b {
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let src_c = ci * r * r + dy * r + dx;
                    for y in 0..h {
                        for xx in 0..w {
                            out[[bi, ci, y * r + dy, xx * r + dx]] = x[[bi, src_c, y, xx]];
                        }
                    }
                }
            }
        }
    }
    out
}

fn unshuffle_fwd<F: NdFloat>(x: &ArrayD<F>, r: usize) -> ArrayD<F> {
    let sh = x.shape();
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let mut out = ArrayD::zeros(vec![b, c * r * r, h / r, w / r]);
    for bi in 0..b {
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let dst_c = ci * r * r + dy * r + dx;
                    for y in 0..h / r {
                        for xx in 0..w / r {
                            out[[bi, dst_c, y, xx]] = x[[bi, ci, y * r + dy, xx * r + dx]];
                        }
                    }
                }
            }
        }
    }
    out
}

fn patchify_fwd<F: NdFloat>(x: &ArrayD<F>, p: usize) -> ArrayD<F> {
    let sh = x.shape();
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let (gh, gw) = (h / p, w / p);
    let mut out = ArrayD::zeros(vec![b, gh * gw, p * p * c]);
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let tok = gy * gw + gx;
                for ci in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            out[[bi, tok, (ci * p + dy) * p + dx]] =
                                x[[bi, ci, gy * p + dy, gx * p + dx]];
                        }
                    }
                }
            }
        }
    }
    out
}

fn unpatchify_fwd<F: NdFloat>(x: &ArrayD<F>, p: usize, c: usize, h: usize, w: usize) -> ArrayD<F> {
    let b = x.shape()[0];
    let (gh, gw) = (h / p, w / p);
    let mut out = ArrayD::zeros(vec![b, c, h, w]);
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let tok = gy * gw + gx;
                for ci in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            out[[bi, ci, gy * p + dy, gx * p + dx]] =
                                x[[bi, tok, (ci * p + dy) * p + dx]];
                        }
                    }
                }
            }
        }
    }
    out
}

fn pack_bands<F: NdFloat>(out: &mut ArrayD<F>, b: usize, bands: &Subbands<F>, c: usize) {
    for (k, band) in [&bands.ll, &bands.lh, &bands.hl, &bands.hh].iter().enumerate() {
        for ci in 0..c {
            let mut dst = out.index_axis_mut(Axis(0), b);
            dst.index_axis_mut(Axis(0), k * c + ci)
                .assign(&band.index_axis(Axis(0), ci));
        }
    }
}

fn unpack_bands<F: NdFloat>(x: &ArrayD<F>, b: usize, c: usize) -> Subbands<F> {
    let sh = x.shape();
    let (h, w) = (sh[2], sh[3]);
    let mut bands = [
        ArrayD::zeros(vec![c, h, w]),
        ArrayD::zeros(vec![c, h, w]),
        ArrayD::zeros(vec![c, h, w]),
        ArrayD::zeros(vec![c, h, w]),
    ];
    let src = x.index_axis(Axis(0), b);
    for (k, band) in bands.iter_mut().enumerate() {
        for ci in 0..c {
            band.index_axis_mut(Axis(0), ci)
                .assign(&src.index_axis(Axis(0), k * c + ci));
        }
    }
    let [ll, lh, hl, hh] = bands;
    Subbands { ll, lh, hl, hh }
}

/// Maximum relative error between analytic gradients and central finite
/// differences (step `h`) over every element of every leaf.
///
/// `build` reconstructs the scalar function from fresh leaves each call so
/// perturbed evaluations share no state.
pub fn finite_diff_check<B>(inputs: &[ArrayD<f64>], h: f64, build: B) -> Result<f64>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[ArrayD<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = vals.iter().map(|v| g.leaf(v.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.scalar(out))
    };
    // analytic gradients
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
        for idx in 0..input.len() {
            let orig = *work[k].as_slice().unwrap().get(idx).unwrap();
            work[k].as_slice_mut().unwrap()[idx] = orig + h;
            let fp = eval(&work)?;
            work[k].as_slice_mut().unwrap()[idx] = orig - h;
            let fm = eval(&work)?;
            work[k].as_slice_mut().unwrap()[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[idx];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        crate::rng::standard_normal(&mut crate::rng::stream(seed, 0, 0), shape)
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(ArrayD::from_elem(IxDyn(&[]), 3.0));
        let y = g.mul(w, w).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap()[[]], 6.0);
    }

    #[test]
    fn linear_map_gradient_is_input() {
        // f(W) = sum(W x): dW = broadcast of x
        let mut g = Graph::<f64>::new();
        let w = g.leaf(randn(&[3, 4], 1));
        let x = g.constant(randn(&[4, 1], 2));
        let y = g.matmul(w, x).unwrap();
        let s = g.mean_all(y);
        let s = g.scale(s, 3.0); // undo mean: 3 rows
        let grads = g.backward(s).unwrap();
        let gw = grads.get(w).unwrap();
        let xv = g.value(x).clone();
        for r in 0..3 {
            for c in 0..4 {
                assert!((gw[[r, c]] - xv[[c, 0]]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rmsnorm_scalar_example() {
        // x = [3, 4], unit scale: rms = sqrt(12.5)
        let mut g = Graph::<f64>::new();
        let x = g.leaf(ArrayD::from_shape_vec(vec![2], vec![3.0, 4.0]).unwrap());
        let s = g.constant(ArrayD::from_elem(vec![2], 1.0));
        let y = g.rmsnorm(x, s).unwrap();
        let v = g.value(y);
        assert!((v[[0]] - 0.8485281).abs() <= 1e-6);
        assert!((v[[1]] - 1.1313708).abs() <= 1e-6);
    }

    #[test]
    fn rmsnorm_scale_invariance_and_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(randn(&[4, 6], 3));
        let x4 = g.scale(x, 4.0);
        let s = g.constant(ArrayD::from_elem(vec![6], 1.0));
        let y1 = g.rmsnorm(x, s).unwrap();
        let y2 = g.rmsnorm(x4, s).unwrap();
        // the stabilizing epsilon inside the norm breaks exact invariance
        for (a, b) in g.value(y1).iter().zip(g.value(y2).iter()) {
            assert!((a - b).abs() <= 1e-4);
        }
        let z = g.constant(ArrayD::zeros(vec![2, 6]));
        let yz = g.rmsnorm(z, s).unwrap();
        assert!(g.value(yz).iter().all(|v| *v == 0.0));
    }

    // each op gets a central finite-difference check at h = 1e-3
    fn check<B>(inputs: &[ArrayD<f64>], build: B)
    where
        B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let err = finite_diff_check(inputs, 1e-3, build).unwrap();
        assert!(err <= 1e-6, "gradient error {err}");
    }

    #[test]
    fn gradcheck_arithmetic() {
        check(&[randn(&[3, 4], 10), randn(&[3, 4], 11)], |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[1])?;
            let m = g.mul(d, v[0])?;
            let m = g.scale(m, -1.7);
            Ok(g.mean_all(m))
        });
    }

    #[test]
    fn gradcheck_matmul_bias() {
        check(&[randn(&[3, 4], 12), randn(&[4, 5], 13), randn(&[5], 14)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.add_bias_last(y, v[2])?;
            let y = g.silu(y);
            Ok(g.mean_all(y))
        });
    }

    #[test]
    fn gradcheck_bmm_softmax() {
        check(&[randn(&[2, 3, 4], 15), randn(&[2, 4, 3], 16)], |g, v| {
            let a = g.bmm(v[0], v[1])?;
            let a = g.softmax_last(a);
            let b = g.bmm(a, v[0])?;
            Ok(g.mean_all(b))
        });
    }

    #[test]
    fn gradcheck_conv2d() {
        check(&[randn(&[2, 3, 5, 5], 17), randn(&[4, 3, 3, 3], 18)], |g, v| {
            let y = g.conv2d(v[0], v[1], 1)?;
            let y = g.silu(y);
            Ok(g.mean_all(y))
        });
        // 1x1 conv, no padding
        check(&[randn(&[1, 4, 3, 3], 19), randn(&[2, 4, 1, 1], 20)], |g, v| {
            let y = g.conv2d(v[0], v[1], 0)?;
            Ok(g.mean_all(y))
        });
    }

    #[test]
    fn gradcheck_norms() {
        check(&[randn(&[3, 5], 21), randn(&[5], 22)], |g, v| {
            let y = g.rmsnorm(v[0], v[1])?;
            let y = g.mul(y, y)?;
            Ok(g.mean_all(y))
        });
        check(&[randn(&[2, 4, 3, 3], 23), randn(&[4], 24)], |g, v| {
            let y = g.group_norm(v[0], v[1], 2)?;
            let y = g.silu(y);
            Ok(g.mean_all(y))
        });
    }

    #[test]
    fn gradcheck_broadcast_ops() {
        check(&[randn(&[2, 3, 4, 4], 25), randn(&[3], 26), randn(&[2, 3], 27)], |g, v| {
            let y = g.add_bias_channel(v[0], v[1])?;
            let y = g.add_channel_vec(y, v[2])?;
            let y = g.sigmoid(y);
            Ok(g.mean_all(y))
        });
        check(&[randn(&[2, 5, 3], 28), randn(&[2, 3], 29), randn(&[2, 3], 30)], |g, v| {
            let y = g.mul_row_vec(v[0], v[1])?;
            let y = g.add_row_vec(y, v[2])?;
            let y = g.mul(y, y)?;
            Ok(g.mean_all(y))
        });
    }

    #[test]
    fn gradcheck_shape_ops() {
        check(&[randn(&[2, 4, 4, 4], 31)], |g, v| {
            let y = g.pixel_unshuffle(v[0], 2)?;
            let y = g.pixel_shuffle(y, 2)?;
            let y = g.permute(y, &[0, 2, 3, 1])?;
            let y = g.reshape(y, &[2, 64])?;
            let y = g.narrow(y, 1, 8, 40)?;
            let y = g.mul(y, y)?;
            Ok(g.mean_all(y))
        });
        check(&[randn(&[1, 2, 4, 4], 32), randn(&[1, 2, 4, 4], 33)], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            let y = g.pad2d(y, [1, 0, 2, 1])?;
            let y = g.mul(y, y)?;
            Ok(g.mean_all(y))
        });
        check(&[randn(&[2, 3, 4, 4], 34)], |g, v| {
            let y = g.patchify(v[0], 2)?;
            let y = g.silu(y);
            let y = g.unpatchify(y, 2, 3, 4, 4)?;
            Ok(g.mean_all(y))
        });
    }

    #[test]
    fn gradcheck_wavelet_ops() {
        check(&[randn(&[2, 2, 4, 4], 35)], |g, v| {
            let y = g.dwt2(v[0])?;
            let y = g.mul(y, y)?;
            Ok(g.mean_all(y))
        });
        check(&[randn(&[2, 4, 2, 2], 36)], |g, v| {
            let y = g.idwt2(v[0])?;
            let y = g.silu(y);
            Ok(g.mean_all(y))
        });
    }

    #[test]
    fn shuffle_round_trip_and_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(randn(&[1, 3, 8, 8], 40));
        let d = g.pixel_unshuffle(x, 2).unwrap();
        assert_eq!(g.value(d).shape(), &[1, 12, 4, 4]);
        let u = g.pixel_shuffle(d, 2).unwrap();
        for (a, b) in g.value(x).iter().zip(g.value(u).iter()) {
            assert_eq!(a, b);
        }
        // r = 1 is the identity
        let i1 = g.pixel_shuffle(x, 1).unwrap();
        for (a, b) in g.value(x).iter().zip(g.value(i1).iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn patchify_round_trip() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(randn(&[2, 3, 8, 8], 41));
        let p = g.patchify(x, 4).unwrap();
        assert_eq!(g.value(p).shape(), &[2, 4, 48]);
        let u = g.unpatchify(p, 4, 3, 8, 8).unwrap();
        for (a, b) in g.value(x).iter().zip(g.value(u).iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(randn(&[3, 7], 42));
        let y = g.softmax_last(x);
        for lane in g.value(y).lanes(Axis(1)) {
            let s: f64 = lane.sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(randn(&[2, 2], 43));
        let w = g.leaf(randn(&[2, 2], 44));
        let y = g.mul(x, w).unwrap();
        let s = g.mean_all(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(w).is_some());
    }
}
