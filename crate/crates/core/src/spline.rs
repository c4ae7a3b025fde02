//! Prefiltered cubic B-spline interpolation for slice resampling.
//!
//! Coefficients come from the classic recursive causal/anticausal filter
//! (single pole sqrt(3) - 2, overall gain 6) with mirror boundary handling,
//! so evaluating the spline at the original grid nodes reproduces the input
//! exactly. Resampling maps output pixel i to input position
//! i * (n_in - 1) / (n_out - 1), aligning the first and last samples.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Pole of the cubic B-spline direct filter.
pub const CUBIC_POLE: f64 = -0.26794919243112270647; // sqrt(3) - 2
const GAIN: f64 = 6.0;
const TOLERANCE: f64 = 1e-15;

fn initial_causal(c: &[f64], z: f64) -> f64 {
    let n = c.len();
    let horizon = (TOLERANCE.ln() / z.abs().ln()).ceil() as usize;
    if horizon < n {
        let mut zn = z;
        let mut sum = c[0];
        for ck in c.iter().take(horizon).skip(1) {
            sum += zn * ck;
            zn *= z;
        }
        sum
    } else {
        let mut zn = z;
        let iz = 1.0 / z;
        let mut z2n = z.powi(n as i32 - 1);
        let mut sum = c[0] + z2n * c[n - 1];
        z2n *= z2n * iz;
        for ck in c.iter().take(n - 1).skip(1) {
            sum += (zn + z2n) * ck;
            zn *= z;
            z2n *= iz;
        }
        sum / (1.0 - zn * zn)
    }
}

fn initial_anticausal(c: &[f64], z: f64) -> f64 {
    let n = c.len();
    (z / (z * z - 1.0)) * (z * c[n - 2] + c[n - 1])
}

/// In-place prefilter of one line of samples into B-spline coefficients.
pub fn prefilter_line(c: &mut [f64]) {
    let n = c.len();
    if n < 2 {
        return;
    }
    for v in c.iter_mut() {
        *v *= GAIN;
    }
    let z = CUBIC_POLE;
    c[0] = initial_causal(c, z);
    for k in 1..n {
        c[k] += z * c[k - 1];
    }
    c[n - 1] = initial_anticausal(c, z);
    for k in (0..n - 1).rev() {
        c[k] = z * (c[k + 1] - c[k]);
    }
}

/// 2D prefilter: rows then columns.
pub fn spline_prefilter(image: &Array2<f64>) -> Array2<f64> {
    let (h, w) = image.dim();
    let mut coef = image.clone();
    let mut buf = vec![0.0; h.max(w)];
    for r in 0..h {
        for cidx in 0..w {
            buf[cidx] = coef[[r, cidx]];
        }
        prefilter_line(&mut buf[..w]);
        for cidx in 0..w {
            coef[[r, cidx]] = buf[cidx];
        }
    }
    for cidx in 0..w {
        for r in 0..h {
            buf[r] = coef[[r, cidx]];
        }
        prefilter_line(&mut buf[..h]);
        for r in 0..h {
            coef[[r, cidx]] = buf[r];
        }
    }
    coef
}

// whole-sample mirror index
fn mirror(i: isize, n: isize) -> usize {
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn bspline_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        (1.0 - t).powi(3) / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Evaluate the spline defined by `coef` at continuous position (y, x).
pub fn eval_spline(coef: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = coef.dim();
    let iy = y.floor();
    let ix = x.floor();
    let wy = bspline_weights(y - iy);
    let wx = bspline_weights(x - ix);
    let mut acc = 0.0;
    for (dy, wyv) in wy.iter().enumerate() {
        let ry = mirror(iy as isize + dy as isize - 1, h as isize);
        let mut row_acc = 0.0;
        for (dx, wxv) in wx.iter().enumerate() {
            let rx = mirror(ix as isize + dx as isize - 1, w as isize);
            row_acc += wxv * coef[[ry, rx]];
        }
        acc += wyv * row_acc;
    }
    acc
}

/// Resample a 2D slice to (out_h, out_w) with endpoint-aligned sampling.
pub fn resample_slice(slice: &Array2<f64>, out_h: usize, out_w: usize) -> Result<Array2<f64>> {
    let (h, w) = slice.dim();
    if h < 2 || w < 2 || out_h < 2 || out_w < 2 {
        return Err(Error::InvalidArgument(format!(
            "resample sizes must be >= 2 per axis, got {h}x{w} -> {out_h}x{out_w}"
        )));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(slice.clone());
    }
    let coef = spline_prefilter(slice);
    let sy = (h - 1) as f64 / (out_h - 1) as f64;
    let sx = (w - 1) as f64 / (out_w - 1) as f64;
    let mut out = Array2::zeros((out_h, out_w));
    for r in 0..out_h {
        let y = r as f64 * sy;
        for c in 0..out_w {
            out[[r, c]] = eval_spline(&coef, y, c as f64 * sx);
        }
    }
    Ok(out)
}
