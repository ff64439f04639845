use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Returned by [`psnr`] when the images are identical.
pub const PSNR_IDENTICAL_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;

fn same_shape<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, what: &str) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            x.shape(),
            y.shape()
        )));
    }
    Ok(())
}

/// `(C, H, W)` of a rank-2 or rank-3 image.
fn planes<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(format!(
            "expected an H×W or C×H×W image, got {s:?}"
        ))),
    }
}

pub fn mse<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    same_shape(x, y, "mse")?;
    if x.is_empty() {
        return Err(Error::shape("mse of empty images"));
    }
    let s: f64 = x
        .to_f64_vec()
        .iter()
        .zip(y.to_f64_vec())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / x.len() as f64)
}

/// Mean absolute difference.
pub fn l1<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    same_shape(x, y, "l1")?;
    if x.is_empty() {
        return Err(Error::shape("l1 of empty images"));
    }
    let s: f64 = x
        .to_f64_vec()
        .iter()
        .zip(y.to_f64_vec())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(s / x.len() as f64)
}

/// `10·log10(peak²/MSE)`, or [`PSNR_IDENTICAL_DB`] when MSE is zero.
pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    let e = mse(x, y)?;
    if e == 0.0 {
        return Ok(PSNR_IDENTICAL_DB);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

/// Anisotropic total variation with forward differences. The horizontal
/// and vertical terms are each averaged over the differences that exist,
/// then added; channels are averaged.
pub fn tv<T: Scalar>(x: &Tensor<T>) -> Result<f64> {
    let (c, h, w) = planes(x)?;
    let d = x.to_f64_vec();
    let (mut horiz, mut vert) = (0.0, 0.0);
    for ch in 0..c {
        let p = &d[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                if j > 0 {
                    horiz += (p[i * w + j] - p[i * w + j - 1]).abs();
                }
                if i > 0 {
                    vert += (p[i * w + j] - p[(i - 1) * w + j]).abs();
                }
            }
        }
    }
    let nh = (c * h * w.saturating_sub(1)) as f64;
    let nv = (c * h.saturating_sub(1) * w) as f64;
    let mean = |s: f64, n: f64| if n > 0.0 { s / n } else { 0.0 };
    Ok(mean(horiz, nh) + mean(vert, nv))
}

/// Channel mean as an `H×W` plane.
pub(crate) fn grayscale<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    let (c, h, w) = planes(x)?;
    let d = x.to_f64_vec();
    let mut g = vec![0.0; h * w];
    for ch in 0..c {
        for (o, v) in g.iter_mut().zip(&d[ch * h * w..(ch + 1) * h * w]) {
            *o += v;
        }
    }
    g.iter_mut().for_each(|v| *v /= c as f64);
    Ok((h, w, g))
}

/// Summed-area table with a zero border: `(h+1)×(w+1)`.
fn integral(h: usize, w: usize, v: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for i in 0..h {
        let mut row = 0.0;
        for j in 0..w {
            row += v(i * w + j);
            s[(i + 1) * (w + 1) + j + 1] = s[i * (w + 1) + j + 1] + row;
        }
    }
    s
}

fn box_sum(s: &[f64], w: usize, i: usize, j: usize, k: usize) -> f64 {
    let w1 = w + 1;
    s[(i + k) * w1 + j + k] - s[i * w1 + j + k] - s[(i + k) * w1 + j] + s[i * w1 + j]
}

pub(crate) fn ssim_constants(peak: f64) -> (f64, f64) {
    ((0.01 * peak).powi(2), (0.03 * peak).powi(2))
}

/// Mean SSIM over every 7×7 window (uniform weights, population moments)
/// of the grayscale images.
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape(x, y, "ssim")?;
    let (h, w, gx) = grayscale(x)?;
    let (_, _, gy) = grayscale(y)?;
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::shape(format!(
            "ssim needs at least {k}×{k} pixels, got {h}×{w}"
        )));
    }
    let sx = integral(h, w, |i| gx[i]);
    let sy = integral(h, w, |i| gy[i]);
    let sxx = integral(h, w, |i| gx[i] * gx[i]);
    let syy = integral(h, w, |i| gy[i] * gy[i]);
    let sxy = integral(h, w, |i| gx[i] * gy[i]);
    let (c1, c2) = ssim_constants(peak);
    let n = (k * k) as f64;
    let mut total = 0.0;
    for i in 0..=h - k {
        for j in 0..=w - k {
            let mx = box_sum(&sx, w, i, j, k) / n;
            let my = box_sum(&sy, w, i, j, k) / n;
            // summed-area differences can leave tiny negative variances
            let vx = (box_sum(&sxx, w, i, j, k) / n - mx * mx).max(0.0);
            let vy = (box_sum(&syy, w, i, j, k) / n - my * my).max(0.0);
            let cxy = box_sum(&sxy, w, i, j, k) / n - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}
