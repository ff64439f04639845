//! Raw numeric kernels shared by the tape's forward and backward rules.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution over a `C×H×W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h, wd) = match *x {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d input must be C×H×W, got {x:?}"
                )))
            }
        };
        let (c_out, k) = match *w {
            [o, i, k1, k2] if i == c_in && k1 == k2 => (o, k1),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d weight {w:?} incompatible with input {x:?}"
                )))
            }
        };
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be positive"));
        }
        let out_extent = |n: usize| -> Result<usize> {
            let span = n + 2 * pad;
            if span < k || !(span - k).is_multiple_of(stride) {
                return Err(Error::shape(format!(
                    "conv2d output extent ({n}+2*{pad}-{k})/{stride}+1 is not a positive integer"
                )));
            }
            Ok((span - k) / stride + 1)
        };
        Ok(ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad,
            h_out: out_extent(h)?,
            w_out: out_extent(wd)?,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies in
/// `0..w`.
fn valid_cols(g: &ConvGeom, kx: usize) -> std::ops::Range<usize> {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = (g.w + g.pad)
        .saturating_sub(kx)
        .div_ceil(g.stride)
        .min(g.w_out);
    lo..hi.max(lo)
}

/// Unfolds the input into a `(C·k·k) × (H'·W')` column matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.out_pixels();
    let mut col = vec![T::zero(); g.col_rows() * n];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                let cols = valid_cols(g, kx);
                if cols.is_empty() {
                    continue;
                }
                let first = cols.start * g.stride + kx - g.pad;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w + first..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * g.w_out + cols.start..oy * g.w_out + cols.end];
                    if g.stride == 1 {
                        drow.copy_from_slice(&src[..drow.len()]);
                    } else {
                        for (d, &v) in drow.iter_mut().zip(src.iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
    col
}

/// Folds a column matrix back onto the input, summing overlaps.
pub fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * n..(row + 1) * n];
                let cols = valid_cols(g, kx);
                if cols.is_empty() {
                    continue;
                }
                let first = cols.start * g.stride + kx - g.pad;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w + first..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.w_out + cols.start..oy * g.w_out + cols.end];
                    for (d, &v) in drow.iter_mut().step_by(g.stride).zip(srow) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Cross-correlation `y = w ⋆ x + b`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvGeom)> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(Error::shape(format!(
                "conv2d bias {:?} does not match {} output channels",
                b.shape(),
                g.c_out
            )));
        }
    }
    let n = g.out_pixels();
    let mut out = vec![T::zero(); g.c_out * n];
    if let Some(b) = bias {
        for (o, &bv) in b.data().iter().enumerate() {
            out[o * n..(o + 1) * n].fill(bv);
        }
    }
    let accumulate = bias.is_some();
    if g.is_pointwise() {
        T::gemm(
            g.c_out,
            g.c_in,
            n,
            w.data(),
            false,
            x.data(),
            false,
            &mut out,
            accumulate,
        );
    } else {
        let col = im2col(x.data(), &g);
        T::gemm(
            g.c_out,
            g.col_rows(),
            n,
            w.data(),
            false,
            &col,
            false,
            &mut out,
            accumulate,
        );
    }
    Ok((Tensor::new(&[g.c_out, g.h_out, g.w_out], out)?, g))
}

/// Accumulates input, weight and bias gradients of a convolution.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let n = g.out_pixels();
    let rows = g.col_rows();
    if let Some(db) = db {
        for (o, d) in db.iter_mut().enumerate() {
            *d += gy[o * n..(o + 1) * n].iter().copied().sum::<T>();
        }
    }
    if g.is_pointwise() {
        if let Some(dw) = dw {
            T::gemm(g.c_out, n, rows, gy, false, x, true, dw, true);
        }
        if let Some(dx) = dx {
            T::gemm(rows, g.c_out, n, w, true, gy, false, dx, true);
        }
        return;
    }
    if let Some(dw) = dw {
        let col = im2col(x, g);
        T::gemm(g.c_out, n, rows, gy, false, &col, true, dw, true);
    }
    if let Some(dx) = dx {
        let mut dcol = vec![T::zero(); rows * n];
        T::gemm(rows, g.c_out, n, w, true, gy, false, &mut dcol, false);
        col2im(&dcol, g, dx);
    }
}

/// Nearest-neighbour 2× upsampling of a `C×H×W` buffer.
pub fn upsample2x<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            let src = &x[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            let dst = &mut out[(ch * h2 + y) * w2..(ch * h2 + y + 1) * w2];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(gy: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let w2 = 2 * w;
    for ch in 0..c {
        for y in 0..2 * h {
            let src = &gy[(ch * 2 * h + y) * w2..(ch * 2 * h + y + 1) * w2];
            let dst = &mut dx[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            for (xx, &v) in src.iter().enumerate() {
                dst[xx / 2] += v;
            }
        }
    }
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-stabilised softmax along one axis.
pub fn softmax<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = T::neg_infinity();
            for a in 0..len {
                mx = mx.max(x[base + a * inner]);
            }
            let mut total = T::zero();
            for a in 0..len {
                let e = (x[base + a * inner] - mx).exp();
                out[base + a * inner] = e;
                total += e;
            }
            for a in 0..len {
                out[base + a * inner] /= total;
            }
        }
    }
    out
}

pub fn softmax_backward<T: Scalar>(y: &[T], gy: &[T], shape: &[usize], axis: usize, dx: &mut [T]) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for a in 0..len {
                dot += gy[base + a * inner] * y[base + a * inner];
            }
            for a in 0..len {
                let idx = base + a * inner;
                dx[idx] += y[idx] * (gy[idx] - dot);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Row-wise layer normalisation over the last axis. Returns output, the
/// normalised activations and per-row inverse standard deviations.
pub fn layer_norm<T: Scalar>(
    x: &[T],
    e: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / e;
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let ef = T::from_usize(e).unwrap();
    for r in 0..rows {
        let row = &x[r * e..(r + 1) * e];
        let mean = row.iter().copied().sum::<T>() / ef;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / ef;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..e {
            let h = (row[j] - mean) * rs;
            xhat[r * e + j] = h;
            out[r * e + j] = h * gamma[j] + beta[j];
        }
    }
    (out, xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    gy: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    e: usize,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let rows = rstd.len();
    if let Some(dg) = dgamma {
        for r in 0..rows {
            for j in 0..e {
                dg[j] += gy[r * e + j] * xhat[r * e + j];
            }
        }
    }
    if let Some(db) = dbeta {
        for r in 0..rows {
            for j in 0..e {
                db[j] += gy[r * e + j];
            }
        }
    }
    if let Some(dx) = dx {
        let ef = T::from_usize(e).unwrap();
        for r in 0..rows {
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for j in 0..e {
                let gh = gy[r * e + j] * gamma[j];
                mean_g += gh;
                mean_gx += gh * xhat[r * e + j];
            }
            mean_g /= ef;
            mean_gx /= ef;
            for j in 0..e {
                let gh = gy[r * e + j] * gamma[j];
                dx[r * e + j] += rstd[r] * (gh - mean_g - xhat[r * e + j] * mean_gx);
            }
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out_shape`, the flat index into an operand of
/// shape `src` broadcast against it.
pub fn broadcast_index_map(src: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    if rank == 0 || total == 0 {
        return vec![0; total];
    }
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank - 1];
    let mut off = 0usize;
    for _ in 0..total / inner {
        map.extend((0..inner).map(|j| off + j * inner_stride));
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 5], &[4, 1]), Some(vec![2, 4, 5]));
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[3], &[4]), None);
    }

    #[test]
    fn index_map_for_channel_broadcast() {
        let map = broadcast_index_map(&[2, 1, 1], &[2, 2, 2]);
        assert_eq!(map, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        let map = broadcast_index_map(&[3], &[2, 3]);
        assert_eq!(map, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn conv_geometry_rejects_fractional_extent() {
        assert!(ConvGeom::new(&[1, 6, 6], &[1, 1, 3, 3], 2, 0).is_err());
        let g = ConvGeom::new(&[1, 7, 7], &[2, 1, 3, 3], 2, 0).unwrap();
        assert_eq!((g.h_out, g.w_out), (3, 3));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom::new(&[2, 5, 5], &[3, 2, 3, 3], 2, 1).unwrap();
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.out_pixels())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let col = im2col(&x, &g);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 50];
        col2im(&c, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    fn naive_map(src: &[usize], out: &[usize]) -> Vec<usize> {
        let total: usize = out.iter().product();
        (0..total)
            .map(|mut k| {
                let mut idx = vec![0; out.len()];
                for d in (0..out.len()).rev() {
                    idx[d] = k % out[d];
                    k /= out[d];
                }
                let lead = out.len() - src.len();
                src.iter().enumerate().fold(0, |off, (i, &n)| {
                    off * n + if n == 1 { 0 } else { idx[lead + i] }
                })
            })
            .collect()
    }

    fn direct_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut y = vec![0.0; g.c_out * g.out_pixels()];
        for o in 0..g.c_out {
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = 0.0;
                    for c in 0..g.c_in {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w
                                {
                                    acc += w[((o * g.c_in + c) * g.k + ky) * g.k + kx]
                                        * x[(c * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                    y[(o * g.h_out + oy) * g.w_out + ox] = acc;
                }
            }
        }
        y
    }

    proptest::proptest! {
        #[test]
        fn index_map_matches_naive(
            out in proptest::collection::vec(1usize..4, 1..5),
            keep in proptest::collection::vec(proptest::bool::ANY, 4),
            drop in 0usize..3,
        ) {
            let src: Vec<usize> = out.iter().zip(&keep).map(|(&d, &k)| if k { d } else { 1 }).collect();
            let src = &src[drop.min(src.len())..];
            proptest::prop_assert_eq!(broadcast_index_map(src, &out), naive_map(src, &out));
        }

        #[test]
        fn conv_matches_direct_loop(
            c_in in 1usize..3, c_out in 1usize..3, h in 1usize..9, w in 1usize..9,
            k in 1usize..5, stride in 1usize..3, pad in 0usize..3,
        ) {
            let Ok(g) = ConvGeom::new(&[c_in, h, w], &[c_out, c_in, k, k], stride, pad) else {
                return Ok(());
            };
            let x = Tensor::from_fn(&[c_in, h, w], |i| ((i * 7 % 11) as f64 - 5.0) * 0.3);
            let wt = Tensor::from_fn(&[c_out, c_in, k, k], |i| ((i * 5 % 7) as f64 - 3.0) * 0.2);
            let (y, _) = conv2d_forward(&x, &wt, None, stride, pad).unwrap();
            let want = direct_conv(x.data(), wt.data(), &g);
            for (a, b) in y.data().iter().zip(&want) {
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }
            // adjoint identity for the same geometry
            let c: Vec<f64> = (0..g.col_rows() * g.out_pixels()).map(|i| (i as f64 * 0.11).cos()).collect();
            let lhs: f64 = im2col(x.data(), &g).iter().zip(&c).map(|(a, b)| a * b).sum();
            let mut back = vec![0.0; x.len()];
            col2im(&c, &g, &mut back);
            let rhs: f64 = x.data().iter().zip(&back).map(|(a, b)| a * b).sum();
            proptest::prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
