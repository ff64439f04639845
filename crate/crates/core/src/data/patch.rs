use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check(c: usize, h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::shape(format!(
            "patch size {p} does not divide image {c}×{h}×{w}"
        )));
    }
    Ok(())
}

/// Slices a `C×H×W` image into `N = H·W/P²` row-major patches, each
/// flattened channel-last to `P·P·C` values.
pub fn patchify<T: Scalar>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let [c, h, w] = image.dims3()?;
    check(c, h, w, p)?;
    let (gh, gw) = (h / p, w / p);
    let dim = p * p * c;
    let src = image.data();
    let mut out = vec![T::zero(); gh * gw * dim];
    for py in 0..gh {
        for px in 0..gw {
            let row = &mut out[(py * gw + px) * dim..(py * gw + px + 1) * dim];
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c {
                        row[(y * p + x) * c + ch] = src[(ch * h + py * p + y) * w + px * p + x];
                    }
                }
            }
        }
    }
    Tensor::new(&[gh * gw, dim], out)
}

/// Flat source index of every element of the [`patchify`] output, for
/// gathering patches from an image held on a tape.
pub fn patch_index(c: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    check(c, h, w, p)?;
    let (gh, gw) = (h / p, w / p);
    let mut index = Vec::with_capacity(c * h * w);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c {
                        index.push((ch * h + py * p + y) * w + px * p + x);
                    }
                }
            }
        }
    }
    Ok(index)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(
    patches: &Tensor<T>,
    p: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    check(c, h, w, p)?;
    let (gh, gw) = (h / p, w / p);
    let dim = p * p * c;
    if patches.shape() != [gh * gw, dim] {
        return Err(Error::shape(format!(
            "patch matrix {:?} does not match {c}×{h}×{w} at P={p}",
            patches.shape()
        )));
    }
    let src = patches.data();
    let mut out = vec![T::zero(); c * h * w];
    for py in 0..gh {
        for px in 0..gw {
            let row = &src[(py * gw + px) * dim..(py * gw + px + 1) * dim];
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c {
                        out[(ch * h + py * p + y) * w + px * p + x] = row[(y * p + x) * c + ch];
                    }
                }
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn patch_counts() {
        let img = Tensor::<f32>::zeros(&[3, 256, 256]);
        assert_eq!(patchify(&img, 32).unwrap().shape(), &[64, 3072]);
        let img = Tensor::<f32>::zeros(&[3, 32, 32]);
        assert_eq!(patchify(&img, 8).unwrap().shape(), &[16, 192]);
        assert!(patchify(&img, 5).is_err());
    }

    #[test]
    fn patch_order_is_row_major() {
        let img = Tensor::<f64>::from_fn(&[1, 4, 4], |i| i as f64);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(&p.data()[0..4], &[0., 1., 4., 5.]);
        assert_eq!(&p.data()[4..8], &[2., 3., 6., 7.]);
        assert_eq!(&p.data()[8..12], &[8., 9., 12., 13.]);
    }

    proptest! {
        #[test]
        fn round_trip(c in 1usize..4, gh in 1usize..5, gw in 1usize..5, p in 1usize..5, seed in 0u64..1000) {
            let (h, w) = (gh * p, gw * p);
            let img = Tensor::<f32>::from_fn(&[c, h, w], |i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 999.0);
            let back = unpatchify(&patchify(&img, p).unwrap(), p, c, h, w).unwrap();
            prop_assert_eq!(back, img);
        }

        #[test]
        fn gather_index_matches_patchify(c in 1usize..4, gh in 1usize..4, gw in 1usize..4, p in 1usize..4) {
            let (h, w) = (gh * p, gw * p);
            let img = Tensor::<f64>::from_fn(&[c, h, w], |i| i as f64);
            let idx = patch_index(c, h, w, p).unwrap();
            let gathered: Vec<f64> = idx.iter().map(|&i| img.data()[i]).collect();
            let expect = patchify(&img, p).unwrap();
            prop_assert_eq!(&gathered[..], expect.data());
        }
    }
}
