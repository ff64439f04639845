use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::normal;
use crate::tensor::kernels::conv2d_forward;
use crate::tensor::{Scalar, Tensor};

pub const FEATURE_SEED: u64 = 0x5eed_fea7;
pub const FEATURE_WIDTHS: [usize; 4] = [16, 32, 64, 64];

/// Frozen random conv network: four 4×4 stride-2 conv+ReLU blocks, then
/// global average pooling to a 64-d vector.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    layers: Vec<(Tensor<f64>, Tensor<f64>)>,
    channels: usize,
}

impl FeatureExtractor {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = channels;
        let layers = FEATURE_WIDTHS
            .iter()
            .map(|&c_out| {
                let std = (2.0 / (c_in * 16) as f64).sqrt();
                let w = normal(&mut rng, &[c_out, c_in, 4, 4], std);
                let b = normal(&mut rng, &[c_out], 0.1);
                c_in = c_out;
                (w, b)
            })
            .collect();
        FeatureExtractor { layers, channels }
    }

    pub fn dim(&self) -> usize {
        FEATURE_WIDTHS[FEATURE_WIDTHS.len() - 1]
    }

    /// Features of one `C×H×W` image in `[0, 1]`; `H` and `W` must be
    /// multiples of 16.
    pub fn extract<T: Scalar>(&self, image: &Tensor<T>) -> Result<Vec<f64>> {
        match *image.shape() {
            [c, h, w] if c == self.channels && h % 16 == 0 && w % 16 == 0 && h > 0 && w > 0 => {}
            ref s => {
                return Err(Error::shape(format!(
                    "feature extractor expects {}×H×W with H, W multiples of 16, got {s:?}",
                    self.channels
                )))
            }
        }
        let mut x = image.cast::<f64>().map(|v| 2.0 * v - 1.0);
        for (w, b) in &self.layers {
            x = conv2d_forward(&x, w, Some(b), 2, 1)?.0.map(|v| v.max(0.0));
        }
        let (c, n) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
        Ok((0..c)
            .map(|ch| x.data()[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64)
            .collect())
    }

    pub fn extract_all<T: Scalar>(&self, images: &[Tensor<T>]) -> Result<Vec<Vec<f64>>> {
        images.iter().map(|im| self.extract(im)).collect()
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        FeatureExtractor::new(3, FEATURE_SEED)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn deterministic_and_sized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let im = Tensor::<f32>::from_fn(&[3, 32, 32], |_| rng.gen());
        let a = FeatureExtractor::default().extract(&im).unwrap();
        let b = FeatureExtractor::default().extract(&im).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, b);
        assert!(a.iter().any(|&v| v > 0.0));
        let other = FeatureExtractor::new(3, 7).extract(&im).unwrap();
        assert_ne!(a, other);
        assert!(FeatureExtractor::default()
            .extract(&Tensor::<f32>::zeros(&[3, 24, 32]))
            .is_err());
    }

    #[test]
    fn distinguishes_images() {
        let fx = FeatureExtractor::default();
        let dark = fx.extract(&Tensor::<f32>::full(&[3, 32, 32], 0.1)).unwrap();
        let light = fx.extract(&Tensor::<f32>::full(&[3, 32, 32], 0.9)).unwrap();
        assert!(dark.iter().zip(&light).any(|(a, b)| (a - b).abs() > 1e-3));
    }
}
