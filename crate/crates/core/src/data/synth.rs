use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mask::BoundingBox;
use super::vocab::{Vocab, COLORS, COLUMNS, ROWS, SHAPES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.20],
    [0.15, 0.25, 0.95],
    [0.95, 0.90, 0.10],
    [0.10, 0.85, 0.90],
    [0.90, 0.15, 0.85],
    [1.00, 0.55, 0.05],
    [0.50, 0.15, 0.70],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        SHAPES[self as usize]
    }

    /// Whether pixel centre `(px, py)` lies inside the shape inscribed in `b`.
    fn covers(self, b: &BoundingBox, px: f32, py: f32) -> bool {
        let (x0, y0, x1, y1) = (b.x0 as f32, b.y0 as f32, b.x1 as f32, b.y1 as f32);
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
                let r = (x1 - x0) / 2.0;
                (px - cx).powi(2) + (py - cy).powi(2) <= r * r
            }
            ShapeKind::Triangle => {
                // apex at top centre, base along the bottom edge
                let t = (py - y0) / (y1 - y0);
                let half = t * (x1 - x0) / 2.0;
                let cx = (x0 + x1) / 2.0;
                (px - cx).abs() <= half
            }
        }
    }
}

/// One placed object.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: usize,
    pub bbox: BoundingBox,
}

impl ShapeSpec {
    /// Coarse location words: row then column.
    pub fn location(&self, h: usize, w: usize) -> (&'static str, &'static str) {
        let cy = (self.bbox.y0 + self.bbox.y1) as f32 / 2.0;
        let cx = (self.bbox.x0 + self.bbox.x1) as f32 / 2.0;
        let row = ((cy * 3.0 / h as f32) as usize).min(2);
        let col = ((cx * 3.0 / w as f32) as usize).min(2);
        (ROWS[row], COLUMNS[col])
    }

    pub fn phrase(&self, h: usize, w: usize) -> String {
        let (row, col) = self.location(h, w);
        format!("{} {} {row} {col}", COLORS[self.color], self.kind.word())
    }
}

/// Parameters of the procedural captioned-shapes generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    pub channels: usize,
    pub patch: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub max_text_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            channels: 3,
            patch: 8,
            min_shapes: 1,
            max_shapes: 3,
            max_text_len: 16,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::config(format!("image size {} below 16", self.size)));
        }
        if self.patch == 0 || !self.size.is_multiple_of(self.patch) {
            return Err(Error::config(format!(
                "image size {} is not divisible by patch size {}",
                self.size, self.patch
            )));
        }
        if self.channels != 3 {
            return Err(Error::config("synthetic images are RGB (channels = 3)"));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes || self.max_shapes > 3 {
            return Err(Error::config(format!(
                "shape count range {}..={} must lie within 1..=3",
                self.min_shapes, self.max_shapes
            )));
        }
        if self.max_text_len == 0 {
            return Err(Error::config("max_text_len must be positive"));
        }
        Ok(())
    }
}

/// A captioned training image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub caption: String,
    pub tokens: Vec<usize>,
    pub boxes: Vec<BoundingBox>,
    pub shapes: Vec<ShapeSpec>,
    pub seed: u64,
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Vec<f32> {
    let c0: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.6));
    let c1: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.6));
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let freq: f32 = rng.gen_range(2.0..6.0);
    let stripe_angle: f32 = rng.gen_range(0.0..std::f32::consts::PI);
    let (sx, sy) = (stripe_angle.cos(), stripe_angle.sin());
    let amp = 0.04;
    let n = size as f32;
    let mut img = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f32 + 0.5) / n - 0.5, (y as f32 + 0.5) / n - 0.5);
            let t = ((u * dx + v * dy) / std::f32::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            let stripe = amp * (std::f32::consts::TAU * freq * (u * sx + v * sy)).sin();
            for c in 0..3 {
                img[(c * size + y) * size + x] =
                    (c0[c] * (1.0 - t) + c1[c] * t + stripe).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Deterministically renders the sample for `seed`.
pub fn synth_sample(seed: u64, cfg: &SynthConfig, vocab: &Vocab) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.size;
    let mut img = background(&mut rng, size);
    let count = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let (smin, smax) = (size / 5, size / 3);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = ShapeKind::ALL[rng.gen_range(0..3)];
        let color = rng.gen_range(0..PALETTE.len());
        let side = rng.gen_range(smin..=smax);
        let x0 = rng.gen_range(0..=size - side);
        let y0 = rng.gen_range(0..=size - side);
        let bbox = BoundingBox::new(x0, y0, x0 + side, y0 + side);
        for y in bbox.y0..bbox.y1 {
            for x in bbox.x0..bbox.x1 {
                if kind.covers(&bbox, x as f32 + 0.5, y as f32 + 0.5) {
                    for (c, &v) in PALETTE[color].iter().enumerate() {
                        img[(c * size + y) * size + x] = v;
                    }
                }
            }
        }
        shapes.push(ShapeSpec { kind, color, bbox });
    }
    let caption = shapes
        .iter()
        .map(|s| s.phrase(size, size))
        .collect::<Vec<_>>()
        .join(" and ");
    let tokens = vocab.tokenize(&caption, cfg.max_text_len);
    Ok(Sample {
        image: Tensor::new(&[3, size, size], img)?,
        caption,
        tokens,
        boxes: shapes.iter().map(|s| s.bbox).collect(),
        shapes,
        seed,
    })
}

/// Seed of the `index`-th sample in a dataset rooted at `base_seed`.
pub fn sample_seed(base_seed: u64, index: usize) -> u64 {
    // splitmix64 finaliser over (base, index)
    let mut z = base_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders `n` samples rooted at `base_seed`.
pub fn synth_dataset(
    base_seed: u64,
    n: usize,
    cfg: &SynthConfig,
    vocab: &Vocab,
) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| synth_sample(sample_seed(base_seed, i), cfg, vocab))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sample() {
        let v = Vocab::template();
        let cfg = SynthConfig::default();
        let a = synth_sample(7, &cfg, &v).unwrap();
        let b = synth_sample(7, &cfg, &v).unwrap();
        assert_eq!(a, b);
        let c = synth_sample(8, &cfg, &v).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn single_shape_caption() {
        let v = Vocab::template();
        let cfg = SynthConfig {
            max_shapes: 1,
            ..SynthConfig::default()
        };
        for seed in 0..20 {
            let s = synth_sample(seed, &cfg, &v).unwrap();
            assert_eq!(s.boxes.len(), 1);
            let words: Vec<&str> = s.caption.split_whitespace().collect();
            assert_eq!(words.iter().filter(|w| COLORS.contains(w)).count(), 1);
            assert_eq!(words.iter().filter(|w| SHAPES.contains(w)).count(), 1);
        }
    }

    #[test]
    fn three_shape_caption_fits_text_length() {
        let v = Vocab::template();
        let cfg = SynthConfig {
            min_shapes: 3,
            ..SynthConfig::default()
        };
        let s = synth_sample(3, &cfg, &v).unwrap();
        assert_eq!(s.caption.split_whitespace().count() + 1, 15);
        assert!(!s.tokens.contains(&super::super::vocab::UNK));
        assert_eq!(s.tokens.len(), cfg.max_text_len);
    }

    #[test]
    fn thousand_samples_in_bounds() {
        let v = Vocab::template();
        for size in [32, 64] {
            let cfg = SynthConfig {
                size,
                ..SynthConfig::default()
            };
            for s in synth_dataset(11, 500, &cfg, &v).unwrap() {
                assert!(s.boxes.iter().all(|b| b.fits(size, size)));
                assert!(s.image.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
                assert!(s.tokens.iter().all(|&t| t < v.len()));
            }
        }
    }

    #[test]
    fn indivisible_patch_rejected() {
        let cfg = SynthConfig {
            size: 36,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
