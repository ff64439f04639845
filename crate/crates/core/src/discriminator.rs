//! Spectrally normalised residual discriminators and the local crop.

use rand::Rng;

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::nn::{Linear, PlainResBlock};
use crate::tensor::{Bound, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Side of the local discriminator's input.
pub const LOCAL_SIZE: usize = 32;
const SIGMA_FLOOR: f64 = 1e-8;
const NORM_FLOOR: f64 = 1e-12;

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n < NORM_FLOOR {
        return false;
    }
    v.iter_mut().for_each(|a| *a /= n);
    true
}

/// Outcome of [`spectral_normalize`].
pub struct SpectralNorm<T> {
    pub weight: Var,
    pub u: Vec<T>,
    pub sigma: f64,
}

/// Runs `iterations` power-iteration steps on `w` flattened to
/// `shape[0] × rest`, starting from `u`, and divides `w` by the estimate
/// `σ̂ = uᵀ W v` (clamped at 1e-8). The division is recorded on the tape so
/// gradients see `σ̂` as a function of `w`.
pub fn spectral_normalize<T: Scalar>(
    tape: &mut Tape<T>,
    w: Var,
    u: &[T],
    iterations: usize,
) -> Result<SpectralNorm<T>> {
    let shape = tape.shape(w).to_vec();
    let rows = shape[0];
    let cols = tape.value(w).len() / rows;
    if u.len() != rows {
        return Err(Error::shape(format!(
            "spectral vector of length {} for weight {shape:?}",
            u.len()
        )));
    }
    let wm: Vec<f64> = tape.value(w).to_f64_vec();
    let mut uu: Vec<f64> = u.iter().map(|a| a.to_f64().unwrap_or(0.0)).collect();
    let mut v = vec![0.0; cols];
    for _ in 0..iterations.max(1) {
        v.iter_mut().for_each(|a| *a = 0.0);
        for r in 0..rows {
            let row = &wm[r * cols..(r + 1) * cols];
            for (vc, &x) in v.iter_mut().zip(row) {
                *vc += x * uu[r];
            }
        }
        if !normalize(&mut v) {
            break;
        }
        let mut next: Vec<f64> = (0..rows)
            .map(|r| {
                wm[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        if !normalize(&mut next) {
            break;
        }
        uu = next;
    }
    let outer = Tensor::from_fn(&shape, |i| T::lit(uu[i / cols] * v[i % cols]));
    let outer = tape.constant(outer)?;
    let prod = tape.mul(w, outer)?;
    let sigma = tape.sum(prod)?;
    let sigma = tape.clamp_min(sigma, T::lit(SIGMA_FLOOR))?;
    let sigma_value = tape.item(sigma).to_f64().unwrap_or(f64::NAN);
    let weight = tape.div(w, sigma)?;
    Ok(SpectralNorm {
        weight,
        u: uu.into_iter().map(T::lit).collect(),
        sigma: sigma_value,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub widths: [usize; 5],
    pub resolution: usize,
    pub channels: usize,
}

impl DiscriminatorConfig {
    pub fn global(resolution: usize) -> Self {
        DiscriminatorConfig {
            widths: [16, 32, 64, 128, 128],
            resolution,
            channels: 3,
        }
    }

    pub fn local() -> Self {
        Self::global(LOCAL_SIZE)
    }

    pub fn tiny(resolution: usize) -> Self {
        DiscriminatorConfig {
            widths: [2, 3, 4, 4, 4],
            resolution,
            channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.channels == 0 {
            return Err(Error::config("discriminator widths must be positive"));
        }
        if self.resolution == 0 || !self.resolution.is_multiple_of(32) {
            return Err(Error::config(format!(
                "discriminator resolution {} is not a multiple of 32",
                self.resolution
            )));
        }
        Ok(())
    }
}

/// Persistent left singular vectors, one per normalised weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState<T> {
    pub names: Vec<String>,
    pub u: Vec<Vec<T>>,
}

/// Five stride-2 residual blocks, global average pool and a linear scalar
/// head; every weight passes through spectral normalisation.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub name: String,
    blocks: Vec<PlainResBlock>,
    fc: Linear,
}

impl Discriminator {
    pub fn new<T: Scalar>(
        name: &str,
        cfg: DiscriminatorConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<(Self, SpectralState<T>)> {
        cfg.validate()?;
        let mut c = cfg.channels;
        let blocks: Vec<PlainResBlock> = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let b = PlainResBlock::new(store, rng, &format!("{name}.block{i}"), c, w, 2);
                c = w;
                b
            })
            .collect();
        let fc = Linear::new(
            store,
            rng,
            &format!("{name}.fc"),
            c,
            1,
            (1.0 / c as f64).sqrt(),
        );
        let d = Discriminator {
            cfg,
            name: name.to_string(),
            blocks,
            fc,
        };
        let weights = d.weights();
        let mut names = Vec::with_capacity(weights.len());
        let mut u = Vec::with_capacity(weights.len());
        for id in weights {
            let rows = store.get(id).shape()[0];
            let mut v: Vec<f64> = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if !normalize(&mut v) {
                v[0] = 1.0;
            }
            names.push(format!("{}.u", store.name(id)));
            u.push(v.into_iter().map(T::lit).collect());
        }
        Ok((d, SpectralState { names, u }))
    }

    /// Every spectrally normalised weight, in state order.
    pub fn weights(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| b.convs().map(|c| c.weight))
            .chain([self.fc.weight])
            .collect()
    }

    /// Normalised weights for one pass; `update` persists the new `u`.
    pub fn normalized_weights<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        state: &mut SpectralState<T>,
        iterations: usize,
        update: bool,
    ) -> Result<Vec<Var>> {
        let ids = self.weights();
        if state.u.len() != ids.len() {
            return Err(Error::shape(format!(
                "{}: spectral state has {} vectors for {} weights",
                self.name,
                state.u.len(),
                ids.len()
            )));
        }
        let mut out = Vec::with_capacity(ids.len());
        for (k, id) in ids.into_iter().enumerate() {
            let sn = spectral_normalize(tape, p[id], &state.u[k], iterations)?;
            if update {
                state.u[k] = sn.u;
            }
            out.push(sn.weight);
        }
        Ok(out)
    }

    /// Score of one image given the normalised weights.
    pub fn score<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        weights: &[Var],
        x: Var,
    ) -> Result<Var> {
        let c = &self.cfg;
        let expect = [c.channels, c.resolution, c.resolution];
        if tape.shape(x) != expect {
            return Err(Error::shape(format!(
                "{}: input {:?} does not match {expect:?}",
                self.name,
                tape.shape(x)
            )));
        }
        let mut h = x;
        let mut k = 0;
        for b in &self.blocks {
            let n = b.convs().count();
            h = b.forward(tape, p, h, &weights[k..k + n])?;
            k += n;
        }
        let h = tape.relu(h)?;
        let shape = tape.shape(h).to_vec();
        let flat = tape.reshape(h, &[shape[0], shape[1] * shape[2]])?;
        let pooled = tape.mean_axis(flat, 1)?;
        let row = tape.reshape(pooled, &[1, shape[0]])?;
        let y = tape.matmul(row, weights[k])?;
        let y = tape.add(y, p[self.fc.bias])?;
        tape.reshape(y, &[1])
    }

    /// Scores of a batch as a `[k]` vector, in input order, with one
    /// power-iteration step shared by the whole batch.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        state: &mut SpectralState<T>,
        images: &[Var],
        update: bool,
    ) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::shape(format!("{}: empty batch", self.name)));
        }
        let w = self.normalized_weights(tape, p, state, 1, update)?;
        let scores = images
            .iter()
            .map(|&x| self.score(tape, p, &w, x))
            .collect::<Result<Vec<_>>>()?;
        if scores.len() == 1 {
            Ok(scores[0])
        } else {
            tape.concat(&scores, 0)
        }
    }
}

/// Flat source indices of the local crop: the mask's tight bounding box,
/// grown to a square about its centre (shifted to stay inside the image),
/// nearest-resized to `size×size` for each of `c` channels.
pub fn local_crop_index(mask: &Mask, c: usize, size: usize) -> Result<Vec<usize>> {
    let b = mask
        .bounds()
        .ok_or_else(|| Error::shape("local crop of an empty mask"))?;
    let (h, w) = (mask.height(), mask.width());
    let side = (b.x1 - b.x0).max(b.y1 - b.y0).min(h).min(w);
    let start = |lo: usize, hi: usize, limit: usize| {
        let grow = side - (hi - lo).min(side);
        lo.saturating_sub(grow / 2).min(limit - side)
    };
    let (x0, y0) = (start(b.x0, b.x1, w), start(b.y0, b.y1, h));
    let src = |i: usize| (2 * i + 1) * side / (2 * size);
    let mut index = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for i in 0..size {
            for j in 0..size {
                index.push((ch * h + y0 + src(i)) * w + x0 + src(j));
            }
        }
    }
    Ok(index)
}

/// The local crop of a `C×H×W` image variable.
pub fn local_crop<T: Scalar>(
    tape: &mut Tape<T>,
    image: Var,
    mask: &Mask,
    size: usize,
) -> Result<Var> {
    let shape = tape.shape(image).to_vec();
    let [c, h, w] = shape[..] else {
        return Err(Error::shape(format!(
            "local crop needs C×H×W, got {shape:?}"
        )));
    };
    if (h, w) != (mask.height(), mask.width()) {
        return Err(Error::shape(format!(
            "image {shape:?} does not match mask {}×{}",
            mask.height(),
            mask.width()
        )));
    }
    let index = local_crop_index(mask, c, size)?;
    tape.gather(image, &index, &[c, size, size])
}
