use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{MaskMode, TrainConfig};
use crate::data::{apply_mask, center_mask, object_mask, Mask, Sample, PAD};
use crate::discriminator::{local_crop, Discriminator, SpectralState, LOCAL_SIZE};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::objectives::{
    cmad_loss, correlation_map, hinge_d, hinge_g, isd_loss, l1_loss, wpa_loss, wpa_loss_with_plan,
    Plan, SinkhornConfig, TermWeights,
};
use crate::tensor::{Bound, ParamStore, Scalar, Tape, Tensor, Var};

/// Seed-stream offset for parameter initialisation.
const INIT_STREAM: u64 = 0x1417;

/// The four networks. Parameter values live in separate stores: encoder
/// and generator share one, the two discriminators another.
#[derive(Clone, Debug)]
pub struct Networks {
    pub encoder: Encoder,
    pub generator: Generator,
    pub d_global: Discriminator,
    pub d_local: Discriminator,
}

/// Networks plus parameter values and spectral-norm state.
pub struct Model<T> {
    pub nets: Networks,
    pub g: ParamStore<T>,
    pub d: ParamStore<T>,
    pub sn_global: SpectralState<T>,
    pub sn_local: SpectralState<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_STREAM);
        let mut g = ParamStore::new();
        let encoder = Encoder::new(cfg.encoder(), &mut g, &mut rng)?;
        let generator = Generator::new(cfg.generator(), &mut g, &mut rng)?;
        let mut d = ParamStore::new();
        let (d_global, sn_global) = Discriminator::new("dg", cfg.global_disc(), &mut d, &mut rng)?;
        let (d_local, sn_local) = Discriminator::new("dl", cfg.local_disc(), &mut d, &mut rng)?;
        Ok(Model {
            nets: Networks {
                encoder,
                generator,
                d_global,
                d_local,
            },
            g,
            d,
            sn_global,
            sn_local,
        })
    }

    /// Same networks and values in another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let sn = |s: &SpectralState<T>| SpectralState {
            names: s.names.clone(),
            u: s.u
                .iter()
                .map(|u| {
                    u.iter()
                        .map(|x| U::lit(x.to_f64().unwrap_or(f64::NAN)))
                        .collect()
                })
                .collect(),
        };
        Model {
            nets: self.nets.clone(),
            g: self.g.cast(),
            d: self.d.cast(),
            sn_global: sn(&self.sn_global),
            sn_local: sn(&self.sn_local),
        }
    }
}

/// One training example with its mask applied.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub image: Tensor<T>,
    pub corrupted: Tensor<T>,
    pub tokens: Vec<usize>,
    pub mask: Mask,
    pub patch_mask: Vec<bool>,
}

impl<T: Scalar> Example<T> {
    pub fn new(image: Tensor<T>, tokens: Vec<usize>, mask: Mask, patch: usize) -> Result<Self> {
        let corrupted = apply_mask(&image, &mask)?;
        let patch_mask = mask.patch_mask(patch)?;
        Ok(Example {
            image,
            corrupted,
            tokens,
            mask,
            patch_mask,
        })
    }
}

pub fn sample_mask(sample: &Sample, mode: MaskMode, area: f64) -> Result<Mask> {
    let [_, h, w] = sample.image.dims3()?;
    match mode {
        MaskMode::Center => center_mask(h, w, area),
        MaskMode::Object => object_mask(h, w, &sample.boxes),
    }
}

pub fn prepare(sample: &Sample, cfg: &TrainConfig) -> Result<Example<f32>> {
    let mask = sample_mask(sample, cfg.mask, cfg.mask_area)?;
    Example::new(sample.image.clone(), sample.tokens.clone(), mask, cfg.patch)
}

/// Handles produced by the encoder/generator half of a step.
#[derive(Clone, Debug)]
pub struct GeneratorPass {
    /// `I_r` per example.
    pub restored: Vec<Var>,
    /// Batch means.
    pub cmad: Var,
    pub isd: Var,
    pub wpa: Var,
    pub l1: Var,
    /// Whether every Sinkhorn solve met its tolerance.
    pub ot_converged: bool,
    /// Transport plans per example; empty when they were supplied.
    pub plans: Vec<Plan>,
}

/// Loss constants held fixed while re-evaluating a pass.
pub struct Frozen<'a> {
    pub teacher: &'a Bound,
    pub plans: &'a [Plan],
}

fn batch_mean<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, T::lit(1.0 / terms.len() as f64))
}

fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let s = tape.scale(v, T::lit(w))?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| Error::shape("weighted sum of no terms"))
}

impl Networks {
    /// Original pass, corrupted pass, generator and the four non-adversarial
    /// losses. CMAD and ISD targets come from the original pass with
    /// gradients stopped; WPA is taken on the original pass itself.
    /// `frozen`, when given, replaces the loss constants (teacher targets
    /// and transport plans) with ones taken at other weights.
    pub fn generator_pass<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        frozen: Option<&Frozen>,
        batch: &[Example<T>],
        sinkhorn: &SinkhornConfig,
    ) -> Result<GeneratorPass> {
        if batch.is_empty() {
            return Err(Error::shape("empty batch"));
        }
        let n = batch.len();
        let (mut cmad, mut isd, mut wpa, mut l1) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        let mut restored = Vec::with_capacity(n);
        let mut ot_converged = true;
        let mut plans = Vec::with_capacity(n);
        for ex in batch {
            let clean = vec![false; ex.patch_mask.len()];
            let image = tape.constant(ex.image.clone())?;
            let original = self.encoder.forward(tape, p, &ex.tokens, image, &clean)?;
            let corrupted = tape.constant(ex.corrupted.clone())?;
            let student = self
                .encoder
                .forward(tape, p, &ex.tokens, corrupted, &ex.patch_mask)?;

            let target = match frozen {
                Some(f) => self
                    .encoder
                    .forward(tape, f.teacher, &ex.tokens, image, &clean)?,
                None => original,
            };
            let m_o = correlation_map(tape, target.text, target.visual)?;
            let m_r = correlation_map(tape, student.text, student.visual)?;
            cmad.push(cmad_loss(tape, m_r, m_o)?);
            isd.push(isd_loss(tape, target.visual, student.visual)?);
            let valid: Vec<bool> = ex.tokens.iter().map(|&t| t != PAD).collect();
            let w = match frozen {
                Some(f) => {
                    let plan = f
                        .plans
                        .get(plans.len())
                        .ok_or_else(|| Error::shape("fewer frozen plans than examples"))?;
                    wpa_loss_with_plan(tape, original.visual, original.text, &valid, plan)?
                }
                None => {
                    let (w, plan) =
                        wpa_loss(tape, original.visual, original.text, &valid, sinkhorn)?;
                    ot_converged &= plan.converged;
                    plans.push(plan);
                    w
                }
            };
            wpa.push(w);

            let r = self.generator.forward(tape, p, student.visual)?;
            l1.push(l1_loss(tape, r, image)?);
            restored.push(r);
        }
        Ok(GeneratorPass {
            restored,
            cmad: batch_mean(tape, &cmad)?,
            isd: batch_mean(tape, &isd)?,
            wpa: batch_mean(tape, &wpa)?,
            l1: batch_mean(tape, &l1)?,
            ot_converged,
            plans,
        })
    }

    /// Global and local scores (`[k]` each) of a batch of full images and
    /// their mask crops. One power-iteration step per discriminator,
    /// persisted only when `update` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn scores<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        sn_global: &mut SpectralState<T>,
        sn_local: &mut SpectralState<T>,
        images: &[&[Var]],
        masks: &[&Mask],
        update: bool,
    ) -> Result<Vec<(Var, Var)>> {
        let wg = self
            .d_global
            .normalized_weights(tape, p, sn_global, 1, update)?;
        let wl = self
            .d_local
            .normalized_weights(tape, p, sn_local, 1, update)?;
        let mut out = Vec::with_capacity(images.len());
        for set in images {
            if set.len() != masks.len() || set.is_empty() {
                return Err(Error::shape(format!(
                    "{} images for {} masks",
                    set.len(),
                    masks.len()
                )));
            }
            let mut g = Vec::with_capacity(set.len());
            let mut l = Vec::with_capacity(set.len());
            for (&x, mask) in set.iter().zip(masks) {
                g.push(self.d_global.score(tape, p, &wg, x)?);
                let crop = local_crop(tape, x, mask, LOCAL_SIZE)?;
                l.push(self.d_local.score(tape, p, &wl, crop)?);
            }
            out.push((tape.concat(&g, 0)?, tape.concat(&l, 0)?));
        }
        Ok(out)
    }

    /// `total_g` on the tape together with the adversarial generator terms.
    #[allow(clippy::too_many_arguments)]
    pub fn generator_objective<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        dp: &Bound,
        sn_global: &mut SpectralState<T>,
        sn_local: &mut SpectralState<T>,
        pass: &GeneratorPass,
        masks: &[&Mask],
        w: &TermWeights,
    ) -> Result<(Var, Var, Var)> {
        let s = self.scores(
            tape,
            dp,
            sn_global,
            sn_local,
            &[&pass.restored],
            masks,
            false,
        )?;
        let (fake_g, fake_l) = s[0];
        let g_adv = hinge_g(tape, fake_g)?;
        let l_adv = hinge_g(tape, fake_l)?;
        let total = weighted_sum(
            tape,
            &[
                (w.cmad, pass.cmad),
                (w.isd, pass.isd),
                (w.wpa, pass.wpa),
                (w.recon, pass.l1),
                (w.g_adv, g_adv),
                (w.l_adv, l_adv),
            ],
        )?;
        Ok((total, g_adv, l_adv))
    }

    /// Discriminator hinge terms on real images and detached restorations,
    /// with `total_d` on the tape.
    #[allow(clippy::too_many_arguments)]
    pub fn discriminator_objective<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        dp: &Bound,
        sn_global: &mut SpectralState<T>,
        sn_local: &mut SpectralState<T>,
        real: &[Var],
        fake: &[Var],
        masks: &[&Mask],
        w: &TermWeights,
    ) -> Result<(Var, Var, Var)> {
        let s = self.scores(tape, dp, sn_global, sn_local, &[real, fake], masks, true)?;
        let ((real_g, real_l), (fake_g, fake_l)) = (s[0], s[1]);
        let g_adv = hinge_d(tape, real_g, fake_g)?;
        let l_adv = hinge_d(tape, real_l, fake_l)?;
        let total = if w.g_adv == w.l_adv {
            let sum = tape.add(g_adv, l_adv)?;
            tape.scale(sum, T::lit(w.g_adv))?
        } else {
            weighted_sum(tape, &[(w.g_adv, g_adv), (w.l_adv, l_adv)])?
        };
        Ok((total, g_adv, l_adv))
    }
}

/// Mean absolute error over the missing pixels (all channels).
pub fn masked_l1<T: Scalar>(restored: &Tensor<T>, truth: &Tensor<T>, mask: &Mask) -> Result<f64> {
    let [c, h, w] = restored.dims3()?;
    if truth.shape() != restored.shape() || (mask.height(), mask.width()) != (h, w) {
        return Err(Error::shape("masked_l1: image and mask shapes differ"));
    }
    if mask.count() == 0 {
        return Ok(0.0);
    }
    let (r, t) = (restored.data(), truth.data());
    let mut sum = 0.0;
    for ch in 0..c {
        for (i, &m) in mask.grid().iter().enumerate() {
            if m != 0 {
                let k = ch * h * w + i;
                sum +=
                    (r[k].to_f64().unwrap_or(f64::NAN) - t[k].to_f64().unwrap_or(f64::NAN)).abs();
            }
        }
    }
    Ok(sum / (c * mask.count()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_l1_counts_only_holes() {
        let truth = Tensor::<f32>::zeros(&[2, 4, 4]);
        let mut restored = Tensor::<f32>::full(&[2, 4, 4], 0.25);
        restored.data_mut()[0] = 5.0;
        let mut grid = vec![0u8; 16];
        grid[5] = 1;
        grid[6] = 1;
        let mask = Mask::from_grid(4, 4, grid).unwrap();
        assert_eq!(masked_l1(&restored, &truth, &mask).unwrap(), 0.25);
        assert_eq!(
            masked_l1(&restored, &truth, &Mask::empty(4, 4)).unwrap(),
            0.0
        );
    }
}
