use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::model::{masked_l1, prepare, Example, Model};
use super::optim::{clip_grad_norm, AdamW};
use crate::data::{synth_dataset, Mask, Vocab};
use crate::discriminator::SpectralState;
use crate::error::{Error, Result};
use crate::objectives::LossRecord;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

const BATCH_STREAM: u64 = 0xba7c;

/// Dataset indices for 1-based `step`: consecutive slices of a fresh
/// seeded permutation per epoch.
pub fn batch_indices(seed: u64, n: usize, batch: usize, step: usize) -> Vec<usize> {
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..batch)
        .map(|k| {
            let pos = (step - 1) * batch + k;
            let epoch = pos / n;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ BATCH_STREAM);
                rng.set_stream(epoch as u64);
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("filled above").1[pos % n]
        })
        .collect()
}

/// Everything one step reports.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub record: LossRecord,
    /// Mean absolute error of `I_r` over the missing pixels.
    pub masked_l1: f64,
    pub lr: f64,
    /// Encoder+generator gradient norm before clipping.
    pub grad_norm_g: f64,
    pub grad_norm_d: f64,
    pub ot_converged: bool,
}

pub const LOG_CSV_HEADER: &str = "step,masked_l1,lr,grad_norm_g,grad_norm_d,ot_converged";

impl StepStats {
    pub fn log_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{}",
            self.step,
            self.masked_l1,
            self.lr,
            self.grad_norm_g,
            self.grad_norm_d,
            self.ot_converged as u8
        )
    }
}

/// Update phase reported to [`Trainer::train_step_observed`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Both discriminators have been updated.
    Discriminator,
    /// Encoder and generator have been updated.
    Generator,
}

/// Training state: model, optimisers, data and the step counter.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub opt_g: AdamW,
    pub opt_d: AdamW,
    pub examples: Vec<Example<f32>>,
    /// Completed steps.
    pub step: usize,
}

fn with_step(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
        other => other,
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let model = Model::new(&cfg)?;
        let data = synth_dataset(cfg.seed, cfg.samples, &cfg.synth(), &Vocab::template())?;
        let examples = data
            .iter()
            .map(|s| prepare(s, &cfg))
            .collect::<Result<Vec<_>>>()?;
        let adam = |s: &ParamStore<f32>| {
            AdamW::new(s, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
        };
        Ok(Trainer {
            opt_g: adam(&model.g),
            opt_d: adam(&model.d),
            model,
            examples,
            step: 0,
            cfg,
        })
    }

    pub fn batch(&self, step: usize) -> Vec<usize> {
        batch_indices(
            self.cfg.seed,
            self.examples.len(),
            self.cfg.batch_size,
            step,
        )
    }

    /// One D-step then one G-step on the next batch.
    pub fn train_step(&mut self) -> Result<StepStats> {
        Ok(self.step_with(None, &mut |_, _| {})?.0)
    }

    /// As [`Self::train_step`] but first rescales the encoder+generator
    /// gradient to `scale × grad_clip`; returns the norm after clipping.
    pub fn train_step_with_grad_scale(&mut self, scale: f64) -> Result<(StepStats, f64)> {
        self.step_with(Some(scale), &mut |_, _| {})
    }

    /// As [`Self::train_step`], calling `observe` after each update phase.
    pub fn train_step_observed(
        &mut self,
        mut observe: impl FnMut(Phase, &Model<f32>),
    ) -> Result<StepStats> {
        Ok(self.step_with(None, &mut observe)?.0)
    }

    fn step_with(
        &mut self,
        scale: Option<f64>,
        observe: &mut dyn FnMut(Phase, &Model<f32>),
    ) -> Result<(StepStats, f64)> {
        let step = self.step + 1;
        self.run_step(step, scale, observe)
            .map_err(|e| with_step(step, e))
    }

    fn run_step(
        &mut self,
        step: usize,
        scale: Option<f64>,
        observe: &mut dyn FnMut(Phase, &Model<f32>),
    ) -> Result<(StepStats, f64)> {
        let cfg = &self.cfg;
        let lr = cfg.lr_at(step);
        let terms = cfg.terms();
        let batch: Vec<Example<f32>> = self
            .batch(step)
            .into_iter()
            .map(|i| self.examples[i].clone())
            .collect();
        let masks: Vec<&Mask> = batch.iter().map(|e| &e.mask).collect();
        let model = &mut self.model;

        let mut tape = Tape::new();
        let gp = model.g.bind(&mut tape, true)?;
        let pass = model
            .nets
            .generator_pass(&mut tape, &gp, None, &batch, &cfg.sinkhorn)?;
        let restored: Vec<Tensor<f32>> = pass
            .restored
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect();

        // discriminator step on detached restorations
        let mut dtape = Tape::new();
        let dp = model.d.bind(&mut dtape, true)?;
        let real = batch
            .iter()
            .map(|e| dtape.constant(e.image.clone()))
            .collect::<Result<Vec<Var>>>()?;
        let fake = restored
            .iter()
            .map(|r| dtape.constant(r.clone()))
            .collect::<Result<Vec<Var>>>()?;
        let Model {
            nets,
            d,
            sn_global,
            sn_local,
            ..
        } = model;
        let (total_d, g_adv_d, l_adv_d) = nets.discriminator_objective(
            &mut dtape, &dp, sn_global, sn_local, &real, &fake, &masks, &terms,
        )?;
        dtape.backward(total_d)?;
        d.zero_grad();
        d.accumulate_grads(&dtape, &dp);
        let grad_norm_d = d.grad_norm();
        self.opt_d.step(d, lr)?;
        let (g_adv_d, l_adv_d) = (dtape.item(g_adv_d) as f64, dtape.item(l_adv_d) as f64);
        drop(dtape);
        observe(Phase::Discriminator, &self.model);
        let Model {
            nets,
            g,
            d,
            sn_global,
            sn_local,
        } = &mut self.model;

        // generator step against the updated discriminators
        let dpg = d.bind(&mut tape, false)?;
        let (total_g, g_adv_g, l_adv_g) =
            nets.generator_objective(&mut tape, &dpg, sn_global, sn_local, &pass, &masks, &terms)?;
        tape.backward(total_g)?;
        g.zero_grad();
        g.accumulate_grads(&tape, &gp);
        if let Some(scale) = scale {
            let norm = g.grad_norm();
            if norm > 0.0 {
                let s = (scale * cfg.grad_clip / norm) as f32;
                let ids: Vec<_> = g.ids().collect();
                for id in ids {
                    g.grad_mut(id).iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        let grad_norm_g = clip_grad_norm(g, cfg.grad_clip);
        let clipped = g.grad_norm();
        self.opt_g.step(g, lr)?;
        observe(Phase::Generator, &self.model);

        let item = |v: Var| tape.item(v) as f64;
        let record = LossRecord {
            cmad: item(pass.cmad),
            isd: item(pass.isd),
            wpa: item(pass.wpa),
            l1: item(pass.l1),
            g_adv_g: item(g_adv_g),
            l_adv_g: item(l_adv_g),
            g_adv_d,
            l_adv_d,
            ..LossRecord::default()
        }
        .with_totals(&terms)?;
        let mut ml1 = 0.0;
        for (r, e) in restored.iter().zip(&batch) {
            ml1 += masked_l1(r, &e.image, &e.mask)?;
        }
        self.step = step;
        let stats = StepStats {
            step,
            record,
            masked_l1: ml1 / batch.len() as f64,
            lr,
            grad_norm_g,
            grad_norm_d,
            ot_converged: pass.ot_converged,
        };
        Ok((stats, clipped))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        let store = |prefix: &str, s: &ParamStore<f32>, out: &mut Vec<(String, Tensor<f32>)>| {
            for id in s.ids() {
                out.push((format!("{prefix}/{}", s.name(id)), s.get(id).clone()));
            }
        };
        let moments =
            |prefix: &str, s: &ParamStore<f32>, o: &AdamW, out: &mut Vec<(String, Tensor<f32>)>| {
                for (k, id) in s.ids().enumerate() {
                    out.push((format!("{prefix}.m/{}", s.name(id)), o.m[k].clone()));
                    out.push((format!("{prefix}.v/{}", s.name(id)), o.v[k].clone()));
                }
            };
        let spectral = |s: &SpectralState<f32>, out: &mut Vec<(String, Tensor<f32>)>| {
            for (name, u) in s.names.iter().zip(&s.u) {
                out.push((
                    format!("sn/{name}"),
                    Tensor::new(&[u.len()], u.clone()).expect("non-empty u"),
                ));
            }
        };
        let m = &self.model;
        store("g", &m.g, &mut tensors);
        store("d", &m.d, &mut tensors);
        moments("adam_g", &m.g, &self.opt_g, &mut tensors);
        moments("adam_d", &m.d, &self.opt_d, &mut tensors);
        spectral(&m.sn_global, &mut tensors);
        spectral(&m.sn_local, &mut tensors);
        Checkpoint {
            step: self.step as u64,
            config: self.cfg.to_text(),
            counters: vec![
                ("adam_g.t".into(), self.opt_g.t),
                ("adam_d.t".into(), self.opt_d.t),
            ],
            tensors,
        }
    }

    /// Rebuilds the state saved by [`Self::checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = TrainConfig::parse(&ckpt.config)?;
        let mut t = Trainer::new(cfg)?;
        t.restore(ckpt)?;
        Ok(t)
    }

    /// Resumes from `ckpt` under `cfg`, which may differ from the saved
    /// configuration only in the step budget and checkpoint cadence.
    pub fn resume(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let saved = TrainConfig::parse(&ckpt.config)?;
        let normalise = |c: &TrainConfig| TrainConfig {
            steps: 0,
            max_epochs: 0,
            checkpoint_every: 0,
            ..c.clone()
        };
        if normalise(&saved) != normalise(&cfg) {
            return Err(Error::config(
                "checkpoint was written under a different configuration (only steps, max_epochs and checkpoint_every may change)",
            ));
        }
        let mut t = Trainer::new(cfg)?;
        t.restore(ckpt)?;
        Ok(t)
    }

    fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let m = &mut self.model;
        load_params(ckpt, "g", &mut m.g)?;
        load_params(ckpt, "d", &mut m.d)?;
        load_moments(ckpt, "adam_g", &m.g, &mut self.opt_g)?;
        load_moments(ckpt, "adam_d", &m.d, &mut self.opt_d)?;
        load_spectral(ckpt, &mut m.sn_global)?;
        load_spectral(ckpt, &mut m.sn_local)?;
        self.step = ckpt.step as usize;
        Ok(())
    }
}

fn tensor<'a>(ckpt: &'a Checkpoint, name: &str) -> Result<&'a Tensor<f32>> {
    ckpt.tensor(name)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
}

/// Copies the `prefix/<name>` tensors of `ckpt` into `store`.
pub(crate) fn load_params(
    ckpt: &Checkpoint,
    prefix: &str,
    store: &mut ParamStore<f32>,
) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = tensor(ckpt, &format!("{prefix}/{}", store.name(id)))?.clone();
        store.set(id, t)?;
    }
    Ok(())
}

fn load_moments(
    ckpt: &Checkpoint,
    prefix: &str,
    store: &ParamStore<f32>,
    opt: &mut AdamW,
) -> Result<()> {
    for (k, id) in store.ids().enumerate() {
        for (which, slot) in [("m", &mut opt.m[k]), ("v", &mut opt.v[k])] {
            let name = format!("{prefix}.{which}/{}", store.name(id));
            let t = tensor(ckpt, &name)?;
            if t.shape() != slot.shape() {
                return Err(Error::shape(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
    }
    opt.t = ckpt
        .counter(&format!("{prefix}.t"))
        .ok_or_else(|| Error::Format(format!("checkpoint lacks counter {prefix}.t")))?;
    Ok(())
}

fn load_spectral(ckpt: &Checkpoint, s: &mut SpectralState<f32>) -> Result<()> {
    for (name, u) in s.names.iter().zip(s.u.iter_mut()) {
        let t = tensor(ckpt, &format!("sn/{name}"))?;
        if t.len() != u.len() {
            return Err(Error::shape(format!(
                "sn/{name}: length {}, expected {}",
                t.len(),
                u.len()
            )));
        }
        *u = t.data().to_vec();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen: Vec<usize> = (1..=5).flat_map(|s| batch_indices(3, n, 2, s)).collect();
        seen.sort();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, n, 4, 7), batch_indices(3, n, 4, 7));
        assert_ne!(batch_indices(3, n, 4, 1), batch_indices(4, n, 4, 1));
        // a batch straddling an epoch boundary
        let b = batch_indices(3, n, 4, 3);
        assert_eq!(&b[..2], &batch_indices(3, n, 2, 5)[..]);
    }
}
