use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::model::{prepare, Example, Frozen, Model};
use crate::data::{synth_dataset, Mask, Vocab};
use crate::error::Result;
use crate::nn::normal;
use crate::tensor::{grad_check, GradCheckReport, Tape, Tensor, OP_CHECK_STEP};

/// Largest parameter tensor probed by [`full_graph_check`].
pub const FULL_CHECK_MAX_ELEMENTS: usize = 64;
/// Std of the perturbation added to every weight before probing, so that
/// zero-initialised gains do not hide whole branches.
pub const FULL_CHECK_JITTER: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub report: GradCheckReport,
}

/// Checks `d total_g / dθ` for every encoder/generator tensor θ with at
/// most `max_elements` entries, in f64, through both encoder passes, the
/// generator, all four non-adversarial losses and the (frozen)
/// discriminators.
pub fn full_graph_check(cfg: &TrainConfig, max_elements: usize) -> Result<Vec<ParamCheck>> {
    let base: Model<f32> = Model::new(cfg)?;
    let mut model: Model<f64> = base.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc4ec);
    let ids: Vec<_> = model.g.ids().collect();
    for &id in &ids {
        let jitter: Tensor<f64> = normal(&mut rng, model.g.get(id).shape(), FULL_CHECK_JITTER);
        for (p, j) in model.g.get_mut(id).data_mut().iter_mut().zip(jitter.data()) {
            *p += j;
        }
    }
    let data = synth_dataset(cfg.seed, cfg.batch_size, &cfg.synth(), &Vocab::template())?;
    let batch = data
        .iter()
        .map(|s| {
            let e = prepare(s, cfg)?;
            Example::new(e.image.cast(), e.tokens, e.mask, cfg.patch)
        })
        .collect::<Result<Vec<Example<f64>>>>()?;
    let masks: Vec<&Mask> = batch.iter().map(|e| &e.mask).collect();
    let terms = cfg.terms();

    let plans = {
        let mut tape = Tape::new();
        let p = model.g.bind(&mut tape, false)?;
        model
            .nets
            .generator_pass(&mut tape, &p, None, &batch, &cfg.sinkhorn)?
            .plans
    };

    let mut out = Vec::new();
    for &id in &ids {
        let x = model.g.get(id).clone();
        if x.len() > max_elements {
            continue;
        }
        let m = &model;
        let report = grad_check(
            |tape, x| {
                // distillation targets and transport plans are constants of
                // the loss, so they stay at the base point
                let base = m.g.bind(tape, false)?;
                let p = base.replace(id, x);
                let frozen = Frozen {
                    teacher: &base,
                    plans: &plans,
                };
                let pass = m
                    .nets
                    .generator_pass(tape, &p, Some(&frozen), &batch, &cfg.sinkhorn)?;
                let dp = m.d.bind(tape, false)?;
                let (mut sg, mut sl) = (m.sn_global.clone(), m.sn_local.clone());
                let (total, _, _) = m
                    .nets
                    .generator_objective(tape, &dp, &mut sg, &mut sl, &pass, &masks, &terms)?;
                Ok(total)
            },
            &x,
            OP_CHECK_STEP,
        )?;
        out.push(ParamCheck {
            name: model.g.name(id).to_string(),
            report,
        });
    }
    Ok(out)
}
