use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::model::{masked_l1, prepare, Example, Model};
use super::trainer::{load_params, StepStats, Trainer, LOG_CSV_HEADER};
use crate::data::{sample_seed, synth_sample, Mask, Vocab};
use crate::error::{Error, Result};
use crate::generator::compose_output;
use crate::metrics::{evaluate_pairs, Evaluation, FeatureExtractor};
use crate::objectives::{Component, LOSS_CSV_HEADER};
use crate::tensor::{Tape, Tensor};

pub const LOSSES_CSV: &str = "losses.csv";
pub const TRAIN_LOG_CSV: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const FINAL_CHECKPOINT: &str = "final.cma";

pub fn checkpoint_name(step: usize) -> String {
    format!("ckpt_{step:06}.cma")
}

/// Runs `trainer` up to its configured step budget, handing each step to
/// `sink`.
pub fn run_steps(
    trainer: &mut Trainer,
    mut sink: impl FnMut(&Trainer, &StepStats) -> Result<()>,
) -> Result<Vec<StepStats>> {
    let total = trainer.cfg.total_steps();
    let mut history = Vec::with_capacity(total.saturating_sub(trainer.step));
    while trainer.step < total {
        let stats = trainer.train_step()?;
        sink(trainer, &stats)?;
        history.push(stats);
    }
    Ok(history)
}

/// Keeps the header and the rows whose leading step is at most `step`.
fn truncate_csv(path: &Path, header: &str, step: usize) -> Result<()> {
    let mut kept = vec![header.to_string()];
    if path.exists() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| Error::io(path, e))?;
            let s = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
            match s {
                Some(s) if s <= step => kept.push(line),
                Some(_) => {}
                None => {
                    return Err(Error::Format(format!(
                        "{}: bad row {line:?}",
                        path.display()
                    )))
                }
            }
        }
    }
    kept.push(String::new());
    fs::write(path, kept.join("\n")).map_err(|e| Error::io(path, e))
}

fn appender(path: &Path) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

/// Result of a training run.
pub struct TrainRun {
    pub trainer: Trainer,
    /// Steps executed by this invocation.
    pub history: Vec<StepStats>,
    pub final_checkpoint: PathBuf,
}

/// Trains into `out`: per-step `losses.csv` and `train_log.csv`, the
/// config echo, `ckpt_NNNNNN.cma` every `checkpoint_every` steps and
/// `final.cma`. With `resume`, continues from that checkpoint and drops
/// any CSV rows written after it.
pub fn train(
    cfg: TrainConfig,
    out: &Path,
    resume: Option<&Path>,
    mut progress: impl FnMut(&StepStats),
) -> Result<TrainRun> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg)?,
    };
    let (losses, log) = (out.join(LOSSES_CSV), out.join(TRAIN_LOG_CSV));
    truncate_csv(&losses, LOSS_CSV_HEADER, trainer.step)?;
    truncate_csv(&log, LOG_CSV_HEADER, trainer.step)?;
    let config = out.join(CONFIG_FILE);
    fs::write(&config, trainer.cfg.to_text()).map_err(|e| Error::io(&config, e))?;

    let mut lw = appender(&losses)?;
    let mut gw = appender(&log)?;
    let every = trainer.cfg.checkpoint_every;
    let history = run_steps(&mut trainer, |t, s| {
        writeln!(lw, "{}", s.record.csv_row(s.step)).map_err(|e| Error::io(&losses, e))?;
        writeln!(gw, "{}", s.log_row()).map_err(|e| Error::io(&log, e))?;
        progress(s);
        if every > 0 && s.step % every == 0 {
            lw.flush().map_err(|e| Error::io(&losses, e))?;
            gw.flush().map_err(|e| Error::io(&log, e))?;
            t.checkpoint().save(&out.join(checkpoint_name(s.step)))?;
        }
        Ok(())
    })?;
    lw.flush().map_err(|e| Error::io(&losses, e))?;
    gw.flush().map_err(|e| Error::io(&log, e))?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainRun {
        trainer,
        history,
        final_checkpoint,
    })
}

/// Encoder and generator restored from a checkpoint.
pub struct Inpainter {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
}

impl Inpainter {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = TrainConfig::parse(&ckpt.config)?;
        let mut model = Model::new(&cfg)?;
        load_params(ckpt, "g", &mut model.g)?;
        Ok(Inpainter { cfg, model })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Takes the current encoder/generator weights of a trainer.
    pub fn from_trainer(t: &Trainer) -> Result<Self> {
        let mut model = Model::new(&t.cfg)?;
        model.g = t.model.g.cast();
        Ok(Inpainter {
            cfg: t.cfg.clone(),
            model,
        })
    }

    fn check(&self, image: &Tensor<f32>, mask: &Mask) -> Result<()> {
        let s = self.cfg.image_size;
        if image.shape() != [3, s, s] {
            return Err(Error::shape(format!(
                "image {:?} does not match the checkpoint's 3×{s}×{s}",
                image.shape()
            )));
        }
        if (mask.height(), mask.width()) != (s, s) {
            return Err(Error::shape(format!(
                "mask {}×{} does not match the checkpoint's {s}×{s}",
                mask.height(),
                mask.width()
            )));
        }
        Ok(())
    }

    /// Raw generator output `I_r` for an already corrupted example.
    pub fn restore(&self, ex: &Example<f32>) -> Result<Tensor<f32>> {
        self.check(&ex.image, &ex.mask)?;
        let nets = &self.model.nets;
        let mut tape = Tape::new();
        let p = self.model.g.bind(&mut tape, false)?;
        let x = tape.constant(ex.corrupted.clone())?;
        let enc = nets
            .encoder
            .forward(&mut tape, &p, &ex.tokens, x, &ex.patch_mask)?;
        let r = nets.generator.forward(&mut tape, &p, enc.visual)?;
        Ok(tape.value(r).clone())
    }

    /// Blends `I_r` into the corrupted input.
    pub fn complete(&self, ex: &Example<f32>) -> Result<Tensor<f32>> {
        compose_output(&self.restore(ex)?, &ex.corrupted, &ex.mask)
    }

    /// Fills the `mask` region of `image` guided by `text`.
    pub fn inpaint(&self, image: &Tensor<f32>, mask: &Mask, text: &str) -> Result<Tensor<f32>> {
        self.check(image, mask)?;
        let tokens = Vocab::template().tokenize(text, self.cfg.text_len);
        let ex = Example::new(image.clone(), tokens, mask.clone(), self.cfg.patch)?;
        self.complete(&ex)
    }
}

/// Held-out examples that follow the training set in the seed sequence.
pub fn eval_examples(cfg: &TrainConfig) -> Result<Vec<Example<f32>>> {
    let vocab = Vocab::template();
    let synth = cfg.synth();
    (0..cfg.eval_samples)
        .map(|i| {
            prepare(
                &synth_sample(sample_seed(cfg.seed, cfg.samples + i), &synth, &vocab)?,
                cfg,
            )
        })
        .collect()
}

/// Metric report and mean masked-region L1 of the blended outputs.
pub struct ModelEvaluation {
    pub evaluation: Evaluation,
    pub masked_l1: f64,
}

pub fn evaluate_model(
    method: &str,
    inpainter: &Inpainter,
    examples: &[Example<f32>],
    features: &FeatureExtractor,
) -> Result<ModelEvaluation> {
    let mut pairs = Vec::with_capacity(examples.len());
    let mut l1 = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let out = inpainter.complete(ex)?;
        l1 += masked_l1(&out, &ex.image, &ex.mask)?;
        pairs.push((format!("{i:05}"), out, ex.image.clone()));
    }
    Ok(ModelEvaluation {
        evaluation: evaluate_pairs(method, &pairs, features)?,
        masked_l1: l1 / examples.len().max(1) as f64,
    })
}

pub struct Ablation {
    pub cfg: TrainConfig,
    pub history: Vec<StepStats>,
    pub result: ModelEvaluation,
}

/// Trains with the `drop` components zeroed, in memory, and evaluates on
/// the held-out set. The method name is `full` or `w/o a+b`.
pub fn ablate(cfg: &TrainConfig, drop: &[Component]) -> Result<Ablation> {
    let mut cfg = cfg.clone();
    for &c in drop {
        if !cfg.drop.contains(&c) {
            cfg.drop.push(c);
        }
    }
    cfg.validate()?;
    let method = if cfg.drop.is_empty() {
        "full".to_string()
    } else {
        let names: Vec<&str> = cfg.drop.iter().map(|c| c.name()).collect();
        format!("w/o {}", names.join("+"))
    };
    let mut trainer = Trainer::new(cfg.clone())?;
    let history = run_steps(&mut trainer, |_, _| Ok(()))?;
    let result = evaluate_model(
        &method,
        &Inpainter::from_trainer(&trainer)?,
        &eval_examples(&cfg)?,
        &FeatureExtractor::default(),
    )?;
    Ok(Ablation {
        cfg,
        history,
        result,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_keeps_rows_up_to_step() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "step,a\n1,0.5\n2,0.25\n3,0.125\n").unwrap();
        truncate_csv(&p, "step,a", 2).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "step,a\n1,0.5\n2,0.25\n");
        truncate_csv(&dir.path().join("new.csv"), "step,a", 0).unwrap();
        assert_eq!(
            fs::read_to_string(dir.path().join("new.csv")).unwrap(),
            "step,a\n"
        );
        fs::write(&p, "step,a\nx,1\n").unwrap();
        assert!(truncate_csv(&p, "step,a", 2).is_err());
    }
}
