use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::info;

use cma_core::data::io::{parse_boxes, read_image, write_image, write_manifest, ManifestEntry};
use cma_core::data::{center_mask, object_mask, synth_dataset, Mask, Vocab};
use cma_core::metrics::{evaluate_dir, write_pair_metrics, write_report, FeatureExtractor};
use cma_core::tensor::check_ops;
use cma_core::train::{
    ablate, full_graph_check, parse_drop, train, Inpainter, TrainConfig, FULL_CHECK_MAX_ELEMENTS,
};
use cma_core::Error;

/// Relative-error bound for `gradcheck`.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "cma", version, about = "Text-guided image inpainting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic captioned dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Take image size and shape counts from this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and write losses, logs and checkpoints to OUT.
    Train {
        /// `key = value` file; the desk defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Log every N steps.
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Score restored images against ground truth with matching names.
    Eval {
        #[arg(long)]
        restored: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "cma")]
        method: String,
        /// Also write per-image metrics here.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Fill a masked region of one image.
    Inpaint {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// `center`, or `boxes:FILE` with `x0,y0,x1,y1;...` in FILE.
        #[arg(long, default_value = "center")]
        mask: String,
        #[arg(long)]
        text: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare tape gradients with central differences.
    Gradcheck {
        /// Model config for the full-graph check; the tiny preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Random points per op.
        #[arg(long, default_value_t = 3)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest parameter tensor probed in the full graph.
        #[arg(long, default_value_t = FULL_CHECK_MAX_ELEMENTS)]
        max_elements: usize,
    },
    /// Train with loss components removed and compare against the full model.
    Ablate {
        /// Comma-separated subset of cmad,isd,wpa,recon,g_adv,l_adv.
        #[arg(long, default_value = "")]
        drop: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Metric CSV with one row per trained variant.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Skip training the full model.
        #[arg(long)]
        no_baseline: bool,
    },
}

fn load_config(path: Option<&Path>, default: TrainConfig) -> anyhow::Result<TrainConfig> {
    match path {
        None => Ok(default),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::parse(&text).with_context(|| p.display().to_string())
        }
    }
}

fn synth(out: &Path, n: usize, seed: u64, config: Option<&Path>) -> anyhow::Result<()> {
    let mut cfg = load_config(config, TrainConfig::desk())?;
    cfg.seed = seed;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let samples = synth_dataset(seed, n, &cfg.synth(), &Vocab::template())?;
    for (i, s) in samples.iter().enumerate() {
        write_image(&out.join(format!("{i:05}.png")), &s.image)?;
    }
    let entries: Vec<ManifestEntry> = samples.iter().map(ManifestEntry::from).collect();
    write_manifest(&out.join("manifest.tsv"), &entries)?;
    info!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn parse_mask(spec: &str, size: usize, area: f64) -> anyhow::Result<Mask> {
    if spec == "center" {
        return Ok(center_mask(size, size, area)?);
    }
    let Some(file) = spec.strip_prefix("boxes:") else {
        bail!(Error::Config(format!(
            "mask must be `center` or `boxes:FILE`, got {spec:?}"
        )));
    };
    let text = fs::read_to_string(file).with_context(|| format!("reading {file}"))?;
    Ok(object_mask(size, size, &parse_boxes(&text)?)?)
}

fn gradcheck(
    cfg: &TrainConfig,
    points: usize,
    seed: u64,
    max_elements: usize,
) -> anyhow::Result<()> {
    let mut failed = Vec::new();
    for c in check_ops(points, seed)? {
        let ok = c.max_rel_error <= GRAD_TOLERANCE;
        println!(
            "op    {:<28} {:.3e} {}",
            c.op,
            c.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(c.op.to_string());
        }
    }
    for c in full_graph_check(cfg, max_elements)? {
        let ok = c.report.max_rel_error <= GRAD_TOLERANCE;
        println!(
            "param {:<28} {:.3e} {}",
            c.name,
            c.report.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(c.name);
        }
    }
    if !failed.is_empty() {
        bail!(Error::Numeric(format!(
            "gradient mismatch above {GRAD_TOLERANCE:e}: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            out,
            n,
            seed,
            config,
        } => synth(&out, n, seed, config.as_deref()),
        Command::Train {
            config,
            out,
            resume,
            log_every,
        } => {
            let cfg = load_config(config.as_deref(), TrainConfig::desk())?;
            let total = cfg.total_steps();
            let every = log_every.max(1);
            let run = train(cfg, &out, resume.as_deref(), |s| {
                if s.step % every == 0 || s.step == total {
                    info!(
                        "step {}/{total} masked_l1 {:.4} total_g {:.4} total_d {:.4} lr {:.2e}",
                        s.step, s.masked_l1, s.record.total_g, s.record.total_d, s.lr
                    );
                }
            })?;
            println!("{}", run.final_checkpoint.display());
            Ok(())
        }
        Command::Eval {
            restored,
            gt,
            report,
            method,
            pairs,
        } => {
            let eval = evaluate_dir(&method, &restored, &gt, &FeatureExtractor::default())?;
            write_report(&report, std::slice::from_ref(&eval.report))?;
            if let Some(p) = pairs {
                write_pair_metrics(&p, &eval.pairs)?;
            }
            println!("{}", eval.report.csv_row());
            Ok(())
        }
        Command::Inpaint {
            ckpt,
            image,
            mask,
            text,
            out,
        } => {
            let model = Inpainter::load(&ckpt)?;
            let img = read_image(&image)?;
            let mask = parse_mask(&mask, model.cfg.image_size, model.cfg.mask_area)?;
            write_image(&out, &model.inpaint(&img, &mask, &text)?)?;
            Ok(())
        }
        Command::Gradcheck {
            config,
            points,
            seed,
            max_elements,
        } => {
            let cfg = load_config(config.as_deref(), TrainConfig::tiny())?;
            gradcheck(&cfg, points, seed, max_elements)
        }
        Command::Ablate {
            drop,
            config,
            report,
            no_baseline,
        } => {
            let cfg = load_config(config.as_deref(), TrainConfig::desk())?;
            let drop = parse_drop(&drop)?;
            let mut variants = Vec::new();
            if !no_baseline && !drop.is_empty() {
                variants.push(Vec::new());
            }
            variants.push(drop);
            let mut rows = Vec::new();
            for d in &variants {
                let a = ablate(&cfg, d)?;
                info!(
                    "{}: masked_l1 {:.5}",
                    a.result.evaluation.report.method, a.result.masked_l1
                );
                println!("{}", a.result.evaluation.report.csv_row());
                rows.push(a.result.evaluation.report);
            }
            if let Some(p) = report {
                write_report(&p, &rows)?;
            }
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::Numeric(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let wrap = |e: Error| anyhow::Error::from(e).context("outer");
        assert_eq!(exit_code(&wrap(Error::Config("x".into()))), 2);
        assert_eq!(exit_code(&wrap(Error::Numeric("x".into()))), 3);
        assert_eq!(exit_code(&wrap(Error::Shape("x".into()))), 1);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 1);
    }

    #[test]
    fn mask_specs() {
        let m = parse_mask("center", 32, 0.5).unwrap();
        assert_eq!(m.count(), center_mask(32, 32, 0.5).unwrap().count());
        assert_eq!(exit_code(&parse_mask("ring", 32, 0.5).unwrap_err()), 2);
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("b.txt");
        fs::write(&f, "1,2,5,6;10,10,12,12").unwrap();
        let m = parse_mask(&format!("boxes:{}", f.display()), 32, 0.5).unwrap();
        assert_eq!(m.count(), 16 + 4);
    }
}
