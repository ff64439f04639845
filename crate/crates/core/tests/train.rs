use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};

use cma_core::data::{apply_mask, center_mask, Mask};
use cma_core::discriminator::SpectralState;
use cma_core::objectives::Component;
use cma_core::tensor::{ParamStore, Tensor};
use cma_core::train::{
    ablate, checkpoint_name, run_steps, train, Checkpoint, Inpainter, Phase, TrainConfig, Trainer,
    CONFIG_FILE, FINAL_CHECKPOINT, LOG_CSV_HEADER, LOSSES_CSV, TRAIN_LOG_CSV,
};
use cma_core::Error;

fn tiny(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        ..TrainConfig::tiny()
    }
}

fn hash_store(s: &ParamStore<f32>) -> u64 {
    let mut h = DefaultHasher::new();
    for id in s.ids() {
        s.name(id).hash(&mut h);
        for v in s.get(id).data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

fn hash_sn(s: &SpectralState<f32>) -> u64 {
    let mut h = DefaultHasher::new();
    for u in &s.u {
        for v in u {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

#[test]
fn warmup_is_linear_then_constant() {
    let cfg = TrainConfig {
        warmup_steps: 4,
        ..tiny(6)
    };
    let mut t = Trainer::new(cfg).unwrap();
    for s in 1..=6usize {
        let stats = t.train_step().unwrap();
        let want = if s < 4 { 1e-4 * s as f64 / 4.0 } else { 1e-4 };
        assert!(
            (stats.lr - want).abs() <= 1e-12,
            "step {s}: {} vs {want}",
            stats.lr
        );
    }
}

#[test]
fn oversized_gradients_are_clipped_to_one() {
    let mut t = Trainer::new(tiny(2)).unwrap();
    let (stats, clipped) = t.train_step_with_grad_scale(10.0).unwrap();
    assert!(
        (stats.grad_norm_g - 10.0).abs() < 1e-3,
        "{}",
        stats.grad_norm_g
    );
    assert!((clipped - 1.0).abs() <= 1e-5, "{clipped}");
}

#[test]
fn each_phase_touches_only_its_own_parameters() {
    let mut t = Trainer::new(tiny(3)).unwrap();
    for _ in 0..3 {
        let m = &t.model;
        let mut last = (
            hash_store(&m.g),
            hash_store(&m.d),
            hash_sn(&m.sn_global),
            hash_sn(&m.sn_local),
        );
        let mut phases = Vec::new();
        t.train_step_observed(|phase, m| {
            let now = (
                hash_store(&m.g),
                hash_store(&m.d),
                hash_sn(&m.sn_global),
                hash_sn(&m.sn_local),
            );
            match phase {
                Phase::Discriminator => {
                    assert_eq!(now.0, last.0, "D-step changed the generator");
                    assert_ne!(now.1, last.1, "D-step left the discriminators unchanged");
                }
                Phase::Generator => {
                    assert_ne!(now.0, last.0, "G-step left the generator unchanged");
                    assert_eq!(
                        (now.1, now.2, now.3),
                        (last.1, last.2, last.3),
                        "G-step changed discriminator state"
                    );
                }
            }
            phases.push(phase);
            last = now;
        })
        .unwrap();
        assert_eq!(phases, [Phase::Discriminator, Phase::Generator]);
    }
}

#[test]
fn records_are_complete_and_finite() {
    let mut t = Trainer::new(tiny(1)).unwrap();
    let s = t.train_step().unwrap();
    let r = &s.record;
    for v in [
        r.cmad, r.isd, r.wpa, r.l1, r.g_adv_g, r.l_adv_g, r.g_adv_d, r.l_adv_d, r.total_g,
        r.total_d,
    ] {
        assert!(v.is_finite());
    }
    assert!(s.masked_l1.is_finite() && s.grad_norm_g > 0.0 && s.grad_norm_d > 0.0);
    assert_eq!(s.step, 1);
}

#[test]
fn same_seed_gives_identical_runs() {
    let a = run_steps(&mut Trainer::new(tiny(3)).unwrap(), |_, _| Ok(())).unwrap();
    let b = run_steps(&mut Trainer::new(tiny(3)).unwrap(), |_, _| Ok(())).unwrap();
    assert_eq!(a, b);
    let c = run_steps(
        &mut Trainer::new(TrainConfig { seed: 7, ..tiny(3) }).unwrap(),
        |_, _| Ok(()),
    )
    .unwrap();
    assert_ne!(a, c);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let mut full = Trainer::new(tiny(4)).unwrap();
    let straight = run_steps(&mut full, |_, _| Ok(())).unwrap();

    let mut first = Trainer::new(tiny(2)).unwrap();
    run_steps(&mut first, |_, _| Ok(())).unwrap();
    let bytes = first.checkpoint().encode();
    let ckpt = Checkpoint::decode(&bytes).unwrap();
    let mut resumed = Trainer::resume(tiny(4), &ckpt).unwrap();
    assert_eq!(resumed.step, 2);
    let rest = run_steps(&mut resumed, |_, _| Ok(())).unwrap();

    assert_eq!(rest, straight[2..]);
    assert_eq!(resumed.checkpoint().encode(), full.checkpoint().encode());
}

#[test]
fn resume_rejects_a_changed_config() {
    let mut t = Trainer::new(tiny(1)).unwrap();
    t.train_step().unwrap();
    let ckpt = t.checkpoint();
    let other = TrainConfig {
        lr: 2e-4,
        ..tiny(4)
    };
    assert!(matches!(
        Trainer::resume(other, &ckpt),
        Err(Error::Config(_))
    ));
    let back = Trainer::from_checkpoint(&ckpt).unwrap();
    assert_eq!(back.checkpoint().encode(), ckpt.encode());
}

fn csv_steps(text: &str) -> Vec<usize> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn train_writes_outputs_and_resume_truncates_logs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..tiny(4)
    };
    let mut seen = Vec::new();
    let run = train(cfg.clone(), out, None, |s| seen.push(s.step)).unwrap();
    assert_eq!(seen, [1, 2, 3, 4]);
    assert_eq!(run.final_checkpoint, out.join(FINAL_CHECKPOINT));
    for f in [
        checkpoint_name(2),
        checkpoint_name(4),
        FINAL_CHECKPOINT.into(),
        CONFIG_FILE.into(),
    ] {
        assert!(out.join(&f).is_file(), "{f}");
    }
    assert_eq!(
        TrainConfig::parse(&fs::read_to_string(out.join(CONFIG_FILE)).unwrap()).unwrap(),
        cfg
    );
    let losses = fs::read_to_string(out.join(LOSSES_CSV)).unwrap();
    let log = fs::read_to_string(out.join(TRAIN_LOG_CSV)).unwrap();
    assert_eq!(csv_steps(&losses), [1, 2, 3, 4]);
    assert_eq!(log.lines().next(), Some(LOG_CSV_HEADER));
    let fin = fs::read(out.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(fin, fs::read(out.join(checkpoint_name(4))).unwrap());

    // resuming from step 2 rewrites rows 3 and 4 identically
    let again = train(cfg, out, Some(&out.join(checkpoint_name(2))), |_| {}).unwrap();
    assert_eq!(again.history.len(), 2);
    assert_eq!(fs::read_to_string(out.join(LOSSES_CSV)).unwrap(), losses);
    assert_eq!(fs::read_to_string(out.join(TRAIN_LOG_CSV)).unwrap(), log);
    assert_eq!(fs::read(out.join(FINAL_CHECKPOINT)).unwrap(), fin);
}

#[test]
fn without_adversarial_terms_discriminator_loss_is_zero() {
    let cfg = TrainConfig {
        drop: vec![Component::GAdv, Component::LAdv],
        ..tiny(3)
    };
    let hist = run_steps(&mut Trainer::new(cfg).unwrap(), |_, _| Ok(())).unwrap();
    for s in &hist {
        assert_eq!(s.record.total_d, 0.0, "step {}", s.step);
    }
}

#[test]
fn empty_ablation_reproduces_plain_training() {
    let cfg = tiny(3);
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let plain = run_steps(&mut t, |_, _| Ok(())).unwrap();
    let a = ablate(&cfg, &[]).unwrap();
    assert_eq!(a.history, plain);
    assert_eq!(a.result.evaluation.report.method, "full");
    let b = ablate(&cfg, &[Component::Cmad, Component::Isd]).unwrap();
    assert_eq!(b.result.evaluation.report.method, "w/o cmad+isd");
    assert_ne!(b.history, plain);
}

fn trained_inpainter() -> Inpainter {
    let mut t = Trainer::new(tiny(2)).unwrap();
    run_steps(&mut t, |_, _| Ok(())).unwrap();
    Inpainter::from_checkpoint(&t.checkpoint()).unwrap()
}

#[test]
fn inpainting_keeps_known_pixels() {
    let inp = trained_inpainter();
    let s = inp.cfg.image_size;
    let image = Tensor::from_fn(&[3, s, s], |i| ((i * 37) % 101) as f32 / 100.0);

    let same = inp
        .inpaint(&image, &Mask::empty(s, s), "a red circle")
        .unwrap();
    assert_eq!(same, image);

    let mask = center_mask(s, s, 0.25).unwrap();
    let out = inp.inpaint(&image, &mask, "a red circle").unwrap();
    assert_eq!(out, inp.inpaint(&image, &mask, "a red circle").unwrap());
    let hw = s * s;
    let mut changed = 0;
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let i = c * hw + y * s + x;
                if mask.is_missing(y, x) {
                    changed += (out.data()[i] != image.data()[i]) as usize;
                } else {
                    assert_eq!(out.data()[i].to_bits(), image.data()[i].to_bits());
                }
            }
        }
    }
    assert!(changed > 0);
    // only the masked pixels matter to the generator input
    let corrupted = apply_mask(&image, &mask).unwrap();
    let from_corrupted = inp.inpaint(&corrupted, &mask, "a red circle").unwrap();
    for y in 0..s {
        for x in 0..s {
            if mask.is_missing(y, x) {
                assert_eq!(from_corrupted.data()[y * s + x], out.data()[y * s + x]);
            }
        }
    }
}

#[test]
fn inpainting_rejects_mismatched_sizes() {
    let inp = trained_inpainter();
    let s = inp.cfg.image_size;
    let big = Tensor::zeros(&[3, s * 2, s * 2]);
    assert!(matches!(
        inp.inpaint(&big, &Mask::empty(s * 2, s * 2), "x"),
        Err(Error::Shape(_))
    ));
    let ok = Tensor::zeros(&[3, s, s]);
    assert!(matches!(
        inp.inpaint(&ok, &Mask::empty(s + 1, s), "x"),
        Err(Error::Shape(_))
    ));
}
