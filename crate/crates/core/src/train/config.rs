use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::discriminator::{DiscriminatorConfig, LOCAL_SIZE};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::objectives::{Component, LossWeights, SinkhornConfig, TermWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Center,
    Object,
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(MaskMode::Center),
            "object" => Ok(MaskMode::Object),
            _ => Err(Error::config(format!(
                "mask must be center or object, got {s:?}"
            ))),
        }
    }
}

impl MaskMode {
    pub fn name(self) -> &'static str {
        match self {
            MaskMode::Center => "center",
            MaskMode::Object => "object",
        }
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    /// Step budget; overridden by `max_epochs` when that is nonzero.
    pub steps: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub samples: usize,
    pub eval_samples: usize,
    pub mask: MaskMode,
    pub mask_area: f64,
    pub weights: LossWeights,
    pub drop: Vec<Component>,
    pub image_size: usize,
    pub patch: usize,
    pub text_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub gen_down: [usize; 5],
    pub gen_up: [usize; 5],
    pub gen_skip: usize,
    pub disc_widths: [usize; 5],
    pub local_disc_widths: [usize; 5],
    pub sinkhorn: SinkhornConfig,
    /// 0 disables periodic checkpoints (the final one is always written).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

const VOCAB_SIZE: usize = 64;

impl TrainConfig {
    /// 64×64 images, 500 samples, batch 8, 2000 steps.
    pub fn desk() -> Self {
        let enc = EncoderConfig::default();
        let gen = GeneratorConfig::default();
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            warmup_steps: 200,
            batch_size: 8,
            steps: 2000,
            max_epochs: 0,
            seed: 17,
            samples: 500,
            eval_samples: 32,
            mask: MaskMode::Center,
            mask_area: 0.5,
            weights: LossWeights::default(),
            drop: Vec::new(),
            image_size: enc.image_size,
            patch: enc.patch,
            text_len: enc.text_len,
            hidden: enc.hidden,
            layers: enc.layers,
            heads: enc.heads,
            ffn: enc.ffn,
            gen_down: gen.down,
            gen_up: gen.up,
            gen_skip: gen.skip_channels,
            disc_widths: DiscriminatorConfig::global(64).widths,
            local_disc_widths: DiscriminatorConfig::local().widths,
            sinkhorn: SinkhornConfig::default(),
            checkpoint_every: 500,
        }
    }

    /// Batch 128, 200 epochs, 2000 warmup steps.
    pub fn large() -> Self {
        TrainConfig {
            batch_size: 128,
            max_epochs: 200,
            warmup_steps: 2000,
            ..Self::desk()
        }
    }

    /// Seconds-scale runs for tests.
    pub fn tiny() -> Self {
        let enc = EncoderConfig::tiny();
        let gen = GeneratorConfig::tiny();
        TrainConfig {
            warmup_steps: 2,
            batch_size: 2,
            steps: 4,
            samples: 8,
            eval_samples: 4,
            image_size: enc.image_size,
            patch: enc.patch,
            text_len: enc.text_len,
            hidden: enc.hidden,
            layers: enc.layers,
            heads: enc.heads,
            ffn: enc.ffn,
            gen_down: gen.down,
            gen_up: gen.up,
            gen_skip: gen.skip_channels,
            disc_widths: DiscriminatorConfig::tiny(32).widths,
            local_disc_widths: DiscriminatorConfig::tiny(32).widths,
            checkpoint_every: 0,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "large" => Ok(Self::large()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::config(format!(
                "unknown preset {name:?} (desk, large, tiny)"
            ))),
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            ffn: self.ffn,
            patch: self.patch,
            text_len: self.text_len,
            image_size: self.image_size,
            channels: 3,
            vocab_size: VOCAB_SIZE,
        }
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            down: self.gen_down,
            up: self.gen_up,
            skip_channels: self.gen_skip,
            prior_channels: self.hidden,
            prior_grid: self.image_size / self.patch.max(1),
            image_size: self.image_size,
            out_channels: 3,
        }
    }

    pub fn global_disc(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            widths: self.disc_widths,
            resolution: self.image_size,
            channels: 3,
        }
    }

    pub fn local_disc(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            widths: self.local_disc_widths,
            resolution: LOCAL_SIZE,
            channels: 3,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            size: self.image_size,
            patch: self.patch,
            max_text_len: self.text_len,
            ..SynthConfig::default()
        }
    }

    /// Term multipliers after dropping the ablated components.
    pub fn terms(&self) -> TermWeights {
        self.weights.terms().without(&self.drop)
    }

    /// Total optimisation steps.
    pub fn total_steps(&self) -> usize {
        if self.max_epochs > 0 {
            (self.max_epochs * self.samples).div_ceil(self.batch_size)
        } else {
            self.steps
        }
    }

    /// `lr · min(1, step / warmup)` for 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let positive_f = [
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
            ("grad_clip", self.grad_clip),
            ("mask_area", self.mask_area),
        ];
        if let Some((k, v)) = positive_f
            .iter()
            .find(|(_, v)| !(*v > 0.0 && v.is_finite()))
        {
            return Err(Error::config(format!("{k} must be positive, got {v}")));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{k} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        if self.mask_area > 1.0 {
            return Err(Error::config("mask_area must not exceed 1"));
        }
        let positive = [
            ("warmup_steps", self.warmup_steps),
            ("batch_size", self.batch_size),
            ("samples", self.samples),
            ("total steps", self.total_steps()),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{k} must be positive")));
        }
        if self.eval_samples == 1 {
            return Err(Error::config("eval_samples must be 0 or at least 2"));
        }
        self.weights.validate()?;
        if !(self.sinkhorn.epsilon > 0.0)
            || self.sinkhorn.max_iters == 0
            || !(self.sinkhorn.tol > 0.0)
        {
            return Err(Error::config("sinkhorn settings must be positive"));
        }
        self.encoder().validate()?;
        self.generator().validate()?;
        self.global_disc().validate()?;
        self.local_disc().validate()?;
        self.synth().validate()
    }

    /// Parses `key = value` lines. `#` starts a comment; a leading
    /// `preset = NAME` selects the base values; unknown or repeated keys are
    /// errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::desk();
        let mut seen: Vec<String> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::config(format!("line {}: {msg}", n + 1));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
            if seen.iter().any(|k| k == key) {
                return Err(at(format!("key {key:?} repeated")));
            }
            if key == "preset" {
                if !seen.is_empty() {
                    return Err(at("preset must come before other keys".into()));
                }
                cfg = TrainConfig::preset(value).map_err(|e| at(e.to_string()))?;
            } else {
                cfg.set(key, value).map_err(|e| at(e.to_string()))?;
            }
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
        }
        fn widths(key: &str, v: &str) -> Result<[usize; 5]> {
            let parts: Vec<usize> = v
                .split(',')
                .map(|p| num(key, p.trim()))
                .collect::<Result<_>>()?;
            parts
                .try_into()
                .map_err(|_| Error::config(format!("{key}: expected 5 comma-separated widths")))
        }
        match key {
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "samples" => self.samples = num(key, value)?,
            "eval_samples" => self.eval_samples = num(key, value)?,
            "mask" => self.mask = value.parse()?,
            "mask_area" => self.mask_area = num(key, value)?,
            "lambda" => self.weights.lambda = num(key, value)?,
            "lambda_isd" => {
                self.weights.lambda_isd = if value == "none" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            "alpha" => self.weights.alpha = num(key, value)?,
            "beta" => self.weights.beta = num(key, value)?,
            "gamma" => self.weights.gamma = num(key, value)?,
            "drop" => self.drop = parse_drop(value)?,
            "image_size" => self.image_size = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "text_len" => self.text_len = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "ffn" => self.ffn = num(key, value)?,
            "gen_down" => self.gen_down = widths(key, value)?,
            "gen_up" => self.gen_up = widths(key, value)?,
            "gen_skip" => self.gen_skip = num(key, value)?,
            "disc_widths" => self.disc_widths = widths(key, value)?,
            "local_disc_widths" => self.local_disc_widths = widths(key, value)?,
            "sinkhorn_epsilon" => self.sinkhorn.epsilon = num(key, value)?,
            "sinkhorn_max_iters" => self.sinkhorn.max_iters = num(key, value)?,
            "sinkhorn_tol" => self.sinkhorn.tol = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Canonical text form; [`Self::parse`] reads it back exactly.
    pub fn to_text(&self) -> String {
        let list = |w: &[usize; 5]| w.map(|x| x.to_string()).join(",");
        let drop = if self.drop.is_empty() {
            "none".to_string()
        } else {
            self.drop
                .iter()
                .map(|c| c.name())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv("lr", format!("{:?}", self.lr));
        kv("beta1", format!("{:?}", self.beta1));
        kv("beta2", format!("{:?}", self.beta2));
        kv("adam_eps", format!("{:?}", self.adam_eps));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("grad_clip", format!("{:?}", self.grad_clip));
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("steps", self.steps.to_string());
        kv("max_epochs", self.max_epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("samples", self.samples.to_string());
        kv("eval_samples", self.eval_samples.to_string());
        kv("mask", self.mask.name().to_string());
        kv("mask_area", format!("{:?}", self.mask_area));
        kv("lambda", format!("{:?}", self.weights.lambda));
        kv(
            "lambda_isd",
            self.weights
                .lambda_isd
                .map_or("none".into(), |v| format!("{v:?}")),
        );
        kv("alpha", format!("{:?}", self.weights.alpha));
        kv("beta", format!("{:?}", self.weights.beta));
        kv("gamma", format!("{:?}", self.weights.gamma));
        kv("drop", drop);
        kv("image_size", self.image_size.to_string());
        kv("patch", self.patch.to_string());
        kv("text_len", self.text_len.to_string());
        kv("hidden", self.hidden.to_string());
        kv("layers", self.layers.to_string());
        kv("heads", self.heads.to_string());
        kv("ffn", self.ffn.to_string());
        kv("gen_down", list(&self.gen_down));
        kv("gen_up", list(&self.gen_up));
        kv("gen_skip", self.gen_skip.to_string());
        kv("disc_widths", list(&self.disc_widths));
        kv("local_disc_widths", list(&self.local_disc_widths));
        kv("sinkhorn_epsilon", format!("{:?}", self.sinkhorn.epsilon));
        kv("sinkhorn_max_iters", self.sinkhorn.max_iters.to_string());
        kv("sinkhorn_tol", format!("{:?}", self.sinkhorn.tol));
        kv("checkpoint_every", self.checkpoint_every.to_string());
        s
    }
}

/// Comma-separated component names; `none` or empty means no drop.
pub fn parse_drop(value: &str) -> Result<Vec<Component>> {
    let value = value.trim();
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    let mut out: Vec<Component> = value.split(',').map(str::parse).collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn presets_validate() {
        for name in ["desk", "large", "tiny"] {
            TrainConfig::preset(name).unwrap().validate().unwrap();
        }
        assert_eq!(
            TrainConfig::large().total_steps(),
            (200 * 500usize).div_ceil(128)
        );
        assert!(TrainConfig::preset("huge").is_err());
    }

    #[test]
    fn text_round_trip() {
        for mut cfg in [
            TrainConfig::desk(),
            TrainConfig::large(),
            TrainConfig::tiny(),
        ] {
            cfg.drop = vec![Component::Cmad, Component::Isd];
            cfg.weights.lambda_isd = Some(0.75);
            assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }

    #[test]
    fn parse_errors() {
        let err = TrainConfig::parse("lr = 1e-3\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("line 2") && err.to_string().contains("bogus"));
        assert!(TrainConfig::parse("lr = 1\nlr = 2").is_err());
        assert!(TrainConfig::parse("lr 1").is_err());
        assert!(TrainConfig::parse("seed = 1\npreset = tiny").is_err());
        assert!(TrainConfig::parse("warmup_steps = 0").is_err());
        assert!(TrainConfig::parse("mask = ring").is_err());
        assert!(TrainConfig::parse("drop = cmad,bogus").is_err());
        assert!(TrainConfig::parse("gen_up = 1,2,3").is_err());
        assert!(TrainConfig::parse("patch = 7").is_err());
    }

    #[test]
    fn parse_preset_then_overrides() {
        let cfg =
            TrainConfig::parse("# tiny run\npreset = tiny\nsteps = 9  # more\n\ndrop = isd,cmad\n")
                .unwrap();
        assert_eq!(cfg.steps, 9);
        assert_eq!(cfg.batch_size, 2);
        assert_eq!(cfg.drop, vec![Component::Cmad, Component::Isd]);
        assert_eq!(cfg.terms().cmad, 0.0);
        assert_eq!(cfg.terms().wpa, 1.0);
    }

    #[test]
    fn warmup_schedule() {
        let cfg = TrainConfig::desk();
        for s in 1..cfg.warmup_steps {
            assert!((cfg.lr_at(s) - 1e-4 * s as f64 / 200.0).abs() <= 1e-12);
        }
        assert_eq!(cfg.lr_at(200), 1e-4);
        assert_eq!(cfg.lr_at(5000), 1e-4);
    }

    proptest! {
        #[test]
        fn numeric_fields_round_trip(lr in 1e-8f64..1.0, wd in 0.0f64..1.0, seed in any::<u64>(), gamma in 0.0f64..5.0) {
            let mut cfg = TrainConfig::tiny();
            cfg.lr = lr;
            cfg.weight_decay = wd;
            cfg.seed = seed;
            cfg.weights.gamma = gamma;
            prop_assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }
}
