//! Residual down/up-sampling generator fed by the encoder's visual priors.

use rand::Rng;

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::nn::{Conv, ResBlock};
use crate::tensor::{Bound, ParamStore, Scalar, Tape, Tensor, Var};

const DOWN_STRIDES: [usize; 5] = [1, 2, 1, 2, 1];
const HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub down: [usize; 5],
    pub up: [usize; 5],
    /// Channels of the 1×1 projection of the prior grid on the skip path.
    pub skip_channels: usize,
    /// Prior width `e`.
    pub prior_channels: usize,
    /// Side `√N` of the prior grid.
    pub prior_grid: usize,
    pub image_size: usize,
    pub out_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            down: [64, 96, 128, 128, 128],
            up: [128, 128, 96, 64, 32],
            skip_channels: 64,
            prior_channels: 128,
            prior_grid: 8,
            image_size: 64,
            out_channels: 3,
        }
    }
}

impl GeneratorConfig {
    pub fn tiny() -> Self {
        GeneratorConfig {
            down: [4, 4, 6, 6, 6],
            up: [6, 6, 4, 4, 4],
            skip_channels: 3,
            prior_channels: 8,
            prior_grid: 4,
            image_size: 32,
            out_channels: 3,
        }
    }

    /// Resolution of every upsampling stage and the stage that receives the
    /// skip connection.
    pub fn stage_plan(&self) -> Result<(Vec<usize>, usize)> {
        if !self.prior_grid.is_multiple_of(4) || self.prior_grid == 0 {
            return Err(Error::config(format!(
                "prior grid {} is not divisible by 4",
                self.prior_grid
            )));
        }
        let mut res = self.prior_grid / 4;
        let mut plan = Vec::with_capacity(5);
        let mut skip = None;
        for stage in 0..5 {
            if res < self.image_size {
                res *= 2;
            }
            if res == self.prior_grid && skip.is_none() {
                skip = Some(stage);
            }
            plan.push(res);
        }
        if res != self.image_size {
            return Err(Error::config(format!(
                "five ×2 upsampling stages from {} cannot reach {}",
                self.prior_grid / 4,
                self.image_size
            )));
        }
        let skip = skip.ok_or_else(|| {
            Error::config(format!(
                "no upsampling stage runs at the prior grid resolution {}",
                self.prior_grid
            ))
        })?;
        Ok((plan, skip))
    }

    pub fn validate(&self) -> Result<()> {
        if self.down.iter().chain(&self.up).any(|&c| c == 0)
            || self.skip_channels == 0
            || self.prior_channels == 0
            || self.out_channels == 0
        {
            return Err(Error::config("generator channel widths must be positive"));
        }
        self.stage_plan().map(|_| ())
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    down: Vec<ResBlock>,
    up: Vec<ResBlock>,
    skip_proj: Conv,
    head: Conv,
    skip_stage: usize,
}

impl Generator {
    pub fn new<T: Scalar>(
        cfg: GeneratorConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (_, skip_stage) = cfg.stage_plan()?;
        let mut c = cfg.prior_channels;
        let mut down = Vec::with_capacity(5);
        for (i, (&w, &s)) in cfg.down.iter().zip(&DOWN_STRIDES).enumerate() {
            down.push(ResBlock::new(store, rng, &format!("gen.down{i}"), c, w, s));
            c = w;
        }
        let skip_proj = Conv::new(
            store,
            rng,
            "gen.skip",
            cfg.prior_channels,
            cfg.skip_channels,
            1,
            1,
            0,
            true,
        );
        let mut up = Vec::with_capacity(5);
        for (i, &w) in cfg.up.iter().enumerate() {
            let c_in = if i == skip_stage {
                c + cfg.skip_channels
            } else {
                c
            };
            up.push(ResBlock::new(store, rng, &format!("gen.up{i}"), c_in, w, 1));
            c = w;
        }
        let head = Conv::new(store, rng, "gen.head", c, cfg.out_channels, 1, 1, 0, true);
        // start near mid-gray rather than saturated
        let w = store.get_mut(head.weight);
        *w = w.map(|a| a * T::lit(HEAD_INIT_SCALE));
        Ok(Generator {
            cfg,
            down,
            up,
            skip_proj,
            head,
            skip_stage,
        })
    }

    pub fn skip_stage(&self) -> usize {
        self.skip_stage
    }

    /// Lays `V̂` (N×e) onto the patch grid as `e×√N×√N`; row `i` lands at
    /// cell `(i / √N, i % √N)`.
    pub fn reshape_priors<T: Scalar>(tape: &mut Tape<T>, priors: Var) -> Result<Var> {
        let shape = tape.shape(priors).to_vec();
        let [n, e] = shape[..] else {
            return Err(Error::shape(format!("priors must be N×e, got {shape:?}")));
        };
        let s = (n as f64).sqrt().round() as usize;
        if s * s != n {
            return Err(Error::shape(format!(
                "patch count {n} is not a perfect square"
            )));
        }
        let t = tape.transpose(priors)?;
        tape.reshape(t, &[e, s, s])
    }

    /// Inverse of [`Self::reshape_priors`].
    pub fn flatten_priors<T: Scalar>(tape: &mut Tape<T>, grid: Var) -> Result<Var> {
        let shape = tape.shape(grid).to_vec();
        let [e, s, s2] = shape[..] else {
            return Err(Error::shape(format!(
                "prior grid must be e×s×s, got {shape:?}"
            )));
        };
        if s != s2 {
            return Err(Error::shape(format!("prior grid {shape:?} is not square")));
        }
        let m = tape.reshape(grid, &[e, s * s])?;
        tape.transpose(m)
    }

    fn check_prior<T: Scalar>(&self, tape: &Tape<T>, prior: Var) -> Result<()> {
        let c = &self.cfg;
        let expect = [c.prior_channels, c.prior_grid, c.prior_grid];
        if tape.shape(prior) != expect {
            return Err(Error::shape(format!(
                "prior grid {:?} does not match generator input {expect:?}",
                tape.shape(prior)
            )));
        }
        Ok(())
    }

    /// Five residual blocks; stages 2 and 4 halve the resolution.
    pub fn downsample<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, prior: Var) -> Result<Var> {
        self.check_prior(tape, prior)?;
        let mut x = prior;
        for b in &self.down {
            x = b.forward(tape, p, x)?;
        }
        Ok(x)
    }

    /// Five residual blocks, each preceded by nearest ×2 upsampling until the
    /// output size is reached; the projected prior grid joins by channel
    /// concatenation at the matching resolution. Ends in 1×1 conv + sigmoid.
    pub fn upsample<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        v: Var,
        prior: Var,
    ) -> Result<Var> {
        self.check_prior(tape, prior)?;
        let mut x = v;
        for (i, b) in self.up.iter().enumerate() {
            if tape.shape(x)[1] < self.cfg.image_size {
                x = tape.upsample2x(x)?;
            }
            if i == self.skip_stage {
                let s = self.skip_proj.forward(tape, p, prior)?;
                x = tape.concat(&[x, s], 0)?;
            }
            x = b.forward(tape, p, x)?;
        }
        let y = self.head.forward(tape, p, x)?;
        tape.sigmoid(y)
    }

    /// `V̂` (N×e) → restored image `I_r`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, priors: Var) -> Result<Var> {
        let grid = Self::reshape_priors(tape, priors)?;
        let v = self.downsample(tape, p, grid)?;
        self.upsample(tape, p, v, grid)
    }
}

/// `Î = mask ⊙ I_r + (1 − mask) ⊙ I_corrupted`.
pub fn compose_output<T: Scalar>(
    restored: &Tensor<T>,
    corrupted: &Tensor<T>,
    mask: &Mask,
) -> Result<Tensor<T>> {
    let [c, h, w] = restored.dims3()?;
    if corrupted.shape() != restored.shape() || (mask.height(), mask.width()) != (h, w) {
        return Err(Error::shape(format!(
            "compose_output: restored {:?}, corrupted {:?}, mask {}×{}",
            restored.shape(),
            corrupted.shape(),
            mask.height(),
            mask.width()
        )));
    }
    let plane = h * w;
    let grid = mask.grid();
    let data = (0..c * plane)
        .map(|i| {
            if grid[i % plane] == 1 {
                restored.data()[i]
            } else {
                corrupted.data()[i]
            }
        })
        .collect();
    Tensor::new(restored.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::center_mask;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build<T: Scalar>(cfg: GeneratorConfig) -> (Generator, ParamStore<T>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Generator::new(cfg, &mut store, &mut rng).unwrap();
        (g, store)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn prior_reshape_layout() {
        let mut tape = Tape::<f64>::new();
        let v = tape
            .constant(Tensor::from_fn(&[64, 128], |i| i as f64))
            .unwrap();
        let g = Generator::reshape_priors(&mut tape, v).unwrap();
        assert_eq!(tape.shape(g), &[128, 8, 8]);
        // row 9 → cell (1, 1)
        for k in 0..128 {
            assert_eq!(tape.value(g).at(&[k, 1, 1]), (9 * 128 + k) as f64);
        }
        let back = Generator::flatten_priors(&mut tape, g).unwrap();
        assert_eq!(tape.value(back), tape.value(v));
        let bad = tape.constant(Tensor::zeros(&[10, 4])).unwrap();
        assert!(Generator::reshape_priors(&mut tape, bad).is_err());
    }

    #[test]
    fn stage_plans() {
        let (plan, skip) = GeneratorConfig::default().stage_plan().unwrap();
        assert_eq!(plan, vec![4, 8, 16, 32, 64]);
        assert_eq!(skip, 1);
        let (plan, skip) = GeneratorConfig::tiny().stage_plan().unwrap();
        assert_eq!(plan, vec![2, 4, 8, 16, 32]);
        assert_eq!(skip, 1);
        let cfg = GeneratorConfig {
            prior_grid: 4,
            image_size: 16,
            ..GeneratorConfig::tiny()
        };
        assert_eq!(cfg.stage_plan().unwrap(), (vec![2, 4, 8, 16, 16], 1));
        let too_big = GeneratorConfig {
            image_size: 256,
            ..GeneratorConfig::default()
        };
        assert!(too_big.validate().is_err());
        let odd = GeneratorConfig {
            prior_grid: 6,
            ..GeneratorConfig::default()
        };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn downsample_shape_and_zero_input() {
        let (g, store) = build::<f32>(GeneratorConfig::default());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false).unwrap();
        let x = tape
            .constant(Tensor::from_fn(&[128, 8, 8], |i| (i % 11) as f32 / 11.0))
            .unwrap();
        let v = g.downsample(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(v), &[128, 2, 2]);
        let z = tape.constant(Tensor::zeros(&[128, 8, 8])).unwrap();
        let v = g.downsample(&mut tape, &p, z).unwrap();
        assert!(tape.value(v).data().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn output_in_unit_interval_and_skip_matters() {
        let cfg = GeneratorConfig::tiny();
        let (g, store) = build::<f32>(cfg.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false).unwrap();
            let priors = tape
                .constant(Tensor::from_fn(&[16, 8], |_| rng.gen_range(-3.0f32..3.0)))
                .unwrap();
            let out = g.forward(&mut tape, &p, priors).unwrap();
            assert_eq!(tape.shape(out), &[3, 32, 32]);
            assert!(tape.value(out).data().iter().all(|&a| a > 0.0 && a < 1.0));
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false).unwrap();
        let prior = tape.constant(random(&[8, 4, 4], 1).cast::<f32>()).unwrap();
        let zero = tape.constant(Tensor::zeros(&[8, 4, 4])).unwrap();
        let v = g.downsample(&mut tape, &p, prior).unwrap();
        let with = g.upsample(&mut tape, &p, v, prior).unwrap();
        let without = g.upsample(&mut tape, &p, v, zero).unwrap();
        assert_ne!(tape.value(with), tape.value(without));
    }

    #[test]
    fn gradient_reaches_v_and_skip() {
        let cfg = GeneratorConfig::tiny();
        let (g, store) = build::<f64>(cfg);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false).unwrap();
        let v = tape
            .leaf(random(&[6, 1, 1], 3).map(|a| a.abs()), true)
            .unwrap();
        let prior = tape.leaf(random(&[8, 4, 4], 4), true).unwrap();
        let out = g.upsample(&mut tape, &p, v, prior).unwrap();
        let loss = tape.sum(out).unwrap();
        tape.backward(loss).unwrap();
        for var in [v, prior] {
            let gsum: f64 = tape.grad_data(var).unwrap().iter().map(|a| a.abs()).sum();
            assert!(gsum > 0.0);
        }
    }

    #[test]
    fn downsample_grad_check() {
        let cfg = GeneratorConfig::tiny();
        let (g, store) = build::<f64>(cfg);
        let x = random(&[8, 4, 4], 5);
        let w = random(&[6, 1, 1], 6);
        let report = grad_check(
            |tape, x| {
                let p = store.bind(tape, false)?;
                let v = g.downsample(tape, &p, x)?;
                let wv = tape.constant(w.clone())?;
                let t = tape.mul(v, wv)?;
                tape.sum(t)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn generator_grad_check() {
        let cfg = GeneratorConfig::tiny();
        let (g, store) = build::<f64>(cfg);
        let x = random(&[16, 8], 7);
        let target = random(&[3, 32, 32], 8).map(|a| 0.5 + 0.4 * a);
        let report = grad_check(
            |tape, x| {
                let p = store.bind(tape, false)?;
                let out = g.forward(tape, &p, x)?;
                let t = tape.constant(target.clone())?;
                let d = tape.sub(out, t)?;
                let sq = tape.mul(d, d)?;
                tape.mean(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn compose_cases() {
        let r = random(&[3, 32, 32], 1);
        let c = random(&[3, 32, 32], 2);
        assert_eq!(compose_output(&r, &c, &Mask::empty(32, 32)).unwrap(), c);
        assert_eq!(compose_output(&r, &c, &Mask::full(32, 32)).unwrap(), r);
        let m = center_mask(32, 32, 0.5).unwrap();
        let out = compose_output(&r, &c, &m).unwrap();
        for i in 0..3 * 1024 {
            let expect = if m.grid()[i % 1024] == 1 {
                r.data()[i]
            } else {
                c.data()[i]
            };
            assert_eq!(out.data()[i], expect);
        }
        assert!(compose_output(&r, &c, &Mask::empty(16, 32)).is_err());
    }
}
