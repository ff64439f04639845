//! Parameterised layers shared by the encoder, generator and discriminators.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Bound, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

pub(crate) fn normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

/// `y = x·W + b` over the rows of a rank-2 input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        inputs: usize,
        outputs: usize,
        std: f64,
    ) -> Self {
        Linear {
            weight: store.add(
                format!("{name}.weight"),
                normal(rng, &[inputs, outputs], std),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        tape.add(y, p[self.bias])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[width])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], T::lit(Self::EPS))
    }
}

/// Square-kernel convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let weight = store.add(
            format!("{name}.weight"),
            normal(rng, &[c_out, c_in, k, k], (2.0 / fan_in).sqrt()),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Conv {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.forward_with(tape, p, x, p[self.weight])
    }

    /// Same geometry, caller-supplied (for example normalised) weight.
    pub fn forward_with<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        weight: Var,
    ) -> Result<Var> {
        tape.conv2d(x, weight, self.bias.map(|b| p[b]), self.stride, self.pad)
    }
}

/// Stride-1 blocks use 3×3 convolutions; stride-2 blocks downsample with a
/// 4×4/pad-1 convolution and a 2×2/stride-2 shortcut so extents stay exact.
fn conv_pair<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
    stride: usize,
) -> (Conv, Conv, Option<Conv>) {
    let conv1 = if stride == 2 {
        Conv::new(
            store,
            rng,
            &format!("{name}.conv1"),
            c_in,
            c_out,
            4,
            2,
            1,
            true,
        )
    } else {
        Conv::new(
            store,
            rng,
            &format!("{name}.conv1"),
            c_in,
            c_out,
            3,
            1,
            1,
            true,
        )
    };
    let conv2 = Conv::new(
        store,
        rng,
        &format!("{name}.conv2"),
        c_out,
        c_out,
        3,
        1,
        1,
        true,
    );
    let shortcut = match (stride, c_in == c_out) {
        (1, true) => None,
        (1, false) => Some(Conv::new(
            store,
            rng,
            &format!("{name}.skip"),
            c_in,
            c_out,
            1,
            1,
            0,
            false,
        )),
        _ => Some(Conv::new(
            store,
            rng,
            &format!("{name}.skip"),
            c_in,
            c_out,
            2,
            2,
            0,
            false,
        )),
    };
    (conv1, conv2, shortcut)
}

/// Initial value of the learned residual gain.
pub const RES_GAIN_INIT: f64 = 0.5;

/// `relu(shortcut(x) + g ⊙ conv2(relu(conv1(x))))` with a learned
/// per-channel residual gain `g`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub shortcut: Option<Conv>,
    pub gain: ParamId,
    pub c_out: usize,
}

impl ResBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        let (conv1, conv2, shortcut) = conv_pair(store, rng, name, c_in, c_out, stride);
        let gain = store.add(
            format!("{name}.gain"),
            Tensor::full(&[c_out, 1, 1], T::lit(RES_GAIN_INIT)),
        );
        ResBlock {
            conv1,
            conv2,
            shortcut,
            gain,
            c_out,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, p, h)?;
        let h = tape.mul(h, p[self.gain])?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(tape, p, x)?,
            None => x,
        };
        let y = tape.add(skip, h)?;
        tape.relu(y)
    }
}

/// Residual block whose weights are supplied already normalised.
#[derive(Clone, Debug)]
pub struct PlainResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub shortcut: Option<Conv>,
}

impl PlainResBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        // downsampling happens in the second conv for discriminator blocks
        let conv1 = Conv::new(
            store,
            rng,
            &format!("{name}.conv1"),
            c_in,
            c_out,
            3,
            1,
            1,
            true,
        );
        let conv2 = if stride == 2 {
            Conv::new(
                store,
                rng,
                &format!("{name}.conv2"),
                c_out,
                c_out,
                4,
                2,
                1,
                true,
            )
        } else {
            Conv::new(
                store,
                rng,
                &format!("{name}.conv2"),
                c_out,
                c_out,
                3,
                1,
                1,
                true,
            )
        };
        let shortcut = match (stride, c_in == c_out) {
            (1, true) => None,
            (1, false) => Some(Conv::new(
                store,
                rng,
                &format!("{name}.skip"),
                c_in,
                c_out,
                1,
                1,
                0,
                false,
            )),
            _ => Some(Conv::new(
                store,
                rng,
                &format!("{name}.skip"),
                c_in,
                c_out,
                2,
                2,
                0,
                false,
            )),
        };
        PlainResBlock {
            conv1,
            conv2,
            shortcut,
        }
    }

    /// Convolutions in weight order: conv1, conv2, shortcut.
    pub fn convs(&self) -> impl Iterator<Item = &Conv> {
        [&self.conv1, &self.conv2]
            .into_iter()
            .chain(self.shortcut.as_ref())
    }

    /// `weights` holds one normalised weight per entry of [`Self::convs`].
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        weights: &[Var],
    ) -> Result<Var> {
        let h = tape.relu(x)?;
        let h = self.conv1.forward_with(tape, p, h, weights[0])?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward_with(tape, p, h, weights[1])?;
        let skip = match &self.shortcut {
            Some(c) => c.forward_with(tape, p, x, weights[2])?,
            None => x,
        };
        tape.add(skip, h)
    }
}
