//! Finite-difference checks for every differentiable tape operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, Tape, Tensor, Var};
use crate::error::Result;

/// Central-difference step for the `f64` checks.
pub const OP_CHECK_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    /// Worst relative error over all sampled points.
    pub max_rel_error: f64,
    pub points: usize,
}

type Case = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values with magnitude in `[lo, hi)` and random sign, keeping clear of
/// kinks at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(lo..hi);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// `sum(y ⊙ w)` for a fixed random `w`, so every output element matters
/// with a distinct weight.
fn project(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(w.clone())?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// One sampled point: the input and the scalar function of it.
fn case(name: &str, rng: &mut ChaCha8Rng) -> (Tensor<f64>, Case) {
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| uniform(rng, s, -1.0, 1.0);
    macro_rules! unary {
        ($shape:expr, $x:expr, $op:expr) => {{
            let x = $x;
            let w = r(rng, $shape);
            let f: Case = Box::new(move |t, x| {
                let y = $op(t, x)?;
                project(t, y, &w)
            });
            (x, f)
        }};
    }
    match name {
        "add" | "sub" | "mul" => {
            let other = r(rng, &[2, 3]);
            let w = r(rng, &[2, 3]);
            let name = name.to_string();
            let f: Case = Box::new(move |t, x| {
                let o = t.constant(other.clone())?;
                let y = match name.as_str() {
                    "add" => t.add(x, o)?,
                    "sub" => t.sub(o, x)?,
                    _ => t.mul(x, o)?,
                };
                project(t, y, &w)
            });
            (r(rng, &[2, 3]), f)
        }
        "add.broadcast" => {
            let other = r(rng, &[4, 3]);
            let w = r(rng, &[4, 3]);
            let f: Case = Box::new(move |t, x| {
                let o = t.constant(other.clone())?;
                let y = t.add(o, x)?;
                project(t, y, &w)
            });
            (r(rng, &[3]), f)
        }
        "div.numerator" => {
            let den = away_from_zero(rng, &[2, 3], 0.5, 2.0);
            let w = r(rng, &[2, 3]);
            let f: Case = Box::new(move |t, x| {
                let d = t.constant(den.clone())?;
                let y = t.div(x, d)?;
                project(t, y, &w)
            });
            (r(rng, &[2, 3]), f)
        }
        "div.denominator" => {
            let num = r(rng, &[2, 3]);
            let w = r(rng, &[2, 3]);
            let f: Case = Box::new(move |t, x| {
                let n = t.constant(num.clone())?;
                let y = t.div(n, x)?;
                project(t, y, &w)
            });
            (away_from_zero(rng, &[2, 3], 0.5, 2.0), f)
        }
        "neg" => unary!(&[5], r(rng, &[5]), |t: &mut Tape<f64>, x| t.neg(x)),
        "scale" => unary!(&[5], r(rng, &[5]), |t: &mut Tape<f64>, x| t.scale(x, 1.7)),
        "add_scalar" => unary!(&[5], r(rng, &[5]), |t: &mut Tape<f64>, x| t
            .add_scalar(x, -0.3)),
        "relu" => unary!(
            &[6],
            away_from_zero(rng, &[6], 0.05, 1.0),
            |t: &mut Tape<f64>, x| t.relu(x)
        ),
        "gelu" => unary!(
            &[6],
            uniform(rng, &[6], -3.0, 3.0),
            |t: &mut Tape<f64>, x| t.gelu(x)
        ),
        "sigmoid" => unary!(
            &[6],
            uniform(rng, &[6], -4.0, 4.0),
            |t: &mut Tape<f64>, x| t.sigmoid(x)
        ),
        "log" => unary!(
            &[6],
            uniform(rng, &[6], 0.2, 3.0),
            |t: &mut Tape<f64>, x| t.log(x, 1e-8)
        ),
        "clamp_min" => unary!(
            &[6],
            away_from_zero(rng, &[6], 0.05, 1.0),
            |t: &mut Tape<f64>, x| t.clamp_min(x, 0.0)
        ),
        "matmul.lhs" | "matmul.rhs" => {
            let lhs = name == "matmul.lhs";
            let other = if lhs {
                r(rng, &[3, 2])
            } else {
                r(rng, &[4, 3])
            };
            let w = r(rng, &[4, 2]);
            let f: Case = Box::new(move |t, x| {
                let o = t.constant(other.clone())?;
                let y = if lhs {
                    t.matmul(x, o)?
                } else {
                    t.matmul(o, x)?
                };
                project(t, y, &w)
            });
            (
                if lhs {
                    r(rng, &[4, 3])
                } else {
                    r(rng, &[3, 2])
                },
                f,
            )
        }
        "transpose" => unary!(&[3, 2], r(rng, &[2, 3]), |t: &mut Tape<f64>, x| t
            .transpose(x)),
        "reshape" => unary!(&[3, 4], r(rng, &[2, 6]), |t: &mut Tape<f64>, x| t
            .reshape(x, &[3, 4])),
        "conv2d.input" | "conv2d.weight" | "conv2d.bias" => {
            let input = r(rng, &[2, 5, 5]);
            let weight = r(rng, &[3, 2, 3, 3]);
            let bias = r(rng, &[3]);
            let w = r(rng, &[3, 3, 3]);
            let which = name.to_string();
            let f: Case = Box::new(move |t, x| {
                let (i, k, b) = match which.as_str() {
                    "conv2d.input" => (x, t.constant(weight.clone())?, t.constant(bias.clone())?),
                    "conv2d.weight" => (t.constant(input.clone())?, x, t.constant(bias.clone())?),
                    _ => (t.constant(input.clone())?, t.constant(weight.clone())?, x),
                };
                let y = t.conv2d(i, k, Some(b), 2, 1)?;
                project(t, y, &w)
            });
            let x = match name {
                "conv2d.input" => r(rng, &[2, 5, 5]),
                "conv2d.weight" => r(rng, &[3, 2, 3, 3]),
                _ => r(rng, &[3]),
            };
            (x, f)
        }
        "upsample2x" => unary!(&[2, 4, 6], r(rng, &[2, 2, 3]), |t: &mut Tape<f64>, x| t
            .upsample2x(x)),
        "softmax" => unary!(
            &[3, 4],
            uniform(rng, &[3, 4], -2.0, 2.0),
            |t: &mut Tape<f64>, x| t.softmax(x, 0)
        ),
        "layer_norm.input" | "layer_norm.gamma" | "layer_norm.beta" => {
            let input = r(rng, &[3, 4]);
            let gamma = uniform(rng, &[4], 0.5, 1.5);
            let beta = r(rng, &[4]);
            let w = r(rng, &[3, 4]);
            let which = name.to_string();
            let f: Case = Box::new(move |t, x| {
                let (i, g, b) = match which.as_str() {
                    "layer_norm.input" => {
                        (x, t.constant(gamma.clone())?, t.constant(beta.clone())?)
                    }
                    "layer_norm.gamma" => {
                        (t.constant(input.clone())?, x, t.constant(beta.clone())?)
                    }
                    _ => (t.constant(input.clone())?, t.constant(gamma.clone())?, x),
                };
                let y = t.layer_norm(i, g, b, 1e-5)?;
                project(t, y, &w)
            });
            let x = match name {
                "layer_norm.input" => r(rng, &[3, 4]),
                "layer_norm.gamma" => uniform(rng, &[4], 0.5, 1.5),
                _ => r(rng, &[4]),
            };
            (x, f)
        }
        "sum" => {
            let w = r(rng, &[2, 3]);
            let f: Case = Box::new(move |t, x| {
                let c = t.constant(w.clone())?;
                let y = t.mul(x, c)?;
                let y = t.mul(y, y)?;
                t.sum(y)
            });
            (r(rng, &[2, 3]), f)
        }
        "mean" => {
            let w = r(rng, &[2, 3]);
            let f: Case = Box::new(move |t, x| {
                let c = t.constant(w.clone())?;
                let y = t.mul(x, c)?;
                let y = t.mul(y, y)?;
                t.mean(y)
            });
            (r(rng, &[2, 3]), f)
        }
        "sum_axis" => unary!(&[2], r(rng, &[2, 3]), |t: &mut Tape<f64>, x| t
            .sum_axis(x, 1)),
        "mean_axis" => unary!(&[3], r(rng, &[2, 3]), |t: &mut Tape<f64>, x| t
            .mean_axis(x, 0)),
        "l1_distance" => {
            let x = r(rng, &[2, 4]);
            let offset = away_from_zero(rng, &[2, 4], 0.05, 1.0);
            let target = Tensor::from_fn(&[2, 4], |i| x.data()[i] + offset.data()[i]);
            let f: Case = Box::new(move |t, x| {
                let y = t.constant(target.clone())?;
                t.l1_distance(x, y)
            });
            (x, f)
        }
        "concat" => {
            let other = r(rng, &[2, 2]);
            let w = r(rng, &[2, 5]);
            let f: Case = Box::new(move |t, x| {
                let o = t.constant(other.clone())?;
                let y = t.concat(&[o, x], 1)?;
                project(t, y, &w)
            });
            (r(rng, &[2, 3]), f)
        }
        "slice" => unary!(&[2, 2], r(rng, &[4, 2]), |t: &mut Tape<f64>, x| t
            .slice(x, 0, 1, 3)),
        "embedding" => unary!(&[4, 3], r(rng, &[5, 3]), |t: &mut Tape<f64>, x| t
            .embedding(x, &[4, 0, 4, 2])),
        "gather" => unary!(&[5], r(rng, &[2, 3]), |t: &mut Tape<f64>, x| t.gather(
            x,
            &[5, 0, 0, 3, 2],
            &[5]
        )),
        "cosine_similarity.lhs" | "cosine_similarity.rhs" => {
            let lhs = name.ends_with("lhs");
            let other = r(rng, &[4, 3]);
            let w = r(rng, if lhs { &[2, 4] } else { &[4, 2] });
            let f: Case = Box::new(move |t, x| {
                let o = t.constant(other.clone())?;
                let y = if lhs {
                    t.cosine_similarity(x, o, 1e-8)?
                } else {
                    t.cosine_similarity(o, x, 1e-8)?
                };
                project(t, y, &w)
            });
            (r(rng, &[2, 3]), f)
        }
        other => unreachable!("no check case for {other}"),
    }
}

/// Every checked operation; binary ops and ops with parameters are checked
/// with respect to each input.
pub const CHECKED_OPS: [&str; 37] = [
    "add",
    "add.broadcast",
    "sub",
    "mul",
    "div.numerator",
    "div.denominator",
    "neg",
    "scale",
    "add_scalar",
    "relu",
    "gelu",
    "sigmoid",
    "log",
    "clamp_min",
    "matmul.lhs",
    "matmul.rhs",
    "transpose",
    "reshape",
    "conv2d.input",
    "conv2d.weight",
    "conv2d.bias",
    "upsample2x",
    "softmax",
    "layer_norm.input",
    "layer_norm.gamma",
    "layer_norm.beta",
    "sum",
    "mean",
    "sum_axis",
    "mean_axis",
    "l1_distance",
    "concat",
    "slice",
    "embedding",
    "gather",
    "cosine_similarity.lhs",
    "cosine_similarity.rhs",
];

/// Runs [`grad_check`] on `points` random inputs per operation.
pub fn check_ops(points: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for op in CHECKED_OPS {
        let mut worst = 0.0f64;
        for _ in 0..points {
            let (x, f) = case(op, &mut rng);
            let report = grad_check(f, &x, OP_CHECK_STEP)?;
            worst = worst.max(report.max_rel_error);
        }
        out.push(OpCheck {
            op,
            max_rel_error: worst,
            points,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_at_ten_points() {
        let checks = check_ops(10, 11).unwrap();
        assert_eq!(checks.len(), CHECKED_OPS.len());
        for c in &checks {
            assert!(
                c.max_rel_error <= 1e-4,
                "{} failed: {}",
                c.op,
                c.max_rel_error
            );
        }
    }
}
