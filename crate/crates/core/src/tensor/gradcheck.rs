use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval<T: Scalar>(
    f: &impl Fn(&mut Tape<T>, Var) -> Result<Var>,
    x: &Tensor<T>,
    trainable: bool,
) -> Result<(Tape<T>, Var, Var)> {
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone(), trainable)?;
    let out = f(&mut tape, input)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape(format!(
            "grad_check function must return a scalar, got shape {:?}",
            tape.shape(out)
        )));
    }
    Ok((tape, input, out))
}

/// Max over elements of `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`
/// where `numeric` is the central difference with step `h`.
pub fn grad_check<T: Scalar>(
    f: impl Fn(&mut Tape<T>, Var) -> Result<Var>,
    x: &Tensor<T>,
    h: f64,
) -> Result<GradCheckReport> {
    if !x.is_finite() {
        return Err(Error::numeric("grad_check input is not finite"));
    }
    let (mut tape, input, out) = eval(&f, x, true)?;
    tape.backward(out)?;
    let analytic: Vec<f64> = match tape.grad_data(input) {
        Some(g) => g.iter().map(|v| v.to_f64().unwrap()).collect(),
        None => vec![0.0; x.len()],
    };
    drop(tape);

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::lit(h);
        let (t, _, o) = eval(&f, &probe, false)?;
        let plus = t.item(o).to_f64().unwrap();
        probe.data_mut()[i] = orig - T::lit(h);
        let (t, _, o) = eval(&f, &probe, false)?;
        let minus = t.item(o).to_f64().unwrap();
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }

    let (mut worst, mut worst_index) = (0.0f64, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
        if err > worst {
            worst = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        worst_index,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_has_exact_gradient() {
        let x = Tensor::<f64>::from_f64(&[3], &[1., 2., 3.]).unwrap();
        let r = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
        for (a, x) in r.analytic.iter().zip([1., 2., 3.]) {
            assert!((a - 2.0 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_mean_composition() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[0.3, -1.2, 0.8, 2.0, 0.1, -0.4]).unwrap();
        let w = Tensor::<f64>::from_f64(&[2, 3], &[1.0, -2.0, 0.5, 0.3, 0.7, -1.1]).unwrap();
        let r = grad_check(
            |t, x| {
                let s = t.softmax(x, 1)?;
                let w = t.constant(w.clone())?;
                let p = t.mul(s, w)?;
                t.mean(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::<f64>::from_f64(&[2], &[0.5, 0.25]).unwrap();
        let r = grad_check(|t, _| t.constant(Tensor::scalar(3.0)), &x, 1e-5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.analytic.iter().chain(&r.numeric).all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::<f64>::from_f64(&[2], &[0.5, 0.25]).unwrap();
        assert!(grad_check(|t, x| t.relu(x), &x, 1e-5).is_err());
    }
}
