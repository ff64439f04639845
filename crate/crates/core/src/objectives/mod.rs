//! Distillation, alignment, reconstruction and adversarial objectives.

mod ot;
mod record;

pub use ot::{exact_ot_oracle, sinkhorn, Plan, SinkhornConfig};
pub use record::{
    hinge_d_values, hinge_g_values, total_d, total_g, Component, LossRecord, LossWeights,
    TermWeights, LOSS_CSV_HEADER,
};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

const COS_EPS: f64 = 1e-8;
const LOG_EPS: f64 = 1e-8;

/// `a_ij = cos(t_i, v_j)` as an `L×N` map.
pub fn correlation_map<T: Scalar>(tape: &mut Tape<T>, text: Var, visual: Var) -> Result<Var> {
    tape.cosine_similarity(text, visual, T::lit(COS_EPS))
}

fn same_shape<T: Scalar>(tape: &Tape<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Mean squared difference between the student map `m_r` and the
/// (detached) teacher map `m_o`.
pub fn cmad_loss<T: Scalar>(tape: &mut Tape<T>, m_r: Var, m_o: Var) -> Result<Var> {
    same_shape(tape, m_r, m_o, "cmad_loss")?;
    let teacher = tape.detach(m_o)?;
    let d = tape.sub(m_r, teacher)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// `(1/N) Σ_i KL(softmax(v_i^o) ‖ softmax(v_i^r))`, softmax over the
/// feature axis; the teacher rows `v_o` are detached.
pub fn isd_loss<T: Scalar>(tape: &mut Tape<T>, v_o: Var, v_r: Var) -> Result<Var> {
    same_shape(tape, v_o, v_r, "isd_loss")?;
    let rows = tape.shape(v_o)[0];
    let teacher = tape.detach(v_o)?;
    let p_o = tape.softmax(teacher, 1)?;
    let log_p_o = tape.log(p_o, T::lit(LOG_EPS))?;
    let p_r = tape.softmax(v_r, 1)?;
    let log_p_r = tape.log(p_r, T::lit(LOG_EPS))?;
    let diff = tape.sub(log_p_o, log_p_r)?;
    let terms = tape.mul(p_o, diff)?;
    let total = tape.sum(terms)?;
    tape.scale(total, T::lit(1.0 / rows as f64))
}

/// Transport cost between patches `v_o` (N×e) and the non-pad text rows of
/// `t_o` (L×e), with cost `1 − cos` and uniform marginals. The plan is
/// solved off-tape and enters the loss as a constant.
pub fn wpa_loss<T: Scalar>(
    tape: &mut Tape<T>,
    v_o: Var,
    t_o: Var,
    token_valid: &[bool],
    cfg: &SinkhornConfig,
) -> Result<(Var, Plan)> {
    wpa_loss_inner(tape, v_o, t_o, token_valid, |c, n, m| {
        sinkhorn(
            c,
            n,
            m,
            &vec![1.0 / n as f64; n],
            &vec![1.0 / m as f64; m],
            cfg,
        )
    })
}

/// [`wpa_loss`] with a given plan instead of a fresh solve.
pub fn wpa_loss_with_plan<T: Scalar>(
    tape: &mut Tape<T>,
    v_o: Var,
    t_o: Var,
    token_valid: &[bool],
    plan: &Plan,
) -> Result<Var> {
    let (v, _) = wpa_loss_inner(tape, v_o, t_o, token_valid, |_, n, m| {
        if (plan.rows, plan.cols) != (n, m) {
            return Err(Error::shape(format!(
                "wpa_loss: plan is {}×{}, problem is {n}×{m}",
                plan.rows, plan.cols
            )));
        }
        Ok(plan.clone())
    })?;
    Ok(v)
}

fn wpa_loss_inner<T: Scalar>(
    tape: &mut Tape<T>,
    v_o: Var,
    t_o: Var,
    token_valid: &[bool],
    solve: impl FnOnce(&[f64], usize, usize) -> Result<Plan>,
) -> Result<(Var, Plan)> {
    let [l, e] = match tape.shape(t_o) {
        &[l, e] => [l, e],
        s => {
            return Err(Error::shape(format!(
                "wpa_loss: text must be L×e, got {s:?}"
            )))
        }
    };
    if token_valid.len() != l {
        return Err(Error::shape(format!(
            "wpa_loss: {} validity flags for {l} text rows",
            token_valid.len()
        )));
    }
    let keep: Vec<usize> = (0..l).filter(|&i| token_valid[i]).collect();
    if keep.is_empty() {
        return Err(Error::shape("wpa_loss: every token is padding"));
    }
    let text = if keep.len() == l {
        t_o
    } else {
        let index: Vec<usize> = keep.iter().flat_map(|&i| i * e..(i + 1) * e).collect();
        tape.gather(t_o, &index, &[keep.len(), e])?
    };
    let cos = tape.cosine_similarity(v_o, text, T::lit(COS_EPS))?;
    let neg = tape.neg(cos)?;
    let cost = tape.add_scalar(neg, T::one())?;
    let n = tape.shape(v_o)[0];
    let m = keep.len();
    let plan = solve(&tape.value(cost).to_f64_vec(), n, m)?;
    let weights = tape.constant(Tensor::from_f64(&[n, m], &plan.plan)?)?;
    let weighted = tape.mul(cost, weights)?;
    Ok((tape.sum(weighted)?, plan))
}

/// Mean absolute difference over all pixels.
pub fn l1_loss<T: Scalar>(tape: &mut Tape<T>, restored: Var, target: Var) -> Result<Var> {
    tape.l1_distance(restored, target)
}

/// `mean(−D(x̂))`.
pub fn hinge_g<T: Scalar>(tape: &mut Tape<T>, fake: Var) -> Result<Var> {
    let n = tape.neg(fake)?;
    tape.mean(n)
}

/// `mean(relu(1 − D(x))) + mean(relu(1 + D(x̂)))`.
pub fn hinge_d<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var> {
    let r = tape.neg(real)?;
    let r = tape.add_scalar(r, T::one())?;
    let r = tape.relu(r)?;
    let r = tape.mean(r)?;
    let f = tape.add_scalar(fake, T::one())?;
    let f = tape.relu(f)?;
    let f = tape.mean(f)?;
    tape.add(r, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn cos_oracle(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
        dot / (na * nb)
    }

    #[test]
    fn correlation_map_cases() {
        let mut tape = Tape::<f64>::new();
        let t = tape
            .constant(Tensor::from_fn(&[3, 4], |i| (i % 4) as f64 + 1.0))
            .unwrap();
        let m = correlation_map(&mut tape, t, t).unwrap();
        assert!(tape
            .value(m)
            .data()
            .iter()
            .all(|&a| (a - 1.0).abs() < 1e-12));

        let a = tape
            .constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap())
            .unwrap();
        let b = tape
            .constant(Tensor::new(&[2, 2], vec![0.0, 2.0, 0.0, -3.0]).unwrap())
            .unwrap();
        let m = correlation_map(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(m).data(), &[0.0, 0.0]);

        let ta = random(&[3, 5], 1);
        let va = random(&[4, 5], 2);
        let (tv, vv) = (
            tape.constant(ta.clone()).unwrap(),
            tape.constant(va.clone()).unwrap(),
        );
        let m = correlation_map(&mut tape, tv, vv).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let o = cos_oracle(
                    &ta.data()[i * 5..(i + 1) * 5],
                    &va.data()[j * 5..(j + 1) * 5],
                );
                assert!((tape.value(m).at(&[i, j]) - o).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cmad_cases() {
        let mut tape = Tape::<f64>::new();
        let m = tape.constant(random(&[4, 6], 3)).unwrap();
        let z = cmad_loss(&mut tape, m, m).unwrap();
        assert_eq!(tape.item(z), 0.0);
        let a = tape
            .constant(Tensor::new(&[1, 1], vec![1.0]).unwrap())
            .unwrap();
        let b = tape
            .constant(Tensor::new(&[1, 1], vec![-1.0]).unwrap())
            .unwrap();
        let l = cmad_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.item(l), 4.0);
        let (ra, rb) = (random(&[4, 6], 4), random(&[4, 6], 5));
        let (va, vb) = (
            tape.constant(ra.clone()).unwrap(),
            tape.constant(rb.clone()).unwrap(),
        );
        let l = cmad_loss(&mut tape, va, vb).unwrap();
        let mut oracle = 0.0;
        for i in 0..4 {
            for j in 0..6 {
                oracle += (ra.at(&[i, j]) - rb.at(&[i, j])).powi(2);
            }
        }
        assert!((tape.item(l) - oracle / 24.0).abs() < 1e-6);
        let bad = tape.constant(random(&[6, 4], 1)).unwrap();
        assert!(cmad_loss(&mut tape, va, bad).is_err());
    }

    #[test]
    fn cmad_teacher_receives_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let r = tape.leaf(random(&[2, 3], 1), true).unwrap();
        let o = tape.leaf(random(&[2, 3], 2), true).unwrap();
        let l = cmad_loss(&mut tape, r, o).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(r).is_some());
        assert!(tape
            .grad_data(o)
            .is_none_or(|g| g.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn isd_cases() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(random(&[5, 8], 1)).unwrap();
        let z = isd_loss(&mut tape, v, v).unwrap();
        assert!(tape.item(z).abs() < 1e-15);
        let o = tape
            .constant(Tensor::new(&[2, 2], vec![0.0, -1000.0, 0.0, -1000.0]).unwrap())
            .unwrap();
        let r = tape
            .constant(Tensor::new(&[2, 2], vec![3.0, 3.0, -1.0, -1.0]).unwrap())
            .unwrap();
        let l = isd_loss(&mut tape, o, r).unwrap();
        assert!((tape.item(l) - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn hinge_cases() {
        let mut tape = Tape::<f64>::new();
        let s = tape
            .constant(Tensor::new(&[1], vec![0.3]).unwrap())
            .unwrap();
        let g = hinge_g(&mut tape, s).unwrap();
        assert!((tape.item(g) + 0.3).abs() < 1e-15);
        let s = tape
            .constant(Tensor::new(&[2], vec![1.0, -1.0]).unwrap())
            .unwrap();
        let g = hinge_g(&mut tape, s).unwrap();
        assert_eq!(tape.item(g), 0.0);
        let one = tape
            .constant(Tensor::new(&[1], vec![1.0]).unwrap())
            .unwrap();
        let m1 = tape
            .constant(Tensor::new(&[1], vec![-1.0]).unwrap())
            .unwrap();
        let zero = tape
            .constant(Tensor::new(&[1], vec![0.0]).unwrap())
            .unwrap();
        let d = hinge_d(&mut tape, one, m1).unwrap();
        assert_eq!(tape.item(d), 0.0);
        let d = hinge_d(&mut tape, zero, zero).unwrap();
        assert_eq!(tape.item(d), 2.0);
        let real = random(&[7], 3).map(|x| 2.0 * x);
        let fake = random(&[5], 4).map(|x| 2.0 * x);
        let (rv, fv) = (
            tape.constant(real.clone()).unwrap(),
            tape.constant(fake.clone()).unwrap(),
        );
        let d = hinge_d(&mut tape, rv, fv).unwrap();
        let g = hinge_g(&mut tape, fv).unwrap();
        let (dr, df) = (real.data(), fake.data());
        assert!((tape.item(d) - hinge_d_values(dr, df).unwrap()).abs() < 1e-12);
        assert!((tape.item(g) - hinge_g_values(df).unwrap()).abs() < 1e-12);
        let mut oracle = 0.0;
        for &x in dr {
            oracle += (1.0 - x).max(0.0) / 7.0;
        }
        for &x in df {
            oracle += (1.0 + x).max(0.0) / 5.0;
        }
        assert!((tape.item(d) - oracle).abs() < 1e-6);
    }

    #[test]
    fn l1_cases() {
        let mut tape = Tape::<f64>::new();
        let a = random(&[3, 4, 4], 1);
        let av = tape.constant(a.clone()).unwrap();
        let z = l1_loss(&mut tape, av, av).unwrap();
        assert_eq!(tape.item(z), 0.0);
        let bv = tape.constant(a.map(|x| x + 0.25)).unwrap();
        let d = l1_loss(&mut tape, bv, av).unwrap();
        assert!((tape.item(d) - 0.25).abs() < 1e-12);
        let b = random(&[3, 4, 4], 2);
        let bv = tape.constant(b.clone()).unwrap();
        let d = l1_loss(&mut tape, av, bv).unwrap();
        let mut oracle = 0.0;
        for i in 0..a.len() {
            oracle += (a.data()[i] - b.data()[i]).abs();
        }
        assert!((tape.item(d) - oracle / a.len() as f64).abs() < 1e-6);
    }

    #[test]
    fn wpa_cases() {
        let cfg = SinkhornConfig::default();
        let mut tape = Tape::<f64>::new();
        // parallel rows: every cost 0
        let v = tape
            .constant(Tensor::from_fn(&[4, 3], |i| (i % 3) as f64 + 1.0))
            .unwrap();
        let t = tape
            .constant(Tensor::from_fn(&[2, 3], |i| 2.0 * ((i % 3) as f64 + 1.0)))
            .unwrap();
        let (l, _) = wpa_loss(&mut tape, v, t, &[true, true], &cfg).unwrap();
        assert!(tape.item(l).abs() < 1e-12);
        // pads excluded: a padded orthogonal row does not contribute
        let t2 = tape
            .constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 3.0, 0.0, -1.0]).unwrap())
            .unwrap();
        let (l, plan) = wpa_loss(&mut tape, v, t2, &[true, false], &cfg).unwrap();
        assert!(tape.item(l).abs() < 1e-12);
        assert_eq!(plan.cols, 1);
        assert!(wpa_loss(&mut tape, v, t2, &[false, false], &cfg).is_err());
    }

    #[test]
    fn losses_pass_grad_check() {
        let teacher_map = random(&[3, 4], 10);
        let r = grad_check(
            |tape, x| {
                let t = tape.slice(x, 0, 0, 3)?;
                let v = tape.slice(x, 0, 3, 7)?;
                let m = correlation_map(tape, t, v)?;
                let o = tape.constant(teacher_map.clone())?;
                cmad_loss(tape, m, o)
            },
            &random(&[7, 5], 11),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "cmad {r:?}");

        let teacher = random(&[4, 6], 12);
        let r = grad_check(
            |tape, x| {
                let o = tape.constant(teacher.clone())?;
                isd_loss(tape, o, x)
            },
            &random(&[4, 6], 13),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "isd {r:?}");

        // the plan is a constant of the loss, so freeze it at the base point
        let base = random(&[7, 5], 14);
        let frozen = {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(base.clone()).unwrap();
            let v = tape.slice(x, 0, 0, 4).unwrap();
            let t = tape.slice(x, 0, 4, 7).unwrap();
            wpa_loss(
                &mut tape,
                v,
                t,
                &[true, true, false],
                &SinkhornConfig::default(),
            )
            .unwrap()
            .1
        };
        let r = grad_check(
            |tape, x| {
                let v = tape.slice(x, 0, 0, 4)?;
                let t = tape.slice(x, 0, 4, 6)?;
                let cos = tape.cosine_similarity(v, t, 1e-8)?;
                let neg = tape.neg(cos)?;
                let cost = tape.add_scalar(neg, 1.0)?;
                let w = tape.constant(Tensor::from_f64(&[4, 2], &frozen.plan)?)?;
                let prod = tape.mul(cost, w)?;
                tape.sum(prod)
            },
            &base,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "wpa {r:?}");

        let target = random(&[3, 4, 4], 15);
        let r = grad_check(
            |tape, x| {
                let t = tape.constant(target.clone())?;
                l1_loss(tape, x, t)
            },
            &random(&[3, 4, 4], 16),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "l1 {r:?}");

        let real = Tensor::new(&[3], vec![0.5, 1.7, -0.2]).unwrap();
        let r = grad_check(
            |tape, x| {
                let rv = tape.constant(real.clone())?;
                let d = hinge_d(tape, rv, x)?;
                let g = hinge_g(tape, x)?;
                let g = tape.scale(g, 0.5)?;
                tape.add(d, g)
            },
            &Tensor::new(&[4], vec![-0.5, 0.3, -1.6, 0.9]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "hinge {r:?}");
    }

    proptest! {
        #[test]
        fn loss_ranges(seed in 0u64..5000) {
            let mut tape = Tape::<f64>::new();
            let a = tape.constant(random(&[4, 6], seed)).unwrap();
            let b = tape.constant(random(&[4, 6], seed + 1)).unwrap();
            let c = tape.constant(random(&[3, 6], seed + 2)).unwrap();
            let ma = correlation_map(&mut tape, c, a).unwrap();
            prop_assert!(tape.value(ma).data().iter().all(|&x| (-1.0 - 1e-12..=1.0 + 1e-12).contains(&x)));
            let mb = correlation_map(&mut tape, c, b).unwrap();
            let cm = cmad_loss(&mut tape, ma, mb).unwrap();
            prop_assert!(tape.item(cm) >= 0.0);
            let isd = isd_loss(&mut tape, a, b).unwrap();
            prop_assert!(tape.item(isd) >= -1e-9);
            let (w, _) = wpa_loss(&mut tape, a, c, &[true, true, false], &SinkhornConfig::default()).unwrap();
            prop_assert!((0.0..=2.0).contains(&tape.item(w)));
        }
    }
}
