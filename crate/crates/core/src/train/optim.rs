use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

/// Adam with decoupled weight decay over one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(
        store: &ParamStore<f32>,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    ) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Tensor::zeros(store.get(id).shape()))
                .collect()
        };
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from the store's gradient accumulators:
    /// `p ← p − lr·(m̂/(√v̂ + eps) + wd·p)`.
    pub fn step(&mut self, store: &mut ParamStore<f32>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, id) in store.ids().enumerate() {
            let grad: Vec<f32> = store.grad(id).to_vec();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let g = grad[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update =
                    (mi / c1) / ((vi / c2).sqrt() + self.eps) + self.weight_decay * p[i] as f64;
                p[i] = (p[i] as f64 - lr * update) as f32;
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore<f32>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.grad_mut(id).iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f32]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(&[values.len()], values.to_vec()).unwrap());
        s
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // with bias correction the first update is g/|g| (up to eps)
        let mut s = store(&[1.0, -2.0, 0.5]);
        let id = s.ids().next().unwrap();
        s.grad_mut(id).copy_from_slice(&[0.3, -4.0, 0.0]);
        let mut opt = AdamW::new(&s, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut s, 0.1).unwrap();
        let p = s.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn matches_scalar_reference_over_steps() {
        let mut s = store(&[0.7]);
        let id = s.ids().next().unwrap();
        let mut opt = AdamW::new(&s, 0.9, 0.999, 1e-8, 0.01);
        let (mut p, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for t in 1..=20 {
            let g = (t as f64 * 0.37).sin();
            s.grad_mut(id)[0] = g as f32;
            opt.step(&mut s, 1e-2).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= 1e-2 * (mh / (vh.sqrt() + 1e-8) + 0.01 * p);
        }
        assert!((s.get(id).data()[0] as f64 - p).abs() < 1e-5);
        assert_eq!(opt.t, 20);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut s = store(&[2.0]);
        let mut opt = AdamW::new(&s, 0.9, 0.999, 1e-8, 0.1);
        opt.step(&mut s, 0.5).unwrap();
        let id = s.ids().next().unwrap();
        assert!((s.get(id).data()[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-6);
        assert_eq!(opt.m[0].data()[0], 0.0);
    }

    #[test]
    fn clipping_rescales_to_the_bound() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::<f32>::zeros(&[3]));
        let b = s.add("b", Tensor::<f32>::zeros(&[2]));
        s.grad_mut(a).copy_from_slice(&[6.0, -3.0, 2.0]);
        s.grad_mut(b).copy_from_slice(&[0.0, 5.0]);
        let before = s.grad_norm();
        assert!((before - 74f64.sqrt()).abs() < 1e-6);
        let reported = clip_grad_norm(&mut s, 1.0);
        assert_eq!(reported, before);
        assert!((s.grad_norm() - 1.0).abs() < 1e-5);
        let small = clip_grad_norm(&mut s, 2.0);
        assert!((small - 1.0).abs() < 1e-5);
        assert!((s.grad_norm() - 1.0).abs() < 1e-5);
    }
}
