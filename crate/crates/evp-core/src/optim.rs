//! Adam with bias correction. Moments and all update arithmetic stay in
//! f64 regardless of the parameter element type, so f32 training does
//! not accumulate optimizer-state rounding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && [self.lr, self.beta1, self.beta2, self.eps].iter().all(|v| v.is_finite());
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Zero-initialized moments matching every tensor in the store.
    pub fn new<T: Element>(store: &ParamStore<T>, cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        let sizes: Vec<usize> = store.ids().map(|id| store.get(id).data().len()).collect();
        Ok(Adam {
            cfg,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over the whole store; `grads` is indexed like
    /// `store.ids()`, `None` meaning a zero gradient (unreached leaf).
    pub fn step<T: Element>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<&Tensor<T>>],
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            if let Some(gt) = grads[slot] {
                if gt.shape() != store.get(id).shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "gradient shape {:?} for parameter `{}` of shape {:?}",
                        gt.shape(),
                        store.name(id),
                        store.get(id).shape()
                    )));
                }
            }
            let param = store.get_mut(id);
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                let g = grads[slot].map_or(0.0, |gt| gt.data()[i].to_f64());
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let next = p.to_f64() - self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                *p = T::from_f64(next);
            }
        }
        Ok(())
    }

    /// Largest absolute first-moment entry; shrinks under zero grads.
    pub fn max_abs_first_moment(&self) -> f64 {
        self.m
            .iter()
            .flat_map(|b| b.iter().map(|v| v.abs()))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_param(value: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(value));
        (store, id)
    }

    #[test]
    fn first_step_moves_by_roughly_lr_against_the_gradient() {
        let (mut store, id) = single_param(1.0);
        let mut adam = Adam::new(&store, AdamConfig::default()).unwrap();
        let g = Tensor::scalar(3.0);
        adam.step(&mut store, &[Some(&g)]).unwrap();
        let moved = store.get(id).data()[0] - 1.0;
        assert!(moved < 0.0, "update must oppose the gradient");
        assert!((moved + 3e-4).abs() < 1e-9, "first step size {moved}");
    }

    #[test]
    fn zero_gradients_leave_fresh_parameters_unchanged() {
        let (mut store, id) = single_param(2.5);
        let mut adam = Adam::new(&store, AdamConfig::default()).unwrap();
        let z = Tensor::scalar(0.0);
        adam.step(&mut store, &[Some(&z)]).unwrap();
        adam.step(&mut store, &[None]).unwrap();
        assert_eq!(store.get(id).data()[0], 2.5);
        assert_eq!(adam.max_abs_first_moment(), 0.0);
    }

    #[test]
    fn moments_decay_under_zero_gradients() {
        let (mut store, _) = single_param(1.0);
        let mut adam = Adam::new(&store, AdamConfig::default()).unwrap();
        let g = Tensor::scalar(2.0);
        adam.step(&mut store, &[Some(&g)]).unwrap();
        let after_one = adam.max_abs_first_moment();
        assert!(after_one > 0.0);
        let z = Tensor::scalar(0.0);
        adam.step(&mut store, &[Some(&z)]).unwrap();
        assert!((adam.max_abs_first_moment() - 0.9 * after_one).abs() < 1e-15);
    }

    #[test]
    fn ten_steps_on_a_quadratic_match_a_hand_stepped_trace() {
        // minimize 0.5*(x - 2)^2 from x0 = 5; grad = x - 2
        let (mut store, id) = single_param(5.0);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut adam = Adam::new(&store, cfg).unwrap();

        // independent transcription of the textbook update
        let (mut x, mut m, mut v) = (5.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g_live = store.get(id).data()[0] - 2.0;
            let gt = Tensor::scalar(g_live);
            adam.step(&mut store, &[Some(&gt)]).unwrap();

            let g = x - 2.0;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);

            assert!(
                (store.get(id).data()[0] - x).abs() < 1e-12,
                "step {t}: {} vs {x}",
                store.get(id).data()[0]
            );
        }
        assert!(store.get(id).data()[0] < 5.0);
    }

    #[test]
    fn multi_tensor_stores_update_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(140);
        let mut store: ParamStore<f32> = ParamStore::new();
        let a = store.add("a", Tensor::rand_uniform(&[3, 2], -1.0, 1.0, &mut rng));
        let b = store.add("b", Tensor::rand_uniform(&[4], -1.0, 1.0, &mut rng));
        let before_a = store.get(a).clone();
        let before_b = store.get(b).clone();
        let mut adam = Adam::new(&store, AdamConfig::default()).unwrap();
        let ga: Tensor<f32> = Tensor::ones(&[3, 2]);
        adam.step(&mut store, &[Some(&ga), None]).unwrap();
        assert!(!store.get(a).bit_eq(&before_a));
        assert!(store.get(b).bit_eq(&before_b));
    }

    #[test]
    fn config_and_shape_validation() {
        assert!(AdamConfig { lr: 0.0, ..AdamConfig::default() }.validate().is_err());
        assert!(AdamConfig { beta1: 1.0, ..AdamConfig::default() }.validate().is_err());
        assert!(AdamConfig { eps: -1.0, ..AdamConfig::default() }.validate().is_err());
        let (mut store, _) = single_param(1.0);
        let mut adam = Adam::new(&store, AdamConfig::default()).unwrap();
        assert!(adam.step(&mut store, &[]).is_err());
        let bad = Tensor::ones(&[2]);
        assert!(matches!(
            adam.step(&mut store, &[Some(&bad)]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn updates_are_bitwise_deterministic() {
        let run = || {
            let mut store: ParamStore<f32> = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(141);
            let id = store.add("w", Tensor::rand_uniform(&[8], -1.0, 1.0, &mut rng));
            let mut adam = Adam::new(&store, AdamConfig::default()).unwrap();
            for step in 0..20 {
                let g: Tensor<f32> =
                    Tensor::from_fn(&[8], |i| (i as f32 + 1.0) * 0.01 * (step as f32 - 10.0));
                adam.step(&mut store, &[Some(&g)]).unwrap();
            }
            store.get(id).clone()
        };
        assert!(run().bit_eq(&run()));
    }
}
