//! Adam optimizer with per-parameter first/second moment state.

use std::collections::HashMap;

use ndarray::ArrayD;

use super::{ParamId, ParamStore};

/// Adam with bias correction. Moment buffers are allocated lazily per
/// parameter and are addressable by parameter name for checkpointing.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed steps (bias-correction exponent).
    pub t: u64,
    moments: HashMap<ParamId, (ArrayD<f32>, ArrayD<f32>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }

    /// Apply one update to the listed parameters using the gradients
    /// currently accumulated in the store. Parameters without a gradient
    /// are skipped (their moments do not advance).
    pub fn step(&mut self, store: &mut ParamStore, params: &[ParamId]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for &pid in params {
            let Some(grad) = store.grad(pid).cloned() else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(pid)
                .or_insert_with(|| (ArrayD::zeros(grad.raw_dim()), ArrayD::zeros(grad.raw_dim())));
            ndarray::Zip::from(&mut *m).and(&grad).for_each(|m, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(&grad).for_each(|v, &g| {
                *v = b2 * *v + (1.0 - b2) * g * g;
            });
            let (lr, eps) = (self.lr, self.eps);
            let (m, v) = (&self.moments[&pid].0, &self.moments[&pid].1);
            store.update_value(pid, |val| {
                ndarray::Zip::from(val).and(m).and(v).for_each(|p, &m, &v| {
                    let mhat = m as f64 / c1;
                    let vhat = v as f64 / c2;
                    *p -= (lr * mhat / (vhat.sqrt() + eps)) as f32;
                });
            });
        }
    }

    /// Moment buffers keyed by parameter name (for checkpointing).
    pub fn export_state(&self, store: &ParamStore) -> Vec<(String, ArrayD<f32>, ArrayD<f32>)> {
        let mut out: Vec<_> = self
            .moments
            .iter()
            .map(|(&pid, (m, v))| (store.name(pid).to_string(), m.clone(), v.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn import_state(
        &mut self,
        store: &ParamStore,
        t: u64,
        entries: impl IntoIterator<Item = (String, ArrayD<f32>, ArrayD<f32>)>,
    ) {
        self.t = t;
        self.moments.clear();
        for (name, m, v) in entries {
            if let Some(pid) = store.id(&name) {
                self.moments.insert(pid, (m, v));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::IxDyn;

    /// One Adam step from zero moments: update = -lr * g/|g| = -lr * sign(g),
    /// independent of gradient magnitude (up to eps).
    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let mut store = ParamStore::new();
        let p = store.add_param("p", ArrayD::from_elem(IxDyn(&[2]), 1.0f32));
        store.accum_grad(p, &ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5f32, -3.0]).unwrap());
        let mut opt = Adam::new(0.01, 0.9, 0.999);
        opt.step(&mut store, &[p]);
        assert_abs_diff_eq!(store.value(p)[0], 1.0 - 0.01, epsilon = 1e-5);
        assert_abs_diff_eq!(store.value(p)[1], 1.0 + 0.01, epsilon = 1e-5);
    }

    /// Adam on a 1-D quadratic converges close to the minimum.
    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add_param("p", ArrayD::from_elem(IxDyn(&[1]), 5.0f32));
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        for _ in 0..500 {
            let x = store.value(p)[0];
            store.zero_grads();
            store.accum_grad(p, &ArrayD::from_elem(IxDyn(&[1]), 2.0 * (x - 1.5)));
            opt.step(&mut store, &[p]);
        }
        assert_abs_diff_eq!(store.value(p)[0], 1.5, epsilon = 1e-2);
    }

    #[test]
    fn state_round_trips_by_name() {
        let mut store = ParamStore::new();
        let p = store.add_param("layer.w", ArrayD::from_elem(IxDyn(&[3]), 1.0f32));
        store.accum_grad(p, &ArrayD::from_elem(IxDyn(&[3]), 0.25f32));
        let mut opt = Adam::new(0.001, 0.9, 0.999);
        opt.step(&mut store, &[p]);
        let state = opt.export_state(&store);
        assert_eq!(state.len(), 1);
        assert_eq!(state[0].0, "layer.w");

        let mut opt2 = Adam::new(0.001, 0.9, 0.999);
        opt2.import_state(&store, opt.t, state);
        // both optimizers now produce identical next values
        let mut store2 = ParamStore::new();
        let q = store2.add_param("layer.w", store.value(p).clone());
        store.zero_grads();
        store.accum_grad(p, &ArrayD::from_elem(IxDyn(&[3]), -0.1f32));
        store2.accum_grad(q, &ArrayD::from_elem(IxDyn(&[3]), -0.1f32));
        opt.step(&mut store, &[p]);
        opt2.step(&mut store2, &[q]);
        for (a, b) in store.value(p).iter().zip(store2.value(q).iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 0.0);
        }
    }
}
