//! AdamW with decoupled weight decay and global-norm gradient clipping.

use crate::{Matrix, ParamId, ParamStore};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Option<Matrix>>,
    second: Vec<Option<Matrix>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Frozen parameters are skipped even if a gradient is supplied.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Matrix)]) {
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, grad) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let m = self.first[id.0].get_or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
            let v = self.second[id.0].get_or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
            let p = store.value_mut(*id);
            let decay = 1.0 - self.lr * self.weight_decay;
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (j, &gj) in grad.data().iter().enumerate() {
                md[j] = self.beta1 * md[j] + (1.0 - self.beta1) * gj;
                vd[j] = self.beta2 * vd[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = md[j] / bc1;
                let vhat = vd[j] / bc2;
                pd[j] = pd[j] * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

pub fn global_norm(grads: &[(ParamId, Matrix)]) -> f64 {
    grads.iter().map(|(_, g)| g.norm_sq()).sum::<f64>().sqrt()
}

/// Rescales gradients so their joint L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Matrix)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_moves_against_the_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::from_vec(1, 2, vec![1.0, -1.0]));
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut store, &[(id, Matrix::from_vec(1, 2, vec![2.0, -3.0]))]);
        // First Adam step has magnitude lr regardless of gradient scale.
        let v = store.value(id);
        assert!((v.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((v.get(0, 1) + 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::scalar(1.0));
        store.set_trainable(id, false);
        let mut opt = AdamW::new(0.1, 0.1);
        opt.step(&mut store, &[(id, Matrix::scalar(5.0))]);
        assert_eq!(store.value(id).item(), 1.0);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut grads = vec![(ParamId(0), Matrix::from_vec(1, 2, vec![3.0, 4.0]))];
        let before = clip_global_norm(&mut grads, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-12);
    }
}
