//! Adam with bias correction and optional global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::autograd::ParamId;
use crate::params::ParamStore;
use crate::tensor::Matrix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub step: u64,
    pub m: Matrix,
    pub v: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    /// One slot per parameter; `None` until the parameter first receives a
    /// gradient.
    pub state: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Self {
            lr,
            state: vec![None; num_params],
        }
    }

    /// Applies one update. Parameters absent from `grads` are untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, Matrix)]) {
        for (id, g) in grads {
            let p = params.get_mut(*id);
            let st = self.state[*id].get_or_insert_with(|| Moments {
                step: 0,
                m: Matrix::zeros(g.rows(), g.cols()),
                v: Matrix::zeros(g.rows(), g.cols()),
            });
            st.step += 1;
            let bc1 = 1.0 - BETA1.powi(st.step as i32);
            let bc2 = 1.0 - BETA2.powi(st.step as i32);
            let it = p
                .data_mut()
                .iter_mut()
                .zip(st.m.data_mut())
                .zip(st.v.data_mut())
                .zip(g.data());
            for (((p, m), v), &gi) in it {
                *m = BETA1 * *m + (1.0 - BETA1) * gi;
                *v = BETA2 * *v + (1.0 - BETA2) * gi * gi;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= self.lr * mh / (vh.sqrt() + EPS);
            }
        }
    }
}

/// Global L2 norm over all gradients.
pub fn global_norm(grads: &[(ParamId, Matrix)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Matrix)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for (_, g) in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Matrix::from_rows(&[vec![1.0, -2.0, 0.5]]));
        let mut opt = Adam::new(0.005, 1);
        opt.step(&mut ps, &[(id, Matrix::from_rows(&[vec![0.3, -4.0, 0.0]]))]);
        let got = ps.get(id).row(0);
        // m_hat = g and v_hat = g^2 after one step.
        let want = [1.0 - 0.005 * 0.3 / (0.3 + EPS), -2.0 + 0.005 * 4.0 / (4.0 + EPS), 0.5];
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn matches_closed_form_over_several_steps() {
        let gs = [0.5, -1.0, 2.0, 0.25, 0.0];
        let mut ps = ParamStore::new();
        let id = ps.add("w", Matrix::scalar(3.0));
        let mut opt = Adam::new(0.1, 1);
        let (mut p, mut m, mut v) = (3.0f64, 0.0f64, 0.0f64);
        for (k, &g) in gs.iter().enumerate() {
            opt.step(&mut ps, &[(id, Matrix::scalar(g))]);
            let t = (k + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            p -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            assert!((ps.get(id).item() - p).abs() < 1e-12);
        }
    }

    #[test]
    fn untouched_params_stay_put() {
        let mut ps = ParamStore::new();
        let a = ps.add("a", Matrix::scalar(1.0));
        let b = ps.add("b", Matrix::scalar(2.0));
        let mut opt = Adam::new(0.1, 2);
        opt.step(&mut ps, &[(b, Matrix::scalar(1.0))]);
        assert_eq!(ps.get(a).item(), 1.0);
        assert!(opt.state[a].is_none());
    }

    #[test]
    fn clipping() {
        let mut g = vec![(0, Matrix::from_rows(&[vec![3.0]])), (1, Matrix::from_rows(&[vec![4.0]]))];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].1.item(), 3.0);
        clip_grad_norm(&mut g, 1.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
    }
}
