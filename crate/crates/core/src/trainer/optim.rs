use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::nn::{round_f32, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64, clip_norm: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm: Some(clip_norm),
        }
    }
}

/// Adam with decoupled weight decay. Parameters and moments are rounded to
/// `f32` after every update so saved state reloads exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

pub fn global_norm(grads: &[Option<Mat>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store
            .ids()
            .map(|id| Mat::zeros(store.get(id).dim()))
            .collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. `grads[i]` is the gradient of parameter `i`;
    /// `None` means it took no part in the loss. Returns the pre-clip norm.
    pub fn update(&mut self, store: &mut ParamStore, grads: &mut [Option<Mat>]) -> f64 {
        let norm = global_norm(grads);
        if let Some(c) = self.cfg.clip_norm {
            if norm > c {
                let k = c / (norm + 1e-6);
                for g in grads.iter_mut().flatten() {
                    *g *= k;
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                });
            round_f32(m);
            round_f32(v);
            let p = store.get_mut(ParamId(i));
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let update = (m / bc1) / ((v / bc2).sqrt() + eps);
                    *p -= lr * (update + weight_decay * *p);
                });
            round_f32(p);
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.add("p", ndarray::array![[1.0, -2.0]]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            clip_norm: None,
            ..AdamWConfig::new(0.01, 0.0, 1.0)
        };
        let mut opt = AdamW::new(cfg, &store);
        let mut g = vec![Some(ndarray::array![[3.0, -0.5]])];
        opt.update(&mut store, &mut g);
        let p = store.get(ParamId(0));
        assert!((p[[0, 0]] - 0.99).abs() < 1e-6);
        assert!((p[[0, 1]] + 1.99).abs() < 1e-6);
    }

    #[test]
    fn clipping_and_state_rounding() {
        let mut store = ParamStore::new();
        store.add("p", Mat::from_elem((2, 2), 0.3));
        let mut opt = AdamW::new(AdamWConfig::new(1e-3, 1e-4, 0.1), &store);
        let mut g = vec![Some(Mat::from_elem((2, 2), 10.0))];
        let norm = opt.update(&mut store, &mut g);
        assert!((norm - 20.0).abs() < 1e-12);
        assert!((global_norm(&g) - 0.1).abs() < 1e-6);
        for m in opt
            .m
            .iter()
            .chain(&opt.v)
            .chain(std::iter::once(store.get(ParamId(0))))
        {
            assert!(m.iter().all(|&x| x == x as f32 as f64));
        }
    }

    #[test]
    fn untouched_params_keep_value() {
        let mut store = ParamStore::new();
        store.add("a", Mat::from_elem((1, 1), 1.0));
        store.add("b", Mat::from_elem((1, 1), 1.0));
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.1, 1.0), &store);
        opt.update(&mut store, &mut [Some(Mat::from_elem((1, 1), 1.0)), None]);
        assert_eq!(store.get(ParamId(1))[[0, 0]], 1.0);
        assert!(store.get(ParamId(0))[[0, 0]] < 1.0);
    }
}
