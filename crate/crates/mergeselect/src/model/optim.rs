//! AdamW with decoupled weight decay and global-norm clipping.

use serde::{Deserialize, Serialize};

use super::lora::TrainScope;
use super::Params;
use crate::error::{MsError, Result};
use crate::num::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Global gradient norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let in01 = |v: f64| (0.0..1.0).contains(&v);
        if !in01(self.beta1) || !in01(self.beta2) {
            return Err(MsError::InvalidConfig(format!(
                "betas ({}, {}) must lie in [0, 1)",
                self.beta1, self.beta2
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(MsError::InvalidConfig(format!("bad lr {}", self.lr)));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return Err(MsError::InvalidConfig("bad optimizer constants".into()));
        }
        Ok(())
    }
}

/// L2 norm over the trainable gradient slots only.
pub fn global_grad_norm<F: Real>(grads: &Params<F>, scope: TrainScope) -> f64 {
    let mut acc = 0.0f64;
    for (name, view) in grads.flatten() {
        if !scope.trainable(&name) {
            continue;
        }
        for &g in view.iter() {
            let g = g.into_f64();
            acc += g * g;
        }
    }
    acc.sqrt()
}

/// First and second moment state mirrors the parameter tree, so adapter
/// slots get moments of their own.
pub struct AdamW<F> {
    pub m: Params<F>,
    pub v: Params<F>,
    pub step: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(params: &Params<F>) -> Self {
        AdamW {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// One update. Gradients are pre-scaled by `grad_scale` (the clipping
    /// factor); frozen slots are untouched, bit for bit.
    pub fn step(
        &mut self,
        params: &mut Params<F>,
        grads: &Params<F>,
        cfg: &OptimConfig,
        scope: TrainScope,
        grad_scale: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = F::from_f64(cfg.beta1);
        let b2 = F::from_f64(cfg.beta2);
        let one = F::one();
        let lr = F::from_f64(cfg.lr);
        let wd = F::from_f64(cfg.weight_decay);
        let eps = F::from_f64(cfg.eps);
        let scale = F::from_f64(grad_scale);
        let c1 = F::from_f64(1.0 - cfg.beta1.powi(t));
        let c2 = F::from_f64(1.0 - cfg.beta2.powi(t));

        let mut pv = params.flatten_mut();
        let gv = grads.flatten();
        let mut mv = self.m.flatten_mut();
        let mut vv = self.v.flatten_mut();
        if pv.len() != gv.len() || pv.len() != mv.len() || pv.len() != vv.len() {
            return Err(MsError::ShapeMismatch(
                "parameter and moment trees disagree".into(),
            ));
        }
        for i in 0..pv.len() {
            let (pname, p) = &mut pv[i];
            let (gname, g) = &gv[i];
            if pname != gname {
                return Err(MsError::ShapeMismatch(format!(
                    "parameter order mismatch: {pname} vs {gname}"
                )));
            }
            if !scope.trainable(pname) {
                continue;
            }
            let m = &mut mv[i].1;
            let v = &mut vv[i].1;
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g * scale;
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p = *p - lr * (mh / (vh.sqrt() + eps) + wd * *p);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Params};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_params(w: f64) -> Params<f64> {
        // Smallest legal tree; only the head cell is exercised.
        let cfg = ModelConfig {
            layers: 1,
            heads: 1,
            d_model: 2,
            d_head: 2,
            vocab: 2,
            max_seq: 16,
            attn: crate::attention::MsConfig {
                s_q: 4,
                s_k: 4,
                topk: 4,
                merges: 1,
                topn: 4,
                ..Default::default()
            },
            pos: crate::positional::PosEncoding::rope(2),
            optim: OptimConfig::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = Params::init(&cfg, &mut rng).unwrap();
        for (_, mut view) in p.flatten_mut() {
            view.fill(0.0);
        }
        p.head = Array2::from_elem((2, 2), 0.0);
        p.head[[0, 0]] = w;
        p
    }

    // Two hand-computed steps on loss w² (g = 2w), lr 0.1, wd 0.1:
    // w1 = 0.8900000004999999, w2 = 0.7814263893178282.
    #[test]
    fn scalar_quadratic_matches_hand_steps() {
        let cfg = OptimConfig {
            lr: 0.1,
            weight_decay: 0.1,
            clip_norm: 0.0,
            ..OptimConfig::default()
        };
        let mut p = scalar_params(1.0);
        let mut opt = AdamW::new(&p);
        for want in [0.8900000004999999f64, 0.7814263893178282] {
            let mut g = p.zeros_like();
            g.head[[0, 0]] = 2.0 * p.head[[0, 0]];
            opt.step(&mut p, &g, &cfg, TrainScope::Full, 1.0).unwrap();
            assert!(
                (p.head[[0, 0]] - want).abs() < 1e-12,
                "got {} want {}",
                p.head[[0, 0]],
                want
            );
        }
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let cfg = OptimConfig {
            lr: 0.0,
            ..OptimConfig::default()
        };
        let mut p = scalar_params(1.0);
        let before = p.clone();
        let mut opt = AdamW::new(&p);
        let mut g = p.zeros_like();
        g.head[[0, 0]] = 5.0;
        opt.step(&mut p, &g, &cfg, TrainScope::Full, 1.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn grad_norm_counts_only_trainable() {
        let mut p = scalar_params(0.0);
        p.head[[0, 0]] = 0.0;
        let mut g = p.zeros_like();
        g.head[[0, 0]] = 3.0;
        g.embed[[0, 0]] = 4.0;
        assert!((global_grad_norm(&g, TrainScope::Full) - 5.0).abs() < 1e-12);
        let ft = TrainScope::Finetune(crate::model::LoraVariant::Ko);
        // head frozen under finetune; embed still counted
        assert!((global_grad_norm(&g, ft) - 4.0).abs() < 1e-12);
    }
}
