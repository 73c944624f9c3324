//! Low-rank adapters and the reduced fine-tuning surface.
//!
//! An adapted projection is W₀ + A·B with A (in, r) and B (r, out); B
//! starts at zero so attaching adapters changes nothing until training
//! moves them. Which projections get adapters is the variant's choice; the
//! default `ko` rests on QKᵀ = X W_q W_kᵀ Xᵀ: with W_q full rank, moving
//! W_k alone spans every product the pair could reach, and W_o covers the
//! value path the same way.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MsError, Result};
use crate::num::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proj {
    Q,
    K,
    V,
    O,
}

pub const ALL_PROJS: [Proj; 4] = [Proj::Q, Proj::K, Proj::V, Proj::O];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraVariant {
    /// Adapters on W_k and W_o.
    Ko,
    /// Adapters on W_q and W_k.
    Qk,
    /// Adapter on W_q alone.
    QOnly,
    /// Adapters on all four projections.
    Qkvo,
}

impl LoraVariant {
    pub fn targets(self) -> &'static [Proj] {
        match self {
            LoraVariant::Ko => &[Proj::K, Proj::O],
            LoraVariant::Qk => &[Proj::Q, Proj::K],
            LoraVariant::QOnly => &[Proj::Q],
            LoraVariant::Qkvo => &ALL_PROJS,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "ko" => Ok(LoraVariant::Ko),
            "qk" => Ok(LoraVariant::Qk),
            "q_only" => Ok(LoraVariant::QOnly),
            "qkvo" => Ok(LoraVariant::Qkvo),
            other => Err(MsError::InvalidConfig(format!(
                "unknown lora variant '{other}', expected ko|qk|q_only|qkvo"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<F> {
    pub a: Array2<F>,
    pub b: Array2<F>,
}

impl<F: Real> LoraAdapter<F> {
    /// A drawn small and random, B exactly zero: the delta starts at the
    /// zero matrix.
    pub fn init<R: Rng>(d_in: usize, d_out: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(MsError::InvalidConfig(format!(
                "lora rank {rank} outside 1..=min({d_in}, {d_out})"
            )));
        }
        let normal = Normal::new(0.0f64, 0.02).expect("valid std");
        let a = Array2::from_shape_fn((d_in, rank), |_| F::from_f64(normal.sample(rng)));
        let b = Array2::zeros((rank, d_out));
        Ok(LoraAdapter { a, b })
    }

    pub fn delta(&self) -> Array2<F> {
        self.a.dot(&self.b)
    }

    /// W₀ + A·B.
    pub fn apply(&self, w0: &Array2<F>) -> Array2<F> {
        w0 + &self.delta()
    }

    /// Given the gradient of the effective weight, gradients of A and B.
    pub fn grads(&self, d_eff: &Array2<F>) -> (Array2<F>, Array2<F>) {
        (d_eff.dot(&self.b.t()), self.a.t().dot(d_eff))
    }
}

/// Which parameters train. Pretraining moves everything; fine-tuning moves
/// adapters plus embeddings and normalization gains, freezing every base
/// projection and the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "variant")]
pub enum TrainScope {
    Full,
    Finetune(LoraVariant),
}

impl TrainScope {
    pub fn trainable(&self, name: &str) -> bool {
        match self {
            TrainScope::Full => true,
            TrainScope::Finetune(_) => {
                name.contains(".lora.") || name == "embed" || name.contains("norm")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_b_means_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ad = LoraAdapter::<f32>::init(8, 8, 2, &mut rng).unwrap();
        assert!(ad.delta().iter().all(|&v| v == 0.0));
        let w0 = Array2::from_shape_fn((8, 8), |(i, j)| (i * 8 + j) as f32);
        assert_eq!(ad.apply(&w0), w0);
    }

    #[test]
    fn variant_targets() {
        assert_eq!(LoraVariant::Ko.targets(), &[Proj::K, Proj::O]);
        assert_eq!(LoraVariant::Qkvo.targets().len(), 4);
        assert!(LoraVariant::parse("q_only").is_ok());
        assert!(LoraVariant::parse("kv").is_err());
    }

    #[test]
    fn finetune_scope_masks_base_weights() {
        let scope = TrainScope::Finetune(LoraVariant::Ko);
        assert!(scope.trainable("block0.attn.wk.lora.a"));
        assert!(scope.trainable("embed"));
        assert!(scope.trainable("block1.norm2.g"));
        assert!(scope.trainable("final_norm.g"));
        assert!(!scope.trainable("block0.attn.wq"));
        assert!(!scope.trainable("head"));
        assert!(TrainScope::Full.trainable("head"));
    }

    // With W_q full rank, any target product M = W_q Kᵀ is reachable by
    // moving K alone: Kᵀ = W_q⁻¹ M. Solved here by Gaussian elimination
    // with partial pivoting, independent of the training path.
    #[test]
    fn key_only_updates_span_all_score_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 8;
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        let wq = Array2::from_shape_fn((d, d), |_| normal.sample(&mut rng));
        let m = Array2::from_shape_fn((d, d), |_| normal.sample(&mut rng));

        // Solve wq · X = m column by column.
        let mut aug = Array2::zeros((d, 2 * d));
        aug.slice_mut(ndarray::s![.., ..d]).assign(&wq);
        aug.slice_mut(ndarray::s![.., d..]).assign(&m);
        for col in 0..d {
            let pivot = (col..d)
                .max_by(|&a, &b| {
                    aug[[a, col]]
                        .abs()
                        .partial_cmp(&aug[[b, col]].abs())
                        .unwrap()
                })
                .unwrap();
            if pivot != col {
                for j in 0..2 * d {
                    aug.swap([col, j], [pivot, j]);
                }
            }
            let p = aug[[col, col]];
            assert!(p.abs() > 1e-10, "wq not full rank");
            for r in 0..d {
                if r == col {
                    continue;
                }
                let f = aug[[r, col]] / p;
                for j in col..2 * d {
                    let sub = f * aug[[col, j]];
                    aug[[r, j]] -= sub;
                }
            }
        }
        let mut x = Array2::zeros((d, d));
        for r in 0..d {
            let p = aug[[r, r]];
            for j in 0..d {
                x[[r, j]] = aug[[r, d + j]] / p;
            }
        }
        let wk = x.t().to_owned(); // M = wq · wkᵀ
        let back = wq.dot(&wk.t());
        let worst = back
            .iter()
            .zip(m.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-6, "residual {worst}");
    }
}
