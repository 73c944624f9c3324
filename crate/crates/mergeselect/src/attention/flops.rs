use serde::Serialize;

use crate::error::{MsError, Result};

use super::MsConfig;

/// Closed-form cost model. With n a multiple of lcm(s_q·merges, s_k) these
/// equal the instrumented [`super::AttnStats`] counters exactly, because
/// every kernel matmul runs at full padded width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FlopAccount {
    /// Representative scoring: (n/s_q)·(n/s_k)·d multiply-adds.
    pub selection_mas: u64,
    /// Gathered attention: 2·n·(topn·s_k)·d multiply-adds.
    pub attention_mas: u64,
    /// Gathered K elements held live: (n/(s_q·merges))·topn·s_k·d.
    pub gathered_elems: u64,
}

pub fn flop_account(n: usize, d: usize, cfg: &MsConfig) -> Result<FlopAccount> {
    cfg.validate(n)?;
    if n % (cfg.s_q * cfg.merges) != 0 || n % cfg.s_k != 0 {
        return Err(MsError::InvalidConfig(format!(
            "closed-form account needs n divisible by s_q*merges and s_k, got {n}"
        )));
    }
    let (n, d) = (n as u64, d as u64);
    let (s_q, s_k) = (cfg.s_q as u64, cfg.s_k as u64);
    let (topn, merges) = (cfg.topn as u64, cfg.merges as u64);
    Ok(FlopAccount {
        selection_mas: (n / s_q) * (n / s_k) * d,
        attention_mas: 2 * n * topn * s_k * d,
        gathered_elems: n / (s_q * merges) * topn * s_k * d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> MsConfig {
        MsConfig {
            s_q: 16,
            s_k: 16,
            topk: 16,
            merges: 16,
            topn: 64,
            force_local: true,
            permute: false,
            ..MsConfig::default()
        }
    }

    #[test]
    fn attention_is_linear_in_n() {
        let a = flop_account(4096, 64, &cfg()).unwrap();
        let b = flop_account(8192, 64, &cfg()).unwrap();
        assert_eq!(b.attention_mas, 2 * a.attention_mas);
    }

    #[test]
    fn selection_is_quadratic_in_n() {
        let a = flop_account(4096, 64, &cfg()).unwrap();
        let b = flop_account(8192, 64, &cfg()).unwrap();
        assert_eq!(b.selection_mas, 4 * a.selection_mas);
    }

    #[test]
    fn reference_values_at_16k() {
        let f = flop_account(16384, 64, &cfg()).unwrap();
        assert_eq!(f.selection_mas, 1024 * 1024 * 64);
        assert_eq!(f.attention_mas, 2 * 16384 * 64 * 16 * 64);
        assert_eq!(f.gathered_elems, 64 * 64 * 16 * 64);
    }
}
