//! Rotary position encodings and their long-context variants.
//!
//! Four kinds share one rotation kernel and differ only in the effective
//! position and base they feed it:
//!
//! ```text
//! rope     angle = m · base^(-2i/d)
//! pi       angle = (m/λ) · base^(-2i/d)
//! ntk      angle = m · base'^(-2i/d),          base' = base · scale^(d/(d-2))
//! crd_ntk  angle = ((m + randomp) mod max) · base'^(-2i/d)
//! ```
//!
//! The rotation uses the sign pattern
//! `y_{2i} = x_{2i} cos + x_{2i+1} sin`, `y_{2i+1} = x_{2i+1} cos - x_{2i} sin`,
//! which preserves the relative-shift identity
//! `<rot(q,m), rot(k,n)> = <rot(q,m+s), rot(k,n+s)>`.
//!
//! Angles are always computed in f64 and cast afterwards; at large positions
//! `m·θ` loses too many bits in f32 to keep the identity within tolerance.

use ndarray::{Array2, Array4, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MsError, Result};
use crate::num::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosKind {
    Rope,
    Pi,
    Ntk,
    CrdNtk,
}

/// Dynamic growth of the NTK scale during training: the scale starts at
/// `initial_scale` and is multiplied by `factor` after every
/// `tokens_per_step` training tokens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Growth {
    pub initial_scale: f64,
    pub factor: f64,
    pub tokens_per_step: u64,
}

impl Default for Growth {
    fn default() -> Self {
        Growth {
            initial_scale: 1.0,
            factor: 2.0,
            tokens_per_step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosEncoding {
    pub kind: PosKind,
    /// Rotary base before any NTK rescaling.
    #[serde(default = "default_base")]
    pub base: f64,
    /// Per-head dimension the rotation acts on; must be even.
    pub d: usize,
    /// Position interpolation scale λ ≥ 1 (pi kind only).
    #[serde(default = "default_unit")]
    pub lambda: f64,
    /// NTK scale ≥ 1 (ntk and crd_ntk kinds).
    #[serde(default = "default_unit")]
    pub ntk_scale: f64,
    /// Cyclic shift added to every position before the modulus (crd_ntk).
    #[serde(default)]
    pub randomp: u64,
    /// Cyclic modulus (crd_ntk); every effective position lies in [0, max).
    #[serde(default = "default_max")]
    pub max: u64,
    /// Optional schedule that raises `ntk_scale` as training consumes tokens.
    #[serde(default)]
    pub growth: Option<Growth>,
}

fn default_base() -> f64 {
    10000.0
}

fn default_unit() -> f64 {
    1.0
}

fn default_max() -> u64 {
    u64::MAX
}

impl PosEncoding {
    pub fn rope(d: usize) -> Self {
        PosEncoding {
            kind: PosKind::Rope,
            base: 10000.0,
            d,
            lambda: 1.0,
            ntk_scale: 1.0,
            randomp: 0,
            max: u64::MAX,
            growth: None,
        }
    }

    pub fn pi(d: usize, lambda: f64) -> Self {
        PosEncoding {
            kind: PosKind::Pi,
            lambda,
            ..Self::rope(d)
        }
    }

    pub fn ntk(d: usize, scale: f64) -> Self {
        PosEncoding {
            kind: PosKind::Ntk,
            ntk_scale: scale,
            ..Self::rope(d)
        }
    }

    pub fn crd_ntk(d: usize, scale: f64, randomp: u64, max: u64) -> Self {
        PosEncoding {
            kind: PosKind::CrdNtk,
            ntk_scale: scale,
            randomp,
            max,
            ..Self::rope(d)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 2 != 0 {
            return Err(MsError::InvalidConfig(format!(
                "rotary dim must be even and nonzero, got {}",
                self.d
            )));
        }
        if !(self.base > 1.0) {
            return Err(MsError::InvalidConfig(format!(
                "rotary base must exceed 1, got {}",
                self.base
            )));
        }
        if self.lambda < 1.0 {
            return Err(MsError::InvalidConfig(format!(
                "interpolation scale must be >= 1, got {}",
                self.lambda
            )));
        }
        if self.ntk_scale < 1.0 {
            return Err(MsError::InvalidConfig(format!(
                "ntk scale must be >= 1, got {}",
                self.ntk_scale
            )));
        }
        if matches!(self.kind, PosKind::Ntk | PosKind::CrdNtk) && self.d <= 2 {
            return Err(MsError::InvalidConfig(
                "ntk rescaling needs d > 2".into(),
            ));
        }
        if self.kind == PosKind::CrdNtk && self.max == 0 {
            return Err(MsError::InvalidConfig(
                "cyclic modulus must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The base actually used for angle frequencies: rescaled for the NTK
    /// kinds, unchanged otherwise.
    pub fn effective_base(&self) -> Result<f64> {
        match self.kind {
            PosKind::Rope | PosKind::Pi => Ok(self.base),
            PosKind::Ntk | PosKind::CrdNtk => ntk_base(self),
        }
    }

    /// Frequencies θ_i = base'^(-2i/d) for i in 0..d/2, strictly decreasing.
    pub fn theta(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let base = self.effective_base()?;
        let d = self.d as f64;
        Ok((0..self.d / 2)
            .map(|i| base.powf(-2.0 * i as f64 / d))
            .collect())
    }

    /// Returns a copy with the NTK scale replaced, for growth schedules.
    pub fn with_scale(&self, scale: f64) -> Self {
        PosEncoding {
            ntk_scale: scale,
            ..self.clone()
        }
    }
}

/// base' = base · scale^(d/(d-2)). Shared by the ntk and crd_ntk kinds.
///
/// The exponent d/(d-2) is not representable exactly, and the rounding error
/// alone shifts the naive `powf` result by several ulp at large scales. The
/// dropped remainder is recovered with a fused multiply-add and folded back
/// in through a first-order correction, keeping the result within 1 ulp of
/// the exact value.
pub fn ntk_base(enc: &PosEncoding) -> Result<f64> {
    if enc.d <= 2 {
        return Err(MsError::InvalidConfig(
            "ntk rescaling needs d > 2".into(),
        ));
    }
    let d = enc.d as f64;
    let dm2 = d - 2.0;
    let y_hi = d / dm2;
    let y_lo = f64::mul_add(-y_hi, dm2, d) / dm2;
    let corr = 1.0 + y_lo * enc.ntk_scale.ln();
    Ok(enc.base * enc.ntk_scale.powf(y_hi) * corr)
}

/// Position fed to the rotation kernel for a token at original position `m`.
pub fn effective_position(m: i64, enc: &PosEncoding) -> f64 {
    debug_assert!(m >= 0);
    match enc.kind {
        PosKind::Rope | PosKind::Ntk => m as f64,
        PosKind::Pi => m as f64 / enc.lambda,
        PosKind::CrdNtk => ((m as u64).wrapping_add(enc.randomp) % enc.max) as f64,
    }
}

/// scale = initial_scale · factor^⌊tokens_seen / tokens_per_step⌋.
pub fn growth_schedule(tokens_seen: u64, growth: &Growth) -> Result<f64> {
    if growth.tokens_per_step == 0 {
        return Err(MsError::InvalidConfig(
            "growth tokens_per_step must be positive".into(),
        ));
    }
    let steps = (tokens_seen / growth.tokens_per_step) as i32;
    Ok(growth.initial_scale * growth.factor.powi(steps))
}

/// Uniform cyclic shift in [0, max_start), drawn once per training sequence.
/// Evaluation always uses randomp = 0.
pub fn sample_randomp<R: Rng>(rng: &mut R, max_start: u64) -> u64 {
    debug_assert!(max_start >= 1);
    if max_start <= 1 {
        0
    } else {
        rng.gen_range(0..max_start)
    }
}

/// Rotates one (n, d) slab in place. `pos[t]` is the original token position;
/// negative positions mark padded or sentinel slots and are left untouched.
pub fn rope_apply<F: Real>(
    mut x: ArrayViewMut2<'_, F>,
    pos: &[i64],
    enc: &PosEncoding,
) -> Result<()> {
    enc.validate()?;
    let (n, d) = x.dim();
    if d != enc.d {
        return Err(MsError::ShapeMismatch(format!(
            "rotary dim {} does not match input dim {}",
            enc.d, d
        )));
    }
    if pos.len() != n {
        return Err(MsError::ShapeMismatch(format!(
            "{} positions for {} tokens",
            pos.len(),
            n
        )));
    }
    let theta = enc.theta()?;
    for (t, &m) in pos.iter().enumerate() {
        if m < 0 {
            continue;
        }
        let eff = effective_position(m, enc);
        let mut row = x.row_mut(t);
        for (i, &th) in theta.iter().enumerate() {
            let angle = eff * th;
            let c = F::from_f64(angle.cos());
            let s = F::from_f64(angle.sin());
            let a = row[2 * i];
            let b = row[2 * i + 1];
            row[2 * i] = a * c + b * s;
            row[2 * i + 1] = b * c - a * s;
        }
    }
    Ok(())
}

/// Rotates a (b, h, n, d) tensor in place using per-sequence position ids.
pub fn rope_apply4<F: Real>(
    x: &mut Array4<F>,
    ids: &Array2<i64>,
    enc: &PosEncoding,
) -> Result<()> {
    let (b, h, n, _) = x.dim();
    if ids.dim() != (b, n) {
        return Err(MsError::ShapeMismatch(format!(
            "position ids {:?} for batch ({}, {})",
            ids.dim(),
            b,
            n
        )));
    }
    for bi in 0..b {
        let pos: Vec<i64> = ids.row(bi).to_vec();
        let mut slab = x.index_axis_mut(ndarray::Axis(0), bi);
        for hi in 0..h {
            rope_apply(slab.index_axis_mut(ndarray::Axis(0), hi), &pos, enc)?;
        }
    }
    Ok(())
}

/// Inverse of [`rope_apply`]: rotates by the negated angles. Used by the
/// backward pass to pull gradients back through the encoding.
pub fn rope_unapply<F: Real>(
    mut x: ArrayViewMut2<'_, F>,
    pos: &[i64],
    enc: &PosEncoding,
) -> Result<()> {
    enc.validate()?;
    let (n, d) = x.dim();
    if d != enc.d || pos.len() != n {
        return Err(MsError::ShapeMismatch(
            "inverse rotation shape mismatch".into(),
        ));
    }
    let theta = enc.theta()?;
    for (t, &m) in pos.iter().enumerate() {
        if m < 0 {
            continue;
        }
        let eff = effective_position(m, enc);
        let mut row = x.row_mut(t);
        for (i, &th) in theta.iter().enumerate() {
            let angle = eff * th;
            let c = F::from_f64(angle.cos());
            let s = F::from_f64(angle.sin());
            let a = row[2 * i];
            let b = row[2 * i + 1];
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = b * c + a * s;
        }
    }
    Ok(())
}
