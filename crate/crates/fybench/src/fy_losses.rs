//! Fenchel-Young loss values and gradients for the exact mappings.
//!
//! Every loss here follows the same recipe: L(y, s) = Omega*(s) + Omega(y)
//! - <s, y>, where Omega*(s) = <s, p_hat> - Omega(p_hat) and p_hat is the
//! matching forward map. The gradient is always the residual p_hat(s) - y.

use crate::error::{Error, Result};
use crate::simplex_maps::{
    log_sum_exp, rankmax_raw, softmax_raw, ScoreVector,
};

/// Binary relevance vector with at least one positive entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVector {
    values: Vec<u8>,
    relevant: usize,
}

impl LabelVector {
    pub fn new(values: Vec<u8>) -> Result<Self> {
        if values.iter().any(|&v| v > 1) {
            return Err(Error::domain("label entries must be 0 or 1"));
        }
        let relevant = values.iter().filter(|&&v| v == 1).count();
        if relevant == 0 {
            return Err(Error::domain("label vector needs at least one positive"));
        }
        Ok(LabelVector { values, relevant })
    }

    pub fn one_hot(c: usize, idx: usize) -> Result<Self> {
        if idx >= c {
            return Err(Error::domain("one-hot index out of range"));
        }
        let mut v = vec![0u8; c];
        v[idx] = 1;
        LabelVector::new(v)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn relevant_count(&self) -> usize {
        self.relevant
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn is_positive(&self, i: usize) -> bool {
        self.values[i] == 1
    }

    /// y / |y|, the normalized ground-truth distribution.
    pub fn normalized(&self) -> Vec<f64> {
        let w = 1.0 / self.relevant as f64;
        self.values
            .iter()
            .map(|&v| if v == 1 { w } else { 0.0 })
            .collect()
    }
}

/// Regularizer choice; each pairs with exactly one forward mapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegularizerKind {
    /// Negative Shannon entropy; pairs with softmax.
    ShannonNeg,
    /// Half squared L2 norm; pairs with sparsemax.
    HalfSquaredL2,
    /// Negative Tsallis alpha-entropy; pairs with entmax(alpha), 1 < alpha <= 2.
    TsallisNeg { alpha: f64 },
}

impl RegularizerKind {
    /// Omega(p) on the simplex.
    pub fn omega(&self, p: &[f64]) -> f64 {
        match *self {
            RegularizerKind::ShannonNeg => p
                .iter()
                .map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 })
                .sum(),
            RegularizerKind::HalfSquaredL2 => 0.5 * p.iter().map(|&v| v * v).sum::<f64>(),
            RegularizerKind::TsallisNeg { alpha } => {
                let s: f64 = p.iter().map(|&v| v.powf(alpha)).sum();
                (s - 1.0) / (alpha * (alpha - 1.0))
            }
        }
    }

    fn predict(&self, s: &ScoreVector) -> Result<Vec<f64>> {
        Ok(match *self {
            RegularizerKind::ShannonNeg => softmax_raw(s.values()),
            RegularizerKind::HalfSquaredL2 => crate::simplex_maps::sparsemax_map(s).0.into_values(),
            RegularizerKind::TsallisNeg { alpha } => {
                crate::simplex_maps::entmax_map(s, alpha)?.0.into_values()
            }
        })
    }
}

/// A loss value together with its gradient in s.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Generic Fenchel-Young loss: value Omega*(s) + Omega(y/|y|) - <s, y/|y|>,
/// gradient p_hat(s) - y/|y|.
pub fn fy_loss(s: &ScoreVector, y: &LabelVector, reg: RegularizerKind) -> Result<LossEval> {
    if y.len() != s.len() {
        return Err(Error::usage("score/label dimension mismatch"));
    }
    if let RegularizerKind::TsallisNeg { alpha } = reg {
        if !(alpha > 1.0 && alpha <= 2.0) {
            return Err(Error::domain("Tsallis alpha must lie in (1, 2]"));
        }
    }
    let p = reg.predict(s)?;
    let y_norm = y.normalized();
    let sv = s.values();
    let conj = dot(sv, &p) - reg.omega(&p);
    let value = conj + reg.omega(&y_norm) - dot(sv, &y_norm);
    let gradient = p.iter().zip(&y_norm).map(|(a, b)| a - b).collect();
    Ok(LossEval { value, gradient })
}

/// Multi-positive softmax cross-entropy: the sum over positives of the
/// single-positive loss. Equals |y| times the normalized F-Y loss up to the
/// additive constant |y| * (Omega(y/|y|) difference); its gradient is
/// |y| * p_hat(s) - y.
pub fn softmax_loss(s: &ScoreVector, y: &LabelVector) -> Result<LossEval> {
    if y.len() != s.len() {
        return Err(Error::usage("score/label dimension mismatch"));
    }
    let sv = s.values();
    let lse = log_sum_exp(sv);
    let mut value = 0.0;
    for (i, &yi) in y.values().iter().enumerate() {
        if yi == 1 {
            value += lse - sv[i];
        }
    }
    let p = softmax_raw(sv);
    let ny = y.relevant_count() as f64;
    let gradient = p
        .iter()
        .zip(y.values())
        .map(|(&pi, &yi)| ny * pi - yi as f64)
        .collect();
    Ok(LossEval { value, gradient })
}

/// Rankmax gradient p_rm(s; y) - e_y, with the residual-energy proxy
/// 0.5 * ||p_rm - e_y||^2 as the reported value.
pub fn rankmax_grad(s: &ScoreVector, y: usize) -> Result<LossEval> {
    if y >= s.len() {
        return Err(Error::domain("rankmax class index out of range"));
    }
    let (p, _) = rankmax_raw(s.values(), y);
    let gradient: Vec<f64> = p
        .iter()
        .enumerate()
        .map(|(i, &pi)| pi - if i == y { 1.0 } else { 0.0 })
        .collect();
    let value = 0.5 * gradient.iter().map(|g| g * g).sum::<f64>();
    Ok(LossEval { value, gradient })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
