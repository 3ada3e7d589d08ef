//! Prediction mappings from logits to the probability simplex.
//!
//! The four mappings (softmax, sparsemax, alpha-entmax, rankmax) share the
//! shifted-thresholded structure: each assigns probability by pushing logits
//! through a threshold tau chosen so the output sums to one. Their closed-form
//! Jacobians, support sets, and order-preservation behavior are exposed here.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Probabilities below this are treated as exact zeros so support sets stay
/// well-defined.
pub const PROB_FLOOR: f64 = 1e-300;

/// Any |s_i - tau| below this raises the boundary-proximity flag on Jacobians.
pub const BOUNDARY_EPS: f64 = 1e-8;

/// A length-C vector of logits. C >= 2, all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    values: Vec<f64>,
}

impl ScoreVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::domain("score vector needs at least 2 classes"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("score vector has non-finite entries"));
        }
        Ok(ScoreVector { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// A point on the simplex: entries >= 0, summing to one within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector {
    values: Vec<f64>,
}

impl ProbabilityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::domain("probability vector has negative or NaN entries"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!(
                "probability vector sums to {sum}, not 1"
            )));
        }
        Ok(ProbabilityVector { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Active support set and threshold of a sparse mapping output.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportInfo {
    /// Indices with positive probability, ascending.
    pub support: Vec<usize>,
    /// Threshold tau of the shifted-thresholded form.
    pub threshold: f64,
}

impl SupportInfo {
    pub fn support_size(&self) -> usize {
        self.support.len()
    }
}

/// Which member of the softmax family is in play.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MappingKind {
    Softmax,
    Sparsemax,
    Entmax { alpha: f64 },
    Rankmax { true_class: usize },
}

impl MappingKind {
    pub fn validate(&self, c: usize) -> Result<()> {
        match *self {
            MappingKind::Entmax { alpha } => {
                if !(alpha > 1.0 && alpha <= 2.0) {
                    return Err(Error::domain("entmax requires 1 < alpha <= 2"));
                }
            }
            MappingKind::Rankmax { true_class } => {
                if true_class >= c {
                    return Err(Error::domain("rankmax true_class out of range"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Analytic spectral-norm bound of the mapping Jacobian (rankmax's bound
    /// m/S is state-dependent and not covered here).
    pub fn jacobian_norm_bound(&self) -> f64 {
        match self {
            MappingKind::Softmax => 0.5,
            MappingKind::Sparsemax | MappingKind::Entmax { .. } => 1.0,
            MappingKind::Rankmax { .. } => f64::INFINITY,
        }
    }
}

/// Dense C x C Jacobian of a prediction mapping, row-major.
#[derive(Debug, Clone)]
pub struct JacobianMatrix {
    entries: Vec<f64>,
    c: usize,
    pub mapping: MappingKind,
    /// True when some logit sits within [`BOUNDARY_EPS`] of the support
    /// threshold; the Jacobian is one-sided there.
    pub boundary_flag: bool,
}

impl JacobianMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, mapping: MappingKind) -> Self {
        let c = rows.len();
        let mut entries = Vec::with_capacity(c * c);
        for r in rows {
            assert_eq!(r.len(), c);
            entries.extend(r);
        }
        JacobianMatrix {
            entries,
            c,
            mapping,
            boundary_flag: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.c
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.c + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.c..(i + 1) * self.c]
    }

    /// y = J x
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.c {
            let row = self.row(i);
            y[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    /// y = J^T x
    pub fn matvec_t(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.c {
            let row = self.row(i);
            let xi = x[i];
            for (yj, a) in y.iter_mut().zip(row) {
                *yj += a * xi;
            }
        }
    }
}

pub fn log_sum_exp(s: &[f64]) -> f64 {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_raw(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    p
}

/// Softmax mapping p_i = exp(s_i) / sum_j exp(s_j), max-shift stabilized.
pub fn softmax_map(s: &ScoreVector) -> ProbabilityVector {
    ProbabilityVector {
        values: softmax_raw(s.values()),
    }
}

/// Sparsemax threshold by descending sort and cumulative-sum scan.
/// Returns (tau, support size). Ties in the sort break by ascending index.
pub(crate) fn sparsemax_tau(s: &[f64]) -> (f64, usize) {
    let c = s.len();
    let mut idx: Vec<usize> = (0..c).collect();
    // stable sort keyed on value descending keeps ascending-index tie order
    idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
    let mut cumsum = 0.0;
    let mut k_star = 0;
    let mut tau = 0.0;
    for (k, &i) in idx.iter().enumerate() {
        let z = s[i];
        cumsum += z;
        let k1 = (k + 1) as f64;
        if 1.0 + k1 * z > cumsum {
            k_star = k + 1;
            tau = (cumsum - 1.0) / k1;
        } else {
            break;
        }
    }
    (tau, k_star)
}

pub(crate) fn sparsemax_raw(s: &[f64]) -> (Vec<f64>, f64) {
    let (tau, _) = sparsemax_tau(s);
    let p: Vec<f64> = s
        .iter()
        .map(|&v| {
            let x = v - tau;
            if x > PROB_FLOOR {
                x
            } else {
                0.0
            }
        })
        .collect();
    (p, tau)
}

fn support_of(p: &[f64]) -> Vec<usize> {
    p.iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// Euclidean projection onto the simplex: p_i = max(s_i - tau, 0).
pub fn sparsemax_map(s: &ScoreVector) -> (ProbabilityVector, SupportInfo) {
    let (p, tau) = sparsemax_raw(s.values());
    let support = support_of(&p);
    (
        ProbabilityVector { values: p },
        SupportInfo {
            support,
            threshold: tau,
        },
    )
}

pub(crate) fn entmax_raw(s: &[f64], alpha: f64) -> (Vec<f64>, f64) {
    if (alpha - 2.0).abs() < 1e-14 {
        return sparsemax_raw(s);
    }
    let am1 = alpha - 1.0;
    let expo = 1.0 / am1;
    let max_s = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // At tau = max_s the sum is 0; at max_s - 1/(alpha-1) the top entry alone
    // reaches 1, so the root is bracketed.
    let mut lo = max_s - 1.0 / am1;
    let mut hi = max_s;
    let sum_at = |tau: f64| -> f64 {
        s.iter()
            .map(|&v| {
                let u = am1 * (v - tau);
                if u > 0.0 {
                    u.powf(expo)
                } else {
                    0.0
                }
            })
            .sum()
    };
    let mut tau = 0.5 * (lo + hi);
    for _ in 0..200 {
        tau = 0.5 * (lo + hi);
        let sum = sum_at(tau);
        if sum > 1.0 {
            lo = tau;
        } else {
            hi = tau;
        }
        if hi - lo <= f64::EPSILON * tau.abs().max(1.0) {
            break;
        }
    }
    let mut p: Vec<f64> = s
        .iter()
        .map(|&v| {
            let u = am1 * (v - tau);
            if u > 0.0 {
                let x = u.powf(expo);
                if x > PROB_FLOOR {
                    x
                } else {
                    0.0
                }
            } else {
                0.0
            }
        })
        .collect();
    // bisection leaves a tiny residual; renormalize so the simplex invariant
    // holds exactly
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    (p, tau)
}

/// Alpha-entmax: p_i = ((alpha-1)(s_i - tau))_+^{1/(alpha-1)}, tau by bisection.
pub fn entmax_map(s: &ScoreVector, alpha: f64) -> Result<(ProbabilityVector, SupportInfo)> {
    if !(alpha > 1.0 && alpha <= 2.0) {
        return Err(Error::domain("entmax requires 1 < alpha <= 2"));
    }
    let (p, tau) = entmax_raw(s.values(), alpha);
    let support = support_of(&p);
    Ok((
        ProbabilityVector { values: p },
        SupportInfo {
            support,
            threshold: tau,
        },
    ))
}

pub(crate) fn rankmax_raw(s: &[f64], y: usize) -> (Vec<f64>, f64) {
    let sy = s[y];
    let u: Vec<f64> = s.iter().map(|&v| (v - sy + 1.0).max(0.0)).collect();
    let z: f64 = u.iter().sum();
    let p = u.iter().map(|&v| v / z).collect();
    // shifted-thresholded form: p_i > 0 iff s_i > tau with tau = s_y - 1
    (p, sy - 1.0)
}

/// Rankmax in its simplest form: p_i = (s_i - s_y + 1)_+ / sum_j (s_j - s_y + 1)_+.
pub fn rankmax_map(s: &ScoreVector, y: usize) -> Result<(ProbabilityVector, SupportInfo)> {
    if y >= s.len() {
        return Err(Error::domain("rankmax class index out of range"));
    }
    let (p, tau) = rankmax_raw(s.values(), y);
    let support = support_of(&p);
    Ok((
        ProbabilityVector { values: p },
        SupportInfo {
            support,
            threshold: tau,
        },
    ))
}

/// Forward pass of any mapping.
pub fn apply_mapping(s: &ScoreVector, mapping: MappingKind) -> Result<ProbabilityVector> {
    mapping.validate(s.len())?;
    Ok(match mapping {
        MappingKind::Softmax => softmax_map(s),
        MappingKind::Sparsemax => sparsemax_map(s).0,
        MappingKind::Entmax { alpha } => entmax_map(s, alpha)?.0,
        MappingKind::Rankmax { true_class } => rankmax_map(s, true_class)?.0,
    })
}

/// Forward pass that also returns the support bookkeeping. Softmax has full
/// support and no finite threshold.
pub fn apply_mapping_with_support(
    s: &ScoreVector,
    mapping: MappingKind,
) -> Result<(ProbabilityVector, SupportInfo)> {
    mapping.validate(s.len())?;
    Ok(match mapping {
        MappingKind::Softmax => {
            let p = softmax_map(s);
            let support = (0..s.len()).collect();
            (
                p,
                SupportInfo {
                    support,
                    threshold: f64::NEG_INFINITY,
                },
            )
        }
        MappingKind::Sparsemax => sparsemax_map(s),
        MappingKind::Entmax { alpha } => entmax_map(s, alpha)?,
        MappingKind::Rankmax { true_class } => rankmax_map(s, true_class)?,
    })
}

/// Closed-form Jacobian of the mapping at s, using the support computed by the
/// forward map (one-sided at boundaries; `boundary_flag` reports proximity).
pub fn jacobian(s: &ScoreVector, mapping: MappingKind) -> Result<JacobianMatrix> {
    mapping.validate(s.len())?;
    let c = s.len();
    let sv = s.values();
    let mut entries = vec![0.0; c * c];
    let mut boundary = false;
    match mapping {
        MappingKind::Softmax => {
            let p = softmax_raw(sv);
            for i in 0..c {
                for j in 0..c {
                    let d = if i == j { p[i] } else { 0.0 };
                    entries[i * c + j] = d - p[i] * p[j];
                }
            }
        }
        MappingKind::Sparsemax => {
            let (p, tau) = sparsemax_raw(sv);
            let support = support_of(&p);
            let m = support.len() as f64;
            boundary = sv.iter().any(|&v| (v - tau).abs() < BOUNDARY_EPS);
            for &i in &support {
                for &j in &support {
                    let d = if i == j { 1.0 } else { 0.0 };
                    entries[i * c + j] = d - 1.0 / m;
                }
            }
        }
        MappingKind::Entmax { alpha } => {
            let (p, tau) = entmax_raw(sv, alpha);
            let support = support_of(&p);
            boundary = sv.iter().any(|&v| (v - tau).abs() < BOUNDARY_EPS);
            let a: Vec<f64> = support.iter().map(|&i| p[i].powf(2.0 - alpha)).collect();
            let sa: f64 = a.iter().sum();
            for (bi, &i) in support.iter().enumerate() {
                for (bj, &j) in support.iter().enumerate() {
                    let d = if i == j { a[bi] } else { 0.0 };
                    entries[i * c + j] = d - a[bi] * a[bj] / sa;
                }
            }
        }
        MappingKind::Rankmax { true_class } => {
            let sy = sv[true_class];
            let u: Vec<f64> = sv.iter().map(|&v| (v - sy + 1.0).max(0.0)).collect();
            let z: f64 = u.iter().sum();
            let p: Vec<f64> = u.iter().map(|&v| v / z).collect();
            let support = support_of(&u);
            let m = support.len() as f64;
            boundary = sv
                .iter()
                .any(|&v| (v - (sy - 1.0)).abs() < BOUNDARY_EPS);
            // J = (1/S) [ (I - p 1^T) - (1 - m p) e_y^T ] on the support block
            for &i in &support {
                for &j in &support {
                    let mut v = -p[i];
                    if i == j {
                        v += 1.0;
                    }
                    if j == true_class {
                        v -= 1.0 - m * p[i];
                    }
                    entries[i * c + j] = v / z;
                }
            }
        }
    }
    Ok(JacobianMatrix {
        entries,
        c,
        mapping,
        boundary_flag: boundary,
    })
}

/// Largest singular value of J by power iteration on J^T J.
///
/// Deterministic all-ones start, index-seeded perturbation fallback when the
/// start vector is orthogonal to the top eigenvector. Returns the estimate and
/// whether the 1e-10 tolerance was met within 1000 iterations.
pub fn spectral_norm(j: &JacobianMatrix) -> (f64, bool) {
    let c = j.dim();
    // start away from the ones direction, which is in the kernel for
    // centering-type Jacobians
    let mut v: Vec<f64> = (0..c).map(|i| 1.0 + (i as f64 + 1.0).sin()).collect();
    let n0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n0);
    let mut tmp = vec![0.0; c];
    let mut next = vec![0.0; c];
    let mut sigma = 0.0;
    let mut converged = false;
    let mut perturbed = false;
    for it in 0..1000 {
        j.matvec(&v, &mut tmp);
        j.matvec_t(&tmp, &mut next);
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-300 {
            if !perturbed {
                // start vector lies in the kernel; nudge each coordinate
                perturbed = true;
                for (i, x) in v.iter_mut().enumerate() {
                    *x += 1e-3 * ((i as f64 + 1.0).sin());
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= n);
                continue;
            }
            return (0.0, true);
        }
        let new_sigma = norm.sqrt();
        for (a, b) in v.iter_mut().zip(&next) {
            *a = b / norm;
        }
        if it > 0 && (new_sigma - sigma).abs() <= 1e-10 * new_sigma.max(1.0) {
            sigma = new_sigma;
            converged = true;
            break;
        }
        sigma = new_sigma;
    }
    (sigma, converged)
}

/// Verdict of the randomized order-preservation probe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum OrderVerdict {
    /// No inversion and no strict-tie witness found.
    SopConsistent,
    /// Strict-tie witness found, no inversion: weakly order preserving.
    WopWitnessed,
    /// An inversion s_i > s_j with p_i < p_j was found.
    InversionFound,
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderReport {
    pub mapping: MappingKind,
    pub trials: usize,
    pub verdict: OrderVerdict,
    pub tie_witness: Option<Vec<f64>>,
    pub inversion_witness: Option<Vec<f64>>,
}

/// Samples random score vectors (standard normal, scales {0.1, 1, 10}) and
/// searches for order inversions and strict-tie witnesses.
pub fn classify_order_preservation(
    mapping: MappingKind,
    c: usize,
    trials: usize,
    seed: u64,
) -> Result<OrderReport> {
    mapping.validate(c)?;
    if trials < 1 {
        return Err(Error::domain("trials must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales = [0.1, 1.0, 10.0];
    let mut tie_witness = None;
    let mut inversion_witness = None;
    for t in 0..trials {
        let scale = scales[t % scales.len()];
        let raw: Vec<f64> = (0..c)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x * scale
            })
            .collect();
        let s = ScoreVector::new(raw.clone())?;
        let mapping_t = match mapping {
            MappingKind::Rankmax { .. } => MappingKind::Rankmax {
                true_class: rng.gen_range(0..c),
            },
            m => m,
        };
        let p = apply_mapping(&s, mapping_t)?;
        let pv = p.values();
        for i in 0..c {
            for j in 0..c {
                if i == j {
                    continue;
                }
                if raw[i] > raw[j] + 1e-12 && pv[i] < pv[j] - 1e-12 && inversion_witness.is_none() {
                    inversion_witness = Some(raw.clone());
                }
                // exact equality only: sparse maps produce genuine ties
                // (typically both zero), while softmax tail probabilities
                // merely get close
                if raw[i] > raw[j] + 1e-6 && pv[i] == pv[j] && tie_witness.is_none() {
                    tie_witness = Some(raw.clone());
                }
            }
        }
        if tie_witness.is_some() && inversion_witness.is_some() {
            break;
        }
    }
    let verdict = if inversion_witness.is_some() {
        OrderVerdict::InversionFound
    } else if tie_witness.is_some() {
        OrderVerdict::WopWitnessed
    } else {
        OrderVerdict::SopConsistent
    };
    Ok(OrderReport {
        mapping,
        trials,
        verdict,
        tie_witness,
        inversion_witness,
    })
}
