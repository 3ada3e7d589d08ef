//! Divergence primitives and the second-order Delta-expansion bias/variance
//! calculators for each log-partition surrogate, with Monte-Carlo empirical
//! counterparts.

use crate::approx::{draw_stream, HuffmanTree, ProposalDist};
use crate::error::{Error, Result};
use crate::simplex_maps::{log_sum_exp, softmax_map, ProbabilityVector, ScoreVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// chi^2(P || Q) = sum_j (P_j - Q_j)^2 / Q_j. Requires Q_j > 0 wherever
/// P_j > 0.
pub fn chi2(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<f64> {
    let (pv, qv) = (p.values(), q.values());
    if pv.len() != qv.len() {
        return Err(Error::usage("distribution dimension mismatch"));
    }
    let mut acc = 0.0;
    for (&pi, &qi) in pv.iter().zip(qv) {
        if qi <= 0.0 {
            if pi > 0.0 {
                return Err(Error::domain("chi2 support violation: P > 0 where Q = 0"));
            }
            continue;
        }
        let d = pi - qi;
        acc += d * d / qi;
    }
    Ok(acc)
}

/// KL(P || Q) with 0 log 0 = 0. Support violations return +infinity rather
/// than an error so callers can flag them.
pub fn kl(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<f64> {
    let (pv, qv) = (p.values(), q.values());
    if pv.len() != qv.len() {
        return Err(Error::usage("distribution dimension mismatch"));
    }
    let mut acc = 0.0;
    for (&pi, &qi) in pv.iter().zip(qv) {
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Ok(f64::INFINITY);
        }
        acc += pi * (pi / qi).ln();
    }
    Ok(acc.max(0.0))
}

/// Skewed Jensen-Shannon divergence with mixture M = tau P + (1 - tau) Q:
/// JS_tau(P||Q) = tau KL(P||M) + (1 - tau) KL(Q||M).
pub fn js_tau(p: &ProbabilityVector, q: &ProbabilityVector, tau: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::domain("tau must lie in [0, 1]"));
    }
    let (pv, qv) = (p.values(), q.values());
    if pv.len() != qv.len() {
        return Err(Error::usage("distribution dimension mismatch"));
    }
    let m: Vec<f64> = pv
        .iter()
        .zip(qv)
        .map(|(&pi, &qi)| tau * pi + (1.0 - tau) * qi)
        .collect();
    let m = ProbabilityVector::new(m)?;
    Ok(tau * kl(p, &m)? + (1.0 - tau) * kl(q, &m)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    SsmSimple,
    Ssm,
    Nce,
    Hsm,
    Rg,
}

/// Closed-form second-order bias/variance cells for one surrogate at one
/// (s, y, Q, k) point, with every intermediate quantity exposed in `aux`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaReport {
    pub scheme: Scheme,
    pub bias_asymptotic: f64,
    pub bias_curvature: f64,
    pub variance: f64,
    pub k: usize,
    pub aux: BTreeMap<String, f64>,
}

/// Monte-Carlo mean/variance of a surrogate's stochastic conjugate term
/// against the exact log-sum-exp reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmpiricalReport {
    pub mean_conjugate: f64,
    pub bias_hat: f64,
    pub variance_hat: f64,
    pub trials: usize,
    pub std_error: f64,
}

fn softmax_dist(s: &ScoreVector) -> ProbabilityVector {
    softmax_map(s)
}

fn proposal_vector(q: &ProposalDist, c: usize) -> Result<ProbabilityVector> {
    ProbabilityVector::new(q.probabilities(c)?)
}

pub fn delta_report(
    scheme: Scheme,
    s: &ScoreVector,
    y: usize,
    q: &ProposalDist,
    k: usize,
    tree: Option<&HuffmanTree>,
    node_logits: Option<&[f64]>,
) -> Result<DeltaReport> {
    if y >= s.len() {
        return Err(Error::domain("class index out of range"));
    }
    if k < 1 {
        return Err(Error::domain("need k >= 1"));
    }
    let sv = s.values();
    let c = sv.len();
    let lse = log_sum_exp(sv);
    let mut aux = BTreeMap::new();
    let (bias_asymptotic, bias_curvature, variance) = match scheme {
        Scheme::SsmSimple => {
            let qv = q.probabilities(c)?;
            let mu: f64 = qv.iter().zip(sv).map(|(&qi, &si)| qi * si.exp()).sum();
            let ex2: f64 = qv
                .iter()
                .zip(sv)
                .map(|(&qi, &si)| qi * (2.0 * si).exp())
                .sum();
            let sigma2 = (ex2 - mu * mu).max(0.0);
            let omega_hat = sv[y].exp() + k as f64 * mu;
            aux.insert("mu_x".into(), mu);
            aux.insert("sigma2_x".into(), sigma2);
            aux.insert("omega_hat".into(), omega_hat);
            let kf = k as f64;
            (
                omega_hat.ln() - lse,
                -(kf * sigma2) / (2.0 * omega_hat * omega_hat),
                kf * sigma2 / (omega_hat * omega_hat),
            )
        }
        Scheme::Ssm => {
            let ps = softmax_dist(s);
            let x2 = chi2(&ps, &proposal_vector(q, c)?)?;
            aux.insert("chi2".into(), x2);
            let kf = k as f64;
            (0.0, -x2 / (2.0 * kf), x2 / kf)
        }
        Scheme::Nce => {
            let ps = softmax_dist(s);
            let qp = proposal_vector(q, c)?;
            let x2 = chi2(&ps, &qp)?;
            let kf = k as f64;
            let tau = 1.0 / (1.0 + kf);
            let js = js_tau(&ps, &qp, tau)?;
            aux.insert("chi2".into(), x2);
            aux.insert("js_tau".into(), js);
            ((1.0 + kf) * js, 0.0, kf / ((1.0 + kf) * (1.0 + kf)) * x2)
        }
        Scheme::Hsm => {
            let tree = tree.ok_or_else(|| Error::usage("HSM needs a tree"))?;
            let logits = node_logits.ok_or_else(|| Error::usage("HSM needs node logits"))?;
            if tree.num_classes() != c {
                return Err(Error::usage("tree class count mismatch"));
            }
            let ps = softmax_dist(s);
            let p_hsm = ProbabilityVector::new(tree.distribution(logits))?;
            let d = kl(&ps, &p_hsm)?;
            aux.insert("kl".into(), d);
            (d, 0.0, 0.0)
        }
        Scheme::Rg => {
            let z = crate::approx::rg_partition(s);
            aux.insert("rg_partition".into(), z);
            (z - lse, 0.0, 0.0)
        }
    };
    Ok(DeltaReport {
        scheme,
        bias_asymptotic,
        bias_curvature,
        variance,
        k,
        aux,
    })
}

pub fn empirical_report(
    scheme: Scheme,
    s: &ScoreVector,
    y: usize,
    q: &ProposalDist,
    k: usize,
    trials: usize,
    seed: u64,
    tree: Option<&HuffmanTree>,
    node_logits: Option<&[f64]>,
) -> Result<EmpiricalReport> {
    if trials < 100 {
        return Err(Error::domain("need trials >= 100"));
    }
    if y >= s.len() {
        return Err(Error::domain("class index out of range"));
    }
    let sv = s.values();
    let c = sv.len();
    let lse = log_sum_exp(sv);

    // Deterministic schemes: one exact evaluation, zero variance.
    match scheme {
        Scheme::Hsm => {
            let tree = tree.ok_or_else(|| Error::usage("HSM needs a tree"))?;
            let logits = node_logits.ok_or_else(|| Error::usage("HSM needs node logits"))?;
            let ps = softmax_dist(s);
            // conjugate under the tree factorization: E_{y~P_s}[s_y - log P_HSM(y)]
            let mean: f64 = ps
                .values()
                .iter()
                .enumerate()
                .map(|(j, &pj)| {
                    if pj == 0.0 {
                        0.0
                    } else {
                        pj * (sv[j] - tree.class_probability(logits, j).ln())
                    }
                })
                .sum();
            return Ok(EmpiricalReport {
                mean_conjugate: mean,
                bias_hat: mean - lse,
                variance_hat: 0.0,
                trials,
                std_error: 0.0,
            });
        }
        Scheme::Rg => {
            let z = crate::approx::rg_partition(s);
            return Ok(EmpiricalReport {
                mean_conjugate: z,
                bias_hat: z - lse,
                variance_hat: 0.0,
                trials,
                std_error: 0.0,
            });
        }
        _ => {}
    }

    let qv = q.probabilities(c)?;
    let ps: Vec<f64> = sv.iter().map(|&si| (si - lse).exp()).collect();
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for trial in 0..trials {
        let mut rng = draw_stream(seed, trial as u64);
        let draw = q.sample(c, k, &mut rng, None)?;
        let x = match scheme {
            // log of the uncorrected restricted partition
            Scheme::SsmSimple => {
                let mut inner = sv[y].exp();
                for &j in &draw.negatives {
                    inner += sv[j].exp();
                }
                inner.ln()
            }
            // log of the importance-weighted partition estimator
            Scheme::Ssm => {
                let mean_w: f64 = draw
                    .negatives
                    .iter()
                    .map(|&j| sv[j].exp() / qv[j])
                    .sum::<f64>()
                    / k as f64;
                mean_w.ln()
            }
            // stochastic negative-sample part of the NCE objective under
            // self-normalized scores: sum_j log(1 + t_j / k), t = P_s / Q
            Scheme::Nce => draw
                .negatives
                .iter()
                .map(|&j| (ps[j] / qv[j] / k as f64).ln_1p())
                .sum(),
            Scheme::Hsm | Scheme::Rg => unreachable!(),
        };
        sum += x;
        sumsq += x * x;
    }
    let n = trials as f64;
    let mean = sum / n;
    let variance_hat = ((sumsq - sum * sum / n) / (n - 1.0)).max(0.0);
    Ok(EmpiricalReport {
        mean_conjugate: mean,
        bias_hat: mean - lse,
        variance_hat,
        trials,
        std_error: (variance_hat / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::build_huffman;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn pv(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    fn sv(v: &[f64]) -> ScoreVector {
        ScoreVector::new(v.to_vec()).unwrap()
    }

    fn random_dist(rng: &mut impl Rng, c: usize) -> ProbabilityVector {
        let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
        let z: f64 = raw.iter().sum();
        pv(&raw.iter().map(|v| v / z).collect::<Vec<_>>())
    }

    #[test]
    fn chi2_basics() {
        let p = pv(&[0.5, 0.5]);
        assert_abs_diff_eq!(chi2(&p, &p).unwrap(), 0.0);
        let point = pv(&[1.0, 0.0]);
        assert_abs_diff_eq!(chi2(&point, &p).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn chi2_moment_identity() {
        let mut rng = draw_stream(11, 0);
        for _ in 0..50 {
            let p = random_dist(&mut rng, 6);
            let q = random_dist(&mut rng, 6);
            let direct = chi2(&p, &q).unwrap();
            let moment: f64 = p
                .values()
                .iter()
                .zip(q.values())
                .map(|(&pi, &qi)| qi * (pi / qi) * (pi / qi))
                .sum::<f64>()
                - 1.0;
            assert_abs_diff_eq!(direct, moment, epsilon = 1e-12);
        }
    }

    #[test]
    fn chi2_support_violation() {
        let p = pv(&[0.5, 0.5]);
        let q = pv(&[1.0, 0.0]);
        assert!(chi2(&p, &q).is_err());
    }

    #[test]
    fn kl_basics() {
        let p = pv(&[0.3, 0.7]);
        assert_abs_diff_eq!(kl(&p, &p).unwrap(), 0.0);
        let q = pv(&[1.0, 0.0]);
        assert!(kl(&p, &q).unwrap().is_infinite());
        // 0 log 0 = 0: P with a zero against full-support Q is finite
        let sparse = pv(&[1.0, 0.0]);
        let u = pv(&[0.5, 0.5]);
        assert_abs_diff_eq!(kl(&sparse, &u).unwrap(), 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn js_half_is_classical_jensen_shannon() {
        let mut rng = draw_stream(5, 0);
        for _ in 0..20 {
            let p = random_dist(&mut rng, 5);
            let q = random_dist(&mut rng, 5);
            let js = js_tau(&p, &q, 0.5).unwrap();
            let m: Vec<f64> = p
                .values()
                .iter()
                .zip(q.values())
                .map(|(&a, &b)| 0.5 * (a + b))
                .collect();
            let m = pv(&m);
            let classical = 0.5 * kl(&p, &m).unwrap() + 0.5 * kl(&q, &m).unwrap();
            assert_abs_diff_eq!(js, classical, epsilon = 1e-12);
            assert!(js >= 0.0);
        }
    }

    #[test]
    fn js_mixture_identity() {
        let mut rng = draw_stream(6, 0);
        for &k in &[1usize, 5, 20] {
            let p = random_dist(&mut rng, 7);
            let q = random_dist(&mut rng, 7);
            let kf = k as f64;
            let tau = 1.0 / (1.0 + kf);
            let lhs = (1.0 + kf) * js_tau(&p, &q, tau).unwrap();
            let m: Vec<f64> = p
                .values()
                .iter()
                .zip(q.values())
                .map(|(&a, &b)| (a + kf * b) / (1.0 + kf))
                .collect();
            let m = pv(&m);
            let rhs = kl(&p, &m).unwrap() + kf * kl(&q, &m).unwrap();
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn ssm_perfect_proposal_zeroes_cells() {
        let s = sv(&[0.4, -0.2, 0.7, 0.0]);
        let ps = softmax_dist(&s);
        let q = ProposalDist::Empirical {
            freq: ps.values().to_vec(),
        };
        let r = delta_report(Scheme::Ssm, &s, 0, &q, 10, None, None).unwrap();
        assert_eq!(r.bias_asymptotic, 0.0);
        assert!(r.bias_curvature.abs() < 1e-14);
        assert!(r.variance.abs() < 1e-13);
    }

    #[test]
    fn ssm_simple_full_coverage_zero_bias() {
        let s = sv(&[0.3, -0.1, 0.8, 0.5]);
        let y = 0;
        let c = 4;
        // uniform over the classes != y
        let mut freq = vec![1.0 / (c as f64 - 1.0); c];
        freq[y] = 0.0;
        let q = ProposalDist::Empirical { freq };
        let r = delta_report(Scheme::SsmSimple, &s, y, &q, c - 1, None, None).unwrap();
        assert_abs_diff_eq!(r.bias_asymptotic, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn structural_zeros() {
        let s = sv(&[0.2, -0.4, 0.9, 0.1, -0.3, 0.6, 0.0, 0.5]);
        let q = ProposalDist::Uniform;
        let ssm = delta_report(Scheme::Ssm, &s, 1, &q, 7, None, None).unwrap();
        assert_eq!(ssm.bias_asymptotic, 0.0);
        assert_eq!(ssm.bias_curvature, -ssm.variance / 2.0);
        let nce = delta_report(Scheme::Nce, &s, 1, &q, 7, None, None).unwrap();
        assert_eq!(nce.bias_curvature, 0.0);
        let tree = build_huffman(&[1.0; 8]).unwrap();
        let logits = vec![0.2; 7];
        let hsm = delta_report(Scheme::Hsm, &s, 1, &q, 1, Some(&tree), Some(&logits)).unwrap();
        assert_eq!(hsm.bias_curvature, 0.0);
        assert_eq!(hsm.variance, 0.0);
        let rg = delta_report(Scheme::Rg, &s, 1, &q, 1, None, None).unwrap();
        assert_eq!(rg.bias_curvature, 0.0);
        assert_eq!(rg.variance, 0.0);
    }

    #[test]
    fn hsm_bias_matches_enumeration() {
        let c = 32;
        let raw: Vec<f64> = (0..c).map(|i| ((i as f64) * 0.41).sin()).collect();
        let s = sv(&raw);
        let tree = build_huffman(&vec![1.0; c]).unwrap();
        let logits: Vec<f64> = (0..c - 1).map(|i| ((i as f64) * 0.77).cos() * 0.5).collect();
        let r = delta_report(Scheme::Hsm, &s, 0, &ProposalDist::Uniform, 1, Some(&tree), Some(&logits))
            .unwrap();
        let ps = softmax_dist(&s);
        let enumerated: f64 = ps
            .values()
            .iter()
            .enumerate()
            .map(|(j, &pj)| pj * (pj / tree.class_probability(&logits, j)).ln())
            .sum();
        assert_abs_diff_eq!(r.bias_asymptotic, enumerated, epsilon = 1e-10);
    }

    #[test]
    fn proposal_mixture_monotone_chi2() {
        let s = sv(&[0.5, -0.5, 0.2, 0.9, -0.1, 0.3]);
        let ps = softmax_dist(&s);
        let c = ps.values().len();
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            let freq: Vec<f64> = ps
                .values()
                .iter()
                .map(|&pi| (1.0 - t) / c as f64 + t * pi)
                .collect();
            let q = ProposalDist::Empirical { freq };
            let r = delta_report(Scheme::Ssm, &s, 0, &q, 10, None, None).unwrap();
            assert!(r.variance <= prev + 1e-15, "t={t}");
            prev = r.variance;
        }
    }

    #[test]
    fn empirical_deterministic_schemes() {
        let c = 16;
        let raw: Vec<f64> = (0..c).map(|i| ((i as f64) * 0.3).sin()).collect();
        let s = sv(&raw);
        let tree = build_huffman(&vec![1.0; c]).unwrap();
        let logits = vec![0.1; c - 1];
        let q = ProposalDist::Uniform;
        for scheme in [Scheme::Hsm, Scheme::Rg] {
            let e =
                empirical_report(scheme, &s, 0, &q, 5, 100, 1, Some(&tree), Some(&logits)).unwrap();
            let d = delta_report(scheme, &s, 0, &q, 5, Some(&tree), Some(&logits)).unwrap();
            assert_eq!(e.variance_hat, 0.0);
            assert_abs_diff_eq!(e.bias_hat, d.bias_asymptotic, epsilon = 1e-12);
        }
    }

    #[test]
    fn ssm_empirical_matches_delta_regime() {
        let c = 20;
        let raw: Vec<f64> = (0..c).map(|i| 0.2 * ((i as f64) * 0.9).sin()).collect();
        let s = sv(&raw);
        let q = ProposalDist::Uniform;
        let k = 10;
        let trials = 100_000;
        let e = empirical_report(Scheme::Ssm, &s, 0, &q, k, trials, 17, None, None).unwrap();
        let d = delta_report(Scheme::Ssm, &s, 0, &q, k, None, None).unwrap();
        let tol = (3.0 * e.std_error).max(0.1 * d.bias_curvature.abs());
        assert!(
            (e.bias_hat - d.bias_curvature).abs() <= tol,
            "bias_hat {} expected {}",
            e.bias_hat,
            d.bias_curvature
        );
        let rel = (e.variance_hat * trials as f64 / (trials as f64) - d.variance).abs()
            / d.variance;
        assert!(rel <= 0.10, "variance rel err {rel}");
    }

    #[test]
    fn empirical_replay_is_deterministic() {
        let s = sv(&[0.1, -0.2, 0.4, 0.0, 0.3]);
        let q = ProposalDist::LogUniform;
        let a = empirical_report(Scheme::SsmSimple, &s, 2, &q, 4, 500, 9, None, None).unwrap();
        let b = empirical_report(Scheme::SsmSimple, &s, 2, &q, 4, 500, 9, None, None).unwrap();
        assert_eq!(a.mean_conjugate, b.mean_conjugate);
        assert_eq!(a.variance_hat, b.variance_hat);
        assert_abs_diff_eq!(
            a.std_error,
            (a.variance_hat / 500.0).sqrt(),
            epsilon = 1e-15
        );
    }
}
