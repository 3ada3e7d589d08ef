//! Brute-force and numerical oracles: Bayes-optimal score construction per
//! mapping, top-k calibration checks by enumeration on small C, and
//! finite-difference gradient validation.

use crate::error::{Error, Result};
use crate::fy_losses::LossEval;
use crate::metrics::RankedList;
use crate::simplex_maps::{apply_mapping_with_support, MappingKind, ProbabilityVector, ScoreVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;

/// Scores whose mapping image is exactly p.
///
/// Softmax uses log p; sparsemax maps an interior simplex point to itself
/// (threshold 0); entmax inverts its power form at threshold 0; rankmax
/// places the anchor class at 0 and support classes at p_i/p_anchor - 1.
/// Off-support classes sit strictly below the threshold.
pub fn bayes_optimal_scores(p: &ProbabilityVector, mapping: MappingKind) -> Result<ScoreVector> {
    let pv = p.values();
    let c = pv.len();
    mapping.validate(c)?;
    let raw = match mapping {
        MappingKind::Softmax => {
            if pv.iter().any(|&v| v <= 0.0) {
                return Err(Error::domain("softmax scores need a fully interior p"));
            }
            pv.iter().map(|&v| v.ln()).collect::<Vec<f64>>()
        }
        MappingKind::Sparsemax => pv.to_vec(),
        MappingKind::Entmax { alpha } => pv
            .iter()
            .map(|&v| {
                if v > 0.0 {
                    v.powf(alpha - 1.0) / (alpha - 1.0)
                } else {
                    -1.0
                }
            })
            .collect(),
        MappingKind::Rankmax { true_class } => {
            if true_class >= c {
                return Err(Error::domain("anchor class out of range"));
            }
            if pv[true_class] <= 0.0 {
                return Err(Error::domain("rankmax anchor needs positive probability"));
            }
            pv.iter()
                .map(|&v| if v > 0.0 { v / pv[true_class] - 1.0 } else { -2.0 })
                .collect()
        }
    };
    ScoreVector::new(raw)
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationVerdict {
    pub mapping: MappingKind,
    pub trials: usize,
    pub topk_matches: BTreeMap<usize, usize>,
    pub support_separation_ok: bool,
    pub order_within_support_ok: bool,
    pub counterexamples: Vec<String>,
}

impl CalibrationVerdict {
    pub fn violations(&self) -> usize {
        let missed: usize = self
            .topk_matches
            .values()
            .map(|&m| self.trials - m)
            .sum();
        missed
            + usize::from(!self.support_separation_ok)
            + usize::from(!self.order_within_support_ok)
    }
}

fn dirichlet_flat(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    // Dirichlet(1, ..., 1) via normalized Exp(1) draws
    let raw: Vec<f64> = (0..c)
        .map(|_| -(1.0 - rng.gen_range(0.0..1.0f64)).ln())
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

/// Enumerated calibration check: for random posteriors p, the scores from
/// `bayes_optimal_scores` must place the top-k of p in the top-k of s for
/// every k, with exact set agreement while k stays within the support and
/// no support class excluded beyond it. Support separation and
/// within-support order are verified on every trial.
pub fn check_topk_calibration(
    mapping: MappingKind,
    c: usize,
    k_values: &[usize],
    trials: usize,
    seed: u64,
) -> Result<CalibrationVerdict> {
    if c < 2 || c > 12 {
        return Err(Error::domain("calibration enumeration supports 2 <= C <= 12"));
    }
    if k_values.iter().any(|&k| k == 0 || k > c) {
        return Err(Error::usage("k values must lie in [1, C]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut topk_matches: BTreeMap<usize, usize> =
        k_values.iter().map(|&k| (k, 0)).collect();
    let mut support_separation_ok = true;
    let mut order_within_support_ok = true;
    let mut counterexamples = Vec::new();
    let sparse_allowed = !matches!(mapping, MappingKind::Softmax);

    for trial in 0..trials {
        let mut p = dirichlet_flat(&mut rng, c);
        if sparse_allowed && trial % 4 == 3 {
            // constructed sparse posterior: zero a random strict subset
            let zeros = rng.gen_range(1..c - 1);
            let mut idx: Vec<usize> = (0..c).collect();
            for i in (1..c).rev() {
                let j = rng.gen_range(0..=i);
                idx.swap(i, j);
            }
            for &j in &idx[..zeros] {
                p[j] = 0.0;
            }
            let z: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= z);
        }
        let support: Vec<usize> = (0..c).filter(|&j| p[j] > 0.0).collect();
        let mapping_t = match mapping {
            MappingKind::Rankmax { .. } => {
                let anchor = (0..c)
                    .max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap().then(b.cmp(&a)))
                    .unwrap();
                MappingKind::Rankmax { true_class: anchor }
            }
            other => other,
        };
        let pv = ProbabilityVector::new(p.clone())?;
        let s = bayes_optimal_scores(&pv, mapping_t)?;
        let (_, info) = apply_mapping_with_support(&s, mapping_t)?;

        // support separation against the forward map's threshold
        let sv = s.values();
        let min_on = support
            .iter()
            .map(|&j| sv[j])
            .fold(f64::INFINITY, f64::min);
        let max_off = (0..c)
            .filter(|j| !support.contains(j))
            .map(|j| sv[j])
            .fold(f64::NEG_INFINITY, f64::max);
        // 1e-9 slack absorbs rounding in the recovered threshold
        if support.len() < c
            && !(min_on > info.threshold - 1e-9 && info.threshold >= max_off - 1e-9)
        {
            support_separation_ok = false;
            if counterexamples.len() < 5 {
                counterexamples.push(format!(
                    "trial {trial}: separation failed (min_on {min_on}, tau {}, max_off {max_off})",
                    info.threshold
                ));
            }
        }

        // within-support order: larger posterior never gets a smaller score
        for &i in &support {
            for &j in &support {
                if p[i] > p[j] + 1e-12 && sv[i] <= sv[j] - 1e-12 {
                    order_within_support_ok = false;
                    if counterexamples.len() < 5 {
                        counterexamples.push(format!("trial {trial}: order violated at ({i},{j})"));
                    }
                }
            }
        }

        // top-k agreement under the shared ascending-index tie-break
        let rank_s = RankedList::new(&s);
        let mut rank_p: Vec<usize> = (0..c).collect();
        rank_p.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
        for (&k, matches) in topk_matches.iter_mut() {
            let ok = if k <= support.len() {
                let mut top_s: Vec<usize> = (0..k).map(|i| rank_s.at(i)).collect();
                let mut top_p: Vec<usize> = rank_p[..k].to_vec();
                top_s.sort_unstable();
                top_p.sort_unstable();
                top_s == top_p
            } else {
                // any completion accepted as long as no support class is excluded
                let top_s: Vec<usize> = (0..k).map(|i| rank_s.at(i)).collect();
                support.iter().all(|j| top_s.contains(j))
            };
            if ok {
                *matches += 1;
            } else if counterexamples.len() < 5 {
                counterexamples.push(format!("trial {trial}: top-{k} mismatch"));
            }
        }
    }
    Ok(CalibrationVerdict {
        mapping,
        trials,
        topk_matches,
        support_separation_ok,
        order_within_support_ok,
        counterexamples,
    })
}

/// Central-difference gradient check. Returns the maximum per-coordinate
/// relative error of the analytic gradient, with denominators floored at
/// 1e-8. Callers are responsible for rejecting points near sparse-support
/// boundaries (see [`near_support_boundary`]).
pub fn grad_check<F>(mut eval: F, s: &ScoreVector, h: f64) -> Result<f64>
where
    F: FnMut(&ScoreVector) -> Result<LossEval>,
{
    if !(1e-8..=1e-3).contains(&h) {
        return Err(Error::domain("step size must lie in [1e-8, 1e-3]"));
    }
    let base = eval(s)?;
    let raw = s.values().to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..raw.len() {
        let mut plus = raw.clone();
        let mut minus = raw.clone();
        plus[i] += h;
        minus[i] -= h;
        let fp = eval(&ScoreVector::new(plus)?)?.value;
        let fm = eval(&ScoreVector::new(minus)?)?.value;
        let fd = (fp - fm) / (2.0 * h);
        let denom = fd.abs().max(base.gradient[i].abs()).max(1e-8);
        max_rel = max_rel.max((fd - base.gradient[i]).abs() / denom);
    }
    Ok(max_rel)
}

/// True when any coordinate sits within `margin` of the mapping's support
/// threshold, where finite differences straddle a kink.
pub fn near_support_boundary(s: &ScoreVector, mapping: MappingKind, margin: f64) -> Result<bool> {
    let (_, info) = apply_mapping_with_support(s, mapping)?;
    Ok(s
        .values()
        .iter()
        .any(|&si| (si - info.threshold).abs() < margin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fy_losses::{fy_loss, softmax_loss, LabelVector, RegularizerKind};
    use crate::simplex_maps::softmax_map;
    use approx::assert_abs_diff_eq;

    fn pv(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    fn random_interior(rng: &mut ChaCha8Rng, c: usize) -> ProbabilityVector {
        let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..1.0)).collect();
        let z: f64 = raw.iter().sum();
        pv(&raw.iter().map(|v| v / z).collect::<Vec<_>>())
    }

    #[test]
    fn softmax_uniform_gives_constant_scores() {
        let p = pv(&[0.25; 4]);
        let s = bayes_optimal_scores(&p, MappingKind::Softmax).unwrap();
        let first = s.values()[0];
        assert!(s.values().iter().all(|&v| (v - first).abs() < 1e-15));
    }

    #[test]
    fn sparsemax_interior_roundtrip() {
        let p = pv(&[0.5, 0.3, 0.2]);
        let s = bayes_optimal_scores(&p, MappingKind::Sparsemax).unwrap();
        let (out, info) = apply_mapping_with_support(&s, MappingKind::Sparsemax).unwrap();
        for (a, b) in out.values().iter().zip(p.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(info.threshold, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn roundtrip_all_mappings() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mappings = [
            MappingKind::Softmax,
            MappingKind::Sparsemax,
            MappingKind::Entmax { alpha: 1.5 },
            MappingKind::Rankmax { true_class: 0 },
        ];
        for mapping in mappings {
            for _ in 0..1000 {
                let c = rng.gen_range(2..=8);
                let p = random_interior(&mut rng, c);
                let mapping = match mapping {
                    MappingKind::Rankmax { .. } => {
                        let anchor = (0..c)
                            .max_by(|&a, &b| {
                                p.values()[a].partial_cmp(&p.values()[b]).unwrap()
                            })
                            .unwrap();
                        MappingKind::Rankmax { true_class: anchor }
                    }
                    other => other,
                };
                let s = bayes_optimal_scores(&p, mapping).unwrap();
                let (out, _) = apply_mapping_with_support(&s, mapping).unwrap();
                for (a, b) in out.values().iter().zip(p.values()) {
                    assert_abs_diff_eq!(a, b, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn sparse_posterior_roundtrip_entmax() {
        let p = pv(&[0.6, 0.4, 0.0, 0.0]);
        let s = bayes_optimal_scores(&p, MappingKind::Entmax { alpha: 1.5 }).unwrap();
        let (out, _) = apply_mapping_with_support(&s, MappingKind::Entmax { alpha: 1.5 }).unwrap();
        for (a, b) in out.values().iter().zip(p.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn calibration_all_mappings_clean() {
        let c = 6;
        let ks: Vec<usize> = (1..=c).collect();
        for mapping in [
            MappingKind::Softmax,
            MappingKind::Sparsemax,
            MappingKind::Entmax { alpha: 1.5 },
            MappingKind::Rankmax { true_class: 0 },
        ] {
            let v = check_topk_calibration(mapping, c, &ks, 200, 8).unwrap();
            assert_eq!(v.violations(), 0, "{mapping:?}: {:?}", v.counterexamples);
        }
    }

    #[test]
    fn degenerate_point_mass_top1() {
        let p = pv(&[1.0, 0.0, 0.0]);
        for mapping in [
            MappingKind::Sparsemax,
            MappingKind::Entmax { alpha: 1.5 },
            MappingKind::Rankmax { true_class: 0 },
        ] {
            let s = bayes_optimal_scores(&p, mapping).unwrap();
            let rank = RankedList::new(&s);
            assert_eq!(rank.at(0), 0, "{mapping:?}");
        }
    }

    #[test]
    fn grad_check_softmax_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let c = 6;
            let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let s = ScoreVector::new(raw).unwrap();
            let y = LabelVector::one_hot(c, 2).unwrap();
            let err = grad_check(|s| softmax_loss(s, &y), &s, 1e-5).unwrap();
            assert!(err <= 1e-5, "err {err}");
        }
    }

    #[test]
    fn grad_check_rg_loss() {
        let s = ScoreVector::new(vec![0.3, -0.7, 0.2, 1.1]).unwrap();
        let y = LabelVector::one_hot(4, 1).unwrap();
        let err = grad_check(|s| crate::approx::rg_loss(s, &y), &s, 1e-5).unwrap();
        assert!(err <= 1e-7, "err {err}");
    }

    #[test]
    fn boundary_rejection_prevents_spurious_failure() {
        // score vector with a coordinate pinned near the sparsemax threshold
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let y = LabelVector::one_hot(4, 0).unwrap();
        let mut checked = 0;
        while checked < 10 {
            let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s = ScoreVector::new(raw).unwrap();
            if near_support_boundary(&s, MappingKind::Sparsemax, 10.0 * h).unwrap() {
                continue;
            }
            let err = grad_check(
                |s| fy_loss(s, &y, RegularizerKind::HalfSquaredL2),
                &s,
                h,
            )
            .unwrap();
            assert!(err <= 1e-4, "err {err}");
            checked += 1;
        }
    }

    #[test]
    fn expected_softmax_loss_descent_recovers_posterior() {
        // minimizing E_{y~p}[loss(s, y)] over s by gradient descent must
        // drive softmax(s) to p
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..5 {
            let c = 6;
            let p = random_interior(&mut rng, c);
            let mut s = vec![0.0; c];
            for _ in 0..20_000 {
                let sv = ScoreVector::new(s.clone()).unwrap();
                let phat = softmax_map(&sv);
                for i in 0..c {
                    s[i] -= 0.5 * (phat.values()[i] - p.values()[i]);
                }
            }
            let phat = softmax_map(&ScoreVector::new(s).unwrap());
            for (a, b) in phat.values().iter().zip(p.values()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-6);
            }
        }
    }
}
