//! Ranking evaluation (P@k, R@k, NDCG@k, top-k error), the tie-aware
//! expected-DCG lower bound, and the weak-order-preservation gradient
//! alignment diagnostic.

use crate::error::{Error, Result};
use crate::fy_losses::LabelVector;
use crate::simplex_maps::{apply_mapping, softmax_map, MappingKind, ScoreVector};
use serde::Serialize;
use std::collections::BTreeMap;

fn dcg_weight(position: usize) -> f64 {
    // 1-based position
    1.0 / ((position as f64) + 1.0).log2()
}

/// Descending-score permutation with ties broken by ascending class index.
#[derive(Debug, Clone)]
pub struct RankedList {
    permutation: Vec<usize>,
    scores: Vec<f64>,
}

impl RankedList {
    pub fn new(s: &ScoreVector) -> Self {
        let scores = s.values().to_vec();
        let mut permutation: Vec<usize> = (0..scores.len()).collect();
        // stable sort keyed on descending score; stability over the
        // index-ordered input gives ascending-index tie-breaks
        permutation.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        RankedList {
            permutation,
            scores,
        }
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// Class at 0-based rank position i.
    pub fn at(&self, i: usize) -> usize {
        self.permutation[i]
    }

    pub fn score_of(&self, class: usize) -> f64 {
        self.scores[class]
    }

    /// 0-based rank position of a class.
    pub fn position_of(&self, class: usize) -> usize {
        self.permutation
            .iter()
            .position(|&j| j == class)
            .expect("class present")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub precision_at_k: BTreeMap<usize, f64>,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub ndcg_at_k: BTreeMap<usize, f64>,
    /// 1.0 when the top-ranked class is not relevant, else 0.0.
    pub topk_error: f64,
}

/// Ranking metrics at the given cutoffs. IDCG comes from the ideal
/// permutation of the labels.
pub fn evaluate(s: &ScoreVector, y: &LabelVector, cutoffs: &[usize]) -> Result<MetricsReport> {
    if y.len() != s.len() {
        return Err(Error::usage("score/label dimension mismatch"));
    }
    let c = s.len();
    if cutoffs.iter().any(|&k| k == 0 || k > c) {
        return Err(Error::usage("cutoffs must lie in [1, C]"));
    }
    let ranked = RankedList::new(s);
    let rel = y.relevant_count() as f64;
    let mut precision_at_k = BTreeMap::new();
    let mut recall_at_k = BTreeMap::new();
    let mut ndcg_at_k = BTreeMap::new();
    for &k in cutoffs {
        let mut hits = 0.0;
        let mut dcg = 0.0;
        for i in 0..k {
            if y.is_positive(ranked.at(i)) {
                hits += 1.0;
                dcg += dcg_weight(i + 1);
            }
        }
        let ideal_hits = (rel as usize).min(k);
        let idcg: f64 = (1..=ideal_hits).map(dcg_weight).sum();
        precision_at_k.insert(k, hits / k as f64);
        recall_at_k.insert(k, hits / rel);
        ndcg_at_k.insert(k, if idcg > 0.0 { dcg / idcg } else { 0.0 });
    }
    let topk_error = if y.is_positive(ranked.at(0)) { 0.0 } else { 1.0 };
    Ok(MetricsReport {
        precision_at_k,
        recall_at_k,
        ndcg_at_k,
        topk_error,
    })
}

/// A tied block of m classes at positions z+1..z+m, of which r are relevant.
#[derive(Debug, Clone, Copy)]
pub struct TieBlockSpec {
    pub z: usize,
    pub m: usize,
    pub r: usize,
}

/// Expected DCG of a uniformly ordered tie block vs the best ordering:
/// expected = (r/m) * sum_{i=1..m} w_{z+i}, optimal = sum_{i=1..r} w_{z+i}.
pub fn expected_tie_dcg(block: TieBlockSpec) -> Result<(f64, f64, f64)> {
    if block.m < 1 || block.r > block.m {
        return Err(Error::domain("need 0 <= r <= m, m >= 1"));
    }
    let weights: Vec<f64> = (1..=block.m).map(|i| dcg_weight(block.z + i)).collect();
    let expected = block.r as f64 / block.m as f64 * weights.iter().sum::<f64>();
    let optimal: f64 = weights[..block.r].iter().sum();
    Ok((expected, optimal, optimal - expected))
}

/// Alignment of the loss gradient with the DCG improvement direction, and
/// the gap lost to zeroed negatives. The improvement direction sums
/// (positive, negative) swap vectors weighted by the positive's rank weight.
/// The comparator gradient re-fills zeroed entries with softmax
/// probabilities at the same scores.
pub fn wop_alignment_gap(
    s: &ScoreVector,
    y: &LabelVector,
    mapping: MappingKind,
) -> Result<(f64, f64, f64)> {
    if y.len() != s.len() {
        return Err(Error::usage("score/label dimension mismatch"));
    }
    let c = s.len();
    let ranked = RankedList::new(s);
    let p_hat = apply_mapping(s, mapping)?.into_values();
    let p_soft = softmax_map(s).into_values();

    // d_DCG[j] accumulates the swap coefficients: each (positive i, negative
    // j) pair pushes +alpha on j's slot and -alpha on i's, alpha = w at i's
    // rank position.
    let mut d_dcg = vec![0.0; c];
    for i in 0..c {
        if !y.is_positive(i) {
            continue;
        }
        let alpha = dcg_weight(ranked.position_of(i) + 1);
        for j in 0..c {
            if y.is_positive(j) {
                continue;
            }
            d_dcg[j] += alpha;
            d_dcg[i] -= alpha;
        }
    }

    // gradient of the loss is p_hat - y (binary labels)
    let mut inner = 0.0;
    let mut comparator_inner = 0.0;
    for j in 0..c {
        let yj = if y.is_positive(j) { 1.0 } else { 0.0 };
        let g = p_hat[j] - yj;
        let g_cmp = if p_hat[j] == 0.0 && yj == 0.0 {
            p_soft[j]
        } else {
            g
        };
        // descent direction is -grad; alignment = <-grad, d_DCG>... both
        // inner products are reported with the raw gradient sign convention
        inner += g * d_dcg[j];
        comparator_inner += g_cmp * d_dcg[j];
    }
    Ok((inner, comparator_inner, comparator_inner - inner))
}
