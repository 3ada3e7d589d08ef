//! Approximations of the softmax log-partition: sampled softmax with and
//! without proposal correction, noise-contrastive estimation, hierarchical
//! softmax over a Huffman tree, and the RG quadratic Taylor surrogate.

use crate::error::{Error, Result};
use crate::fy_losses::{LabelVector, LossEval};
use crate::simplex_maps::ScoreVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Negative-sampling proposal distribution Q.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProposalDist {
    Uniform,
    /// q_j proportional to 1 / (j + 2) over the fixed class ordering.
    LogUniform,
    /// Explicit per-class probabilities (entries >= 0, summing to 1; classes
    /// with zero probability are never drawn).
    Empirical { freq: Vec<f64> },
    /// Dynamic negative sampling: draw `pool` uniform candidates, keep the
    /// `top` highest-scoring under the current model.
    Dns { pool: usize, top: usize },
}

impl ProposalDist {
    pub fn validate(&self, c: usize) -> Result<()> {
        match self {
            ProposalDist::Empirical { freq } => {
                if freq.len() != c {
                    return Err(Error::domain("empirical proposal length mismatch"));
                }
                if freq.iter().any(|&v| !(v >= 0.0)) {
                    return Err(Error::domain("empirical proposal has negative entries"));
                }
                let sum: f64 = freq.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::domain("empirical proposal must sum to 1"));
                }
            }
            ProposalDist::Dns { pool, top } => {
                if *top < 1 || pool < top {
                    return Err(Error::domain("DNS requires pool >= top >= 1"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Per-class probabilities for the non-adaptive kinds.
    pub fn probabilities(&self, c: usize) -> Result<Vec<f64>> {
        self.validate(c)?;
        match self {
            ProposalDist::Uniform => Ok(vec![1.0 / c as f64; c]),
            ProposalDist::LogUniform => {
                let raw: Vec<f64> = (0..c).map(|j| 1.0 / (j as f64 + 2.0)).collect();
                let z: f64 = raw.iter().sum();
                Ok(raw.into_iter().map(|v| v / z).collect())
            }
            ProposalDist::Empirical { freq } => Ok(freq.clone()),
            ProposalDist::Dns { .. } => Err(Error::usage(
                "DNS has no closed-form per-class probabilities",
            )),
        }
    }

    /// Draw k negatives i.i.d. with replacement. DNS needs the current score
    /// vector to rank its candidate pool.
    pub fn sample(
        &self,
        c: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
        scores: Option<&[f64]>,
    ) -> Result<SampleDraw> {
        self.validate(c)?;
        if k < 1 {
            return Err(Error::domain("need k >= 1 negatives"));
        }
        let negatives = match self {
            ProposalDist::Uniform => (0..k).map(|_| rng.gen_range(0..c)).collect(),
            ProposalDist::LogUniform | ProposalDist::Empirical { .. } => {
                let q = self.probabilities(c)?;
                let mut cdf = Vec::with_capacity(c);
                let mut acc = 0.0;
                for &v in &q {
                    acc += v;
                    cdf.push(acc);
                }
                (0..k)
                    .map(|_| {
                        let u: f64 = rng.gen_range(0.0..1.0) * acc;
                        cdf.partition_point(|&x| x <= u).min(c - 1)
                    })
                    .collect()
            }
            ProposalDist::Dns { pool, top } => {
                let s =
                    scores.ok_or_else(|| Error::usage("DNS sampling needs current scores"))?;
                let mut candidates: Vec<usize> =
                    (0..*pool).map(|_| rng.gen_range(0..c)).collect();
                candidates
                    .sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
                let top_set = &candidates[..(*top).min(candidates.len())];
                if k <= top_set.len() {
                    top_set[..k].to_vec()
                } else {
                    (0..k).map(|i| top_set[i % top_set.len()]).collect()
                }
            }
        };
        Ok(SampleDraw { negatives })
    }
}

/// A concrete draw of k negatives (with replacement, i.i.d.).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDraw {
    pub negatives: Vec<usize>,
}

impl SampleDraw {
    pub fn k(&self) -> usize {
        self.negatives.len()
    }
}

/// Per-(seed, example) RNG stream so parallel batch evaluation is
/// deterministic regardless of scheduling.
pub fn draw_stream(seed: u64, example_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(example_index);
    rng
}

fn local_softmax_loss(sy: f64, neg_logits: &[f64]) -> (f64, f64, Vec<f64>) {
    // returns (loss value, p_local(y), p_local per negative slot)
    let m = neg_logits.iter().cloned().fold(sy, f64::max);
    let ey = (sy - m).exp();
    let en: Vec<f64> = neg_logits.iter().map(|&v| (v - m).exp()).collect();
    let z = ey + en.iter().sum::<f64>();
    let value = z.ln() + m - sy;
    let py = ey / z;
    let pn = en.into_iter().map(|v| v / z).collect();
    (value, py, pn)
}

/// SSM-Simple: softmax restricted to the true class plus the drawn negatives.
pub fn ssm_simple_loss(s: &ScoreVector, y: usize, draw: &SampleDraw) -> Result<LossEval> {
    if y >= s.len() {
        return Err(Error::domain("class index out of range"));
    }
    if draw.k() < 1 {
        return Err(Error::domain("need at least one negative"));
    }
    let sv = s.values();
    let neg_logits: Vec<f64> = draw.negatives.iter().map(|&j| sv[j]).collect();
    let (value, py, pn) = local_softmax_loss(sv[y], &neg_logits);
    let mut gradient = vec![0.0; sv.len()];
    gradient[y] = py - 1.0;
    for (&j, p) in draw.negatives.iter().zip(pn) {
        gradient[j] += p;
    }
    Ok(LossEval { value, gradient })
}

/// Corrected SSM: SSM-Simple on logits shifted by -log q, true class included.
pub fn ssm_corrected_loss(
    s: &ScoreVector,
    y: usize,
    draw: &SampleDraw,
    proposal: &ProposalDist,
) -> Result<LossEval> {
    let sv = s.values();
    let q = proposal.probabilities(sv.len())?;
    if q[y] <= 0.0 || draw.negatives.iter().any(|&j| q[j] <= 0.0) {
        return Err(Error::domain("zero-probability proposal for a drawn class"));
    }
    let corrected: Vec<f64> = sv
        .iter()
        .zip(&q)
        .map(|(&si, &qi)| si - qi.ln())
        .collect();
    let neg_logits: Vec<f64> = draw.negatives.iter().map(|&j| corrected[j]).collect();
    let (value, py, pn) = local_softmax_loss(corrected[y], &neg_logits);
    let mut gradient = vec![0.0; sv.len()];
    gradient[y] = py - 1.0;
    for (&j, p) in draw.negatives.iter().zip(pn) {
        gradient[j] += p;
    }
    Ok(LossEval { value, gradient })
}

fn softplus(x: f64) -> f64 {
    // log(1 + e^x), stable for large |x|
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// NCE binary discrimination loss against k noise draws from Q.
pub fn nce_loss(
    s: &ScoreVector,
    y: usize,
    draw: &SampleDraw,
    proposal: &ProposalDist,
) -> Result<LossEval> {
    let sv = s.values();
    let q = proposal.probabilities(sv.len())?;
    let k = draw.k() as f64;
    if draw.k() < 1 {
        return Err(Error::domain("need at least one negative"));
    }
    let mut gradient = vec![0.0; sv.len()];
    // -log sigma(s_y - log(k q_y)) = softplus(-(s_y - log(k q_y)))
    let ay = sv[y] - (k * q[y]).ln();
    let mut value = softplus(-ay);
    gradient[y] = -sigmoid(-ay);
    for &j in &draw.negatives {
        let aj = sv[j] - (k * q[j]).ln();
        value += softplus(aj);
        gradient[j] += sigmoid(aj);
    }
    Ok(LossEval { value, gradient })
}

/// A Huffman coding tree over C classes: C - 1 internal nodes, one logit slot
/// per node, each class reached by a unique root-to-leaf path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HuffmanTree {
    nodes: Vec<HuffNode>,
    root: usize,
    /// Per class: (node index, branch sign) pairs from the root. +1 = left.
    paths: Vec<Vec<(usize, i8)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Child {
    Leaf(usize),
    Node(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HuffNode {
    pub left: Child,
    pub right: Child,
}

#[derive(Clone, Copy)]
struct HeapEntry {
    freq: f64,
    min_class: usize,
    child: Child,
}

/// Classic two-least-frequent Huffman merge; ties break by (frequency,
/// smallest contained class index) so trees are reproducible everywhere.
pub fn build_huffman(freq: &[f64]) -> Result<HuffmanTree> {
    let c = freq.len();
    if c < 2 {
        return Err(Error::domain("Huffman tree needs at least 2 classes"));
    }
    if freq.iter().any(|&f| !(f >= 0.0)) {
        return Err(Error::domain("frequencies must be nonnegative"));
    }
    if freq.iter().sum::<f64>() <= 0.0 {
        return Err(Error::domain("frequencies must not all be zero"));
    }
    let mut heap: Vec<HeapEntry> = freq
        .iter()
        .enumerate()
        .map(|(i, &f)| HeapEntry {
            freq: f,
            min_class: i,
            child: Child::Leaf(i),
        })
        .collect();
    let mut nodes: Vec<HuffNode> = Vec::with_capacity(c - 1);
    let pop_min = |heap: &mut Vec<HeapEntry>| -> HeapEntry {
        let mut best = 0;
        for i in 1..heap.len() {
            let a = &heap[i];
            let b = &heap[best];
            if a.freq < b.freq || (a.freq == b.freq && a.min_class < b.min_class) {
                best = i;
            }
        }
        heap.swap_remove(best)
    };
    let mut heap_vec = heap.drain(..).collect::<Vec<_>>();
    while heap_vec.len() > 1 {
        let a = pop_min(&mut heap_vec);
        let b = pop_min(&mut heap_vec);
        let id = nodes.len();
        nodes.push(HuffNode {
            left: a.child,
            right: b.child,
        });
        heap_vec.push(HeapEntry {
            freq: a.freq + b.freq,
            min_class: a.min_class.min(b.min_class),
            child: Child::Node(id),
        });
    }
    let root = match heap_vec[0].child {
        Child::Node(id) => id,
        Child::Leaf(_) => unreachable!("c >= 2 always creates an internal node"),
    };
    let mut paths = vec![Vec::new(); c];
    let mut stack = vec![(root, Vec::new())];
    while let Some((node, prefix)) = stack.pop() {
        for (child, sign) in [(nodes[node].left, 1i8), (nodes[node].right, -1i8)] {
            let mut p = prefix.clone();
            p.push((node, sign));
            match child {
                Child::Leaf(class) => paths[class] = p,
                Child::Node(id) => stack.push((id, p)),
            }
        }
    }
    Ok(HuffmanTree { nodes, root, paths })
}

impl HuffmanTree {
    pub fn num_classes(&self) -> usize {
        self.paths.len()
    }

    pub fn num_internal_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn path(&self, class: usize) -> &[(usize, i8)] {
        &self.paths[class]
    }

    pub fn depth(&self, class: usize) -> usize {
        self.paths[class].len()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn node(&self, id: usize) -> &HuffNode {
        &self.nodes[id]
    }

    /// P_HSM(class) = prod over the path of sigma(b * s_node).
    pub fn class_probability(&self, node_logits: &[f64], class: usize) -> f64 {
        self.paths[class]
            .iter()
            .map(|&(u, b)| sigmoid(b as f64 * node_logits[u]))
            .product()
    }

    /// Full enumerated distribution over classes.
    pub fn distribution(&self, node_logits: &[f64]) -> Vec<f64> {
        (0..self.num_classes())
            .map(|j| self.class_probability(node_logits, j))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("bad tree json: {e}")))
    }
}

/// HSM negative log-likelihood of class y; gradient lives on node-logit slots
/// and touches only the nodes on y's path.
pub fn hsm_loss(node_logits: &[f64], y: usize, tree: &HuffmanTree) -> Result<LossEval> {
    if node_logits.len() != tree.num_internal_nodes() {
        return Err(Error::usage("node logit count must equal internal nodes"));
    }
    if y >= tree.num_classes() {
        return Err(Error::domain("class index out of range"));
    }
    let mut value = 0.0;
    let mut gradient = vec![0.0; node_logits.len()];
    for &(u, b) in tree.path(y) {
        let bs = b as f64 * node_logits[u];
        value += softplus(-bs);
        // d/ds_u of softplus(-b s_u) = -b * sigma(-b s_u)
        gradient[u] = -(b as f64) * sigmoid(-bs);
    }
    Ok(LossEval { value, gradient })
}

/// Implicit global score per class: the sum of node logits over left branches
/// of its path (right branches carry the zero local logit).
pub fn hsm_implicit_scores(node_logits: &[f64], tree: &HuffmanTree) -> Result<Vec<f64>> {
    if node_logits.len() != tree.num_internal_nodes() {
        return Err(Error::usage("node logit count must equal internal nodes"));
    }
    Ok((0..tree.num_classes())
        .map(|j| {
            tree.path(j)
                .iter()
                .filter(|&&(_, b)| b > 0)
                .map(|&(u, _)| node_logits[u])
                .sum()
        })
        .collect())
}

/// RG quadratic surrogate of the log-partition:
/// log C + mean(s) + 1/2 s^T ((1/C)I - (1/C^2) 1 1^T) s.
pub fn rg_partition(s: &ScoreVector) -> f64 {
    let c = s.len() as f64;
    let sv = s.values();
    let sum: f64 = sv.iter().sum();
    let sumsq: f64 = sv.iter().map(|v| v * v).sum();
    c.ln() + sum / c + 0.5 * (sumsq / c - (sum / c) * (sum / c))
}

/// RG surrogate loss -sum_{positives} (s_i - Z_RG(s)) with its exact gradient.
pub fn rg_loss(s: &ScoreVector, y: &LabelVector) -> Result<LossEval> {
    if y.len() != s.len() {
        return Err(Error::usage("score/label dimension mismatch"));
    }
    let sv = s.values();
    let c = sv.len() as f64;
    let z = rg_partition(s);
    let ny = y.relevant_count() as f64;
    let mut value = 0.0;
    for (i, &yi) in y.values().iter().enumerate() {
        if yi == 1 {
            value += z - sv[i];
        }
    }
    let mean = sv.iter().sum::<f64>() / c;
    // grad Z_RG = (1/C) 1 + M s with M s = s/C - mean/C
    let gradient = sv
        .iter()
        .zip(y.values())
        .map(|(&si, &yi)| ny * (1.0 / c + (si - mean) / c) - yi as f64)
        .collect();
    Ok(LossEval { value, gradient })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex_maps::log_sum_exp;
    use approx::assert_abs_diff_eq;

    fn sv(v: &[f64]) -> ScoreVector {
        ScoreVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn ssm_simple_uniform_logits() {
        let s = sv(&[0.0; 10]);
        let draw = SampleDraw {
            negatives: vec![1, 2, 3],
        };
        let e = ssm_simple_loss(&s, 0, &draw).unwrap();
        assert_abs_diff_eq!(e.value, 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn ssm_simple_full_enumeration_recovers_softmax() {
        let s = sv(&[0.7, -0.3, 0.1, 1.2]);
        let draw = SampleDraw {
            negatives: vec![1, 2, 3],
        };
        let e = ssm_simple_loss(&s, 0, &draw).unwrap();
        let y = LabelVector::one_hot(4, 0).unwrap();
        let exact = crate::fy_losses::softmax_loss(&s, &y).unwrap();
        assert_abs_diff_eq!(e.value, exact.value, epsilon = 1e-10);
        for (a, b) in e.gradient.iter().zip(&exact.gradient) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn ssm_simple_direct_substitution() {
        let s = sv(&[1.0, 0.0, 0.0]);
        let draw = SampleDraw { negatives: vec![1] };
        let e = ssm_simple_loss(&s, 0, &draw).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert_abs_diff_eq!(e.value, expect, epsilon = 1e-12);
    }

    #[test]
    fn ssm_corrected_uniform_equals_simple() {
        let s = sv(&[0.4, -0.2, 0.9, 0.0]);
        let draw = SampleDraw {
            negatives: vec![1, 3],
        };
        let simple = ssm_simple_loss(&s, 2, &draw).unwrap();
        let corrected = ssm_corrected_loss(&s, 2, &draw, &ProposalDist::Uniform).unwrap();
        assert_abs_diff_eq!(simple.value, corrected.value, epsilon = 1e-12);
    }

    #[test]
    fn ssm_partition_estimator_unbiased() {
        // mean of (1/k) sum e^{s_y'} / q(y') over many draws approaches sum_j e^{s_j}
        let c = 20;
        let raw: Vec<f64> = (0..c).map(|i| ((i as f64) * 0.37).sin()).collect();
        let s = sv(&raw);
        let target: f64 = raw.iter().map(|v| v.exp()).sum();
        let proposal = ProposalDist::LogUniform;
        let q = proposal.probabilities(c).unwrap();
        let k = 8;
        let trials = 100_000;
        let mut rng = draw_stream(99, 0);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..trials {
            let draw = proposal.sample(c, k, &mut rng, None).unwrap();
            let x: f64 = draw
                .negatives
                .iter()
                .map(|&j| s.values()[j].exp() / q[j])
                .sum::<f64>()
                / k as f64;
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / trials as f64;
        let var = (sumsq - sum * sum / trials as f64) / (trials as f64 - 1.0);
        let se = (var / trials as f64).sqrt();
        assert!(
            (mean - target).abs() <= 3.0 * se,
            "mean {mean} target {target} se {se}"
        );
    }

    #[test]
    fn ssm_corrected_perfect_proposal_flattens_local_logits() {
        // with q exactly proportional to softmax(s), every corrected logit
        // s_j - ln q_j equals the same constant, so the local softmax is
        // uniform over the k+1 entries and the loss is ln(k+1) for any draw
        let c = 20;
        let raw: Vec<f64> = (0..c).map(|i| ((i as f64) * 0.61).cos()).collect();
        let s = sv(&raw);
        let z = log_sum_exp(&raw);
        let q: Vec<f64> = raw.iter().map(|&v| (v - z).exp()).collect();
        let proposal = ProposalDist::Empirical { freq: q };
        let y = 3;
        let k = 64;
        let mut rng = draw_stream(7, 0);
        for _ in 0..10 {
            let draw = proposal.sample(c, k, &mut rng, None).unwrap();
            let e = ssm_corrected_loss(&s, y, &draw, &proposal).unwrap();
            assert_abs_diff_eq!(e.value, ((k + 1) as f64).ln(), epsilon = 1e-9);
        }
    }

    #[test]
    fn ssm_corrected_uniform_matches_simple() {
        // a uniform proposal shifts every corrected logit by the same ln c,
        // which the local softmax cancels
        let c = 12;
        let raw: Vec<f64> = (0..c).map(|i| ((i as f64) * 0.37).sin()).collect();
        let s = sv(&raw);
        let y = 5;
        let mut rng = draw_stream(11, 0);
        let proposal = ProposalDist::Uniform;
        for _ in 0..10 {
            let draw = proposal.sample(c, 8, &mut rng, None).unwrap();
            let corrected = ssm_corrected_loss(&s, y, &draw, &proposal).unwrap();
            let simple = ssm_simple_loss(&s, y, &draw).unwrap();
            assert_abs_diff_eq!(corrected.value, simple.value, epsilon = 1e-12);
            for (a, b) in corrected.gradient.iter().zip(&simple.gradient) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn nce_uniform_zero_logits() {
        let c = 6;
        let s = sv(&vec![0.0; c]);
        let k = c;
        let draw = SampleDraw {
            negatives: (0..k).collect(),
        };
        let e = nce_loss(&s, 0, &draw, &ProposalDist::Uniform).unwrap();
        // log(k q) = log(6/6) = 0, every term is log 2
        assert_abs_diff_eq!(e.value, (k as f64 + 1.0) * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn nce_single_term_softplus() {
        let a = 0.8;
        let s = sv(&[a, -0.1]);
        let draw = SampleDraw { negatives: vec![1] };
        let e = nce_loss(&s, 0, &draw, &ProposalDist::Uniform).unwrap();
        let positive_term = {
            let x = -(a - (1.0f64 * 0.5).ln());
            if x > 0.0 {
                x + (-x).exp().ln_1p()
            } else {
                x.exp().ln_1p()
            }
        };
        let negative_term = {
            let x = -0.1 - (1.0f64 * 0.5).ln();
            if x > 0.0 {
                x + (-x).exp().ln_1p()
            } else {
                x.exp().ln_1p()
            }
        };
        assert_abs_diff_eq!(e.value, positive_term + negative_term, epsilon = 1e-12);
    }

    #[test]
    fn nce_per_term_curvature_bounded_by_quarter() {
        // second derivative of softplus is sigma'(x) <= 1/4 everywhere
        let h = 1e-4;
        for i in -50..50 {
            let x = i as f64 * 0.2;
            let f = |t: f64| softplus(t);
            let second = (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
            assert!(second <= 0.25 + 1e-6);
        }
    }

    #[test]
    fn nce_gradient_support() {
        let s = sv(&[0.3, -0.5, 0.2, 0.9, -0.1]);
        let draw = SampleDraw {
            negatives: vec![1, 3],
        };
        let e = nce_loss(&s, 0, &draw, &ProposalDist::Uniform).unwrap();
        assert_eq!(e.gradient[2], 0.0);
        assert_eq!(e.gradient[4], 0.0);
        assert!(e.gradient[0] != 0.0 && e.gradient[1] != 0.0 && e.gradient[3] != 0.0);
    }

    #[test]
    fn huffman_two_classes() {
        let tree = build_huffman(&[1.0, 1.0]).unwrap();
        assert_eq!(tree.num_internal_nodes(), 1);
        assert_eq!(tree.depth(0), 1);
        assert_eq!(tree.depth(1), 1);
    }

    #[test]
    fn huffman_uniform_eight_is_balanced() {
        let tree = build_huffman(&[1.0; 8]).unwrap();
        for j in 0..8 {
            assert_eq!(tree.depth(j), 3, "class {j}");
        }
    }

    #[test]
    fn huffman_skewed_depths() {
        let tree = build_huffman(&[8.0, 4.0, 2.0, 1.0, 1.0]).unwrap();
        let depths: Vec<usize> = (0..5).map(|j| tree.depth(j)).collect();
        assert_eq!(depths, vec![1, 2, 3, 4, 4]);
    }

    #[test]
    fn huffman_rejects_zero_freq() {
        assert!(build_huffman(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn huffman_json_roundtrip() {
        let tree = build_huffman(&[3.0, 1.0, 2.0, 5.0]).unwrap();
        let restored = HuffmanTree::from_json(&tree.to_json()).unwrap();
        for j in 0..4 {
            assert_eq!(tree.path(j), restored.path(j));
        }
    }

    #[test]
    fn hsm_balanced_zero_logits() {
        let tree = build_huffman(&[1.0; 8]).unwrap();
        let logits = vec![0.0; 7];
        let e = hsm_loss(&logits, 0, &tree).unwrap();
        assert_abs_diff_eq!(e.value, 3.0 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn hsm_distribution_sums_to_one() {
        let c = 64;
        let freq: Vec<f64> = (0..c).map(|i| 1.0 + (i % 7) as f64).collect();
        let tree = build_huffman(&freq).unwrap();
        let logits: Vec<f64> = (0..c - 1).map(|i| ((i as f64) * 0.83).sin()).collect();
        let total: f64 = tree.distribution(&logits).iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn hsm_gradient_touches_only_path_nodes() {
        let tree = build_huffman(&[1.0; 16]).unwrap();
        let logits: Vec<f64> = (0..15).map(|i| (i as f64) * 0.1 - 0.7).collect();
        let e = hsm_loss(&logits, 5, &tree).unwrap();
        let on_path: std::collections::HashSet<usize> =
            tree.path(5).iter().map(|&(u, _)| u).collect();
        for (u, &g) in e.gradient.iter().enumerate() {
            if on_path.contains(&u) {
                assert!(g != 0.0);
            } else {
                assert_eq!(g, 0.0);
            }
        }
    }

    #[test]
    fn hsm_implicit_scores_zero_logits() {
        let tree = build_huffman(&[1.0; 8]).unwrap();
        let scores = hsm_implicit_scores(&vec![0.0; 7], &tree).unwrap();
        assert!(scores.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hsm_implicit_scores_two_classes() {
        let tree = build_huffman(&[1.0, 1.0]).unwrap();
        let scores = hsm_implicit_scores(&[0.7], &tree).unwrap();
        // one class sees the node logit, the other the zero branch
        let diff = (scores[0] - scores[1]).abs();
        assert_abs_diff_eq!(diff, 0.7, epsilon = 1e-12);
    }

    /// Recover each node logit from the implicit scores by walking the tree:
    /// the leaf reached by one left branch at u followed by only right
    /// branches carries exactly prefix + s_u.
    fn recover_node_logits(tree: &HuffmanTree, implicit: &[f64]) -> Vec<f64> {
        fn rightmost_leaf(tree: &HuffmanTree, child: Child) -> usize {
            match child {
                Child::Leaf(c) => c,
                Child::Node(id) => rightmost_leaf(tree, tree.node(id).right),
            }
        }
        let mut logits = vec![0.0; tree.num_internal_nodes()];
        let mut stack = vec![(tree.root(), 0.0f64)];
        while let Some((u, prefix)) = stack.pop() {
            let probe = rightmost_leaf(tree, tree.node(u).left);
            let s_u = implicit[probe] - prefix;
            logits[u] = s_u;
            if let Child::Node(id) = tree.node(u).left {
                stack.push((id, prefix + s_u));
            }
            if let Child::Node(id) = tree.node(u).right {
                stack.push((id, prefix));
            }
        }
        logits
    }

    #[test]
    fn hsm_implicit_scores_roundtrip() {
        let c = 8;
        let tree = build_huffman(&vec![1.0; c]).unwrap();
        let logits: Vec<f64> = (0..c - 1).map(|i| ((i as f64) * 1.3).cos()).collect();
        let implicit = hsm_implicit_scores(&logits, &tree).unwrap();
        let recovered = recover_node_logits(&tree, &implicit);
        for (a, b) in logits.iter().zip(&recovered) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        // and the distribution from recovered logits matches
        let d1 = tree.distribution(&logits);
        let d2 = tree.distribution(&recovered);
        for (a, b) in d1.iter().zip(&d2) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn rg_partition_examples() {
        let s = sv(&[0.0; 7]);
        assert_abs_diff_eq!(rg_partition(&s), 7f64.ln(), epsilon = 1e-12);

        let s = sv(&[2.5; 4]);
        assert_abs_diff_eq!(rg_partition(&s), 4f64.ln() + 2.5, epsilon = 1e-12);
    }

    #[test]
    fn rg_partition_cubic_remainder() {
        let c = 10;
        let dir: Vec<f64> = (0..c).map(|i| ((i as f64) * 0.9).sin()).collect();
        let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let unit: Vec<f64> = dir.iter().map(|v| v / norm).collect();
        let err_at = |scale: f64| {
            let raw: Vec<f64> = unit.iter().map(|v| v * scale).collect();
            let s = ScoreVector::new(raw.clone()).unwrap();
            (rg_partition(&s) - log_sum_exp(&raw)).abs()
        };
        let e1 = err_at(0.01);
        assert!(e1 <= 1e-5);
        let e2 = err_at(0.005);
        let ratio = e1 / e2;
        assert!((ratio - 8.0).abs() < 2.5, "ratio {ratio}");
    }

    #[test]
    fn rg_loss_examples_and_gradient() {
        let c = 5;
        let y = LabelVector::one_hot(c, 2).unwrap();
        let e = rg_loss(&sv(&[0.0; 5]), &y).unwrap();
        assert_abs_diff_eq!(e.value, 5f64.ln(), epsilon = 1e-12);

        let e = rg_loss(&sv(&[3.0; 5]), &y).unwrap();
        assert_abs_diff_eq!(e.value, 5f64.ln(), epsilon = 1e-12);

        // finite differences
        let raw = [0.3, -0.7, 0.2, 1.1, -0.4];
        let e = rg_loss(&sv(&raw), &y).unwrap();
        let h = 1e-6;
        for i in 0..c {
            let mut sp = raw;
            let mut sm = raw;
            sp[i] += h;
            sm[i] -= h;
            let fd = (rg_loss(&sv(&sp), &y).unwrap().value - rg_loss(&sv(&sm), &y).unwrap().value)
                / (2.0 * h);
            let rel = (fd - e.gradient[i]).abs() / fd.abs().max(e.gradient[i].abs()).max(1e-6);
            assert!(rel <= 1e-6, "i={i} fd={fd} an={}", e.gradient[i]);
        }
    }

    #[test]
    fn deterministic_replay() {
        let proposal = ProposalDist::LogUniform;
        let mut a = draw_stream(42, 3);
        let mut b = draw_stream(42, 3);
        let d1 = proposal.sample(50, 10, &mut a, None).unwrap();
        let d2 = proposal.sample(50, 10, &mut b, None).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn dns_selects_high_scoring_candidates() {
        let c = 30;
        let raw: Vec<f64> = (0..c).map(|i| i as f64).collect();
        let proposal = ProposalDist::Dns { pool: 20, top: 5 };
        let mut rng = draw_stream(1, 0);
        let draw = proposal.sample(c, 5, &mut rng, Some(&raw)).unwrap();
        // the kept negatives are the highest-scoring of the pool, so they must
        // all sit in the upper range of class ids
        assert!(draw.negatives.iter().all(|&j| j >= 10));
    }
}
