//! Matrix-factorization training: a two-tower backbone, minibatch gradient
//! descent for every loss, an alternating least-squares solver for the RG
//! quadratic objective, convergence-factor estimation on the convex
//! last-layer problem, and per-epoch cost instrumentation.

use crate::approx::{build_huffman, draw_stream, HuffmanTree, ProposalDist};
use crate::datasets::{InteractionSet, Split};
use crate::error::{Error, Result};
use crate::fy_losses::{fy_loss, rankmax_grad, softmax_loss, LabelVector, RegularizerKind};
use crate::metrics::{evaluate, MetricsReport};
use crate::simplex_maps::ScoreVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

const MASKED_SCORE: f64 = -1e30;

/// Linear user/item embeddings; node factors exist only when training
/// against the tree-factorized loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MFModel {
    pub user_factors: Vec<Vec<f64>>,
    pub item_factors: Vec<Vec<f64>>,
    pub node_factors: Option<Vec<Vec<f64>>>,
    pub d: usize,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(rng);
                    scale * g
                })
                .collect()
        })
        .collect()
}

impl MFModel {
    pub fn init(n_users: usize, n_items: usize, d: usize, seed: u64) -> Result<Self> {
        if d < 1 || n_users < 1 || n_items < 2 {
            return Err(Error::domain("need n_users >= 1, n_items >= 2, d >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(MFModel {
            user_factors: gaussian_matrix(&mut rng, n_users, d, 0.1),
            item_factors: gaussian_matrix(&mut rng, n_items, d, 0.1),
            node_factors: None,
            d,
        })
    }

    /// Attach tree-node embeddings (n_items - 1 internal nodes).
    pub fn with_node_factors(mut self, seed: u64) -> Self {
        let n_nodes = self.item_factors.len() - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        self.node_factors = Some(gaussian_matrix(&mut rng, n_nodes, self.d, 0.1));
        self
    }

    pub fn n_users(&self) -> usize {
        self.user_factors.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_factors.len()
    }

    fn score_against(&self, user: usize, rows: &[Vec<f64>], j: usize) -> f64 {
        self.user_factors[user]
            .iter()
            .zip(&rows[j])
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Full item score vector for one user.
    pub fn scores(&self, user: usize) -> Vec<f64> {
        (0..self.n_items())
            .map(|j| self.score_against(user, &self.item_factors, j))
            .collect()
    }

    pub fn frobenius_sq(&self) -> f64 {
        let part = |rows: &Vec<Vec<f64>>| -> f64 {
            rows.iter()
                .flat_map(|r| r.iter())
                .map(|v| v * v)
                .sum()
        };
        part(&self.user_factors)
            + part(&self.item_factors)
            + self.node_factors.as_ref().map_or(0.0, part)
    }
}

/// Which training loss drives gradient steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LossSpec {
    Softmax,
    Sparsemax,
    Entmax { alpha: f64 },
    Rankmax,
    SsmSimple { k: usize },
    Ssm { k: usize, proposal: ProposalDist },
    Nce { k: usize, proposal: ProposalDist },
    Hsm,
    Rg,
}

impl LossSpec {
    pub fn needs_tree(&self) -> bool {
        matches!(self, LossSpec::Hsm)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LossSpec::Entmax { alpha } => {
                if !(*alpha > 1.0 && *alpha <= 2.0) {
                    return Err(Error::config("entmax alpha must lie in (1, 2]"));
                }
            }
            LossSpec::SsmSimple { k } | LossSpec::Ssm { k, .. } | LossSpec::Nce { k, .. } => {
                if *k < 1 {
                    return Err(Error::config("need k >= 1 negatives"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub learning_rate: f64,
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub cutoffs: Vec<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.l2 < 0.0 {
            return Err(Error::config("l2 must be nonnegative"));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::config("need epochs >= 1 and batch_size >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub wall_time_s: f64,
    pub score_evals: u64,
    pub metrics: Option<MetricsReport>,
    pub diverged: bool,
}

/// Score-level gradient of one example: (slot index, gradient) pairs over
/// item slots or tree-node slots.
enum ScoreGrad {
    Items(Vec<(usize, f64)>),
    Nodes(Vec<(usize, f64)>),
}

fn softplus(x: f64) -> f64 {
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

/// Loss and score gradient of one (user, item) example, plus the number of
/// score computations it cost. Sampled losses only touch the dot products
/// they need.
fn example_eval(
    model: &MFModel,
    tree: Option<&HuffmanTree>,
    user: usize,
    item: usize,
    loss: &LossSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, ScoreGrad, u64)> {
    let c = model.n_items();
    match loss {
        LossSpec::Softmax
        | LossSpec::Sparsemax
        | LossSpec::Entmax { .. }
        | LossSpec::Rankmax
        | LossSpec::Rg => {
            let s = ScoreVector::new(model.scores(user))?;
            let y = LabelVector::one_hot(c, item)?;
            let eval = match loss {
                LossSpec::Softmax => softmax_loss(&s, &y)?,
                LossSpec::Sparsemax => fy_loss(&s, &y, RegularizerKind::HalfSquaredL2)?,
                LossSpec::Entmax { alpha } => {
                    fy_loss(&s, &y, RegularizerKind::TsallisNeg { alpha: *alpha })?
                }
                LossSpec::Rankmax => rankmax_grad(&s, item)?,
                LossSpec::Rg => crate::approx::rg_loss(&s, &y)?,
                _ => unreachable!(),
            };
            let grads = eval
                .gradient
                .iter()
                .enumerate()
                .filter(|&(_, &g)| g != 0.0)
                .map(|(j, &g)| (j, g))
                .collect();
            Ok((eval.value, ScoreGrad::Items(grads), c as u64))
        }
        LossSpec::SsmSimple { k } | LossSpec::Ssm { k, .. } => {
            // sampled softmax over {item} + k negatives; the corrected
            // variant shifts logits by -log q before the local softmax
            let (negatives, extra_evals, correction): (Vec<usize>, u64, Option<Vec<f64>>) =
                match loss {
                    LossSpec::SsmSimple { .. } => {
                        ((0..*k).map(|_| rng.gen_range(0..c)).collect(), 0, None)
                    }
                    LossSpec::Ssm { proposal, .. } => match proposal {
                        ProposalDist::Dns { pool, .. } => {
                            // DNS ranks a uniform candidate pool by current
                            // score, which costs one eval per candidate
                            let pool_scores: Vec<(usize, f64)> = (0..*pool)
                                .map(|_| {
                                    let j = rng.gen_range(0..c);
                                    (j, model.score_against(user, &model.item_factors, j))
                                })
                                .collect();
                            let mut ranked = pool_scores.clone();
                            ranked.sort_by(|a, b| {
                                b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0))
                            });
                            let top = match proposal {
                                ProposalDist::Dns { top, .. } => *top,
                                _ => unreachable!(),
                            };
                            let kept: Vec<usize> =
                                ranked[..top.min(ranked.len())].iter().map(|t| t.0).collect();
                            let negs = (0..*k).map(|i| kept[i % kept.len()]).collect();
                            (negs, *pool as u64, None)
                        }
                        other => {
                            let q = other.probabilities(c)?;
                            let draw = other.sample(c, *k, rng, None)?;
                            (
                                draw.negatives,
                                0,
                                Some(q.iter().map(|&v| v.ln()).collect()),
                            )
                        }
                    },
                    _ => unreachable!(),
                };
            let logit = |j: usize| -> f64 {
                let raw = model.score_against(user, &model.item_factors, j);
                match &correction {
                    Some(logq) => raw - logq[j],
                    None => raw,
                }
            };
            let sy = logit(item);
            let neg_logits: Vec<f64> = negatives.iter().map(|&j| logit(j)).collect();
            let m = neg_logits.iter().cloned().fold(sy, f64::max);
            let ey = (sy - m).exp();
            let en: Vec<f64> = neg_logits.iter().map(|&v| (v - m).exp()).collect();
            let z = ey + en.iter().sum::<f64>();
            let value = z.ln() + m - sy;
            let mut grads: BTreeMap<usize, f64> = BTreeMap::new();
            *grads.entry(item).or_default() += ey / z - 1.0;
            for (&j, e) in negatives.iter().zip(&en) {
                *grads.entry(j).or_default() += e / z;
            }
            Ok((
                value,
                ScoreGrad::Items(grads.into_iter().collect()),
                *k as u64 + 1 + extra_evals,
            ))
        }
        LossSpec::Nce { k, proposal } => {
            let q = proposal.probabilities(c)?;
            let draw = proposal.sample(c, *k, rng, None)?;
            let kf = *k as f64;
            let mut grads: BTreeMap<usize, f64> = BTreeMap::new();
            let sy = model.score_against(user, &model.item_factors, item);
            let ay = sy - (kf * q[item]).ln();
            let mut value = softplus(-ay);
            *grads.entry(item).or_default() += -sigmoid(-ay);
            for &j in &draw.negatives {
                let aj = model.score_against(user, &model.item_factors, j) - (kf * q[j]).ln();
                value += softplus(aj);
                *grads.entry(j).or_default() += sigmoid(aj);
            }
            Ok((
                value,
                ScoreGrad::Items(grads.into_iter().collect()),
                *k as u64 + 1,
            ))
        }
        LossSpec::Hsm => {
            let tree = tree.ok_or_else(|| Error::usage("tree-factorized loss needs a tree"))?;
            let nodes = model
                .node_factors
                .as_ref()
                .ok_or_else(|| Error::usage("model has no node factors"))?;
            let mut value = 0.0;
            let mut grads = Vec::new();
            for &(u, b) in tree.path(item) {
                let su = model.score_against(user, nodes, u);
                let bs = b as f64 * su;
                value += softplus(-bs);
                grads.push((u, -(b as f64) * sigmoid(-bs)));
            }
            let evals = tree.path(item).len() as u64;
            Ok((value, ScoreGrad::Nodes(grads), evals))
        }
    }
}

/// Average ranking metrics over users holding at least one item in `split`,
/// with that user's training items masked out of the candidate ranking.
pub fn split_metrics(
    model: &MFModel,
    data: &InteractionSet,
    tree: Option<&HuffmanTree>,
    loss: &LossSpec,
    split: Split,
    cutoffs: &[usize],
) -> Result<MetricsReport> {
    let held = data.items_by_user(split);
    let train = data.items_by_user(Split::Train);
    let c = model.n_items();
    let mut sum_p: BTreeMap<usize, f64> = cutoffs.iter().map(|&k| (k, 0.0)).collect();
    let mut sum_r = sum_p.clone();
    let mut sum_n = sum_p.clone();
    let mut sum_top = 0.0;
    let mut users = 0usize;
    for user in 0..model.n_users() {
        if held[user].is_empty() {
            continue;
        }
        let mut scores = if loss.needs_tree() {
            let tree = tree.ok_or_else(|| Error::usage("tree-factorized loss needs a tree"))?;
            let nodes = model
                .node_factors
                .as_ref()
                .ok_or_else(|| Error::usage("model has no node factors"))?;
            let logits: Vec<f64> = (0..tree.num_internal_nodes())
                .map(|u| model.score_against(user, nodes, u))
                .collect();
            tree.distribution(&logits)
                .iter()
                .map(|&p| p.max(1e-300).ln())
                .collect()
        } else {
            model.scores(user)
        };
        for &j in &train[user] {
            scores[j] = MASKED_SCORE;
        }
        let mut labels = vec![0u8; c];
        for &j in &held[user] {
            labels[j] = 1;
        }
        let report = evaluate(
            &ScoreVector::new(scores)?,
            &LabelVector::new(labels)?,
            cutoffs,
        )?;
        for &k in cutoffs {
            *sum_p.get_mut(&k).unwrap() += report.precision_at_k[&k];
            *sum_r.get_mut(&k).unwrap() += report.recall_at_k[&k];
            *sum_n.get_mut(&k).unwrap() += report.ndcg_at_k[&k];
        }
        sum_top += report.topk_error;
        users += 1;
    }
    if users == 0 {
        return Err(Error::domain("no users with held-out items"));
    }
    let n = users as f64;
    Ok(MetricsReport {
        precision_at_k: sum_p.into_iter().map(|(k, v)| (k, v / n)).collect(),
        recall_at_k: sum_r.into_iter().map(|(k, v)| (k, v / n)).collect(),
        ndcg_at_k: sum_n.into_iter().map(|(k, v)| (k, v / n)).collect(),
        topk_error: sum_top / n,
    })
}

/// Huffman tree over items from training popularity (plus-one smoothing so
/// unseen items still get leaves).
pub fn popularity_tree(data: &InteractionSet) -> Result<HuffmanTree> {
    let mut freq = vec![1.0; data.n_items];
    for t in data.of_split(Split::Train) {
        freq[t.item] += 1.0;
    }
    build_huffman(&freq)
}

/// Minibatch gradient descent over the training split. Emits one record
/// per epoch with validation metrics; aborts with a flagged record when
/// the loss diverges.
pub fn train(
    mut model: MFModel,
    data: &InteractionSet,
    cfg: &TrainConfig,
) -> Result<(MFModel, Vec<EpochRecord>)> {
    cfg.validate()?;
    if model.n_items() != data.n_items || model.n_users() != data.n_users {
        return Err(Error::usage("model shape does not match dataset"));
    }
    if cfg.cutoffs.iter().any(|&k| k == 0 || k > data.n_items) {
        return Err(Error::config("cutoffs must lie in [1, n_items]"));
    }
    let tree = if cfg.loss.needs_tree() {
        if model.node_factors.is_none() {
            model = model.with_node_factors(cfg.seed);
        }
        Some(popularity_tree(data)?)
    } else {
        None
    };
    let mut examples: Vec<(usize, usize)> = data
        .of_split(Split::Train)
        .map(|t| (t.user, t.item))
        .collect();
    if examples.is_empty() {
        return Err(Error::domain("no training interactions"));
    }
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut draw_counter = 0u64;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1_000_000 + epoch as u64);
        for i in (1..examples.len()).rev() {
            let j = rng.gen_range(0..=i);
            examples.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut score_evals = 0u64;
        let mut diverged = false;
        'batches: for batch in examples.chunks(cfg.batch_size) {
            let mut user_grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            let mut item_grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            let mut node_grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for &(user, item) in batch {
                let mut draw_rng = draw_stream(cfg.seed, draw_counter);
                draw_counter += 1;
                let (value, grad, evals) =
                    example_eval(&model, tree.as_ref(), user, item, &cfg.loss, &mut draw_rng)?;
                score_evals += evals;
                epoch_loss += value;
                if !value.is_finite() || value > 1e10 {
                    diverged = true;
                    break 'batches;
                }
                let ug = user_grads
                    .entry(user)
                    .or_insert_with(|| vec![0.0; model.d]);
                match grad {
                    ScoreGrad::Items(pairs) => {
                        for (j, g) in pairs {
                            for t in 0..model.d {
                                ug[t] += g * model.item_factors[j][t];
                            }
                            let ig = item_grads
                                .entry(j)
                                .or_insert_with(|| vec![0.0; model.d]);
                            for t in 0..model.d {
                                ig[t] += g * model.user_factors[user][t];
                            }
                        }
                    }
                    ScoreGrad::Nodes(pairs) => {
                        let nodes = model.node_factors.as_ref().unwrap();
                        for (u, g) in pairs {
                            for t in 0..model.d {
                                ug[t] += g * nodes[u][t];
                            }
                            let ng = node_grads
                                .entry(u)
                                .or_insert_with(|| vec![0.0; model.d]);
                            for t in 0..model.d {
                                ng[t] += g * model.user_factors[user][t];
                            }
                        }
                    }
                }
            }
            let scale = cfg.learning_rate / batch.len() as f64;
            for (user, g) in user_grads {
                for t in 0..model.d {
                    model.user_factors[user][t] -= scale * g[t];
                }
            }
            for (j, g) in item_grads {
                for t in 0..model.d {
                    model.item_factors[j][t] -= scale * g[t];
                }
            }
            if !node_grads.is_empty() {
                let nodes = model.node_factors.as_mut().unwrap();
                for (u, g) in node_grads {
                    for t in 0..model.d {
                        nodes[u][t] -= scale * g[t];
                    }
                }
            }
            // L2 term of the global objective: gradient gamma * theta
            if cfg.l2 > 0.0 {
                let decay = 1.0 - cfg.learning_rate * cfg.l2;
                let shrink = |rows: &mut Vec<Vec<f64>>| {
                    for row in rows.iter_mut() {
                        for v in row.iter_mut() {
                            *v *= decay;
                        }
                    }
                };
                shrink(&mut model.user_factors);
                shrink(&mut model.item_factors);
                if let Some(nodes) = model.node_factors.as_mut() {
                    shrink(nodes);
                }
            }
        }
        let train_loss =
            epoch_loss / examples.len() as f64 + cfg.l2 / 2.0 * model.frobenius_sq();
        let metrics = if diverged {
            None
        } else {
            Some(split_metrics(
                &model,
                data,
                tree.as_ref(),
                &cfg.loss,
                Split::Valid,
                &cfg.cutoffs,
            )?)
        };
        records.push(EpochRecord {
            epoch,
            train_loss,
            wall_time_s: start.elapsed().as_secs_f64().max(1e-9),
            score_evals: score_evals.max(1),
            metrics,
            diverged,
        });
        if diverged {
            break;
        }
    }
    Ok((model, records))
}

/// Dense d x d solve by Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::domain("singular system"));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// RG training objective: sum over users of n_u * Z_RG(V x_u) minus the
/// positive scores, plus the L2 term.
pub fn rg_objective(model: &MFModel, data: &InteractionSet, gamma: f64) -> f64 {
    let positives = data.items_by_user(Split::Train);
    let c = model.n_items() as f64;
    let mut obj = gamma / 2.0 * model.frobenius_sq();
    for user in 0..model.n_users() {
        let n_u = positives[user].len() as f64;
        if n_u == 0.0 {
            continue;
        }
        let s = model.scores(user);
        let sum: f64 = s.iter().sum();
        let sumsq: f64 = s.iter().map(|v| v * v).sum();
        let z = c.ln() + sum / c + 0.5 * (sumsq / c - (sum / c) * (sum / c));
        obj += n_u * z;
        for &item in &positives[user] {
            obj -= s[item];
        }
    }
    obj
}

/// Alternating least squares on the RG objective. Each half-sweep solves
/// exact row-wise quadratic minimizations, so the objective never
/// increases. Requires l2 > 0 to keep every system positive definite.
pub fn train_rg_als(
    mut model: MFModel,
    data: &InteractionSet,
    cfg: &TrainConfig,
    sweeps: usize,
) -> Result<(MFModel, Vec<EpochRecord>)> {
    if cfg.loss != LossSpec::Rg {
        return Err(Error::config("alternating solver applies to the RG loss only"));
    }
    if !(cfg.l2 > 0.0) {
        return Err(Error::config("alternating solver requires l2 > 0"));
    }
    if model.n_items() != data.n_items || model.n_users() != data.n_users {
        return Err(Error::usage("model shape does not match dataset"));
    }
    let gamma = cfg.l2;
    let d = model.d;
    let c = model.n_items();
    let cf = c as f64;
    let positives = data.items_by_user(Split::Train);
    let n_u: Vec<f64> = positives.iter().map(|p| p.len() as f64).collect();
    let mut records = Vec::new();
    let mut half_sweep = 0usize;
    for _ in 0..sweeps {
        // user half-sweep: (n_u V^T M V + gamma I) x = c_u - (n_u/C) V^T 1
        let start = Instant::now();
        let mut vt1 = vec![0.0; d];
        let mut vtv = vec![vec![0.0; d]; d];
        for row in &model.item_factors {
            for t in 0..d {
                vt1[t] += row[t];
                for u in 0..d {
                    vtv[t][u] += row[t] * row[u];
                }
            }
        }
        // V^T M V = (1/C) V^T V - (1/C^2) (V^T 1)(V^T 1)^T
        let mut vtmv = vec![vec![0.0; d]; d];
        for t in 0..d {
            for u in 0..d {
                vtmv[t][u] = vtv[t][u] / cf - vt1[t] * vt1[u] / (cf * cf);
            }
        }
        for user in 0..model.n_users() {
            if positives[user].is_empty() {
                continue;
            }
            let mut a = vec![vec![0.0; d]; d];
            for t in 0..d {
                for u in 0..d {
                    a[t][u] = n_u[user] * vtmv[t][u];
                }
                a[t][t] += gamma;
            }
            let mut b = vec![0.0; d];
            for &item in &positives[user] {
                for t in 0..d {
                    b[t] += model.item_factors[item][t];
                }
            }
            for t in 0..d {
                b[t] -= n_u[user] / cf * vt1[t];
            }
            model.user_factors[user] = solve_dense(a, b)?;
        }
        half_sweep += 1;
        records.push(EpochRecord {
            epoch: half_sweep,
            train_loss: rg_objective(&model, data, gamma),
            wall_time_s: start.elapsed().as_secs_f64().max(1e-9),
            score_evals: (model.n_users() * c) as u64,
            metrics: None,
            diverged: false,
        });

        // item half-sweep: exact coordinate minimization per row v_j with
        // A = (1/C - 1/C^2) G + gamma I shared across rows,
        // b_j = c_j - m1/C + G (r - v_j) / C^2, r = sum_l v_l
        let start = Instant::now();
        let mut g = vec![vec![0.0; d]; d];
        let mut m1 = vec![0.0; d];
        for user in 0..model.n_users() {
            if positives[user].is_empty() {
                continue;
            }
            let x = &model.user_factors[user];
            for t in 0..d {
                m1[t] += n_u[user] * x[t];
                for u in 0..d {
                    g[t][u] += n_u[user] * x[t] * x[u];
                }
            }
        }
        let mut c_rows = vec![vec![0.0; d]; c];
        for user in 0..model.n_users() {
            for &item in &positives[user] {
                for t in 0..d {
                    c_rows[item][t] += model.user_factors[user][t];
                }
            }
        }
        let mut r = vec![0.0; d];
        for row in &model.item_factors {
            for t in 0..d {
                r[t] += row[t];
            }
        }
        let coef = 1.0 / cf - 1.0 / (cf * cf);
        let mut a_shared = vec![vec![0.0; d]; d];
        for t in 0..d {
            for u in 0..d {
                a_shared[t][u] = coef * g[t][u];
            }
            a_shared[t][t] += gamma;
        }
        for j in 0..c {
            let old = model.item_factors[j].clone();
            let mut r_other = vec![0.0; d];
            for t in 0..d {
                r_other[t] = r[t] - old[t];
            }
            let mut b = vec![0.0; d];
            for t in 0..d {
                let g_r: f64 = (0..d).map(|u| g[t][u] * r_other[u]).sum();
                b[t] = c_rows[j][t] - m1[t] / cf + g_r / (cf * cf);
            }
            let new = solve_dense(a_shared.clone(), b)?;
            for t in 0..d {
                r[t] += new[t] - old[t];
            }
            model.item_factors[j] = new;
        }
        half_sweep += 1;
        records.push(EpochRecord {
            epoch: half_sweep,
            train_loss: rg_objective(&model, data, gamma),
            wall_time_s: start.elapsed().as_secs_f64().max(1e-9),
            score_evals: (model.n_users() * c) as u64,
            metrics: None,
            diverged: false,
        });
    }
    Ok((model, records))
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceEstimate {
    pub rho_hat: f64,
    pub kappa_bound: f64,
    pub l_head_bound: f64,
    pub converged: bool,
}

fn mapping_grad(loss: &LossSpec, s: &ScoreVector, y: usize) -> Result<Vec<f64>> {
    let c = s.len();
    let label = LabelVector::one_hot(c, y)?;
    let eval = match loss {
        LossSpec::Softmax => softmax_loss(s, &label)?,
        LossSpec::Sparsemax => fy_loss(s, &label, RegularizerKind::HalfSquaredL2)?,
        LossSpec::Entmax { alpha } => {
            fy_loss(s, &label, RegularizerKind::TsallisNeg { alpha: *alpha })?
        }
        _ => return Err(Error::usage("convergence estimation needs an exact mapping loss")),
    };
    Ok(eval.gradient)
}

/// Geometric decay rate of gradient descent on the strongly convex
/// last-layer problem: features fixed, only the C x d score matrix trained.
/// The analytic condition-number bound 1 + ||J|| L_G / gamma rides along.
pub fn estimate_convergence_factor(
    loss: &LossSpec,
    features: &[Vec<f64>],
    labels: &[usize],
    c: usize,
    gamma: f64,
    eta: f64,
) -> Result<ConvergenceEstimate> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::usage("need matching nonempty features and labels"));
    }
    if !(gamma > 0.0) {
        return Err(Error::config("need gamma > 0 for a strongly convex head"));
    }
    if labels.iter().any(|&y| y >= c) {
        return Err(Error::domain("label out of range"));
    }
    let d = features[0].len();
    let n = features.len();
    let l_g = features
        .iter()
        .map(|x| x.iter().map(|v| v * v).sum::<f64>())
        .fold(0.0, f64::max);
    let j_bound = match loss {
        LossSpec::Softmax => 0.5,
        LossSpec::Sparsemax | LossSpec::Entmax { .. } => 1.0,
        _ => return Err(Error::usage("convergence estimation needs an exact mapping loss")),
    };
    let l_head_bound = j_bound * l_g + gamma;
    let kappa_bound = 1.0 + j_bound * l_g / gamma;
    let eta = if eta > 0.0 {
        eta
    } else {
        2.0 / (l_head_bound + gamma)
    };

    let grad_at = |w: &[f64]| -> Result<Vec<f64>> {
        let mut grad: Vec<f64> = w.iter().map(|&v| gamma * v).collect();
        for (x, &y) in features.iter().zip(labels) {
            let s: Vec<f64> = (0..c)
                .map(|row| {
                    (0..d)
                        .map(|t| w[row * d + t] * x[t])
                        .sum()
                })
                .collect();
            let gs = mapping_grad(loss, &ScoreVector::new(s)?, y)?;
            for row in 0..c {
                if gs[row] == 0.0 {
                    continue;
                }
                for t in 0..d {
                    grad[row * d + t] += gs[row] * x[t] / n as f64;
                }
            }
        }
        Ok(grad)
    };

    // a generic start: from the origin the rows a sparse mapping never
    // activates carry no initial error, hiding the slow gamma mode
    let mut w0_rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w0: Vec<f64> = (0..c * d)
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut w0_rng);
            g
        })
        .collect();
    // reference optimum: run far past the measurement horizon
    let mut w_star = w0.clone();
    let mut converged = false;
    for _ in 0..8000 {
        let g = grad_at(&w_star)?;
        let gnorm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (wv, gv) in w_star.iter_mut().zip(&g) {
            *wv -= eta * gv;
        }
        if gnorm < 1e-13 {
            converged = true;
            break;
        }
    }

    // replay from the start, recording distances to the optimum
    let horizon = 400;
    let mut w = w0;
    let mut dists = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let g = grad_at(&w)?;
        for (wv, gv) in w.iter_mut().zip(&g) {
            *wv -= eta * gv;
        }
        let dist: f64 = w
            .iter()
            .zip(&w_star)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        dists.push(dist);
    }
    // fit log-distance slope over the linear-rate window: the final half of
    // iterations still above the round-off floor
    let usable: Vec<(f64, f64)> = dists
        .iter()
        .enumerate()
        .filter(|&(_, &dv)| dv > 1e-10)
        .map(|(i, &dv)| (i as f64, dv.ln()))
        .collect();
    if usable.len() < 10 {
        return Ok(ConvergenceEstimate {
            rho_hat: 1e-6,
            kappa_bound,
            l_head_bound,
            converged,
        });
    }
    let window = &usable[usable.len() / 2..];
    let m = window.len() as f64;
    let mean_t: f64 = window.iter().map(|p| p.0).sum::<f64>() / m;
    let mean_l: f64 = window.iter().map(|p| p.1).sum::<f64>() / m;
    let cov: f64 = window
        .iter()
        .map(|p| (p.0 - mean_t) * (p.1 - mean_l))
        .sum();
    let var: f64 = window.iter().map(|p| (p.0 - mean_t) * (p.0 - mean_t)).sum();
    let slope = cov / var;
    Ok(ConvergenceEstimate {
        rho_hat: slope.exp().clamp(1e-12, 1.0 - 1e-12),
        kappa_bound,
        l_head_bound,
        converged,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfilePoint {
    pub c: usize,
    pub median_time_s: f64,
    pub score_evals: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComplexityProfile {
    pub points: Vec<ProfilePoint>,
    /// least-squares slope of log(time) vs log(C)
    pub time_slope: f64,
}

/// Per-epoch cost of one loss across catalog sizes: exact score-eval counts
/// and median wall time of at least three runs, with the fitted log-log
/// time slope.
pub fn complexity_profile(
    loss: &LossSpec,
    c_values: &[usize],
    n: usize,
    runs: usize,
) -> Result<ComplexityProfile> {
    loss.validate()?;
    if c_values.len() < 2 || n < 1 {
        return Err(Error::usage("need at least two catalog sizes and n >= 1"));
    }
    let runs = runs.max(3);
    let d = 16;
    let mut points = Vec::with_capacity(c_values.len());
    for &c in c_values {
        if c < 2 {
            return Err(Error::domain("catalog size must be >= 2"));
        }
        let model = {
            let mut m = MFModel::init(1, c, d, 42)?;
            if loss.needs_tree() {
                m = m.with_node_factors(42);
            }
            m
        };
        let tree = if loss.needs_tree() {
            Some(build_huffman(&vec![1.0; c])?)
        } else {
            None
        };
        let mut times = Vec::with_capacity(runs);
        let mut score_evals = 0u64;
        for run in 0..runs {
            let mut rng = draw_stream(7, run as u64);
            let start = Instant::now();
            let mut evals = 0u64;
            let mut sink = 0.0;
            for i in 0..n {
                let item = i % c;
                let (value, _, e) =
                    example_eval(&model, tree.as_ref(), 0, item, loss, &mut rng)?;
                sink += value;
                evals += e;
            }
            std::hint::black_box(sink);
            times.push(start.elapsed().as_secs_f64().max(1e-9));
            score_evals = evals;
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        points.push(ProfilePoint {
            c,
            median_time_s: times[times.len() / 2],
            score_evals,
        });
    }
    let m = points.len() as f64;
    let mean_x: f64 = points.iter().map(|p| (p.c as f64).ln()).sum::<f64>() / m;
    let mean_y: f64 = points.iter().map(|p| p.median_time_s.ln()).sum::<f64>() / m;
    let cov: f64 = points
        .iter()
        .map(|p| ((p.c as f64).ln() - mean_x) * (p.median_time_s.ln() - mean_y))
        .sum();
    let var: f64 = points
        .iter()
        .map(|p| {
            let dx = (p.c as f64).ln() - mean_x;
            dx * dx
        })
        .sum();
    Ok(ComplexityProfile {
        points,
        time_slope: cov / var,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    n_users: usize,
    n_items: usize,
    n_nodes: usize,
    d: usize,
    dtype: String,
    seed: u64,
}

/// Factor matrices as flat little-endian f64 after a one-line JSON header.
pub fn save_checkpoint(model: &MFModel, path: &Path, seed: u64) -> Result<()> {
    let header = CheckpointHeader {
        n_users: model.n_users(),
        n_items: model.n_items(),
        n_nodes: model.node_factors.as_ref().map_or(0, |n| n.len()),
        d: model.d,
        dtype: "f64le".to_string(),
        seed,
    };
    let mut out = serde_json::to_string(&header)
        .expect("header serializes")
        .into_bytes();
    out.push(b'\n');
    let mut push_rows = |rows: &Vec<Vec<f64>>| {
        for row in rows {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    };
    push_rows(&model.user_factors);
    push_rows(&model.item_factors);
    if let Some(nodes) = &model.node_factors {
        push_rows(nodes);
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(MFModel, u64)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::config("missing checkpoint header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::config(format!("bad checkpoint header: {e}")))?;
    if header.dtype != "f64le" {
        return Err(Error::config("unsupported checkpoint dtype"));
    }
    let mut pos = newline + 1;
    let mut read_rows = |rows: usize, cols: usize| -> Result<Vec<Vec<f64>>> {
        let need = rows * cols * 8;
        if pos + need > bytes.len() {
            return Err(Error::config("truncated checkpoint"));
        }
        let out = (0..rows)
            .map(|r| {
                (0..cols)
                    .map(|col| {
                        let at = pos + (r * cols + col) * 8;
                        f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
                    })
                    .collect()
            })
            .collect();
        pos += need;
        Ok(out)
    };
    let user_factors = read_rows(header.n_users, header.d)?;
    let item_factors = read_rows(header.n_items, header.d)?;
    let node_factors = if header.n_nodes > 0 {
        Some(read_rows(header.n_nodes, header.d)?)
    } else {
        None
    };
    Ok((
        MFModel {
            user_factors,
            item_factors,
            node_factors,
            d: header.d,
        },
        header.seed,
    ))
}

/// Full-model objective and flattened gradient at fixed draws, for
/// finite-difference validation of the training plumbing.
pub fn model_loss_and_grad(
    model: &MFModel,
    examples: &[(usize, usize)],
    loss: &LossSpec,
    l2: f64,
) -> Result<(f64, Vec<f64>)> {
    let d = model.d;
    let nu = model.n_users();
    let ni = model.n_items();
    let mut value = l2 / 2.0 * model.frobenius_sq();
    let mut grad = vec![0.0; (nu + ni) * d];
    for (row, factors) in model
        .user_factors
        .iter()
        .chain(model.item_factors.iter())
        .enumerate()
    {
        for t in 0..d {
            grad[row * d + t] = l2 * factors[t];
        }
    }
    let scale = 1.0 / examples.len() as f64;
    let mut rng = draw_stream(0, 0);
    for &(user, item) in examples {
        let (v, g, _) = example_eval(model, None, user, item, loss, &mut rng)?;
        value += scale * v;
        if let ScoreGrad::Items(pairs) = g {
            for (j, gj) in pairs {
                for t in 0..d {
                    grad[user * d + t] += scale * gj * model.item_factors[j][t];
                    grad[(nu + j) * d + t] += scale * gj * model.user_factors[user][t];
                }
            }
        }
    }
    Ok((value, grad))
}
