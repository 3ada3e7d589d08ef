//! Command-line driver: direct access to the mappings and losses, plus the
//! bias/variance sweep, training, cost benchmarking, and calibration
//! subcommands. Every run writes a manifest (config hash, seed) next to its
//! outputs, and all primary CSV files are byte-reproducible under a fixed
//! manifest; wall-clock measurements go to separate timing sidecars.

use crate::approx::{build_huffman, ProposalDist};
use crate::datasets::{k_core_filter, load_tsv, split_per_user, synth_planted, InteractionSet};
use crate::divergence_lab::{delta_report, empirical_report, Scheme};
use crate::error::{Error, Result};
use crate::fy_losses::{fy_loss, rankmax_grad, softmax_loss, LabelVector, RegularizerKind};
use crate::oracles::check_topk_calibration;
use crate::simplex_maps::{
    apply_mapping, jacobian, softmax_map, spectral_norm, MappingKind, ScoreVector,
};
use crate::trainer::{
    complexity_profile, save_checkpoint, train, train_rg_als, EpochRecord, LossSpec, MFModel,
    TrainConfig,
};
use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "fybench", version, about = "Softmax-family loss experiment driver")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Print the probability vector of a mapping at given scores
    Map(MapArgs),
    /// Print a loss value and gradient at given scores
    Loss(LossArgs),
    /// Print the mapping Jacobian, optionally its spectral norm
    Jacobian(JacobianArgs),
    /// Bias/variance sweep over (scheme, k, proposal) grid points
    Biasvar(ConfigArgs),
    /// Train a matrix-factorization model
    Train(ConfigArgs),
    /// Per-epoch cost benchmark across catalog sizes
    Bench(ConfigArgs),
    /// Calibration verdicts and a gradient dump per mapping
    Calibration(ConfigArgs),
}

#[derive(Args)]
pub struct MapArgs {
    #[arg(long)]
    pub mapping: String,
    #[arg(long)]
    pub scores: String,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long = "true-class")]
    pub true_class: Option<usize>,
}

#[derive(Args)]
pub struct LossArgs {
    #[arg(long)]
    pub loss: String,
    #[arg(long)]
    pub scores: String,
    /// positive class index (repeatable for multi-label)
    #[arg(long)]
    pub label: Vec<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Args)]
pub struct JacobianArgs {
    #[arg(long)]
    pub mapping: String,
    #[arg(long)]
    pub scores: String,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long = "true-class")]
    pub true_class: Option<usize>,
    /// print only the spectral norm
    #[arg(long)]
    pub spectral: bool,
}

#[derive(Args)]
pub struct ConfigArgs {
    /// JSON experiment config
    #[arg(long)]
    pub config: PathBuf,
    /// output directory (created if missing)
    #[arg(long)]
    pub out: PathBuf,
    /// override the config seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub biasvar: Option<BiasvarSection>,
    #[serde(default)]
    pub bench: Option<BenchSection>,
    #[serde(default)]
    pub calibration: Option<CalibrationSection>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// "synthetic" or "tsv"
    pub source: String,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub k_core: Option<usize>,
    #[serde(default = "default_users")]
    pub n_users: usize,
    #[serde(default = "default_items")]
    pub n_items: usize,
    #[serde(default = "default_dim")]
    pub d: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_per_user")]
    pub interactions_per_user: usize,
}

fn default_threshold() -> f64 {
    3.0
}
fn default_users() -> usize {
    500
}
fn default_items() -> usize {
    200
}
fn default_dim() -> usize {
    8
}
fn default_temperature() -> f64 {
    3.0
}
fn default_per_user() -> usize {
    20
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub loss: String,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub proposal: Option<String>,
    pub learning_rate: f64,
    #[serde(default)]
    pub l2: f64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_cutoffs")]
    pub cutoffs: Vec<usize>,
    /// use the alternating solver (RG only)
    #[serde(default)]
    pub als: bool,
    #[serde(default = "default_sweeps")]
    pub als_sweeps: usize,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

fn default_batch() -> usize {
    2048
}
fn default_cutoffs() -> Vec<usize> {
    vec![20]
}
fn default_sweeps() -> usize {
    10
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// "lr", "k", or "q"
    pub axis: String,
    pub values: Vec<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasvarSection {
    pub schemes: Vec<String>,
    pub k_values: Vec<usize>,
    pub proposals: Vec<String>,
    #[serde(default = "default_biasvar_c")]
    pub c: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// norm of the random logit profiles
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_profiles")]
    pub profiles: usize,
}

fn default_biasvar_c() -> usize {
    20
}
fn default_trials() -> usize {
    2000
}
fn default_scale() -> f64 {
    1.0
}
fn default_profiles() -> usize {
    2
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub losses: Vec<String>,
    pub c_values: Vec<usize>,
    #[serde(default = "default_bench_n")]
    pub n: usize,
    #[serde(default = "default_bench_runs")]
    pub runs: usize,
}

fn default_bench_n() -> usize {
    500
}
fn default_bench_runs() -> usize {
    3
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub mappings: Vec<String>,
    #[serde(default = "default_cal_c")]
    pub c: usize,
    #[serde(default = "default_cal_trials")]
    pub trials: usize,
    #[serde(default)]
    pub k_values: Vec<usize>,
    #[serde(default = "default_dump")]
    pub gradient_dump_examples: usize,
}

fn default_cal_c() -> usize {
    6
}
fn default_cal_trials() -> usize {
    1000
}
fn default_dump() -> usize {
    16
}

/// Worker-pool size: FYBENCH_THREADS, else the logical core count.
pub fn thread_cap() -> usize {
    std::env::var("FYBENCH_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Run `n` independent jobs on a bounded pool; results come back in job
/// order so downstream output is scheduling-independent.
fn run_indexed<T, F>(n: usize, threads: usize, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;
    let threads = threads.clamp(1, n.max(1));
    let counter = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            let counter = &counter;
            let slots = &slots;
            let job = &job;
            scope.spawn(move || loop {
                let i = counter.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let value = job(i);
                slots.lock().expect("pool poisoned")[i] = Some(value);
            });
        }
    });
    slots
        .into_inner()
        .expect("pool poisoned")
        .into_iter()
        .map(|s| s.unwrap())
        .collect()
}

fn parse_scores(text: &str) -> Result<ScoreVector> {
    let values: Vec<f64> = text
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::usage(format!("bad score value {t:?}")))
        })
        .collect::<Result<_>>()?;
    ScoreVector::new(values)
}

fn parse_mapping(name: &str, alpha: Option<f64>, true_class: Option<usize>) -> Result<MappingKind> {
    match name {
        "softmax" => Ok(MappingKind::Softmax),
        "sparsemax" => Ok(MappingKind::Sparsemax),
        "entmax" => Ok(MappingKind::Entmax {
            alpha: alpha.ok_or_else(|| Error::usage("entmax needs --alpha"))?,
        }),
        "rankmax" => Ok(MappingKind::Rankmax {
            true_class: true_class.ok_or_else(|| Error::usage("rankmax needs --true-class"))?,
        }),
        other => Err(Error::usage(format!("unknown mapping {other:?}"))),
    }
}

fn parse_scheme(name: &str) -> Result<Scheme> {
    match name {
        "ssm-simple" => Ok(Scheme::SsmSimple),
        "ssm" => Ok(Scheme::Ssm),
        "nce" => Ok(Scheme::Nce),
        "hsm" => Ok(Scheme::Hsm),
        "rg" => Ok(Scheme::Rg),
        other => Err(Error::config(format!("unknown scheme {other:?}"))),
    }
}

fn parse_loss_spec(section: &TrainSection) -> Result<LossSpec> {
    let k = || {
        section
            .k
            .ok_or_else(|| Error::config("sampled loss needs k"))
    };
    let proposal = |c_hint: &str| -> Result<ProposalDist> {
        match section.proposal.as_deref().unwrap_or("uniform") {
            "uniform" => Ok(ProposalDist::Uniform),
            "loguniform" => Ok(ProposalDist::LogUniform),
            "dns" => Ok(ProposalDist::Dns {
                pool: 500,
                top: 100,
            }),
            other => Err(Error::config(format!(
                "unknown proposal {other:?} for {c_hint}"
            ))),
        }
    };
    match section.loss.as_str() {
        "softmax" => Ok(LossSpec::Softmax),
        "sparsemax" => Ok(LossSpec::Sparsemax),
        "entmax" => Ok(LossSpec::Entmax {
            alpha: section
                .alpha
                .ok_or_else(|| Error::config("entmax needs alpha"))?,
        }),
        "rankmax" => Ok(LossSpec::Rankmax),
        "ssm-simple" => Ok(LossSpec::SsmSimple { k: k()? }),
        "ssm" => Ok(LossSpec::Ssm {
            k: k()?,
            proposal: proposal("ssm")?,
        }),
        "nce" => Ok(LossSpec::Nce {
            k: k()?,
            proposal: proposal("nce")?,
        }),
        "hsm" => Ok(LossSpec::Hsm),
        "rg" => Ok(LossSpec::Rg),
        other => Err(Error::config(format!("unknown loss {other:?}"))),
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&args.config)?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("bad config: {e}")))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    config_sha256: String,
    seed: u64,
    version: String,
}

fn write_manifest(out: &Path, command: &str, cfg: &ExperimentConfig) -> Result<()> {
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let manifest = Manifest {
        command: command.to_string(),
        config_sha256: format!("{:x}", hasher.finalize()),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(())
}

/// RFC-4180 quoting; plain fields pass through untouched.
fn csv_field(text: &str) -> String {
    if text.contains(',') || text.contains('"') || text.contains('\n') {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

/// Shortest-roundtrip float formatting keeps CSV output byte-stable.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn cmd_map(args: &MapArgs) -> Result<String> {
    let s = parse_scores(&args.scores)?;
    let mapping = parse_mapping(&args.mapping, args.alpha, args.true_class)?;
    let p = apply_mapping(&s, mapping)?;
    Ok(p.values()
        .iter()
        .map(|v| format!("{v:.6}"))
        .collect::<Vec<_>>()
        .join(","))
}

pub fn cmd_loss(args: &LossArgs) -> Result<String> {
    let s = parse_scores(&args.scores)?;
    let c = s.len();
    if args.label.is_empty() {
        return Err(Error::usage("need at least one --label"));
    }
    let mut labels = vec![0u8; c];
    for &idx in &args.label {
        if idx >= c {
            return Err(Error::usage("label index out of range"));
        }
        labels[idx] = 1;
    }
    let y = LabelVector::new(labels)?;
    let eval = match args.loss.as_str() {
        "softmax" => softmax_loss(&s, &y)?,
        "sparsemax" => fy_loss(&s, &y, RegularizerKind::HalfSquaredL2)?,
        "entmax" => fy_loss(
            &s,
            &y,
            RegularizerKind::TsallisNeg {
                alpha: args.alpha.ok_or_else(|| Error::usage("entmax needs --alpha"))?,
            },
        )?,
        "rankmax" => rankmax_grad(&s, args.label[0])?,
        "rg" => crate::approx::rg_loss(&s, &y)?,
        other => return Err(Error::usage(format!("unknown loss {other:?}"))),
    };
    let grad = eval
        .gradient
        .iter()
        .map(|v| format!("{v:.6}"))
        .collect::<Vec<_>>()
        .join(",");
    Ok(format!("loss={:.6}\ngradient={grad}", eval.value))
}

pub fn cmd_jacobian(args: &JacobianArgs) -> Result<String> {
    let s = parse_scores(&args.scores)?;
    let mapping = parse_mapping(&args.mapping, args.alpha, args.true_class)?;
    let j = jacobian(&s, mapping)?;
    if args.spectral {
        let (norm, boundary) = spectral_norm(&j);
        return Ok(format!("spectral_norm={norm:.9}\nboundary_flag={boundary}"));
    }
    let mut out = String::new();
    for i in 0..j.dim() {
        let row = j
            .row(i)
            .iter()
            .map(|v| format!("{v:.9}"))
            .collect::<Vec<_>>()
            .join(",");
        out.push_str(&row);
        out.push('\n');
    }
    Ok(out)
}

fn gaussian_profile(seed: u64, id: u64, c: usize, scale: f64) -> ScoreVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3_000_000 + id);
    let mut raw: Vec<f64> = (0..c)
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g
        })
        .collect();
    let norm: f64 = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        raw.iter_mut().for_each(|v| *v *= scale / norm);
    }
    ScoreVector::new(raw).expect("profile is finite")
}

fn proposal_from_name(name: &str, s: &ScoreVector) -> Result<ProposalDist> {
    match name {
        "uniform" => Ok(ProposalDist::Uniform),
        "loguniform" => Ok(ProposalDist::LogUniform),
        "mixture" => {
            // half uniform, half the target softmax distribution
            let p = softmax_map(s);
            let c = p.len() as f64;
            Ok(ProposalDist::Empirical {
                freq: p.values().iter().map(|&v| 0.5 / c + 0.5 * v).collect(),
            })
        }
        other => Err(Error::config(format!("unknown proposal {other:?}"))),
    }
}

pub fn cmd_biasvar(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let section = cfg
        .biasvar
        .as_ref()
        .ok_or_else(|| Error::config("config lacks a biasvar section"))?;
    if section.trials < 100 {
        return Err(Error::config("need trials >= 100"));
    }
    std::fs::create_dir_all(&args.out)?;
    write_manifest(&args.out, "biasvar", &cfg)?;
    let c = section.c;
    let tree = build_huffman(&vec![1.0; c])?;
    let node_logits = vec![0.0; c - 1];
    struct Point {
        scheme: Scheme,
        scheme_name: String,
        k: usize,
        proposal_name: String,
        s_id: usize,
    }
    let mut grid = Vec::new();
    for scheme_name in &section.schemes {
        let scheme = parse_scheme(scheme_name)?;
        for &k in &section.k_values {
            for proposal_name in &section.proposals {
                for s_id in 0..section.profiles {
                    grid.push(Point {
                        scheme,
                        scheme_name: scheme_name.clone(),
                        k,
                        proposal_name: proposal_name.clone(),
                        s_id,
                    });
                }
            }
        }
    }
    let rows = run_indexed(grid.len(), thread_cap(), |i| -> Result<String> {
        let point = &grid[i];
        let s = gaussian_profile(cfg.seed, point.s_id as u64, c, section.scale);
        let q = proposal_from_name(&point.proposal_name, &s)?;
        let y = 0usize;
        let d = delta_report(
            point.scheme,
            &s,
            y,
            &q,
            point.k,
            Some(&tree),
            Some(&node_logits),
        )?;
        let e = empirical_report(
            point.scheme,
            &s,
            y,
            &q,
            point.k,
            section.trials,
            cfg.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            Some(&tree),
            Some(&node_logits),
        )?;
        Ok([
            csv_field(&point.scheme_name),
            point.k.to_string(),
            csv_field(&point.proposal_name),
            point.s_id.to_string(),
            fmt_f64(d.bias_asymptotic),
            fmt_f64(d.bias_curvature),
            fmt_f64(d.variance),
            fmt_f64(e.bias_hat),
            fmt_f64(e.variance_hat),
            fmt_f64(e.std_error),
        ]
        .join(","))
    });
    let mut csv =
        String::from("scheme,k,proposal,s_id,bias_asym,bias_curv,variance,emp_bias,emp_variance,emp_std_error\n");
    for row in rows {
        csv.push_str(&row?);
        csv.push('\n');
    }
    std::fs::write(args.out.join("biasvar.csv"), csv)?;
    Ok(())
}

fn build_dataset(cfg: &ExperimentConfig) -> Result<InteractionSet> {
    let section = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::config("config lacks a dataset section"))?;
    let data = match section.source.as_str() {
        "synthetic" => {
            let (data, _, _) = synth_planted(
                section.n_users,
                section.n_items,
                section.d,
                section.temperature,
                section.interactions_per_user,
                cfg.seed,
            )?;
            data
        }
        "tsv" => {
            let path = section
                .path
                .as_ref()
                .ok_or_else(|| Error::config("tsv source needs a path"))?;
            let mut data = load_tsv(path, section.threshold)?;
            if let Some(k) = section.k_core {
                data = k_core_filter(data, k)?;
            }
            data
        }
        other => return Err(Error::config(format!("unknown dataset source {other:?}"))),
    };
    split_per_user(data, [0.8, 0.1, 0.1], cfg.seed)
}

fn epochs_csv(records: &[EpochRecord], cutoffs: &[usize]) -> (String, String) {
    let mut header = String::from("epoch,train_loss,score_evals");
    for &k in cutoffs {
        header.push_str(&format!(",precision_at_{k},recall_at_{k},ndcg_at_{k}"));
    }
    header.push_str(",top1_error,diverged\n");
    let mut csv = header;
    let mut timing = String::from("epoch,wall_time_s\n");
    for r in records {
        csv.push_str(&format!(
            "{},{},{}",
            r.epoch,
            fmt_f64(r.train_loss),
            r.score_evals
        ));
        match &r.metrics {
            Some(m) => {
                for &k in cutoffs {
                    csv.push_str(&format!(
                        ",{},{},{}",
                        fmt_f64(m.precision_at_k[&k]),
                        fmt_f64(m.recall_at_k[&k]),
                        fmt_f64(m.ndcg_at_k[&k])
                    ));
                }
                csv.push_str(&format!(",{}", fmt_f64(m.topk_error)));
            }
            None => {
                for _ in cutoffs {
                    csv.push_str(",,,");
                }
                csv.push(',');
            }
        }
        csv.push_str(&format!(",{}\n", if r.diverged { "DIVERGED" } else { "ok" }));
        timing.push_str(&format!("{},{}\n", r.epoch, fmt_f64(r.wall_time_s)));
    }
    (csv, timing)
}

pub fn cmd_train(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let section = cfg
        .train
        .as_ref()
        .ok_or_else(|| Error::config("config lacks a train section"))?;
    std::fs::create_dir_all(&args.out)?;
    write_manifest(&args.out, "train", &cfg)?;
    let data = build_dataset(&cfg)?;
    let base_loss = parse_loss_spec(section)?;
    if section.als && base_loss != LossSpec::Rg {
        return Err(Error::config("the alternating solver applies to the RG loss only"));
    }
    let make_cfg = |loss: LossSpec, lr: f64| TrainConfig {
        loss,
        learning_rate: lr,
        l2: section.l2,
        epochs: section.epochs,
        batch_size: section.batch_size,
        seed: cfg.seed,
        cutoffs: section.cutoffs.clone(),
    };

    let mut points: Vec<(String, TrainConfig)> = Vec::new();
    match &section.sweep {
        None => points.push(("epochs".to_string(), make_cfg(base_loss, section.learning_rate))),
        Some(sweep) => {
            for value in &sweep.values {
                match sweep.axis.as_str() {
                    "lr" => {
                        let lr = value
                            .as_f64()
                            .ok_or_else(|| Error::config("lr sweep values must be numbers"))?;
                        points.push((format!("epochs_lr{lr}"), make_cfg(base_loss.clone(), lr)));
                    }
                    "k" => {
                        let k = value
                            .as_u64()
                            .ok_or_else(|| Error::config("k sweep values must be integers"))?
                            as usize;
                        let loss = match &base_loss {
                            LossSpec::SsmSimple { .. } => LossSpec::SsmSimple { k },
                            LossSpec::Ssm { proposal, .. } => LossSpec::Ssm {
                                k,
                                proposal: proposal.clone(),
                            },
                            LossSpec::Nce { proposal, .. } => LossSpec::Nce {
                                k,
                                proposal: proposal.clone(),
                            },
                            _ => return Err(Error::config("k sweep needs a sampled loss")),
                        };
                        points.push((format!("epochs_k{k}"), make_cfg(loss, section.learning_rate)));
                    }
                    "q" => {
                        let name = value
                            .as_str()
                            .ok_or_else(|| Error::config("q sweep values must be strings"))?;
                        let proposal = match name {
                            "uniform" => ProposalDist::Uniform,
                            "loguniform" => ProposalDist::LogUniform,
                            "dns" => ProposalDist::Dns {
                                pool: 500,
                                top: 100,
                            },
                            other => {
                                return Err(Error::config(format!("unknown proposal {other:?}")))
                            }
                        };
                        let loss = match &base_loss {
                            LossSpec::Ssm { k, .. } => LossSpec::Ssm { k: *k, proposal },
                            LossSpec::Nce { k, .. } => LossSpec::Nce { k: *k, proposal },
                            _ => return Err(Error::config("q sweep needs a proposal-driven loss")),
                        };
                        points.push((format!("epochs_q_{name}"), make_cfg(loss, section.learning_rate)));
                    }
                    other => return Err(Error::config(format!("unknown sweep axis {other:?}"))),
                }
            }
        }
    }

    let als = section.als;
    let als_sweeps = section.als_sweeps;
    let results = run_indexed(points.len(), thread_cap(), |i| -> Result<(String, String, Option<MFModel>)> {
        let (name, train_cfg) = &points[i];
        let model = MFModel::init(data.n_users, data.n_items, cfg.dataset.as_ref().map_or(8, |d| d.d), cfg.seed ^ 0xa5a5)?;
        let (trained, records) = if als {
            train_rg_als(model, &data, train_cfg, als_sweeps)?
        } else {
            train(model, &data, train_cfg)?
        };
        let (csv, timing) = epochs_csv(&records, &train_cfg.cutoffs);
        let model_out = if points.len() == 1 { Some(trained) } else { None };
        let _ = name;
        Ok((csv, timing, model_out))
    });
    for (i, result) in results.into_iter().enumerate() {
        let (csv, timing, model) = result?;
        let name = &points[i].0;
        std::fs::write(args.out.join(format!("{name}.csv")), csv)?;
        std::fs::write(args.out.join(format!("{name}_timing.csv")), timing)?;
        if let Some(model) = model {
            save_checkpoint(&model, &args.out.join("model.ckpt"), cfg.seed)?;
        }
    }
    Ok(())
}

pub fn cmd_bench(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let section = cfg
        .bench
        .as_ref()
        .ok_or_else(|| Error::config("config lacks a bench section"))?;
    std::fs::create_dir_all(&args.out)?;
    write_manifest(&args.out, "bench", &cfg)?;
    let mut csv = String::from("loss,c,score_evals,fitted_slope\n");
    let mut timing = String::from("loss,c,median_time_s\n");
    for loss_name in &section.losses {
        let section_loss = TrainSection {
            loss: loss_name.clone(),
            alpha: Some(1.5),
            k: Some(10),
            proposal: Some("uniform".to_string()),
            learning_rate: 0.1,
            l2: 0.0,
            epochs: 1,
            batch_size: 1,
            cutoffs: vec![1],
            als: false,
            als_sweeps: 1,
            sweep: None,
        };
        let loss = parse_loss_spec(&section_loss)?;
        let profile = complexity_profile(&loss, &section.c_values, section.n, section.runs)?;
        for p in &profile.points {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                csv_field(loss_name),
                p.c,
                p.score_evals,
                fmt_f64(profile.time_slope)
            ));
            timing.push_str(&format!(
                "{},{},{}\n",
                csv_field(loss_name),
                p.c,
                fmt_f64(p.median_time_s)
            ));
        }
    }
    std::fs::write(args.out.join("bench.csv"), csv)?;
    std::fs::write(args.out.join("bench_timing.csv"), timing)?;
    Ok(())
}

pub fn cmd_calibration(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let section = cfg
        .calibration
        .as_ref()
        .ok_or_else(|| Error::config("config lacks a calibration section"))?;
    std::fs::create_dir_all(&args.out)?;
    write_manifest(&args.out, "calibration", &cfg)?;
    let c = section.c;
    let k_values: Vec<usize> = if section.k_values.is_empty() {
        (1..=c).collect()
    } else {
        section.k_values.clone()
    };
    let mut verdicts = Vec::new();
    let mut order_reports = Vec::new();
    for name in &section.mappings {
        let mapping = parse_mapping(name, Some(1.5), Some(0))?;
        let verdict = check_topk_calibration(mapping, c, &k_values, section.trials, cfg.seed)?;
        let order =
            crate::simplex_maps::classify_order_preservation(mapping, c, 2000, cfg.seed)?;
        verdicts.push(verdict);
        order_reports.push((name.clone(), order));

        // gradient dump for heatmap rendering: exact zeros stay "0"
        let mut dump = String::new();
        for example in 0..section.gradient_dump_examples {
            let s = gaussian_profile(cfg.seed, 5_000_000 + example as u64, c, 2.0);
            let y = LabelVector::one_hot(c, example % c)?;
            let eval = match mapping {
                MappingKind::Softmax => softmax_loss(&s, &y)?,
                MappingKind::Sparsemax => fy_loss(&s, &y, RegularizerKind::HalfSquaredL2)?,
                MappingKind::Entmax { alpha } => {
                    fy_loss(&s, &y, RegularizerKind::TsallisNeg { alpha })?
                }
                MappingKind::Rankmax { .. } => rankmax_grad(&s, example % c)?,
            };
            let row = eval
                .gradient
                .iter()
                .map(|&v| fmt_f64(v))
                .collect::<Vec<_>>()
                .join(",");
            dump.push_str(&row);
            dump.push('\n');
        }
        std::fs::write(args.out.join(format!("gradients_{name}.csv")), dump)?;
    }
    #[derive(Serialize)]
    struct Report<'a> {
        verdicts: &'a Vec<crate::oracles::CalibrationVerdict>,
        order_probes: Vec<serde_json::Value>,
    }
    let order_probes = order_reports
        .iter()
        .map(|(name, r)| {
            serde_json::json!({
                "mapping": name,
                "verdict": format!("{:?}", r.verdict),
                "tie_witness_found": r.tie_witness.is_some(),
                "inversion_found": r.inversion_witness.is_some(),
            })
        })
        .collect();
    let report = Report {
        verdicts: &verdicts,
        order_probes,
    };
    std::fs::write(
        args.out.join("calibration.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    Ok(())
}

/// Dispatch a parsed command line; returns printable stdout text.
pub fn run(cli: &Cli) -> Result<Option<String>> {
    match &cli.command {
        Command::Map(args) => cmd_map(args).map(Some),
        Command::Loss(args) => cmd_loss(args).map(Some),
        Command::Jacobian(args) => cmd_jacobian(args).map(Some),
        Command::Biasvar(args) => cmd_biasvar(args).map(|()| None),
        Command::Train(args) => cmd_train(args).map(|()| None),
        Command::Bench(args) => cmd_bench(args).map(|()| None),
        Command::Calibration(args) => cmd_calibration(args).map(|()| None),
    }
}

/// Exit code contract: 0 success, 1 runtime failure, 2 usage or config error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) | Error::Config(_) => 2,
        _ => 1,
    }
}
