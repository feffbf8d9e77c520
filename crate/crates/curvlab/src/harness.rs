//! Experiment harness: flat key=value configs, training loops with CSV
//! metrics, alignment and per-update-progress diagnostics, grid search over
//! hyperparameters, posterior-sample dumps, and the oracle validation report.
//!
//! Every optimizer runs through the same loop; the only per-method knowledge
//! lives in `Optimizer::step` and in configuration defaults (the Kronecker
//! methods warm-start their factor averages for 50 batches, the rest need
//! none). Runs are single-threaded and deterministic: identical
//! (config, seed) pairs produce identical CSVs apart from the wall_ms column.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::prelude::*;

use crate::curvature::{CurvaturePolicy, FisherMode, ImplicitCurvature};
use crate::data::{self, Dataset};
use crate::kron::{FactorSet, KroneckerState};
use crate::laplace::{laplace_sample_batch, LaplaceSpec};
use crate::linalg;
use crate::net::{Activation, LossKind, NetworkState, Targets};
use crate::optim::{derive_seed, FisherChoice, Optimizer, OptimizerConfig, OptimizerKind};
use crate::oracle::{agreement_checks, Fault};
use crate::{Error, Result};

/// Default warm-start length for the Kronecker-factored methods.
const DEFAULT_WARMUP_BATCHES: u64 = 50;
const WARMUP_SALT: u64 = 0x3a1f;
const EPOCH_SALT: u64 = 0x1234;

fn config_err(message: String) -> Error {
    Error::Invalid { message }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Where training (and optionally eval) data comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    /// The built-in two-point least-squares fixture.
    Toy,
    /// IDX image/label pairs on disk.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        eval: Option<(PathBuf, PathBuf)>,
    },
}

/// Dataset selection plus the load-time transforms, applied in order:
/// pool, compute normalization stats, normalize, subset.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub source: DataSource,
    pub pool: usize,
    pub subset: Option<usize>,
    pub subset_seed: u64,
    pub normalize: bool,
}

/// A fully resolved experiment: dataset, architecture, optimizer, schedule.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataSpec,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// 0 means full-batch.
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Log a metric row every this many steps (the final step always logs).
    pub metric_every: u64,
    pub warmup_batches: u64,
    pub eval: bool,
    /// Maintain a shadow input-factor average and log how well each update
    /// aligns with the matching FOOF direction.
    pub track_alignment: bool,
    pub out_dir: PathBuf,
    /// Prior precision τ for posterior sampling (uniform diagonal).
    pub prior_precision: f64,
    /// Dataset-size weight D for posterior sampling; defaults to the
    /// training-subset size.
    pub datapoints: Option<f64>,
}

/// Incremental key=value assembly of an `ExperimentConfig`; shared by the
/// config-file parser and the grid runner's per-cell overrides.
#[derive(Debug, Clone)]
pub struct ConfigBuilder {
    name: String,
    dataset: Option<String>,
    images: Option<String>,
    labels: Option<String>,
    eval_images: Option<String>,
    eval_labels: Option<String>,
    pool: usize,
    subset: Option<usize>,
    subset_seed: u64,
    normalize: bool,
    hidden: Vec<usize>,
    activation: Activation,
    loss: LossKind,
    optimizer: Option<OptimizerKind>,
    lr: Option<f64>,
    damping: f64,
    momentum: f64,
    ema_m: f64,
    invert_every: u64,
    accumulate_window: u64,
    curvature: CurvaturePolicy,
    fisher: FisherChoice,
    subsampled: bool,
    weight_decay: f64,
    foof_lambda_a_from_kfac: bool,
    epochs: usize,
    batch_size: usize,
    seeds: Vec<u64>,
    metric_every: u64,
    warmup_batches: Option<u64>,
    eval: bool,
    track_alignment: bool,
    out_dir: String,
    prior_precision: f64,
    datapoints: Option<f64>,
    seen: BTreeSet<String>,
}

impl Default for ConfigBuilder {
    fn default() -> Self {
        ConfigBuilder {
            name: "run".into(),
            dataset: None,
            images: None,
            labels: None,
            eval_images: None,
            eval_labels: None,
            pool: 1,
            subset: None,
            subset_seed: 0,
            normalize: false,
            hidden: Vec::new(),
            activation: Activation::Relu,
            loss: LossKind::CrossEntropySoftmax,
            optimizer: None,
            lr: None,
            damping: 0.0,
            momentum: 0.0,
            ema_m: 0.95,
            invert_every: 1,
            accumulate_window: 1,
            curvature: CurvaturePolicy::SameBatch,
            fisher: FisherChoice::Mc,
            subsampled: false,
            weight_decay: 0.0,
            foof_lambda_a_from_kfac: false,
            epochs: 1,
            batch_size: 0,
            seeds: vec![0],
            metric_every: 1,
            warmup_batches: None,
            eval: true,
            track_alignment: false,
            out_dir: "runs".into(),
            prior_precision: 1.0,
            datapoints: None,
            seen: BTreeSet::new(),
        }
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| config_err(format!("key '{key}': expected a number, got '{value}'")))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| config_err(format!("key '{key}': expected an integer, got '{value}'")))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| config_err(format!("key '{key}': expected an integer, got '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(config_err(format!(
            "key '{key}': expected true or false, got '{value}'"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| config_err(format!("key '{key}': bad list entry '{}'", p.trim())))
        })
        .collect()
}

fn parse_activation(value: &str) -> Result<Activation> {
    match value {
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        other => Err(config_err(format!("unknown activation '{other}'"))),
    }
}

fn parse_loss(value: &str) -> Result<LossKind> {
    match value {
        "cross-entropy" => Ok(LossKind::CrossEntropySoftmax),
        "squared-error" => Ok(LossKind::SquaredError),
        other => Err(config_err(format!("unknown loss '{other}'"))),
    }
}

fn parse_policy(value: &str) -> Result<CurvaturePolicy> {
    match value {
        "same-batch" => Ok(CurvaturePolicy::SameBatch),
        "independent-batch" => Ok(CurvaturePolicy::IndependentBatch),
        other => Err(config_err(format!("unknown curvature policy '{other}'"))),
    }
}

impl ConfigBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Set one key; repeated keys in a single config are rejected.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.seen.insert(key.to_string()) {
            return Err(config_err(format!("duplicate config key '{key}'")));
        }
        self.set(key, value)
    }

    /// Set one key, overriding any earlier value (the grid runner's path).
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        self.seen.insert(key.to_string());
        self.set(key, value)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "name" => self.name = value.to_string(),
            "dataset" => self.dataset = Some(value.to_string()),
            "images" => self.images = Some(value.to_string()),
            "labels" => self.labels = Some(value.to_string()),
            "eval_images" => self.eval_images = Some(value.to_string()),
            "eval_labels" => self.eval_labels = Some(value.to_string()),
            "pool" => self.pool = parse_usize(key, value)?,
            "subset" => self.subset = Some(parse_usize(key, value)?),
            "subset_seed" => self.subset_seed = parse_u64(key, value)?,
            "normalize" => self.normalize = parse_bool(key, value)?,
            "hidden" => self.hidden = parse_list(key, value)?,
            "activation" => self.activation = parse_activation(value)?,
            "loss" => self.loss = parse_loss(value)?,
            "optimizer" => self.optimizer = Some(value.parse()?),
            "lr" => self.lr = Some(parse_f64(key, value)?),
            "damping" => self.damping = parse_f64(key, value)?,
            "momentum" => self.momentum = parse_f64(key, value)?,
            "ema_m" => self.ema_m = parse_f64(key, value)?,
            "invert_every" => self.invert_every = parse_u64(key, value)?,
            "accumulate_window" => self.accumulate_window = parse_u64(key, value)?,
            "curvature" => self.curvature = parse_policy(value)?,
            "fisher" => self.fisher = value.parse()?,
            "subsampled" => self.subsampled = parse_bool(key, value)?,
            "weight_decay" => self.weight_decay = parse_f64(key, value)?,
            "foof_lambda_a_from_kfac" => self.foof_lambda_a_from_kfac = parse_bool(key, value)?,
            "epochs" => self.epochs = parse_usize(key, value)?,
            "batch_size" => self.batch_size = parse_usize(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "metric_every" => self.metric_every = parse_u64(key, value)?,
            "warmup_batches" => self.warmup_batches = Some(parse_u64(key, value)?),
            "eval" => self.eval = parse_bool(key, value)?,
            "track_alignment" => self.track_alignment = parse_bool(key, value)?,
            "out_dir" => self.out_dir = value.to_string(),
            "prior_precision" => self.prior_precision = parse_f64(key, value)?,
            "datapoints" => self.datapoints = Some(parse_f64(key, value)?),
            _ => return Err(config_err(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn build(&self) -> Result<ExperimentConfig> {
        let dataset = self
            .dataset
            .as_deref()
            .ok_or_else(|| config_err("missing required key 'dataset'".into()))?;
        let source = match dataset {
            "toy" => DataSource::Toy,
            "mnist" | "idx" => {
                let default = |given: &Option<String>, fallback: &str| {
                    given.clone().unwrap_or_else(|| format!("mnist/{fallback}"))
                };
                let (images, labels) = if dataset == "mnist" {
                    (
                        default(&self.images, "train-images-idx3-ubyte.gz"),
                        default(&self.labels, "train-labels-idx1-ubyte.gz"),
                    )
                } else {
                    let images = self.images.clone().ok_or_else(|| {
                        config_err("dataset 'idx' needs an 'images' path".into())
                    })?;
                    let labels = self.labels.clone().ok_or_else(|| {
                        config_err("dataset 'idx' needs a 'labels' path".into())
                    })?;
                    (images, labels)
                };
                let eval = match (dataset, &self.eval_images, &self.eval_labels) {
                    ("mnist", _, _) => Some((
                        default(&self.eval_images, "t10k-images-idx3-ubyte.gz"),
                        default(&self.eval_labels, "t10k-labels-idx1-ubyte.gz"),
                    )),
                    (_, Some(i), Some(l)) => Some((i.clone(), l.clone())),
                    (_, None, None) => None,
                    _ => {
                        return Err(config_err(
                            "eval_images and eval_labels must be given together".into(),
                        ))
                    }
                };
                DataSource::Idx {
                    images: PathBuf::from(images),
                    labels: PathBuf::from(labels),
                    eval: eval.map(|(i, l)| (PathBuf::from(i), PathBuf::from(l))),
                }
            }
            other => return Err(config_err(format!("unknown dataset '{other}'"))),
        };
        let kind = self
            .optimizer
            .ok_or_else(|| config_err("missing required key 'optimizer'".into()))?;
        let lr = self
            .lr
            .ok_or_else(|| config_err("missing required key 'lr'".into()))?;
        let optimizer = OptimizerConfig {
            kind,
            lr,
            damping: self.damping,
            momentum: self.momentum,
            ema_m: self.ema_m,
            period: self.invert_every,
            window: self.accumulate_window,
            policy: self.curvature,
            fisher: self.fisher,
            subsampled: self.subsampled,
            weight_decay: self.weight_decay,
            foof_lambda_a_from_kfac: self.foof_lambda_a_from_kfac,
        };
        if self.seeds.is_empty() {
            return Err(config_err("key 'seeds' must list at least one seed".into()));
        }
        if self.epochs == 0 {
            return Err(config_err("key 'epochs' must be at least 1".into()));
        }
        if self.metric_every == 0 {
            return Err(config_err("key 'metric_every' must be at least 1".into()));
        }
        let warmup_batches = self.warmup_batches.unwrap_or(if kind.uses_kron_factors() {
            DEFAULT_WARMUP_BATCHES
        } else {
            0
        });
        Ok(ExperimentConfig {
            name: self.name.clone(),
            data: DataSpec {
                source,
                pool: self.pool,
                subset: self.subset,
                subset_seed: self.subset_seed,
                normalize: self.normalize,
            },
            hidden: self.hidden.clone(),
            activation: self.activation,
            loss: self.loss,
            optimizer,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seeds: self.seeds.clone(),
            metric_every: self.metric_every,
            warmup_batches,
            eval: self.eval,
            track_alignment: self.track_alignment,
            out_dir: PathBuf::from(&self.out_dir),
            prior_precision: self.prior_precision,
            datapoints: self.datapoints,
        })
    }
}

/// Parse a flat `key = value` config file. `#` starts a comment; blank lines
/// are skipped; unknown and duplicate keys are rejected.
pub fn parse_config_text(text: &str) -> Result<ConfigBuilder> {
    let mut builder = ConfigBuilder::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            config_err(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        builder.apply(key.trim(), value.trim())?;
    }
    Ok(builder)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    parse_config_text(&text)?.build()
}

impl ExperimentConfig {
    /// Canonical echo of the resolved configuration, written next to each
    /// run's CSVs so an artifact is self-describing.
    pub fn echo(&self) -> String {
        let o = &self.optimizer;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("name", self.name.clone());
        match &self.data.source {
            DataSource::Toy => kv("dataset", "toy".into()),
            DataSource::Idx { images, labels, eval } => {
                kv("dataset", "idx".into());
                kv("images", images.display().to_string());
                kv("labels", labels.display().to_string());
                if let Some((ei, el)) = eval {
                    kv("eval_images", ei.display().to_string());
                    kv("eval_labels", el.display().to_string());
                }
            }
        }
        kv("pool", self.data.pool.to_string());
        if let Some(k) = self.data.subset {
            kv("subset", k.to_string());
            kv("subset_seed", self.data.subset_seed.to_string());
        }
        kv("normalize", self.data.normalize.to_string());
        kv(
            "hidden",
            self.hidden
                .iter()
                .map(|h| h.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv(
            "activation",
            match self.activation {
                Activation::Relu => "relu".into(),
                Activation::Tanh => "tanh".into(),
            },
        );
        kv(
            "loss",
            match self.loss {
                LossKind::CrossEntropySoftmax => "cross-entropy".into(),
                LossKind::SquaredError => "squared-error".into(),
            },
        );
        kv("optimizer", o.kind.name().into());
        kv("lr", o.lr.to_string());
        kv("damping", o.damping.to_string());
        kv("momentum", o.momentum.to_string());
        kv("ema_m", o.effective_ema().to_string());
        kv("invert_every", o.period.to_string());
        kv("accumulate_window", o.window.to_string());
        kv(
            "curvature",
            match o.policy {
                CurvaturePolicy::SameBatch => "same-batch".into(),
                CurvaturePolicy::IndependentBatch => "independent-batch".into(),
            },
        );
        kv(
            "fisher",
            match o.fisher {
                FisherChoice::Mc => "mc".into(),
                FisherChoice::Full => "full".into(),
            },
        );
        kv("subsampled", o.subsampled.to_string());
        kv("weight_decay", o.weight_decay.to_string());
        kv("foof_lambda_a_from_kfac", o.foof_lambda_a_from_kfac.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv(
            "seeds",
            self.seeds
                .iter()
                .map(|h| h.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("metric_every", self.metric_every.to_string());
        kv("warmup_batches", self.warmup_batches.to_string());
        kv("eval", self.eval.to_string());
        kv("track_alignment", self.track_alignment.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }
}

// ---------------------------------------------------------------------------
// Data loading
// ---------------------------------------------------------------------------

/// Dataset root for relative paths, from `CURVLAB_DATA_DIR` (default `.`).
pub fn data_root_from_env() -> PathBuf {
    std::env::var_os("CURVLAB_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Load, pool, normalize, and subset as `spec` describes. Normalization
/// statistics come from the full pooled training set (before any subset) and
/// are reused verbatim for the eval split.
pub fn load_dataset(spec: &DataSpec, root: &Path) -> Result<(Dataset, Option<Dataset>)> {
    match &spec.source {
        DataSource::Toy => Ok((data::synth_toy(), None)),
        DataSource::Idx { images, labels, eval } => {
            let mut train = data::load_idx(&resolve(root, images), &resolve(root, labels))?;
            train = data::avg_pool(&train, spec.pool)?;
            let stats = spec.normalize.then(|| data::normalization_stats(&train));
            if let Some((mean, std)) = stats {
                train = data::normalize(&train, mean, std)?;
            }
            if let Some(k) = spec.subset {
                train = data::subset(&train, k, spec.subset_seed)?;
            }
            let eval = match eval {
                Some((ei, el)) => {
                    let mut ds = data::load_idx(&resolve(root, ei), &resolve(root, el))?;
                    ds = data::avg_pool(&ds, spec.pool)?;
                    if let Some((mean, std)) = stats {
                        ds = data::normalize(&ds, mean, std)?;
                    }
                    Some(ds)
                }
                None => None,
            };
            Ok((train, eval))
        }
    }
}

/// Network layer widths implied by a dataset and the hidden-layer list.
pub fn network_dims(train: &Dataset, hidden: &[usize]) -> Result<Vec<usize>> {
    let out = match &train.labels {
        Targets::Classes(_) => train.num_classes().ok_or_else(|| Error::Data {
            message: "classification dataset with no labels".into(),
        })?,
        Targets::Values(v) => v.nrows(),
    };
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(train.input_dim());
    dims.extend_from_slice(hidden);
    dims.push(out);
    Ok(dims)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// One logged row of a training run.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: u64,
    /// Batch loss at the pre-update weights.
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
    pub update_norms: Vec<f64>,
    /// Whole-network metric-weighted cosine between the step's direction and
    /// the matching FOOF direction.
    pub alignment_to_foof: Option<f64>,
    pub alignment_per_layer: Vec<Option<f64>>,
    /// Relative batch-loss improvement of the applied update.
    pub rel_progress: Option<f64>,
    pub wall_ms: u128,
    pub seed: u64,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricRow {
    pub fn header(layers: usize) -> String {
        let mut cols = vec![
            "step".to_string(),
            "epoch".to_string(),
            "train_loss".to_string(),
            "eval_loss".to_string(),
            "eval_accuracy".to_string(),
        ];
        cols.extend((0..layers).map(|k| format!("update_norm_l{k}")));
        cols.push("alignment_to_foof".to_string());
        cols.extend((0..layers).map(|k| format!("alignment_to_foof_l{k}")));
        cols.push("rel_progress".to_string());
        cols.push("wall_ms".to_string());
        cols.push("seed".to_string());
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut cols = vec![
            self.step.to_string(),
            self.epoch.to_string(),
            self.train_loss.to_string(),
            opt_cell(self.eval_loss),
            opt_cell(self.eval_accuracy),
        ];
        cols.extend(self.update_norms.iter().map(|n| n.to_string()));
        cols.push(opt_cell(self.alignment_to_foof));
        cols.extend(self.alignment_per_layer.iter().map(|a| opt_cell(*a)));
        cols.push(opt_cell(self.rel_progress));
        cols.push(self.wall_ms.to_string());
        cols.push(self.seed.to_string());
        cols.join(",")
    }
}

/// Outcome of one (config, seed) training run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub csv_path: PathBuf,
    /// Training-batch loss after the final update (NaN when diverged).
    pub final_train_loss: f64,
    pub final_eval_loss: Option<f64>,
    pub final_eval_accuracy: Option<f64>,
    pub diverged: bool,
    pub steps: u64,
}

// ---------------------------------------------------------------------------
// Alignment and progress diagnostics
// ---------------------------------------------------------------------------

/// Inner product for comparing weight updates.
#[derive(Debug, Clone)]
pub enum AlignmentMetric<'a> {
    /// Plain Frobenius cosine.
    Identity,
    /// ⟨U,V⟩ = Σ_layers trace(U_k (λI + Σ_A,k) V_kᵀ): the FOOF curvature
    /// inner product over per-layer input second moments.
    Foof {
        sigma_a: &'a [Array2<f64>],
        lambda: f64,
    },
}

fn check_layer_shapes(u1: &[Array2<f64>], u2: &[Array2<f64>]) -> Result<()> {
    if u1.len() != u2.len() || u1.iter().zip(u2).any(|(a, b)| a.dim() != b.dim()) {
        return Err(Error::Shape {
            context: "alignment arguments must share layer shapes".into(),
        });
    }
    Ok(())
}

/// ⟨u1_k, u2_k⟩ under the metric, for one layer.
fn layer_inner(
    u1: &Array2<f64>,
    u2: &Array2<f64>,
    metric: &AlignmentMetric<'_>,
    k: usize,
) -> Result<f64> {
    match metric {
        AlignmentMetric::Identity => Ok((u1 * u2).sum()),
        AlignmentMetric::Foof { sigma_a, lambda } => {
            let sigma = sigma_a.get(k).ok_or_else(|| Error::Shape {
                context: "metric is missing a layer factor".into(),
            })?;
            if sigma.nrows() != u1.ncols() || sigma.ncols() != u1.ncols() {
                return Err(Error::Shape {
                    context: format!(
                        "layer {k} factor is {}x{}, update has {} columns",
                        sigma.nrows(),
                        sigma.ncols(),
                        u1.ncols()
                    ),
                });
            }
            let weighted = linalg::matmul(u1.view(), sigma.view());
            Ok((&weighted * u2).sum() + lambda * (u1 * u2).sum())
        }
    }
}

fn cosine_from_parts(ip: f64, n1sq: f64, n2sq: f64) -> Option<f64> {
    if n1sq <= 0.0 || n2sq <= 0.0 {
        return None;
    }
    Some((ip / (n1sq.sqrt() * n2sq.sqrt())).clamp(-1.0, 1.0))
}

/// Metric-weighted cosine similarity between two per-layer updates.
/// A zero vector (under the metric) has no direction: `None`.
pub fn alignment(
    u1: &[Array2<f64>],
    u2: &[Array2<f64>],
    metric: &AlignmentMetric<'_>,
) -> Result<Option<f64>> {
    check_layer_shapes(u1, u2)?;
    let mut ip = 0.0;
    let mut n1 = 0.0;
    let mut n2 = 0.0;
    for k in 0..u1.len() {
        ip += layer_inner(&u1[k], &u2[k], metric, k)?;
        n1 += layer_inner(&u1[k], &u1[k], metric, k)?;
        n2 += layer_inner(&u2[k], &u2[k], metric, k)?;
    }
    Ok(cosine_from_parts(ip, n1, n2))
}

/// Per-layer restriction of `alignment`.
pub fn alignment_per_layer(
    u1: &[Array2<f64>],
    u2: &[Array2<f64>],
    metric: &AlignmentMetric<'_>,
) -> Result<Vec<Option<f64>>> {
    check_layer_shapes(u1, u2)?;
    (0..u1.len())
        .map(|k| {
            let ip = layer_inner(&u1[k], &u2[k], metric, k)?;
            let n1 = layer_inner(&u1[k], &u1[k], metric, k)?;
            let n2 = layer_inner(&u2[k], &u2[k], metric, k)?;
            Ok(cosine_from_parts(ip, n1, n2))
        })
        .collect()
}

/// Rescale each layer of `candidate` to match the Frobenius norm of the same
/// layer of `reference`; zero layers stay zero.
pub fn norm_matched(candidate: &[Array2<f64>], reference: &[Array2<f64>]) -> Vec<Array2<f64>> {
    candidate
        .iter()
        .zip(reference)
        .map(|(c, r)| {
            let nc = linalg::frob_norm(c.view());
            if nc == 0.0 {
                c.clone()
            } else {
                c * (linalg::frob_norm(r.view()) / nc)
            }
        })
        .collect()
}

/// Relative batch-loss improvement `(L(W) − L(W+Δ)) / L(W)` for each
/// candidate update, all evaluated on the same minibatch. `L(W) = 0` has no
/// relative scale: every entry is `None`.
pub fn per_update_progress(
    net: &NetworkState,
    inputs: &Array2<f64>,
    targets: &Targets,
    candidates: &[Vec<Array2<f64>>],
) -> Result<Vec<Option<f64>>> {
    let base = net.loss_mean(net.forward(inputs)?.logits(), targets)?;
    let mut out = Vec::with_capacity(candidates.len());
    for delta in candidates {
        if delta.len() != net.num_layers()
            || delta
                .iter()
                .zip(&net.layers)
                .any(|(d, w)| d.dim() != w.dim())
        {
            return Err(Error::Shape {
                context: "candidate update must share the network's layer shapes".into(),
            });
        }
        if base == 0.0 {
            out.push(None);
            continue;
        }
        let mut moved = net.clone();
        for (w, d) in moved.layers.iter_mut().zip(delta) {
            *w += d;
        }
        let after = moved.loss_mean(moved.forward(inputs)?.logits(), targets)?;
        out.push(Some((base - after) / base));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

fn effective_batch(config_batch: usize, n: usize) -> usize {
    if config_batch == 0 {
        n
    } else {
        config_batch
    }
}

fn weights_finite(net: &NetworkState) -> bool {
    net.layers
        .iter()
        .all(|w| w.iter().all(|v| v.is_finite()))
}

/// Shadow input-factor average used for alignment logging; kept outside the
/// optimizer so every method is measured against the same reference.
struct FoofShadow {
    kron: KroneckerState,
    lambda: f64,
}

/// Per-layer FOOF direction together with the input-scatter factors that
/// define the alignment metric.
type DirectionAndMetric = (Vec<Array2<f64>>, Vec<Array2<f64>>);

impl FoofShadow {
    fn new(dims: &[(usize, usize)], ema_m: f64, lambda: f64) -> Result<Self> {
        Ok(FoofShadow {
            kron: KroneckerState::new(dims, ema_m, lambda, 1, 1)?,
            lambda,
        })
    }

    fn accumulate(&mut self, net: &NetworkState, inputs: &Array2<f64>) -> Result<()> {
        let trace = net.forward(inputs)?;
        self.kron.update_from_trace(&trace, FactorSet::InputsOnly)
    }

    /// FOOF direction for `grads` plus the metric factors, or `None` when
    /// the undamped factors are singular.
    fn reference(&mut self, grads: &[Array2<f64>]) -> Result<Option<DirectionAndMetric>> {
        match self.kron.refresh_foof() {
            Ok(()) => {}
            Err(Error::Factorization { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
        let dir = match self.kron.foof_update(grads) {
            Ok(d) => d,
            Err(Error::Factorization { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let sigmas = (0..grads.len()).map(|k| self.kron.sigma_a(k)).collect();
        Ok(Some((dir, sigmas)))
    }
}

fn run_single(
    config: &ExperimentConfig,
    train: &Dataset,
    eval: Option<&Dataset>,
    seed: u64,
) -> Result<RunResult> {
    let dims = network_dims(train, &config.hidden)?;
    let mut net = NetworkState::new(&dims, config.activation, config.loss, seed)?;
    let layer_dims = net.layer_dims();
    let mut opt = Optimizer::new(config.optimizer.clone(), &layer_dims, seed)?;
    let mut shadow = if config.track_alignment {
        Some(FoofShadow::new(
            &layer_dims,
            config.optimizer.effective_ema(),
            config.optimizer.damping,
        )?)
    } else {
        None
    };

    let b = effective_batch(config.batch_size, train.len());
    let start = Instant::now();

    // Warm-start: accumulate factor statistics at the initial weights.
    let mut warmed = 0u64;
    let mut round = 0u64;
    while warmed < config.warmup_batches {
        let stream = data::batches(train, b, derive_seed(seed, WARMUP_SALT, round), true)?;
        for batch in stream {
            if warmed >= config.warmup_batches {
                break;
            }
            opt.warmup_update(&net, &batch.inputs)?;
            if let Some(sh) = shadow.as_mut() {
                sh.accumulate(&net, &batch.inputs)?;
            }
            warmed += 1;
        }
        round += 1;
    }

    let csv_path = config
        .out_dir
        .join(format!("{}-seed{}.csv", config.name, seed));
    let mut file = fs::File::create(&csv_path)?;
    writeln!(file, "{}", MetricRow::header(layer_dims.len()))?;

    let steps_per_epoch = train.len().div_ceil(b);
    let total_steps = (config.epochs * steps_per_epoch) as u64;
    let mut step = 0u64;
    let mut diverged = false;
    let mut final_train_loss = f64::NAN;
    let mut final_eval: (Option<f64>, Option<f64>) = (None, None);

    'epochs: for epoch in 0..config.epochs {
        let shuffle = config.batch_size != 0;
        let stream = data::batches(
            train,
            b,
            derive_seed(seed, EPOCH_SALT, epoch as u64),
            shuffle,
        )?;
        for batch in stream {
            if let Some(sh) = shadow.as_mut() {
                sh.accumulate(&net, &batch.inputs)?;
            }
            let stats = match opt.step(&mut net, &batch.inputs, &batch.targets) {
                Ok(s) => s,
                Err(Error::Factorization { .. }) => {
                    // Curvature state degraded past solvability: record the
                    // run as diverged rather than crash the harness.
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !stats.loss.is_finite() || !weights_finite(&net) {
                diverged = true;
            }

            let last = step + 1 == total_steps;
            if step.is_multiple_of(config.metric_every) || last || diverged {
                let loss_after = if diverged {
                    f64::NAN
                } else {
                    net.loss_mean(net.forward(&batch.inputs)?.logits(), &batch.targets)?
                };
                let rel_progress = (stats.loss != 0.0 && loss_after.is_finite())
                    .then(|| (stats.loss - loss_after) / stats.loss);
                let (eval_loss, eval_accuracy) = match (eval, config.eval && !diverged) {
                    (Some(ev), true) => {
                        let trace = net.forward(&ev.inputs)?;
                        (
                            Some(net.loss_mean(trace.logits(), &ev.labels)?),
                            net.accuracy(trace.logits(), &ev.labels),
                        )
                    }
                    _ => (None, None),
                };
                let (alignment_to_foof, alignment_per_layer_vals) = match shadow.as_mut() {
                    Some(sh) if !diverged => match sh.reference(&stats.gradient)? {
                        Some((foof_dir, sigmas)) => {
                            let metric = AlignmentMetric::Foof {
                                sigma_a: &sigmas,
                                lambda: sh.lambda,
                            };
                            (
                                alignment(&stats.direction, &foof_dir, &metric)?,
                                alignment_per_layer(&stats.direction, &foof_dir, &metric)?,
                            )
                        }
                        None => (None, vec![None; layer_dims.len()]),
                    },
                    _ => (None, vec![None; layer_dims.len()]),
                };
                let row = MetricRow {
                    step,
                    epoch: epoch as u64,
                    train_loss: stats.loss,
                    eval_loss,
                    eval_accuracy,
                    update_norms: stats
                        .update
                        .iter()
                        .map(|u| linalg::frob_norm(u.view()))
                        .collect(),
                    alignment_to_foof,
                    alignment_per_layer: alignment_per_layer_vals,
                    rel_progress,
                    wall_ms: start.elapsed().as_millis(),
                    seed,
                };
                writeln!(file, "{}", row.to_csv())?;
                if !diverged {
                    final_train_loss = loss_after;
                    final_eval = (eval_loss, eval_accuracy);
                }
            }
            step += 1;
            if diverged {
                break 'epochs;
            }
        }
    }
    if diverged {
        final_train_loss = f64::NAN;
        final_eval = (None, None);
    }

    Ok(RunResult {
        seed,
        csv_path,
        final_train_loss,
        final_eval_loss: final_eval.0,
        final_eval_accuracy: final_eval.1,
        diverged,
        steps: step,
    })
}

/// Train once per seed, writing one CSV per (config, seed) plus a config
/// echo, and return the per-seed outcomes.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunResult>> {
    run_experiment_with_root(config, &data_root_from_env())
}

pub fn run_experiment_with_root(
    config: &ExperimentConfig,
    root: &Path,
) -> Result<Vec<RunResult>> {
    let (train, eval) = load_dataset(&config.data, root)?;
    fs::create_dir_all(&config.out_dir)?;
    fs::write(
        config.out_dir.join(format!("{}-config.txt", config.name)),
        config.echo(),
    )?;
    config
        .seeds
        .iter()
        .map(|&seed| run_single(config, &train, eval.as_ref(), seed))
        .collect()
}

// ---------------------------------------------------------------------------
// Paired-progress runs
// ---------------------------------------------------------------------------

/// Train with the configured optimizer while also measuring, at every logged
/// step, the relative batch-loss improvement of (a) the applied update and
/// (b) a FOOF direction rescaled per layer to the applied update's norms.
/// Emits one CSV per seed with the two progress series as paired columns.
pub fn progress_run(config: &ExperimentConfig) -> Result<Vec<RunResult>> {
    progress_run_with_root(config, &data_root_from_env())
}

pub fn progress_run_with_root(config: &ExperimentConfig, root: &Path) -> Result<Vec<RunResult>> {
    let (train, _) = load_dataset(&config.data, root)?;
    fs::create_dir_all(&config.out_dir)?;
    let mut results = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        results.push(progress_single(config, &train, seed)?);
    }
    Ok(results)
}

fn progress_single(config: &ExperimentConfig, train: &Dataset, seed: u64) -> Result<RunResult> {
    let dims = network_dims(train, &config.hidden)?;
    let mut net = NetworkState::new(&dims, config.activation, config.loss, seed)?;
    let layer_dims = net.layer_dims();
    let mut opt = Optimizer::new(config.optimizer.clone(), &layer_dims, seed)?;
    let mut shadow = FoofShadow::new(
        &layer_dims,
        config.optimizer.effective_ema(),
        config.optimizer.damping,
    )?;

    let b = effective_batch(config.batch_size, train.len());
    let start = Instant::now();
    let mut warmed = 0u64;
    let mut round = 0u64;
    while warmed < config.warmup_batches {
        let stream = data::batches(train, b, derive_seed(seed, WARMUP_SALT, round), true)?;
        for batch in stream {
            if warmed >= config.warmup_batches {
                break;
            }
            opt.warmup_update(&net, &batch.inputs)?;
            shadow.accumulate(&net, &batch.inputs)?;
            warmed += 1;
        }
        round += 1;
    }

    let csv_path = config
        .out_dir
        .join(format!("{}-progress-seed{}.csv", config.name, seed));
    let mut file = fs::File::create(&csv_path)?;
    writeln!(
        file,
        "step,epoch,train_loss,rel_progress,rel_progress_foof,wall_ms,seed"
    )?;

    let steps_per_epoch = train.len().div_ceil(b);
    let total_steps = (config.epochs * steps_per_epoch) as u64;
    let mut step = 0u64;
    let mut diverged = false;
    let mut final_train_loss = f64::NAN;

    'epochs: for epoch in 0..config.epochs {
        let shuffle = config.batch_size != 0;
        let stream = data::batches(
            train,
            b,
            derive_seed(seed, EPOCH_SALT, epoch as u64),
            shuffle,
        )?;
        for batch in stream {
            shadow.accumulate(&net, &batch.inputs)?;
            let pre = net.clone();
            let stats = match opt.step(&mut net, &batch.inputs, &batch.targets) {
                Ok(s) => s,
                Err(Error::Factorization { .. }) => {
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !stats.loss.is_finite() || !weights_finite(&net) {
                diverged = true;
                break 'epochs;
            }
            let last = step + 1 == total_steps;
            if step.is_multiple_of(config.metric_every) || last {
                let foof_delta = shadow.reference(&stats.gradient)?.map(|(dir, _)| {
                    let descent: Vec<Array2<f64>> = dir.iter().map(|d| d * (-1.0)).collect();
                    norm_matched(&descent, &stats.update)
                });
                let mut candidates = vec![stats.update.clone()];
                if let Some(fd) = &foof_delta {
                    candidates.push(fd.clone());
                }
                let progress = per_update_progress(&pre, &batch.inputs, &batch.targets, &candidates)?;
                let rel_main = progress[0];
                let rel_foof = foof_delta.is_some().then(|| progress[1]).flatten();
                writeln!(
                    file,
                    "{},{},{},{},{},{},{}",
                    step,
                    epoch,
                    stats.loss,
                    opt_cell(rel_main),
                    opt_cell(rel_foof),
                    start.elapsed().as_millis(),
                    seed
                )?;
                final_train_loss = net.loss_mean(net.forward(&batch.inputs)?.logits(), &batch.targets)?;
            }
            step += 1;
        }
    }
    if diverged {
        final_train_loss = f64::NAN;
    }
    Ok(RunResult {
        seed,
        csv_path,
        final_train_loss,
        final_eval_loss: None,
        final_eval_accuracy: None,
        diverged,
        steps: step,
    })
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

/// One axis per key, values tried in the listed order.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub axes: Vec<(String, Vec<String>)>,
}

/// Parse a gridfile: one `key = v1, v2, ...` line per axis. List-valued
/// config keys cannot be gridded (their commas would be ambiguous).
pub fn parse_gridfile(text: &str) -> Result<GridSpec> {
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            config_err(format!("gridfile line {}: expected 'key = v1, v2'", lineno + 1))
        })?;
        let key = key.trim().to_string();
        if key == "hidden" || key == "seeds" {
            return Err(config_err(format!(
                "cannot grid over list-valued key '{key}'"
            )));
        }
        if axes.iter().any(|(k, _)| *k == key) {
            return Err(config_err(format!("duplicate grid axis '{key}'")));
        }
        let values: Vec<String> = value
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(config_err(format!("grid axis '{key}' has no values")));
        }
        // Surface unknown keys and parse errors before any training happens.
        let mut probe = ConfigBuilder::new();
        probe.apply_override(&key, &values[0])?;
        axes.push((key, values));
    }
    if axes.is_empty() {
        return Err(config_err("gridfile defines no axes".into()));
    }
    Ok(GridSpec { axes })
}

/// One evaluated grid point.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub overrides: Vec<(String, String)>,
    pub axis_indices: Vec<usize>,
    pub results: Vec<RunResult>,
    /// Median (lower middle) of the per-seed final training losses; NaN when
    /// the median seed diverged.
    pub median_final_loss: f64,
    pub diverged: bool,
}

/// All cells plus the selection.
#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub cells: Vec<GridCell>,
    pub best: usize,
    /// The winner sits at the edge of some axis with ≥ 2 values — the grid
    /// likely needs extending in that direction.
    pub on_boundary: bool,
}

/// NaN-last ordering key for loss comparison.
fn loss_key(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

fn median_loss(results: &[RunResult]) -> f64 {
    let mut finals: Vec<f64> = results.iter().map(|r| r.final_train_loss).collect();
    finals.sort_by(|a, b| loss_key(*a).partial_cmp(&loss_key(*b)).unwrap());
    finals[(finals.len() - 1) / 2]
}

/// Exhaustively evaluate the grid over `base`, selecting the cell whose
/// median final training loss is lowest (diverged seeds rank last). Writes
/// per-run CSVs under distinct cell names plus a `{name}-grid-summary.csv`.
pub fn grid_search(base: &ConfigBuilder, grid: &GridSpec) -> Result<GridOutcome> {
    grid_search_with_root(base, grid, &data_root_from_env())
}

pub fn grid_search_with_root(
    base: &ConfigBuilder,
    grid: &GridSpec,
    root: &Path,
) -> Result<GridOutcome> {
    let base_name = base.clone().build()?.name;
    let cell_count: usize = grid.axes.iter().map(|(_, v)| v.len()).product();
    let mut cells = Vec::with_capacity(cell_count);
    for cell in 0..cell_count {
        // Odometer decomposition, last axis fastest.
        let mut rem = cell;
        let mut axis_indices = vec![0usize; grid.axes.len()];
        for (ai, (_, values)) in grid.axes.iter().enumerate().rev() {
            axis_indices[ai] = rem % values.len();
            rem /= values.len();
        }
        let mut builder = base.clone();
        let mut overrides = Vec::with_capacity(grid.axes.len());
        for (ai, (key, values)) in grid.axes.iter().enumerate() {
            let value = &values[axis_indices[ai]];
            builder.apply_override(key, value)?;
            overrides.push((key.clone(), value.clone()));
        }
        builder.apply_override("name", &format!("{base_name}-cell{cell}"))?;
        let config = builder.build()?;
        let results = run_experiment_with_root(&config, root)?;
        let median = median_loss(&results);
        let diverged = results.iter().any(|r| r.diverged);
        cells.push(GridCell {
            overrides,
            axis_indices,
            results,
            median_final_loss: median,
            diverged,
        });
    }

    let best = cells
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            loss_key(a.median_final_loss)
                .partial_cmp(&loss_key(b.median_final_loss))
                .unwrap()
        })
        .map(|(i, _)| i)
        .expect("grids are nonempty by construction");
    let on_boundary = grid
        .axes
        .iter()
        .enumerate()
        .any(|(ai, (_, values))| {
            values.len() >= 2
                && (cells[best].axis_indices[ai] == 0
                    || cells[best].axis_indices[ai] == values.len() - 1)
        });

    let config = base.clone().build()?;
    fs::create_dir_all(&config.out_dir)?;
    let mut summary =
        fs::File::create(config.out_dir.join(format!("{base_name}-grid-summary.csv")))?;
    let axis_names: Vec<&str> = grid.axes.iter().map(|(k, _)| k.as_str()).collect();
    writeln!(
        summary,
        "cell,{},median_final_loss,diverged,selected",
        axis_names.join(",")
    )?;
    for (i, cell) in cells.iter().enumerate() {
        let values: Vec<&str> = cell.overrides.iter().map(|(_, v)| v.as_str()).collect();
        writeln!(
            summary,
            "{},{},{},{},{}",
            i,
            values.join(","),
            cell.median_final_loss,
            cell.diverged,
            i == best
        )?;
    }

    Ok(GridOutcome {
        cells,
        best,
        on_boundary,
    })
}

// ---------------------------------------------------------------------------
// Posterior-sample dumps
// ---------------------------------------------------------------------------

/// Draw `samples` posterior weight samples around the freshly initialized
/// network (first seed), using the whole loaded training subset as the
/// curvature batch, and write them as a CSV (one row per sample).
pub fn laplace_sample_run(config: &ExperimentConfig, samples: usize) -> Result<PathBuf> {
    laplace_sample_run_with_root(config, samples, &data_root_from_env())
}

pub fn laplace_sample_run_with_root(
    config: &ExperimentConfig,
    samples: usize,
    root: &Path,
) -> Result<PathBuf> {
    if samples == 0 {
        return Err(config_err("sample count must be at least 1".into()));
    }
    let (train, _) = load_dataset(&config.data, root)?;
    let dims = network_dims(&train, &config.hidden)?;
    let seed = config.seeds[0];
    let net = NetworkState::new(&dims, config.activation, config.loss, seed)?;
    let mode = match config.optimizer.fisher {
        FisherChoice::Mc => FisherMode::Mc {
            seed: derive_seed(seed, 0x1a9c, 0),
        },
        FisherChoice::Full => FisherMode::Full,
    };
    let curv = ImplicitCurvature::build(&net, &train.inputs, mode)?;
    let spec = LaplaceSpec {
        prior_diag: Array1::from_elem(net.num_params(), config.prior_precision),
        curv: &curv,
        datapoints: config.datapoints.unwrap_or(train.len() as f64),
        seed,
    };
    let draws = laplace_sample_batch(&spec, samples)?;

    fs::create_dir_all(&config.out_dir)?;
    let path = config
        .out_dir
        .join(format!("{}-laplace.csv", config.name));
    let mut file = fs::File::create(&path)?;
    let header: Vec<String> = (0..draws.nrows()).map(|i| format!("w{i}")).collect();
    writeln!(file, "{}", header.join(","))?;
    for s in 0..draws.ncols() {
        let row: Vec<String> = draws.column(s).iter().map(|v| v.to_string()).collect();
        writeln!(file, "{}", row.join(","))?;
    }
    Ok(path)
}

// ---------------------------------------------------------------------------
// Oracle validation and run-dir summaries
// ---------------------------------------------------------------------------

/// Run the dense-oracle agreement matrix, print one line per check, and
/// report whether everything passed.
pub fn validate_oracle_report<W: Write>(out: &mut W) -> Result<bool> {
    let checks = agreement_checks(Fault::None)?;
    let mut failed = 0usize;
    for check in &checks {
        writeln!(
            out,
            "{} {}  max deviation {:.3e}  tolerance {:.0e}",
            if check.pass { "PASS" } else { "FAIL" },
            check.name,
            check.max_deviation,
            check.tolerance,
        )?;
        if !check.pass {
            failed += 1;
        }
    }
    writeln!(out, "{} checks, {} failed", checks.len(), failed)?;
    Ok(failed == 0)
}

/// Summarize the `alignment_to_foof` column of every CSV in a run directory.
pub fn summarize_alignment<W: Write>(dir: &Path, out: &mut W) -> Result<()> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data {
            message: format!("no CSV files under {}", dir.display()),
        });
    }
    for path in paths {
        let text = fs::read_to_string(&path)?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        let col = header.split(',').position(|c| c == "alignment_to_foof");
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let Some(col) = col else {
            writeln!(out, "{name}: no alignment column")?;
            continue;
        };
        let values: Vec<f64> = lines
            .filter_map(|l| l.split(',').nth(col))
            .filter_map(|c| c.parse().ok())
            .collect();
        if values.is_empty() {
            writeln!(out, "{name}: no alignment data")?;
        } else {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            writeln!(
                out,
                "{name}: {} rows, alignment mean {:.4} min {:.4} max {:.4}",
                values.len(),
                mean,
                min,
                max
            )?;
        }
    }
    Ok(())
}
