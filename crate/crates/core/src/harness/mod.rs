//! Training loop, metrics, and experiment drivers.
//!
//! [`train`] runs the full Phase II procedure on one configuration: generate
//! (or accept) a slab dataset, split every environment into fit and
//! validation parts, then take a fixed number of Adam steps where each batch
//! stacks an equal draw from every training environment and the loss is mean
//! cross-entropy plus the configured penalty on the logits. Evaluation
//! happens once, at the final step — no early stopping — and model selection
//! across trials uses validation accuracy only.
//!
//! Everything is deterministic: the dataset comes from the data seed, the
//! split from the data seed, and initialization plus batch order from the
//! training seed. Two runs of the same configuration produce identical
//! results, bit for bit.

mod persist;
mod sweep;

pub use persist::{
    comparison_csv, comparison_markdown, curve_csv, read_jsonl, sweep_summary_csv, write_jsonl,
};
pub use sweep::{
    aggregate_trials, compare_constraints, curve_summary, lambda_sensitivity,
    standard_comparison_arms, sweep, sweep_trials, CompareArm, ComparisonRow, ComparisonTable,
    CurvePoint, SearchSpace, SeedOutcome, SweepConfig, SweepReport,
};

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    self, init_params, loss_and_grad, AdamConfig, AdamState, Matrix, MlpParams, NnError,
};
use crate::penalties::{self, BatchMeta, Baseline, PenaltyConfig, PenaltyError};
use crate::synthdata::{
    gen_slab, split_train_val, EnvData, EnvRole, SlabDatasetSpec, SynthError, TabularDataset,
};
use crate::{Classify, FailureClass};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] SynthError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Penalty(#[from] PenaltyError),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("results line {line}: {message}")]
    Jsonl { line: usize, message: String },
    #[error("no trials to aggregate")]
    NoTrials,
    #[error("every seed lost all its trials to numeric failure")]
    AllTrialsFailed,
}

impl Classify for HarnessError {
    fn class(&self) -> FailureClass {
        match self {
            HarnessError::Data(e) => e.class(),
            HarnessError::Nn(e) => e.class(),
            HarnessError::AllTrialsFailed => FailureClass::Runtime,
            _ => FailureClass::Config,
        }
    }
}

/// Which split picks the best trial of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMode {
    /// Validation rows drawn from the test environments.
    TestDomainValidation,
    /// Validation rows drawn from the training environments.
    TrainDomainValidation,
}

/// One complete training configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub data: SlabDatasetSpec,
    pub penalty: PenaltyConfig,
    pub steps: usize,
    pub batch_per_env: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fixed at zero; the field exists so configs can state it explicitly.
    pub dropout: f64,
    pub hidden: Vec<usize>,
    pub val_fraction: f64,
    /// Seed for parameter initialization and batch shuffling. The dataset
    /// and its split are governed by `data.seed`.
    pub seed: u64,
    pub selection: SelectionMode,
}

impl TrainConfig {
    /// Defaults for the slab experiments: 2000 steps, 128 rows per
    /// environment per batch, two 64-unit ReLU hidden layers (our concrete
    /// instantiation of a small 3-layer MLP — narrow enough for quick CPU
    /// sweeps), 10% validation.
    pub fn standard(data: SlabDatasetSpec) -> TrainConfig {
        TrainConfig {
            data,
            penalty: PenaltyConfig::erm(),
            steps: 2000,
            batch_per_env: 128,
            lr: 1e-3,
            weight_decay: 0.0,
            dropout: 0.0,
            hidden: vec![64, 64],
            val_fraction: 0.1,
            seed: 0,
            selection: SelectionMode::TestDomainValidation,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.steps == 0 {
            return Err(HarnessError::BadConfig("steps must be positive".into()));
        }
        if self.batch_per_env == 0 {
            return Err(HarnessError::BadConfig(
                "batch_per_env must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(HarnessError::BadConfig(format!("bad lr {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(HarnessError::BadConfig(format!(
                "bad weight_decay {}",
                self.weight_decay
            )));
        }
        if self.dropout != 0.0 {
            return Err(HarnessError::BadConfig(
                "dropout is not supported and must stay 0".into(),
            ));
        }
        self.data.validate()?;
        self.penalty.validate()?;
        Ok(())
    }
}

/// The hyperparameters that vary across sweep trials, echoed into every
/// result so reports are self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialKey {
    pub seed: u64,
    pub lr: f64,
    pub lambda: f64,
    pub gamma: Option<f64>,
    pub anneal_iters: Option<usize>,
}

impl TrialKey {
    fn from_config(cfg: &TrainConfig) -> TrialKey {
        let (lambda, gamma, anneal) = match cfg.penalty.baseline {
            Some(kind) => (
                cfg.penalty.baseline_lambda,
                rbf_gamma(&cfg.penalty.baseline_kernel),
                matches!(kind, Baseline::Vrex | Baseline::Irmv1)
                    .then_some(cfg.penalty.anneal_iters),
            ),
            None => {
                let lambda = cfg
                    .penalty
                    .attr_penalties
                    .first()
                    .map(|p| p.lambda)
                    .unwrap_or(0.0);
                let gamma = cfg
                    .penalty
                    .attr_penalties
                    .iter()
                    .find_map(|p| rbf_gamma(&p.kernel));
                (lambda, gamma, None)
            }
        };
        TrialKey {
            seed: cfg.seed,
            lr: cfg.lr,
            lambda,
            gamma,
            anneal_iters: anneal,
        }
    }
}

fn rbf_gamma(kernel: &penalties::KernelConfig) -> Option<f64> {
    match kernel {
        penalties::KernelConfig::Rbf { gamma } => Some(*gamma),
        penalties::KernelConfig::L2MeanDiff => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub step: usize,
    pub reason: String,
}

/// Accuracy of one environment on its fit and validation parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvAccuracy {
    pub env: usize,
    pub role: EnvRole,
    pub fit_split: f64,
    pub val_split: f64,
}

/// Outcome of one training run. Accuracies are fractions in [0, 1]; the
/// penalty trace averages the unweighted penalty over consecutive 100-step
/// windows. `wall_time_s` is the only non-deterministic field and never
/// enters summary files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub key: TrialKey,
    pub env_accuracy: Vec<EnvAccuracy>,
    /// Pooled accuracy over the training environments' fit rows.
    pub train_accuracy: f64,
    /// Pooled accuracy over the validation rows chosen by the selection
    /// mode.
    pub val_accuracy: f64,
    /// Pooled accuracy over the test environments' fit rows.
    pub test_accuracy: f64,
    /// Minimum accuracy over (attribute value, label) groups of the test
    /// rows.
    pub worst_group_accuracy: f64,
    pub penalty_trace: Vec<f64>,
    /// Mean skipped group pairs per step, same windows as `penalty_trace`.
    pub skip_trace: Vec<f64>,
    pub failure: Option<TrialFailure>,
    pub wall_time_s: f64,
}

// ── metrics ──────────────────────────────────────────────────────────────

/// Standard classification metrics over parallel slices: overall accuracy,
/// accuracy per environment, and the minimum accuracy over
/// (attribute value, label) groups.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_env: BTreeMap<usize, f64>,
    pub worst_group: f64,
}

pub fn metrics(
    preds: &[usize],
    labels: &[usize],
    envs: &[usize],
    attr: &[i64],
) -> Result<Metrics, HarnessError> {
    if preds.is_empty() {
        return Err(HarnessError::BadConfig("metrics over empty input".into()));
    }
    if preds.len() != labels.len() || preds.len() != envs.len() || preds.len() != attr.len() {
        return Err(HarnessError::BadConfig(format!(
            "metrics input lengths differ: {} preds, {} labels, {} envs, {} attrs",
            preds.len(),
            labels.len(),
            envs.len(),
            attr.len()
        )));
    }
    let mut correct = 0usize;
    let mut env_counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut group_counts: BTreeMap<(i64, usize), (usize, usize)> = BTreeMap::new();
    for i in 0..preds.len() {
        let hit = preds[i] == labels[i];
        correct += hit as usize;
        let e = env_counts.entry(envs[i]).or_insert((0, 0));
        e.0 += hit as usize;
        e.1 += 1;
        let g = group_counts.entry((attr[i], labels[i])).or_insert((0, 0));
        g.0 += hit as usize;
        g.1 += 1;
    }
    let frac = |&(c, n): &(usize, usize)| c as f64 / n as f64;
    Ok(Metrics {
        accuracy: correct as f64 / preds.len() as f64,
        per_env: env_counts.iter().map(|(&e, cn)| (e, frac(cn))).collect(),
        worst_group: group_counts.values().map(frac).fold(f64::INFINITY, f64::min),
    })
}

// ── batching ─────────────────────────────────────────────────────────────

/// Cycles through one environment's rows in shuffled order, reshuffling at
/// every epoch boundary.
struct EnvBatcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EnvBatcher {
    fn new(n_rows: usize, train_seed: u64, env_id: usize) -> EnvBatcher {
        let mut rng = ChaCha8Rng::seed_from_u64(train_seed);
        // Streams below 1000 belong to the data generator's namespace.
        rng.set_stream(1000 + env_id as u64);
        let mut b = EnvBatcher {
            order: (0..n_rows).collect(),
            pos: 0,
            rng,
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

// ── training ─────────────────────────────────────────────────────────────

/// Generates the configured dataset and trains on it.
pub fn train(cfg: &TrainConfig) -> Result<TrialResult, HarnessError> {
    cfg.validate()?;
    let dataset = gen_slab(&cfg.data)?;
    train_on(&dataset, cfg)
}

/// Trains on an existing dataset (sweeps generate it once and reuse it).
/// The fit/validation split is seeded by `cfg.data.seed`, so it is a
/// property of the dataset, not of the training seed.
pub fn train_on(dataset: &TabularDataset, cfg: &TrainConfig) -> Result<TrialResult, HarnessError> {
    cfg.validate()?;
    validate_penalty_columns(dataset, &cfg.penalty)?;
    let started = Instant::now();

    let (fit, val) = split_train_val(dataset, cfg.val_fraction, cfg.data.seed)?;
    let fit_train: Vec<&EnvData> = fit.train_envs().collect();
    if fit_train.is_empty() {
        return Err(HarnessError::BadConfig("no training environments".into()));
    }
    if dataset.test_envs().next().is_none() {
        return Err(HarnessError::BadConfig("no test environment".into()));
    }

    let mut dims = vec![dataset.feature_dim];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(dataset.n_classes);
    let mut params = init_params(&dims, cfg.seed)?;
    let mut opt = AdamState::new(
        &params,
        AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::with_lr(cfg.lr)
        },
    );
    let mut batchers: Vec<EnvBatcher> = fit_train
        .iter()
        .map(|env| EnvBatcher::new(env.rows.len(), cfg.seed, env.id))
        .collect();

    let mut trace = Trace::new(cfg.steps.div_ceil(100));
    let key = TrialKey::from_config(cfg);

    for step in 0..cfg.steps {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(cfg.batch_per_env * fit_train.len());
        let mut labels = Vec::with_capacity(rows.capacity());
        let mut env_ids = Vec::with_capacity(rows.capacity());
        let mut attr_cols: Vec<Vec<i64>> = vec![Vec::new(); dataset.attr_names.len()];
        for (env, batcher) in fit_train.iter().zip(&mut batchers) {
            for idx in batcher.next_batch(cfg.batch_per_env) {
                let row = &env.rows[idx];
                rows.push(row.x.clone());
                labels.push(row.y);
                env_ids.push(env.id);
                for (col, &a) in attr_cols.iter_mut().zip(&row.attrs) {
                    col.push(a);
                }
            }
        }
        let x = Matrix::from_rows(&rows);
        let meta = BatchMeta::new(env_ids, labels.clone(), dataset.attr_names.clone(), attr_cols)?;
        let step_penalty = cfg.penalty.at_step(step);

        let mut stats = (0.0, 0usize);
        let result = loss_and_grad(&params, &x, &labels, |logits| {
            let out = penalties::evaluate(logits, &meta, &step_penalty)?;
            stats = (out.unscaled, out.pairs_skipped);
            Ok((out.value, out.grad))
        });
        let (_, grads) = match result {
            Ok(v) => v,
            Err(NnError::NonFinite { what }) => {
                return Ok(failed_result(key, step, &what, trace, started));
            }
            Err(e) => return Err(e.into()),
        };
        match opt.step(&mut params, &grads) {
            Ok(()) => {}
            Err(NnError::NonFinite { what }) => {
                return Ok(failed_result(key, step, &what, trace, started));
            }
            Err(e) => return Err(e.into()),
        }
        trace.record(step, stats.0, stats.1);
    }

    match evaluate_params(&params, dataset, &fit, &val, cfg.selection) {
        Ok(eval) => Ok(TrialResult {
            key,
            env_accuracy: eval.env_accuracy,
            train_accuracy: eval.train_accuracy,
            val_accuracy: eval.val_accuracy,
            test_accuracy: eval.test_accuracy,
            worst_group_accuracy: eval.worst_group_accuracy,
            penalty_trace: trace.penalty_means(),
            skip_trace: trace.skip_means(),
            failure: None,
            wall_time_s: started.elapsed().as_secs_f64(),
        }),
        Err(HarnessError::Nn(NnError::NonFinite { what })) => {
            Ok(failed_result(key, cfg.steps, &what, trace, started))
        }
        Err(e) => Err(e),
    }
}

fn validate_penalty_columns(
    dataset: &TabularDataset,
    penalty: &PenaltyConfig,
) -> Result<(), HarnessError> {
    penalty.validate()?;
    let known = |name: &str| {
        name == penalties::ENV_NAME
            || name == penalties::LABEL_NAME
            || dataset.attr_names.iter().any(|a| a == name)
    };
    for pen in &penalty.attr_penalties {
        for name in std::iter::once(&pen.constraint.attr).chain(&pen.constraint.given) {
            if !known(name) {
                return Err(PenaltyError::MissingColumn(name.clone()).into());
            }
        }
    }
    Ok(())
}

struct Trace {
    penalty_sum: Vec<f64>,
    skip_sum: Vec<f64>,
    count: Vec<usize>,
}

impl Trace {
    fn new(windows: usize) -> Trace {
        Trace {
            penalty_sum: vec![0.0; windows],
            skip_sum: vec![0.0; windows],
            count: vec![0; windows],
        }
    }

    fn record(&mut self, step: usize, penalty: f64, skipped: usize) {
        let w = step / 100;
        self.penalty_sum[w] += penalty;
        self.skip_sum[w] += skipped as f64;
        self.count[w] += 1;
    }

    fn penalty_means(&self) -> Vec<f64> {
        self.means(&self.penalty_sum)
    }

    fn skip_means(&self) -> Vec<f64> {
        self.means(&self.skip_sum)
    }

    fn means(&self, sums: &[f64]) -> Vec<f64> {
        sums.iter()
            .zip(&self.count)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }
}

fn failed_result(
    key: TrialKey,
    step: usize,
    reason: &str,
    trace: Trace,
    started: Instant,
) -> TrialResult {
    TrialResult {
        key,
        env_accuracy: Vec::new(),
        train_accuracy: 0.0,
        val_accuracy: 0.0,
        test_accuracy: 0.0,
        worst_group_accuracy: 0.0,
        penalty_trace: trace.penalty_means(),
        skip_trace: trace.skip_means(),
        failure: Some(TrialFailure {
            step,
            reason: format!("non-finite {reason}"),
        }),
        wall_time_s: started.elapsed().as_secs_f64(),
    }
}

struct Evaluation {
    env_accuracy: Vec<EnvAccuracy>,
    train_accuracy: f64,
    val_accuracy: f64,
    test_accuracy: f64,
    worst_group_accuracy: f64,
}

/// Split-level predictions: env parts are evaluated separately and pooled
/// per reporting bucket.
fn evaluate_params(
    params: &MlpParams,
    dataset: &TabularDataset,
    fit: &TabularDataset,
    val: &TabularDataset,
    selection: SelectionMode,
) -> Result<Evaluation, HarnessError> {
    let mut env_accuracy = Vec::new();
    let mut pool_train = Pool::default();
    let mut pool_val = Pool::default();
    let mut pool_test = Pool::default();

    for env in &dataset.envs {
        let fit_env = fit.env(env.id).expect("split keeps every environment");
        let val_env = val.env(env.id).expect("split keeps every environment");
        let fit_eval = eval_rows(params, fit_env)?;
        let val_eval = eval_rows(params, val_env)?;
        env_accuracy.push(EnvAccuracy {
            env: env.id,
            role: env.role,
            fit_split: fit_eval.accuracy(),
            val_split: val_eval.accuracy(),
        });
        match env.role {
            EnvRole::Train => {
                pool_train.absorb(&fit_eval);
                if selection == SelectionMode::TrainDomainValidation {
                    pool_val.absorb(&val_eval);
                }
            }
            EnvRole::Test => {
                pool_test.absorb(&fit_eval);
                if selection == SelectionMode::TestDomainValidation {
                    pool_val.absorb(&val_eval);
                }
            }
        }
    }
    let worst = metrics(
        &pool_test.preds,
        &pool_test.labels,
        &pool_test.envs,
        &pool_test.attr,
    )?;
    Ok(Evaluation {
        env_accuracy,
        train_accuracy: pool_train.accuracy(),
        val_accuracy: pool_val.accuracy(),
        test_accuracy: pool_test.accuracy(),
        worst_group_accuracy: worst.worst_group,
    })
}

#[derive(Default)]
struct Pool {
    preds: Vec<usize>,
    labels: Vec<usize>,
    envs: Vec<usize>,
    attr: Vec<i64>,
}

impl Pool {
    fn absorb(&mut self, other: &Pool) {
        self.preds.extend_from_slice(&other.preds);
        self.labels.extend_from_slice(&other.labels);
        self.envs.extend_from_slice(&other.envs);
        self.attr.extend_from_slice(&other.attr);
    }

    fn accuracy(&self) -> f64 {
        if self.preds.is_empty() {
            return 0.0;
        }
        let correct = self
            .preds
            .iter()
            .zip(&self.labels)
            .filter(|(p, l)| p == l)
            .count();
        correct as f64 / self.preds.len() as f64
    }
}

fn eval_rows(params: &MlpParams, env: &EnvData) -> Result<Pool, HarnessError> {
    let rows: Vec<Vec<f64>> = env.rows.iter().map(|r| r.x.clone()).collect();
    let x = Matrix::from_rows(&rows);
    let preds = nn::predict(params, &x)?;
    Ok(Pool {
        preds,
        labels: env.rows.iter().map(|r| r.y).collect(),
        envs: vec![env.id; env.rows.len()],
        attr: env
            .rows
            .iter()
            .map(|r| r.attrs.first().copied().unwrap_or(0))
            .collect(),
    })
}

// ── tests ────────────────────────────────────────────────────────────────
