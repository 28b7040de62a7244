//! Random hyperparameter search, model selection, and the two experiment
//! drivers built on it: the per-shift constraint comparison and the
//! λ-sensitivity curve.
//!
//! A sweep samples `n_trials` configurations per seed from value lists,
//! trains every trial (in parallel — trials are independent and internally
//! seeded), picks each seed's best trial by validation accuracy, and reports
//! mean ± standard error of the selected trials across seeds. Trials that
//! diverge are excluded from selection and counted; a seed whose trials all
//! diverge is dropped from the aggregate and flagged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_on, HarnessError, TrainConfig, TrialResult};
use crate::penalties::{
    AttrPenalty, Baseline, ConstraintSpec, KernelConfig, PenaltyConfig,
};
use crate::synthdata::{gen_slab, SlabShift};

/// Value lists the sweep draws from. An empty list means "leave the base
/// config's value alone".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub lrs: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub anneal_iters: Vec<usize>,
}

impl SearchSpace {
    /// The standard space for a penalty configuration: learning rates
    /// {1e-2..1e-5}; penalty weights {0.1, 1, 10, 100} for the
    /// distribution-matching penalties and {0.01..100} plus annealing
    /// {10, 100, 1000} for VREx/IRMv1; RBF bandwidths {1e-2, 1e-4, 1e-6}
    /// only where an RBF kernel is in play.
    pub fn for_penalty(penalty: &PenaltyConfig) -> SearchSpace {
        let lrs = vec![1e-2, 1e-3, 1e-4, 1e-5];
        let uses_rbf = match penalty.baseline {
            Some(Baseline::MmdUncond) | Some(Baseline::MmdCondY) => {
                matches!(penalty.baseline_kernel, KernelConfig::Rbf { .. })
            }
            Some(_) => false,
            None => penalty
                .attr_penalties
                .iter()
                .any(|p| matches!(p.kernel, KernelConfig::Rbf { .. })),
        };
        let gammas = if uses_rbf {
            vec![1e-2, 1e-4, 1e-6]
        } else {
            Vec::new()
        };
        match penalty.baseline {
            Some(Baseline::Erm) => SearchSpace {
                lrs,
                lambdas: Vec::new(),
                gammas: Vec::new(),
                anneal_iters: Vec::new(),
            },
            Some(Baseline::Vrex) | Some(Baseline::Irmv1) => SearchSpace {
                lrs,
                lambdas: vec![0.01, 0.1, 1.0, 10.0, 100.0],
                gammas: Vec::new(),
                anneal_iters: vec![10, 100, 1000],
            },
            _ => SearchSpace {
                lrs,
                lambdas: vec![0.1, 1.0, 10.0, 100.0],
                gammas,
                anneal_iters: Vec::new(),
            },
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.lrs.is_empty() {
            return Err(HarnessError::BadConfig(
                "search space needs at least one learning rate".into(),
            ));
        }
        Ok(())
    }
}

/// Sweep protocol: how many random draws per seed, and which seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub n_trials: usize,
    pub seeds: Vec<u64>,
    pub space: SearchSpace,
}

impl SweepConfig {
    /// The full protocol: 20 random draws, 3 seeds.
    pub fn standard(space: SearchSpace) -> SweepConfig {
        SweepConfig {
            n_trials: 20,
            seeds: vec![0, 1, 2],
            space,
        }
    }

    /// Reduced budget (10 draws, 3 seeds) so a full comparison finishes in
    /// minutes.
    pub fn reduced(space: SearchSpace) -> SweepConfig {
        SweepConfig {
            n_trials: 10,
            seeds: vec![0, 1, 2],
            space,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_trials == 0 {
            return Err(HarnessError::BadConfig("n_trials must be ≥ 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::BadConfig("need at least one seed".into()));
        }
        self.space.validate()
    }
}

/// Draws one trial configuration. The draw order (lr, λ, γ, anneal) is
/// fixed so a given seed always produces the same trial sequence.
fn sample_trial(rng: &mut ChaCha8Rng, base: &TrainConfig, space: &SearchSpace) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.lr = space.lrs[rng.gen_range(0..space.lrs.len())];
    if !space.lambdas.is_empty() {
        let lambda = space.lambdas[rng.gen_range(0..space.lambdas.len())];
        if cfg.penalty.baseline.is_some() {
            cfg.penalty.baseline_lambda = lambda;
        }
        for pen in &mut cfg.penalty.attr_penalties {
            pen.lambda = lambda;
        }
    }
    if !space.gammas.is_empty() {
        let gamma = space.gammas[rng.gen_range(0..space.gammas.len())];
        if let KernelConfig::Rbf { gamma: g } = &mut cfg.penalty.baseline_kernel {
            *g = gamma;
        }
        for pen in &mut cfg.penalty.attr_penalties {
            if let KernelConfig::Rbf { gamma: g } = &mut pen.kernel {
                *g = gamma;
            }
        }
    }
    if !space.anneal_iters.is_empty() {
        cfg.penalty.anneal_iters = space.anneal_iters[rng.gen_range(0..space.anneal_iters.len())];
    }
    cfg
}

/// One seed's slice of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub n_trials: usize,
    pub n_failed: usize,
    /// Best non-failed trial by validation accuracy; `None` when every
    /// trial failed.
    pub selected: Option<TrialResult>,
}

/// Aggregated sweep report. Accuracies are fractions; the standard error is
/// the sample standard deviation over seeds divided by √(#seeds), zero for
/// a single seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seeds: Vec<SeedOutcome>,
    pub excluded_seeds: Vec<u64>,
    pub n_failed_trials: usize,
    pub mean_train: f64,
    pub se_train: f64,
    pub mean_test: f64,
    pub se_test: f64,
    pub mean_worst_group: f64,
    pub se_worst_group: f64,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / n.sqrt())
}

/// Groups finished trials by their seed, selects each seed's best non-failed
/// trial by validation accuracy (first wins ties), and aggregates across
/// seeds. Also the engine behind report regeneration from persisted trials.
pub fn aggregate_trials(trials: &[TrialResult]) -> Result<SweepReport, HarnessError> {
    if trials.is_empty() {
        return Err(HarnessError::NoTrials);
    }
    let mut seed_order: Vec<u64> = Vec::new();
    for t in trials {
        if !seed_order.contains(&t.key.seed) {
            seed_order.push(t.key.seed);
        }
    }
    let mut seeds = Vec::new();
    let mut excluded = Vec::new();
    let mut n_failed_total = 0;
    for &seed in &seed_order {
        let of_seed: Vec<&TrialResult> = trials.iter().filter(|t| t.key.seed == seed).collect();
        let n_failed = of_seed.iter().filter(|t| t.failure.is_some()).count();
        n_failed_total += n_failed;
        let mut selected: Option<&TrialResult> = None;
        for t in &of_seed {
            if t.failure.is_some() {
                continue;
            }
            if selected.map_or(true, |s| t.val_accuracy > s.val_accuracy) {
                selected = Some(t);
            }
        }
        if selected.is_none() {
            excluded.push(seed);
        }
        seeds.push(SeedOutcome {
            seed,
            n_trials: of_seed.len(),
            n_failed,
            selected: selected.cloned(),
        });
    }
    let chosen: Vec<&TrialResult> = seeds.iter().filter_map(|s| s.selected.as_ref()).collect();
    if chosen.is_empty() {
        return Err(HarnessError::AllTrialsFailed);
    }
    let (mean_train, se_train) =
        mean_se(&chosen.iter().map(|t| t.train_accuracy).collect::<Vec<_>>());
    let (mean_test, se_test) =
        mean_se(&chosen.iter().map(|t| t.test_accuracy).collect::<Vec<_>>());
    let (mean_wg, se_wg) = mean_se(
        &chosen
            .iter()
            .map(|t| t.worst_group_accuracy)
            .collect::<Vec<_>>(),
    );
    Ok(SweepReport {
        seeds,
        excluded_seeds: excluded,
        n_failed_trials: n_failed_total,
        mean_train,
        se_train,
        mean_test,
        se_test,
        mean_worst_group: mean_wg,
        se_worst_group: se_wg,
    })
}

/// Runs the full random search: for every seed, `n_trials` sampled configs
/// (the seed also becomes the training seed), all trials trained in
/// parallel on one shared dataset, then per-seed selection and cross-seed
/// aggregation. Deterministic: parallel and serial runs agree exactly.
pub fn sweep(sweep_cfg: &SweepConfig, base: &TrainConfig) -> Result<SweepReport, HarnessError> {
    Ok(aggregate_trials(&sweep_trials(sweep_cfg, base)?)?)
}

/// Like [`sweep`] but returns every finished trial, for persistence.
pub fn sweep_trials(
    sweep_cfg: &SweepConfig,
    base: &TrainConfig,
) -> Result<Vec<TrialResult>, HarnessError> {
    sweep_cfg.validate()?;
    base.validate()?;
    let dataset = gen_slab(&base.data)?;
    let mut planned: Vec<TrainConfig> = Vec::new();
    for &seed in &sweep_cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Keep clear of the training loop's per-environment streams.
        rng.set_stream(u64::MAX);
        for _ in 0..sweep_cfg.n_trials {
            let mut cfg = sample_trial(&mut rng, base, &sweep_cfg.space);
            cfg.seed = seed;
            planned.push(cfg);
        }
    }
    let results: Vec<Result<TrialResult, HarnessError>> = planned
        .par_iter()
        .map(|cfg| train_on(&dataset, cfg))
        .collect();
    results.into_iter().collect()
}

// ── constraint comparison ────────────────────────────────────────────────

/// One row of a constraint comparison: a labeled penalty constraint and the
/// kernel it is enforced with.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareArm {
    pub label: String,
    pub constraint: ConstraintSpec,
    pub kernel: KernelConfig,
}

/// The two constraint forms the slab comparison contrasts on every shift:
/// conditional on (label, environment) versus conditional on environment
/// alone, both with the mean-difference kernel used on synthetic data.
pub fn standard_comparison_arms(shift: SlabShift) -> Vec<CompareArm> {
    let attr = shift.attr_name();
    // Mean-difference (L2) kernel: on low-dimensional tabular data the full
    // MMD adds nothing over matching group means, so the slab comparisons
    // use the cheaper statistic for both arms.
    vec![
        CompareArm {
            label: format!("X_c ⊥ {attr} | Y, E"),
            constraint: ConstraintSpec::new(attr, &["Y", "E"]),
            kernel: KernelConfig::L2MeanDiff,
        },
        CompareArm {
            label: format!("X_c ⊥ {attr} | E"),
            constraint: ConstraintSpec::new(attr, &["E"]),
            kernel: KernelConfig::L2MeanDiff,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub mean_train: f64,
    pub se_train: f64,
    pub mean_test: f64,
    pub se_test: f64,
    pub mean_worst_group: f64,
    pub n_failed_trials: usize,
    pub excluded_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub shift: String,
    pub rows: Vec<ComparisonRow>,
}

/// Sweeps each constraint arm on the base config's dataset and tabulates
/// train/test accuracy mean ± SE per arm. Returns the table plus each arm's
/// full report (for persistence and deeper inspection).
///
pub fn compare_constraints(
    base: &TrainConfig,
    arms: &[CompareArm],
    sweep_cfg: &SweepConfig,
) -> Result<(ComparisonTable, Vec<(String, SweepReport)>), HarnessError> {
    if arms.is_empty() {
        return Err(HarnessError::BadConfig("no comparison arms".into()));
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for arm in arms {
        let mut cfg = base.clone();
        cfg.penalty = PenaltyConfig::constraints(vec![AttrPenalty {
            constraint: arm.constraint.clone(),
            kernel: arm.kernel,
            lambda: 1.0,
        }]);
        let report = sweep(sweep_cfg, &cfg)?;
        rows.push(ComparisonRow {
            label: arm.label.clone(),
            mean_train: report.mean_train,
            se_train: report.se_train,
            mean_test: report.mean_test,
            se_test: report.se_test,
            mean_worst_group: report.mean_worst_group,
            n_failed_trials: report.n_failed_trials,
            excluded_seeds: report.excluded_seeds.clone(),
        });
        reports.push((arm.label.clone(), report));
    }
    Ok((
        ComparisonTable {
            shift: base.data.shift.as_str().to_string(),
            rows,
        },
        reports,
    ))
}

// ── λ-sensitivity curve ──────────────────────────────────────────────────

/// One point of the λ-sensitivity curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub label: String,
    pub lambda: f64,
    pub seed: u64,
    pub test_accuracy: f64,
    pub failed: bool,
}

/// Trains every (arm, λ, seed) cell at a fixed penalty weight — no search —
/// and returns the flat list of points, ordered by arm, then λ, then seed.
pub fn lambda_sensitivity(
    base: &TrainConfig,
    arms: &[CompareArm],
    lambdas: &[f64],
    seeds: &[u64],
) -> Result<Vec<CurvePoint>, HarnessError> {
    if lambdas.is_empty() {
        return Err(HarnessError::BadConfig("no λ values".into()));
    }
    if seeds.is_empty() {
        return Err(HarnessError::BadConfig("need at least one seed".into()));
    }
    base.validate()?;
    let dataset = gen_slab(&base.data)?;
    let mut cells: Vec<(String, f64, u64, TrainConfig)> = Vec::new();
    for arm in arms {
        for &lambda in lambdas {
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.seed = seed;
                cfg.penalty = PenaltyConfig::constraints(vec![AttrPenalty {
                    constraint: arm.constraint.clone(),
                    kernel: arm.kernel,
                    lambda,
                }]);
                cells.push((arm.label.clone(), lambda, seed, cfg));
            }
        }
    }
    let results: Vec<Result<TrialResult, HarnessError>> = cells
        .par_iter()
        .map(|(_, _, _, cfg)| train_on(&dataset, cfg))
        .collect();
    let mut points = Vec::new();
    for ((label, lambda, seed, _), result) in cells.iter().zip(results) {
        let trial = result?;
        points.push(CurvePoint {
            label: label.clone(),
            lambda: *lambda,
            seed: *seed,
            test_accuracy: trial.test_accuracy,
            failed: trial.failure.is_some(),
        });
    }
    Ok(points)
}

/// Mean test accuracy per (arm, λ) over seeds, skipping failed runs.
/// Returns (label, λ, mean accuracy, n_failed).
pub fn curve_summary(points: &[CurvePoint]) -> Vec<(String, f64, f64, usize)> {
    let mut order: Vec<(String, f64)> = Vec::new();
    for p in points {
        if !order.iter().any(|(l, v)| *l == p.label && *v == p.lambda) {
            order.push((p.label.clone(), p.lambda));
        }
    }
    order
        .into_iter()
        .map(|(label, lambda)| {
            let of_cell: Vec<&CurvePoint> = points
                .iter()
                .filter(|p| p.label == label && p.lambda == lambda)
                .collect();
            let ok: Vec<f64> = of_cell
                .iter()
                .filter(|p| !p.failed)
                .map(|p| p.test_accuracy)
                .collect();
            let n_failed = of_cell.len() - ok.len();
            let mean = if ok.is_empty() {
                0.0
            } else {
                ok.iter().sum::<f64>() / ok.len() as f64
            };
            (label, lambda, mean, n_failed)
        })
        .collect()
}

// ── tests ────────────────────────────────────────────────────────────────
