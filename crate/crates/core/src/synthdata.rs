//! Synthetic slab datasets with controlled attribute shifts.
//!
//! Each dataset has a scalar causal feature `x_c ~ Uniform[0,1)` whose slab
//! (equal-width bucket) determines the label, plus one integer attribute
//! whose correlation with the label is manufactured per environment:
//!
//! * **causal** — the attribute copies the label with per-environment
//!   probability `p` (and `|y - 1|` otherwise). Train environments use
//!   p = 0.9 and 1.0; the test environment flips the relationship with
//!   p = 0.0. Five classes, 10% label noise.
//! * **confounded** — a hidden coin `c` shifts the label upward in train
//!   environments and drives the attribute (`2c` with probability `p`).
//!   The coin's bias changes from 0.25 (train) to 0.75 (test), and the test
//!   environment drops the label shift entirely. Five classes.
//! * **selected** — rows are kept only when the attribute and the true
//!   label satisfy one of two linear relations, chosen per row with
//!   probability `p`; the test environment always uses the second relation.
//!   Four classes, 10% label noise applied after selection.
//!
//! Everything is driven by per-environment, per-field ChaCha streams, so
//! generation is deterministic for a `(spec, seed)` pair and adding the
//! optional independent attribute does not disturb the base columns.

use crate::{Classify, FailureClass};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad dataset spec: {0}")]
    BadSpec(String),
    #[error(
        "selection stalled in environment {env}: {accepted} of {proposals} proposals accepted; \
         the acceptance criteria are likely unsatisfiable"
    )]
    SelectionStalled {
        env: usize,
        proposals: usize,
        accepted: usize,
    },
    #[error("csv error at line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("environment {env} has {rows} rows; need at least 2 to split")]
    SplitTooSmall { env: usize, rows: usize },
    #[error("val fraction must lie strictly between 0 and 1, got {0}")]
    BadValFraction(f64),
    #[error("metrics/empty: {0}")]
    Empty(String),
}

impl Classify for SynthError {
    fn class(&self) -> FailureClass {
        match self {
            SynthError::SelectionStalled { .. } => FailureClass::Runtime,
            _ => FailureClass::Config,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvRole {
    Train,
    Test,
}

/// One environment: its id (also the value written to the `env` CSV column),
/// the mixing probability `p` whose meaning depends on the shift type, the
/// number of rows to generate, and whether it is a train or test domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub id: usize,
    pub p: f64,
    pub n_samples: usize,
    pub role: EnvRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlabShift {
    Causal,
    Confounded,
    Selected,
}

impl SlabShift {
    pub fn attr_name(self) -> &'static str {
        match self {
            SlabShift::Causal => "a_cause",
            SlabShift::Confounded => "a_conf",
            SlabShift::Selected => "a_sel",
        }
    }

    pub fn from_str_name(s: &str) -> Option<SlabShift> {
        Some(match s {
            "causal" => SlabShift::Causal,
            "confounded" => SlabShift::Confounded,
            "selected" => SlabShift::Selected,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SlabShift::Causal => "causal",
            SlabShift::Confounded => "confounded",
            SlabShift::Selected => "selected",
        }
    }
}

/// Knobs of the confounded generator. Defaults match the slab experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfoundedParams {
    /// P(c = 1) in train environments.
    pub c_prob_train: f64,
    /// P(c = 1) in the test environment.
    pub c_prob_test: f64,
    /// Probability that a train-environment label is shifted by `c`.
    pub label_shift_prob: f64,
}

impl Default for ConfoundedParams {
    fn default() -> Self {
        ConfoundedParams {
            c_prob_train: 0.25,
            c_prob_test: 0.75,
            label_shift_prob: 0.9,
        }
    }
}

/// Acceptance criteria of the selected generator: keep a row when the
/// per-row branch (taken with probability `p`) holds and
/// `a + y_true == sum_target`, or the branch fails and
/// `a - y_true == diff_target`. Exposed so impossible criteria can be
/// configured deliberately (the stall guard is otherwise unreachable).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedParams {
    pub sum_target: i64,
    pub diff_target: i64,
}

impl Default for SelectedParams {
    fn default() -> Self {
        SelectedParams {
            sum_target: 4,
            diff_target: 1,
        }
    }
}

/// Optional extra attribute that shifts independently of the label: its
/// value copies the environment index with probability `majority_prob` and
/// is uniform over the remaining values otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndAttrSpec {
    /// Number of attribute values; defaults to the environment count.
    pub n_values: Option<usize>,
    pub majority_prob: f64,
}

impl Default for IndAttrSpec {
    fn default() -> Self {
        IndAttrSpec {
            n_values: None,
            majority_prob: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlabDatasetSpec {
    pub shift: SlabShift,
    pub environments: Vec<EnvironmentSpec>,
    /// Probability of replacing a label with a uniformly random other class.
    /// Ignored by the confounded generator, whose label shift plays this role.
    pub label_noise: f64,
    pub seed: u64,
    pub extra_ind_attr: Option<IndAttrSpec>,
    /// Causal shift: compute the attribute from the post-noise label (the
    /// default), so the attribute is exactly independent of `x_c` given the
    /// observed label. `false` derives it from the clean label instead.
    pub attr_from_noisy_label: bool,
    /// Selected shift: apply the selection rule to the noisy label instead
    /// of the clean one. Default `false`: selection sees the clean label and
    /// noise lands afterwards.
    pub select_on_noisy_label: bool,
    pub confounded: ConfoundedParams,
    pub selected: SelectedParams,
}

impl SlabDatasetSpec {
    /// The standard three-environment layout for `shift` with `rows_per_env`
    /// rows in each environment.
    pub fn standard(shift: SlabShift, rows_per_env: usize, seed: u64) -> SlabDatasetSpec {
        let ps: &[f64] = match shift {
            SlabShift::Causal | SlabShift::Selected => &[0.9, 1.0, 0.0],
            SlabShift::Confounded => &[1.0, 0.9, 0.8],
        };
        SlabDatasetSpec::with_envs(shift, ps, rows_per_env, seed)
    }

    /// Like [`standard`](Self::standard) but with a custom mixing
    /// probability per environment. The last environment is the test domain.
    pub fn with_envs(
        shift: SlabShift,
        ps: &[f64],
        rows_per_env: usize,
        seed: u64,
    ) -> SlabDatasetSpec {
        let label_noise = match shift {
            SlabShift::Causal | SlabShift::Selected => 0.1,
            SlabShift::Confounded => 0.0,
        };
        let environments = ps
            .iter()
            .enumerate()
            .map(|(i, p)| EnvironmentSpec {
                id: i,
                p: *p,
                n_samples: rows_per_env,
                role: if i == ps.len() - 1 {
                    EnvRole::Test
                } else {
                    EnvRole::Train
                },
            })
            .collect();
        SlabDatasetSpec {
            shift,
            environments,
            label_noise,
            seed,
            extra_ind_attr: None,
            attr_from_noisy_label: true,
            select_on_noisy_label: false,
            confounded: ConfoundedParams::default(),
            selected: SelectedParams::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.environments.is_empty() {
            return Err(SynthError::BadSpec("no environments".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for e in &self.environments {
            if !ids.insert(e.id) {
                return Err(SynthError::BadSpec(format!("duplicate environment id {}", e.id)));
            }
            if !(0.0..=1.0).contains(&e.p) {
                return Err(SynthError::BadSpec(format!(
                    "environment {} has p={} outside [0,1]",
                    e.id, e.p
                )));
            }
            if e.n_samples == 0 {
                return Err(SynthError::BadSpec(format!("environment {} has no samples", e.id)));
            }
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(SynthError::BadSpec(format!(
                "label_noise={} outside [0,1]",
                self.label_noise
            )));
        }
        if !self.environments.iter().any(|e| e.role == EnvRole::Train) {
            return Err(SynthError::BadSpec("need at least one train environment".into()));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        match self.shift {
            SlabShift::Causal => 5,
            // Train labels reach y_true + c = 4 even though the test
            // environment only produces 0..=3.
            SlabShift::Confounded => 5,
            SlabShift::Selected => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub x: Vec<f64>,
    /// Attribute values, parallel to `TabularDataset::attr_names`.
    pub attrs: Vec<i64>,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvData {
    pub id: usize,
    pub role: EnvRole,
    pub rows: Vec<Row>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularDataset {
    pub envs: Vec<EnvData>,
    pub attr_names: Vec<String>,
    pub feature_dim: usize,
    pub n_classes: usize,
}

impl TabularDataset {
    pub fn env(&self, id: usize) -> Option<&EnvData> {
        self.envs.iter().find(|e| e.id == id)
    }

    pub fn train_envs(&self) -> impl Iterator<Item = &EnvData> {
        self.envs.iter().filter(|e| e.role == EnvRole::Train)
    }

    pub fn test_envs(&self) -> impl Iterator<Item = &EnvData> {
        self.envs.iter().filter(|e| e.role == EnvRole::Test)
    }

    pub fn attr_index(&self, name: &str) -> Option<usize> {
        self.attr_names.iter().position(|n| n == name)
    }

    pub fn total_rows(&self) -> usize {
        self.envs.iter().map(|e| e.rows.len()).sum()
    }
}

// ───────────────────────── rng streams ─────────────────────────

// Field identifiers for the per-environment ChaCha streams. Every field of
// the generating process draws from its own stream, so changing how one
// field is produced (or adding the independent attribute) leaves the other
// columns bit-identical.
const STREAM_XC: u64 = 0;
const STREAM_BRANCH: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_AUX: u64 = 3; // confounder coin / selected-attribute proposals
const STREAM_SHIFT: u64 = 4; // confounded label-shift coin
const STREAM_IND: u64 = 5; // optional independent attribute
const STREAM_SPLIT: u64 = 6; // train/val splitting

fn field_rng(seed: u64, env_id: usize, field: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&(env_id as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(bytes);
    rng.set_stream(field);
    rng
}

/// Equal-width bucket of `x ∈ [0,1)` among `k` buckets.
fn bucket(x: f64, k: usize) -> usize {
    ((x * k as f64) as usize).min(k - 1)
}

/// With probability `prob`, replaces `y` with a uniformly random *other*
/// class; otherwise returns `y` unchanged.
fn noisy_label(rng: &mut ChaCha8Rng, y: usize, n_classes: usize, prob: f64) -> usize {
    if prob > 0.0 && rng.gen_bool(prob) {
        let mut other = rng.gen_range(0..n_classes - 1);
        if other >= y {
            other += 1;
        }
        other
    } else {
        y
    }
}

// ───────────────────────── generators ─────────────────────────

/// Dispatches to the generator for `spec.shift` and appends the optional
/// independent attribute.
pub fn gen_slab(spec: &SlabDatasetSpec) -> Result<TabularDataset, SynthError> {
    spec.validate()?;
    let mut ds = match spec.shift {
        SlabShift::Causal => gen_causal(spec),
        SlabShift::Confounded => gen_confounded(spec),
        SlabShift::Selected => gen_selected(spec)?,
    };
    if let Some(ind) = &spec.extra_ind_attr {
        append_ind_attr(spec, ind, &mut ds)?;
    }
    Ok(ds)
}

fn gen_causal(spec: &SlabDatasetSpec) -> TabularDataset {
    let n_classes = 5;
    let mut envs = Vec::new();
    for env in &spec.environments {
        let mut xc_rng = field_rng(spec.seed, env.id, STREAM_XC);
        let mut branch_rng = field_rng(spec.seed, env.id, STREAM_BRANCH);
        let mut noise_rng = field_rng(spec.seed, env.id, STREAM_NOISE);
        let mut rows = Vec::with_capacity(env.n_samples);
        for _ in 0..env.n_samples {
            let xc: f64 = xc_rng.gen();
            let y_true = bucket(xc, n_classes);
            let y = noisy_label(&mut noise_rng, y_true, n_classes, spec.label_noise);
            let src = if spec.attr_from_noisy_label { y } else { y_true } as i64;
            let a = if branch_rng.gen_bool(env.p) { src } else { (src - 1).abs() };
            rows.push(Row {
                x: vec![xc, a as f64],
                attrs: vec![a],
                y,
            });
        }
        envs.push(EnvData {
            id: env.id,
            role: env.role,
            rows,
        });
    }
    TabularDataset {
        envs,
        attr_names: vec!["a_cause".into()],
        feature_dim: 2,
        n_classes,
    }
}

fn gen_confounded(spec: &SlabDatasetSpec) -> TabularDataset {
    let params = spec.confounded;
    let mut envs = Vec::new();
    for env in &spec.environments {
        let mut xc_rng = field_rng(spec.seed, env.id, STREAM_XC);
        let mut branch_rng = field_rng(spec.seed, env.id, STREAM_BRANCH);
        let mut conf_rng = field_rng(spec.seed, env.id, STREAM_AUX);
        let mut shift_rng = field_rng(spec.seed, env.id, STREAM_SHIFT);
        let c_prob = match env.role {
            EnvRole::Train => params.c_prob_train,
            EnvRole::Test => params.c_prob_test,
        };
        let mut rows = Vec::with_capacity(env.n_samples);
        for _ in 0..env.n_samples {
            let xc: f64 = xc_rng.gen();
            let y_true = bucket(xc, 4);
            let c = usize::from(conf_rng.gen_bool(c_prob));
            let y = match env.role {
                EnvRole::Train => {
                    if shift_rng.gen_bool(params.label_shift_prob) {
                        y_true + c
                    } else {
                        y_true
                    }
                }
                EnvRole::Test => y_true,
            };
            let a = if branch_rng.gen_bool(env.p) { 2 * c as i64 } else { 0 };
            rows.push(Row {
                x: vec![xc, a as f64],
                attrs: vec![a],
                y,
            });
        }
        envs.push(EnvData {
            id: env.id,
            role: env.role,
            rows,
        });
    }
    TabularDataset {
        envs,
        attr_names: vec!["a_conf".into()],
        feature_dim: 2,
        n_classes: 5,
    }
}

fn gen_selected(spec: &SlabDatasetSpec) -> Result<TabularDataset, SynthError> {
    let n_classes = 4;
    let params = spec.selected;
    let mut envs = Vec::new();
    for env in &spec.environments {
        let mut xc_rng = field_rng(spec.seed, env.id, STREAM_XC);
        let mut branch_rng = field_rng(spec.seed, env.id, STREAM_BRANCH);
        let mut attr_rng = field_rng(spec.seed, env.id, STREAM_AUX);
        let mut noise_rng = field_rng(spec.seed, env.id, STREAM_NOISE);
        let mut rows = Vec::with_capacity(env.n_samples);
        let mut window_proposals = 0usize;
        let mut window_accepts = 0usize;
        let mut total_proposals = 0usize;
        while rows.len() < env.n_samples {
            let xc: f64 = xc_rng.gen();
            let y_true = bucket(xc, n_classes);
            let a = 1 + attr_rng.gen_range(0..4i64);
            let branch = branch_rng.gen_bool(env.p);
            window_proposals += 1;
            total_proposals += 1;
            // The selection rule is evaluated on the clean label unless the
            // spec explicitly couples it to noise; the noise draw then has
            // to happen per proposal to keep the streams aligned.
            let (y_for_selection, noisy) = if spec.select_on_noisy_label {
                let n = noisy_label(&mut noise_rng, y_true, n_classes, spec.label_noise);
                (n, Some(n))
            } else {
                (y_true, None)
            };
            let keep = if branch {
                a + y_for_selection as i64 == params.sum_target
            } else {
                a - y_for_selection as i64 == params.diff_target
            };
            if keep {
                let y = match noisy {
                    Some(n) => n,
                    None => noisy_label(&mut noise_rng, y_true, n_classes, spec.label_noise),
                };
                rows.push(Row {
                    x: vec![xc, a as f64],
                    attrs: vec![a],
                    y,
                });
                window_accepts += 1;
            }
            if window_proposals >= 10_000 {
                if window_accepts * 100 < window_proposals {
                    return Err(SynthError::SelectionStalled {
                        env: env.id,
                        proposals: total_proposals,
                        accepted: rows.len(),
                    });
                }
                window_proposals = 0;
                window_accepts = 0;
            }
        }
        envs.push(EnvData {
            id: env.id,
            role: env.role,
            rows,
        });
    }
    Ok(TabularDataset {
        envs,
        attr_names: vec!["a_sel".into()],
        feature_dim: 2,
        n_classes,
    })
}

fn append_ind_attr(
    spec: &SlabDatasetSpec,
    ind: &IndAttrSpec,
    ds: &mut TabularDataset,
) -> Result<(), SynthError> {
    let n_values = ind.n_values.unwrap_or(spec.environments.len());
    if n_values < 2 {
        return Err(SynthError::BadSpec(
            "independent attribute needs at least 2 values".into(),
        ));
    }
    if !(0.0..=1.0).contains(&ind.majority_prob) {
        return Err(SynthError::BadSpec(format!(
            "majority_prob={} outside [0,1]",
            ind.majority_prob
        )));
    }
    for (env_index, env) in ds.envs.iter_mut().enumerate() {
        let mut rng = field_rng(spec.seed, env.id, STREAM_IND);
        let majority = (env_index % n_values) as i64;
        for row in &mut env.rows {
            let v = if rng.gen_bool(ind.majority_prob) {
                majority
            } else {
                let mut other = rng.gen_range(0..n_values as i64 - 1);
                if other >= majority {
                    other += 1;
                }
                other
            };
            row.attrs.push(v);
            row.x.push(v as f64);
        }
    }
    ds.attr_names.push("a_ind".into());
    ds.feature_dim += 1;
    Ok(())
}

// ───────────────────────── splitting ─────────────────────────

/// Splits every environment into disjoint train/val parts. `val_fraction`
/// of the rows (at least one, never all) go to the val part, chosen by a
/// seeded shuffle; relative row order is preserved within both parts.
pub fn split_train_val(
    ds: &TabularDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(TabularDataset, TabularDataset), SynthError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(SynthError::BadValFraction(val_fraction));
    }
    let mut train_envs = Vec::new();
    let mut val_envs = Vec::new();
    for env in &ds.envs {
        let n = env.rows.len();
        if n < 2 {
            return Err(SynthError::SplitTooSmall { env: env.id, rows: n });
        }
        let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = field_rng(seed, env.id, STREAM_SPLIT);
        // Fisher-Yates; only the choice of val indices matters, order within
        // each part is restored below.
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut val_idx: Vec<usize> = order[..n_val].to_vec();
        val_idx.sort_unstable();
        let mut in_val = vec![false; n];
        for i in &val_idx {
            in_val[*i] = true;
        }
        let take = |keep_val: bool| -> Vec<Row> {
            env.rows
                .iter()
                .enumerate()
                .filter(|(i, _)| in_val[*i] == keep_val)
                .map(|(_, r)| r.clone())
                .collect()
        };
        val_envs.push(EnvData {
            id: env.id,
            role: env.role,
            rows: take(true),
        });
        train_envs.push(EnvData {
            id: env.id,
            role: env.role,
            rows: take(false),
        });
    }
    let mk = |envs: Vec<EnvData>| TabularDataset {
        envs,
        attr_names: ds.attr_names.clone(),
        feature_dim: ds.feature_dim,
        n_classes: ds.n_classes,
    };
    Ok((mk(train_envs), mk(val_envs)))
}

// ───────────────────────── csv ─────────────────────────

/// Serializes a dataset to CSV: `env,y,<attrs...>,x0,x1,...`, floats with
/// 17 significant digits so the round-trip is bit-exact.
pub fn export_csv(ds: &TabularDataset) -> String {
    let mut out = String::new();
    out.push_str("env,y");
    for a in &ds.attr_names {
        out.push(',');
        out.push_str(a);
    }
    for i in 0..ds.feature_dim {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    for env in &ds.envs {
        for row in &env.rows {
            out.push_str(&format!("{},{}", env.id, row.y));
            for a in &row.attrs {
                out.push_str(&format!(",{a}"));
            }
            for x in &row.x {
                out.push_str(&format!(",{x:.16e}"));
            }
            out.push('\n');
        }
    }
    out
}

/// Parses the CSV format written by [`export_csv`]. Environments appear in
/// first-appearance order. Roles cannot be stored in the file; every
/// environment in `test_envs` (default: the largest id) becomes a test
/// domain. `n_classes` is inferred as `max(y) + 1` unless given.
pub fn import_csv(
    text: &str,
    test_envs: Option<&[usize]>,
    n_classes: Option<usize>,
) -> Result<TabularDataset, SynthError> {
    let cerr = |line: usize, message: String| SynthError::Csv { line, message };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| cerr(0, "empty file".into()))?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.len() < 3 || cols[0] != "env" || cols[1] != "y" {
        return Err(cerr(1, "header must start with env,y".into()));
    }
    let first_x = cols
        .iter()
        .position(|c| *c == "x0")
        .ok_or_else(|| cerr(1, "header has no x0 column".into()))?;
    let attr_names: Vec<String> = cols[2..first_x].iter().map(|s| s.to_string()).collect();
    let feature_dim = cols.len() - first_x;
    for (i, c) in cols[first_x..].iter().enumerate() {
        if *c != format!("x{i}") {
            return Err(cerr(1, format!("expected column x{i}, found {c}")));
        }
    }

    let mut order: Vec<usize> = Vec::new();
    let mut by_env: BTreeMap<usize, Vec<Row>> = BTreeMap::new();
    let mut max_y = 0usize;
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(cerr(
                lineno,
                format!("expected {} fields, found {}", cols.len(), fields.len()),
            ));
        }
        let env: usize = fields[0]
            .parse()
            .map_err(|_| cerr(lineno, format!("bad env id `{}`", fields[0])))?;
        let y: usize = fields[1]
            .parse()
            .map_err(|_| cerr(lineno, format!("bad label `{}`", fields[1])))?;
        max_y = max_y.max(y);
        let mut attrs = Vec::with_capacity(attr_names.len());
        for f in &fields[2..first_x] {
            attrs.push(
                f.parse::<i64>()
                    .map_err(|_| cerr(lineno, format!("bad attribute value `{f}`")))?,
            );
        }
        let mut x = Vec::with_capacity(feature_dim);
        for f in &fields[first_x..] {
            x.push(
                f.parse::<f64>()
                    .map_err(|_| cerr(lineno, format!("bad feature value `{f}`")))?,
            );
        }
        if !by_env.contains_key(&env) {
            order.push(env);
        }
        by_env.entry(env).or_default().push(Row { x, attrs, y });
    }
    if order.is_empty() {
        return Err(cerr(0, "file contains no rows".into()));
    }
    let default_test = [*order.iter().max().unwrap()];
    let test: &[usize] = test_envs.unwrap_or(&default_test);
    let envs: Vec<EnvData> = order
        .into_iter()
        .map(|id| EnvData {
            id,
            role: if test.contains(&id) {
                EnvRole::Test
            } else {
                EnvRole::Train
            },
            rows: by_env.remove(&id).unwrap(),
        })
        .collect();
    Ok(TabularDataset {
        envs,
        attr_names,
        feature_dim,
        n_classes: n_classes.unwrap_or(max_y + 1),
    })
}

// ───────────────────────── tests ─────────────────────────
