//! Layered key-value configuration.
//!
//! A run is configured by up to four layers, later layers winning key by
//! key: built-in defaults, a sectioned config file, environment variables
//! (`CACM_<SECTION>_<KEY>`), and explicit command-line overrides
//! (`--set section.key=value`). The merged map is then realized into typed
//! configs with every value validated and every error naming the
//! `section.key` it came from.
//!
//! File format: `[section]` headers followed by `key = value` lines; `#`
//! starts a comment; blank lines are ignored. Lists are `;`-separated
//! (`hidden = 64;64`, `seeds = 0;1;2`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::{SelectionMode, TrainConfig};
use crate::penalties::{AttrPenalty, Baseline, ConstraintSpec, KernelConfig, PenaltyConfig};
use crate::synthdata::{IndAttrSpec, SlabDatasetSpec, SlabShift};
use crate::{Classify, FailureClass};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {message}")]
    BadValue { key: String, message: String },
}

impl Classify for ConfigError {
    fn class(&self) -> FailureClass {
        FailureClass::Config
    }
}

/// Environment-variable prefix: `CACM_DATASET_ROWS_PER_ENV=500` overrides
/// `rows_per_env` in `[dataset]`.
pub const ENV_PREFIX: &str = "CACM_";

const SECTIONS: &[(&str, &[&str])] = &[
    (
        "dataset",
        &[
            "shift",
            "rows_per_env",
            "seed",
            "label_noise",
            "env_ps",
            "attr_from_noisy_label",
            "select_on_noisy_label",
            "c_prob_train",
            "c_prob_test",
            "label_shift_prob",
            "sum_target",
            "diff_target",
            "ind_attr",
            "ind_majority_prob",
        ],
    ),
    (
        "model",
        &[
            "hidden",
            "steps",
            "batch_per_env",
            "lr",
            "weight_decay",
            "dropout",
            "val_fraction",
            "seed",
            "selection",
        ],
    ),
    (
        "penalty",
        &[
            "mode",
            "attr",
            "given",
            "kernel",
            "gamma",
            "lambda",
            "anneal_iters",
        ],
    ),
    ("sweep", &["trials", "seeds"]),
];

fn known_key(section: &str, key: &str) -> bool {
    SECTIONS
        .iter()
        .any(|(s, keys)| *s == section && keys.contains(&key))
}

/// The merged (section, key) → value store. Values stay as strings until
/// realization so layers can be merged without caring about types.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigMap {
    values: BTreeMap<(String, String), String>,
}

impl ConfigMap {
    /// Parses the sectioned file format. Keys are checked against the known
    /// schema so typos fail loudly instead of silently using a default.
    pub fn parse(text: &str) -> Result<ConfigMap, ConfigError> {
        let mut map = ConfigMap::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Parse {
                    line: i + 1,
                    message: "unterminated section header".into(),
                })?;
                if !SECTIONS.iter().any(|(s, _)| *s == name) {
                    return Err(ConfigError::Parse {
                        line: i + 1,
                        message: format!("unknown section `{name}`"),
                    });
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let section = section.as_ref().ok_or_else(|| ConfigError::Parse {
                line: i + 1,
                message: "key before any [section] header".into(),
            })?;
            let key = key.trim();
            if !known_key(section, key) {
                return Err(ConfigError::UnknownKey(format!("{section}.{key}")));
            }
            map.values
                .insert((section.clone(), key.to_string()), value.trim().to_string());
        }
        Ok(map)
    }

    /// Builds an override layer from environment variables:
    /// `CACM_<SECTION>_<KEY>` (key part may contain underscores). Variables
    /// with the prefix but an unknown section/key are rejected — a typoed
    /// override must not be ignored.
    pub fn from_env_vars(
        vars: impl Iterator<Item = (String, String)>,
    ) -> Result<ConfigMap, ConfigError> {
        let mut map = ConfigMap::default();
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let lower = rest.to_lowercase();
            let Some((section, key)) = lower.split_once('_') else {
                return Err(ConfigError::UnknownKey(name));
            };
            if !known_key(section, key) {
                return Err(ConfigError::UnknownKey(name));
            }
            map.values
                .insert((section.to_string(), key.to_string()), value);
        }
        Ok(map)
    }

    /// Sets one value from a `section.key=value` override string.
    pub fn set_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (path, value) = spec.split_once('=').ok_or_else(|| ConfigError::BadValue {
            key: spec.to_string(),
            message: "expected section.key=value".into(),
        })?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| ConfigError::BadValue {
                key: path.to_string(),
                message: "expected section.key=value".into(),
            })?;
        if !known_key(section, key) {
            return Err(ConfigError::UnknownKey(format!("{section}.{key}")));
        }
        self.values
            .insert((section.to_string(), key.to_string()), value.trim().to_string());
        Ok(())
    }

    /// Merges `layer` on top of `self` (the layer's values win).
    pub fn merge(&mut self, layer: ConfigMap) {
        self.values.extend(layer.values);
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .map(|s| s.as_str())
    }

    /// Canonical rendering — sorted by (section, key) — used for display and
    /// for the manifest's config hash.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for ((section, key), value) in &self.values {
            if section != current {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    // ── typed accessors ─────────────────────────────────────────────────

    fn bad(section: &str, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::BadValue {
            key: format!("{section}.{key}"),
            message: message.into(),
        }
    }

    fn parsed<T: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
        default: T,
    ) -> Result<T, ConfigError> {
        match self.get(section, key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Self::bad(section, key, format!("cannot parse `{raw}`"))),
        }
    }

    fn parsed_list<T: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
        default: Vec<T>,
    ) -> Result<Vec<T>, ConfigError> {
        match self.get(section, key) {
            None => Ok(default),
            Some(raw) => raw
                .split(';')
                .map(|part| {
                    part.trim()
                        .parse()
                        .map_err(|_| Self::bad(section, key, format!("cannot parse `{part}`")))
                })
                .collect(),
        }
    }

    fn flag(&self, section: &str, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.get(section, key) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(raw) => Err(Self::bad(
                section,
                key,
                format!("expected true/false, got `{raw}`"),
            )),
        }
    }

    // ── realization ─────────────────────────────────────────────────────

    /// Realizes the `[dataset]` section. Defaults are the standard
    /// three-environment layout for the configured shift.
    pub fn dataset(&self) -> Result<SlabDatasetSpec, ConfigError> {
        let shift_raw = self.get("dataset", "shift").unwrap_or("causal");
        let shift = SlabShift::from_str_name(shift_raw).ok_or_else(|| {
            Self::bad(
                "dataset",
                "shift",
                format!("expected causal|confounded|selected, got `{shift_raw}`"),
            )
        })?;
        let rows = self.parsed("dataset", "rows_per_env", 5000usize)?;
        let seed = self.parsed("dataset", "seed", 0u64)?;
        let mut spec = SlabDatasetSpec::standard(shift, rows, seed);
        spec.label_noise = self.parsed("dataset", "label_noise", spec.label_noise)?;
        if let Some(_raw) = self.get("dataset", "env_ps") {
            let ps: Vec<f64> = self.parsed_list("dataset", "env_ps", Vec::new())?;
            if ps.len() < 2 {
                return Err(Self::bad(
                    "dataset",
                    "env_ps",
                    "need at least two environments (last one is the test domain)",
                ));
            }
            let per_env = spec.environments[0].n_samples;
            spec = SlabDatasetSpec::with_envs(shift, &ps, per_env, seed);
            spec.label_noise = self.parsed("dataset", "label_noise", spec.label_noise)?;
        }
        spec.attr_from_noisy_label = self.flag(
            "dataset",
            "attr_from_noisy_label",
            spec.attr_from_noisy_label,
        )?;
        spec.select_on_noisy_label = self.flag(
            "dataset",
            "select_on_noisy_label",
            spec.select_on_noisy_label,
        )?;
        spec.confounded.c_prob_train =
            self.parsed("dataset", "c_prob_train", spec.confounded.c_prob_train)?;
        spec.confounded.c_prob_test =
            self.parsed("dataset", "c_prob_test", spec.confounded.c_prob_test)?;
        spec.confounded.label_shift_prob = self.parsed(
            "dataset",
            "label_shift_prob",
            spec.confounded.label_shift_prob,
        )?;
        spec.selected.sum_target = self.parsed("dataset", "sum_target", spec.selected.sum_target)?;
        spec.selected.diff_target =
            self.parsed("dataset", "diff_target", spec.selected.diff_target)?;
        if self.flag("dataset", "ind_attr", false)? {
            let mut ind = IndAttrSpec::default();
            ind.majority_prob = self.parsed("dataset", "ind_majority_prob", ind.majority_prob)?;
            spec.extra_ind_attr = Some(ind);
        }
        Ok(spec)
    }

    /// Realizes the `[penalty]` section against the dataset (for the default
    /// attribute name).
    pub fn penalty(&self, shift: SlabShift) -> Result<PenaltyConfig, ConfigError> {
        let mode = self.get("penalty", "mode").unwrap_or("erm");
        let lambda = self.parsed("penalty", "lambda", 1.0f64)?;
        let gamma = self.parsed("penalty", "gamma", 1e-4f64)?;
        let kernel = match self.get("penalty", "kernel").unwrap_or("l2") {
            "l2" => KernelConfig::L2MeanDiff,
            "rbf" => KernelConfig::Rbf { gamma },
            other => {
                return Err(Self::bad(
                    "penalty",
                    "kernel",
                    format!("expected l2|rbf, got `{other}`"),
                ))
            }
        };
        let mut cfg = if mode == "constraint" {
            let attr = self
                .get("penalty", "attr")
                .unwrap_or(shift.attr_name())
                .to_string();
            let given: Vec<String> =
                self.parsed_list("penalty", "given", vec!["Y".into(), "E".into()])?;
            let given_refs: Vec<&str> = given.iter().map(|s| s.as_str()).collect();
            PenaltyConfig::constraints(vec![AttrPenalty {
                constraint: ConstraintSpec::new(&attr, &given_refs),
                kernel,
                lambda,
            }])
        } else {
            let baseline = Baseline::from_str_name(mode).ok_or_else(|| {
                Self::bad(
                    "penalty",
                    "mode",
                    format!(
                        "expected erm|constraint|mmd_uncond|mmd_cond_y|vrex|irmv1, got `{mode}`"
                    ),
                )
            })?;
            PenaltyConfig::fixed_baseline(baseline, lambda, kernel)
        };
        cfg.anneal_iters = self.parsed("penalty", "anneal_iters", cfg.anneal_iters)?;
        Ok(cfg)
    }

    /// Realizes the full training configuration from `[dataset]`, `[model]`,
    /// and `[penalty]`.
    pub fn train(&self) -> Result<TrainConfig, ConfigError> {
        let data = self.dataset()?;
        let penalty = self.penalty(data.shift)?;
        let mut cfg = TrainConfig::standard(data);
        cfg.penalty = penalty;
        cfg.hidden = self.parsed_list("model", "hidden", cfg.hidden)?;
        cfg.steps = self.parsed("model", "steps", cfg.steps)?;
        cfg.batch_per_env = self.parsed("model", "batch_per_env", cfg.batch_per_env)?;
        cfg.lr = self.parsed("model", "lr", cfg.lr)?;
        cfg.weight_decay = self.parsed("model", "weight_decay", cfg.weight_decay)?;
        cfg.dropout = self.parsed("model", "dropout", cfg.dropout)?;
        cfg.val_fraction = self.parsed("model", "val_fraction", cfg.val_fraction)?;
        cfg.seed = self.parsed("model", "seed", cfg.seed)?;
        cfg.selection = match self.get("model", "selection") {
            None | Some("test_domain_validation") => SelectionMode::TestDomainValidation,
            Some("train_domain_validation") => SelectionMode::TrainDomainValidation,
            Some(other) => {
                return Err(Self::bad(
                    "model",
                    "selection",
                    format!(
                        "expected test_domain_validation|train_domain_validation, got `{other}`"
                    ),
                ))
            }
        };
        Ok(cfg)
    }

    /// Realizes the `[sweep]` section: (n_trials, seeds).
    pub fn sweep_protocol(&self) -> Result<(usize, Vec<u64>), ConfigError> {
        let trials = self.parsed("sweep", "trials", 20usize)?;
        let seeds = self.parsed_list("sweep", "seeds", vec![0u64, 1, 2])?;
        if trials == 0 {
            return Err(Self::bad("sweep", "trials", "must be ≥ 1"));
        }
        if seeds.is_empty() {
            return Err(Self::bad("sweep", "seeds", "need at least one seed"));
        }
        Ok((trials, seeds))
    }
}

/// Standard layering: file (if any), then environment variables, then
/// `--set` overrides.
pub fn layered(
    file_text: Option<&str>,
    env_vars: impl Iterator<Item = (String, String)>,
    overrides: &[String],
) -> Result<ConfigMap, ConfigError> {
    let mut map = match file_text {
        Some(text) => ConfigMap::parse(text)?,
        None => ConfigMap::default(),
    };
    map.merge(ConfigMap::from_env_vars(env_vars)?);
    for spec in overrides {
        map.set_override(spec)?;
    }
    Ok(map)
}

// ── tests ────────────────────────────────────────────────────────────────
