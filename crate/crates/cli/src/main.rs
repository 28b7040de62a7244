//! `cacm` — command-line front end for the whole pipeline.
//!
//! Subcommands mirror the stages: `derive` turns a causal graph (or a
//! shift-spec that expands to one) into independence constraints, `dsep`
//! answers single d-separation queries, `gen` writes slab datasets as CSV,
//! `train` runs one training configuration, `sweep` runs the random
//! hyperparameter search, `compare` contrasts the conditional and
//! unconditional constraint on one shift, `lambda-curve` traces penalty
//! strength sensitivity, and `report` re-renders summaries from persisted
//! trials.
//!
//! Every run writes a manifest carrying a hash of the fully-resolved
//! configuration, the seed list, and the crate versions; re-running with the
//! same configuration reproduces artifacts byte for byte.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime/numeric failure.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cacm_core::causal_graph::{
    build_canonical, d_separated, derive_constraints, looks_like_graph, parse_graph,
    parse_shift_spec, CausalDag, NodeId,
};
use cacm_core::config::{layered, ConfigMap};
use cacm_core::harness::{
    aggregate_trials, compare_constraints, curve_summary, lambda_sensitivity, read_jsonl,
    standard_comparison_arms, sweep_summary_csv, sweep_trials, train, write_jsonl, comparison_csv,
    comparison_markdown, curve_csv, SweepConfig, SweepReport, TrialResult,
};
use cacm_core::harness::SearchSpace;
use cacm_core::penalties::{AttrPenalty, PenaltyConfig};
use cacm_core::synthdata::{export_csv, gen_slab};
use cacm_core::{Classify, FailureClass};

// ── error plumbing ───────────────────────────────────────────────────────

struct CliError {
    class: FailureClass,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> CliError {
        CliError {
            class: FailureClass::Config,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> CliError {
        CliError {
            class: FailureClass::Runtime,
            message: message.into(),
        }
    }
}

fn lift<E: Classify + Display>(e: E) -> CliError {
    CliError {
        class: e.class(),
        message: e.to_string(),
    }
}

/// Prints one line to stdout. A closed pipe (e.g. piping into `head`) ends
/// the process quietly instead of panicking — the consumer got what it
/// asked for.
fn say(line: impl Display) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if writeln!(out, "{line}").is_err() {
        std::process::exit(0);
    }
}

// ── command-line grammar ─────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "cacm",
    version,
    about = "Constraint derivation and constraint-regularized training on slab datasets",
    after_help = "Configuration precedence (low to high): config file, environment \
variables (CACM_<SECTION>_<KEY>, e.g. CACM_MODEL_LR=1e-4), repeatable \
--set section.key=value flags, dedicated flags (--seed/--seeds/--trials/--budget)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Derive independence constraints from a graph or shift-spec file.
    Derive {
        /// Graph file (`node ... role=...` / `edge a b`) or shift spec
        /// (`attribute name=shift`, `orientation=...`, `e_xc_edge=...`).
        file: PathBuf,
        /// Largest conditioning-set size to enumerate.
        #[arg(long, default_value_t = 2)]
        max_cond_size: usize,
        /// Emit the constraint list as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Answer one d-separation query against a graph file.
    Dsep {
        file: PathBuf,
        /// First query node.
        #[arg(long)]
        a: String,
        /// Second query node.
        #[arg(long)]
        b: String,
        /// Conditioning set (comma-separated node names).
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        given: Vec<String>,
    },
    /// Generate a slab dataset and write it as CSV.
    Gen(RunFlags),
    /// Train one configuration and persist the trial.
    Train(RunFlags),
    /// Random hyperparameter search with per-seed model selection.
    Sweep(RunFlags),
    /// Compare the conditional and unconditional constraint on one shift.
    Compare {
        #[command(flatten)]
        flags: RunFlags,
        /// Dataset shift to compare on (overrides the config file).
        #[arg(long, value_enum)]
        shift: Option<ShiftArg>,
    },
    /// Sensitivity of test accuracy to the penalty weight λ.
    LambdaCurve {
        #[command(flatten)]
        flags: RunFlags,
        /// Penalty weights to trace (semicolon-separated).
        #[arg(long, default_value = "1;10;100")]
        lambdas: String,
    },
    /// Re-render the sweep summary from a persisted trials.jsonl file.
    Report {
        /// JSON-lines trial dump written by `train` or `sweep`.
        results: PathBuf,
        /// Output directory for artifacts.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Print the aggregated report as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct RunFlags {
    /// Sectioned key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Training seed override (dataset seed for `gen`).
    #[arg(long)]
    seed: Option<u64>,
    /// Sweep seeds (comma-separated).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    seeds: Option<Vec<u64>>,
    /// Random-search draws per seed.
    #[arg(long)]
    trials: Option<usize>,
    /// Search budget preset: full = 20 draws/seed, reduced = 10.
    #[arg(long, value_enum)]
    budget: Option<Budget>,
    /// Config override, section.key=value (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Print machine-readable JSON instead of tables.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Budget {
    Full,
    Reduced,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShiftArg {
    Causal,
    Confounded,
    Selected,
}

impl ShiftArg {
    fn as_str(self) -> &'static str {
        match self {
            ShiftArg::Causal => "causal",
            ShiftArg::Confounded => "confounded",
            ShiftArg::Selected => "selected",
        }
    }
}

/// Where the bare `--seed` flag lands in the config map.
enum SeedTarget {
    Dataset,
    Model,
}

// ── entry point ──────────────────────────────────────────────────────────

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            match e.class {
                FailureClass::Config => ExitCode::from(2),
                FailureClass::Runtime => ExitCode::from(3),
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Derive {
            file,
            max_cond_size,
            json,
        } => cmd_derive(&file, max_cond_size, json),
        Command::Dsep { file, a, b, given } => cmd_dsep(&file, &a, &b, &given),
        Command::Gen(flags) => cmd_gen(&flags),
        Command::Train(flags) => cmd_train(&flags),
        Command::Sweep(flags) => cmd_sweep(&flags),
        Command::Compare { flags, shift } => cmd_compare(&flags, shift),
        Command::LambdaCurve { flags, lambdas } => cmd_lambda_curve(&flags, &lambdas),
        Command::Report { results, out, json } => cmd_report(&results, &out, json),
    }
}

// ── shared helpers ───────────────────────────────────────────────────────

fn read_input(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))
}

fn load_graph(path: &Path) -> Result<CausalDag, CliError> {
    let text = read_input(path)?;
    if looks_like_graph(&text) {
        parse_graph(&text).map_err(lift)
    } else {
        let spec = parse_shift_spec(&text).map_err(lift)?;
        build_canonical(&spec).map_err(lift)
    }
}

/// Builds the fully-resolved config map: file, environment, `--set`, then
/// dedicated flags. Everything the run uses is in this map, so its
/// canonical text (hashed into the manifest) is sufficient for replay.
fn resolve_map(flags: &RunFlags, seed_target: SeedTarget) -> Result<ConfigMap, CliError> {
    let file_text = match &flags.config {
        Some(path) => Some(read_input(path)?),
        None => None,
    };
    let mut map = layered(file_text.as_deref(), std::env::vars(), &flags.set).map_err(lift)?;
    let mut set = |spec: String| map.set_override(&spec).map_err(lift);
    if let Some(seed) = flags.seed {
        match seed_target {
            SeedTarget::Dataset => set(format!("dataset.seed={seed}"))?,
            SeedTarget::Model => set(format!("model.seed={seed}"))?,
        }
    }
    if let Some(seeds) = &flags.seeds {
        let joined = seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(";");
        set(format!("sweep.seeds={joined}"))?;
    }
    match (flags.trials, flags.budget) {
        (Some(n), _) => set(format!("sweep.trials={n}"))?,
        (None, Some(Budget::Full)) => set("sweep.trials=20".to_string())?,
        (None, Some(Budget::Reduced)) => set("sweep.trials=10".to_string())?,
        (None, None) => {}
    }
    Ok(map)
}

fn write_artifact(dir: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, text)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
    say(format_args!("wrote {}", path.display()));
    Ok(path)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    command: String,
    config_sha256: String,
    config_text: String,
    seeds: Vec<u64>,
    versions: BTreeMap<String, String>,
}

fn manifest_json(command: &str, map: &ConfigMap, seeds: &[u64]) -> String {
    let config_text = map.canonical_text();
    let digest = Sha256::digest(config_text.as_bytes());
    let config_sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
    let mut versions = BTreeMap::new();
    versions.insert("cacm-cli".to_string(), env!("CARGO_PKG_VERSION").to_string());
    versions.insert("cacm-core".to_string(), cacm_core::VERSION.to_string());
    let manifest = Manifest {
        command: command.to_string(),
        config_sha256,
        config_text,
        seeds: seeds.to_vec(),
        versions,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    text
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

// ── derive / dsep ────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct DeriveRow {
    subject: String,
    other: String,
    given: Vec<String>,
    selected: bool,
}

fn cmd_derive(file: &Path, max_cond_size: usize, json: bool) -> Result<(), CliError> {
    let dag = load_graph(file)?;
    let set = derive_constraints(&dag, max_cond_size).map_err(lift)?;
    let rows: Vec<DeriveRow> = set
        .constraints
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let view = set.view(c);
            let selected = set.selected.get(&view.other) == Some(&i);
            DeriveRow {
                subject: view.subject,
                other: view.other,
                given: view.given,
                selected,
            }
        })
        .collect();
    if json {
        say(format_args!(
            "{}",
            serde_json::to_string_pretty(&rows).expect("rows serialize")
        ));
        return Ok(());
    }
    for row in &rows {
        let mut line = format!("{} ⊥ {}", row.subject, row.other);
        if !row.given.is_empty() {
            line.push_str(&format!(" | {}", row.given.join(", ")));
        }
        if row.selected {
            line.push_str(" [selected]");
        }
        say(format_args!("{line}"));
    }
    Ok(())
}

fn cmd_dsep(file: &Path, a: &str, b: &str, given: &[String]) -> Result<(), CliError> {
    let dag = load_graph(file)?;
    let ia = dag.id_of(a).map_err(lift)?;
    let ib = dag.id_of(b).map_err(lift)?;
    let z: Vec<NodeId> = given
        .iter()
        .map(|name| dag.id_of(name).map_err(lift))
        .collect::<Result<_, _>>()?;
    let separated = d_separated(&dag, ia, ib, &z).map_err(lift)?;
    say(format_args!("{}", if separated { "d-separated" } else { "connected" }));
    Ok(())
}

// ── gen / train ──────────────────────────────────────────────────────────

fn cmd_gen(flags: &RunFlags) -> Result<(), CliError> {
    let map = resolve_map(flags, SeedTarget::Dataset)?;
    let spec = map.dataset().map_err(lift)?;
    let dataset = gen_slab(&spec).map_err(lift)?;
    write_artifact(&flags.out, "dataset.csv", &export_csv(&dataset))?;
    write_artifact(&flags.out, "manifest.json", &manifest_json("gen", &map, &[spec.seed]))?;
    if flags.json {
        let envs: Vec<serde_json::Value> = dataset
            .envs
            .iter()
            .map(|e| {
                serde_json::json!({
                    "env": e.id,
                    "role": format!("{:?}", e.role).to_lowercase(),
                    "rows": e.rows.len(),
                })
            })
            .collect();
        say(format_args!(
            "{}",
            serde_json::json!({
                "shift": spec.shift.as_str(),
                "environments": envs,
            })
        ));
    } else {
        say(format_args!("shift: {}", spec.shift.as_str()));
        for env in &dataset.envs {
            say(format_args!("env {} ({:?}): {} rows", env.id, env.role, env.rows.len()));
        }
    }
    Ok(())
}

/// Single-trial summary: metric,value rows, accuracies as percentages.
/// Contains no timing so reruns are byte-identical.
fn train_summary_csv(trial: &TrialResult) -> String {
    let mut out = String::from("metric,value\n");
    out.push_str(&format!("train_acc,{}\n", pct(trial.train_accuracy)));
    out.push_str(&format!("val_acc,{}\n", pct(trial.val_accuracy)));
    out.push_str(&format!("test_acc,{}\n", pct(trial.test_accuracy)));
    out.push_str(&format!(
        "worst_group_acc,{}\n",
        pct(trial.worst_group_accuracy)
    ));
    for env in &trial.env_accuracy {
        out.push_str(&format!(
            "env{}_fit_acc,{}\n",
            env.env,
            pct(env.fit_split)
        ));
        out.push_str(&format!(
            "env{}_val_acc,{}\n",
            env.env,
            pct(env.val_split)
        ));
    }
    out
}

fn cmd_train(flags: &RunFlags) -> Result<(), CliError> {
    let map = resolve_map(flags, SeedTarget::Model)?;
    let cfg = map.train().map_err(lift)?;
    let trial = train(&cfg).map_err(lift)?;
    write_artifact(&flags.out, "trials.jsonl", &write_jsonl(std::slice::from_ref(&trial)))?;
    write_artifact(&flags.out, "summary.csv", &train_summary_csv(&trial))?;
    write_artifact(
        &flags.out,
        "manifest.json",
        &manifest_json("train", &map, &[cfg.seed]),
    )?;
    if flags.json {
        say(format_args!(
            "{}",
            serde_json::to_string_pretty(&trial).expect("trial serializes")
        ));
    } else {
        say(format_args!(
            "train {} | val {} | test {} | worst group {}",
            pct(trial.train_accuracy),
            pct(trial.val_accuracy),
            pct(trial.test_accuracy),
            pct(trial.worst_group_accuracy),
        ));
    }
    if let Some(failure) = &trial.failure {
        return Err(CliError::runtime(format!(
            "training diverged at step {}: {}",
            failure.step, failure.reason
        )));
    }
    Ok(())
}

// ── sweep / compare / lambda-curve / report ──────────────────────────────

fn sweep_config_from(map: &ConfigMap, penalty_space: SearchSpace) -> Result<SweepConfig, CliError> {
    let (n_trials, seeds) = map.sweep_protocol().map_err(lift)?;
    Ok(SweepConfig {
        n_trials,
        seeds,
        space: penalty_space,
    })
}

fn print_report(report: &SweepReport, json: bool) {
    if json {
        say(format_args!(
            "{}",
            serde_json::to_string_pretty(report).expect("report serializes")
        ));
        return;
    }
    for seed in &report.seeds {
        match &seed.selected {
            Some(t) => say(format_args!(
                "seed {}: selected lr={} λ={} → val {} test {} ({} trials, {} failed)",
                seed.seed,
                t.key.lr,
                t.key.lambda,
                pct(t.val_accuracy),
                pct(t.test_accuracy),
                seed.n_trials,
                seed.n_failed,
            )),
            None => say(format_args!(
                "seed {}: all {} trials failed",
                seed.seed, seed.n_trials
            )),
        }
    }
    say(format_args!(
        "test acc {} ± {} | train acc {} ± {} | worst group {}",
        pct(report.mean_test),
        pct(report.se_test),
        pct(report.mean_train),
        pct(report.se_train),
        pct(report.mean_worst_group),
    ));
}

fn cmd_sweep(flags: &RunFlags) -> Result<(), CliError> {
    let map = resolve_map(flags, SeedTarget::Model)?;
    let base = map.train().map_err(lift)?;
    let sweep_cfg = sweep_config_from(&map, SearchSpace::for_penalty(&base.penalty))?;
    let trials = sweep_trials(&sweep_cfg, &base).map_err(lift)?;
    write_artifact(&flags.out, "trials.jsonl", &write_jsonl(&trials))?;
    write_artifact(
        &flags.out,
        "manifest.json",
        &manifest_json("sweep", &map, &sweep_cfg.seeds),
    )?;
    let report = aggregate_trials(&trials).map_err(lift)?;
    write_artifact(&flags.out, "sweep_summary.csv", &sweep_summary_csv(&report))?;
    print_report(&report, flags.json);
    Ok(())
}

fn cmd_compare(flags: &RunFlags, shift: Option<ShiftArg>) -> Result<(), CliError> {
    let mut map = resolve_map(flags, SeedTarget::Model)?;
    if let Some(shift) = shift {
        map.set_override(&format!("dataset.shift={}", shift.as_str()))
            .map_err(lift)?;
    }
    let base = map.train().map_err(lift)?;
    let arms = standard_comparison_arms(base.data.shift);
    // Derive the search space from the arm penalty: λ for every
    // distribution-matching penalty, plus a bandwidth dimension because the
    // standard arms use the RBF kernel.
    let probe = PenaltyConfig::constraints(vec![AttrPenalty {
        constraint: arms[0].constraint.clone(),
        kernel: arms[0].kernel,
        lambda: 1.0,
    }]);
    let space = SearchSpace::for_penalty(&probe);
    let sweep_cfg = sweep_config_from(&map, space)?;
    let (table, reports) = compare_constraints(&base, &arms, &sweep_cfg).map_err(lift)?;
    write_artifact(&flags.out, "comparison.csv", &comparison_csv(&table))?;
    write_artifact(&flags.out, "comparison.md", &comparison_markdown(&table))?;
    for (i, (_, report)) in reports.iter().enumerate() {
        write_artifact(
            &flags.out,
            &format!("arm{i}_sweep.csv"),
            &sweep_summary_csv(report),
        )?;
    }
    write_artifact(
        &flags.out,
        "manifest.json",
        &manifest_json("compare", &map, &sweep_cfg.seeds),
    )?;
    if flags.json {
        say(format_args!(
            "{}",
            serde_json::to_string_pretty(&table).expect("table serializes")
        ));
    } else {
        say(comparison_markdown(&table).trim_end());
    }
    Ok(())
}

fn cmd_lambda_curve(flags: &RunFlags, lambdas: &str) -> Result<(), CliError> {
    let map = resolve_map(flags, SeedTarget::Model)?;
    let base = map.train().map_err(lift)?;
    let lambda_values: Vec<f64> = lambdas
        .split(';')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|_| CliError::config(format!("bad λ value `{part}`")))
        })
        .collect::<Result<_, _>>()?;
    let (_, seeds) = map.sweep_protocol().map_err(lift)?;
    let arms = standard_comparison_arms(base.data.shift);
    let points = lambda_sensitivity(&base, &arms, &lambda_values, &seeds).map_err(lift)?;
    write_artifact(&flags.out, "curve.csv", &curve_csv(&points))?;
    write_artifact(
        &flags.out,
        "manifest.json",
        &manifest_json("lambda-curve", &map, &seeds),
    )?;
    if flags.json {
        say(format_args!(
            "{}",
            serde_json::to_string_pretty(&points).expect("points serialize")
        ));
    } else {
        for (label, lambda, mean, n_failed) in curve_summary(&points) {
            say(format_args!(
                "{label} λ={lambda}: test acc {} ({n_failed} failed)",
                pct(mean)
            ));
        }
    }
    Ok(())
}

fn cmd_report(results: &Path, out: &Path, json: bool) -> Result<(), CliError> {
    let text = read_input(results)?;
    let trials = read_jsonl(&text).map_err(lift)?;
    let report = aggregate_trials(&trials).map_err(lift)?;
    write_artifact(out, "sweep_summary.csv", &sweep_summary_csv(&report))?;
    print_report(&report, json);
    Ok(())
}
