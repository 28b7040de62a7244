//! Serialization of experiment outputs: raw trials as JSON Lines, summary
//! tables as CSV and Markdown.
//!
//! Raw trial records keep everything, wall time included. Summary renderers
//! deliberately exclude wall time and any other run-environment detail, so
//! two runs of the same experiment produce byte-identical summaries.

use super::sweep::{ComparisonTable, CurvePoint, SweepReport};
use super::{HarnessError, TrialResult};

/// One JSON object per line, in trial order. Inverse of [`read_jsonl`].
pub fn write_jsonl(trials: &[TrialResult]) -> String {
    let mut out = String::new();
    for t in trials {
        // TrialResult contains only serializable plain data; this cannot fail.
        out.push_str(&serde_json::to_string(t).expect("trial serializes"));
        out.push('\n');
    }
    out
}

/// Parses a JSON-Lines trial dump. Blank lines are allowed and skipped;
/// anything else that fails to parse reports its 1-based line number.
pub fn read_jsonl(text: &str) -> Result<Vec<TrialResult>, HarnessError> {
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TrialResult>(line) {
            Ok(t) => trials.push(t),
            Err(e) => {
                return Err(HarnessError::Jsonl {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(trials)
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

fn seed_list(seeds: &[u64]) -> String {
    seeds
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

/// Constraint-comparison table as CSV. Accuracies are percentages with two
/// decimals; no timing or host information.
pub fn comparison_csv(table: &ComparisonTable) -> String {
    let mut out = String::from(
        "shift,constraint,train_acc,train_se,test_acc,test_se,worst_group_acc,n_failed_trials,excluded_seeds\n",
    );
    for row in &table.rows {
        out.push_str(&format!(
            "{},\"{}\",{},{},{},{},{},{},{}\n",
            table.shift,
            row.label,
            pct(row.mean_train),
            pct(row.se_train),
            pct(row.mean_test),
            pct(row.se_test),
            pct(row.mean_worst_group),
            row.n_failed_trials,
            seed_list(&row.excluded_seeds),
        ));
    }
    out
}

/// The same table rendered as a Markdown summary, accuracy ± SE. Pipes in
/// constraint labels are escaped so they stay inside their cell.
pub fn comparison_markdown(table: &ComparisonTable) -> String {
    let mut out = format!("### Shift: {}\n\n", table.shift);
    out.push_str("| Constraint | Train acc | Test acc | Worst group |\n");
    out.push_str("|---|---|---|---|\n");
    for row in &table.rows {
        out.push_str(&format!(
            "| {} | {} ± {} | {} ± {} | {} |\n",
            row.label.replace('|', "\\|"),
            pct(row.mean_train),
            pct(row.se_train),
            pct(row.mean_test),
            pct(row.se_test),
            pct(row.mean_worst_group),
        ));
    }
    for row in &table.rows {
        if row.n_failed_trials > 0 || !row.excluded_seeds.is_empty() {
            out.push_str(&format!(
                "\n{} failed trials on \"{}\" (seeds excluded: [{}])\n",
                row.n_failed_trials,
                row.label,
                seed_list(&row.excluded_seeds),
            ));
        }
    }
    out
}

/// One sweep's per-seed selections plus the cross-seed aggregate, as CSV.
pub fn sweep_summary_csv(report: &SweepReport) -> String {
    let mut out = String::from(
        "seed,n_trials,n_failed,lr,lambda,train_acc,val_acc,test_acc,worst_group_acc\n",
    );
    for seed in &report.seeds {
        match &seed.selected {
            Some(t) => out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                seed.seed,
                seed.n_trials,
                seed.n_failed,
                t.key.lr,
                t.key.lambda,
                pct(t.train_accuracy),
                pct(t.val_accuracy),
                pct(t.test_accuracy),
                pct(t.worst_group_accuracy),
            )),
            None => out.push_str(&format!(
                "{},{},{},,,,,,\n",
                seed.seed, seed.n_trials, seed.n_failed,
            )),
        }
    }
    out.push_str(&format!(
        "mean,,,,,{},{},{},{}\n",
        pct(report.mean_train),
        "",
        pct(report.mean_test),
        pct(report.mean_worst_group),
    ));
    out.push_str(&format!(
        "se,,,,,{},{},{},{}\n",
        pct(report.se_train),
        "",
        pct(report.se_test),
        pct(report.se_worst_group),
    ));
    out
}

/// λ-sensitivity points as CSV, one row per (arm, λ, seed) cell.
pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("constraint,lambda,seed,test_acc,failed\n");
    for p in points {
        out.push_str(&format!(
            "\"{}\",{},{},{},{}\n",
            p.label,
            p.lambda,
            p.seed,
            pct(p.test_accuracy),
            p.failed,
        ));
    }
    out
}

// ── tests ────────────────────────────────────────────────────────────────
