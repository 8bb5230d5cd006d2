//! Evaluation results as flat tables, serialized to CSV and JSON.
//!
//! Serialization is deliberately timestamp-free and allocation-order
//! independent: running the same evaluation twice with the same seed must
//! produce byte-identical files. Anything volatile (wall-clock runtime,
//! hostnames) stays out of the serialized form.

use std::path::{Path, PathBuf};

use crate::Result;

/// One measurement. `metric` names what `value` is (`ppl`, `exact_acc`,
/// `loss`, ...); fields that don't apply to a given metric stay `None` and
/// serialize as empty CSV cells.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EvalRow {
    pub scheme: String,
    pub length: usize,
    pub depth: Option<f64>,
    pub digits: Option<usize>,
    pub metric: String,
    pub value: f64,
    pub digit_accuracy: Option<f64>,
    pub n_trials: Option<usize>,
    pub seed: u64,
    pub warning: Option<String>,
}

/// A set of rows plus the exact configuration that produced them.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub tool_version: String,
    /// Resolved key/value configuration echo, in a fixed order chosen by
    /// the caller.
    pub config: Vec<(String, String)>,
    pub rows: Vec<EvalRow>,
}

const CSV_HEADER: &str =
    "scheme,length,depth,digits,metric,value,digit_accuracy,n_trials,seed,warning";

impl EvalReport {
    #[must_use]
    pub fn new(config: Vec<(String, String)>) -> Self {
        EvalReport {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            rows: Vec::new(),
        }
    }

    /// CSV with the configuration echoed in `#` comment lines above the
    /// header. Floats use fixed six-decimal formatting so output bytes
    /// never depend on formatting heuristics.
    #[must_use]
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# ctxlab {}\n", self.tool_version));
        for (k, v) in &self.config {
            debug_assert!(!k.contains('\n') && !v.contains('\n'));
            out.push_str(&format!("# {k} = {v}\n"));
        }
        out.push_str(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            debug_assert!(
                !row.scheme.contains(',')
                    && !row.metric.contains(',')
                    && row.warning.as_deref().is_none_or(|w| !w.contains(',')),
                "CSV cells must not contain commas"
            );
            let depth = row.depth.map(|d| format!("{d}")).unwrap_or_default();
            let digits = row.digits.map(|d| d.to_string()).unwrap_or_default();
            let digit_acc = row.digit_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
            let trials = row.n_trials.map(|n| n.to_string()).unwrap_or_default();
            let warning = row.warning.clone().unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{},{},{},{}\n",
                row.scheme,
                row.length,
                depth,
                digits,
                row.metric,
                row.value,
                digit_acc,
                trials,
                row.seed,
                warning
            ));
        }
        out
    }

    /// Pretty JSON with the same content; field order follows the struct
    /// definitions, so it is stable across runs.
    #[must_use]
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization");
        s.push('\n');
        s
    }

    /// Writes `{stem}.csv` and `{stem}.json` under `dir`, creating the
    /// directory if needed. Returns both paths.
    pub fn write_files(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&csv_path, self.to_csv())?;
        std::fs::write(&json_path, self.to_json())?;
        Ok((csv_path, json_path))
    }
}
