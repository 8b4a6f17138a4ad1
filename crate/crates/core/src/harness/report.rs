//! Result tables (CSV) and the run manifest (JSON).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: &str = "model,attack,epsilon,noise_sigma,removed_layers,clean_acc,adv_acc,macs,params,seed";

/// One (model, attack) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub model: String,
    /// `none` for clean-only rows.
    pub attack: String,
    pub epsilon: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub removed_layers: Option<usize>,
    pub clean_acc: f64,
    pub adv_acc: Option<f64>,
    pub macs: u64,
    pub params: u64,
    pub seed: u64,
    pub config_hash: String,
}

/// Per-model summary: accuracy, reconstruction error, complexity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSummary {
    pub model: String,
    pub noise_sigma: Option<f64>,
    pub removed_layers: Option<usize>,
    pub clean_acc: Option<f64>,
    /// Held-out reconstruction error of the model's autoencoder, if any.
    pub e_r: Option<f64>,
    /// Reconstruction error of the noisy inputs themselves, for reference.
    pub e_r_noisy_input: Option<f64>,
    pub macs: u64,
    pub params: u64,
}

/// Run manifest: what ran, with which configuration, and every result row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub models: Vec<ModelSummary>,
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn fixed(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl EvalReport {
    pub fn new(command: &str, config_hash: &str, seed: u64) -> Self {
        EvalReport {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            models: Vec::new(),
            rows: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{:.6},{},{},{},{}",
                r.model,
                r.attack,
                fixed(r.epsilon),
                fixed(r.noise_sigma),
                opt(r.removed_layers),
                r.clean_acc,
                fixed(r.adv_acc),
                r.macs,
                r.params,
                r.seed
            )
            .expect("write to string");
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(text).map_err(|e| Error::Report(e.to_string()))?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Report(format!(
                "schema version {} not supported (expected {SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))
    }

    pub fn row(&self, model: &str, attack: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model && r.attack == attack)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EvalReport {
        let mut r = EvalReport::new("eval-matrix", "abc", 7);
        r.rows.push(ReportRow {
            model: "base".into(),
            attack: "fgsm".into(),
            epsilon: Some(0.1),
            noise_sigma: None,
            removed_layers: None,
            clean_acc: 0.9,
            adv_acc: Some(0.125),
            macs: 10,
            params: 20,
            seed: 7,
            config_hash: "abc".into(),
        });
        r
    }

    #[test]
    fn csv_has_fixed_columns() {
        let csv = sample().to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "base,fgsm,0.100000,,,0.900000,0.125000,10,20,7");
    }

    #[test]
    fn json_round_trips_and_rejects_unknown_fields() {
        let r = sample();
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        let tampered = r.to_json().replacen("\"command\"", "\"extra\": 1,\n  \"command\"", 1);
        assert!(EvalReport::from_json(&tampered).is_err());
        let future = r.to_json().replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
        assert!(EvalReport::from_json(&future).is_err());
    }
}
