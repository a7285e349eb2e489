//! One trial per line, `key=value` fields separated by tabs (shown as `\t`)
//! in a fixed order:
//! ```text
//! config-id=s8-amp-pha-x-dec-aln-group\tseed=0\tepoch-losses=0.1,0.09\tfinal-metric=0.01\truntime-ms=0\tmax-imag-residue=1e-17
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so parsing a line gives
//! back the same bits.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const FIELDS: [&str; 6] = [
    "config-id",
    "seed",
    "epoch-losses",
    "final-metric",
    "runtime-ms",
    "max-imag-residue",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    pub config_id: String,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub final_metric: f64,
    pub runtime_ms: u64,
    pub max_imag_residue: f64,
}

impl TrialReport {
    pub fn to_line(&self) -> String {
        let losses = self
            .epoch_losses
            .iter()
            .map(|v| format!("{v:?}"))
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        write!(
            s,
            "config-id={}\tseed={}\tepoch-losses={}\tfinal-metric={:?}\truntime-ms={}\tmax-imag-residue={:?}",
            self.config_id, self.seed, losses, self.final_metric, self.runtime_ms, self.max_imag_residue
        )
        .unwrap();
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = |msg: String| Error::Config(format!("trial report: {msg}"));
        let parts: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
        if parts.len() != FIELDS.len() {
            return Err(bad(format!("expected {} fields, found {}", FIELDS.len(), parts.len())));
        }
        let mut values = [""; 6];
        for ((slot, part), key) in values.iter_mut().zip(&parts).zip(FIELDS) {
            *slot = part
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .ok_or_else(|| bad(format!("expected field {key:?}, found {part:?}")))?;
        }
        let float = |key: &str, v: &str| v.parse::<f64>().map_err(|e| bad(format!("{key}: {e}")));
        let epoch_losses = if values[2].is_empty() {
            Vec::new()
        } else {
            values[2]
                .split(',')
                .map(|v| float("epoch-losses", v))
                .collect::<Result<_>>()?
        };
        Ok(TrialReport {
            config_id: values[0].to_string(),
            seed: values[1].parse().map_err(|e| bad(format!("seed: {e}")))?,
            epoch_losses,
            final_metric: float("final-metric", values[3])?,
            runtime_ms: values[4].parse().map_err(|e| bad(format!("runtime-ms: {e}")))?,
            max_imag_residue: float("max-imag-residue", values[5])?,
        })
    }
}

/// Serializes a stream, one report per line.
pub fn write_reports(reports: &[TrialReport]) -> String {
    reports.iter().map(|r| r.to_line() + "\n").collect()
}

pub fn parse_reports(text: &str) -> Result<Vec<TrialReport>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(TrialReport::parse_line)
        .collect()
}

/// Output of a repeated training experiment: one report per seed, the
/// held-out metric each trial started from, and optionally the improvement
/// margin later runs are held to.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub initial_metrics: Vec<f64>,
    pub reports: Vec<TrialReport>,
    pub margin: Option<f64>,
}

impl ExperimentRecord {
    /// Relative held-out loss reduction per trial, `(initial − final) / initial`.
    pub fn improvements(&self) -> Vec<f64> {
        self.initial_metrics
            .iter()
            .zip(&self.reports)
            .map(|(&i, r)| (i - r.final_metric) / i)
            .collect()
    }

    pub fn min_improvement(&self) -> f64 {
        self.improvements().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (init, r) in self.initial_metrics.iter().zip(&self.reports) {
            writeln!(s, "initial-metric={init:?}").unwrap();
            writeln!(s, "{}", r.to_line()).unwrap();
        }
        if let Some(m) = self.margin {
            writeln!(s, "margin={m:?}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Config(format!("experiment record: {msg}"));
        let mut rec = ExperimentRecord {
            initial_metrics: Vec::new(),
            reports: Vec::new(),
            margin: None,
        };
        for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
            if let Some(v) = line.strip_prefix("initial-metric=") {
                rec.initial_metrics.push(v.parse().map_err(|e| bad(format!("initial-metric: {e}")))?);
            } else if let Some(v) = line.strip_prefix("margin=") {
                rec.margin = Some(v.parse().map_err(|e| bad(format!("margin: {e}")))?);
            } else {
                rec.reports.push(TrialReport::parse_line(line)?);
            }
        }
        if rec.initial_metrics.len() != rec.reports.len() {
            return Err(bad(format!(
                "{} initial metrics for {} reports",
                rec.initial_metrics.len(),
                rec.reports.len()
            )));
        }
        Ok(rec)
    }
}
