//! Ablation sweeps along one configuration axis.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::report::TrialReport;
use super::speckle::{generate, SpeckleScene};
use super::toynet::{Task, ToyNet};
use super::train::{train, TrainConfig};
use crate::denodet::DenoConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Stride,
    Refine,
    Exchange,
    Phase,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Stride, Axis::Refine, Axis::Exchange, Axis::Phase];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Stride => "stride",
            Axis::Refine => "refine",
            Axis::Exchange => "exchange",
            Axis::Phase => "phase",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Axis::ALL.into_iter().find(|a| a.name() == s)
    }
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub config: DenoConfig,
    /// Reference mAP reported for the full-scale detector, shown for comparison only.
    pub published: f64,
}

fn row(label: &str, config: DenoConfig, published: f64) -> SweepRow {
    SweepRow {
        label: label.to_string(),
        config,
        published,
    }
}

/// The row set of `axis`. `base` supplies the stride (except on the stride
/// axis) and the attention scaling.
pub fn rows(axis: Axis, base: &DenoConfig) -> Vec<SweepRow> {
    let full = DenoConfig {
        refine_amplitude: true,
        refine_phase: true,
        token_exchange: true,
        phase_decouple: true,
        phase_align: true,
        ..*base
    };
    let refines = |amp: bool, phase: bool, exchange: bool| DenoConfig {
        refine_amplitude: amp,
        refine_phase: phase,
        token_exchange: exchange,
        ..full
    };
    match axis {
        Axis::Stride => [(1, 52.5), (2, 55.7), (4, 56.2), (8, 56.7), (16, 56.1)]
            .into_iter()
            .map(|(s, p)| row(&format!("stride {s}"), DenoConfig { stride: s, ..full }, p))
            .collect(),
        Axis::Refine => vec![
            row("none", refines(false, false, false), 55.0),
            row("amplitude", refines(true, false, false), 55.6),
            row("phase", refines(false, true, false), 56.2),
            row("amplitude+phase", refines(true, true, false), 56.4),
        ],
        Axis::Exchange => vec![
            row("baseline", refines(false, false, false), 55.0),
            row("no-exchange", refines(true, true, false), 56.4),
            row("token-exchange", refines(true, true, true), 56.7),
        ],
        Axis::Phase => {
            let phase_only = refines(false, true, false);
            vec![
                row(
                    "angle",
                    DenoConfig {
                        phase_decouple: false,
                        phase_align: false,
                        ..phase_only
                    },
                    55.6,
                ),
                row(
                    "split",
                    DenoConfig {
                        phase_align: false,
                        ..phase_only
                    },
                    56.1,
                ),
                row("split+align", phase_only, 56.2),
            ]
        }
    }
}

/// Scale of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub data_seed: u64,
    pub scenes: usize,
    pub size: usize,
    pub looks: f64,
    pub channels: usize,
    pub task: Task,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            data_seed: 0,
            scenes: 16,
            size: 32,
            looks: 4.0,
            channels: 4,
            task: Task::Denoise,
            seeds: vec![0, 1, 2],
            train: TrainConfig {
                epochs: 4,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowResult {
    pub row: SweepRow,
    pub reports: Vec<TrialReport>,
}

impl RowResult {
    pub fn metrics(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.final_metric).collect()
    }

    /// Mean and sample standard deviation of the held-out metric.
    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(&self.metrics())
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains one network per (row, seed). Rows and seeds run in parallel; the
/// result is in row order, seeds in the given order.
pub fn ablation_sweep(axis: Axis, base: &DenoConfig, settings: &SweepSettings) -> Result<Vec<RowResult>> {
    if settings.seeds.len() < 3 {
        return Err(Error::Config(format!(
            "a sweep needs at least 3 seeds per row, got {}",
            settings.seeds.len()
        )));
    }
    let scenes = generate(settings.data_seed, settings.scenes, settings.size, settings.size, settings.looks)?;
    let rows = rows(axis, base);
    for r in &rows {
        r.config.partition(settings.size, settings.size)?;
    }
    let jobs: Vec<(usize, u64)> = (0..rows.len())
        .flat_map(|i| settings.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let reports: Vec<TrialReport> = jobs
        .par_iter()
        .map(|&(i, seed)| run_trial(&rows[i].config, &scenes, settings, seed))
        .collect::<Result<_>>()?;
    let per_row = settings.seeds.len();
    Ok(rows
        .into_iter()
        .zip(reports.chunks(per_row))
        .map(|(row, rs)| RowResult {
            row,
            reports: rs.to_vec(),
        })
        .collect())
}

pub fn run_trial(config: &DenoConfig, scenes: &[SpeckleScene], settings: &SweepSettings, seed: u64) -> Result<TrialReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = ToyNet::new(settings.channels, *config, settings.task, &mut rng)?;
    let cfg = TrainConfig { seed, ..settings.train };
    Ok(train(net, scenes, &cfg)?.report)
}

/// 1-based ranks; `better_high` picks the sort direction. Ties share the lower rank.
fn ranks(values: &[f64], better_high: bool) -> Vec<usize> {
    values
        .iter()
        .map(|&v| {
            1 + values
                .iter()
                .filter(|&&o| if better_high { o > v } else { o < v })
                .count()
        })
        .collect()
}

/// Aligned plain-text summary, one line per row.
pub fn summary_table(axis: Axis, results: &[RowResult], task: Task) -> String {
    let stats: Vec<(f64, f64)> = results.iter().map(RowResult::mean_std).collect();
    let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let published: Vec<f64> = results.iter().map(|r| r.row.published).collect();
    // lower MSE is better; higher F1 is better
    let toy_rank = ranks(&means, task == Task::Detect);
    let pub_rank = ranks(&published, true);
    let metric = match task {
        Task::Denoise => "held-out MSE",
        Task::Detect => "held-out F1",
    };

    let header = [
        "row".to_string(),
        "config".to_string(),
        format!("{metric} (mean ± std)"),
        "seeds".to_string(),
        "toy rank".to_string(),
        "published mAP".to_string(),
        "published rank".to_string(),
    ];
    let mut lines = vec![header.to_vec()];
    for (i, r) in results.iter().enumerate() {
        lines.push(vec![
            r.row.label.clone(),
            r.row.config.id(),
            format!("{:.6e} ± {:.2e}", stats[i].0, stats[i].1),
            r.reports.len().to_string(),
            toy_rank[i].to_string(),
            format!("{:.1}", r.row.published),
            pub_rank[i].to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    writeln!(out, "# axis: {}", axis.name()).unwrap();
    for (k, l) in lines.iter().enumerate() {
        let cells: Vec<String> = l
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
        if k == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            writeln!(out, "{}", rule.join("  ")).unwrap();
        }
    }
    out
}
