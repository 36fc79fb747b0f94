use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::{RunConfig, Variant};
use super::train::{train, MetricsReport, StepLog};
use crate::error::{Error, Result};
use crate::synthdata::{Dataset, Split};

/// Test-split report of one (variant, seed) run.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub report: MetricsReport,
}

/// Per-variant medians over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub dice: Vec<f64>,
    pub jaccard: Vec<f64>,
    pub mean_dice: f64,
    pub mean_jaccard: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub class_names: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Median table: one row per variant, per-class then mean Dice and Jaccard.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["variant".to_string()];
        for metric in ["dice", "jacc"] {
            header.extend(
                self.class_names
                    .iter()
                    .map(|c| format!("{metric}_{}", c.replace(' ', "_"))),
            );
            header.push(format!("{metric}_mean"));
        }
        let mut out = header.join(",") + "\n";
        for r in &self.rows {
            let mut cells = vec![r.variant.to_string()];
            cells.extend(r.dice.iter().map(f64::to_string));
            cells.push(r.mean_dice.to_string());
            cells.extend(r.jaccard.iter().map(f64::to_string));
            cells.push(r.mean_jaccard.to_string());
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(Error::io(path))
    }
}

/// Trains and tests every variant for every seed on the same data and order.
/// `progress` receives each finished run and each training step.
pub fn run_ablation(
    base: &RunConfig,
    dataset: &Dataset,
    seeds: &[u64],
    mut progress: impl FnMut(Variant, u64, Option<&StepLog>, Option<&MetricsReport>),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let test = dataset.load(Split::Test)?;
    let mut runs = Vec::new();
    for &seed in seeds {
        for variant in Variant::ALL {
            let run = RunConfig {
                variant,
                seed,
                ..base.clone()
            };
            let outcome = train(&run, dataset, |l| progress(variant, seed, Some(l), None))?;
            let mut report = outcome.trained.evaluate(&test, Split::Test)?;
            report.best_step = outcome.report.best_step;
            report.loss_curve = outcome.report.loss_curve;
            report.wall_clock_seconds = outcome.report.wall_clock_seconds;
            progress(variant, seed, None, Some(&report));
            runs.push(AblationRun {
                variant,
                seed,
                report,
            });
        }
    }
    let class_names: Vec<String> = runs[0]
        .report
        .classes
        .iter()
        .map(|c| c.class.clone())
        .collect();
    let rows = Variant::ALL
        .into_iter()
        .map(|variant| {
            let mine: Vec<&MetricsReport> = runs
                .iter()
                .filter(|r| r.variant == variant)
                .map(|r| &r.report)
                .collect();
            let col = |f: &dyn Fn(&MetricsReport) -> f64| {
                median(&mine.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            AblationRow {
                variant,
                dice: (0..class_names.len())
                    .map(|k| col(&|r| r.classes[k].dice))
                    .collect(),
                jaccard: (0..class_names.len())
                    .map(|k| col(&|r| r.classes[k].jaccard))
                    .collect(),
                mean_dice: col(&|r| r.mean_dice),
                mean_jaccard: col(&|r| r.mean_jaccard),
            }
        })
        .collect();
    Ok(AblationTable {
        class_names,
        seeds: seeds.to_vec(),
        rows,
        runs,
    })
}
