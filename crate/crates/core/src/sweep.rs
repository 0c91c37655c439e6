//! Labeled-count / mu / tau sweeps: supervised baseline and FixMatchSeg
//! trained from identical splits and seeds, reported as machine-readable
//! rows and a formatted text table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{semi_supervised_pools, Pools};
use crate::error::{Error, Result};
use crate::trainer::{evaluate, fit, init_model, FitOptions, TrainData, TrainMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub labeled_counts: Vec<usize>,
    pub mus: Vec<usize>,
    pub taus: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Train the supervised baseline once per (labeled count, mu, seed).
    #[serde(default = "yes")]
    pub baseline: bool,
    #[serde(default = "yes")]
    pub fixmatchseg: bool,
}

fn yes() -> bool {
    true
}

impl SweepSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Every cell in run order: for each seed, labeled count and mu, the
    /// baseline first, then FixMatchSeg per tau.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for &labeled in &self.labeled_counts {
                for &mu in &self.mus {
                    if self.baseline {
                        out.push(Cell {
                            mode: TrainMode::Supervised,
                            labeled,
                            mu,
                            tau: None,
                            seed,
                        });
                    }
                    if self.fixmatchseg {
                        out.extend(self.taus.iter().map(|&tau| Cell {
                            mode: TrainMode::FixMatchSeg,
                            labeled,
                            mu,
                            tau: Some(tau),
                            seed,
                        }));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mode: TrainMode,
    pub labeled: usize,
    pub mu: usize,
    /// `None` for the baseline.
    pub tau: Option<f64>,
    pub seed: u64,
}

impl Cell {
    pub fn name(&self) -> String {
        match (self.mode, self.tau) {
            (TrainMode::FixMatchSeg, Some(t)) => {
                format!("fixmatchseg_n{}_mu{}_tau{t}_s{}", self.labeled, self.mu, self.seed)
            }
            _ => format!("supervised_n{}_mu{}_s{}", self.labeled, self.mu, self.seed),
        }
    }

    /// Config of this cell derived from the base config.
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            mu: self.mu,
            tau: self.tau.unwrap_or(base.tau),
            seed: self.seed,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub test_mean_dice: Option<f64>,
    pub test_per_class_dice: Option<Vec<f64>>,
    pub best_epoch: Option<usize>,
    pub epochs: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub spec: SweepSpec,
    pub mean_includes_background: bool,
    pub results: Vec<CellResult>,
}

/// Trains and tests one cell.
pub fn run_cell(cell: &Cell, base: &TrainConfig, pools: &Pools, run_dir: Option<PathBuf>) -> Result<CellResult> {
    let cfg = cell.config(base).validated()?;
    let (labeled, unlabeled) = semi_supervised_pools(&pools.train, cell.labeled, &pools.unlabeled, cell.seed);
    let channels = labeled
        .first()
        .map(|s| s.image.channels())
        .ok_or_else(|| Error::Dataset("no labeled samples".into()))?;
    let model = init_model(&cfg, channels)?;
    let data = TrainData {
        labeled: &labeled,
        unlabeled: &unlabeled,
        val: &pools.val,
    };
    let opts = FitOptions {
        run_dir,
        ..Default::default()
    };
    let result = fit(model, &data, &cfg, cell.mode, opts)?;
    let report = evaluate(&result.best_model()?, &pools.test, &cfg)?;
    Ok(CellResult {
        cell: *cell,
        test_mean_dice: Some(report.mean_dice),
        test_per_class_dice: Some(report.per_class_dice),
        best_epoch: result.best_epoch(),
        epochs: result.history.len(),
        error: None,
    })
}

/// Runs every cell; a failing cell is recorded and the sweep continues.
pub fn run_sweep(spec: &SweepSpec, base: &TrainConfig, pools: &Pools, run_dir: Option<&Path>) -> SweepTable {
    let results = spec
        .cells()
        .iter()
        .map(|cell| {
            info!("sweep cell {}", cell.name());
            let dir = run_dir.map(|d| d.join(cell.name()));
            run_cell(cell, base, pools, dir).unwrap_or_else(|e| {
                warn!("cell {} failed: {e}", cell.name());
                CellResult {
                    cell: *cell,
                    test_mean_dice: None,
                    test_per_class_dice: None,
                    best_epoch: None,
                    epochs: 0,
                    error: Some(e.to_string()),
                }
            })
        })
        .collect();
    SweepTable {
        spec: spec.clone(),
        mean_includes_background: base.metrics.mean_includes_background,
        results,
    }
}

fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    Some((m, var.sqrt()))
}

impl SweepTable {
    /// Test Dice of every successful seed for a (mode, labeled, mu, tau) column.
    pub fn scores(&self, mode: TrainMode, labeled: usize, mu: usize, tau: Option<f64>) -> Vec<f64> {
        self.results
            .iter()
            .filter(|r| r.cell.mode == mode && r.cell.labeled == labeled && r.cell.mu == mu && r.cell.tau == tau)
            .filter_map(|r| r.test_mean_dice)
            .collect()
    }

    /// Rows per labeled count; columns per method, mean ± std over seeds.
    pub fn to_text(&self) -> String {
        let mut cols: Vec<(String, TrainMode, usize, Option<f64>)> = Vec::new();
        for &mu in &self.spec.mus {
            if self.spec.baseline {
                cols.push((format!("baseline(mu={mu})"), TrainMode::Supervised, mu, None));
            }
            if self.spec.fixmatchseg {
                for &tau in &self.spec.taus {
                    cols.push((format!("FixMatchSeg(mu={mu},tau={tau})"), TrainMode::FixMatchSeg, mu, Some(tau)));
                }
            }
        }
        let bg = if self.mean_includes_background { "including" } else { "excluding" };
        let mut out = format!(
            "Test mean Dice ({bg} background), mean ± std over {} seed(s)\n",
            self.spec.seeds.len()
        );
        let width = cols.iter().map(|c| c.0.len()).max().unwrap_or(0).max(15);
        let _ = write!(out, "{:>8}", "labeled");
        for c in &cols {
            let _ = write!(out, "  {:>width$}", c.0);
        }
        out.push('\n');
        for &n in &self.spec.labeled_counts {
            let _ = write!(out, "{n:>8}");
            for (_, mode, mu, tau) in &cols {
                let cell = match mean_std(&self.scores(*mode, n, *mu, *tau)) {
                    Some((m, s)) => format!("{m:.3} ± {s:.3}"),
                    None => "failed".to_string(),
                };
                let _ = write!(out, "  {cell:>width$}");
            }
            out.push('\n');
        }
        for r in self.results.iter().filter(|r| r.error.is_some()) {
            let _ = writeln!(out, "error in {}: {}", r.cell.name(), r.error.as_deref().unwrap_or(""));
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join("sweep.txt"), self.to_text())?;
        Ok(())
    }
}
