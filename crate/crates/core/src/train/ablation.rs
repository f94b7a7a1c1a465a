use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{evaluate, hex, train, Result, TrainConfig, TrainError};
use crate::data::{Dataset, Split, Window};
use crate::model::{count_params, Variant};

/// Axes of the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub variants: Vec<Variant>,
    pub lengths: Vec<usize>,
    pub windows: Vec<Window>,
    pub seeds: Vec<u64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            variants: Variant::ALL.to_vec(),
            lengths: (2..=7).collect(),
            windows: Window::ALL.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl AblationGrid {
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            for &n in &self.lengths {
                for &window in &self.windows {
                    for &seed in &self.seeds {
                        out.push(CellKey { variant, n, window, seed });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub variant: Variant,
    pub n: usize,
    pub window: Window,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellMetrics {
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub params: usize,
    pub epochs: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub key: CellKey,
    pub config_hash: String,
    /// Failure message for cells that did not complete.
    pub outcome: std::result::Result<CellMetrics, String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub cells: Vec<CellResult>,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

const HEADER: &str =
    "variant\tn\twindow\tseed\tconfig_hash\tstatus\ttest_accuracy\ttrain_accuracy\tval_accuracy\tparams\tepochs\tseconds\tmessage";

fn run_cell(base: &TrainConfig, dataset: &Dataset, key: CellKey) -> CellResult {
    let mut config = base.clone();
    config.model.variant = key.variant;
    config.n = key.n;
    config.window = key.window;
    config.seed = key.seed;
    let mut hasher = Sha256::new();
    hasher.update(config.to_string().as_bytes());
    hasher.update(dataset.manifest.hash().as_bytes());
    let config_hash = hex(&hasher.finalize());

    let started = Instant::now();
    let outcome = (|| -> Result<CellMetrics> {
        let trained = train(&config, dataset)?;
        let test = evaluate(&trained.params, dataset, Split::Test, &config)?;
        let best = trained.best();
        Ok(CellMetrics {
            test_accuracy: test.accuracy,
            train_accuracy: best.train_accuracy,
            val_accuracy: best.val_accuracy,
            params: count_params(&trained.params),
            epochs: trained.epochs.len(),
            seconds: started.elapsed().as_secs_f64(),
        })
    })();
    match &outcome {
        Ok(m) => log::info!("{key:?}: test accuracy {:.3} after {} epochs", m.test_accuracy, m.epochs),
        Err(e) => log::warn!("{key:?} failed: {e}"),
    }
    CellResult { key, config_hash, outcome: outcome.map_err(|e| e.to_string()) }
}

/// Trains and evaluates every grid cell. A failing cell is recorded, not
/// propagated. `threads` caps how many cells run at once.
pub fn run_ablation(base: &TrainConfig, dataset: &Dataset, grid: &AblationGrid, threads: usize) -> Result<AblationReport> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(TrainError::Config("ablation grid is empty".into()));
    }
    let cells = if threads <= 1 {
        cells.into_iter().map(|k| run_cell(base, dataset, k)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| TrainError::Config(format!("thread pool: {e}")))?;
        pool.install(|| cells.into_par_iter().map(|k| run_cell(base, dataset, k)).collect())
    };
    Ok(AblationReport { cells })
}

/// The two headline comparisons between full-stam and cnn-only.
#[derive(Clone, Debug, PartialEq)]
pub struct GapSummary {
    /// Mean over lengths of (full-stam − cnn-only) with onset-aligned windows.
    pub clean_gap: f64,
    /// The same with windows starting at frame 0.
    pub noisy_gap: f64,
    /// `(n, cnn-only drop, full-stam drop)`, drop = clean − noisy accuracy.
    pub drops: Vec<(usize, f64, f64)>,
}

impl AblationReport {
    pub fn completed(&self) -> usize {
        self.cells.iter().filter(|c| c.outcome.is_ok()).count()
    }

    pub fn completion_rate(&self) -> f64 {
        self.completed() as f64 / self.cells.len().max(1) as f64
    }

    /// Test accuracy of one completed cell.
    pub fn accuracy(&self, variant: Variant, n: usize, window: Window, seed: u64) -> Option<f64> {
        let key = CellKey { variant, n, window, seed };
        self.cells.iter().find(|c| c.key == key)?.outcome.as_ref().ok().map(|m| m.test_accuracy)
    }

    /// Mean test accuracy over completed seeds.
    pub fn mean_accuracy(&self, variant: Variant, n: usize, window: Window) -> Option<f64> {
        let accs: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.key.variant == variant && c.key.n == n && c.key.window == window)
            .filter_map(|c| c.outcome.as_ref().ok().map(|m| m.test_accuracy))
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    pub fn lengths(&self) -> Vec<usize> {
        let mut n: Vec<usize> = self.cells.iter().map(|c| c.key.n).collect();
        n.sort_unstable();
        n.dedup();
        n
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.cells.iter().map(|c| c.key.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Headline gaps from seed-averaged accuracies; `None` when a needed
    /// cell is missing for every seed.
    pub fn gap_summary(&self) -> Option<GapSummary> {
        let acc = |v, n, w| self.mean_accuracy(v, n, w);
        let mut clean = Vec::new();
        let mut noisy = Vec::new();
        let mut drops = Vec::new();
        for n in self.lengths() {
            let cc = acc(Variant::CnnOnly, n, Window::FromOnset)?;
            let cn = acc(Variant::CnnOnly, n, Window::FromStart)?;
            let sc = acc(Variant::FullStam, n, Window::FromOnset)?;
            let sn = acc(Variant::FullStam, n, Window::FromStart)?;
            clean.push(sc - cc);
            noisy.push(sn - cn);
            drops.push((n, cc - cn, sc - sn));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Some(GapSummary { clean_gap: mean(&clean), noisy_gap: mean(&noisy), drops })
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "cells completed: {}/{}", self.completed(), self.cells.len());
        let _ = writeln!(out, "mean test accuracy (seeds {:?}):", self.seeds());
        let _ = writeln!(out, "variant\twindow\t{}", self.lengths().iter().map(|n| format!("n={n}")).collect::<Vec<_>>().join("\t"));
        for v in Variant::ALL {
            for w in Window::ALL {
                let row: Vec<String> = self
                    .lengths()
                    .iter()
                    .map(|&n| self.mean_accuracy(v, n, w).map_or("-".into(), |a| format!("{:.4}", a)))
                    .collect();
                let _ = writeln!(out, "{v}\t{w}\t{}", row.join("\t"));
            }
        }
        match self.gap_summary() {
            Some(g) => {
                let _ = writeln!(out, "full-stam minus cnn-only, clean: {:+.4}", g.clean_gap);
                let _ = writeln!(out, "full-stam minus cnn-only, noisy: {:+.4}", g.noisy_gap);
                for (n, c, s) in g.drops {
                    let _ = writeln!(out, "noise drop n={n}: cnn-only {c:+.4}, full-stam {s:+.4}");
                }
            }
            None => out.push_str("gap summary unavailable: missing cells\n"),
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{HEADER}\n");
        for c in &self.cells {
            let k = &c.key;
            let _ = write!(out, "{}\t{}\t{}\t{}\t{}\t", k.variant, k.n, k.window, k.seed, c.config_hash);
            match &c.outcome {
                Ok(m) => {
                    let _ = writeln!(
                        out,
                        "ok\t{}\t{}\t{}\t{}\t{}\t{}\t",
                        m.test_accuracy, m.train_accuracy, m.val_accuracy, m.params, m.epochs, m.seconds
                    );
                }
                Err(msg) => {
                    let msg = msg.replace(['\t', '\n'], " ");
                    let _ = writeln!(out, "failed\t\t\t\t\t\t\t{msg}");
                }
            }
        }
        out
    }

    pub fn from_table(text: &str) -> std::result::Result<Self, ReportError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == HEADER => {}
            _ => return Err(ReportError::Parse { line: 1, detail: "missing header".into() }),
        }
        let mut cells = Vec::new();
        for (no, line) in lines {
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| ReportError::Parse { line: no + 1, detail };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 13 {
                return Err(err(format!("expected 13 fields, got {}", f.len())));
            }
            let key = CellKey {
                variant: f[0].parse::<Variant>().map_err(|e| err(e.to_string()))?,
                n: f[1].parse().map_err(|_| err(format!("bad n {:?}", f[1])))?,
                window: f[2].parse().map_err(err)?,
                seed: f[3].parse().map_err(|_| err(format!("bad seed {:?}", f[3])))?,
            };
            let float = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number {s:?}")));
            let int = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad integer {s:?}")));
            let outcome = match f[5] {
                "ok" => Ok(CellMetrics {
                    test_accuracy: float(f[6])?,
                    train_accuracy: float(f[7])?,
                    val_accuracy: float(f[8])?,
                    params: int(f[9])?,
                    epochs: int(f[10])?,
                    seconds: float(f[11])?,
                }),
                "failed" => Err(f[12].to_string()),
                s => return Err(err(format!("unknown status {s:?}"))),
            };
            cells.push(CellResult { key, config_hash: f[4].to_string(), outcome });
        }
        Ok(AblationReport { cells })
    }

    /// Seed-averaged accuracies keyed by `(variant, n, window)`.
    pub fn mean_table(&self) -> BTreeMap<(Variant, usize, Window), f64> {
        let mut out = BTreeMap::new();
        for c in &self.cells {
            let k = (c.key.variant, c.key.n, c.key.window);
            if let Some(a) = self.mean_accuracy(k.0, k.1, k.2) {
                out.insert(k, a);
            }
        }
        out
    }
}
