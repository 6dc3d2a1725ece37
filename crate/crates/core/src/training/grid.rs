use std::cmp::Ordering;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;

use serde::Serialize;

use super::{train_with, warm_start, Checkpoint, TrainConfig};
use crate::datasets::Manifest;
use crate::error::{Error, Result};
use crate::features::FeatureStore;

/// Candidate values for `w_main`, `α` and `γ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid {
    pub w_main: Vec<f64>,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridCell {
    pub w_main: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl GridCell {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.w_main
            .total_cmp(&other.w_main)
            .then(self.alpha.total_cmp(&other.alpha))
            .then(self.gamma.total_cmp(&other.gamma))
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.loss.w_main = self.w_main;
        c.loss.alpha = self.alpha;
        c.loss.gamma = self.gamma;
        c
    }
}

fn tenths(from: u32, to: u32) -> Vec<f64> {
    (from..=to).map(|k| f64::from(k) / 10.0).collect()
}

impl Grid {
    /// w_main ∈ {0.5, …, 0.9}, α ∈ {0.1, …, 0.9}, γ ∈ {1, 2, 3}.
    pub fn standard() -> Self {
        Self {
            w_main: tenths(5, 9),
            alpha: tenths(1, 9),
            gamma: vec![1.0, 2.0, 3.0],
        }
    }

    /// Parses `"<w list>;<alpha list>;<gamma list>"` with comma-separated
    /// lists, e.g. `"0.5,0.9;0.7;1,3"`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(';').collect();
        let [w, a, g] = parts.as_slice() else {
            return Err(Error::Config(format!(
                "grid `{s}` must have three `;`-separated lists"
            )));
        };
        let list = |name: &str, text: &str| -> Result<Vec<f64>> {
            let values = text
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| Error::Config(format!("bad {name} value `{}`", v.trim())))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(values)
        };
        let grid = Self {
            w_main: list("w_main", w)?,
            alpha: list("alpha", a)?,
            gamma: list("gamma", g)?,
        };
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.w_main.len() * self.alpha.len() * self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All combinations, lexicographic in (w_main, α, γ) list order.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::with_capacity(self.len());
        for &w_main in &self.w_main {
            for &alpha in &self.alpha {
                for &gamma in &self.gamma {
                    out.push(GridCell { w_main, alpha, gamma });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridResult {
    pub cell: GridCell,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_dev_loss: f64,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    /// Ascending monitored dev loss; ties ordered by (w_main, α, γ).
    pub results: Vec<GridResult>,
    pub best: Checkpoint,
}

fn rank(a: &GridResult, b: &GridResult) -> Ordering {
    a.best_dev_loss
        .total_cmp(&b.best_dev_loss)
        .then_with(|| a.cell.key_cmp(&b.cell))
}

/// Trains one model per grid cell with the base seed and ranks them by
/// monitored dev loss. Up to `jobs` cells train concurrently, each with its
/// own feature store of `cache_bytes / jobs`.
pub fn grid_search(
    base: &TrainConfig,
    manifest: &Manifest,
    features_dir: &Path,
    grid: &Grid,
    jobs: usize,
    warm: Option<&Checkpoint>,
    cache_bytes: usize,
) -> Result<GridOutcome> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    for cell in &cells {
        cell.apply(base).validate()?;
    }
    let jobs = jobs.clamp(1, cells.len());
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<GridResult>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let best: Mutex<Option<(GridResult, Checkpoint)>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| {
                let mut store = FeatureStore::new(features_dir, cache_bytes / jobs);
                loop {
                    let i = next.fetch_add(1, AtomicOrdering::SeqCst);
                    if i >= cells.len() || failed.load(AtomicOrdering::SeqCst) {
                        break;
                    }
                    let cell = cells[i];
                    log::info!(
                        "grid cell {}/{}: w_main={} alpha={} gamma={}",
                        i + 1,
                        cells.len(),
                        cell.w_main,
                        cell.alpha,
                        cell.gamma
                    );
                    let outcome = run_cell(&cell, base, manifest, &mut store, warm);
                    let result = outcome.map(|ck| {
                        let result = GridResult {
                            cell,
                            best_epoch: ck.best_epoch,
                            epochs_run: ck.history.len(),
                            best_dev_loss: ck.best_dev_loss().unwrap_or(f64::INFINITY),
                        };
                        let mut best = best.lock().expect("grid lock");
                        if best.as_ref().is_none_or(|(b, _)| rank(&result, b) == Ordering::Less) {
                            *best = Some((result.clone(), ck));
                        }
                        result
                    });
                    if result.is_err() {
                        failed.store(true, AtomicOrdering::SeqCst);
                    }
                    slots.lock().expect("grid lock")[i] = Some(result);
                }
            });
        }
    });

    let mut results = Vec::with_capacity(cells.len());
    for slot in slots.into_inner().expect("grid lock") {
        match slot {
            Some(Ok(r)) => results.push(r),
            Some(Err(e)) => return Err(e),
            None => {}
        }
    }
    results.sort_by(rank);
    let (_, best) = best.into_inner().expect("grid lock").expect("at least one cell");
    Ok(GridOutcome { results, best })
}

fn run_cell(
    cell: &GridCell,
    base: &TrainConfig,
    manifest: &Manifest,
    store: &mut FeatureStore,
    warm: Option<&Checkpoint>,
) -> Result<Checkpoint> {
    let config = cell.apply(base);
    let start = warm.map(|ck| warm_start(ck, &config)).transpose()?;
    train_with(&config, manifest, store, start)
}
