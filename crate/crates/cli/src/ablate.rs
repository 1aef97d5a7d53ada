//! Grid runner over pooling mode, cfg ratio and regularizer weight.
//!
//! Every cell trains from the same seed, so all cells see the same batches
//! and initial weights and differ only in the swept settings.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use rrlm::eval::{run_eval, EvalReport};
use rrlm::tensor::PoolMode;
use rrlm::trainer::Trainer;
use rrlm::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const ABLATION_HEADER: &str = "pool,cfg_ratio,lambda,scene_acc,scene_f1,proxy_fad,proxy_kl";

/// Pooling for the regularizer; `None` trains without it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolChoice {
    Max,
    #[serde(alias = "average")]
    Mean,
    None,
}

impl PoolChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolChoice::Max => "max",
            PoolChoice::Mean => "mean",
            PoolChoice::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub pool: PoolChoice,
    pub cfg_ratio: f64,
    pub lambda: f64,
}

/// Either lists whose cartesian product forms the grid, or explicit cells.
/// Missing lists take the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub pool: Option<Vec<PoolChoice>>,
    pub cfg_ratio: Option<Vec<f64>>,
    pub lambda: Option<Vec<f64>>,
    pub cells: Option<Vec<Cell>>,
}

impl GridFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read grid {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Cells in pool, cfg_ratio, lambda order. `none` cells carry lambda 0
    /// and appear once per cfg ratio.
    pub fn expand(&self, base: &RunConfig) -> Result<Vec<Cell>> {
        let lists = self.pool.is_some() || self.cfg_ratio.is_some() || self.lambda.is_some();
        let cells = match (&self.cells, lists) {
            (Some(_), true) => return Err(Error::Config("grid gives both explicit cells and lists".into())),
            (Some(cells), false) => cells.iter().map(|c| normalize(*c)).collect(),
            (None, _) => {
                let base_pool = match base.pool_mode {
                    PoolMode::Max => PoolChoice::Max,
                    PoolMode::Mean => PoolChoice::Mean,
                };
                let pools = self.pool.clone().unwrap_or_else(|| vec![base_pool]);
                let ratios = self.cfg_ratio.clone().unwrap_or_else(|| vec![base.cfg_ratio]);
                let lambdas = self.lambda.clone().unwrap_or_else(|| vec![base.lambda]);
                let mut out: Vec<Cell> = Vec::new();
                for &pool in &pools {
                    for &cfg_ratio in &ratios {
                        for &lambda in &lambdas {
                            let c = normalize(Cell { pool, cfg_ratio, lambda });
                            if out.last() != Some(&c) {
                                out.push(c);
                            }
                        }
                    }
                }
                out
            }
        };
        if cells.is_empty() {
            return Err(Error::Config("grid has no cells".into()));
        }
        for c in &cells {
            cell_config(base, c).validate()?;
        }
        Ok(cells)
    }
}

fn normalize(c: Cell) -> Cell {
    if c.pool == PoolChoice::None {
        Cell { lambda: 0.0, ..c }
    } else {
        c
    }
}

pub fn cell_config(base: &RunConfig, cell: &Cell) -> RunConfig {
    let mut cfg = base.clone();
    cfg.cfg_ratio = cell.cfg_ratio;
    match cell.pool {
        PoolChoice::Max => cfg.pool_mode = PoolMode::Max,
        PoolChoice::Mean => cfg.pool_mode = PoolMode::Mean,
        PoolChoice::None => {}
    }
    cfg.lambda = if cell.pool == PoolChoice::None { 0.0 } else { cell.lambda };
    cfg
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub report: EvalReport,
}

impl CellResult {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.cell.pool.as_str(), self.cell.cfg_ratio, self.cell.lambda, self.report.csv_row())
    }
}

/// Trains one cell to completion and evaluates its EMA weights.
pub fn run_cell(base: &RunConfig, cell: &Cell) -> Result<CellResult> {
    let cfg = cell_config(base, cell);
    let mut trainer = Trainer::new(cfg.grammar(), cfg.model(), cfg.train())?;
    trainer.run(None, |_| Ok(()))?;
    let report = run_eval(trainer.model(), &trainer.state().ema, trainer.grammar(), cfg.eval_prompts, &cfg.sample())?;
    Ok(CellResult { cell: *cell, report })
}

/// Runs every cell on `jobs` worker threads; results come back in grid
/// order whatever the completion order.
pub fn run_grid(base: &RunConfig, cells: &[Cell], jobs: usize) -> Result<Vec<CellResult>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| cells.par_iter().map(|c| run_cell(base, c)).collect())
}

pub fn grid_csv(results: &[CellResult]) -> String {
    let mut out = String::new();
    writeln!(out, "{ABLATION_HEADER}").expect("string write");
    for r in results {
        writeln!(out, "{}", r.csv_row()).expect("string write");
    }
    out
}
