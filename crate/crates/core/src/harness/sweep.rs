use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::mean_std;
use super::train::{evaluate, fit, result_row};
use super::{prepare_data, ExperimentConfig, ResultRow};
use crate::masking::Strategy;
use crate::{Error, Result};

pub const RESULT_CSV_HEADER: &str =
    "task,strategy,train_ratio,eval_ratio,tau,patch_size,lambda,seed,metric_name,metric_value,gflops,peak_mem_mb,wall_s";

pub const SUMMARY_CSV_HEADER: &str =
    "task,strategy,train_ratio,eval_ratio,tau,patch_size,lambda,metric_name,mean,std,n_seeds";

/// A base configuration and the axes to vary. A missing axis keeps the base
/// value; an empty axis makes the grid empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub base: ExperimentConfig,
    #[serde(default)]
    pub strategies: Option<Vec<Strategy>>,
    #[serde(default)]
    pub train_ratios: Option<Vec<f64>>,
    /// Every trained cell is evaluated at each of these ratios.
    #[serde(default)]
    pub eval_ratios: Option<Vec<f64>>,
    #[serde(default)]
    pub taus: Option<Vec<f64>>,
    #[serde(default)]
    pub patch_sizes: Option<Vec<usize>>,
    #[serde(default)]
    pub lambdas: Option<Vec<f64>>,
    /// Label granularities; `null` keeps the fine classes.
    #[serde(default)]
    pub class_groups: Option<Vec<Option<Vec<usize>>>>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

impl SweepGrid {
    pub fn new(base: ExperimentConfig) -> Self {
        Self {
            base,
            strategies: None,
            train_ratios: None,
            eval_ratios: None,
            taus: None,
            patch_sizes: None,
            lambdas: None,
            class_groups: None,
            seeds: None,
        }
    }

    pub fn eval_ratios(&self) -> Vec<f64> {
        self.eval_ratios.clone().unwrap_or_else(|| vec![self.base.eval_ratio])
    }

    /// Training configurations in row order: seeds vary fastest.
    pub fn cells(&self) -> Vec<ExperimentConfig> {
        fn axis<T: Clone>(a: &Option<Vec<T>>, base: T) -> Vec<T> {
            a.clone().unwrap_or_else(|| vec![base])
        }
        let b = &self.base;
        let mut out = Vec::new();
        for strategy in axis(&self.strategies, b.strategy) {
            for train_ratio in axis(&self.train_ratios, b.train_ratio) {
                for tau in axis(&self.taus.clone().map(|v| v.into_iter().map(Some).collect()), b.tau) {
                    for patch in axis(&self.patch_sizes, b.model.patch) {
                        for lambda in axis(&self.lambdas, b.data.scene.lambda) {
                            for groups in axis(&self.class_groups, b.data.class_groups.clone()) {
                                for seed in axis(&self.seeds, b.seed) {
                                    let mut c = b.clone();
                                    c.strategy = strategy;
                                    c.train_ratio = train_ratio;
                                    c.tau = tau;
                                    c.model.patch = patch;
                                    c.data.scene.lambda = lambda;
                                    c.data.class_groups = groups.clone();
                                    c.seed = seed;
                                    out.push(c);
                                }
                            }
                        }
                    }
                }
            }
        }
        if self.eval_ratios.as_ref().is_some_and(Vec::is_empty) {
            out.clear();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    /// Cells run concurrently.
    pub jobs: usize,
    /// Fill the `wall_s` column; off by default so reruns are byte-identical.
    pub timing: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { jobs: 1, timing: false }
    }
}

fn run_cell(cell: &ExperimentConfig, eval_ratios: &[f64], timing: bool) -> Vec<ResultRow> {
    let start = Instant::now();
    let outcome = (|| -> Result<Vec<ResultRow>> {
        let data = prepare_data(&cell.data)?;
        let (net, _) = fit(cell, &data.train)?;
        eval_ratios
            .iter()
            .map(|&r| {
                let eval = evaluate(&net, &data.eval, cell.strategy, r, cell.tau)?;
                result_row(cell, r, &net, &eval)
            })
            .collect()
    })();
    let wall = if timing { start.elapsed().as_secs_f64() } else { 0.0 };
    match outcome {
        Ok(mut rows) => {
            rows.iter_mut().for_each(|r| r.wall_s = wall);
            rows
        }
        Err(e) => {
            log::warn!("sweep cell {} seed {} failed: {e}", cell.digest(), cell.seed);
            eval_ratios
                .iter()
                .map(|&r| {
                    let mut row = ResultRow::skeleton(cell, r);
                    row.wall_s = wall;
                    row.error = Some(e.to_string());
                    row
                })
                .collect()
        }
    }
}

/// Runs every cell of the grid; failed cells yield rows without a metric.
pub fn sweep(grid: &SweepGrid, opts: &SweepOptions) -> Result<Vec<ResultRow>> {
    let cells = grid.cells();
    let eval_ratios = grid.eval_ratios();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", opts.jobs)))?;
    let per_cell: Vec<Vec<ResultRow>> = pool.install(|| {
        cells
            .par_iter()
            .map(|c| run_cell(c, &eval_ratios, opts.timing))
            .collect()
    });
    Ok(per_cell.into_iter().flatten().collect())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_rows_csv<W: Write>(mut out: W, rows: &[ResultRow]) -> std::io::Result<()> {
    writeln!(out, "{RESULT_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.task.as_str(),
            r.strategy,
            r.train_ratio,
            r.eval_ratio,
            opt(r.tau),
            r.patch_size,
            r.lambda,
            r.seed,
            r.metric_name,
            opt(r.metric_value),
            r.gflops,
            r.peak_mem_mb,
            r.wall_s
        )?;
    }
    Ok(())
}

/// Parses the result columns back; rows with an empty metric are failures.
pub fn read_rows_csv(text: &str) -> Result<Vec<Vec<String>>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RESULT_CSV_HEADER => {}
        other => {
            return Err(Error::Format {
                file: "results csv".into(),
                offset: 0,
                reason: format!("unexpected header {other:?}"),
            })
        }
    }
    let width = RESULT_CSV_HEADER.split(',').count();
    let mut offset = RESULT_CSV_HEADER.len() as u64 + 1;
    let mut out = Vec::new();
    for line in lines {
        let fields: Vec<String> = line.split(',').map(str::to_string).collect();
        if fields.len() != width {
            return Err(Error::Format {
                file: "results csv".into(),
                offset,
                reason: format!("expected {width} fields, found {}", fields.len()),
            });
        }
        offset += line.len() as u64 + 1;
        out.push(fields);
    }
    Ok(out)
}

/// Mean and standard deviation over seeds of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub digest: String,
    pub row: ResultRow,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

/// Groups successful rows by configuration digest, in first-seen order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, (ResultRow, Vec<f64>)> = Default::default();
    for r in rows {
        let Some(v) = r.metric_value else { continue };
        let entry = groups.entry(r.digest.clone()).or_insert_with(|| {
            order.push(r.digest.clone());
            (r.clone(), Vec::new())
        });
        entry.1.push(v);
    }
    order
        .into_iter()
        .map(|d| {
            let (row, values) = groups.remove(&d).expect("group exists");
            let (mean, std) = mean_std(&values);
            SummaryRow {
                digest: d,
                row,
                mean,
                std,
                n_seeds: values.len(),
            }
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(mut out: W, rows: &[SummaryRow]) -> std::io::Result<()> {
    writeln!(out, "{SUMMARY_CSV_HEADER}")?;
    for s in rows {
        let r = &s.row;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.task.as_str(),
            r.strategy,
            r.train_ratio,
            r.eval_ratio,
            opt(r.tau),
            r.patch_size,
            r.lambda,
            r.metric_name,
            s.mean,
            s.std,
            s.n_seeds
        )?;
    }
    Ok(())
}
