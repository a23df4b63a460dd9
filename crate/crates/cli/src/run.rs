//! `run`: the full learning-rate × λ × seed grid of a plan.
//!
//! Output directory layout:
//!
//! ```text
//! summary.csv          best cell per method, median over seeds
//! grid.csv             every cell
//! runs/<cell>_seed<s>.csv
//! vocab.txt
//! models/<method>.ckpt median-seed model of the best cell (+ .json, .run.json)
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use knit::numcore::{Precision, Scalar};
use knit::train::{build_vocabulary, finetune, median, Method, MetricKind, Model, RunConfig, RunData, RunReport};

use crate::data::{Corpus, RunInfo};
use crate::error::{mkdir, write, CliError, Result};
use crate::plan::ExperimentPlan;

/// One grid cell: a method at one learning rate and λ, over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub lr: f64,
    pub lambda: f64,
    pub median: f64,
    /// Development metric per seed, in plan order.
    pub scores: Vec<f64>,
}

impl Cell {
    fn row(&self) -> String {
        let scores: Vec<String> = self.scores.iter().map(f64::to_string).collect();
        format!("{},{},{},{},{}\n", self.method, self.median, self.lr, self.lambda, scores.join(";"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub metric: MetricKind,
    /// Best cell per method, in plan order.
    pub rows: Vec<Cell>,
    pub grid: Vec<Cell>,
    pub out: PathBuf,
}

impl Summary {
    fn table(&self, cells: &[Cell]) -> String {
        let mut s = format!("method,{},lr,lambda,scores\n", self.metric);
        for c in cells {
            s.push_str(&c.row());
        }
        s
    }

    pub fn csv(&self) -> String {
        self.table(&self.rows)
    }

    pub fn grid_csv(&self) -> String {
        self.table(&self.grid)
    }

    pub fn row(&self, m: Method) -> Option<&Cell> {
        self.rows.iter().find(|c| c.method == m)
    }

    pub fn model_path(&self, m: Method) -> PathBuf {
        model_path(&self.out, m)
    }
}

pub fn model_path(out: &Path, m: Method) -> PathBuf {
    out.join("models").join(format!("{m}.ckpt"))
}

fn run_name(c: &RunConfig) -> String {
    format!("{}_lr{}_lambda{}_seed{}", c.method, c.lr, c.lambda, c.seed)
}

pub fn cmd_run(plan: &ExperimentPlan) -> Result<Summary> {
    plan.validate()?;
    let corpus = Corpus::load(&plan.paths)?;
    match plan.encoder.precision {
        Precision::F32 => run_grid::<f32>(plan, &corpus),
        Precision::F64 => run_grid::<f64>(plan, &corpus),
    }
}

fn run_grid<S: Scalar>(plan: &ExperimentPlan, corpus: &Corpus) -> Result<Summary> {
    let out = &plan.paths.out;
    let vocab = build_vocabulary(&corpus.train, &corpus.store, plan.min_freq)?;
    let vocab_path = out.join("vocab.txt");
    vocab.save(&vocab_path)?;
    let data = RunData {
        train: &corpus.train,
        dev: &corpus.dev,
        store: &corpus.store,
        vocab: &vocab,
    };

    let mut configs = Vec::new();
    for &m in &plan.methods {
        for &lr in &plan.lrs {
            for lambda in plan.lambdas_for(m) {
                for &seed in &plan.seeds {
                    configs.push(plan.run_config(m, lr, lambda, seed));
                }
            }
        }
    }
    let results = knit::train::run_parallel(&configs, plan.workers, |c| finetune::<S>(c, data));
    let mut runs: Vec<(Model<S>, RunReport)> = Vec::with_capacity(results.len());
    for (c, r) in configs.iter().zip(results) {
        runs.push(r.map_err(|source| CliError::Run {
            method: c.method.to_string(),
            lr: c.lr,
            lambda: c.lambda,
            seed: c.seed,
            source,
        })?);
    }

    let runs_dir = out.join("runs");
    mkdir(&runs_dir)?;
    for (c, (_, rep)) in configs.iter().zip(&runs) {
        rep.write_csv(&runs_dir.join(format!("{}.csv", run_name(c))))?;
    }

    let n = plan.seeds.len();
    let mut grid = Vec::new();
    for (chunk, cfgs) in runs.chunks(n).zip(configs.chunks(n)) {
        let scores: Vec<f64> = chunk.iter().map(|(_, r)| r.dev.value).collect();
        grid.push(Cell {
            method: cfgs[0].method,
            lr: cfgs[0].lr,
            lambda: cfgs[0].lambda,
            median: median(&scores),
            scores,
        });
    }

    mkdir(&out.join("models"))?;
    let mut rows = Vec::new();
    for &m in &plan.methods {
        let (best, cell) = grid
            .iter()
            .enumerate()
            .filter(|(_, c)| c.method == m)
            .fold(None, |acc: Option<(usize, &Cell)>, (i, c)| match acc {
                Some((_, b)) if b.median >= c.median => acc,
                _ => Some((i, c)),
            })
            .expect("every method has a cell");
        let k = cell.scores.iter().position(|&s| s == cell.median).expect("median is a score");
        let (model, _) = &runs[best * n + k];
        let path = model_path(out, m);
        model.save(&path)?;
        RunInfo::from_plan(plan, cell.lr, cell.lambda, plan.seeds[k], vocab_path.clone()).write(&path)?;
        rows.push(cell.clone());
    }

    let summary = Summary {
        metric: plan.metric,
        rows,
        grid,
        out: out.clone(),
    };
    write(&out.join("summary.csv"), summary.csv())?;
    write(&out.join("grid.csv"), summary.grid_csv())?;
    Ok(summary)
}

/// Aligned text rendering of the summary for the terminal.
pub fn render(s: &Summary) -> String {
    let mut t = String::new();
    writeln!(t, "{:<10} {:>10} {:>10} {:>7}", "method", s.metric.to_string(), "lr", "lambda").unwrap();
    for c in &s.rows {
        writeln!(t, "{:<10} {:>10.4} {:>10} {:>7}", c.method.to_string(), c.median, c.lr, c.lambda).unwrap();
    }
    t
}
