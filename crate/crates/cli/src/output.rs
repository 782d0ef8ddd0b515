//! On-disk result bundle: CSV tables plus `meta.json`.

use std::fs;
use std::path::{Path, PathBuf};

use dasm_core::{CommCounts, Phase};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::experiment::{
    Dimensions, ExperimentConfig, ExperimentResult, SampleRecord, PRNG_DESCRIPTION,
};

pub const ITERATIONS: &str = "iterations.csv";
pub const COMMUNICATION: &str = "communication.csv";
pub const FEASIBILITY: &str = "feasibility.csv";
pub const TRAJECTORIES: &str = "trajectories.csv";
pub const DEVIATION: &str = "deviation.csv";
pub const SUMMARY: &str = "summary.csv";
pub const META: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub init: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub rho: f64,
    pub agents: usize,
    pub dims: Dimensions,
    pub prng: String,
    pub failures: Vec<Failure>,
}

impl Meta {
    pub fn from_result(res: &ExperimentResult) -> Self {
        Self {
            config: res.config.clone(),
            seed: res.config.seed,
            rho: res.config.rho,
            agents: res.agents,
            dims: res.dims,
            prng: PRNG_DESCRIPTION.to_string(),
            failures: res
                .failures()
                .into_iter()
                .map(|(init, m)| Failure {
                    init,
                    message: m.to_string(),
                })
                .collect(),
        }
    }
}

pub fn read_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join(META);
    let text = fs::read_to_string(&path).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path, source })
}

/// Summary metric names in output order.
pub const METRICS: [&str; 9] = [
    "outer_iterations",
    "dcg_feasible",
    "dcg_updating",
    "dcg_total",
    "admm_iterations",
    "init_rounds",
    "global_floats",
    "global_booleans",
    "local_floats",
];

fn metric_values(s: &SampleRecord) -> [f64; 9] {
    let t = s.ledger.total();
    [
        s.asm_outer as f64,
        s.dcg_feasible as f64,
        s.dcg_updating as f64,
        s.dcg_total() as f64,
        s.admm_iterations as f64,
        s.init_rounds as f64,
        t.global_floats as f64,
        t.global_booleans as f64,
        t.local_floats as f64,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub max: f64,
}

/// Mean and max of every metric over the warm-started samples; `None` when there are none.
pub fn summarize(res: &ExperimentResult) -> Option<Vec<(&'static str, Stat)>> {
    let rows: Vec<[f64; 9]> = res.warm_samples().map(metric_values).collect();
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some(
        METRICS
            .iter()
            .enumerate()
            .map(|(k, &name)| {
                let sum: f64 = rows.iter().map(|r| r[k]).sum();
                let max = rows.iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max);
                (name, Stat { mean: sum / n, max })
            })
            .collect(),
    )
}

struct Table {
    path: PathBuf,
    w: csv::Writer<fs::File>,
}

impl Table {
    fn create(dir: &Path, name: &str, header: &[&str]) -> Result<Self> {
        let path = dir.join(name);
        let w = csv::Writer::from_path(&path).map_err(|source| CliError::Csv {
            path: path.clone(),
            source,
        })?;
        let mut t = Self { path, w };
        t.row(header.iter().map(|s| s.to_string()))?;
        Ok(t)
    }

    fn row(&mut self, fields: impl IntoIterator<Item = String>) -> Result<()> {
        let rec: Vec<String> = fields.into_iter().collect();
        self.w.write_record(&rec).map_err(|source| CliError::Csv {
            path: self.path.clone(),
            source,
        })
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|source| CliError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

fn counts_fields(c: CommCounts) -> [String; 3] {
    [
        c.global_floats.to_string(),
        c.global_booleans.to_string(),
        c.local_floats.to_string(),
    ]
}

/// Writes every table and `meta.json` into `dir`, creating it if needed.
pub fn write_outputs(res: &ExperimentResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_iterations(res, dir)?;
    write_communication(res, dir)?;
    write_feasibility(res, dir)?;
    write_trajectories(res, dir)?;
    write_deviation(res, dir)?;
    write_summary(res, dir)?;
    let path = dir.join(META);
    let text =
        serde_json::to_string_pretty(&Meta::from_result(res)).map_err(|source| CliError::Json {
            path: path.clone(),
            source,
        })?;
    fs::write(&path, text + "\n").map_err(|source| CliError::Io { path, source })
}

fn write_iterations(res: &ExperimentResult, dir: &Path) -> Result<()> {
    let mut t = Table::create(
        dir,
        ITERATIONS,
        &[
            "init",
            "sample",
            "outer_iterations",
            "dcg_feasible",
            "dcg_updating",
            "dcg_total",
            "admm_iterations",
            "init_rounds",
            "status",
        ],
    )?;
    for run in &res.runs {
        for s in &run.samples {
            t.row([
                s.init.to_string(),
                s.sample.to_string(),
                s.asm_outer.to_string(),
                s.dcg_feasible.to_string(),
                s.dcg_updating.to_string(),
                s.dcg_total().to_string(),
                s.admm_iterations.to_string(),
                s.init_rounds.to_string(),
                "ok".to_string(),
            ])?;
        }
        if run.failure.is_some() {
            let sample = run.samples.len();
            let mut row = vec![run.init.to_string(), sample.to_string()];
            row.extend(std::iter::repeat_n(String::new(), 6));
            row.push("failed".to_string());
            t.row(row)?;
        }
    }
    t.finish()
}

fn write_communication(res: &ExperimentResult, dir: &Path) -> Result<()> {
    let mut t = Table::create(
        dir,
        COMMUNICATION,
        &[
            "init",
            "sample",
            "phase",
            "global_floats",
            "global_booleans",
            "local_floats",
        ],
    )?;
    for s in res.runs.iter().flat_map(|r| &r.samples) {
        let phases = Phase::ALL
            .iter()
            .map(|&p| (p.name(), s.ledger.phase(p)))
            .chain(std::iter::once(("total", s.ledger.total())));
        for (name, c) in phases {
            let mut row = vec![s.init.to_string(), s.sample.to_string(), name.to_string()];
            row.extend(counts_fields(c));
            t.row(row)?;
        }
    }
    t.finish()
}

fn write_feasibility(res: &ExperimentResult, dir: &Path) -> Result<()> {
    let records: Vec<_> = res
        .runs
        .iter()
        .flat_map(|r| &r.samples)
        .filter_map(|s| s.feasibility.map(|f| (s, f)))
        .collect();
    if records.is_empty() {
        return Ok(());
    }
    let mut t = Table::create(
        dir,
        FEASIBILITY,
        &[
            "init",
            "sample",
            "iterates",
            "max_equality_violation",
            "max_inequality_violation",
            "max_coupling_violation",
            "max_objective_increase",
        ],
    )?;
    for (s, f) in records {
        t.row([
            s.init.to_string(),
            s.sample.to_string(),
            f.iterates.to_string(),
            f.equality.to_string(),
            f.inequality.to_string(),
            f.coupling.to_string(),
            f.objective_increase.to_string(),
        ])?;
    }
    t.finish()
}

fn write_trajectories(res: &ExperimentResult, dir: &Path) -> Result<()> {
    if res.chain_shaped {
        let mut t = Table::create(dir, TRAJECTORIES, &["init", "time", "agent", "y", "v", "u"])?;
        for run in &res.runs {
            for (time, state) in run.states.iter().enumerate() {
                for (agent, x) in state.x.iter().enumerate() {
                    let u = run
                        .inputs
                        .get(time)
                        .map_or_else(String::new, |u| u[agent][0].to_string());
                    t.row([
                        run.init.to_string(),
                        time.to_string(),
                        agent.to_string(),
                        x[0].to_string(),
                        x[1].to_string(),
                        u,
                    ])?;
                }
            }
        }
        return t.finish();
    }
    let mut t = Table::create(
        dir,
        TRAJECTORIES,
        &["init", "time", "agent", "variable", "value"],
    )?;
    for run in &res.runs {
        for (time, state) in run.states.iter().enumerate() {
            for (agent, x) in state.x.iter().enumerate() {
                let inputs = run.inputs.get(time).map(|u| &u[agent]);
                let named =
                    x.iter()
                        .enumerate()
                        .map(|(c, v)| (format!("x{c}"), *v))
                        .chain(inputs.into_iter().flat_map(|u| {
                            u.iter().enumerate().map(|(c, v)| (format!("u{c}"), *v))
                        }));
                for (name, value) in named {
                    t.row([
                        run.init.to_string(),
                        time.to_string(),
                        agent.to_string(),
                        name,
                        value.to_string(),
                    ])?;
                }
            }
        }
    }
    t.finish()
}

fn write_deviation(res: &ExperimentResult, dir: &Path) -> Result<()> {
    let mut t = Table::create(dir, DEVIATION, &["init", "time", "deviation"])?;
    for run in &res.runs {
        for (time, d) in run.deviation().into_iter().enumerate() {
            t.row([run.init.to_string(), time.to_string(), d.to_string()])?;
        }
    }
    t.finish()
}

fn write_summary(res: &ExperimentResult, dir: &Path) -> Result<()> {
    let mut t = Table::create(dir, SUMMARY, &["metric", "mean", "max"])?;
    for (name, s) in summarize(res).unwrap_or_default() {
        t.row([name.to_string(), s.mean.to_string(), s.max.to_string()])?;
    }
    t.finish()
}

/// Reads `summary.csv` back as `(metric, mean, max)` rows.
pub fn read_summary(dir: &Path) -> Result<Vec<(String, Stat)>> {
    let path = dir.join(SUMMARY);
    let csv_err = |source| CliError::Csv {
        path: path.clone(),
        source,
    };
    let mut r = csv::Reader::from_path(&path).map_err(csv_err)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CliError::Config(format!("{}: malformed row", path.display())))
        };
        out.push((
            rec.get(0).unwrap_or_default().to_string(),
            Stat {
                mean: num(1)?,
                max: num(2)?,
            },
        ));
    }
    Ok(out)
}
