//! Side-by-side comparison of two result bundles.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::error::{CliError, Result};
use crate::output::{read_meta, read_summary, Meta, Stat, TRAJECTORIES};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub a: Option<Stat>,
    pub b: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub solver_a: String,
    pub solver_b: String,
    pub metrics: Vec<MetricRow>,
    /// Largest absolute state difference over samples present in both runs.
    pub max_state_difference: f64,
    /// Trajectory points present in only one of the runs.
    pub unmatched_points: usize,
}

impl Comparison {
    pub fn metric(&self, name: &str) -> Option<&MetricRow> {
        self.metrics.iter().find(|m| m.metric == name)
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |s: Option<Stat>| {
            s.map_or_else(|| "-".to_string(), |s| format!("{:.3}/{}", s.mean, s.max))
        };
        writeln!(
            f,
            "{:<18} {:>22} {:>22}",
            "metric (mean/max)", self.solver_a, self.solver_b
        )?;
        for m in &self.metrics {
            writeln!(f, "{:<18} {:>22} {:>22}", m.metric, cell(m.a), cell(m.b))?;
        }
        writeln!(f, "max state difference: {:e}", self.max_state_difference)?;
        if self.unmatched_points > 0 {
            writeln!(f, "unmatched trajectory points: {}", self.unmatched_points)?;
        }
        Ok(())
    }
}

fn check_comparable(a: &Meta, b: &Meta) -> Result<()> {
    let (ca, cb) = (&a.config, &b.config);
    let mismatch = |what: &str| Err(CliError::ScenarioMismatch(what.to_string()));
    if ca.scenario != cb.scenario {
        return mismatch("scenarios differ");
    }
    if ca.seed != cb.seed {
        return mismatch("seeds differ");
    }
    if ca.horizon != cb.horizon {
        return mismatch("horizons differ");
    }
    if ca.y0_max != cb.y0_max || ca.v0_max != cb.v0_max {
        return mismatch("initial-condition bounds differ");
    }
    Ok(())
}

type Key = (String, String, String, String);

/// State values keyed by (init, time, agent, component).
fn read_states(dir: &Path) -> Result<BTreeMap<Key, f64>> {
    let path = dir.join(TRAJECTORIES);
    let csv_err = |source| CliError::Csv {
        path: path.clone(),
        source,
    };
    let mut r = csv::Reader::from_path(&path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    let long = header.iter().any(|h| h == "variable");
    let mut out = BTreeMap::new();
    let parse = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| CliError::Config(format!("{}: malformed value {s:?}", path.display())))
    };
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let key = |c: &str| {
            (
                rec[0].to_string(),
                rec[1].to_string(),
                rec[2].to_string(),
                c.to_string(),
            )
        };
        if long {
            if rec[3].starts_with('x') {
                out.insert(key(&rec[3]), parse(&rec[4])?);
            }
        } else {
            out.insert(key("y"), parse(&rec[3])?);
            out.insert(key("v"), parse(&rec[4])?);
        }
    }
    Ok(out)
}

/// Compares two bundles written by [`crate::output::write_outputs`].
pub fn compare_runs(dir_a: &Path, dir_b: &Path) -> Result<Comparison> {
    let (meta_a, meta_b) = (read_meta(dir_a)?, read_meta(dir_b)?);
    check_comparable(&meta_a, &meta_b)?;
    let (sum_a, sum_b) = (read_summary(dir_a)?, read_summary(dir_b)?);
    let mut metrics: Vec<MetricRow> = sum_a
        .iter()
        .map(|(name, s)| MetricRow {
            metric: name.clone(),
            a: Some(*s),
            b: sum_b.iter().find(|(n, _)| n == name).map(|(_, s)| *s),
        })
        .collect();
    for (name, s) in &sum_b {
        if !sum_a.iter().any(|(n, _)| n == name) {
            metrics.push(MetricRow {
                metric: name.clone(),
                a: None,
                b: Some(*s),
            });
        }
    }
    let (xa, xb) = (read_states(dir_a)?, read_states(dir_b)?);
    let mut max_diff = 0.0f64;
    let mut matched = 0;
    for (k, va) in &xa {
        if let Some(vb) = xb.get(k) {
            max_diff = max_diff.max((va - vb).abs());
            matched += 1;
        }
    }
    Ok(Comparison {
        solver_a: meta_a.config.solver.name().to_string(),
        solver_b: meta_b.config.solver.name().to_string(),
        metrics,
        max_state_difference: max_diff,
        unmatched_points: xa.len() + xb.len() - 2 * matched,
    })
}
