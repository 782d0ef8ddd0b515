//! Scenario descriptions: the chain-of-masses benchmark or a network read from JSON.
//!
//! JSON schema (matrices are row-major lists of rows):
//!
//! ```json
//! {
//!   "agents": [
//!     {
//!       "a_self": [[1.0, 0.2], [-0.6, 0.4]],
//!       "b": [[0.0], [0.2]],
//!       "a_in": [{ "from": 1, "matrix": [[0.0, 0.0], [0.6, 0.6]] }],
//!       "u_lo": [-1.0],
//!       "u_hi": [1.0],
//!       "q": [[10.0, 0.0], [0.0, 10.0]],
//!       "r": [[1.0]],
//!       "p": [[0.0, 0.0], [0.0, 0.0]]
//!     }
//!   ]
//! }
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dasm_core::{build_chain_of_masses, AgentModel, ChainParams, NetworkModel};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub masses: usize,
    pub mass: f64,
    pub stiffness: f64,
    pub damping: f64,
    pub sample_time: f64,
    pub u_max: f64,
    pub q_diag: [f64; 2],
    pub r: f64,
    pub p: [[f64; 2]; 2],
}

impl Default for ChainSpec {
    fn default() -> Self {
        ChainSpec::from(&ChainParams::default())
    }
}

impl From<&ChainParams> for ChainSpec {
    fn from(p: &ChainParams) -> Self {
        Self {
            masses: p.masses,
            mass: p.mass,
            stiffness: p.stiffness,
            damping: p.damping,
            sample_time: p.sample_time,
            u_max: p.u_max,
            q_diag: p.q_diag,
            r: p.r,
            p: p.p,
        }
    }
}

impl From<&ChainSpec> for ChainParams {
    fn from(s: &ChainSpec) -> Self {
        Self {
            masses: s.masses,
            mass: s.mass,
            stiffness: s.stiffness,
            damping: s.damping,
            sample_time: s.sample_time,
            u_max: s.u_max,
            q_diag: s.q_diag,
            r: s.r,
            p: s.p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    Chain(ChainSpec),
    File { path: PathBuf },
}

impl Scenario {
    pub fn build(&self) -> Result<NetworkModel> {
        match self {
            Self::Chain(spec) => Ok(build_chain_of_masses(&ChainParams::from(spec))?),
            Self::File { path } => load_network(path),
        }
    }

    /// True when every agent is a mass with state `(y, v)` and one input.
    pub fn is_chain_shaped(net: &NetworkModel) -> bool {
        net.agents()
            .iter()
            .all(|a| a.n_states() == 2 && a.n_inputs() == 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    pub agents: Vec<AgentFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentFile {
    pub a_self: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    #[serde(default)]
    pub a_in: Vec<CouplingFile>,
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingFile {
    pub from: usize,
    pub matrix: Vec<Vec<f64>>,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::Config(format!(
            "{what}: rows have different lengths"
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

impl NetworkFile {
    pub fn to_model(&self) -> Result<NetworkModel> {
        let agents = self
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let mut a_in = BTreeMap::new();
                for c in &a.a_in {
                    let blk = matrix(&c.matrix, &format!("agent {i} a_in from {}", c.from))?;
                    if a_in.insert(c.from, blk).is_some() {
                        return Err(CliError::Config(format!(
                            "agent {i}: duplicate coupling from {}",
                            c.from
                        )));
                    }
                }
                Ok(AgentModel {
                    a_self: matrix(&a.a_self, &format!("agent {i} a_self"))?,
                    b: matrix(&a.b, &format!("agent {i} b"))?,
                    a_in,
                    u_lo: DVector::from_column_slice(&a.u_lo),
                    u_hi: DVector::from_column_slice(&a.u_hi),
                    q: matrix(&a.q, &format!("agent {i} q"))?,
                    r: matrix(&a.r, &format!("agent {i} r"))?,
                    p: matrix(&a.p, &format!("agent {i} p"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NetworkModel::new(agents)?)
    }

    pub fn from_model(net: &NetworkModel) -> Self {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows())
                .map(|i| m.row(i).iter().copied().collect())
                .collect()
        };
        Self {
            agents: net
                .agents()
                .iter()
                .map(|a| AgentFile {
                    a_self: rows(&a.a_self),
                    b: rows(&a.b),
                    a_in: a
                        .a_in
                        .iter()
                        .map(|(&from, m)| CouplingFile {
                            from,
                            matrix: rows(m),
                        })
                        .collect(),
                    u_lo: a.u_lo.iter().copied().collect(),
                    u_hi: a.u_hi.iter().copied().collect(),
                    q: rows(&a.q),
                    r: rows(&a.r),
                    p: rows(&a.p),
                })
                .collect(),
        }
    }
}

pub fn load_network(path: &Path) -> Result<NetworkModel> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: NetworkFile = serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    file.to_model()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_round_trips_through_json() {
        let net = Scenario::Chain(ChainSpec {
            masses: 4,
            ..ChainSpec::default()
        })
        .build()
        .unwrap();
        let file = NetworkFile::from_model(&net);
        let text = serde_json::to_string(&file).unwrap();
        let back: NetworkFile = serde_json::from_str(&text).unwrap();
        let rebuilt = back.to_model().unwrap();
        assert_eq!(rebuilt.agents(), net.agents());
        assert!(Scenario::is_chain_shaped(&rebuilt));
    }

    #[test]
    fn ragged_matrix_rejected() {
        let mut file = NetworkFile::from_model(
            &Scenario::Chain(ChainSpec {
                masses: 2,
                ..ChainSpec::default()
            })
            .build()
            .unwrap(),
        );
        file.agents[0].a_self[1].pop();
        assert!(matches!(file.to_model(), Err(CliError::Config(_))));
    }

    #[test]
    fn inconsistent_topology_rejected() {
        let mut file = NetworkFile::from_model(
            &Scenario::Chain(ChainSpec {
                masses: 2,
                ..ChainSpec::default()
            })
            .build()
            .unwrap(),
        );
        file.agents[0].a_in[0].from = 7;
        assert!(matches!(file.to_model(), Err(CliError::Core(_))));
    }
}
