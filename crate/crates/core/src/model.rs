//! Coupled linear network `x_i⁺ = A_ii x_i + B_i u_i + Σ_j A_ij x_j` and the chain-of-masses benchmark.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

/// One subsystem of the network together with its MPC weights and input box.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentModel {
    pub a_self: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Coupling blocks `A_ij` keyed by the in-neighbor index `j`.
    pub a_in: BTreeMap<usize, DMatrix<f64>>,
    pub u_lo: DVector<f64>,
    pub u_hi: DVector<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

impl AgentModel {
    pub fn n_states(&self) -> usize {
        self.a_self.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }
}

/// Validated network with derived in/out neighbor sets.
///
/// Agents are indexed `0..M`. `j` is an in-neighbor of `i` iff agent `i` holds a
/// nonzero block `A_ij`; zero blocks are kept in the model but create no edge.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    agents: Vec<AgentModel>,
    in_neighbors: Vec<Vec<usize>>,
    out_neighbors: Vec<Vec<usize>>,
}

impl NetworkModel {
    pub fn new(agents: Vec<AgentModel>) -> Result<Self> {
        let m = agents.len();
        if m == 0 {
            return Err(Error::InvalidParameter("network has no agents".into()));
        }
        for (i, a) in agents.iter().enumerate() {
            validate_agent(i, a, &agents)?;
        }
        let in_neighbors: Vec<Vec<usize>> = agents
            .iter()
            .map(|a| {
                a.a_in
                    .iter()
                    .filter(|(_, blk)| blk.iter().any(|v| *v != 0.0))
                    .map(|(j, _)| *j)
                    .collect()
            })
            .collect();
        let mut out_neighbors = vec![Vec::new(); m];
        for (i, ins) in in_neighbors.iter().enumerate() {
            for &j in ins {
                out_neighbors[j].push(i);
            }
        }
        for outs in &mut out_neighbors {
            outs.sort_unstable();
        }
        Ok(Self {
            agents,
            in_neighbors,
            out_neighbors,
        })
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn agents(&self) -> &[AgentModel] {
        &self.agents
    }

    pub fn agent(&self, i: usize) -> &AgentModel {
        &self.agents[i]
    }

    /// `ℳᵢⁱⁿ`, ascending.
    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.in_neighbors[i]
    }

    /// `ℳᵢᵒᵘᵗ`, ascending.
    pub fn out_neighbors(&self, i: usize) -> &[usize] {
        &self.out_neighbors[i]
    }

    /// `ℳᵢ = ℳᵢⁱⁿ ∪ ℳᵢᵒᵘᵗ`, ascending.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let mut all: Vec<usize> = self.in_neighbors[i]
            .iter()
            .chain(self.out_neighbors[i].iter())
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    pub fn total_states(&self) -> usize {
        self.agents.iter().map(AgentModel::n_states).sum()
    }

    pub fn total_inputs(&self) -> usize {
        self.agents.iter().map(AgentModel::n_inputs).sum()
    }
}

fn validate_agent(i: usize, a: &AgentModel, all: &[AgentModel]) -> Result<()> {
    let n = a.a_self.nrows();
    let m = a.b.ncols();
    let check = |context, expected, actual| {
        if expected == actual {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                context,
                expected,
                actual,
            })
        }
    };
    check("A_ii columns", n, a.a_self.ncols())?;
    check("B rows", n, a.b.nrows())?;
    check("u_lo length", m, a.u_lo.len())?;
    check("u_hi length", m, a.u_hi.len())?;
    check("Q rows", n, a.q.nrows())?;
    check("Q columns", n, a.q.ncols())?;
    check("R rows", m, a.r.nrows())?;
    check("R columns", m, a.r.ncols())?;
    check("P rows", n, a.p.nrows())?;
    check("P columns", n, a.p.ncols())?;
    for (&j, blk) in &a.a_in {
        if j == i {
            return Err(Error::Topology(format!(
                "agent {i} lists itself as in-neighbor; use A_ii"
            )));
        }
        let other = all
            .get(j)
            .ok_or_else(|| Error::Topology(format!("agent {i} references unknown agent {j}")))?;
        check("A_ij rows", n, blk.nrows())?;
        check("A_ij columns", other.n_states(), blk.ncols())?;
    }
    for c in 0..m {
        if !(a.u_lo[c] < 0.0 && 0.0 < a.u_hi[c]) {
            return Err(Error::InvalidParameter(format!(
                "agent {i}: input box must contain the origin in its interior"
            )));
        }
    }
    if !is_symmetric(&a.q) || a.q.clone().cholesky().is_none() {
        return Err(Error::InvalidParameter(format!(
            "agent {i}: Q must be symmetric positive definite"
        )));
    }
    if !is_symmetric(&a.r) || a.r.clone().cholesky().is_none() {
        return Err(Error::InvalidParameter(format!(
            "agent {i}: R must be symmetric positive definite"
        )));
    }
    if !is_symmetric(&a.p) || a.p.clone().symmetric_eigenvalues().min() < -1e-12 {
        return Err(Error::InvalidParameter(format!(
            "agent {i}: P must be symmetric positive semi-definite"
        )));
    }
    Ok(())
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= 1e-12 * scale
}

/// Per-agent state vectors at a time index.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub time: usize,
    pub x: Vec<DVector<f64>>,
}

impl PlantState {
    pub fn zeros(net: &NetworkModel) -> Self {
        Self {
            time: 0,
            x: net
                .agents()
                .iter()
                .map(|a| DVector::zeros(a.n_states()))
                .collect(),
        }
    }
}

/// Advances the true plant by one sample.
pub fn plant_step(
    net: &NetworkModel,
    state: &PlantState,
    inputs: &[DVector<f64>],
) -> Result<PlantState> {
    check_len("plant state agents", net.len(), state.x.len())?;
    check_len("plant input agents", net.len(), inputs.len())?;
    for (i, a) in net.agents().iter().enumerate() {
        check_len("plant state", a.n_states(), state.x[i].len())?;
        check_len("plant input", a.n_inputs(), inputs[i].len())?;
    }
    let x = net
        .agents()
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut next = &a.a_self * &state.x[i] + &a.b * &inputs[i];
            for &j in net.in_neighbors(i) {
                next += &a.a_in[&j] * &state.x[j];
            }
            next
        })
        .collect();
    Ok(PlantState {
        time: state.time + 1,
        x,
    })
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}

/// Physical and controller parameters of the chain-of-masses benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainParams {
    pub masses: usize,
    /// kg
    pub mass: f64,
    /// N/m
    pub stiffness: f64,
    /// N·s/m
    pub damping: f64,
    /// s
    pub sample_time: f64,
    /// N, symmetric box `|u| ≤ u_max`
    pub u_max: f64,
    pub q_diag: [f64; 2],
    pub r: f64,
    pub p: [[f64; 2]; 2],
}

impl Default for ChainParams {
    fn default() -> Self {
        Self {
            masses: 10,
            mass: 1.0,
            stiffness: 3.0,
            damping: 3.0,
            sample_time: 0.2,
            u_max: 1.0,
            q_diag: [10.0, 10.0],
            r: 1.0,
            p: [[0.0; 2]; 2],
        }
    }
}

/// Forward-Euler discretization of a spring-damper chain.
///
/// Mass `i` obeys `m ÿ_i = u_i + Σ_{j ∈ {i-1, i+1}} k (y_j - y_i) + d (ẏ_j - ẏ_i)`;
/// the end masses have a single neighbor and are not attached to walls.
/// State is `(position, velocity)`.
pub fn build_chain_of_masses(params: &ChainParams) -> Result<NetworkModel> {
    let ChainParams {
        masses,
        mass,
        stiffness: k,
        damping: d,
        sample_time: t,
        u_max,
        ..
    } = *params;
    if masses < 2 {
        return Err(Error::InvalidParameter(
            "chain needs at least 2 masses".into(),
        ));
    }
    if !(mass > 0.0 && t > 0.0 && u_max > 0.0) {
        return Err(Error::InvalidParameter(
            "mass, sample time and input bound must be positive".into(),
        ));
    }
    if !(k >= 0.0 && d >= 0.0) {
        return Err(Error::InvalidParameter(
            "stiffness and damping must be non-negative".into(),
        ));
    }
    let coupling = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, t * k / mass, t * d / mass]);
    let agents = (0..masses)
        .map(|i| {
            let mut a_in = BTreeMap::new();
            if i > 0 {
                a_in.insert(i - 1, coupling.clone());
            }
            if i + 1 < masses {
                a_in.insert(i + 1, coupling.clone());
            }
            let links = a_in.len() as f64;
            let a_self = DMatrix::from_row_slice(
                2,
                2,
                &[1.0, t, -t * links * k / mass, 1.0 - t * links * d / mass],
            );
            AgentModel {
                a_self,
                b: DMatrix::from_row_slice(2, 1, &[0.0, t / mass]),
                a_in,
                u_lo: DVector::from_element(1, -u_max),
                u_hi: DVector::from_element(1, u_max),
                q: DMatrix::from_diagonal(&DVector::from_row_slice(&params.q_diag)),
                r: DMatrix::from_element(1, 1, params.r),
                p: DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        params.p[0][0],
                        params.p[0][1],
                        params.p[1][0],
                        params.p[1][1],
                    ],
                ),
            }
        })
        .collect();
    NetworkModel::new(agents)
}

/// Shape of randomly generated test networks.
#[derive(Debug, Clone)]
pub struct RandomNetworkConfig {
    pub agents: usize,
    pub max_states: usize,
    pub max_inputs: usize,
    /// Probability that a directed edge `j → i` exists.
    pub edge_probability: f64,
    pub coupling_scale: f64,
}

impl Default for RandomNetworkConfig {
    fn default() -> Self {
        Self {
            agents: 3,
            max_states: 2,
            max_inputs: 2,
            edge_probability: 0.6,
            coupling_scale: 0.3,
        }
    }
}

/// Random network with mildly unstable local dynamics, random couplings and
/// diagonal-dominant weights. Every agent is connected to at least one other agent.
pub fn random_network<R: Rng + ?Sized>(rng: &mut R, cfg: &RandomNetworkConfig) -> NetworkModel {
    let m = cfg.agents;
    let dims: Vec<(usize, usize)> = (0..m)
        .map(|_| {
            (
                rng.random_range(1..=cfg.max_states),
                rng.random_range(1..=cfg.max_inputs),
            )
        })
        .collect();
    let mut edges = vec![vec![false; m]; m];
    for (i, row) in edges.iter_mut().enumerate() {
        for (j, e) in row.iter_mut().enumerate() {
            *e = i != j && rng.random_bool(cfg.edge_probability);
        }
    }
    if m > 1 {
        for i in 0..m {
            if !(0..m).any(|j| edges[i][j] || edges[j][i]) {
                edges[i][(i + 1) % m] = true;
            }
        }
    }
    let rand_mat = |rows: usize, cols: usize, scale: f64, rng: &mut R| {
        DMatrix::from_fn(rows, cols, |_, _| scale * rng.random_range(-1.0..1.0))
    };
    let agents = (0..m)
        .map(|i| {
            let (n, nu) = dims[i];
            let a_self = DMatrix::identity(n, n) + rand_mat(n, n, 0.3, rng);
            let b = rand_mat(n, nu, 0.5, rng)
                + DMatrix::from_fn(n, nu, |r, c| if r % nu == c { 0.8 } else { 0.0 });
            let a_in = (0..m)
                .filter(|&j| edges[i][j])
                .map(|j| {
                    let mut blk = rand_mat(n, dims[j].0, cfg.coupling_scale, rng);
                    blk[(0, 0)] += cfg.coupling_scale;
                    (j, blk)
                })
                .collect();
            let spd = |dim: usize, rng: &mut R| {
                let l = DMatrix::from_fn(dim, dim, |_, _| 0.3 * rng.random_range(-1.0..1.0));
                &l * l.transpose()
                    + DMatrix::from_diagonal(&DVector::from_fn(dim, |_, _| {
                        rng.random_range(0.5..2.0)
                    }))
            };
            let q = spd(n, rng);
            let r = spd(nu, rng);
            let p = if rng.random_bool(0.5) {
                DMatrix::zeros(n, n)
            } else {
                let l = rand_mat(n, n, 0.5, rng);
                &l * l.transpose()
            };
            AgentModel {
                a_self,
                b,
                a_in,
                u_lo: DVector::from_fn(nu, |_, _| -rng.random_range(0.3..1.0)),
                u_hi: DVector::from_fn(nu, |_, _| rng.random_range(0.3..1.0)),
                q,
                r,
                p,
            }
        })
        .collect();
    NetworkModel::new(agents).expect("random network is valid by construction")
}

/// Uniform random initial state in the box `|x| ≤ scale`.
pub fn random_state<R: Rng + ?Sized>(rng: &mut R, net: &NetworkModel, scale: f64) -> PlantState {
    PlantState {
        time: 0,
        x: net
            .agents()
            .iter()
            .map(|a| DVector::from_fn(a.n_states(), |_, _| rng.random_range(-scale..=scale)))
            .collect(),
    }
}
