//! Per-agent blocks of the partially separable MPC QP
//!
//! ```text
//! min  Σ_i ½ z_iᵀ H_i z_i
//! s.t. C_iᴱ z_i = b_iᴱ,   C_iᴵ z_i ≤ b_iᴵ,   Σ_i C_iᶜ z_i = 0
//! ```
//!
//! Variable layout per agent: `z_i = [x_i⁰ … x_i^{N-1}, x_iᴺ, u_i⁰ … u_i^{N-1}, v_i]`, where the
//! copy block `v_i` holds, for each in-neighbor `j` in ascending order and each `k = 0..N-1`,
//! the copy `v_jiᵏ` of `x_jᵏ`.
//!
//! Coupling rows are ordered edge-major: for each receiving agent `i` (ascending), each
//! in-neighbor `j` (ascending), each `k`, each state component of `j`, one row
//! `x_jᵏ[c] - v_jiᵏ[c] = 0`. The owner `j` carries `+1`, the copier `i` carries `-1`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{check_len, NetworkModel, PlantState};
use crate::oracle::DenseQp;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CopyBlock {
    /// In-neighbor whose states are copied.
    pub from: usize,
    pub offset: usize,
    pub n_states: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableLayout {
    pub horizon: usize,
    pub n_states: usize,
    pub n_inputs: usize,
    pub copies: Vec<CopyBlock>,
    len: usize,
}

impl VariableLayout {
    pub fn new(net: &NetworkModel, agent: usize, horizon: usize) -> Self {
        let a = net.agent(agent);
        let (n, m) = (a.n_states(), a.n_inputs());
        let mut offset = (horizon + 1) * n + horizon * m;
        let copies = net
            .in_neighbors(agent)
            .iter()
            .map(|&j| {
                let nj = net.agent(j).n_states();
                let blk = CopyBlock {
                    from: j,
                    offset,
                    n_states: nj,
                };
                offset += horizon * nj;
                blk
            })
            .collect();
        Self {
            horizon,
            n_states: n,
            n_inputs: m,
            copies,
            len: offset,
        }
    }

    /// `n_zi = (N+1) n_i + N (m_i + v_i)`
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// State `x_iᵏ` for `k = 0..=N` (`k = N` is the terminal block).
    pub fn x(&self, k: usize) -> Range<usize> {
        let start = k * self.n_states;
        start..start + self.n_states
    }

    pub fn x_block(&self) -> Range<usize> {
        0..self.horizon * self.n_states
    }

    pub fn u(&self, k: usize) -> Range<usize> {
        let start = (self.horizon + 1) * self.n_states + k * self.n_inputs;
        start..start + self.n_inputs
    }

    /// Copy `v_jiᵏ` for the `pos`-th in-neighbor.
    pub fn v(&self, pos: usize, k: usize) -> Range<usize> {
        let blk = &self.copies[pos];
        let start = blk.offset + k * blk.n_states;
        start..start + blk.n_states
    }

    pub fn copy_position(&self, from: usize) -> Option<usize> {
        self.copies.iter().position(|c| c.from == from)
    }

    /// Inequality row of the bound on `u_iᵏ[c]`; `upper` selects `u ≤ u_hi` over `-u ≤ -u_lo`.
    pub fn input_row(&self, k: usize, c: usize, upper: bool) -> usize {
        2 * (k * self.n_inputs + c) + usize::from(!upper)
    }

    /// Inverse of [`VariableLayout::input_row`]: `(k, c, upper)`.
    pub fn decode_input_row(&self, row: usize) -> (usize, usize, bool) {
        let pair = row / 2;
        (
            pair / self.n_inputs,
            pair % self.n_inputs,
            row.is_multiple_of(2),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CouplingRow {
    pub owner: usize,
    pub copier: usize,
    pub step: usize,
    pub component: usize,
}

/// Global ordering of the consensus rows and the rows touching each agent, `𝒞(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingIndex {
    pub rows: Vec<CouplingRow>,
    touching: Vec<Vec<usize>>,
}

impl CouplingIndex {
    pub fn new(net: &NetworkModel, horizon: usize) -> Self {
        let mut rows = Vec::new();
        let mut touching = vec![Vec::new(); net.len()];
        for copier in 0..net.len() {
            for &owner in net.in_neighbors(copier) {
                for step in 0..horizon {
                    for component in 0..net.agent(owner).n_states() {
                        touching[owner].push(rows.len());
                        touching[copier].push(rows.len());
                        rows.push(CouplingRow {
                            owner,
                            copier,
                            step,
                            component,
                        });
                    }
                }
            }
        }
        for t in &mut touching {
            t.sort_unstable();
        }
        Self { rows, touching }
    }

    pub fn n_c(&self) -> usize {
        self.rows.len()
    }

    /// `𝒞(i)`, ascending global row indices.
    pub fn touching(&self, agent: usize) -> &[usize] {
        &self.touching[agent]
    }

    /// Number of agents with a nonzero entry on each row (the diagonal of `Λ`).
    pub fn multiplicity(&self) -> Vec<usize> {
        let mut mult = vec![0; self.n_c()];
        for t in &self.touching {
            for &r in t {
                mult[r] += 1;
            }
        }
        mult
    }
}

/// One agent's block of the partially separable QP.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentQp {
    pub agent: usize,
    pub layout: VariableLayout,
    pub h: DMatrix<f64>,
    pub c_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub c_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    /// Global indices of the coupling rows touching this agent, ascending.
    pub coupling_rows: Vec<usize>,
    /// `C_iᶜ` restricted to `coupling_rows`.
    pub c_cpl: DMatrix<f64>,
    /// Number of agents sharing each row of `coupling_rows` (the local block `Λ_i`).
    pub coupling_multiplicity: Vec<f64>,
    pub n_c: usize,
}

impl AgentQp {
    pub fn n_z(&self) -> usize {
        self.layout.len()
    }

    pub fn n_eq(&self) -> usize {
        self.c_eq.nrows()
    }

    pub fn n_ineq(&self) -> usize {
        self.c_ineq.nrows()
    }

    /// Full `n_c × n_zi` coupling matrix.
    pub fn coupling_dense(&self) -> DMatrix<f64> {
        let mut full = DMatrix::zeros(self.n_c, self.n_z());
        for (local, &row) in self.coupling_rows.iter().enumerate() {
            full.set_row(row, &self.c_cpl.row(local));
        }
        full
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z))
    }

    /// Input sequence entry `u_iᵏ`.
    pub fn input(&self, z: &DVector<f64>, k: usize) -> DVector<f64> {
        z.rows_range(self.layout.u(k)).into_owned()
    }
}

/// Builds agent `agent`'s QP block for horizon `horizon` and initial state `x0`.
pub fn build_agent_qp(
    net: &NetworkModel,
    agent: usize,
    horizon: usize,
    x0: &DVector<f64>,
) -> Result<AgentQp> {
    let index = CouplingIndex::new(net, horizon);
    build_agent_qp_indexed(net, &index, agent, horizon, x0)
}

/// Builds every agent's QP block for a common horizon.
pub fn build_all(net: &NetworkModel, horizon: usize, x0: &PlantState) -> Result<Vec<AgentQp>> {
    check_len("initial state agents", net.len(), x0.x.len())?;
    let index = CouplingIndex::new(net, horizon);
    (0..net.len())
        .map(|i| build_agent_qp_indexed(net, &index, i, horizon, &x0.x[i]))
        .collect()
}

fn build_agent_qp_indexed(
    net: &NetworkModel,
    index: &CouplingIndex,
    agent: usize,
    horizon: usize,
    x0: &DVector<f64>,
) -> Result<AgentQp> {
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be at least 1".into()));
    }
    let model = net.agent(agent);
    check_len("initial state", model.n_states(), x0.len())?;
    let layout = VariableLayout::new(net, agent, horizon);
    let (n, m, nz) = (layout.n_states, layout.n_inputs, layout.len());

    let mut h = DMatrix::zeros(nz, nz);
    let q_own = &model.q / (net.out_neighbors(agent).len() as f64 + 1.0);
    for k in 0..horizon {
        let xr = layout.x(k);
        h.view_mut((xr.start, xr.start), (n, n)).copy_from(&q_own);
        let ur = layout.u(k);
        h.view_mut((ur.start, ur.start), (m, m)).copy_from(&model.r);
    }
    let xn = layout.x(horizon);
    h.view_mut((xn.start, xn.start), (n, n)).copy_from(&model.p);
    for (pos, blk) in layout.copies.iter().enumerate() {
        let q_copy = &net.agent(blk.from).q / (net.out_neighbors(blk.from).len() as f64 + 1.0);
        for k in 0..horizon {
            let vr = layout.v(pos, k);
            h.view_mut((vr.start, vr.start), (blk.n_states, blk.n_states))
                .copy_from(&q_copy);
        }
    }

    let n_eq = (horizon + 1) * n;
    let mut c_eq = DMatrix::zeros(n_eq, nz);
    let mut b_eq = DVector::zeros(n_eq);
    c_eq.view_mut((0, 0), (n, n)).fill_with_identity();
    b_eq.rows_mut(0, n).copy_from(x0);
    for k in 0..horizon {
        let row = (k + 1) * n;
        let next = layout.x(k + 1);
        c_eq.view_mut((row, next.start), (n, n))
            .fill_with_identity();
        let cur = layout.x(k);
        c_eq.view_mut((row, cur.start), (n, n))
            .copy_from(&(-&model.a_self));
        let ur = layout.u(k);
        c_eq.view_mut((row, ur.start), (n, m))
            .copy_from(&(-&model.b));
        for (pos, blk) in layout.copies.iter().enumerate() {
            let vr = layout.v(pos, k);
            c_eq.view_mut((row, vr.start), (n, blk.n_states))
                .copy_from(&(-&model.a_in[&blk.from]));
        }
    }

    let n_ineq = 2 * horizon * m;
    let mut c_ineq = DMatrix::zeros(n_ineq, nz);
    let mut b_ineq = DVector::zeros(n_ineq);
    for k in 0..horizon {
        for c in 0..m {
            let col = layout.u(k).start + c;
            let up = layout.input_row(k, c, true);
            let lo = layout.input_row(k, c, false);
            c_ineq[(up, col)] = 1.0;
            b_ineq[up] = model.u_hi[c];
            c_ineq[(lo, col)] = -1.0;
            b_ineq[lo] = -model.u_lo[c];
        }
    }

    let coupling_rows = index.touching(agent).to_vec();
    let multiplicity = index.multiplicity();
    let coupling_multiplicity = coupling_rows
        .iter()
        .map(|&r| multiplicity[r] as f64)
        .collect();
    let mut c_cpl = DMatrix::zeros(coupling_rows.len(), nz);
    for (local, &g) in coupling_rows.iter().enumerate() {
        let row = index.rows[g];
        if row.owner == agent {
            c_cpl[(local, layout.x(row.step).start + row.component)] = 1.0;
        } else {
            let pos = layout
                .copy_position(row.owner)
                .expect("coupling row references a known in-neighbor");
            c_cpl[(local, layout.v(pos, row.step).start + row.component)] = -1.0;
        }
    }

    Ok(AgentQp {
        agent,
        layout,
        h,
        c_eq,
        b_eq,
        c_ineq,
        b_ineq,
        coupling_rows,
        c_cpl,
        coupling_multiplicity,
        n_c: index.n_c(),
    })
}

/// Replaces the initial-condition right-hand side for the next MPC sample.
pub fn update_initial_state(qp: &mut AgentQp, x0: &DVector<f64>) -> Result<()> {
    check_len("initial state", qp.layout.n_states, x0.len())?;
    qp.b_eq.rows_mut(0, x0.len()).copy_from(x0);
    Ok(())
}

/// Stacks all agent blocks into one dense QP with the coupling rows folded into the
/// equality block (agent equalities first, then the `n_c` coupling rows).
pub fn stack_global(qps: &[AgentQp]) -> Result<DenseQp> {
    let n_c = qps.first().map_or(0, |q| q.n_c);
    if let Some(bad) = qps.iter().find(|q| q.n_c != n_c) {
        return Err(Error::DimensionMismatch {
            context: "coupling row count",
            expected: n_c,
            actual: bad.n_c,
        });
    }
    let nz: usize = qps.iter().map(AgentQp::n_z).sum();
    let ne: usize = qps.iter().map(AgentQp::n_eq).sum();
    let ni: usize = qps.iter().map(AgentQp::n_ineq).sum();
    let mut h = DMatrix::zeros(nz, nz);
    let mut a_eq = DMatrix::zeros(ne + n_c, nz);
    let mut b_eq = DVector::zeros(ne + n_c);
    let mut c_ineq = DMatrix::zeros(ni, nz);
    let mut b_ineq = DVector::zeros(ni);
    let mut offsets = Vec::with_capacity(qps.len() + 1);
    let (mut oz, mut oe, mut oi) = (0, 0, 0);
    for qp in qps {
        offsets.push(oz);
        let (z, e, i) = (qp.n_z(), qp.n_eq(), qp.n_ineq());
        h.view_mut((oz, oz), (z, z)).copy_from(&qp.h);
        a_eq.view_mut((oe, oz), (e, z)).copy_from(&qp.c_eq);
        b_eq.rows_mut(oe, e).copy_from(&qp.b_eq);
        c_ineq.view_mut((oi, oz), (i, z)).copy_from(&qp.c_ineq);
        b_ineq.rows_mut(oi, i).copy_from(&qp.b_ineq);
        for (local, &row) in qp.coupling_rows.iter().enumerate() {
            for c in 0..z {
                a_eq[(ne + row, oz + c)] += qp.c_cpl[(local, c)];
            }
        }
        oz += z;
        oe += e;
        oi += i;
    }
    offsets.push(oz);
    Ok(DenseQp {
        h,
        q: DVector::zeros(nz),
        a_eq,
        b_eq,
        c_ineq,
        b_ineq,
        offsets,
    })
}

/// Problem dimensions `(n_z, equality rows, inequality rows, coupling rows)`.
pub fn dimensions(qps: &[AgentQp]) -> (usize, usize, usize, usize) {
    (
        qps.iter().map(AgentQp::n_z).sum(),
        qps.iter().map(AgentQp::n_eq).sum(),
        qps.iter().map(AgentQp::n_ineq).sum(),
        qps.first().map_or(0, |q| q.n_c),
    )
}
