//! Distributed primal active-set method.
//!
//! Every iterate after initialization satisfies all equality, inequality and
//! coupling rows. Steps solve the working-set QP by condensing plus DCG; the
//! global step length and the dual test are single scalar min-reductions.

use nalgebra::DVector;

use crate::condense::{
    backsubstitute, condense_factored, recover_duals, Duals, NullSpace, WorkingConstraints,
};
use crate::dcg::dcg_solve;
use crate::error::{Error, Result};
use crate::fabric::{CommLedger, Phase, Transport};
use crate::qp::AgentQp;

const VIOLATION_TOL: f64 = 1e-9;
const DIRECTION_TOL: f64 = 1e-12;
const DUAL_TOL: f64 = 1e-8;
const DEGENERATE_STEP: f64 = 1e-12;

/// Per-agent ordered lists of active inequality rows.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ActiveSet {
    pub rows: Vec<Vec<usize>>,
}

impl ActiveSet {
    pub fn empty(agents: usize) -> Self {
        Self {
            rows: vec![Vec::new(); agents],
        }
    }

    pub fn total(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn contains(&self, agent: usize, row: usize) -> bool {
        self.rows[agent].contains(&row)
    }

    /// Moves every input-bound row one step earlier; rows of step 0 are dropped.
    pub fn shifted(&self, qps: &[AgentQp]) -> Self {
        Self {
            rows: self
                .rows
                .iter()
                .zip(qps)
                .map(|(rows, qp)| {
                    rows.iter()
                        .filter_map(|&row| {
                            let (k, c, upper) = qp.layout.decode_input_row(row);
                            (k > 0).then(|| qp.layout.input_row(k - 1, c, upper))
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsmConfig {
    /// DCG tolerance on `‖r_i‖_∞`.
    pub eps_dcg: f64,
    /// Step tolerance on `‖Δz_i‖_∞`.
    pub eps_step: f64,
    pub max_dcg_iter: usize,
    /// Initialization rounds; `None` allows one per inequality row plus one.
    pub max_init_rounds: Option<usize>,
    /// Outer iterations; `None` means ten per inequality row.
    pub max_outer: Option<usize>,
    /// Record primal violations and the objective after every iterate.
    pub record_trace: bool,
}

impl Default for AsmConfig {
    fn default() -> Self {
        Self {
            eps_dcg: 1e-7,
            eps_step: 1e-6,
            max_dcg_iter: 5000,
            max_init_rounds: None,
            max_outer: None,
            record_trace: false,
        }
    }
}

impl AsmConfig {
    fn validate(&self) -> Result<()> {
        if !(self.eps_dcg > 0.0) || !(self.eps_step > 0.0) {
            return Err(Error::InvalidParameter(
                "tolerances must be positive".into(),
            ));
        }
        if self.max_dcg_iter == 0 {
            return Err(Error::InvalidParameter(
                "DCG iteration limit must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsmPhase {
    Initializing,
    Stepping,
    CheckingDuals,
    Done,
}

#[derive(Debug, Clone)]
pub struct AsmState {
    pub z: Vec<DVector<f64>>,
    pub active: ActiveSet,
    pub outer: usize,
    /// Compressed coupling multipliers, warm start for the next DCG call.
    pub lambda: Vec<DVector<f64>>,
    pub phase: AsmPhase,
}

/// Primal violations and objective of one iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterateRecord {
    pub equality: f64,
    pub inequality: f64,
    pub coupling: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Default)]
pub struct AsmStats {
    pub outer_iterations: usize,
    /// DCG iterations spent finding the feasible initial point.
    pub dcg_feasible: usize,
    /// DCG iterations spent on active-set steps.
    pub dcg_updating: usize,
    pub init_rounds: usize,
    /// Traffic of the whole solve.
    pub ledger: CommLedger,
    /// `(agent, row, added)` for every working-set change after initialization.
    pub changes: Vec<(usize, usize, bool)>,
    /// First entry is the initial point, then one per step.
    pub trace: Vec<IterateRecord>,
}

impl AsmStats {
    pub fn dcg_iterations(&self) -> usize {
        self.dcg_feasible + self.dcg_updating
    }
}

#[derive(Debug, Clone)]
pub struct AsmSolution {
    pub z: Vec<DVector<f64>>,
    pub active: ActiveSet,
    /// Working-set multipliers at the optimum, aligned with `active`.
    pub duals: Vec<Duals>,
    pub lambda: Vec<DVector<f64>>,
    pub stats: AsmStats,
}

/// Null-space factors keyed by the working set they were computed for.
#[derive(Debug, Clone, Default)]
pub struct FactorCache {
    entries: Vec<Option<(Vec<usize>, NullSpace)>>,
}

impl FactorCache {
    pub fn new(agents: usize) -> Self {
        Self {
            entries: vec![None; agents],
        }
    }

    fn get(&mut self, qp: &AgentQp, active: &[usize]) -> Result<NullSpace> {
        self.ensure(qp, active)?;
        Ok(self.entries[qp.agent]
            .as_ref()
            .expect("just ensured")
            .1
            .clone())
    }

    /// Factors `active` unless it is the cached working set; fails on rank deficiency.
    fn ensure(&mut self, qp: &AgentQp, active: &[usize]) -> Result<()> {
        if self.entries.len() <= qp.agent {
            self.entries.resize(qp.agent + 1, None);
        }
        if matches!(&self.entries[qp.agent], Some((rows, _)) if rows == active) {
            return Ok(());
        }
        let work = WorkingConstraints::step(qp, active);
        let ns = NullSpace::factor(qp.agent, &qp.h, &work.c_work)?;
        self.entries[qp.agent] = Some((active.to_vec(), ns));
        Ok(())
    }
}

/// Primal violations of a set of agent iterates and the objective `Σ ½zᵀHz + qᵀz`.
pub fn iterate_record(qps: &[AgentQp], q: &[DVector<f64>], z: &[DVector<f64>]) -> IterateRecord {
    let n_c = qps.first().map_or(0, |qp| qp.n_c);
    let mut coupling = vec![0.0; n_c];
    let mut rec = IterateRecord {
        equality: 0.0,
        inequality: 0.0,
        coupling: 0.0,
        objective: 0.0,
    };
    for ((qp, zi), qi) in qps.iter().zip(z).zip(q) {
        if qp.n_eq() > 0 {
            rec.equality = rec.equality.max((&qp.c_eq * zi - &qp.b_eq).amax());
        }
        if qp.n_ineq() > 0 {
            rec.inequality = rec.inequality.max((&qp.c_ineq * zi - &qp.b_ineq).max());
        }
        if !qp.coupling_rows.is_empty() {
            let cz = &qp.c_cpl * zi;
            for (&row, v) in qp.coupling_rows.iter().zip(cz.iter()) {
                coupling[row] += v;
            }
        }
        rec.objective += qp.objective(zi) + qi.dot(zi);
    }
    rec.coupling = coupling.iter().fold(0.0, |m, v: &f64| m.max(v.abs()));
    rec.inequality = rec.inequality.max(0.0);
    rec
}

/// Largest step along `dz` keeping the inactive inequality rows satisfied.
/// Returns `(α_i, blocking row)`; the row is `None` when `α_i = 1`.
pub fn compute_step_length(
    z: &DVector<f64>,
    dz: &DVector<f64>,
    qp: &AgentQp,
    active: &[usize],
) -> Result<(f64, Option<usize>)> {
    let mut alpha = 1.0;
    let mut blocking = None;
    if qp.n_ineq() == 0 {
        return Ok((alpha, blocking));
    }
    let cz = &qp.c_ineq * z;
    let cdz = &qp.c_ineq * dz;
    for row in 0..qp.n_ineq() {
        if active.contains(&row) || cdz[row] <= DIRECTION_TOL {
            continue;
        }
        let slack = qp.b_ineq[row] - cz[row];
        if slack < -VIOLATION_TOL {
            return Err(Error::InfeasibleIterate {
                agent: qp.agent,
                row,
                violation: -slack,
            });
        }
        let ratio = slack.max(0.0) / cdz[row];
        if ratio < alpha {
            alpha = ratio;
            blocking = Some(row);
        }
    }
    Ok((alpha, blocking))
}

/// Drops rows that are out of range, duplicated or dependent on earlier rows.
fn repair_active(qps: &[AgentQp], warm: &ActiveSet, cache: &mut FactorCache) -> Result<ActiveSet> {
    let mut out = ActiveSet::empty(qps.len());
    for (i, qp) in qps.iter().enumerate() {
        let mut rows: Vec<usize> = Vec::new();
        for &row in warm.rows.get(i).map_or(&[][..], Vec::as_slice) {
            if row < qp.n_ineq() && !rows.contains(&row) {
                rows.push(row);
            }
        }
        loop {
            match cache.ensure(qp, &rows) {
                Ok(()) => break,
                Err(Error::RankDeficient { row, .. }) if row >= qp.n_eq() => {
                    rows.remove(row - qp.n_eq());
                }
                Err(e) => return Err(e),
            }
        }
        out.rows[i] = rows;
    }
    Ok(out)
}

struct InitResult {
    state: AsmState,
    rounds: usize,
    dcg_iterations: usize,
}

/// Iterates, coupling multipliers and DCG iterations of one working-set solve.
type WorkingSetSolution = (Vec<DVector<f64>>, Vec<DVector<f64>>, usize);

fn solve_working_set<T: Transport>(
    qps: &[AgentQp],
    q: &[DVector<f64>],
    active: &ActiveSet,
    lambda0: Vec<DVector<f64>>,
    cfg: &AsmConfig,
    cache: &mut FactorCache,
    fabric: &mut T,
) -> Result<WorkingSetSolution> {
    let mut cas = Vec::with_capacity(qps.len());
    for (i, qp) in qps.iter().enumerate() {
        let ns = cache.get(qp, &active.rows[i])?;
        let work = WorkingConstraints::absolute(qp, &active.rows[i]);
        cas.push(condense_factored(qp, ns, &work.d, &q[i], None));
    }
    let out = dcg_solve(&cas, lambda0, cfg.eps_dcg, cfg.max_dcg_iter, fabric)?;
    let z = cas
        .iter()
        .zip(&out.lambda)
        .map(|(ca, l)| backsubstitute(ca, l))
        .collect::<Result<Vec<_>>>()?;
    Ok((z, out.lambda, out.iterations))
}

fn initialize<T: Transport>(
    qps: &[AgentQp],
    q: &[DVector<f64>],
    warm: &ActiveSet,
    max_rounds: usize,
    cfg: &AsmConfig,
    cache: &mut FactorCache,
    fabric: &mut T,
) -> Result<InitResult> {
    let mut active = repair_active(qps, warm, cache)?;
    let mut dcg_iterations = 0;
    for round in 1..=max_rounds {
        let zeros: Vec<DVector<f64>> = qps
            .iter()
            .map(|qp| DVector::zeros(qp.coupling_rows.len()))
            .collect();
        let (z, lambda, iters) = solve_working_set(qps, q, &active, zeros, cfg, cache, fabric)?;
        dcg_iterations += iters;
        let mut flags = Vec::with_capacity(qps.len());
        let mut additions = Vec::with_capacity(qps.len());
        for (i, (qp, zi)) in qps.iter().zip(&z).enumerate() {
            let mut worst: Option<(usize, f64)> = None;
            if qp.n_ineq() > 0 {
                let viol = &qp.c_ineq * zi - &qp.b_ineq;
                for (row, v) in viol.iter().enumerate() {
                    if *v > VIOLATION_TOL
                        && !active.contains(i, row)
                        && worst.is_none_or(|(_, w)| *v > w)
                    {
                        worst = Some((row, *v));
                    }
                }
            }
            flags.push(worst.is_none());
            additions.push(worst.map(|(row, _)| row));
        }
        if fabric.global_flags(Phase::Init, &flags)? {
            return Ok(InitResult {
                state: AsmState {
                    z,
                    active,
                    outer: 0,
                    lambda,
                    phase: AsmPhase::Stepping,
                },
                rounds: round,
                dcg_iterations,
            });
        }
        for (i, add) in additions.into_iter().enumerate() {
            if let Some(row) = add {
                active.rows[i].push(row);
            }
        }
        active = repair_active(qps, &active, cache)?;
    }
    Err(Error::InfeasibleStart { rounds: max_rounds })
}

/// Finds a primal-feasible starting point from a warm active set: solves the
/// working-set QP in the absolute variable and adds each agent's most violated
/// row until no inequality is violated.
pub fn initialize_feasible<T: Transport>(
    qps: &[AgentQp],
    warm: &ActiveSet,
    fabric: &mut T,
    max_rounds: usize,
    cfg: &AsmConfig,
) -> Result<AsmState> {
    cfg.validate()?;
    let q: Vec<DVector<f64>> = qps.iter().map(|qp| DVector::zeros(qp.n_z())).collect();
    let mut cache = FactorCache::new(qps.len());
    Ok(initialize(qps, &q, warm, max_rounds, cfg, &mut cache, fabric)?.state)
}

/// Solves `min Σ ½ z_iᵀH_i z_i` subject to all agent and coupling rows.
pub fn asm_solve<T: Transport>(
    qps: &[AgentQp],
    warm: &ActiveSet,
    cfg: &AsmConfig,
    fabric: &mut T,
) -> Result<AsmSolution> {
    let q: Vec<DVector<f64>> = qps.iter().map(|qp| DVector::zeros(qp.n_z())).collect();
    let mut cache = FactorCache::new(qps.len());
    asm_solve_linear(qps, &q, warm, cfg, &mut cache, fabric)
}

/// [`asm_solve`] with linear cost terms `q_iᵀ z_i` and a caller-owned factor cache.
pub fn asm_solve_linear<T: Transport>(
    qps: &[AgentQp],
    q: &[DVector<f64>],
    warm: &ActiveSet,
    cfg: &AsmConfig,
    cache: &mut FactorCache,
    fabric: &mut T,
) -> Result<AsmSolution> {
    cfg.validate()?;
    crate::model::check_len("linear cost terms", qps.len(), q.len())?;
    if fabric.agents() != qps.len() {
        return Err(Error::DimensionMismatch {
            context: "fabric participants",
            expected: qps.len(),
            actual: fabric.agents(),
        });
    }
    let start = *fabric.ledger();
    let total_ineq: usize = qps.iter().map(AgentQp::n_ineq).sum();
    let max_rounds = cfg.max_init_rounds.unwrap_or(total_ineq + 1);
    let max_outer = cfg.max_outer.unwrap_or((10 * total_ineq).max(10));

    let init = initialize(qps, q, warm, max_rounds, cfg, cache, fabric)?;
    let mut stats = AsmStats {
        init_rounds: init.rounds,
        dcg_feasible: init.dcg_iterations,
        ..AsmStats::default()
    };
    let mut state = init.state;
    if cfg.record_trace {
        stats.trace.push(iterate_record(qps, q, &state.z));
    }

    loop {
        if state.outer >= max_outer {
            return Err(Error::OuterLimit {
                limit: max_outer,
                trace: stats.changes,
            });
        }
        state.phase = AsmPhase::Stepping;
        let mut cas = Vec::with_capacity(qps.len());
        let mut grads = Vec::with_capacity(qps.len());
        for (i, qp) in qps.iter().enumerate() {
            let ns = cache.get(qp, &state.active.rows[i])?;
            let g = &qp.h * &state.z[i] + &q[i];
            let d = DVector::zeros(qp.n_eq() + state.active.rows[i].len());
            let bias = &qp.c_cpl * &state.z[i];
            cas.push(condense_factored(qp, ns, &d, &g, Some(&bias)));
            grads.push(g);
        }
        let out = dcg_solve(
            &cas,
            std::mem::take(&mut state.lambda),
            cfg.eps_dcg,
            cfg.max_dcg_iter,
            fabric,
        )?;
        stats.dcg_updating += out.iterations;
        state.lambda = out.lambda;
        let dz = cas
            .iter()
            .zip(&state.lambda)
            .map(|(ca, l)| backsubstitute(ca, l))
            .collect::<Result<Vec<_>>>()?;
        let flags: Vec<bool> = dz.iter().map(|d| d.amax() < cfg.eps_step).collect();
        let stationary = fabric.global_flags(Phase::Asm, &flags)?;
        state.outer += 1;

        if stationary {
            state.phase = AsmPhase::CheckingDuals;
            let duals = qps
                .iter()
                .enumerate()
                .map(|(i, qp)| {
                    let work = WorkingConstraints::step(qp, &state.active.rows[i]);
                    recover_duals(qp, &work, &grads[i], &state.lambda[i])
                })
                .collect::<Result<Vec<_>>>()?;
            let local_min: Vec<(f64, Option<usize>)> = duals
                .iter()
                .zip(&state.active.rows)
                .map(|(d, rows)| {
                    let mut best = (f64::INFINITY, None);
                    for (k, (&g, &row)) in d.ineq.iter().zip(rows).enumerate() {
                        let better = g < best.0
                            || (g == best.0 && best.1.is_some_and(|b: usize| row < rows[b]));
                        if better {
                            best = (g, Some(k));
                        }
                    }
                    best
                })
                .collect();
            let mins: Vec<f64> = local_min.iter().map(|m| m.0).collect();
            let (gamma, agent) = fabric.global_min(Phase::Asm, &mins)?;
            if gamma >= -DUAL_TOL {
                state.phase = AsmPhase::Done;
                stats.outer_iterations = state.outer;
                stats.ledger = fabric.ledger().since(&start);
                return Ok(AsmSolution {
                    z: state.z,
                    active: state.active,
                    duals,
                    lambda: state.lambda,
                    stats,
                });
            }
            let k = local_min[agent]
                .1
                .expect("finite minimum comes from an active row");
            let row = state.active.rows[agent].remove(k);
            stats.changes.push((agent, row, false));
            if cfg.record_trace {
                stats.trace.push(iterate_record(qps, q, &state.z));
            }
            continue;
        }

        let mut alphas = Vec::with_capacity(qps.len());
        let mut blocking = Vec::with_capacity(qps.len());
        for (i, qp) in qps.iter().enumerate() {
            let (a, b) = compute_step_length(&state.z[i], &dz[i], qp, &state.active.rows[i])?;
            alphas.push(a);
            blocking.push(b);
        }
        let (alpha, agent) = fabric.global_min(Phase::Asm, &alphas)?;
        if alpha < 1.0 {
            if let Some(row) = blocking[agent] {
                state.active.rows[agent].push(row);
                stats.changes.push((agent, row, true));
            }
        }
        if alpha >= DEGENERATE_STEP {
            for (zi, d) in state.z.iter_mut().zip(&dz) {
                zi.axpy(alpha, d, 1.0);
            }
        }
        if cfg.record_trace {
            stats.trace.push(iterate_record(qps, q, &state.z));
        }
    }
}
