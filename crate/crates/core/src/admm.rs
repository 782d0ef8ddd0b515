//! Consensus ADMM over the same agent QPs and fabric.
//!
//! Per iteration: local QPs against the current averages, one exchange of copies
//! to their owners, one exchange of averages back to the copiers, the dual ascent
//! and a global convergence-flag round. No global floats are sent.

use nalgebra::{DMatrix, DVector};

use crate::asm::{asm_solve_linear, ActiveSet, AsmConfig, FactorCache};
use crate::error::{Error, Result};
use crate::fabric::{CommLedger, Message, Phase, SimFabric, Transport};
use crate::qp::AgentQp;

/// Stopping tolerances `(ε_r, ε_d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdmmPreset {
    Admm1,
    Admm2,
}

impl AdmmPreset {
    pub fn tolerances(self) -> (f64, f64) {
        match self {
            Self::Admm1 => (1e-6, 1e-3),
            Self::Admm2 => (1e-4, 1e-2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Admm1 => "admm1",
            Self::Admm2 => "admm2",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmConfig {
    pub rho: f64,
    pub eps_r: f64,
    pub eps_d: f64,
    pub max_iter: usize,
    /// Settings of the local single-agent active-set solves.
    pub local: AsmConfig,
}

impl AdmmConfig {
    pub fn preset(preset: AdmmPreset, rho: f64) -> Self {
        let (eps_r, eps_d) = preset.tolerances();
        Self {
            rho,
            eps_r,
            eps_d,
            max_iter: 20_000,
            local: AsmConfig::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "penalty must be positive, got {}",
                self.rho
            )));
        }
        if !(self.eps_r > 0.0) || !(self.eps_d > 0.0) {
            return Err(Error::InvalidParameter(
                "ADMM tolerances must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self::preset(AdmmPreset::Admm1, 1.0)
    }
}

/// Local QP `min zᵀHz + λᵀCz + ρ/2 ‖C(z − z̄)‖²` as a coupling-free single-agent problem
/// with Hessian `2H + ρCᵀC`. Keeps its factor cache and active set between calls.
#[derive(Debug, Clone)]
pub struct LocalSolver {
    qp: AgentQp,
    c_cpl: DMatrix<f64>,
    ctc: DMatrix<f64>,
    rho: f64,
    cache: FactorCache,
    active: ActiveSet,
    fabric: SimFabric,
}

impl LocalSolver {
    pub fn new(qp: &AgentQp, rho: f64) -> Self {
        let ctc = qp.c_cpl.transpose() * &qp.c_cpl;
        let mut local = qp.clone();
        local.agent = 0;
        local.h = 2.0 * &qp.h + rho * &ctc;
        local.coupling_rows.clear();
        local.coupling_multiplicity.clear();
        local.c_cpl = DMatrix::zeros(0, qp.n_z());
        local.n_c = 0;
        Self {
            qp: local,
            c_cpl: qp.c_cpl.clone(),
            ctc,
            rho,
            cache: FactorCache::new(1),
            active: ActiveSet::empty(1),
            fabric: SimFabric::new(vec![Vec::new()]),
        }
    }

    /// Refreshes the initial-condition rows after the plant moved.
    pub fn set_equalities(&mut self, qp: &AgentQp) {
        self.qp.b_eq.copy_from(&qp.b_eq);
    }

    /// Shifts the local active set one step for the next sample.
    pub fn shift_active(&mut self) {
        self.active = self.active.shifted(std::slice::from_ref(&self.qp));
    }

    pub fn active(&self) -> &[usize] {
        &self.active.rows[0]
    }

    pub fn solve(
        &mut self,
        z_bar: &DVector<f64>,
        lambda: &DVector<f64>,
        cfg: &AsmConfig,
    ) -> Result<DVector<f64>> {
        let mut q = -self.rho * (&self.ctc * z_bar);
        if !lambda.is_empty() {
            q += self.c_cpl.transpose() * lambda;
        }
        let sol = asm_solve_linear(
            std::slice::from_ref(&self.qp),
            std::slice::from_ref(&q),
            &self.active,
            cfg,
            &mut self.cache,
            &mut self.fabric,
        )?;
        self.active = sol.active;
        Ok(sol.z.into_iter().next().expect("one agent"))
    }
}

/// One-off local ADMM solve.
pub fn admm_local_qp(
    qp: &AgentQp,
    z_bar: &DVector<f64>,
    lambda: &DVector<f64>,
    rho: f64,
) -> Result<DVector<f64>> {
    if !(rho > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "penalty must be positive, got {rho}"
        )));
    }
    LocalSolver::new(qp, rho).solve(z_bar, lambda, &AsmConfig::default())
}

/// Agents holding a copy of `owner`'s states, with the copy's position in their layout.
fn copiers(qps: &[AgentQp], owner: usize) -> Vec<(usize, usize)> {
    qps.iter()
        .enumerate()
        .filter_map(|(j, qp)| qp.layout.copy_position(owner).map(|pos| (j, pos)))
        .collect()
}

fn copy_trajectory(qp: &AgentQp, z: &DVector<f64>, pos: usize) -> Vec<f64> {
    (0..qp.layout.horizon)
        .flat_map(|k| {
            z.rows_range(qp.layout.v(pos, k))
                .iter()
                .copied()
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Forms `x̄_i = Σ_{j ∈ out(i)} (x_i + v_ij) / (2|out(i)|)` at every owner and returns
/// `z̄_i` with the state block replaced by `x̄_i` and each copy block by the owner's `x̄_j`.
/// Charges `2 n_c` local floats.
pub fn admm_average<T: Transport>(
    qps: &[AgentQp],
    z: &[DVector<f64>],
    fabric: &mut T,
) -> Result<Vec<DVector<f64>>> {
    let m = qps.len();
    let mut up = Vec::new();
    for (j, qp) in qps.iter().enumerate() {
        for (pos, blk) in qp.layout.copies.iter().enumerate() {
            up.push(Message {
                from: j,
                to: blk.from,
                payload: copy_trajectory(qp, &z[j], pos),
            });
        }
    }
    let traj_len = |i: usize| qps[i].layout.horizon * qps[i].layout.n_states;
    let copies_in = fabric.neighbor_exchange(Phase::Admm, up, &|_, to| traj_len(to))?;

    let mut x_bar = Vec::with_capacity(m);
    for (i, qp) in qps.iter().enumerate() {
        let x = z[i].rows_range(qp.layout.x_block()).into_owned();
        let inbox = &copies_in[i];
        if inbox.is_empty() {
            x_bar.push(x);
            continue;
        }
        let mut sum = DVector::zeros(x.len());
        for msg in inbox {
            sum += &x + DVector::from_column_slice(&msg.payload);
        }
        x_bar.push(sum / (2.0 * inbox.len() as f64));
    }

    let mut down = Vec::new();
    for (i, xb) in x_bar.iter().enumerate() {
        for (j, _) in copiers(qps, i) {
            down.push(Message {
                from: i,
                to: j,
                payload: xb.iter().copied().collect(),
            });
        }
    }
    let averages_in = fabric.neighbor_exchange(Phase::Admm, down, &|from, _| traj_len(from))?;

    Ok(qps
        .iter()
        .enumerate()
        .map(|(i, qp)| {
            let mut zb = z[i].clone();
            zb.rows_range_mut(qp.layout.x_block()).copy_from(&x_bar[i]);
            for msg in &averages_in[i] {
                let pos = qp
                    .layout
                    .copy_position(msg.from)
                    .expect("averages arrive only from in-neighbors");
                let n = qp.layout.copies[pos].n_states;
                for k in 0..qp.layout.horizon {
                    zb.rows_range_mut(qp.layout.v(pos, k))
                        .copy_from_slice(&msg.payload[k * n..(k + 1) * n]);
                }
            }
            zb
        })
        .collect())
}

/// `λ⁺ = λ + ρ C(z − z̄)`
pub fn admm_dual_update(
    qp: &AgentQp,
    z: &DVector<f64>,
    z_bar: &DVector<f64>,
    lambda: &DVector<f64>,
    rho: f64,
) -> DVector<f64> {
    if lambda.is_empty() {
        return lambda.clone();
    }
    lambda + rho * (&qp.c_cpl * (z - z_bar))
}

/// Per-agent test of `‖C(z − z̄)‖_∞ ≤ ε_r min(max(‖Cz‖_∞, ‖Cz̄‖_∞), 1)` and
/// `‖ρ C(z⁺ − z)‖_∞ ≤ ε_d min(‖λ‖_∞, 1)`.
#[allow(clippy::too_many_arguments)]
pub fn admm_agent_converged(
    qp: &AgentQp,
    z_new: &DVector<f64>,
    z_old: &DVector<f64>,
    z_bar: &DVector<f64>,
    lambda: &DVector<f64>,
    rho: f64,
    eps_r: f64,
    eps_d: f64,
) -> bool {
    if qp.coupling_rows.is_empty() {
        return true;
    }
    let c = &qp.c_cpl;
    let cz = c * z_new;
    let czb = c * z_bar;
    let primal = (&cz - &czb).amax();
    let dual = rho * (c * (z_new - z_old)).amax();
    primal <= eps_r * cz.amax().max(czb.amax()).min(1.0) && dual <= eps_d * lambda.amax().min(1.0)
}

/// Aggregates the per-agent tests through the fabric (`2M` global booleans).
pub fn admm_converged<T: Transport>(flags: &[bool], fabric: &mut T) -> Result<bool> {
    Ok(fabric.global_flags(Phase::Admm, flags)?)
}

/// Shifts every trajectory in `z` one step earlier with zero padding at the end.
pub fn shift_decision(qp: &AgentQp, z: &DVector<f64>) -> DVector<f64> {
    let l = &qp.layout;
    let n_h = l.horizon;
    let mut out = DVector::zeros(z.len());
    for k in 0..n_h {
        out.rows_range_mut(l.x(k))
            .copy_from(&z.rows_range(l.x(k + 1)));
    }
    for k in 0..n_h.saturating_sub(1) {
        out.rows_range_mut(l.u(k))
            .copy_from(&z.rows_range(l.u(k + 1)));
        for pos in 0..l.copies.len() {
            out.rows_range_mut(l.v(pos, k))
                .copy_from(&z.rows_range(l.v(pos, k + 1)));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct AdmmState {
    pub z: Vec<DVector<f64>>,
    pub z_bar: Vec<DVector<f64>>,
    pub lambda: Vec<DVector<f64>>,
    pub rho: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct AdmmSolution {
    pub state: AdmmState,
    /// Traffic of this solve only.
    pub ledger: CommLedger,
}

/// Distributed ADMM solver that keeps per-agent local solvers across samples.
#[derive(Debug, Clone)]
pub struct Admm {
    cfg: AdmmConfig,
    locals: Vec<LocalSolver>,
    last_z_bar: Option<Vec<DVector<f64>>>,
}

impl Admm {
    pub fn new(qps: &[AgentQp], cfg: AdmmConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            locals: qps.iter().map(|qp| LocalSolver::new(qp, cfg.rho)).collect(),
            cfg,
            last_z_bar: None,
        })
    }

    pub fn config(&self) -> &AdmmConfig {
        &self.cfg
    }

    /// Solves the current QPs; `z̄⁰` is the previous solve's `z̄` shifted by one step,
    /// or zero on the first call. `λ⁰ = 0`.
    pub fn solve<T: Transport>(&mut self, qps: &[AgentQp], fabric: &mut T) -> Result<AdmmSolution> {
        crate::model::check_len("ADMM agents", self.locals.len(), qps.len())?;
        let start = *fabric.ledger();
        let mut z_bar: Vec<DVector<f64>> = match self.last_z_bar.take() {
            Some(prev) => {
                for l in &mut self.locals {
                    l.shift_active();
                }
                qps.iter()
                    .zip(&prev)
                    .map(|(qp, zb)| shift_decision(qp, zb))
                    .collect()
            }
            None => qps.iter().map(|qp| DVector::zeros(qp.n_z())).collect(),
        };
        for (l, qp) in self.locals.iter_mut().zip(qps) {
            l.set_equalities(qp);
        }
        let mut lambda: Vec<DVector<f64>> = qps
            .iter()
            .map(|qp| DVector::zeros(qp.coupling_rows.len()))
            .collect();
        let mut z_prev = z_bar.clone();
        let rho = self.cfg.rho;
        for iter in 1..=self.cfg.max_iter {
            let z = self
                .locals
                .iter_mut()
                .zip(&z_bar)
                .zip(&lambda)
                .map(|((l, zb), lam)| l.solve(zb, lam, &self.cfg.local))
                .collect::<Result<Vec<_>>>()?;
            z_bar = admm_average(qps, &z, fabric)?;
            for (i, qp) in qps.iter().enumerate() {
                lambda[i] = admm_dual_update(qp, &z[i], &z_bar[i], &lambda[i], rho);
            }
            let flags: Vec<bool> = qps
                .iter()
                .enumerate()
                .map(|(i, qp)| {
                    admm_agent_converged(
                        qp,
                        &z[i],
                        &z_prev[i],
                        &z_bar[i],
                        &lambda[i],
                        rho,
                        self.cfg.eps_r,
                        self.cfg.eps_d,
                    )
                })
                .collect();
            let done = admm_converged(&flags, fabric)?;
            if done {
                self.last_z_bar = Some(z_bar.clone());
                return Ok(AdmmSolution {
                    state: AdmmState {
                        z,
                        z_bar,
                        lambda,
                        rho,
                        iterations: iter,
                    },
                    ledger: fabric.ledger().since(&start),
                });
            }
            z_prev = z;
        }
        Err(Error::AdmmMaxIter {
            iterations: self.cfg.max_iter,
        })
    }
}
