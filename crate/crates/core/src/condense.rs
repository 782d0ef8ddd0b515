//! Null-space condensing of an agent's equality-constrained step problem.
//!
//! With `Δz = Z v + Y w`, `C Z = 0` and `w = (C Y)⁻¹ d`, the agent contributes
//!
//! ```text
//! S_i = C̄ H̄⁻¹ C̄ᵀ,   s_i = b_i − C̄ H̄⁻¹ ḡ
//! H̄ = Zᵀ H Z,   ḡ = Zᵀ g + Zᵀ H Y w,   C̄ = Cᶜ Z,   b_i = Cᶜ Y w
//! ```
//!
//! to the coupling Schur system `(Σ S_i) λ = Σ s_i`. Everything is kept in the
//! compressed row space `𝒞(i)` of the coupling rows touching the agent.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::qp::AgentQp;

const RANK_TOL: f64 = 1e-10;
const PIVOT_TOL: f64 = 1e-12;

/// Working set `C_work = [C_eq; active inequality rows]` and its right-hand side.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingConstraints {
    pub c_work: DMatrix<f64>,
    pub d: DVector<f64>,
    /// Number of leading equality rows.
    pub n_eq: usize,
}

impl WorkingConstraints {
    /// Rows `[C_eq; C_ineq[active]]` with `d = 0`, as used for active-set steps.
    pub fn step(qp: &AgentQp, active: &[usize]) -> Self {
        let c_work = stack_rows(&qp.c_eq, &qp.c_ineq, active);
        let rows = c_work.nrows();
        Self {
            c_work,
            d: DVector::zeros(rows),
            n_eq: qp.n_eq(),
        }
    }

    /// Rows `[C_eq; C_ineq[active]]` with the original right-hand side, so the
    /// step problem solved from `z = 0` yields an absolute iterate.
    pub fn absolute(qp: &AgentQp, active: &[usize]) -> Self {
        Self::absolute_from(&qp.c_eq, &qp.b_eq, &qp.c_ineq, &qp.b_ineq, active)
    }

    pub(crate) fn absolute_from(
        c_eq: &DMatrix<f64>,
        b_eq: &DVector<f64>,
        c_ineq: &DMatrix<f64>,
        b_ineq: &DVector<f64>,
        active: &[usize],
    ) -> Self {
        let c_work = stack_rows(c_eq, c_ineq, active);
        let mut d = DVector::zeros(c_work.nrows());
        d.rows_mut(0, b_eq.len()).copy_from(b_eq);
        for (k, &row) in active.iter().enumerate() {
            d[b_eq.len() + k] = b_ineq[row];
        }
        Self {
            c_work,
            d,
            n_eq: c_eq.nrows(),
        }
    }

    pub fn rows(&self) -> usize {
        self.c_work.nrows()
    }
}

pub(crate) fn stack_rows(
    c_eq: &DMatrix<f64>,
    c_ineq: &DMatrix<f64>,
    active: &[usize],
) -> DMatrix<f64> {
    let ne = c_eq.nrows();
    let mut c = DMatrix::zeros(ne + active.len(), c_eq.ncols());
    c.rows_mut(0, ne).copy_from(c_eq);
    for (k, &row) in active.iter().enumerate() {
        c.set_row(ne + k, &c_ineq.row(row));
    }
    c
}

/// Orthonormal null-space basis of a working set plus the reduced-Hessian factor.
///
/// Depends only on `H` and the working-set matrix, so it is reusable for any
/// gradient and right-hand side.
#[derive(Clone)]
pub struct NullSpace {
    pub z: DMatrix<f64>,
    pub y: DMatrix<f64>,
    /// Upper-triangular `R` with `C_workᵀ = Y R`, so `C_work Y = Rᵀ`.
    r: DMatrix<f64>,
    h_red: Option<Cholesky<f64, Dyn>>,
    /// `H Y`, cached for `ḡ`.
    hy: DMatrix<f64>,
}

impl std::fmt::Debug for NullSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NullSpace")
            .field("n", &self.z.nrows())
            .field("free", &self.z.ncols())
            .field("rows", &self.y.ncols())
            .finish()
    }
}

impl NullSpace {
    pub fn factor(agent: usize, h: &DMatrix<f64>, c_work: &DMatrix<f64>) -> Result<Self> {
        let n = c_work.ncols();
        let rows = c_work.nrows();
        if rows == 0 {
            return Self::from_basis(
                agent,
                h,
                DMatrix::identity(n, n),
                DMatrix::zeros(n, 0),
                DMatrix::zeros(0, 0),
            );
        }
        let qr = c_work.transpose().qr();
        let r_full = qr.r();
        for k in 0..rows.min(n) {
            let row_norm = c_work.row(k).norm().max(f64::MIN_POSITIVE);
            if r_full[(k, k)].abs() <= RANK_TOL * row_norm {
                return Err(Error::RankDeficient { agent, row: k });
            }
        }
        if rows > n {
            return Err(Error::RankDeficient { agent, row: n });
        }
        let mut q_t = DMatrix::identity(n, n);
        qr.q_tr_mul(&mut q_t);
        let q = q_t.transpose();
        let y = q.columns(0, rows).into_owned();
        let z = q.columns(rows, n - rows).into_owned();
        Self::from_basis(agent, h, z, y, r_full)
    }

    fn from_basis(
        agent: usize,
        h: &DMatrix<f64>,
        z: DMatrix<f64>,
        y: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self> {
        let h_red = if z.ncols() == 0 {
            None
        } else {
            let hz = h * &z;
            let mut h_bar = z.transpose() * hz;
            symmetrize(&mut h_bar);
            Some(
                checked_cholesky(&h_bar)
                    .map_err(|pivot| Error::ReducedHessianIndefinite { agent, pivot })?,
            )
        };
        let hy = h * &y;
        Ok(Self { z, y, r, h_red, hy })
    }

    pub fn n_free(&self) -> usize {
        self.z.ncols()
    }

    /// `w = (C Y)⁻¹ d`
    pub fn particular(&self, d: &DVector<f64>) -> DVector<f64> {
        if d.is_empty() {
            return DVector::zeros(0);
        }
        self.r
            .tr_solve_upper_triangular(d)
            .expect("R has nonzero diagonal after the rank check")
    }

    /// `H̄⁻¹ b` for a matrix right-hand side with `n_free` rows.
    pub fn solve_reduced(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.h_red {
            Some(ch) => ch.solve(b),
            None => DMatrix::zeros(0, b.ncols()),
        }
    }

    pub fn solve_reduced_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        match &self.h_red {
            Some(ch) => ch.solve(b),
            None => DVector::zeros(0),
        }
    }
}

/// Cholesky factor with an explicit pivot floor; on failure returns the offending pivot.
pub(crate) fn checked_cholesky(m: &DMatrix<f64>) -> std::result::Result<Cholesky<f64, Dyn>, f64> {
    match m.clone().cholesky() {
        Some(ch) => {
            let min_pivot = ch
                .l_dirty()
                .diagonal()
                .iter()
                .map(|v| v * v)
                .fold(f64::INFINITY, f64::min);
            if min_pivot < PIVOT_TOL {
                Err(min_pivot)
            } else {
                Ok(ch)
            }
        }
        None => Err(m.clone().symmetric_eigenvalues().min()),
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Per-agent condensing products for one step problem.
#[derive(Debug, Clone)]
pub struct CondensedAgent {
    pub agent: usize,
    pub null_space: NullSpace,
    pub w: DVector<f64>,
    pub g_bar: DVector<f64>,
    /// `C̄ = Cᶜ Z`, compressed to `𝒞(i)`.
    pub c_bar: DMatrix<f64>,
    /// `𝒞(i)` as global coupling-row indices.
    pub coupling_rows: Vec<usize>,
    /// `Ŝ_i = I_𝒞(i) S_i I_𝒞(i)ᵀ`
    pub s_hat: DMatrix<f64>,
    /// `I_𝒞(i) s_i`
    pub s_local: DVector<f64>,
    /// Diagonal of `Λ_i`.
    pub multiplicity: Vec<f64>,
}

impl CondensedAgent {
    /// Expands `Ŝ_i` into the full `n_c × n_c` matrix `S_i`.
    pub fn s_full(&self, n_c: usize) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(n_c, n_c);
        for (a, &ra) in self.coupling_rows.iter().enumerate() {
            for (b, &rb) in self.coupling_rows.iter().enumerate() {
                s[(ra, rb)] = self.s_hat[(a, b)];
            }
        }
        s
    }

    pub fn s_vec_full(&self, n_c: usize) -> DVector<f64> {
        let mut s = DVector::zeros(n_c);
        for (a, &ra) in self.coupling_rows.iter().enumerate() {
            s[ra] = self.s_local[a];
        }
        s
    }
}

/// Condenses `qp` for working set `work` and gradient `g`.
pub fn condense(
    qp: &AgentQp,
    work: &WorkingConstraints,
    g: &DVector<f64>,
) -> Result<CondensedAgent> {
    let ns = NullSpace::factor(qp.agent, &qp.h, &work.c_work)?;
    Ok(condense_factored(qp, ns, &work.d, g, None))
}

/// Condensing with a precomputed null space. `coupling_bias`, when given, is added to
/// `b_i` (compressed); passing `C_iᶜ z_i` makes the step target exact consensus.
pub fn condense_factored(
    qp: &AgentQp,
    null_space: NullSpace,
    d: &DVector<f64>,
    g: &DVector<f64>,
    coupling_bias: Option<&DVector<f64>>,
) -> CondensedAgent {
    let w = null_space.particular(d);
    let z = &null_space.z;
    let g_bar = z.transpose() * (g + &null_space.hy * &w);
    let c_bar = &qp.c_cpl * z;
    let mut b = &qp.c_cpl * (&null_space.y * &w);
    if let Some(bias) = coupling_bias {
        b += bias;
    }
    let (s_hat, s_local) = if c_bar.nrows() == 0 {
        (DMatrix::zeros(0, 0), DVector::zeros(0))
    } else {
        let hinv_ct = null_space.solve_reduced(&c_bar.transpose());
        let mut s_hat = &c_bar * hinv_ct;
        symmetrize(&mut s_hat);
        let s_local = b - &c_bar * null_space.solve_reduced_vec(&g_bar);
        (s_hat, s_local)
    };
    CondensedAgent {
        agent: qp.agent,
        null_space,
        w,
        g_bar,
        c_bar,
        coupling_rows: qp.coupling_rows.clone(),
        s_hat,
        s_local,
        multiplicity: qp.coupling_multiplicity.clone(),
    }
}

/// `Δz = Z H̄⁻¹(−ḡ − C̄ᵀλ) + Y w` for the agent's compressed multipliers.
pub fn backsubstitute(ca: &CondensedAgent, lambda_local: &DVector<f64>) -> Result<DVector<f64>> {
    crate::model::check_len(
        "compressed multipliers",
        ca.coupling_rows.len(),
        lambda_local.len(),
    )?;
    let ns = &ca.null_space;
    let mut rhs = -&ca.g_bar;
    if !lambda_local.is_empty() {
        rhs -= ca.c_bar.transpose() * lambda_local;
    }
    let v = ns.solve_reduced_vec(&rhs);
    Ok(&ns.z * v + &ns.y * &ca.w)
}

/// Working-set multipliers split into the equality block and the active inequality rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Duals {
    pub eq: DVector<f64>,
    /// Aligned with the active-set ordering.
    pub ineq: DVector<f64>,
    /// `‖C_workᵀ γ − (−g − Cᶜᵀλ)‖_∞`
    pub residual: f64,
}

/// `γ = (C Cᵀ)⁻¹ C (−g − Cᶜᵀ λ)`
pub fn recover_duals(
    qp: &AgentQp,
    work: &WorkingConstraints,
    g: &DVector<f64>,
    lambda_local: &DVector<f64>,
) -> Result<Duals> {
    crate::model::check_len(
        "compressed multipliers",
        qp.coupling_rows.len(),
        lambda_local.len(),
    )?;
    let mut target = -g;
    if !lambda_local.is_empty() {
        target -= qp.c_cpl.transpose() * lambda_local;
    }
    working_duals(qp.agent, &work.c_work, work.n_eq, &target)
}

pub(crate) fn working_duals(
    agent: usize,
    c_work: &DMatrix<f64>,
    n_eq: usize,
    target: &DVector<f64>,
) -> Result<Duals> {
    let mut gram = c_work * c_work.transpose();
    symmetrize(&mut gram);
    let gamma = if gram.nrows() == 0 {
        DVector::zeros(0)
    } else {
        let ch = checked_cholesky(&gram).map_err(|pivot| Error::SingularGram { agent, pivot })?;
        ch.solve(&(c_work * target))
    };
    let residual = if gamma.is_empty() {
        target.amax()
    } else {
        (c_work.transpose() * &gamma - target).amax()
    };
    Ok(Duals {
        eq: gamma.rows(0, n_eq).into_owned(),
        ineq: gamma.rows(n_eq, gamma.len() - n_eq).into_owned(),
        residual,
    })
}
