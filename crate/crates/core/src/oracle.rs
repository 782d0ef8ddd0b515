//! Centralized reference solvers used to verify the distributed code path.
//!
//! Nothing here calls into `condense`, `dcg` or `asm`: the dense QP is solved by
//! eliminating the equalities with its own orthogonal factorization and running a
//! Goldfarb–Idnani dual active-set method on the reduced problem; the enumerator
//! solves one full KKT system per candidate working set.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{plant_step, NetworkModel, PlantState};
use crate::qp::{build_all, stack_global, update_initial_state};

/// `min ½ zᵀHz + qᵀz  s.t.  A z = b,  C z ≤ d` over the stacked variable.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub c_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    /// Start of each agent's block in the stacked variable, plus the total length.
    pub offsets: Vec<usize>,
}

impl DenseQp {
    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.q.dot(z)
    }

    /// Splits a stacked vector into per-agent blocks.
    pub fn split(&self, z: &DVector<f64>) -> Vec<DVector<f64>> {
        self.offsets
            .windows(2)
            .map(|w| z.rows(w[0], w[1] - w[0]).into_owned())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseSolution {
    pub z: DVector<f64>,
    pub eq_duals: DVector<f64>,
    pub ineq_duals: DVector<f64>,
    pub objective: f64,
}

/// Largest violation of the KKT conditions (stationarity, primal and dual
/// feasibility, complementarity) with `L = f + νᵀ(Az − b) + μᵀ(Cz − d)`.
pub fn kkt_residual(qp: &DenseQp, sol: &DenseSolution) -> f64 {
    let z = &sol.z;
    let mut grad = &qp.h * z + &qp.q;
    if qp.a_eq.nrows() > 0 {
        grad += qp.a_eq.transpose() * &sol.eq_duals;
    }
    if qp.c_ineq.nrows() > 0 {
        grad += qp.c_ineq.transpose() * &sol.ineq_duals;
    }
    let mut worst = grad.amax();
    if qp.a_eq.nrows() > 0 {
        worst = worst.max((&qp.a_eq * z - &qp.b_eq).amax());
    }
    if qp.c_ineq.nrows() > 0 {
        let slack = &qp.b_ineq - &qp.c_ineq * z;
        for (s, mu) in slack.iter().zip(sol.ineq_duals.iter()) {
            worst = worst.max(-s).max(-mu).max((s * mu).abs());
        }
    }
    worst
}

struct Reduced {
    z: DMatrix<f64>,
    particular: DVector<f64>,
}

/// Orthogonal elimination of `A z = b`: `z = z_p + Z y`.
fn eliminate(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Reduced> {
    let n = a.ncols();
    let p = a.nrows();
    if p == 0 {
        return Ok(Reduced {
            z: DMatrix::identity(n, n),
            particular: DVector::zeros(n),
        });
    }
    if p > n {
        return Err(Error::Infeasible(
            "more equality rows than variables".into(),
        ));
    }
    let qr = a.transpose().qr();
    let r = qr.r();
    let scale = a.amax().max(1.0);
    if (0..p).any(|k| r[(k, k)].abs() < 1e-11 * scale) {
        return Err(Error::Infeasible(
            "equality rows are linearly dependent".into(),
        ));
    }
    let mut q_t = DMatrix::identity(n, n);
    qr.q_tr_mul(&mut q_t);
    let q = q_t.transpose();
    let y = r
        .tr_solve_upper_triangular(b)
        .ok_or_else(|| Error::Infeasible("singular equality factor".into()))?;
    Ok(Reduced {
        particular: q.columns(0, p) * y,
        z: q.columns(p, n - p).into_owned(),
    })
}

/// Goldfarb–Idnani for `min ½ yᵀGy + aᵀy  s.t.  N y ≥ e`, `G` positive definite.
/// Returns the minimizer and the multiplier of every constraint (zero when inactive).
fn goldfarb_idnani(
    g: &DMatrix<f64>,
    a: &DVector<f64>,
    n_mat: &DMatrix<f64>,
    e: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let dim = g.nrows();
    let m = n_mat.nrows();
    let ginv = g
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Infeasible("reduced Hessian is not positive definite".into()))?
        .inverse();
    // columns G⁻¹ n_j and the Gram matrix N G⁻¹ Nᵀ
    let w = &ginv * n_mat.transpose();
    let k_mat = n_mat * &w;
    let mut y = -(&ginv * a);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let max_steps = 50 * (m + dim + 1);
    let mut steps = 0;
    loop {
        let s = n_mat * &y - e;
        let worst = (0..m)
            .filter(|j| !active.contains(j))
            .map(|j| (j, s[j] / (1.0 + e[j].abs())))
            .min_by(|x, y| x.1.total_cmp(&y.1));
        let Some((p, viol)) = worst else { break };
        if viol >= -1e-12 {
            break;
        }
        let np = n_mat.row(p).transpose();
        let mut u_plus = u.clone();
        u_plus.push(0.0);
        loop {
            steps += 1;
            if steps > max_steps {
                return Err(Error::Infeasible("dual active-set iteration limit".into()));
            }
            let (step, r) = if active.is_empty() {
                (w.column(p).into_owned(), DVector::zeros(0))
            } else {
                let k_aa = DMatrix::from_fn(active.len(), active.len(), |i, j| {
                    k_mat[(active[i], active[j])]
                });
                let k_ap = DVector::from_fn(active.len(), |i, _| k_mat[(active[i], p)]);
                let r = k_aa
                    .lu()
                    .solve(&k_ap)
                    .ok_or_else(|| Error::Infeasible("dependent active constraints".into()))?;
                let mut step = w.column(p).into_owned();
                for (k, &j) in active.iter().enumerate() {
                    step.axpy(-r[k], &w.column(j), 1.0);
                }
                (step, r)
            };
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (k, rk) in r.iter().enumerate() {
                if *rk > 1e-14 {
                    let t = u_plus[k] / rk;
                    if t < t1 {
                        t1 = t;
                        drop = Some(k);
                    }
                }
            }
            let curvature = step.dot(&np);
            let t2 = if step.amax() <= 1e-13 * np.amax() || curvature <= 0.0 {
                f64::INFINITY
            } else {
                -(np.dot(&y) - e[p]) / curvature
            };
            if t1.is_infinite() && t2.is_infinite() {
                return Err(Error::Infeasible(format!(
                    "constraint {p} cannot be satisfied"
                )));
            }
            let t = t1.min(t2);
            for (k, rk) in r.iter().enumerate() {
                u_plus[k] -= t * rk;
            }
            *u_plus.last_mut().expect("pushed above") += t;
            if t2.is_finite() {
                y += t * &step;
            }
            if t2 <= t1 {
                active.push(p);
                u = u_plus;
                break;
            }
            let k = drop.expect("finite partial step has a blocking multiplier");
            active.remove(k);
            u_plus.remove(k);
        }
    }
    let mut mult = DVector::zeros(m);
    for (j, v) in active.iter().zip(&u) {
        mult[*j] = v.max(0.0);
    }
    Ok((y, mult))
}

fn equality_duals(qp: &DenseQp, z: &DVector<f64>, mu: &DVector<f64>) -> Result<DVector<f64>> {
    if qp.a_eq.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    let mut rhs = &qp.h * z + &qp.q;
    if qp.c_ineq.nrows() > 0 {
        rhs += qp.c_ineq.transpose() * mu;
    }
    let gram = &qp.a_eq * qp.a_eq.transpose();
    let nu = gram
        .cholesky()
        .ok_or_else(|| Error::Infeasible("equality rows are linearly dependent".into()))?
        .solve(&(&qp.a_eq * rhs));
    Ok(-nu)
}

/// Solves the stacked QP to high accuracy.
pub fn solve_dense_qp(qp: &DenseQp) -> Result<DenseSolution> {
    let red = eliminate(&qp.a_eq, &qp.b_eq)?;
    let zt = red.z.transpose();
    let g = &zt * &qp.h * &red.z;
    let g = (&g + g.transpose()) * 0.5;
    let a = &zt * (&qp.h * &red.particular + &qp.q);
    let n_red = -(&qp.c_ineq * &red.z);
    let e = -(&qp.b_ineq - &qp.c_ineq * &red.particular);
    let (y, mu) = if red.z.ncols() == 0 {
        if qp.c_ineq.nrows() > 0 && (&qp.c_ineq * &red.particular - &qp.b_ineq).max() > 1e-9 {
            return Err(Error::Infeasible(
                "unique equality solution violates bounds".into(),
            ));
        }
        (DVector::zeros(0), DVector::zeros(qp.c_ineq.nrows()))
    } else {
        goldfarb_idnani(&g, &a, &n_red, &e)?
    };
    let z = &red.particular + &red.z * y;
    let eq_duals = equality_duals(qp, &z, &mu)?;
    Ok(DenseSolution {
        objective: qp.objective(&z),
        z,
        eq_duals,
        ineq_duals: mu,
    })
}

/// Exact optimizer by trying every subset of inequality rows as equalities and
/// keeping the feasible candidate with the lowest objective.
pub fn enumerate_active_sets(qp: &DenseQp, max_ineq: usize) -> Result<DenseSolution> {
    let m = qp.c_ineq.nrows();
    const CAP: usize = 20;
    if m > max_ineq.min(CAP) {
        return Err(Error::EnumerationCap {
            rows: m,
            cap: max_ineq.min(CAP),
        });
    }
    let n = qp.n();
    let p = qp.a_eq.nrows();
    let mut best: Option<DenseSolution> = None;
    for mask in 0u32..(1u32 << m) {
        let rows: Vec<usize> = (0..m).filter(|j| mask & (1 << j) != 0).collect();
        let w = p + rows.len();
        if w > n {
            continue;
        }
        let mut work = DMatrix::zeros(w, n);
        let mut rhs_w = DVector::zeros(w);
        work.rows_mut(0, p).copy_from(&qp.a_eq);
        rhs_w.rows_mut(0, p).copy_from(&qp.b_eq);
        for (k, &j) in rows.iter().enumerate() {
            work.set_row(p + k, &qp.c_ineq.row(j));
            rhs_w[p + k] = qp.b_ineq[j];
        }
        if w > 0 {
            let gram = &work * work.transpose();
            match gram.cholesky() {
                Some(ch) if ch.l_dirty().diagonal().min() > 1e-7 => {}
                _ => continue,
            }
        }
        let dim = n + w;
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
        kkt.view_mut((n, 0), (w, n)).copy_from(&work);
        kkt.view_mut((0, n), (n, w)).copy_from(&work.transpose());
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, n).copy_from(&(-&qp.q));
        rhs.rows_mut(n, w).copy_from(&rhs_w);
        let Some(sol) = kkt.clone().lu().solve(&rhs) else {
            continue;
        };
        if !sol.iter().all(|v| v.is_finite()) || (&kkt * &sol - &rhs).amax() > 1e-8 {
            continue;
        }
        let z = sol.rows(0, n).into_owned();
        if m > 0 && (&qp.c_ineq * &z - &qp.b_ineq).max() > 1e-9 {
            continue;
        }
        let objective = qp.objective(&z);
        if best
            .as_ref()
            .is_some_and(|b| b.objective <= objective + 1e-12)
        {
            continue;
        }
        let mut ineq_duals = DVector::zeros(m);
        for (k, &j) in rows.iter().enumerate() {
            ineq_duals[j] = sol[n + p + k];
        }
        best = Some(DenseSolution {
            eq_duals: sol.rows(n, p).into_owned(),
            ineq_duals,
            objective,
            z,
        });
    }
    best.ok_or_else(|| Error::Infeasible("no feasible working set".into()))
}

/// Stacked `x⁺ = A x + B u` assembled blockwise.
pub fn stacked_dynamics(net: &NetworkModel) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = net.total_states();
    let m = net.total_inputs();
    let mut xo = Vec::with_capacity(net.len());
    let mut uo = Vec::with_capacity(net.len());
    let (mut ox, mut ou) = (0, 0);
    for a in net.agents() {
        xo.push(ox);
        uo.push(ou);
        ox += a.n_states();
        ou += a.n_inputs();
    }
    let mut a_mat = DMatrix::zeros(n, n);
    let mut b_mat = DMatrix::zeros(n, m);
    for (i, ag) in net.agents().iter().enumerate() {
        let ni = ag.n_states();
        a_mat
            .view_mut((xo[i], xo[i]), (ni, ni))
            .copy_from(&ag.a_self);
        for (&j, blk) in &ag.a_in {
            a_mat
                .view_mut((xo[i], xo[j]), (ni, blk.ncols()))
                .copy_from(blk);
        }
        b_mat
            .view_mut((xo[i], uo[i]), (ni, ag.n_inputs()))
            .copy_from(&ag.b);
    }
    (a_mat, b_mat)
}

/// Closed-loop trajectory of a centralized MPC.
#[derive(Debug)]
pub struct Rollout {
    /// `steps + 1` states, starting with the initial one.
    pub states: Vec<PlantState>,
    /// Applied inputs, one entry per completed step.
    pub inputs: Vec<Vec<DVector<f64>>>,
    /// Set when a QP failed; the trajectories stop at that sample.
    pub failure: Option<Error>,
}

/// Solves the stacked QP at every sample and applies the first input of each agent.
pub fn centralized_mpc_rollout(
    net: &NetworkModel,
    x0: &PlantState,
    horizon: usize,
    steps: usize,
) -> Result<Rollout> {
    let mut qps = build_all(net, horizon, x0)?;
    let mut rollout = Rollout {
        states: vec![x0.clone()],
        inputs: Vec::new(),
        failure: None,
    };
    for _ in 0..steps {
        let x = rollout.states.last().expect("non-empty").clone();
        for (qp, xi) in qps.iter_mut().zip(&x.x) {
            update_initial_state(qp, xi)?;
        }
        let dense = stack_global(&qps)?;
        let sol = match solve_dense_qp(&dense) {
            Ok(s) => s,
            Err(e) => {
                rollout.failure = Some(e);
                break;
            }
        };
        let u: Vec<DVector<f64>> = dense
            .split(&sol.z)
            .iter()
            .zip(&qps)
            .map(|(z, qp)| qp.input(z, 0))
            .collect();
        rollout.states.push(plant_step(net, &x, &u)?);
        rollout.inputs.push(u);
    }
    Ok(rollout)
}

/// One centralized CG iterate `(λⁿ, rⁿ, pⁿ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CgIterate {
    pub lambda: DVector<f64>,
    pub r: DVector<f64>,
    pub p: DVector<f64>,
}

/// Textbook conjugate gradient on `S λ = s`, recording every iterate including the
/// initial one. Stops when `‖r‖_∞ < eps` or after `max_iter` iterations.
pub fn conjugate_gradient_trace(
    s_mat: &DMatrix<f64>,
    rhs: &DVector<f64>,
    lambda0: &DVector<f64>,
    eps: f64,
    max_iter: usize,
) -> Vec<CgIterate> {
    let mut lambda = lambda0.clone();
    let mut r = rhs - s_mat * &lambda;
    let mut p = r.clone();
    let mut out = vec![CgIterate {
        lambda: lambda.clone(),
        r: r.clone(),
        p: p.clone(),
    }];
    let mut eta = r.dot(&r);
    for _ in 0..max_iter {
        if r.amax() < eps {
            break;
        }
        let sp = s_mat * &p;
        let alpha = eta / p.dot(&sp);
        lambda += alpha * &p;
        r -= alpha * sp;
        let eta_next = r.dot(&r);
        p = &r + (eta_next / eta) * &p;
        eta = eta_next;
        out.push(CgIterate {
            lambda: lambda.clone(),
            r: r.clone(),
            p: p.clone(),
        });
    }
    out
}

/// Dense single-agent block used by [`admm_reference_step`].
#[derive(Debug, Clone)]
pub struct DenseAgentBlock {
    pub h: DMatrix<f64>,
    pub c_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub c_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    /// Full `n_c × n_zi` coupling matrix.
    pub c_cpl: DMatrix<f64>,
    /// Columns of `z_i` holding averaged quantities, as `(column, global slot)`.
    /// Slots index a stacked vector of all agents' state trajectories.
    pub averaged: Vec<(usize, usize)>,
}

/// `(z, z̄, λ)` per agent.
pub type AdmmIterate = (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>);

/// One ADMM iteration computed densely: local QPs by [`solve_dense_qp`], the
/// averaging step as an exact least-squares minimization over the shared
/// trajectories, then the dual ascent. `lambda[i]` is agent `i`'s full-length
/// (`n_c`) multiplier. Returns `(z⁺, z̄⁺, λ⁺)`.
pub fn admm_reference_step(
    blocks: &[DenseAgentBlock],
    z_bar: &[DVector<f64>],
    lambda: &[DVector<f64>],
    rho: f64,
    slots: usize,
) -> Result<AdmmIterate> {
    let mut z_next = Vec::with_capacity(blocks.len());
    for ((blk, zb), l) in blocks.iter().zip(z_bar).zip(lambda) {
        let ctc = blk.c_cpl.transpose() * &blk.c_cpl;
        let local = DenseQp {
            h: 2.0 * &blk.h + rho * &ctc,
            q: blk.c_cpl.transpose() * l - rho * &ctc * zb,
            a_eq: blk.c_eq.clone(),
            b_eq: blk.b_eq.clone(),
            c_ineq: blk.c_ineq.clone(),
            b_ineq: blk.b_ineq.clone(),
            offsets: vec![0, blk.h.nrows()],
        };
        z_next.push(solve_dense_qp(&local)?.z);
    }
    // minimize Σ_i −λ_iᵀ C_i z̄_i + ρ/2 ‖C_i (z_i − z̄_i)‖² over the shared trajectories X,
    // with z̄_i = z_i outside the averaged columns and z̄_i[col] = X[slot] inside.
    let mut normal = DMatrix::zeros(slots, slots);
    let mut rhs = DVector::zeros(slots);
    let mut used = vec![false; slots];
    for ((blk, z), l) in blocks.iter().zip(&z_next).zip(lambda) {
        let nz = z.len();
        let mut e = DMatrix::zeros(nz, slots);
        let mut fixed = z.clone();
        for &(col, slot) in &blk.averaged {
            e[(col, slot)] = 1.0;
            fixed[col] = 0.0;
            used[slot] = true;
        }
        let ce = &blk.c_cpl * &e;
        normal += rho * ce.transpose() * &ce;
        rhs += ce.transpose() * (l + rho * &blk.c_cpl * (z - &fixed));
    }
    for (s, u) in used.iter().enumerate() {
        if !u {
            normal[(s, s)] = 1.0;
        }
    }
    let x = normal
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Infeasible("singular averaging system".into()))?;
    let mut z_bar_next = Vec::with_capacity(blocks.len());
    let mut lambda_next = Vec::with_capacity(blocks.len());
    for ((blk, z), l) in blocks.iter().zip(&z_next).zip(lambda) {
        let mut zb = z.clone();
        for &(col, slot) in &blk.averaged {
            zb[col] = x[slot];
        }
        lambda_next.push(l + rho * &blk.c_cpl * (z - &zb));
        z_bar_next.push(zb);
    }
    Ok((z_next, z_bar_next, lambda_next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        build_chain_of_masses, random_network, random_state, ChainParams, RandomNetworkConfig,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_qp() -> DenseQp {
        DenseQp {
            h: DMatrix::from_element(1, 1, 1.0),
            q: DVector::zeros(1),
            a_eq: DMatrix::zeros(0, 1),
            b_eq: DVector::zeros(0),
            c_ineq: DMatrix::from_element(1, 1, 1.0),
            b_ineq: DVector::from_element(1, -1.0),
            offsets: vec![0, 1],
        }
    }

    #[test]
    fn scalar_bound_active() {
        let qp = scalar_qp();
        let sol = solve_dense_qp(&qp).unwrap();
        assert!((sol.z[0] + 1.0).abs() < 1e-14);
        assert!((sol.ineq_duals[0] - 1.0).abs() < 1e-14);
        let brute = enumerate_active_sets(&qp, 20).unwrap();
        assert!((brute.z[0] + 1.0).abs() < 1e-14);
        assert!((brute.ineq_duals[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn infeasible_bounds_detected() {
        let mut qp = scalar_qp();
        qp.c_ineq = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        qp.b_ineq = DVector::from_row_slice(&[-1.0, -1.0]);
        assert!(matches!(solve_dense_qp(&qp), Err(Error::Infeasible(_))));
        assert!(enumerate_active_sets(&qp, 20).is_err());
    }

    #[test]
    fn enumeration_cap() {
        let mut qp = scalar_qp();
        qp.c_ineq = DMatrix::from_element(21, 1, 1.0);
        qp.b_ineq = DVector::from_element(21, 1.0);
        assert!(matches!(
            enumerate_active_sets(&qp, 30),
            Err(Error::EnumerationCap { rows: 21, cap: 20 })
        ));
    }

    #[test]
    fn degenerate_working_sets_give_same_optimum() {
        // min ½‖z‖² − z₁ − z₂ s.t. z₁ ≤ 0.5, z₂ ≤ 0.5, z₁ + z₂ ≤ 1 (three rows active at optimum)
        let qp = DenseQp {
            h: DMatrix::identity(2, 2),
            q: DVector::from_row_slice(&[-1.0, -1.0]),
            a_eq: DMatrix::zeros(0, 2),
            b_eq: DVector::zeros(0),
            c_ineq: DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
            b_ineq: DVector::from_row_slice(&[0.5, 0.5, 1.0]),
            offsets: vec![0, 2],
        };
        let brute = enumerate_active_sets(&qp, 20).unwrap();
        let dense = solve_dense_qp(&qp).unwrap();
        assert!((brute.z - DVector::from_row_slice(&[0.5, 0.5])).amax() < 1e-12);
        assert!((dense.z - DVector::from_row_slice(&[0.5, 0.5])).amax() < 1e-12);
    }

    fn random_instance(rng: &mut ChaCha8Rng, agents: usize, horizon: usize, scale: f64) -> DenseQp {
        let net = random_network(
            rng,
            &RandomNetworkConfig {
                agents,
                max_inputs: 1,
                ..RandomNetworkConfig::default()
            },
        );
        let x0 = random_state(rng, &net, scale);
        stack_global(&build_all(&net, horizon, &x0).unwrap()).unwrap()
    }

    #[test]
    fn dense_solver_agrees_with_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..100 {
            let qp = random_instance(&mut rng, 2, 2 + trial % 2, 2.0);
            assert!(qp.c_ineq.nrows() <= 12);
            let dense = solve_dense_qp(&qp).unwrap();
            let brute = enumerate_active_sets(&qp, 20).unwrap();
            assert!(kkt_residual(&qp, &dense) < 1e-9, "trial {trial}");
            assert!((&dense.z - &brute.z).amax() < 1e-8, "trial {trial}");
        }
    }

    #[test]
    fn stacked_solution_satisfies_agent_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = random_network(&mut rng, &RandomNetworkConfig::default());
        let x0 = random_state(&mut rng, &net, 2.0);
        let qps = build_all(&net, 3, &x0).unwrap();
        let dense = stack_global(&qps).unwrap();
        let sol = solve_dense_qp(&dense).unwrap();
        for (qp, z) in qps.iter().zip(dense.split(&sol.z)) {
            assert!((&qp.c_eq * &z - &qp.b_eq).amax() < 1e-9);
            assert!((&qp.c_ineq * &z - &qp.b_ineq).max() < 1e-9);
        }
    }

    #[test]
    fn plant_matches_stacked_dynamics() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for agents in 1..=20 {
            let net = random_network(
                &mut rng,
                &RandomNetworkConfig {
                    agents,
                    ..RandomNetworkConfig::default()
                },
            );
            let (a, b) = stacked_dynamics(&net);
            let x = random_state(&mut rng, &net, 3.0);
            let u: Vec<DVector<f64>> = net
                .agents()
                .iter()
                .map(|ag| DVector::from_fn(ag.n_inputs(), |_, _| rng.random_range(-1.0..1.0)))
                .collect();
            let next = plant_step(&net, &x, &u).unwrap();
            let xs = DVector::from_iterator(
                net.total_states(),
                x.x.iter().flat_map(|v| v.iter().copied()),
            );
            let us = DVector::from_iterator(
                net.total_inputs(),
                u.iter().flat_map(|v| v.iter().copied()),
            );
            let dense = a * xs + b * us;
            let stacked = DVector::from_iterator(
                net.total_states(),
                next.x.iter().flat_map(|v| v.iter().copied()),
            );
            assert!((dense - stacked).amax() <= 1e-12);
        }
    }

    #[test]
    fn rollout_from_origin_stays_at_origin() {
        let net = build_chain_of_masses(&ChainParams {
            masses: 3,
            ..ChainParams::default()
        })
        .unwrap();
        let r = centralized_mpc_rollout(&net, &PlantState::zeros(&net), 5, 4).unwrap();
        assert!(r.failure.is_none());
        assert_eq!(r.states.len(), 5);
        for s in &r.states {
            assert!(s.x.iter().all(|v| v.amax() < 1e-12));
        }
    }

    #[test]
    fn rollout_saturates_far_from_origin() {
        let net = build_chain_of_masses(&ChainParams::default()).unwrap();
        let x0 = PlantState {
            time: 0,
            x: (0..10)
                .map(|i| DVector::from_row_slice(&[if i % 2 == 0 { 3.0 } else { -3.0 }, 0.0]))
                .collect(),
        };
        let r = centralized_mpc_rollout(&net, &x0, 12, 2).unwrap();
        assert!(r.failure.is_none());
        let u0 = &r.inputs[0];
        assert!(u0.iter().all(|u| u[0].abs() <= 1.0 + 1e-9));
        assert!(u0.iter().any(|u| (u[0].abs() - 1.0).abs() < 1e-9));
    }

    #[test]
    fn cg_trace_converges() {
        let s = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let rhs = DVector::from_row_slice(&[1.0, 2.0]);
        let trace = conjugate_gradient_trace(&s, &rhs, &DVector::zeros(2), 1e-12, 10);
        let last = trace.last().unwrap();
        assert!((&s * &last.lambda - &rhs).amax() < 1e-12);
        assert!(trace.len() <= 3);
    }
}
