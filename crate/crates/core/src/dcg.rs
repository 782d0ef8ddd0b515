//! Decentralized conjugate gradient on the coupling Schur system `(Σ S_i) λ = Σ s_i`.
//!
//! Each agent keeps the restrictions `λ_i, r_i, p_i` of the global CG vectors to its
//! rows `𝒞(i)`. One iteration:
//!
//! 1. `σ_i = p_iᵀ Ŝ_i p_i`, global sum `σ`;
//! 2. `λ_i += (η/σ) p_i`;
//! 3. neighbor exchange of `Ŝ_j p_j` on shared rows, `r_i -= (η/σ) Σ_j I_ij Ŝ_j p_j`;
//! 4. `η_i⁺ = r_iᵀ Λ_i⁻¹ r_i`, global sum `η⁺`, convergence flags;
//! 5. `p_i = r_i + (η⁺/η) p_i`.
//!
//! `η⁺` of step 4 is the `η` of the next iteration, so every iteration costs two scalar
//! reductions, one flag round and one exchange.

use nalgebra::DVector;

use crate::condense::CondensedAgent;
use crate::error::{Error, Result};
use crate::fabric::{CommLedger, Message, Phase, Transport};

/// Shared coupling rows between agent pairs, as pairs of local indices.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborOverlap {
    links: Vec<Vec<Link>>,
}

#[derive(Debug, Clone, PartialEq)]
struct Link {
    neighbor: usize,
    /// `(local index at self, local index at neighbor)`, ascending global row.
    pairs: Vec<(usize, usize)>,
}

impl NeighborOverlap {
    /// Builds the overlap from each agent's ascending global row list `𝒞(i)`.
    pub fn new(rows: &[&[usize]]) -> Self {
        let n_c = rows
            .iter()
            .flat_map(|r| r.iter())
            .map(|r| r + 1)
            .max()
            .unwrap_or(0);
        let mut owners: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_c];
        for (agent, list) in rows.iter().enumerate() {
            for (local, &row) in list.iter().enumerate() {
                owners[row].push((agent, local));
            }
        }
        let mut links: Vec<Vec<Link>> = vec![Vec::new(); rows.len()];
        for touching in &owners {
            for &(a, la) in touching {
                for &(b, lb) in touching {
                    if a == b {
                        continue;
                    }
                    match links[a].iter_mut().find(|l| l.neighbor == b) {
                        Some(l) => l.pairs.push((la, lb)),
                        None => links[a].push(Link {
                            neighbor: b,
                            pairs: vec![(la, lb)],
                        }),
                    }
                }
            }
        }
        for l in &mut links {
            l.sort_by_key(|k| k.neighbor);
        }
        Self { links }
    }

    pub fn from_condensed(cas: &[CondensedAgent]) -> Self {
        let rows: Vec<&[usize]> = cas.iter().map(|c| c.coupling_rows.as_slice()).collect();
        Self::new(&rows)
    }

    /// Number of rows shared by agents `i` and `j`.
    pub fn shared(&self, i: usize, j: usize) -> usize {
        self.links
            .get(i)
            .and_then(|ls| ls.iter().find(|l| l.neighbor == j))
            .map_or(0, |l| l.pairs.len())
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.links[i].iter().map(|l| l.neighbor)
    }

    /// Sums per-agent compressed vectors over all agents sharing each row:
    /// `out_i = Σ_{j ∈ ℳ_i ∪ i} I_ij v_j`, one neighbor exchange. Contributions are
    /// added in ascending agent order so shared entries agree bitwise.
    pub fn assemble(
        &self,
        values: &[DVector<f64>],
        phase: Phase,
        fabric: &mut impl Transport,
    ) -> Result<Vec<DVector<f64>>> {
        let mut messages = Vec::new();
        for (i, links) in self.links.iter().enumerate() {
            for l in links {
                messages.push(Message {
                    from: i,
                    to: l.neighbor,
                    payload: l.pairs.iter().map(|&(own, _)| values[i][own]).collect(),
                });
            }
        }
        let expected = |from: usize, to: usize| self.shared(from, to);
        let inbox = fabric.neighbor_exchange(phase, messages, &expected)?;
        Ok(values
            .iter()
            .enumerate()
            .map(|(i, own)| {
                let mut parts: Vec<Vec<(usize, f64)>> = own.iter().map(|v| vec![(i, *v)]).collect();
                for msg in &inbox[i] {
                    let link = self.links[i]
                        .iter()
                        .find(|l| l.neighbor == msg.from)
                        .expect("fabric delivered only along known links");
                    for (&(local, _), v) in link.pairs.iter().zip(&msg.payload) {
                        parts[local].push((msg.from, *v));
                    }
                }
                DVector::from_iterator(
                    parts.len(),
                    parts.into_iter().map(|mut p| {
                        p.sort_by_key(|e| e.0);
                        p.into_iter().fold(0.0, |acc, e| acc + e.1)
                    }),
                )
            })
            .collect())
    }
}

/// Agent-local CG variables.
#[derive(Debug, Clone, PartialEq)]
pub struct DcgLocalState {
    pub lambda: DVector<f64>,
    pub r: DVector<f64>,
    pub p: DVector<f64>,
    /// `η_i = r_iᵀ Λ_i⁻¹ r_i` for the current residual.
    pub eta: f64,
    /// `σ_i` of the last iteration.
    pub sigma: f64,
    pub iter: usize,
}

/// Collective DCG state: local states plus the broadcast scalars.
#[derive(Debug, Clone)]
pub struct DcgRun {
    pub states: Vec<DcgLocalState>,
    /// Global `η = ‖r‖²`.
    pub eta: f64,
    pub converged: bool,
    pub eps: f64,
}

impl DcgRun {
    pub fn iterations(&self) -> usize {
        self.states.first().map_or(0, |s| s.iter)
    }

    pub fn max_residual(&self) -> f64 {
        self.states.iter().map(|s| s.r.amax()).fold(0.0, f64::max)
    }

    pub fn lambdas(&self) -> Vec<DVector<f64>> {
        self.states.iter().map(|s| s.lambda.clone()).collect()
    }
}

fn local_eta(r: &DVector<f64>, multiplicity: &[f64]) -> f64 {
    r.iter().zip(multiplicity).map(|(v, m)| v * v / m).sum()
}

fn check_consistent(cas: &[CondensedAgent], lambda: &[DVector<f64>]) -> Result<()> {
    let n_c = cas
        .iter()
        .flat_map(|c| c.coupling_rows.iter())
        .map(|r| r + 1)
        .max()
        .unwrap_or(0);
    let mut seen: Vec<Option<f64>> = vec![None; n_c];
    for (ca, l) in cas.iter().zip(lambda) {
        crate::model::check_len("initial multipliers", ca.coupling_rows.len(), l.len())?;
        for (&row, &v) in ca.coupling_rows.iter().zip(l.iter()) {
            match seen[row] {
                Some(prev) if prev != v => {
                    return Err(Error::InconsistentShared {
                        row,
                        left: prev,
                        right: v,
                    })
                }
                _ => seen[row] = Some(v),
            }
        }
    }
    Ok(())
}

/// `r_i⁰ = p_i⁰ = Σ_j I_ij (s_j − Ŝ_j λ_j⁰)` with one exchange, then `η⁰` and the
/// convergence flags. All of this is charged to [`Phase::Init`].
pub fn dcg_init(
    cas: &[CondensedAgent],
    overlap: &NeighborOverlap,
    lambda0: Vec<DVector<f64>>,
    eps: f64,
    fabric: &mut impl Transport,
) -> Result<DcgRun> {
    crate::model::check_len("initial multiplier agents", cas.len(), lambda0.len())?;
    check_consistent(cas, &lambda0)?;
    let local: Vec<DVector<f64>> = cas
        .iter()
        .zip(&lambda0)
        .map(|(ca, l)| &ca.s_local - &ca.s_hat * l)
        .collect();
    let r = overlap.assemble(&local, Phase::Init, fabric)?;
    let etas: Vec<f64> = r
        .iter()
        .zip(cas)
        .map(|(r, ca)| local_eta(r, &ca.multiplicity))
        .collect();
    let eta = fabric.global_sum(Phase::Init, &etas)?;
    let flags: Vec<bool> = r.iter().map(|r| r.amax() < eps).collect();
    let converged = fabric.global_flags(Phase::Init, &flags)?;
    let states = lambda0
        .into_iter()
        .zip(r)
        .zip(etas)
        .map(|((lambda, r), eta)| DcgLocalState {
            lambda,
            p: r.clone(),
            r,
            eta,
            sigma: 0.0,
            iter: 0,
        })
        .collect();
    Ok(DcgRun {
        states,
        eta,
        converged,
        eps,
    })
}

/// One DCG iteration: `4M` global floats, `2M` global booleans and `2 n_c` local floats.
pub fn dcg_iterate(
    cas: &[CondensedAgent],
    overlap: &NeighborOverlap,
    run: &mut DcgRun,
    fabric: &mut impl Transport,
) -> Result<()> {
    let sp: Vec<DVector<f64>> = cas
        .iter()
        .zip(&run.states)
        .map(|(ca, st)| &ca.s_hat * &st.p)
        .collect();
    for (st, q) in run.states.iter_mut().zip(&sp) {
        st.sigma = st.p.dot(q);
    }
    let sigmas: Vec<f64> = run.states.iter().map(|s| s.sigma).collect();
    let sigma = fabric.global_sum(Phase::Dcg, &sigmas)?;
    if sigma <= 0.0 {
        let residual = run.max_residual();
        if residual > run.eps {
            return Err(Error::NonPositiveCurvature { sigma, residual });
        }
    }
    let alpha = if sigma > 0.0 { run.eta / sigma } else { 0.0 };
    for st in &mut run.states {
        st.lambda.axpy(alpha, &st.p, 1.0);
    }
    let s_p = overlap.assemble(&sp, Phase::Dcg, fabric)?;
    for (st, v) in run.states.iter_mut().zip(&s_p) {
        st.r.axpy(-alpha, v, 1.0);
    }
    let etas: Vec<f64> = run
        .states
        .iter()
        .zip(cas)
        .map(|(st, ca)| local_eta(&st.r, &ca.multiplicity))
        .collect();
    let eta_next = fabric.global_sum(Phase::Dcg, &etas)?;
    let flags: Vec<bool> = run.states.iter().map(|s| s.r.amax() < run.eps).collect();
    run.converged = fabric.global_flags(Phase::Dcg, &flags)?;
    let beta = if run.eta > 0.0 {
        eta_next / run.eta
    } else {
        0.0
    };
    for (st, eta_i) in run.states.iter_mut().zip(etas) {
        let r = st.r.clone();
        st.p = r + beta * &st.p;
        st.eta = eta_i;
        st.iter += 1;
    }
    run.eta = eta_next;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DcgOutcome {
    /// Per-agent compressed multipliers, consistent on shared rows.
    pub lambda: Vec<DVector<f64>>,
    pub iterations: usize,
    /// Traffic of this solve only.
    pub ledger: CommLedger,
}

/// Runs DCG until `‖r_i‖_∞ < eps` for every agent.
pub fn dcg_solve(
    cas: &[CondensedAgent],
    lambda0: Vec<DVector<f64>>,
    eps: f64,
    max_iter: usize,
    fabric: &mut impl Transport,
) -> Result<DcgOutcome> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(
            "DCG tolerance must be positive".into(),
        ));
    }
    let start = *fabric.ledger();
    if cas.iter().all(|c| c.coupling_rows.is_empty()) {
        return Ok(DcgOutcome {
            lambda: cas.iter().map(|_| DVector::zeros(0)).collect(),
            iterations: 0,
            ledger: CommLedger::default(),
        });
    }
    let overlap = NeighborOverlap::from_condensed(cas);
    let mut run = dcg_init(cas, &overlap, lambda0, eps, fabric)?;
    while !run.converged {
        if run.iterations() >= max_iter {
            return Err(Error::DcgMaxIter {
                iterations: run.iterations(),
                residual: run.max_residual(),
                best: run
                    .states
                    .iter()
                    .map(|s| s.lambda.iter().copied().collect())
                    .collect(),
            });
        }
        dcg_iterate(cas, &overlap, &mut run, fabric)?;
    }
    Ok(DcgOutcome {
        iterations: run.iterations(),
        lambda: run.lambdas(),
        ledger: fabric.ledger().since(&start),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condense::{CondensedAgent, NullSpace};
    use crate::fabric::SimFabric;
    use nalgebra::DMatrix;

    /// Two agents sharing one coupling row, each contributing `Ŝ = 1`, `s = 2`.
    fn scalar_pair() -> Vec<CondensedAgent> {
        (0..2)
            .map(|agent| {
                let ns = NullSpace::factor(agent, &DMatrix::identity(1, 1), &DMatrix::zeros(0, 1))
                    .unwrap();
                CondensedAgent {
                    agent,
                    null_space: ns,
                    w: DVector::zeros(0),
                    g_bar: DVector::zeros(1),
                    c_bar: DMatrix::from_element(1, 1, 1.0),
                    coupling_rows: vec![0],
                    s_hat: DMatrix::from_element(1, 1, 1.0),
                    s_local: DVector::from_element(1, 2.0),
                    multiplicity: vec![2.0],
                }
            })
            .collect()
    }

    fn pair_fabric() -> SimFabric {
        SimFabric::new(vec![vec![1], vec![0]])
    }

    #[test]
    fn one_dimensional_system_converges_in_one_iteration() {
        let cas = scalar_pair();
        let mut fabric = pair_fabric();
        let out = dcg_solve(&cas, vec![DVector::zeros(1); 2], 1e-12, 10, &mut fabric).unwrap();
        assert_eq!(out.iterations, 1);
        assert!((out.lambda[0][0] - 2.0).abs() < 1e-15);
        assert_eq!(out.lambda[0], out.lambda[1]);
        let it = out.ledger.phase(Phase::Dcg);
        assert_eq!(
            (it.global_floats, it.global_booleans, it.local_floats),
            (8, 4, 2)
        );
    }

    #[test]
    fn exact_start_needs_no_iterations() {
        let cas = scalar_pair();
        let mut fabric = pair_fabric();
        let out = dcg_solve(
            &cas,
            vec![DVector::from_element(1, 2.0); 2],
            1e-12,
            10,
            &mut fabric,
        )
        .unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.ledger.iterations().global_floats, 0);
    }

    #[test]
    fn zero_start_residual_is_global_rhs() {
        let cas = scalar_pair();
        let mut fabric = pair_fabric();
        let overlap = NeighborOverlap::from_condensed(&cas);
        let run = dcg_init(
            &cas,
            &overlap,
            vec![DVector::zeros(1); 2],
            1e-9,
            &mut fabric,
        )
        .unwrap();
        assert_eq!(run.states[0].r[0], 4.0);
        assert_eq!(run.eta, 16.0);
    }

    #[test]
    fn inconsistent_start_rejected() {
        let cas = scalar_pair();
        let mut fabric = pair_fabric();
        let lambda0 = vec![DVector::from_element(1, 1.0), DVector::from_element(1, 2.0)];
        assert!(matches!(
            dcg_solve(&cas, lambda0, 1e-9, 10, &mut fabric),
            Err(Error::InconsistentShared { row: 0, .. })
        ));
    }

    #[test]
    fn max_iter_reports_best_iterate() {
        let cas = scalar_pair();
        let mut fabric = pair_fabric();
        let err = dcg_solve(&cas, vec![DVector::zeros(1); 2], 1e-12, 0, &mut fabric).unwrap_err();
        assert!(
            matches!(err, Error::DcgMaxIter { iterations: 0, ref best, .. } if best.len() == 2)
        );
    }

    #[test]
    fn decoupled_returns_immediately() {
        let cas: Vec<CondensedAgent> = scalar_pair()
            .into_iter()
            .map(|mut c| {
                c.coupling_rows.clear();
                c.s_hat = DMatrix::zeros(0, 0);
                c.s_local = DVector::zeros(0);
                c.c_bar = DMatrix::zeros(0, 1);
                c.multiplicity.clear();
                c
            })
            .collect();
        let mut fabric = pair_fabric();
        let out = dcg_solve(&cas, vec![DVector::zeros(0); 2], 1e-9, 10, &mut fabric).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(fabric.ledger().total(), Default::default());
    }

    #[test]
    fn overlap_counts_shared_rows() {
        let rows: Vec<Vec<usize>> = vec![vec![0, 1, 4], vec![0, 1, 2, 3], vec![2, 3, 4]];
        let refs: Vec<&[usize]> = rows.iter().map(Vec::as_slice).collect();
        let ov = NeighborOverlap::new(&refs);
        assert_eq!(ov.shared(0, 1), 2);
        assert_eq!(ov.shared(1, 2), 2);
        assert_eq!(ov.shared(0, 2), 1);
        assert_eq!(ov.shared(2, 0), 1);
        assert_eq!(ov.neighbors(1).collect::<Vec<_>>(), vec![0, 2]);
    }
}
