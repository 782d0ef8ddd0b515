use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dasm_core::asm::{asm_solve, ActiveSet, AsmConfig};
use dasm_core::condense::{condense, CondensedAgent, WorkingConstraints};
use dasm_core::dcg::dcg_solve;
use dasm_core::{build_all, build_chain_of_masses, AgentQp, ChainParams, PlantState, SimFabric};
use nalgebra::DVector;

fn chain(masses: usize) -> (SimFabric, Vec<AgentQp>) {
    let net = build_chain_of_masses(&ChainParams {
        masses,
        ..ChainParams::default()
    })
    .expect("chain builds");
    let x0 = PlantState {
        time: 0,
        x: (0..masses)
            .map(|i| DVector::from_row_slice(&[if i % 2 == 0 { 0.8 } else { -0.8 }, 0.2]))
            .collect(),
    };
    let qps = build_all(&net, 12, &x0).expect("QPs build");
    (SimFabric::for_network(&net), qps)
}

fn condensed(qps: &[AgentQp]) -> Vec<CondensedAgent> {
    qps.iter()
        .map(|qp| {
            let g = DVector::from_fn(qp.n_z(), |i, _| ((i % 7) as f64 - 3.0) * 0.1);
            condense(qp, &WorkingConstraints::absolute(qp, &[]), &g).expect("condenses")
        })
        .collect()
}

fn bench_condense(c: &mut Criterion) {
    let (_, qps) = chain(10);
    c.bench_function("condense/baseline_agent", |b| {
        let g = DVector::zeros(qps[4].n_z());
        let work = WorkingConstraints::absolute(&qps[4], &[0, 5, 11]);
        b.iter(|| condense(black_box(&qps[4]), &work, &g).expect("condenses"))
    });
}

fn bench_dcg(c: &mut Criterion) {
    let mut group = c.benchmark_group("dcg_solve");
    for masses in [5, 10, 20] {
        let (mut fabric, qps) = chain(masses);
        let cas = condensed(&qps);
        group.bench_with_input(BenchmarkId::from_parameter(masses), &cas, |b, cas| {
            b.iter(|| {
                let lambda0 = cas
                    .iter()
                    .map(|c| DVector::zeros(c.coupling_rows.len()))
                    .collect();
                dcg_solve(cas, lambda0, 1e-7, 10_000, &mut fabric).expect("converges")
            })
        });
    }
    group.finish();
}

fn bench_asm(c: &mut Criterion) {
    let (mut fabric, qps) = chain(10);
    let cfg = AsmConfig::default();
    let cold = asm_solve(&qps, &ActiveSet::empty(qps.len()), &cfg, &mut fabric).expect("solves");
    let mut group = c.benchmark_group("asm_baseline");
    group.sample_size(10);
    group.bench_function("cold", |b| {
        b.iter(|| asm_solve(&qps, &ActiveSet::empty(qps.len()), &cfg, &mut fabric).expect("solves"))
    });
    group.bench_function("warm", |b| {
        b.iter(|| asm_solve(&qps, black_box(&cold.active), &cfg, &mut fabric).expect("solves"))
    });
    group.finish();
}

criterion_group!(benches, bench_condense, bench_dcg, bench_asm);
criterion_main!(benches);
