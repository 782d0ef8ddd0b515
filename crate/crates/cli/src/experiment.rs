//! Closed-loop experiments: one MPC loop per random initial condition.

use dasm_core::admm::{Admm, AdmmConfig, AdmmPreset};
use dasm_core::asm::{asm_solve, ActiveSet, AsmConfig};
use dasm_core::oracle::centralized_mpc_rollout;
use dasm_core::qp::{dimensions, update_initial_state};
use dasm_core::{build_all, plant_step, CommLedger, NetworkModel, PlantState, SimFabric};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::scenario::Scenario;

/// Name and sampling rule of the initial-condition generator, recorded in the metadata.
pub const PRNG_DESCRIPTION: &str = "ChaCha8Rng (rand_chacha 0.9) seeded with seed_from_u64(seed); \
one stream for the whole run; for each initial condition in order, for each agent in order, \
for each state component in order: rand 0.9 random_range over [-y0_max, y0_max] for position-like \
components (even index) and [-v0_max, v0_max] for velocity-like components (odd index)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    AsmDcg,
    Admm1,
    Admm2,
    Centralized,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::AsmDcg => "asm-dcg",
            Self::Admm1 => "admm1",
            Self::Admm2 => "admm2",
            Self::Centralized => "centralized",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub horizon: usize,
    pub steps: usize,
    pub inits: usize,
    pub seed: u64,
    pub solver: SolverKind,
    pub rho: f64,
    pub eps_dcg: f64,
    pub eps_asm: f64,
    pub y0_max: f64,
    pub v0_max: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Chain(Default::default()),
            horizon: 12,
            steps: 25,
            inits: 30,
            seed: 0,
            solver: SolverKind::AsmDcg,
            rho: DEFAULT_RHO,
            eps_dcg: 1e-7,
            eps_asm: 1e-6,
            y0_max: 1.0,
            v0_max: 0.5,
        }
    }
}

/// ADMM penalty used unless overridden.
pub const DEFAULT_RHO: f64 = 1.0;

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(CliError::Config(msg.to_string()));
        // false for NaN
        let positive = |x: f64| x > 0.0;
        let non_negative = |x: f64| x >= 0.0;
        if self.horizon == 0 {
            return bad("horizon must be positive");
        }
        if self.steps == 0 || self.inits == 0 {
            return bad("steps and inits must be positive");
        }
        if !positive(self.rho) || !self.rho.is_finite() {
            return bad("rho must be positive");
        }
        if !positive(self.eps_dcg) || !positive(self.eps_asm) {
            return bad("tolerances must be positive");
        }
        if !non_negative(self.y0_max) || !non_negative(self.v0_max) {
            return bad("initial-condition bounds must be non-negative");
        }
        Ok(())
    }

    fn asm_config(&self, record_trace: bool) -> AsmConfig {
        AsmConfig {
            eps_dcg: self.eps_dcg,
            eps_step: self.eps_asm,
            record_trace,
            ..AsmConfig::default()
        }
    }
}

/// Worst primal violations over all iterates of one solve.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Feasibility {
    pub iterates: usize,
    pub equality: f64,
    pub inequality: f64,
    pub coupling: f64,
    /// Largest objective increase between consecutive iterates (0 when monotone).
    pub objective_increase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub init: usize,
    pub sample: usize,
    pub asm_outer: usize,
    pub dcg_feasible: usize,
    pub dcg_updating: usize,
    pub init_rounds: usize,
    pub admm_iterations: usize,
    pub ledger: CommLedger,
    pub feasibility: Option<Feasibility>,
}

impl SampleRecord {
    fn empty(init: usize, sample: usize) -> Self {
        Self {
            init,
            sample,
            asm_outer: 0,
            dcg_feasible: 0,
            dcg_updating: 0,
            init_rounds: 0,
            admm_iterations: 0,
            ledger: CommLedger::default(),
            feasibility: None,
        }
    }

    pub fn dcg_total(&self) -> usize {
        self.dcg_feasible + self.dcg_updating
    }
}

#[derive(Debug, Clone)]
pub struct InitRun {
    pub init: usize,
    /// Closed-loop states from time 0; shorter than `steps + 1` after a failure.
    pub states: Vec<PlantState>,
    pub inputs: Vec<Vec<DVector<f64>>>,
    pub reference: Vec<PlantState>,
    pub samples: Vec<SampleRecord>,
    pub failure: Option<String>,
}

impl InitRun {
    /// `max_i ‖x_i(t) − x_i^ref(t)‖_∞` for every time with both trajectories available.
    pub fn deviation(&self) -> Vec<f64> {
        self.states
            .iter()
            .zip(&self.reference)
            .map(|(a, b)| {
                a.x.iter()
                    .zip(&b.x)
                    .map(|(xa, xb)| (xa - xb).amax())
                    .fold(0.0, f64::max)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    pub n_z: usize,
    pub eq: usize,
    pub ineq: usize,
    pub cpl: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub agents: usize,
    pub dims: Dimensions,
    pub chain_shaped: bool,
    pub runs: Vec<InitRun>,
}

impl ExperimentResult {
    pub fn failures(&self) -> Vec<(usize, &str)> {
        self.runs
            .iter()
            .filter_map(|r| r.failure.as_deref().map(|f| (r.init, f)))
            .collect()
    }

    /// Records excluding the first sample of every initial condition.
    pub fn warm_samples(&self) -> impl Iterator<Item = &SampleRecord> {
        self.runs
            .iter()
            .flat_map(|r| r.samples.iter())
            .filter(|s| s.sample > 0)
    }

    pub fn max_deviation(&self) -> f64 {
        self.runs
            .iter()
            .flat_map(|r| r.deviation())
            .fold(0.0, f64::max)
    }
}

/// Initial states for every run, drawn from one stream as described by [`PRNG_DESCRIPTION`].
pub fn initial_states(net: &NetworkModel, cfg: &ExperimentConfig) -> Vec<PlantState> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |bound: f64| {
        if bound > 0.0 {
            rng.random_range(-bound..=bound)
        } else {
            0.0
        }
    };
    let mut out = Vec::with_capacity(cfg.inits);
    for _ in 0..cfg.inits {
        let mut x = Vec::with_capacity(net.len());
        for a in net.agents() {
            let mut xi = DVector::zeros(a.n_states());
            for c in 0..a.n_states() {
                xi[c] = draw(if c % 2 == 0 { cfg.y0_max } else { cfg.v0_max });
            }
            x.push(xi);
        }
        out.push(PlantState { time: 0, x });
    }
    out
}

fn feasibility_of(trace: &[dasm_core::asm::IterateRecord]) -> Feasibility {
    let mut f = Feasibility {
        iterates: trace.len(),
        ..Feasibility::default()
    };
    for r in trace {
        f.equality = f.equality.max(r.equality);
        f.inequality = f.inequality.max(r.inequality);
        f.coupling = f.coupling.max(r.coupling);
    }
    for w in trace.windows(2) {
        f.objective_increase = f.objective_increase.max(w[1].objective - w[0].objective);
    }
    f
}

enum Controller {
    Asm {
        warm: Option<ActiveSet>,
        cfg: AsmConfig,
    },
    Admm(Box<Admm>),
    Centralized,
}

/// Runs one closed loop. Solver failures end the loop and are reported in `failure`.
pub fn run_init(
    net: &NetworkModel,
    cfg: &ExperimentConfig,
    init: usize,
    x0: &PlantState,
    record_trace: bool,
) -> Result<InitRun> {
    let reference = centralized_mpc_rollout(net, x0, cfg.horizon, cfg.steps)?;
    let reference_inputs = reference.inputs;
    let mut run = InitRun {
        init,
        states: vec![x0.clone()],
        inputs: Vec::new(),
        reference: reference.states,
        samples: Vec::new(),
        failure: reference
            .failure
            .map(|e| format!("centralized reference: {e}")),
    };
    let mut qps = build_all(net, cfg.horizon, x0)?;
    let mut fabric = SimFabric::for_network(net);
    let mut controller = match cfg.solver {
        SolverKind::AsmDcg => Controller::Asm {
            warm: None,
            cfg: cfg.asm_config(record_trace),
        },
        SolverKind::Admm1 | SolverKind::Admm2 => {
            let preset = if cfg.solver == SolverKind::Admm1 {
                AdmmPreset::Admm1
            } else {
                AdmmPreset::Admm2
            };
            let mut admm_cfg = AdmmConfig::preset(preset, cfg.rho);
            admm_cfg.local = cfg.asm_config(false);
            Controller::Admm(Box::new(Admm::new(&qps, admm_cfg)?))
        }
        SolverKind::Centralized => Controller::Centralized,
    };

    for sample in 0..cfg.steps {
        let x = run.states.last().expect("non-empty").clone();
        for (qp, xi) in qps.iter_mut().zip(&x.x) {
            update_initial_state(qp, xi)?;
        }
        let mut record = SampleRecord::empty(init, sample);
        let solved: std::result::Result<Vec<DVector<f64>>, dasm_core::Error> = match &mut controller
        {
            Controller::Asm { warm, cfg } => {
                let start = warm
                    .as_ref()
                    .map_or_else(|| ActiveSet::empty(qps.len()), |w| w.shifted(&qps));
                asm_solve(&qps, &start, cfg, &mut fabric).map(|sol| {
                    record.asm_outer = sol.stats.outer_iterations;
                    record.dcg_feasible = sol.stats.dcg_feasible;
                    record.dcg_updating = sol.stats.dcg_updating;
                    record.init_rounds = sol.stats.init_rounds;
                    record.ledger = sol.stats.ledger;
                    if record_trace {
                        record.feasibility = Some(feasibility_of(&sol.stats.trace));
                    }
                    *warm = Some(sol.active);
                    sol.z
                })
            }
            Controller::Admm(admm) => admm.solve(&qps, &mut fabric).map(|sol| {
                record.admm_iterations = sol.state.iterations;
                record.ledger = sol.ledger;
                sol.state.z
            }),
            Controller::Centralized => Ok(Vec::new()),
        };
        let z = match solved {
            Ok(z) => z,
            Err(e) => {
                run.failure = Some(format!("sample {sample}: {e}"));
                break;
            }
        };
        let u: Vec<DVector<f64>> = match &controller {
            // the reference rollout already solved exactly these QPs
            Controller::Centralized => match reference_inputs.get(sample) {
                Some(u) => u.clone(),
                None => break,
            },
            _ => qps.iter().zip(&z).map(|(qp, zi)| qp.input(zi, 0)).collect(),
        };
        run.states.push(plant_step(net, &x, &u)?);
        run.inputs.push(u);
        run.samples.push(record);
    }
    Ok(run)
}

/// Runs every initial condition; the ASM solver also records per-iterate feasibility.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let record_trace = cfg.solver == SolverKind::AsmDcg;
    let net = cfg.scenario.build()?;
    let x0s = initial_states(&net, cfg);
    let qps = build_all(&net, cfg.horizon, &x0s[0])?;
    let (n_z, eq, ineq, cpl) = dimensions(&qps);
    let runs = x0s
        .par_iter()
        .enumerate()
        .map(|(i, x0)| run_init(&net, cfg, i, x0, record_trace))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult {
        config: cfg.clone(),
        agents: net.len(),
        dims: Dimensions { n_z, eq, ineq, cpl },
        chain_shaped: Scenario::is_chain_shaped(&net),
        runs,
    })
}
