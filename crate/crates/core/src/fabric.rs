//! Simulated communication layer with traffic metering.
//!
//! Agents run in bulk-synchronous rounds: every collective call takes one
//! contribution per agent and returns once all have been posted. Global
//! reductions are evaluated in ascending agent order, so results do not depend
//! on how the local work was scheduled.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use crate::error::FabricError;

/// Traffic category used for the per-phase ledger breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    /// One-off exchanges that set up an iteration loop.
    Init,
    Dcg,
    Asm,
    Admm,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Init, Phase::Dcg, Phase::Asm, Phase::Admm];

    fn slot(self) -> usize {
        match self {
            Phase::Init => 0,
            Phase::Dcg => 1,
            Phase::Asm => 2,
            Phase::Admm => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Dcg => "dcg",
            Phase::Asm => "asm",
            Phase::Admm => "admm",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommCounts {
    pub global_floats: u64,
    pub global_booleans: u64,
    pub local_floats: u64,
}

impl Add for CommCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            global_floats: self.global_floats + o.global_floats,
            global_booleans: self.global_booleans + o.global_booleans,
            local_floats: self.local_floats + o.local_floats,
        }
    }
}

impl AddAssign for CommCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sub for CommCounts {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            global_floats: self.global_floats - o.global_floats,
            global_booleans: self.global_booleans - o.global_booleans,
            local_floats: self.local_floats - o.local_floats,
        }
    }
}

impl fmt::Display for CommCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "global floats {}, global booleans {}, local floats {}",
            self.global_floats, self.global_booleans, self.local_floats
        )
    }
}

/// Monotone traffic counters, broken down by [`Phase`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommLedger {
    phases: [CommCounts; 4],
}

impl CommLedger {
    pub fn phase(&self, phase: Phase) -> CommCounts {
        self.phases[phase.slot()]
    }

    pub fn total(&self) -> CommCounts {
        self.phases
            .iter()
            .copied()
            .fold(CommCounts::default(), |a, b| a + b)
    }

    /// Everything except [`Phase::Init`]; this is what the per-iteration formulas count.
    pub fn iterations(&self) -> CommCounts {
        self.total() - self.phase(Phase::Init)
    }

    fn charge(&mut self, phase: Phase, counts: CommCounts) {
        self.phases[phase.slot()] += counts;
    }

    /// Counters accumulated since `earlier`.
    pub fn since(&self, earlier: &CommLedger) -> CommLedger {
        let mut out = CommLedger::default();
        for p in Phase::ALL {
            out.phases[p.slot()] = self.phase(p) - earlier.phase(p);
        }
        out
    }
}

/// Reduction operator evaluated by the coordinator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Min,
}

/// A float vector sent from one agent to a neighbor.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub from: usize,
    pub to: usize,
    pub payload: Vec<f64>,
}

/// Message transport seen by the distributed solvers.
///
/// The simulator implements it in-process; a networked transport only has to
/// provide the same collective semantics and metering.
pub trait Transport {
    fn agents(&self) -> usize;

    /// Coordinator reduction over `values[agent][slot]`. Every agent receives the
    /// result vector; `2 · M · slots` global floats are charged.
    fn global_reduce(
        &mut self,
        phase: Phase,
        op: ReduceOp,
        values: &[Vec<f64>],
    ) -> Result<Vec<f64>, FabricError>;

    /// AND over one flag per agent; `2 · M` global booleans are charged.
    fn global_flags(&mut self, phase: Phase, flags: &[bool]) -> Result<bool, FabricError>;

    /// Delivers each message to its recipient. `expected(from, to)` is the payload
    /// length agreed for that link. Returns the inbox of every agent, ordered by sender.
    fn neighbor_exchange(
        &mut self,
        phase: Phase,
        messages: Vec<Message>,
        expected: &dyn Fn(usize, usize) -> usize,
    ) -> Result<Vec<Vec<Message>>, FabricError>;

    fn ledger(&self) -> &CommLedger;

    /// Sum of one scalar per agent.
    fn global_sum(&mut self, phase: Phase, values: &[f64]) -> Result<f64, FabricError> {
        let packed: Vec<Vec<f64>> = values.iter().map(|v| vec![*v]).collect();
        Ok(self.global_reduce(phase, ReduceOp::Sum, &packed)?[0])
    }

    /// Minimum of one scalar per agent together with the lowest agent attaining it.
    fn global_min(&mut self, phase: Phase, values: &[f64]) -> Result<(f64, usize), FabricError> {
        let packed: Vec<Vec<f64>> = values.iter().map(|v| vec![*v]).collect();
        let min = self.global_reduce(phase, ReduceOp::Min, &packed)?[0];
        let arg = values
            .iter()
            .position(|v| v.total_cmp(&min).is_eq())
            .unwrap_or(0);
        Ok((min, arg))
    }
}

/// Round barrier bookkeeping: the round counter and the participant count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundBarrier {
    pub round: u64,
    pub participants: usize,
}

impl RoundBarrier {
    fn pass(&mut self, posted: usize) -> Result<(), FabricError> {
        if posted != self.participants {
            return Err(FabricError::MissingParticipant {
                round: self.round,
                expected: self.participants,
                actual: posted,
            });
        }
        self.round += 1;
        Ok(())
    }
}

/// In-process fabric over a fixed undirected neighbor graph.
#[derive(Debug, Clone)]
pub struct SimFabric {
    neighbors: Vec<Vec<usize>>,
    barrier: RoundBarrier,
    ledger: CommLedger,
}

impl SimFabric {
    /// `neighbors[i]` is the set `ℳᵢ` of agents that `i` may message directly.
    pub fn new(neighbors: Vec<Vec<usize>>) -> Self {
        let participants = neighbors.len();
        Self {
            neighbors,
            barrier: RoundBarrier {
                round: 0,
                participants,
            },
            ledger: CommLedger::default(),
        }
    }

    pub fn for_network(net: &crate::model::NetworkModel) -> Self {
        Self::new((0..net.len()).map(|i| net.neighbors(i)).collect())
    }

    pub fn barrier(&self) -> RoundBarrier {
        self.barrier
    }
}

impl Transport for SimFabric {
    fn agents(&self) -> usize {
        self.barrier.participants
    }

    fn global_reduce(
        &mut self,
        phase: Phase,
        op: ReduceOp,
        values: &[Vec<f64>],
    ) -> Result<Vec<f64>, FabricError> {
        self.barrier.pass(values.len())?;
        let slots = values.first().map_or(0, Vec::len);
        let mut out = match op {
            ReduceOp::Sum => vec![0.0; slots],
            ReduceOp::Min => vec![f64::INFINITY; slots],
        };
        for contribution in values {
            for (acc, v) in out.iter_mut().zip(contribution) {
                match op {
                    ReduceOp::Sum => *acc += v,
                    ReduceOp::Min => *acc = acc.min(*v),
                }
            }
        }
        self.ledger.charge(
            phase,
            CommCounts {
                global_floats: 2 * (values.len() * slots) as u64,
                ..CommCounts::default()
            },
        );
        Ok(out)
    }

    fn global_flags(&mut self, phase: Phase, flags: &[bool]) -> Result<bool, FabricError> {
        self.barrier.pass(flags.len())?;
        self.ledger.charge(
            phase,
            CommCounts {
                global_booleans: 2 * flags.len() as u64,
                ..CommCounts::default()
            },
        );
        Ok(flags.iter().all(|f| *f))
    }

    fn neighbor_exchange(
        &mut self,
        phase: Phase,
        messages: Vec<Message>,
        expected: &dyn Fn(usize, usize) -> usize,
    ) -> Result<Vec<Vec<Message>>, FabricError> {
        let mut inbox = vec![Vec::new(); self.neighbors.len()];
        let mut sent = 0u64;
        for msg in messages {
            let known = self
                .neighbors
                .get(msg.from)
                .is_some_and(|n| n.contains(&msg.to));
            if !known {
                return Err(FabricError::UnknownLink {
                    from: msg.from,
                    to: msg.to,
                });
            }
            let want = expected(msg.from, msg.to);
            if msg.payload.len() != want {
                return Err(FabricError::PayloadSize {
                    from: msg.from,
                    to: msg.to,
                    expected: want,
                    actual: msg.payload.len(),
                });
            }
            sent += msg.payload.len() as u64;
            inbox[msg.to].push(msg);
        }
        for msgs in &mut inbox {
            msgs.sort_by_key(|m| m.from);
        }
        self.barrier.round += 1;
        self.ledger.charge(
            phase,
            CommCounts {
                local_floats: sent,
                ..CommCounts::default()
            },
        );
        Ok(inbox)
    }

    fn ledger(&self) -> &CommLedger {
        &self.ledger
    }
}
