//! Discrete-event network simulator for a single challenge.

mod link;
mod queue;
mod run;
mod topology;
mod trace;

use thiserror::Error;

pub use link::{Backhaul, BackhaulStats, QueueFull, Queued, Uplink};
pub use queue::EventQueue;
pub use run::{
    ping, run_scenario, run_scenario_with, ChallengerOutcome, DropStats, ProverStats, SimOptions, SimResult,
};
pub use topology::{
    calibrate_overhead, ComputeOverhead, CrossFlow, Jitter, LinkModel, OffsetModel, SideChannel, Topology,
    DEFAULT_BACKHAUL_QUEUE, IDEAL_ACCESS_RATE,
};
pub use trace::{Node, Trace, TraceRecord};

use crate::adversary::AttackError;
use crate::schedule::ScheduleError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("every ping from challenger {0} was lost")]
    PingLost(u32),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}
