use log::info;
use pob_core::abw::{run_ladder, LadderError, LadderScenario};
use pob_core::netsim::{run_scenario_with, SimError, SimResult, Trace};
use pob_core::roles::measured_bandwidth;
use thiserror::Error;

use crate::config::ScenarioConfig;
use crate::report::{ChallengerRow, Repetition, RunReport, Summary, REPORT_VERSION};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ladder(#[from] LadderError),
}

/// Overrides from the command line.
#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub repetitions: Option<u32>,
    pub trace: bool,
}

pub struct SimulateOutput {
    pub report: RunReport,
    /// Trace of the first repetition when requested.
    pub trace: Option<Trace>,
}

fn repetition(index: u32, seed: u64, r: &SimResult) -> Repetition {
    let cnt = r.output.as_ref().map(|o| o.cnt);
    let challengers = r
        .challengers
        .iter()
        .map(|c| ChallengerRow {
            id: c.id,
            corrupt: c.corrupt,
            delta_ns: c.rtt_ns,
            implied_bps: match (cnt, c.rtt_ns) {
                (Some(cnt), Some(d)) if d > 0 => Some(measured_bandwidth::<f64>(cnt, r.params.packet_bytes, d)),
                _ => None,
            },
            acknowledged: c.credited,
            timed_out: c.timed_out,
        })
        .collect();
    Repetition {
        index,
        seed,
        terminated: r.terminated,
        output: r.output.clone(),
        challengers,
        drops: r.drops.clone(),
        challenge_bytes_sent: r.challenge_bytes_sent,
    }
}

/// Runs every repetition of a scenario, or its ladder when it has one.
pub fn simulate(cfg: &ScenarioConfig, overrides: &RunOverrides) -> Result<SimulateOutput, RunError> {
    let params = cfg.params().map_err(SimError::from)?;
    let topology = cfg.topology();
    let attack = cfg.attack().expect("validated config");
    let seed = overrides.seed.unwrap_or(cfg.run.seed);
    let reps = overrides.repetitions.unwrap_or(cfg.run.repetitions);
    let mut options = cfg.sim_options();

    let mut repetitions = Vec::new();
    let mut trace = None;
    let mut ladder = None;
    if let Some(ladder_cfg) = cfg.ladder_config() {
        options.trace = false;
        let scenario = LadderScenario { topology, base: params.clone(), attack, seed, options };
        ladder = Some(run_ladder(&ladder_cfg, &scenario)?);
    } else {
        for i in 0..reps {
            let rep_seed = seed.wrapping_add(u64::from(i));
            options.trace = overrides.trace && i == 0;
            let r = run_scenario_with(&topology, &params, &attack, rep_seed, &options)?;
            info!(
                "{} rep {i}: {}",
                cfg.name,
                r.output.as_ref().map_or("no output".to_string(), |o| format!("{:.2} Mbps", o.measured_bw / 1e6))
            );
            repetitions.push(repetition(i, rep_seed, &r));
            if options.trace {
                trace = Some(r.trace);
            }
        }
    }
    let backhaul_bps = cfg.topology.backhaul_mbps * 1e6;
    let report = RunReport {
        version: REPORT_VERSION,
        scenario: cfg.name.clone(),
        backhaul_bps,
        theta_claimed_bps: params.theta_claimed,
        challenger_bps: params.theta0,
        challenge_bytes: params.total_challenge_bytes(),
        attack: cfg.attack_label(),
        n: params.n,
        f: params.f,
        k: params.k,
        duration_ns: params.duration_ns,
        summary: Summary::from_repetitions(&repetitions, backhaul_bps),
        repetitions,
        ladder,
    };
    Ok(SimulateOutput { report, trace })
}
