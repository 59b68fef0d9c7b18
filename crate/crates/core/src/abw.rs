//! Available-bandwidth ladder: repeated challenges at increasing claimed
//! rates until the challengers stop seeing responses.

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::AttackConfig;
use crate::netsim::{run_scenario_with, SimError, SimOptions, Topology};
use crate::schedule::{derive_params_with_mode, ChallengeParams, ScheduleError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderConfig {
    /// First rung in bits/s.
    pub theta_start: f64,
    /// Rung spacing in bits/s.
    pub delta: f64,
    /// Highest rung tried, usually the claimed capacity.
    pub max_rung: f64,
    #[serde(default = "default_timeout_factor")]
    pub timeout_factor: u32,
}

fn default_timeout_factor() -> u32 {
    5
}

impl LadderConfig {
    pub fn new(theta_start: f64, delta: f64, max_rung: f64) -> Self {
        LadderConfig { theta_start, delta, max_rung, timeout_factor: default_timeout_factor() }
    }

    pub fn validate(&self) -> Result<(), LadderError> {
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(LadderError::Config("delta must be positive"));
        }
        if !(self.theta_start.is_finite() && self.theta_start >= self.delta) {
            return Err(LadderError::Config("theta_start must be at least delta"));
        }
        if self.max_rung < self.theta_start {
            return Err(LadderError::Config("max_rung below theta_start"));
        }
        if self.timeout_factor == 0 {
            return Err(LadderError::Config("timeout_factor must be at least 1"));
        }
        Ok(())
    }

    /// Rung values from `theta_start` up to `max_rung`.
    pub fn rungs(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut i = 0u32;
        loop {
            let r = self.theta_start + f64::from(i) * self.delta;
            // Tolerate float noise on the last rung.
            if r > self.max_rung * (1.0 + 1e-9) {
                break;
            }
            out.push(r);
            i += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LadderError {
    #[error("ladder config: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Everything a rung needs besides its claimed rate. `base` supplies n, f,
/// D, the rate policy, overprovisioning and threshold mode.
#[derive(Debug, Clone)]
pub struct LadderScenario {
    pub topology: Topology,
    pub base: ChallengeParams,
    pub attack: AttackConfig,
    pub seed: u64,
    pub options: SimOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RungResult {
    pub rung_bps: f64,
    pub terminated: bool,
    pub timeouts: usize,
    pub measured_bps: Option<f64>,
    pub guaranteed_bps: Option<f64>,
    pub drops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderOutcome {
    /// Measured bandwidth of the last terminating rung, 0 below the floor.
    pub estimate_bps: f64,
    /// Nominal value of the last terminating rung.
    pub rung_bps: Option<f64>,
    pub below_floor: bool,
    pub rungs: Vec<RungResult>,
}

/// A rung fails when strictly more than half of all n challengers time out.
pub fn majority_timed_out(timeouts: usize, n: u32) -> bool {
    2 * timeouts > n as usize
}

pub fn run_ladder(config: &LadderConfig, scenario: &LadderScenario) -> Result<LadderOutcome, LadderError> {
    config.validate()?;
    let base = &scenario.base;
    let mut options = scenario.options.clone();
    options.challenger_timeout_ns = Some(u64::from(config.timeout_factor) * base.duration_ns);
    let mut rungs = Vec::new();
    let mut last_ok: Option<RungResult> = None;
    for (i, rung) in config.rungs().into_iter().enumerate() {
        let params =
            derive_params_with_mode(rung, base.n, base.f, base.duration_ns, base.rate_policy, base.threshold_mode)?
                .with_overprovision(base.overprovision)?;
        // A fresh seed per rung gives fresh keys and m0.
        let seed = scenario.seed.wrapping_add(i as u64);
        let r = run_scenario_with(&scenario.topology, &params, &scenario.attack, seed, &options)?;
        let timeouts = r.timeouts();
        let terminated = r.terminated && !majority_timed_out(timeouts, base.n);
        let result = RungResult {
            rung_bps: rung,
            terminated,
            timeouts,
            measured_bps: r.output.as_ref().map(|o| o.measured_bw),
            guaranteed_bps: r.output.as_ref().map(|o| o.guaranteed_bw),
            drops: r.drops.total(),
        };
        info!("rung {:.1} Mbps: terminated={terminated} timeouts={timeouts}", rung / 1e6);
        rungs.push(result.clone());
        if !terminated {
            break;
        }
        last_ok = Some(result);
    }
    Ok(match last_ok {
        Some(ok) => LadderOutcome {
            estimate_bps: ok.measured_bps.unwrap_or(ok.rung_bps),
            rung_bps: Some(ok.rung_bps),
            below_floor: false,
            rungs,
        },
        None => LadderOutcome { estimate_bps: 0.0, rung_bps: None, below_floor: true, rungs },
    })
}
