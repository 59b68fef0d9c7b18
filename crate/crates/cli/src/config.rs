//! Scenario files.
//!
//! A scenario is a TOML document with `protocol`, `topology`, `attack`,
//! `run` and an optional `ladder` table. Rates are in Mbps and times in
//! milliseconds unless a field name says otherwise. Unknown keys are
//! rejected.

use std::path::Path;

use pob_core::abw::LadderConfig;
use pob_core::adversary::{AttackConfig, ChallengerStrategy, ProverStrategy};
use pob_core::netsim::{
    ComputeOverhead, CrossFlow, Jitter, LinkModel, OffsetModel, SideChannel, SimOptions, Topology,
    DEFAULT_BACKHAUL_QUEUE,
};
use pob_core::schedule::{derive_params_with_mode, ChallengeParams, LatencyEstimator, RatePolicy, ThresholdMode};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing {path}: {message}")]
    Parse { path: String, message: String },
    #[error("{field}: {reason}")]
    Field { field: String, reason: String },
}

fn field(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Field { field: field.to_string(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub protocol: ProtocolSection,
    pub topology: TopologySection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<LadderSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    pub theta_claimed_mbps: f64,
    pub n: u32,
    pub f: u32,
    pub duration_ms: f64,
    #[serde(default)]
    pub rate_policy: RatePolicy,
    #[serde(default = "default_overprovision")]
    pub overprovision: f64,
    #[serde(default)]
    pub threshold_mode: ThresholdMode,
}

fn default_overprovision() -> f64 {
    1.1
}

/// Access links shared by `count` consecutive challengers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UplinkGroup {
    pub count: u32,
    pub rate_mbps: f64,
    pub propagation_ms: f64,
    #[serde(default)]
    pub jitter: Jitter,
    /// Unlimited when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue_bytes: Option<u64>,
    #[serde(default)]
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SideChannelEntry {
    pub challenger: u32,
    #[serde(default = "default_side_delay")]
    pub delay_ms: f64,
}

fn default_side_delay() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossEntry {
    pub rate_mbps: f64,
    /// `[start_ms, end_ms)` windows after t0; always on when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub on_ms: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    pub backhaul_mbps: f64,
    #[serde(default)]
    pub backhaul_propagation_ms: f64,
    #[serde(default = "default_queue")]
    pub backhaul_queue_bytes: u64,
    #[serde(default)]
    pub backhaul_jitter: Jitter,
    #[serde(default)]
    pub backhaul_loss: f64,
    pub uplinks: Vec<UplinkGroup>,
    #[serde(default)]
    pub clock_offsets: OffsetModel,
    #[serde(default)]
    pub compute_overhead: ComputeOverhead,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub side_channels: Vec<SideChannelEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cross_traffic: Vec<CrossEntry>,
    #[serde(default)]
    pub cross_feedback: f64,
    #[serde(default = "default_verifier_delay")]
    pub verifier_delay_ms: f64,
}

fn default_queue() -> u64 {
    DEFAULT_BACKHAUL_QUEUE
}

fn default_verifier_delay() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptGroup {
    pub ids: Vec<u32>,
    pub strategy: ChallengerStrategy,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default)]
    pub prover: ProverStrategy,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub challengers: Vec<CorruptGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_reps")]
    pub repetitions: u32,
    /// Verifier deadline after t0; default 10·D + 2 s.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_ms: Option<f64>,
    #[serde(default = "default_pings")]
    pub ping_count: usize,
    #[serde(default)]
    pub latency_estimator: LatencyEstimator,
}

fn default_seed() -> u64 {
    1
}
fn default_reps() -> u32 {
    1
}
fn default_pings() -> usize {
    20
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: default_seed(),
            repetitions: default_reps(),
            horizon_ms: None,
            ping_count: default_pings(),
            latency_estimator: LatencyEstimator::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderSection {
    pub start_mbps: f64,
    pub delta_mbps: f64,
    pub max_mbps: f64,
    #[serde(default = "default_timeout_factor")]
    pub timeout_factor: u32,
}

fn default_timeout_factor() -> u32 {
    5
}

fn ms(v: f64) -> u64 {
    (v * 1e6).round() as u64
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let cfg = Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse { path: path.display().to_string(), message },
            other => other,
        })?;
        Ok(cfg)
    }

    /// Parses and validates.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: "<input>".into(), message: e.to_string() })?;
        if cfg.name.is_empty() {
            cfg.name = "scenario".into();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.protocol;
        if !(p.theta_claimed_mbps.is_finite() && p.theta_claimed_mbps > 0.0) {
            return Err(field("protocol.theta_claimed_mbps", "must be positive"));
        }
        if !(p.duration_ms.is_finite() && p.duration_ms > 0.0) {
            return Err(field("protocol.duration_ms", "must be positive"));
        }
        self.params().map_err(|e| field("protocol", e.to_string()))?;
        let total: u32 = self.topology.uplinks.iter().map(|g| g.count).sum();
        if total != p.n {
            return Err(field("topology.uplinks", format!("counts sum to {total}, expected n = {}", p.n)));
        }
        for (i, g) in self.topology.uplinks.iter().enumerate() {
            if !(g.rate_mbps.is_finite() && g.rate_mbps > 0.0) {
                return Err(field(&format!("topology.uplinks[{i}].rate_mbps"), "must be positive"));
            }
            if !(g.propagation_ms.is_finite() && g.propagation_ms >= 0.0) {
                return Err(field(&format!("topology.uplinks[{i}].propagation_ms"), "must be non-negative"));
            }
        }
        if !(self.topology.backhaul_mbps.is_finite() && self.topology.backhaul_mbps > 0.0) {
            return Err(field("topology.backhaul_mbps", "must be positive"));
        }
        for s in &self.topology.side_channels {
            if s.challenger >= p.n {
                return Err(field("topology.side_channels", format!("challenger {} does not exist", s.challenger)));
            }
        }
        self.topology().validate().map_err(|e| field("topology", e))?;
        if let OffsetModel::Fixed { offsets_ns } = &self.topology.clock_offsets {
            if offsets_ns.len() > p.n as usize + 1 {
                return Err(field("topology.clock_offsets", "more offsets than nodes"));
            }
        }
        let attack = self.attack().map_err(|e| field("attack.challengers", e))?;
        let params = self.params().expect("checked above");
        attack.validate(&params, &self.topology()).map_err(|e| field("attack", e.to_string()))?;
        if self.run.repetitions == 0 {
            return Err(field("run.repetitions", "must be at least 1"));
        }
        if self.run.ping_count == 0 {
            return Err(field("run.ping_count", "must be at least 1"));
        }
        if let Some(l) = self.ladder_config() {
            l.validate().map_err(|e| field("ladder", e.to_string()))?;
        }
        Ok(())
    }

    pub fn params(&self) -> Result<ChallengeParams, pob_core::schedule::ScheduleError> {
        let p = &self.protocol;
        derive_params_with_mode(p.theta_claimed_mbps * 1e6, p.n, p.f, ms(p.duration_ms), p.rate_policy, p.threshold_mode)?
            .with_overprovision(p.overprovision)
    }

    pub fn topology(&self) -> Topology {
        let t = &self.topology;
        let uplinks = t
            .uplinks
            .iter()
            .flat_map(|g| {
                let link = LinkModel {
                    rate_bps: g.rate_mbps * 1e6,
                    propagation_ns: ms(g.propagation_ms),
                    jitter: g.jitter,
                    queue_capacity_bytes: g.queue_bytes.unwrap_or(u64::MAX),
                    loss_rate: g.loss,
                };
                std::iter::repeat(link).take(g.count as usize)
            })
            .collect();
        Topology {
            uplinks,
            backhaul: LinkModel {
                rate_bps: t.backhaul_mbps * 1e6,
                propagation_ns: ms(t.backhaul_propagation_ms),
                jitter: t.backhaul_jitter,
                queue_capacity_bytes: t.backhaul_queue_bytes,
                loss_rate: t.backhaul_loss,
            },
            clock_offsets: t.clock_offsets.clone(),
            compute_overhead: t.compute_overhead,
            side_channels: t
                .side_channels
                .iter()
                .map(|s| SideChannel { challenger: s.challenger, delay_ns: ms(s.delay_ms) })
                .collect(),
            cross_traffic: t
                .cross_traffic
                .iter()
                .map(|c| CrossFlow { rate_bps: c.rate_mbps * 1e6, on: c.on_ms.iter().map(|&(a, b)| (ms(a), ms(b))).collect() })
                .collect(),
            cross_feedback: t.cross_feedback,
            verifier_delay_ns: ms(t.verifier_delay_ms),
        }
    }

    pub fn attack(&self) -> Result<AttackConfig, String> {
        let mut attack = AttackConfig { prover: self.attack.prover, ..AttackConfig::default() };
        for g in &self.attack.challengers {
            for &id in &g.ids {
                if attack.challengers.insert(id, g.strategy).is_some() {
                    return Err(format!("challenger {id} listed twice"));
                }
            }
        }
        Ok(attack)
    }

    pub fn sim_options(&self) -> SimOptions {
        SimOptions {
            ping_count: self.run.ping_count,
            latency_estimator: self.run.latency_estimator,
            deadline_ns: self.run.horizon_ms.map(ms),
            ..SimOptions::default()
        }
    }

    pub fn ladder_config(&self) -> Option<LadderConfig> {
        self.ladder.as_ref().map(|l| LadderConfig {
            theta_start: l.start_mbps * 1e6,
            delta: l.delta_mbps * 1e6,
            max_rung: l.max_mbps * 1e6,
            timeout_factor: l.timeout_factor,
        })
    }

    /// Short label for the attack column of rendered tables.
    pub fn attack_label(&self) -> String {
        let strategies: Vec<ChallengerStrategy> = self.attack.challengers.iter().map(|g| g.strategy).collect();
        if strategies.is_empty() && self.attack.prover == ProverStrategy::Honest {
            return "--".into();
        }
        let mut names: Vec<&str> = strategies
            .iter()
            .map(|s| match s {
                ChallengerStrategy::Rush => "Rushing",
                ChallengerStrategy::WithholdAll | ChallengerStrategy::WithholdFraction { .. } => "Withholding",
                ChallengerStrategy::Delay { .. } => "Delay",
                ChallengerStrategy::ShareKeys => "Key sharing",
                ChallengerStrategy::MisreportRtt { .. } | ChallengerStrategy::MisreportCount { .. } => "Misreport",
                ChallengerStrategy::WithholdReport => "Withheld report",
                ChallengerStrategy::BadMerkleClaim => "False claim",
            })
            .collect();
        names.dedup();
        if names.is_empty() {
            names.push("Prover only");
        }
        names.join("+")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [protocol]
        theta_claimed_mbps = 250
        n = 10
        f = 2
        duration_ms = 100

        [topology]
        backhaul_mbps = 250
        [[topology.uplinks]]
        count = 10
        rate_mbps = 10000
        propagation_ms = 5
    "#;

    #[test]
    fn minimal_scenario_defaults() {
        let cfg = ScenarioConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.protocol.overprovision, 1.1);
        assert_eq!(cfg.run.repetitions, 1);
        assert_eq!(cfg.topology().n(), 10);
        assert_eq!(cfg.topology().backhaul.queue_capacity_bytes, DEFAULT_BACKHAUL_QUEUE);
        assert_eq!(cfg.params().unwrap().k, 258);
        assert_eq!(cfg.attack_label(), "--");
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = MINIMAL.replace("n = 10", "n = 10\nbogus = 1");
        assert!(matches!(ScenarioConfig::parse(&text), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn uplink_counts_must_cover_n() {
        let text = MINIMAL.replace("count = 10", "count = 9");
        let err = ScenarioConfig::parse(&text).unwrap_err();
        assert!(err.to_string().starts_with("topology.uplinks"), "{err}");
    }

    #[test]
    fn rush_needs_side_channel() {
        let text = format!("{MINIMAL}\n[[attack.challengers]]\nids = [0, 1]\nstrategy = {{ kind = \"rush\" }}\n");
        let err = ScenarioConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("side channel"), "{err}");
        let ok = format!("{text}\n[[topology.side_channels]]\nchallenger = 0\n[[topology.side_channels]]\nchallenger = 1\n");
        let cfg = ScenarioConfig::parse(&ok).unwrap();
        assert_eq!(cfg.topology().side_channels[1].delay_ns, 100_000);
        assert_eq!(cfg.attack_label(), "Rushing");
    }

    #[test]
    fn round_trip() {
        let cfg = ScenarioConfig::parse(MINIMAL).unwrap();
        let again = ScenarioConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn lazy_mode_fault_bound() {
        let text = MINIMAL.replace("f = 2", "f = 4");
        assert!(ScenarioConfig::parse(&text).unwrap_err().to_string().starts_with("protocol"));
    }
}
