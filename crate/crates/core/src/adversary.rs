//! Byzantine challenger and prover strategies.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::Topology;
use crate::roles::ResponseRule;
use crate::schedule::ChallengeParams;

/// What a corrupt challenger does.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChallengerStrategy {
    /// Sends nothing; still files the report the prover's bitmap supports.
    WithholdAll,
    /// Skips each probe with probability `p`.
    WithholdFraction { p: f64 },
    /// Starts sending `delay_ns` late.
    Delay { delay_ns: u64 },
    /// Sends every probe at once over its side channel.
    Rush,
    /// Hands its signing key to the prover and sends nothing.
    ShareKeys,
    MisreportRtt { rtt_ns: u64 },
    MisreportCount { count: u32 },
    WithholdReport,
    /// Claims verification failed even though it passed.
    BadMerkleClaim,
}

impl ChallengerStrategy {
    /// Whether the challenger's probes travel its own uplink at all.
    pub fn sends_probes(&self) -> bool {
        !matches!(self, ChallengerStrategy::WithholdAll | ChallengerStrategy::ShareKeys)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProverStrategy {
    #[default]
    Honest,
    /// Works with the corrupt challengers. With `early_response` it answers
    /// once (n−2f)k probes from honest challengers have arrived.
    Colluding { early_response: bool },
    /// Commits to fabricated probes for every missing slot and tries to get
    /// them credited through disputes.
    DisputeForger,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Corrupt challenger id → strategy.
    #[serde(default)]
    pub challengers: BTreeMap<u32, ChallengerStrategy>,
    #[serde(default)]
    pub prover: ProverStrategy,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttackError {
    #[error("challenger {0} does not exist")]
    UnknownChallenger(u32),
    #[error("{corrupt} corrupt challengers exceed f = {f}")]
    TooManyCorrupt { corrupt: usize, f: u32 },
    #[error("challenger {0} rushes but has no side channel")]
    NoSideChannel(u32),
    #[error("withhold fraction {0} outside [0, 1]")]
    Fraction(f64),
}

impl AttackConfig {
    pub fn honest() -> Self {
        AttackConfig::default()
    }

    /// The same strategy on challengers `0..count`.
    pub fn uniform(count: u32, strategy: ChallengerStrategy, prover: ProverStrategy) -> Self {
        AttackConfig { challengers: (0..count).map(|i| (i, strategy)).collect(), prover }
    }

    pub fn strategy(&self, challenger: u32) -> Option<ChallengerStrategy> {
        self.challengers.get(&challenger).copied()
    }

    pub fn is_corrupt(&self, challenger: u32) -> bool {
        self.challengers.contains_key(&challenger)
    }

    pub fn validate(&self, params: &ChallengeParams, topology: &Topology) -> Result<(), AttackError> {
        if self.challengers.len() > params.f as usize {
            return Err(AttackError::TooManyCorrupt { corrupt: self.challengers.len(), f: params.f });
        }
        for (&id, strategy) in &self.challengers {
            if id >= params.n {
                return Err(AttackError::UnknownChallenger(id));
            }
            match strategy {
                ChallengerStrategy::Rush if topology.side_channel(id).is_none() => {
                    return Err(AttackError::NoSideChannel(id))
                }
                ChallengerStrategy::WithholdFraction { p } if !(0.0..=1.0).contains(p) => {
                    return Err(AttackError::Fraction(*p))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Response rule the prover follows under this attack.
    pub fn response_rule(&self, params: &ChallengeParams) -> ResponseRule {
        match self.prover {
            ProverStrategy::Colluding { early_response: true } => {
                let honest = (0..params.n).map(|i| !self.is_corrupt(i)).collect();
                let f = self.challengers.len() as u32;
                ResponseRule::EarlyResponse { honest, target: u64::from(params.n - 2 * f) * u64::from(params.k) }
            }
            _ => ResponseRule::Threshold,
        }
    }
}

/// Checks the attack against the scenario and returns the prover's response
/// rule. The simulator consults the config for every other deviation.
pub fn apply(attack: &AttackConfig, params: &ChallengeParams, topology: &Topology) -> Result<ResponseRule, AttackError> {
    attack.validate(params, topology)?;
    Ok(attack.response_rule(params))
}

/// Random attack with exactly `f` corrupt challengers, for soundness sweeps.
pub fn fuzz_strategies(seed: u64, n: u32, f: u32) -> AttackConfig {
    if f == 0 {
        return AttackConfig::honest();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = sample(&mut rng, n as usize, f as usize);
    let mut challengers = BTreeMap::new();
    for id in ids.iter() {
        let strategy = match rng.gen_range(0..9) {
            0 => ChallengerStrategy::WithholdAll,
            1 => ChallengerStrategy::WithholdFraction { p: rng.gen_range(0.0..=1.0) },
            2 => ChallengerStrategy::Delay { delay_ns: rng.gen_range(0..200_000_000) },
            3 => ChallengerStrategy::Rush,
            4 => ChallengerStrategy::ShareKeys,
            5 => ChallengerStrategy::MisreportRtt {
                rtt_ns: if rng.gen() { 1 } else { rng.gen_range(1..=1_000_000_000_000_000_000) },
            },
            6 => ChallengerStrategy::MisreportCount { count: rng.gen_range(0..=u32::MAX) },
            7 => ChallengerStrategy::WithholdReport,
            _ => ChallengerStrategy::BadMerkleClaim,
        };
        challengers.insert(id as u32, strategy);
    }
    let prover = match rng.gen_range(0..4) {
        0 => ProverStrategy::Honest,
        1 => ProverStrategy::Colluding { early_response: false },
        2 => ProverStrategy::Colluding { early_response: true },
        _ => ProverStrategy::DisputeForger,
    };
    AttackConfig { challengers, prover }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::Topology;
    use crate::schedule::{derive_params, RatePolicy};

    #[test]
    fn fuzz_is_seed_deterministic() {
        for seed in 0..50 {
            assert_eq!(fuzz_strategies(seed, 10, 3), fuzz_strategies(seed, 10, 3));
            assert_eq!(fuzz_strategies(seed, 10, 3).challengers.len(), 3);
        }
        assert_ne!(fuzz_strategies(1, 10, 3), fuzz_strategies(2, 10, 3));
    }

    #[test]
    fn fuzz_with_no_faults_is_honest() {
        assert_eq!(fuzz_strategies(9, 10, 0), AttackConfig::honest());
    }

    #[test]
    fn rush_needs_side_channel() {
        let params = derive_params(250e6, 10, 2, 100_000_000, RatePolicy::PerNMinusF).unwrap();
        let attack = AttackConfig::uniform(2, ChallengerStrategy::Rush, ProverStrategy::Colluding { early_response: true });
        let plain = Topology::ideal(10, 250e6);
        assert_eq!(apply(&attack, &params, &plain), Err(AttackError::NoSideChannel(0)));
        let with_side = Topology::ideal(10, 250e6).with_side_channels(&[0, 1], 100_000);
        let rule = apply(&attack, &params, &with_side).unwrap();
        let ResponseRule::EarlyResponse { honest, target } = rule else { panic!() };
        assert_eq!(target, 6 * 258);
        assert_eq!(honest.iter().filter(|h| !**h).count(), 2);
    }

    #[test]
    fn too_many_corrupt() {
        let params = derive_params(250e6, 10, 1, 100_000_000, RatePolicy::PerN).unwrap();
        let attack = AttackConfig::uniform(2, ChallengerStrategy::WithholdAll, ProverStrategy::Honest);
        assert!(matches!(apply(&attack, &params, &Topology::ideal(10, 250e6)), Err(AttackError::TooManyCorrupt { .. })));
    }
}
