//! Public challenge parameters and per-challenger send schedules.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::PACKET_BYTES;

pub const DEFAULT_OVERPROVISION: f64 = 1.1;
pub const NANOS_PER_SEC: f64 = 1e9;

/// How the claimed bandwidth is split across challengers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum RatePolicy {
    /// θ0 = θ/n.
    PerN = 0,
    /// θ0 = θ/(n−f); honest challengers alone saturate the backhaul.
    #[default]
    PerNMinusF = 1,
}

/// When the verifier stops collecting reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum ThresholdMode {
    /// Output as soon as n−f reports cover the threshold; needs f < n/3.
    #[default]
    Lazy = 0,
    /// Close collection at a deadline; tolerates f < n/2.
    Timer = 1,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("need at least one challenger")]
    NoChallengers,
    #[error("f = {f} too large for n = {n} in {mode:?} mode")]
    Threshold { n: u32, f: u32, mode: ThresholdMode },
    #[error("claimed bandwidth must be positive and finite, got {0}")]
    Bandwidth(f64),
    #[error("duration must be positive")]
    Duration,
    #[error("duration too short: k rounds to {k:.3} packets")]
    DurationTooShort { k: f64 },
    #[error("overprovision factor must be at least 1, got {0}")]
    Overprovision(f64),
    #[error("expected {expected} latencies, got {actual}")]
    LatencyCount { expected: usize, actual: usize },
    #[error("no latency samples")]
    NoSamples,
}

/// The tuple the verifier broadcasts before a challenge.
///
/// `k` and everything derived from it count wire packets of `packet_bytes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChallengeParams {
    pub t0_ns: u64,
    pub m0: [u8; 32],
    pub theta_claimed: f64,
    /// Per-challenger send rate in bits/s.
    pub theta0: f64,
    pub n: u32,
    pub f: u32,
    pub k: u32,
    pub packet_bytes: u32,
    pub duration_ns: u64,
    pub overprovision: f64,
    pub rate_policy: RatePolicy,
    pub threshold_mode: ThresholdMode,
}

pub fn max_faults(n: u32, mode: ThresholdMode) -> u32 {
    match mode {
        ThresholdMode::Lazy => n.saturating_sub(1) / 3,
        ThresholdMode::Timer => n.saturating_sub(1) / 2,
    }
}

/// Derives lazy-mode parameters with the default overprovisioning.
pub fn derive_params(
    theta_claimed: f64,
    n: u32,
    f: u32,
    duration_ns: u64,
    rate_policy: RatePolicy,
) -> Result<ChallengeParams, ScheduleError> {
    derive_params_with_mode(theta_claimed, n, f, duration_ns, rate_policy, ThresholdMode::Lazy)
}

pub fn derive_params_with_mode(
    theta_claimed: f64,
    n: u32,
    f: u32,
    duration_ns: u64,
    rate_policy: RatePolicy,
    threshold_mode: ThresholdMode,
) -> Result<ChallengeParams, ScheduleError> {
    if n == 0 {
        return Err(ScheduleError::NoChallengers);
    }
    if f > max_faults(n, threshold_mode) {
        return Err(ScheduleError::Threshold { n, f, mode: threshold_mode });
    }
    if !(theta_claimed.is_finite() && theta_claimed > 0.0) {
        return Err(ScheduleError::Bandwidth(theta_claimed));
    }
    if duration_ns == 0 {
        return Err(ScheduleError::Duration);
    }
    let senders = match rate_policy {
        RatePolicy::PerN => n,
        RatePolicy::PerNMinusF => n - f,
    } as f64;
    let theta0 = theta_claimed / senders;
    let exact_k = duration_ns as f64 / NANOS_PER_SEC * theta_claimed / (senders * PACKET_BYTES as f64 * 8.0);
    let k = exact_k.round();
    if k < 1.0 {
        return Err(ScheduleError::DurationTooShort { k: exact_k });
    }
    Ok(ChallengeParams {
        t0_ns: 0,
        m0: [0; 32],
        theta_claimed,
        theta0,
        n,
        f,
        k: k as u32,
        packet_bytes: PACKET_BYTES,
        duration_ns,
        overprovision: DEFAULT_OVERPROVISION,
        rate_policy,
        threshold_mode,
    })
}

impl ChallengeParams {
    pub fn with_start(mut self, t0_ns: u64) -> Self {
        self.t0_ns = t0_ns;
        self
    }

    pub fn with_m0(mut self, m0: [u8; 32]) -> Self {
        self.m0 = m0;
        self
    }

    pub fn with_overprovision(mut self, rho: f64) -> Result<Self, ScheduleError> {
        if !(rho.is_finite() && rho >= 1.0) {
            return Err(ScheduleError::Overprovision(rho));
        }
        self.overprovision = rho;
        Ok(self)
    }

    /// Packets the prover must collect before responding: (n−f)·k.
    pub fn threshold(&self) -> u64 {
        u64::from(self.n - self.f) * u64::from(self.k)
    }

    /// Packets each challenger sends: ⌈ρk⌉.
    pub fn packets_per_challenger(&self) -> u32 {
        overprovision_count(self.k, self.overprovision)
    }

    /// Time for one packet at the claimed backhaul rate.
    pub fn service_time_ns(&self) -> f64 {
        self.packet_bytes as f64 * 8.0 * NANOS_PER_SEC / self.theta_claimed
    }

    /// Offset of packet `p` from the challenger's first send.
    pub fn packet_offset_ns(&self, p: u32) -> u64 {
        (p as f64 * self.packet_bytes as f64 * 8.0 * NANOS_PER_SEC / self.theta0).round() as u64
    }

    /// Bytes all challengers send in total: n·⌈ρk⌉·b.
    pub fn total_challenge_bytes(&self) -> u64 {
        u64::from(self.n) * u64::from(self.packets_per_challenger()) * u64::from(self.packet_bytes)
    }
}

/// ⌈ρ·k⌉, tolerant of binary rounding in ρ (1.1·20 is 22, not 23).
pub fn overprovision_count(k: u32, rho: f64) -> u32 {
    let x = rho * k as f64;
    let nearest = x.round();
    if (x - nearest).abs() < 1e-9 * x.max(1.0) {
        nearest as u32
    } else {
        x.ceil() as u32
    }
}

/// When each challenger starts sending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SendSchedule {
    /// First-send instant t_i1 per challenger.
    pub first_send_ns: Vec<u64>,
    /// One-way latency estimate l_i per challenger.
    pub latency_ns: Vec<u64>,
    /// ⌈ρk⌉ packets per challenger.
    pub packets: u32,
    offsets_ns: Vec<u64>,
}

impl SendSchedule {
    /// Send instant of packet `p` (0-based) of challenger `i`.
    pub fn send_time(&self, i: usize, p: u32) -> u64 {
        self.first_send_ns[i] + self.offsets_ns[p as usize]
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets_ns
    }

    /// t_i1 + l_i, identical for every challenger.
    pub fn aligned_arrival(&self, i: usize) -> u64 {
        self.first_send_ns[i] + self.latency_ns[i]
    }
}

/// Staggers first sends so every challenger's first packet reaches the prover
/// at t0 + max l_i.
pub fn send_schedule(params: &ChallengeParams, latencies_ns: &[u64]) -> Result<SendSchedule, ScheduleError> {
    if latencies_ns.len() != params.n as usize {
        return Err(ScheduleError::LatencyCount { expected: params.n as usize, actual: latencies_ns.len() });
    }
    let l_ref = latencies_ns.iter().copied().max().unwrap_or(0);
    let packets = params.packets_per_challenger();
    Ok(SendSchedule {
        first_send_ns: latencies_ns.iter().map(|l| params.t0_ns + (l_ref - l)).collect(),
        latency_ns: latencies_ns.to_vec(),
        packets,
        offsets_ns: (0..packets).map(|p| params.packet_offset_ns(p)).collect(),
    })
}

/// How RTT samples become a one-way latency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyEstimator {
    #[default]
    Mean,
    /// Upper median, robust to jitter outliers.
    Median,
}

/// l_i = mean(RTT)/2.
pub fn estimate_latency(rtt_samples_ns: &[u64]) -> Result<u64, ScheduleError> {
    estimate_latency_with(rtt_samples_ns, LatencyEstimator::Mean)
}

pub fn estimate_latency_with(rtt_samples_ns: &[u64], estimator: LatencyEstimator) -> Result<u64, ScheduleError> {
    if rtt_samples_ns.is_empty() {
        return Err(ScheduleError::NoSamples);
    }
    let rtt = match estimator {
        LatencyEstimator::Mean => {
            let sum: u128 = rtt_samples_ns.iter().map(|&s| s as u128).sum();
            (sum as f64 / rtt_samples_ns.len() as f64).round() as u64
        }
        LatencyEstimator::Median => {
            let mut sorted = rtt_samples_ns.to_vec();
            sorted.sort_unstable();
            sorted[sorted.len() / 2]
        }
    };
    Ok(rtt / 2 + (rtt % 2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const MS: u64 = 1_000_000;

    #[test]
    fn honest_rows_data_volume() {
        let p = derive_params(250e6, 10, 0, 100 * MS, RatePolicy::PerN).unwrap();
        assert_eq!(p.k, 206);
        assert_eq!(p.packets_per_challenger(), 227);
        assert_eq!(p.total_challenge_bytes(), 3_436_780);
        let p = derive_params(500e6, 10, 0, 100 * MS, RatePolicy::PerN).unwrap();
        assert_eq!(p.k, 413);
        let mb = p.total_challenge_bytes() as f64 / 1e6;
        assert!((mb - 6.86).abs() / 6.86 < 0.02, "{mb}");
    }

    #[test]
    fn single_challenger() {
        let p = derive_params(100e6, 1, 0, 10 * MS, RatePolicy::PerN).unwrap();
        assert_eq!(p.theta0, 100e6);
        assert_eq!(p.k as f64, (0.01f64 * 100e6 / (1514.0 * 8.0)).round());
    }

    #[test]
    fn per_n_minus_f_split() {
        let p = derive_params(250e6, 10, 2, 100 * MS, RatePolicy::PerNMinusF).unwrap();
        assert_eq!(p.theta0, 31.25e6);
        assert_eq!(p.k, 258);
        assert!(8.0 * p.theta0 >= p.theta_claimed);
        assert_eq!(p.threshold(), 8 * 258);
    }

    #[test]
    fn parameter_errors() {
        assert_eq!(derive_params(1e6, 0, 0, MS, RatePolicy::PerN), Err(ScheduleError::NoChallengers));
        assert!(matches!(derive_params(1e6, 9, 3, MS, RatePolicy::PerN), Err(ScheduleError::Threshold { .. })));
        assert!(derive_params_with_mode(250e6, 9, 4, 100 * MS, RatePolicy::PerN, ThresholdMode::Timer).is_ok());
        assert!(matches!(derive_params(1e6, 10, 0, 1000, RatePolicy::PerN), Err(ScheduleError::DurationTooShort { .. })));
        assert!(matches!(derive_params(-1.0, 10, 0, MS, RatePolicy::PerN), Err(ScheduleError::Bandwidth(_))));
        assert_eq!(derive_params(1e6, 10, 0, 0, RatePolicy::PerN), Err(ScheduleError::Duration));
    }

    #[test]
    fn overprovision_counts() {
        assert_eq!(overprovision_count(206, 1.1), 227);
        assert_eq!(overprovision_count(1, 1.1), 2);
        assert_eq!(overprovision_count(258, 1.0), 258);
        assert_eq!(overprovision_count(20, 1.1), 22);
    }

    #[test]
    fn duration_identity_per_n_minus_f() {
        for (theta, n, f) in [(250e6, 10, 2), (500e6, 10, 3), (90e6, 7, 1), (1e9, 4, 1)] {
            let p = derive_params(theta, n, f, 100 * MS, RatePolicy::PerNMinusF).unwrap();
            let d = p.threshold() as f64 * p.packet_bytes as f64 * 8.0 / theta * 1e9;
            assert!((d - 1e8).abs() <= p.service_time_ns() * (n - f) as f64 / 2.0 + 1.0, "{d}");
        }
    }

    #[test]
    fn bandwidth_condition_monotone_in_f() {
        for f in 0..=3 {
            let p = derive_params(250e6, 10, f, 100 * MS, RatePolicy::PerNMinusF).unwrap();
            assert!(p.theta0 * (10 - f) as f64 >= 250e6 * (1.0 - 1e-12));
        }
    }

    #[test]
    fn symmetric_and_two_challenger_schedules() {
        let p = derive_params(100e6, 3, 0, 100 * MS, RatePolicy::PerN).unwrap().with_start(5 * MS);
        let s = send_schedule(&p, &[7 * MS; 3]).unwrap();
        assert!(s.first_send_ns.iter().all(|&t| t == 5 * MS));
        let p = derive_params(100e6, 2, 0, 100 * MS, RatePolicy::PerN).unwrap().with_start(5 * MS);
        let s = send_schedule(&p, &[10 * MS, 30 * MS]).unwrap();
        assert_eq!(s.first_send_ns, vec![25 * MS, 5 * MS]);
        assert_eq!(s.send_time(0, 1) - s.send_time(0, 0), p.packet_offset_ns(1));
    }

    #[test]
    fn random_latencies_align_arrivals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = derive_params(250e6, 10, 0, 100 * MS, RatePolicy::PerN).unwrap().with_start(MS);
        for _ in 0..1000 {
            let l: Vec<u64> = (0..10).map(|_| rng.gen_range(0..200 * MS)).collect();
            let s = send_schedule(&p, &l).unwrap();
            let arrivals: Vec<u64> = (0..10).map(|i| s.aligned_arrival(i)).collect();
            assert!(arrivals.iter().all(|&a| a == arrivals[0]));
            assert!(s.first_send_ns.iter().all(|&t| t >= p.t0_ns));
        }
    }

    #[test]
    fn latency_estimates() {
        assert_eq!(estimate_latency(&[25 * MS; 20]).unwrap(), 12_500_000);
        assert_eq!(estimate_latency(&[10 * MS, 30 * MS]).unwrap(), 10 * MS);
        assert_eq!(estimate_latency(&[]), Err(ScheduleError::NoSamples));
        assert_eq!(estimate_latency_with(&[2, 4, 400], LatencyEstimator::Median).unwrap(), 2);
    }
}
