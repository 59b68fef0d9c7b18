use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Per-packet delay noise added after propagation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Jitter {
    #[default]
    None,
    Uniform { lo_ns: u64, hi_ns: u64 },
    /// Truncated at zero.
    Normal { mean_ns: f64, std_ns: f64 },
}

impl Jitter {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match *self {
            Jitter::None => 0,
            Jitter::Uniform { lo_ns, hi_ns } => {
                if hi_ns <= lo_ns {
                    lo_ns
                } else {
                    rng.gen_range(lo_ns..=hi_ns)
                }
            }
            Jitter::Normal { mean_ns, std_ns } => {
                let d = Normal::new(mean_ns, std_ns.max(0.0)).expect("finite normal parameters");
                d.sample(rng).max(0.0).round() as u64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    pub rate_bps: f64,
    pub propagation_ns: u64,
    #[serde(default)]
    pub jitter: Jitter,
    /// Drop-tail limit on queued bytes.
    pub queue_capacity_bytes: u64,
    #[serde(default)]
    pub loss_rate: f64,
}

pub const DEFAULT_BACKHAUL_QUEUE: u64 = 1_500_000;

impl LinkModel {
    pub fn new(rate_bps: f64, propagation_ns: u64) -> Self {
        LinkModel { rate_bps, propagation_ns, jitter: Jitter::None, queue_capacity_bytes: DEFAULT_BACKHAUL_QUEUE, loss_rate: 0.0 }
    }

    /// Transmission time of `bytes` in nanoseconds, unrounded.
    pub fn tx_ns(&self, bytes: u32) -> f64 {
        f64::from(bytes) * 8.0 * 1e9 / self.rate_bps
    }
}

/// Extra time the prover spends before its response leaves.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComputeOverhead {
    #[default]
    Zero,
    Fixed { ns: u64 },
    /// Interpolated from measured hashing and signing cost at the claimed
    /// bandwidth, see [`calibrate_overhead`].
    Table,
}

impl ComputeOverhead {
    pub fn delay_ns(&self, theta_claimed: f64) -> u64 {
        match *self {
            ComputeOverhead::Zero => 0,
            ComputeOverhead::Fixed { ns } => ns,
            ComputeOverhead::Table => calibrate_overhead(theta_claimed),
        }
    }
}

const OVERHEAD_POINTS: [(f64, f64); 3] = [(500e6, 4.6e6), (750e6, 7.3e6), (1000e6, 10.2e6)];

/// Response overhead in ns at backhaul rate `theta_bps`: piecewise linear
/// through (500 Mbps, 4.6 ms), (750, 7.3), (1000, 10.2), extended linearly
/// past both ends and floored at zero.
pub fn calibrate_overhead(theta_bps: f64) -> u64 {
    let [a, b, c] = OVERHEAD_POINTS;
    let (lo, hi) = if theta_bps <= b.0 { (a, b) } else { (b, c) };
    let y = lo.1 + (theta_bps - lo.0) * (hi.1 - lo.1) / (hi.0 - lo.0);
    y.max(0.0).round() as u64
}

/// Clock offsets: local time = true time + offset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OffsetModel {
    #[default]
    Zero,
    /// Offsets for challengers 0..n in order, then the prover.
    Fixed { offsets_ns: Vec<i64> },
    /// Drawn once per node per run, uniform in ±max.
    Uniform { max_abs_ns: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SideChannel {
    pub challenger: u32,
    pub delay_ns: u64,
}

/// Fluid background flow on the backhaul. Times are relative to t0; an
/// empty `on` list means always on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossFlow {
    pub rate_bps: f64,
    #[serde(default)]
    pub on: Vec<(u64, u64)>,
}

impl CrossFlow {
    pub fn constant(rate_bps: f64) -> Self {
        CrossFlow { rate_bps, on: Vec::new() }
    }

    fn active(&self, rel_ns: i128) -> bool {
        self.on.is_empty() || self.on.iter().any(|&(a, b)| rel_ns >= a as i128 && rel_ns < b as i128)
    }
}

/// Challengers reach the core over their own uplinks; the core reaches the
/// prover over the backhaul.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub uplinks: Vec<LinkModel>,
    pub backhaul: LinkModel,
    #[serde(default)]
    pub clock_offsets: OffsetModel,
    #[serde(default)]
    pub compute_overhead: ComputeOverhead,
    #[serde(default)]
    pub side_channels: Vec<SideChannel>,
    #[serde(default)]
    pub cross_traffic: Vec<CrossFlow>,
    /// Fraction of cross traffic that backs off while challenge packets are
    /// queued on the backhaul.
    #[serde(default)]
    pub cross_feedback: f64,
    /// One-way delay of every message to or from the verifier.
    #[serde(default = "default_verifier_delay")]
    pub verifier_delay_ns: u64,
}

fn default_verifier_delay() -> u64 {
    10_000_000
}

pub const IDEAL_ACCESS_RATE: f64 = 10e9;

impl Topology {
    /// Noise-free topology: 10 Gbps uplinks with 5 ms propagation and a
    /// zero-delay backhaul at `theta_p`.
    pub fn ideal(n: u32, theta_p: f64) -> Self {
        Topology::uniform(n, theta_p, IDEAL_ACCESS_RATE, 5_000_000)
    }

    pub fn uniform(n: u32, theta_p: f64, access_rate: f64, propagation_ns: u64) -> Self {
        let mut uplink = LinkModel::new(access_rate, propagation_ns);
        uplink.queue_capacity_bytes = u64::MAX;
        Topology {
            uplinks: vec![uplink; n as usize],
            backhaul: LinkModel::new(theta_p, 0),
            clock_offsets: OffsetModel::Zero,
            compute_overhead: ComputeOverhead::Zero,
            side_channels: Vec::new(),
            cross_traffic: Vec::new(),
            cross_feedback: 0.0,
            verifier_delay_ns: default_verifier_delay(),
        }
    }

    pub fn with_side_channels(mut self, challengers: &[u32], delay_ns: u64) -> Self {
        self.side_channels.extend(challengers.iter().map(|&challenger| SideChannel { challenger, delay_ns }));
        self
    }

    pub fn with_cross_traffic(mut self, flow: CrossFlow) -> Self {
        self.cross_traffic.push(flow);
        self
    }

    pub fn n(&self) -> u32 {
        self.uplinks.len() as u32
    }

    pub fn side_channel(&self, challenger: u32) -> Option<&SideChannel> {
        self.side_channels.iter().find(|s| s.challenger == challenger)
    }

    /// Backhaul rate left for challenge traffic at `rel_ns` after t0.
    pub fn available_rate(&self, rel_ns: i128, challenge_backlogged: bool) -> f64 {
        let cross: f64 = self.cross_traffic.iter().filter(|c| c.active(rel_ns)).map(|c| c.rate_bps).sum();
        let yielded = if challenge_backlogged { cross * self.cross_feedback } else { 0.0 };
        (self.backhaul.rate_bps - cross + yielded).max(self.backhaul.rate_bps * 1e-3)
    }

    /// Draws one offset per challenger plus the prover.
    pub fn draw_offsets<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<i64> {
        let nodes = self.uplinks.len() + 1;
        match &self.clock_offsets {
            OffsetModel::Zero => vec![0; nodes],
            OffsetModel::Fixed { offsets_ns } => (0..nodes).map(|i| offsets_ns.get(i).copied().unwrap_or(0)).collect(),
            OffsetModel::Uniform { max_abs_ns } => (0..nodes).map(|_| rng.gen_range(-max_abs_ns..=*max_abs_ns)).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let links = self.uplinks.iter().enumerate().map(|(i, l)| (format!("uplink {i}"), l));
        for (name, link) in links.chain(std::iter::once(("backhaul".to_string(), &self.backhaul))) {
            if !(link.rate_bps.is_finite() && link.rate_bps > 0.0) {
                return Err(format!("{name}: rate must be positive"));
            }
            if !(0.0..=1.0).contains(&link.loss_rate) {
                return Err(format!("{name}: loss_rate must be in [0, 1]"));
            }
            if let Jitter::Normal { mean_ns, std_ns } = link.jitter {
                if !(mean_ns.is_finite() && std_ns.is_finite() && std_ns >= 0.0) {
                    return Err(format!("{name}: invalid normal jitter"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.cross_feedback) {
            return Err("cross_feedback must be in [0, 1]".into());
        }
        if self.cross_traffic.iter().any(|c| !(c.rate_bps.is_finite() && c.rate_bps >= 0.0)) {
            return Err("cross traffic rate must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn overhead_table_points_and_interpolation() {
        assert_eq!(calibrate_overhead(500e6), 4_600_000);
        assert_eq!(calibrate_overhead(750e6), 7_300_000);
        assert_eq!(calibrate_overhead(1000e6), 10_200_000);
        assert_eq!(calibrate_overhead(875e6), 8_750_000);
        assert_eq!(calibrate_overhead(250e6), 1_900_000);
        assert_eq!(calibrate_overhead(10e6), 0);
        assert_eq!(calibrate_overhead(1250e6), 13_100_000);
    }

    #[test]
    fn jitter_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let u = Jitter::Uniform { lo_ns: 10, hi_ns: 20 }.sample(&mut rng);
            assert!((10..=20).contains(&u));
            let _ = Jitter::Normal { mean_ns: 0.0, std_ns: 5.0 }.sample(&mut rng);
        }
        assert_eq!(Jitter::None.sample(&mut rng), 0);
    }

    #[test]
    fn cross_traffic_and_feedback() {
        let mut t = Topology::ideal(2, 250e6).with_cross_traffic(CrossFlow { rate_bps: 160e6, on: vec![(0, 100)] });
        t.cross_feedback = 0.1;
        assert_eq!(t.available_rate(50, false), 90e6);
        assert!((t.available_rate(50, true) - 106e6).abs() < 1.0);
        assert_eq!(t.available_rate(200, true), 250e6);
    }
}
