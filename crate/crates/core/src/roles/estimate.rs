use serde::{Deserialize, Serialize};

use super::RolesError;
use crate::num::Scalar;
use crate::schedule::NANOS_PER_SEC;

/// Upper median: element `floor(m/2)` of the sorted values.
pub fn median<T: Ord + Copy>(values: &[T]) -> Result<T, RolesError> {
    if values.is_empty() {
        return Err(RolesError::EmptyMedian);
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    Ok(sorted[sorted.len() / 2])
}

/// The verifier's final estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoBOutput<S = f64> {
    /// cnt·b·8/Δ′ in bits/s.
    pub measured_bw: S,
    /// Δ′, upper median of accepted round-trip times.
    pub delta_median_ns: u64,
    /// measured_bw·(n−2f)/(n−f).
    pub guaranteed_bw: S,
    pub accepted_reports: u32,
    /// Packet count used in the estimate, capped at (n−f)k.
    pub cnt: u64,
    /// Sum of credited packets before the cap.
    pub reported_cnt: u64,
    /// Challengers credited through upheld disputes.
    pub disputes_upheld: u32,
}

impl<S: Scalar> PoBOutput<S> {
    pub fn to_f64(&self) -> PoBOutput<f64> {
        PoBOutput {
            measured_bw: self.measured_bw.as_f64(),
            delta_median_ns: self.delta_median_ns,
            guaranteed_bw: self.guaranteed_bw.as_f64(),
            accepted_reports: self.accepted_reports,
            cnt: self.cnt,
            reported_cnt: self.reported_cnt,
            disputes_upheld: self.disputes_upheld,
        }
    }
}

/// cnt·b·8/Δ′ in bits/s.
pub fn measured_bandwidth<S: Scalar>(cnt: u64, packet_bytes: u32, delta_ns: u64) -> S {
    let bits = S::from_count(cnt) * S::from_count(u64::from(packet_bytes) * 8);
    bits * S::from_count(NANOS_PER_SEC as u64) / S::from_count(delta_ns)
}

/// Scales a measured bandwidth by (n−2f)/(n−f).
pub fn guaranteed_bandwidth<S: Scalar>(measured: S, n: u32, f: u32) -> S {
    measured * S::from_count(u64::from(n - 2 * f)) / S::from_count(u64::from(n - f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    #[test]
    fn median_rule() {
        assert_eq!(median(&[3]).unwrap(), 3);
        assert_eq!(median(&[4, 1, 3, 2]).unwrap(), 3);
        let mut v = vec![100_000_000u64; 6];
        v.extend([1, 1]);
        assert_eq!(median(&v).unwrap(), 100_000_000);
        assert_eq!(median::<u64>(&[]), Err(RolesError::EmptyMedian));
    }

    #[test]
    fn f_zero_example() {
        let m: f64 = measured_bandwidth(2060, 1514, 100_000_000);
        assert!((m - 2060.0 * 1514.0 * 8.0 / 0.1).abs() < 1e-3);
        assert!((m / 1e6 - 249.5).abs() < 0.05);
        assert_eq!(guaranteed_bandwidth(m, 10, 0), m);
    }

    #[test]
    fn exact_correction_factor() {
        let m: Ratio<i128> = measured_bandwidth(2064, 1514, 99_997_123);
        let g = guaranteed_bandwidth(m, 10, 2);
        assert_eq!(g / m, Ratio::new(6, 8));
        let m32: f32 = measured_bandwidth(2064, 1514, 99_997_123);
        assert!((m32 as f64 - m.as_f64()).abs() / m.as_f64() < 1e-6);
    }
}
