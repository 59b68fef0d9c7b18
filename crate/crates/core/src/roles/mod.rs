//! Challenger, prover and verifier state machines.
//!
//! Roles never do I/O. A transport (the simulator or the live UDP harness)
//! feeds them timed events and ships whatever messages they return.

mod challenger;
mod estimate;
mod prover;
mod verifier;

use thiserror::Error;

pub use challenger::{build_packets, ChallengerPhase, ChallengerState, SendEvent};
pub use estimate::{guaranteed_bandwidth, measured_bandwidth, median, PoBOutput};
pub use prover::{PacketOutcome, ProverState, ResponseRule};
pub use verifier::{DisputeOutcome, DisputeRejection, ReportRejection, VerifierState};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RolesError {
    #[error("median of an empty list")]
    EmptyMedian,
}

#[cfg(test)]
mod tests {
    use num_rational::Ratio;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::crypto::{keygen, probe_message, verify, Digest, KeyPair, Signature};
    use crate::schedule::{send_schedule, ChallengeParams, RatePolicy, ThresholdMode};
    use crate::wire::{ChallengerReport, FailureReason, ProverReport, ResponsePacket, VerificationFailure};

    const MS: u64 = 1_000_000;

    fn params(n: u32, f: u32, k: u32, rho: f64) -> ChallengeParams {
        ChallengeParams {
            t0_ns: 10 * MS,
            m0: [9; 32],
            theta_claimed: 250e6,
            theta0: 250e6 / n as f64,
            n,
            f,
            k,
            packet_bytes: 1514,
            duration_ns: 100 * MS,
            overprovision: rho,
            rate_policy: RatePolicy::PerN,
            threshold_mode: ThresholdMode::Lazy,
        }
    }

    fn key(tag: u8, i: u32) -> KeyPair {
        let mut seed = [tag; 32];
        seed[..4].copy_from_slice(&i.to_be_bytes());
        keygen(&seed).unwrap()
    }

    struct Setup {
        params: ChallengeParams,
        challengers: Vec<ChallengerState>,
        prover: ProverState,
        verifier: VerifierState,
    }

    fn setup(p: ChallengeParams) -> Setup {
        let sched = send_schedule(&p, &vec![MS; p.n as usize]).unwrap();
        let prover_key = key(0xaa, 0);
        let challengers: Vec<ChallengerState> =
            (0..p.n).map(|i| ChallengerState::new(i, key(1, i), prover_key.public_key(), &p, &sched, 0)).collect();
        let pks = challengers.iter().map(|c| c.public_key()).collect();
        Setup { prover: ProverState::new(prover_key, &p), verifier: VerifierState::new(&p, pks), challengers, params: p }
    }

    /// Delivers every packet of every challenger in the given order and
    /// returns the responses.
    fn deliver(s: &mut Setup, order: &[(u32, u32)]) -> Vec<ResponsePacket> {
        let mut responses = Vec::new();
        for &(i, p) in order {
            s.challengers[i as usize].mark_sent(p);
            let packet = s.challengers[i as usize].packet(p).clone();
            if let PacketOutcome::Respond(r) = s.prover.on_packet(&packet) {
                assert!(responses.is_empty(), "second response set");
                responses = r;
            }
        }
        responses
    }

    fn all_probes(s: &Setup) -> Vec<(u32, u32)> {
        let per = s.params.packets_per_challenger();
        (0..per).flat_map(|p| (0..s.params.n).map(move |i| (i, p))).collect()
    }

    #[test]
    fn late_start_slides_schedule() {
        let mut s = setup(params(4, 1, 5, 1.0));
        let c = &mut s.challengers[0];
        c.prepare();
        let first = c.first_send_ns();
        let on_time = c.packets().to_vec();
        let events = c.on_start(first + 3 * MS);
        assert_eq!(c.slip_ns, 3 * MS);
        assert_eq!(events[0].at_ns, first + 3 * MS);
        assert_eq!(c.packets(), &on_time[..]);
    }

    fn start_all(s: &mut Setup) {
        for c in &mut s.challengers {
            c.on_start(0);
        }
    }

    #[test]
    fn start_schedules_one_event_per_packet() {
        let mut s = setup(params(1, 0, 22, 1.0));
        let events = s.challengers[0].on_start(0);
        assert_eq!(events.len(), 22);
        assert_eq!(events[0].at_ns, 10 * MS);
        let p = params(1, 0, 206, 1.1);
        let sched = send_schedule(&p, &[0]).unwrap();
        assert_eq!(sched.packets, 227);
        let c = &s.challengers[0];
        let sig5 = c.packet(0).signatures[5];
        assert!(verify(&c.public_key(), &probe_message(5, &s.params.m0), &sig5.0));
    }

    #[test]
    fn start_after_first_send_slides_schedule() {
        let mut s = setup(params(1, 0, 3, 1.0));
        let events = s.challengers[0].on_start(12 * MS);
        assert_eq!(events[0].at_ns, 12 * MS);
        assert_eq!(s.challengers[0].slip_ns, 2 * MS);
    }

    #[test]
    fn threshold_edge_and_dedup() {
        let mut s = setup(params(2, 0, 1, 1.0));
        start_all(&mut s);
        let first = s.challengers[0].packet(0).clone();
        assert_eq!(s.prover.on_packet(&first), PacketOutcome::Accepted);
        assert_eq!(s.prover.on_packet(&first), PacketOutcome::Duplicate);
        assert_eq!(s.prover.total_count(), 1);
        let second = s.challengers[1].packet(0).clone();
        let PacketOutcome::Respond(r) = s.prover.on_packet(&second) else { panic!("no response") };
        assert_eq!(r.len(), 2);
        assert_eq!(s.prover.on_packet(&first), PacketOutcome::Late);
    }

    #[test]
    fn response_rtt_and_forgery() {
        let mut s = setup(params(1, 0, 1, 1.0));
        start_all(&mut s);
        let r = deliver(&mut s, &[(0, 0)]);
        let mut forged = r[0];
        forged.prover_signature = Signature([7; 64]);
        let c = &mut s.challengers[0];
        assert!(!c.on_response(&forged, 200 * MS));
        assert_eq!(c.rtt_ns(), None);
        // t_i1 = t0 = 10 ms, l = 1 ms.
        assert!(c.on_response(&r[0], 10 * MS + 2 * MS + 100 * MS));
        assert_eq!(c.rtt_ns(), Some(100 * MS));
        assert_eq!(c.phase(), ChallengerPhase::AwaitingVerification);
    }

    #[test]
    fn response_before_any_send_is_flagged() {
        let mut s = setup(params(2, 0, 1, 1.0));
        start_all(&mut s);
        let a = s.challengers[0].packet(0).clone();
        let b = s.challengers[1].packet(0).clone();
        s.prover.on_packet(&a);
        let PacketOutcome::Respond(r) = s.prover.on_packet(&b) else { panic!() };
        s.challengers[0].mark_sent(0);
        assert!(s.challengers[1].on_response(&r[1], 20 * MS));
        assert!(s.challengers[1].protocol_violation);
    }

    fn verify_all(s: &mut Setup, responses: &[ResponsePacket]) -> Vec<Result<ChallengerReport, FailureReason>> {
        (0..s.params.n as usize)
            .map(|i| {
                s.challengers[i].on_response(&responses[i], 50 * MS);
                let msg = s.prover.verification_message(i as u32);
                s.challengers[i].on_verification(&msg)
            })
            .collect()
    }

    #[test]
    fn full_receipt_passes_and_flipped_bit_fails() {
        let mut s = setup(params(2, 0, 10, 1.1));
        start_all(&mut s);
        let order: Vec<(u32, u32)> = (0..11).map(|p| (0, p)).chain((0..9).map(|p| (1, p))).collect();
        let r = deliver(&mut s, &order);
        let reports = verify_all(&mut s, &r);
        assert_eq!(reports[0].unwrap().packets_acknowledged, 11);
        assert_eq!(reports[1].unwrap().packets_acknowledged, 9);

        let mut s2 = setup(params(2, 0, 10, 1.1));
        start_all(&mut s2);
        let order = all_probes(&s2);
        let r = deliver(&mut s2, &order);
        s2.challengers[0].on_response(&r[0], 50 * MS);
        let mut msg = s2.prover.verification_message(0);
        let bit = msg.bitmap.ones().next().unwrap();
        msg.bitmap.toggle(bit);
        assert_eq!(s2.challengers[0].on_verification(&msg), Err(FailureReason::ReceiptMismatch));
        assert_eq!(s2.challengers[0].phase(), ChallengerPhase::Failed(FailureReason::ReceiptMismatch));
    }

    #[test]
    fn dropped_subset_still_verifies() {
        let mut s = setup(params(1, 0, 100, 1.1));
        start_all(&mut s);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut probes: Vec<u32> = (0..110).collect();
        probes.shuffle(&mut rng);
        let kept: Vec<(u32, u32)> = probes[11..].iter().map(|&p| (0, p)).collect();
        for &p in &probes[..11] {
            s.challengers[0].mark_sent(p);
        }
        deliver(&mut s, &kept);
        let r = s.prover.respond();
        let report = verify_all(&mut s, &r)[0].unwrap();
        assert_eq!(report.packets_acknowledged, 99);
    }

    #[test]
    fn response_is_unique_across_event_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let base = setup(params(3, 0, 4, 1.1));
        let mut base = base;
        start_all(&mut base);
        for _ in 0..100 {
            let mut s = Setup {
                params: base.params.clone(),
                challengers: base.challengers.clone(),
                prover: ProverState::new(key(0xaa, 0), &base.params),
                verifier: base.verifier.clone(),
            };
            let mut order = all_probes(&s);
            order.shuffle(&mut rng);
            let extra: Vec<(u32, u32)> = order.iter().take(rng.gen_range(0..5)).copied().collect();
            order.extend(extra);
            let mut sets = 0;
            for &(i, p) in &order {
                if let PacketOutcome::Respond(_) = s.prover.on_packet(s.challengers[i as usize].packet(p)) {
                    sets += 1;
                }
            }
            assert_eq!(sets, 1);
            assert_eq!(s.prover.total_count(), 12);
        }
    }

    fn run_honest(s: &mut Setup) -> Vec<ChallengerReport> {
        start_all(s);
        let order = all_probes(s);
        let r = deliver(s, &order);
        verify_all(s, &r).into_iter().map(Result::unwrap).collect()
    }

    #[test]
    fn verifier_outputs_once_with_exact_identity() {
        let mut s = setup(params(4, 1, 5, 1.0));
        let reports = run_honest(&mut s);
        let root = s.prover.prover_report().unwrap();
        // Reports before the commitment are buffered.
        assert_eq!(s.verifier.on_report(&reports[0]), Ok(None));
        assert_eq!(s.verifier.on_report(&reports[1]), Ok(None));
        assert!(s.verifier.on_prover_report(&root).is_none());
        // Round-robin delivery stops at 15 packets: 4 + 4 + 4 + 3.
        assert_eq!(s.verifier.on_report(&reports[2]), Ok(None));
        let out = s.verifier.on_report(&reports[3]).unwrap().expect("all reports cover (n−f)k = 15");
        assert_eq!(out.cnt, 15);
        assert_eq!(out.guaranteed_bw / out.measured_bw, 2.0 / 3.0);
        assert_eq!(s.verifier.on_report(&reports[3]), Err(ReportRejection::Duplicate));
        let mut bad = reports[0];
        bad.challenger_id = 9;
        assert_eq!(s.verifier.on_report(&bad), Err(ReportRejection::UnknownChallenger));
    }

    #[test]
    fn root_mismatch_is_rejected() {
        let mut s = setup(params(2, 0, 2, 1.0));
        let reports = run_honest(&mut s);
        s.verifier.on_prover_report(&s.prover.prover_report().unwrap());
        let mut bad = reports[0];
        bad.merkle_root_seen = Digest([1; 32]);
        assert_eq!(s.verifier.on_report(&bad), Err(ReportRejection::RootMismatch));
    }

    #[test]
    fn exact_scalar_verifier() {
        let mut s = setup(params(4, 1, 5, 1.0));
        let reports = run_honest(&mut s);
        let pks = s.challengers.iter().map(|c| c.public_key()).collect();
        let mut v: VerifierState<Ratio<i128>> = VerifierState::new(&s.params, pks);
        v.on_prover_report(&s.prover.prover_report().unwrap());
        let out = reports.iter().find_map(|r| v.on_report(r).unwrap()).unwrap();
        assert_eq!(out.guaranteed_bw / out.measured_bw, Ratio::new(2, 3));
    }

    #[test]
    fn withheld_report_is_recovered_by_dispute() {
        let mut s = setup(params(4, 1, 5, 1.0));
        let reports = run_honest(&mut s);
        s.verifier.on_prover_report(&s.prover.prover_report().unwrap());
        // Challenger 3 withholds its report.
        for r in &reports[..3] {
            assert_eq!(s.verifier.on_report(r), Ok(None));
        }
        let request = s.verifier.on_deadline().expect("output outstanding");
        let disputes = s.prover.on_forwarded_reports(&request);
        assert_eq!(disputes.len(), 1);
        let (outcome, out) = s.verifier.resolve_dispute(&disputes[0]);
        assert_eq!(outcome, DisputeOutcome::ProverUpheld { credited: 3 });
        let out = out.expect("dispute closes the gap");
        assert_eq!(out.reported_cnt, 15);
        assert_eq!(out.disputes_upheld, 1);
    }

    #[test]
    fn dispute_with_wrong_set_or_forged_signatures_is_rejected() {
        let mut s = setup(params(2, 0, 3, 1.0));
        run_honest(&mut s);
        s.verifier.on_prover_report(&s.prover.prover_report().unwrap());
        let mut sub = s.prover.dispute(1);
        sub.packets.pop();
        assert_eq!(
            s.verifier.resolve_dispute(&sub).0,
            DisputeOutcome::ProverRejected(DisputeRejection::MerkleMismatch)
        );

        // A forging prover commits to fabricated probes so the Merkle check
        // passes and only the signature check can catch it.
        let mut s = setup(params(2, 0, 3, 1.0));
        start_all(&mut s);
        for p in 0..3 {
            s.prover.on_packet(s.challengers[0].packet(p));
        }
        s.prover.forge_missing(1, |_| Signature([0x5a; 64]));
        s.prover.respond();
        s.verifier.on_prover_report(&s.prover.prover_report().unwrap());
        let sub = s.prover.dispute(1);
        assert!(matches!(
            s.verifier.resolve_dispute(&sub).0,
            DisputeOutcome::ProverRejected(DisputeRejection::BadSignature { .. })
        ));
    }

    #[test]
    fn failure_claim_triggers_upheld_dispute() {
        let mut s = setup(params(4, 1, 5, 1.0));
        let reports = run_honest(&mut s);
        s.verifier.on_prover_report(&s.prover.prover_report().unwrap());
        let req = s.verifier.on_failure(&VerificationFailure { challenger_id: 0, reason: FailureReason::Unspecified });
        let disputes = s.prover.on_forwarded_reports(&req.unwrap());
        let (outcome, _) = s.verifier.resolve_dispute(&disputes[0]);
        assert_eq!(outcome, DisputeOutcome::ProverUpheld { credited: 4 });
        assert_eq!(s.verifier.on_report(&reports[0]), Err(ReportRejection::Duplicate));
        for r in &reports[1..] {
            s.verifier.on_report(r).unwrap();
        }
        assert!(s.verifier.output().is_some());
    }

    #[test]
    fn timer_mode_waits_for_finalize() {
        let mut p = params(4, 1, 5, 1.0);
        p.threshold_mode = ThresholdMode::Timer;
        let mut s = setup(p);
        let reports = run_honest(&mut s);
        s.verifier.on_prover_report(&ProverReport { prover_id: 0, merkle_root: s.prover.root().unwrap() });
        for r in &reports {
            assert_eq!(s.verifier.on_report(r), Ok(None));
        }
        assert!(s.verifier.finalize().is_some());
    }

    #[test]
    fn median_robust_to_f_fabricated_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let n = rng.gen_range(4..20u32);
            let f = (n - 1) / 3;
            let m = rng.gen_range(n - f..=n) as usize;
            let honest: Vec<u64> = (0..m).map(|_| rng.gen_range(90..110)).collect();
            let mut values = honest.clone();
            for v in values.iter_mut().take(f as usize) {
                *v = if rng.gen() { 1 } else { u64::MAX };
            }
            let untouched = &honest[f as usize..];
            let med = median(&values).unwrap();
            assert!(med >= *untouched.iter().min().unwrap() && med <= *untouched.iter().max().unwrap());
        }
    }
}
