//! Byte-exact fixtures for every message kind. Run the ignored
//! `regenerate_fixtures` test after an intentional format change.

use std::path::PathBuf;

use pob_core::crypto::{keygen, merkle_prove, probe_message, Digest, Signature};
use pob_core::schedule::{derive_params, RatePolicy};
use pob_core::wire::{
    Bitmap, ChallengePacket, ChallengerReport, DisputeSubmission, FailureReason, ForwardedReport, Message, Ping,
    ProverReport, ReportStatus, ResponsePacket, VerificationFailure, VerificationMessage,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn samples() -> Vec<(&'static str, Message)> {
    let kp = keygen(&[3u8; 32]).unwrap();
    let m0 = [9u8; 32];
    let signatures = (44..66).map(|seq| kp.sign(&probe_message(seq, &m0))).collect();
    let leaves: Vec<Digest> = (0..5u8).map(|i| Digest::of(&[i])).collect();
    let proof = merkle_prove(&leaves, 2).unwrap();
    let root = Digest::of(b"root");
    let params = derive_params(250e6, 10, 3, 100_000_000, RatePolicy::PerNMinusF)
        .unwrap()
        .with_start(1_000_000_000)
        .with_m0(m0);
    vec![
        ("challenge", Message::Challenge(ChallengePacket { challenger_id: 4, base_seq: 44, nonce: *b"noncenon", signatures })),
        (
            "response",
            Message::Response(ResponsePacket { receipt: leaves[2], merkle_root: root, prover_signature: kp.sign(b"r") }),
        ),
        (
            "verification",
            Message::Verification(VerificationMessage {
                bitmap: Bitmap::from_indices(13, [0, 3, 12]),
                merkle_proof: proof.clone(),
            }),
        ),
        (
            "report",
            Message::Report(ChallengerReport {
                challenger_id: 2,
                prover_id: 0,
                merkle_root_seen: root,
                rtt_ns: 98_765_432,
                packets_acknowledged: 227,
            }),
        ),
        (
            "dispute",
            Message::Dispute(DisputeSubmission {
                challenger_id: 2,
                packets: vec![(1, Signature([1; 64])), (5, Signature([5; 64]))],
                merkle_proof: proof,
            }),
        ),
        ("prover_report", Message::ProverReport(ProverReport { prover_id: 0, merkle_root: root })),
        (
            "failure",
            Message::VerificationFailure(VerificationFailure { challenger_id: 7, reason: FailureReason::MerkleMismatch }),
        ),
        ("ping", Message::Ping(Ping { from: 1, nonce: 0x0102_0304_0506_0708 })),
        ("pong", Message::Pong(Ping { from: 1, nonce: 42 })),
        ("params", Message::Params(params)),
        (
            "forwarded",
            Message::ForwardedReports(vec![
                ForwardedReport { challenger_id: 0, status: ReportStatus::Accepted, credited: 227 },
                ForwardedReport { challenger_id: 1, status: ReportStatus::Missing, credited: 0 },
            ]),
        ),
    ]
}

#[test]
fn encodings_match_fixtures() {
    for (name, msg) in samples() {
        let path = fixtures().join(format!("{name}.hex"));
        let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let bytes = msg.encode();
        assert_eq!(hex::encode(&bytes), want.trim(), "{name}");
        assert_eq!(Message::decode(&bytes).unwrap(), msg, "{name}");
    }
}

#[test]
#[ignore]
fn regenerate_fixtures() {
    std::fs::create_dir_all(fixtures()).unwrap();
    for (name, msg) in samples() {
        std::fs::write(fixtures().join(format!("{name}.hex")), hex::encode(msg.encode()) + "\n").unwrap();
    }
}

#[test]
fn random_messages_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10_000 {
        let mut root = [0u8; 32];
        rng.fill_bytes(&mut root);
        let report = ChallengerReport {
            challenger_id: rng.gen(),
            prover_id: rng.gen(),
            merkle_root_seen: Digest(root),
            rtt_ns: rng.gen_range(1..u64::MAX),
            packets_acknowledged: rng.gen(),
        };
        let m = Message::Report(report);
        assert_eq!(Message::decode(&m.encode()).unwrap(), m);

        let len = rng.gen_range(1..300u32);
        let ones: Vec<u32> = (0..len).filter(|_| rng.gen_bool(0.3)).collect();
        let leaves: Vec<Digest> = (0..rng.gen_range(1..12u8)).map(|i| Digest::of(&[i])).collect();
        let at = rng.gen_range(0..leaves.len());
        let v = VerificationMessage { bitmap: Bitmap::from_indices(len, ones), merkle_proof: merkle_prove(&leaves, at).unwrap() };
        let m = Message::Verification(v);
        let bytes = m.encode();
        assert_eq!(Message::decode(&bytes).unwrap(), m);
        // Truncation is always detected.
        let cut = rng.gen_range(0..bytes.len());
        assert!(Message::decode(&bytes[..cut]).is_err());
    }
}
