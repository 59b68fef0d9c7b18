use log::warn;

use crate::crypto::{hash_sorted_entries, merkle_verify, probe_message, response_message, verify, KeyPair, PublicKey, Signature};
use crate::schedule::{ChallengeParams, SendSchedule};
use crate::wire::{ChallengePacket, ChallengerReport, FailureReason, ResponsePacket, VerificationMessage, SIGS_PER_PACKET};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChallengerPhase {
    Idle,
    Measuring,
    AwaitingVerification,
    Reported,
    Failed(FailureReason),
}

/// A timed send of one precomputed packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendEvent {
    pub at_ns: u64,
    pub probe: u32,
}

/// Challenger side of the measurement and verification phases.
///
/// All times are on the challenger's local clock.
#[derive(Debug, Clone)]
pub struct ChallengerState {
    pub id: u32,
    pub prover_id: u32,
    keypair: KeyPair,
    prover_pk: PublicKey,
    params: ChallengeParams,
    first_send_ns: u64,
    latency_ns: u64,
    offsets_ns: Vec<u64>,
    nonce_seed: u64,
    packets: Vec<ChallengePacket>,
    sent: Vec<bool>,
    sends_done: u32,
    response: Option<ResponsePacket>,
    rtt_ns: Option<u64>,
    phase: ChallengerPhase,
    /// Set when a valid response arrives before this challenger sent anything.
    pub protocol_violation: bool,
    pub slip_ns: u64,
}

impl ChallengerState {
    pub fn new(
        id: u32,
        keypair: KeyPair,
        prover_pk: PublicKey,
        params: &ChallengeParams,
        schedule: &SendSchedule,
        nonce_seed: u64,
    ) -> Self {
        let packets = schedule.packets as usize;
        ChallengerState {
            id,
            prover_id: 0,
            keypair,
            prover_pk,
            params: params.clone(),
            first_send_ns: schedule.first_send_ns[id as usize],
            latency_ns: schedule.latency_ns[id as usize],
            offsets_ns: schedule.offsets().to_vec(),
            nonce_seed,
            packets: Vec::with_capacity(packets),
            sent: vec![false; packets],
            sends_done: 0,
            response: None,
            rtt_ns: None,
            phase: ChallengerPhase::Idle,
            protocol_violation: false,
            slip_ns: 0,
        }
    }

    pub fn phase(&self) -> ChallengerPhase {
        self.phase
    }

    pub fn rtt_ns(&self) -> Option<u64> {
        self.rtt_ns
    }

    pub fn first_send_ns(&self) -> u64 {
        self.first_send_ns
    }

    pub fn public_key(&self) -> PublicKey {
        self.keypair.public_key()
    }

    pub fn keypair(&self) -> &KeyPair {
        &self.keypair
    }

    pub fn packet_count(&self) -> u32 {
        self.sent.len() as u32
    }

    /// Precomputes every signature. Real-time callers do this before
    /// reading the clock for `on_start`, since signing takes a while.
    pub fn prepare(&mut self) {
        if self.packets.is_empty() {
            self.packets = build_packets(&self.keypair, self.id, &self.params.m0, self.packet_count(), self.nonce_seed);
        }
    }

    /// Signs the packets if `prepare` was not called and returns one send
    /// event per packet.
    ///
    /// If `now` is already past the first send instant the whole schedule
    /// slides forward and the slip is logged.
    pub fn on_start(&mut self, now_ns: u64) -> Vec<SendEvent> {
        assert_eq!(self.phase, ChallengerPhase::Idle, "challenger {} started twice", self.id);
        self.prepare();
        if now_ns > self.first_send_ns {
            self.slip_ns = now_ns - self.first_send_ns;
            warn!("challenger {}: schedule slipped by {} ns", self.id, self.slip_ns);
            self.first_send_ns = now_ns;
        }
        self.phase = ChallengerPhase::Measuring;
        self.offsets_ns
            .iter()
            .enumerate()
            .map(|(p, off)| SendEvent { at_ns: self.first_send_ns + off, probe: p as u32 })
            .collect()
    }

    pub fn packet(&self, probe: u32) -> &ChallengePacket {
        &self.packets[probe as usize]
    }

    pub fn packets(&self) -> &[ChallengePacket] {
        &self.packets
    }

    /// Records that `probe` left this challenger.
    pub fn mark_sent(&mut self, probe: u32) {
        if !std::mem::replace(&mut self.sent[probe as usize], true) {
            self.sends_done += 1;
        }
    }

    pub fn sends_done(&self) -> u32 {
        self.sends_done
    }

    /// Accepts the prover's response if its signature verifies; returns
    /// whether it was accepted.
    pub fn on_response(&mut self, resp: &ResponsePacket, now_ns: u64) -> bool {
        if self.rtt_ns.is_some() || !matches!(self.phase, ChallengerPhase::Measuring | ChallengerPhase::Idle) {
            return false;
        }
        let msg = response_message(&resp.receipt, &resp.merkle_root);
        if !verify(&self.prover_pk, &msg, &resp.prover_signature.0) {
            return false;
        }
        if self.sends_done == 0 {
            self.protocol_violation = true;
        }
        let rtt = now_ns.saturating_sub(self.first_send_ns).saturating_sub(2 * self.latency_ns);
        self.rtt_ns = Some(rtt.max(1));
        self.response = Some(*resp);
        self.phase = ChallengerPhase::AwaitingVerification;
        true
    }

    /// Checks the prover's bitmap and Merkle proof against the response.
    pub fn on_verification(&mut self, msg: &VerificationMessage) -> Result<ChallengerReport, FailureReason> {
        let outcome = self.check_verification(msg);
        self.phase = match outcome {
            Ok(_) => ChallengerPhase::Reported,
            Err(reason) => ChallengerPhase::Failed(reason),
        };
        outcome
    }

    fn check_verification(&self, msg: &VerificationMessage) -> Result<ChallengerReport, FailureReason> {
        let (Some(resp), Some(rtt)) = (self.response, self.rtt_ns) else {
            return Err(FailureReason::NoResponse);
        };
        if msg.bitmap.len() != self.packet_count() {
            return Err(FailureReason::ReceiptMismatch);
        }
        // A bit for a probe that never left cannot be honest.
        if msg.bitmap.ones().any(|p| !self.sent[p as usize]) {
            return Err(FailureReason::ReceiptMismatch);
        }
        let entries = msg.bitmap.ones().flat_map(|p| self.packets[p as usize].entries());
        let receipt = hash_sorted_entries(entries.collect::<Vec<_>>().iter().map(|(s, sig)| (*s, sig)));
        if receipt != resp.receipt {
            return Err(FailureReason::ReceiptMismatch);
        }
        if msg.merkle_proof.leaf_index != self.id || !merkle_verify(&resp.merkle_root, &receipt, &msg.merkle_proof) {
            return Err(FailureReason::MerkleMismatch);
        }
        Ok(ChallengerReport {
            challenger_id: self.id,
            prover_id: self.prover_id,
            merkle_root_seen: resp.merkle_root,
            rtt_ns: rtt,
            packets_acknowledged: msg.bitmap.count_ones(),
        })
    }

    /// Report this challenger would file with the data it holds, without
    /// running the verification checks. Used by misbehaving challengers.
    pub fn unchecked_report(&self, acknowledged: u32) -> Option<ChallengerReport> {
        let resp = self.response?;
        Some(ChallengerReport {
            challenger_id: self.id,
            prover_id: self.prover_id,
            merkle_root_seen: resp.merkle_root,
            rtt_ns: self.rtt_ns.unwrap_or(1),
            packets_acknowledged: acknowledged,
        })
    }
}

/// Signs `packets` full probes of 22 signatures each over `(seq, m0)`.
pub fn build_packets(keypair: &KeyPair, id: u32, m0: &[u8; 32], packets: u32, nonce_seed: u64) -> Vec<ChallengePacket> {
    (0..packets)
        .map(|p| {
            let base_seq = p * SIGS_PER_PACKET as u32;
            let signatures: Vec<Signature> =
                (0..SIGS_PER_PACKET as u32).map(|j| keypair.sign(&probe_message(base_seq + j, m0))).collect();
            ChallengePacket { challenger_id: id, base_seq, nonce: (nonce_seed ^ u64::from(p)).to_be_bytes(), signatures }
        })
        .collect()
}
