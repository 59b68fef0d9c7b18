use std::collections::BTreeMap;

use crate::crypto::{hash_sorted_entries, merkle_prove, merkle_root, response_message, Digest, KeyPair, PublicKey, Signature};
use crate::schedule::ChallengeParams;
use crate::wire::{
    Bitmap, ChallengePacket, DisputeSubmission, ForwardedReport, ProverReport, ReportStatus, ResponsePacket,
    VerificationMessage, SIGS_PER_PACKET,
};

/// When the prover answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResponseRule {
    /// Honest rule: total distinct packets reach (n−f)k.
    Threshold,
    /// Colluding prover: answer once `target` packets from the challengers
    /// marked honest have arrived.
    EarlyResponse { honest: Vec<bool>, target: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PacketOutcome {
    Accepted,
    Duplicate,
    /// Unknown challenger, misaligned sequence numbers or a probe index
    /// outside the bitmap.
    Dropped,
    /// Arrived after the response.
    Late,
    /// This packet completed the threshold; one response per challenger in
    /// challenger order.
    Respond(Vec<ResponsePacket>),
}

/// Prover side of both phases.
#[derive(Debug, Clone)]
pub struct ProverState {
    pub id: u32,
    keypair: KeyPair,
    params: ChallengeParams,
    received: Vec<BTreeMap<u32, Vec<Signature>>>,
    total: u64,
    honest_total: u64,
    rule: ResponseRule,
    responded: bool,
    /// Seed for fabricated signatures; set only on a forging prover.
    forge_seed: Option<u64>,
    receipts: Vec<Digest>,
    root: Option<Digest>,
    pub duplicates: u64,
    pub dropped: u64,
    pub late: u64,
}

impl ProverState {
    pub fn new(keypair: KeyPair, params: &ChallengeParams) -> Self {
        ProverState {
            id: 0,
            keypair,
            params: params.clone(),
            received: vec![BTreeMap::new(); params.n as usize],
            total: 0,
            honest_total: 0,
            rule: ResponseRule::Threshold,
            responded: false,
            forge_seed: None,
            receipts: Vec::new(),
            root: None,
            duplicates: 0,
            dropped: 0,
            late: 0,
        }
    }

    pub fn with_rule(mut self, rule: ResponseRule) -> Self {
        self.rule = rule;
        self
    }

    /// Fills every empty slot with fabricated signatures just before the
    /// commitment.
    pub fn with_forgery(mut self, seed: u64) -> Self {
        self.forge_seed = Some(seed);
        self
    }

    pub fn public_key(&self) -> PublicKey {
        self.keypair.public_key()
    }

    pub fn total_count(&self) -> u64 {
        self.total
    }

    pub fn responded(&self) -> bool {
        self.responded
    }

    pub fn root(&self) -> Option<Digest> {
        self.root
    }

    pub fn received_count(&self, challenger: u32) -> u32 {
        self.received[challenger as usize].len() as u32
    }

    /// Inserts one challenge packet; signatures are not checked here.
    pub fn on_packet(&mut self, packet: &ChallengePacket) -> PacketOutcome {
        if self.responded {
            self.late += 1;
            return PacketOutcome::Late;
        }
        match self.insert(packet) {
            PacketOutcome::Accepted => {}
            other => return other,
        }
        let ready = match &self.rule {
            ResponseRule::Threshold => self.total >= self.params.threshold(),
            ResponseRule::EarlyResponse { target, .. } => self.honest_total >= *target,
        };
        if ready {
            PacketOutcome::Respond(self.respond())
        } else {
            PacketOutcome::Accepted
        }
    }

    /// Inserts a packet built locally, e.g. from leaked keys. Never triggers
    /// a response by itself.
    pub fn insert_local(&mut self, packet: &ChallengePacket) -> PacketOutcome {
        if self.responded {
            return PacketOutcome::Late;
        }
        self.insert(packet)
    }

    fn insert(&mut self, packet: &ChallengePacket) -> PacketOutcome {
        let id = packet.challenger_id as usize;
        let probe = packet.probe_index();
        let limit = self.params.packets_per_challenger();
        let (Some(slot), Some(probe)) = (self.received.get_mut(id), probe) else {
            self.dropped += 1;
            return PacketOutcome::Dropped;
        };
        if probe >= limit || packet.signatures.is_empty() || packet.signatures.len() > SIGS_PER_PACKET {
            self.dropped += 1;
            return PacketOutcome::Dropped;
        }
        if slot.contains_key(&probe) {
            self.duplicates += 1;
            return PacketOutcome::Duplicate;
        }
        slot.insert(probe, packet.signatures.clone());
        self.total += 1;
        if let ResponseRule::EarlyResponse { honest, .. } = &self.rule {
            if honest.get(id).copied().unwrap_or(false) {
                self.honest_total += 1;
            }
        }
        PacketOutcome::Accepted
    }

    /// Adds arbitrary signatures for every missing probe of `challenger`.
    /// Only a forging prover does this.
    pub fn forge_missing(&mut self, challenger: u32, fill: impl Fn(u32) -> Signature) {
        let limit = self.params.packets_per_challenger();
        let slot = &mut self.received[challenger as usize];
        for probe in 0..limit {
            slot.entry(probe).or_insert_with(|| {
                let base = probe * SIGS_PER_PACKET as u32;
                (0..SIGS_PER_PACKET as u32).map(|j| fill(base + j)).collect()
            });
        }
    }

    fn entries(&self, challenger: usize) -> Vec<(u32, Signature)> {
        self.received[challenger]
            .iter()
            .flat_map(|(&probe, sigs)| {
                let base = probe * SIGS_PER_PACKET as u32;
                sigs.iter().enumerate().map(move |(j, s)| (base + j as u32, *s))
            })
            .collect()
    }

    /// Commits to everything received and signs one response per challenger.
    /// Only the first call has an effect.
    pub fn respond(&mut self) -> Vec<ResponsePacket> {
        if self.responded {
            return Vec::new();
        }
        self.responded = true;
        if let Some(seed) = self.forge_seed {
            for i in 0..self.params.n {
                self.forge_missing(i, |seq| fabricated_signature(seed, i, seq));
            }
        }
        self.receipts = (0..self.received.len())
            .map(|i| {
                let entries = self.entries(i);
                hash_sorted_entries(entries.iter().map(|(s, sig)| (*s, sig)))
            })
            .collect();
        let root = merkle_root(&self.receipts).expect("at least one challenger");
        self.root = Some(root);
        self.receipts
            .iter()
            .map(|receipt| ResponsePacket {
                receipt: *receipt,
                merkle_root: root,
                prover_signature: self.keypair.sign(&response_message(receipt, &root)),
            })
            .collect()
    }

    pub fn prover_report(&self) -> Option<ProverReport> {
        self.root.map(|merkle_root| ProverReport { prover_id: self.id, merkle_root })
    }

    pub fn verification_message(&self, challenger: u32) -> VerificationMessage {
        let i = challenger as usize;
        let bitmap = Bitmap::from_indices(self.params.packets_per_challenger(), self.received[i].keys().copied());
        VerificationMessage {
            bitmap,
            merkle_proof: merkle_prove(&self.receipts, i).expect("respond() before verification"),
        }
    }

    pub fn dispute(&self, challenger: u32) -> DisputeSubmission {
        let i = challenger as usize;
        DisputeSubmission {
            challenger_id: challenger,
            packets: self.entries(i),
            merkle_proof: merkle_prove(&self.receipts, i).expect("respond() before dispute"),
        }
    }

    /// Disputes every challenger the verifier did not credit, and every
    /// accepted one credited below what the prover holds.
    pub fn on_forwarded_reports(&self, reports: &[ForwardedReport]) -> Vec<DisputeSubmission> {
        if self.root.is_none() {
            return Vec::new();
        }
        let cap = self.params.packets_per_challenger() as usize;
        reports
            .iter()
            .filter(|r| (r.challenger_id as usize) < self.received.len())
            .filter(|r| {
                let held = self.received[r.challenger_id as usize].len().min(cap);
                held > 0 && (r.status != ReportStatus::Accepted || (r.credited as usize) < held)
            })
            .map(|r| self.dispute(r.challenger_id))
            .collect()
    }
}

fn fabricated_signature(seed: u64, challenger: u32, seq: u32) -> Signature {
    use sha2::{Digest as _, Sha512};
    let mut h = Sha512::new();
    h.update(seed.to_be_bytes());
    h.update(challenger.to_be_bytes());
    h.update(seq.to_be_bytes());
    Signature(h.finalize().into())
}
