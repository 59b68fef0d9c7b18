use std::collections::{BTreeMap, BTreeSet};
use std::marker::PhantomData;

use log::{debug, warn};

use super::estimate::{guaranteed_bandwidth, measured_bandwidth, median, PoBOutput};
use crate::crypto::{hash_packet_set, merkle_verify, probe_message, verify, Digest, PublicKey};
use crate::num::Scalar;
use crate::schedule::{ChallengeParams, ThresholdMode};
use crate::wire::{
    ChallengerReport, DisputeSubmission, ForwardedReport, ProverReport, ReportStatus, VerificationFailure,
    SIGS_PER_PACKET,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportRejection {
    UnknownChallenger,
    WrongProver,
    Duplicate,
    RootMismatch,
    ZeroRtt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisputeRejection {
    UnknownChallenger,
    NoCommitment,
    NotDisputable,
    AlreadyResolved,
    WrongLeaf,
    MalformedPacketSet,
    MerkleMismatch,
    BadSignature { seq: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisputeOutcome {
    ProverUpheld { credited: u32 },
    ProverRejected(DisputeRejection),
}

/// Verifier bookkeeping for one challenge.
#[derive(Debug, Clone)]
pub struct VerifierState<S = f64> {
    params: ChallengeParams,
    prover_id: u32,
    challenger_pks: Vec<PublicKey>,
    prover_root: Option<Digest>,
    buffered: Vec<ChallengerReport>,
    reports: BTreeMap<u32, ChallengerReport>,
    credits: BTreeMap<u32, u32>,
    failed: BTreeSet<u32>,
    rejected: BTreeMap<u32, ReportRejection>,
    disputes: BTreeMap<u32, DisputeOutcome>,
    output: Option<PoBOutput<S>>,
    finalized: bool,
    _scalar: PhantomData<S>,
}

impl<S: Scalar> VerifierState<S> {
    pub fn new(params: &ChallengeParams, challenger_pks: Vec<PublicKey>) -> Self {
        assert_eq!(challenger_pks.len(), params.n as usize);
        VerifierState {
            params: params.clone(),
            prover_id: 0,
            challenger_pks,
            prover_root: None,
            buffered: Vec::new(),
            reports: BTreeMap::new(),
            credits: BTreeMap::new(),
            failed: BTreeSet::new(),
            rejected: BTreeMap::new(),
            disputes: BTreeMap::new(),
            output: None,
            finalized: false,
            _scalar: PhantomData,
        }
    }

    pub fn output(&self) -> Option<&PoBOutput<S>> {
        self.output.as_ref()
    }

    pub fn prover_root(&self) -> Option<Digest> {
        self.prover_root
    }

    pub fn accepted_reports(&self) -> impl Iterator<Item = &ChallengerReport> {
        self.reports.values()
    }

    /// Packets credited per challenger, from reports or upheld disputes.
    pub fn credits(&self) -> &BTreeMap<u32, u32> {
        &self.credits
    }

    pub fn rejections(&self) -> &BTreeMap<u32, ReportRejection> {
        &self.rejected
    }

    pub fn dispute_outcomes(&self) -> &BTreeMap<u32, DisputeOutcome> {
        &self.disputes
    }

    /// Records the prover's commitment and replays reports that arrived first.
    pub fn on_prover_report(&mut self, report: &ProverReport) -> Option<PoBOutput<S>> {
        if self.prover_root.is_some() || report.prover_id != self.prover_id {
            return None;
        }
        self.prover_root = Some(report.merkle_root);
        let mut out = None;
        for r in std::mem::take(&mut self.buffered) {
            if let Ok(Some(o)) = self.on_report(&r) {
                out = Some(o);
            }
        }
        out
    }

    pub fn on_report(&mut self, report: &ChallengerReport) -> Result<Option<PoBOutput<S>>, ReportRejection> {
        let id = report.challenger_id;
        let check = if id >= self.params.n {
            Err(ReportRejection::UnknownChallenger)
        } else if report.prover_id != self.prover_id {
            Err(ReportRejection::WrongProver)
        } else if self.reports.contains_key(&id) || self.credits.contains_key(&id) || self.rejected.contains_key(&id) {
            Err(ReportRejection::Duplicate)
        } else if report.rtt_ns == 0 {
            Err(ReportRejection::ZeroRtt)
        } else {
            Ok(())
        };
        if let Err(reason) = check {
            warn!("verifier: rejected report from challenger {id}: {reason:?}");
            if reason != ReportRejection::Duplicate && reason != ReportRejection::UnknownChallenger {
                self.rejected.insert(id, reason);
            }
            return Err(reason);
        }
        let Some(root) = self.prover_root else {
            self.buffered.push(*report);
            return Ok(None);
        };
        if report.merkle_root_seen != root {
            warn!("verifier: rejected report from challenger {id}: root mismatch");
            self.rejected.insert(id, ReportRejection::RootMismatch);
            return Err(ReportRejection::RootMismatch);
        }
        self.reports.insert(id, *report);
        self.credits.insert(id, report.packets_acknowledged.min(self.params.packets_per_challenger()));
        Ok(self.maybe_output(false))
    }

    /// A challenger claims the prover's verification message was bad. The
    /// returned list asks the prover to dispute that challenger.
    pub fn on_failure(&mut self, failure: &VerificationFailure) -> Option<Vec<ForwardedReport>> {
        let id = failure.challenger_id;
        if id >= self.params.n || self.reports.contains_key(&id) || self.disputes.contains_key(&id) {
            return None;
        }
        debug!("verifier: challenger {id} reported failure {:?}", failure.reason);
        self.failed.insert(id);
        Some(vec![ForwardedReport { challenger_id: id, status: ReportStatus::Failed, credited: 0 }])
    }

    fn status(&self, id: u32) -> ReportStatus {
        if self.credits.contains_key(&id) {
            ReportStatus::Accepted
        } else if self.failed.contains(&id) {
            ReportStatus::Failed
        } else if self.rejected.contains_key(&id) {
            ReportStatus::Rejected
        } else {
            ReportStatus::Missing
        }
    }

    /// Report statuses forwarded to the prover when collection closes.
    pub fn forward_reports(&self) -> Vec<ForwardedReport> {
        (0..self.params.n)
            .map(|id| ForwardedReport {
                challenger_id: id,
                status: self.status(id),
                credited: self.credits.get(&id).copied().unwrap_or(0),
            })
            .collect()
    }

    /// Collection deadline. Returns the dispute request when an output is
    /// still outstanding.
    pub fn on_deadline(&self) -> Option<Vec<ForwardedReport>> {
        self.output.is_none().then(|| self.forward_reports())
    }

    pub fn resolve_dispute(&mut self, submission: &DisputeSubmission) -> (DisputeOutcome, Option<PoBOutput<S>>) {
        let outcome = match self.check_dispute(submission) {
            Ok(credited) => DisputeOutcome::ProverUpheld { credited },
            Err(DisputeRejection::AlreadyResolved) => {
                return (DisputeOutcome::ProverRejected(DisputeRejection::AlreadyResolved), None)
            }
            Err(reason) => DisputeOutcome::ProverRejected(reason),
        };
        let id = submission.challenger_id;
        if id < self.params.n {
            self.disputes.insert(id, outcome);
        }
        if let DisputeOutcome::ProverUpheld { credited } = outcome {
            self.credits.insert(id, credited);
        } else {
            warn!("verifier: dispute for challenger {id} rejected: {outcome:?}");
        }
        (outcome, self.maybe_output(false))
    }

    fn check_dispute(&self, sub: &DisputeSubmission) -> Result<u32, DisputeRejection> {
        let id = sub.challenger_id;
        if id >= self.params.n {
            return Err(DisputeRejection::UnknownChallenger);
        }
        if self.disputes.contains_key(&id) {
            return Err(DisputeRejection::AlreadyResolved);
        }
        let root = self.prover_root.ok_or(DisputeRejection::NoCommitment)?;
        if sub.merkle_proof.leaf_index != id {
            return Err(DisputeRejection::WrongLeaf);
        }
        let leaf = hash_packet_set(&sub.packets).map_err(|_| DisputeRejection::MalformedPacketSet)?;
        if !merkle_verify(&root, &leaf, &sub.merkle_proof) {
            return Err(DisputeRejection::MerkleMismatch);
        }
        let pk = &self.challenger_pks[id as usize];
        for (seq, sig) in &sub.packets {
            if !verify(pk, &probe_message(*seq, &self.params.m0), &sig.0) {
                return Err(DisputeRejection::BadSignature { seq: *seq });
            }
        }
        let probes: BTreeSet<u32> = sub.packets.iter().map(|(seq, _)| seq / SIGS_PER_PACKET as u32).collect();
        let proven = (probes.len() as u32).min(self.params.packets_per_challenger());
        // An accepted challenger can only be overruled upward.
        match self.credits.get(&id) {
            Some(&credited) if proven <= credited => Err(DisputeRejection::NotDisputable),
            _ => Ok(proven),
        }
    }

    /// Closes collection for good and evaluates the output condition. Timer
    /// mode only produces an output here.
    pub fn finalize(&mut self) -> Option<PoBOutput<S>> {
        self.maybe_output(true)
    }

    fn maybe_output(&mut self, closing: bool) -> Option<PoBOutput<S>> {
        if closing {
            self.finalized = true;
        }
        if self.output.is_some() || (self.params.threshold_mode == ThresholdMode::Timer && !self.finalized) {
            return None;
        }
        let n = self.params.n;
        let f = self.params.f;
        let threshold = self.params.threshold();
        let reported: u64 = self.credits.values().map(|&c| u64::from(c)).sum();
        if reported < threshold || (self.reports.len() as u32) < n - f {
            return None;
        }
        let rtts: Vec<u64> = self.reports.values().map(|r| r.rtt_ns).collect();
        let delta = median(&rtts).expect("n − f ≥ 1 reports");
        let cnt = reported.min(threshold);
        let measured: S = measured_bandwidth(cnt, self.params.packet_bytes, delta);
        let out = PoBOutput {
            measured_bw: measured,
            delta_median_ns: delta,
            guaranteed_bw: guaranteed_bandwidth(measured, n, f),
            accepted_reports: self.reports.len() as u32,
            cnt,
            reported_cnt: reported,
            disputes_upheld: self.disputes.values().filter(|d| matches!(d, DisputeOutcome::ProverUpheld { .. })).count()
                as u32,
        };
        self.output = Some(out.clone());
        Some(out)
    }
}
