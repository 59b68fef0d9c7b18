use log::debug;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::link::{Backhaul, BackhaulStats, QueueFull, Queued, Uplink};
use super::queue::EventQueue;
use super::topology::Topology;
use super::trace::{Node, Trace};
use super::SimError;
use crate::adversary::{apply, AttackConfig, ChallengerStrategy, ProverStrategy};
use crate::crypto::{keygen, KeyPair};
use crate::roles::{ResponseRule, ChallengerState, DisputeOutcome, PacketOutcome, PoBOutput, ProverState, VerifierState};
use crate::schedule::{estimate_latency_with, send_schedule, ChallengeParams, LatencyEstimator};
use crate::wire::{
    ChallengePacket, ChallengerReport, DisputeSubmission, FailureReason, ForwardedReport, Message, ResponsePacket,
    VerificationFailure, VerificationMessage, PACKET_BYTES,
};

const PING_BYTES: u32 = 98;
/// Response datagram on the wire: tag region, body and lower-layer headers.
const RESPONSE_WIRE_BYTES: u32 = 4 + 128 + 42;

// Independent PRNG streams so that changing one noise source does not
// reshuffle the others.
const STREAM_KEYS: u64 = 1;
const STREAM_OFFSETS: u64 = 2;
const STREAM_UPLINK: u64 = 3;
const STREAM_BACKHAUL: u64 = 4;
const STREAM_PING: u64 = 5;
const STREAM_ADVERSARY: u64 = 6;
const STREAM_CHALLENGE: u64 = 7;
const STREAM_REVERSE: u64 = 8;

/// Timing knobs of a simulated run. `None` fields derive from the challenge
/// duration D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimOptions {
    /// True time of t0; leaves room for negative clock offsets.
    #[serde(default = "default_t0")]
    pub t0_ns: u64,
    #[serde(default = "default_pings")]
    pub ping_count: usize,
    #[serde(default)]
    pub latency_estimator: LatencyEstimator,
    /// Delay between the response and the verification messages (default D).
    #[serde(default)]
    pub verification_gap_ns: Option<u64>,
    /// Verifier collection deadline after t0 (default 10·D + 2 s).
    #[serde(default)]
    pub deadline_ns: Option<u64>,
    /// Time allowed for disputes after the deadline.
    #[serde(default = "default_dispute_window")]
    pub dispute_window_ns: u64,
    /// Challengers declare non-termination if no response arrives this long
    /// after their first send.
    #[serde(default)]
    pub challenger_timeout_ns: Option<u64>,
    #[serde(default = "default_true")]
    pub trace: bool,
}

fn default_t0() -> u64 {
    1_000_000_000
}
fn default_pings() -> usize {
    20
}
fn default_dispute_window() -> u64 {
    1_000_000_000
}
fn default_true() -> bool {
    true
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            t0_ns: default_t0(),
            ping_count: default_pings(),
            latency_estimator: LatencyEstimator::Mean,
            verification_gap_ns: None,
            deadline_ns: None,
            dispute_window_ns: default_dispute_window(),
            challenger_timeout_ns: None,
            trace: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DropStats {
    pub uplink_queue: u64,
    pub uplink_loss: u64,
    pub backhaul_queue: u64,
    pub backhaul_loss: u64,
}

impl DropStats {
    pub fn total(&self) -> u64 {
        self.uplink_queue + self.uplink_loss + self.backhaul_queue + self.backhaul_loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChallengerOutcome {
    pub id: u32,
    pub corrupt: bool,
    pub clock_offset_ns: i64,
    /// l_i from the ping phase.
    pub latency_ns: u64,
    /// t_i1 on the challenger's clock.
    pub first_send_ns: u64,
    /// Δ_i, if a valid response arrived.
    pub rtt_ns: Option<u64>,
    pub packets_sent: u32,
    /// Distinct probes the prover holds from this challenger.
    pub packets_received: u32,
    /// Packets the verifier credited, from a report or a dispute.
    pub credited: Option<u32>,
    pub timed_out: bool,
    pub protocol_violation: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProverStats {
    pub total_count: u64,
    pub duplicates: u64,
    pub dropped: u64,
    pub late: u64,
    /// True time the response left the prover.
    pub response_ns: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub output: Option<PoBOutput>,
    pub terminated: bool,
    /// Parameters as broadcast, including t0 and m0.
    pub params: ChallengeParams,
    pub challengers: Vec<ChallengerOutcome>,
    pub drops: DropStats,
    pub backhaul: BackhaulStats,
    pub prover: ProverStats,
    /// Bytes of challenge traffic that left challengers, side channels included.
    pub challenge_bytes_sent: u64,
    pub disputes: Vec<(u32, DisputeOutcome)>,
    pub trace: Trace,
}

impl SimResult {
    /// Number of challengers that never saw a response before their timeout.
    pub fn timeouts(&self) -> usize {
        self.challengers.iter().filter(|c| c.timed_out).count()
    }
}

enum Ev {
    Send { i: u32, probe: u32 },
    CoreArrive { i: u32, probe: u32 },
    BackhaulDone,
    ProverArrive { bytes: Vec<u8> },
    ShareKeys,
    Respond,
    ResponseArrive { i: u32 },
    VerificationStart,
    VerificationArrive { i: u32, bytes: Vec<u8> },
    ProverReportArrive,
    ReportArrive(ChallengerReport),
    FailureArrive(VerificationFailure),
    DisputeRequestArrive(Vec<ForwardedReport>),
    DisputeArrive(DisputeSubmission),
    Deadline,
    Finalize,
    Timeout { i: u32 },
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn round_ns(t: f64) -> u64 {
    t.round().max(0.0) as u64
}

/// Ping round trips between challenger `i` and the prover over an idle
/// network. Lost probes are left out of the samples.
pub fn ping<R: Rng + ?Sized>(topology: &Topology, i: u32, count: usize, rng: &mut R) -> Result<Vec<u64>, SimError> {
    let up = &topology.uplinks[i as usize];
    let bh = &topology.backhaul;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut rtt = 0.0;
        let mut lost = false;
        for _direction in 0..2 {
            for link in [up, bh] {
                lost |= rng.gen_bool(link.loss_rate);
                rtt += link.tx_ns(PING_BYTES) + link.propagation_ns as f64 + link.jitter.sample(rng) as f64;
            }
        }
        if !lost {
            samples.push(round_ns(rtt));
        }
    }
    if samples.is_empty() {
        return Err(SimError::PingLost(i));
    }
    Ok(samples)
}

/// Runs one challenge with default options.
pub fn run_scenario(
    topology: &Topology,
    params: &ChallengeParams,
    attack: &AttackConfig,
    seed: u64,
) -> Result<SimResult, SimError> {
    run_scenario_with(topology, params, attack, seed, &SimOptions::default())
}

pub fn run_scenario_with(
    topology: &Topology,
    params: &ChallengeParams,
    attack: &AttackConfig,
    seed: u64,
    options: &SimOptions,
) -> Result<SimResult, SimError> {
    if topology.n() != params.n {
        return Err(SimError::Topology(format!("{} uplinks for n = {}", topology.n(), params.n)));
    }
    topology.validate().map_err(SimError::Topology)?;
    let rule = apply(attack, params, topology)?;
    Sim::new(topology, params, attack, seed, options)?.with_rule(rule).run()
}

struct Sim<'a> {
    topo: &'a Topology,
    attack: &'a AttackConfig,
    options: &'a SimOptions,
    params: ChallengeParams,
    seed: u64,
    q: EventQueue<Ev>,
    trace: Trace,
    offsets: Vec<i64>,
    latencies: Vec<u64>,
    challengers: Vec<ChallengerState>,
    prover: ProverState,
    verifier: VerifierState,
    uplinks: Vec<Uplink>,
    backhaul: Backhaul,
    responses: Vec<ResponsePacket>,
    rng_uplink: ChaCha8Rng,
    rng_backhaul: ChaCha8Rng,
    rng_adversary: ChaCha8Rng,
    rng_reverse: ChaCha8Rng,
    drops: DropStats,
    packets_sent: Vec<u32>,
    timed_out: Vec<bool>,
    response_ns: Option<u64>,
    challenge_bytes_sent: u64,
    output: Option<PoBOutput>,
}

fn derive_key(rng: &mut ChaCha8Rng) -> KeyPair {
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    keygen(&seed).expect("32-byte seed")
}

impl<'a> Sim<'a> {
    fn new(
        topo: &'a Topology,
        params: &ChallengeParams,
        attack: &'a AttackConfig,
        seed: u64,
        options: &'a SimOptions,
    ) -> Result<Self, SimError> {
        let n = params.n;
        let mut trace = Trace::new(options.trace);
        let mut challenge_rng = stream(seed, STREAM_CHALLENGE);
        let mut m0 = [0u8; 32];
        challenge_rng.fill_bytes(&mut m0);
        let params = params.clone().with_start(options.t0_ns).with_m0(m0);

        let mut key_rng = stream(seed, STREAM_KEYS);
        let prover_key = derive_key(&mut key_rng);
        let challenger_keys: Vec<KeyPair> = (0..n).map(|_| derive_key(&mut key_rng)).collect();

        let offsets = topo.draw_offsets(&mut stream(seed, STREAM_OFFSETS));

        let mut ping_rng = stream(seed, STREAM_PING);
        let mut latencies = Vec::with_capacity(n as usize);
        for i in 0..n {
            let samples = ping(topo, i, options.ping_count, &mut ping_rng)?;
            let l = estimate_latency_with(&samples, options.latency_estimator)?;
            trace.record(0, Node::Challenger(i), "ping", || format!("samples={} l={l}", samples.len()));
            latencies.push(l);
        }
        let schedule = send_schedule(&params, &latencies)?;

        let challengers: Vec<ChallengerState> = challenger_keys
            .into_iter()
            .enumerate()
            .map(|(i, key)| {
                ChallengerState::new(i as u32, key, prover_key.public_key(), &params, &schedule, challenge_rng.next_u64())
            })
            .collect();
        let pks = challengers.iter().map(|c| c.public_key()).collect();
        let verifier = VerifierState::new(&params, pks);
        let prover = ProverState::new(prover_key, &params);
        let uplinks = topo.uplinks.iter().map(|l| Uplink::new(l.rate_bps, l.queue_capacity_bytes)).collect();
        Ok(Sim {
            topo,
            attack,
            options,
            seed,
            q: EventQueue::new(),
            trace,
            offsets,
            latencies,
            challengers,
            prover,
            verifier,
            uplinks,
            backhaul: Backhaul::new(topo.backhaul.queue_capacity_bytes),
            responses: Vec::new(),
            rng_uplink: stream(seed, STREAM_UPLINK),
            rng_backhaul: stream(seed, STREAM_BACKHAUL),
            rng_adversary: stream(seed, STREAM_ADVERSARY),
            rng_reverse: stream(seed, STREAM_REVERSE),
            drops: DropStats::default(),
            packets_sent: vec![0; n as usize],
            timed_out: vec![false; n as usize],
            response_ns: None,
            challenge_bytes_sent: 0,
            output: None,
            params,
        })
    }

    fn with_rule(mut self, rule: ResponseRule) -> Self {
        let mut prover = self.prover.clone().with_rule(rule);
        if self.attack.prover == ProverStrategy::DisputeForger {
            prover = prover.with_forgery(self.seed);
        }
        self.prover = prover;
        self
    }

    fn local(&self, i: u32, true_ns: u64) -> u64 {
        (true_ns as i128 + self.offsets[i as usize] as i128).max(0) as u64
    }

    fn to_true(&self, i: u32, local_ns: u64) -> u64 {
        (local_ns as i128 - self.offsets[i as usize] as i128).max(0) as u64
    }

    fn rel(&self, true_ns: u64) -> i128 {
        true_ns as i128 - self.params.t0_ns as i128
    }

    fn duration(&self) -> u64 {
        self.params.duration_ns
    }

    /// One-way delay prover → challenger `i` for a small datagram.
    fn reverse_delay(&mut self, i: u32, bytes: u32) -> u64 {
        if matches!(self.attack.strategy(i), Some(ChallengerStrategy::Rush)) {
            if let Some(side) = self.topo.side_channel(i) {
                return side.delay_ns;
            }
        }
        let up = &self.topo.uplinks[i as usize];
        let bh = &self.topo.backhaul;
        let d = bh.tx_ns(bytes)
            + bh.propagation_ns as f64
            + bh.jitter.sample(&mut self.rng_reverse) as f64
            + up.tx_ns(bytes)
            + up.propagation_ns as f64
            + up.jitter.sample(&mut self.rng_reverse) as f64;
        round_ns(d)
    }

    fn start(&mut self) {
        let t0 = self.params.t0_ns;
        let share_with_prover = self.attack.prover != ProverStrategy::Honest;
        for i in 0..self.params.n {
            let strategy = self.attack.strategy(i);
            let now_local = self.local(i, t0).min(self.challengers[i as usize].first_send_ns());
            let events = self.challengers[i as usize].on_start(now_local);
            let first = self.challengers[i as usize].first_send_ns();
            let offset = self.offsets[i as usize];
            self.trace.record(0, Node::Challenger(i), "start", || format!("t_i1={first} offset={offset}"));
            if let Some(limit) = self.options.challenger_timeout_ns {
                let at = self.to_true(i, first + limit);
                self.q.push(at, Ev::Timeout { i });
            }
            if strategy.is_some_and(|s| !s.sends_probes()) {
                continue;
            }
            for ev in events {
                let send_local = match strategy {
                    Some(ChallengerStrategy::Rush) => first,
                    Some(ChallengerStrategy::Delay { delay_ns }) => ev.at_ns + delay_ns,
                    _ => ev.at_ns,
                };
                if let Some(ChallengerStrategy::WithholdFraction { p }) = strategy {
                    if self.rng_adversary.gen_bool(p) {
                        continue;
                    }
                }
                let at = self.to_true(i, send_local);
                self.q.push(at, Ev::Send { i, probe: ev.probe });
            }
        }
        if share_with_prover && self.attack.challengers.values().any(|s| *s == ChallengerStrategy::ShareKeys) {
            self.q.push(t0, Ev::ShareKeys);
        }
        let deadline = self.options.deadline_ns.unwrap_or(10 * self.duration() + 2_000_000_000);
        self.q.push(t0 + deadline, Ev::Deadline);
        self.q.push(t0 + deadline + self.options.dispute_window_ns, Ev::Finalize);
    }

    fn run(mut self) -> Result<SimResult, SimError> {
        self.start();
        while let Some((now, ev)) = self.q.pop() {
            if self.handle(now, ev) {
                break;
            }
        }
        Ok(self.finish())
    }

    /// Returns true when the run is over.
    fn handle(&mut self, now: u64, ev: Ev) -> bool {
        match ev {
            Ev::Send { i, probe } => self.on_send(now, i, probe),
            Ev::CoreArrive { i, probe } => {
                let item = Queued { challenger: i, probe, bytes: PACKET_BYTES };
                let rate = self.topo.available_rate(self.rel(now), true);
                match self.backhaul.enqueue(now, item, || rate) {
                    Ok(Some(done)) => self.q.push(round_ns(done), Ev::BackhaulDone),
                    Ok(None) => {}
                    Err(QueueFull) => {
                        self.drops.backhaul_queue += 1;
                        self.trace.record(now, Node::Core, "drop_queue", || format!("c{i} p{probe}"));
                    }
                }
            }
            Ev::BackhaulDone => {
                let rate = self.topo.available_rate(self.rel(now), true);
                let (item, next) = self.backhaul.complete(|| rate);
                if let Some(done) = next {
                    self.q.push(round_ns(done), Ev::BackhaulDone);
                }
                let bh = &self.topo.backhaul;
                self.trace.record(now, Node::Core, "depart", || format!("c{} p{}", item.challenger, item.probe));
                if self.rng_backhaul.gen_bool(bh.loss_rate) {
                    self.drops.backhaul_loss += 1;
                    self.trace.record(now, Node::Core, "loss_backhaul", || format!("c{} p{}", item.challenger, item.probe));
                } else {
                    let delay = bh.propagation_ns + bh.jitter.sample(&mut self.rng_backhaul);
                    let bytes = self.challengers[item.challenger as usize].packet(item.probe).encode();
                    self.q.push(now + delay, Ev::ProverArrive { bytes });
                }
            }
            Ev::ProverArrive { bytes } => self.on_prover_packet(now, &bytes),
            Ev::ShareKeys => {
                for (&i, _) in self.attack.challengers.iter().filter(|(_, s)| **s == ChallengerStrategy::ShareKeys) {
                    let packets = self.challengers[i as usize].packets().to_vec();
                    for p in &packets {
                        self.prover.insert_local(p);
                    }
                    self.trace.record(now, Node::Prover, "share_keys", || format!("c{i} packets={}", packets.len()));
                }
            }
            Ev::Respond => {
                self.response_ns = Some(now);
                self.trace.record(now, Node::Prover, "respond", || format!("total={}", self.prover.total_count()));
                for i in 0..self.params.n {
                    let d = self.reverse_delay(i, RESPONSE_WIRE_BYTES);
                    self.q.push(now + d, Ev::ResponseArrive { i });
                }
                self.q.push(now + self.topo.verifier_delay_ns, Ev::ProverReportArrive);
                let gap = self.options.verification_gap_ns.unwrap_or(self.duration());
                self.q.push(now + gap, Ev::VerificationStart);
            }
            Ev::ResponseArrive { i } => {
                let bytes = self.responses[i as usize].encode();
                let resp = ResponsePacket::decode(&bytes).expect("own encoding");
                let local = self.local(i, now);
                let accepted = self.challengers[i as usize].on_response(&resp, local);
                let rtt = self.challengers[i as usize].rtt_ns();
                self.trace.record(now, Node::Challenger(i), "response", || format!("accepted={accepted} rtt={rtt:?}"));
            }
            Ev::VerificationStart => {
                for i in 0..self.params.n {
                    let msg = self.prover.verification_message(i);
                    let bytes = Message::Verification(msg).encode();
                    let d = self.reverse_delay(i, bytes.len() as u32 + 42);
                    self.q.push(now + d, Ev::VerificationArrive { i, bytes });
                }
            }
            Ev::VerificationArrive { i, bytes } => {
                let msg = VerificationMessage::decode(&bytes).expect("own encoding");
                self.on_verification(now, i, &msg);
            }
            Ev::ProverReportArrive => {
                let report = self.prover.prover_report().expect("prover responded");
                self.trace.record(now, Node::Verifier, "prover_report", || report.merkle_root.to_hex());
                if let Some(out) = self.verifier.on_prover_report(&report) {
                    self.emit(now, out);
                }
            }
            Ev::ReportArrive(report) => {
                let result = self.verifier.on_report(&report);
                self.trace.record(now, Node::Verifier, "report", || {
                    format!(
                        "c{} rtt={} acked={} result={:?}",
                        report.challenger_id,
                        report.rtt_ns,
                        report.packets_acknowledged,
                        result.as_ref().map(|o| o.is_some())
                    )
                });
                if let Ok(Some(out)) = result {
                    self.emit(now, out);
                }
            }
            Ev::FailureArrive(failure) => {
                self.trace.record(now, Node::Verifier, "failure", || format!("c{} {:?}", failure.challenger_id, failure.reason));
                if let Some(request) = self.verifier.on_failure(&failure) {
                    self.q.push(now + self.topo.verifier_delay_ns, Ev::DisputeRequestArrive(request));
                }
            }
            Ev::DisputeRequestArrive(request) => {
                let submissions = self.prover.on_forwarded_reports(&request);
                self.trace.record(now, Node::Prover, "dispute_request", || {
                    format!("entries={} submissions={}", request.len(), submissions.len())
                });
                for s in submissions {
                    self.q.push(now + self.topo.verifier_delay_ns, Ev::DisputeArrive(s));
                }
            }
            Ev::DisputeArrive(sub) => {
                let (outcome, out) = self.verifier.resolve_dispute(&sub);
                self.trace.record(now, Node::Verifier, "dispute", || format!("c{} {outcome:?}", sub.challenger_id));
                if let Some(out) = out {
                    self.emit(now, out);
                }
            }
            Ev::Deadline => {
                self.trace.record(now, Node::Verifier, "deadline", String::new);
                if let Some(request) = self.verifier.on_deadline() {
                    self.q.push(now + self.topo.verifier_delay_ns, Ev::DisputeRequestArrive(request));
                }
            }
            Ev::Finalize => {
                if let Some(out) = self.verifier.finalize() {
                    self.emit(now, out);
                }
                self.trace.record(now, Node::Verifier, "finalize", || format!("output={}", self.output.is_some()));
                return true;
            }
            Ev::Timeout { i } => {
                if self.challengers[i as usize].rtt_ns().is_none() {
                    self.timed_out[i as usize] = true;
                    self.trace.record(now, Node::Challenger(i), "timeout", String::new);
                }
            }
        }
        false
    }

    fn on_send(&mut self, now: u64, i: u32, probe: u32) {
        self.challengers[i as usize].mark_sent(probe);
        self.packets_sent[i as usize] += 1;
        self.challenge_bytes_sent += u64::from(PACKET_BYTES);
        self.trace.record(now, Node::Challenger(i), "send", || format!("p{probe}"));
        if matches!(self.attack.strategy(i), Some(ChallengerStrategy::Rush)) {
            let delay = self.topo.side_channel(i).map_or(0, |s| s.delay_ns);
            let bytes = self.challengers[i as usize].packet(probe).encode();
            self.q.push(now + delay, Ev::ProverArrive { bytes });
            return;
        }
        let link = &self.topo.uplinks[i as usize];
        let Some(depart) = self.uplinks[i as usize].send(now, PACKET_BYTES) else {
            self.drops.uplink_queue += 1;
            self.trace.record(now, Node::Challenger(i), "drop_uplink", || format!("p{probe}"));
            return;
        };
        if self.rng_uplink.gen_bool(link.loss_rate) {
            self.drops.uplink_loss += 1;
            self.trace.record(now, Node::Challenger(i), "loss_uplink", || format!("p{probe}"));
            return;
        }
        let arrive = depart + link.propagation_ns as f64 + link.jitter.sample(&mut self.rng_uplink) as f64;
        self.q.push(round_ns(arrive), Ev::CoreArrive { i, probe });
    }

    fn on_prover_packet(&mut self, now: u64, bytes: &[u8]) {
        let packet = match ChallengePacket::decode(bytes) {
            Ok(p) => p,
            Err(e) => {
                self.trace.record(now, Node::Prover, "decode_error", || e.to_string());
                return;
            }
        };
        let outcome = self.prover.on_packet(&packet);
        let (id, probe) = (packet.challenger_id, packet.base_seq / 22);
        match outcome {
            PacketOutcome::Accepted => self.trace.record(now, Node::Prover, "recv", || format!("c{id} p{probe}")),
            PacketOutcome::Duplicate => self.trace.record(now, Node::Prover, "dup", || format!("c{id} p{probe}")),
            PacketOutcome::Dropped => self.trace.record(now, Node::Prover, "reject", || format!("c{id} p{probe}")),
            PacketOutcome::Late => self.trace.record(now, Node::Prover, "late", || format!("c{id} p{probe}")),
            PacketOutcome::Respond(responses) => {
                self.trace.record(now, Node::Prover, "recv", || format!("c{id} p{probe}"));
                self.respond(now, responses);
            }
        }
    }

    fn respond(&mut self, now: u64, responses: Vec<ResponsePacket>) {
        self.responses = responses;
        let overhead = self.topo.compute_overhead.delay_ns(self.params.theta_claimed);
        self.q.push(now + overhead, Ev::Respond);
    }

    fn on_verification(&mut self, now: u64, i: u32, msg: &VerificationMessage) {
        let delay = self.topo.verifier_delay_ns;
        let Some(strategy) = self.attack.strategy(i) else {
            match self.challengers[i as usize].on_verification(msg) {
                Ok(report) => self.q.push(now + delay, Ev::ReportArrive(report)),
                Err(reason) => {
                    self.trace.record(now, Node::Challenger(i), "verify_failed", || format!("{reason:?}"));
                    self.q.push(now + delay, Ev::FailureArrive(VerificationFailure { challenger_id: i, reason }));
                }
            }
            return;
        };
        let base = self.challengers[i as usize].unchecked_report(msg.bitmap.count_ones());
        let report = match strategy {
            ChallengerStrategy::WithholdReport => None,
            ChallengerStrategy::BadMerkleClaim => {
                let failure = VerificationFailure { challenger_id: i, reason: FailureReason::Unspecified };
                self.q.push(now + delay, Ev::FailureArrive(failure));
                None
            }
            ChallengerStrategy::Rush | ChallengerStrategy::ShareKeys => base.map(|r| ChallengerReport { rtt_ns: 1, ..r }),
            ChallengerStrategy::MisreportRtt { rtt_ns } => base.map(|r| ChallengerReport { rtt_ns, ..r }),
            ChallengerStrategy::MisreportCount { count } => {
                base.map(|r| ChallengerReport { packets_acknowledged: count, ..r })
            }
            _ => base,
        };
        if let Some(report) = report {
            self.q.push(now + delay, Ev::ReportArrive(report));
        }
    }

    fn emit(&mut self, now: u64, out: PoBOutput) {
        debug!("output at {now}: {:.3} Mbps measured", out.measured_bw / 1e6);
        self.trace.record(now, Node::Verifier, "output", || {
            format!(
                "cnt={} delta={} measured={:.0} guaranteed={:.0}",
                out.cnt, out.delta_median_ns, out.measured_bw, out.guaranteed_bw
            )
        });
        self.output = Some(out);
    }

    fn finish(self) -> SimResult {
        let credits = self.verifier.credits().clone();
        let challengers = self
            .challengers
            .iter()
            .enumerate()
            .map(|(i, c)| ChallengerOutcome {
                id: i as u32,
                corrupt: self.attack.is_corrupt(i as u32),
                clock_offset_ns: self.offsets[i],
                latency_ns: self.latencies[i],
                first_send_ns: c.first_send_ns(),
                rtt_ns: c.rtt_ns(),
                packets_sent: self.packets_sent[i],
                packets_received: self.prover.received_count(i as u32),
                credited: credits.get(&(i as u32)).copied(),
                timed_out: self.timed_out[i],
                protocol_violation: c.protocol_violation,
            })
            .collect();
        let mut drops = self.drops;
        drops.backhaul_queue = self.backhaul.stats.queue_drops;
        SimResult {
            terminated: self.output.is_some(),
            output: self.output,
            params: self.params,
            challengers,
            drops,
            backhaul: self.backhaul.stats.clone(),
            prover: ProverStats {
                total_count: self.prover.total_count(),
                duplicates: self.prover.duplicates,
                dropped: self.prover.dropped,
                late: self.prover.late,
                response_ns: self.response_ns,
            },
            challenge_bytes_sent: self.challenge_bytes_sent,
            disputes: self.verifier.dispute_outcomes().iter().map(|(k, v)| (*k, *v)).collect(),
            trace: self.trace,
        }
    }
}

