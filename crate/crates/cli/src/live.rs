//! The three roles over UDP with wall-clock timers.
//!
//! Start-up: every challenger and the prover send `Ping` to the verifier
//! until it answers with `Params`. The verifier waits for all of them, then
//! picks t0 `setup_ms` ahead. Keys are derived from a shared
//! `key_seed`, which is only suitable for test deployments.
//!
//! The prover can emulate a bottleneck: arriving challenge packets pass a
//! drop-tail FIFO drained at `shaped_mbps` before they count.

use std::net::{SocketAddr, UdpSocket};
use std::path::Path;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{debug, info, warn};
use pob_core::crypto::{keygen, KeyPair, PublicKey};
use pob_core::netsim::Uplink;
use pob_core::roles::{ChallengerState, PacketOutcome, PoBOutput, ProverState, VerifierState};
use pob_core::schedule::{
    derive_params_with_mode, estimate_latency, send_schedule, ChallengeParams, RatePolicy, ThresholdMode,
};
use pob_core::wire::{Message, Ping, VerificationFailure, VerificationMessage, MAX_DATAGRAM, PACKET_BYTES};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use socket2::{Domain, Protocol, Socket, Type};
use thiserror::Error;

use crate::report::{ChallengerRow, Repetition, RunReport, Summary, REPORT_VERSION};

#[derive(Debug, Error)]
pub enum LiveError {
    #[error("socket: {0}")]
    Io(#[from] std::io::Error),
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error("live config: {0}")]
    Config(String),
    #[error("no output before the deadline")]
    NoOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiveConfig {
    pub theta_claimed_mbps: f64,
    pub n: u32,
    pub f: u32,
    pub duration_ms: f64,
    #[serde(default)]
    pub rate_policy: RatePolicy,
    #[serde(default = "default_overprovision")]
    pub overprovision: f64,
    #[serde(default)]
    pub threshold_mode: ThresholdMode,
    pub key_seed: u64,
    pub prover: SocketAddr,
    pub verifier: SocketAddr,
    pub challengers: Vec<SocketAddr>,
    /// Bottleneck emulated in front of the prover.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shaped_mbps: Option<f64>,
    #[serde(default = "default_shaper_queue")]
    pub shaper_queue_bytes: u64,
    /// Lead time between the parameter broadcast and t0.
    #[serde(default = "default_setup")]
    pub setup_ms: u64,
    /// Common reference latency; challengers start at t0 + align − l_i.
    #[serde(default = "default_align")]
    pub align_ms: u64,
    /// Give up on a silent peer after this long.
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "default_pings")]
    pub ping_count: usize,
}

fn default_overprovision() -> f64 {
    1.1
}
fn default_shaper_queue() -> u64 {
    1_500_000
}
fn default_setup() -> u64 {
    1500
}
fn default_align() -> u64 {
    20
}
fn default_timeout() -> u64 {
    5000
}
fn default_pings() -> usize {
    20
}

impl LiveConfig {
    pub fn load(path: &Path) -> Result<Self, LiveError> {
        let text = std::fs::read_to_string(path).map_err(|e| LiveError::Config(format!("{}: {e}", path.display())))?;
        let cfg: LiveConfig = toml::from_str(&text).map_err(|e| LiveError::Config(e.to_string()))?;
        cfg.params()?;
        Ok(cfg)
    }

    /// Fails when the fault bound or rate make the protocol unusable.
    pub fn params(&self) -> Result<ChallengeParams, LiveError> {
        if self.challengers.len() != self.n as usize {
            return Err(LiveError::Config(format!("{} challenger addresses for n = {}", self.challengers.len(), self.n)));
        }
        derive_params_with_mode(
            self.theta_claimed_mbps * 1e6,
            self.n,
            self.f,
            (self.duration_ms * 1e6).round() as u64,
            self.rate_policy,
            self.threshold_mode,
        )
        .and_then(|p| p.with_overprovision(self.overprovision))
        .map_err(|e| LiveError::Config(e.to_string()))
    }

    fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    /// Applies `role=addr` overrides, roles being `prover`, `verifier` or
    /// `c<i>`.
    pub fn apply_peer(&mut self, spec: &str) -> Result<(), LiveError> {
        let (role, addr) = spec.split_once('=').ok_or_else(|| LiveError::Config(format!("bad peer {spec:?}")))?;
        let addr: SocketAddr = addr.parse().map_err(|_| LiveError::Config(format!("bad address in {spec:?}")))?;
        match role {
            "prover" => self.prover = addr,
            "verifier" => self.verifier = addr,
            c => {
                let i: usize = c
                    .strip_prefix('c')
                    .and_then(|i| i.parse().ok())
                    .filter(|i| *i < self.challengers.len())
                    .ok_or_else(|| LiveError::Config(format!("unknown peer role {c:?}")))?;
                self.challengers[i] = addr;
            }
        }
        Ok(())
    }
}

pub const PROVER_NODE: u32 = u32::MAX;

/// Deterministic keys for a test deployment.
pub fn node_key(seed: u64, node: u32) -> KeyPair {
    let digest = Sha256::new().chain_update(b"pob-live").chain_update(seed.to_be_bytes()).chain_update(node.to_be_bytes()).finalize();
    keygen(&digest).expect("32-byte seed")
}

/// Wall-clock nanoseconds that advance with the monotonic clock.
#[derive(Debug, Clone, Copy)]
struct Clock {
    wall0: u64,
    start: Instant,
}

impl Clock {
    fn new() -> Self {
        let wall0 = SystemTime::now().duration_since(UNIX_EPOCH).expect("clock after 1970").as_nanos() as u64;
        Clock { wall0, start: Instant::now() }
    }

    fn now(&self) -> u64 {
        self.wall0 + self.start.elapsed().as_nanos() as u64
    }

    /// Sleeps until `at_ns`. Sends follow an absolute schedule, so wakeup
    /// jitter does not accumulate; spinning is avoided because it starves
    /// other roles sharing the core.
    fn sleep_until(&self, at_ns: u64) {
        let now = self.now();
        if at_ns > now {
            std::thread::sleep(Duration::from_nanos(at_ns - now));
        }
    }
}

fn send(sock: &UdpSocket, msg: &Message, to: SocketAddr) -> Result<(), LiveError> {
    let bytes = msg.encode();
    if bytes.len() > MAX_DATAGRAM {
        warn!("dropping {} byte message to {to}: exceeds one datagram", bytes.len());
        return Ok(());
    }
    sock.send_to(&bytes, to)?;
    Ok(())
}

/// Next decodable message before `deadline`, or `None` on timeout.
fn recv(sock: &UdpSocket, buf: &mut [u8], deadline: Instant) -> Result<Option<(Message, SocketAddr)>, LiveError> {
    Ok(recv_stamped(sock, buf, deadline)?.map(|(m, from, _)| (m, from)))
}

/// Like `recv`, also returning the kernel receive time in wall-clock
/// nanoseconds when the socket has timestamps enabled.
fn recv_stamped(
    sock: &UdpSocket,
    buf: &mut [u8],
    deadline: Instant,
) -> Result<Option<(Message, SocketAddr, Option<u64>)>, LiveError> {
    loop {
        let now = Instant::now();
        if now >= deadline {
            return Ok(None);
        }
        sock.set_read_timeout(Some((deadline - now).max(Duration::from_micros(100))))?;
        match recv_raw(sock, buf) {
            Ok((len, from, stamp)) => match Message::decode(&buf[..len]) {
                Ok(m) => return Ok(Some((m, from, stamp))),
                Err(e) => debug!("undecodable datagram from {from}: {e}"),
            },
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(e) => return Err(e.into()),
        }
    }
}

#[cfg(target_os = "linux")]
fn enable_timestamps(sock: &UdpSocket) {
    use nix::sys::socket::{setsockopt, sockopt::ReceiveTimestampns};
    if let Err(e) = setsockopt(sock, ReceiveTimestampns, &true) {
        warn!("receive timestamps unavailable: {e}");
    }
}

#[cfg(not(target_os = "linux"))]
fn enable_timestamps(_sock: &UdpSocket) {}

#[cfg(target_os = "linux")]
fn recv_raw(sock: &UdpSocket, buf: &mut [u8]) -> std::io::Result<(usize, SocketAddr, Option<u64>)> {
    use std::io::IoSliceMut;
    use std::os::fd::AsRawFd;

    use nix::sys::socket::{recvmsg, ControlMessageOwned, MsgFlags, SockaddrLike, SockaddrStorage};
    use nix::sys::time::TimeSpec;

    let mut cmsg = nix::cmsg_space!(TimeSpec);
    let mut iov = [IoSliceMut::new(buf)];
    let msg = recvmsg::<SockaddrStorage>(sock.as_raw_fd(), &mut iov, Some(&mut cmsg), MsgFlags::empty())?;
    let stamp = msg.cmsgs()?.find_map(|c| match c {
        ControlMessageOwned::ScmTimestampns(ts) => Some(ts.tv_sec() as u64 * 1_000_000_000 + ts.tv_nsec() as u64),
        _ => None,
    });
    let from = msg
        .address
        .and_then(|a| match a.family() {
            Some(nix::sys::socket::AddressFamily::Inet) => a.as_sockaddr_in().map(|v4| SocketAddr::V4((*v4).into())),
            Some(nix::sys::socket::AddressFamily::Inet6) => a.as_sockaddr_in6().map(|v6| SocketAddr::V6((*v6).into())),
            _ => None,
        })
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidData, "datagram without source address"))?;
    Ok((msg.bytes, from, stamp))
}

#[cfg(not(target_os = "linux"))]
fn recv_raw(sock: &UdpSocket, buf: &mut [u8]) -> std::io::Result<(usize, SocketAddr, Option<u64>)> {
    sock.recv_from(buf).map(|(len, from)| (len, from, None))
}

/// Announces `node` to the verifier until parameters arrive. Pings from
/// challengers are answered meanwhile.
fn join(sock: &UdpSocket, cfg: &LiveConfig, node: u32) -> Result<ChallengeParams, LiveError> {
    let mut buf = vec![0u8; 65536];
    let give_up = Instant::now() + cfg.timeout();
    loop {
        send(sock, &Message::Ping(Ping { from: node, nonce: 0 }), cfg.verifier)?;
        let retry = (Instant::now() + Duration::from_millis(200)).min(give_up);
        while let Some((msg, from)) = recv(sock, &mut buf, retry)? {
            match msg {
                Message::Params(p) => return Ok(p),
                Message::Ping(p) => send(sock, &Message::Pong(p), from)?,
                _ => {}
            }
        }
        if Instant::now() >= give_up {
            return Err(LiveError::Timeout("challenge parameters".into()));
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChallengerSummary {
    pub id: u32,
    pub latency_ns: u64,
    pub rtt_ns: Option<u64>,
    pub sent: u32,
}

pub fn run_challenger(cfg: &LiveConfig, id: u32, listen: Option<SocketAddr>) -> Result<ChallengerSummary, LiveError> {
    if id >= cfg.n {
        return Err(LiveError::Config(format!("challenger id {id} out of range")));
    }
    let sock = UdpSocket::bind(listen.unwrap_or(cfg.challengers[id as usize]))?;
    let clock = Clock::new();
    let params = join(&sock, cfg, id)?;
    let mut buf = vec![0u8; 65536];
    let mut rng = rand::thread_rng();

    let mut samples = Vec::with_capacity(cfg.ping_count);
    for _ in 0..cfg.ping_count {
        let nonce: u64 = rng.gen();
        let sent = Instant::now();
        send(&sock, &Message::Ping(Ping { from: id, nonce }), cfg.prover)?;
        let deadline = sent + Duration::from_millis(500);
        while let Some((msg, _)) = recv(&sock, &mut buf, deadline)? {
            if matches!(msg, Message::Pong(p) if p.nonce == nonce) {
                samples.push(sent.elapsed().as_nanos() as u64);
                break;
            }
        }
    }
    if samples.is_empty() {
        return Err(LiveError::Timeout("prover ping replies".into()));
    }
    let latency = estimate_latency(&samples).expect("non-empty");
    let l_ref = (cfg.align_ms * 1_000_000).max(latency);
    info!("c{id}: l_i = {} us from {} pings", latency / 1000, samples.len());
    let mut latencies = vec![l_ref; cfg.n as usize];
    latencies[id as usize] = latency;
    let schedule = send_schedule(&params, &latencies).map_err(|e| LiveError::Config(e.to_string()))?;
    let prover_pk = node_key(cfg.key_seed, PROVER_NODE).public_key();
    let mut state = ChallengerState::new(id, node_key(cfg.key_seed, id), prover_pk, &params, &schedule, rng.next_u64());
    state.prepare();
    let events = state.on_start(clock.now());
    let encoded: Vec<Vec<u8>> = state.packets().iter().map(|p| p.encode()).collect();
    if state.slip_ns > 0 {
        warn!("c{id}: packet signing overran t_i1 by {} us", state.slip_ns / 1000);
    }

    let mut sent = 0;
    let mut verification = None;
    sock.set_nonblocking(true)?;
    for ev in &events {
        clock.sleep_until(ev.at_ns);
        sock.send_to(&encoded[ev.probe as usize], cfg.prover)?;
        state.mark_sent(ev.probe);
        sent += 1;
        while let Ok((len, _)) = sock.recv_from(&mut buf) {
            let now = clock.now();
            if let Ok(m) = Message::decode(&buf[..len]) {
                verification = handle(m, &mut state, now).or(verification);
            }
        }
    }
    sock.set_nonblocking(false)?;
    if let Some(last) = events.last() {
        debug!("c{id}: last send {} us behind schedule", clock.now().saturating_sub(last.at_ns) / 1000);
    }
    let deadline = Instant::now() + cfg.timeout();
    while state.rtt_ns().is_none() || verification.is_none() {
        let Some((msg, _)) = recv(&sock, &mut buf, deadline)? else {
            let what = if state.rtt_ns().is_none() { "the prover's response" } else { "the verification message" };
            return Err(LiveError::Timeout(what.into()));
        };
        let now = clock.now();
        verification = handle(msg, &mut state, now).or(verification);
    }
    let v = verification.expect("loop exit");
    let msg = match state.on_verification(&v) {
        Ok(report) => Message::Report(report),
        Err(reason) => {
            warn!("c{id}: verification failed: {reason:?}");
            Message::VerificationFailure(VerificationFailure { challenger_id: id, reason })
        }
    };
    send(&sock, &msg, cfg.verifier)?;
    info!("c{id}: rtt {:?} ns, {sent} packets sent", state.rtt_ns());
    Ok(ChallengerSummary { id, latency_ns: latency, rtt_ns: state.rtt_ns(), sent })
}

/// Feeds a message to the challenger; returns the verification message if
/// that is what arrived.
fn handle(msg: Message, state: &mut ChallengerState, now: u64) -> Option<VerificationMessage> {
    match msg {
        Message::Response(r) => {
            state.on_response(&r, now);
            None
        }
        Message::Verification(v) => Some(v),
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub struct ProverSummary {
    pub received: u64,
    pub shaper_drops: u64,
    pub responded: bool,
}

/// Receive buffer requested for the prover; the kernel may cap it.
const PROVER_RCVBUF: usize = 4 << 20;

/// Binds a UDP socket with a large receive buffer so bursts survive a
/// briefly descheduled reader.
fn bind_buffered(addr: SocketAddr, rcvbuf: usize) -> Result<UdpSocket, LiveError> {
    let sock = Socket::new(Domain::for_address(addr), Type::DGRAM, Some(Protocol::UDP))?;
    if let Err(e) = sock.set_recv_buffer_size(rcvbuf) {
        warn!("could not raise receive buffer: {e}");
    }
    sock.bind(&addr.into())?;
    Ok(sock.into())
}

pub fn run_prover(cfg: &LiveConfig, listen: Option<SocketAddr>) -> Result<ProverSummary, LiveError> {
    let sock = bind_buffered(listen.unwrap_or(cfg.prover), PROVER_RCVBUF)?;
    // The shaper sees wire arrival times, not when this loop gets around
    // to reading a datagram.
    enable_timestamps(&sock);
    let clock = Clock::new();
    let params = join(&sock, cfg, PROVER_NODE)?;
    let mut prover = ProverState::new(node_key(cfg.key_seed, PROVER_NODE), &params);
    let mut shaper = cfg.shaped_mbps.map(|r| Uplink::new(r * 1e6, cfg.shaper_queue_bytes));
    let mut shaper_drops = 0;
    let mut buf = vec![0u8; 65536];
    let mut verify_at: Option<u64> = None;
    // Quiet period after which the prover stops serving.
    let mut idle_until = Instant::now() + cfg.timeout() + Duration::from_millis(cfg.setup_ms);
    loop {
        let wake = match verify_at {
            Some(at) => {
                let now = clock.now();
                (Instant::now() + Duration::from_nanos(at.saturating_sub(now))).min(idle_until)
            }
            None => idle_until,
        };
        let got = recv_stamped(&sock, &mut buf, wake)?;
        if let Some(at) = verify_at {
            if clock.now() >= at {
                for i in 0..params.n {
                    send(&sock, &Message::Verification(prover.verification_message(i)), cfg.challengers[i as usize])?;
                }
                verify_at = None;
            }
        }
        let Some((msg, from, stamp)) = got else {
            if Instant::now() >= idle_until {
                break;
            }
            continue;
        };
        idle_until = Instant::now() + cfg.timeout();
        match msg {
            Message::Ping(p) => send(&sock, &Message::Pong(p), from)?,
            Message::Challenge(packet) => {
                let now = clock.now();
                let arrived = stamp.map_or(now, |t| t.min(now));
                let depart = match shaper.as_mut() {
                    Some(s) => match s.send(arrived, PACKET_BYTES) {
                        Some(d) => d as u64,
                        None => {
                            shaper_drops += 1;
                            continue;
                        }
                    },
                    None => now,
                };
                if prover.total_count() == 0 {
                    debug!("prover: first packet {} us after t0", arrived.saturating_sub(params.t0_ns) / 1000);
                }
                if let PacketOutcome::Respond(responses) = prover.on_packet(&packet) {
                    debug!("prover: threshold reached {} us after t0, shaper holds it {} us", now.saturating_sub(params.t0_ns) / 1000, depart.saturating_sub(now) / 1000);
                    clock.sleep_until(depart);
                    for (i, r) in responses.into_iter().enumerate() {
                        send(&sock, &Message::Response(r), cfg.challengers[i])?;
                    }
                    let report = prover.prover_report().expect("responded");
                    send(&sock, &Message::ProverReport(report), cfg.verifier)?;
                    info!("prover: responded after {} packets, {} us after t0", prover.total_count(), clock.now().saturating_sub(params.t0_ns) / 1000);
                    verify_at = Some(clock.now() + params.duration_ns);
                }
            }
            Message::ForwardedReports(list) => {
                for d in prover.on_forwarded_reports(&list) {
                    send(&sock, &Message::Dispute(d), cfg.verifier)?;
                }
            }
            _ => {}
        }
    }
    Ok(ProverSummary { received: prover.total_count(), shaper_drops, responded: prover.responded() })
}

/// Runs the verifier and returns its report. Fails when no output appears
/// before the deadline and dispute window.
pub fn run_verifier(cfg: &LiveConfig, listen: Option<SocketAddr>) -> Result<RunReport, LiveError> {
    let params = cfg.params()?;
    let sock = UdpSocket::bind(listen.unwrap_or(cfg.verifier))?;
    let clock = Clock::new();
    let mut buf = vec![0u8; 65536];

    let mut joined = vec![false; cfg.n as usize + 1];
    let give_up = Instant::now() + cfg.timeout();
    while joined.iter().any(|j| !j) {
        let Some((msg, _)) = recv(&sock, &mut buf, give_up)? else {
            let missing: Vec<String> = joined
                .iter()
                .enumerate()
                .filter(|(_, j)| !**j)
                .map(|(i, _)| if i == cfg.n as usize { "prover".to_string() } else { format!("c{i}") })
                .collect();
            return Err(LiveError::Timeout(format!("peers to join: {}", missing.join(", "))));
        };
        if let Message::Ping(p) = msg {
            let slot = if p.from == PROVER_NODE { cfg.n as usize } else { p.from as usize };
            if let Some(j) = joined.get_mut(slot) {
                *j = true;
            }
        }
    }
    let mut m0 = [0u8; 32];
    rand::thread_rng().fill_bytes(&mut m0);
    let params = params.with_start(clock.now() + cfg.setup_ms * 1_000_000).with_m0(m0);
    let msg = Message::Params(params.clone());
    send(&sock, &msg, cfg.prover)?;
    for &c in &cfg.challengers {
        send(&sock, &msg, c)?;
    }

    let pks: Vec<PublicKey> = (0..cfg.n).map(|i| node_key(cfg.key_seed, i).public_key()).collect();
    let mut verifier = VerifierState::new(&params, pks);
    let t0_instant = Instant::now() + Duration::from_millis(cfg.setup_ms);
    let deadline = t0_instant + Duration::from_nanos(params.duration_ns) * 10 + cfg.timeout();
    let finalize = deadline + Duration::from_secs(1);
    let mut output: Option<PoBOutput> = None;
    let mut deadline_passed = false;
    while output.is_none() {
        let wake = if deadline_passed { finalize } else { deadline };
        let got = recv(&sock, &mut buf, wake)?;
        let Some((msg, _)) = got else {
            if deadline_passed {
                output = verifier.finalize();
                break;
            }
            deadline_passed = true;
            if let Some(list) = verifier.on_deadline() {
                send(&sock, &Message::ForwardedReports(list), cfg.prover)?;
            }
            continue;
        };
        output = match msg {
            Message::ProverReport(r) => verifier.on_prover_report(&r),
            Message::Report(r) => verifier.on_report(&r).unwrap_or_else(|e| {
                warn!("report from c{} rejected: {e:?}", r.challenger_id);
                None
            }),
            Message::VerificationFailure(fail) => {
                if let Some(list) = verifier.on_failure(&fail) {
                    send(&sock, &Message::ForwardedReports(list), cfg.prover)?;
                }
                None
            }
            Message::Dispute(d) => verifier.resolve_dispute(&d).1,
            _ => None,
        };
    }
    let Some(out) = output else {
        return Err(LiveError::NoOutput);
    };
    info!("verifier: measured {:.2} Mbps, guaranteed {:.2} Mbps", out.measured_bw / 1e6, out.guaranteed_bw / 1e6);
    Ok(live_report(cfg, &params, &verifier, out))
}

fn live_report(cfg: &LiveConfig, params: &ChallengeParams, verifier: &VerifierState, out: PoBOutput) -> RunReport {
    let rtts: std::collections::BTreeMap<u32, u64> =
        verifier.accepted_reports().map(|r| (r.challenger_id, r.rtt_ns)).collect();
    let challengers = (0..params.n)
        .map(|i| {
            let delta = rtts.get(&i).copied();
            ChallengerRow {
                id: i,
                corrupt: false,
                delta_ns: delta,
                implied_bps: delta.map(|d| pob_core::roles::measured_bandwidth::<f64>(out.cnt, params.packet_bytes, d)),
                acknowledged: verifier.credits().get(&i).copied(),
                timed_out: false,
            }
        })
        .collect();
    let backhaul_bps = cfg.shaped_mbps.unwrap_or(cfg.theta_claimed_mbps) * 1e6;
    let reps = vec![Repetition {
        index: 0,
        seed: 0,
        terminated: true,
        output: Some(out),
        challengers,
        drops: Default::default(),
        challenge_bytes_sent: 0,
    }];
    RunReport {
        version: REPORT_VERSION,
        scenario: "live".into(),
        backhaul_bps,
        theta_claimed_bps: params.theta_claimed,
        challenger_bps: params.theta0,
        challenge_bytes: params.total_challenge_bytes(),
        attack: "--".into(),
        n: params.n,
        f: params.f,
        k: params.k,
        duration_ns: params.duration_ns,
        summary: Summary::from_repetitions(&reps, backhaul_bps),
        repetitions: reps,
        ladder: None,
    }
}
