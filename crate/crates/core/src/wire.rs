//! Byte layouts for every protocol message.
//!
//! All integers are big-endian. Each message starts with a 4-byte tag region
//! (`tag`, `version`, two reserved zero bytes) except the challenge packet,
//! whose tag lives inside its 64-byte header. Decoders accept exactly one
//! byte string per message: reserved bytes, unused signature slots and
//! bitmap padding bits must be zero.

use thiserror::Error;

use crate::crypto::{unique_sequences, Digest, MerkleProof, Signature, DIGEST_LEN, SIGNATURE_LEN};
use crate::schedule::{ChallengeParams, RatePolicy, ThresholdMode};

/// On-wire size of a challenge packet, including the lower-layer header budget.
pub const PACKET_BYTES: u32 = 1514;
/// Lower-layer (Ethernet + IP + UDP) header budget.
pub const LOWER_LAYER_HEADER: u32 = 42;
/// UDP payload of a challenge packet.
pub const CHALLENGE_PAYLOAD: usize = 1472;
pub const CHALLENGE_HEADER: usize = 64;
/// Signature slots per challenge packet.
pub const SIGS_PER_PACKET: usize = 22;
/// Body of a response after its tag region.
pub const RESPONSE_BODY: usize = 128;
pub const WIRE_VERSION: u8 = 1;
/// Largest datagram the live transport will send.
pub const MAX_DATAGRAM: usize = 65_507;

const TAG_REGION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Tag {
    Challenge = 0x01,
    Response = 0x02,
    Verification = 0x03,
    Report = 0x04,
    Dispute = 0x05,
    ProverReport = 0x06,
    VerificationFailure = 0x07,
    Ping = 0x08,
    Pong = 0x09,
    Params = 0x0a,
    ForwardedReports = 0x0b,
}

impl Tag {
    fn from_byte(b: u8) -> Option<Tag> {
        use Tag::*;
        Some(match b {
            0x01 => Challenge,
            0x02 => Response,
            0x03 => Verification,
            0x04 => Report,
            0x05 => Dispute,
            0x06 => ProverReport,
            0x07 => VerificationFailure,
            0x08 => Ping,
            0x09 => Pong,
            0x0a => Params,
            0x0b => ForwardedReports,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("empty input")]
    Empty,
    #[error("unknown message tag 0x{0:02x}")]
    BadTag(u8),
    #[error("expected {expected:?} message, found {found:?}")]
    UnexpectedTag { expected: Tag, found: Tag },
    #[error("unsupported wire version {0}")]
    Version(u8),
    #[error("{message}: expected {expected} bytes, got {actual}")]
    Length { message: &'static str, expected: usize, actual: usize },
    #[error("{message}: truncated while reading `{field}`")]
    Truncated { message: &'static str, field: &'static str },
    #[error("field `{field}` is invalid: {reason}")]
    Field { field: &'static str, reason: String },
    #[error("field `{0}` must be zero")]
    NonZero(&'static str),
}

fn field_err(field: &'static str, reason: impl Into<String>) -> WireError {
    WireError::Field { field, reason: reason.into() }
}

/// One probe: a challenge packet carrying up to 22 consecutive signatures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChallengePacket {
    pub challenger_id: u32,
    /// Sequence number of the first signature.
    pub base_seq: u32,
    pub nonce: [u8; 8],
    /// Signature `j` covers `(base_seq + j, m0)`.
    pub signatures: Vec<Signature>,
}

impl ChallengePacket {
    /// Index of the probe this packet carries, when `base_seq` is aligned to
    /// the 22-signature grid.
    pub fn probe_index(&self) -> Option<u32> {
        (self.base_seq % SIGS_PER_PACKET as u32 == 0).then(|| self.base_seq / SIGS_PER_PACKET as u32)
    }

    pub fn entries(&self) -> impl Iterator<Item = (u32, Signature)> + '_ {
        self.signatures.iter().enumerate().map(move |(j, s)| (self.base_seq.wrapping_add(j as u32), *s))
    }
}

/// Prover's measurement-phase response to one challenger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResponsePacket {
    pub receipt: Digest,
    pub merkle_root: Digest,
    pub prover_signature: Signature,
}

/// Fixed-length bit map, most significant bit first within each byte.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Bitmap {
    len: u32,
    bytes: Vec<u8>,
}

impl Bitmap {
    pub fn new(len: u32) -> Self {
        Bitmap { len, bytes: vec![0; (len as usize).div_ceil(8)] }
    }

    pub fn from_indices(len: u32, indices: impl IntoIterator<Item = u32>) -> Self {
        let mut map = Bitmap::new(len);
        for i in indices {
            map.set(i);
        }
        map
    }

    pub fn len(&self) -> u32 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn set(&mut self, index: u32) {
        assert!(index < self.len, "bit {index} outside bitmap of {} bits", self.len);
        self.bytes[index as usize / 8] |= 0x80 >> (index % 8);
    }

    pub fn clear(&mut self, index: u32) {
        assert!(index < self.len);
        self.bytes[index as usize / 8] &= !(0x80 >> (index % 8));
    }

    pub fn get(&self, index: u32) -> bool {
        index < self.len && self.bytes[index as usize / 8] & (0x80 >> (index % 8)) != 0
    }

    pub fn toggle(&mut self, index: u32) {
        if self.get(index) {
            self.clear(index)
        } else {
            self.set(index)
        }
    }

    pub fn count_ones(&self) -> u32 {
        self.bytes.iter().map(|b| b.count_ones()).sum()
    }

    pub fn ones(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.len).filter(|&i| self.get(i))
    }
}

/// Verification-phase message from the prover to one challenger.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationMessage {
    /// Bit `p` is set iff probe `p` of this challenger was received.
    pub bitmap: Bitmap,
    pub merkle_proof: MerkleProof,
}

/// A challenger's report to the verifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChallengerReport {
    pub challenger_id: u32,
    pub prover_id: u32,
    pub merkle_root_seen: Digest,
    pub rtt_ns: u64,
    pub packets_acknowledged: u32,
}

/// Prover evidence for a challenger whose report is missing or disputed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisputeSubmission {
    pub challenger_id: u32,
    pub packets: Vec<(u32, Signature)>,
    pub merkle_proof: MerkleProof,
}

/// Prover's commitment sent to the verifier after responding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProverReport {
    pub prover_id: u32,
    pub merkle_root: Digest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FailureReason {
    ReceiptMismatch = 1,
    MerkleMismatch = 2,
    NoResponse = 3,
    /// Claimed without evidence; used by misbehaving challengers.
    Unspecified = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerificationFailure {
    pub challenger_id: u32,
    pub reason: FailureReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ping {
    pub from: u32,
    pub nonce: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ReportStatus {
    Accepted = 1,
    Missing = 2,
    Failed = 3,
    Rejected = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardedReport {
    pub challenger_id: u32,
    pub status: ReportStatus,
    pub credited: u32,
}

/// Any protocol message.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Challenge(ChallengePacket),
    Response(ResponsePacket),
    Verification(VerificationMessage),
    Report(ChallengerReport),
    Dispute(DisputeSubmission),
    ProverReport(ProverReport),
    VerificationFailure(VerificationFailure),
    Ping(Ping),
    Pong(Ping),
    Params(ChallengeParams),
    ForwardedReports(Vec<ForwardedReport>),
}

struct Writer(Vec<u8>);

impl Writer {
    fn tagged(tag: Tag, capacity: usize) -> Self {
        let mut buf = Vec::with_capacity(capacity);
        buf.extend_from_slice(&[tag as u8, WIRE_VERSION, 0, 0]);
        Writer(buf)
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.0.extend_from_slice(v);
    }
    fn proof(&mut self, p: &MerkleProof) {
        self.u32(p.leaf_index);
        self.u8(p.siblings.len() as u8);
        for s in &p.siblings {
            self.bytes(&s.0);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    message: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(WireError::Truncated { message: self.message, field })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self, field: &'static str) -> Result<u8, WireError> {
        Ok(self.take(1, field)?[0])
    }
    fn u16(&mut self, field: &'static str) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2, field)?.try_into().unwrap()))
    }
    fn u32(&mut self, field: &'static str) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4, field)?.try_into().unwrap()))
    }
    fn u64(&mut self, field: &'static str) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8, field)?.try_into().unwrap()))
    }
    fn f64(&mut self, field: &'static str) -> Result<f64, WireError> {
        Ok(f64::from_bits(self.u64(field)?))
    }
    fn digest(&mut self, field: &'static str) -> Result<Digest, WireError> {
        Ok(Digest(self.take(DIGEST_LEN, field)?.try_into().unwrap()))
    }
    fn signature(&mut self, field: &'static str) -> Result<Signature, WireError> {
        Ok(Signature(self.take(SIGNATURE_LEN, field)?.try_into().unwrap()))
    }
    fn proof(&mut self) -> Result<MerkleProof, WireError> {
        let leaf_index = self.u32("merkle_proof.leaf_index")?;
        let count = self.u8("merkle_proof.sibling_count")?;
        if count >= 32 {
            return Err(field_err("merkle_proof.sibling_count", format!("{count} exceeds 31")));
        }
        let siblings = (0..count).map(|_| self.digest("merkle_proof.siblings")).collect::<Result<_, _>>()?;
        Ok(MerkleProof { leaf_index, siblings })
    }
    fn finish(self) -> Result<(), WireError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(WireError::Length { message: self.message, expected: self.pos, actual: self.buf.len() })
        }
    }
}

fn tag_region<'a>(bytes: &'a [u8], message: &'static str) -> Result<Reader<'a>, WireError> {
    if bytes.len() < TAG_REGION {
        return Err(WireError::Truncated { message, field: "tag" });
    }
    if bytes[1] != WIRE_VERSION {
        return Err(WireError::Version(bytes[1]));
    }
    if bytes[2] != 0 || bytes[3] != 0 {
        return Err(WireError::NonZero("reserved"));
    }
    Ok(Reader { buf: bytes, pos: TAG_REGION, message })
}

impl ChallengePacket {
    pub fn encode(&self) -> Vec<u8> {
        assert!(
            (1..=SIGS_PER_PACKET).contains(&self.signatures.len()),
            "challenge packet carries 1..=22 signatures"
        );
        let mut buf = vec![0u8; CHALLENGE_PAYLOAD];
        buf[0] = Tag::Challenge as u8;
        buf[1] = WIRE_VERSION;
        buf[2..4].copy_from_slice(&(self.signatures.len() as u16).to_be_bytes());
        buf[4..8].copy_from_slice(&self.challenger_id.to_be_bytes());
        buf[8..12].copy_from_slice(&self.base_seq.to_be_bytes());
        buf[12..20].copy_from_slice(&self.nonce);
        for (j, sig) in self.signatures.iter().enumerate() {
            let at = CHALLENGE_HEADER + j * SIGNATURE_LEN;
            buf[at..at + SIGNATURE_LEN].copy_from_slice(&sig.0);
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        expect_tag(bytes, Tag::Challenge)?;
        if bytes.len() != CHALLENGE_PAYLOAD {
            return Err(WireError::Length { message: "challenge", expected: CHALLENGE_PAYLOAD, actual: bytes.len() });
        }
        if bytes[1] != WIRE_VERSION {
            return Err(WireError::Version(bytes[1]));
        }
        let mut r = Reader { buf: bytes, pos: 2, message: "challenge" };
        let count = r.u16("count")? as usize;
        if count == 0 || count > SIGS_PER_PACKET {
            return Err(field_err("count", format!("{count} not in 1..=22")));
        }
        let challenger_id = r.u32("challenger_id")?;
        let base_seq = r.u32("base_seq")?;
        let nonce = r.take(8, "nonce")?.try_into().unwrap();
        if bytes[20..CHALLENGE_HEADER].iter().any(|&b| b != 0) {
            return Err(WireError::NonZero("header padding"));
        }
        if base_seq.checked_add(count as u32 - 1).is_none() {
            return Err(field_err("base_seq", "sequence numbers overflow"));
        }
        let signatures = (0..count)
            .map(|j| {
                let at = CHALLENGE_HEADER + j * SIGNATURE_LEN;
                Signature(bytes[at..at + SIGNATURE_LEN].try_into().unwrap())
            })
            .collect();
        if bytes[CHALLENGE_HEADER + count * SIGNATURE_LEN..].iter().any(|&b| b != 0) {
            return Err(WireError::NonZero("unused signature slots"));
        }
        Ok(ChallengePacket { challenger_id, base_seq, nonce, signatures })
    }
}

fn expect_tag(bytes: &[u8], expected: Tag) -> Result<(), WireError> {
    let first = *bytes.first().ok_or(WireError::Empty)?;
    let found = Tag::from_byte(first).ok_or(WireError::BadTag(first))?;
    if found != expected {
        return Err(WireError::UnexpectedTag { expected, found });
    }
    Ok(())
}

impl ResponsePacket {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::tagged(Tag::Response, TAG_REGION + RESPONSE_BODY);
        w.bytes(&self.receipt.0);
        w.bytes(&self.merkle_root.0);
        w.bytes(&self.prover_signature.0);
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        expect_tag(bytes, Tag::Response)?;
        if bytes.len() != TAG_REGION + RESPONSE_BODY {
            return Err(WireError::Length { message: "response", expected: TAG_REGION + RESPONSE_BODY, actual: bytes.len() });
        }
        let mut r = tag_region(bytes, "response")?;
        let out = ResponsePacket {
            receipt: r.digest("receipt")?,
            merkle_root: r.digest("merkle_root")?,
            prover_signature: r.signature("prover_signature")?,
        };
        r.finish()?;
        Ok(out)
    }
}

impl VerificationMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::tagged(Tag::Verification, 64 + self.bitmap.bytes.len());
        w.u32(self.bitmap.len);
        w.u32(self.bitmap.count_ones());
        w.bytes(&self.bitmap.bytes);
        w.proof(&self.merkle_proof);
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        expect_tag(bytes, Tag::Verification)?;
        let mut r = tag_region(bytes, "verification")?;
        let out = Self::read(&mut r)?;
        r.finish()?;
        Ok(out)
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let len = r.u32("bitmap_len")?;
        let acknowledged = r.u32("acknowledged")?;
        let raw = r.take((len as usize).div_ceil(8), "bitmap")?;
        let bitmap = Bitmap { len, bytes: raw.to_vec() };
        if len % 8 != 0 {
            let spare = 8 - len % 8;
            if raw.last().is_some_and(|b| b & ((1u8 << spare) - 1) != 0) {
                return Err(WireError::NonZero("bitmap padding bits"));
            }
        }
        if bitmap.count_ones() != acknowledged {
            return Err(field_err(
                "acknowledged",
                format!("popcount {} differs from declared {acknowledged}", bitmap.count_ones()),
            ));
        }
        Ok(VerificationMessage { bitmap, merkle_proof: r.proof()? })
    }
}

impl ChallengerReport {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::tagged(Tag::Report, 56);
        w.u32(self.challenger_id);
        w.u32(self.prover_id);
        w.bytes(&self.merkle_root_seen.0);
        w.u64(self.rtt_ns);
        w.u32(self.packets_acknowledged);
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        expect_tag(bytes, Tag::Report)?;
        let mut r = tag_region(bytes, "report")?;
        let out = ChallengerReport {
            challenger_id: r.u32("challenger_id")?,
            prover_id: r.u32("prover_id")?,
            merkle_root_seen: r.digest("merkle_root_seen")?,
            rtt_ns: r.u64("rtt")?,
            packets_acknowledged: r.u32("packets_acknowledged")?,
        };
        r.finish()?;
        if out.rtt_ns == 0 {
            return Err(field_err("rtt", "must be positive"));
        }
        Ok(out)
    }
}

impl DisputeSubmission {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::tagged(Tag::Dispute, 16 + self.packets.len() * 68);
        w.u32(self.challenger_id);
        w.u32(self.packets.len() as u32);
        for (seq, sig) in &self.packets {
            w.u32(*seq);
            w.bytes(&sig.0);
        }
        w.proof(&self.merkle_proof);
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        expect_tag(bytes, Tag::Dispute)?;
        let mut r = tag_region(bytes, "dispute")?;
        let challenger_id = r.u32("challenger_id")?;
        let count = r.u32("packet_count")? as usize;
        if count > (bytes.len() - r.pos) / 68 {
            return Err(WireError::Truncated { message: "dispute", field: "packets" });
        }
        let packets = (0..count)
            .map(|_| Ok((r.u32("packets.seq")?, r.signature("packets.signature")?)))
            .collect::<Result<Vec<_>, WireError>>()?;
        // Canonical form lists entries strictly ascending.
        if packets.windows(2).any(|w| w[0].0 >= w[1].0) || !unique_sequences(&packets) {
            return Err(field_err("packets", "sequence numbers must be strictly ascending"));
        }
        let merkle_proof = r.proof()?;
        r.finish()?;
        Ok(DisputeSubmission { challenger_id, packets, merkle_proof })
    }
}

impl Message {
    pub fn tag(&self) -> Tag {
        match self {
            Message::Challenge(_) => Tag::Challenge,
            Message::Response(_) => Tag::Response,
            Message::Verification(_) => Tag::Verification,
            Message::Report(_) => Tag::Report,
            Message::Dispute(_) => Tag::Dispute,
            Message::ProverReport(_) => Tag::ProverReport,
            Message::VerificationFailure(_) => Tag::VerificationFailure,
            Message::Ping(_) => Tag::Ping,
            Message::Pong(_) => Tag::Pong,
            Message::Params(_) => Tag::Params,
            Message::ForwardedReports(_) => Tag::ForwardedReports,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            Message::Challenge(m) => m.encode(),
            Message::Response(m) => m.encode(),
            Message::Verification(m) => m.encode(),
            Message::Report(m) => m.encode(),
            Message::Dispute(m) => {
                // Dispute entries are canonical only when sorted.
                let mut m = m.clone();
                m.packets.sort_by_key(|(seq, _)| *seq);
                m.encode()
            }
            Message::ProverReport(m) => {
                let mut w = Writer::tagged(Tag::ProverReport, 40);
                w.u32(m.prover_id);
                w.bytes(&m.merkle_root.0);
                w.0
            }
            Message::VerificationFailure(m) => {
                let mut w = Writer::tagged(Tag::VerificationFailure, 9);
                w.u32(m.challenger_id);
                w.u8(m.reason as u8);
                w.0
            }
            Message::Ping(p) | Message::Pong(p) => {
                let mut w = Writer::tagged(self.tag(), 16);
                w.u32(p.from);
                w.u64(p.nonce);
                w.0
            }
            Message::Params(p) => {
                let mut w = Writer::tagged(Tag::Params, 112);
                w.u64(p.t0_ns);
                w.bytes(&p.m0);
                w.f64(p.theta_claimed);
                w.f64(p.theta0);
                w.u32(p.n);
                w.u32(p.f);
                w.u32(p.k);
                w.u32(p.packet_bytes);
                w.u64(p.duration_ns);
                w.f64(p.overprovision);
                w.u8(p.rate_policy as u8);
                w.u8(p.threshold_mode as u8);
                w.u16(0);
                w.0
            }
            Message::ForwardedReports(list) => {
                let mut w = Writer::tagged(Tag::ForwardedReports, 8 + list.len() * 9);
                w.u32(list.len() as u32);
                for r in list {
                    w.u32(r.challenger_id);
                    w.u8(r.status as u8);
                    w.u32(r.credited);
                }
                w.0
            }
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let first = *bytes.first().ok_or(WireError::Empty)?;
        let tag = Tag::from_byte(first).ok_or(WireError::BadTag(first))?;
        Ok(match tag {
            Tag::Challenge => Message::Challenge(ChallengePacket::decode(bytes)?),
            Tag::Response => Message::Response(ResponsePacket::decode(bytes)?),
            Tag::Verification => Message::Verification(VerificationMessage::decode(bytes)?),
            Tag::Report => Message::Report(ChallengerReport::decode(bytes)?),
            Tag::Dispute => Message::Dispute(DisputeSubmission::decode(bytes)?),
            Tag::ProverReport => {
                let mut r = tag_region(bytes, "prover_report")?;
                let m = ProverReport { prover_id: r.u32("prover_id")?, merkle_root: r.digest("merkle_root")? };
                r.finish()?;
                Message::ProverReport(m)
            }
            Tag::VerificationFailure => {
                let mut r = tag_region(bytes, "verification_failure")?;
                let challenger_id = r.u32("challenger_id")?;
                let reason = match r.u8("reason")? {
                    1 => FailureReason::ReceiptMismatch,
                    2 => FailureReason::MerkleMismatch,
                    3 => FailureReason::NoResponse,
                    4 => FailureReason::Unspecified,
                    other => return Err(field_err("reason", format!("unknown code {other}"))),
                };
                r.finish()?;
                Message::VerificationFailure(VerificationFailure { challenger_id, reason })
            }
            Tag::Ping | Tag::Pong => {
                let mut r = tag_region(bytes, "ping")?;
                let p = Ping { from: r.u32("from")?, nonce: r.u64("nonce")? };
                r.finish()?;
                if tag == Tag::Ping {
                    Message::Ping(p)
                } else {
                    Message::Pong(p)
                }
            }
            Tag::Params => {
                let mut r = tag_region(bytes, "params")?;
                let t0_ns = r.u64("t0")?;
                let m0 = r.take(32, "m0")?.try_into().unwrap();
                let theta_claimed = r.f64("theta_claimed")?;
                let theta0 = r.f64("theta0")?;
                let n = r.u32("n")?;
                let f = r.u32("f")?;
                let k = r.u32("k")?;
                let packet_bytes = r.u32("packet_bytes")?;
                let duration_ns = r.u64("duration")?;
                let overprovision = r.f64("overprovision")?;
                let rate_policy = match r.u8("rate_policy")? {
                    0 => RatePolicy::PerN,
                    1 => RatePolicy::PerNMinusF,
                    other => return Err(field_err("rate_policy", format!("unknown code {other}"))),
                };
                let threshold_mode = match r.u8("threshold_mode")? {
                    0 => ThresholdMode::Lazy,
                    1 => ThresholdMode::Timer,
                    other => return Err(field_err("threshold_mode", format!("unknown code {other}"))),
                };
                if r.u16("reserved")? != 0 {
                    return Err(WireError::NonZero("reserved"));
                }
                r.finish()?;
                for (field, v) in [("theta_claimed", theta_claimed), ("theta0", theta0), ("overprovision", overprovision)] {
                    if !v.is_finite() || v <= 0.0 {
                        return Err(field_err(field, "must be positive and finite"));
                    }
                }
                Message::Params(ChallengeParams {
                    t0_ns,
                    m0,
                    theta_claimed,
                    theta0,
                    n,
                    f,
                    k,
                    packet_bytes,
                    duration_ns,
                    overprovision,
                    rate_policy,
                    threshold_mode,
                })
            }
            Tag::ForwardedReports => {
                let mut r = tag_region(bytes, "forwarded_reports")?;
                let count = r.u32("count")? as usize;
                if count > (bytes.len() - r.pos) / 9 {
                    return Err(WireError::Truncated { message: "forwarded_reports", field: "entries" });
                }
                let mut list = Vec::with_capacity(count);
                for _ in 0..count {
                    let challenger_id = r.u32("challenger_id")?;
                    let status = match r.u8("status")? {
                        1 => ReportStatus::Accepted,
                        2 => ReportStatus::Missing,
                        3 => ReportStatus::Failed,
                        4 => ReportStatus::Rejected,
                        other => return Err(field_err("status", format!("unknown code {other}"))),
                    };
                    list.push(ForwardedReport { challenger_id, status, credited: r.u32("credited")? });
                }
                r.finish()?;
                Message::ForwardedReports(list)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn packet(count: usize) -> ChallengePacket {
        ChallengePacket {
            challenger_id: 3,
            base_seq: 44,
            nonce: [7; 8],
            signatures: (0..count).map(|j| Signature([j as u8 + 1; 64])).collect(),
        }
    }

    #[test]
    fn challenge_payload_is_always_1472() {
        for count in 1..=SIGS_PER_PACKET {
            assert_eq!(packet(count).encode().len(), 1472);
        }
        assert_eq!(CHALLENGE_PAYLOAD as u32 + LOWER_LAYER_HEADER, PACKET_BYTES);
        assert_eq!(CHALLENGE_HEADER + SIGS_PER_PACKET * SIGNATURE_LEN, CHALLENGE_PAYLOAD);
    }

    #[test]
    fn challenge_round_trip_and_probe_index() {
        let p = packet(22);
        assert_eq!(ChallengePacket::decode(&p.encode()).unwrap(), p);
        assert_eq!(p.probe_index(), Some(2));
        assert_eq!(ChallengePacket { base_seq: 45, ..p }.probe_index(), None);
    }

    #[test]
    fn challenge_rejects_bad_count_and_dirty_slots() {
        let mut bytes = packet(2).encode();
        bytes[2..4].copy_from_slice(&23u16.to_be_bytes());
        assert!(matches!(ChallengePacket::decode(&bytes), Err(WireError::Field { field: "count", .. })));
        let mut bytes = packet(2).encode();
        bytes[1471] = 1;
        assert_eq!(ChallengePacket::decode(&bytes), Err(WireError::NonZero("unused signature slots")));
        let bytes = packet(2).encode();
        assert!(matches!(ChallengePacket::decode(&bytes[..1471]), Err(WireError::Length { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(ChallengePacket::decode(&long), Err(WireError::Length { .. })));
    }

    #[test]
    fn zero_response_is_zero_after_tag_region() {
        let resp = ResponsePacket { receipt: Digest::default(), merkle_root: Digest::default(), prover_signature: Signature::ZERO };
        let bytes = resp.encode();
        assert_eq!(bytes.len(), 4 + 128);
        assert_eq!(&bytes[..4], &[Tag::Response as u8, WIRE_VERSION, 0, 0]);
        assert!(bytes[4..].iter().all(|&b| b == 0));
        assert_eq!(ResponsePacket::decode(&bytes).unwrap(), resp);
    }

    #[test]
    fn bad_tags_are_named() {
        assert_eq!(Message::decode(&[0xee, 1, 0, 0]), Err(WireError::BadTag(0xee)));
        assert_eq!(Message::decode(&[]), Err(WireError::Empty));
        let resp = ResponsePacket { receipt: Digest::default(), merkle_root: Digest::default(), prover_signature: Signature::ZERO };
        assert!(matches!(ChallengePacket::decode(&resp.encode()), Err(WireError::UnexpectedTag { .. })));
    }

    #[test]
    fn bitmap_basics() {
        let mut b = Bitmap::from_indices(10, [0, 9]);
        assert_eq!(b.as_bytes(), &[0x80, 0x40]);
        assert_eq!(b.count_ones(), 2);
        b.toggle(9);
        assert_eq!(b.ones().collect::<Vec<_>>(), vec![0]);
        assert!(!b.get(10));
    }

    #[test]
    fn verification_popcount_and_padding_checked() {
        let msg = VerificationMessage {
            bitmap: Bitmap::from_indices(12, [1, 2, 11]),
            merkle_proof: MerkleProof { leaf_index: 1, siblings: vec![Digest([5; 32])] },
        };
        let bytes = msg.encode();
        assert_eq!(VerificationMessage::decode(&bytes).unwrap(), msg);
        let mut bad = bytes.clone();
        bad[11] = 4; // declared popcount
        assert!(matches!(VerificationMessage::decode(&bad), Err(WireError::Field { field: "acknowledged", .. })));
        let mut bad = bytes.clone();
        bad[13] |= 0x01; // padding bit after bit 11
        assert!(VerificationMessage::decode(&bad).is_err());
    }

    #[test]
    fn report_requires_positive_rtt() {
        let r = ChallengerReport { challenger_id: 1, prover_id: 0, merkle_root_seen: Digest([1; 32]), rtt_ns: 0, packets_acknowledged: 3 };
        assert!(matches!(ChallengerReport::decode(&r.encode()), Err(WireError::Field { field: "rtt", .. })));
    }

    #[test]
    fn dispute_requires_ascending_entries() {
        let d = DisputeSubmission {
            challenger_id: 2,
            packets: vec![(5, Signature([1; 64])), (1, Signature([2; 64]))],
            merkle_proof: MerkleProof::default(),
        };
        assert!(DisputeSubmission::decode(&d.encode()).is_err());
        let Message::Dispute(sorted) = Message::decode(&Message::Dispute(d).encode()).unwrap() else { panic!() };
        assert_eq!(sorted.packets[0].0, 1);
    }
}
