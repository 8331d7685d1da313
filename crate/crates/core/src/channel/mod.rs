//! Attested channels: a mutually attested key-agreement handshake followed
//! by an AEAD-protected record layer, plus an unprotected "native" mode that
//! keeps identical framing for baseline comparisons.
//!
//! Every handshake message and record is framed as
//! `length u32 LE ‖ tag u8 ‖ body`, where `length` counts the body bytes.
//!
//! Attested handshake (I = initiator, R = responder):
//!
//! ```text
//! I → R  HelloInit  version ‖ mode ‖ I.ephemeral_pub ‖ quote(report_data = H(I.ephemeral_pub))
//! R → I  HelloResp  version ‖ mode ‖ R.ephemeral_pub ‖ quote(report_data = H(R.ephemeral_pub))
//! I → R  Finished   HMAC(i_finished_key, H(transcript))
//! R → I  Finished   HMAC(r_finished_key, H(transcript))
//! ```
//!
//! Each side verifies the peer quote before deriving any key. Keys come from
//! HKDF-SHA256 over the X25519 shared secret salted with the transcript
//! digest, one key per direction. Records are ChaCha20-Poly1305 with the
//! nonce `direction ‖ 0 0 0 ‖ counter u64 LE` and associated data
//! `direction ‖ counter`.

mod transport;

use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand::rngs::OsRng;
use sha2::{Digest, Sha256};
use x25519_dalek::{EphemeralSecret, PublicKey};

pub use transport::{duplex_pair, pipe, PipeReader, PipeWriter, TimedRead, Transport};

use crate::attest::{report_data_for, verify_quote, AttestError, AttestationAuthority, Measurement, Quote, VerifyPolicy, QUOTE_LEN};

pub const PROTOCOL_VERSION: u8 = 0x01;
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;
pub const AEAD_TAG_LEN: usize = 16;
/// Length prefix plus message tag.
pub const FRAME_HEADER_LEN: usize = 5;
const MAX_HANDSHAKE_BODY: usize = 1024;

/// Frame type tags.
pub mod tag {
    pub const HELLO_INIT: u8 = 0x01;
    pub const HELLO_RESP: u8 = 0x02;
    pub const FINISHED: u8 = 0x03;
    pub const ALERT: u8 = 0x15;
    pub const SEALED: u8 = 0x17;
    pub const PLAIN: u8 = 0x18;
}

const DIR_I2R: u8 = 0x01;
const DIR_R2I: u8 = 0x02;

/// Codes carried by alert messages and used as abort reasons.
pub mod alert {
    pub const VERSION_MISMATCH: u16 = 1;
    pub const MODE_MISMATCH: u16 = 2;
    pub const BAD_SIGNATURE: u16 = 3;
    pub const MEASUREMENT_MISMATCH: u16 = 4;
    pub const REPORT_DATA_MISMATCH: u16 = 5;
    pub const MALFORMED: u16 = 6;
    pub const TRANSCRIPT_MISMATCH: u16 = 7;
    pub const WEAK_KEY: u16 = 8;
}

#[derive(Debug, thiserror::Error)]
pub enum ChannelError {
    #[error("peer attestation rejected: {0}")]
    Attestation(#[from] AttestError),
    #[error("unsupported protocol version {0:#04x}")]
    Version(u8),
    #[error("peer channel mode {peer} does not match local mode {local}")]
    ModeMismatch { local: ChannelMode, peer: ChannelMode },
    #[error("peer aborted the handshake with alert code {0}")]
    PeerAlert(u16),
    #[error("unexpected message tag {0:#04x}")]
    UnexpectedMessage(u8),
    #[error("malformed handshake message: {0}")]
    Malformed(String),
    #[error("handshake transcript mismatch")]
    TranscriptMismatch,
    #[error("key agreement produced a non-contributory secret")]
    WeakKey,
    #[error("timed out waiting for peer")]
    Timeout,
    #[error("stream ended in the middle of a frame")]
    Truncated,
    #[error("peer closed the stream")]
    Closed,
    #[error("frame failed authentication")]
    AuthFailed,
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    Oversize(usize),
    #[error("incoming frame length {0} exceeds the limit")]
    FrameTooLarge(u64),
    #[error("nonce counter exhausted")]
    CounterExhausted,
    #[error("channel was aborted by an earlier error")]
    Aborted,
    #[error("i/o error: {0}")]
    Io(io::Error),
}

impl From<io::Error> for ChannelError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::UnexpectedEof => ChannelError::Truncated,
            io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => ChannelError::Timeout,
            _ => ChannelError::Io(e),
        }
    }
}

impl ChannelError {
    /// Alert code to send to the peer for a locally detected handshake failure.
    fn alert_code(&self) -> Option<u16> {
        Some(match self {
            ChannelError::Version(_) => alert::VERSION_MISMATCH,
            ChannelError::ModeMismatch { .. } => alert::MODE_MISMATCH,
            ChannelError::Attestation(AttestError::BadSignature) => alert::BAD_SIGNATURE,
            ChannelError::Attestation(AttestError::MeasurementMismatch(_)) => alert::MEASUREMENT_MISMATCH,
            ChannelError::Attestation(AttestError::ReportDataMismatch) => alert::REPORT_DATA_MISMATCH,
            ChannelError::Attestation(_) | ChannelError::Malformed(_) | ChannelError::UnexpectedMessage(_) => {
                alert::MALFORMED
            }
            ChannelError::TranscriptMismatch => alert::TRANSCRIPT_MISMATCH,
            ChannelError::WeakKey => alert::WEAK_KEY,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChannelMode {
    Native,
    Attested,
}

impl ChannelMode {
    fn wire(self) -> u8 {
        match self {
            ChannelMode::Native => 0,
            ChannelMode::Attested => 1,
        }
    }

    fn from_wire(b: u8) -> Option<Self> {
        match b {
            0 => Some(ChannelMode::Native),
            1 => Some(ChannelMode::Attested),
            _ => None,
        }
    }
}

impl fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelMode::Native => "native",
            ChannelMode::Attested => "attested",
        })
    }
}

impl FromStr for ChannelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native" => Ok(ChannelMode::Native),
            "attested" => Ok(ChannelMode::Attested),
            other => Err(format!("unknown channel mode {other:?} (expected native|attested)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Initiator,
    Responder,
}

/// What a node presents during an attested handshake: its measurement and
/// access to the quoting authority (the simulated hardware).
#[derive(Clone, Debug)]
pub struct NodeIdentity {
    pub measurement: Measurement,
    pub authority: Arc<AttestationAuthority>,
}

#[derive(Clone, Debug)]
pub enum Security {
    Native,
    Attested { identity: NodeIdentity, policy: VerifyPolicy },
}

impl Security {
    pub fn mode(&self) -> ChannelMode {
        match self {
            Security::Native => ChannelMode::Native,
            Security::Attested { .. } => ChannelMode::Attested,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ChannelOptions {
    pub handshake_timeout: Duration,
    /// Applied to record reads after the handshake; `None` blocks forever.
    pub read_timeout: Option<Duration>,
}

impl Default for ChannelOptions {
    fn default() -> Self {
        Self { handshake_timeout: Duration::from_secs(10), read_timeout: None }
    }
}

#[derive(Clone, Debug)]
pub struct SessionInfo {
    pub mode: ChannelMode,
    pub side: Side,
    /// SHA-256 of both hello frames; all zeros in native mode.
    pub transcript_digest: [u8; 32],
    pub peer_measurement: Option<Measurement>,
    pub handshake_duration: Duration,
    pub handshake_bytes_sent: u64,
}

fn encode_frame(tag: u8, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + body.len());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.push(tag);
    out.extend_from_slice(body);
    out
}

/// Reads one frame. A clean end of stream before any header byte is
/// `Closed`; anything shorter than a whole frame is `Truncated`.
fn read_frame(reader: &mut dyn Read, max_body: usize) -> Result<(u8, Vec<u8>), ChannelError> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    let mut got = 0;
    while got < header.len() {
        match reader.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Err(ChannelError::Closed),
            Ok(0) => return Err(ChannelError::Truncated),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
    if len > max_body {
        return Err(ChannelError::FrameTooLarge(len as u64));
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    Ok((header[4], body))
}

fn send_alert(writer: &mut dyn Write, code: u16) {
    let _ = writer.write_all(&encode_frame(tag::ALERT, &code.to_le_bytes()));
    let _ = writer.flush();
}

fn hello_body(mode: ChannelMode, attested: Option<(&PublicKey, &Quote)>) -> Vec<u8> {
    let mut body = vec![PROTOCOL_VERSION, mode.wire()];
    if let Some((pk, quote)) = attested {
        body.extend_from_slice(pk.as_bytes());
        body.extend_from_slice(&quote.encode());
    }
    body
}

fn parse_hello(body: &[u8], local: ChannelMode) -> Result<Option<(PublicKey, Quote)>, ChannelError> {
    let version = *body.first().ok_or_else(|| ChannelError::Malformed("empty hello".into()))?;
    if version != PROTOCOL_VERSION {
        return Err(ChannelError::Version(version));
    }
    let mode_byte = *body.get(1).ok_or_else(|| ChannelError::Malformed("hello without mode".into()))?;
    let peer = ChannelMode::from_wire(mode_byte).ok_or_else(|| ChannelError::Malformed(format!("mode byte {mode_byte}")))?;
    if peer != local {
        return Err(ChannelError::ModeMismatch { local, peer });
    }
    match local {
        ChannelMode::Native if body.len() == 2 => Ok(None),
        ChannelMode::Attested if body.len() == 2 + 32 + QUOTE_LEN => {
            let pk: [u8; 32] = body[2..34].try_into().unwrap();
            let quote = Quote::decode(&body[34..])?;
            Ok(Some((PublicKey::from(pk), quote)))
        }
        _ => Err(ChannelError::Malformed(format!("hello body of {} bytes", body.len()))),
    }
}

/// Reads the next handshake message, turning a peer alert into an error.
fn expect_message(reader: &mut dyn Read, want: u8) -> Result<Vec<u8>, ChannelError> {
    let (t, body) = read_frame(reader, MAX_HANDSHAKE_BODY)?;
    match t {
        t if t == want => Ok(body),
        tag::ALERT if body.len() == 2 => Err(ChannelError::PeerAlert(u16::from_le_bytes([body[0], body[1]]))),
        other => Err(ChannelError::UnexpectedMessage(other)),
    }
}

struct DerivedKeys {
    i2r: [u8; 32],
    r2i: [u8; 32],
    i_finished: [u8; 32],
    r_finished: [u8; 32],
}

fn derive_keys(shared: &[u8; 32], transcript_digest: &[u8; 32]) -> DerivedKeys {
    let hk = Hkdf::<Sha256>::new(Some(transcript_digest), shared);
    let expand = |info: &[u8]| {
        let mut k = [0u8; 32];
        hk.expand(info, &mut k).expect("32 bytes is a valid HKDF-SHA256 length");
        k
    };
    DerivedKeys {
        i2r: expand(b"efl i2r record key"),
        r2i: expand(b"efl r2i record key"),
        i_finished: expand(b"efl initiator finished"),
        r_finished: expand(b"efl responder finished"),
    }
}

fn finished_mac(key: &[u8; 32], transcript_digest: &[u8; 32]) -> Hmac<Sha256> {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(transcript_digest);
    mac
}

struct Established {
    send: Option<(ChaCha20Poly1305, u8)>,
    recv: Option<(ChaCha20Poly1305, u8)>,
    transcript_digest: [u8; 32],
    peer_measurement: Option<Measurement>,
    bytes_sent: u64,
}

fn run_handshake(t: &mut Transport, side: Side, security: &Security) -> Result<Established, ChannelError> {
    let mode = security.mode();
    let (own_tag, peer_tag) = match side {
        Side::Initiator => (tag::HELLO_INIT, tag::HELLO_RESP),
        Side::Responder => (tag::HELLO_RESP, tag::HELLO_INIT),
    };
    let mut bytes_sent = 0u64;

    let Security::Attested { identity, policy } = security else {
        let own = encode_frame(own_tag, &hello_body(mode, None));
        if side == Side::Initiator {
            t.writer.write_all(&own)?;
            t.writer.flush()?;
            parse_hello(&expect_message(&mut t.reader, peer_tag)?, mode)?;
        } else {
            parse_hello(&expect_message(&mut t.reader, peer_tag)?, mode)?;
            t.writer.write_all(&own)?;
            t.writer.flush()?;
        }
        return Ok(Established {
            send: None,
            recv: None,
            transcript_digest: [0; 32],
            peer_measurement: None,
            bytes_sent: own.len() as u64,
        });
    };

    let secret = EphemeralSecret::random_from_rng(OsRng);
    let public = PublicKey::from(&secret);
    let quote = identity.authority.gen_quote(identity.measurement, &report_data_for(public.as_bytes()))?;
    let own = encode_frame(own_tag, &hello_body(mode, Some((&public, &quote))));

    let receive_peer = |t: &mut Transport| -> Result<(Vec<u8>, PublicKey, Quote), ChannelError> {
        let body = expect_message(&mut t.reader, peer_tag)?;
        let (peer_pk, peer_quote) = parse_hello(&body, mode)?.expect("attested hello carries a quote");
        verify_quote(policy, &peer_quote, &report_data_for(peer_pk.as_bytes()))?;
        Ok((encode_frame(peer_tag, &body), peer_pk, peer_quote))
    };

    let (peer_frame, peer_pk, peer_quote) = if side == Side::Initiator {
        t.writer.write_all(&own)?;
        t.writer.flush()?;
        receive_peer(t)?
    } else {
        let peer = receive_peer(t)?;
        t.writer.write_all(&own)?;
        t.writer.flush()?;
        peer
    };
    bytes_sent += own.len() as u64;

    let mut transcript = Sha256::new();
    match side {
        Side::Initiator => {
            transcript.update(&own);
            transcript.update(&peer_frame);
        }
        Side::Responder => {
            transcript.update(&peer_frame);
            transcript.update(&own);
        }
    }
    let digest: [u8; 32] = transcript.finalize().into();

    let shared = secret.diffie_hellman(&peer_pk);
    if !shared.was_contributory() {
        return Err(ChannelError::WeakKey);
    }
    let keys = derive_keys(shared.as_bytes(), &digest);
    let (own_fin, peer_fin) = match side {
        Side::Initiator => (&keys.i_finished, &keys.r_finished),
        Side::Responder => (&keys.r_finished, &keys.i_finished),
    };
    let own_finished = encode_frame(tag::FINISHED, &finished_mac(own_fin, &digest).finalize().into_bytes());
    let check_peer_finished = |t: &mut Transport| -> Result<(), ChannelError> {
        let body = expect_message(&mut t.reader, tag::FINISHED)?;
        finished_mac(peer_fin, &digest)
            .verify_slice(&body)
            .map_err(|_| ChannelError::TranscriptMismatch)
    };
    if side == Side::Initiator {
        t.writer.write_all(&own_finished)?;
        t.writer.flush()?;
        check_peer_finished(t)?;
    } else {
        check_peer_finished(t)?;
        t.writer.write_all(&own_finished)?;
        t.writer.flush()?;
    }
    bytes_sent += own_finished.len() as u64;

    let cipher = |k: &[u8; 32]| ChaCha20Poly1305::new(Key::from_slice(k));
    let (send, recv) = match side {
        Side::Initiator => ((cipher(&keys.i2r), DIR_I2R), (cipher(&keys.r2i), DIR_R2I)),
        Side::Responder => ((cipher(&keys.r2i), DIR_R2I), (cipher(&keys.i2r), DIR_I2R)),
    };
    Ok(Established {
        send: Some(send),
        recv: Some(recv),
        transcript_digest: digest,
        peer_measurement: Some(peer_quote.measurement),
        bytes_sent,
    })
}

/// Establishes a channel over `transport`. On failure the transport is
/// dropped (closing the stream) after a best-effort alert to the peer.
pub fn handshake(
    mut transport: Transport,
    side: Side,
    security: &Security,
    opts: &ChannelOptions,
) -> Result<SecureChannel, ChannelError> {
    let start = Instant::now();
    transport.reader.set_read_timeout(Some(opts.handshake_timeout))?;
    let est = match run_handshake(&mut transport, side, security) {
        Ok(est) => est,
        Err(e) => {
            if let Some(code) = e.alert_code() {
                send_alert(&mut transport.writer, code);
            }
            return Err(e);
        }
    };
    transport.reader.set_read_timeout(opts.read_timeout)?;
    let aborted = Arc::new(AtomicBool::new(false));
    let info = SessionInfo {
        mode: security.mode(),
        side,
        transcript_digest: est.transcript_digest,
        peer_measurement: est.peer_measurement,
        handshake_duration: start.elapsed().max(Duration::from_nanos(1)),
        handshake_bytes_sent: est.bytes_sent,
    };
    Ok(SecureChannel {
        tx: SendHalf { writer: transport.writer, cipher: est.send, counter: 0, aborted: aborted.clone() },
        rx: RecvHalf { reader: transport.reader, cipher: est.recv, counter: 0, aborted },
        info,
    })
}

fn nonce_and_aad(direction: u8, counter: u64) -> ([u8; 12], [u8; 9]) {
    let mut nonce = [0u8; 12];
    nonce[0] = direction;
    nonce[4..].copy_from_slice(&counter.to_le_bytes());
    let mut aad = [0u8; 9];
    aad[0] = direction;
    aad[1..].copy_from_slice(&counter.to_le_bytes());
    (nonce, aad)
}

/// Sending direction of a channel. Single owner.
pub struct SendHalf {
    writer: Box<dyn Write + Send>,
    cipher: Option<(ChaCha20Poly1305, u8)>,
    counter: u64,
    aborted: Arc<AtomicBool>,
}

impl SendHalf {
    /// Sends one payload, returning the number of bytes put on the wire.
    ///
    /// An oversize payload is refused without affecting the channel; any
    /// other failure aborts both directions.
    pub fn send(&mut self, payload: &[u8]) -> Result<usize, ChannelError> {
        if self.aborted.load(Ordering::SeqCst) {
            return Err(ChannelError::Aborted);
        }
        if payload.len() > MAX_PAYLOAD {
            return Err(ChannelError::Oversize(payload.len()));
        }
        let frame = match &self.cipher {
            None => encode_frame(tag::PLAIN, payload),
            Some((cipher, dir)) => {
                if self.counter == u64::MAX {
                    self.aborted.store(true, Ordering::SeqCst);
                    return Err(ChannelError::CounterExhausted);
                }
                let (nonce, aad) = nonce_and_aad(*dir, self.counter);
                let sealed = cipher
                    .encrypt(Nonce::from_slice(&nonce), Payload { msg: payload, aad: &aad })
                    .map_err(|_| ChannelError::AuthFailed)?;
                encode_frame(tag::SEALED, &sealed)
            }
        };
        let res = self.writer.write_all(&frame).and_then(|_| self.writer.flush());
        if let Err(e) = res {
            self.aborted.store(true, Ordering::SeqCst);
            return Err(e.into());
        }
        self.counter += 1;
        Ok(frame.len())
    }
}

/// Receiving direction of a channel. Single owner.
pub struct RecvHalf {
    reader: Box<dyn TimedRead>,
    cipher: Option<(ChaCha20Poly1305, u8)>,
    counter: u64,
    aborted: Arc<AtomicBool>,
}

impl RecvHalf {
    /// Returns the next payload in order. Any failure (authentication,
    /// truncation, replay, peer alert) aborts the channel.
    pub fn recv(&mut self) -> Result<Vec<u8>, ChannelError> {
        if self.aborted.load(Ordering::SeqCst) {
            return Err(ChannelError::Aborted);
        }
        let res = self.recv_inner();
        if res.is_err() {
            self.aborted.store(true, Ordering::SeqCst);
        }
        res
    }

    fn recv_inner(&mut self) -> Result<Vec<u8>, ChannelError> {
        let max_body = MAX_PAYLOAD + if self.cipher.is_some() { AEAD_TAG_LEN } else { 0 };
        let (t, body) = read_frame(&mut self.reader, max_body)?;
        match (&self.cipher, t) {
            (None, tag::PLAIN) => Ok(body),
            (Some((cipher, dir)), tag::SEALED) => {
                if self.counter == u64::MAX {
                    return Err(ChannelError::CounterExhausted);
                }
                let (nonce, aad) = nonce_and_aad(*dir, self.counter);
                let plain = cipher
                    .decrypt(Nonce::from_slice(&nonce), Payload { msg: &body, aad: &aad })
                    .map_err(|_| ChannelError::AuthFailed)?;
                self.counter += 1;
                Ok(plain)
            }
            (_, tag::ALERT) if body.len() == 2 => Err(ChannelError::PeerAlert(u16::from_le_bytes([body[0], body[1]]))),
            (_, other) => Err(ChannelError::UnexpectedMessage(other)),
        }
    }

    pub fn set_read_timeout(&mut self, timeout: Option<Duration>) -> Result<(), ChannelError> {
        Ok(self.reader.set_read_timeout(timeout)?)
    }
}

/// An established channel (attested or native).
pub struct SecureChannel {
    tx: SendHalf,
    rx: RecvHalf,
    info: SessionInfo,
}

impl SecureChannel {
    pub fn send(&mut self, payload: &[u8]) -> Result<usize, ChannelError> {
        self.tx.send(payload)
    }

    pub fn recv(&mut self) -> Result<Vec<u8>, ChannelError> {
        self.rx.recv()
    }

    pub fn info(&self) -> &SessionInfo {
        &self.info
    }

    pub fn is_aborted(&self) -> bool {
        self.tx.aborted.load(Ordering::SeqCst)
    }

    /// Splits into independently owned directions for full-duplex use.
    pub fn split(self) -> (SendHalf, RecvHalf, SessionInfo) {
        (self.tx, self.rx, self.info)
    }
}
