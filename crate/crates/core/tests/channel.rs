use std::io::{self, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use efl_core::attest::{measure, AttestationAuthority, VerifyPolicy};
use efl_core::channel::{
    duplex_pair, handshake, tag, ChannelError, ChannelOptions, NodeIdentity, SecureChannel, Security, Side, Transport,
    AEAD_TAG_LEN, FRAME_HEADER_LEN, MAX_PAYLOAD,
};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn attested() -> Security {
    let authority = Arc::new(AttestationAuthority::from_secret_bytes(&[4; 32]));
    let m = measure(b"efl", b"mode=hfl\n");
    Security::Attested {
        policy: VerifyPolicy::new(authority.public_key(), [m]).unwrap(),
        identity: NodeIdentity { measurement: m, authority },
    }
}

fn connect(a: Transport, b: Transport, sec: &Security) -> (SecureChannel, SecureChannel) {
    let s = sec.clone();
    let h = thread::spawn(move || handshake(b, Side::Responder, &s, &ChannelOptions::default()).unwrap());
    let a = handshake(a, Side::Initiator, sec, &ChannelOptions::default()).unwrap();
    (a, h.join().unwrap())
}

fn random_bytes(n: usize, seed: u64) -> Vec<u8> {
    let mut v = vec![0; n];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
    v
}

#[test]
fn payloads_of_every_size_round_trip() {
    for sec in [Security::Native, attested()] {
        let (ta, tb) = duplex_pair();
        let (mut a, mut b) = connect(ta, tb, &sec);
        let overhead = FRAME_HEADER_LEN + if matches!(sec, Security::Native) { 0 } else { AEAD_TAG_LEN };
        for (i, n) in [0, 1, 157, 65536, MAX_PAYLOAD].into_iter().enumerate() {
            let p = random_bytes(n, i as u64);
            assert_eq!(a.send(&p).unwrap(), n + overhead);
            assert_eq!(b.recv().unwrap(), p);
            assert_eq!(b.send(&p).unwrap(), n + overhead);
            assert_eq!(a.recv().unwrap(), p);
        }
        assert!(matches!(a.send(&vec![0; MAX_PAYLOAD + 1]), Err(ChannelError::Oversize(_))));
        a.send(b"still usable").unwrap();
        assert_eq!(b.recv().unwrap(), b"still usable");
    }
}

/// Holds the written frames so a test can drop, repeat or reorder sealed
/// records before they reach the peer.
struct Reorder {
    inner: Box<dyn Write + Send>,
    action: Action,
    sealed_seen: usize,
    held: Option<Vec<u8>>,
}

#[derive(Clone, Copy)]
enum Action {
    Replay,
    Swap,
    Drop,
}

impl Write for Reorder {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if buf.get(4) != Some(&tag::SEALED) {
            return self.inner.write(buf);
        }
        self.sealed_seen += 1;
        match (self.action, self.sealed_seen) {
            (Action::Replay, 1) => {
                self.inner.write_all(buf)?;
                self.inner.write_all(buf)?;
            }
            (Action::Swap, 1) => self.held = Some(buf.to_vec()),
            (Action::Swap, 2) => {
                self.inner.write_all(buf)?;
                self.inner.write_all(&self.held.take().unwrap())?;
            }
            (Action::Drop, 1) => {}
            _ => self.inner.write_all(buf)?,
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

#[test]
fn replayed_reordered_and_dropped_records_are_rejected() {
    for action in [Action::Replay, Action::Swap, Action::Drop] {
        let (ta, tb) = duplex_pair();
        let ta = ta.map_writer(|w| Box::new(Reorder { inner: w, action, sealed_seen: 0, held: None }));
        let (mut a, mut b) = connect(ta, tb, &attested());
        for msg in [b"first", b"secnd", b"third"] {
            a.send(msg).unwrap();
        }
        let mut delivered = Vec::new();
        let err = loop {
            match b.recv() {
                Ok(p) => delivered.push(p),
                Err(e) => break e,
            }
        };
        assert!(matches!(err, ChannelError::AuthFailed), "{err:?}");
        // Whatever got through is an in-order prefix of what was sent.
        assert!(delivered.len() <= 1);
        if let Some(p) = delivered.first() {
            assert_eq!(p, b"first");
        }
        assert!(b.is_aborted());
        assert!(matches!(b.recv(), Err(ChannelError::Aborted)));
    }
}

struct Capture(Box<dyn Write + Send>, Arc<Mutex<Vec<u8>>>);

impl Write for Capture {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.0.write(buf)?;
        self.1.lock().unwrap().extend_from_slice(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.flush()
    }
}

#[test]
fn sealed_records_hide_plaintext() {
    let wire = Arc::new(Mutex::new(Vec::new()));
    let (ta, tb) = duplex_pair();
    let sink = wire.clone();
    let ta = ta.map_writer(|w| Box::new(Capture(w, sink)));
    let (mut a, mut b) = connect(ta, tb, &attested());
    let secret = b"embedding row 17 of table 3: 0.125 0.25 0.5";
    a.send(secret).unwrap();
    assert_eq!(b.recv().unwrap(), secret);
    let wire = wire.lock().unwrap();
    assert!(!wire.windows(8).any(|w| secret.windows(8).any(|s| s == w)));
}

struct CutAfter(Box<dyn Write + Send>, usize);

impl Write for CutAfter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if buf.get(4) == Some(&tag::SEALED) {
            let keep = self.1.min(buf.len());
            self.0.write_all(&buf[..keep])?;
            return Ok(buf.len());
        }
        self.0.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.flush()
    }
}

#[test]
fn truncated_record_is_reported() {
    for keep in [2, FRAME_HEADER_LEN, FRAME_HEADER_LEN + 10] {
        let (ta, tb) = duplex_pair();
        let ta = ta.map_writer(|w| Box::new(CutAfter(w, keep)));
        let (mut a, mut b) = connect(ta, tb, &attested());
        a.send(&[7; 100]).unwrap();
        drop(a);
        assert!(matches!(b.recv(), Err(ChannelError::Truncated)));
    }
}

#[test]
fn full_duplex_over_tcp() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let sec = attested();
    let s = sec.clone();
    let server = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        handshake(Transport::from_tcp(stream).unwrap(), Side::Responder, &s, &ChannelOptions::default()).unwrap()
    });
    let stream = std::net::TcpStream::connect(addr).unwrap();
    let client = handshake(Transport::from_tcp(stream).unwrap(), Side::Initiator, &sec, &ChannelOptions::default()).unwrap();
    let server = server.join().unwrap();
    assert_eq!(client.info().transcript_digest, server.info().transcript_digest);

    let pump = |ch: SecureChannel, seed: u64, peer_seed: u64| {
        thread::spawn(move || {
            let (mut tx, mut rx, _) = ch.split();
            let sender = thread::spawn(move || {
                for i in 0..200 {
                    tx.send(&random_bytes(i * 37, seed + i as u64)).unwrap();
                }
            });
            for i in 0..200 {
                assert_eq!(rx.recv().unwrap(), random_bytes(i * 37, peer_seed + i as u64));
            }
            sender.join().unwrap();
        })
    };
    let a = pump(client, 1000, 5000);
    let b = pump(server, 5000, 1000);
    a.join().unwrap();
    b.join().unwrap();
}
