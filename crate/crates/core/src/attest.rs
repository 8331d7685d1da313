//! Simulated enclave attestation.
//!
//! An [`AttestationAuthority`] stands in for the hardware root of trust: it
//! signs [`Quote`]s that bind a node's [`Measurement`] to 32 bytes of report
//! data (the hash of that node's handshake public key). Verifiers accept a
//! quote only if the signature checks out under the authority key, the
//! measurement is on the allow-list, and the report data matches the key
//! actually used in the handshake.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use rand::rngs::OsRng;
use sha2::{Digest, Sha256};

pub const QUOTE_LEN: usize = 32 + 32 + 64;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum AttestError {
    #[error("quote signature does not verify under the authority key")]
    BadSignature,
    #[error("measurement {0} is not in the verification policy")]
    MeasurementMismatch(String),
    #[error("quote report data does not match the presented key")]
    ReportDataMismatch,
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("verification policy lists no allowed measurements")]
    EmptyPolicy,
    #[error("key material: {0}")]
    Key(String),
}

/// Identity digest of a node's code and static configuration.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Measurement(pub [u8; 32]);

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Measurement({})", hex::encode(&self.0[..8]))
    }
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// `SHA-256(len(build_id) ‖ build_id ‖ config_bytes)`. The length prefix
/// keeps the split between the two inputs unambiguous.
pub fn measure(build_id: &[u8], config_bytes: &[u8]) -> Measurement {
    let mut h = Sha256::new();
    h.update((build_id.len() as u64).to_le_bytes());
    h.update(build_id);
    h.update(config_bytes);
    Measurement(h.finalize().into())
}

/// Report data binding a quote to a handshake public key.
pub fn report_data_for(public_key: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"efl-ra-report-data");
    h.update(public_key);
    h.finalize().into()
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Quote {
    pub measurement: Measurement,
    pub report_data: [u8; 32],
    pub signature: [u8; 64],
}

impl fmt::Debug for Quote {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Quote")
            .field("measurement", &self.measurement)
            .field("report_data", &hex::encode(&self.report_data[..8]))
            .finish_non_exhaustive()
    }
}

impl Quote {
    fn signed_bytes(measurement: &Measurement, report_data: &[u8; 32]) -> [u8; 64] {
        let mut m = [0u8; 64];
        m[..32].copy_from_slice(&measurement.0);
        m[32..].copy_from_slice(report_data);
        m
    }

    /// `measurement ‖ report_data ‖ signature`.
    pub fn encode(&self) -> [u8; QUOTE_LEN] {
        let mut out = [0u8; QUOTE_LEN];
        out[..32].copy_from_slice(&self.measurement.0);
        out[32..64].copy_from_slice(&self.report_data);
        out[64..].copy_from_slice(&self.signature);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, AttestError> {
        if bytes.len() != QUOTE_LEN {
            return Err(AttestError::Encoding(format!("quote is {} bytes, expected {QUOTE_LEN}", bytes.len())));
        }
        Ok(Self {
            measurement: Measurement(bytes[..32].try_into().unwrap()),
            report_data: bytes[32..64].try_into().unwrap(),
            signature: bytes[64..].try_into().unwrap(),
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct AuthorityPublicKey(VerifyingKey);

impl fmt::Debug for AuthorityPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AuthorityPublicKey({})", hex::encode(self.0.as_bytes()))
    }
}

impl AuthorityPublicKey {
    pub fn from_bytes(bytes: &[u8; 32]) -> Result<Self, AttestError> {
        VerifyingKey::from_bytes(bytes)
            .map(Self)
            .map_err(|e| AttestError::Key(e.to_string()))
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    /// Reads a hex-encoded public key.
    pub fn load(path: &Path) -> Result<Self, AttestError> {
        Self::from_bytes(&read_hex_key(path)?)
    }
}

/// Holder of the quote-signing secret. Lives in memory only; there is no
/// way to serialize it other than [`AttestationAuthority::save_secret`],
/// which exists for provisioning test fixtures.
pub struct AttestationAuthority {
    key: SigningKey,
}

impl fmt::Debug for AttestationAuthority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttestationAuthority").field("public", &self.public_key()).finish_non_exhaustive()
    }
}

impl AttestationAuthority {
    pub fn generate() -> Self {
        Self { key: SigningKey::generate(&mut OsRng) }
    }

    pub fn from_secret_bytes(secret: &[u8; 32]) -> Self {
        Self { key: SigningKey::from_bytes(secret) }
    }

    /// Reads a hex-encoded 32-byte secret.
    pub fn load(path: &Path) -> Result<Self, AttestError> {
        Ok(Self::from_secret_bytes(&read_hex_key(path)?))
    }

    pub fn save_secret(&self, path: &Path) -> Result<(), AttestError> {
        fs::write(path, hex::encode(self.key.to_bytes())).map_err(|e| AttestError::Key(e.to_string()))
    }

    pub fn public_key(&self) -> AuthorityPublicKey {
        AuthorityPublicKey(self.key.verifying_key())
    }

    pub fn gen_quote(&self, measurement: Measurement, report_data: &[u8]) -> Result<Quote, AttestError> {
        let report_data: [u8; 32] = report_data
            .try_into()
            .map_err(|_| AttestError::Encoding(format!("report data is {} bytes, expected 32", report_data.len())))?;
        let sig = self.key.sign(&Quote::signed_bytes(&measurement, &report_data));
        Ok(Quote { measurement, report_data, signature: sig.to_bytes() })
    }
}

fn read_hex_key(path: &Path) -> Result<[u8; 32], AttestError> {
    let text = fs::read_to_string(path).map_err(|e| AttestError::Key(format!("{}: {e}", path.display())))?;
    let bytes = hex::decode(text.trim()).map_err(|e| AttestError::Key(format!("{}: {e}", path.display())))?;
    bytes
        .try_into()
        .map_err(|_| AttestError::Key(format!("{}: key must be 32 bytes", path.display())))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifyPolicy {
    authority: AuthorityPublicKey,
    allowed: BTreeSet<Measurement>,
}

impl VerifyPolicy {
    pub fn new(
        authority: AuthorityPublicKey,
        allowed: impl IntoIterator<Item = Measurement>,
    ) -> Result<Self, AttestError> {
        let allowed: BTreeSet<_> = allowed.into_iter().collect();
        if allowed.is_empty() {
            return Err(AttestError::EmptyPolicy);
        }
        Ok(Self { authority, allowed })
    }

    pub fn authority(&self) -> &AuthorityPublicKey {
        &self.authority
    }

    pub fn allows(&self, m: &Measurement) -> bool {
        self.allowed.contains(m)
    }
}

/// Checks signature, then measurement, then report data; the first failure
/// determines the error.
pub fn verify_quote(policy: &VerifyPolicy, quote: &Quote, expected_report_data: &[u8; 32]) -> Result<(), AttestError> {
    let sig = Signature::from_bytes(&quote.signature);
    policy
        .authority
        .0
        .verify_strict(&Quote::signed_bytes(&quote.measurement, &quote.report_data), &sig)
        .map_err(|_| AttestError::BadSignature)?;
    if !policy.allows(&quote.measurement) {
        return Err(AttestError::MeasurementMismatch(quote.measurement.to_string()));
    }
    if &quote.report_data != expected_report_data {
        return Err(AttestError::ReportDataMismatch);
    }
    Ok(())
}
