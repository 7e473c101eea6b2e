// SPDX-License-Identifier: Apache-2.0

//! Measurements, peripheral certificates, signed enclave reports and the
//! remote verifier that cross-checks a platform-wide enclave.
//!
//! All signed bodies use the canonical encoding from [`crate::codec`].
//!
//! Report body, in field order:
//!
//! | # | field               | bytes                                   |
//! |---|---------------------|-----------------------------------------|
//! | 1 | subject_id          | 5 (tag, u32 BE)                         |
//! | 2 | subject_kind        | 1 (0 = AE, 1 = CE)                      |
//! | 3 | sm_measurement      | 32                                      |
//! | 4 | subject_measurement | 32                                      |
//! | 5 | config_digest       | 32                                      |
//! | 6 | connected_ids       | 5 per id, concatenated                  |
//! | 7 | peripheral_evidence | length-prefixed evidence entries        |
//! | 8 | report_data         | enclave-supplied bytes                  |
//! | 9 | verifier_nonce      | verifier-supplied bytes                 |
//! |10 | platform_key        | 32                                      |
//!
//! Wire form: `lp(body) || lp(signature)`.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use crate::codec::{lp, DecodeError, Reader, Writer};
use crate::crypto::{CryptoProvider, Digest, KeyPair, PublicKey, SecretKey, Signature};
use crate::entity::EntityId;

pub const NONCE_LEN: usize = 32;
pub const CHALLENGE_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct Measurement(pub Digest);

/// Digest of `lp(code) || lp(config)`.
pub fn measure(hasher: &dyn CryptoProvider, code: &[u8], config: &[u8]) -> Measurement {
    Measurement(hasher.hash(&Writer::new().field(code).field(config).finish()))
}

/// Digest of `lp(config)`; the initialization parameters alone.
pub fn config_digest(hasher: &dyn CryptoProvider, config: &[u8]) -> Digest {
    hasher.hash(&lp(config))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PeripheralCertificate {
    pub peripheral_public_key: PublicKey,
    pub firmware_digest: Digest,
    pub firmware_version: String,
    pub manufacturer_signature: Signature,
}

impl PeripheralCertificate {
    pub fn issue(
        provider: &dyn CryptoProvider,
        manufacturer: &SecretKey,
        peripheral_public_key: PublicKey,
        firmware_digest: Digest,
        firmware_version: &str,
    ) -> Self {
        let body = Self::body_of(&peripheral_public_key, &firmware_digest, firmware_version);
        PeripheralCertificate {
            peripheral_public_key,
            firmware_digest,
            firmware_version: firmware_version.to_string(),
            manufacturer_signature: provider.sign(manufacturer, &body),
        }
    }

    fn body_of(pk: &PublicKey, fw: &Digest, version: &str) -> Vec<u8> {
        Writer::new().field(&pk.0).field(&fw.0).field(version.as_bytes()).finish()
    }

    pub fn body(&self) -> Vec<u8> {
        Self::body_of(&self.peripheral_public_key, &self.firmware_digest, &self.firmware_version)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.body();
        out.extend_from_slice(&lp(&self.manufacturer_signature.0));
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let peripheral_public_key = PublicKey(r.fixed()?);
        let firmware_digest = Digest(r.fixed()?);
        let firmware_version = String::from_utf8(r.field()?.to_vec())
            .map_err(|_| DecodeError("firmware version is not UTF-8".into()))?;
        let manufacturer_signature = Signature(r.fixed()?);
        r.finish()?;
        Ok(PeripheralCertificate { peripheral_public_key, firmware_digest, firmware_version, manufacturer_signature })
    }

    pub fn verify(&self, provider: &dyn CryptoProvider, manufacturer: &PublicKey) -> bool {
        provider.verify(manufacturer, &self.body(), &self.manufacturer_signature)
    }

    pub fn verify_any(&self, provider: &dyn CryptoProvider, trusted: &[PublicKey]) -> bool {
        trusted.iter().any(|k| self.verify(provider, k))
    }
}

/// Cached outcome of a controller enclave's challenge-response exchange
/// with one peripheral.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PeripheralEvidence {
    pub peripheral: EntityId,
    pub certificate: PeripheralCertificate,
    #[serde(serialize_with = "ser_hex")]
    pub challenge: Vec<u8>,
    pub response: Signature,
}

fn ser_hex<S: serde::Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&hex::encode(b))
}

impl PeripheralEvidence {
    pub fn encode(&self) -> Vec<u8> {
        Writer::new()
            .field(&self.peripheral.to_wire())
            .field(&self.certificate.encode())
            .field(&self.challenge)
            .field(&self.response.0)
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let peripheral = EntityId::from_wire(r.field()?).ok_or_else(|| DecodeError("bad entity id".into()))?;
        let certificate = PeripheralCertificate::decode(r.field()?)?;
        let challenge = r.field()?.to_vec();
        let response = Signature(r.fixed()?);
        r.finish()?;
        Ok(PeripheralEvidence { peripheral, certificate, challenge, response })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LocalAttestFailure {
    BadResponse,
    CertUntrusted,
}

impl fmt::Display for LocalAttestFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LocalAttestFailure::BadResponse => "BadResponse",
            LocalAttestFailure::CertUntrusted => "CertUntrusted",
        })
    }
}

/// The controller enclave's side of local attestation: the response must
/// verify under the certified key, and the certificate under a trusted
/// manufacturer.
pub fn check_local_attestation(
    provider: &dyn CryptoProvider,
    evidence: &PeripheralEvidence,
    trusted_manufacturers: &[PublicKey],
) -> Result<(), LocalAttestFailure> {
    if !provider.verify(&evidence.certificate.peripheral_public_key, &evidence.challenge, &evidence.response) {
        return Err(LocalAttestFailure::BadResponse);
    }
    if !evidence.certificate.verify_any(provider, trusted_manufacturers) {
        return Err(LocalAttestFailure::CertUntrusted);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SubjectKind {
    Ae,
    Ce,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AttestationReport {
    pub subject_id: EntityId,
    pub subject_kind: SubjectKind,
    pub sm_measurement: Measurement,
    pub subject_measurement: Measurement,
    pub config_digest: Digest,
    pub connected_ids: Vec<EntityId>,
    pub peripheral_evidence: Vec<PeripheralEvidence>,
    #[serde(serialize_with = "ser_hex")]
    pub report_data: Vec<u8>,
    #[serde(serialize_with = "ser_hex")]
    pub verifier_nonce: Vec<u8>,
    pub platform_key: PublicKey,
    pub platform_signature: Signature,
}

/// Report fields before signing.
#[derive(Clone, Debug)]
pub struct ReportBody {
    pub subject_id: EntityId,
    pub subject_kind: SubjectKind,
    pub sm_measurement: Measurement,
    pub subject_measurement: Measurement,
    pub config_digest: Digest,
    pub connected_ids: Vec<EntityId>,
    pub peripheral_evidence: Vec<PeripheralEvidence>,
    pub report_data: Vec<u8>,
    pub verifier_nonce: Vec<u8>,
}

impl ReportBody {
    pub fn sign(self, provider: &dyn CryptoProvider, platform: &KeyPair) -> AttestationReport {
        let mut report = AttestationReport {
            subject_id: self.subject_id,
            subject_kind: self.subject_kind,
            sm_measurement: self.sm_measurement,
            subject_measurement: self.subject_measurement,
            config_digest: self.config_digest,
            connected_ids: self.connected_ids,
            peripheral_evidence: self.peripheral_evidence,
            report_data: self.report_data,
            verifier_nonce: self.verifier_nonce,
            platform_key: platform.public,
            platform_signature: Signature([0; 64]),
        };
        report.platform_signature = provider.sign(&platform.secret, &report.body());
        report
    }
}

impl AttestationReport {
    pub fn body(&self) -> Vec<u8> {
        let ids: Vec<u8> = self.connected_ids.iter().flat_map(|e| e.to_wire()).collect();
        let evidence: Vec<u8> = self.peripheral_evidence.iter().flat_map(|e| lp(&e.encode())).collect();
        let kind = match self.subject_kind {
            SubjectKind::Ae => 0u8,
            SubjectKind::Ce => 1u8,
        };
        Writer::new()
            .field(&self.subject_id.to_wire())
            .field(&[kind])
            .field(&self.sm_measurement.0 .0)
            .field(&self.subject_measurement.0 .0)
            .field(&self.config_digest.0)
            .field(&ids)
            .field(&evidence)
            .field(&self.report_data)
            .field(&self.verifier_nonce)
            .field(&self.platform_key.0)
            .finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        Writer::new().field(&self.body()).field(&self.platform_signature.0).finish()
    }

    pub fn decode(wire: &[u8]) -> Result<Self, DecodeError> {
        let mut outer = Reader::new(wire);
        let body = outer.field()?;
        let platform_signature = Signature(outer.fixed()?);
        outer.finish()?;

        let mut r = Reader::new(body);
        let subject_id = EntityId::from_wire(r.field()?).ok_or_else(|| DecodeError("bad subject id".into()))?;
        let subject_kind = match r.fixed::<1>()? {
            [0] => SubjectKind::Ae,
            [1] => SubjectKind::Ce,
            _ => return Err(DecodeError("bad subject kind".into())),
        };
        let sm_measurement = Measurement(Digest(r.fixed()?));
        let subject_measurement = Measurement(Digest(r.fixed()?));
        let config_digest = Digest(r.fixed()?);
        let ids = r.field()?;
        if ids.len() % EntityId::WIRE_LEN != 0 {
            return Err(DecodeError("connected id list is not a multiple of 5".into()));
        }
        let connected_ids = ids
            .chunks(EntityId::WIRE_LEN)
            .map(|c| EntityId::from_wire(c).ok_or_else(|| DecodeError("bad connected id".into())))
            .collect::<Result<Vec<_>, _>>()?;
        let mut ev = Reader::new(r.field()?);
        let mut peripheral_evidence = Vec::new();
        while !ev.is_empty() {
            peripheral_evidence.push(PeripheralEvidence::decode(ev.field()?)?);
        }
        let report_data = r.field()?.to_vec();
        let verifier_nonce = r.field()?.to_vec();
        let platform_key = PublicKey(r.fixed()?);
        r.finish()?;
        Ok(AttestationReport {
            subject_id,
            subject_kind,
            sm_measurement,
            subject_measurement,
            config_digest,
            connected_ids,
            peripheral_evidence,
            report_data,
            verifier_nonce,
            platform_key,
            platform_signature,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerificationPolicy {
    pub ae_measurement: Option<Measurement>,
    pub ce_measurements: Vec<Measurement>,
    pub sm_measurement: Option<Measurement>,
    pub platform_key: Option<PublicKey>,
    pub manufacturer_keys: Vec<PublicKey>,
    pub firmware_versions: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum RejectReason {
    BadSignature,
    MeasurementMismatch,
    LinkMismatch,
    PeripheralCertInvalid,
    FirmwareMismatch,
    NonceMismatch,
    PlatformKeyMismatch,
}

impl RejectReason {
    pub const ALL: [RejectReason; 7] = [
        RejectReason::BadSignature,
        RejectReason::MeasurementMismatch,
        RejectReason::LinkMismatch,
        RejectReason::PeripheralCertInvalid,
        RejectReason::FirmwareMismatch,
        RejectReason::NonceMismatch,
        RejectReason::PlatformKeyMismatch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::BadSignature => "BadSignature",
            RejectReason::MeasurementMismatch => "MeasurementMismatch",
            RejectReason::LinkMismatch => "LinkMismatch",
            RejectReason::PeripheralCertInvalid => "PeripheralCertInvalid",
            RejectReason::FirmwareMismatch => "FirmwareMismatch",
            RejectReason::NonceMismatch => "NonceMismatch",
            RejectReason::PlatformKeyMismatch => "PlatformKeyMismatch",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Accept => f.write_str("Accept"),
            Verdict::Reject(r) => f.write_str(r.as_str()),
        }
    }
}

fn check_signature(provider: &dyn CryptoProvider, report: &AttestationReport, trusted: &PublicKey) -> Result<(), RejectReason> {
    let body = report.body();
    if provider.verify(trusted, &body, &report.platform_signature) {
        return Ok(());
    }
    // Honestly signed by some other platform: name the key mismatch.
    if report.platform_key != *trusted && provider.verify(&report.platform_key, &body, &report.platform_signature) {
        return Err(RejectReason::PlatformKeyMismatch);
    }
    Err(RejectReason::BadSignature)
}

/// Verifies one application enclave report (`reports[0]`) together with the
/// reports of every controller enclave it lists.
///
/// Checking order: signatures, nonces, measurements, link cross-check,
/// peripheral evidence. The first failure is returned.
pub fn verify_platform(
    provider: &dyn CryptoProvider,
    reports: &[AttestationReport],
    policy: &VerificationPolicy,
    nonces: &[Vec<u8>],
) -> Verdict {
    match verify_inner(provider, reports, policy, nonces) {
        Ok(()) => Verdict::Accept,
        Err(r) => Verdict::Reject(r),
    }
}

/// Same as [`verify_platform`] over wire-encoded reports. A report that does
/// not decode is unauthenticated and rejected as `BadSignature`.
pub fn verify_platform_wire(
    provider: &dyn CryptoProvider,
    wires: &[Vec<u8>],
    policy: &VerificationPolicy,
    nonces: &[Vec<u8>],
) -> Verdict {
    let mut reports = Vec::with_capacity(wires.len());
    for w in wires {
        match AttestationReport::decode(w) {
            Ok(r) => reports.push(r),
            Err(_) => return Verdict::Reject(RejectReason::BadSignature),
        }
    }
    verify_platform(provider, &reports, policy, nonces)
}

fn verify_inner(
    provider: &dyn CryptoProvider,
    reports: &[AttestationReport],
    policy: &VerificationPolicy,
    nonces: &[Vec<u8>],
) -> Result<(), RejectReason> {
    let platform_key = policy.platform_key.ok_or(RejectReason::PlatformKeyMismatch)?;
    for r in reports {
        check_signature(provider, r, &platform_key)?;
    }

    if nonces.len() != reports.len() || reports.iter().zip(nonces).any(|(r, n)| r.verifier_nonce != *n) {
        return Err(RejectReason::NonceMismatch);
    }

    let (ae, ces) = reports.split_first().ok_or(RejectReason::LinkMismatch)?;
    if reports.iter().any(|r| Some(r.sm_measurement) != policy.sm_measurement) {
        return Err(RejectReason::MeasurementMismatch);
    }
    if ae.subject_kind != SubjectKind::Ae || Some(ae.subject_measurement) != policy.ae_measurement {
        return Err(RejectReason::MeasurementMismatch);
    }
    if ces
        .iter()
        .any(|c| c.subject_kind != SubjectKind::Ce || !policy.ce_measurements.contains(&c.subject_measurement))
    {
        return Err(RejectReason::MeasurementMismatch);
    }

    // AE lists CE  <=>  CE report present and CE lists AE.
    if ae.connected_ids.iter().any(|id| !id.is_enclave()) {
        return Err(RejectReason::LinkMismatch);
    }
    let listed: BTreeSet<EntityId> = ae.connected_ids.iter().copied().collect();
    let reported: BTreeSet<EntityId> = ces.iter().map(|c| c.subject_id).collect();
    if listed != reported || reported.len() != ces.len() {
        return Err(RejectReason::LinkMismatch);
    }
    for ce in ces {
        if !ce.connected_ids.contains(&ae.subject_id) {
            return Err(RejectReason::LinkMismatch);
        }
        if ce.peripheral_evidence.iter().any(|e| !ce.connected_ids.contains(&e.peripheral)) {
            return Err(RejectReason::LinkMismatch);
        }
    }

    for ce in ces {
        for p in ce.connected_ids.iter().filter(|id| matches!(id, EntityId::Peripheral(_))) {
            let ev = ce
                .peripheral_evidence
                .iter()
                .find(|e| e.peripheral == *p)
                .ok_or(RejectReason::PeripheralCertInvalid)?;
            if check_local_attestation(provider, ev, &policy.manufacturer_keys).is_err() {
                return Err(RejectReason::PeripheralCertInvalid);
            }
            if !policy.firmware_versions.contains(&ev.certificate.firmware_version) {
                return Err(RejectReason::FirmwareMismatch);
            }
        }
    }
    Ok(())
}

/// Session key material bound into an attestation exchange.
///
/// The verifier sends an ephemeral X25519 public key with its nonce. The
/// enclave answers with its own ephemeral public key in `report_data`, so
/// the key share is covered by the platform signature. Both sides derive
/// `SHA3("pie-session" || dh || nonce)`.
pub mod session {
    use x25519_dalek::{PublicKey as XPublic, StaticSecret};

    use crate::crypto::CryptoProvider;

    pub const SHARE_LEN: usize = 32;

    pub fn keypair(secret_bytes: [u8; 32]) -> ([u8; 32], [u8; 32]) {
        let s = StaticSecret::from(secret_bytes);
        (s.to_bytes(), XPublic::from(&s).to_bytes())
    }

    pub fn derive(provider: &dyn CryptoProvider, my_secret: [u8; 32], their_public: [u8; 32], nonce: &[u8]) -> [u8; 32] {
        let dh = StaticSecret::from(my_secret).diffie_hellman(&XPublic::from(their_public));
        let mut buf = b"pie-session".to_vec();
        buf.extend_from_slice(dh.as_bytes());
        buf.extend_from_slice(nonce);
        provider.hash(&buf).0
    }

    fn keystream(provider: &dyn CryptoProvider, key: &[u8; 32], len: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(len);
        let mut ctr = 0u32;
        while out.len() < len {
            let mut buf = b"pie-stream".to_vec();
            buf.extend_from_slice(key);
            buf.extend_from_slice(&ctr.to_be_bytes());
            out.extend_from_slice(&provider.hash(&buf).0);
            ctr += 1;
        }
        out.truncate(len);
        out
    }

    fn tag(provider: &dyn CryptoProvider, key: &[u8; 32], ct: &[u8]) -> [u8; 32] {
        let mut buf = b"pie-tag".to_vec();
        buf.extend_from_slice(key);
        buf.extend_from_slice(ct);
        provider.hash(&buf).0
    }

    /// Encrypt-then-MAC with hash-derived keystream: `ct || tag`.
    pub fn seal(provider: &dyn CryptoProvider, key: &[u8; 32], plaintext: &[u8]) -> Vec<u8> {
        let ks = keystream(provider, key, plaintext.len());
        let mut ct: Vec<u8> = plaintext.iter().zip(ks).map(|(p, k)| p ^ k).collect();
        let t = tag(provider, key, &ct);
        ct.extend_from_slice(&t);
        ct
    }

    pub fn open(provider: &dyn CryptoProvider, key: &[u8; 32], sealed: &[u8]) -> Option<Vec<u8>> {
        if sealed.len() < 32 {
            return None;
        }
        let (ct, t) = sealed.split_at(sealed.len() - 32);
        if tag(provider, key, ct) != t {
            return None;
        }
        let ks = keystream(provider, key, ct.len());
        Some(ct.iter().zip(ks).map(|(c, k)| c ^ k).collect())
    }
}
