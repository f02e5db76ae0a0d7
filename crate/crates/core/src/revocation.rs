//! Revocation ledger and the three status products derived from it.
//!
//! Each authority keeps one append-style ledger of revocations. Everything
//! a relying party can consult about a serial derives from the same ledger
//! through one status function, so the CRL, the positive list (PCL), and
//! the online responder can never disagree at a common snapshot:
//!
//! * status `revoked`: ledger entry exists and the certificate has not yet
//!   expired (expired serials drop off the CRL at the next generation);
//! * status `good`: issued, inside its validity window, no ledger entry;
//! * status `unknown`: everything else, including serials this authority
//!   never issued, expired certificates, and certificates whose window has
//!   not opened yet.
//!
//! The PCL lists exactly the `good` serials, compressed to ranges on the
//! wire. A relying party that trusts the PCL can treat membership as the
//! whole answer; the partition invariant (every issued serial is in
//! exactly one of: PCL, CRL, expired, not-yet-valid-unrevoked) is what
//! makes that sound.

use std::collections::BTreeMap;

use rand::RngCore;

use crate::cert::Certificate;
use crate::encoding::{RecordBuilder, RecordView};
use crate::error::Error;
use crate::scheme::{KeyPair, SchemeRegistry};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RevocationReason {
    KeyCompromise,
    CardLost,
    Superseded,
    Cessation,
    Administrative,
}

impl RevocationReason {
    pub const ALL: [RevocationReason; 5] = [
        RevocationReason::KeyCompromise,
        RevocationReason::CardLost,
        RevocationReason::Superseded,
        RevocationReason::Cessation,
        RevocationReason::Administrative,
    ];

    pub fn token(&self) -> &'static str {
        match self {
            RevocationReason::KeyCompromise => "key_compromise",
            RevocationReason::CardLost => "card_lost",
            RevocationReason::Superseded => "superseded",
            RevocationReason::Cessation => "cessation",
            RevocationReason::Administrative => "administrative",
        }
    }

    pub fn from_token(token: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.token() == token)
            .ok_or_else(|| Error::MalformedEncoding(format!("unknown revocation reason {token:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RevocationEntry {
    pub serial: u64,
    pub reason: RevocationReason,
    pub revoked_at: u64,
}

impl RevocationEntry {
    pub fn encode(&self) -> Vec<u8> {
        RecordBuilder::new()
            .u64("serial", self.serial)
            .str("reason", self.reason.token())
            .u64("revoked_at", self.revoked_at)
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let view = RecordView::parse(bytes)?;
        Ok(Self {
            serial: view.u64("serial")?,
            reason: RevocationReason::from_token(&view.str("reason")?)?,
            revoked_at: view.u64("revoked_at")?,
        })
    }
}

/// Per-authority revocation ledger. `version` increases by one for every
/// accepted mutation; an idempotent repeat is not a mutation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RevocationState {
    pub ca_id: String,
    pub version: u64,
    entries: BTreeMap<u64, RevocationEntry>,
}

impl RevocationState {
    pub fn new(ca_id: impl Into<String>) -> Self {
        Self { ca_id: ca_id.into(), version: 0, entries: BTreeMap::new() }
    }

    pub fn entries(&self) -> impl Iterator<Item = &RevocationEntry> {
        self.entries.values()
    }

    pub fn entry(&self, serial: u64) -> Option<&RevocationEntry> {
        self.entries.get(&serial)
    }

    pub fn is_revoked(&self, serial: u64) -> bool {
        self.entries.contains_key(&serial)
    }

    /// Records a revocation. Repeat calls for the same serial are
    /// acknowledged without changing the ledger (first timestamp wins) and
    /// without bumping the version. Returns whether the ledger changed.
    pub fn revoke(
        &mut self,
        serial: u64,
        reason: RevocationReason,
        at: u64,
        issued: &BTreeMap<u64, Certificate>,
    ) -> Result<bool> {
        let cert = issued.get(&serial).ok_or(Error::UnknownSerial(serial))?;
        if self.entries.contains_key(&serial) {
            return Ok(false);
        }
        if at > cert.tbs.not_after {
            return Err(Error::NotRevocable(format!(
                "serial {serial} already expired at {}",
                cert.tbs.not_after
            )));
        }
        self.entries.insert(serial, RevocationEntry { serial, reason, revoked_at: at });
        self.version += 1;
        Ok(true)
    }

    /// Rebuild support: installs an entry verbatim (journal replay).
    pub fn restore_entry(&mut self, entry: RevocationEntry) {
        if self.entries.insert(entry.serial, entry).is_none() {
            self.version += 1;
        }
    }
}

/// Certificate status as served to relying parties.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertStatus {
    Good,
    Revoked { revoked_at: u64 },
    Unknown,
}

impl CertStatus {
    pub fn token(&self) -> &'static str {
        match self {
            CertStatus::Good => "good",
            CertStatus::Revoked { .. } => "revoked",
            CertStatus::Unknown => "unknown",
        }
    }
}

/// The one status function all three products derive from.
pub fn certificate_status(
    serial: u64,
    issued: &BTreeMap<u64, Certificate>,
    state: &RevocationState,
    at: u64,
) -> CertStatus {
    let Some(cert) = issued.get(&serial) else {
        return CertStatus::Unknown;
    };
    if let Some(entry) = state.entry(serial) {
        if at <= cert.tbs.not_after {
            return CertStatus::Revoked { revoked_at: entry.revoked_at };
        }
        return CertStatus::Unknown;
    }
    if cert.time_valid(at) {
        CertStatus::Good
    } else {
        CertStatus::Unknown
    }
}

// ---- CRL ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Crl {
    pub ca_id: String,
    pub this_update: u64,
    pub next_update: u64,
    pub entries: Vec<RevocationEntry>,
    pub signature: Vec<u8>,
}

impl Crl {
    fn tbs_bytes(ca_id: &str, this_update: u64, next_update: u64, entries: &[RevocationEntry]) -> Vec<u8> {
        let items: Vec<Vec<u8>> = entries.iter().map(RevocationEntry::encode).collect();
        RecordBuilder::new()
            .str("ca_id", ca_id)
            .u64("this_update", this_update)
            .u64("next_update", next_update)
            .list("entries", &items)
            .finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        let tbs = Self::tbs_bytes(&self.ca_id, self.this_update, self.next_update, &self.entries);
        RecordBuilder::new().raw("tbs", tbs).raw("signature", self.signature.clone()).finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let outer = RecordView::parse(bytes)?;
        let tbs = RecordView::parse(outer.raw("tbs")?)?;
        let mut entries = Vec::new();
        for item in tbs.list("entries")? {
            entries.push(RevocationEntry::decode(&item)?);
        }
        Ok(Self {
            ca_id: tbs.str("ca_id")?,
            this_update: tbs.u64("this_update")?,
            next_update: tbs.u64("next_update")?,
            entries,
            signature: outer.raw("signature")?.to_vec(),
        })
    }

    pub fn is_listed(&self, serial: u64) -> Option<&RevocationEntry> {
        self.entries.iter().find(|e| e.serial == serial)
    }

    pub fn verify_signature(&self, issuer_scheme_id: &str, issuer_public_key: &[u8], registry: &SchemeRegistry) -> bool {
        let tbs = Self::tbs_bytes(&self.ca_id, self.this_update, self.next_update, &self.entries);
        registry
            .get(issuer_scheme_id)
            .map(|s| s.verify(issuer_public_key, &tbs, &self.signature))
            .unwrap_or(false)
    }
}

/// Generates a CRL snapshot at `at`, valid until `at + validity_window`.
/// Lists exactly the revoked serials whose certificates are unexpired at
/// `at`, ascending; revoked-then-expired serials fall off here.
pub fn generate_crl(
    state: &RevocationState,
    issued: &BTreeMap<u64, Certificate>,
    ca_key: &KeyPair,
    registry: &SchemeRegistry,
    at: u64,
    validity_window: u64,
) -> Result<Crl> {
    if validity_window == 0 {
        return Err(Error::RequestMalformed("crl validity window must be positive".into()));
    }
    let entries: Vec<RevocationEntry> = state
        .entries()
        .filter(|e| issued.get(&e.serial).is_some_and(|c| at <= c.tbs.not_after))
        .copied()
        .collect();
    let this_update = at;
    let next_update = at + validity_window;
    let tbs = Crl::tbs_bytes(&state.ca_id, this_update, next_update, &entries);
    let scheme = registry.get(&ca_key.scheme_id)?;
    let signature = scheme.sign(ca_key.private_key_bytes(), &tbs)?;
    Ok(Crl { ca_id: state.ca_id.clone(), this_update, next_update, entries, signature })
}

/// Offline status check against a downloaded CRL. The CRL's signature is
/// verified here, against the issuing authority's certificate; a stale CRL
/// (query time past `next_update`) is an error, never a status.
pub fn check_status_via_crl(
    serial: u64,
    crl: &Crl,
    ca_cert: &Certificate,
    issued_cert: Option<&Certificate>,
    at: u64,
    registry: &SchemeRegistry,
) -> Result<CertStatus> {
    if crl.this_update >= crl.next_update {
        return Err(Error::CrlInvalid(format!(
            "this_update {} not before next_update {}",
            crl.this_update, crl.next_update
        )));
    }
    if crl.ca_id != ca_cert.subject_id() {
        return Err(Error::CrlInvalid(format!(
            "crl for {} checked against authority {}",
            crl.ca_id,
            ca_cert.subject_id()
        )));
    }
    if !crl.verify_signature(&ca_cert.tbs.scheme_id, &ca_cert.tbs.public_key, registry) {
        return Err(Error::CrlInvalid("signature does not verify".into()));
    }
    if at > crl.next_update {
        return Err(Error::CrlStale(format!(
            "queried at {at}, next_update was {}",
            crl.next_update
        )));
    }
    if let Some(entry) = crl.is_listed(serial) {
        return Ok(CertStatus::Revoked { revoked_at: entry.revoked_at });
    }
    match issued_cert {
        Some(cert) if cert.time_valid(at) => Ok(CertStatus::Good),
        _ => Ok(CertStatus::Unknown),
    }
}

// ---- PCL ----

/// Positive certification list: the serials that are `good` at `as_of`,
/// run-length compressed. Contiguous serial allocation makes the ranges
/// collapse well in the common case.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pcl {
    pub ca_id: String,
    pub as_of: u64,
    pub ranges: Vec<(u64, u64)>,
    pub signature: Vec<u8>,
}

impl Pcl {
    fn tbs_bytes(ca_id: &str, as_of: u64, ranges: &[(u64, u64)]) -> Vec<u8> {
        let items: Vec<Vec<u8>> = ranges
            .iter()
            .map(|(start, end)| {
                RecordBuilder::new().u64("end", *end).u64("start", *start).finish()
            })
            .collect();
        RecordBuilder::new()
            .str("ca_id", ca_id)
            .u64("as_of", as_of)
            .list("ranges", &items)
            .finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        let tbs = Self::tbs_bytes(&self.ca_id, self.as_of, &self.ranges);
        RecordBuilder::new().raw("tbs", tbs).raw("signature", self.signature.clone()).finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let outer = RecordView::parse(bytes)?;
        let tbs = RecordView::parse(outer.raw("tbs")?)?;
        let mut ranges = Vec::new();
        for item in tbs.list("ranges")? {
            let view = RecordView::parse(&item)?;
            let (start, end) = (view.u64("start")?, view.u64("end")?);
            if start > end {
                return Err(Error::MalformedEncoding(format!("inverted range {start}..{end}")));
            }
            ranges.push((start, end));
        }
        Ok(Self {
            ca_id: tbs.str("ca_id")?,
            as_of: tbs.u64("as_of")?,
            ranges,
            signature: outer.raw("signature")?.to_vec(),
        })
    }

    pub fn contains(&self, serial: u64) -> bool {
        self.ranges.iter().any(|(start, end)| (*start..=*end).contains(&serial))
    }

    /// Logical expansion of the compressed form.
    pub fn serials(&self) -> Vec<u64> {
        self.ranges.iter().flat_map(|(start, end)| *start..=*end).collect()
    }

    pub fn verify_signature(&self, issuer_scheme_id: &str, issuer_public_key: &[u8], registry: &SchemeRegistry) -> bool {
        let tbs = Self::tbs_bytes(&self.ca_id, self.as_of, &self.ranges);
        registry
            .get(issuer_scheme_id)
            .map(|s| s.verify(issuer_public_key, &tbs, &self.signature))
            .unwrap_or(false)
    }
}

fn compress_ranges(sorted_serials: &[u64]) -> Vec<(u64, u64)> {
    let mut ranges: Vec<(u64, u64)> = Vec::new();
    for &serial in sorted_serials {
        match ranges.last_mut() {
            Some((_, end)) if *end + 1 == serial => *end = serial,
            _ => ranges.push((serial, serial)),
        }
    }
    ranges
}

pub fn generate_pcl(
    state: &RevocationState,
    issued: &BTreeMap<u64, Certificate>,
    ca_key: &KeyPair,
    registry: &SchemeRegistry,
    as_of: u64,
) -> Result<Pcl> {
    let serials: Vec<u64> = issued
        .iter()
        .filter(|(serial, cert)| cert.time_valid(as_of) && !state.is_revoked(**serial))
        .map(|(serial, _)| *serial)
        .collect();
    let ranges = compress_ranges(&serials);
    let tbs = Pcl::tbs_bytes(&state.ca_id, as_of, &ranges);
    let scheme = registry.get(&ca_key.scheme_id)?;
    let signature = scheme.sign(ca_key.private_key_bytes(), &tbs)?;
    Ok(Pcl { ca_id: state.ca_id.clone(), as_of, ranges, signature })
}

// ---- Online responder ----

pub const OCSP_NONCE_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcspRequest {
    pub ca_id: String,
    pub serial: u64,
    pub nonce: Vec<u8>,
}

impl OcspRequest {
    pub fn new(ca_id: impl Into<String>, serial: u64, rng: &mut dyn RngCore) -> Self {
        let mut nonce = vec![0u8; OCSP_NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        Self { ca_id: ca_id.into(), serial, nonce }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcspResponse {
    pub ca_id: String,
    pub serial: u64,
    pub status: CertStatus,
    pub produced_at: u64,
    pub nonce: Vec<u8>,
    pub signature: Vec<u8>,
}

impl OcspResponse {
    fn tbs_bytes(&self) -> Vec<u8> {
        let mut builder = RecordBuilder::new()
            .str("ca_id", &self.ca_id)
            .u64("serial", self.serial)
            .str("status", self.status.token())
            .u64("produced_at", self.produced_at)
            .raw("nonce", self.nonce.clone());
        if let CertStatus::Revoked { revoked_at } = self.status {
            builder = builder.u64("revoked_at", revoked_at);
        }
        builder.finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        RecordBuilder::new()
            .raw("tbs", self.tbs_bytes())
            .raw("signature", self.signature.clone())
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let outer = RecordView::parse(bytes)?;
        let tbs = RecordView::parse(outer.raw("tbs")?)?;
        let status = match tbs.str("status")?.as_str() {
            "good" => CertStatus::Good,
            "revoked" => CertStatus::Revoked { revoked_at: tbs.u64("revoked_at")? },
            "unknown" => CertStatus::Unknown,
            other => {
                return Err(Error::MalformedEncoding(format!("unknown status {other:?}")))
            }
        };
        Ok(Self {
            ca_id: tbs.str("ca_id")?,
            serial: tbs.u64("serial")?,
            status,
            produced_at: tbs.u64("produced_at")?,
            nonce: tbs.raw("nonce")?.to_vec(),
            signature: outer.raw("signature")?.to_vec(),
        })
    }
}

/// Answers one status request, signing with the authority key. The nonce
/// is mandatory and echoed verbatim; a response is only as fresh as the
/// request that carried the nonce.
pub fn ocsp_respond(
    request: &OcspRequest,
    state: &RevocationState,
    issued: &BTreeMap<u64, Certificate>,
    responder_key: &KeyPair,
    registry: &SchemeRegistry,
    at: u64,
) -> Result<OcspResponse> {
    if request.nonce.len() != OCSP_NONCE_LEN {
        return Err(Error::RequestMalformed(format!(
            "nonce must be {OCSP_NONCE_LEN} bytes, got {}",
            request.nonce.len()
        )));
    }
    if request.ca_id != state.ca_id {
        return Err(Error::RequestMalformed(format!(
            "request for {} sent to responder of {}",
            request.ca_id, state.ca_id
        )));
    }
    let status = certificate_status(request.serial, issued, state, at);
    let mut response = OcspResponse {
        ca_id: state.ca_id.clone(),
        serial: request.serial,
        status,
        produced_at: at,
        nonce: request.nonce.clone(),
        signature: Vec::new(),
    };
    let scheme = registry.get(&responder_key.scheme_id)?;
    response.signature = scheme.sign(responder_key.private_key_bytes(), &response.tbs_bytes())?;
    Ok(response)
}

/// Client-side acceptance of a responder answer: the signature must verify
/// under the authority certificate and the nonce must echo the request.
pub fn accept_ocsp_response(
    response: &OcspResponse,
    request: &OcspRequest,
    ca_cert: &Certificate,
    registry: &SchemeRegistry,
) -> Result<()> {
    if response.nonce != request.nonce {
        return Err(Error::DataTampered("ocsp nonce does not echo the request".into()));
    }
    if response.ca_id != request.ca_id || response.serial != request.serial {
        return Err(Error::DataTampered("ocsp response answers a different question".into()));
    }
    let ok = registry
        .get(&ca_cert.tbs.scheme_id)
        .map(|s| s.verify(&ca_cert.tbs.public_key, &response.tbs_bytes(), &response.signature))
        .unwrap_or(false);
    if !ok {
        return Err(Error::DataTampered("ocsp response signature invalid".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cert::{sign_certificate, CertificateProfile, TbsCertificate};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const T0: u64 = 1_700_000_000;
    const DAY: u64 = 86_400;

    struct Bench {
        reg: SchemeRegistry,
        ca_key: KeyPair,
        ca_cert: Certificate,
        issued: BTreeMap<u64, Certificate>,
        state: RevocationState,
        rng: ChaCha20Rng,
    }

    fn bench(n: u64) -> Bench {
        let reg = SchemeRegistry::builtin();
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let ca_key = reg.generate_key_pair("test-mac", 2048, &mut rng).unwrap();
        let ca_cert = sign_certificate(
            TbsCertificate {
                serial: 1,
                subject_id: "pop".into(),
                issuer_id: "pop".into(),
                profile: CertificateProfile::Ca,
                public_key: ca_key.public_key.clone(),
                scheme_id: ca_key.scheme_id.clone(),
                key_length_bits: 2048,
                not_before: T0 - DAY,
                not_after: T0 + 7300 * DAY,
                policy_id: "pol".into(),
                role_attributes: None,
            },
            &ca_key,
            &reg,
        )
        .unwrap();
        let mut issued = BTreeMap::new();
        for serial in 1..=n {
            let key = reg.generate_key_pair("test-mac", 4096, &mut rng).unwrap();
            let cert = sign_certificate(
                TbsCertificate {
                    serial,
                    subject_id: format!("resident-{serial}"),
                    issuer_id: "pop".into(),
                    profile: CertificateProfile::IdentityAuth,
                    public_key: key.public_key.clone(),
                    scheme_id: key.scheme_id.clone(),
                    key_length_bits: 4096,
                    not_before: T0,
                    not_after: T0 + 100 * DAY,
                    policy_id: "pol".into(),
                    role_attributes: None,
                },
                &ca_key,
                &reg,
            )
            .unwrap();
            issued.insert(serial, cert);
        }
        Bench { reg, ca_key, ca_cert, issued, state: RevocationState::new("pop"), rng }
    }

    #[test]
    fn revoke_is_idempotent_and_keeps_first_timestamp() {
        let mut b = bench(3);
        assert!(b.state.revoke(2, RevocationReason::KeyCompromise, T0 + 10, &b.issued).unwrap());
        assert_eq!(b.state.version, 1);
        assert!(!b.state.revoke(2, RevocationReason::CardLost, T0 + 99, &b.issued).unwrap());
        assert_eq!(b.state.version, 1, "idempotent repeat must not bump the version");
        let entry = b.state.entry(2).unwrap();
        assert_eq!(entry.revoked_at, T0 + 10);
        assert_eq!(entry.reason, RevocationReason::KeyCompromise);
    }

    #[test]
    fn revoke_rejects_unknown_and_expired_serials() {
        let mut b = bench(2);
        let err = b.state.revoke(99, RevocationReason::Cessation, T0, &b.issued).unwrap_err();
        assert_eq!(err.code(), "unknown-serial");
        let err = b
            .state
            .revoke(1, RevocationReason::Cessation, T0 + 101 * DAY, &b.issued)
            .unwrap_err();
        assert_eq!(err.code(), "not-revocable");
    }

    #[test]
    fn crl_lists_unexpired_revocations_sorted() {
        let mut b = bench(5);
        for serial in [4, 1, 3] {
            b.state.revoke(serial, RevocationReason::Administrative, T0 + 5, &b.issued).unwrap();
        }
        let crl = generate_crl(&b.state, &b.issued, &b.ca_key, &b.reg, T0 + 10, DAY).unwrap();
        let serials: Vec<u64> = crl.entries.iter().map(|e| e.serial).collect();
        assert_eq!(serials, [1, 3, 4]);
        assert_eq!(crl.this_update, T0 + 10);
        assert_eq!(crl.next_update, T0 + 10 + DAY);
        assert!(crl.verify_signature(&b.ca_cert.tbs.scheme_id, &b.ca_cert.tbs.public_key, &b.reg));
    }

    #[test]
    fn revoked_then_expired_serial_drops_off_the_next_crl() {
        let mut b = bench(2);
        b.state.revoke(1, RevocationReason::CardLost, T0 + 1, &b.issued).unwrap();
        let before = generate_crl(&b.state, &b.issued, &b.ca_key, &b.reg, T0 + 2, DAY).unwrap();
        assert!(before.is_listed(1).is_some());
        // Certificate 1 expires at T0 + 100 days; regenerate after that.
        let after =
            generate_crl(&b.state, &b.issued, &b.ca_key, &b.reg, T0 + 101 * DAY, DAY).unwrap();
        assert!(after.is_listed(1).is_none());
        // The ledger itself never forgets.
        assert!(b.state.is_revoked(1));
    }

    #[test]
    fn crl_round_trips_and_rejects_tamper() {
        let mut b = bench(3);
        b.state.revoke(2, RevocationReason::Superseded, T0 + 1, &b.issued).unwrap();
        let crl = generate_crl(&b.state, &b.issued, &b.ca_key, &b.reg, T0 + 2, DAY).unwrap();
        let decoded = Crl::decode(&crl.encode()).unwrap();
        assert_eq!(decoded, crl);
        let mut forged = crl.clone();
        forged.entries.clear();
        assert!(!forged.verify_signature(&b.ca_cert.tbs.scheme_id, &b.ca_cert.tbs.public_key, &b.reg));
    }

    #[test]
    fn check_via_crl_covers_all_status_classes() {
        let mut b = bench(4);
        b.state.revoke(2, RevocationReason::KeyCompromise, T0 + 1, &b.issued).unwrap();
        let at = T0 + 2;
        let crl = generate_crl(&b.state, &b.issued, &b.ca_key, &b.reg, at, DAY).unwrap();
        let good =
            check_status_via_crl(1, &crl, &b.ca_cert, b.issued.get(&1), at, &b.reg).unwrap();
        assert_eq!(good, CertStatus::Good);
        let revoked =
            check_status_via_crl(2, &crl, &b.ca_cert, b.issued.get(&2), at, &b.reg).unwrap();
        assert_eq!(revoked, CertStatus::Revoked { revoked_at: T0 + 1 });
        let unknown = check_status_via_crl(77, &crl, &b.ca_cert, None, at, &b.reg).unwrap();
        assert_eq!(unknown, CertStatus::Unknown);
    }

    #[test]
    fn stale_crl_is_an_error_not_a_status() {
        let b = bench(1);
        let crl = generate_crl(&b.state, &b.issued, &b.ca_key, &b.reg, T0, DAY).unwrap();
        let err = check_status_via_crl(1, &crl, &b.ca_cert, b.issued.get(&1), T0 + DAY + 1, &b.reg)
            .unwrap_err();
        assert_eq!(err.code(), "crl-stale");
        // Right at next_update is still acceptable.
        assert!(check_status_via_crl(1, &crl, &b.ca_cert, b.issued.get(&1), T0 + DAY, &b.reg).is_ok());
    }

    #[test]
    fn tampered_crl_is_crl_invalid() {
        let mut b = bench(2);
        b.state.revoke(1, RevocationReason::CardLost, T0, &b.issued).unwrap();
        let mut crl = generate_crl(&b.state, &b.issued, &b.ca_key, &b.reg, T0 + 1, DAY).unwrap();
        crl.entries.clear(); // hide the revocation
        let err =
            check_status_via_crl(1, &crl, &b.ca_cert, b.issued.get(&1), T0 + 2, &b.reg).unwrap_err();
        assert_eq!(err.code(), "crl-invalid");
    }

    #[test]
    fn pcl_compresses_contiguous_serials() {
        let mut b = bench(8);
        b.state.revoke(4, RevocationReason::KeyCompromise, T0 + 1, &b.issued).unwrap();
        b.state.revoke(6, RevocationReason::CardLost, T0 + 1, &b.issued).unwrap();
        let pcl = generate_pcl(&b.state, &b.issued, &b.ca_key, &b.reg, T0 + 2).unwrap();
        assert_eq!(pcl.ranges, [(1, 3), (5, 5), (7, 8)]);
        assert_eq!(pcl.serials(), [1, 2, 3, 5, 7, 8]);
        assert!(pcl.contains(2) && !pcl.contains(4) && !pcl.contains(6) && !pcl.contains(9));
        let decoded = Pcl::decode(&pcl.encode()).unwrap();
        assert_eq!(decoded, pcl);
        assert!(decoded.verify_signature(&b.ca_cert.tbs.scheme_id, &b.ca_cert.tbs.public_key, &b.reg));
    }

    #[test]
    fn pcl_excludes_pending_and_expired_windows() {
        let mut b = bench(2);
        // Shift certificate 2's window into the future by re-issuing it.
        let mut tbs = b.issued.get(&2).unwrap().tbs.clone();
        tbs.not_before = T0 + 50 * DAY;
        tbs.not_after = T0 + 60 * DAY;
        let future = sign_certificate(tbs, &b.ca_key, &b.reg).unwrap();
        b.issued.insert(2, future);
        let pcl = generate_pcl(&b.state, &b.issued, &b.ca_key, &b.reg, T0 + 1).unwrap();
        assert_eq!(pcl.serials(), [1]);
        let pcl_late = generate_pcl(&b.state, &b.issued, &b.ca_key, &b.reg, T0 + 200 * DAY).unwrap();
        assert!(pcl_late.serials().is_empty());
    }

    #[test]
    fn issued_serials_partition_across_products() {
        let mut b = bench(40);
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        use rand::Rng;
        for serial in 1..=40u64 {
            if rng.random_bool(0.35) {
                let at = T0 + rng.random_range(0..50) * DAY;
                if at <= b.issued[&serial].tbs.not_after {
                    b.state.revoke(serial, RevocationReason::Administrative, at, &b.issued).unwrap();
                }
            }
        }
        for at in [T0, T0 + 30 * DAY, T0 + 99 * DAY, T0 + 150 * DAY] {
            let crl = generate_crl(&b.state, &b.issued, &b.ca_key, &b.reg, at, DAY).unwrap();
            let pcl = generate_pcl(&b.state, &b.issued, &b.ca_key, &b.reg, at).unwrap();
            for (serial, cert) in &b.issued {
                let in_pcl = pcl.contains(*serial);
                let in_crl = crl.is_listed(*serial).is_some();
                let expired = at > cert.tbs.not_after;
                let pending_unrevoked = at < cert.tbs.not_before && !b.state.is_revoked(*serial);
                let memberships =
                    [in_pcl, in_crl, expired, pending_unrevoked].iter().filter(|x| **x).count();
                assert_eq!(
                    memberships, 1,
                    "serial {serial} at {at}: pcl={in_pcl} crl={in_crl} expired={expired} pending={pending_unrevoked}"
                );
            }
        }
    }

    #[test]
    fn ocsp_echoes_nonce_and_signs_the_answer() {
        let mut b = bench(3);
        b.state.revoke(3, RevocationReason::KeyCompromise, T0 + 4, &b.issued).unwrap();
        let req = OcspRequest::new("pop", 3, &mut b.rng);
        let resp = ocsp_respond(&req, &b.state, &b.issued, &b.ca_key, &b.reg, T0 + 5).unwrap();
        assert_eq!(resp.status, CertStatus::Revoked { revoked_at: T0 + 4 });
        assert_eq!(resp.nonce, req.nonce);
        assert_eq!(resp.produced_at, T0 + 5);
        accept_ocsp_response(&resp, &req, &b.ca_cert, &b.reg).unwrap();
        let decoded = OcspResponse::decode(&resp.encode()).unwrap();
        assert_eq!(decoded, resp);
    }

    #[test]
    fn ocsp_rejects_short_nonce_and_tampered_echo() {
        let mut b = bench(1);
        let mut req = OcspRequest::new("pop", 1, &mut b.rng);
        let good_nonce = req.nonce.clone();
        req.nonce.truncate(8);
        let err = ocsp_respond(&req, &b.state, &b.issued, &b.ca_key, &b.reg, T0).unwrap_err();
        assert_eq!(err.code(), "request-malformed");

        req.nonce = good_nonce;
        let mut resp = ocsp_respond(&req, &b.state, &b.issued, &b.ca_key, &b.reg, T0).unwrap();
        resp.nonce[0] ^= 1;
        let err = accept_ocsp_response(&resp, &req, &b.ca_cert, &b.reg).unwrap_err();
        assert_eq!(err.code(), "data-tampered");
    }

    #[test]
    fn ocsp_never_issued_serial_is_unknown() {
        let mut b = bench(2);
        let req = OcspRequest::new("pop", 5000, &mut b.rng);
        let resp = ocsp_respond(&req, &b.state, &b.issued, &b.ca_key, &b.reg, T0).unwrap();
        assert_eq!(resp.status, CertStatus::Unknown);
    }

    #[test]
    fn three_products_agree_at_every_snapshot() {
        let mut b = bench(25);
        let mut rng = ChaCha20Rng::seed_from_u64(555);
        use rand::Rng;
        let mut clock = T0;
        for _round in 0..6 {
            clock += rng.random_range(1..40) * DAY;
            for _ in 0..4 {
                let serial = rng.random_range(1..=25u64);
                let _ = b.state.revoke(serial, RevocationReason::Administrative, clock, &b.issued);
            }
            let crl = generate_crl(&b.state, &b.issued, &b.ca_key, &b.reg, clock, DAY).unwrap();
            let pcl = generate_pcl(&b.state, &b.issued, &b.ca_key, &b.reg, clock).unwrap();
            for serial in (1..=25u64).chain(1000..1010) {
                let via_crl = check_status_via_crl(
                    serial,
                    &crl,
                    &b.ca_cert,
                    b.issued.get(&serial),
                    clock,
                    &b.reg,
                )
                .unwrap();
                let req = OcspRequest::new("pop", serial, &mut b.rng);
                let via_ocsp = ocsp_respond(&req, &b.state, &b.issued, &b.ca_key, &b.reg, clock)
                    .unwrap()
                    .status;
                assert_eq!(via_crl, via_ocsp, "serial {serial} at {clock}");
                assert_eq!(
                    pcl.contains(serial),
                    via_ocsp == CertStatus::Good,
                    "pcl membership must equal status good for serial {serial}"
                );
            }
        }
    }
}
