//! Service-provider toolkit: the six operations a relying party runs
//! against a card and the central services.
//!
//! Every operation accounts for its own resource use in a [`Meter`]:
//! how many secure channels it opened and how many online service calls
//! it made. The offline operations take no service handle at all, so
//! their zero-service-call property is structural, not behavioral.
//! Certificate validation runs in one of two modes: against locally
//! supplied CRLs, or against the online status responder; both must
//! agree at any fixed revocation snapshot.

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::ca::Hierarchy;
use crate::card::channel::AppletId;
use crate::card::moc::{match_score, FingerprintTemplate};
use crate::card::{
    card_sign, moc_match, open_secure_channel, read_fingerprint_template, sam::Sam, verify_pin,
    Card, CardKey, PinVerifyOutcome,
};
use crate::cert::{verify_certificate_signature, Certificate};
use crate::encoding::{RecordBuilder, RecordView};
use crate::error::Error;
use crate::path::{
    build_certificate_path, validate_certificate_path, CertificateSource, RevStatus,
    RevocationOracle, RevocationSource, TrustAnchorSet, ValidationOutcome, Verdict,
};
use crate::revocation::{
    accept_ocsp_response, check_status_via_crl, generate_crl, CertStatus, Crl, OcspRequest,
    OcspResponse,
};
use crate::scheme::{KeyPair, SchemeRegistry};
use crate::tsa::{issue_timestamp, TimestampToken};
use crate::Result;

// ---- Resource accounting ----

/// Channel and service usage of toolkit calls. Callers reset it between
/// operations when they want per-operation figures.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Meter {
    pub channel_opens: u64,
    pub service_calls: u64,
}

impl Meter {
    pub fn reset(&mut self) {
        *self = Meter::default();
    }
}

// ---- Certificate repository ----

/// Read access to the published certificate store: authority certificates
/// for path building plus end-entity certificates by issuer and serial.
/// In-process callers hand in the hierarchy itself; distributed callers
/// hand in a fetched snapshot.
pub trait CertificateRepository {
    fn issuer_certificate(&self, ca_id: &str) -> Option<Certificate>;
    fn end_entity_certificate(&self, issuer_id: &str, serial: u64) -> Option<Certificate>;
}

impl CertificateRepository for Hierarchy {
    fn issuer_certificate(&self, ca_id: &str) -> Option<Certificate> {
        self.ca(ca_id).map(|r| r.authority.certificate.clone())
    }

    fn end_entity_certificate(&self, issuer_id: &str, serial: u64) -> Option<Certificate> {
        self.ca(issuer_id).and_then(|r| r.issued.get(&serial)).cloned()
    }
}

/// Certificates held as plain data, for callers that pre-fetched them.
#[derive(Debug, Clone, Default)]
pub struct CertificateStore {
    pub authorities: BTreeMap<String, Certificate>,
    pub end_entities: BTreeMap<(String, u64), Certificate>,
}

impl CertificateRepository for CertificateStore {
    fn issuer_certificate(&self, ca_id: &str) -> Option<Certificate> {
        self.authorities.get(ca_id).cloned()
    }

    fn end_entity_certificate(&self, issuer_id: &str, serial: u64) -> Option<Certificate> {
        self.end_entities.get(&(issuer_id.to_string(), serial)).cloned()
    }
}

struct RepoAsSource<'a>(&'a dyn CertificateRepository);

impl CertificateSource for RepoAsSource<'_> {
    fn ca_certificate(&self, ca_id: &str) -> Option<Certificate> {
        self.0.issuer_certificate(ca_id)
    }
}

// ---- Validation modes ----

/// CRLs keyed by the authority that signs them. Chain validation needs
/// one per issuer on the path, all fresh at the query time.
#[derive(Debug, Clone, Default)]
pub struct CrlSet {
    crls: BTreeMap<String, Crl>,
}

impl CrlSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, crl: Crl) {
        self.crls.insert(crl.ca_id.clone(), crl);
    }

    pub fn get(&self, ca_id: &str) -> Option<&Crl> {
        self.crls.get(ca_id)
    }

    /// Fresh CRLs for every authority in `hierarchy` that holds its own
    /// signing key. Authorities certified under Option 1 keep their key
    /// off-site, so their CRLs must be added separately by whoever holds it.
    pub fn for_hierarchy(
        hierarchy: &Hierarchy,
        registry: &SchemeRegistry,
        at: u64,
        validity_window: u64,
    ) -> Result<Self> {
        let mut set = Self::new();
        for record in hierarchy.records() {
            if let Ok(key) = record.signing_key() {
                set.add(generate_crl(&record.revocation, &record.issued, key, registry, at, validity_window)?);
            }
        }
        Ok(set)
    }
}

pub enum ValidationMode<'a> {
    CrlLocal { crls: &'a CrlSet },
    OcspOnline,
}

impl ValidationMode<'_> {
    pub fn token(&self) -> &'static str {
        match self {
            ValidationMode::CrlLocal { .. } => "crl_local",
            ValidationMode::OcspOnline => "ocsp_online",
        }
    }
}

pub enum VerifyMode<'a> {
    /// All three verification steps run in-process; revocation comes from
    /// the supplied CRLs.
    Local { crls: &'a CrlSet },
    /// The whole job is shipped to the central validation service.
    Outsourced,
}

impl VerifyMode<'_> {
    pub fn token(&self) -> &'static str {
        match self {
            VerifyMode::Local { .. } => "local",
            VerifyMode::Outsourced => "outsourced",
        }
    }
}

// ---- Revocation oracles ----

/// Answers chain revocation queries from a set of locally held CRLs.
/// A missing or stale CRL is an availability failure, never a verdict.
pub struct CrlOracle<'a> {
    pub crls: &'a CrlSet,
    pub repository: &'a dyn CertificateRepository,
    pub registry: &'a SchemeRegistry,
}

impl RevocationOracle for CrlOracle<'_> {
    fn status(&mut self, cert: &Certificate, at: u64) -> Result<RevStatus> {
        let issuer_id = cert.issuer_id();
        let crl = self.crls.get(issuer_id).ok_or_else(|| {
            Error::ValidationUnavailable(format!("no crl supplied for issuer {issuer_id}"))
        })?;
        let ca_cert = self.repository.issuer_certificate(issuer_id).ok_or_else(|| {
            Error::ValidationUnavailable(format!("issuer certificate {issuer_id} unavailable"))
        })?;
        let status = check_status_via_crl(cert.serial(), crl, &ca_cert, Some(cert), at, self.registry)?;
        Ok(match status {
            CertStatus::Good => RevStatus::Good,
            CertStatus::Revoked { revoked_at } => RevStatus::Revoked { at: revoked_at },
            CertStatus::Unknown => RevStatus::Unknown,
        })
    }

    fn source(&self) -> RevocationSource {
        RevocationSource::Crl
    }
}

/// Queries the online responder once per chain element, with a fresh
/// nonce each time, and refuses any response that fails the acceptance
/// checks instead of downgrading it to a status.
pub struct OcspOracle<'a> {
    pub services: &'a mut dyn OnlineServices,
    pub meter: &'a mut Meter,
    pub repository: &'a dyn CertificateRepository,
    pub registry: &'a SchemeRegistry,
    pub rng: &'a mut dyn RngCore,
}

impl RevocationOracle for OcspOracle<'_> {
    fn status(&mut self, cert: &Certificate, _at: u64) -> Result<RevStatus> {
        let issuer_id = cert.issuer_id();
        let request = OcspRequest::new(issuer_id, cert.serial(), self.rng);
        self.meter.service_calls += 1;
        let response = self.services.ocsp_check(&request)?;
        let ca_cert = self.repository.issuer_certificate(issuer_id).ok_or_else(|| {
            Error::ValidationUnavailable(format!("issuer certificate {issuer_id} unavailable"))
        })?;
        accept_ocsp_response(&response, &request, &ca_cert, self.registry)?;
        Ok(match response.status {
            CertStatus::Good => RevStatus::Good,
            CertStatus::Revoked { revoked_at } => RevStatus::Revoked { at: revoked_at },
            CertStatus::Unknown => RevStatus::Unknown,
        })
    }

    fn source(&self) -> RevocationSource {
        RevocationSource::Ocsp
    }
}

// ---- Online services ----

/// The three endpoints toolkit operations may call out to. Implementations
/// answer in-process (tests, single binary) or over the wire (clients).
pub trait OnlineServices {
    fn ocsp_check(&mut self, request: &OcspRequest) -> Result<OcspResponse>;
    fn tsa_stamp(&mut self, document_hash: [u8; 32]) -> Result<TimestampToken>;
    fn verify_remote(&mut self, doc: &SignedDocument, at: u64) -> Result<ValidationOutcome>;
}

/// Stand-in for a network outage: every call fails with
/// validation-unavailable. Operations that complete against this backend
/// provably need no online service.
pub struct UnavailableServices;

impl OnlineServices for UnavailableServices {
    fn ocsp_check(&mut self, _request: &OcspRequest) -> Result<OcspResponse> {
        Err(Error::ValidationUnavailable("status responder unreachable".into()))
    }

    fn tsa_stamp(&mut self, _document_hash: [u8; 32]) -> Result<TimestampToken> {
        Err(Error::ValidationUnavailable("timestamping authority unreachable".into()))
    }

    fn verify_remote(&mut self, _doc: &SignedDocument, _at: u64) -> Result<ValidationOutcome> {
        Err(Error::ValidationUnavailable("validation service unreachable".into()))
    }
}

/// Timestamping authority state: identity, signing key, and the next
/// token serial, owned by whoever persists the service.
#[derive(Debug, Clone)]
pub struct TsaState {
    pub tsa_id: String,
    pub key: KeyPair,
    pub next_serial: u64,
}

/// In-process services answering straight from a hierarchy's ledgers, the
/// same answers the wire endpoints give. `responder_keys` carries signing
/// keys for authorities that keep none in the hierarchy (Option-1
/// subordinates), supplied by whoever operates them.
pub struct LedgerServices<'a> {
    pub hierarchy: &'a Hierarchy,
    pub registry: &'a SchemeRegistry,
    pub now: u64,
    pub responder_keys: BTreeMap<String, KeyPair>,
    pub tsa: Option<TsaState>,
}

impl<'a> LedgerServices<'a> {
    pub fn new(hierarchy: &'a Hierarchy, registry: &'a SchemeRegistry, now: u64) -> Self {
        Self { hierarchy, registry, now, responder_keys: BTreeMap::new(), tsa: None }
    }
}

impl OnlineServices for LedgerServices<'_> {
    fn ocsp_check(&mut self, request: &OcspRequest) -> Result<OcspResponse> {
        let record = self.hierarchy.require_ca(&request.ca_id)?;
        let key = match record.signing_key() {
            Ok(key) => key.clone(),
            Err(_) => self
                .responder_keys
                .get(&request.ca_id)
                .cloned()
                .ok_or_else(|| {
                    Error::ValidationUnavailable(format!(
                        "no responder key for authority {}",
                        request.ca_id
                    ))
                })?,
        };
        crate::revocation::ocsp_respond(
            request,
            &record.revocation,
            &record.issued,
            &key,
            self.registry,
            self.now,
        )
    }

    fn tsa_stamp(&mut self, document_hash: [u8; 32]) -> Result<TimestampToken> {
        let tsa = self
            .tsa
            .as_mut()
            .ok_or_else(|| Error::ValidationUnavailable("no timestamping authority".into()))?;
        let token = issue_timestamp(
            &tsa.tsa_id,
            tsa.next_serial,
            &document_hash,
            self.now,
            &tsa.key,
            self.registry,
        )?;
        tsa.next_serial += 1;
        Ok(token)
    }

    fn verify_remote(&mut self, doc: &SignedDocument, at: u64) -> Result<ValidationOutcome> {
        let Some(leaf) = self
            .hierarchy
            .end_entity_certificate(&doc.signer_issuer_id, doc.signer_cert_serial)
        else {
            return Ok(ValidationOutcome::no_path(
                at,
                format!(
                    "serial {} unknown to issuer {}",
                    doc.signer_cert_serial, doc.signer_issuer_id
                ),
            ));
        };
        if !document_signature_ok(doc, &leaf, self.registry) {
            return Ok(bad_document_signature(at));
        }
        let anchors = self.hierarchy.trust_anchors();
        let path = match build_certificate_path(&leaf, self.hierarchy, &anchors) {
            Ok(path) => path,
            Err(err) => return Ok(ValidationOutcome::no_path(at, err.to_string())),
        };
        let mut oracle = self.hierarchy.ledger_oracle(RevocationSource::Ocsp);
        validate_certificate_path(&path, &anchors, &mut oracle, self.registry, at)
    }
}

// ---- Results ----

/// Public data files of one card after their signatures checked out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityRecord {
    pub card_id: String,
    pub authority_id: String,
    pub files: BTreeMap<String, Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Factor {
    Possession,
    Pin,
    Biometric,
}

impl Factor {
    pub fn token(&self) -> &'static str {
        match self {
            Factor::Possession => "possession",
            Factor::Pin => "pin",
            Factor::Biometric => "biometric",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepRecord {
    pub step: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthResult {
    pub authenticated: bool,
    pub factors_passed: BTreeSet<Factor>,
    /// Absent when authentication failed before certificate validation ran.
    pub cert_outcome: Option<ValidationOutcome>,
    pub transcript: Vec<StepRecord>,
}

/// A detached signature over a document digest, identified the way a
/// relying party resolves it: issuing authority plus certificate serial.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedDocument {
    pub document_hash: [u8; 32],
    pub signature: Vec<u8>,
    pub signer_issuer_id: String,
    pub signer_cert_serial: u64,
    pub signing_time: u64,
    pub timestamp_token: Option<TimestampToken>,
}

impl SignedDocument {
    pub fn encode(&self) -> Vec<u8> {
        RecordBuilder::new()
            .raw("document_hash", self.document_hash.to_vec())
            .raw("signature", self.signature.clone())
            .str("signer_issuer_id", &self.signer_issuer_id)
            .u64("signer_cert_serial", self.signer_cert_serial)
            .u64("signing_time", self.signing_time)
            .opt_raw("timestamp_token", self.timestamp_token.as_ref().map(|t| t.encode()))
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let view = RecordView::parse(bytes)?;
        let document_hash: [u8; 32] = view
            .raw("document_hash")?
            .try_into()
            .map_err(|_| Error::MalformedEncoding("document hash must be 32 bytes".into()))?;
        let timestamp_token = match view.opt_raw("timestamp_token") {
            Some(raw) => Some(TimestampToken::decode(raw)?),
            None => None,
        };
        Ok(Self {
            document_hash,
            signature: view.raw("signature")?.to_vec(),
            signer_issuer_id: view.str("signer_issuer_id")?,
            signer_cert_serial: view.u64("signer_cert_serial")?,
            signing_time: view.u64("signing_time")?,
            timestamp_token,
        })
    }
}

pub fn document_digest(document: &[u8]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(document);
    hasher.finalize().into()
}

fn document_signature_ok(doc: &SignedDocument, leaf: &Certificate, registry: &SchemeRegistry) -> bool {
    registry
        .get(&leaf.tbs.scheme_id)
        .map(|s| s.verify(&leaf.tbs.public_key, &doc.document_hash, &doc.signature))
        .unwrap_or(false)
}

fn bad_document_signature(at: u64) -> ValidationOutcome {
    ValidationOutcome {
        verdict: Verdict::BadSignature,
        checked_at: at,
        revocation_source: RevocationSource::None,
        detail: "document signature invalid; path construction skipped".into(),
    }
}

// ---- The toolkit ----

pub struct Toolkit<'a> {
    pub registry: &'a SchemeRegistry,
    pub anchors: &'a TrustAnchorSet,
    pub repository: &'a dyn CertificateRepository,
    pub rng: &'a mut dyn RngCore,
    pub meter: Meter,
    /// Verbatim card traffic of the most recent operation, for inspection.
    pub last_traffic: Vec<crate::card::channel::TrafficEntry>,
}

impl<'a> Toolkit<'a> {
    pub fn new(
        registry: &'a SchemeRegistry,
        anchors: &'a TrustAnchorSet,
        repository: &'a dyn CertificateRepository,
        rng: &'a mut dyn RngCore,
    ) -> Self {
        Self { registry, anchors, repository, rng, meter: Meter::default(), last_traffic: Vec::new() }
    }

    fn open_channel(&mut self, card: &mut Card, sam: &Sam, applet: AppletId) -> Result<crate::card::channel::HostChannel> {
        self.meter.channel_opens += 1;
        open_secure_channel(card, sam, applet, &mut *self.rng)
    }

    /// Builds and validates the chain for `leaf` under the given mode.
    fn validate_leaf(
        &mut self,
        leaf: &Certificate,
        mode: &ValidationMode<'_>,
        services: &mut dyn OnlineServices,
        at: u64,
    ) -> Result<ValidationOutcome> {
        let source = RepoAsSource(self.repository);
        let path = match build_certificate_path(leaf, &source, self.anchors) {
            Ok(path) => path,
            Err(err) => return Ok(ValidationOutcome::no_path(at, err.to_string())),
        };
        match mode {
            ValidationMode::CrlLocal { crls } => {
                let mut oracle =
                    CrlOracle { crls, repository: self.repository, registry: self.registry };
                validate_certificate_path(&path, self.anchors, &mut oracle, self.registry, at)
            }
            ValidationMode::OcspOnline => {
                let mut oracle = OcspOracle {
                    services,
                    meter: &mut self.meter,
                    repository: self.repository,
                    registry: self.registry,
                    rng: &mut *self.rng,
                };
                validate_certificate_path(&path, self.anchors, &mut oracle, self.registry, at)
            }
        }
    }

    /// Reads and verifies the card's public data files. Fully offline: no
    /// channel, no PIN, no service, and it works on a PIN-blocked card.
    /// The issuing authority's certificate must be signed by a trust
    /// anchor; the check is signature-only because the reader may be
    /// offline with no revocation data at all.
    pub fn read_public_data(&mut self, card: &Card) -> Result<IdentityRecord> {
        self.last_traffic.clear();
        let authority = &card.authority_certificate;
        let anchor = self.anchors.get(authority.issuer_id()).ok_or_else(|| {
            Error::NoPath(format!(
                "issuing authority {} is not certified by a trust anchor",
                authority.subject_id()
            ))
        })?;
        if !verify_certificate_signature(authority, &anchor.scheme_id, &anchor.public_key, self.registry) {
            return Err(Error::DataTampered(
                "issuing authority certificate signature invalid".into(),
            ));
        }
        let mut files = BTreeMap::new();
        for file in card.read_public_data() {
            if !file.verify(authority, self.registry) {
                return Err(Error::DataTampered(format!(
                    "signature on file {:?} does not verify",
                    file.file_id
                )));
            }
            files.insert(file.file_id.clone(), file.content.clone());
        }
        Ok(IdentityRecord {
            card_id: card.card_id.clone(),
            authority_id: authority.subject_id().to_string(),
            files,
        })
    }

    /// Multi-factor authentication. Steps run in a fixed order: secure
    /// channel, PIN, challenge-response, certificate validation, and the
    /// biometric last when a probe is supplied. The first failing factor
    /// denies and later steps never run; infrastructure failures (stale
    /// CRL, unreachable responder) surface as errors, never as a denial,
    /// so the two are distinguishable.
    pub fn authenticate(
        &mut self,
        card: &mut Card,
        sam: &Sam,
        pin: &str,
        mode: &ValidationMode<'_>,
        services: &mut dyn OnlineServices,
        probe: Option<&FingerprintTemplate>,
        at: u64,
    ) -> Result<AuthResult> {
        self.last_traffic.clear();
        let mut transcript = Vec::new();
        let mut factors = BTreeSet::new();
        let denied = |transcript: Vec<StepRecord>,
                      factors: BTreeSet<Factor>,
                      cert_outcome: Option<ValidationOutcome>| {
            Ok(AuthResult { authenticated: false, factors_passed: factors, cert_outcome, transcript })
        };

        // Step 1: secure channel to the PKI applet.
        let mut channel = match self.open_channel(card, sam, AppletId::Pki) {
            Ok(channel) => {
                transcript.push(StepRecord { step: "channel", passed: true, detail: "pki applet".into() });
                channel
            }
            Err(err) => {
                transcript.push(StepRecord { step: "channel", passed: false, detail: err.to_string() });
                return denied(transcript, factors, None);
            }
        };

        // Step 2: PIN.
        let pin_outcome = verify_pin(&mut channel, card, self.registry, pin)?;
        match pin_outcome {
            PinVerifyOutcome::Ok => {
                factors.insert(Factor::Pin);
                transcript.push(StepRecord { step: "pin", passed: true, detail: "verified".into() });
            }
            other => {
                transcript.push(StepRecord {
                    step: "pin",
                    passed: false,
                    detail: other.token().to_string(),
                });
                self.last_traffic = std::mem::take(&mut channel.traffic);
                return denied(transcript, factors, None);
            }
        }

        // Step 3: fresh challenge signed by the card's authentication key,
        // verified against the registered certificate. This, not the mere
        // channel, proves possession of the personalized card.
        let issuer_id = card.authority_certificate.subject_id().to_string();
        let auth_serial = card.auth_cert_serial();
        let Some(leaf) = self.repository.end_entity_certificate(&issuer_id, auth_serial) else {
            transcript.push(StepRecord {
                step: "challenge",
                passed: false,
                detail: format!("serial {auth_serial} unknown to issuer {issuer_id}"),
            });
            self.last_traffic = std::mem::take(&mut channel.traffic);
            return denied(transcript, factors, None);
        };
        let mut challenge = [0u8; 32];
        self.rng.fill_bytes(&mut challenge);
        let signature = card_sign(&mut channel, card, self.registry, CardKey::Auth, &challenge, false)?;
        let challenge_ok = self
            .registry
            .get(&leaf.tbs.scheme_id)
            .map(|s| s.verify(&leaf.tbs.public_key, &challenge, &signature))
            .unwrap_or(false);
        if challenge_ok {
            factors.insert(Factor::Possession);
            transcript.push(StepRecord {
                step: "challenge",
                passed: true,
                detail: "card signed the fresh challenge".into(),
            });
        } else {
            transcript.push(StepRecord {
                step: "challenge",
                passed: false,
                detail: "challenge signature does not verify under the registered certificate".into(),
            });
            self.last_traffic = std::mem::take(&mut channel.traffic);
            return denied(transcript, factors, None);
        }

        // Step 4: certificate validation in the requested mode.
        let outcome = self.validate_leaf(&leaf, mode, services, at)?;
        let verdict_ok = outcome.verdict == Verdict::Valid;
        transcript.push(StepRecord {
            step: "certificate",
            passed: verdict_ok,
            detail: format!("{} via {}", outcome.verdict.token(), outcome.revocation_source.token()),
        });
        if !verdict_ok {
            self.last_traffic = std::mem::take(&mut channel.traffic);
            return denied(transcript, factors, Some(outcome));
        }

        // Step 5: biometric, only when requested. Opening the MOC channel
        // retires the PKI channel, which has done all its work by now.
        if let Some(probe) = probe {
            self.last_traffic = std::mem::take(&mut channel.traffic);
            drop(channel);
            let mut moc_channel = match self.open_channel(card, sam, AppletId::Moc) {
                Ok(channel) => channel,
                Err(err) => {
                    transcript.push(StepRecord {
                        step: "biometric",
                        passed: false,
                        detail: err.to_string(),
                    });
                    return denied(transcript, factors, Some(outcome));
                }
            };
            let (decision, score) = moc_match(&mut moc_channel, card, self.registry, probe)?;
            self.last_traffic.extend(std::mem::take(&mut moc_channel.traffic));
            transcript.push(StepRecord {
                step: "biometric",
                passed: decision,
                detail: format!("score {score:.3}"),
            });
            if decision {
                factors.insert(Factor::Biometric);
            } else {
                return denied(transcript, factors, Some(outcome));
            }
        } else {
            self.last_traffic = std::mem::take(&mut channel.traffic);
        }

        Ok(AuthResult {
            authenticated: true,
            factors_passed: factors,
            cert_outcome: Some(outcome),
            transcript,
        })
    }

    /// Reads the enrolled template over a secure channel and matches it
    /// locally. No online service is involved.
    pub fn match_off_card(
        &mut self,
        card: &mut Card,
        sam: &Sam,
        live_probe: &FingerprintTemplate,
        threshold: f64,
    ) -> Result<(bool, f64)> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::RequestMalformed(format!(
                "match threshold must lie in (0, 1], got {threshold}"
            )));
        }
        self.last_traffic.clear();
        let mut channel = self.open_channel(card, sam, AppletId::Moc)?;
        let template = read_fingerprint_template(&mut channel, card, self.registry)?;
        self.last_traffic = std::mem::take(&mut channel.traffic);
        let score = match_score(live_probe, &template);
        Ok((score >= threshold, score))
    }

    /// Ships the probe to the card and lets the card decide; the enrolled
    /// template never crosses the interface.
    pub fn match_on_card(
        &mut self,
        card: &mut Card,
        sam: &Sam,
        live_probe: &FingerprintTemplate,
    ) -> Result<(bool, f64)> {
        self.last_traffic.clear();
        let mut channel = self.open_channel(card, sam, AppletId::Moc)?;
        let result = moc_match(&mut channel, card, self.registry, live_probe)?;
        self.last_traffic = std::mem::take(&mut channel.traffic);
        Ok(result)
    }

    /// Produces a non-repudiation signature over `document`. The signature
    /// certificate must validate at signing time before the card is even
    /// asked; the per-operation confirmation rides with the PIN consent.
    pub fn sign(
        &mut self,
        card: &mut Card,
        sam: &Sam,
        pin: &str,
        document: &[u8],
        request_timestamp: bool,
        mode: &ValidationMode<'_>,
        services: &mut dyn OnlineServices,
        at: u64,
    ) -> Result<SignedDocument> {
        self.last_traffic.clear();
        let issuer_id = card.authority_certificate.subject_id().to_string();
        let serial = card.sign_cert_serial();
        let leaf = self
            .repository
            .end_entity_certificate(&issuer_id, serial)
            .ok_or(Error::UnknownSerial(serial))?;
        let outcome = self.validate_leaf(&leaf, mode, services, at)?;
        if outcome.verdict != Verdict::Valid {
            return Err(Error::SigningRefused(format!(
                "signature certificate {} at signing time: {}",
                outcome.verdict.token(),
                outcome.detail
            )));
        }
        let mut channel = self.open_channel(card, sam, AppletId::Pki)?;
        match verify_pin(&mut channel, card, self.registry, pin)? {
            PinVerifyOutcome::Ok => {}
            PinVerifyOutcome::Blocked => return Err(Error::PinBlocked),
            PinVerifyOutcome::Wrong { .. } => return Err(Error::PinRequired),
        }
        let document_hash = document_digest(document);
        let signature =
            card_sign(&mut channel, card, self.registry, CardKey::Sign, &document_hash, true)?;
        self.last_traffic = std::mem::take(&mut channel.traffic);
        let timestamp_token = if request_timestamp {
            self.meter.service_calls += 1;
            let token = services.tsa_stamp(document_hash)?;
            if token.document_hash != document_hash {
                return Err(Error::DataTampered(
                    "timestamp token covers a different document hash".into(),
                ));
            }
            Some(token)
        } else {
            None
        };
        Ok(SignedDocument {
            document_hash,
            signature,
            signer_issuer_id: issuer_id,
            signer_cert_serial: serial,
            signing_time: at,
            timestamp_token,
        })
    }

    /// Verifies a signed document: signature first, then path build, then
    /// path validation. A bad signature stops before any path work. The
    /// outsourced mode sends the whole job to the central service and
    /// returns its outcome verbatim.
    pub fn verify_signature(
        &mut self,
        doc: &SignedDocument,
        mode: &VerifyMode<'_>,
        services: &mut dyn OnlineServices,
        at: u64,
    ) -> Result<ValidationOutcome> {
        self.last_traffic.clear();
        match mode {
            VerifyMode::Local { crls } => {
                let Some(leaf) = self
                    .repository
                    .end_entity_certificate(&doc.signer_issuer_id, doc.signer_cert_serial)
                else {
                    return Ok(ValidationOutcome::no_path(
                        at,
                        format!(
                            "serial {} unknown to issuer {}",
                            doc.signer_cert_serial, doc.signer_issuer_id
                        ),
                    ));
                };
                if !document_signature_ok(doc, &leaf, self.registry) {
                    return Ok(bad_document_signature(at));
                }
                self.validate_leaf(&leaf, &ValidationMode::CrlLocal { crls }, services, at)
            }
            VerifyMode::Outsourced => {
                self.meter.service_calls += 1;
                services.verify_remote(doc, at)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ca::{IssueRequest, KeySource};
    use crate::card::moc::{Minutia, DEFAULT_THRESHOLD};
    use crate::card::{Personalization, PublicDataFile};
    use crate::cert::CertificateProfile;
    use crate::policy::CertificatePolicy;
    use crate::revocation::RevocationReason;
    use crate::scheme::TEST_MAC;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const T0: u64 = 1_750_000_000;
    const DAY: u64 = 86_400;
    const PIN: &str = "4711";

    struct Fx {
        registry: SchemeRegistry,
        hierarchy: Hierarchy,
        anchors: TrustAnchorSet,
        card: Card,
        sam: Sam,
        auth_serial: u64,
        sign_serial: u64,
        tsa_key: KeyPair,
        rng: ChaCha20Rng,
    }

    fn template() -> FingerprintTemplate {
        FingerprintTemplate::new(
            vec![
                Minutia { x: 100, y: 120, angle: 45 },
                Minutia { x: 310, y: 40, angle: 200 },
                Minutia { x: 255, y: 255, angle: 0 },
                Minutia { x: 30, y: 444, angle: 315 },
                Minutia { x: 470, y: 210, angle: 120 },
            ],
            90,
        )
        .unwrap()
    }

    fn fx() -> Fx {
        let registry = SchemeRegistry::builtin();
        let mut rng = ChaCha20Rng::seed_from_u64(4242);
        let mut hierarchy = Hierarchy::new();
        hierarchy
            .init_root("root", TEST_MAC, 2048, &CertificatePolicy::root_default(), "hsm-root", 7300, T0, &registry, &mut rng)
            .unwrap();
        hierarchy
            .init_population(
                "root",
                "population",
                TEST_MAC,
                2048,
                &CertificatePolicy::population_default(),
                "hsm-pop",
                3650,
                T0,
                &registry,
                &mut rng,
            )
            .unwrap();
        let auth_pair = registry.generate_key_pair(TEST_MAC, 4096, &mut rng).unwrap();
        let sign_pair = registry.generate_key_pair(TEST_MAC, 4096, &mut rng).unwrap();
        let issue = |h: &mut Hierarchy, rng: &mut ChaCha20Rng, pair: &KeyPair, profile| {
            h.issue_end_entity(
                "population",
                &IssueRequest {
                    subject_id: "resident-7".into(),
                    profile,
                    key_source: KeySource::Public {
                        public_key: pair.public_key.clone(),
                        scheme_id: pair.scheme_id.clone(),
                        key_length_bits: 4096,
                    },
                    role_attributes: None,
                    validity_days: 365,
                },
                T0,
                &SchemeRegistry::builtin(),
                rng,
            )
            .unwrap()
            .certificate
            .serial()
        };
        let auth_serial = issue(&mut hierarchy, &mut rng, &auth_pair, CertificateProfile::IdentityAuth);
        let sign_serial = issue(&mut hierarchy, &mut rng, &sign_pair, CertificateProfile::Signature);
        let population_cert = hierarchy.ca("population").unwrap().authority.certificate.clone();
        let population_key = hierarchy.ca("population").unwrap().signing_key().unwrap().clone();
        let mut master = [0u8; 32];
        rng.fill_bytes(&mut master);
        let files = vec![PublicDataFile::signed(
            "bio",
            b"full_name=Saeed;nationality=ARE".to_vec(),
            &population_key,
            &registry,
        )
        .unwrap()];
        let card = Card::personalize(Personalization {
            card_id: "card-resident-7".into(),
            data_files: files,
            pin: PIN.into(),
            auth_pair,
            auth_cert_serial: auth_serial,
            sign_pair,
            sign_cert_serial: sign_serial,
            template: template(),
            match_threshold: DEFAULT_THRESHOLD,
            sm_master_key_label: "batch-1".into(),
            sm_master_key: master,
            authority_certificate: population_cert,
        })
        .unwrap();
        let mut sam = Sam::new("sam-kiosk");
        sam.install_master_key("batch-1", master);
        let anchors = hierarchy.trust_anchors();
        let tsa_key = registry.generate_key_pair(TEST_MAC, 2048, &mut rng).unwrap();
        Fx { registry, hierarchy, anchors, card, sam, auth_serial, sign_serial, tsa_key, rng }
    }

    fn services<'a>(
        hierarchy: &'a Hierarchy,
        registry: &'a SchemeRegistry,
        tsa_key: &KeyPair,
        now: u64,
    ) -> LedgerServices<'a> {
        let mut services = LedgerServices::new(hierarchy, registry, now);
        services.tsa =
            Some(TsaState { tsa_id: "tsa-1".into(), key: tsa_key.clone(), next_serial: 1 });
        services
    }

    fn crls(fx: &Fx, at: u64) -> CrlSet {
        CrlSet::for_hierarchy(&fx.hierarchy, &fx.registry, at, 7 * DAY).unwrap()
    }

    #[test]
    fn read_public_data_is_offline_and_counts_nothing() {
        let mut fx = fx();
        let mut toolkit = Toolkit::new(&fx.registry, &fx.anchors, &fx.hierarchy, &mut fx.rng);
        let record = toolkit.read_public_data(&fx.card).unwrap();
        assert_eq!(record.card_id, "card-resident-7");
        assert_eq!(record.authority_id, "population");
        assert_eq!(record.files["bio"], b"full_name=Saeed;nationality=ARE");
        assert_eq!(toolkit.meter, Meter { channel_opens: 0, service_calls: 0 });
        assert!(toolkit.last_traffic.is_empty(), "no frames may cross the interface");
    }

    #[test]
    fn read_is_all_or_nothing_on_tamper() {
        let mut fx = fx();
        // Rebuild the card with one bit flipped in a signed file.
        let mut files: Vec<PublicDataFile> = fx.card.read_public_data().to_vec();
        files[0].content[3] ^= 1;
        let tampered = Card::personalize(Personalization {
            card_id: fx.card.card_id.clone(),
            data_files: files,
            pin: PIN.into(),
            auth_pair: fx.registry.generate_key_pair(TEST_MAC, 4096, &mut fx.rng).unwrap(),
            auth_cert_serial: fx.auth_serial,
            sign_pair: fx.registry.generate_key_pair(TEST_MAC, 4096, &mut fx.rng).unwrap(),
            sign_cert_serial: fx.sign_serial,
            template: template(),
            match_threshold: DEFAULT_THRESHOLD,
            sm_master_key_label: "batch-1".into(),
            sm_master_key: [9u8; 32],
            authority_certificate: fx.card.authority_certificate.clone(),
        })
        .unwrap();
        let mut toolkit = Toolkit::new(&fx.registry, &fx.anchors, &fx.hierarchy, &mut fx.rng);
        let err = toolkit.read_public_data(&tampered).unwrap_err();
        assert_eq!(err.code(), "data-tampered");
    }

    #[test]
    fn authenticate_succeeds_in_both_modes_with_matching_counters() {
        let mut fx = fx();
        let at = T0 + DAY;
        let crl_set = crls(&fx, at);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut toolkit = Toolkit::new(&fx.registry, &fx.anchors, &fx.hierarchy, &mut rng);

        // CRL mode works with every online service unreachable.
        let result = toolkit
            .authenticate(
                &mut fx.card,
                &fx.sam,
                PIN,
                &ValidationMode::CrlLocal { crls: &crl_set },
                &mut UnavailableServices,
                None,
                at,
            )
            .unwrap();
        assert!(result.authenticated);
        assert!(result.factors_passed.contains(&Factor::Possession));
        assert!(result.factors_passed.contains(&Factor::Pin));
        assert_eq!(result.cert_outcome.as_ref().unwrap().verdict, Verdict::Valid);
        assert_eq!(toolkit.meter, Meter { channel_opens: 1, service_calls: 0 });

        // OCSP mode queries the responder once per chain element.
        toolkit.meter.reset();
        let mut online = services(&fx.hierarchy, &fx.registry, &fx.tsa_key, at);
        let result = toolkit
            .authenticate(
                &mut fx.card,
                &fx.sam,
                PIN,
                &ValidationMode::OcspOnline,
                &mut online,
                None,
                at,
            )
            .unwrap();
        assert!(result.authenticated);
        assert_eq!(toolkit.meter, Meter { channel_opens: 1, service_calls: 3 });
    }

    #[test]
    fn revoked_auth_certificate_denies_identically_in_both_modes() {
        let mut fx = fx();
        let at = T0 + DAY;
        fx.hierarchy
            .revoke("population", fx.auth_serial, RevocationReason::CardLost, at - 100)
            .unwrap();
        let crl_set = crls(&fx, at);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut toolkit = Toolkit::new(&fx.registry, &fx.anchors, &fx.hierarchy, &mut rng);
        let crl_result = toolkit
            .authenticate(
                &mut fx.card,
                &fx.sam,
                PIN,
                &ValidationMode::CrlLocal { crls: &crl_set },
                &mut UnavailableServices,
                None,
                at,
            )
            .unwrap();
        let mut online = services(&fx.hierarchy, &fx.registry, &fx.tsa_key, at);
        let ocsp_result = toolkit
            .authenticate(&mut fx.card, &fx.sam, PIN, &ValidationMode::OcspOnline, &mut online, None, at)
            .unwrap();
        for result in [&crl_result, &ocsp_result] {
            assert!(!result.authenticated);
            assert_eq!(result.cert_outcome.as_ref().unwrap().verdict, Verdict::Revoked);
            // The denial happened after PIN and challenge, so those factors
            // stand; authentication still fails on the certificate.
            assert!(result.factors_passed.contains(&Factor::Pin));
        }
        assert_eq!(
            crl_result.cert_outcome.unwrap().verdict,
            ocsp_result.cert_outcome.unwrap().verdict
        );
    }

    #[test]
    fn wrong_pin_denies_at_the_pin_step() {
        let mut fx = fx();
        let at = T0 + DAY;
        let crl_set = crls(&fx, at);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut toolkit = Toolkit::new(&fx.registry, &fx.anchors, &fx.hierarchy, &mut rng);
        let result = toolkit
            .authenticate(
                &mut fx.card,
                &fx.sam,
                "0000",
                &ValidationMode::CrlLocal { crls: &crl_set },
                &mut UnavailableServices,
                None,
                at,
            )
            .unwrap();
        assert!(!result.authenticated);
        assert!(!result.factors_passed.contains(&Factor::Pin));
        assert!(result.cert_outcome.is_none(), "validation never ran");
        let steps: Vec<_> = result.transcript.iter().map(|s| (s.step, s.passed)).collect();
        assert_eq!(steps, [("channel", true), ("pin", false)]);
    }

    #[test]
    fn forged_card_denies_at_the_challenge_step() {
        let mut fx = fx();
        let at = T0 + DAY;
        // Forged card: right serials and data, wrong private keys.
        let mut forged = Card::personalize(Personalization {
            card_id: fx.card.card_id.clone(),
            data_files: fx.card.read_public_data().to_vec(),
            pin: PIN.into(),
            auth_pair: fx.registry.generate_key_pair(TEST_MAC, 4096, &mut fx.rng).unwrap(),
            auth_cert_serial: fx.auth_serial,
            sign_pair: fx.registry.generate_key_pair(TEST_MAC, 4096, &mut fx.rng).unwrap(),
            sign_cert_serial: fx.sign_serial,
            template: template(),
            match_threshold: DEFAULT_THRESHOLD,
            sm_master_key_label: "batch-1".into(),
            sm_master_key: [7u8; 32],
            authority_certificate: fx.card.authority_certificate.clone(),
        })
        .unwrap();
        let mut forged_sam = Sam::new("sam-forged");
        forged_sam.install_master_key("batch-1", [7u8; 32]);
        let crl_set = crls(&fx, at);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut toolkit = Toolkit::new(&fx.registry, &fx.anchors, &fx.hierarchy, &mut rng);
        let result = toolkit
            .authenticate(
                &mut forged,
                &forged_sam,
                PIN,
                &ValidationMode::CrlLocal { crls: &crl_set },
                &mut UnavailableServices,
                None,
                at,
            )
            .unwrap();
        assert!(!result.authenticated);
        assert!(result.factors_passed.contains(&Factor::Pin), "PIN was genuinely known");
        assert!(!result.factors_passed.contains(&Factor::Possession));
        assert_eq!(result.transcript.last().unwrap().step, "challenge");
    }

    #[test]
    fn responder_outage_is_an_error_not_a_denial() {
        let mut fx = fx();
        let at = T0 + DAY;
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut toolkit = Toolkit::new(&fx.registry, &fx.anchors, &fx.hierarchy, &mut rng);
        let err = toolkit
            .authenticate(
                &mut fx.card,
                &fx.sam,
                PIN,
                &ValidationMode::OcspOnline,
                &mut UnavailableServices,
                None,
                at,
            )
            .unwrap_err();
        assert_eq!(err.code(), "validation-unavailable");
    }

    #[test]
    fn stale_crl_is_an_error_not_a_denial() {
        let mut fx = fx();
        let crl_set = crls(&fx, T0);
        let at = T0 + 30 * DAY; // past the 7-day window
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut toolkit = Toolkit::new(&fx.registry, &fx.anchors, &fx.hierarchy, &mut rng);
        let err = toolkit
            .authenticate(
                &mut fx.card,
                &fx.sam,
                PIN,
                &ValidationMode::CrlLocal { crls: &crl_set },
                &mut UnavailableServices,
                None,
                at,
            )
            .unwrap_err();
        assert_eq!(err.code(), "crl-stale");
    }

    #[test]
    fn three_factor_run_passes_and_wrong_finger_denies() {
        let mut fx = fx();
        let at = T0 + DAY;
        let crl_set = crls(&fx, at);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut toolkit = Toolkit::new(&fx.registry, &fx.anchors, &fx.hierarchy, &mut rng);
        let probe = template();
        let result = toolkit
            .authenticate(
                &mut fx.card,
                &fx.sam,
                PIN,
                &ValidationMode::CrlLocal { crls: &crl_set },
                &mut UnavailableServices,
                Some(&probe),
                at,
            )
            .unwrap();
        assert!(result.authenticated);
        assert_eq!(result.factors_passed.len(), 3);
        // The biometric leg costs a second channel.
        assert_eq!(toolkit.meter, Meter { channel_opens: 2, service_calls: 0 });

        let stranger = FingerprintTemplate::new(
            vec![Minutia { x: 1, y: 1, angle: 180 }, Minutia { x: 499, y: 2, angle: 90 }],
            80,
        )
        .unwrap();
        let result = toolkit
            .authenticate(
                &mut fx.card,
                &fx.sam,
                PIN,
                &ValidationMode::CrlLocal { crls: &crl_set },
                &mut UnavailableServices,
                Some(&stranger),
                at,
            )
            .unwrap();
        assert!(!result.authenticated);
        assert!(!result.factors_passed.contains(&Factor::Biometric));
        assert!(result.factors_passed.contains(&Factor::Pin));
    }

    #[test]
    fn match_off_card_agrees_with_on_card_and_stays_offline() {
        let mut fx = fx();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let mut probe_rng = ChaCha20Rng::seed_from_u64(9);
        let mut toolkit = Toolkit::new(&fx.registry, &fx.anchors, &fx.hierarchy, &mut rng);
        for round in 0..25 {
            let n = (probe_rng.next_u32() % 6) as usize;
            let minutiae = (0..n)
                .map(|_| Minutia {
                    x: (probe_rng.next_u32() % 500) as u16,
                    y: (probe_rng.next_u32() % 500) as u16,
                    angle: (probe_rng.next_u32() % 360) as u16,
                })
                .collect();
            let probe = FingerprintTemplate::new(minutiae, 70).unwrap();
            let off = toolkit
                .match_off_card(&mut fx.card, &fx.sam, &probe, DEFAULT_THRESHOLD)
                .unwrap();
            let on = toolkit.match_on_card(&mut fx.card, &fx.sam, &probe).unwrap();
            assert_eq!(off, on, "round {round}");
        }
        // Fifty operations, one channel each, zero service calls.
        assert_eq!(toolkit.meter, Meter { channel_opens: 50, service_calls: 0 });
    }

    #[test]
    fn on_card_match_never_leaks_the_template() {
        let mut fx = fx();
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let mut toolkit = Toolkit::new(&fx.registry, &fx.anchors, &fx.hierarchy, &mut rng);
        let probe = template();
        toolkit.match_on_card(&mut fx.card, &fx.sam, &probe).unwrap();
        let template_bytes = fx.card.enrolled_template().encode();
        for entry in &toolkit.last_traffic {
            if entry.direction == crate::card::channel::TrafficDirection::FromCard {
                assert!(
                    !entry.frame.windows(template_bytes.len()).any(|w| w == &template_bytes[..]),
                    "template bytes crossed the interface card-to-terminal"
                );
            }
        }
        // The off-card variant necessarily does read it out.
        toolkit.match_off_card(&mut fx.card, &fx.sam, &probe, DEFAULT_THRESHOLD).unwrap();
        let leaked = toolkit.last_traffic.iter().any(|entry| {
            entry.direction == crate::card::channel::TrafficDirection::FromCard
                && entry.frame.windows(template_bytes.len()).any(|w| w == &template_bytes[..])
        });
        assert!(leaked, "off-card matching reads the template by design");
    }

    #[test]
    fn sign_then_verify_round_trips_in_both_modes() {
        let mut fx = fx();
        let at = T0 + DAY;
        let crl_set = crls(&fx, at);
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut toolkit = Toolkit::new(&fx.registry, &fx.anchors, &fx.hierarchy, &mut rng);
        let mut online = services(&fx.hierarchy, &fx.registry, &fx.tsa_key, at);
        let doc = toolkit
            .sign(
                &mut fx.card,
                &fx.sam,
                PIN,
                b"transfer 100 AED to account 42",
                false,
                &ValidationMode::CrlLocal { crls: &crl_set },
                &mut online,
                at,
            )
            .unwrap();
        assert_eq!(toolkit.meter, Meter { channel_opens: 1, service_calls: 0 });
        assert_eq!(doc.signer_cert_serial, fx.sign_serial);

        toolkit.meter.reset();
        let local = toolkit
            .verify_signature(&doc, &VerifyMode::Local { crls: &crl_set }, &mut online, at)
            .unwrap();
        assert_eq!(local.verdict, Verdict::Valid);
        assert_eq!(toolkit.meter, Meter { channel_opens: 0, service_calls: 0 });

        toolkit.meter.reset();
        let outsourced = toolkit
            .verify_signature(&doc, &VerifyMode::Outsourced, &mut online, at)
            .unwrap();
        assert_eq!(outsourced.verdict, Verdict::Valid);
        assert_eq!(toolkit.meter, Meter { channel_opens: 0, service_calls: 1 });

        // Wire round trip of the document itself.
        assert_eq!(SignedDocument::decode(&doc.encode()).unwrap(), doc);
    }

    #[test]
    fn flipped_signature_bit_fails_before_any_path_work() {
        let mut fx = fx();
        let at = T0 + DAY;
        let crl_set = crls(&fx, at);
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let mut toolkit = Toolkit::new(&fx.registry, &fx.anchors, &fx.hierarchy, &mut rng);
        let mut online = services(&fx.hierarchy, &fx.registry, &fx.tsa_key, at);
        let mut doc = toolkit
            .sign(
                &mut fx.card,
                &fx.sam,
                PIN,
                b"contract",
                false,
                &ValidationMode::CrlLocal { crls: &crl_set },
                &mut online,
                at,
            )
            .unwrap();
        doc.signature[0] ^= 1;
        let local = toolkit
            .verify_signature(&doc, &VerifyMode::Local { crls: &crl_set }, &mut online, at)
            .unwrap();
        assert_eq!(local.verdict, Verdict::BadSignature);
        assert_eq!(local.revocation_source, RevocationSource::None, "revocation never consulted");
        assert!(local.detail.contains("path construction skipped"));
        let outsourced = toolkit
            .verify_signature(&doc, &VerifyMode::Outsourced, &mut online, at)
            .unwrap();
        assert_eq!(outsourced.verdict, Verdict::BadSignature);
    }

    #[test]
    fn revoked_signature_cert_refuses_signing_while_auth_still_works() {
        let mut fx = fx();
        let at = T0 + DAY;
        fx.hierarchy
            .revoke("population", fx.sign_serial, RevocationReason::KeyCompromise, at - 50)
            .unwrap();
        let crl_set = crls(&fx, at);
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let mut toolkit = Toolkit::new(&fx.registry, &fx.anchors, &fx.hierarchy, &mut rng);
        let err = toolkit
            .sign(
                &mut fx.card,
                &fx.sam,
                PIN,
                b"doc",
                false,
                &ValidationMode::CrlLocal { crls: &crl_set },
                &mut UnavailableServices,
                at,
            )
            .unwrap_err();
        assert_eq!(err.code(), "signing-refused");
        assert!(err.to_string().contains("revoked"));
        // The authentication certificate is untouched.
        let result = toolkit
            .authenticate(
                &mut fx.card,
                &fx.sam,
                PIN,
                &ValidationMode::CrlLocal { crls: &crl_set },
                &mut UnavailableServices,
                None,
                at,
            )
            .unwrap();
        assert!(result.authenticated);
    }

    #[test]
    fn requested_timestamp_binds_the_document_hash() {
        let mut fx = fx();
        let at = T0 + DAY;
        let crl_set = crls(&fx, at);
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let mut toolkit = Toolkit::new(&fx.registry, &fx.anchors, &fx.hierarchy, &mut rng);
        let mut online = services(&fx.hierarchy, &fx.registry, &fx.tsa_key, at);
        let doc = toolkit
            .sign(
                &mut fx.card,
                &fx.sam,
                PIN,
                b"timestamped agreement",
                true,
                &ValidationMode::CrlLocal { crls: &crl_set },
                &mut online,
                at,
            )
            .unwrap();
        let token = doc.timestamp_token.as_ref().expect("token attached on request");
        assert_eq!(token.document_hash, doc.document_hash.to_vec());
        assert_eq!(token.time, at);
        // The stamp was the only service call.
        assert_eq!(toolkit.meter, Meter { channel_opens: 1, service_calls: 1 });
    }

    #[test]
    fn expired_leaf_denies_with_expired_verdict() {
        let mut fx = fx();
        let at = T0 + 366 * DAY + DAY; // past the 365-day certificate
        let crl_set = crls(&fx, at);
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let mut toolkit = Toolkit::new(&fx.registry, &fx.anchors, &fx.hierarchy, &mut rng);
        let result = toolkit
            .authenticate(
                &mut fx.card,
                &fx.sam,
                PIN,
                &ValidationMode::CrlLocal { crls: &crl_set },
                &mut UnavailableServices,
                None,
                at,
            )
            .unwrap();
        assert!(!result.authenticated);
        assert_eq!(result.cert_outcome.unwrap().verdict, Verdict::Expired);
    }
}
