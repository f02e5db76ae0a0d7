//! Certification path building and validation.
//!
//! A path runs leaf-first and ends with the certificate whose issuer is a
//! trust anchor (for a two-level hierarchy that last element is the root's
//! own self-signed certificate). Validation walks the chain leaf to anchor
//! and applies, per element and in this fixed order: issuer signature,
//! validity window, revocation status. The first failing check names the
//! verdict, so a certificate that is both expired and revoked reports
//! `expired` (time is checked before revocation).

use std::collections::BTreeSet;

use crate::cert::{verify_certificate_signature, Certificate};
use crate::error::Error;
use crate::scheme::SchemeRegistry;
use crate::Result;

/// Anchor key material by authority id. Only the root belongs here in the
/// shipped topology, but the set is plural by design so tests can model
/// cross-certified deployments.
#[derive(Debug, Clone, Default)]
pub struct TrustAnchorSet {
    anchors: std::collections::BTreeMap<String, AnchorKey>,
}

#[derive(Debug, Clone)]
pub struct AnchorKey {
    pub public_key: Vec<u8>,
    pub scheme_id: String,
}

impl TrustAnchorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, ca_id: impl Into<String>, public_key: Vec<u8>, scheme_id: impl Into<String>) {
        self.anchors
            .insert(ca_id.into(), AnchorKey { public_key, scheme_id: scheme_id.into() });
    }

    pub fn from_root(root_cert: &Certificate) -> Self {
        let mut set = Self::new();
        set.add(
            root_cert.subject_id(),
            root_cert.tbs.public_key.clone(),
            root_cert.tbs.scheme_id.clone(),
        );
        set
    }

    pub fn contains(&self, ca_id: &str) -> bool {
        self.anchors.contains_key(ca_id)
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn get(&self, ca_id: &str) -> Option<&AnchorKey> {
        self.anchors.get(ca_id)
    }
}

/// Source of issuer certificates during path construction. Implemented by
/// the repository; tests substitute fixtures.
pub trait CertificateSource {
    /// The current CA certificate for `ca_id`, if this source knows one.
    fn ca_certificate(&self, ca_id: &str) -> Option<Certificate>;
}

impl CertificateSource for std::collections::BTreeMap<String, Certificate> {
    fn ca_certificate(&self, ca_id: &str) -> Option<Certificate> {
        self.get(ca_id).cloned()
    }
}

/// An ordered chain, leaf first, anchor-issued last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertPath {
    pub chain: Vec<Certificate>,
}

impl CertPath {
    pub fn leaf(&self) -> &Certificate {
        &self.chain[0]
    }
}

const MAX_CHAIN_LEN: usize = 8;

/// Builds the chain from `leaf` up to a trust anchor. The hierarchy is a
/// tree, so the chain is unique (and therefore shortest) when it exists.
pub fn build_certificate_path(
    leaf: &Certificate,
    source: &dyn CertificateSource,
    anchors: &TrustAnchorSet,
) -> Result<CertPath> {
    let mut chain = vec![leaf.clone()];
    let mut seen: BTreeSet<String> = BTreeSet::new();
    seen.insert(leaf.subject_id().to_string());
    loop {
        let last = chain.last().expect("chain is never empty");
        if last.is_self_signed() {
            if anchors.contains(last.issuer_id()) {
                return Ok(CertPath { chain });
            }
            return Err(Error::NoPath(format!(
                "self-signed {} is not a trust anchor",
                last.subject_id()
            )));
        }
        let issuer_id = last.issuer_id().to_string();
        match source.ca_certificate(&issuer_id) {
            Some(issuer_cert) => {
                if !seen.insert(issuer_cert.subject_id().to_string()) {
                    return Err(Error::NoPath(format!("cycle through {issuer_id}")));
                }
                if chain.len() >= MAX_CHAIN_LEN {
                    return Err(Error::NoPath("chain exceeds depth bound".into()));
                }
                chain.push(issuer_cert);
            }
            None if anchors.contains(&issuer_id) => {
                // The anchor key is known but its certificate is not held
                // locally; the chain still terminates validly here.
                return Ok(CertPath { chain });
            }
            None => return Err(Error::NoPath(format!("missing issuer {issuer_id}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Valid,
    Expired,
    NotYetValid,
    Revoked,
    Unknown,
    BadSignature,
    NoPath,
}

impl Verdict {
    pub fn token(&self) -> &'static str {
        match self {
            Verdict::Valid => "valid",
            Verdict::Expired => "expired",
            Verdict::NotYetValid => "not_yet_valid",
            Verdict::Revoked => "revoked",
            Verdict::Unknown => "unknown",
            Verdict::BadSignature => "bad_signature",
            Verdict::NoPath => "no_path",
        }
    }

    pub fn from_token(token: &str) -> Result<Self> {
        Ok(match token {
            "valid" => Verdict::Valid,
            "expired" => Verdict::Expired,
            "not_yet_valid" => Verdict::NotYetValid,
            "revoked" => Verdict::Revoked,
            "unknown" => Verdict::Unknown,
            "bad_signature" => Verdict::BadSignature,
            "no_path" => Verdict::NoPath,
            other => return Err(Error::MalformedEncoding(format!("unknown verdict {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RevocationSource {
    None,
    Crl,
    Ocsp,
}

impl RevocationSource {
    pub fn token(&self) -> &'static str {
        match self {
            RevocationSource::None => "none",
            RevocationSource::Crl => "crl",
            RevocationSource::Ocsp => "ocsp",
        }
    }

    pub fn from_token(token: &str) -> Result<Self> {
        Ok(match token {
            "none" => RevocationSource::None,
            "crl" => RevocationSource::Crl,
            "ocsp" => RevocationSource::Ocsp,
            other => {
                return Err(Error::MalformedEncoding(format!("unknown revocation source {other:?}")))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationOutcome {
    pub verdict: Verdict,
    pub checked_at: u64,
    pub revocation_source: RevocationSource,
    pub detail: String,
}

impl ValidationOutcome {
    pub fn no_path(at: u64, detail: impl Into<String>) -> Self {
        Self {
            verdict: Verdict::NoPath,
            checked_at: at,
            revocation_source: RevocationSource::None,
            detail: detail.into(),
        }
    }
}

/// Revocation status as seen by a validation-time oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RevStatus {
    Good,
    Revoked { at: u64 },
    Unknown,
}

/// Answers revocation queries during path validation. An `Err` means the
/// oracle itself is unavailable (stale CRL, unreachable responder); callers
/// must fail closed and must not map that onto a verdict.
pub trait RevocationOracle {
    fn status(&mut self, cert: &Certificate, at: u64) -> Result<RevStatus>;
    fn source(&self) -> RevocationSource;
}

/// Oracle for validations that deliberately skip revocation (offline file
/// checks). Reports every certificate as status-unknown, which keeps the
/// `valid -> revocation consulted` invariant structural.
pub struct NoRevocationOracle;

impl RevocationOracle for NoRevocationOracle {
    fn status(&mut self, _cert: &Certificate, _at: u64) -> Result<RevStatus> {
        Ok(RevStatus::Unknown)
    }

    fn source(&self) -> RevocationSource {
        RevocationSource::None
    }
}

/// Validates a built path at `at`. Checks run leaf to anchor; within each
/// element: signature, then time window, then revocation.
pub fn validate_certificate_path(
    path: &CertPath,
    anchors: &TrustAnchorSet,
    oracle: &mut dyn RevocationOracle,
    registry: &SchemeRegistry,
    at: u64,
) -> Result<ValidationOutcome> {
    let source = oracle.source();
    let outcome = move |verdict: Verdict, detail: String| ValidationOutcome {
        verdict,
        checked_at: at,
        revocation_source: source,
        detail,
    };
    if path.chain.is_empty() {
        return Ok(outcome(Verdict::NoPath, "empty chain".into()));
    }
    for (idx, cert) in path.chain.iter().enumerate() {
        let (issuer_scheme, issuer_key) = match path.chain.get(idx + 1) {
            Some(issuer) => (issuer.tbs.scheme_id.clone(), issuer.tbs.public_key.clone()),
            None => match anchors.get(cert.issuer_id()) {
                Some(anchor) => (anchor.scheme_id.clone(), anchor.public_key.clone()),
                None => {
                    return Ok(outcome(
                        Verdict::NoPath,
                        format!("chain[{idx}] issuer {} is not anchored", cert.issuer_id()),
                    ))
                }
            },
        };
        if !verify_certificate_signature(cert, &issuer_scheme, &issuer_key, registry) {
            return Ok(outcome(
                Verdict::BadSignature,
                format!("chain[{idx}] serial {} signature invalid", cert.serial()),
            ));
        }
        if at < cert.tbs.not_before {
            return Ok(outcome(
                Verdict::NotYetValid,
                format!("chain[{idx}] serial {} not valid before {}", cert.serial(), cert.tbs.not_before),
            ));
        }
        if at > cert.tbs.not_after {
            return Ok(outcome(
                Verdict::Expired,
                format!("chain[{idx}] serial {} expired at {}", cert.serial(), cert.tbs.not_after),
            ));
        }
        match oracle.status(cert, at)? {
            RevStatus::Good => {}
            RevStatus::Revoked { at: revoked_at } => {
                return Ok(outcome(
                    Verdict::Revoked,
                    format!("chain[{idx}] serial {} revoked at {revoked_at}", cert.serial()),
                ));
            }
            RevStatus::Unknown => {
                return Ok(outcome(
                    Verdict::Unknown,
                    format!("chain[{idx}] serial {} status unknown", cert.serial()),
                ));
            }
        }
    }
    Ok(outcome(Verdict::Valid, format!("chain of {} verified", path.chain.len())))
}
