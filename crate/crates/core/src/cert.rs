//! Certificates and their canonical byte form.
//!
//! A certificate is a signed statement by an issuing authority binding a
//! subject identifier to a public key under a named policy. The signed
//! portion (`TbsCertificate`) serializes through the canonical record
//! encoding; the stored form appends the issuer signature:
//!
//! ```text
//! CERT := TBS_RECORD SIG_LEN(u32 BE) SIGNATURE
//! ```
//!
//! Validity bounds are inclusive at both ends: a certificate is time-valid
//! at `t` when `not_before <= t <= not_after`. `key_length_bits` is profile
//! metadata describing the subject key class (authority keys 2048, resident
//! keys 4096 by convention); schemes fix their own material sizes.

use std::collections::BTreeMap;

use crate::encoding::{RecordBuilder, RecordView};
use crate::error::Error;
use crate::scheme::{KeyPair, SchemeRegistry};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CertificateProfile {
    /// Issuing authority (root, population, or subordinate CA).
    Ca,
    /// Card authentication key of a resident.
    IdentityAuth,
    /// Digital-signature key of a resident.
    Signature,
    /// Confidentiality key of a resident; the only profile eligible for
    /// escrowed issuance.
    Encryption,
    /// Role or entitlement certificate carrying `role_attributes`.
    Attribute,
    /// Infrastructure device: timestamping authority, lifecycle operator.
    Device,
}

impl CertificateProfile {
    pub const ALL: [CertificateProfile; 6] = [
        CertificateProfile::Ca,
        CertificateProfile::IdentityAuth,
        CertificateProfile::Signature,
        CertificateProfile::Encryption,
        CertificateProfile::Attribute,
        CertificateProfile::Device,
    ];

    pub fn token(&self) -> &'static str {
        match self {
            CertificateProfile::Ca => "ca",
            CertificateProfile::IdentityAuth => "identity_auth",
            CertificateProfile::Signature => "signature",
            CertificateProfile::Encryption => "encryption",
            CertificateProfile::Attribute => "attribute",
            CertificateProfile::Device => "device",
        }
    }

    pub fn from_token(token: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.token() == token)
            .ok_or_else(|| Error::MalformedEncoding(format!("unknown profile {token:?}")))
    }

    /// Profiles describing resident (end-entity) keys.
    pub fn is_end_entity(&self) -> bool {
        !matches!(self, CertificateProfile::Ca)
    }
}

/// The to-be-signed fields of a certificate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TbsCertificate {
    pub serial: u64,
    pub subject_id: String,
    pub issuer_id: String,
    pub profile: CertificateProfile,
    pub public_key: Vec<u8>,
    pub scheme_id: String,
    pub key_length_bits: u32,
    pub not_before: u64,
    pub not_after: u64,
    pub policy_id: String,
    pub role_attributes: Option<BTreeMap<String, String>>,
}

impl TbsCertificate {
    pub fn encode(&self) -> Vec<u8> {
        RecordBuilder::new()
            .u64("serial", self.serial)
            .str("subject_id", &self.subject_id)
            .str("issuer_id", &self.issuer_id)
            .str("profile", self.profile.token())
            .raw("public_key", self.public_key.clone())
            .str("scheme_id", &self.scheme_id)
            .u64("key_length_bits", u64::from(self.key_length_bits))
            .u64("not_before", self.not_before)
            .u64("not_after", self.not_after)
            .str("policy_id", &self.policy_id)
            .opt_map("role_attributes", self.role_attributes.as_ref())
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let view = RecordView::parse(bytes)?;
        Ok(Self {
            serial: view.u64("serial")?,
            subject_id: view.str("subject_id")?,
            issuer_id: view.str("issuer_id")?,
            profile: CertificateProfile::from_token(&view.str("profile")?)?,
            public_key: view.raw("public_key")?.to_vec(),
            scheme_id: view.str("scheme_id")?,
            key_length_bits: view
                .u64("key_length_bits")?
                .try_into()
                .map_err(|_| Error::MalformedEncoding("key_length_bits out of range".into()))?,
            not_before: view.u64("not_before")?,
            not_after: view.u64("not_after")?,
            policy_id: view.str("policy_id")?,
            role_attributes: view.opt_map("role_attributes")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub tbs: TbsCertificate,
    pub signature: Vec<u8>,
}

impl Certificate {
    pub fn serial(&self) -> u64 {
        self.tbs.serial
    }

    pub fn subject_id(&self) -> &str {
        &self.tbs.subject_id
    }

    pub fn issuer_id(&self) -> &str {
        &self.tbs.issuer_id
    }

    pub fn time_valid(&self, at: u64) -> bool {
        self.tbs.not_before <= at && at <= self.tbs.not_after
    }

    pub fn is_self_signed(&self) -> bool {
        self.tbs.subject_id == self.tbs.issuer_id
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.tbs.encode();
        out.extend_from_slice(&(self.signature.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        // The TBS record is self-delimiting; walk its fields to find where
        // the signature suffix begins.
        let tbs_len = tbs_prefix_len(bytes)?;
        let tbs = TbsCertificate::decode(&bytes[..tbs_len])?;
        let rest = &bytes[tbs_len..];
        if rest.len() < 4 {
            return Err(Error::MalformedEncoding("missing signature length".into()));
        }
        let sig_len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
        let sig = &rest[4..];
        if sig.len() != sig_len {
            return Err(Error::MalformedEncoding("signature length mismatch".into()));
        }
        Ok(Self { tbs, signature: sig.to_vec() })
    }
}

/// Length of the canonical TBS record at the head of `bytes`, determined by
/// walking field frames until the first name that is not strictly greater
/// than its predecessor (the signature length prefix never parses as one,
/// because field order inside the record is enforced on re-parse).
fn tbs_prefix_len(bytes: &[u8]) -> Result<usize> {
    // A certificate's TBS record always ends at the last well-formed,
    // ascending field boundary before exactly (4 + sig_len) trailing bytes.
    // Walk frames greedily; at each boundary check whether the remainder
    // parses as a signature suffix.
    let mut offset = 0;
    loop {
        let rest = &bytes[offset..];
        if rest.len() >= 4 {
            let sig_len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
            if rest.len() == 4 + sig_len && offset > 0 {
                return Ok(offset);
            }
        }
        if rest.len() < 4 {
            return Err(Error::MalformedEncoding("truncated certificate".into()));
        }
        let name_len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
        let after_name = 4usize
            .checked_add(name_len)
            .ok_or_else(|| Error::MalformedEncoding("field length overflow".into()))?;
        if rest.len() < after_name + 4 {
            return Err(Error::MalformedEncoding("truncated certificate field".into()));
        }
        let value_len =
            u32::from_be_bytes(rest[after_name..after_name + 4].try_into().unwrap()) as usize;
        let field_end = after_name
            .checked_add(4)
            .and_then(|n| n.checked_add(value_len))
            .ok_or_else(|| Error::MalformedEncoding("field length overflow".into()))?;
        if rest.len() < field_end {
            return Err(Error::MalformedEncoding("truncated certificate field".into()));
        }
        offset += field_end;
    }
}

/// Signs `tbs` with the issuer key. The subject's scheme (`tbs.scheme_id`)
/// describes the subject public key and may differ from the issuer's.
pub fn sign_certificate(
    tbs: TbsCertificate,
    issuer_key: &KeyPair,
    registry: &SchemeRegistry,
) -> Result<Certificate> {
    if tbs.not_before > tbs.not_after {
        return Err(Error::InvalidValidity(format!(
            "not_before {} exceeds not_after {}",
            tbs.not_before, tbs.not_after
        )));
    }
    let scheme = registry.get(&issuer_key.scheme_id)?;
    let signature = scheme.sign(issuer_key.private_key_bytes(), &tbs.encode())?;
    Ok(Certificate { tbs, signature })
}

/// Verifies the issuer signature. The issuer's scheme and public key come
/// from the caller (the issuer's own certificate or a trust anchor), not
/// from the certificate under test.
pub fn verify_certificate_signature(
    cert: &Certificate,
    issuer_scheme_id: &str,
    issuer_public_key: &[u8],
    registry: &SchemeRegistry,
) -> bool {
    match registry.get(issuer_scheme_id) {
        Ok(scheme) => scheme.verify(issuer_public_key, &cert.tbs.encode(), &cert.signature),
        Err(_) => false,
    }
}
