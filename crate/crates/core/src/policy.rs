//! Certificate policies.
//!
//! Each authority operates under exactly one policy that fixes which
//! profiles it may issue and the longest validity it may grant. Policy
//! documents follow the conventional CP/CPS outline (RFC 2527 numbering),
//! kept here as a section-number-to-heading map plus free document text.

use std::collections::{BTreeMap, BTreeSet};

use crate::cert::CertificateProfile;
use crate::clock::SECONDS_PER_DAY;
use crate::encoding::{RecordBuilder, RecordView};
use crate::error::Error;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertificatePolicy {
    pub policy_id: String,
    pub title: String,
    pub allowed_profiles: BTreeSet<CertificateProfile>,
    pub max_validity_days: u32,
    pub document_text: String,
    pub rfc2527_sections: BTreeMap<String, String>,
}

/// Standard CP/CPS top-level outline.
pub fn standard_outline() -> BTreeMap<String, String> {
    [
        ("1", "Introduction"),
        ("2", "General Provisions"),
        ("3", "Identification and Authentication"),
        ("4", "Operational Requirements"),
        ("5", "Physical, Procedural and Personnel Security Controls"),
        ("6", "Technical Security Controls"),
        ("7", "Certificate and CRL Profiles"),
        ("8", "Specification Administration"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

impl CertificatePolicy {
    pub fn new(
        policy_id: impl Into<String>,
        title: impl Into<String>,
        allowed_profiles: impl IntoIterator<Item = CertificateProfile>,
        max_validity_days: u32,
    ) -> Result<Self> {
        let policy_id = policy_id.into();
        let allowed_profiles: BTreeSet<_> = allowed_profiles.into_iter().collect();
        if policy_id.is_empty() {
            return Err(Error::RequestMalformed("policy_id must be non-empty".into()));
        }
        if allowed_profiles.is_empty() {
            return Err(Error::RequestMalformed("policy allows no profiles".into()));
        }
        if max_validity_days == 0 {
            return Err(Error::RequestMalformed("max_validity_days must be positive".into()));
        }
        let title = title.into();
        Ok(Self {
            document_text: format!("Certification practice statement for {title}."),
            rfc2527_sections: standard_outline(),
            policy_id,
            title,
            allowed_profiles,
            max_validity_days,
        })
    }

    /// Policy of the national root: subordinate authorities and
    /// infrastructure devices only.
    pub fn root_default() -> Self {
        Self::new(
            "pol-root",
            "Root Authority Policy",
            [CertificateProfile::Ca, CertificateProfile::Device],
            7300,
        )
        .expect("static policy is well-formed")
    }

    /// Policy of the population authority: resident certificates plus
    /// virtually hosted subordinates.
    pub fn population_default() -> Self {
        Self::new(
            "pol-population",
            "Population Authority Policy",
            [
                CertificateProfile::Ca,
                CertificateProfile::IdentityAuth,
                CertificateProfile::Signature,
                CertificateProfile::Encryption,
                CertificateProfile::Attribute,
            ],
            3650,
        )
        .expect("static policy is well-formed")
    }

    /// Policy granted to provisioned subordinates: resident certificates
    /// only, no further delegation.
    pub fn subordinate_default(policy_id: impl Into<String>) -> Self {
        Self::new(
            policy_id,
            "Subordinate Authority Policy",
            [
                CertificateProfile::IdentityAuth,
                CertificateProfile::Signature,
                CertificateProfile::Encryption,
                CertificateProfile::Attribute,
            ],
            1825,
        )
        .expect("static policy is well-formed")
    }

    /// Checks one issuance request against this policy.
    pub fn permit(&self, profile: CertificateProfile, not_before: u64, not_after: u64) -> Result<()> {
        if !self.allowed_profiles.contains(&profile) {
            return Err(Error::PolicyViolation(format!(
                "policy {} does not allow profile {}",
                self.policy_id,
                profile.token()
            )));
        }
        let window = not_after.saturating_sub(not_before);
        let max = u64::from(self.max_validity_days) * SECONDS_PER_DAY;
        if window > max {
            return Err(Error::PolicyViolation(format!(
                "validity window {window}s exceeds policy {} cap of {} days",
                self.policy_id, self.max_validity_days
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let profiles: Vec<Vec<u8>> = self
            .allowed_profiles
            .iter()
            .map(|p| p.token().as_bytes().to_vec())
            .collect();
        RecordBuilder::new()
            .str("policy_id", &self.policy_id)
            .str("title", &self.title)
            .list("allowed_profiles", &profiles)
            .u64("max_validity_days", u64::from(self.max_validity_days))
            .str("document_text", &self.document_text)
            .map("rfc2527_sections", &self.rfc2527_sections)
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let view = RecordView::parse(bytes)?;
        let mut allowed_profiles = BTreeSet::new();
        for item in view.list("allowed_profiles")? {
            let token = String::from_utf8(item)
                .map_err(|_| Error::MalformedEncoding("profile token not UTF-8".into()))?;
            allowed_profiles.insert(CertificateProfile::from_token(&token)?);
        }
        Ok(Self {
            policy_id: view.str("policy_id")?,
            title: view.str("title")?,
            allowed_profiles,
            max_validity_days: view
                .u64("max_validity_days")?
                .try_into()
                .map_err(|_| Error::MalformedEncoding("max_validity_days out of range".into()))?,
            document_text: view.str("document_text")?,
            rfc2527_sections: view.map("rfc2527_sections")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_full_cpcs_outline() {
        for policy in [
            CertificatePolicy::root_default(),
            CertificatePolicy::population_default(),
            CertificatePolicy::subordinate_default("pol-sub"),
        ] {
            assert_eq!(policy.rfc2527_sections.len(), 8);
            assert_eq!(policy.rfc2527_sections["1"], "Introduction");
            assert!(!policy.document_text.is_empty());
        }
    }

    #[test]
    fn root_policy_rejects_resident_profiles() {
        let policy = CertificatePolicy::root_default();
        assert!(policy.permit(CertificateProfile::Ca, 0, 1000).is_ok());
        assert!(policy.permit(CertificateProfile::Device, 0, 1000).is_ok());
        let err = policy.permit(CertificateProfile::IdentityAuth, 0, 1000).unwrap_err();
        assert_eq!(err.code(), "policy-violation");
    }

    #[test]
    fn validity_cap_is_enforced_in_seconds() {
        let policy = CertificatePolicy::new("p", "t", [CertificateProfile::Signature], 10).unwrap();
        let cap = 10 * SECONDS_PER_DAY;
        assert!(policy.permit(CertificateProfile::Signature, 100, 100 + cap).is_ok());
        let err = policy.permit(CertificateProfile::Signature, 100, 101 + cap).unwrap_err();
        assert_eq!(err.code(), "policy-violation");
    }

    #[test]
    fn constructor_rejects_degenerate_policies() {
        assert!(CertificatePolicy::new("", "t", [CertificateProfile::Ca], 1).is_err());
        assert!(CertificatePolicy::new("p", "t", [], 1).is_err());
        assert!(CertificatePolicy::new("p", "t", [CertificateProfile::Ca], 0).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let policy = CertificatePolicy::population_default();
        let decoded = CertificatePolicy::decode(&policy.encode()).unwrap();
        assert_eq!(decoded, policy);
    }
}
