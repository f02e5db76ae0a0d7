//! Certification-authority hierarchy.
//!
//! One root anchors a strict tree at most three levels deep:
//! root, then the population authority plus any subordinates, then end
//! entities. Subordinates come in two shapes:
//!
//! * externally operated: the root signs a CA certificate over a public
//!   key the requester holds elsewhere. No private key ever enters a local
//!   container; this system can never issue on that authority's behalf.
//! * virtual: a partition on the population authority's host. It gets a
//!   fresh key container (same host, new container id, new keys) and a CA
//!   certificate signed by the population authority, giving its leaves a
//!   four-certificate chain to the root.
//!
//! Commands are split into a planning half (read-only, may draw
//! randomness, performs every check) and an applying half (deterministic
//! insertion, no randomness). Replay after a crash re-runs only the
//! applying half, so an event journal built from plans reconstructs the
//! same state byte for byte.

use std::collections::BTreeMap;

use rand::RngCore;

use crate::cert::{sign_certificate, Certificate, CertificateProfile, TbsCertificate};
use crate::clock::SECONDS_PER_DAY;
use crate::encoding::{RecordBuilder, RecordView};
use crate::error::Error;
use crate::path::{CertificateSource, RevocationSource, TrustAnchorSet};
use crate::policy::CertificatePolicy;
use crate::revocation::{
    certificate_status, CertStatus, RevocationEntry, RevocationReason, RevocationState,
};
use crate::scheme::{KeyPair, SchemeRegistry};
use crate::seal;
use crate::Result;

pub const CA_KEY_LABEL: &str = "ca";
pub const ESCROW_SEAL_LABEL: &[u8] = b"escrow-wrap";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaKind {
    Root,
    Population,
    SubordinateExternal,
    SubordinateVirtual,
}

impl CaKind {
    pub fn token(&self) -> &'static str {
        match self {
            CaKind::Root => "root",
            CaKind::Population => "population",
            CaKind::SubordinateExternal => "subordinate_external",
            CaKind::SubordinateVirtual => "subordinate_virtual",
        }
    }

    pub fn from_token(token: &str) -> Result<Self> {
        match token {
            "root" => Ok(CaKind::Root),
            "population" => Ok(CaKind::Population),
            "subordinate_external" => Ok(CaKind::SubordinateExternal),
            "subordinate_virtual" => Ok(CaKind::SubordinateVirtual),
            other => Err(Error::MalformedEncoding(format!("unknown ca kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaStatus {
    Active,
    Suspended,
}

impl CaStatus {
    pub fn token(&self) -> &'static str {
        match self {
            CaStatus::Active => "active",
            CaStatus::Suspended => "suspended",
        }
    }

    pub fn from_token(token: &str) -> Result<Self> {
        match token {
            "active" => Ok(CaStatus::Active),
            "suspended" => Ok(CaStatus::Suspended),
            other => Err(Error::MalformedEncoding(format!("unknown ca status {other:?}"))),
        }
    }
}

/// Key material bound to one security-module partition. A container
/// belongs to exactly one authority; a virtual subordinate shares its
/// host's hardware but never its container.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyContainer {
    pub container_id: String,
    pub host_id: String,
    keys: BTreeMap<String, KeyPair>,
    wrap_key: [u8; 32],
}

impl std::fmt::Debug for KeyContainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyContainer")
            .field("container_id", &self.container_id)
            .field("host_id", &self.host_id)
            .field("keys", &self.keys.keys().collect::<Vec<_>>())
            .field("wrap_key", &"<redacted>")
            .finish()
    }
}

impl KeyContainer {
    pub fn new(container_id: impl Into<String>, host_id: impl Into<String>, rng: &mut dyn RngCore) -> Self {
        let mut wrap_key = [0u8; 32];
        rng.fill_bytes(&mut wrap_key);
        Self { container_id: container_id.into(), host_id: host_id.into(), keys: BTreeMap::new(), wrap_key }
    }

    pub fn insert_key(&mut self, label: &str, pair: KeyPair) -> Result<()> {
        if self.keys.contains_key(label) {
            return Err(Error::IdConflict(format!(
                "container {} already holds a key labelled {label:?}",
                self.container_id
            )));
        }
        self.keys.insert(label.to_string(), pair);
        Ok(())
    }

    pub fn key(&self, label: &str) -> Option<&KeyPair> {
        self.keys.get(label)
    }

    pub fn key_count(&self) -> usize {
        self.keys.len()
    }

    pub fn wrap_key(&self) -> &[u8; 32] {
        &self.wrap_key
    }

    /// Secret-bearing encoding; persistence must seal it.
    pub fn encode_secret(&self) -> Vec<u8> {
        let mut keys = BTreeMap::new();
        for (label, pair) in &self.keys {
            keys.insert(label.clone(), pair.encode_secret());
        }
        let mut builder = RecordBuilder::new()
            .str("container_id", &self.container_id)
            .str("host_id", &self.host_id)
            .raw("wrap_key", self.wrap_key.to_vec());
        let items: Vec<Vec<u8>> = keys
            .iter()
            .map(|(label, key)| RecordBuilder::new().str("label", label).raw("pair", key.clone()).finish())
            .collect();
        builder = builder.list("keys", &items);
        builder.finish()
    }

    pub fn decode_secret(bytes: &[u8]) -> Result<Self> {
        let view = RecordView::parse(bytes)?;
        let mut keys = BTreeMap::new();
        for item in view.list("keys")? {
            let entry = RecordView::parse(&item)?;
            keys.insert(entry.str("label")?, KeyPair::decode_secret(entry.raw("pair")?)?);
        }
        let wrap: [u8; 32] = view
            .raw("wrap_key")?
            .try_into()
            .map_err(|_| Error::MalformedEncoding("wrap key must be 32 bytes".into()))?;
        Ok(Self {
            container_id: view.str("container_id")?,
            host_id: view.str("host_id")?,
            keys,
            wrap_key: wrap,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertificationAuthority {
    pub ca_id: String,
    pub kind: CaKind,
    /// Absent exactly for externally operated subordinates.
    pub key_container_id: Option<String>,
    pub certificate: Certificate,
    pub policy_id: String,
    pub status: CaStatus,
    pub parent_ca_id: Option<String>,
}

impl CertificationAuthority {
    pub fn encode(&self) -> Vec<u8> {
        RecordBuilder::new()
            .str("ca_id", &self.ca_id)
            .str("kind", self.kind.token())
            .opt_raw("key_container_id", self.key_container_id.as_deref().map(str::as_bytes))
            .raw("certificate", self.certificate.encode())
            .str("policy_id", &self.policy_id)
            .str("status", self.status.token())
            .opt_raw("parent_ca_id", self.parent_ca_id.as_deref().map(str::as_bytes))
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let view = RecordView::parse(bytes)?;
        let opt_str = |name: &str| -> Result<Option<String>> {
            view.opt_raw(name)
                .map(|raw| {
                    String::from_utf8(raw.to_vec())
                        .map_err(|_| Error::MalformedEncoding(format!("field {name} not UTF-8")))
                })
                .transpose()
        };
        Ok(Self {
            ca_id: view.str("ca_id")?,
            kind: CaKind::from_token(&view.str("kind")?)?,
            key_container_id: opt_str("key_container_id")?,
            certificate: Certificate::decode(view.raw("certificate")?)?,
            policy_id: view.str("policy_id")?,
            status: CaStatus::from_token(&view.str("status")?)?,
            parent_ca_id: opt_str("parent_ca_id")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EscrowRecord {
    pub certificate_serial: u64,
    pub issuer_id: String,
    pub wrapped_private_key: Vec<u8>,
    pub wrap_key_label: String,
    pub created_at: u64,
}

impl EscrowRecord {
    pub fn encode(&self) -> Vec<u8> {
        RecordBuilder::new()
            .u64("certificate_serial", self.certificate_serial)
            .str("issuer_id", &self.issuer_id)
            .raw("wrapped_private_key", self.wrapped_private_key.clone())
            .str("wrap_key_label", &self.wrap_key_label)
            .u64("created_at", self.created_at)
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let view = RecordView::parse(bytes)?;
        Ok(Self {
            certificate_serial: view.u64("certificate_serial")?,
            issuer_id: view.str("issuer_id")?,
            wrapped_private_key: view.raw("wrapped_private_key")?.to_vec(),
            wrap_key_label: view.str("wrap_key_label")?,
            created_at: view.u64("created_at")?,
        })
    }
}

/// Everything the system tracks for one authority.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaRecord {
    pub authority: CertificationAuthority,
    pub container: Option<KeyContainer>,
    pub issued: BTreeMap<u64, Certificate>,
    pub next_serial: u64,
    pub escrow: BTreeMap<u64, EscrowRecord>,
    pub revocation: RevocationState,
}

impl CaRecord {
    pub fn signing_key(&self) -> Result<&KeyPair> {
        self.container
            .as_ref()
            .and_then(|c| c.key(CA_KEY_LABEL))
            .ok_or_else(|| {
                Error::Unauthorized(format!(
                    "authority {} holds no local signing key",
                    self.authority.ca_id
                ))
            })
    }
}

// ---- Plans ----

/// Output of planning a new authority: the record to insert plus the
/// serial its certificate consumed from the signer.
#[derive(Debug, Clone)]
pub struct NewCaPlan {
    pub record: CaRecord,
    pub policy: CertificatePolicy,
    /// Which authority's issued index also gains the certificate; the root
    /// itself for a self-signed root.
    pub signer_id: String,
}

#[derive(Debug, Clone)]
pub struct IssuePlan {
    pub issuer_id: String,
    pub certificate: Certificate,
    pub escrow: Option<EscrowRecord>,
    /// Present exactly when the plan escrowed a generated pair; handed to
    /// the requester once and never stored unwrapped.
    pub generated: Option<KeyPair>,
}

#[derive(Debug, Clone)]
pub enum KeySource {
    /// Subject supplies its public half; the private key stays wherever the
    /// subject keeps it.
    Public { public_key: Vec<u8>, scheme_id: String, key_length_bits: u32 },
    /// Authority generates the pair and escrows the private half. Only
    /// encryption-profile requests may ask for this.
    GenerateEscrowed { scheme_id: String, key_length_bits: u32 },
}

#[derive(Debug, Clone)]
pub struct IssueRequest {
    pub subject_id: String,
    pub profile: CertificateProfile,
    pub key_source: KeySource,
    pub role_attributes: Option<BTreeMap<String, String>>,
    pub validity_days: u32,
}

/// The authority tree plus registered certificate policies.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Hierarchy {
    cas: BTreeMap<String, CaRecord>,
    policies: BTreeMap<String, CertificatePolicy>,
    root_id: Option<String>,
}

impl Hierarchy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn root(&self) -> Option<&CaRecord> {
        self.root_id.as_ref().and_then(|id| self.cas.get(id))
    }

    pub fn ca(&self, ca_id: &str) -> Option<&CaRecord> {
        self.cas.get(ca_id)
    }

    pub fn ca_mut(&mut self, ca_id: &str) -> Option<&mut CaRecord> {
        self.cas.get_mut(ca_id)
    }

    pub fn require_ca(&self, ca_id: &str) -> Result<&CaRecord> {
        self.cas.get(ca_id).ok_or_else(|| Error::UnknownCa(ca_id.to_string()))
    }

    pub fn ca_ids(&self) -> impl Iterator<Item = &str> {
        self.cas.keys().map(String::as_str)
    }

    pub fn records(&self) -> impl Iterator<Item = &CaRecord> {
        self.cas.values()
    }

    pub fn policy(&self, policy_id: &str) -> Option<&CertificatePolicy> {
        self.policies.get(policy_id)
    }

    pub fn policies(&self) -> impl Iterator<Item = &CertificatePolicy> {
        self.policies.values()
    }

    /// Registers a policy document. Re-registering identical content is a
    /// no-op; conflicting content under the same id is refused.
    pub fn register_policy(&mut self, policy: CertificatePolicy) -> Result<bool> {
        match self.policies.get(&policy.policy_id) {
            Some(existing) if *existing == policy => Ok(false),
            Some(_) => Err(Error::IdConflict(format!(
                "policy {} already registered with different content",
                policy.policy_id
            ))),
            None => {
                self.policies.insert(policy.policy_id.clone(), policy);
                Ok(true)
            }
        }
    }

    pub fn trust_anchors(&self) -> TrustAnchorSet {
        let mut anchors = TrustAnchorSet::new();
        if let Some(root) = self.root() {
            anchors.add(
                root.authority.ca_id.clone(),
                root.authority.certificate.tbs.public_key.clone(),
                root.authority.certificate.tbs.scheme_id.clone(),
            );
        }
        anchors
    }

    fn require_active(&self, ca_id: &str) -> Result<&CaRecord> {
        let record = self.require_ca(ca_id)?;
        if record.authority.status == CaStatus::Suspended {
            return Err(Error::CaSuspended(ca_id.to_string()));
        }
        Ok(record)
    }

    fn check_fresh_id(&self, ca_id: &str) -> Result<()> {
        if self.cas.contains_key(ca_id) {
            return Err(Error::IdConflict(format!("authority id {ca_id} already in use")));
        }
        Ok(())
    }

    fn required_policy(&self, policy_id: &str) -> Result<&CertificatePolicy> {
        self.policies.get(policy_id).ok_or_else(|| {
            Error::PolicyViolation(format!("policy {policy_id} is not registered"))
        })
    }

    // ---- Planning ----

    pub fn plan_init_root(
        &self,
        ca_id: &str,
        scheme_id: &str,
        key_length_bits: u32,
        policy: &CertificatePolicy,
        host_id: &str,
        validity_days: u32,
        at: u64,
        registry: &SchemeRegistry,
        rng: &mut dyn RngCore,
    ) -> Result<NewCaPlan> {
        if self.root_id.is_some() {
            return Err(Error::RootExists);
        }
        self.check_fresh_id(ca_id)?;
        let not_after = at + u64::from(validity_days) * SECONDS_PER_DAY;
        policy.permit(CertificateProfile::Ca, at, not_after)?;
        let pair = registry.generate_key_pair(scheme_id, key_length_bits, rng)?;
        let mut container = KeyContainer::new(format!("kc-{ca_id}"), host_id, rng);
        let tbs = TbsCertificate {
            serial: 1,
            subject_id: ca_id.to_string(),
            issuer_id: ca_id.to_string(),
            profile: CertificateProfile::Ca,
            public_key: pair.public_key.clone(),
            scheme_id: pair.scheme_id.clone(),
            key_length_bits,
            not_before: at,
            not_after,
            policy_id: policy.policy_id.clone(),
            role_attributes: None,
        };
        let certificate = sign_certificate(tbs, &pair, registry)?;
        container.insert_key(CA_KEY_LABEL, pair)?;
        let authority = CertificationAuthority {
            ca_id: ca_id.to_string(),
            kind: CaKind::Root,
            key_container_id: Some(container.container_id.clone()),
            certificate: certificate.clone(),
            policy_id: policy.policy_id.clone(),
            status: CaStatus::Active,
            parent_ca_id: None,
        };
        let mut issued = BTreeMap::new();
        issued.insert(1, certificate);
        Ok(NewCaPlan {
            record: CaRecord {
                authority,
                container: Some(container),
                issued,
                next_serial: 2,
                escrow: BTreeMap::new(),
                revocation: RevocationState::new(ca_id),
            },
            policy: policy.clone(),
            signer_id: ca_id.to_string(),
        })
    }

    fn plan_subordinate(
        &self,
        parent_id: &str,
        ca_id: &str,
        kind: CaKind,
        scheme_id: &str,
        key_length_bits: u32,
        policy: &CertificatePolicy,
        host_id: Option<&str>,
        validity_days: u32,
        at: u64,
        registry: &SchemeRegistry,
        rng: &mut dyn RngCore,
    ) -> Result<NewCaPlan> {
        let parent = self.require_active(parent_id)?;
        self.check_fresh_id(ca_id)?;
        let parent_policy = self.required_policy(&parent.authority.policy_id)?;
        let not_after = at + u64::from(validity_days) * SECONDS_PER_DAY;
        parent_policy.permit(CertificateProfile::Ca, at, not_after)?;
        let parent_key = parent.signing_key()?;
        let pair = registry.generate_key_pair(scheme_id, key_length_bits, rng)?;
        let host = host_id
            .map(str::to_string)
            .or_else(|| parent.container.as_ref().map(|c| c.host_id.clone()))
            .unwrap_or_else(|| format!("hsm-{ca_id}"));
        let mut container = KeyContainer::new(format!("kc-{ca_id}"), host, rng);
        let tbs = TbsCertificate {
            serial: parent.next_serial,
            subject_id: ca_id.to_string(),
            issuer_id: parent_id.to_string(),
            profile: CertificateProfile::Ca,
            public_key: pair.public_key.clone(),
            scheme_id: pair.scheme_id.clone(),
            key_length_bits,
            not_before: at,
            not_after,
            policy_id: parent_policy.policy_id.clone(),
            role_attributes: None,
        };
        let certificate = sign_certificate(tbs, parent_key, registry)?;
        container.insert_key(CA_KEY_LABEL, pair)?;
        let authority = CertificationAuthority {
            ca_id: ca_id.to_string(),
            kind,
            key_container_id: Some(container.container_id.clone()),
            certificate,
            policy_id: policy.policy_id.clone(),
            status: CaStatus::Active,
            parent_ca_id: Some(parent_id.to_string()),
        };
        Ok(NewCaPlan {
            record: CaRecord {
                authority,
                container: Some(container),
                issued: BTreeMap::new(),
                next_serial: 1,
                escrow: BTreeMap::new(),
                revocation: RevocationState::new(ca_id),
            },
            policy: policy.clone(),
            signer_id: parent_id.to_string(),
        })
    }

    pub fn plan_init_population(
        &self,
        root_id: &str,
        ca_id: &str,
        scheme_id: &str,
        key_length_bits: u32,
        policy: &CertificatePolicy,
        host_id: &str,
        validity_days: u32,
        at: u64,
        registry: &SchemeRegistry,
        rng: &mut dyn RngCore,
    ) -> Result<NewCaPlan> {
        let root = self.require_ca(root_id)?;
        if root.authority.kind != CaKind::Root {
            return Err(Error::PolicyViolation(format!(
                "{root_id} is not the root authority"
            )));
        }
        self.plan_subordinate(
            root_id,
            ca_id,
            CaKind::Population,
            scheme_id,
            key_length_bits,
            policy,
            Some(host_id),
            validity_days,
            at,
            registry,
            rng,
        )
    }

    /// Option 1: the requester runs its own infrastructure; the root signs
    /// over a supplied public key and no container is created here.
    pub fn plan_certify_external(
        &self,
        root_id: &str,
        ca_id: &str,
        public_key: Vec<u8>,
        scheme_id: &str,
        key_length_bits: u32,
        policy: &CertificatePolicy,
        validity_days: u32,
        at: u64,
        registry: &SchemeRegistry,
    ) -> Result<NewCaPlan> {
        let root = self.require_active(root_id)?;
        if root.authority.kind != CaKind::Root {
            return Err(Error::PolicyViolation(format!("{root_id} is not the root authority")));
        }
        self.check_fresh_id(ca_id)?;
        registry.get(scheme_id)?;
        let root_policy = self.required_policy(&root.authority.policy_id)?;
        let not_after = at + u64::from(validity_days) * SECONDS_PER_DAY;
        root_policy.permit(CertificateProfile::Ca, at, not_after)?;
        let tbs = TbsCertificate {
            serial: root.next_serial,
            subject_id: ca_id.to_string(),
            issuer_id: root_id.to_string(),
            profile: CertificateProfile::Ca,
            public_key,
            scheme_id: scheme_id.to_string(),
            key_length_bits,
            not_before: at,
            not_after,
            policy_id: root_policy.policy_id.clone(),
            role_attributes: None,
        };
        let certificate = sign_certificate(tbs, root.signing_key()?, registry)?;
        let authority = CertificationAuthority {
            ca_id: ca_id.to_string(),
            kind: CaKind::SubordinateExternal,
            key_container_id: None,
            certificate,
            policy_id: policy.policy_id.clone(),
            status: CaStatus::Active,
            parent_ca_id: Some(root_id.to_string()),
        };
        Ok(NewCaPlan {
            record: CaRecord {
                authority,
                container: None,
                issued: BTreeMap::new(),
                next_serial: 1,
                escrow: BTreeMap::new(),
                revocation: RevocationState::new(ca_id),
            },
            policy: policy.clone(),
            signer_id: root_id.to_string(),
        })
    }

    /// Option 2: a virtual partition on the population authority's host.
    pub fn plan_provision_virtual(
        &self,
        population_id: &str,
        ca_id: &str,
        scheme_id: &str,
        key_length_bits: u32,
        policy: &CertificatePolicy,
        validity_days: u32,
        at: u64,
        registry: &SchemeRegistry,
        rng: &mut dyn RngCore,
    ) -> Result<NewCaPlan> {
        let parent = self.require_ca(population_id)?;
        if parent.authority.kind != CaKind::Population {
            return Err(Error::PolicyViolation(format!(
                "virtual subordinates are partitions of the population authority, not {population_id}"
            )));
        }
        self.plan_subordinate(
            population_id,
            ca_id,
            CaKind::SubordinateVirtual,
            scheme_id,
            key_length_bits,
            policy,
            None,
            validity_days,
            at,
            registry,
            rng,
        )
    }

    pub fn plan_issue(
        &self,
        issuer_id: &str,
        request: &IssueRequest,
        at: u64,
        registry: &SchemeRegistry,
        rng: &mut dyn RngCore,
    ) -> Result<IssuePlan> {
        let issuer = self.require_active(issuer_id)?;
        let policy = self.required_policy(&issuer.authority.policy_id)?;
        let not_after = at + u64::from(request.validity_days) * SECONDS_PER_DAY;
        policy.permit(request.profile, at, not_after)?;
        if request.role_attributes.is_some() && request.profile != CertificateProfile::Attribute {
            return Err(Error::RequestMalformed(format!(
                "role attributes are only carried by attribute certificates, not {}",
                request.profile.token()
            )));
        }
        let issuer_key = issuer.signing_key()?;
        let (public_key, scheme_id, key_length_bits, generated) = match &request.key_source {
            KeySource::Public { public_key, scheme_id, key_length_bits } => {
                registry.get(scheme_id)?;
                if public_key.is_empty() {
                    return Err(Error::RequestMalformed("empty subject public key".into()));
                }
                (public_key.clone(), scheme_id.clone(), *key_length_bits, None)
            }
            KeySource::GenerateEscrowed { scheme_id, key_length_bits } => {
                if request.profile != CertificateProfile::Encryption {
                    return Err(Error::RequestMalformed(format!(
                        "key escrow is reserved for encryption certificates, not {}",
                        request.profile.token()
                    )));
                }
                let pair = registry.generate_key_pair(scheme_id, *key_length_bits, rng)?;
                (pair.public_key.clone(), pair.scheme_id.clone(), *key_length_bits, Some(pair))
            }
        };
        let serial = issuer.next_serial;
        let tbs = TbsCertificate {
            serial,
            subject_id: request.subject_id.clone(),
            issuer_id: issuer_id.to_string(),
            profile: request.profile,
            public_key,
            scheme_id,
            key_length_bits,
            not_before: at,
            not_after,
            policy_id: policy.policy_id.clone(),
            role_attributes: request.role_attributes.clone(),
        };
        let certificate = sign_certificate(tbs, issuer_key, registry)?;
        let escrow = match &generated {
            Some(pair) => {
                let container = issuer.container.as_ref().expect("signing key implies container");
                let wrapped = seal::seal(
                    container.wrap_key(),
                    rng,
                    &pair.encode_secret(),
                    ESCROW_SEAL_LABEL,
                )?;
                Some(EscrowRecord {
                    certificate_serial: serial,
                    issuer_id: issuer_id.to_string(),
                    wrapped_private_key: wrapped,
                    wrap_key_label: container.container_id.clone(),
                    created_at: at,
                })
            }
            None => None,
        };
        Ok(IssuePlan { issuer_id: issuer_id.to_string(), certificate, escrow, generated })
    }

    // ---- Applying ----

    /// Installs a planned authority. The signer's issued index gains the
    /// new certificate and its serial counter advances.
    pub fn apply_new_ca(&mut self, plan: NewCaPlan) -> Result<()> {
        let NewCaPlan { record, policy, signer_id } = plan;
        let ca_id = record.authority.ca_id.clone();
        self.check_fresh_id(&ca_id)?;
        self.register_policy(policy)?;
        let cert = record.authority.certificate.clone();
        if signer_id == ca_id {
            // Self-signed root: its own issued index already carries serial 1.
            self.root_id = Some(ca_id.clone());
            self.cas.insert(ca_id, record);
        } else {
            let signer = self
                .cas
                .get_mut(&signer_id)
                .ok_or_else(|| Error::UnknownCa(signer_id.clone()))?;
            signer.issued.insert(cert.serial(), cert);
            signer.next_serial += 1;
            self.cas.insert(ca_id, record);
        }
        Ok(())
    }

    pub fn apply_issue(&mut self, plan: &IssuePlan) -> Result<()> {
        let issuer = self
            .cas
            .get_mut(&plan.issuer_id)
            .ok_or_else(|| Error::UnknownCa(plan.issuer_id.clone()))?;
        let serial = plan.certificate.serial();
        if issuer.issued.contains_key(&serial) {
            return Err(Error::DuplicateSerial(format!("{} serial {serial}", plan.issuer_id)));
        }
        issuer.issued.insert(serial, plan.certificate.clone());
        issuer.next_serial = issuer.next_serial.max(serial + 1);
        if let Some(escrow) = &plan.escrow {
            issuer.escrow.insert(serial, escrow.clone());
        }
        Ok(())
    }

    pub fn apply_revocation(&mut self, ca_id: &str, entry: RevocationEntry) -> Result<()> {
        let record = self.cas.get_mut(ca_id).ok_or_else(|| Error::UnknownCa(ca_id.to_string()))?;
        record.revocation.restore_entry(entry);
        Ok(())
    }

    pub fn set_status(&mut self, ca_id: &str, status: CaStatus) -> Result<()> {
        let record = self.cas.get_mut(ca_id).ok_or_else(|| Error::UnknownCa(ca_id.to_string()))?;
        record.authority.status = status;
        Ok(())
    }

    // ---- One-step commands ----

    pub fn init_root(
        &mut self,
        ca_id: &str,
        scheme_id: &str,
        key_length_bits: u32,
        policy: &CertificatePolicy,
        host_id: &str,
        validity_days: u32,
        at: u64,
        registry: &SchemeRegistry,
        rng: &mut dyn RngCore,
    ) -> Result<Certificate> {
        let plan = self.plan_init_root(
            ca_id, scheme_id, key_length_bits, policy, host_id, validity_days, at, registry, rng,
        )?;
        let cert = plan.record.authority.certificate.clone();
        self.apply_new_ca(plan)?;
        Ok(cert)
    }

    pub fn init_population(
        &mut self,
        root_id: &str,
        ca_id: &str,
        scheme_id: &str,
        key_length_bits: u32,
        policy: &CertificatePolicy,
        host_id: &str,
        validity_days: u32,
        at: u64,
        registry: &SchemeRegistry,
        rng: &mut dyn RngCore,
    ) -> Result<Certificate> {
        let plan = self.plan_init_population(
            root_id, ca_id, scheme_id, key_length_bits, policy, host_id, validity_days, at,
            registry, rng,
        )?;
        let cert = plan.record.authority.certificate.clone();
        self.apply_new_ca(plan)?;
        Ok(cert)
    }

    pub fn certify_external_sub(
        &mut self,
        root_id: &str,
        ca_id: &str,
        public_key: Vec<u8>,
        scheme_id: &str,
        key_length_bits: u32,
        policy: &CertificatePolicy,
        validity_days: u32,
        at: u64,
        registry: &SchemeRegistry,
    ) -> Result<Certificate> {
        let plan = self.plan_certify_external(
            root_id, ca_id, public_key, scheme_id, key_length_bits, policy, validity_days, at,
            registry,
        )?;
        let cert = plan.record.authority.certificate.clone();
        self.apply_new_ca(plan)?;
        Ok(cert)
    }

    pub fn provision_virtual_sub(
        &mut self,
        population_id: &str,
        ca_id: &str,
        scheme_id: &str,
        key_length_bits: u32,
        policy: &CertificatePolicy,
        validity_days: u32,
        at: u64,
        registry: &SchemeRegistry,
        rng: &mut dyn RngCore,
    ) -> Result<Certificate> {
        let plan = self.plan_provision_virtual(
            population_id, ca_id, scheme_id, key_length_bits, policy, validity_days, at, registry,
            rng,
        )?;
        let cert = plan.record.authority.certificate.clone();
        self.apply_new_ca(plan)?;
        Ok(cert)
    }

    pub fn issue_end_entity(
        &mut self,
        issuer_id: &str,
        request: &IssueRequest,
        at: u64,
        registry: &SchemeRegistry,
        rng: &mut dyn RngCore,
    ) -> Result<IssuePlan> {
        let plan = self.plan_issue(issuer_id, request, at, registry, rng)?;
        self.apply_issue(&plan)?;
        Ok(plan)
    }

    pub fn revoke(
        &mut self,
        issuer_id: &str,
        serial: u64,
        reason: RevocationReason,
        at: u64,
    ) -> Result<bool> {
        let record =
            self.cas.get_mut(issuer_id).ok_or_else(|| Error::UnknownCa(issuer_id.to_string()))?;
        let issued = record.issued.clone();
        record.revocation.revoke(serial, reason, at, &issued)
    }

    /// Unwraps an escrowed private key. Only encryption-profile serials
    /// issued with escrow have a record; everything else is not-escrowed.
    pub fn recover_escrowed_key(&self, issuer_id: &str, serial: u64) -> Result<KeyPair> {
        let record = self.require_ca(issuer_id)?;
        let escrow = record.escrow.get(&serial).ok_or(Error::NotEscrowed(serial))?;
        let container = record.container.as_ref().ok_or(Error::NotEscrowed(serial))?;
        let plain = seal::open(container.wrap_key(), &escrow.wrapped_private_key, ESCROW_SEAL_LABEL)?;
        KeyPair::decode_secret(&plain)
    }

    /// Steps from `ca_id` to the root, returning the path of authority ids
    /// (inclusive both ends).
    pub fn lineage(&self, ca_id: &str) -> Result<Vec<String>> {
        let mut path = vec![ca_id.to_string()];
        let mut current = self.require_ca(ca_id)?;
        while let Some(parent_id) = &current.authority.parent_ca_id {
            if path.contains(parent_id) {
                return Err(Error::PolicyViolation(format!("authority cycle through {parent_id}")));
            }
            path.push(parent_id.clone());
            current = self.require_ca(parent_id)?;
        }
        Ok(path)
    }
}

impl CertificateSource for Hierarchy {
    fn ca_certificate(&self, ca_id: &str) -> Option<Certificate> {
        self.cas.get(ca_id).map(|r| r.authority.certificate.clone())
    }
}

/// Revocation oracle answering straight from the in-process ledgers, the
/// way the online responder would answer over the wire. Certificates whose
/// issuer is not locally tracked come back unknown.
pub struct LedgerOracle<'a> {
    hierarchy: &'a Hierarchy,
    source: RevocationSource,
}

impl Hierarchy {
    pub fn ledger_oracle(&self, source: RevocationSource) -> LedgerOracle<'_> {
        LedgerOracle { hierarchy: self, source }
    }
}

impl crate::path::RevocationOracle for LedgerOracle<'_> {
    fn status(&mut self, cert: &Certificate, at: u64) -> Result<crate::path::RevStatus> {
        let Some(issuer) = self.hierarchy.ca(cert.issuer_id()) else {
            return Ok(crate::path::RevStatus::Unknown);
        };
        Ok(match certificate_status(cert.serial(), &issuer.issued, &issuer.revocation, at) {
            CertStatus::Good => crate::path::RevStatus::Good,
            CertStatus::Revoked { revoked_at } => crate::path::RevStatus::Revoked { at: revoked_at },
            CertStatus::Unknown => crate::path::RevStatus::Unknown,
        })
    }

    fn source(&self) -> RevocationSource {
        self.source
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::{build_certificate_path, validate_certificate_path, NoRevocationOracle, Verdict};
    use crate::policy;
    use crate::scheme::TEST_MAC;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const T0: u64 = 1_750_000_000;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(1234)
    }

    fn with_root_and_population() -> (Hierarchy, SchemeRegistry, ChaCha20Rng) {
        let reg = SchemeRegistry::builtin();
        let mut rng = rng();
        let mut h = Hierarchy::new();
        h.init_root("root", TEST_MAC, 2048, &policy::CertificatePolicy::root_default(), "hsm-root", 7300, T0, &reg, &mut rng)
            .unwrap();
        h.init_population(
            "root",
            "population",
            TEST_MAC,
            2048,
            &policy::CertificatePolicy::population_default(),
            "hsm-population",
            3650,
            T0,
            &reg,
            &mut rng,
        )
        .unwrap();
        (h, reg, rng)
    }

    fn auth_request(subject: &str, reg: &SchemeRegistry, rng: &mut ChaCha20Rng) -> (IssueRequest, KeyPair) {
        let pair = reg.generate_key_pair(TEST_MAC, 4096, rng).unwrap();
        let request = IssueRequest {
            subject_id: subject.into(),
            profile: CertificateProfile::IdentityAuth,
            key_source: KeySource::Public {
                public_key: pair.public_key.clone(),
                scheme_id: pair.scheme_id.clone(),
                key_length_bits: 4096,
            },
            role_attributes: None,
            validity_days: 365,
        };
        (request, pair)
    }

    #[test]
    fn root_is_self_signed_and_unique() {
        let (h, reg, mut rng) = with_root_and_population();
        let root = h.root().unwrap();
        assert!(root.authority.certificate.is_self_signed());
        assert_eq!(root.authority.certificate.tbs.key_length_bits, 2048);
        assert_eq!(root.authority.kind, CaKind::Root);
        let mut h2 = h.clone();
        let err = h2
            .init_root("root2", TEST_MAC, 2048, &policy::CertificatePolicy::root_default(), "h", 7300, T0, &reg, &mut rng)
            .unwrap_err();
        assert_eq!(err.code(), "root-exists");
    }

    #[test]
    fn population_chains_to_root_with_two_certificates() {
        let (h, _, _) = with_root_and_population();
        let pop_cert = h.ca("population").unwrap().authority.certificate.clone();
        let path = build_certificate_path(&pop_cert, &h, &h.trust_anchors()).unwrap();
        assert_eq!(path.chain.len(), 2);
        assert_eq!(path.chain[1].subject_id(), "root");
    }

    #[test]
    fn suspended_root_refuses_to_issue() {
        let (mut h, reg, mut rng) = with_root_and_population();
        h.set_status("root", CaStatus::Suspended).unwrap();
        let err = h
            .init_population(
                "root",
                "pop2",
                TEST_MAC,
                2048,
                &policy::CertificatePolicy::subordinate_default("pol-x"),
                "h",
                3650,
                T0,
                &reg,
                &mut rng,
            )
            .unwrap_err();
        assert_eq!(err.code(), "ca-suspended");
    }

    #[test]
    fn external_subordinate_holds_no_local_keys() {
        let (mut h, reg, mut rng) = with_root_and_population();
        let external_pair = reg.generate_key_pair(TEST_MAC, 2048, &mut rng).unwrap();
        let containers_before: usize =
            h.records().filter(|r| r.container.is_some()).count();
        h.certify_external_sub(
            "root",
            "egov",
            external_pair.public_key.clone(),
            TEST_MAC,
            2048,
            &policy::CertificatePolicy::subordinate_default("pol-egov"),
            1825,
            T0,
            &reg,
        )
        .unwrap();
        let record = h.ca("egov").unwrap();
        assert_eq!(record.authority.kind, CaKind::SubordinateExternal);
        assert!(record.container.is_none());
        assert!(record.authority.key_container_id.is_none());
        let containers_after: usize = h.records().filter(|r| r.container.is_some()).count();
        assert_eq!(containers_before, containers_after, "no new key pairs may appear locally");
        // The certificate still chains to the root like any subordinate's.
        let path =
            build_certificate_path(&record.authority.certificate, &h, &h.trust_anchors()).unwrap();
        assert_eq!(path.chain.len(), 2);
    }

    #[test]
    fn virtual_subordinate_shares_host_but_not_container() {
        let (mut h, reg, mut rng) = with_root_and_population();
        h.provision_virtual_sub(
            "population",
            "health",
            TEST_MAC,
            2048,
            &policy::CertificatePolicy::subordinate_default("pol-health"),
            1825,
            T0,
            &reg,
            &mut rng,
        )
        .unwrap();
        let pop = h.ca("population").unwrap().container.as_ref().unwrap();
        let sub = h.ca("health").unwrap().container.as_ref().unwrap();
        assert_eq!(pop.host_id, sub.host_id);
        assert_ne!(pop.container_id, sub.container_id);
        assert_eq!(sub.key_count(), 1, "fresh container carries only the subordinate's pair");
        assert_ne!(
            pop.key(CA_KEY_LABEL).unwrap().public_key,
            sub.key(CA_KEY_LABEL).unwrap().public_key
        );
        // Its parent is the population authority, not the root.
        assert_eq!(h.ca("health").unwrap().authority.parent_ca_id.as_deref(), Some("population"));
    }

    #[test]
    fn virtual_subordinate_leaf_has_four_certificate_chain() {
        let (mut h, reg, mut rng) = with_root_and_population();
        h.provision_virtual_sub(
            "population",
            "health",
            TEST_MAC,
            2048,
            &policy::CertificatePolicy::subordinate_default("pol-health"),
            1825,
            T0,
            &reg,
            &mut rng,
        )
        .unwrap();
        let (request, _) = auth_request("resident-1", &reg, &mut rng);
        let plan = h.issue_end_entity("health", &request, T0, &reg, &mut rng).unwrap();
        let path = build_certificate_path(&plan.certificate, &h, &h.trust_anchors()).unwrap();
        let subjects: Vec<&str> = path.chain.iter().map(|c| c.subject_id()).collect();
        assert_eq!(subjects, ["resident-1", "health", "population", "root"]);
        let mut oracle = h.ledger_oracle(crate::path::RevocationSource::Ocsp);
        let outcome =
            validate_certificate_path(&path, &h.trust_anchors(), &mut oracle, &reg, T0 + 10)
                .unwrap();
        assert_eq!(outcome.verdict, Verdict::Valid);
        // The same chain with revocation checking disabled cannot reach a
        // valid verdict; the best it can say is unknown.
        let outcome = validate_certificate_path(
            &path,
            &h.trust_anchors(),
            &mut NoRevocationOracle,
            &reg,
            T0 + 10,
        )
        .unwrap();
        assert_eq!(outcome.verdict, Verdict::Unknown);
    }

    #[test]
    fn duplicate_ca_id_is_refused() {
        let (mut h, reg, mut rng) = with_root_and_population();
        let err = h
            .provision_virtual_sub(
                "population",
                "population",
                TEST_MAC,
                2048,
                &policy::CertificatePolicy::subordinate_default("pol-dup"),
                1825,
                T0,
                &reg,
                &mut rng,
            )
            .unwrap_err();
        assert_eq!(err.code(), "id-conflict");
    }

    #[test]
    fn issuance_respects_policy_profiles_and_validity() {
        let (mut h, reg, mut rng) = with_root_and_population();
        // The root policy does not allow identity_auth.
        let (request, _) = auth_request("x", &reg, &mut rng);
        let err = h.issue_end_entity("root", &request, T0, &reg, &mut rng).unwrap_err();
        assert_eq!(err.code(), "policy-violation");
        // Population allows it but caps validity at 3650 days.
        let (mut request, _) = auth_request("x", &reg, &mut rng);
        request.validity_days = 4000;
        let err = h.issue_end_entity("population", &request, T0, &reg, &mut rng).unwrap_err();
        assert_eq!(err.code(), "policy-violation");
        request.validity_days = 365;
        let plan = h.issue_end_entity("population", &request, T0, &reg, &mut rng).unwrap();
        assert_eq!(plan.certificate.tbs.key_length_bits, 4096);
        assert_eq!(plan.certificate.serial(), 1, "population's own serial space starts at 1");
    }

    #[test]
    fn role_attributes_only_on_attribute_profile() {
        let (mut h, reg, mut rng) = with_root_and_population();
        let mut attrs = BTreeMap::new();
        attrs.insert("role".to_string(), "physician".to_string());
        let (mut request, _) = auth_request("dr-3", &reg, &mut rng);
        request.role_attributes = Some(attrs.clone());
        let err = h.issue_end_entity("population", &request, T0, &reg, &mut rng).unwrap_err();
        assert_eq!(err.code(), "request-malformed");
        request.profile = CertificateProfile::Attribute;
        let plan = h.issue_end_entity("population", &request, T0, &reg, &mut rng).unwrap();
        let decoded = Certificate::decode(&plan.certificate.encode()).unwrap();
        assert_eq!(decoded.tbs.role_attributes.as_ref(), Some(&attrs));
    }

    #[test]
    fn escrow_only_for_encryption_profile() {
        let (mut h, reg, mut rng) = with_root_and_population();
        let request = IssueRequest {
            subject_id: "r-1".into(),
            profile: CertificateProfile::Signature,
            key_source: KeySource::GenerateEscrowed { scheme_id: TEST_MAC.into(), key_length_bits: 4096 },
            role_attributes: None,
            validity_days: 365,
        };
        let err = h.issue_end_entity("population", &request, T0, &reg, &mut rng).unwrap_err();
        assert_eq!(err.code(), "request-malformed");
    }

    #[test]
    fn escrowed_key_recovers_byte_identical() {
        let (mut h, reg, mut rng) = with_root_and_population();
        let request = IssueRequest {
            subject_id: "r-1".into(),
            profile: CertificateProfile::Encryption,
            key_source: KeySource::GenerateEscrowed { scheme_id: TEST_MAC.into(), key_length_bits: 4096 },
            role_attributes: None,
            validity_days: 365,
        };
        let plan = h.issue_end_entity("population", &request, T0, &reg, &mut rng).unwrap();
        let handed_out = plan.generated.clone().unwrap();
        let serial = plan.certificate.serial();
        assert!(h.ca("population").unwrap().escrow.contains_key(&serial));
        let recovered = h.recover_escrowed_key("population", serial).unwrap();
        assert_eq!(recovered, handed_out);
        let again = h.recover_escrowed_key("population", serial).unwrap();
        assert_eq!(again, recovered, "recovery is deterministic");
        assert_eq!(recovered.public_key, plan.certificate.tbs.public_key);
    }

    #[test]
    fn recovery_of_unescrowed_serial_is_refused() {
        let (mut h, reg, mut rng) = with_root_and_population();
        let (request, _) = auth_request("r-2", &reg, &mut rng);
        let plan = h.issue_end_entity("population", &request, T0, &reg, &mut rng).unwrap();
        let err = h.recover_escrowed_key("population", plan.certificate.serial()).unwrap_err();
        assert_eq!(err.code(), "not-escrowed");
        let err = h.recover_escrowed_key("population", 9999).unwrap_err();
        assert_eq!(err.code(), "not-escrowed");
    }

    #[test]
    fn revocation_delegates_with_idempotence() {
        let (mut h, reg, mut rng) = with_root_and_population();
        let (request, _) = auth_request("r-9", &reg, &mut rng);
        let serial = h
            .issue_end_entity("population", &request, T0, &reg, &mut rng)
            .unwrap()
            .certificate
            .serial();
        assert!(h.revoke("population", serial, RevocationReason::CardLost, T0 + 5).unwrap());
        assert!(!h.revoke("population", serial, RevocationReason::CardLost, T0 + 9).unwrap());
        assert_eq!(
            h.revoke("population", 500, RevocationReason::CardLost, T0).unwrap_err().code(),
            "unknown-serial"
        );
    }

    #[test]
    fn lineage_reaches_root_within_three_steps_everywhere() {
        let (mut h, reg, mut rng) = with_root_and_population();
        h.provision_virtual_sub(
            "population",
            "health",
            TEST_MAC,
            2048,
            &policy::CertificatePolicy::subordinate_default("pol-health"),
            1825,
            T0,
            &reg,
            &mut rng,
        )
        .unwrap();
        let pair = reg.generate_key_pair(TEST_MAC, 2048, &mut rng).unwrap();
        h.certify_external_sub(
            "root",
            "egov",
            pair.public_key,
            TEST_MAC,
            2048,
            &policy::CertificatePolicy::subordinate_default("pol-egov"),
            1825,
            T0,
            &reg,
        )
        .unwrap();
        for id in ["root", "population", "health", "egov"] {
            let lineage = h.lineage(id).unwrap();
            assert!(lineage.len() <= 3, "{id} lineage {lineage:?}");
            assert_eq!(lineage.last().map(String::as_str), Some("root"));
        }
    }

    #[test]
    fn container_and_authority_records_round_trip() {
        let (h, _, _) = with_root_and_population();
        let record = h.ca("population").unwrap();
        let authority = CertificationAuthority::decode(&record.authority.encode()).unwrap();
        assert_eq!(authority, record.authority);
        let container = record.container.as_ref().unwrap();
        let decoded = KeyContainer::decode_secret(&container.encode_secret()).unwrap();
        assert_eq!(&decoded, container);
    }

    #[test]
    fn planning_does_not_mutate() {
        let (h, reg, mut rng) = with_root_and_population();
        let before = h.clone();
        let (request, _) = auth_request("r-1", &reg, &mut rng);
        h.plan_issue("population", &request, T0, &reg, &mut rng).unwrap();
        assert_eq!(h, before);
    }
}
