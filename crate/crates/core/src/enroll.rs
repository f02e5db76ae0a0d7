//! Enrollment: from a captured application to a personalized card with
//! its two certificates, gated by the registry screen.
//!
//! The screen consults three flags copied from the national databases: a
//! blacklist hit or a forensic database hit forces rejection; a civil
//! register match is recorded for the file but does not gate issuance
//! (first-time applicants legitimately have no civil record yet).

use std::collections::BTreeMap;

use rand::RngCore;

use crate::ca::{Hierarchy, IssuePlan, IssueRequest, KeySource};
use crate::card::moc::{FingerprintTemplate, DEFAULT_THRESHOLD};
use crate::card::{Card, Personalization, PublicDataFile};
use crate::cert::CertificateProfile;
use crate::encoding::{RecordBuilder, RecordView};
use crate::error::Error;
use crate::scheme::SchemeRegistry;
use crate::Result;

pub const USER_KEY_LENGTH_BITS: u32 = 4096;
pub const MAX_FINGERPRINTS: usize = 10;

// ---- Application lifecycle ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplicationStatus {
    Captured,
    Verified,
    Rejected,
    Issued,
}

impl ApplicationStatus {
    pub fn token(&self) -> &'static str {
        match self {
            ApplicationStatus::Captured => "captured",
            ApplicationStatus::Verified => "verified",
            ApplicationStatus::Rejected => "rejected",
            ApplicationStatus::Issued => "issued",
        }
    }

    pub fn from_token(token: &str) -> Result<Self> {
        Ok(match token {
            "captured" => ApplicationStatus::Captured,
            "verified" => ApplicationStatus::Verified,
            "rejected" => ApplicationStatus::Rejected,
            "issued" => ApplicationStatus::Issued,
            other => {
                return Err(Error::MalformedEncoding(format!(
                    "unknown application status {other:?}"
                )))
            }
        })
    }

    /// captured → verified → issued, with rejection possible from either
    /// pre-issuance state. Nothing leaves rejected or issued.
    pub fn may_become(&self, next: ApplicationStatus) -> bool {
        use ApplicationStatus::*;
        matches!(
            (self, next),
            (Captured, Verified) | (Verified, Issued) | (Captured, Rejected) | (Verified, Rejected)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrollmentApplication {
    pub applicant_id: String,
    pub biographic: BTreeMap<String, String>,
    pub portrait_hash: [u8; 32],
    pub fingerprints: Vec<FingerprintTemplate>,
    pub status: ApplicationStatus,
}

impl EnrollmentApplication {
    pub fn new(
        applicant_id: impl Into<String>,
        biographic: BTreeMap<String, String>,
        portrait_hash: [u8; 32],
        fingerprints: Vec<FingerprintTemplate>,
    ) -> Result<Self> {
        let applicant_id = applicant_id.into();
        if applicant_id.is_empty() {
            return Err(Error::RequestMalformed("empty applicant id".into()));
        }
        if fingerprints.is_empty() || fingerprints.len() > MAX_FINGERPRINTS {
            return Err(Error::RequestMalformed(format!(
                "between 1 and {MAX_FINGERPRINTS} fingerprints required, got {}",
                fingerprints.len()
            )));
        }
        Ok(Self {
            applicant_id,
            biographic,
            portrait_hash,
            fingerprints,
            status: ApplicationStatus::Captured,
        })
    }

    pub fn advance(&mut self, next: ApplicationStatus) -> Result<()> {
        if !self.status.may_become(next) {
            return Err(Error::RequestMalformed(format!(
                "application may not move from {} to {}",
                self.status.token(),
                next.token()
            )));
        }
        self.status = next;
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let prints: Vec<Vec<u8>> = self.fingerprints.iter().map(|t| t.encode()).collect();
        RecordBuilder::new()
            .str("applicant_id", &self.applicant_id)
            .map("biographic", &self.biographic)
            .raw("portrait_hash", self.portrait_hash.to_vec())
            .list("fingerprints", &prints)
            .str("status", self.status.token())
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let view = RecordView::parse(bytes)?;
        let portrait_hash: [u8; 32] = view
            .raw("portrait_hash")?
            .try_into()
            .map_err(|_| Error::MalformedEncoding("portrait hash must be 32 bytes".into()))?;
        let mut fingerprints = Vec::new();
        for item in view.list("fingerprints")? {
            fingerprints.push(FingerprintTemplate::decode(&item)?);
        }
        if fingerprints.is_empty() || fingerprints.len() > MAX_FINGERPRINTS {
            return Err(Error::MalformedEncoding("fingerprint count out of range".into()));
        }
        Ok(Self {
            applicant_id: view.str("applicant_id")?,
            biographic: view.map("biographic")?,
            portrait_hash,
            fingerprints,
            status: ApplicationStatus::from_token(&view.str("status")?)?,
        })
    }
}

// ---- Registry screen ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryRecord {
    pub applicant_id: String,
    pub civil_match: bool,
    pub forensic_match: bool,
    pub blacklist_hit: bool,
}

impl RegistryRecord {
    /// An applicant absent from every watch list.
    pub fn clear(applicant_id: impl Into<String>) -> Self {
        Self {
            applicant_id: applicant_id.into(),
            civil_match: false,
            forensic_match: false,
            blacklist_hit: false,
        }
    }

    pub fn clears_screen(&self) -> bool {
        !(self.blacklist_hit || self.forensic_match)
    }

    pub fn rejection_reason(&self) -> Option<String> {
        let mut hits = Vec::new();
        if self.blacklist_hit {
            hits.push("blacklist hit");
        }
        if self.forensic_match {
            hits.push("forensic database hit");
        }
        if hits.is_empty() {
            None
        } else {
            Some(hits.join(", "))
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        RecordBuilder::new()
            .str("applicant_id", &self.applicant_id)
            .bool("civil_match", self.civil_match)
            .bool("forensic_match", self.forensic_match)
            .bool("blacklist_hit", self.blacklist_hit)
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let view = RecordView::parse(bytes)?;
        Ok(Self {
            applicant_id: view.str("applicant_id")?,
            civil_match: view.bool("civil_match")?,
            forensic_match: view.bool("forensic_match")?,
            blacklist_hit: view.bool("blacklist_hit")?,
        })
    }
}

/// Screen results keyed by applicant, seeded from a fixture file. One
/// line per applicant: `<id> civil=<0|1> forensic=<0|1> blacklist=<0|1>`,
/// `#` starts a comment. Applicants without a line screen clear, which is
/// the normal first-enrollment case.
#[derive(Debug, Clone, Default)]
pub struct RegistryTable {
    records: BTreeMap<String, RegistryRecord>,
}

impl RegistryTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: RegistryRecord) {
        self.records.insert(record.applicant_id.clone(), record);
    }

    pub fn lookup(&self, applicant_id: &str) -> RegistryRecord {
        self.records
            .get(applicant_id)
            .cloned()
            .unwrap_or_else(|| RegistryRecord::clear(applicant_id))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut table = Self::new();
        for (number, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let applicant_id = parts.next().expect("non-empty line").to_string();
            let mut record = RegistryRecord::clear(applicant_id);
            for part in parts {
                let flag = match part.split_once('=') {
                    Some((name, "0")) => (name, false),
                    Some((name, "1")) => (name, true),
                    _ => {
                        return Err(Error::RequestMalformed(format!(
                            "registry fixture line {}: bad flag {part:?}",
                            number + 1
                        )))
                    }
                };
                match flag {
                    ("civil", v) => record.civil_match = v,
                    ("forensic", v) => record.forensic_match = v,
                    ("blacklist", v) => record.blacklist_hit = v,
                    (other, _) => {
                        return Err(Error::RequestMalformed(format!(
                            "registry fixture line {}: unknown flag {other:?}",
                            number + 1
                        )))
                    }
                }
            }
            table.insert(record);
        }
        Ok(table)
    }

    pub fn format(&self) -> String {
        let mut out = String::new();
        for record in self.records.values() {
            out.push_str(&format!(
                "{} civil={} forensic={} blacklist={}\n",
                record.applicant_id,
                record.civil_match as u8,
                record.forensic_match as u8,
                record.blacklist_hit as u8
            ));
        }
        out
    }
}

// ---- Issuance ----

/// Everything a successful enrollment produces. The PIN is handed to the
/// applicant once and exists nowhere else in plaintext; the card keeps
/// only its hash.
pub struct IssuedMaterial {
    pub card: Card,
    pub pin: String,
    pub sam_key_label: String,
    pub sam_master_key: [u8; 32],
    /// Both already applied to the hierarchy they were planned against.
    pub auth_plan: IssuePlan,
    pub sign_plan: IssuePlan,
}

impl std::fmt::Debug for IssuedMaterial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IssuedMaterial")
            .field("card", &self.card)
            .field("pin", &"<redacted>")
            .field("sam_key_label", &self.sam_key_label)
            .field("sam_master_key", &"<redacted>")
            .field("auth_serial", &self.auth_plan.certificate.serial())
            .field("sign_serial", &self.sign_plan.certificate.serial())
            .finish()
    }
}

#[derive(Debug)]
pub struct EnrollmentOutcome {
    pub application: EnrollmentApplication,
    pub registry_record: RegistryRecord,
    pub rejected_reason: Option<String>,
    pub issued: Option<IssuedMaterial>,
}

pub const BIOGRAPHIC_FILE: &str = "biographic";
pub const PORTRAIT_FILE: &str = "portrait";

pub fn encode_biographic_file(biographic: &BTreeMap<String, String>) -> Vec<u8> {
    RecordBuilder::new().map("biographic", biographic).finish()
}

pub fn decode_biographic_file(content: &[u8]) -> Result<BTreeMap<String, String>> {
    RecordView::parse(content)?.map("biographic")
}

fn random_pin(rng: &mut dyn RngCore) -> String {
    format!("{:06}", rng.next_u32() % 1_000_000)
}

/// Issues the certificate pair and personalizes a card for `subject_id`.
/// Renewal and replacement reuse this with material from the old card.
/// The issue plans are applied to the hierarchy here; the caller journals
/// them and the card together.
#[allow(clippy::too_many_arguments)]
pub fn build_issued_material(
    hierarchy: &mut Hierarchy,
    issuer_id: &str,
    card_id: &str,
    subject_id: &str,
    biographic: &BTreeMap<String, String>,
    portrait_hash: &[u8; 32],
    template: FingerprintTemplate,
    scheme_id: &str,
    validity_days: u32,
    at: u64,
    registry: &SchemeRegistry,
    rng: &mut dyn RngCore,
) -> Result<IssuedMaterial> {
    let auth_pair = registry.generate_key_pair(scheme_id, USER_KEY_LENGTH_BITS, rng)?;
    let sign_pair = registry.generate_key_pair(scheme_id, USER_KEY_LENGTH_BITS, rng)?;
    let plan_for = |hierarchy: &Hierarchy,
                    rng: &mut dyn RngCore,
                    pair: &crate::scheme::KeyPair,
                    profile: CertificateProfile| {
        hierarchy.plan_issue(
            issuer_id,
            &IssueRequest {
                subject_id: subject_id.to_string(),
                profile,
                key_source: KeySource::Public {
                    public_key: pair.public_key.clone(),
                    scheme_id: pair.scheme_id.clone(),
                    key_length_bits: USER_KEY_LENGTH_BITS,
                },
                role_attributes: None,
                validity_days,
            },
            at,
            registry,
            rng,
        )
    };
    let auth_plan = plan_for(hierarchy, rng, &auth_pair, CertificateProfile::IdentityAuth)?;
    hierarchy.apply_issue(&auth_plan)?;
    let sign_plan = plan_for(hierarchy, rng, &sign_pair, CertificateProfile::Signature)?;
    hierarchy.apply_issue(&sign_plan)?;

    let issuer_key = hierarchy.require_ca(issuer_id)?.signing_key()?.clone();
    let authority_certificate = hierarchy.require_ca(issuer_id)?.authority.certificate.clone();
    let data_files = vec![
        PublicDataFile::signed(BIOGRAPHIC_FILE, encode_biographic_file(biographic), &issuer_key, registry)?,
        PublicDataFile::signed(PORTRAIT_FILE, portrait_hash.to_vec(), &issuer_key, registry)?,
    ];

    let pin = random_pin(rng);
    let mut sam_master_key = [0u8; 32];
    rng.fill_bytes(&mut sam_master_key);
    let sam_key_label = format!("sam-{card_id}");
    let card = Card::personalize(Personalization {
        card_id: card_id.to_string(),
        data_files,
        pin: pin.clone(),
        auth_pair,
        auth_cert_serial: auth_plan.certificate.serial(),
        sign_pair,
        sign_cert_serial: sign_plan.certificate.serial(),
        template,
        match_threshold: DEFAULT_THRESHOLD,
        sm_master_key_label: sam_key_label.clone(),
        sm_master_key: sam_master_key,
        authority_certificate,
    })?;
    Ok(IssuedMaterial { card, pin, sam_key_label, sam_master_key, auth_plan, sign_plan })
}

/// Runs the full enrollment for a captured application: registry screen,
/// then certificate issuance and card personalization when it clears.
#[allow(clippy::too_many_arguments)]
pub fn enroll(
    hierarchy: &mut Hierarchy,
    issuer_id: &str,
    application: &EnrollmentApplication,
    registry_record: &RegistryRecord,
    scheme_id: &str,
    validity_days: u32,
    at: u64,
    registry: &SchemeRegistry,
    rng: &mut dyn RngCore,
) -> Result<EnrollmentOutcome> {
    match application.status {
        ApplicationStatus::Captured => {}
        ApplicationStatus::Issued => {
            return Err(Error::AlreadyIssued(application.applicant_id.clone()))
        }
        other => {
            return Err(Error::RequestMalformed(format!(
                "only captured applications enroll, this one is {}",
                other.token()
            )))
        }
    }
    if registry_record.applicant_id != application.applicant_id {
        return Err(Error::RequestMalformed(format!(
            "registry record for {:?} offered against applicant {:?}",
            registry_record.applicant_id, application.applicant_id
        )));
    }
    let mut application = application.clone();
    if let Some(reason) = registry_record.rejection_reason() {
        application.advance(ApplicationStatus::Rejected)?;
        return Ok(EnrollmentOutcome {
            application,
            registry_record: registry_record.clone(),
            rejected_reason: Some(reason),
            issued: None,
        });
    }
    application.advance(ApplicationStatus::Verified)?;
    let card_id = format!("card-{}", application.applicant_id);
    let issued = build_issued_material(
        hierarchy,
        issuer_id,
        &card_id,
        &application.applicant_id,
        &application.biographic,
        &application.portrait_hash,
        application.fingerprints[0].clone(),
        scheme_id,
        validity_days,
        at,
        registry,
        rng,
    )?;
    application.advance(ApplicationStatus::Issued)?;
    Ok(EnrollmentOutcome {
        application,
        registry_record: registry_record.clone(),
        rejected_reason: None,
        issued: Some(issued),
    })
}
