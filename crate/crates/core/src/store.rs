//! The persistent, audited store behind the services.
//!
//! One file is authoritative: `audit.log`, a hash-chained sequence of
//! events whose payloads carry the complete artifacts of each state
//! change. Opening a store replays the log through a pure applier;
//! everything else on disk (authority certificates, issued certificates,
//! card blobs) is a derived export, rewritten at open and after each
//! change, never read back as truth.
//!
//! A mutation is acknowledged only after its event line is written and
//! fsynced. A crash before that leaves a torn final line, which the
//! loader drops; a crash after it replays to the acknowledged state.
//! When a command fails midway through its in-memory work, the store
//! reloads itself from the log rather than trusting partial mutations.
//!
//! Secrets never reach disk in the clear: key containers, SAM master
//! keys, and card secrets ride inside event payloads sealed under
//! `sealing.key`; escrowed keys are additionally wrapped by their
//! authority's container key. PINs exist in plaintext only in command
//! results, handed to the applicant once.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::audit::{load_chain, AuditChain};
use crate::ca::{CaRecord, CertificationAuthority, EscrowRecord, Hierarchy, IssuePlan, IssueRequest, KeyContainer, KeySource, NewCaPlan};
use crate::card::channel::AppletId;
use crate::card::moc::FingerprintTemplate;
use crate::card::{open_secure_channel, sam::Sam, unblock_message, unblock_pin, Card};
use crate::cert::{verify_certificate_signature, Certificate, CertificateProfile};
use crate::enroll::{
    decode_biographic_file, enroll as run_enrollment, ApplicationStatus, EnrollmentApplication,
    RegistryRecord, RegistryTable, BIOGRAPHIC_FILE, PORTRAIT_FILE,
};
use crate::encoding::{RecordBuilder, RecordView};
use crate::error::Error;
use crate::gateway::{BlockKind, GateDecision, Hotlist};
use crate::policy::CertificatePolicy;
use crate::revocation::{RevocationEntry, RevocationReason};
use crate::scheme::{KeyPair, SchemeRegistry};
use crate::seal;
use crate::toolkit::{CertificateRepository, TsaState};
use crate::tsa::{issue_timestamp, TimestampToken};
use crate::Result;

pub const SEALING_KEY_FILE: &str = "sealing.key";
pub const AUDIT_LOG_FILE: &str = "audit.log";
pub const REGISTRY_FIXTURES_FILE: &str = "registry/fixtures";
pub const DEVICE_KEY_LENGTH_BITS: u32 = 2048;

const EVENT_SEAL_LABEL: &[u8] = b"audit-event-secret";
const CARD_EXPORT_LABEL: &[u8] = b"card-export";

mod action {
    pub const CA_INIT_ROOT: &str = "ca-init-root";
    pub const CA_INIT_POPULATION: &str = "ca-init-population";
    pub const CA_CERTIFY_EXTERNAL: &str = "ca-certify-external";
    pub const CA_PROVISION_VIRTUAL: &str = "ca-provision-virtual";
    pub const ISSUE: &str = "issue";
    pub const REVOKE: &str = "revoke";
    pub const ENROLL: &str = "enroll";
    pub const LIFECYCLE_RENEW: &str = "lifecycle-renew";
    pub const LIFECYCLE_REPLACE: &str = "lifecycle-replace";
    pub const LIFECYCLE_REVOKE: &str = "lifecycle-revoke";
    pub const LIFECYCLE_UNLOCK: &str = "lifecycle-unlock";
    pub const CARD_STATE: &str = "card-state";
    pub const GATEWAY_BLOCK: &str = "gateway-block";
    pub const GATEWAY_UNBLOCK: &str = "gateway-unblock";
    pub const TSA_PROVISION: &str = "tsa-provision";
    pub const TSA_STAMP: &str = "tsa-stamp";
    pub const OPERATOR_REGISTER: &str = "operator-register";
    pub const REPO_STORE: &str = "repo-store";
    pub const ESCROW_RECOVER: &str = "escrow-recover";
}

// ---- Lifecycle commands ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LifecycleAction {
    Renew,
    Replace,
    Revoke,
    Unlock,
}

impl LifecycleAction {
    pub fn token(&self) -> &'static str {
        match self {
            LifecycleAction::Renew => "renew",
            LifecycleAction::Replace => "replace",
            LifecycleAction::Revoke => "revoke",
            LifecycleAction::Unlock => "unlock",
        }
    }

    pub fn from_token(token: &str) -> Result<Self> {
        Ok(match token {
            "renew" => LifecycleAction::Renew,
            "replace" => LifecycleAction::Replace,
            "revoke" => LifecycleAction::Revoke,
            "unlock" => LifecycleAction::Unlock,
            other => {
                return Err(Error::RequestMalformed(format!("unknown lifecycle action {other:?}")))
            }
        })
    }
}

/// Operator authorization presented with a lifecycle command: the
/// registered operator certificate plus a signature over the command.
#[derive(Debug, Clone)]
pub struct LifecycleAuth {
    pub certificate: Certificate,
    pub signature: Vec<u8>,
}

/// The bytes a lifecycle command's authorization signs.
pub fn lifecycle_auth_bytes(action: LifecycleAction, card_id: &str) -> Vec<u8> {
    RecordBuilder::new()
        .str("action", action.token())
        .str("card_id", card_id)
        .finish()
}

#[derive(Debug)]
pub struct LifecycleReceipt {
    pub action: LifecycleAction,
    pub card_id: String,
    pub new_card_id: Option<String>,
    /// Present when the action produced PIN material; shown once.
    pub new_pin: Option<String>,
    pub revoked_serials: Vec<u64>,
    pub new_serials: Vec<u64>,
}

#[derive(Debug)]
pub struct EnrollmentReceipt {
    pub applicant_id: String,
    pub status: ApplicationStatus,
    pub rejected_reason: Option<String>,
    pub card_id: Option<String>,
    pub pin: Option<String>,
    pub serials: Vec<u64>,
}

#[derive(Debug)]
pub struct IssueReceipt {
    pub certificate: Certificate,
    /// Present exactly for escrowed generation; handed over once.
    pub generated: Option<KeyPair>,
}

// ---- State ----

/// The replayable world: everything the audit log determines.
pub struct State {
    pub hierarchy: Hierarchy,
    pub cards: BTreeMap<String, Card>,
    pub sam_keys: BTreeMap<String, [u8; 32]>,
    pub hotlist: Hotlist,
    pub applications: BTreeMap<String, EnrollmentApplication>,
    pub tsa: Option<TsaState>,
    pub operator: Option<Certificate>,
}

impl State {
    fn new() -> Self {
        Self {
            hierarchy: Hierarchy::new(),
            cards: BTreeMap::new(),
            sam_keys: BTreeMap::new(),
            hotlist: Hotlist::new(),
            applications: BTreeMap::new(),
            tsa: None,
            operator: None,
        }
    }

    /// Digest over everything observable. Two stores whose logs replay to
    /// the same world agree here; any lost or phantom effect shows up.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for record in self.hierarchy.records() {
            hasher.update(record.authority.encode());
            hasher.update(record.next_serial.to_be_bytes());
            if let Some(container) = &record.container {
                hasher.update(container.encode_secret());
            }
            for (serial, cert) in &record.issued {
                hasher.update(serial.to_be_bytes());
                hasher.update(cert.encode());
            }
            for (serial, escrow) in &record.escrow {
                hasher.update(serial.to_be_bytes());
                hasher.update(escrow.encode());
            }
            for entry in record.revocation.entries() {
                hasher.update(entry.encode());
            }
        }
        for policy in self.hierarchy.policies() {
            hasher.update(policy.encode());
        }
        for card in self.cards.values() {
            hasher.update(card.state_fingerprint());
        }
        for (label, key) in &self.sam_keys {
            hasher.update(label.as_bytes());
            hasher.update(key);
        }
        for entry in self.hotlist.entries() {
            hasher.update(entry.encode());
        }
        for application in self.applications.values() {
            hasher.update(application.encode());
        }
        if let Some(tsa) = &self.tsa {
            hasher.update(tsa.tsa_id.as_bytes());
            hasher.update(tsa.key.encode_secret());
            hasher.update(tsa.next_serial.to_be_bytes());
        }
        if let Some(operator) = &self.operator {
            hasher.update(operator.encode());
        }
        hasher.finalize().into()
    }
}

impl CertificateRepository for State {
    fn issuer_certificate(&self, ca_id: &str) -> Option<Certificate> {
        self.hierarchy.issuer_certificate(ca_id)
    }

    fn end_entity_certificate(&self, issuer_id: &str, serial: u64) -> Option<Certificate> {
        self.hierarchy.end_entity_certificate(issuer_id, serial)
    }
}

// ---- Event payload codecs ----

fn encode_issue_payload(plan: &IssuePlan) -> Vec<u8> {
    RecordBuilder::new()
        .str("issuer_id", &plan.issuer_id)
        .raw("certificate", plan.certificate.encode())
        .opt_raw("escrow", plan.escrow.as_ref().map(|e| e.encode()))
        .finish()
}

fn decode_issue_payload(bytes: &[u8]) -> Result<IssuePlan> {
    let view = RecordView::parse(bytes)?;
    let escrow = match view.opt_raw("escrow") {
        Some(raw) => Some(EscrowRecord::decode(raw)?),
        None => None,
    };
    Ok(IssuePlan {
        issuer_id: view.str("issuer_id")?,
        certificate: Certificate::decode(view.raw("certificate")?)?,
        escrow,
        generated: None,
    })
}

fn encode_new_ca_payload(
    plan: &NewCaPlan,
    sealing_key: &[u8; 32],
    rng: &mut dyn RngCore,
) -> Result<Vec<u8>> {
    let container_sealed = match &plan.record.container {
        Some(container) => {
            Some(seal::seal(sealing_key, rng, &container.encode_secret(), EVENT_SEAL_LABEL)?)
        }
        None => None,
    };
    Ok(RecordBuilder::new()
        .raw("authority", plan.record.authority.encode())
        .raw("policy", plan.policy.encode())
        .str("signer_id", &plan.signer_id)
        .u64("next_serial", plan.record.next_serial)
        .opt_raw("container", container_sealed)
        .finish())
}

fn decode_new_ca_payload(bytes: &[u8], sealing_key: &[u8; 32]) -> Result<NewCaPlan> {
    let view = RecordView::parse(bytes)?;
    let authority = CertificationAuthority::decode(view.raw("authority")?)?;
    let policy = CertificatePolicy::decode(view.raw("policy")?)?;
    let signer_id = view.str("signer_id")?;
    let container = match view.opt_raw("container") {
        Some(sealed) => {
            let plain = seal::open(sealing_key, sealed, EVENT_SEAL_LABEL)?;
            Some(KeyContainer::decode_secret(&plain)?)
        }
        None => None,
    };
    let ca_id = authority.ca_id.clone();
    let mut issued = BTreeMap::new();
    if signer_id == ca_id {
        // Self-signed root: its own certificate sits in its issued index.
        issued.insert(authority.certificate.serial(), authority.certificate.clone());
    }
    Ok(NewCaPlan {
        record: CaRecord {
            authority,
            container,
            issued,
            next_serial: view.u64("next_serial")?,
            escrow: BTreeMap::new(),
            revocation: crate::revocation::RevocationState::new(&ca_id),
        },
        policy,
        signer_id,
    })
}

fn encode_revocation_item(ca_id: &str, entry: &RevocationEntry) -> Vec<u8> {
    RecordBuilder::new().str("ca_id", ca_id).raw("entry", entry.encode()).finish()
}

fn decode_revocation_item(bytes: &[u8]) -> Result<(String, RevocationEntry)> {
    let view = RecordView::parse(bytes)?;
    Ok((view.str("ca_id")?, RevocationEntry::decode(view.raw("entry")?)?))
}

fn encode_block_kind(kind: BlockKind) -> (&'static str, Option<u64>) {
    match kind {
        BlockKind::Permanent => ("permanent", None),
        BlockKind::Temporary { until } => ("temporary", Some(until)),
    }
}

fn decode_block_kind(token: &str, until: Option<u64>) -> Result<BlockKind> {
    match (token, until) {
        ("permanent", None) => Ok(BlockKind::Permanent),
        ("temporary", Some(until)) => Ok(BlockKind::Temporary { until }),
        _ => Err(Error::MalformedEncoding(format!("inconsistent block kind {token:?}"))),
    }
}

// ---- The store ----

pub struct Store {
    home: PathBuf,
    sealing_key: [u8; 32],
    chain: AuditChain,
    audit_file: File,
    pub state: State,
    pub registry_table: RegistryTable,
    /// Recorded as the actor of every event this handle appends.
    pub actor: String,
}

impl Store {
    /// Opens (creating on first use) the store rooted at `home`. The RNG
    /// is consumed only when a fresh sealing key must be generated.
    pub fn open(home: impl Into<PathBuf>, rng: &mut dyn RngCore) -> Result<Self> {
        Self::open_internal(home.into(), Some(rng))
    }

    fn open_internal(home: PathBuf, rng: Option<&mut dyn RngCore>) -> Result<Self> {
        fs::create_dir_all(home.join("ca"))?;
        fs::create_dir_all(home.join("cards"))?;
        fs::create_dir_all(home.join("registry"))?;

        let sealing_path = home.join(SEALING_KEY_FILE);
        let sealing_key: [u8; 32] = if sealing_path.exists() {
            let text = fs::read_to_string(&sealing_path)?;
            hex::decode(text.trim())
                .ok()
                .and_then(|v| <[u8; 32]>::try_from(v).ok())
                .ok_or(Error::SealedDataInvalid)?
        } else {
            let rng = rng.ok_or_else(|| {
                Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "sealing key missing during reload",
                ))
            })?;
            let mut key = [0u8; 32];
            rng.fill_bytes(&mut key);
            fs::write(&sealing_path, hex::encode(key) + "\n")?;
            key
        };

        let audit_path = home.join(AUDIT_LOG_FILE);
        let text = if audit_path.exists() { fs::read_to_string(&audit_path)? } else { String::new() };
        let (chain, valid_lines) = load_chain(&text)?;
        let total_lines = text.lines().filter(|l| !l.trim().is_empty()).count();
        if valid_lines < total_lines {
            // Drop the torn tail so the file matches the loaded chain.
            let rebuilt: String = chain.events().iter().map(|e| e.to_line() + "\n").collect();
            fs::write(&audit_path, rebuilt)?;
        }

        let mut state = State::new();
        for event in chain.events() {
            apply_event(&mut state, &event.action, &event.payload, &sealing_key)?;
        }

        let registry_path = home.join(REGISTRY_FIXTURES_FILE);
        let registry_table = if registry_path.exists() {
            RegistryTable::parse(&fs::read_to_string(&registry_path)?)?
        } else {
            RegistryTable::new()
        };

        let audit_file = OpenOptions::new().create(true).append(true).open(&audit_path)?;
        let store = Self {
            home,
            sealing_key,
            chain,
            audit_file,
            state,
            registry_table,
            actor: "operator".to_string(),
        };
        store.export_all()?;
        Ok(store)
    }

    /// Discards in-memory state and rebuilds from the log. For callers
    /// that cannot vouch for the in-memory state any more, a poisoned
    /// lock after a panicked handler being the canonical case.
    pub fn reopen(&mut self) -> Result<()> {
        self.reload()
    }

    /// Discards in-memory state and reloads from disk. Used after a
    /// command fails partway through its mutations.
    fn reload(&mut self) -> Result<()> {
        let actor = self.actor.clone();
        let mut fresh = Self::open_internal(self.home.clone(), None)?;
        fresh.actor = actor;
        *self = fresh;
        Ok(())
    }

    fn recovering<T>(&mut self, run: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        match run(self) {
            Ok(value) => Ok(value),
            Err(err) => {
                self.reload()?;
                Err(err)
            }
        }
    }

    pub fn home(&self) -> &Path {
        &self.home
    }

    /// Version = sequence of the last acknowledged event.
    pub fn version(&self) -> u64 {
        self.chain.len() as u64
    }

    pub fn audit_chain(&self) -> &AuditChain {
        &self.chain
    }

    pub fn verify_audit(&self) -> Result<()> {
        self.chain.verify()
    }

    pub fn sealing_key(&self) -> &[u8; 32] {
        &self.sealing_key
    }

    /// Appends, fsyncs, acknowledges. Nothing is durable or acked until
    /// this returns.
    fn commit(&mut self, time: u64, action: &str, subject: &str, payload: Vec<u8>) -> Result<u64> {
        let actor = self.actor.clone();
        let event = self.chain.append(time, &actor, action, subject, payload);
        let line = event.to_line() + "\n";
        let sequence = event.sequence;
        self.audit_file.write_all(line.as_bytes())?;
        self.audit_file.sync_data()?;
        Ok(sequence)
    }

    // ---- Derived exports ----

    fn export_all(&self) -> Result<()> {
        for ca_id in self.state.hierarchy.ca_ids().map(str::to_string).collect::<Vec<_>>() {
            self.export_ca(&ca_id)?;
        }
        for card_id in self.state.cards.keys().cloned().collect::<Vec<_>>() {
            self.export_card(&card_id)?;
        }
        Ok(())
    }

    /// Authority and issued certificates as hex files. Containers and
    /// escrow stay out: derived files never carry secret material.
    fn export_ca(&self, ca_id: &str) -> Result<()> {
        let Some(record) = self.state.hierarchy.ca(ca_id) else { return Ok(()) };
        let dir = self.home.join("ca").join(ca_id);
        fs::create_dir_all(dir.join("issued"))?;
        fs::write(dir.join("authority.cert"), hex::encode(record.authority.certificate.encode()) + "\n")?;
        for (serial, cert) in &record.issued {
            fs::write(dir.join("issued").join(format!("{serial}.cert")), hex::encode(cert.encode()) + "\n")?;
        }
        Ok(())
    }

    /// Card blob with its secrets sealed. The seal nonce derives from the
    /// card state so the export is deterministic for a given world.
    fn export_card(&self, card_id: &str) -> Result<()> {
        let Some(card) = self.state.cards.get(card_id) else { return Ok(()) };
        let mut seed = Sha256::new();
        seed.update(self.sealing_key);
        seed.update(CARD_EXPORT_LABEL);
        seed.update(card.state_fingerprint());
        let mut rng = ChaCha20Rng::from_seed(seed.finalize().into());
        let blob = card.encode_stored(&self.sealing_key, &mut rng)?;
        fs::write(self.home.join("cards").join(card_id), hex::encode(blob) + "\n")?;
        Ok(())
    }

    // ---- Authority commands ----

    #[allow(clippy::too_many_arguments)]
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
        self.recovering(|store| {
            let plan = store.state.hierarchy.plan_init_root(
                ca_id, scheme_id, key_length_bits, policy, host_id, validity_days, at, registry, rng,
            )?;
            let payload = encode_new_ca_payload(&plan, &store.sealing_key, rng)?;
            let certificate = plan.record.authority.certificate.clone();
            store.state.hierarchy.apply_new_ca(plan)?;
            store.commit(at, action::CA_INIT_ROOT, ca_id, payload)?;
            store.export_ca(ca_id)?;
            Ok(certificate)
        })
    }

    #[allow(clippy::too_many_arguments)]
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
        self.recovering(|store| {
            let plan = store.state.hierarchy.plan_init_population(
                root_id, ca_id, scheme_id, key_length_bits, policy, host_id, validity_days, at,
                registry, rng,
            )?;
            let payload = encode_new_ca_payload(&plan, &store.sealing_key, rng)?;
            let certificate = plan.record.authority.certificate.clone();
            store.state.hierarchy.apply_new_ca(plan)?;
            store.commit(at, action::CA_INIT_POPULATION, ca_id, payload)?;
            store.export_ca(root_id)?;
            store.export_ca(ca_id)?;
            Ok(certificate)
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn certify_external(
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
        rng: &mut dyn RngCore,
    ) -> Result<Certificate> {
        self.recovering(|store| {
            let plan = store.state.hierarchy.plan_certify_external(
                root_id, ca_id, public_key, scheme_id, key_length_bits, policy, validity_days, at,
                registry,
            )?;
            let payload = encode_new_ca_payload(&plan, &store.sealing_key, rng)?;
            let certificate = plan.record.authority.certificate.clone();
            store.state.hierarchy.apply_new_ca(plan)?;
            store.commit(at, action::CA_CERTIFY_EXTERNAL, ca_id, payload)?;
            store.export_ca(root_id)?;
            store.export_ca(ca_id)?;
            Ok(certificate)
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn provision_virtual(
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
        self.recovering(|store| {
            let plan = store.state.hierarchy.plan_provision_virtual(
                population_id, ca_id, scheme_id, key_length_bits, policy, validity_days, at,
                registry, rng,
            )?;
            let payload = encode_new_ca_payload(&plan, &store.sealing_key, rng)?;
            let certificate = plan.record.authority.certificate.clone();
            store.state.hierarchy.apply_new_ca(plan)?;
            store.commit(at, action::CA_PROVISION_VIRTUAL, ca_id, payload)?;
            store.export_ca(population_id)?;
            store.export_ca(ca_id)?;
            Ok(certificate)
        })
    }

    pub fn issue(
        &mut self,
        issuer_id: &str,
        request: &IssueRequest,
        at: u64,
        registry: &SchemeRegistry,
        rng: &mut dyn RngCore,
    ) -> Result<IssueReceipt> {
        self.recovering(|store| {
            let plan = store.state.hierarchy.plan_issue(issuer_id, request, at, registry, rng)?;
            let payload = encode_issue_payload(&plan);
            store.state.hierarchy.apply_issue(&plan)?;
            store.commit(at, action::ISSUE, &format!("{issuer_id}/{}", plan.certificate.serial()), payload)?;
            store.export_ca(issuer_id)?;
            Ok(IssueReceipt { certificate: plan.certificate, generated: plan.generated })
        })
    }

    /// Returns whether the serial was newly revoked; repeats are
    /// acknowledged without a new event.
    pub fn revoke(
        &mut self,
        issuer_id: &str,
        serial: u64,
        reason: RevocationReason,
        at: u64,
    ) -> Result<bool> {
        self.recovering(|store| {
            let changed = store.state.hierarchy.revoke(issuer_id, serial, reason, at)?;
            if changed {
                let entry = store
                    .state
                    .hierarchy
                    .require_ca(issuer_id)?
                    .revocation
                    .entry(serial)
                    .expect("just revoked")
                    .clone();
                let payload = RecordBuilder::new()
                    .str("ca_id", issuer_id)
                    .raw("entry", entry.encode())
                    .finish();
                store.commit(at, action::REVOKE, &format!("{issuer_id}/{serial}"), payload)?;
            }
            Ok(changed)
        })
    }

    /// Records an access to an escrowed key and returns the recovered
    /// pair. The recovery itself changes nothing; the event is the point.
    pub fn recover_escrowed_key(
        &mut self,
        issuer_id: &str,
        serial: u64,
        at: u64,
    ) -> Result<KeyPair> {
        self.recovering(|store| {
            let pair = store.state.hierarchy.recover_escrowed_key(issuer_id, serial)?;
            let payload =
                RecordBuilder::new().str("issuer_id", issuer_id).u64("serial", serial).finish();
            store.commit(at, action::ESCROW_RECOVER, &format!("{issuer_id}/{serial}"), payload)?;
            Ok(pair)
        })
    }

    // ---- Enrollment and lifecycle ----

    #[allow(clippy::too_many_arguments)]
    pub fn enroll(
        &mut self,
        issuer_id: &str,
        application: &EnrollmentApplication,
        scheme_id: &str,
        validity_days: u32,
        at: u64,
        registry: &SchemeRegistry,
        rng: &mut dyn RngCore,
    ) -> Result<EnrollmentReceipt> {
        self.recovering(|store| {
            if let Some(existing) = store.state.applications.get(&application.applicant_id) {
                if existing.status == ApplicationStatus::Issued {
                    return Err(Error::AlreadyIssued(application.applicant_id.clone()));
                }
            }
            let record = store.registry_table.lookup(&application.applicant_id);
            let outcome = run_enrollment(
                &mut store.state.hierarchy,
                issuer_id,
                application,
                &record,
                scheme_id,
                validity_days,
                at,
                registry,
                rng,
            )?;
            let mut builder = RecordBuilder::new()
                .raw("application", outcome.application.encode())
                .raw("registry_record", outcome.registry_record.encode());
            if let Some(reason) = &outcome.rejected_reason {
                builder = builder.str("rejected_reason", reason);
            }
            let receipt;
            match &outcome.issued {
                Some(issued) => {
                    let card_blob = issued.card.encode_stored(&store.sealing_key, rng)?;
                    let sam_sealed =
                        seal::seal(&store.sealing_key, rng, &issued.sam_master_key, EVENT_SEAL_LABEL)?;
                    builder = builder
                        .raw("auth", encode_issue_payload(&issued.auth_plan))
                        .raw("sign", encode_issue_payload(&issued.sign_plan))
                        .raw("card", card_blob)
                        .str("sam_label", &issued.sam_key_label)
                        .raw("sam_key", sam_sealed);
                    receipt = EnrollmentReceipt {
                        applicant_id: application.applicant_id.clone(),
                        status: ApplicationStatus::Issued,
                        rejected_reason: None,
                        card_id: Some(issued.card.card_id.clone()),
                        pin: Some(issued.pin.clone()),
                        serials: vec![
                            issued.auth_plan.certificate.serial(),
                            issued.sign_plan.certificate.serial(),
                        ],
                    };
                    store.state.cards.insert(issued.card.card_id.clone(), issued.card.clone());
                    store
                        .state
                        .sam_keys
                        .insert(issued.sam_key_label.clone(), issued.sam_master_key);
                }
                None => {
                    receipt = EnrollmentReceipt {
                        applicant_id: application.applicant_id.clone(),
                        status: ApplicationStatus::Rejected,
                        rejected_reason: outcome.rejected_reason.clone(),
                        card_id: None,
                        pin: None,
                        serials: vec![],
                    };
                }
            }
            store
                .state
                .applications
                .insert(application.applicant_id.clone(), outcome.application.clone());
            store.commit(at, action::ENROLL, &application.applicant_id, builder.finish())?;
            store.export_ca(issuer_id)?;
            if let Some(card_id) = &receipt.card_id {
                store.export_card(card_id)?;
            }
            Ok(receipt)
        })
    }

    fn verify_operator(&self, auth: &LifecycleAuth, action: LifecycleAction, card_id: &str, at: u64, registry: &SchemeRegistry) -> Result<()> {
        let registered = self
            .state
            .operator
            .as_ref()
            .ok_or_else(|| Error::Unauthorized("no operator credential registered".into()))?;
        if auth.certificate != *registered {
            return Err(Error::Unauthorized("credential is not the registered operator".into()));
        }
        if !registered.time_valid(at) {
            return Err(Error::Unauthorized("operator credential outside its validity".into()));
        }
        let scheme = registry.get(&registered.tbs.scheme_id)?;
        let message = lifecycle_auth_bytes(action, card_id);
        if !scheme.verify(&registered.tbs.public_key, &message, &auth.signature) {
            return Err(Error::Unauthorized("signature does not verify under the operator credential".into()));
        }
        Ok(())
    }

    /// Biographic material and template carried by an existing card, used
    /// to personalize its successor.
    fn card_profile(card: &Card) -> (BTreeMap<String, String>, [u8; 32], FingerprintTemplate) {
        let mut biographic = BTreeMap::new();
        let mut portrait = [0u8; 32];
        for file in card.read_public_data() {
            if file.file_id == BIOGRAPHIC_FILE {
                if let Ok(map) = decode_biographic_file(&file.content) {
                    biographic = map;
                }
            }
            if file.file_id == PORTRAIT_FILE {
                if let Ok(bytes) = <[u8; 32]>::try_from(file.content.as_slice()) {
                    portrait = bytes;
                }
            }
        }
        (biographic, portrait, card.enrolled_template().clone())
    }

    fn next_replacement_id(&self, old_card_id: &str) -> String {
        let base = match old_card_id.rfind("-r") {
            Some(pos)
                if old_card_id.len() > pos + 2
                    && old_card_id[pos + 2..].bytes().all(|b| b.is_ascii_digit()) =>
            {
                &old_card_id[..pos]
            }
            _ => old_card_id,
        };
        let mut n = 1;
        loop {
            let candidate = format!("{base}-r{n}");
            if !self.state.cards.contains_key(&candidate) {
                return candidate;
            }
            n += 1;
        }
    }

    /// Revokes the card's certificate pair and returns the journal items.
    fn revoke_card_certs(
        &mut self,
        card_id: &str,
        reason: RevocationReason,
        at: u64,
    ) -> Result<(Vec<Vec<u8>>, Vec<u64>)> {
        let card = self.state.cards.get(card_id).ok_or_else(|| Error::UnknownCard(card_id.into()))?;
        let issuer_id = card.authority_certificate.subject_id().to_string();
        let serials = [card.auth_cert_serial(), card.sign_cert_serial()];
        let mut items = Vec::new();
        let mut revoked = Vec::new();
        for serial in serials {
            if self.state.hierarchy.revoke(&issuer_id, serial, reason, at)? {
                let entry = self
                    .state
                    .hierarchy
                    .require_ca(&issuer_id)?
                    .revocation
                    .entry(serial)
                    .expect("just revoked")
                    .clone();
                items.push(encode_revocation_item(&issuer_id, &entry));
                revoked.push(serial);
            }
        }
        Ok((items, revoked))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn lifecycle(
        &mut self,
        card_id: &str,
        lifecycle_action: LifecycleAction,
        auth: &LifecycleAuth,
        scheme_id: &str,
        validity_days: u32,
        at: u64,
        registry: &SchemeRegistry,
        rng: &mut dyn RngCore,
    ) -> Result<LifecycleReceipt> {
        self.recovering(|store| {
            store.verify_operator(auth, lifecycle_action, card_id, at, registry)?;
            if !store.state.cards.contains_key(card_id) {
                return Err(Error::UnknownCard(card_id.to_string()));
            }
            match lifecycle_action {
                LifecycleAction::Renew => store.lifecycle_renew(card_id, scheme_id, validity_days, at, registry, rng),
                LifecycleAction::Replace => store.lifecycle_replace(card_id, scheme_id, validity_days, at, registry, rng),
                LifecycleAction::Revoke => store.lifecycle_revoke(card_id, at),
                LifecycleAction::Unlock => store.lifecycle_unlock(card_id, at, registry, rng),
            }
        })
    }

    fn lifecycle_renew(
        &mut self,
        card_id: &str,
        scheme_id: &str,
        validity_days: u32,
        at: u64,
        registry: &SchemeRegistry,
        rng: &mut dyn RngCore,
    ) -> Result<LifecycleReceipt> {
        let (revocation_items, revoked) =
            self.revoke_card_certs(card_id, RevocationReason::Superseded, at)?;
        let card = self.state.cards.get(card_id).expect("checked by caller");
        let issuer_id = card.authority_certificate.subject_id().to_string();
        let subject_id = self
            .state
            .hierarchy
            .end_entity_certificate(&issuer_id, card.auth_cert_serial())
            .map(|c| c.subject_id().to_string())
            .unwrap_or_else(|| card_id.to_string());
        let (biographic, portrait, template) = Self::card_profile(card);
        let issued = crate::enroll::build_issued_material(
            &mut self.state.hierarchy,
            &issuer_id,
            card_id,
            &subject_id,
            &biographic,
            &portrait,
            template,
            scheme_id,
            validity_days,
            at,
            registry,
            rng,
        )?;
        let card_blob = issued.card.encode_stored(&self.sealing_key, rng)?;
        let sam_sealed = seal::seal(&self.sealing_key, rng, &issued.sam_master_key, EVENT_SEAL_LABEL)?;
        let payload = RecordBuilder::new()
            .str("card_id", card_id)
            .list("revocations", &revocation_items)
            .raw("auth", encode_issue_payload(&issued.auth_plan))
            .raw("sign", encode_issue_payload(&issued.sign_plan))
            .raw("card", card_blob)
            .str("sam_label", &issued.sam_key_label)
            .raw("sam_key", sam_sealed)
            .finish();
        let receipt = LifecycleReceipt {
            action: LifecycleAction::Renew,
            card_id: card_id.to_string(),
            new_card_id: None,
            new_pin: Some(issued.pin.clone()),
            revoked_serials: revoked,
            new_serials: vec![
                issued.auth_plan.certificate.serial(),
                issued.sign_plan.certificate.serial(),
            ],
        };
        self.state.cards.insert(card_id.to_string(), issued.card.clone());
        self.state.sam_keys.insert(issued.sam_key_label.clone(), issued.sam_master_key);
        self.commit(at, action::LIFECYCLE_RENEW, card_id, payload)?;
        self.export_ca(&issuer_id)?;
        self.export_card(card_id)?;
        Ok(receipt)
    }

    fn lifecycle_replace(
        &mut self,
        card_id: &str,
        scheme_id: &str,
        validity_days: u32,
        at: u64,
        registry: &SchemeRegistry,
        rng: &mut dyn RngCore,
    ) -> Result<LifecycleReceipt> {
        let (revocation_items, revoked) =
            self.revoke_card_certs(card_id, RevocationReason::CardLost, at)?;
        let reason = "replaced";
        self.state.hotlist.block(card_id, BlockKind::Permanent, at, reason)?;
        let new_card_id = self.next_replacement_id(card_id);
        let card = self.state.cards.get(card_id).expect("checked by caller");
        let issuer_id = card.authority_certificate.subject_id().to_string();
        let subject_id = self
            .state
            .hierarchy
            .end_entity_certificate(&issuer_id, card.auth_cert_serial())
            .map(|c| c.subject_id().to_string())
            .unwrap_or_else(|| card_id.to_string());
        let (biographic, portrait, template) = Self::card_profile(card);
        let issued = crate::enroll::build_issued_material(
            &mut self.state.hierarchy,
            &issuer_id,
            &new_card_id,
            &subject_id,
            &biographic,
            &portrait,
            template,
            scheme_id,
            validity_days,
            at,
            registry,
            rng,
        )?;
        let card_blob = issued.card.encode_stored(&self.sealing_key, rng)?;
        let sam_sealed = seal::seal(&self.sealing_key, rng, &issued.sam_master_key, EVENT_SEAL_LABEL)?;
        let payload = RecordBuilder::new()
            .str("card_id", card_id)
            .str("new_card_id", &new_card_id)
            .u64("block_since", at)
            .str("block_reason", reason)
            .list("revocations", &revocation_items)
            .raw("auth", encode_issue_payload(&issued.auth_plan))
            .raw("sign", encode_issue_payload(&issued.sign_plan))
            .raw("card", card_blob)
            .str("sam_label", &issued.sam_key_label)
            .raw("sam_key", sam_sealed)
            .finish();
        let receipt = LifecycleReceipt {
            action: LifecycleAction::Replace,
            card_id: card_id.to_string(),
            new_card_id: Some(new_card_id.clone()),
            new_pin: Some(issued.pin.clone()),
            revoked_serials: revoked,
            new_serials: vec![
                issued.auth_plan.certificate.serial(),
                issued.sign_plan.certificate.serial(),
            ],
        };
        self.state.cards.insert(new_card_id.clone(), issued.card.clone());
        self.state.sam_keys.insert(issued.sam_key_label.clone(), issued.sam_master_key);
        self.commit(at, action::LIFECYCLE_REPLACE, card_id, payload)?;
        self.export_ca(&issuer_id)?;
        self.export_card(&new_card_id)?;
        Ok(receipt)
    }

    fn lifecycle_revoke(&mut self, card_id: &str, at: u64) -> Result<LifecycleReceipt> {
        let (revocation_items, revoked) =
            self.revoke_card_certs(card_id, RevocationReason::Administrative, at)?;
        let reason = "revoked";
        self.state.hotlist.block(card_id, BlockKind::Permanent, at, reason)?;
        let payload = RecordBuilder::new()
            .str("card_id", card_id)
            .u64("block_since", at)
            .str("block_reason", reason)
            .list("revocations", &revocation_items)
            .finish();
        self.commit(at, action::LIFECYCLE_REVOKE, card_id, payload)?;
        let issuer_id = self.state.cards[card_id].authority_certificate.subject_id().to_string();
        self.export_ca(&issuer_id)?;
        Ok(LifecycleReceipt {
            action: LifecycleAction::Revoke,
            card_id: card_id.to_string(),
            new_card_id: None,
            new_pin: None,
            revoked_serials: revoked,
            new_serials: vec![],
        })
    }

    /// Resets the PIN through the card's own unblock machinery: an
    /// authority signature over the card identity, presented over a fresh
    /// secure channel.
    fn lifecycle_unlock(
        &mut self,
        card_id: &str,
        at: u64,
        registry: &SchemeRegistry,
        rng: &mut dyn RngCore,
    ) -> Result<LifecycleReceipt> {
        let card = self.state.cards.get(card_id).expect("checked by caller");
        let issuer_id = card.authority_certificate.subject_id().to_string();
        let label = card.sm_master_key_label.clone();
        let master = *self
            .state
            .sam_keys
            .get(&label)
            .ok_or_else(|| Error::ChannelRefused(format!("no SAM master key {label:?}")))?;
        let issuer_key = self.state.hierarchy.require_ca(&issuer_id)?.signing_key()?.clone();
        let scheme = registry.get(&issuer_key.scheme_id)?;
        let admin_signature =
            scheme.sign(issuer_key.private_key_bytes(), &unblock_message(card_id))?;
        let new_pin = format!("{:06}", rng.next_u32() % 1_000_000);

        let mut sam = Sam::new("sam-helpdesk");
        sam.install_master_key(&label, master);
        let card = self.state.cards.get_mut(card_id).expect("checked by caller");
        let mut channel = open_secure_channel(card, &sam, AppletId::Pki, rng)?;
        unblock_pin(&mut channel, card, registry, &admin_signature, &new_pin)?;

        let card_blob = self.state.cards[card_id].encode_stored(&self.sealing_key, rng)?;
        let payload = RecordBuilder::new().str("card_id", card_id).raw("card", card_blob).finish();
        self.commit(at, action::LIFECYCLE_UNLOCK, card_id, payload)?;
        self.export_card(card_id)?;
        Ok(LifecycleReceipt {
            action: LifecycleAction::Unlock,
            card_id: card_id.to_string(),
            new_card_id: None,
            new_pin: Some(new_pin),
            revoked_serials: vec![],
            new_serials: vec![],
        })
    }

    /// Journals a card whose persistent state changed outside lifecycle
    /// commands (PIN retries spent at a kiosk, for example).
    pub fn save_card(&mut self, card_id: &str, at: u64, rng: &mut dyn RngCore) -> Result<()> {
        self.recovering(|store| {
            let card = store
                .state
                .cards
                .get(card_id)
                .ok_or_else(|| Error::UnknownCard(card_id.to_string()))?;
            let blob = card.encode_stored(&store.sealing_key, rng)?;
            let payload = RecordBuilder::new().str("card_id", card_id).raw("card", blob).finish();
            store.commit(at, action::CARD_STATE, card_id, payload)?;
            store.export_card(card_id)?;
            Ok(())
        })
    }

    // ---- Gateway ----

    pub fn gateway_block(
        &mut self,
        card_id: &str,
        kind: BlockKind,
        reason: &str,
        at: u64,
    ) -> Result<bool> {
        self.recovering(|store| {
            let changed = store.state.hotlist.block(card_id, kind, at, reason)?;
            if changed {
                let (token, until) = encode_block_kind(kind);
                let mut builder = RecordBuilder::new()
                    .str("card_id", card_id)
                    .str("kind", token)
                    .u64("since", at)
                    .str("reason", reason);
                if let Some(until) = until {
                    builder = builder.u64("until", until);
                }
                store.commit(at, action::GATEWAY_BLOCK, card_id, builder.finish())?;
            }
            Ok(changed)
        })
    }

    pub fn gateway_unblock(&mut self, card_id: &str, at: u64) -> Result<bool> {
        self.recovering(|store| {
            let changed = store.state.hotlist.unblock(card_id);
            if changed {
                let payload = RecordBuilder::new().str("card_id", card_id).finish();
                store.commit(at, action::GATEWAY_UNBLOCK, card_id, payload)?;
            }
            Ok(changed)
        })
    }

    pub fn gateway_check(&self, card_id: &str, at: u64) -> GateDecision {
        self.state.hotlist.check(card_id, at)
    }

    // ---- Timestamping ----

    /// Issues the TSA its device certificate from the root and installs
    /// its signing key, one atomic event.
    pub fn provision_tsa(
        &mut self,
        root_id: &str,
        tsa_id: &str,
        scheme_id: &str,
        validity_days: u32,
        at: u64,
        registry: &SchemeRegistry,
        rng: &mut dyn RngCore,
    ) -> Result<Certificate> {
        self.recovering(|store| {
            let pair = registry.generate_key_pair(scheme_id, DEVICE_KEY_LENGTH_BITS, rng)?;
            let plan = store.state.hierarchy.plan_issue(
                root_id,
                &IssueRequest {
                    subject_id: tsa_id.to_string(),
                    profile: CertificateProfile::Device,
                    key_source: KeySource::Public {
                        public_key: pair.public_key.clone(),
                        scheme_id: pair.scheme_id.clone(),
                        key_length_bits: DEVICE_KEY_LENGTH_BITS,
                    },
                    role_attributes: None,
                    validity_days,
                },
                at,
                registry,
                rng,
            )?;
            let key_sealed = seal::seal(&store.sealing_key, rng, &pair.encode_secret(), EVENT_SEAL_LABEL)?;
            let payload = RecordBuilder::new()
                .str("tsa_id", tsa_id)
                .raw("issue", encode_issue_payload(&plan))
                .raw("key", key_sealed)
                .finish();
            let certificate = plan.certificate.clone();
            store.state.hierarchy.apply_issue(&plan)?;
            store.state.tsa = Some(TsaState { tsa_id: tsa_id.to_string(), key: pair, next_serial: 1 });
            store.commit(at, action::TSA_PROVISION, tsa_id, payload)?;
            store.export_ca(root_id)?;
            Ok(certificate)
        })
    }

    pub fn tsa_stamp(&mut self, document_hash: &[u8; 32], at: u64) -> Result<TimestampToken> {
        self.recovering(|store| {
            let tsa = store
                .state
                .tsa
                .as_mut()
                .ok_or_else(|| Error::ValidationUnavailable("no timestamping authority provisioned".into()))?;
            let registry = SchemeRegistry::builtin();
            let token =
                issue_timestamp(&tsa.tsa_id, tsa.next_serial, document_hash, at, &tsa.key, &registry)?;
            tsa.next_serial += 1;
            let payload = RecordBuilder::new().raw("token", token.encode()).finish();
            store.commit(at, action::TSA_STAMP, &token.tsa_id.clone(), payload)?;
            Ok(token)
        })
    }

    // ---- Operator credential ----

    /// Issues a device certificate for the helpdesk operator and registers
    /// it as the lifecycle-authorizing credential. The private key is
    /// returned once for the operator's credential file and never stored.
    pub fn register_operator(
        &mut self,
        root_id: &str,
        operator_id: &str,
        scheme_id: &str,
        validity_days: u32,
        at: u64,
        registry: &SchemeRegistry,
        rng: &mut dyn RngCore,
    ) -> Result<(Certificate, KeyPair)> {
        self.recovering(|store| {
            let pair = registry.generate_key_pair(scheme_id, DEVICE_KEY_LENGTH_BITS, rng)?;
            let plan = store.state.hierarchy.plan_issue(
                root_id,
                &IssueRequest {
                    subject_id: operator_id.to_string(),
                    profile: CertificateProfile::Device,
                    key_source: KeySource::Public {
                        public_key: pair.public_key.clone(),
                        scheme_id: pair.scheme_id.clone(),
                        key_length_bits: DEVICE_KEY_LENGTH_BITS,
                    },
                    role_attributes: None,
                    validity_days,
                },
                at,
                registry,
                rng,
            )?;
            let payload = RecordBuilder::new()
                .str("operator_id", operator_id)
                .raw("issue", encode_issue_payload(&plan))
                .finish();
            let certificate = plan.certificate.clone();
            store.state.hierarchy.apply_issue(&plan)?;
            store.state.operator = Some(certificate.clone());
            store.commit(at, action::OPERATOR_REGISTER, operator_id, payload)?;
            store.export_ca(root_id)?;
            Ok((certificate, pair))
        })
    }

    // ---- Repository ----

    /// Publishes a certificate issued out of band, typically by an
    /// externally operated authority. The issuer must be known, the
    /// signature must verify, and the serial must be new; the publication
    /// then joins the issuer's ledger, so revocation and status services
    /// cover it like any locally issued certificate.
    pub fn repo_store(&mut self, certificate: Certificate, at: u64) -> Result<()> {
        self.recovering(|store| {
            let issuer_id = certificate.issuer_id().to_string();
            let serial = certificate.serial();
            let issuer_cert = store
                .state
                .issuer_certificate(&issuer_id)
                .ok_or_else(|| Error::UnknownCa(issuer_id.clone()))?;
            let registry = SchemeRegistry::builtin();
            if !verify_certificate_signature(
                &certificate,
                &issuer_cert.tbs.scheme_id,
                &issuer_cert.tbs.public_key,
                &registry,
            ) {
                return Err(Error::RequestMalformed(
                    "certificate signature does not verify under its issuer".into(),
                ));
            }
            let plan =
                IssuePlan { issuer_id: issuer_id.clone(), certificate, escrow: None, generated: None };
            let payload = RecordBuilder::new()
                .str("issuer_id", &issuer_id)
                .raw("certificate", plan.certificate.encode())
                .finish();
            store.state.hierarchy.apply_issue(&plan)?;
            store.commit(at, action::REPO_STORE, &format!("{issuer_id}/{serial}"), payload)?;
            store.export_ca(&issuer_id)?;
            Ok(())
        })
    }

    pub fn repo_fetch_serial(&self, issuer_id: &str, serial: u64) -> Option<Certificate> {
        self.state.end_entity_certificate(issuer_id, serial)
    }

    /// All certificates naming `subject_id`, ordered by serial and then
    /// issuer for equal serials from different authorities.
    pub fn repo_fetch_subject(&self, subject_id: &str) -> Vec<Certificate> {
        let mut found = Vec::new();
        for record in self.state.hierarchy.records() {
            for cert in record.issued.values() {
                if cert.subject_id() == subject_id {
                    found.push(cert.clone());
                }
            }
        }
        found.sort_by(|a, b| {
            (a.serial(), a.issuer_id().to_string()).cmp(&(b.serial(), b.issuer_id().to_string()))
        });
        found
    }
}

// ---- Replay ----

fn apply_issue_payload(state: &mut State, bytes: &[u8]) -> Result<()> {
    let plan = decode_issue_payload(bytes)?;
    state.hierarchy.apply_issue(&plan)
}

fn apply_card_payload(state: &mut State, view: &RecordView, sealing_key: &[u8; 32]) -> Result<()> {
    let card = Card::decode_stored(sealing_key, view.raw("card")?)?;
    state.cards.insert(card.card_id.clone(), card);
    Ok(())
}

fn apply_sam_payload(state: &mut State, view: &RecordView, sealing_key: &[u8; 32]) -> Result<()> {
    let label = view.str("sam_label")?;
    let opened = seal::open(sealing_key, view.raw("sam_key")?, EVENT_SEAL_LABEL)?;
    let key: [u8; 32] = opened
        .as_slice()
        .try_into()
        .map_err(|_| Error::MalformedEncoding("SAM master key must be 32 bytes".into()))?;
    state.sam_keys.insert(label, key);
    Ok(())
}

fn apply_revocation_list(state: &mut State, view: &RecordView) -> Result<()> {
    for item in view.list("revocations")? {
        let (ca_id, entry) = decode_revocation_item(&item)?;
        state.hierarchy.apply_revocation(&ca_id, entry)?;
    }
    Ok(())
}

fn apply_block(state: &mut State, view: &RecordView) -> Result<()> {
    let kind = decode_block_kind(&view.str("kind")?, view.u64("until").ok())?;
    state.hotlist.block(&view.str("card_id")?, kind, view.u64("since")?, &view.str("reason")?)?;
    Ok(())
}

/// Pure event applier: no RNG, no clock, no policy re-evaluation. Replay
/// is exactly this function folded over the log.
fn apply_event(state: &mut State, act: &str, payload: &[u8], sealing_key: &[u8; 32]) -> Result<()> {
    let view = RecordView::parse(payload)?;
    match act {
        action::CA_INIT_ROOT
        | action::CA_INIT_POPULATION
        | action::CA_CERTIFY_EXTERNAL
        | action::CA_PROVISION_VIRTUAL => {
            let plan = decode_new_ca_payload(payload, sealing_key)?;
            state.hierarchy.apply_new_ca(plan)
        }
        action::ISSUE => apply_issue_payload(state, payload),
        action::REVOKE => {
            let (ca_id, entry) = (view.str("ca_id")?, RevocationEntry::decode(view.raw("entry")?)?);
            state.hierarchy.apply_revocation(&ca_id, entry)
        }
        action::ENROLL => {
            let application = EnrollmentApplication::decode(view.raw("application")?)?;
            let _screen = RegistryRecord::decode(view.raw("registry_record")?)?;
            if application.status == ApplicationStatus::Issued {
                apply_issue_payload(state, view.raw("auth")?)?;
                apply_issue_payload(state, view.raw("sign")?)?;
                apply_card_payload(state, &view, sealing_key)?;
                apply_sam_payload(state, &view, sealing_key)?;
            }
            state.applications.insert(application.applicant_id.clone(), application);
            Ok(())
        }
        action::LIFECYCLE_RENEW => {
            apply_revocation_list(state, &view)?;
            apply_issue_payload(state, view.raw("auth")?)?;
            apply_issue_payload(state, view.raw("sign")?)?;
            apply_card_payload(state, &view, sealing_key)?;
            apply_sam_payload(state, &view, sealing_key)
        }
        action::LIFECYCLE_REPLACE => {
            apply_revocation_list(state, &view)?;
            state.hotlist.block(
                &view.str("card_id")?,
                BlockKind::Permanent,
                view.u64("block_since")?,
                &view.str("block_reason")?,
            )?;
            apply_issue_payload(state, view.raw("auth")?)?;
            apply_issue_payload(state, view.raw("sign")?)?;
            apply_card_payload(state, &view, sealing_key)?;
            apply_sam_payload(state, &view, sealing_key)
        }
        action::LIFECYCLE_REVOKE => {
            apply_revocation_list(state, &view)?;
            state.hotlist.block(
                &view.str("card_id")?,
                BlockKind::Permanent,
                view.u64("block_since")?,
                &view.str("block_reason")?,
            )?;
            Ok(())
        }
        action::LIFECYCLE_UNLOCK | action::CARD_STATE => apply_card_payload(state, &view, sealing_key),
        action::GATEWAY_BLOCK => apply_block(state, &view),
        action::GATEWAY_UNBLOCK => {
            state.hotlist.unblock(&view.str("card_id")?);
            Ok(())
        }
        action::TSA_PROVISION => {
            apply_issue_payload(state, view.raw("issue")?)?;
            let opened = seal::open(sealing_key, view.raw("key")?, EVENT_SEAL_LABEL)?;
            state.tsa = Some(TsaState {
                tsa_id: view.str("tsa_id")?,
                key: KeyPair::decode_secret(&opened)?,
                next_serial: 1,
            });
            Ok(())
        }
        action::TSA_STAMP => {
            let token = TimestampToken::decode(view.raw("token")?)?;
            let tsa = state.tsa.as_mut().ok_or_else(|| {
                Error::AuditCorrupt("timestamp event before TSA provisioning".into())
            })?;
            tsa.next_serial = tsa.next_serial.max(token.serial + 1);
            Ok(())
        }
        action::OPERATOR_REGISTER => {
            apply_issue_payload(state, view.raw("issue")?)?;
            let plan = decode_issue_payload(view.raw("issue")?)?;
            state.operator = Some(plan.certificate);
            Ok(())
        }
        action::REPO_STORE => {
            let plan = IssuePlan {
                issuer_id: view.str("issuer_id")?,
                certificate: Certificate::decode(view.raw("certificate")?)?,
                escrow: None,
                generated: None,
            };
            state.hierarchy.apply_issue(&plan)
        }
        action::ESCROW_RECOVER => Ok(()),
        other => Err(Error::AuditCorrupt(format!("unknown event action {other:?}"))),
    }
}
