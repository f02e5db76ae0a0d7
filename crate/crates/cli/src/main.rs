//! Operator command line for the identity PKI.
//!
//! One process, one operation: open the state directory, apply the
//! command, print a report, exit. Exit code 0 means the operation
//! succeeded and, for checks, came back positive (authenticated, valid,
//! matched, allowed); 1 means a domain failure or a negative check; 2 is
//! a usage error.
//!
//! With `--addr` set (or `EIDPKI_ADDR`), online operations go through a
//! running `serve` instance instead of the local ledger. Card and
//! authority state always live in the `--home` directory.
//!
//! All randomness flows from `--seed`, so a scripted run with pinned
//! `--seed` and `--now` values reproduces its output byte for byte.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::Value;
use sha2::{Digest, Sha256};

use eidpki_core::card::moc::{FingerprintTemplate, Minutia, DEFAULT_THRESHOLD, GRID_SIZE};
use eidpki_core::card::{sam::Sam, Card};
use eidpki_core::clock::Clock;
use eidpki_core::enroll::{decode_biographic_file, EnrollmentApplication, BIOGRAPHIC_FILE, PORTRAIT_FILE};
use eidpki_core::enroll::ApplicationStatus;
use eidpki_core::gateway::{BlockKind, GateDecision};
use eidpki_core::policy::CertificatePolicy;
use eidpki_core::revocation::{generate_crl, generate_pcl, Crl, RevocationReason};
use eidpki_core::scheme::ED25519;
use eidpki_core::service::{Service, WireClient};
use eidpki_core::store::{lifecycle_auth_bytes, LifecycleAction, LifecycleAuth, Store};
use eidpki_core::toolkit::{
    document_digest, CrlSet, LedgerServices, OnlineServices, SignedDocument, Toolkit,
    ValidationMode, VerifyMode,
};
use eidpki_core::{Certificate, Error, KeyPair, Result, SchemeRegistry, TrustAnchorSet, Verdict};

const DEFAULT_CRL_WINDOW: u64 = 7 * 86_400;

// ---- Command line surface ----

#[derive(Parser)]
#[command(name = "eidpki")]
#[command(about = "national identity PKI: authorities, cards, and validation services", version)]
struct Cli {
    /// State directory
    #[arg(long, global = true, env = "EIDPKI_HOME", default_value = "eidpki-home")]
    home: PathBuf,

    /// Service address; set to run online operations over the wire
    #[arg(long, global = true, env = "EIDPKI_ADDR")]
    addr: Option<String>,

    /// Randomness seed for reproducible runs
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Pin the clock to this UTC-seconds instant
    #[arg(long, global = true)]
    now: Option<u64>,

    /// Report format
    #[arg(long, global = true, value_enum, default_value_t = Output::Text)]
    output: Output,

    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Certification authority setup
    #[command(subcommand)]
    Ca(CaCommands),
    /// Screen an applicant and issue a personalized card
    Enroll(EnrollArgs),
    /// Card-facing operations at a terminal
    #[command(subcommand)]
    Card(CardCommands),
    /// Revoke one certificate by issuer and serial
    Revoke(RevokeArgs),
    /// Card lifecycle actions authorized by an operator credential
    Lifecycle(LifecycleArgs),
    /// Certificate revocation lists
    #[command(subcommand)]
    Crl(CrlCommands),
    /// Positive certification lists
    #[command(subcommand)]
    Pcl(PclCommands),
    /// Run the validation service endpoint
    Serve,
    /// Card hotlist at the authentication gateway
    #[command(subcommand)]
    Gateway(GatewayCommands),
    /// Timestamping authority
    #[command(subcommand)]
    Tsa(TsaCommands),
    /// Helpdesk operator credentials
    #[command(subcommand)]
    Operator(OperatorCommands),
}

#[derive(Subcommand)]
enum CaCommands {
    /// Create the self-signed root authority
    InitRoot {
        #[arg(long, default_value = "root")]
        ca_id: String,
        #[arg(long, default_value = ED25519)]
        scheme: String,
        #[arg(long, default_value_t = 2048)]
        key_bits: u32,
        /// Hardware module hosting the root key container
        #[arg(long, default_value = "hsm-1")]
        host: String,
        #[arg(long, default_value_t = 7300)]
        validity_days: u32,
    },
    /// Create the population authority under the root
    InitPopulation {
        #[arg(long, default_value = "root")]
        root_id: String,
        #[arg(long, default_value = "population")]
        ca_id: String,
        #[arg(long, default_value = ED25519)]
        scheme: String,
        #[arg(long, default_value_t = 2048)]
        key_bits: u32,
        #[arg(long, default_value = "hsm-1")]
        host: String,
        #[arg(long, default_value_t = 3650)]
        validity_days: u32,
    },
    /// Certify an externally operated sub-authority; its key stays off-site
    CertifySub {
        #[arg(long, default_value = "root")]
        root_id: String,
        #[arg(long)]
        ca_id: String,
        /// Hex public key supplied by the external operator
        #[arg(long, conflicts_with = "key_out")]
        public_key: Option<String>,
        /// Generate the subject key pair here and write it to this file
        #[arg(long)]
        key_out: Option<PathBuf>,
        #[arg(long, default_value = ED25519)]
        scheme: String,
        #[arg(long, default_value_t = 2048)]
        key_bits: u32,
        #[arg(long)]
        policy_id: Option<String>,
        #[arg(long, default_value_t = 1825)]
        validity_days: u32,
    },
    /// Provision a virtual sub-authority on the population host
    ProvisionSub {
        #[arg(long, default_value = "population")]
        population_id: String,
        #[arg(long)]
        ca_id: String,
        #[arg(long, default_value = ED25519)]
        scheme: String,
        #[arg(long, default_value_t = 2048)]
        key_bits: u32,
        #[arg(long)]
        policy_id: Option<String>,
        #[arg(long, default_value_t = 1825)]
        validity_days: u32,
    },
}

#[derive(clap::Args)]
struct EnrollArgs {
    #[arg(long, default_value = "population")]
    ca_id: String,
    #[arg(long)]
    applicant_id: String,
    #[arg(long)]
    name: String,
    #[arg(long, default_value = "1990-01-01")]
    birth_date: String,
    #[arg(long, default_value = "ARE")]
    nationality: String,
    #[arg(long, default_value = ED25519)]
    scheme: String,
    #[arg(long, default_value_t = 1825)]
    validity_days: u32,
}

#[derive(Subcommand)]
enum CardCommands {
    /// Authenticate a cardholder: channel, PIN, challenge, certificate,
    /// and optionally a fingerprint
    Auth {
        #[arg(long)]
        card: String,
        #[arg(long)]
        pin: String,
        #[arg(long, value_enum, default_value_t = AuthMode::Crl)]
        mode: AuthMode,
        /// CRL file to use instead of freshly generated lists (repeatable)
        #[arg(long = "crl")]
        crl: Vec<PathBuf>,
        /// CRL freshness window in seconds when generating locally
        #[arg(long, default_value_t = DEFAULT_CRL_WINDOW)]
        window: u64,
        /// Also capture and match the holder's fingerprint
        #[arg(long)]
        biometric: bool,
    },
    /// Produce a non-repudiation signature over a document
    Sign {
        #[arg(long)]
        card: String,
        #[arg(long)]
        pin: String,
        #[arg(long = "in")]
        input: PathBuf,
        /// Signature file to write (defaults to the input path plus .sig)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Attach a timestamp token to the signature
        #[arg(long)]
        timestamp: bool,
        #[arg(long, value_enum, default_value_t = AuthMode::Crl)]
        mode: AuthMode,
        #[arg(long = "crl")]
        crl: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_CRL_WINDOW)]
        window: u64,
    },
    /// Verify a signed document against the certificate ledger
    Verify {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        sig: PathBuf,
        #[arg(long, value_enum, default_value_t = VerifyModeArg::Local)]
        mode: VerifyModeArg,
        #[arg(long = "crl")]
        crl: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_CRL_WINDOW)]
        window: u64,
    },
    /// Read and verify the card's signed public data files
    Read {
        #[arg(long)]
        card: String,
    },
    /// Match a captured fingerprint against the card
    Match {
        #[arg(long)]
        card: String,
        #[arg(long, value_enum, default_value_t = MatchMethod::OnCard)]
        method: MatchMethod,
        /// Score threshold for off-card matching
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Present a different finger than the enrolled one
        #[arg(long)]
        impostor: bool,
    },
}

#[derive(clap::Args)]
struct RevokeArgs {
    #[arg(long)]
    ca_id: String,
    #[arg(long)]
    serial: u64,
    /// key_compromise, card_lost, superseded, cessation, or administrative
    #[arg(long, value_parser = parse_reason)]
    reason: RevocationReason,
}

#[derive(clap::Args)]
struct LifecycleArgs {
    /// renew, replace, revoke, or unlock
    #[arg(value_parser = parse_lifecycle_action)]
    action: LifecycleAction,
    #[arg(long)]
    card: String,
    /// Operator credential file written by `operator register`
    #[arg(long)]
    credential: PathBuf,
    #[arg(long, default_value = ED25519)]
    scheme: String,
    #[arg(long, default_value_t = 1825)]
    validity_days: u32,
}

#[derive(Subcommand)]
enum CrlCommands {
    /// Generate (or fetch, with --addr) a signed revocation list
    Gen {
        #[arg(long)]
        ca_id: String,
        /// Validity window in seconds
        #[arg(long, default_value_t = DEFAULT_CRL_WINDOW)]
        window: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PclCommands {
    /// Generate (or fetch, with --addr) a signed list of valid serials
    Gen {
        #[arg(long)]
        ca_id: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum GatewayCommands {
    /// Put a card on the hotlist
    Block {
        #[arg(long)]
        card: String,
        /// Block only until this instant; permanent when absent
        #[arg(long)]
        until: Option<u64>,
        #[arg(long, default_value = "operator action")]
        reason: String,
    },
    /// Clear a card from the hotlist
    Unblock {
        #[arg(long)]
        card: String,
    },
    /// Ask whether a card may authenticate right now
    Check {
        #[arg(long)]
        card: String,
    },
}

#[derive(Subcommand)]
enum TsaCommands {
    /// Issue the timestamping authority its device certificate and key
    Provision {
        #[arg(long, default_value = "root")]
        root_id: String,
        #[arg(long, default_value = "timestamping")]
        tsa_id: String,
        #[arg(long, default_value = ED25519)]
        scheme: String,
        #[arg(long, default_value_t = 3650)]
        validity_days: u32,
    },
    /// Stamp a document hash
    Stamp {
        #[arg(long = "in", conflicts_with = "hash")]
        input: Option<PathBuf>,
        /// 32-byte document hash in hex
        #[arg(long)]
        hash: Option<String>,
    },
}

#[derive(Subcommand)]
enum OperatorCommands {
    /// Issue and register the helpdesk operator credential
    Register {
        #[arg(long, default_value = "root")]
        root_id: String,
        #[arg(long, default_value = "helpdesk-1")]
        operator_id: String,
        /// File the certificate and private key are written to
        #[arg(long)]
        credential_out: PathBuf,
        #[arg(long, default_value = ED25519)]
        scheme: String,
        #[arg(long, default_value_t = 3650)]
        validity_days: u32,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Output {
    Text,
    Canonical,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AuthMode {
    Crl,
    Ocsp,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VerifyModeArg {
    Local,
    Outsourced,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MatchMethod {
    OnCard,
    OffCard,
}

fn parse_reason(token: &str) -> std::result::Result<RevocationReason, String> {
    RevocationReason::from_token(token).map_err(|err| err.to_string())
}

fn parse_lifecycle_action(token: &str) -> std::result::Result<LifecycleAction, String> {
    LifecycleAction::from_token(token).map_err(|err| err.to_string())
}

// ---- Entry ----

fn main() {
    let cli = Cli::parse();
    let ctx = Ctx {
        home: cli.home,
        addr: cli.addr,
        seed: cli.seed.unwrap_or_else(|| rand::rng().next_u64()),
        clock: match cli.now {
            Some(at) => Clock::Fixed(at),
            None => Clock::System,
        },
        output: cli.output,
    };
    match run(&ctx, cli.command) {
        Ok(code) => process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            process::exit(1);
        }
    }
}

fn run(ctx: &Ctx, command: Commands) -> Result<i32> {
    match command {
        Commands::Ca(cmd) => cmd_ca(ctx, cmd),
        Commands::Enroll(args) => cmd_enroll(ctx, args),
        Commands::Card(cmd) => cmd_card(ctx, cmd),
        Commands::Revoke(args) => cmd_revoke(ctx, args),
        Commands::Lifecycle(args) => cmd_lifecycle(ctx, args),
        Commands::Crl(CrlCommands::Gen { ca_id, window, out }) => cmd_crl_gen(ctx, &ca_id, window, out.as_deref()),
        Commands::Pcl(PclCommands::Gen { ca_id, out }) => cmd_pcl_gen(ctx, &ca_id, out.as_deref()),
        Commands::Serve => cmd_serve(ctx),
        Commands::Gateway(cmd) => cmd_gateway(ctx, cmd),
        Commands::Tsa(cmd) => cmd_tsa(ctx, cmd),
        Commands::Operator(cmd) => cmd_operator(ctx, cmd),
    }
}

// ---- Shared context ----

struct Ctx {
    home: PathBuf,
    addr: Option<String>,
    seed: u64,
    clock: Clock,
    output: Output,
}

impl Ctx {
    /// Opens the store with a boot RNG derived from the seed alone, then
    /// derives the command RNG from the seed and the store version, so
    /// every command in a seeded script draws a distinct, reproducible
    /// stream.
    fn open_store(&self) -> Result<(Store, ChaCha20Rng)> {
        let mut boot = derived_rng(&[b"eidpki/boot", &self.seed.to_le_bytes()]);
        let store = Store::open(&self.home, &mut boot)?;
        let rng = derived_rng(&[b"eidpki/command", &self.seed.to_le_bytes(), &store.version().to_le_bytes()]);
        Ok((store, rng))
    }
}

fn derived_rng(parts: &[&[u8]]) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    ChaCha20Rng::from_seed(hasher.finalize().into())
}

/// Either service backend behind one `OnlineServices` handle.
enum Services<'a> {
    Ledger(LedgerServices<'a>),
    Wire(WireClient),
}

impl Services<'_> {
    fn as_dyn(&mut self) -> &mut dyn OnlineServices {
        match self {
            Services::Ledger(ledger) => ledger,
            Services::Wire(wire) => wire,
        }
    }
}

fn services<'a>(ctx: &Ctx, store: &'a Store, registry: &'a SchemeRegistry, now: u64) -> Result<Services<'a>> {
    match &ctx.addr {
        Some(addr) => Ok(Services::Wire(WireClient::connect(addr.as_str())?)),
        None => {
            let mut ledger = LedgerServices::new(&store.state.hierarchy, registry, now);
            ledger.tsa = store.state.tsa.clone();
            Ok(Services::Ledger(ledger))
        }
    }
}

fn trust_anchors(store: &Store) -> Result<TrustAnchorSet> {
    let anchors = store.state.hierarchy.trust_anchors();
    if anchors.is_empty() {
        return Err(Error::NoRoot);
    }
    Ok(anchors)
}

fn card_clone(store: &Store, card_id: &str) -> Result<Card> {
    store.state.cards.get(card_id).cloned().ok_or_else(|| Error::UnknownCard(card_id.to_string()))
}

fn sam_for(store: &Store, card: &Card) -> Result<Sam> {
    let key = store.state.sam_keys.get(&card.sm_master_key_label).ok_or_else(|| {
        Error::ChannelRefused(format!("terminal holds no SAM key labeled {:?}", card.sm_master_key_label))
    })?;
    let mut sam = Sam::new("terminal");
    sam.install_master_key(&card.sm_master_key_label, *key);
    Ok(sam)
}

/// Journals the card when the operation changed it; a pure read leaves
/// no event behind.
fn save_if_changed(
    store: &mut Store,
    card_id: &str,
    card: Card,
    fingerprint_before: [u8; 32],
    at: u64,
    rng: &mut ChaCha20Rng,
) -> Result<()> {
    if card.state_fingerprint() == fingerprint_before {
        return Ok(());
    }
    store.state.cards.insert(card_id.to_string(), card);
    store.save_card(card_id, at, rng)
}

fn crl_set_for(
    store: &Store,
    registry: &SchemeRegistry,
    files: &[PathBuf],
    now: u64,
    window: u64,
) -> Result<CrlSet> {
    if files.is_empty() {
        return CrlSet::for_hierarchy(&store.state.hierarchy, registry, now, window);
    }
    let mut set = CrlSet::new();
    for path in files {
        let text = fs::read_to_string(path)?;
        set.add(Crl::decode(&hex_bytes(&text)?)?);
    }
    Ok(set)
}

/// Emulated capture: minutiae are a pure function of whose finger is on
/// the sensor, so a later capture of the same finger reproduces them.
fn captured_template(tag: &str, id: &str) -> FingerprintTemplate {
    let mut rng = derived_rng(&[tag.as_bytes(), id.as_bytes()]);
    let minutiae = (0..12)
        .map(|_| Minutia {
            x: (rng.next_u32() % u32::from(GRID_SIZE)) as u16,
            y: (rng.next_u32() % u32::from(GRID_SIZE)) as u16,
            angle: (rng.next_u32() % 360) as u16,
        })
        .collect();
    FingerprintTemplate::new(minutiae, 85).expect("in-range minutiae")
}

fn hex_bytes(text: &str) -> Result<Vec<u8>> {
    hex::decode(text.trim()).map_err(|err| Error::MalformedEncoding(format!("hex: {err}")))
}

fn hash32(text: &str) -> Result<[u8; 32]> {
    let bytes = hex_bytes(text)?;
    <[u8; 32]>::try_from(bytes.as_slice())
        .map_err(|_| Error::RequestMalformed(format!("expected 32 hash bytes, got {}", bytes.len())))
}

fn save_credential(path: &Path, certificate: &Certificate, key: &KeyPair) -> Result<()> {
    let mut map = serde_json::Map::new();
    map.insert("certificate".to_string(), Value::String(hex::encode(certificate.encode())));
    map.insert("key".to_string(), Value::String(hex::encode(key.encode_secret())));
    fs::write(path, format!("{}\n", Value::Object(map)))?;
    Ok(())
}

fn load_credential(path: &Path) -> Result<(Certificate, KeyPair)> {
    let text = fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|err| Error::MalformedEncoding(format!("credential file: {err}")))?;
    let field = |name: &str| {
        value
            .get(name)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::MalformedEncoding(format!("credential file lacks {name:?}")))
    };
    let certificate = Certificate::decode(&hex_bytes(field("certificate")?)?)?;
    let key = KeyPair::decode_secret(&hex_bytes(field("key")?)?)?;
    Ok((certificate, key))
}

// ---- Reporting ----

/// Ordered key/value report. Text mode prints one `key: value` line per
/// field in insertion order; canonical mode prints a single key-sorted
/// JSON object line.
struct Report {
    fields: Vec<(String, Value)>,
}

impl Report {
    fn new() -> Self {
        Self { fields: Vec::new() }
    }

    fn put(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.fields.push((key.to_string(), value.into()));
        self
    }

    fn print(mut self, output: Output) {
        match output {
            Output::Text => {
                for (key, value) in &self.fields {
                    match value {
                        Value::String(text) => println!("{key}: {text}"),
                        other => println!("{key}: {other}"),
                    }
                }
            }
            Output::Canonical => {
                self.fields.sort_by(|a, b| a.0.cmp(&b.0));
                let map: serde_json::Map<String, Value> = self.fields.into_iter().collect();
                println!("{}", Value::Object(map));
            }
        }
    }
}

// ---- Authority commands ----

fn cmd_ca(ctx: &Ctx, cmd: CaCommands) -> Result<i32> {
    let (mut store, mut rng) = ctx.open_store()?;
    let registry = SchemeRegistry::builtin();
    let now = ctx.clock.now();
    let report = match cmd {
        CaCommands::InitRoot { ca_id, scheme, key_bits, host, validity_days } => {
            let certificate = store.init_root(
                &ca_id,
                &scheme,
                key_bits,
                &CertificatePolicy::root_default(),
                &host,
                validity_days,
                now,
                &registry,
                &mut rng,
            )?;
            ca_report("root", &ca_id, &certificate)
        }
        CaCommands::InitPopulation { root_id, ca_id, scheme, key_bits, host, validity_days } => {
            let certificate = store.init_population(
                &root_id,
                &ca_id,
                &scheme,
                key_bits,
                &CertificatePolicy::population_default(),
                &host,
                validity_days,
                now,
                &registry,
                &mut rng,
            )?;
            ca_report("population", &ca_id, &certificate)
        }
        CaCommands::CertifySub {
            root_id,
            ca_id,
            public_key,
            key_out,
            scheme,
            key_bits,
            policy_id,
            validity_days,
        } => {
            let policy = subordinate_policy(policy_id, &ca_id);
            let generated = match (&public_key, &key_out) {
                (Some(_), None) => None,
                (None, Some(_)) => Some(registry.generate_key_pair(&scheme, key_bits, &mut rng)?),
                _ => {
                    return Err(Error::RequestMalformed(
                        "exactly one of --public-key and --key-out is required".into(),
                    ))
                }
            };
            let subject_key = match &generated {
                Some(pair) => pair.public_key.clone(),
                None => hex_bytes(public_key.as_deref().expect("checked above"))?,
            };
            let certificate = store.certify_external(
                &root_id,
                &ca_id,
                subject_key,
                &scheme,
                key_bits,
                &policy,
                validity_days,
                now,
                &registry,
                &mut rng,
            )?;
            let mut report = ca_report("external", &ca_id, &certificate);
            if let (Some(pair), Some(path)) = (&generated, &key_out) {
                save_credential(path, &certificate, pair)?;
                report = report.put("key_file", path.display().to_string());
            }
            report
        }
        CaCommands::ProvisionSub { population_id, ca_id, scheme, key_bits, policy_id, validity_days } => {
            let policy = subordinate_policy(policy_id, &ca_id);
            let certificate = store.provision_virtual(
                &population_id,
                &ca_id,
                &scheme,
                key_bits,
                &policy,
                validity_days,
                now,
                &registry,
                &mut rng,
            )?;
            ca_report("virtual", &ca_id, &certificate)
        }
    };
    report.print(ctx.output);
    Ok(0)
}

fn subordinate_policy(policy_id: Option<String>, ca_id: &str) -> CertificatePolicy {
    CertificatePolicy::subordinate_default(policy_id.unwrap_or_else(|| format!("{ca_id}-policy")))
}

fn ca_report(kind: &str, ca_id: &str, certificate: &Certificate) -> Report {
    Report::new()
        .put("ca", ca_id)
        .put("kind", kind)
        .put("issued_by", certificate.issuer_id())
        .put("serial", certificate.serial())
        .put("key_bits", certificate.tbs.key_length_bits)
}

// ---- Enrollment ----

fn cmd_enroll(ctx: &Ctx, args: EnrollArgs) -> Result<i32> {
    let (mut store, mut rng) = ctx.open_store()?;
    let registry = SchemeRegistry::builtin();
    let now = ctx.clock.now();
    let mut biographic = std::collections::BTreeMap::new();
    biographic.insert("name".to_string(), args.name);
    biographic.insert("birth_date".to_string(), args.birth_date);
    biographic.insert("nationality".to_string(), args.nationality);
    let portrait: [u8; 32] =
        Sha256::digest(format!("{}/portrait", args.applicant_id).as_bytes()).into();
    let template = captured_template("eidpki/finger", &args.applicant_id);
    let application =
        EnrollmentApplication::new(&args.applicant_id, biographic, portrait, vec![template])?;
    let receipt = store.enroll(
        &args.ca_id,
        &application,
        &args.scheme,
        args.validity_days,
        now,
        &registry,
        &mut rng,
    )?;
    let issued = receipt.status == ApplicationStatus::Issued;
    let mut report = Report::new()
        .put("applicant", receipt.applicant_id.as_str())
        .put("status", receipt.status.token());
    if let Some(reason) = &receipt.rejected_reason {
        report = report.put("reason", reason.as_str());
    }
    if let Some(card_id) = &receipt.card_id {
        report = report.put("card", card_id.as_str());
    }
    if let Some(pin) = &receipt.pin {
        report = report.put("pin", pin.as_str());
    }
    if issued {
        report = report.put("serials", receipt.serials.clone());
    }
    report.print(ctx.output);
    Ok(if issued { 0 } else { 1 })
}

// ---- Card operations ----

fn cmd_card(ctx: &Ctx, cmd: CardCommands) -> Result<i32> {
    match cmd {
        CardCommands::Auth { card, pin, mode, crl, window, biometric } => {
            cmd_card_auth(ctx, &card, &pin, mode, &crl, window, biometric)
        }
        CardCommands::Sign { card, pin, input, out, timestamp, mode, crl, window } => {
            cmd_card_sign(ctx, &card, &pin, &input, out, timestamp, mode, &crl, window)
        }
        CardCommands::Verify { input, sig, mode, crl, window } => {
            cmd_card_verify(ctx, &input, &sig, mode, &crl, window)
        }
        CardCommands::Read { card } => cmd_card_read(ctx, &card),
        CardCommands::Match { card, method, threshold, impostor } => {
            cmd_card_match(ctx, &card, method, threshold, impostor)
        }
    }
}

fn cmd_card_auth(
    ctx: &Ctx,
    card_id: &str,
    pin: &str,
    mode: AuthMode,
    crl_files: &[PathBuf],
    window: u64,
    biometric: bool,
) -> Result<i32> {
    let (mut store, mut rng) = ctx.open_store()?;
    let registry = SchemeRegistry::builtin();
    let now = ctx.clock.now();
    let mut card = card_clone(&store, card_id)?;
    let fingerprint_before = card.state_fingerprint();
    let sam = sam_for(&store, &card)?;
    let anchors = trust_anchors(&store)?;
    let probe = biometric.then(|| card.enrolled_template().clone());
    let result = {
        let mut services = services(ctx, &store, &registry, now)?;
        let crls;
        let validation = match mode {
            AuthMode::Crl => {
                crls = crl_set_for(&store, &registry, crl_files, now, window)?;
                ValidationMode::CrlLocal { crls: &crls }
            }
            AuthMode::Ocsp => ValidationMode::OcspOnline,
        };
        let mut toolkit = Toolkit::new(&registry, &anchors, &store.state, &mut rng);
        toolkit.authenticate(&mut card, &sam, pin, &validation, services.as_dyn(), probe.as_ref(), now)?
    };
    save_if_changed(&mut store, card_id, card, fingerprint_before, now, &mut rng)?;

    let factors: Vec<Value> =
        result.factors_passed.iter().map(|f| Value::String(f.token().to_string())).collect();
    let mut report = Report::new()
        .put("card", card_id)
        .put("authenticated", result.authenticated)
        .put("factors", factors);
    if let Some(outcome) = &result.cert_outcome {
        report = report
            .put("verdict", outcome.verdict.token())
            .put("revocation_source", outcome.revocation_source.token());
    }
    for (index, step) in result.transcript.iter().enumerate() {
        let status = if step.passed { "pass" } else { "fail" };
        report = report.put(
            &format!("step.{}-{}", index + 1, step.step),
            format!("{status}: {}", step.detail),
        );
    }
    report.print(ctx.output);
    Ok(if result.authenticated { 0 } else { 1 })
}

#[allow(clippy::too_many_arguments)]
fn cmd_card_sign(
    ctx: &Ctx,
    card_id: &str,
    pin: &str,
    input: &Path,
    out: Option<PathBuf>,
    timestamp: bool,
    mode: AuthMode,
    crl_files: &[PathBuf],
    window: u64,
) -> Result<i32> {
    let (mut store, mut rng) = ctx.open_store()?;
    let registry = SchemeRegistry::builtin();
    let now = ctx.clock.now();
    let document = fs::read(input)?;
    let mut card = card_clone(&store, card_id)?;
    let fingerprint_before = card.state_fingerprint();
    let sam = sam_for(&store, &card)?;
    let anchors = trust_anchors(&store)?;
    let mut signed = {
        let mut services = services(ctx, &store, &registry, now)?;
        let crls;
        let validation = match mode {
            AuthMode::Crl => {
                crls = crl_set_for(&store, &registry, crl_files, now, window)?;
                ValidationMode::CrlLocal { crls: &crls }
            }
            AuthMode::Ocsp => ValidationMode::OcspOnline,
        };
        let mut toolkit = Toolkit::new(&registry, &anchors, &store.state, &mut rng);
        toolkit.sign(&mut card, &sam, pin, &document, false, &validation, services.as_dyn(), now)?
    };
    save_if_changed(&mut store, card_id, card, fingerprint_before, now, &mut rng)?;
    if timestamp {
        let token = match &ctx.addr {
            Some(addr) => WireClient::connect(addr.as_str())?.tsa_stamp(signed.document_hash)?,
            None => store.tsa_stamp(&signed.document_hash, now)?,
        };
        signed.timestamp_token = Some(token);
    }
    let out_path = out.unwrap_or_else(|| {
        let mut os = input.as_os_str().to_os_string();
        os.push(".sig");
        PathBuf::from(os)
    });
    fs::write(&out_path, format!("{}\n", hex::encode(signed.encode())))?;

    let mut report = Report::new()
        .put("card", card_id)
        .put("issuer", signed.signer_issuer_id.as_str())
        .put("serial", signed.signer_cert_serial)
        .put("document_hash", hex::encode(signed.document_hash))
        .put("signature_file", out_path.display().to_string());
    if let Some(token) = &signed.timestamp_token {
        report = report.put("timestamp_serial", token.serial).put("timestamp_time", token.time);
    }
    report.print(ctx.output);
    Ok(0)
}

fn cmd_card_verify(
    ctx: &Ctx,
    input: &Path,
    sig: &Path,
    mode: VerifyModeArg,
    crl_files: &[PathBuf],
    window: u64,
) -> Result<i32> {
    let (store, mut rng) = ctx.open_store()?;
    let registry = SchemeRegistry::builtin();
    let now = ctx.clock.now();
    let document = fs::read(input)?;
    let signed = SignedDocument::decode(&hex_bytes(&fs::read_to_string(sig)?)?)?;
    if document_digest(&document) != signed.document_hash {
        return Err(Error::DataTampered("document does not match the signed digest".into()));
    }
    let anchors = trust_anchors(&store)?;
    let outcome = {
        let mut services = services(ctx, &store, &registry, now)?;
        let crls;
        let verify_mode = match mode {
            VerifyModeArg::Local => {
                crls = crl_set_for(&store, &registry, crl_files, now, window)?;
                VerifyMode::Local { crls: &crls }
            }
            VerifyModeArg::Outsourced => VerifyMode::Outsourced,
        };
        let mut toolkit = Toolkit::new(&registry, &anchors, &store.state, &mut rng);
        toolkit.verify_signature(&signed, &verify_mode, services.as_dyn(), now)?
    };
    let valid = outcome.verdict == Verdict::Valid;
    let mut report = Report::new()
        .put("issuer", signed.signer_issuer_id.as_str())
        .put("serial", signed.signer_cert_serial)
        .put("verdict", outcome.verdict.token())
        .put("revocation_source", outcome.revocation_source.token())
        .put("detail", outcome.detail.as_str());
    if let Some(token) = &signed.timestamp_token {
        report = report.put("timestamp_time", token.time);
    }
    report.print(ctx.output);
    Ok(if valid { 0 } else { 1 })
}

fn cmd_card_read(ctx: &Ctx, card_id: &str) -> Result<i32> {
    let (store, mut rng) = ctx.open_store()?;
    let registry = SchemeRegistry::builtin();
    let card = card_clone(&store, card_id)?;
    let anchors = trust_anchors(&store)?;
    let mut toolkit = Toolkit::new(&registry, &anchors, &store.state, &mut rng);
    let record = toolkit.read_public_data(&card)?;
    let mut report = Report::new()
        .put("card", record.card_id.as_str())
        .put("authority", record.authority_id.as_str());
    for (file_id, content) in &record.files {
        if file_id == BIOGRAPHIC_FILE {
            for (field, value) in decode_biographic_file(content)? {
                report = report.put(&format!("biographic.{field}"), value);
            }
        } else if file_id == PORTRAIT_FILE {
            report = report.put("portrait", hex::encode(content));
        } else {
            report = report.put(&format!("file.{file_id}"), hex::encode(content));
        }
    }
    report.print(ctx.output);
    Ok(0)
}

fn cmd_card_match(
    ctx: &Ctx,
    card_id: &str,
    method: MatchMethod,
    threshold: f64,
    impostor: bool,
) -> Result<i32> {
    let (mut store, mut rng) = ctx.open_store()?;
    let registry = SchemeRegistry::builtin();
    let now = ctx.clock.now();
    let mut card = card_clone(&store, card_id)?;
    let fingerprint_before = card.state_fingerprint();
    let sam = sam_for(&store, &card)?;
    let anchors = trust_anchors(&store)?;
    let probe = if impostor {
        captured_template("eidpki/impostor", card_id)
    } else {
        card.enrolled_template().clone()
    };
    let (matched, score) = {
        let mut toolkit = Toolkit::new(&registry, &anchors, &store.state, &mut rng);
        match method {
            MatchMethod::OnCard => toolkit.match_on_card(&mut card, &sam, &probe)?,
            MatchMethod::OffCard => toolkit.match_off_card(&mut card, &sam, &probe, threshold)?,
        }
    };
    save_if_changed(&mut store, card_id, card, fingerprint_before, now, &mut rng)?;
    Report::new()
        .put("card", card_id)
        .put("method", match method {
            MatchMethod::OnCard => "on-card",
            MatchMethod::OffCard => "off-card",
        })
        .put("matched", matched)
        .put("score", format!("{score:.3}"))
        .print(ctx.output);
    Ok(if matched { 0 } else { 1 })
}

// ---- Revocation and lists ----

fn cmd_revoke(ctx: &Ctx, args: RevokeArgs) -> Result<i32> {
    let changed = match &ctx.addr {
        Some(addr) => WireClient::connect(addr.as_str())?.revoke(&args.ca_id, args.serial, args.reason)?,
        None => {
            let (mut store, _rng) = ctx.open_store()?;
            store.revoke(&args.ca_id, args.serial, args.reason, ctx.clock.now())?
        }
    };
    Report::new()
        .put("ca", args.ca_id.as_str())
        .put("serial", args.serial)
        .put("reason", args.reason.token())
        .put("newly_revoked", changed)
        .print(ctx.output);
    Ok(0)
}

fn cmd_crl_gen(ctx: &Ctx, ca_id: &str, window: u64, out: Option<&Path>) -> Result<i32> {
    let crl = match &ctx.addr {
        Some(addr) => WireClient::connect(addr.as_str())?.crl_fetch(ca_id, window)?,
        None => {
            let (store, _rng) = ctx.open_store()?;
            let record = store.state.hierarchy.require_ca(ca_id)?;
            let registry = SchemeRegistry::builtin();
            generate_crl(&record.revocation, &record.issued, record.signing_key()?, &registry, ctx.clock.now(), window)?
        }
    };
    let encoded = hex::encode(crl.encode());
    let mut report = Report::new()
        .put("ca", ca_id)
        .put("this_update", crl.this_update)
        .put("next_update", crl.next_update)
        .put("entries", crl.entries.len() as u64);
    match out {
        Some(path) => {
            fs::write(path, format!("{encoded}\n"))?;
            report = report.put("file", path.display().to_string());
        }
        None => report = report.put("crl", encoded),
    }
    report.print(ctx.output);
    Ok(0)
}

fn cmd_pcl_gen(ctx: &Ctx, ca_id: &str, out: Option<&Path>) -> Result<i32> {
    let pcl = match &ctx.addr {
        Some(addr) => WireClient::connect(addr.as_str())?.pcl_fetch(ca_id)?,
        None => {
            let (store, _rng) = ctx.open_store()?;
            let record = store.state.hierarchy.require_ca(ca_id)?;
            let registry = SchemeRegistry::builtin();
            generate_pcl(&record.revocation, &record.issued, record.signing_key()?, &registry, ctx.clock.now())?
        }
    };
    let covered: u64 = pcl.ranges.iter().map(|(start, end)| end - start + 1).sum();
    let encoded = hex::encode(pcl.encode());
    let mut report = Report::new()
        .put("ca", ca_id)
        .put("as_of", pcl.as_of)
        .put("ranges", pcl.ranges.len() as u64)
        .put("valid_serials", covered);
    match out {
        Some(path) => {
            fs::write(path, format!("{encoded}\n"))?;
            report = report.put("file", path.display().to_string());
        }
        None => report = report.put("pcl", encoded),
    }
    report.print(ctx.output);
    Ok(0)
}

// ---- Lifecycle ----

fn cmd_lifecycle(ctx: &Ctx, args: LifecycleArgs) -> Result<i32> {
    let (mut store, mut rng) = ctx.open_store()?;
    let registry = SchemeRegistry::builtin();
    let now = ctx.clock.now();
    let (certificate, key) = load_credential(&args.credential)?;
    let scheme = registry.get(&key.scheme_id)?;
    let signature =
        scheme.sign(key.private_key_bytes(), &lifecycle_auth_bytes(args.action, &args.card))?;
    let auth = LifecycleAuth { certificate, signature };
    let receipt = store.lifecycle(
        &args.card,
        args.action,
        &auth,
        &args.scheme,
        args.validity_days,
        now,
        &registry,
        &mut rng,
    )?;
    let mut report = Report::new()
        .put("action", receipt.action.token())
        .put("card", receipt.card_id.as_str());
    if let Some(new_card) = &receipt.new_card_id {
        report = report.put("new_card", new_card.as_str());
    }
    if let Some(pin) = &receipt.new_pin {
        report = report.put("new_pin", pin.as_str());
    }
    if !receipt.revoked_serials.is_empty() {
        report = report.put("revoked_serials", receipt.revoked_serials.clone());
    }
    if !receipt.new_serials.is_empty() {
        report = report.put("new_serials", receipt.new_serials.clone());
    }
    report.print(ctx.output);
    Ok(0)
}

// ---- Service, gateway, timestamping, operator ----

fn cmd_serve(ctx: &Ctx) -> Result<i32> {
    let bind = ctx.addr.clone().unwrap_or_else(|| "127.0.0.1:7700".to_string());
    let (store, _rng) = ctx.open_store()?;
    let service = Service::bind(bind.as_str(), store, ctx.clock)?;
    println!("listening {}", service.local_addr()?);
    std::io::stdout().flush()?;
    service.run()?;
    Ok(0)
}

fn cmd_gateway(ctx: &Ctx, cmd: GatewayCommands) -> Result<i32> {
    match cmd {
        GatewayCommands::Block { card, until, reason } => {
            let kind = match until {
                Some(until) => BlockKind::Temporary { until },
                None => BlockKind::Permanent,
            };
            let changed = match &ctx.addr {
                Some(addr) => WireClient::connect(addr.as_str())?.gateway_block(&card, kind, &reason)?,
                None => {
                    let (mut store, _rng) = ctx.open_store()?;
                    store.gateway_block(&card, kind, &reason, ctx.clock.now())?
                }
            };
            let mut report = Report::new()
                .put("card", card.as_str())
                .put("kind", match kind {
                    BlockKind::Permanent => "permanent",
                    BlockKind::Temporary { .. } => "temporary",
                })
                .put("changed", changed);
            if let Some(until) = until {
                report = report.put("until", until);
            }
            report.print(ctx.output);
            Ok(0)
        }
        GatewayCommands::Unblock { card } => {
            let changed = match &ctx.addr {
                Some(addr) => WireClient::connect(addr.as_str())?.gateway_unblock(&card)?,
                None => {
                    let (mut store, _rng) = ctx.open_store()?;
                    store.gateway_unblock(&card, ctx.clock.now())?
                }
            };
            Report::new().put("card", card.as_str()).put("changed", changed).print(ctx.output);
            Ok(0)
        }
        GatewayCommands::Check { card } => {
            let decision = match &ctx.addr {
                Some(addr) => WireClient::connect(addr.as_str())?.gateway_check(&card)?,
                None => {
                    let (store, _rng) = ctx.open_store()?;
                    store.gateway_check(&card, ctx.clock.now())
                }
            };
            let mut report =
                Report::new().put("card", card.as_str()).put("decision", decision.token());
            if let GateDecision::BlockedTemporary { until } = decision {
                report = report.put("until", until);
            }
            report.print(ctx.output);
            Ok(if decision == GateDecision::Allowed { 0 } else { 1 })
        }
    }
}

fn cmd_tsa(ctx: &Ctx, cmd: TsaCommands) -> Result<i32> {
    match cmd {
        TsaCommands::Provision { root_id, tsa_id, scheme, validity_days } => {
            let (mut store, mut rng) = ctx.open_store()?;
            let registry = SchemeRegistry::builtin();
            let certificate = store.provision_tsa(
                &root_id,
                &tsa_id,
                &scheme,
                validity_days,
                ctx.clock.now(),
                &registry,
                &mut rng,
            )?;
            Report::new()
                .put("tsa", tsa_id.as_str())
                .put("issued_by", certificate.issuer_id())
                .put("serial", certificate.serial())
                .print(ctx.output);
            Ok(0)
        }
        TsaCommands::Stamp { input, hash } => {
            let digest = match (&input, &hash) {
                (Some(path), None) => document_digest(&fs::read(path)?),
                (None, Some(text)) => hash32(text)?,
                _ => {
                    return Err(Error::RequestMalformed(
                        "exactly one of --in and --hash is required".into(),
                    ))
                }
            };
            let token = match &ctx.addr {
                Some(addr) => WireClient::connect(addr.as_str())?.tsa_stamp(digest)?,
                None => {
                    let (mut store, _rng) = ctx.open_store()?;
                    store.tsa_stamp(&digest, ctx.clock.now())?
                }
            };
            Report::new()
                .put("tsa", token.tsa_id.as_str())
                .put("serial", token.serial)
                .put("time", token.time)
                .put("document_hash", hex::encode(&token.document_hash))
                .print(ctx.output);
            Ok(0)
        }
    }
}

fn cmd_operator(ctx: &Ctx, cmd: OperatorCommands) -> Result<i32> {
    match cmd {
        OperatorCommands::Register { root_id, operator_id, credential_out, scheme, validity_days } => {
            let (mut store, mut rng) = ctx.open_store()?;
            let registry = SchemeRegistry::builtin();
            let (certificate, key) = store.register_operator(
                &root_id,
                &operator_id,
                &scheme,
                validity_days,
                ctx.clock.now(),
                &registry,
                &mut rng,
            )?;
            save_credential(&credential_out, &certificate, &key)?;
            Report::new()
                .put("operator", operator_id.as_str())
                .put("serial", certificate.serial())
                .put("credential_file", credential_out.display().to_string())
                .print(ctx.output);
            Ok(0)
        }
    }
}
