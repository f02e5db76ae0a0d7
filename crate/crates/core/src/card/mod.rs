//! Emulated national identity card.
//!
//! The card carries three applets. The ID applet serves signed public
//! data files with no access control at all; anyone with a reader can
//! check the issuer's signatures offline. The PKI applet guards two key
//! pairs behind a PIN: the authentication key unlocks once per secure
//! channel, the signature key additionally demands a per-operation
//! confirmation. The MOC applet compares fingerprint probes against the
//! enrolled template without ever releasing it.
//!
//! All protected traffic crosses one MAC'd secure channel at a time
//! (see `channel`); opening a new channel retires the old one and clears
//! any PIN verification it carried.

pub mod channel;
pub mod moc;
pub mod sam;

use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::cert::Certificate;
use crate::encoding::{RecordBuilder, RecordView};
use crate::error::Error;
use crate::scheme::{KeyPair, SchemeRegistry};
use crate::seal;
use crate::Result;

use channel::{
    build_mac_frame, build_plain_frame, derive_session_key, key_confirmation, parse_frame,
    verify_mac, AppletId, ChannelState, Direction, HostChannel, TrafficDirection, INS_MATCH,
    INS_OPEN, INS_READ_TEMPLATE, INS_SIGN, INS_UNBLOCK_PIN, INS_VERIFY_PIN, STATUS_CHANNEL_CLOSED,
    STATUS_CHANNEL_REFUSED, STATUS_CHANNEL_REQUIRED, STATUS_MALFORMED, STATUS_OK,
    STATUS_PIN_BLOCKED, STATUS_PIN_REQUIRED, STATUS_UNAUTHORIZED, STATUS_WRONG_APPLET,
};
use moc::{FingerprintTemplate, MocApplet};
use sam::Sam;

pub const PIN_RETRY_LIMIT: u8 = 3;
const CARD_SECRETS_LABEL: &[u8] = b"card-secrets";

// ---- Public data files ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicDataFile {
    pub file_id: String,
    pub content: Vec<u8>,
    pub issuer_signature: Vec<u8>,
}

impl PublicDataFile {
    /// Length-prefixing the id keeps ("ab", "c") and ("a", "bc") distinct.
    pub fn signing_bytes(file_id: &str, content: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + file_id.len() + content.len());
        out.extend_from_slice(&(file_id.len() as u32).to_be_bytes());
        out.extend_from_slice(file_id.as_bytes());
        out.extend_from_slice(content);
        out
    }

    pub fn signed(
        file_id: impl Into<String>,
        content: Vec<u8>,
        issuer_key: &KeyPair,
        registry: &SchemeRegistry,
    ) -> Result<Self> {
        let file_id = file_id.into();
        let scheme = registry.get(&issuer_key.scheme_id)?;
        let issuer_signature =
            scheme.sign(issuer_key.private_key_bytes(), &Self::signing_bytes(&file_id, &content))?;
        Ok(Self { file_id, content, issuer_signature })
    }

    pub fn verify(&self, issuer_cert: &Certificate, registry: &SchemeRegistry) -> bool {
        registry
            .get(&issuer_cert.tbs.scheme_id)
            .map(|s| {
                s.verify(
                    &issuer_cert.tbs.public_key,
                    &Self::signing_bytes(&self.file_id, &self.content),
                    &self.issuer_signature,
                )
            })
            .unwrap_or(false)
    }

    pub fn encode(&self) -> Vec<u8> {
        RecordBuilder::new()
            .str("file_id", &self.file_id)
            .raw("content", self.content.clone())
            .raw("issuer_signature", self.issuer_signature.clone())
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let view = RecordView::parse(bytes)?;
        Ok(Self {
            file_id: view.str("file_id")?,
            content: view.raw("content")?.to_vec(),
            issuer_signature: view.raw("issuer_signature")?.to_vec(),
        })
    }
}

// ---- PIN ----

pub fn pin_format_ok(pin: &str) -> bool {
    (4..=8).contains(&pin.len()) && pin.bytes().all(|b| b.is_ascii_digit())
}

pub fn hash_pin(card_id: &str, pin: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"pin");
    hasher.update(card_id.as_bytes());
    hasher.update(pin.as_bytes());
    hasher.finalize().into()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PinState {
    pin_hash: [u8; 32],
    pub retries_remaining: u8,
    pub verified_in_session: bool,
}

impl PinState {
    pub fn new(pin_hash: [u8; 32]) -> Self {
        Self { pin_hash, retries_remaining: PIN_RETRY_LIMIT, verified_in_session: false }
    }

    /// Blocked is not stored; it is the retry counter hitting zero.
    pub fn blocked(&self) -> bool {
        self.retries_remaining == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PinVerifyOutcome {
    Ok,
    Wrong { retries_remaining: u8 },
    Blocked,
}

impl PinVerifyOutcome {
    pub fn token(&self) -> &'static str {
        match self {
            PinVerifyOutcome::Ok => "ok",
            PinVerifyOutcome::Wrong { .. } => "wrong",
            PinVerifyOutcome::Blocked => "blocked",
        }
    }
}

// ---- Applets ----

#[derive(Debug, Clone)]
pub struct PkiApplet {
    pub auth_pair: KeyPair,
    pub auth_cert_serial: u64,
    pub sign_pair: KeyPair,
    pub sign_cert_serial: u64,
    pub pin: PinState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CardKey {
    Auth,
    Sign,
}

impl CardKey {
    pub fn token(&self) -> &'static str {
        match self {
            CardKey::Auth => "auth",
            CardKey::Sign => "sign",
        }
    }
}

/// Everything personalization burns into a card.
pub struct Personalization {
    pub card_id: String,
    pub data_files: Vec<PublicDataFile>,
    pub pin: String,
    pub auth_pair: KeyPair,
    pub auth_cert_serial: u64,
    pub sign_pair: KeyPair,
    pub sign_cert_serial: u64,
    pub template: FingerprintTemplate,
    pub match_threshold: f64,
    pub sm_master_key_label: String,
    pub sm_master_key: [u8; 32],
    pub authority_certificate: Certificate,
}

#[derive(Clone)]
pub struct Card {
    pub card_id: String,
    id_applet: Vec<PublicDataFile>,
    pki: PkiApplet,
    moc: MocApplet,
    pub sm_master_key_label: String,
    sm_master_key: [u8; 32],
    /// The issuing authority's certificate, present so the card can check
    /// unblock credentials and relying parties can fetch the anchor hint.
    pub authority_certificate: Certificate,
    active_channel: Option<ChannelState>,
}

impl std::fmt::Debug for Card {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Card")
            .field("card_id", &self.card_id)
            .field("files", &self.id_applet.len())
            .field("retries_remaining", &self.pki.pin.retries_remaining)
            .field("channel_open", &self.active_channel.as_ref().map(|c| c.open))
            .finish()
    }
}

impl Card {
    pub fn personalize(p: Personalization) -> Result<Self> {
        if !pin_format_ok(&p.pin) {
            return Err(Error::RequestMalformed(
                "PIN must be 4 to 8 ASCII digits".into(),
            ));
        }
        let pin_hash = hash_pin(&p.card_id, &p.pin);
        Ok(Self {
            card_id: p.card_id,
            id_applet: p.data_files,
            pki: PkiApplet {
                auth_pair: p.auth_pair,
                auth_cert_serial: p.auth_cert_serial,
                sign_pair: p.sign_pair,
                sign_cert_serial: p.sign_cert_serial,
                pin: PinState::new(pin_hash),
            },
            moc: MocApplet::new(p.template, p.match_threshold)?,
            sm_master_key_label: p.sm_master_key_label,
            sm_master_key: p.sm_master_key,
            authority_certificate: p.authority_certificate,
            active_channel: None,
        })
    }

    /// The one operation that needs neither channel nor PIN; it works on a
    /// blocked card and with every service stopped.
    pub fn read_public_data(&self) -> &[PublicDataFile] {
        &self.id_applet
    }

    pub fn auth_cert_serial(&self) -> u64 {
        self.pki.auth_cert_serial
    }

    pub fn sign_cert_serial(&self) -> u64 {
        self.pki.sign_cert_serial
    }

    pub fn pin_retries_remaining(&self) -> u8 {
        self.pki.pin.retries_remaining
    }

    pub fn pin_blocked(&self) -> bool {
        self.pki.pin.blocked()
    }

    pub fn enrolled_template(&self) -> &FingerprintTemplate {
        &self.moc.template
    }

    /// Digest over every field that survives power-off. Two cards agree
    /// here exactly when a store round trip would be observably identical;
    /// transient channel state is excluded.
    pub fn state_fingerprint(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.card_id.as_bytes());
        for file in &self.id_applet {
            hasher.update(file.encode());
        }
        hasher.update(self.pki.auth_pair.encode_secret());
        hasher.update(self.pki.auth_cert_serial.to_be_bytes());
        hasher.update(self.pki.sign_pair.encode_secret());
        hasher.update(self.pki.sign_cert_serial.to_be_bytes());
        hasher.update(self.pki.pin.pin_hash);
        hasher.update([self.pki.pin.retries_remaining]);
        hasher.update(self.moc.template.encode());
        hasher.update(self.moc.threshold.to_bits().to_be_bytes());
        hasher.update(self.sm_master_key_label.as_bytes());
        hasher.update(self.sm_master_key);
        hasher.update(self.authority_certificate.encode());
        hasher.finalize().into()
    }

    // ---- Card-side frame processor ----

    /// Handles one command frame and returns the response frame. This is
    /// the card's entire external surface besides `read_public_data`.
    pub fn process(&mut self, registry: &SchemeRegistry, frame_bytes: &[u8]) -> Vec<u8> {
        let Ok((ins, rest)) = parse_frame(frame_bytes) else {
            return build_plain_frame(STATUS_MALFORMED, &[]);
        };
        if ins == INS_OPEN {
            return self.handle_open(rest);
        }
        // Every other instruction needs the active channel.
        let Some(state) = self.active_channel.as_ref() else {
            return build_plain_frame(STATUS_CHANNEL_REQUIRED, &[]);
        };
        if !state.open {
            return build_plain_frame(STATUS_CHANNEL_CLOSED, &[]);
        }
        let key = state.session_key;
        let counter = state.recv_counter;
        let payload = match verify_mac(&key, Direction::Command, counter, ins, rest) {
            Ok(payload) => payload,
            Err(_) => {
                // MAC or counter mismatch: the channel dies permanently.
                if let Some(state) = self.active_channel.as_mut() {
                    state.open = false;
                }
                self.pki.pin.verified_in_session = false;
                return build_plain_frame(STATUS_CHANNEL_CLOSED, &[]);
            }
        };
        let applet = state.applet;
        self.active_channel.as_mut().expect("checked above").recv_counter += 1;
        let (status, response) = self.dispatch(registry, applet, ins, &payload);
        let state = self.active_channel.as_mut().expect("channel still installed");
        let framed =
            build_mac_frame(&state.session_key, Direction::Response, state.send_counter, status, &response);
        state.send_counter += 1;
        framed
    }

    fn handle_open(&mut self, rest: &[u8]) -> Vec<u8> {
        if rest.len() != 1 + channel::NONCE_LEN + 32 {
            return build_plain_frame(STATUS_MALFORMED, &[]);
        }
        let Ok(applet) = AppletId::from_byte(rest[0]) else {
            return build_plain_frame(STATUS_MALFORMED, &[]);
        };
        let nonce = &rest[1..1 + channel::NONCE_LEN];
        let claimed_confirm = &rest[1 + channel::NONCE_LEN..];
        let session_key = derive_session_key(&self.sm_master_key, &self.card_id, nonce);
        if key_confirmation(&session_key, nonce) != claimed_confirm {
            // The terminal's SAM holds a different master key; refuse
            // before creating any state.
            return build_plain_frame(STATUS_CHANNEL_REFUSED, &[]);
        }
        // A new session displaces the previous one and its PIN standing.
        self.active_channel = Some(ChannelState::new(applet, session_key));
        self.pki.pin.verified_in_session = false;
        build_plain_frame(STATUS_OK, &[])
    }

    fn dispatch(
        &mut self,
        registry: &SchemeRegistry,
        applet: AppletId,
        ins: u8,
        payload: &[u8],
    ) -> (u8, Vec<u8>) {
        match (applet, ins) {
            (AppletId::Pki, INS_VERIFY_PIN) => self.op_verify_pin(payload),
            (AppletId::Pki, INS_UNBLOCK_PIN) => self.op_unblock_pin(registry, payload),
            (AppletId::Pki, INS_SIGN) => self.op_sign(registry, payload),
            (AppletId::Moc, INS_READ_TEMPLATE) => (STATUS_OK, self.moc.template.encode()),
            (AppletId::Moc, INS_MATCH) => self.op_match(payload),
            (_, INS_VERIFY_PIN | INS_UNBLOCK_PIN | INS_SIGN | INS_READ_TEMPLATE | INS_MATCH) => {
                (STATUS_WRONG_APPLET, Vec::new())
            }
            _ => (STATUS_MALFORMED, Vec::new()),
        }
    }

    fn op_verify_pin(&mut self, payload: &[u8]) -> (u8, Vec<u8>) {
        let Ok(attempt) = std::str::from_utf8(payload) else {
            return (STATUS_MALFORMED, Vec::new());
        };
        let outcome = if self.pki.pin.blocked() {
            PinVerifyOutcome::Blocked
        } else if hash_pin(&self.card_id, attempt) == self.pki.pin.pin_hash {
            self.pki.pin.verified_in_session = true;
            self.pki.pin.retries_remaining = PIN_RETRY_LIMIT;
            PinVerifyOutcome::Ok
        } else {
            self.pki.pin.verified_in_session = false;
            self.pki.pin.retries_remaining -= 1;
            if self.pki.pin.blocked() {
                PinVerifyOutcome::Blocked
            } else {
                PinVerifyOutcome::Wrong { retries_remaining: self.pki.pin.retries_remaining }
            }
        };
        let body = RecordBuilder::new()
            .str("result", outcome.token())
            .u64("retries", u64::from(self.pki.pin.retries_remaining))
            .finish();
        (STATUS_OK, body)
    }

    fn op_unblock_pin(&mut self, registry: &SchemeRegistry, payload: &[u8]) -> (u8, Vec<u8>) {
        let Ok(view) = RecordView::parse(payload) else {
            return (STATUS_MALFORMED, Vec::new());
        };
        let (Ok(admin_sig), Ok(new_pin)) = (view.raw("admin_sig"), view.str("new_pin")) else {
            return (STATUS_MALFORMED, Vec::new());
        };
        if !pin_format_ok(&new_pin) {
            return (STATUS_MALFORMED, Vec::new());
        }
        let message = unblock_message(&self.card_id);
        let authorized = registry
            .get(&self.authority_certificate.tbs.scheme_id)
            .map(|s| s.verify(&self.authority_certificate.tbs.public_key, &message, admin_sig))
            .unwrap_or(false);
        if !authorized {
            return (STATUS_UNAUTHORIZED, Vec::new());
        }
        // Unblocking a card that was not blocked still resets the counter.
        self.pki.pin.pin_hash = hash_pin(&self.card_id, &new_pin);
        self.pki.pin.retries_remaining = PIN_RETRY_LIMIT;
        self.pki.pin.verified_in_session = false;
        (STATUS_OK, Vec::new())
    }

    fn op_sign(&mut self, registry: &SchemeRegistry, payload: &[u8]) -> (u8, Vec<u8>) {
        let Ok(view) = RecordView::parse(payload) else {
            return (STATUS_MALFORMED, Vec::new());
        };
        let (Ok(key_token), Ok(hash), Ok(confirm)) =
            (view.str("key"), view.raw("hash"), view.bool("confirm"))
        else {
            return (STATUS_MALFORMED, Vec::new());
        };
        if hash.len() != 32 {
            return (STATUS_MALFORMED, Vec::new());
        }
        let key = match key_token.as_str() {
            "auth" => CardKey::Auth,
            "sign" => CardKey::Sign,
            _ => return (STATUS_MALFORMED, Vec::new()),
        };
        if self.pki.pin.blocked() {
            return (STATUS_PIN_BLOCKED, Vec::new());
        }
        if !self.pki.pin.verified_in_session {
            return (STATUS_PIN_REQUIRED, Vec::new());
        }
        // Non-repudiation keys demand explicit consent for each signature;
        // session-level PIN standing is not enough.
        if key == CardKey::Sign && !confirm {
            return (STATUS_PIN_REQUIRED, Vec::new());
        }
        let pair = match key {
            CardKey::Auth => &self.pki.auth_pair,
            CardKey::Sign => &self.pki.sign_pair,
        };
        match registry.get(&pair.scheme_id).and_then(|s| s.sign(pair.private_key_bytes(), hash)) {
            Ok(signature) => (STATUS_OK, signature),
            Err(_) => (STATUS_MALFORMED, Vec::new()),
        }
    }

    fn op_match(&mut self, payload: &[u8]) -> (u8, Vec<u8>) {
        let Ok(probe) = FingerprintTemplate::decode(payload) else {
            return (STATUS_MALFORMED, Vec::new());
        };
        let (decision, score) = self.moc.matches(&probe);
        let body = RecordBuilder::new().bool("decision", decision).f64("score", score).finish();
        (STATUS_OK, body)
    }

    // ---- Persistence ----

    /// Stored form: public fields in the clear, key material and the
    /// channel master key sealed. Session state (open channel, PIN
    /// standing) deliberately does not survive storage.
    pub fn encode_stored(&self, sealing_key: &[u8; 32], rng: &mut dyn RngCore) -> Result<Vec<u8>> {
        let secrets = RecordBuilder::new()
            .raw("auth_pair", self.pki.auth_pair.encode_secret())
            .raw("sign_pair", self.pki.sign_pair.encode_secret())
            .raw("sm_master_key", self.sm_master_key.to_vec())
            .finish();
        let sealed = seal::seal(sealing_key, rng, &secrets, CARD_SECRETS_LABEL)?;
        let files: Vec<Vec<u8>> = self.id_applet.iter().map(PublicDataFile::encode).collect();
        Ok(RecordBuilder::new()
            .str("card_id", &self.card_id)
            .list("files", &files)
            .u64("auth_cert_serial", self.pki.auth_cert_serial)
            .u64("sign_cert_serial", self.pki.sign_cert_serial)
            .raw("pin_hash", self.pki.pin.pin_hash.to_vec())
            .u64("retries_remaining", u64::from(self.pki.pin.retries_remaining))
            .raw("template", self.moc.template.encode())
            .f64("match_threshold", self.moc.threshold)
            .str("sm_master_key_label", &self.sm_master_key_label)
            .raw("authority_certificate", self.authority_certificate.encode())
            .raw("secrets", sealed)
            .finish())
    }

    pub fn decode_stored(sealing_key: &[u8; 32], bytes: &[u8]) -> Result<Self> {
        let view = RecordView::parse(bytes)?;
        let opened = seal::open(sealing_key, view.raw("secrets")?, CARD_SECRETS_LABEL)?;
        let secrets = RecordView::parse(&opened).map_err(|_| Error::SealedDataInvalid)?;
        let auth_pair = KeyPair::decode_secret(secrets.raw("auth_pair")?)?;
        let sign_pair = KeyPair::decode_secret(secrets.raw("sign_pair")?)?;
        let sm_master_key: [u8; 32] = secrets
            .raw("sm_master_key")?
            .try_into()
            .map_err(|_| Error::MalformedEncoding("master key must be 32 bytes".into()))?;
        let mut id_applet = Vec::new();
        for item in view.list("files")? {
            id_applet.push(PublicDataFile::decode(&item)?);
        }
        let pin_hash: [u8; 32] = view
            .raw("pin_hash")?
            .try_into()
            .map_err(|_| Error::MalformedEncoding("pin hash must be 32 bytes".into()))?;
        let retries = view.u64("retries_remaining")?;
        if retries > u64::from(PIN_RETRY_LIMIT) {
            return Err(Error::MalformedEncoding(format!("retry counter {retries} out of range")));
        }
        Ok(Self {
            card_id: view.str("card_id")?,
            id_applet,
            pki: PkiApplet {
                auth_pair,
                auth_cert_serial: view.u64("auth_cert_serial")?,
                sign_pair,
                sign_cert_serial: view.u64("sign_cert_serial")?,
                pin: PinState {
                    pin_hash,
                    retries_remaining: retries as u8,
                    verified_in_session: false,
                },
            },
            moc: MocApplet::new(
                FingerprintTemplate::decode(view.raw("template")?)?,
                view.f64("match_threshold")?,
            )?,
            sm_master_key_label: view.str("sm_master_key_label")?,
            sm_master_key,
            authority_certificate: Certificate::decode(view.raw("authority_certificate")?)?,
            active_channel: None,
        })
    }
}

/// Message an issuing authority signs to authorize a PIN unblock.
pub fn unblock_message(card_id: &str) -> Vec<u8> {
    let mut message = card_id.as_bytes().to_vec();
    message.extend_from_slice(b"unblock");
    message
}

// ---- Terminal-side operations ----

pub fn open_secure_channel(
    card: &mut Card,
    sam: &Sam,
    applet: AppletId,
    rng: &mut dyn RngCore,
) -> Result<HostChannel> {
    let master = sam.master_key(&card.sm_master_key_label).ok_or_else(|| {
        Error::ChannelRefused(format!(
            "SAM {} holds no master key labelled {:?}",
            sam.sam_id, card.sm_master_key_label
        ))
    })?;
    let mut nonce = [0u8; channel::NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let session_key = derive_session_key(master, &card.card_id, &nonce);
    let mut payload = Vec::with_capacity(1 + nonce.len() + 32);
    payload.push(applet.byte());
    payload.extend_from_slice(&nonce);
    payload.extend_from_slice(&key_confirmation(&session_key, &nonce));
    let request = build_plain_frame(INS_OPEN, &payload);
    let registry = SchemeRegistry::empty(); // OPEN touches no signature scheme
    let response = card.process(&registry, &request);
    let mut host = HostChannel::new(applet, session_key);
    host.record(TrafficDirection::ToCard, &request);
    host.record(TrafficDirection::FromCard, &response);
    let (status, _) = parse_frame(&response)?;
    if status != STATUS_OK {
        return Err(channel::status_error(status));
    }
    Ok(host)
}

fn run_command(
    host: &mut HostChannel,
    card: &mut Card,
    registry: &SchemeRegistry,
    ins: u8,
    payload: &[u8],
) -> Result<Vec<u8>> {
    let mut transport = |frame: &[u8]| card.process(registry, frame);
    host.command(&mut transport, ins, payload)
}

pub fn verify_pin(
    host: &mut HostChannel,
    card: &mut Card,
    registry: &SchemeRegistry,
    pin: &str,
) -> Result<PinVerifyOutcome> {
    let body = run_command(host, card, registry, INS_VERIFY_PIN, pin.as_bytes())?;
    let view = RecordView::parse(&body)?;
    let retries = view.u64("retries")?;
    match view.str("result")?.as_str() {
        "ok" => Ok(PinVerifyOutcome::Ok),
        "wrong" => Ok(PinVerifyOutcome::Wrong { retries_remaining: retries as u8 }),
        "blocked" => Ok(PinVerifyOutcome::Blocked),
        other => Err(Error::MalformedEncoding(format!("unknown verify result {other:?}"))),
    }
}

pub fn unblock_pin(
    host: &mut HostChannel,
    card: &mut Card,
    registry: &SchemeRegistry,
    admin_signature: &[u8],
    new_pin: &str,
) -> Result<()> {
    let payload = RecordBuilder::new()
        .raw("admin_sig", admin_signature.to_vec())
        .str("new_pin", new_pin)
        .finish();
    run_command(host, card, registry, INS_UNBLOCK_PIN, &payload)?;
    Ok(())
}

pub fn card_sign(
    host: &mut HostChannel,
    card: &mut Card,
    registry: &SchemeRegistry,
    key: CardKey,
    payload_hash: &[u8; 32],
    confirm: bool,
) -> Result<Vec<u8>> {
    let payload = RecordBuilder::new()
        .str("key", key.token())
        .raw("hash", payload_hash.to_vec())
        .bool("confirm", confirm)
        .finish();
    run_command(host, card, registry, INS_SIGN, &payload)
}

pub fn read_fingerprint_template(
    host: &mut HostChannel,
    card: &mut Card,
    registry: &SchemeRegistry,
) -> Result<FingerprintTemplate> {
    let body = run_command(host, card, registry, INS_READ_TEMPLATE, &[])?;
    FingerprintTemplate::decode(&body)
}

pub fn moc_match(
    host: &mut HostChannel,
    card: &mut Card,
    registry: &SchemeRegistry,
    probe: &FingerprintTemplate,
) -> Result<(bool, f64)> {
    let body = run_command(host, card, registry, INS_MATCH, &probe.encode())?;
    let view = RecordView::parse(&body)?;
    Ok((view.bool("decision")?, view.f64("score")?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cert::{sign_certificate, CertificateProfile, TbsCertificate};
    use crate::scheme::TEST_MAC;
    use moc::Minutia;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const T0: u64 = 1_700_000_000;

    struct Rig {
        registry: SchemeRegistry,
        card: Card,
        sam: Sam,
        issuer_key: KeyPair,
        rng: ChaCha20Rng,
    }

    fn template() -> FingerprintTemplate {
        FingerprintTemplate::new(
            vec![
                Minutia { x: 40, y: 60, angle: 90 },
                Minutia { x: 200, y: 210, angle: 180 },
                Minutia { x: 333, y: 47, angle: 10 },
                Minutia { x: 480, y: 480, angle: 300 },
            ],
            85,
        )
        .unwrap()
    }

    fn rig() -> Rig {
        let registry = SchemeRegistry::builtin();
        let mut rng = ChaCha20Rng::seed_from_u64(777);
        let issuer_key = registry.generate_key_pair(TEST_MAC, 2048, &mut rng).unwrap();
        let issuer_cert = sign_certificate(
            TbsCertificate {
                serial: 1,
                subject_id: "population".into(),
                issuer_id: "population".into(),
                profile: CertificateProfile::Ca,
                public_key: issuer_key.public_key.clone(),
                scheme_id: issuer_key.scheme_id.clone(),
                key_length_bits: 2048,
                not_before: T0,
                not_after: T0 + 1_000_000,
                policy_id: "pol".into(),
                role_attributes: None,
            },
            &issuer_key,
            &registry,
        )
        .unwrap();
        let auth_pair = registry.generate_key_pair(TEST_MAC, 4096, &mut rng).unwrap();
        let sign_pair = registry.generate_key_pair(TEST_MAC, 4096, &mut rng).unwrap();
        let mut master = [0u8; 32];
        rng.fill_bytes(&mut master);
        let files = vec![
            PublicDataFile::signed("bio", b"name=Aisha;born=1990".to_vec(), &issuer_key, &registry)
                .unwrap(),
            PublicDataFile::signed("portrait", vec![0xFF, 0xD8, 0x00, 0x11], &issuer_key, &registry)
                .unwrap(),
        ];
        let card = Card::personalize(Personalization {
            card_id: "card-1001".into(),
            data_files: files,
            pin: "4711".into(),
            auth_pair,
            auth_cert_serial: 10,
            sign_pair,
            sign_cert_serial: 11,
            template: template(),
            match_threshold: moc::DEFAULT_THRESHOLD,
            sm_master_key_label: "batch-2026".into(),
            sm_master_key: master,
            authority_certificate: issuer_cert,
        })
        .unwrap();
        let mut sam = Sam::new("sam-1");
        sam.install_master_key("batch-2026", master);
        Rig { registry, card, sam, issuer_key, rng }
    }

    fn open(rig: &mut Rig, applet: AppletId) -> HostChannel {
        open_secure_channel(&mut rig.card, &rig.sam, applet, &mut rig.rng).unwrap()
    }

    #[test]
    fn public_data_reads_without_channel_even_when_blocked() {
        let mut rig = rig();
        let mut ch = open(&mut rig, AppletId::Pki);
        for _ in 0..3 {
            verify_pin(&mut ch, &mut rig.card, &rig.registry, "0000").unwrap();
        }
        assert!(rig.card.pin_blocked());
        let files = rig.card.read_public_data();
        assert_eq!(files.len(), 2);
        let authority = rig.card.authority_certificate.clone();
        assert!(files.iter().all(|f| f.verify(&authority, &rig.registry)));
    }

    #[test]
    fn tampered_file_fails_verification() {
        let rig = rig();
        let mut file = rig.card.read_public_data()[0].clone();
        file.content[0] ^= 1;
        assert!(!file.verify(&rig.card.authority_certificate, &rig.registry));
    }

    #[test]
    fn wrong_sam_key_is_refused_without_creating_a_channel() {
        let mut rig = rig();
        let mut wrong_sam = Sam::new("sam-x");
        wrong_sam.install_master_key("batch-2026", [0u8; 32]);
        let err = open_secure_channel(&mut rig.card, &wrong_sam, AppletId::Pki, &mut rig.rng)
            .unwrap_err();
        assert_eq!(err.code(), "channel-refused");
        let mut no_key_sam = Sam::new("sam-y");
        no_key_sam.install_master_key("other-batch", [1u8; 32]);
        let err = open_secure_channel(&mut rig.card, &no_key_sam, AppletId::Pki, &mut rig.rng)
            .unwrap_err();
        assert_eq!(err.code(), "channel-refused");
        // No channel means even PIN verification is unreachable.
        assert!(rig.card.active_channel.is_none());
    }

    #[test]
    fn pin_verification_happy_and_retry_paths() {
        let mut rig = rig();
        let mut ch = open(&mut rig, AppletId::Pki);
        assert_eq!(
            verify_pin(&mut ch, &mut rig.card, &rig.registry, "9999").unwrap(),
            PinVerifyOutcome::Wrong { retries_remaining: 2 }
        );
        assert_eq!(
            verify_pin(&mut ch, &mut rig.card, &rig.registry, "4711").unwrap(),
            PinVerifyOutcome::Ok
        );
        assert_eq!(rig.card.pin_retries_remaining(), PIN_RETRY_LIMIT, "success resets retries");
    }

    #[test]
    fn three_wrong_attempts_block_and_correct_pin_stays_blocked() {
        let mut rig = rig();
        let mut ch = open(&mut rig, AppletId::Pki);
        assert_eq!(
            verify_pin(&mut ch, &mut rig.card, &rig.registry, "0001").unwrap(),
            PinVerifyOutcome::Wrong { retries_remaining: 2 }
        );
        assert_eq!(
            verify_pin(&mut ch, &mut rig.card, &rig.registry, "0002").unwrap(),
            PinVerifyOutcome::Wrong { retries_remaining: 1 }
        );
        assert_eq!(
            verify_pin(&mut ch, &mut rig.card, &rig.registry, "0003").unwrap(),
            PinVerifyOutcome::Blocked
        );
        assert_eq!(
            verify_pin(&mut ch, &mut rig.card, &rig.registry, "4711").unwrap(),
            PinVerifyOutcome::Blocked,
            "correct PIN cannot clear a blocked card"
        );
        let hash = [7u8; 32];
        let err = card_sign(&mut ch, &mut rig.card, &rig.registry, CardKey::Auth, &hash, false)
            .unwrap_err();
        assert_eq!(err.code(), "pin-blocked");
    }

    #[test]
    fn unblock_restores_service_with_new_pin() {
        let mut rig = rig();
        let mut ch = open(&mut rig, AppletId::Pki);
        for pin in ["1", "2", "3"].map(|d| format!("000{d}")) {
            verify_pin(&mut ch, &mut rig.card, &rig.registry, &pin).unwrap();
        }
        assert!(rig.card.pin_blocked());
        let scheme = rig.registry.get(TEST_MAC).unwrap();
        let admin_sig = scheme
            .sign(rig.issuer_key.private_key_bytes(), &unblock_message("card-1001"))
            .unwrap();
        unblock_pin(&mut ch, &mut rig.card, &rig.registry, &admin_sig, "862004").unwrap();
        assert!(!rig.card.pin_blocked());
        assert_eq!(
            verify_pin(&mut ch, &mut rig.card, &rig.registry, "4711").unwrap(),
            PinVerifyOutcome::Wrong { retries_remaining: 2 },
            "old PIN no longer matches"
        );
        assert_eq!(
            verify_pin(&mut ch, &mut rig.card, &rig.registry, "862004").unwrap(),
            PinVerifyOutcome::Ok
        );
    }

    #[test]
    fn forged_unblock_credential_changes_nothing() {
        let mut rig = rig();
        let mut ch = open(&mut rig, AppletId::Pki);
        let forged = vec![0u8; 32];
        let err = unblock_pin(&mut ch, &mut rig.card, &rig.registry, &forged, "5555").unwrap_err();
        assert_eq!(err.code(), "unauthorized");
        assert_eq!(
            verify_pin(&mut ch, &mut rig.card, &rig.registry, "4711").unwrap(),
            PinVerifyOutcome::Ok,
            "original PIN still in force"
        );
    }

    #[test]
    fn unblock_on_unblocked_card_resets_retries() {
        let mut rig = rig();
        let mut ch = open(&mut rig, AppletId::Pki);
        verify_pin(&mut ch, &mut rig.card, &rig.registry, "0000").unwrap();
        assert_eq!(rig.card.pin_retries_remaining(), 2);
        let scheme = rig.registry.get(TEST_MAC).unwrap();
        let admin_sig = scheme
            .sign(rig.issuer_key.private_key_bytes(), &unblock_message("card-1001"))
            .unwrap();
        unblock_pin(&mut ch, &mut rig.card, &rig.registry, &admin_sig, "4711").unwrap();
        assert_eq!(rig.card.pin_retries_remaining(), PIN_RETRY_LIMIT);
    }

    #[test]
    fn auth_key_signs_after_pin_and_refuses_before() {
        let mut rig = rig();
        let mut ch = open(&mut rig, AppletId::Pki);
        let hash = [0x5Au8; 32];
        let err = card_sign(&mut ch, &mut rig.card, &rig.registry, CardKey::Auth, &hash, false)
            .unwrap_err();
        assert_eq!(err.code(), "pin-required");
        verify_pin(&mut ch, &mut rig.card, &rig.registry, "4711").unwrap();
        let signature =
            card_sign(&mut ch, &mut rig.card, &rig.registry, CardKey::Auth, &hash, false).unwrap();
        let scheme = rig.registry.get(TEST_MAC).unwrap();
        assert!(scheme.verify(&rig.card.pki.auth_pair.public_key, &hash, &signature));
        // Same channel, second signature: PIN standing persists for auth.
        assert!(card_sign(&mut ch, &mut rig.card, &rig.registry, CardKey::Auth, &hash, false).is_ok());
    }

    #[test]
    fn sign_key_needs_per_operation_confirmation() {
        let mut rig = rig();
        let mut ch = open(&mut rig, AppletId::Pki);
        verify_pin(&mut ch, &mut rig.card, &rig.registry, "4711").unwrap();
        let hash = [0x11u8; 32];
        let err = card_sign(&mut ch, &mut rig.card, &rig.registry, CardKey::Sign, &hash, false)
            .unwrap_err();
        assert_eq!(err.code(), "pin-required");
        let signature =
            card_sign(&mut ch, &mut rig.card, &rig.registry, CardKey::Sign, &hash, true).unwrap();
        let scheme = rig.registry.get(TEST_MAC).unwrap();
        assert!(scheme.verify(&rig.card.pki.sign_pair.public_key, &hash, &signature));
    }

    #[test]
    fn fresh_channel_requires_fresh_pin() {
        let mut rig = rig();
        let mut ch = open(&mut rig, AppletId::Pki);
        verify_pin(&mut ch, &mut rig.card, &rig.registry, "4711").unwrap();
        // Opening a new channel displaces the old one and its PIN standing.
        let mut ch2 = open(&mut rig, AppletId::Pki);
        let hash = [1u8; 32];
        let err = card_sign(&mut ch2, &mut rig.card, &rig.registry, CardKey::Auth, &hash, false)
            .unwrap_err();
        assert_eq!(err.code(), "pin-required");
        // The displaced channel is dead at the card.
        let err = card_sign(&mut ch, &mut rig.card, &rig.registry, CardKey::Auth, &hash, false)
            .unwrap_err();
        assert!(matches!(err.code(), "channel-closed" | "data-tampered"), "got {}", err.code());
    }

    #[test]
    fn signatures_differ_per_payload_and_always_verify() {
        let mut rig = rig();
        let mut ch = open(&mut rig, AppletId::Pki);
        verify_pin(&mut ch, &mut rig.card, &rig.registry, "4711").unwrap();
        let scheme = rig.registry.get(TEST_MAC).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..50u8 {
            let mut hash = [0u8; 32];
            hash[0] = i;
            let sig = card_sign(&mut ch, &mut rig.card, &rig.registry, CardKey::Auth, &hash, false)
                .unwrap();
            assert!(scheme.verify(&rig.card.pki.auth_pair.public_key, &hash, &sig));
            assert!(seen.insert(sig), "two payloads shared a signature");
        }
    }

    #[test]
    fn replayed_frame_kills_the_channel_permanently() {
        let mut rig = rig();
        let mut ch = open(&mut rig, AppletId::Pki);
        verify_pin(&mut ch, &mut rig.card, &rig.registry, "4711").unwrap();
        // Capture the last command frame and replay it verbatim.
        let replay = ch
            .traffic
            .iter()
            .rev()
            .find(|t| t.direction == TrafficDirection::ToCard)
            .unwrap()
            .frame
            .clone();
        let response = rig.card.process(&rig.registry, &replay);
        let (status, _) = parse_frame(&response).unwrap();
        assert_eq!(status, STATUS_CHANNEL_CLOSED);
        // Every subsequent message on this channel fails too.
        let err = verify_pin(&mut ch, &mut rig.card, &rig.registry, "4711").unwrap_err();
        assert_eq!(err.code(), "channel-closed");
        assert!(!rig.card.pki.pin.verified_in_session, "channel death clears PIN standing");
    }

    #[test]
    fn any_flipped_bit_closes_the_channel() {
        let mut base = rig();
        let ch = open(&mut base, AppletId::Pki);
        let frame = build_mac_frame(
            ch.session_key(),
            Direction::Command,
            0,
            INS_VERIFY_PIN,
            b"4711",
        );
        for bit in [16usize, 40, frame.len() * 8 - 3] {
            let mut rig2 = rig();
            let mut corrupted = frame.clone();
            corrupted[bit / 8] ^= 1 << (bit % 8);
            // Fresh card, fresh channel, same deterministic keys.
            let ch2 = open(&mut rig2, AppletId::Pki);
            let response = rig2.card.process(&rig2.registry, &corrupted);
            let (status, _) = parse_frame(&response).unwrap();
            assert!(
                status == STATUS_CHANNEL_CLOSED || status == STATUS_MALFORMED,
                "bit {bit}: status {status:#04x}"
            );
            if status == STATUS_CHANNEL_CLOSED {
                let follow_up = rig2.card.process(
                    &rig2.registry,
                    &build_mac_frame(
                        ch2.session_key(),
                        Direction::Command,
                        0,
                        INS_VERIFY_PIN,
                        b"4711",
                    ),
                );
                let (status, _) = parse_frame(&follow_up).unwrap();
                assert_eq!(status, STATUS_CHANNEL_CLOSED, "closure must be permanent");
            }
        }
        let _ = ch;
    }

    #[test]
    fn pki_operations_refused_on_moc_channel_without_closing_it() {
        let mut rig = rig();
        let mut ch = open(&mut rig, AppletId::Moc);
        let err = verify_pin(&mut ch, &mut rig.card, &rig.registry, "4711").unwrap_err();
        assert_eq!(err.code(), "channel-required");
        // The channel survives the refusal.
        let read = read_fingerprint_template(&mut ch, &mut rig.card, &rig.registry).unwrap();
        assert_eq!(read, template());
    }

    #[test]
    fn template_read_needs_a_channel() {
        let mut rig = rig();
        let frame = build_plain_frame(INS_READ_TEMPLATE, &[]);
        let response = rig.card.process(&rig.registry, &frame);
        let (status, _) = parse_frame(&response).unwrap();
        assert_eq!(status, STATUS_CHANNEL_REQUIRED);
    }

    #[test]
    fn moc_match_agrees_with_matcher_and_never_stores_probe() {
        let mut rig = rig();
        let mut ch = open(&mut rig, AppletId::Moc);
        let probe = template();
        let (decision, score) = moc_match(&mut ch, &mut rig.card, &rig.registry, &probe).unwrap();
        assert!(decision);
        assert_eq!(score, 1.0);
        let empty = FingerprintTemplate::empty();
        let (decision, score) = moc_match(&mut ch, &mut rig.card, &rig.registry, &empty).unwrap();
        assert!(!decision);
        assert_eq!(score, 0.0);
        assert_eq!(rig.card.enrolled_template(), &template(), "probe must not overwrite template");
    }

    #[test]
    fn stored_card_round_trips_and_reveals_no_secrets() {
        let mut rig = rig();
        let sealing_key = [0x42u8; 32];
        let stored = rig.card.encode_stored(&sealing_key, &mut rig.rng).unwrap();
        // Neither private keys, master key, nor raw PIN may appear.
        let auth_priv = rig.card.pki.auth_pair.private_key_bytes().to_vec();
        let sign_priv = rig.card.pki.sign_pair.private_key_bytes().to_vec();
        let master = rig.card.sm_master_key.to_vec();
        for (name, needle) in
            [("auth key", &auth_priv), ("sign key", &sign_priv), ("master key", &master)]
        {
            assert!(
                !stored.windows(needle.len()).any(|w| w == &needle[..]),
                "{name} leaked into stored card bytes"
            );
        }
        assert!(
            !stored.windows(4).any(|w| w == b"4711"),
            "raw PIN leaked into stored card bytes"
        );
        let restored = Card::decode_stored(&sealing_key, &stored).unwrap();
        assert_eq!(restored.card_id, rig.card.card_id);
        assert_eq!(restored.read_public_data(), rig.card.read_public_data());
        assert_eq!(restored.pki.auth_pair, rig.card.pki.auth_pair);
        assert_eq!(restored.pki.pin.pin_hash, rig.card.pki.pin.pin_hash);
        assert!(!restored.pki.pin.verified_in_session);
        assert!(restored.active_channel.is_none());
        // Wrong sealing key cannot open the card.
        assert!(Card::decode_stored(&[0u8; 32], &stored).is_err());
    }

    #[test]
    fn pin_format_rules() {
        for good in ["0000", "12345678", "4711"] {
            assert!(pin_format_ok(good), "{good}");
        }
        for bad in ["123", "123456789", "12a4", "", "12 4"] {
            assert!(!pin_format_ok(bad), "{bad}");
        }
    }
}
