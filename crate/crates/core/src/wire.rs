//! Line-oriented wire protocol for the central services.
//!
//! One request per line: the operation name, one space, and a JSON
//! object. One response per line: `ok` or `err`, one space, and a JSON
//! object. JSON objects serialize with sorted keys, so a given request
//! or response has exactly one encoding; every response body carries the
//! store version observed when it was formed.
//!
//! Three faults belong to the protocol itself and use fixed codes:
//! an unreadable frame answers "malformed", a recognized frame naming
//! an unserved operation answers "unknown-op", and a frame longer than
//! `MAX_FRAME_BYTES` answers "too-large" after which the server closes
//! the connection. Failures inside an operation reuse the error's own
//! code ("unknown-ca", "validation-unavailable", and so on).

use serde_json::{Map, Value};

use crate::ca::Hierarchy;
use crate::cert::Certificate;
use crate::error::Error;
use crate::gateway::{BlockKind, GateDecision};
use crate::path::{ValidationOutcome, Verdict};
use crate::revocation::{generate_crl, generate_pcl, OcspRequest, OcspResponse, RevocationReason};
use crate::scheme::SchemeRegistry;
use crate::store::Store;
use crate::toolkit::{OnlineServices, LedgerServices, SignedDocument};
use crate::path::RevocationSource;
use crate::tsa::TimestampToken;
use crate::Result;

pub const MAX_FRAME_BYTES: usize = 1 << 20;

pub const CODE_MALFORMED: &str = "malformed";
pub const CODE_UNKNOWN_OP: &str = "unknown-op";
pub const CODE_TOO_LARGE: &str = "too-large";

/// Operations the dispatcher serves, fixed here so clients and tests
/// share one vocabulary.
pub mod op {
    pub const OCSP_CHECK: &str = "ocsp.check";
    pub const CRL_FETCH: &str = "crl.fetch";
    pub const PCL_FETCH: &str = "pcl.fetch";
    pub const GATEWAY_CHECK: &str = "gateway.check";
    pub const GATEWAY_BLOCK: &str = "gateway.block";
    pub const GATEWAY_UNBLOCK: &str = "gateway.unblock";
    pub const TSA_STAMP: &str = "tsa.stamp";
    pub const VALIDATE_SIGNATURE: &str = "validate.signature";
    pub const REPO_FETCH: &str = "repo.fetch";
    pub const REPO_STORE: &str = "repo.store";
    pub const REVOKE_CERT: &str = "revoke.cert";
}

// ---- Frames ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireRequest {
    pub op: String,
    pub params: Value,
}

pub fn encode_request(op: &str, params: &Value) -> Result<String> {
    if op.is_empty() || op.contains(' ') || op.contains('\n') {
        return Err(Error::RequestMalformed(format!("invalid operation name {op:?}")));
    }
    if !params.is_object() {
        return Err(Error::RequestMalformed("parameters must be a JSON object".into()));
    }
    let body = serde_json::to_string(params)
        .map_err(|e| Error::RequestMalformed(format!("unencodable parameters: {e}")))?;
    Ok(format!("{op} {body}\n"))
}

pub fn parse_request(line: &str) -> Result<WireRequest> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let (op, body) = line
        .split_once(' ')
        .ok_or_else(|| Error::RequestMalformed("missing space after operation name".into()))?;
    if op.is_empty() {
        return Err(Error::RequestMalformed("empty operation name".into()));
    }
    let params: Value = serde_json::from_str(body)
        .map_err(|e| Error::RequestMalformed(format!("parameters are not JSON: {e}")))?;
    if !params.is_object() {
        return Err(Error::RequestMalformed("parameters must be a JSON object".into()));
    }
    Ok(WireRequest { op: op.to_string(), params })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireResponse {
    pub ok: bool,
    pub body: Value,
}

impl WireResponse {
    pub fn success(version: u64, mut fields: Map<String, Value>) -> Self {
        fields.insert("version".into(), Value::from(version));
        Self { ok: true, body: Value::Object(fields) }
    }

    pub fn fault(version: u64, code: &str, detail: impl Into<String>) -> Self {
        let mut fields = Map::new();
        fields.insert("code".into(), Value::from(code));
        fields.insert("detail".into(), Value::from(detail.into()));
        fields.insert("version".into(), Value::from(version));
        Self { ok: false, body: Value::Object(fields) }
    }

    /// Fault code, for error responses.
    pub fn code(&self) -> Option<&str> {
        if self.ok {
            None
        } else {
            self.body.get("code").and_then(Value::as_str)
        }
    }

    pub fn version(&self) -> Option<u64> {
        self.body.get("version").and_then(Value::as_u64)
    }

    pub fn to_line(&self) -> String {
        let status = if self.ok { "ok" } else { "err" };
        format!("{status} {}\n", self.body)
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let line = line.strip_suffix('\n').unwrap_or(line);
        let (status, body) = line
            .split_once(' ')
            .ok_or_else(|| Error::RequestMalformed("missing space after response status".into()))?;
        let ok = match status {
            "ok" => true,
            "err" => false,
            other => {
                return Err(Error::RequestMalformed(format!("unknown response status {other:?}")))
            }
        };
        let body: Value = serde_json::from_str(body)
            .map_err(|e| Error::RequestMalformed(format!("response body is not JSON: {e}")))?;
        if !body.is_object() {
            return Err(Error::RequestMalformed("response body must be a JSON object".into()));
        }
        Ok(Self { ok, body })
    }
}

// ---- Parameter access ----

fn need<'a>(params: &'a Value, name: &str) -> Result<&'a Value> {
    params
        .get(name)
        .ok_or_else(|| Error::RequestMalformed(format!("missing parameter {name:?}")))
}

fn p_str(params: &Value, name: &str) -> Result<String> {
    need(params, name)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::RequestMalformed(format!("parameter {name:?} must be a string")))
}

fn p_u64(params: &Value, name: &str) -> Result<u64> {
    need(params, name)?
        .as_u64()
        .ok_or_else(|| Error::RequestMalformed(format!("parameter {name:?} must be an unsigned integer")))
}

fn p_opt_u64(params: &Value, name: &str) -> Result<Option<u64>> {
    match params.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(value) => value.as_u64().map(Some).ok_or_else(|| {
            Error::RequestMalformed(format!("parameter {name:?} must be an unsigned integer"))
        }),
    }
}

fn p_hex(params: &Value, name: &str) -> Result<Vec<u8>> {
    let text = p_str(params, name)?;
    hex::decode(&text)
        .map_err(|_| Error::RequestMalformed(format!("parameter {name:?} must be hex")))
}

fn p_hex32(params: &Value, name: &str) -> Result<[u8; 32]> {
    let bytes = p_hex(params, name)?;
    bytes
        .try_into()
        .map_err(|_| Error::RequestMalformed(format!("parameter {name:?} must be 32 hex-encoded bytes")))
}

fn field(fields: &mut Map<String, Value>, name: &str, value: impl Into<Value>) {
    fields.insert(name.to_string(), value.into());
}

// ---- Dispatch ----

/// Executes one request against the store at time `now` and forms the
/// response. Mutating operations go through store commands, so their
/// effects are journaled before the `ok` is produced.
pub fn dispatch(
    store: &mut Store,
    registry: &SchemeRegistry,
    now: u64,
    request: &WireRequest,
) -> WireResponse {
    let result = match request.op.as_str() {
        op::OCSP_CHECK => ocsp_check(store, registry, now, &request.params),
        op::CRL_FETCH => crl_fetch(store, registry, now, &request.params),
        op::PCL_FETCH => pcl_fetch(store, registry, now, &request.params),
        op::GATEWAY_CHECK => gateway_check(store, now, &request.params),
        op::GATEWAY_BLOCK => gateway_block(store, now, &request.params),
        op::GATEWAY_UNBLOCK => gateway_unblock(store, now, &request.params),
        op::TSA_STAMP => tsa_stamp(store, now, &request.params),
        op::VALIDATE_SIGNATURE => validate_signature(store, registry, now, &request.params),
        op::REPO_FETCH => repo_fetch(store, &request.params),
        op::REPO_STORE => repo_store(store, now, &request.params),
        op::REVOKE_CERT => revoke_cert(store, now, &request.params),
        other => {
            return WireResponse::fault(
                store.version(),
                CODE_UNKNOWN_OP,
                format!("operation {other:?} is not served"),
            )
        }
    };
    let version = store.version();
    match result {
        Ok(fields) => WireResponse::success(version, fields),
        Err(err) => WireResponse::fault(version, err.code(), err.to_string()),
    }
}

fn ocsp_check(
    store: &Store,
    registry: &SchemeRegistry,
    now: u64,
    params: &Value,
) -> Result<Map<String, Value>> {
    let request = OcspRequest {
        ca_id: p_str(params, "ca_id")?,
        serial: p_u64(params, "serial")?,
        nonce: p_hex(params, "nonce")?,
    };
    let mut services = LedgerServices::new(&store.state.hierarchy, registry, now);
    services.tsa = store.state.tsa.clone();
    let response = services.ocsp_check(&request)?;
    let mut fields = Map::new();
    field(&mut fields, "response", hex::encode(response.encode()));
    Ok(fields)
}

fn crl_fetch(
    store: &Store,
    registry: &SchemeRegistry,
    now: u64,
    params: &Value,
) -> Result<Map<String, Value>> {
    let ca_id = p_str(params, "ca_id")?;
    let window = p_u64(params, "window")?;
    let record = store.state.hierarchy.require_ca(&ca_id)?;
    let crl = generate_crl(&record.revocation, &record.issued, record.signing_key()?, registry, now, window)?;
    let mut fields = Map::new();
    field(&mut fields, "crl", hex::encode(crl.encode()));
    Ok(fields)
}

fn pcl_fetch(
    store: &Store,
    registry: &SchemeRegistry,
    now: u64,
    params: &Value,
) -> Result<Map<String, Value>> {
    let ca_id = p_str(params, "ca_id")?;
    let record = store.state.hierarchy.require_ca(&ca_id)?;
    let pcl = generate_pcl(&record.revocation, &record.issued, record.signing_key()?, registry, now)?;
    let mut fields = Map::new();
    field(&mut fields, "pcl", hex::encode(pcl.encode()));
    Ok(fields)
}

fn gateway_check(store: &Store, now: u64, params: &Value) -> Result<Map<String, Value>> {
    let card_id = p_str(params, "card_id")?;
    let decision = store.gateway_check(&card_id, now);
    let mut fields = Map::new();
    field(&mut fields, "decision", decision.token());
    if let GateDecision::BlockedTemporary { until } = decision {
        field(&mut fields, "until", until);
    }
    Ok(fields)
}

fn gateway_block(store: &mut Store, now: u64, params: &Value) -> Result<Map<String, Value>> {
    let card_id = p_str(params, "card_id")?;
    let kind = match p_str(params, "kind")?.as_str() {
        "permanent" => BlockKind::Permanent,
        "temporary" => {
            let until = p_opt_u64(params, "until")?.ok_or_else(|| {
                Error::RequestMalformed("temporary block requires parameter \"until\"".into())
            })?;
            BlockKind::Temporary { until }
        }
        other => {
            return Err(Error::RequestMalformed(format!("unknown block kind {other:?}")));
        }
    };
    let reason = p_str(params, "reason")?;
    let changed = store.gateway_block(&card_id, kind, &reason, now)?;
    let mut fields = Map::new();
    field(&mut fields, "changed", changed);
    Ok(fields)
}

fn gateway_unblock(store: &mut Store, now: u64, params: &Value) -> Result<Map<String, Value>> {
    let card_id = p_str(params, "card_id")?;
    let changed = store.gateway_unblock(&card_id, now)?;
    let mut fields = Map::new();
    field(&mut fields, "changed", changed);
    Ok(fields)
}

fn tsa_stamp(store: &mut Store, now: u64, params: &Value) -> Result<Map<String, Value>> {
    let document_hash = p_hex32(params, "document_hash")?;
    let token = store.tsa_stamp(&document_hash, now)?;
    let mut fields = Map::new();
    field(&mut fields, "token", hex::encode(token.encode()));
    Ok(fields)
}

fn validate_signature(
    store: &Store,
    registry: &SchemeRegistry,
    now: u64,
    params: &Value,
) -> Result<Map<String, Value>> {
    let document = SignedDocument::decode(&p_hex(params, "document")?)?;
    let at = p_opt_u64(params, "at")?.unwrap_or(now);
    let mut services = LedgerServices::new(&store.state.hierarchy, registry, now);
    let outcome = services.verify_remote(&document, at)?;
    Ok(outcome_fields(&outcome))
}

pub fn outcome_fields(outcome: &ValidationOutcome) -> Map<String, Value> {
    let mut fields = Map::new();
    field(&mut fields, "verdict", outcome.verdict.token());
    field(&mut fields, "checked_at", outcome.checked_at);
    field(&mut fields, "revocation_source", outcome.revocation_source.token());
    field(&mut fields, "detail", outcome.detail.clone());
    fields
}

pub fn outcome_from_body(body: &Value) -> Result<ValidationOutcome> {
    Ok(ValidationOutcome {
        verdict: Verdict::from_token(&p_str(body, "verdict")?)?,
        checked_at: p_u64(body, "checked_at")?,
        revocation_source: RevocationSource::from_token(&p_str(body, "revocation_source")?)?,
        detail: p_str(body, "detail")?,
    })
}

fn repo_fetch(store: &Store, params: &Value) -> Result<Map<String, Value>> {
    let mut fields = Map::new();
    if params.get("subject_id").is_some() {
        let subject_id = p_str(params, "subject_id")?;
        let certs: Vec<Value> = store
            .repo_fetch_subject(&subject_id)
            .iter()
            .map(|c| Value::from(hex::encode(c.encode())))
            .collect();
        fields.insert("certificates".into(), Value::Array(certs));
        return Ok(fields);
    }
    let issuer_id = p_str(params, "issuer_id")?;
    let serial = p_u64(params, "serial")?;
    let cert = store
        .repo_fetch_serial(&issuer_id, serial)
        .ok_or(Error::UnknownSerial(serial))?;
    field(&mut fields, "certificate", hex::encode(cert.encode()));
    Ok(fields)
}

fn repo_store(store: &mut Store, now: u64, params: &Value) -> Result<Map<String, Value>> {
    let certificate = Certificate::decode(&p_hex(params, "certificate")?)?;
    store.repo_store(certificate, now)?;
    let mut fields = Map::new();
    field(&mut fields, "stored", true);
    Ok(fields)
}

fn revoke_cert(store: &mut Store, now: u64, params: &Value) -> Result<Map<String, Value>> {
    let ca_id = p_str(params, "ca_id")?;
    let serial = p_u64(params, "serial")?;
    let reason = RevocationReason::from_token(&p_str(params, "reason")?)?;
    let changed = store.revoke(&ca_id, serial, reason, now)?;
    let mut fields = Map::new();
    field(&mut fields, "changed", changed);
    Ok(fields)
}

// ---- Client-side decode helpers ----

/// Decodes the hex body fields produced by the dispatcher; each checks
/// structure only, signature acceptance stays with the caller.
pub fn decode_ocsp_body(body: &Value) -> Result<OcspResponse> {
    OcspResponse::decode(&p_hex(body, "response")?)
}

pub fn decode_crl_body(body: &Value) -> Result<crate::revocation::Crl> {
    crate::revocation::Crl::decode(&p_hex(body, "crl")?)
}

pub fn decode_pcl_body(body: &Value) -> Result<crate::revocation::Pcl> {
    crate::revocation::Pcl::decode(&p_hex(body, "pcl")?)
}

pub fn decode_token_body(body: &Value) -> Result<TimestampToken> {
    TimestampToken::decode(&p_hex(body, "token")?)
}

pub fn decode_certificate_body(body: &Value) -> Result<Certificate> {
    Certificate::decode(&p_hex(body, "certificate")?)
}

/// True when an incoming frame exceeds the protocol cap and the server
/// must answer "too-large" and drop the connection.
pub fn frame_too_large(line_len: usize) -> bool {
    line_len > MAX_FRAME_BYTES
}

/// Convenience for servers answering a leaf status question directly
/// from a hierarchy, used by tests to cross-check dispatcher answers.
pub fn ledger_status(
    hierarchy: &Hierarchy,
    ca_id: &str,
    serial: u64,
    at: u64,
) -> Result<crate::revocation::CertStatus> {
    let record = hierarchy.require_ca(ca_id)?;
    Ok(crate::revocation::certificate_status(serial, &record.issued, &record.revocation, at))
}
