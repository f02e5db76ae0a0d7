//! Timestamping authority.
//!
//! The TSA binds a document hash to a time under its own device
//! credential, so a signature can later be shown to predate the signer's
//! revocation. Serials are strictly monotone per authority; the serial
//! counter is part of replicated state, not a local counter.

use crate::cert::Certificate;
use crate::encoding::{RecordBuilder, RecordView};
use crate::error::Error;
use crate::scheme::{KeyPair, SchemeRegistry};
use crate::Result;

pub const DOCUMENT_HASH_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestampToken {
    pub tsa_id: String,
    pub serial: u64,
    pub document_hash: Vec<u8>,
    pub time: u64,
    pub signature: Vec<u8>,
}

impl TimestampToken {
    fn tbs_bytes(tsa_id: &str, serial: u64, document_hash: &[u8], time: u64) -> Vec<u8> {
        RecordBuilder::new()
            .str("tsa_id", tsa_id)
            .u64("serial", serial)
            .raw("document_hash", document_hash.to_vec())
            .u64("time", time)
            .finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        let tbs = Self::tbs_bytes(&self.tsa_id, self.serial, &self.document_hash, self.time);
        RecordBuilder::new().raw("tbs", tbs).raw("signature", self.signature.clone()).finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let outer = RecordView::parse(bytes)?;
        let tbs = RecordView::parse(outer.raw("tbs")?)?;
        Ok(Self {
            tsa_id: tbs.str("tsa_id")?,
            serial: tbs.u64("serial")?,
            document_hash: tbs.raw("document_hash")?.to_vec(),
            time: tbs.u64("time")?,
            signature: outer.raw("signature")?.to_vec(),
        })
    }
}

/// Issues the next token. `serial` is supplied by the caller, which owns
/// the monotone counter as part of store state.
pub fn issue_timestamp(
    tsa_id: &str,
    serial: u64,
    document_hash: &[u8],
    time: u64,
    tsa_key: &KeyPair,
    registry: &SchemeRegistry,
) -> Result<TimestampToken> {
    if document_hash.len() != DOCUMENT_HASH_LEN {
        return Err(Error::RequestMalformed(format!(
            "document hash must be {DOCUMENT_HASH_LEN} bytes, got {}",
            document_hash.len()
        )));
    }
    let tbs = TimestampToken::tbs_bytes(tsa_id, serial, document_hash, time);
    let scheme = registry.get(&tsa_key.scheme_id)?;
    let signature = scheme.sign(tsa_key.private_key_bytes(), &tbs)?;
    Ok(TimestampToken {
        tsa_id: tsa_id.to_string(),
        serial,
        document_hash: document_hash.to_vec(),
        time,
        signature,
    })
}

/// Verifies a token against the TSA's certificate: the signature must
/// check out and the token time must fall inside the credential window.
pub fn verify_timestamp(
    token: &TimestampToken,
    tsa_cert: &Certificate,
    registry: &SchemeRegistry,
) -> Result<()> {
    if token.tsa_id != tsa_cert.subject_id() {
        return Err(Error::DataTampered(format!(
            "token names {} but certificate belongs to {}",
            token.tsa_id,
            tsa_cert.subject_id()
        )));
    }
    if !tsa_cert.time_valid(token.time) {
        return Err(Error::DataTampered(format!(
            "token time {} outside the authority credential window",
            token.time
        )));
    }
    let tbs =
        TimestampToken::tbs_bytes(&token.tsa_id, token.serial, &token.document_hash, token.time);
    let ok = registry
        .get(&tsa_cert.tbs.scheme_id)
        .map(|s| s.verify(&tsa_cert.tbs.public_key, &tbs, &token.signature))
        .unwrap_or(false);
    if !ok {
        return Err(Error::DataTampered("timestamp signature invalid".into()));
    }
    Ok(())
}
