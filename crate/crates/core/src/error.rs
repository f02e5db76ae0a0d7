//! One error type for the whole stack.
//!
//! Every failure carries a stable kebab-case code. The code is part of the
//! external contract: it is what the CLI prints before exiting nonzero and
//! what the wire protocol returns in `err` response bodies, so tests and
//! scripts match on codes rather than prose.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("scheme-not-registered: no signature scheme {0:?}")]
    SchemeNotRegistered(String),
    #[error("invalid-key-length: {0}")]
    InvalidKeyLength(String),
    #[error("unsupported-scheme: {0}")]
    UnsupportedScheme(String),
    #[error("malformed-encoding: {0}")]
    MalformedEncoding(String),
    #[error("invalid-validity: {0}")]
    InvalidValidity(String),
    #[error("no-path: {0}")]
    NoPath(String),

    #[error("root-exists: a root authority is already initialized")]
    RootExists,
    #[error("no-root: no root authority has been initialized")]
    NoRoot,
    #[error("id-conflict: {0}")]
    IdConflict(String),
    #[error("unknown-ca: {0:?}")]
    UnknownCa(String),
    #[error("ca-suspended: {0:?} is suspended")]
    CaSuspended(String),
    #[error("policy-violation: {0}")]
    PolicyViolation(String),
    #[error("unknown-serial: {0}")]
    UnknownSerial(u64),
    #[error("not-escrowed: serial {0} has no escrow record")]
    NotEscrowed(u64),
    #[error("not-revocable: {0}")]
    NotRevocable(String),
    #[error("duplicate-serial: {0}")]
    DuplicateSerial(String),
    #[error("request-malformed: {0}")]
    RequestMalformed(String),

    #[error("crl-stale: {0}")]
    CrlStale(String),
    #[error("crl-invalid: {0}")]
    CrlInvalid(String),

    #[error("channel-refused: {0}")]
    ChannelRefused(String),
    #[error("channel-closed: {0}")]
    ChannelClosed(String),
    #[error("channel-required: operation needs an open secure channel")]
    ChannelRequired,
    #[error("pin-required: PIN not verified in this session")]
    PinRequired,
    #[error("pin-blocked: retry counter exhausted")]
    PinBlocked,
    #[error("signing-refused: {0}")]
    SigningRefused(String),
    #[error("data-tampered: {0}")]
    DataTampered(String),
    #[error("unknown-card: {0:?}")]
    UnknownCard(String),
    #[error("already-issued: applicant {0:?} holds an issued card")]
    AlreadyIssued(String),

    #[error("validation-unavailable: {0}")]
    ValidationUnavailable(String),
    #[error("unauthorized: {0}")]
    Unauthorized(String),

    #[error("sealed-data-invalid: ciphertext failed authentication")]
    SealedDataInvalid,
    #[error("audit-corrupt: {0}")]
    AuditCorrupt(String),

    #[error("unknown-op: {0:?}")]
    UnknownOp(String),
    #[error("malformed: {0}")]
    WireMalformed(String),
    #[error("too-large: line exceeds the 1 MiB cap")]
    TooLarge,

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code, the token before the first `:` in the
    /// rendered message.
    pub fn code(&self) -> &'static str {
        use Error::*;
        match self {
            SchemeNotRegistered(_) => "scheme-not-registered",
            InvalidKeyLength(_) => "invalid-key-length",
            UnsupportedScheme(_) => "unsupported-scheme",
            MalformedEncoding(_) => "malformed-encoding",
            InvalidValidity(_) => "invalid-validity",
            NoPath(_) => "no-path",
            RootExists => "root-exists",
            NoRoot => "no-root",
            IdConflict(_) => "id-conflict",
            UnknownCa(_) => "unknown-ca",
            CaSuspended(_) => "ca-suspended",
            PolicyViolation(_) => "policy-violation",
            UnknownSerial(_) => "unknown-serial",
            NotEscrowed(_) => "not-escrowed",
            NotRevocable(_) => "not-revocable",
            DuplicateSerial(_) => "duplicate-serial",
            RequestMalformed(_) => "request-malformed",
            CrlStale(_) => "crl-stale",
            CrlInvalid(_) => "crl-invalid",
            ChannelRefused(_) => "channel-refused",
            ChannelClosed(_) => "channel-closed",
            ChannelRequired => "channel-required",
            PinRequired => "pin-required",
            PinBlocked => "pin-blocked",
            SigningRefused(_) => "signing-refused",
            DataTampered(_) => "data-tampered",
            UnknownCard(_) => "unknown-card",
            AlreadyIssued(_) => "already-issued",
            ValidationUnavailable(_) => "validation-unavailable",
            Unauthorized(_) => "unauthorized",
            SealedDataInvalid => "sealed-data-invalid",
            AuditCorrupt(_) => "audit-corrupt",
            UnknownOp(_) => "unknown-op",
            WireMalformed(_) => "malformed",
            TooLarge => "too-large",
            Io(_) => "io",
        }
    }
}
