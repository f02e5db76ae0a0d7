//! Desk-scale emulation of a national identity PKI.
//!
//! The crate models the full service stack behind a smart-card identity
//! program: a certification hierarchy (root, population, and subordinate
//! authorities), the revocation products derived from their ledgers (CRL,
//! positive certification list, online status responder), an in-memory
//! smart card with its three applets, the client-side toolkit that drives
//! card sessions, and an enrollment service whose every mutation is
//! journaled through a hash-chained audit log.
//!
//! Cryptography is pluggable and deterministic by design. Real HSM-backed
//! algorithms are out of scope; see [`scheme`] for the substitution rules.
//! Everything that touches disk or wire goes through one canonical byte
//! encoding ([`encoding`]) so that equal values always serialize to equal
//! bytes.

#![forbid(unsafe_code)]

pub mod audit;
pub mod ca;
pub mod card;
pub mod cert;
pub mod clock;
pub mod encoding;
pub mod enroll;
pub mod error;
pub mod gateway;
pub mod path;
pub mod policy;
pub mod revocation;
pub mod scheme;
pub mod seal;
pub mod service;
pub mod store;
pub mod toolkit;
pub mod tsa;
pub mod wire;

pub use cert::{Certificate, CertificateProfile, TbsCertificate};
pub use error::Error;
pub use path::{CertPath, TrustAnchorSet, ValidationOutcome, Verdict};
pub use scheme::{KeyPair, SchemeRegistry};

/// Result alias used across the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;
