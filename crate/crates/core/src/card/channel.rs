//! Secure-messaging primitives shared by the card and the terminal.
//!
//! Frames are `u16` big-endian body length, then the body: one
//! instruction byte (commands) or status byte (responses), the payload,
//! and a 16-byte MAC once a channel protects the exchange. The MAC covers
//! a direction tag and an implicit per-direction counter, so neither
//! reflection nor replay of a recorded frame can pass: the counter is
//! never on the wire, both ends track it, and any mismatch kills the
//! channel for good.
//!
//! The channel authenticates; it does not encrypt. Everything listed in
//! the card's contract needs integrity and session binding only, and
//! plaintext frames keep the traffic inspectable by tests.

use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::Result;

pub const MAC_LEN: usize = 16;
pub const NONCE_LEN: usize = 16;
pub const SESSION_KEY_LEN: usize = 32;

pub const INS_OPEN: u8 = 0x01;
pub const INS_VERIFY_PIN: u8 = 0x10;
pub const INS_UNBLOCK_PIN: u8 = 0x11;
pub const INS_SIGN: u8 = 0x12;
pub const INS_READ_TEMPLATE: u8 = 0x20;
pub const INS_MATCH: u8 = 0x21;

pub const STATUS_OK: u8 = 0x00;
pub const STATUS_CHANNEL_REFUSED: u8 = 0x01;
pub const STATUS_CHANNEL_CLOSED: u8 = 0x02;
pub const STATUS_CHANNEL_REQUIRED: u8 = 0x03;
pub const STATUS_PIN_REQUIRED: u8 = 0x04;
pub const STATUS_PIN_BLOCKED: u8 = 0x05;
pub const STATUS_UNAUTHORIZED: u8 = 0x06;
pub const STATUS_MALFORMED: u8 = 0x07;
pub const STATUS_WRONG_APPLET: u8 = 0x08;

/// Statuses the card sends outside any channel; everything else rides
/// under a MAC.
pub fn is_channel_level_status(status: u8) -> bool {
    matches!(status, STATUS_CHANNEL_REFUSED | STATUS_CHANNEL_CLOSED | STATUS_CHANNEL_REQUIRED)
}

pub fn status_error(status: u8) -> Error {
    match status {
        STATUS_CHANNEL_REFUSED => Error::ChannelRefused("card refused the session".into()),
        STATUS_CHANNEL_CLOSED => Error::ChannelClosed("card reports the channel closed".into()),
        STATUS_CHANNEL_REQUIRED => Error::ChannelRequired,
        STATUS_PIN_REQUIRED => Error::PinRequired,
        STATUS_PIN_BLOCKED => Error::PinBlocked,
        STATUS_UNAUTHORIZED => Error::Unauthorized("card rejected the credential".into()),
        STATUS_MALFORMED => Error::RequestMalformed("card rejected the command payload".into()),
        // The selected applet does not serve this instruction; the channel
        // itself stays open.
        STATUS_WRONG_APPLET => Error::ChannelRequired,
        other => Error::RequestMalformed(format!("card returned unknown status {other:#04x}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppletId {
    Pki,
    Moc,
}

impl AppletId {
    pub fn byte(&self) -> u8 {
        match self {
            AppletId::Pki => 0x01,
            AppletId::Moc => 0x02,
        }
    }

    pub fn from_byte(byte: u8) -> Result<Self> {
        match byte {
            0x01 => Ok(AppletId::Pki),
            0x02 => Ok(AppletId::Moc),
            other => Err(Error::RequestMalformed(format!("unknown applet selector {other:#04x}"))),
        }
    }

    pub fn token(&self) -> &'static str {
        match self {
            AppletId::Pki => "pki",
            AppletId::Moc => "moc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Command,
    Response,
}

impl Direction {
    fn tag(&self) -> u8 {
        match self {
            Direction::Command => 0x43,
            Direction::Response => 0x52,
        }
    }
}

pub fn derive_session_key(master_key: &[u8; 32], card_id: &str, nonce: &[u8]) -> [u8; SESSION_KEY_LEN] {
    let mut hasher = Sha256::new();
    hasher.update(master_key);
    hasher.update(card_id.as_bytes());
    hasher.update(nonce);
    hasher.finalize().into()
}

/// Proof-of-key carried in the open request so a terminal with the wrong
/// master key is refused before any channel state exists.
pub fn key_confirmation(session_key: &[u8; SESSION_KEY_LEN], nonce: &[u8]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(session_key);
    hasher.update(b"channel-confirm");
    hasher.update(nonce);
    hasher.finalize().into()
}

pub fn compute_mac(
    key: &[u8; SESSION_KEY_LEN],
    direction: Direction,
    counter: u64,
    head: u8,
    payload: &[u8],
) -> [u8; MAC_LEN] {
    let mut hasher = Sha256::new();
    hasher.update(key);
    hasher.update([direction.tag()]);
    hasher.update(counter.to_be_bytes());
    hasher.update([head]);
    hasher.update(payload);
    let digest = hasher.finalize();
    let mut mac = [0u8; MAC_LEN];
    mac.copy_from_slice(&digest[..MAC_LEN]);
    mac
}

fn frame(body: Vec<u8>) -> Vec<u8> {
    let len = u16::try_from(body.len()).expect("card frame body exceeds u16 length");
    let mut out = Vec::with_capacity(2 + body.len());
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn build_plain_frame(head: u8, payload: &[u8]) -> Vec<u8> {
    let mut body = Vec::with_capacity(1 + payload.len());
    body.push(head);
    body.extend_from_slice(payload);
    frame(body)
}

pub fn build_mac_frame(
    key: &[u8; SESSION_KEY_LEN],
    direction: Direction,
    counter: u64,
    head: u8,
    payload: &[u8],
) -> Vec<u8> {
    let mac = compute_mac(key, direction, counter, head, payload);
    let mut body = Vec::with_capacity(1 + payload.len() + MAC_LEN);
    body.push(head);
    body.extend_from_slice(payload);
    body.extend_from_slice(&mac);
    frame(body)
}

/// Splits a raw frame into (head, rest-of-body). Checks only the length
/// envelope; MAC verification is the caller's job because only the caller
/// knows whether the frame should carry one.
pub fn parse_frame(bytes: &[u8]) -> Result<(u8, &[u8])> {
    if bytes.len() < 3 {
        return Err(Error::MalformedEncoding("frame shorter than header".into()));
    }
    let declared = u16::from_be_bytes([bytes[0], bytes[1]]) as usize;
    let body = &bytes[2..];
    if body.len() != declared {
        return Err(Error::MalformedEncoding(format!(
            "frame declares {declared} body bytes, carries {}",
            body.len()
        )));
    }
    Ok((body[0], &body[1..]))
}

/// Verifies and strips the trailing MAC of a framed body remainder.
pub fn verify_mac(
    key: &[u8; SESSION_KEY_LEN],
    direction: Direction,
    counter: u64,
    head: u8,
    rest: &[u8],
) -> Result<Vec<u8>> {
    if rest.len() < MAC_LEN {
        return Err(Error::DataTampered("frame too short to carry a MAC".into()));
    }
    let (payload, mac) = rest.split_at(rest.len() - MAC_LEN);
    let expected = compute_mac(key, direction, counter, head, payload);
    // Not constant-time; this is an emulator exercised by tests, not a
    // hardened token.
    if mac != expected {
        return Err(Error::DataTampered("frame MAC mismatch".into()));
    }
    Ok(payload.to_vec())
}

/// Card-side channel state. Counters advance only on accepted traffic.
#[derive(Debug, Clone)]
pub struct ChannelState {
    pub applet: AppletId,
    pub session_key: [u8; SESSION_KEY_LEN],
    pub recv_counter: u64,
    pub send_counter: u64,
    pub open: bool,
}

impl ChannelState {
    pub fn new(applet: AppletId, session_key: [u8; SESSION_KEY_LEN]) -> Self {
        Self { applet, session_key, recv_counter: 0, send_counter: 0, open: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrafficDirection {
    ToCard,
    FromCard,
}

#[derive(Debug, Clone)]
pub struct TrafficEntry {
    pub direction: TrafficDirection,
    pub frame: Vec<u8>,
}

/// Terminal-side end of a secure channel. Keeps a verbatim traffic log so
/// tests can assert what did and did not cross the contact interface.
#[derive(Debug)]
pub struct HostChannel {
    pub applet: AppletId,
    session_key: [u8; SESSION_KEY_LEN],
    send_counter: u64,
    recv_counter: u64,
    pub open: bool,
    pub traffic: Vec<TrafficEntry>,
}

impl HostChannel {
    pub fn new(applet: AppletId, session_key: [u8; SESSION_KEY_LEN]) -> Self {
        Self { applet, session_key, send_counter: 0, recv_counter: 0, open: true, traffic: Vec::new() }
    }

    pub fn session_key(&self) -> &[u8; SESSION_KEY_LEN] {
        &self.session_key
    }

    pub fn record(&mut self, direction: TrafficDirection, frame: &[u8]) {
        self.traffic.push(TrafficEntry { direction, frame: frame.to_vec() });
    }

    /// Sends one MAC'd command through `transport` (the card's frame
    /// processor) and returns the verified response payload. A response
    /// that fails MAC or counter checks closes this end permanently.
    pub fn command(
        &mut self,
        transport: &mut dyn FnMut(&[u8]) -> Vec<u8>,
        ins: u8,
        payload: &[u8],
    ) -> Result<Vec<u8>> {
        if !self.open {
            return Err(Error::ChannelClosed("terminal side already closed".into()));
        }
        let request = build_mac_frame(&self.session_key, Direction::Command, self.send_counter, ins, payload);
        self.send_counter += 1;
        self.record(TrafficDirection::ToCard, &request);
        let response = transport(&request);
        self.record(TrafficDirection::FromCard, &response);
        let (status, rest) = parse_frame(&response)?;
        if is_channel_level_status(status) {
            // Channel-level refusals arrive plain; the card has already
            // discarded its end, so discard ours.
            self.open = false;
            return Err(status_error(status));
        }
        let verified = verify_mac(&self.session_key, Direction::Response, self.recv_counter, status, rest);
        match verified {
            Ok(payload) => {
                self.recv_counter += 1;
                if status == STATUS_OK {
                    Ok(payload)
                } else {
                    Err(status_error(status))
                }
            }
            Err(err) => {
                self.open = false;
                Err(err)
            }
        }
    }
}
