//! Card hotlist for the service gateway.
//!
//! The gateway answers one question: may this card be used at a service
//! desk right now. The answer is independent of certificate status; a
//! blocked card can carry perfectly good certificates and a permitted card
//! can carry revoked ones. Blocks are either permanent (lifted only by an
//! explicit unblock) or temporary (expire on their own at `until`).

use std::collections::BTreeMap;

use crate::encoding::{RecordBuilder, RecordView};
use crate::error::Error;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Permanent,
    /// Blocked while `now < until`; at `until` the card is usable again.
    Temporary { until: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockEntry {
    pub card_id: String,
    pub kind: BlockKind,
    pub since: u64,
    pub reason: String,
}

impl BlockEntry {
    pub fn encode(&self) -> Vec<u8> {
        let mut builder = RecordBuilder::new()
            .str("card_id", &self.card_id)
            .u64("since", self.since)
            .str("reason", &self.reason);
        builder = match self.kind {
            BlockKind::Permanent => builder.str("kind", "permanent"),
            BlockKind::Temporary { until } => builder.str("kind", "temporary").u64("until", until),
        };
        builder.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let view = RecordView::parse(bytes)?;
        let kind = match view.str("kind")?.as_str() {
            "permanent" => BlockKind::Permanent,
            "temporary" => BlockKind::Temporary { until: view.u64("until")? },
            other => return Err(Error::MalformedEncoding(format!("unknown block kind {other:?}"))),
        };
        Ok(Self {
            card_id: view.str("card_id")?,
            kind,
            since: view.u64("since")?,
            reason: view.str("reason")?,
        })
    }
}

/// Outcome of a gateway check, as printed to operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    Allowed,
    BlockedPermanent,
    BlockedTemporary { until: u64 },
}

impl GateDecision {
    pub fn token(&self) -> &'static str {
        match self {
            GateDecision::Allowed => "allowed",
            GateDecision::BlockedPermanent => "blocked_permanent",
            GateDecision::BlockedTemporary { .. } => "blocked_temporary",
        }
    }

    pub fn allowed(&self) -> bool {
        matches!(self, GateDecision::Allowed)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Hotlist {
    entries: BTreeMap<String, BlockEntry>,
}

impl Hotlist {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> impl Iterator<Item = &BlockEntry> {
        self.entries.values()
    }

    pub fn entry(&self, card_id: &str) -> Option<&BlockEntry> {
        self.entries.get(card_id)
    }

    /// Blocks a card. A permanent block overwrites any temporary one; a new
    /// temporary block replaces an older temporary block but never weakens
    /// a permanent one. Returns whether the list changed.
    pub fn block(
        &mut self,
        card_id: &str,
        kind: BlockKind,
        since: u64,
        reason: &str,
    ) -> Result<bool> {
        if let BlockKind::Temporary { until } = kind {
            if until <= since {
                return Err(Error::RequestMalformed(format!(
                    "temporary block must end after it starts (since {since}, until {until})"
                )));
            }
        }
        match (self.entries.get(card_id).map(|e| e.kind), kind) {
            (Some(BlockKind::Permanent), _) => Ok(false),
            (Some(existing), new) if existing == new => Ok(false),
            _ => {
                self.entries.insert(
                    card_id.to_string(),
                    BlockEntry { card_id: card_id.to_string(), kind, since, reason: reason.to_string() },
                );
                Ok(true)
            }
        }
    }

    /// Lifts any block on the card. Unblocking an unlisted card is a no-op.
    pub fn unblock(&mut self, card_id: &str) -> bool {
        self.entries.remove(card_id).is_some()
    }

    pub fn check(&self, card_id: &str, now: u64) -> GateDecision {
        match self.entries.get(card_id).map(|e| e.kind) {
            None => GateDecision::Allowed,
            Some(BlockKind::Permanent) => GateDecision::BlockedPermanent,
            Some(BlockKind::Temporary { until }) => {
                if now < until {
                    GateDecision::BlockedTemporary { until }
                } else {
                    GateDecision::Allowed
                }
            }
        }
    }

    /// Drops temporary blocks that have already lapsed. Called by the store
    /// on mutations; checks never need it because `check` reads the clock.
    pub fn prune(&mut self, now: u64) -> usize {
        let lapsed: Vec<String> = self
            .entries
            .values()
            .filter(|e| matches!(e.kind, BlockKind::Temporary { until } if now >= until))
            .map(|e| e.card_id.clone())
            .collect();
        for card_id in &lapsed {
            self.entries.remove(card_id);
        }
        lapsed.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
