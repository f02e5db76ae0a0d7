//! Tamper-evident audit chain.
//!
//! Every state mutation in the store becomes one event whose hash covers
//! its own fields and the hash of the predecessor, genesis hashing from
//! an all-zero block. Any edit to a stored record breaks the recomputed
//! chain at or after that record. A consistent rewrite of a whole suffix
//! is only detectable against an externally anchored head hash, and a
//! broken final line is indistinguishable from a torn write, so loading
//! drops it; a full line is durable before its effect is acknowledged,
//! which makes the dropped event one that was never acked.
//!
//! The event payload carries everything replay needs to reproduce the
//! effect, so the log is the single write-ahead source of truth and all
//! other state files are derived.

use sha2::{Digest, Sha256};

use crate::encoding::{RecordBuilder, RecordView};
use crate::error::Error;
use crate::Result;

pub const GENESIS_HASH: [u8; 32] = [0u8; 32];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEvent {
    pub sequence: u64,
    pub time: u64,
    pub actor: String,
    pub action: String,
    pub subject: String,
    pub payload: Vec<u8>,
    /// Chain hash over the predecessor's hash and this event's fields.
    pub payload_hash: [u8; 32],
}

impl AuditEvent {
    pub fn chain_hash(
        prev: &[u8; 32],
        sequence: u64,
        time: u64,
        actor: &str,
        action: &str,
        subject: &str,
        payload: &[u8],
    ) -> [u8; 32] {
        let body = RecordBuilder::new()
            .u64("sequence", sequence)
            .u64("time", time)
            .str("actor", actor)
            .str("action", action)
            .str("subject", subject)
            .raw("payload", payload)
            .finish();
        let mut hasher = Sha256::new();
        hasher.update(prev);
        hasher.update(&body);
        hasher.finalize().into()
    }

    pub fn encode(&self) -> Vec<u8> {
        RecordBuilder::new()
            .u64("sequence", self.sequence)
            .u64("time", self.time)
            .str("actor", &self.actor)
            .str("action", &self.action)
            .str("subject", &self.subject)
            .raw("payload", self.payload.clone())
            .raw("payload_hash", self.payload_hash.to_vec())
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let view = RecordView::parse(bytes)?;
        let payload_hash: [u8; 32] = view
            .raw("payload_hash")?
            .try_into()
            .map_err(|_| Error::MalformedEncoding("audit hash must be 32 bytes".into()))?;
        Ok(Self {
            sequence: view.u64("sequence")?,
            time: view.u64("time")?,
            actor: view.str("actor")?,
            action: view.str("action")?,
            subject: view.str("subject")?,
            payload: view.raw("payload")?.to_vec(),
            payload_hash,
        })
    }

    pub fn to_line(&self) -> String {
        hex::encode(self.encode())
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let bytes = hex::decode(line.trim())
            .map_err(|_| Error::MalformedEncoding("audit line is not hex".into()))?;
        Self::decode(&bytes)
    }
}

#[derive(Debug, Clone, Default)]
pub struct AuditChain {
    events: Vec<AuditEvent>,
}

impl AuditChain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn events(&self) -> &[AuditEvent] {
        &self.events
    }

    pub fn head_hash(&self) -> [u8; 32] {
        self.events.last().map(|e| e.payload_hash).unwrap_or(GENESIS_HASH)
    }

    /// Sequences are gap-free and start at 1.
    pub fn next_sequence(&self) -> u64 {
        self.events.len() as u64 + 1
    }

    pub fn append(
        &mut self,
        time: u64,
        actor: &str,
        action: &str,
        subject: &str,
        payload: Vec<u8>,
    ) -> &AuditEvent {
        let sequence = self.next_sequence();
        let payload_hash = AuditEvent::chain_hash(
            &self.head_hash(),
            sequence,
            time,
            actor,
            action,
            subject,
            &payload,
        );
        self.events.push(AuditEvent {
            sequence,
            time,
            actor: actor.to_string(),
            action: action.to_string(),
            subject: subject.to_string(),
            payload,
            payload_hash,
        });
        self.events.last().expect("just pushed")
    }

    /// Admits an externally loaded event after checking its sequence and
    /// chain hash against the current head.
    pub fn accept(&mut self, event: AuditEvent) -> Result<()> {
        if event.sequence != self.next_sequence() {
            return Err(Error::AuditCorrupt(format!(
                "sequence {} where {} was expected",
                event.sequence,
                self.next_sequence()
            )));
        }
        let expected = AuditEvent::chain_hash(
            &self.head_hash(),
            event.sequence,
            event.time,
            &event.actor,
            &event.action,
            &event.subject,
            &event.payload,
        );
        if expected != event.payload_hash {
            return Err(Error::AuditCorrupt(format!(
                "hash mismatch at sequence {}",
                event.sequence
            )));
        }
        self.events.push(event);
        Ok(())
    }

    /// Recomputes the whole chain. Detects any in-place record edit;
    /// see the module doc for what a consistent suffix rewrite needs.
    pub fn verify(&self) -> Result<()> {
        let mut prev = GENESIS_HASH;
        for (index, event) in self.events.iter().enumerate() {
            if event.sequence != index as u64 + 1 {
                return Err(Error::AuditCorrupt(format!(
                    "sequence {} at position {}",
                    event.sequence,
                    index + 1
                )));
            }
            let expected = AuditEvent::chain_hash(
                &prev,
                event.sequence,
                event.time,
                &event.actor,
                &event.action,
                &event.subject,
                &event.payload,
            );
            if expected != event.payload_hash {
                return Err(Error::AuditCorrupt(format!(
                    "hash mismatch at sequence {}",
                    event.sequence
                )));
            }
            prev = event.payload_hash;
        }
        Ok(())
    }
}

/// Parses a log file body into a verified chain. A defect in the final
/// line is treated as a torn write and the line is dropped (`valid_lines`
/// tells the caller how many survived, so it can truncate the file); a
/// defect anywhere earlier is corruption and fails the load.
pub fn load_chain(text: &str) -> Result<(AuditChain, usize)> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut chain = AuditChain::new();
    for (index, line) in lines.iter().enumerate() {
        let admitted = AuditEvent::from_line(line).and_then(|event| chain.accept(event));
        if let Err(err) = admitted {
            if index + 1 == lines.len() {
                return Ok((chain, index));
            }
            return Err(Error::AuditCorrupt(format!("line {}: {err}", index + 1)));
        }
    }
    Ok((chain, lines.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> AuditChain {
        let mut chain = AuditChain::new();
        chain.append(100, "operator", "init-root", "root", b"r".to_vec());
        chain.append(101, "operator", "enroll", "applicant-1", b"aa".to_vec());
        chain.append(102, "service", "revoke", "serial-9", b"bbb".to_vec());
        chain.append(103, "service", "gateway-block", "card-1", vec![]);
        chain
    }

    #[test]
    fn chain_appends_verify_and_links_from_genesis() {
        let chain = sample();
        chain.verify().unwrap();
        let sequences: Vec<u64> = chain.events().iter().map(|e| e.sequence).collect();
        assert_eq!(sequences, [1, 2, 3, 4]);
        let first = &chain.events()[0];
        assert_eq!(
            first.payload_hash,
            AuditEvent::chain_hash(&GENESIS_HASH, 1, 100, "operator", "init-root", "root", b"r")
        );
        assert_ne!(chain.head_hash(), GENESIS_HASH);
    }

    #[test]
    fn every_field_is_covered_by_the_chain() {
        let base = sample();
        let mutations: Vec<Box<dyn Fn(&mut AuditEvent)>> = vec![
            Box::new(|e| e.sequence += 1),
            Box::new(|e| e.time += 1),
            Box::new(|e| e.actor.push('x')),
            Box::new(|e| e.action.push('x')),
            Box::new(|e| e.subject.push('x')),
            Box::new(|e| e.payload.push(0)),
            Box::new(|e| e.payload_hash[0] ^= 1),
        ];
        for (index, mutate) in mutations.iter().enumerate() {
            let mut chain = base.clone();
            mutate(&mut chain.events[1]);
            let err = chain.verify().unwrap_err();
            assert_eq!(err.code(), "audit-corrupt", "mutation {index} slipped through");
        }
    }

    #[test]
    fn consistent_suffix_rewrite_passes_locally_but_moves_the_head() {
        let honest = sample();
        let mut forged = AuditChain::new();
        for (index, event) in honest.events().iter().enumerate() {
            if index == 1 {
                forged.append(event.time, &event.actor, &event.action, "someone-else", b"forged".to_vec());
            } else {
                forged.append(event.time, &event.actor, &event.action, &event.subject, event.payload.clone());
            }
        }
        // The rewrite is internally consistent, so local verification
        // passes; only the anchored head betrays it.
        forged.verify().unwrap();
        assert_ne!(forged.head_hash(), honest.head_hash());
    }

    #[test]
    fn log_round_trips_through_lines() {
        let chain = sample();
        let text: String = chain.events().iter().map(|e| e.to_line() + "\n").collect();
        let (loaded, valid) = load_chain(&text).unwrap();
        assert_eq!(valid, 4);
        assert_eq!(loaded.events(), chain.events());
        assert_eq!(loaded.head_hash(), chain.head_hash());
    }

    #[test]
    fn torn_final_line_is_dropped_and_earlier_damage_is_fatal() {
        let chain = sample();
        let mut lines: Vec<String> = chain.events().iter().map(AuditEvent::to_line).collect();

        // Half-written final line: the event is dropped, the rest loads.
        let torn = lines.last().unwrap()[..9].to_string();
        let mut torn_lines = lines.clone();
        *torn_lines.last_mut().unwrap() = torn;
        let (loaded, valid) = load_chain(&(torn_lines.join("\n") + "\n")).unwrap();
        assert_eq!(valid, 3);
        assert_eq!(loaded.len(), 3);

        // The same damage mid-file is not recoverable.
        lines[1] = lines[1][..9].to_string();
        let err = load_chain(&(lines.join("\n") + "\n")).unwrap_err();
        assert_eq!(err.code(), "audit-corrupt");
    }

    #[test]
    fn accept_rejects_gaps_and_broken_links() {
        let chain = sample();
        let mut target = AuditChain::new();
        target.accept(chain.events()[0].clone()).unwrap();

        // Skipping sequence 2 is a gap.
        let err = target.accept(chain.events()[2].clone()).unwrap_err();
        assert_eq!(err.code(), "audit-corrupt");

        // Right sequence, wrong predecessor link.
        let mut detached = chain.events()[1].clone();
        detached.payload_hash = AuditEvent::chain_hash(
            &[7u8; 32],
            detached.sequence,
            detached.time,
            &detached.actor,
            &detached.action,
            &detached.subject,
            &detached.payload,
        );
        let err = target.accept(detached).unwrap_err();
        assert_eq!(err.code(), "audit-corrupt");

        target.accept(chain.events()[1].clone()).unwrap();
        assert_eq!(target.len(), 2);
    }
}
