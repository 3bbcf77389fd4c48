//! Checkpointing: periodic state digests, stable-checkpoint certificates,
//! and the watermark advancement they unlock.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{digest_parts, Digest, KeyRegistry, Signature};
use crate::params::ProtocolParams;
use crate::types::{NodeId, ProcessId, SeqNum, Timestamp};

/// A checkpoint backed by 2f+1 matching signed CHECKPOINT messages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointCert {
    pub sn: SeqNum,
    pub state_digest: Digest,
    pub sigs: BTreeMap<NodeId, Signature>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("checkpoint {sn}: {have} valid signatures below quorum {need}")]
    InsufficientSignatures { sn: SeqNum, have: usize, need: usize },
}

impl CheckpointCert {
    /// Verifies the attestation quorum.
    pub fn validate(
        &self,
        registry: &KeyRegistry,
        params: &ProtocolParams,
    ) -> Result<(), CheckpointError> {
        let bytes = crate::messages::checkpoint_signing_bytes(self.sn, &self.state_digest);
        let have = self
            .sigs
            .iter()
            .filter(|(node, sig)| registry.is_valid(&ProcessId::Node(**node), &bytes, sig))
            .count();
        let need = params.checkpoint_quorum();
        if have < need {
            return Err(CheckpointError::InsufficientSignatures { sn: self.sn, have, need });
        }
        Ok(())
    }

    /// Folds the certificate into a signable identity.
    pub fn content_digest(&self) -> Digest {
        let mut parts: Vec<Vec<u8>> = vec![
            b"checkpoint-cert".to_vec(),
            self.sn.to_be_bytes().to_vec(),
            self.state_digest.0.to_vec(),
        ];
        for (node, sig) in &self.sigs {
            parts.push(node.0.to_be_bytes().to_vec());
            parts.push(sig.bytes.clone());
        }
        let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
        digest_parts(&refs)
    }
}

/// Inclusive range of sequence numbers a checkpoint at `sn` covers. The
/// first checkpoint additionally covers sequence number 0.
pub fn checkpoint_range(sn: SeqNum, period: u64) -> (SeqNum, SeqNum) {
    if sn == period {
        (0, sn)
    } else {
        (sn - period + 1, sn)
    }
}

/// State digest over per-batch digests in checkpoint order.
pub fn state_digest(batch_digests: &[Digest]) -> Digest {
    let mut parts: Vec<&[u8]> = Vec::with_capacity(batch_digests.len() + 1);
    parts.push(b"state");
    for d in batch_digests {
        parts.push(&d.0);
    }
    digest_parts(&parts)
}

/// Collects CHECKPOINT votes until a certificate forms.
#[derive(Debug, Default)]
pub struct CheckpointTracker {
    votes: BTreeMap<SeqNum, BTreeMap<NodeId, (Digest, Signature)>>,
    stable: Option<CheckpointCert>,
}

impl CheckpointTracker {
    pub fn stable(&self) -> Option<&CheckpointCert> {
        self.stable.as_ref()
    }

    pub fn stable_sn(&self) -> Option<SeqNum> {
        self.stable.as_ref().map(|c| c.sn)
    }

    /// Records one vote; returns a fresh certificate the first time `sn`
    /// gathers a matching quorum beyond the current stable checkpoint.
    pub fn on_vote(
        &mut self,
        from: NodeId,
        sn: SeqNum,
        digest: Digest,
        sig: Signature,
        params: &ProtocolParams,
    ) -> Option<CheckpointCert> {
        if self.stable_sn().is_some_and(|stable| sn <= stable) {
            return None;
        }
        let votes = self.votes.entry(sn).or_default();
        votes.insert(from, (digest, sig));

        let matching: BTreeMap<NodeId, Signature> = votes
            .iter()
            .filter(|(_, (d, _))| *d == digest)
            .map(|(n, (_, s))| (*n, s.clone()))
            .collect();
        if matching.len() >= params.checkpoint_quorum() {
            let cert = CheckpointCert { sn, state_digest: digest, sigs: matching };
            self.adopt(cert.clone());
            return Some(cert);
        }
        None
    }

    /// Installs a certificate obtained elsewhere (NEW-EPOCH, state transfer)
    /// if it is newer than the current one. Returns true when adopted.
    pub fn adopt(&mut self, cert: CheckpointCert) -> bool {
        if self.stable_sn().is_some_and(|stable| cert.sn <= stable) {
            return false;
        }
        let sn = cert.sn;
        self.stable = Some(cert);
        self.votes = self.votes.split_off(&(sn + 1));
        true
    }
}

/// Advances one client's low watermark: the highest timestamp `t` such that
/// every `t' <= t` has been delivered. `delivered` holds the delivered
/// timestamps above the previous low watermark.
pub fn advance_client_watermark(
    prev_low: Timestamp,
    delivered: &std::collections::BTreeSet<Timestamp>,
    window: u64,
) -> (Timestamp, Timestamp) {
    let mut low = prev_low;
    while delivered.contains(&(low + 1)) {
        low += 1;
    }
    (low, low + window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{digest, SchemeKind};
    use std::collections::BTreeSet;

    fn params() -> ProtocolParams {
        ProtocolParams::default()
    }

    #[test]
    fn ranges_tile_the_sequence_space() {
        assert_eq!(checkpoint_range(128, 128), (0, 128));
        assert_eq!(checkpoint_range(256, 128), (129, 256));
        assert_eq!(checkpoint_range(384, 128), (257, 384));
    }

    #[test]
    fn tracker_needs_matching_quorum() {
        let p = params();
        let mut reg = KeyRegistry::new(SchemeKind::Test, 5);
        let keys: Vec<_> = (0..4).map(|i| reg.register(ProcessId::Node(NodeId(i)))).collect();
        let good = digest(b"state-a");
        let bad = digest(b"state-b");
        let sig = |i: usize, d: &Digest| {
            keys[i].sign(&crate::messages::checkpoint_signing_bytes(128, d))
        };

        let mut tracker = CheckpointTracker::default();
        assert!(tracker.on_vote(NodeId(0), 128, good, sig(0, &good), &p).is_none());
        // A conflicting digest does not count toward the quorum.
        assert!(tracker.on_vote(NodeId(1), 128, bad, sig(1, &bad), &p).is_none());
        assert!(tracker.on_vote(NodeId(2), 128, good, sig(2, &good), &p).is_none());
        let cert = tracker.on_vote(NodeId(3), 128, good, sig(3, &good), &p).unwrap();
        assert_eq!(cert.sn, 128);
        assert_eq!(cert.sigs.len(), 3);
        assert!(cert.validate(&reg, &p).is_ok());
        assert_eq!(tracker.stable_sn(), Some(128));
    }

    #[test]
    fn forged_cert_fails_validation() {
        let p = params();
        let mut reg = KeyRegistry::new(SchemeKind::Test, 5);
        let k0 = reg.register(ProcessId::Node(NodeId(0)));
        let d = digest(b"state");
        let mut sigs = BTreeMap::new();
        // One real signature and garbage for the rest: below 2f+1.
        sigs.insert(NodeId(0), k0.sign(&crate::messages::checkpoint_signing_bytes(128, &d)));
        sigs.insert(NodeId(1), Signature { scheme: SchemeKind::Test, bytes: vec![0; 32] });
        sigs.insert(NodeId(2), Signature { scheme: SchemeKind::Test, bytes: vec![1; 32] });
        let cert = CheckpointCert { sn: 128, state_digest: d, sigs };
        assert_eq!(
            cert.validate(&reg, &p),
            Err(CheckpointError::InsufficientSignatures { sn: 128, have: 1, need: 3 })
        );
    }

    #[test]
    fn stale_certificates_are_not_adopted() {
        let mut tracker = CheckpointTracker::default();
        let newer = CheckpointCert { sn: 256, state_digest: digest(b"x"), sigs: BTreeMap::new() };
        let older = CheckpointCert { sn: 128, state_digest: digest(b"y"), sigs: BTreeMap::new() };
        assert!(tracker.adopt(newer));
        assert!(!tracker.adopt(older));
        assert_eq!(tracker.stable_sn(), Some(256));
    }

    #[test]
    fn watermark_advances_over_the_contiguous_prefix() {
        // Delivered {1,2,3,5}: the highest contiguous timestamp is 3.
        let delivered: BTreeSet<Timestamp> = [1, 2, 3, 5].into_iter().collect();
        assert_eq!(advance_client_watermark(0, &delivered, 16), (3, 19));
    }

    #[test]
    fn watermark_unchanged_without_deliveries() {
        let delivered = BTreeSet::new();
        assert_eq!(advance_client_watermark(0, &delivered, 16), (0, 16));
    }

    #[test]
    fn watermark_full_prefix() {
        let delivered: BTreeSet<Timestamp> = (1..=9).collect();
        assert_eq!(advance_client_watermark(0, &delivered, 16), (9, 25));
        // And advancing again from 9 with nothing new stays put.
        assert_eq!(advance_client_watermark(9, &delivered, 16), (9, 25));
    }
}
