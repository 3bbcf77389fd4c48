//! Catch-up machinery for lagging or freshly recovered nodes: lag detection,
//! and verified ingestion of checkpoints and batch payloads from peers.

use std::collections::BTreeMap;

use crate::checkpoint::CheckpointCert;
use crate::crypto::Digest;
use crate::messages::{Batch, HelloReply};
use crate::params::ProtocolParams;
use crate::types::{EpochNum, NodeId, SeqNum, SimTime};

/// Watches common-case traffic for evidence that the rest of the cluster
/// moved on: f+1 distinct senders advertising higher epochs.
#[derive(Debug, Default)]
pub struct LagDetector {
    higher: BTreeMap<NodeId, EpochNum>,
    /// Epoch snapshot taken when the grace timer was armed.
    pub armed_at_epoch: Option<EpochNum>,
}

impl LagDetector {
    /// Records a sender's epoch; returns true when f+1 distinct senders are
    /// ahead of `local` (the grace period starts then).
    pub fn observe(&mut self, src: NodeId, epoch: EpochNum, local: EpochNum, f: u32) -> bool {
        if epoch > local {
            let e = self.higher.entry(src).or_insert(epoch);
            *e = (*e).max(epoch);
        } else {
            self.higher.remove(&src);
        }
        self.count_ahead(local) >= (f + 1) as usize
    }

    pub fn count_ahead(&self, local: EpochNum) -> usize {
        self.higher.values().filter(|e| **e > local).count()
    }

    /// Still lagging after the grace period iff no local transition happened
    /// and the evidence stands.
    pub fn still_lagging(&self, local: EpochNum, f: u32) -> bool {
        self.armed_at_epoch == Some(local) && self.count_ahead(local) >= (f + 1) as usize
    }

    pub fn reset(&mut self) {
        self.higher.clear();
        self.armed_at_epoch = None;
    }
}

/// Accumulates HELLO replies until enough evidence exists to adopt batches.
///
/// A batch payload is trusted once its digest is vouched for by f nodes
/// beyond the one that supplied the payload; payloads covered by the adopted
/// checkpoint must come from, and be confirmed by, its signers.
#[derive(Debug, Default)]
pub struct TransferState {
    pub started_at: SimTime,
    payloads: BTreeMap<SeqNum, Vec<(NodeId, Batch)>>,
    digests: BTreeMap<SeqNum, BTreeMap<NodeId, Digest>>,
    pub checkpoint: Option<CheckpointCert>,
}

impl TransferState {
    pub fn new(started_at: SimTime) -> TransferState {
        TransferState { started_at, ..TransferState::default() }
    }

    /// Folds in one reply. The caller has already validated the embedded
    /// checkpoint certificate and config records.
    pub fn absorb(&mut self, src: NodeId, reply: &HelloReply) {
        if let Some(cert) = &reply.hello.checkpoint {
            if self.checkpoint.as_ref().is_none_or(|c| cert.sn > c.sn) {
                self.checkpoint = Some(cert.clone());
            }
        }
        for batch in &reply.batches {
            let slot = self.payloads.entry(batch.sn).or_default();
            if !slot.iter().any(|(n, _)| *n == src) {
                slot.push((src, batch.clone()));
            }
            self.digests.entry(batch.sn).or_default().insert(src, batch.digest());
        }
        for (sn, digest) in &reply.batch_digests {
            self.digests.entry(*sn).or_default().insert(src, *digest);
        }
    }

    /// A payload for `sn` whose digest carries f confirmations beyond its
    /// source. Returns `None` while the evidence is insufficient.
    pub fn accepted(&self, sn: SeqNum, params: &ProtocolParams) -> Option<&Batch> {
        let candidates = self.payloads.get(&sn)?;
        let reports = self.digests.get(&sn);
        let covered = self.checkpoint.as_ref().is_some_and(|c| sn <= c.sn);
        for (source, batch) in candidates {
            if covered && !self.is_signer(*source) {
                continue;
            }
            let digest = batch.digest();
            let confirmations = reports
                .map(|r| {
                    r.iter()
                        .filter(|(node, d)| {
                            **node != *source
                                && **d == digest
                                && (!covered || self.is_signer(**node))
                        })
                        .count()
                })
                .unwrap_or(0);
            if confirmations >= params.f as usize {
                return Some(batch);
            }
        }
        None
    }

    fn is_signer(&self, node: NodeId) -> bool {
        self.checkpoint.as_ref().is_some_and(|c| c.sigs.contains_key(&node))
    }

    pub fn reply_count(&self) -> usize {
        let mut nodes: Vec<NodeId> = Vec::new();
        for reports in self.digests.values() {
            for n in reports.keys() {
                if !nodes.contains(n) {
                    nodes.push(*n);
                }
            }
        }
        nodes.len()
    }
}
