//! Epoch lifecycle: leader/primary mapping, leader-set policy for gracious
//! and ungracious transitions, NEW-EPOCH construction and validation, and
//! reliable broadcast of epoch configurations.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bucketing::BucketId;
use crate::checkpoint::CheckpointCert;
use crate::crypto::{digest_parts, Digest, KeyRegistry, Signature, SigningKey};
use crate::messages::{
    rb_ready_signing_bytes, Batch, ConfigRecord, EpochChangeMsg, NewEpochMsg, PreparedCert,
    ProtocolMessage, RbMsg, RbPhase, SignedEpochChange,
};
use crate::params::ProtocolParams;
use crate::types::{EpochNum, NodeId, ProcessId, SeqNum};

/// Per-epoch configuration: the sequence-number range, the ordered leader
/// set (primary first), and the primary's preferred buckets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochConfig {
    pub epoch: EpochNum,
    pub first: SeqNum,
    /// `None` for stable epochs, which end only through a timeout.
    pub last: Option<SeqNum>,
    /// Leaders with the primary first; duplicate-free.
    pub leaders: Vec<NodeId>,
    /// The consecutive bucket run the primary picked for itself.
    pub primary_buckets: Vec<BucketId>,
}

impl EpochConfig {
    pub fn primary(&self) -> NodeId {
        self.leaders[0]
    }

    pub fn is_stable(&self) -> bool {
        self.last.is_none()
    }

    pub fn contains_sn(&self, sn: SeqNum) -> bool {
        sn >= self.first && self.last.is_none_or(|l| sn <= l)
    }

    pub fn digest(&self) -> Digest {
        let mut parts: Vec<Vec<u8>> = vec![
            b"epoch-config".to_vec(),
            self.epoch.to_be_bytes().to_vec(),
            self.first.to_be_bytes().to_vec(),
            self.last.unwrap_or(u64::MAX).to_be_bytes().to_vec(),
        ];
        for l in &self.leaders {
            parts.push(l.0.to_be_bytes().to_vec());
        }
        for b in &self.primary_buckets {
            parts.push(b.0.to_be_bytes().to_vec());
        }
        let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
        digest_parts(&refs)
    }

    /// Structural checks a receiver applies before accepting a broadcast
    /// configuration. The leader set itself is the primary's choice and is
    /// not second-guessed beyond these rules.
    pub fn well_formed(&self, params: &ProtocolParams) -> bool {
        if self.leaders.is_empty() || self.leaders.len() > params.n as usize {
            return false;
        }
        let unique: BTreeSet<_> = self.leaders.iter().collect();
        if unique.len() != self.leaders.len() {
            return false;
        }
        if self.leaders.iter().any(|l| l.0 >= params.n) {
            return false;
        }
        if self.primary() != primary_of(self.epoch, params.n) {
            return false;
        }
        // Stability must agree with the leader-set size, and ephemeral
        // epochs must span exactly ephemeral_epoch_len sequence numbers.
        match self.last {
            None => params.is_stable_size(self.leaders.len()),
            Some(last) => {
                !params.is_stable_size(self.leaders.len())
                    && last >= self.first
                    && last - self.first + 1 == params.ephemeral_epoch_len
            }
        }
    }
}

/// The epoch primary, rotating round-robin over all nodes.
pub fn primary_of(epoch: EpochNum, n: u32) -> NodeId {
    NodeId((epoch % n as u64) as u32)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EpochError {
    #[error("sequence number {sn} outside epoch {epoch} range")]
    OutOfEpoch { epoch: EpochNum, sn: SeqNum },
    #[error("need {need} epoch-change messages, have {have}")]
    InsufficientEpochChanges { need: usize, have: usize },
    #[error("NEW-EPOCH failed validation: {0}")]
    InvalidNewEpoch(String),
}

/// The leader that owns `sn`: round-robin over the leader list (primary
/// first), starting at the epoch's first sequence number.
pub fn leader_of(sn: SeqNum, config: &EpochConfig) -> Result<NodeId, EpochError> {
    if !config.contains_sn(sn) {
        return Err(EpochError::OutOfEpoch { epoch: config.epoch, sn });
    }
    let idx = ((sn - config.first) % config.leaders.len() as u64) as usize;
    Ok(config.leaders[idx])
}

/// The configuration every node assumes at startup: epoch 0 starting at
/// sequence number 0, led by the `stable_leaders` lowest node ids (all nodes
/// in the default configuration), with the primary preferring bucket 0.
pub fn genesis_config(params: &ProtocolParams) -> EpochConfig {
    let leaders: Vec<NodeId> = (0..params.stable_leaders).map(NodeId).collect();
    let last = if params.is_stable_size(leaders.len()) {
        None
    } else {
        Some(params.ephemeral_epoch_len - 1)
    };
    let primary_run = params.num_buckets().div_ceil(leaders.len() as u32);
    EpochConfig {
        epoch: 0,
        first: 0,
        last,
        leaders,
        primary_buckets: (0..primary_run).map(BucketId).collect(),
    }
}

/// Builds the next configuration for a gracious change: the new primary adds
/// itself to the previous leader set and prefers the consecutive bucket run
/// that starts at the bucket holding its oldest pending request.
pub fn next_epoch_config_gracious(
    primary: NodeId,
    prev: &EpochConfig,
    oldest_pending_bucket: Option<BucketId>,
    params: &ProtocolParams,
) -> EpochConfig {
    let mut leaders: Vec<NodeId> = prev.leaders.iter().copied().filter(|l| *l != primary).collect();
    leaders.sort_unstable();
    leaders.insert(0, primary);

    let first = prev.last.expect("gracious change only ends a bounded epoch") + 1;
    finish_config(prev.epoch + 1, first, leaders, oldest_pending_bucket, params)
}

fn finish_config(
    epoch: EpochNum,
    first: SeqNum,
    leaders: Vec<NodeId>,
    preferred_start: Option<BucketId>,
    params: &ProtocolParams,
) -> EpochConfig {
    let last = if params.is_stable_size(leaders.len()) {
        None
    } else {
        Some(first + params.ephemeral_epoch_len - 1)
    };
    let nb = params.num_buckets();
    let run = nb.div_ceil(leaders.len() as u32);
    let start = preferred_start.unwrap_or(BucketId(0)).0;
    EpochConfig {
        epoch,
        first,
        last,
        leaders,
        primary_buckets: (0..run).map(|i| BucketId((start + i) % nb)).collect(),
    }
}

/// Leader-set policy for an ungracious change: start from the last known
/// leader set plus the new primary, then remove one node per epoch skipped
/// since that configuration, never the primary, preferring blamed nodes and
/// falling back to a seeded-random choice.
pub fn next_leader_set_ungracious(
    primary: NodeId,
    target_epoch: EpochNum,
    last_known_epoch: EpochNum,
    last_known_leaders: &[NodeId],
    suspects: &[NodeId],
    rng: &mut impl Rng,
) -> Vec<NodeId> {
    let mut set: BTreeSet<NodeId> = last_known_leaders.iter().copied().collect();
    set.insert(primary);

    let removals = (target_epoch - last_known_epoch).min(set.len() as u64 - 1) as usize;
    let mut removed = 0;
    for suspect in suspects {
        if removed == removals {
            break;
        }
        if *suspect != primary && set.remove(suspect) {
            removed += 1;
        }
    }
    while removed < removals {
        let candidates: Vec<NodeId> = set.iter().copied().filter(|l| *l != primary).collect();
        let victim = candidates[rng.random_range(0..candidates.len())];
        set.remove(&victim);
        removed += 1;
    }

    let mut leaders: Vec<NodeId> = set.into_iter().filter(|l| *l != primary).collect();
    leaders.insert(0, primary);
    leaders
}

/// Everything the primary derives from a quorum of EPOCH-CHANGE messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DerivedNewEpoch {
    /// Highest stable checkpoint across the quorum.
    pub min_s: Option<SeqNum>,
    /// Highest re-proposed sequence number; the new epoch starts right after.
    pub horizon: Option<SeqNum>,
    /// Slots in (min_s, horizon]: a prepared batch to re-propose, or `None`
    /// for an empty gap filler.
    pub slots: Vec<(SeqNum, Option<Batch>)>,
    /// The checkpoint certificate backing `min_s`, if any.
    pub checkpoint: Option<CheckpointCert>,
    /// Suspect tally across the quorum, most blamed first.
    pub suspects: Vec<NodeId>,
}

impl DerivedNewEpoch {
    /// First sequence number of the new epoch.
    pub fn next_first(&self) -> SeqNum {
        match self.horizon.or(self.min_s) {
            Some(sn) => sn + 1,
            None => 0,
        }
    }
}

/// Validates one epoch-change message (signature checked separately).
pub fn validate_epoch_change(
    sender: NodeId,
    msg: &EpochChangeMsg,
    registry: &KeyRegistry,
    params: &ProtocolParams,
) -> Result<(), EpochError> {
    let bytes =
        EpochChangeMsg::signing_bytes(msg.target, &msg.checkpoint, &msg.prepared, &msg.suspect);
    if !registry.is_valid(&ProcessId::Node(sender), &bytes, &msg.sig) {
        return Err(EpochError::InvalidNewEpoch(format!("bad epoch-change signature from {sender}")));
    }
    if let Some(cert) = &msg.checkpoint {
        cert.validate(registry, params)
            .map_err(|e| EpochError::InvalidNewEpoch(format!("checkpoint cert: {e}")))?;
    }
    for cert in &msg.prepared {
        validate_prepared_cert(cert, registry, params)?;
    }
    Ok(())
}

/// A prepared certificate is the leader's proposal signature plus a quorum
/// of matching prepare signatures (the leader's proposal standing in for its
/// own prepare).
pub fn validate_prepared_cert(
    cert: &PreparedCert,
    registry: &KeyRegistry,
    params: &ProtocolParams,
) -> Result<(), EpochError> {
    let digest = cert.batch.digest();
    let bad = |m: String| EpochError::InvalidNewEpoch(m);

    let pp_bytes = crate::messages::preprepare_signing_bytes(cert.epoch, cert.sn, &digest);
    if !registry.is_valid(&ProcessId::Node(cert.batch.leader), &pp_bytes, &cert.leader_sig) {
        return Err(bad(format!("prepared cert {}: bad leader signature", cert.sn)));
    }

    let mut voters: BTreeSet<NodeId> = BTreeSet::new();
    voters.insert(cert.batch.leader);
    let prep_bytes = crate::messages::prepare_signing_bytes(cert.epoch, cert.sn, &digest);
    for (node, sig) in &cert.prepares {
        if !registry.is_valid(&ProcessId::Node(*node), &prep_bytes, sig) {
            return Err(bad(format!("prepared cert {}: bad prepare from {node}", cert.sn)));
        }
        voters.insert(*node);
    }
    if voters.len() < params.quorum() {
        return Err(bad(format!(
            "prepared cert {}: {} voters below quorum {}",
            cert.sn,
            voters.len(),
            params.quorum()
        )));
    }
    Ok(())
}

/// Folds a quorum of epoch-change messages into the re-proposal schedule,
/// PBFT new-view style: take the highest stable checkpoint, re-propose every
/// prepared batch above it (highest epoch wins per slot), and fill the gaps
/// up to the highest prepared sequence number with empty batches.
pub fn derive_new_epoch(
    echanges: &[SignedEpochChange],
    params: &ProtocolParams,
) -> Result<DerivedNewEpoch, EpochError> {
    let need = params.epoch_change_quorum();
    let senders: BTreeSet<NodeId> = echanges.iter().map(|e| e.sender).collect();
    if senders.len() < need {
        return Err(EpochError::InsufficientEpochChanges { need, have: senders.len() });
    }

    let mut checkpoint: Option<CheckpointCert> = None;
    for ec in echanges {
        if let Some(c) = &ec.msg.checkpoint {
            if checkpoint.as_ref().is_none_or(|best| c.sn > best.sn) {
                checkpoint = Some(c.clone());
            }
        }
    }
    let min_s = checkpoint.as_ref().map(|c| c.sn);

    // Best prepared certificate per slot: higher epoch wins; digest order
    // breaks ties deterministically.
    let mut best: BTreeMap<SeqNum, &PreparedCert> = BTreeMap::new();
    for ec in echanges {
        for cert in &ec.msg.prepared {
            if min_s.is_some_and(|m| cert.sn <= m) {
                continue;
            }
            let replace = match best.get(&cert.sn) {
                None => true,
                Some(cur) => {
                    (cert.epoch, cert.digest()) > (cur.epoch, cur.digest())
                }
            };
            if replace {
                best.insert(cert.sn, cert);
            }
        }
    }

    let horizon = best.keys().next_back().copied().or(min_s);
    let mut slots = Vec::new();
    if let Some(h) = horizon {
        let lo = min_s.map_or(0, |m| m + 1);
        for sn in lo..=h {
            slots.push((sn, best.get(&sn).map(|c| c.batch.clone())));
        }
    }

    // Tally suspects: most blamed first, node id breaking ties.
    let mut counts: BTreeMap<NodeId, usize> = BTreeMap::new();
    for ec in echanges {
        if let Some(s) = ec.msg.suspect {
            *counts.entry(s).or_default() += 1;
        }
    }
    let mut suspects: Vec<(NodeId, usize)> = counts.into_iter().collect();
    suspects.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

    Ok(DerivedNewEpoch {
        min_s,
        horizon,
        slots,
        checkpoint,
        suspects: suspects.into_iter().map(|(n, _)| n).collect(),
    })
}

/// Materializes the re-proposal list: prepared batches as-is, gaps as empty
/// batches attributed to the new primary. Every re-proposal is signed by the
/// primary over the *new* epoch so it can anchor future prepared
/// certificates.
pub fn materialize_reproposals(
    derived: &DerivedNewEpoch,
    epoch: EpochNum,
    primary: NodeId,
    key: &SigningKey,
) -> Vec<crate::messages::PrePrepare> {
    derived
        .slots
        .iter()
        .map(|(sn, batch)| {
            let batch = match batch {
                Some(b) => b.clone(),
                None => Batch { epoch, sn: *sn, leader: primary, requests: Vec::new() },
            };
            let digest = batch.digest();
            let sig =
                key.sign(&crate::messages::preprepare_signing_bytes(epoch, *sn, &digest));
            crate::messages::PrePrepare { batch, sig }
        })
        .collect()
}

/// Full receiver-side validation of a NEW-EPOCH message: the primary's
/// signature, every embedded epoch-change message and certificate, and an
/// exact re-derivation of the re-proposal schedule.
pub fn validate_new_epoch(
    msg: &NewEpochMsg,
    registry: &KeyRegistry,
    params: &ProtocolParams,
) -> Result<DerivedNewEpoch, EpochError> {
    let primary = primary_of(msg.epoch, params.n);
    let bytes = NewEpochMsg::signing_bytes(msg.epoch, &msg.echanges, &msg.reproposals);
    if !registry.is_valid(&ProcessId::Node(primary), &bytes, &msg.sig) {
        return Err(EpochError::InvalidNewEpoch("bad primary signature".into()));
    }

    let senders: BTreeSet<NodeId> = msg.echanges.iter().map(|e| e.sender).collect();
    if senders.len() != msg.echanges.len() {
        return Err(EpochError::InvalidNewEpoch("duplicate epoch-change senders".into()));
    }
    for ec in &msg.echanges {
        if ec.msg.target != msg.epoch {
            return Err(EpochError::InvalidNewEpoch("epoch-change for wrong epoch".into()));
        }
        validate_epoch_change(ec.sender, &ec.msg, registry, params)?;
    }

    let derived = derive_new_epoch(&msg.echanges, params)?;
    let expected: Vec<(SeqNum, Digest)> = derived
        .slots
        .iter()
        .map(|(sn, batch)| match batch {
            Some(b) => (*sn, b.digest()),
            None => {
                let empty = Batch { epoch: msg.epoch, sn: *sn, leader: primary, requests: vec![] };
                (*sn, empty.digest())
            }
        })
        .collect();
    let got: Vec<(SeqNum, Digest)> =
        msg.reproposals.iter().map(|pp| (pp.batch.sn, pp.batch.digest())).collect();
    if expected != got {
        return Err(EpochError::InvalidNewEpoch("re-proposals do not match the quorum".into()));
    }
    // Each re-proposal must carry the primary's proposal signature for the
    // new epoch.
    for pp in &msg.reproposals {
        let bytes =
            crate::messages::preprepare_signing_bytes(msg.epoch, pp.batch.sn, &pp.batch.digest());
        if !registry.is_valid(&ProcessId::Node(primary), &bytes, &pp.sig) {
            return Err(EpochError::InvalidNewEpoch(format!(
                "re-proposal {} lacks a valid primary signature",
                pp.batch.sn
            )));
        }
    }
    Ok(derived)
}

/// Bracha reliable broadcast of one epoch's configuration.
///
/// SEND (primary only) triggers ECHO; an echo quorum triggers READY; f+1
/// READYs amplify; 2f+1 READYs deliver. At most one configuration is
/// delivered per epoch across correct nodes.
#[derive(Debug, Default)]
pub struct RbState {
    echoed: bool,
    ready_digest: Option<Digest>,
    echoes: BTreeMap<Digest, BTreeSet<NodeId>>,
    readys: BTreeMap<Digest, BTreeMap<NodeId, Signature>>,
    configs: BTreeMap<Digest, EpochConfig>,
    delivered: Option<ConfigRecord>,
}

/// What a reliable-broadcast step asks the caller to do.
#[derive(Debug)]
pub enum RbAction {
    Broadcast(ProtocolMessage),
    Deliver(ConfigRecord),
}

impl RbState {
    pub fn delivered(&self) -> Option<&ConfigRecord> {
        self.delivered.as_ref()
    }

    /// Kicks off the broadcast at the primary.
    pub fn broadcast(epoch: EpochNum, config: EpochConfig) -> ProtocolMessage {
        ProtocolMessage::Rb(RbMsg { phase: RbPhase::Send, epoch, config, sig: None })
    }

    pub fn on_message(
        &mut self,
        me: NodeId,
        key: &SigningKey,
        src: NodeId,
        msg: &RbMsg,
        registry: &KeyRegistry,
        params: &ProtocolParams,
    ) -> Vec<RbAction> {
        let mut actions = Vec::new();
        if self.delivered.is_some() || !msg.config.well_formed(params) {
            return actions;
        }
        let digest = msg.config.digest();
        match msg.phase {
            RbPhase::Send => {
                // Only the epoch primary may initiate, and we echo at most once.
                if src == primary_of(msg.epoch, params.n) && !self.echoed {
                    self.echoed = true;
                    self.configs.insert(digest, msg.config.clone());
                    actions.push(RbAction::Broadcast(ProtocolMessage::Rb(RbMsg {
                        phase: RbPhase::Echo,
                        epoch: msg.epoch,
                        config: msg.config.clone(),
                        sig: None,
                    })));
                }
            }
            RbPhase::Echo => {
                self.configs.insert(digest, msg.config.clone());
                self.echoes.entry(digest).or_default().insert(src);
                let echo_quorum = ((params.n + params.f) / 2 + 1) as usize;
                if self.echoes[&digest].len() >= echo_quorum {
                    actions.extend(self.send_ready(me, key, msg.epoch, digest));
                }
            }
            RbPhase::Ready => {
                let Some(sig) = &msg.sig else { return actions };
                let bytes = rb_ready_signing_bytes(msg.epoch, &digest);
                if !registry.is_valid(&ProcessId::Node(src), &bytes, sig) {
                    return actions;
                }
                self.configs.insert(digest, msg.config.clone());
                self.readys.entry(digest).or_default().insert(src, sig.clone());
                let count = self.readys[&digest].len();
                if count >= (params.f + 1) as usize {
                    actions.extend(self.send_ready(me, key, msg.epoch, digest));
                }
                // Re-read: our own ready may have just landed.
                if self.readys[&digest].len() >= (2 * params.f + 1) as usize {
                    let record = ConfigRecord {
                        config: self.configs[&digest].clone(),
                        ready_cert: self.readys[&digest].clone(),
                    };
                    self.delivered = Some(record.clone());
                    actions.push(RbAction::Deliver(record));
                }
            }
        }
        actions
    }

    fn send_ready(
        &mut self,
        me: NodeId,
        key: &SigningKey,
        epoch: EpochNum,
        digest: Digest,
    ) -> Option<RbAction> {
        if self.ready_digest.is_some() {
            return None;
        }
        self.ready_digest = Some(digest);
        let sig = key.sign(&rb_ready_signing_bytes(epoch, &digest));
        // Count ourselves immediately; our broadcast also loops back.
        self.readys.entry(digest).or_default().insert(me, sig.clone());
        Some(RbAction::Broadcast(ProtocolMessage::Rb(RbMsg {
            phase: RbPhase::Ready,
            epoch,
            config: self.configs[&digest].clone(),
            sig: Some(sig),
        })))
    }
}

/// Checks a relayed config record: 2f+1 valid READY signatures.
pub fn validate_config_record(
    record: &ConfigRecord,
    registry: &KeyRegistry,
    params: &ProtocolParams,
) -> bool {
    if !record.config.well_formed(params) {
        return false;
    }
    let digest = record.config.digest();
    let bytes = rb_ready_signing_bytes(record.config.epoch, &digest);
    let valid = record
        .ready_cert
        .iter()
        .filter(|(node, sig)| registry.is_valid(&ProcessId::Node(**node), &bytes, sig))
        .count();
    valid >= (2 * params.f + 1) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::SchemeKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn params(n: u32, f: u32) -> ProtocolParams {
        ProtocolParams { n, f, stable_leaders: n, ..ProtocolParams::default() }
    }

    #[test]
    fn primary_rotates_round_robin() {
        assert_eq!(primary_of(0, 4), NodeId(0));
        assert_eq!(primary_of(5, 4), NodeId(1));
        assert_eq!(primary_of(4, 4), NodeId(0));
    }

    #[test]
    fn leader_of_round_robin_from_primary() {
        let cfg = EpochConfig {
            epoch: 0,
            first: 0,
            last: None,
            leaders: vec![0, 1, 2, 3].into_iter().map(NodeId).collect(),
            primary_buckets: vec![],
        };
        assert_eq!(leader_of(5, &cfg), Ok(NodeId(1)));

        let single = EpochConfig {
            epoch: 2,
            first: 0,
            last: None,
            leaders: vec![NodeId(2)],
            primary_buckets: vec![],
        };
        assert_eq!(leader_of(7, &single), Ok(NodeId(2)));

        let sparse = EpochConfig {
            epoch: 3,
            first: 100,
            last: Some(355),
            leaders: vec![NodeId(3), NodeId(0), NodeId(1)],
            primary_buckets: vec![],
        };
        assert_eq!(leader_of(101, &sparse), Ok(NodeId(0)));
        assert!(matches!(leader_of(99, &sparse), Err(EpochError::OutOfEpoch { .. })));
    }

    #[test]
    fn gracious_config_grows_to_stable() {
        let p = params(4, 1);
        let prev = EpochConfig {
            epoch: 2,
            first: 50,
            last: Some(305),
            leaders: vec![NodeId(2), NodeId(0), NodeId(1)],
            primary_buckets: vec![BucketId(0)],
        };
        let next = next_epoch_config_gracious(NodeId(3), &prev, Some(BucketId(5)), &p);
        assert_eq!(next.epoch, 3);
        assert_eq!(next.first, 306);
        assert_eq!(next.leaders, vec![NodeId(3), NodeId(0), NodeId(1), NodeId(2)]);
        assert!(next.is_stable(), "all four nodes lead");
        assert_eq!(next.primary_buckets[0], BucketId(5));
        assert_eq!(next.primary_buckets.len(), 2); // ceil(8 / 4)
    }

    #[test]
    fn gracious_config_is_idempotent_for_member_primary() {
        let p = params(4, 1);
        let prev = EpochConfig {
            epoch: 4,
            first: 0,
            last: Some(255),
            leaders: vec![NodeId(0), NodeId(1), NodeId(2)],
            primary_buckets: vec![BucketId(0)],
        };
        let next = next_epoch_config_gracious(NodeId(1), &prev, None, &p);
        assert_eq!(next.leaders, vec![NodeId(1), NodeId(0), NodeId(2)]);
        assert!(!next.is_stable());
        assert_eq!(next.last, Some(256 + 255));
    }

    #[test]
    fn ungracious_removal_prefers_suspects() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let all = [0, 1, 2, 3].map(NodeId);
        let set =
            next_leader_set_ungracious(NodeId(1), 5, 4, &all, &[NodeId(3)], &mut rng);
        assert_eq!(set, vec![NodeId(1), NodeId(0), NodeId(2)]);
    }

    #[test]
    fn ungracious_removal_never_drops_primary_below_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let set = next_leader_set_ungracious(NodeId(2), 9, 3, &[NodeId(2)], &[], &mut rng);
        assert_eq!(set, vec![NodeId(2)]);
    }

    #[test]
    fn ungracious_removal_caps_at_skipped_epochs() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let all = [0, 1, 2, 3].map(NodeId);
        // Three epochs skipped, four leaders: everyone but the primary goes.
        let set = next_leader_set_ungracious(NodeId(1), 6, 3, &all, &[], &mut rng);
        assert_eq!(set, vec![NodeId(1)]);
    }

    fn signed_echange(
        sender: NodeId,
        target: EpochNum,
        checkpoint: Option<CheckpointCert>,
        prepared: Vec<PreparedCert>,
        suspect: Option<NodeId>,
        reg: &mut KeyRegistry,
    ) -> SignedEpochChange {
        let key = reg.register(ProcessId::Node(sender));
        let bytes = EpochChangeMsg::signing_bytes(target, &checkpoint, &prepared, &suspect);
        SignedEpochChange {
            sender,
            msg: EpochChangeMsg { target, checkpoint, prepared, suspect, sig: key.sign(&bytes) },
        }
    }

    #[test]
    fn derive_with_no_prepared_batches_yields_no_slots() {
        let p = params(4, 1);
        let mut reg = KeyRegistry::new(SchemeKind::Test, 3);
        let echanges: Vec<SignedEpochChange> = (0..3)
            .map(|i| signed_echange(NodeId(i), 1, None, vec![], None, &mut reg))
            .collect();
        let d = derive_new_epoch(&echanges, &p).unwrap();
        assert_eq!(d.min_s, None);
        assert_eq!(d.horizon, None);
        assert!(d.slots.is_empty());
        assert_eq!(d.next_first(), 0);
    }

    #[test]
    fn quorum_counts_distinct_senders() {
        let p = params(4, 1);
        let mut reg = KeyRegistry::new(SchemeKind::Test, 3);
        let one = signed_echange(NodeId(0), 1, None, vec![], None, &mut reg);
        let echanges = vec![one.clone(), one.clone(), one];
        assert_eq!(
            derive_new_epoch(&echanges, &p),
            Err(EpochError::InsufficientEpochChanges { need: 3, have: 1 })
        );
    }

    #[test]
    fn prepared_batch_is_reproposed_at_its_slot_with_gap_fillers() {
        let p = params(4, 1);
        let mut reg = KeyRegistry::new(SchemeKind::Test, 3);

        // Build a valid prepared certificate for sn 12.
        let batch = Batch { epoch: 0, sn: 12, leader: NodeId(0), requests: vec![] };
        let digest = batch.digest();
        let leader_key = reg.register(ProcessId::Node(NodeId(0)));
        let leader_sig =
            leader_key.sign(&crate::messages::preprepare_signing_bytes(0, 12, &digest));
        let mut prepares = BTreeMap::new();
        for i in 1..3u32 {
            let k = reg.register(ProcessId::Node(NodeId(i)));
            prepares
                .insert(NodeId(i), k.sign(&crate::messages::prepare_signing_bytes(0, 12, &digest)));
        }
        let cert = PreparedCert { epoch: 0, sn: 12, batch, leader_sig, prepares };
        validate_prepared_cert(&cert, &reg, &p).unwrap();

        let echanges = vec![
            signed_echange(NodeId(1), 1, None, vec![cert], Some(NodeId(0)), &mut reg),
            signed_echange(NodeId(2), 1, None, vec![], Some(NodeId(0)), &mut reg),
            signed_echange(NodeId(3), 1, None, vec![], None, &mut reg),
        ];
        let d = derive_new_epoch(&echanges, &p).unwrap();
        assert_eq!(d.horizon, Some(12));
        assert_eq!(d.slots.len(), 13); // 0..=12, twelve fillers plus the cert
        assert!(d.slots[..12].iter().all(|(_, b)| b.is_none()));
        assert_eq!(d.slots[12].1.as_ref().unwrap().sn, 12);
        assert_eq!(d.next_first(), 13);
        assert_eq!(d.suspects, vec![NodeId(0)]);
    }

    #[test]
    fn bracha_delivers_once_with_honest_primary() {
        let p = params(4, 1);
        let mut reg = KeyRegistry::new(SchemeKind::Test, 9);
        let keys: Vec<_> = (0..4).map(|i| reg.register(ProcessId::Node(NodeId(i)))).collect();
        let cfg = genesis_config(&p);
        // Simulate node 3's view of the broadcast for epoch 0 (primary 0).
        let mut rb = RbState::default();
        let me = NodeId(3);

        let send = RbMsg { phase: RbPhase::Send, epoch: 0, config: cfg.clone(), sig: None };
        let actions = rb.on_message(me, &keys[3], NodeId(0), &send, &reg, &p);
        assert!(matches!(&actions[..], [RbAction::Broadcast(ProtocolMessage::Rb(m))]
            if m.phase == RbPhase::Echo));

        // Echoes from everyone (including our own loopback).
        let echo = RbMsg { phase: RbPhase::Echo, epoch: 0, config: cfg.clone(), sig: None };
        let mut readied = false;
        for i in 0..4u32 {
            let actions = rb.on_message(me, &keys[3], NodeId(i), &echo, &reg, &p);
            if actions
                .iter()
                .any(|a| matches!(a, RbAction::Broadcast(ProtocolMessage::Rb(m)) if m.phase == RbPhase::Ready))
            {
                // Echo quorum for n=4, f=1 is 3.
                assert_eq!(i, 2);
                readied = true;
            }
        }
        assert!(readied);

        // Our own ready counted itself; two more deliver.
        let digest = cfg.digest();
        let mut delivered = None;
        for i in 0..2u32 {
            let sig = keys[i as usize].sign(&rb_ready_signing_bytes(0, &digest));
            let ready =
                RbMsg { phase: RbPhase::Ready, epoch: 0, config: cfg.clone(), sig: Some(sig) };
            for a in rb.on_message(me, &keys[3], NodeId(i), &ready, &reg, &p) {
                if let RbAction::Deliver(rec) = a {
                    delivered = Some(rec);
                }
            }
        }
        let record = delivered.expect("delivered after 3 readys");
        assert_eq!(record.config, cfg);
        assert!(validate_config_record(&record, &reg, &p));
        assert!(rb.delivered().is_some());

        // No second delivery.
        let sig = keys[2].sign(&rb_ready_signing_bytes(0, &digest));
        let ready = RbMsg { phase: RbPhase::Ready, epoch: 0, config: cfg, sig: Some(sig) };
        assert!(rb.on_message(me, &keys[3], NodeId(2), &ready, &reg, &p).is_empty());
    }

    #[test]
    fn bracha_equivocating_primary_cannot_split_delivery() {
        let p = params(4, 1);
        let mut reg = KeyRegistry::new(SchemeKind::Test, 9);
        let keys: Vec<_> = (0..4).map(|i| reg.register(ProcessId::Node(NodeId(i)))).collect();
        let cfg_a = genesis_config(&p);
        let mut cfg_b = cfg_a.clone();
        cfg_b.primary_buckets = vec![BucketId(3), BucketId(4)];

        let mut rb = RbState::default();
        let me = NodeId(1);
        // SEND for A echoes; a second conflicting SEND is ignored.
        let send_a = RbMsg { phase: RbPhase::Send, epoch: 0, config: cfg_a, sig: None };
        let send_b = RbMsg { phase: RbPhase::Send, epoch: 0, config: cfg_b, sig: None };
        assert_eq!(rb.on_message(me, &keys[1], NodeId(0), &send_a, &reg, &p).len(), 1);
        assert!(rb.on_message(me, &keys[1], NodeId(0), &send_b, &reg, &p).is_empty());
    }

    #[test]
    fn no_broadcast_no_delivery() {
        let rb = RbState::default();
        assert!(rb.delivered().is_none());
    }
}
