//! Wire messages and relayable certificates.
//!
//! Channel authentication covers point-to-point sends; anything that gets
//! relayed inside another message (prepare certificates, checkpoint
//! certificates, reliable-broadcast ready certificates) carries explicit
//! signatures so the evidence survives forwarding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointCert;
use crate::crypto::{digest_parts, Digest, Signature, SigningKey};
use crate::epoch::EpochConfig;
use crate::types::{ClientId, EpochNum, NodeId, SeqNum, Timestamp};

/// A client-signed request: the unit of ordering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    #[serde(with = "hex_vec")]
    pub payload: Vec<u8>,
    /// Client timestamp: per-client monotone counter.
    pub t: Timestamp,
    pub client: ClientId,
    pub sig: Signature,
}

mod hex_vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(&s).map_err(serde::de::Error::custom)
    }
}

impl Request {
    pub fn signing_bytes(payload: &[u8], t: Timestamp, client: &ClientId) -> Vec<u8> {
        let mut out = Vec::with_capacity(payload.len() + 16 + client.0.len());
        out.extend_from_slice(b"req");
        out.extend_from_slice(&t.to_be_bytes());
        out.extend_from_slice(client.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    pub fn new(payload: Vec<u8>, t: Timestamp, key: &SigningKey, client: ClientId) -> Request {
        let sig = key.sign(&Self::signing_bytes(&payload, t, &client));
        Request { payload, t, client, sig }
    }

    /// Identity of the request everywhere (dedup index, batch digests,
    /// traces): `H(payload || t || c)`.
    pub fn digest(&self) -> Digest {
        digest_parts(&[&self.payload, &self.t.to_be_bytes(), self.client.as_bytes()])
    }
}

/// An ordered list of requests bound to a batch sequence number, formed by a
/// leader. May be empty: leaders cut empty batches on timeout to keep
/// checkpoints and epoch-change timers moving under low load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    /// Epoch the batch was originally proposed in.
    pub epoch: EpochNum,
    pub sn: SeqNum,
    pub leader: NodeId,
    pub requests: Vec<Request>,
}

impl Batch {
    /// Content digest. Deliberately excludes the epoch so that a batch
    /// re-proposed under the same sequence number after an epoch change keeps
    /// its identity across correct nodes.
    pub fn digest(&self) -> Digest {
        let sn_be = self.sn.to_be_bytes();
        let req_digests: Vec<Digest> = self.requests.iter().map(Request::digest).collect();
        let mut parts: Vec<&[u8]> = Vec::with_capacity(req_digests.len() + 2);
        parts.push(b"batch");
        parts.push(&sn_be);
        for d in &req_digests {
            parts.push(&d.0);
        }
        digest_parts(&parts)
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }
}

pub fn preprepare_signing_bytes(epoch: EpochNum, sn: SeqNum, digest: &Digest) -> Vec<u8> {
    tagged_signing_bytes(b"pp", epoch, sn, digest)
}

pub fn prepare_signing_bytes(epoch: EpochNum, sn: SeqNum, digest: &Digest) -> Vec<u8> {
    tagged_signing_bytes(b"prepare", epoch, sn, digest)
}

pub fn commit_signing_bytes(epoch: EpochNum, sn: SeqNum, digest: &Digest) -> Vec<u8> {
    tagged_signing_bytes(b"commit", epoch, sn, digest)
}

fn tagged_signing_bytes(tag: &[u8], epoch: EpochNum, sn: SeqNum, digest: &Digest) -> Vec<u8> {
    let mut out = Vec::with_capacity(tag.len() + 48);
    out.extend_from_slice(tag);
    out.extend_from_slice(&epoch.to_be_bytes());
    out.extend_from_slice(&sn.to_be_bytes());
    out.extend_from_slice(&digest.0);
    out
}

/// Leader proposal for one (epoch, sequence number) slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrePrepare {
    pub batch: Batch,
    /// Leader signature over (epoch, sn, batch digest).
    pub sig: Signature,
}

impl PrePrepare {
    pub fn epoch(&self) -> EpochNum {
        self.batch.epoch
    }

    pub fn sn(&self) -> SeqNum {
        self.batch.sn
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prepare {
    pub epoch: EpochNum,
    pub sn: SeqNum,
    pub digest: Digest,
    pub sig: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Commit {
    pub epoch: EpochNum,
    pub sn: SeqNum,
    pub digest: Digest,
    pub sig: Signature,
}

/// Signed checkpoint vote: digest over the batches delivered since the
/// previous checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMsg {
    pub sn: SeqNum,
    pub state_digest: Digest,
    pub sig: Signature,
}

pub fn checkpoint_signing_bytes(sn: SeqNum, state_digest: &Digest) -> Vec<u8> {
    let mut out = Vec::with_capacity(50);
    out.extend_from_slice(b"checkpoint");
    out.extend_from_slice(&sn.to_be_bytes());
    out.extend_from_slice(&state_digest.0);
    out
}

/// Evidence that a batch reached the prepared state: the leader's proposal
/// signature plus a quorum of prepare signatures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedCert {
    pub epoch: EpochNum,
    pub sn: SeqNum,
    pub batch: Batch,
    pub leader_sig: Signature,
    pub prepares: BTreeMap<NodeId, Signature>,
}

impl PreparedCert {
    pub fn digest(&self) -> Digest {
        self.batch.digest()
    }

    /// Stable identity of the certificate contents, folded into the
    /// epoch-change signature.
    pub fn content_digest(&self) -> Digest {
        let d = self.batch.digest();
        let mut parts: Vec<Vec<u8>> = vec![
            b"prepared".to_vec(),
            self.epoch.to_be_bytes().to_vec(),
            self.sn.to_be_bytes().to_vec(),
            d.0.to_vec(),
        ];
        for (node, sig) in &self.prepares {
            parts.push(node.0.to_be_bytes().to_vec());
            parts.push(sig.bytes.clone());
        }
        let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
        digest_parts(&refs)
    }
}

/// PBFT view-change analog, signed, with no acknowledgment round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochChangeMsg {
    /// Epoch the sender wants to move to.
    pub target: EpochNum,
    /// Latest stable checkpoint certificate, if any.
    pub checkpoint: Option<CheckpointCert>,
    /// Prepared batches above the checkpoint.
    pub prepared: Vec<PreparedCert>,
    /// Leader the sender blames for the stall, if any; the new primary
    /// prefers removing blamed nodes from the leader set.
    pub suspect: Option<NodeId>,
    pub sig: Signature,
}

impl EpochChangeMsg {
    pub fn signing_bytes(
        target: EpochNum,
        checkpoint: &Option<CheckpointCert>,
        prepared: &[PreparedCert],
        suspect: &Option<NodeId>,
    ) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"epoch-change");
        out.extend_from_slice(&target.to_be_bytes());
        if let Some(c) = checkpoint {
            out.extend_from_slice(&c.content_digest().0);
        }
        for cert in prepared {
            out.extend_from_slice(&cert.content_digest().0);
        }
        if let Some(s) = suspect {
            out.extend_from_slice(&s.0.to_be_bytes());
        }
        out
    }
}

/// An epoch-change message together with its sender, as embedded in
/// NEW-EPOCH.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedEpochChange {
    pub sender: NodeId,
    pub msg: EpochChangeMsg,
}

/// PBFT new-view analog: proves 2f+1 nodes demanded the epoch change and
/// re-proposes every batch that may have committed, filling gaps with empty
/// batches.
///
/// Each re-proposal is a full [`PrePrepare`] whose signature binds the *new*
/// epoch, so accepted re-proposals can serve as prepared-certificate leaders
/// in yet another epoch change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewEpochMsg {
    pub epoch: EpochNum,
    pub echanges: Vec<SignedEpochChange>,
    /// Re-proposals in ascending sequence-number order, signed by the new
    /// primary over (new epoch, sn, batch digest).
    pub reproposals: Vec<PrePrepare>,
    pub sig: Signature,
}

impl NewEpochMsg {
    pub fn signing_bytes(
        epoch: EpochNum,
        echanges: &[SignedEpochChange],
        reproposals: &[PrePrepare],
    ) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"new-epoch");
        out.extend_from_slice(&epoch.to_be_bytes());
        for ec in echanges {
            out.extend_from_slice(&ec.sender.0.to_be_bytes());
            out.extend_from_slice(&ec.msg.sig.bytes);
        }
        for pp in reproposals {
            out.extend_from_slice(&pp.batch.sn.to_be_bytes());
            out.extend_from_slice(&pp.batch.digest().0);
        }
        out
    }
}

/// Reliable-broadcast round for an epoch configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RbPhase {
    Send,
    Echo,
    Ready,
}

/// One message of Bracha's three-phase reliable broadcast, carrying the
/// epoch configuration being agreed on. READY messages are signed so that
/// 2f+1 of them form a relayable delivery certificate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RbMsg {
    pub phase: RbPhase,
    pub epoch: EpochNum,
    pub config: EpochConfig,
    pub sig: Option<Signature>,
}

pub fn rb_ready_signing_bytes(epoch: EpochNum, config_digest: &Digest) -> Vec<u8> {
    let mut out = Vec::with_capacity(48);
    out.extend_from_slice(b"rb-ready");
    out.extend_from_slice(&epoch.to_be_bytes());
    out.extend_from_slice(&config_digest.0);
    out
}

/// State-transfer solicitation: the sender's latest NEW-EPOCH, stable
/// checkpoint, and last delivered batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelloMsg {
    pub epoch: EpochNum,
    pub new_epoch: Option<Box<NewEpochMsg>>,
    pub checkpoint: Option<CheckpointCert>,
    pub last_delivered: Option<SeqNum>,
}

/// Reply to a HELLO: the responder's own HELLO plus whatever state the
/// requester was missing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelloReply {
    pub hello: HelloMsg,
    /// Epoch configurations the requester lacks, with their reliable-
    /// broadcast ready certificates.
    pub configs: Vec<ConfigRecord>,
    /// Delivered batches above the requester's reported frontier.
    pub batches: Vec<Batch>,
    /// Digests of the same range, so replies from other nodes can confirm a
    /// payload without resending it.
    pub batch_digests: Vec<(SeqNum, Digest)>,
}

/// An epoch configuration plus the 2f+1 signed READY messages that delivered
/// it. Verifiable offline by any node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigRecord {
    pub config: EpochConfig,
    pub ready_cert: BTreeMap<NodeId, Signature>,
}

/// Signed notification from node to client that a request was delivered.
/// Carries the node's per-client low watermark as of its last stable
/// checkpoint so clients can advance their sending window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitAck {
    pub client: ClientId,
    pub t: Timestamp,
    /// Batch sequence number the request was delivered in.
    pub sn: SeqNum,
    /// Low client watermark at the acking node.
    pub wm_low: Timestamp,
    pub sig: Signature,
}

pub fn commit_ack_signing_bytes(
    client: &ClientId,
    t: Timestamp,
    sn: SeqNum,
    wm_low: Timestamp,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"ack");
    out.extend_from_slice(client.as_bytes());
    out.extend_from_slice(&t.to_be_bytes());
    out.extend_from_slice(&sn.to_be_bytes());
    out.extend_from_slice(&wm_low.to_be_bytes());
    out
}

/// Every message that can cross the simulated network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ProtocolMessage {
    Request(Request),
    PrePrepare(PrePrepare),
    Prepare(Prepare),
    Commit(Commit),
    Checkpoint(CheckpointMsg),
    EpochChange(EpochChangeMsg),
    NewEpoch(NewEpochMsg),
    Rb(RbMsg),
    Hello(HelloMsg),
    HelloReply(Box<HelloReply>),
    CommitAck(CommitAck),
}

impl ProtocolMessage {
    /// Short label for traces and debugging.
    pub fn kind(&self) -> &'static str {
        match self {
            ProtocolMessage::Request(_) => "REQUEST",
            ProtocolMessage::PrePrepare(_) => "PRE-PREPARE",
            ProtocolMessage::Prepare(_) => "PREPARE",
            ProtocolMessage::Commit(_) => "COMMIT",
            ProtocolMessage::Checkpoint(_) => "CHECKPOINT",
            ProtocolMessage::EpochChange(_) => "EPOCH-CHANGE",
            ProtocolMessage::NewEpoch(_) => "NEW-EPOCH",
            ProtocolMessage::Rb(m) => match m.phase {
                RbPhase::Send => "RB-SEND",
                RbPhase::Echo => "RB-ECHO",
                RbPhase::Ready => "RB-READY",
            },
            ProtocolMessage::Hello(_) => "HELLO",
            ProtocolMessage::HelloReply(_) => "HELLO-REPLY",
            ProtocolMessage::CommitAck(_) => "COMMIT-ACK",
        }
    }

    /// Epoch number advertised by common-case and epoch-change traffic; used
    /// by the lag detector.
    pub fn epoch_hint(&self) -> Option<EpochNum> {
        match self {
            ProtocolMessage::PrePrepare(pp) => Some(pp.epoch()),
            ProtocolMessage::Prepare(p) => Some(p.epoch),
            ProtocolMessage::Commit(c) => Some(c.epoch),
            ProtocolMessage::NewEpoch(ne) => Some(ne.epoch),
            ProtocolMessage::Rb(rb) => Some(rb.epoch),
            ProtocolMessage::EpochChange(ec) => Some(ec.target),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{KeyRegistry, SchemeKind};
    use crate::types::ProcessId;

    #[test]
    fn request_digest_binds_payload_timestamp_and_client() {
        let mut reg = KeyRegistry::new(SchemeKind::Test, 1);
        let c = ClientId::new("client-0");
        let key = reg.register(ProcessId::Client(c.clone()));
        let r1 = Request::new(b"pay".to_vec(), 1, &key, c.clone());
        let r2 = Request::new(b"pay".to_vec(), 2, &key, c.clone());
        let r3 = Request::new(b"other".to_vec(), 1, &key, c.clone());
        assert_ne!(r1.digest(), r2.digest());
        assert_ne!(r1.digest(), r3.digest());
        assert_eq!(r1.digest(), Request::new(b"pay".to_vec(), 1, &key, c.clone()).digest());
    }

    #[test]
    fn batch_digest_ignores_epoch_but_not_order() {
        let mut reg = KeyRegistry::new(SchemeKind::Test, 1);
        let c = ClientId::new("client-0");
        let key = reg.register(ProcessId::Client(c.clone()));
        let a = Request::new(b"a".to_vec(), 1, &key, c.clone());
        let b = Request::new(b"b".to_vec(), 2, &key, c.clone());

        let batch =
            |epoch, reqs: Vec<Request>| Batch { epoch, sn: 9, leader: NodeId(1), requests: reqs };
        assert_eq!(
            batch(0, vec![a.clone(), b.clone()]).digest(),
            batch(5, vec![a.clone(), b.clone()]).digest(),
        );
        assert_ne!(batch(0, vec![a.clone(), b.clone()]).digest(), batch(0, vec![b, a]).digest());
    }

    #[test]
    fn protocol_message_round_trips_through_json() {
        let msg = ProtocolMessage::Prepare(Prepare {
            epoch: 3,
            sn: 17,
            digest: crate::crypto::digest(b"x"),
            sig: Signature { scheme: SchemeKind::Test, bytes: vec![1, 2, 3] },
        });
        let text = serde_json::to_string(&msg).unwrap();
        let back: ProtocolMessage = serde_json::from_str(&text).unwrap();
        assert_eq!(msg, back);
    }
}
