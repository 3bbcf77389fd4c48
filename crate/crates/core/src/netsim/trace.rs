//! Structured run traces: one JSON object per line, consumed by the property
//! checker and the metrics pass.

use serde::{Deserialize, Serialize};

use crate::crypto::{digest, Digest};
use crate::types::{ClientId, EpochNum, NodeId, SeqNum, SimTime, Timestamp};

/// How a node entered an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochEntryKind {
    Initial,
    Gracious,
    Ungracious,
}

/// Protocol-level happenings reported by a node or client handler; the
/// simulator stamps them with the owner and tick.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeNote {
    PrePrepareSent {
        epoch: EpochNum,
        sn: SeqNum,
        digest: Digest,
        requests: usize,
    },
    Committed {
        epoch: EpochNum,
        sn: SeqNum,
        digest: Digest,
    },
    Delivered {
        epoch: EpochNum,
        sn: SeqNum,
        digest: Digest,
        /// Per-request digests in batch order.
        requests: Vec<Digest>,
        /// Request sequence number assigned to the first request.
        first_req_sn: u64,
        /// Whether the batch arrived through state transfer.
        transferred: bool,
    },
    EpochEntered {
        epoch: EpochNum,
        kind: EpochEntryKind,
        leaders: Vec<NodeId>,
        primary: NodeId,
    },
    CheckpointStable {
        sn: SeqNum,
        state_digest: Digest,
    },
    Resurrected {
        count: usize,
    },
    TransferStarted,
    TransferCompleted {
        checkpoint: SeqNum,
    },
    RequestCreated {
        client: ClientId,
        t: Timestamp,
        digest: Digest,
    },
    RequestSettled {
        client: ClientId,
        t: Timestamp,
    },
}

/// One line of the run trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceEvent {
    Meta {
        n: u32,
        f: u32,
        seed: u64,
        gst: SimTime,
        clients: usize,
        /// Nodes running a non-correct script, with the script name.
        byzantine_nodes: Vec<(NodeId, String)>,
        /// Clients running a non-correct script.
        byzantine_clients: Vec<ClientId>,
        dedup_enabled: bool,
        scenario: String,
    },
    RequestCreated {
        tick: SimTime,
        client: ClientId,
        t: Timestamp,
        digest: Digest,
    },
    RequestSettled {
        tick: SimTime,
        client: ClientId,
        t: Timestamp,
    },
    Send {
        tick: SimTime,
        src: String,
        dst: String,
        kind: String,
    },
    Receive {
        tick: SimTime,
        src: String,
        dst: String,
        kind: String,
        sent_at: SimTime,
    },
    PrePrepareSent {
        tick: SimTime,
        node: NodeId,
        epoch: EpochNum,
        sn: SeqNum,
        digest: Digest,
        requests: usize,
    },
    Committed {
        tick: SimTime,
        node: NodeId,
        epoch: EpochNum,
        sn: SeqNum,
        digest: Digest,
    },
    Delivered {
        tick: SimTime,
        node: NodeId,
        epoch: EpochNum,
        sn: SeqNum,
        digest: Digest,
        requests: Vec<Digest>,
        first_req_sn: u64,
        transferred: bool,
    },
    EpochEntered {
        tick: SimTime,
        node: NodeId,
        epoch: EpochNum,
        kind: EpochEntryKind,
        leaders: Vec<NodeId>,
        primary: NodeId,
    },
    CheckpointStable {
        tick: SimTime,
        node: NodeId,
        sn: SeqNum,
        state_digest: Digest,
    },
    Resurrected {
        tick: SimTime,
        node: NodeId,
        count: usize,
    },
    TransferStarted {
        tick: SimTime,
        node: NodeId,
    },
    TransferCompleted {
        tick: SimTime,
        node: NodeId,
        checkpoint: SeqNum,
    },
    Crashed {
        tick: SimTime,
        node: NodeId,
    },
    Recovered {
        tick: SimTime,
        node: NodeId,
    },
    GstReached {
        tick: SimTime,
    },
    RunEnd {
        tick: SimTime,
        quiescent: bool,
        events: u64,
        /// Peak live common-case instances per node over the whole run.
        max_instances: Vec<(NodeId, usize)>,
    },
}

impl TraceEvent {
    pub fn tick(&self) -> SimTime {
        match self {
            TraceEvent::Meta { .. } => 0,
            TraceEvent::RequestCreated { tick, .. }
            | TraceEvent::RequestSettled { tick, .. }
            | TraceEvent::Send { tick, .. }
            | TraceEvent::Receive { tick, .. }
            | TraceEvent::PrePrepareSent { tick, .. }
            | TraceEvent::Committed { tick, .. }
            | TraceEvent::Delivered { tick, .. }
            | TraceEvent::EpochEntered { tick, .. }
            | TraceEvent::CheckpointStable { tick, .. }
            | TraceEvent::Resurrected { tick, .. }
            | TraceEvent::TransferStarted { tick, .. }
            | TraceEvent::TransferCompleted { tick, .. }
            | TraceEvent::Crashed { tick, .. }
            | TraceEvent::Recovered { tick, .. }
            | TraceEvent::GstReached { tick }
            | TraceEvent::RunEnd { tick, .. } => *tick,
        }
    }
}

/// Serializes a trace as JSON lines.
pub fn to_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
        out.push('\n');
    }
    out
}

/// Parses a JSON-lines trace.
pub fn from_jsonl(text: &str) -> Result<Vec<TraceEvent>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// Digest of the serialized trace; the determinism oracle.
pub fn trace_digest(events: &[TraceEvent]) -> Digest {
    digest(to_jsonl(events).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let events = vec![
            TraceEvent::GstReached { tick: 42 },
            TraceEvent::Crashed { tick: 50, node: NodeId(2) },
        ];
        let text = to_jsonl(&events);
        assert_eq!(from_jsonl(&text).unwrap(), events);
        assert_eq!(trace_digest(&events), trace_digest(&events));
    }
}
