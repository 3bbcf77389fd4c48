//! Client-side protocol: timestamped signed requests inside a sliding
//! window, submission targeted at the likely bucket holder, and
//! retransmission until the request is known committed at f+1 nodes.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::bucketing::{bucket_of, BucketAssignment};
use crate::crypto::SharedRegistry;
use crate::crypto::SigningKey;
use crate::messages::{commit_ack_signing_bytes, CommitAck, ProtocolMessage, Request};
use crate::netsim::trace::NodeNote;
use crate::netsim::{Outbox, TimerKind};
use crate::params::ProtocolParams;
use crate::types::{ClientId, NodeId, ProcessId, SimTime, Timestamp};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClientError {
    #[error("client window exhausted: next timestamp {next} above high watermark {high}")]
    WindowExhausted { next: Timestamp, high: Timestamp },
}

/// A request the client still considers in flight.
#[derive(Debug, Clone)]
pub struct PendingRequest {
    pub request: Request,
    pub created_at: SimTime,
    pub acks: BTreeSet<NodeId>,
}

/// Sliding-window bookkeeping for one client.
#[derive(Debug)]
pub struct ClientState {
    pub id: ClientId,
    /// Low watermark: timestamps must satisfy `low < t <= high`.
    pub low: Timestamp,
    pub high: Timestamp,
    pub next_t: Timestamp,
    pub pending: BTreeMap<Timestamp, PendingRequest>,
}

impl ClientState {
    pub fn new(id: ClientId, window: u64) -> ClientState {
        ClientState { id, low: 0, high: window, next_t: 1, pending: BTreeMap::new() }
    }

    /// Creates and records the next request; fails when the window is full.
    pub fn create_request(
        &mut self,
        payload: Vec<u8>,
        key: &SigningKey,
        now: SimTime,
    ) -> Result<Request, ClientError> {
        if self.next_t > self.high {
            return Err(ClientError::WindowExhausted { next: self.next_t, high: self.high });
        }
        let t = self.next_t;
        self.next_t += 1;
        let request = Request::new(payload, t, key, self.id.clone());
        self.pending.insert(
            t,
            PendingRequest { request: request.clone(), created_at: now, acks: BTreeSet::new() },
        );
        Ok(request)
    }

    /// Records a commit acknowledgment from `node`.
    pub fn on_commit_ack(&mut self, t: Timestamp, node: NodeId) {
        if let Some(p) = self.pending.get_mut(&t) {
            p.acks.insert(node);
        }
    }

    /// Settled once f+1 distinct nodes acknowledged the commit.
    pub fn is_settled(&self, t: Timestamp, f: u32) -> bool {
        self.pending.get(&t).is_none_or(|p| p.acks.len() >= (f + 1) as usize)
    }

    /// Slides the window forward; returns the timestamps implicitly settled
    /// by the advance (they are below a checkpointed low watermark, hence
    /// delivered).
    pub fn advance_window(&mut self, new_low: Timestamp, window: u64) -> Vec<Timestamp> {
        if new_low <= self.low {
            return Vec::new();
        }
        self.low = new_low;
        self.high = new_low + window;
        if self.next_t <= self.low {
            self.next_t = self.low + 1;
        }
        let keep = self.pending.split_off(&(new_low + 1));
        let settled = self.pending.keys().copied().collect();
        self.pending = keep;
        settled
    }
}

/// Submission phase: first try a few likely nodes, then everyone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendPhase {
    Initial,
    Retry,
}

/// Target nodes for a request whose active bucket is estimated to be held by
/// `holder`: the f+1 nodes `holder-1 .. holder+f-1` initially, all nodes on
/// retry.
pub fn destinations(holder: NodeId, phase: SendPhase, n: u32, f: u32) -> BTreeSet<NodeId> {
    match phase {
        SendPhase::Retry => (0..n).map(NodeId).collect(),
        SendPhase::Initial => {
            if f == 0 {
                return [holder].into();
            }
            (0..=f).map(|k| NodeId((holder.0 + n - 1 + k) % n)).collect()
        }
    }
}

/// A correct node's current bucket assignment, exposed read-only to clients
/// for send targeting. A stale view only costs extra sends.
#[derive(Debug, Clone)]
pub struct EpochView {
    pub assignment: BucketAssignment,
    pub num_buckets: u32,
}

impl EpochView {
    pub fn holder_of(&self, t: Timestamp, client: &ClientId) -> NodeId {
        let bucket = bucket_of(t, client, self.num_buckets);
        self.assignment.owner_of(bucket).unwrap_or(NodeId(0))
    }
}

/// Workload shape for one client.
#[derive(Debug, Clone)]
pub struct ClientWorkload {
    /// Total requests this client will broadcast.
    pub requests: u32,
    pub payload_len: usize,
    /// Retransmission period for unsettled requests.
    pub retry_period: SimTime,
    pub seed: u64,
}

/// The simulation actor wrapping [`ClientState`]: creates requests as the
/// window allows, reacts to acks, and retransmits on a timer.
pub struct ClientActor {
    state: ClientState,
    key: SigningKey,
    registry: SharedRegistry,
    params: ProtocolParams,
    workload: ClientWorkload,
    duplicate_to_all: bool,
    remaining: u32,
    settled: u32,
    rng: ChaCha12Rng,
    /// Per-node low watermarks reported in acks; the (f+1)-th largest is
    /// safe to adopt.
    wm_reports: BTreeMap<NodeId, Timestamp>,
}

impl ClientActor {
    pub fn new(
        index: usize,
        params: ProtocolParams,
        key: SigningKey,
        registry: SharedRegistry,
        workload: ClientWorkload,
        duplicate_to_all: bool,
    ) -> ClientActor {
        let id = ClientId::numbered(index);
        let rng = ChaCha12Rng::seed_from_u64(workload.seed ^ (index as u64).wrapping_mul(0x9e37));
        ClientActor {
            state: ClientState::new(id, params.client_window),
            remaining: workload.requests,
            settled: 0,
            key,
            registry,
            params,
            workload,
            duplicate_to_all,
            rng,
        }
    }

    pub fn id(&self) -> &ClientId {
        &self.state.id
    }

    pub fn created(&self) -> u32 {
        self.workload.requests - self.remaining
    }

    pub fn settled(&self) -> u32 {
        self.settled
    }

    /// All requested work created and acknowledged.
    pub fn done(&self) -> bool {
        self.remaining == 0 && self.state.pending.is_empty()
    }

    pub fn on_start(&mut self, now: SimTime, view: &EpochView, out: &mut Outbox) {
        self.pump(now, view, out);
    }

    pub fn on_message(
        &mut self,
        now: SimTime,
        src: ProcessId,
        msg: ProtocolMessage,
        view: &EpochView,
        out: &mut Outbox,
    ) {
        let ProtocolMessage::CommitAck(ack) = msg else { return };
        let ProcessId::Node(node) = src else { return };
        if ack.client != *self.id() {
            return;
        }
        let bytes = commit_ack_signing_bytes(&ack.client, ack.t, ack.sn, ack.wm_low);
        if !self.registry.is_valid(&ProcessId::Node(node), &bytes, &ack.sig) {
            return;
        }

        self.state.on_commit_ack(ack.t, node);
        if self.state.is_settled(ack.t, self.params.f) && self.state.pending.remove(&ack.t).is_some()
        {
            self.settled += 1;
            out.note(NodeNote::RequestSettled { client: self.id().clone(), t: ack.t });
        }

        // Watermark learning: adopt the highest low watermark that f+1
        // distinct nodes vouch for.
        let cur = self.wm_reports.entry(node).or_insert(0);
        *cur = (*cur).max(ack.wm_low);
        let mut reported: Vec<Timestamp> = self.wm_reports.values().copied().collect();
        reported.sort_unstable_by(|a, b| b.cmp(a));
        if let Some(&safe) = reported.get(self.params.f as usize) {
            for t in self.state.advance_window(safe, self.params.client_window) {
                self.settled += 1;
                out.note(NodeNote::RequestSettled { client: self.id().clone(), t });
            }
        }

        self.pump(now, view, out);
    }

    pub fn on_timer(&mut self, now: SimTime, kind: TimerKind, view: &EpochView, out: &mut Outbox) {
        let TimerKind::ClientRetry { t } = kind else { return };
        if let Some(p) = self.state.pending.get(&t) {
            // Still unsettled: blanket the cluster and keep the timer alive.
            let req = p.request.clone();
            self.send_request(&req, SendPhase::Retry, view, out);
            out.set_timer(self.workload.retry_period, TimerKind::ClientRetry { t });
        }
        let _ = now;
    }

    /// Creates requests while the window and budget allow.
    fn pump(&mut self, now: SimTime, view: &EpochView, out: &mut Outbox) {
        while self.remaining > 0 && self.state.next_t <= self.state.high {
            let mut payload = vec![0u8; self.workload.payload_len.max(1)];
            self.rng.fill(payload.as_mut_slice());
            let req = self
                .state
                .create_request(payload, &self.key, now)
                .expect("window checked above");
            self.remaining -= 1;
            out.note(NodeNote::RequestCreated {
                client: self.id().clone(),
                t: req.t,
                digest: req.digest(),
            });
            let phase =
                if self.duplicate_to_all { SendPhase::Retry } else { SendPhase::Initial };
            self.send_request(&req, phase, view, out);
            out.set_timer(self.workload.retry_period, TimerKind::ClientRetry { t: req.t });
        }
    }

    fn send_request(&self, req: &Request, phase: SendPhase, view: &EpochView, out: &mut Outbox) {
        let holder = view.holder_of(req.t, self.id());
        for node in destinations(holder, phase, self.params.n, self.params.f) {
            out.send(node, ProtocolMessage::Request(req.clone()));
        }
    }
}

impl std::fmt::Debug for ClientActor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientActor")
            .field("id", self.id())
            .field("remaining", &self.remaining)
            .field("pending", &self.state.pending.len())
            .finish()
    }
}

/// Builds a signed commit acknowledgment (node side).
pub fn make_commit_ack(
    key: &SigningKey,
    client: ClientId,
    t: Timestamp,
    sn: crate::types::SeqNum,
    wm_low: Timestamp,
) -> CommitAck {
    let sig = key.sign(&commit_ack_signing_bytes(&client, t, sn, wm_low));
    CommitAck { client, t, sn, wm_low, sig }
}
