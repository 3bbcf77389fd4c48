//! The per-node protocol engine: request admission, batch cutting,
//! three-phase agreement, sequential delivery, checkpointing, epoch
//! transitions, and state-transfer glue.
//!
//! Handlers behave as atomic event reactions driven by the simulator. In a
//! parallel deployment, instances for distinct sequence numbers may progress
//! concurrently; the dedup index and bucket queues need per-bucket mutual
//! exclusion, and delivery, checkpointing, and epoch transitions serialize
//! through one manager context. The simulator runs everything on one thread,
//! which trivially satisfies that contract.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::bucketing::{self, bucket_of, BucketAssignment, BucketId};
use crate::checkpoint::{
    advance_client_watermark, checkpoint_range, state_digest, CheckpointCert, CheckpointTracker,
};
use crate::client::make_commit_ack;
use crate::crypto::{Digest, SharedRegistry, Signature, SigningKey};
use crate::epoch::{
    self, genesis_config, leader_of, primary_of, validate_config_record, validate_epoch_change,
    validate_new_epoch, DerivedNewEpoch, EpochConfig, RbAction, RbState,
};
use crate::messages::{
    checkpoint_signing_bytes, commit_signing_bytes, prepare_signing_bytes,
    preprepare_signing_bytes, Batch, CheckpointMsg, Commit, ConfigRecord, EpochChangeMsg,
    HelloMsg, HelloReply, NewEpochMsg, PrePrepare, Prepare, ProtocolMessage, Request,
    SignedEpochChange,
};
use crate::netsim::trace::{EpochEntryKind, NodeNote};
use crate::netsim::{Outbox, TimerKind};
use crate::params::ProtocolParams;
use crate::state_transfer::{LagDetector, TransferState};
use crate::svs;
use crate::types::{ClientId, EpochNum, NodeId, ProcessId, SeqNum, SimTime, Timestamp};

/// Run-wide switches plus per-node Byzantine knobs, set by the harness.
#[derive(Debug, Clone)]
pub struct NodeKnobs {
    /// When false, duplication prevention is off: leaders batch from every
    /// bucket and the preprepared-set / bucket-ownership checks are skipped.
    /// Models the simplistic parallel-leader protocols for comparison runs.
    pub dedup_enabled: bool,
    pub svs_enabled: bool,
    /// Censoring leader: silently drops this fraction of its proposable
    /// requests from the given tick on.
    pub censor: Option<(f64, SimTime)>,
    /// Straggler: proposes only empty batches from the given tick on.
    pub always_empty_from: Option<SimTime>,
    pub rng_seed: u64,
}

impl Default for NodeKnobs {
    fn default() -> Self {
        NodeKnobs {
            dedup_enabled: true,
            svs_enabled: true,
            censor: None,
            always_empty_from: None,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    /// Normal operation in the current epoch.
    CommonCase,
    /// Timed out; waiting for a NEW-EPOCH for `target` (or higher).
    AwaitingNewEpoch { target: EpochNum },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Participation {
    Active,
    /// Tracking but not voting; activates at the first stable checkpoint
    /// past `activate_after` once fully delivered.
    Passive { activate_after: Option<SeqNum> },
}

#[derive(Debug, Clone)]
struct PrePrepareRecord {
    batch: Batch,
    digest: Digest,
    leader_sig: Signature,
}

/// Agreement state for one (epoch, sequence number) slot.
#[derive(Debug, Default)]
struct Instance {
    leader: Option<NodeId>,
    preprepare: Option<PrePrepareRecord>,
    /// Distinct PREPARE votes (digest, signature) per sender.
    prepares: BTreeMap<NodeId, (Digest, Signature)>,
    /// Distinct COMMIT votes per sender.
    commits: BTreeMap<NodeId, Digest>,
    prepare_sent: bool,
    commit_sent: bool,
    prepared: bool,
    committed: bool,
}

impl Instance {
    fn prepare_voters(&self, digest: &Digest) -> BTreeSet<NodeId> {
        let mut voters: BTreeSet<NodeId> = self
            .prepares
            .iter()
            .filter(|(_, (d, _))| d == digest)
            .map(|(n, _)| *n)
            .collect();
        if let (Some(leader), Some(pp)) = (self.leader, &self.preprepare) {
            if pp.digest == *digest {
                voters.insert(leader);
            }
        }
        voters
    }

    fn commit_count(&self, digest: &Digest) -> usize {
        self.commits.values().filter(|d| *d == digest).count()
    }
}

#[derive(Debug, Clone)]
struct QueuedReq {
    req: Request,
    arrival: SimTime,
    verified: bool,
}

#[derive(Debug, Clone)]
struct PrepInfo {
    client: ClientId,
    t: Timestamp,
    arrival: SimTime,
}

/// Duplication-prevention state: per-bucket FIFO queues of pending requests
/// plus the set of preprepared request digests. A request lives in at most
/// one of the two at a time.
#[derive(Debug)]
struct DedupIndex {
    queues: Vec<VecDeque<QueuedReq>>,
    pending: HashMap<(ClientId, Timestamp), BucketId>,
    preprepared: HashMap<Digest, PrepInfo>,
}

impl DedupIndex {
    fn new(num_buckets: u32) -> DedupIndex {
        DedupIndex {
            queues: (0..num_buckets).map(|_| VecDeque::new()).collect(),
            pending: HashMap::new(),
            preprepared: HashMap::new(),
        }
    }

    fn is_pending(&self, client: &ClientId, t: Timestamp) -> bool {
        self.pending.contains_key(&(client.clone(), t))
    }

    fn is_preprepared(&self, digest: &Digest) -> bool {
        self.preprepared.contains_key(digest)
    }

    fn enqueue(&mut self, req: Request, bucket: BucketId, arrival: SimTime, verified: bool) {
        self.pending.insert((req.client.clone(), req.t), bucket);
        self.queues[bucket.0 as usize].push_back(QueuedReq { req, arrival, verified });
    }

    fn remove_pending(&mut self, client: &ClientId, t: Timestamp) {
        // Queue entries are dropped lazily on the next scan.
        self.pending.remove(&(client.clone(), t));
    }

    fn mark_preprepared(&mut self, req: &Request, arrival: SimTime) {
        self.remove_pending(&req.client, req.t);
        self.preprepared.insert(
            req.digest(),
            PrepInfo { client: req.client.clone(), t: req.t, arrival },
        );
    }

    /// Returns a preprepared request to its bucket queue (epoch-change
    /// resurrection).
    fn resurrect(&mut self, req: &Request, num_buckets: u32) -> bool {
        let Some(info) = self.preprepared.remove(&req.digest()) else { return false };
        if self.is_pending(&req.client, req.t) {
            return false;
        }
        let bucket = bucket_of(req.t, &req.client, num_buckets);
        self.enqueue(req.clone(), bucket, info.arrival, false);
        true
    }

    /// Live (still pending) requests among `buckets`, oldest first, with
    /// arrival ticks. Lazily drops dead queue entries along the way.
    fn collect_available(&mut self, buckets: &[BucketId]) -> Vec<(Request, SimTime, bool)> {
        let mut out = Vec::new();
        for b in buckets {
            let queue = &mut self.queues[b.0 as usize];
            queue.retain(|q| self.pending.contains_key(&(q.req.client.clone(), q.req.t)));
            out.extend(queue.iter().map(|q| (q.req.clone(), q.arrival, q.verified)));
        }
        out.sort_by(|a, b| (a.1, &a.0.client, a.0.t).cmp(&(b.1, &b.0.client, b.0.t)));
        out
    }

    /// The bucket holding the oldest pending request, if any.
    fn oldest_bucket(&mut self, num_buckets: u32) -> Option<BucketId> {
        let all: Vec<BucketId> = (0..num_buckets).map(BucketId).collect();
        self.collect_available(&all)
            .first()
            .map(|(req, _, _)| bucket_of(req.t, &req.client, num_buckets))
    }

    /// Drops state below a client's advanced low watermark.
    fn prune_below(&mut self, client: &ClientId, low: Timestamp) {
        self.preprepared.retain(|_, info| info.client != *client || info.t > low);
        self.pending.retain(|(c, t), _| c != client || *t > low);
    }
}

/// One replica.
pub struct Node {
    id: NodeId,
    params: ProtocolParams,
    key: SigningKey,
    registry: SharedRegistry,
    knobs: NodeKnobs,
    rng: ChaCha12Rng,

    // Epoch state.
    epoch: EpochNum,
    config: EpochConfig,
    assignment_base: BucketAssignment,
    rot_cache: Option<(u64, BucketAssignment)>,
    phase: Phase,
    participation: Participation,
    configs: BTreeMap<EpochNum, ConfigRecord>,
    rb: BTreeMap<EpochNum, RbState>,
    rb_initiated: BTreeSet<EpochNum>,

    // Epoch-change bookkeeping.
    ec_timer_gen: u64,
    ec_fires_since_delivery: u32,
    echanges_in: BTreeMap<EpochNum, BTreeMap<NodeId, EpochChangeMsg>>,
    new_epoch_sent: BTreeSet<EpochNum>,
    pending_new_epoch: Option<(NewEpochMsg, DerivedNewEpoch)>,
    latest_new_epoch: Option<NewEpochMsg>,

    // Common case.
    instances: BTreeMap<(EpochNum, SeqNum), Instance>,
    next_proposal_sn: Option<SeqNum>,
    batch_timer_gen: u64,

    // Requests.
    dedup: DedupIndex,
    client_wm: BTreeMap<ClientId, (Timestamp, Timestamp)>,

    // Delivery.
    delivered_log: BTreeMap<SeqNum, Batch>,
    next_deliver: SeqNum,
    committed: BTreeMap<SeqNum, Batch>,
    delivery_ts_buffer: VecDeque<(SeqNum, ClientId, Timestamp)>,
    delivered_ts: BTreeMap<ClientId, BTreeSet<Timestamp>>,
    req_sn_counter: u64,

    // Checkpoints.
    checkpoints: CheckpointTracker,

    // Out-of-order buffer for messages that are merely early.
    stash: VecDeque<(NodeId, ProtocolMessage)>,
    progress: bool,

    // State transfer.
    lag: LagDetector,
    lag_timer_gen: u64,
    transfer: Option<TransferState>,

    // Instrumentation.
    max_instances: usize,
}

const STASH_CAP: usize = 8192;

impl Node {
    pub fn new(
        id: NodeId,
        params: ProtocolParams,
        key: SigningKey,
        registry: SharedRegistry,
        knobs: NodeKnobs,
    ) -> Node {
        let config = genesis_config(&params);
        let assignment_base =
            bucketing::assign_buckets(&config, &params).expect("genesis leaders are non-empty");
        let num_buckets = params.num_buckets();
        let rng = ChaCha12Rng::seed_from_u64(knobs.rng_seed ^ (0xab00 + id.0 as u64));
        let mut configs = BTreeMap::new();
        configs.insert(0, ConfigRecord { config: config.clone(), ready_cert: BTreeMap::new() });
        Node {
            id,
            key,
            registry,
            knobs,
            rng,
            epoch: 0,
            next_proposal_sn: config
                .leaders
                .iter()
                .position(|l| *l == id)
                .map(|k| config.first + k as u64),
            config,
            assignment_base,
            rot_cache: None,
            phase: Phase::CommonCase,
            participation: Participation::Active,
            configs,
            rb: BTreeMap::new(),
            rb_initiated: BTreeSet::new(),
            ec_timer_gen: 0,
            ec_fires_since_delivery: 0,
            echanges_in: BTreeMap::new(),
            new_epoch_sent: BTreeSet::new(),
            pending_new_epoch: None,
            latest_new_epoch: None,
            instances: BTreeMap::new(),
            batch_timer_gen: 0,
            dedup: DedupIndex::new(num_buckets),
            client_wm: BTreeMap::new(),
            delivered_log: BTreeMap::new(),
            next_deliver: 0,
            committed: BTreeMap::new(),
            delivery_ts_buffer: VecDeque::new(),
            delivered_ts: BTreeMap::new(),
            req_sn_counter: 0,
            checkpoints: CheckpointTracker::default(),
            stash: VecDeque::new(),
            progress: false,
            lag: LagDetector::default(),
            lag_timer_gen: 0,
            transfer: None,
            max_instances: 0,
            params,
        }
    }

    // ------------------------------------------------------------------
    // Accessors used by the simulator and the harness.
    // ------------------------------------------------------------------

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn key(&self) -> &SigningKey {
        &self.key
    }

    pub fn knobs(&self) -> &NodeKnobs {
        &self.knobs
    }

    pub fn current_epoch(&self) -> EpochNum {
        self.epoch
    }

    pub fn config(&self) -> &EpochConfig {
        &self.config
    }

    pub fn last_delivered(&self) -> Option<SeqNum> {
        self.next_deliver.checked_sub(1)
    }

    pub fn delivered_count(&self) -> u64 {
        self.next_deliver
    }

    pub fn is_passive(&self) -> bool {
        matches!(self.participation, Participation::Passive { .. })
    }

    pub fn max_instances(&self) -> usize {
        self.max_instances
    }

    pub fn stable_checkpoint_sn(&self) -> Option<SeqNum> {
        self.checkpoints.stable_sn()
    }

    /// Assignment snapshot for client targeting.
    pub fn view_assignment(&mut self) -> &BucketAssignment {
        let sn = self.next_deliver.max(self.config.first);
        self.assignment_for_sn(sn);
        match &self.rot_cache {
            Some((_, a)) => a,
            None => &self.assignment_base,
        }
    }

    // ------------------------------------------------------------------
    // Boot.
    // ------------------------------------------------------------------

    pub fn boot(&mut self, _now: SimTime, out: &mut Outbox) {
        out.note(NodeNote::EpochEntered {
            epoch: 0,
            kind: EpochEntryKind::Initial,
            leaders: self.config.leaders.clone(),
            primary: self.config.primary(),
        });
        self.arm_batch_timer(out);
        self.arm_ec_timer(out);
    }

    /// Post-crash boot: empty state, passive until state transfer completes
    /// and the next stable checkpoint passes.
    pub fn boot_recovered(&mut self, _now: SimTime, _out: &mut Outbox) {
        self.participation = Participation::Passive { activate_after: None };
    }

    // ------------------------------------------------------------------
    // Entry points.
    // ------------------------------------------------------------------

    pub fn on_message(&mut self, now: SimTime, src: ProcessId, msg: ProtocolMessage, out: &mut Outbox) {
        match src {
            ProcessId::Node(node) => {
                if let Some(hint) = msg.epoch_hint() {
                    self.observe_epoch_hint(node, hint, out);
                }
                self.handle_node_message(now, node, msg, out);
            }
            ProcessId::Client(_) => {
                if let ProtocolMessage::Request(req) = msg {
                    self.on_request(now, req, out);
                }
            }
        }
        self.drain_stash(now, out);
        self.max_instances = self.max_instances.max(self.instances.len());
    }

    pub fn on_timer(&mut self, now: SimTime, kind: TimerKind, out: &mut Outbox) {
        match kind {
            TimerKind::BatchCut { gen } => {
                if gen == self.batch_timer_gen {
                    self.try_propose(now, true, out);
                }
            }
            TimerKind::EpochChange { gen } => {
                if gen == self.ec_timer_gen {
                    self.on_ec_timeout(now, out);
                }
            }
            TimerKind::LagCheck { gen } => {
                if gen == self.lag_timer_gen {
                    self.on_lag_check(now, out);
                }
            }
            TimerKind::ClientRetry { .. } => {}
        }
        self.drain_stash(now, out);
        self.max_instances = self.max_instances.max(self.instances.len());
    }

    fn handle_node_message(
        &mut self,
        now: SimTime,
        src: NodeId,
        msg: ProtocolMessage,
        out: &mut Outbox,
    ) {
        match msg {
            ProtocolMessage::Request(req) => self.on_request(now, req, out),
            ProtocolMessage::PrePrepare(pp) => self.on_preprepare(now, src, pp, out),
            ProtocolMessage::Prepare(p) => self.on_prepare(now, src, p, out),
            ProtocolMessage::Commit(c) => self.on_commit(now, src, c, out),
            ProtocolMessage::Checkpoint(c) => self.on_checkpoint_msg(now, src, c, out),
            ProtocolMessage::EpochChange(ec) => self.on_epoch_change(now, src, ec, out),
            ProtocolMessage::NewEpoch(ne) => self.on_new_epoch(now, src, ne, out),
            ProtocolMessage::Rb(rb) => self.on_rb(now, src, rb, out),
            ProtocolMessage::Hello(h) => self.on_hello(now, src, h, out),
            ProtocolMessage::HelloReply(r) => self.on_hello_reply(now, src, *r, out),
            ProtocolMessage::CommitAck(_) => {}
        }
    }

    fn stash_msg(&mut self, src: NodeId, msg: ProtocolMessage) {
        if self.stash.len() >= STASH_CAP {
            self.stash.pop_front();
        }
        self.stash.push_back((src, msg));
    }

    fn drain_stash(&mut self, now: SimTime, out: &mut Outbox) {
        while self.progress {
            self.progress = false;
            let stash = std::mem::take(&mut self.stash);
            for (src, msg) in stash {
                self.handle_node_message(now, src, msg, out);
            }
        }
    }

    // ------------------------------------------------------------------
    // Requests.
    // ------------------------------------------------------------------

    fn wm_of(&self, client: &ClientId) -> (Timestamp, Timestamp) {
        self.client_wm
            .get(client)
            .copied()
            .unwrap_or((0, self.params.client_window))
    }

    fn on_request(&mut self, now: SimTime, req: Request, out: &mut Outbox) {
        let (low, high) = self.wm_of(&req.client);
        if req.t <= low || req.t > high {
            return; // outside the client window
        }
        if self.dedup.is_pending(&req.client, req.t) {
            return;
        }
        if self.dedup.is_preprepared(&req.digest()) {
            return;
        }
        let bucket = bucket_of(req.t, &req.client, self.params.num_buckets());
        // Verify eagerly only when the bucket is currently ours to lead.
        let mine = {
            let sn = self.next_deliver.max(self.config.first);
            self.assignment_for_sn(sn).buckets_of(self.id).contains(&bucket)
        };
        let mut verified = false;
        if mine && self.knobs.dedup_enabled {
            out.charge_verification(1);
            if !self.registry.is_valid(
                &ProcessId::Client(req.client.clone()),
                &Request::signing_bytes(&req.payload, req.t, &req.client),
                &req.sig,
            ) {
                return;
            }
            verified = true;
        }
        self.dedup.enqueue(req, bucket, now, verified);
        self.try_propose(now, false, out);
    }

    // ------------------------------------------------------------------
    // Proposing.
    // ------------------------------------------------------------------

    fn arm_batch_timer(&mut self, out: &mut Outbox) {
        if self.config.leaders.contains(&self.id) {
            self.batch_timer_gen += 1;
            out.set_timer(self.params.batch_timeout, TimerKind::BatchCut {
                gen: self.batch_timer_gen,
            });
        }
    }

    fn arm_ec_timer(&mut self, out: &mut Outbox) {
        self.ec_timer_gen += 1;
        let timeout = self
            .params
            .epoch_change_timeout
            .saturating_mul(1u64 << self.ec_fires_since_delivery.min(16));
        out.set_timer(timeout, TimerKind::EpochChange { gen: self.ec_timer_gen });
    }

    /// Effective bucket assignment for `sn`: the epoch base, rotated once per
    /// completed rotation window in stable epochs.
    fn assignment_for_sn(&mut self, sn: SeqNum) -> &BucketAssignment {
        let window = if self.config.is_stable() && sn >= self.config.first {
            bucketing::rotation_index(self.config.first, self.params.rotation_period, sn)
        } else {
            0
        };
        let stale = !matches!(&self.rot_cache, Some((w, _)) if *w == window);
        if stale {
            let mut a = self.assignment_base.clone();
            for _ in 0..window {
                a = bucketing::rotate(&a);
            }
            self.rot_cache = Some((window, a));
        }
        &self.rot_cache.as_ref().unwrap().1
    }

    fn in_window(&self, sn: SeqNum) -> bool {
        match self.checkpoints.stable_sn() {
            None => sn < self.params.watermark_window,
            Some(c) => sn > c && sn <= c + self.params.watermark_window,
        }
    }

    fn rotation_ready(&self, sn: SeqNum) -> bool {
        if !self.config.is_stable() || !self.knobs.dedup_enabled {
            return true;
        }
        let next = self.next_deliver;
        bucketing::active_rotation_ready(
            |s| s < next,
            self.config.first,
            self.params.rotation_period,
            sn,
        )
    }

    fn try_propose(&mut self, now: SimTime, timer_fired: bool, out: &mut Outbox) {
        if self.participation != Participation::Active || self.phase != Phase::CommonCase {
            return;
        }
        let mut fired = timer_fired;
        let mut proposed_any = false;
        loop {
            let Some(sn) = self.next_proposal_sn else { break };
            if !self.config.contains_sn(sn) || !self.in_window(sn) || !self.rotation_ready(sn) {
                break;
            }

            let my_buckets: Vec<BucketId> = if self.knobs.dedup_enabled {
                self.assignment_for_sn(sn).buckets_of(self.id).to_vec()
            } else {
                (0..self.params.num_buckets()).map(BucketId).collect()
            };
            let mut available = self.dedup.collect_available(&my_buckets);
            self.censor_requests(now, &mut available);

            let full = available.len() >= self.params.batch_size_max;
            if !full && !fired {
                break;
            }

            let straggling = self.knobs.always_empty_from.is_some_and(|from| now >= from);
            let mut taken: Vec<(Request, SimTime)> = Vec::new();
            if !straggling {
                for (req, arrival, verified) in
                    available.into_iter().take(self.params.batch_size_max)
                {
                    if !verified {
                        out.charge_verification(1);
                        let ok = self.registry.is_valid(
                            &ProcessId::Client(req.client.clone()),
                            &Request::signing_bytes(&req.payload, req.t, &req.client),
                            &req.sig,
                        );
                        if !ok {
                            self.dedup.remove_pending(&req.client, req.t);
                            continue;
                        }
                    }
                    taken.push((req, arrival));
                }
            }

            let batch = Batch {
                epoch: self.epoch,
                sn,
                leader: self.id,
                requests: taken.iter().map(|(r, _)| r.clone()).collect(),
            };
            let digest = batch.digest();
            let sig = self.key.sign(&preprepare_signing_bytes(self.epoch, sn, &digest));

            for (req, arrival) in &taken {
                self.dedup.mark_preprepared(req, *arrival);
            }
            let inst = self.instances.entry((self.epoch, sn)).or_default();
            inst.leader = Some(self.id);
            inst.preprepare = Some(PrePrepareRecord {
                batch: batch.clone(),
                digest,
                leader_sig: sig.clone(),
            });
            inst.prepare_sent = true; // the proposal stands in for our prepare

            out.note(NodeNote::PrePrepareSent {
                epoch: self.epoch,
                sn,
                digest,
                requests: batch.requests.len(),
            });
            out.broadcast(self.params.n, ProtocolMessage::PrePrepare(PrePrepare { batch, sig }));

            self.next_proposal_sn = Some(sn + self.config.leaders.len() as u64);
            proposed_any = true;
            if !full {
                break; // a timer cut takes whatever was there, once
            }
            fired = false;
        }
        if proposed_any || timer_fired {
            self.arm_batch_timer(out);
        }
    }

    /// Censoring adversary: deterministically drops a fraction of the
    /// requests this leader would otherwise propose.
    fn censor_requests(&mut self, now: SimTime, available: &mut Vec<(Request, SimTime, bool)>) {
        let Some((fraction, from)) = self.knobs.censor else { return };
        if now < from || fraction <= 0.0 {
            return;
        }
        let threshold = (fraction * u64::MAX as f64) as u64;
        available.retain(|(req, _, _)| {
            let roll = self.rng.random::<u64>();
            if roll <= threshold {
                self.dedup.remove_pending(&req.client, req.t);
                false
            } else {
                true
            }
        });
    }

    // ------------------------------------------------------------------
    // Three-phase agreement.
    // ------------------------------------------------------------------

    fn svs_active(&self) -> bool {
        self.knobs.svs_enabled
            && self.config.is_stable()
            && self.config.leaders.len() == self.params.n as usize
    }

    fn on_preprepare(&mut self, now: SimTime, src: NodeId, pp: PrePrepare, out: &mut Outbox) {
        let (e, sn) = (pp.epoch(), pp.sn());
        if e > self.epoch {
            self.stash_msg(src, ProtocolMessage::PrePrepare(pp));
            return;
        }
        if e < self.epoch || self.phase != Phase::CommonCase {
            return;
        }
        // Conditions (2) and (3): the sender is the leader assigned to sn.
        if pp.batch.leader != src || leader_of(sn, &self.config) != Ok(src) {
            return;
        }
        // Condition (4): inside the batch watermark window.
        if self.checkpoints.stable_sn().is_some_and(|c| sn <= c) {
            return; // already checkpointed
        }
        if !self.in_window(sn) || !self.rotation_ready(sn) {
            self.stash_msg(src, ProtocolMessage::PrePrepare(pp));
            return;
        }
        // Condition (1): no conflicting proposal for this slot.
        let digest = pp.batch.digest();
        if let Some(inst) = self.instances.get(&(e, sn)) {
            if let Some(existing) = &inst.preprepare {
                if existing.digest != digest {
                    return; // equivocation: silently ignored
                }
                return; // duplicate
            }
        }
        if !self.registry.is_valid(
            &ProcessId::Node(src),
            &preprepare_signing_bytes(e, sn, &digest),
            &pp.sig,
        ) {
            return;
        }

        // Per-request checks: (5) duplicates, (6) client watermarks,
        // (7) bucket ownership, (8) client signatures (verifiers only).
        let verifier = svs::is_verifier(self.id, src, self.params.n, self.params.f, self.svs_active());
        let sender_buckets = self.assignment_for_sn(sn).buckets_of(src).to_vec();
        let mut in_batch: BTreeSet<Digest> = BTreeSet::new();
        for req in &pp.batch.requests {
            let d = req.digest();
            let (low, high) = self.wm_of(&req.client);
            if req.t <= low || req.t > high {
                return; // (6)
            }
            if self.knobs.dedup_enabled && (self.dedup.is_preprepared(&d) || !in_batch.insert(d)) {
                return; // (5)
            }
            if self.knobs.dedup_enabled {
                let bucket = bucket_of(req.t, &req.client, self.params.num_buckets());
                if !sender_buckets.contains(&bucket) {
                    return; // (7)
                }
            }
            if verifier {
                out.charge_verification(1);
                if !self.registry.is_valid(
                    &ProcessId::Client(req.client.clone()),
                    &Request::signing_bytes(&req.payload, req.t, &req.client),
                    &req.sig,
                ) {
                    return; // (8)
                }
            }
        }

        for req in &pp.batch.requests {
            self.dedup.mark_preprepared(req, now);
        }
        let inst = self.instances.entry((e, sn)).or_default();
        inst.leader = Some(src);
        inst.preprepare =
            Some(PrePrepareRecord { batch: pp.batch, digest, leader_sig: pp.sig });
        if self.participation == Participation::Active && !inst.prepare_sent {
            inst.prepare_sent = true;
            let sig = self.key.sign(&prepare_signing_bytes(e, sn, &digest));
            inst.prepares.insert(self.id, (digest, sig.clone()));
            out.broadcast(
                self.params.n,
                ProtocolMessage::Prepare(Prepare { epoch: e, sn, digest, sig }),
            );
        }
        self.try_advance(e, sn, out);
        self.try_deliver(now, out);
    }

    fn on_prepare(&mut self, now: SimTime, src: NodeId, p: Prepare, out: &mut Outbox) {
        if p.epoch > self.epoch {
            self.stash_msg(src, ProtocolMessage::Prepare(p));
            return;
        }
        if p.epoch < self.epoch
            || self.phase != Phase::CommonCase
            || self.checkpoints.stable_sn().is_some_and(|c| p.sn <= c)
            || !self.config.contains_sn(p.sn)
        {
            return;
        }
        if !self
            .registry
            .is_valid(&ProcessId::Node(src), &prepare_signing_bytes(p.epoch, p.sn, &p.digest), &p.sig)
        {
            return;
        }
        let inst = self.instances.entry((p.epoch, p.sn)).or_default();
        inst.prepares.entry(src).or_insert((p.digest, p.sig));
        self.try_advance(p.epoch, p.sn, out);
        self.try_deliver(now, out);
    }

    fn on_commit(&mut self, now: SimTime, src: NodeId, c: Commit, out: &mut Outbox) {
        if c.epoch > self.epoch {
            self.stash_msg(src, ProtocolMessage::Commit(c));
            return;
        }
        if c.epoch < self.epoch
            || self.phase != Phase::CommonCase
            || self.checkpoints.stable_sn().is_some_and(|cp| c.sn <= cp)
            || !self.config.contains_sn(c.sn)
        {
            return;
        }
        if !self
            .registry
            .is_valid(&ProcessId::Node(src), &commit_signing_bytes(c.epoch, c.sn, &c.digest), &c.sig)
        {
            return;
        }
        let inst = self.instances.entry((c.epoch, c.sn)).or_default();
        inst.commits.entry(src).or_insert(c.digest);
        self.try_advance(c.epoch, c.sn, out);
        self.try_deliver(now, out);
    }

    fn try_advance(&mut self, e: EpochNum, sn: SeqNum, out: &mut Outbox) {
        let quorum = self.params.quorum();
        let svs_active = self.svs_active();
        let Some(inst) = self.instances.get_mut(&(e, sn)) else { return };
        let Some(pp) = &inst.preprepare else { return };
        let digest = pp.digest;
        let leader = inst.leader.expect("preprepare sets the leader");

        let voters = inst.prepare_voters(&digest);
        if !inst.prepared && voters.len() >= quorum {
            inst.prepared = true;
        }
        if !inst.commit_sent
            && svs::commit_gate(&voters, leader, self.params.n, self.params.f, quorum, svs_active)
        {
            inst.commit_sent = true;
            if self.participation == Participation::Active {
                let sig = self.key.sign(&commit_signing_bytes(e, sn, &digest));
                inst.commits.insert(self.id, digest);
                out.broadcast(
                    self.params.n,
                    ProtocolMessage::Commit(Commit { epoch: e, sn, digest, sig }),
                );
            }
        }
        if !inst.committed && inst.commit_count(&digest) >= quorum {
            inst.committed = true;
            let batch = pp.batch.clone();
            out.note(NodeNote::Committed { epoch: e, sn, digest });
            for req in &batch.requests {
                self.dedup.remove_pending(&req.client, req.t);
            }
            self.committed.entry(sn).or_insert(batch);
            self.progress = true;
        }
    }

    // ------------------------------------------------------------------
    // Delivery and checkpoints.
    // ------------------------------------------------------------------

    fn try_deliver(&mut self, now: SimTime, out: &mut Outbox) {
        let mut delivered_any = false;
        while let Some(batch) = self.committed.remove(&self.next_deliver) {
            self.deliver_batch(batch, false, out);
            delivered_any = true;
        }
        if delivered_any {
            self.ec_fires_since_delivery = 0;
            self.arm_ec_timer(out);
            self.maybe_gracious_handoff(out);
            self.try_enter_pending(now, out);
            self.try_propose(now, false, out);
        }
    }

    fn deliver_batch(&mut self, batch: Batch, transferred: bool, out: &mut Outbox) {
        let sn = batch.sn;
        debug_assert_eq!(sn, self.next_deliver);
        let digest = batch.digest();
        let first_req_sn = self.req_sn_counter;
        self.req_sn_counter += batch.requests.len() as u64;

        let mut req_digests = Vec::with_capacity(batch.requests.len());
        for req in &batch.requests {
            req_digests.push(req.digest());
            self.delivery_ts_buffer.push_back((sn, req.client.clone(), req.t));
            if transferred {
                // Keep the dedup set consistent with the adopted log.
                self.dedup.mark_preprepared(req, 0);
            }
            if self.participation == Participation::Active || transferred {
                let wm_low = self.wm_of(&req.client).0;
                let ack = make_commit_ack(&self.key, req.client.clone(), req.t, sn, wm_low);
                out.send(req.client.clone(), ProtocolMessage::CommitAck(ack));
            }
        }
        out.note(NodeNote::Delivered {
            epoch: batch.epoch,
            sn,
            digest,
            requests: req_digests,
            first_req_sn,
            transferred,
        });
        self.delivered_log.insert(sn, batch);
        self.next_deliver = sn + 1;
        self.progress = true;

        self.maybe_emit_checkpoint(sn, out);
    }

    fn maybe_emit_checkpoint(&mut self, sn: SeqNum, out: &mut Outbox) {
        let period = self.params.checkpoint_period;
        if sn == 0 || sn % period != 0 {
            return;
        }
        let (lo, hi) = checkpoint_range(sn, period);
        let digests: Vec<Digest> =
            (lo..=hi).map(|s| self.delivered_log[&s].digest()).collect();
        let state = state_digest(&digests);
        if self.participation == Participation::Active {
            let sig = self.key.sign(&checkpoint_signing_bytes(sn, &state));
            out.broadcast(
                self.params.n,
                ProtocolMessage::Checkpoint(CheckpointMsg { sn, state_digest: state, sig }),
            );
        }
    }

    fn on_checkpoint_msg(&mut self, now: SimTime, src: NodeId, msg: CheckpointMsg, out: &mut Outbox) {
        if !self.registry.is_valid(
            &ProcessId::Node(src),
            &checkpoint_signing_bytes(msg.sn, &msg.state_digest),
            &msg.sig,
        ) {
            return;
        }
        if let Some(cert) =
            self.checkpoints.on_vote(src, msg.sn, msg.state_digest, msg.sig, &self.params)
        {
            self.after_stable_checkpoint(now, cert, out);
        }
    }

    /// Log truncation, watermark advancement, and passive-node activation at
    /// a new stable checkpoint. The tracker has already adopted the cert.
    fn after_stable_checkpoint(&mut self, now: SimTime, cert: CheckpointCert, out: &mut Outbox) {
        let sn = cert.sn;
        self.instances.retain(|(_, isn), _| *isn > sn);
        self.committed = self.committed.split_off(&self.next_deliver.max(0));

        // Client watermarks: fold in deliveries up to the checkpoint, then
        // slide each client's window over its contiguous delivered prefix.
        let mut rest = VecDeque::new();
        while let Some((bsn, client, t)) = self.delivery_ts_buffer.pop_front() {
            if bsn <= sn {
                self.delivered_ts.entry(client).or_default().insert(t);
            } else {
                rest.push_back((bsn, client, t));
            }
        }
        self.delivery_ts_buffer = rest;

        let window = self.params.client_window;
        let clients: Vec<ClientId> = self.delivered_ts.keys().cloned().collect();
        for client in clients {
            let prev = self.wm_of(&client).0;
            let set = self.delivered_ts.get_mut(&client).expect("just listed");
            let (low, high) = advance_client_watermark(prev, set, window);
            if low > prev {
                set.retain(|t| *t > low);
                self.client_wm.insert(client.clone(), (low, high));
                self.dedup.prune_below(&client, low);
            }
        }

        out.note(NodeNote::CheckpointStable { sn, state_digest: cert.state_digest });
        self.progress = true;

        // Passive nodes rejoin at the first stable checkpoint past their
        // transfer point, once fully delivered up to it.
        if let Participation::Passive { activate_after: Some(after) } = self.participation {
            if sn > after && self.next_deliver > sn {
                self.participation = Participation::Active;
                self.lag.reset();
                self.arm_batch_timer(out);
                self.arm_ec_timer(out);
            }
        }

        // A checkpoint we cannot reach locally means the log has a hole only
        // state transfer can fill.
        if self.next_deliver <= sn && !self.committed_covers(sn) {
            self.start_transfer(now, out);
        }
    }

    fn committed_covers(&self, sn: SeqNum) -> bool {
        (self.next_deliver..=sn).all(|s| self.committed.contains_key(&s))
    }

    // ------------------------------------------------------------------
    // Epoch change.
    // ------------------------------------------------------------------

    fn on_ec_timeout(&mut self, now: SimTime, out: &mut Outbox) {
        if self.participation != Participation::Active {
            return;
        }
        let target = match self.phase {
            Phase::CommonCase => self.epoch + 1,
            Phase::AwaitingNewEpoch { target } => target + 1,
        };
        self.ec_fires_since_delivery += 1;
        self.send_epoch_change(now, target, out);
    }

    fn send_epoch_change(&mut self, _now: SimTime, target: EpochNum, out: &mut Outbox) {
        let suspect = match self.phase {
            // Blame the leader of the first undelivered slot.
            Phase::CommonCase => leader_of(self.next_deliver, &self.config).ok(),
            // Blame the primary that failed to produce a NEW-EPOCH.
            Phase::AwaitingNewEpoch { target: stale } => {
                Some(primary_of(stale, self.params.n))
            }
        }
        .filter(|s| *s != self.id);
        self.phase = Phase::AwaitingNewEpoch { target };

        let stable = self.checkpoints.stable_sn();
        let mut prepared = Vec::new();
        for ((e, sn), inst) in &self.instances {
            if !inst.prepared || stable.is_some_and(|c| *sn <= c) {
                continue;
            }
            let Some(pp) = &inst.preprepare else { continue };
            let matching: BTreeMap<NodeId, Signature> = inst
                .prepares
                .iter()
                .filter(|(_, (d, _))| *d == pp.digest)
                .map(|(n, (_, s))| (*n, s.clone()))
                .collect();
            prepared.push(crate::messages::PreparedCert {
                epoch: *e,
                sn: *sn,
                batch: pp.batch.clone(),
                leader_sig: pp.leader_sig.clone(),
                prepares: matching,
            });
        }

        let checkpoint = self.checkpoints.stable().cloned();
        let bytes = EpochChangeMsg::signing_bytes(target, &checkpoint, &prepared, &suspect);
        let msg = EpochChangeMsg { target, checkpoint, prepared, suspect, sig: self.key.sign(&bytes) };
        out.send(primary_of(target, self.params.n), ProtocolMessage::EpochChange(msg));
        self.arm_ec_timer(out);
    }

    fn on_epoch_change(&mut self, now: SimTime, src: NodeId, ec: EpochChangeMsg, out: &mut Outbox) {
        let target = ec.target;
        if target <= self.epoch || primary_of(target, self.params.n) != self.id {
            return;
        }
        if validate_epoch_change(src, &ec, &self.registry, &self.params).is_err() {
            return;
        }
        self.echanges_in.entry(target).or_default().entry(src).or_insert(ec);
        let have = self.echanges_in[&target].len();

        // Join once f+1 nodes (hence one correct node) demand the change.
        let my_target = match self.phase {
            Phase::CommonCase => self.epoch,
            Phase::AwaitingNewEpoch { target } => target,
        };
        if have >= (self.params.f + 1) as usize
            && target > my_target
            && self.participation == Participation::Active
        {
            self.send_epoch_change(now, target, out);
        }

        if self.echanges_in[&target].len() >= self.params.epoch_change_quorum()
            && !self.new_epoch_sent.contains(&target)
            && self.participation == Participation::Active
        {
            self.build_new_epoch(now, target, out);
        }
    }

    fn build_new_epoch(&mut self, _now: SimTime, target: EpochNum, out: &mut Outbox) {
        let echanges: Vec<SignedEpochChange> = self.echanges_in[&target]
            .iter()
            .map(|(sender, msg)| SignedEpochChange { sender: *sender, msg: msg.clone() })
            .collect();
        let Ok(derived) = epoch::derive_new_epoch(&echanges, &self.params) else { return };

        let (last_known_epoch, last_known_leaders) = self
            .configs
            .range(..target)
            .next_back()
            .map(|(e, r)| (*e, r.config.leaders.clone()))
            .unwrap_or((0, genesis_config(&self.params).leaders));
        let leaders = epoch::next_leader_set_ungracious(
            self.id,
            target,
            last_known_epoch,
            &last_known_leaders,
            &derived.suspects,
            &mut self.rng,
        );
        let preferred = self.dedup.oldest_bucket(self.params.num_buckets());
        let config = epoch::finish_config(
            target,
            derived.next_first(),
            leaders,
            preferred,
            &self.params,
        );

        let reproposals = epoch::materialize_reproposals(&derived, target, self.id, &self.key);
        let bytes = NewEpochMsg::signing_bytes(target, &echanges, &reproposals);
        let ne = NewEpochMsg { epoch: target, echanges, reproposals, sig: self.key.sign(&bytes) };
        self.new_epoch_sent.insert(target);
        out.broadcast(self.params.n, ProtocolMessage::NewEpoch(ne));
        out.broadcast(self.params.n, RbState::broadcast(target, config));
        self.rb_initiated.insert(target);
    }

    fn on_new_epoch(&mut self, now: SimTime, _src: NodeId, ne: NewEpochMsg, out: &mut Outbox) {
        if ne.epoch <= self.epoch {
            return;
        }
        if self
            .pending_new_epoch
            .as_ref()
            .is_some_and(|(held, _)| held.epoch >= ne.epoch)
        {
            return;
        }
        let Ok(derived) = validate_new_epoch(&ne, &self.registry, &self.params) else {
            return;
        };
        self.latest_new_epoch = Some(ne.clone());
        self.pending_new_epoch = Some((ne, derived));
        self.try_enter_pending(now, out);
    }

    fn on_rb(&mut self, _now: SimTime, src: NodeId, msg: crate::messages::RbMsg, out: &mut Outbox) {
        if msg.epoch <= self.epoch {
            return;
        }
        let rb = self.rb.entry(msg.epoch).or_default();
        let actions = rb.on_message(self.id, &self.key, src, &msg, &self.registry, &self.params);
        for action in actions {
            match action {
                RbAction::Broadcast(m) => out.broadcast(self.params.n, m),
                RbAction::Deliver(record) => {
                    self.configs.insert(record.config.epoch, record);
                    self.progress = true;
                }
            }
        }
        let now = _now;
        self.try_enter_pending(now, out);
    }

    /// Gracious handoff: the next primary broadcasts the new configuration
    /// as soon as it locally delivers the last batch of a bounded epoch.
    fn maybe_gracious_handoff(&mut self, out: &mut Outbox) {
        let Some(last) = self.config.last else { return };
        if self.next_deliver <= last || self.participation != Participation::Active {
            return;
        }
        let next = self.epoch + 1;
        if primary_of(next, self.params.n) != self.id || self.rb_initiated.contains(&next) {
            return;
        }
        let preferred = self.dedup.oldest_bucket(self.params.num_buckets());
        let config =
            epoch::next_epoch_config_gracious(self.id, &self.config, preferred, &self.params);
        out.broadcast(self.params.n, RbState::broadcast(next, config));
        self.rb_initiated.insert(next);
    }

    /// Attempts both entry paths as prerequisites land.
    fn try_enter_pending(&mut self, now: SimTime, out: &mut Outbox) {
        // Ungracious: a validated NEW-EPOCH plus its reliably-delivered
        // configuration.
        if let Some((ne, _)) = &self.pending_new_epoch {
            let target = ne.epoch;
            if target > self.epoch {
                if let Some(record) = self.configs.get(&target).cloned() {
                    let (ne, derived) = self.pending_new_epoch.take().expect("checked above");
                    if record.config.first == derived.next_first() {
                        self.enter_ungracious(now, record, ne, derived, out);
                    }
                    // A config that contradicts the NEW-EPOCH is dropped;
                    // the epoch-change timer will move us past it.
                    return;
                }
            } else {
                self.pending_new_epoch = None;
            }
        }

        // Gracious: previous epoch fully delivered and the next config
        // reliably delivered.
        if self.phase == Phase::CommonCase || matches!(self.phase, Phase::AwaitingNewEpoch { target } if target == self.epoch + 1)
        {
            if let Some(last) = self.config.last {
                if self.next_deliver > last {
                    if let Some(record) = self.configs.get(&(self.epoch + 1)).cloned() {
                        if record.config.first == last + 1 {
                            self.enter_epoch(now, record, EpochEntryKind::Gracious, out);
                        }
                    }
                }
            }
        }
    }

    fn enter_ungracious(
        &mut self,
        now: SimTime,
        record: ConfigRecord,
        ne: NewEpochMsg,
        derived: DerivedNewEpoch,
        out: &mut Outbox,
    ) {
        // Adopt the quorum's checkpoint if it is ahead of ours.
        if let Some(cert) = &derived.checkpoint {
            if self.checkpoints.adopt(cert.clone()) {
                self.after_stable_checkpoint(now, cert.clone(), out);
            }
        }

        // Resurrect preprepared-but-uncommitted requests that the NEW-EPOCH
        // does not carry forward, then drop the old epoch's instances.
        let new_epoch = record.config.epoch;
        let mut carried: BTreeSet<Digest> = BTreeSet::new();
        for pp in &ne.reproposals {
            for req in &pp.batch.requests {
                carried.insert(req.digest());
            }
        }
        let mut resurrected = 0;
        let nb = self.params.num_buckets();
        let old_keys: Vec<(EpochNum, SeqNum)> =
            self.instances.range(..(new_epoch, 0)).map(|(k, _)| *k).collect();
        for key in old_keys {
            let inst = &self.instances[&key];
            if inst.committed {
                continue;
            }
            let Some(pp) = &inst.preprepare else { continue };
            let requests = pp.batch.requests.clone();
            for req in requests {
                if !carried.contains(&req.digest()) && self.dedup.resurrect(&req, nb) {
                    resurrected += 1;
                }
            }
        }
        if resurrected > 0 {
            out.note(NodeNote::Resurrected { count: resurrected });
        }

        self.enter_epoch(now, record, EpochEntryKind::Ungracious, out);

        // Install the re-proposals as preprepared instances of the new epoch
        // and prepare them.
        for pp in &ne.reproposals {
            let sn = pp.batch.sn;
            if sn < self.next_deliver {
                continue;
            }
            let digest = pp.batch.digest();
            for req in &pp.batch.requests {
                self.dedup.mark_preprepared(req, now);
            }
            let inst = self.instances.entry((new_epoch, sn)).or_default();
            inst.leader = Some(self.config.primary());
            inst.preprepare = Some(PrePrepareRecord {
                batch: pp.batch.clone(),
                digest,
                leader_sig: pp.sig.clone(),
            });
            if self.participation == Participation::Active && !inst.prepare_sent {
                inst.prepare_sent = true;
                let sig = self.key.sign(&prepare_signing_bytes(new_epoch, sn, &digest));
                inst.prepares.insert(self.id, (digest, sig.clone()));
                out.broadcast(
                    self.params.n,
                    ProtocolMessage::Prepare(Prepare { epoch: new_epoch, sn, digest, sig }),
                );
            }
            self.try_advance(new_epoch, sn, out);
        }
        self.try_deliver(now, out);
    }

    fn enter_epoch(
        &mut self,
        now: SimTime,
        record: ConfigRecord,
        kind: EpochEntryKind,
        out: &mut Outbox,
    ) {
        let config = record.config.clone();
        if kind != EpochEntryKind::Ungracious {
            // Gracious/transfer: old-epoch slots are settled; drop leftovers.
            let new_epoch = config.epoch;
            self.instances.retain(|(e, _), _| *e >= new_epoch);
        } else {
            let new_epoch = config.epoch;
            self.instances.retain(|(e, _), _| *e >= new_epoch);
        }

        self.epoch = config.epoch;
        self.configs.insert(config.epoch, record);
        self.assignment_base = bucketing::assign_buckets(&config, &self.params)
            .expect("validated configs have leaders");
        self.rot_cache = None;
        self.phase = Phase::CommonCase;
        self.next_proposal_sn = config
            .leaders
            .iter()
            .position(|l| *l == self.id)
            .map(|k| config.first + k as u64);
        self.config = config;
        if kind == EpochEntryKind::Ungracious {
            self.ec_fires_since_delivery = self.ec_fires_since_delivery.max(1);
        } else {
            self.ec_fires_since_delivery = 0;
        }
        self.echanges_in = self.echanges_in.split_off(&(self.epoch + 1));
        self.rb = self.rb.split_off(&(self.epoch + 1));

        out.note(NodeNote::EpochEntered {
            epoch: self.epoch,
            kind,
            leaders: self.config.leaders.clone(),
            primary: self.config.primary(),
        });
        self.progress = true;
        self.arm_batch_timer(out);
        self.arm_ec_timer(out);
        self.try_propose(now, false, out);
        let _ = now;
    }

    // ------------------------------------------------------------------
    // State transfer.
    // ------------------------------------------------------------------

    fn observe_epoch_hint(&mut self, src: NodeId, hint: EpochNum, out: &mut Outbox) {
        let lagging = self.lag.observe(src, hint, self.epoch, self.params.f);
        if lagging && self.lag.armed_at_epoch.is_none() && self.transfer.is_none() {
            self.lag.armed_at_epoch = Some(self.epoch);
            self.lag_timer_gen += 1;
            out.set_timer(
                self.params.epoch_change_timeout,
                TimerKind::LagCheck { gen: self.lag_timer_gen },
            );
        }
    }

    fn on_lag_check(&mut self, now: SimTime, out: &mut Outbox) {
        if self.transfer.is_some() {
            // Retry an unfinished transfer.
            self.broadcast_hello(out);
            self.lag_timer_gen += 1;
            out.set_timer(
                self.params.epoch_change_timeout,
                TimerKind::LagCheck { gen: self.lag_timer_gen },
            );
            return;
        }
        if self.lag.still_lagging(self.epoch, self.params.f) {
            self.start_transfer(now, out);
        } else {
            self.lag.armed_at_epoch = None;
        }
    }

    fn start_transfer(&mut self, now: SimTime, out: &mut Outbox) {
        if self.transfer.is_some() {
            return;
        }
        self.transfer = Some(TransferState::new(now));
        if self.participation == Participation::Active {
            self.participation = Participation::Passive { activate_after: None };
        }
        out.note(NodeNote::TransferStarted);
        self.broadcast_hello(out);
        self.lag_timer_gen += 1;
        out.set_timer(
            self.params.epoch_change_timeout,
            TimerKind::LagCheck { gen: self.lag_timer_gen },
        );
    }

    fn my_hello(&self) -> HelloMsg {
        HelloMsg {
            epoch: self.epoch,
            new_epoch: self.latest_new_epoch.clone().map(Box::new),
            checkpoint: self.checkpoints.stable().cloned(),
            last_delivered: self.last_delivered(),
        }
    }

    fn broadcast_hello(&mut self, out: &mut Outbox) {
        out.broadcast(self.params.n, ProtocolMessage::Hello(self.my_hello()));
    }

    fn on_hello(&mut self, _now: SimTime, src: NodeId, hello: HelloMsg, out: &mut Outbox) {
        if src == self.id {
            return;
        }
        let configs: Vec<ConfigRecord> = self
            .configs
            .range(hello.epoch + 1..)
            .map(|(_, r)| r.clone())
            .collect();
        let from = hello.last_delivered.map_or(0, |b| b + 1);
        let batches: Vec<Batch> =
            self.delivered_log.range(from..).map(|(_, b)| b.clone()).collect();
        let batch_digests = batches.iter().map(|b| (b.sn, b.digest())).collect();
        let reply = HelloReply { hello: self.my_hello(), configs, batches, batch_digests };
        out.send(src, ProtocolMessage::HelloReply(Box::new(reply)));
    }

    fn on_hello_reply(&mut self, now: SimTime, src: NodeId, reply: HelloReply, out: &mut Outbox) {
        // Config records ride on their reliable-broadcast certificates and
        // are useful whether or not a transfer is running.
        for record in &reply.configs {
            if record.config.epoch > self.epoch
                && validate_config_record(record, &self.registry, &self.params)
            {
                self.configs.entry(record.config.epoch).or_insert_with(|| record.clone());
                self.progress = true;
            }
        }
        if let Some(ne) = &reply.hello.new_epoch {
            self.on_new_epoch(now, src, (**ne).clone(), out);
        }

        let Some(transfer) = self.transfer.as_mut() else {
            self.try_enter_pending(now, out);
            return;
        };
        // Only absorb checkpoints that verify.
        let mut reply = reply;
        if let Some(cert) = &reply.hello.checkpoint {
            if cert.validate(&self.registry, &self.params).is_err() {
                reply.hello.checkpoint = None;
            }
        }
        transfer.absorb(src, &reply);
        self.try_ingest(now, out);
    }

    fn try_ingest(&mut self, now: SimTime, out: &mut Outbox) {
        loop {
            let Some(transfer) = self.transfer.as_ref() else { return };
            let Some(batch) = transfer.accepted(self.next_deliver, &self.params).cloned() else {
                break;
            };
            self.deliver_batch(batch, true, out);
        }

        let Some(transfer) = self.transfer.as_ref() else { return };
        let Some(cert) = transfer.checkpoint.clone() else { return };
        if self.next_deliver > cert.sn {
            // Caught up to the transferred checkpoint.
            let adopted = self.checkpoints.adopt(cert.clone());
            if adopted {
                self.after_stable_checkpoint(now, cert.clone(), out);
            }
            self.transfer = None;
            self.participation = Participation::Passive { activate_after: Some(cert.sn) };
            self.lag.reset();
            out.note(NodeNote::TransferCompleted { checkpoint: cert.sn });

            // Move to the newest known epoch configuration.
            if let Some((&e, record)) = self.configs.iter().next_back() {
                if e > self.epoch {
                    let record = record.clone();
                    self.enter_epoch(now, record, EpochEntryKind::Transfer, out);
                }
            }
            self.try_enter_pending(now, out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{KeyRegistry, SchemeKind};
    use std::sync::Arc;

    fn setup(n: u32) -> (Vec<Node>, Vec<SigningKey>, SharedRegistry, ProtocolParams) {
        let params = ProtocolParams {
            n,
            f: (n - 1) / 3,
            checkpoint_period: 4,
            watermark_window: 8,
            buckets_per_leader: 2,
            rotation_period: 8,
            ephemeral_epoch_len: 6,
            batch_size_max: 4,
            batch_timeout: 50,
            epoch_change_timeout: 500,
            client_window: 8,
            stable_leaders: n,
        };
        let mut reg = KeyRegistry::new(SchemeKind::Test, 42);
        let node_keys: Vec<SigningKey> =
            (0..n).map(|i| reg.register(ProcessId::Node(NodeId(i)))).collect();
        let client_key = reg.register(ProcessId::Client(ClientId::new("client-0")));
        let registry: SharedRegistry = Arc::new(reg);
        let nodes = node_keys
            .iter()
            .enumerate()
            .map(|(i, _)| {
                // Keys cannot be cloned out of the vec; re-derive from a
                // second registry with the same seed.
                let mut r2 = KeyRegistry::new(SchemeKind::Test, 42);
                let k = r2.register(ProcessId::Node(NodeId(i as u32)));
                Node::new(NodeId(i as u32), params.clone(), k, registry.clone(), NodeKnobs::default())
            })
            .collect();
        (nodes, vec![client_key], registry, params)
    }

    fn signed_request(t: Timestamp, payload: &[u8]) -> Request {
        let mut r2 = KeyRegistry::new(SchemeKind::Test, 42);
        let key = r2.register(ProcessId::Client(ClientId::new("client-0")));
        Request::new(payload.to_vec(), t, &key, ClientId::new("client-0"))
    }

    #[test]
    fn fresh_request_is_queued_once() {
        let (mut nodes, _, _, _) = setup(4);
        let node = &mut nodes[0];
        let mut out = Outbox::default();
        let req = signed_request(1, b"hello");
        node.on_request(0, req.clone(), &mut out);
        assert!(node.dedup.is_pending(&req.client, 1));
        // Second copy: silently dropped as pending.
        node.on_request(1, req.clone(), &mut out);
        let nb = node.params.num_buckets();
        let bucket = bucket_of(1, &req.client, nb);
        assert_eq!(node.dedup.queues[bucket.0 as usize].len(), 1);
    }

    #[test]
    fn stale_timestamp_is_discarded() {
        let (mut nodes, _, _, _) = setup(4);
        let node = &mut nodes[0];
        node.client_wm.insert(ClientId::new("client-0"), (5, 13));
        let mut out = Outbox::default();
        let req = signed_request(5, b"hello");
        node.on_request(0, req.clone(), &mut out);
        assert!(!node.dedup.is_pending(&req.client, 5));
        // Too new is also discarded.
        let req = signed_request(14, b"hello");
        node.on_request(0, req.clone(), &mut out);
        assert!(!node.dedup.is_pending(&req.client, 14));
    }

    #[test]
    fn timer_cut_proposes_empty_batch() {
        let (mut nodes, _, _, _) = setup(4);
        let node = &mut nodes[0];
        let mut out = Outbox::default();
        node.boot(0, &mut out);
        let mut out = Outbox::default();
        node.on_timer(50, TimerKind::BatchCut { gen: 1 }, &mut out);
        let pp = out
            .sends
            .iter()
            .find_map(|(_, m)| match m {
                ProtocolMessage::PrePrepare(pp) => Some(pp),
                _ => None,
            })
            .expect("empty batch proposed on timeout");
        assert!(pp.batch.requests.is_empty());
        assert_eq!(pp.batch.sn, 0, "node 0 leads sequence number 0 in epoch 0");
    }

    #[test]
    fn full_batch_cut_without_timer() {
        let (mut nodes, _, _, _) = setup(4);
        let node = &mut nodes[0];
        let mut out = Outbox::default();
        node.boot(0, &mut out);
        // Node 0 owns buckets {0, 1} in epoch 0. Feed requests that map there
        // until a full batch (4) is available.
        let mut fed = 0;
        let mut t = 1;
        let mut out = Outbox::default();
        while fed < 4 {
            let req = signed_request(t, b"x");
            let b = bucket_of(t, &req.client, 8);
            t += 1;
            if b.0 >= 2 {
                continue;
            }
            // Client watermark window is 8; renumber into range.
            if req.t > 8 {
                break;
            }
            node.on_request(0, req, &mut out);
            fed += 1;
        }
        if fed == 4 {
            let pps: Vec<_> = out
                .sends
                .iter()
                .filter(|(_, m)| matches!(m, ProtocolMessage::PrePrepare(_)))
                .collect();
            assert!(!pps.is_empty(), "full batch should be proposed eagerly");
        }
    }

    #[test]
    fn preprepare_from_wrong_leader_rejected() {
        let (mut nodes, _, _, _) = setup(4);
        let mut out = Outbox::default();
        nodes[1].boot(0, &mut out);
        // Node 1 builds a batch for sn 0, which node 0 leads.
        let batch = Batch { epoch: 0, sn: 0, leader: NodeId(1), requests: vec![] };
        let digest = batch.digest();
        let sig = nodes[1].key.sign(&preprepare_signing_bytes(0, 0, &digest));
        let pp = PrePrepare { batch, sig };
        let mut out = Outbox::default();
        nodes[2].boot(0, &mut Outbox::default());
        nodes[2].on_message(1, ProcessId::Node(NodeId(1)), ProtocolMessage::PrePrepare(pp), &mut out);
        assert!(nodes[2].instances.is_empty());
        assert!(out.sends.is_empty());
    }

    #[test]
    fn duplicate_request_across_batches_rejected_by_condition_five() {
        let (mut nodes, _, _, _) = setup(4);
        for node in nodes.iter_mut() {
            node.boot(0, &mut Outbox::default());
        }
        let req = signed_request(1, b"dup");
        // A batch from node 0 (if the request happens to be in its bucket) is
        // simulated by marking the request preprepared directly.
        nodes[2].dedup.mark_preprepared(&req, 0);

        // Craft a batch from the correct leader of some sn containing the
        // same request; condition (5) must reject the whole batch.
        let bucket = bucket_of(1, &req.client, 8);
        let leader = nodes[2].assignment_for_sn(0).owner_of(bucket).unwrap();
        // Find an sn led by that leader.
        let sn = (0..8u64).find(|sn| leader_of(*sn, nodes[2].config()) == Ok(leader)).unwrap();
        let batch = Batch { epoch: 0, sn, leader, requests: vec![req.clone()] };
        let digest = batch.digest();
        let mut r2 = KeyRegistry::new(SchemeKind::Test, 42);
        let leader_key = r2.register(ProcessId::Node(leader));
        let sig = leader_key.sign(&preprepare_signing_bytes(0, sn, &digest));
        let mut out = Outbox::default();
        nodes[2].on_message(
            1,
            ProcessId::Node(leader),
            ProtocolMessage::PrePrepare(PrePrepare { batch, sig }),
            &mut out,
        );
        assert!(
            !nodes[2].instances.contains_key(&(0, sn)),
            "batch with a preprepared request must be rejected"
        );
    }

    #[test]
    fn commit_requires_quorum_of_distinct_senders() {
        let (mut nodes, _, _, params) = setup(4);
        for node in nodes.iter_mut() {
            node.boot(0, &mut Outbox::default());
        }
        // Leader 0 proposes an empty batch at sn 0.
        let mut out0 = Outbox::default();
        nodes[0].on_timer(50, TimerKind::BatchCut { gen: 1 }, &mut out0);
        let pp = out0
            .sends
            .iter()
            .find_map(|(_, m)| match m {
                ProtocolMessage::PrePrepare(pp) => Some(pp.clone()),
                _ => None,
            })
            .unwrap();

        // Node 2 accepts it and emits a PREPARE.
        let mut out2 = Outbox::default();
        nodes[2].on_message(1, ProcessId::Node(NodeId(0)), ProtocolMessage::PrePrepare(pp.clone()), &mut out2);
        let my_prepare = out2
            .sends
            .iter()
            .find_map(|(_, m)| match m {
                ProtocolMessage::Prepare(p) => Some(p.clone()),
                _ => None,
            })
            .expect("prepare broadcast after accepting preprepare");

        // Prepares from node 1 and node 3 complete the quorum (leader
        // implicit + self + 2 others = 4 voters >= 3), satisfying SVS
        // verifiers {1, 2} of leader 0... node 1 is a verifier, so its
        // prepare matters for the gate.
        let digest = my_prepare.digest;
        let mut commit_seen = false;
        for sender in [1u32, 3] {
            let mut r2 = KeyRegistry::new(SchemeKind::Test, 42);
            let k = r2.register(ProcessId::Node(NodeId(sender)));
            let sig = k.sign(&prepare_signing_bytes(0, 0, &digest));
            let p = Prepare { epoch: 0, sn: 0, digest, sig };
            let mut out = Outbox::default();
            nodes[2].on_message(2, ProcessId::Node(NodeId(sender)), ProtocolMessage::Prepare(p), &mut out);
            commit_seen |= out.sends.iter().any(|(_, m)| matches!(m, ProtocolMessage::Commit(_)));
        }
        assert!(commit_seen, "commit broadcast once the quorum and verifier gate are met");

        // Now feed commits: 2 more distinct commits (plus our own) commit it.
        for sender in [0u32, 1] {
            let mut r2 = KeyRegistry::new(SchemeKind::Test, 42);
            let k = r2.register(ProcessId::Node(NodeId(sender)));
            let sig = k.sign(&commit_signing_bytes(0, 0, &digest));
            let c = Commit { epoch: 0, sn: 0, digest, sig };
            let mut out = Outbox::default();
            nodes[2].on_message(3, ProcessId::Node(NodeId(sender)), ProtocolMessage::Commit(c), &mut out);
        }
        assert_eq!(nodes[2].delivered_count(), 1, "empty batch delivered at sn 0");
        assert_eq!(params.quorum(), 3);
    }

    #[test]
    fn delivery_is_gap_free() {
        let (mut nodes, _, _, _) = setup(4);
        let node = &mut nodes[0];
        node.boot(0, &mut Outbox::default());
        // Commit sn 1 before sn 0: nothing delivers until 0 commits.
        let b1 = Batch { epoch: 0, sn: 1, leader: NodeId(1), requests: vec![] };
        node.committed.insert(1, b1);
        node.try_deliver(0, &mut Outbox::default());
        assert_eq!(node.delivered_count(), 0);
        let b0 = Batch { epoch: 0, sn: 0, leader: NodeId(0), requests: vec![] };
        node.committed.insert(0, b0);
        node.try_deliver(0, &mut Outbox::default());
        assert_eq!(node.delivered_count(), 2, "both deliver once the gap fills");
    }

    #[test]
    fn request_commit_numbers_follow_prefix_sums() {
        // The request sequence number of the k-th request in batch sn is
        // k + sum of earlier batch sizes; delivery assigns them that way.
        let (mut nodes, _, _, _) = setup(4);
        let node = &mut nodes[0];
        node.boot(0, &mut Outbox::default());
        let reqs: Vec<Request> = (1..=5).map(|t| signed_request(t, b"p")).collect();

        let mk = |sn: u64, leader: u32, rs: &[Request]| Batch {
            epoch: 0,
            sn,
            leader: NodeId(leader),
            requests: rs.to_vec(),
        };
        node.committed.insert(0, mk(0, 0, &reqs[0..3])); // sizes S = [3, 0, 2]
        node.committed.insert(1, mk(1, 1, &[]));
        node.committed.insert(2, mk(2, 2, &reqs[3..5]));
        let mut out = Outbox::default();
        node.try_deliver(0, &mut out);

        let firsts: Vec<u64> = out
            .notes
            .iter()
            .filter_map(|n| match n {
                NodeNote::Delivered { first_req_sn, .. } => Some(*first_req_sn),
                _ => None,
            })
            .collect();
        assert_eq!(firsts, vec![0, 3, 3], "batch offsets are prefix sums of sizes");
        // Request k=1 of batch 2 gets request sequence number 4.
        assert_eq!(firsts[2] + 1, 4);
    }
}
