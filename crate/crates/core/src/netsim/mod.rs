//! Seeded discrete-event simulator: eventual synchrony, authenticated
//! point-to-point channels, crash/recovery, and scripted Byzantine behavior.
//!
//! The simulator is strictly single-threaded. Every run is a pure function
//! of (scenario, seed): state uses ordered containers, randomness comes from
//! seeded ChaCha streams, and simultaneous events fire in insertion order.

pub mod adversary;
pub mod trace;

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::client::{ClientActor, ClientWorkload, EpochView};
use crate::crypto::SharedRegistry;
use crate::messages::{PrePrepare, ProtocolMessage};
use crate::params::ProtocolParams;
use crate::replica::{Node, NodeKnobs};
use crate::types::{NodeId, ProcessId, SimTime, Timestamp};

use adversary::{AdversaryScript, ClientBehavior, NodeBehavior};
use trace::{NodeNote, TraceEvent};

/// Timers a node or client can arm. Generation counters make stale firings
/// recognizable; there is no explicit cancel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerKind {
    /// Leader batch cut.
    BatchCut { gen: u64 },
    /// Epoch-change timer (resets on every delivery).
    EpochChange { gen: u64 },
    /// State-transfer grace / retry tick.
    LagCheck { gen: u64 },
    /// Client retransmission for timestamp `t`.
    ClientRetry { t: Timestamp },
}

/// Everything a handler wants the simulator to do on its behalf.
#[derive(Debug, Default)]
pub struct Outbox {
    pub sends: Vec<(ProcessId, ProtocolMessage)>,
    pub timers: Vec<(SimTime, TimerKind)>,
    pub notes: Vec<NodeNote>,
    /// Client-signature verifications performed while handling the event;
    /// each one costs `sig_verify_charge` simulated time.
    pub verify_charges: u64,
}

impl Outbox {
    pub fn send(&mut self, dst: impl Into<ProcessId>, msg: ProtocolMessage) {
        self.sends.push((dst.into(), msg));
    }

    /// Sends to every node, including the caller (self-delivery keeps vote
    /// accounting uniform).
    pub fn broadcast(&mut self, n: u32, msg: ProtocolMessage) {
        for i in 0..n {
            self.sends.push((ProcessId::Node(NodeId(i)), msg.clone()));
        }
    }

    pub fn set_timer(&mut self, delay: SimTime, kind: TimerKind) {
        self.timers.push((delay, kind));
    }

    pub fn note(&mut self, note: NodeNote) {
        self.notes.push(note);
    }

    pub fn charge_verification(&mut self, count: u64) {
        self.verify_charges += count;
    }
}

#[derive(Debug)]
enum Event {
    Deliver { src: ProcessId, dst: ProcessId, msg: ProtocolMessage, sent_at: SimTime },
    Timer { owner: ProcessId, kind: TimerKind },
    Crash(NodeId),
    Recover(NodeId),
    ClientStart(usize),
    GstMark,
}

struct Queued {
    time: SimTime,
    seq: u64,
    event: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

/// Network and accounting knobs for one run.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    /// Global stabilization time: before it, delays are drawn from
    /// `[1, delta_pre]`; after it, from `[1, delta_post]`.
    pub gst: SimTime,
    pub delta_pre: SimTime,
    pub delta_post: SimTime,
    /// Simulated cost of one client-signature verification.
    pub sig_verify_charge: SimTime,
    /// Record per-message send/receive events in the trace.
    pub record_network: bool,
}

struct NodeSlot {
    node: Node,
    behavior: NodeBehavior,
    crashed: bool,
    /// Tick until which the node's CPU is busy verifying signatures.
    cpu_free_at: SimTime,
}

/// Why a run loop returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    /// The event queue drained completely.
    Quiescent,
    /// The stop predicate fired.
    Stopped,
    /// The time horizon was reached with events still pending.
    HorizonReached,
}

pub struct Simulation {
    pub now: SimTime,
    queue: BinaryHeap<Reverse<Queued>>,
    seq: u64,
    events_fired: u64,
    params: ProtocolParams,
    cfg: SimConfig,
    nodes: Vec<NodeSlot>,
    pub clients: Vec<ClientActor>,
    net_rng: ChaCha12Rng,
    pub trace: Vec<TraceEvent>,
    pub registry: SharedRegistry,
}

impl Simulation {
    /// Assembles nodes and clients. `knobs` applies run-wide switches
    /// (dedup ablation, SVS); per-node behaviors come from the script.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: ProtocolParams,
        cfg: SimConfig,
        script: &AdversaryScript,
        knobs: &NodeKnobs,
        registry: SharedRegistry,
        node_keys: Vec<crate::crypto::SigningKey>,
        client_keys: Vec<crate::crypto::SigningKey>,
        workload: ClientWorkload,
    ) -> Simulation {
        let mut sim = Simulation {
            now: 0,
            queue: BinaryHeap::new(),
            seq: 0,
            events_fired: 0,
            net_rng: ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x6e65_7473_696d),
            nodes: Vec::new(),
            clients: Vec::new(),
            trace: Vec::new(),
            registry: registry.clone(),
            params: params.clone(),
            cfg,
        };

        for (i, key) in node_keys.into_iter().enumerate() {
            let id = NodeId(i as u32);
            let behavior = script.behavior_of(id);
            let mut node_knobs = knobs.clone();
            match &behavior {
                NodeBehavior::Censor { fraction, from } => {
                    node_knobs.censor = Some((*fraction, *from));
                }
                NodeBehavior::Straggler { from, .. } => {
                    node_knobs.always_empty_from = Some(*from);
                }
                _ => {}
            }
            match &behavior {
                NodeBehavior::Crash { at, recover_at } => {
                    sim.schedule_abs(*at, Event::Crash(id));
                    if let Some(r) = recover_at {
                        sim.schedule_abs(*r, Event::Recover(id));
                    }
                }
                _ => {}
            }
            let node = Node::new(id, params.clone(), key, registry.clone(), node_knobs);
            sim.nodes.push(NodeSlot { node, behavior, crashed: false, cpu_free_at: 0 });
        }

        for (i, key) in client_keys.into_iter().enumerate() {
            let behavior = script.client_behavior(i);
            let client = ClientActor::new(
                i,
                params.clone(),
                key,
                registry.clone(),
                workload.clone(),
                behavior == ClientBehavior::DuplicateToAll,
            );
            sim.clients.push(client);
            sim.schedule_abs(1, Event::ClientStart(i));
        }

        if sim.cfg.gst > 0 {
            sim.schedule_abs(sim.cfg.gst, Event::GstMark);
        }
        sim
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.params
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0 as usize].node
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_crashed(&self, id: NodeId) -> bool {
        self.nodes[id.0 as usize].crashed
    }

    pub fn events_fired(&self) -> u64 {
        self.events_fired
    }

    fn schedule_abs(&mut self, time: SimTime, event: Event) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Queued { time, seq, event }));
    }

    /// Boots every node (arming their initial timers) and stamps the trace
    /// header. Call once before running.
    pub fn start(&mut self, meta: TraceEvent) {
        self.trace.push(meta);
        for i in 0..self.nodes.len() {
            let mut out = Outbox::default();
            self.nodes[i].node.boot(0, &mut out);
            self.dispatch_outbox(ProcessId::Node(NodeId(i as u32)), out);
        }
    }

    /// Network delay law: uniform in `[1, delta_pre]` before GST, uniform in
    /// `[1, delta_post]` after. Losses are not modeled; client
    /// retransmission subsumes them.
    fn draw_delay(&mut self, at: SimTime) -> SimTime {
        let bound = if at < self.cfg.gst { self.cfg.delta_pre } else { self.cfg.delta_post };
        self.net_rng.random_range(1..=bound.max(1))
    }

    fn dispatch_outbox(&mut self, owner: ProcessId, out: Outbox) {
        let Outbox { mut sends, timers, notes, verify_charges } = out;

        // Charge signature-verification CPU: the node's outputs leave once
        // its CPU is free again.
        let mut base = self.now;
        if verify_charges > 0 && self.cfg.sig_verify_charge > 0 {
            if let ProcessId::Node(id) = &owner {
                let slot = &mut self.nodes[id.0 as usize];
                let start = slot.cpu_free_at.max(self.now);
                slot.cpu_free_at = start + verify_charges * self.cfg.sig_verify_charge;
                base = slot.cpu_free_at;
            }
        }

        // Byzantine output wrappers.
        if let ProcessId::Node(id) = &owner {
            let behavior = self.nodes[id.0 as usize].behavior.clone();
            match behavior {
                NodeBehavior::Equivocate { from } if self.now >= from => {
                    sends = self.equivocate_sends(*id, sends);
                }
                NodeBehavior::Straggler { delay, from } if self.now >= from => {
                    for (dst, msg) in &sends {
                        if matches!(msg, ProtocolMessage::PrePrepare(_)) {
                            let d = self.draw_delay(base) + delay;
                            self.schedule_send(owner.clone(), dst.clone(), msg.clone(), base, d);
                        }
                    }
                    sends.retain(|(_, m)| !matches!(m, ProtocolMessage::PrePrepare(_)));
                }
                _ => {}
            }
        }

        for (dst, msg) in sends {
            let d = self.draw_delay(base);
            self.schedule_send(owner.clone(), dst, msg, base, d);
        }
        for (delay, kind) in timers {
            self.schedule_abs(self.now + delay, Event::Timer { owner: owner.clone(), kind });
        }
        for note in notes {
            self.push_note(&owner, note);
        }
    }

    fn schedule_send(
        &mut self,
        src: ProcessId,
        dst: ProcessId,
        msg: ProtocolMessage,
        base: SimTime,
        delay: SimTime,
    ) {
        if self.cfg.record_network {
            self.trace.push(TraceEvent::Send {
                tick: base,
                src: src.to_string(),
                dst: dst.to_string(),
                kind: msg.kind().to_string(),
            });
        }
        self.schedule_abs(base + delay, Event::Deliver { src, dst, msg, sent_at: base });
    }

    /// Splits a PRE-PREPARE broadcast into two conflicting variants sent to
    /// disjoint halves of the nodes. The equivocator's own copy keeps the
    /// original batch so its local state stays self-consistent.
    fn equivocate_sends(
        &mut self,
        me: NodeId,
        sends: Vec<(ProcessId, ProtocolMessage)>,
    ) -> Vec<(ProcessId, ProtocolMessage)> {
        sends
            .into_iter()
            .map(|(dst, msg)| {
                let ProtocolMessage::PrePrepare(pp) = &msg else { return (dst, msg) };
                let target = match &dst {
                    ProcessId::Node(id) if *id != me && id.0 % 2 == 1 => *id,
                    _ => return (dst, msg),
                };
                let Some(variant) = self.conflicting_variant(me, pp) else { return (dst, msg) };
                (ProcessId::Node(target), ProtocolMessage::PrePrepare(variant))
            })
            .collect()
    }

    fn conflicting_variant(&self, me: NodeId, pp: &PrePrepare) -> Option<PrePrepare> {
        if pp.batch.requests.len() < 2 {
            return None;
        }
        let mut batch = pp.batch.clone();
        batch.requests.reverse();
        let digest = batch.digest();
        let bytes = crate::messages::preprepare_signing_bytes(batch.epoch, batch.sn, &digest);
        let sig = self.nodes[me.0 as usize].node.key().sign(&bytes);
        Some(PrePrepare { batch, sig })
    }

    fn push_note(&mut self, owner: &ProcessId, note: NodeNote) {
        let tick = self.now;
        let ev = match (owner, note) {
            (_, NodeNote::RequestCreated { client, t, digest }) => {
                TraceEvent::RequestCreated { tick, client, t, digest }
            }
            (_, NodeNote::RequestSettled { client, t }) => {
                TraceEvent::RequestSettled { tick, client, t }
            }
            (ProcessId::Node(node), note) => {
                let node = *node;
                match note {
                    NodeNote::PrePrepareSent { epoch, sn, digest, requests } => {
                        TraceEvent::PrePrepareSent { tick, node, epoch, sn, digest, requests }
                    }
                    NodeNote::Committed { epoch, sn, digest } => {
                        TraceEvent::Committed { tick, node, epoch, sn, digest }
                    }
                    NodeNote::Delivered { epoch, sn, digest, requests, first_req_sn, transferred } => {
                        TraceEvent::Delivered {
                            tick,
                            node,
                            epoch,
                            sn,
                            digest,
                            requests,
                            first_req_sn,
                            transferred,
                        }
                    }
                    NodeNote::EpochEntered { epoch, kind, leaders, primary } => {
                        TraceEvent::EpochEntered { tick, node, epoch, kind, leaders, primary }
                    }
                    NodeNote::CheckpointStable { sn, state_digest } => {
                        TraceEvent::CheckpointStable { tick, node, sn, state_digest }
                    }
                    NodeNote::Resurrected { count } => {
                        TraceEvent::Resurrected { tick, node, count }
                    }
                    NodeNote::TransferStarted => TraceEvent::TransferStarted { tick, node },
                    NodeNote::TransferCompleted { checkpoint } => {
                        TraceEvent::TransferCompleted { tick, node, checkpoint }
                    }
                    NodeNote::RequestCreated { .. } | NodeNote::RequestSettled { .. } => {
                        unreachable!("handled above")
                    }
                }
            }
            (ProcessId::Client(_), note) => {
                unreachable!("client emitted a node-only note: {note:?}")
            }
        };
        self.trace.push(ev);
    }

    /// Snapshot of a correct node's epoch configuration and effective bucket
    /// assignment, for client targeting. Stale views only cost extra sends.
    fn epoch_view(&self) -> EpochView {
        let reference = self
            .nodes
            .iter()
            .find(|s| !s.crashed && s.behavior.is_correct())
            .or_else(|| self.nodes.iter().find(|s| !s.crashed))
            .expect("at least one live node");
        EpochView {
            assignment: reference.node.view_assignment().clone(),
            num_buckets: self.params.num_buckets(),
        }
    }

    /// Fires the next event. Returns false when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(Reverse(next)) = self.queue.pop() else { return false };
        debug_assert!(next.time >= self.now, "time went backwards");
        self.now = next.time;
        self.events_fired += 1;

        match next.event {
            Event::Deliver { src, dst, msg, sent_at } => {
                if self.cfg.record_network {
                    self.trace.push(TraceEvent::Receive {
                        tick: self.now,
                        src: src.to_string(),
                        dst: dst.to_string(),
                        kind: msg.kind().to_string(),
                        sent_at,
                    });
                }
                match dst {
                    ProcessId::Node(id) => {
                        let slot = &mut self.nodes[id.0 as usize];
                        if slot.crashed {
                            return true;
                        }
                        let mut out = Outbox::default();
                        slot.node.on_message(self.now, src, msg, &mut out);
                        self.dispatch_outbox(ProcessId::Node(id), out);
                    }
                    ProcessId::Client(ref cid) => {
                        let view = self.epoch_view();
                        let Some(idx) = self.clients.iter().position(|c| c.id() == cid) else {
                            return true;
                        };
                        let mut out = Outbox::default();
                        self.clients[idx].on_message(self.now, src, msg, &view, &mut out);
                        self.dispatch_outbox(dst, out);
                    }
                }
            }
            Event::Timer { owner, kind } => match owner {
                ProcessId::Node(id) => {
                    let slot = &mut self.nodes[id.0 as usize];
                    if slot.crashed {
                        return true;
                    }
                    let mut out = Outbox::default();
                    slot.node.on_timer(self.now, kind, &mut out);
                    self.dispatch_outbox(ProcessId::Node(id), out);
                }
                ProcessId::Client(ref cid) => {
                    let view = self.epoch_view();
                    let Some(idx) = self.clients.iter().position(|c| c.id() == cid) else {
                        return true;
                    };
                    let mut out = Outbox::default();
                    self.clients[idx].on_timer(self.now, kind, &view, &mut out);
                    self.dispatch_outbox(owner, out);
                }
            },
            Event::Crash(id) => {
                self.nodes[id.0 as usize].crashed = true;
                self.trace.push(TraceEvent::Crashed { tick: self.now, node: id });
            }
            Event::Recover(id) => {
                let slot = &mut self.nodes[id.0 as usize];
                // No durable state: the node restarts empty and stays passive
                // until state transfer and the next stable checkpoint.
                let fresh = Node::new(
                    id,
                    self.params.clone(),
                    slot.node.key().clone(),
                    self.registry.clone(),
                    slot.node.knobs().clone(),
                );
                slot.node = fresh;
                slot.crashed = false;
                slot.cpu_free_at = 0;
                self.trace.push(TraceEvent::Recovered { tick: self.now, node: id });
                let mut out = Outbox::default();
                self.nodes[id.0 as usize].node.boot_recovered(self.now, &mut out);
                self.dispatch_outbox(ProcessId::Node(id), out);
            }
            Event::ClientStart(idx) => {
                let view = self.epoch_view();
                let mut out = Outbox::default();
                self.clients[idx].on_start(self.now, &view, &mut out);
                let owner = ProcessId::Client(self.clients[idx].id().clone());
                self.dispatch_outbox(owner, out);
            }
            Event::GstMark => {
                self.trace.push(TraceEvent::GstReached { tick: self.now });
            }
        }
        true
    }

    /// Runs until the queue drains, `stop` fires (checked every 64 events),
    /// or the horizon passes.
    pub fn run_until(&mut self, horizon: SimTime, stop: impl Fn(&Simulation) -> bool) -> RunOutcome {
        let mut since_check = 0u32;
        loop {
            match self.queue.peek() {
                None => return RunOutcome::Quiescent,
                Some(Reverse(q)) if q.time > horizon => return RunOutcome::HorizonReached,
                Some(_) => {}
            }
            self.step();
            since_check += 1;
            if since_check == 64 {
                since_check = 0;
                if stop(self) {
                    return RunOutcome::Stopped;
                }
            }
        }
    }

    /// Stamps the trace footer. `quiescent` records whether the run ended
    /// with nothing left to do (queue drained or stop predicate satisfied).
    pub fn finish(&mut self, quiescent: bool) {
        let max_instances = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, s)| (NodeId(i as u32), s.node.max_instances()))
            .collect();
        self.trace.push(TraceEvent::RunEnd {
            tick: self.now,
            quiescent,
            events: self.events_fired,
            max_instances,
        });
    }
}
