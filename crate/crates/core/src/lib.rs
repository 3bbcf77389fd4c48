//! A multi-leader Byzantine fault-tolerant total-order broadcast engine,
//! driven by a seeded discrete-event network simulator.
//!
//! The protocol generalizes PBFT: every epoch has a set of parallel leaders
//! that propose request batches concurrently, with the client request hash
//! space partitioned into buckets so that no two leaders can order the same
//! request. Bucket assignments rotate inside long-lived (stable) epochs to
//! defeat request censoring, and leader sets shrink on timeouts and grow back
//! on gracious epoch changes. Setting `stable_leaders = 1` pins every leader
//! set to the epoch primary and reduces the protocol to classic PBFT.
//!
//! The crate is organized around the protocol subsystems:
//!
//! * [`params`] — run-wide configuration and derived quorums.
//! * [`crypto`] — hashing plus pluggable signature schemes.
//! * [`bucketing`] — hash-space partitioning, assignment, and rotation.
//! * [`messages`] — every wire message and certificate.
//! * [`client`] — client-side windowed submission and retransmission.
//! * [`replica`] — the per-node state machine (common case, epochs,
//!   checkpointing, state transfer glue).
//! * [`epoch`] — epoch configuration math, leader-set policy, epoch-change
//!   certificates, and reliable broadcast of configurations.
//! * [`checkpoint`] — checkpoint certificates and watermark advancement.
//! * [`svs`] — signature-verification sharding.
//! * [`state_transfer`] — catch-up for lagging or recovered nodes.
//! * [`netsim`] — the deterministic event-queue simulator and adversary.
//! * [`harness`] — scenario files, the runner, metrics, and the trace
//!   property checker.

pub mod bucketing;
pub mod checkpoint;
pub mod client;
pub mod crypto;
pub mod epoch;
pub mod harness;
pub mod messages;
pub mod netsim;
pub mod params;
pub mod replica;
pub mod state_transfer;
pub mod svs;
pub mod types;

pub use crypto::{digest, Digest};
pub use params::ProtocolParams;
pub use types::{ClientId, EpochNum, NodeId, ProcessId, SeqNum, SimTime, Timestamp};
