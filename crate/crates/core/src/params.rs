//! Protocol parameters, their validation, and derived constants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::SimTime;

/// Static configuration shared by every node in a run. Immutable after
/// construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolParams {
    /// Number of nodes.
    pub n: u32,
    /// Fault threshold; requires `n >= 3f + 1`.
    pub f: u32,
    /// Batches between checkpoints (`C`).
    pub checkpoint_period: u64,
    /// Width of the batch sequence-number window (`W`); multiple of `C`.
    pub watermark_window: u64,
    /// Buckets per leader when all nodes lead (`m`).
    pub buckets_per_leader: u32,
    /// Committed batches between bucket rotations in a stable epoch.
    pub rotation_period: u64,
    /// Number of sequence numbers in an ephemeral epoch.
    pub ephemeral_epoch_len: u64,
    /// Maximum requests per batch.
    pub batch_size_max: usize,
    /// Simulated time before a leader cuts a (possibly empty) batch.
    pub batch_timeout: SimTime,
    /// Initial epoch-change timer; doubles on consecutive ungracious changes.
    pub epoch_change_timeout: SimTime,
    /// Per-client in-flight timestamp window width (`w_c`).
    pub client_window: u64,
    /// Leader-set size at which an epoch counts as stable (unbounded length).
    /// `1` pins every leader set to the epoch primary, reducing the protocol
    /// to classic single-leader PBFT.
    pub stable_leaders: u32,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            n: 4,
            f: 1,
            checkpoint_period: 128,
            watermark_window: 256,
            buckets_per_leader: 2,
            rotation_period: 256,
            ephemeral_epoch_len: 256,
            batch_size_max: 4000,
            batch_timeout: 500,
            epoch_change_timeout: 20_000,
            client_window: 16,
            stable_leaders: 4,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParamError {
    #[error("invalid resilience: n={n} < 3f+1={}", 3 * f + 1)]
    InvalidResilience { n: u32, f: u32 },
    #[error("watermark window {w} is not a multiple of checkpoint period {c}")]
    InvalidWindow { w: u64, c: u64 },
    #[error("parameter {0} must be strictly positive")]
    NonPositiveParam(&'static str),
    #[error("stable_leaders {0} exceeds node count {1}")]
    InvalidStableLeaders(u32, u32),
}

impl ProtocolParams {
    /// Checks every structural invariant; reports the first violation.
    /// Deterministic and side-effect free.
    pub fn validate(&self) -> Result<(), ParamError> {
        if self.n < 3 * self.f + 1 {
            return Err(ParamError::InvalidResilience { n: self.n, f: self.f });
        }
        for (name, value) in [
            ("n", self.n as u64),
            ("checkpoint_period", self.checkpoint_period),
            ("watermark_window", self.watermark_window),
            ("buckets_per_leader", self.buckets_per_leader as u64),
            ("rotation_period", self.rotation_period),
            ("ephemeral_epoch_len", self.ephemeral_epoch_len),
            ("batch_size_max", self.batch_size_max as u64),
            ("batch_timeout", self.batch_timeout),
            ("epoch_change_timeout", self.epoch_change_timeout),
            ("client_window", self.client_window),
            ("stable_leaders", self.stable_leaders as u64),
        ] {
            if value == 0 {
                return Err(ParamError::NonPositiveParam(name));
            }
        }
        if self.watermark_window % self.checkpoint_period != 0 {
            return Err(ParamError::InvalidWindow {
                w: self.watermark_window,
                c: self.checkpoint_period,
            });
        }
        if self.stable_leaders > self.n {
            return Err(ParamError::InvalidStableLeaders(self.stable_leaders, self.n));
        }
        Ok(())
    }

    /// Agreement quorum: `n - f` matching votes. For the minimal `n = 3f + 1`
    /// this equals `2f + 1`, and two quorums always intersect in at least
    /// `f + 1` nodes, hence in a correct one.
    pub fn quorum(&self) -> usize {
        (self.n - self.f) as usize
    }

    /// Matching signed CHECKPOINT messages needed for a stable checkpoint.
    pub fn checkpoint_quorum(&self) -> usize {
        (2 * self.f + 1) as usize
    }

    /// EPOCH-CHANGE messages the new primary collects before NEW-EPOCH.
    pub fn epoch_change_quorum(&self) -> usize {
        (2 * self.f + 1) as usize
    }

    /// Nodes a correct client needs commit acknowledgments from.
    pub fn settle_quorum(&self) -> usize {
        (self.f + 1) as usize
    }

    /// Total bucket count, `m * n`.
    pub fn num_buckets(&self) -> u32 {
        self.buckets_per_leader * self.n
    }

    /// Whether a leader set of `k` nodes makes an epoch stable (unbounded).
    pub fn is_stable_size(&self, k: usize) -> bool {
        k >= self.stable_leaders as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(n: u32, f: u32) -> ProtocolParams {
        ProtocolParams { n, f, stable_leaders: n, ..ProtocolParams::default() }
    }

    #[test]
    fn table_defaults_validate() {
        // n=4, f=1, C=128, W=256, m=2.
        assert_eq!(ProtocolParams::default().validate(), Ok(()));
    }

    #[test]
    fn resilience_bound_rejected() {
        let p = params(3, 1);
        assert_eq!(p.validate(), Err(ParamError::InvalidResilience { n: 3, f: 1 }));
    }

    #[test]
    fn hundred_nodes_validate() {
        // 3 * 33 + 1 = 100.
        assert_eq!(params(100, 33).validate(), Ok(()));
    }

    #[test]
    fn window_must_be_multiple_of_checkpoint_period() {
        let p = ProtocolParams { watermark_window: 300, ..ProtocolParams::default() };
        assert_eq!(p.validate(), Err(ParamError::InvalidWindow { w: 300, c: 128 }));
    }

    #[test]
    fn zero_parameters_rejected() {
        let p = ProtocolParams { client_window: 0, ..ProtocolParams::default() };
        assert_eq!(p.validate(), Err(ParamError::NonPositiveParam("client_window")));
    }

    proptest! {
        // Any accepted configuration has quorums that pairwise intersect in
        // at least one correct node: 2 * quorum - n >= f + 1.
        #[test]
        fn quorum_intersection_holds(f in 0u32..34, extra in 0u32..8) {
            let n = 3 * f + 1 + extra;
            let p = params(n, f);
            prop_assume!(p.validate().is_ok());
            let q = p.quorum() as u32;
            prop_assert!(2 * q >= n + f + 1);
        }
    }
}
