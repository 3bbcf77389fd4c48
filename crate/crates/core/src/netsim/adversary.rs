//! Scripted fault and attack behaviors, bounded by the model's fault
//! threshold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ProtocolParams;
use crate::types::{NodeId, SimTime};

/// Per-node behavior over the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NodeBehavior {
    #[default]
    Correct,
    /// Stops at `at`; optionally comes back with empty state at `recover_at`.
    Crash { at: SimTime, recover_at: Option<SimTime> },
    /// Silently drops `fraction` of the requests it would propose, from tick
    /// `from` on.
    Censor { fraction: f64, from: SimTime },
    /// Delays every PRE-PREPARE it sends by `delay` and proposes only empty
    /// batches, from tick `from` on.
    Straggler { delay: SimTime, from: SimTime },
    /// Sends conflicting PRE-PREPAREs for the same slot to disjoint halves of
    /// the nodes, from tick `from` on.
    Equivocate { from: SimTime },
}

impl NodeBehavior {
    pub fn is_correct(&self) -> bool {
        matches!(self, NodeBehavior::Correct)
    }

    pub fn script_name(&self) -> &'static str {
        match self {
            NodeBehavior::Correct => "correct",
            NodeBehavior::Crash { .. } => "crash",
            NodeBehavior::Censor { .. } => "censor",
            NodeBehavior::Straggler { .. } => "straggler",
            NodeBehavior::Equivocate { .. } => "equivocate",
        }
    }
}

/// Per-client behavior. Any number of clients may misbehave.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ClientBehavior {
    #[default]
    Correct,
    /// Sends every request to all nodes immediately: the request duplication
    /// attack.
    DuplicateToAll,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AdversaryError {
    #[error("{count} non-correct nodes exceed the fault threshold f={f}")]
    TooManyByzantine { count: usize, f: u32 },
    #[error("script references node {0} outside 0..{1}")]
    UnknownNode(u32, u32),
}

/// The whole fault script for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AdversaryScript {
    /// Behavior per node id; nodes not listed are correct.
    pub nodes: Vec<(NodeId, NodeBehavior)>,
    /// Behavior per client index; clients not listed are correct.
    pub clients: Vec<(usize, ClientBehavior)>,
}

impl AdversaryScript {
    pub fn behavior_of(&self, node: NodeId) -> NodeBehavior {
        self.nodes
            .iter()
            .find(|(id, _)| *id == node)
            .map(|(_, b)| b.clone())
            .unwrap_or_default()
    }

    pub fn client_behavior(&self, idx: usize) -> ClientBehavior {
        self.clients
            .iter()
            .find(|(i, _)| *i == idx)
            .map(|(_, b)| *b)
            .unwrap_or_default()
    }

    /// At most f nodes may deviate; clients are unconstrained.
    pub fn validate(&self, params: &ProtocolParams) -> Result<(), AdversaryError> {
        for (id, _) in &self.nodes {
            if id.0 >= params.n {
                return Err(AdversaryError::UnknownNode(id.0, params.n));
            }
        }
        let count = self.nodes.iter().filter(|(_, b)| !b.is_correct()).count();
        if count > params.f as usize {
            return Err(AdversaryError::TooManyByzantine { count, f: params.f });
        }
        Ok(())
    }
}
