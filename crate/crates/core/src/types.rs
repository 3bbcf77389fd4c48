//! Shared identifiers and scalar types used across the protocol engine and
//! the simulator.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Simulated time, in abstract ticks. One tick has no fixed wall-clock
/// meaning; scenario files pick the scale.
pub type SimTime = u64;

/// Batch sequence number. Global across epochs, delivered in order 0, 1, 2...
pub type SeqNum = u64;

/// Epoch number.
pub type EpochNum = u64;

/// Client request timestamp: a per-client monotone counter starting at 1.
pub type Timestamp = u64;

/// Node identity. Nodes are mapped by a bijection to `0..n`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    /// The `k`-th successor of this node in modulo-`n` arithmetic.
    pub fn successor(self, k: u32, n: u32) -> NodeId {
        NodeId((self.0 + k) % n)
    }

    /// The predecessor of this node in modulo-`n` arithmetic.
    pub fn predecessor(self, n: u32) -> NodeId {
        NodeId((self.0 + n - 1) % n)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Client identity. The byte representation of the name is what request
/// hashes and signatures bind to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub String);

impl ClientId {
    pub fn new(name: impl Into<String>) -> Self {
        ClientId(name.into())
    }

    /// Canonical client name for the simulator's `k`-th client.
    pub fn numbered(k: usize) -> Self {
        ClientId(format!("client-{k}"))
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Either side of the node/client split. Used for addressing and key lookup.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProcessId {
    Node(NodeId),
    Client(ClientId),
}

impl ProcessId {
    pub fn as_node(&self) -> Option<NodeId> {
        match self {
            ProcessId::Node(id) => Some(*id),
            ProcessId::Client(_) => None,
        }
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProcessId::Node(id) => write!(f, "{id}"),
            ProcessId::Client(c) => write!(f, "{c}"),
        }
    }
}

impl From<NodeId> for ProcessId {
    fn from(id: NodeId) -> Self {
        ProcessId::Node(id)
    }
}

impl From<ClientId> for ProcessId {
    fn from(id: ClientId) -> Self {
        ProcessId::Client(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn successor_wraps() {
        assert_eq!(NodeId(3).successor(1, 4), NodeId(0));
        assert_eq!(NodeId(3).successor(2, 4), NodeId(1));
        assert_eq!(NodeId(0).predecessor(4), NodeId(3));
    }
}
