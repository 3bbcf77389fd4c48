//! Signature-verification sharding (SVS).
//!
//! In stable epochs where every node leads, only the f+1 modulo-n successors
//! of a batch's leader verify the client signatures it carries. To keep
//! Validity, COMMIT is then gated on seeing PREPAREs from all of those
//! verifiers: at least one of them is correct and has checked every
//! signature. Outside stable all-leader epochs the optimization is disabled
//! and the plain quorum rule applies.

use std::collections::BTreeSet;

use crate::types::NodeId;

/// The f+1 lexicographic (modulo n) successors of `leader`.
pub fn verifiers_of(leader: NodeId, n: u32, f: u32) -> BTreeSet<NodeId> {
    (1..=f + 1).map(|k| leader.successor(k, n)).collect()
}

/// Whether `node` must verify client signatures for batches led by `leader`.
pub fn is_verifier(node: NodeId, leader: NodeId, n: u32, f: u32, svs_active: bool) -> bool {
    if !svs_active {
        return true;
    }
    verifiers_of(leader, n, f).contains(&node)
}

/// COMMIT gate over the set of distinct matching prepare voters (the
/// leader's own proposal counting as its prepare).
///
/// With SVS active the voters must include every verifier in addition to
/// meeting the quorum; otherwise the quorum alone decides.
pub fn commit_gate(
    prepare_voters: &BTreeSet<NodeId>,
    leader: NodeId,
    n: u32,
    f: u32,
    quorum: usize,
    svs_active: bool,
) -> bool {
    if prepare_voters.len() < quorum {
        return false;
    }
    if !svs_active {
        return true;
    }
    verifiers_of(leader, n, f).is_subset(prepare_voters)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[u32]) -> BTreeSet<NodeId> {
        ids.iter().copied().map(NodeId).collect()
    }

    #[test]
    fn verifiers_are_modular_successors() {
        assert_eq!(verifiers_of(NodeId(2), 4, 1), set(&[3, 0]));
        assert_eq!(verifiers_of(NodeId(3), 4, 1), set(&[0, 1]));
        assert_eq!(verifiers_of(NodeId(1), 4, 0), set(&[2]));
    }

    #[test]
    fn gate_requires_all_verifiers_in_stable_epochs() {
        // Leader 2, verifiers {3, 0}. Voters {3, 0, 2} plus self (1) pass.
        assert!(commit_gate(&set(&[3, 0, 2, 1]), NodeId(2), 4, 1, 3, true));
        // Verifier 3 missing: no commit even with a quorum.
        assert!(!commit_gate(&set(&[1, 2, 0]), NodeId(2), 4, 1, 3, true));
    }

    #[test]
    fn gate_reduces_to_quorum_when_svs_disabled() {
        assert!(commit_gate(&set(&[1, 2, 0]), NodeId(2), 4, 1, 3, false));
        assert!(!commit_gate(&set(&[1, 2]), NodeId(2), 4, 1, 3, false));
    }

    #[test]
    fn svs_only_adds_requirements() {
        // Anything passing with SVS passes without it.
        for voters in [set(&[0, 1, 2, 3]), set(&[3, 0, 2]), set(&[1, 2, 3])] {
            if commit_gate(&voters, NodeId(2), 4, 1, 3, true) {
                assert!(commit_gate(&voters, NodeId(2), 4, 1, 3, false));
            }
        }
    }

    #[test]
    fn non_verifiers_skip_client_signature_checks_only_under_svs() {
        assert!(!is_verifier(NodeId(1), NodeId(2), 4, 1, true));
        assert!(is_verifier(NodeId(3), NodeId(2), 4, 1, true));
        assert!(is_verifier(NodeId(1), NodeId(2), 4, 1, false));
    }
}
