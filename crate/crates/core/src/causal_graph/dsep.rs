//! d-separation via active-trail reachability.
//!
//! The engine is the standard two-phase algorithm: first collect the
//! conditioning set together with its ancestors, then breadth-first search
//! over `(node, arrival direction)` states, where a state records whether the
//! trail arrived from a child (moving up) or from a parent (moving down).
//! A collider may be crossed only when it or one of its descendants is
//! conditioned on; a chain or fork only when the middle node is not.
//!
//! Selection nodes are appended to the conditioning set before evaluation:
//! the observed data has already been filtered on them, so every statistical
//! statement about it is implicitly conditional on selection.

use super::{CausalDag, GraphError, NodeId, NodeRole};
use std::collections::BTreeSet;

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Arrival {
    FromChild,
    FromParent,
}

/// Tests whether `a` and `b` are d-separated given `z` in `dag`.
///
/// Preconditions: `a != b`, and neither endpoint may appear in `z`. All ids
/// must belong to `dag`. Selection-role nodes are added to the conditioning
/// set automatically (endpoints excepted, so querying a selection node
/// directly still works).
pub fn d_separated(
    dag: &CausalDag,
    a: NodeId,
    b: NodeId,
    z: &[NodeId],
) -> Result<bool, GraphError> {
    dag.node(a)?;
    dag.node(b)?;
    if a == b {
        return Err(GraphError::QueryEndpointsEqual);
    }
    let mut cond: BTreeSet<NodeId> = BTreeSet::new();
    for id in z {
        dag.node(*id)?;
        if *id == a || *id == b {
            return Err(GraphError::EndpointInConditioningSet(
                dag.name_of(*id).to_string(),
            ));
        }
        cond.insert(*id);
    }
    for (id, node) in dag.nodes() {
        if node.role == NodeRole::Selection && id != a && id != b {
            cond.insert(id);
        }
    }
    Ok(!d_connected_given(dag, a, b, &cond))
}

/// Core reachability; `cond` is the fully resolved conditioning set.
fn d_connected_given(dag: &CausalDag, a: NodeId, b: NodeId, cond: &BTreeSet<NodeId>) -> bool {
    // Conditioning set plus all its ancestors; a collider is passable exactly
    // when it belongs to this set.
    let mut anc: BTreeSet<NodeId> = BTreeSet::new();
    let mut stack: Vec<NodeId> = cond.iter().copied().collect();
    while let Some(v) = stack.pop() {
        if anc.insert(v) {
            stack.extend(dag.parents(v).iter().copied());
        }
    }

    let mut visited: BTreeSet<(NodeId, u8)> = BTreeSet::new();
    // Leaving the start node is unrestricted, which is exactly the FromChild
    // expansion, since the start is never in `cond`.
    let mut frontier: Vec<(NodeId, Arrival)> = vec![(a, Arrival::FromChild)];
    while let Some((v, dir)) = frontier.pop() {
        let key = (v, if dir == Arrival::FromChild { 0 } else { 1 });
        if !visited.insert(key) {
            continue;
        }
        if v == b {
            return true;
        }
        match dir {
            Arrival::FromChild => {
                if !cond.contains(&v) {
                    for p in dag.parents(v) {
                        frontier.push((*p, Arrival::FromChild));
                    }
                    for c in dag.children(v) {
                        frontier.push((*c, Arrival::FromParent));
                    }
                }
            }
            Arrival::FromParent => {
                if !cond.contains(&v) {
                    for c in dag.children(v) {
                        frontier.push((*c, Arrival::FromParent));
                    }
                }
                if anc.contains(&v) {
                    // v is conditioned on or has a conditioned descendant:
                    // the trail may bend back up through the collider.
                    for p in dag.parents(v) {
                        frontier.push((*p, Arrival::FromChild));
                    }
                }
            }
        }
    }
    false
}
