//! Shared oracles for integration tests.
//!
//! Everything here is deliberately naive: the point is to check the library
//! against independent re-derivations, so none of this reuses library
//! internals beyond the public graph accessors.

use cacm_core::causal_graph::{CausalDag, Node, NodeId, NodeRole};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::collections::BTreeSet;

/// d-separation by exhaustive path enumeration.
///
/// Walks every simple undirected path between `a` and `b` and applies the
/// blocking rules directly: a non-collider interior node blocks when
/// conditioned on; a collider blocks unless it or one of its descendants is
/// conditioned on. Selection-role nodes are added to the conditioning set
/// first, mirroring the query semantics of the engine under test.
/// Exponential in path count — fine for the ≤8-node graphs used in tests.
pub fn dsep_by_path_enumeration(dag: &CausalDag, a: NodeId, b: NodeId, z: &[NodeId]) -> bool {
    let mut cond: BTreeSet<NodeId> = z.iter().copied().collect();
    for (id, node) in dag.nodes() {
        if node.role == NodeRole::Selection && id != a && id != b {
            cond.insert(id);
        }
    }

    // Descendant closure per node, for the collider rule.
    let n = dag.node_count();
    let mut desc: Vec<BTreeSet<NodeId>> = vec![BTreeSet::new(); n];
    for i in 0..n {
        let mut stack = vec![NodeId(i)];
        while let Some(v) = stack.pop() {
            for c in dag.children(v) {
                if desc[i].insert(*c) {
                    stack.push(*c);
                }
            }
        }
    }

    // Undirected neighbors with edge direction relative to the path step.
    let neighbors = |v: NodeId| -> Vec<(NodeId, bool)> {
        // (next, true) means v -> next; (next, false) means next -> v.
        let mut out: Vec<(NodeId, bool)> = dag.children(v).iter().map(|c| (*c, true)).collect();
        out.extend(dag.parents(v).iter().map(|p| (*p, false)));
        out
    };

    // DFS over simple paths, tracking the direction of the edge we arrived
    // by so interior nodes can be classified as collider or not.
    fn active_path_exists(
        dag: &CausalDag,
        cond: &BTreeSet<NodeId>,
        desc: &[BTreeSet<NodeId>],
        neighbors: &dyn Fn(NodeId) -> Vec<(NodeId, bool)>,
        target: NodeId,
        path: &mut Vec<NodeId>,
        arrived_forward: Option<bool>,
    ) -> bool {
        let here = *path.last().unwrap();
        if here == target {
            return true;
        }
        for (next, forward) in neighbors(here) {
            if path.contains(&next) {
                continue;
            }
            // `here` is interior once we leave it toward `next` (unless it
            // is the path start, which has no arrival direction).
            if let Some(into_here) = arrived_forward {
                let collider = into_here && !forward; // -> here <-
                let blocked = if collider {
                    !cond.contains(&here)
                        && desc[here.0].iter().all(|d| !cond.contains(d))
                } else {
                    cond.contains(&here)
                };
                if blocked {
                    continue;
                }
            }
            path.push(next);
            if active_path_exists(dag, cond, desc, neighbors, target, path, Some(forward)) {
                return true;
            }
            path.pop();
        }
        false
    }

    let mut path = vec![a];
    !active_path_exists(dag, &cond, &desc, &neighbors, b, &mut path, None)
}

/// A random DAG over `n` nodes: edges only from lower to higher index, each
/// present with probability `edge_prob`. Roles are plain attributes, so no
/// implicit conditioning interferes with the query under test.
pub fn random_dag(rng: &mut StdRng, n: usize, edge_prob: f64) -> CausalDag {
    let nodes: Vec<Node> = (0..n)
        .map(|i| Node {
            name: format!("n{i}"),
            role: NodeRole::Attribute,
            observed: true,
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen_bool(edge_prob) {
                edges.push((format!("n{i}"), format!("n{j}")));
            }
        }
    }
    CausalDag::new(nodes, edges).unwrap()
}

/// A random query `(a, b, z)` with distinct endpoints not in `z`.
pub fn random_query(rng: &mut StdRng, n: usize) -> (NodeId, NodeId, Vec<NodeId>) {
    let a = rng.gen_range(0..n);
    let b = loop {
        let b = rng.gen_range(0..n);
        if b != a {
            break b;
        }
    };
    let z_size = rng.gen_range(0..=(n - 2).min(3));
    let mut z = BTreeSet::new();
    while z.len() < z_size {
        let v = rng.gen_range(0..n);
        if v != a && v != b {
            z.insert(NodeId(v));
        }
    }
    (NodeId(a), NodeId(b), z.into_iter().collect())
}

/// Deterministic RNG for oracle comparisons.
pub fn seeded(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}
