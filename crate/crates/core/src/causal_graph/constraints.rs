//! Deriving conditional-independence constraints from a realized graph.
//!
//! For every observed attribute `A`, [`derive_constraints`] enumerates the
//! conditioning sets `Z` (drawn from the label, the environment, and the
//! other observed attributes, up to `max_cond_size`) under which the causal
//! feature is d-separated from `A`, and records one constraint per valid
//! `Z`, the empty set included. The environment node itself is handled
//! marginally: `X_c ⊥ E` is recorded when it holds outright, and that single
//! statement stands in for the whole family — whether environment matching
//! is sound at all is a yes/no question, and its conditional refinements are
//! never enforced directly.
//!
//! Each attribute also gets a *selected* constraint: the one the training
//! phase should enforce. Selection prefers conditioning sets containing the
//! environment (pooling across environments hides shifts that per-environment
//! matching catches), then smaller sets, then name order.

use super::{d_separated, CausalDag, GraphError, NodeId, NodeRole};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// `subject ⊥ other | given`, with ids local to the graph that derived it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndependenceConstraint {
    pub subject: NodeId,
    pub other: NodeId,
    /// Conditioning set in canonical order: label first, then attributes by
    /// name, the environment last.
    pub given: Vec<NodeId>,
}

/// The constraints derived from one graph, plus the per-attribute choice of
/// which constraint to enforce. Keeps the source graph so constraints can be
/// rendered and compared across graphs by name and role.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub graph: CausalDag,
    pub constraints: Vec<IndependenceConstraint>,
    /// Attribute name -> index into `constraints`.
    pub selected: BTreeMap<String, usize>,
}

/// Name/role view of a constraint, independent of any particular graph's
/// node numbering. This is the cross-graph identity used by intersection and
/// the JSON wire form.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConstraintView {
    pub subject: String,
    pub other: String,
    pub given: Vec<String>,
}

impl ConstraintSet {
    pub fn view(&self, c: &IndependenceConstraint) -> ConstraintView {
        ConstraintView {
            subject: self.graph.name_of(c.subject).to_string(),
            other: self.graph.name_of(c.other).to_string(),
            given: c
                .given
                .iter()
                .map(|id| self.graph.name_of(*id).to_string())
                .collect(),
        }
    }

    pub fn views(&self) -> Vec<ConstraintView> {
        self.constraints.iter().map(|c| self.view(c)).collect()
    }

    /// The enforced constraint for `attr`, if any constraint was valid.
    pub fn selected_for(&self, attr: &str) -> Option<&IndependenceConstraint> {
        self.selected.get(attr).map(|i| &self.constraints[*i])
    }

    /// Names of the attribute-role nodes in the source graph, sorted.
    pub fn attribute_vocabulary(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .graph
            .nodes()
            .filter(|(_, n)| n.role == NodeRole::Attribute)
            .map(|(_, n)| n.name.clone())
            .collect();
        names.sort();
        names
    }

    fn role_key(&self, c: &IndependenceConstraint) -> (String, Vec<&'static str>) {
        let mut roles: Vec<&'static str> = c
            .given
            .iter()
            .map(|id| self.graph.node(*id).unwrap().role.as_str())
            .collect();
        roles.sort();
        (self.graph.name_of(c.other).to_string(), roles)
    }
}

impl fmt::Display for ConstraintView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.given.is_empty() {
            write!(f, "{} ⊥ {}", self.subject, self.other)
        } else {
            write!(f, "{} ⊥ {} | {}", self.subject, self.other, self.given.join(", "))
        }
    }
}

/// Orders a conditioning set for display and serialization: label first,
/// then everything else by name, the environment last.
fn canonical_given_order(dag: &CausalDag, given: &mut Vec<NodeId>) {
    given.sort_by_key(|id| {
        let node = dag.node(*id).unwrap();
        let rank = match node.role {
            NodeRole::Label => 0,
            NodeRole::Environment => 2,
            _ => 1,
        };
        (rank, node.name.clone())
    });
}

/// Derives the constraint set for `dag`.
///
/// Requires exactly one causal-feature node and exactly one label node.
/// Conditioning sets are enumerated in increasing size (ties in name order),
/// so the constraint list is deterministic for a given graph.
pub fn derive_constraints(
    dag: &CausalDag,
    max_cond_size: usize,
) -> Result<ConstraintSet, GraphError> {
    if max_cond_size == 0 {
        return Err(GraphError::BadMaxCondSize(max_cond_size));
    }
    let subject = dag.unique_role(NodeRole::CausalFeature)?;
    dag.unique_role(NodeRole::Label)?;

    // Targets: observed nodes other than the label and the feature vector.
    // Selection nodes are skipped even if marked observed — the data only
    // ever contains rows where they are constant.
    let targets: Vec<NodeId> = dag
        .nodes()
        .filter(|(id, n)| {
            n.observed
                && *id != subject
                && !matches!(
                    n.role,
                    NodeRole::Label | NodeRole::ObservedFeature | NodeRole::Selection
                )
        })
        .map(|(id, _)| id)
        .collect();

    let label = dag.unique_role(NodeRole::Label)?;
    let mut constraints = Vec::new();
    for target in &targets {
        let target_role = dag.node(*target)?.role;
        if target_role == NodeRole::Environment {
            if d_separated(dag, subject, *target, &[])? {
                constraints.push(IndependenceConstraint {
                    subject,
                    other: *target,
                    given: Vec::new(),
                });
            }
            continue;
        }
        // Candidate conditioning pool: the label plus every other observed
        // attribute/environment node. The feature vector is excluded — it is
        // a collider child of both sides, so conditioning on it can only
        // destroy independences, and it is not something the training phase
        // could condition a penalty on anyway.
        let mut pool: Vec<NodeId> = targets.iter().filter(|t| *t != target).copied().collect();
        pool.push(label);
        pool.sort_by_key(|id| dag.name_of(*id).to_string());

        for size in 0..=max_cond_size.min(pool.len()) {
            for combo in combinations(&pool, size) {
                if d_separated(dag, subject, *target, &combo)? {
                    let mut given = combo.clone();
                    canonical_given_order(dag, &mut given);
                    constraints.push(IndependenceConstraint {
                        subject,
                        other: *target,
                        given,
                    });
                }
            }
        }
    }

    let set = ConstraintSet {
        graph: dag.clone(),
        constraints,
        selected: BTreeMap::new(),
    };
    let selected = choose_selected(&set)?;
    Ok(ConstraintSet { selected, ..set })
}

/// Lexicographic k-combinations of `pool` (which is already sorted).
fn combinations(pool: &[NodeId], k: usize) -> Vec<Vec<NodeId>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    fn rec(pool: &[NodeId], k: usize, start: usize, current: &mut Vec<NodeId>, out: &mut Vec<Vec<NodeId>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in start..pool.len() {
            current.push(pool[i]);
            rec(pool, k, i + 1, current, out);
            current.pop();
        }
    }
    rec(pool, k, 0, &mut current, &mut out);
    out
}

/// Picks the constraint to enforce for every attribute: prefer conditioning
/// sets containing the environment when the graph has one, then smaller
/// sets, then name order.
fn choose_selected(set: &ConstraintSet) -> Result<BTreeMap<String, usize>, GraphError> {
    let env = set
        .graph
        .nodes()
        .find(|(_, n)| n.role == NodeRole::Environment && n.observed)
        .map(|(id, _)| id);
    let mut selected = BTreeMap::new();
    for (id, node) in set.graph.nodes() {
        if node.role != NodeRole::Attribute || !node.observed {
            continue;
        }
        let mut best: Option<(usize, (bool, usize, Vec<String>))> = None;
        for (i, c) in set.constraints.iter().enumerate() {
            if c.other != id {
                continue;
            }
            let misses_env = match env {
                Some(e) => !c.given.contains(&e),
                None => false,
            };
            let names: Vec<String> = c
                .given
                .iter()
                .map(|g| set.graph.name_of(*g).to_string())
                .collect();
            let key = (misses_env, c.given.len(), names);
            if best.as_ref().map_or(true, |(_, k)| key < *k) {
                best = Some((i, key));
            }
        }
        if let Some((i, _)) = best {
            selected.insert(node.name.clone(), i);
        }
    }
    Ok(selected)
}

/// Constraints valid in *every* input set, matched across graphs by
/// `(attribute name, multiset of conditioning-node roles)`. Returns the
/// matching constraints of the first set, in its order.
///
/// The sets must come from graphs over the same attribute vocabulary;
/// anything else is a caller error, not an empty intersection.
pub fn constraint_intersection(
    sets: &[ConstraintSet],
) -> Result<Vec<IndependenceConstraint>, GraphError> {
    if sets.len() < 2 {
        return Err(GraphError::TooFewSets);
    }
    let vocab = sets[0].attribute_vocabulary();
    for s in &sets[1..] {
        let other = s.attribute_vocabulary();
        if other != vocab {
            return Err(GraphError::VocabularyMismatch(vocab, other));
        }
    }
    let keys: Vec<BTreeSet<(String, Vec<&'static str>)>> = sets
        .iter()
        .map(|s| s.constraints.iter().map(|c| s.role_key(c)).collect())
        .collect();
    Ok(sets[0]
        .constraints
        .iter()
        .filter(|c| {
            let k = sets[0].role_key(c);
            keys[1..].iter().all(|ks| ks.contains(&k))
        })
        .cloned()
        .collect())
}

// ───────────────────────── tests ─────────────────────────
