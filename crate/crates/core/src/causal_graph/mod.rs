//! Causal DAGs with role annotations, d-separation, and constraint derivation.
//!
//! A [`CausalDag`] is a plain directed acyclic graph whose nodes carry a
//! [`NodeRole`] and an observed flag. Roles matter in two places only:
//! selection nodes are implicitly conditioned on in every d-separation query
//! (the data we ever see has already passed selection), and constraint
//! derivation walks the observed attribute/environment nodes.
//!
//! Graphs are either parsed from the line-oriented text format (see
//! [`parse_graph`]) or built from a [`ShiftSpec`] describing which kind of
//! distribution shift each attribute undergoes.

mod canonical;
mod constraints;
mod dsep;
mod parse;

pub use canonical::{build_canonical, Orientation, ShiftSpec, ShiftType};
pub use constraints::{
    constraint_intersection, derive_constraints, ConstraintSet, ConstraintView,
    IndependenceConstraint,
};
pub use dsep::d_separated;
pub use parse::{looks_like_graph, parse_graph, parse_shift_spec};

use crate::{Classify, FailureClass};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Index of a node within its graph. Stable across clones of the same graph;
/// meaningless across graphs (cross-graph identity goes through node names).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

/// What a node stands for in the data-generating process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    /// The latent feature that actually determines the label.
    CausalFeature,
    /// The feature vector handed to the model.
    ObservedFeature,
    /// The class label.
    Label,
    /// An auxiliary attribute (color, rotation, slab id, ...).
    Attribute,
    /// The environment/domain indicator.
    Environment,
    /// A latent common cause of label and attribute.
    Confounder,
    /// A selection indicator; every query conditions on these implicitly.
    Selection,
}

impl NodeRole {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeRole::CausalFeature => "causal_feature",
            NodeRole::ObservedFeature => "observed_feature",
            NodeRole::Label => "label",
            NodeRole::Attribute => "attribute",
            NodeRole::Environment => "environment",
            NodeRole::Confounder => "confounder",
            NodeRole::Selection => "selection",
        }
    }

    pub fn from_str_name(s: &str) -> Option<NodeRole> {
        Some(match s {
            "causal_feature" => NodeRole::CausalFeature,
            "observed_feature" => NodeRole::ObservedFeature,
            "label" => NodeRole::Label,
            "attribute" => NodeRole::Attribute,
            "environment" => NodeRole::Environment,
            "confounder" => NodeRole::Confounder,
            "selection" => NodeRole::Selection,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub role: NodeRole,
    pub observed: bool,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("duplicate node name `{0}`")]
    DuplicateNode(String),
    #[error("edge references unknown node `{0}`")]
    UnknownEdgeEndpoint(String),
    #[error("self-loop on node `{0}`")]
    SelfLoop(String),
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(String, String),
    #[error("graph contains a cycle through `{0}`")]
    Cycle(String),
    #[error("unknown node id {0:?}")]
    UnknownNode(NodeId),
    #[error("no node named `{0}`")]
    NoSuchName(String),
    #[error("d-separation query endpoints must differ")]
    QueryEndpointsEqual,
    #[error("query endpoint `{0}` may not appear in the conditioning set")]
    EndpointInConditioningSet(String),
    #[error("expected exactly one {role} node, found {count}")]
    RoleCardinality { role: &'static str, count: usize },
    #[error("max_cond_size must be at least 1, got {0}")]
    BadMaxCondSize(usize),
    #[error("constraint intersection needs at least two sets")]
    TooFewSets,
    #[error("constraint sets disagree on attribute vocabulary: {0:?} vs {1:?}")]
    VocabularyMismatch(Vec<String>, Vec<String>),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("shift spec: {0}")]
    BadShiftSpec(String),
}

impl Classify for GraphError {
    fn class(&self) -> FailureClass {
        // Everything in this module is a validation-class failure: a bad
        // graph, a bad query, or a bad spec file.
        FailureClass::Config
    }
}

/// A validated directed acyclic graph with role-annotated nodes.
///
/// Construction goes through [`CausalDag::new`], which rejects duplicate
/// names, dangling or duplicate edges, self-loops, and cycles, so a value of
/// this type is always structurally sound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CausalDag {
    nodes: Vec<Node>,
    edges: Vec<(NodeId, NodeId)>,
    parents: Vec<Vec<NodeId>>,
    children: Vec<Vec<NodeId>>,
}

impl CausalDag {
    /// Validates and builds a DAG from node and edge lists. Edges are
    /// `(parent, child)` pairs referencing node names.
    pub fn new(nodes: Vec<Node>, edges: Vec<(String, String)>) -> Result<CausalDag, GraphError> {
        let mut index: BTreeMap<String, NodeId> = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.name.clone(), NodeId(i)).is_some() {
                return Err(GraphError::DuplicateNode(n.name.clone()));
            }
        }
        let mut parents = vec![Vec::new(); nodes.len()];
        let mut children = vec![Vec::new(); nodes.len()];
        let mut id_edges = Vec::with_capacity(edges.len());
        let mut seen = BTreeSet::new();
        for (p, c) in &edges {
            let pid = *index
                .get(p)
                .ok_or_else(|| GraphError::UnknownEdgeEndpoint(p.clone()))?;
            let cid = *index
                .get(c)
                .ok_or_else(|| GraphError::UnknownEdgeEndpoint(c.clone()))?;
            if pid == cid {
                return Err(GraphError::SelfLoop(p.clone()));
            }
            if !seen.insert((pid, cid)) {
                return Err(GraphError::DuplicateEdge(p.clone(), c.clone()));
            }
            parents[cid.0].push(pid);
            children[pid.0].push(cid);
            id_edges.push((pid, cid));
        }
        let dag = CausalDag {
            nodes,
            edges: id_edges,
            parents,
            children,
        };
        dag.check_acyclic()?;
        Ok(dag)
    }

    /// Kahn's algorithm; names the first node on a cycle if one exists.
    fn check_acyclic(&self) -> Result<(), GraphError> {
        let mut indegree: Vec<usize> = self.parents.iter().map(|p| p.len()).collect();
        let mut queue: Vec<usize> = indegree
            .iter()
            .enumerate()
            .filter(|(_, d)| **d == 0)
            .map(|(i, _)| i)
            .collect();
        let mut removed = 0usize;
        while let Some(i) = queue.pop() {
            removed += 1;
            for c in &self.children[i] {
                indegree[c.0] -= 1;
                if indegree[c.0] == 0 {
                    queue.push(c.0);
                }
            }
        }
        if removed != self.nodes.len() {
            let stuck = indegree.iter().position(|d| *d > 0).unwrap();
            return Err(GraphError::Cycle(self.nodes[stuck].name.clone()));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> Result<&Node, GraphError> {
        self.nodes.get(id.0).ok_or(GraphError::UnknownNode(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &Node)> {
        self.nodes.iter().enumerate().map(|(i, n)| (NodeId(i), n))
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        &self.parents[id.0]
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.children[id.0]
    }

    pub fn id_of(&self, name: &str) -> Result<NodeId, GraphError> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .map(NodeId)
            .ok_or_else(|| GraphError::NoSuchName(name.to_string()))
    }

    pub fn name_of(&self, id: NodeId) -> &str {
        &self.nodes[id.0].name
    }

    /// Ids of all nodes with the given role.
    pub fn nodes_with_role(&self, role: NodeRole) -> Vec<NodeId> {
        self.nodes()
            .filter(|(_, n)| n.role == role)
            .map(|(id, _)| id)
            .collect()
    }

    /// The unique node with `role`, or a cardinality error.
    pub fn unique_role(&self, role: NodeRole) -> Result<NodeId, GraphError> {
        let ids = self.nodes_with_role(role);
        if ids.len() != 1 {
            return Err(GraphError::RoleCardinality {
                role: role.as_str(),
                count: ids.len(),
            });
        }
        Ok(ids[0])
    }

    /// Serializes to the line-oriented text format accepted by
    /// [`parse_graph`]. Nodes first (declaration order), then edges.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            out.push_str(&format!(
                "node {} role={} observed={}\n",
                n.name,
                n.role.as_str(),
                n.observed
            ));
        }
        for (p, c) in &self.edges {
            out.push_str(&format!("edge {} {}\n", self.name_of(*p), self.name_of(*c)));
        }
        out
    }
}
