//! Canonical graph construction from a shift specification.
//!
//! A [`ShiftSpec`] names the attributes of a dataset and says, for each one,
//! how its correlation with the label arises: not at all (independent), by
//! the label causing it, through a latent confounder, or through selection
//! during data collection. [`build_canonical`] realizes the spec as a DAG
//! over `X_c` (latent causal feature), `X` (model input), `Y` (label), the
//! attributes, and optionally the environment `E`, adding one latent
//! confounder or selection node per attribute that needs one.

use super::{CausalDag, GraphError, Node, NodeRole};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// How an attribute's correlation with the label comes about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftType {
    Independent,
    Causal,
    Confounded,
    Selected,
}

impl ShiftType {
    pub fn as_str(self) -> &'static str {
        match self {
            ShiftType::Independent => "independent",
            ShiftType::Causal => "causal",
            ShiftType::Confounded => "confounded",
            ShiftType::Selected => "selected",
        }
    }

    pub fn from_str_name(s: &str) -> Option<ShiftType> {
        Some(match s {
            "independent" => ShiftType::Independent,
            "causal" => ShiftType::Causal,
            "confounded" => ShiftType::Confounded,
            "selected" => ShiftType::Selected,
            _ => return None,
        })
    }
}

/// Direction of the edge between the causal feature and the label.
/// `Causal` draws `X_c -> Y`; `AntiCausal` draws `Y -> X_c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Causal,
    AntiCausal,
}

/// Declarative description of a dataset's attribute structure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// `(attribute name, shift type)`, in declaration order.
    pub attributes: Vec<(String, ShiftType)>,
    /// Whether the graph contains an environment node `E` with an edge into
    /// every attribute.
    pub include_env: bool,
    /// Adds `E -> X_c`, modelling environments whose causal-feature
    /// distribution itself drifts. Requires `include_env`.
    pub e_xc_edge: bool,
    pub orientation: Orientation,
}

impl ShiftSpec {
    /// One attribute, environment node included, no `E -> X_c` edge,
    /// causal orientation — the configuration the slab datasets use.
    pub fn single(attr: &str, shift: ShiftType) -> ShiftSpec {
        ShiftSpec {
            attributes: vec![(attr.to_string(), shift)],
            include_env: true,
            e_xc_edge: false,
            orientation: Orientation::Causal,
        }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if self.attributes.is_empty() {
            return Err(GraphError::BadShiftSpec(
                "at least one attribute is required".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for (name, _) in &self.attributes {
            if name.is_empty() {
                return Err(GraphError::BadShiftSpec("empty attribute name".into()));
            }
            for reserved in ["X_c", "X", "Y", "E"] {
                if name == reserved {
                    return Err(GraphError::BadShiftSpec(format!(
                        "attribute name `{name}` collides with a reserved node name"
                    )));
                }
            }
            if !seen.insert(name.clone()) {
                return Err(GraphError::BadShiftSpec(format!(
                    "duplicate attribute name `{name}`"
                )));
            }
        }
        if self.e_xc_edge && !self.include_env {
            return Err(GraphError::BadShiftSpec(
                "e_xc_edge requires include_env".into(),
            ));
        }
        Ok(())
    }
}

/// Builds the realized DAG for `spec`.
///
/// Fixed skeleton: `X_c -> Y` (flipped under anti-causal orientation),
/// `X_c -> X`, and `A -> X` plus `E -> A` (when the environment is included)
/// for every attribute `A`. Per shift type: independent adds nothing; causal
/// adds `Y -> A`; confounded adds a latent `C_A` with `C_A -> Y`, `C_A -> A`;
/// selected adds a selection node `S_A` with `Y -> S_A`, `A -> S_A`.
pub fn build_canonical(spec: &ShiftSpec) -> Result<CausalDag, GraphError> {
    spec.validate()?;
    let mut nodes = vec![
        Node {
            name: "X_c".into(),
            role: NodeRole::CausalFeature,
            observed: false,
        },
        Node {
            name: "X".into(),
            role: NodeRole::ObservedFeature,
            observed: true,
        },
        Node {
            name: "Y".into(),
            role: NodeRole::Label,
            observed: true,
        },
    ];
    let mut edges: Vec<(String, String)> = vec![
        match spec.orientation {
            Orientation::Causal => ("X_c".into(), "Y".into()),
            Orientation::AntiCausal => ("Y".into(), "X_c".into()),
        },
        ("X_c".into(), "X".into()),
    ];
    if spec.include_env {
        nodes.push(Node {
            name: "E".into(),
            role: NodeRole::Environment,
            observed: true,
        });
        if spec.e_xc_edge {
            edges.push(("E".into(), "X_c".into()));
        }
    }
    for (attr, shift) in &spec.attributes {
        nodes.push(Node {
            name: attr.clone(),
            role: NodeRole::Attribute,
            observed: true,
        });
        edges.push((attr.clone(), "X".into()));
        if spec.include_env {
            edges.push(("E".into(), attr.clone()));
        }
        match shift {
            ShiftType::Independent => {}
            ShiftType::Causal => edges.push(("Y".into(), attr.clone())),
            ShiftType::Confounded => {
                let c = format!("C_{attr}");
                nodes.push(Node {
                    name: c.clone(),
                    role: NodeRole::Confounder,
                    observed: false,
                });
                edges.push((c.clone(), "Y".into()));
                edges.push((c, attr.clone()));
            }
            ShiftType::Selected => {
                let s = format!("S_{attr}");
                nodes.push(Node {
                    name: s.clone(),
                    role: NodeRole::Selection,
                    observed: false,
                });
                edges.push(("Y".into(), s.clone()));
                edges.push((attr.clone(), s));
            }
        }
    }
    CausalDag::new(nodes, edges)
}
