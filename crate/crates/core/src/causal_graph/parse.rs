//! Text formats: graph files and shift-spec files.
//!
//! Graph files are line oriented; `#` starts a comment, blank lines are
//! ignored:
//!
//! ```text
//! node X_c role=causal_feature observed=false
//! node Y role=label observed=true
//! edge X_c Y
//! ```
//!
//! Shift-spec files are key-value lines:
//!
//! ```text
//! attribute color=causal
//! attribute rotation=independent
//! include_env=true
//! e_xc_edge=false
//! orientation=causal
//! ```
//!
//! `include_env` defaults to true, `e_xc_edge` to false, and `orientation`
//! to causal, so a minimal spec is just its `attribute` lines.

use super::{CausalDag, GraphError, Node, NodeRole, Orientation, ShiftSpec, ShiftType};

fn err(line: usize, message: impl Into<String>) -> GraphError {
    GraphError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool, GraphError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(err(line, format!("{key} must be true or false, got `{value}`"))),
    }
}

/// Lines worth parsing: `(1-based line number, trimmed content)`.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Parses the line-oriented graph format.
pub fn parse_graph(text: &str) -> Result<CausalDag, GraphError> {
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for (lineno, line) in content_lines(text) {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("node") => {
                let name = parts
                    .next()
                    .ok_or_else(|| err(lineno, "node line needs a name"))?
                    .to_string();
                let mut role = None;
                let mut observed = None;
                for tok in parts {
                    let (key, value) = tok
                        .split_once('=')
                        .ok_or_else(|| err(lineno, format!("expected key=value, got `{tok}`")))?;
                    match key {
                        "role" => {
                            role = Some(NodeRole::from_str_name(value).ok_or_else(|| {
                                err(lineno, format!("unknown role `{value}`"))
                            })?)
                        }
                        "observed" => observed = Some(parse_bool(lineno, "observed", value)?),
                        _ => return Err(err(lineno, format!("unknown node key `{key}`"))),
                    }
                }
                nodes.push(Node {
                    name,
                    role: role.ok_or_else(|| err(lineno, "node line needs role=..."))?,
                    observed: observed
                        .ok_or_else(|| err(lineno, "node line needs observed=..."))?,
                });
            }
            Some("edge") => {
                let p = parts
                    .next()
                    .ok_or_else(|| err(lineno, "edge line needs two node names"))?;
                let c = parts
                    .next()
                    .ok_or_else(|| err(lineno, "edge line needs two node names"))?;
                if parts.next().is_some() {
                    return Err(err(lineno, "edge line has trailing tokens"));
                }
                edges.push((p.to_string(), c.to_string()));
            }
            Some(other) => {
                return Err(err(lineno, format!("expected `node` or `edge`, got `{other}`")))
            }
            None => unreachable!("blank lines are filtered"),
        }
    }
    if nodes.is_empty() {
        return Err(err(0, "graph file declares no nodes"));
    }
    CausalDag::new(nodes, edges)
}

/// Parses the shift-spec key-value format.
pub fn parse_shift_spec(text: &str) -> Result<ShiftSpec, GraphError> {
    let mut spec = ShiftSpec {
        attributes: Vec::new(),
        include_env: true,
        e_xc_edge: false,
        orientation: Orientation::Causal,
    };
    for (lineno, line) in content_lines(text) {
        if let Some(rest) = line.strip_prefix("attribute ") {
            let (name, shift) = rest
                .trim()
                .split_once('=')
                .ok_or_else(|| err(lineno, "attribute line must be `attribute <name>=<shift>`"))?;
            let shift = ShiftType::from_str_name(shift.trim()).ok_or_else(|| {
                err(lineno, format!("unknown shift type `{}`", shift.trim()))
            })?;
            spec.attributes.push((name.trim().to_string(), shift));
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(lineno, format!("expected key=value, got `{line}`")))?;
        match key.trim() {
            "include_env" => spec.include_env = parse_bool(lineno, "include_env", value.trim())?,
            "e_xc_edge" => spec.e_xc_edge = parse_bool(lineno, "e_xc_edge", value.trim())?,
            "orientation" => {
                spec.orientation = match value.trim() {
                    "causal" => Orientation::Causal,
                    "anti_causal" => Orientation::AntiCausal,
                    other => {
                        return Err(err(
                            lineno,
                            format!("orientation must be causal or anti_causal, got `{other}`"),
                        ))
                    }
                }
            }
            other => return Err(err(lineno, format!("unknown spec key `{other}`"))),
        }
    }
    spec.validate()?;
    Ok(spec)
}

/// True when the text looks like a graph file rather than a shift spec.
/// Used by the CLI, which accepts either in the same flag.
pub fn looks_like_graph(text: &str) -> bool {
    content_lines(text).any(|(_, l)| l.starts_with("node ") || l.starts_with("edge "))
}
