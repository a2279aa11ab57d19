//! Symbolic context sets: what each causal layer can "see" at each position,
//! written as nested multisets of input symbols.
//!
//! `context(0, t) = token_t` and `context(l, t) = {context(l-1, s) : s <= t}`.
//! Two positions are indistinguishable to a stack of set processors exactly
//! when their context sets are equal.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};

/// A token or a multiset of context sets. Set members are kept sorted, so
/// derived equality is multiset equality.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ContextSet {
    Token(String),
    Set(Vec<ContextSet>),
}

impl ContextSet {
    pub fn set(mut members: Vec<ContextSet>) -> Self {
        members.sort();
        ContextSet::Set(members)
    }

    pub fn depth(&self) -> usize {
        match self {
            ContextSet::Token(_) => 0,
            ContextSet::Set(m) => 1 + m.iter().map(ContextSet::depth).max().unwrap_or(0),
        }
    }

    /// Number of members at the outermost level (1 for a bare token).
    pub fn len(&self) -> usize {
        match self {
            ContextSet::Token(_) => 1,
            ContextSet::Set(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, ContextSet::Set(m) if m.is_empty())
    }
}

impl fmt::Display for ContextSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContextSet::Token(t) => f.write_str(t),
            ContextSet::Set(m) => {
                f.write_str("{")?;
                for (i, c) in m.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str("}")
            }
        }
    }
}

impl Serialize for ContextSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Context sets for layers `0..=layers`; entry `[l][t]` is position `t + 1`.
pub fn context_layers<S: AsRef<str>>(tokens: &[S], layers: usize) -> Vec<Vec<ContextSet>> {
    let mut out = Vec::with_capacity(layers + 1);
    out.push(
        tokens
            .iter()
            .map(|t| ContextSet::Token(t.as_ref().to_string()))
            .collect::<Vec<_>>(),
    );
    for l in 1..=layers {
        let prev: &Vec<ContextSet> = &out[l - 1];
        let next = (0..tokens.len())
            .map(|t| ContextSet::set(prev[..=t].to_vec()))
            .collect();
        out.push(next);
    }
    out
}

/// Depth-`layers` context set at every position.
pub fn symbolic_context<S: AsRef<str>>(tokens: &[S], layers: usize) -> Result<Vec<ContextSet>> {
    if layers == 0 {
        return Err(Error::invalid("symbolic_context needs at least one layer"));
    }
    Ok(context_layers(tokens, layers).pop().expect("layers + 1 entries"))
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagramCell {
    pub position: usize,
    pub left: ContextSet,
    pub right: ContextSet,
    pub differs: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagramLayer {
    pub layer: usize,
    pub cells: Vec<DiagramCell>,
}

impl DiagramLayer {
    pub fn differing_positions(&self) -> Vec<usize> {
        self.cells.iter().filter(|c| c.differs).map(|c| c.position).collect()
    }
}

/// Side-by-side context sets of two sequences, layer 0 (inputs) upward.
#[derive(Debug, Clone, Serialize)]
pub struct Figure1Diagram {
    pub left: Vec<String>,
    pub right: Vec<String>,
    pub layers: Vec<DiagramLayer>,
}

impl Figure1Diagram {
    pub fn has_differences(&self) -> bool {
        self.layers.iter().any(|l| l.cells.iter().any(|c| c.differs))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for Figure1Diagram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "A = ({})", self.left.join(", "))?;
        writeln!(f, "B = ({})", self.right.join(", "))?;
        for layer in &self.layers {
            let rendered: Vec<(String, String)> = layer
                .cells
                .iter()
                .map(|c| (c.left.to_string(), c.right.to_string()))
                .collect();
            let wa = rendered.iter().map(|r| r.0.len()).max().unwrap_or(0).max(1);
            let wb = rendered.iter().map(|r| r.1.len()).max().unwrap_or(0).max(1);
            let title = if layer.layer == 0 {
                " (input)".to_string()
            } else {
                String::new()
            };
            writeln!(f)?;
            writeln!(f, "layer {}{title}", layer.layer)?;
            writeln!(f, "  pos  {:<wa$}  {:<wb$}", "A", "B")?;
            for (cell, (a, b)) in layer.cells.iter().zip(&rendered) {
                let mark = if cell.differs { "  <- differs" } else { "" };
                writeln!(f, "  {:<3}  {a:<wa$}  {b:<wb$}{mark}", cell.position)?;
            }
        }
        writeln!(f)?;
        if !self.has_differences() {
            return writeln!(f, "no differences");
        }
        for layer in &self.layers {
            let pos = layer.differing_positions();
            let list = if pos.is_empty() {
                "none".to_string()
            } else {
                pos.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(",")
            };
            writeln!(f, "layer {}: differs at positions {list}", layer.layer)?;
        }
        Ok(())
    }
}

pub fn emit_figure1_diagram<S: AsRef<str>>(tokens: &[S], permuted: &[S], layers: usize) -> Result<Figure1Diagram> {
    if tokens.len() != permuted.len() {
        return Err(Error::invalid(format!(
            "sequences have different lengths ({} vs {})",
            tokens.len(),
            permuted.len()
        )));
    }
    if tokens.is_empty() {
        return Err(Error::invalid("sequences must not be empty"));
    }
    let a = context_layers(tokens, layers);
    let b = context_layers(permuted, layers);
    let layers = a
        .into_iter()
        .zip(b)
        .enumerate()
        .map(|(layer, (la, lb))| DiagramLayer {
            layer,
            cells: la
                .into_iter()
                .zip(lb)
                .enumerate()
                .map(|(t, (left, right))| DiagramCell {
                    position: t + 1,
                    differs: left != right,
                    left,
                    right,
                })
                .collect(),
        })
        .collect();
    Ok(Figure1Diagram {
        left: tokens.iter().map(|s| s.as_ref().to_string()).collect(),
        right: permuted.iter().map(|s| s.as_ref().to_string()).collect(),
        layers,
    })
}
