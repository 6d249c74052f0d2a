//! Typed differentiable DSL over trajectories.
//!
//! Programs are trees of [`NodeKind`] built top-down by firing grammar rules
//! (see [`grammar`]). A program is *complete* when no [`NodeKind::Nonterminal`]
//! remains; partial programs are evaluated by standing in neural networks for
//! the holes. Real-valued parameters live outside the tree in a
//! [`ParameterStore`] so the same architecture can be retrained.

pub mod eval;
pub mod grammar;
pub mod parse;
pub mod print;

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::num::Real;

pub use eval::{evaluate, evaluate_logit, lift_frames, lift_program, LiftedProgram};
pub use grammar::{enumerate_children, Grammar, Rule, RuleKind, SymbolDecl, SymbolId};
pub use parse::parse_program;
pub use print::{pretty_print, to_text_lossy};

#[derive(Debug, Error)]
pub enum DslError {
    #[error("invalid feature schema: {0}")]
    SchemaInvalid(String),
    #[error("trajectory does not conform to schema: expected {expected_t}x{expected_dim}, got {got_t}x{got_dim}")]
    SchemaMismatch {
        expected_t: usize,
        expected_dim: usize,
        got_t: usize,
        got_dim: usize,
    },
    #[error("channel index {index} out of range for {dim} channels")]
    ChannelOutOfRange { index: usize, dim: usize },
    #[error("unknown feature name `{name}` at byte {pos}")]
    UnknownChannel { name: String, pos: usize },
    #[error("parse error at byte {pos}: {message}")]
    Parse { pos: usize, message: String },
    #[error("type error: {0}")]
    Type(String),
    #[error("architecture is incomplete")]
    Incomplete,
    #[error("architecture is complete (no nonterminals to expand)")]
    Complete,
    #[error("nonterminal node {0} has no stand-in network")]
    MissingStandin(NodeId),
    #[error("stand-ins must be empty for a complete architecture")]
    UnexpectedStandins,
    #[error("node {0} has no parameter entry")]
    MissingParams(NodeId),
    #[error("node {node} expects {expected} parameters, store has {got}")]
    ParamArity {
        node: NodeId,
        expected: usize,
        got: usize,
    },
    #[error("invalid grammar: {0}")]
    Grammar(String),
}

/// Names and length of the per-timestep feature channels.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FeatureSchema {
    names: Vec<String>,
    trajectory_length: usize,
}

impl FeatureSchema {
    pub fn new(names: Vec<String>, trajectory_length: usize) -> Result<Self, DslError> {
        if names.is_empty() {
            return Err(DslError::SchemaInvalid("need at least one channel".into()));
        }
        if trajectory_length == 0 {
            return Err(DslError::SchemaInvalid(
                "trajectory length must be at least 1".into(),
            ));
        }
        for (i, n) in names.iter().enumerate() {
            if !is_identifier(n) {
                return Err(DslError::SchemaInvalid(format!(
                    "channel name `{n}` is not an identifier"
                )));
            }
            if names[..i].contains(n) {
                return Err(DslError::SchemaInvalid(format!("duplicate channel `{n}`")));
            }
        }
        Ok(FeatureSchema {
            names,
            trajectory_length,
        })
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn trajectory_length(&self) -> usize {
        self.trajectory_length
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn channel(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn with_channel(&self, name: &str) -> Result<Self, DslError> {
        let mut names = self.names.clone();
        names.push(name.to_string());
        FeatureSchema::new(names, self.trajectory_length)
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Type signature of a program expression or nonterminal hole.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ProgramType {
    /// Consumes the whole trajectory, produces one scalar.
    SeqToScalar,
    /// Consumes one timestep, produces one scalar.
    FrameToScalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AlgOp {
    Add,
    Mul,
}

/// Stable identifier of a node within one architecture: its preorder index.
pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    /// The in-scope input: the trajectory at sequence scope, the current
    /// frame inside a `MapAverage` body.
    Input,
    Algebraic(AlgOp),
    /// Affine map over a channel subset of the current frame;
    /// parameterized by one weight per channel plus a bias.
    AffineLib { channels: Vec<usize> },
    /// Smooth gate `sigmoid(beta * cond) * then + (1 - sigmoid) * else`.
    IfThenElse,
    /// Channel gate: descendants see non-selected channels as zero.
    Select { channels: Vec<usize> },
    /// Average of the per-timestep body over the trajectory.
    MapAverage,
    /// Binary head: `logit = child - bias`. Lives at the root from the empty
    /// architecture on and is never produced by a grammar rule, so its bias
    /// realizes the printed decision threshold without costing a firing.
    Threshold,
    Nonterminal { ty: ProgramType, symbol: SymbolId },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub children: Vec<Node>,
}

impl Node {
    pub fn new(kind: NodeKind, children: Vec<Node>) -> Self {
        Node { kind, children }
    }

    pub fn leaf(kind: NodeKind) -> Self {
        Node {
            kind,
            children: Vec::new(),
        }
    }

    fn count_nonterminals(&self) -> usize {
        let own = matches!(self.kind, NodeKind::Nonterminal { .. }) as usize;
        own + self.children.iter().map(|c| c.count_nonterminals()).sum::<usize>()
    }
}

/// Discrete program architecture: the tree alpha, complete when it contains
/// no nonterminals.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub root: Node,
}

impl Architecture {
    pub fn new(root: Node) -> Self {
        Architecture { root }
    }

    /// The empty architecture: the binary head over the start nonterminal.
    pub fn empty(grammar: &Grammar) -> Self {
        let start = grammar.start();
        Architecture::new(Node::new(
            NodeKind::Threshold,
            vec![Node::leaf(NodeKind::Nonterminal {
                ty: grammar.symbol(start).ty,
                symbol: start,
            })],
        ))
    }

    pub fn is_complete(&self) -> bool {
        self.root.count_nonterminals() == 0
    }

    /// Count of grammar-rule applications: every node except the head, holes,
    /// and raw inputs.
    pub fn firings(&self) -> usize {
        fn walk(n: &Node) -> usize {
            let own = match n.kind {
                NodeKind::Threshold | NodeKind::Nonterminal { .. } | NodeKind::Input => 0,
                _ => 1,
            };
            own + n.children.iter().map(walk).sum::<usize>()
        }
        walk(&self.root)
    }

    /// Maximum rule-firing depth; the head does not count.
    pub fn depth(&self) -> usize {
        fn walk(n: &Node, level: usize) -> usize {
            let (own, next) = match n.kind {
                NodeKind::Threshold | NodeKind::Nonterminal { .. } | NodeKind::Input => (0, level),
                _ => (level + 1, level + 1),
            };
            n.children
                .iter()
                .map(|c| walk(c, next))
                .max()
                .unwrap_or(0)
                .max(own)
        }
        walk(&self.root, 0)
    }

    /// Preorder traversal with node ids.
    pub fn nodes(&self) -> Vec<(NodeId, &Node)> {
        let mut out = Vec::new();
        fn walk<'a>(n: &'a Node, out: &mut Vec<(NodeId, &'a Node)>) {
            out.push((out.len(), n));
            for c in &n.children {
                walk(c, out);
            }
        }
        walk(&self.root, &mut out);
        out
    }

    /// Leftmost nonterminal: `(id, symbol, firing depth of a rule applied
    /// there)`, or `None` when complete.
    pub fn leftmost_nonterminal(&self) -> Option<(NodeId, SymbolId, usize)> {
        fn walk(n: &Node, id: &mut NodeId, level: usize) -> Option<(NodeId, SymbolId, usize)> {
            let here = *id;
            *id += 1;
            let next = match n.kind {
                NodeKind::Nonterminal { symbol, .. } => return Some((here, symbol, level + 1)),
                NodeKind::Threshold | NodeKind::Input => level,
                _ => level + 1,
            };
            for c in &n.children {
                if let Some(found) = walk(c, id, next) {
                    return Some(found);
                }
            }
            None
        }
        let mut id = 0;
        walk(&self.root, &mut id, 0)
    }

    /// Replace the node with the given id, returning a new architecture.
    pub fn replace_node(&self, target: NodeId, replacement: Node) -> Architecture {
        fn walk(n: &Node, id: &mut NodeId, target: NodeId, replacement: &Node) -> Node {
            let here = *id;
            *id += 1;
            if here == target {
                // Advance the counter past the replaced subtree.
                *id += count_nodes(n) - 1;
                return replacement.clone();
            }
            let children = n
                .children
                .iter()
                .map(|c| walk(c, id, target, replacement))
                .collect();
            Node {
                kind: n.kind.clone(),
                children,
            }
        }
        fn count_nodes(n: &Node) -> usize {
            1 + n.children.iter().map(count_nodes).sum::<usize>()
        }
        let mut id = 0;
        Architecture::new(walk(&self.root, &mut id, target, &replacement))
    }

    /// Structural identity ignoring parameter values: equality of the trees.
    pub fn structural_eq(&self, other: &Architecture) -> bool {
        self.root == other.root
    }

    /// Parameterized nodes in preorder with their parameter vector lengths.
    pub fn parameterized_nodes(&self) -> Vec<(NodeId, usize)> {
        self.nodes()
            .into_iter()
            .filter_map(|(id, n)| match &n.kind {
                NodeKind::AffineLib { channels } => Some((id, channels.len() + 1)),
                NodeKind::Threshold => Some((id, 1)),
                _ => None,
            })
            .collect()
    }

    /// Nonterminal nodes in preorder.
    pub fn nonterminal_nodes(&self) -> Vec<(NodeId, ProgramType)> {
        self.nodes()
            .into_iter()
            .filter_map(|(id, n)| match n.kind {
                NodeKind::Nonterminal { ty, .. } => Some((id, ty)),
                _ => None,
            })
            .collect()
    }

    /// Structural validity against a schema: arities, scopes, channel ranges.
    pub fn check(&self, schema: &FeatureSchema) -> Result<(), DslError> {
        fn walk(n: &Node, seq_scope: bool, root: bool, dim: usize) -> Result<(), DslError> {
            let arity_err = |expected: usize| {
                Err(DslError::Type(format!(
                    "{:?} expects {} children, has {}",
                    n.kind,
                    expected,
                    n.children.len()
                )))
            };
            match &n.kind {
                NodeKind::Threshold => {
                    if !root {
                        return Err(DslError::Type("threshold head only allowed at root".into()));
                    }
                    if n.children.len() != 1 {
                        return arity_err(1);
                    }
                    walk(&n.children[0], true, false, dim)
                }
                NodeKind::MapAverage => {
                    if !seq_scope {
                        return Err(DslError::Type(
                            "mapavg must appear at sequence scope".into(),
                        ));
                    }
                    if n.children.len() != 1 {
                        return arity_err(1);
                    }
                    walk(&n.children[0], false, false, dim)
                }
                NodeKind::Algebraic(_) => {
                    if n.children.len() != 2 {
                        return arity_err(2);
                    }
                    for c in &n.children {
                        walk(c, seq_scope, false, dim)?;
                    }
                    Ok(())
                }
                NodeKind::IfThenElse => {
                    if n.children.len() != 3 {
                        return arity_err(3);
                    }
                    for c in &n.children {
                        walk(c, seq_scope, false, dim)?;
                    }
                    Ok(())
                }
                NodeKind::AffineLib { channels } => {
                    if !n.children.is_empty() {
                        return arity_err(0);
                    }
                    if seq_scope {
                        return Err(DslError::Type(
                            "affine reads a frame; wrap it in mapavg".into(),
                        ));
                    }
                    if channels.is_empty() {
                        return Err(DslError::Type("affine needs at least one channel".into()));
                    }
                    for &c in channels {
                        if c >= dim {
                            return Err(DslError::ChannelOutOfRange { index: c, dim });
                        }
                    }
                    Ok(())
                }
                NodeKind::Select { channels } => {
                    if n.children.len() != 1 {
                        return arity_err(1);
                    }
                    if channels.is_empty() {
                        return Err(DslError::Type("select needs at least one channel".into()));
                    }
                    for &c in channels {
                        if c >= dim {
                            return Err(DslError::ChannelOutOfRange { index: c, dim });
                        }
                    }
                    walk(&n.children[0], seq_scope, false, dim)
                }
                NodeKind::Input => {
                    if !n.children.is_empty() {
                        return arity_err(0);
                    }
                    Ok(())
                }
                NodeKind::Nonterminal { ty, .. } => {
                    if !n.children.is_empty() {
                        return arity_err(0);
                    }
                    let want_seq = matches!(ty, ProgramType::SeqToScalar);
                    if want_seq != seq_scope {
                        return Err(DslError::Type(format!(
                            "nonterminal signature {ty:?} does not match its scope"
                        )));
                    }
                    Ok(())
                }
            }
        }
        walk(&self.root, true, true, schema.dim())
    }
}

/// Penalty times the number of rule firings.
pub fn structural_cost<F: Real>(arch: &Architecture, penalty: F) -> F {
    penalty * F::of(arch.firings() as f64)
}

/// Real-valued program parameters, keyed by node id.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<F> {
    entries: BTreeMap<NodeId, Vec<F>>,
}

impl<F: Real> Default for ParameterStore<F> {
    fn default() -> Self {
        ParameterStore {
            entries: BTreeMap::new(),
        }
    }
}

impl<F: Real> ParameterStore<F> {
    /// Fresh parameters for the architecture: affine weights uniform in
    /// `[-1/sqrt(|S|), 1/sqrt(|S|)]`, biases zero.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let mut entries = BTreeMap::new();
        for (id, node) in arch.nodes() {
            match &node.kind {
                NodeKind::AffineLib { channels } => {
                    let bound = F::one() / F::of(channels.len() as f64).sqrt();
                    let mut v: Vec<F> = (0..channels.len())
                        .map(|_| {
                            let u = F::uniform_01(rng);
                            (u + u - F::one()) * bound
                        })
                        .collect();
                    v.push(F::zero());
                    entries.insert(id, v);
                }
                NodeKind::Threshold => {
                    entries.insert(id, vec![F::zero()]);
                }
                _ => {}
            }
        }
        ParameterStore { entries }
    }

    pub fn get(&self, id: NodeId) -> Option<&[F]> {
        self.entries.get(&id).map(|v| v.as_slice())
    }

    pub fn set(&mut self, id: NodeId, values: Vec<F>) {
        self.entries.insert(id, values);
    }

    pub fn entries(&self) -> impl Iterator<Item = (&NodeId, &Vec<F>)> {
        self.entries.iter()
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&NodeId, &mut Vec<F>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every parameterized node has exactly one entry of the right arity.
    pub fn validate(&self, arch: &Architecture) -> Result<(), DslError> {
        let wanted = arch.parameterized_nodes();
        for (id, arity) in &wanted {
            match self.entries.get(id) {
                None => return Err(DslError::MissingParams(*id)),
                Some(v) if v.len() != *arity => {
                    return Err(DslError::ParamArity {
                        node: *id,
                        expected: *arity,
                        got: v.len(),
                    })
                }
                _ => {}
            }
        }
        if self.entries.len() != wanted.len() {
            return Err(DslError::Type(
                "parameter store has entries for non-parameterized nodes".into(),
            ));
        }
        Ok(())
    }

    /// Round every parameter to `decimals` places (used by print/parse
    /// round-trips).
    pub fn rounded(&self, decimals: u32) -> Self {
        let scale = F::of(10f64.powi(decimals as i32));
        let entries = self
            .entries
            .iter()
            .map(|(id, v)| {
                (
                    *id,
                    v.iter()
                        .map(|&x| (x * scale).round() / scale)
                        .collect::<Vec<F>>(),
                )
            })
            .collect();
        ParameterStore { entries }
    }
}
