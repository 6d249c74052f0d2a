//! Differentiable program semantics.
//!
//! Evaluation records every node on the gradient tape, so program outputs
//! are differentiable in both the parameters and the input trajectory. The
//! if-then-else is the smooth gate `sigmoid(beta*c)*a + (1-sigmoid(beta*c))*b`;
//! nothing ever branches on data.

use std::collections::BTreeMap;

use super::{Architecture, DslError, FeatureSchema, Node, NodeId, NodeKind, ProgramType};
use crate::data::Trajectory;
use crate::grad::{Shape, Tape, Value};
use crate::nets::{Standin, StandinSet};
use crate::num::Real;

/// Program parameters and stand-ins lifted onto one tape.
pub struct LiftedProgram<'a, F: Real> {
    params: BTreeMap<NodeId, Value>,
    standins: BTreeMap<NodeId, (&'a Standin<F>, Vec<Value>)>,
}

impl<'a, F: Real> LiftedProgram<'a, F> {
    pub fn param_values(&self) -> Vec<Value> {
        self.params.values().copied().collect()
    }

    pub fn standin_values(&self) -> Vec<Value> {
        self.standins
            .values()
            .flat_map(|(_, vals)| vals.iter().copied())
            .collect()
    }

    /// Write tape gradients back into a store/standin-shaped layout:
    /// `(per-node gradients, per-standin per-array gradients)` in the same
    /// order as [`LiftedProgram::param_values`] / [`standin_values`].
    pub fn param_ids(&self) -> Vec<NodeId> {
        self.params.keys().copied().collect()
    }
}

/// Validate and lift `(arch, params, standins)` onto the tape.
///
/// Stand-ins must be empty exactly when the architecture is complete, and
/// must cover every nonterminal otherwise.
pub fn lift_program<'a, F: Real>(
    tape: &mut Tape<F>,
    arch: &Architecture,
    store: &super::ParameterStore<F>,
    standins: &'a StandinSet<F>,
    schema: &FeatureSchema,
) -> Result<LiftedProgram<'a, F>, DslError> {
    arch.check(schema)?;
    store.validate(arch)?;
    if arch.is_complete() && !standins.is_empty() {
        return Err(DslError::UnexpectedStandins);
    }

    let mut params = BTreeMap::new();
    for (id, _arity) in arch.parameterized_nodes() {
        let data = store.get(id).expect("validated above");
        params.insert(id, tape.leaf(data, Shape::vector(data.len())));
    }
    let mut lifted_standins = BTreeMap::new();
    for (id, _ty) in arch.nonterminal_nodes() {
        let standin = standins.get(id).ok_or(DslError::MissingStandin(id))?;
        let vals = standin.params().lift(tape);
        lifted_standins.insert(id, (standin, vals));
    }
    Ok(LiftedProgram {
        params,
        standins: lifted_standins,
    })
}

/// Check a trajectory against the schema and lift its frames (all channels).
pub fn lift_frames<F: Real>(
    tape: &mut Tape<F>,
    x: &Trajectory<F>,
    schema: &FeatureSchema,
) -> Result<Vec<Value>, DslError> {
    let dim = schema.dim();
    let t_len = schema.trajectory_length();
    if x.features.len() != dim * t_len {
        let got_t = if dim == 0 { 0 } else { x.features.len() / dim };
        return Err(DslError::SchemaMismatch {
            expected_t: t_len,
            expected_dim: dim,
            got_t,
            got_dim: if got_t == 0 { 0 } else { x.features.len() / got_t },
        });
    }
    Ok((0..t_len)
        .map(|t| tape.leaf(x.frame(t, dim), Shape::vector(dim)))
        .collect())
}

struct IndexedNode<'a> {
    node: &'a Node,
    subtree: usize,
}

fn index_nodes<'a>(arch: &'a Architecture) -> Vec<IndexedNode<'a>> {
    let mut out = Vec::new();
    fn walk<'a>(n: &'a Node, out: &mut Vec<IndexedNode<'a>>) -> usize {
        let slot = out.len();
        out.push(IndexedNode { node: n, subtree: 0 });
        let mut size = 1;
        for c in &n.children {
            size += walk(c, out);
        }
        out[slot].subtree = size;
        size
    }
    walk(&arch.root, &mut out);
    out
}

fn child_ids(nodes: &[IndexedNode<'_>], id: NodeId) -> Vec<NodeId> {
    let mut ids = Vec::with_capacity(nodes[id].node.children.len());
    let mut next = id + 1;
    for _ in 0..nodes[id].node.children.len() {
        ids.push(next);
        next += nodes[next].subtree;
    }
    ids
}

#[derive(Clone, Copy)]
enum Scope {
    Seq,
    Frame(usize),
}

struct EvalCtx<'a, 'b, F: Real> {
    tape: &'a mut Tape<F>,
    lifted: &'a LiftedProgram<'b, F>,
    frames: &'a [Value],
    beta: F,
    dim: usize,
}

/// Evaluate a (possibly partial) program to its scalar logit.
pub fn evaluate<F: Real>(
    tape: &mut Tape<F>,
    arch: &Architecture,
    lifted: &LiftedProgram<'_, F>,
    frames: &[Value],
    ite_temperature: F,
) -> Result<Value, DslError> {
    let nodes = index_nodes(arch);
    let dim = if frames.is_empty() {
        0
    } else {
        tape.shape(frames[0]).rows
    };
    let mut ctx = EvalCtx {
        tape,
        lifted,
        frames,
        beta: ite_temperature,
        dim,
    };
    eval_node(&mut ctx, &nodes, 0, Scope::Seq, &None)
}

fn eval_node<F: Real>(
    ctx: &mut EvalCtx<'_, '_, F>,
    nodes: &[IndexedNode<'_>],
    id: NodeId,
    scope: Scope,
    mask: &Option<Vec<bool>>,
) -> Result<Value, DslError> {
    let node = nodes[id].node;
    let children = child_ids(nodes, id);
    match &node.kind {
        NodeKind::Threshold => {
            let body = eval_node(ctx, nodes, children[0], Scope::Seq, mask)?;
            let bias = ctx.lifted.params[&id];
            Ok(ctx.tape.sub(body, bias))
        }
        NodeKind::MapAverage => {
            let t_len = ctx.frames.len();
            let mut acc: Option<Value> = None;
            for t in 0..t_len {
                let v = eval_node(ctx, nodes, children[0], Scope::Frame(t), mask)?;
                acc = Some(match acc {
                    Some(a) => ctx.tape.add(a, v),
                    None => v,
                });
            }
            let acc = acc.ok_or_else(|| DslError::Type("empty trajectory".into()))?;
            Ok(ctx.tape.scale(acc, F::one() / F::of(t_len as f64)))
        }
        NodeKind::Algebraic(op) => {
            let a = eval_node(ctx, nodes, children[0], scope, mask)?;
            let b = eval_node(ctx, nodes, children[1], scope, mask)?;
            Ok(match op {
                super::AlgOp::Add => ctx.tape.add(a, b),
                super::AlgOp::Mul => ctx.tape.mul(a, b),
            })
        }
        NodeKind::IfThenElse => {
            let c = eval_node(ctx, nodes, children[0], scope, mask)?;
            let a = eval_node(ctx, nodes, children[1], scope, mask)?;
            let b = eval_node(ctx, nodes, children[2], scope, mask)?;
            let scaled = ctx.tape.scale(c, ctx.beta);
            let gate = ctx.tape.sigmoid(scaled);
            let took_a = ctx.tape.mul(gate, a);
            let inv = ctx.tape.neg(gate);
            let inv = ctx.tape.add_const(inv, F::one());
            let took_b = ctx.tape.mul(inv, b);
            Ok(ctx.tape.add(took_a, took_b))
        }
        NodeKind::AffineLib { channels } => {
            let t = match scope {
                Scope::Frame(t) => t,
                Scope::Seq => {
                    return Err(DslError::Type(
                        "affine reads a frame; wrap it in mapavg".into(),
                    ))
                }
            };
            let frame = ctx.frames[t];
            let mut picked = Vec::with_capacity(channels.len());
            for &ch in channels {
                let allowed = mask.as_ref().map_or(true, |m| m[ch]);
                picked.push(if allowed {
                    ctx.tape.slice(frame, ch, 1)
                } else {
                    ctx.tape.scalar(F::zero())
                });
            }
            let selected = ctx.tape.concat(&picked);
            let pvec = ctx.lifted.params[&id];
            let w = ctx.tape.slice(pvec, 0, channels.len());
            let b = ctx.tape.slice(pvec, channels.len(), 1);
            let wx = ctx.tape.dot(w, selected);
            Ok(ctx.tape.add(wx, b))
        }
        NodeKind::Select { channels } => {
            let mut next = vec![false; ctx.dim];
            for &ch in channels {
                let allowed = mask.as_ref().map_or(true, |m| m[ch]);
                next[ch] = allowed;
            }
            eval_node(ctx, nodes, children[0], scope, &Some(next))
        }
        NodeKind::Input => Err(DslError::Type(
            "raw input is not a scalar; apply a library function".into(),
        )),
        NodeKind::Nonterminal { ty, .. } => {
            let (standin, vals) = ctx
                .lifted
                .standins
                .get(&id)
                .ok_or(DslError::MissingStandin(id))?;
            match (ty, scope) {
                (ProgramType::SeqToScalar, Scope::Seq) => {
                    let frames = masked_frames(ctx, mask);
                    Ok(standin.forward_seq(ctx.tape, vals, &frames))
                }
                (ProgramType::FrameToScalar, Scope::Frame(t)) => {
                    let frame = masked_frame(ctx, t, mask);
                    Ok(standin.forward_frame(ctx.tape, vals, frame))
                }
                _ => Err(DslError::Type(
                    "nonterminal signature does not match its scope".into(),
                )),
            }
        }
    }
}

fn masked_frame<F: Real>(ctx: &mut EvalCtx<'_, '_, F>, t: usize, mask: &Option<Vec<bool>>) -> Value {
    match mask {
        None => ctx.frames[t],
        Some(m) => {
            let gate: Vec<F> = m
                .iter()
                .map(|&keep| if keep { F::one() } else { F::zero() })
                .collect();
            let gate = ctx.tape.leaf(&gate, Shape::vector(ctx.dim));
            ctx.tape.mul(ctx.frames[t], gate)
        }
    }
}

fn masked_frames<F: Real>(ctx: &mut EvalCtx<'_, '_, F>, mask: &Option<Vec<bool>>) -> Vec<Value> {
    (0..ctx.frames.len())
        .map(|t| masked_frame(ctx, t, mask))
        .collect()
}

/// Validate, evaluate on a throwaway tape, and return the numeric logit.
pub fn evaluate_logit<F: Real>(
    arch: &Architecture,
    store: &super::ParameterStore<F>,
    standins: &StandinSet<F>,
    x: &Trajectory<F>,
    schema: &FeatureSchema,
    ite_temperature: F,
) -> Result<F, DslError> {
    let mut tape = Tape::new();
    let frames = lift_frames(&mut tape, x, schema)?;
    let lifted = lift_program(&mut tape, arch, store, standins, schema)?;
    let out = evaluate(&mut tape, arch, &lifted, &frames, ite_temperature)?;
    Ok(tape.scalar_value(out))
}
