//! Human-readable program rendering.
//!
//! Complete programs print deterministically with weights rounded to two
//! decimals, e.g.
//!
//! ```text
//! 1[> -7.02](mapavg(fun xt. mul(affine[speed](w=[-6.28], b=-8.28)(xt),
//!            affine[nose_tail](w=[0.04], b=-9.06)(xt)), x))
//! ```
//!
//! (on one line). [`parse`](super::parse) reads the same syntax back.

use super::{AlgOp, Architecture, DslError, FeatureSchema, Node, NodeId, NodeKind, ProgramType};
use crate::num::Real;

pub(crate) const PRINT_DECIMALS: u32 = 2;

fn fmt_weight<F: Real>(v: F) -> String {
    let s = format!("{:.prec$}", v.as_f64(), prec = PRINT_DECIMALS as usize);
    if s == format!("-0.{}", "0".repeat(PRINT_DECIMALS as usize)) {
        s[1..].to_string()
    } else {
        s
    }
}

/// Deterministic text for a complete program; round-trips through
/// [`super::parse_program`] at the printed precision.
pub fn pretty_print<F: Real>(
    arch: &Architecture,
    store: &super::ParameterStore<F>,
    schema: &FeatureSchema,
) -> Result<String, DslError> {
    if !arch.is_complete() {
        return Err(DslError::Incomplete);
    }
    store.validate(arch)?;
    let mut out = String::new();
    let mut id = 0;
    render(&arch.root, &mut id, store, schema, true, &mut out, false)?;
    Ok(out)
}

/// Lossy text that also renders nonterminals (`?S`, `?F`) and skips
/// validation; used by synthesis logs.
pub fn to_text_lossy<F: Real>(
    arch: &Architecture,
    store: &super::ParameterStore<F>,
    schema: &FeatureSchema,
) -> String {
    let mut out = String::new();
    let mut id = 0;
    // Rendering only fails on unknown params; tolerate by best effort.
    let _ = render(&arch.root, &mut id, store, schema, true, &mut out, true);
    out
}

fn render<F: Real>(
    node: &Node,
    id: &mut NodeId,
    store: &super::ParameterStore<F>,
    schema: &FeatureSchema,
    seq_scope: bool,
    out: &mut String,
    lossy: bool,
) -> Result<(), DslError> {
    let here = *id;
    *id += 1;
    let params = |n: usize| -> Result<Vec<F>, DslError> {
        match store.get(here) {
            Some(v) if v.len() == n => Ok(v.to_vec()),
            Some(v) => Err(DslError::ParamArity {
                node: here,
                expected: n,
                got: v.len(),
            }),
            None if lossy => Ok(vec![F::zero(); n]),
            None => Err(DslError::MissingParams(here)),
        }
    };
    match &node.kind {
        NodeKind::Threshold => {
            let p = params(1)?;
            out.push_str(&format!("1[> {}](", fmt_weight(p[0])));
            render(&node.children[0], id, store, schema, true, out, lossy)?;
            out.push(')');
        }
        NodeKind::MapAverage => {
            out.push_str("mapavg(fun xt. ");
            render(&node.children[0], id, store, schema, false, out, lossy)?;
            out.push_str(", x)");
        }
        NodeKind::Algebraic(op) => {
            out.push_str(match op {
                AlgOp::Add => "add(",
                AlgOp::Mul => "mul(",
            });
            render(&node.children[0], id, store, schema, seq_scope, out, lossy)?;
            out.push_str(", ");
            render(&node.children[1], id, store, schema, seq_scope, out, lossy)?;
            out.push(')');
        }
        NodeKind::IfThenElse => {
            out.push_str("if(");
            for (i, c) in node.children.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                render(c, id, store, schema, seq_scope, out, lossy)?;
            }
            out.push(')');
        }
        NodeKind::AffineLib { channels } => {
            let p = params(channels.len() + 1)?;
            let names: Vec<&str> = channels
                .iter()
                .map(|&c| schema.names().get(c).map(|s| s.as_str()).unwrap_or("?"))
                .collect();
            let weights: Vec<String> = p[..channels.len()]
                .iter()
                .map(|&w| fmt_weight(w))
                .collect();
            out.push_str(&format!(
                "affine[{}](w=[{}], b={})(xt)",
                names.join(", "),
                weights.join(", "),
                fmt_weight(p[channels.len()]),
            ));
        }
        NodeKind::Select { channels } => {
            let names: Vec<&str> = channels
                .iter()
                .map(|&c| schema.names().get(c).map(|s| s.as_str()).unwrap_or("?"))
                .collect();
            out.push_str(&format!("select[{}](", names.join(", ")));
            render(&node.children[0], id, store, schema, seq_scope, out, lossy)?;
            out.push(')');
        }
        NodeKind::Input => out.push_str(if seq_scope { "x" } else { "xt" }),
        NodeKind::Nonterminal { ty, .. } => {
            if !lossy {
                return Err(DslError::Incomplete);
            }
            out.push_str(match ty {
                ProgramType::SeqToScalar => "?S",
                ProgramType::FrameToScalar => "?F",
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{Grammar, ParameterStore};

    fn schema() -> FeatureSchema {
        FeatureSchema::new(vec!["speed".into(), "nose_tail".into()], 4).unwrap()
    }

    #[test]
    fn figure_shape_program_prints_in_figure_style() {
        let arch = Architecture::new(Node::new(
            NodeKind::Threshold,
            vec![Node::new(
                NodeKind::MapAverage,
                vec![Node::new(
                    NodeKind::Algebraic(AlgOp::Mul),
                    vec![
                        Node::leaf(NodeKind::AffineLib { channels: vec![0] }),
                        Node::leaf(NodeKind::AffineLib { channels: vec![1] }),
                    ],
                )],
            )],
        ));
        let mut store = ParameterStore::<f64>::default();
        store.set(0, vec![-7.02]);
        store.set(3, vec![-6.28, -8.28]);
        store.set(4, vec![0.042, -9.06]);
        let text = pretty_print(&arch, &store, &schema()).unwrap();
        assert_eq!(
            text,
            "1[> -7.02](mapavg(fun xt. mul(affine[speed](w=[-6.28], b=-8.28)(xt), \
             affine[nose_tail](w=[0.04], b=-9.06)(xt)), x))"
        );
    }

    #[test]
    fn input_only_program_prints_the_input_symbol() {
        let arch = Architecture::new(Node::leaf(NodeKind::Input));
        let store = ParameterStore::<f64>::default();
        assert_eq!(pretty_print(&arch, &store, &schema()).unwrap(), "x");
    }

    #[test]
    fn incomplete_architecture_does_not_pretty_print() {
        let s = schema();
        let grammar = Grammar::sequence_classifier(&s);
        let arch = Architecture::empty(&grammar);
        let mut store = ParameterStore::<f64>::default();
        store.set(0, vec![0.5]);
        assert!(matches!(
            pretty_print(&arch, &store, &s),
            Err(DslError::Incomplete)
        ));
        assert_eq!(to_text_lossy(&arch, &store, &s), "1[> 0.50](?S)");
    }

    #[test]
    fn negative_zero_is_normalized() {
        assert_eq!(fmt_weight(-0.0001f64), "0.00");
        assert_eq!(fmt_weight(-0.006f64), "-0.01");
    }
}
