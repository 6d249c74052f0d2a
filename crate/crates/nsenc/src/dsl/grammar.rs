//! Context-free grammar over program architectures and the child relation of
//! the program graph: one rule firing on the leftmost nonterminal per edge.

use super::{AlgOp, Architecture, DslError, FeatureSchema, Node, NodeKind, ProgramType};

pub type SymbolId = usize;

#[derive(Debug, Clone)]
pub struct SymbolDecl {
    pub name: String,
    pub ty: ProgramType,
}

#[derive(Debug, Clone)]
pub enum RuleKind {
    MapAverage,
    Algebraic(AlgOp),
    IfThenElse,
    Affine { channels: Vec<usize> },
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub lhs: SymbolId,
    pub kind: RuleKind,
    /// Nonterminal symbols the fired node introduces as children.
    pub children: Vec<SymbolId>,
    pub label: String,
}

/// Typed production rules; rule declaration order is the tie-break order
/// everywhere downstream.
#[derive(Debug, Clone)]
pub struct Grammar {
    symbols: Vec<SymbolDecl>,
    rules: Vec<Rule>,
    start: SymbolId,
    /// Minimum depth of a complete subtree from each symbol.
    min_depth: Vec<usize>,
}

impl Grammar {
    pub fn new(
        symbols: Vec<SymbolDecl>,
        rules: Vec<Rule>,
        start: SymbolId,
        schema_dim: usize,
    ) -> Result<Self, DslError> {
        if start >= symbols.len() {
            return Err(DslError::Grammar("start symbol out of range".into()));
        }
        for r in &rules {
            if r.lhs >= symbols.len() {
                return Err(DslError::Grammar(format!("rule `{}`: bad lhs", r.label)));
            }
            for &c in &r.children {
                if c >= symbols.len() {
                    return Err(DslError::Grammar(format!("rule `{}`: bad child", r.label)));
                }
            }
            let lhs_ty = symbols[r.lhs].ty;
            match &r.kind {
                RuleKind::MapAverage => {
                    if lhs_ty != ProgramType::SeqToScalar
                        || r.children.len() != 1
                        || symbols[r.children[0]].ty != ProgramType::FrameToScalar
                    {
                        return Err(DslError::Grammar(format!(
                            "rule `{}`: mapavg maps a frame body to a sequence scalar",
                            r.label
                        )));
                    }
                }
                RuleKind::Algebraic(_) => {
                    if r.children.len() != 2
                        || r.children.iter().any(|&c| symbols[c].ty != lhs_ty)
                    {
                        return Err(DslError::Grammar(format!(
                            "rule `{}`: algebraic ops take two children of the lhs type",
                            r.label
                        )));
                    }
                }
                RuleKind::IfThenElse => {
                    if r.children.len() != 3
                        || r.children.iter().any(|&c| symbols[c].ty != lhs_ty)
                    {
                        return Err(DslError::Grammar(format!(
                            "rule `{}`: if-then-else takes three children of the lhs type",
                            r.label
                        )));
                    }
                }
                RuleKind::Affine { channels } => {
                    if lhs_ty != ProgramType::FrameToScalar || !r.children.is_empty() {
                        return Err(DslError::Grammar(format!(
                            "rule `{}`: affine is a frame-scope leaf",
                            r.label
                        )));
                    }
                    if channels.is_empty() {
                        return Err(DslError::Grammar(format!(
                            "rule `{}`: affine needs channels",
                            r.label
                        )));
                    }
                    for &c in channels {
                        if c >= schema_dim {
                            return Err(DslError::ChannelOutOfRange {
                                index: c,
                                dim: schema_dim,
                            });
                        }
                    }
                }
            }
        }

        let min_depth = compute_min_depths(&symbols, &rules)?;
        Ok(Grammar {
            symbols,
            rules,
            start,
            min_depth,
        })
    }

    /// The grammar used throughout: binary sequence classifiers built from
    /// mapavg over per-frame expressions, with one affine leaf per channel.
    pub fn sequence_classifier(schema: &FeatureSchema) -> Grammar {
        let symbols = vec![
            SymbolDecl {
                name: "S".into(),
                ty: ProgramType::SeqToScalar,
            },
            SymbolDecl {
                name: "F".into(),
                ty: ProgramType::FrameToScalar,
            },
        ];
        let (s, f) = (0, 1);
        let mut rules = vec![
            Rule {
                lhs: s,
                kind: RuleKind::MapAverage,
                children: vec![f],
                label: "S->mapavg(F)".into(),
            },
            Rule {
                lhs: s,
                kind: RuleKind::Algebraic(AlgOp::Add),
                children: vec![s, s],
                label: "S->add(S,S)".into(),
            },
            Rule {
                lhs: s,
                kind: RuleKind::Algebraic(AlgOp::Mul),
                children: vec![s, s],
                label: "S->mul(S,S)".into(),
            },
            Rule {
                lhs: s,
                kind: RuleKind::IfThenElse,
                children: vec![s, s, s],
                label: "S->if(S,S,S)".into(),
            },
        ];
        for (i, name) in schema.names().iter().enumerate() {
            rules.push(Rule {
                lhs: f,
                kind: RuleKind::Affine { channels: vec![i] },
                children: vec![],
                label: format!("F->affine[{name}]"),
            });
        }
        rules.push(Rule {
            lhs: f,
            kind: RuleKind::Algebraic(AlgOp::Add),
            children: vec![f, f],
            label: "F->add(F,F)".into(),
        });
        rules.push(Rule {
            lhs: f,
            kind: RuleKind::Algebraic(AlgOp::Mul),
            children: vec![f, f],
            label: "F->mul(F,F)".into(),
        });
        rules.push(Rule {
            lhs: f,
            kind: RuleKind::IfThenElse,
            children: vec![f, f, f],
            label: "F->if(F,F,F)".into(),
        });
        Grammar::new(symbols, rules, s, schema.dim()).expect("built-in grammar is valid")
    }

    pub fn start(&self) -> SymbolId {
        self.start
    }

    pub fn symbol(&self, id: SymbolId) -> &SymbolDecl {
        &self.symbols[id]
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn rules_for(&self, symbol: SymbolId) -> impl Iterator<Item = (usize, &Rule)> {
        self.rules
            .iter()
            .enumerate()
            .filter(move |(_, r)| r.lhs == symbol)
    }

    /// Minimum depth a complete subtree rooted at `symbol` occupies.
    pub fn min_completion_depth(&self, symbol: SymbolId) -> usize {
        self.min_depth[symbol]
    }

    /// Minimum total depth below and including a node fired by `rule`.
    pub fn rule_min_depth(&self, rule: &Rule) -> usize {
        1 + rule
            .children
            .iter()
            .map(|&c| self.min_depth[c])
            .max()
            .unwrap_or(0)
    }

    /// The node a rule fires, with fresh nonterminal children.
    pub fn instantiate(&self, rule: &Rule) -> Node {
        let children: Vec<Node> = rule
            .children
            .iter()
            .map(|&c| {
                Node::leaf(NodeKind::Nonterminal {
                    ty: self.symbols[c].ty,
                    symbol: c,
                })
            })
            .collect();
        let kind = match &rule.kind {
            RuleKind::MapAverage => NodeKind::MapAverage,
            RuleKind::Algebraic(op) => NodeKind::Algebraic(*op),
            RuleKind::IfThenElse => NodeKind::IfThenElse,
            RuleKind::Affine { channels } => NodeKind::AffineLib {
                channels: channels.clone(),
            },
        };
        Node::new(kind, children)
    }
}

fn compute_min_depths(symbols: &[SymbolDecl], rules: &[Rule]) -> Result<Vec<usize>, DslError> {
    const UNKNOWN: usize = usize::MAX;
    let mut depth = vec![UNKNOWN; symbols.len()];
    loop {
        let mut changed = false;
        for r in rules {
            if r.children.iter().any(|&c| depth[c] == UNKNOWN) {
                continue;
            }
            let candidate = 1 + r
                .children
                .iter()
                .map(|&c| depth[c])
                .max()
                .unwrap_or(0);
            if candidate < depth[r.lhs] {
                depth[r.lhs] = candidate;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    if let Some(i) = depth.iter().position(|&d| d == UNKNOWN) {
        return Err(DslError::Grammar(format!(
            "symbol `{}` admits no complete program",
            symbols[i].name
        )));
    }
    Ok(depth)
}

/// Every architecture reachable by firing one admissible rule on the
/// leftmost nonterminal. Rules whose minimum completion depth would exceed
/// `max_depth` are excluded; order follows rule declaration order.
pub fn enumerate_children(
    arch: &Architecture,
    grammar: &Grammar,
    max_depth: usize,
) -> Result<Vec<Architecture>, DslError> {
    let (node_id, symbol, firing_depth) = match arch.leftmost_nonterminal() {
        Some(found) => found,
        None => return Err(DslError::Complete),
    };
    let mut out = Vec::new();
    for (_, rule) in grammar.rules_for(symbol) {
        if firing_depth - 1 + grammar.rule_min_depth(rule) > max_depth {
            continue;
        }
        let replacement = grammar.instantiate(rule);
        out.push(arch.replace_node(node_id, replacement));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema4() -> FeatureSchema {
        FeatureSchema::new(
            vec!["x".into(), "y".into(), "final_x".into(), "final_y".into()],
            5,
        )
        .unwrap()
    }

    #[test]
    fn min_completion_depths() {
        let g = Grammar::sequence_classifier(&schema4());
        assert_eq!(g.min_completion_depth(1), 1); // F via affine
        assert_eq!(g.min_completion_depth(0), 2); // S via mapavg(affine)
    }

    #[test]
    fn start_children_match_brute_force_rule_scan() {
        let g = Grammar::sequence_classifier(&schema4());
        let arch = Architecture::empty(&g);
        for max_depth in 2..=4 {
            let children = enumerate_children(&arch, &g, max_depth).unwrap();
            // Independent scan: rules from the start symbol whose minimum
            // completed depth fits the bound.
            let expected = g
                .rules_for(g.start())
                .filter(|(_, r)| g.rule_min_depth(r) <= max_depth)
                .count();
            assert_eq!(children.len(), expected, "max_depth={max_depth}");
        }
        // At depth 2 only mapavg fits (algebraic/ite need depth 3).
        assert_eq!(enumerate_children(&arch, &g, 2).unwrap().len(), 1);
        assert_eq!(enumerate_children(&arch, &g, 3).unwrap().len(), 4);
    }

    #[test]
    fn complete_architecture_has_no_children() {
        let g = Grammar::sequence_classifier(&schema4());
        let arch = Architecture::empty(&g);
        let step1 = enumerate_children(&arch, &g, 2).unwrap().remove(0);
        let step2 = enumerate_children(&step1, &g, 2).unwrap().remove(0);
        assert!(step2.is_complete());
        assert!(matches!(
            enumerate_children(&step2, &g, 2),
            Err(DslError::Complete)
        ));
    }

    #[test]
    fn depth_bound_exhaustion_yields_empty_list() {
        let g = Grammar::sequence_classifier(&schema4());
        let arch = Architecture::empty(&g);
        // max_depth 1: no start rule can complete within depth 1.
        let children = enumerate_children(&arch, &g, 1).unwrap();
        assert!(children.is_empty());
    }

    #[test]
    fn children_are_well_typed_and_one_firing_deeper() {
        let g = Grammar::sequence_classifier(&schema4());
        let schema = schema4();
        let arch = Architecture::empty(&g);
        for child in enumerate_children(&arch, &g, 3).unwrap() {
            assert!(child.check(&schema).is_ok());
            assert_eq!(child.firings(), arch.firings() + 1);
        }
    }

    #[test]
    fn exhaustive_enumeration_matches_grammar_unrolling() {
        let g = Grammar::sequence_classifier(&schema4());
        let max_depth = 3;

        // Route A: repeatedly expand all children.
        let mut complete = 0usize;
        let mut frontier = vec![Architecture::empty(&g)];
        while let Some(a) = frontier.pop() {
            if a.is_complete() {
                complete += 1;
                continue;
            }
            frontier.extend(enumerate_children(&a, &g, max_depth).unwrap());
        }

        // Route B: count complete trees per symbol and depth budget directly
        // from the rule combinatorics.
        fn count(g: &Grammar, sym: SymbolId, budget: usize) -> u64 {
            if budget == 0 {
                return 0;
            }
            let mut total = 0u64;
            for (_, r) in g.rules_for(sym) {
                let mut prod = 1u64;
                for &c in &r.children {
                    prod *= count(g, c, budget - 1);
                    if prod == 0 {
                        break;
                    }
                }
                total += prod;
            }
            total
        }
        let expected = count(&g, g.start(), max_depth);
        // 4 channels: F(<=1)=4, F(<=2)=4+16+16+64=100,
        // S(<=3)=mapavg(100)+add(16)+mul(16)+if(64)=196.
        assert_eq!(expected, 196);
        assert_eq!(complete as u64, expected);
    }

    #[test]
    fn leftmost_expansion_prevents_duplicate_derivations() {
        let g = Grammar::sequence_classifier(&schema4());
        let max_depth = 3;
        let mut seen = Vec::<Architecture>::new();
        let mut frontier = vec![Architecture::empty(&g)];
        while let Some(a) = frontier.pop() {
            if a.is_complete() {
                assert!(
                    !seen.iter().any(|s| s.structural_eq(&a)),
                    "duplicate complete architecture"
                );
                seen.push(a);
                continue;
            }
            frontier.extend(enumerate_children(&a, &g, max_depth).unwrap());
        }
    }

    #[test]
    fn structural_cost_is_monotone_along_edges() {
        let g = Grammar::sequence_classifier(&schema4());
        let penalty = 0.01f64;
        let mut frontier = vec![Architecture::empty(&g)];
        while let Some(a) = frontier.pop() {
            if a.is_complete() {
                continue;
            }
            let parent_cost = crate::dsl::structural_cost(&a, penalty);
            for c in enumerate_children(&a, &g, 3).unwrap() {
                assert!(crate::dsl::structural_cost(&c, penalty) > parent_cost);
                frontier.push(c);
            }
        }
    }

    #[test]
    fn grammar_without_terminating_rules_is_rejected() {
        let symbols = vec![SymbolDecl {
            name: "S".into(),
            ty: ProgramType::SeqToScalar,
        }];
        let rules = vec![Rule {
            lhs: 0,
            kind: RuleKind::Algebraic(AlgOp::Add),
            children: vec![0, 0],
            label: "S->add(S,S)".into(),
        }];
        assert!(matches!(
            Grammar::new(symbols, rules, 0, 2),
            Err(DslError::Grammar(_))
        ));
    }
}
