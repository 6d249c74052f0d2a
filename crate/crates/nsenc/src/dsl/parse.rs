//! Parser for the program text format emitted by [`print`](super::print).
//!
//! Recursive descent over a small token stream; errors carry the byte
//! position of the offending token.

use super::{
    AlgOp, Architecture, DslError, FeatureSchema, Grammar, Node, NodeKind, ParameterStore,
};
use crate::num::Real;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Dot,
    Gt,
    Eq,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    pos: usize,
}

fn tokenize(text: &str) -> Result<Vec<Spanned>, DslError> {
    let bytes = text.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let pos = i;
        match c {
            ' ' | '\t' | '\n' | '\r' => {
                i += 1;
            }
            '(' => {
                toks.push(Spanned { tok: Tok::LParen, pos });
                i += 1;
            }
            ')' => {
                toks.push(Spanned { tok: Tok::RParen, pos });
                i += 1;
            }
            '[' => {
                toks.push(Spanned { tok: Tok::LBracket, pos });
                i += 1;
            }
            ']' => {
                toks.push(Spanned { tok: Tok::RBracket, pos });
                i += 1;
            }
            ',' => {
                toks.push(Spanned { tok: Tok::Comma, pos });
                i += 1;
            }
            '.' => {
                toks.push(Spanned { tok: Tok::Dot, pos });
                i += 1;
            }
            '>' => {
                toks.push(Spanned { tok: Tok::Gt, pos });
                i += 1;
            }
            '=' => {
                toks.push(Spanned { tok: Tok::Eq, pos });
                i += 1;
            }
            '-' | '0'..='9' => {
                let start = i;
                if c == '-' {
                    i += 1;
                    if i >= bytes.len() || !(bytes[i] as char).is_ascii_digit() {
                        return Err(DslError::Parse {
                            pos,
                            message: "dangling `-`".into(),
                        });
                    }
                }
                while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len()
                    && bytes[i] as char == '.'
                    && i + 1 < bytes.len()
                    && (bytes[i + 1] as char).is_ascii_digit()
                {
                    i += 1;
                    while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                        i += 1;
                    }
                }
                let s = &text[start..i];
                let v: f64 = s.parse().map_err(|_| DslError::Parse {
                    pos,
                    message: format!("bad number `{s}`"),
                })?;
                toks.push(Spanned { tok: Tok::Num(v), pos });
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len() {
                    let c = bytes[i] as char;
                    if c.is_ascii_alphanumeric() || c == '_' {
                        i += 1;
                    } else {
                        break;
                    }
                }
                toks.push(Spanned {
                    tok: Tok::Ident(text[start..i].to_string()),
                    pos,
                });
            }
            other => {
                return Err(DslError::Parse {
                    pos,
                    message: format!("unexpected character `{other}`"),
                })
            }
        }
    }
    Ok(toks)
}

/// Node tree with parameters still attached, split apart after parsing.
struct Parsed {
    kind: NodeKind,
    params: Vec<f64>,
    children: Vec<Parsed>,
}

struct Parser<'a> {
    toks: &'a [Spanned],
    at: usize,
    schema: &'a FeatureSchema,
    len: usize,
}

impl<'a> Parser<'a> {
    fn pos(&self) -> usize {
        self.toks.get(self.at).map(|t| t.pos).unwrap_or(self.len)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, DslError> {
        Err(DslError::Parse {
            pos: self.pos(),
            message: message.into(),
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|t| &t.tok)
    }

    fn next(&mut self) -> Option<&Tok> {
        let t = self.toks.get(self.at).map(|t| &t.tok);
        self.at += 1;
        t
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), DslError> {
        if self.peek() == Some(&tok) {
            self.at += 1;
            Ok(())
        } else {
            self.err(format!("expected {what}"))
        }
    }

    fn expect_ident(&mut self, word: &str) -> Result<(), DslError> {
        match self.peek() {
            Some(Tok::Ident(s)) if s == word => {
                self.at += 1;
                Ok(())
            }
            _ => self.err(format!("expected `{word}`")),
        }
    }

    fn number(&mut self) -> Result<f64, DslError> {
        match self.peek() {
            Some(Tok::Num(v)) => {
                let v = *v;
                self.at += 1;
                Ok(v)
            }
            _ => self.err("expected a number"),
        }
    }

    fn channel_list(&mut self) -> Result<Vec<usize>, DslError> {
        self.expect(Tok::LBracket, "`[`")?;
        let mut channels = Vec::new();
        loop {
            let pos = self.pos();
            match self.next() {
                Some(Tok::Ident(name)) => {
                    let name = name.clone();
                    match self.schema.channel(&name) {
                        Some(c) => channels.push(c),
                        None => return Err(DslError::UnknownChannel { name, pos }),
                    }
                }
                _ => {
                    return Err(DslError::Parse {
                        pos,
                        message: "expected a feature name".into(),
                    })
                }
            }
            match self.peek() {
                Some(Tok::Comma) => {
                    self.at += 1;
                }
                Some(Tok::RBracket) => {
                    self.at += 1;
                    break;
                }
                _ => return self.err("expected `,` or `]`"),
            }
        }
        Ok(channels)
    }

    /// `1[> c](expr)` or a bare expression.
    fn program(&mut self) -> Result<Parsed, DslError> {
        if let Some(Tok::Num(v)) = self.peek() {
            if *v == 1.0 {
                self.at += 1;
                self.expect(Tok::LBracket, "`[`")?;
                self.expect(Tok::Gt, "`>`")?;
                let c = self.number()?;
                self.expect(Tok::RBracket, "`]`")?;
                self.expect(Tok::LParen, "`(`")?;
                let body = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                return Ok(Parsed {
                    kind: NodeKind::Threshold,
                    params: vec![c],
                    children: vec![body],
                });
            }
        }
        self.expr()
    }

    fn expr(&mut self) -> Result<Parsed, DslError> {
        let pos = self.pos();
        let head = match self.next() {
            Some(Tok::Ident(s)) => s.clone(),
            _ => {
                return Err(DslError::Parse {
                    pos,
                    message: "expected an expression".into(),
                })
            }
        };
        match head.as_str() {
            "x" => Ok(Parsed {
                kind: NodeKind::Input,
                params: vec![],
                children: vec![],
            }),
            "xt" => Ok(Parsed {
                kind: NodeKind::Input,
                params: vec![],
                children: vec![],
            }),
            "mapavg" => {
                self.expect(Tok::LParen, "`(`")?;
                self.expect_ident("fun")?;
                self.expect_ident("xt")?;
                self.expect(Tok::Dot, "`.`")?;
                let body = self.expr()?;
                self.expect(Tok::Comma, "`,`")?;
                self.expect_ident("x")?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(Parsed {
                    kind: NodeKind::MapAverage,
                    params: vec![],
                    children: vec![body],
                })
            }
            "add" | "mul" => {
                self.expect(Tok::LParen, "`(`")?;
                let a = self.expr()?;
                self.expect(Tok::Comma, "`,`")?;
                let b = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                let op = if head == "add" { AlgOp::Add } else { AlgOp::Mul };
                Ok(Parsed {
                    kind: NodeKind::Algebraic(op),
                    params: vec![],
                    children: vec![a, b],
                })
            }
            "if" => {
                self.expect(Tok::LParen, "`(`")?;
                let c = self.expr()?;
                self.expect(Tok::Comma, "`,`")?;
                let a = self.expr()?;
                self.expect(Tok::Comma, "`,`")?;
                let b = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(Parsed {
                    kind: NodeKind::IfThenElse,
                    params: vec![],
                    children: vec![c, a, b],
                })
            }
            "select" => {
                let channels = self.channel_list()?;
                self.expect(Tok::LParen, "`(`")?;
                let child = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(Parsed {
                    kind: NodeKind::Select { channels },
                    params: vec![],
                    children: vec![child],
                })
            }
            "affine" => {
                let channels = self.channel_list()?;
                self.expect(Tok::LParen, "`(`")?;
                self.expect_ident("w")?;
                self.expect(Tok::Eq, "`=`")?;
                self.expect(Tok::LBracket, "`[`")?;
                let mut weights = Vec::new();
                loop {
                    weights.push(self.number()?);
                    match self.peek() {
                        Some(Tok::Comma) => {
                            self.at += 1;
                        }
                        Some(Tok::RBracket) => {
                            self.at += 1;
                            break;
                        }
                        _ => return self.err("expected `,` or `]`"),
                    }
                }
                self.expect(Tok::Comma, "`,`")?;
                self.expect_ident("b")?;
                self.expect(Tok::Eq, "`=`")?;
                let bias = self.number()?;
                self.expect(Tok::RParen, "`)`")?;
                self.expect(Tok::LParen, "`(`")?;
                self.expect_ident("xt")?;
                self.expect(Tok::RParen, "`)`")?;
                if weights.len() != channels.len() {
                    return Err(DslError::Parse {
                        pos,
                        message: format!(
                            "affine has {} channels but {} weights",
                            channels.len(),
                            weights.len()
                        ),
                    });
                }
                let mut params = weights;
                params.push(bias);
                Ok(Parsed {
                    kind: NodeKind::AffineLib { channels },
                    params,
                    children: vec![],
                })
            }
            other => Err(DslError::Parse {
                pos,
                message: format!("unknown construct `{other}`"),
            }),
        }
    }
}

/// Parse program text against a schema. The grammar supplies the typing
/// context (the whole DSL is accepted, not just rule-derivable trees).
pub fn parse_program<F: Real>(
    text: &str,
    _grammar: &Grammar,
    schema: &FeatureSchema,
) -> Result<(Architecture, ParameterStore<F>), DslError> {
    let toks = tokenize(text)?;
    let mut parser = Parser {
        toks: &toks,
        at: 0,
        schema,
        len: text.len(),
    };
    let parsed = parser.program()?;
    if parser.at != toks.len() {
        return parser.err("trailing input after program");
    }

    fn build(p: Parsed, store: &mut Vec<(NodeKind, Vec<f64>)>) -> Node {
        store.push((p.kind.clone(), p.params.clone()));
        let children = p.children.into_iter().map(|c| build(c, store)).collect();
        Node {
            kind: p.kind,
            children,
        }
    }
    // Preorder: collecting during the same walk as construction keeps ids
    // aligned with Architecture::nodes().
    let mut flat: Vec<(NodeKind, Vec<f64>)> = Vec::new();
    let root = build(parsed, &mut flat);
    let arch = Architecture::new(root);
    arch.check(schema)?;

    let mut store = ParameterStore::default();
    for (id, (_, params)) in flat.into_iter().enumerate() {
        if !params.is_empty() {
            store.set(id, params.into_iter().map(F::of).collect());
        }
    }
    store.validate(&arch)?;
    Ok((arch, store))
}
