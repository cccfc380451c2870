//! Symbolic loss expressions over `(y, f)`.
//!
//! Trees are stored as a flat prefix sequence of [`Symbol`]s. A subtree is a
//! contiguous slice, which keeps crossover and mutation to a splice.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::primitive::Primitive;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Symbol {
    Op(Primitive),
    /// The model prediction `f`.
    Pred,
    /// The ground-truth target `y`.
    Target,
    One,
    NegOne,
}

impl Symbol {
    pub const TERMINALS: [Symbol; 4] = [Symbol::Pred, Symbol::Target, Symbol::One, Symbol::NegOne];

    pub fn arity(self) -> usize {
        match self {
            Symbol::Op(p) => p.arity(),
            _ => 0,
        }
    }

    pub fn is_terminal(self) -> bool {
        self.arity() == 0
    }

    pub fn token(self) -> &'static str {
        match self {
            Symbol::Op(p) => p.token(),
            Symbol::Pred => "f",
            Symbol::Target => "y",
            Symbol::One => "1",
            Symbol::NegOne => "-1",
        }
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// A well-formed expression tree in prefix order.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ExprTree {
    nodes: Vec<Symbol>,
}

impl ExprTree {
    /// Builds a tree from prefix symbols, checking that arities close exactly.
    pub fn from_prefix(nodes: Vec<Symbol>) -> Result<Self> {
        let mut open = 1usize;
        for (i, s) in nodes.iter().enumerate() {
            if open == 0 {
                return Err(Error::usage(format!("trailing symbols after position {i}")));
            }
            open = open - 1 + s.arity();
        }
        if nodes.is_empty() || open != 0 {
            return Err(Error::usage("prefix sequence does not form a single tree"));
        }
        Ok(Self { nodes })
    }

    pub fn terminal(s: Symbol) -> Self {
        debug_assert!(s.is_terminal());
        Self { nodes: vec![s] }
    }

    /// `op(children...)`; the child count must match the arity.
    pub fn node(op: Primitive, children: &[ExprTree]) -> Result<Self> {
        if children.len() != op.arity() {
            return Err(Error::usage(format!("`{op}` takes {} children", op.arity())));
        }
        let mut nodes = vec![Symbol::Op(op)];
        for c in children {
            nodes.extend_from_slice(&c.nodes);
        }
        Ok(Self { nodes })
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of parent-to-child links.
    pub fn edge_count(&self) -> usize {
        self.nodes.len() - 1
    }

    /// One past the last index of the subtree rooted at `start`.
    pub fn subtree_end(&self, start: usize) -> usize {
        let mut open = 1usize;
        let mut i = start;
        while open > 0 {
            open = open - 1 + self.nodes[i].arity();
            i += 1;
        }
        i
    }

    pub fn subtree(&self, start: usize) -> ExprTree {
        ExprTree {
            nodes: self.nodes[start..self.subtree_end(start)].to_vec(),
        }
    }

    /// Replaces the subtree rooted at `start` with `with`.
    pub fn replace_subtree(&self, start: usize, with: &ExprTree) -> ExprTree {
        let end = self.subtree_end(start);
        let mut nodes = Vec::with_capacity(self.len() - (end - start) + with.len());
        nodes.extend_from_slice(&self.nodes[..start]);
        nodes.extend_from_slice(&with.nodes);
        nodes.extend_from_slice(&self.nodes[end..]);
        ExprTree { nodes }
    }

    /// Depth of every node; the root has depth 1.
    pub fn node_depths(&self) -> Vec<usize> {
        let mut depths = Vec::with_capacity(self.len());
        // Remaining child slots of each open ancestor, innermost last.
        let mut stack: Vec<usize> = Vec::new();
        for s in &self.nodes {
            depths.push(stack.len() + 1);
            if let Some(top) = stack.last_mut() {
                *top -= 1;
            }
            if s.arity() > 0 {
                stack.push(s.arity());
            }
            while stack.last() == Some(&0) {
                stack.pop();
            }
        }
        depths
    }

    /// Index of the parent of every node (`None` for the root).
    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut parents = Vec::with_capacity(self.len());
        let mut stack: Vec<(usize, usize)> = Vec::new();
        for (i, s) in self.nodes.iter().enumerate() {
            parents.push(stack.last().map(|&(p, _)| p));
            if let Some(top) = stack.last_mut() {
                top.1 -= 1;
            }
            if s.arity() > 0 {
                stack.push((i, s.arity()));
            }
            while matches!(stack.last(), Some(&(_, 0))) {
                stack.pop();
            }
        }
        parents
    }

    pub fn depth(&self) -> usize {
        self.node_depths().into_iter().max().unwrap_or(0)
    }

    pub fn contains(&self, s: Symbol) -> bool {
        self.nodes.contains(&s)
    }

    /// Whether the tree mentions both the prediction and the target.
    pub fn satisfies_constraint(&self) -> bool {
        self.contains(Symbol::Pred) && self.contains(Symbol::Target)
    }

    /// Direct scalar evaluation at `(y, f)`.
    pub fn eval(&self, y: f64, f: f64) -> f64 {
        let mut stack: Vec<f64> = Vec::with_capacity(self.len());
        for s in self.nodes.iter().rev() {
            let v = match *s {
                Symbol::Pred => f,
                Symbol::Target => y,
                Symbol::One => 1.0,
                Symbol::NegOne => -1.0,
                Symbol::Op(p) => {
                    let a = stack.pop().expect("well-formed tree");
                    let b = if p.arity() == 2 {
                        stack.pop().expect("well-formed tree")
                    } else {
                        0.0
                    };
                    p.apply(a, b)
                }
            };
            stack.push(v);
        }
        stack.pop().expect("non-empty tree")
    }

    /// Prefix text such as `(sq (- y f))`; equal keys iff equal trees.
    pub fn canonical_key(&self) -> String {
        self.to_string()
    }

    /// Human-oriented infix rendering, e.g. `(y - f)^2`.
    pub fn to_infix(&self) -> String {
        let (s, _) = self.infix_at(0);
        match self.nodes[0] {
            Symbol::Op(Primitive::Add | Primitive::Sub | Primitive::Mul) => s[1..s.len() - 1].to_string(),
            _ => s,
        }
    }

    fn infix_at(&self, i: usize) -> (String, usize) {
        let Symbol::Op(p) = self.nodes[i] else {
            return (self.nodes[i].token().to_string(), i + 1);
        };
        let (a, next) = self.infix_at(i + 1);
        if p.arity() == 1 {
            let s = match p {
                Primitive::Square => {
                    let atomic = self.nodes[i + 1].is_terminal() && !a.starts_with('-') || a.starts_with('(');
                    if atomic {
                        format!("{a}^2")
                    } else {
                        format!("({a})^2")
                    }
                }
                Primitive::Abs => format!("|{a}|"),
                _ => format!("{}({a})", p.token()),
            };
            return (s, next);
        }
        let (b, next) = self.infix_at(next);
        let s = match p {
            Primitive::Add => format!("({a} + {b})"),
            Primitive::Sub => format!("({a} - {b})"),
            Primitive::Mul => format!("({a} * {b})"),
            _ => format!("{}({a}, {b})", p.token()),
        };
        (s, next)
    }

    fn write_prefix(&self, i: usize, out: &mut String) -> usize {
        let s = self.nodes[i];
        if s.is_terminal() {
            out.push_str(s.token());
            return i + 1;
        }
        out.push('(');
        out.push_str(s.token());
        let mut next = i + 1;
        for _ in 0..s.arity() {
            out.push(' ');
            next = self.write_prefix(next, out);
        }
        out.push(')');
        next
    }
}

impl fmt::Display for ExprTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        self.write_prefix(0, &mut s);
        f.write_str(&s)
    }
}

impl fmt::Debug for ExprTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ExprTree({self})")
    }
}

impl FromStr for ExprTree {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let tokens = tokenize(text);
        let mut nodes = Vec::new();
        let mut pos = 0;
        parse_expr(&tokens, &mut pos, &mut nodes, text.len())?;
        if let Some(&(at, tok)) = tokens.get(pos) {
            return Err(parse_err(at, format!("unexpected trailing token `{tok}`")));
        }
        Ok(ExprTree { nodes })
    }
}

fn parse_err(position: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        position,
        message: message.into(),
    }
}

/// Splits on whitespace and parentheses, keeping byte offsets.
fn tokenize(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c == '(' || c == ')' || c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push((s, &text[s..i]));
            }
            if !c.is_whitespace() {
                out.push((i, &text[i..i + 1]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s, &text[s..]));
    }
    out
}

fn terminal_from_token(tok: &str) -> Option<Symbol> {
    Some(match tok {
        "f" => Symbol::Pred,
        "y" => Symbol::Target,
        "1" => Symbol::One,
        "-1" => Symbol::NegOne,
        _ => return None,
    })
}

fn parse_expr(tokens: &[(usize, &str)], pos: &mut usize, out: &mut Vec<Symbol>, eof: usize) -> Result<()> {
    let Some(&(at, tok)) = tokens.get(*pos) else {
        return Err(parse_err(eof, "unexpected end of expression"));
    };
    *pos += 1;
    if tok != "(" {
        return match terminal_from_token(tok) {
            Some(s) => {
                out.push(s);
                Ok(())
            }
            None => Err(parse_err(at, format!("expected a terminal, found `{tok}`"))),
        };
    }
    let Some(&(op_at, op_tok)) = tokens.get(*pos) else {
        return Err(parse_err(eof, "unexpected end after `(`"));
    };
    *pos += 1;
    let op: Primitive = op_tok
        .parse()
        .map_err(|_| parse_err(op_at, format!("unknown primitive `{op_tok}`")))?;
    out.push(Symbol::Op(op));
    for _ in 0..op.arity() {
        parse_expr(tokens, pos, out, eof)?;
    }
    match tokens.get(*pos) {
        Some(&(_, ")")) => {
            *pos += 1;
            Ok(())
        }
        Some(&(at, tok)) => Err(parse_err(
            at,
            format!("expected `)` closing `{op_tok}` (arity {}), found `{tok}`", op.arity()),
        )),
        None => Err(parse_err(eof, "missing `)`")),
    }
}
