//! ListOps: nested `SM`/`MIN`/`MAX`/`MED` lists over digits.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Probability that a non-spine argument is itself an operation.
pub const SUB_OP_PROB: f64 = 0.3;
pub const MAX_ARGS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ListOp {
    Sm,
    Min,
    Max,
    Med,
}

impl ListOp {
    pub const ALL: [ListOp; 4] = [ListOp::Sm, ListOp::Min, ListOp::Max, ListOp::Med];

    pub fn as_str(self) -> &'static str {
        match self {
            ListOp::Sm => "SM",
            ListOp::Min => "MIN",
            ListOp::Max => "MAX",
            ListOp::Med => "MED",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.as_str() == s)
    }
}

impl fmt::Display for ListOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Digit(u8),
    Op(ListOp, Vec<Node>),
}

fn apply(op: ListOp, vals: &[u8]) -> Result<u8> {
    if vals.is_empty() {
        return Err(Error::Domain(format!("{op} with no arguments")));
    }
    Ok(match op {
        ListOp::Sm => (vals.iter().map(|&v| v as u32).sum::<u32>() % 10) as u8,
        ListOp::Min => *vals.iter().min().unwrap(),
        ListOp::Max => *vals.iter().max().unwrap(),
        ListOp::Med => {
            let mut s = vals.to_vec();
            s.sort_unstable();
            let n = s.len();
            if n % 2 == 1 {
                s[n / 2]
            } else {
                ((s[n / 2 - 1] as u32 + s[n / 2] as u32) / 2) as u8
            }
        }
    })
}

/// Arguments an operation actually uses, given argument values and
/// dependency depths. Among equal candidate values the argument with the
/// smallest dependency depth is taken.
fn selected(op: ListOp, vals: &[u8], deps: &[usize]) -> Vec<usize> {
    let pick = |v: u8, exclude: Option<usize>| -> usize {
        (0..vals.len())
            .filter(|&i| vals[i] == v && Some(i) != exclude)
            .min_by_key(|&i| (deps[i], i))
            .expect("candidate value present")
    };
    match op {
        ListOp::Sm => (0..vals.len()).collect(),
        ListOp::Min => vec![pick(*vals.iter().min().unwrap(), None)],
        ListOp::Max => vec![pick(*vals.iter().max().unwrap(), None)],
        ListOp::Med => {
            let mut s = vals.to_vec();
            s.sort_unstable();
            let n = s.len();
            if n % 2 == 1 {
                vec![pick(s[n / 2], None)]
            } else {
                let first = pick(s[n / 2 - 1], None);
                vec![first, pick(s[n / 2], Some(first))]
            }
        }
    }
}

impl Node {
    pub fn eval(&self) -> Result<u8> {
        match self {
            Node::Digit(d) => Ok(*d),
            Node::Op(op, args) => {
                let vals = args.iter().map(Node::eval).collect::<Result<Vec<_>>>()?;
                apply(*op, &vals)
            }
        }
    }

    /// Nesting depth of operations.
    pub fn depth(&self) -> usize {
        match self {
            Node::Digit(_) => 0,
            Node::Op(_, args) => 1 + args.iter().map(Node::depth).max().unwrap_or(0),
        }
    }

    /// `(value, dependency depth)`: depth of the tree after pruning every
    /// argument that no operation selects.
    pub fn eval_with_dependency(&self) -> Result<(u8, usize)> {
        match self {
            Node::Digit(d) => Ok((*d, 0)),
            Node::Op(op, args) => {
                let (vals, deps): (Vec<u8>, Vec<usize>) = args.iter().map(Node::eval_with_dependency).collect::<Result<Vec<_>>>()?.into_iter().unzip();
                let v = apply(*op, &vals)?;
                let d = selected(*op, &vals, &deps).into_iter().map(|i| deps[i]).max().unwrap_or(0);
                Ok((v, 1 + d))
            }
        }
    }

    pub fn tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.write(&mut out);
        out
    }

    fn write(&self, out: &mut Vec<String>) {
        match self {
            Node::Digit(d) => out.push(d.to_string()),
            Node::Op(op, args) => {
                out.push("[".into());
                out.push(op.as_str().into());
                for a in args {
                    a.write(out);
                }
                out.push("]".into());
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Node::Digit(_) => 1,
            Node::Op(_, args) => 3 + args.iter().map(Node::len).sum::<usize>(),
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn dependency_depth(tree: &Node) -> Result<usize> {
    Ok(tree.eval_with_dependency()?.1)
}

pub fn listops_eval(tree: &Node) -> Result<u8> {
    tree.eval()
}

pub fn parse(tokens: &[&str]) -> Result<Node> {
    let mut pos = 0;
    let n = parse_at(tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(Error::Parse(format!("trailing tokens after position {pos}")));
    }
    Ok(n)
}

fn parse_at(tokens: &[&str], pos: &mut usize) -> Result<Node> {
    let tok = *tokens.get(*pos).ok_or_else(|| Error::Parse("unexpected end of list".into()))?;
    *pos += 1;
    if tok == "[" {
        let name = *tokens.get(*pos).ok_or_else(|| Error::Parse("missing operator".into()))?;
        let op = ListOp::parse(name).ok_or_else(|| Error::Parse(format!("unknown operator `{name}`")))?;
        *pos += 1;
        let mut args = Vec::new();
        loop {
            match tokens.get(*pos) {
                Some(&"]") => {
                    *pos += 1;
                    break;
                }
                Some(_) => args.push(parse_at(tokens, pos)?),
                None => return Err(Error::Parse("unclosed `[`".into())),
            }
        }
        Ok(Node::Op(op, args))
    } else {
        match tok.as_bytes() {
            [d @ b'0'..=b'9'] => Ok(Node::Digit(d - b'0')),
            _ => Err(Error::Parse(format!("unexpected token `{tok}`"))),
        }
    }
}

/// A random tree of exactly `depth` nested operations: each operation has
/// 1 to [`MAX_ARGS`] arguments, one of which carries the remaining depth;
/// the others are operations of smaller random depth with probability
/// [`SUB_OP_PROB`], else digits.
pub fn generate(rng: &mut impl Rng, depth: usize) -> Node {
    if depth == 0 {
        return Node::Digit(rng.gen_range(0..10));
    }
    let op = ListOp::ALL[rng.gen_range(0..4)];
    let n = rng.gen_range(1..=MAX_ARGS);
    let spine = rng.gen_range(0..n);
    let args = (0..n)
        .map(|i| {
            if i == spine {
                generate(rng, depth - 1)
            } else if depth > 1 && rng.gen_bool(SUB_OP_PROB) {
                let d = rng.gen_range(1..depth);
                generate(rng, d)
            } else {
                Node::Digit(rng.gen_range(0..10))
            }
        })
        .collect();
    Node::Op(op, args)
}
