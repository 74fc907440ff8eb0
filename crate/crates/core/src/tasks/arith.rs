//! Fully parenthesized binary `+`/`*` expressions over digits, mod 10.

use rand::Rng;

use crate::error::{Error, Result};

/// Probability that the non-spine operand is itself an operation.
pub const SUB_OP_PROB: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Digit(u8),
    Op(char, Box<Expr>, Box<Expr>),
}

impl Expr {
    /// Number of operations on the deepest path (leaves ignored).
    pub fn depth(&self) -> usize {
        match self {
            Expr::Digit(_) => 0,
            Expr::Op(_, a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    pub fn eval(&self) -> u8 {
        match self {
            Expr::Digit(d) => *d,
            Expr::Op('+', a, b) => (a.eval() + b.eval()) % 10,
            Expr::Op(_, a, b) => (a.eval() * b.eval()) % 10,
        }
    }

    pub fn tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.write(&mut out);
        out
    }

    fn write(&self, out: &mut Vec<String>) {
        match self {
            Expr::Digit(d) => out.push(d.to_string()),
            Expr::Op(op, a, b) => {
                out.push("(".into());
                a.write(out);
                out.push(op.to_string());
                b.write(out);
                out.push(")".into());
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Expr::Digit(_) => 1,
            Expr::Op(_, a, b) => 3 + a.len() + b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Parses one expression.
pub fn parse(tokens: &[&str]) -> Result<Expr> {
    let mut pos = 0;
    let e = parse_at(tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(Error::Parse(format!("trailing tokens after position {pos}")));
    }
    Ok(e)
}

fn parse_at(tokens: &[&str], pos: &mut usize) -> Result<Expr> {
    let tok = *tokens.get(*pos).ok_or_else(|| Error::Parse("unexpected end of expression".into()))?;
    *pos += 1;
    if tok == "(" {
        let a = parse_at(tokens, pos)?;
        let op = match tokens.get(*pos) {
            Some(&"+") => '+',
            Some(&"*") => '*',
            other => return Err(Error::Parse(format!("expected operator, found {other:?}"))),
        };
        *pos += 1;
        let b = parse_at(tokens, pos)?;
        if tokens.get(*pos) != Some(&")") {
            return Err(Error::Parse(format!("expected `)` at position {pos}")));
        }
        *pos += 1;
        Ok(Expr::Op(op, Box::new(a), Box::new(b)))
    } else {
        match tok.as_bytes() {
            [d @ b'0'..=b'9'] => Ok(Expr::Digit(d - b'0')),
            _ => Err(Error::Parse(format!("unexpected token `{tok}`"))),
        }
    }
}

pub fn arith_eval(tokens: &[&str]) -> Result<u8> {
    Ok(parse(tokens)?.eval())
}

/// A random expression of exactly `depth` operations. One operand of each
/// operation carries the remaining depth; the other is an operation of
/// random smaller depth with probability [`SUB_OP_PROB`], else a digit.
pub fn generate(rng: &mut impl Rng, depth: usize) -> Expr {
    if depth == 0 {
        return Expr::Digit(rng.gen_range(0..10));
    }
    let spine = generate(rng, depth - 1);
    let other = if depth > 1 && rng.gen_bool(SUB_OP_PROB) {
        let d = rng.gen_range(1..depth);
        generate(rng, d)
    } else {
        Expr::Digit(rng.gen_range(0..10))
    };
    let op = if rng.gen_bool(0.5) { '+' } else { '*' };
    let (a, b) = if rng.gen_bool(0.5) { (spine, other) } else { (other, spine) };
    Expr::Op(op, Box::new(a), Box::new(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn worked_example() {
        let t = toks("( ( 4 * 7 ) + 2 )");
        assert_eq!(arith_eval(&t).unwrap(), 0);
        assert_eq!(parse(&t).unwrap().depth(), 2);
        assert_eq!(arith_eval(&toks("( 0 * 9 )")).unwrap(), 0);
        assert_eq!(arith_eval(&toks("7")).unwrap(), 7);
    }

    #[test]
    fn malformed_expressions_are_parse_errors() {
        for s in ["( 1 + 2", "( 1 2 )", "1 + 2", "( 1 + 2 ) )", "", "( x + 1 )", "( 12 + 1 )"] {
            assert!(matches!(arith_eval(&toks(s)), Err(Error::Parse(_))), "{s}");
        }
    }

    #[test]
    fn generated_depth_is_exact_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for depth in 0..9 {
            for _ in 0..50 {
                let e = generate(&mut rng, depth);
                assert_eq!(e.depth(), depth);
                let t = e.tokens();
                assert_eq!(t.len(), e.len());
                let refs: Vec<&str> = t.iter().map(String::as_str).collect();
                assert_eq!(parse(&refs).unwrap(), e);
            }
        }
    }
}
