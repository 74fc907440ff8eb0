//! Compositional table lookup: bijective functions over 3-bit symbols,
//! composed left to right.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_SYMBOLS: usize = 8;
pub const N_FUNCTIONS: usize = 9;

pub fn symbol_name(s: usize) -> String {
    format!("{s:03b}")
}

pub fn function_name(f: usize) -> String {
    ((b'a' + f as u8) as char).to_string()
}

pub fn parse_symbol(tok: &str) -> Option<usize> {
    (tok.len() == 3 && tok.bytes().all(|b| b == b'0' || b == b'1'))
        .then(|| usize::from_str_radix(tok, 2).ok())
        .flatten()
}

pub fn parse_function(tok: &str) -> Option<usize> {
    match tok.as_bytes() {
        [c] if (b'a'..b'a' + N_FUNCTIONS as u8).contains(c) => Some((c - b'a') as usize),
        _ => None,
    }
}

/// The nine function tables, each a permutation of the eight symbols.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtlSpec {
    pub tables: Vec<Vec<u8>>,
}

impl CtlSpec {
    pub fn random(rng: &mut impl Rng) -> Self {
        let tables = (0..N_FUNCTIONS)
            .map(|_| {
                let mut p: Vec<u8> = (0..N_SYMBOLS as u8).collect();
                p.shuffle(rng);
                p
            })
            .collect();
        Self { tables }
    }

    pub fn identity() -> Self {
        Self {
            tables: vec![(0..N_SYMBOLS as u8).collect(); N_FUNCTIONS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.tables.len() == N_FUNCTIONS
            && self.tables.iter().all(|t| {
                let mut seen = [false; N_SYMBOLS];
                t.len() == N_SYMBOLS && t.iter().all(|&s| (s as usize) < N_SYMBOLS && !std::mem::replace(&mut seen[s as usize], true))
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Config("CTL tables must be 9 permutations of 8 symbols".into()))
        }
    }

    pub fn apply(&self, f: usize, s: usize) -> usize {
        self.tables[f][s] as usize
    }
}

/// Applies `functions` in order to `symbol`.
pub fn ctl_eval(symbol: usize, functions: &[usize], spec: &CtlSpec) -> Result<usize> {
    if symbol >= N_SYMBOLS {
        return Err(Error::Domain(format!("symbol {symbol} out of range")));
    }
    functions.iter().try_fold(symbol, |s, &f| {
        if f >= N_FUNCTIONS {
            Err(Error::UnknownToken(function_name(f)))
        } else {
            Ok(spec.apply(f, s))
        }
    })
}

/// Evaluates a token sequence in forward (`101 d a b`) or backward
/// (`b a d 101`) order.
pub fn ctl_eval_tokens(tokens: &[&str], backward: bool, spec: &CtlSpec) -> Result<usize> {
    let seq: Vec<&str> = if backward {
        tokens.iter().rev().copied().collect()
    } else {
        tokens.to_vec()
    };
    let (first, rest) = seq.split_first().ok_or_else(|| Error::Parse("empty CTL sequence".into()))?;
    let symbol = parse_symbol(first).ok_or_else(|| Error::UnknownToken(first.to_string()))?;
    let fs = rest
        .iter()
        .map(|t| parse_function(t).ok_or_else(|| Error::UnknownToken(t.to_string())))
        .collect::<Result<Vec<_>>>()?;
    ctl_eval(symbol, &fs, spec)
}

/// A random problem with `depth` functions: `(symbol, functions)`.
pub fn random_problem(rng: &mut impl Rng, depth: usize) -> (usize, Vec<usize>) {
    let symbol = rng.gen_range(0..N_SYMBOLS);
    let fs = (0..depth).map(|_| rng.gen_range(0..N_FUNCTIONS)).collect();
    (symbol, fs)
}
