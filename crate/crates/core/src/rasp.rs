//! RASP-lite: a minimal select/aggregate/map program language used as the
//! behavioral oracle for the analytically constructed toy transformers.
//!
//! Programs are straight-line: each statement names a value computed from
//! `tokens`, `indices`, `length`, earlier values, or a selector. Selectors
//! relate a key position to a query position; `aggregate` takes the mean of
//! the values at selected key positions.

use crate::error::{AblateError, Result};
use std::collections::BTreeMap;

/// Key/query predicate of a selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predicate {
    /// key == query
    Eq,
    /// key <= query
    Leq,
    /// key + query == length - 1 (index reflection, used by Reverse)
    ReflectedEq,
}

/// Per-position scalar transformation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MapFn {
    /// 1.0 where the value equals `c`, else 0.0.
    EqConst(f64),
    /// `mul * v + add`.
    Affine { mul: f64, add: f64 },
}

impl MapFn {
    fn apply(&self, v: f64) -> f64 {
        match *self {
            MapFn::EqConst(c) => {
                if v == c {
                    1.0
                } else {
                    0.0
                }
            }
            MapFn::Affine { mul, add } => mul * v + add,
        }
    }
}

/// One RASP-lite expression over previously defined names.
#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    /// Token ids as numbers, per position.
    Tokens,
    /// 0, 1, 2, ... per position.
    Indices,
    /// The sequence length at every position.
    Length,
    Map {
        f: MapFn,
        arg: String,
    },
    Select {
        key: String,
        query: String,
        predicate: Predicate,
    },
    /// Mean of `values` at the key positions selected for each query
    /// position; 0.0 where nothing is selected.
    Aggregate {
        selector: String,
        values: String,
    },
}

/// A straight-line RASP-lite program. The last statement is the output.
#[derive(Clone, Debug, PartialEq)]
pub struct RaspLiteProgram {
    pub stmts: Vec<(String, Expr)>,
}

#[derive(Clone, Debug)]
enum Value {
    PerPos(Vec<f64>),
    /// `sel[q][k]` — key k selected for query q.
    Selector(Vec<Vec<bool>>),
}

impl RaspLiteProgram {
    /// Evaluate the program on a token sequence, returning the per-position
    /// output of the final statement.
    pub fn eval(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let n = tokens.len();
        let mut env: BTreeMap<&str, Value> = BTreeMap::new();
        let lookup = |env: &BTreeMap<&str, Value>, name: &str| -> Result<Value> {
            env.get(name)
                .cloned()
                .ok_or_else(|| AblateError::InvalidConfig(format!("undefined rasp value `{name}`")))
        };
        let per_pos = |v: Value, what: &str| -> Result<Vec<f64>> {
            match v {
                Value::PerPos(p) => Ok(p),
                Value::Selector(_) => Err(AblateError::InvalidConfig(format!(
                    "`{what}` expects a per-position value, got a selector"
                ))),
            }
        };
        let mut last = None;
        for (name, expr) in &self.stmts {
            let value = match expr {
                Expr::Tokens => Value::PerPos(tokens.iter().map(|&t| t as f64).collect()),
                Expr::Indices => Value::PerPos((0..n).map(|i| i as f64).collect()),
                Expr::Length => Value::PerPos(vec![n as f64; n]),
                Expr::Map { f, arg } => {
                    let v = per_pos(lookup(&env, arg)?, "map")?;
                    Value::PerPos(v.iter().map(|&x| f.apply(x)).collect())
                }
                Expr::Select { key, query, predicate } => {
                    let kv = per_pos(lookup(&env, key)?, "select key")?;
                    let qv = per_pos(lookup(&env, query)?, "select query")?;
                    let sel = (0..n)
                        .map(|q| {
                            (0..n)
                                .map(|k| match predicate {
                                    Predicate::Eq => kv[k] == qv[q],
                                    Predicate::Leq => kv[k] <= qv[q],
                                    Predicate::ReflectedEq => kv[k] + qv[q] == (n as f64) - 1.0,
                                })
                                .collect()
                        })
                        .collect();
                    Value::Selector(sel)
                }
                Expr::Aggregate { selector, values } => {
                    let sel = match lookup(&env, selector)? {
                        Value::Selector(s) => s,
                        Value::PerPos(_) => {
                            return Err(AblateError::InvalidConfig(
                                "aggregate expects a selector".into(),
                            ))
                        }
                    };
                    let vals = per_pos(lookup(&env, values)?, "aggregate values")?;
                    let agg = sel
                        .iter()
                        .map(|row| {
                            let picked: Vec<f64> = row
                                .iter()
                                .zip(&vals)
                                .filter(|(&s, _)| s)
                                .map(|(_, &v)| v)
                                .collect();
                            if picked.is_empty() {
                                0.0
                            } else {
                                picked.iter().sum::<f64>() / picked.len() as f64
                            }
                        })
                        .collect();
                    Value::PerPos(agg)
                }
            };
            env.insert(name, value);
            last = Some(name.as_str());
        }
        let out = last.ok_or_else(|| AblateError::InvalidConfig("empty rasp program".into()))?;
        per_pos(lookup(&env, out)?, "program output")
    }
}

/// Proportion of tokens equal to `x_token` among positions 0..=i, per
/// position i (inclusive of the current token).
pub fn xproportion_program(x_token: usize) -> RaspLiteProgram {
    RaspLiteProgram {
        stmts: vec![
            ("tokens".into(), Expr::Tokens),
            ("idx".into(), Expr::Indices),
            (
                "is_x".into(),
                Expr::Map {
                    f: MapFn::EqConst(x_token as f64),
                    arg: "tokens".into(),
                },
            ),
            (
                "prefix".into(),
                Expr::Select {
                    key: "idx".into(),
                    query: "idx".into(),
                    predicate: Predicate::Leq,
                },
            ),
            (
                "out".into(),
                Expr::Aggregate {
                    selector: "prefix".into(),
                    values: "is_x".into(),
                },
            ),
        ],
    }
}

/// Token id at the reflected position `length - 1 - i`, per position i.
pub fn reverse_program() -> RaspLiteProgram {
    RaspLiteProgram {
        stmts: vec![
            ("tokens".into(), Expr::Tokens),
            ("idx".into(), Expr::Indices),
            (
                "flip".into(),
                Expr::Select {
                    key: "idx".into(),
                    query: "idx".into(),
                    predicate: Predicate::ReflectedEq,
                },
            ),
            (
                "out".into(),
                Expr::Aggregate {
                    selector: "flip".into(),
                    values: "tokens".into(),
                },
            ),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // alphabet {w:0, x:1, y:2, z:3}
    fn xp(tokens: &[usize]) -> Vec<f64> {
        xproportion_program(1).eval(tokens).unwrap()
    }

    #[test]
    fn xproportion_table_values() {
        // "y,x,z,x,w" -> 0, 0.5, 1/3, 0.5, 0.4
        let out = xp(&[2, 1, 3, 1, 0]);
        let expected = [0.0, 0.5, 1.0 / 3.0, 0.5, 0.4];
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{out:?}");
        }
    }

    #[test]
    fn xproportion_single_x_is_one() {
        assert_eq!(xp(&[1]), vec![1.0]);
    }

    #[test]
    fn reverse_table_values() {
        // "1,0,2,2,2" -> "2,2,2,0,1"
        let out = reverse_program().eval(&[1, 0, 2, 2, 2]).unwrap();
        assert_eq!(out, vec![2.0, 2.0, 2.0, 0.0, 1.0]);
    }

    #[test]
    fn reverse_palindrome_fixed_point() {
        let pal = [0, 2, 1, 2, 0];
        let out = reverse_program().eval(&pal).unwrap();
        let expected: Vec<f64> = pal.iter().map(|&t| t as f64).collect();
        assert_eq!(out, expected);
    }

    #[test]
    fn reverse_all_lengths() {
        // brute force against direct reversal for every length <= 5
        for len in 1..=5usize {
            let count = 3usize.pow(len as u32);
            for code in 0..count {
                let mut c = code;
                let tokens: Vec<usize> = (0..len)
                    .map(|_| {
                        let t = c % 3;
                        c /= 3;
                        t
                    })
                    .collect();
                let out = reverse_program().eval(&tokens).unwrap();
                let expected: Vec<f64> = tokens.iter().rev().map(|&t| t as f64).collect();
                assert_eq!(out, expected, "{tokens:?}");
            }
        }
    }

    #[test]
    fn undefined_name_rejected() {
        let p = RaspLiteProgram {
            stmts: vec![(
                "out".into(),
                Expr::Map {
                    f: MapFn::EqConst(0.0),
                    arg: "missing".into(),
                },
            )],
        };
        assert!(p.eval(&[0]).is_err());
    }
}
