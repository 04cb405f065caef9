//! Registry of named basis functions for static nonlinear maps `y = A phi(u)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One scalar basis function of the input vector. Input indices are 0-based
/// internally; the textual form uses 1-based `u1, u2, ...`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisFn {
    Constant,
    Monomial { input: usize, power: u32 },
    Sin { input: usize, freq: f64 },
    Cos { input: usize, freq: f64 },
}

impl BasisFn {
    pub fn eval(&self, u: &DVector<f64>) -> f64 {
        match *self {
            BasisFn::Constant => 1.0,
            BasisFn::Monomial { input, power } => u[input].powi(power as i32),
            BasisFn::Sin { input, freq } => (freq * u[input]).sin(),
            BasisFn::Cos { input, freq } => (freq * u[input]).cos(),
        }
    }

    fn input(&self) -> Option<usize> {
        match *self {
            BasisFn::Constant => None,
            BasisFn::Monomial { input, .. } | BasisFn::Sin { input, .. } | BasisFn::Cos { input, .. } => {
                Some(input)
            }
        }
    }
}

impl fmt::Display for BasisFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            BasisFn::Constant => write!(f, "1"),
            BasisFn::Monomial { input, power: 1 } => write!(f, "u{}", input + 1),
            BasisFn::Monomial { input, power } => write!(f, "u{}^{}", input + 1, power),
            BasisFn::Sin { input, freq } => write!(f, "sin({}*u{})", freq, input + 1),
            BasisFn::Cos { input, freq } => write!(f, "cos({}*u{})", freq, input + 1),
        }
    }
}

fn parse_input(s: &str) -> Result<usize> {
    let idx = s
        .strip_prefix('u')
        .and_then(|d| d.parse::<usize>().ok())
        .filter(|&i| i >= 1)
        .ok_or_else(|| Error::invalid(format!("bad input reference '{s}' (expected u1, u2, ...)")))?;
    Ok(idx - 1)
}

impl FromStr for BasisFn {
    type Err = Error;

    /// Accepts `1`, `u2`, `u1^3`, `sin(u1)`, `cos(2*u3)`.
    fn from_str(s: &str) -> Result<Self> {
        let s: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if s == "1" {
            return Ok(BasisFn::Constant);
        }
        for (prefix, is_sin) in [("sin(", true), ("cos(", false)] {
            if let Some(body) = s.strip_prefix(prefix).and_then(|r| r.strip_suffix(')')) {
                let (freq, var) = match body.split_once('*') {
                    Some((f, v)) => (
                        f.parse::<f64>()
                            .map_err(|_| Error::invalid(format!("bad frequency in '{s}'")))?,
                        v,
                    ),
                    None => (1.0, body),
                };
                let input = parse_input(var)?;
                return Ok(if is_sin {
                    BasisFn::Sin { input, freq }
                } else {
                    BasisFn::Cos { input, freq }
                });
            }
        }
        let (var, power) = match s.split_once('^') {
            Some((v, p)) => (
                v,
                p.parse::<u32>()
                    .map_err(|_| Error::invalid(format!("bad power in '{s}'")))?,
            ),
            None => (s.as_str(), 1),
        };
        Ok(BasisFn::Monomial {
            input: parse_input(var)?,
            power,
        })
    }
}

/// Ordered list of basis functions; `phi(u)` stacks their values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    pub functions: Vec<BasisFn>,
}

impl Basis {
    pub fn new(functions: Vec<BasisFn>) -> Result<Self> {
        if functions.is_empty() {
            return Err(Error::invalid("basis must contain at least one function"));
        }
        Ok(Basis { functions })
    }

    /// Comma-separated textual form, e.g. `"1, u1, u1^3"`.
    pub fn parse(text: &str) -> Result<Self> {
        let functions = text
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        Basis::new(functions)
    }

    /// Constant plus per-input powers `1..=degree` (no cross terms).
    pub fn polynomial(inputs: usize, degree: u32) -> Self {
        let mut functions = vec![BasisFn::Constant];
        for power in 1..=degree {
            for input in 0..inputs {
                functions.push(BasisFn::Monomial { input, power });
            }
        }
        Basis { functions }
    }

    /// Constant plus `sin(k u_i), cos(k u_i)` for `k = 1..=harmonics`.
    pub fn trigonometric(inputs: usize, harmonics: u32) -> Self {
        let mut functions = vec![BasisFn::Constant];
        for k in 1..=harmonics {
            for input in 0..inputs {
                functions.push(BasisFn::Sin { input, freq: k as f64 });
                functions.push(BasisFn::Cos { input, freq: k as f64 });
            }
        }
        Basis { functions }
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn max_input(&self) -> Option<usize> {
        self.functions.iter().filter_map(BasisFn::input).max()
    }

    pub fn eval(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        if let Some(max) = self.max_input() {
            if max >= u.len() {
                return Err(Error::invalid(format!(
                    "basis references input u{} but the input has {} entries",
                    max + 1,
                    u.len()
                )));
            }
        }
        Ok(DVector::from_iterator(
            self.functions.len(),
            self.functions.iter().map(|f| f.eval(u)),
        ))
    }

    pub fn describe(&self) -> String {
        self.functions
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(", ")
    }
}
