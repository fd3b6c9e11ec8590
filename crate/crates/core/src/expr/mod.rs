//! Arithmetic expressions for map branches.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?          exponent must not contain x
//! atom  := number | 'x' | param | 'abs' '(' expr ')' | 'sign' '(' expr ')'
//!        | '(' expr ')'
//! ```
//!
//! So `-x^2` is `-(x^2)` and `2^-1` is `0.5`. Non-integer powers require a
//! nonnegative base; write `abs(x)^0.6`, not `x^0.6`, when the base may be
//! negative.

mod compiled;
mod parser;

pub use compiled::Program;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::jet::Jet2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("parameter `{0}` has no value")]
    MissingParam(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("expression is not differentiable at x = {x}")]
    NonDifferentiable { x: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var,
    Param(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Abs(Box<Expr>),
    Sign(Box<Expr>),
}

/// Parse `source` with the given set of declared parameter names.
pub fn parse<S: AsRef<str>>(source: &str, params: impl IntoIterator<Item = S>) -> Result<Expr, ExprError> {
    let names: BTreeSet<String> = params.into_iter().map(|s| s.as_ref().to_string()).collect();
    parser::parse(source, &names)
}

fn is_integer(k: f64) -> bool {
    k.fract() == 0.0 && k.abs() < 9.0e15
}

impl Expr {
    pub fn depends_on_x(&self) -> bool {
        match self {
            Expr::Var => true,
            Expr::Const(_) | Expr::Param(_) => false,
            Expr::Neg(a) | Expr::Abs(a) | Expr::Sign(a) => a.depends_on_x(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                a.depends_on_x() || b.depends_on_x()
            }
        }
    }

    /// Names of all parameters referenced by the tree.
    pub fn params(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_params(&mut out);
        out
    }

    fn collect_params(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Param(p) => {
                out.insert(p.clone());
            }
            Expr::Const(_) | Expr::Var => {}
            Expr::Neg(a) | Expr::Abs(a) | Expr::Sign(a) => a.collect_params(out),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                a.collect_params(out);
                b.collect_params(out);
            }
        }
    }

    /// Substitute parameter values, producing a parameter-free tree.
    pub fn bind(&self, params: &BTreeMap<String, f64>) -> Result<Expr, ExprError> {
        let un = |a: &Expr| a.bind(params).map(Box::new);
        Ok(match self {
            Expr::Param(p) => Expr::Const(*params.get(p).ok_or_else(|| ExprError::MissingParam(p.clone()))?),
            Expr::Const(c) => Expr::Const(*c),
            Expr::Var => Expr::Var,
            Expr::Neg(a) => Expr::Neg(un(a)?),
            Expr::Abs(a) => Expr::Abs(un(a)?),
            Expr::Sign(a) => Expr::Sign(un(a)?),
            Expr::Add(a, b) => Expr::Add(un(a)?, un(b)?),
            Expr::Sub(a, b) => Expr::Sub(un(a)?, un(b)?),
            Expr::Mul(a, b) => Expr::Mul(un(a)?, un(b)?),
            Expr::Div(a, b) => Expr::Div(un(a)?, un(b)?),
            Expr::Pow(a, b) => Expr::Pow(un(a)?, un(b)?),
        })
    }

    /// Value, first and second derivative at `x`.
    pub fn eval_jet(&self, x: f64, params: &BTreeMap<String, f64>) -> Result<Jet2, ExprError> {
        self.jet(x, &|p| params.get(p).copied())
    }

    /// Jet evaluation with an arbitrary parameter lookup. A bound tree
    /// (see [`Expr::bind`]) never consults the lookup.
    pub fn jet(&self, x: f64, lookup: &dyn Fn(&str) -> Option<f64>) -> Result<Jet2, ExprError> {
        match self {
            Expr::Const(c) => Ok(Jet2::constant(*c)),
            Expr::Var => Ok(Jet2::variable(x)),
            Expr::Param(p) => lookup(p)
                .map(Jet2::constant)
                .ok_or_else(|| ExprError::MissingParam(p.clone())),
            Expr::Neg(a) => Ok(-a.jet(x, lookup)?),
            Expr::Add(a, b) => Ok(a.jet(x, lookup)? + b.jet(x, lookup)?),
            Expr::Sub(a, b) => Ok(a.jet(x, lookup)? - b.jet(x, lookup)?),
            Expr::Mul(a, b) => Ok(a.jet(x, lookup)? * b.jet(x, lookup)?),
            Expr::Div(a, b) => {
                let den = b.jet(x, lookup)?;
                if den.value == 0.0 {
                    return Err(ExprError::Domain(format!("division by zero at x = {x}")));
                }
                Ok(a.jet(x, lookup)? / den)
            }
            Expr::Abs(a) => {
                let u = a.jet(x, lookup)?;
                if u.value == 0.0 {
                    return Err(ExprError::NonDifferentiable { x });
                }
                let s = u.value.signum();
                Ok(Jet2::new(u.value.abs(), s * u.d1, s * u.d2))
            }
            Expr::Sign(a) => {
                let u = a.jet(x, lookup)?;
                if u.value == 0.0 {
                    return Err(ExprError::NonDifferentiable { x });
                }
                Ok(Jet2::constant(u.value.signum()))
            }
            Expr::Pow(a, b) => {
                let k = b.jet(x, lookup)?.value;
                let u = a.jet(x, lookup)?;
                pow_jet(u, k, x)
            }
        }
    }

    /// Value-only evaluation. `abs` and `sign` are evaluated pointwise
    /// (with `sign(0) = 0`), so kinks are not errors here.
    pub fn eval(&self, x: f64, lookup: &dyn Fn(&str) -> Option<f64>) -> Result<f64, ExprError> {
        match self {
            Expr::Const(c) => Ok(*c),
            Expr::Var => Ok(x),
            Expr::Param(p) => lookup(p).ok_or_else(|| ExprError::MissingParam(p.clone())),
            Expr::Neg(a) => Ok(-a.eval(x, lookup)?),
            Expr::Add(a, b) => Ok(a.eval(x, lookup)? + b.eval(x, lookup)?),
            Expr::Sub(a, b) => Ok(a.eval(x, lookup)? - b.eval(x, lookup)?),
            Expr::Mul(a, b) => Ok(a.eval(x, lookup)? * b.eval(x, lookup)?),
            Expr::Div(a, b) => {
                let den = b.eval(x, lookup)?;
                if den == 0.0 {
                    return Err(ExprError::Domain(format!("division by zero at x = {x}")));
                }
                Ok(a.eval(x, lookup)? / den)
            }
            Expr::Abs(a) => Ok(a.eval(x, lookup)?.abs()),
            Expr::Sign(a) => {
                let u = a.eval(x, lookup)?;
                Ok(if u == 0.0 { 0.0 } else { u.signum() })
            }
            Expr::Pow(a, b) => {
                let k = b.eval(x, lookup)?;
                let u = a.eval(x, lookup)?;
                pow_value(u, k, x)
            }
        }
    }
}

fn pow_value(u: f64, k: f64, x: f64) -> Result<f64, ExprError> {
    if k == 2.0 {
        return Ok(u * u);
    }
    if is_integer(k) {
        if u == 0.0 && k < 0.0 {
            return Err(ExprError::Domain(format!("0 raised to negative power at x = {x}")));
        }
        return Ok(u.powi(k as i32));
    }
    if u < 0.0 {
        return Err(ExprError::Domain(format!(
            "negative base {u} raised to non-integer power {k} at x = {x}"
        )));
    }
    if u == 0.0 && k < 0.0 {
        return Err(ExprError::Domain(format!("0 raised to negative power at x = {x}")));
    }
    Ok(u.powf(k))
}

fn pow_jet(u: Jet2, k: f64, x: f64) -> Result<Jet2, ExprError> {
    // Small positive integer powers by multiplication.
    if k == 2.0 {
        let v = u.value;
        return Ok(u.chain(v * v, 2.0 * v, 2.0));
    }
    if k == 3.0 {
        let v = u.value;
        return Ok(u.chain(v * v * v, 3.0 * v * v, 6.0 * v));
    }
    let g0 = pow_value(u.value, k, x)?;
    if k == 0.0 {
        return Ok(Jet2::constant(1.0));
    }
    if is_integer(k) {
        // coefficients k*u^(k-1) and k(k-1)*u^(k-2); skip vanishing ones so
        // that 0^(-1) never appears.
        let n = k as i32;
        let g1 = k * u.value.powi(n - 1);
        let g2 = if n == 1 { 0.0 } else { k * (k - 1.0) * u.value.powi(n - 2) };
        return Ok(u.chain(g0, g1, g2));
    }
    if u.value == 0.0 {
        // 0 < k non-integer: derivatives exist only for large enough k.
        if k < 2.0 {
            return Err(ExprError::NonDifferentiable { x });
        }
        return Ok(u.chain(0.0, 0.0, 0.0));
    }
    let g1 = k * u.value.powf(k - 1.0);
    let g2 = k * (k - 1.0) * u.value.powf(k - 2.0);
    Ok(u.chain(g0, g1, g2))
}

fn fmt_const(c: f64, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if c < 0.0 || (c == 0.0 && c.is_sign_negative()) {
        write!(f, "(-{})", -c)
    } else {
        write!(f, "{c}")
    }
}

/// Fully parenthesized rendering; `parse(e.to_string())` reproduces the tree
/// for every tree the parser can produce.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => fmt_const(*c, f),
            Expr::Var => write!(f, "x"),
            Expr::Param(p) => write!(f, "{p}"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, b) => write!(f, "({a}^{b})"),
            Expr::Abs(a) => write!(f, "abs({a})"),
            Expr::Sign(a) => write!(f, "sign({a})"),
        }
    }
}
