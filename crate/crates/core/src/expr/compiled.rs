//! Flat postfix form of a bound expression, for hot loops.

use super::{pow_jet, pow_value, Expr, ExprError};
use crate::jet::Jet2;

const STACK: usize = 32;
const SMALL: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Op {
    Const(f64),
    Var,
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    /// Power with an exponent fixed at compile time.
    Pow(f64),
    Abs,
    Sign,
}

/// Postfix program evaluating to the same values as the tree it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Program {
    ops: Vec<Op>,
    depth: usize,
}

impl Program {
    /// `None` when the tree has parameters, a non-constant exponent, or
    /// needs a deeper stack than the fixed one.
    pub fn compile(e: &Expr) -> Option<Self> {
        let mut ops = Vec::new();
        emit(e, &mut ops)?;
        let mut depth = 0usize;
        let mut max = 0usize;
        for op in &ops {
            match op {
                Op::Const(_) | Op::Var => depth += 1,
                Op::Add | Op::Sub | Op::Mul | Op::Div => depth -= 1,
                _ => {}
            }
            max = max.max(depth);
        }
        (max <= STACK).then_some(Self { ops, depth: max })
    }

    pub fn eval(&self, x: f64) -> Result<f64, ExprError> {
        if self.depth <= SMALL {
            self.eval_n::<SMALL>(x)
        } else {
            self.eval_n::<STACK>(x)
        }
    }

    pub fn jet(&self, x: f64) -> Result<Jet2, ExprError> {
        if self.depth <= SMALL {
            self.jet_n::<SMALL>(x)
        } else {
            self.jet_n::<STACK>(x)
        }
    }

    fn eval_n<const N: usize>(&self, x: f64) -> Result<f64, ExprError> {
        let mut st = [0.0f64; N];
        let mut n = 0usize;
        for op in &self.ops {
            match *op {
                Op::Const(c) => {
                    st[n] = c;
                    n += 1;
                }
                Op::Var => {
                    st[n] = x;
                    n += 1;
                }
                Op::Neg => st[n - 1] = -st[n - 1],
                Op::Add => {
                    n -= 1;
                    st[n - 1] += st[n];
                }
                Op::Sub => {
                    n -= 1;
                    st[n - 1] -= st[n];
                }
                Op::Mul => {
                    n -= 1;
                    st[n - 1] *= st[n];
                }
                Op::Div => {
                    n -= 1;
                    if st[n] == 0.0 {
                        return Err(ExprError::Domain(format!("division by zero at x = {x}")));
                    }
                    st[n - 1] /= st[n];
                }
                Op::Pow(k) => st[n - 1] = pow_value(st[n - 1], k, x)?,
                Op::Abs => st[n - 1] = st[n - 1].abs(),
                Op::Sign => {
                    let u = st[n - 1];
                    st[n - 1] = if u == 0.0 { 0.0 } else { u.signum() };
                }
            }
        }
        Ok(st[0])
    }

    fn jet_n<const N: usize>(&self, x: f64) -> Result<Jet2, ExprError> {
        let mut st = [Jet2::constant(0.0); N];
        let mut n = 0usize;
        for op in &self.ops {
            match *op {
                Op::Const(c) => {
                    st[n] = Jet2::constant(c);
                    n += 1;
                }
                Op::Var => {
                    st[n] = Jet2::variable(x);
                    n += 1;
                }
                Op::Neg => st[n - 1] = -st[n - 1],
                Op::Add => {
                    n -= 1;
                    st[n - 1] = st[n - 1] + st[n];
                }
                Op::Sub => {
                    n -= 1;
                    st[n - 1] = st[n - 1] - st[n];
                }
                Op::Mul => {
                    n -= 1;
                    st[n - 1] = st[n - 1] * st[n];
                }
                Op::Div => {
                    n -= 1;
                    if st[n].value == 0.0 {
                        return Err(ExprError::Domain(format!("division by zero at x = {x}")));
                    }
                    st[n - 1] = st[n - 1] / st[n];
                }
                Op::Pow(k) => st[n - 1] = pow_jet(st[n - 1], k, x)?,
                Op::Abs => {
                    let u = st[n - 1];
                    if u.value == 0.0 {
                        return Err(ExprError::NonDifferentiable { x });
                    }
                    let s = u.value.signum();
                    st[n - 1] = Jet2::new(u.value.abs(), s * u.d1, s * u.d2);
                }
                Op::Sign => {
                    let u = st[n - 1];
                    if u.value == 0.0 {
                        return Err(ExprError::NonDifferentiable { x });
                    }
                    st[n - 1] = Jet2::constant(u.value.signum());
                }
            }
        }
        Ok(st[0])
    }
}

fn emit(e: &Expr, ops: &mut Vec<Op>) -> Option<()> {
    match e {
        Expr::Const(c) => ops.push(Op::Const(*c)),
        Expr::Var => ops.push(Op::Var),
        Expr::Param(_) => return None,
        Expr::Neg(a) => {
            emit(a, ops)?;
            ops.push(Op::Neg);
        }
        Expr::Abs(a) => {
            emit(a, ops)?;
            ops.push(Op::Abs);
        }
        Expr::Sign(a) => {
            emit(a, ops)?;
            ops.push(Op::Sign);
        }
        Expr::Pow(a, b) => {
            if b.depends_on_x() {
                return None;
            }
            let k = b.eval(0.0, &|_| None).ok()?;
            emit(a, ops)?;
            ops.push(Op::Pow(k));
        }
        Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
            emit(a, ops)?;
            emit(b, ops)?;
            ops.push(match e {
                Expr::Add(..) => Op::Add,
                Expr::Sub(..) => Op::Sub,
                Expr::Mul(..) => Op::Mul,
                _ => Op::Div,
            });
        }
    }
    Some(())
}
