//! Second-order forward-mode jets.
//!
//! A [`Jet2`] carries a value together with its first and second derivative
//! with respect to a single real variable. Arithmetic on jets applies the
//! product, quotient and chain rules, so evaluating an expression tree on the
//! seed jet `(x, 1, 0)` yields `(f(x), f'(x), f''(x))` exactly up to rounding.

use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jet2 {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Jet2 {
    pub const fn new(value: f64, d1: f64, d2: f64) -> Self {
        Self { value, d1, d2 }
    }

    /// The independent variable seeded at `x`.
    pub const fn variable(x: f64) -> Self {
        Self::new(x, 1.0, 0.0)
    }

    pub const fn constant(c: f64) -> Self {
        Self::new(c, 0.0, 0.0)
    }

    /// Apply a scalar function `g` given `g(u)`, `g'(u)` and `g''(u)`.
    #[inline]
    pub fn chain(self, g0: f64, g1: f64, g2: f64) -> Self {
        Self::new(g0, g1 * self.d1, g2 * self.d1 * self.d1 + g1 * self.d2)
    }

    pub fn scale(self, k: f64) -> Self {
        Self::new(k * self.value, k * self.d1, k * self.d2)
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.d1.is_finite() && self.d2.is_finite()
    }
}

impl Add for Jet2 {
    type Output = Jet2;
    #[inline]
    fn add(self, rhs: Jet2) -> Jet2 {
        Jet2::new(self.value + rhs.value, self.d1 + rhs.d1, self.d2 + rhs.d2)
    }
}

impl Sub for Jet2 {
    type Output = Jet2;
    #[inline]
    fn sub(self, rhs: Jet2) -> Jet2 {
        Jet2::new(self.value - rhs.value, self.d1 - rhs.d1, self.d2 - rhs.d2)
    }
}

impl Neg for Jet2 {
    type Output = Jet2;
    #[inline]
    fn neg(self) -> Jet2 {
        Jet2::new(-self.value, -self.d1, -self.d2)
    }
}

impl Mul for Jet2 {
    type Output = Jet2;
    #[inline]
    fn mul(self, rhs: Jet2) -> Jet2 {
        Jet2::new(
            self.value * rhs.value,
            self.d1 * rhs.value + self.value * rhs.d1,
            self.d2 * rhs.value + 2.0 * self.d1 * rhs.d1 + self.value * rhs.d2,
        )
    }
}

/// Quotient rule. The caller is responsible for rejecting a zero divisor.
impl Div for Jet2 {
    type Output = Jet2;
    #[inline]
    fn div(self, rhs: Jet2) -> Jet2 {
        let q = self.value / rhs.value;
        let q1 = (self.d1 - q * rhs.d1) / rhs.value;
        let q2 = (self.d2 - 2.0 * q1 * rhs.d1 - q * rhs.d2) / rhs.value;
        Jet2::new(q, q1, q2)
    }
}
