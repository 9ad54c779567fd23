//! Number types shared by every module.
//!
//! Exact work runs on [`Rational`] (arbitrary precision); anything that needs
//! square roots, logarithms or irrational rotation numbers runs on `f64`.
//! Code that must work in both modes is generic over [`Scalar`].

use std::fmt::{Debug, Display};
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::str::FromStr;

use num_bigint::BigInt;
use num_traits::{Signed, ToPrimitive, Zero};

use crate::{Error, Result};

pub type Rational = num_rational::BigRational;

/// Absolute tolerance used by float-mode comparisons.
pub const FLOAT_TOL: f64 = 1e-12;

pub trait Scalar:
    Clone
    + Debug
    + Display
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// True for exact arithmetic, where `approx_eq` is equality.
    const EXACT: bool;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_i64(v: i64) -> Self;
    fn from_ratio(num: i128, den: i128) -> Self;
    fn to_f64(&self) -> f64;
    fn abs(&self) -> Self;

    /// `Some((p, q))` when the value is a ratio of machine integers.
    fn small_ratio(&self) -> Option<(i128, i128)>;

    fn approx_eq(&self, other: &Self) -> bool;

    fn approx_le(&self, other: &Self) -> bool {
        self <= other || self.approx_eq(other)
    }

    fn is_zero_ish(&self) -> bool {
        self.approx_eq(&Self::zero())
    }

    /// Boundary snapping: exact equality for rationals, `|a - b| <= tol` for floats.
    fn near(&self, other: &Self, tol: f64) -> bool;

    fn parse_text(s: &str) -> Result<Self>;

    fn max_of(a: Self, b: Self) -> Self {
        if b > a {
            b
        } else {
            a
        }
    }

    fn min_of(a: Self, b: Self) -> Self {
        if b < a {
            b
        } else {
            a
        }
    }
}

impl Scalar for Rational {
    const EXACT: bool = true;

    fn zero() -> Self {
        <Rational as Zero>::zero()
    }

    fn one() -> Self {
        <Rational as num_traits::One>::one()
    }

    fn from_i64(v: i64) -> Self {
        Rational::from_integer(BigInt::from(v))
    }

    fn from_ratio(num: i128, den: i128) -> Self {
        Rational::new(BigInt::from(num), BigInt::from(den))
    }

    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }

    fn abs(&self) -> Self {
        Signed::abs(self)
    }

    fn small_ratio(&self) -> Option<(i128, i128)> {
        Some((self.numer().to_i128()?, self.denom().to_i128()?))
    }

    fn approx_eq(&self, other: &Self) -> bool {
        self == other
    }

    fn near(&self, other: &Self, _tol: f64) -> bool {
        self == other
    }

    fn parse_text(s: &str) -> Result<Self> {
        parse_rational(s)
    }
}

impl Scalar for f64 {
    const EXACT: bool = false;

    fn zero() -> Self {
        0.0
    }

    fn one() -> Self {
        1.0
    }

    fn from_i64(v: i64) -> Self {
        v as f64
    }

    fn from_ratio(num: i128, den: i128) -> Self {
        num as f64 / den as f64
    }

    fn to_f64(&self) -> f64 {
        *self
    }

    fn abs(&self) -> Self {
        f64::abs(*self)
    }

    fn small_ratio(&self) -> Option<(i128, i128)> {
        None
    }

    fn approx_eq(&self, other: &Self) -> bool {
        f64::abs(self - other) <= FLOAT_TOL * (1.0 + f64::abs(*self).max(f64::abs(*other)))
    }

    fn near(&self, other: &Self, tol: f64) -> bool {
        f64::abs(self - other) <= tol
    }

    fn parse_text(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.contains('/') {
            return Ok(Scalar::to_f64(&parse_rational(s)?));
        }
        f64::from_str(s).map_err(|e| Error::Parse(format!("{s:?}: {e}")))
    }
}

/// Parses `"p/q"`, `"p"` or a finite decimal such as `"0.25"` into an exact rational.
pub fn parse_rational(s: &str) -> Result<Rational> {
    let s = s.trim();
    if let Some((int, frac)) = s.split_once('.') {
        if s.contains('/') || s.contains(['e', 'E']) {
            return Err(Error::Parse(format!("unsupported rational literal {s:?}")));
        }
        let negative = int.starts_with('-');
        let digits = format!("{}{}", int.trim_start_matches(['-', '+']), frac);
        let num = BigInt::from_str(&digits).map_err(|e| Error::Parse(format!("{s:?}: {e}")))?;
        let den = num_traits::pow(BigInt::from(10), frac.len());
        let r = Rational::new(num, den);
        return Ok(if negative { -r } else { r });
    }
    let r = Rational::from_str(s).map_err(|e| Error::Parse(format!("{s:?}: {e}")))?;
    Ok(r)
}

/// Shorthand for building a rational in code and tests.
pub fn ratio(num: i64, den: i64) -> Rational {
    Rational::from_ratio(num as i128, den as i128)
}

/// Sum with a fixed pairwise order, so float reductions are reproducible.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2..=8 => values.iter().sum(),
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}
