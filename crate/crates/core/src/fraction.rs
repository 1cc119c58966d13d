//! Exact rational numbers for utilization arithmetic.
//!
//! MFU values are ratios of FLOP counts, device peaks and integer-microsecond
//! times. Carrying them as big rationals keeps algebraically equal routes
//! (simulated MFU vs. the stage-to-model reconstruction, speedup antisymmetry)
//! equal bit for bit instead of equal up to rounding.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Div, Mul, Sub};
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot parse {input:?} as a decimal fraction")]
pub struct ParseFractionError {
    pub input: String,
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Fraction(BigRational);

impl Fraction {
    pub fn zero() -> Self {
        Fraction(BigRational::zero())
    }

    pub fn one() -> Self {
        Fraction(BigRational::one())
    }

    pub fn from_integer(n: impl Into<BigInt>) -> Self {
        Fraction(BigRational::from_integer(n.into()))
    }

    pub fn new(numer: impl Into<BigInt>, denom: impl Into<BigInt>) -> Self {
        Fraction(BigRational::new(numer.into(), denom.into()))
    }

    /// Exact value of a finite `f64`. Panics on NaN or infinity.
    pub fn from_f64(x: f64) -> Self {
        Fraction(BigRational::from_float(x).expect("finite f64"))
    }

    pub fn to_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn is_positive(&self) -> bool {
        self.0.is_positive()
    }

    pub fn recip(&self) -> Self {
        Fraction(self.0.recip())
    }

    pub fn as_ratio(&self) -> &BigRational {
        &self.0
    }

    /// Rounds to `digits` significant digits for display.
    pub fn to_sig_string(&self, digits: usize) -> String {
        format_sig(self.to_f64(), digits)
    }
}

/// Formats `x` with `digits` significant digits, without exponent notation
/// for the magnitudes this crate reports.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x:.prec$}", prec = digits.saturating_sub(1));
    }
    let magnitude = x.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

impl FromStr for Fraction {
    type Err = ParseFractionError;

    /// Accepts `0.378`, `37.8%`, `1/3`, `2` and a leading sign.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseFractionError { input: s.to_string() };
        let trimmed = s.trim();
        let (body, percent) = match trimmed.strip_suffix('%') {
            Some(b) => (b.trim_end(), true),
            None => (trimmed, false),
        };
        if body.is_empty() {
            return Err(err());
        }
        let value = if let Some((n, d)) = body.split_once('/') {
            let n: BigInt = n.trim().parse().map_err(|_| err())?;
            let d: BigInt = d.trim().parse().map_err(|_| err())?;
            if d.is_zero() {
                return Err(err());
            }
            BigRational::new(n, d)
        } else {
            let (neg, digits) = match body.as_bytes()[0] {
                b'-' => (true, &body[1..]),
                b'+' => (false, &body[1..]),
                _ => (false, body),
            };
            let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
            if int_part.is_empty() && frac_part.is_empty() {
                return Err(err());
            }
            if !int_part.bytes().chain(frac_part.bytes()).all(|c| c.is_ascii_digit()) {
                return Err(err());
            }
            let all = format!("{int_part}{frac_part}");
            let numer: BigInt = all.parse().map_err(|_| err())?;
            let denom = num_traits::pow(BigInt::from(10u32), frac_part.len());
            let r = BigRational::new(numer, denom);
            if neg {
                -r
            } else {
                r
            }
        };
        let value = if percent {
            value / BigRational::from_integer(BigInt::from(100u32))
        } else {
            value
        };
        Ok(Fraction(value))
    }
}

impl fmt::Debug for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (~{})", self.0, self.to_f64())
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", format_sig(self.to_f64(), 3))
    }
}

impl PartialOrd for Fraction {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Fraction {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.cmp(&other.0)
    }
}

macro_rules! forward_binop {
    ($trait:ident, $method:ident) => {
        impl $trait for Fraction {
            type Output = Fraction;
            fn $method(self, rhs: Fraction) -> Fraction {
                Fraction(self.0.$method(rhs.0))
            }
        }
        impl<'a> $trait<&'a Fraction> for &'a Fraction {
            type Output = Fraction;
            fn $method(self, rhs: &'a Fraction) -> Fraction {
                Fraction((&self.0).$method(&rhs.0))
            }
        }
    };
}

forward_binop!(Add, add);
forward_binop!(Sub, sub);
forward_binop!(Mul, mul);
forward_binop!(Div, div);

impl From<u64> for Fraction {
    fn from(n: u64) -> Self {
        Fraction::from_integer(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_decimals_and_percentages() {
        assert_eq!("0.378".parse::<Fraction>().unwrap(), Fraction::new(378, 1000));
        assert_eq!("37.8%".parse::<Fraction>().unwrap(), Fraction::new(378, 1000));
        assert_eq!("1/3".parse::<Fraction>().unwrap(), Fraction::new(1, 3));
        assert_eq!("-2".parse::<Fraction>().unwrap(), Fraction::from_integer(-2));
        assert_eq!(".5".parse::<Fraction>().unwrap(), Fraction::new(1, 2));
    }

    #[test]
    fn rejects_garbage() {
        for bad in ["", "%", "abc", "1/0", "1.2.3", "0x10", "."] {
            assert!(bad.parse::<Fraction>().is_err(), "{bad:?} should not parse");
        }
    }

    #[test]
    fn f64_conversion_is_exact() {
        let x = 0.1f64;
        assert_eq!(Fraction::from_f64(x).to_f64(), x);
        assert_eq!(Fraction::from_f64(0.5), Fraction::new(1, 2));
    }

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(format_sig(0.358_4, 3), "0.358");
        assert_eq!(format_sig(1.388, 3), "1.39");
        assert_eq!(format_sig(45.8, 3), "45.8");
        assert_eq!(format_sig(1234.4, 3), "1234");
        assert_eq!(format_sig(0.0, 3), "0.00");
    }
}
