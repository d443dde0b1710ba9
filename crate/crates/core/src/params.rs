//! Offspring parameters and exact probability literals.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};

/// Parses `"2/3"`, `"0.75"`, `"1"` or `"1e-3"` into an exact rational.
pub fn parse_rational(s: &str) -> Result<BigRational> {
    let s = s.trim();
    let err = || Error::Parse(s.to_string());
    if let Some((n, d)) = s.split_once('/') {
        let n = BigInt::from_str(n.trim()).map_err(|_| err())?;
        let d = BigInt::from_str(d.trim()).map_err(|_| err())?;
        if d.is_zero() {
            return Err(err());
        }
        return Ok(BigRational::new(n, d));
    }
    let (mantissa, exp) = match s.find(['e', 'E']) {
        Some(i) => (&s[..i], i32::from_str(&s[i + 1..]).map_err(|_| err())?),
        None => (s, 0),
    };
    let (neg, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => (true, m),
        None => (false, mantissa),
    };
    let (int_part, frac_part) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(err());
    }
    if !int_part
        .chars()
        .chain(frac_part.chars())
        .all(|c| c.is_ascii_digit())
    {
        return Err(err());
    }
    let digits = format!("{int_part}{frac_part}");
    let mut num =
        BigInt::from_str(if digits.is_empty() { "0" } else { &digits }).map_err(|_| err())?;
    if neg {
        num = -num;
    }
    let scale = exp - frac_part.len() as i32;
    let ten = BigInt::from(10u32);
    let value = if scale >= 0 {
        BigRational::from_integer(num * num_traits::pow(ten, scale as usize))
    } else {
        BigRational::new(num, num_traits::pow(ten, (-scale) as usize))
    };
    Ok(value)
}

pub fn rational_to_string(r: &BigRational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

pub fn rational_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Arity `d` and retention probability `p` of the binomial offspring law.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OffspringParams {
    d: u32,
    p: BigRational,
}

impl OffspringParams {
    /// Parameters at or above criticality: `d ∈ {2,3}` and `1/d ≤ p ≤ 1`.
    pub fn new(d: u32, p: BigRational) -> Result<Self> {
        if !(2..=3).contains(&d) {
            return Err(Error::Domain(format!("arity d = {d} must be 2 or 3")));
        }
        let lower = BigRational::new(BigInt::one(), BigInt::from(d));
        if p < lower || p > BigRational::one() {
            return Err(Error::Domain(format!(
                "p = {} must lie in [1/{d}, 1]",
                rational_to_string(&p)
            )));
        }
        Ok(Self { d, p })
    }

    /// Any site-percolation density `0 < p ≤ 1`, for unconditioned trees.
    pub fn percolation(d: u32, p: BigRational) -> Result<Self> {
        if !(2..=3).contains(&d) {
            return Err(Error::Domain(format!("arity d = {d} must be 2 or 3")));
        }
        if !p.is_positive() || p > BigRational::one() {
            return Err(Error::Domain(format!(
                "p = {} must lie in (0, 1]",
                rational_to_string(&p)
            )));
        }
        Ok(Self { d, p })
    }

    pub fn parse(d: u32, p: &str) -> Result<Self> {
        Self::new(d, parse_rational(p)?)
    }

    pub fn d(&self) -> u32 {
        self.d
    }

    pub fn p(&self) -> &BigRational {
        &self.p
    }

    pub fn p_f64(&self) -> f64 {
        rational_to_f64(&self.p)
    }

    pub fn is_critical(&self) -> bool {
        self.p == BigRational::new(BigInt::one(), BigInt::from(self.d))
    }

    pub fn at_least_critical(&self) -> bool {
        self.p >= BigRational::new(BigInt::one(), BigInt::from(self.d))
    }
}

impl fmt::Display for OffspringParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d={} p={}", self.d, rational_to_string(&self.p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    #[test]
    fn parses_fractions_and_decimals() {
        assert_eq!(parse_rational("2/3").unwrap(), r(2, 3));
        assert_eq!(parse_rational("0.75").unwrap(), r(3, 4));
        assert_eq!(parse_rational("1").unwrap(), r(1, 1));
        assert_eq!(parse_rational(".5").unwrap(), r(1, 2));
        assert_eq!(parse_rational("1e-3").unwrap(), r(1, 1000));
        assert!(parse_rational("abc").is_err());
        assert!(parse_rational("1/0").is_err());
    }

    #[test]
    fn domain_checks() {
        assert!(OffspringParams::parse(2, "0.5").is_ok());
        assert!(OffspringParams::parse(2, "0.49").is_err());
        assert!(OffspringParams::parse(3, "1/3").unwrap().is_critical());
        assert!(OffspringParams::parse(4, "0.5").is_err());
        assert!(OffspringParams::parse(3, "1.01").is_err());
        assert!(OffspringParams::percolation(2, r(1, 10)).is_ok());
    }
}
