//! Exact rationals and their `"p/q"` string form.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::str::FromStr;

pub type Q = BigRational;

pub fn q(n: i64, d: i64) -> Q {
    Q::new(BigInt::from(n), BigInt::from(d))
}

pub fn qi(n: i64) -> Q {
    Q::from_integer(BigInt::from(n))
}

pub fn parse_q(s: &str) -> Option<Q> {
    let s = s.trim();
    let (n, d) = match s.split_once('/') {
        Some((n, d)) => (n.trim(), d.trim()),
        None => (s, "1"),
    };
    let n = BigInt::from_str(n).ok()?;
    let d = BigInt::from_str(d).ok()?;
    if d.is_zero() {
        return None;
    }
    Some(Q::new(n, d))
}

pub fn fmt_q(v: &Q) -> String {
    if v.denom().is_one() {
        v.numer().to_string()
    } else {
        format!("{}/{}", v.numer(), v.denom())
    }
}

pub fn to_f64(v: &Q) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

pub fn is_positive(v: &Q) -> bool {
    v.is_positive()
}

/// Serde wrapper that stores a rational as a `"p/q"` string.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rational(pub Q);

impl fmt::Debug for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", fmt_q(&self.0))
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", fmt_q(&self.0))
    }
}

impl Serialize for Rational {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&fmt_q(&self.0))
    }
}

impl<'de> Deserialize<'de> for Rational {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_q(&s)
            .map(Rational)
            .ok_or_else(|| serde::de::Error::custom(format!("not a rational \"p/q\": {s:?}")))
    }
}

/// Solve for the stationary row vector of an irreducible stochastic matrix,
/// normalized so that its entries sum to `total`.
pub fn stationary(matrix: &[Vec<Q>], total: &Q) -> Option<Vec<Q>> {
    let n = matrix.len();
    if n == 0 {
        return Some(Vec::new());
    }
    // Rows: (P^T - I) pi = 0 for the first n-1 equations, sum(pi) = total last.
    let mut a: Vec<Vec<Q>> = (0..n)
        .map(|r| {
            let mut row: Vec<Q> = (0..n)
                .map(|c| {
                    let mut v = matrix[c][r].clone();
                    if r == c {
                        v -= Q::one();
                    }
                    v
                })
                .collect();
            row.push(Q::zero());
            row
        })
        .collect();
    a[n - 1] = vec![Q::one(); n];
    a[n - 1].push(total.clone());
    gauss_solve(a)
}

fn gauss_solve(mut a: Vec<Vec<Q>>) -> Option<Vec<Q>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n).find(|&r| !a[r][col].is_zero())?;
        a.swap(col, pivot);
        let inv = Q::one() / a[col][col].clone();
        for v in a[col].iter_mut() {
            *v *= inv.clone();
        }
        for r in 0..n {
            if r != col && !a[r][col].is_zero() {
                let f = a[r][col].clone();
                for c in col..=n {
                    let sub = f.clone() * a[col][c].clone();
                    a[r][c] -= sub;
                }
            }
        }
    }
    Some(a.into_iter().map(|row| row[n].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_formats() {
        assert_eq!(parse_q("3/6"), Some(q(1, 2)));
        assert_eq!(parse_q("-2"), Some(qi(-2)));
        assert_eq!(parse_q("1/0"), None);
        assert_eq!(parse_q("x"), None);
        assert_eq!(fmt_q(&q(4, 2)), "2");
        assert_eq!(fmt_q(&q(-1, 3)), "-1/3");
    }

    #[test]
    fn stationary_of_two_state_chain() {
        // P = [[1/2,1/2],[1/4,3/4]] -> pi = (1/3, 2/3)
        let p = vec![vec![q(1, 2), q(1, 2)], vec![q(1, 4), q(3, 4)]];
        assert_eq!(stationary(&p, &qi(1)).unwrap(), vec![q(1, 3), q(2, 3)]);
    }
}
