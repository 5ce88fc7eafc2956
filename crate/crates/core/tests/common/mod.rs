//! Exact-arithmetic oracles shared by the integration tests. Nothing here
//! calls into the library's own enumeration or arithmetic.
#![allow(dead_code)]

use std::collections::BTreeSet;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use potaccel::shift_arith::FixedPointValue;

pub fn rat(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

pub fn pow2(e: i32) -> BigRational {
    let one = BigInt::one();
    if e >= 0 {
        BigRational::from_integer(one << e as usize)
    } else {
        BigRational::new(one.clone(), one << (-e) as usize)
    }
}

pub fn fixed(v: &FixedPointValue) -> BigRational {
    BigRational::new(BigInt::from(v.raw()), BigInt::one() << v.frac_bits() as usize)
}

/// `{0, +-2^-k : k = 0 .. 2^(bits-1) - 1}`, scaled by `alpha`.
pub fn brute_pot(bits: u32, alpha: f64) -> Vec<BigRational> {
    let mut set = BTreeSet::new();
    set.insert(BigRational::zero());
    for k in 0..(1i32 << (bits - 1)) {
        set.insert(pow2(-k));
        set.insert(-pow2(-k));
    }
    let a = rat(alpha);
    set.into_iter().map(|v| v * &a).collect()
}

/// Every sum of one pick per branch, where a `b`-bit branch offers
/// `{0, +-2^-k : k = 1 .. 2^b - 1}`; scaled by `alpha`.
pub fn brute_spx(branches: &[u32], alpha: f64) -> Vec<BigRational> {
    let mut sums = BTreeSet::new();
    sums.insert(BigRational::zero());
    for &b in branches {
        let mut picks = vec![BigRational::zero()];
        for k in 1..(1i32 << b) {
            picks.push(pow2(-k));
            picks.push(-pow2(-k));
        }
        let mut next = BTreeSet::new();
        for s in &sums {
            for p in &picks {
                next.insert(s + p);
            }
        }
        sums = next;
    }
    let a = rat(alpha);
    sums.into_iter().map(|v| v * &a).collect()
}

/// Nearest element by exhaustive scan; ties go to the smaller magnitude.
pub fn brute_nearest(levels: &[f64], x: f64) -> f64 {
    let mut best = levels[0];
    for &l in levels {
        let (d, db) = ((l - x).abs(), (best - x).abs());
        if d < db || (d == db && l.abs() < best.abs()) {
            best = l;
        }
    }
    best
}
