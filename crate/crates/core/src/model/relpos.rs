//! Log-bucketed relative positions.
//!
//! The bucket of a distance `d >= e` (with `e = num_buckets / 2` exact
//! buckets) is `e + floor(e · ln(d/e) / ln(max_distance/e))`, capped at the
//! last bucket. The floor is evaluated exactly: `j <= floor(...)` iff
//! `d^e · e^j >= max_distance^j · e^e`, so distances that sit on a bucket
//! boundary (32, 64, … for `max_distance = 4096`) are never misplaced by
//! rounding in `ln`.

use num_bigint::BigUint;

use crate::error::{Error, Result};

fn check(num_buckets: usize, max_distance: usize) -> Result<usize> {
    let exact = num_buckets / 2;
    if num_buckets < 2 || num_buckets % 2 != 0 {
        return Err(Error::invalid(format!("num_buckets must be even and >= 2, got {num_buckets}")));
    }
    if max_distance <= exact {
        return Err(Error::invalid(format!(
            "max_distance {max_distance} must exceed the {exact} exact buckets"
        )));
    }
    Ok(exact)
}

/// Bucket of a non-negative distance.
pub fn bucket_of_distance(d: usize, num_buckets: usize, max_distance: usize) -> Result<usize> {
    let exact = check(num_buckets, max_distance)?;
    Ok(bucket_unchecked(d, exact, max_distance))
}

fn bucket_unchecked(d: usize, exact: usize, max_distance: usize) -> usize {
    if d < exact {
        return d;
    }
    let e = exact as u32;
    let lhs_base = BigUint::from(d).pow(e);
    let rhs_base = BigUint::from(exact).pow(e);
    let md = BigUint::from(max_distance);
    let ex = BigUint::from(exact);
    // Largest j in 1..=exact with d^e · e^j >= md^j · e^e; the cap keeps j < exact.
    let mut j = 0;
    let mut lhs = lhs_base;
    let mut rhs = rhs_base;
    while j < exact - 1 {
        lhs *= &ex;
        rhs *= &md;
        if lhs < rhs {
            break;
        }
        j += 1;
    }
    exact + j
}

/// Bucket for a (query, key) pair. Only causal pairs are defined.
pub fn relpos_bucket(query_pos: usize, key_pos: usize, num_buckets: usize, max_distance: usize) -> Result<usize> {
    if key_pos > query_pos {
        return Err(Error::invalid(format!(
            "key position {key_pos} is after query position {query_pos}"
        )));
    }
    bucket_of_distance(query_pos - key_pos, num_buckets, max_distance)
}

/// Buckets for distances `0..len`.
pub fn bucket_table(len: usize, num_buckets: usize, max_distance: usize) -> Result<Vec<usize>> {
    let exact = check(num_buckets, max_distance)?;
    let mut out = Vec::with_capacity(len);
    for d in 0..len {
        // Beyond max_distance every distance lands in the last bucket.
        let b = if d >= max_distance {
            num_buckets - 1
        } else {
            bucket_unchecked(d, exact, max_distance)
        };
        out.push(b);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_range_and_cap() {
        for d in 0..16 {
            assert_eq!(bucket_of_distance(d, 32, 4096).unwrap(), d);
        }
        for md in [128, 1024, 4096] {
            assert_eq!(bucket_of_distance(md, 32, md).unwrap(), 31);
        }
        assert_eq!(bucket_of_distance(16, 32, 4096).unwrap(), 16);
        assert!(relpos_bucket(3, 4, 32, 128).is_err());
        assert!(bucket_of_distance(0, 31, 128).is_err());
        assert!(bucket_of_distance(0, 32, 16).is_err());
    }

    #[test]
    fn boundaries_at_powers_of_two_for_4096() {
        // 16·256^(j/16) is an integer power of two for even j.
        assert_eq!(bucket_of_distance(31, 32, 4096).unwrap(), 17);
        assert_eq!(bucket_of_distance(32, 32, 4096).unwrap(), 18);
        assert_eq!(bucket_of_distance(63, 32, 4096).unwrap(), 19);
        assert_eq!(bucket_of_distance(64, 32, 4096).unwrap(), 20);
        assert_eq!(bucket_of_distance(2048, 32, 4096).unwrap(), 30);
    }

    #[test]
    fn table_matches_pointwise() {
        let t = bucket_table(300, 32, 128).unwrap();
        for (d, &b) in t.iter().enumerate() {
            assert_eq!(b, if d >= 128 { 31 } else { bucket_of_distance(d, 32, 128).unwrap() });
        }
    }
}
