//! Exact summation of non-negative doubles.
//!
//! Every finite `f64` is an integer multiple of `2^-1074`, so a wide enough
//! fixed-point integer holds any sum without rounding. The accumulator is
//! order-independent and mergeable, and [`ExactSum::mean`] rounds once.

use std::cmp::Ordering;

/// Bits from `2^-1074` up to `2^1024`, plus 64 bits of carry headroom.
const LIMBS: usize = 35;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExactSum {
    /// Little-endian limbs; the value is `sum(limbs[i] * 2^(64 i)) * 2^-1074`.
    limbs: [u64; LIMBS],
}

impl Default for ExactSum {
    fn default() -> Self {
        ExactSum { limbs: [0; LIMBS] }
    }
}

fn add_at(limbs: &mut [u64], mut index: usize, value: u128) {
    let mut carry = value;
    while carry != 0 {
        let (sum, overflow) = limbs[index].overflowing_add(carry as u64);
        limbs[index] = sum;
        carry = (carry >> 64) + overflow as u128;
        index += 1;
    }
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a finite, non-negative value. Returns `false` (and adds nothing)
    /// for anything else.
    pub fn add(&mut self, x: f64) -> bool {
        if !(x.is_finite() && x >= 0.0) {
            return false;
        }
        let bits = x.to_bits();
        let exp = (bits >> 52) & 0x7ff;
        let frac = bits & ((1 << 52) - 1);
        let (mant, shift) = if exp == 0 { (frac, 0) } else { (frac | (1 << 52), exp - 1) };
        if mant != 0 {
            let (index, offset) = ((shift / 64) as usize, shift % 64);
            add_at(&mut self.limbs, index, (mant as u128) << offset);
        }
        true
    }

    pub fn merge(&mut self, other: &ExactSum) {
        let mut carry = 0u128;
        for (a, &b) in self.limbs.iter_mut().zip(&other.limbs) {
            let s = *a as u128 + b as u128 + carry;
            *a = s as u64;
            carry = s >> 64;
        }
        debug_assert_eq!(carry, 0, "exact sum overflow");
    }

    pub fn is_zero(&self) -> bool {
        self.limbs.iter().all(|&l| l == 0)
    }

    /// The sum rounded to nearest, ties to even.
    pub fn value(&self) -> f64 {
        self.mean(1)
    }

    /// `sum / count` rounded once to nearest, ties to even.
    pub fn mean(&self, count: u64) -> f64 {
        assert!(count > 0, "mean of zero samples");
        // Shift left by one limb so the quotient keeps 64 fractional bits;
        // the remainder only matters as a sticky bit.
        let mut wide = [0u64; LIMBS + 1];
        wide[1..].copy_from_slice(&self.limbs);
        let mut rem = 0u128;
        for limb in wide.iter_mut().rev() {
            let cur = (rem << 64) | *limb as u128;
            *limb = (cur / count as u128) as u64;
            rem = cur % count as u128;
        }
        round_to_f64(&wide, rem != 0)
    }
}

fn bit_len(limbs: &[u64]) -> usize {
    limbs
        .iter()
        .rposition(|&l| l != 0)
        .map_or(0, |i| 64 * i + 64 - limbs[i].leading_zeros() as usize)
}

fn bit(limbs: &[u64], i: usize) -> bool {
    (limbs[i / 64] >> (i % 64)) & 1 == 1
}

fn any_below(limbs: &[u64], i: usize) -> bool {
    let (full, part) = (i / 64, i % 64);
    limbs[..full].iter().any(|&l| l != 0) || (part > 0 && limbs[full] & ((1u64 << part) - 1) != 0)
}

fn bits_from(limbs: &[u64], start: usize, count: usize) -> u64 {
    let mut out = 0u64;
    for j in (0..count).rev() {
        let i = start + j;
        out = (out << 1) | (i / 64 < limbs.len() && bit(limbs, i)) as u64;
    }
    out
}

/// Round `q * 2^-1138` (little-endian limbs) to the nearest double.
fn round_to_f64(q: &[u64], sticky: bool) -> f64 {
    const SCALE: usize = 1138;
    let len = bit_len(q);
    if len == 0 {
        return 0.0;
    }
    // The unit in the last place sits at bit `drop`; below 2^-1022 the grid
    // is fixed at 2^-1074, i.e. bit 64.
    let drop = len.saturating_sub(53).max(64);
    let mut mant = bits_from(q, drop, 53);
    let half = bit(q, drop - 1);
    let rest = any_below(q, drop - 1) || sticky;
    let round_up = match (half, rest) {
        (false, _) => false,
        (true, true) => true,
        (true, false) => mant & 1 == 1,
    };
    mant += round_up as u64;
    let mut e2 = drop as i64 - SCALE as i64;
    if mant == 1 << 53 {
        mant >>= 1;
        e2 += 1;
    }
    let bits = if mant >= 1 << 52 {
        let biased = e2 + 1075;
        if biased >= 0x7ff {
            return f64::INFINITY;
        }
        ((biased as u64) << 52) | (mant - (1 << 52))
    } else {
        mant
    };
    f64::from_bits(bits)
}

impl PartialOrd for ExactSum {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ExactSum {
    fn cmp(&self, other: &Self) -> Ordering {
        self.limbs.iter().rev().cmp(other.limbs.iter().rev())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sum_of(xs: &[f64]) -> ExactSum {
        let mut s = ExactSum::new();
        for &x in xs {
            assert!(s.add(x));
        }
        s
    }

    #[test]
    fn single_values_round_trip() {
        for x in [0.0, 1.0, 0.1, 2.5e-300, f64::MIN_POSITIVE, 5e-324, 1e308, f64::MAX, 0.693147] {
            assert_eq!(sum_of(&[x]).value(), x, "{x:e}");
            assert_eq!(sum_of(&[x]).mean(1), x);
        }
    }

    #[test]
    fn constant_stream_mean_is_exact() {
        for c in [0.1, 0.3, 0.7135, 1.0 / 3.0, 12.5] {
            for n in [1u64, 2, 3, 7, 1000, 100_000] {
                let mut s = ExactSum::new();
                for _ in 0..n {
                    s.add(c);
                }
                assert_eq!(s.mean(n), c, "c={c} n={n}");
            }
        }
    }

    #[test]
    fn cancellation_free_small_terms() {
        // 1e16 + 1 + 1 loses both ones in naive f64 summation.
        let s = sum_of(&[1e16, 1.0, 1.0]);
        assert_eq!(s.value(), 1e16 + 2.0);
    }

    #[test]
    fn mean_rounds_correctly() {
        assert_eq!(sum_of(&[0.2, 0.4]).mean(2), 0.30000000000000004);
        assert_eq!(sum_of(&[1.0, 2.0]).mean(3), 1.0);
        assert_eq!(sum_of(&[1.0]).mean(3), 1.0 / 3.0);
        assert_eq!(sum_of(&[2.0]).mean(3), 2.0 / 3.0);
        assert_eq!(sum_of(&[5e-324]).mean(2), 0.0);
        assert_eq!(sum_of(&[5e-324, 5e-324, 5e-324]).mean(2), 1e-323);
    }

    #[test]
    fn rejects_negative_and_non_finite() {
        let mut s = ExactSum::new();
        assert!(!s.add(-1.0));
        assert!(!s.add(f64::NAN));
        assert!(!s.add(f64::INFINITY));
        assert!(s.is_zero());
    }

    #[test]
    fn large_sums_do_not_overflow() {
        let mut s = ExactSum::new();
        for _ in 0..1000 {
            s.add(f64::MAX);
        }
        assert_eq!(s.mean(1000), f64::MAX);
        assert_eq!(s.value(), f64::INFINITY);
    }

    proptest! {
        #[test]
        fn order_and_partition_independent(xs in proptest::collection::vec(0.0f64..1e6, 0..200), split in 0usize..200) {
            let mut rev = xs.clone();
            rev.reverse();
            let a = sum_of(&xs);
            prop_assert_eq!(&a, &sum_of(&rev));
            let cut = split.min(xs.len());
            let mut left = sum_of(&xs[..cut]);
            left.merge(&sum_of(&xs[cut..]));
            prop_assert_eq!(&a, &left);
        }

        #[test]
        fn mean_matches_rational_reference(xs in proptest::collection::vec(1e-3f64..1e3, 1..50)) {
            let n = xs.len() as f64;
            let naive = xs.iter().sum::<f64>() / n;
            let exact = sum_of(&xs).mean(xs.len() as u64);
            prop_assert!((exact - naive).abs() <= 1e-12 * naive.abs());
        }

        #[test]
        fn single_value_mean_by_count(x in 0.0f64..1e300, n in 1u64..1000) {
            let mut s = ExactSum::new();
            for _ in 0..n { s.add(x); }
            prop_assert_eq!(s.mean(n), x);
        }
    }
}
