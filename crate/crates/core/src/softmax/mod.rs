//! Softmax schemes over a logit vector.
//!
//! * [`softmax_reference`]: whole-vector softmax in `f64`, the oracle.
//! * [`partial_softmax_sync`]: split into contiguous chunks, each with its own
//!   running max; chunks must be rescaled against each other before
//!   normalisation.
//! * [`softmax_unified`]: every element is scaled by one shared constant
//!   `phi` instead of the max, so chunks never need to see each other. Valid
//!   only while `x - phi` stays inside the band recorded in a
//!   [`ScalingCalibration`]; outside of it the exponent can overflow.

mod calibration;

use std::ops::Range;

pub use calibration::{
    calibrate, check_bounds, load_samples, BoundsCheck, ScalingCalibration, SyntheticDist, DEFAULT_MARGIN,
    EXP_LOWER_LIMIT, EXP_UPPER_LIMIT,
};

use crate::error::{Error, Result};

/// Running `(max, sum of exp(x - max))` over the elements absorbed so far.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartialSoftmaxState {
    pub max: f32,
    pub sum: f32,
}

impl PartialSoftmaxState {
    /// Identity for [`merge`](Self::merge): nothing absorbed.
    pub const EMPTY: Self = Self { max: f32::NEG_INFINITY, sum: 0.0 };

    /// Two passes over `x`: max, then the exponential sum in element order.
    pub fn from_slice(x: &[f32]) -> Self {
        if x.is_empty() {
            return Self::EMPTY;
        }
        let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum = x.iter().map(|&v| (v - max).exp()).sum();
        Self { max, sum }
    }

    pub fn is_empty(&self) -> bool {
        self.sum == 0.0 && self.max == f32::NEG_INFINITY
    }

    /// Combines two partial states over disjoint element sets.
    ///
    /// The formula is symmetric in its arguments so the result is bitwise
    /// commutative.
    pub fn merge(self, other: Self) -> Self {
        if other.is_empty() {
            return self;
        }
        if self.is_empty() {
            return other;
        }
        let max = self.max.max(other.max);
        let sum = (self.max - max).exp() * self.sum + (other.max - max).exp() * other.sum;
        Self { max, sum }
    }
}

/// Contiguous equal splits of `0..len`; the last range takes the remainder.
pub(crate) fn chunk_ranges(len: usize, parts: usize) -> impl Iterator<Item = Range<usize>> {
    let size = len / parts;
    (0..parts).map(move |j| {
        let start = j * size;
        let end = if j + 1 == parts { len } else { start + size };
        start..end
    })
}

pub(crate) fn check_partitions(len: usize, parts: usize) -> Result<()> {
    if parts == 0 || parts > len {
        return Err(Error::InvalidPartition { parts, len });
    }
    Ok(())
}

fn check_logits(x: &[f32]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index, value: x[index] });
    }
    Ok(())
}

/// `f64` softmax, stabilised by the true max.
pub fn softmax_reference_f64(x: &[f32]) -> Result<Vec<f64>> {
    check_logits(x)?;
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = x.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Reference softmax: computed in `f64`, rounded to `f32`.
pub fn softmax_reference(x: &[f32]) -> Result<Vec<f32>> {
    Ok(softmax_reference_f64(x)?.into_iter().map(|v| v as f32).collect())
}

/// Chunked softmax with per-chunk maxima merged after the fact.
pub fn partial_softmax_sync(x: &[f32], parts: usize) -> Result<Vec<f32>> {
    check_logits(x)?;
    check_partitions(x.len(), parts)?;

    let chunks: Vec<(PartialSoftmaxState, Vec<f32>)> = chunk_ranges(x.len(), parts)
        .map(|r| {
            let chunk = &x[r];
            let max = chunk.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f32> = chunk.iter().map(|&v| (v - max).exp()).collect();
            let sum = exps.iter().sum();
            (PartialSoftmaxState { max, sum }, exps)
        })
        .collect();

    let global = chunks.iter().fold(PartialSoftmaxState::EMPTY, |acc, (s, _)| acc.merge(*s));

    let mut out = Vec::with_capacity(x.len());
    for (state, exps) in &chunks {
        let rescale = (state.max - global.max).exp();
        out.extend(exps.iter().map(|&e| e * rescale / global.sum));
    }
    Ok(out)
}

/// Softmax scaled by the fixed constant `phi` instead of the max.
///
/// Fails with [`Error::Overflow`] at the first index whose exponential (or
/// the running sum including it) is not finite, and with
/// [`Error::DegenerateSum`] when every exponential underflows.
pub fn softmax_unified(x: &[f32], phi: f32) -> Result<Vec<f32>> {
    check_logits(x)?;
    let mut exps = Vec::with_capacity(x.len());
    let mut sum = 0.0f32;
    for (index, &v) in x.iter().enumerate() {
        let e = (v - phi).exp();
        sum += e;
        if !e.is_finite() || !sum.is_finite() {
            return Err(Error::Overflow { index });
        }
        exps.push(e);
    }
    if sum == 0.0 {
        return Err(Error::DegenerateSum);
    }
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: log-sum-exp form, summed in reverse order.
    fn lse_softmax(x: &[f32]) -> Vec<f64> {
        let xs: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + xs.iter().rev().map(|v| (v - max).exp()).sum::<f64>().ln();
        xs.iter().map(|v| (v - lse).exp()).collect()
    }

    fn max_rel(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs() / (y as f64).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn reference_uniform() {
        for c in [-50.0f32, 0.0, 3.5, 80.0] {
            assert_eq!(softmax_reference(&[c; 4]).unwrap(), vec![0.25; 4]);
        }
    }

    #[test]
    fn reference_ln3() {
        let out = softmax_reference(&[0.0, 3f32.ln()]).unwrap();
        assert!((out[0] - 0.25).abs() < 1e-7);
        assert!((out[1] - 0.75).abs() < 1e-7);
    }

    #[test]
    fn reference_matches_independent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x: Vec<f32> = (0..64).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let got = softmax_reference_f64(&x).unwrap();
        let want = lse_softmax(&x);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reference_rejects_bad_input() {
        assert!(matches!(softmax_reference(&[]), Err(Error::EmptyInput)));
        assert!(matches!(softmax_reference(&[0.0, f32::NAN]), Err(Error::NonFinite { index: 1, .. })));
    }

    #[test]
    fn merge_identity_and_symmetry() {
        let s = PartialSoftmaxState::from_slice(&[0.5, -1.0, 2.0]);
        assert_eq!(s.merge(PartialSoftmaxState::EMPTY), s);
        assert_eq!(PartialSoftmaxState::EMPTY.merge(s), s);

        let s1 = PartialSoftmaxState::from_slice(&[1.0, 2.0]);
        let s2 = PartialSoftmaxState::from_slice(&[3.0, 4.0]);
        let (a, b) = (s1.merge(s2), s2.merge(s1));
        assert_eq!(a.max.to_bits(), b.max.to_bits());
        assert_eq!(a.sum.to_bits(), b.sum.to_bits());
    }

    #[test]
    fn merge_matches_direct_state() {
        let merged = PartialSoftmaxState::from_slice(&[1.0, 2.0]).merge(PartialSoftmaxState::from_slice(&[3.0, 4.0]));
        let direct = PartialSoftmaxState::from_slice(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(merged.max, direct.max);
        // 1 + e^-1 + e^-2 + e^-3, evaluated in f64
        let want = 1.0 + (-1f64).exp() + (-2f64).exp() + (-3f64).exp();
        assert!((merged.sum as f64 - want).abs() / want < 1e-6);
        assert!((direct.sum as f64 - want).abs() / want < 1e-6);
    }

    #[test]
    fn sync_degenerate_and_small_cases() {
        let x = [1.0f32, 2.0, 3.0, 4.0];
        let r = softmax_reference(&x).unwrap();
        // single chunk: f32 evaluation of the reference formula
        assert!(max_rel(&partial_softmax_sync(&x, 1).unwrap(), &r) < 1e-6);
        assert!(max_rel(&partial_softmax_sync(&x, 2).unwrap(), &r) < 1e-6);
        assert!(max_rel(&partial_softmax_sync(&x, 4).unwrap(), &r) < 1e-6);
        assert!(matches!(partial_softmax_sync(&x, 0), Err(Error::InvalidPartition { .. })));
        assert!(matches!(partial_softmax_sync(&x, 5), Err(Error::InvalidPartition { .. })));
    }

    #[test]
    fn chunk_ranges_remainder_goes_last() {
        let r: Vec<_> = chunk_ranges(10, 4).collect();
        assert_eq!(r, vec![0..2, 2..4, 4..6, 6..10]);
        let r: Vec<_> = chunk_ranges(3, 3).collect();
        assert_eq!(r, vec![0..1, 1..2, 2..3]);
    }

    #[test]
    fn unified_examples() {
        let x = [1.0f32, 2.0, 3.0];
        let a = softmax_unified(&x, 0.0).unwrap();
        let b = softmax_unified(&x, 2.0).unwrap();
        assert!(max_rel(&a, &b) < 1e-6);
        assert_eq!(argmax(&a), argmax(&b));

        let u = softmax_unified(&[5.0; 8], 5.0).unwrap();
        assert!(u.iter().all(|&v| v == 0.125));

        assert!(matches!(softmax_unified(&[100.0], 0.0), Err(Error::Overflow { index: 0 })));
        assert!(matches!(softmax_unified(&[0.0, 1.0, 95.0], 0.0), Err(Error::Overflow { index: 2 })));
        assert!(matches!(softmax_unified(&[-200.0, -300.0], 0.0), Err(Error::DegenerateSum)));
    }

    #[test]
    fn unified_sum_overflow_is_reported() {
        // each term ~1.45e38 is finite; the third pushes the sum past f32::MAX
        assert!(matches!(softmax_unified(&[87.8, 87.8, 87.8], 0.0), Err(Error::Overflow { index: 2 })));
    }

    fn argmax(v: &[f32]) -> usize {
        v.iter().enumerate().fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) }).0
    }

    fn logits(max_len: usize, lo: f32, hi: f32) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(lo..hi, 1..max_len)
    }

    proptest! {
        #[test]
        fn unified_matches_reference_when_safe(x in logits(256, -40.0, 40.0), phi in -40.0f32..40.0) {
            let got = softmax_unified(&x, phi).unwrap();
            let want = softmax_reference(&x).unwrap();
            prop_assert!(max_rel(&got, &want) <= 1e-5);
        }

        #[test]
        fn phi_invariance(x in logits(256, -20.0, 20.0), phi1 in -20.0f32..20.0, phi2 in -20.0f32..20.0) {
            let a = softmax_unified(&x, phi1).unwrap();
            let b = softmax_unified(&x, phi2).unwrap();
            prop_assert!(max_rel(&a, &b) <= 1e-5);
            let want = softmax_reference(&x).unwrap();
            prop_assert_eq!(argmax(&a), argmax(&want));
            prop_assert_eq!(argmax(&b), argmax(&want));
        }

        #[test]
        fn sync_is_independent_of_partitions(x in logits(128, -30.0, 30.0), seed in 0usize..1000) {
            let p = 1 + seed % x.len();
            let base = partial_softmax_sync(&x, 1).unwrap();
            let split = partial_softmax_sync(&x, p).unwrap();
            for (s, b) in split.iter().zip(&base) {
                prop_assert!((s - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn merge_is_commutative_and_associative(
            a in logits(32, -50.0, 50.0), b in logits(32, -50.0, 50.0), c in logits(32, -50.0, 50.0)
        ) {
            let (sa, sb, sc) = (
                PartialSoftmaxState::from_slice(&a),
                PartialSoftmaxState::from_slice(&b),
                PartialSoftmaxState::from_slice(&c),
            );
            prop_assert_eq!(sa.merge(sb).sum.to_bits(), sb.merge(sa).sum.to_bits());
            let left = sa.merge(sb).merge(sc);
            let right = sa.merge(sb.merge(sc));
            prop_assert_eq!(left.max, right.max);
            let ulp = f32::EPSILON * left.sum.max(right.sum);
            prop_assert!((left.sum - right.sum).abs() <= ulp, "{} vs {}", left.sum, right.sum);
        }
    }
}
