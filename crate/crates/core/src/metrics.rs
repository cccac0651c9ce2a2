//! Error measures used to compare kernels with their oracles.

/// Largest elementwise `|got - want| / |want|`. Only meaningful when no
/// reference value is near zero, e.g. softmax probabilities.
pub fn max_rel_error(got: &[f32], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want)
        .map(|(&g, &w)| {
            let d = (g as f64 - w).abs();
            if d == 0.0 {
                0.0
            } else {
                d / w.abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Absolute slack below which differences are ignored by
/// [`magnitude_error`].
pub const ABS_FLOOR: f64 = 1e-8;

/// Largest `(|got - want| - ABS_FLOOR) / magnitude`, where `magnitude[i]` is
/// the sum of absolute terms `want[i]` was assembled from (`|A| |B|` for a
/// product). Stays meaningful when signed terms cancel and `want[i]` is tiny.
pub fn magnitude_error(got: &[f32], want: &[f64], magnitude: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    assert_eq!(got.len(), magnitude.len());
    got.iter()
        .zip(want)
        .zip(magnitude)
        .map(|((&g, &w), &m)| {
            let d = ((g as f64 - w).abs() - ABS_FLOOR).max(0.0);
            if d == 0.0 {
                0.0
            } else {
                d / m
            }
        })
        .fold(0.0, f64::max)
}

/// `max |got - want| / max |want|`.
pub fn normwise_error(got: &[f32], want: &[f32]) -> f64 {
    assert_eq!(got.len(), want.len());
    let diff = got.iter().zip(want).map(|(&g, &w)| (g as f64 - w as f64).abs()).fold(0.0, f64::max);
    let scale = want.iter().map(|&w| (w as f64).abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative() {
        assert_eq!(max_rel_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((max_rel_error(&[1.1], &[1.0]) - 0.1).abs() < 1e-6);
        assert_eq!(max_rel_error(&[1.0], &[0.0]), f64::INFINITY);
        assert_eq!(max_rel_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn magnitude_scaled() {
        // 1 - 1 cancels to 0 but was built from terms of size 2
        assert_eq!(magnitude_error(&[0.5], &[0.0], &[2.0]), (0.5 - ABS_FLOOR) / 2.0);
        assert_eq!(magnitude_error(&[5e-9], &[0.0], &[0.0]), 0.0);
        assert_eq!(magnitude_error(&[1.0], &[0.0], &[0.0]), f64::INFINITY);
    }

    #[test]
    fn normwise() {
        assert_eq!(normwise_error(&[1.0, -4.0], &[1.0, -4.0]), 0.0);
        assert!((normwise_error(&[1.0, -4.0], &[1.2, -4.0]) - 0.05).abs() < 1e-6);
        assert_eq!(normwise_error(&[1.0], &[0.0]), f64::INFINITY);
    }
}
