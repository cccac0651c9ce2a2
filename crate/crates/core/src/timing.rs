//! Wall-clock sampling with median / median-absolute-deviation summaries.

use std::time::{Duration, Instant};

/// Robust summary of a set of timings, in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingStats {
    pub median: f64,
    /// Median absolute deviation from the median.
    pub mad: f64,
    pub samples: usize,
}

impl TimingStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        let median = median(samples);
        let dev: Vec<f64> = samples.iter().map(|s| (s - median).abs()).collect();
        Self { median, mad: median_of(dev), samples: samples.len() }
    }

    /// `mad / median`, 0 for a zero median.
    pub fn relative_mad(&self) -> f64 {
        if self.median > 0.0 {
            self.mad / self.median
        } else {
            0.0
        }
    }
}

pub fn median(samples: &[f64]) -> f64 {
    median_of(samples.to_vec())
}

fn median_of(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// How many times to run a closure and how long one sample must last.
#[derive(Clone, Copy, Debug)]
pub struct Sampler {
    pub warmup: usize,
    pub reps: usize,
    /// Short closures are repeated inside one sample until it lasts at least
    /// this long; the sample reports the per-call average.
    pub min_sample: Duration,
}

impl Default for Sampler {
    fn default() -> Self {
        Self { warmup: 2, reps: 7, min_sample: Duration::from_millis(2) }
    }
}

impl Sampler {
    /// Times `f`, returning per-call seconds for each of `reps` samples.
    pub fn run<E>(&self, mut f: impl FnMut() -> Result<(), E>) -> Result<Vec<f64>, E> {
        let start = Instant::now();
        f()?;
        let first = start.elapsed();
        let inner = if first >= self.min_sample || first.is_zero() {
            1
        } else {
            (self.min_sample.as_secs_f64() / first.as_secs_f64()).ceil() as usize
        };
        for _ in 1..self.warmup {
            f()?;
        }
        let mut out = Vec::with_capacity(self.reps);
        for _ in 0..self.reps {
            let t = Instant::now();
            for _ in 0..inner {
                f()?;
            }
            out.push(t.elapsed().as_secs_f64() / inner as f64);
        }
        Ok(out)
    }
}
