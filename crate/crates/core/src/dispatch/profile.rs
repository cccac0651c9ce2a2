//! Offline decision flow: time the three kernels over a sweep of M and
//! locate the inflection points.

use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DispatchEntry, KernelChoice};
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::timing::{Sampler, TimingStats};

pub const DEFAULT_M_SWEEP: [usize; 9] = [1, 2, 4, 8, 16, 32, 64, 128, 256];
/// A point whose MAD exceeds this fraction of its median is re-timed.
pub const UNSTABLE_MAD_FRACTION: f64 = 0.20;

#[derive(Clone, Debug)]
pub struct ProfileOptions {
    pub m_sweep: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    /// Extra attempts for a point whose timings are too noisy.
    pub retries: usize,
    pub seed: u64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self { m_sweep: DEFAULT_M_SWEEP.to_vec(), reps: 7, warmup: 2, retries: 2, seed: 0 }
    }
}

impl ProfileOptions {
    fn validate(&self) -> Result<()> {
        if self.m_sweep.len() < 2 {
            return Err(Error::InvalidArgument("m sweep needs at least two points".into()));
        }
        if self.m_sweep[0] == 0 || self.m_sweep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "m sweep must be strictly ascending and positive: {:?}",
                self.m_sweep
            )));
        }
        if self.reps < 3 {
            return Err(Error::InvalidArgument(format!("need at least 3 reps, got {}", self.reps)));
        }
        Ok(())
    }
}

/// Source of per-call timings in seconds, one per rep.
pub trait KernelTimer {
    fn sample(&mut self, kernel: KernelChoice, m: usize, opts: &ProfileOptions) -> Result<Vec<f64>>;
}

/// Times the real kernels on random operands for one `[N, K]`.
pub struct HostTimer {
    b: Matrix,
    a: Option<Matrix>,
    workers: usize,
    rng: ChaCha8Rng,
    pub min_sample: Duration,
}

impl HostTimer {
    pub fn new(n: usize, k: usize, workers: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Matrix::random(k, n, -1.0, 1.0, &mut rng)?;
        Ok(Self { b, a: None, workers, rng, min_sample: Duration::from_millis(2) })
    }
}

impl KernelTimer for HostTimer {
    fn sample(&mut self, kernel: KernelChoice, m: usize, opts: &ProfileOptions) -> Result<Vec<f64>> {
        if self.a.as_ref().map(Matrix::rows) != Some(m) {
            self.a = Some(Matrix::random(m, self.b.rows(), -1.0, 1.0, &mut self.rng)?);
        }
        let a = self.a.as_ref().unwrap();
        let sampler = Sampler { warmup: opts.warmup, reps: opts.reps, min_sample: self.min_sample };
        sampler.run(|| kernel.run(a, &self.b, self.workers).map(drop))
    }
}

/// Timing summary of the three kernels at one M.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfilePoint {
    pub m: usize,
    /// Indexed like [`KernelChoice::ALL`].
    pub stats: [TimingStats; 3],
}

impl ProfilePoint {
    pub fn median(&self, kernel: KernelChoice) -> f64 {
        self.stats[kernel as usize].median
    }

    pub fn best(&self) -> f64 {
        self.stats.iter().map(|s| s.median).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeProfile {
    pub entry: DispatchEntry,
    pub points: Vec<ProfilePoint>,
}

impl ShapeProfile {
    /// Largest ratio, over the sweep, of the dispatched kernel's median to
    /// the best median at that M.
    pub fn worst_dispatch_ratio(&self) -> f64 {
        self.points.iter().map(|p| p.median(self.entry.choose(p.m)) / p.best()).fold(1.0, f64::max)
    }
}

/// First sweep index from which `wins` holds at every later point.
fn persistent_from(points: &[ProfilePoint], start: usize, wins: impl Fn(&ProfilePoint) -> bool) -> Option<usize> {
    let mut first = None;
    for (i, p) in points.iter().enumerate().skip(start).rev() {
        if !wins(p) {
            break;
        }
        first = Some(i);
    }
    first
}

/// Inflection points from a finished sweep.
///
/// A kernel takes over at the smallest M from which it is at least as fast
/// at every larger sampled M. If the flat kernel never takes over, the band
/// collapses and both points sit at the GEMV/blocked crossover. A crossover
/// that never happens places the point one past the sweep.
pub fn inflection_points(n: usize, k: usize, points: &[ProfilePoint]) -> Result<DispatchEntry> {
    use KernelChoice::*;
    let past_end = points.last().map_or(1, |p| p.m + 1);
    let m_at = |i: Option<usize>| i.map_or(past_end, |i| points[i].m);

    let (m1, m2) = match persistent_from(points, 0, |p| p.median(ImplB) <= p.median(ImplA)) {
        Some(i1) => {
            let i2 = persistent_from(points, i1, |p| p.median(ImplC) <= p.median(ImplB));
            (points[i1].m, m_at(i2))
        }
        None => {
            let m = m_at(persistent_from(points, 0, |p| p.median(ImplC) <= p.median(ImplA)));
            (m, m)
        }
    };
    DispatchEntry::new(n, k, m1, m2.max(m1))
}

/// Runs the decision flow for one `[N, K]` with the given timer.
///
/// Kernels are timed one after another, never concurrently.
pub fn profile_shape_with(
    n: usize,
    k: usize,
    opts: &ProfileOptions,
    timer: &mut dyn KernelTimer,
) -> Result<ShapeProfile> {
    opts.validate()?;
    let mut points = Vec::with_capacity(opts.m_sweep.len());
    for &m in &opts.m_sweep {
        let mut stats = [TimingStats { median: 0.0, mad: 0.0, samples: 0 }; 3];
        for kernel in KernelChoice::ALL {
            let mut attempt = 0;
            stats[kernel as usize] = loop {
                let s = TimingStats::from_samples(&timer.sample(kernel, m, opts)?);
                if s.relative_mad() <= UNSTABLE_MAD_FRACTION {
                    break s;
                }
                if attempt == opts.retries {
                    return Err(Error::TimingUnstable {
                        m,
                        kernel: kernel.to_string(),
                        median_us: s.median * 1e6,
                        mad_us: s.mad * 1e6,
                    });
                }
                attempt += 1;
                log::debug!("n={n} k={k} m={m} {kernel}: mad {:.1}% of median, retrying", 100.0 * s.relative_mad());
            };
        }
        log::debug!(
            "n={n} k={k} m={m}: A {:.1}us B {:.1}us C {:.1}us",
            stats[0].median * 1e6,
            stats[1].median * 1e6,
            stats[2].median * 1e6
        );
        points.push(ProfilePoint { m, stats });
    }
    let entry = inflection_points(n, k, &points)?;
    Ok(ShapeProfile { entry, points })
}

/// Profiles the real kernels on this host.
pub fn profile_shape(n: usize, k: usize, opts: &ProfileOptions, workers: usize) -> Result<ShapeProfile> {
    opts.validate()?;
    let mut timer = HostTimer::new(n, k, workers, opts.seed)?;
    profile_shape_with(n, k, opts, &mut timer)
}
