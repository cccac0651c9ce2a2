//! Choosing the shared scaling factor `phi` and the band `(a, b)` that
//! `x - phi` must stay inside for the unified-max path to be safe.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// `e^x` in `f32` overflows just above 88.72; keep a margin below it.
pub const EXP_UPPER_LIMIT: f32 = 88.0;
/// `e^x` drops below the smallest normal `f32` just under -87.3.
pub const EXP_LOWER_LIMIT: f32 = -87.0;
/// Default slack added on both sides of the observed logit range.
pub const DEFAULT_MARGIN: f32 = 1.0;

/// A scaling factor plus the open interval `(a, b)` on `x - phi` inside
/// which `e^(x - phi)` is representable without loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingCalibration {
    pub phi: f32,
    pub a: f32,
    pub b: f32,
    /// Fraction of calibration samples that fell strictly inside the band.
    pub coverage: f64,
}

impl ScalingCalibration {
    pub fn new(phi: f32, a: f32, b: f32, coverage: f64) -> Result<Self> {
        let c = Self { phi, a, b, coverage };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidCalibration(m));
        if !(self.phi.is_finite() && self.a.is_finite() && self.b.is_finite()) {
            return bad(format!("non-finite field in {self:?}"));
        }
        if self.a >= self.b {
            return bad(format!("a={} must be below b={}", self.a, self.b));
        }
        if self.b >= EXP_UPPER_LIMIT {
            return bad(format!("b={} must be below {EXP_UPPER_LIMIT}", self.b));
        }
        if self.a <= EXP_LOWER_LIMIT {
            return bad(format!("a={} must be above {EXP_LOWER_LIMIT}", self.a));
        }
        if !(0.0..=1.0).contains(&self.coverage) {
            return bad(format!("coverage {} outside [0, 1]", self.coverage));
        }
        Ok(())
    }

    /// `a < x - phi < b`, evaluated in `f32` exactly as the kernels do.
    #[inline]
    pub fn contains(&self, x: f32) -> bool {
        let d = x - self.phi;
        self.a < d && d < self.b
    }

    /// Serialises as `phi a b coverage` followed by a newline.
    pub fn to_line(&self) -> String {
        format!("{} {} {} {}\n", self.phi, self.a, self.b, self.coverage)
    }

    pub fn parse_line(text: &str) -> Result<Self> {
        let parse_err = |msg: String| Error::Parse { path: "<calibration>".into(), line: 1, msg };
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 fields `phi a b coverage`, found {}", fields.len())));
        }
        let f = |i: usize| -> Result<f32> {
            fields[i].parse().map_err(|_| parse_err(format!("bad number {:?}", fields[i])))
        };
        let coverage: f64 = fields[3].parse().map_err(|_| parse_err(format!("bad number {:?}", fields[3])))?;
        Self::new(f(0)?, f(1)?, f(2)?, coverage)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_line())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::parse_line(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse { path: path.to_path_buf(), line, msg },
            other => other,
        })
    }
}

/// Outcome of [`check_bounds`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundsCheck {
    Ok,
    Violation { index: usize },
}

/// First index whose `x - phi` leaves the calibrated band.
pub fn check_bounds(x: &[f32], calib: &ScalingCalibration) -> BoundsCheck {
    match x.iter().position(|&v| !calib.contains(v)) {
        Some(index) => BoundsCheck::Violation { index },
        None => BoundsCheck::Ok,
    }
}

/// Fits `phi` and `(a, b)` to an empirical logit distribution.
///
/// `phi` sits at the lower `(1 - target_coverage) / 2` quantile, so
/// `a = -margin` and `b` spans up to the upper quantile plus `margin`.
/// Quantile positions are rounded outward to the enclosing order statistics,
/// which guarantees the counted coverage is at least `target_coverage`.
pub fn calibrate(samples: &[f32], target_coverage: f64, margin: f32) -> Result<ScalingCalibration> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(index) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index, value: samples[index] });
    }
    if !(target_coverage > 0.5 && target_coverage <= 1.0) {
        return Err(Error::InvalidArgument(format!("target coverage {target_coverage} outside (0.5, 1]")));
    }
    if !(margin > 0.0 && margin < -EXP_LOWER_LIMIT) {
        return Err(Error::InvalidArgument(format!("margin {margin} outside (0, {})", -EXP_LOWER_LIMIT)));
    }

    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    let last = (sorted.len() - 1) as f64;
    let q_lo = (1.0 - target_coverage) / 2.0;
    let lo = sorted[(q_lo * last).floor() as usize];
    let hi = sorted[((1.0 - q_lo) * last).ceil().min(last) as usize];

    let spread = hi - lo;
    let b = spread + margin;
    if b.is_nan() || b >= EXP_UPPER_LIMIT {
        return Err(Error::UncalibratableRange { required_b: b, limit: EXP_UPPER_LIMIT });
    }
    if b <= spread {
        return Err(Error::InvalidArgument(format!("margin {margin} is below f32 resolution at spread {spread}")));
    }

    let mut calib = ScalingCalibration { phi: lo, a: -margin, b, coverage: 0.0 };
    let inside = samples.iter().filter(|&&s| calib.contains(s)).count();
    calib.coverage = inside as f64 / samples.len() as f64;
    calib.validate()?;
    Ok(calib)
}

/// Synthetic logit source, written `normal:<mean>:<std>` or
/// `uniform:<lo>:<hi>`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SyntheticDist {
    Normal { mean: f32, std: f32 },
    Uniform { lo: f32, hi: f32 },
}

impl SyntheticDist {
    pub fn sample(&self, count: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match *self {
            SyntheticDist::Normal { mean, std } => {
                let d = Normal::new(mean, std).expect("validated at parse time");
                (0..count).map(|_| d.sample(&mut rng)).collect()
            }
            SyntheticDist::Uniform { lo, hi } => {
                let d = Uniform::new_inclusive(lo, hi);
                (0..count).map(|_| d.sample(&mut rng)).collect()
            }
        }
    }
}

impl FromStr for SyntheticDist {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("expected normal:<mean>:<std> or uniform:<lo>:<hi>, got {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        let [kind, p, q] = parts[..] else { return Err(bad()) };
        let p: f32 = p.parse().map_err(|_| bad())?;
        let q: f32 = q.parse().map_err(|_| bad())?;
        if !p.is_finite() || !q.is_finite() {
            return Err(bad());
        }
        match kind {
            "normal" if q > 0.0 => Ok(SyntheticDist::Normal { mean: p, std: q }),
            "uniform" if p < q => Ok(SyntheticDist::Uniform { lo: p, hi: q }),
            _ => Err(bad()),
        }
    }
}

/// Reads whitespace-separated logits from a text file.
pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split_whitespace() {
            let v: f32 = tok.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: no + 1,
                msg: format!("not a number: {tok:?}"),
            })?;
            out.push(v);
        }
    }
    Ok(out)
}
