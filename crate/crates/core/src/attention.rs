//! Single-token (decode) attention over a K/V cache.
//!
//! Three flavours share one contract, `o = softmax(scale * q K^T) V`:
//!
//! * [`attention_reference`]: whole-row softmax in `f64`.
//! * [`decode_attention_sync`]: the cache is split into `p` contiguous chunks,
//!   each chunk keeps its own max, and the partial results are rescaled to the
//!   global max when they are combined.
//! * [`decode_attention_async`]: every chunk scales by the calibrated `phi`,
//!   so partial numerators/denominators are simply added at the join. A chunk
//!   that meets a logit outside the calibrated band flags the row, and the
//!   whole row is recomputed with the synchronous path.

use std::ops::AddAssign;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::softmax::{check_partitions, chunk_ranges, ScalingCalibration};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    /// Number of contiguous chunks the sequence is split into.
    pub partitions: usize,
    /// Logit pre-scale, usually `1 / sqrt(head_dim)`.
    pub scale: f32,
    pub calib: ScalingCalibration,
}

impl AttentionConfig {
    pub fn new(partitions: usize, scale: f32, calib: ScalingCalibration) -> Result<Self> {
        if partitions == 0 {
            return Err(Error::InvalidArgument("partition count must be >= 1".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale {scale} must be positive")));
        }
        calib.validate()?;
        Ok(Self { partitions, scale, calib })
    }

    /// Config with the conventional `1 / sqrt(head_dim)` scale.
    pub fn for_head_dim(head_dim: usize, partitions: usize, calib: ScalingCalibration) -> Result<Self> {
        Self::new(partitions, 1.0 / (head_dim as f32).sqrt(), calib)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    Reference,
    Sync,
    Async,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Self::Reference),
            "sync" => Ok(Self::Sync),
            "async" => Ok(Self::Async),
            _ => Err(Error::InvalidArgument(format!("unknown attention mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Reference => "reference",
            Self::Sync => "sync",
            Self::Async => "async",
        })
    }
}

/// Instrumentation counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionStats {
    /// Rows whose asynchronous result was discarded and recomputed.
    pub rows_recomputed: usize,
    /// Exponential rescale factors applied to a chunk's `(sum, acc)` pair.
    pub rescale_ops: usize,
    /// Max reductions (per chunk and global) performed.
    pub max_reductions: usize,
}

impl AddAssign for AttentionStats {
    fn add_assign(&mut self, o: Self) {
        self.rows_recomputed += o.rows_recomputed;
        self.rescale_ops += o.rescale_ops;
        self.max_reductions += o.max_reductions;
    }
}

/// Accumulator of one asynchronous chunk: `num = sum e^(x - phi) v`,
/// `den = sum e^(x - phi)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialAttnState {
    pub num: Vec<f32>,
    pub den: f32,
    /// Global row index of the first logit outside the calibrated band.
    pub overflow: Option<usize>,
}

fn check_kv(q_dim: usize, k: &Matrix, v: &Matrix) -> Result<()> {
    if k.cols() != q_dim {
        return Err(Error::ShapeMismatch(format!("query dim {q_dim} vs key dim {}", k.cols())));
    }
    if k.rows() != v.rows() {
        return Err(Error::ShapeMismatch(format!("{} keys vs {} values", k.rows(), v.rows())));
    }
    Ok(())
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(acc: &mut [f32], w: f32, v: &[f32]) {
    for (a, &x) in acc.iter_mut().zip(v) {
        *a += w * x;
    }
}

/// Reference output in `f64` together with `sum_i w_i |v_i|`, the magnitude
/// each output element is assembled from.
pub struct ReferenceAttention {
    pub out: Vec<f64>,
    pub magnitude: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

pub fn attention_reference_f64(q: &Matrix, k: &Matrix, v: &Matrix, scale: f32) -> Result<ReferenceAttention> {
    check_kv(q.cols(), k, v)?;
    let (m, len, dv) = (q.rows(), k.rows(), v.cols());
    let scale = scale as f64;
    let mut out = vec![0.0f64; m * dv];
    let mut magnitude = vec![0.0f64; m * dv];
    let mut logits = vec![0.0f64; len];
    for r in 0..m {
        let qr = q.row(r);
        for (i, x) in logits.iter_mut().enumerate() {
            let s: f64 = qr.iter().zip(k.row(i)).map(|(&a, &b)| a as f64 * b as f64).sum();
            *x = scale * s;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|x| (x - max).exp()).sum();
        let o = &mut out[r * dv..(r + 1) * dv];
        let mag = &mut magnitude[r * dv..(r + 1) * dv];
        for (i, x) in logits.iter().enumerate() {
            let w = (x - max).exp() / sum;
            for ((oj, mj), &vj) in o.iter_mut().zip(mag.iter_mut()).zip(v.row(i)) {
                *oj += w * vj as f64;
                *mj += w * (vj as f64).abs();
            }
        }
    }
    Ok(ReferenceAttention { out, magnitude, rows: m, cols: dv })
}

/// `softmax(scale * Q K^T) V` with all intermediate math in `f64`.
pub fn attention_reference(q: &Matrix, k: &Matrix, v: &Matrix, scale: f32) -> Result<Matrix> {
    let r = attention_reference_f64(q, k, v, scale)?;
    Matrix::from_vec(r.rows, r.cols, r.out.into_iter().map(|x| x as f32).collect())
}

struct SyncChunk {
    max: f32,
    sum: f32,
    acc: Vec<f32>,
}

fn sync_chunk(q: &[f32], k: &Matrix, v: &Matrix, rows: std::ops::Range<usize>, scale: f32) -> SyncChunk {
    let logits: Vec<f32> = rows.clone().map(|i| scale * dot(q, k.row(i))).collect();
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut acc = vec![0.0f32; v.cols()];
    let mut sum = 0.0f32;
    for (x, i) in logits.iter().zip(rows) {
        let w = (x - max).exp();
        sum += w;
        axpy(&mut acc, w, v.row(i));
    }
    SyncChunk { max, sum, acc }
}

/// Split-KV attention for one query row, combining chunks by rescaling each
/// to the global max.
pub fn decode_attention_sync(
    q: &[f32],
    k: &Matrix,
    v: &Matrix,
    cfg: &AttentionConfig,
) -> Result<(Vec<f32>, AttentionStats)> {
    check_kv(q.len(), k, v)?;
    check_partitions(k.rows(), cfg.partitions)?;

    let ranges: Vec<_> = chunk_ranges(k.rows(), cfg.partitions).collect();
    let chunks: Vec<SyncChunk> = ranges.into_par_iter().map(|r| sync_chunk(q, k, v, r, cfg.scale)).collect();

    let global_max = chunks.iter().map(|c| c.max).fold(f32::NEG_INFINITY, f32::max);
    let mut num = vec![0.0f32; v.cols()];
    let mut den = 0.0f32;
    for c in &chunks {
        let rescale = (c.max - global_max).exp();
        den += rescale * c.sum;
        axpy(&mut num, rescale, &c.acc);
    }
    let stats = AttentionStats { rows_recomputed: 0, rescale_ops: chunks.len(), max_reductions: chunks.len() + 1 };
    Ok((num.into_iter().map(|x| x / den).collect(), stats))
}

fn async_chunk(
    q: &[f32],
    k: &Matrix,
    v: &Matrix,
    rows: std::ops::Range<usize>,
    scale: f32,
    calib: &ScalingCalibration,
) -> PartialAttnState {
    let mut state = PartialAttnState { num: vec![0.0; v.cols()], den: 0.0, overflow: None };
    for i in rows {
        let x = scale * dot(q, k.row(i));
        if !calib.contains(x) {
            state.overflow = Some(i);
            break;
        }
        let w = (x - calib.phi).exp();
        state.den += w;
        axpy(&mut state.num, w, v.row(i));
    }
    state
}

/// Unified-max attention for one query row, falling back to
/// [`decode_attention_sync`] when any chunk leaves the calibrated band.
///
/// Violations are collected at the join rather than cancelling sibling
/// chunks.
pub fn decode_attention_async(
    q: &[f32],
    k: &Matrix,
    v: &Matrix,
    cfg: &AttentionConfig,
) -> Result<(Vec<f32>, AttentionStats)> {
    check_kv(q.len(), k, v)?;
    check_partitions(k.rows(), cfg.partitions)?;

    let ranges: Vec<_> = chunk_ranges(k.rows(), cfg.partitions).collect();
    let parts: Vec<PartialAttnState> =
        ranges.into_par_iter().map(|r| async_chunk(q, k, v, r, cfg.scale, &cfg.calib)).collect();

    if parts.iter().any(|p| p.overflow.is_some()) {
        let (out, mut stats) = decode_attention_sync(q, k, v, cfg)?;
        stats.rows_recomputed = 1;
        return Ok((out, stats));
    }

    let mut num = vec![0.0f32; v.cols()];
    let mut den = 0.0f32;
    for p in &parts {
        den += p.den;
        for (n, &x) in num.iter_mut().zip(&p.num) {
            *n += x;
        }
    }
    Ok((num.into_iter().map(|x| x / den).collect(), AttentionStats::default()))
}

/// Applies the selected kernel to every query row of `q`.
pub fn batch_decode_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &AttentionConfig,
    mode: AttentionMode,
) -> Result<(Matrix, AttentionStats)> {
    check_kv(q.cols(), k, v)?;
    let kernel = match mode {
        AttentionMode::Reference => return Ok((attention_reference(q, k, v, cfg.scale)?, AttentionStats::default())),
        AttentionMode::Sync => decode_attention_sync,
        AttentionMode::Async => decode_attention_async,
    };
    let rows: Vec<(Vec<f32>, AttentionStats)> =
        (0..q.rows()).into_par_iter().map(|r| kernel(q.row(r), k, v, cfg)).collect::<Result<_>>()?;

    let mut stats = AttentionStats::default();
    let mut data = Vec::with_capacity(q.rows() * v.cols());
    for (out, s) in rows {
        data.extend(out);
        stats += s;
    }
    Ok((Matrix::from_vec(q.rows(), v.cols(), data)?, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::softmax::softmax_reference_f64;
    use crate::tensor::gemm_oracle_f64;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn wide_calib() -> ScalingCalibration {
        ScalingCalibration::new(0.0, -40.0, 40.0, 1.0).unwrap()
    }

    fn rand_qkv(seed: u64, m: usize, len: usize, d: usize) -> (Matrix, Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Matrix::random(m, d, -1.0, 1.0, &mut rng).unwrap(),
            Matrix::random(len, d, -1.0, 1.0, &mut rng).unwrap(),
            Matrix::random(len, d, -1.0, 1.0, &mut rng).unwrap(),
        )
    }

    /// `|got - want| <= tol * magnitude + 1e-8`, elementwise.
    fn assert_close(got: &[f32], reference: &ReferenceAttention, row: usize, tol: f64) {
        let d = reference.cols;
        for (j, &g) in got.iter().enumerate().take(d) {
            let want = reference.out[row * d + j];
            let mag = reference.magnitude[row * d + j];
            let err = (g as f64 - want).abs();
            assert!(err <= tol * mag + 1e-8, "row {row} col {j}: {g} vs {want} (mag {mag})");
        }
    }

    #[test]
    fn singleton_sequence_returns_value_row() {
        let (q, _, _) = rand_qkv(1, 3, 1, 4);
        let k = Matrix::new(1, 4, vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let v = Matrix::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let o = attention_reference(&q, &k, &v, 0.5).unwrap();
        for r in 0..3 {
            assert_eq!(o.row(r), v.row(0));
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let (q, _, v) = rand_qkv(2, 2, 5, 3);
        let k = Matrix::from_fn(5, 3, |_, c| c as f32 * 0.25).unwrap();
        let o = attention_reference(&q, &k, &v, 1.0).unwrap();
        for c in 0..3 {
            let mean = (0..5).map(|i| v.get(i, c) as f64).sum::<f64>() / 5.0;
            for r in 0..2 {
                assert!((o.get(r, c) as f64 - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn reference_matches_composed_oracles() {
        let (q, k, v) = rand_qkv(3, 2, 16, 8);
        let scale = 1.0 / 8f32.sqrt();
        let got = attention_reference(&q, &k, &v, scale).unwrap();
        // (Q K^T) via gemm_oracle, row softmax, then (P V) via gemm_oracle
        let logits = gemm_oracle_f64(&q, &k.transpose()).unwrap();
        let mut p = Vec::new();
        for r in 0..2 {
            let row: Vec<f32> = logits[r * 16..(r + 1) * 16].iter().map(|&x| (x * scale as f64) as f32).collect();
            p.extend(softmax_reference_f64(&row).unwrap().into_iter().map(|w| w as f32));
        }
        let pm = Matrix::new(2, 16, p).unwrap();
        let want = gemm_oracle_f64(&pm, &v).unwrap();
        for (g, w) in got.data().iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn sync_single_partition_matches_reference() {
        let (q, k, v) = rand_qkv(4, 1, 33, 8);
        let cfg = AttentionConfig::for_head_dim(8, 1, wide_calib()).unwrap();
        let r = attention_reference_f64(&q, &k, &v, cfg.scale).unwrap();
        let (o, _) = decode_attention_sync(q.row(0), &k, &v, &cfg).unwrap();
        assert_close(&o, &r, 0, 1e-6);
    }

    #[test]
    fn sync_partition_counts_agree() {
        let (q, k, v) = rand_qkv(5, 1, 64, 16);
        let c2 = AttentionConfig::for_head_dim(16, 2, wide_calib()).unwrap();
        let c4 = AttentionConfig { partitions: 4, ..c2 };
        let (o2, _) = decode_attention_sync(q.row(0), &k, &v, &c2).unwrap();
        let (o4, _) = decode_attention_sync(q.row(0), &k, &v, &c4).unwrap();
        let r = attention_reference_f64(&q, &k, &v, c2.scale).unwrap();
        for j in 0..16 {
            assert!((o2[j] - o4[j]).abs() as f64 <= 1e-6 * r.magnitude[j] + 1e-8);
        }
    }

    #[test]
    fn sync_survives_adversarial_logits() {
        // logits spread over [-40, 40]: raw exponentials would overflow f32
        let len = 48;
        let q = Matrix::new(1, 1, vec![1.0]).unwrap();
        let k = Matrix::from_fn(len, 1, |i, _| -40.0 + 80.0 * i as f32 / (len - 1) as f32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = Matrix::random(len, 4, -1.0, 1.0, &mut rng).unwrap();
        let cfg = AttentionConfig::new(4, 1.0, wide_calib()).unwrap();
        let r = attention_reference_f64(&q, &k, &v, 1.0).unwrap();
        let (o, _) = decode_attention_sync(q.row(0), &k, &v, &cfg).unwrap();
        assert_close(&o, &r, 0, 1e-5);
    }

    #[test]
    fn async_example_accumulates_by_addition() {
        // phi = 6, a = -3, b = 3; two chunks [4, 5] and [6, 7]
        let calib = ScalingCalibration::new(6.0, -3.0, 3.0, 1.0).unwrap();
        let cfg = AttentionConfig::new(2, 1.0, calib).unwrap();
        let q = [1.0f32];
        let k = Matrix::new(4, 1, vec![4.0, 5.0, 6.0, 7.0]).unwrap();
        let v = Matrix::new(4, 2, vec![1.0, -1.0, 2.0, 0.5, -3.0, 1.5, 0.25, 2.0]).unwrap();
        let (o, stats) = decode_attention_async(&q, &k, &v, &cfg).unwrap();
        assert_eq!(stats, AttentionStats::default());

        let w: Vec<f32> = [4.0f32, 5.0, 6.0, 7.0].iter().map(|x| (x - 6.0f32).exp()).collect();
        let mut want = [0.0f32; 2];
        for (c, slot) in want.iter_mut().enumerate() {
            let n1 = w[0] * v.get(0, c) + w[1] * v.get(1, c);
            let n2 = w[2] * v.get(2, c) + w[3] * v.get(3, c);
            *slot = (n1 + n2) / ((w[0] + w[1]) + (w[2] + w[3]));
        }
        assert_eq!(o, want);
    }

    #[test]
    fn async_violation_recomputes_with_sync() {
        let calib = ScalingCalibration::new(6.0, -3.0, 3.0, 1.0).unwrap();
        let cfg = AttentionConfig::new(2, 1.0, calib).unwrap();
        let q = [1.0f32];
        // y3 - phi = 3.5 > b
        let k = Matrix::new(4, 1, vec![5.0, 6.5, 9.5, 7.0]).unwrap();
        let v = Matrix::new(4, 2, vec![1.0, -1.0, 2.0, 0.5, -3.0, 1.5, 0.25, 2.0]).unwrap();
        let (o, stats) = decode_attention_async(&q, &k, &v, &cfg).unwrap();
        let (s, sync_stats) = decode_attention_sync(&q, &k, &v, &cfg).unwrap();
        assert_eq!(stats.rows_recomputed, 1);
        assert_eq!(stats.rescale_ops, sync_stats.rescale_ops);
        assert_eq!(
            o.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            s.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn async_chunk_reports_global_index() {
        let calib = ScalingCalibration::new(0.0, -1.0, 1.0, 1.0).unwrap();
        let k = Matrix::new(4, 1, vec![0.0, 0.5, 0.1, 2.0]).unwrap();
        let v = Matrix::new(4, 1, vec![1.0; 4]).unwrap();
        let s = async_chunk(&[1.0], &k, &v, 2..4, 1.0, &calib);
        assert_eq!(s.overflow, Some(3));
    }

    #[test]
    fn async_in_bounds_matches_reference() {
        let (q, k, v) = rand_qkv(7, 4, 100, 32);
        let cfg = AttentionConfig::for_head_dim(32, 4, wide_calib()).unwrap();
        let r = attention_reference_f64(&q, &k, &v, cfg.scale).unwrap();
        for row in 0..4 {
            let (o, stats) = decode_attention_async(q.row(row), &k, &v, &cfg).unwrap();
            assert_eq!(stats.rows_recomputed, 0);
            assert_close(&o, &r, row, 1e-5);
        }
    }

    #[test]
    fn batch_stats() {
        let (q, k, v) = rand_qkv(8, 3, 40, 8);
        let cfg = AttentionConfig::for_head_dim(8, 2, wide_calib()).unwrap();
        let (_, s) = batch_decode_attention(&q, &k, &v, &cfg, AttentionMode::Async).unwrap();
        assert_eq!(s, AttentionStats::default());

        // one query row, two chunks: each chunk rescaled once by e^(m_j - m)
        let q1 = q.truncate_rows(1).unwrap();
        let (_, s) = batch_decode_attention(&q1, &k, &v, &cfg, AttentionMode::Sync).unwrap();
        assert_eq!(s.rescale_ops, 2);
        assert_eq!(s.max_reductions, 3);
        let (_, s) = batch_decode_attention(&q, &k, &v, &cfg, AttentionMode::Sync).unwrap();
        assert_eq!(s.rescale_ops, 3 * 2);

        let (a, _) = batch_decode_attention(&q, &k, &v, &cfg, AttentionMode::Async).unwrap();
        let r = attention_reference_f64(&q, &k, &v, cfg.scale).unwrap();
        for row in 0..3 {
            assert_close(a.row(row), &r, row, 1e-5);
        }
    }

    #[test]
    fn shape_and_partition_errors() {
        let (q, k, v) = rand_qkv(9, 1, 4, 4);
        let cfg = AttentionConfig::new(5, 1.0, wide_calib()).unwrap();
        assert!(matches!(decode_attention_sync(q.row(0), &k, &v, &cfg), Err(Error::InvalidPartition { .. })));
        assert!(matches!(decode_attention_async(q.row(0), &k, &v, &cfg), Err(Error::InvalidPartition { .. })));
        let short_v = Matrix::zeros(3, 4).unwrap();
        assert!(matches!(attention_reference(&q, &k, &short_v, 1.0), Err(Error::ShapeMismatch(_))));
        assert!(decode_attention_sync(&[1.0; 3], &k, &v, &cfg).is_err());
        assert!(AttentionConfig::new(0, 1.0, wide_calib()).is_err());
        assert!(AttentionConfig::new(1, 0.0, wide_calib()).is_err());
    }

    #[test]
    fn deterministic_across_runs() {
        let (q, k, v) = rand_qkv(10, 4, 257, 16);
        let cfg = AttentionConfig::for_head_dim(16, 8, wide_calib()).unwrap();
        for mode in [AttentionMode::Sync, AttentionMode::Async] {
            let (a, _) = batch_decode_attention(&q, &k, &v, &cfg, mode).unwrap();
            let (b, _) = batch_decode_attention(&q, &k, &v, &cfg, mode).unwrap();
            assert_eq!(a, b);
        }
    }
}
