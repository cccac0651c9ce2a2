//! Measurement helpers behind the `bench` command: tile-width sweeps of the
//! flat GEMM and synchronous against asynchronous decode attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{batch_decode_attention, AttentionConfig, AttentionMode, AttentionStats};
use crate::error::{Error, Result};
use crate::gemm::{arithmetic_intensity, b_n_candidates, flat_gemm, TileConfig, DEFAULT_B_K};
use crate::report::Record;
use crate::softmax::calibrate;
use crate::tensor::{GemmShape, Matrix};
use crate::timing::{Sampler, TimingStats};

/// One flat-GEMM timing at a fixed tile width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnPoint {
    pub shape: GemmShape,
    pub b_n: usize,
    pub double_buffer: bool,
    pub tiles: usize,
    /// Modelled flops per element moved.
    pub intensity: f64,
    pub stats: TimingStats,
}

impl BnPoint {
    pub fn gflops(&self) -> f64 {
        self.shape.flops() / self.stats.median / 1e9
    }

    pub fn record(&self) -> Record {
        Record::new("bn_sweep")
            .with("m", self.shape.m)
            .with("n", self.shape.n)
            .with("k", self.shape.k)
            .with("b_n", self.b_n)
            .with("double_buffer", self.double_buffer)
            .with("tiles", self.tiles)
            .with("intensity", format!("{:.3}", self.intensity))
            .with("median_us", format!("{:.1}", self.stats.median * 1e6))
            .with("mad_us", format!("{:.1}", self.stats.mad * 1e6))
            .with("gflops", format!("{:.2}", self.gflops()))
    }
}

/// Powers of two from 8 up to `n`, plus `n` itself when it is not one, and
/// anything smaller than 8 that the tile selector can pick.
pub fn default_b_n_sweep(n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = b_n_candidates(n).into_iter().filter(|&b| b < 8).collect();
    let mut b = 8;
    while b <= n {
        v.push(b);
        b *= 2;
    }
    if !v.contains(&n) {
        v.push(n);
    }
    v
}

/// Times the flat GEMM at each width in `b_ns`, with and without double
/// buffering.
pub fn gemm_bn_sweep(shape: GemmShape, b_ns: &[usize], sampler: &Sampler, seed: u64) -> Result<Vec<BnPoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Matrix::random(shape.m, shape.k, -1.0, 1.0, &mut rng)?;
    let b = Matrix::random(shape.k, shape.n, -1.0, 1.0, &mut rng)?;
    let mut out = Vec::new();
    for &b_n in b_ns {
        if b_n == 0 || b_n > shape.n {
            return Err(Error::InvalidTile { b_n, b_k: DEFAULT_B_K, n: shape.n, k: shape.k });
        }
        for double_buffer in [false, true] {
            let cfg = TileConfig::new(b_n, DEFAULT_B_K, double_buffer)?.clamped(shape.n, shape.k);
            let samples = sampler.run(|| flat_gemm(&a, &b, &cfg).map(drop))?;
            // intensity is modelled on the padded height the kernel computes
            let padded = GemmShape { m: shape.m.next_multiple_of(cfg.m_pad), ..shape };
            out.push(BnPoint {
                shape,
                b_n,
                double_buffer,
                tiles: shape.n.div_ceil(b_n),
                intensity: arithmetic_intensity(padded, cfg.b_n, cfg.b_k)?.intensity,
                stats: TimingStats::from_samples(&samples),
            });
        }
    }
    Ok(out)
}

/// The fastest point of a sweep.
pub fn best_point(points: &[BnPoint]) -> Option<&BnPoint> {
    points.iter().min_by(|a, b| a.stats.median.total_cmp(&b.stats.median))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionBench {
    pub batch: usize,
    pub seq_len: usize,
    pub head_dim: usize,
    pub partitions: usize,
    pub sync: TimingStats,
    pub unified: TimingStats,
    pub unified_stats: AttentionStats,
}

impl AttentionBench {
    /// The unified-max kernel was not faster than the synchronous one.
    pub fn inverted(&self) -> bool {
        self.unified.median > self.sync.median
    }

    pub fn record(&self) -> Record {
        Record::new("attn")
            .with("batch", self.batch)
            .with("seq_len", self.seq_len)
            .with("head_dim", self.head_dim)
            .with("partitions", self.partitions)
            .with("sync_median_us", format!("{:.1}", self.sync.median * 1e6))
            .with("sync_mad_us", format!("{:.1}", self.sync.mad * 1e6))
            .with("async_median_us", format!("{:.1}", self.unified.median * 1e6))
            .with("async_mad_us", format!("{:.1}", self.unified.mad * 1e6))
            .with("rows_recomputed", self.unified_stats.rows_recomputed)
            .with("rescale_ops", self.unified_stats.rescale_ops)
            .with("inverted", self.inverted())
    }
}

/// Times both split-KV kernels on random in-band inputs; the calibration is
/// fitted to the inputs' own logits so no row is recomputed.
pub fn attention_bench(
    batch: usize,
    seq_len: usize,
    head_dim: usize,
    partitions: usize,
    sampler: &Sampler,
    seed: u64,
) -> Result<AttentionBench> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = Matrix::random(batch, head_dim, -1.0, 1.0, &mut rng)?;
    let k = Matrix::random(seq_len, head_dim, -1.0, 1.0, &mut rng)?;
    let v = Matrix::random(seq_len, head_dim, -1.0, 1.0, &mut rng)?;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let logits: Vec<f32> = (0..batch)
        .flat_map(|r| (0..seq_len).map(move |i| (r, i)))
        .map(|(r, i)| scale * q.row(r).iter().zip(k.row(i)).map(|(a, b)| a * b).sum::<f32>())
        .collect();
    let calib = calibrate(&logits, 1.0, 1.0)?;
    let cfg = AttentionConfig::new(partitions.clamp(1, seq_len), scale, calib)?;

    let time = |mode| -> Result<TimingStats> {
        Ok(TimingStats::from_samples(&sampler.run(|| batch_decode_attention(&q, &k, &v, &cfg, mode).map(drop))?))
    };
    let sync = time(AttentionMode::Sync)?;
    let unified = time(AttentionMode::Async)?;
    let (_, unified_stats) = batch_decode_attention(&q, &k, &v, &cfg, AttentionMode::Async)?;
    Ok(AttentionBench { batch, seq_len, head_dim, partitions: cfg.partitions, sync, unified, unified_stats })
}
