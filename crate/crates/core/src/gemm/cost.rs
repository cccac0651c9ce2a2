//! Computation/memory cost model for a tiled flat GEMM and the tile choice
//! it drives.

use crate::error::{Error, Result};
use crate::tensor::GemmShape;

/// Rows are padded to this multiple; the microkernel is 8 rows tall.
pub const M_PAD: usize = 8;
/// Width of the column register block.
pub const MICRO_N: usize = 8;
/// Default K-tile depth.
pub const DEFAULT_B_K: usize = 32;
/// Upper bound on the N-tile width; a `DEFAULT_B_K x MAX_B_N` staging
/// buffer is 32 KiB.
pub const MAX_B_N: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileConfig {
    pub b_n: usize,
    pub b_k: usize,
    pub m_pad: usize,
    pub double_buffer: bool,
}

impl TileConfig {
    pub fn new(b_n: usize, b_k: usize, double_buffer: bool) -> Result<Self> {
        if b_n == 0 || b_k == 0 {
            return Err(Error::InvalidTile { b_n, b_k, n: 0, k: 0 });
        }
        Ok(Self { b_n, b_k, m_pad: M_PAD, double_buffer })
    }

    /// Shrinks tile sizes that exceed the problem.
    pub fn clamped(self, n: usize, k: usize) -> Self {
        Self { b_n: self.b_n.min(n).max(1), b_k: self.b_k.min(k).max(1), ..self }
    }
}

/// Operation count, memory traffic and their ratio for one tiling.
///
/// Traffic is counted in matrix elements, so `intensity` is flops per element
/// moved.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostEstimate {
    pub flops: f64,
    pub traffic: f64,
    pub intensity: f64,
    pub parallelism: f64,
}

/// Cost of tiling `shape` into `b_n x b_k` tiles.
///
/// `traffic` counts per-tile loads: every one of the `N K / (b_n b_k)` tiles
/// reads an `M x b_k` slice of A and a `b_k x b_n` slice of B, and C is
/// written once. `intensity` is the closed form `2MK / (K + MK/b_n + M)`;
/// [`tiled_intensity`] evaluates the same ratio from the counts.
pub fn arithmetic_intensity(shape: GemmShape, b_n: usize, b_k: usize) -> Result<CostEstimate> {
    let GemmShape { m, n, k } = shape;
    if b_n == 0 || b_k == 0 || b_n > n || b_k > k {
        return Err(Error::InvalidTile { b_n, b_k, n, k });
    }
    let (mf, nf, kf, bn, bk) = (m as f64, n as f64, k as f64, b_n as f64, b_k as f64);
    let tiles = nf * kf / (bn * bk);
    let traffic = (mf * bk + bn * bk) * tiles + mf * nf;
    Ok(CostEstimate {
        flops: 2.0 * mf * nf * kf,
        traffic,
        intensity: 2.0 * mf * kf / (kf + mf * kf / bn + mf),
        parallelism: nf / bn,
    })
}

/// Per-tile form of the intensity: `2 M b_n b_k T / ((M b_k + b_n b_k) T + M N)`.
pub fn tiled_intensity(shape: GemmShape, b_n: usize, b_k: usize) -> Result<f64> {
    let c = arithmetic_intensity(shape, b_n, b_k)?;
    let (mf, nf, kf, bn, bk) = (shape.m as f64, shape.n as f64, shape.k as f64, b_n as f64, b_k as f64);
    let tiles = nf * kf / (bn * bk);
    Ok(2.0 * mf * bn * bk * tiles / c.traffic)
}

/// Default occupancy target: four tiles per worker.
pub fn default_parallel_target(workers: usize) -> usize {
    4 * workers.max(1)
}

/// Admissible N-tile widths up to `n`: 1, 2, 4, then multiples of the
/// microkernel width up to [`MAX_B_N`].
pub fn b_n_candidates(n: usize) -> Vec<usize> {
    let mut c: Vec<usize> = [1, 2, 4].into_iter().filter(|&b| b <= n).collect();
    c.extend((MICRO_N..=MAX_B_N.min(n)).step_by(MICRO_N));
    c
}

/// Chooses `b_n` for the regime the shape falls into.
///
/// Small `N` is parallelism-bound: aim for `N / b_n` close to
/// `parallel_target` without dropping below the worker count. Large `N` is
/// memory-bound: take the widest tile that still feeds every worker, and
/// enable double buffering.
pub fn select_tile(shape: GemmShape, workers: usize, parallel_target: usize) -> TileConfig {
    let workers = workers.max(1);
    let target = parallel_target.max(1);
    let n = shape.n;
    let tiles = |b: usize| n.div_ceil(b);
    let candidates = b_n_candidates(n);
    let b_k = DEFAULT_B_K.min(shape.k);

    if n <= target * MICRO_N {
        let need = workers.min(n);
        let b_n = candidates
            .iter()
            .copied()
            .filter(|&b| tiles(b) >= need)
            .min_by_key(|&b| (tiles(b).abs_diff(target), std::cmp::Reverse(b)))
            .unwrap_or(1);
        TileConfig { b_n, b_k, m_pad: M_PAD, double_buffer: false }
    } else {
        let b_n = candidates.iter().copied().filter(|&b| n / b >= workers).max().unwrap_or(1);
        TileConfig { b_n, b_k, m_pad: M_PAD, double_buffer: true }
    }
}
