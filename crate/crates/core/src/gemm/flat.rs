//! Flat GEMM: `C[M x N] = A[M x K] * B[K x N]` with small `M`.
//!
//! Rows of A are padded to 8 and never tiled. N is cut into `b_n`-wide
//! tiles, one independent task per tile, each owning its output columns.
//! Inside a task the K dimension is walked tile by tile in order: the A and B
//! slices of a K-tile are staged into a contiguous buffer, then multiplied
//! into an `m_pad x b_n` accumulator by an 8x8 register-blocked microkernel.
//!
//! With double buffering two staging buffers alternate: while tile `t` is
//! multiplied out of one, tile `t + 1` is copied into the other, one column
//! block at a time between microkernel calls. Every output element still
//! accumulates its products in ascending `k`, so the result does not depend on
//! tile sizes or on buffering.

use std::ops::Range;

use rayon::prelude::*;

use super::cost::{TileConfig, MICRO_N};
use crate::error::Result;
use crate::tensor::{check_gemm, Matrix};

/// Event emitted by the per-tile pipeline; `tile` is the K-tile index and
/// `buffer` the staging buffer (0 or 1) involved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PipelineEvent {
    FillBegin { tile: usize, buffer: usize },
    FillEnd { tile: usize, buffer: usize },
    ComputeBegin { tile: usize, buffer: usize },
    ComputeEnd { tile: usize, buffer: usize },
}

/// Receives pipeline events. `()` discards them.
pub trait PipelineObserver {
    fn record(&mut self, event: PipelineEvent);
}

impl PipelineObserver for () {
    #[inline(always)]
    fn record(&mut self, _: PipelineEvent) {}
}

impl PipelineObserver for Vec<PipelineEvent> {
    fn record(&mut self, event: PipelineEvent) {
        self.push(event);
    }
}

/// One K-tile of A (transposed, `depth x rows`) and B (`depth x width`).
struct Stage {
    id: usize,
    a: Vec<f32>,
    b: Vec<f32>,
    depth: usize,
}

impl Stage {
    fn new(id: usize, rows: usize, width: usize, b_k: usize) -> Self {
        Self { id, a: vec![0.0; b_k * rows], b: vec![0.0; b_k * width], depth: 0 }
    }
}

/// Register-blocked panel multiply shared by the GEMM kernels.
///
/// `acc[r][c0..c0+cw] += sum_kk a_t[kk][r] * b_t[kk][c0..c0+cw]`, where `acc`
/// is `rows x width`, `a_t` is `depth x rows` and `b_t` is `depth x width`.
/// `rows` must be a multiple of 8.
#[allow(clippy::too_many_arguments)]
pub(crate) fn micro_panel(
    acc: &mut [f32],
    width: usize,
    rows: usize,
    a_t: &[f32],
    b_t: &[f32],
    depth: usize,
    c0: usize,
    cw: usize,
) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { micro_panel_avx2(acc, width, rows, a_t, b_t, depth, c0, cw) };
    }
    micro_panel_portable(acc, width, rows, a_t, b_t, depth, c0, cw)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn micro_panel_avx2(
    acc: &mut [f32],
    width: usize,
    rows: usize,
    a_t: &[f32],
    b_t: &[f32],
    depth: usize,
    c0: usize,
    cw: usize,
) {
    debug_assert_eq!(rows % 8, 0);
    for r0 in (0..rows).step_by(8) {
        if cw == MICRO_N {
            kernel_8x8_avx2(acc, width, rows, a_t, b_t, depth, r0, c0);
        } else {
            kernel_8xn(acc, width, rows, a_t, b_t, depth, r0, c0, cw);
        }
    }
}

/// Same arithmetic as [`kernel_8x8`]: one multiply and one add per term,
/// no fused multiply-add, so results match the portable path bit for bit.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn kernel_8x8_avx2(
    acc: &mut [f32],
    width: usize,
    rows: usize,
    a_t: &[f32],
    b_t: &[f32],
    depth: usize,
    r0: usize,
    c0: usize,
) {
    use std::arch::x86_64::*;

    assert!(r0 + 8 <= rows && c0 + MICRO_N <= width);
    assert!((r0 + 7) * width + c0 + MICRO_N <= acc.len());
    if depth == 0 {
        return;
    }
    assert!((depth - 1) * rows + r0 + 8 <= a_t.len());
    assert!((depth - 1) * width + c0 + MICRO_N <= b_t.len());

    // SAFETY: every pointer below stays within the bounds asserted above.
    let c_ptr = acc.as_mut_ptr().add(r0 * width + c0);
    let mut c = [_mm256_setzero_ps(); 8];
    for (r, reg) in c.iter_mut().enumerate() {
        *reg = _mm256_loadu_ps(c_ptr.add(r * width));
    }
    let mut a_ptr = a_t.as_ptr().add(r0);
    let mut b_ptr = b_t.as_ptr().add(c0);
    for _ in 0..depth {
        let b = _mm256_loadu_ps(b_ptr);
        for (r, reg) in c.iter_mut().enumerate() {
            let a = _mm256_broadcast_ss(&*a_ptr.add(r));
            *reg = _mm256_add_ps(*reg, _mm256_mul_ps(a, b));
        }
        a_ptr = a_ptr.add(rows);
        b_ptr = b_ptr.add(width);
    }
    for (r, reg) in c.iter().enumerate() {
        _mm256_storeu_ps(c_ptr.add(r * width), *reg);
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn micro_panel_portable(
    acc: &mut [f32],
    width: usize,
    rows: usize,
    a_t: &[f32],
    b_t: &[f32],
    depth: usize,
    c0: usize,
    cw: usize,
) {
    debug_assert_eq!(rows % 8, 0);
    for r0 in (0..rows).step_by(8) {
        if cw == MICRO_N {
            kernel_8x8(acc, width, rows, a_t, b_t, depth, r0, c0);
        } else {
            kernel_8xn(acc, width, rows, a_t, b_t, depth, r0, c0, cw);
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn kernel_8x8(
    acc: &mut [f32],
    width: usize,
    rows: usize,
    a_t: &[f32],
    b_t: &[f32],
    depth: usize,
    r0: usize,
    c0: usize,
) {
    let mut regs = [[0.0f32; MICRO_N]; 8];
    for (r, reg) in regs.iter_mut().enumerate() {
        reg.copy_from_slice(&acc[(r0 + r) * width + c0..][..MICRO_N]);
    }
    for kk in 0..depth {
        let a: &[f32; 8] = a_t[kk * rows + r0..][..8].try_into().unwrap();
        let b: &[f32; MICRO_N] = b_t[kk * width + c0..][..MICRO_N].try_into().unwrap();
        for (reg, &av) in regs.iter_mut().zip(a) {
            for (x, &bv) in reg.iter_mut().zip(b) {
                *x += av * bv;
            }
        }
    }
    for (r, reg) in regs.iter().enumerate() {
        acc[(r0 + r) * width + c0..][..MICRO_N].copy_from_slice(reg);
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn kernel_8xn(
    acc: &mut [f32],
    width: usize,
    rows: usize,
    a_t: &[f32],
    b_t: &[f32],
    depth: usize,
    r0: usize,
    c0: usize,
    cw: usize,
) {
    for kk in 0..depth {
        let a = &a_t[kk * rows + r0..][..8];
        let b = &b_t[kk * width + c0..][..cw];
        for (r, &av) in a.iter().enumerate() {
            let row = &mut acc[(r0 + r) * width + c0..][..cw];
            for (x, &bv) in row.iter_mut().zip(b) {
                *x += av * bv;
            }
        }
    }
}

/// Per-N-tile work item.
struct TileTask<'a> {
    a: &'a Matrix,
    b: &'a Matrix,
    cols: Range<usize>,
    b_k: usize,
}

impl TileTask<'_> {
    fn width(&self) -> usize {
        self.cols.len()
    }

    fn k_tiles(&self) -> usize {
        self.a.cols().div_ceil(self.b_k)
    }

    fn k_range(&self, tile: usize) -> Range<usize> {
        let start = tile * self.b_k;
        start..(start + self.b_k).min(self.a.cols())
    }

    /// Copies the A slice of K-tile `tile` into `stage`, transposed.
    fn fill_a(&self, stage: &mut Stage, tile: usize) {
        let ks = self.k_range(tile);
        let rows = self.a.rows();
        stage.depth = ks.len();
        for r in 0..rows {
            let src = &self.a.row(r)[ks.clone()];
            for (kk, &v) in src.iter().enumerate() {
                stage.a[kk * rows + r] = v;
            }
        }
    }

    /// Copies columns `c0..c0 + cw` (tile-relative) of K-tile `tile` of B.
    fn fill_b_block(&self, stage: &mut Stage, tile: usize, c0: usize, cw: usize) {
        let width = self.width();
        let col = self.cols.start + c0;
        for (kk, k) in self.k_range(tile).enumerate() {
            stage.b[kk * width + c0..][..cw].copy_from_slice(&self.b.row(k)[col..col + cw]);
        }
    }

    fn fill<O: PipelineObserver>(&self, stage: &mut Stage, tile: usize, obs: &mut O) {
        obs.record(PipelineEvent::FillBegin { tile, buffer: stage.id });
        self.fill_a(stage, tile);
        let width = self.width();
        for c0 in (0..width).step_by(MICRO_N) {
            self.fill_b_block(stage, tile, c0, MICRO_N.min(width - c0));
        }
        obs.record(PipelineEvent::FillEnd { tile, buffer: stage.id });
    }

    fn compute<O: PipelineObserver>(&self, acc: &mut [f32], stage: &Stage, tile: usize, obs: &mut O) {
        obs.record(PipelineEvent::ComputeBegin { tile, buffer: stage.id });
        let width = self.width();
        for c0 in (0..width).step_by(MICRO_N) {
            micro_panel(acc, width, self.a.rows(), &stage.a, &stage.b, stage.depth, c0, MICRO_N.min(width - c0));
        }
        obs.record(PipelineEvent::ComputeEnd { tile, buffer: stage.id });
    }

    /// Computes tile `tile` from `cur` while staging tile `tile + 1` into
    /// `next`, one column block after each microkernel call.
    fn compute_and_prefetch<O: PipelineObserver>(
        &self,
        acc: &mut [f32],
        cur: &Stage,
        next: &mut Stage,
        tile: usize,
        obs: &mut O,
    ) {
        let width = self.width();
        let rows = self.a.rows();
        obs.record(PipelineEvent::ComputeBegin { tile, buffer: cur.id });
        obs.record(PipelineEvent::FillBegin { tile: tile + 1, buffer: next.id });
        self.fill_a(next, tile + 1);
        for c0 in (0..width).step_by(MICRO_N) {
            let cw = MICRO_N.min(width - c0);
            micro_panel(acc, width, rows, &cur.a, &cur.b, cur.depth, c0, cw);
            self.fill_b_block(next, tile + 1, c0, cw);
        }
        obs.record(PipelineEvent::FillEnd { tile: tile + 1, buffer: next.id });
        obs.record(PipelineEvent::ComputeEnd { tile, buffer: cur.id });
    }

    /// Runs the whole K loop; returns the `rows x width` output block.
    fn run<O: PipelineObserver>(&self, double_buffer: bool, obs: &mut O) -> Vec<f32> {
        let (rows, width) = (self.a.rows(), self.width());
        let mut acc = vec![0.0f32; rows * width];
        let tiles = self.k_tiles();
        let mut cur = Stage::new(0, rows, width, self.b_k);

        if !double_buffer {
            for t in 0..tiles {
                self.fill(&mut cur, t, obs);
                self.compute(&mut acc, &cur, t, obs);
            }
            return acc;
        }

        let mut next = Stage::new(1, rows, width, self.b_k);
        self.fill(&mut cur, 0, obs);
        for t in 0..tiles {
            if t + 1 < tiles {
                self.compute_and_prefetch(&mut acc, &cur, &mut next, t, obs);
                std::mem::swap(&mut cur, &mut next);
            } else {
                self.compute(&mut acc, &cur, t, obs);
            }
        }
        acc
    }
}

fn n_tiles(n: usize, b_n: usize) -> impl Iterator<Item = Range<usize>> {
    (0..n).step_by(b_n).map(move |c| c..(c + b_n).min(n))
}

/// Flat GEMM with the given tiling. Output has `a.rows()` rows.
pub fn flat_gemm(a: &Matrix, b: &Matrix, cfg: &TileConfig) -> Result<Matrix> {
    check_gemm(a, b)?;
    let (m, n) = (a.rows(), b.cols());
    let cfg = cfg.clamped(n, a.cols());
    let a_pad = a.pad_rows(cfg.m_pad.max(8).next_multiple_of(8))?;

    let tiles: Vec<Range<usize>> = n_tiles(n, cfg.b_n).collect();
    let blocks: Vec<Vec<f32>> = tiles
        .par_iter()
        .map(|cols| TileTask { a: &a_pad, b, cols: cols.clone(), b_k: cfg.b_k }.run(cfg.double_buffer, &mut ()))
        .collect();

    let mut out = Matrix::zeros(m, n)?;
    let data = out.data_mut();
    for (cols, block) in tiles.iter().zip(&blocks) {
        let w = cols.len();
        for r in 0..m {
            data[r * n + cols.start..r * n + cols.end].copy_from_slice(&block[r * w..(r + 1) * w]);
        }
    }
    Ok(out)
}

/// Runs the task for N-tile `n_tile` alone and returns its padded output
/// block together with the recorded pipeline events.
pub fn trace_pipeline(
    a: &Matrix,
    b: &Matrix,
    cfg: &TileConfig,
    n_tile: usize,
) -> Result<(Vec<f32>, Vec<PipelineEvent>)> {
    check_gemm(a, b)?;
    let cfg = cfg.clamped(b.cols(), a.cols());
    let a_pad = a.pad_rows(cfg.m_pad.max(8).next_multiple_of(8))?;
    let cols = n_tiles(b.cols(), cfg.b_n).nth(n_tile).ok_or_else(|| {
        crate::Error::InvalidArgument(format!("N-tile {n_tile} out of range for n={} b_n={}", b.cols(), cfg.b_n))
    })?;
    let mut events = Vec::new();
    let block = TileTask { a: &a_pad, b, cols, b_k: cfg.b_k }.run(cfg.double_buffer, &mut events);
    Ok((block, events))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gemm_oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_pair(seed: u64, m: usize, k: usize, n: usize) -> (Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (Matrix::random(m, k, -1.0, 1.0, &mut rng).unwrap(), Matrix::random(k, n, -1.0, 1.0, &mut rng).unwrap())
    }

    /// Plain f32 triple loop in ascending k: the summation order every tiling
    /// must reproduce.
    fn naive_f32(a: &Matrix, b: &Matrix) -> Vec<f32> {
        let mut out = vec![0.0f32; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0f32;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out[i * b.cols() + j] = s;
            }
        }
        out
    }

    #[test]
    fn identity_is_exact() {
        let (a, _) = rand_pair(1, 5, 24, 1);
        let eye = Matrix::identity(24).unwrap();
        for db in [false, true] {
            let c = flat_gemm(&a, &eye, &TileConfig::new(8, 8, db).unwrap()).unwrap();
            assert_eq!(c, a);
        }
    }

    #[test]
    fn every_tiling_reproduces_sequential_order() {
        let (a, b) = rand_pair(2, 3, 70, 45);
        let want = naive_f32(&a, &b);
        for b_n in [1, 2, 4, 8, 16, 24, 45, 64] {
            for b_k in [1, 8, 16, 32, 64, 70, 100] {
                for db in [false, true] {
                    let c = flat_gemm(&a, &b, &TileConfig::new(b_n, b_k, db).unwrap()).unwrap();
                    assert_eq!(c.data(), want.as_slice(), "b_n={b_n} b_k={b_k} db={db}");
                }
            }
        }
    }

    #[test]
    fn gemv_row_matches_oracle() {
        let (a, b) = rand_pair(3, 1, 300, 200);
        let c = flat_gemm(&a, &b, &TileConfig::new(64, 32, true).unwrap()).unwrap();
        let r = gemm_oracle(&a, &b).unwrap();
        let mag = crate::tensor::gemm_magnitude(&a, &b).unwrap();
        for ((x, y), m) in c.data().iter().zip(r.data()).zip(mag) {
            assert!(((x - y).abs() as f64) <= 1e-4 * m);
        }
    }

    #[test]
    fn padding_is_transparent() {
        let (a, b) = rand_pair(4, 5, 40, 33);
        let cfg = TileConfig::new(16, 8, true).unwrap();
        let c = flat_gemm(&a, &b, &cfg).unwrap();
        let padded = flat_gemm(&a.pad_rows(8).unwrap(), &b, &cfg).unwrap();
        assert_eq!(padded.truncate_rows(5).unwrap(), c);
        assert!(padded.data()[5 * 33..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn larger_m_uses_multiple_row_blocks() {
        let (a, b) = rand_pair(5, 19, 50, 30);
        let c = flat_gemm(&a, &b, &TileConfig::new(8, 16, false).unwrap()).unwrap();
        assert_eq!(c.data(), naive_f32(&a, &b).as_slice());
    }

    #[test]
    fn shape_mismatch() {
        let (a, b) = rand_pair(6, 2, 8, 8);
        let bt = b.truncate_rows(7).unwrap();
        assert!(flat_gemm(&a, &bt, &TileConfig::new(8, 8, false).unwrap()).is_err());
    }

    fn position(events: &[PipelineEvent], e: PipelineEvent) -> usize {
        events.iter().position(|x| *x == e).unwrap_or_else(|| panic!("{e:?} missing from {events:?}"))
    }

    #[test]
    fn single_k_tile_degenerates() {
        let (a, b) = rand_pair(7, 2, 16, 16);
        let cfg = TileConfig::new(16, 32, true).unwrap();
        let (block, events) = trace_pipeline(&a, &b, &cfg, 0).unwrap();
        use PipelineEvent::*;
        assert_eq!(
            events,
            vec![
                FillBegin { tile: 0, buffer: 0 },
                FillEnd { tile: 0, buffer: 0 },
                ComputeBegin { tile: 0, buffer: 0 },
                ComputeEnd { tile: 0, buffer: 0 },
            ]
        );
        let (single, _) = trace_pipeline(&a, &b, &TileConfig { double_buffer: false, ..cfg }, 0).unwrap();
        assert_eq!(block, single);
    }

    #[test]
    fn two_k_tiles_respect_handoff_order() {
        let (a, b) = rand_pair(8, 3, 64, 24);
        let cfg = TileConfig::new(24, 32, true).unwrap();
        let (_, ev) = trace_pipeline(&a, &b, &cfg, 0).unwrap();
        use PipelineEvent::*;
        // fill(t) completes before compute(t) starts
        assert!(position(&ev, FillEnd { tile: 0, buffer: 0 }) < position(&ev, ComputeBegin { tile: 0, buffer: 0 }));
        assert!(position(&ev, FillEnd { tile: 1, buffer: 1 }) < position(&ev, ComputeBegin { tile: 1, buffer: 1 }));
        // the second fill overlaps the first compute
        assert!(position(&ev, FillBegin { tile: 1, buffer: 1 }) < position(&ev, ComputeEnd { tile: 0, buffer: 0 }));
    }

    #[test]
    fn buffers_are_not_refilled_while_in_use() {
        let (a, b) = rand_pair(9, 8, 200, 16);
        let cfg = TileConfig::new(16, 32, true).unwrap();
        let (_, ev) = trace_pipeline(&a, &b, &cfg, 0).unwrap();
        let tiles = 200usize.div_ceil(32);
        use PipelineEvent::*;
        for t in 0..tiles {
            let buf = t % 2;
            assert!(
                position(&ev, FillEnd { tile: t, buffer: buf }) < position(&ev, ComputeBegin { tile: t, buffer: buf })
            );
            if t + 2 < tiles {
                // buffer holding tile t is reused for t + 2 only after compute(t)
                assert!(
                    position(&ev, ComputeEnd { tile: t, buffer: buf })
                        < position(&ev, FillBegin { tile: t + 2, buffer: buf })
                );
            }
        }
    }

    #[test]
    fn trace_rejects_missing_tile() {
        let (a, b) = rand_pair(10, 1, 8, 16);
        assert!(trace_pipeline(&a, &b, &TileConfig::new(8, 8, true).unwrap(), 2).is_err());
    }
}
