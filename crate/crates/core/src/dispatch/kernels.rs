//! The three GEMM implementations the dispatcher chooses between.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gemm::{default_parallel_target, flat_gemm, micro_panel, select_tile, MICRO_N};
use crate::tensor::{check_gemm, GemmShape, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KernelChoice {
    /// Row-at-a-time GEMV kernel, no padding.
    ImplA,
    /// Flat GEMM, rows padded to 8.
    ImplB,
    /// Conventional blocked GEMM, rows padded to 64.
    ImplC,
}

impl KernelChoice {
    pub const ALL: [KernelChoice; 3] = [KernelChoice::ImplA, KernelChoice::ImplB, KernelChoice::ImplC];

    pub fn run(self, a: &Matrix, b: &Matrix, workers: usize) -> Result<Matrix> {
        match self {
            KernelChoice::ImplA => impl_a_gemv(a, b, workers),
            KernelChoice::ImplB => impl_b_flat(a, b, workers),
            KernelChoice::ImplC => impl_c_blocked(a, b),
        }
    }
}

impl fmt::Display for KernelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelChoice::ImplA => "ImplA",
            KernelChoice::ImplB => "ImplB",
            KernelChoice::ImplC => "ImplC",
        })
    }
}

impl FromStr for KernelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ImplA" => Ok(KernelChoice::ImplA),
            "ImplB" => Ok(KernelChoice::ImplB),
            "ImplC" => Ok(KernelChoice::ImplC),
            _ => Err(Error::InvalidArgument(format!("unknown kernel {s:?}"))),
        }
    }
}

const GEMV_MIN_PANEL: usize = 64;
const GEMV_MAX_PANEL: usize = 1024;

fn gemv_panels(n: usize, workers: usize) -> Vec<Range<usize>> {
    let want = n.div_ceil(4 * workers.max(1)).next_multiple_of(MICRO_N);
    let width = want.clamp(GEMV_MIN_PANEL, GEMV_MAX_PANEL).min(n);
    (0..n).step_by(width).map(|c| c..(c + width).min(n)).collect()
}

/// `y += x * b[.., cols]`, accumulating over rows of `b` in order.
fn gemv_panel(y: &mut [f32], x: &[f32], b: &Matrix, cols: Range<usize>) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { gemv_panel_avx2(y, x, b, cols) };
    }
    gemv_panel_portable(y, x, b, cols)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemv_panel_avx2(y: &mut [f32], x: &[f32], b: &Matrix, cols: Range<usize>) {
    gemv_panel_portable(y, x, b, cols)
}

#[inline(always)]
fn gemv_panel_portable(y: &mut [f32], x: &[f32], b: &Matrix, cols: Range<usize>) {
    for (k, &xk) in x.iter().enumerate() {
        let bk = &b.row(k)[cols.clone()];
        for (yj, &bkj) in y.iter_mut().zip(bk) {
            *yj += xk * bkj;
        }
    }
}

/// GEMV-style kernel: each row of A is handled on its own, with workers
/// splitting N into column panels and streaming B through them once per row.
pub fn impl_a_gemv(a: &Matrix, b: &Matrix, workers: usize) -> Result<Matrix> {
    check_gemm(a, b)?;
    let (m, n) = (a.rows(), b.cols());
    let panels = gemv_panels(n, workers);
    let mut out = Matrix::zeros(m, n)?;
    for i in 0..m {
        let x = a.row(i);
        let ys: Vec<Vec<f32>> = panels
            .par_iter()
            .map(|cols| {
                let mut y = vec![0.0f32; cols.len()];
                gemv_panel(&mut y, x, b, cols.clone());
                y
            })
            .collect();
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        for (cols, y) in panels.iter().zip(ys) {
            row[cols.clone()].copy_from_slice(&y);
        }
    }
    Ok(out)
}

/// Flat GEMM with the tile chosen by the cost model for this shape.
pub fn impl_b_flat(a: &Matrix, b: &Matrix, workers: usize) -> Result<Matrix> {
    let shape = GemmShape::of(a, b)?;
    let cfg = select_tile(shape, workers, default_parallel_target(workers));
    flat_gemm(a, b, &cfg)
}

const MC: usize = 64;
const NC: usize = 128;
const KC: usize = 256;

/// Conventional blocked GEMM: A padded to 64-row tiles, output split into
/// `64 x 128` tiles processed in parallel, K blocked by 256 with packed
/// panels of A and B.
pub fn impl_c_blocked(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_gemm(a, b)?;
    let (m, n, k) = (a.rows(), b.cols(), a.cols());
    let a_pad = a.pad_rows(MC)?;
    let tiles: Vec<(usize, Range<usize>)> = (0..a_pad.rows())
        .step_by(MC)
        .flat_map(|r0| (0..n).step_by(NC).map(move |c0| (r0, c0..(c0 + NC).min(n))))
        .collect();

    let blocks: Vec<Vec<f32>> = tiles
        .par_iter()
        .map(|(r0, cols)| {
            let width = cols.len();
            let mut acc = vec![0.0f32; MC * width];
            let mut a_t = vec![0.0f32; KC * MC];
            let mut b_t = vec![0.0f32; KC * width];
            for k0 in (0..k).step_by(KC) {
                let depth = KC.min(k - k0);
                for r in 0..MC {
                    let src = &a_pad.row(r0 + r)[k0..k0 + depth];
                    for (kk, &v) in src.iter().enumerate() {
                        a_t[kk * MC + r] = v;
                    }
                }
                for kk in 0..depth {
                    b_t[kk * width..(kk + 1) * width].copy_from_slice(&b.row(k0 + kk)[cols.clone()]);
                }
                for c0 in (0..width).step_by(MICRO_N) {
                    micro_panel(&mut acc, width, MC, &a_t, &b_t, depth, c0, MICRO_N.min(width - c0));
                }
            }
            acc
        })
        .collect();

    let mut out = Matrix::zeros(m, n)?;
    let data = out.data_mut();
    for ((r0, cols), block) in tiles.iter().zip(&blocks) {
        let w = cols.len();
        for r in 0..MC.min(m.saturating_sub(*r0)) {
            let row = r0 + r;
            data[row * n + cols.start..row * n + cols.end].copy_from_slice(&block[r * w..(r + 1) * w]);
        }
    }
    Ok(out)
}
