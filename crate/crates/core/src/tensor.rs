//! Dense row-major `f32` matrices and the `f64` reference arithmetic used to
//! check every kernel in the crate.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f32`.
///
/// Immutable once built; kernels read it through slices and are free to
/// share it across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Checked constructor: rejects empty shapes, length mismatches and
    /// non-finite elements.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let m = Self::from_vec(rows, cols, data)?;
        if let Some(index) = m.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index, value: m.data[index] });
        }
        Ok(m)
    }

    /// Shape-checked but value-unchecked constructor, used for kernel
    /// outputs which may legitimately carry `Inf`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(n, n)?;
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        Ok(m)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
    }

    /// Uniform random entries in `[lo, hi)`.
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, lo: f32, hi: f32, rng: &mut R) -> Result<Self> {
        let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
        Self::new(rows, cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Zero-pads rows up to the next multiple of `multiple`.
    pub fn pad_rows(&self, multiple: usize) -> Result<Matrix> {
        if multiple == 0 {
            return Err(Error::InvalidArgument("row padding multiple must be >= 1".into()));
        }
        let padded = self.rows.div_ceil(multiple) * multiple;
        if padded == self.rows {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(padded * self.cols);
        data.extend_from_slice(&self.data);
        data.resize(padded * self.cols, 0.0);
        Matrix::from_vec(padded, self.cols, data)
    }

    /// Keeps the first `rows` rows.
    pub fn truncate_rows(&self, rows: usize) -> Result<Matrix> {
        if rows == 0 || rows > self.rows {
            return Err(Error::ShapeMismatch(format!("cannot truncate {} rows to {rows}", self.rows)));
        }
        Matrix::from_vec(rows, self.cols, self.data[..rows * self.cols].to_vec())
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix { rows: self.cols, cols: self.rows, data }
    }

    /// Column block `[start, start + width)` as a new matrix.
    pub fn columns(&self, start: usize, width: usize) -> Result<Matrix> {
        if width == 0 || start + width > self.cols {
            return Err(Error::ShapeMismatch(format!(
                "column block {start}..{} outside {} columns",
                start + width,
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Matrix::from_vec(self.rows, width, data)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let first = parts.first().ok_or(Error::EmptyInput)?;
        let cols = first.cols;
        let mut data = Vec::new();
        for p in parts {
            if p.cols != cols {
                return Err(Error::ShapeMismatch(format!("vstack of {} and {} columns", cols, p.cols)));
            }
            data.extend_from_slice(&p.data);
        }
        Matrix::from_vec(data.len() / cols, cols, data)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the little-endian `u32 rows, u32 cols, f32 data...` format.
    pub fn read_from<R: Read>(mut r: R) -> Result<Matrix> {
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let rows = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let cols = u32::from_le_bytes(word) as usize;
        let len = rows.checked_mul(cols).ok_or_else(|| Error::ShapeMismatch(format!("{rows}x{cols} overflows")))?;
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        Matrix::new(rows, cols, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Matrix> {
        Matrix::read_from(BufReader::new(File::open(path)?))
    }
}

/// GEMM problem size: `[m x k] * [k x n]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GemmShape {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

impl GemmShape {
    pub fn new(m: usize, n: usize, k: usize) -> Result<Self> {
        if m == 0 || n == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!("gemm shape m={m} n={n} k={k} has a zero dimension")));
        }
        Ok(Self { m, n, k })
    }

    pub fn of(a: &Matrix, b: &Matrix) -> Result<Self> {
        check_gemm(a, b)?;
        Ok(Self { m: a.rows(), n: b.cols(), k: a.cols() })
    }

    pub fn flops(&self) -> f64 {
        2.0 * self.m as f64 * self.n as f64 * self.k as f64
    }
}

pub(crate) fn check_gemm(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.cols() != b.rows() {
        return Err(Error::ShapeMismatch(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// Reference product: `f64` accumulation over ascending `k`, rounded to
/// `f32` once per element. Single-threaded and deterministic.
pub fn gemm_oracle(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let acc = gemm_oracle_f64(a, b)?;
    Matrix::from_vec(a.rows(), b.cols(), acc.into_iter().map(|v| v as f32).collect())
}

/// Same as [`gemm_oracle`] without the final rounding.
pub fn gemm_oracle_f64(a: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    check_gemm(a, b)?;
    let (m, n) = (a.rows(), b.cols());
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let c = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            let aik = aik as f64;
            for (cj, &bkj) in c.iter_mut().zip(b.row(k)) {
                *cj += aik * bkj as f64;
            }
        }
    }
    Ok(out)
}

/// `|A| * |B|` in `f64`: the magnitude each output element is built from.
///
/// Rounding error of any `f32` kernel is bounded by a multiple of this, not of
/// `|C|`, so cancelling sums are judged against it.
pub fn gemm_magnitude(a: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    check_gemm(a, b)?;
    let (m, n) = (a.rows(), b.cols());
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let c = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            let aik = (aik as f64).abs();
            for (cj, &bkj) in c.iter_mut().zip(b.row(k)) {
                *cj += aik * (bkj as f64).abs();
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pad_rows_to_eight() {
        let a = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f32 + 1.0).unwrap();
        let p = a.pad_rows(8).unwrap();
        assert_eq!((p.rows(), p.cols()), (8, 4));
        assert_eq!(&p.data()[..12], a.data());
        assert!(p.data()[12..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pad_rows_aligned_is_identity() {
        let a = Matrix::from_fn(8, 4, |r, c| (r + c) as f32).unwrap();
        assert_eq!(a.pad_rows(8).unwrap(), a);
    }

    #[test]
    fn pad_rows_row_sums() {
        let a = Matrix::from_fn(5, 2, |_, _| 1.0).unwrap();
        let p = a.pad_rows(4).unwrap();
        let sums: Vec<f32> = (0..p.rows()).map(|r| p.row(r).iter().sum()).collect();
        assert_eq!(sums, [2.0, 2.0, 2.0, 2.0, 2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pad_rows_rejects_zero_multiple() {
        let a = Matrix::zeros(2, 2).unwrap();
        assert!(a.pad_rows(0).is_err());
    }

    #[test]
    fn checked_construction() {
        assert!(matches!(Matrix::new(1, 2, vec![1.0, f32::NAN]), Err(Error::NonFinite { index: 1, .. })));
        assert!(matches!(Matrix::new(1, 2, vec![f32::INFINITY, 0.0]), Err(Error::NonFinite { index: 0, .. })));
        assert!(matches!(Matrix::new(0, 2, vec![]), Err(Error::EmptyShape { .. })));
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
        // unchecked path is allowed to carry Inf
        assert!(Matrix::from_vec(1, 1, vec![f32::INFINITY]).is_ok());
    }

    #[test]
    fn oracle_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Matrix::random(3, 5, -1.0, 1.0, &mut rng).unwrap();
        let c = gemm_oracle(&Matrix::identity(3).unwrap(), &b).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn oracle_hand_case() {
        let a = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Matrix::new(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(gemm_oracle(&a, &b).unwrap().data(), &[11.0]);
    }

    /// Independent triple loop (i, j, k order, explicit indexing).
    fn triple_loop(a: &Matrix, b: &Matrix) -> Vec<f32> {
        let mut out = Vec::new();
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0f64;
                for k in 0..a.cols() {
                    s += a.get(i, k) as f64 * b.get(k, j) as f64;
                }
                out.push(s as f32);
            }
        }
        out
    }

    #[test]
    fn oracle_matches_independent_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Matrix::random(7, 5, -1.0, 1.0, &mut rng).unwrap();
        let b = Matrix::random(5, 9, -1.0, 1.0, &mut rng).unwrap();
        let c = gemm_oracle(&a, &b).unwrap();
        assert_eq!(c.data(), triple_loop(&a, &b).as_slice());
    }

    #[test]
    fn oracle_shape_mismatch() {
        let a = Matrix::zeros(2, 3).unwrap();
        let b = Matrix::zeros(4, 2).unwrap();
        assert!(matches!(gemm_oracle(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn padding_is_transparent_to_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::random(5, 6, -1.0, 1.0, &mut rng).unwrap();
        let b = Matrix::random(6, 4, -1.0, 1.0, &mut rng).unwrap();
        let direct = gemm_oracle(&a, &b).unwrap();
        let padded = gemm_oracle(&a.pad_rows(8).unwrap(), &b).unwrap();
        assert_eq!(padded.truncate_rows(5).unwrap(), direct);
        assert_eq!(gemm_oracle(&a, &b).unwrap(), direct);
    }

    #[test]
    fn binary_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Matrix::random(3, 7, -5.0, 5.0, &mut rng).unwrap();
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 21 * 4);
        assert_eq!(&buf[..8], &[3, 0, 0, 0, 7, 0, 0, 0]);
        assert_eq!(Matrix::read_from(buf.as_slice()).unwrap(), a);
        assert!(Matrix::read_from(&buf[..buf.len() - 1]).is_err());
    }
}
