//! Dense row-major `f64` tensors with live-value accounting.
//!
//! Every tensor allocation is counted against a thread-local tally of live
//! `f64` values so that benchmarks can report the peak number of values held
//! simultaneously during a forward pass.

use std::cell::Cell;
use std::fmt;

use crate::error::{Error, Result};

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static MATMUL_FLOPS: Cell<u64> = const { Cell::new(0) };
    static SCORE_PAIRS: Cell<u64> = const { Cell::new(0) };
}

fn track_alloc(n: usize) {
    LIVE.with(|live| {
        let now = live.get() + n;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

fn track_free(n: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(n)));
}

/// Live-value accounting for the current thread.
pub mod memory {
    use super::{LIVE, PEAK};

    /// Number of `f64` values currently held by tensors on this thread.
    pub fn live_values() -> usize {
        LIVE.with(|l| l.get())
    }

    /// Highest value of [`live_values`] since the last [`reset_peak`].
    pub fn peak_values() -> usize {
        PEAK.with(|p| p.get())
    }

    /// Restart peak tracking from the current live count.
    pub fn reset_peak() {
        let live = live_values();
        PEAK.with(|p| p.set(live));
    }
}

/// Operation counters for the current thread.
pub mod counters {
    use super::{MATMUL_FLOPS, SCORE_PAIRS};

    /// Multiply-add FLOPs (2·m·k·n per product) executed by matrix products.
    pub fn matmul_flops() -> u64 {
        MATMUL_FLOPS.with(|c| c.get())
    }

    /// (query, key) pairs scored by attention since the last reset.
    pub fn score_pairs() -> u64 {
        SCORE_PAIRS.with(|c| c.get())
    }

    pub fn reset() {
        MATMUL_FLOPS.with(|c| c.set(0));
        SCORE_PAIRS.with(|c| c.set(0));
    }

    pub(crate) fn add_score_pairs(n: u64) {
        SCORE_PAIRS.with(|c| c.set(c.get() + n));
    }

    pub(crate) fn add_flops(n: u64) {
        MATMUL_FLOPS.with(|c| c.set(c.get() + n));
    }
}

/// Dense tensor of 64-bit floats stored row-major.
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        track_alloc(data.len());
        Ok(Self { shape, data })
    }

    /// Internal constructor for callers that already guarantee the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        track_alloc(data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    /// A `[1, n]` row vector.
    pub fn row(values: &[f64]) -> Self {
        Self::from_parts(vec![1, values.len()], values.to_vec())
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: vec![rows.len(), cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-D view: leading dimension for matrices, 1 for vectors.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn into_data(mut self) -> Vec<f64> {
        track_free(self.data.len());
        std::mem::take(&mut self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Self::from_parts(self.shape.clone(), self.data.clone())
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        track_free(self.data.len());
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

/// `C = A · B` for row-major `A: m×k`, `B: k×n`.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_into(a, false, b, false, &mut c, m, k, n, 0.0);
    c
}

/// `C = A' · B' + beta·C` where `'` optionally transposes the stored operand.
/// `A'` is `m×k`, `B'` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into(
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    counters::add_flops(2 * (m * k * n) as u64);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths checked above cover every index the kernel
    // touches under the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn live_values_track_allocations() {
        let before = memory::live_values();
        {
            let _a = Tensor::zeros(&[10, 10]);
            assert_eq!(memory::live_values(), before + 100);
            let _b = _a.clone();
            assert_eq!(memory::live_values(), before + 200);
        }
        assert_eq!(memory::live_values(), before);
    }

    #[test]
    fn peak_is_monotone_until_reset() {
        memory::reset_peak();
        let base = memory::peak_values();
        {
            let _a = Tensor::zeros(&[50]);
        }
        assert_eq!(memory::peak_values(), base + 50);
        memory::reset_peak();
        assert_eq!(memory::peak_values(), memory::live_values());
    }

    #[test]
    fn gemm_transposed_operands() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(gemm(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
        let mut c = vec![0.0; 4];
        // Aᵀ·B
        gemm_into(&a, true, &b, false, &mut c, 2, 2, 2, 0.0);
        assert_eq!(c, vec![26.0, 30.0, 38.0, 44.0]);
        // A·Bᵀ
        gemm_into(&a, false, &b, true, &mut c, 2, 2, 2, 0.0);
        assert_eq!(c, vec![17.0, 23.0, 39.0, 53.0]);
    }
}
