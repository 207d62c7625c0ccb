//! Symmetric banded matrices and their Cholesky factorization.
//!
//! The five-point Laplacian on a row-major grid has half-bandwidth `m - 1`
//! and its square has half-bandwidth `2(m - 1)`. Without pivoting a Cholesky
//! factor stays inside the band, so lower-band storage is enough for every
//! system the solver factors.

use crate::error::{Error, Result};

/// Lower band of a symmetric matrix: `data[i][k]` holds entry `(i, i - k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymBand {
    dim: usize,
    bandwidth: usize,
    data: Vec<f64>,
}

impl SymBand {
    pub fn zeros(dim: usize, bandwidth: usize) -> Self {
        Self {
            dim,
            bandwidth,
            data: vec![0.0; dim * (bandwidth + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    #[inline]
    fn slot(&self, row: usize, offset: usize) -> usize {
        row * (self.bandwidth + 1) + offset
    }

    /// Entry `(i, j)`; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let off = r - c;
        if off > self.bandwidth {
            0.0
        } else {
            self.data[self.slot(r, off)]
        }
    }

    /// Adds `value` to entry `(i, j)` (and implicitly `(j, i)`).
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let off = r - c;
        assert!(off <= self.bandwidth, "entry ({i}, {j}) outside band");
        let s = self.slot(r, off);
        self.data[s] += value;
    }

    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.dim);
        assert_eq!(out.len(), self.dim);
        out.fill(0.0);
        for i in 0..self.dim {
            let d = self.data[self.slot(i, 0)];
            out[i] += d * x[i];
            for off in 1..=self.bandwidth.min(i) {
                let v = self.data[self.slot(i, off)];
                if v != 0.0 {
                    let j = i - off;
                    out[i] += v * x[j];
                    out[j] += v * x[i];
                }
            }
        }
    }

    /// In-place `L Lᵀ` factorization.
    pub fn cholesky(&self) -> Result<BandCholesky> {
        let n = self.dim;
        let bw = self.bandwidth;
        let mut l = self.data.clone();
        let w = bw + 1;
        for j in 0..n {
            // diagonal
            let mut d = l[j * w];
            for k in 1..=bw.min(j) {
                let v = l[j * w + k];
                d -= v * v;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Factorization(format!(
                    "banded matrix not positive definite at pivot {j} (value {d:e})"
                )));
            }
            let djj = d.sqrt();
            l[j * w] = djj;
            // column below the diagonal
            for i in (j + 1)..n.min(j + bw + 1) {
                // entry (i, j) lives at offset i - j in row i
                let mut s = l[i * w + (i - j)];
                // sum over k < j with both (i,k) and (j,k) inside the band
                let kmin = i.saturating_sub(bw);
                for k in kmin..j {
                    s -= l[i * w + (i - k)] * l[j * w + (j - k)];
                }
                l[i * w + (i - j)] = s / djj;
            }
        }
        Ok(BandCholesky {
            dim: n,
            bandwidth: bw,
            factor: l,
        })
    }
}

/// Lower-triangular banded Cholesky factor, read-only after construction.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    dim: usize,
    bandwidth: usize,
    factor: Vec<f64>,
}

impl BandCholesky {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.dim);
        let n = self.dim;
        let bw = self.bandwidth;
        let w = bw + 1;
        let l = &self.factor;
        for i in 0..n {
            let mut s = b[i];
            for k in 1..=bw.min(i) {
                s -= l[i * w + k] * b[i - k];
            }
            b[i] = s / l[i * w];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in 1..=bw.min(n - 1 - i) {
                s -= l[(i + k) * w + k] * b[i + k];
            }
            b[i] = s / l[i * w];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}
