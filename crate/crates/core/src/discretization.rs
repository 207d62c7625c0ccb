//! Finite-difference discretization of `-Δy = u` on `(-1, 1)²` with
//! homogeneous Dirichlet boundary values.
//!
//! Unknowns live on the `(m - 1)²` interior nodes of a uniform grid, indexed
//! row-major (`k = (j - 1)(m - 1) + (i - 1)` for node `(x_i, x_j)`). Controls
//! and states share the same nodes, so the control operator `B` is the
//! identity. Grid functions carry the discrete L² geometry
//! `⟨x, y⟩_h = h² Σ x_k y_k`, under which `A` is self-adjoint.

use std::io::Write;

use crate::banded::{BandCholesky, SymBand};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    cells: usize,
    h: f64,
}

impl Grid {
    pub fn new(cells: usize) -> Result<Self> {
        if cells < 2 {
            return Err(Error::Config(format!(
                "grid needs at least 2 cells per side, got {cells}"
            )));
        }
        Ok(Self {
            cells,
            h: 2.0 / cells as f64,
        })
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    /// Mesh width `h = 2 / m`.
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Interior nodes per side, `m - 1`.
    pub fn side(&self) -> usize {
        self.cells - 1
    }

    /// Number of unknowns `N = (m - 1)²`.
    pub fn len(&self) -> usize {
        self.side() * self.side()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Quadrature weight of one node.
    pub fn weight(&self) -> f64 {
        self.h * self.h
    }

    /// Grid indices `(i, j)`, both in `1..m`, of unknown `k`.
    pub fn node(&self, k: usize) -> (usize, usize) {
        (k % self.side() + 1, k / self.side() + 1)
    }

    pub fn coords(&self, k: usize) -> (f64, f64) {
        let (i, j) = self.node(k);
        (-1.0 + i as f64 * self.h, -1.0 + j as f64 * self.h)
    }

    /// Samples `f` at every interior node.
    pub fn sample(&self, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        (0..self.len())
            .map(|k| {
                let (x, y) = self.coords(k);
                f(x, y)
            })
            .collect()
    }

    pub fn inner(&self, x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), y.len(), "grid functions of different length");
        self.weight() * x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Checked variant of [`Grid::inner`].
    pub fn try_inner(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() || x.len() != self.len() {
            return Err(Error::Usage(format!(
                "inner product of lengths {} and {} on a grid with {} nodes",
                x.len(),
                y.len(),
                self.len()
            )));
        }
        Ok(self.inner(x, y))
    }

    pub fn norm(&self, x: &[f64]) -> f64 {
        self.inner(x, x).sqrt()
    }

    pub fn norm_sq(&self, x: &[f64]) -> f64 {
        self.inner(x, x)
    }

    /// Squared distance `‖x - y‖²_h`.
    pub fn dist_sq(&self, x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), y.len());
        self.weight() * x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }

    /// Writes `i,j,value` rows for a grid function.
    pub fn write_csv<W: Write>(&self, values: &[f64], mut out: W) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Usage(format!(
                "grid function has {} values, grid has {} nodes",
                values.len(),
                self.len()
            )));
        }
        writeln!(out, "i,j,value")?;
        for (k, v) in values.iter().enumerate() {
            let (i, j) = self.node(k);
            writeln!(out, "{i},{j},{v:.16e}")?;
        }
        Ok(())
    }
}

/// Five-point Laplacian `A` with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct Operators {
    laplacian: SymBand,
    laplacian_sq: SymBand,
    factor: BandCholesky,
}

impl Operators {
    pub fn laplacian(&self) -> &SymBand {
        &self.laplacian
    }

    pub fn apply_a(&self, x: &[f64], out: &mut [f64]) {
        self.laplacian.mul_vec(x, out);
    }

    pub fn a_times(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply_a(x, &mut out);
        out
    }

    /// `S u = A⁻¹ B u` with `B` the identity.
    pub fn control_to_state(&self, u: &[f64]) -> Vec<f64> {
        self.factor.solve(u)
    }

    /// Checked variant of [`Operators::control_to_state`].
    pub fn try_control_to_state(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.factor.dim() {
            return Err(Error::Usage(format!(
                "control has {} values, expected {}",
                u.len(),
                self.factor.dim()
            )));
        }
        Ok(self.control_to_state(u))
    }

    /// `S* p = B* A⁻* p`. Equal to `S p` because `A` is symmetric and the
    /// mass matrix is a multiple of the identity.
    pub fn adjoint_state(&self, p: &[f64]) -> Vec<f64> {
        self.factor.solve(p)
    }

    /// `A²` plus a diagonal, in banded form. Used by the reduced Newton
    /// systems.
    pub fn laplacian_squared_plus_diag(&self, diag: &[f64]) -> SymBand {
        let mut out = self.laplacian_sq.clone();
        for (i, d) in diag.iter().enumerate() {
            if *d != 0.0 {
                out.add(i, i, *d);
            }
        }
        out
    }
}

fn square(a: &SymBand) -> SymBand {
    let n = a.dim();
    let bw = a.bandwidth();
    let mut out = SymBand::zeros(n, 2 * bw);
    for i in 0..n {
        for j in i.saturating_sub(2 * bw)..=i {
            // (A²)_{ij} = Σ_k A_ik A_kj over k inside both bands
            let kmin = i.saturating_sub(bw).max(j.saturating_sub(bw));
            let kmax = (j + bw).min(n - 1);
            let s: f64 = (kmin..=kmax).map(|k| a.get(i, k) * a.get(k, j)).sum();
            if s != 0.0 {
                out.add(i, j, s);
            }
        }
    }
    out
}

/// Assembles the grid and the factored operator for `cells` cells per side.
pub fn build(cells: usize) -> Result<(Grid, Operators)> {
    let grid = Grid::new(cells)?;
    let side = grid.side();
    let n = grid.len();
    let inv_h2 = 1.0 / grid.weight();
    let mut a = SymBand::zeros(n, side);
    for k in 0..n {
        let (i, j) = grid.node(k);
        a.add(k, k, 4.0 * inv_h2);
        if i > 1 {
            a.add(k, k - 1, -inv_h2);
        }
        if j > 1 {
            a.add(k, k - side, -inv_h2);
        }
    }
    let factor = a.cholesky()?;
    let laplacian_sq = square(&a);
    Ok((
        grid,
        Operators {
            laplacian: a,
            laplacian_sq,
            factor,
        },
    ))
}
