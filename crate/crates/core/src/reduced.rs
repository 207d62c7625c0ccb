//! Block elimination for the state/control/adjoint rows of the Newton
//! systems.
//!
//! Both Newton solvers share the linear system
//!
//! ```text
//! c·dy + A dp        = -r_y
//! du   - D dp        = -r_u
//! A dy - du          = -r_s
//! ```
//!
//! with `c > 0` and `D = diag(d) ≥ 0` (`d_k = 1/σ̂` on the inactive set of
//! the control projection, zero elsewhere). Eliminating `du` and `dy` leaves
//! `(A² + cD) dp = c(r_s + r_u) - A r_y`, an SPD banded system.

use crate::banded::BandCholesky;
use crate::discretization::Operators;
use crate::error::Result;

pub(crate) struct Correction {
    pub dy: Vec<f64>,
    pub du: Vec<f64>,
    pub dp: Vec<f64>,
}

pub(crate) struct ReducedSystem<'a> {
    ops: &'a Operators,
    factor: BandCholesky,
    c: f64,
    d: Vec<f64>,
}

impl<'a> ReducedSystem<'a> {
    pub fn new(ops: &'a Operators, c: f64, d: Vec<f64>) -> Result<Self> {
        let scaled: Vec<f64> = d.iter().map(|v| c * v).collect();
        let factor = ops.laplacian_squared_plus_diag(&scaled).cholesky()?;
        Ok(Self { ops, factor, c, d })
    }

    /// Solves the block system for the given residuals. `None` stands for a
    /// zero residual block.
    pub fn solve(&self, r_y: &[f64], r_u: Option<&[f64]>, r_s: Option<&[f64]>) -> Correction {
        let n = r_y.len();
        let a_ry = self.ops.a_times(r_y);
        let mut dp: Vec<f64> = (0..n)
            .map(|k| {
                let ru = r_u.map_or(0.0, |r| r[k]);
                let rs = r_s.map_or(0.0, |r| r[k]);
                self.c * (rs + ru) - a_ry[k]
            })
            .collect();
        self.factor.solve_in_place(&mut dp);
        let a_dp = self.ops.a_times(&dp);
        let dy = (0..n).map(|k| (-r_y[k] - a_dp[k]) / self.c).collect();
        let du = (0..n)
            .map(|k| -r_u.map_or(0.0, |r| r[k]) + self.d[k] * dp[k])
            .collect();
        Correction { dy, du, dp }
    }
}
