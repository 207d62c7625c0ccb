//! Problem data, objectives and their derivatives.
//!
//! The lower-level objective is the perspective form
//!
//! ```text
//! f(β, y, u) = Σ_i ‖y - y_{d,i}‖² / (2β_i) + (σ_l/2)‖u‖²
//! ```
//!
//! obtained from the weighted tracking functional through `β_i = 1/α_i`,
//! which makes `f` jointly convex in `(β, y, u)`. Norms are the discrete L²
//! norms of the grid; gradients with respect to grid functions are returned
//! as Riesz representatives, so adjoints reduce to transposes.

mod config;

pub use config::{Objective, ProblemConfig, Target};

use nalgebra::DMatrix;

use crate::discretization::{self, Grid, Operators};
use crate::error::{Error, Result};
use crate::geometry::Affine;
use crate::global_solver::SolverSettings;

/// Substitutes `β_i = 1/α_i`. The map is an involution, so it converts in
/// both directions.
pub fn alpha_to_beta(alpha: &[f64]) -> Result<Vec<f64>> {
    alpha
        .iter()
        .enumerate()
        .map(|(i, a)| {
            if *a > 0.0 && a.is_finite() {
                Ok(1.0 / a)
            } else {
                Err(Error::Domain(format!(
                    "component {i} must be positive, got {a}"
                )))
            }
        })
        .collect()
}

/// Maps the box `[a, b]` to `[1/b, 1/a]` componentwise.
pub fn alpha_box_to_beta_box(lower: &[f64], upper: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((alpha_to_beta(upper)?, alpha_to_beta(lower)?))
}

/// Analytic grid functions on `(-1, 1)²`, selected by name.
pub fn analytic(name: &str) -> Result<Box<dyn Fn(f64, f64) -> f64 + Send + Sync>> {
    use std::f64::consts::PI;
    Ok(match name {
        "sin_sin" => Box::new(|x, y| (PI * x).sin() * (PI * y).sin()),
        "bi_quartic" => Box::new(|x, y| (x + 1.0) * (x - 1.0) * (y + 1.0) * (y - 1.0)),
        "parabola_sin" => Box::new(|x, y| (x - 1.0) * (x + 1.0) * (PI * y).sin()),
        "zero" => Box::new(|_, _| 0.0),
        other => {
            let value = other
                .strip_prefix("constant:")
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Config(format!("unknown grid function '{other}'")))?;
            Box::new(move |_, _| value)
        }
    })
}

/// Gradient of an objective: an `ℝⁿ` part and Riesz representatives for
/// the state and control.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub beta: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
}

/// Value and derivatives of the `u`-free part `h` of the penalized
/// objective `F + γ(f - ξ_T)`.
///
/// `hess_yy` is a multiple of the identity, and `hess_by[i]` is the Riesz
/// representative of `∂(h'_β)_i / ∂y` (equivalently of `∂h'_y / ∂β_i`).
#[derive(Debug, Clone)]
pub struct HEval {
    pub value: f64,
    pub grad_beta: Vec<f64>,
    pub grad_y: Vec<f64>,
    pub hess_bb: DMatrix<f64>,
    pub hess_by: Vec<Vec<f64>>,
    pub hess_yy: f64,
}

#[derive(Debug, Clone)]
pub struct Problem {
    config: ProblemConfig,
    grid: Grid,
    ops: Operators,
    desired: Vec<Vec<f64>>,
    y_target: Vec<f64>,
    u_target: Vec<f64>,
    u_lower: Vec<f64>,
    u_upper: Vec<f64>,
    beta_ref: Option<Vec<f64>>,
}

impl Problem {
    /// Builds the discrete instance. A `from_beta` target triggers one
    /// lower-level solve.
    pub fn new(config: ProblemConfig) -> Result<Self> {
        config.validate()?;
        let (grid, ops) = discretization::build(config.grid_cells)?;
        let desired = config
            .desired_states
            .iter()
            .map(|name| analytic(name).map(|f| grid.sample(f)))
            .collect::<Result<Vec<_>>>()?;
        let u_lower = grid.sample(analytic(&config.control_lower)?);
        let u_upper = grid.sample(analytic(&config.control_upper)?);
        if u_lower.iter().zip(&u_upper).any(|(a, b)| a > b) {
            return Err(Error::Config(
                "control bounds must satisfy lower <= upper".into(),
            ));
        }
        let zeros = vec![0.0; grid.len()];
        let mut problem = Self {
            beta_ref: config.reference_beta(),
            grid,
            ops,
            desired,
            y_target: zeros.clone(),
            u_target: zeros,
            u_lower,
            u_upper,
            config,
        };
        match problem.config.target.clone() {
            Target::FromBeta(beta) => {
                let sol = crate::lower_level::solve_lower_level(&problem, &beta, None)?;
                problem.y_target = sol.y;
                problem.u_target = sol.u;
            }
            Target::Analytic { state, control } => {
                problem.y_target = problem.grid.sample(analytic(&state)?);
                problem.u_target = problem.grid.sample(analytic(&control)?);
            }
        }
        Ok(problem)
    }

    pub fn config(&self) -> &ProblemConfig {
        &self.config
    }

    pub fn settings(&self) -> &SolverSettings {
        &self.config.solver
    }

    pub fn settings_mut(&mut self) -> &mut SolverSettings {
        &mut self.config.solver
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn ops(&self) -> &Operators {
        &self.ops
    }

    pub fn dim(&self) -> usize {
        self.desired.len()
    }

    pub fn q_lower(&self) -> &[f64] {
        &self.config.q_lower
    }

    pub fn q_upper(&self) -> &[f64] {
        &self.config.q_upper
    }

    pub fn sigma_l(&self) -> f64 {
        self.config.sigma_l
    }

    pub fn sigma_u(&self) -> f64 {
        self.config.sigma_u
    }

    pub fn sigma_beta(&self) -> f64 {
        self.config.sigma_beta
    }

    pub fn objective(&self) -> Objective {
        self.config.objective
    }

    pub fn set_objective(&mut self, objective: Objective) -> Result<()> {
        if objective == Objective::F1 && self.beta_ref.is_none() {
            return Err(Error::Config(
                "objective F1 needs a reference parameter".into(),
            ));
        }
        self.config.objective = objective;
        Ok(())
    }

    pub fn desired_states(&self) -> &[Vec<f64>] {
        &self.desired
    }

    /// Replaces the desired states (same count and grid size).
    pub fn set_desired_states(&mut self, desired: Vec<Vec<f64>>) -> Result<()> {
        if desired.len() != self.dim() || desired.iter().any(|d| d.len() != self.grid.len()) {
            return Err(Error::Usage(
                "desired states do not match the instance".into(),
            ));
        }
        self.desired = desired;
        Ok(())
    }

    pub fn y_target(&self) -> &[f64] {
        &self.y_target
    }

    pub fn u_target(&self) -> &[f64] {
        &self.u_target
    }

    pub fn set_targets(&mut self, y: Vec<f64>, u: Vec<f64>) -> Result<()> {
        if y.len() != self.grid.len() || u.len() != self.grid.len() {
            return Err(Error::Usage("targets do not match the grid".into()));
        }
        self.y_target = y;
        self.u_target = u;
        Ok(())
    }

    pub fn u_lower(&self) -> &[f64] {
        &self.u_lower
    }

    pub fn u_upper(&self) -> &[f64] {
        &self.u_upper
    }

    pub fn set_control_bounds(&mut self, lower: Vec<f64>, upper: Vec<f64>) -> Result<()> {
        if lower.len() != self.grid.len()
            || upper.len() != self.grid.len()
            || lower.iter().zip(&upper).any(|(a, b)| a > b)
        {
            return Err(Error::Usage("invalid control bounds".into()));
        }
        self.u_lower = lower;
        self.u_upper = upper;
        Ok(())
    }

    pub fn beta_ref(&self) -> Option<&[f64]> {
        self.beta_ref.as_deref()
    }

    pub fn contains(&self, beta: &[f64]) -> bool {
        beta.len() == self.dim()
            && beta
                .iter()
                .zip(self.q_lower().iter().zip(self.q_upper()))
                .all(|(b, (lo, hi))| *b >= *lo && *b <= *hi)
    }

    /// Projection onto `[u_a, u_b]`.
    pub fn clip_control(&self, v: f64, k: usize) -> f64 {
        v.max(self.u_lower[k]).min(self.u_upper[k])
    }

    fn check_beta(&self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.dim() {
            return Err(Error::Usage(format!(
                "parameter has {} components, expected {}",
                beta.len(),
                self.dim()
            )));
        }
        if let Some(i) = beta.iter().position(|b| !(*b > 0.0)) {
            return Err(Error::Domain(format!(
                "parameter component {i} must be positive, got {}",
                beta[i]
            )));
        }
        Ok(())
    }

    /// `‖y - y_{d,i}‖²_h` for every `i`.
    pub fn tracking_distances(&self, y: &[f64]) -> Vec<f64> {
        self.desired
            .iter()
            .map(|d| self.grid.dist_sq(y, d))
            .collect()
    }

    /// Lower-level objective `f`.
    pub fn eval_f(&self, beta: &[f64], y: &[f64], u: &[f64]) -> Result<f64> {
        self.check_beta(beta)?;
        let dist = self.tracking_distances(y);
        let tracking: f64 = dist.iter().zip(beta).map(|(d, b)| d / (2.0 * b)).sum();
        Ok(tracking + 0.5 * self.sigma_l() * self.grid.norm_sq(u))
    }

    pub fn grad_f(&self, beta: &[f64], y: &[f64], u: &[f64]) -> Result<Gradient> {
        self.check_beta(beta)?;
        let dist = self.tracking_distances(y);
        let g_beta = dist
            .iter()
            .zip(beta)
            .map(|(d, b)| -d / (2.0 * b * b))
            .collect();
        let mut g_y = vec![0.0; y.len()];
        for (d, b) in self.desired.iter().zip(beta) {
            for k in 0..y.len() {
                g_y[k] += (y[k] - d[k]) / b;
            }
        }
        let g_u = u.iter().map(|v| self.sigma_l() * v).collect();
        Ok(Gradient {
            beta: g_beta,
            y: g_y,
            u: g_u,
        })
    }

    fn beta_term(&self, variant: Objective, beta: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let s = self.sigma_beta();
        match variant {
            Objective::F1 => {
                let bm = self.beta_ref.as_ref().ok_or_else(|| {
                    Error::Config("objective F1 needs a reference parameter".into())
                })?;
                let value = 0.5
                    * s
                    * beta
                        .iter()
                        .zip(bm)
                        .map(|(b, m)| (b - m) * (b - m))
                        .sum::<f64>();
                let grad = beta.iter().zip(bm).map(|(b, m)| s * (b - m)).collect();
                Ok((value, grad, vec![s; beta.len()]))
            }
            Objective::F2 => {
                let value = 0.5 * s * beta.iter().map(|b| b * b).sum::<f64>();
                Ok((
                    value,
                    beta.iter().map(|b| s * b).collect(),
                    vec![s; beta.len()],
                ))
            }
            Objective::F3 => {
                if let Some(i) = beta.iter().position(|b| !(*b > 0.0)) {
                    return Err(Error::Domain(format!(
                        "F3 needs positive parameters, component {i} is {}",
                        beta[i]
                    )));
                }
                let value = 0.5 * s * beta.iter().map(|b| 1.0 / (b * b)).sum::<f64>();
                let grad = beta.iter().map(|b| -s / (b * b * b)).collect();
                let hess = beta.iter().map(|b| 3.0 * s / (b * b * b * b)).collect();
                Ok((value, grad, hess))
            }
        }
    }

    /// Upper-level objective of the given variant.
    pub fn eval_upper_with(
        &self,
        variant: Objective,
        beta: &[f64],
        y: &[f64],
        u: &[f64],
    ) -> Result<f64> {
        let (b, _, _) = self.beta_term(variant, beta)?;
        Ok(b + 0.5 * self.grid.dist_sq(y, &self.y_target)
            + 0.5 * self.sigma_u() * self.grid.dist_sq(u, &self.u_target))
    }

    pub fn grad_upper_with(
        &self,
        variant: Objective,
        beta: &[f64],
        y: &[f64],
        u: &[f64],
    ) -> Result<Gradient> {
        let (_, g_beta, _) = self.beta_term(variant, beta)?;
        Ok(Gradient {
            beta: g_beta,
            y: y.iter().zip(&self.y_target).map(|(a, b)| a - b).collect(),
            u: u.iter()
                .zip(&self.u_target)
                .map(|(a, b)| self.sigma_u() * (a - b))
                .collect(),
        })
    }

    /// Upper-level objective of the configured variant.
    pub fn eval_upper(&self, beta: &[f64], y: &[f64], u: &[f64]) -> Result<f64> {
        self.eval_upper_with(self.objective(), beta, y, u)
    }

    pub fn grad_upper(&self, beta: &[f64], y: &[f64], u: &[f64]) -> Result<Gradient> {
        self.grad_upper_with(self.objective(), beta, y, u)
    }

    /// The `u`-dependent part of `F + γ(f - ξ)`:
    /// `(σ_u/2)‖u - u_m‖² + γ(σ_l/2)‖u‖²`.
    pub fn control_part(&self, gamma: f64, u: &[f64]) -> f64 {
        0.5 * self.sigma_u() * self.grid.dist_sq(u, &self.u_target)
            + gamma * 0.5 * self.sigma_l() * self.grid.norm_sq(u)
    }

    /// `h(β, y) = [β,y-part of F] + γ(Σ ‖y - y_{d,i}‖²/(2β_i) - ξ(β))` with
    /// first and second derivatives.
    pub fn eval_h(&self, beta: &[f64], y: &[f64], gamma: f64, xi: &Affine) -> Result<HEval> {
        self.check_beta(beta)?;
        let n = self.dim();
        let (bval, bgrad, bhess) = self.beta_term(self.objective(), beta)?;
        let dist = self.tracking_distances(y);

        let mut value = bval + 0.5 * self.grid.dist_sq(y, &self.y_target);
        let tracking: f64 = dist.iter().zip(beta).map(|(d, b)| d / (2.0 * b)).sum();
        value += gamma * (tracking - xi.eval(beta));

        let grad_beta = (0..n)
            .map(|i| bgrad[i] - gamma * dist[i] / (2.0 * beta[i] * beta[i]) - gamma * xi.slope[i])
            .collect();

        let inv_sum: f64 = beta.iter().map(|b| 1.0 / b).sum();
        let mut grad_y: Vec<f64> = y.iter().zip(&self.y_target).map(|(a, b)| a - b).collect();
        let mut hess_by = Vec::with_capacity(n);
        for (d, b) in self.desired.iter().zip(beta) {
            let scale = -gamma / (b * b);
            let mut col = vec![0.0; y.len()];
            for k in 0..y.len() {
                let r = y[k] - d[k];
                grad_y[k] += gamma * r / b;
                col[k] = scale * r;
            }
            hess_by.push(col);
        }

        let mut hess_bb = DMatrix::zeros(n, n);
        for i in 0..n {
            hess_bb[(i, i)] = bhess[i] + gamma * dist[i] / (beta[i] * beta[i] * beta[i]);
        }

        Ok(HEval {
            value,
            grad_beta,
            grad_y,
            hess_bb,
            hess_by,
            hess_yy: 1.0 + gamma * inv_sum,
        })
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Paper-style instance on a coarse grid with a `from_beta` target.
    pub fn config(cells: usize, objective: Objective) -> ProblemConfig {
        let target = match objective {
            Objective::F3 => Target::Analytic {
                state: "parabola_sin".into(),
                control: "zero".into(),
            },
            _ => Target::FromBeta(vec![0.6, 0.3]),
        };
        ProblemConfig {
            q_lower: vec![0.1, 0.1],
            q_upper: vec![1.0, 1.0],
            sigma_l: 0.03,
            sigma_u: 0.05,
            sigma_beta: 1e-5,
            grid_cells: cells,
            desired_states: vec!["sin_sin".into(), "bi_quartic".into()],
            target,
            beta_m: Some(vec![0.6, 0.3]),
            control_lower: "zero".into(),
            control_upper: "constant:3".into(),
            objective,
            solver: SolverSettings::default(),
        }
    }

    pub fn problem(cells: usize, objective: Objective) -> Problem {
        Problem::new(config(cells, objective)).unwrap()
    }
}
