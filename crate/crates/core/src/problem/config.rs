use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::global_solver::SolverSettings;

/// Upper-level objective. All three share the tracking terms
/// `½‖y - y_m‖² + (σ_u/2)‖u - u_m‖²` and differ in the parameter term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// `(σ_β/2)‖β - β_m‖²`
    F1,
    /// `(σ_β/2)‖β‖²`
    F2,
    /// `(σ_β/2) Σ 1/β_i²`
    F3,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Objective::F1 => "F1",
            Objective::F2 => "F2",
            Objective::F3 => "F3",
        };
        f.write_str(s)
    }
}

/// Where the upper-level targets `(y_m, u_m)` come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Target {
    /// Lower-level solution at the given parameter, computed on the same grid.
    FromBeta(Vec<f64>),
    /// Analytic functions from the registry.
    Analytic { state: String, control: String },
}

/// Problem instance as read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub q_lower: Vec<f64>,
    pub q_upper: Vec<f64>,
    pub sigma_l: f64,
    pub sigma_u: f64,
    pub sigma_beta: f64,
    pub grid_cells: usize,
    /// One registry name per parameter component.
    pub desired_states: Vec<String>,
    pub target: Target,
    /// Reference parameter of the F1 objective. Defaults to the `from_beta`
    /// target parameter when omitted.
    #[serde(default)]
    pub beta_m: Option<Vec<f64>>,
    #[serde(default = "default_control_lower")]
    pub control_lower: String,
    pub control_upper: String,
    pub objective: Objective,
    #[serde(default)]
    pub solver: SolverSettings,
}

fn default_control_lower() -> String {
    "zero".to_string()
}

impl ProblemConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Parameter dimension `n`.
    pub fn dim(&self) -> usize {
        self.desired_states.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if n == 0 {
            return Err(Error::Config(
                "at least one desired state is required".into(),
            ));
        }
        if self.q_lower.len() != n || self.q_upper.len() != n {
            return Err(Error::Config(format!(
                "box bounds must have {n} components (one per desired state)"
            )));
        }
        for i in 0..n {
            let (lo, hi) = (self.q_lower[i], self.q_upper[i]);
            if !(lo > 0.0 && lo < hi && hi.is_finite()) {
                return Err(Error::Config(format!(
                    "box component {i} must satisfy 0 < lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        for (name, v) in [
            ("sigma_l", self.sigma_l),
            ("sigma_u", self.sigma_u),
            ("sigma_beta", self.sigma_beta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.grid_cells < 2 {
            return Err(Error::Config("grid_cells must be at least 2".into()));
        }
        for name in self
            .desired_states
            .iter()
            .chain([&self.control_lower, &self.control_upper])
        {
            let _ = super::analytic(name)?;
        }
        match &self.target {
            Target::FromBeta(beta) => {
                if beta.len() != n || beta.iter().any(|b| !(*b > 0.0)) {
                    return Err(Error::Config(format!(
                        "target parameter must have {n} positive components"
                    )));
                }
            }
            Target::Analytic { state, control } => {
                let _ = super::analytic(state)?;
                let _ = super::analytic(control)?;
            }
        }
        if let Some(bm) = &self.beta_m {
            if bm.len() != n {
                return Err(Error::Config(format!("beta_m must have {n} components")));
            }
        }
        if self.objective == Objective::F1 && self.reference_beta().is_none() {
            return Err(Error::Config(
                "objective F1 needs beta_m or a from_beta target".into(),
            ));
        }
        self.solver.validate()
    }

    /// `β_m` as used by F1.
    pub fn reference_beta(&self) -> Option<Vec<f64>> {
        match (&self.beta_m, &self.target) {
            (Some(b), _) => Some(b.clone()),
            (None, Target::FromBeta(b)) => Some(b.clone()),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> &'static str {
        r#"{
            "q_lower": [0.1, 0.1],
            "q_upper": [1.0, 1.0],
            "sigma_l": 0.03,
            "sigma_u": 0.05,
            "sigma_beta": 1e-5,
            "grid_cells": 8,
            "desired_states": ["sin_sin", "bi_quartic"],
            "target": {"from_beta": [0.6, 0.3]},
            "control_upper": "constant:3",
            "objective": "F1"
        }"#
    }

    #[test]
    fn parses_with_defaults() {
        let cfg = ProblemConfig::from_json_str(sample()).unwrap();
        assert_eq!(cfg.dim(), 2);
        assert_eq!(cfg.control_lower, "zero");
        assert_eq!(cfg.reference_beta(), Some(vec![0.6, 0.3]));
        assert_eq!(cfg.solver.element_limit, 300_000);
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = sample().replace("\"objective\"", "\"bogus\": 1, \"objective\"");
        assert!(matches!(
            ProblemConfig::from_json_str(&text),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_bad_box() {
        let text = sample().replace("[0.1, 0.1]", "[0.0, 0.1]");
        assert!(ProblemConfig::from_json_str(&text).is_err());
        let text = sample().replace("[1.0, 1.0]", "[0.05, 1.0]");
        assert!(ProblemConfig::from_json_str(&text).is_err());
    }

    #[test]
    fn rejects_unknown_state_name() {
        let text = sample().replace("bi_quartic", "nope");
        assert!(ProblemConfig::from_json_str(&text).is_err());
    }

    #[test]
    fn analytic_target() {
        let text = sample()
            .replace(
                r#"{"from_beta": [0.6, 0.3]}"#,
                r#"{"analytic": {"state": "parabola_sin", "control": "zero"}}"#,
            )
            .replace("\"F1\"", "\"F3\"");
        let cfg = ProblemConfig::from_json_str(&text).unwrap();
        assert_eq!(cfg.objective, Objective::F3);
        assert!(cfg.reference_beta().is_none());
    }
}
