//! Brute-force reference: the reduced objective `F(β, Ψ(β))` on a uniform
//! lattice over the parameter box.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lower_level::{solve_lower_level, LowerLevelSolution};
use crate::problem::Problem;

#[derive(Debug, Clone)]
pub struct Lattice {
    /// Points per axis.
    pub points: usize,
    /// Lattice points in row-major order, last coordinate fastest.
    pub betas: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    /// Index of the smallest value; ties go to the first index.
    pub argmin: usize,
}

impl Lattice {
    pub fn min(&self) -> f64 {
        self.values[self.argmin]
    }

    pub fn argmin_beta(&self) -> &[f64] {
        &self.betas[self.argmin]
    }

    /// Lattice spacing per axis.
    pub fn spacing(&self, problem: &Problem) -> Vec<f64> {
        problem
            .q_lower()
            .iter()
            .zip(problem.q_upper())
            .map(|(lo, hi)| (hi - lo) / (self.points - 1) as f64)
            .collect()
    }

    /// Writes `beta0,...,beta{n-1},F` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.betas.first().map_or(0, Vec::len);
        let header: Vec<String> = (0..n)
            .map(|i| format!("beta{i}"))
            .chain(["F".into()])
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (b, v) in self.betas.iter().zip(&self.values) {
            for c in b {
                write!(out, "{c:.16e},")?;
            }
            writeln!(out, "{v:.16e}")?;
        }
        Ok(())
    }
}

/// Number of lattice points for `points` per axis in dimension `n`.
pub fn lattice_size(points: usize, n: usize) -> Option<usize> {
    (0..n).try_fold(1usize, |acc, _| acc.checked_mul(points))
}

/// Evaluates `F(β, Ψ(β))` on `points^n` lattice points. Lines along the
/// last axis run in parallel, warm-starting each solve from its neighbour.
pub fn lattice(problem: &Problem, points: usize) -> Result<Lattice> {
    if points < 2 {
        return Err(Error::Usage(
            "the lattice needs at least 2 points per axis".into(),
        ));
    }
    let n = problem.dim();
    let total =
        lattice_size(points, n).ok_or_else(|| Error::Usage("lattice size overflows".into()))?;
    let lo = problem.q_lower();
    let hi = problem.q_upper();
    let coord = |i: usize, k: usize| {
        if k == points - 1 {
            hi[i]
        } else {
            lo[i] + (hi[i] - lo[i]) * k as f64 / (points - 1) as f64
        }
    };
    let betas: Vec<Vec<f64>> = (0..total)
        .map(|mut idx| {
            let mut b = vec![0.0; n];
            for i in (0..n).rev() {
                b[i] = coord(i, idx % points);
                idx /= points;
            }
            b
        })
        .collect();
    let values: Vec<f64> = betas
        .par_chunks(points)
        .map(|line| {
            let mut warm: Option<LowerLevelSolution> = None;
            line.iter()
                .map(|b| {
                    let sol = solve_lower_level(problem, b, warm.as_ref())?;
                    let v = sol.upper_value;
                    warm = Some(sol);
                    Ok(v)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let mut argmin = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[argmin] {
            argmin = i;
        }
    }
    Ok(Lattice {
        points,
        betas,
        values,
        argmin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::test_support::problem;
    use crate::problem::Objective;

    #[test]
    fn three_by_three() {
        let p = problem(4, Objective::F2);
        let l = lattice(&p, 3).unwrap();
        assert_eq!(l.values.len(), 9);
        assert_eq!(l.betas[0], vec![0.1, 0.1]);
        assert_eq!(l.betas[1], vec![0.1, 0.55]);
        assert_eq!(l.betas[8], vec![1.0, 1.0]);
        let mut buf = Vec::new();
        l.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 10);
        assert!(l.values.iter().all(|v| *v >= l.min()));
    }

    #[test]
    fn argmin_of_pure_regularizer() {
        let mut p = problem(4, Objective::F2);
        let n = p.grid().len();
        // zero data and targets: F = σ_β/2 ‖β‖², smallest at the lower corner
        p.set_desired_states(vec![vec![0.0; n]; 2]).unwrap();
        p.set_targets(vec![0.0; n], vec![0.0; n]).unwrap();
        let l = lattice(&p, 4).unwrap();
        assert_eq!(l.argmin, 0);
        assert!((l.min() - 0.5 * p.sigma_beta() * 0.02).abs() < 1e-18);
        assert!(lattice(&p, 1).is_err());
    }
}
