#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ovr_core::geometry::{build_xi, initial_triangulation, refine, Simplex};
use ovr_core::global_solver::{run_with, SolverSettings};
use ovr_core::lower_level::ValueFunction;
use ovr_core::{Objective, Problem, ProblemConfig, Target};

/// Instance with the reference data: two desired states on `(-1, 1)²`,
/// controls in `[0, 3]`, parameters in `[0.1, 1]²`.
pub fn config(cells: usize, objective: Objective, beta_m: [f64; 2]) -> ProblemConfig {
    let target = match objective {
        Objective::F3 => Target::Analytic {
            state: "parabola_sin".into(),
            control: "zero".into(),
        },
        _ => Target::FromBeta(beta_m.to_vec()),
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
        beta_m: Some(beta_m.to_vec()),
        control_lower: "zero".into(),
        control_upper: "constant:3".into(),
        objective,
        solver: SolverSettings::default(),
    }
}

pub fn problem(cells: usize, objective: Objective) -> Problem {
    Problem::new(config(cells, objective, [0.6, 0.3])).unwrap()
}

/// Dense five-point Laplacian on the interior nodes, numbered row by row
/// with the first index fastest.
pub fn dense_laplacian(cells: usize) -> DMatrix<f64> {
    let s = cells - 1;
    let h = 2.0 / cells as f64;
    let c = 1.0 / (h * h);
    let mut a = DMatrix::zeros(s * s, s * s);
    for j in 0..s {
        for i in 0..s {
            let k = i + j * s;
            a[(k, k)] = 4.0 * c;
            if i > 0 {
                a[(k, k - 1)] = -c;
            }
            if i + 1 < s {
                a[(k, k + 1)] = -c;
            }
            if j > 0 {
                a[(k, k - s)] = -c;
            }
            if j + 1 < s {
                a[(k, k + s)] = -c;
            }
        }
    }
    a
}

/// Optimal control of the lower level by exhaustive enumeration of all
/// `3^N` lower/free/upper patterns of the reduced box-constrained QP.
pub fn enumerate_lower_level(problem: &Problem, beta: &[f64]) -> Vec<f64> {
    let cells = problem.grid().cells();
    let a = dense_laplacian(cells);
    let s = a.clone().try_inverse().unwrap();
    let n = s.nrows();
    let weights: Vec<f64> = beta.iter().map(|b| 1.0 / b).collect();
    let wsum: f64 = weights.iter().sum();
    let hess = s.transpose() * &s * wsum + DMatrix::identity(n, n) * problem.sigma_l();
    let mut rhs_state = DVector::zeros(n);
    for (d, w) in problem.desired_states().iter().zip(&weights) {
        rhs_state += DVector::from_column_slice(d) * *w;
    }
    let g = s.transpose() * rhs_state;
    let lo = problem.u_lower();
    let hi = problem.u_upper();
    let scale = g.amax().max(1.0);

    let mut best: Option<(f64, DVector<f64>)> = None;
    let total = 3usize.pow(n as u32);
    for code in 0..total {
        let mut pattern = vec![0u8; n];
        let mut c = code;
        for p in pattern.iter_mut() {
            *p = (c % 3) as u8;
            c /= 3;
        }
        let free: Vec<usize> = (0..n).filter(|&k| pattern[k] == 1).collect();
        let mut u = DVector::zeros(n);
        for k in 0..n {
            match pattern[k] {
                0 => u[k] = lo[k],
                2 => u[k] = hi[k],
                _ => {}
            }
        }
        if !free.is_empty() {
            let m = free.len();
            let mut hff = DMatrix::zeros(m, m);
            let mut r = DVector::zeros(m);
            for (a_, &i) in free.iter().enumerate() {
                r[a_] = g[i]
                    - (0..n)
                        .filter(|k| pattern[*k] != 1)
                        .map(|k| hess[(i, k)] * u[k])
                        .sum::<f64>();
                for (b_, &j) in free.iter().enumerate() {
                    hff[(a_, b_)] = hess[(i, j)];
                }
            }
            let x = hff.cholesky().unwrap().solve(&r);
            for (a_, &i) in free.iter().enumerate() {
                u[i] = x[a_];
            }
        }
        let grad = &hess * &u - &g;
        let tol = 1e-11 * scale;
        let feasible = (0..n).all(|k| match pattern[k] {
            0 => grad[k] >= -tol,
            2 => grad[k] <= tol,
            _ => u[k] >= lo[k] - 1e-12 && u[k] <= hi[k] + 1e-12,
        });
        if feasible {
            let value = 0.5 * u.dot(&(&hess * &u)) - g.dot(&u);
            if best.as_ref().is_none_or(|(v, _)| value < *v) {
                best = Some((value, u));
            }
        }
    }
    best.expect("a convex box-constrained QP has a KKT pattern")
        .1
        .as_slice()
        .to_vec()
}

/// Reference coordinates `1 ≥ x_1 ≥ x_2 ≥ 0` on a lattice with `k` steps.
pub fn reference_lattice(k: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for a in 0..=k {
        for b in 0..=a {
            out.push(vec![a as f64 / k as f64, b as f64 / k as f64]);
        }
    }
    out
}

/// Chain of simplices, each the child of the previous one containing `point`.
pub fn chain(lo: &[f64], hi: &[f64], point: &[f64], levels: usize) -> Vec<Simplex> {
    let mut s = initial_triangulation(lo, hi)
        .unwrap()
        .into_iter()
        .find(|s| s.contains(point, 0.0))
        .unwrap();
    let mut out = vec![s.clone()];
    for _ in 0..levels {
        s = refine(&s, 0, 0.0)
            .unwrap()
            .into_iter()
            .find(|c| c.contains(point, 0.0))
            .unwrap();
        out.push(s.clone());
    }
    out
}

/// Largest `ξ_T - φ` over the sample points, and the smallest.
pub fn relaxation_gap(problem: &Problem, s: &Simplex, samples: &[Vec<f64>]) -> (f64, f64) {
    let vf = ValueFunction::new(problem);
    let values: Vec<f64> = s.vertices.iter().map(|v| vf.value(v).unwrap().0).collect();
    let xi = build_xi(&s.vertices, &values).unwrap();
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for x in samples {
        let b = s.chart(x);
        let d = xi.eval(&b) - vf.value(&b).unwrap().0;
        hi = hi.max(d);
        lo = lo.min(d);
    }
    (hi, lo)
}

/// Live simplices with interpolants, as seen after driver iteration
/// `iteration` of a run on `problem`.
pub fn live_simplices(problem: &Problem, iteration: usize) -> Vec<Simplex> {
    let mut out = Vec::new();
    let _ = run_with(problem, |state| {
        if state.iteration == iteration {
            out = state
                .live()
                .into_iter()
                .map(|id| state.pool[id].clone())
                .filter(|s| s.xi.is_some())
                .collect();
            return Err(ovr_core::Error::Usage("snapshot taken".into()));
        }
        Ok(())
    });
    out
}
