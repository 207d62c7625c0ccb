//! Lower-level solves and the optimal-value function `φ(β)`.
//!
//! For fixed `β` the lower-level optimality system is
//!
//! ```text
//! c·y - Σ_i y_{d,i}/β_i + A p = 0,     c = Σ_i 1/β_i
//! u - clip(p/σ_l, u_a, u_b)  = 0
//! A y - u                    = 0
//! ```
//!
//! which is solved by semismooth Newton. This is the penalty-subproblem
//! residual with `F ≡ 0`, `γ = 1`, `ξ ≡ 0` and `β` frozen.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::problem::Problem;
use crate::reduced::ReducedSystem;

#[derive(Debug, Clone)]
pub struct LowerLevelSolution {
    pub beta: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    /// Adjoint state.
    pub p: Vec<f64>,
    /// Multiplier of the control constraint, `ν = p - σ_l u`.
    pub nu: Vec<f64>,
    /// `φ(β) = f(β, y, u)`.
    pub phi: f64,
    /// Upper-level objective at `(β, y, u)`.
    pub upper_value: f64,
    pub newton_iters: usize,
    pub residual: f64,
}

impl LowerLevelSolution {
    /// Number of nodes where the control sits on a bound.
    pub fn active_set_size(&self, problem: &Problem) -> usize {
        self.u
            .iter()
            .enumerate()
            .filter(|(k, u)| **u <= problem.u_lower()[*k] || **u >= problem.u_upper()[*k])
            .count()
    }
}

/// Residuals of the lower-level KKT conditions, all in the max norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    /// `‖f'_y + A p‖`
    pub adjoint: f64,
    /// `‖f'_u - p + ν‖`
    pub gradient: f64,
    /// `‖A y - u‖`
    pub state: f64,
    /// `‖u - P(u + ν)‖`, zero iff `ν` lies in the normal cone at `u`.
    pub normal_cone: f64,
    /// Largest bound violation of `u`.
    pub bounds: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.adjoint
            .max(self.gradient)
            .max(self.state)
            .max(self.normal_cone)
            .max(self.bounds)
    }
}

pub fn kkt_report(problem: &Problem, sol: &LowerLevelSolution) -> Result<KktReport> {
    let g = problem.grad_f(&sol.beta, &sol.y, &sol.u)?;
    let ap = problem.ops().a_times(&sol.p);
    let ay = problem.ops().a_times(&sol.y);
    let inf = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0, |m: f64, v| m.max(v.abs()));
    let n = sol.u.len();
    Ok(KktReport {
        adjoint: inf(&mut (0..n).map(|k| g.y[k] + ap[k])),
        gradient: inf(&mut (0..n).map(|k| g.u[k] - sol.p[k] + sol.nu[k])),
        state: inf(&mut (0..n).map(|k| ay[k] - sol.u[k])),
        normal_cone: inf(
            &mut (0..n).map(|k| sol.u[k] - problem.clip_control(sol.u[k] + sol.nu[k], k))
        ),
        bounds: inf(&mut (0..n).map(|k| {
            (problem.u_lower()[k] - sol.u[k])
                .max(sol.u[k] - problem.u_upper()[k])
                .max(0.0)
        })),
    })
}

struct State {
    y: Vec<f64>,
    u: Vec<f64>,
    p: Vec<f64>,
}

struct Residual {
    adjoint: Vec<f64>,
    projection: Vec<f64>,
    state: Vec<f64>,
}

impl Residual {
    fn inf_norm(&self) -> f64 {
        self.adjoint
            .iter()
            .chain(&self.projection)
            .chain(&self.state)
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    fn merit(&self, weight: f64) -> f64 {
        let s: f64 = self
            .adjoint
            .iter()
            .chain(&self.projection)
            .chain(&self.state)
            .map(|v| v * v)
            .sum();
        (weight * s).sqrt()
    }
}

struct Data<'a> {
    problem: &'a Problem,
    c: f64,
    /// `Σ_i y_{d,i}/β_i`
    pull: Vec<f64>,
}

impl<'a> Data<'a> {
    fn new(problem: &'a Problem, beta: &[f64]) -> Self {
        let n = problem.grid().len();
        let mut pull = vec![0.0; n];
        for (d, b) in problem.desired_states().iter().zip(beta) {
            for k in 0..n {
                pull[k] += d[k] / b;
            }
        }
        Self {
            problem,
            c: beta.iter().map(|b| 1.0 / b).sum(),
            pull,
        }
    }

    fn residual(&self, s: &State) -> Residual {
        let ops = self.problem.ops();
        let sl = self.problem.sigma_l();
        let ap = ops.a_times(&s.p);
        let ay = ops.a_times(&s.y);
        let n = s.y.len();
        Residual {
            adjoint: (0..n)
                .map(|k| self.c * s.y[k] - self.pull[k] + ap[k])
                .collect(),
            projection: (0..n)
                .map(|k| s.u[k] - self.problem.clip_control(s.p[k] / sl, k))
                .collect(),
            state: (0..n).map(|k| ay[k] - s.u[k]).collect(),
        }
    }

    /// `(y, p)` consistent with `u`: state and adjoint rows hold exactly.
    fn consistent(&self, u: Vec<f64>) -> State {
        let ops = self.problem.ops();
        let y = ops.control_to_state(&u);
        let rhs: Vec<f64> = y
            .iter()
            .zip(&self.pull)
            .map(|(y, d)| -(self.c * y - d))
            .collect();
        let p = ops.adjoint_state(&rhs);
        State { y, u, p }
    }
}

/// Solves the lower-level problem at `beta` by semismooth Newton. A warm
/// start contributes its control; state and adjoint are recomputed from it.
pub fn solve_lower_level(
    problem: &Problem,
    beta: &[f64],
    warm: Option<&LowerLevelSolution>,
) -> Result<LowerLevelSolution> {
    if beta.len() != problem.dim() {
        return Err(Error::Usage(format!(
            "parameter has {} components, expected {}",
            beta.len(),
            problem.dim()
        )));
    }
    if let Some(i) = beta.iter().position(|b| !(*b > 0.0 && b.is_finite())) {
        return Err(Error::Domain(format!(
            "parameter component {i} must be positive, got {}",
            beta[i]
        )));
    }
    let settings = problem.settings();
    let tol = settings.lower_level_tol;
    let max_iters = settings.lower_level_max_iters;
    let weight = problem.grid().weight();
    let n = problem.grid().len();
    let sl = problem.sigma_l();
    let data = Data::new(problem, beta);

    let u0 = match warm {
        Some(w) if w.u.len() == n => w.u.clone(),
        _ => (0..n).map(|k| problem.clip_control(0.0, k)).collect(),
    };
    let mut state = data.consistent(u0);
    let mut res = data.residual(&state);
    let mut iters = 0;
    while res.inf_norm() > tol {
        if iters >= max_iters {
            return Err(Error::NotConverged {
                context: format!("lower level at beta = {beta:?}"),
                iterations: iters,
                residual: res.inf_norm(),
            });
        }
        iters += 1;
        let d: Vec<f64> = (0..n)
            .map(|k| {
                let v = state.p[k] / sl;
                if v >= problem.u_lower()[k] && v <= problem.u_upper()[k] {
                    1.0 / sl
                } else {
                    0.0
                }
            })
            .collect();
        let sys = ReducedSystem::new(problem.ops(), data.c, d)?;
        let step = sys.solve(&res.adjoint, Some(&res.projection), Some(&res.state));

        let merit0 = res.merit(weight);
        let mut accepted = None;
        for j in 0..=settings.max_backtracks {
            let t = 0.5f64.powi(j as i32);
            let trial = State {
                y: axpy(&state.y, t, &step.dy),
                u: axpy(&state.u, t, &step.du),
                p: axpy(&state.p, t, &step.dp),
            };
            let r = data.residual(&trial);
            if r.merit(weight) <= (1.0 - 0.25 * t) * merit0 {
                accepted = Some((trial, r));
                break;
            }
        }
        let (next, r) = accepted.unwrap_or_else(|| {
            // nonmonotone fallback: take the full step
            let trial = State {
                y: axpy(&state.y, 1.0, &step.dy),
                u: axpy(&state.u, 1.0, &step.du),
                p: axpy(&state.p, 1.0, &step.dp),
            };
            let r = data.residual(&trial);
            (trial, r)
        });
        state = next;
        res = r;
    }

    // Snap the control onto the projection so the bounds hold exactly.
    let u: Vec<f64> = (0..n)
        .map(|k| problem.clip_control(state.u[k], k))
        .collect();
    let nu = (0..n).map(|k| state.p[k] - sl * u[k]).collect();
    let phi = problem.eval_f(beta, &state.y, &u)?;
    let upper_value = problem.eval_upper(beta, &state.y, &u)?;
    Ok(LowerLevelSolution {
        beta: beta.to_vec(),
        y: state.y,
        u,
        p: state.p,
        nu,
        phi,
        upper_value,
        newton_iters: iters,
        residual: res.inf_norm(),
    })
}

fn axpy(x: &[f64], t: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + t * b).collect()
}

/// `φ'(β)_i = -‖y_β - y_{d,i}‖² / (2β_i²)`.
pub fn phi_gradient(problem: &Problem, sol: &LowerLevelSolution) -> Vec<f64> {
    problem
        .tracking_distances(&sol.y)
        .iter()
        .zip(&sol.beta)
        .map(|(d, b)| -d / (2.0 * b * b))
        .collect()
}

/// Cache key: every component rounded to 12 significant digits.
pub fn cache_key(beta: &[f64]) -> String {
    beta.iter()
        .map(|b| format!("{b:.11e}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Memoized value function. Lookups are concurrent; inserts keep the first
/// stored solution for a key.
pub struct ValueFunction<'a> {
    problem: &'a Problem,
    cache: RwLock<BTreeMap<String, Arc<LowerLevelSolution>>>,
    solves: AtomicUsize,
    newton_iters: AtomicUsize,
}

impl<'a> ValueFunction<'a> {
    pub fn new(problem: &'a Problem) -> Self {
        Self {
            problem,
            cache: RwLock::new(BTreeMap::new()),
            solves: AtomicUsize::new(0),
            newton_iters: AtomicUsize::new(0),
        }
    }

    pub fn problem(&self) -> &Problem {
        self.problem
    }

    pub fn len(&self) -> usize {
        self.cache.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lower-level solves performed so far (cache misses).
    pub fn solves(&self) -> usize {
        self.solves.load(Ordering::Relaxed)
    }

    /// Newton iterations spent in lower-level solves so far.
    pub fn newton_iters(&self) -> usize {
        self.newton_iters.load(Ordering::Relaxed)
    }

    pub fn cached(&self, beta: &[f64]) -> Option<Arc<LowerLevelSolution>> {
        self.cache.read().unwrap().get(&cache_key(beta)).cloned()
    }

    /// Nearest cached solution in Euclidean distance; ties go to the
    /// smallest key.
    fn nearest(
        cache: &BTreeMap<String, Arc<LowerLevelSolution>>,
        beta: &[f64],
    ) -> Option<Arc<LowerLevelSolution>> {
        let mut best: Option<(f64, &Arc<LowerLevelSolution>)> = None;
        for sol in cache.values() {
            let d: f64 = sol
                .beta
                .iter()
                .zip(beta)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, sol));
            }
        }
        best.map(|(_, s)| Arc::clone(s))
    }

    fn solve_with(
        &self,
        beta: &[f64],
        warm: Option<&LowerLevelSolution>,
    ) -> Result<LowerLevelSolution> {
        let sol = solve_lower_level(self.problem, beta, warm)?;
        self.solves.fetch_add(1, Ordering::Relaxed);
        self.newton_iters
            .fetch_add(sol.newton_iters, Ordering::Relaxed);
        Ok(sol)
    }

    pub fn solution(&self, beta: &[f64]) -> Result<Arc<LowerLevelSolution>> {
        let key = cache_key(beta);
        let warm = {
            let cache = self.cache.read().unwrap();
            if let Some(hit) = cache.get(&key) {
                return Ok(Arc::clone(hit));
            }
            Self::nearest(&cache, beta)
        };
        let sol = Arc::new(self.solve_with(beta, warm.as_deref())?);
        let mut cache = self.cache.write().unwrap();
        Ok(Arc::clone(cache.entry(key).or_insert(sol)))
    }

    /// `φ(β)` together with the lower-level solution.
    pub fn value(&self, beta: &[f64]) -> Result<(f64, Arc<LowerLevelSolution>)> {
        let sol = self.solution(beta)?;
        Ok((sol.phi, sol))
    }

    pub fn gradient(&self, beta: &[f64]) -> Result<Vec<f64>> {
        let sol = self.solution(beta)?;
        Ok(phi_gradient(self.problem, &sol))
    }

    /// Evaluates many parameters at once. Misses are solved in parallel,
    /// warm-started from the cache as it stood before the call, and inserted
    /// in key order, so the outcome does not depend on the thread count.
    pub fn evaluate_batch(&self, betas: &[Vec<f64>]) -> Result<Vec<Arc<LowerLevelSolution>>> {
        let mut missing: BTreeMap<String, (Vec<f64>, Option<Arc<LowerLevelSolution>>)> =
            BTreeMap::new();
        {
            let cache = self.cache.read().unwrap();
            for beta in betas {
                let key = cache_key(beta);
                if !cache.contains_key(&key) && !missing.contains_key(&key) {
                    let warm = Self::nearest(&cache, beta);
                    missing.insert(key, (beta.clone(), warm));
                }
            }
        }
        let solved: Vec<(String, LowerLevelSolution)> = missing
            .into_par_iter()
            .map(|(key, (beta, warm))| self.solve_with(&beta, warm.as_deref()).map(|s| (key, s)))
            .collect::<Result<_>>()?;
        {
            let mut cache = self.cache.write().unwrap();
            for (key, sol) in solved {
                cache.entry(key).or_insert_with(|| Arc::new(sol));
            }
        }
        let cache = self.cache.read().unwrap();
        Ok(betas
            .iter()
            .map(|b| Arc::clone(&cache[&cache_key(b)]))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::test_support::problem;
    use crate::problem::Objective;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_data_gives_zero_solution() {
        let mut p = problem(6, Objective::F2);
        let n = p.grid().len();
        p.set_desired_states(vec![vec![0.0; n]; 2]).unwrap();
        for beta in [[0.2, 0.9], [1.0, 0.1]] {
            let sol = solve_lower_level(&p, &beta, None).unwrap();
            assert_eq!(sol.phi, 0.0);
            assert!(sol.u.iter().chain(&sol.y).all(|v| *v == 0.0));
        }
    }

    #[test]
    fn paper_parameter_has_active_bounds() {
        let p = problem(16, Objective::F1);
        let sol = solve_lower_level(&p, &[0.6, 0.3], None).unwrap();
        assert!(sol.phi > 0.0);
        assert!(sol.active_set_size(&p) > 0);
        assert!(kkt_report(&p, &sol).unwrap().max() <= 1e-9);
    }

    #[test]
    fn rejects_nonpositive_parameter() {
        let p = problem(4, Objective::F2);
        assert!(matches!(
            solve_lower_level(&p, &[0.0, 0.5], None),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            solve_lower_level(&p, &[0.5], None),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn iteration_limit_is_reported() {
        let mut p = problem(8, Objective::F2);
        p.settings_mut().lower_level_max_iters = 0;
        let err = solve_lower_level(&p, &[0.6, 0.3], None).unwrap_err();
        assert!(matches!(err, Error::NotConverged { iterations: 0, .. }));
    }

    #[test]
    fn cache_hit_skips_newton() {
        let p = problem(8, Objective::F2);
        let vf = ValueFunction::new(&p);
        let (phi1, _) = vf.value(&[0.5, 0.5]).unwrap();
        let iters = vf.newton_iters();
        let solves = vf.solves();
        let (phi2, _) = vf.value(&[0.5, 0.5]).unwrap();
        assert_eq!(phi1, phi2);
        assert_eq!(vf.newton_iters(), iters);
        assert_eq!(vf.solves(), solves);
        // 12 significant digits
        let (phi3, _) = vf.value(&[0.5 + 1e-14, 0.5]).unwrap();
        assert_eq!(phi3, phi1);
        assert_eq!(vf.solves(), solves);
    }

    #[test]
    fn batch_is_order_independent() {
        let p = problem(8, Objective::F2);
        let betas: Vec<Vec<f64>> = vec![
            vec![0.3, 0.4],
            vec![0.9, 0.2],
            vec![0.3, 0.4],
            vec![0.55, 0.55],
        ];
        let a = ValueFunction::new(&p);
        let ra = a.evaluate_batch(&betas).unwrap();
        let b = ValueFunction::new(&p);
        let mut rev = betas.clone();
        rev.reverse();
        let rb = b.evaluate_batch(&rev).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in ra.iter().zip(rb.iter().rev()) {
            assert_eq!(x.phi.to_bits(), y.phi.to_bits());
        }
    }

    #[test]
    fn value_function_is_convex_and_nonnegative() {
        let p = problem(8, Objective::F2);
        let vf = ValueFunction::new(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..60 {
            let b1: Vec<f64> = (0..2).map(|_| rng.gen_range(0.1..1.0)).collect();
            let b2: Vec<f64> = (0..2).map(|_| rng.gen_range(0.1..1.0)).collect();
            let lam = rng.gen_range(0.0..1.0);
            let bm: Vec<f64> = b1
                .iter()
                .zip(&b2)
                .map(|(a, b)| lam * a + (1.0 - lam) * b)
                .collect();
            let (f1, _) = vf.value(&b1).unwrap();
            let (f2, _) = vf.value(&b2).unwrap();
            let (fm, _) = vf.value(&bm).unwrap();
            assert!(f1 >= 0.0);
            assert!(fm <= lam * f1 + (1.0 - lam) * f2 + 1e-10);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = problem(8, Objective::F2);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let beta: Vec<f64> = (0..2).map(|_| rng.gen_range(0.15..0.95)).collect();
            let sol = solve_lower_level(&p, &beta, None).unwrap();
            let g = phi_gradient(&p, &sol);
            assert!(g.iter().all(|v| *v <= 0.0));
            let eps = 1e-5;
            for i in 0..2 {
                let mut bp = beta.clone();
                let mut bm = beta.clone();
                bp[i] += eps;
                bm[i] -= eps;
                let fp = solve_lower_level(&p, &bp, Some(&sol)).unwrap().phi;
                let fm = solve_lower_level(&p, &bm, Some(&sol)).unwrap().phi;
                let fd = (fp - fm) / (2.0 * eps);
                assert!(
                    (fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1e-8),
                    "{fd} vs {}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn gradient_vanishes_when_desired_states_are_reached() {
        let mut p = problem(8, Objective::F2);
        let beta = [0.4, 0.7];
        let sol = solve_lower_level(&p, &beta, None).unwrap();
        // with y_d,i = ψ^y(β) and u_a = 0 the optimal control is zero... unless
        // zero control changes the state; use the state of the zero control
        let n = p.grid().len();
        p.set_desired_states(vec![vec![0.0; n]; 2]).unwrap();
        let sol0 = solve_lower_level(&p, &beta, Some(&sol)).unwrap();
        p.set_desired_states(vec![sol0.y.clone(), sol0.y.clone()])
            .unwrap();
        let sol1 = solve_lower_level(&p, &beta, None).unwrap();
        assert!(phi_gradient(&p, &sol1).iter().all(|g| g.abs() < 1e-20));
    }

    #[test]
    fn quadratic_growth() {
        let p = problem(8, Objective::F2);
        let beta = [0.6, 0.3];
        let sol = solve_lower_level(&p, &beta, None).unwrap();
        let n = p.grid().len();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let u: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
            let y = p.ops().control_to_state(&u);
            let f = p.eval_f(&beta, &y, &u).unwrap();
            let gap = 0.5 * p.sigma_l() * p.grid().dist_sq(&u, &sol.u);
            assert!(f >= sol.phi + gap - 1e-10);
        }
    }
}
