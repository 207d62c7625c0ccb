//! Penalty subproblems on one simplex and the search for the penalty
//! parameter.
//!
//! For a simplex `T = {Kβ ≤ b}` with affine interpolant `ξ_T` and `γ ≥ 0`
//! the subproblem is
//!
//! ```text
//! min  F(β, y, u) + γ (f(β, y, u) - ξ_T(β))
//! s.t. A y = u,  u_a ≤ u ≤ u_b,  Kβ ≤ b.
//! ```
//!
//! Its optimality system `W = 0` has five blocks:
//!
//! ```text
//! (1) h'_β + Kᵀz
//! (2) h'_y + A p
//! (3) u - clip((p + σ_u u_m)/σ̂, u_a, u_b),   σ̂ = σ_u + γσ_l
//! (4) max(Kβ - b, -z)
//! (5) A y - u
//! ```
//!
//! and is solved by a damped semismooth Newton method. Each Newton system is
//! reduced to the banded state/adjoint system of [`crate::reduced`] plus a
//! dense system of size `2n + 1` in `(dβ, dz)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{Affine, HalfSpaces, Simplex};
use crate::problem::{HEval, Problem};
use crate::reduced::ReducedSystem;

/// Unknowns of the penalty subproblem.
#[derive(Debug, Clone, PartialEq)]
pub struct KktIterate {
    pub beta: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    /// Multiplier of `Kβ ≤ b`, one entry per facet.
    pub z: Vec<f64>,
    /// Adjoint state.
    pub p: Vec<f64>,
}

/// Branch selectors of the nonsmooth residual rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSets {
    /// Facets with `(Kβ - b)_i ≥ -z_i`; the complement is the second set.
    pub facets: Vec<bool>,
    /// Nodes where the projection in row (3) is inactive, bounds included.
    pub control: Vec<bool>,
}

/// The five residual blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub beta: Vec<f64>,
    pub adjoint: Vec<f64>,
    pub projection: Vec<f64>,
    pub facets: Vec<f64>,
    pub state: Vec<f64>,
}

impl Residual {
    pub fn norm_inf(&self) -> f64 {
        self.beta
            .iter()
            .chain(&self.adjoint)
            .chain(&self.projection)
            .chain(&self.facets)
            .chain(&self.state)
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    /// Euclidean norm on the parameter blocks, discrete L² on grid blocks.
    pub fn merit(&self, weight: f64) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let finite = sq(&self.beta) + sq(&self.facets);
        let grid = sq(&self.adjoint) + sq(&self.projection) + sq(&self.state);
        (finite + weight * grid).sqrt()
    }

    fn sub(&self, other: &Residual) -> Residual {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect();
        Residual {
            beta: d(&self.beta, &other.beta),
            adjoint: d(&self.adjoint, &other.adjoint),
            projection: d(&self.projection, &other.projection),
            facets: d(&self.facets, &other.facets),
            state: d(&self.state, &other.state),
        }
    }
}

/// Newton direction, same layout as [`KktIterate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub beta: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub z: Vec<f64>,
    pub p: Vec<f64>,
}

impl Step {
    pub fn norm_inf(&self) -> f64 {
        self.beta
            .iter()
            .chain(&self.y)
            .chain(&self.u)
            .chain(&self.z)
            .chain(&self.p)
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

impl KktIterate {
    /// `self + t·step`.
    pub fn advanced(&self, t: f64, step: &Step) -> Self {
        let f = |x: &[f64], d: &[f64]| x.iter().zip(d).map(|(a, b)| a + t * b).collect();
        Self {
            beta: f(&self.beta, &step.beta),
            y: f(&self.y, &step.y),
            u: f(&self.u, &step.u),
            z: f(&self.z, &step.z),
            p: f(&self.p, &step.p),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SubproblemResult {
    pub iterate: KktIterate,
    pub gamma: f64,
    /// `F + γ·slack`, recomposed from the stored parts.
    pub penalized_value: f64,
    /// Upper-level objective `F` at the iterate.
    pub upper_value: f64,
    /// Lower-level objective `f` at the iterate.
    pub lower_value: f64,
    /// `ξ_T(β)`.
    pub xi_value: f64,
    /// `f - ξ_T(β)`.
    pub slack: f64,
    pub newton_iters: usize,
    pub damping_events: usize,
    /// `‖W‖_∞` before every Newton step and at the end.
    pub residual_history: Vec<f64>,
}

impl SubproblemResult {
    pub fn residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(f64::NAN)
    }
}

/// Outcome of the penalty-parameter search.
#[derive(Debug, Clone)]
pub struct GammaSearch {
    pub gamma: f64,
    pub result: SubproblemResult,
    /// Subproblem solves spent in the search.
    pub evaluations: usize,
    /// Newton iterations summed over all evaluations.
    pub newton_iters: usize,
    /// Set when no `γ ≤ γ_max` bracketed a sign change of the slack, or the
    /// evaluation budget ran out before the tolerance was met.
    pub flagged: bool,
}

/// Levels of `γ/2` continuation tried after a failed Newton solve.
const CONTINUATION_DEPTH: usize = 6;

/// The penalty subproblem on one simplex.
pub struct Subproblem<'a> {
    problem: &'a Problem,
    halfspaces: &'a HalfSpaces,
    xi: &'a Affine,
    centroid: Vec<f64>,
}

impl<'a> Subproblem<'a> {
    pub fn new(problem: &'a Problem, simplex: &'a Simplex) -> Result<Self> {
        let xi = simplex.xi.as_ref().ok_or_else(|| {
            Error::Usage(format!("simplex {} has no interpolant yet", simplex.id))
        })?;
        Self::from_parts(problem, &simplex.halfspaces, xi, simplex.centroid())
    }

    /// Subproblem on `{Kβ ≤ b}` with interpolant `xi`; `centroid` is the
    /// parameter used by cold starts.
    pub fn from_parts(
        problem: &'a Problem,
        halfspaces: &'a HalfSpaces,
        xi: &'a Affine,
        centroid: Vec<f64>,
    ) -> Result<Self> {
        let n = problem.dim();
        if halfspaces.k.ncols() != n || halfspaces.k.nrows() != n + 1 || xi.slope.len() != n {
            return Err(Error::Usage(format!(
                "subproblem data does not match parameter dimension {n}"
            )));
        }
        Ok(Self {
            problem,
            halfspaces,
            xi,
            centroid,
        })
    }

    pub fn problem(&self) -> &Problem {
        self.problem
    }

    pub fn xi(&self) -> &Affine {
        self.xi
    }

    fn sigma_hat(&self, gamma: f64) -> f64 {
        self.problem.sigma_u() + gamma * self.problem.sigma_l()
    }

    /// Starting point at the centroid: `u` from the projection formula with
    /// `p = 0`, then `y = S u` and the adjoint from row (2).
    pub fn cold_start(&self, gamma: f64) -> Result<KktIterate> {
        let pr = self.problem;
        let n = pr.grid().len();
        let sh = self.sigma_hat(gamma);
        let beta = self.centroid.clone();
        let u: Vec<f64> = (0..n)
            .map(|k| pr.clip_control(pr.sigma_u() * pr.u_target()[k] / sh, k))
            .collect();
        let y = pr.ops().control_to_state(&u);
        let hev = pr.eval_h(&beta, &y, gamma, self.xi)?;
        let rhs: Vec<f64> = hev.grad_y.iter().map(|g| -g).collect();
        let p = pr.ops().adjoint_state(&rhs);
        Ok(KktIterate {
            beta,
            y,
            u,
            z: vec![0.0; self.halfspaces.b.len()],
            p,
        })
    }

    fn projection_argument(&self, it: &KktIterate, gamma: f64, k: usize) -> f64 {
        let pr = self.problem;
        (it.p[k] + pr.sigma_u() * pr.u_target()[k]) / self.sigma_hat(gamma)
    }

    pub fn active_sets(&self, it: &KktIterate, gamma: f64) -> ActiveSets {
        let pr = self.problem;
        let kb = self.halfspaces.residual(&it.beta);
        ActiveSets {
            facets: (0..kb.len()).map(|i| kb[i] >= -it.z[i]).collect(),
            control: (0..it.u.len())
                .map(|k| {
                    let v = self.projection_argument(it, gamma, k);
                    v >= pr.u_lower()[k] && v <= pr.u_upper()[k]
                })
                .collect(),
        }
    }

    fn check(&self, it: &KktIterate, gamma: f64) -> Result<()> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::Domain(format!(
                "penalty parameter must be >= 0, got {gamma}"
            )));
        }
        let n = self.problem.dim();
        let len = self.problem.grid().len();
        if it.beta.len() != n
            || it.z.len() != n + 1
            || [&it.y, &it.u, &it.p].iter().any(|v| v.len() != len)
        {
            return Err(Error::Usage(
                "iterate does not match the problem size".into(),
            ));
        }
        Ok(())
    }

    fn linearize(&self, it: &KktIterate, gamma: f64) -> Result<(Residual, HEval)> {
        self.check(it, gamma)?;
        let pr = self.problem;
        let hev = pr.eval_h(&it.beta, &it.y, gamma, self.xi)?;
        let k = &self.halfspaces.k;
        let kb = self.halfspaces.residual(&it.beta);
        let n = it.beta.len();
        let beta = (0..n)
            .map(|i| hev.grad_beta[i] + (0..=n).map(|l| k[(l, i)] * it.z[l]).sum::<f64>())
            .collect();
        let ap = pr.ops().a_times(&it.p);
        let ay = pr.ops().a_times(&it.y);
        let len = it.y.len();
        let residual = Residual {
            beta,
            adjoint: (0..len).map(|j| hev.grad_y[j] + ap[j]).collect(),
            projection: (0..len)
                .map(|j| it.u[j] - pr.clip_control(self.projection_argument(it, gamma, j), j))
                .collect(),
            facets: (0..=n).map(|l| kb[l].max(-it.z[l])).collect(),
            state: (0..len).map(|j| ay[j] - it.u[j]).collect(),
        };
        Ok((residual, hev))
    }

    /// `W` at the iterate.
    pub fn residual(&self, it: &KktIterate, gamma: f64) -> Result<Residual> {
        self.linearize(it, gamma).map(|(r, _)| r)
    }

    /// Penalized objective `F + γ(f - ξ_T)` at the iterate.
    pub fn penalized_value(&self, it: &KktIterate, gamma: f64) -> Result<f64> {
        let hev = self.problem.eval_h(&it.beta, &it.y, gamma, self.xi)?;
        Ok(hev.value + self.problem.control_part(gamma, &it.u))
    }

    /// Solves `W'(x) s = -W(x)` with the active sets of the iterate.
    pub fn newton_step(&self, it: &KktIterate, gamma: f64) -> Result<Step> {
        let (res, hev) = self.linearize(it, gamma)?;
        self.step_from(it, gamma, &res, &hev)
    }

    fn step_from(&self, it: &KktIterate, gamma: f64, res: &Residual, hev: &HEval) -> Result<Step> {
        let pr = self.problem;
        let n = it.beta.len();
        let w = pr.grid().weight();
        let sets = self.active_sets(it, gamma);
        let inv_sh = 1.0 / self.sigma_hat(gamma);
        let d: Vec<f64> = sets
            .control
            .iter()
            .map(|a| if *a { inv_sh } else { 0.0 })
            .collect();
        let sys = ReducedSystem::new(pr.ops(), hev.hess_yy, d)?;

        let base = sys.solve(&res.adjoint, Some(&res.projection), Some(&res.state));
        let responses: Vec<_> = hev
            .hess_by
            .iter()
            .map(|g| sys.solve(g, None, None))
            .collect();
        let dot = |a: &[f64], b: &[f64]| w * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

        let k = &self.halfspaces.k;
        let size = 2 * n + 1;
        let mut m = DMatrix::zeros(size, size);
        let mut rhs = DVector::zeros(size);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = hev.hess_bb[(i, j)] + dot(&hev.hess_by[i], &responses[j].dy);
            }
            for l in 0..=n {
                m[(i, n + l)] = k[(l, i)];
            }
            rhs[i] = -res.beta[i] - dot(&hev.hess_by[i], &base.dy);
        }
        for l in 0..=n {
            if sets.facets[l] {
                for j in 0..n {
                    m[(n + l, j)] = k[(l, j)];
                }
                rhs[n + l] = -res.facets[l];
            } else {
                m[(n + l, n + l)] = 1.0;
                rhs[n + l] = res.facets[l];
            }
        }
        let sol = m
            .lu()
            .solve(&rhs)
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or_else(|| {
                Error::SingularStep(format!("parameter block at beta = {:?}", it.beta))
            })?;

        let dbeta: Vec<f64> = sol.rows(0, n).iter().copied().collect();
        let combine = |field: fn(&crate::reduced::Correction) -> &Vec<f64>, base: &[f64]| {
            let mut out = base.to_vec();
            for (db, resp) in dbeta.iter().zip(&responses) {
                for (o, r) in out.iter_mut().zip(field(resp)) {
                    *o += db * r;
                }
            }
            out
        };
        Ok(Step {
            y: combine(|c| &c.dy, &base.dy),
            u: combine(|c| &c.du, &base.du),
            p: combine(|c| &c.dp, &base.dp),
            z: sol.rows(n, n + 1).iter().copied().collect(),
            beta: dbeta,
        })
    }

    /// Largest `t ≤ 1` keeping `β + t·dβ ≥ ½·(box lower bound)`.
    fn step_cap(&self, it: &KktIterate, step: &Step) -> f64 {
        let lo = self.problem.q_lower();
        let mut t: f64 = 1.0;
        for i in 0..it.beta.len() {
            if step.beta[i] < 0.0 {
                let room = it.beta[i] - 0.5 * lo[i];
                t = t.min((room / -step.beta[i]).max(0.0));
            }
        }
        t
    }

    fn clip_to_box(&self, beta: &mut [f64]) {
        let (lo, hi) = (self.problem.q_lower(), self.problem.q_upper());
        for i in 0..beta.len() {
            beta[i] = beta[i].clamp(lo[i], hi[i]);
        }
    }

    fn newton(&self, gamma: f64, start: KktIterate) -> Result<SubproblemResult> {
        let pr = self.problem;
        let settings = pr.settings();
        let weight = pr.grid().weight();
        let mut it = start;
        let (mut res, mut hev) = self.linearize(&it, gamma)?;
        let mut history = Vec::new();
        let mut damping_events = 0;
        let mut iters = 0;
        loop {
            let norm = res.norm_inf();
            history.push(norm);
            let penalized = hev.value + pr.control_part(gamma, &it.u);
            let tol = settings.newton_tol * (1.0 + penalized.abs());
            if norm <= tol {
                if iters == 0 {
                    // A start that already meets the tolerance gets one full
                    // step: the parameter block can be nearly flat, so a small
                    // residual alone does not pin down β.
                    let step = self.step_from(&it, gamma, &res, &hev)?;
                    let trial = it.advanced(self.step_cap(&it, &step), &step);
                    if let Ok(r) = self.residual(&trial, gamma) {
                        if r.norm_inf() <= tol {
                            iters = 1;
                            history.push(r.norm_inf());
                            it = trial;
                        }
                    }
                }
                break;
            }
            if iters >= settings.newton_max_iters || !norm.is_finite() {
                return Err(Error::NotConverged {
                    context: format!("penalty subproblem at gamma = {gamma:e}"),
                    iterations: iters,
                    residual: norm,
                });
            }
            iters += 1;
            let step = self.step_from(&it, gamma, &res, &hev)?;
            let t0 = self.step_cap(&it, &step);
            let merit0 = res.merit(weight);
            let mut accepted = None;
            for j in 0..=settings.max_backtracks {
                let scale = 0.5f64.powi(j as i32);
                let trial = it.advanced(t0 * scale, &step);
                if let Ok((r, h)) = self.linearize(&trial, gamma) {
                    if r.merit(weight) <= (1.0 - 0.25 * scale) * merit0 {
                        accepted = Some((trial, r, h));
                        break;
                    }
                }
            }
            let (next, r, h) = match accepted {
                Some(a) => a,
                None => {
                    damping_events += 1;
                    let mut trial = it.advanced(1.0, &step);
                    self.clip_to_box(&mut trial.beta);
                    let (r, h) = self.linearize(&trial, gamma)?;
                    (trial, r, h)
                }
            };
            it = next;
            res = r;
            hev = h;
        }
        self.finish(it, gamma, iters, damping_events, history)
    }

    fn finish(
        &self,
        iterate: KktIterate,
        gamma: f64,
        newton_iters: usize,
        damping_events: usize,
        residual_history: Vec<f64>,
    ) -> Result<SubproblemResult> {
        let pr = self.problem;
        let upper_value = pr.eval_upper(&iterate.beta, &iterate.y, &iterate.u)?;
        let lower_value = pr.eval_f(&iterate.beta, &iterate.y, &iterate.u)?;
        let xi_value = self.xi.eval(&iterate.beta);
        let slack = lower_value - xi_value;
        Ok(SubproblemResult {
            penalized_value: upper_value + gamma * slack,
            iterate,
            gamma,
            upper_value,
            lower_value,
            xi_value,
            slack,
            newton_iters,
            damping_events,
            residual_history,
        })
    }

    /// Solves the subproblem for fixed `γ`. A failed Newton run is retried
    /// through the intermediate parameter `γ/2`; a failure at `γ = 0` from a
    /// warm start is retried from the cold start.
    pub fn solve(&self, gamma: f64, warm: Option<&KktIterate>) -> Result<SubproblemResult> {
        let start = match warm {
            Some(w) => w.clone(),
            None => self.cold_start(gamma)?,
        };
        match self.solve_continued(gamma, start, 0) {
            Err(e) if warm.is_some() && recoverable(&e) => {
                let cold = self.cold_start(gamma)?;
                self.solve_continued(gamma, cold, 0)
            }
            other => other,
        }
    }

    fn solve_continued(
        &self,
        gamma: f64,
        start: KktIterate,
        depth: usize,
    ) -> Result<SubproblemResult> {
        match self.newton(gamma, start.clone()) {
            Err(e) if recoverable(&e) && gamma > 0.0 && depth < CONTINUATION_DEPTH => {
                let half = self.solve_continued(0.5 * gamma, start, depth + 1)?;
                let mut r = self.newton(gamma, half.iterate.clone())?;
                r.newton_iters += half.newton_iters;
                r.damping_events += half.damping_events;
                Ok(r)
            }
            other => other,
        }
    }

    fn gamma_converged(&self, r: &SubproblemResult, tol: f64) -> bool {
        r.slack.abs() * r.gamma.max(1.0) <= tol * r.xi_value.abs().max(1.0)
    }

    /// Finds `γ_T`: either `γ = 0` with nonpositive slack, or a root of the
    /// nonincreasing map `γ ↦ slack(γ)`, bracketed by growing `γ` tenfold and
    /// refined by Illinois regula falsi in `1/γ`.
    pub fn find_gamma(&self, gamma_init: f64, warm: Option<&KktIterate>) -> Result<GammaSearch> {
        let settings = self.problem.settings();
        let tol = settings.gamma_tol;
        let mut search = Search {
            sub: self,
            evaluations: 0,
            newton_iters: 0,
            warm: warm.cloned(),
            best: None,
        };
        let gamma0 = if gamma_init.is_finite() && gamma_init > 0.0 {
            gamma_init.min(settings.gamma_max)
        } else {
            0.0
        };

        let first = search.eval(gamma0)?;
        if first.slack <= 0.0 && gamma0 == 0.0 || self.gamma_converged(&first, tol) {
            return Ok(search.done(first, false));
        }

        // bracket: slack(lo) > 0 ≥ slack(hi)
        let (mut lo, mut hi) = if first.slack > 0.0 {
            let mut lo = first;
            let mut g = if gamma0 > 0.0 {
                gamma0
            } else {
                1.0 / settings.gamma_growth
            };
            loop {
                g *= settings.gamma_growth;
                if g > settings.gamma_max || search.evaluations >= settings.gamma_max_evals {
                    let best = search.best.take().expect("at least one evaluation");
                    return Ok(search.done(best, true));
                }
                let r = search.eval(g)?;
                if self.gamma_converged(&r, tol) {
                    return Ok(search.done(r, false));
                }
                if r.slack <= 0.0 {
                    break (lo, r);
                }
                lo = r;
            }
        } else {
            let hi = first;
            let zero = search.eval(0.0)?;
            if zero.slack <= 0.0 || self.gamma_converged(&zero, tol) {
                return Ok(search.done(zero, false));
            }
            (zero, hi)
        };

        // Illinois: the retained endpoint's value is halved when the same
        // side is replaced twice in a row
        let (mut f_lo, mut f_hi) = (lo.slack, hi.slack);
        let mut last = 0i8;
        while search.evaluations < settings.gamma_max_evals {
            if hi.gamma - lo.gamma <= 1e-15 * hi.gamma {
                // the root is resolved to machine precision
                let r = if lo.slack.abs() <= hi.slack.abs() {
                    lo
                } else {
                    hi
                };
                return Ok(search.done(r, false));
            }
            let mut g = if lo.gamma > 0.0 {
                let (a, b) = (lo.gamma.recip(), hi.gamma.recip());
                ((a * f_hi - b * f_lo) / (f_hi - f_lo)).recip()
            } else {
                (lo.gamma * f_hi - hi.gamma * f_lo) / (f_hi - f_lo)
            };
            if !(g > lo.gamma && g < hi.gamma) {
                g = 0.5 * (lo.gamma + hi.gamma);
            }
            let r = search.eval(g)?;
            if self.gamma_converged(&r, tol) {
                return Ok(search.done(r, false));
            }
            if r.slack > 0.0 {
                f_lo = r.slack;
                lo = r;
                if last == 1 {
                    f_hi *= 0.5;
                }
                last = 1;
            } else {
                f_hi = r.slack;
                hi = r;
                if last == -1 {
                    f_lo *= 0.5;
                }
                last = -1;
            }
        }
        let best = search.best.take().expect("at least one evaluation");
        Ok(search.done(best, true))
    }
}

fn recoverable(e: &Error) -> bool {
    matches!(e, Error::NotConverged { .. } | Error::SingularStep(_))
}

struct Search<'s, 'a> {
    sub: &'s Subproblem<'a>,
    evaluations: usize,
    newton_iters: usize,
    warm: Option<KktIterate>,
    best: Option<SubproblemResult>,
}

impl Search<'_, '_> {
    fn eval(&mut self, gamma: f64) -> Result<SubproblemResult> {
        let r = self.sub.solve(gamma, self.warm.as_ref())?;
        self.evaluations += 1;
        self.newton_iters += r.newton_iters;
        self.warm = Some(r.iterate.clone());
        let score = |x: &SubproblemResult| x.slack.abs() * x.gamma.max(1.0);
        if self.best.as_ref().is_none_or(|b| score(&r) < score(b)) {
            self.best = Some(r.clone());
        }
        Ok(r)
    }

    fn done(self, result: SubproblemResult, flagged: bool) -> GammaSearch {
        GammaSearch {
            gamma: result.gamma,
            result,
            evaluations: self.evaluations,
            newton_iters: self.newton_iters,
            flagged,
        }
    }
}

/// `W(x + εd) - W(x)`, for derivative checks.
pub fn residual_difference(
    sub: &Subproblem<'_>,
    it: &KktIterate,
    gamma: f64,
    eps: f64,
    direction: &Step,
) -> Result<Residual> {
    let r0 = sub.residual(it, gamma)?;
    let r1 = sub.residual(&it.advanced(eps, direction), gamma)?;
    Ok(r1.sub(&r0))
}
