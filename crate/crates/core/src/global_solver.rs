//! Branch-and-bound driver over a simplicial subdivision of the parameter
//! box.
//!
//! Every outer iteration evaluates the value function at new vertices,
//! solves the penalty subproblems of all unsolved simplices (their values
//! are lower bounds on the simplex), updates the upper bound from exactly
//! feasible points `(β, Ψ(β))`, dismisses simplices whose lower bound
//! exceeds the upper bound and refines a selection of the rest.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_xi, initial_triangulation, refine, Simplex, Status};
use crate::lower_level::{solve_lower_level, LowerLevelSolution, ValueFunction};
use crate::penalty_newton::{GammaSearch, KktIterate, Subproblem};
use crate::problem::Problem;

/// Tolerances and limits of the solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Absolute gap `UB - LB` at which the run stops.
    pub gap_tol: f64,
    /// Stop once this many subproblems have been solved.
    pub element_limit: usize,
    /// Tolerance of the test `f(β_k, y_k, u_k) ≤ φ(β_k)` on the best simplex.
    pub exact_feasibility_tol: f64,
    /// Simplices are dismissed when their bound exceeds `UB + prune_guard`.
    pub prune_guard: f64,
    /// Fraction of live simplices refined from the best end.
    pub refine_best_fraction: f64,
    /// Fraction of live simplices refined from the worst end.
    pub refine_worst_fraction: f64,
    /// Relative tolerance on `‖W‖_∞` for penalty subproblems.
    pub newton_tol: f64,
    pub newton_max_iters: usize,
    pub max_backtracks: usize,
    /// Absolute tolerance on the lower-level residual.
    pub lower_level_tol: f64,
    pub lower_level_max_iters: usize,
    /// Tolerance of the penalty-parameter search.
    pub gamma_tol: f64,
    pub gamma_growth: f64,
    pub gamma_max: f64,
    pub gamma_max_evals: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            gap_tol: 1e-9,
            element_limit: 300_000,
            exact_feasibility_tol: 1e-10,
            prune_guard: 1e-12,
            refine_best_fraction: 0.15,
            refine_worst_fraction: 0.05,
            newton_tol: 1e-9,
            newton_max_iters: 100,
            max_backtracks: 20,
            lower_level_tol: 1e-10,
            lower_level_max_iters: 50,
            gamma_tol: 1e-8,
            gamma_growth: 10.0,
            gamma_max: 1e12,
            gamma_max_evals: 60,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gap_tol", self.gap_tol),
            ("exact_feasibility_tol", self.exact_feasibility_tol),
            ("newton_tol", self.newton_tol),
            ("lower_level_tol", self.lower_level_tol),
            ("gamma_tol", self.gamma_tol),
            ("gamma_max", self.gamma_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.prune_guard >= 0.0 && self.prune_guard.is_finite()) {
            return Err(Error::Config("prune_guard must be nonnegative".into()));
        }
        if !(self.gamma_growth > 1.0 && self.gamma_growth.is_finite()) {
            return Err(Error::Config("gamma_growth must exceed 1".into()));
        }
        for (name, v) in [
            ("refine_best_fraction", self.refine_best_fraction),
            ("refine_worst_fraction", self.refine_worst_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.element_limit == 0 || self.gamma_max_evals == 0 {
            return Err(Error::Config(
                "element_limit and gamma_max_evals must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Continue,
    GapReached,
    ElementLimit,
    ExactFeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub subproblems: usize,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub gap: f64,
}

/// Telemetry of one simplex solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubproblemRecord {
    pub simplex: usize,
    pub depth: u32,
    pub gamma: f64,
    pub evaluations: usize,
    pub newton_iters: usize,
    /// Newton iterations of the final solve at `γ_T`.
    pub final_newton_iters: usize,
    pub slack: f64,
    pub penalized_value: f64,
    pub flagged: bool,
    /// Residual history of the final solve at `γ_T`.
    pub residual_history: Vec<f64>,
}

/// Best exactly feasible point found so far.
#[derive(Debug, Clone)]
pub struct Incumbent {
    pub beta: Vec<f64>,
    pub value: f64,
    pub solution: Arc<LowerLevelSolution>,
}

/// Per-simplex data kept while the simplex is live.
#[derive(Debug, Clone)]
struct Solved {
    gamma: f64,
    iterate: Arc<KktIterate>,
    lower_value: f64,
}

pub struct SolverState {
    /// All simplices ever created, indexed by id.
    pub pool: Vec<Simplex>,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub incumbent: Option<Incumbent>,
    pub iteration: usize,
    pub subproblems_solved: usize,
    pub history: Vec<HistoryEntry>,
    pub records: Vec<SubproblemRecord>,
    /// Set when the best simplex's solution is lower-level optimal.
    pub exact_feasible: bool,
    solved: HashMap<usize, Solved>,
}

impl SolverState {
    fn new(pool: Vec<Simplex>) -> Self {
        Self {
            pool,
            lower_bound: f64::NEG_INFINITY,
            upper_bound: f64::INFINITY,
            incumbent: None,
            iteration: 0,
            subproblems_solved: 0,
            history: Vec::new(),
            records: Vec::new(),
            exact_feasible: false,
            solved: HashMap::new(),
        }
    }

    /// Ids of active and incumbent simplices, ascending.
    pub fn live(&self) -> Vec<usize> {
        self.pool
            .iter()
            .filter(|s| s.status.is_live())
            .map(|s| s.id)
            .collect()
    }

    pub fn gap(&self) -> f64 {
        self.upper_bound - self.lower_bound
    }

    fn offer(&mut self, beta: &[f64], solution: &Arc<LowerLevelSolution>) {
        let value = solution.upper_value;
        if value < self.upper_bound {
            self.upper_bound = value;
            self.incumbent = Some(Incumbent {
                beta: beta.to_vec(),
                value,
                solution: Arc::clone(solution),
            });
        }
    }

    /// Writes one row per simplex that is not refined:
    /// `id,depth,status,lb,v0x,v0y,...`.
    pub fn write_triangulation<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.pool.first().map_or(0, |s| s.dim());
        let axes: Vec<String> = (0..n)
            .map(|i| match (n, i) {
                (..=3, 0) => "x".to_string(),
                (..=3, 1) => "y".to_string(),
                (..=3, 2) => "z".to_string(),
                _ => format!("c{i}"),
            })
            .collect();
        let mut header = vec![
            "id".to_string(),
            "depth".into(),
            "status".into(),
            "lb".into(),
        ];
        for j in 0..=n {
            for a in &axes {
                header.push(format!("v{j}{a}"));
            }
        }
        writeln!(out, "{}", header.join(","))?;
        for s in self.pool.iter().filter(|s| s.status != Status::Refined) {
            write!(
                out,
                "{},{},{},{:.16e}",
                s.id,
                s.depth,
                s.status.as_str(),
                s.lower_bound
            )?;
            for v in &s.vertices {
                for c in v {
                    write!(out, ",{c:.16e}")?;
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Writes `iter,subproblems,lb,ub,gap` rows.
pub fn write_bounds<W: Write>(history: &[HistoryEntry], mut out: W) -> Result<()> {
    writeln!(out, "iter,subproblems,lb,ub,gap")?;
    for h in history {
        writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e}",
            h.iteration, h.subproblems, h.lower_bound, h.upper_bound, h.gap
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct GlobalResult {
    pub beta_opt: Vec<f64>,
    #[serde(rename = "F_opt")]
    pub f_opt: f64,
    pub gap: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub iterations: usize,
    pub subproblems: usize,
    pub termination: Termination,
    pub lower_level_solves: usize,
    /// Simplices whose penalty search ended without meeting its tolerance.
    pub flagged_simplices: Vec<usize>,
    pub history: Vec<HistoryEntry>,
    #[serde(skip)]
    pub records: Vec<SubproblemRecord>,
    #[serde(skip)]
    pub solution: Option<Arc<LowerLevelSolution>>,
}

/// Live simplices sorted by lower bound (ties by id): the best
/// `⌈best·N⌉` and the worst `⌈worst·N⌉`, without duplicates, ascending id.
pub fn select_for_refinement(state: &SolverState, settings: &SolverSettings) -> Vec<usize> {
    let mut live: Vec<(f64, usize)> = state
        .pool
        .iter()
        .filter(|s| s.status.is_live())
        .map(|s| (s.lower_bound, s.id))
        .collect();
    if live.is_empty() {
        return Vec::new();
    }
    live.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let count = live.len();
    let head = ((settings.refine_best_fraction * count as f64).ceil() as usize).clamp(1, count);
    let tail = ((settings.refine_worst_fraction * count as f64).ceil() as usize).min(count);
    let mut chosen: BTreeSet<usize> = live[..head].iter().map(|x| x.1).collect();
    chosen.extend(live[count - tail..].iter().map(|x| x.1));
    chosen.into_iter().collect()
}

pub fn check_termination(state: &SolverState, settings: &SolverSettings) -> Termination {
    if state.gap() <= settings.gap_tol {
        Termination::GapReached
    } else if state.exact_feasible {
        Termination::ExactFeasible
    } else if state.subproblems_solved >= settings.element_limit {
        Termination::ElementLimit
    } else {
        Termination::Continue
    }
}

pub fn run(problem: &Problem) -> Result<GlobalResult> {
    run_with(problem, |_| Ok(()))
}

/// Runs the solver; `observer` sees the state after every iteration.
pub fn run_with(
    problem: &Problem,
    mut observer: impl FnMut(&SolverState) -> Result<()>,
) -> Result<GlobalResult> {
    let settings = problem.settings().clone();
    let pool = initial_triangulation(problem.q_lower(), problem.q_upper())?;
    let mut state = SolverState::new(pool);
    let vf = ValueFunction::new(problem);
    let mut beta_k_solves = 0;

    let termination = loop {
        let pending: Vec<usize> = state
            .pool
            .iter()
            .filter(|s| s.status.is_live() && !state.solved.contains_key(&s.id))
            .map(|s| s.id)
            .collect();

        // (i) value function at the vertices of new simplices
        let mut vertices: Vec<Vec<f64>> = pending
            .iter()
            .flat_map(|id| state.pool[*id].vertices.iter().cloned())
            .collect();
        vertices.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        vertices.dedup();
        let sols = vf.evaluate_batch(&vertices)?;
        for (v, s) in vertices.iter().zip(&sols) {
            state.offer(v, s);
        }
        for id in &pending {
            let s = &mut state.pool[*id];
            let values: Vec<f64> = s
                .vertices
                .iter()
                .map(|v| vf.cached(v).map(|x| x.phi))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::Usage("vertex missing from the cache".into()))?;
            s.xi = Some(build_xi(&s.vertices, &values)?);
        }

        // (ii) penalty subproblems
        let parents: Vec<Option<Arc<KktIterate>>> = pending
            .iter()
            .map(|id| {
                let parent = state.pool[*id].parent?;
                state.solved.get(&parent).map(|s| Arc::clone(&s.iterate))
            })
            .collect();
        let outcomes: Vec<GammaSearch> = pending
            .par_iter()
            .zip(parents.par_iter())
            .map(|(id, warm)| solve_simplex(problem, &state.pool[*id], warm.as_deref()))
            .collect::<Result<_>>()?;
        state.subproblems_solved += pending.len();

        // exact feasibility of subproblem solutions, and upper-bound candidates
        let ll: Vec<LowerLevelSolution> = outcomes
            .par_iter()
            .map(|o| {
                let it = &o.result.iterate;
                let warm = LowerLevelSolution {
                    beta: it.beta.clone(),
                    y: Vec::new(),
                    u: it.u.clone(),
                    p: Vec::new(),
                    nu: Vec::new(),
                    phi: f64::NAN,
                    upper_value: f64::NAN,
                    newton_iters: 0,
                    residual: f64::NAN,
                };
                solve_lower_level(problem, &it.beta, Some(&warm))
            })
            .collect::<Result<_>>()?;
        beta_k_solves += ll.len();

        let mut beta_k_phi = HashMap::new();
        for ((id, o), sol) in pending.iter().zip(&outcomes).zip(ll) {
            let sol = Arc::new(sol);
            state.offer(&o.result.iterate.beta, &sol);
            beta_k_phi.insert(*id, sol.phi);
            let s = &mut state.pool[*id];
            s.lower_bound = o.result.penalized_value.max(s.lower_bound);
            state.records.push(SubproblemRecord {
                simplex: *id,
                depth: s.depth,
                gamma: o.gamma,
                evaluations: o.evaluations,
                newton_iters: o.newton_iters,
                final_newton_iters: o.result.newton_iters,
                slack: o.result.slack,
                penalized_value: o.result.penalized_value,
                flagged: o.flagged,
                residual_history: o.result.residual_history.clone(),
            });
            state.solved.insert(
                *id,
                Solved {
                    gamma: o.gamma,
                    iterate: Arc::new(o.result.iterate.clone()),
                    lower_value: o.result.lower_value,
                },
            );
        }

        // (iii) bounds, dismissal, incumbent simplex
        let ub = state.upper_bound;
        for s in state.pool.iter_mut().filter(|s| s.status.is_live()) {
            if s.lower_bound > ub + settings.prune_guard {
                s.status = Status::Dismissed;
                state.solved.remove(&s.id);
            } else {
                s.status = Status::Active;
            }
        }
        let best = state
            .pool
            .iter()
            .filter(|s| s.status.is_live())
            .min_by(|a, b| {
                a.lower_bound
                    .total_cmp(&b.lower_bound)
                    .then(a.id.cmp(&b.id))
            })
            .map(|s| (s.id, s.lower_bound));
        match best {
            Some((id, lb)) => {
                state.pool[id].status = Status::Incumbent;
                state.lower_bound = lb.min(state.upper_bound);
                if let (Some(solved), Some(phi)) = (state.solved.get(&id), beta_k_phi.get(&id)) {
                    state.exact_feasible =
                        solved.lower_value - phi <= settings.exact_feasibility_tol;
                }
            }
            None => state.lower_bound = state.upper_bound,
        }
        state.history.push(HistoryEntry {
            iteration: state.iteration,
            subproblems: state.subproblems_solved,
            lower_bound: state.lower_bound,
            upper_bound: state.upper_bound,
            gap: state.gap(),
        });
        observer(&state)?;

        let decision = check_termination(&state, &settings);
        if decision != Termination::Continue {
            break decision;
        }

        // (iv) refinement
        for id in select_for_refinement(&state, &settings) {
            let gamma = state.solved.get(&id).map_or(0.0, |s| s.gamma);
            let first = state.pool.len();
            let children = refine(&state.pool[id], first, gamma)?;
            state.pool[id].status = Status::Refined;
            state.pool.extend(children);
        }
        // parents stay in `solved` for one more iteration to warm-start children
        let refined: Vec<usize> = state
            .solved
            .keys()
            .copied()
            .filter(|id| state.pool[*id].status == Status::Refined)
            .collect();
        let keep: BTreeSet<usize> = state
            .pool
            .iter()
            .filter(|s| s.status.is_live())
            .filter_map(|s| s.parent)
            .collect();
        for id in refined {
            if !keep.contains(&id) {
                state.solved.remove(&id);
            }
        }
        state.iteration += 1;
    };

    let incumbent = state
        .incumbent
        .clone()
        .ok_or_else(|| Error::Usage("no feasible point was evaluated".into()))?;
    let mut flagged: Vec<usize> = state
        .records
        .iter()
        .filter(|r| r.flagged)
        .map(|r| r.simplex)
        .collect();
    flagged.sort_unstable();
    Ok(GlobalResult {
        beta_opt: incumbent.beta,
        f_opt: incumbent.value,
        gap: state.gap(),
        lower_bound: state.lower_bound,
        upper_bound: state.upper_bound,
        iterations: state.iteration + 1,
        subproblems: state.subproblems_solved,
        termination,
        lower_level_solves: vf.solves() + beta_k_solves,
        flagged_simplices: flagged,
        history: state.history,
        records: state.records,
        solution: Some(incumbent.solution),
    })
}

/// `find_gamma` on one simplex; a failure is retried once from a cold start.
fn solve_simplex(
    problem: &Problem,
    simplex: &Simplex,
    warm: Option<&KktIterate>,
) -> Result<GammaSearch> {
    let wrap = |e: Error| Error::Subproblem {
        simplex: simplex.id,
        source: Box::new(e),
    };
    let sub = Subproblem::new(problem, simplex).map_err(wrap)?;
    match sub.find_gamma(simplex.gamma_inherited, warm) {
        Ok(g) => Ok(g),
        Err(_) => sub.find_gamma(0.0, None).map_err(wrap),
    }
}
