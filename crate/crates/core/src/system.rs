//! Element-decomposable nonlinear systems: assembly, primal/adjoint solves and
//! exact reduced-space augmented Lagrangian gradients.

use std::cell::{Cell, RefCell};

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, norm_inf, Factorization};

/// Element residual and its partial derivatives.
#[derive(Debug, Clone)]
pub struct ElementResidual {
    pub value: DVector<f64>,
    /// ∂r_e/∂u_e, `n_dofs × n_dofs`.
    pub d_state: DMatrix<f64>,
    /// ∂r_e/∂u_e′, `n_dofs × n_neighbor_dofs`.
    pub d_neighbors: DMatrix<f64>,
    /// ∂r_e/∂μ, `n_dofs × n_params`.
    pub d_params: DMatrix<f64>,
}

/// Element objective contribution j_e and its partials.
#[derive(Debug, Clone)]
pub struct ElementScalar {
    pub value: f64,
    pub d_state: DVector<f64>,
    pub d_params: DVector<f64>,
}

/// Element constraint contributions c_e (length N_c) and partials.
#[derive(Debug, Clone)]
pub struct ElementConstraints {
    pub value: DVector<f64>,
    /// `N_c × n_dofs`
    pub d_state: DMatrix<f64>,
    /// `N_c × N_μ`
    pub d_params: DMatrix<f64>,
}

/// An element-decomposable system r(u, μ) = Σ_e P_e r_e(P_eᵀu, P_e′ᵀu, μ) with an
/// objective and side constraints that are themselves element sums.
///
/// Implementations must be free of shared mutable state.
pub trait Problem: Sync {
    fn n_state(&self) -> usize;
    fn n_params(&self) -> usize;
    fn n_constraints(&self) -> usize;
    fn n_elements(&self) -> usize;
    fn param_lower(&self) -> &DVector<f64>;
    fn param_upper(&self) -> &DVector<f64>;
    /// Fallback Newton initial guess.
    fn initial_state(&self) -> DVector<f64>;
    /// Global indices owned by element `e` (the P_e map).
    fn element_dofs(&self, e: usize) -> &[usize];
    /// Global indices of the neighbor states the element reads (the P_e′ map).
    fn neighbor_dofs(&self, e: usize) -> &[usize];
    /// |Ω_e|
    fn element_volume(&self, e: usize) -> f64;
    fn element_residual(
        &self,
        e: usize,
        ue: &DVector<f64>,
        un: &DVector<f64>,
        mu: &DVector<f64>,
    ) -> ElementResidual;
    fn element_objective(&self, e: usize, ue: &DVector<f64>, mu: &DVector<f64>) -> ElementScalar;
    fn element_constraints(
        &self,
        e: usize,
        ue: &DVector<f64>,
        mu: &DVector<f64>,
    ) -> ElementConstraints;
}

/// Checks the structural invariants of a problem.
pub fn validate(problem: &dyn Problem) -> Result<()> {
    let n = problem.n_state();
    let np = problem.n_params();
    if problem.param_lower().len() != np || problem.param_upper().len() != np {
        return Err(invalid("parameter bound length differs from n_params"));
    }
    for (i, (l, u)) in problem
        .param_lower()
        .iter()
        .zip(problem.param_upper().iter())
        .enumerate()
    {
        if !(l <= u) {
            return Err(invalid(format!("parameter {i}: lower bound {l} exceeds upper {u}")));
        }
    }
    let mut touched = vec![false; n];
    for e in 0..problem.n_elements() {
        for &i in problem.element_dofs(e).iter().chain(problem.neighbor_dofs(e)) {
            if i >= n {
                return Err(invalid(format!("element {e} references state index {i} >= {n}")));
            }
        }
        for &i in problem.element_dofs(e) {
            touched[i] = true;
        }
    }
    if let Some(i) = touched.iter().position(|t| !t) {
        return Err(invalid(format!("state index {i} is not owned by any element")));
    }
    if problem.initial_state().len() != n {
        return Err(invalid("initial state has wrong length"));
    }
    Ok(())
}

pub fn gather(u: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| u[i]))
}

pub(crate) fn check_state(problem: &dyn Problem, u: &DVector<f64>) -> Result<()> {
    if u.len() != problem.n_state() {
        return Err(invalid(format!(
            "state has length {}, expected {}",
            u.len(),
            problem.n_state()
        )));
    }
    Ok(())
}

pub(crate) fn check_params(problem: &dyn Problem, mu: &DVector<f64>) -> Result<()> {
    if mu.len() != problem.n_params() {
        return Err(invalid(format!(
            "parameter vector has length {}, expected {}",
            mu.len(),
            problem.n_params()
        )));
    }
    Ok(())
}

fn in_box(problem: &dyn Problem, mu: &DVector<f64>) -> bool {
    mu.iter()
        .zip(problem.param_lower().iter().zip(problem.param_upper().iter()))
        .all(|(m, (l, u))| *l <= *m && *m <= *u)
}

/// Σ_e P_e r_e(P_eᵀu, P_e′ᵀu, μ), accumulated in ascending element order.
pub fn assemble_residual(
    problem: &dyn Problem,
    u: &DVector<f64>,
    mu: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_state(problem, u)?;
    check_params(problem, mu)?;
    let mut r = DVector::zeros(problem.n_state());
    for e in 0..problem.n_elements() {
        let dofs = problem.element_dofs(e);
        let re = problem.element_residual(
            e,
            &gather(u, dofs),
            &gather(u, problem.neighbor_dofs(e)),
            mu,
        );
        for (a, &i) in dofs.iter().enumerate() {
            r[i] += re.value[a];
        }
    }
    Ok(r)
}

/// Residual together with ∂r/∂u and ∂r/∂μ.
pub fn assemble_system(
    problem: &dyn Problem,
    u: &DVector<f64>,
    mu: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    check_state(problem, u)?;
    check_params(problem, mu)?;
    let n = problem.n_state();
    let np = problem.n_params();
    let mut r = DVector::zeros(n);
    let mut ju = DMatrix::zeros(n, n);
    let mut jm = DMatrix::zeros(n, np);
    for e in 0..problem.n_elements() {
        let dofs = problem.element_dofs(e);
        let nbrs = problem.neighbor_dofs(e);
        let re = problem.element_residual(e, &gather(u, dofs), &gather(u, nbrs), mu);
        for (a, &i) in dofs.iter().enumerate() {
            r[i] += re.value[a];
            for (b, &k) in dofs.iter().enumerate() {
                ju[(i, k)] += re.d_state[(a, b)];
            }
            for (b, &k) in nbrs.iter().enumerate() {
                ju[(i, k)] += re.d_neighbors[(a, b)];
            }
            for p in 0..np {
                jm[(i, p)] += re.d_params[(a, p)];
            }
        }
    }
    Ok((r, ju, jm))
}

/// (∂r/∂u, ∂r/∂μ)
pub fn assemble_jacobians(
    problem: &dyn Problem,
    u: &DVector<f64>,
    mu: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (_, ju, jm) = assemble_system(problem, u, mu)?;
    Ok((ju, jm))
}

/// Assembled objective and constraints with their partial derivatives.
#[derive(Debug, Clone)]
pub struct Functionals {
    pub j: f64,
    pub dj_du: DVector<f64>,
    pub dj_dmu: DVector<f64>,
    pub c: DVector<f64>,
    /// `N_c × N_u`
    pub dc_du: DMatrix<f64>,
    /// `N_c × N_μ`
    pub dc_dmu: DMatrix<f64>,
}

pub fn assemble_functionals(
    problem: &dyn Problem,
    u: &DVector<f64>,
    mu: &DVector<f64>,
) -> Result<Functionals> {
    check_state(problem, u)?;
    check_params(problem, mu)?;
    let n = problem.n_state();
    let np = problem.n_params();
    let nc = problem.n_constraints();
    let mut out = Functionals {
        j: 0.0,
        dj_du: DVector::zeros(n),
        dj_dmu: DVector::zeros(np),
        c: DVector::zeros(nc),
        dc_du: DMatrix::zeros(nc, n),
        dc_dmu: DMatrix::zeros(nc, np),
    };
    for e in 0..problem.n_elements() {
        let dofs = problem.element_dofs(e);
        let ue = gather(u, dofs);
        let je = problem.element_objective(e, &ue, mu);
        out.j += je.value;
        out.dj_dmu += &je.d_params;
        for (a, &i) in dofs.iter().enumerate() {
            out.dj_du[i] += je.d_state[a];
        }
        if nc > 0 {
            let ce = problem.element_constraints(e, &ue, mu);
            out.c += &ce.value;
            out.dc_dmu += &ce.d_params;
            for (a, &i) in dofs.iter().enumerate() {
                for k in 0..nc {
                    out.dc_du[(k, i)] += ce.d_state[(k, a)];
                }
            }
        }
    }
    Ok(out)
}

/// Multiplier estimate θ and penalty τ, frozen for one major iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ALContext {
    pub theta: DVector<f64>,
    pub tau: f64,
}

impl ALContext {
    /// τ = 0 is accepted so that the pure Lagrangian can be evaluated; the
    /// outer loop only ever produces τ > 0.
    pub fn new(theta: DVector<f64>, tau: f64) -> Result<Self> {
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(invalid(format!("penalty must be finite and nonnegative, got {tau}")));
        }
        if !linalg::all_finite(&theta) {
            return Err(invalid("multiplier estimate has non-finite entries"));
        }
        Ok(Self { theta, tau })
    }

    pub fn zero(n_constraints: usize) -> Self {
        Self { theta: DVector::zeros(n_constraints), tau: 0.0 }
    }

    /// ℓ^L = j − θᵀc
    pub fn lagrangian(&self, j: f64, c: &DVector<f64>) -> f64 {
        j - self.theta.dot(c)
    }

    /// ℓ = j − θᵀc + τ/2 ‖c‖²
    pub fn al_value(&self, j: f64, c: &DVector<f64>) -> f64 {
        self.lagrangian(j, c) + 0.5 * self.tau * c.norm_squared()
    }
}

/// (∂ℓ/∂u)ᵀ at assembled functionals.
pub fn al_state_gradient(f: &Functionals, ctx: &ALContext) -> DVector<f64> {
    let mut g = f.dj_du.clone();
    if f.c.len() > 0 {
        let w = &f.c * ctx.tau - &ctx.theta;
        g += f.dc_du.tr_mul(&w);
    }
    g
}

/// (∂ℓ/∂μ)ᵀ at assembled functionals.
pub fn al_param_gradient(f: &Functionals, ctx: &ALContext) -> DVector<f64> {
    let mut g = f.dj_dmu.clone();
    if f.c.len() > 0 {
        let w = &f.c * ctx.tau - &ctx.theta;
        g += f.dc_dmu.tr_mul(&w);
    }
    g
}

const STALL_STEP: f64 = 1e-9;

/// Newton solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-12, max_iters: 50, max_halvings: 20 }
    }
}

/// Damped Newton on a generic residual. `eval` returns (residual, Jacobian).
pub(crate) fn newton<F>(
    solver: &'static str,
    mut x: DVector<f64>,
    opts: &NewtonOptions,
    mut eval: F,
    mut residual_only: impl FnMut(&DVector<f64>) -> Result<DVector<f64>>,
) -> Result<(DVector<f64>, usize)>
where
    F: FnMut(&DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>,
{
    let (mut r, mut jac) = eval(&x)?;
    let mut rnorm = norm_inf(&r);
    let mut iters = 0;
    while !(rnorm <= opts.tol) {
        if iters >= opts.max_iters || !rnorm.is_finite() {
            return Err(Error::SolverFailure { solver, residual: rnorm });
        }
        let dx = Factorization::new(&jac)?.solve(&(-&r))?;
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial = &x + &dx * step;
            let rt = residual_only(&trial)?;
            let nt = norm_inf(&rt);
            if nt < rnorm {
                accepted = Some(trial);
                break;
            }
            step *= 0.5;
        }
        let Some(next) = accepted else {
            // Residual stuck at round-off with a negligible correction.
            if norm_inf(&dx) <= STALL_STEP * (1.0 + norm_inf(&x)) {
                return Ok((x, iters));
            }
            return Err(Error::SolverFailure { solver, residual: rnorm });
        };
        x = next;
        iters += 1;
        (r, jac) = eval(&x)?;
        rnorm = norm_inf(&r);
    }
    Ok((x, iters))
}

/// Newton solve of r(u, μ) = 0 from `u_guess`. Returns the state and the
/// number of Newton steps taken.
pub fn solve_primal_with(
    problem: &dyn Problem,
    mu: &DVector<f64>,
    u_guess: &DVector<f64>,
    opts: &NewtonOptions,
) -> Result<(DVector<f64>, usize)> {
    check_state(problem, u_guess)?;
    check_params(problem, mu)?;
    if !in_box(problem, mu) {
        return Err(invalid("parameter outside its bounds"));
    }
    if !linalg::all_finite(u_guess) {
        return Err(invalid("initial guess has non-finite entries"));
    }
    newton(
        "hdm-newton",
        u_guess.clone(),
        opts,
        |u| {
            let (r, ju, _) = assemble_system(problem, u, mu)?;
            Ok((r, ju))
        },
        |u| assemble_residual(problem, u, mu),
    )
}

pub fn solve_primal(
    problem: &dyn Problem,
    mu: &DVector<f64>,
    u_guess: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(solve_primal_with(problem, mu, u_guess, &NewtonOptions::default())?.0)
}

/// Solves (∂r/∂u)ᵀ λ = (∂ℓ/∂u)ᵀ.
pub fn solve_adjoint(
    problem: &dyn Problem,
    u_star: &DVector<f64>,
    mu: &DVector<f64>,
    ctx: &ALContext,
) -> Result<DVector<f64>> {
    let (ju, _) = assemble_jacobians(problem, u_star, mu)?;
    let f = assemble_functionals(problem, u_star, mu)?;
    Factorization::new(&ju.transpose())?.solve(&al_state_gradient(&f, ctx))
}

/// Solves (∂r/∂u) W = −∂r/∂μ for the state sensitivity.
pub fn solve_sensitivity(
    problem: &dyn Problem,
    u_star: &DVector<f64>,
    mu: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let (ju, jm) = assemble_jacobians(problem, u_star, mu)?;
    Factorization::new(&ju)?.solve_matrix(&(-jm))
}

/// A converged primal/adjoint pair.
#[derive(Debug, Clone)]
pub struct PrimalAdjointPair {
    pub u_star: DVector<f64>,
    pub lambda_star: DVector<f64>,
    pub mu: DVector<f64>,
}

/// Value and gradient of the reduced AL function together with the pieces
/// they were built from.
#[derive(Debug, Clone)]
pub struct AlEvaluation {
    pub f: f64,
    pub grad: DVector<f64>,
    /// g^{L,λ}, the Lagrangian part of the gradient evaluated with the full adjoint.
    pub grad_lagrangian: DVector<f64>,
    /// τ cᵀ ∂c/∂μ
    pub grad_penalty: DVector<f64>,
    pub j: f64,
    pub c: DVector<f64>,
    pub pair: PrimalAdjointPair,
}

/// Gradient pieces from an adjoint: g^λ = ∂ℓ/∂μ − zᵀ ∂r/∂μ, split into g^{L,λ}
/// and τ cᵀ ∂c/∂μ.
pub fn gradient_from_adjoint(
    f: &Functionals,
    dr_dmu: &DMatrix<f64>,
    z: &DVector<f64>,
    ctx: &ALContext,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let mut lag = f.dj_dmu.clone() - dr_dmu.tr_mul(z);
    if f.c.len() > 0 {
        lag -= f.dc_dmu.tr_mul(&ctx.theta);
    }
    let pen = if f.c.len() > 0 {
        f.dc_dmu.tr_mul(&f.c) * ctx.tau
    } else {
        DVector::zeros(f.dj_dmu.len())
    };
    let total = al_param_gradient(f, ctx) - dr_dmu.tr_mul(z);
    (total, lag, pen)
}

/// f(μ) = ℓ(u⋆(μ), μ) and its adjoint gradient, starting Newton at `u_guess`.
pub fn reduced_al_value_gradient(
    problem: &dyn Problem,
    mu: &DVector<f64>,
    ctx: &ALContext,
    u_guess: &DVector<f64>,
) -> Result<AlEvaluation> {
    let u = solve_primal(problem, mu, u_guess)?;
    evaluate_at_state(problem, u, mu, ctx)
}

fn evaluate_at_state(
    problem: &dyn Problem,
    u: DVector<f64>,
    mu: &DVector<f64>,
    ctx: &ALContext,
) -> Result<AlEvaluation> {
    let (ju, jm) = assemble_jacobians(problem, &u, mu)?;
    let f = assemble_functionals(problem, &u, mu)?;
    let lambda = Factorization::new(&ju.transpose())?.solve(&al_state_gradient(&f, ctx))?;
    let (grad, grad_lagrangian, grad_penalty) = gradient_from_adjoint(&f, &jm, &lambda, ctx);
    Ok(AlEvaluation {
        f: ctx.al_value(f.j, &f.c),
        grad,
        grad_lagrangian,
        grad_penalty,
        j: f.j,
        c: f.c,
        pair: PrimalAdjointPair { u_star: u, lambda_star: lambda, mu: mu.clone() },
    })
}

/// Kind of a counted solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveKind {
    HdmPrimal,
    HdmAdjoint,
    HdmSensitivity,
    Rom,
    Eqp,
    Lp,
}

/// Running tallies of expensive solves plus an ordered event log.
#[derive(Debug, Default)]
pub struct SolveCounters {
    counts: [Cell<usize>; 6],
    log: RefCell<Vec<SolveKind>>,
    paused: Cell<bool>,
}

impl SolveCounters {
    fn slot(kind: SolveKind) -> usize {
        match kind {
            SolveKind::HdmPrimal => 0,
            SolveKind::HdmAdjoint => 1,
            SolveKind::HdmSensitivity => 2,
            SolveKind::Rom => 3,
            SolveKind::Eqp => 4,
            SolveKind::Lp => 5,
        }
    }

    pub fn record(&self, kind: SolveKind) {
        if self.paused.get() {
            return;
        }
        let c = &self.counts[Self::slot(kind)];
        c.set(c.get() + 1);
        self.log.borrow_mut().push(kind);
    }

    pub fn count(&self, kind: SolveKind) -> usize {
        self.counts[Self::slot(kind)].get()
    }

    /// Primal plus adjoint HDM solves.
    pub fn hdm(&self) -> usize {
        self.count(SolveKind::HdmPrimal) + self.count(SolveKind::HdmAdjoint)
    }

    pub fn events(&self) -> Vec<SolveKind> {
        self.log.borrow().clone()
    }

    /// Runs `f` without recording any solves (used for diagnostics).
    pub fn paused<T>(&self, f: impl FnOnce() -> T) -> T {
        let was = self.paused.replace(true);
        let out = f();
        self.paused.set(was);
        out
    }
}

/// HDM evaluator with warm starts from the nearest previously solved
/// parameter and solve counting.
pub struct HdmSolver<'a> {
    problem: &'a dyn Problem,
    opts: NewtonOptions,
    cache: RefCell<Vec<(DVector<f64>, DVector<f64>)>>,
    capacity: usize,
    pub counters: &'a SolveCounters,
}

impl<'a> HdmSolver<'a> {
    pub fn new(problem: &'a dyn Problem, counters: &'a SolveCounters) -> Self {
        Self {
            problem,
            opts: NewtonOptions::default(),
            cache: RefCell::new(Vec::new()),
            capacity: 64,
            counters,
        }
    }

    pub fn problem(&self) -> &'a dyn Problem {
        self.problem
    }

    fn warm_start(&self, mu: &DVector<f64>) -> DVector<f64> {
        let cache = self.cache.borrow();
        cache
            .iter()
            .map(|(m, u)| ((m - mu).norm(), u))
            .fold(None::<(f64, &DVector<f64>)>, |best, (d, u)| match best {
                Some((bd, _)) if bd <= d => best,
                _ => Some((d, u)),
            })
            .map(|(_, u)| u.clone())
            .unwrap_or_else(|| self.problem.initial_state())
    }

    pub fn primal(&self, mu: &DVector<f64>) -> Result<DVector<f64>> {
        let guess = self.warm_start(mu);
        self.counters.record(SolveKind::HdmPrimal);
        let (u, _) = solve_primal_with(self.problem, mu, &guess, &self.opts)?;
        let mut cache = self.cache.borrow_mut();
        if cache.len() == self.capacity {
            cache.remove(0);
        }
        cache.push((mu.clone(), u.clone()));
        Ok(u)
    }

    /// f only: one primal solve.
    pub fn value(&self, mu: &DVector<f64>, ctx: &ALContext) -> Result<(f64, DVector<f64>)> {
        let u = self.primal(mu)?;
        let f = assemble_functionals(self.problem, &u, mu)?;
        Ok((ctx.al_value(f.j, &f.c), u))
    }

    /// f and ∇f: one primal and one adjoint solve.
    pub fn value_gradient(&self, mu: &DVector<f64>, ctx: &ALContext) -> Result<AlEvaluation> {
        let u = self.primal(mu)?;
        self.counters.record(SolveKind::HdmAdjoint);
        evaluate_at_state(self.problem, u, mu, ctx)
    }

    /// Adjoint at an already converged state.
    pub fn gradient_at(
        &self,
        u: DVector<f64>,
        mu: &DVector<f64>,
        ctx: &ALContext,
    ) -> Result<AlEvaluation> {
        self.counters.record(SolveKind::HdmAdjoint);
        evaluate_at_state(self.problem, u, mu, ctx)
    }

    pub fn sensitivity(&self, u: &DVector<f64>, mu: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.counters.record(SolveKind::HdmSensitivity);
        solve_sensitivity(self.problem, u, mu)
    }
}
