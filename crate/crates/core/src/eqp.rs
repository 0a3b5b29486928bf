//! Element-weighted (hyperreduced) models and the linear program that trains
//! their weights.
//!
//! Every hyperreduced quantity is a ρ-weighted sum of per-element pieces
//! evaluated on the affine subspace ū + Ran Φ. With the reduced solutions
//! frozen, each quantity is affine in ρ, so accuracy requirements against the
//! ρ = 1 values become linear inequality rows.

use std::fmt;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::Factorization;
use crate::lp::{solve_lp, LpInstance, LpStatus};
use crate::rom::{reduced_quantities, ModelEvaluation, ModelQuantities, ReducedBasis, ReducedSolution};
use crate::system::{gather, newton, ALContext, NewtonOptions, Problem};

/// Weights at or below this value are reported as exact zeros.
pub const ZERO_CLAMP: f64 = 1e-10;
/// Extra slack allowed by the post-solve audit.
pub const AUDIT_SLACK: f64 = 1e-9;

/// Nonnegative element weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EqpWeights {
    pub rho: DVector<f64>,
    pub active: Vec<usize>,
    pub usage_fraction: f64,
}

impl EqpWeights {
    pub fn new(rho: DVector<f64>) -> Result<Self> {
        if rho.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(invalid("element weights must be finite and nonnegative"));
        }
        let active: Vec<usize> = (0..rho.len()).filter(|&e| rho[e] > 0.0).collect();
        let usage_fraction = if rho.is_empty() { 0.0 } else { active.len() as f64 / rho.len() as f64 };
        Ok(Self { rho, active, usage_fraction })
    }

    pub fn ones(n_elements: usize) -> Self {
        Self::new(DVector::from_element(n_elements, 1.0)).expect("unit weights are valid")
    }
}

/// The nine accuracy constraint families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Dv,
    Rp,
    Lra,
    Lga,
    C,
    Dcmu,
    Dcy,
    Rs,
    Lq,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::Dv,
        Family::Rp,
        Family::Lra,
        Family::Lga,
        Family::C,
        Family::Dcmu,
        Family::Dcy,
        Family::Rs,
        Family::Lq,
    ];

    /// Families whose right-hand side is divided by τ.
    pub fn penalty_scaled(self) -> bool {
        matches!(self, Family::C | Family::Dcmu | Family::Dcy)
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Dv => "dv",
            Family::Rp => "rp",
            Family::Lra => "lra",
            Family::Lga => "lga",
            Family::C => "c",
            Family::Dcmu => "dcmu",
            Family::Dcy => "dcy",
            Family::Rs => "rs",
            Family::Lq => "lq",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named subsets of constraint families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// The families needed by the convergence theory.
    Convergence,
    /// Convergence families plus sensitivity residual and Lagrangian value.
    #[default]
    Full,
}

impl Preset {
    pub fn families(self) -> Vec<Family> {
        let mut f = vec![
            Family::Dv,
            Family::Rp,
            Family::Lra,
            Family::Lga,
            Family::C,
            Family::Dcmu,
            Family::Dcy,
        ];
        if self == Preset::Full {
            f.extend([Family::Rs, Family::Lq]);
        }
        f
    }
}

/// The tolerance vector δ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EqpTolerances {
    pub delta_dv: f64,
    pub delta_rp: f64,
    pub delta_lra: f64,
    pub delta_lga: f64,
    pub delta_c: f64,
    pub delta_dcmu: f64,
    pub delta_dcy: f64,
    pub delta_rs: f64,
    pub delta_lq: f64,
}

impl EqpTolerances {
    pub fn uniform(d: f64) -> Self {
        Self {
            delta_dv: d,
            delta_rp: d,
            delta_lra: d,
            delta_lga: d,
            delta_c: d,
            delta_dcmu: d,
            delta_dcy: d,
            delta_rs: d,
            delta_lq: d,
        }
    }

    pub fn get(&self, f: Family) -> f64 {
        match f {
            Family::Dv => self.delta_dv,
            Family::Rp => self.delta_rp,
            Family::Lra => self.delta_lra,
            Family::Lga => self.delta_lga,
            Family::C => self.delta_c,
            Family::Dcmu => self.delta_dcmu,
            Family::Dcy => self.delta_dcy,
            Family::Rs => self.delta_rs,
            Family::Lq => self.delta_lq,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if Family::ALL.iter().any(|&f| !(self.get(f) >= 0.0)) {
            return Err(invalid("EQP tolerances must be nonnegative"));
        }
        Ok(())
    }

    /// Row tolerance actually imposed for a family: δ, or δ/τ for the
    /// constraint families.
    pub fn row_tolerance(&self, f: Family, tau: f64) -> f64 {
        if f.penalty_scaled() {
            self.get(f) / tau
        } else {
            self.get(f)
        }
    }
}

/// Per-element pieces at one (ŷ, μ).
struct Pieces {
    rp: DVector<f64>,
    jac: DMatrix<f64>,
    rmu: DMatrix<f64>,
    j: f64,
    dj_dy: DVector<f64>,
    dj_dmu: DVector<f64>,
    c: DVector<f64>,
    dc_dy: DMatrix<f64>,
    dc_dmu: DMatrix<f64>,
    volume: f64,
}

/// Basis rows restricted to one element.
struct LocalBasis {
    phi_e: DMatrix<f64>,
    phi_n: DMatrix<f64>,
    off_e: DVector<f64>,
    off_n: DVector<f64>,
}

fn select_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

/// Hyperreduced model for a fixed basis and weight vector.
pub struct HyperModel<'a> {
    problem: &'a dyn Problem,
    basis: &'a ReducedBasis,
    rho: DVector<f64>,
    active: Vec<usize>,
    local: Vec<Option<LocalBasis>>,
}

impl<'a> HyperModel<'a> {
    pub fn new(problem: &'a dyn Problem, basis: &'a ReducedBasis, weights: &EqpWeights) -> Result<Self> {
        if weights.rho.len() != problem.n_elements() {
            return Err(invalid("weight vector length differs from the element count"));
        }
        if basis.n_state() != problem.n_state() || basis.dim() == 0 {
            return Err(invalid("basis does not match the problem"));
        }
        let zero = DVector::zeros(problem.n_state());
        let offset = basis.offset.as_ref().unwrap_or(&zero);
        let mut local: Vec<Option<LocalBasis>> = (0..problem.n_elements()).map(|_| None).collect();
        for &e in &weights.active {
            let dofs = problem.element_dofs(e);
            let nbrs = problem.neighbor_dofs(e);
            local[e] = Some(LocalBasis {
                phi_e: select_rows(&basis.columns, dofs),
                phi_n: select_rows(&basis.columns, nbrs),
                off_e: gather(offset, dofs),
                off_n: gather(offset, nbrs),
            });
        }
        Ok(Self {
            problem,
            basis,
            rho: weights.rho.clone(),
            active: weights.active.clone(),
            local,
        })
    }

    pub fn basis(&self) -> &ReducedBasis {
        self.basis
    }

    fn local(&self, e: usize) -> &LocalBasis {
        self.local[e].as_ref().expect("active element has a local basis")
    }

    fn pieces(&self, e: usize, y: &DVector<f64>, mu: &DVector<f64>, full: bool) -> Pieces {
        let lb = self.local(e);
        let ue = &lb.off_e + &lb.phi_e * y;
        let un = &lb.off_n + &lb.phi_n * y;
        let re = self.problem.element_residual(e, &ue, &un, mu);
        let rp = lb.phi_e.tr_mul(&re.value);
        let jac = lb.phi_e.tr_mul(&(&re.d_state * &lb.phi_e + &re.d_neighbors * &lb.phi_n));
        let rmu = lb.phi_e.tr_mul(&re.d_params);
        let n = y.len();
        let np = mu.len();
        let nc = self.problem.n_constraints();
        let mut p = Pieces {
            rp,
            jac,
            rmu,
            j: 0.0,
            dj_dy: DVector::zeros(n),
            dj_dmu: DVector::zeros(np),
            c: DVector::zeros(nc),
            dc_dy: DMatrix::zeros(nc, n),
            dc_dmu: DMatrix::zeros(nc, np),
            volume: self.problem.element_volume(e),
        };
        if full {
            let je = self.problem.element_objective(e, &ue, mu);
            p.j = je.value;
            p.dj_dy = lb.phi_e.tr_mul(&je.d_state);
            p.dj_dmu = je.d_params;
            if nc > 0 {
                let ce = self.problem.element_constraints(e, &ue, mu);
                p.c = ce.value;
                p.dc_dy = &ce.d_state * &lb.phi_e;
                p.dc_dmu = ce.d_params;
            }
        }
        p
    }

    fn check(&self, y: &DVector<f64>, mu: &DVector<f64>) -> Result<()> {
        if y.len() != self.basis.dim() {
            return Err(invalid("reduced coordinates do not match the basis"));
        }
        if mu.len() != self.problem.n_params() {
            return Err(invalid("parameter vector has wrong length"));
        }
        Ok(())
    }

    /// Weighted sums of residual, Jacobian and ∂r/∂μ (and functionals when `full`).
    fn sums(&self, y: &DVector<f64>, mu: &DVector<f64>, full: bool) -> Pieces {
        let n = y.len();
        let np = mu.len();
        let nc = self.problem.n_constraints();
        let mut s = Pieces {
            rp: DVector::zeros(n),
            jac: DMatrix::zeros(n, n),
            rmu: DMatrix::zeros(n, np),
            j: 0.0,
            dj_dy: DVector::zeros(n),
            dj_dmu: DVector::zeros(np),
            c: DVector::zeros(nc),
            dc_dy: DMatrix::zeros(nc, n),
            dc_dmu: DMatrix::zeros(nc, np),
            volume: 0.0,
        };
        for &e in &self.active {
            let w = self.rho[e];
            let p = self.pieces(e, y, mu, full);
            s.rp.axpy(w, &p.rp, 1.0);
            s.jac += p.jac * w;
            s.rmu += p.rmu * w;
            s.volume += w * p.volume;
            if full {
                s.j += w * p.j;
                s.dj_dy.axpy(w, &p.dj_dy, 1.0);
                s.dj_dmu.axpy(w, &p.dj_dmu, 1.0);
                s.c.axpy(w, &p.c, 1.0);
                s.dc_dy += p.dc_dy * w;
                s.dc_dmu += p.dc_dmu * w;
            }
        }
        s
    }

    /// Every hyperreduced quantity at (ỹ, λ̃, w̃, μ; θ, τ).
    pub fn quantities(
        &self,
        y: &DVector<f64>,
        lambda: &DVector<f64>,
        w: &DMatrix<f64>,
        mu: &DVector<f64>,
        ctx: &ALContext,
    ) -> Result<ModelQuantities> {
        self.check(y, mu)?;
        self.check(lambda, mu)?;
        if w.nrows() != y.len() || w.ncols() != mu.len() {
            return Err(invalid("sensitivity has wrong shape"));
        }
        let s = self.sums(y, mu, true);
        Ok(ModelQuantities::finish(
            s.rp, s.jac, s.rmu, s.j, s.dj_dy, s.dj_dmu, s.c, s.dc_dy, s.dc_dmu, s.volume, lambda, w, ctx,
        ))
    }

    /// Newton on r̃(ỹ, μ) = 0 from ỹ = 0.
    pub fn solve_primal(&self, mu: &DVector<f64>) -> Result<DVector<f64>> {
        self.solve_primal_from(mu, &DVector::zeros(self.basis.dim()))
    }

    pub fn solve_primal_from(&self, mu: &DVector<f64>, y0: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(y0, mu)?;
        let (y, _) = newton(
            "eqp-newton",
            y0.clone(),
            &NewtonOptions::default(),
            |y| {
                let s = self.sums(y, mu, false);
                Ok((s.rp, s.jac))
            },
            |y| Ok(self.sums(y, mu, false).rp),
        )?;
        Ok(y)
    }

    /// Solves J̃ᵀλ̃ = (∂ℓ̃/∂ỹ)ᵀ.
    pub fn solve_adjoint(&self, y: &DVector<f64>, mu: &DVector<f64>, ctx: &ALContext) -> Result<DVector<f64>> {
        self.check(y, mu)?;
        let s = self.sums(y, mu, true);
        Factorization::new(&s.jac.transpose())?.solve(&adjoint_rhs(&s, ctx))
    }

    /// Solves J̃ w̃ = −∂r̃/∂μ.
    pub fn solve_sensitivity(&self, y: &DVector<f64>, mu: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(y, mu)?;
        let s = self.sums(y, mu, false);
        Factorization::new(&s.jac)?.solve_matrix(&(-s.rmu))
    }

    pub fn solve_all(&self, mu: &DVector<f64>, ctx: &ALContext) -> Result<ReducedSolution> {
        let y_hat = self.solve_primal(mu)?;
        let s = self.sums(&y_hat, mu, true);
        let lu = Factorization::new(&s.jac)?;
        let lambda_hat = Factorization::new(&s.jac.transpose())?.solve(&adjoint_rhs(&s, ctx))?;
        let sens_hat = lu.solve_matrix(&(-&s.rmu))?;
        Ok(ReducedSolution { y_hat, lambda_hat, sens_hat })
    }

    /// f̃ and ∇f̃ through the hyperreduced primal and adjoint.
    pub fn value_gradient(&self, mu: &DVector<f64>, ctx: &ALContext) -> Result<ModelEvaluation> {
        self.value_gradient_from(mu, ctx, &DVector::zeros(self.basis.dim()))
    }

    pub fn value_gradient_from(&self, mu: &DVector<f64>, ctx: &ALContext, y0: &DVector<f64>) -> Result<ModelEvaluation> {
        let y = self.solve_primal_from(mu, y0)?;
        let s = self.sums(&y, mu, true);
        let lambda = Factorization::new(&s.jac.transpose())?.solve(&adjoint_rhs(&s, ctx))?;
        let proj = s.rmu.tr_mul(&lambda);
        let mut grad_lagrangian = &s.dj_dmu - &proj;
        let mut grad_penalty = DVector::zeros(mu.len());
        if s.c.len() > 0 {
            grad_lagrangian -= s.dc_dmu.tr_mul(&ctx.theta);
            grad_penalty = s.dc_dmu.tr_mul(&s.c) * ctx.tau;
        }
        Ok(ModelEvaluation {
            f: ctx.al_value(s.j, &s.c),
            grad: &grad_lagrangian + &grad_penalty,
            grad_lagrangian,
            grad_penalty,
            j: s.j,
            c: s.c,
            y,
            lambda,
        })
    }

    pub fn value(&self, mu: &DVector<f64>, ctx: &ALContext) -> Result<f64> {
        let y = self.solve_primal(mu)?;
        let s = self.sums(&y, mu, true);
        Ok(ctx.al_value(s.j, &s.c))
    }
}

fn adjoint_rhs(s: &Pieces, ctx: &ALContext) -> DVector<f64> {
    let mut rhs = s.dj_dy.clone();
    if s.c.len() > 0 {
        rhs += s.dc_dy.tr_mul(&(&s.c * ctx.tau - &ctx.theta));
    }
    rhs
}

/// A training parameter with its reduced (ρ = 1) solutions.
#[derive(Debug, Clone)]
pub struct TrainingPoint {
    pub mu: DVector<f64>,
    pub solution: ReducedSolution,
}

/// Row bookkeeping for an assembled training LP.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowInfo {
    pub family: Family,
    pub point: usize,
    pub component: usize,
    /// +1 for aᵀρ ≤ b + δ, −1 for −aᵀρ ≤ −b + δ.
    pub sign: i8,
}

#[derive(Debug, Clone)]
pub struct TrainingLp {
    pub instance: LpInstance,
    pub rows: Vec<RowInfo>,
    pub families: Vec<Family>,
    /// Imposed tolerance per selected family (after τ scaling).
    pub row_tolerances: Vec<(Family, f64)>,
}

/// Per-element contribution vectors of every family at frozen reduced
/// solutions. `out[f][e]` is element e's contribution to family f.
fn contributions(
    problem: &dyn Problem,
    basis: &ReducedBasis,
    point: &TrainingPoint,
    ctx: &ALContext,
    families: &[Family],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let ones = EqpWeights::ones(problem.n_elements());
    let model = HyperModel::new(problem, basis, &ones)?;
    let sol = &point.solution;
    model.check(&sol.y_hat, &point.mu)?;
    if sol.lambda_hat.len() != basis.dim()
        || sol.sens_hat.nrows() != basis.dim()
        || sol.sens_hat.ncols() != problem.n_params()
    {
        return Err(invalid("training solution does not match the basis"));
    }
    let mut out = vec![Vec::with_capacity(problem.n_elements()); families.len()];
    for e in 0..problem.n_elements() {
        let p = model.pieces(e, &sol.y_hat, &point.mu, true);
        for (k, &f) in families.iter().enumerate() {
            let v: Vec<f64> = match f {
                Family::Dv => vec![p.volume],
                Family::Rp => p.rp.iter().copied().collect(),
                Family::Lra => {
                    let mut v = p.jac.tr_mul(&sol.lambda_hat) - &p.dj_dy;
                    if p.c.len() > 0 {
                        v += p.dc_dy.tr_mul(&ctx.theta);
                    }
                    v.iter().copied().collect()
                }
                Family::Lga => {
                    let mut v = &p.dj_dmu - p.rmu.tr_mul(&sol.lambda_hat);
                    if p.c.len() > 0 {
                        v -= p.dc_dmu.tr_mul(&ctx.theta);
                    }
                    v.iter().copied().collect()
                }
                Family::C => p.c.iter().copied().collect(),
                Family::Dcmu => p.dc_dmu.iter().copied().collect(),
                Family::Dcy => p.dc_dy.iter().copied().collect(),
                Family::Rs => (&p.jac * &sol.sens_hat + &p.rmu).iter().copied().collect(),
                Family::Lq => vec![ctx.lagrangian(p.j, &p.c)],
            };
            out[k].push(v);
        }
    }
    Ok(out)
}

/// Builds min 1ᵀρ subject to two-sided ∞-norm rows for every selected
/// family, training point and component. With τ = 0 the constraint families
/// are dropped.
pub fn assemble_training_lp(
    problem: &dyn Problem,
    basis: &ReducedBasis,
    training: &[TrainingPoint],
    tolerances: &EqpTolerances,
    ctx: &ALContext,
    selection: &[Family],
) -> Result<TrainingLp> {
    tolerances.validate()?;
    let mut families: Vec<Family> = selection.to_vec();
    families.sort();
    families.dedup();
    if ctx.tau == 0.0 {
        families.retain(|f| !f.penalty_scaled());
    }
    let ne = problem.n_elements();
    let mut rows_a: Vec<Vec<f64>> = Vec::new();
    let mut rows_b: Vec<f64> = Vec::new();
    let mut info = Vec::new();
    let row_tolerances: Vec<(Family, f64)> =
        families.iter().map(|&f| (f, tolerances.row_tolerance(f, ctx.tau))).collect();
    let mut dv_done = false;
    for (t, point) in training.iter().enumerate() {
        let contrib = contributions(problem, basis, point, ctx, &families)?;
        for (k, &f) in families.iter().enumerate() {
            // The domain-volume row does not depend on the training point.
            if f == Family::Dv {
                if dv_done {
                    continue;
                }
                dv_done = true;
            }
            let tol = row_tolerances[k].1;
            let ncomp = contrib[k].first().map_or(0, |v| v.len());
            for comp in 0..ncomp {
                let a: Vec<f64> = (0..ne).map(|e| contrib[k][e][comp]).collect();
                let b: f64 = a.iter().sum();
                rows_a.push(a.clone());
                rows_b.push(b + tol);
                info.push(RowInfo { family: f, point: t, component: comp, sign: 1 });
                rows_a.push(a.iter().map(|v| -v).collect());
                rows_b.push(-b + tol);
                info.push(RowInfo { family: f, point: t, component: comp, sign: -1 });
            }
        }
    }
    let m = rows_a.len();
    let a = DMatrix::from_fn(m, ne, |i, j| rows_a[i][j]);
    let instance = LpInstance::new(DVector::from_element(ne, 1.0), a, DVector::from_vec(rows_b))?;
    Ok(TrainingLp { instance, rows: info, families, row_tolerances })
}

/// Largest violation of the LP rows by ρ = 1, relative to row magnitude.
pub fn unit_weight_violation(lp: &TrainingLp) -> f64 {
    let ne = lp.instance.n_vars();
    let ones = DVector::from_element(ne, 1.0);
    let r = &lp.instance.a * &ones - &lp.instance.b;
    r.iter()
        .enumerate()
        .map(|(i, v)| v / lp.instance.a.row(i).amax().max(1.0))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Result of training: weights plus how they were obtained.
#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub weights: EqpWeights,
    pub status: LpStatus,
    pub fallback: bool,
    pub lp_iterations: usize,
}

/// Solves the training LP, clamps tiny weights to zero, and falls back to
/// ρ = 1 if the LP solver fails.
pub fn train_weights(lp: &TrainingLp) -> TrainingOutcome {
    let ne = lp.instance.n_vars();
    let sol = solve_lp(&lp.instance);
    if sol.status != LpStatus::Optimal {
        warn!("EQP training LP ended with status {:?}; using unit weights", sol.status);
        return TrainingOutcome {
            weights: EqpWeights::ones(ne),
            status: sol.status,
            fallback: true,
            lp_iterations: sol.iterations,
        };
    }
    let rho = sol.x.map(|v| if v <= ZERO_CLAMP { 0.0 } else { v });
    TrainingOutcome {
        weights: EqpWeights::new(rho).expect("clamped LP solution is nonnegative"),
        status: sol.status,
        fallback: false,
        lp_iterations: sol.iterations,
    }
}

/// Worst residual of one family in an audit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyAudit {
    pub family: Family,
    pub residual: f64,
    pub tolerance: f64,
}

impl FamilyAudit {
    pub fn passed(&self) -> bool {
        self.residual <= self.tolerance + AUDIT_SLACK
    }
}

/// Re-evaluates every selected family for the given weights against the
/// reduced quantities computed through the assembled full-order operators,
/// independently of the LP matrix.
pub fn audit_weights(
    problem: &dyn Problem,
    basis: &ReducedBasis,
    weights: &EqpWeights,
    training: &[TrainingPoint],
    lp: &TrainingLp,
    ctx: &ALContext,
) -> Result<Vec<FamilyAudit>> {
    let model = HyperModel::new(problem, basis, weights)?;
    let mut worst: Vec<FamilyAudit> = lp
        .row_tolerances
        .iter()
        .map(|&(family, tolerance)| FamilyAudit { family, residual: 0.0, tolerance })
        .collect();
    for point in training {
        let s = &point.solution;
        let hat = reduced_quantities(problem, basis, &s.y_hat, &s.lambda_hat, &s.sens_hat, &point.mu, ctx)?;
        let til = model.quantities(&s.y_hat, &s.lambda_hat, &s.sens_hat, &point.mu, ctx)?;
        for a in worst.iter_mut() {
            let r = family_gap(a.family, &hat, &til);
            a.residual = a.residual.max(r);
        }
    }
    Ok(worst)
}

/// ‖q̂ − q̃‖∞ for one family.
pub fn family_gap(f: Family, hat: &ModelQuantities, til: &ModelQuantities) -> f64 {
    match f {
        Family::Dv => (hat.volume - til.volume).abs(),
        Family::Rp => (&hat.residual - &til.residual).amax(),
        Family::Lra => (&hat.adjoint_lagrangian - &til.adjoint_lagrangian).amax(),
        Family::Lga => (&hat.grad_lagrangian - &til.grad_lagrangian).amax(),
        Family::C => (&hat.c - &til.c).amax(),
        Family::Dcmu => (&hat.dc_dmu - &til.dc_dmu).amax(),
        Family::Dcy => (&hat.dc_dy - &til.dc_dy).amax(),
        Family::Rs => (&hat.sensitivity_residual - &til.sensitivity_residual).amax(),
        Family::Lq => (hat.lagrangian - til.lagrangian).abs(),
    }
}

/// Assembles, solves, and audits in one go.
pub fn train_and_audit(
    problem: &dyn Problem,
    basis: &ReducedBasis,
    training: &[TrainingPoint],
    tolerances: &EqpTolerances,
    ctx: &ALContext,
    selection: &[Family],
) -> Result<(TrainingLp, TrainingOutcome, Vec<FamilyAudit>)> {
    let lp = assemble_training_lp(problem, basis, training, tolerances, ctx, selection)?;
    let violation = unit_weight_violation(&lp);
    if violation > 1e-12 {
        return Err(Error::SolverFailure { solver: "eqp-lp-feasibility", residual: violation });
    }
    let outcome = train_weights(&lp);
    let audit = audit_weights(problem, basis, &outcome.weights, training, &lp, ctx)?;
    Ok((lp, outcome, audit))
}
