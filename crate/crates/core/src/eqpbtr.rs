//! Trust-region models built on the fly from ROM and EQP approximations.
//!
//! At every center the full model is solved once (primal and adjoint), the
//! basis is rebuilt around the new snapshots, EQP weights are trained at the
//! center against scheduled tolerances, and the resulting hyperreduced AL
//! function supplies the quadratic model.

use std::time::Instant;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::auglag::{SolveTally, SubproblemOutcome, Subsolver};
use crate::eqp::{
    assemble_training_lp, audit_weights, train_weights, unit_weight_violation, EqpTolerances, EqpWeights,
    HyperModel, Preset, RowInfo, TrainingPoint,
};
use crate::error::{invalid, Result};
use crate::lp::LpStatus;
use crate::rom::{
    gram_schmidt, pod, solve_reduced_adjoint, solve_reduced_primal_from, solve_reduced_sensitivity, ColumnKind,
    ReducedBasis, ReducedSolution,
};
use crate::system::{ALContext, AlEvaluation, HdmSolver, Problem, SolveCounters, SolveKind};
use crate::trustregion::{criticality, run, ModelBuilder, ModelHandle, ModelInfo, TrConfig, TrRecord};

/// Which model drives the trust-region subproblems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Exact full-order value and gradient with finite-difference Hessian.
    Hdm,
    /// Galerkin ROM, ρ ≡ 1.
    Rom,
    /// Hyperreduced ROM with trained weights.
    #[default]
    Eqp,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Hdm => "hdm",
            Method::Rom => "rom",
            Method::Eqp => "eqp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EqpConfig {
    pub preset: Preset,
    pub kappa1: f64,
    pub kappa2: f64,
    pub kappa3: f64,
    pub kappa4: f64,
    pub kappa5: f64,
    pub kappa6: f64,
    pub delta_dv: f64,
    pub delta_lq: f64,
    pub delta_rs: f64,
    pub delta_min: f64,
    /// Cap on POD columns taken from each snapshot matrix.
    pub pod_max: usize,
    /// Snapshots carried into the next major iteration.
    pub inherit_snapshots: usize,
    pub fd_epsilon: f64,
    /// Re-check every trained weight vector against the reduced quantities.
    pub audit: bool,
}

impl Default for EqpConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Full,
            kappa1: 1.0,
            kappa2: 1.0,
            kappa3: 1.0,
            kappa4: 1.0,
            kappa5: 1.0,
            kappa6: 1.0,
            delta_dv: 1e-6,
            delta_lq: 1e-6,
            delta_rs: 5e-4,
            delta_min: 1e-14,
            pod_max: 20,
            inherit_snapshots: 0,
            fd_epsilon: 1e-6,
            audit: true,
        }
    }
}

impl EqpConfig {
    pub fn validate(&self) -> Result<()> {
        let k = [self.kappa1, self.kappa2, self.kappa3, self.kappa4, self.kappa5, self.kappa6];
        if k.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(invalid("kappa1..kappa6 must be positive"));
        }
        if [self.delta_dv, self.delta_lq, self.delta_rs, self.delta_min].iter().any(|v| !(*v >= 0.0)) {
            return Err(invalid("fixed EQP tolerances must be nonnegative"));
        }
        if !(self.fd_epsilon > 0.0) {
            return Err(invalid("fd_epsilon must be positive"));
        }
        Ok(())
    }
}

/// Constants of the EQP tolerance schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToleranceSchedule {
    /// κ for rp, lra, lga, c, dcy, dcμ in that order.
    pub kappa: [f64; 6],
    pub kappa_hat: f64,
    pub delta_dv: f64,
    pub delta_lq: f64,
    pub delta_rs: f64,
    pub delta_min: f64,
}

impl ToleranceSchedule {
    pub fn new(eqp: &EqpConfig, kappa_hat: f64) -> Result<Self> {
        eqp.validate()?;
        if !(kappa_hat > 0.0) {
            return Err(invalid("kappa_hat must be positive"));
        }
        Ok(Self {
            kappa: [eqp.kappa1, eqp.kappa2, eqp.kappa3, eqp.kappa4, eqp.kappa5, eqp.kappa6],
            kappa_hat,
            delta_dv: eqp.delta_dv,
            delta_lq: eqp.delta_lq,
            delta_rs: eqp.delta_rs,
            delta_min: eqp.delta_min,
        })
    }

    /// φ = κ₁δ_rp + κ₂δ_lra + κ₃δ_lga + τ(κ₄δ_c + κ₅δ_dcy + κ₆δ_dcμ).
    pub fn indicator(&self, t: &EqpTolerances, tau: f64) -> f64 {
        let k = &self.kappa;
        k[0] * t.delta_rp
            + k[1] * t.delta_lra
            + k[2] * t.delta_lga
            + tau * (k[3] * t.delta_c + k[4] * t.delta_dcy + k[5] * t.delta_dcmu)
    }
}

/// Splits κ̂ min(‖χ_m‖, Δ) equally among the six scheduled tolerances,
/// dividing the constraint-related ones by τ.
pub fn schedule_tolerances(s: &ToleranceSchedule, chi_m_prev: f64, delta: f64, tau: f64) -> Result<EqpTolerances> {
    if !(tau > 0.0) {
        return Err(invalid("tolerance schedule needs a positive penalty"));
    }
    if !(delta > 0.0) {
        return Err(invalid("tolerance schedule needs a positive radius"));
    }
    let m = chi_m_prev.min(delta);
    let d = |k: f64, scale: f64| (s.kappa_hat / (6.0 * k * scale) * m).max(s.delta_min);
    Ok(EqpTolerances {
        delta_dv: s.delta_dv,
        delta_rp: d(s.kappa[0], 1.0),
        delta_lra: d(s.kappa[1], 1.0),
        delta_lga: d(s.kappa[2], 1.0),
        delta_c: d(s.kappa[3], tau),
        delta_dcy: d(s.kappa[4], tau),
        delta_dcmu: d(s.kappa[5], tau),
        delta_rs: s.delta_rs,
        delta_lq: s.delta_lq,
    })
}

/// Raw primal and adjoint snapshots. Primal deviations from the affine
/// offset are formed when a basis is built.
#[derive(Debug, Clone, Default)]
pub struct SnapshotStore {
    pub primal: Vec<DVector<f64>>,
    pub adjoint: Vec<DVector<f64>>,
}

impl SnapshotStore {
    pub fn len(&self) -> usize {
        self.primal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primal.is_empty()
    }

    pub fn push(&mut self, u: &DVector<f64>, lambda: &DVector<f64>) -> Result<()> {
        if u.iter().chain(lambda.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("snapshots must be finite"));
        }
        self.primal.push(u.clone());
        self.adjoint.push(lambda.clone());
        Ok(())
    }

    /// Keeps only the most recent `m` snapshot pairs.
    pub fn keep_last(&mut self, m: usize) {
        let drop = self.len().saturating_sub(m);
        self.primal.drain(..drop);
        self.adjoint.drain(..drop);
    }

    /// [u₁ − ū, …, u_k − ū].
    pub fn deviations(&self, offset: &DVector<f64>) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = self.primal.iter().map(|u| u - offset).collect();
        stack(&cols, offset.len())
    }

    pub fn adjoints(&self, n: usize) -> DMatrix<f64> {
        stack(&self.adjoint, n)
    }
}

fn stack(cols: &[DVector<f64>], n: usize) -> DMatrix<f64> {
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(cols)
    }
}

/// Φ = GS([u⋆ − ū, λ⋆, ∂_μu⋆(μ₀), POD_p(U), POD_q(V)]) with p = q =
/// min(#snapshots, `pod_max`).
pub fn build_basis(
    u_center: &DVector<f64>,
    offset: &DVector<f64>,
    lambda: &DVector<f64>,
    sensitivity: &DMatrix<f64>,
    store: &SnapshotStore,
    pod_max: usize,
) -> Result<ReducedBasis> {
    let mut cols = vec![(u_center - offset, ColumnKind::State), (lambda.clone(), ColumnKind::Adjoint)];
    cols.extend(sensitivity.column_iter().map(|c| (c.into_owned(), ColumnKind::Sensitivity)));
    let p = store.len().min(pod_max);
    if p > 0 {
        let n = offset.len();
        let up = pod(&store.deviations(offset), p)?;
        cols.extend(up.column_iter().map(|c| (c.into_owned(), ColumnKind::PodPrimal)));
        let vp = pod(&store.adjoints(n), p)?;
        cols.extend(vp.column_iter().map(|c| (c.into_owned(), ColumnKind::PodAdjoint)));
    }
    Ok(gram_schmidt(&cols)?.with_offset(offset.clone()))
}

/// One-sided finite-difference Hessian-vector product on a unit direction,
/// rescaled by ‖v‖. Steps backwards when the forward point leaves the box;
/// on a failed gradient evaluation ε is shrunk by 10 once.
#[allow(clippy::too_many_arguments)]
pub fn fd_hessvec(
    mut grad: impl FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    mu: &DVector<f64>,
    g0: &DVector<f64>,
    v: &DVector<f64>,
    epsilon: f64,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> Result<DVector<f64>> {
    let nv = v.norm();
    if !(nv > 1e-14) {
        return Err(invalid("Hessian-vector product needs a nonzero direction"));
    }
    let dir = v / nv;
    let mut last = None;
    for eps in [epsilon, 0.1 * epsilon] {
        let fwd = mu + &dir * eps;
        let inside = (0..mu.len()).all(|i| fwd[i] >= lower[i] && fwd[i] <= upper[i]);
        let h = if inside { eps } else { -eps };
        match grad(&(mu + &dir * h)) {
            Ok(g) => return Ok((g - g0) * (nv / h)),
            Err(e) => {
                warn!("finite-difference gradient failed with step {h:e}: {e}");
                last = Some(e);
            }
        }
    }
    Err(last.expect("at least one attempt"))
}

/// One training LP as written by `--dump-lp`.
#[derive(Debug, Clone, Serialize)]
pub struct LpDump {
    pub major: usize,
    pub iteration: usize,
    pub c: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub rows: Vec<RowInfo>,
    pub status: LpStatus,
    pub rho: Vec<f64>,
}

/// Model state at the current center.
struct Center {
    mu: DVector<f64>,
    grad: DVector<f64>,
    eval: AlEvaluation,
    /// Reduced model pieces; absent for the full-order method.
    reduced: Option<(ReducedBasis, EqpWeights, DVector<f64>)>,
}

/// Drives majors for one of the three methods and keeps the snapshot store
/// across them.
pub struct EqpBtr<'a> {
    problem: &'a dyn Problem,
    hdm: HdmSolver<'a>,
    counters: &'a SolveCounters,
    method: Method,
    tr: TrConfig,
    eqp: EqpConfig,
    schedule: ToleranceSchedule,
    store: SnapshotStore,
    /// Seconds spent in weight audits, reported separately from solve cost.
    pub audit_seconds: f64,
    pub dump_lp: bool,
    pub lp_dumps: Vec<LpDump>,
}

impl<'a> EqpBtr<'a> {
    pub fn new(
        problem: &'a dyn Problem,
        counters: &'a SolveCounters,
        method: Method,
        tr: TrConfig,
        eqp: EqpConfig,
    ) -> Result<Self> {
        tr.validate()?;
        let schedule = ToleranceSchedule::new(&eqp, tr.kappa_hat)?;
        Ok(Self {
            problem,
            hdm: HdmSolver::new(problem, counters),
            counters,
            method,
            tr,
            eqp,
            schedule,
            store: SnapshotStore::default(),
            audit_seconds: 0.0,
            dump_lp: false,
            lp_dumps: Vec::new(),
        })
    }

    pub fn store(&self) -> &SnapshotStore {
        &self.store
    }
}

/// Model builder for one major iteration.
struct MajorBuilder<'d, 'a> {
    d: &'d mut EqpBtr<'a>,
    major: usize,
    iteration: usize,
    ctx: ALContext,
    offset: Option<DVector<f64>>,
    sens0: Option<DMatrix<f64>>,
    center: Option<Center>,
}

impl MajorBuilder<'_, '_> {
    fn reduced_kind(&self) -> SolveKind {
        if self.d.method == Method::Eqp {
            SolveKind::Eqp
        } else {
            SolveKind::Rom
        }
    }

    /// Reduced primal, adjoint and sensitivity at the center with ρ = 1.
    fn training_solution(&self, basis: &ReducedBasis, mu: &DVector<f64>, y0: &DVector<f64>) -> Result<ReducedSolution> {
        let p = self.d.problem;
        self.d.counters.record(SolveKind::Rom);
        let y_hat = solve_reduced_primal_from(p, basis, mu, y0)?;
        let lambda_hat = solve_reduced_adjoint(p, basis, &y_hat, mu, &self.ctx)?;
        let sens_hat = solve_reduced_sensitivity(p, basis, &y_hat, mu)?;
        Ok(ReducedSolution { y_hat, lambda_hat, sens_hat })
    }

    fn train(
        &mut self,
        basis: &ReducedBasis,
        mu: &DVector<f64>,
        y0: &DVector<f64>,
        tol: EqpTolerances,
        info: &mut ModelInfo,
    ) -> Result<EqpWeights> {
        let p = self.d.problem;
        let ne = p.n_elements();
        let point = TrainingPoint { mu: mu.clone(), solution: self.training_solution(basis, mu, y0)? };
        let training = [point];
        let families = self.d.eqp.preset.families();
        let lp = assemble_training_lp(p, basis, &training, &tol, &self.ctx, &families)?;
        let violation = unit_weight_violation(&lp);
        info.unit_violation = Some(violation);
        info.tolerances = Some(tol);
        if violation > 1e-12 {
            warn!("unit weights violate the training LP by {violation:e}; using unit weights");
            info.eqp_fallback = true;
            return Ok(EqpWeights::ones(ne));
        }
        self.d.counters.record(SolveKind::Lp);
        let outcome = train_weights(&lp);
        info.eqp_fallback = outcome.fallback;
        info.lp_iterations = Some(outcome.lp_iterations);
        if self.d.dump_lp {
            let a = &lp.instance.a;
            self.d.lp_dumps.push(LpDump {
                major: self.major,
                iteration: self.iteration,
                c: lp.instance.c.iter().copied().collect(),
                a: (0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect(),
                b: lp.instance.b.iter().copied().collect(),
                rows: lp.rows.clone(),
                status: outcome.status,
                rho: outcome.weights.rho.iter().copied().collect(),
            });
        }
        if self.d.eqp.audit {
            let t0 = Instant::now();
            info.audit = audit_weights(p, basis, &outcome.weights, &training, &lp, &self.ctx)?;
            self.d.audit_seconds += t0.elapsed().as_secs_f64();
        }
        Ok(outcome.weights)
    }

    fn hyper_gradient(&self, mu: &DVector<f64>) -> Result<DVector<f64>> {
        let c = self.center.as_ref().expect("model built before use");
        match &c.reduced {
            None => Ok(self.d.hdm.value_gradient(mu, &self.ctx)?.grad),
            Some((basis, weights, y0)) => {
                let model = HyperModel::new(self.d.problem, basis, weights)?;
                self.d.counters.record(self.reduced_kind());
                Ok(model.value_gradient_from(mu, &self.ctx, y0)?.grad)
            }
        }
    }
}

impl ModelBuilder for MajorBuilder<'_, '_> {
    fn build(&mut self, mu: &DVector<f64>, delta: f64, chi_m_prev: f64) -> Result<ModelHandle> {
        let p = self.d.problem;
        let eval = self.d.hdm.value_gradient(mu, &self.ctx)?;
        let true_value = Some(eval.f);
        let true_gradient = Some(eval.grad.clone());
        if self.d.method == Method::Hdm {
            self.center = Some(Center { mu: mu.clone(), grad: eval.grad.clone(), eval, reduced: None });
            self.iteration += 1;
            return Ok(ModelHandle {
                center: mu.clone(),
                value: true_value.unwrap(),
                gradient: true_gradient.clone().unwrap(),
                true_value,
                true_gradient,
                phi: 0.0,
                info: ModelInfo::default(),
            });
        }
        let u = eval.pair.u_star.clone();
        if self.offset.is_none() {
            self.offset = Some(u.clone());
            self.sens0 = Some(self.d.hdm.sensitivity(&u, mu)?);
        }
        let offset = self.offset.clone().unwrap();
        let basis = build_basis(
            &u,
            &offset,
            &eval.pair.lambda_star,
            self.sens0.as_ref().unwrap(),
            &self.d.store,
            self.d.eqp.pod_max,
        )?;
        let y0 = basis.coordinates(&u);
        let mut info = ModelInfo { basis_dim: Some(basis.dim()), ..ModelInfo::default() };
        let mut phi = 0.0;
        let weights = if self.d.method == Method::Eqp {
            let tol = schedule_tolerances(&self.d.schedule, chi_m_prev, delta, self.ctx.tau)?;
            phi = self.d.schedule.indicator(&tol, self.ctx.tau);
            match self.train(&basis, mu, &y0, tol, &mut info) {
                Ok(w) => w,
                Err(e) => {
                    warn!("EQP training failed ({e}); using unit weights");
                    info.eqp_fallback = true;
                    EqpWeights::ones(p.n_elements())
                }
            }
        } else {
            EqpWeights::ones(p.n_elements())
        };
        info.usage_fraction = Some(weights.usage_fraction);
        info.active_elements = Some(weights.active.len());
        let model = HyperModel::new(p, &basis, &weights)?;
        self.d.counters.record(self.reduced_kind());
        let m = model.value_gradient_from(mu, &self.ctx, &y0)?;
        debug!(
            "model at iteration {}: n = {}, usage = {:.3}, m = {:.12e}, f = {:.12e}",
            self.iteration,
            basis.dim(),
            weights.usage_fraction,
            m.f,
            eval.f
        );
        let is_new = self.center.as_ref().is_none_or(|c| c.mu != *mu);
        if is_new {
            self.d.store.push(&u, &eval.pair.lambda_star)?;
        }
        let y_center = m.y.clone();
        self.center = Some(Center { mu: mu.clone(), grad: m.grad.clone(), eval, reduced: Some((basis, weights, y_center)) });
        self.iteration += 1;
        Ok(ModelHandle { center: mu.clone(), value: m.f, gradient: m.grad, true_value, true_gradient, phi, info })
    }

    fn hessvec(&mut self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let (mu, g0) = {
            let c = self.center.as_ref().ok_or_else(|| invalid("no model built yet"))?;
            (c.mu.clone(), c.grad.clone())
        };
        let p = self.d.problem;
        let eps = self.d.eqp.fd_epsilon;
        fd_hessvec(|x| self.hyper_gradient(x), &mu, &g0, v, eps, p.param_lower(), p.param_upper())
    }

    fn true_value(&mut self, mu: &DVector<f64>) -> Result<f64> {
        Ok(self.d.hdm.value(mu, &self.ctx)?.0)
    }
}

impl Subsolver for EqpBtr<'_> {
    fn n_constraints(&self) -> usize {
        self.problem.n_constraints()
    }

    fn solve(&mut self, major: usize, mu0: &DVector<f64>, ctx: &ALContext, omega: f64) -> Result<SubproblemOutcome> {
        self.store.keep_last(if major == 0 { 0 } else { self.eqp.inherit_snapshots });
        let (lower, upper) = (self.problem.param_lower().clone(), self.problem.param_upper().clone());
        let tr = self.tr;
        let mut b = MajorBuilder {
            d: self,
            major,
            iteration: 0,
            ctx: ctx.clone(),
            offset: None,
            sens0: None,
            center: None,
        };
        let out = run(mu0, &mut b, &lower, &upper, &tr, omega)?;
        let eval = match b.center.take() {
            Some(c) if c.mu == out.mu => c.eval,
            _ => b.d.hdm.value_gradient(&out.mu, ctx)?,
        };
        let chi = criticality(&out.mu, &eval.grad, &lower, &upper)?.amax();
        Ok(SubproblemOutcome {
            mu: out.mu,
            j: eval.j,
            c: eval.c,
            chi_inf: chi,
            iterations: out.trace.len(),
            converged: out.converged,
            trace: out.trace,
        })
    }

    fn tally(&self) -> SolveTally {
        let c = self.counters;
        [c.hdm(), c.count(SolveKind::Rom), c.count(SolveKind::Eqp)]
    }

    fn overhead_seconds(&self) -> f64 {
        self.audit_seconds
    }
}

/// Per-iteration usage fractions of a trace.
pub fn usage_fractions(trace: &[TrRecord]) -> Vec<f64> {
    trace.iter().filter_map(|r| r.model.usage_fraction).collect()
}
