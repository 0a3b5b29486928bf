//! Bound-constrained trust-region method with inexact gradients.
//!
//! The trust region is an ∞-norm ball, so intersecting it with the parameter
//! box gives another box. Models are quadratic: m(μ_k + s) = m₀ + gᵀs + ½sᵀHs,
//! with H assembled column by column from the caller's Hessian-vector product.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::eqp::{EqpTolerances, FamilyAudit};
use crate::error::{invalid, Result};

/// Fraction-of-Cauchy-decrease constant.
pub const KAPPA_FCD: f64 = 0.25;
/// Power-iteration steps used to bound ‖H‖.
pub const POWER_STEPS: usize = 20;
/// Relative residual at which truncated CG stops.
pub const CG_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrConfig {
    pub delta0: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub delta_max: f64,
    pub max_iters: usize,
    pub kappa_hat: f64,
}

impl Default for TrConfig {
    fn default() -> Self {
        Self {
            delta0: 0.1,
            eta1: 0.1,
            eta2: 0.75,
            gamma1: 0.5,
            gamma2: 1.0,
            delta_max: 10.0,
            max_iters: 50,
            kappa_hat: 1e-6,
        }
    }
}

impl TrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma1 > 0.0 && self.gamma1 <= self.gamma2 && self.gamma2 <= 1.0) {
            return Err(invalid("trust region requires 0 < gamma1 <= gamma2 <= 1"));
        }
        if !(self.eta1 > 0.0 && self.eta1 < self.eta2 && self.eta2 < 1.0) {
            return Err(invalid("trust region requires 0 < eta1 < eta2 < 1"));
        }
        if !(self.delta_max > 0.0 && self.delta0 > 0.0 && self.delta0 <= self.delta_max) {
            return Err(invalid("trust region requires 0 < delta0 <= delta_max"));
        }
        if !(self.kappa_hat > 0.0) || self.max_iters == 0 {
            return Err(invalid("kappa_hat and max_iters must be positive"));
        }
        Ok(())
    }

    /// New radius for a given ratio.
    pub fn update_radius(&self, delta: f64, rho: f64) -> f64 {
        if !(rho >= self.eta1) {
            self.gamma1 * delta
        } else if rho < self.eta2 {
            delta
        } else {
            (2.0 * delta).min(self.delta_max)
        }
    }
}

fn check_box(lower: &DVector<f64>, upper: &DVector<f64>, n: usize) -> Result<()> {
    if lower.len() != n || upper.len() != n {
        return Err(invalid("bounds and vector lengths differ"));
    }
    if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
        return Err(invalid("lower bound exceeds upper bound"));
    }
    Ok(())
}

/// Componentwise clamp onto [lower, upper].
pub fn project_box(x: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> Result<DVector<f64>> {
    check_box(lower, upper, x.len())?;
    Ok(DVector::from_fn(x.len(), |i, _| x[i].max(lower[i]).min(upper[i])))
}

/// χ = P(μ − g) − μ.
pub fn criticality(
    mu: &DVector<f64>,
    grad: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> Result<DVector<f64>> {
    if grad.len() != mu.len() {
        return Err(invalid("gradient and parameter lengths differ"));
    }
    Ok(project_box(&(mu - grad), lower, upper)? - mu)
}

/// Extra information a model builder reports about its model.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ModelInfo {
    pub basis_dim: Option<usize>,
    pub usage_fraction: Option<f64>,
    pub active_elements: Option<usize>,
    pub eqp_fallback: bool,
    pub lp_iterations: Option<usize>,
    /// Worst relative violation of the training LP rows by ρ = 1.
    pub unit_violation: Option<f64>,
    pub tolerances: Option<EqpTolerances>,
    pub audit: Vec<FamilyAudit>,
}

/// A quadratic model at a center. The Hessian is supplied separately
/// through [`ModelBuilder::hessvec`].
#[derive(Debug, Clone)]
pub struct ModelHandle {
    pub center: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    /// F(μ_k), if the builder computed it.
    pub true_value: Option<f64>,
    /// ∇F(μ_k), if the builder computed it.
    pub true_gradient: Option<DVector<f64>>,
    /// Error indicator φ_k.
    pub phi: f64,
    pub info: ModelInfo,
}

/// Supplies models and true objective values.
pub trait ModelBuilder {
    /// Builds the model at `mu`; `chi_m_prev` is ‖χ_m‖∞ of the previous
    /// model at its center (∞ on the first iteration).
    fn build(&mut self, mu: &DVector<f64>, delta: f64, chi_m_prev: f64) -> Result<ModelHandle>;
    /// Hessian-vector product of the most recently built model.
    fn hessvec(&mut self, v: &DVector<f64>) -> Result<DVector<f64>>;
    /// True objective F(μ).
    fn true_value(&mut self, mu: &DVector<f64>) -> Result<f64>;
}

/// Dense quadratic model in step coordinates s = μ − μ_k.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

impl Quadratic {
    pub fn eval(&self, s: &DVector<f64>) -> f64 {
        self.value + self.gradient.dot(s) + 0.5 * s.dot(&(&self.hessian * s))
    }

    fn grad_at(&self, s: &DVector<f64>) -> DVector<f64> {
        &self.gradient + &self.hessian * s
    }
}

/// Assembles the symmetric part of H from n Hessian-vector products.
pub fn dense_hessian(n: usize, mut hv: impl FnMut(&DVector<f64>) -> Result<DVector<f64>>) -> Result<DMatrix<f64>> {
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        let col = hv(&e)?;
        if col.len() != n {
            return Err(invalid("Hessian-vector product has wrong length"));
        }
        h.set_column(i, &col);
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// β = 1 + ‖H‖₂ estimated by power iteration.
pub fn curvature_bound(h: &DMatrix<f64>) -> f64 {
    let n = h.nrows();
    if n == 0 {
        return 1.0;
    }
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * i as f64);
    v /= v.norm();
    let mut est = 0.0;
    for _ in 0..POWER_STEPS {
        let w = h * &v;
        est = w.norm();
        if est == 0.0 {
            break;
        }
        v = w / est;
    }
    1.0 + est
}

/// The trust region intersected with the box.
fn region(mu: &DVector<f64>, delta: f64, lower: &DVector<f64>, upper: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let lo = DVector::from_fn(mu.len(), |i, _| lower[i].max(mu[i] - delta));
    let hi = DVector::from_fn(mu.len(), |i, _| upper[i].min(mu[i] + delta));
    (lo, hi)
}

/// First local minimizer of the model along P(μ_k − t g) over the
/// region box. Returns the step s.
pub fn generalized_cauchy_point(
    q: &Quadratic,
    mu: &DVector<f64>,
    delta: f64,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> Result<DVector<f64>> {
    if !(delta > 0.0) {
        return Err(invalid("trust-region radius must be positive"));
    }
    check_box(lower, upper, mu.len())?;
    let n = mu.len();
    let (lo, hi) = region(mu, delta, lower, upper);
    let g = &q.gradient;
    let mut s = DVector::zeros(n);
    if g.amax() == 0.0 {
        return Ok(s);
    }
    // Breakpoint of each component along −g.
    let tb: Vec<f64> = (0..n)
        .map(|i| {
            if g[i] > 0.0 {
                (mu[i] - lo[i]) / g[i]
            } else if g[i] < 0.0 {
                (mu[i] - hi[i]) / g[i]
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let mut d = DVector::from_fn(n, |i, _| if tb[i] > 0.0 { -g[i] } else { 0.0 });
    let mut breaks: Vec<f64> = tb.iter().copied().filter(|t| *t > 0.0 && t.is_finite()).collect();
    breaks.sort_by(|a, b| a.total_cmp(b));
    breaks.dedup();
    let mut t_prev = 0.0;
    let mut next = breaks.into_iter();
    loop {
        if d.amax() == 0.0 {
            break;
        }
        let t_next = next.next().unwrap_or(f64::INFINITY);
        let slope = q.grad_at(&s).dot(&d);
        if slope >= 0.0 {
            break;
        }
        let curv = d.dot(&(&q.hessian * &d));
        let span = t_next - t_prev;
        if curv > 0.0 && -slope / curv < span {
            s.axpy(-slope / curv, &d, 1.0);
            break;
        }
        if !span.is_finite() {
            // Unbounded descent cannot happen on a bounded region.
            break;
        }
        s.axpy(span, &d, 1.0);
        for i in 0..n {
            if tb[i] == t_next {
                d[i] = 0.0;
                s[i] = if g[i] > 0.0 { lo[i] - mu[i] } else { hi[i] - mu[i] };
            }
        }
        t_prev = t_next;
    }
    Ok(clamp_step(&s, mu, &lo, &hi))
}

fn clamp_step(s: &DVector<f64>, mu: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(s.len(), |i, _| (mu[i] + s[i]).max(lo[i]).min(hi[i]) - mu[i])
}

/// Why truncated CG stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CgExit {
    /// Zero gradient or no free variables at the Cauchy point.
    Cauchy,
    Converged,
    Face,
    NegativeCurvature,
    IterationLimit,
}

/// Result of the subproblem solve.
#[derive(Debug, Clone)]
pub struct SubproblemResult {
    pub step: DVector<f64>,
    pub cauchy_step: DVector<f64>,
    pub exit: CgExit,
    pub cg_iterations: usize,
}

/// Cauchy point followed by truncated CG on the variables left free.
pub fn solve_subproblem(
    q: &Quadratic,
    mu: &DVector<f64>,
    delta: f64,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> Result<SubproblemResult> {
    let sc = generalized_cauchy_point(q, mu, delta, lower, upper)?;
    let (lo, hi) = region(mu, delta, lower, upper);
    let n = mu.len();
    let free: Vec<bool> = (0..n)
        .map(|i| {
            let x = mu[i] + sc[i];
            x > lo[i] && x < hi[i]
        })
        .collect();
    let mask = |v: DVector<f64>| DVector::from_fn(n, |i, _| if free[i] { v[i] } else { 0.0 });
    let mut s = sc.clone();
    let mut r = mask(-q.grad_at(&s));
    let r0 = r.norm();
    let mut result = SubproblemResult { step: sc.clone(), cauchy_step: sc.clone(), exit: CgExit::Cauchy, cg_iterations: 0 };
    if r0 == 0.0 {
        return Ok(result);
    }
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    let mut exit = CgExit::IterationLimit;
    let mut iters = 0;
    for _ in 0..2 * n {
        iters += 1;
        let hp = mask(&q.hessian * &p);
        let curv = p.dot(&hp);
        let face = (0..n)
            .filter(|&i| p[i] != 0.0)
            .map(|i| {
                let x = mu[i] + s[i];
                if p[i] > 0.0 { (hi[i] - x) / p[i] } else { (lo[i] - x) / p[i] }
            })
            .fold(f64::INFINITY, f64::min)
            .max(0.0);
        if curv <= 0.0 {
            if face.is_finite() {
                s.axpy(face, &p, 1.0);
            }
            exit = CgExit::NegativeCurvature;
            break;
        }
        let alpha = rr / curv;
        if alpha >= face {
            s.axpy(face, &p, 1.0);
            exit = CgExit::Face;
            break;
        }
        s.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &hp, 1.0);
        let rr_new = r.dot(&r);
        if rr_new.sqrt() <= CG_TOL * r0 {
            exit = CgExit::Converged;
            break;
        }
        p = &r + &p * (rr_new / rr);
        rr = rr_new;
    }
    let s = clamp_step(&s, mu, &lo, &hi);
    if q.eval(&s) <= q.eval(&sc) {
        result.step = s;
        result.exit = exit;
    }
    result.cg_iterations = iters;
    Ok(result)
}

/// One trust-region iteration as recorded in the trace.
#[derive(Debug, Clone, Serialize)]
pub struct TrRecord {
    pub iteration: usize,
    pub center: Vec<f64>,
    pub delta: f64,
    pub delta_next: f64,
    pub f_center: f64,
    pub m_center: f64,
    pub chi_m_inf: f64,
    pub chi_m_norm: f64,
    /// ‖χ(μ_k)‖∞ from the true gradient, when available.
    pub chi_inf: Option<f64>,
    /// ‖∇m(μ_k) − ∇F(μ_k)‖₂, when available.
    pub grad_error: Option<f64>,
    pub chi_gap: Option<f64>,
    pub phi: f64,
    pub beta: f64,
    pub predicted: f64,
    pub actual: f64,
    pub ratio: Option<f64>,
    pub accepted: bool,
    /// Right-hand side κ‖χ_m‖ min(‖χ_m‖/β, Δ) of the Cauchy-decrease test.
    pub cauchy_bound: f64,
    pub cg_exit: CgExit,
    pub cg_iterations: usize,
    pub anomaly: Option<String>,
    pub model: ModelInfo,
}

impl TrRecord {
    pub fn cauchy_decrease_holds(&self) -> bool {
        self.predicted >= self.cauchy_bound * (1.0 - 1e-10) - 1e-15
    }
}

#[derive(Debug, Clone)]
pub struct TrOutcome {
    pub mu: DVector<f64>,
    pub f: f64,
    /// ‖χ‖∞ at the final center when it was evaluated there.
    pub chi_inf: Option<f64>,
    pub chi_m_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Vec<TrRecord>,
}

/// Iterates model build, subproblem, and acceptance until the criticality
/// at a center falls to `omega` or the iteration cap is hit. The stop test
/// uses the true gradient when the builder provides it, else χ_m.
pub fn run(
    mu0: &DVector<f64>,
    builder: &mut dyn ModelBuilder,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    config: &TrConfig,
    omega: f64,
) -> Result<TrOutcome> {
    config.validate()?;
    check_box(lower, upper, mu0.len())?;
    if project_box(mu0, lower, upper)? != *mu0 {
        return Err(invalid("initial parameters lie outside the box"));
    }
    let n = mu0.len();
    let mut mu = mu0.clone();
    let mut delta = config.delta0;
    let mut chi_prev = f64::INFINITY;
    let mut f_known: Option<f64> = None;
    let mut trace = Vec::new();
    let mut last_chi: Option<f64> = None;
    let mut last_chi_m = f64::INFINITY;
    for k in 0..=config.max_iters {
        if k == config.max_iters {
            break;
        }
        let model = builder.build(&mu, delta, chi_prev)?;
        let f_center = match (model.true_value, f_known) {
            (Some(f), _) => f,
            (None, Some(f)) => f,
            (None, None) => builder.true_value(&mu)?,
        };
        f_known = Some(f_center);
        let chi_m = criticality(&mu, &model.gradient, lower, upper)?;
        let chi_m_inf = chi_m.amax();
        let chi_m_norm = chi_m.norm();
        last_chi_m = chi_m_norm;
        let (chi_inf, grad_error, chi_gap) = match &model.true_gradient {
            Some(g) => {
                let chi = criticality(&mu, g, lower, upper)?;
                (Some(chi.amax()), Some((&model.gradient - g).norm()), Some((&chi_m - &chi).norm()))
            }
            None => (None, None, None),
        };
        last_chi = Some(chi_inf.unwrap_or(chi_m_inf));
        if last_chi.unwrap() <= omega {
            return Ok(TrOutcome { mu, f: f_center, chi_inf, chi_m_norm, converged: true, iterations: k, trace });
        }
        let hessian = dense_hessian(n, |v| builder.hessvec(v))?;
        let q = Quadratic { value: model.value, gradient: model.gradient.clone(), hessian };
        let beta = curvature_bound(&q.hessian);
        let sub = solve_subproblem(&q, &mu, delta, lower, upper)?;
        let predicted = q.value - q.eval(&sub.step);
        let cauchy_bound = KAPPA_FCD * chi_m_norm * (chi_m_norm / beta).min(delta);
        let mut record = TrRecord {
            iteration: k,
            center: mu.iter().copied().collect(),
            delta,
            delta_next: delta,
            f_center,
            m_center: model.value,
            chi_m_inf,
            chi_m_norm,
            chi_inf,
            grad_error,
            chi_gap,
            phi: model.phi,
            beta,
            predicted,
            actual: 0.0,
            ratio: None,
            accepted: false,
            cauchy_bound,
            cg_exit: sub.exit,
            cg_iterations: sub.cg_iterations,
            anomaly: None,
            model: model.info,
        };
        chi_prev = chi_m_inf;
        if !(predicted > 0.0) {
            debug!("trust-region iteration {k}: nonpositive predicted decrease {predicted:e}");
            record.anomaly = Some("nonpositive predicted decrease".into());
            delta *= config.gamma1;
            record.delta_next = delta;
            trace.push(record);
            continue;
        }
        let candidate = &mu + &sub.step;
        let f_candidate = builder.true_value(&candidate)?;
        let actual = f_center - f_candidate;
        let ratio = actual / predicted;
        record.actual = actual;
        record.ratio = Some(ratio);
        record.accepted = ratio >= config.eta1;
        delta = config.update_radius(delta, ratio);
        record.delta_next = delta;
        if record.accepted {
            mu = candidate;
            f_known = Some(f_candidate);
            last_chi = None;
        }
        trace.push(record);
    }
    Ok(TrOutcome {
        mu,
        f: f_known.unwrap_or(f64::NAN),
        chi_inf: last_chi,
        chi_m_norm: last_chi_m,
        converged: false,
        iterations: config.max_iters,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_vec(x.to_vec())
    }

    #[test]
    fn projection_examples() {
        let lo = v(&[0.0, 0.0]);
        let hi = v(&[1.0, 1.0]);
        assert_eq!(project_box(&v(&[2.0, -1.0]), &lo, &hi).unwrap(), v(&[1.0, 0.0]));
        assert_eq!(project_box(&v(&[0.3, 0.7]), &lo, &hi).unwrap(), v(&[0.3, 0.7]));
        assert!(project_box(&v(&[0.0, 0.0]), &v(&[1.0, 0.0]), &v(&[0.0, 1.0])).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = v(&[rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]);
            let p = project_box(&x, &lo, &hi).unwrap();
            assert_eq!(project_box(&p, &lo, &hi).unwrap(), p);
        }
    }

    #[test]
    fn criticality_examples() {
        let lo = v(&[0.0, 0.0]);
        let hi = v(&[1.0, 1.0]);
        let mu = v(&[0.5, 0.5]);
        assert_eq!(criticality(&mu, &v(&[0.0, 0.0]), &lo, &hi).unwrap(), v(&[0.0, 0.0]));
        assert!((criticality(&mu, &v(&[0.1, -0.2]), &lo, &hi).unwrap() - v(&[-0.1, 0.2])).amax() <= 1e-15);
        let at_lower = v(&[0.0, 0.5]);
        let chi = criticality(&at_lower, &v(&[0.3, 0.1]), &lo, &hi).unwrap();
        assert_eq!(chi[0], 0.0);
    }

    #[test]
    fn radius_table() {
        let c = TrConfig::default();
        assert_eq!(c.update_radius(0.4, 0.05), 0.2);
        assert_eq!(c.update_radius(0.4, 0.5), 0.4);
        assert_eq!(c.update_radius(0.4, 1.0), 0.8);
        assert_eq!(c.update_radius(8.0, 1.0), 10.0);
        assert_eq!(c.update_radius(0.4, f64::NAN), 0.2);
    }

    fn quad(h: &[f64], g: &[f64]) -> Quadratic {
        let n = g.len();
        Quadratic { value: 0.0, gradient: v(g), hessian: DMatrix::from_row_slice(n, n, h) }
    }

    #[test]
    fn cauchy_point_exact_line_minimizer() {
        // m(μ) = ½‖μ‖² around center c: g = c, minimizer along −g is at t = 1.
        let c = v(&[0.3, -0.2]);
        let q = quad(&[1.0, 0.0, 0.0, 1.0], &[0.3, -0.2]);
        let big = v(&[-100.0, -100.0]);
        let s = generalized_cauchy_point(&q, &c, 50.0, &big, &(-&big)).unwrap();
        assert!((&s + &c).amax() <= 1e-15);
    }

    #[test]
    fn cauchy_point_on_small_radius_matches_dense_search() {
        let q = quad(&[2.0, 0.5, 0.5, 1.0], &[1.0, -3.0]);
        let mu = v(&[0.0, 0.0]);
        let lo = v(&[-1.0, -1.0]);
        let hi = v(&[1.0, 1.0]);
        let delta = 0.05;
        let s = generalized_cauchy_point(&q, &mu, delta, &lo, &hi).unwrap();
        // Dense search along the projected path.
        let mut best = (f64::INFINITY, DVector::zeros(2));
        for i in 0..=200_000 {
            let t = i as f64 * 1e-6;
            let p = DVector::from_fn(2, |j, _| (-t * q.gradient[j]).clamp(-delta, delta));
            let val = q.eval(&p);
            if val < best.0 {
                best = (val, p);
            }
        }
        assert!((q.eval(&s) - best.0).abs() <= 1e-9);
        assert!((s.amax() - delta).abs() <= 1e-15);
    }

    #[test]
    fn cauchy_point_fully_blocked() {
        let q = quad(&[1.0, 0.0, 0.0, 1.0], &[1.0, -1.0]);
        let mu = v(&[0.0, 1.0]);
        let s = generalized_cauchy_point(&q, &mu, 0.5, &v(&[0.0, 0.0]), &v(&[1.0, 1.0])).unwrap();
        assert_eq!(s, v(&[0.0, 0.0]));
        let chi = criticality(&mu, &q.gradient, &v(&[0.0, 0.0]), &v(&[1.0, 1.0])).unwrap();
        assert_eq!(chi.amax(), 0.0);
    }

    #[test]
    fn subproblem_reaches_newton_point() {
        let q = quad(&[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0], &[0.2, -0.1, 0.3]);
        let mu = v(&[0.0, 0.0, 0.0]);
        let big = v(&[10.0, 10.0, 10.0]);
        let r = solve_subproblem(&q, &mu, 5.0, &(-&big), &big).unwrap();
        let newton = q.hessian.clone().lu().solve(&(-&q.gradient)).unwrap();
        assert!((&r.step - newton).amax() <= 1e-10);
    }

    #[test]
    fn negative_curvature_goes_to_boundary() {
        let q = quad(&[1.0, 0.0, 0.0, -2.0], &[0.1, 0.05]);
        let mu = v(&[0.0, 0.0]);
        let big = v(&[10.0, 10.0]);
        let delta = 0.5;
        let r = solve_subproblem(&q, &mu, delta, &(-&big), &big).unwrap();
        let val = q.eval(&r.step);
        assert!(val < 0.0);
        assert!((r.step.amax() - delta).abs() <= 1e-12);
        // Grid-search oracle over the square.
        let mut best = f64::INFINITY;
        for i in 0..=400 {
            for j in 0..=400 {
                let s = v(&[-delta + i as f64 * delta / 200.0, -delta + j as f64 * delta / 200.0]);
                best = best.min(q.eval(&s));
            }
        }
        assert!(val <= best + 0.05 * best.abs());
    }

    #[test]
    fn fraction_of_cauchy_decrease_on_random_quadratics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let n = rng.gen_range(1..6);
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-2.0..2.0));
            let h = (&a + a.transpose()) * 0.5;
            let q = Quadratic { value: 0.0, gradient: DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0)), hessian: h };
            let lo = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..0.0));
            let hi = DVector::from_fn(n, |_, _| rng.gen_range(0.0..1.0));
            let mu = DVector::from_fn(n, |i, _| if rng.gen_bool(0.3) { lo[i] } else { rng.gen_range(lo[i]..=hi[i]) });
            let delta = rng.gen_range(0.01..2.0);
            let r = solve_subproblem(&q, &mu, delta, &lo, &hi).unwrap();
            let chi = criticality(&mu, &q.gradient, &lo, &hi).unwrap().norm();
            let beta = curvature_bound(&q.hessian);
            let pred = -q.eval(&r.step);
            assert!(pred >= KAPPA_FCD * chi * (chi / beta).min(delta) * (1.0 - 1e-10));
            assert!(q.eval(&r.step) <= q.eval(&r.cauchy_step) + 1e-15);
            let x = &mu + &r.step;
            for i in 0..n {
                assert!(x[i] >= lo[i].max(mu[i] - delta) - 1e-15 && x[i] <= hi[i].min(mu[i] + delta) + 1e-15);
            }
        }
    }

    /// F(μ) = ½(μ − a)ᵀA(μ − a) with exact models.
    struct Exact {
        a: DMatrix<f64>,
        target: DVector<f64>,
    }

    impl ModelBuilder for Exact {
        fn build(&mut self, mu: &DVector<f64>, _delta: f64, _chi: f64) -> Result<ModelHandle> {
            let d = mu - &self.target;
            let g = &self.a * &d;
            Ok(ModelHandle {
                center: mu.clone(),
                value: 0.5 * d.dot(&g),
                gradient: g.clone(),
                true_value: Some(0.5 * d.dot(&g)),
                true_gradient: Some(g),
                phi: 0.0,
                info: ModelInfo::default(),
            })
        }
        fn hessvec(&mut self, v: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(&self.a * v)
        }
        fn true_value(&mut self, mu: &DVector<f64>) -> Result<f64> {
            let d = mu - &self.target;
            Ok(0.5 * d.dot(&(&self.a * &d)))
        }
    }

    #[test]
    fn convex_quadratic_with_active_bound() {
        let mut b = Exact {
            a: DMatrix::from_row_slice(3, 3, &[3.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 1.0]),
            target: v(&[0.2, -0.3, 1.5]),
        };
        let lo = v(&[-1.0, -1.0, -1.0]);
        let hi = v(&[1.0, 1.0, 1.0]);
        let cfg = TrConfig { delta0: 1.0, ..TrConfig::default() };
        let out = run(&v(&[0.0, 0.0, 0.0]), &mut b, &lo, &hi, &cfg, 1e-10).unwrap();
        assert!(out.converged);
        assert!(out.iterations <= 5);
        // Third component decouples and sits on its bound.
        assert!((&out.mu - v(&[0.2, -0.3, 1.0])).amax() <= 1e-9);
        for r in &out.trace {
            assert!(r.cauchy_decrease_holds());
            assert!(r.ratio.unwrap() >= 0.75);
        }
    }

    #[test]
    fn huge_tolerance_returns_start() {
        let mut b = Exact { a: DMatrix::identity(2, 2), target: v(&[0.5, 0.5]) };
        let out = run(&v(&[0.0, 0.0]), &mut b, &v(&[-1.0, -1.0]), &v(&[1.0, 1.0]), &TrConfig::default(), 1e3).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.mu, v(&[0.0, 0.0]));
    }
}
