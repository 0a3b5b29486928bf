//! Steady 1D viscous Burgers inverse-design testbed.
//!
//! Cell-centered finite volumes on [0, 1] with the energy-conserving central
//! flux F(a, b) = (a² + b²)/4, central viscous fluxes and Dirichlet data folded
//! into the first and last cells through linear ghost states. Each cell is one
//! element owning one state; its neighbor set is the adjacent cells.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::system::{
    self, ElementConstraints, ElementResidual, ElementScalar, Problem,
};

pub const SLACK_UPPER: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrand {
    /// ∫ u
    Linear,
    /// ∫ u²
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    Equal,
    LessEqual,
    GreaterEqual,
}

/// An integral side constraint. The right-hand side is `rhs` when given,
/// otherwise `rhs_scale` times the integral at the target parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub integrand: Integrand,
    pub sense: Sense,
    #[serde(default)]
    pub rhs: Option<f64>,
    #[serde(default = "one")]
    pub rhs_scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BurgersConfig {
    pub n_cells: usize,
    pub viscosity: f64,
    pub n_design: usize,
    pub u_left: f64,
    pub u_right: f64,
    /// Gaussian bump width; defaults to 0.5 / n_design.
    pub bump_width: Option<f64>,
    pub design_lower: f64,
    pub design_upper: f64,
    /// Parameters generating the target state; drawn from `seed` when absent.
    pub mu_true: Option<Vec<f64>>,
    pub seed: u64,
    pub constraints: Vec<ConstraintSpec>,
}

impl Default for BurgersConfig {
    fn default() -> Self {
        Self {
            n_cells: 128,
            viscosity: 0.05,
            n_design: 8,
            u_left: 1.0,
            u_right: 0.5,
            bump_width: None,
            design_lower: -2.0,
            design_upper: 2.0,
            mu_true: None,
            seed: 7,
            constraints: vec![
                ConstraintSpec {
                    integrand: Integrand::Linear,
                    sense: Sense::Equal,
                    rhs: None,
                    rhs_scale: 0.98,
                },
                ConstraintSpec {
                    integrand: Integrand::Quadratic,
                    sense: Sense::LessEqual,
                    rhs: None,
                    rhs_scale: 1.01,
                },
            ],
        }
    }
}

impl BurgersConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cells < 4 {
            return Err(invalid(format!("n_cells must be at least 4, got {}", self.n_cells)));
        }
        if !(self.viscosity > 0.0) || !self.viscosity.is_finite() {
            return Err(invalid("viscosity must be positive"));
        }
        if !(self.design_lower.is_finite() && self.design_upper.is_finite())
            || self.design_lower > self.design_upper
        {
            return Err(invalid("design bounds must be finite with lower <= upper"));
        }
        if let Some(w) = self.bump_width {
            if !(w > 0.0) {
                return Err(invalid("bump width must be positive"));
            }
        }
        if let Some(m) = &self.mu_true {
            if m.len() != self.n_design {
                return Err(invalid("mu_true length differs from n_design"));
            }
            if m.iter().any(|v| *v < self.design_lower || *v > self.design_upper) {
                return Err(invalid("mu_true outside the design bounds"));
            }
        }
        for c in &self.constraints {
            if !c.rhs_scale.is_finite() || c.rhs.is_some_and(|r| !r.is_finite()) {
                return Err(invalid("constraint right-hand side must be finite"));
            }
        }
        Ok(())
    }

    /// Target design parameters: explicit, or seeded uniform draws in the
    /// middle half of the design box.
    pub fn target_design(&self) -> Vec<f64> {
        if let Some(m) = &self.mu_true {
            return m.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mid = 0.5 * (self.design_lower + self.design_upper);
        let half = 0.25 * (self.design_upper - self.design_lower);
        (0..self.n_design)
            .map(|_| mid + half * rng.gen_range(-1.0..=1.0))
            .collect()
    }

    pub fn n_slacks(&self) -> usize {
        self.constraints.iter().filter(|c| c.sense != Sense::Equal).count()
    }
}

/// Placement of slack entries appended after the design parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SlackLayout {
    /// For each constraint, the index into μ of its slack, if it has one.
    pub slack_of: Vec<Option<usize>>,
}

impl SlackLayout {
    fn new(n_design: usize, constraints: &[ConstraintSpec]) -> Self {
        let mut next = n_design;
        let slack_of = constraints
            .iter()
            .map(|c| {
                (c.sense != Sense::Equal).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        Self { slack_of }
    }
}

type Forcing = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// The assembled testbed problem.
#[derive(Clone)]
pub struct Burgers {
    n: usize,
    h: f64,
    nu: f64,
    u_left: f64,
    u_right: f64,
    centers: Vec<f64>,
    /// h·φ_p(x_e), `n × n_design`
    bumps: DMatrix<f64>,
    forcing: Option<Vec<f64>>,
    target: DVector<f64>,
    specs: Vec<ConstraintSpec>,
    rhs: Vec<f64>,
    layout: SlackLayout,
    lower: DVector<f64>,
    upper: DVector<f64>,
    dofs: Vec<[usize; 1]>,
    nbrs: Vec<Vec<usize>>,
}

impl fmt::Debug for Burgers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Burgers")
            .field("n_cells", &self.n)
            .field("viscosity", &self.nu)
            .field("n_params", &self.lower.len())
            .field("rhs", &self.rhs)
            .finish()
    }
}

/// Target state and the integrals recorded at the target parameters.
#[derive(Debug, Clone)]
pub struct Target {
    pub state: DVector<f64>,
    pub mu: DVector<f64>,
    /// ∫ u at the target.
    pub volume: f64,
    /// ∫ u² at the target.
    pub quadratic: f64,
}

impl Burgers {
    /// Discretization only: zero target state and zero constraint right-hand sides.
    pub fn from_config(config: &BurgersConfig) -> Result<Self> {
        config.validate()?;
        let n = config.n_cells;
        let h = 1.0 / n as f64;
        let centers: Vec<f64> = (0..n).map(|e| (e as f64 + 0.5) * h).collect();
        let nd = config.n_design;
        let width = config.bump_width.unwrap_or(0.5 / nd.max(1) as f64);
        let bumps = DMatrix::from_fn(n, nd, |e, p| {
            let c = (p as f64 + 0.5) / nd as f64;
            let z = (centers[e] - c) / width;
            h * (-z * z).exp()
        });
        let layout = SlackLayout::new(nd, &config.constraints);
        let np = nd + config.n_slacks();
        let mut lower = DVector::from_element(np, 0.0);
        let mut upper = DVector::from_element(np, SLACK_UPPER);
        for p in 0..nd {
            lower[p] = config.design_lower;
            upper[p] = config.design_upper;
        }
        let nbrs = (0..n)
            .map(|e| match e {
                0 => vec![1],
                _ if e == n - 1 => vec![n - 2],
                _ => vec![e - 1, e + 1],
            })
            .collect();
        Ok(Self {
            n,
            h,
            nu: config.viscosity,
            u_left: config.u_left,
            u_right: config.u_right,
            centers,
            bumps,
            forcing: None,
            target: DVector::zeros(n),
            specs: config.constraints.clone(),
            rhs: vec![0.0; config.constraints.len()],
            layout,
            lower,
            upper,
            dofs: (0..n).map(|e| [e]).collect(),
            nbrs,
        })
    }

    /// Adds a manufactured forcing f(x), integrated over each cell with
    /// Simpson's rule.
    pub fn with_forcing(mut self, f: Forcing) -> Self {
        let h = self.h;
        self.forcing = Some(
            self.centers
                .iter()
                .map(|&x| h / 6.0 * (f(x - 0.5 * h) + 4.0 * f(x) + f(x + 0.5 * h)))
                .collect(),
        );
        self
    }

    /// Adds a fixed per-cell source (already integrated over each cell).
    pub fn with_cell_sources(mut self, sources: Vec<f64>) -> Self {
        self.forcing = Some(sources);
        self
    }

    pub fn with_target(mut self, target: DVector<f64>) -> Self {
        self.target = target;
        self
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    pub fn layout(&self) -> &SlackLayout {
        &self.layout
    }

    pub fn constraint_rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn n_design(&self) -> usize {
        self.bumps.ncols()
    }

    /// ∫ u
    pub fn volume(&self, u: &DVector<f64>) -> f64 {
        self.h * u.sum()
    }

    /// ∫ u²
    pub fn quadratic(&self, u: &DVector<f64>) -> f64 {
        self.h * u.norm_squared()
    }

    /// Starting parameters: zero design, zero slack.
    pub fn initial_parameters(&self) -> DVector<f64> {
        DVector::from_fn(self.lower.len(), |p, _| 0.0f64.clamp(self.lower[p], self.upper[p]))
    }

    /// Extends design parameters with zero slacks.
    pub fn full_parameters(&self, design: &[f64]) -> DVector<f64> {
        let mut mu = DVector::zeros(self.lower.len());
        for (p, v) in design.iter().enumerate() {
            mu[p] = *v;
        }
        mu
    }

    /// d_k(u) for each constraint, before slack subtraction: the signed
    /// distance to the right-hand side that must be ≥ 0 for inequalities.
    pub fn constraint_margins(&self, u: &DVector<f64>) -> Vec<f64> {
        self.specs
            .iter()
            .zip(&self.rhs)
            .map(|(s, r)| {
                let v = match s.integrand {
                    Integrand::Linear => self.volume(u),
                    Integrand::Quadratic => self.quadratic(u),
                };
                match s.sense {
                    Sense::Equal | Sense::GreaterEqual => v - r,
                    Sense::LessEqual => r - v,
                }
            })
            .collect()
    }

    fn source(&self, e: usize, mu: &DVector<f64>) -> f64 {
        let mut s: f64 = (0..self.bumps.ncols()).map(|p| mu[p] * self.bumps[(e, p)]).sum();
        if let Some(f) = &self.forcing {
            s += f[e];
        }
        s
    }
}

/// Builds the testbed: solves at the target parameters, records the target
/// state and fixes the constraint right-hand sides.
pub fn make_problem(config: &BurgersConfig) -> Result<Burgers> {
    let mut problem = Burgers::from_config(config)?;
    let target = generate_target(config, &config.target_design())?;
    for (k, spec) in config.constraints.iter().enumerate() {
        problem.rhs[k] = spec.rhs.unwrap_or(
            spec.rhs_scale
                * match spec.integrand {
                    Integrand::Linear => target.volume,
                    Integrand::Quadratic => target.quadratic,
                },
        );
    }
    Ok(problem.with_target(target.state))
}

/// Solves the testbed state equation at the given design parameters.
pub fn generate_target(config: &BurgersConfig, mu_true: &[f64]) -> Result<Target> {
    let problem = Burgers::from_config(config)?;
    if mu_true.len() != config.n_design {
        return Err(invalid("mu_true length differs from n_design"));
    }
    let mu = problem.full_parameters(mu_true);
    let state = system::solve_primal(&problem, &mu, &problem.initial_state())?;
    Ok(Target {
        volume: problem.volume(&state),
        quadratic: problem.quadratic(&state),
        state,
        mu,
    })
}

impl Problem for Burgers {
    fn n_state(&self) -> usize {
        self.n
    }
    fn n_params(&self) -> usize {
        self.lower.len()
    }
    fn n_constraints(&self) -> usize {
        self.specs.len()
    }
    fn n_elements(&self) -> usize {
        self.n
    }
    fn param_lower(&self) -> &DVector<f64> {
        &self.lower
    }
    fn param_upper(&self) -> &DVector<f64> {
        &self.upper
    }
    fn initial_state(&self) -> DVector<f64> {
        DVector::from_fn(self.n, |e, _| {
            let x = self.centers[e];
            self.u_left * (1.0 - x) + self.u_right * x
        })
    }
    fn element_dofs(&self, e: usize) -> &[usize] {
        &self.dofs[e]
    }
    fn neighbor_dofs(&self, e: usize) -> &[usize] {
        &self.nbrs[e]
    }
    fn element_volume(&self, _e: usize) -> f64 {
        self.h
    }

    fn element_residual(
        &self,
        e: usize,
        ue: &DVector<f64>,
        un: &DVector<f64>,
        mu: &DVector<f64>,
    ) -> ElementResidual {
        let u = ue[0];
        let k = self.nu / self.h;
        let (a, b, da_du, db_du) = if e == 0 {
            (2.0 * self.u_left - u, un[0], -1.0, 0.0)
        } else if e == self.n - 1 {
            (un[0], 2.0 * self.u_right - u, 0.0, -1.0)
        } else {
            (un[0], un[1], 0.0, 0.0)
        };
        let value = (b * b - a * a) / 4.0 - k * (b - 2.0 * u + a) - self.source(e, mu);
        // ∂/∂a and ∂/∂b of the interior stencil
        let dra = -a / 2.0 - k;
        let drb = b / 2.0 - k;
        let dru = 2.0 * k + dra * da_du + drb * db_du;
        let d_neighbors = if e == 0 {
            DMatrix::from_element(1, 1, drb)
        } else if e == self.n - 1 {
            DMatrix::from_element(1, 1, dra)
        } else {
            DMatrix::from_row_slice(1, 2, &[dra, drb])
        };
        let np = self.lower.len();
        let d_params = DMatrix::from_fn(1, np, |_, p| {
            if p < self.bumps.ncols() {
                -self.bumps[(e, p)]
            } else {
                0.0
            }
        });
        ElementResidual {
            value: DVector::from_element(1, value),
            d_state: DMatrix::from_element(1, 1, dru),
            d_neighbors,
            d_params,
        }
    }

    fn element_objective(&self, e: usize, ue: &DVector<f64>, _mu: &DVector<f64>) -> ElementScalar {
        let d = ue[0] - self.target[e];
        ElementScalar {
            value: 0.5 * self.h * d * d,
            d_state: DVector::from_element(1, self.h * d),
            d_params: DVector::zeros(self.lower.len()),
        }
    }

    fn element_constraints(
        &self,
        _e: usize,
        ue: &DVector<f64>,
        mu: &DVector<f64>,
    ) -> ElementConstraints {
        let u = ue[0];
        let h = self.h;
        let nc = self.specs.len();
        let mut value = DVector::zeros(nc);
        let mut d_state = DMatrix::zeros(nc, 1);
        let mut d_params = DMatrix::zeros(nc, self.lower.len());
        for (k, spec) in self.specs.iter().enumerate() {
            let (g, dg) = match spec.integrand {
                Integrand::Linear => (u, 1.0),
                Integrand::Quadratic => (u * u, 2.0 * u),
            };
            let sign = if spec.sense == Sense::LessEqual { -1.0 } else { 1.0 };
            value[k] = sign * h * (g - self.rhs[k]);
            d_state[(k, 0)] = sign * h * dg;
            if let Some(s) = self.layout.slack_of[k] {
                value[k] -= h * mu[s];
                d_params[(k, s)] = -h;
            }
        }
        ElementConstraints { value, d_state, d_params }
    }
}
