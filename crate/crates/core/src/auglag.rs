//! Outer augmented Lagrangian loop with multiplier and penalty updates.

use std::time::Instant;

use log::{info, warn};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::system::ALContext;
use crate::trustregion::TrRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuglagConfig {
    pub tau0: f64,
    pub scale_a: f64,
    pub pi_star: f64,
    pub omega_star: f64,
    pub max_major_iters: usize,
}

impl Default for AuglagConfig {
    fn default() -> Self {
        Self { tau0: 10.0, scale_a: 50.0, pi_star: 1e-6, omega_star: 1e-5, max_major_iters: 30 }
    }
}

impl AuglagConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0 && self.tau0.is_finite()) {
            return Err(invalid("tau0 must be positive"));
        }
        if !(self.scale_a > 1.0 && self.scale_a.is_finite()) {
            return Err(invalid("penalty scale a must exceed 1"));
        }
        if !(self.pi_star > 0.0 && self.omega_star > 0.0) {
            return Err(invalid("feasibility and optimality tolerances must be positive"));
        }
        if self.max_major_iters == 0 {
            return Err(invalid("max_major_iters must be positive"));
        }
        Ok(())
    }
}

/// θ − τc.
pub fn update_multipliers(theta: &DVector<f64>, tau: f64, c: &DVector<f64>) -> DVector<f64> {
    theta - c * tau
}

/// (π, ω) schedule state for one major iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub tau: f64,
    pub pi: f64,
    pub omega: f64,
}

impl Schedule {
    pub fn initial(tau0: f64) -> Self {
        Self { tau: tau0, pi: 1.0 / tau0, omega: tau0.powf(-0.1) }
    }

    /// Feasible branch keeps τ and tightens both tolerances; the infeasible
    /// branch raises τ and resets them.
    pub fn next(&self, feasible: bool, scale_a: f64) -> Self {
        if feasible {
            Self { tau: self.tau, pi: self.pi / self.tau.powf(0.9), omega: self.omega / self.tau }
        } else {
            let tau = scale_a * self.tau;
            Self { tau, pi: 1.0 / tau.powf(0.1), omega: 1.0 / tau }
        }
    }
}

/// What a bound-constrained subproblem solve returns.
#[derive(Debug, Clone)]
pub struct SubproblemOutcome {
    pub mu: DVector<f64>,
    pub j: f64,
    pub c: DVector<f64>,
    /// ‖χ‖∞ of the true AL gradient at `mu`.
    pub chi_inf: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TrRecord>,
}

/// Cumulative solve counts (HDM, ROM, EQP).
pub type SolveTally = [usize; 3];

pub trait Subsolver {
    fn n_constraints(&self) -> usize;
    /// Minimizes f(·; θ, τ) over the box from `mu0` to tolerance ω.
    fn solve(&mut self, major: usize, mu0: &DVector<f64>, ctx: &ALContext, omega: f64) -> Result<SubproblemOutcome>;
    fn tally(&self) -> SolveTally {
        [0; 3]
    }
    /// Seconds spent on diagnostics that should not count as cost.
    fn overhead_seconds(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MajorRecord {
    pub i: usize,
    pub theta: Vec<f64>,
    pub tau: f64,
    pub pi: f64,
    pub omega: f64,
    /// ω actually passed to the subproblem (floored at ω⋆).
    pub omega_used: f64,
    pub mu: Vec<f64>,
    pub j: f64,
    pub c: Vec<f64>,
    pub c_inf: f64,
    pub c_norm: f64,
    pub chi_inf: f64,
    pub feasible: bool,
    pub sub_iterations: usize,
    pub sub_converged: bool,
    pub tally: SolveTally,
    pub wall_time: f64,
    /// Seconds since the run started, excluding diagnostics.
    pub cost: f64,
}

#[derive(Debug, Clone)]
pub struct AuglagOutcome {
    pub majors: Vec<MajorRecord>,
    pub traces: Vec<Vec<TrRecord>>,
    pub mu: DVector<f64>,
    pub converged: bool,
    /// Message of the error that stopped the run, if any.
    pub failure: Option<String>,
    pub wall_time: f64,
}

/// Runs majors until ‖χ‖∞ ≤ ω⋆ and ‖c‖₂ ≤ π⋆ both hold. Without side
/// constraints a single subproblem is solved directly to ω⋆.
pub fn run_auglag(mu0: &DVector<f64>, config: &AuglagConfig, sub: &mut dyn Subsolver) -> Result<AuglagOutcome> {
    config.validate()?;
    let nc = sub.n_constraints();
    let start = Instant::now();
    let mut theta = DVector::zeros(nc);
    let mut sched = Schedule::initial(config.tau0);
    let mut mu = mu0.clone();
    let mut out = AuglagOutcome {
        majors: Vec::new(),
        traces: Vec::new(),
        mu: mu.clone(),
        converged: false,
        failure: None,
        wall_time: 0.0,
    };
    for i in 0..config.max_major_iters {
        let omega_used = if nc == 0 { config.omega_star } else { sched.omega.max(config.omega_star) };
        let ctx = ALContext::new(theta.clone(), sched.tau)?;
        let t0 = Instant::now();
        let res = match sub.solve(i, &mu, &ctx, omega_used) {
            Ok(r) => r,
            Err(e) => {
                warn!("major iteration {i} failed: {e}");
                out.failure = Some(e.to_string());
                break;
            }
        };
        mu = res.mu.clone();
        let c_norm = res.c.norm();
        let feasible = c_norm <= sched.pi;
        out.majors.push(MajorRecord {
            i,
            theta: theta.iter().copied().collect(),
            tau: sched.tau,
            pi: sched.pi,
            omega: sched.omega,
            omega_used,
            mu: mu.iter().copied().collect(),
            j: res.j,
            c: res.c.iter().copied().collect(),
            c_inf: res.c.amax(),
            c_norm,
            chi_inf: res.chi_inf,
            feasible,
            sub_iterations: res.iterations,
            sub_converged: res.converged,
            tally: sub.tally(),
            wall_time: t0.elapsed().as_secs_f64(),
            cost: start.elapsed().as_secs_f64() - sub.overhead_seconds(),
        });
        out.traces.push(res.trace);
        info!(
            "major {i}: j = {:.10e}, |c| = {c_norm:.3e}, |chi| = {:.3e}, tau = {:e}",
            res.j, res.chi_inf, sched.tau
        );
        if res.chi_inf <= config.omega_star && c_norm <= config.pi_star {
            out.converged = true;
            break;
        }
        if feasible {
            theta = update_multipliers(&theta, sched.tau, &res.c);
        }
        sched = sched.next(feasible, config.scale_a);
    }
    out.mu = mu;
    out.wall_time = start.elapsed().as_secs_f64();
    Ok(out)
}
