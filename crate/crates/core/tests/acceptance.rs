//! Acceptance suite. Runs every criterion, prints one line each, and exits
//! non-zero if any fails.

mod common;

use std::time::Instant;

use eqptr::auglag::{MajorRecord, Schedule};
use eqptr::burgers::{make_problem, Burgers, BurgersConfig};
use eqptr::cli::config::RunConfig;
use eqptr::cli::report::{history_csv, report_rows};
use eqptr::cli::{execute, study_cases, RunOptions, RunResult};
use eqptr::eqp::{assemble_training_lp, train_weights, EqpTolerances, EqpWeights, HyperModel, Preset, TrainingPoint};
use eqptr::eqpbtr::{build_basis, schedule_tolerances, Method, SnapshotStore, ToleranceSchedule};
use eqptr::lp::{solve_lp, LpStatus};
use eqptr::rom::{gram_schmidt, reduced_al_value_gradient, reduced_quantities, solve_reduced_all, ColumnKind};
use eqptr::system::{solve_adjoint, solve_primal, solve_sensitivity, ALContext, HdmSolver, Problem, SolveCounters};
use eqptr::trustregion::{criticality, run, ModelBuilder, ModelHandle, ModelInfo, TrConfig, TrRecord};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn testbed() -> Burgers {
    make_problem(&BurgersConfig::default()).expect("default testbed")
}

fn random_point(p: &dyn Problem, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let (lo, hi) = (p.param_lower(), p.param_upper());
    DVector::from_fn(p.n_params(), |i, _| rng.gen_range(-0.3..0.3f64).clamp(lo[i] + 0.01, hi[i] - 0.01))
}

fn random_ctx(p: &dyn Problem, rng: &mut ChaCha8Rng) -> ALContext {
    let theta = DVector::from_fn(p.n_constraints(), |_, _| rng.gen_range(-1.0..1.0));
    ALContext::new(theta, 10.0).unwrap()
}

fn central_difference(f: &mut dyn FnMut(&DVector<f64>) -> f64, mu: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(mu.len(), |i, _| {
        let mut a = mu.clone();
        let mut b = mu.clone();
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    })
}

/// Basis from full-order snapshots at two points plus the sensitivity at a third.
fn snapshot_basis(p: &dyn Problem, ctx: &ALContext, rng: &mut ChaCha8Rng) -> eqptr::rom::ReducedBasis {
    let center = random_point(p, rng);
    let offset = solve_primal(p, &center, &p.initial_state()).unwrap();
    let sens = solve_sensitivity(p, &offset, &center).unwrap();
    let mut store = SnapshotStore::default();
    for _ in 0..3 {
        let mu = random_point(p, rng);
        let u = solve_primal(p, &mu, &p.initial_state()).unwrap();
        let l = solve_adjoint(p, &u, &mu, ctx).unwrap();
        store.push(&u, &l).unwrap();
    }
    let u = solve_primal(p, &center, &p.initial_state()).unwrap();
    let l = solve_adjoint(p, &u, &center, ctx).unwrap();
    build_basis(&u, &offset, &l, &sens, &store, 20).unwrap()
}

fn criterion1() -> Outcome {
    let p = testbed();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ctx = random_ctx(&p, &mut rng);
    let counters = SolveCounters::default();
    let hdm = HdmSolver::new(&p, &counters);
    let basis = snapshot_basis(&p, &ctx, &mut rng);
    let train_mu = random_point(&p, &mut rng);
    let point = TrainingPoint { mu: train_mu.clone(), solution: solve_reduced_all(&p, &basis, &train_mu, &ctx).unwrap() };
    let lp = assemble_training_lp(&p, &basis, &[point], &EqpTolerances::uniform(1e-6), &ctx, &Preset::Full.families())
        .unwrap();
    let trained = train_weights(&lp);
    check(!trained.fallback, "training LP failed")?;
    let hyper = HyperModel::new(&p, &basis, &trained.weights).unwrap();
    let h = 1e-5;
    let mut worst = [0.0f64; 3];
    for _ in 0..8 {
        let mu = random_point(&p, &mut rng);
        let g = hdm.value_gradient(&mu, &ctx).unwrap().grad;
        let fd = central_difference(&mut |m| hdm.value(m, &ctx).unwrap().0, &mu, h);
        worst[0] = worst[0].max(rel(&g, &fd));
        let g = reduced_al_value_gradient(&p, &basis, &mu, &ctx).unwrap().grad;
        let fd = central_difference(&mut |m| reduced_al_value_gradient(&p, &basis, m, &ctx).unwrap().f, &mu, h);
        worst[1] = worst[1].max(rel(&g, &fd));
        let g = hyper.value_gradient(&mu, &ctx).unwrap().grad;
        let fd = central_difference(&mut |m| hyper.value(m, &ctx).unwrap(), &mu, h);
        worst[2] = worst[2].max(rel(&g, &fd));
    }
    let msg = format!("max relative error hdm {:.2e}, rom {:.2e}, eqp {:.2e}", worst[0], worst[1], worst[2]);
    check(worst.iter().all(|e| *e <= 1e-5), msg.clone())?;
    Ok(msg)
}

fn criterion2() -> Outcome {
    let p = testbed();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = p.n_state();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let ctx = random_ctx(&p, &mut rng);
        let mu = random_point(&p, &mut rng);
        let offset = solve_primal(&p, &mu, &p.initial_state()).unwrap();
        let cols: Vec<(DVector<f64>, ColumnKind)> =
            (0..6).map(|_| (DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)), ColumnKind::State)).collect();
        let basis = gram_schmidt(&cols).unwrap().with_offset(offset);
        let k = basis.dim();
        let y = DVector::from_fn(k, |_, _| rng.gen_range(-0.05..0.05));
        let lambda = DVector::from_fn(k, |_, _| rng.gen_range(-1.0..1.0));
        let w = DMatrix::from_fn(k, p.n_params(), |_, _| rng.gen_range(-1.0..1.0));
        let hyper = HyperModel::new(&p, &basis, &EqpWeights::ones(p.n_elements())).unwrap();
        let a = hyper.quantities(&y, &lambda, &w, &mu, &ctx).unwrap();
        let b = reduced_quantities(&p, &basis, &y, &lambda, &w, &mu, &ctx).unwrap();
        let gaps = [
            (&a.residual - &b.residual).amax(),
            (a.al - b.al).abs(),
            (a.lagrangian - b.lagrangian).abs(),
            (&a.c - &b.c).amax(),
            (&a.adjoint_lagrangian - &b.adjoint_lagrangian).amax(),
            (&a.grad_lagrangian - &b.grad_lagrangian).amax(),
            (&a.sensitivity_residual - &b.sensitivity_residual).amax(),
        ];
        worst = gaps.iter().fold(worst, |m, g| m.max(*g));
    }
    let msg = format!("max absolute gap {worst:.2e} over 20 inputs");
    check(worst <= 1e-12, msg.clone())?;
    Ok(msg)
}

fn criterion3(eqp: &RunResult) -> Outcome {
    let records: Vec<&TrRecord> = eqp.outcome.traces.iter().flatten().collect();
    check(!records.is_empty(), "no trust-region iterations")?;
    let mut trained = 0;
    let mut below = 0;
    for r in &records {
        let info = &r.model;
        let v = info.unit_violation.ok_or("missing unit-weight check")?;
        check(v <= 1e-12, format!("unit weights violate a training LP by {v:e}"))?;
        for a in &info.audit {
            check(a.passed(), format!("family {} residual {:e} > {:e}", a.family, a.residual, a.tolerance))?;
        }
        if !info.eqp_fallback {
            trained += 1;
        }
        if info.usage_fraction.ok_or("missing usage")? < 1.0 {
            below += 1;
        }
    }
    let share = below as f64 / records.len() as f64;
    let msg = format!("{} models, {trained} trained, usage < 1 on {:.1}%", records.len(), 100.0 * share);
    check(share >= 0.8, msg.clone())?;
    Ok(msg)
}

fn criterion4() -> Outcome {
    let mut optimal = 0;
    for seed in 0..100 {
        let inst = common::random_lp(1000 + seed, 6, 10);
        let s = solve_lp(&inst);
        match common::brute_force_lp(&inst) {
            Some(best) => {
                check(s.status == LpStatus::Optimal, format!("seed {seed}: status {:?}", s.status))?;
                check((s.objective - best).abs() <= 1e-8, format!("seed {seed}: {} vs {best}", s.objective))?;
                optimal += 1;
            }
            None => check(s.status == LpStatus::Infeasible, format!("seed {seed}: expected infeasible"))?,
        }
    }
    Ok(format!("100 instances agree ({optimal} optimal, {} infeasible)", 100 - optimal))
}

/// F(μ) = ½μᵀHμ + gᵀμ on [-1, 1]³ with gradients perturbed by at most
/// ξ min(‖χ_m‖, Δ).
struct Perturbed {
    h: DMatrix<f64>,
    g: DVector<f64>,
    xi: f64,
    lower: DVector<f64>,
    upper: DVector<f64>,
    rng: ChaCha8Rng,
}

impl Perturbed {
    fn f(&self, mu: &DVector<f64>) -> f64 {
        0.5 * mu.dot(&(&self.h * mu)) + self.g.dot(mu)
    }
}

impl ModelBuilder for Perturbed {
    fn build(&mut self, mu: &DVector<f64>, delta: f64, _chi_prev: f64) -> eqptr::error::Result<ModelHandle> {
        let grad = &self.h * mu + &self.g;
        let dir = DVector::from_fn(3, |_, _| self.rng.gen_range(-1.0..1.0)).normalize();
        let chi = criticality(mu, &grad, &self.lower, &self.upper)?.norm();
        let mut size = self.xi * chi.min(delta);
        let gradient = loop {
            let g = &grad + &dir * size;
            let chi_m = criticality(mu, &g, &self.lower, &self.upper)?.norm();
            if size <= self.xi * chi_m.min(delta) {
                break g;
            }
            size *= 0.5;
        };
        Ok(ModelHandle {
            center: mu.clone(),
            value: self.f(mu),
            gradient,
            true_value: Some(self.f(mu)),
            true_gradient: Some(grad),
            phi: size,
            info: ModelInfo::default(),
        })
    }

    fn hessvec(&mut self, v: &DVector<f64>) -> eqptr::error::Result<DVector<f64>> {
        Ok(&self.h * v)
    }

    fn true_value(&mut self, mu: &DVector<f64>) -> eqptr::error::Result<f64> {
        Ok(self.f(mu))
    }
}

fn tr_checks(label: &str, trace: &[TrRecord], config: &TrConfig) -> Result<[usize; 3], String> {
    let mut regimes = [0; 3];
    let mut last_f: Option<f64> = None;
    for r in trace {
        if r.predicted > 0.0 {
            check(r.cauchy_decrease_holds(), format!("{label} iteration {}: Cauchy decrease fails", r.iteration))?;
        }
        if let Some(last) = last_f {
            check(r.f_center <= last, format!("{label} iteration {}: F rose from {last:e} to {:e}", r.iteration, r.f_center))?;
        }
        last_f = Some(r.f_center);
        let expected = match r.ratio {
            Some(rho) if rho >= config.eta2 => {
                regimes[2] += 1;
                (2.0 * r.delta).min(config.delta_max)
            }
            Some(rho) if rho >= config.eta1 => {
                regimes[1] += 1;
                r.delta
            }
            _ => {
                regimes[0] += 1;
                config.gamma1 * r.delta
            }
        };
        check(r.delta_next == expected, format!("{label} iteration {}: radius {} vs {expected}", r.iteration, r.delta_next))?;
        check(r.accepted == r.ratio.is_some_and(|rho| rho >= config.eta1), format!("{label}: acceptance mismatch"))?;
    }
    Ok(regimes)
}

fn criterion5(runs: &[&RunResult]) -> Outcome {
    let mut regimes = [0; 3];
    let mut records = 0;
    for r in runs {
        for (i, trace) in r.outcome.traces.iter().enumerate() {
            let label = format!("{} major {i}", r.config.method.name());
            let got = tr_checks(&label, trace, &r.config.trustregion)?;
            records += trace.len();
            for k in 0..3 {
                regimes[k] += got[k];
            }
        }
    }
    // The radius table is also checked on the three regimes directly.
    let c = TrConfig::default();
    check(c.update_radius(0.4, 0.05) == 0.2 && c.update_radius(0.4, 0.5) == 0.4 && c.update_radius(0.4, 0.9) == 0.8, "radius table")?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let m = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let h = &m * m.transpose() + DMatrix::identity(3, 3) * 0.5;
        let g = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
        let mut b = Perturbed {
            h,
            g,
            xi: 0.5,
            lower: DVector::from_element(3, -1.0),
            upper: DVector::from_element(3, 1.0),
            rng: ChaCha8Rng::seed_from_u64(rng.gen()),
        };
        let (lo, hi) = (b.lower.clone(), b.upper.clone());
        let cfg = TrConfig { max_iters: 200, ..TrConfig::default() };
        let out = run(&DVector::zeros(3), &mut b, &lo, &hi, &cfg, 1e-6).map_err(|e| e.to_string())?;
        check(out.converged, "synthetic harness did not converge")?;
        tr_checks("synthetic", &out.trace, &cfg)?;
        let grad = &b.h * &out.mu + &b.g;
        worst = worst.max(criticality(&out.mu, &grad, &lo, &hi).unwrap().amax());
    }
    let msg = format!(
        "{records} testbed iterations, regimes {regimes:?}; synthetic harness final chi {worst:.1e}"
    );
    check(worst <= 1e-6, msg.clone())?;
    Ok(msg)
}

fn criterion6(hdm: &RunResult, rom: &RunResult, eqp: &RunResult) -> Outcome {
    let mut finals = Vec::new();
    for r in [hdm, rom, eqp] {
        let name = r.config.method.name();
        check(r.outcome.failure.is_none(), format!("{name} failed"))?;
        let m = r.outcome.majors.last().ok_or(format!("{name} has no majors"))?;
        check(m.chi_inf <= 1e-5, format!("{name}: chi {:e}", m.chi_inf))?;
        check(m.c_norm <= 1e-6, format!("{name}: |c| {:e}", m.c_norm))?;
        finals.push(m.j);
    }
    let spread = finals.iter().map(|j| (j - finals[0]).abs() / finals[0].abs()).fold(0.0, f64::max);
    let msg = format!(
        "j = {:.10e}, spread {spread:.1e}; HDM solves hdm {} rom {} eqp {}",
        finals[0], hdm.counts.hdm, rom.counts.hdm, eqp.counts.hdm
    );
    check(spread <= 1e-6, msg.clone())?;
    check(eqp.counts.hdm < hdm.counts.hdm, msg.clone())?;
    Ok(msg)
}

fn replay_schedule(r: &RunResult) -> Result<usize, String> {
    let cfg = &r.config.auglag;
    let majors: &[MajorRecord] = &r.outcome.majors;
    let (mut tau, mut pi, mut omega) = (cfg.tau0, 1.0 / cfg.tau0, cfg.tau0.powf(-0.1));
    let mut theta = vec![0.0; majors.first().map_or(0, |m| m.theta.len())];
    let mut checks = 0;
    for m in majors {
        check(m.tau == tau && m.pi == pi && m.omega == omega, format!("major {}: schedule mismatch", m.i))?;
        check(m.theta == theta, format!("major {}: multipliers differ", m.i))?;
        check(m.feasible == (m.c_norm <= pi), format!("major {}: branch", m.i))?;
        if m.feasible {
            theta = theta.iter().zip(&m.c).map(|(t, c)| t - tau * c).collect();
            pi /= tau.powf(0.9);
            omega /= tau;
        } else {
            tau *= cfg.scale_a;
            pi = 1.0 / tau.powf(0.1);
            omega = 1.0 / tau;
        }
        checks += 1;
    }
    let s = Schedule::initial(cfg.tau0);
    check(s.tau == cfg.tau0 && s.pi == 1.0 / cfg.tau0, "initial schedule")?;

    let eqp = &r.config.eqp;
    let kappa = [eqp.kappa1, eqp.kappa2, eqp.kappa3, eqp.kappa4, eqp.kappa5, eqp.kappa6];
    let sched = ToleranceSchedule::new(eqp, r.config.trustregion.kappa_hat).map_err(|e| e.to_string())?;
    for (m, trace) in majors.iter().zip(&r.outcome.traces) {
        let mut chi_prev = f64::INFINITY;
        for rec in trace {
            if let Some(t) = &rec.model.tolerances {
                let base = r.config.trustregion.kappa_hat * chi_prev.min(rec.delta);
                let want = |k: f64, scale: f64| (base / (6.0 * k * scale)).max(eqp.delta_min);
                let expect = [
                    (t.delta_rp, want(kappa[0], 1.0)),
                    (t.delta_lra, want(kappa[1], 1.0)),
                    (t.delta_lga, want(kappa[2], 1.0)),
                    (t.delta_c, want(kappa[3], m.tau)),
                    (t.delta_dcy, want(kappa[4], m.tau)),
                    (t.delta_dcmu, want(kappa[5], m.tau)),
                ];
                for (got, want) in expect {
                    check((got - want).abs() <= 1e-15 * want, format!("major {} tolerance {got:e} vs {want:e}", m.i))?;
                }
                check(t.delta_dv == eqp.delta_dv && t.delta_rs == eqp.delta_rs && t.delta_lq == eqp.delta_lq, "fixed tolerances")?;
                let phi = kappa[0] * t.delta_rp
                    + kappa[1] * t.delta_lra
                    + kappa[2] * t.delta_lga
                    + m.tau * (kappa[3] * t.delta_c + kappa[4] * t.delta_dcy + kappa[5] * t.delta_dcmu);
                check((rec.phi - phi).abs() <= 1e-15 * phi, "error indicator")?;
                let direct = schedule_tolerances(&sched, chi_prev, rec.delta, m.tau).map_err(|e| e.to_string())?;
                check(direct == *t, "schedule function disagrees with the record")?;
                checks += 1;
            }
            chi_prev = rec.chi_m_inf;
        }
    }
    Ok(checks)
}

fn criterion7(runs: &[&RunResult]) -> Outcome {
    let mut checks = 0;
    for r in runs {
        checks += replay_schedule(r).map_err(|e| format!("{}: {e}", r.config.method.name()))?;
    }
    Ok(format!("{checks} recorded schedule states reproduced"))
}

fn criterion8(base: &RunConfig) -> Outcome {
    let mut notes = Vec::new();
    let penalty = study_cases("penalty", base).map_err(|e| e.to_string())?;
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> =
            penalty.iter().map(|c| s.spawn(|| execute(&c.config, RunOptions::default()))).collect();
        handles.into_iter().map(|h| h.join().expect("study run panicked")).collect()
    });
    for (c, r) in penalty.iter().zip(&results) {
        let r = r.as_ref().map_err(|e| format!("{}: {e}", c.label))?;
        check(r.outcome.converged, format!("{} did not converge", c.label))?;
    }
    notes.push("9/9 penalty grid points converge".to_string());

    let snaps = study_cases("snapshots", base).map_err(|e| e.to_string())?;
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = snaps.iter().map(|c| s.spawn(|| execute(&c.config, RunOptions::default()))).collect();
        handles.into_iter().map(|h| h.join().expect("study run panicked")).collect()
    });
    let mut optima = Vec::new();
    let mut costs = Vec::new();
    for (c, r) in snaps.iter().zip(&results) {
        let r = r.as_ref().map_err(|e| format!("{}: {e}", c.label))?;
        check(r.outcome.converged, format!("{} did not converge", c.label))?;
        let m = r.outcome.majors.last().unwrap();
        optima.push(m.j);
        costs.push(format!("{}={:.2}s", c.config.eqp.inherit_snapshots, m.cost));
    }
    let spread = optima.iter().map(|j| (j - optima[0]).abs() / optima[0].abs()).fold(0.0, f64::max);
    notes.push(format!("inheritance optima spread {spread:.1e}, cost {}", costs.join(" ")));
    check(spread <= 1e-6, notes.join("; "))?;
    Ok(notes.join("; "))
}

fn criterion9(config: &RunConfig) -> Outcome {
    let history = || -> Result<String, String> {
        let r = execute(config, RunOptions::default()).map_err(|e| e.to_string())?;
        Ok(history_csv(&report_rows(&r.outcome.majors, &r.outcome.traces, None, r.j_initial)))
    };
    let a = history()?;
    let b = history()?;
    check(a == b, "history.csv differs between runs")?;
    Ok(format!("{} bytes identical", a.len()))
}

fn config(method: Method) -> RunConfig {
    let mut c = RunConfig { method, ..RunConfig::default() };
    c.report.reference = false;
    c
}

fn main() {
    let start = Instant::now();
    let mut lines: Vec<(usize, Outcome, f64)> = Vec::new();
    let mut record = |n: usize, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f()))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = t.elapsed().as_secs_f64();
        match &out {
            Ok(m) => println!("criterion {n}: PASS ({secs:.1}s) {m}"),
            Err(m) => println!("criterion {n}: FAIL ({secs:.1}s) {m}"),
        }
        lines.push((n, out, secs));
    };

    record(1, &mut criterion1);
    record(2, &mut criterion2);
    let runs: Vec<Result<RunResult, String>> = std::thread::scope(|s| {
        let handles: Vec<_> = [Method::Hdm, Method::Rom, Method::Eqp]
            .into_iter()
            .map(|m| s.spawn(move || execute(&config(m), RunOptions::default()).map_err(|e| e.to_string())))
            .collect();
        handles.into_iter().map(|h| h.join().expect("run panicked")).collect()
    });
    let runs: Result<Vec<RunResult>, String> = runs.into_iter().collect();
    match &runs {
        Ok(runs) => {
            let (hdm, rom, eqp) = (&runs[0], &runs[1], &runs[2]);
            record(3, &mut || criterion3(eqp));
            record(4, &mut criterion4);
            record(5, &mut || criterion5(&[hdm, rom, eqp]));
            record(6, &mut || criterion6(hdm, rom, eqp));
            record(7, &mut || criterion7(&[hdm, rom, eqp]));
        }
        Err(e) => {
            for n in [3, 5, 6, 7] {
                let e = e.clone();
                record(n, &mut || Err(format!("testbed run failed: {e}")));
            }
            record(4, &mut criterion4);
        }
    }
    record(8, &mut || criterion8(&config(Method::Eqp)));
    record(9, &mut || criterion9(&config(Method::Eqp)));

    let failed: Vec<usize> = lines.iter().filter(|l| l.1.is_err()).map(|l| l.0).collect();
    println!(
        "acceptance: {}/{} passed in {:.1}s",
        lines.len() - failed.len(),
        lines.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
