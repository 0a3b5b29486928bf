//! Dense revised primal simplex for  min cᵀx  s.t.  Ax ≤ b, x ≥ 0.
//!
//! The slack-augmented basis is kept in compact form: a set S of basic
//! structural columns and an equally sized set K of rows whose slacks are
//! nonbasic. Every iteration refactors the k×k block A[K, S] from the
//! original data, so round-off cannot accumulate across pivots. An
//! infeasible slack basis goes through a Phase I on one artificial column.
//! Dantzig pricing with a Harris ratio test switches to Bland's rule with
//! the textbook ratio test after 10·m iterations of a phase.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::linalg::Factorization;

const PIVOT_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-9;
/// Largest accepted violation of an equilibrated row at optimality.
const RESIDUAL_TOL: f64 = 1e-8;
#[derive(Debug, Clone, PartialEq)]
pub struct LpInstance {
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LpInstance {
    pub fn new(c: DVector<f64>, a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.ncols() != c.len() || a.nrows() != b.len() {
            return Err(invalid(format!(
                "LP dimensions inconsistent: c {}, A {}x{}, b {}",
                c.len(),
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
        if c.iter().chain(a.iter()).chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("LP data must be finite"));
        }
        Ok(Self { c, a, b })
    }

    pub fn n_vars(&self) -> usize {
        self.c.len()
    }

    pub fn n_rows(&self) -> usize {
        self.b.len()
    }

    /// max_i (Ax − b)_i⁺ together with max_j (−x_j)⁺.
    pub fn infeasibility(&self, x: &DVector<f64>) -> f64 {
        let r = &self.a * x - &self.b;
        let rows = r.iter().fold(0.0f64, |m, v| m.max(*v));
        let signs = x.iter().fold(0.0f64, |m, v| m.max(-*v));
        rows.max(signs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
    /// The basis became numerically singular or the final point failed the
    /// feasibility check.
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: DVector<f64>,
    pub objective: f64,
    /// Dual estimate y ≤ 0 with Aᵀy ≤ c at optimality.
    pub dual: DVector<f64>,
    /// Reduced costs c − Aᵀy of the structural variables.
    pub reduced_costs: DVector<f64>,
    pub iterations: usize,
}

/// Variable ids: structurals (and the Phase I artificial) are `0..n_cols`,
/// the slack of row i is `n_cols + i`.
struct Basis<'a> {
    a: &'a DMatrix<f64>,
    b: &'a DVector<f64>,
    n_cols: usize,
    /// Basic structural columns.
    s: Vec<usize>,
    /// Rows with a nonbasic slack, paired with `s` by position in the block.
    k: Vec<usize>,
    in_k: Vec<bool>,
    is_basic: Vec<bool>,
}

/// Values and factorizations for the current basis.
struct Point {
    lu: Option<Factorization>,
    lu_t: Option<Factorization>,
    x_s: DVector<f64>,
    /// Slack of every row (zero on K).
    slack: DVector<f64>,
}

enum Entering {
    Column(usize),
    Slack(usize),
}

impl<'a> Basis<'a> {
    fn new(a: &'a DMatrix<f64>, b: &'a DVector<f64>) -> Self {
        let n_cols = a.ncols();
        Self {
            a,
            b,
            n_cols,
            s: Vec::new(),
            k: Vec::new(),
            in_k: vec![false; a.nrows()],
            is_basic: vec![false; n_cols],
        }
    }

    fn block(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.k.len(), self.s.len(), |i, j| self.a[(self.k[i], self.s[j])])
    }

    fn point(&self) -> Option<Point> {
        let m = self.a.nrows();
        if self.s.is_empty() {
            return Some(Point { lu: None, lu_t: None, x_s: DVector::zeros(0), slack: self.b.clone() });
        }
        let block = self.block();
        let lu = Factorization::new(&block).ok()?;
        let lu_t = Factorization::new(&block.transpose()).ok()?;
        let b_k = DVector::from_iterator(self.k.len(), self.k.iter().map(|&r| self.b[r]));
        let x_s = lu.solve(&b_k).ok()?;
        let mut slack = DVector::zeros(m);
        for i in 0..m {
            if !self.in_k[i] {
                let ax: f64 = self.s.iter().zip(x_s.iter()).map(|(&j, v)| self.a[(i, j)] * v).sum();
                slack[i] = self.b[i] - ax;
            }
        }
        Some(Point { lu: Some(lu), lu_t: Some(lu_t), x_s, slack })
    }

    /// Row duals y (zero off K) for basic costs taken from `cost`.
    fn duals(&self, pt: &Point, cost: &DVector<f64>) -> Option<DVector<f64>> {
        let mut y = DVector::zeros(self.a.nrows());
        if let Some(lu_t) = &pt.lu_t {
            let c_s = DVector::from_iterator(self.s.len(), self.s.iter().map(|&j| cost[j]));
            let y_k = lu_t.solve(&c_s).ok()?;
            for (p, &r) in self.k.iter().enumerate() {
                y[r] = y_k[p];
            }
        }
        Some(y)
    }

    /// Change of the basic structurals and of every slack per unit increase
    /// of the entering variable.
    fn direction(&self, pt: &Point, e: &Entering) -> Option<(DVector<f64>, DVector<f64>)> {
        let m = self.a.nrows();
        let rhs = match *e {
            Entering::Column(q) => DVector::from_iterator(self.k.len(), self.k.iter().map(|&r| -self.a[(r, q)])),
            Entering::Slack(r) => {
                let p = self.k.iter().position(|&v| v == r).expect("entering slack row is in K");
                let mut v = DVector::zeros(self.k.len());
                v[p] = -1.0;
                v
            }
        };
        let dx = match &pt.lu {
            Some(lu) => lu.solve(&rhs).ok()?,
            None => DVector::zeros(0),
        };
        let mut ds = DVector::zeros(m);
        for i in 0..m {
            if self.in_k[i] {
                continue;
            }
            let mut v: f64 = self.s.iter().zip(dx.iter()).map(|(&j, d)| self.a[(i, j)] * d).sum();
            if let Entering::Column(q) = *e {
                v += self.a[(i, q)];
            }
            ds[i] = -v;
        }
        if let Entering::Slack(r) = *e {
            ds[r] = 1.0;
        }
        Some((dx, ds))
    }

    fn pivot(&mut self, e: Entering, leave: Leaving) {
        match (e, leave) {
            (Entering::Column(q), Leaving::Column(l)) => {
                self.is_basic[self.s[l]] = false;
                self.s[l] = q;
                self.is_basic[q] = true;
            }
            (Entering::Column(q), Leaving::Slack(r)) => {
                self.s.push(q);
                self.is_basic[q] = true;
                self.k.push(r);
                self.in_k[r] = true;
            }
            (Entering::Slack(p), Leaving::Column(l)) => {
                self.is_basic[self.s[l]] = false;
                // Keep the blocks paired: the row p leaves K, the column l leaves S.
                let pk = self.k.iter().position(|&v| v == p).expect("row in K");
                self.s.remove(l);
                self.k.remove(pk);
                self.in_k[p] = false;
            }
            (Entering::Slack(p), Leaving::Slack(r)) => {
                let pk = self.k.iter().position(|&v| v == p).expect("row in K");
                self.k[pk] = r;
                self.in_k[p] = false;
                self.in_k[r] = true;
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Leaving {
    Column(usize),
    Slack(usize),
}

enum PhaseEnd {
    Optimal,
    Unbounded,
    Limit,
    Singular,
}

/// Minimizes `cost`ᵀx over the current basis' polyhedron. Columns flagged in
/// `frozen` never enter.
fn run_phase(basis: &mut Basis, cost: &DVector<f64>, frozen: &[bool], iters: &mut usize, limit: usize) -> PhaseEnd {
    let m = basis.a.nrows();
    let bland_after = 10 * m.max(1);
    let mut local = 0;
    loop {
        let Some(pt) = basis.point() else {
            return PhaseEnd::Singular;
        };
        let Some(y) = basis.duals(&pt, cost) else {
            return PhaseEnd::Singular;
        };
        let bland = local >= bland_after;
        let mut best: Option<(Entering, f64)> = None;
        let consider = |e: Entering, d: f64, best: &mut Option<(Entering, f64)>| {
            if d >= -COST_TOL {
                return;
            }
            // Candidates arrive in increasing id order, so strict comparison
            // keeps the smallest id among ties.
            let better = match best {
                None => true,
                Some(_) if bland => false,
                Some((_, bd)) => d < *bd,
            };
            if better {
                *best = Some((e, d));
            }
        };
        for j in 0..basis.n_cols {
            if basis.is_basic[j] || frozen[j] {
                continue;
            }
            let d = cost[j] - basis.a.column(j).dot(&y);
            consider(Entering::Column(j), d, &mut best);
        }
        let mut rows = basis.k.clone();
        rows.sort_unstable();
        for r in rows {
            consider(Entering::Slack(r), -y[r], &mut best);
        }
        let Some((e, _)) = best else {
            return PhaseEnd::Optimal;
        };
        let Some((dx, ds)) = basis.direction(&pt, &e) else {
            return PhaseEnd::Singular;
        };
        let piv = PIVOT_TOL * dx.amax().max(ds.amax()).max(1.0);
        // Decreasing basics: (value, rate, leaving, id).
        let mut cands: Vec<(f64, f64, Leaving, usize)> = Vec::new();
        for (l, &j) in basis.s.iter().enumerate() {
            if dx[l] < -piv {
                cands.push((pt.x_s[l], -dx[l], Leaving::Column(l), j));
            }
        }
        for i in 0..m {
            if !basis.in_k[i] && ds[i] < -piv {
                cands.push((pt.slack[i], -ds[i], Leaving::Slack(i), basis.n_cols + i));
            }
        }
        if cands.is_empty() {
            return PhaseEnd::Unbounded;
        }
        if *iters >= limit {
            return PhaseEnd::Limit;
        }
        let leave = if bland {
            let mut pick = 0;
            for (c, cand) in cands.iter().enumerate() {
                let (t, tp) = (cand.0.max(0.0) / cand.1, cands[pick].0.max(0.0) / cands[pick].1);
                if t < tp || (t == tp && cand.3 < cands[pick].3) {
                    pick = c;
                }
            }
            cands[pick].2
        } else {
            // Harris: relax the bound by the feasibility tolerance, then take
            // the largest pivot among the rows blocking within the relaxed step.
            let bound = cands.iter().map(|c| (c.0.max(0.0) + FEAS_TOL) / c.1).fold(f64::INFINITY, f64::min);
            let mut pick: Option<usize> = None;
            for (c, cand) in cands.iter().enumerate() {
                if cand.0.max(0.0) / cand.1 <= bound {
                    match pick {
                        Some(p) if cands[p].1 > cand.1 || (cands[p].1 == cand.1 && cands[p].3 < cand.3) => {}
                        _ => pick = Some(c),
                    }
                }
            }
            cands[pick.expect("the minimizer of the relaxed bound qualifies")].2
        };
        basis.pivot(e, leave);
        *iters += 1;
        local += 1;
    }
}

/// Solves the LP with the default iteration limit 50·(n_vars + n_rows).
pub fn solve_lp(instance: &LpInstance) -> LpSolution {
    solve_lp_with_limit(instance, 50 * (instance.n_vars() + instance.n_rows()))
}

pub fn solve_lp_with_limit(instance: &LpInstance, limit: usize) -> LpSolution {
    let n = instance.n_vars();
    let m = instance.n_rows();
    // Row equilibration.
    let mut a = instance.a.clone();
    let mut b = instance.b.clone();
    let mut scale = vec![1.0; m];
    for i in 0..m {
        let s = a.row(i).amax();
        if s > 0.0 {
            scale[i] = 1.0 / s;
            a.row_mut(i).scale_mut(1.0 / s);
            b[i] /= s;
        }
    }
    let fail = |status, iterations| LpSolution {
        status,
        x: DVector::zeros(n),
        objective: f64::NAN,
        dual: DVector::zeros(m),
        reduced_costs: DVector::zeros(n),
        iterations,
    };

    let needs_phase1 = b.iter().any(|v| *v < 0.0);
    // The artificial column −1 sits at index n during Phase I.
    let a_ext = if needs_phase1 { a.clone().insert_column(n, -1.0) } else { a.clone() };
    let mut basis = Basis::new(&a_ext, &b);
    let mut iters = 0;
    let mut frozen = vec![false; a_ext.ncols()];
    let mut cost = DVector::zeros(a_ext.ncols());
    cost.rows_mut(0, n).copy_from(&instance.c);

    if needs_phase1 {
        let r = (0..m).min_by(|&i, &j| b[i].total_cmp(&b[j]).then(i.cmp(&j))).expect("a negative row exists");
        basis.pivot(Entering::Column(n), Leaving::Slack(r));
        let mut c1 = DVector::zeros(n + 1);
        c1[n] = 1.0;
        match run_phase(&mut basis, &c1, &frozen, &mut iters, limit) {
            PhaseEnd::Limit => return fail(LpStatus::IterationLimit, iters),
            PhaseEnd::Singular => return fail(LpStatus::NumericalFailure, iters),
            PhaseEnd::Unbounded | PhaseEnd::Optimal => {}
        }
        let Some(pt) = basis.point() else {
            return fail(LpStatus::NumericalFailure, iters);
        };
        let art = basis.s.iter().position(|&j| j == n).map(|l| pt.x_s[l]).unwrap_or(0.0);
        if art > FEAS_TOL * b.amax().max(1.0) {
            return fail(LpStatus::Infeasible, iters);
        }
        if let Some(l) = basis.s.iter().position(|&j| j == n) {
            drive_out(&mut basis, &pt, l);
        }
        frozen[n] = true;
    }

    match run_phase(&mut basis, &cost, &frozen, &mut iters, limit) {
        PhaseEnd::Limit => return fail(LpStatus::IterationLimit, iters),
        PhaseEnd::Singular => return fail(LpStatus::NumericalFailure, iters),
        PhaseEnd::Unbounded => return fail(LpStatus::Unbounded, iters),
        PhaseEnd::Optimal => {}
    }
    let Some(pt) = basis.point() else {
        return fail(LpStatus::NumericalFailure, iters);
    };
    let Some(y) = basis.duals(&pt, &cost) else {
        return fail(LpStatus::NumericalFailure, iters);
    };
    let mut x = DVector::zeros(n);
    for (l, &j) in basis.s.iter().enumerate() {
        if j < n {
            x[j] = pt.x_s[l].max(0.0);
        }
    }
    let scaled_residual = (&a * &x - &b).iter().fold(0.0f64, |acc, v| acc.max(*v));
    if scaled_residual > RESIDUAL_TOL {
        return fail(LpStatus::NumericalFailure, iters);
    }
    let dual = DVector::from_iterator(m, (0..m).map(|i| y[i] * scale[i]));
    let reduced_costs = &instance.c - instance.a.tr_mul(&dual);
    LpSolution { status: LpStatus::Optimal, objective: instance.c.dot(&x), x, dual, reduced_costs, iterations: iters }
}

/// Degenerate pivot that swaps a zero-valued artificial out of the basis on
/// the nonbasic variable with the largest effect on it. When no variable
/// moves it, the artificial is pinned at zero and stays basic.
fn drive_out(basis: &mut Basis, pt: &Point, l: usize) {
    let mut best: Option<(Entering, f64)> = None;
    let mut options: Vec<Entering> = (0..basis.n_cols - 1).filter(|&j| !basis.is_basic[j]).map(Entering::Column).collect();
    let mut rows = basis.k.clone();
    rows.sort_unstable();
    options.extend(rows.into_iter().map(Entering::Slack));
    for e in options {
        let Some((dx, _)) = basis.direction(pt, &e) else { continue };
        let g = dx[l].abs();
        if g > PIVOT_TOL && best.as_ref().is_none_or(|(_, bg)| g > *bg) {
            best = Some((e, g));
        }
    }
    if let Some((e, _)) = best {
        basis.pivot(e, Leaving::Column(l));
    }
}
