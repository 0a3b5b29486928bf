//! Shared oracles for integration tests.
#![allow(dead_code)]

use eqptr::lp::LpInstance;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum of cᵀx over all basic feasible solutions, found by solving every
/// n-subset of the m + n constraints as equalities. None when no vertex is
/// feasible.
pub fn brute_force_lp(inst: &LpInstance) -> Option<f64> {
    let n = inst.n_vars();
    let m = inst.n_rows();
    let total = m + n;
    let mut best: Option<f64> = None;
    let mut subset: Vec<usize> = (0..n).collect();
    loop {
        let mut g = DMatrix::zeros(n, n);
        let mut h = DVector::zeros(n);
        for (r, &k) in subset.iter().enumerate() {
            if k < m {
                g.row_mut(r).copy_from(&inst.a.row(k));
                h[r] = inst.b[k];
            } else {
                g[(r, k - m)] = 1.0;
            }
        }
        let lu = g.clone().lu();
        let det = lu.determinant();
        if det.abs() > 1e-10 {
            if let Some(x) = lu.solve(&h) {
                let scale = 1.0 + x.amax();
                if inst.infeasibility(&x) <= 1e-9 * scale {
                    let v = inst.c.dot(&x);
                    best = Some(best.map_or(v, |b: f64| b.min(v)));
                }
            }
        }
        // next combination
        let mut i = n;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if subset[i] < total - n + i {
                subset[i] += 1;
                for k in i + 1..n {
                    subset[k] = subset[k - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Seeded random LP with up to `max_vars` variables and `max_rows` rows. The
/// last row bounds Σx so every instance is bounded.
pub fn random_lp(seed: u64, max_vars: usize, max_rows: usize) -> LpInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=max_vars);
    let m = rng.gen_range(1..=max_rows);
    let mut a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-3.0..3.0));
    let mut b = DVector::from_fn(m, |_, _| rng.gen_range(-2.0..5.0));
    for j in 0..n {
        a[(m - 1, j)] = 1.0;
    }
    b[m - 1] = rng.gen_range(1.0..10.0);
    let c = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
    LpInstance::new(c, a, b).unwrap()
}

use eqptr::system::{ElementConstraints, ElementResidual, ElementScalar, Problem};

/// Small element problem with affine residuals r_e = K_e u_e − B_e μ − b_e
/// on owned dofs, a quadratic objective with per-element weights, and one
/// linear constraint c = Σ_e (a_eᵀu_e) − μ₀·v_e.
pub struct AffineProblem {
    pub dofs: Vec<Vec<usize>>,
    pub k: Vec<DMatrix<f64>>,
    pub bmu: Vec<DMatrix<f64>>,
    pub b0: Vec<DVector<f64>>,
    /// Objective weight on ½‖u_e‖²; zero makes j independent of u.
    pub obj_weight: f64,
    pub n_constraints: usize,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub n_state: usize,
}

impl AffineProblem {
    /// `blocks` elements of `size` owned dofs each, with seeded well
    /// conditioned blocks and two parameters.
    pub fn random(seed: u64, blocks: usize, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let np = 2;
        let k = (0..blocks)
            .map(|_| {
                let m = DMatrix::from_fn(size, size, |_, _| rng.gen_range(-0.3..0.3));
                m + DMatrix::identity(size, size) * 2.0
            })
            .collect();
        let bmu = (0..blocks).map(|_| DMatrix::from_fn(size, np, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let b0 = (0..blocks).map(|_| DVector::from_fn(size, |_, _| rng.gen_range(-1.0..1.0))).collect();
        Self {
            dofs: (0..blocks).map(|e| (e * size..(e + 1) * size).collect()).collect(),
            k,
            bmu,
            b0,
            obj_weight: 1.0,
            n_constraints: 1,
            lower: DVector::from_element(np, -1.0),
            upper: DVector::from_element(np, 1.0),
            n_state: blocks * size,
        }
    }

    /// Global K as the scatter-sum of the element blocks.
    pub fn global_k(&self) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(self.n_state, self.n_state);
        for (e, d) in self.dofs.iter().enumerate() {
            for (i, &gi) in d.iter().enumerate() {
                for (j, &gj) in d.iter().enumerate() {
                    k[(gi, gj)] += self.k[e][(i, j)];
                }
            }
        }
        k
    }

    /// Global right-hand side b(μ) with r = K u − b(μ).
    pub fn global_b(&self, mu: &DVector<f64>) -> DVector<f64> {
        let mut b = DVector::zeros(self.n_state);
        for (e, d) in self.dofs.iter().enumerate() {
            let be = &self.bmu[e] * mu + &self.b0[e];
            for (i, &g) in d.iter().enumerate() {
                b[g] += be[i];
            }
        }
        b
    }
}

impl Problem for AffineProblem {
    fn n_state(&self) -> usize {
        self.n_state
    }
    fn n_params(&self) -> usize {
        self.lower.len()
    }
    fn n_constraints(&self) -> usize {
        self.n_constraints
    }
    fn n_elements(&self) -> usize {
        self.dofs.len()
    }
    fn param_lower(&self) -> &DVector<f64> {
        &self.lower
    }
    fn param_upper(&self) -> &DVector<f64> {
        &self.upper
    }
    fn initial_state(&self) -> DVector<f64> {
        DVector::zeros(self.n_state)
    }
    fn element_dofs(&self, e: usize) -> &[usize] {
        &self.dofs[e]
    }
    fn neighbor_dofs(&self, _e: usize) -> &[usize] {
        &[]
    }
    fn element_volume(&self, _e: usize) -> f64 {
        1.0 / self.dofs.len() as f64
    }
    fn element_residual(&self, e: usize, ue: &DVector<f64>, _un: &DVector<f64>, mu: &DVector<f64>) -> ElementResidual {
        let n = ue.len();
        ElementResidual {
            value: &self.k[e] * ue - &self.bmu[e] * mu - &self.b0[e],
            d_state: self.k[e].clone(),
            d_neighbors: DMatrix::zeros(n, 0),
            d_params: -&self.bmu[e],
        }
    }
    fn element_objective(&self, _e: usize, ue: &DVector<f64>, mu: &DVector<f64>) -> ElementScalar {
        let w = self.obj_weight;
        ElementScalar {
            value: 0.5 * w * ue.norm_squared() + 0.1 * mu.norm_squared() / self.dofs.len() as f64,
            d_state: ue * w,
            d_params: mu * (0.2 / self.dofs.len() as f64),
        }
    }
    fn element_constraints(&self, e: usize, ue: &DVector<f64>, mu: &DVector<f64>) -> ElementConstraints {
        let nc = self.n_constraints;
        let n = ue.len();
        let v = 1.0 / self.dofs.len() as f64;
        let a = DVector::from_fn(n, |i, _| 0.1 * (1 + i + e) as f64);
        let mut value = DVector::zeros(nc);
        let mut d_state = DMatrix::zeros(nc, n);
        let mut d_params = DMatrix::zeros(nc, mu.len());
        if nc > 0 {
            value[0] = a.dot(ue) - mu[0] * v;
            d_state.row_mut(0).copy_from(&a.transpose());
            d_params[(0, 0)] = -v;
        }
        ElementConstraints { value, d_state, d_params }
    }
}
