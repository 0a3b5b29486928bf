//! Galerkin reduced-order models on an affine subspace ū + Ran Φ, and basis
//! construction by Gram–Schmidt and POD.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::linalg::Factorization;
use crate::system::{
    al_param_gradient, al_state_gradient, assemble_functionals, assemble_system, newton,
    ALContext, NewtonOptions, Problem,
};

/// Column relative norm below which Gram–Schmidt drops a candidate.
pub const GS_DROP_TOL: f64 = 1e-10;
/// Singular values below this fraction of the largest are discarded by POD.
pub const POD_TRUNCATION: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnKind {
    State,
    Adjoint,
    Sensitivity,
    PodPrimal,
    PodAdjoint,
}

/// Orthonormal basis Φ with optional affine offset ū.
#[derive(Debug, Clone)]
pub struct ReducedBasis {
    pub columns: DMatrix<f64>,
    pub offset: Option<DVector<f64>>,
    pub kinds: Vec<ColumnKind>,
}

impl ReducedBasis {
    /// Wraps an orthonormal matrix without checking it.
    pub fn from_orthonormal(columns: DMatrix<f64>, offset: Option<DVector<f64>>) -> Self {
        let kinds = vec![ColumnKind::State; columns.ncols()];
        Self { columns, offset, kinds }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_orthonormal(DMatrix::identity(n, n), None)
    }

    pub fn with_offset(mut self, offset: DVector<f64>) -> Self {
        self.offset = Some(offset);
        self
    }

    pub fn dim(&self) -> usize {
        self.columns.ncols()
    }

    pub fn n_state(&self) -> usize {
        self.columns.nrows()
    }

    /// ū + Φŷ
    pub fn state(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut u = &self.columns * y;
        if let Some(o) = &self.offset {
            u += o;
        }
        u
    }

    /// Coordinates of the orthogonal projection of u − ū.
    pub fn coordinates(&self, u: &DVector<f64>) -> DVector<f64> {
        match &self.offset {
            Some(o) => self.columns.tr_mul(&(u - o)),
            None => self.columns.tr_mul(u),
        }
    }

    fn check(&self, problem: &dyn Problem) -> Result<()> {
        if self.n_state() != problem.n_state() {
            return Err(invalid("basis row count differs from the state dimension"));
        }
        if self.dim() == 0 {
            return Err(Error::EmptyBasis);
        }
        if self.offset.as_ref().is_some_and(|o| o.len() != problem.n_state()) {
            return Err(invalid("basis offset has wrong length"));
        }
        Ok(())
    }
}

/// Modified Gram–Schmidt with one re-orthogonalization pass. Columns whose
/// remaining norm falls below `GS_DROP_TOL` times their original norm are
/// dropped.
pub fn gram_schmidt(columns: &[(DVector<f64>, ColumnKind)]) -> Result<ReducedBasis> {
    let n = match columns.first() {
        Some((c, _)) => c.len(),
        None => return Err(Error::EmptyBasis),
    };
    let mut kept: Vec<DVector<f64>> = Vec::new();
    let mut kinds = Vec::new();
    for (col, kind) in columns {
        if col.len() != n {
            return Err(invalid("Gram-Schmidt columns differ in length"));
        }
        if col.iter().any(|v| !v.is_finite()) {
            return Err(invalid("Gram-Schmidt column has non-finite entries"));
        }
        let original = col.norm();
        if original == 0.0 {
            continue;
        }
        let mut v = col.clone();
        for _ in 0..2 {
            for q in &kept {
                let d = q.dot(&v);
                v.axpy(-d, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm < GS_DROP_TOL * original {
            continue;
        }
        kept.push(v / norm);
        kinds.push(*kind);
    }
    if kept.is_empty() {
        return Err(Error::EmptyBasis);
    }
    Ok(ReducedBasis { columns: DMatrix::from_columns(&kept), offset: None, kinds })
}

/// Leading left singular vectors and singular values of a snapshot matrix.
pub fn pod_with_values(snapshots: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if snapshots.ncols() == 0 {
        return Err(invalid("POD needs at least one snapshot"));
    }
    let n = snapshots.nrows();
    if k == 0 {
        return Ok((DMatrix::zeros(n, 0), Vec::new()));
    }
    let svd = snapshots.clone().svd(true, false);
    let u = svd.u.ok_or_else(|| Error::LinearAlgebra("SVD did not return U".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let smax = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| smax > 0.0 && svd.singular_values[i] >= POD_TRUNCATION * smax)
        .take(k)
        .collect();
    let cols: Vec<DVector<f64>> = keep.iter().map(|&i| u.column(i).into_owned()).collect();
    let values = keep.iter().map(|&i| svd.singular_values[i]).collect();
    let basis = if cols.is_empty() { DMatrix::zeros(n, 0) } else { DMatrix::from_columns(&cols) };
    Ok((basis, values))
}

pub fn pod(snapshots: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    Ok(pod_with_values(snapshots, k)?.0)
}

/// Every reduced (or hyperreduced) quantity at one point
/// (ŷ, λ̂, ŵ, μ; θ, τ). Field names follow the hyperreduced notation.
#[derive(Debug, Clone)]
pub struct ModelQuantities {
    /// r̂ = Φᵀ r
    pub residual: DVector<f64>,
    /// ∂r̂/∂ŷ
    pub jacobian: DMatrix<f64>,
    /// ∂r̂/∂μ
    pub residual_mu: DMatrix<f64>,
    pub j: f64,
    pub c: DVector<f64>,
    /// ℓ^L
    pub lagrangian: f64,
    /// ℓ
    pub al: f64,
    /// r^{L,λ}(λ̂)
    pub adjoint_lagrangian: DVector<f64>,
    /// r^λ(λ̂)
    pub adjoint_residual: DVector<f64>,
    /// g^{L,λ}(λ̂)
    pub grad_lagrangian: DVector<f64>,
    /// g^λ(λ̂)
    pub grad: DVector<f64>,
    /// ∂c/∂μ, `N_c × N_μ`
    pub dc_dmu: DMatrix<f64>,
    /// ∂c/∂ŷ, `N_c × n`
    pub dc_dy: DMatrix<f64>,
    /// r^∂(ŵ) = (∂r̂/∂ŷ)ŵ + ∂r̂/∂μ, `n × N_μ`
    pub sensitivity_residual: DMatrix<f64>,
    /// Σ |Ω_e|
    pub volume: f64,
}

impl ModelQuantities {
    /// Fills in the derived entries from the primitive ones.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn finish(
        residual: DVector<f64>,
        jacobian: DMatrix<f64>,
        residual_mu: DMatrix<f64>,
        j: f64,
        dj_dy: DVector<f64>,
        dj_dmu: DVector<f64>,
        c: DVector<f64>,
        dc_dy: DMatrix<f64>,
        dc_dmu: DMatrix<f64>,
        volume: f64,
        lambda: &DVector<f64>,
        w: &DMatrix<f64>,
        ctx: &ALContext,
    ) -> Self {
        let lagrangian = ctx.lagrangian(j, &c);
        let al = ctx.al_value(j, &c);
        let adjoint_lagrangian = jacobian.tr_mul(lambda) - &dj_dy + dc_dy.tr_mul(&ctx.theta);
        let adjoint_residual = &adjoint_lagrangian - dc_dy.tr_mul(&c) * ctx.tau;
        let grad_lagrangian = &dj_dmu - dc_dmu.tr_mul(&ctx.theta) - residual_mu.tr_mul(lambda);
        let grad = &grad_lagrangian + dc_dmu.tr_mul(&c) * ctx.tau;
        let sensitivity_residual = &jacobian * w + &residual_mu;
        Self {
            residual,
            jacobian,
            residual_mu,
            j,
            c,
            lagrangian,
            al,
            adjoint_lagrangian,
            adjoint_residual,
            grad_lagrangian,
            grad,
            dc_dmu,
            dc_dy,
            sensitivity_residual,
            volume,
        }
    }
}

fn check_coords(basis: &ReducedBasis, y: &DVector<f64>) -> Result<()> {
    if y.len() != basis.dim() {
        return Err(invalid(format!(
            "reduced coordinates have length {}, basis has {} columns",
            y.len(),
            basis.dim()
        )));
    }
    Ok(())
}

/// Reduced quantities through the assembled full-order operators.
pub fn reduced_quantities(
    problem: &dyn Problem,
    basis: &ReducedBasis,
    y: &DVector<f64>,
    lambda: &DVector<f64>,
    w: &DMatrix<f64>,
    mu: &DVector<f64>,
    ctx: &ALContext,
) -> Result<ModelQuantities> {
    basis.check(problem)?;
    check_coords(basis, y)?;
    check_coords(basis, lambda)?;
    if w.nrows() != basis.dim() || w.ncols() != problem.n_params() {
        return Err(invalid("reduced sensitivity has wrong shape"));
    }
    let phi = &basis.columns;
    let u = basis.state(y);
    let (r, ju, jm) = assemble_system(problem, &u, mu)?;
    let f = assemble_functionals(problem, &u, mu)?;
    let volume = (0..problem.n_elements()).map(|e| problem.element_volume(e)).sum();
    Ok(ModelQuantities::finish(
        phi.tr_mul(&r),
        phi.tr_mul(&(&ju * phi)),
        phi.tr_mul(&jm),
        f.j,
        phi.tr_mul(&f.dj_du),
        f.dj_dmu,
        f.c,
        &f.dc_du * phi,
        f.dc_dmu,
        volume,
        lambda,
        w,
        ctx,
    ))
}

/// (Φᵀr, ΦᵀJΦ) at ū + Φŷ.
fn reduced_system(
    problem: &dyn Problem,
    basis: &ReducedBasis,
    y: &DVector<f64>,
    mu: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let phi = &basis.columns;
    let (r, ju, jm) = assemble_system(problem, &basis.state(y), mu)?;
    Ok((phi.tr_mul(&r), phi.tr_mul(&(&ju * phi)), phi.tr_mul(&jm)))
}

/// Newton on Φᵀ r(ū + Φŷ, μ) = 0 starting from ŷ = 0.
pub fn solve_reduced_primal(
    problem: &dyn Problem,
    basis: &ReducedBasis,
    mu: &DVector<f64>,
) -> Result<DVector<f64>> {
    solve_reduced_primal_from(problem, basis, mu, &DVector::zeros(basis.dim()))
}

pub fn solve_reduced_primal_from(
    problem: &dyn Problem,
    basis: &ReducedBasis,
    mu: &DVector<f64>,
    y0: &DVector<f64>,
) -> Result<DVector<f64>> {
    basis.check(problem)?;
    check_coords(basis, y0)?;
    let (y, _) = newton(
        "rom-newton",
        y0.clone(),
        &NewtonOptions::default(),
        |y| {
            let (r, j, _) = reduced_system(problem, basis, y, mu)?;
            Ok((r, j))
        },
        |y| {
            let r = crate::system::assemble_residual(problem, &basis.state(y), mu)?;
            Ok(basis.columns.tr_mul(&r))
        },
    )?;
    Ok(y)
}

/// Solves (ΦᵀJΦ)ᵀ λ̂ = Φᵀ(∂ℓ/∂u)ᵀ.
pub fn solve_reduced_adjoint(
    problem: &dyn Problem,
    basis: &ReducedBasis,
    y: &DVector<f64>,
    mu: &DVector<f64>,
    ctx: &ALContext,
) -> Result<DVector<f64>> {
    basis.check(problem)?;
    check_coords(basis, y)?;
    let u = basis.state(y);
    let (_, jr, _) = reduced_system(problem, basis, y, mu)?;
    let f = assemble_functionals(problem, &u, mu)?;
    let rhs = basis.columns.tr_mul(&al_state_gradient(&f, ctx));
    Factorization::new(&jr.transpose())?.solve(&rhs)
}

/// Solves (ΦᵀJΦ) ŵ = −ΦᵀJ_μ.
pub fn solve_reduced_sensitivity(
    problem: &dyn Problem,
    basis: &ReducedBasis,
    y: &DVector<f64>,
    mu: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    basis.check(problem)?;
    check_coords(basis, y)?;
    let (_, jr, jmr) = reduced_system(problem, basis, y, mu)?;
    Factorization::new(&jr)?.solve_matrix(&(-jmr))
}

/// Reduced primal, adjoint and sensitivity at one parameter.
#[derive(Debug, Clone)]
pub struct ReducedSolution {
    pub y_hat: DVector<f64>,
    pub lambda_hat: DVector<f64>,
    pub sens_hat: DMatrix<f64>,
}

pub fn solve_reduced_all(
    problem: &dyn Problem,
    basis: &ReducedBasis,
    mu: &DVector<f64>,
    ctx: &ALContext,
) -> Result<ReducedSolution> {
    let y_hat = solve_reduced_primal(problem, basis, mu)?;
    let lambda_hat = solve_reduced_adjoint(problem, basis, &y_hat, mu, ctx)?;
    let sens_hat = solve_reduced_sensitivity(problem, basis, &y_hat, mu)?;
    Ok(ReducedSolution { y_hat, lambda_hat, sens_hat })
}

/// Value and gradient of a reduced (or hyperreduced) AL function.
#[derive(Debug, Clone)]
pub struct ModelEvaluation {
    pub f: f64,
    pub grad: DVector<f64>,
    pub grad_lagrangian: DVector<f64>,
    pub grad_penalty: DVector<f64>,
    pub j: f64,
    pub c: DVector<f64>,
    pub y: DVector<f64>,
    pub lambda: DVector<f64>,
}

/// f̂(μ) and ∇f̂(μ) through reduced primal and adjoint solves.
pub fn reduced_al_value_gradient(
    problem: &dyn Problem,
    basis: &ReducedBasis,
    mu: &DVector<f64>,
    ctx: &ALContext,
) -> Result<ModelEvaluation> {
    let y = solve_reduced_primal(problem, basis, mu)?;
    let lambda = solve_reduced_adjoint(problem, basis, &y, mu, ctx)?;
    let u = basis.state(&y);
    let (_, _, jm) = assemble_system(problem, &u, mu)?;
    let f = assemble_functionals(problem, &u, mu)?;
    let proj = jm.tr_mul(&(&basis.columns * &lambda));
    let grad = al_param_gradient(&f, ctx) - &proj;
    let mut grad_lagrangian = &f.dj_dmu - &proj;
    let mut grad_penalty = DVector::zeros(mu.len());
    if f.c.len() > 0 {
        grad_lagrangian -= f.dc_dmu.tr_mul(&ctx.theta);
        grad_penalty = f.dc_dmu.tr_mul(&f.c) * ctx.tau;
    }
    Ok(ModelEvaluation {
        f: ctx.al_value(f.j, &f.c),
        grad,
        grad_lagrangian,
        grad_penalty,
        j: f.j,
        c: f.c,
        y,
        lambda,
    })
}

/// f̂ only.
pub fn reduced_al_value(
    problem: &dyn Problem,
    basis: &ReducedBasis,
    mu: &DVector<f64>,
    ctx: &ALContext,
) -> Result<f64> {
    let y = solve_reduced_primal(problem, basis, mu)?;
    let f = assemble_functionals(problem, &basis.state(&y), mu)?;
    Ok(ctx.al_value(f.j, &f.c))
}
