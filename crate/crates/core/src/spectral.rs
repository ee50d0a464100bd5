//! Reduced Hessian `Jᵀ H J`, its spectrum, the L2 and robust rigidity
//! regularizers, and their gradients routed back to generator parameters.

use nalgebra::{DMatrix, DVector};

use crate::arap::{a_transpose_apply_at, dd_quadratic_form_gradient, ArapHessian};
use crate::error::{check_len, Error, Result};
use crate::linalg;
use crate::mesh::VertexField;

/// Relative floor applied to eigenvalues inside `λ^(α−1)`.
pub const EIG_FLOOR_RELATIVE: f64 = 1e-8;
/// Relative tolerance for clamping slightly negative eigenvalues to zero.
pub const NEGATIVE_TOLERANCE: f64 = 1e-8;
pub const MAX_REDUCED_DIM: usize = 512;

#[derive(Debug, Clone)]
pub struct ReducedHessian {
    matrix: DMatrix<f64>,
    jacobian: DMatrix<f64>,
    hj: DMatrix<f64>,
}

impl ReducedHessian {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.jacobian
    }

    /// `H J`, one matrix-free product per column.
    pub fn hessian_times_jacobian(&self) -> &DMatrix<f64> {
        &self.hj
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// `Jᵀ H J`, symmetrized.
pub fn reduce(h: &ArapHessian, j: &DMatrix<f64>) -> Result<ReducedHessian> {
    check_len("jacobian rows", h.dim(), j.nrows())?;
    let mut hj = DMatrix::zeros(j.nrows(), j.ncols());
    for (l, col) in j.column_iter().enumerate() {
        let hx = h.apply(&VertexField::from_vec(col.iter().copied().collect()))?;
        hj.set_column(l, &DVector::from_column_slice(hx.as_slice()));
    }
    let m = j.transpose() * &hj;
    let matrix = (&m + m.transpose()) * 0.5;
    Ok(ReducedHessian {
        matrix,
        jacobian: j.clone(),
        hj,
    })
}

#[derive(Debug, Clone)]
pub struct Spectrum {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    trace: f64,
    floor_relative: f64,
}

impl Spectrum {
    /// Ascending, clamped at zero.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Orthonormal eigenvectors as columns, in eigenvalue order.
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Trace of the decomposed matrix.
    pub fn trace(&self) -> f64 {
        self.trace
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(0.0, f64::max)
    }

    /// `floor_relative · max(1, λ_max)`.
    pub fn eig_floor(&self) -> f64 {
        self.floor_relative * self.max_eigenvalue().max(1.0)
    }

    /// Replaces the default [`EIG_FLOOR_RELATIVE`].
    pub fn with_floor_relative(mut self, floor_relative: f64) -> Self {
        self.floor_relative = floor_relative;
        self
    }
}

pub fn eigdecompose(r: &ReducedHessian) -> Result<Spectrum> {
    eigdecompose_matrix(r.matrix())
}

/// Decomposes any symmetric PSD matrix into a [`Spectrum`].
pub fn eigdecompose_matrix(m: &DMatrix<f64>) -> Result<Spectrum> {
    if m.nrows() > MAX_REDUCED_DIM {
        return Err(Error::TooLarge {
            size: m.nrows(),
            limit: MAX_REDUCED_DIM,
        });
    }
    let (mut values, vectors) = linalg::symmetric_eigen(m)?;
    let top = values.iter().copied().fold(0.0, f64::max);
    let tolerance = NEGATIVE_TOLERANCE * top.max(1.0);
    for v in values.iter_mut() {
        if *v < -tolerance {
            return Err(Error::NegativeEigenvalue { value: *v, tolerance });
        }
        *v = v.max(0.0);
    }
    Ok(Spectrum {
        eigenvalues: values,
        eigenvectors: vectors,
        trace: m.trace(),
        floor_relative: EIG_FLOOR_RELATIVE,
    })
}

/// `Tr(Jᵀ H J)`.
pub fn l2_regularizer(r: &ReducedHessian) -> f64 {
    r.matrix().trace()
}

/// `Σ λᵢ^α` on the raw (clamped) eigenvalues. With `α = 1` this returns the
/// trace of the decomposed matrix, identical to [`l2_regularizer`].
pub fn robust_regularizer(s: &Spectrum, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if alpha == 1.0 {
        return Ok(s.trace());
    }
    Ok(s.eigenvalues().iter().map(|&l| l.powf(alpha)).sum())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Invalid(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(())
}

/// Marginal weight `α λ^(α−1)` of each eigenvalue, with `λ` floored at
/// [`Spectrum::eig_floor`].
pub fn eigen_weights(s: &Spectrum, alpha: f64) -> Vec<f64> {
    if alpha == 1.0 {
        return vec![1.0; s.eigenvalues().len()];
    }
    let floor = s.eig_floor();
    s.eigenvalues()
        .iter()
        .map(|&l| alpha * l.max(floor).powf(alpha - 1.0))
        .collect()
}

/// Test hook for the gradient checker: flips the sign of the `dD` term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FaultInjection {
    pub flip_dd_term: bool,
}

/// Output-space cotangents of the regularizer: with respect to the Jacobian
/// columns (`3n × k`) and to the generated vertex positions (`3n`).
#[derive(Debug, Clone)]
pub struct RegularizerCotangents {
    pub jacobian: DMatrix<f64>,
    pub positions: VertexField,
}

/// Contracts `d(uᵀ H̄ u)` for each direction `u` (columns of `directions`)
/// with the matching weight. The expansion treats the directions and the
/// weights as constants:
///
/// ```text
/// d(aᵀ H a) = 2 (H a)ᵀ (dJ u) − 4 cᵀ (dA a) + 2 cᵀ dD c,   a = J u,  c = D⁻¹ A a
/// dA(g) a   = −A(a) dg
/// ```
fn contract_directions(
    r: &ReducedHessian,
    h: &ArapHessian,
    directions: &DMatrix<f64>,
    weights: &[f64],
    fault: FaultInjection,
) -> RegularizerCotangents {
    let n = h.n_vertices();
    let k = r.dim();
    let mut jac = DMatrix::zeros(3 * n, k);
    let mut pos = VertexField::zeros(n);
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let u = directions.column(i);
        let a = VertexField::from_vec((r.jacobian() * u).as_slice().to_vec());
        let ha = r.hessian_times_jacobian() * u;
        jac += (&ha * u.transpose()) * (2.0 * w);
        let c = h.d_inv_apply(&h.a_apply(&a));
        pos.axpy(4.0 * w, &a_transpose_apply_at(h.topology(), &a, &c));
        pos.axpy(w, &dd_term_cotangent(h, &c, fault));
    }
    RegularizerCotangents {
        jacobian: jac,
        positions: pos,
    }
}

/// Position gradient of `2 cᵀ D(g) c` at fixed `c`.
pub fn dd_term_cotangent(h: &ArapHessian, c: &VertexField, fault: FaultInjection) -> VertexField {
    let sign = if fault.flip_dd_term { -2.0 } else { 2.0 };
    dd_quadratic_form_gradient(h.topology(), h.positions(), c).scale(sign)
}

/// Cotangents of `Σ λᵢ^α` via `dλᵢ = uᵢᵀ dH̄ uᵢ`.
pub fn regularizer_cotangents(
    s: &Spectrum,
    r: &ReducedHessian,
    h: &ArapHessian,
    alpha: f64,
    fault: FaultInjection,
) -> Result<RegularizerCotangents> {
    check_alpha(alpha)?;
    check_len("spectrum size", r.dim(), s.eigenvalues().len())?;
    check_len("hessian size", h.dim(), r.jacobian().nrows())?;
    Ok(contract_directions(
        r,
        h,
        s.eigenvectors(),
        &eigen_weights(s, alpha),
        fault,
    ))
}

/// Cotangents of `Tr(Jᵀ H J)` expanded in the canonical basis, without any
/// eigendecomposition.
pub fn l2_cotangents(r: &ReducedHessian, h: &ArapHessian) -> RegularizerCotangents {
    let k = r.dim();
    contract_directions(r, h, &DMatrix::identity(k, k), &vec![1.0; k], FaultInjection::default())
}

/// Routes output-space cotangents into parameter space.
pub trait GeneratorAdjoint {
    /// Gradient of `Σ_l C_lᵀ J_l` with respect to the parameters.
    fn jacobian_vjp(&self, cotangent: &DMatrix<f64>) -> Result<DVector<f64>>;
    /// Gradient of `cᵀ g` with respect to the parameters.
    fn position_vjp(&self, cotangent: &VertexField) -> Result<DVector<f64>>;
}

/// Parameter gradient of the robust regularizer.
pub fn regularizer_gradient(
    s: &Spectrum,
    r: &ReducedHessian,
    h: &ArapHessian,
    alpha: f64,
    adjoint: &dyn GeneratorAdjoint,
    fault: FaultInjection,
) -> Result<DVector<f64>> {
    let cot = regularizer_cotangents(s, r, h, alpha, fault)?;
    Ok(adjoint.jacobian_vjp(&cot.jacobian)? + adjoint.position_vjp(&cot.positions)?)
}

/// Central-difference estimate of `J · dir`: `(g(z + s·dir) − g(z − s·dir)) / 2s`.
pub fn directional_jacobian<F>(eval: F, z: &DVector<f64>, dir: &DVector<f64>, s: f64) -> Result<VertexField>
where
    F: Fn(&DVector<f64>) -> Result<VertexField>,
{
    if s.is_nan() || s <= 0.0 {
        return Err(Error::Invalid(format!(
            "finite-difference step must be positive, got {s}"
        )));
    }
    let plus = eval(&(z + dir * s))?;
    let minus = eval(&(z - dir * s))?;
    Ok((&plus - &minus).scale(0.5 / s))
}
