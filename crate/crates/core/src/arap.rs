//! As-rigid-as-possible energy and its Hessian at zero displacement.
//!
//! The energy sums over directed edges, so every undirected edge `{i, j}`
//! contributes once with the rotation of `i` and once with the rotation of
//! `j`. Linearizing each rotation as `I + ω×` and eliminating `ω` gives the
//! second-order model `f(g, x) ≈ ½ xᵀ H x` with
//!
//! ```text
//! H = 4 (L ⊗ I₃) − 2 Aᵀ D⁻¹ A
//! ```
//!
//! where `L` is the weighted graph Laplacian, `A` the block operator with
//! `A_ii = Σ_k w_ik (v_ik×)`, `A_ij = −w_ij (v_ij×)` and `D` the block diagonal
//! `D_ii = Σ_k w_ik (‖v_ik‖² I₃ − v_ik v_ikᵀ)`.

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3, SVD};

use crate::error::{check_len, Error, Result};
use crate::mesh::{Mesh, Topology, VertexField};
use crate::sparse::{BlockCsr3, CsrMatrix};

/// Relative threshold below which a `D_ii` block is Tikhonov-shifted.
pub const D_REG_RELATIVE: f64 = 1e-9;
/// Largest vertex count accepted by the dense null-space report.
pub const DENSE_REPORT_LIMIT: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct RotationSet(pub Vec<Matrix3<f64>>);

impl RotationSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix3<f64>> {
        self.0.iter()
    }
}

fn check_field(mesh: &Mesh, x: &VertexField) -> Result<()> {
    check_len("displacement field", 3 * mesh.n_vertices(), x.len())
}

/// Per-vertex orthogonal Procrustes fit of the local rotations.
pub fn fit_rotations(mesh: &Mesh, x: &VertexField) -> Result<RotationSet> {
    check_field(mesh, x)?;
    let topo = mesh.topology();
    let g = mesh.vertices();
    let rotations = (0..mesh.n_vertices())
        .map(|i| {
            if topo.ring(i).all(|(j, _)| x.vertex(i) == x.vertex(j)) {
                // S is then symmetric PSD and the identity is its exact fit
                return Matrix3::identity();
            }
            let mut s = Matrix3::zeros();
            for (j, w) in topo.ring(i) {
                let v = g[i] - g[j];
                let target = v + x.vertex(i) - x.vertex(j);
                s += w * v * target.transpose();
            }
            procrustes_rotation(&s)
        })
        .collect();
    Ok(RotationSet(rotations))
}

/// Rotation maximizing `tr(O S)`: `O = V Uᵀ`, with the column of `U` paired
/// with the smallest singular value negated when `det(V Uᵀ) < 0`.
pub fn procrustes_rotation(s: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*s, true, true);
    let mut u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested Vᵀ").transpose();
    if (v * u.transpose()).determinant() < 0.0 {
        let smallest = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(2);
        u.column_mut(smallest).neg_mut();
    }
    v * u.transpose()
}

/// Energy at given rotations: `Σ_i Σ_{j∈N(i)} w_ij ‖(O_i − I)v_ij − x_ij‖²`.
pub fn energy_at_rotations(mesh: &Mesh, x: &VertexField, rotations: &RotationSet) -> f64 {
    let topo = mesh.topology();
    let g = mesh.vertices();
    let mut total = 0.0;
    for i in 0..mesh.n_vertices() {
        let rot = rotations.0[i] - Matrix3::identity();
        for (j, w) in topo.ring(i) {
            let r = rot * (g[i] - g[j]) - (x.vertex(i) - x.vertex(j));
            total += w * r.norm_squared();
        }
    }
    total
}

/// Gradient with respect to `x` of [`energy_at_rotations`] with the
/// rotations held fixed. At fitted rotations this is the gradient of
/// [`arap_energy`] by the envelope property of the inner minimum.
pub fn energy_gradient_at_rotations(mesh: &Mesh, x: &VertexField, rotations: &RotationSet) -> VertexField {
    let topo = mesh.topology();
    let g = mesh.vertices();
    let mut grad = VertexField::zeros(mesh.n_vertices());
    for i in 0..mesh.n_vertices() {
        let rot = rotations.0[i] - Matrix3::identity();
        for (j, w) in topo.ring(i) {
            let r = rot * (g[i] - g[j]) - (x.vertex(i) - x.vertex(j));
            grad.add_to_vertex(i, -2.0 * w * r);
            grad.add_to_vertex(j, 2.0 * w * r);
        }
    }
    grad
}

/// ARAP deformation energy between `mesh` and `mesh + x`, with rotations
/// at their exact per-vertex optimum.
pub fn arap_energy(mesh: &Mesh, x: &VertexField) -> Result<f64> {
    let rotations = fit_rotations(mesh, x)?;
    Ok(energy_at_rotations(mesh, x, &rotations))
}

/// `(A(f) x)_i = Σ_k w_ik (f_i − f_k) × (x_i − x_k)`.
pub fn a_apply_at(topo: &Topology, f: &VertexField, x: &VertexField) -> VertexField {
    let mut out = VertexField::zeros(topo.n_vertices());
    for i in 0..topo.n_vertices() {
        let mut acc = Vector3::zeros();
        for (k, w) in topo.ring(i) {
            acc += w * (f.vertex(i) - f.vertex(k)).cross(&(x.vertex(i) - x.vertex(k)));
        }
        out.set_vertex(i, acc);
    }
    out
}

/// `A(f)ᵀ c`.
pub fn a_transpose_apply_at(topo: &Topology, f: &VertexField, c: &VertexField) -> VertexField {
    let mut out = VertexField::zeros(topo.n_vertices());
    for i in 0..topo.n_vertices() {
        let ci = c.vertex(i);
        for (k, w) in topo.ring(i) {
            let t = w * ci.cross(&(f.vertex(i) - f.vertex(k)));
            out.add_to_vertex(i, t);
            out.add_to_vertex(k, -t);
        }
    }
    out
}

/// Block form of `A(g)`.
pub fn a_blocks(topo: &Topology, g: &VertexField) -> BlockCsr3 {
    let rows = (0..topo.n_vertices())
        .map(|i| {
            let mut diag = Matrix3::zeros();
            let mut row = Vec::with_capacity(topo.degree(i) + 1);
            for (j, w) in topo.ring(i) {
                let block = w * (g.vertex(i) - g.vertex(j)).cross_matrix();
                diag += block;
                row.push((j, -block));
            }
            row.push((i, diag));
            row.sort_by_key(|&(c, _)| c);
            row
        })
        .collect();
    BlockCsr3::from_rows(rows)
}

/// `D_ii(g) = Σ_k w_ik (‖v_ik‖² I₃ − v_ik v_ikᵀ)`.
pub fn d_blocks(topo: &Topology, g: &VertexField) -> Vec<Matrix3<f64>> {
    (0..topo.n_vertices())
        .map(|i| {
            topo.ring(i).fold(Matrix3::zeros(), |acc, (k, w)| {
                let v = g.vertex(i) - g.vertex(k);
                acc + w * (Matrix3::identity() * v.norm_squared() - v * v.transpose())
            })
        })
        .collect()
}

/// Directional derivative of the quadratic form `cᵀ D(g) c` along `dg`:
/// `2 Σ_i Σ_{k∈N(i)} w_ik [ v_ikᵀ(dg_i − dg_k) ‖c_i‖² − (c_iᵀ(dg_i − dg_k)) (v_ikᵀ c_i) ]`.
pub fn dd_quadratic_form(topo: &Topology, g: &VertexField, dg: &VertexField, c: &VertexField) -> f64 {
    let mut total = 0.0;
    for i in 0..topo.n_vertices() {
        let ci = c.vertex(i);
        for (k, w) in topo.ring(i) {
            let v = g.vertex(i) - g.vertex(k);
            let dv = dg.vertex(i) - dg.vertex(k);
            total += 2.0 * w * (v.dot(&dv) * ci.norm_squared() - ci.dot(&dv) * v.dot(&ci));
        }
    }
    total
}

/// Cotangent on `g` of `cᵀ D(g) c`, i.e. the vector `q` with
/// `qᵀ dg = dd_quadratic_form(g, dg, c)` for all `dg`.
pub fn dd_quadratic_form_gradient(topo: &Topology, g: &VertexField, c: &VertexField) -> VertexField {
    let mut out = VertexField::zeros(topo.n_vertices());
    for i in 0..topo.n_vertices() {
        let ci = c.vertex(i);
        for (k, w) in topo.ring(i) {
            let v = g.vertex(i) - g.vertex(k);
            let q = 2.0 * w * (ci.norm_squared() * v - v.dot(&ci) * ci);
            out.add_to_vertex(i, q);
            out.add_to_vertex(k, -q);
        }
    }
    out
}

/// Sparse factored ARAP Hessian at a fixed vertex configuration.
#[derive(Debug, Clone)]
pub struct ArapHessian {
    laplacian: CsrMatrix,
    a_blocks: BlockCsr3,
    d_blocks: Vec<Matrix3<f64>>,
    d_inv_blocks: Vec<Matrix3<f64>>,
    // F_i with D_ii⁻¹ = F_iᵀ F_i, applied in factored form so the large
    // shifted eigenvalue stays confined to its own eigendirection
    d_inv_factors: Vec<Matrix3<f64>>,
    reg_epsilon: Vec<f64>,
    positions: VertexField,
    topology: std::sync::Arc<Topology>,
}

impl ArapHessian {
    pub fn assemble(mesh: &Mesh) -> Result<Self> {
        Self::assemble_at(mesh, &mesh.positions())
    }

    /// Assembles at positions `g` using the connectivity and weights of `mesh`.
    pub fn assemble_at(mesh: &Mesh, g: &VertexField) -> Result<Self> {
        check_len("hessian positions", 3 * mesh.n_vertices(), g.len())?;
        let topo = mesh.topology();
        if let Some(vertex) = (0..topo.n_vertices()).find(|&i| topo.degree(i) == 0) {
            return Err(Error::IsolatedVertex { vertex });
        }
        let d_blocks = d_blocks(topo, g);
        let mut d_inv_blocks = Vec::with_capacity(d_blocks.len());
        let mut d_inv_factors = Vec::with_capacity(d_blocks.len());
        let mut reg_epsilon = Vec::with_capacity(d_blocks.len());
        for (i, d) in d_blocks.iter().enumerate() {
            let trace = d.trace();
            if trace.is_nan() || trace <= 0.0 {
                return Err(Error::Singular(format!("D block of vertex {i} has zero trace")));
            }
            let eig = SymmetricEigen::new(*d);
            let smallest = eig.eigenvalues.min();
            let eps = if smallest < D_REG_RELATIVE * trace {
                D_REG_RELATIVE * trace
            } else {
                0.0
            };
            let denom = eig.eigenvalues.map(|l| l.max(0.0) + eps);
            if denom.iter().any(|&l| l.is_nan() || l <= 0.0) {
                return Err(Error::Singular(format!("D block of vertex {i}")));
            }
            let factor = Matrix3::from_diagonal(&denom.map(|l| l.sqrt().recip())) * eig.eigenvectors.transpose();
            d_inv_blocks.push(factor.transpose() * factor);
            d_inv_factors.push(factor);
            reg_epsilon.push(eps);
        }
        Ok(Self {
            laplacian: topo.laplacian(),
            a_blocks: a_blocks(topo, g),
            d_blocks,
            d_inv_blocks,
            d_inv_factors,
            reg_epsilon,
            positions: g.clone(),
            topology: std::sync::Arc::clone(topo),
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.positions.n_vertices()
    }

    pub fn dim(&self) -> usize {
        self.positions.len()
    }

    pub fn laplacian(&self) -> &CsrMatrix {
        &self.laplacian
    }

    pub fn a_blocks(&self) -> &BlockCsr3 {
        &self.a_blocks
    }

    pub fn d_blocks(&self) -> &[Matrix3<f64>] {
        &self.d_blocks
    }

    pub fn d_inv_blocks(&self) -> &[Matrix3<f64>] {
        &self.d_inv_blocks
    }

    /// Per-block Tikhonov shift; zero where `D_ii` was well conditioned.
    pub fn reg_epsilons(&self) -> &[f64] {
        &self.reg_epsilon
    }

    pub fn max_reg_epsilon(&self) -> f64 {
        self.reg_epsilon.iter().copied().fold(0.0, f64::max)
    }

    pub fn positions(&self) -> &VertexField {
        &self.positions
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn a_apply(&self, x: &VertexField) -> VertexField {
        VertexField::from_vec(self.a_blocks.mul_vec(x.as_slice()))
    }

    pub fn a_transpose_apply(&self, c: &VertexField) -> VertexField {
        VertexField::from_vec(self.a_blocks.transpose_mul_vec(c.as_slice()))
    }

    pub fn d_inv_apply(&self, y: &VertexField) -> VertexField {
        VertexField::from_fn(self.n_vertices(), |i| {
            let f = &self.d_inv_factors[i];
            f.transpose() * (f * y.vertex(i))
        })
    }

    /// Matrix-free `H x`.
    pub fn apply(&self, x: &VertexField) -> Result<VertexField> {
        check_len("hessian_apply input", self.dim(), x.len())?;
        let lx = VertexField::from_vec(self.laplacian.kron_i3_mul(x.as_slice()));
        let ax = self.a_apply(x);
        let rot = self.a_transpose_apply(&self.d_inv_apply(&ax));
        let mut out = lx.scale(4.0);
        out.axpy(-2.0, &rot);
        Ok(out)
    }

    /// Dense `4 (L ⊗ I₃) − 2 (F A)ᵀ (F A)`, materialized from the blocks.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n_vertices();
        let mut f = DMatrix::zeros(3 * n, 3 * n);
        for (i, b) in self.d_inv_factors.iter().enumerate() {
            f.fixed_view_mut::<3, 3>(3 * i, 3 * i).copy_from(b);
        }
        let fa = f * self.a_blocks.to_dense();
        let l = self.laplacian.to_dense();
        let mut kron = DMatrix::zeros(3 * n, 3 * n);
        for i in 0..n {
            for j in 0..n {
                for c in 0..3 {
                    kron[(3 * i + c, 3 * j + c)] = l[(i, j)];
                }
            }
        }
        kron * 4.0 - fa.transpose() * fa * 2.0
    }
}

/// The six rigid motion fields of `g`: three unit translations followed by
/// the infinitesimal rotations `c × (g_i − ḡ)` about the coordinate axes.
pub fn rigid_fields(g: &VertexField) -> [VertexField; 6] {
    let n = g.n_vertices();
    let centroid = g.points().iter().sum::<Vector3<f64>>() / n as f64;
    let axes = [Vector3::x(), Vector3::y(), Vector3::z()];
    std::array::from_fn(|f| {
        if f < 3 {
            VertexField::from_fn(n, |_| axes[f])
        } else {
            VertexField::from_fn(n, |i| axes[f - 3].cross(&(g.vertex(i) - centroid)))
        }
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NullSpaceReport {
    pub n_vertices: usize,
    pub kernel_dimension: usize,
    pub max_eigenvalue: f64,
    pub min_eigenvalue: f64,
    pub translation_residuals: [f64; 3],
    pub rotation_residuals: [f64; 3],
    pub max_reg_epsilon: f64,
}

/// Dense eigen-analysis of `H`: eigenvalues below `1e-8 · λ_max` count as
/// kernel, and `‖H t‖`, `‖H r‖` are reported for the six rigid fields.
pub fn null_space_report(h: &ArapHessian) -> Result<NullSpaceReport> {
    let n = h.n_vertices();
    if n > DENSE_REPORT_LIMIT {
        return Err(Error::TooLarge {
            size: n,
            limit: DENSE_REPORT_LIMIT,
        });
    }
    let dense = h.to_dense();
    let sym = (&dense + dense.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    let kernel_dimension = eig.iter().filter(|&&l| l < 1e-8 * max.max(0.0)).count();
    let fields = rigid_fields(h.positions());
    let mut res = [0.0; 6];
    for (r, f) in res.iter_mut().zip(&fields) {
        *r = h.apply(f)?.norm();
    }
    Ok(NullSpaceReport {
        n_vertices: n,
        kernel_dimension,
        max_eigenvalue: max,
        min_eigenvalue: min,
        translation_residuals: [res[0], res[1], res[2]],
        rotation_residuals: [res[3], res[4], res[5]],
        max_reg_epsilon: h.max_reg_epsilon(),
    })
}

/// Hessian of `x ↦ min_y ½ [x; y]ᵀ M [x; y]`: the Schur complement
/// `M_xx − M_xy M_yy⁻¹ M_yx` of the lower-right `q × q` block.
pub fn schur_hessian(m: &DMatrix<f64>, p: usize) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() || p > m.nrows() {
        return Err(Error::Invalid(format!(
            "schur_hessian needs a square matrix with p <= size, got {}x{} and p = {p}",
            m.nrows(),
            m.ncols()
        )));
    }
    let q = m.nrows() - p;
    let mxx = m.view((0, 0), (p, p)).into_owned();
    if q == 0 {
        return Ok(mxx);
    }
    let mxy = m.view((0, p), (p, q)).into_owned();
    let myx = m.view((p, 0), (q, p)).into_owned();
    let myy = m.view((p, p), (q, q)).into_owned();
    let chol = myy
        .cholesky()
        .ok_or_else(|| Error::Singular("lower-right block is not positive definite".into()))?;
    Ok(mxx - mxy * chol.solve(&myx))
}

/// Rotation `exp(θ k×)` by Rodrigues' formula for a unit axis `k`.
pub fn rodrigues(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let k = axis.cross_matrix();
    Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}
