//! Workflows behind the `arapreg` command line: synthetic bending bars,
//! evaluation, interpolation, extrapolation, gradient checks and Hessian
//! diagnostics.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arap::{self, a_apply_at, arap_energy, d_blocks, dd_quadratic_form, ArapHessian, NullSpaceReport};
use crate::error::{check_len, Error, Result};
use crate::genmodel::{smoothness_loss, standard_normal, Generator, LatentBatch};
use crate::mesh::{cylinder, tube_faces, Mesh, VertexField};
use crate::spectral::{self, FaultInjection};
use crate::trainer::{
    self, arap_to_base_loss, arapreg_loss_with_fault, refine_latent, Checkpoint, ReconNorm, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    BendingBar,
}

/// A tube whose centerline is a circular arc. `bend` is the total turning
/// angle of the arc (pose); length and radius scales are shape parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticFamilySpec {
    pub family: Family,
    /// Cross-section rings along the bar.
    pub segments: usize,
    pub ring_vertices: usize,
    pub length: f64,
    pub radius: f64,
    pub bend_range: [f64; 2],
    pub length_scale_range: [f64; 2],
    pub radius_scale_range: [f64; 2],
    pub samples: usize,
    pub seed: u64,
}

impl Default for SyntheticFamilySpec {
    fn default() -> Self {
        Self {
            family: Family::BendingBar,
            segments: 20,
            ring_vertices: 10,
            length: 2.0,
            radius: 0.05,
            bend_range: [0.0, 0.6],
            length_scale_range: [0.9, 1.1],
            radius_scale_range: [0.8, 1.2],
            samples: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarParams {
    pub bend: f64,
    pub length_scale: f64,
    pub radius_scale: f64,
}

impl SyntheticFamilySpec {
    pub fn validate(&self) -> Result<()> {
        if self.segments < 2 || self.ring_vertices < 3 {
            return Err(Error::Invalid("a bar needs at least 2 rings of 3 vertices".into()));
        }
        if !(self.length > 0.0 && self.radius > 0.0) {
            return Err(Error::Invalid("bar length and radius must be positive".into()));
        }
        for (name, [lo, hi]) in [
            ("bend_range", self.bend_range),
            ("length_scale_range", self.length_scale_range),
            ("radius_scale_range", self.radius_scale_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Invalid(format!("{name} must be a finite [lo, hi] interval")));
            }
        }
        if self.length_scale_range[0] <= 0.0 || self.radius_scale_range[0] <= 0.0 {
            return Err(Error::Invalid("scale ranges must be positive".into()));
        }
        Ok(())
    }

    /// Vertex positions of one bar, ring-major.
    pub fn bar_positions(&self, p: &BarParams) -> VertexField {
        let len = self.length * p.length_scale;
        let rad = self.radius * p.radius_scale;
        let kappa = p.bend / len;
        let mut out = VertexField::zeros(self.segments * self.ring_vertices);
        for r in 0..self.segments {
            let t = len * (r as f64 / (self.segments - 1) as f64 - 0.5);
            let a = kappa * t;
            let center = if kappa.abs() < 1e-12 {
                Vector3::new(0.5 * kappa * t * t, 0.0, t)
            } else {
                Vector3::new((1.0 - a.cos()) / kappa, 0.0, a.sin() / kappa)
            };
            let normal = Vector3::new(a.cos(), 0.0, -a.sin());
            let binormal = Vector3::y();
            for k in 0..self.ring_vertices {
                let phi = std::f64::consts::TAU * k as f64 / self.ring_vertices as f64;
                out.set_vertex(
                    r * self.ring_vertices + k,
                    center + rad * (phi.cos() * normal + phi.sin() * binormal),
                );
            }
        }
        out
    }

    pub fn bar_mesh(&self, p: &BarParams) -> Result<Mesh> {
        Mesh::new(
            self.bar_positions(p).points(),
            tube_faces(self.segments, self.ring_vertices),
        )
    }

    /// Seeded uniform draws inside the declared ranges.
    pub fn sample_params(&self) -> Vec<BarParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut draw = |[lo, hi]: [f64; 2]| if lo == hi { lo } else { rng.random_range(lo..hi) };
        (0..self.samples)
            .map(|_| BarParams {
                bend: draw(self.bend_range),
                length_scale: draw(self.length_scale_range),
                radius_scale: draw(self.radius_scale_range),
            })
            .collect()
    }

    pub fn generate(&self) -> Result<Vec<(BarParams, Mesh)>> {
        self.validate()?;
        self.sample_params()
            .into_iter()
            .map(|p| Ok((p, self.bar_mesh(&p)?)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub params: BarParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SyntheticFamilySpec,
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `sample_NNNN.obj` files and the manifest into `outdir`.
pub fn write_dataset(spec: &SyntheticFamilySpec, outdir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(outdir)?;
    let mut samples = Vec::new();
    for (i, (params, mesh)) in spec.generate()?.into_iter().enumerate() {
        let file = format!("sample_{i:04}.obj");
        mesh.save_obj(outdir.join(&file))?;
        samples.push(ManifestEntry { file, params });
    }
    let manifest = Manifest {
        spec: spec.clone(),
        samples,
    };
    std::fs::write(outdir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// All `*.obj` files of `dir`, sorted by file name.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, Mesh)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("obj")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Invalid(format!("no OBJ files in {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, Mesh::load_obj(&p)?))
        })
        .collect()
}

/// Sorted edge lengths of a mesh.
pub fn edge_length_multiset(mesh: &Mesh) -> Vec<f64> {
    let v = mesh.vertices();
    let mut lengths: Vec<f64> = mesh.edges().iter().map(|&(i, j)| (v[i] - v[j]).norm()).collect();
    lengths.sort_by(f64::total_cmp);
    lengths
}

/// `Σ |a_i − b_i| / Σ |b_i|` over sorted edge lengths.
pub fn edge_length_deviation(a: &Mesh, b: &Mesh) -> Result<f64> {
    let (la, lb) = (edge_length_multiset(a), edge_length_multiset(b));
    check_len("edge count", lb.len(), la.len())?;
    let num: f64 = la.iter().zip(&lb).map(|(x, y)| (x - y).abs()).sum();
    Ok(num / lb.iter().sum::<f64>())
}

fn check_connectivity(template: &Mesh, other: &Mesh, what: &str) -> Result<()> {
    if !template.shares_connectivity(other) {
        return Err(Error::Topology(format!("{what} does not share the model connectivity")));
    }
    Ok(())
}

/// Mean per-vertex Euclidean distance.
pub fn mean_vertex_error(a: &VertexField, b: &VertexField) -> Result<f64> {
    Ok(trainer::reconstruction_loss(a, b, ReconNorm::L1Vertex)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interpolation {
    pub frames: Vec<VertexField>,
    /// ARAP energy of each consecutive frame pair.
    pub step_energies: Vec<f64>,
    pub total_energy: f64,
}

/// Frames `g((1 − t) z_a + t z_b)` on a uniform grid of `steps` values.
pub fn interpolate_latents(
    gen: &Generator,
    template: &Mesh,
    za: &DVector<f64>,
    zb: &DVector<f64>,
    steps: usize,
) -> Result<Interpolation> {
    if steps < 2 {
        return Err(Error::Invalid(format!(
            "interpolation needs at least 2 steps, got {steps}"
        )));
    }
    let delta = zb - za;
    let frames = (0..steps)
        .map(|i| match i {
            0 => gen.forward(za),
            i if i == steps - 1 => gen.forward(zb),
            i => gen.forward(&(za + &delta * (i as f64 / (steps - 1) as f64))),
        })
        .collect::<Result<Vec<_>>>()?;
    let step_energies = frames
        .par_windows(2)
        .map(|w| arap_energy(&template.with_positions(&w[0])?, &(&w[1] - &w[0])))
        .collect::<Result<Vec<_>>>()?;
    Ok(Interpolation {
        total_energy: step_energies.iter().sum(),
        frames,
        step_energies,
    })
}

pub fn interpolate(gen: &Generator, cfg: &TrainConfig, a: &Mesh, b: &Mesh, steps: usize) -> Result<Interpolation> {
    check_connectivity(a, b, "second endpoint")?;
    let za = refine_latent(gen, a, cfg)?;
    let zb = refine_latent(gen, b, cfg)?;
    interpolate_latents(gen, a, &za, &zb, steps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extrapolation {
    pub reconstruction: VertexField,
    pub samples: Vec<VertexField>,
    /// ARAP energy of each sample relative to the reconstruction.
    pub energies: Vec<f64>,
}

/// Per-dimension population standard deviation of the training latents.
pub fn latent_scale(latents: &[DVector<f64>]) -> Result<DVector<f64>> {
    if latents.len() < 2 {
        return Err(Error::Invalid(
            "extrapolation needs the training latents of the checkpoint".into(),
        ));
    }
    let m = latents.len() as f64;
    let mean = latents.iter().fold(DVector::zeros(latents[0].len()), |a, z| a + z) / m;
    let var = latents.iter().fold(DVector::zeros(mean.len()), |a: DVector<f64>, z| {
        a + (z - &mean).map(|d| d * d)
    }) / m;
    Ok(var.map(f64::sqrt))
}

pub fn extrapolate_latent(
    gen: &Generator,
    template: &Mesh,
    z: &DVector<f64>,
    scale: &DVector<f64>,
    count: usize,
    sigma: f64,
    seed: u64,
) -> Result<Extrapolation> {
    if count == 0 {
        return Err(Error::Invalid("extrapolation count must be at least 1".into()));
    }
    check_len("latent scale", z.len(), scale.len())?;
    let reconstruction = gen.forward(z)?;
    let base = template.with_positions(&reconstruction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latents: Vec<DVector<f64>> = (0..count)
        .map(|_| z + standard_normal(&mut rng, z.len()).component_mul(scale) * sigma)
        .collect();
    let samples = latents.iter().map(|zs| gen.forward(zs)).collect::<Result<Vec<_>>>()?;
    let energies = samples
        .par_iter()
        .map(|s| arap_energy(&base, &(s - &reconstruction)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Extrapolation {
        reconstruction,
        samples,
        energies,
    })
}

pub fn extrapolate(ck: &Checkpoint, mesh: &Mesh, count: usize, sigma: f64, seed: u64) -> Result<Extrapolation> {
    let gen = ck.generator()?;
    let scale = latent_scale(&ck.latent_vectors())?;
    let z = refine_latent(&gen, mesh, &ck.config)?;
    extrapolate_latent(&gen, mesh, &z, &scale, count, sigma, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeError {
    pub name: String,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_shape: Vec<ShapeError>,
    pub mean_error: f64,
    pub median_error: f64,
    /// Total path energy between refined shapes `2i` and `2i + 1`.
    pub interpolation_energies: Vec<f64>,
    /// Energies of extrapolated samples around the first shape.
    pub extrapolation_energies: Vec<f64>,
    pub config: TrainConfig,
}

pub const EVAL_INTERPOLATION_STEPS: usize = 10;
pub const EVAL_EXTRAPOLATION_COUNT: usize = 4;

/// Refines a latent per shape, then reports reconstruction, interpolation
/// and extrapolation diagnostics.
pub fn evaluate(ck: &Checkpoint, dataset: &[(String, Mesh)]) -> Result<EvalReport> {
    let (_, template) = dataset
        .first()
        .ok_or_else(|| Error::Invalid("evaluation dataset is empty".into()))?;
    let gen = ck.generator()?;
    check_len("dataset vertices", gen.n_vertices(), template.n_vertices())?;
    for (name, mesh) in dataset {
        check_connectivity(template, mesh, name)?;
    }
    let cfg = &ck.config;
    let latents = dataset
        .par_iter()
        .map(|(_, mesh)| refine_latent(&gen, mesh, cfg))
        .collect::<Result<Vec<_>>>()?;
    let per_shape = dataset
        .iter()
        .zip(&latents)
        .map(|((name, mesh), z)| {
            Ok(ShapeError {
                name: name.clone(),
                error: mean_vertex_error(&gen.forward(z)?, &mesh.positions())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sorted: Vec<f64> = per_shape.iter().map(|s| s.error).collect();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median_error = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    let interpolation_energies = latents
        .chunks_exact(2)
        .map(|p| Ok(interpolate_latents(&gen, template, &p[0], &p[1], EVAL_INTERPOLATION_STEPS)?.total_energy))
        .collect::<Result<Vec<_>>>()?;
    let extrapolation_energies = match latent_scale(&ck.latent_vectors()) {
        Ok(scale) => {
            extrapolate_latent(
                &gen,
                template,
                &latents[0],
                &scale,
                EVAL_EXTRAPOLATION_COUNT,
                cfg.sigma,
                cfg.seed,
            )?
            .energies
        }
        Err(_) => Vec::new(),
    };
    Ok(EvalReport {
        mean_error: sorted.iter().sum::<f64>() / m as f64,
        median_error,
        per_shape,
        interpolation_energies,
        extrapolation_energies,
        config: cfg.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianReport {
    pub null_space: NullSpaceReport,
    pub spectrum: Option<Vec<f64>>,
    pub trace: Option<f64>,
    pub robust_half: Option<f64>,
}

/// Reads a `3n × k` matrix stored as a JSON array of rows.
pub fn parse_jacobian(text: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(text)?;
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 {
        return Err(Error::Invalid("jacobian must be a nonempty array of rows".into()));
    }
    for row in &rows {
        check_len("jacobian row", ncols, row.len())?;
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn hessian_report(mesh: &Mesh, jacobian: Option<&DMatrix<f64>>) -> Result<HessianReport> {
    let h = ArapHessian::assemble(mesh)?;
    let null_space = arap::null_space_report(&h)?;
    let mut report = HessianReport {
        null_space,
        spectrum: None,
        trace: None,
        robust_half: None,
    };
    if let Some(j) = jacobian {
        let r = spectral::reduce(&h, j)?;
        let s = spectral::eigdecompose(&r)?;
        report.spectrum = Some(s.eigenvalues().iter().copied().collect());
        report.trace = Some(spectral::l2_regularizer(&r));
        report.robust_half = Some(spectral::robust_regularizer(&s, 0.5)?);
    }
    Ok(report)
}

/// Reduced-Hessian eigenvalues along the bend and radius directions of the
/// procedural bar, with `|cos|` of each direction against its eigenvector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseShapeAlignment {
    pub params: BarParams,
    pub eigenvalues: [f64; 2],
    pub bend_eigenvalue: f64,
    pub bend_alignment: f64,
    pub radius_eigenvalue: f64,
    pub radius_alignment: f64,
    /// Both directions aligned (`|cos| > 0.9`) with distinct eigenvectors and
    /// the bend eigenvalue strictly smaller.
    pub pose_softer: bool,
}

pub const ALIGNMENT_THRESHOLD: f64 = 0.9;

pub fn pose_shape_alignment(spec: &SyntheticFamilySpec, params: &BarParams, step: f64) -> Result<PoseShapeAlignment> {
    let mesh = spec.bar_mesh(params)?;
    let column = |f: &dyn Fn(f64) -> BarParams| {
        let d = &spec.bar_positions(&f(step)) - &spec.bar_positions(&f(-step));
        d.scale(0.5 / step).to_dvector()
    };
    let bend = column(&|h| BarParams {
        bend: params.bend + h,
        ..*params
    });
    let radius = column(&|h| BarParams {
        radius_scale: params.radius_scale + h,
        ..*params
    });
    let j = DMatrix::from_columns(&[bend, radius]);
    let h = ArapHessian::assemble(&mesh)?;
    let s = spectral::eigdecompose(&spectral::reduce(&h, &j)?)?;
    let u = s.eigenvectors();
    let bend_idx = if u[(0, 0)].abs() >= u[(0, 1)].abs() { 0 } else { 1 };
    let radius_idx = if u[(1, 0)].abs() >= u[(1, 1)].abs() { 0 } else { 1 };
    let bend_alignment = u[(0, bend_idx)].abs();
    let radius_alignment = u[(1, radius_idx)].abs();
    let lam = s.eigenvalues();
    Ok(PoseShapeAlignment {
        params: *params,
        eigenvalues: [lam[0], lam[1]],
        bend_eigenvalue: lam[bend_idx],
        bend_alignment,
        radius_eigenvalue: lam[radius_idx],
        radius_alignment,
        pose_softer: bend_idx != radius_idx
            && bend_alignment > ALIGNMENT_THRESHOLD
            && radius_alignment > ALIGNMENT_THRESHOLD
            && lam[bend_idx] < lam[radius_idx],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub latent_dim: usize,
    pub flip_dd_term: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            latent_dim: 3,
            flip_dd_term: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub options: GradcheckOptions,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failed(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }
}

const FD_STEP: f64 = 1e-6;

fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

fn gaussian_field(rng: &mut ChaCha8Rng, n: usize) -> VertexField {
    VertexField::from_vec(standard_normal(rng, 3 * n).as_slice().to_vec())
}

fn fd_theta(gen: &Generator, f: impl Fn(&Generator) -> Result<f64> + Sync) -> Result<DVector<f64>> {
    let parts = (0..gen.n_params())
        .into_par_iter()
        .map(|p| {
            let mut a = gen.clone();
            let mut b = gen.clone();
            a.theta_mut()[p] += FD_STEP;
            b.theta_mut()[p] -= FD_STEP;
            Ok((f(&a)? - f(&b)?) / (2.0 * FD_STEP))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(DVector::from_vec(parts))
}

/// `f(x) = min_y ½ [x; y]ᵀ M [x; y]` by coordinate-wise zooming grids.
fn brute_force_min(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let p = x.len();
    let q = m.nrows() - p;
    let value = |y: &DVector<f64>| {
        let v = DVector::from_iterator(p + q, x.iter().chain(y.iter()).copied());
        0.5 * v.dot(&(m * &v))
    };
    let mut y = DVector::zeros(q);
    let mut width = 10.0;
    for _ in 0..60 {
        for c in 0..q {
            let mut best = (value(&y), y[c]);
            let center = y[c];
            for s in -20..=20 {
                let mut trial = y.clone();
                trial[c] = center + width * s as f64 / 20.0;
                let v = value(&trial);
                if v < best.0 {
                    best = (v, trial[c]);
                }
            }
            y[c] = best.1;
        }
        width *= 0.5;
    }
    value(&y)
}

struct Checks {
    results: Vec<CheckResult>,
}

impl Checks {
    fn push(&mut self, name: &str, error: f64, tolerance: f64) {
        let passed = error.is_finite() && error <= tolerance;
        log::info!(
            "{name}: error {error:.3e} (tolerance {tolerance:.1e}) {}",
            if passed { "pass" } else { "FAIL" }
        );
        self.results.push(CheckResult {
            name: name.to_string(),
            error,
            tolerance,
            passed,
        });
    }
}

/// Runs the whole oracle suite on a seeded configuration.
pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.latent_dim == 0 {
        return Err(Error::Invalid("latent_dim must be at least 1".into()));
    }
    let fault = FaultInjection {
        flip_dd_term: opts.flip_dd_term,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let base = cylinder(4, 5, 1.0, 2.0);
    let n = base.n_vertices();
    let mut g = base.positions();
    g.axpy(0.05, &gaussian_field(&mut rng, n));
    let mesh = base.with_positions(&g)?;
    let topo = mesh.topology().clone();
    let mut checks = Checks { results: Vec::new() };

    // second-order expansion of the ARAP energy
    let h = ArapHessian::assemble(&mesh)?;
    let eps = 1e-3;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let d = gaussian_field(&mut rng, n);
        let quad = 0.5 * eps * eps * d.dot(&h.apply(&d)?);
        let f = arap_energy(&mesh, &d.scale(eps))?;
        worst = worst.max((f - quad).abs() / quad.abs().max(1e-300));
    }
    checks.push("arap_taylor", worst, 10.0 * eps);

    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (gg, a) = (gaussian_field(&mut rng, n), gaussian_field(&mut rng, n));
        let lhs = a_apply_at(&topo, &gg, &a);
        let rhs = a_apply_at(&topo, &a, &gg);
        worst = worst.max((&lhs + &rhs).norm() / lhs.norm().max(1.0));
    }
    checks.push("a_identity", worst, 1e-12);

    // dD directional form and the position gradient used by the regularizer
    let (dg, c) = (gaussian_field(&mut rng, n), gaussian_field(&mut rng, n));
    let form = |gp: &VertexField| {
        d_blocks(&topo, gp)
            .iter()
            .enumerate()
            .map(|(i, b)| c.vertex(i).dot(&(b * c.vertex(i))))
            .sum::<f64>()
    };
    let fd_dir = (form(&(&g + &dg.scale(FD_STEP))) - form(&(&g - &dg.scale(FD_STEP)))) / (2.0 * FD_STEP);
    let form_err = (dd_quadratic_form(&topo, &g, &dg, &c) - fd_dir).abs() / fd_dir.abs().max(1e-12);
    let fd_grad = DVector::from_fn(3 * n, |p, _| {
        let mut e = VertexField::zeros(n);
        e.as_mut_slice()[p] = FD_STEP;
        2.0 * (form(&(&g + &e)) - form(&(&g - &e))) / (2.0 * FD_STEP)
    });
    let analytic = spectral::dd_term_cotangent(&h, &c, fault).to_dvector();
    checks.push("dd_form", form_err.max(rel_err(&analytic, &fd_grad)), 1e-5);

    let b = DMatrix::from_fn(4, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
    let m = &b * b.transpose() + DMatrix::identity(4, 4);
    let schur = arap::schur_hessian(&m, 2)?;
    let hs = 1e-2;
    let brute = DMatrix::from_fn(2, 2, |i, j| {
        let mut ei = DVector::zeros(2);
        let mut ej = DVector::zeros(2);
        ei[i] = hs;
        ej[j] = hs;
        let f = |x: DVector<f64>| brute_force_min(&m, &x);
        (f(&ei + &ej) - f(&ei - &ej) - f(-&ei + &ej) + f(-&ei - &ej)) / (4.0 * hs * hs)
    });
    checks.push("schur", (&schur - &brute).norm() / schur.norm(), 1e-4);

    // eigenvalue differential against finite differences of the reduced
    // Hessian itself, independent of the dA / dD expansion
    let k = opts.latent_dim;
    let j0 = DMatrix::from_fn(3 * n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let dj = DMatrix::from_fn(3 * n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let dgp = gaussian_field(&mut rng, n).scale(0.1);
    let alpha = 0.5;
    let reduced = |t: f64| -> Result<DMatrix<f64>> {
        let ht = ArapHessian::assemble_at(&mesh, &(&g + &dgp.scale(t)))?;
        Ok(spectral::reduce(&ht, &(&j0 + &dj * t))?.matrix().clone())
    };
    let s0 = spectral::eigdecompose_matrix(&reduced(0.0)?)?;
    let dm = (reduced(FD_STEP)? - reduced(-FD_STEP)?) / (2.0 * FD_STEP);
    let weights = spectral::eigen_weights(&s0, alpha);
    let predicted: f64 = (0..k)
        .map(|i| {
            let u = s0.eigenvectors().column(i);
            weights[i] * u.dot(&(&dm * u))
        })
        .sum();
    let value =
        |t: f64| -> Result<f64> { spectral::robust_regularizer(&spectral::eigdecompose_matrix(&reduced(t)?)?, alpha) };
    let observed = (value(FD_STEP)? - value(-FD_STEP)?) / (2.0 * FD_STEP);
    checks.push(
        "eigen_gradient",
        (predicted - observed).abs() / observed.abs().max(1e-12),
        1e-5,
    );

    // generator gradients
    let mut gen = Generator::mlp(k, &[5], 3 * n, opts.seed)?;
    gen.set_output_offset(&g)?;
    for v in gen.theta_mut() {
        *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
    }
    let z = standard_normal(&mut rng, k);
    let cot = gaussian_field(&mut rng, n);
    let (gt, gz) = gen.vjp(&z, &cot)?;
    checks.push(
        "vjp_theta",
        rel_err(&gt, &fd_theta(&gen, |p| Ok(p.forward(&z)?.dot(&cot)))?),
        1e-5,
    );
    let fd_z = DVector::from_fn(k, |l, _| {
        let mut e = DVector::zeros(k);
        e[l] = FD_STEP;
        (gen.forward(&(&z + &e)).map_or(f64::NAN, |f| f.dot(&cot))
            - gen.forward(&(&z - &e)).map_or(f64::NAN, |f| f.dot(&cot)))
            / (2.0 * FD_STEP)
    });
    checks.push("vjp_z", rel_err(&gz, &fd_z), 1e-5);
    let cfg = TrainConfig {
        n_z: 2,
        seed: opts.seed,
        ..TrainConfig::default()
    };
    let cj = DMatrix::from_fn(3 * n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let jv = gen.jacobian_vjp(&z, cfg.s, &cj)?;
    checks.push(
        "jacobian_vjp",
        rel_err(&jv, &fd_theta(&gen, |p| Ok(p.jacobian(&z, cfg.s)?.dot(&cj)))?),
        1e-5,
    );

    let batch = LatentBatch::sample(k, 3, opts.seed.wrapping_add(1));
    let (_, sg) = smoothness_loss(&gen, &batch, cfg.s, cfg.n_delta)?;
    checks.push(
        "smoothness_gradient",
        rel_err(
            &sg,
            &fd_theta(&gen, |p| Ok(smoothness_loss(p, &batch, cfg.s, cfg.n_delta)?.0))?,
        ),
        1e-4,
    );

    let loss_seed = opts.seed.wrapping_add(2);
    let est = arapreg_loss_with_fault(&gen, &mesh, &cfg, loss_seed, fault)?;
    let fd = fd_theta(&gen, |p| Ok(trainer::arapreg_loss(p, &mesh, &cfg, loss_seed)?.value))?;
    checks.push("arapreg_loss_gradient", rel_err(&est.grad, &fd), 2e-3);

    let base_grad = arap_to_base_loss(&gen, &mesh, &cfg, loss_seed)?.grad;
    let fd = fd_theta(&gen, |p| Ok(arap_to_base_loss(p, &mesh, &cfg, loss_seed)?.value))?;
    checks.push("arap_to_base_gradient", rel_err(&base_grad, &fd), 1e-3);

    let theta = 1e-3;
    let axis = Unit::new_normalize(Vector3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    ));
    let exact: Matrix3<f64> = Rotation3::from_axis_angle(&axis, theta).into_inner();
    let kx = axis.cross_matrix() * theta;
    let second_order = Matrix3::identity() + kx + kx * kx * 0.5;
    let formula_gap = (arap::rodrigues(&axis, theta) - exact).norm();
    checks.push(
        "rodrigues",
        ((exact - second_order).norm() + formula_gap) / theta.powi(3),
        1.0,
    );

    let results = checks.results;
    Ok(GradcheckReport {
        options: *opts,
        passed: results.iter().all(|c| c.passed),
        checks: results,
    })
}
