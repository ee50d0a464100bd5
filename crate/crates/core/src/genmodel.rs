//! Parametric mesh generators `g_θ: R^k → R^{3n}` with hand-written forward,
//! forward-mode and reverse-mode passes.
//!
//! Two families are supported: an affine map `g₀ + W z` and a tanh
//! multilayer perceptron with a linear output layer.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::mesh::VertexField;
use crate::spectral::GeneratorAdjoint;

pub const GENERATOR_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

/// Layer widths `k → h₁ → … → 3n` and the hidden activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    fn param_count(&self, kind: GeneratorKind) -> usize {
        match kind {
            GeneratorKind::Linear => self.widths[0] * self.widths[1] + self.widths[1],
            GeneratorKind::Mlp => self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    kind: GeneratorKind,
    arch: Architecture,
    theta: Vec<f64>,
}

/// Per-layer offsets into `theta`: `(weights, biases, fan_in, fan_out)`.
fn layer_offsets(widths: &[usize]) -> Vec<(usize, usize, usize, usize)> {
    let mut offset = 0;
    widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = offset;
            let biases = offset + fan_in * fan_out;
            offset = biases + fan_out;
            (weights, biases, fan_in, fan_out)
        })
        .collect()
}

impl Generator {
    /// `g(z) = g₀ + W z`. `theta` stores `W` column-major followed by `g₀`.
    pub fn linear(w: &DMatrix<f64>, g0: &VertexField) -> Result<Self> {
        check_len("linear generator offset", w.nrows(), g0.len())?;
        if w.ncols() == 0 {
            return Err(Error::Invalid("latent dimension must be at least 1".into()));
        }
        let mut theta = w.as_slice().to_vec();
        theta.extend_from_slice(g0.as_slice());
        Self::from_parts(
            GeneratorKind::Linear,
            Architecture {
                widths: vec![w.ncols(), w.nrows()],
                activation: Activation::Identity,
            },
            theta,
        )
    }

    /// Tanh MLP with Glorot-uniform weights and zero biases.
    pub fn mlp(latent_dim: usize, hidden: &[usize], output_dim: usize, seed: u64) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::Invalid("latent dimension must be at least 1".into()));
        }
        let mut widths = vec![latent_dim];
        widths.extend_from_slice(hidden);
        widths.push(output_dim);
        let arch = Architecture {
            widths,
            activation: Activation::Tanh,
        };
        let mut theta = vec![0.0; arch.param_count(GeneratorKind::Mlp)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (w, _, fan_in, fan_out) in layer_offsets(&arch.widths) {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut theta[w..w + fan_in * fan_out] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Self::from_parts(GeneratorKind::Mlp, arch, theta)
    }

    pub fn from_parts(kind: GeneratorKind, arch: Architecture, theta: Vec<f64>) -> Result<Self> {
        let ok_shape = match kind {
            GeneratorKind::Linear => arch.widths.len() == 2,
            GeneratorKind::Mlp => arch.widths.len() >= 2,
        };
        if !ok_shape || arch.widths.contains(&0) {
            return Err(Error::Invalid(format!(
                "invalid {kind:?} architecture {:?}",
                arch.widths
            )));
        }
        if !arch.widths.last().unwrap().is_multiple_of(3) {
            return Err(Error::Invalid("output dimension must be a multiple of 3".into()));
        }
        check_len("generator parameters", arch.param_count(kind), theta.len())?;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("generator parameters must be finite".into()));
        }
        Ok(Self { kind, arch, theta })
    }

    pub fn kind(&self) -> GeneratorKind {
        self.kind
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.arch.widths.last().unwrap()
    }

    pub fn n_vertices(&self) -> usize {
        self.output_dim() / 3
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    /// Sets the constant output term: `g₀` for the linear kind, the output
    /// bias for the MLP.
    pub fn set_output_offset(&mut self, offset: &VertexField) -> Result<()> {
        check_len("output offset", self.output_dim(), offset.len())?;
        let start = self.theta.len() - self.output_dim();
        self.theta[start..].copy_from_slice(offset.as_slice());
        Ok(())
    }

    /// `W` of the linear kind.
    pub fn linear_weights(&self) -> Option<DMatrix<f64>> {
        (self.kind == GeneratorKind::Linear).then(|| {
            let (k, m) = (self.latent_dim(), self.output_dim());
            DMatrix::from_column_slice(m, k, &self.theta[..m * k])
        })
    }

    fn check_latent(&self, z: &DVector<f64>) -> Result<()> {
        check_len("latent vector", self.latent_dim(), z.len())
    }

    fn check_cotangent(&self, c: &VertexField) -> Result<()> {
        check_len("output cotangent", self.output_dim(), c.len())
    }

    pub fn forward(&self, z: &DVector<f64>) -> Result<VertexField> {
        self.check_latent(z)?;
        Ok(VertexField::from_vec(match self.kind {
            GeneratorKind::Linear => self.linear_forward(z),
            GeneratorKind::Mlp => self.mlp_activations(z).pop().unwrap(),
        }))
    }

    fn linear_forward(&self, z: &DVector<f64>) -> Vec<f64> {
        let m = self.output_dim();
        let mut out = self.theta[m * z.len()..].to_vec();
        for (l, &zl) in z.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.theta[l * m..(l + 1) * m]) {
                *o += w * zl;
            }
        }
        out
    }

    /// Layer outputs `[z, a₁, …, g]`.
    fn mlp_activations(&self, z: &DVector<f64>) -> Vec<Vec<f64>> {
        let layers = layer_offsets(&self.arch.widths);
        let last = layers.len() - 1;
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(z.as_slice().to_vec());
        for (li, &(w, b, fan_in, fan_out)) in layers.iter().enumerate() {
            let input = acts.last().unwrap();
            let mut out = self.theta[b..b + fan_out].to_vec();
            for (o, slot) in out.iter_mut().enumerate() {
                let row = &self.theta[w + o * fan_in..w + (o + 1) * fan_in];
                *slot += row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>();
            }
            if li != last && self.arch.activation == Activation::Tanh {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }
        acts
    }

    /// Reverse pass for `cotangentᵀ g(z)`: gradients with respect to `θ` and `z`.
    pub fn vjp(&self, z: &DVector<f64>, cotangent: &VertexField) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_latent(z)?;
        self.check_cotangent(cotangent)?;
        let c = cotangent.as_slice();
        match self.kind {
            GeneratorKind::Linear => {
                let m = self.output_dim();
                let mut gt = Vec::with_capacity(self.n_params());
                for &zl in z.iter() {
                    gt.extend(c.iter().map(|ci| ci * zl));
                }
                gt.extend_from_slice(c);
                let gz = (0..z.len())
                    .map(|l| self.theta[l * m..(l + 1) * m].iter().zip(c).map(|(w, ci)| w * ci).sum())
                    .collect::<Vec<f64>>();
                Ok((DVector::from_vec(gt), DVector::from_vec(gz)))
            }
            GeneratorKind::Mlp => {
                let acts = self.mlp_activations(z);
                let layers = layer_offsets(&self.arch.widths);
                let mut grad = vec![0.0; self.n_params()];
                let mut delta = c.to_vec();
                for (li, &(w, b, fan_in, fan_out)) in layers.iter().enumerate().rev() {
                    let input = &acts[li];
                    grad[b..b + fan_out].copy_from_slice(&delta);
                    for o in 0..fan_out {
                        let d = delta[o];
                        if d != 0.0 {
                            for (gw, x) in grad[w + o * fan_in..w + (o + 1) * fan_in].iter_mut().zip(input) {
                                *gw = d * x;
                            }
                        }
                    }
                    let mut prev = vec![0.0; fan_in];
                    for (o, &d) in delta.iter().enumerate() {
                        if d != 0.0 {
                            for (p, wv) in prev.iter_mut().zip(&self.theta[w + o * fan_in..w + (o + 1) * fan_in]) {
                                *p += wv * d;
                            }
                        }
                    }
                    if li > 0 && self.arch.activation == Activation::Tanh {
                        for (p, a) in prev.iter_mut().zip(input) {
                            *p *= 1.0 - a * a;
                        }
                    }
                    delta = prev;
                }
                Ok((DVector::from_vec(grad), DVector::from_vec(delta)))
            }
        }
    }

    pub fn vjp_theta(&self, z: &DVector<f64>, cotangent: &VertexField) -> Result<DVector<f64>> {
        Ok(self.vjp(z, cotangent)?.0)
    }

    pub fn vjp_z(&self, z: &DVector<f64>, cotangent: &VertexField) -> Result<DVector<f64>> {
        Ok(self.vjp(z, cotangent)?.1)
    }

    /// Analytic forward-mode derivative `J(z) · dir`.
    pub fn jvp(&self, z: &DVector<f64>, dir: &DVector<f64>) -> Result<VertexField> {
        self.check_latent(z)?;
        self.check_latent(dir)?;
        match self.kind {
            GeneratorKind::Linear => {
                let w = self.linear_weights().unwrap();
                Ok(VertexField::from_vec((w * dir).as_slice().to_vec()))
            }
            GeneratorKind::Mlp => {
                let acts = self.mlp_activations(z);
                let layers = layer_offsets(&self.arch.widths);
                let last = layers.len() - 1;
                let mut t = dir.as_slice().to_vec();
                for (li, &(w, _, fan_in, fan_out)) in layers.iter().enumerate() {
                    let mut out: Vec<f64> = (0..fan_out)
                        .map(|o| {
                            self.theta[w + o * fan_in..w + (o + 1) * fan_in]
                                .iter()
                                .zip(&t)
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    if li != last && self.arch.activation == Activation::Tanh {
                        for (v, a) in out.iter_mut().zip(&acts[li + 1]) {
                            *v *= 1.0 - a * a;
                        }
                    }
                    t = out;
                }
                Ok(VertexField::from_vec(t))
            }
        }
    }

    /// `3n × k` Jacobian: exact for the linear kind, central differences
    /// with step `s` along each latent axis for the MLP.
    pub fn jacobian(&self, z: &DVector<f64>, s: f64) -> Result<DMatrix<f64>> {
        self.check_latent(z)?;
        if let Some(w) = self.linear_weights() {
            return Ok(w);
        }
        let k = self.latent_dim();
        let mut jac = DMatrix::zeros(self.output_dim(), k);
        for l in 0..k {
            let col = crate::spectral::directional_jacobian(
                |p| self.forward(p),
                z,
                &DVector::from_fn(k, |i, _| f64::from(i == l)),
                s,
            )?;
            jac.set_column(l, &DVector::from_column_slice(col.as_slice()));
        }
        Ok(jac)
    }

    /// Parameter gradient of `Σ_l C_lᵀ J_l(z)` for the Jacobian returned by
    /// [`Generator::jacobian`] with the same step.
    pub fn jacobian_vjp(&self, z: &DVector<f64>, s: f64, cotangent: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_latent(z)?;
        check_len("jacobian cotangent rows", self.output_dim(), cotangent.nrows())?;
        check_len("jacobian cotangent columns", self.latent_dim(), cotangent.ncols())?;
        if self.kind == GeneratorKind::Linear {
            let mut g = cotangent.as_slice().to_vec();
            g.resize(self.n_params(), 0.0);
            return Ok(DVector::from_vec(g));
        }
        let k = self.latent_dim();
        let mut grad = DVector::zeros(self.n_params());
        for l in 0..k {
            let col = cotangent.column(l);
            if col.iter().all(|&v| v == 0.0) {
                continue;
            }
            let c = VertexField::from_vec(col.iter().copied().collect());
            let e = DVector::from_fn(k, |i, _| f64::from(i == l)) * s;
            let plus = self.vjp_theta(&(z + &e), &c)?;
            let minus = self.vjp_theta(&(z - &e), &c)?;
            grad += (plus - minus) * (0.5 / s);
        }
        Ok(grad)
    }

    pub fn to_file(&self) -> GeneratorFile {
        let g0 = match self.kind {
            GeneratorKind::Linear => self.theta[self.theta.len() - self.output_dim()..].to_vec(),
            GeneratorKind::Mlp => Vec::new(),
        };
        GeneratorFile {
            version: GENERATOR_FORMAT_VERSION,
            kind: self.kind,
            arch: self.arch.clone(),
            k: self.latent_dim(),
            n: self.n_vertices(),
            theta: self.theta.clone(),
            g0,
        }
    }

    pub fn from_file(file: &GeneratorFile) -> Result<Self> {
        if file.version != GENERATOR_FORMAT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported generator format version {}",
                file.version
            )));
        }
        let gen = Self::from_parts(file.kind, file.arch.clone(), file.theta.clone())?;
        check_len("checkpoint latent dimension", gen.latent_dim(), file.k)?;
        check_len("checkpoint vertex count", gen.n_vertices(), file.n)?;
        Ok(gen)
    }
}

/// Serialized generator: `{version, kind, arch, k, n, theta, g0}`. For the
/// linear kind `g0` repeats the trailing offset block of `theta`; for the
/// MLP it is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorFile {
    pub version: u32,
    pub kind: GeneratorKind,
    pub arch: Architecture,
    pub k: usize,
    pub n: usize,
    pub theta: Vec<f64>,
    pub g0: Vec<f64>,
}

/// A generator evaluated at a fixed latent, exposing the two adjoints the
/// spectral gradient needs.
pub struct GeneratorPoint<'a> {
    pub generator: &'a Generator,
    pub z: &'a DVector<f64>,
    pub step: f64,
}

impl GeneratorAdjoint for GeneratorPoint<'_> {
    fn jacobian_vjp(&self, cotangent: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.generator.jacobian_vjp(self.z, self.step, cotangent)
    }

    fn position_vjp(&self, cotangent: &VertexField) -> Result<DVector<f64>> {
        self.generator.vjp_theta(self.z, cotangent)
    }
}

/// Latent samples with the seed that drew them; the seed also drives the
/// `δz` draws of [`smoothness_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub latents: Vec<DVector<f64>>,
    pub seed: u64,
}

impl LatentBatch {
    pub fn sample(k: usize, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latents = (0..count).map(|_| standard_normal(&mut rng, k)).collect();
        Self { latents, seed }
    }
}

pub fn standard_normal(rng: &mut impl Rng, k: usize) -> DVector<f64> {
    DVector::from_fn(k, |_, _| rng.sample(StandardNormal))
}

/// `g(z+δz) − 2g(z) + g(z−δz)`.
pub fn second_difference<F>(eval: F, z: &DVector<f64>, dz: &DVector<f64>) -> Result<VertexField>
where
    F: Fn(&DVector<f64>) -> Result<VertexField>,
{
    let mut r = &eval(&(z + dz))? + &eval(&(z - dz))?;
    r.axpy(-2.0, &eval(z)?);
    Ok(r)
}

/// Monte-Carlo estimate of `E ‖g(z+δz) − 2g(z) + g(z−δz)‖²`, `δz ∼ s·N_k`,
/// and its exact parameter gradient for the drawn samples.
pub fn smoothness_loss(gen: &Generator, batch: &LatentBatch, s: f64, n_delta: usize) -> Result<(f64, DVector<f64>)> {
    if n_delta == 0 {
        return Err(Error::Invalid("n_delta must be at least 1".into()));
    }
    let mut grad = DVector::zeros(gen.n_params());
    if gen.kind() == GeneratorKind::Linear || batch.latents.is_empty() {
        // second differences annihilate affine maps
        return Ok((0.0, grad));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(batch.seed ^ 0x05ee_d0fd_e17a);
    let k = gen.latent_dim();
    let mut total = 0.0;
    let count = (batch.latents.len() * n_delta) as f64;
    for z in &batch.latents {
        let center = gen.forward(z)?;
        for _ in 0..n_delta {
            let dz = standard_normal(&mut rng, k) * s;
            let (zp, zm) = (z + &dz, z - &dz);
            let mut r = &gen.forward(&zp)? + &gen.forward(&zm)?;
            r.axpy(-2.0, &center);
            total += r.dot(&r);
            let c = r.scale(2.0 / count);
            grad += gen.vjp_theta(&zp, &c)? + gen.vjp_theta(&zm, &c)? - gen.vjp_theta(z, &c)? * 2.0;
        }
    }
    Ok((total / count, grad))
}
