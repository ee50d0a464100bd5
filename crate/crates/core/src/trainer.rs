//! Loss assembly, Adam, auto-decoder alternating minimization and latent
//! refinement.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arap::{energy_at_rotations, energy_gradient_at_rotations, fit_rotations, ArapHessian};
use crate::error::{check_len, Error, Result};
use crate::genmodel::{
    smoothness_loss, standard_normal, Generator, GeneratorFile, GeneratorKind, GeneratorPoint, LatentBatch,
};
use crate::mesh::{Mesh, VertexField};
use crate::spectral::{self, FaultInjection};

pub const KL_VARIANCE_FLOOR: f64 = 1e-6;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const LOSS_CSV_HEADER: &str = "epoch,recon,smooth,spectral,kl,total";

const EVAL_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconNorm {
    /// Mean per-vertex Euclidean distance.
    L1Vertex,
    /// Sum of per-vertex Euclidean distances.
    L1Sum,
    /// Mean squared per-coordinate error.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerMode {
    None,
    /// Trace of the reduced Hessian (`α = 1`).
    L2,
    /// `Σ λᵢ^α` with the configured `α`.
    Robust,
    /// ARAP energy of generated shapes against the first training mesh.
    ArapToBase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub s: f64,
    #[serde(rename = "lambda_R", alias = "lambda_r")]
    pub lambda_r: f64,
    pub lambda_reg: f64,
    #[serde(rename = "lambda_KL", alias = "lambda_kl")]
    pub lambda_kl: f64,
    pub alpha: f64,
    pub recon_norm: ReconNorm,
    pub n_z: usize,
    pub n_delta: usize,
    pub alternating_iters: usize,
    pub epochs_per_phase: usize,
    pub lr_theta: f64,
    pub lr_z: f64,
    pub seed: u64,
    /// Relative eigenvalue floor inside `λ^(α−1)`.
    pub eig_floor: f64,
    pub sigma: f64,
    pub regularizer_mode: RegularizerMode,
    pub generator_kind: GeneratorKind,
    pub hidden_widths: Vec<usize>,
    pub latent_dim: usize,
    /// Training shapes per optimizer step.
    pub batch_size: usize,
    /// Adam iterations of latent refinement.
    pub refine_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            s: 0.05,
            lambda_r: 1.0,
            lambda_reg: 10.0,
            lambda_kl: 1.0,
            alpha: 0.5,
            recon_norm: ReconNorm::L1Vertex,
            n_z: 4,
            n_delta: 1,
            alternating_iters: 30,
            epochs_per_phase: 1,
            lr_theta: 1e-3,
            lr_z: 1e-2,
            seed: 0,
            eig_floor: spectral::EIG_FLOOR_RELATIVE,
            sigma: 0.2,
            regularizer_mode: RegularizerMode::Robust,
            generator_kind: GeneratorKind::Mlp,
            hidden_widths: vec![64],
            latent_dim: 6,
            batch_size: 5,
            refine_iters: 500,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let scalars = [
            ("s", self.s),
            ("lambda_R", self.lambda_r),
            ("lambda_reg", self.lambda_reg),
            ("lambda_KL", self.lambda_kl),
            ("alpha", self.alpha),
            ("lr_theta", self.lr_theta),
            ("lr_z", self.lr_z),
            ("eig_floor", self.eig_floor),
            ("sigma", self.sigma),
        ];
        if let Some((name, v)) = scalars.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid(format!(
                "{name} must be finite and non-negative, got {v}"
            )));
        }
        let positive = [
            ("s", self.s),
            ("lr_theta", self.lr_theta),
            ("lr_z", self.lr_z),
            ("eig_floor", self.eig_floor),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v <= 0.0) {
            return Err(Error::Invalid(format!("{name} must be positive")));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Invalid(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        let counts = [
            ("n_z", self.n_z),
            ("n_delta", self.n_delta),
            ("latent_dim", self.latent_dim),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("{name} must be at least 1")));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::Invalid("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Exponent of the spectral term: 1 in L2 mode, `alpha` otherwise.
    pub fn effective_alpha(&self) -> f64 {
        match self.regularizer_mode {
            RegularizerMode::L2 => 1.0,
            _ => self.alpha,
        }
    }
}

/// Value and parameter gradient of a loss term.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: DVector<f64>,
}

/// The two parts of the rigidity regularizer and the gradient of
/// `smooth + λ_R · spectral`.
#[derive(Debug, Clone)]
pub struct RegularizerEstimate {
    pub smooth: f64,
    pub spectral: f64,
    pub value: f64,
    pub grad: DVector<f64>,
}

fn sample_latents(k: usize, n_z: usize, seed: u64) -> (Vec<DVector<f64>>, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latents = (0..n_z).map(|_| standard_normal(&mut rng, k)).collect();
    (latents, rng.next_u64())
}

/// Ordered reduction of per-sample `(value, gradient)` pairs into their mean.
fn mean_of(parts: Vec<(f64, DVector<f64>)>, n_params: usize) -> LossGrad {
    let count = parts.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad = DVector::zeros(n_params);
    for (v, g) in parts {
        value += v;
        grad += g;
    }
    LossGrad {
        value: value / count,
        grad: grad / count,
    }
}

/// Spectral term `Σ λᵢ^α(Jᵀ H J)` at one latent and its parameter gradient.
pub fn spectral_sample(
    gen: &Generator,
    template: &Mesh,
    z: &DVector<f64>,
    cfg: &TrainConfig,
    fault: FaultInjection,
) -> Result<(f64, DVector<f64>)> {
    let g = gen.forward(z)?;
    let j = gen.jacobian(z, cfg.s)?;
    let h = ArapHessian::assemble_at(template, &g)?;
    let r = spectral::reduce(&h, &j)?;
    let s = spectral::eigdecompose(&r)?.with_floor_relative(cfg.eig_floor);
    let alpha = cfg.effective_alpha();
    let value = spectral::robust_regularizer(&s, alpha)?;
    let point = GeneratorPoint {
        generator: gen,
        z,
        step: cfg.s,
    };
    let grad = spectral::regularizer_gradient(&s, &r, &h, alpha, &point, fault)?;
    Ok((value, grad))
}

/// Monte-Carlo estimate over `n_z` prior draws of
/// `smoothness + λ_R · Σ λᵢ^α`, with every draw fixed by `seed`.
pub fn arapreg_loss(gen: &Generator, template: &Mesh, cfg: &TrainConfig, seed: u64) -> Result<RegularizerEstimate> {
    arapreg_loss_with_fault(gen, template, cfg, seed, FaultInjection::default())
}

pub fn arapreg_loss_with_fault(
    gen: &Generator,
    template: &Mesh,
    cfg: &TrainConfig,
    seed: u64,
    fault: FaultInjection,
) -> Result<RegularizerEstimate> {
    check_len("template vertices", gen.n_vertices(), template.n_vertices())?;
    let (latents, batch_seed) = sample_latents(gen.latent_dim(), cfg.n_z, seed);
    let batch = LatentBatch {
        latents,
        seed: batch_seed,
    };
    let (smooth, mut grad) = smoothness_loss(gen, &batch, cfg.s, cfg.n_delta)?;
    let mut value = smooth;
    let mut spectral_value = 0.0;
    if cfg.lambda_r != 0.0 {
        let parts = batch
            .latents
            .par_iter()
            .map(|z| spectral_sample(gen, template, z, cfg, fault))
            .collect::<Result<Vec<_>>>()?;
        let spec = mean_of(parts, gen.n_params());
        spectral_value = spec.value;
        value += cfg.lambda_r * spec.value;
        grad.axpy(cfg.lambda_r, &spec.grad, 1.0);
    }
    Ok(RegularizerEstimate {
        smooth,
        spectral: spectral_value,
        value,
        grad,
    })
}

/// `E_z arap_energy(base, g(z) − g_base)` with rotations fitted once per
/// sample and held fixed in the backward pass.
pub fn arap_to_base_loss(gen: &Generator, base: &Mesh, cfg: &TrainConfig, seed: u64) -> Result<LossGrad> {
    check_len("base vertices", gen.n_vertices(), base.n_vertices())?;
    let (latents, _) = sample_latents(gen.latent_dim(), cfg.n_z, seed);
    let g_base = base.positions();
    let parts = latents
        .par_iter()
        .map(|z| {
            let x = &gen.forward(z)? - &g_base;
            let rotations = fit_rotations(base, &x)?;
            let value = energy_at_rotations(base, &x, &rotations);
            let cot = energy_gradient_at_rotations(base, &x, &rotations);
            Ok((value, gen.vjp_theta(z, &cot)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_of(parts, gen.n_params()))
}

/// Regularizer selected by `cfg.regularizer_mode`; `None` means the mode
/// contributes nothing.
pub fn regularizer(
    gen: &Generator,
    template: &Mesh,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Option<RegularizerEstimate>> {
    match cfg.regularizer_mode {
        RegularizerMode::None => Ok(None),
        RegularizerMode::L2 | RegularizerMode::Robust => arapreg_loss(gen, template, cfg, seed).map(Some),
        RegularizerMode::ArapToBase => {
            let (latents, batch_seed) = sample_latents(gen.latent_dim(), cfg.n_z, seed);
            let batch = LatentBatch {
                latents,
                seed: batch_seed,
            };
            let (smooth, mut grad) = smoothness_loss(gen, &batch, cfg.s, cfg.n_delta)?;
            let mut value = smooth;
            let mut base_value = 0.0;
            if cfg.lambda_r != 0.0 {
                let base = arap_to_base_loss(gen, template, cfg, seed)?;
                base_value = base.value;
                value += cfg.lambda_r * base.value;
                grad.axpy(cfg.lambda_r, &base.grad, 1.0);
            }
            Ok(Some(RegularizerEstimate {
                smooth,
                spectral: base_value,
                value,
                grad,
            }))
        }
    }
}

/// Diagonal moment-matched Gaussian KL against `N(0, I)` and its gradient
/// with respect to each latent.
pub fn kl_penalty(latents: &[DVector<f64>]) -> Result<(f64, Vec<DVector<f64>>)> {
    if latents.len() < 2 {
        return Err(Error::Invalid(format!(
            "kl_penalty needs at least 2 latents, got {}",
            latents.len()
        )));
    }
    let k = latents[0].len();
    for z in latents {
        check_len("latent", k, z.len())?;
    }
    let m = latents.len() as f64;
    let mean = latents.iter().fold(DVector::zeros(k), |acc, z| acc + z) / m;
    let raw_var = latents.iter().fold(DVector::zeros(k), |acc: DVector<f64>, z| {
        acc + (z - &mean).map(|d| d * d)
    }) / m;
    let var = raw_var.map(|v| v.max(KL_VARIANCE_FLOOR));
    let kl = 0.5
        * (0..k)
            .map(|j| var[j] + mean[j] * mean[j] - 1.0 - var[j].ln())
            .sum::<f64>();
    let dvar = DVector::from_fn(k, |j, _| {
        if raw_var[j] > KL_VARIANCE_FLOOR {
            0.5 * (1.0 - 1.0 / var[j])
        } else {
            0.0
        }
    });
    let grads = latents
        .iter()
        .map(|z| DVector::from_fn(k, |j, _| (mean[j] + dvar[j] * 2.0 * (z[j] - mean[j])) / m))
        .collect();
    Ok((kl, grads))
}

/// Reconstruction loss and its cotangent with respect to `predicted`.
pub fn reconstruction_loss(
    predicted: &VertexField,
    target: &VertexField,
    norm: ReconNorm,
) -> Result<(f64, VertexField)> {
    check_len("reconstruction target", predicted.len(), target.len())?;
    let diff = predicted - target;
    let n = predicted.n_vertices();
    if n == 0 {
        return Ok((0.0, diff));
    }
    match norm {
        ReconNorm::L1Vertex | ReconNorm::L1Sum => {
            let scale = if norm == ReconNorm::L1Sum { 1.0 } else { 1.0 / n as f64 };
            let mut cot = VertexField::zeros(n);
            let mut total = 0.0;
            for i in 0..n {
                let d = diff.vertex(i);
                let len = d.norm();
                total += len;
                if len > 0.0 {
                    cot.set_vertex(i, d * (scale / len));
                }
            }
            Ok((total * scale, cot))
        }
        ReconNorm::L2 => {
            let m = diff.len() as f64;
            Ok((diff.dot(&diff) / m, diff.scale(2.0 / m)))
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_len("adam parameters", self.m.len(), params.len())?;
        check_len("adam gradient", self.m.len(), grad.len())?;
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Per-epoch loss breakdown. `total = recon + λ_reg (smooth + λ_R spectral) + λ_KL kl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub recon: f64,
    pub smooth: f64,
    pub spectral: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub generator: Generator,
    pub latents: Vec<DVector<f64>>,
    pub theta_opt: Adam,
    pub latent_opts: Vec<Adam>,
    pub rng: ChaCha8Rng,
    pub history: Vec<LossRecord>,
}

/// Generator at initialization: seeded Glorot-uniform weights and the mean
/// training shape as constant output.
pub fn initial_generator(dataset: &[Mesh], cfg: &TrainConfig) -> Result<Generator> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::Invalid("dataset is empty".into()))?;
    let n = first.n_vertices();
    let mut mean = VertexField::zeros(n);
    for mesh in dataset {
        mean.axpy(1.0, &mesh.positions());
    }
    let mean = mean.scale(1.0 / dataset.len() as f64);
    let mut gen = match cfg.generator_kind {
        GeneratorKind::Mlp => Generator::mlp(cfg.latent_dim, &cfg.hidden_widths, 3 * n, cfg.seed)?,
        GeneratorKind::Linear => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let bound = (6.0 / (cfg.latent_dim + 3 * n) as f64).sqrt();
            let w = DMatrix::from_fn(3 * n, cfg.latent_dim, |_, _| rng.random_range(-bound..bound));
            Generator::linear(&w, &mean)?
        }
    };
    gen.set_output_offset(&mean)?;
    Ok(gen)
}

fn check_dataset(dataset: &[Mesh]) -> Result<()> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::Invalid("dataset is empty".into()))?;
    if let Some(i) = dataset.iter().position(|m| !m.shares_connectivity(first)) {
        return Err(Error::Topology(format!(
            "training mesh {i} does not share the connectivity of mesh 0"
        )));
    }
    Ok(())
}

fn check_finite(value: f64, grad: &DVector<f64>, term: &'static str, iteration: usize) -> Result<()> {
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { term, iteration });
    }
    Ok(())
}

impl TrainState {
    pub fn new(dataset: &[Mesh], cfg: &TrainConfig) -> Result<Self> {
        Self::with_generator(dataset, cfg, initial_generator(dataset, cfg)?)
    }

    pub fn with_generator(dataset: &[Mesh], cfg: &TrainConfig, generator: Generator) -> Result<Self> {
        cfg.validate()?;
        check_dataset(dataset)?;
        check_len("generator vertices", dataset[0].n_vertices(), generator.n_vertices())?;
        let k = generator.latent_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let latents = (0..dataset.len()).map(|_| standard_normal(&mut rng, k)).collect();
        Ok(Self {
            theta_opt: Adam::new(generator.n_params(), cfg.lr_theta),
            latent_opts: (0..dataset.len()).map(|_| Adam::new(k, cfg.lr_z)).collect(),
            generator,
            latents,
            rng,
            history: Vec::new(),
        })
    }

    fn record(&mut self, dataset: &[Mesh], cfg: &TrainConfig, epoch: usize) -> Result<LossRecord> {
        let gen = &self.generator;
        let recon = dataset
            .par_iter()
            .zip(&self.latents)
            .map(|(mesh, z)| Ok(reconstruction_loss(&gen.forward(z)?, &mesh.positions(), cfg.recon_norm)?.0))
            .collect::<Result<Vec<f64>>>()?
            .iter()
            .sum::<f64>()
            / dataset.len() as f64;
        let (smooth, spectral) = match regularizer(gen, &dataset[0], cfg, cfg.seed.wrapping_add(EVAL_SEED_OFFSET))? {
            Some(r) => (r.smooth, r.spectral),
            None => (0.0, 0.0),
        };
        let kl = if self.latents.len() >= 2 {
            kl_penalty(&self.latents)?.0
        } else {
            0.0
        };
        let total = recon + cfg.lambda_reg * (smooth + cfg.lambda_r * spectral) + cfg.lambda_kl * kl;
        let rec = LossRecord {
            epoch,
            recon,
            smooth,
            spectral,
            kl,
            total,
        };
        if !total.is_finite() {
            let term = [("recon", recon), ("smooth", smooth), ("spectral", spectral), ("kl", kl)]
                .iter()
                .find(|(_, v)| !v.is_finite())
                .map_or("total", |(n, _)| n);
            return Err(Error::NonFinite { term, iteration: epoch });
        }
        self.history.push(rec);
        Ok(rec)
    }

    fn batches(&mut self, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order.chunks(batch_size).map(<[usize]>::to_vec).collect()
    }

    /// One epoch of θ-updates on reconstruction plus `λ_reg · L_reg`.
    fn theta_epoch(&mut self, dataset: &[Mesh], cfg: &TrainConfig, iteration: usize) -> Result<()> {
        for batch in self.batches(dataset.len(), cfg.batch_size) {
            let gen = &self.generator;
            let parts = batch
                .par_iter()
                .map(|&i| {
                    let z = &self.latents[i];
                    let (value, cot) = reconstruction_loss(&gen.forward(z)?, &dataset[i].positions(), cfg.recon_norm)?;
                    Ok((value, gen.vjp_theta(z, &cot)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let recon = mean_of(parts, gen.n_params());
            check_finite(recon.value, &recon.grad, "recon", iteration)?;
            let mut grad = recon.grad;
            let seed = self.rng.next_u64();
            if cfg.lambda_reg != 0.0 {
                if let Some(reg) = regularizer(gen, &dataset[0], cfg, seed)? {
                    let term = match cfg.regularizer_mode {
                        RegularizerMode::ArapToBase => "arap_to_base",
                        _ => "spectral",
                    };
                    check_finite(reg.value, &reg.grad, term, iteration)?;
                    grad.axpy(cfg.lambda_reg, &reg.grad, 1.0);
                }
            }
            self.theta_opt.step(self.generator.theta_mut(), grad.as_slice())?;
        }
        Ok(())
    }

    /// One epoch of z-updates on reconstruction plus `λ_KL · KL`.
    fn latent_epoch(&mut self, dataset: &[Mesh], cfg: &TrainConfig, iteration: usize) -> Result<()> {
        for batch in self.batches(dataset.len(), cfg.batch_size) {
            let kl_grads = if cfg.lambda_kl != 0.0 && self.latents.len() >= 2 {
                Some(kl_penalty(&self.latents)?.1)
            } else {
                None
            };
            let gen = &self.generator;
            let grads = batch
                .par_iter()
                .map(|&i| {
                    let z = &self.latents[i];
                    let (value, cot) = reconstruction_loss(&gen.forward(z)?, &dataset[i].positions(), cfg.recon_norm)?;
                    let mut g = gen.vjp_z(z, &cot)?;
                    if let Some(kl) = &kl_grads {
                        g.axpy(cfg.lambda_kl, &kl[i], 1.0);
                    }
                    check_finite(value, &g, "recon", iteration)?;
                    Ok(g)
                })
                .collect::<Result<Vec<_>>>()?;
            for (&i, g) in batch.iter().zip(grads) {
                self.latent_opts[i].step(self.latents[i].as_mut_slice(), g.as_slice())?;
            }
        }
        Ok(())
    }
}

fn checksum<'a>(values: impl Iterator<Item = &'a f64>) -> u64 {
    let mut h = DefaultHasher::new();
    for v in values {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Alternating minimization: θ-phase then z-phase, `alternating_iters`
/// times. `history[0]` describes the initial state.
pub fn train_auto_decoder(dataset: &[Mesh], cfg: &TrainConfig) -> Result<TrainState> {
    let state = TrainState::new(dataset, cfg)?;
    train_from(state, dataset, cfg)
}

pub fn train_from(mut state: TrainState, dataset: &[Mesh], cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    check_dataset(dataset)?;
    check_len("latents", dataset.len(), state.latents.len())?;
    state.record(dataset, cfg, 0)?;
    for it in 1..=cfg.alternating_iters {
        let latents_before = checksum(state.latents.iter().flat_map(|z| z.iter()));
        for _ in 0..cfg.epochs_per_phase {
            state.theta_epoch(dataset, cfg, it)?;
        }
        assert_eq!(
            latents_before,
            checksum(state.latents.iter().flat_map(|z| z.iter())),
            "θ-phase mutated latents"
        );
        let theta_before = checksum(state.generator.theta().iter());
        for _ in 0..cfg.epochs_per_phase {
            state.latent_epoch(dataset, cfg, it)?;
        }
        assert_eq!(
            theta_before,
            checksum(state.generator.theta().iter()),
            "z-phase mutated θ"
        );
        let rec = state.record(dataset, cfg, it)?;
        log::info!(
            "iteration {it}: recon {:.6e} smooth {:.6e} spectral {:.6e} kl {:.6e} total {:.6e}",
            rec.recon,
            rec.smooth,
            rec.spectral,
            rec.kl,
            rec.total
        );
    }
    Ok(state)
}

/// Adam on `z` from zero with `θ` frozen; returns the best latent seen.
pub fn refine_latent(gen: &Generator, mesh: &Mesh, cfg: &TrainConfig) -> Result<DVector<f64>> {
    check_len("mesh vertices", gen.n_vertices(), mesh.n_vertices())?;
    let target = mesh.positions();
    let mut z = DVector::zeros(gen.latent_dim());
    let mut opt = Adam::new(z.len(), cfg.lr_z);
    let (mut loss, mut cot) = reconstruction_loss(&gen.forward(&z)?, &target, cfg.recon_norm)?;
    let mut best = (loss, z.clone());
    for _ in 0..cfg.refine_iters {
        let g = gen.vjp_z(&z, &cot)?;
        opt.step(z.as_mut_slice(), g.as_slice())?;
        (loss, cot) = reconstruction_loss(&gen.forward(&z)?, &target, cfg.recon_norm)?;
        if loss < best.0 {
            best = (loss, z.clone());
        }
    }
    Ok(best.1)
}

/// Trained model on disk: generator, training latents, config and history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub generator: GeneratorFile,
    pub latents: Vec<Vec<f64>>,
    pub config: TrainConfig,
    pub history: Vec<LossRecord>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, cfg: &TrainConfig) -> Self {
        Self {
            version: CHECKPOINT_FORMAT_VERSION,
            generator: state.generator.to_file(),
            latents: state.latents.iter().map(|z| z.as_slice().to_vec()).collect(),
            config: cfg.clone(),
            history: state.history.clone(),
        }
    }

    pub fn generator(&self) -> Result<Generator> {
        Generator::from_file(&self.generator)
    }

    pub fn latent_vectors(&self) -> Vec<DVector<f64>> {
        self.latents.iter().map(|z| DVector::from_column_slice(z)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Invalid(format!("unsupported checkpoint version {}", ck.version)));
        }
        ck.config.validate()?;
        Ok(ck)
    }
}

pub fn write_loss_csv(history: &[LossRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "{LOSS_CSV_HEADER}")?;
    for r in history {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e}",
            r.epoch, r.recon, r.smooth, r.spectral, r.kl, r.total
        )?;
    }
    Ok(())
}
