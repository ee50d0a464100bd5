use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use arapreg_core::toolkit::{
    self, evaluate, extrapolate, gradcheck, hessian_report, interpolate, load_dataset, parse_jacobian, write_dataset,
    GradcheckOptions, SyntheticFamilySpec,
};
use arapreg_core::trainer::{train_auto_decoder, write_loss_csv, Checkpoint, TrainConfig};
use arapreg_core::Mesh;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

const CHECKPOINT_FILE: &str = "checkpoint.json";
const LOSS_FILE: &str = "loss.csv";
/// Exit status of a gradcheck run with failing checks.
const GRADCHECK_FAILED: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "arapreg",
    version,
    about = "ARAP rigidity regularization for mesh generators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic bending-bar dataset.
    GenDataset {
        #[command(flatten)]
        common: Common,
    },
    /// Train an auto-decoder on a dataset directory.
    Train {
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruction, interpolation and extrapolation report.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Frames between two refined shapes and their ARAP energy profile.
    Interpolate {
        checkpoint: PathBuf,
        mesh_a: PathBuf,
        mesh_b: PathBuf,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Latent perturbations around a refined shape.
    Extrapolate {
        checkpoint: PathBuf,
        mesh: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Defaults to the checkpoint's sigma.
        #[arg(long)]
        sigma: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference and identity checks of every derivative.
    Gradcheck {
        /// Latent dimension of the checked generator.
        #[arg(short, long)]
        k: Option<usize>,
        /// Fault injection: flip the sign of the dD term.
        #[arg(long)]
        flip_dd_term: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Null space, and with a Jacobian, the reduced spectrum.
    Hessian {
        mesh: PathBuf,
        /// JSON array of the 3n rows of a Jacobian.
        #[arg(long)]
        jacobian: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn read_config<T: serde::de::DeserializeOwned + Default>(&self) -> Result<T> {
        match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
            }
            None => Ok(T::default()),
        }
    }

    fn out_dir(&self) -> Result<Option<&Path>> {
        if let Some(dir) = &self.out {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(self.out.as_deref())
    }

    fn require_out(&self) -> Result<&Path> {
        match self.out_dir()? {
            Some(dir) => Ok(dir),
            None => bail!("--out is required"),
        }
    }

    fn reject_config(&self, command: &str) -> Result<()> {
        if self.config.is_some() {
            bail!("{command} takes its config from the checkpoint");
        }
        Ok(())
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_mesh(path: &Path) -> Result<Mesh> {
    Mesh::load_obj(path).with_context(|| format!("loading {}", path.display()))
}

fn load_checkpoint(path: &Path, seed: Option<u64>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = seed {
        ck.config.seed = seed;
    }
    Ok(ck)
}

fn save_frames(dir: &Path, prefix: &str, template: &Mesh, frames: &[arapreg_core::VertexField]) -> Result<()> {
    for (i, f) in frames.iter().enumerate() {
        template
            .with_positions(f)?
            .save_obj(dir.join(format!("{prefix}_{i:04}.obj")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenDataset { common } => {
            let mut spec: SyntheticFamilySpec = common.read_config()?;
            if let Some(seed) = common.seed {
                spec.seed = seed;
            }
            let out = common.require_out()?;
            let manifest = write_dataset(&spec, out)?;
            println!("wrote {} samples to {}", manifest.samples.len(), out.display());
        }
        Command::Train { dataset, common } => {
            let mut cfg: TrainConfig = common.read_config()?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            let out = common.require_out()?;
            let meshes: Vec<Mesh> = load_dataset(&dataset)?.into_iter().map(|(_, m)| m).collect();
            let state = train_auto_decoder(&meshes, &cfg)?;
            let last = state.history.last().context("empty loss history")?;
            if !last.total.is_finite() {
                bail!("final loss is not finite");
            }
            Checkpoint::from_state(&state, &cfg).save(out.join(CHECKPOINT_FILE))?;
            let mut csv = Vec::new();
            write_loss_csv(&state.history, &mut csv)?;
            fs::write(out.join(LOSS_FILE), csv)?;
            println!(
                "trained {} shapes for {} iterations: recon {:.6e} smooth {:.6e} spectral {:.6e} kl {:.6e} total {:.6e}",
                meshes.len(),
                cfg.alternating_iters,
                last.recon,
                last.smooth,
                last.spectral,
                last.kl,
                last.total
            );
        }
        Command::Eval {
            checkpoint,
            dataset,
            common,
        } => {
            common.reject_config("eval")?;
            let ck = load_checkpoint(&checkpoint, common.seed)?;
            let report = evaluate(&ck, &load_dataset(&dataset)?)?;
            println!("{:<24} {:>14}", "shape", "error");
            for s in &report.per_shape {
                println!("{:<24} {:>14.6e}", s.name, s.error);
            }
            println!("{:<24} {:>14.6e}", "mean", report.mean_error);
            println!("{:<24} {:>14.6e}", "median", report.median_error);
            let path_total: f64 = report.interpolation_energies.iter().sum();
            println!("{:<24} {:>14.6e}", "interpolation energy", path_total);
            if let Some(dir) = common.out_dir()? {
                write_json(&dir.join("eval.json"), &report)?;
            }
        }
        Command::Interpolate {
            checkpoint,
            mesh_a,
            mesh_b,
            steps,
            common,
        } => {
            common.reject_config("interpolate")?;
            let ck = load_checkpoint(&checkpoint, common.seed)?;
            let a = load_mesh(&mesh_a)?;
            let b = load_mesh(&mesh_b)?;
            let out = common.require_out()?;
            let interp = interpolate(&ck.generator()?, &ck.config, &a, &b, steps)?;
            save_frames(out, "frame", &a, &interp.frames)?;
            #[derive(Serialize)]
            struct Profile<'a> {
                step_energies: &'a [f64],
                total_energy: f64,
            }
            write_json(
                &out.join("interpolation.json"),
                &Profile {
                    step_energies: &interp.step_energies,
                    total_energy: interp.total_energy,
                },
            )?;
            for (i, e) in interp.step_energies.iter().enumerate() {
                println!("{:>4} {:>14.6e}", i, e);
            }
            println!("total {:.6e}", interp.total_energy);
        }
        Command::Extrapolate {
            checkpoint,
            mesh,
            count,
            sigma,
            common,
        } => {
            common.reject_config("extrapolate")?;
            let ck = load_checkpoint(&checkpoint, common.seed)?;
            let target = load_mesh(&mesh)?;
            let out = common.require_out()?;
            let sigma = sigma.unwrap_or(ck.config.sigma);
            let ex = extrapolate(&ck, &target, count, sigma, ck.config.seed)?;
            save_frames(out, "sample", &target, &ex.samples)?;
            target
                .with_positions(&ex.reconstruction)?
                .save_obj(out.join("reconstruction.obj"))?;
            #[derive(Serialize)]
            struct Energies<'a> {
                sigma: f64,
                seed: u64,
                energies: &'a [f64],
            }
            write_json(
                &out.join("extrapolation.json"),
                &Energies {
                    sigma,
                    seed: ck.config.seed,
                    energies: &ex.energies,
                },
            )?;
            for (i, e) in ex.energies.iter().enumerate() {
                println!("{:>4} {:>14.6e}", i, e);
            }
        }
        Command::Gradcheck {
            k,
            flip_dd_term,
            common,
        } => {
            let mut opts: GradcheckOptions = common.read_config()?;
            if let Some(seed) = common.seed {
                opts.seed = seed;
            }
            if let Some(k) = k {
                opts.latent_dim = k;
            }
            opts.flip_dd_term |= flip_dd_term;
            let report = gradcheck(&opts)?;
            for c in &report.checks {
                println!(
                    "{:<24} {:>12.3e} {:>10.1e} {}",
                    c.name,
                    c.error,
                    c.tolerance,
                    if c.passed { "pass" } else { "FAIL" }
                );
            }
            if let Some(dir) = common.out_dir()? {
                write_json(&dir.join("gradcheck.json"), &report)?;
            }
            if !report.passed {
                eprintln!("failed: {}", report.failed().join(", "));
                return Ok(ExitCode::from(GRADCHECK_FAILED));
            }
        }
        Command::Hessian { mesh, jacobian, common } => {
            common.reject_config("hessian")?;
            if common.seed.is_some() {
                bail!("hessian is not seeded");
            }
            let mesh = load_mesh(&mesh)?;
            let j = match &jacobian {
                Some(path) => Some(parse_jacobian(
                    &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
                )?),
                None => None,
            };
            let report = hessian_report(&mesh, j.as_ref())?;
            print_hessian(&report);
            if let Some(dir) = common.out_dir()? {
                write_json(&dir.join("hessian.json"), &report)?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_hessian(report: &toolkit::HessianReport) {
    let ns = &report.null_space;
    println!("vertices {}", ns.n_vertices);
    println!("kernel dimension {}", ns.kernel_dimension);
    println!("eigenvalue range {:.6e} {:.6e}", ns.min_eigenvalue, ns.max_eigenvalue);
    println!(
        "translation residuals {:.3e} {:.3e} {:.3e}",
        ns.translation_residuals[0], ns.translation_residuals[1], ns.translation_residuals[2]
    );
    println!(
        "rotation residuals {:.3e} {:.3e} {:.3e}",
        ns.rotation_residuals[0], ns.rotation_residuals[1], ns.rotation_residuals[2]
    );
    if let Some(spectrum) = &report.spectrum {
        let values: Vec<String> = spectrum.iter().map(|v| format!("{v:.6e}")).collect();
        println!("spectrum {}", values.join(" "));
    }
    if let Some(trace) = report.trace {
        println!("trace {trace:.6e}");
    }
    if let Some(r) = report.robust_half {
        println!("robust value (alpha 0.5) {r:.6e}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
