use arapreg_core::toolkit::{evaluate, load_dataset, write_dataset, SyntheticFamilySpec};
use arapreg_core::trainer::{train_auto_decoder, Checkpoint, RegularizerMode, TrainConfig};
use arapreg_core::Mesh;

fn small_spec(samples: usize, seed: u64) -> SyntheticFamilySpec {
    SyntheticFamilySpec {
        segments: 8,
        ring_vertices: 6,
        samples,
        seed,
        ..Default::default()
    }
}

fn small_config(mode: RegularizerMode) -> TrainConfig {
    TrainConfig {
        regularizer_mode: mode,
        alternating_iters: 3,
        hidden_widths: vec![8],
        latent_dim: 3,
        refine_iters: 50,
        ..Default::default()
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(4, 3);
    let manifest = write_dataset(&spec, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.len(), 4);
    for ((name, mesh), (entry, (_, expected))) in
        loaded.iter().zip(manifest.samples.iter().zip(spec.generate().unwrap()))
    {
        assert_eq!(name, &entry.file);
        assert_eq!(mesh.vertices(), expected.vertices());
        assert!(mesh.shares_connectivity(&expected));
    }
}

#[test]
fn empty_dataset_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_dataset(dir.path()).is_err());
}

#[test]
fn train_checkpoint_eval() {
    let data: Vec<Mesh> = small_spec(4, 0)
        .generate()
        .unwrap()
        .into_iter()
        .map(|(_, m)| m)
        .collect();
    let held_out: Vec<(String, Mesh)> = small_spec(4, 9)
        .generate()
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, (_, m))| (format!("h{i}"), m))
        .collect();
    for mode in [
        RegularizerMode::None,
        RegularizerMode::Robust,
        RegularizerMode::L2,
        RegularizerMode::ArapToBase,
    ] {
        let cfg = small_config(mode);
        let state = train_auto_decoder(&data, &cfg).unwrap();
        assert_eq!(state.history.len(), cfg.alternating_iters + 1);
        let spectral_zero = state.history.iter().all(|r| r.spectral == 0.0);
        assert_eq!(spectral_zero, mode == RegularizerMode::None, "{mode:?}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let ck = Checkpoint::from_state(&state, &cfg);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.generator().unwrap().theta(), state.generator.theta());

        let report = evaluate(&back, &held_out).unwrap();
        assert_eq!(report.per_shape.len(), 4);
        assert!(report.per_shape.iter().all(|s| s.error.is_finite() && s.error >= 0.0));
        assert!(report.median_error >= 0.0 && report.mean_error.is_finite());
        assert_eq!(report.interpolation_energies.len(), 2);
        assert!(report.extrapolation_energies.iter().all(|e| e.is_finite()));
        assert_eq!(evaluate(&back, &held_out).unwrap(), report);
    }
}

#[test]
fn zero_iterations_keep_the_initialization() {
    let data: Vec<Mesh> = small_spec(3, 1)
        .generate()
        .unwrap()
        .into_iter()
        .map(|(_, m)| m)
        .collect();
    let cfg = TrainConfig {
        alternating_iters: 0,
        ..small_config(RegularizerMode::Robust)
    };
    let a = train_auto_decoder(&data, &cfg).unwrap();
    let b = arapreg_core::trainer::TrainState::new(&data, &cfg).unwrap();
    assert_eq!(a.generator.theta(), b.generator.theta());
    assert_eq!(a.latents, b.latents);
}
