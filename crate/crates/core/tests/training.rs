use arapreg_core::toolkit::SyntheticFamilySpec;
use arapreg_core::trainer::{train_auto_decoder, ReconNorm, RegularizerMode, TrainConfig};
use arapreg_core::Mesh;

#[test]
fn robust_training_loss_is_mostly_non_increasing() {
    for seed in 0..5u64 {
        let spec = SyntheticFamilySpec {
            samples: 5,
            seed,
            ..Default::default()
        };
        let data: Vec<Mesh> = spec.generate().unwrap().into_iter().map(|(_, m)| m).collect();
        let cfg = TrainConfig {
            seed,
            regularizer_mode: RegularizerMode::Robust,
            recon_norm: ReconNorm::L1Sum,
            lr_theta: 3e-4,
            batch_size: 1,
            epochs_per_phase: 10,
            ..Default::default()
        };
        let state = train_auto_decoder(&data, &cfg).unwrap();
        let steps = state.history.len() - 1;
        let non_increasing = state.history.windows(2).filter(|w| w[1].total <= w[0].total).count();
        assert!(
            10 * non_increasing >= 9 * steps,
            "seed {seed}: {non_increasing}/{steps} non-increasing steps"
        );
    }
}
