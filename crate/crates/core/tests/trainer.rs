use upgan::degrade::{procedural_pairs, DatasetManifest, PhantomParams};
use upgan::trainer::{
    cosine_lr, finetune_all, init_phase, load_checkpoint, save_checkpoint, train, EpochRecord, FreezeMode, Stage,
    TrainConfig, TrainObserver, TrainState,
};
use upgan::Error;

fn toy_data() -> DatasetManifest {
    let params = PhantomParams {
        slices_per_subject: 4,
        ..PhantomParams::default()
    };
    procedural_pairs(6, (16, 16), &params, 3).unwrap()
}

fn toy_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.seed = seed;
    cfg.epochs_init = 2;
    cfg.epochs_finetune = 2;
    cfg.batch_size = 4;
    cfg.generator.base_width = 4;
    cfg.generator.depth = 2;
    cfg.discriminator.base_width = 4;
    cfg.discriminator.layers = 2;
    cfg
}

fn checksums(state: &TrainState) -> Vec<String> {
    (0..state.config.phases)
        .flat_map(|m| [state.generator_checksum(m), state.discriminator_checksum(m)])
        .collect()
}

#[test]
fn cosine_schedule_endpoints_and_midpoint() {
    assert_eq!(cosine_lr(0, 100, 0.002), 0.002);
    assert!((cosine_lr(50, 100, 0.002) - 0.001).abs() < 1e-15);
    assert!(cosine_lr(100, 100, 0.002).abs() < 1e-15);
    assert_eq!(cosine_lr(150, 100, 0.002), 0.0);
    let lrs: Vec<f64> = (0..100).map(|s| cosine_lr(s, 100, 1.0)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn phases_must_be_initialized_in_order() {
    let data = toy_data();
    let mut state = TrainState::new(toy_config(0), 16, 16).unwrap();
    assert!(matches!(init_phase(1, &data, &mut state, &mut ()), Err(Error::Training(_))));
    assert!(matches!(finetune_all(&data, &mut state, &mut ()), Err(Error::Training(_))));
    assert!(matches!(init_phase(2, &data, &mut state, &mut ()), Err(Error::Training(_))));
}

#[test]
fn mismatched_image_size_is_a_data_error() {
    let data = toy_data();
    let mut state = TrainState::new(toy_config(0), 32, 32).unwrap();
    assert!(matches!(train(&data, &mut state, &mut ()), Err(Error::Data(_))));
}

#[test]
fn generators_only_freeze_keeps_training_earlier_discriminators() {
    let data = toy_data();
    let mut cfg = toy_config(2);
    cfg.freeze = FreezeMode::GeneratorsOnly;
    let mut state = TrainState::new(cfg, 16, 16).unwrap();
    init_phase(0, &data, &mut state, &mut ()).unwrap();
    let (g0, d0) = (state.generator_checksum(0), state.discriminator_checksum(0));
    init_phase(1, &data, &mut state, &mut ()).unwrap();
    assert_eq!(state.generator_checksum(0), g0);
    assert_ne!(state.discriminator_checksum(0), d0);
}

#[test]
fn finetuning_updates_every_network() {
    let data = toy_data();
    let mut state = TrainState::new(toy_config(4), 16, 16).unwrap();
    init_phase(0, &data, &mut state, &mut ()).unwrap();
    init_phase(1, &data, &mut state, &mut ()).unwrap();
    let before = checksums(&state);
    finetune_all(&data, &mut state, &mut ()).unwrap();
    let after = checksums(&state);
    assert!(before.iter().zip(&after).all(|(a, b)| a != b));
}

#[test]
fn same_seed_gives_identical_weights_and_logs() {
    let data = toy_data();
    let run = |seed| {
        let mut s = TrainState::new(toy_config(seed), 16, 16).unwrap();
        train(&data, &mut s, &mut ()).unwrap();
        s
    };
    let (a, b, c) = (run(9), run(9), run(10));
    assert_eq!(checksums(&a), checksums(&b));
    assert_eq!(serde_json::to_string(&a.history).unwrap(), serde_json::to_string(&b.history).unwrap());
    assert_ne!(checksums(&a), checksums(&c));
}

/// Saves a checkpoint after the given number of completed epochs overall.
struct SaveAt {
    after_epochs: usize,
    seen: usize,
    dir: std::path::PathBuf,
}

impl TrainObserver for SaveAt {
    fn on_epoch(&mut self, state: &TrainState, _record: &EpochRecord) -> upgan::Result<()> {
        self.seen += 1;
        if self.seen == self.after_epochs {
            save_checkpoint(state, &self.dir)?;
        }
        Ok(())
    }
}

#[test]
fn resuming_mid_stage_is_bit_identical() {
    let data = toy_data();
    let dir = tempfile::tempdir().unwrap();
    let mut full = TrainState::new(toy_config(5), 16, 16).unwrap();
    // Epoch 3 overall is the first epoch of init-1.
    let mut saver = SaveAt {
        after_epochs: 3,
        seen: 0,
        dir: dir.path().to_path_buf(),
    };
    train(&data, &mut full, &mut saver).unwrap();

    let mut resumed = load_checkpoint(dir.path()).unwrap();
    assert_eq!(resumed.current_stage(), Some(Stage::Init(1)));
    train(&data, &mut resumed, &mut ()).unwrap();
    assert_eq!(checksums(&full), checksums(&resumed));
    assert_eq!(full.global_step, resumed.global_step);
    assert_eq!(full.best_val_mae, resumed.best_val_mae);
    assert_eq!(serde_json::to_string(&full.history).unwrap(), serde_json::to_string(&resumed.history).unwrap());
}

#[test]
fn checkpoint_round_trip_preserves_state() {
    let data = toy_data();
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::new(toy_config(6), 16, 16).unwrap();
    init_phase(0, &data, &mut state, &mut ()).unwrap();
    save_checkpoint(&state, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(checksums(&state), checksums(&back));
    assert_eq!(state.config, back.config);
    assert_eq!(state.initialized, back.initialized);
    assert_eq!(state.history.len(), back.history.len());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = toy_config(0);
    cfg.lr_finetune = cfg.lr_init * 2.0;
    assert!(matches!(TrainState::new(cfg, 16, 16), Err(Error::Config(_))));
    let mut cfg = toy_config(0);
    cfg.phases = 0;
    assert!(matches!(TrainState::new(cfg, 16, 16), Err(Error::Config(_))));
}
