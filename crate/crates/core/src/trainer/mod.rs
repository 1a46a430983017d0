//! Progressive training: each phase is initialized with its predecessors
//! frozen, then every phase is fine-tuned jointly.

mod checkpoint;

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::{Cascade, Guidance};
use crate::degrade::{DatasetManifest, Split};
use crate::ggd::{ggd_nll_with_grad, BetaClamp, GgdGrad};
use crate::metrics::mae;
use crate::networks::{maps_to_tensor, Discriminator, DiscriminatorConfig, GeneratorConfig};
use crate::nn::{Adam, Module, Tensor};
use crate::objectives::{disc_loss_with_grad, gen_adv_loss_with_grad, LossWeights};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_SCHEMA_VERSION};

/// `lr_max·(1 + cos(π·step/total))/2`; steps past `total` give 0.
pub fn cosine_lr(step: u64, total: u64, lr_max: f64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    lr_max * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Which networks of earlier phases stay fixed while phase `m` is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeMode {
    /// Generators and discriminators of phases `< m`.
    #[default]
    All,
    /// Generators only; earlier discriminators keep training on their
    /// (frozen) generators' outputs.
    GeneratorsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub base_width: usize,
    pub depth: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub alpha_floor: f64,
}

/// Head limits used for training. A tighter β ceiling and a higher α floor
/// than the loss allows keep `(|ε|/α)^β` from exploding early on.
pub const TRAIN_BETA_MAX: f64 = 3.0;
pub const TRAIN_ALPHA_FLOOR: f64 = 0.01;

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            base_width: 16,
            depth: 3,
            beta_min: BetaClamp::default().min,
            beta_max: TRAIN_BETA_MAX,
            alpha_floor: TRAIN_ALPHA_FLOOR,
        }
    }
}

impl GeneratorSpec {
    pub fn config(&self) -> GeneratorConfig {
        let mut c = GeneratorConfig::new(1, self.base_width, self.depth);
        c.beta_clamp = BetaClamp {
            min: self.beta_min,
            max: self.beta_max,
        };
        c.alpha_floor = self.alpha_floor;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSpec {
    pub layers: usize,
    pub base_width: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            layers: 3,
            base_width: 16,
        }
    }
}

impl DiscriminatorSpec {
    pub fn config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            in_channels: 1,
            layers: self.layers,
            base_width: self.base_width,
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Number of cascade phases `M`.
    pub phases: usize,
    /// Epochs spent initializing each phase.
    pub epochs_init: usize,
    /// Epochs of joint fine-tuning (zero skips the stage).
    pub epochs_finetune: usize,
    pub lr_init: f64,
    pub lr_finetune: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    /// Cosine annealing period in epochs.
    pub anneal_period: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub guidance: Guidance,
    pub freeze: FreezeMode,
    /// Start phase `m > 0` from phase `m − 1`'s generator weights, with zero
    /// weights on the new feature channel.
    pub warm_start: bool,
    /// Optional per-network gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phases: 2,
            epochs_init: 30,
            epochs_finetune: 30,
            lr_init: 0.002,
            lr_finetune: 0.0005,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            batch_size: 8,
            anneal_period: 1000,
            weights: LossWeights::default(),
            seed: 0,
            guidance: Guidance::Uncertainty,
            freeze: FreezeMode::All,
            warm_start: true,
            grad_clip: Some(1.0),
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.phases == 0 || self.epochs_init == 0 || self.batch_size == 0 || self.anneal_period == 0 {
            return bad("phases, epochs_init, batch_size and anneal_period must be positive".into());
        }
        if !(self.lr_init > 0.0 && self.lr_finetune > 0.0 && self.lr_finetune < self.lr_init) {
            return bad(format!(
                "learning rates must satisfy 0 < lr_finetune < lr_init, got {} and {}",
                self.lr_finetune, self.lr_init
            ));
        }
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !unit(self.adam_beta1) || !unit(self.adam_beta2) {
            return bad("Adam betas must lie in (0, 1)".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        self.weights.validate()?;
        self.generator.config().validate()?;
        self.discriminator.config().validate()
    }
}

/// Training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Init(usize),
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Init(m) => write!(f, "init-{m}"),
            Stage::Finetune => f.write_str("finetune"),
        }
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    /// Step within the stage, as fed to the learning-rate schedule.
    pub stage_step: u64,
    pub global_step: u64,
    pub lr: f64,
    /// First phase index the per-phase vectors refer to.
    pub first_phase: usize,
    pub fidelity: Vec<f64>,
    pub adversarial: Vec<f64>,
    /// Discriminator loss per phase.
    pub disc: Vec<f64>,
    pub gen_total: f64,
    pub gen_grad_norm: Vec<f64>,
    pub disc_grad_norm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    /// Validation MAE (raw intensity units) of phases `0..=last trained`.
    pub val_mae: Vec<f64>,
    pub mean_fidelity: f64,
    /// Whether the last phase reached a new best validation MAE.
    pub improved: bool,
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub height: usize,
    pub width: usize,
    pub cascade: Cascade,
    pub discriminators: Vec<Discriminator>,
    pub gen_opt: Vec<Adam>,
    pub disc_opt: Vec<Adam>,
    /// Number of phases whose initialization stage has finished.
    pub initialized: usize,
    /// Completed epochs of the current stage.
    pub stage_epoch: usize,
    pub stage_step: u64,
    pub global_step: u64,
    pub rng: ChaCha8Rng,
    pub best_val_mae: Option<f64>,
    pub history: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Callbacks invoked during training; errors abort the run.
pub trait TrainObserver {
    fn on_step(&mut self, _state: &TrainState, _record: &StepRecord) -> Result<()> {
        Ok(())
    }
    fn on_epoch(&mut self, _state: &TrainState, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
    fn on_stage_end(&mut self, _state: &TrainState, _stage: Stage) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

impl TrainState {
    pub fn new(config: TrainConfig, height: usize, width: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let cascade = Cascade::new(
            &config.generator.config(),
            config.phases,
            config.guidance,
            height,
            width,
            &mut rng,
        )?;
        let dcfg = config.discriminator.config();
        let discriminators = (0..config.phases)
            .map(|_| Discriminator::new(dcfg.clone(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut state = Self {
            height,
            width,
            cascade,
            discriminators,
            gen_opt: Vec::new(),
            disc_opt: Vec::new(),
            initialized: 0,
            stage_epoch: 0,
            stage_step: 0,
            global_step: 0,
            rng,
            best_val_mae: None,
            history: Vec::new(),
            epochs: Vec::new(),
            config,
        };
        state.reset_optimizers(0..state.config.phases);
        Ok(state)
    }

    fn reset_optimizers(&mut self, phases: Range<usize>) {
        let (b1, b2) = (self.config.adam_beta1, self.config.adam_beta2);
        let m_total = self.config.phases;
        if self.gen_opt.len() != m_total {
            self.gen_opt = (0..m_total).map(|_| Adam::new(0, b1, b2)).collect();
            self.disc_opt = (0..m_total).map(|_| Adam::new(0, b1, b2)).collect();
        }
        for m in phases {
            self.gen_opt[m] = Adam::new(self.cascade.phase_module(m).param_count(), b1, b2);
            self.disc_opt[m] = Adam::new(self.discriminators[m].param_count(), b1, b2);
        }
    }

    /// The stage the next epoch belongs to, or `None` when training is done.
    pub fn current_stage(&self) -> Option<Stage> {
        if self.initialized < self.config.phases {
            Some(Stage::Init(self.initialized))
        } else if self.stage_epoch < self.config.epochs_finetune {
            Some(Stage::Finetune)
        } else {
            None
        }
    }

    /// SHA-256 of the generator (and fusion) weights of phase `m`.
    pub fn generator_checksum(&self, m: usize) -> String {
        self.cascade.phase_checksum(m)
    }

    pub fn discriminator_checksum(&self, m: usize) -> String {
        self.discriminators[m].checksum()
    }
}

fn check_data(data: &DatasetManifest, state: &TrainState) -> Result<Vec<usize>> {
    if (data.height, data.width) != (state.height, state.width) {
        return Err(Error::Data(format!(
            "dataset is {}x{} but the model was built for {}x{}",
            data.height, data.width, state.height, state.width
        )));
    }
    let train = data.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if data.indices(Split::Val).is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    Ok(train)
}

fn clip(module: &mut dyn Module, max_norm: Option<f64>) -> f64 {
    let norm = module.grad_norm();
    if let Some(c) = max_norm {
        if norm > c {
            module.scale_grad((c / norm) as f32);
        }
    }
    norm
}

fn diverged(state: &TrainState, stage: Stage, epoch: usize, detail: String) -> Error {
    Error::Diverged {
        stage: stage.to_string(),
        epoch,
        step: state.global_step as usize,
        detail,
    }
}

/// One alternating discriminator/generator update on a batch.
fn gan_step(
    state: &mut TrainState,
    data: &DatasetManifest,
    batch: &[usize],
    trainable: Range<usize>,
    disc_phases: Range<usize>,
    lr: f64,
    stage: Stage,
    epoch: usize,
) -> Result<StepRecord> {
    let n = batch.len();
    let a_maps: Vec<_> = batch.iter().map(|&i| &data.samples[i].input_a).collect();
    let b_maps: Vec<_> = batch.iter().map(|&i| &data.samples[i].target_b).collect();
    let a = maps_to_tensor(&a_maps);
    let b = maps_to_tensor(&b_maps);
    let preds = state.cascade.forward_batch(&a, trainable.clone())?;
    let fakes: Vec<Tensor> = preds
        .iter()
        .map(|p| maps_to_tensor(&p.iter().map(|q| &q.mean).collect::<Vec<_>>()))
        .collect();
    let clip_at = state.config.grad_clip;
    let phases = state.config.phases;
    let mut disc = vec![0.0; trainable.len()];
    let mut disc_grad_norm = vec![0.0; trainable.len()];

    for k in disc_phases {
        let d = &mut state.discriminators[k];
        d.zero_grad();
        let scores = d.forward(&Tensor::concat_batch(&[&b, &fakes[k]]))?;
        let half = scores.data().len() / 2;
        let (real, fake) = scores.data().split_at(half);
        let (loss, mut g_real, g_fake) = disc_loss_with_grad(real, fake)?;
        if !loss.is_finite() {
            return Err(diverged(state, stage, epoch, format!("discriminator {k} loss {loss}")));
        }
        g_real.extend(g_fake);
        let d = &mut state.discriminators[k];
        d.backward(&Tensor::from_vec(scores.shape(), g_real)?);
        let norm = clip(d, clip_at);
        state.disc_opt[k].step(d, lr);
        if let Some(j) = k.checked_sub(trainable.start).filter(|&j| j < trainable.len()) {
            disc[j] = loss;
            disc_grad_norm[j] = norm;
        }
    }

    let w = state.config.weights;
    let mut grads: Vec<Vec<GgdGrad>> = Vec::with_capacity(trainable.len());
    let mut fidelity = Vec::with_capacity(trainable.len());
    let mut adversarial = Vec::with_capacity(trainable.len());
    for m in trainable.clone() {
        let d = &mut state.discriminators[m];
        let scores = d.forward(&fakes[m])?;
        let (adv, g) = gen_adv_loss_with_grad(scores.data())?;
        let g: Vec<f32> = g.iter().map(|v| v * w.lambda2 as f32).collect();
        let d_fake = d.backward(&Tensor::from_vec(scores.shape(), g)?);
        let mut phase_grads = Vec::with_capacity(n);
        let mut nll_sum = 0.0;
        for (i, p) in preds[m].iter().enumerate() {
            let (nll, mut gg) = ggd_nll_with_grad(p, b_maps[i])?;
            nll_sum += nll;
            let scale = w.lambda1 / n as f64;
            let plane = d_fake.plane(i, 0);
            gg.mean.iter_mut().zip(plane).for_each(|(v, &df)| *v = *v * scale + df as f64);
            gg.alpha.mapv_inplace(|v| v * scale);
            gg.beta.mapv_inplace(|v| v * scale);
            phase_grads.push(gg);
        }
        let nll = nll_sum / n as f64;
        if !(nll.is_finite() && adv.is_finite()) {
            return Err(diverged(state, stage, epoch, format!("phase {m} fidelity {nll}, adversarial {adv}")));
        }
        fidelity.push(nll);
        adversarial.push(adv);
        grads.push(phase_grads);
    }
    for m in trainable.clone() {
        state.cascade.phase_module(m).zero_grad();
    }
    state.cascade.backward_batch(trainable.clone(), grads);
    let mut gen_grad_norm = Vec::with_capacity(trainable.len());
    for m in trainable.clone() {
        let mut module = state.cascade.phase_module(m);
        let norm = clip(&mut module, clip_at);
        if !norm.is_finite() {
            return Err(diverged(state, stage, epoch, format!("phase {m} gradient norm {norm}")));
        }
        state.gen_opt[m].step(&mut module, lr);
        gen_grad_norm.push(norm);
    }
    let gen_total = fidelity
        .iter()
        .zip(&adversarial)
        .map(|(f, a)| w.lambda1 * f + w.lambda2 * a)
        .sum();
    debug_assert!(trainable.end <= phases);
    Ok(StepRecord {
        stage,
        epoch,
        stage_step: state.stage_step,
        global_step: state.global_step,
        lr,
        first_phase: trainable.start,
        fidelity,
        adversarial,
        disc,
        gen_total,
        gen_grad_norm,
        disc_grad_norm,
    })
}

/// Validation MAE in raw intensity units for phases `0..=upto`.
pub fn validation_mae(cascade: &Cascade, data: &DatasetManifest, upto: usize, batch_size: usize) -> Result<Vec<f64>> {
    let idx = data.indices(Split::Val);
    let mut sums = vec![0.0; upto + 1];
    for chunk in idx.chunks(batch_size.max(1)) {
        let maps: Vec<_> = chunk.iter().map(|&i| &data.samples[i].input_a).collect();
        let preds = cascade.infer_batch(&maps_to_tensor(&maps), upto)?;
        for (m, phase) in preds.iter().enumerate() {
            for (p, &i) in phase.iter().zip(chunk) {
                let s = &data.samples[i];
                sums[m] += s.norm_b.raw_scale() * mae(&p.mean, &s.target_b)?;
            }
        }
    }
    Ok(sums.into_iter().map(|s| s / idx.len() as f64).collect())
}

fn run_epochs(
    state: &mut TrainState,
    data: &DatasetManifest,
    stage: Stage,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    let train_idx = check_data(data, state)?;
    let cfg = state.config.clone();
    let (trainable, disc_phases, epochs, lr_max) = match stage {
        Stage::Init(m) => {
            let d = match cfg.freeze {
                FreezeMode::All => m..m + 1,
                FreezeMode::GeneratorsOnly => 0..m + 1,
            };
            (m..m + 1, d, cfg.epochs_init, cfg.lr_init)
        }
        Stage::Finetune => (0..cfg.phases, 0..cfg.phases, cfg.epochs_finetune, cfg.lr_finetune),
    };
    if state.stage_epoch == 0 && state.stage_step == 0 {
        match stage {
            Stage::Init(m) => state.reset_optimizers(if cfg.freeze == FreezeMode::All { m..m + 1 } else { 0..m + 1 }),
            Stage::Finetune => state.reset_optimizers(0..cfg.phases),
        }
    }
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size) as u64;
    let total = cfg.anneal_period as u64 * steps_per_epoch;
    let last_phase = trainable.end - 1;
    while state.stage_epoch < epochs {
        let epoch = state.stage_epoch;
        let mut order = train_idx.clone();
        order.shuffle(&mut state.rng);
        let mut fid_sum = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(state.stage_step, total, lr_max);
            let record = gan_step(state, data, batch, trainable.clone(), disc_phases.clone(), lr, stage, epoch)?;
            fid_sum += record.fidelity.iter().sum::<f64>();
            count += 1;
            state.stage_step += 1;
            state.global_step += 1;
            observer.on_step(state, &record)?;
            state.history.push(record);
        }
        let val_mae = validation_mae(&state.cascade, data, last_phase, cfg.batch_size)?;
        if val_mae.iter().any(|v| !v.is_finite()) {
            return Err(diverged(state, stage, epoch, format!("validation MAE {val_mae:?}")));
        }
        let tracks_best = last_phase == cfg.phases - 1;
        let current = val_mae[last_phase];
        let improved = tracks_best && state.best_val_mae.is_none_or(|b| current < b);
        if improved {
            state.best_val_mae = Some(current);
        }
        state.stage_epoch += 1;
        let record = EpochRecord {
            stage,
            epoch,
            val_mae,
            mean_fidelity: fid_sum / count.max(1) as f64,
            improved,
        };
        log::info!(
            "{stage} epoch {epoch}: fidelity {:.4}, val MAE {:?}",
            record.mean_fidelity,
            record.val_mae
        );
        observer.on_epoch(state, &record)?;
        state.epochs.push(record);
    }
    Ok(())
}

/// Initializes phase `m` with every earlier phase frozen.
pub fn init_phase(
    m: usize,
    data: &DatasetManifest,
    state: &mut TrainState,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    if m >= state.config.phases {
        return Err(Error::Training(format!(
            "phase {m} does not exist in a {}-phase cascade",
            state.config.phases
        )));
    }
    if m != state.initialized {
        return Err(Error::Training(format!(
            "phase {m} cannot be initialized: {} phase(s) initialized so far",
            state.initialized
        )));
    }
    if m > 0 && state.config.warm_start && state.stage_epoch == 0 && state.stage_step == 0 {
        let src = state.cascade.generator(m - 1).clone();
        state.cascade.generator_mut(m).warm_start_from(&src)?;
    }
    run_epochs(state, data, Stage::Init(m), observer)?;
    state.initialized += 1;
    state.stage_epoch = 0;
    state.stage_step = 0;
    observer.on_stage_end(state, Stage::Init(m))
}

/// Jointly fine-tunes every phase on the summed per-phase generator losses.
pub fn finetune_all(data: &DatasetManifest, state: &mut TrainState, observer: &mut dyn TrainObserver) -> Result<()> {
    if state.initialized < state.config.phases {
        return Err(Error::Training(format!(
            "fine-tuning needs all {} phases initialized, found {}",
            state.config.phases, state.initialized
        )));
    }
    if state.stage_epoch >= state.config.epochs_finetune {
        return Ok(());
    }
    run_epochs(state, data, Stage::Finetune, observer)?;
    observer.on_stage_end(state, Stage::Finetune)
}

/// Runs (or resumes) the full schedule.
pub fn train(data: &DatasetManifest, state: &mut TrainState, observer: &mut dyn TrainObserver) -> Result<()> {
    check_data(data, state)?;
    while state.initialized < state.config.phases {
        init_phase(state.initialized, data, state, observer)?;
    }
    finetune_all(data, state, observer)
}
