//! Configuration-driven experiment commands.
//!
//! Output layout under `--out`:
//! - `generate-data`: `manifest.json`, `tensors/`.
//! - `train`: `data/` (when the dataset is built from the config),
//!   `loss_log.jsonl`, `epochs.jsonl`, `run.json` and `checkpoints/{init-<m>,
//!   finetune, latest, best, final}`.
//! - `eval`: `report.json`, `report.csv`, `figures/panel_<k>.png`.
//! - `sweep-supervision`: `level-<n>/seed-<s>/` runs, `sweep.json`,
//!   `sweep.csv`, `curve_<metric>.png`.

mod config;
pub mod figures;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{DataConfig, ExperimentConfig, ReportConfig, SweepConfig, Task, CONFIG_SCHEMA_VERSION};

use crate::cascade::Guidance;
use crate::degrade::{
    load_image_dir, pairs_from_clean, pairs_from_dirs, procedural_pairs, simulate_motion, subset_supervision,
    undersample_kspace, DatasetManifest, NormConstants,
};
use crate::evaluate::evaluate_with;
use crate::metrics::{paired_significance, Comparison, EvalReport};
use crate::provenance::{config_hash, RunInfo};
use crate::trainer::{
    load_checkpoint, save_checkpoint, train, EpochRecord, Stage, StepRecord, TrainObserver, TrainState,
};
use crate::{Error, Result};

/// Process exit codes.
pub mod exit_code {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const TRAINING: i32 = 4;
}

/// Maps an error to its documented exit code.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) => exit_code::CONFIG,
        Error::Data(_) | Error::InsufficientSamples { .. } | Error::Container { .. } | Error::Image(_) => {
            exit_code::DATA
        }
        Error::Training(_) | Error::Diverged { .. } | Error::DegenerateUncertainty(_) | Error::NonFinite(_) => {
            exit_code::TRAINING
        }
        _ => exit_code::OTHER,
    }
}

/// Ablations selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Phase inputs use the predecessor's mean without uncertainty weighting.
    NoGuidance,
}

/// A config with command-line overrides applied.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub seed: u64,
    pub config_hash: String,
}

impl Run {
    pub fn new(mut config: ExperimentConfig, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = seed {
            config.seed = s;
        }
        config.train.seed = config.seed;
        let out = out
            .or_else(|| config.out_dir.clone())
            .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))?;
        config.validate()?;
        // The hash identifies the experiment, not where its outputs go.
        config.out_dir = None;
        let config_hash = config_hash(&config)?;
        config.out_dir = Some(out.clone());
        Ok(Self {
            seed: config.seed,
            config,
            out,
            config_hash,
        })
    }

    pub fn info(&self, command: &str) -> RunInfo {
        RunInfo::new(command, self.config_hash.clone(), self.seed)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Builds the dataset described by `data` for `task`.
pub fn build_dataset(task: Task, data: &DataConfig, seed: u64) -> Result<DatasetManifest> {
    let seed = data.seed.unwrap_or(seed);
    let b_range = data.b_range.unwrap_or(NormConstants { min: 0.0, max: 1.0 });
    let mut m = match task {
        Task::Procedural => procedural_pairs(data.subjects, (data.height, data.width), &data.phantom, seed)?,
        Task::Undersample => {
            let dir = data.clean_dir.as_deref().ok_or_else(|| Error::Config("data.clean_dir missing".into()))?;
            let (f, shape) = (data.keep_fraction, data.mask);
            pairs_from_clean(task.name(), &load_image_dir(dir)?, seed, b_range, |img, _| {
                undersample_kspace(img, f, shape).map_err(|e| Error::Data(e.to_string()))
            })?
        }
        Task::Motion => {
            let dir = data.clean_dir.as_deref().ok_or_else(|| Error::Config("data.clean_dir missing".into()))?;
            let p = data.motion;
            pairs_from_clean(task.name(), &load_image_dir(dir)?, seed, b_range, |img, s| {
                simulate_motion(img, p, s).map_err(|e| Error::Data(e.to_string()))
            })?
        }
        Task::PairedDirs => {
            let a = data.a_dir.as_deref().ok_or_else(|| Error::Config("data.a_dir missing".into()))?;
            let b = data.b_dir.as_deref().ok_or_else(|| Error::Config("data.b_dir missing".into()))?;
            pairs_from_dirs(&load_image_dir(a)?, &load_image_dir(b)?, seed, b_range)?
        }
    };
    if task == Task::Procedural {
        if let Some(r) = data.b_range {
            m.b_range = r;
        }
    }
    Ok(m)
}

/// Loads the configured manifest, or builds the dataset and (optionally) saves it.
fn dataset_for(run: &Run, command: &str, save_to: Option<&Path>) -> Result<DatasetManifest> {
    if let Some(path) = &run.config.data.manifest {
        return DatasetManifest::load(path);
    }
    let mut data = build_dataset(run.config.task, &run.config.data, run.seed)?;
    data.run = Some(run.info(command));
    if let Some(dir) = save_to {
        data.save(dir)?;
    }
    Ok(data)
}

/// `generate-data`: writes `manifest.json` and tensors under the output directory.
pub fn cmd_generate_data(run: &Run) -> Result<PathBuf> {
    create_dir(&run.out)?;
    let mut data = build_dataset(run.config.task, &run.config.data, run.seed)?;
    data.run = Some(run.info("generate-data"));
    let path = data.save(&run.out)?;
    log::info!(
        "wrote {} samples ({} train / {} val / {} test subjects) to {}",
        data.samples.len(),
        data.splits.train.len(),
        data.splits.val.len(),
        data.splits.test.len(),
        path.display()
    );
    Ok(path)
}

#[derive(Serialize)]
struct Tagged<'a, T> {
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    record: &'a T,
}

/// Writes logs and checkpoints as training progresses.
struct RunRecorder {
    out: PathBuf,
    info: RunInfo,
    steps: BufWriter<File>,
    epochs: BufWriter<File>,
    checkpoints: bool,
}

impl RunRecorder {
    fn new(out: &Path, info: RunInfo, resumed: Option<&TrainState>, checkpoints: bool) -> Result<Self> {
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = out.join(name);
            Ok(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
        };
        let mut rec = Self {
            out: out.to_path_buf(),
            info,
            steps: open("loss_log.jsonl")?,
            epochs: open("epochs.jsonl")?,
            checkpoints,
        };
        if let Some(state) = resumed {
            for r in &state.history {
                rec.log_step(r)?;
            }
            for r in &state.epochs {
                rec.log_epoch(r)?;
            }
        }
        Ok(rec)
    }

    fn line<T: Serialize>(w: &mut BufWriter<File>, info: &RunInfo, record: &T, path: &Path) -> Result<()> {
        let tagged = Tagged {
            config_hash: &info.config_hash,
            seed: info.seed,
            record,
        };
        let text = serde_json::to_string(&tagged)?;
        writeln!(w, "{text}").map_err(|e| Error::io(path, e))
    }

    fn log_step(&mut self, r: &StepRecord) -> Result<()> {
        Self::line(&mut self.steps, &self.info, r, &self.out.join("loss_log.jsonl"))
    }

    fn log_epoch(&mut self, r: &EpochRecord) -> Result<()> {
        Self::line(&mut self.epochs, &self.info, r, &self.out.join("epochs.jsonl"))?;
        self.epochs.flush().map_err(|e| Error::io(self.out.join("epochs.jsonl"), e))?;
        self.steps.flush().map_err(|e| Error::io(self.out.join("loss_log.jsonl"), e))
    }

    fn checkpoint(&self, state: &TrainState, name: &str) -> Result<()> {
        if !self.checkpoints && name != "final" {
            return Ok(());
        }
        let dir = self.out.join("checkpoints").join(name);
        save_checkpoint(state, &dir)?;
        write_json(&dir.join("run.json"), &self.info)
    }
}

impl TrainObserver for RunRecorder {
    fn on_step(&mut self, _state: &TrainState, record: &StepRecord) -> Result<()> {
        self.log_step(record)
    }

    fn on_epoch(&mut self, state: &TrainState, record: &EpochRecord) -> Result<()> {
        self.log_epoch(record)?;
        self.checkpoint(state, "latest")?;
        if record.improved {
            self.checkpoint(state, "best")?;
        }
        Ok(())
    }

    fn on_stage_end(&mut self, state: &TrainState, stage: Stage) -> Result<()> {
        self.checkpoint(state, &stage.to_string())
    }
}

/// Result of `train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub run: RunInfo,
    pub guidance: Guidance,
    pub steps: u64,
    pub final_val_mae: Vec<f64>,
    pub best_val_mae: Option<f64>,
    pub final_checkpoint: PathBuf,
}

/// `train`: runs (or resumes) progressive training.
pub fn cmd_train(run: &Run, ablation: Option<Ablation>, resume: Option<&Path>) -> Result<TrainSummary> {
    train_on(run, ablation, resume, None, true)
}

fn train_on(
    run: &Run,
    ablation: Option<Ablation>,
    resume: Option<&Path>,
    data: Option<&DatasetManifest>,
    all_checkpoints: bool,
) -> Result<TrainSummary> {
    create_dir(&run.out)?;
    let mut tc = run.config.train.clone();
    if ablation == Some(Ablation::NoGuidance) {
        tc.guidance = Guidance::NoGuidance;
    }
    let owned;
    let data = match data {
        Some(d) => d,
        None => {
            let save_to = run.config.data.manifest.is_none().then(|| run.out.join("data"));
            owned = dataset_for(run, "train", save_to.as_deref())?;
            &owned
        }
    };
    let mut state = match resume {
        Some(dir) => {
            let s = load_checkpoint(dir)?;
            if s.config != tc {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different configuration",
                    dir.display()
                )));
            }
            s
        }
        None => TrainState::new(tc.clone(), data.height, data.width)?,
    };
    let info = run.info("train");
    write_json(&run.out.join("run.json"), &info)?;
    let mut recorder = RunRecorder::new(&run.out, info.clone(), resume.map(|_| &state), all_checkpoints)?;
    train(data, &mut state, &mut recorder)?;
    recorder.checkpoint(&state, "final")?;
    let final_val_mae = state
        .epochs
        .last()
        .map(|e| e.val_mae.clone())
        .unwrap_or_default();
    Ok(TrainSummary {
        run: info,
        guidance: tc.guidance,
        steps: state.global_step,
        final_val_mae,
        best_val_mae: state.best_val_mae,
        final_checkpoint: run.out.join("checkpoints").join("final"),
    })
}

fn load_for_eval(ckpt: &Path, data: &DatasetManifest) -> Result<TrainState> {
    let state = load_checkpoint(ckpt)?;
    if (state.height, state.width) != (data.height, data.width) {
        return Err(Error::Config(format!(
            "checkpoint {} expects {}x{} inputs but the dataset is {}x{}",
            ckpt.display(),
            state.height,
            state.width,
            data.height,
            data.width
        )));
    }
    if state.initialized < state.config.phases {
        return Err(Error::Config(format!(
            "checkpoint {} has only {} of {} phases initialized",
            ckpt.display(),
            state.initialized,
            state.config.phases
        )));
    }
    Ok(state)
}

/// `eval`: per-phase metrics, figures and optional significance comparison
/// against a second checkpoint.
pub fn cmd_eval(run: &Run, checkpoint: &Path, compare: Option<&Path>) -> Result<EvalReport> {
    create_dir(&run.out)?;
    let data = dataset_for(run, "eval", None)?;
    eval_on(run, &data, checkpoint, compare, true)
}

fn eval_on(run: &Run, data: &DatasetManifest, checkpoint: &Path, compare: Option<&Path>, write: bool) -> Result<EvalReport> {
    let state = load_for_eval(checkpoint, data)?;
    let rc = &run.config.report;
    let fig_dir = run.out.join("figures");
    let figures = write && rc.figures && rc.max_figures > 0;
    if figures {
        create_dir(&fig_dir)?;
    }
    let mut report = evaluate_with(
        &state.cascade,
        data,
        rc.split,
        run.config_hash.clone(),
        run.seed,
        &mut |k, sample, cs| {
            if figures && k < rc.max_figures {
                figures::save_png(&figures::phase_panel(sample, cs), &fig_dir.join(format!("panel_{k:03}.png")))?;
            }
            Ok(())
        },
    )?;
    if let Some(other) = compare {
        let other_state = load_for_eval(other, data)?;
        let base = crate::evaluate::evaluate(&other_state.cascade, data, rc.split, run.config_hash.clone(), run.seed)?;
        for metric in ["ssim", "psnr", "mae"] {
            let a = report.final_metric(metric)?;
            let b = base.final_metric(metric)?;
            let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).filter(|d| d.is_finite()).collect();
            report.comparisons.push(Comparison {
                label: format!("{} vs {}", checkpoint.display(), other.display()),
                metric: metric.to_string(),
                p_value: paired_significance(&a, &b)?,
                mean_difference: diffs.iter().sum::<f64>() / diffs.len().max(1) as f64,
            });
        }
    }
    if write {
        write_json(&run.out.join("report.json"), &report)?;
        write_text(&run.out.join("report.csv"), &report.to_csv())?;
    }
    log::info!(
        "{} images: MAE {:.5} ± {:.5}, SSIM {:.4}, PSNR {:.2}",
        report.rows.len(),
        report.mae.mean,
        report.mae.std,
        report.ssim.mean,
        report.psnr.mean
    );
    Ok(report)
}

/// One (level, seed) run of a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRun {
    pub level: usize,
    pub seed: u64,
    pub mae: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepLevel {
    pub level: usize,
    pub completed: usize,
    pub failed: usize,
    pub median_mae: Option<f64>,
    pub median_psnr: Option<f64>,
    pub median_ssim: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub run: RunInfo,
    pub runs: Vec<SweepRun>,
    pub levels: Vec<SweepLevel>,
    /// Median test MAE is non-increasing over the completed levels.
    pub mae_non_increasing: bool,
    pub psnr_non_decreasing: bool,
    pub ssim_non_decreasing: bool,
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn monotone(values: &[Option<f64>], non_increasing: bool) -> bool {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    v.windows(2).all(|w| if non_increasing { w[1] <= w[0] } else { w[1] >= w[0] })
}

/// `sweep-supervision`: one train + test evaluation per (level, seed);
/// failing runs are recorded and the sweep continues.
pub fn cmd_sweep_supervision(run: &Run, levels: Option<&[usize]>) -> Result<SweepReport> {
    create_dir(&run.out)?;
    let data = dataset_for(run, "sweep-supervision", Some(&run.out.join("data")))?;
    let levels: Vec<usize> = levels.map(<[usize]>::to_vec).unwrap_or_else(|| run.config.sweep.levels.clone());
    let seeds = if run.config.sweep.seeds.is_empty() {
        vec![run.seed]
    } else {
        run.config.sweep.seeds.clone()
    };
    let mut runs = Vec::new();
    for &level in &levels {
        for &seed in &seeds {
            let out = run.out.join(format!("level-{level}")).join(format!("seed-{seed}"));
            let outcome = (|| -> Result<EvalReport> {
                let subset = subset_supervision(&data, level, seed)?;
                let sub_run = Run::new(run.config.clone(), Some(seed), Some(out.clone()))?;
                let summary = train_on(&sub_run, None, None, Some(&subset), false)?;
                eval_on(&sub_run, &subset, &summary.final_checkpoint, None, true)
            })();
            let record = match outcome {
                Ok(r) => SweepRun {
                    level,
                    seed,
                    mae: Some(r.mae.mean),
                    psnr: Some(r.psnr.mean),
                    ssim: Some(r.ssim.mean),
                    error: None,
                },
                Err(e) => {
                    log::warn!("sweep level {level} seed {seed} failed: {e}");
                    SweepRun {
                        level,
                        seed,
                        mae: None,
                        psnr: None,
                        ssim: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            runs.push(record);
        }
    }
    let summary: Vec<SweepLevel> = levels
        .iter()
        .map(|&level| {
            let at: Vec<&SweepRun> = runs.iter().filter(|r| r.level == level).collect();
            let col = |f: fn(&SweepRun) -> Option<f64>| median(&at.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            SweepLevel {
                level,
                completed: at.iter().filter(|r| r.error.is_none()).count(),
                failed: at.iter().filter(|r| r.error.is_some()).count(),
                median_mae: col(|r| r.mae),
                median_psnr: col(|r| r.psnr),
                median_ssim: col(|r| r.ssim),
            }
        })
        .collect();
    let report = SweepReport {
        run: run.info("sweep-supervision"),
        mae_non_increasing: monotone(&summary.iter().map(|l| l.median_mae).collect::<Vec<_>>(), true),
        psnr_non_decreasing: monotone(&summary.iter().map(|l| l.median_psnr).collect::<Vec<_>>(), false),
        ssim_non_decreasing: monotone(&summary.iter().map(|l| l.median_ssim).collect::<Vec<_>>(), false),
        runs,
        levels: summary,
    };
    write_json(&run.out.join("sweep.json"), &report)?;
    let mut csv = String::from("level,completed,failed,median_mae,median_psnr,median_ssim\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for l in &report.levels {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            l.level,
            l.completed,
            l.failed,
            opt(l.median_mae),
            opt(l.median_psnr),
            opt(l.median_ssim)
        ));
    }
    write_text(&run.out.join("sweep.csv"), &csv)?;
    let xs: Vec<f64> = report.levels.iter().map(|l| l.level as f64).collect();
    let ys = |f: fn(&SweepLevel) -> Option<f64>| report.levels.iter().map(|l| f(l).unwrap_or(f64::NAN)).collect::<Vec<_>>();
    let curves = [
        ("mae", ys(|l| l.median_mae), report.mae_non_increasing),
        ("psnr", ys(|l| l.median_psnr), report.psnr_non_decreasing),
        ("ssim", ys(|l| l.median_ssim), report.ssim_non_decreasing),
    ];
    for (name, y, ok) in curves {
        figures::save_png(&figures::curve(&xs, &y, ok), &run.out.join(format!("curve_{name}.png")))?;
    }
    Ok(report)
}
