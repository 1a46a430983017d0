//! Checkpoint directory layout: `weights.upg` (all parameters, flattened),
//! `adam_m.upg` and `adam_v.upg` (optimizer moments) and `checkpoint.json`
//! (configuration, layout, counters, RNG state and history).

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EpochRecord, StepRecord, TrainConfig, TrainState};
use crate::container::TensorFile;
use crate::nn::{AdamState, Module};
use crate::{Error, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Block {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptBlock {
    name: String,
    step: u64,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    config: TrainConfig,
    height: usize,
    width: usize,
    weights: Vec<Block>,
    optimizers: Vec<OptBlock>,
    initialized: usize,
    stage_epoch: usize,
    stage_step: u64,
    global_step: u64,
    rng: ChaCha8Rng,
    best_val_mae: Option<f64>,
    history: Vec<StepRecord>,
    epochs: Vec<EpochRecord>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `state` into directory `dir`, creating it if needed.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let phases = state.config.phases;
    let mut weights = Vec::new();
    let mut values = Vec::new();
    for m in 0..phases {
        let v = state.cascade.phase_values(m);
        weights.push(Block {
            name: format!("generator{m}"),
            len: v.len(),
        });
        values.extend(v);
    }
    for (m, d) in state.discriminators.iter().enumerate() {
        let v = d.flat_values();
        weights.push(Block {
            name: format!("discriminator{m}"),
            len: v.len(),
        });
        values.extend(v);
    }
    let mut optimizers = Vec::new();
    let (mut first, mut second) = (Vec::new(), Vec::new());
    let named = state
        .gen_opt
        .iter()
        .enumerate()
        .map(|(m, o)| (format!("generator{m}"), o))
        .chain(state.disc_opt.iter().enumerate().map(|(m, o)| (format!("discriminator{m}"), o)));
    for (name, opt) in named {
        optimizers.push(OptBlock {
            name,
            step: opt.state.step,
            len: opt.state.m.len(),
        });
        first.extend_from_slice(&opt.state.m);
        second.extend_from_slice(&opt.state.v);
    }
    let flat = |v: Vec<f32>| TensorFile::new(vec![v.len()], v);
    flat(values)?.write(&dir.join("weights.upg"))?;
    flat(first)?.write(&dir.join("adam_m.upg"))?;
    flat(second)?.write(&dir.join("adam_v.upg"))?;
    let header = Header {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config: state.config.clone(),
        height: state.height,
        width: state.width,
        weights,
        optimizers,
        initialized: state.initialized,
        stage_epoch: state.stage_epoch,
        stage_step: state.stage_step,
        global_step: state.global_step,
        rng: state.rng.clone(),
        best_val_mae: state.best_val_mae,
        history: state.history.clone(),
        epochs: state.epochs.clone(),
    };
    write_json(&dir.join("checkpoint.json"), &header)
}

/// Restores a state written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let bad = |reason: String| Error::Container {
        path: dir.to_path_buf(),
        reason,
    };
    let path = dir.join("checkpoint.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| bad(format!("checkpoint.json: {e}")))?;
    if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(bad(format!("unsupported checkpoint schema {}", header.schema_version)));
    }
    let mut state = TrainState::new(header.config.clone(), header.height, header.width)?;
    let phases = state.config.phases;
    let read = |name: &str| -> Result<Vec<f32>> {
        let t = TensorFile::read(&dir.join(name))?;
        if t.dims.len() != 1 {
            return Err(bad(format!("{name} must be rank 1")));
        }
        Ok(t.data)
    };
    let values = read("weights.upg")?;
    if header.weights.len() != 2 * phases || header.weights.iter().map(|b| b.len).sum::<usize>() != values.len() {
        return Err(bad("weight layout does not match weights.upg".into()));
    }
    let mut offset = 0;
    for (k, block) in header.weights.iter().enumerate() {
        let slice = &values[offset..offset + block.len];
        if k < phases {
            state.cascade.phase_module(k).load_flat_values(slice)?;
        } else {
            state.discriminators[k - phases].load_flat_values(slice)?;
        }
        offset += block.len;
    }
    let (first, second) = (read("adam_m.upg")?, read("adam_v.upg")?);
    let total: usize = header.optimizers.iter().map(|b| b.len).sum();
    if header.optimizers.len() != 2 * phases || first.len() != total || second.len() != total {
        return Err(bad("optimizer layout does not match moment files".into()));
    }
    let mut offset = 0;
    for (k, block) in header.optimizers.iter().enumerate() {
        let opt = if k < phases {
            &mut state.gen_opt[k]
        } else {
            &mut state.disc_opt[k - phases]
        };
        opt.state = AdamState {
            step: block.step,
            m: first[offset..offset + block.len].to_vec(),
            v: second[offset..offset + block.len].to_vec(),
        };
        offset += block.len;
    }
    state.initialized = header.initialized;
    state.stage_epoch = header.stage_epoch;
    state.stage_step = header.stage_step;
    state.global_step = header.global_step;
    state.rng = header.rng;
    state.best_val_mae = header.best_val_mae;
    state.history = header.history;
    state.epochs = header.epochs;
    Ok(state)
}
