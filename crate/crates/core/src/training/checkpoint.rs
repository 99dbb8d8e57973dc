//! Resumable training checkpoints: generator and critic parameters (with
//! batch-norm buffers), optimizer moments, and the training RNG position.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use crate::discriminators::DiscriminatorSet;
use crate::pipeline::Pipeline;
use crate::rng::{Stream, StreamState};
use crate::{Error, Result};

pub const TRAIN_CHECKPOINT_VERSION: &str = "train-v1";

#[derive(Serialize, Deserialize)]
pub struct TrainState {
    pub version: String,
    pub step: usize,
    pub config_hash: String,
    pub vocab_hash: String,
    pub stream: StreamState,
    pub opt_g_steps: usize,
    pub opt_d_steps: usize,
}

pub fn checkpoint_dir(artifacts: &Path, step: usize) -> PathBuf {
    artifacts.join("train").join(format!("step_{step:06}"))
}

#[allow(clippy::too_many_arguments)]
pub fn save(
    artifacts: &Path,
    step: usize,
    pipeline: &Pipeline,
    discs: &DiscriminatorSet,
    opt_g: &Adam,
    opt_d: &Adam,
    stream: &Stream,
) -> Result<PathBuf> {
    let dir = checkpoint_dir(artifacts, step);
    std::fs::create_dir_all(&dir)?;
    pipeline.gen_reg.save(&dir.join("gen.safetensors"))?;
    discs.reg.save(&dir.join("disc.safetensors"))?;
    let og: std::collections::HashMap<String, candle_core::Tensor> =
        opt_g.state_tensors().into_iter().collect();
    candle_core::safetensors::save(&og, dir.join("opt_g.safetensors"))?;
    let od: std::collections::HashMap<String, candle_core::Tensor> =
        opt_d.state_tensors().into_iter().collect();
    candle_core::safetensors::save(&od, dir.join("opt_d.safetensors"))?;
    let state = TrainState {
        version: TRAIN_CHECKPOINT_VERSION.to_string(),
        step,
        config_hash: pipeline.cfg.hash(),
        vocab_hash: pipeline.vocab_hash.clone(),
        stream: stream.state(),
        opt_g_steps: opt_g.step_count(),
        opt_d_steps: opt_d.step_count(),
    };
    std::fs::write(
        dir.join("state.json"),
        serde_json::to_string_pretty(&state).expect("state serializes"),
    )?;
    std::fs::write(artifacts.join("train").join("latest"), format!("step_{step:06}"))?;
    Ok(dir)
}

/// Load the newest checkpoint if one exists. Corruption or a mismatched
/// config/vocabulary refuses the resume with a clear message.
pub fn load_latest(
    artifacts: &Path,
    pipeline: &mut Pipeline,
    discs: &mut DiscriminatorSet,
    opt_g: &mut Adam,
    opt_d: &mut Adam,
) -> Result<Option<(usize, Stream)>> {
    let marker = artifacts.join("train").join("latest");
    if !marker.exists() {
        return Ok(None);
    }
    let name = std::fs::read_to_string(&marker)?;
    let dir = artifacts.join("train").join(name.trim());
    let state_path = dir.join("state.json");
    let text = std::fs::read_to_string(&state_path).map_err(|e| {
        Error::Checkpoint(format!(
            "checkpoint marker points at {} but state.json is unreadable: {e}; refusing resume",
            dir.display()
        ))
    })?;
    let state: TrainState = serde_json::from_str(&text).map_err(|e| {
        Error::Checkpoint(format!("corrupt state.json in {}: {e}; refusing resume", dir.display()))
    })?;
    if state.version != TRAIN_CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version `{}` does not match `{TRAIN_CHECKPOINT_VERSION}`",
            state.version
        )));
    }
    if state.config_hash != pipeline.cfg.hash() {
        return Err(Error::Checkpoint(
            "checkpoint was produced by a different config; refusing resume".into(),
        ));
    }
    if state.vocab_hash != pipeline.vocab_hash {
        return Err(Error::Checkpoint(
            "checkpoint was produced against a different vocabulary; refusing resume".into(),
        ));
    }
    pipeline.gen_reg.load(&dir.join("gen.safetensors"))?;
    discs.reg.load(&dir.join("disc.safetensors"))?;
    let og = candle_core::safetensors::load(dir.join("opt_g.safetensors"), &pipeline.device)?;
    opt_g.load_state(&og, state.opt_g_steps)?;
    let od = candle_core::safetensors::load(dir.join("opt_d.safetensors"), &pipeline.device)?;
    opt_d.load_state(&od, state.opt_d_steps)?;
    Ok(Some((state.step, Stream::restore(&state.stream))))
}
