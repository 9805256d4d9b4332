//! Resumable training state: parameters, optimizer moments and the log of
//! completed epochs, stored as one checkpoint file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainLog;
use crate::agents::{load_checkpoint, restore_from, save_checkpoint_with, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, ParamStore, Tensor};

const STATE_FILE: &str = "train_state.ckpt";

#[derive(Debug, Serialize, Deserialize)]
struct Extra {
    fingerprint: String,
    epochs_done: usize,
    step_count: u64,
    adam: AdamConfig,
    log: TrainLog,
}

pub(crate) struct Resumed {
    pub epochs_done: usize,
    pub adam: AdamState,
    pub log: TrainLog,
}

/// Hash identifying a run; a state file is only resumed under the same one.
pub(crate) fn fingerprint(parts: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(parts.to_string().as_bytes()))
}

pub(crate) fn state_path(dir: &Path) -> PathBuf {
    dir.join(STATE_FILE)
}

fn moment_names(name: &str) -> (String, String) {
    (format!("adam.m/{name}"), format!("adam.v/{name}"))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn save(
    dir: &Path,
    kind: &str,
    config: &ModelConfig,
    seed: u64,
    fingerprint: &str,
    params: &ParamStore,
    adam: &AdamState,
    epochs_done: usize,
    log: &TrainLog,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut all = params.clone();
    let (m, v) = adam.moments();
    let names: Vec<(String, Vec<usize>)> = params
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    let trainable = m.iter().zip(v).filter(|(m, _)| !m.is_empty());
    for ((name, shape), (m, v)) in names.iter().zip(trainable) {
        let (mn, vn) = moment_names(name);
        all.add(mn, Tensor::new(shape.clone(), m.clone())?);
        all.add(vn, Tensor::new(shape.clone(), v.clone())?);
    }
    let extra = Extra {
        fingerprint: fingerprint.to_string(),
        epochs_done,
        step_count: adam.step_count(),
        adam: adam.config,
        log: log.clone(),
    };
    save_checkpoint_with(
        &state_path(dir),
        &format!("state:{kind}"),
        config,
        seed,
        &all,
        serde_json::to_value(extra)?,
    )
}

/// Restores `params` in place and returns the saved progress, or `None`
/// when `dir` holds no state file.
pub(crate) fn load(dir: &Path, kind: &str, fingerprint: &str, params: &mut ParamStore) -> Result<Option<Resumed>> {
    let path = state_path(dir);
    if !path.exists() {
        return Ok(None);
    }
    let ckpt = load_checkpoint(&path)?;
    if ckpt.kind != format!("state:{kind}") {
        return Err(Error::Invalid(format!(
            "{}: not a {kind} training state (found {})",
            path.display(),
            ckpt.kind
        )));
    }
    let extra: Extra = serde_json::from_value(ckpt.extra.clone())?;
    if extra.fingerprint != fingerprint {
        return Err(Error::Invalid(format!(
            "{}: training state belongs to a different run; remove it to start over",
            path.display()
        )));
    }
    restore_from(params, &ckpt.params, &path, false)?;
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        if !t.requires_grad() {
            m.push(Vec::new());
            v.push(Vec::new());
            continue;
        }
        let (mn, vn) = moment_names(name);
        let get = |n: &str| {
            ckpt.params
                .by_name(n)
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::Invalid(format!("{}: missing optimizer tensor {n}", path.display())))
        };
        m.push(get(&mn)?);
        v.push(get(&vn)?);
    }
    let adam = AdamState::from_parts(extra.adam, extra.step_count, m, v, params)?;
    Ok(Some(Resumed {
        epochs_done: extra.epochs_done,
        adam,
        log: extra.log,
    }))
}
