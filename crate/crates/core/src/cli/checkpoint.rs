//! Checkpoint persistence: a JSON manifest plus one little-endian `f32` blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Normalizer;
use crate::diffusion::{NoiseNet, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, Precision};
use crate::training::{Checkpoint, TrainConfig};
use crate::world::{RewardModel, TransitionModel};

pub const CHECKPOINT_FORMAT: &str = "dmemm-ckpt-1";
const BLOB_NAME: &str = "params.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    NoiseNet,
    Transition,
    Reward,
}

/// One network's slice of the blob, in `f32` elements.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    role: TensorRole,
    /// Ensemble member index for transition networks.
    member: usize,
    layer_sizes: Vec<usize>,
    activation: Activation,
    precision: Precision,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TransitionMeta {
    logvar_min: f64,
    logvar_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RewardMeta {
    reward_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    blob: String,
    blob_bytes: usize,
    state_dim: usize,
    action_dim: usize,
    horizon: usize,
    betas: Vec<f64>,
    normalizer: Normalizer,
    tensors: Vec<TensorEntry>,
    transition: Option<TransitionMeta>,
    reward: Option<RewardMeta>,
    train_config: TrainConfig,
    train_seed: u64,
    train_precision: Precision,
    step: usize,
    rng_summary: String,
    config: serde_json::Value,
}

fn push_net(
    net: &DenseNet,
    role: TensorRole,
    member: usize,
    tensors: &mut Vec<TensorEntry>,
    blob: &mut Vec<u8>,
) {
    tensors.push(TensorEntry {
        role,
        member,
        layer_sizes: net.layer_sizes().to_vec(),
        activation: net.activation(),
        precision: net.precision(),
        offset: blob.len() / 4,
        len: net.num_params(),
    });
    for &p in net.params() {
        blob.extend_from_slice(&(p as f32).to_le_bytes());
    }
}

/// Writes `manifest.json` and `params.bin` into `dir` and returns the
/// manifest path. Parameters are stored as `f32`, so networks trained at
/// `f32` precision round-trip exactly.
pub fn write_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    push_net(ckpt.noise_net.dense(), TensorRole::NoiseNet, 0, &mut tensors, &mut blob);
    if let Some(tm) = &ckpt.transition {
        for (i, m) in tm.members().iter().enumerate() {
            push_net(m, TensorRole::Transition, i, &mut tensors, &mut blob);
        }
    }
    if let Some(rm) = &ckpt.reward {
        push_net(rm.net(), TensorRole::Reward, 0, &mut tensors, &mut blob);
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        blob: BLOB_NAME.into(),
        blob_bytes: blob.len(),
        state_dim: ckpt.state_dim(),
        action_dim: ckpt.action_dim(),
        horizon: ckpt.horizon(),
        betas: ckpt.schedule.betas().to_vec(),
        normalizer: ckpt.normalizer.clone(),
        tensors,
        transition: ckpt.transition.as_ref().map(|t| {
            let (logvar_min, logvar_max) = t.logvar_bounds();
            TransitionMeta { logvar_min, logvar_max }
        }),
        reward: ckpt.reward.as_ref().map(|r| RewardMeta {
            reward_scale: r.reward_scale(),
        }),
        train_config: ckpt.train_config.clone(),
        train_seed: ckpt.train_config.seed,
        train_precision: ckpt.train_config.precision,
        step: ckpt.step,
        rng_summary: ckpt.rng_summary.clone(),
        config: ckpt.config_echo.clone(),
    };
    let blob_path = dir.join(BLOB_NAME);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Reads a checkpoint from its manifest path or the directory holding it.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let manifest_path = if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let format_err = |message: String| Error::Format {
        path: manifest_path.clone(),
        message,
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| format_err(e.to_string()))?;
    let found = value.get("format").and_then(|f| f.as_str()).unwrap_or("<missing>");
    if found != CHECKPOINT_FORMAT {
        return Err(Error::UnsupportedVersion {
            found: found.to_string(),
            supported: CHECKPOINT_FORMAT.into(),
        });
    }
    let m: Manifest = serde_json::from_value(value).map_err(|e| format_err(e.to_string()))?;
    let blob_path = manifest_path.parent().unwrap_or(Path::new(".")).join(&m.blob);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let expected = m.tensors.iter().map(|t| t.len).sum::<usize>() * 4;
    if bytes.len() != expected || bytes.len() != m.blob_bytes {
        return Err(Error::LengthMismatch {
            path: blob_path,
            expected,
            actual: bytes.len(),
        });
    }
    let load = |t: &TensorEntry| -> Result<DenseNet> {
        let params = bytes[t.offset * 4..(t.offset + t.len) * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        DenseNet::from_params(&t.layer_sizes, t.activation, t.precision, params)
    };
    let mut noise = None;
    let mut members = Vec::new();
    let mut reward_net = None;
    for t in &m.tensors {
        if t.offset + t.len > bytes.len() / 4 {
            return Err(format_err(format!("tensor {:?} lies outside the blob", t.role)));
        }
        let net = load(t)?;
        match t.role {
            TensorRole::NoiseNet => noise = Some(net),
            TensorRole::Transition => members.push((t.member, net)),
            TensorRole::Reward => reward_net = Some(net),
        }
    }
    let noise = noise.ok_or_else(|| format_err("no noise_net tensor".into()))?;
    let schedule = NoiseSchedule::from_betas(m.betas)?;
    let noise_net = NoiseNet::from_net(noise, m.horizon, m.state_dim, m.action_dim, schedule.n_steps())?;
    members.sort_by_key(|(i, _)| *i);
    let transition = match (m.transition, members.is_empty()) {
        (Some(meta), false) => Some(TransitionModel::from_members(
            members.into_iter().map(|(_, n)| n).collect(),
            m.state_dim,
            m.action_dim,
            meta.logvar_min,
            meta.logvar_max,
        )?),
        (None, true) => None,
        _ => return Err(format_err("transition tensors and metadata disagree".into())),
    };
    let reward = match (m.reward, reward_net) {
        (Some(meta), Some(net)) => Some(RewardModel::from_net(net, m.state_dim, m.action_dim, meta.reward_scale)?),
        (None, None) => None,
        _ => return Err(format_err("reward tensor and metadata disagree".into())),
    };
    let mut train_config = m.train_config;
    train_config.seed = m.train_seed;
    train_config.precision = m.train_precision;
    Ok(Checkpoint {
        noise_net,
        schedule,
        normalizer: m.normalizer,
        transition,
        reward,
        train_config,
        step: m.step,
        rng_summary: m.rng_summary,
        config_echo: m.config,
    })
}
