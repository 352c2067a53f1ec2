//! Offline datasets: scripted collection, summary statistics, per-dimension
//! normalization and the on-disk manifest + blob layout.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffusion::TrajTensor;
use crate::envs::{env_reset, env_step, random_action, EnvSpec, ExpertPolicy};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "dmemm-data-1";
const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorPolicy {
    Random,
    PdExpert,
    /// Even-indexed episodes are expert, odd-indexed are random.
    Mixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// `T + 1` states.
    pub states: Vec<Vec<f64>>,
    /// `T` actions.
    pub actions: Vec<Vec<f64>>,
    /// `T` rewards.
    pub rewards: Vec<f64>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Per-dimension affine map onto roughly `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub state_mean: Vec<f64>,
    pub state_scale: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_scale: Vec<f64>,
}

fn min_max_map(rows: &mut dyn Iterator<Item = &Vec<f64>>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for r in rows {
        for d in 0..dim {
            lo[d] = lo[d].min(r[d]);
            hi[d] = hi[d].max(r[d]);
        }
    }
    let mean = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
    let scale = lo
        .iter()
        .zip(&hi)
        .map(|(l, h)| (0.5 * (h - l)).max(SCALE_FLOOR))
        .collect();
    (mean, scale)
}

impl Normalizer {
    pub fn state_dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_mean.len()
    }

    pub fn normalize_state(&self, s: &[f64]) -> Vec<f64> {
        affine(s, &self.state_mean, &self.state_scale)
    }

    pub fn denormalize_state(&self, s: &[f64]) -> Vec<f64> {
        inverse(s, &self.state_mean, &self.state_scale)
    }

    pub fn normalize_action(&self, a: &[f64]) -> Vec<f64> {
        affine(a, &self.action_mean, &self.action_scale)
    }

    pub fn denormalize_action(&self, a: &[f64]) -> Vec<f64> {
        inverse(a, &self.action_mean, &self.action_scale)
    }

    pub fn normalize(&self, traj: &TrajTensor) -> TrajTensor {
        self.map_traj(traj, |nrm, s| nrm.normalize_state(s), |nrm, a| nrm.normalize_action(a))
    }

    pub fn denormalize(&self, traj: &TrajTensor) -> TrajTensor {
        self.map_traj(
            traj,
            |nrm, s| nrm.denormalize_state(s),
            |nrm, a| nrm.denormalize_action(a),
        )
    }

    fn map_traj(
        &self,
        traj: &TrajTensor,
        fs: impl Fn(&Self, &[f64]) -> Vec<f64>,
        fa: impl Fn(&Self, &[f64]) -> Vec<f64>,
    ) -> TrajTensor {
        let mut out = traj.clone();
        for t in 0..traj.horizon() {
            out.state_mut(t).copy_from_slice(&fs(self, traj.state(t)));
            out.action_mut(t).copy_from_slice(&fa(self, traj.action(t)));
        }
        out
    }
}

fn affine(x: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(mean.iter().zip(scale))
        .map(|(v, (m, s))| (v - m) / s)
        .collect()
}

fn inverse(x: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(mean.iter().zip(scale))
        .map(|(v, (m, s))| v * s + m)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub normalizer: Normalizer,
    /// Longest episode length, in steps.
    pub t_max: usize,
    pub r_max: f64,
    pub r_min: f64,
}

/// `(s, a, r, s')` with states and actions normalized and `r` raw.
pub type NormalizedTransition = (Vec<f64>, Vec<f64>, f64, Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub spec: EnvSpec,
    pub episodes: Vec<Episode>,
    pub stats: DatasetStats,
}

pub fn fit_normalizer(episodes: &[Episode]) -> Result<Normalizer> {
    let first = episodes
        .iter()
        .find(|e| !e.is_empty())
        .ok_or_else(|| Error::config("cannot fit a normalizer on an empty dataset"))?;
    let (ds, da) = (first.states[0].len(), first.actions[0].len());
    let (state_mean, state_scale) =
        min_max_map(&mut episodes.iter().flat_map(|e| e.states.iter()), ds);
    let (action_mean, action_scale) =
        min_max_map(&mut episodes.iter().flat_map(|e| e.actions.iter()), da);
    Ok(Normalizer {
        state_mean,
        state_scale,
        action_mean,
        action_scale,
    })
}

impl OfflineDataset {
    pub fn from_episodes(spec: EnvSpec, episodes: Vec<Episode>) -> Result<Self> {
        let normalizer = fit_normalizer(&episodes)?;
        let t_max = episodes.iter().map(Episode::len).max().unwrap_or(0);
        let (mut r_min, mut r_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for r in episodes.iter().flat_map(|e| e.rewards.iter()) {
            r_min = r_min.min(*r);
            r_max = r_max.max(*r);
        }
        Ok(Self {
            spec,
            episodes,
            stats: DatasetStats {
                normalizer,
                t_max,
                r_max,
                r_min,
            },
        })
    }

    pub fn n_transitions(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn shortest_episode(&self) -> usize {
        self.episodes.iter().map(Episode::len).min().unwrap_or(0)
    }

    /// Normalized window of `horizon` columns starting at step `start`.
    pub fn window(&self, episode: usize, start: usize, horizon: usize) -> TrajTensor {
        let ep = &self.episodes[episode];
        let nrm = &self.stats.normalizer;
        let mut tau = TrajTensor::zeros(horizon, nrm.state_dim(), nrm.action_dim());
        for t in 0..horizon {
            tau.state_mut(t).copy_from_slice(&nrm.normalize_state(&ep.states[start + t]));
            tau.action_mut(t).copy_from_slice(&nrm.normalize_action(&ep.actions[start + t]));
        }
        tau
    }

    /// Every stored transition `(s, a, r, s')` in normalized coordinates
    /// (rewards stay raw).
    pub fn normalized_transitions(&self) -> Vec<NormalizedTransition> {
        let nrm = &self.stats.normalizer;
        self.episodes
            .iter()
            .flat_map(|ep| {
                (0..ep.len()).map(move |t| {
                    (
                        nrm.normalize_state(&ep.states[t]),
                        nrm.normalize_action(&ep.actions[t]),
                        ep.rewards[t],
                        nrm.normalize_state(&ep.states[t + 1]),
                    )
                })
            })
            .collect()
    }
}

pub fn collect_episode(
    spec: &EnvSpec,
    expert: bool,
    noise_scale: f64,
    seed: u64,
) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let noise = Normal::new(0.0, noise_scale.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let mut policy = ExpertPolicy::new();
    let mut s = env_reset(spec, seed);
    let mut ep = Episode {
        states: vec![s.clone()],
        actions: Vec::new(),
        rewards: Vec::new(),
    };
    for t in 0..spec.horizon() {
        let a = if expert {
            let mut a = policy.act(spec, &s);
            if noise_scale > 0.0 {
                for v in &mut a {
                    *v += noise.sample(&mut rng);
                }
            }
            a
        } else {
            random_action(spec, &mut rng)
        };
        let tr = env_step(spec, &s, &a, t, &mut rng)?;
        ep.actions.push(a);
        ep.rewards.push(tr.reward);
        ep.states.push(tr.next_state.clone());
        s = tr.next_state;
        if tr.done {
            break;
        }
    }
    Ok(ep)
}

/// Rolls out `n_episodes` behavior episodes; episode `i` uses seed `seed + i`.
pub fn collect_dataset(
    spec: &EnvSpec,
    policy: BehaviorPolicy,
    n_episodes: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<OfflineDataset> {
    spec.validate()?;
    if n_episodes == 0 {
        return Err(Error::config("n_episodes must be at least 1"));
    }
    let episodes = (0..n_episodes)
        .map(|i| {
            let expert = match policy {
                BehaviorPolicy::Random => false,
                BehaviorPolicy::PdExpert => true,
                BehaviorPolicy::Mixed => i % 2 == 0,
            };
            collect_episode(spec, expert, noise_scale, seed.wrapping_add(i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    OfflineDataset::from_episodes(spec.clone(), episodes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EpisodeEntry {
    /// Offset into the blob, in `f64` elements.
    offset: usize,
    steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    spec: EnvSpec,
    stats: DatasetStats,
    state_dim: usize,
    action_dim: usize,
    blob: String,
    episodes: Vec<EpisodeEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

/// Writes `manifest.json` and `data.bin` into `dir`.
///
/// The blob holds little-endian `f64`, episode-major: states, then actions,
/// then rewards.
pub fn write_dataset(
    dataset: &OfflineDataset,
    dir: &Path,
    config_echo: Option<serde_json::Value>,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (ds, da) = (dataset.spec.state_dim(), dataset.spec.action_dim());
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(dataset.episodes.len());
    let mut offset = 0;
    for ep in &dataset.episodes {
        entries.push(EpisodeEntry {
            offset,
            steps: ep.len(),
        });
        let values = ep
            .states
            .iter()
            .flatten()
            .chain(ep.actions.iter().flatten())
            .chain(ep.rewards.iter());
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
            offset += 1;
        }
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.to_string(),
        spec: dataset.spec.clone(),
        stats: dataset.stats.clone(),
        state_dim: ds,
        action_dim: da,
        blob: "data.bin".into(),
        episodes: entries,
        config: config_echo,
    };
    let blob_path = dir.join("data.bin");
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Reads a dataset from its manifest path (or the directory holding it).
pub fn read_dataset(path: &Path) -> Result<OfflineDataset> {
    let manifest_path = if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::UnsupportedVersion {
            found: manifest.format,
            supported: DATASET_FORMAT.into(),
        });
    }
    let (ds, da) = (manifest.state_dim, manifest.action_dim);
    let blob_path = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.blob);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let n_values: usize = manifest
        .episodes
        .iter()
        .map(|e| (e.steps + 1) * ds + e.steps * da + e.steps)
        .sum();
    if bytes.len() != n_values * 8 {
        return Err(Error::LengthMismatch {
            path: blob_path,
            expected: n_values * 8,
            actual: bytes.len(),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let episodes = manifest
        .episodes
        .iter()
        .map(|e| {
            let mut cursor = e.offset;
            let mut take = |n: usize| {
                let out = values[cursor..cursor + n].to_vec();
                cursor += n;
                out
            };
            let states = (0..=e.steps).map(|_| take(ds)).collect();
            let actions = (0..e.steps).map(|_| take(da)).collect();
            let rewards = take(e.steps);
            Episode {
                states,
                actions,
                rewards,
            }
        })
        .collect();
    Ok(OfflineDataset {
        spec: manifest.spec,
        episodes,
        stats: manifest.stats,
    })
}
