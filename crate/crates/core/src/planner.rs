//! Guided reverse diffusion conditioned on the current state, and the
//! receding-horizon control loop that executes the first planned action.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Normalizer;
use crate::diffusion::{add_scaled_noise, reverse_mean, NoiseNet, NoiseSchedule, TrajTensor};
use crate::envs::{env_reset, env_step, EnvSpec};
use crate::error::{check_len, Error, Result};
use crate::training::Checkpoint;
use crate::world::{LogProbGrad, RewardModel, TransitionModel};

/// Bound on normalized plan entries (three times the data range).
pub const PLAN_CLIP: f64 = 3.0;

fn default_alpha() -> f64 {
    0.001
}
fn default_lambda_guide() -> f64 {
    0.1
}
fn default_candidates() -> usize {
    1
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Guide scale multiplying `sigma_k^2 g`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Weight of the transition log-density inside the guide.
    #[serde(default = "default_lambda_guide")]
    pub lambda_guide: f64,
    #[serde(default = "yes")]
    pub guide_reward: bool,
    #[serde(default = "yes")]
    pub guide_transition: bool,
    /// Plans drawn per decision; the one with the highest predicted return wins.
    #[serde(default = "default_candidates")]
    pub n_candidates: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            lambda_guide: default_lambda_guide(),
            guide_reward: true,
            guide_transition: true,
            n_candidates: default_candidates(),
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.lambda_guide >= 0.0) {
            return Err(Error::config("guidance.alpha and guidance.lambda_guide must be >= 0"));
        }
        if self.n_candidates == 0 {
            return Err(Error::config("guidance.n_candidates must be >= 1"));
        }
        Ok(())
    }
}

/// Differentiable per-step reward `R(s, a)`.
pub trait RewardGradient: Sync {
    /// `(r, dr/ds, dr/da)`.
    fn reward_grad(&self, s: &[f64], a: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)>;
}

/// Differentiable transition log-density `log T(s' | s, a)`.
pub trait TransitionLogDensity: Sync {
    fn logprob_grad(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<LogProbGrad>;
}

impl RewardGradient for RewardModel {
    fn reward_grad(&self, s: &[f64], a: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        self.grad(s, a)
    }
}

impl TransitionLogDensity for TransitionModel {
    fn logprob_grad(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<LogProbGrad> {
        TransitionModel::logprob_grad(self, s, a, s_next)
    }
}

/// The reward and dynamics terms used to steer sampling.
#[derive(Clone, Copy, Default)]
pub struct Guide<'a> {
    pub reward: Option<&'a dyn RewardGradient>,
    pub transition: Option<&'a dyn TransitionLogDensity>,
    pub lambda_guide: f64,
}

impl<'a> Guide<'a> {
    /// Uses the models enabled by `cfg`.
    pub fn from_models(
        reward: Option<&'a RewardModel>,
        transition: Option<&'a TransitionModel>,
        cfg: &GuidanceConfig,
    ) -> Result<Self> {
        let reward = if cfg.guide_reward { reward } else { None };
        let transition = if cfg.guide_transition && cfg.lambda_guide > 0.0 {
            transition
        } else {
            None
        };
        if cfg.alpha > 0.0 {
            if cfg.guide_reward && reward.is_none() {
                return Err(Error::config("reward guidance needs a reward model"));
            }
            if cfg.guide_transition && cfg.lambda_guide > 0.0 && transition.is_none() {
                return Err(Error::config("transition guidance needs a transition model"));
            }
        }
        Ok(Self {
            reward: reward.map(|r| r as &dyn RewardGradient),
            transition: transition.map(|t| t as &dyn TransitionLogDensity),
            lambda_guide: cfg.lambda_guide,
        })
    }

    /// `J(tau) = sum_t R(s_t, a_t) + lambda_guide sum_t log T(s_{t+1} | s_t, a_t)`
    /// and its gradient with respect to every entry of `tau`.
    pub fn objective_grad(&self, tau: &TrajTensor) -> Result<(f64, TrajTensor)> {
        let h = tau.horizon();
        let (ds, width) = (tau.state_dim(), tau.width());
        let mut grad = vec![0.0; tau.len()];
        let mut value = 0.0;
        if let Some(r) = self.reward {
            for t in 0..h {
                let (v, gs, ga) = r.reward_grad(tau.state(t), tau.action(t))?;
                value += v;
                for (d, g) in gs.iter().chain(&ga).enumerate() {
                    grad[t * width + d] += g;
                }
            }
        }
        if let Some(tm) = self.transition {
            let lam = self.lambda_guide;
            for t in 0..h - 1 {
                let lp = tm.logprob_grad(tau.state(t), tau.action(t), tau.state(t + 1))?;
                value += lam * lp.logp;
                for (d, g) in lp.d_state.iter().chain(&lp.d_action).enumerate() {
                    grad[t * width + d] += lam * g;
                }
                for (d, g) in lp.d_next_state.iter().enumerate().take(ds) {
                    grad[(t + 1) * width + d] += lam * g;
                }
            }
        }
        Ok((value, tau.with_data(grad)?))
    }

    /// Sum of predicted rewards along `tau` (0 without a reward model).
    pub fn predicted_return(&self, tau: &TrajTensor) -> Result<f64> {
        let Some(r) = self.reward else { return Ok(0.0) };
        (0..tau.horizon())
            .map(|t| Ok(r.reward_grad(tau.state(t), tau.action(t))?.0))
            .sum()
    }
}

/// Gradient of the guidance objective at `tau`.
pub fn guidance_gradient(guide: &Guide, tau: &TrajTensor) -> Result<TrajTensor> {
    Ok(guide.objective_grad(tau)?.1)
}

/// Writes the (normalized) current state into column 0.
pub fn condition(tau: &mut TrajTensor, s_now: &[f64]) -> Result<()> {
    check_len("conditioning state", tau.state_dim(), s_now.len())?;
    tau.state_mut(0).copy_from_slice(s_now);
    Ok(())
}

/// One reverse step with the mean shifted by `alpha sigma_k^2 g(tau^k)`, then
/// conditioned on `s_now` (normalized). The guide is not evaluated when
/// `alpha == 0`.
#[allow(clippy::too_many_arguments)]
pub fn guided_reverse_step(
    sched: &NoiseSchedule,
    net: &NoiseNet,
    guide: &Guide,
    tau_k: &TrajTensor,
    k: usize,
    s_now: &[f64],
    alpha: f64,
    z: Option<&TrajTensor>,
) -> Result<TrajTensor> {
    let mut out = reverse_mean(sched, net, tau_k, k)?;
    let sigma2 = sched.sigma2(k);
    if alpha != 0.0 {
        let g = guidance_gradient(guide, tau_k)?;
        for (m, gv) in out.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *m += alpha * sigma2 * gv;
        }
    }
    if let Some(z) = z {
        add_scaled_noise(&mut out, z, sigma2.sqrt())?;
    }
    condition(&mut out, s_now)?;
    Ok(out)
}

fn gaussian(rng: &mut ChaCha8Rng, like: &TrajTensor) -> TrajTensor {
    let data = (0..like.len()).map(|_| rng.sample(StandardNormal)).collect();
    like.with_data(data).expect("same length")
}

/// Sampling seed of candidate `c` for a plan requested with `seed`.
pub fn candidate_seed(seed: u64, c: usize) -> u64 {
    seed.wrapping_add((c as u64).wrapping_mul(0x2545_F491_4F6C_DD1D))
}

/// Everything needed to draw plans.
pub struct Planner<'a> {
    pub sched: &'a NoiseSchedule,
    pub net: &'a NoiseNet,
    pub normalizer: &'a Normalizer,
    pub guide: Guide<'a>,
    pub cfg: GuidanceConfig,
}

impl<'a> Planner<'a> {
    pub fn from_checkpoint(ckpt: &'a Checkpoint, cfg: &GuidanceConfig) -> Result<Self> {
        cfg.validate()?;
        let guide = Guide::from_models(ckpt.reward.as_ref(), ckpt.transition.as_ref(), cfg)?;
        Ok(Self {
            sched: &ckpt.schedule,
            net: &ckpt.noise_net,
            normalizer: &ckpt.normalizer,
            guide,
            cfg: cfg.clone(),
        })
    }

    /// One candidate in normalized coordinates: start from Gaussian noise,
    /// condition, and apply `K` guided reverse steps.
    pub fn sample_normalized(&self, s_now_norm: &[f64], seed: u64) -> Result<TrajTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = TrajTensor::zeros(self.net.horizon(), self.net.state_dim(), self.net.action_dim());
        let mut tau = gaussian(&mut rng, &shape);
        condition(&mut tau, s_now_norm)?;
        for k in (1..=self.sched.n_steps()).rev() {
            // the final step returns the mean, as in standard ancestral sampling
            let z = gaussian(&mut rng, &shape);
            let z = (k > 1).then_some(&z);
            tau = guided_reverse_step(self.sched, self.net, &self.guide, &tau, k, s_now_norm, self.cfg.alpha, z)?;
        }
        if !tau.is_finite() {
            return Err(Error::Numeric("sampled plan is not finite".into()));
        }
        for v in tau.as_mut_slice() {
            *v = v.clamp(-PLAN_CLIP, PLAN_CLIP);
        }
        condition(&mut tau, s_now_norm)?;
        Ok(tau)
    }

    /// Best of `n_candidates` normalized plans by predicted return.
    pub fn plan_normalized(&self, s_now: &[f64], seed: u64) -> Result<TrajTensor> {
        check_len("current state", self.net.state_dim(), s_now.len())?;
        let s_norm = self.normalizer.normalize_state(s_now);
        let mut best: Option<(f64, TrajTensor)> = None;
        for c in 0..self.cfg.n_candidates {
            let tau = self.sample_normalized(&s_norm, candidate_seed(seed, c))?;
            let score = if self.cfg.n_candidates > 1 {
                self.guide.predicted_return(&tau)?
            } else {
                0.0
            };
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, tau));
            }
        }
        Ok(best.expect("at least one candidate").1)
    }

    /// Denormalized plan whose first state is `s_now`.
    pub fn plan(&self, s_now: &[f64], seed: u64) -> Result<TrajTensor> {
        let tau = self.plan_normalized(s_now, seed)?;
        let mut out = self.normalizer.denormalize(&tau);
        out.state_mut(0).copy_from_slice(s_now);
        Ok(out)
    }
}

/// Plans from `s_now` with the checkpoint's models.
pub fn plan(ckpt: &Checkpoint, s_now: &[f64], cfg: &GuidanceConfig, seed: u64) -> Result<TrajTensor> {
    Planner::from_checkpoint(ckpt, cfg)?.plan(s_now, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: usize,
    pub seed: u64,
    #[serde(rename = "return")]
    pub total_return: f64,
    pub steps: usize,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean_return: f64,
    /// Population standard deviation of episode returns.
    pub std_return: f64,
    pub success_rate: f64,
    pub episodes: Vec<EpisodeResult>,
}

impl EvalStats {
    pub fn from_episodes(episodes: Vec<EpisodeResult>) -> Self {
        let n = episodes.len().max(1) as f64;
        let mean = episodes.iter().map(|e| e.total_return).sum::<f64>() / n;
        let var = episodes.iter().map(|e| (e.total_return - mean).powi(2)).sum::<f64>() / n;
        let success = episodes.iter().filter(|e| e.success).count() as f64 / n;
        Self {
            mean_return: mean,
            std_return: var.sqrt(),
            success_rate: success,
            episodes,
        }
    }
}

fn episode_success(spec: &EnvSpec, state: &[f64], reached_goal: bool) -> bool {
    match spec {
        EnvSpec::LinearPoint(lp) => {
            let d2: f64 = state.iter().zip(&lp.goal).map(|(s, g)| (s - g).powi(2)).sum();
            d2.sqrt() <= lp.success_radius
        }
        EnvSpec::PointMaze(_) => reached_goal,
    }
}

/// Runs one closed-loop episode with any action source.
pub fn run_episode(
    spec: &EnvSpec,
    episode: usize,
    seed: u64,
    mut act: impl FnMut(&[f64], usize) -> Result<Vec<f64>>,
) -> Result<EpisodeResult> {
    let mut state = env_reset(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE5C0_0000);
    let bound = spec.action_bound();
    let mut total = 0.0;
    let mut reached = false;
    let mut steps = 0;
    for t in 0..spec.horizon() {
        let action: Vec<f64> = act(&state, t)?.iter().map(|a| a.clamp(-bound, bound)).collect();
        let tr = env_step(spec, &state, &action, t, &mut rng)?;
        total += tr.reward;
        state = tr.next_state;
        steps = t + 1;
        if matches!(spec, EnvSpec::PointMaze(_)) && tr.reward > 0.0 {
            reached = true;
        }
        if tr.done {
            break;
        }
    }
    Ok(EpisodeResult {
        episode,
        seed,
        total_return: total,
        steps,
        success: episode_success(spec, &state, reached),
    })
}

/// Seed of episode `i` of an evaluation started with `seed`.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add(i as u64)
}

/// Closed-loop evaluation: re-plan at every environment step and execute the
/// first planned action, until the episode ends.
pub fn rollout_eval(
    spec: &EnvSpec,
    ckpt: &Checkpoint,
    cfg: &GuidanceConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalStats> {
    spec.validate()?;
    if spec.state_dim() != ckpt.state_dim() || spec.action_dim() != ckpt.action_dim() {
        return Err(Error::config(format!(
            "environment dims ({}, {}) do not match the checkpoint ({}, {})",
            spec.state_dim(),
            spec.action_dim(),
            ckpt.state_dim(),
            ckpt.action_dim()
        )));
    }
    let planner = Planner::from_checkpoint(ckpt, cfg)?;
    let episodes = (0..n_episodes)
        .into_par_iter()
        .map(|i| {
            let ep_seed = episode_seed(seed, i);
            run_episode(spec, i, ep_seed, |s, t| {
                let plan_seed = ep_seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(t as u64);
                let tau = planner.plan_normalized(s, plan_seed)?;
                Ok(planner.normalizer.denormalize_action(tau.action(0)))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalStats::from_episodes(episodes))
}
