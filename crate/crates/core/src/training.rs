//! Training objective for the noise network: reward-weighted noise regression
//! plus two modulation terms evaluated on the closed-form denoised trajectory,
//! one penalizing disagreement with the learned dynamics and one rewarding high
//! predicted return.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetStats, Normalizer, OfflineDataset};
use crate::diffusion::{
    forward_diffuse, make_schedule, GradientFlow, NoiseNet, NoiseSchedule, ScheduleKind, TrajTensor,
};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Precision};
use crate::world::{RewardModel, TransitionModel};

fn default_lambda_tr() -> f64 {
    0.1
}
fn default_lambda_rd() -> f64 {
    0.05
}
fn default_w_min() -> f64 {
    0.01
}
fn default_steps() -> usize {
    2000
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_horizon() -> usize {
    8
}
fn default_k() -> usize {
    100
}
fn default_beta_start() -> f64 {
    1e-4
}
fn default_beta_end() -> f64 {
    0.999
}
fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_log_interval() -> usize {
    50
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lambda_tr")]
    pub lambda_tr: f64,
    #[serde(default = "default_lambda_rd")]
    pub lambda_rd: f64,
    /// Floor applied to trajectory weights.
    #[serde(default = "default_w_min")]
    pub w_min: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Set from the run's master seed.
    #[serde(skip)]
    pub seed: u64,
    /// Planning horizon `H` (columns per training window).
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Number of diffusion steps `K`.
    #[serde(default = "default_k")]
    pub diffusion_steps: usize,
    #[serde(default)]
    pub schedule: ScheduleKind,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    /// Upper clip for every `beta_k`.
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Weight the noise regression by normalized episode return.
    #[serde(default = "yes")]
    pub use_weighting: bool,
    #[serde(default = "yes")]
    pub use_transition_loss: bool,
    #[serde(default = "yes")]
    pub use_reward_loss: bool,
    #[serde(default)]
    pub gradient_flow: GradientFlow,
    #[serde(default = "default_log_interval")]
    pub log_interval: usize,
    #[serde(skip)]
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_tr: default_lambda_tr(),
            lambda_rd: default_lambda_rd(),
            w_min: default_w_min(),
            steps: default_steps(),
            batch_size: default_batch(),
            lr: default_lr(),
            seed: 0,
            horizon: default_horizon(),
            diffusion_steps: default_k(),
            schedule: ScheduleKind::default(),
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
            hidden: default_hidden(),
            activation: default_activation(),
            use_weighting: true,
            use_transition_loss: true,
            use_reward_loss: true,
            gradient_flow: GradientFlow::default(),
            log_interval: default_log_interval(),
            precision: Precision::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_tr >= 0.0) || !(self.lambda_rd >= 0.0) {
            return Err(Error::config("train.lambda_tr and train.lambda_rd must be >= 0"));
        }
        if !(self.w_min > 0.0 && self.w_min <= 1.0) {
            return Err(Error::config("train.w_min must lie in (0, 1]"));
        }
        if self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::config("train.batch_size and train.log_interval must be >= 1"));
        }
        if self.horizon < 2 {
            return Err(Error::config("train.horizon must be >= 2"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("train.lr must be positive"));
        }
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.schedule, self.diffusion_steps, self.beta_start, self.beta_end)
    }

    /// Coefficient actually applied to the transition term.
    pub fn effective_lambda_tr(&self) -> f64 {
        if self.use_transition_loss {
            self.lambda_tr
        } else {
            0.0
        }
    }

    pub fn effective_lambda_rd(&self) -> f64 {
        if self.use_reward_loss {
            self.lambda_rd
        } else {
            0.0
        }
    }

    pub fn init_net(&self, state_dim: usize, action_dim: usize) -> Result<NoiseNet> {
        NoiseNet::new(
            self.horizon,
            state_dim,
            action_dim,
            self.diffusion_steps,
            &self.hidden,
            self.activation,
            self.precision,
            self.seed ^ 0x006E_6F69_7365,
        )
    }
}

/// Normalized cumulative reward of an episode, clamped to `[w_min, 1]`.
///
/// Rewards are shifted to `[0, 1]` with the dataset's extreme rewards and the
/// sum is divided by the longest episode length. A dataset whose rewards are
/// all equal gives every episode weight 1.
pub fn traj_weight(rewards: &[f64], stats: &DatasetStats, w_min: f64) -> f64 {
    let span = stats.r_max - stats.r_min;
    if !(span > 0.0) || stats.t_max == 0 {
        return 1.0;
    }
    let total: f64 = rewards.iter().map(|r| (r - stats.r_min) / span).sum();
    (total / stats.t_max as f64).clamp(w_min, 1.0)
}

/// One training example: a clean window, its diffusion step, noise and weight.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub tau0: TrajTensor,
    pub k: usize,
    pub eps: TrajTensor,
    pub weight: f64,
}

/// Mean loss terms over a batch. `wdiff` holds the plain noise regression when
/// weighting is off; `tr` and `rd` are zero when their term is disabled.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub wdiff: f64,
    pub tr: f64,
    pub rd: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.wdiff.is_finite() && self.tr.is_finite() && self.rd.is_finite()
    }
}

/// A weighted combination of the loss terms.
/// Batch elements whose gradients share one accumulation buffer.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub sched: &'a NoiseSchedule,
    pub transition: Option<&'a TransitionModel>,
    pub reward: Option<&'a RewardModel>,
    /// Coefficient of the noise regression term (1 in training).
    pub diff_coef: f64,
    /// Multiply each example's noise error by its weight.
    pub weighted: bool,
    pub lambda_tr: f64,
    pub lambda_rd: f64,
    pub flow: GradientFlow,
}

impl<'a> Objective<'a> {
    /// The full training objective for `cfg`.
    pub fn from_config(
        sched: &'a NoiseSchedule,
        transition: Option<&'a TransitionModel>,
        reward: Option<&'a RewardModel>,
        cfg: &TrainConfig,
    ) -> Self {
        Self {
            sched,
            transition,
            reward,
            diff_coef: 1.0,
            weighted: cfg.use_weighting,
            lambda_tr: cfg.effective_lambda_tr(),
            lambda_rd: cfg.effective_lambda_rd(),
            flow: cfg.gradient_flow,
        }
    }

    /// Only the noise regression, unweighted.
    pub fn diffusion_only(sched: &'a NoiseSchedule) -> Self {
        Self {
            sched,
            transition: None,
            reward: None,
            diff_coef: 1.0,
            weighted: false,
            lambda_tr: 0.0,
            lambda_rd: 0.0,
            flow: GradientFlow::Full,
        }
    }

    fn check(&self) -> Result<()> {
        if self.lambda_tr > 0.0 && self.transition.is_none() {
            return Err(Error::config("the transition loss needs a trained transition model"));
        }
        if self.lambda_rd > 0.0 && self.reward.is_none() {
            return Err(Error::config("the reward loss needs a trained reward model"));
        }
        Ok(())
    }

    /// Loss terms and, when `with_grad`, the parameter gradient of `total`.
    pub fn evaluate(
        &self,
        net: &NoiseNet,
        batch: &[BatchItem],
        with_grad: bool,
    ) -> Result<(LossComponents, Option<Vec<f64>>)> {
        self.check()?;
        if batch.is_empty() {
            return Err(Error::config("empty training batch"));
        }
        let n = batch.len() as f64;
        // fixed-size chunks keep the summation order independent of the thread count
        let per_chunk = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut parts = LossComponents::default();
                let mut grad = with_grad.then(|| vec![0.0; net.num_params()]);
                for item in chunk {
                    let c = self.item(net, item, n, grad.as_deref_mut())?;
                    parts.wdiff += c.wdiff;
                    parts.tr += c.tr;
                    parts.rd += c.rd;
                }
                Ok((parts, grad))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut parts = LossComponents::default();
        let mut grad: Option<Vec<f64>> = None;
        for (c, g) in per_chunk {
            parts.wdiff += c.wdiff;
            parts.tr += c.tr;
            parts.rd += c.rd;
            match (grad.as_mut(), g) {
                (Some(acc), Some(g)) => {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
                (None, g) => grad = g,
                _ => {}
            }
        }
        parts.wdiff /= n;
        parts.tr /= n;
        parts.rd /= n;
        parts.total = self.diff_coef * parts.wdiff + self.lambda_tr * parts.tr + self.lambda_rd * parts.rd;
        Ok((parts, grad))
    }

    /// Per-example (unscaled) terms; the gradient of its share of the mean is
    /// added to `grads` when given.
    fn item(
        &self,
        net: &NoiseNet,
        item: &BatchItem,
        n: f64,
        mut grads: Option<&mut [f64]>,
    ) -> Result<LossComponents> {
        let with_grad = grads.is_some();
        let sched = self.sched;
        let k = item.k;
        let tau_k = forward_diffuse(sched, &item.tau0, k, &item.eps)?;
        let tape_k = net.predict_tape(&tau_k, k)?;
        let eps_hat = tape_k.output();
        let w = if self.weighted { item.weight } else { 1.0 };

        let mut sq = 0.0;
        for (p, e) in eps_hat.iter().zip(item.eps.as_slice()) {
            sq += (p - e) * (p - e);
        }
        let mut comps = LossComponents {
            wdiff: if self.weighted { w * sq } else { sq },
            ..Default::default()
        };

        let use_tr = self.lambda_tr > 0.0;
        let use_rd = self.lambda_rd > 0.0;
        let mut upstream_k = vec![0.0; eps_hat.len()];
        if with_grad && self.diff_coef != 0.0 {
            let scale = if self.weighted {
                2.0 * w * self.diff_coef / n
            } else {
                2.0 * self.diff_coef / n
            };
            for ((u, p), e) in upstream_k.iter_mut().zip(eps_hat).zip(item.eps.as_slice()) {
                *u = scale * (p - e);
            }
        }

        if use_tr || use_rd {
            // closed-form denoised trajectory, reusing the step-k evaluation
            let ab = sched.alpha_bar(k);
            let c_eps = ((1.0 - ab) / ab).sqrt();
            let mut value: Vec<f64> = item
                .tau0
                .as_slice()
                .iter()
                .zip(item.eps.as_slice())
                .map(|(x, e)| x + c_eps * e)
                .collect();
            let mut tapes = Vec::with_capacity(k - 1);
            for i in 1..k {
                let tau_i = forward_diffuse(sched, &item.tau0, i, &item.eps)?;
                let tape = net.predict_tape(&tau_i, i)?;
                let c = sched.denoise_coef(i);
                for (v, e) in value.iter_mut().zip(tape.output()) {
                    *v -= c * e;
                }
                tapes.push(tape);
            }
            let c_k = sched.denoise_coef(k);
            for (v, e) in value.iter_mut().zip(eps_hat) {
                *v -= c_k * e;
            }
            let tau_hat = item.tau0.with_data(value)?;
            let mut d_hat = vec![0.0; tau_hat.len()];
            if use_tr {
                let model = self.transition.expect("checked");
                let coef = if with_grad { self.lambda_tr / n } else { 0.0 };
                comps.tr = transition_term(model, &tau_hat, coef, &mut d_hat)?;
            }
            if use_rd {
                let model = self.reward.expect("checked");
                let coef = if with_grad { self.lambda_rd / n } else { 0.0 };
                comps.rd = reward_term(model, &tau_hat, coef, &mut d_hat)?;
            }
            if let Some(g) = grads.as_mut() {
                for (u, d) in upstream_k.iter_mut().zip(&d_hat) {
                    *u -= c_k * d;
                }
                if self.flow == GradientFlow::Full {
                    for (j, tape) in tapes.iter().enumerate() {
                        let c = sched.denoise_coef(j + 1);
                        let up: Vec<f64> = d_hat.iter().map(|d| -c * d).collect();
                        net.backward(tape, &up, g)?;
                    }
                }
            }
        }
        if let Some(g) = grads.as_mut() {
            net.backward(&tape_k, &upstream_k, g)?;
        }
        Ok(comps)
    }
}

/// Mean squared one-step prediction error along `tau`; accumulates
/// `coef * d/dtau` into `grad`.
fn transition_term(model: &TransitionModel, tau: &TrajTensor, coef: f64, grad: &mut [f64]) -> Result<f64> {
    let h = tau.horizon();
    let (ds, width) = (tau.state_dim(), tau.width());
    let inv = 1.0 / (h - 1) as f64;
    let mut loss = 0.0;
    for t in 0..h - 1 {
        let (s, a) = (tau.state(t), tau.action(t));
        let mean = model.predict_mean(s, a)?;
        let resid: Vec<f64> = tau.state(t + 1).iter().zip(&mean).map(|(x, m)| x - m).collect();
        loss += resid.iter().map(|r| r * r).sum::<f64>() * inv;
        if coef != 0.0 {
            let g: Vec<f64> = resid.iter().map(|r| 2.0 * r * inv * coef).collect();
            for d in 0..ds {
                grad[(t + 1) * width + d] += g[d];
            }
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            let (gs, ga) = model.mean_vjp(s, a, &neg)?;
            for (d, v) in gs.iter().chain(&ga).enumerate() {
                grad[t * width + d] += v;
            }
        }
    }
    Ok(loss)
}

/// Negative predicted return along `tau`; accumulates `coef * d/dtau`.
fn reward_term(model: &RewardModel, tau: &TrajTensor, coef: f64, grad: &mut [f64]) -> Result<f64> {
    let width = tau.width();
    let mut loss = 0.0;
    for t in 0..tau.horizon() {
        if coef != 0.0 {
            let (r, gs, ga) = model.grad(tau.state(t), tau.action(t))?;
            loss -= r;
            for (d, v) in gs.iter().chain(&ga).enumerate() {
                grad[t * width + d] -= coef * v;
            }
        } else {
            loss -= model.predict(tau.state(t), tau.action(t))?;
        }
    }
    Ok(loss)
}

/// Mean of `||eps - eps_theta(tau^k, k)||^2` over the batch.
pub fn loss_diff(net: &NoiseNet, sched: &NoiseSchedule, batch: &[BatchItem]) -> Result<f64> {
    Ok(Objective::diffusion_only(sched).evaluate(net, batch, false)?.0.wdiff)
}

/// Mean of the weighted per-example noise error.
pub fn loss_wdiff(net: &NoiseNet, sched: &NoiseSchedule, batch: &[BatchItem]) -> Result<f64> {
    let obj = Objective {
        weighted: true,
        ..Objective::diffusion_only(sched)
    };
    Ok(obj.evaluate(net, batch, false)?.0.wdiff)
}

/// Mean over the batch of the average squared one-step error of the denoised
/// trajectory against the transition model's mean.
pub fn loss_tr(
    net: &NoiseNet,
    sched: &NoiseSchedule,
    model: &TransitionModel,
    batch: &[BatchItem],
) -> Result<f64> {
    let obj = Objective {
        transition: Some(model),
        diff_coef: 0.0,
        lambda_tr: 1.0,
        ..Objective::diffusion_only(sched)
    };
    Ok(obj.evaluate(net, batch, false)?.0.tr)
}

/// Negative mean predicted return of the denoised trajectories.
pub fn loss_rd(net: &NoiseNet, sched: &NoiseSchedule, model: &RewardModel, batch: &[BatchItem]) -> Result<f64> {
    let obj = Objective {
        reward: Some(model),
        diff_coef: 0.0,
        lambda_rd: 1.0,
        ..Objective::diffusion_only(sched)
    };
    Ok(obj.evaluate(net, batch, false)?.0.rd)
}

/// `L_wdiff + lambda_tr L_tr + lambda_rd L_rd` under `cfg`'s switches.
pub fn loss_total(
    net: &NoiseNet,
    sched: &NoiseSchedule,
    transition: Option<&TransitionModel>,
    reward: Option<&RewardModel>,
    batch: &[BatchItem],
    cfg: &TrainConfig,
) -> Result<LossComponents> {
    Ok(Objective::from_config(sched, transition, reward, cfg)
        .evaluate(net, batch, false)?
        .0)
}

/// Draws a minibatch of windows with per-example step and noise.
pub fn sample_batch(
    dataset: &OfflineDataset,
    weights: &[f64],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<BatchItem> {
    let h = cfg.horizon;
    (0..cfg.batch_size)
        .map(|_| {
            let e = rng.random_range(0..dataset.episodes.len());
            let start = rng.random_range(0..=dataset.episodes[e].len() - h);
            let tau0 = dataset.window(e, start, h);
            let k = rng.random_range(1..=cfg.diffusion_steps);
            let noise: Vec<f64> = (0..tau0.len()).map(|_| rng.sample(StandardNormal)).collect();
            let eps = tau0.with_data(noise).expect("same length");
            BatchItem {
                tau0,
                k,
                eps,
                weight: weights[e],
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_wdiff: f64,
    pub loss_tr: f64,
    pub loss_rd: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: NoiseNet,
    pub schedule: NoiseSchedule,
    pub log: Vec<LogRow>,
    pub optimizer: Adam,
}

/// Runs `cfg.steps` Adam updates on the configured objective.
///
/// A log row is recorded every `log_interval` steps, starting at step 0 and
/// measured on that step's batch before its update; when `steps` is a multiple
/// of the interval the last row is an evaluation of the final parameters.
pub fn train_diffusion(
    dataset: &OfflineDataset,
    transition: Option<&TransitionModel>,
    reward: Option<&RewardModel>,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.episodes.is_empty() {
        return Err(Error::config("cannot train on an empty dataset"));
    }
    let shortest = dataset.shortest_episode();
    if cfg.horizon > shortest {
        return Err(Error::config(format!(
            "train.horizon {} exceeds the shortest episode ({shortest} steps)",
            cfg.horizon
        )));
    }
    let (ds, da) = (dataset.spec.state_dim(), dataset.spec.action_dim());
    for (name, dims) in [
        ("transition", transition.map(|m| (m.state_dim(), m.action_dim()))),
        ("reward", reward.map(|m| (m.state_dim(), m.action_dim()))),
    ] {
        if let Some(d) = dims {
            if d != (ds, da) {
                return Err(Error::config(format!("{name} model dims do not match the dataset")));
            }
        }
    }
    let sched = cfg.schedule()?;
    let mut net = cfg.init_net(ds, da)?;
    let objective = Objective::from_config(&sched, transition, reward, cfg);
    let weights: Vec<f64> = dataset
        .episodes
        .iter()
        .map(|e| traj_weight(&e.rewards, &dataset.stats, cfg.w_min))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(net.num_params(), cfg.lr);
    let mut log = Vec::with_capacity(cfg.steps / cfg.log_interval + 1);
    for step in 0..=cfg.steps {
        let logging = step % cfg.log_interval == 0;
        if step == cfg.steps && !logging {
            break;
        }
        let batch = sample_batch(dataset, &weights, cfg, &mut rng);
        let (parts, grad) = objective.evaluate(&net, &batch, step < cfg.steps)?;
        if !parts.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss at step {step}")));
        }
        if logging {
            let row = LogRow {
                step,
                loss_total: parts.total,
                loss_wdiff: parts.wdiff,
                loss_tr: parts.tr,
                loss_rd: parts.rd,
            };
            on_log(&row);
            log.push(row);
        }
        if let Some(g) = grad {
            opt.step_net(net.dense_mut(), &g)?;
        }
    }
    Ok(TrainOutcome {
        net,
        schedule: sched,
        log,
        optimizer: opt,
    })
}

/// A trained planner: noise network, schedule, normalization, world models
/// and the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub noise_net: NoiseNet,
    pub schedule: NoiseSchedule,
    pub normalizer: Normalizer,
    pub transition: Option<TransitionModel>,
    pub reward: Option<RewardModel>,
    pub train_config: TrainConfig,
    pub step: usize,
    /// Seed and draw description of the training random stream.
    pub rng_summary: String,
    pub config_echo: serde_json::Value,
}

impl Checkpoint {
    pub fn state_dim(&self) -> usize {
        self.noise_net.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.noise_net.action_dim()
    }

    pub fn horizon(&self) -> usize {
        self.noise_net.horizon()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{collect_dataset, BehaviorPolicy};
    use crate::diffusion::STEP_EMBED_DIM;
    use crate::envs::EnvSpec;
    use crate::nn::DenseNet;
    use crate::oracle::{finite_diff, max_rel_error};
    use crate::world::WorldModelConfig;

    fn stats(r_min: f64, r_max: f64, t_max: usize) -> DatasetStats {
        DatasetStats {
            normalizer: Normalizer {
                state_mean: vec![0.0],
                state_scale: vec![1.0],
                action_mean: vec![0.0],
                action_scale: vec![1.0],
            },
            t_max,
            r_max,
            r_min,
        }
    }

    #[test]
    fn trajectory_weights() {
        let st = stats(-2.0, 1.0, 4);
        assert_eq!(traj_weight(&[1.0; 4], &st, 0.01), 1.0);
        assert_eq!(traj_weight(&[-2.0; 4], &st, 0.01), 0.01);
        assert!((traj_weight(&[1.0, -2.0], &st, 0.01) - 0.25).abs() < 1e-15);
        assert_eq!(traj_weight(&[3.0; 4], &stats(3.0, 3.0, 4), 0.01), 1.0);
    }

    fn small_net(seed: u64, h: usize, k: usize) -> NoiseNet {
        NoiseNet::new(h, 1, 1, k, &[6], Activation::Tanh, Precision::F64, seed).unwrap()
    }

    fn random_batch(n: usize, h: usize, k_max: usize, seed: u64) -> Vec<BatchItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut draw = |_| rng.sample::<f64, _>(StandardNormal);
                let tau0 = TrajTensor::from_vec(h, 1, 1, (0..2 * h).map(&mut draw).collect()).unwrap();
                let eps = TrajTensor::from_vec(h, 1, 1, (0..2 * h).map(&mut draw).collect()).unwrap();
                BatchItem {
                    tau0,
                    k: 1 + i % k_max,
                    eps,
                    weight: 0.2 + 0.3 * i as f64,
                }
            })
            .collect()
    }

    fn rebuilt(net: &NoiseNet, p: &[f64]) -> NoiseNet {
        let d = net.dense();
        let dense = DenseNet::from_params(d.layer_sizes(), d.activation(), Precision::F64, p.to_vec()).unwrap();
        NoiseNet::from_net(dense, net.horizon(), net.state_dim(), net.action_dim(), net.n_steps()).unwrap()
    }

    fn check_grad(obj: &Objective, net: &NoiseNet, batch: &[BatchItem]) {
        let (_, g) = obj.evaluate(net, batch, true).unwrap();
        let fd = finite_diff(
            |p| obj.evaluate(&rebuilt(net, p), batch, false).unwrap().0.total,
            net.dense().params(),
            1e-5,
        )
        .unwrap();
        let err = max_rel_error(&g.unwrap(), &fd);
        assert!(err < 1e-4, "relative error {err}");
    }

    fn world(seed: u64) -> (TransitionModel, RewardModel) {
        let cfg = WorldModelConfig {
            ensemble_size: 2,
            hidden: vec![5],
            seed,
            ..Default::default()
        };
        (
            TransitionModel::init(1, 1, &cfg).unwrap(),
            RewardModel::init(1, 1, 2.0, &cfg).unwrap(),
        )
    }

    #[test]
    fn every_term_has_matching_gradient() {
        let sched = make_schedule(ScheduleKind::Cosine, 6, 1e-4, 0.6).unwrap();
        let net = small_net(3, 3, 6);
        let batch = random_batch(4, 3, 6, 11);
        let (tm, rm) = world(4);
        let base = Objective::diffusion_only(&sched);
        check_grad(&base, &net, &batch);
        check_grad(&Objective { weighted: true, ..base }, &net, &batch);
        check_grad(
            &Objective {
                transition: Some(&tm),
                diff_coef: 0.0,
                lambda_tr: 1.0,
                ..base
            },
            &net,
            &batch,
        );
        check_grad(
            &Objective {
                reward: Some(&rm),
                diff_coef: 0.0,
                lambda_rd: 1.0,
                ..base
            },
            &net,
            &batch,
        );
        let cfg = TrainConfig::default();
        check_grad(&Objective::from_config(&sched, Some(&tm), Some(&rm), &cfg), &net, &batch);
    }

    #[test]
    fn last_step_only_flow_differs_from_full() {
        let sched = make_schedule(ScheduleKind::Cosine, 4, 1e-4, 0.6).unwrap();
        let net = small_net(5, 2, 4);
        let batch: Vec<_> = random_batch(2, 2, 4, 3).into_iter().map(|b| BatchItem { k: 4, ..b }).collect();
        let (tm, _) = world(1);
        let full = Objective {
            transition: Some(&tm),
            lambda_tr: 1.0,
            ..Objective::diffusion_only(&sched)
        };
        let last = Objective {
            flow: GradientFlow::LastStepOnly,
            ..full
        };
        let (a, ga) = full.evaluate(&net, &batch, true).unwrap();
        let (b, gb) = last.evaluate(&net, &batch, true).unwrap();
        assert_eq!(a, b);
        assert_ne!(ga, gb);
    }

    fn constant_eps_net(h: usize, value: f64, k: usize) -> NoiseNet {
        let traj = 2 * h;
        let sizes = [traj + STEP_EMBED_DIM, traj];
        let mut p = vec![0.0; sizes[0] * sizes[1] + sizes[1]];
        let n = p.len();
        p[n - traj..].fill(value);
        let d = DenseNet::from_params(&sizes, Activation::Tanh, Precision::F64, p).unwrap();
        NoiseNet::from_net(d, h, 1, 1, k).unwrap()
    }

    #[test]
    fn diffusion_loss_reference_values() {
        let sched = make_schedule(ScheduleKind::Linear, 3, 0.1, 0.3).unwrap();
        let batch = random_batch(3, 2, 3, 5);
        let zero = constant_eps_net(2, 0.0, 3);
        let expected: f64 = batch
            .iter()
            .map(|b| b.eps.as_slice().iter().map(|e| e * e).sum::<f64>())
            .sum::<f64>()
            / 3.0;
        assert!((loss_diff(&zero, &sched, &batch).unwrap() - expected).abs() < 1e-12);

        let perfect: Vec<_> = batch
            .iter()
            .map(|b| BatchItem {
                eps: b.eps.with_data(vec![0.5; 4]).unwrap(),
                ..b.clone()
            })
            .collect();
        assert_eq!(loss_diff(&constant_eps_net(2, 0.5, 3), &sched, &perfect).unwrap(), 0.0);
    }

    #[test]
    fn weighted_loss_linearity() {
        let sched = make_schedule(ScheduleKind::Linear, 3, 0.1, 0.3).unwrap();
        let net = small_net(2, 2, 3);
        let mut batch = random_batch(1, 2, 3, 8);
        batch.push(batch[0].clone());
        batch[0].weight = 1.0;
        batch[1].weight = 0.5;
        let e = loss_diff(&net, &sched, &batch[..1]).unwrap();
        assert!((loss_wdiff(&net, &sched, &batch).unwrap() - 0.75 * e).abs() < 1e-12);

        let unit: Vec<_> = batch.iter().map(|b| BatchItem { weight: 1.0, ..b.clone() }).collect();
        assert_eq!(loss_wdiff(&net, &sched, &unit).unwrap(), loss_diff(&net, &sched, &unit).unwrap());

        let obj = Objective {
            weighted: true,
            ..Objective::diffusion_only(&sched)
        };
        let (l1, g1) = obj.evaluate(&net, &batch, true).unwrap();
        let scaled: Vec<_> = batch.iter().map(|b| BatchItem { weight: 3.0 * b.weight, ..b.clone() }).collect();
        let (l3, g3) = obj.evaluate(&net, &scaled, true).unwrap();
        assert!((l3.wdiff - 3.0 * l1.wdiff).abs() < 1e-12);
        for (a, b) in g1.unwrap().iter().zip(g3.unwrap()) {
            assert!((3.0 * a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn total_is_affine_in_lambdas() {
        let sched = make_schedule(ScheduleKind::Cosine, 4, 1e-4, 0.6).unwrap();
        let net = small_net(9, 3, 4);
        let batch = random_batch(3, 3, 4, 2);
        let (tm, rm) = world(6);
        let cfg = |tr, rd| TrainConfig {
            lambda_tr: tr,
            lambda_rd: rd,
            ..Default::default()
        };
        let at = |tr, rd| loss_total(&net, &sched, Some(&tm), Some(&rm), &batch, &cfg(tr, rd)).unwrap();
        let base = at(0.0, 0.0);
        assert_eq!(base.total, loss_wdiff(&net, &sched, &batch).unwrap());
        let tr = loss_tr(&net, &sched, &tm, &batch).unwrap();
        let rd = loss_rd(&net, &sched, &rm, &batch).unwrap();
        let mixed = at(0.3, 0.7);
        assert!((mixed.total - (base.total + 0.3 * tr + 0.7 * rd)).abs() < 1e-10);
        assert!(tr >= 0.0);
    }

    #[test]
    fn zero_reward_model_contributes_nothing() {
        let sched = make_schedule(ScheduleKind::Cosine, 4, 1e-4, 0.6).unwrap();
        let net = small_net(1, 2, 4);
        let batch = random_batch(2, 2, 4, 1);
        let zero = DenseNet::from_params(&[2, 1], Activation::Tanh, Precision::F64, vec![0.0; 3]).unwrap();
        let rm = RewardModel::from_net(zero, 1, 1, 1.0).unwrap();
        let obj = Objective {
            reward: Some(&rm),
            diff_coef: 0.0,
            lambda_rd: 1.0,
            ..Objective::diffusion_only(&sched)
        };
        let (l, g) = obj.evaluate(&net, &batch, true).unwrap();
        assert_eq!(l.rd, 0.0);
        assert!(g.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_models_are_configuration_errors() {
        let sched = make_schedule(ScheduleKind::Cosine, 4, 1e-4, 0.6).unwrap();
        let net = small_net(1, 2, 4);
        let batch = random_batch(2, 2, 4, 1);
        let cfg = TrainConfig::default();
        assert!(matches!(
            loss_total(&net, &sched, None, None, &batch, &cfg),
            Err(Error::Config(_))
        ));
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            steps: 6,
            batch_size: 4,
            horizon: 4,
            diffusion_steps: 4,
            hidden: vec![8],
            log_interval: 2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_keep_initialization_and_training_is_deterministic() {
        let data = collect_dataset(&EnvSpec::linear_point_default(), BehaviorPolicy::Mixed, 3, 0.2, 1).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            use_transition_loss: false,
            use_reward_loss: false,
            ..tiny_config()
        };
        let out = train_diffusion(&data, None, None, &cfg, |_| {}).unwrap();
        assert_eq!(out.net, cfg.init_net(2, 2).unwrap());
        assert_eq!(out.log.len(), 1);

        let (tm, rm) = {
            let wc = WorldModelConfig {
                ensemble_size: 2,
                hidden: vec![4],
                epochs: 1,
                ..Default::default()
            };
            (
                crate::world::train_transition(&data, &wc).unwrap(),
                crate::world::train_reward(&data, &wc).unwrap(),
            )
        };
        let cfg = tiny_config();
        let a = train_diffusion(&data, Some(&tm), Some(&rm), &cfg, |_| {}).unwrap();
        let b = train_diffusion(&data, Some(&tm), Some(&rm), &cfg, |_| {}).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 6 / 2 + 1);
        assert_eq!(a.log.last().unwrap().step, 6);
        assert_ne!(a.net, cfg.init_net(2, 2).unwrap());
    }

    #[test]
    fn horizon_longer_than_episodes_is_rejected() {
        let data = collect_dataset(&EnvSpec::linear_point_default(), BehaviorPolicy::Random, 2, 0.0, 1).unwrap();
        let cfg = TrainConfig {
            horizon: 13,
            ..tiny_config()
        };
        assert!(matches!(
            train_diffusion(&data, None, None, &cfg, |_| {}),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut data = collect_dataset(&EnvSpec::linear_point_default(), BehaviorPolicy::Random, 2, 0.0, 1).unwrap();
        data.stats.normalizer.state_scale[0] = 0.0;
        let cfg = TrainConfig {
            use_transition_loss: false,
            use_reward_loss: false,
            ..tiny_config()
        };
        assert!(matches!(
            train_diffusion(&data, None, None, &cfg, |_| {}),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn equal_rewards_reproduce_plain_training() {
        let spec = EnvSpec::linear_point_default();
        let mut data = collect_dataset(&spec, BehaviorPolicy::Mixed, 4, 0.2, 9).unwrap();
        for ep in &mut data.episodes {
            ep.rewards.iter_mut().for_each(|r| *r = -1.0);
        }
        let data = OfflineDataset::from_episodes(spec, data.episodes.clone()).unwrap();
        let weighted = TrainConfig {
            lambda_tr: 0.0,
            lambda_rd: 0.0,
            ..tiny_config()
        };
        let plain = TrainConfig {
            use_weighting: false,
            use_transition_loss: false,
            use_reward_loss: false,
            ..tiny_config()
        };
        let a = train_diffusion(&data, None, None, &weighted, |_| {}).unwrap();
        let b = train_diffusion(&data, None, None, &plain, |_| {}).unwrap();
        assert_eq!(a.net.dense().params(), b.net.dense().params());
    }
}
