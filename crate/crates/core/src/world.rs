//! Learned dynamics and reward models fitted on normalized offline transitions.
//!
//! The transition model is a bootstrap ensemble of Gaussian networks predicting
//! the state change; members are aggregated into one diagonal Gaussian whose
//! variance adds the spread of member means to the average member variance.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::OfflineDataset;
use crate::error::{check_len, Error, Result};
use crate::nn::{Activation, Adam, DenseNet, Precision};

fn default_ensemble() -> usize {
    5
}
fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}
fn default_epochs() -> usize {
    150
}
fn default_batch() -> usize {
    32
}
fn default_activation() -> Activation {
    Activation::Gelu
}
fn default_lr() -> f64 {
    3e-3
}
fn default_lv_min() -> f64 {
    -10.0
}
fn default_lv_max() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldModelConfig {
    #[serde(default = "default_ensemble")]
    pub ensemble_size: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_lv_min")]
    pub logvar_min: f64,
    #[serde(default = "default_lv_max")]
    pub logvar_max: f64,
    /// Set from the run's master seed.
    #[serde(skip)]
    pub seed: u64,
    /// Storage precision of the fitted parameters.
    #[serde(skip)]
    pub precision: Precision,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            ensemble_size: default_ensemble(),
            hidden: default_hidden(),
            activation: default_activation(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            logvar_min: default_lv_min(),
            logvar_max: default_lv_max(),
            seed: 0,
            precision: Precision::default(),
        }
    }
}

impl WorldModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 {
            return Err(Error::config("world_model.ensemble_size must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("world_model.batch_size must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("world_model.lr must be positive"));
        }
        if !(self.logvar_min < self.logvar_max) {
            return Err(Error::config("world_model.logvar_min must be below logvar_max"));
        }
        Ok(())
    }

    fn sizes(&self, n_in: usize, n_out: usize) -> Vec<usize> {
        let mut sizes = vec![n_in];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(n_out);
        sizes
    }
}

fn member_seed(seed: u64, member: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(member as u64 + 1)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn concat(s: &[f64], a: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(s.len() + a.len());
    x.extend_from_slice(s);
    x.extend_from_slice(a);
    x
}

/// Ensemble of Gaussian next-state-change predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    members: Vec<DenseNet>,
    state_dim: usize,
    action_dim: usize,
    logvar_min: f64,
    logvar_max: f64,
}

/// One member's raw prediction at a point.
struct MemberOutput {
    mean: Vec<f64>,
    var: Vec<f64>,
    /// `d var / d raw` per dimension.
    dvar_draw: Vec<f64>,
}

impl TransitionModel {
    /// Untrained ensemble, members seeded from `cfg.seed`.
    pub fn init(state_dim: usize, action_dim: usize, cfg: &WorldModelConfig) -> Result<Self> {
        cfg.validate()?;
        let sizes = cfg.sizes(state_dim + action_dim, 2 * state_dim);
        let members = (0..cfg.ensemble_size)
            .map(|e| DenseNet::new(&sizes, cfg.activation, cfg.precision, member_seed(cfg.seed, e)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_members(members, state_dim, action_dim, cfg.logvar_min, cfg.logvar_max)
    }

    pub fn from_members(
        members: Vec<DenseNet>,
        state_dim: usize,
        action_dim: usize,
        logvar_min: f64,
        logvar_max: f64,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::config("a transition ensemble needs at least one member"));
        }
        for m in &members {
            check_len("transition member input", state_dim + action_dim, m.input_dim())?;
            check_len("transition member output", 2 * state_dim, m.output_dim())?;
        }
        if !(logvar_min < logvar_max) {
            return Err(Error::config("logvar_min must be below logvar_max"));
        }
        Ok(Self {
            members,
            state_dim,
            action_dim,
            logvar_min,
            logvar_max,
        })
    }

    pub fn members(&self) -> &[DenseNet] {
        &self.members
    }

    pub fn ensemble_size(&self) -> usize {
        self.members.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn logvar_bounds(&self) -> (f64, f64) {
        (self.logvar_min, self.logvar_max)
    }

    fn check_inputs(&self, s: &[f64], a: &[f64]) -> Result<()> {
        check_len("transition state", self.state_dim, s.len())?;
        check_len("transition action", self.action_dim, a.len())
    }

    fn squash(&self, raw: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let span = self.logvar_max - self.logvar_min;
        raw.iter()
            .map(|&r| {
                let sg = sigmoid(r);
                let v = (self.logvar_min + span * sg).exp();
                (v, v * span * sg * (1.0 - sg))
            })
            .unzip()
    }

    fn member_output(&self, out: &[f64]) -> MemberOutput {
        let ds = self.state_dim;
        let (var, dvar_draw) = self.squash(&out[ds..]);
        MemberOutput {
            mean: out[..ds].to_vec(),
            var,
            dvar_draw,
        }
    }

    /// Aggregated `(mean next state, variance)` at normalized `(s, a)`.
    pub fn predict(&self, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_inputs(s, a)?;
        let x = concat(s, a);
        let outs = self
            .members
            .iter()
            .map(|m| Ok(self.member_output(&m.forward(&x)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(aggregate(s, &outs))
    }

    /// Aggregated mean next state.
    pub fn predict_mean(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(s, a)?;
        let x = concat(s, a);
        let e = self.members.len() as f64;
        let mut mean = s.to_vec();
        for m in &self.members {
            let out = m.forward(&x)?;
            for (v, d) in mean.iter_mut().zip(&out[..self.state_dim]) {
                *v += d / e;
            }
        }
        Ok(mean)
    }

    /// Pulls a gradient on the aggregated mean back to `(s, a)`.
    pub fn mean_vjp(&self, s: &[f64], a: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_inputs(s, a)?;
        check_len("transition mean upstream", self.state_dim, upstream.len())?;
        let x = concat(s, a);
        let e = self.members.len() as f64;
        let mut up = vec![0.0; 2 * self.state_dim];
        for (u, g) in up.iter_mut().zip(upstream) {
            *u = g / e;
        }
        let mut dx = vec![0.0; x.len()];
        for m in &self.members {
            for (d, g) in dx.iter_mut().zip(m.input_vjp(&x, &up)?) {
                *d += g;
            }
        }
        let mut gs = dx[..self.state_dim].to_vec();
        for (g, u) in gs.iter_mut().zip(upstream) {
            *g += u;
        }
        Ok((gs, dx[self.state_dim..].to_vec()))
    }

    /// Diagonal-Gaussian log-density of `s_next` under the aggregated prediction.
    pub fn logprob(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<f64> {
        check_len("transition next state", self.state_dim, s_next.len())?;
        let (mean, var) = self.predict(s, a)?;
        Ok(gaussian_logpdf(s_next, &mean, &var))
    }

    /// Log-density and its gradients with respect to `s`, `a` and `s_next`.
    pub fn logprob_grad(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<LogProbGrad> {
        self.check_inputs(s, a)?;
        check_len("transition next state", self.state_dim, s_next.len())?;
        let ds = self.state_dim;
        let x = concat(s, a);
        let tapes = self
            .members
            .iter()
            .map(|m| m.forward_tape(&x))
            .collect::<Result<Vec<_>>>()?;
        let outs: Vec<MemberOutput> = tapes.iter().map(|t| self.member_output(t.output())).collect();
        let (mean, var) = aggregate(s, &outs);
        let logp = gaussian_logpdf(s_next, &mean, &var);

        let mut d_next = vec![0.0; ds];
        let mut d_mean = vec![0.0; ds];
        let mut d_var = vec![0.0; ds];
        for d in 0..ds {
            let r = s_next[d] - mean[d];
            d_next[d] = -r / var[d];
            d_mean[d] = r / var[d];
            d_var[d] = -0.5 / var[d] + 0.5 * r * r / (var[d] * var[d]);
        }
        let e = self.members.len() as f64;
        let mu_bar: Vec<f64> = (0..ds)
            .map(|d| outs.iter().map(|o| o.mean[d]).sum::<f64>() / e)
            .collect();
        let mut dx = vec![0.0; x.len()];
        let mut scratch = vec![0.0; self.members[0].num_params()];
        for ((m, tape), o) in self.members.iter().zip(&tapes).zip(&outs) {
            let mut up = vec![0.0; 2 * ds];
            for d in 0..ds {
                up[d] = d_mean[d] / e + d_var[d] * 2.0 / e * (o.mean[d] - mu_bar[d]);
                up[ds + d] = d_var[d] / e * o.dvar_draw[d];
            }
            for (acc, g) in dx.iter_mut().zip(m.backward(tape, &up, &mut scratch)?) {
                *acc += g;
            }
        }
        let mut d_s = dx[..ds].to_vec();
        for (g, dm) in d_s.iter_mut().zip(&d_mean) {
            *g += dm;
        }
        Ok(LogProbGrad {
            logp,
            d_state: d_s,
            d_action: dx[ds..].to_vec(),
            d_next_state: d_next,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogProbGrad {
    pub logp: f64,
    pub d_state: Vec<f64>,
    pub d_action: Vec<f64>,
    pub d_next_state: Vec<f64>,
}

fn aggregate(s: &[f64], outs: &[MemberOutput]) -> (Vec<f64>, Vec<f64>) {
    let e = outs.len() as f64;
    let ds = s.len();
    let mut mean = vec![0.0; ds];
    let mut var = vec![0.0; ds];
    for d in 0..ds {
        let mu_bar = outs.iter().map(|o| o.mean[d]).sum::<f64>() / e;
        let spread = outs.iter().map(|o| (o.mean[d] - mu_bar).powi(2)).sum::<f64>() / e;
        mean[d] = s[d] + mu_bar;
        var[d] = outs.iter().map(|o| o.var[d]).sum::<f64>() / e + spread;
    }
    (mean, var)
}

/// `sum_d -0.5 ln(2 pi v_d) - 0.5 (x_d - m_d)^2 / v_d`.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -0.5 * (2.0 * PI * v).ln() - 0.5 * (x - m).powi(2) / v)
        .sum()
}

pub fn transition_predict(model: &TransitionModel, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    model.predict(s, a)
}

pub fn transition_logprob_grad(
    model: &TransitionModel,
    s: &[f64],
    a: &[f64],
    s_next: &[f64],
) -> Result<LogProbGrad> {
    model.logprob_grad(s, a, s_next)
}

/// Scalar reward regressor. The network predicts `r / reward_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    net: DenseNet,
    state_dim: usize,
    action_dim: usize,
    reward_scale: f64,
}

impl RewardModel {
    pub fn init(state_dim: usize, action_dim: usize, reward_scale: f64, cfg: &WorldModelConfig) -> Result<Self> {
        cfg.validate()?;
        let sizes = cfg.sizes(state_dim + action_dim, 1);
        let net = DenseNet::new(&sizes, cfg.activation, cfg.precision, member_seed(cfg.seed, usize::MAX - 1))?;
        Self::from_net(net, state_dim, action_dim, reward_scale)
    }

    pub fn from_net(net: DenseNet, state_dim: usize, action_dim: usize, reward_scale: f64) -> Result<Self> {
        check_len("reward model input", state_dim + action_dim, net.input_dim())?;
        check_len("reward model output", 1, net.output_dim())?;
        if !(reward_scale > 0.0 && reward_scale.is_finite()) {
            return Err(Error::config("reward scale must be positive and finite"));
        }
        Ok(Self {
            net,
            state_dim,
            action_dim,
            reward_scale,
        })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn reward_scale(&self) -> f64 {
        self.reward_scale
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn predict(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        check_len("reward state", self.state_dim, s.len())?;
        check_len("reward action", self.action_dim, a.len())?;
        Ok(self.reward_scale * self.net.forward(&concat(s, a))?[0])
    }

    /// `(r_hat, d r_hat / d s, d r_hat / d a)`.
    pub fn grad(&self, s: &[f64], a: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        check_len("reward state", self.state_dim, s.len())?;
        check_len("reward action", self.action_dim, a.len())?;
        let x = concat(s, a);
        let r = self.reward_scale * self.net.forward(&x)?[0];
        let dx = self.net.input_vjp(&x, &[self.reward_scale])?;
        Ok((r, dx[..self.state_dim].to_vec(), dx[self.state_dim..].to_vec()))
    }
}

pub fn reward_grad(model: &RewardModel, s: &[f64], a: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    model.grad(s, a)
}

struct Sample {
    x: Vec<f64>,
    target: Vec<f64>,
}

fn transition_samples(dataset: &OfflineDataset) -> Vec<Sample> {
    dataset
        .normalized_transitions()
        .into_iter()
        .map(|(s, a, _, s_next)| {
            let target = s_next.iter().zip(&s).map(|(n, c)| n - c).collect();
            Sample {
                x: concat(&s, &a),
                target,
            }
        })
        .collect()
}

/// Minibatch Adam over `indices`, reshuffled each epoch. `sample_grad`
/// accumulates one sample's loss gradient into the buffer and returns its loss.
fn fit_net(
    net: &mut DenseNet,
    indices: &[usize],
    cfg: &WorldModelConfig,
    rng: &mut ChaCha8Rng,
    mut sample_grad: impl FnMut(&DenseNet, usize, &mut [f64]) -> Result<f64>,
) -> Result<()> {
    let mut order = indices.to_vec();
    let mut opt = Adam::new(net.num_params(), cfg.lr);
    let mut grads = vec![0.0; net.num_params()];
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            grads.fill(0.0);
            let mut loss = 0.0;
            for &i in batch {
                loss += sample_grad(net, i, &mut grads)?;
            }
            if !loss.is_finite() {
                return Err(Error::Numeric("non-finite world-model training loss".into()));
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            opt.step_net(net, &grads)?;
        }
    }
    Ok(())
}

/// Fits every ensemble member by Gaussian negative log-likelihood of the
/// normalized state change, each on its own bootstrap resample.
pub fn train_transition(dataset: &OfflineDataset, cfg: &WorldModelConfig) -> Result<TransitionModel> {
    let samples = transition_samples(dataset);
    if samples.is_empty() {
        return Err(Error::config("cannot fit a transition model on an empty dataset"));
    }
    let ds = dataset.spec.state_dim();
    let da = dataset.spec.action_dim();
    let init = TransitionModel::init(ds, da, cfg)?;
    let n = samples.len();
    let members = init
        .members
        .par_iter()
        .enumerate()
        .map(|(e, net)| {
            let mut net = net.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(member_seed(cfg.seed, e) ^ 0xB007);
            let boot: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            fit_net(&mut net, &boot, cfg, &mut rng, |net, i, grads| {
                let smp = &samples[i];
                let tape = net.forward_tape(&smp.x)?;
                let out = tape.output();
                let (var, dvar_draw) = init.squash(&out[ds..]);
                let mut up = vec![0.0; 2 * ds];
                let mut loss = 0.0;
                for d in 0..ds {
                    let r = smp.target[d] - out[d];
                    loss += 0.5 * (var[d].ln() + r * r / var[d]);
                    up[d] = -r / var[d];
                    // d loss / d var, then through the squashing
                    up[ds + d] = (0.5 / var[d] - 0.5 * r * r / (var[d] * var[d])) * dvar_draw[d];
                }
                net.backward(&tape, &up, grads)?;
                Ok(loss)
            })?;
            Ok(net)
        })
        .collect::<Result<Vec<_>>>()?;
    TransitionModel::from_members(members, ds, da, cfg.logvar_min, cfg.logvar_max)
}

/// `max(|r_min|, |r_max|)`, or 1 when every reward is zero.
pub fn reward_scale_of(dataset: &OfflineDataset) -> f64 {
    let s = dataset.stats.r_min.abs().max(dataset.stats.r_max.abs());
    if s > 0.0 && s.is_finite() {
        s
    } else {
        1.0
    }
}

/// Mean-squared-error regression of `r / reward_scale` on normalized `(s, a)`.
pub fn train_reward(dataset: &OfflineDataset, cfg: &WorldModelConfig) -> Result<RewardModel> {
    let data = dataset.normalized_transitions();
    if data.is_empty() {
        return Err(Error::config("cannot fit a reward model on an empty dataset"));
    }
    let ds = dataset.spec.state_dim();
    let da = dataset.spec.action_dim();
    let scale = reward_scale_of(dataset);
    let model = RewardModel::init(ds, da, scale, cfg)?;
    let samples: Vec<(Vec<f64>, f64)> = data
        .into_iter()
        .map(|(s, a, r, _)| (concat(&s, &a), r / scale))
        .collect();
    let mut net = model.net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(member_seed(cfg.seed, usize::MAX - 1) ^ 0x5EED);
    let all: Vec<usize> = (0..samples.len()).collect();
    fit_net(&mut net, &all, cfg, &mut rng, |net, i, grads| {
        let (x, y) = &samples[i];
        let tape = net.forward_tape(x)?;
        let r = tape.output()[0] - y;
        net.backward(&tape, &[2.0 * r], grads)?;
        Ok(r * r)
    })?;
    RewardModel::from_net(net, ds, da, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{collect_dataset, BehaviorPolicy};
    use crate::envs::EnvSpec;
    use crate::oracle::finite_diff;

    fn net_with_bias(sizes: &[usize], bias: &[f64]) -> DenseNet {
        let n: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let mut p = vec![0.0; n];
        let nb = bias.len();
        p[n - nb..].copy_from_slice(bias);
        DenseNet::from_params(sizes, Activation::Tanh, Precision::F64, p).unwrap()
    }

    /// Raw output that maps to log-variance `lv` under bounds [-10, 2].
    fn raw_for_logvar(lv: f64) -> f64 {
        let p = (lv + 10.0) / 12.0;
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn aggregation_arithmetic() {
        let raw = raw_for_logvar(0.5f64.ln());
        let m1 = net_with_bias(&[2, 2], &[1.0, raw]);
        let m2 = net_with_bias(&[2, 2], &[-1.0, raw]);
        let model = TransitionModel::from_members(vec![m1, m2], 1, 1, -10.0, 2.0).unwrap();
        let (mean, var) = model.predict(&[0.3], &[0.1]).unwrap();
        assert!((mean[0] - 0.3).abs() < 1e-12);
        assert!((var[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn identical_members_have_no_spread() {
        let raw = raw_for_logvar(0.0);
        let m = net_with_bias(&[3, 4], &[0.0, 0.0, raw, raw]);
        let model = TransitionModel::from_members(vec![m.clone(), m.clone(), m], 2, 1, -10.0, 2.0).unwrap();
        let (mean, var) = model.predict(&[0.5, -0.5], &[1.0]).unwrap();
        assert_eq!(mean, vec![0.5, -0.5]);
        assert!(var.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn standard_normal_at_mode() {
        let m = net_with_bias(&[2, 2], &[0.0, raw_for_logvar(0.0)]);
        let model = TransitionModel::from_members(vec![m], 1, 1, -10.0, 2.0).unwrap();
        let g = model.logprob_grad(&[0.2], &[0.0], &[0.2]).unwrap();
        assert!((g.logp + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!(g.d_next_state[0].abs() < 1e-12);
    }

    #[test]
    fn variance_stays_inside_bounds() {
        let cfg = WorldModelConfig {
            ensemble_size: 1,
            ..Default::default()
        };
        let mut model = TransitionModel::init(1, 1, &cfg).unwrap();
        let n = model.members[0].num_params();
        for (bias, lo) in [(1e3, false), (-1e3, true)] {
            model.members[0].params_mut()[n - 1] = bias;
            let (_, var) = model.predict(&[0.0], &[0.0]).unwrap();
            assert!(var[0] > 0.0);
            if lo {
                assert!(var[0] >= (-10.0f64).exp() * (1.0 - 1e-12));
            } else {
                assert!(var[0] <= 2.0f64.exp() * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn logprob_gradients_match_finite_differences() {
        let cfg = WorldModelConfig {
            ensemble_size: 3,
            hidden: vec![6],
            seed: 5,
            ..Default::default()
        };
        let model = TransitionModel::init(2, 1, &cfg).unwrap();
        let (s, a, sn) = ([0.3, -0.4], [0.7], [0.1, 0.2]);
        let g = model.logprob_grad(&s, &a, &sn).unwrap();
        let mut x = s.to_vec();
        x.extend(a);
        x.extend(sn);
        let fd = finite_diff(
            |v| model.logprob(&v[..2], &v[2..3], &v[3..]).unwrap(),
            &x,
            1e-5,
        )
        .unwrap();
        let mut ours = g.d_state.clone();
        ours.extend(&g.d_action);
        ours.extend(&g.d_next_state);
        for (a, b) in ours.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
        assert!((g.logp - model.logprob(&s, &a, &sn).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn mean_vjp_matches_finite_differences() {
        let cfg = WorldModelConfig {
            ensemble_size: 2,
            hidden: vec![5],
            seed: 8,
            ..Default::default()
        };
        let model = TransitionModel::init(2, 2, &cfg).unwrap();
        let up = [0.4, -1.3];
        let x = [0.1, 0.5, -0.2, 0.9];
        let (gs, ga) = model.mean_vjp(&x[..2], &x[2..], &up).unwrap();
        let fd = finite_diff(
            |v| {
                let m = model.predict_mean(&v[..2], &v[2..]).unwrap();
                m[0] * up[0] + m[1] * up[1]
            },
            &x,
            1e-5,
        )
        .unwrap();
        for (a, b) in gs.iter().chain(&ga).zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn aggregation_is_permutation_invariant() {
        let cfg = WorldModelConfig {
            ensemble_size: 4,
            hidden: vec![5],
            seed: 2,
            ..Default::default()
        };
        let model = TransitionModel::init(2, 1, &cfg).unwrap();
        let mut members = model.members().to_vec();
        members.reverse();
        members.swap(0, 2);
        let perm = TransitionModel::from_members(members, 2, 1, -10.0, 2.0).unwrap();
        let (m1, v1) = model.predict(&[0.2, 0.4], &[-0.6]).unwrap();
        let (m2, v2) = perm.predict(&[0.2, 0.4], &[-0.6]).unwrap();
        for (a, b) in m1.iter().chain(&v1).zip(m2.iter().chain(&v2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_reward_net_predicts_zero() {
        let net = DenseNet::from_params(&[3, 1], Activation::Tanh, Precision::F64, vec![0.0; 4]).unwrap();
        let model = RewardModel::from_net(net, 2, 1, 4.0).unwrap();
        let (r, gs, ga) = model.grad(&[0.5, 0.1], &[0.3]).unwrap();
        assert_eq!(r, 0.0);
        assert!(gs.iter().chain(&ga).all(|&g| g == 0.0));
    }

    #[test]
    fn reward_grad_matches_finite_differences() {
        let cfg = WorldModelConfig {
            hidden: vec![7, 5],
            seed: 4,
            activation: Activation::Gelu,
            ..Default::default()
        };
        let model = RewardModel::init(2, 2, 3.0, &cfg).unwrap();
        let x = [0.3, -0.2, 0.8, 0.05];
        let (_, gs, ga) = model.grad(&x[..2], &x[2..]).unwrap();
        let fd = finite_diff(|v| model.predict(&v[..2], &v[2..]).unwrap(), &x, 1e-5).unwrap();
        for (a, b) in gs.iter().chain(&ga).zip(&fd) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    fn linear_data(n: usize, seed: u64) -> OfflineDataset {
        collect_dataset(&EnvSpec::linear_point_default(), BehaviorPolicy::Mixed, n, 0.3, seed).unwrap()
    }

    #[test]
    fn zero_epochs_keeps_initialization_and_training_is_deterministic() {
        let data = linear_data(4, 1);
        let cfg = WorldModelConfig {
            ensemble_size: 1,
            epochs: 0,
            ..Default::default()
        };
        let model = train_transition(&data, &cfg).unwrap();
        assert_eq!(model, TransitionModel::init(2, 2, &cfg).unwrap());
        let cfg = WorldModelConfig {
            ensemble_size: 2,
            epochs: 2,
            ..Default::default()
        };
        assert_eq!(train_transition(&data, &cfg).unwrap(), train_transition(&data, &cfg).unwrap());
        assert_eq!(train_reward(&data, &cfg).unwrap(), train_reward(&data, &cfg).unwrap());
    }

    #[test]
    fn fitted_models_are_accurate_on_held_out_data() {
        let train = linear_data(60, 10);
        let test = linear_data(10, 999);
        let cfg = WorldModelConfig::default();
        let model = train_transition(&train, &cfg).unwrap();
        let reward = train_reward(&train, &cfg).unwrap();
        // evaluate in the training normalization
        let nrm = &train.stats.normalizer;
        let scale = reward.reward_scale();
        let (mut se, mut re, mut count) = (0.0, 0.0, 0usize);
        for ep in &test.episodes {
            for t in 0..ep.len() {
                let s = nrm.normalize_state(&ep.states[t]);
                let a = nrm.normalize_action(&ep.actions[t]);
                let sn = nrm.normalize_state(&ep.states[t + 1]);
                let m = model.predict_mean(&s, &a).unwrap();
                se += m.iter().zip(&sn).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / sn.len() as f64;
                re += ((reward.predict(&s, &a).unwrap() - ep.rewards[t]) / scale).powi(2);
                count += 1;
            }
        }
        let (mse, rmse) = (se / count as f64, re / count as f64);
        assert!(mse < 1e-3, "transition mse {mse}");
        assert!(rmse < 1e-3, "reward mse {rmse}");
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut data = linear_data(2, 3);
        data.episodes.clear();
        let cfg = WorldModelConfig::default();
        assert!(matches!(train_transition(&data, &cfg), Err(Error::Config(_))));
        assert!(matches!(train_reward(&data, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn shape_errors() {
        let model = TransitionModel::init(2, 1, &WorldModelConfig::default()).unwrap();
        assert!(matches!(model.predict(&[0.0], &[0.0]), Err(Error::Shape { .. })));
        assert!(model.logprob_grad(&[0.0, 0.0], &[0.0], &[0.0]).is_err());
    }
}
