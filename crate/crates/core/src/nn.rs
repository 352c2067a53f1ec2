//! Dense feed-forward networks with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat vector, layer by layer: the `(out, in)`
//! row-major weight matrix followed by the `out` biases. Keeping them flat lets
//! the optimizer, the finite-difference oracle and the checkpoint writer treat
//! every network the same way.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Gelu => 0.5 * z * (1.0 + (GELU_C * (z + GELU_A * z * z * z)).tanh()),
        }
    }

    /// Derivative at pre-activation `z`; `h` is `apply(z)`.
    #[inline]
    fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_C * (z + GELU_A * z * z * z)).tanh();
                0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * z * z)
            }
        }
    }
}

/// Storage precision of a network's parameters.
///
/// `F32` networks keep every parameter exactly representable as an `f32`
/// (rounded at construction and after each update); arithmetic stays in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    sizes: Vec<usize>,
    activation: Activation,
    precision: Precision,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass, consumed by [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// `inputs[l]` is the input to layer `l`; the final entry is the output.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("tape always holds the output")
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl DenseNet {
    pub fn new(
        layer_sizes: &[usize],
        activation: Activation,
        precision: Precision,
        seed: u64,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::config(format!(
                "a network needs at least 2 layer sizes, got {}",
                layer_sizes.len()
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::config("layer sizes must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(layer_sizes));
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let gain = match activation {
                Activation::Relu | Activation::Gelu => 2.0,
                Activation::Tanh => 1.0,
            };
            let std = (gain / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("std is positive");
            params.extend((0..fan_in * fan_out).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        let mut net = Self {
            sizes: layer_sizes.to_vec(),
            activation,
            precision,
            params,
        };
        net.apply_precision();
        Ok(net)
    }

    /// Builds a network from explicit parameters in the flat layout.
    pub fn from_params(
        layer_sizes: &[usize],
        activation: Activation,
        precision: Precision,
        params: Vec<f64>,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::config("invalid layer sizes"));
        }
        check_len("network parameters", param_count(layer_sizes), params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite network parameter".into()));
        }
        let mut net = Self {
            sizes: layer_sizes.to_vec(),
            activation,
            precision,
            params,
        };
        net.apply_precision();
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access. Call [`DenseNet::apply_precision`] afterwards
    /// when the net stores `f32` parameters.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn apply_precision(&mut self) {
        if self.precision == Precision::F32 {
            for p in &mut self.params {
                *p = *p as f32 as f64;
            }
        }
    }

    /// Weight matrix (row-major `(out, in)`) and bias of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let off = self.layer_offset(l);
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = &self.params[off..off + n_in * n_out];
        let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
        (w, b)
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let off = self.layer_offset(l);
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let (w, rest) = self.params[off..].split_at_mut(n_in * n_out);
        (w, &mut rest[..n_out])
    }

    fn layer_offset(&self, l: usize) -> usize {
        param_count(&self.sizes[..=l])
    }

    fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("network input", self.input_dim(), x.len())?;
        let mut cur = x.to_vec();
        let mut off = 0;
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let mut next = affine(w, b, &cur);
            if l + 1 < self.n_layers() {
                for v in &mut next {
                    *v = self.activation.apply(*v);
                }
            }
            cur = next;
        }
        Ok(cur)
    }

    pub fn forward_tape(&self, x: &[f64]) -> Result<Tape> {
        check_len("network input", self.input_dim(), x.len())?;
        let mut inputs = Vec::with_capacity(self.sizes.len());
        let mut pre = Vec::with_capacity(self.n_layers().saturating_sub(1));
        inputs.push(x.to_vec());
        let mut off = 0;
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let z = affine(w, b, &inputs[l]);
            if l + 1 < self.n_layers() {
                let h = z.iter().map(|&v| self.activation.apply(v)).collect();
                pre.push(z);
                inputs.push(h);
            } else {
                inputs.push(z);
            }
        }
        Ok(Tape { inputs, pre })
    }

    /// Vector-Jacobian product through a recorded pass. Parameter gradients are
    /// accumulated into `param_grads`; the input gradient is returned.
    pub fn backward(
        &self,
        tape: &Tape,
        upstream: &[f64],
        param_grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        check_len("upstream gradient", self.output_dim(), upstream.len())?;
        check_len("parameter gradient buffer", self.num_params(), param_grads.len())?;
        let mut delta = upstream.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 < self.n_layers() {
                let z = &tape.pre[l];
                let h = &tape.inputs[l + 1];
                for j in 0..n_out {
                    delta[j] *= self.activation.derivative(z[j], h[j]);
                }
            }
            let off = self.layer_offset(l);
            let x = &tape.inputs[l];
            let (gw, gb) = param_grads[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            let w = &self.params[off..off + n_in * n_out];
            let mut dx = vec![0.0; n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let grow = &mut gw[o * n_in..(o + 1) * n_in];
                let wrow = &w[o * n_in..(o + 1) * n_in];
                for (g, xi) in grow.iter_mut().zip(x) {
                    *g += d * xi;
                }
                for (v, wi) in dx.iter_mut().zip(wrow) {
                    *v += d * wi;
                }
            }
            delta = dx;
        }
        Ok(delta)
    }

    /// Exact VJP of [`DenseNet::forward`] at `x`: `(param_grads, input_grad)`.
    pub fn vjp(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let tape = self.forward_tape(x)?;
        let mut grads = vec![0.0; self.num_params()];
        let dx = self.backward(&tape, upstream, &mut grads)?;
        Ok((grads, dx))
    }

    /// Input gradient only; skips the parameter accumulation.
    pub fn input_vjp(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let tape = self.forward_tape(x)?;
        check_len("upstream gradient", self.output_dim(), upstream.len())?;
        let mut delta = upstream.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 < self.n_layers() {
                let z = &tape.pre[l];
                let h = &tape.inputs[l + 1];
                for j in 0..n_out {
                    delta[j] *= self.activation.derivative(z[j], h[j]);
                }
            }
            let (w, _) = self.layer(l);
            let mut dx = vec![0.0; n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let wrow = &w[o * n_in..(o + 1) * n_in];
                for (v, wi) in dx.iter_mut().zip(wrow) {
                    *v += d * wi;
                }
            }
            delta = dx;
        }
        Ok(delta)
    }
}

#[inline]
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| {
            let row = &w[o * n_in..(o + 1) * n_in];
            bias + dot(row, x)
        })
        .collect()
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Adaptive-moment optimizer state.
///
/// Coordinates whose gradient is exactly zero are left untouched (moments and
/// parameter), so a zero gradient is the identity on parameters for any state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_len("optimizer parameters", self.m.len(), params.len())?;
        check_len("optimizer gradients", self.m.len(), grads.len())?;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            if g == 0.0 {
                continue;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// Applies one update to `net` and re-imposes its storage precision.
    pub fn step_net(&mut self, net: &mut DenseNet, grads: &[f64]) -> Result<()> {
        self.step(net.params_mut(), grads)?;
        net.apply_precision();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::finite_diff;

    fn affine_net() -> DenseNet {
        DenseNet::from_params(&[1, 1], Activation::Tanh, Precision::F64, vec![2.0, 1.0]).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = DenseNet::new(&[2, 1], Activation::Tanh, Precision::F64, 7).unwrap();
        let b = DenseNet::new(&[2, 1], Activation::Tanh, Precision::F64, 7).unwrap();
        assert_eq!(a, b);
        let c = DenseNet::new(&[2, 1], Activation::Tanh, Precision::F64, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_count() {
        let net = DenseNet::new(&[3, 8, 3], Activation::Tanh, Precision::F64, 0).unwrap();
        assert_eq!(net.num_params(), 59);
        // biases start at zero
        let (_, b) = net.layer(0);
        assert!(b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(matches!(
            DenseNet::new(&[2], Activation::Tanh, Precision::F64, 0),
            Err(Error::Config(_))
        ));
        assert!(DenseNet::new(&[], Activation::Tanh, Precision::F64, 0).is_err());
        assert!(DenseNet::new(&[2, 0, 1], Activation::Tanh, Precision::F64, 0).is_err());
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net =
            DenseNet::from_params(&[3, 4, 2], Activation::Gelu, Precision::F64, vec![0.0; 26])
                .unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_affine_layer() {
        let net = affine_net();
        assert_eq!(net.forward(&[3.0]).unwrap(), vec![7.0]);
        let (dp, dx) = net.vjp(&[3.0], &[1.0]).unwrap();
        assert_eq!(dp, vec![3.0, 1.0]);
        assert_eq!(dx, vec![2.0]);
    }

    #[test]
    fn hidden_zero_weights_output_bias() {
        let mut params = vec![0.0; 4 * 2 + 4 + 4 + 1];
        *params.last_mut().unwrap() = 1.25;
        let net = DenseNet::from_params(&[2, 4, 1], Activation::Tanh, Precision::F64, params)
            .unwrap();
        assert_eq!(net.forward(&[0.3, -9.0]).unwrap(), vec![1.25]);
    }

    #[test]
    fn shape_errors() {
        let net = affine_net();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::Shape { .. })));
        assert!(matches!(net.vjp(&[1.0], &[1.0, 1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = DenseNet::new(&[3, 5, 2], Activation::Gelu, Precision::F64, 3).unwrap();
        let (dp, dx) = net.vjp(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(dp.iter().chain(&dx).all(|&g| g == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences_all_activations() {
        for (seed, act) in [Activation::Tanh, Activation::Relu, Activation::Gelu]
            .into_iter()
            .enumerate()
        {
            let net = DenseNet::new(&[3, 6, 5, 2], act, Precision::F64, seed as u64).unwrap();
            let x = [0.3, -0.7, 0.45];
            let up = [0.6, -1.1];
            let (dp, dx) = net.vjp(&x, &up).unwrap();
            let obj = |n: &DenseNet, x: &[f64]| {
                let y = n.forward(x).unwrap();
                y[0] * up[0] + y[1] * up[1]
            };
            let fd_x = finite_diff(|v| obj(&net, v), &x, 1e-5).unwrap();
            for (a, b) in dx.iter().zip(&fd_x) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{act:?}: {a} vs {b}");
            }
            let fd_p = finite_diff(
                |p| {
                    let n = DenseNet::from_params(net.layer_sizes(), act, Precision::F64, p.to_vec())
                        .unwrap();
                    obj(&n, &x)
                },
                net.params(),
                1e-5,
            )
            .unwrap();
            for (a, b) in dp.iter().zip(&fd_p) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{act:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn input_vjp_matches_full_vjp() {
        let net = DenseNet::new(&[4, 7, 3], Activation::Tanh, Precision::F64, 11).unwrap();
        let x = [0.1, 0.9, -0.4, 0.0];
        let up = [1.0, -2.0, 0.5];
        let (_, dx) = net.vjp(&x, &up).unwrap();
        assert_eq!(net.input_vjp(&x, &up).unwrap(), dx);
    }

    #[test]
    fn f32_precision_rounds_parameters() {
        let net = DenseNet::new(&[3, 4, 1], Activation::Tanh, Precision::F32, 5).unwrap();
        assert!(net.params().iter().all(|&p| p == p as f32 as f64));
    }

    #[test]
    fn adam_zero_gradient_on_fresh_state_is_identity() {
        let mut opt = Adam::new(3, 0.1);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        let mut opt = Adam::new(1, 0.1);
        let mut p = vec![0.0];
        opt.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_is_deterministic_and_checks_shapes() {
        let mut a = Adam::new(2, 0.01);
        let mut b = a.clone();
        let (mut pa, mut pb) = (vec![0.3, 0.4], vec![0.3, 0.4]);
        a.step(&mut pa, &[0.2, -0.1]).unwrap();
        b.step(&mut pb, &[0.2, -0.1]).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(a, b);
        assert!(a.step(&mut pa, &[1.0]).is_err());
    }

    #[test]
    fn adam_step_counter_increments() {
        let mut opt = Adam::new(1, 0.01);
        let mut p = vec![0.0];
        for i in 1..=5 {
            opt.step(&mut p, &[0.5]).unwrap();
            assert_eq!(opt.step_count(), i);
        }
    }
}
