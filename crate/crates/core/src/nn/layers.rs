use rand_chacha::ChaCha8Rng;

use super::graph::{Conv2dOpts, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Fully connected layer, `y = x Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), &[output, input], bound, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[output], bound, rng);
        Self {
            weight,
            bias,
            in_features: input,
            out_features: output,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.linear(x, w);
        g.add_bias(y, b)
    }
}

/// 2-D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub opts: Conv2dOpts,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        opts: Conv2dOpts,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin / opts.groups * kernel.0 * kernel.1;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[cout, cin / opts.groups, kernel.0, kernel.1],
            bound,
            rng,
        );
        let bias = store.add_uniform(format!("{name}.bias"), &[cout], bound, rng);
        Self { weight, bias, opts }
    }

    /// Square kernel, stride and "same"-style padding `k / 2`.
    pub fn square(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::new(store, name, cin, cout, (k, k), Conv2dOpts::new(stride, k / 2), rng)
    }

    /// Rescales the weights to He-uniform for a LeakyReLU of `slope` and
    /// zeroes the bias.
    pub fn he_init(self, store: &mut ParamStore, slope: f64) -> Self {
        let gain = (2.0 / (1.0 + slope * slope)).sqrt();
        // drawn with bound 1/sqrt(fan_in); He-uniform is gain * sqrt(3 / fan_in)
        let scale = gain * 3f64.sqrt();
        store.get_mut(self.weight).data_mut().iter_mut().for_each(|w| *w *= scale);
        store.get_mut(self.bias).data_mut().iter_mut().for_each(|b| *b = 0.0);
        self
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, w, self.opts);
        g.add_bias(y, b)
    }
}

/// Transposed 2-D convolution with bias.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub opts: Conv2dOpts,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / ((cout * k * k) as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), &[cin, cout, k, k], bound, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[cout], bound, rng);
        Self {
            weight,
            bias,
            opts: Conv2dOpts::new(stride, padding),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv_transpose2d(x, w, self.opts);
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, train: bool) -> Var {
        g.batch_norm(
            store,
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            self.eps,
            train,
        )
    }
}

/// One LSTM layer with PyTorch gate layout `(i, f, g, o)`.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: store.add_uniform(format!("{name}.w_ih"), &[4 * hidden, input], bound, rng),
            w_hh: store.add_uniform(format!("{name}.w_hh"), &[4 * hidden, hidden], bound, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[4 * hidden], bound, rng),
            hidden,
        }
    }

    /// One time step; returns `(h, c)`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var, c: Var) -> (Var, Var) {
        let w_ih = g.param(store, self.w_ih);
        let w_hh = g.param(store, self.w_hh);
        let b = g.param(store, self.bias);
        let xi = g.linear(x, w_ih);
        let hh = g.linear(h, w_hh);
        let s = g.add(xi, hh);
        let gates = g.add_bias(s, b);
        let n = self.hidden;
        let i = g.narrow(gates, 0, n);
        let f = g.narrow(gates, n, n);
        let gg = g.narrow(gates, 2 * n, n);
        let o = g.narrow(gates, 3 * n, n);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let gg = g.tanh(gg);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c);
        let ig = g.mul(i, gg);
        let c_new = g.add(fc, ig);
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc);
        (h_new, c_new)
    }
}
