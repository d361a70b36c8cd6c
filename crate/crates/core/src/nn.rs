//! Parameter storage and the layer building blocks shared by every network.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Named trainable parameters plus non-trainable buffers (running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing buffer `{name}`")))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameter count under a name prefix such as `"d_adv."`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.params.keys().any(|k| k.starts_with(prefix))
    }

    /// Drops every parameter and buffer under `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
        self.buffers.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}

/// Forward-pass context: owns the tape, reads parameters, and collects
/// batch-norm statistics to be folded into running buffers after the step.
pub struct Ctx<'a> {
    pub g: Graph,
    pub store: &'a ParamStore,
    pub train: bool,
    bn_updates: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            train,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let t = self.store.get(name)?;
        Ok(self.g.param(name, t))
    }

    /// Folds collected batch statistics into the running buffers of `store`.
    pub fn apply_bn_updates(updates: &[(String, Vec<f64>, Vec<f64>)], store: &mut ParamStore) {
        for (name, mean, var) in updates {
            for (suffix, stat) in [("running_mean", mean), ("running_var", var)] {
                if let Some(buf) = store.buffers.get_mut(&format!("{name}.{suffix}")) {
                    for (r, s) in buf.data_mut().iter_mut().zip(stat) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s;
                    }
                }
            }
        }
    }

    pub fn take_bn_updates(&mut self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        std::mem::take(&mut self.bn_updates)
    }
}

fn normal(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Self {
            name: name.into(),
            input,
            output,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        // He-style fan-in scaling.
        let std = (2.0 / self.input as f64).sqrt();
        store.params.insert(
            format!("{}.weight", self.name),
            Tensor::from_parts(vec![self.input, self.output], normal(rng, self.input * self.output, std)),
        );
        store
            .params
            .insert(format!("{}.bias", self.name), Tensor::zeros(vec![self.output]));
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        if cx.g.shape(x).len() != 2 || cx.g.shape(x)[1] != self.input {
            return Err(Error::Shape(format!(
                "{}: expected [B, {}] input, got {:?}",
                self.name,
                self.input,
                cx.g.shape(x)
            )));
        }
        let w = cx.param(&format!("{}.weight", self.name))?;
        let b = cx.param(&format!("{}.bias", self.name))?;
        let y = cx.g.matmul(x, w)?;
        cx.g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv1d {
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let fan_in = self.cin * self.kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        store.params.insert(
            format!("{}.weight", self.name),
            Tensor::from_parts(
                vec![self.cout, self.cin, self.kernel],
                normal(rng, self.cout * fan_in, std),
            ),
        );
        if self.bias {
            store
                .params
                .insert(format!("{}.bias", self.name), Tensor::zeros(vec![self.cout]));
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.param(&format!("{}.weight", self.name))?;
        let y = cx.g.conv1d(x, w, self.stride, self.pad)?;
        if self.bias {
            let b = cx.param(&format!("{}.bias", self.name))?;
            cx.g.add_channel_bias(y, b)
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl ConvTranspose1d {
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        // Each output position receives about cin * kernel / stride terms.
        let fan_in = (self.cin * self.kernel / self.stride).max(1);
        let std = (2.0 / fan_in as f64).sqrt();
        store.params.insert(
            format!("{}.weight", self.name),
            Tensor::from_parts(
                vec![self.cin, self.cout, self.kernel],
                normal(rng, self.cin * self.cout * self.kernel, std),
            ),
        );
        if self.bias {
            store
                .params
                .insert(format!("{}.bias", self.name), Tensor::zeros(vec![self.cout]));
        }
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        (input_len - 1) * self.stride + self.kernel - 2 * self.pad
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.param(&format!("{}.weight", self.name))?;
        let y = cx.g.conv_transpose1d(x, w, self.stride, self.pad)?;
        if self.bias {
            let b = cx.param(&format!("{}.bias", self.name))?;
            cx.g.add_channel_bias(y, b)
        } else {
            Ok(y)
        }
    }
}

/// Batch normalization over channel axis 1 of `[B, C]` or `[B, C, T]` input.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        let c = self.channels;
        store
            .params
            .insert(format!("{}.gamma", self.name), Tensor::full(vec![c], 1.0));
        store
            .params
            .insert(format!("{}.beta", self.name), Tensor::zeros(vec![c]));
        store
            .buffers
            .insert(format!("{}.running_mean", self.name), Tensor::zeros(vec![c]));
        store
            .buffers
            .insert(format!("{}.running_var", self.name), Tensor::full(vec![c], 1.0));
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = cx.param(&format!("{}.gamma", self.name))?;
        let beta = cx.param(&format!("{}.beta", self.name))?;
        if cx.train {
            let (y, stats) = cx.g.batch_norm(x, gamma, beta, BN_EPS)?;
            cx.bn_updates.push((self.name.clone(), stats.mean, stats.var));
            Ok(y)
        } else {
            let rm = cx.store.buffer(&format!("{}.running_mean", self.name))?;
            let rv = cx.store.buffer(&format!("{}.running_var", self.name))?;
            let (rm, rv) = (rm.data().to_vec(), rv.data().to_vec());
            cx.g.batch_norm_eval(x, gamma, beta, &rm, &rv, BN_EPS)
        }
    }
}

/// Hidden-layer nonlinearity used by the small heads.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Stack of linear layers with an activation between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    pub fn new(name: &str, dims: &[usize], act: Activation) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{name}.fc{i}"), w[0], w[1]))
            .collect();
        Self { layers, act }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    pub fn forward(&self, cx: &mut Ctx, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(cx, x)?;
            if i + 1 < n {
                x = self.act.apply(&mut cx.g, x);
            }
        }
        Ok(x)
    }
}
