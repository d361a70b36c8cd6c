//! Frame-level feature extractor, self-attentive pooling, and the
//! SAP + two-layer embedding encoders built on top of them.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{BatchNorm, Conv1d, Ctx, Linear, ParamStore};

/// One pre-activation-free residual block: conv-BN-ReLU-conv-BN plus a
/// (projected when needed) shortcut, then ReLU.
#[derive(Clone, Debug)]
struct Block {
    conv1: Conv1d,
    bn1: BatchNorm,
    conv2: Conv1d,
    bn2: BatchNorm,
    shortcut: Option<(Conv1d, BatchNorm)>,
}

impl Block {
    fn new(name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let conv = |n: &str, cin, cout, kernel, stride, pad| Conv1d {
            name: format!("{name}.{n}"),
            cin,
            cout,
            kernel,
            stride,
            pad,
            bias: false,
        };
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                conv("proj", cin, cout, 1, stride, 0),
                BatchNorm::new(format!("{name}.proj_bn"), cout),
            )
        });
        Self {
            conv1: conv("conv1", cin, cout, 3, stride, 1),
            bn1: BatchNorm::new(format!("{name}.bn1"), cout),
            conv2: conv("conv2", cout, cout, 3, 1, 1),
            bn2: BatchNorm::new(format!("{name}.bn2"), cout),
            shortcut,
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.conv1.init(store, rng);
        self.bn1.init(store);
        self.conv2.init(store, rng);
        self.bn2.init(store);
        if let Some((c, b)) = &self.shortcut {
            c.init(store, rng);
            b.init(store);
        }
    }

    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv1.forward(cx, x)?;
        let y = self.bn1.forward(cx, y)?;
        let y = cx.g.relu(y);
        let y = self.conv2.forward(cx, y)?;
        let y = self.bn2.forward(cx, y)?;
        let skip = match &self.shortcut {
            Some((c, b)) => {
                let s = c.forward(cx, x)?;
                b.forward(cx, s)?
            }
            None => x,
        };
        let y = cx.g.add(y, skip)?;
        Ok(cx.g.relu(y))
    }
}

/// Residual stack over time with mel bins as input channels.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub n_mels: usize,
    stem: Conv1d,
    stem_bn: BatchNorm,
    blocks: Vec<Block>,
    total_stride: usize,
    out_channels: usize,
}

impl Backbone {
    /// `blocks[i]` residual blocks at `channels[i]` channels; the first block of
    /// stage `i` downsamples time by `strides[i]`.
    pub fn new(
        name: &str,
        n_mels: usize,
        blocks: &[usize],
        channels: &[usize],
        strides: &[usize],
    ) -> Self {
        assert!(blocks.len() == channels.len() && blocks.len() == strides.len() && !blocks.is_empty());
        let stem = Conv1d {
            name: format!("{name}.stem"),
            cin: n_mels,
            cout: channels[0],
            kernel: 3,
            stride: 1,
            pad: 1,
            bias: false,
        };
        let mut list = Vec::new();
        let mut cin = channels[0];
        for (s, ((&n, &c), &st)) in blocks.iter().zip(channels).zip(strides).enumerate() {
            for b in 0..n {
                let stride = if b == 0 { st } else { 1 };
                list.push(Block::new(&format!("{name}.layer{s}.{b}"), cin, c, stride));
                cin = c;
            }
        }
        Self {
            n_mels,
            stem,
            stem_bn: BatchNorm::new(format!("{name}.stem_bn"), channels[0]),
            blocks: list,
            total_stride: strides.iter().product(),
            out_channels: cin,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.stem.init(store, rng);
        self.stem_bn.init(store);
        for b in &self.blocks {
            b.init(store, rng);
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn total_stride(&self) -> usize {
        self.total_stride
    }

    /// Shortest input the stack accepts.
    pub fn min_frames(&self) -> usize {
        self.total_stride
    }

    pub fn output_frames(&self, t: usize) -> usize {
        t.div_ceil(self.total_stride)
    }

    /// `[B, T, F]` features to `[B, T', D]` frame-level latents.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = cx.g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.n_mels {
            return Err(Error::Shape(format!(
                "backbone expects [batch, frames, {}] input, got {shape:?}",
                self.n_mels
            )));
        }
        if shape[1] < self.min_frames() {
            return Err(Error::Shape(format!(
                "backbone needs at least {} frames, got {}",
                self.min_frames(),
                shape[1]
            )));
        }
        let y = cx.g.swap_last2(x)?;
        let y = self.stem.forward(cx, y)?;
        let y = self.stem_bn.forward(cx, y)?;
        let mut y = cx.g.relu(y);
        for b in &self.blocks {
            y = b.forward(cx, y)?;
        }
        cx.g.swap_last2(y)
    }
}

/// Self-attentive pooling: `w = softmax_t(tanh(h_t W + b) u)`, output `Σ_t w_t h_t`.
#[derive(Clone, Debug)]
pub struct Sap {
    pub name: String,
    pub dim: usize,
    pub hidden: usize,
    proj: Linear,
}

impl Sap {
    pub fn new(name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            name: name.to_string(),
            dim,
            hidden,
            proj: Linear::new(format!("{name}.proj"), dim, hidden),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.proj.init(store, rng);
        let std = (1.0 / self.hidden as f64).sqrt();
        let ctx: Vec<f64> = (0..self.hidden).map(|_| rng.random_range(-std..std)).collect();
        store.params.insert(
            format!("{}.context", self.name),
            crate::tensor::Tensor::from_parts(vec![self.hidden, 1], ctx),
        );
    }

    /// Attention weights `[B, T]` for `[B, T, D]` input.
    pub fn weights(&self, cx: &mut Ctx, h: Var) -> Result<Var> {
        let shape = cx.g.shape(h).to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::Shape(format!(
                "{}: expected [batch, frames, {}] input, got {shape:?}",
                self.name, self.dim
            )));
        }
        if shape[1] == 0 {
            return Err(Error::Shape(format!("{}: empty time axis", self.name)));
        }
        let (b, t) = (shape[0], shape[1]);
        let flat = cx.g.reshape(h, &[b * t, self.dim])?;
        let a = self.proj.forward(cx, flat)?;
        let a = cx.g.tanh(a);
        let u = cx.param(&format!("{}.context", self.name))?;
        let scores = cx.g.matmul(a, u)?;
        let scores = cx.g.reshape(scores, &[b, t])?;
        cx.g.softmax_rows(scores)
    }

    /// `[B, T, D]` to `[B, D]`.
    pub fn forward(&self, cx: &mut Ctx, h: Var) -> Result<Var> {
        let w = self.weights(cx, h)?;
        cx.g.attn_pool(h, w)
    }
}

/// One SAP layer followed by two fully-connected layers.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub name: String,
    pub sap: Sap,
    fc1: Linear,
    fc2: Linear,
}

impl Encoder {
    pub fn new(name: &str, input: usize, sap_hidden: usize, output: usize) -> Self {
        Self {
            name: name.to_string(),
            sap: Sap::new(&format!("{name}.sap"), input, sap_hidden),
            fc1: Linear::new(format!("{name}.fc1"), input, output),
            fc2: Linear::new(format!("{name}.fc2"), output, output),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.sap.init(store, rng);
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    pub fn output_dim(&self) -> usize {
        self.fc2.output
    }

    pub fn forward(&self, cx: &mut Ctx, h: Var) -> Result<Var> {
        let p = self.sap.forward(cx, h)?;
        let y = self.fc1.forward(cx, p)?;
        let y = cx.g.relu(y);
        self.fc2.forward(cx, y)
    }
}
