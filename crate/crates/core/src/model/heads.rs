//! Reconstruction decoder, speaker classifiers, domain discriminators, and
//! the statistics network used for mutual-information estimation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Activation, BatchNorm, ConvTranspose1d, Ctx, Linear, Mlp, ParamStore};

/// Logits are clamped to this magnitude before any sigmoid.
pub const LOGIT_CLAMP: f64 = 15.0;

/// Number of stride-2 transposed convolutions; the seed length is
/// `crop / 2^UPSAMPLE_LAYERS`.
pub const UPSAMPLE_LAYERS: usize = 7;
const REFINE_LAYERS: usize = 2;

/// Three fully-connected layers lift `[f_id, f_dom]` to a short
/// `[C0, crop / 128]` seed; nine transposed convolutions (seven doubling the
/// length, two length-preserving) bring it to `[n_mels, crop]`.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub input: usize,
    pub crop: usize,
    pub n_mels: usize,
    fcs: Vec<(Linear, BatchNorm)>,
    seed_channels: usize,
    seed_len: usize,
    convs: Vec<(ConvTranspose1d, Option<BatchNorm>)>,
}

impl Decoder {
    /// `channels` lists the input channels of the nine transposed
    /// convolutions; the last one outputs `n_mels`.
    pub fn new(
        name: &str,
        input: usize,
        hidden: usize,
        channels: &[usize],
        crop: usize,
        n_mels: usize,
    ) -> Result<Self> {
        let scale = 1 << UPSAMPLE_LAYERS;
        if crop == 0 || crop % scale != 0 {
            return Err(Error::Config(format!(
                "decoder crop length must be a positive multiple of {scale}, got {crop}"
            )));
        }
        if channels.len() != UPSAMPLE_LAYERS + REFINE_LAYERS {
            return Err(Error::Config(format!(
                "decoder needs {} channel widths, got {}",
                UPSAMPLE_LAYERS + REFINE_LAYERS,
                channels.len()
            )));
        }
        let seed_len = crop / scale;
        let seed_channels = channels[0];
        let dims = [input, hidden, hidden, seed_channels * seed_len];
        let fcs = (0..3)
            .map(|i| {
                (
                    Linear::new(format!("{name}.fc{i}"), dims[i], dims[i + 1]),
                    BatchNorm::new(format!("{name}.fc_bn{i}"), dims[i + 1]),
                )
            })
            .collect();
        let mut convs = Vec::new();
        for (i, &cin) in channels.iter().enumerate() {
            let last = i + 1 == channels.len();
            let cout = if last { n_mels } else { channels[i + 1] };
            let (kernel, stride) = if i < UPSAMPLE_LAYERS { (4, 2) } else { (3, 1) };
            let conv = ConvTranspose1d {
                name: format!("{name}.deconv{i}"),
                cin,
                cout,
                kernel,
                stride,
                pad: 1,
                bias: last,
            };
            let bn = (!last).then(|| BatchNorm::new(format!("{name}.deconv_bn{i}"), cout));
            convs.push((conv, bn));
        }
        Ok(Self {
            input,
            crop,
            n_mels,
            fcs,
            seed_channels,
            seed_len,
            convs,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for (l, bn) in &self.fcs {
            l.init(store, rng);
            bn.init(store);
        }
        for (c, bn) in &self.convs {
            c.init(store, rng);
            if let Some(bn) = bn {
                bn.init(store);
            }
        }
    }

    /// `[B, d_id]`, `[B, d_dom]` to a `[B, crop, n_mels]` reconstruction.
    pub fn forward(&self, cx: &mut Ctx, f_id: Var, f_dom: Var) -> Result<Var> {
        let width = cx.g.shape(f_id).get(1).copied().unwrap_or(0)
            + cx.g.shape(f_dom).get(1).copied().unwrap_or(0);
        if width != self.input {
            return Err(Error::Shape(format!(
                "decoder expects {} concatenated input dims, got {:?} and {:?}",
                self.input,
                cx.g.shape(f_id),
                cx.g.shape(f_dom)
            )));
        }
        let mut y = cx.g.concat_cols(&[f_id, f_dom])?;
        for (l, bn) in &self.fcs {
            y = l.forward(cx, y)?;
            y = bn.forward(cx, y)?;
            y = cx.g.relu(y);
        }
        let b = cx.g.shape(y)[0];
        y = cx.g.reshape(y, &[b, self.seed_channels, self.seed_len])?;
        for (c, bn) in &self.convs {
            y = c.forward(cx, y)?;
            if let Some(bn) = bn {
                y = bn.forward(cx, y)?;
                y = cx.g.relu(y);
            }
        }
        debug_assert_eq!(cx.g.shape(y), &[b, self.n_mels, self.crop]);
        cx.g.swap_last2(y)
    }
}

/// Linear speaker classifier; softmax is applied by the loss.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub fc: Linear,
}

impl Classifier {
    pub fn new(name: &str, input: usize, classes: usize) -> Self {
        Self {
            fc: Linear::new(format!("{name}.fc"), input, classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.fc.output
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.fc.init(store, rng);
    }

    pub fn logits(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        self.fc.forward(cx, x)
    }

    /// Class posteriors; every row sums to one.
    pub fn probs(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let z = self.logits(cx, x)?;
        cx.g.softmax_rows(z)
    }
}

/// Binary domain discriminator: MLP with leaky ReLU to a clamped logit.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub mlp: Mlp,
}

impl Discriminator {
    pub fn new(name: &str, input: usize, hidden: usize) -> Self {
        Self {
            mlp: Mlp::new(name, &[input, hidden, hidden, 1], Activation::LeakyRelu(0.2)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.layers[0].input
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.mlp.init(store, rng);
    }

    /// `[B, d]` to clamped logits `[B, 1]`.
    pub fn logit(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let z = self.mlp.forward(cx, x)?;
        Ok(cx.g.clamp(z, -LOGIT_CLAMP, LOGIT_CLAMP))
    }

    /// Probability of the source domain, strictly inside (0, 1).
    pub fn prob(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let z = self.logit(cx, x)?;
        Ok(cx.g.sigmoid(z))
    }
}

/// Statistics network `T(f_id, f_dom)`: concatenation, two hidden layers, scalar.
#[derive(Clone, Debug)]
pub struct StatNet {
    pub mlp: Mlp,
}

impl StatNet {
    pub fn new(name: &str, d_id: usize, d_dom: usize, hidden: usize) -> Self {
        Self {
            mlp: Mlp::new(name, &[d_id + d_dom, hidden, hidden, 1], Activation::LeakyRelu(0.2)),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.mlp.init(store, rng);
    }

    /// `[B, d_id]`, `[B, d_dom]` to `[B, 1]`.
    pub fn forward(&self, cx: &mut Ctx, a: Var, b: Var) -> Result<Var> {
        let x = cx.g.concat_cols(&[a, b])?;
        self.mlp.forward(cx, x)
    }
}
