//! Trainable networks and how they are assembled for each training mode.
//!
//! Parameter names are prefixed by component: `g.` backbone, `e_id.`,
//! `e_ds.`, `e_dt.` encoders, `r.` decoder, `c_s.`, `c_t.` classifiers,
//! `d_dom.`, `d_adv.` discriminators, `t_theta.` statistics network. A
//! baseline model has only `g.`, `embed.` and `cls.`.

pub mod backbone;
pub mod heads;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, Encoder, Sap};
pub use heads::{Classifier, Decoder, Discriminator, StatNet, LOGIT_CLAMP};

use crate::corpus::Domain;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::Tensor;

/// Gradient reversal: identity forward, `-lambda` times the upstream
/// gradient backward.
pub fn grl(g: &mut Graph, x: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("GRL lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(g.scale_grad(x, -lambda))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneScale {
    Toy,
    Resnet34,
}

impl FromStr for BackboneScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "resnet34" => Ok(Self::Resnet34),
            _ => Err(Error::Config(format!("unknown backbone scale `{s}` (toy, resnet34)"))),
        }
    }
}

impl fmt::Display for BackboneScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Toy => "toy",
            Self::Resnet34 => "resnet34",
        })
    }
}

/// Which networks exist: a CE-trained baseline (also used for fine-tuning)
/// or the full disentangling/adversarial model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Baseline,
    Deaan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone_scale: BackboneScale,
    pub n_mels: usize,
    pub d_id: usize,
    pub d_dom: usize,
    pub num_speakers_source: usize,
    pub num_speakers_target: usize,
    /// Reversal strength on `f_id` into the adversarial discriminator.
    pub grl_lambda: f64,
    /// Decoder output length; a multiple of 128.
    pub crop_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_scale: BackboneScale::Toy,
            n_mels: 64,
            d_id: 128,
            d_dom: 128,
            num_speakers_source: 8,
            num_speakers_target: 8,
            grl_lambda: 1.0,
            crop_frames: 384,
        }
    }
}

struct Widths {
    blocks: [usize; 4],
    channels: [usize; 4],
    sap_hidden: usize,
    head_hidden: usize,
    stat_hidden: usize,
    decoder_hidden: usize,
    decoder_channels: [usize; 9],
}

impl ModelConfig {
    fn widths(&self) -> Widths {
        match self.backbone_scale {
            BackboneScale::Toy => Widths {
                blocks: [1, 1, 1, 1],
                channels: [8, 16, 32, 64],
                sap_hidden: 32,
                head_hidden: 64,
                stat_hidden: 128,
                decoder_hidden: 128,
                decoder_channels: [32, 32, 32, 24, 24, 16, 16, 16, 16],
            },
            BackboneScale::Resnet34 => Widths {
                blocks: [3, 4, 6, 3],
                channels: [64, 128, 256, 512],
                sap_hidden: 128,
                head_hidden: 256,
                stat_hidden: 128,
                decoder_hidden: 512,
                decoder_channels: [256, 256, 128, 128, 64, 64, 64, 64, 64],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.d_id == 0 || self.d_dom == 0 {
            return Err(Error::Config("n_mels, d_id and d_dom must be positive".into()));
        }
        if self.num_speakers_source == 0 {
            return Err(Error::Config("num_speakers_source must be positive".into()));
        }
        if !(self.grl_lambda >= 0.0 && self.grl_lambda.is_finite()) {
            return Err(Error::Config("grl_lambda must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// The networks of one model. Components absent in an architecture are `None`.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub arch: Architecture,
    pub backbone: Backbone,
    /// `e_id` in the full model, `embed` in the baseline.
    pub e_id: Encoder,
    /// `c_s` in the full model, `cls` in the baseline.
    pub c_s: Classifier,
    pub e_ds: Option<Encoder>,
    pub e_dt: Option<Encoder>,
    pub decoder: Option<Decoder>,
    pub c_t: Option<Classifier>,
    pub d_dom: Option<Discriminator>,
    pub d_adv: Option<Discriminator>,
    pub t_theta: Option<StatNet>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, arch: Architecture) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.widths();
        let strides = [1, 2, 2, 2];
        let backbone = Backbone::new("g", cfg.n_mels, &w.blocks, &w.channels, &strides);
        let d = backbone.out_channels();
        let model = match arch {
            Architecture::Baseline => Self {
                cfg: cfg.clone(),
                arch,
                e_id: Encoder::new("embed", d, w.sap_hidden, cfg.d_id),
                c_s: Classifier::new("cls", cfg.d_id, cfg.num_speakers_source),
                backbone,
                e_ds: None,
                e_dt: None,
                decoder: None,
                c_t: None,
                d_dom: None,
                d_adv: None,
                t_theta: None,
            },
            Architecture::Deaan => {
                if cfg.num_speakers_target == 0 {
                    return Err(Error::Config("num_speakers_target must be positive".into()));
                }
                Self {
                    cfg: cfg.clone(),
                    arch,
                    e_id: Encoder::new("e_id", d, w.sap_hidden, cfg.d_id),
                    c_s: Classifier::new("c_s", cfg.d_id, cfg.num_speakers_source),
                    e_ds: Some(Encoder::new("e_ds", d, w.sap_hidden, cfg.d_dom)),
                    e_dt: Some(Encoder::new("e_dt", d, w.sap_hidden, cfg.d_dom)),
                    decoder: Some(Decoder::new(
                        "r",
                        cfg.d_id + cfg.d_dom,
                        w.decoder_hidden,
                        &w.decoder_channels,
                        cfg.crop_frames,
                        cfg.n_mels,
                    )?),
                    c_t: Some(Classifier::new("c_t", cfg.d_id, cfg.num_speakers_target)),
                    d_dom: Some(Discriminator::new("d_dom", cfg.d_dom, w.head_hidden)),
                    d_adv: Some(Discriminator::new("d_adv", cfg.d_id, w.head_hidden)),
                    t_theta: Some(StatNet::new("t_theta", cfg.d_id, cfg.d_dom, w.stat_hidden)),
                    backbone,
                }
            }
        };
        Ok(model)
    }

    /// Fresh parameters for every component.
    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        let mut store = ParamStore::new();
        self.backbone.init(&mut store, rng);
        self.e_id.init(&mut store, rng);
        self.c_s.init(&mut store, rng);
        for e in [&self.e_ds, &self.e_dt].into_iter().flatten() {
            e.init(&mut store, rng);
        }
        if let Some(r) = &self.decoder {
            r.init(&mut store, rng);
        }
        if let Some(c) = &self.c_t {
            c.init(&mut store, rng);
        }
        for d in [&self.d_dom, &self.d_adv].into_iter().flatten() {
            d.init(&mut store, rng);
        }
        if let Some(t) = &self.t_theta {
            t.init(&mut store, rng);
        }
        store
    }

    /// Name prefix of the speaker classifier trained on `domain`.
    pub fn classifier_prefix(&self, domain: Domain) -> &'static str {
        match (self.arch, domain) {
            (Architecture::Baseline, _) => "cls.",
            (Architecture::Deaan, Domain::Source) => "c_s.",
            (Architecture::Deaan, Domain::Target) => "c_t.",
        }
    }

    pub fn frame_features(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        self.backbone.forward(cx, x)
    }

    /// Speaker embedding (`f_id`, or the baseline's pooled embedding).
    pub fn embed_id(&self, cx: &mut Ctx, h: Var) -> Result<Var> {
        self.e_id.forward(cx, h)
    }

    pub fn embed_dom(&self, cx: &mut Ctx, h: Var, domain: Domain) -> Result<Var> {
        let enc = match domain {
            Domain::Source => self.e_ds.as_ref(),
            Domain::Target => self.e_dt.as_ref(),
        };
        enc.ok_or_else(|| missing("domain encoder"))?.forward(cx, h)
    }

    pub fn classifier(&self, domain: Domain) -> Result<&Classifier> {
        match domain {
            Domain::Source => Ok(&self.c_s),
            Domain::Target => match self.arch {
                Architecture::Baseline => Ok(&self.c_s),
                Architecture::Deaan => self.c_t.as_ref().ok_or_else(|| missing("c_t")),
            },
        }
    }

    pub fn decode(&self, cx: &mut Ctx, f_id: Var, f_dom: Var) -> Result<Var> {
        self.decoder
            .as_ref()
            .ok_or_else(|| missing("decoder"))?
            .forward(cx, f_id, f_dom)
    }

    pub fn d_dom(&self) -> Result<&Discriminator> {
        self.d_dom.as_ref().ok_or_else(|| missing("d_dom"))
    }

    pub fn d_adv(&self) -> Result<&Discriminator> {
        self.d_adv.as_ref().ok_or_else(|| missing("d_adv"))
    }

    pub fn t_theta(&self) -> Result<&StatNet> {
        self.t_theta.as_ref().ok_or_else(|| missing("t_theta"))
    }

    /// Eval-mode embeddings for a `[B, T, F]` batch.
    pub fn embed(&self, store: &ParamStore, batch: Tensor) -> Result<Tensor> {
        let mut cx = Ctx::new(store, false);
        let x = cx.g.constant(batch);
        let h = self.frame_features(&mut cx, x)?;
        let e = self.embed_id(&mut cx, h)?;
        Ok(cx.g.value(e).clone())
    }
}

fn missing(what: &str) -> Error {
    Error::Config(format!("baseline model has no {what}"))
}
