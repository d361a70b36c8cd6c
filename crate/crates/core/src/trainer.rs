//! Training loops: CE baseline, fine-tuning of a baseline on the target
//! domain, and the full disentangling/adversarial objective.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ModelCheckpoint, RngState};
use crate::corpus::io::write_atomic;
use crate::corpus::{random_crop, Domain, FeatureChunk};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::losses::{self, combine, AdvRole, LossParts, LossReport, LossWeights};
use crate::mi::{mi_loss, MiBatch};
use crate::model::{grl, Architecture, Model, ModelConfig};
use crate::nn::{Ctx, ParamStore};
use crate::optim::{clip_global_norm, collect_grads, global_norm, lr_schedule, Adam, AdamConfig, Sgd};
use crate::tensor::Tensor;

/// Parameters stepped by momentum SGD; everything else uses Adam.
const ADV_PREFIX: &str = "d_adv.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Finetune,
    Deaan,
}

impl Mode {
    pub fn architecture(self) -> Architecture {
        match self {
            Mode::Baseline | Mode::Finetune => Architecture::Baseline,
            Mode::Deaan => Architecture::Deaan,
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "finetune" => Ok(Mode::Finetune),
            "deaan" => Ok(Mode::Deaan),
            _ => Err(Error::Config(format!("unknown mode `{s}` (baseline, finetune, deaan)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Finetune => "finetune",
            Mode::Deaan => "deaan",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Fixed crop length of the full model (also the decoder output length).
    pub crop_frames: usize,
    /// Baseline and fine-tuning draw one crop length per step from
    /// `crop_min..=crop_max`, clipped to the shortest utterance.
    pub crop_min: usize,
    pub crop_max: usize,
    pub batch_size: usize,
    pub epochs: u64,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: u64,
    pub lr: f64,
    pub adv_lr: f64,
    pub adv_momentum: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Reversal strength on the encoder side of the MI estimator.
    pub mi_grl_lambda: f64,
    /// Baseline checkpoint to start from (required for fine-tuning).
    pub init_checkpoint: String,
    /// Save a checkpoint every this many epochs (the last epoch always).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Deaan,
            crop_frames: 384,
            crop_min: 300,
            crop_max: 800,
            batch_size: 32,
            epochs: 10,
            max_steps: 0,
            lr: 1e-4,
            adv_lr: 1e-4,
            adv_momentum: 0.9,
            weights: LossWeights::default(),
            seed: 1,
            grad_clip: 5.0,
            mi_grl_lambda: 1.0,
            init_checkpoint: String::new(),
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.adv_lr > 0.0) {
            return fail(format!("learning rates must be positive (lr {}, adv_lr {})", self.lr, self.adv_lr));
        }
        if !(0.0..1.0).contains(&self.adv_momentum) {
            return fail(format!("adv_momentum must be in [0, 1), got {}", self.adv_momentum));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.crop_frames == 0 || self.crop_min == 0 || self.crop_min > self.crop_max {
            return fail(format!(
                "bad crop lengths: crop_frames {}, crop_min {}, crop_max {}",
                self.crop_frames, self.crop_min, self.crop_max
            ));
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if !(self.grad_clip >= 0.0) || !(self.mi_grl_lambda >= 0.0) {
            return fail("grad_clip and mi_grl_lambda must be >= 0".into());
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be positive".into());
        }
        if self.mode == Mode::Finetune && self.init_checkpoint.is_empty() {
            return fail("finetune mode needs train.init_checkpoint (a baseline checkpoint)".into());
        }
        self.weights.validate()
    }
}

/// One labelled utterance held in memory for training.
#[derive(Clone, Debug)]
pub struct Sample {
    pub features: FeatureChunk,
    pub speaker: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub source: Vec<Sample>,
    pub target: Vec<Sample>,
}

impl TrainData {
    pub fn num_speakers(samples: &[Sample]) -> usize {
        samples.iter().map(|s| s.speaker + 1).max().unwrap_or(0)
    }

    pub fn n_mels(&self) -> Result<usize> {
        let mut bins = self.source.iter().chain(&self.target).map(|s| s.features.bins());
        let first = bins.next().ok_or_else(|| Error::Data("no training utterances".into()))?;
        if bins.any(|b| b != first) {
            return Err(Error::Data("training utterances disagree on the number of mel bins".into()));
        }
        Ok(first)
    }
}

/// A `[B, T, F]` feature batch with its speaker labels.
#[derive(Clone, Debug)]
pub struct LabelledBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl LabelledBatch {
    pub fn from_chunks(chunks: &[FeatureChunk], labels: Vec<usize>) -> Result<Self> {
        let first = chunks.first().ok_or_else(|| Error::Input("empty batch".into()))?;
        let (t, f) = (first.frames(), first.bins());
        if chunks.iter().any(|c| c.frames() != t || c.bins() != f) || labels.len() != chunks.len() {
            return Err(Error::Shape("batch chunks must share one shape and have one label each".into()));
        }
        let data = chunks.iter().flat_map(|c| c.data().iter().map(|&v| v as f64)).collect();
        Ok(Self {
            x: Tensor::new(vec![chunks.len(), t, f], data)?,
            labels,
        })
    }

    fn len(&self) -> usize {
        self.labels.len()
    }
}

/// What a single step sees. The full model needs both domains; baseline
/// and fine-tuning use whichever one is present.
#[derive(Clone, Debug, Default)]
pub struct StepBatch {
    pub source: Option<LabelledBatch>,
    pub target: Option<LabelledBatch>,
}

/// Parameters, optimizer moments and RNG: everything a step mutates.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParamStore,
    pub adam: Adam,
    pub sgd: Sgd,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: u64,
    pub last_checkpoint: Option<PathBuf>,
}

impl TrainState {
    pub fn new(store: ParamStore, cfg: &TrainConfig, rng: ChaCha8Rng) -> Self {
        Self {
            store,
            adam: Adam::new(AdamConfig::default()),
            sgd: Sgd::new(cfg.adv_momentum),
            rng,
            step: 0,
            epoch: 0,
            last_checkpoint: None,
        }
    }
}

/// One log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

fn weighted_total(
    cx: &mut Ctx,
    l_id: Var,
    weighted: &[(f64, Var)],
) -> Result<Var> {
    let mut total = l_id;
    for &(w, v) in weighted {
        let s = cx.g.scale(v, w);
        total = cx.g.add(total, s)?;
    }
    Ok(total)
}

/// Builds the loss graph for one batch; returns (total, parts).
fn forward_losses(
    model: &Model,
    cfg: &TrainConfig,
    cx: &mut Ctx,
    batch: &StepBatch,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossParts)> {
    match model.arch {
        Architecture::Baseline => {
            let b = batch
                .source
                .as_ref()
                .or(batch.target.as_ref())
                .ok_or_else(|| Error::Input("empty step batch".into()))?;
            let x = cx.g.constant(b.x.clone());
            let h = model.frame_features(cx, x)?;
            let e = model.embed_id(cx, h)?;
            let logits = model.c_s.logits(cx, e)?;
            let l_id = losses::cross_entropy_logits(&mut cx.g, logits, &b.labels)?;
            let parts = LossParts {
                l_id: cx.g.value(l_id).item(),
                ..LossParts::default()
            };
            Ok((l_id, parts))
        }
        Architecture::Deaan => {
            let (Some(s), Some(t)) = (&batch.source, &batch.target) else {
                return Err(Error::Input("the full model needs source and target rows in every batch".into()));
            };
            let (bs, bt) = (s.len(), t.len());
            if bs < 2 || bt < 2 {
                return Err(Error::Input(format!("each domain needs at least 2 rows, got {bs} and {bt}")));
            }
            if s.x.shape()[1..] != t.x.shape()[1..] {
                return Err(Error::Shape(format!(
                    "source batch {:?} vs target batch {:?}",
                    s.x.shape(),
                    t.x.shape()
                )));
            }
            let xs = cx.g.constant(s.x.clone());
            let xt = cx.g.constant(t.x.clone());
            // One backbone pass so batch statistics span both domains.
            let x = cx.g.concat_rows(&[xs, xt])?;
            let h = model.frame_features(cx, x)?;
            let f_id = model.embed_id(cx, h)?;
            let (n, total_rows) = (bs, bs + bt);
            let f_id_s = cx.g.slice_rows(f_id, 0, n)?;
            let f_id_t = cx.g.slice_rows(f_id, n, total_rows)?;
            let h_s = cx.g.slice_rows(h, 0, n)?;
            let h_t = cx.g.slice_rows(h, n, total_rows)?;
            let f_ds = model.embed_dom(cx, h_s, Domain::Source)?;
            let f_dt = model.embed_dom(cx, h_t, Domain::Target)?;

            let p_s = model.c_s.probs(cx, f_id_s)?;
            let p_t = model.classifier(Domain::Target)?.probs(cx, f_id_t)?;
            let l_id = losses::identity_loss_graph(&mut cx.g, p_s, &s.labels, p_t, &t.labels)?;

            let d_dom = model.d_dom()?;
            let q_s = d_dom.prob(cx, f_ds)?;
            let q_t = d_dom.prob(cx, f_dt)?;
            let l_dom = losses::domain_disc_loss_graph(&mut cx.g, q_s, q_t)?;

            let f_dom = cx.g.concat_rows(&[f_ds, f_dt])?;
            let recon = model.decode(cx, f_id, f_dom)?;
            let r_s = cx.g.slice_rows(recon, 0, n)?;
            let r_t = cx.g.slice_rows(recon, n, total_rows)?;
            let l_r = losses::reconstruction_loss_graph(&mut cx.g, r_s, xs, r_t, xt)?;

            // The discriminator learns to tell domains apart from f_id; the
            // reversed gradient pushes the encoder the other way.
            let f_rev = grl(&mut cx.g, f_id, model.cfg.grl_lambda)?;
            let a = model.d_adv()?.prob(cx, f_rev)?;
            let a_s = cx.g.slice_rows(a, 0, n)?;
            let a_t = cx.g.slice_rows(a, n, total_rows)?;
            let l_adv = losses::adversarial_loss_graph(&mut cx.g, a_s, a_t, AdvRole::Discriminator)?;

            let mi_s = MiBatch::new(&cx.g, f_id_s, f_ds, rng)?;
            let mi_t = MiBatch::new(&cx.g, f_id_t, f_dt, rng)?;
            let l_mi = mi_loss(cx, model.t_theta()?, &mi_s, &mi_t, cfg.mi_grl_lambda)?;

            let w = &cfg.weights;
            let total = weighted_total(
                cx,
                l_id,
                &[(w.lambda_dom, l_dom), (w.lambda_adv, l_adv), (w.lambda_r, l_r), (w.lambda_mi, l_mi)],
            )?;
            let v = |var: Var| cx.g.value(var).item();
            let parts = LossParts {
                l_id: v(l_id),
                l_dom: v(l_dom),
                l_r: v(l_r),
                l_adv: v(l_adv),
                l_mi: v(l_mi),
            };
            Ok((total, parts))
        }
    }
}

/// One optimizer update. Returns the loss report and the pre-clip gradient norm.
pub fn train_step(
    model: &Model,
    cfg: &TrainConfig,
    state: &mut TrainState,
    batch: &StepBatch,
) -> Result<(LossReport, f64)> {
    let non_finite = |state: &TrainState| Error::NonFinite {
        step: state.step,
        last_checkpoint: state.last_checkpoint.clone(),
    };
    let (report, mut grads, bn) = {
        let mut cx = Ctx::new(&state.store, true);
        let (total, parts) = forward_losses(model, cfg, &mut cx, batch, &mut state.rng)?;
        let report = match combine(&parts, &cfg.weights) {
            Ok(r) => r,
            Err(Error::Numeric(msg)) => {
                log::error!("step {}: {msg}", state.step);
                return Err(non_finite(state));
            }
            Err(e) => return Err(e),
        };
        let grads = collect_grads(&cx.g.backward(total)?);
        (report, grads, cx.take_bn_updates())
    };
    let norm = if cfg.grad_clip > 0.0 {
        clip_global_norm(&mut grads, cfg.grad_clip)
    } else {
        global_norm(&grads)
    };
    if !norm.is_finite() {
        log::error!("step {}: gradient norm is {norm}", state.step);
        return Err(non_finite(state));
    }
    let lr = lr_schedule(state.epoch, cfg.lr);
    state.adam.step(&mut state.store, &grads, lr, |n| !n.starts_with(ADV_PREFIX));
    state.sgd.step(&mut state.store, &grads, cfg.adv_lr, |n| n.starts_with(ADV_PREFIX));
    Ctx::apply_bn_updates(&bn, &mut state.store);
    if !state.store.all_finite() {
        return Err(non_finite(state));
    }
    state.step += 1;
    Ok((report, norm))
}

/// Model shape implied by the data and the mode.
pub fn model_config_for(base: &ModelConfig, cfg: &TrainConfig, data: &TrainData) -> Result<ModelConfig> {
    let (classes_s, classes_t) = (
        TrainData::num_speakers(&data.source),
        TrainData::num_speakers(&data.target),
    );
    let mut m = base.clone();
    m.n_mels = data.n_mels()?;
    m.crop_frames = cfg.crop_frames;
    match cfg.mode {
        Mode::Baseline => {
            m.num_speakers_source = classes_s;
            m.num_speakers_target = 0;
        }
        // The baseline's single classifier is re-aimed at target speakers.
        Mode::Finetune => {
            m.num_speakers_source = classes_t;
            m.num_speakers_target = 0;
        }
        Mode::Deaan => {
            m.num_speakers_source = classes_s;
            m.num_speakers_target = classes_t;
        }
    }
    Ok(m)
}

/// Parameters to start from: fresh, or a baseline checkpoint with a
/// reinitialized classification head for fine-tuning.
pub fn initial_store(model: &Model, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    let mut fresh = model.init(rng);
    if cfg.init_checkpoint.is_empty() {
        if cfg.mode == Mode::Finetune {
            return Err(Error::Config("finetune mode needs train.init_checkpoint".into()));
        }
        return Ok(fresh);
    }
    let ck = ModelCheckpoint::load(Path::new(&cfg.init_checkpoint))?;
    if ck.arch != model.arch {
        return Err(Error::Config(format!(
            "{} holds a {:?} model, mode {} needs {:?}",
            cfg.init_checkpoint, ck.arch, cfg.mode, model.arch
        )));
    }
    let mut store = ck.store;
    if cfg.mode == Mode::Finetune {
        let head = model.classifier_prefix(Domain::Target);
        store.remove_prefix(head);
        for (k, v) in std::mem::take(&mut fresh.params) {
            if k.starts_with(head) {
                store.params.insert(k, v);
            }
        }
    }
    crate::checkpoint::check_against(&model.init(&mut ChaCha8Rng::seed_from_u64(0)), &store)?;
    Ok(store)
}

fn crop_batch(
    samples: &[Sample],
    idx: &[usize],
    len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LabelledBatch> {
    let mut chunks = Vec::with_capacity(idx.len());
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        chunks.push(random_crop(&samples[i].features, len, rng)?.chunk);
        labels.push(samples[i].speaker);
    }
    LabelledBatch::from_chunks(&chunks, labels)
}

fn shortest(samples: &[Sample]) -> usize {
    samples.iter().map(|s| s.features.frames()).min().unwrap_or(0)
}

/// Result of [`run`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: u64,
    pub history: Vec<StepRecord>,
    pub store: ParamStore,
}

/// Full training run: per-epoch checkpoints `epoch-NNN.ckpt`, a final
/// `model.ckpt`, and a JSON-lines loss log `train.jsonl` in `out_dir`.
pub fn run(
    model_base: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_s, train_t) = match cfg.mode {
        Mode::Baseline => (&data.source[..], &[][..]),
        Mode::Finetune => (&[][..], &data.target[..]),
        Mode::Deaan => (&data.source[..], &data.target[..]),
    };
    let needed = |name: &str, v: &[Sample]| {
        if v.len() < cfg.batch_size {
            Err(Error::Data(format!(
                "{name} domain has {} utterances, fewer than one batch of {}",
                v.len(),
                cfg.batch_size
            )))
        } else {
            Ok(())
        }
    };
    let steps_per_epoch = match cfg.mode {
        Mode::Baseline => {
            needed("source", train_s)?;
            train_s.len() / cfg.batch_size
        }
        Mode::Finetune => {
            needed("target", train_t)?;
            train_t.len() / cfg.batch_size
        }
        Mode::Deaan => {
            needed("source", train_s)?;
            needed("target", train_t)?;
            train_s.len().min(train_t.len()) / cfg.batch_size
        }
    } as u64;

    let model_cfg = model_config_for(model_base, cfg, data)?;
    let model = Model::new(&model_cfg, cfg.mode.architecture())?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let store = initial_store(&model, cfg, &mut init_rng)?;
    let mut state = TrainState::new(store, cfg, ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a));
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let min_frames = model.backbone.min_frames();
    let variable_crop = cfg.mode != Mode::Deaan;
    let crop_hi = if variable_crop {
        let s = shortest(if cfg.mode == Mode::Baseline { train_s } else { train_t });
        let hi = cfg.crop_max.min(s);
        if hi < cfg.crop_min {
            log::warn!("shortest utterance has {s} frames, below crop_min {}; using {s}-frame crops", cfg.crop_min);
        }
        hi
    } else {
        cfg.crop_frames
    };
    let crop_lo = if variable_crop { cfg.crop_min.min(crop_hi) } else { cfg.crop_frames };
    if crop_lo < min_frames {
        return Err(Error::Length(format!(
            "crops of {crop_lo} frames are shorter than the backbone minimum {min_frames}"
        )));
    }

    let budget = if cfg.max_steps > 0 {
        (cfg.epochs * steps_per_epoch).min(cfg.max_steps)
    } else {
        cfg.epochs * steps_per_epoch
    };
    let log_path = out_dir.join("train.jsonl");
    let mut history = Vec::with_capacity(budget as usize);
    let mut log_text = String::new();
    let arch = model.arch;
    let save = |state: &TrainState, path: &Path| -> Result<()> {
        ModelCheckpoint {
            config: model_cfg.clone(),
            arch,
            epoch: state.epoch,
            step: state.step,
            rng: RngState::capture(&state.rng),
            store: state.store.clone(),
        }
        .save(path)
    };

    let mut order_s: Vec<usize> = (0..train_s.len()).collect();
    let mut order_t: Vec<usize> = (0..train_t.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        order_s.shuffle(&mut state.rng);
        order_t.shuffle(&mut state.rng);
        for k in 0..steps_per_epoch as usize {
            if state.step >= budget {
                break 'epochs;
            }
            let len = if crop_lo == crop_hi { crop_lo } else { state.rng.random_range(crop_lo..=crop_hi) };
            let range = k * cfg.batch_size..(k + 1) * cfg.batch_size;
            let mut batch = StepBatch::default();
            if !train_s.is_empty() {
                batch.source = Some(crop_batch(train_s, &order_s[range.clone()], len, &mut state.rng)?);
            }
            if !train_t.is_empty() {
                batch.target = Some(crop_batch(train_t, &order_t[range], len, &mut state.rng)?);
            }
            let lr = lr_schedule(epoch, cfg.lr);
            let (loss, grad_norm) = train_step(&model, cfg, &mut state, &batch)?;
            let rec = StepRecord {
                epoch,
                step: state.step,
                lr,
                grad_norm,
                loss,
            };
            log_text.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            log_text.push('\n');
            if state.step % 50 == 0 || state.step == 1 {
                log::info!(
                    "{} epoch {epoch} step {} total {:.4} l_id {:.4}",
                    cfg.mode,
                    state.step,
                    loss.total,
                    loss.l_id
                );
            }
            history.push(rec);
        }
        let last = epoch + 1 == cfg.epochs || state.step >= budget;
        if (epoch + 1) % cfg.checkpoint_every == 0 || last {
            let path = out_dir.join(format!("epoch-{:03}.ckpt", epoch + 1));
            save(&state, &path)?;
            state.last_checkpoint = Some(path);
        }
        write_atomic(&log_path, log_text.as_bytes())?;
        if last {
            break;
        }
    }
    let final_path = out_dir.join("model.ckpt");
    save(&state, &final_path)?;
    write_atomic(&log_path, log_text.as_bytes())?;
    Ok(TrainOutcome {
        checkpoint: final_path,
        log: log_path,
        steps: state.step,
        history,
        store: state.store,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize, SynthConfig};

    fn micro_data(speakers: usize, utts: usize, frames: usize) -> TrainData {
        let corpus = synthesize(&SynthConfig {
            num_speakers_source: speakers,
            num_speakers_target: speakers,
            utts_per_speaker: utts,
            frames_per_utt: frames,
            n_mels: 16,
            crop_frames: 128,
            eval_speakers: 0,
            ..SynthConfig::default()
        })
        .unwrap();
        let to = |v: Vec<crate::corpus::synth::Utterance>| {
            v.into_iter()
                .map(|u| Sample {
                    speaker: u.record.speaker,
                    features: u.features,
                })
                .collect()
        };
        TrainData {
            source: to(corpus.source),
            target: to(corpus.target),
        }
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            d_id: 16,
            d_dom: 16,
            ..ModelConfig::default()
        }
    }

    fn deaan_cfg() -> TrainConfig {
        TrainConfig {
            mode: Mode::Deaan,
            crop_frames: 128,
            batch_size: 4,
            lr: 1e-3,
            adv_lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn first_batch(data: &TrainData, cfg: &TrainConfig, rows: usize) -> StepBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let idx: Vec<usize> = (0..rows).collect();
        StepBatch {
            source: Some(crop_batch(&data.source, &idx, cfg.crop_frames, &mut rng).unwrap()),
            target: Some(crop_batch(&data.target, &idx, cfg.crop_frames, &mut rng).unwrap()),
        }
    }

    fn fresh_state(model: &Model, cfg: &TrainConfig) -> TrainState {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let store = model.init(&mut rng);
        TrainState::new(store, cfg, ChaCha8Rng::seed_from_u64(9))
    }

    #[test]
    fn one_step_moves_every_component() {
        let data = micro_data(2, 4, 160);
        let cfg = deaan_cfg();
        let mcfg = model_config_for(&small_model(), &cfg, &data).unwrap();
        let model = Model::new(&mcfg, Architecture::Deaan).unwrap();
        let mut state = fresh_state(&model, &cfg);
        let before = state.store.clone();
        train_step(&model, &cfg, &mut state, &first_batch(&data, &cfg, 4)).unwrap();
        for prefix in ["g.", "e_id.", "e_ds.", "e_dt.", "r.", "c_s.", "c_t.", "d_dom.", "d_adv.", "t_theta."] {
            let moved = before
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .any(|(k, v)| state.store.params[k] != *v);
            assert!(moved, "no parameter under `{prefix}` changed");
        }
    }

    #[test]
    fn steps_are_bit_reproducible() {
        let data = micro_data(2, 4, 160);
        let cfg = deaan_cfg();
        let mcfg = model_config_for(&small_model(), &cfg, &data).unwrap();
        let model = Model::new(&mcfg, Architecture::Deaan).unwrap();
        let batch = first_batch(&data, &cfg, 4);
        let run = || {
            let mut state = fresh_state(&model, &cfg);
            for _ in 0..2 {
                train_step(&model, &cfg, &mut state, &batch).unwrap();
            }
            state.store
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn full_model_rejects_source_only_batch() {
        let data = micro_data(2, 4, 160);
        let cfg = deaan_cfg();
        let mcfg = model_config_for(&small_model(), &cfg, &data).unwrap();
        let model = Model::new(&mcfg, Architecture::Deaan).unwrap();
        let mut state = fresh_state(&model, &cfg);
        let mut batch = first_batch(&data, &cfg, 4);
        batch.target = None;
        assert!(matches!(train_step(&model, &cfg, &mut state, &batch), Err(Error::Input(_))));
    }

    #[test]
    fn lr_schedule_is_non_increasing() {
        let mut prev = f64::INFINITY;
        for e in 0..100 {
            let lr = lr_schedule(e, 1e-4);
            assert!(lr <= prev);
            prev = lr;
        }
        assert_eq!(lr_schedule(4, 1e-4), 1e-4);
    }

    #[test]
    fn finetune_without_checkpoint_is_a_config_error() {
        let cfg = TrainConfig {
            mode: Mode::Finetune,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn baseline_checkpoint_has_no_adversarial_parts_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let data = micro_data(2, 4, 160);
        let cfg = TrainConfig {
            mode: Mode::Baseline,
            crop_min: 100,
            crop_max: 140,
            batch_size: 4,
            epochs: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let out = run(&small_model(), &cfg, &data, dir.path()).unwrap();
        assert_eq!(out.steps, 4);
        let ck = ModelCheckpoint::load(&out.checkpoint).unwrap();
        assert_eq!(ck.arch, Architecture::Baseline);
        for absent in ["d_adv.", "t_theta.", "d_dom.", "r."] {
            assert!(!ck.store.has_prefix(absent), "baseline checkpoint contains `{absent}`");
        }
        let model = ck.model().unwrap();
        let x = first_batch(&data, &deaan_cfg(), 3).source.unwrap().x;
        let a = model.embed(&out.store, x.clone()).unwrap();
        let b = model.embed(&ck.store, x).unwrap();
        assert_eq!(a, b);
        let log = std::fs::read_to_string(&out.log).unwrap();
        assert_eq!(log.lines().count(), 4);
        assert!(log.lines().next().unwrap().contains("\"l_MI\""));
    }

    #[test]
    fn finetune_replaces_only_the_head() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = micro_data(2, 4, 160);
        // Give the target domain a different speaker count than the source.
        data.target.retain(|s| s.speaker == 0);
        data.target.extend(micro_data(3, 2, 160).target.into_iter().filter(|s| s.speaker == 2));
        let base_cfg = TrainConfig {
            mode: Mode::Baseline,
            crop_min: 128,
            crop_max: 128,
            batch_size: 4,
            epochs: 1,
            ..TrainConfig::default()
        };
        let base = run(&small_model(), &base_cfg, &data, &dir.path().join("base")).unwrap();
        let ft_cfg = TrainConfig {
            mode: Mode::Finetune,
            init_checkpoint: base.checkpoint.display().to_string(),
            ..base_cfg
        };
        let model_cfg = model_config_for(&small_model(), &ft_cfg, &data).unwrap();
        assert_eq!(model_cfg.num_speakers_source, 3);
        let model = Model::new(&model_cfg, Architecture::Baseline).unwrap();
        let init = initial_store(&model, &ft_cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let base_ck = ModelCheckpoint::load(&base.checkpoint).unwrap();
        for (k, v) in &init.params {
            if k.starts_with("cls.") {
                assert_ne!(base_ck.store.params[k].shape(), v.shape());
            } else {
                assert_eq!(&base_ck.store.params[k], v, "{k}");
            }
        }
        run(&small_model(), &ft_cfg, &data, &dir.path().join("ft")).unwrap();
    }
}
