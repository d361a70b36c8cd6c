//! File-level pipeline stages shared by the CLI and the end-to-end
//! experiment: loading corpora, embedding extraction, embedding archives,
//! back-end fitting, scoring, and the baseline-versus-full-model comparison.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendModel, EmbeddingSet};
use crate::checkpoint::{load_backend, save_backend, ModelCheckpoint};
use crate::config::Config;
use crate::corpus::io::{load_features, read_featmat, write_atomic, write_featmat};
use crate::corpus::{generate_corpus, read_manifest, Domain, FeatureChunk, Manifest};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, make_trials, probe_accuracy_with, score_set, MetricsReport, ProbeTarget, TrialList};
use crate::model::{Architecture, Model};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::{self, Mode, Sample, TrainData};

pub const EMBEDDINGS_FILE: &str = "embeddings.feat";
pub const INDEX_FILE: &str = "index.tsv";

fn samples(manifest: &Manifest) -> Result<Vec<Sample>> {
    let chunks = load_features(manifest)?;
    Ok(manifest
        .records
        .iter()
        .zip(chunks)
        .map(|(r, features)| Sample {
            features,
            speaker: r.speaker,
        })
        .collect())
}

pub fn load_train_data(source: &Path, target: &Path) -> Result<TrainData> {
    Ok(TrainData {
        source: samples(&read_manifest(source)?)?,
        target: samples(&read_manifest(target)?)?,
    })
}

/// Repeats an utterance from its first frame until it is `min` frames long.
fn wrap_pad(chunk: FeatureChunk, min: usize) -> FeatureChunk {
    if chunk.frames() >= min {
        chunk
    } else {
        log::warn!("{}-frame utterance wrap-padded to {min} frames", chunk.frames());
        chunk.window_wrapped(0, min)
    }
}

/// One eval-mode embedding per utterance from the full-length features:
/// `f_id` for the full model, the pooled embedding of the baseline.
pub fn extract(model: &Model, store: &ParamStore, manifest: &Manifest) -> Result<EmbeddingSet> {
    let chunks = load_features(manifest)?;
    let min = model.backbone.min_frames();
    let rows: Vec<Vec<f64>> = chunks
        .into_par_iter()
        .map(|c| {
            let c = wrap_pad(c, min);
            let x = Tensor::new(
                vec![1, c.frames(), c.bins()],
                c.data().iter().map(|&v| v as f64).collect(),
            )?;
            Ok(model.embed(store, x)?.into_data())
        })
        .collect::<Result<_>>()?;
    let r = &manifest.records;
    EmbeddingSet::new(
        rows,
        r.iter().map(|r| r.speaker).collect(),
        r.iter().map(|r| r.utt_id.clone()).collect(),
        r.iter().map(|r| r.domain).collect(),
    )
}

pub fn extract_from_checkpoint(checkpoint: &Path, manifest: &Path) -> Result<EmbeddingSet> {
    let ck = ModelCheckpoint::load(checkpoint)?;
    let manifest = read_manifest(manifest)?;
    if let Some(r) = manifest.records.first() {
        let bins = load_features(&Manifest {
            root: manifest.root.clone(),
            records: vec![r.clone()],
        })?[0]
            .bins();
        if bins != ck.config.n_mels {
            return Err(Error::Config(format!(
                "checkpoint expects {} mel bins, features have {bins}",
                ck.config.n_mels
            )));
        }
    }
    extract(&ck.model()?, &ck.store, &manifest)
}

/// Writes `embeddings.feat` (row per utterance) and `index.tsv`
/// (`utt_id  speaker  domain`) into `dir`.
pub fn write_archive(dir: &Path, set: &EmbeddingSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data: Vec<f32> = set.rows.iter().flatten().map(|&v| v as f32).collect();
    write_featmat(&dir.join(EMBEDDINGS_FILE), set.len(), set.dim(), &data)?;
    let mut index = String::new();
    for i in 0..set.len() {
        index.push_str(&format!("{}\t{}\t{}\n", set.utt_ids[i], set.labels[i], set.domains[i]));
    }
    write_atomic(&dir.join(INDEX_FILE), index.as_bytes())
}

pub fn read_archive(dir: &Path) -> Result<EmbeddingSet> {
    let feat = dir.join(EMBEDDINGS_FILE);
    let (rows, cols, data) = read_featmat(&feat)?;
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    let mut domains = Vec::new();
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let bad = |m: &str| Error::format(&index_path, format!("line {}: {m}", i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad("expected utt_id, speaker, domain"));
        }
        ids.push(f[0].to_string());
        labels.push(f[1].parse().map_err(|_| bad("speaker is not an integer"))?);
        domains.push(f[2].parse::<Domain>().map_err(|e| bad(&e.to_string()))?);
    }
    if ids.len() != rows {
        return Err(Error::format(
            &index_path,
            format!("{} index lines for {rows} embeddings", ids.len()),
        ));
    }
    let rows = data
        .chunks_exact(cols.max(1))
        .take(rows)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();
    EmbeddingSet::new(rows, labels, ids, domains)
}

/// Fits LDA + PLDA with the LDA size clipped to what the data supports.
pub fn backend_fit(train: &EmbeddingSet, cfg: &Config) -> Result<BackendModel> {
    let classes = train.num_classes();
    if classes < 2 {
        return Err(Error::Data("back-end training needs at least two speakers".into()));
    }
    let p = cfg.backend.lda_dim.min(train.dim().saturating_sub(1)).min(classes - 1).max(1);
    let (model, ll) = BackendModel::fit(train, p, &cfg.backend.em())?;
    log::info!(
        "back-end: {} embeddings, {classes} speakers, LDA {} -> {p}, {} EM iterations",
        train.len(),
        train.dim(),
        ll.len()
    );
    Ok(model)
}

/// Joins two embedding sets, offsetting the second one's speaker labels so
/// the two label spaces stay disjoint.
pub fn concat_sets(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<EmbeddingSet> {
    let offset = a.num_classes();
    EmbeddingSet::new(
        a.rows.iter().chain(&b.rows).cloned().collect(),
        a.labels.iter().copied().chain(b.labels.iter().map(|l| l + offset)).collect(),
        a.utt_ids.iter().chain(&b.utt_ids).cloned().collect(),
        a.domains.iter().chain(&b.domains).copied().collect(),
    )
}

pub fn score_trials(model: &BackendModel, set: &EmbeddingSet, trials: &TrialList) -> Result<Vec<(String, String, f64)>> {
    let index: std::collections::HashMap<&str, usize> =
        set.utt_ids.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let row = |id: &str| {
        index
            .get(id)
            .map(|&i| &set.rows[i])
            .ok_or_else(|| Error::Data(format!("trial utterance `{id}` has no embedding")))
    };
    trials
        .rows
        .par_iter()
        .map(|t| Ok((t.enroll.clone(), t.test.clone(), model.score(row(&t.enroll)?, row(&t.test)?)?)))
        .collect()
}

/// Tab-separated `enroll test score` lines, scores with 6 decimals.
pub fn format_scores(scores: &[(String, String, f64)]) -> String {
    scores.iter().map(|(e, t, s)| format!("{e}\t{t}\t{s:.6}\n")).collect()
}

pub fn parse_scores(path: &Path, text: &str) -> Result<Vec<(String, String, f64)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = |m: &str| Error::format(path, format!("line {}: {m}", i + 1));
            if f.len() != 3 {
                return Err(bad("expected tab-separated `enroll test score`"));
            }
            let s: f64 = f[2].trim().parse().map_err(|_| bad("score is not a number"))?;
            Ok((f[0].to_string(), f[1].to_string(), s))
        })
        .collect()
}

pub fn save_backend_model(path: &Path, model: &BackendModel) -> Result<()> {
    save_backend(path, model)
}

pub fn load_backend_model(path: &Path) -> Result<BackendModel> {
    load_backend(path)
}

/// Scores of one system on the shared evaluation material.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub steps: u64,
    pub metrics: MetricsReport,
    pub speaker_probe: f64,
    pub domain_probe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentChecks {
    pub eer_ratio: f64,
    pub domain_probe_drop: f64,
    pub speaker_probe_change: f64,
    pub eer_ok: bool,
    pub domain_probe_ok: bool,
    pub speaker_probe_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub baseline: SystemReport,
    pub deaan: SystemReport,
    pub checks: ExperimentChecks,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.checks.eer_ok && self.checks.domain_probe_ok && self.checks.speaker_probe_ok
    }
}

/// Paths produced by [`experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentPaths {
    pub corpus: PathBuf,
    pub report: PathBuf,
}

/// Corpus material shared by the systems of one experiment.
pub struct ExperimentData {
    pub train: TrainData,
    pub source: Manifest,
    pub target: Manifest,
    pub eval: Manifest,
    pub trials: TrialList,
}

impl ExperimentData {
    /// Reads a corpus directory written by `generate_corpus`; trials come
    /// from the target-domain eval utterances.
    pub fn load(corpus: &Path, cfg: &Config) -> Result<Self> {
        let source = read_manifest(&corpus.join("source.tsv"))?;
        let target = read_manifest(&corpus.join("target.tsv"))?;
        let eval = read_manifest(&corpus.join("eval.tsv"))?;
        let train = TrainData {
            source: samples(&source)?,
            target: samples(&target)?,
        };
        let target_eval: Vec<_> = eval.records.iter().filter(|r| r.domain == Domain::Target).cloned().collect();
        let trials = make_trials(&target_eval, cfg.trials.n_target, cfg.trials.n_nontarget, cfg.trials.seed)?;
        Ok(Self {
            train,
            source,
            target,
            eval,
            trials,
        })
    }
}

/// Trains one system in `work/<mode>` and scores it on the shared material.
pub fn run_system(cfg: &Config, mode: Mode, d: &ExperimentData, work: &Path) -> Result<SystemReport> {
    let (data, source, target, eval, trials) = (&d.train, &d.source, &d.target, &d.eval, &d.trials);
    let mut train_cfg = cfg.train.clone();
    train_cfg.mode = mode;
    let out = trainer::run(&cfg.model.base(), &train_cfg, data, &work.join(mode.to_string()))?;
    let ck = ModelCheckpoint::load(&out.checkpoint)?;
    let model = ck.model()?;
    let eval_set = extract(&model, &ck.store, eval)?;
    let backend_train = match model.arch {
        Architecture::Baseline => extract(&model, &ck.store, source)?,
        Architecture::Deaan => concat_sets(&extract(&model, &ck.store, source)?, &extract(&model, &ck.store, target)?)?,
    };
    let backend = backend_fit(&backend_train, cfg)?;
    let scores = score_trials(&backend, &eval_set, trials)?;
    let metrics = evaluate(&score_set(trials, &scores)?, &cfg.dcf)?;
    let opts = cfg.probe.options();
    let speaker_probe = probe_accuracy_with(&eval_set, ProbeTarget::Speaker, cfg.probe.seed, &opts)?;
    let domain_probe = probe_accuracy_with(&eval_set, ProbeTarget::Domain, cfg.probe.seed, &opts)?;
    log::info!(
        "{mode}: EER {:.4} minDCF {:.4} speaker probe {:.3} domain probe {:.3}",
        metrics.eer,
        metrics.min_dcf,
        speaker_probe,
        domain_probe
    );
    Ok(SystemReport {
        steps: out.steps,
        metrics,
        speaker_probe,
        domain_probe,
    })
}

/// Synthesizes the corpus, trains the CE baseline (source only) and the
/// full model (both domains) on the same step budget, and compares them on
/// target-domain trials of held-out speakers plus linear probes on the
/// held-out embeddings of both domains. Writes `report.json` into `work`.
pub fn experiment(cfg: &Config, work: &Path) -> Result<(ExperimentReport, ExperimentPaths)> {
    if cfg.synth.eval_speakers < 2 {
        return Err(Error::Config("the experiment needs synth.eval_speakers >= 2".into()));
    }
    let corpus = work.join("corpus");
    generate_corpus(&cfg.synth, &corpus)?;
    let data = ExperimentData::load(&corpus, cfg)?;
    let baseline = run_system(cfg, Mode::Baseline, &data, work)?;
    let deaan = run_system(cfg, Mode::Deaan, &data, work)?;
    let eer_ratio = if baseline.metrics.eer > 0.0 {
        deaan.metrics.eer / baseline.metrics.eer
    } else if deaan.metrics.eer == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let domain_probe_drop = baseline.domain_probe - deaan.domain_probe;
    let speaker_probe_change = deaan.speaker_probe - baseline.speaker_probe;
    let checks = ExperimentChecks {
        eer_ratio,
        domain_probe_drop,
        speaker_probe_change,
        eer_ok: eer_ratio <= 0.9,
        domain_probe_ok: domain_probe_drop >= 0.10,
        // An improvement in speaker separability is not a failure.
        speaker_probe_ok: speaker_probe_change >= -0.05,
    };
    let report = ExperimentReport { baseline, deaan, checks };
    let report_path = work.join("report.json");
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    write_atomic(&report_path, json.as_bytes())?;
    Ok((
        report,
        ExperimentPaths {
            corpus,
            report: report_path,
        },
    ))
}
