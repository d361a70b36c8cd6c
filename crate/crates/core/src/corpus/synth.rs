//! Synthetic two-domain corpus with known speaker and domain factors.
//!
//! Every frame is `speaker envelope + session offset + content + noise` in
//! log-mel space. Speaker envelopes are drawn from a low-dimensional latent
//! space shared by all speakers, so embeddings learned on one speaker set
//! transfer to unseen speakers. Target-domain utterances additionally pass
//! through a fixed channel: spectral smearing, a tilt/offset, soft
//! compression against a noise floor (the log-domain effect of additive
//! noise), and extra noise. All channel terms vanish at `domain_shift = 0`.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::{write_atomic, write_chunk, write_manifest};
use super::{Domain, FeatureChunk, UtteranceRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_speakers_source: usize,
    pub num_speakers_target: usize,
    pub utts_per_speaker: usize,
    pub frames_per_utt: usize,
    /// Strength of the target-domain channel.
    pub domain_shift: f64,
    pub noise_scale: f64,
    pub seed: u64,
    pub n_mels: usize,
    /// Crop length training will request; `frames_per_utt` must cover it.
    pub crop_frames: usize,
    /// Held-out speakers recorded in both domains (0 disables the eval set).
    pub eval_speakers: usize,
    pub eval_utts_per_speaker: usize,
    /// Spread of speaker envelopes relative to content variation.
    pub speaker_scale: f64,
    pub content_scale: f64,
    pub session_scale: f64,
    pub speaker_latent_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_speakers_source: 8,
            num_speakers_target: 8,
            utts_per_speaker: 50,
            frames_per_utt: 400,
            domain_shift: 1.0,
            noise_scale: 0.5,
            seed: 7,
            n_mels: 64,
            crop_frames: 384,
            eval_speakers: 8,
            eval_utts_per_speaker: 20,
            speaker_scale: 0.6,
            content_scale: 2.0,
            session_scale: 0.5,
            speaker_latent_dim: 6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_speakers_source == 0 || self.num_speakers_target == 0 {
            return fail("both domains need at least one speaker");
        }
        if self.utts_per_speaker == 0 {
            return fail("utts_per_speaker must be positive");
        }
        if self.n_mels == 0 || self.speaker_latent_dim == 0 {
            return fail("n_mels and speaker_latent_dim must be positive");
        }
        if self.frames_per_utt < self.crop_frames.max(1) {
            return Err(Error::Config(format!(
                "frames_per_utt ({}) is shorter than the training crop ({})",
                self.frames_per_utt, self.crop_frames
            )));
        }
        if self.eval_speakers > 0 && self.eval_utts_per_speaker == 0 {
            return fail("eval_utts_per_speaker must be positive when eval speakers are requested");
        }
        let reals = [
            self.domain_shift,
            self.noise_scale,
            self.speaker_scale,
            self.content_scale,
            self.session_scale,
        ];
        if reals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return fail("scales and domain_shift must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub record: UtteranceRecord,
    pub features: FeatureChunk,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub source: Vec<Utterance>,
    pub target: Vec<Utterance>,
    /// Held-out speakers, each present in both domains.
    pub eval: Vec<Utterance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestCount {
    pub manifest: String,
    pub utterances: usize,
    pub speakers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub source: ManifestCount,
    pub target: ManifestCount,
    pub eval: Option<ManifestCount>,
    pub config: SynthConfig,
}

/// FNV-1a over the seed and a label; the per-item sub-seed.
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(label.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn sub_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, label))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Unit-RMS random vector smoothed across frequency.
fn smooth_vector(rng: &mut ChaCha8Rng, n: usize, width: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..n).map(|_| gaussian(rng)).collect();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let mut wsum = 0.0;
        for (j, w) in white.iter().enumerate() {
            let k = (-((i as f64 - j as f64).powi(2)) / (2.0 * width * width)).exp();
            *o += k * w;
            wsum += k;
        }
        *o /= wsum;
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
    out.iter_mut().for_each(|v| *v /= rms);
    out
}

struct Channel {
    /// Row-major `n_mels x n_mels`.
    mix: Vec<f64>,
    offset: Vec<f64>,
    compress: f64,
    floor: f64,
    extra_noise: f64,
}

struct Structure {
    base: Vec<f64>,
    speaker_basis: Vec<Vec<f64>>,
    content_basis: Vec<Vec<f64>>,
    channel: Channel,
}

const CONTENT_DIM: usize = 10;
const CONTENT_AR: f64 = 0.9;

impl Structure {
    fn new(cfg: &SynthConfig) -> Self {
        let f = cfg.n_mels;
        let mut rng = sub_rng(cfg.seed, "structure");
        // Spectral envelope falling with frequency.
        let base: Vec<f64> = (0..f)
            .map(|i| 2.0 - 3.0 * i as f64 / f as f64)
            .zip(smooth_vector(&mut rng, f, 4.0))
            .map(|(a, b)| a + 0.3 * b)
            .collect();
        let speaker_basis = (0..cfg.speaker_latent_dim)
            .map(|_| smooth_vector(&mut rng, f, 2.0))
            .collect();
        let content_basis = (0..CONTENT_DIM)
            .map(|_| smooth_vector(&mut rng, f, 3.0))
            .collect();

        let s = cfg.domain_shift;
        let a = s.min(1.0);
        let mut mix = vec![0.0; f * f];
        for i in 0..f {
            let row: Vec<f64> = (0..f)
                .map(|j| (-((i as f64 - j as f64).powi(2)) / 8.0).exp())
                .collect();
            let total: f64 = row.iter().sum();
            for j in 0..f {
                let ident = if i == j { 1.0 } else { 0.0 };
                mix[i * f + j] = (1.0 - 0.5 * a) * ident + 0.5 * a * row[j] / total;
            }
        }
        let wobble = smooth_vector(&mut rng, f, 3.0);
        let offset = (0..f)
            .map(|i| s * ((1.0 - 2.0 * i as f64 / (f - 1).max(1) as f64) + 0.5 * wobble[i]))
            .collect();
        let floor = base.iter().sum::<f64>() / f as f64;
        Self {
            base,
            speaker_basis,
            content_basis,
            channel: Channel {
                mix,
                offset,
                compress: a,
                floor,
                extra_noise: cfg.noise_scale * s,
            },
        }
    }

    fn speaker_envelope(&self, cfg: &SynthConfig, tag: &str, index: usize) -> Vec<f64> {
        let mut rng = sub_rng(cfg.seed, &format!("speaker/{tag}/{index}"));
        let k = self.speaker_basis.len();
        let z: Vec<f64> = (0..k).map(|_| gaussian(&mut rng)).collect();
        let scale = cfg.speaker_scale / (k as f64).sqrt();
        let mut env = self.base.clone();
        for (zi, basis) in z.iter().zip(&self.speaker_basis) {
            for (e, b) in env.iter_mut().zip(basis) {
                *e += scale * zi * b;
            }
        }
        env
    }

    fn utterance(&self, cfg: &SynthConfig, envelope: &[f64], utt_id: &str, domain: Domain) -> Vec<f64> {
        let f = cfg.n_mels;
        let t = cfg.frames_per_utt;
        let mut rng = sub_rng(cfg.seed, utt_id);
        let session: Vec<f64> = smooth_vector(&mut rng, f, 3.0)
            .into_iter()
            .map(|v| v * cfg.session_scale)
            .collect();
        let mut content = vec![0.0; CONTENT_DIM];
        for c in content.iter_mut() {
            *c = gaussian(&mut rng);
        }
        let innov = (1.0 - CONTENT_AR * CONTENT_AR).sqrt();
        let cscale = cfg.content_scale / (CONTENT_DIM as f64).sqrt();
        let mut out = Vec::with_capacity(t * f);
        let mut frame = vec![0.0; f];
        for _ in 0..t {
            for c in content.iter_mut() {
                *c = CONTENT_AR * *c + innov * gaussian(&mut rng);
            }
            for j in 0..f {
                frame[j] = envelope[j] + session[j] + cfg.noise_scale * gaussian(&mut rng);
            }
            for (c, basis) in content.iter().zip(&self.content_basis) {
                for (x, b) in frame.iter_mut().zip(basis) {
                    *x += cscale * c * b;
                }
            }
            if domain == Domain::Target {
                self.apply_channel(&mut frame, &mut rng);
            }
            out.extend_from_slice(&frame);
        }
        out
    }

    fn apply_channel(&self, frame: &mut [f64], rng: &mut ChaCha8Rng) {
        let ch = &self.channel;
        let f = frame.len();
        let mixed: Vec<f64> = (0..f)
            .map(|i| {
                let row = &ch.mix[i * f..(i + 1) * f];
                row.iter().zip(frame.iter()).map(|(m, x)| m * x).sum::<f64>() + ch.offset[i]
            })
            .collect();
        for (x, y) in frame.iter_mut().zip(mixed) {
            // log(e^y + e^floor), blended in by the compression strength.
            let noisy = y.max(ch.floor) + (-(y - ch.floor).abs()).exp().ln_1p();
            *x = (1.0 - ch.compress) * y + ch.compress * noisy + ch.extra_noise * gaussian(rng);
        }
    }
}

fn make_set(
    cfg: &SynthConfig,
    structure: &Structure,
    speakers: &[(String, Vec<f64>)],
    utts: usize,
    prefix: &str,
    domain: Domain,
) -> Result<Vec<Utterance>> {
    let jobs: Vec<(usize, usize)> = (0..speakers.len())
        .flat_map(|s| (0..utts).map(move |u| (s, u)))
        .collect();
    jobs.par_iter()
        .map(|&(s, u)| {
            let utt_id = format!("{prefix}-s{s:03}-u{u:03}");
            let data = structure.utterance(cfg, &speakers[s].1, &utt_id, domain);
            let features = FeatureChunk::from_f64(cfg.frames_per_utt, cfg.n_mels, &data)?;
            Ok(Utterance {
                record: UtteranceRecord {
                    feature_path: PathBuf::from(format!("feats/{utt_id}.feat")),
                    utt_id,
                    speaker: s,
                    domain,
                    num_frames: cfg.frames_per_utt,
                },
                features,
            })
        })
        .collect()
}

/// Builds the corpus in memory. Deterministic in `cfg`.
pub fn synthesize(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let structure = Structure::new(cfg);
    let speakers = |tag: &str, n: usize| -> Vec<(String, Vec<f64>)> {
        (0..n)
            .map(|i| (format!("{tag}{i}"), structure.speaker_envelope(cfg, tag, i)))
            .collect()
    };
    let src = speakers("src", cfg.num_speakers_source);
    let tgt = speakers("tgt", cfg.num_speakers_target);
    let ev = speakers("eval", cfg.eval_speakers);
    let source = make_set(cfg, &structure, &src, cfg.utts_per_speaker, "src", Domain::Source)?;
    let target = make_set(cfg, &structure, &tgt, cfg.utts_per_speaker, "tgt", Domain::Target)?;
    let mut eval = make_set(cfg, &structure, &ev, cfg.eval_utts_per_speaker, "evs", Domain::Source)?;
    eval.extend(make_set(
        cfg,
        &structure,
        &ev,
        cfg.eval_utts_per_speaker,
        "evt",
        Domain::Target,
    )?);
    Ok(SynthCorpus {
        source,
        target,
        eval,
    })
}

fn write_set(out_dir: &Path, name: &str, set: &[Utterance]) -> Result<ManifestCount> {
    for u in set {
        write_chunk(&out_dir.join(&u.record.feature_path), &u.features)?;
    }
    let records: Vec<UtteranceRecord> = set.iter().map(|u| u.record.clone()).collect();
    let manifest = format!("{name}.tsv");
    write_manifest(&out_dir.join(&manifest), &records)?;
    Ok(ManifestCount {
        manifest,
        utterances: set.len(),
        speakers: records.iter().map(|r| r.speaker + 1).max().unwrap_or(0),
    })
}

/// Synthesizes and writes `source.tsv`, `target.tsv`, optionally `eval.tsv`,
/// their feature files under `feats/`, and a `corpus.json` summary.
pub fn generate_corpus(cfg: &SynthConfig, out_dir: &Path) -> Result<CorpusSummary> {
    let corpus = synthesize(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let source = write_set(out_dir, "source", &corpus.source)?;
    let target = write_set(out_dir, "target", &corpus.target)?;
    let eval = if corpus.eval.is_empty() {
        None
    } else {
        Some(write_set(out_dir, "eval", &corpus.eval)?)
    };
    let summary = CorpusSummary {
        source,
        target,
        eval,
        config: cfg.clone(),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_atomic(&out_dir.join("corpus.json"), json.as_bytes())?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_speakers_source: 2,
            num_speakers_target: 3,
            utts_per_speaker: 2,
            frames_per_utt: 20,
            crop_frames: 16,
            n_mels: 8,
            eval_speakers: 1,
            eval_utts_per_speaker: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn counts_and_labels() {
        let c = synthesize(&small()).unwrap();
        assert_eq!(c.source.len(), 4);
        assert_eq!(c.target.len(), 6);
        assert_eq!(c.eval.len(), 4);
        assert!(c.target.iter().all(|u| u.record.domain == Domain::Target && u.record.speaker < 3));
        assert_eq!(c.eval.iter().filter(|u| u.record.domain == Domain::Source).count(), 2);
        assert!(c.source.iter().all(|u| u.features.frames() == 20 && u.features.bins() == 8));
    }

    #[test]
    fn zero_speakers_is_config_error() {
        let cfg = SynthConfig {
            num_speakers_source: 0,
            ..small()
        };
        assert!(matches!(synthesize(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn short_utterances_rejected() {
        let cfg = SynthConfig {
            frames_per_utt: 10,
            ..small()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn sub_seeds_differ_by_label() {
        assert_ne!(sub_seed(1, "a"), sub_seed(1, "b"));
        assert_ne!(sub_seed(1, "a"), sub_seed(2, "a"));
        assert_eq!(sub_seed(3, "x"), sub_seed(3, "x"));
    }
}
