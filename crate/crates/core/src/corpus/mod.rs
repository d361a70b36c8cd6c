//! Two-domain utterance corpora: synthesis, acoustic features, cropping, and
//! the on-disk manifest/feature formats.

pub mod features;
pub mod io;
pub mod synth;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use features::{cmn_sliding, energy_vad, logmel, LogMelConfig};
pub use io::{read_manifest, Manifest};
pub use synth::{generate_corpus, synthesize, CorpusSummary, SynthConfig, SynthCorpus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    /// Binary label used by domain probes (`source = 0`).
    pub fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Config(format!(
                "unknown domain `{other}` (expected source or target)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub speaker: usize,
    pub domain: Domain,
    pub num_frames: usize,
    /// Relative to the manifest's directory.
    pub feature_path: PathBuf,
}

/// A `frames x bins` log-energy matrix, row-major, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureChunk {
    frames: usize,
    bins: usize,
    data: Vec<f32>,
}

impl FeatureChunk {
    pub fn new(frames: usize, bins: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || bins == 0 {
            return Err(Error::Shape(format!("empty feature matrix {frames}x{bins}")));
        }
        if data.len() != frames * bins {
            return Err(Error::Shape(format!(
                "{frames}x{bins} features need {} values, got {}",
                frames * bins,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite feature at frame {}, bin {}",
                i / bins,
                i % bins
            )));
        }
        Ok(Self { frames, bins, data })
    }

    pub fn from_f64(frames: usize, bins: usize, data: &[f64]) -> Result<Self> {
        Self::new(frames, bins, data.iter().map(|&v| v as f32).collect())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, t: usize, f: usize) -> f32 {
        self.data[t * self.bins + f]
    }

    /// Per-bin mean over all frames.
    pub fn column_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.bins];
        for t in 0..self.frames {
            for (acc, v) in m.iter_mut().zip(self.frame(t)) {
                *acc += *v as f64;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.frames as f64);
        m
    }

    /// Keeps only frames where `mask` is true.
    pub fn select_frames(&self, mask: &[bool]) -> Result<Self> {
        if mask.len() != self.frames {
            return Err(Error::Shape(format!(
                "mask of length {} for {} frames",
                mask.len(),
                self.frames
            )));
        }
        let data: Vec<f32> = (0..self.frames)
            .filter(|&t| mask[t])
            .flat_map(|t| self.frame(t).iter().copied())
            .collect();
        Self::new(data.len() / self.bins, self.bins, data)
    }

    /// Contiguous frames `start..start + len`, wrapping around the end.
    pub fn window_wrapped(&self, start: usize, len: usize) -> Self {
        let mut data = Vec::with_capacity(len * self.bins);
        for i in 0..len {
            data.extend_from_slice(self.frame((start + i) % self.frames));
        }
        Self {
            frames: len,
            bins: self.bins,
            data,
        }
    }
}

/// Outcome of [`random_crop`]: the chunk plus where it started and whether
/// it had to be wrap-padded.
#[derive(Clone, Debug)]
pub struct Crop {
    pub chunk: FeatureChunk,
    pub start: usize,
    pub padded: bool,
}

/// A contiguous `len`-frame crop at a uniformly random start. Utterances
/// shorter than `len` are wrap-padded (repeated from the first frame).
pub fn random_crop(features: &FeatureChunk, len: usize, rng: &mut impl Rng) -> Result<Crop> {
    if len == 0 {
        return Err(Error::Length("crop length must be positive".into()));
    }
    let n = features.frames();
    if len > n {
        log::warn!("crop of {len} frames from a {n}-frame utterance; wrap-padding");
        return Ok(Crop {
            chunk: features.window_wrapped(0, len),
            start: 0,
            padded: true,
        });
    }
    let start = rng.random_range(0..=n - len);
    Ok(Crop {
        chunk: features.window_wrapped(start, len),
        start,
        padded: false,
    })
}
