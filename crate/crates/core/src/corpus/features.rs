//! Log-mel filterbank front-end, sliding-window mean normalization, and an
//! energy-threshold voice activity detector.

use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};

use super::FeatureChunk;
use crate::error::{Error, Result};

/// Floor added to filterbank energies before the logarithm.
pub const ENERGY_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct LogMelConfig {
    pub sample_rate: f64,
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000.0,
            frame_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 64,
        }
    }
}

impl LogMelConfig {
    pub fn frame_samples(&self) -> usize {
        (self.sample_rate * self.frame_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate * self.hop_ms / 1000.0).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.frame_samples().next_power_of_two()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the `n_mels` triangular filters spanning
/// 0 Hz to Nyquist on the HTK mel scale.
pub fn mel_centers(n_mels: usize, sample_rate: f64) -> Vec<f64> {
    let top = hz_to_mel(sample_rate / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular filter weights, `n_mels x (fft_size / 2 + 1)`, unit peak.
pub fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let top = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let n_bins = fft_size / 2 + 1;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * sample_rate / fft_size as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Number of full frames in `n` samples.
pub fn num_frames(n: usize, frame: usize, hop: usize) -> usize {
    if n < frame {
        0
    } else {
        (n - frame) / hop + 1
    }
}

/// Log-mel filterbank energies of a waveform: `T x n_mels` with
/// `T = floor((N - frame) / hop) + 1`.
pub fn logmel(waveform: &[f64], cfg: &LogMelConfig) -> Result<FeatureChunk> {
    if cfg.sample_rate <= 0.0 || cfg.n_mels == 0 {
        return Err(Error::Config("sample rate and mel count must be positive".into()));
    }
    let frame = cfg.frame_samples();
    let hop = cfg.hop_samples();
    if frame == 0 || hop == 0 {
        return Err(Error::Config("frame and hop must span at least one sample".into()));
    }
    if waveform.len() < frame {
        return Err(Error::Length(format!(
            "waveform of {} samples is shorter than one {frame}-sample frame",
            waveform.len()
        )));
    }
    let n_fft = cfg.fft_size();
    let fb = mel_filterbank(cfg.n_mels, n_fft, cfg.sample_rate);
    let window = hamming(frame);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let t = num_frames(waveform.len(), frame, hop);
    let mut out = Vec::with_capacity(t * cfg.n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for i in 0..t {
        let seg = &waveform[i * hop..i * hop + frame];
        for (j, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(if j < frame { seg[j] * window[j] } else { 0.0 }, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        for filt in &fb {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            out.push((e + ENERGY_FLOOR).ln());
        }
    }
    FeatureChunk::from_f64(t, cfg.n_mels, &out)
}

/// Frames in a window of `seconds` at the given hop.
pub fn frames_for_seconds(seconds: f64, hop_ms: f64) -> usize {
    ((seconds * 1000.0 / hop_ms).round() as usize).max(1)
}

/// Per-bin mean subtraction over a sliding window of `window` frames
/// centered on each frame. Near the edges the window is shifted (not shrunk)
/// to stay inside the utterance, so a window of at least `T` frames reduces
/// to global mean subtraction.
pub fn cmn_sliding(chunk: &FeatureChunk, window: usize) -> Result<FeatureChunk> {
    if window == 0 {
        return Err(Error::Config("CMN window must cover at least one frame".into()));
    }
    let (t, f) = (chunk.frames(), chunk.bins());
    // Prefix sums per bin, in f64.
    let mut prefix = vec![0.0f64; (t + 1) * f];
    for i in 0..t {
        for j in 0..f {
            prefix[(i + 1) * f + j] = prefix[i * f + j] + chunk.get(i, j) as f64;
        }
    }
    let mut out = Vec::with_capacity(t * f);
    for i in 0..t {
        let (start, end) = window_bounds(i, t, window);
        let n = (end - start) as f64;
        for j in 0..f {
            let mean = (prefix[end * f + j] - prefix[start * f + j]) / n;
            out.push(chunk.get(i, j) as f64 - mean);
        }
    }
    FeatureChunk::from_f64(t, f, &out)
}

fn window_bounds(i: usize, t: usize, window: usize) -> (usize, usize) {
    let mut start = i as isize - (window / 2) as isize;
    let mut end = start + window as isize;
    if start < 0 {
        end -= start;
        start = 0;
    }
    if end > t as isize {
        start -= end - t as isize;
        end = t as isize;
    }
    (start.max(0) as usize, end as usize)
}

/// Keeps frames whose mean log-energy exceeds the utterance-median frame
/// energy plus `threshold_offset`; the loudest frame is always kept.
pub fn energy_vad(chunk: &FeatureChunk, threshold_offset: f64) -> Vec<bool> {
    let energies: Vec<f64> = (0..chunk.frames())
        .map(|t| chunk.frame(t).iter().map(|&v| v as f64).sum::<f64>() / chunk.bins() as f64)
        .collect();
    let mut sorted = energies.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let threshold = median + threshold_offset;
    let mut mask: Vec<bool> = energies.iter().map(|&e| e > threshold).collect();
    if !mask.iter().any(|&k| k) {
        let loudest = energies
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        mask[loudest] = true;
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_gives_constant_floor() {
        let chunk = logmel(&vec![0.0; 16_000], &LogMelConfig::default()).unwrap();
        assert_eq!((chunk.frames(), chunk.bins()), (98, 64));
        let want = ENERGY_FLOOR.ln() as f32;
        assert!(chunk.data().iter().all(|&v| v == want));
    }

    #[test]
    fn short_waveform_is_a_length_error() {
        let err = logmel(&[0.0; 399], &LogMelConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Length(_)));
    }

    #[test]
    fn filterbank_triangles_peak_near_centers() {
        let fb = mel_filterbank(64, 512, 16_000.0);
        let centers = mel_centers(64, 16_000.0);
        for (filt, c) in fb.iter().zip(&centers) {
            let peak = filt
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            let peak_hz = peak as f64 * 16_000.0 / 512.0;
            assert!((peak_hz - c).abs() <= 16_000.0 / 512.0);
        }
    }

    #[test]
    fn cmn_constant_input_is_zero() {
        let c = FeatureChunk::new(10, 3, vec![4.5; 30]).unwrap();
        let out = cmn_sliding(&c, 3).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let single = FeatureChunk::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(cmn_sliding(&single, 300).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cmn_large_window_matches_global_mean() {
        let data: Vec<f32> = (0..50 * 4).map(|i| ((i * 37 % 17) as f32).sqrt()).collect();
        let c = FeatureChunk::new(50, 4, data).unwrap();
        let means = c.column_means();
        for window in [50, 51, 300] {
            let out = cmn_sliding(&c, window).unwrap();
            for t in 0..50 {
                for f in 0..4 {
                    let want = c.get(t, f) as f64 - means[f];
                    assert!((out.get(t, f) as f64 - want).abs() < 1e-5);
                }
            }
            for f in 0..4 {
                let col: f64 = (0..50).map(|t| out.get(t, f) as f64).sum();
                assert!(col.abs() < 1e-4);
            }
        }
    }

    #[test]
    fn cmn_window_is_centered() {
        let data: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let c = FeatureChunk::new(9, 1, data).unwrap();
        let out = cmn_sliding(&c, 3).unwrap();
        // Interior frame 4 sees frames 3..=5 (mean 4).
        assert_eq!(out.get(4, 0), 0.0);
        // Frame 0's window is shifted to 0..=2 (mean 1).
        assert_eq!(out.get(0, 0), -1.0);
        assert_eq!(out.get(8, 0), 1.0);
    }

    #[test]
    fn vad_rules() {
        let flat = FeatureChunk::new(6, 2, vec![1.0; 12]).unwrap();
        assert!(energy_vad(&flat, -0.5).iter().all(|&k| k));

        let mut data = Vec::new();
        for t in 0..10 {
            let v = if t % 2 == 0 { 5.0 } else { -23.0 };
            data.extend_from_slice(&[v, v]);
        }
        let half = FeatureChunk::new(10, 2, data).unwrap();
        let mask = energy_vad(&half, 0.0);
        assert_eq!(mask.iter().filter(|&&k| k).count(), 5);
        assert!(mask.iter().enumerate().all(|(t, &k)| k == (t % 2 == 0)));

        let one = FeatureChunk::new(1, 2, vec![-50.0, -50.0]).unwrap();
        assert_eq!(energy_vad(&one, 10.0), vec![true]);
        assert_eq!(energy_vad(&flat, 3.0).iter().filter(|&&k| k).count(), 1);
    }
}
