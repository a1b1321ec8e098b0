//! Log-mel filterbank features.
//!
//! Hann-windowed frames, magnitude-squared FFT, triangular filters on the HTK
//! mel scale and a floored natural log. No pre-emphasis, dithering or mean
//! normalization is applied, so scaling the waveform by `g` shifts every
//! above-floor entry by exactly `2 ln g`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    /// Analysis window in samples (30 ms).
    pub window: usize,
    /// Frame shift in samples (10 ms).
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    /// Per-utterance mean/variance normalization. Off by default.
    pub normalize: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 16_000,
            window: 480,
            hop: 160,
            n_fft: 512,
            n_mels: 40,
            f_min: 20.0,
            f_max: 8000.0,
            log_floor: 1e-6,
            normalize: false,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.hop == 0 || self.n_mels == 0 {
            return Err(Error::Param("window, hop and n_mels must be positive".into()));
        }
        if self.window > self.n_fft {
            return Err(Error::Param(format!("window {} exceeds FFT size {}", self.window, self.n_fft)));
        }
        if self.hop > self.window {
            return Err(Error::Param(format!("hop {} exceeds window {}", self.hop, self.window)));
        }
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Param(format!("mel range {}..{} Hz is invalid", self.f_min, self.f_max)));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Param("log floor must be positive".into()));
        }
        Ok(())
    }

    /// `floor((n - window) / hop) + 1`, or `None` when shorter than one window.
    pub fn frame_count(&self, n_samples: usize) -> Option<usize> {
        (n_samples >= self.window).then(|| (n_samples - self.window) / self.hop + 1)
    }
}

/// `T x n_mels` log-mel energies, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    bins: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, bins: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || bins == 0 || data.len() != frames * bins {
            return Err(Error::Param(format!(
                "feature matrix {frames}x{bins} cannot hold {} values",
                data.len()
            )));
        }
        Ok(FeatureMatrix { frames, bins, data })
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

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    /// Per-bin mean over frames.
    pub fn mean_frame(&self) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.bins];
        for t in 0..self.frames {
            for (a, &v) in acc.iter_mut().zip(self.row(t)) {
                *a += v as f64;
            }
        }
        acc.iter().map(|a| (a / self.frames as f64) as f32).collect()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters over the `n_fft / 2 + 1` FFT bins.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// Edge frequencies in Hz: `n_mels + 2` points equally spaced in mel.
    edges: Vec<f64>,
    /// `n_mels x n_bins` weights.
    weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    pub fn new(cfg: &FrontendConfig) -> Self {
        let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let n_bins = cfg.n_fft / 2 + 1;
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let weights = (0..cfg.n_mels)
            .map(|m| {
                let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= left || f >= right {
                            0.0
                        } else if f <= center {
                            (f - left) / (center - left)
                        } else {
                            (right - f) / (right - center)
                        }
                    })
                    .collect()
            })
            .collect();
        MelFilterbank { edges, weights }
    }

    /// Center frequency of each filter in Hz.
    pub fn centers(&self) -> &[f64] {
        &self.edges[1..self.edges.len() - 1]
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }
}

/// Reusable log-mel extractor holding the FFT plan, window and filterbank.
pub struct LogMel {
    cfg: FrontendConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    bank: MelFilterbank,
}

impl LogMel {
    pub fn new(cfg: &FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        let n = cfg.window as f64;
        let window = (0..cfg.window)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos())
            .collect();
        Ok(LogMel { cfg: cfg.clone(), fft, window, bank: MelFilterbank::new(cfg) })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    pub fn compute(&self, audio: &AudioBuffer) -> Result<FeatureMatrix> {
        let cfg = &self.cfg;
        let frames = cfg.frame_count(audio.len()).ok_or_else(|| {
            Error::TooShort(format!("{} samples is shorter than one {}-sample window", audio.len(), cfg.window))
        })?;
        let n_bins = cfg.n_fft / 2 + 1;
        let floor = cfg.log_floor;
        let samples = audio.samples();
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut power = vec![0.0f64; n_bins];
        let mut data = Vec::with_capacity(frames * cfg.n_mels);
        for t in 0..frames {
            let start = t * cfg.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < cfg.window {
                    Complex::new(samples[start + i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filt in &self.bank.weights {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                data.push(e.max(floor).ln() as f32);
            }
        }
        let mut feats = FeatureMatrix::new(frames, cfg.n_mels, data)?;
        if cfg.normalize {
            normalize(&mut feats);
        }
        Ok(feats)
    }
}

fn normalize(feats: &mut FeatureMatrix) {
    let mean = feats.mean_frame();
    let bins = feats.bins;
    let frames = feats.frames;
    let mut var = vec![0.0f64; bins];
    for t in 0..frames {
        for j in 0..bins {
            let d = (feats.data[t * bins + j] - mean[j]) as f64;
            var[j] += d * d;
        }
    }
    for t in 0..frames {
        for j in 0..bins {
            let sd = (var[j] / frames as f64).sqrt().max(1e-5);
            feats.data[t * bins + j] = ((feats.data[t * bins + j] - mean[j]) as f64 / sd) as f32;
        }
    }
}

/// One-shot log-mel extraction.
pub fn log_mel(audio: &AudioBuffer, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    LogMel::new(cfg)?.compute(audio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(freq: f64, amp: f64, n: usize) -> AudioBuffer {
        let s = (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin()) as f32)
            .collect();
        AudioBuffer::new(s, 16000).unwrap()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let f = log_mel(&sine(440.0, 0.5, 16000), &FrontendConfig::default()).unwrap();
        assert_eq!(f.frames(), 98);
        assert_eq!(f.bins(), 40);
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let audio = AudioBuffer::new(vec![0.0; 1600], 16000).unwrap();
        let f = log_mel(&audio, &FrontendConfig::default()).unwrap();
        for &v in f.data() {
            assert!((v as f64 - 1e-6f64.ln()).abs() < 1e-5);
        }
        assert!((1e-6f64.ln() + 13.8155).abs() < 1e-4);
    }

    #[test]
    fn too_short_audio_is_rejected() {
        let audio = AudioBuffer::new(vec![0.1; 479], 16000).unwrap();
        assert!(matches!(log_mel(&audio, &FrontendConfig::default()), Err(Error::TooShort(_))));
    }

    #[test]
    fn pure_tone_peaks_in_nearest_filter() {
        let cfg = FrontendConfig::default();
        // Filter centers computed directly from the HTK formula.
        let (lo, hi) = (2595.0 * (1.0f64 + 20.0 / 700.0).log10(), 2595.0 * (1.0f64 + 8000.0 / 700.0).log10());
        let centers: Vec<f64> = (1..=40)
            .map(|i| 700.0 * (10f64.powf((lo + (hi - lo) * i as f64 / 41.0) / 2595.0) - 1.0))
            .collect();
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        let f = log_mel(&sine(1000.0, 1.0, 16000), &cfg).unwrap();
        for t in 0..f.frames() {
            let row = f.row(t);
            let argmax = (0..40).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, nearest, "frame {t}");
        }
    }

    #[test]
    fn filters_are_unimodal_overlapping_and_increasing() {
        let bank = MelFilterbank::new(&FrontendConfig::default());
        let centers = bank.centers();
        assert!(centers.windows(2).all(|w| w[0] < w[1]));
        for (m, w) in bank.weights().iter().enumerate() {
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!(w.iter().any(|&x| x > 0.0), "filter {m} is empty");
            let peak = (0..w.len()).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
            assert!(w[..=peak].windows(2).all(|p| p[0] <= p[1]));
            assert!(w[peak..].windows(2).all(|p| p[0] >= p[1]));
        }
        for pair in bank.weights().windows(2) {
            assert!(pair[0].iter().zip(&pair[1]).any(|(a, b)| *a > 0.0 && *b > 0.0));
        }
    }

    #[test]
    fn volume_scaling_shifts_by_two_log_gain() {
        let cfg = FrontendConfig::default();
        let mut state = 1u64;
        let noise: Vec<f32> = (0..8000)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f32 / (1u64 << 31) as f32) - 0.5
            })
            .collect();
        let base = AudioBuffer::new(noise.clone(), 16000).unwrap();
        let lambda = 1.7f32;
        let louder = AudioBuffer::new(noise.iter().map(|s| s * lambda).collect(), 16000).unwrap();
        let (a, b) = (log_mel(&base, &cfg).unwrap(), log_mel(&louder, &cfg).unwrap());
        let shift = 2.0 * (lambda as f64).ln();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((*x as f64) > (100.0 * cfg.log_floor).ln());
            assert!(((y - x) as f64 - shift).abs() < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn frame_count_formula(n in 480usize..40000) {
            let cfg = FrontendConfig::default();
            prop_assert_eq!(cfg.frame_count(n), Some((n - 480) / 160 + 1));
        }
    }
}
