//! Synthetic keyword corpus: each "word" is a fixed pattern of tone and chirp
//! segments, varied per speaker in pitch, duration, onset and level.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::audio::{write_wav_file, AudioBuffer, SAMPLE_RATE};
use crate::data::NOISE_DIR;
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub words: Vec<String>,
    pub clips_per_word: usize,
    pub speakers: usize,
    pub noise_seconds: f64,
    pub unlabeled_files: usize,
    pub unlabeled_seconds: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            words: ["yes", "no", "up", "down"].iter().map(|s| s.to_string()).collect(),
            clips_per_word: 100,
            speakers: 50,
            noise_seconds: 10.0,
            unlabeled_files: 20,
            unlabeled_seconds: 10.5,
            seed: 0,
        }
    }
}

/// Frequency track of one segment, in Hz at nominal pitch.
#[derive(Clone, Copy, Debug)]
struct Piece {
    from: f64,
    to: f64,
    /// Fraction of the word's duration.
    share: f64,
}

fn pattern(index: usize) -> Vec<Piece> {
    let p = |from, to, share| Piece { from, to, share };
    match index % 10 {
        0 => vec![p(300.0, 900.0, 1.0)],
        1 => vec![p(1400.0, 450.0, 1.0)],
        2 => vec![p(500.0, 500.0, 0.45), p(1600.0, 1600.0, 0.55)],
        3 => vec![p(2200.0, 2200.0, 0.5), p(700.0, 700.0, 0.5)],
        4 => vec![p(400.0, 1200.0, 0.5), p(1200.0, 400.0, 0.5)],
        5 => vec![p(1000.0, 1000.0, 1.0)],
        6 => vec![p(350.0, 350.0, 0.3), p(900.0, 900.0, 0.3), p(2000.0, 2000.0, 0.4)],
        7 => vec![p(2600.0, 1300.0, 0.6), p(600.0, 600.0, 0.4)],
        8 => vec![p(800.0, 2400.0, 1.0)],
        _ => vec![p(1800.0, 1800.0, 0.4), p(300.0, 700.0, 0.6)],
    }
}

/// Pattern for vocabulary item `index`, with a frequency offset past the
/// first ten so that every item stays distinct.
fn word_pattern(index: usize) -> Vec<Piece> {
    let offset = 1.0 + 0.13 * (index / 10) as f64;
    pattern(index)
        .into_iter()
        .map(|p| Piece { from: (p.from * offset).min(3500.0), to: (p.to * offset).min(3500.0), ..p })
        .collect()
}

/// Renders one utterance of `pattern` into `out` starting at `onset`.
fn render(out: &mut [f32], onset: usize, pattern: &[Piece], pitch: f64, seconds: f64, amplitude: f64) {
    let n = ((seconds * SAMPLE_RATE as f64) as usize).min(out.len().saturating_sub(onset));
    if n == 0 {
        return;
    }
    let ramp = (0.02 * SAMPLE_RATE as f64) as usize;
    let mut phase = 0.0f64;
    let mut start = 0usize;
    for (k, piece) in pattern.iter().enumerate() {
        let len = if k + 1 == pattern.len() { n - start } else { (piece.share * n as f64) as usize };
        for i in 0..len {
            let t = i as f64 / len.max(1) as f64;
            let f = pitch * (piece.from + (piece.to - piece.from) * t);
            phase += 2.0 * PI * f / SAMPLE_RATE as f64;
            let pos = start + i;
            let env = (pos.min(n - 1 - pos) as f64 / ramp as f64).min(1.0);
            let v = amplitude * env * (phase.sin() + 0.3 * (2.0 * phase).sin()) / 1.3;
            out[onset + pos] += v as f32;
        }
        start += len;
    }
}

/// A one-second clip of vocabulary item `index` with random speaker traits.
pub fn word_clip(index: usize, pitch: f64, rng: &mut Rng) -> AudioBuffer {
    let mut out = vec![0.0f32; SAMPLE_RATE as usize];
    let seconds = rng.random_range(0.45..0.75);
    let amplitude = rng.random_range(0.2..0.6);
    let latest = SAMPLE_RATE as usize - (seconds * SAMPLE_RATE as f64) as usize;
    let onset = rng.random_range(0..=latest);
    let jitter = pitch * rng.random_range(0.97..1.03);
    render(&mut out, onset, &word_pattern(index), jitter, seconds, amplitude);
    AudioBuffer::new(out, SAMPLE_RATE).expect("non-empty clip")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Pink,
    Brown,
    Hum,
    Babble,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 5] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Brown, NoiseKind::Hum, NoiseKind::Babble];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Brown => "brown",
            NoiseKind::Hum => "hum",
            NoiseKind::Babble => "babble",
        }
    }
}

/// Noise of the given colour scaled to RMS 0.1.
pub fn noise(kind: NoiseKind, seconds: f64, rng: &mut Rng) -> AudioBuffer {
    let n = (seconds * SAMPLE_RATE as f64) as usize;
    let mut white = || rng.random_range(-1.0f64..1.0);
    let mut v: Vec<f64> = match kind {
        NoiseKind::White => (0..n).map(|_| white()).collect(),
        NoiseKind::Pink => {
            // Paul Kellet's economy filter.
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            (0..n)
                .map(|_| {
                    let w = white();
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseKind::Brown => {
            let mut acc = 0.0;
            (0..n)
                .map(|_| {
                    acc = 0.995 * acc + 0.1 * white();
                    acc
                })
                .collect()
        }
        NoiseKind::Hum => (0..n)
            .map(|i| {
                let t = i as f64 / SAMPLE_RATE as f64;
                (2.0 * PI * 50.0 * t).sin() + 0.5 * (2.0 * PI * 150.0 * t).sin() + 0.25 * (2.0 * PI * 250.0 * t).sin()
                    + 0.05 * white()
            })
            .collect(),
        NoiseKind::Babble => {
            let mut out = vec![0.0f32; n];
            let mut pos = 0;
            while pos + SAMPLE_RATE as usize / 4 < n {
                let index = 10 + rng.random_range(0..40);
                let pitch = rng.random_range(0.7..1.3);
                let secs = rng.random_range(0.2..0.6);
                render(&mut out, pos, &word_pattern(index), pitch, secs, 0.5);
                pos += rng.random_range(800..4000);
            }
            out.into_iter().map(|v| v as f64).collect()
        }
    };
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x *= 0.1 / rms);
    AudioBuffer::new(v.into_iter().map(|x| x as f32).collect(), SAMPLE_RATE).expect("non-empty noise")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyLayout {
    /// Word folders plus the background-noise folder.
    pub speech: PathBuf,
    /// Corruption noise for dataset preparation.
    pub noise: PathBuf,
    pub unlabeled: PathBuf,
    pub clips: usize,
}

/// Writes `<root>/speech/<word>/<speaker>_nohash_<n>.wav`, background and
/// corruption noise, and long unlabeled recordings.
pub fn generate(root: &Path, cfg: &ToyConfig) -> Result<ToyLayout> {
    if cfg.words.is_empty() || cfg.clips_per_word == 0 || cfg.speakers == 0 {
        return Err(Error::Param("toy corpus needs words, clips and speakers".into()));
    }
    let layout = ToyLayout {
        speech: root.join("speech"),
        noise: root.join("noise"),
        unlabeled: root.join("unlabeled"),
        clips: cfg.words.len() * cfg.clips_per_word,
    };
    let mut speaker_rng = stream(cfg.seed, "toy/speakers");
    let speakers: Vec<(String, f64)> = (0..cfg.speakers)
        .map(|_| (format!("{:08x}", speaker_rng.random::<u32>()), speaker_rng.random_range(0.92..1.08)))
        .collect();
    for (w, word) in cfg.words.iter().enumerate() {
        let mut rng = stream(cfg.seed, &format!("toy/word/{word}"));
        for k in 0..cfg.clips_per_word {
            let (hex, pitch) = &speakers[k % speakers.len()];
            let take = k / speakers.len();
            let clip = word_clip(w, *pitch, &mut rng);
            write_wav_file(&layout.speech.join(word).join(format!("{hex}_nohash_{take}.wav")), &clip)?;
        }
    }
    for (dir, tag) in [(layout.speech.join(NOISE_DIR), "background"), (layout.noise.clone(), "corruption")] {
        for kind in NoiseKind::ALL {
            let mut rng = stream(cfg.seed, &format!("toy/{tag}/{}", kind.name()));
            write_wav_file(&dir.join(format!("{}.wav", kind.name())), &noise(kind, cfg.noise_seconds, &mut rng))?;
        }
    }
    let n_words = cfg.words.len();
    for f in 0..cfg.unlabeled_files {
        let mut rng = stream(cfg.seed, &format!("toy/unlabeled/{f}"));
        let n = (cfg.unlabeled_seconds * SAMPLE_RATE as f64) as usize;
        let mut out = vec![0.0f32; n];
        let mut pos = rng.random_range(0..4000);
        while pos + SAMPLE_RATE as usize * 3 / 4 < n {
            let index = if rng.random_bool(0.7) { rng.random_range(0..n_words) } else { 10 + rng.random_range(0..20) };
            let secs = rng.random_range(0.45..0.75);
            let amp = rng.random_range(0.2..0.6);
            render(&mut out, pos, &word_pattern(index), rng.random_range(0.92..1.08), secs, amp);
            pos += (secs * SAMPLE_RATE as f64) as usize + rng.random_range(2000..8000);
        }
        write_wav_file(&layout.unlabeled.join(format!("session_{f:03}.wav")), &AudioBuffer::new(out, SAMPLE_RATE)?)?;
    }
    Ok(layout)
}
