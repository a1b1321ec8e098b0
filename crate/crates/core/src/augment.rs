//! Speed and volume perturbation, and construction of (original, augmented)
//! feature pairs for unsupervised pre-training.

use rand::Rng;

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::frontend::{FeatureMatrix, LogMel};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    pub speed_range: (f64, f64),
    pub volume_range: (f64, f64),
    /// Fixed analysis canvas both pair members are padded or cut to.
    pub canvas_seconds: f64,
    pub use_speed: bool,
    pub use_volume: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            speed_range: (0.8, 1.2),
            volume_range: (0.5, 1.5),
            canvas_seconds: 1.25,
            use_speed: true,
            use_volume: true,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("speed", self.speed_range), ("volume", self.volume_range)] {
            if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Param(format!(
                    "{name} range [{lo}, {hi}] must be positive and contain 1"
                )));
            }
        }
        if !(self.canvas_seconds > 0.0) {
            return Err(Error::Param("canvas_seconds must be positive".into()));
        }
        Ok(())
    }

    pub fn canvas_samples(&self, sample_rate: u32) -> usize {
        (self.canvas_seconds * sample_rate as f64).round() as usize
    }

    /// Draws `(speed, volume)`; a disabled perturbation is fixed at 1.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let mut uniform = |(lo, hi): (f64, f64)| if lo < hi { rng.random_range(lo..hi) } else { lo };
        let speed = uniform(self.speed_range);
        let volume = uniform(self.volume_range);
        (
            if self.use_speed { speed } else { 1.0 },
            if self.use_volume { volume } else { 1.0 },
        )
    }
}

/// Multiplies every sample by `lambda`. No clipping.
pub fn volume_perturb(audio: &AudioBuffer, lambda: f64) -> Result<AudioBuffer> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Param(format!("volume ratio must be positive, got {lambda}")));
    }
    if lambda == 1.0 {
        return Ok(audio.clone());
    }
    let g = lambda as f32;
    AudioBuffer::new(audio.samples().iter().map(|s| s * g).collect(), audio.sample_rate())
}

/// Time-axis scaling `A(lambda * t)` by linear interpolation.
///
/// Output length is `round(n / lambda)`; sample `i` reads the input at
/// position `i * lambda`. Pitch moves with speed.
pub fn speed_perturb(audio: &AudioBuffer, lambda: f64) -> Result<AudioBuffer> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Param(format!("speed ratio must be positive, got {lambda}")));
    }
    let src = audio.samples();
    let n = src.len();
    let out_len = (n as f64 / lambda).round() as usize;
    if out_len < 2 {
        return Err(Error::TooShort(format!("speed {lambda} leaves {out_len} samples from {n}")));
    }
    let out = (0..out_len)
        .map(|i| {
            let pos = i as f64 * lambda;
            let i0 = pos.floor() as usize;
            if i0 + 1 >= n {
                return src[n - 1];
            }
            let frac = pos - i0 as f64;
            if frac == 0.0 {
                src[i0]
            } else {
                ((1.0 - frac) * src[i0] as f64 + frac * src[i0 + 1] as f64) as f32
            }
        })
        .collect();
    AudioBuffer::new(out, audio.sample_rate())
}

/// Resamples to `target_rate` with the same interpolator used for speed
/// perturbation (ratio `source_rate / target_rate`).
pub fn resample(audio: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == audio.sample_rate() {
        return Ok(audio.clone());
    }
    let ratio = audio.sample_rate() as f64 / target_rate as f64;
    let out = speed_perturb(audio, ratio)?;
    AudioBuffer::new(out.into_samples(), target_rate)
}

/// Front-pads with zeros (or drops leading samples) to exactly `len` samples,
/// keeping the end of the utterance at the end of the canvas.
pub fn fit_canvas(audio: &AudioBuffer, len: usize) -> Result<AudioBuffer> {
    let src = audio.samples();
    let samples = if src.len() >= len {
        src[src.len() - len..].to_vec()
    } else {
        let mut v = vec![0.0; len - src.len()];
        v.extend_from_slice(src);
        v
    };
    AudioBuffer::new(samples, audio.sample_rate())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePair {
    pub original: FeatureMatrix,
    pub augmented: FeatureMatrix,
    pub speed: f64,
    pub volume: f64,
}

/// Builds a pair with explicit ratios. The augmented waveform is
/// `volume_perturb(speed_perturb(audio, speed), volume)`; both members are
/// placed on the canvas before featurization.
pub fn make_pair_with(audio: &AudioBuffer, speed: f64, volume: f64, spec: &AugmentSpec, frontend: &LogMel) -> Result<FeaturePair> {
    let canvas = spec.canvas_samples(audio.sample_rate());
    let augmented = volume_perturb(&speed_perturb(audio, speed)?, volume)?;
    Ok(FeaturePair {
        original: frontend.compute(&fit_canvas(audio, canvas)?)?,
        augmented: frontend.compute(&fit_canvas(&augmented, canvas)?)?,
        speed,
        volume,
    })
}

/// Draws ratios from `spec` and builds the pair.
pub fn make_pair<R: Rng + ?Sized>(audio: &AudioBuffer, spec: &AugmentSpec, rng: &mut R, frontend: &LogMel) -> Result<FeaturePair> {
    let (speed, volume) = spec.draw(rng);
    make_pair_with(audio, speed, volume, spec, frontend)
}
