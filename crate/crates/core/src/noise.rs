//! Additive noise corruption at a target signal-to-noise ratio.

use rand::Rng;

use crate::audio::{mean_square, AudioBuffer};
use crate::error::{Error, Result};

/// Noise segment aligned with `len` speech samples, starting at a random
/// offset. Noise longer than the speech is cut, shorter noise is tiled.
fn noise_segment<R: Rng + ?Sized>(noise: &[f32], len: usize, rng: &mut R) -> Vec<f32> {
    if noise.len() >= len {
        let offset = rng.random_range(0..=noise.len() - len);
        noise[offset..offset + len].to_vec()
    } else {
        let offset = rng.random_range(0..noise.len());
        (0..len).map(|i| noise[(offset + i) % noise.len()]).collect()
    }
}

/// Noise gain `sqrt(P_s / (P_n * 10^(snr/10)))` for mean-square powers.
pub fn snr_gain(speech_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (speech_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// `speech + gain * noise` with the gain chosen so the mixture has the
/// requested SNR. Returns the mixture and the gain applied.
pub fn mix_at_snr_with_gain<R: Rng + ?Sized>(
    speech: &AudioBuffer,
    noise: &AudioBuffer,
    snr_db: f64,
    rng: &mut R,
) -> Result<(AudioBuffer, f64)> {
    if speech.sample_rate() != noise.sample_rate() {
        return Err(Error::Param(format!(
            "speech at {} Hz cannot be mixed with noise at {} Hz",
            speech.sample_rate(),
            noise.sample_rate()
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::Param(format!("snr {snr_db} dB is not finite")));
    }
    let p_s = speech.power();
    if !(p_s > 0.0) {
        return Err(Error::Degenerate("speech is silent".into()));
    }
    if !(noise.power() > 0.0) {
        return Err(Error::Degenerate("noise is silent".into()));
    }
    let mut segment = noise_segment(noise.samples(), speech.len(), rng);
    let mut p_n = mean_square(&segment);
    if !(p_n > 0.0) {
        // The drawn window happened to be all zeros; fall back to tiling from the start.
        segment = (0..speech.len()).map(|i| noise.samples()[i % noise.len()]).collect();
        p_n = mean_square(&segment);
        if !(p_n > 0.0) {
            return Err(Error::Degenerate("noise segment is silent".into()));
        }
    }
    let gain = snr_gain(p_s, p_n, snr_db);
    let mixed = speech
        .samples()
        .iter()
        .zip(&segment)
        .map(|(&s, &n)| (s as f64 + gain * n as f64) as f32)
        .collect();
    Ok((AudioBuffer::new(mixed, speech.sample_rate())?, gain))
}

pub fn mix_at_snr<R: Rng + ?Sized>(speech: &AudioBuffer, noise: &AudioBuffer, snr_db: f64, rng: &mut R) -> Result<AudioBuffer> {
    Ok(mix_at_snr_with_gain(speech, noise, snr_db, rng)?.0)
}
