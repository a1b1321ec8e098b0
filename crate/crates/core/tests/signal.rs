use std::f64::consts::PI;

use kws_core::audio::{encode_wav, read_wav, AudioBuffer};
use kws_core::augment::{make_pair_with, speed_perturb, volume_perturb, AugmentSpec};
use kws_core::frontend::{FrontendConfig, LogMel};
use kws_core::noise::{mix_at_snr, mix_at_snr_with_gain};
use kws_core::rng::stream;
use kws_core::toygen::{noise, word_clip, NoiseKind};
use kws_core::Error;
use proptest::prelude::*;
use rand::Rng;

fn sine(freq: f64, n: usize, amp: f64) -> AudioBuffer {
    AudioBuffer::new((0..n).map(|i| (amp * (2.0 * PI * freq * i as f64 / 16000.0).sin()) as f32).collect(), 16000).unwrap()
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

fn zero_crossing_rate(s: &[f32]) -> f64 {
    s.windows(2).filter(|w| (w[0] < 0.0) != (w[1] < 0.0)).count() as f64 / s.len() as f64
}

#[test]
fn requested_snr_is_recovered_from_the_components() {
    let mut rng = stream(9, "snr-draws");
    let kinds = NoiseKind::ALL;
    for draw in 0..100 {
        let speech = word_clip(draw % 10, rng.random_range(0.9..1.1), &mut rng);
        let n = noise(kinds[draw % kinds.len()], 2.0, &mut rng);
        let snr = rng.random_range(0.0..20.0);
        let mixed = mix_at_snr(&speech, &n, snr, &mut rng).unwrap();
        let s: Vec<f64> = speech.samples().iter().map(|&v| v as f64).collect();
        let residual: Vec<f64> = mixed.samples().iter().zip(&s).map(|(&m, &v)| m as f64 - v).collect();
        let recovered = 10.0 * (power(&s) / power(&residual)).log10();
        assert!((recovered - snr).abs() < 0.01, "draw {draw}: asked {snr}, got {recovered}");
    }
}

#[test]
fn gain_matches_power_ratio() {
    let speech = sine(440.0, 16000, 0.5);
    let n = sine(97.0, 16000, 0.25);
    let (_, gain) = mix_at_snr_with_gain(&speech, &n, 0.0, &mut stream(1, "g")).unwrap();
    // equal powers at 0 dB: the noise needs twice the amplitude
    assert!((gain - 2.0).abs() < 1e-3, "{gain}");
}

#[test]
fn silent_speech_or_noise_is_degenerate() {
    let silent = AudioBuffer::new(vec![0.0; 16000], 16000).unwrap();
    let n = sine(97.0, 16000, 0.25);
    assert!(matches!(mix_at_snr(&silent, &n, 10.0, &mut stream(1, "d")), Err(Error::Degenerate(_))));
    assert!(matches!(mix_at_snr(&n, &silent, 10.0, &mut stream(1, "d")), Err(Error::Degenerate(_))));
}

proptest! {
    #[test]
    fn volume_scales_rms_by_lambda(lambda in 0.5f64..1.5, freq in 50.0f64..4000.0, seed in any::<u64>()) {
        let mut rng = stream(seed, "vol");
        let a = AudioBuffer::new((0..4000).map(|i| (0.4 * (freq * i as f64 / 16000.0).sin()) as f32 + rng.random_range(-0.1f32..0.1)).collect(), 16000).unwrap();
        let out = volume_perturb(&a, lambda).unwrap();
        prop_assert!((out.rms() - lambda * a.rms()).abs() < 1e-6);
    }

    #[test]
    fn speed_scales_length_and_crossing_rate(lambda in 0.8f64..1.2, freq in 200.0f64..1500.0) {
        let a = sine(freq, 16000, 0.5);
        let out = speed_perturb(&a, lambda).unwrap();
        prop_assert!((out.len() as f64 - 16000.0 / lambda).abs() <= 1.0);
        let ratio = zero_crossing_rate(out.samples()) / zero_crossing_rate(a.samples());
        prop_assert!((ratio / lambda - 1.0).abs() <= 0.02, "ratio {} for speed {}", ratio, lambda);
    }

    #[test]
    fn volume_only_pairs_shift_log_mel_by_twice_log_gain(lambda in 0.5f64..1.5, freq in 300.0f64..3000.0) {
        let frontend = LogMel::new(&FrontendConfig::default()).unwrap();
        let pair = make_pair_with(&sine(freq, 16000, 0.3), 1.0, lambda, &AugmentSpec::default(), &frontend).unwrap();
        let floor = 1e-6f64.ln();
        let shift = 2.0 * lambda.ln();
        let mut checked = 0;
        for (a, o) in pair.augmented.data().iter().zip(pair.original.data()) {
            // well above the floor in both members
            if (*o as f64) > floor + 4.0 && (*a as f64) > floor + 4.0 {
                prop_assert!(((a - o) as f64 - shift).abs() < 1e-4, "{} vs {}", a - o, shift);
                checked += 1;
            }
        }
        prop_assert!(checked > 50);
    }

    #[test]
    fn wav_round_trip_within_one_step(seed in any::<u64>(), n in 1usize..2000) {
        let mut rng = stream(seed, "wav");
        let a = AudioBuffer::new((0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(), 16000).unwrap();
        let (bytes, clamped) = encode_wav(&a).unwrap();
        prop_assert_eq!(clamped, 0);
        let b = read_wav(&bytes).unwrap();
        prop_assert_eq!(b.len(), n);
        for (x, y) in a.samples().iter().zip(b.samples()) {
            prop_assert!((x - y).abs() <= 1.0 / 32768.0);
        }
    }
}
