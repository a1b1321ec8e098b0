//! Mono PCM16 WAV ingestion and output.

use std::io::Cursor;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono waveform. Samples are nominally in [-1, 1]; augmentation may push
/// them outside, clamping happens only when writing PCM.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Param("audio buffer needs at least one sample".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Param("sample rate must be positive".into()));
        }
        Ok(AudioBuffer { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        mean_square(&self.samples)
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }
}

pub(crate) fn mean_square(samples: &[f32]) -> f64 {
    samples.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / samples.len() as f64
}

fn format_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::WavFormat(format!("truncated or unreadable chunk ({io})")),
        hound::Error::FormatError(msg) => Error::WavFormat(format!("malformed chunk: {msg}")),
        hound::Error::Unsupported => Error::WavFormat("audio format: unsupported encoding".into()),
        other => Error::WavFormat(other.to_string()),
    }
}

/// Decodes mono PCM16 at any sample rate.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer> {
    let reader = WavReader::new(Cursor::new(bytes)).map_err(format_err)?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int {
        return Err(Error::WavFormat("audio format: expected PCM integer samples, found IEEE float".into()));
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::WavFormat(format!("bits_per_sample: expected 16, found {}", spec.bits_per_sample)));
    }
    if spec.channels != 1 {
        return Err(Error::WavFormat(format!("channel count: expected mono, found {} channels", spec.channels)));
    }
    if reader.duration() == 0 {
        return Err(Error::WavFormat("data chunk: empty".into()));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<f32>, _>>()
        .map_err(|e| match e {
            hound::Error::IoError(_) => Error::WavFormat("data chunk: truncated".into()),
            other => format_err(other),
        })?;
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Decodes a mono PCM16 WAV recorded at 16 kHz.
pub fn read_wav(bytes: &[u8]) -> Result<AudioBuffer> {
    let audio = decode_wav(bytes)?;
    if audio.sample_rate() != SAMPLE_RATE {
        return Err(Error::WavFormat(format!(
            "sample_rate: expected {SAMPLE_RATE} Hz, found {} Hz; resample first with \
             `augment::resample` (speed ratio 1 at the target rate)",
            audio.sample_rate()
        )));
    }
    Ok(audio)
}

pub fn read_wav_file(path: &Path) -> Result<AudioBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_wav(&bytes).map_err(|e| match e {
        Error::WavFormat(msg) => Error::WavFormat(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Encodes as PCM16, clamping to [-1, 1]. Returns the bytes and the number of
/// clamped samples.
pub fn encode_wav(audio: &AudioBuffer) -> Result<(Vec<u8>, usize)> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut bytes = Vec::new();
    let mut clamped = 0;
    {
        let mut writer = WavWriter::new(Cursor::new(&mut bytes), spec).map_err(format_err)?;
        for &s in audio.samples() {
            if !(-1.0..=1.0).contains(&s) {
                clamped += 1;
            }
            let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(v).map_err(format_err)?;
        }
        writer.finalize().map_err(format_err)?;
    }
    Ok((bytes, clamped))
}

pub fn write_wav_file(path: &Path, audio: &AudioBuffer) -> Result<usize> {
    let (bytes, clamped) = encode_wav(audio)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(clamped)
}
