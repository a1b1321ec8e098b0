//! Materializes a scanned dataset: noise corruption, canvas featurization and
//! the manifest, feature and audio archives under `<out>/data/`.

use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::audio::{read_wav_file, AudioBuffer};
use crate::augment::fit_canvas;
use crate::data::{scan_dataset, segment_unlabeled, silence_clip, AudioSet, Dataset, FeatureSet, LabelMap, Split, SEGMENT_SAMPLES};
use crate::error::{Error, Result};
use crate::frontend::{FrontendConfig, LogMel};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq)]
pub struct PrepareConfig {
    pub data_root: PathBuf,
    /// Corruption noise; required when `corrupt` is set.
    pub noise_root: Option<PathBuf>,
    pub unlabeled_root: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub corrupt: bool,
    pub snr_range: (f64, f64),
    pub silence_ratio: f64,
    pub canvas_seconds: f64,
    pub labels: LabelMap,
    pub frontend: FrontendConfig,
}

impl PrepareConfig {
    pub fn new(data_root: PathBuf, out: PathBuf) -> Self {
        PrepareConfig {
            data_root,
            noise_root: None,
            unlabeled_root: None,
            out,
            seed: 0,
            corrupt: true,
            snr_range: (0.0, 20.0),
            silence_ratio: 0.1,
            canvas_seconds: 1.25,
            labels: LabelMap::default(),
            frontend: FrontendConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrepareSummary {
    pub records: usize,
    pub per_split: [usize; 3],
    pub silence: usize,
    pub unlabeled_segments: usize,
    pub unlabeled_skipped: usize,
    /// Clips left clean because they carry no energy to set an SNR against.
    pub uncorrupted: usize,
}

pub fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

pub fn manifest_path(out: &Path) -> PathBuf {
    data_dir(out).join("manifest.tsv")
}

fn load_noise(root: &Path) -> Result<Vec<AudioBuffer>> {
    if !root.is_dir() {
        return Err(Error::Data(format!("noise directory {} does not exist", root.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("noise directory {} holds no WAV files", root.display())));
    }
    files.iter().map(|p| read_wav_file(p)).collect()
}

struct Corruptor {
    noise: Vec<AudioBuffer>,
    snr: (f64, f64),
    seed: u64,
}

impl Corruptor {
    /// Mixes a noise file chosen by `(seed, id)` at an SNR drawn from the range.
    fn apply(&self, id: &str, audio: AudioBuffer, summary: &mut PrepareSummary) -> Result<AudioBuffer> {
        let mut rng = stream(self.seed, &format!("corrupt/{id}"));
        let which = rng.random_range(0..self.noise.len());
        let snr = rng.random_range(self.snr.0..=self.snr.1);
        match crate::noise::mix_at_snr(&audio, &self.noise[which], snr, &mut rng) {
            Ok(mixed) => Ok(mixed),
            Err(Error::Degenerate(_)) => {
                summary.uncorrupted += 1;
                Ok(audio)
            }
            Err(e) => Err(e),
        }
    }
}

fn load_record_audio(dataset: &Dataset, i: usize, seed: u64) -> Result<AudioBuffer> {
    let r = &dataset.records[i];
    let audio = read_wav_file(&r.path)?;
    if r.is_silence() {
        silence_clip(&audio, &r.id, seed)
    } else {
        Ok(audio)
    }
}

/// Scans, splits, corrupts and featurizes; writes everything under
/// `<out>/data/`. Output is a pure function of the inputs and seed.
pub fn prepare(cfg: &PrepareConfig) -> Result<PrepareSummary> {
    cfg.frontend.validate()?;
    if !(cfg.snr_range.0 <= cfg.snr_range.1) {
        return Err(Error::Param(format!("snr range {:?} is empty", cfg.snr_range)));
    }
    let corruptor = if cfg.corrupt {
        let root = cfg
            .noise_root
            .as_ref()
            .ok_or_else(|| Error::Data("noise corruption is enabled but no noise directory was given".into()))?;
        Some(Corruptor { noise: load_noise(root)?, snr: cfg.snr_range, seed: cfg.seed })
    } else {
        None
    };
    let dataset = scan_dataset(&cfg.data_root, &cfg.labels, cfg.silence_ratio)?;
    let dir = data_dir(&cfg.out);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let frontend = LogMel::new(&cfg.frontend)?;
    let canvas = (cfg.canvas_seconds * cfg.frontend.sample_rate as f64).round() as usize;

    let mut summary = PrepareSummary { records: dataset.records.len(), per_split: dataset.counts(), ..Default::default() };
    let mut manifest = String::from("id\tpath\tlabel\tsplit\n");
    for r in &dataset.records {
        let rel = r.path.strip_prefix(&cfg.data_root).unwrap_or(&r.path);
        manifest.push_str(&format!("{}\t{}\t{}\t{}\n", r.id, rel.display(), cfg.labels.name(r.label), r.split));
        summary.silence += r.is_silence() as usize;
    }
    let path = manifest_path(&cfg.out);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;

    for split in Split::ALL {
        let mut features = FeatureSet { ids: Vec::new(), labels: Vec::new(), features: Vec::new() };
        let mut audio = AudioSet { ids: Vec::new(), audio: Vec::new() };
        for (i, r) in dataset.records.iter().enumerate().filter(|(_, r)| r.split == split) {
            let mut clip = load_record_audio(&dataset, i, cfg.seed)?;
            if let Some(c) = &corruptor {
                clip = c.apply(&r.id, clip, &mut summary)?;
            }
            features.features.push(frontend.compute(&fit_canvas(&clip, canvas)?)?);
            features.ids.push(r.id.clone());
            features.labels.push(r.label);
            audio.ids.push(r.id.clone());
            audio.audio.push(clip);
        }
        features.save(&dir, split)?;
        audio.save(&AudioSet::path(&dir, split.name()))?;
    }

    if let Some(root) = &cfg.unlabeled_root {
        let corpus = segment_unlabeled(root)?;
        summary.unlabeled_segments = corpus.segments.len();
        summary.unlabeled_skipped = corpus.skipped;
        let mut set = AudioSet { ids: Vec::new(), audio: Vec::new() };
        let mut current: Option<(PathBuf, AudioBuffer)> = None;
        for seg in &corpus.segments {
            if current.as_ref().is_none_or(|(p, _)| p != &seg.path) {
                current = Some((seg.path.clone(), read_wav_file(&seg.path)?));
            }
            let source = &current.as_ref().unwrap().1;
            let id = format!("unlabeled/{}", seg.id(root));
            let mut clip = AudioBuffer::new(
                source.samples()[seg.start..seg.start + SEGMENT_SAMPLES].to_vec(),
                source.sample_rate(),
            )?;
            if let Some(c) = &corruptor {
                clip = c.apply(&id, clip, &mut summary)?;
            }
            set.ids.push(id);
            set.audio.push(clip);
        }
        if !set.ids.is_empty() {
            set.save(&AudioSet::path(&dir, "unlabeled"))?;
        }
    }
    Ok(summary)
}
