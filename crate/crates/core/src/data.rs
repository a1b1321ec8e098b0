//! Dataset discovery, hash-based splits, unlabeled segmentation, on-disk
//! feature/audio stores and batch ordering.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use kws_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::audio::{read_wav_file, AudioBuffer, SAMPLE_RATE};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::rng::stream;

pub const NOISE_DIR: &str = "_background_noise_";
pub const SILENCE_PREFIX: &str = "_silence_";
pub const SEGMENT_SAMPLES: usize = SAMPLE_RATE as usize;

pub const DEFAULT_WORDS: [&str; 10] = ["yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go"];

/// Target words get ids `0..n`, then `unknown = n` and `silence = n + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    words: Vec<String>,
}

impl Default for LabelMap {
    fn default() -> Self {
        LabelMap::new(DEFAULT_WORDS.iter().map(|w| w.to_string()).collect()).expect("default words are distinct")
    }
}

impl LabelMap {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::Param("label map needs at least one target word".into()));
        }
        let distinct: BTreeSet<&String> = words.iter().collect();
        if distinct.len() != words.len() {
            return Err(Error::Param(format!("duplicate target words in {words:?}")));
        }
        if let Some(w) = words.iter().find(|w| w.is_empty() || w.starts_with('_') || w.contains(char::is_whitespace)) {
            return Err(Error::Param(format!("invalid target word {w:?}")));
        }
        Ok(LabelMap { words })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn unknown(&self) -> usize {
        self.words.len()
    }

    pub fn silence(&self) -> usize {
        self.words.len() + 1
    }

    pub fn n_classes(&self) -> usize {
        self.words.len() + 2
    }

    /// Class of a folder name: its target id, or unknown.
    pub fn id_of(&self, word: &str) -> usize {
        self.words.iter().position(|w| w == word).unwrap_or(self.unknown())
    }

    pub fn name(&self, id: usize) -> &str {
        if id < self.words.len() {
            &self.words[id]
        } else if id == self.unknown() {
            "_unknown_"
        } else {
            "_silence_"
        }
    }

    pub fn id_of_name(&self, name: &str) -> Option<usize> {
        (0..self.n_classes()).find(|&i| self.name(i) == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown split {s:?}; expected train, dev or eval")))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Hash key of an utterance id: the file stem with any `_nohash_` suffix
/// removed, so all clips of one speaker share a split.
pub fn split_key(id: &str) -> &str {
    let stem = id.rsplit('/').next().unwrap_or(id);
    match stem.find("_nohash_") {
        Some(i) => &stem[..i],
        None => stem,
    }
}

/// Bucket in `0..100` from the first eight bytes of SHA-256 of the key.
pub fn split_bucket(id: &str) -> u64 {
    let digest = Sha256::digest(split_key(id).as_bytes());
    u64::from_be_bytes(digest[..8].try_into().unwrap()) % 100
}

pub fn split_of(id: &str) -> Split {
    match split_bucket(id) {
        0..80 => Split::Train,
        80..90 => Split::Dev,
        _ => Split::Eval,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    /// Source WAV; for silence records, the background-noise file to crop.
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

impl Record {
    pub fn is_silence(&self) -> bool {
        self.id.starts_with(SILENCE_PREFIX)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub labels: LabelMap,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for r in &self.records {
            c[r.split as usize] += 1;
        }
        c
    }
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Scans `<root>/<word>/*.wav`. Non-target folders become unknown; roughly
/// `silence_ratio` silence records per labeled clip are added when a
/// background-noise folder exists.
pub fn scan_dataset(root: &Path, labels: &LabelMap, silence_ratio: f64) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let mut folders: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    folders.sort();
    let names: Vec<String> = folders.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    if !names.iter().any(|n| labels.words().contains(n)) {
        return Err(Error::Data(format!(
            "no target-word folders under {}; found [{}], expected some of [{}]",
            root.display(),
            names.join(", "),
            labels.words().join(", ")
        )));
    }
    let mut records = Vec::new();
    for (dir, name) in folders.iter().zip(&names) {
        if name.starts_with('_') {
            continue;
        }
        let label = labels.id_of(name);
        for path in wav_files(dir)? {
            let stem = path.file_stem().unwrap().to_string_lossy();
            let id = format!("{name}/{stem}");
            records.push(Record { split: split_of(&id), id, path, label });
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no WAV files under {}", root.display())));
    }
    let noise_dir = root.join(NOISE_DIR);
    let noise_files = if noise_dir.is_dir() { wav_files(&noise_dir)? } else { Vec::new() };
    if !noise_files.is_empty() && silence_ratio > 0.0 {
        let quota = (records.len() as f64 * silence_ratio).round() as usize;
        for i in 0..quota {
            let id = format!("{SILENCE_PREFIX}/silence_{i:04}");
            records.push(Record {
                split: split_of(&id),
                path: noise_files[i % noise_files.len()].clone(),
                id,
                label: labels.silence(),
            });
        }
    }
    Ok(Dataset { labels: labels.clone(), records })
}

/// One-second crop of background noise at a random offset and gain
/// `U(0.1, 1)`, both determined by `(seed, id)`.
pub fn silence_clip(noise: &AudioBuffer, id: &str, seed: u64) -> Result<AudioBuffer> {
    let mut rng = stream(seed, &format!("silence/{id}"));
    let n = noise.len();
    let offset = if n > SEGMENT_SAMPLES { rng.random_range(0..=n - SEGMENT_SAMPLES) } else { 0 };
    let gain = rng.random_range(0.1f32..1.0);
    let samples = (0..SEGMENT_SAMPLES).map(|i| noise.samples()[(offset + i) % n] * gain).collect();
    AudioBuffer::new(samples, noise.sample_rate())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub path: PathBuf,
    pub start: usize,
}

impl Segment {
    pub fn id(&self, root: &Path) -> String {
        let rel = self.path.strip_prefix(root).unwrap_or(&self.path);
        format!("{}@{}", rel.display(), self.start)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UnlabeledCorpus {
    pub segments: Vec<Segment>,
    /// Files shorter than one segment.
    pub skipped: usize,
}

/// Cuts every WAV under `root` into consecutive one-second segments,
/// dropping the remainder.
pub fn segment_unlabeled(root: &Path) -> Result<UnlabeledCorpus> {
    if !root.is_dir() {
        return Err(Error::Data(format!("unlabeled root {} is not a directory", root.display())));
    }
    let mut files: Vec<PathBuf> = WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .map(|e| e.into_path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    let mut corpus = UnlabeledCorpus::default();
    for path in files {
        let len = read_wav_file(&path)?.len();
        if len < SEGMENT_SAMPLES {
            corpus.skipped += 1;
            continue;
        }
        for k in 0..len / SEGMENT_SAMPLES {
            corpus.segments.push(Segment { path: path.clone(), start: k * SEGMENT_SAMPLES });
        }
    }
    Ok(corpus)
}

/// Keeps every non-unknown item and a random subset of unknown items so
/// that unknown makes up about `fraction` of the result.
pub fn balance_unknown(labels: &[usize], unknown: usize, fraction: f64, seed: u64, epoch: u64) -> Vec<usize> {
    let (mut unk, known): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i] == unknown);
    let target = if fraction >= 1.0 {
        unk.len()
    } else {
        ((fraction / (1.0 - fraction)) * known.len() as f64).round() as usize
    };
    if target < unk.len() {
        unk.shuffle(&mut stream(seed, &format!("unknown/{epoch}")));
        unk.truncate(target);
    }
    let mut out = known;
    out.extend(unk);
    out.sort_unstable();
    out
}

/// Seeded shuffle of `items` cut into batches; the last batch may be short.
pub fn batch_order(items: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Param("batch size must be at least 1".into()));
    }
    if items.is_empty() {
        return Err(Error::Data("cannot batch an empty source".into()));
    }
    let mut order = items.to_vec();
    order.shuffle(&mut stream(seed, &format!("batches/{epoch}")));
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Endless stream of batches over successive epochs.
pub struct Batcher {
    items: Vec<usize>,
    labels: Option<(Vec<usize>, usize, f64)>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        let mut b = Batcher {
            items: (0..n).collect(),
            labels: None,
            batch_size,
            seed,
            epoch: 0,
            pending: Vec::new().into_iter(),
        };
        b.pending = batch_order(&b.items, batch_size, seed, 0)?.into_iter();
        Ok(b)
    }

    /// Like [`Batcher::new`] but re-balances unknown items every epoch.
    pub fn balanced(labels: Vec<usize>, unknown: usize, fraction: f64, batch_size: usize, seed: u64) -> Result<Self> {
        let items = balance_unknown(&labels, unknown, fraction, seed, 0);
        let pending = batch_order(&items, batch_size, seed, 0)?.into_iter();
        Ok(Batcher { items, labels: Some((labels, unknown, fraction)), batch_size, seed, epoch: 0, pending })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Result<(u64, Vec<usize>)> {
        loop {
            if let Some(b) = self.pending.next() {
                return Ok((self.epoch, b));
            }
            self.epoch += 1;
            if let Some((labels, unknown, fraction)) = &self.labels {
                self.items = balance_unknown(labels, *unknown, *fraction, self.seed, self.epoch);
            }
            self.pending = batch_order(&self.items, self.batch_size, self.seed, self.epoch)?.into_iter();
        }
    }
}

/// Labeled, equally sized feature matrices of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub features: Vec<FeatureMatrix>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn features_path(dir: &Path, split: Split) -> PathBuf {
        dir.join(format!("features_{split}.kwsc"))
    }

    pub fn index_path(dir: &Path, split: Split) -> PathBuf {
        dir.join(format!("features_{split}.tsv"))
    }

    /// Writes `features_<split>.kwsc` and the `id, label, frames` index.
    pub fn save(&self, dir: &Path, split: Split) -> Result<()> {
        let mut c = Container::new();
        let mut index = String::from("id\tlabel\tframes\n");
        for ((id, label), m) in self.ids.iter().zip(&self.labels).zip(&self.features) {
            c.push(id.clone(), Tensor::new(vec![m.frames(), m.bins()], m.data().to_vec())?)?;
            index.push_str(&format!("{id}\t{label}\t{}\n", m.frames()));
        }
        c.save(&Self::features_path(dir, split))?;
        let path = Self::index_path(dir, split);
        std::fs::write(&path, index).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let index_path = Self::index_path(dir, split);
        let index = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let archive = Container::load(&Self::features_path(dir, split))?;
        let mut set = FeatureSet { ids: Vec::new(), labels: Vec::new(), features: Vec::new() };
        for (n, line) in index.lines().enumerate().skip(1) {
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Data(format!("{}:{}: malformed index row {line:?}", index_path.display(), n + 1));
            if cols.len() != 3 {
                return Err(bad());
            }
            let label = cols[1].parse().map_err(|_| bad())?;
            let t = archive
                .get(cols[0])
                .ok_or_else(|| Error::Data(format!("feature archive lacks {}", cols[0])))?;
            if t.rank() != 2 {
                return Err(Error::Data(format!("features of {} have shape {:?}", cols[0], t.shape())));
            }
            set.features.push(FeatureMatrix::new(t.shape()[0], t.shape()[1], t.data().to_vec())?);
            set.ids.push(cols[0].to_string());
            set.labels.push(label);
        }
        Ok(set)
    }
}

/// Waveforms keyed by utterance id.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSet {
    pub ids: Vec<String>,
    pub audio: Vec<AudioBuffer>,
}

impl AudioSet {
    pub fn path(dir: &Path, name: &str) -> PathBuf {
        dir.join(format!("audio_{name}.kwsc"))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new();
        let rate = self.audio.first().map_or(SAMPLE_RATE, |a| a.sample_rate());
        c.push("meta/sample_rate", Tensor::new(vec![1], vec![rate as f32])?)?;
        for (id, a) in self.ids.iter().zip(&self.audio) {
            if a.sample_rate() != rate {
                return Err(Error::Data(format!("{id} is at {} Hz, archive at {rate} Hz", a.sample_rate())));
            }
            c.push(id.clone(), Tensor::new(vec![a.len()], a.samples().to_vec())?)?;
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        let mut entries = c.into_entries().into_iter();
        let rate = match entries.next() {
            Some((name, t)) if name == "meta/sample_rate" => t.data()[0] as u32,
            _ => return Err(Error::Data(format!("{}: missing meta/sample_rate", path.display()))),
        };
        let mut set = AudioSet { ids: Vec::new(), audio: Vec::new() };
        for (id, t) in entries {
            set.audio.push(AudioBuffer::new(t.into_data(), rate)?);
            set.ids.push(id);
        }
        Ok(set)
    }
}
