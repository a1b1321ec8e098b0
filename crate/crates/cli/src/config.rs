//! Flat `key = value` run configuration. Every key is also a command-line
//! flag (`--key-name`); flags win over the file, the file over defaults.

use std::fmt::Write as _;
use std::path::Path;

use kws_core::data::DEFAULT_WORDS;
use kws_core::frontend::FrontendConfig;
use kws_core::model::ModelConfig;
use kws_core::toygen::ToyConfig;
use kws_core::trainer::{Objective, TrainConfig};
use kws_core::{Error, Result};

/// Dataset preparation settings. Paths are relative to the workspace.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub data_root: String,
    pub noise_root: String,
    pub unlabeled_root: String,
    pub corrupt: bool,
    pub snr_min: f64,
    pub snr_max: f64,
    pub silence_ratio: f64,
    pub words: Vec<String>,
    /// Audio archive used for pre-training: `unlabeled` or `train`.
    pub pretrain_source: String,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            data_root: String::new(),
            noise_root: String::new(),
            unlabeled_root: String::new(),
            corrupt: true,
            snr_min: 0.0,
            snr_max: 20.0,
            silence_ratio: 0.1,
            words: DEFAULT_WORDS.iter().map(|w| w.to_string()).collect(),
            pretrain_source: "unlabeled".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub frontend: FrontendConfig,
    pub model: ModelConfig,
    /// Also carries the seed, loss weights, augmentation and mask settings.
    pub train: TrainConfig,
    pub data: DataSettings,
    pub toy: ToyConfig,
    pub sweep_steps: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            frontend: FrontendConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataSettings::default(),
            toy: ToyConfig::default(),
            sweep_steps: vec![0, 5000, 10_000, 20_000, 30_000],
        }
    }
}

trait Value: Sized {
    fn show(&self) -> String;
    fn read(s: &str) -> std::result::Result<Self, String>;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn show(&self) -> String {
                self.to_string()
            }
            fn read(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
        }
    )*};
}

plain_value!(u32, u64, usize, f64, bool, String);

impl Value for Objective {
    fn show(&self) -> String {
        self.name().into()
    }
    fn read(s: &str) -> std::result::Result<Self, String> {
        Objective::parse(s).map_err(|e| e.to_string())
    }
}

impl<T: Value> Value for Vec<T> {
    fn show(&self) -> String {
        self.iter().map(Value::show).collect::<Vec<_>>().join(",")
    }
    fn read(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(T::read).collect()
    }
}

pub struct Key {
    pub name: &'static str,
    pub help: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> std::result::Result<(), String>,
}

impl Key {
    pub fn flag(&self) -> String {
        self.name.replace('_', "-")
    }

    pub fn get(&self, cfg: &RunConfig) -> String {
        (self.get)(cfg)
    }
}

macro_rules! key {
    ($name:literal, $help:literal, $($path:tt).+) => {
        Key {
            name: $name,
            help: $help,
            get: |c| Value::show(&c.$($path).+),
            set: |c, v| {
                c.$($path).+ = Value::read(v)?;
                Ok(())
            },
        }
    };
}

pub static KEYS: &[Key] = &[
    key!("seed", "Seed for every random stream of a run", train.seed),
    // frontend
    key!("sample_rate", "Feature sample rate in Hz", frontend.sample_rate),
    key!("window", "Analysis window in samples", frontend.window),
    key!("hop", "Frame shift in samples", frontend.hop),
    key!("n_fft", "FFT size", frontend.n_fft),
    key!("n_mels", "Mel bands", frontend.n_mels),
    key!("f_min", "Lowest mel edge in Hz", frontend.f_min),
    key!("f_max", "Highest mel edge in Hz", frontend.f_max),
    key!("log_floor", "Floor added before the log", frontend.log_floor),
    key!("normalize", "Per-utterance mean/variance normalization", frontend.normalize),
    // augmentation
    key!("speed_min", "Lower speed ratio", train.augment.speed_range.0),
    key!("speed_max", "Upper speed ratio", train.augment.speed_range.1),
    key!("volume_min", "Lower volume ratio", train.augment.volume_range.0),
    key!("volume_max", "Upper volume ratio", train.augment.volume_range.1),
    key!("use_speed", "Apply speed perturbation to pairs", train.augment.use_speed),
    key!("use_volume", "Apply volume perturbation to pairs", train.augment.use_volume),
    key!("canvas_seconds", "Fixed clip length fed to the model", train.augment.canvas_seconds),
    // model
    key!("n_conv", "Convolution layers", model.n_conv),
    key!("conv_channels", "Channels per convolution layer", model.conv_channels),
    key!("kernel", "Convolution kernel size", model.kernel),
    key!("stride", "Convolution stride", model.stride),
    key!("n_attn", "Self-attention layers", model.n_attn),
    key!("d_model", "Attention width", model.d_model),
    key!("n_heads", "Attention heads", model.n_heads),
    key!("d_ff", "Feed-forward width", model.d_ff),
    key!("last_frames", "Final encoder steps joined for the bottleneck", model.r),
    key!("d_bottleneck", "Bottleneck width", model.d_bottleneck),
    key!("n_classes", "Output classes", model.n_classes),
    key!("d_feat", "Input feature width", model.d_feat),
    key!("d_recon", "Reconstruction head width", model.d_recon),
    key!("dropout", "Dropout rate during training", model.dropout),
    key!("positional", "Add sinusoidal positions", model.positional),
    key!("norm_eps", "Layer-norm epsilon", model.norm_eps),
    // training
    key!("steps", "Optimizer steps", train.steps),
    key!("batch_size", "Examples (or pairs) per step", train.batch_size),
    key!("lr", "Adam learning rate", train.adam.lr),
    key!("beta1", "Adam first-moment decay", train.adam.beta1),
    key!("beta2", "Adam second-moment decay", train.adam.beta2),
    key!("adam_eps", "Adam epsilon", train.adam.eps),
    key!("warmup_steps", "Linear warmup steps, 0 for none", train.warmup_steps),
    key!("weight_sim", "Weight of the pair similarity loss", train.weights.sim),
    key!("weight_recon", "Weight of the original reconstruction loss", train.weights.recon),
    key!("weight_recon_aug", "Weight of the augmented reconstruction loss", train.weights.recon_aug),
    key!("eval_every", "Steps between dev evaluations", train.eval_every),
    key!("checkpoint_every", "Steps between checkpoints", train.checkpoint_every),
    key!("objective", "Pre-training objective: proposed, apc or mpc", train.objective),
    key!("apc_shift", "Steps ahead predicted by apc", train.apc_shift),
    key!("mask_choose", "Share of units chosen by mpc", train.mask.choose),
    key!("mask_zero", "Share of chosen units zeroed", train.mask.zero),
    key!("mask_swap", "Share of chosen units swapped", train.mask.swap),
    key!("unknown_fraction", "Share of unknown-word items per fine-tuning epoch", train.unknown_fraction),
    key!("plateau_stop", "Stop when the loss plateaus", train.plateau_stop),
    key!("plateau_window", "Steps per plateau window", train.plateau_window),
    key!("plateau_tolerance", "Relative improvement counted as a plateau", train.plateau_tolerance),
    key!("target_accuracy", "Dev accuracy counted as converged", train.target_accuracy),
    key!("eval_train", "Also score the training split", train.eval_train),
    key!("sweep_steps", "Pre-training step counts for sweep", sweep_steps),
    // data
    key!("data_root", "Word folders to prepare", data.data_root),
    key!("noise_root", "Corruption noise folder", data.noise_root),
    key!("unlabeled_root", "Long recordings for pre-training", data.unlabeled_root),
    key!("corrupt", "Mix noise into every clip", data.corrupt),
    key!("snr_min", "Lowest corruption SNR in dB", data.snr_min),
    key!("snr_max", "Highest corruption SNR in dB", data.snr_max),
    key!("silence_ratio", "Silence clips per labeled clip", data.silence_ratio),
    key!("words", "Target words, in label order", data.words),
    key!("pretrain_source", "Pre-training audio: unlabeled or train", data.pretrain_source),
    // toy corpus
    key!("toy_words", "Toy corpus words", toy.words),
    key!("toy_clips_per_word", "Toy clips per word", toy.clips_per_word),
    key!("toy_speakers", "Toy speakers", toy.speakers),
    key!("toy_noise_seconds", "Length of each toy noise file", toy.noise_seconds),
    key!("toy_unlabeled_files", "Toy unlabeled recordings", toy.unlabeled_files),
    key!("toy_unlabeled_seconds", "Length of each toy unlabeled recording", toy.unlabeled_seconds),
];

pub fn find_key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = find_key(key).ok_or_else(|| Error::Param(format!("unknown configuration key {key:?}")))?;
        (k.set)(self, value).map_err(|e| Error::Param(format!("{key} = {value:?}: {e}")))?;
        self.toy.seed = self.train.seed;
        Ok(())
    }

    /// Applies a configuration text on top of the current values.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Param(format!("{origin}:{}: expected key = value, got {raw:?}", n + 1)))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(Error::Param(format!("{origin}:{}: {key} given twice", n + 1)));
            }
            seen.push(key);
            self.set(key, value.trim()).map_err(|e| Error::Param(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Param(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Every key with its current value, in table order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{} = {}", k.name, k.get(self));
        }
        out
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Param(format!("{}: {e}", dir.display())))?;
        let path = dir.join("config.resolved");
        std::fs::write(&path, self.render()).map_err(|e| Error::Param(format!("{}: {e}", path.display())))
    }
}
