//! Command-line front end: `kws <subcommand>`.

pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use kws_core::audio::{read_wav_file, write_wav_file};
use kws_core::augment::{speed_perturb, volume_perturb};
use kws_core::checkpoint::Checkpoint;
use kws_core::data::{AudioSet, FeatureSet, LabelMap, Split};
use kws_core::frontend::LogMel;
use kws_core::prepare::{data_dir, prepare, PrepareConfig};
use kws_core::trainer::{self, Metrics, SWEEP_HEADER};
use kws_core::{gradsuite, Error};

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(clap::Error),
    Run(Error),
    /// The gradient sweep ran but some case exceeded the tolerance.
    GradCheck(usize),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(e) => write!(f, "{e}"),
            CliError::Run(e) => write!(f, "{e}"),
            CliError::GradCheck(n) => write!(f, "{n} gradient case(s) above tolerance"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl CliError {
    /// 0 success, 1 failed gradient check, 2 usage/data/parameter errors,
    /// 3 numeric aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(e) => e.exit_code(),
            CliError::Run(e) => e.exit_code(),
            CliError::GradCheck(_) => 1,
        }
    }
}

fn workspace_args(cmd: Command, default_name: Option<&'static str>) -> Command {
    let cmd = cmd
        .arg(Arg::new("out").long("out").value_name("DIR").default_value(".").help("Workspace directory; relative paths resolve against it"))
        .arg(Arg::new("config").long("config").value_name("FILE").help("key = value configuration file [default: none]"));
    let cmd = match default_name {
        Some(name) => cmd.arg(Arg::new("name").long("name").value_name("NAME").default_value(name).help("Run directory under <out>/runs")),
        None => cmd,
    };
    config::KEYS.iter().fold(cmd, |cmd, key| {
        let default = key.get(&RunConfig::default());
        let shown = if default.is_empty() { "none".to_string() } else { default };
        cmd.arg(
            Arg::new(key.name)
                .long(key.flag())
                .value_name("VALUE")
                .help(format!("{} [default: {shown}]", key.help))
                .help_heading("Configuration"),
        )
    })
}

pub fn command() -> Command {
    Command::new("kws")
        .about("Keyword spotting with augmentation-based pre-training")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(workspace_args(Command::new("toygen").about("Write the synthetic toy corpus to <out>/toy"), None))
        .subcommand(workspace_args(Command::new("prepare").about("Scan, split, corrupt and featurize a corpus into <out>/data"), None))
        .subcommand(
            Command::new("augment")
                .about("Speed/volume perturb one WAV file (clamped to [-1, 1] only when written)")
                .arg(Arg::new("in").long("in").value_name("WAV").required(true).help("Input WAV"))
                .arg(Arg::new("out").long("out").value_name("WAV").required(true).help("Output WAV"))
                .arg(Arg::new("speed").long("speed").value_name("RATIO").default_value("1").value_parser(clap::value_parser!(f64)).help("Speed ratio"))
                .arg(Arg::new("volume").long("volume").value_name("RATIO").default_value("1").value_parser(clap::value_parser!(f64)).help("Volume ratio")),
        )
        .subcommand(
            workspace_args(Command::new("pretrain").about("Unsupervised pre-training on the prepared audio"), Some("pretrain"))
                .arg(Arg::new("from").long("from").value_name("CKPT").help("Continue from a pre-training checkpoint [default: none]")),
        )
        .subcommand(
            workspace_args(Command::new("finetune").about("Supervised training; from scratch unless --from is given"), Some("finetune"))
                .arg(Arg::new("from").long("from").value_name("CKPT").help("Pre-training or earlier fine-tuning checkpoint [default: none]")),
        )
        .subcommand(
            workspace_args(Command::new("evaluate").about("Classify one split and print accuracy=<pct>"), Some("evaluate"))
                .arg(Arg::new("from").long("from").value_name("CKPT").default_value("runs/finetune/final.kwsc").help("Checkpoint to score"))
                .arg(Arg::new("split").long("split").value_name("SPLIT").default_value("eval").help("train, dev or eval")),
        )
        .subcommand(workspace_args(Command::new("sweep").about("Fine-tune after each pre-training step count in sweep_steps"), Some("sweep")))
        .subcommand(
            Command::new("gradcheck")
                .about("Finite-difference check of every primitive and composite loss")
                .arg(Arg::new("seed").long("seed").value_name("N").default_value("0").value_parser(clap::value_parser!(u64)).help("Shape and value seed"))
                .arg(
                    Arg::new("tolerance")
                        .long("tolerance")
                        .value_name("REL")
                        .default_value("0.001")
                        .value_parser(clap::value_parser!(f64))
                        .help("Largest accepted relative error"),
                )
                .arg(Arg::new("quiet").long("quiet").action(ArgAction::SetTrue).help("Only print failures and the summary")),
        )
}

struct Workspace {
    out: PathBuf,
    cfg: RunConfig,
}

impl Workspace {
    fn from_matches(m: &ArgMatches) -> Result<Self, CliError> {
        let out = PathBuf::from(m.get_one::<String>("out").expect("defaulted"));
        let mut cfg = match m.get_one::<String>("config") {
            Some(path) => RunConfig::load(Path::new(path))?,
            None => RunConfig::default(),
        };
        for key in config::KEYS {
            if let Some(v) = m.get_one::<String>(key.name) {
                cfg.set(key.name, v)?;
            }
        }
        Ok(Workspace { out, cfg })
    }

    fn path(&self, p: &str) -> PathBuf {
        self.out.join(p)
    }

    fn optional(&self, p: &str) -> Option<PathBuf> {
        (!p.is_empty()).then(|| self.path(p))
    }

    fn data(&self) -> PathBuf {
        data_dir(&self.out)
    }

    fn run_dir(&self, m: &ArgMatches) -> Result<PathBuf, CliError> {
        let dir = self.out.join("runs").join(m.get_one::<String>("name").expect("defaulted"));
        self.cfg.write_resolved(&dir)?;
        Ok(dir)
    }

    fn frontend(&self) -> Result<LogMel, CliError> {
        Ok(LogMel::new(&self.cfg.frontend)?)
    }

    fn split(&self, split: Split) -> Result<FeatureSet, CliError> {
        Ok(FeatureSet::load(&self.data(), split)?)
    }

    fn pretrain_corpus(&self) -> Result<AudioSet, CliError> {
        let source = self.cfg.data.pretrain_source.as_str();
        if source != "unlabeled" && source != "train" {
            return Err(Error::Param(format!("pretrain_source must be unlabeled or train, got {source:?}")).into());
        }
        Ok(AudioSet::load(&AudioSet::path(&self.data(), source))?)
    }
}

fn load_checkpoint(ws: &Workspace, m: &ArgMatches) -> Result<Option<Checkpoint>, CliError> {
    match m.get_one::<String>("from") {
        Some(p) => Ok(Some(Checkpoint::load(&ws.path(p))?)),
        None => Ok(None),
    }
}

fn cmd_toygen(ws: &Workspace) -> Result<(), CliError> {
    let root = ws.path("toy");
    let layout = kws_core::toygen::generate(&root, &ws.cfg.toy)?;
    ws.cfg.write_resolved(&root)?;
    println!("clips={}", layout.clips);
    println!("speech={}", layout.speech.display());
    println!("noise={}", layout.noise.display());
    println!("unlabeled={}", layout.unlabeled.display());
    Ok(())
}

fn cmd_prepare(ws: &Workspace) -> Result<(), CliError> {
    let d = &ws.cfg.data;
    let data_root = ws.optional(&d.data_root).ok_or_else(|| Error::Param("prepare needs --data-root".into()))?;
    let mut p = PrepareConfig::new(data_root, ws.out.clone());
    p.noise_root = ws.optional(&d.noise_root);
    p.unlabeled_root = ws.optional(&d.unlabeled_root);
    p.seed = ws.cfg.train.seed;
    p.corrupt = d.corrupt;
    p.snr_range = (d.snr_min, d.snr_max);
    p.silence_ratio = d.silence_ratio;
    p.canvas_seconds = ws.cfg.train.augment.canvas_seconds;
    p.labels = LabelMap::new(d.words.clone())?;
    p.frontend = ws.cfg.frontend.clone();
    let summary = prepare(&p)?;
    ws.cfg.write_resolved(&ws.data())?;
    println!("records={}", summary.records);
    println!("train={} dev={} eval={}", summary.per_split[0], summary.per_split[1], summary.per_split[2]);
    println!("silence={}", summary.silence);
    println!("unlabeled_segments={} unlabeled_skipped={}", summary.unlabeled_segments, summary.unlabeled_skipped);
    if summary.uncorrupted > 0 {
        eprintln!("warning: {} silent clip(s) left without noise", summary.uncorrupted);
    }
    Ok(())
}

fn cmd_augment(m: &ArgMatches) -> Result<(), CliError> {
    let input = read_wav_file(Path::new(m.get_one::<String>("in").expect("required")))?;
    let speed = *m.get_one::<f64>("speed").expect("defaulted");
    let volume = *m.get_one::<f64>("volume").expect("defaulted");
    let out = volume_perturb(&speed_perturb(&input, speed)?, volume)?;
    let clamped = write_wav_file(Path::new(m.get_one::<String>("out").expect("required")), &out)?;
    eprintln!("clamped={clamped}");
    Ok(())
}

fn cmd_pretrain(ws: &Workspace, m: &ArgMatches) -> Result<(), CliError> {
    let corpus = ws.pretrain_corpus()?;
    let init = load_checkpoint(ws, m)?;
    let dir = ws.run_dir(m)?;
    let out = trainer::pretrain(&ws.cfg.train, &ws.cfg.model, &corpus, &ws.frontend()?, init, Some(&dir), &[])?;
    if let (Some(first), Some(last)) = (out.history.first(), out.history.last()) {
        println!("objective {:.6} -> {:.6}", first.objective(), last.objective());
    }
    if out.stopped_early {
        println!("stopped on plateau at step {}", out.checkpoint.step);
    }
    println!("checkpoint={}", dir.join("final.kwsc").display());
    Ok(())
}

fn cmd_finetune(ws: &Workspace, m: &ArgMatches) -> Result<(), CliError> {
    let train = ws.split(Split::Train)?;
    let dev = ws.split(Split::Dev)?;
    let from = load_checkpoint(ws, m)?;
    let dir = ws.run_dir(m)?;
    let dev = (!dev.is_empty()).then_some(&dev);
    let out = trainer::finetune(&ws.cfg.train, &ws.cfg.model, &train, dev, from, Some(&dir))?;
    if let Some(e) = out.evals.iter().rev().find(|e| e.split == "dev") {
        println!("dev_accuracy={:.2}", 100.0 * e.accuracy);
    }
    println!("checkpoint={}", dir.join("final.kwsc").display());
    Ok(())
}

fn confusion_tsv(metrics: &Metrics, labels: &LabelMap) -> String {
    let n = metrics.confusion.len();
    let name = |i: usize| if i < labels.n_classes() { labels.name(i).to_string() } else { format!("class_{i}") };
    let mut out = String::from("label");
    for j in 0..n {
        out.push('\t');
        out.push_str(&name(j));
    }
    out.push('\n');
    for (i, row) in metrics.confusion.iter().enumerate() {
        out.push_str(&name(i));
        for c in row {
            out.push_str(&format!("\t{c}"));
        }
        out.push('\n');
    }
    out
}

fn cmd_evaluate(ws: &Workspace, m: &ArgMatches) -> Result<(), CliError> {
    let split = Split::parse(m.get_one::<String>("split").expect("defaulted"))?;
    let ck = load_checkpoint(ws, m)?.expect("defaulted");
    let set = ws.split(split)?;
    let metrics = trainer::evaluate(&ck.params, &set)?;
    let dir = ws.run_dir(m)?;
    let labels = LabelMap::new(ws.cfg.data.words.clone())?;
    let path = dir.join(format!("confusion_{split}.tsv"));
    fs::write(&path, confusion_tsv(&metrics, &labels)).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    println!("accuracy={:.2}", 100.0 * metrics.accuracy());
    Ok(())
}

fn cmd_sweep(ws: &Workspace, m: &ArgMatches) -> Result<(), CliError> {
    let corpus = ws.pretrain_corpus()?;
    let train = ws.split(Split::Train)?;
    let dev = ws.split(Split::Dev)?;
    let dir = ws.run_dir(m)?;
    let c = &ws.cfg;
    let rows = trainer::sweep(&c.train, &c.train, &c.model, &corpus, &train, &dev, &ws.frontend()?, &c.sweep_steps, Some(&dir))?;
    println!("{SWEEP_HEADER}");
    for r in &rows {
        println!("{}", r.tsv());
    }
    Ok(())
}

fn cmd_gradcheck(m: &ArgMatches) -> Result<(), CliError> {
    let tolerance = *m.get_one::<f64>("tolerance").expect("defaulted");
    let quiet = m.get_flag("quiet");
    let cases = gradsuite::run(*m.get_one::<u64>("seed").expect("defaulted"))?;
    let mut failed = 0;
    for c in &cases {
        let ok = c.error <= tolerance;
        failed += usize::from(!ok);
        if !ok || !quiet {
            println!("{} {:<16} {:<14} {:.3e}", if ok { "ok  " } else { "FAIL" }, c.name, format!("{:?}", c.shape), c.error);
        }
    }
    let worst = cases.iter().map(|c| c.error).fold(0.0, f64::max);
    println!("cases={} failed={failed} worst={worst:.3e}", cases.len());
    if failed > 0 {
        return Err(CliError::GradCheck(failed));
    }
    Ok(())
}

pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = command().try_get_matches_from(args).map_err(CliError::Usage)?;
    let (name, m) = matches.subcommand().expect("subcommand required");
    match name {
        "augment" => cmd_augment(m),
        "gradcheck" => cmd_gradcheck(m),
        _ => {
            let ws = Workspace::from_matches(m)?;
            match name {
                "toygen" => cmd_toygen(&ws),
                "prepare" => cmd_prepare(&ws),
                "pretrain" => cmd_pretrain(&ws, m),
                "finetune" => cmd_finetune(&ws, m),
                "evaluate" => cmd_evaluate(&ws, m),
                "sweep" => cmd_sweep(&ws, m),
                other => unreachable!("unhandled subcommand {other}"),
            }
        }
    }
}
