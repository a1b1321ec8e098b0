//! Pre-training, fine-tuning, evaluation and the pre-training-steps sweep.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use kws_tensor::{Adam, AdamConfig, Gradients, Tape, Tensor, TensorError, Var};

use crate::augment::{fit_canvas, make_pair_with, AugmentSpec};
use crate::checkpoint::{Checkpoint, OptimizerState, Stage};
use crate::data::{AudioSet, Batcher, FeatureSet};
use crate::error::{Error, Result};
use crate::frontend::{FeatureMatrix, LogMel};
use crate::model::{encode, frame_head, linear, stack_features, HeadSet, KwsParams, ModelConfig, Weights};
use crate::objectives::{
    apc_loss, block_means, ce_loss, mask_weights, mpc_loss, recon_loss, sim_loss, unsup_loss, LossReport, LossWeights,
    MaskConfig, MaskCounts, MaskPlan,
};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Proposed,
    Apc,
    Mpc,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Proposed => "proposed",
            Objective::Apc => "apc",
            Objective::Mpc => "mpc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(Objective::Proposed),
            "apc" => Ok(Objective::Apc),
            "mpc" => Ok(Objective::Mpc),
            other => Err(Error::Param(format!("unknown objective {other:?}; expected proposed, apc or mpc"))),
        }
    }

    fn heads(self) -> HeadSet {
        HeadSet {
            reconstruct: self == Objective::Proposed,
            apc: self == Objective::Apc,
            mpc: self == Objective::Mpc,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Linear warmup length; 0 keeps the rate constant.
    pub warmup_steps: u64,
    pub seed: u64,
    pub weights: LossWeights,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub objective: Objective,
    pub apc_shift: usize,
    pub mask: MaskConfig,
    pub augment: AugmentSpec,
    /// Target share of unknown-class items per fine-tuning epoch.
    pub unknown_fraction: f64,
    /// Stop once the mean loss over `plateau_window` steps improves on the
    /// previous window by less than `plateau_tolerance` (relative).
    pub plateau_stop: bool,
    pub plateau_window: u64,
    pub plateau_tolerance: f64,
    /// Dev accuracy that counts as converged for the sweep report.
    pub target_accuracy: f64,
    /// Also score the training split at each evaluation.
    pub eval_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 30_000,
            batch_size: 200,
            adam: AdamConfig::default(),
            warmup_steps: 0,
            seed: 0,
            weights: LossWeights::default(),
            eval_every: 500,
            checkpoint_every: 1000,
            objective: Objective::Proposed,
            apc_shift: 3,
            mask: MaskConfig::default(),
            augment: AugmentSpec::default(),
            unknown_fraction: 0.1,
            plateau_stop: false,
            plateau_window: 1000,
            plateau_tolerance: 1e-4,
            target_accuracy: 0.9,
            eval_train: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Param(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        if self.apc_shift == 0 {
            return Err(Error::Param("apc_shift must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.unknown_fraction) {
            return Err(Error::Param(format!("unknown_fraction {} outside [0, 1]", self.unknown_fraction)));
        }
        self.weights.validate()?;
        self.augment.validate()
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.adam.lr
        } else {
            self.adam.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// One row of the per-step log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub losses: LossReport,
    pub lr: f64,
    pub wall_ms: f64,
    /// Mean over bottleneck units of the across-batch standard deviation.
    pub ebn_std: f64,
}

impl StepRecord {
    /// The value being minimized at this step.
    pub fn objective(&self) -> f64 {
        self.losses.l_ul.or(self.losses.l_ce).unwrap_or(f64::NAN)
    }
}

pub const METRICS_HEADER: &str = "step\tl_ce\tl_sim\tl_x\tl_x_aug\tl_ul\tlr\twall_ms\tebn_std";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

impl StepRecord {
    pub fn tsv(&self) -> String {
        let l = &self.losses;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.3}\t{}",
            self.step,
            cell(l.l_ce),
            cell(l.l_sim),
            cell(l.l_x),
            cell(l.l_x_aug),
            cell(l.l_ul),
            self.lr,
            self.wall_ms,
            self.ebn_std
        )
    }
}

/// Per-run output directory.
struct RunFiles {
    dir: PathBuf,
    metrics: BufWriter<File>,
    eval: Option<BufWriter<File>>,
    mask: Option<BufWriter<File>>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_line(w: &mut BufWriter<File>, dir: &Path, line: &str) -> Result<()> {
    writeln!(w, "{line}").map_err(|e| Error::io(dir, e))
}

impl RunFiles {
    fn open(dir: &Path, eval: bool, mask: bool) -> Result<Self> {
        std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        let mut metrics = create(&dir.join("metrics.tsv"))?;
        write_line(&mut metrics, dir, METRICS_HEADER)?;
        let eval = if eval {
            let mut w = create(&dir.join("eval.tsv"))?;
            write_line(&mut w, dir, "step\tsplit\taccuracy")?;
            Some(w)
        } else {
            None
        };
        let mask = if mask {
            let mut w = create(&dir.join("mpc_mask.tsv"))?;
            write_line(&mut w, dir, "step\tunits\tchosen\tzero\tswap\tunchanged")?;
            Some(w)
        } else {
            None
        };
        Ok(RunFiles { dir: dir.to_path_buf(), metrics, eval, mask })
    }

    fn flush(&mut self) -> Result<()> {
        for w in [Some(&mut self.metrics), self.eval.as_mut(), self.mask.as_mut()].into_iter().flatten() {
            w.flush().map_err(|e| Error::io(&self.dir, e))?;
        }
        Ok(())
    }

    fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.dir.join("checkpoints").join(format!("step_{step:06}.kwsc"))
    }
}

fn ebn_std(e_bn: &Tensor<f32>, rows: usize) -> f64 {
    let d = e_bn.shape()[1];
    if rows < 2 {
        return 0.0;
    }
    let data = e_bn.data();
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..rows).map(|i| data[i * d + j] as f64).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|i| (data[i * d + j] as f64 - mean).powi(2)).sum::<f64>() / rows as f64;
        total += var.sqrt();
    }
    total / d as f64
}

/// Trainable state: parameters plus optimizer.
struct Learner {
    params: KwsParams<f32>,
    adam: Adam<f32>,
}

impl Learner {
    fn from_checkpoint(ck: &Checkpoint, config: AdamConfig) -> Self {
        let adam = match &ck.optimizer {
            Some(o) => Adam::from_state(config, o.step, o.moments.clone()),
            None => Adam::new(config),
        };
        Learner { params: ck.params.clone(), adam }
    }

    fn checkpoint(&self, step: u64, stage: Stage) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            step,
            stage,
            optimizer: Some(OptimizerState { step: self.adam.step_count(), moments: self.adam.moments().clone() }),
        }
    }

    fn update(&mut self, vars: &Weights<Var>, mut grads: Gradients<f32>, lr: f64) -> std::result::Result<(), TensorError> {
        let grads = vars.map(|_, v| grads.take(*v));
        let mut entries: Vec<(String, &mut Tensor<f32>)> = self.params.weights.entries_mut();
        let grad_entries = grads.entries();
        let mut list: Vec<(&str, &mut Tensor<f32>, &Tensor<f32>)> = entries
            .iter_mut()
            .zip(&grad_entries)
            .map(|((name, p), (_, g))| (name.as_str(), &mut **p, *g))
            .collect();
        self.adam.step_with_lr(lr, &mut list)
    }
}

fn scalar(tape: &Tape<f32>, v: Var) -> f64 {
    tape.value(v).item() as f64
}

/// Loss values and the tape needed for one parameter update.
struct StepGraph {
    tape: Tape<f32>,
    vars: Weights<Var>,
    loss: Var,
    losses: LossReport,
    ebn_std: f64,
    mask: Option<MaskCounts>,
}

struct Plateau {
    window: u64,
    tolerance: f64,
    values: Vec<f64>,
}

impl Plateau {
    fn push(&mut self, v: f64) -> bool {
        if self.window == 0 {
            return false;
        }
        self.values.push(v);
        let w = self.window as usize;
        if self.values.len() < 2 * w || self.values.len() % w != 0 {
            return false;
        }
        let n = self.values.len();
        let prev = self.values[n - 2 * w..n - w].iter().sum::<f64>() / w as f64;
        let cur = self.values[n - w..].iter().sum::<f64>() / w as f64;
        (prev - cur) / prev.abs().max(1e-12) < self.tolerance
    }
}

/// Shared step loop: builds a graph per step, updates, logs and checkpoints.
#[allow(clippy::too_many_arguments)]
fn run_loop(
    cfg: &TrainConfig,
    learner: &mut Learner,
    stage: Stage,
    first_step: u64,
    files: &mut Option<RunFiles>,
    snapshots: &[u64],
    mut build: impl FnMut(&KwsParams<f32>, u64) -> Result<StepGraph>,
    mut on_step: impl FnMut(&KwsParams<f32>, u64, &mut Option<RunFiles>) -> Result<()>,
) -> Result<(Vec<StepRecord>, Vec<(u64, Checkpoint)>, MaskCounts, bool)> {
    let mut history = Vec::new();
    let mut taken = Vec::new();
    let mut mask_total = MaskCounts::default();
    let window = if cfg.plateau_stop { cfg.plateau_window } else { 0 };
    let mut plateau = Plateau { window, tolerance: cfg.plateau_tolerance, values: Vec::new() };
    let mut last_good: Option<PathBuf> = None;
    if snapshots.contains(&first_step) {
        taken.push((first_step, learner.checkpoint(first_step, stage)));
    }
    let mut stopped_early = false;
    for step in first_step..first_step + cfg.steps {
        let started = Instant::now();
        let lr = cfg.lr_at(step - first_step);
        let g = build(&learner.params, step)?;
        let loss_value = scalar(&g.tape, g.loss);
        let abort = |msg: String, learner: &Learner, last_good: &Option<PathBuf>, files: &mut Option<RunFiles>| {
            let mut kept = last_good.clone();
            if let Some(f) = files.as_mut() {
                let _ = f.flush();
                let path = f.dir.join("last_good.kwsc");
                if learner.checkpoint(step, stage).save(&path).is_ok() {
                    kept = Some(path);
                }
            }
            Error::NumericAbort { step, msg, last_good: kept }
        };
        if !loss_value.is_finite() {
            let origin = g.tape.first_overflow().map(|op| format!(" (first overflow in {op})")).unwrap_or_default();
            return Err(abort(format!("loss is {loss_value}{origin}"), learner, &last_good, files));
        }
        let grads = g.tape.backward(g.loss)?;
        if let Err(e) = learner.update(&g.vars, grads, lr) {
            return Err(match e {
                TensorError::NonFiniteGradient(name) => {
                    abort(format!("non-finite gradient for {name}"), learner, &last_good, files)
                }
                other => other.into(),
            });
        }
        let record = StepRecord {
            step: step + 1,
            losses: g.losses,
            lr,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            ebn_std: g.ebn_std,
        };
        history.push(record);
        let done = step + 1;
        if let Some(f) = files.as_mut() {
            write_line(&mut f.metrics, &f.dir, &record.tsv())?;
            if let (Some(m), Some(w)) = (g.mask, f.mask.as_mut()) {
                let line = format!("{done}\t{}\t{}\t{}\t{}\t{}", m.units, m.chosen, m.zero, m.swap, m.unchanged);
                write_line(w, &f.dir, &line)?;
            }
        }
        if let Some(m) = g.mask {
            mask_total.add(&m);
        }
        on_step(&learner.params, done, files)?;
        if snapshots.contains(&done) {
            taken.push((done, learner.checkpoint(done, stage)));
        }
        if let Some(f) = files.as_mut() {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                let path = f.checkpoint_path(done);
                learner.checkpoint(done, stage).save(&path)?;
                last_good = Some(path);
                f.flush()?;
            }
        }
        if plateau.push(record.objective()) {
            stopped_early = true;
            break;
        }
    }
    if let Some(f) = files.as_mut() {
        f.flush()?;
    }
    Ok((history, taken, mask_total, stopped_early))
}

/// Advances a fresh batch stream past the batches a resumed run already used.
fn skip_batches(batcher: &mut Batcher, steps: u64) -> Result<()> {
    for _ in 0..steps {
        batcher.next_batch()?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepRecord>,
    /// Checkpoints at the requested step counts, in step order.
    pub snapshots: Vec<(u64, Checkpoint)>,
    pub mask_counts: MaskCounts,
    pub stopped_early: bool,
}

fn pair_rng_tag(epoch: u64, id: &str) -> String {
    format!("pair/{epoch}/{id}")
}

/// Unsupervised pre-training on `corpus` with the configured objective.
/// `init` continues from an earlier pre-training checkpoint.
pub fn pretrain(
    cfg: &TrainConfig,
    model: &ModelConfig,
    corpus: &AudioSet,
    frontend: &LogMel,
    init: Option<Checkpoint>,
    run_dir: Option<&Path>,
    snapshots: &[u64],
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("pre-training corpus is empty".into()));
    }
    let start = match init {
        Some(mut ck) => {
            if ck.stage != Stage::Pretrain {
                return Err(Error::Checkpoint(format!(
                    "cannot continue pre-training from a {} checkpoint",
                    ck.stage.name()
                )));
            }
            ck.params.adopt_config(model)?;
            ck
        }
        None => Checkpoint::new(KwsParams::init(model, cfg.objective.heads(), cfg.seed)?, 0, Stage::Pretrain),
    };
    let needed = cfg.objective.heads();
    let have = start.params.heads();
    if (needed.reconstruct && !have.reconstruct) || (needed.apc && !have.apc) || (needed.mpc && !have.mpc) {
        return Err(Error::Checkpoint(format!("checkpoint lacks the {} head", cfg.objective.name())));
    }
    let first_step = start.step;
    let mut learner = Learner::from_checkpoint(&start, cfg.adam);
    let config = start.params.config.clone();
    let canvas = cfg.augment.canvas_samples(frontend.config().sample_rate);
    let originals: Vec<FeatureMatrix> = if cfg.objective == Objective::Proposed {
        Vec::new()
    } else {
        corpus.audio.iter().map(|a| frontend.compute(&fit_canvas(a, canvas)?)).collect::<Result<_>>()?
    };
    let mut batcher = Batcher::new(corpus.len(), cfg.batch_size, cfg.seed)?;
    skip_batches(&mut batcher, first_step)?;
    let mut files = run_dir
        .map(|d| RunFiles::open(d, false, cfg.objective == Objective::Mpc))
        .transpose()?;

    let build = |params: &KwsParams<f32>, step: u64| -> Result<StepGraph> {
        let (epoch, batch) = batcher.next_batch()?;
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, true);
        let mut dropout = stream(cfg.seed, &format!("pretrain/dropout/{step}"));
        let b = batch.len();
        match cfg.objective {
            Objective::Proposed => {
                let mut orig = Vec::with_capacity(b);
                let mut aug = Vec::with_capacity(b);
                for &i in &batch {
                    let (speed, volume) = cfg.augment.draw(&mut stream(cfg.seed, &pair_rng_tag(epoch, &corpus.ids[i])));
                    let pair = make_pair_with(&corpus.audio[i], speed, volume, &cfg.augment, frontend)?;
                    orig.push(pair.original);
                    aug.push(pair.augmented);
                }
                let all: Vec<&FeatureMatrix> = orig.iter().chain(&aug).collect();
                let x = tape.leaf(stack_features(&all)?);
                let enc = encode(&mut tape, &config, &vars, x, Some(&mut dropout))?;
                let head = vars.reconstruct.as_ref().expect("reconstruct head checked above");
                let recon = linear(&mut tape, head, enc.e_bn)?;
                let e_o = tape.slice(enc.e_bn, 0, 0, b)?;
                let e_a = tape.slice(enc.e_bn, 0, b, b)?;
                let l_sim = sim_loss(&mut tape, e_o, e_a)?;
                let x_o = tape.slice(x, 0, 0, b)?;
                let x_a = tape.slice(x, 0, b, b)?;
                let r_o = tape.slice(recon, 0, 0, b)?;
                let r_a = tape.slice(recon, 0, b, b)?;
                let l_x = recon_loss(&mut tape, x_o, r_o)?;
                let l_x_aug = recon_loss(&mut tape, x_a, r_a)?;
                let loss = unsup_loss(&mut tape, l_sim, l_x, l_x_aug, &cfg.weights)?;
                let losses = LossReport {
                    l_ce: None,
                    l_sim: Some(scalar(&tape, l_sim)),
                    l_x: Some(scalar(&tape, l_x)),
                    l_x_aug: Some(scalar(&tape, l_x_aug)),
                    l_ul: Some(scalar(&tape, loss)),
                };
                let ebn_std = ebn_std(tape.value(enc.e_bn), b);
                Ok(StepGraph { tape, vars, loss, losses, ebn_std, mask: None })
            }
            Objective::Apc | Objective::Mpc => {
                let feats: Vec<&FeatureMatrix> = batch.iter().map(|&i| &originals[i]).collect();
                let clean = stack_features::<f32>(&feats)?;
                let steps = config.seq_len(clean.shape()[1]);
                let targets = tape.leaf(block_means(&clean, config.frames_per_step(), steps)?);
                let (loss, mask) = if cfg.objective == Objective::Apc {
                    let x = tape.leaf(clean);
                    let enc = encode(&mut tape, &config, &vars, x, Some(&mut dropout))?;
                    let pred = frame_head(&mut tape, vars.apc.as_ref().expect("apc head"), enc.e_tran)?;
                    (apc_loss(&mut tape, pred, targets, cfg.apc_shift)?, None)
                } else {
                    let mut counts = MaskCounts::default();
                    let mut plans = Vec::with_capacity(b);
                    let mut masked = Vec::with_capacity(b);
                    for &i in &batch {
                        let mut rng = stream(cfg.seed, &format!("mask/{step}/{}", corpus.ids[i]));
                        let plan = MaskPlan::draw(steps, &cfg.mask, &mut rng);
                        let mut m = originals[i].clone();
                        let bins = m.bins();
                        plan.apply(m.data_mut(), bins, config.frames_per_step());
                        counts.add(&plan.counts());
                        plans.push(plan);
                        masked.push(m);
                    }
                    let x = tape.leaf(stack_features(&masked.iter().collect::<Vec<_>>())?);
                    let enc = encode(&mut tape, &config, &vars, x, Some(&mut dropout))?;
                    let pred = frame_head(&mut tape, vars.mpc.as_ref().expect("mpc head"), enc.e_tran)?;
                    let weights = mask_weights(&plans, config.d_feat)?;
                    (mpc_loss(&mut tape, pred, targets, &weights)?, Some(counts))
                };
                let losses = LossReport { l_ul: Some(scalar(&tape, loss)), ..Default::default() };
                Ok(StepGraph { tape, vars, loss, losses, ebn_std: f64::NAN, mask })
            }
        }
    };
    let (history, snaps, mask_counts, stopped_early) =
        run_loop(cfg, &mut learner, Stage::Pretrain, first_step, &mut files, snapshots, build, |_, _, _| Ok(()))?;
    let last = history.last().map_or(first_step, |r| r.step);
    let checkpoint = learner.checkpoint(last, Stage::Pretrain);
    if let Some(d) = run_dir {
        checkpoint.save(&d.join("final.kwsc"))?;
    }
    Ok(PretrainOutcome { checkpoint, history, snapshots: snaps, mask_counts, stopped_early })
}

/// Argmax of each row of `[N, C]` logits; ties go to the lowest class.
pub fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best }))
        .collect()
}

/// Accuracy and confusion counts; rows are true classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Metrics {
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_predictions(n_classes: usize, labels: &[usize], predictions: &[usize]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("cannot evaluate an empty split".into()));
        }
        let mut confusion = vec![vec![0; n_classes]; n_classes];
        for (&y, &p) in labels.iter().zip(predictions) {
            if y >= n_classes || p >= n_classes {
                return Err(Error::Data(format!("class {} outside 0..{n_classes}", y.max(p))));
            }
            confusion[y][p] += 1;
        }
        Ok(Metrics { confusion })
    }

    pub fn from_logits(logits: &Tensor<f32>, labels: &[usize]) -> Result<Self> {
        Self::from_predictions(logits.shape()[1], labels, &argmax_rows(logits))
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.correct() as f64 / self.total() as f64
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.confusion.iter().map(|row| row.iter().sum()).collect()
    }
}

const EVAL_BATCH: usize = 64;

/// Deterministic classification of every item in `set`.
pub fn evaluate(params: &KwsParams<f32>, set: &FeatureSet) -> Result<Metrics> {
    if set.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    if params.weights.project.is_none() {
        return Err(Error::Checkpoint("model has no project head; fine-tune it first".into()));
    }
    let mut predictions = Vec::with_capacity(set.len());
    for chunk in set.features.chunks(EVAL_BATCH) {
        let refs: Vec<&FeatureMatrix> = chunk.iter().collect();
        let logits = params.infer(&refs)?.logits.expect("project head present");
        predictions.extend(argmax_rows(&logits));
    }
    Metrics::from_predictions(params.config.n_classes, &set.labels, &predictions)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    pub split: &'static str,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// First evaluated step whose dev accuracy reached the target.
    pub steps_to_target: Option<u64>,
}

/// Starting point for supervised training.
///
/// A pre-training (or untrained) checkpoint contributes its encoder and
/// bottleneck; the project head is created fresh and other heads dropped.
/// A fine-tuned or supervised checkpoint is continued as is.
pub fn finetune_start(model: &ModelConfig, from: Option<Checkpoint>, seed: u64) -> Result<(Checkpoint, bool)> {
    match from {
        None => Ok((Checkpoint::new(KwsParams::init(model, HeadSet::classifier(), seed)?, 0, Stage::Supervised), false)),
        Some(ck) if matches!(ck.stage, Stage::Pretrain | Stage::Init) => {
            let mut params = ck.params;
            params.adopt_config(model)?;
            params.weights.reconstruct = None;
            params.weights.apc = None;
            params.weights.mpc = None;
            params.reset_project(seed);
            Ok((Checkpoint::new(params, 0, Stage::Finetune), false))
        }
        Some(mut ck) => {
            if ck.params.weights.project.is_none() {
                return Err(Error::Checkpoint(format!("{} checkpoint has no project head", ck.stage.name())));
            }
            ck.params.adopt_config(model)?;
            Ok((ck, true))
        }
    }
}

/// Cross-entropy training on `train`, scoring `dev` every `eval_every` steps.
pub fn finetune(
    cfg: &TrainConfig,
    model: &ModelConfig,
    train: &FeatureSet,
    dev: Option<&FeatureSet>,
    from: Option<Checkpoint>,
    run_dir: Option<&Path>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let (start, _continued) = finetune_start(model, from, cfg.seed)?;
    let stage = start.stage;
    let config = start.params.config.clone();
    if let Some(&bad) = train.labels.iter().find(|&&l| l >= config.n_classes) {
        return Err(Error::Data(format!("label {bad} outside the model's {} classes", config.n_classes)));
    }
    let first_step = start.step;
    let mut learner = Learner::from_checkpoint(&start, cfg.adam);
    let unknown = config.n_classes.saturating_sub(2);
    let mut batcher = Batcher::balanced(train.labels.clone(), unknown, cfg.unknown_fraction, cfg.batch_size, cfg.seed)?;
    skip_batches(&mut batcher, first_step)?;
    let mut files = run_dir.map(|d| RunFiles::open(d, true, false)).transpose()?;
    let mut evals = Vec::new();
    let mut steps_to_target = None;

    let build = |params: &KwsParams<f32>, step: u64| -> Result<StepGraph> {
        let (_, batch) = batcher.next_batch()?;
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, true);
        let feats: Vec<&FeatureMatrix> = batch.iter().map(|&i| &train.features[i]).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
        let x = tape.leaf(stack_features(&feats)?);
        let mut dropout = stream(cfg.seed, &format!("finetune/dropout/{step}"));
        let enc = encode(&mut tape, &config, &vars, x, Some(&mut dropout))?;
        let logits = linear(&mut tape, vars.project.as_ref().expect("project head"), enc.e_bn)?;
        let loss = ce_loss(&mut tape, logits, &labels)?;
        let losses = LossReport { l_ce: Some(scalar(&tape, loss)), ..Default::default() };
        let ebn_std = ebn_std(tape.value(enc.e_bn), batch.len());
        Ok(StepGraph { tape, vars, loss, losses, ebn_std, mask: None })
    };
    let on_step = |params: &KwsParams<f32>, done: u64, files: &mut Option<RunFiles>| -> Result<()> {
        let last = done == first_step + cfg.steps;
        if !(cfg.eval_every > 0 && done % cfg.eval_every == 0) && !last {
            return Ok(());
        }
        let mut sets: Vec<(&'static str, &FeatureSet)> = Vec::new();
        if let Some(d) = dev.filter(|d| !d.is_empty()) {
            sets.push(("dev", d));
        }
        if cfg.eval_train {
            sets.push(("train", train));
        }
        for (name, set) in sets {
            let acc = evaluate(params, set)?.accuracy();
            evals.push(EvalRecord { step: done, split: name, accuracy: acc });
            if name == "dev" && steps_to_target.is_none() && acc >= cfg.target_accuracy {
                steps_to_target = Some(done - first_step);
            }
            if let Some(f) = files.as_mut() {
                if let Some(w) = f.eval.as_mut() {
                    write_line(w, &f.dir, &format!("{done}\t{name}\t{acc}"))?;
                }
            }
        }
        Ok(())
    };
    let (history, _, _, _) = run_loop(cfg, &mut learner, stage, first_step, &mut files, &[], build, on_step)?;
    let last = history.last().map_or(first_step, |r| r.step);
    let checkpoint = learner.checkpoint(last, stage);
    if let Some(d) = run_dir {
        checkpoint.save(&d.join("final.kwsc"))?;
    }
    Ok(FinetuneOutcome { checkpoint, history, evals, steps_to_target })
}

/// Mean bottleneck distance between each clip and a fixed augmented copy,
/// without dropout. Pair ratios come from `seed` and the clip id.
pub fn pair_distance(
    params: &KwsParams<f32>,
    corpus: &AudioSet,
    spec: &AugmentSpec,
    frontend: &LogMel,
    seed: u64,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Data("no clips to measure pair distance on".into()));
    }
    let mut total = 0.0;
    for (ids, clips) in corpus.ids.chunks(EVAL_BATCH).zip(corpus.audio.chunks(EVAL_BATCH)) {
        let mut orig = Vec::new();
        let mut aug = Vec::new();
        for (id, clip) in ids.iter().zip(clips) {
            let (speed, volume) = spec.draw(&mut stream(seed, &format!("heldout/{id}")));
            let pair = make_pair_with(clip, speed, volume, spec, frontend)?;
            orig.push(pair.original);
            aug.push(pair.augmented);
        }
        let a = params.infer(&orig.iter().collect::<Vec<_>>())?.e_bn;
        let b = params.infer(&aug.iter().collect::<Vec<_>>())?.e_bn;
        let d = a.shape()[1];
        for (ra, rb) in a.data().chunks(d).zip(b.data().chunks(d)) {
            total += ra.iter().zip(rb).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / d as f64;
        }
    }
    Ok(total / corpus.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub pretrain_steps: u64,
    pub dev_accuracy: f64,
    pub steps_to_target: Option<u64>,
}

pub const SWEEP_HEADER: &str = "pretrain_steps\tdev_accuracy\tsteps_to_target_accuracy";

impl SweepRow {
    pub fn tsv(&self) -> String {
        let target = self.steps_to_target.map_or_else(|| "NA".to_string(), |s| s.to_string());
        format!("{}\t{}\t{target}", self.pretrain_steps, self.dev_accuracy)
    }
}

/// Pre-trains once up to the largest step count, fine-tunes a snapshot at
/// each requested count, and reports final dev accuracy and convergence.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    pretrain_cfg: &TrainConfig,
    finetune_cfg: &TrainConfig,
    model: &ModelConfig,
    corpus: &AudioSet,
    train: &FeatureSet,
    dev: &FeatureSet,
    frontend: &LogMel,
    steps_list: &[u64],
    run_dir: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if steps_list.is_empty() {
        return Err(Error::Param("sweep needs at least one pre-training step count".into()));
    }
    if dev.is_empty() {
        return Err(Error::Data("sweep needs a non-empty dev split".into()));
    }
    let mut wanted: Vec<u64> = steps_list.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    let longest = *wanted.last().unwrap();
    let pre = TrainConfig { steps: longest, ..pretrain_cfg.clone() };
    let outcome = pretrain(&pre, model, corpus, frontend, None, run_dir.map(|d| d.join("pretrain")).as_deref(), &wanted)?;
    let mut rows = Vec::new();
    for &steps in steps_list {
        let (_, ck) = outcome
            .snapshots
            .iter()
            .find(|(s, _)| *s == steps)
            .ok_or_else(|| Error::Data(format!("no pre-training snapshot at step {steps}")))?;
        let dir = run_dir.map(|d| d.join(format!("finetune_{steps}")));
        let ft = finetune(finetune_cfg, model, train, Some(dev), Some(ck.clone()), dir.as_deref())?;
        let dev_accuracy = evaluate(&ft.checkpoint.params, dev)?.accuracy();
        rows.push(SweepRow { pretrain_steps: steps, dev_accuracy, steps_to_target: ft.steps_to_target });
    }
    if let Some(d) = run_dir {
        let mut report = format!("{SWEEP_HEADER}\n");
        for r in &rows {
            report.push_str(&r.tsv());
            report.push('\n');
        }
        let path = d.join("report.tsv");
        std::fs::write(&path, report).map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}
