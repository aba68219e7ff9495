//! The training loop: seeded per-epoch shuffling, per-record augmentation,
//! forward/backward over the multi-label loss, SGD updates, step-level JSONL
//! logging, per-epoch validation, periodic checkpoints, and exact resume.
//!
//! Every random choice is drawn from a counter-based stream derived from
//! `(seed, purpose, round, epoch, record-or-step)`, never from shared mutable
//! state, so runs are bit-reproducible and resuming at an epoch boundary
//! continues the loss sequence as if training had never stopped.

use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::data::{
    batch_to_tensor, flip, labels_to_tensor, random_hsv, read_manifest, FlipAxis, HsvJitter,
    LabelVector, Split, SplitAssignment,
};
use crate::error::{Error, Result};
use crate::eval::{binarize, sigmoid_scores};
use crate::model::{
    load_checkpoint, multilabel_loss, save_checkpoint, ExtraTensor, LdcsfModel, ModelConfig,
};
use crate::nn::Mode;
use crate::rng::CounterRng;
use crate::tensor::{Element, SgdConfig, SgdState, Tape};

/// Everything a training run needs beyond the data itself. A run is fully
/// reproducible from this value alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
    /// Which split rounds to train; one model is trained from scratch per
    /// round and the final validation metrics are averaged.
    pub rounds: Vec<usize>,
    pub model: ModelConfig,
    /// Save a checkpoint every this many epochs; 0 saves only the per-round
    /// final checkpoint.
    pub checkpoint_every: usize,
    /// Stop a round after this many consecutive epochs without a strict
    /// validation-loss improvement.
    pub early_stop: Option<usize>,
    /// Apply random flips and HSV jitter to training batches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 24,
            sgd: SgdConfig::default(),
            seed: 0,
            rounds: vec![0],
            model: ModelConfig::default(),
            checkpoint_every: 0,
            early_stop: None,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.sgd.validate()?;
        self.model.validate()?;
        if self.rounds.is_empty() {
            return Err(Error::Config("at least one split round is required".into()));
        }
        if self.early_stop == Some(0) {
            return Err(Error::Config("early_stop patience must be >= 1".into()));
        }
        Ok(())
    }
}

/// One fully resident training example. `id` is the record's stable identity
/// and seeds its augmentation stream, so loader order and parallelism can
/// never change what augmentation a record receives.
pub struct TrainExample {
    pub id: u64,
    pub image: RgbImage,
    pub labels: LabelVector,
    pub splits: Vec<SplitAssignment>,
}

pub struct Dataset {
    pub examples: Vec<TrainExample>,
}

impl Dataset {
    pub fn new(examples: Vec<TrainExample>) -> Self {
        Dataset { examples }
    }

    /// Load every tile referenced by a manifest; tile paths are resolved
    /// relative to the manifest's directory.
    pub fn from_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let records = read_manifest(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut examples = Vec::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            let img = image::open(base.join(&rec.path))?.to_rgb8();
            examples.push(TrainExample {
                id: i as u64,
                image: img,
                labels: rec.label_vector()?,
                splits: rec.splits.clone(),
            });
        }
        Ok(Dataset::new(examples))
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Indices of the examples assigned to `split` in `round`, in dataset
    /// order. Every example must carry an assignment for the round.
    pub fn split_indices(&self, round: usize, split: Split) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for (i, ex) in self.examples.iter().enumerate() {
            match ex.splits.iter().find(|a| a.round == round) {
                Some(a) if a.split == split => out.push(i),
                Some(_) => {}
                None => {
                    return Err(Error::Data(format!(
                        "example {i} has no split assignment for round {round}"
                    )));
                }
            }
        }
        Ok(out)
    }
}

/// One optimization step. The logged total is exactly the chained sum of the
/// four per-label terms, in the same arithmetic the loss was computed in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub round: usize,
    pub epoch: usize,
    pub step: u64,
    #[serde(rename = "L")]
    pub l: f64,
    pub l_i: f64,
    pub l_m: f64,
    pub l_t: f64,
    pub l_n: f64,
}

/// End-of-epoch validation: mean loss and per-label accuracy over the
/// validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub round: usize,
    pub epoch: usize,
    pub step: u64,
    #[serde(rename = "val_L")]
    pub l: f64,
    pub accuracy: [f64; 4],
}

/// Final validation result of one round (its last epoch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub epochs_run: usize,
    #[serde(rename = "val_L")]
    pub l: f64,
    pub accuracy: [f64; 4],
}

/// Mean and population standard deviation of the per-round final results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalSummary {
    pub rounds: usize,
    #[serde(rename = "val_L_mean")]
    pub l_mean: f64,
    #[serde(rename = "val_L_std")]
    pub l_std: f64,
    pub accuracy_mean: [f64; 4],
    pub accuracy_std: [f64; 4],
}

/// One line of the training log; serialized as line-delimited JSON tagged by
/// `kind`. No timestamps: logs from identical seeded runs are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Step(StepRecord),
    Validation(ValRecord),
    Round(RoundSummary),
    Final(FinalSummary),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub lines: Vec<LogLine>,
}

impl TrainLog {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.lines.iter().filter_map(|l| match l {
            LogLine::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn validations(&self) -> impl Iterator<Item = &ValRecord> {
        self.lines.iter().filter_map(|l| match l {
            LogLine::Validation(v) => Some(v),
            _ => None,
        })
    }

    pub fn round_summaries(&self) -> impl Iterator<Item = &RoundSummary> {
        self.lines.iter().filter_map(|l| match l {
            LogLine::Round(r) => Some(r),
            _ => None,
        })
    }

    pub fn final_summary(&self) -> Option<&FinalSummary> {
        self.lines.iter().rev().find_map(|l| match l {
            LogLine::Final(f) => Some(f),
            _ => None,
        })
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<TrainLog> {
        let text = fs::read_to_string(path)?;
        let mut lines = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            lines.push(serde_json::from_str(line)?);
        }
        Ok(TrainLog { lines })
    }
}

/// Streams log lines to disk while keeping them in memory for the caller.
struct LogSink {
    writer: BufWriter<File>,
    lines: Vec<LogLine>,
}

impl LogSink {
    fn create(path: &Path) -> Result<Self> {
        Ok(LogSink { writer: BufWriter::new(File::create(path)?), lines: Vec::new() })
    }

    fn push(&mut self, line: LogLine) -> Result<()> {
        serde_json::to_writer(&mut self.writer, &line)?;
        self.writer.write_all(b"\n")?;
        self.lines.push(line);
        Ok(())
    }

    fn finish(mut self) -> Result<TrainLog> {
        self.writer.flush()?;
        Ok(TrainLog { lines: self.lines })
    }
}

/// Patience counter: stop after `patience` consecutive validations without a
/// strict improvement over the best loss seen so far.
struct EarlyStop {
    patience: usize,
    best: f64,
    since_best: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        EarlyStop { patience, best: f64::INFINITY, since_best: 0 }
    }

    /// Feed one validation loss; returns true when training should stop.
    fn observe(&mut self, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.since_best = 0;
            false
        } else {
            self.since_best += 1;
            self.since_best >= self.patience
        }
    }
}

/// Random horizontal/vertical flip (p = 1/2 each) followed by HSV jitter with
/// the standard bounds. Labels are never touched by augmentation.
fn augment_image(img: &RgbImage, rng: &mut CounterRng) -> RgbImage {
    let mut work = img.clone();
    if rng.below(2) == 1 {
        work = flip(&work, FlipAxis::Horizontal);
    }
    if rng.below(2) == 1 {
        work = flip(&work, FlipAxis::Vertical);
    }
    random_hsv(&work, &HsvJitter::default(), rng)
}

/// Eval-mode sigmoid scores for a list of images, batched; output order
/// matches input order.
pub fn predict<E: Element>(
    model: &mut LdcsfModel<E>,
    images: &[&RgbImage],
    batch_size: usize,
) -> Result<Vec<[f64; 4]>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let tape = Tape::<E>::new();
        let batch = batch_to_tensor::<E>(chunk)?;
        let mut rng = CounterRng::new(0); // dropout is inert in eval mode
        let logits = model.forward(&tape, &batch, Mode::Eval, &mut rng)?;
        out.extend(sigmoid_scores(&logits.value())?);
    }
    Ok(out)
}

/// Mean validation loss and per-label accuracy over a split, weighted so the
/// result equals the metrics of one pass over the whole split.
fn validate_split<E: Element>(
    model: &mut LdcsfModel<E>,
    data: &Dataset,
    idx: &[usize],
    batch_size: usize,
) -> Result<(f64, [f64; 4])> {
    let mut loss_sum = 0.0;
    let mut correct = [0usize; 4];
    for chunk in idx.chunks(batch_size) {
        let images: Vec<&RgbImage> = chunk.iter().map(|&i| &data.examples[i].image).collect();
        let labels: Vec<LabelVector> = chunk.iter().map(|&i| data.examples[i].labels).collect();
        let tape = Tape::<E>::new();
        let batch = batch_to_tensor::<E>(&images)?;
        let targets = labels_to_tensor::<E>(&labels)?;
        let mut rng = CounterRng::new(0);
        let logits = model.forward(&tape, &batch, Mode::Eval, &mut rng)?;
        let terms = multilabel_loss(logits, &targets)?;
        loss_sum += terms.total.value().item().as_f64() * chunk.len() as f64;
        let pred = binarize(&sigmoid_scores(&logits.value())?, 0.5)?;
        for (p, lv) in pred.iter().zip(&labels) {
            for l in 0..4 {
                if p[l] == lv.bit(l) {
                    correct[l] += 1;
                }
            }
        }
    }
    let n = idx.len() as f64;
    Ok((loss_sum / n, correct.map(|c| c as f64 / n)))
}

/// Forward, loss, backward and SGD update for one batch. Returns
/// `[L, l_i, l_m, l_t, l_n]` read back from the very scalars that formed the
/// loss.
fn run_step<E: Element>(
    model: &mut LdcsfModel<E>,
    sgd: &mut SgdState<E>,
    images: &[RgbImage],
    labels: &[LabelVector],
    drop_rng: &mut CounterRng,
) -> Result<[f64; 5]> {
    let tape = Tape::<E>::new();
    let refs: Vec<&RgbImage> = images.iter().collect();
    let batch = batch_to_tensor::<E>(&refs)?;
    let targets = labels_to_tensor::<E>(labels)?;
    let logits = model.forward(&tape, &batch, Mode::Train, drop_rng)?;
    let terms = multilabel_loss(logits, &targets)?;
    let values = [
        terms.total.value().item().as_f64(),
        terms.l_i.value().item().as_f64(),
        terms.l_m.value().item().as_f64(),
        terms.l_t.value().item().as_f64(),
        terms.l_n.value().item().as_f64(),
    ];
    tape.backward(terms.total)?;
    let mut first_err = None;
    model.visit_mut(&mut |name, t, trainable| {
        if !trainable || first_err.is_some() {
            return;
        }
        let res = match tape.grad(t) {
            Some(g) => sgd.step(name, t, g.as_slice()),
            // A parameter absent from the graph has zero gradient; weight
            // decay still applies.
            None => sgd.step(name, t, &vec![E::zero(); t.numel()]),
        };
        if let Err(e) = res {
            first_err = Some(e);
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }
    Ok(values)
}

/// Training progress stored inside a checkpoint, sufficient to resume at the
/// following epoch boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainState {
    config: TrainConfig,
    round_index: usize,
    round: usize,
    epoch: usize,
    step: u64,
}

fn save_train_checkpoint<E: Element>(
    path: &Path,
    model: &LdcsfModel<E>,
    sgd: &SgdState<E>,
    cfg: &TrainConfig,
    round_index: usize,
    round: usize,
    epoch: usize,
    step: u64,
) -> Result<()> {
    let extras: Vec<ExtraTensor> = sgd
        .velocities()
        .map(|(name, v)| {
            (format!("optim.{name}"), vec![v.len()], v.iter().map(|x| x.as_f32()).collect())
        })
        .collect();
    let state = TrainState { config: cfg.clone(), round_index, round, epoch, step };
    save_checkpoint(path, model, &extras, Some(serde_json::json!({ "train": state })))
}

/// Reject resume configs that change anything affecting the loss sequence.
/// `epochs`, `checkpoint_every` and `early_stop` may differ; everything else
/// must match, with ablation toggles called out by name.
fn check_resume_config(saved: &TrainConfig, new: &TrainConfig) -> Result<()> {
    if saved.model.ldc_enabled != new.model.ldc_enabled {
        return Err(Error::Config(format!(
            "resume changes the ablation toggle ldc_enabled (checkpoint: {}, requested: {})",
            saved.model.ldc_enabled, new.model.ldc_enabled
        )));
    }
    if saved.model.fr_enabled != new.model.fr_enabled {
        return Err(Error::Config(format!(
            "resume changes the ablation toggle fr_enabled (checkpoint: {}, requested: {})",
            saved.model.fr_enabled, new.model.fr_enabled
        )));
    }
    if saved.model != new.model {
        return Err(Error::Config(
            "resume changes the model architecture; train from scratch instead".into(),
        ));
    }
    let field = |name: &str, differs: bool| {
        if differs {
            Err(Error::Config(format!("resume changes {name}; the loss sequence would diverge")))
        } else {
            Ok(())
        }
    };
    field("sgd", saved.sgd != new.sgd)?;
    field("batch_size", saved.batch_size != new.batch_size)?;
    field("seed", saved.seed != new.seed)?;
    field("rounds", saved.rounds != new.rounds)?;
    field("augment", saved.augment != new.augment)?;
    Ok(())
}

/// Attach run-position context to numeric failures so an abort names where
/// in the loss sequence it happened.
fn numeric_context(e: Error, ctx: &str) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
        Error::NonFinite { op, index } => {
            Error::Numeric(format!("{ctx}: {op}: non-finite value at flat index {index}"))
        }
        other => other,
    }
}

struct ResumeStart<E: Element> {
    model: LdcsfModel<E>,
    velocities: Vec<(String, Vec<f32>)>,
    round_index: usize,
    epoch: usize,
    step: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub log_path: PathBuf,
    /// Final checkpoint of the last round trained.
    pub checkpoint: PathBuf,
}

/// Train per `cfg` over the requested rounds, writing `train_log.jsonl` and
/// checkpoints under `out_dir`.
pub fn train<E: Element>(data: &Dataset, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    train_impl::<E>(data, cfg, out_dir, None)
}

/// Continue a checkpointed run at the next epoch boundary. The optimizer
/// velocities are restored, so the loss sequence continues exactly as an
/// uninterrupted run with the same config would.
pub fn resume<E: Element>(
    checkpoint: impl AsRef<Path>,
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let loaded = load_checkpoint::<E>(checkpoint)?;
    let state_json = loaded
        .extra_meta
        .as_ref()
        .and_then(|m| m.get("train"))
        .cloned()
        .ok_or_else(|| {
            Error::Checkpoint("checkpoint carries no training state; cannot resume".into())
        })?;
    let state: TrainState = serde_json::from_value(state_json)?;
    check_resume_config(&state.config, cfg)?;
    if cfg.epochs < state.epoch {
        return Err(Error::Config(format!(
            "epochs {} is earlier than the checkpoint's epoch {}",
            cfg.epochs, state.epoch
        )));
    }
    let velocities = loaded
        .extras
        .into_iter()
        .filter_map(|(name, _, v)| name.strip_prefix("optim.").map(|p| (p.to_string(), v)))
        .collect();
    train_impl(
        data,
        cfg,
        out_dir,
        Some(ResumeStart {
            model: loaded.model,
            velocities,
            round_index: state.round_index,
            epoch: state.epoch,
            step: state.step,
        }),
    )
}

fn train_impl<E: Element>(
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    start: Option<ResumeStart<E>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut sink = LogSink::create(&log_path)?;

    let mut global_step = start.as_ref().map_or(0, |s| s.step);
    let mut start = start;
    let seed_base = CounterRng::new(cfg.seed);
    let mut summaries: Vec<RoundSummary> = Vec::new();
    let mut final_checkpoint = None;

    for (ri, &round) in cfg.rounds.iter().enumerate() {
        let (skip, resume_here) = match start.as_ref() {
            Some(s) if ri < s.round_index => (true, false),
            // The checkpointed round already ran to completion: nothing left.
            Some(s) if ri == s.round_index && s.epoch >= cfg.epochs => (true, false),
            Some(s) if ri == s.round_index => (false, true),
            _ => (false, false),
        };
        if skip {
            if start.as_ref().is_some_and(|s| ri == s.round_index) {
                start = None;
            }
            continue;
        }

        let train_idx = data.split_indices(round, Split::Train)?;
        let val_idx = data.split_indices(round, Split::Val)?;
        if train_idx.is_empty() {
            return Err(Error::Data(format!("round {round}: empty train split")));
        }
        if val_idx.is_empty() {
            return Err(Error::Data(format!("round {round}: empty validation split")));
        }

        let (mut model, mut sgd, first_epoch) = if resume_here {
            let s = start.take().expect("resume_here implies a start state");
            let mut sgd = SgdState::new(cfg.sgd)?;
            for (name, v) in s.velocities {
                sgd.set_velocity(&name, v.iter().map(|&x| E::from_f32(x)).collect());
            }
            (s.model, sgd, s.epoch + 1)
        } else {
            (LdcsfModel::new(cfg.model.clone(), cfg.seed)?, SgdState::new(cfg.sgd)?, 1)
        };

        let mut stopper = cfg.early_stop.map(EarlyStop::new);
        let mut last_val: Option<ValRecord> = None;
        let mut epochs_run = first_epoch - 1;

        for epoch in first_epoch..=cfg.epochs {
            let mut order = train_idx.clone();
            seed_base
                .derive_named("shuffle")
                .derive(round as u64)
                .derive(epoch as u64)
                .shuffle(&mut order);

            for (bi, batch_ids) in order.chunks(cfg.batch_size).enumerate() {
                global_step += 1;
                let mut images = Vec::with_capacity(batch_ids.len());
                let mut labels = Vec::with_capacity(batch_ids.len());
                for &i in batch_ids {
                    let ex = &data.examples[i];
                    let img = if cfg.augment {
                        let mut aug = seed_base
                            .derive_named("augment")
                            .derive(ex.id)
                            .derive(round as u64)
                            .derive(epoch as u64);
                        augment_image(&ex.image, &mut aug)
                    } else {
                        ex.image.clone()
                    };
                    images.push(img);
                    labels.push(ex.labels);
                }
                let mut drop_rng = seed_base
                    .derive_named("dropout")
                    .derive(round as u64)
                    .derive(epoch as u64)
                    .derive(bi as u64);
                let values = run_step(&mut model, &mut sgd, &images, &labels, &mut drop_rng)
                    .map_err(|e| numeric_context(e, &format!("step {global_step}")))?;
                if !values[0].is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at step {global_step}"
                    )));
                }
                sink.push(LogLine::Step(StepRecord {
                    round,
                    epoch,
                    step: global_step,
                    l: values[0],
                    l_i: values[1],
                    l_m: values[2],
                    l_t: values[3],
                    l_n: values[4],
                }))?;
            }

            let (val_l, accuracy) = validate_split(&mut model, data, &val_idx, cfg.batch_size)
                .map_err(|e| {
                    numeric_context(e, &format!("validation after step {global_step}"))
                })?;
            let vrec = ValRecord { round, epoch, step: global_step, l: val_l, accuracy };
            sink.push(LogLine::Validation(vrec.clone()))?;
            last_val = Some(vrec);
            epochs_run = epoch;

            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                let p = out_dir.join(format!("checkpoint_round{round}_epoch{epoch}.ckpt"));
                save_train_checkpoint(&p, &model, &sgd, cfg, ri, round, epoch, global_step)?;
            }
            if stopper.as_mut().is_some_and(|s| s.observe(val_l)) {
                break;
            }
        }

        let p = out_dir.join(format!("checkpoint_round{round}_final.ckpt"));
        save_train_checkpoint(&p, &model, &sgd, cfg, ri, round, epochs_run, global_step)?;
        final_checkpoint = Some(p);

        let v = last_val.expect("epochs >= 1 guarantees at least one validation");
        let rs = RoundSummary { round, epochs_run, l: v.l, accuracy: v.accuracy };
        sink.push(LogLine::Round(rs.clone()))?;
        summaries.push(rs);
    }

    let Some(checkpoint) = final_checkpoint else {
        return Err(Error::Config(
            "nothing to train: the checkpoint already covers every requested round".into(),
        ));
    };

    let mean_std = |get: &dyn Fn(&RoundSummary) -> f64| -> (f64, f64) {
        let vals: Vec<f64> = summaries.iter().map(get).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (l_mean, l_std) = mean_std(&|r| r.l);
    let mut accuracy_mean = [0.0; 4];
    let mut accuracy_std = [0.0; 4];
    for l in 0..4 {
        let (m, s) = mean_std(&move |r: &RoundSummary| r.accuracy[l]);
        accuracy_mean[l] = m;
        accuracy_std[l] = s;
    }
    sink.push(LogLine::Final(FinalSummary {
        rounds: summaries.len(),
        l_mean,
        l_std,
        accuracy_mean,
        accuracy_std,
    }))?;

    Ok(TrainOutcome { log: sink.finish()?, log_path, checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{standard_combinations, synthetic_tile};
    use tempfile::TempDir;

    /// `n_train` training tiles and `n_val` validation tiles, cycling the six
    /// standard label combinations, assigned to round 0.
    fn tiny_dataset(n_train: usize, n_val: usize, seed: u64) -> Dataset {
        let combos = standard_combinations();
        let base = CounterRng::new(seed).derive_named("fixture");
        let mut examples = Vec::new();
        for i in 0..(n_train + n_val) {
            let labels = combos[i % combos.len()];
            let mut rng = base.derive(i as u64);
            let split = if i < n_train { Split::Train } else { Split::Val };
            examples.push(TrainExample {
                id: i as u64,
                image: synthetic_tile(labels, 32, &mut rng),
                labels,
                splits: vec![SplitAssignment { round: 0, split }],
            });
        }
        Dataset::new(examples)
    }

    fn tiny_cfg(epochs: usize, batch_size: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size,
            seed: 7,
            rounds: vec![0],
            model: ModelConfig::toy(),
            augment: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.epochs, cfg.batch_size), (150, 24));
        assert_eq!(
            (cfg.sgd.lr, cfg.sgd.momentum, cfg.sgd.weight_decay),
            (0.001, 0.9, 1e-4)
        );
        assert!(TrainConfig { epochs: 0, ..tiny_cfg(1, 1) }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..tiny_cfg(1, 1) }.validate().is_err());
        assert!(TrainConfig { rounds: vec![], ..tiny_cfg(1, 1) }.validate().is_err());
        assert!(TrainConfig { early_stop: Some(0), ..tiny_cfg(1, 1) }.validate().is_err());
        assert!(tiny_cfg(1, 1).validate().is_ok());
    }

    #[test]
    fn one_epoch_over_one_full_batch_is_exactly_one_step() {
        let data = tiny_dataset(24, 6, 1);
        let out = TempDir::new().unwrap();
        let cfg = tiny_cfg(1, 24);
        let outcome = train::<f32>(&data, &cfg, out.path()).unwrap();
        let steps: Vec<_> = outcome.log.steps().collect();
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].step, 1);
        assert_eq!(outcome.log.validations().count(), 1);
    }

    #[test]
    fn partial_final_batches_are_kept() {
        let data = tiny_dataset(10, 4, 2);
        let out = TempDir::new().unwrap();
        let outcome = train::<f32>(&data, &tiny_cfg(2, 4), out.path()).unwrap();
        // 10 records at batch 4 → 3 steps per epoch (4 + 4 + 2), 2 epochs.
        assert_eq!(outcome.log.steps().count(), 6);
        let steps: Vec<u64> = outcome.log.steps().map(|s| s.step).collect();
        assert_eq!(steps, (1..=6).collect::<Vec<_>>(), "step counter must be monotone");
    }

    #[test]
    fn two_seeded_runs_are_byte_identical() {
        let data = tiny_dataset(8, 4, 3);
        let cfg = TrainConfig { augment: true, ..tiny_cfg(2, 4) };
        let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
        let oa = train::<f32>(&data, &cfg, a.path()).unwrap();
        let ob = train::<f32>(&data, &cfg, b.path()).unwrap();
        let log_a = fs::read(&oa.log_path).unwrap();
        let log_b = fs::read(&ob.log_path).unwrap();
        assert!(!log_a.is_empty());
        assert_eq!(log_a, log_b, "logs must be byte-identical");
        let ck_a = fs::read(&oa.checkpoint).unwrap();
        let ck_b = fs::read(&ob.checkpoint).unwrap();
        assert_eq!(ck_a, ck_b, "checkpoints must be byte-identical");
        // And the JSONL file round-trips to the in-memory log.
        assert_eq!(TrainLog::read_jsonl(&oa.log_path).unwrap(), oa.log);
    }

    #[test]
    fn logged_total_is_the_exact_component_chain() {
        let data = tiny_dataset(8, 4, 4);
        let out = TempDir::new().unwrap();
        let outcome = train::<f32>(&data, &tiny_cfg(2, 4), out.path()).unwrap();
        for s in outcome.log.steps() {
            assert!(s.l.is_finite());
            let chain = ((s.l_i as f32 + s.l_m as f32) + s.l_t as f32) + s.l_n as f32;
            assert_eq!(chain, s.l as f32, "L must equal the chained component sum");
        }
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_tail() {
        let data = tiny_dataset(12, 4, 5);
        let full_cfg = TrainConfig { augment: true, ..tiny_cfg(4, 6) };
        let full_dir = TempDir::new().unwrap();
        let full = train::<f32>(&data, &full_cfg, full_dir.path()).unwrap();

        let half_cfg = TrainConfig { epochs: 2, ..full_cfg.clone() };
        let half_dir = TempDir::new().unwrap();
        let half = train::<f32>(&data, &half_cfg, half_dir.path()).unwrap();

        let resumed_dir = TempDir::new().unwrap();
        let resumed =
            resume::<f32>(&half.checkpoint, &data, &full_cfg, resumed_dir.path()).unwrap();

        let tail: Vec<&LogLine> = full
            .log
            .lines
            .iter()
            .filter(|l| match l {
                LogLine::Step(s) => s.epoch > 2,
                LogLine::Validation(v) => v.epoch > 2,
                _ => false,
            })
            .collect();
        let resumed_lines: Vec<&LogLine> = resumed
            .log
            .lines
            .iter()
            .filter(|l| matches!(l, LogLine::Step(_) | LogLine::Validation(_)))
            .collect();
        assert!(!tail.is_empty());
        assert_eq!(resumed_lines, tail, "resumed loss sequence must continue uninterrupted");

        let ck_full = fs::read(&full.checkpoint).unwrap();
        let ck_res = fs::read(&resumed.checkpoint).unwrap();
        assert_eq!(ck_full, ck_res, "resumed final checkpoint must match the straight run");
    }

    #[test]
    fn resume_rejects_changed_configs_by_name() {
        let data = tiny_dataset(6, 4, 6);
        let out = TempDir::new().unwrap();
        let cfg = tiny_cfg(1, 6);
        let outcome = train::<f32>(&data, &cfg, out.path()).unwrap();

        let mut toggled = cfg.clone();
        toggled.model.ldc_enabled = false;
        let err = resume::<f32>(&outcome.checkpoint, &data, &toggled, out.path()).unwrap_err();
        assert!(err.to_string().contains("ldc_enabled"), "got: {err}");

        let mut toggled = cfg.clone();
        toggled.model.fr_enabled = false;
        let err = resume::<f32>(&outcome.checkpoint, &data, &toggled, out.path()).unwrap_err();
        assert!(err.to_string().contains("fr_enabled"), "got: {err}");

        let mut widened = cfg.clone();
        widened.model.embed_dim *= 2;
        assert!(resume::<f32>(&outcome.checkpoint, &data, &widened, out.path()).is_err());

        let mut rebatched = cfg.clone();
        rebatched.batch_size = 3;
        let err = resume::<f32>(&outcome.checkpoint, &data, &rebatched, out.path()).unwrap_err();
        assert!(err.to_string().contains("batch_size"), "got: {err}");

        let mut shorter = cfg.clone();
        shorter.epochs = 0;
        assert!(resume::<f32>(&outcome.checkpoint, &data, &shorter, out.path()).is_err());
    }

    #[test]
    fn empty_or_missing_splits_are_errors() {
        // All records in train: validation split is empty.
        let mut data = tiny_dataset(6, 0, 7);
        let out = TempDir::new().unwrap();
        let err = train::<f32>(&data, &tiny_cfg(1, 6), out.path()).unwrap_err();
        assert!(err.to_string().contains("empty validation split"), "got: {err}");

        // A record with no assignment for the requested round.
        data.examples[0].splits.clear();
        let err = train::<f32>(&data, &tiny_cfg(1, 6), out.path()).unwrap_err();
        assert!(err.to_string().contains("no split assignment"), "got: {err}");
    }

    #[test]
    fn exploding_updates_abort_naming_the_step() {
        let data = tiny_dataset(6, 4, 8);
        let out = TempDir::new().unwrap();
        let mut cfg = tiny_cfg(10, 6);
        cfg.sgd.lr = 1e25;
        let err = train::<f32>(&data, &cfg, out.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("step"), "abort must name the offending step, got: {msg}");
    }

    #[test]
    fn early_stop_counts_consecutive_non_improvements() {
        let mut es = EarlyStop::new(2);
        assert!(!es.observe(1.0)); // new best
        assert!(!es.observe(0.9)); // new best
        assert!(!es.observe(0.95)); // 1 without improvement
        assert!(es.observe(0.96)); // 2 without improvement → stop

        let mut es = EarlyStop::new(2);
        assert!(!es.observe(1.0));
        assert!(!es.observe(1.1)); // 1
        assert!(!es.observe(0.5)); // improvement resets the counter
        assert!(!es.observe(0.6)); // 1
        assert!(es.observe(0.7)); // 2 → stop
    }

    #[test]
    fn validation_runs_every_epoch_with_bounded_accuracy() {
        let data = tiny_dataset(8, 4, 9);
        let out = TempDir::new().unwrap();
        let outcome = train::<f32>(&data, &tiny_cfg(3, 4), out.path()).unwrap();
        let vals: Vec<_> = outcome.log.validations().collect();
        assert_eq!(vals.len(), 3);
        for v in &vals {
            assert!(v.l.is_finite());
            for a in v.accuracy {
                assert!((0.0..=1.0).contains(&a));
            }
        }
        assert_eq!(vals.iter().map(|v| v.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn checkpoint_schedule_writes_at_requested_epochs() {
        let data = tiny_dataset(6, 4, 10);
        let out = TempDir::new().unwrap();
        let cfg = TrainConfig { checkpoint_every: 2, ..tiny_cfg(4, 6) };
        train::<f32>(&data, &cfg, out.path()).unwrap();
        assert!(out.path().join("checkpoint_round0_epoch2.ckpt").exists());
        assert!(out.path().join("checkpoint_round0_epoch4.ckpt").exists());
        assert!(out.path().join("checkpoint_round0_final.ckpt").exists());
        assert!(!out.path().join("checkpoint_round0_epoch1.ckpt").exists());
        assert!(!out.path().join("checkpoint_round0_epoch3.ckpt").exists());
    }

    #[test]
    fn multi_round_training_averages_final_results() {
        // Two rounds with swapped train/val membership.
        let combos = standard_combinations();
        let base = CounterRng::new(11).derive_named("fixture");
        let mut examples = Vec::new();
        for i in 0..12 {
            let labels = combos[i % combos.len()];
            let mut rng = base.derive(i as u64);
            let first = if i < 8 { Split::Train } else { Split::Val };
            let second = if i < 4 { Split::Val } else { Split::Train };
            examples.push(TrainExample {
                id: i as u64,
                image: synthetic_tile(labels, 32, &mut rng),
                labels,
                splits: vec![
                    SplitAssignment { round: 0, split: first },
                    SplitAssignment { round: 1, split: second },
                ],
            });
        }
        let data = Dataset::new(examples);
        let out = TempDir::new().unwrap();
        let cfg = TrainConfig { rounds: vec![0, 1], ..tiny_cfg(1, 4) };
        let outcome = train::<f32>(&data, &cfg, out.path()).unwrap();

        let rounds: Vec<_> = outcome.log.round_summaries().collect();
        assert_eq!(rounds.len(), 2);
        let fin = outcome.log.final_summary().expect("final summary line");
        assert_eq!(fin.rounds, 2);
        let expect_mean = (rounds[0].l + rounds[1].l) / 2.0;
        assert!((fin.l_mean - expect_mean).abs() < 1e-12);
        assert!(fin.l_std >= 0.0);
        // Steps from both rounds share one monotone counter.
        let steps: Vec<u64> = outcome.log.steps().map(|s| s.step).collect();
        assert!(steps.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn training_reduces_loss_on_a_tiny_problem() {
        let data = tiny_dataset(8, 4, 12);
        let out = TempDir::new().unwrap();
        let mut cfg = tiny_cfg(20, 8);
        cfg.sgd.lr = 0.05;
        let outcome = train::<f32>(&data, &cfg, out.path()).unwrap();
        let steps: Vec<_> = outcome.log.steps().collect();
        let first = steps.first().unwrap().l;
        let last = steps.last().unwrap().l;
        assert!(
            last < first,
            "loss should fall on an easy problem: first {first}, last {last}"
        );
    }

    #[test]
    fn predict_returns_probability_rows_in_order() {
        let data = tiny_dataset(6, 4, 13);
        let out = TempDir::new().unwrap();
        let outcome = train::<f32>(&data, &tiny_cfg(1, 6), out.path()).unwrap();
        let mut model = load_checkpoint::<f32>(&outcome.checkpoint).unwrap().model;
        let images: Vec<&RgbImage> = data.examples.iter().map(|e| &e.image).collect();
        let scores = predict(&mut model, &images, 4).unwrap();
        assert_eq!(scores.len(), data.len());
        for row in &scores {
            for &s in row {
                assert!((0.0..=1.0).contains(&s), "sigmoid scores must be probabilities");
            }
        }
    }
}
