//! The training loop: weak and strong forwards, pseudo-label gating, loss
//! assembly, Adam updates, validation, early stopping and checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_strong, apply_weak, sample_geom_params, sample_photo_params};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{epoch_schedule, labeled_schedule, BatchIndices, MixedBatch};
use crate::error::{Error, Result};
use crate::losses::{total_loss, SegLoss};
use crate::metrics::{dice_score, MetricsReport};
use crate::model::{Model, ModelSpec};
use crate::optim::Adam;
use crate::pseudolabel::{make_pseudolabel, pseudo_mask};
use crate::rng::{self, tag};
use crate::types::{Image, LabeledSample, MaskMap, UnlabeledSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Labeled loss only; unlabeled samples in a batch are ignored.
    Supervised,
    FixMatchSeg,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "supervised" => Ok(TrainMode::Supervised),
            "fixmatchseg" => Ok(TrainMode::FixMatchSeg),
            other => Err(Error::ConfigParse(format!("unknown mode {other:?}"))),
        }
    }
}

/// Position of a step; all augmentation streams derive from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepIndex {
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
}

impl StepIndex {
    fn stream(&self, kind: u64, sample: usize) -> rng::Rng {
        rng::stream(self.seed, &[kind, self.epoch as u64, self.step as u64, sample as u64])
    }
}

/// What happened to one unlabeled sample in a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledOutcome {
    pub confidence: f64,
    pub accepted: bool,
    /// DL + BL against the pseudo-label; `None` when rejected.
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub l_s: f64,
    pub l_u: f64,
    pub l: f64,
    pub accepted_fraction: f64,
    pub mean_confidence: f64,
    pub labeled_losses: Vec<f64>,
    pub unlabeled: Vec<UnlabeledOutcome>,
}

/// Weakly augmented labeled pair `i` of a step.
pub fn augment_labeled(sample: &LabeledSample, cfg: &TrainConfig, at: StepIndex, i: usize) -> Result<(Image, MaskMap)> {
    let params = sample_geom_params(cfg, &mut at.stream(tag::LABELED_AUG, i));
    let (img, mask) = apply_weak(&sample.image, Some(&sample.mask), &params)?;
    Ok((img, mask.expect("mask was given")))
}

/// Weakly augmented unlabeled image `j` of a step.
pub fn augment_weak(sample: &UnlabeledSample, cfg: &TrainConfig, at: StepIndex, j: usize) -> Result<Image> {
    let params = sample_geom_params(cfg, &mut at.stream(tag::WEAK_AUG, j));
    Ok(apply_weak(&sample.image, None, &params)?.0)
}

/// Strong augmentation of the weak view `j`.
pub fn augment_strong(weak: &Image, cfg: &TrainConfig, at: StepIndex, j: usize) -> Image {
    apply_strong(weak, &sample_photo_params(cfg, &mut at.stream(tag::STRONG_AUG, j)))
}

/// One optimizer step on a mixed batch.
///
/// Labeled pairs and unlabeled images are forwarded one at a time so that
/// normalization statistics never mix streams. Pseudo-labels come from an
/// inference forward and are constants. Rejected samples are not forwarded
/// through the strong branch at all, and with `lambda_u == 0` the strong
/// branch is evaluated for telemetry only.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &MixedBatch,
    cfg: &TrainConfig,
    mode: TrainMode,
    at: StepIndex,
) -> Result<StepReport> {
    if batch.labeled.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let loss = SegLoss::new(&cfg.loss);
    model.zero_grad();

    let inv_b = 1.0 / batch.labeled.len() as f64;
    let mut labeled_losses = Vec::with_capacity(batch.labeled.len());
    for (i, s) in batch.labeled.iter().enumerate() {
        let (img, mask) = augment_labeled(s, cfg, at, i)?;
        let trace = model.forward_train(&img)?;
        let (v, mut g) = loss.combined_with_grad(trace.probs(), &mask)?;
        g.iter_mut().for_each(|x| *x *= inv_b);
        model.backward(&trace, &g)?;
        labeled_losses.push(v);
    }
    let l_s = labeled_losses.iter().sum::<f64>() * inv_b;

    let mut unlabeled = Vec::new();
    let mut u_sum = 0.0;
    let use_unlabeled = mode == TrainMode::FixMatchSeg && !batch.unlabeled.is_empty();
    let inv_mu_b = if use_unlabeled { 1.0 / batch.unlabeled.len() as f64 } else { 0.0 };
    if use_unlabeled {
        for (j, u) in batch.unlabeled.iter().enumerate() {
            let weak = augment_weak(u, cfg, at, j)?;
            let pl = make_pseudolabel(&model.predict_one(&weak)?, cfg.tau);
            let mut outcome = UnlabeledOutcome {
                confidence: pl.confidence,
                accepted: pl.accepted,
                loss: None,
            };
            if pl.accepted {
                let strong = augment_strong(&weak, cfg, at, j);
                let v = if cfg.lambda_u > 0.0 {
                    let trace = model.forward_train(&strong)?;
                    let (v, mut g) = loss.combined_with_grad(trace.probs(), &pl.label_mask)?;
                    let w = cfg.lambda_u * inv_mu_b;
                    g.iter_mut().for_each(|x| *x *= w);
                    model.backward(&trace, &g)?;
                    v
                } else {
                    loss.combined(&model.predict_one(&strong)?, &pl.label_mask)?
                };
                u_sum += v;
                outcome.loss = Some(v);
            }
            unlabeled.push(outcome);
        }
    }
    let l_u = u_sum * inv_mu_b;
    let l = total_loss(l_s, l_u, cfg.lambda_u);
    if !(l_s.is_finite() && l_u.is_finite() && l.is_finite()) {
        return Err(Error::NonFiniteLoss {
            epoch: at.epoch,
            step: at.step,
            l_s,
            l_u,
        });
    }
    let (params, grads) = model.params_and_grads();
    adam.update(params, grads);

    let n_u = unlabeled.len().max(1) as f64;
    Ok(StepReport {
        l_s,
        l_u,
        l,
        accepted_fraction: unlabeled.iter().filter(|o| o.accepted).count() as f64 / n_u,
        mean_confidence: unlabeled.iter().map(|o| o.confidence).sum::<f64>() / n_u,
        labeled_losses,
        unlabeled,
    })
}

/// Hard-prediction Dice per class and mean supervised loss (DL + BL) over
/// un-augmented samples. Per-class Dice is averaged over images.
pub fn evaluate(model: &Model, samples: &[LabeledSample], cfg: &TrainConfig) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty set".into()));
    }
    let loss = SegLoss::new(&cfg.loss);
    let mut rows = Vec::with_capacity(samples.len());
    let mut losses = Vec::with_capacity(samples.len());
    for s in samples {
        let probs = model.predict_one(&s.image)?;
        losses.push(loss.combined(&probs, &s.mask)?);
        let hard = pseudo_mask(&probs);
        rows.push(
            (0..s.mask.num_classes())
                .map(|c| dice_score(&hard, &s.mask, c))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(MetricsReport::from_rows(&rows, &losses, cfg.metrics.mean_includes_background))
}

/// Stops after `patience` consecutive epochs without a strictly lower
/// validation loss than the best so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_epoch: Option<usize>,
    pub best_loss: Option<f64>,
    pub bad_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_epoch: None,
            best_loss: None,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Verdict {
        let improved = self.best_loss.is_none_or(|b| val_loss < b);
        if improved {
            self.best_epoch = Some(epoch);
            self.best_loss = Some(val_loss);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        Verdict {
            improved,
            stop: self.should_stop(),
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

/// One line of the history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub l_s: f64,
    pub l_u: f64,
    pub l: f64,
    pub val_loss: f64,
    pub val_mean_dice: f64,
    pub accepted_fraction: f64,
    pub mean_confidence: f64,
    pub improved: bool,
    pub wall_time_s: f64,
}

impl EpochRecord {
    /// Every field except wall time.
    pub fn same_losses(&self, other: &EpochRecord) -> bool {
        EpochRecord {
            wall_time_s: 0.0,
            ..self.clone()
        } == EpochRecord {
            wall_time_s: 0.0,
            ..other.clone()
        }
    }
}

/// Resumable training state stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub config: TrainConfig,
    pub mode: TrainMode,
    /// Completed epochs.
    pub epoch: usize,
    pub stopper: EarlyStopping,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    /// `FitOptions::epoch_limit` reached, as if interrupted.
    EpochLimit,
}

pub struct TrainData<'a> {
    pub labeled: &'a [LabeledSample],
    pub unlabeled: &'a [UnlabeledSample],
    pub val: &'a [LabeledSample],
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Writes config, history and checkpoints here when set.
    pub run_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop once this many epochs are complete, without touching the
    /// early-stopping state.
    pub epoch_limit: Option<usize>,
    /// Keep every step report in the result.
    pub keep_steps: bool,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: Model,
    pub best_params: Vec<f32>,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepReport>,
    pub stop_reason: StopReason,
    pub checkpoint: Checkpoint,
}

impl TrainResult {
    pub fn best_epoch(&self) -> Option<usize> {
        self.checkpoint.header.progress.stopper.best_epoch
    }

    pub fn best_model(&self) -> Result<Model> {
        let mut m = self.model.clone();
        m.set_params(&self.best_params)?;
        Ok(m)
    }
}

pub const HISTORY_FILE: &str = "history.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const CONFIG_FILE: &str = "config.toml";

/// Builds the model for `cfg`, seeded by `cfg.seed`, copying encoder
/// weights from `cfg.model.pretrained_encoder` when set.
pub fn init_model(cfg: &TrainConfig, input_channels: usize) -> Result<Model> {
    let mut model = Model::build(ModelSpec::from_config(cfg, input_channels), cfg.seed)?;
    if let Some(path) = &cfg.model.pretrained_encoder {
        let donor = Checkpoint::load(std::path::Path::new(path))?.best_model()?;
        let copied = model.load_encoder_from(&donor);
        if copied == 0 {
            return Err(Error::InvalidModelSpec(format!("{path} has no compatible encoder weights")));
        }
        info!("copied {copied} encoder tensors from {path}");
    }
    Ok(model)
}

fn schedule(data: &TrainData, cfg: &TrainConfig, mode: TrainMode, epoch: usize) -> Result<Vec<BatchIndices>> {
    if mode == TrainMode::Supervised && data.unlabeled.is_empty() {
        labeled_schedule(data.labeled.len(), cfg.labeled_per_batch, cfg.seed, epoch)
    } else {
        epoch_schedule(
            data.labeled.len(),
            data.unlabeled.len(),
            cfg.mu,
            cfg.labeled_per_batch,
            cfg.seed,
            epoch,
        )
    }
}

fn write_history(path: &std::path::Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for rec in history {
        serde_json::to_writer(&mut f, rec)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Epoch loop with validation and early stopping. A supervised run over a
/// nonempty unlabeled pool walks the same batch schedule as FixMatchSeg and
/// ignores the unlabeled half, so both modes see identical labeled batches.
pub fn fit(mut model: Model, data: &TrainData, cfg: &TrainConfig, mode: TrainMode, opts: FitOptions) -> Result<TrainResult> {
    let cfg = cfg.clone().validated()?;
    if data.val.is_empty() {
        return Err(Error::Dataset("validation set is empty".into()));
    }
    if model.spec().num_classes != cfg.num_classes {
        return Err(Error::InvalidModelSpec("model and config disagree on num_classes".into()));
    }
    let mut adam = Adam::new(&cfg, model.num_params());
    let mut best_params = model.params().to_vec();
    let mut progress = Progress {
        config: cfg.clone(),
        mode,
        epoch: 0,
        stopper: EarlyStopping::new(cfg.patience_epochs),
        history: Vec::new(),
    };
    if let Some(ck) = &opts.resume {
        if ck.header.spec != *model.spec() {
            return Err(Error::Checkpoint("checkpoint was written for a different model".into()));
        }
        if ck.header.progress.mode != mode {
            return Err(Error::Checkpoint("checkpoint was written in a different mode".into()));
        }
        model.set_params(&ck.params)?;
        adam = ck.adam();
        if !ck.best_params.is_empty() {
            best_params = ck.best_params.clone();
        }
        progress = Progress {
            config: cfg.clone(),
            ..ck.header.progress.clone()
        };
        progress.stopper.patience = cfg.patience_epochs;
    }
    if let Some(dir) = &opts.run_dir {
        std::fs::create_dir_all(dir)?;
        cfg.save(&dir.join(CONFIG_FILE))?;
    }

    let mut steps_log = Vec::new();
    let stop_reason = loop {
        if progress.stopper.should_stop() {
            break StopReason::Patience;
        }
        if progress.epoch >= cfg.max_epochs {
            break StopReason::MaxEpochs;
        }
        if opts.epoch_limit.is_some_and(|k| progress.epoch >= k) {
            break StopReason::EpochLimit;
        }
        let epoch = progress.epoch + 1;
        let started = Instant::now();
        let plan = schedule(data, &cfg, mode, epoch)?;
        let mut sums = [0.0f64; 5];
        for (step, ix) in plan.iter().enumerate() {
            let batch = MixedBatch {
                labeled: ix.labeled.iter().map(|&i| &data.labeled[i]).collect(),
                unlabeled: ix.unlabeled.iter().map(|&i| &data.unlabeled[i]).collect(),
            };
            let at = StepIndex {
                seed: cfg.seed,
                epoch,
                step,
            };
            let r = train_step(&mut model, &mut adam, &batch, &cfg, mode, at)?;
            for (s, v) in sums.iter_mut().zip([r.l_s, r.l_u, r.l, r.accepted_fraction, r.mean_confidence]) {
                *s += v;
            }
            if opts.keep_steps {
                steps_log.push(r);
            }
        }
        let val = evaluate(&model, data.val, &cfg)?;
        let verdict = progress.stopper.observe(epoch, val.loss);
        if verdict.improved {
            best_params.copy_from_slice(model.params());
        }
        let n = plan.len().max(1) as f64;
        let rec = EpochRecord {
            epoch,
            steps: plan.len(),
            l_s: sums[0] / n,
            l_u: sums[1] / n,
            l: sums[2] / n,
            val_loss: val.loss,
            val_mean_dice: val.mean_dice,
            accepted_fraction: sums[3] / n,
            mean_confidence: sums[4] / n,
            improved: verdict.improved,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: l={:.4} l_s={:.4} l_u={:.4} val_loss={:.4} val_dice={:.4} accepted={:.2}{}",
            rec.l,
            rec.l_s,
            rec.l_u,
            rec.val_loss,
            rec.val_mean_dice,
            rec.accepted_fraction,
            if rec.improved { " *" } else { "" }
        );
        progress.history.push(rec);
        progress.epoch = epoch;
        if let Some(dir) = &opts.run_dir {
            write_history(&dir.join(HISTORY_FILE), &progress.history)?;
            let ck = Checkpoint::capture(&model, &adam, &progress, &best_params);
            ck.save(&dir.join(LAST_CHECKPOINT))?;
            if verdict.improved {
                ck.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
    };
    let checkpoint = Checkpoint::capture(&model, &adam, &progress, &best_params);
    Ok(TrainResult {
        model,
        best_params,
        history: progress.history,
        steps: steps_log,
        stop_reason,
        checkpoint,
    })
}
