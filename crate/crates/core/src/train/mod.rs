//! Optimisation loop, evaluation, score fusion and the ablation runner.

mod ablation;
mod eval;
mod optim;

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Batch, CheckpointMeta, Hgct};
use crate::nn::Mode;
use crate::skeleton::{center, resample};
use crate::skeleton::{DatasetSplit, Modality, SkeletonGraph, SkeletonSequence};
use crate::tensor::{DType, Scalar};

pub use ablation::{ablation_settings, run_ablation, AblationAxis, AblationRow, AblationTable};
pub use eval::{
    accuracy_of, evaluate, fuse_scores, read_scores_csv, write_scores_csv, EvalReport, FusionReport, ScoreMatrix,
};
pub use optim::{label_smoothed_ce, lr_at, sgd_step, SgdState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub warmup_epochs: usize,
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub dtype: DType,
    /// Frames per sample after resampling.
    pub frames: usize,
    pub modality: Modality,
    /// Stop once test accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 2e-4,
            epochs: 60,
            milestones: vec![40, 50],
            decay: 0.1,
            warmup_epochs: 5,
            label_smoothing: 0.1,
            batch_size: 64,
            seed: 0,
            dtype: DType::F32,
            frames: 64,
            modality: Modality::Joint,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 = {} must be a non-negative number", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum = {} must lie in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay = {} must be non-negative", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing = {} must lie in [0, 1]", self.label_smoothing));
        }
        if self.batch_size == 0 || self.frames == 0 || self.epochs == 0 {
            return bad("epochs, batch_size and frames must be positive".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones {:?} must be strictly increasing", self.milestones));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub epochs: Vec<EpochRecord>,
    /// Learning rate of every optimiser step.
    pub lr_trace: Vec<f64>,
    /// Loss of every optimiser step.
    pub loss_trace: Vec<f64>,
    pub early_stopped: bool,
    pub wall_seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

impl RunReport {
    pub fn final_test_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.test_accuracy)
    }

    pub fn best_test_accuracy(&self) -> f64 {
        self.epochs.iter().map(|e| e.test_accuracy).fold(0.0, f64::max)
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Per-epoch records as CSV.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Centres every sample and derives the configured modality. Resampling is
/// deferred to batch assembly so training can crop afresh each epoch.
pub fn preprocess(split: &DatasetSplit, graph: &SkeletonGraph, modality: Modality) -> Result<DatasetSplit> {
    split.map(|s| modality.apply(&center(s, graph)?, graph))
}

/// Eval-mode resampling of an already preprocessed split.
pub fn resample_split(split: &DatasetSplit, frames: usize) -> Result<DatasetSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let samples = split.samples().iter().map(|s| resample(s, frames, Mode::Eval, &mut rng)).collect();
    DatasetSplit::new(split.name.clone(), split.class_count, samples)
}

/// Where `train` leaves its final checkpoint, if anywhere.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
}

/// Trains `model` in place and evaluates on `test` after every epoch.
///
/// Both splits must be raw (uncentred) sequences; preprocessing follows
/// `cfg.modality`. Everything random derives from `cfg.seed`.
pub fn train<F: Scalar>(
    model: &mut Hgct<F>,
    cfg: &TrainConfig,
    train_split: &DatasetSplit,
    test_split: &DatasetSplit,
    outputs: &TrainOutputs,
) -> Result<RunReport> {
    cfg.validate()?;
    if train_split.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    for split in [train_split, test_split] {
        if let Some(bad) = split.labels().into_iter().find(|&l| l >= model.config.num_classes) {
            return Err(Error::config(format!(
                "split `{}` has label {bad} but the head has {} classes",
                split.name, model.config.num_classes
            )));
        }
    }
    let start = Instant::now();
    let graph = model.graph.clone();
    let train_data = preprocess(train_split, &graph, cfg.modality)?;
    let test_data = resample_split(&preprocess(test_split, &graph, cfg.modality)?, cfg.frames)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = train_data.len();
    // a lone trailing sample would give degenerate batch statistics
    let mut steps_per_epoch = n.div_ceil(cfg.batch_size);
    if n > 1 && n % cfg.batch_size == 1 {
        steps_per_epoch -= 1;
    }
    let mut sgd = SgdState::new();
    let mut report = RunReport {
        epochs: Vec::with_capacity(cfg.epochs),
        lr_trace: Vec::new(),
        loss_trace: Vec::new(),
        early_stopped: false,
        wall_seconds: 0.0,
        checkpoint: None,
    };
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size).take(steps_per_epoch) {
            let seqs: Vec<SkeletonSequence> = chunk
                .iter()
                .map(|&i| resample(&train_data.samples()[i], cfg.frames, Mode::Train, &mut rng))
                .collect();
            let refs: Vec<&SkeletonSequence> = seqs.iter().collect();
            let batch = Batch::<F>::from_sequences(&refs)?;
            let lr = lr_at(step, steps_per_epoch, cfg);
            let dropout_seed = rand::Rng::random::<u64>(&mut rng);
            let (loss, hits, back, stats) = {
                let mut s = model.session(Mode::Train, epoch).with_seed(dropout_seed);
                let logits = model.forward_batch(&mut s, &batch)?;
                let hits = eval::count_hits(s.graph.value(logits), &batch.labels);
                let l = label_smoothed_ce(&mut s.graph, logits, &batch.labels, cfg.label_smoothing)?;
                let loss = s.graph.value(l).data()[0].as_f64();
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "loss is {loss} at epoch {epoch}, step {step} (lr {lr:.3e})"
                    )));
                }
                let back = s.backward(l)?;
                let stats = s.take_stat_updates();
                (loss, hits, back, stats)
            };
            model.store.zero_grad();
            model.store.accumulate(&back);
            model.store.apply_stat_updates(&stats);
            sgd_step(&mut model.store, &mut sgd, lr, cfg);
            report.lr_trace.push(lr);
            report.loss_trace.push(loss);
            loss_sum += loss * chunk.len() as f64;
            correct += hits;
            seen += chunk.len();
            step += 1;
        }
        let eval = evaluate(model, &test_data, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            test_accuracy: eval.accuracy,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, train {:.3}, test {:.3} ({:.1}s)",
            record.train_loss,
            record.train_accuracy,
            record.test_accuracy,
            record.seconds
        );
        report.epochs.push(record);
        if cfg.target_accuracy.is_some_and(|target| eval.accuracy >= target) {
            report.early_stopped = epoch + 1 < cfg.epochs;
            break;
        }
    }
    if let Some(path) = &outputs.checkpoint {
        let meta = CheckpointMeta {
            epoch: report.epochs.len(),
            seed: model.seed,
            stat_steps: 0,
        };
        save_checkpoint(model, path, &meta)?;
        report.checkpoint = Some(path.clone());
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
