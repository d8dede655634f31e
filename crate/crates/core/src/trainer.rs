//! AdamW and the end-to-end fine-tuning loop.

use crate::checkpoint::TrainState;
use crate::datapipe::{PixelDataset, FLOOD, NO_DATA};
use crate::encoder::{Gradients, ModelConfig, ModelParams, Trainability};
use crate::error::{Error, Result};
use crate::evaluator::{pixel_logits, ConfusionCounts, Metrics, PIXEL_CHUNK};
use crate::head::{
    classify, focal_loss_from_logit, focal_loss_grad, FocalLossConfig, DEFAULT_THRESHOLD,
};
use crate::nn::sigmoid;
use crate::tensor::Tensor;
use crate::tokenizer::{GroupSet, PixelSample, TokenBatch};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub loss: FocalLossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 4096,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_epochs: 100,
            early_stop_patience: 10,
            seed: 0,
            loss: FocalLossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is allowed: it makes every step the identity.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr {} must be finite and >= 0",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "eps must be > 0 and weight_decay >= 0".into(),
            ));
        }
        self.loss.validate()
    }
}

/// AdamW moment buffers aligned with [`ModelParams::named_tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied to each tensor; group embeddings skip steps without tokens.
    pub tensor_steps: Vec<u64>,
    /// Optimizer steps taken.
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = model
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros_like(t))
            .collect();
        OptimizerState {
            tensor_steps: vec![0; zeros.len()],
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update of a single tensor; `t` is its 1-based step count.
pub fn adamw_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &TrainConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
    }
}

/// Applies AdamW to every trainable tensor.
///
/// Frozen tensors are never touched. A group's embedding tensors are skipped,
/// weight decay included, when the group produced no tokens for this gradient.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    let roles = params.trainability();
    let g_all = grads.params.named_tensors();
    for (name, g) in &g_all {
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient in {name}; step aborted"
            )));
        }
    }
    if state.m.len() != g_all.len() {
        return Err(Error::Internal(
            "optimizer state does not match the model".into(),
        ));
    }
    state.step += 1;
    for (i, ((_, p), (_, g))) in params
        .named_tensors_mut()
        .into_iter()
        .zip(&g_all)
        .enumerate()
    {
        let update = match roles[i] {
            Trainability::Frozen => false,
            Trainability::Group(group) => grads.active_groups.contains(group),
            Trainability::Shared => true,
        };
        if !update {
            continue;
        }
        state.tensor_steps[i] += 1;
        adamw_update(
            p.data_mut(),
            g.data(),
            state.m[i].data_mut(),
            state.v[i].data_mut(),
            state.tensor_steps[i],
            cfg,
        );
    }
    Ok(())
}

/// Index batches of a seeded permutation of `0..n`; the last batch may be short.
pub fn shuffle_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Mean focal loss gradient of one batch plus the per-pixel logits it saw.
///
/// Pixels are processed in fixed chunks whose gradients are summed in chunk
/// order, so the result does not depend on the number of worker threads.
pub fn batch_gradients(
    model: &ModelParams,
    samples: &[&PixelSample],
    labels: &[bool],
    loss: &FocalLossConfig,
) -> Result<(Gradients, f64, Vec<f64>)> {
    let n = samples.len() as f64;
    let parts = samples
        .par_chunks(PIXEL_CHUNK)
        .zip(labels.par_chunks(PIXEL_CHUNK))
        .map(|(chunk, ys)| -> Result<(Gradients, f64, Vec<f64>)> {
            let batch =
                TokenBatch::build_from(chunk.iter().copied(), GroupSet::EMPTY, &model.encodings)?;
            let (logits, cache) = model.forward(&batch)?;
            let mut loss_sum = 0.0;
            let mut dlogits = Vec::with_capacity(logits.len());
            for (z, y) in logits.iter().zip(ys) {
                loss_sum += focal_loss_from_logit(*z, *y, loss);
                dlogits.push(focal_loss_grad(*z, *y, loss) / n);
            }
            let mut grads = Gradients::zeros_for(model);
            model.backward(&batch, &dlogits, cache, &mut grads)?;
            Ok((grads, loss_sum, logits))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = parts.into_iter();
    let (mut total, mut loss_sum, mut logits) = iter
        .next()
        .ok_or_else(|| Error::EmptyInput("empty batch".into()))?;
    for (g, l, z) in iter {
        total.accumulate(&g)?;
        loss_sum += l;
        logits.extend(z);
    }
    Ok((total, loss_sum / n, logits))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogSplit {
    Train,
    Val,
}

/// One row of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: LogSplit,
    pub loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub miou: f64,
}

impl EpochRecord {
    fn new(epoch: usize, split: LogSplit, loss: f64, counts: &ConfusionCounts) -> Self {
        let m = Metrics::from_counts(counts);
        EpochRecord {
            epoch,
            split,
            loss,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            miou: m.miou,
        }
    }
}

pub const METRICS_HEADER: &str = "epoch,split,loss,precision,recall,f1,miou";

pub fn metrics_csv(log: &[EpochRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in log {
        let split = match r.split {
            LogSplit::Train => "train",
            LogSplit::Val => "val",
        };
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, split, r.loss, r.precision, r.recall, r.f1, r.miou
        )
        .expect("string write");
    }
    s
}

/// Where a run starts: fresh weights or a saved model and its progress.
#[derive(Clone, Debug, Default)]
pub enum Start {
    #[default]
    Fresh,
    Resume(Box<ModelParams>, TrainState),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights with the best validation F1.
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    /// Weights after the last epoch.
    pub last: ModelParams,
    pub last_epoch: usize,
    pub log: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn state(&self) -> TrainState {
        TrainState {
            epoch: self.last_epoch,
            best_val_f1: self.best_val_f1,
        }
    }
}

/// Focal loss and confusion counts of `model` over the labeled pixels of `data`.
pub fn score(
    model: &ModelParams,
    data: &PixelDataset,
    loss: &FocalLossConfig,
) -> Result<(f64, ConfusionCounts)> {
    let logits = pixel_logits(model, &data.samples, GroupSet::EMPTY)?;
    let mut counts = ConfusionCounts::default();
    let mut loss_sum = 0.0;
    let mut n = 0usize;
    for (z, &l) in logits.iter().zip(&data.labels) {
        if l == NO_DATA {
            continue;
        }
        loss_sum += focal_loss_from_logit(*z, l == FLOOD, loss);
        counts.accumulate(classify(sigmoid(*z), DEFAULT_THRESHOLD), l);
        n += 1;
    }
    let mean = if n == 0 { 0.0 } else { loss_sum / n as f64 };
    Ok((mean, counts))
}

/// Fine-tunes the whole model on fused (all observed groups present) pixels.
///
/// No-data pixels are left out of the loss. Train metrics use the logits seen
/// during the epoch, before each step; validation metrics use the end-of-epoch
/// weights. The best-validation-F1 weights are returned.
pub fn train(
    train_set: &PixelDataset,
    val_set: &PixelDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    start: Start,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyInput(
            "train and val sets must both be non-empty".into(),
        ));
    }
    let observed = GroupSet::observed();
    if let Some(i) = train_set
        .samples
        .iter()
        .position(|s| observed.difference(s.present()) != GroupSet::EMPTY)
    {
        return Err(Error::Data(format!(
            "training pixel {i} lacks some of the 13 fused channels; training uses complete inputs only"
        )));
    }
    let idx: Vec<usize> = (0..train_set.len())
        .filter(|&i| train_set.labels[i] != NO_DATA)
        .collect();
    if idx.is_empty() {
        return Err(Error::EmptyInput("every training pixel is no-data".into()));
    }
    if !idx.iter().any(|&i| train_set.labels[i] == FLOOD) {
        return Err(Error::Config(
            "training data holds no flood pixels; the loss is degenerate".into(),
        ));
    }

    let (mut model, first_epoch, mut best_val_f1) = match start {
        Start::Fresh => (ModelParams::init(model_cfg)?, 1, f64::NEG_INFINITY),
        Start::Resume(m, st) => {
            if m.config != *model_cfg {
                return Err(Error::Config(
                    "resumed checkpoint does not match the model config".into(),
                ));
            }
            (*m, st.epoch + 1, st.best_val_f1)
        }
    };
    let mut state = OptimizerState::new(&model);
    let mut best = model.clone();
    let mut best_epoch = first_epoch.saturating_sub(1);
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut last_epoch = first_epoch.saturating_sub(1);

    for epoch in first_epoch..first_epoch + cfg.max_epochs {
        let mut counts = ConfusionCounts::default();
        let mut loss_sum = 0.0;
        for batch in shuffle_batches(idx.len(), cfg.batch_size, cfg.seed, epoch as u64) {
            let samples: Vec<&PixelSample> =
                batch.iter().map(|&b| &train_set.samples[idx[b]]).collect();
            let labels: Vec<bool> = batch
                .iter()
                .map(|&b| train_set.labels[idx[b]] == FLOOD)
                .collect();
            let (grads, loss, logits) = batch_gradients(&model, &samples, &labels, &cfg.loss)?;
            loss_sum += loss * batch.len() as f64;
            for (z, &y) in logits.iter().zip(&labels) {
                counts.accumulate(classify(sigmoid(*z), DEFAULT_THRESHOLD), y as i8);
            }
            adamw_step(&mut model, &grads, &mut state, cfg)?;
        }
        let train_rec =
            EpochRecord::new(epoch, LogSplit::Train, loss_sum / idx.len() as f64, &counts);
        let (val_loss, val_counts) = score(&model, val_set, &cfg.loss)?;
        let val_rec = EpochRecord::new(epoch, LogSplit::Val, val_loss, &val_counts);
        info!(
            "epoch {epoch}: train loss {:.5} f1 {:.4} | val loss {:.5} f1 {:.4} miou {:.4}",
            train_rec.loss, train_rec.f1, val_rec.loss, val_rec.f1, val_rec.miou
        );
        last_epoch = epoch;
        let improved = val_rec.f1 > best_val_f1;
        log.push(train_rec);
        log.push(val_rec.clone());
        if improved {
            best_val_f1 = val_rec.f1;
            best = model.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                info!("no validation F1 gain for {since_best} epochs; stopping");
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_f1,
        last: model,
        last_epoch,
        log,
    })
}
