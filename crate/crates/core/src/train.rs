//! Adam, the learning-rate schedule, the training loop, and evaluation.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use fan_autograd::{Graph, ParamGroup, ParamStore, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{Dataset, ImageSample};
use crate::error::{FanError, Result};
use crate::head::{iou, precision_at, BinaryMask};
use crate::model::{FanModel, LossWeights};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.entries().iter().map(|e| Tensor::zeros(e.tensor.shape().to_vec())).collect();
        Self { beta1, beta2, eps, t: 0, m: zeros.clone(), v: zeros }
    }

    /// One bias-corrected update with a learning rate per parameter.
    /// Non-finite gradients abort before anything changes.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lrs: &[f64]) -> Result<()> {
        if grads.len() != params.len() || lrs.len() != params.len() || self.m.len() != params.len() {
            return Err(FanError::Config(format!(
                "optimizer holds {} moments for {} parameters, {} gradients, {} rates",
                self.m.len(),
                params.len(),
                grads.len(),
                lrs.len()
            )));
        }
        for (e, g) in params.entries().iter().zip(grads) {
            if g.shape() != e.tensor.shape() {
                return Err(fan_autograd::TensorError::shape("adam_step", e.tensor.shape(), g.shape()).into());
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(FanError::NonFinite(format!("gradient of {} at index {i} is {}", e.name, g.data()[i])));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params.tensor_mut(id).data_mut();
            for (((pj, mj), vj), &gj) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads[i].data()) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *pj -= lrs[i] * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Learning rate at `epoch`: decayed from the milestone on, and scaled for backbone weights.
pub fn lr_at(epoch: usize, cfg: &TrainConfig, is_backbone: bool) -> f64 {
    let mut lr = cfg.base_lr;
    if epoch >= cfg.lr_milestone {
        lr *= cfg.lr_decay;
    }
    if is_backbone {
        lr *= cfg.backbone_lr_scale;
    }
    lr
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub mean_iou: f64,
    pub p50: f64,
    pub p70: f64,
    pub p90: f64,
    pub ious: Vec<f64>,
}

impl EvalReport {
    pub fn from_ious(ious: Vec<f64>) -> Result<Self> {
        let count = ious.len();
        let p50 = precision_at(&ious, 0.5)?;
        let p70 = precision_at(&ious, 0.7)?;
        let p90 = precision_at(&ious, 0.9)?;
        let mean_iou = ious.iter().sum::<f64>() / count as f64;
        Ok(Self { count, mean_iou, p50, p70, p90, ious })
    }

    /// Scores predicted masks against ground truth pairwise.
    pub fn from_masks(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(FanError::Data(format!("{} predictions for {} ground-truth masks", pred.len(), gt.len())));
        }
        Self::from_ious(pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect::<Result<_>>()?)
    }
}

fn check_tokens(model: &FanModel, samples: &[ImageSample]) -> Result<()> {
    if let Some(s) = samples.iter().find(|s| s.tokens.ids.len() != model.config.max_len) {
        return Err(FanError::Compatibility(format!(
            "sample {} has {} tokens but the model expects {}",
            s.id,
            s.tokens.ids.len(),
            model.config.max_len
        )));
    }
    if let Some(s) = samples.iter().find(|s| s.tokens.ids.iter().any(|&t| t >= model.config.vocab_size)) {
        return Err(FanError::Compatibility(format!("sample {} uses ids beyond the model vocabulary", s.id)));
    }
    Ok(())
}

/// Full-resolution IoU for every sample, in order.
pub fn evaluate(model: &FanModel, samples: &[ImageSample]) -> Result<EvalReport> {
    check_tokens(model, samples)?;
    let mut ious = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = model.predict(&s.image, &s.tokens)?;
        ious.push(iou(&pred.mask, &s.mask)?);
    }
    EvalReport::from_ious(ious)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub val_mean_iou: Option<f64>,
    pub val_p50: Option<f64>,
    pub val_p70: Option<f64>,
    pub val_p90: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where to write `metrics.jsonl`, `best.ckpt`, and `last.ckpt`.
    pub out_dir: Option<PathBuf>,
    /// Print progress to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FanModel,
    pub optimizer: Adam,
    /// Mean batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochMetrics>,
    pub best_val_iou: Option<f64>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let epoch = self.epochs.last().map_or(0, |e| e.epoch + 1);
        Checkpoint::new(cfg.clone(), self.model.params.clone(), Some(self.optimizer.clone()), epoch, self.step_losses.len())
    }
}

pub const METRICS: &str = "metrics.jsonl";
pub const BEST: &str = "best.ckpt";
pub const LAST: &str = "last.ckpt";

/// Mean loss over `batch` on a fresh graph, with gradients for every parameter.
pub fn batch_gradients(model: &FanModel, batch: &[&ImageSample], w: &LossWeights) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let mut losses = Vec::with_capacity(batch.len());
    for s in batch {
        let out = model.forward(&mut g, &p, &s.image, &s.tokens)?;
        losses.push(model.loss(&mut g, out.logits, &s.mask, w)?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    let mean = g.scale(total, 1.0 / batch.len() as f64);
    let loss = g.value(mean).item();
    if !loss.is_finite() {
        return Err(FanError::NonFinite(format!("training loss is {loss}")));
    }
    g.backward(mean)?;
    Ok((loss, p.grads(&g)))
}

/// Deterministic training: fixed initialization and shuffle order from `cfg.seed`.
pub fn train(cfg: &TrainConfig, train_set: &Dataset, val_set: Option<&Dataset>, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let samples: &[ImageSample] = match cfg.train_limit {
        Some(n) => &train_set.samples[..n.min(train_set.samples.len())],
        None => &train_set.samples,
    };
    if samples.is_empty() {
        return Err(FanError::Data("training split is empty".into()));
    }
    let val: Option<&[ImageSample]> = val_set.map(|v| match cfg.val_limit {
        Some(n) => &v.samples[..n.min(v.samples.len())],
        None => &v.samples[..],
    });
    let val = val.filter(|v| !v.is_empty());

    let mut model = FanModel::new(&cfg.model, rng::derive_seed(cfg.seed, "init"))?;
    check_tokens(&model, samples)?;
    if let Some(v) = val {
        check_tokens(&model, v)?;
    }
    let mut adam = Adam::new(&model.params, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let weights = LossWeights { bce: cfg.bce_weight, dice: cfg.dice_weight, smooth: cfg.dice_smooth, full_resolution: cfg.full_resolution_loss };
    let backbone: Vec<bool> = model.params.entries().iter().map(|e| e.group == ParamGroup::Backbone).collect();
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| FanError::io(dir, e))?;
        let path = dir.join(METRICS);
        fs::write(&path, b"").map_err(|e| FanError::io(&path, e))?;
    }

    let mut step_losses = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<f64> = None;
    'epochs: for epoch in 0..cfg.epochs {
        if step_losses.len() >= max_steps {
            break;
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &format!("shuffle/{epoch}")));
        let lrs: Vec<f64> = backbone.iter().map(|&b| lr_at(epoch, cfg, b)).collect();
        let start = step_losses.len();
        for chunk in order.chunks(cfg.batch_size) {
            if step_losses.len() >= max_steps {
                break;
            }
            let batch: Vec<&ImageSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, mut grads) = batch_gradients(&model, &batch, &weights)?;
            clip_grad_norm(&mut grads, cfg.grad_clip);
            adam.step(&mut model.params, &grads, &lrs)?;
            step_losses.push(loss);
            if opts.verbose && step_losses.len() % 10 == 0 {
                eprintln!("step {:>6}  epoch {:>3}  loss {:.5}", step_losses.len(), epoch, loss);
            }
        }
        let taken = &step_losses[start..];
        if taken.is_empty() {
            break 'epochs;
        }
        let train_loss = taken.iter().sum::<f64>() / taken.len() as f64;
        let report = val.map(|v| evaluate(&model, v)).transpose()?;
        let m = EpochMetrics {
            epoch,
            steps: step_losses.len(),
            train_loss,
            lr: lr_at(epoch, cfg, false),
            val_mean_iou: report.as_ref().map(|r| r.mean_iou),
            val_p50: report.as_ref().map(|r| r.p50),
            val_p70: report.as_ref().map(|r| r.p70),
            val_p90: report.as_ref().map(|r| r.p90),
        };
        if opts.verbose {
            eprintln!(
                "epoch {epoch:>3}  loss {train_loss:.5}  val IoU {}",
                m.val_mean_iou.map_or("-".to_string(), |v| format!("{v:.4}"))
            );
        }
        let improved = match (m.val_mean_iou, best) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if let Some(v) = m.val_mean_iou {
            if improved {
                best = Some(v);
            }
        }
        if let Some(dir) = &opts.out_dir {
            append_metrics(&dir.join(METRICS), &m)?;
            let ckpt = Checkpoint::new(cfg.clone(), model.params.clone(), Some(adam.clone()), epoch + 1, step_losses.len());
            ckpt.save(&dir.join(LAST))?;
            if improved {
                ckpt.save(&dir.join(BEST))?;
            }
        }
        epochs.push(m);
    }
    Ok(TrainOutcome { model, optimizer: adam, step_losses, epochs, best_val_iou: best })
}

fn append_metrics(path: &Path, m: &EpochMetrics) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).create(true).open(path).map_err(|e| FanError::io(path, e))?;
    let mut line = serde_json::to_vec(m).expect("metrics serialize");
    line.push(b'\n');
    f.write_all(&line).map_err(|e| FanError::io(path, e))
}
