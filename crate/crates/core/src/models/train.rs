use std::fmt;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{batch_inputs, fnv1a, frame_inputs, Model, ModelKind};
use crate::error::{Error, Result};
use crate::evaluate::{ConfusionMatrix, MiouReport};
use crate::geometry::PgmFrame;
use crate::labels::{loss_weights, ClassCounts};
use crate::nn::{weighted_ce, Sgd, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Per-class loss weights, 16 entries.
    pub weights: Vec<f64>,
    /// Validate every this many epochs (the last epoch always validates).
    pub eval_every: usize,
    /// Stop once validation mIoU reaches this value.
    pub target_miou: Option<f64>,
}

impl TrainConfig {
    pub fn new(weights: Vec<f64>) -> Self {
        Self {
            epochs: 350,
            batch: 64,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
            weights,
            eval_every: 1,
            target_miou: None,
        }
    }

    pub fn hash(&self, kind: ModelKind) -> u64 {
        let text = format!(
            "{kind} {} {} {} {} {} {:?} {} {:?}",
            self.epochs, self.batch, self.lr, self.momentum, self.seed, self.weights, self.eval_every, self.target_miou
        );
        fnv1a(text.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_miou: Option<f64>,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.val_miou {
            Some(m) => write!(f, "{} {:.6} {:.6}", self.epoch, self.train_loss, m),
            None => write!(f, "{} {:.6} -", self.epoch, self.train_loss),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the best validation mIoU.
    pub best: Model,
    pub best_miou: f64,
    pub last: Model,
    pub log: Vec<EpochRecord>,
}

/// Loss weights from the label frequencies of a set of frames.
pub fn frame_weights(frames: &[PgmFrame], eps: f64) -> Result<Vec<f64>> {
    let mut counts = ClassCounts::default();
    for f in frames {
        let ids: Vec<u16> = f.labels.iter().map(|&l| l as u16).collect();
        counts.add_labels(&ids);
    }
    loss_weights(&counts.fractions(), eps)
}

/// Cell-level confusion statistics of a model over frames.
pub fn evaluate_frames(model: &Model, frames: &[PgmFrame]) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::default();
    for f in frames {
        let pred = model.infer(f)?;
        cm.accumulate(&f.labels, &pred, Some(&f.mask))?;
    }
    Ok(cm.miou())
}

/// Minibatch SGD on the weighted cross-entropy. `on_epoch` sees every log
/// record as soon as it is produced, together with the model whenever the
/// validation mIoU improved at that epoch.
pub fn train(
    kind: ModelKind,
    train_frames: &[PgmFrame],
    val_frames: &[PgmFrame],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, Option<&Model>) -> Result<()>,
) -> Result<TrainOutcome> {
    if train_frames.is_empty() {
        return Err(Error::Consistency("training set is empty".into()));
    }
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(Error::Usage("epochs and batch must be positive".into()));
    }
    let val = if val_frames.is_empty() { train_frames } else { val_frames };
    let inputs: Vec<Vec<Tensor<f32>>> = train_frames
        .iter()
        .map(|f| frame_inputs(kind, f))
        .collect::<Result<_>>()?;
    for f in val {
        super::check_grid(f.h, f.w)?;
    }
    let mut model = Model::build(kind, cfg.seed)?;
    model.meta.config_hash = cfg.hash(kind);
    let mut opt = Sgd::<f32>::new(cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..train_frames.len()).collect();
    let mut best: Option<(f64, Model)> = None;
    let mut log = Vec::new();
    for epoch in 1..=cfg.epochs as u32 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let per: Vec<&Vec<Tensor<f32>>> = chunk.iter().map(|&i| &inputs[i]).collect();
            let x = batch_inputs(&per)?;
            let refs: Vec<&Tensor<f32>> = x.iter().collect();
            let target: Vec<u32> = chunk.iter().flat_map(|&i| train_frames[i].labels.iter().copied()).collect();
            let tape = model.graph.forward_train(&refs)?;
            let (loss, dlogits) = weighted_ce(tape.output(model.graph.output), &target, &cfg.weights)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss became {loss} at epoch {epoch}")));
            }
            let grads = model.graph.backward(&tape, dlogits)?;
            drop(tape);
            opt.step(&mut model.graph.param_slices(), &grads.params);
            loss_sum += loss;
            batches += 1;
        }
        model.meta.epoch = epoch;
        let evaluate = epoch as usize % cfg.eval_every.max(1) == 0 || epoch as usize == cfg.epochs;
        let val_miou = if evaluate {
            Some(evaluate_frames(&model, val)?.miou)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_miou,
        };
        let improved = val_miou.is_some_and(|m| best.as_ref().is_none_or(|(b, _)| m > *b));
        on_epoch(&rec, improved.then_some(&model))?;
        log.push(rec);
        if let Some(m) = val_miou {
            if improved {
                best = Some((m, model.clone()));
            }
            if cfg.target_miou.is_some_and(|t| m >= t) {
                break;
            }
        }
    }
    let (best_miou, best) = best.expect("last epoch always validates");
    Ok(TrainOutcome {
        best,
        best_miou,
        last: model,
        log,
    })
}
