//! Training loop, evaluation and activation dumps.

use std::fmt;

use crate::autograd::Tape;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{ap_eval, EvalParams, EvalResult};
use crate::head::LossWeights;
use crate::model::Model;
use crate::nn::Ctx;
use crate::param::{AdamW, ParamStore};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

/// Images per forward pass during evaluation.
const EVAL_BATCH: usize = 32;

/// Mean loss terms over one epoch's steps.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

/// One metrics log record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: StepLoss,
    /// `None` when the epoch was not evaluated.
    pub ap: Option<f64>,
    pub ap_s: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        write!(
            f,
            "epoch={} loss={:.6} cls={:.6} l1={:.6} giou={:.6} ap={} ap_s={}",
            self.epoch,
            self.loss.total,
            self.loss.cls,
            self.loss.l1,
            self.loss.giou,
            opt(self.ap),
            opt(self.ap_s)
        )
    }
}

/// Synthetic generator settings for one split, seeded from the run seed.
pub fn split_config(cfg: &RunConfig, split: &str) -> crate::data::SynthConfig {
    crate::data::SynthConfig { seed: derive_seed(cfg.seed, &format!("data.{split}")), ..cfg.data.clone() }
}

/// Loads the configured dataset directories, or generates the splits.
pub fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let get = |path: &Option<std::path::PathBuf>, split: &str, n: usize| -> Result<Dataset> {
        match path {
            Some(p) => Dataset::load(p),
            None => Dataset::generate(&split_config(cfg, split), n),
        }
    };
    Ok((get(&cfg.train_data, "train", cfg.train_images)?, get(&cfg.eval_data, "eval", cfg.eval_images)?))
}

pub fn eval_params(cfg: &RunConfig, ds: &Dataset) -> EvalParams {
    EvalParams::coco(cfg.model.num_classes, ds.cfg.small_area(), ds.cfg.medium_area())
}

/// Eval-mode detections for every image of `ds`, batched in index order.
pub fn evaluate(model: &Model, store: &mut ParamStore, ds: &Dataset, params: &EvalParams, score_threshold: f64) -> Result<EvalResult> {
    let mut dets = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        for mut d in model.predict(store, ds.batch(chunk))? {
            d.retain(|x| x.score >= score_threshold);
            dets.push(d);
        }
    }
    Ok(ap_eval(&dets, &ds.targets, params))
}

/// One optimizer step on a batch; returns the loss terms before the update.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    opt: &AdamW,
    clip: f64,
    images: Tensor,
    targets: &[Vec<crate::head::Target>],
    w: &LossWeights,
) -> Result<StepLoss> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, true);
    let x = ctx.tape.constant(images);
    let out = model.forward_with_aux(&mut ctx, x)?;
    let terms = model.loss(&mut tape, &out, targets, w)?;
    let total = tape.value(terms.total).item();
    if !total.is_finite() {
        return Err(Error::InvalidArgument(format!("loss became {total}")));
    }
    tape.backward(terms.total)?;
    store.zero_grads();
    store.accumulate_grads(&tape);
    drop(tape);
    if clip > 0.0 {
        store.clip_grad_norm(clip);
    }
    store.adamw_step(opt)?;
    Ok(StepLoss { total, cls: terms.cls, l1: terms.l1, giou: terms.giou })
}

/// Everything a finished run produces.
pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub logs: Vec<EpochLog>,
    /// Loss of the first step, before any update.
    pub initial_loss: Option<f64>,
    pub final_eval: Option<EvalResult>,
}

/// Trains from scratch. Batches are drawn from a per-epoch shuffle seeded by
/// `(cfg.seed, epoch)`; `on_epoch` sees each log record as soon as it exists.
pub fn train(cfg: &RunConfig, train_ds: &Dataset, eval_ds: &Dataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.is_empty() && cfg.epochs > 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    for ds in [train_ds, eval_ds] {
        if ds.cfg.extent != cfg.model.image_size {
            return Err(Error::Config(format!(
                "dataset extent {} differs from image_size {}",
                ds.cfg.extent, cfg.model.image_size
            )));
        }
        if ds.cfg.num_classes > cfg.model.num_classes {
            return Err(Error::Config("dataset has more classes than the model".into()));
        }
    }
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, cfg.model, cfg.seed)?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let total_steps = cfg.epochs * train_ds.len().div_ceil(cfg.batch_size);
    let mut step = 0;
    let w = LossWeights::default();
    let params = eval_params(cfg, eval_ds);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut initial_loss = None;
    let mut final_eval = None;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        Rng::new(derive_seed(cfg.seed, &format!("shuffle.{epoch}"))).shuffle(&mut order);
        let mut sum = StepLoss::default();
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            opt.lr = cfg.lr_schedule.lr_at(cfg.lr, step, total_steps);
            step += 1;
            let l = train_step(&model, &mut store, &opt, cfg.clip_grad, train_ds.batch(batch), &train_ds.batch_targets(batch), &w)?;
            initial_loss.get_or_insert(l.total);
            sum.total += l.total;
            sum.cls += l.cls;
            sum.l1 += l.l1;
            sum.giou += l.giou;
            steps += 1;
        }
        let k = steps.max(1) as f64;
        let loss = StepLoss { total: sum.total / k, cls: sum.cls / k, l1: sum.l1 / k, giou: sum.giou / k };
        let due = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        let r = if due && !eval_ds.is_empty() {
            Some(evaluate(&model, &mut store, eval_ds, &params, cfg.score_threshold)?)
        } else {
            None
        };
        let log = EpochLog { epoch, loss, ap: r.as_ref().map(|r| r.ap), ap_s: r.as_ref().map(|r| r.ap_s) };
        on_epoch(&log);
        logs.push(log);
        if epoch == cfg.epochs {
            final_eval = r;
        }
    }
    Ok(TrainOutcome { model, store, logs, initial_loss, final_eval })
}

/// Channel mean of image `i` of an `(n, c, h, w)` map, min-max scaled to
/// `0..=255`. A constant map becomes mid-gray.
pub fn activation_gray(t: &Tensor, i: usize) -> (usize, usize, Vec<u8>) {
    let [_, c, h, w] = t.shape().0;
    let hw = h * w;
    let base = i * c * hw;
    let d = t.data();
    let mean: Vec<f64> = (0..hw)
        .map(|p| (0..c).map(|ch| d[base + ch * hw + p]).sum::<f64>() / c as f64)
        .collect();
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gray = if !(hi > lo) {
        vec![128; hw]
    } else {
        mean.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
    };
    (h, w, gray)
}

/// Neck output maps for one image at the requested levels.
pub fn feature_maps(model: &Model, store: &mut ParamStore, image: Tensor, levels: &[usize]) -> Result<Vec<(usize, Tensor)>> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, false);
    let x = ctx.tape.constant(image);
    let out = model.forward(&mut ctx, x)?;
    levels
        .iter()
        .map(|&l| {
            let v = out
                .neck
                .out
                .level(l)
                .ok_or_else(|| Error::InvalidArgument(format!("level {l} is not produced by this neck")))?;
            Ok((l, tape.value(v).clone()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn constant_map_is_mid_gray() {
        let (h, w, g) = activation_gray(&Tensor::full(Shape::new(1, 4, 2, 3), 7.0), 0);
        assert_eq!((h, w), (2, 3));
        assert!(g.iter().all(|&v| v == 128));
    }

    #[test]
    fn log_line_grammar() {
        let l = EpochLog { epoch: 3, loss: StepLoss { total: 1.5, cls: 0.5, l1: 0.25, giou: 0.75 }, ap: None, ap_s: Some(0.125) };
        assert_eq!(l.to_string(), "epoch=3 loss=1.500000 cls=0.500000 l1=0.250000 giou=0.750000 ap=nan ap_s=0.125000");
    }
}
