//! The assembled detector: backbone, adapter, neck and set-prediction head.

use crate::autograd::{Tape, Var};
use crate::backbone::Vit;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::head::{match_batch, postprocess_topk, set_loss, Decoder, Detection, LossTerms, LossWeights, Target};
use crate::neck::{Neck, NeckOutput};
use crate::nn::{Builder, Ctx};
use crate::param::ParamStore;
use crate::ssa::{Pyramid, Ssa};
use crate::tensor::Tensor;

/// Detections kept per image before evaluation.
pub const MAX_DETS: usize = 100;

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vit: Vit,
    pub ssa: Ssa,
    pub neck: Neck,
    pub head: Decoder,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: Var,
    pub boxes: Var,
    pub taps: [Var; 3],
    pub pyramid: Pyramid,
    pub neck: NeckOutput,
    /// Predictions of the earlier decoder layers, filled by
    /// [`Model::forward_with_aux`] only.
    pub aux: Vec<(Var, Var)>,
}

impl Model {
    /// Registers every parameter in `store`. Initial values depend only on
    /// `seed` and each parameter's name, so two configurations built from
    /// the same seed agree on every parameter they share.
    pub fn new(store: &mut ParamStore, cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(store, seed);
        Ok(Self {
            cfg,
            vit: Vit::new(&mut b.sub("backbone"), cfg.vit())?,
            ssa: Ssa::new(&mut b.sub("ssa"), cfg.ssa_config())?,
            neck: Neck::new(&mut b.sub("neck"), cfg.neck_config())?,
            head: Decoder::new(&mut b.sub("head"), cfg.head())?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<ModelOutput> {
        self.forward_impl(ctx, image, false)
    }

    /// Like [`Model::forward`], also returning every intermediate decoder
    /// prediction for deep supervision.
    pub fn forward_with_aux(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<ModelOutput> {
        self.forward_impl(ctx, image, true)
    }

    fn forward_impl(&self, ctx: &mut Ctx<'_>, image: Var, aux: bool) -> Result<ModelOutput> {
        let taps = self.vit.forward(ctx, image)?;
        let pyramid = self.ssa.forward(ctx, image, taps)?;
        let neck = self.neck.forward(ctx, &pyramid)?;
        let mut preds = self.head.forward_layers(ctx, &neck.out, aux)?;
        let (logits, boxes) = preds.pop().expect("final prediction");
        Ok(ModelOutput { logits, boxes, taps, pyramid, neck, aux: preds })
    }

    /// Matches and scores a training batch; returns the loss terms with the
    /// total still on the tape. The total includes the auxiliary predictions
    /// in `out.aux`; the reported `cls`, `l1` and `giou` are the final layer's.
    pub fn loss(&self, tape: &mut Tape, out: &ModelOutput, targets: &[Vec<Target>], w: &LossWeights) -> Result<LossTerms> {
        let assignments = match_batch(tape, out.logits, out.boxes, targets, w)?;
        let mut terms = set_loss(tape, out.logits, out.boxes, targets, &assignments, w)?;
        // each intermediate prediction is matched on its own
        for &(logits, boxes) in &out.aux {
            let a = match_batch(tape, logits, boxes, targets, w)?;
            let t = set_loss(tape, logits, boxes, targets, &a, w)?;
            terms.total = tape.add(terms.total, t.total)?;
        }
        Ok(terms)
    }

    /// Eval-mode detections for each image of the batch.
    pub fn predict(&self, store: &mut ParamStore, images: Tensor) -> Result<Vec<Vec<Detection>>> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, false);
        let x = ctx.tape.constant(images);
        let out = self.forward(&mut ctx, x)?;
        let k = self.cfg.num_classes;
        let q = self.cfg.n_queries;
        let logits = tape.value(out.logits).data();
        let boxes = tape.value(out.boxes).data();
        let n = tape.shape(out.logits).n();
        let keep = MAX_DETS.min(q * k);
        Ok((0..n)
            .map(|i| postprocess_topk(&logits[i * q * k..(i + 1) * q * k], &boxes[i * q * 4..(i + 1) * q * 4], k, keep))
            .collect())
    }
}
