use super::{Builder, Ctx};
use crate::autograd::Var;
use crate::error::Result;
use crate::param::{BufferId, ParamId};
use crate::tensor::{Shape, Tensor};

/// Per-channel batch normalization. Training mode normalizes with batch
/// statistics and folds them into the running estimates with `momentum`;
/// inference mode uses the running estimates only.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder<'_>, channels: usize) -> Result<Self> {
        let shape = Shape::new(1, channels, 1, 1);
        Ok(Self {
            gamma: b.constant("weight", shape, 1.0)?,
            beta: b.constant("bias", shape, 0.0)?,
            running_mean: b.buffer("running_mean", Tensor::zeros(shape))?,
            running_var: b.buffer("running_var", Tensor::full(shape, 1.0))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        if ctx.train {
            let (y, stats) = ctx.tape.batch_norm_train(x, g, b, self.eps)?;
            let m = self.momentum;
            for (r, s) in ctx.store.buffer_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - m) * *r + m * s;
            }
            for (r, s) in ctx.store.buffer_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - m) * *r + m * s;
            }
            Ok(y)
        } else {
            let mean = ctx.store.buffer(self.running_mean).data().to_vec();
            let var = ctx.store.buffer(self.running_var).data().to_vec();
            ctx.tape.batch_norm_eval(x, g, b, &mean, &var, self.eps)
        }
    }
}

/// Normalization over the last axis (the channel axis of token layouts).
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, d: usize) -> Result<Self> {
        let shape = Shape::new(1, 1, 1, d);
        Ok(Self {
            gamma: b.constant("weight", shape, 1.0)?,
            beta: b.constant("bias", shape, 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        ctx.tape.layer_norm(x, g, b, self.eps)
    }
}
