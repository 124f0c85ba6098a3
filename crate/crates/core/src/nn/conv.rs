use super::{BatchNorm2d, Builder, Ctx};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::param::ParamId;
use crate::tensor::Shape;

/// Square-kernel convolution, `k ∈ {1, 3}`, zero padding `k / 2`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder<'_>, c_in: usize, c_out: usize, k: usize, stride: usize, bias: bool) -> Result<Self> {
        if k != 1 && k != 3 {
            return Err(Error::InvalidArgument(format!("kernel size {k} (expected 1 or 3)")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidArgument(format!("stride {stride} (expected 1 or 2)")));
        }
        let fan_in = c_in * k * k;
        let weight = b.kaiming_uniform("weight", Shape::new(c_out, c_in, k, k), fan_in)?;
        let bias = if bias {
            Some(b.constant("bias", Shape::new(1, c_out, 1, 1), 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias, c_in, c_out, k, stride })
    }

    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x).c();
        if c != self.c_in {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("expected {} input channels, got {c}", self.c_in),
            });
        }
        let w = ctx.param(self.weight);
        let b = self.bias.map(|id| ctx.param(id));
        ctx.tape.conv2d(x, w, b, self.stride, self.pad())
    }
}

/// Convolution (no bias) → batch norm → SiLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBlock {
    pub fn new(b: &mut Builder<'_>, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let conv = Conv2d::new(&mut b.sub("conv"), c_in, c_out, k, stride, false)?;
        let bn = BatchNorm2d::new(&mut b.sub("bn"), c_out)?;
        Ok(Self { conv, bn })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.tape.silu(y))
    }

    pub fn c_out(&self) -> usize {
        self.conv.c_out
    }
}
