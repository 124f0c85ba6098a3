//! Plain stride-16 ViT with three tapped block outputs.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Builder, Ctx, LayerNorm, Mlp, MultiHeadAttention};
use crate::param::ParamId;
use crate::tensor::Shape;

pub const PATCH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VitConfig {
    pub d_back: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
}

impl VitConfig {
    /// Block indices (1-based) whose outputs become `F3`, `F4`, `F5`.
    pub fn taps(&self) -> [usize; 3] {
        let n = self.n_blocks;
        [n.div_ceil(2), (3 * n).div_ceil(4), n]
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(ctx, x)?;
        let a = self.attn.forward(ctx, h, h, h)?;
        let x = ctx.tape.add(x, a)?;
        let h = self.ln2.forward(ctx, x)?;
        let m = self.mlp.forward(ctx, h)?;
        ctx.tape.add(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct Vit {
    pub cfg: VitConfig,
    pub patch_weight: ParamId,
    pub patch_bias: ParamId,
    blocks: Vec<Block>,
}

impl Vit {
    pub fn new(b: &mut Builder<'_>, cfg: VitConfig) -> Result<Self> {
        if cfg.n_blocks == 0 {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        let fan_in = 3 * PATCH * PATCH;
        let patch_weight = b.kaiming_uniform("patch.weight", Shape::new(cfg.d_back, 3, PATCH, PATCH), fan_in)?;
        let patch_bias = b.constant("patch.bias", Shape::new(1, cfg.d_back, 1, 1), 0.0)?;
        let blocks = (0..cfg.n_blocks)
            .map(|i| {
                let mut bb = b.sub(&format!("blocks.{i}"));
                Ok(Block {
                    ln1: LayerNorm::new(&mut bb.sub("ln1"), cfg.d_back)?,
                    attn: MultiHeadAttention::new(&mut bb.sub("attn"), cfg.d_back, cfg.n_heads)?,
                    ln2: LayerNorm::new(&mut bb.sub("ln2"), cfg.d_back)?,
                    mlp: Mlp::new(&mut bb.sub("mlp"), cfg.d_back, 4 * cfg.d_back, cfg.d_back, Activation::Gelu)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, patch_weight, patch_bias, blocks })
    }

    fn check_image(&self, ctx: &Ctx<'_>, image: Var) -> Result<(usize, usize)> {
        let s = ctx.tape.shape(image);
        if s.c() != 3 || s.h() % PATCH != 0 || s.w() % PATCH != 0 || s.h() == 0 || s.w() == 0 {
            return Err(Error::Shape {
                op: "patch_embed",
                detail: format!("image {s:?} must be RGB with extents divisible by {PATCH}"),
            });
        }
        Ok((s.h() / PATCH, s.w() / PATCH))
    }

    /// Patch projection without positions, as an `(n, d, h/16, w/16)` map.
    pub fn patch_map(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<Var> {
        self.check_image(ctx, image)?;
        let w = ctx.param(self.patch_weight);
        let b = ctx.param(self.patch_bias);
        ctx.tape.conv2d(image, w, Some(b), PATCH, 0)
    }

    /// Patch tokens plus fixed sinusoidal positions, `(n, 1, t, d)`.
    pub fn embed(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<Var> {
        let (gh, gw) = self.check_image(ctx, image)?;
        let map = self.patch_map(ctx, image)?;
        let tokens = nn::to_tokens(ctx.tape, map)?;
        let pos = ctx.tape.constant(nn::sincos_2d(gh, gw, self.cfg.d_back));
        ctx.tape.add_broadcast(tokens, pos)
    }

    /// Returns the tapped block outputs as stride-16 maps `(n, d, h/16, w/16)`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<[Var; 3]> {
        let (gh, gw) = self.check_image(ctx, image)?;
        let taps = self.cfg.taps();
        let mut x = self.embed(ctx, image)?;
        let mut out = [x; 3];
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(ctx, x)?;
            for (slot, &t) in out.iter_mut().zip(&taps) {
                if t == i + 1 {
                    *slot = x;
                }
            }
        }
        let mut maps = [x; 3];
        for (m, t) in maps.iter_mut().zip(out) {
            *m = nn::from_tokens(ctx.tape, t, gh, gw)?;
        }
        Ok(maps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_rule() {
        let c = |n| VitConfig { d_back: 8, n_blocks: n, n_heads: 1 }.taps();
        assert_eq!(c(12), [6, 9, 12]);
        assert_eq!(c(4), [2, 3, 4]);
        assert_eq!(c(1), [1, 1, 1]);
    }
}
