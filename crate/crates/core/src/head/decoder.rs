use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Builder, Ctx, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::param::ParamId;
use crate::ssa::Pyramid;
use crate::tensor::Shape;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    pub d_neck: usize,
    pub n_queries: usize,
    pub d_dec: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub num_classes: usize,
}

/// Prior probability the class bias starts from, so early focal terms are
/// dominated by the few positives instead of the many background logits.
const CLASS_PRIOR: f64 = 0.01;
const QSTD: f64 = 1.0;

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

impl DecoderLayer {
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var, memory: Var) -> Result<Var> {
        let h = self.ln_self.forward(ctx, x)?;
        let a = self.self_attn.forward(ctx, h, h, h)?;
        let x = ctx.tape.add(x, a)?;
        let h = self.ln_cross.forward(ctx, x)?;
        let a = self.cross_attn.forward(ctx, h, memory, memory)?;
        let x = ctx.tape.add(x, a)?;
        let h = self.ln_mlp.forward(ctx, x)?;
        let m = self.mlp.forward(ctx, h)?;
        ctx.tape.add(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: HeadConfig,
    input_proj: Vec<Linear>,
    level_embed: Vec<ParamId>,
    pub queries: ParamId,
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    pub class_head: Linear,
    box_head: [Linear; 3],
}

impl Decoder {
    pub fn new(b: &mut Builder<'_>, cfg: HeadConfig) -> Result<Self> {
        if cfg.n_queries == 0 || cfg.num_classes == 0 {
            return Err(Error::Config("the head needs at least one query and one class".into()));
        }
        let d = cfg.d_dec;
        let mut input_proj = Vec::new();
        let mut level_embed = Vec::new();
        for level in 2..=5 {
            input_proj.push(Linear::new(&mut b.sub(&format!("input_proj.{level}")), cfg.d_neck, d, true)?);
            level_embed.push(b.trunc_normal(&format!("level_embed.{level}"), Shape::new(1, 1, 1, d), 0.02)?);
        }
        let queries = b.trunc_normal("queries", Shape::new(1, 1, cfg.n_queries, d), QSTD)?;
        let layers = (0..cfg.n_dec_layers)
            .map(|i| {
                let mut lb = b.sub(&format!("layers.{i}"));
                Ok(DecoderLayer {
                    ln_self: LayerNorm::new(&mut lb.sub("ln_self"), d)?,
                    self_attn: MultiHeadAttention::new(&mut lb.sub("self_attn"), d, cfg.n_heads)?,
                    ln_cross: LayerNorm::new(&mut lb.sub("ln_cross"), d)?,
                    cross_attn: MultiHeadAttention::new(&mut lb.sub("cross_attn"), d, cfg.n_heads)?,
                    ln_mlp: LayerNorm::new(&mut lb.sub("ln_mlp"), d)?,
                    mlp: Mlp::new(&mut lb.sub("mlp"), d, 4 * d, d, Activation::Gelu)?,
                })
            })
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(&mut b.sub("norm"), d)?;
        let class_head = Linear::with_bias(
            &mut b.sub("class"),
            d,
            cfg.num_classes,
            -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln(),
        )?;
        let box_head = [
            Linear::kaiming(&mut b.sub("box.0"), d, d)?,
            Linear::kaiming(&mut b.sub("box.1"), d, d)?,
            Linear::new(&mut b.sub("box.2"), d, 4, true)?,
        ];
        Ok(Self { cfg, input_proj, level_embed, queries, layers, norm, class_head, box_head })
    }

    /// Flattened, projected tokens of every pyramid level with level and
    /// position embeddings added: `(n, 1, Σ h·w, d_dec)`.
    pub fn memory(&self, ctx: &mut Ctx<'_>, pyr: &Pyramid) -> Result<Var> {
        let mut parts = Vec::new();
        for (level, x) in pyr.levels() {
            let s = ctx.tape.shape(x);
            if s.c() != self.cfg.d_neck {
                return Err(Error::Shape {
                    op: "decoder",
                    detail: format!("level {level} width {} != d_neck {}", s.c(), self.cfg.d_neck),
                });
            }
            let tokens = nn::to_tokens(ctx.tape, x)?;
            let t = self.input_proj[level - 2].forward(ctx, tokens)?;
            let lvl = ctx.param(self.level_embed[level - 2]);
            let t = ctx.tape.add_broadcast(t, lvl)?;
            let pos = ctx.tape.constant(nn::sincos_2d(s.h(), s.w(), self.cfg.d_dec));
            parts.push(ctx.tape.add_broadcast(t, pos)?);
        }
        ctx.tape.concat(&parts, 2)
    }

    /// Returns class logits `(n, 1, Q, K)` and boxes `(n, 1, Q, 4)` in (0, 1).
    pub fn forward(&self, ctx: &mut Ctx<'_>, pyr: &Pyramid) -> Result<(Var, Var)> {
        let mut outs = self.forward_layers(ctx, pyr, false)?;
        Ok(outs.pop().expect("at least the final prediction"))
    }

    /// Predictions after every decoder layer when `all` is set, otherwise
    /// after the last one only. The last entry is always the final output.
    pub fn forward_layers(&self, ctx: &mut Ctx<'_>, pyr: &Pyramid, all: bool) -> Result<Vec<(Var, Var)>> {
        let memory = self.memory(ctx, pyr)?;
        let n = ctx.tape.shape(memory).n();
        let q = ctx.param(self.queries);
        let mut x = ctx.tape.broadcast_to(q, Shape::new(n, 1, self.cfg.n_queries, self.cfg.d_dec))?;
        let mut outs = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(ctx, x, memory)?;
            if all || i + 1 == self.layers.len() {
                outs.push(self.predict(ctx, x)?);
            }
        }
        if outs.is_empty() {
            outs.push(self.predict(ctx, x)?);
        }
        Ok(outs)
    }

    fn predict(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<(Var, Var)> {
        let x = self.norm.forward(ctx, x)?;
        let logits = self.class_head.forward(ctx, x)?;
        let mut h = x;
        for (i, lin) in self.box_head.iter().enumerate() {
            h = lin.forward(ctx, h)?;
            if i < 2 {
                h = ctx.tape.relu(h);
            }
        }
        let boxes = ctx.tape.sigmoid(h);
        Ok((logits, boxes))
    }
}
