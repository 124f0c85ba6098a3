//! The full gradient-check suite: every differentiable tape operation and
//! every composite block, each on several random toy-sized inputs.

use super::{max_rel_error, CheckOptions};
use crate::autograd::{Tape, Unary, Var};
use crate::error::Result;
use crate::head::{match_batch, set_loss, BBox, Decoder, HeadConfig, LossWeights, Target};
use crate::neck::{BiFusion, FusionBlock, FusionMode};
use crate::nn::{Activation, Builder, ConvBlock, Ctx, LayerNorm, Mlp, MultiHeadAttention};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::ssa::{Pyramid, Ssa, SsaConfig, SsaVariant};
use crate::tensor::{Shape, Tensor};

/// Random trials per case.
pub const TRIALS: usize = 10;
/// Maximum accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

type CaseFn = fn(u64) -> Result<f64>;

fn rand(rng: &mut Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.range(lo, hi)).collect()).expect("sized by shape")
}

fn opts(seed: u64) -> CheckOptions {
    CheckOptions { seed, ..CheckOptions::default() }
}

/// Checks a parameter-free function of freshly drawn inputs.
fn check_op(seed: u64, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut store = ParamStore::new();
    max_rel_error(&mut store, &inputs, &opts(seed), |t, _, v| f(t, v))
}

fn s(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w)
}

fn op_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("add", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(2, 3, 2, 2), -1.0, 1.0), rand(&mut r, s(2, 3, 2, 2), -1.0, 1.0)];
            check_op(seed, i, |t, v| t.add(v[0], v[1]))
        }),
        ("sub", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(2, 3, 2, 2), -1.0, 1.0), rand(&mut r, s(2, 3, 2, 2), -1.0, 1.0)];
            check_op(seed, i, |t, v| t.sub(v[0], v[1]))
        }),
        ("mul", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(2, 3, 2, 2), -1.0, 1.0), rand(&mut r, s(2, 3, 2, 2), -1.0, 1.0)];
            check_op(seed, i, |t, v| t.mul(v[0], v[1]))
        }),
        ("div", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(2, 3, 2, 2), -1.0, 1.0), rand(&mut r, s(2, 3, 2, 2), 0.5, 1.5)];
            check_op(seed, i, |t, v| t.div(v[0], v[1]))
        }),
        ("minimum", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(1, 2, 3, 3), -1.0, 1.0), rand(&mut r, s(1, 2, 3, 3), -1.0, 1.0)];
            check_op(seed, i, |t, v| t.minimum(v[0], v[1]))
        }),
        ("maximum", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(1, 2, 3, 3), -1.0, 1.0), rand(&mut r, s(1, 2, 3, 3), -1.0, 1.0)];
            check_op(seed, i, |t, v| t.maximum(v[0], v[1]))
        }),
        ("scale_add_scalar", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(1, 2, 3, 3), -1.0, 1.0)];
            check_op(seed, i, |t, v| {
                let y = t.scale(v[0], -1.7);
                Ok(t.add_scalar(y, 0.3))
            })
        }),
        ("silu", |seed| unary(seed, Unary::Silu, -3.0, 3.0)),
        ("gelu", |seed| unary(seed, Unary::Gelu, -3.0, 3.0)),
        ("sigmoid", |seed| unary(seed, Unary::Sigmoid, -4.0, 4.0)),
        ("relu", |seed| unary(seed, Unary::Relu, -1.0, 1.0)),
        ("abs", |seed| unary(seed, Unary::Abs, -1.0, 1.0)),
        ("exp", |seed| unary(seed, Unary::Exp, -2.0, 2.0)),
        ("log", |seed| unary(seed, Unary::Log, 0.2, 3.0)),
        ("sum_mean", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(2, 2, 3, 2), -1.0, 1.0)];
            check_op(seed, i, |t, v| {
                let a = t.sum(v[0]);
                let sq = t.mul(v[0], v[0])?;
                let b = t.mean(sq);
                t.add(a, b)
            })
        }),
        ("reshape_permute", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(2, 3, 2, 4), -1.0, 1.0)];
            check_op(seed, i, |t, v| {
                let y = t.permute(v[0], [3, 1, 0, 2])?;
                let y = t.reshape(y, s(4, 6, 2, 1))?;
                let w = t.constant(Tensor::from_vec(s(4, 6, 2, 1), (0..48).map(|k| k as f64 * 0.1).collect())?);
                t.mul(y, w)
            })
        }),
        ("broadcast", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(2, 3, 2, 2), -1.0, 1.0), rand(&mut r, s(1, 3, 1, 2), -1.0, 1.0)];
            check_op(seed, i, |t, v| {
                let b = t.broadcast_to(v[1], s(2, 3, 2, 2))?;
                let y = t.mul(v[0], b)?;
                t.add_broadcast(y, v[1])
            })
        }),
        ("concat_slice_split", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(2, 2, 3, 3), -1.0, 1.0), rand(&mut r, s(2, 3, 3, 3), -1.0, 1.0)];
            check_op(seed, i, |t, v| {
                let c = t.concat_channels(&[v[0], v[1]])?;
                let parts = t.split_channels(c, &[1, 4])?;
                let a = t.concat(&[parts[1], parts[1]], 2)?;
                let b = t.slice(a, 2, 1, 3)?;
                let sq = t.mul(b, b)?;
                t.concat(&[sq, parts[0]], 1)
            })
        }),
        ("gather_rows", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(2, 1, 3, 4), -1.0, 1.0)];
            check_op(seed, i, |t, v| {
                let g = t.gather_rows(v[0], &[5, 0, 5, 2])?;
                t.mul(g, g)
            })
        }),
        ("matmul", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(2, 1, 3, 4), -1.0, 1.0), rand(&mut r, s(2, 1, 4, 3), -1.0, 1.0)];
            check_op(seed, i, |t, v| {
                let nn = t.matmul(v[0], v[1], false, false)?;
                let tt = t.matmul(v[0], v[1], true, true)?;
                let nt = t.matmul(v[0], v[0], false, true)?;
                let tn = t.matmul(v[1], v[1], true, false)?;
                let a = t.sum(tt);
                let b = t.sum(nt);
                let c = t.sum(tn);
                let d = t.mul(nn, nn)?;
                let d = t.sum(d);
                let ab = t.add(a, b)?;
                let cd = t.add(c, d)?;
                t.add(ab, cd)
            })
        }),
        ("linear", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(2, 1, 3, 4), -1.0, 1.0), rand(&mut r, s(1, 1, 4, 5), -1.0, 1.0), rand(&mut r, s(1, 1, 1, 5), -1.0, 1.0)];
            check_op(seed, i, |t, v| t.linear(v[0], v[1], Some(v[2])))
        }),
        ("conv2d_3x3_s1", |seed| conv(seed, 3, 1, 1, true)),
        ("conv2d_3x3_s2", |seed| conv(seed, 3, 2, 1, false)),
        ("conv2d_1x1", |seed| conv(seed, 1, 1, 0, true)),
        ("conv2d_4x4_s4_nopad", |seed| conv(seed, 4, 4, 0, true)),
        ("batch_norm_train", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(2, 3, 3, 3), -2.0, 2.0), rand(&mut r, s(1, 3, 1, 1), 0.5, 1.5), rand(&mut r, s(1, 3, 1, 1), -1.0, 1.0)];
            check_op(seed, i, |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0))
        }),
        ("batch_norm_eval", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(2, 3, 3, 3), -2.0, 2.0), rand(&mut r, s(1, 3, 1, 1), 0.5, 1.5), rand(&mut r, s(1, 3, 1, 1), -1.0, 1.0)];
            let mean: Vec<f64> = (0..3).map(|_| r.range(-0.5, 0.5)).collect();
            let var: Vec<f64> = (0..3).map(|_| r.range(0.5, 2.0)).collect();
            check_op(seed, i, move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5))
        }),
        ("layer_norm", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(2, 1, 3, 6), -2.0, 2.0), rand(&mut r, s(1, 1, 1, 6), 0.5, 1.5), rand(&mut r, s(1, 1, 1, 6), -1.0, 1.0)];
            check_op(seed, i, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))
        }),
        ("softmax", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(2, 2, 3, 5), -2.0, 2.0)];
            check_op(seed, i, |t, v| Ok(t.softmax(v[0])))
        }),
        ("upsample_bilinear_x2", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(2, 2, 3, 4), -1.0, 1.0)];
            check_op(seed, i, |t, v| t.upsample_bilinear_x2(v[0]))
        }),
        ("sigmoid_focal_sum", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(2, 1, 4, 3), -4.0, 4.0)];
            let targets: Vec<f64> = (0..24).map(|_| if r.uniform() < 0.3 { 1.0 } else { 0.0 }).collect();
            check_op(seed, i, move |t, v| t.sigmoid_focal_sum(v[0], targets.clone(), 0.25, 2.0))
        }),
    ]
}

fn unary(seed: u64, u: Unary, lo: f64, hi: f64) -> Result<f64> {
    let mut r = Rng::new(seed);
    let i = vec![rand(&mut r, s(2, 2, 3, 3), lo, hi)];
    check_op(seed, i, move |t, v| Ok(t.unary(v[0], u)))
}

fn conv(seed: u64, k: usize, stride: usize, pad: usize, bias: bool) -> Result<f64> {
    let mut r = Rng::new(seed);
    let mut i = vec![rand(&mut r, s(2, 3, 8, 8), -1.0, 1.0), rand(&mut r, s(4, 3, k, k), -1.0, 1.0)];
    if bias {
        i.push(rand(&mut r, s(1, 4, 1, 1), -1.0, 1.0));
    }
    check_op(seed, i, move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad))
}

/// Checks a block built into a fresh store, differentiating through both
/// the inputs and every parameter.
fn check_block<B>(
    seed: u64,
    inputs: Vec<Tensor>,
    build: impl FnOnce(&mut Builder<'_>) -> Result<B>,
    run: impl Fn(&B, &mut Ctx<'_>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut store = ParamStore::new();
    let block = build(&mut Builder::new(&mut store, seed))?;
    perturb_params(&mut store, seed);
    max_rel_error(&mut store, &inputs, &opts(seed), |tape, store, v| {
        let mut ctx = Ctx::new(tape, store, true);
        run(&block, &mut ctx, v)
    })
}

/// Moves every parameter off its initial value (unit norm gains, zero
/// biases), so that gradients of all parameters are generic.
fn perturb_params(store: &mut ParamStore, seed: u64) {
    let mut r = Rng::new(seed ^ 0xb10c);
    let names: Vec<String> = store.params().map(|p| p.name.clone()).collect();
    for name in names {
        let id = store.id(&name).expect("listed");
        for v in store.param_mut(id).value.data_mut() {
            *v += r.range(-0.1, 0.1);
        }
    }
}

fn block_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("conv_block", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(2, 3, 6, 6), -1.0, 1.0)];
            check_block(seed, i, |b| ConvBlock::new(b, 3, 4, 3, 2), |m, ctx, v| m.forward(ctx, v[0]))
        }),
        ("layer_norm_module", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(1, 1, 3, 8), -1.0, 1.0)];
            check_block(seed, i, |b| LayerNorm::new(b, 8), |m, ctx, v| m.forward(ctx, v[0]))
        }),
        ("mlp", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(1, 1, 3, 4), -1.0, 1.0)];
            check_block(seed, i, |b| Mlp::new(b, 4, 8, 3, Activation::Gelu), |m, ctx, v| m.forward(ctx, v[0]))
        }),
        ("attention", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(2, 1, 3, 8), -1.0, 1.0), rand(&mut r, s(2, 1, 5, 8), -1.0, 1.0)];
            check_block(seed, i, |b| MultiHeadAttention::new(b, 8, 2), |m, ctx, v| m.forward(ctx, v[0], v[1], v[1]))
        }),
        ("fusion_block", |seed| {
            let mut r = Rng::new(seed);
            let i = vec![rand(&mut r, s(2, 8, 4, 4), -1.0, 1.0), rand(&mut r, s(2, 8, 4, 4), -1.0, 1.0)];
            check_block(seed, i, |b| FusionBlock::new(b, 8), |m, ctx, v| m.forward(ctx, v[0], v[1]))
        }),
        ("bifusion", |seed| bifusion(seed, FusionMode::AddDeepConcatShallow)),
        ("bifusion_swapped", |seed| bifusion(seed, FusionMode::AddShallowConcatDeep)),
        ("ssa_pyramid", |seed| {
            let mut r = Rng::new(seed);
            let (c, db, d) = (2, 4, 8);
            let i = vec![
                rand(&mut r, s(2, 3, 32, 32), -1.0, 1.0),
                rand(&mut r, s(2, db, 2, 2), -1.0, 1.0),
                rand(&mut r, s(2, db, 2, 2), -1.0, 1.0),
                rand(&mut r, s(2, db, 2, 2), -1.0, 1.0),
            ];
            let cfg = SsaConfig { variant: SsaVariant::Proposed, c, d_back: db, d_neck: d, want_f2: true };
            check_block(seed, i, |b| Ssa::new(b, cfg), |m, ctx, v| {
                let p = m.forward(ctx, v[0], [v[1], v[2], v[3]])?;
                flatten_pyramid(ctx.tape, &p)
            })
        }),
        ("decoder", |seed| {
            let mut r = Rng::new(seed);
            let d = 8;
            let i = vec![
                rand(&mut r, s(2, d, 4, 4), -1.0, 1.0),
                rand(&mut r, s(2, d, 2, 2), -1.0, 1.0),
                rand(&mut r, s(2, d, 1, 1), -1.0, 1.0),
            ];
            let cfg = HeadConfig { d_neck: d, n_queries: 3, d_dec: 8, n_dec_layers: 1, n_heads: 2, num_classes: 2 };
            check_block(seed, i, |b| Decoder::new(b, cfg), |m, ctx, v| {
                let p = Pyramid { p2: None, p3: v[0], p4: v[1], p5: v[2] };
                let (logits, boxes) = m.forward(ctx, &p)?;
                let l = ctx.tape.reshape(logits, s(1, 1, 1, 12))?;
                let b = ctx.tape.reshape(boxes, s(1, 1, 1, 24))?;
                ctx.tape.concat(&[l, b], 3)
            })
        }),
        ("set_loss", |seed| {
            let mut r = Rng::new(seed);
            let (q, k) = (4, 3);
            let logits = rand(&mut r, s(2, 1, q, k), -3.0, 3.0);
            let raw_boxes = rand(&mut r, s(2, 1, q, 4), -1.5, 1.5);
            let gts: Vec<Vec<Target>> = (0..2)
                .map(|b| {
                    (0..b + 1)
                        .map(|_| Target {
                            class_id: r.below(k),
                            bbox: BBox::new(r.range(0.3, 0.7), r.range(0.3, 0.7), r.range(0.1, 0.4), r.range(0.1, 0.4)),
                        })
                        .collect()
                })
                .collect();
            // Fix the assignment at the unperturbed point: matching is
            // piecewise constant and not part of the differentiated map.
            let w = LossWeights::default();
            let mut tape = Tape::new();
            let lv = tape.constant(logits.clone());
            let bv = tape.constant(raw_boxes.clone());
            let bv = tape.sigmoid(bv);
            let assign = match_batch(&tape, lv, bv, &gts, &w)?;
            check_op(seed, vec![logits, raw_boxes], move |t, v| {
                let boxes = t.sigmoid(v[1]);
                Ok(set_loss(t, v[0], boxes, &gts, &assign, &w)?.total)
            })
        }),
    ]
}

fn bifusion(seed: u64, mode: FusionMode) -> Result<f64> {
    let mut r = Rng::new(seed);
    let i = vec![
        rand(&mut r, s(2, 8, 8, 8), -1.0, 1.0),
        rand(&mut r, s(2, 8, 4, 4), -1.0, 1.0),
        rand(&mut r, s(2, 8, 2, 2), -1.0, 1.0),
    ];
    check_block(seed, i, |b| BiFusion::new(b, 8, mode), |m, ctx, v| m.forward(ctx, v[0], v[1], v[2]))
}

/// Concatenates all pyramid levels into one row so a single probe covers them.
fn flatten_pyramid(tape: &mut Tape, p: &Pyramid) -> Result<Var> {
    let mut rows = Vec::new();
    for (_, x) in p.levels() {
        let n = tape.shape(x).numel();
        rows.push(tape.reshape(x, s(1, 1, 1, n))?);
    }
    tape.concat(&rows, 3)
}

/// All case names in run order.
pub fn case_names() -> Vec<&'static str> {
    op_cases().into_iter().chain(block_cases()).map(|(n, _)| n).collect()
}

/// Runs every case whose name contains `filter` (all when `None`),
/// `TRIALS` seeds each.
pub fn run(filter: Option<&str>) -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();
    for (name, f) in op_cases().into_iter().chain(block_cases()) {
        if filter.is_some_and(|p| !name.contains(p)) {
            continue;
        }
        let mut worst: f64 = 0.0;
        for trial in 0..TRIALS {
            worst = worst.max(f(1000 + trial as u64)?);
        }
        out.push(CaseReport { name, trials: TRIALS, max_rel_err: worst });
    }
    Ok(out)
}
