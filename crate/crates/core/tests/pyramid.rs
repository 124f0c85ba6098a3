mod common;

use common::{linf, oracles, uniform};
use tinyformer::config::{ModelConfig, Preset};
use tinyformer::model::Model;
use tinyformer::neck::{FusionMode, NeckMode};
use tinyformer::nn::{sincos_2d, Ctx};
use tinyformer::ssa::SsaVariant;
use tinyformer::{ParamStore, Shape, Tape, Tensor};

struct Maps {
    pyramid: Vec<(usize, Tensor)>,
    neck: Vec<(usize, Tensor)>,
    fused: Vec<Tensor>,
}

fn build(cfg: ModelConfig, seed: u64) -> (Model, ParamStore) {
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, cfg, seed).unwrap();
    (model, store)
}

fn maps(model: &Model, store: &mut ParamStore, image: &Tensor) -> Maps {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, false);
    let x = ctx.tape.constant(image.clone());
    let taps = model.vit.forward(&mut ctx, x).unwrap();
    let pyr = model.ssa.forward(&mut ctx, x, taps).unwrap();
    let out = model.neck.forward(&mut ctx, &pyr).unwrap();
    let get = |v| tape.value(v).clone();
    Maps {
        pyramid: pyr.levels().into_iter().map(|(l, v)| (l, get(v))).collect(),
        neck: out.out.levels().into_iter().map(|(l, v)| (l, get(v))).collect(),
        fused: out.fused.iter().map(|&v| get(v)).collect(),
    }
}

fn toy() -> ModelConfig {
    Preset::Toy.model()
}

fn image(h: usize, w: usize, seed: u64) -> Tensor {
    uniform(Shape::new(1, 3, h, w), seed)
}

#[test]
fn strides_and_widths_for_every_extent() {
    let base = toy();
    let necks = [base, ModelConfig { ssa: SsaVariant::F3Only, neck: NeckMode::Baseline3Scale, n_bifusion: 0, ..base }];
    for cfg in necks {
        let (model, mut store) = build(cfg, 1);
        for h in [32, 64, 96, 128] {
            for w in [32, 64, 96, 128] {
                let m = maps(&model, &mut store, &image(h, w, 3));
                let want_levels: &[usize] = if cfg.ssa.has_f2() { &[2, 3, 4, 5] } else { &[3, 4, 5] };
                assert_eq!(m.pyramid.iter().map(|p| p.0).collect::<Vec<_>>(), want_levels);
                for (l, t) in &m.pyramid {
                    let c = if *l == 2 { 2 * cfg.c } else { cfg.d_neck };
                    assert_eq!(t.shape(), Shape::new(1, c, h >> l, w >> l), "ssa level {l} at {h}x{w}");
                }
                assert_eq!(m.neck.iter().map(|p| p.0).collect::<Vec<_>>(), [3, 4, 5]);
                for (l, t) in &m.neck {
                    assert_eq!(t.shape(), Shape::new(1, cfg.d_neck, h >> l, w >> l), "{:?} level {l} at {h}x{w}", cfg.neck);
                }
            }
        }
    }
}

#[test]
fn patch_grid_and_zero_image_tokens() {
    let (model, mut store) = build(toy(), 2);
    let bias = store.id("backbone.patch.bias").unwrap();
    assert!(store.param(bias).value.data().iter().all(|&v| v == 0.0));
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &mut store, false);
    let x = ctx.tape.constant(Tensor::zeros(Shape::new(1, 3, 64, 64)));
    let tokens = model.vit.embed(&mut ctx, x).unwrap();
    assert_eq!(tape.shape(tokens), Shape::new(1, 1, 16, 64));
    assert_eq!(tape.value(tokens), &sincos_2d(4, 4, 64));
}

#[test]
fn translated_patches_permute_tokens() {
    let (model, mut store) = build(toy(), 3);
    let a = image(64, 64, 4);
    // Roll one patch (16 px) to the right, wrapping around.
    let mut rolled = vec![0.0; a.numel()];
    for c in 0..3 {
        for y in 0..64 {
            for x in 0..64 {
                rolled[(c * 64 + y) * 64 + (x + 16) % 64] = a.at(0, c, y, x);
            }
        }
    }
    let b = Tensor::from_vec(a.shape(), rolled).unwrap();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &mut store, false);
    let (va, vb) = (ctx.tape.constant(a), ctx.tape.constant(b));
    let ma = model.vit.patch_map(&mut ctx, va).unwrap();
    let mb = model.vit.patch_map(&mut ctx, vb).unwrap();
    let (ta, tb) = (tape.value(ma), tape.value(mb));
    for d in 0..64 {
        for gy in 0..4 {
            for gx in 0..4 {
                assert_eq!(tb.at(0, d, gy, (gx + 1) % 4), ta.at(0, d, gy, gx));
            }
        }
    }
}

#[test]
fn zero_blocks_pass_tokens_through() {
    let cfg = ModelConfig { n_blocks: 1, ..toy() };
    let (model, mut store) = build(cfg, 4);
    let names: Vec<String> = store.params().map(|p| p.name.clone()).filter(|n| n.starts_with("backbone.blocks.0.") && (n.contains(".attn.") || n.contains(".mlp."))).collect();
    for n in names {
        let s = store.param(store.id(&n).unwrap()).value.shape();
        store.assign(&n, Tensor::zeros(s)).unwrap();
    }
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &mut store, false);
    let x = ctx.tape.constant(image(64, 64, 5));
    let embedded = model.vit.embed(&mut ctx, x).unwrap();
    let taps = model.vit.forward(&mut ctx, x).unwrap();
    let e = tape.value(embedded);
    for t in taps {
        let t = tape.value(t);
        assert_eq!(t.shape(), Shape::new(1, 64, 4, 4));
        for d in 0..64 {
            for i in 0..16 {
                assert_eq!(t.at(0, d, i / 4, i % 4), e.at(0, 0, i, d));
            }
        }
    }
}

#[test]
fn deepest_tap_gradient_reaches_the_image() {
    let (model, mut store) = build(toy(), 6);
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &mut store, true);
    let x = ctx.tape.input(image(64, 64, 7));
    let [_, _, f5] = model.vit.forward(&mut ctx, x).unwrap();
    let loss = tape.sum(f5);
    tape.backward(loss).unwrap();
    assert!(tape.grad(x).unwrap().norm() > 0.0);
}

/// Conv (no bias) → BatchNorm at its initial running stats → SiLU.
fn block_oracle(store: &ParamStore, prefix: &str, x: &Tensor, stride: usize) -> Tensor {
    let w = &store.param(store.id(&format!("{prefix}.conv.weight")).unwrap()).value;
    let pad = w.shape().h() / 2;
    let y = oracles::conv2d(x, w, None, stride, pad);
    let [n, _, h, wd] = x.shape().0;
    let (ho, wo) = ((h + 2 * pad - w.shape().h()) / stride + 1, (wd + 2 * pad - w.shape().w()) / stride + 1);
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    let out = y.iter().map(|v| v * scale).map(|v| v / (1.0 + (-v).exp())).collect();
    Tensor::from_vec(Shape::new(n, w.shape().n(), ho, wo), out).unwrap()
}

#[test]
fn sde_stages_match_composed_oracle() {
    let (model, mut store) = build(toy(), 8);
    let img = image(64, 64, 9);
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &mut store, false);
    let x = ctx.tape.constant(img.clone());
    let s0 = model.ssa.sde(&mut ctx, x, 0).unwrap();
    let s2 = model.ssa.sde(&mut ctx, x, 2).unwrap();
    let s3 = model.ssa.sde(&mut ctx, x, 3).unwrap();
    assert_eq!(tape.value(s0), &img);
    assert_eq!(tape.shape(s2), Shape::new(1, 32, 16, 16));
    assert_eq!(tape.shape(s3), Shape::new(1, 64, 8, 8));
    let mut want = img;
    for n in 1..=3 {
        want = block_oracle(&store, &format!("ssa.sde.{n}"), &want, 2);
    }
    assert!(linf(tape.value(s3), &want) < 1e-12);
}

#[test]
fn f3_only_shares_level_three_with_proposed() {
    let proposed = ModelConfig { neck: NeckMode::Pbm, n_bifusion: 0, ..toy() };
    let f3 = ModelConfig { ssa: SsaVariant::F3Only, ..proposed };
    let img = image(64, 64, 10);
    let (mp, mut sp) = build(proposed, 11);
    let (mf, mut sf) = build(f3, 11);
    let a = maps(&mp, &mut sp, &img);
    let b = maps(&mf, &mut sf, &img);
    assert_eq!(b.pyramid.iter().map(|p| p.0).collect::<Vec<_>>(), [3, 4, 5]);
    let p3 = |m: &Maps| m.pyramid.iter().find(|p| p.0 == 3).unwrap().1.clone();
    assert_eq!(p3(&a), p3(&b));
}

fn neck_outputs(cfg: ModelConfig, seed: u64, img: &Tensor) -> Maps {
    let (model, mut store) = build(cfg, seed);
    maps(&model, &mut store, img)
}

fn gap(a: &Maps, b: &Maps) -> f64 {
    a.neck.iter().zip(&b.neck).map(|(x, y)| linf(&x.1, &y.1)).fold(0.0, f64::max)
}

#[test]
fn neck_ablations_are_distinct_under_tied_weights() {
    let img = image(64, 64, 12);
    let base = toy();
    let proposed = neck_outputs(base, 13, &img);
    let swapped = neck_outputs(ModelConfig { fusion_mode: FusionMode::AddShallowConcatDeep, ..base }, 13, &img);
    assert!(gap(&proposed, &swapped) > 1e-6);

    let k: Vec<Maps> = (0..=2).map(|n| neck_outputs(ModelConfig { n_bifusion: n, ..base }, 13, &img)).collect();
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(gap(&k[i], &k[j]) > 1e-6, "n_bifusion {i} vs {j}");
        }
    }
    // k = 1 and k = 2 build the level-3 bi-fusion from the same inputs.
    assert_eq!(k[1].fused[0], k[2].fused[0]);
    assert_eq!(k[1].neck[0], k[2].neck[0]);
    assert!(linf(&k[1].fused[1], &k[2].fused[1]) > 1e-6);
}

#[test]
fn zero_bifusion_is_the_baseline_bit_for_bit() {
    let img = image(64, 64, 14);
    for ssa in [SsaVariant::F3Only, SsaVariant::Off] {
        let pbm = ModelConfig { ssa, neck: NeckMode::Pbm, n_bifusion: 0, ..toy() };
        let baseline = ModelConfig { neck: NeckMode::Baseline3Scale, ..pbm };
        let a = neck_outputs(pbm, 15, &img);
        let b = neck_outputs(baseline, 15, &img);
        assert_eq!(a.neck, b.neck);
        assert_eq!(a.fused, b.fused);
    }
}

#[test]
fn a_single_nonzero_level_reaches_every_output() {
    for cfg in [toy(), ModelConfig { ssa: SsaVariant::F3Only, neck: NeckMode::Baseline3Scale, n_bifusion: 0, ..toy() }] {
        let (model, mut store) = build(cfg, 16);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, false);
        let d = cfg.d_neck;
        let zero = |ctx: &mut Ctx<'_>, l: usize| ctx.tape.constant(Tensor::zeros(Shape::new(1, d, 64 >> l, 64 >> l)));
        // The baseline reaches everything from the top level through its two
        // passes. The bi-fusion blocks read only their own neighbours, so the
        // PBM neck is driven from level 4, which both blocks see.
        let hot = if cfg.neck == NeckMode::Pbm { 4 } else { 5 };
        let mut lv: Vec<_> = (3..=5).map(|l| zero(&mut ctx, l)).collect();
        lv[hot - 3] = ctx.tape.constant(uniform(Shape::new(1, d, 64 >> hot, 64 >> hot), 17));
        let p2 = cfg.neck_config().f2_width.map(|c| ctx.tape.constant(Tensor::zeros(Shape::new(1, c, 16, 16))));
        let pyr = tinyformer::ssa::Pyramid { p2, p3: lv[0], p4: lv[1], p5: lv[2] };
        let out = model.neck.forward(&mut ctx, &pyr).unwrap();
        for (l, v) in out.out.levels() {
            assert!(tape.value(v).norm() > 0.0, "{:?} level {l}", cfg.neck);
        }

        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, false);
        let zeros: Vec<_> = (3..=5).map(|l| zero(&mut ctx, l)).collect();
        let p2 = cfg.neck_config().f2_width.map(|c| ctx.tape.constant(Tensor::zeros(Shape::new(1, c, 16, 16))));
        let pyr = tinyformer::ssa::Pyramid { p2, p3: zeros[0], p4: zeros[1], p5: zeros[2] };
        let out = model.neck.forward(&mut ctx, &pyr).unwrap();
        for (_, v) in out.out.levels() {
            assert_eq!(tape.value(v).norm(), 0.0);
        }
    }
}

#[test]
fn set_loss_gradient_reaches_every_pyramid_level() {
    let cfg = toy();
    let (model, mut store) = build(cfg, 18);
    let ds = tinyformer::data::Dataset::generate(&tinyformer::data::SynthConfig { objects_min: 2, objects_max: 4, ..Default::default() }, 2).unwrap();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &mut store, true);
    let x = ctx.tape.constant(ds.batch(&[0, 1]));
    let out = model.forward(&mut ctx, x).unwrap();
    let terms = model.loss(&mut tape, &out, &ds.batch_targets(&[0, 1]), &Default::default()).unwrap();
    tape.backward(terms.total).unwrap();
    for (l, v) in out.pyramid.levels() {
        assert!(tape.grad(v).unwrap().norm() > 0.0, "pyramid level {l}");
    }
    for (l, v) in out.neck.out.levels() {
        assert!(tape.grad(v).unwrap().norm() > 0.0, "neck level {l}");
    }
}
