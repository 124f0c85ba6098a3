mod common;

use common::oracles;
use common::uniform;
use proptest::prelude::*;
use tinyformer::nn::{BatchNorm2d, Builder, Ctx, MultiHeadAttention};
use tinyformer::{AdamW, Init, ParamStore, Shape, Tape, Tensor};

fn matrix(r: usize, c: usize, seed: u64) -> Tensor {
    uniform(Shape::new(1, 1, r, c), seed)
}

#[test]
fn seeded_init_is_reproducible() {
    let s = Shape::new(1, 2, 2, 2);
    let a = Tensor::create(s, Init::Uniform { seed: 7, lo: 0.0, hi: 1.0 }).unwrap();
    let b = Tensor::create(s, Init::Uniform { seed: 7, lo: 0.0, hi: 1.0 }).unwrap();
    assert_eq!(a.data(), b.data());
    assert!(a.data().iter().all(|v| (0.0..1.0).contains(v)));
}

#[test]
fn matmul_matches_triple_loop() {
    let (a, b) = (matrix(4, 5, 1), matrix(5, 3, 2));
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let y = tape.matmul2d(va, vb).unwrap();
    let want = oracles::matmul(&oracles::rows(&a), &oracles::rows(&b));
    let got = oracles::rows(tape.value(y));
    for (gr, wr) in got.iter().zip(&want) {
        for (g, w) in gr.iter().zip(wr) {
            assert!((g - w).abs() <= 1e-12);
        }
    }
}

#[test]
fn concat_gradient_is_all_ones() {
    let mut tape = Tape::new();
    let a = tape.input(uniform(Shape::new(1, 2, 1, 1), 3));
    let b = tape.input(uniform(Shape::new(1, 3, 1, 1), 4));
    let c = tape.concat_channels(&[a, b]).unwrap();
    assert_eq!(tape.shape(c), Shape::new(1, 5, 1, 1));
    let s = tape.sum(c);
    tape.backward(s).unwrap();
    assert!(tape.grad(a).unwrap().data().iter().all(|&g| g == 1.0));
    assert!(tape.grad(b).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn conv_matches_direct_oracle_on_a_strided_image() {
    let x = uniform(Shape::new(1, 3, 64, 64), 11);
    let w = uniform(Shape::new(8, 3, 3, 3), 12);
    let bias = uniform(Shape::new(1, 8, 1, 1), 13);
    let mut tape = Tape::new();
    let (vx, vw, vb) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(bias.clone()));
    let y = tape.conv2d(vx, vw, Some(vb), 2, 1).unwrap();
    assert_eq!(tape.shape(y), Shape::new(1, 8, 32, 32));
    let want = oracles::conv2d(&x, &w, Some(bias.data()), 2, 1);
    let err = tape.value(y).data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-12, "{err}");
}

#[test]
fn upsample_follows_the_half_pixel_formula() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap());
    let y = tape.upsample_bilinear_x2(x).unwrap();
    let src = [[0.0, 1.0], [2.0, 3.0]];
    let coord = |d: usize| ((d as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
    for oy in 0..4 {
        for ox in 0..4 {
            let (sy, sx) = (coord(oy), coord(ox));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(1), (x0 + 1).min(1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let want = (1.0 - fy) * ((1.0 - fx) * src[y0][x0] + fx * src[y0][x1]) + fy * ((1.0 - fx) * src[y1][x0] + fx * src[y1][x1]);
            assert!((tape.value(y).at(0, 0, oy, ox) - want).abs() < 1e-15);
        }
    }
    assert_eq!(tape.value(y).at(0, 0, 1, 1), 0.75);
}

#[test]
fn upsample_single_pixel_and_constant_seven() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(Shape::new(1, 1, 1, 1), 2.5));
    let y = tape.upsample_bilinear_x2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[2.5; 4]);
    let x = tape.constant(Tensor::full(Shape::new(2, 3, 3, 5), 7.0));
    let y = tape.upsample_bilinear_x2(x).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 7.0));
}

#[test]
fn batch_norm_training_standardizes_offset_inputs() {
    let mut store = ParamStore::new();
    let bn = BatchNorm2d::new(&mut Builder::new(&mut store, 0).sub("bn"), 3).unwrap();
    let raw = uniform(Shape::new(4, 3, 5, 5), 21);
    let shifted: Vec<f64> = raw.data().iter().map(|v| 50.0 + 100.0 * v).collect();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &mut store, true);
    let x = ctx.tape.constant(Tensor::from_vec(raw.shape(), shifted).unwrap());
    let y = bn.forward(&mut ctx, x).unwrap();
    let t = tape.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| (0..5).flat_map(move |i| (0..5).map(move |j| (n, i, j)))).map(|(n, i, j)| t.at(n, c, i, j)).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6, "{mean}");
        assert!((var - 1.0).abs() < 1e-6, "{var}");
    }
}

fn token_rows(t: &Tensor) -> Vec<Vec<f64>> {
    oracles::rows(t)
}

#[test]
fn three_token_self_attention_matches_scalar_loops() {
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut Builder::new(&mut store, 5).sub("attn"), 8, 2).unwrap();
    // Unit-scale weights so the softmax is far from uniform.
    for (i, n) in ["q", "k", "v", "o"].iter().enumerate() {
        store.assign(&format!("attn.{n}.weight"), matrix(8, 8, 50 + i as u64)).unwrap();
    }
    let weight = |store: &ParamStore, n: &str| token_rows(&store.param(store.id(&format!("attn.{n}.weight")).unwrap()).value);
    let (wq, wk, wv, wo) = (weight(&store, "q"), weight(&store, "k"), weight(&store, "v"), weight(&store, "o"));
    let x = matrix(3, 8, 31);
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &mut store, false);
    let vx = ctx.tape.constant(x.clone());
    let y = attn.forward(&mut ctx, vx, vx, vx).unwrap();
    let want = oracles::attention(&token_rows(&x), &token_rows(&x), &wq, &wk, &wv, &wo, 2);
    for (gr, wr) in token_rows(tape.value(y)).iter().zip(&want) {
        for (g, w) in gr.iter().zip(wr) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}

#[test]
fn self_attention_is_permutation_equivariant() {
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut Builder::new(&mut store, 9).sub("attn"), 8, 4).unwrap();
    let x = matrix(5, 8, 41);
    let perm = [3usize, 0, 4, 1, 2];
    let xp: Vec<f64> = perm.iter().flat_map(|&i| x.data()[i * 8..(i + 1) * 8].to_vec()).collect();
    let mut run = |t: Tensor| {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, false);
        let v = ctx.tape.constant(t);
        let y = attn.forward(&mut ctx, v, v, v).unwrap();
        tape.value(y).clone()
    };
    let y = run(x.clone());
    let yp = run(Tensor::from_vec(x.shape(), xp).unwrap());
    for (r, &i) in perm.iter().enumerate() {
        for e in 0..8 {
            assert!((yp.at(0, 0, r, e) - y.at(0, 0, i, e)).abs() < 1e-12);
        }
    }
}

fn single_param_store(w: f64) -> ParamStore {
    let mut store = ParamStore::new();
    store.get_or_insert("w", Shape::scalar(), || Tensor::scalar(w)).unwrap();
    store
}

fn set_grad(store: &mut ParamStore, g: f64) {
    let id = store.id("w").unwrap();
    store.param_mut(id).grad = Some(Tensor::scalar(g));
}

fn value(store: &ParamStore) -> f64 {
    store.param(store.id("w").unwrap()).value.item()
}

#[test]
fn adamw_first_step_by_hand() {
    let mut store = single_param_store(1.0);
    set_grad(&mut store, 1.0);
    let opt = AdamW { lr: 0.1, weight_decay: 0.0, ..AdamW::new(0.1, 0.0) };
    store.adamw_step(&opt).unwrap();
    // m̂ = v̂ = 1 after bias correction at t = 1
    let want = 1.0 - 0.1 * (1.0 / (1.0f64.sqrt() + opt.eps));
    assert!((value(&store) - want).abs() < 1e-15);
    assert!((value(&store) - 0.9).abs() < 1e-6);
}

proptest! {
    #[test]
    fn split_inverts_concat(sizes in prop::collection::vec(1usize..5, 1..5), h in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
        let mut tape = Tape::new();
        let parts: Vec<Tensor> = sizes.iter().enumerate().map(|(i, &c)| uniform(Shape::new(2, c, h, w), seed.wrapping_add(i as u64))).collect();
        let vars: Vec<_> = parts.iter().map(|p| tape.constant(p.clone())).collect();
        let cat = tape.concat_channels(&vars).unwrap();
        let back = tape.split_channels(cat, &sizes).unwrap();
        for (p, v) in parts.iter().zip(back) {
            prop_assert_eq!(p, tape.value(v));
        }
    }

    #[test]
    fn matmul_agrees_with_the_oracle(r in 1usize..7, k in 1usize..7, c in 1usize..7, seed in any::<u64>()) {
        let (a, b) = (matrix(r, k, seed), matrix(k, c, seed ^ 0x9e37));
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let y = tape.matmul2d(va, vb).unwrap();
        let want = oracles::matmul(&oracles::rows(&a), &oracles::rows(&b));
        for (gr, wr) in oracles::rows(tape.value(y)).iter().zip(&want) {
            for (g, w) in gr.iter().zip(wr) {
                prop_assert!((g - w).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn adamw_without_gradient_or_decay_is_identity(w in -1e3f64..1e3, lr in 1e-5f64..1.0, steps in 1usize..5) {
        let mut store = single_param_store(w);
        for _ in 0..steps {
            set_grad(&mut store, 0.0);
            store.adamw_step(&AdamW::new(lr, 0.0)).unwrap();
        }
        prop_assert_eq!(value(&store), w);
    }

    #[test]
    fn adamw_decay_only_scales(w in -1e3f64..1e3, lr in 1e-4f64..0.5, wd in 0.0f64..0.5) {
        let mut store = single_param_store(w);
        set_grad(&mut store, 0.0);
        store.adamw_step(&AdamW::new(lr, wd)).unwrap();
        prop_assert!((value(&store) - w * (1.0 - lr * wd)).abs() <= 1e-12 * w.abs().max(1.0));
    }

    #[test]
    fn upsample_preserves_constants_and_stays_in_range(c in 1usize..3, h in 1usize..6, w in 1usize..6, v in -10.0f64..10.0, seed in any::<u64>()) {
        let mut tape = Tape::new();
        let k = tape.constant(Tensor::full(Shape::new(1, c, h, w), v));
        let y = tape.upsample_bilinear_x2(k).unwrap();
        prop_assert_eq!(tape.shape(y), Shape::new(1, c, 2 * h, 2 * w));
        for &o in tape.value(y).data() {
            prop_assert!((o - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
        let x = uniform(Shape::new(1, c, h, w), seed);
        let (lo, hi) = x.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
        let vx = tape.constant(x);
        let y = tape.upsample_bilinear_x2(vx).unwrap();
        for &o in tape.value(y).data() {
            prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights(t_kv in 1usize..6, seed in any::<u64>()) {
        // With every key and value row equal, each output row is that value
        // row pushed through the value and output projections.
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut Builder::new(&mut store, seed).sub("attn"), 4, 2).unwrap();
        let q = matrix(3, 4, seed ^ 1);
        let row = matrix(1, 4, seed ^ 2);
        let kv = Tensor::from_vec(Shape::new(1, 1, t_kv, 4), row.data().repeat(t_kv)).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, false);
        let (vq, vkv, vrow) = (ctx.tape.constant(q), ctx.tape.constant(kv), ctx.tape.constant(row));
        let y = attn.forward(&mut ctx, vq, vkv, vkv).unwrap();
        let y1 = attn.forward(&mut ctx, vrow, vrow, vrow).unwrap();
        for r in 0..3 {
            for e in 0..4 {
                prop_assert!((tape.value(y).at(0, 0, r, e) - tape.value(y1).at(0, 0, 0, e)).abs() < 1e-12);
            }
        }
    }
}
