mod common;

use common::oracles;
use proptest::prelude::*;
use std::fs;
use std::path::Path;
use tinyformer::data::{Dataset, SynthConfig};
use tinyformer::eval::{ap_eval, EvalParams};
use tinyformer::head::{BBox, Detection, Target};
use tinyformer::rng::Rng;

fn params(num_classes: usize) -> EvalParams {
    EvalParams::coco(num_classes, 0.01, 0.09)
}

fn det(class_id: usize, score: f64, b: BBox) -> Detection {
    Detection { class_id, score, bbox: b }
}

fn gt(class_id: usize, b: BBox) -> Target {
    Target { class_id, bbox: b }
}

#[test]
fn perfect_and_empty() {
    let b = BBox::new(0.5, 0.5, 0.2, 0.2);
    let r = ap_eval(&[vec![det(0, 0.9, b)]], &[vec![gt(0, b)]], &params(1));
    assert_eq!((r.ap, r.ap50), (1.0, 1.0));
    let r = ap_eval(&[vec![]], &[vec![gt(0, b)]], &params(1));
    assert_eq!(r.ap, 0.0);
}

#[test]
fn three_gts_five_dets_by_hand() {
    let g = [BBox::from_corners(0.1, 0.1, 0.3, 0.3), BBox::from_corners(0.5, 0.5, 0.7, 0.8), BBox::from_corners(0.6, 0.1, 0.9, 0.3)];
    let gts = vec![vec![gt(0, g[0]), gt(0, g[1])], vec![gt(0, g[2])]];
    let dets = vec![
        vec![
            det(0, 0.95, g[0].translated(0.01, 0.0)),
            det(0, 0.80, BBox::from_corners(0.0, 0.6, 0.2, 0.9)),
            det(0, 0.60, g[1].translated(0.0, 0.04)),
        ],
        vec![det(0, 0.90, g[2].translated(0.05, 0.02)), det(0, 0.40, g[2])],
    ];
    let r = ap_eval(&dets, &gts, &params(1));
    let want = oracles::coco_ap(&dets, &gts, 1, 100);
    assert!((r.ap - want).abs() <= 1e-9, "{} vs {want}", r.ap);
    assert!(r.ap > 0.0 && r.ap < 1.0);
}

fn jitter(rng: &mut Rng, b: &BBox, amount: f64) -> BBox {
    let w = (b.w * (1.0 + rng.range(-amount, amount))).max(0.01);
    let h = (b.h * (1.0 + rng.range(-amount, amount))).max(0.01);
    BBox::new(b.cx + rng.range(-amount, amount) * b.w, b.cy + rng.range(-amount, amount) * b.h, w, h)
}

fn random_case(seed: u64) -> (Vec<Vec<Detection>>, Vec<Vec<Target>>) {
    let mut rng = Rng::new(seed);
    let (mut dets, mut gts) = (Vec::new(), Vec::new());
    for _ in 0..3 {
        let g: Vec<Target> = (0..rng.int_in(0, 4))
            .map(|_| gt(rng.below(2), BBox::new(rng.range(0.2, 0.8), rng.range(0.2, 0.8), rng.range(0.03, 0.4), rng.range(0.03, 0.4))))
            .collect();
        let mut d = Vec::new();
        for t in &g {
            for _ in 0..rng.int_in(0, 2) {
                let class_id = if rng.uniform() < 0.85 { t.class_id } else { 1 - t.class_id };
                d.push(det(class_id, rng.uniform(), jitter(&mut rng, &t.bbox, 0.3)));
            }
        }
        for _ in 0..rng.int_in(0, 2) {
            d.push(det(rng.below(2), rng.uniform(), BBox::new(rng.range(0.1, 0.9), rng.range(0.1, 0.9), rng.range(0.05, 0.3), rng.range(0.05, 0.3))));
        }
        dets.push(d);
        gts.push(g);
    }
    (dets, gts)
}

#[test]
fn ap_matches_the_scalar_walk_on_random_cases() {
    let mut informative = 0;
    for seed in 0..20 {
        let (dets, gts) = random_case(seed);
        let r = ap_eval(&dets, &gts, &params(2));
        let want = oracles::coco_ap(&dets, &gts, 2, 100);
        assert!((r.ap - want).abs() <= 1e-9, "seed {seed}: {} vs {want}", r.ap);
        informative += usize::from(want > 0.0 && want < 1.0);
    }
    assert!(informative >= 10);
}

#[test]
fn max_dets_truncates_per_image() {
    let (dets, gts) = random_case(99);
    let p = EvalParams { max_dets: 1, ..params(2) };
    let want = oracles::coco_ap(&dets, &gts, 2, 1);
    assert!((ap_eval(&dets, &gts, &p).ap - want).abs() <= 1e-9);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generation_is_byte_identical_and_round_trips() {
    let cfg = SynthConfig { seed: 1, ..Default::default() };
    let a = Dataset::generate(&cfg, 4).unwrap();
    let b = Dataset::generate(&cfg, 4).unwrap();
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    a.save(da.path()).unwrap();
    b.save(db.path()).unwrap();
    let fa = files(da.path());
    assert!(!fa.is_empty());
    assert_eq!(fa, files(db.path()));
    let back = Dataset::load(da.path()).unwrap();
    assert_eq!(back.images, a.images);
    assert_eq!(back.targets.len(), a.targets.len());
    for (x, y) in back.targets.iter().zip(&a.targets) {
        for (s, t) in x.iter().zip(y) {
            assert_eq!(s.class_id, t.class_id);
            // annotations are stored with six significant digits
            assert!((s.bbox.cx - t.bbox.cx).abs() < 1e-5 && (s.bbox.w - t.bbox.w).abs() < 1e-5);
        }
    }
}

#[test]
fn zero_objects_gives_empty_annotations() {
    let ds = Dataset::generate(&SynthConfig { objects_min: 0, objects_max: 0, ..Default::default() }, 3).unwrap();
    assert!(ds.targets.iter().all(Vec::is_empty));
}

#[test]
fn default_mixture_is_mostly_small() {
    let cfg = SynthConfig { seed: 3, ..Default::default() };
    let ds = Dataset::generate(&cfg, 200).unwrap();
    let all: Vec<&Target> = ds.targets.iter().flatten().collect();
    let small = all.iter().filter(|t| t.bbox.area() <= cfg.small_area()).count();
    assert!(small as f64 >= 0.5 * all.len() as f64, "{small} of {}", all.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn emitted_boxes_are_valid(seed in any::<u64>(), lo in 0usize..3, extra in 0usize..4) {
        let cfg = SynthConfig { seed, objects_min: lo, objects_max: lo + extra, ..Default::default() };
        let ds = Dataset::generate(&cfg, 3).unwrap();
        for t in ds.targets.iter().flatten() {
            let [x1, y1, x2, y2] = t.bbox.corners();
            prop_assert!(0.0 <= x1 && x1 < x2 && x2 <= 1.0);
            prop_assert!(0.0 <= y1 && y1 < y2 && y2 <= 1.0);
            prop_assert!(t.class_id < cfg.num_classes);
        }
        for ts in &ds.targets {
            prop_assert!(ts.len() <= cfg.objects_max);
        }
    }

    #[test]
    fn ap_is_bounded_and_perfect_on_ground_truth(seed in any::<u64>()) {
        let (dets, gts) = random_case(seed);
        let r = ap_eval(&dets, &gts, &params(2));
        for v in [r.ap, r.ap50, r.ap75, r.ap_s, r.ap_m, r.ap_l] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(r.ap50 >= r.ap75);
        let exact: Vec<Vec<Detection>> = gts.iter().map(|g| g.iter().map(|t| det(t.class_id, 1.0, t.bbox)).collect()).collect();
        if gts.iter().any(|g| !g.is_empty()) {
            prop_assert_eq!(ap_eval(&exact, &gts, &params(2)).ap, 1.0);
        }
    }
}
