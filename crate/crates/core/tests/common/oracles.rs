//! Slow, obviously-correct reference implementations used as test oracles.

#![allow(dead_code)]

use tinyformer::head::{BBox, Detection, Target};
use tinyformer::Tensor;

/// Direct six-loop convolution with zero padding. `w` is `(c_out, c_in, k, k)`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, stride: usize, pad: usize) -> Vec<f64> {
    let [n, c_in, h, wd] = x.shape().0;
    let [c_out, _, k, _] = w.shape().0;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * c_out * ho * wo];
    for b in 0..n {
        for o in 0..c_out {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bias.map_or(0.0, |bv| bv[o]);
                    for c in 0..c_in {
                        for di in 0..k {
                            for dj in 0..k {
                                let (y, xx) = ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                acc += x.at(b, c, y as usize, xx as usize) * w.at(o, c, di, dj);
                            }
                        }
                    }
                    out[((b * c_out + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    out
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| (0..cols).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

/// Rows of the trailing `(h, w)` matrix of a `(1, 1, h, w)` tensor.
pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let [_, _, r, c] = t.shape().0;
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

/// Multi-head scaled dot-product attention with bias-free projections,
/// computed one score at a time.
pub fn attention(q: &[Vec<f64>], kv: &[Vec<f64>], wq: &[Vec<f64>], wk: &[Vec<f64>], wv: &[Vec<f64>], wo: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
    let (qp, kp, vp) = (matmul(q, wq), matmul(kv, wk), matmul(kv, wv));
    let d = wq.len();
    let dh = d / heads;
    let mut merged = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let mut s = Vec::with_capacity(kv.len());
            for j in 0..kv.len() {
                let mut dot = 0.0;
                for e in 0..dh {
                    dot += qp[i][h * dh + e] * kp[j][h * dh + e];
                }
                s.push(dot / (dh as f64).sqrt());
            }
            let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in s.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for e in 0..dh {
                let mut acc = 0.0;
                for j in 0..kv.len() {
                    acc += s[j] / z * vp[j][h * dh + e];
                }
                merged[i][h * dh + e] = acc;
            }
        }
    }
    matmul(&merged, wo)
}

/// Minimum total cost over every injective assignment of the `cols` columns
/// to distinct rows (`rows ≥ cols`), or of rows to columns otherwise.
pub fn brute_force_assignment(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(cost: &[f64], rows: usize, cols: usize, col: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if col == cols {
            *best = best.min(acc);
            return;
        }
        for r in 0..rows {
            if !used[r] {
                used[r] = true;
                go(cost, rows, cols, col + 1, used, acc + cost[r * cols + col], best);
                used[r] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    if rows >= cols {
        go(cost, rows, cols, 0, &mut vec![false; rows], 0.0, &mut best);
    } else {
        let t: Vec<f64> = (0..cols).flat_map(|c| (0..rows).map(move |r| cost[r * cols + c])).collect();
        go(&t, cols, rows, 0, &mut vec![false; cols], 0.0, &mut best);
    }
    best
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = [a.cx - a.w / 2.0, a.cy - a.h / 2.0, a.cx + a.w / 2.0, a.cy + a.h / 2.0];
    let [bx1, by1, bx2, by2] = [b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0];
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// COCO average precision over all areas, walking the ranked detections
/// one at a time and reading precision at each of the 101 recall points.
pub fn coco_ap(dets: &[Vec<Detection>], gts: &[Vec<Target>], num_classes: usize, max_dets: usize) -> f64 {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for class in 0..num_classes {
        let n_gt: usize = gts.iter().map(|g| g.iter().filter(|t| t.class_id == class).count()).sum();
        if n_gt == 0 {
            continue;
        }
        for &thr in &thresholds {
            // (score, image, is_tp) for every kept detection
            let mut ranked: Vec<(f64, usize, bool)> = Vec::new();
            for (img, d) in dets.iter().enumerate() {
                let mut mine: Vec<&Detection> = d.iter().filter(|x| x.class_id == class).collect();
                mine.sort_by(|a, b| b.score.total_cmp(&a.score));
                mine.truncate(max_dets);
                let g: Vec<&Target> = gts.get(img).map_or(Vec::new(), |g| g.iter().filter(|t| t.class_id == class).collect());
                let mut taken = vec![false; g.len()];
                for det in mine {
                    let mut best_iou = thr;
                    let mut best = None;
                    for (gi, t) in g.iter().enumerate() {
                        let v = iou(&det.bbox, &t.bbox);
                        if !taken[gi] && v >= best_iou {
                            best_iou = v;
                            best = Some(gi);
                        }
                    }
                    if let Some(gi) = best {
                        taken[gi] = true;
                    }
                    ranked.push((det.score, img, best.is_some()));
                }
            }
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut prec = Vec::new();
            let mut rec = Vec::new();
            let (mut tp, mut fp) = (0usize, 0usize);
            for &(_, _, hit) in &ranked {
                if hit {
                    tp += 1;
                } else {
                    fp += 1;
                }
                prec.push(tp as f64 / (tp + fp) as f64);
                rec.push(tp as f64 / n_gt as f64);
            }
            let mut sum = 0.0;
            for r in 0..101 {
                let target = r as f64 / 100.0;
                // best precision at any rank reaching this recall
                let mut p = 0.0f64;
                for i in 0..rec.len() {
                    if rec[i] >= target {
                        p = p.max(prec[i]);
                    }
                }
                sum += p;
            }
            total += sum / 101.0;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Fraction of a `res × res` grid over the unit square covered by both boxes
/// relative to either, and the hull term, giving GIoU by pixel counting.
pub fn giou_raster(a: &BBox, b: &BBox, res: usize) -> f64 {
    let inside = |bx: &BBox, x: f64, y: f64| (x - bx.cx).abs() <= bx.w / 2.0 && (y - bx.cy).abs() <= bx.h / 2.0;
    let hx1 = (a.cx - a.w / 2.0).min(b.cx - b.w / 2.0);
    let hy1 = (a.cy - a.h / 2.0).min(b.cy - b.h / 2.0);
    let hx2 = (a.cx + a.w / 2.0).max(b.cx + b.w / 2.0);
    let hy2 = (a.cy + a.h / 2.0).max(b.cy + b.h / 2.0);
    let (mut inter, mut union, mut hull) = (0usize, 0usize, 0usize);
    for i in 0..res {
        for j in 0..res {
            let x = (j as f64 + 0.5) / res as f64;
            let y = (i as f64 + 0.5) / res as f64;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
            hull += usize::from(x >= hx1 && x <= hx2 && y >= hy1 && y <= hy2);
        }
    }
    inter as f64 / union as f64 - (hull - union) as f64 / hull as f64
}
