//! COCO-protocol average precision with area buckets.

use crate::head::{iou, Detection, Target};

pub const RECALL_POINTS: usize = 101;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalParams {
    pub iou_thresholds: Vec<f64>,
    /// Normalized area upper bound of the small bucket.
    pub small_area: f64,
    /// Normalized area upper bound of the medium bucket.
    pub medium_area: f64,
    pub max_dets: usize,
    pub num_classes: usize,
}

impl EvalParams {
    /// IoU thresholds 0.50:0.05:0.95, 100 detections per image.
    pub fn coco(num_classes: usize, small_area: f64, medium_area: f64) -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            small_area,
            medium_area,
            max_dets: 100,
            num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    /// AP per class over all thresholds; `None` for classes without ground
    /// truth.
    pub per_class: Vec<Option<f64>>,
}

impl EvalResult {
    /// `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "ap={:.6}\nap50={:.6}\nap75={:.6}\nap_s={:.6}\nap_m={:.6}\nap_l={:.6}\n",
            self.ap, self.ap50, self.ap75, self.ap_s, self.ap_m, self.ap_l
        );
        for (c, v) in self.per_class.iter().enumerate() {
            match v {
                Some(v) => s.push_str(&format!("ap_class{c}={v:.6}\n")),
                None => s.push_str(&format!("ap_class{c}=nan\n")),
            }
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = String::from("metric    value\n");
        for (k, v) in [
            ("AP", self.ap),
            ("AP50", self.ap50),
            ("AP75", self.ap75),
            ("AP_S", self.ap_s),
            ("AP_M", self.ap_m),
            ("AP_L", self.ap_l),
        ] {
            s.push_str(&format!("{k:<8}  {v:>6.4}\n"));
        }
        s
    }
}

/// Per image and class: detections sorted by score and capped, and the
/// IoU matrix against the class's ground truths.
struct ImageClass {
    scores: Vec<f64>,
    det_areas: Vec<f64>,
    gt_areas: Vec<f64>,
    ious: Vec<Vec<f64>>,
}

/// Greedy matching of one image/class at one threshold. Returns, per
/// detection, `(matched, ignored)` and the number of non-ignored ground
/// truths.
fn match_image(ic: &ImageClass, thr: f64, lo: f64, hi: f64) -> (Vec<(bool, bool)>, usize) {
    let gt_ignored: Vec<bool> = ic.gt_areas.iter().map(|&a| a < lo || a > hi).collect();
    // non-ignored ground truths first, stable otherwise
    let mut order: Vec<usize> = (0..ic.gt_areas.len()).collect();
    order.sort_by_key(|&g| gt_ignored[g]);
    let mut gt_taken = vec![false; order.len()];
    let mut out = Vec::with_capacity(ic.scores.len());
    for d in 0..ic.scores.len() {
        let mut best = thr.min(1.0 - 1e-10);
        let mut m: Option<usize> = None;
        for (slot, &g) in order.iter().enumerate() {
            if gt_taken[slot] {
                continue;
            }
            if let Some(prev) = m {
                if !gt_ignored[order[prev]] && gt_ignored[g] {
                    break;
                }
            }
            if ic.ious[d][g] < best {
                continue;
            }
            best = ic.ious[d][g];
            m = Some(slot);
        }
        match m {
            Some(slot) => {
                gt_taken[slot] = true;
                out.push((true, gt_ignored[order[slot]]));
            }
            None => {
                let a = ic.det_areas[d];
                out.push((false, a < lo || a > hi));
            }
        }
    }
    (out, gt_ignored.iter().filter(|&&i| !i).count())
}

/// 101-point interpolated precision of one class at one threshold, or
/// `None` when no non-ignored ground truth exists.
fn class_precision(cells: &[ImageClass], thr: f64, lo: f64, hi: f64) -> Option<f64> {
    let mut dets: Vec<(f64, bool, bool)> = Vec::new();
    let mut npig = 0;
    for ic in cells {
        let (m, n) = match_image(ic, thr, lo, hi);
        npig += n;
        dets.extend(ic.scores.iter().zip(m).map(|(&s, (hit, ign))| (s, hit, ign)));
    }
    if npig == 0 {
        return None;
    }
    // stable: equal scores keep image order
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut rc = Vec::new();
    let mut pr = Vec::new();
    for &(_, hit, ign) in &dets {
        if ign {
            // ignored detections still occupy a rank but change neither count
        } else if hit {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        rc.push(tp / npig as f64);
        pr.push(if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 });
    }
    for i in (1..pr.len()).rev() {
        if pr[i] > pr[i - 1] {
            pr[i - 1] = pr[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let t = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = rc.partition_point(|&x| x < t);
        if idx < pr.len() {
            sum += pr[idx];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Evaluates detections against ground truth, image by image. Means skip
/// classes without ground truth in the bucket; an all-empty bucket reports 0.
pub fn ap_eval(dets: &[Vec<Detection>], gts: &[Vec<Target>], p: &EvalParams) -> EvalResult {
    let n_img = dets.len().max(gts.len());
    let empty_d = Vec::new();
    let empty_g = Vec::new();
    let mut per_class_cells: Vec<Vec<ImageClass>> = Vec::with_capacity(p.num_classes);
    for c in 0..p.num_classes {
        let mut cells = Vec::with_capacity(n_img);
        for i in 0..n_img {
            let d = dets.get(i).unwrap_or(&empty_d);
            let g = gts.get(i).unwrap_or(&empty_g);
            let mut dc: Vec<&Detection> = d.iter().filter(|x| x.class_id == c).collect();
            dc.sort_by(|a, b| b.score.total_cmp(&a.score));
            dc.truncate(p.max_dets);
            let gc: Vec<&Target> = g.iter().filter(|x| x.class_id == c).collect();
            cells.push(ImageClass {
                scores: dc.iter().map(|x| x.score).collect(),
                det_areas: dc.iter().map(|x| x.bbox.area()).collect(),
                gt_areas: gc.iter().map(|x| x.bbox.area()).collect(),
                ious: dc.iter().map(|x| gc.iter().map(|t| iou(&x.bbox, &t.bbox)).collect()).collect(),
            });
        }
        per_class_cells.push(cells);
    }

    let all = (0.0, f64::INFINITY);
    let buckets = [(0.0, p.small_area), (p.small_area, p.medium_area), (p.medium_area, f64::INFINITY)];
    let summarize = |thresholds: &[f64], (lo, hi): (f64, f64)| -> (f64, Vec<Option<f64>>) {
        let mut vals = Vec::new();
        let mut per_class = Vec::with_capacity(p.num_classes);
        for cells in &per_class_cells {
            let cv: Vec<f64> = thresholds.iter().filter_map(|&t| class_precision(cells, t, lo, hi)).collect();
            per_class.push(if cv.is_empty() { None } else { Some(mean(&cv)) });
            vals.extend(cv);
        }
        (mean(&vals), per_class)
    };
    let thr = &p.iou_thresholds;
    let (ap, per_class) = summarize(thr, all);
    let at = |t: f64| -> Vec<f64> { thr.iter().copied().filter(|x| (x - t).abs() < 1e-9).collect() };
    EvalResult {
        ap,
        ap50: summarize(&at(0.5), all).0,
        ap75: summarize(&at(0.75), all).0,
        ap_s: summarize(thr, buckets[0]).0,
        ap_m: summarize(thr, buckets[1]).0,
        ap_l: summarize(thr, buckets[2]).0,
        per_class,
    }
}
