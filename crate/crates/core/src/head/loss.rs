use super::{giou_unchecked, hungarian_match, BBox, Detection, MatchAssignment, Target};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Weights shared by the matching cost and the loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn row_box(boxes: &[f64], q: usize) -> BBox {
    BBox::new(boxes[4 * q], boxes[4 * q + 1], boxes[4 * q + 2], boxes[4 * q + 3])
}

/// Query × ground-truth matching cost, row-major `n_queries × gts.len()`:
/// `λ_cls·(−p_class) + λ_L1·‖b − g‖₁ + λ_giou·(1 − GIoU)`.
pub fn build_cost_matrix(logits: &[f64], boxes: &[f64], num_classes: usize, gts: &[Target], w: &LossWeights) -> Result<Vec<f64>> {
    let nq = boxes.len() / 4;
    if logits.len() != nq * num_classes || boxes.len() != 4 * nq {
        return Err(Error::InvalidArgument(format!(
            "{} logits and {} box values for {num_classes} classes",
            logits.len(),
            boxes.len()
        )));
    }
    for g in gts {
        g.bbox.validate()?;
        if g.class_id >= num_classes {
            return Err(Error::InvalidArgument(format!("class {} out of {num_classes}", g.class_id)));
        }
    }
    let mut cost = Vec::with_capacity(nq * gts.len());
    for q in 0..nq {
        let pb = row_box(boxes, q);
        for g in gts {
            let p = sigmoid(logits[q * num_classes + g.class_id]);
            let l1 = (pb.cx - g.bbox.cx).abs() + (pb.cy - g.bbox.cy).abs() + (pb.w - g.bbox.w).abs() + (pb.h - g.bbox.h).abs();
            cost.push(-w.cls * p + w.l1 * l1 + w.giou * (1.0 - giou_unchecked(&pb, &g.bbox)));
        }
    }
    Ok(cost)
}

/// Matches each batch element independently. `logits` is `(n, 1, Q, K)`,
/// `boxes` `(n, 1, Q, 4)`.
pub fn match_batch(tape: &Tape, logits: Var, boxes: Var, gts: &[Vec<Target>], w: &LossWeights) -> Result<Vec<MatchAssignment>> {
    let (sl, sb) = (tape.shape(logits), tape.shape(boxes));
    let (n, q, k) = (sl.n(), sl.h(), sl.w());
    if sb != Shape::new(n, 1, q, 4) || gts.len() != n {
        return Err(Error::InvalidArgument(format!(
            "logits {sl:?}, boxes {sb:?}, {} target lists",
            gts.len()
        )));
    }
    let (ld, bd) = (tape.value(logits).data(), tape.value(boxes).data());
    (0..n)
        .map(|b| {
            let cost = build_cost_matrix(&ld[b * q * k..(b + 1) * q * k], &bd[b * q * 4..(b + 1) * q * 4], k, &gts[b], w)?;
            hungarian_match(&cost, q, gts[b].len())
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    /// Focal classification term, normalized by the ground-truth count.
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

/// GIoU of matched rows on the tape; both inputs `(1, 1, m, 4)`.
fn giou_rows(tape: &mut Tape, p: Var, g: Var) -> Result<Var> {
    let corners = |tape: &mut Tape, b: Var| -> Result<[Var; 4]> {
        let cx = tape.slice(b, 3, 0, 1)?;
        let cy = tape.slice(b, 3, 1, 1)?;
        let w = tape.slice(b, 3, 2, 1)?;
        let h = tape.slice(b, 3, 3, 1)?;
        let hw = tape.scale(w, 0.5);
        let hh = tape.scale(h, 0.5);
        Ok([tape.sub(cx, hw)?, tape.sub(cy, hh)?, tape.add(cx, hw)?, tape.add(cy, hh)?])
    };
    let [px1, py1, px2, py2] = corners(tape, p)?;
    let [gx1, gy1, gx2, gy2] = corners(tape, g)?;
    let area = |tape: &mut Tape, x1, y1, x2, y2| -> Result<Var> {
        let w = tape.sub(x2, x1)?;
        let h = tape.sub(y2, y1)?;
        tape.mul(w, h)
    };
    let pa = area(tape, px1, py1, px2, py2)?;
    let ga = area(tape, gx1, gy1, gx2, gy2)?;

    let ix1 = tape.maximum(px1, gx1)?;
    let iy1 = tape.maximum(py1, gy1)?;
    let ix2 = tape.minimum(px2, gx2)?;
    let iy2 = tape.minimum(py2, gy2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw);
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;
    let sum = tape.add(pa, ga)?;
    let union = tape.sub(sum, inter)?;
    let iou = tape.div(inter, union)?;

    let hx1 = tape.minimum(px1, gx1)?;
    let hy1 = tape.minimum(py1, gy1)?;
    let hx2 = tape.maximum(px2, gx2)?;
    let hy2 = tape.maximum(py2, gy2)?;
    let hull = area(tape, hx1, hy1, hx2, hy2)?;
    let gap = tape.sub(hull, union)?;
    let frac = tape.div(gap, hull)?;
    tape.sub(iou, frac)
}

/// Focal loss over every logit (matched queries target their class, all
/// others target background) plus L1 and `1 − GIoU` on matched boxes, each
/// normalized by `max(1, total ground truths)`.
pub fn set_loss(
    tape: &mut Tape,
    logits: Var,
    boxes: Var,
    gts: &[Vec<Target>],
    assignments: &[MatchAssignment],
    w: &LossWeights,
) -> Result<LossTerms> {
    let sl = tape.shape(logits);
    let (n, q, k) = (sl.n(), sl.h(), sl.w());
    if gts.len() != n || assignments.len() != n {
        return Err(Error::InvalidArgument(format!("{n} images, {} target lists, {} assignments", gts.len(), assignments.len())));
    }
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    let norm = 1.0 / num_gt.max(1) as f64;

    let mut targets = vec![0.0; n * q * k];
    let mut rows = Vec::new();
    let mut gt_boxes = Vec::new();
    for (b, a) in assignments.iter().enumerate() {
        for &(qi, gi) in &a.pairs {
            let t = gts[b].get(gi).ok_or_else(|| Error::InvalidArgument(format!("assignment refers to missing target {gi}")))?;
            if qi >= q || t.class_id >= k {
                return Err(Error::InvalidArgument(format!("pair ({qi}, {gi}) out of range")));
            }
            targets[(b * q + qi) * k + t.class_id] = 1.0;
            rows.push(b * q + qi);
            gt_boxes.extend_from_slice(&[t.bbox.cx, t.bbox.cy, t.bbox.w, t.bbox.h]);
        }
    }

    let focal = tape.sigmoid_focal_sum(logits, targets, w.focal_alpha, w.focal_gamma)?;
    let cls = tape.scale(focal, norm);
    let mut total = tape.scale(cls, w.cls);
    let mut terms = LossTerms { total, cls: tape.value(cls).item(), l1: 0.0, giou: 0.0 };

    if !rows.is_empty() {
        let m = rows.len();
        let pred = tape.gather_rows(boxes, &rows)?;
        let gt = tape.constant(Tensor::from_vec(Shape::new(1, 1, m, 4), gt_boxes)?);
        let diff = tape.sub(pred, gt)?;
        let abs = tape.abs(diff);
        let l1 = tape.sum(abs);
        let l1 = tape.scale(l1, norm);

        let g = giou_rows(tape, pred, gt)?;
        let g = tape.sum(g);
        // Σ (1 − GIoU) = m − Σ GIoU
        let g = tape.scale(g, -norm);
        let gl = tape.add_scalar(g, m as f64 * norm);

        let wl1 = tape.scale(l1, w.l1);
        let wg = tape.scale(gl, w.giou);
        total = tape.add(total, wl1)?;
        total = tape.add(total, wg)?;
        terms.l1 = tape.value(l1).item();
        terms.giou = tape.value(gl).item();
    }
    terms.total = total;
    Ok(terms)
}

/// Highest-scoring `(query, class)` pairs of one image, no suppression. Ties
/// keep ascending `(query, class)` order.
pub fn postprocess_topk(logits: &[f64], boxes: &[f64], num_classes: usize, k: usize) -> Vec<Detection> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    // Stable sort: equal scores stay in flat (query, class) order.
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    idx.truncate(k);
    idx.into_iter()
        .map(|i| Detection {
            class_id: i % num_classes,
            score: sigmoid(logits[i]),
            bbox: row_box(boxes, i / num_classes),
        })
        .collect()
}
