use super::Dataset;
use crate::error::{Error, Result};
use crate::head::{iou, BBox, Target};
use crate::rng::{derive_seed, Rng};

/// Maximum class count: shape (2 kinds) × colour (3 kinds) stay distinct.
pub const MAX_CLASSES: usize = 6;
const ATTEMPTS: usize = 1000;
const MAX_OVERLAP: f64 = 0.3;
const NOISE_CELL: usize = 16;

const COLORS: [[u8; 3]; 3] = [[225, 45, 40], [40, 205, 60], [50, 80, 235]];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    /// Inclusive side-length range in pixels.
    pub fn side_range(self) -> (usize, usize) {
        match self {
            SizeBucket::Small => (2, 6),
            SizeBucket::Medium => (8, 16),
            SizeBucket::Large => (20, 32),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Square image side in pixels.
    pub extent: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Mixture weights over small, medium, large objects.
    pub mix: [f64; 3],
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            extent: 64,
            objects_min: 1,
            objects_max: 4,
            mix: [0.6, 0.25, 0.15],
            num_classes: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.extent == 0 || self.extent % 32 != 0 {
            return Err(Error::Config(format!("image extent {} must be a positive multiple of 32", self.extent)));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::Config("objects_min exceeds objects_max".into()));
        }
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            return Err(Error::Config(format!("num_classes must be in 1..={MAX_CLASSES}")));
        }
        if self.mix.iter().any(|w| !w.is_finite() || *w < 0.0) || self.mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("size mixture weights must be non-negative and not all zero".into()));
        }
        let (_, big) = SizeBucket::Large.side_range();
        if self.mix[2] > 0.0 && big > self.extent {
            return Err(Error::Config(format!("large objects do not fit a {} px image", self.extent)));
        }
        Ok(())
    }

    /// Normalized area below which an object counts as small.
    pub fn small_area(&self) -> f64 {
        0.01
    }

    /// Normalized area below which an object counts as medium.
    pub fn medium_area(&self) -> f64 {
        0.09
    }

    fn pick_bucket(&self, rng: &mut Rng) -> SizeBucket {
        let total: f64 = self.mix.iter().sum();
        let mut u = rng.uniform() * total;
        for (w, b) in self.mix.iter().zip([SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large]) {
            if u < *w {
                return b;
            }
            u -= w;
        }
        // rounding left u at the very top: take the last bucket with weight
        if self.mix[2] > 0.0 {
            SizeBucket::Large
        } else if self.mix[1] > 0.0 {
            SizeBucket::Medium
        } else {
            SizeBucket::Small
        }
    }
}

/// 8-bit RGB image, interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    /// Planar `[-1, 1]` values, channel-major.
    pub fn to_planar(&self) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for (p, px) in self.rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = px[c] as f64 / 127.5 - 1.0;
            }
        }
        out
    }
}

/// Smooth gray background: random lattice values bilinearly interpolated
/// with a smoothstep weight, plus a little per-pixel grain.
fn background(extent: usize, rng: &mut Rng) -> Vec<u8> {
    let cells = extent / NOISE_CELL + 1;
    let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.range(70.0, 150.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut rgb = Vec::with_capacity(extent * extent * 3);
    for y in 0..extent {
        for x in 0..extent {
            let (gy, gx) = (y / NOISE_CELL, x / NOISE_CELL);
            let ty = smooth((y % NOISE_CELL) as f64 / NOISE_CELL as f64);
            let tx = smooth((x % NOISE_CELL) as f64 / NOISE_CELL as f64);
            let at = |r: usize, c: usize| lattice[r.min(cells - 1) * cells + c.min(cells - 1)];
            let top = at(gy, gx) * (1.0 - tx) + at(gy, gx + 1) * tx;
            let bot = at(gy + 1, gx) * (1.0 - tx) + at(gy + 1, gx + 1) * tx;
            let v = (top * (1.0 - ty) + bot * ty + rng.range(-6.0, 6.0)).round().clamp(0.0, 255.0) as u8;
            rgb.extend_from_slice(&[v, v, v]);
        }
    }
    rgb
}

/// Even class ids are rectangles, odd ones ellipses; colour cycles with
/// period 3.
fn draw(rgb: &mut [u8], extent: usize, class_id: usize, x1: usize, y1: usize, w: usize, h: usize) {
    let color = COLORS[class_id % 3];
    let ellipse = class_id % 2 == 1;
    let (cx, cy) = (x1 as f64 + w as f64 / 2.0, y1 as f64 + h as f64 / 2.0);
    for y in y1..y1 + h {
        for x in x1..x1 + w {
            if ellipse {
                let dx = (x as f64 + 0.5 - cx) / (w as f64 / 2.0);
                let dy = (y as f64 + 0.5 - cy) / (h as f64 / 2.0);
                if dx * dx + dy * dy > 1.0 {
                    continue;
                }
            }
            let p = (y * extent + x) * 3;
            rgb[p..p + 3].copy_from_slice(&color);
        }
    }
}

pub(super) fn generate(cfg: &SynthConfig, n_images: usize) -> Result<Dataset> {
    cfg.validate()?;
    let e = cfg.extent;
    let mut images = Vec::with_capacity(n_images);
    let mut targets = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let mut rng = Rng::new(derive_seed(cfg.seed, &format!("image.{i}")));
        let mut rgb = background(e, &mut rng);
        let count = rng.int_in(cfg.objects_min, cfg.objects_max);
        let mut objs: Vec<Target> = Vec::with_capacity(count);
        let mut rects = Vec::with_capacity(count);
        for o in 0..count {
            let class_id = rng.below(cfg.num_classes);
            let (lo, hi) = cfg.pick_bucket(&mut rng).side_range();
            let placed = (0..ATTEMPTS).find_map(|_| {
                let (w, h) = (rng.int_in(lo, hi), rng.int_in(lo, hi));
                let (x1, y1) = (rng.int_in(0, e - w), rng.int_in(0, e - h));
                let bbox = BBox::from_corners(x1 as f64 / e as f64, y1 as f64 / e as f64, (x1 + w) as f64 / e as f64, (y1 + h) as f64 / e as f64);
                objs.iter().all(|t| iou(&t.bbox, &bbox) <= MAX_OVERLAP).then_some((x1, y1, w, h, bbox))
            });
            match placed {
                Some((x1, y1, w, h, bbox)) => {
                    rects.push((class_id, x1, y1, w, h));
                    objs.push(Target { class_id, bbox });
                }
                None => log::warn!("image {i}: dropped object {o} after {ATTEMPTS} placement attempts"),
            }
        }
        // Paint large objects first so small ones are never hidden.
        rects.sort_by_key(|&(_, _, _, w, h)| std::cmp::Reverse(w * h));
        for (class_id, x1, y1, w, h) in rects {
            draw(&mut rgb, e, class_id, x1, y1, w, h);
        }
        images.push(Image { width: e, height: e, rgb });
        targets.push(objs);
    }
    Ok(Dataset { cfg: cfg.clone(), images, targets })
}
