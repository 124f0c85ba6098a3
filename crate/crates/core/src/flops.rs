//! Analytic multiply-add and parameter accounting.
//!
//! Counts follow the layer code without running it, for one image:
//!
//! - convolution: `k²·c_in·c_out·h_out·w_out` multiply-adds
//! - linear map on `r` rows: `r·d_in·d_out`
//! - attention with `t_q` queries over `t_k` keys: the four projections plus
//!   `2·t_q·t_k·d` for the score and value products
//!
//! Normalization, activations, resampling and bias additions are not counted.
//! FLOPs are reported as twice the multiply-adds.

use std::fmt::Write;

use crate::backbone::PATCH;
use crate::config::ModelConfig;
use crate::neck::{FusionBlock, NeckMode};
use crate::ssa::{sde_width, SsaVariant};

pub fn conv_macs(c_in: usize, c_out: usize, k: usize, h_out: usize, w_out: usize) -> u64 {
    (k * k * c_in * c_out * h_out * w_out) as u64
}

pub fn linear_macs(rows: usize, d_in: usize, d_out: usize) -> u64 {
    (rows * d_in * d_out) as u64
}

/// Score and weighted-value products only, projections excluded.
pub fn attention_core_macs(t_q: usize, t_k: usize, d: usize) -> u64 {
    2 * (t_q * t_k * d) as u64
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopsEntry {
    pub module: String,
    pub macs: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopsReport {
    pub image_size: usize,
    pub entries: Vec<FlopsEntry>,
}

impl FlopsReport {
    pub fn total_macs(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs()
    }

    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    /// Sums over entries whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        self.entries
            .iter()
            .filter(|e| e.module == prefix || e.module.starts_with(&format!("{prefix}.")))
            .fold((0, 0), |(m, p), e| (m + e.macs, p + e.params))
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<28} {:>14} {:>12}", "module", "GFLOPs", "params");
        for e in &self.entries {
            let _ = writeln!(s, "{:<28} {:>14.6} {:>12}", e.module, 2.0 * e.macs as f64 / 1e9, e.params);
        }
        let _ = writeln!(
            s,
            "{:<28} {:>14.6} {:>12}",
            format!("total @{}px", self.image_size),
            self.total_flops() as f64 / 1e9,
            self.total_params()
        );
        s
    }
}

#[derive(Default)]
struct Acc {
    entries: Vec<FlopsEntry>,
}

impl Acc {
    fn add(&mut self, module: &str, macs: u64, params: u64) {
        match self.entries.iter_mut().find(|e| e.module == module) {
            Some(e) => {
                e.macs += macs;
                e.params += params;
            }
            None => self.entries.push(FlopsEntry { module: module.to_string(), macs, params }),
        }
    }

    /// Bias-free convolution + batch norm on an `h × w` input; returns the
    /// output extent.
    fn conv_block(&mut self, m: &str, c_in: usize, c_out: usize, k: usize, stride: usize, h: usize, w: usize) -> (usize, usize) {
        let (ho, wo) = (h / stride, w / stride);
        self.add(m, conv_macs(c_in, c_out, k, ho, wo), (c_out * c_in * k * k + 2 * c_out) as u64);
        (ho, wo)
    }

    fn linear(&mut self, m: &str, rows: usize, d_in: usize, d_out: usize, bias: bool) {
        let p = d_in * d_out + if bias { d_out } else { 0 };
        self.add(m, linear_macs(rows, d_in, d_out), p as u64);
    }

    fn layer_norm(&mut self, m: &str, d: usize) {
        self.add(m, 0, 2 * d as u64);
    }

    fn attention(&mut self, m: &str, t_q: usize, t_k: usize, d: usize) {
        self.linear(m, t_q, d, d, false);
        self.linear(m, t_k, d, d, false);
        self.linear(m, t_k, d, d, false);
        self.add(m, attention_core_macs(t_q, t_k, d), 0);
        self.linear(m, t_q, d, d, false);
    }

    fn mlp(&mut self, m: &str, rows: usize, d: usize, hidden: usize, d_out: usize) {
        self.linear(m, rows, d, hidden, true);
        self.linear(m, rows, hidden, d_out, true);
    }

    fn fusion(&mut self, m: &str, d: usize, h: usize, w: usize) {
        self.conv_block(m, 2 * d, d, 1, 1, h, w);
        let mut c = d;
        for _ in 0..FusionBlock::PARTITIONS {
            c /= 2;
            self.conv_block(m, c, c, 3, 1, h, w);
            self.conv_block(m, c, c, 3, 1, h, w);
        }
        self.conv_block(m, d, d, 1, 1, h, w);
    }
}

/// Counts one forward pass at `cfg.image_size × cfg.image_size`.
pub fn flops_count(cfg: &ModelConfig) -> FlopsReport {
    let mut a = Acc::default();
    let s = cfg.image_size;
    let (db, d, dd) = (cfg.d_back, cfg.d_neck, cfg.d_dec);

    // backbone
    let g = s / PATCH;
    let t = g * g;
    a.add("backbone.patch", conv_macs(3, db, PATCH, g, g), (db * 3 * PATCH * PATCH + db) as u64);
    for i in 0..cfg.n_blocks {
        let m = format!("backbone.blocks.{i}");
        a.layer_norm(&m, db);
        a.attention(&m, t, t, db);
        a.layer_norm(&m, db);
        a.mlp(&m, t, db, 4 * db, db);
    }

    // adapter
    let sc = cfg.ssa_config();
    let v = sc.variant;
    let c = cfg.c;
    let mut ext = s;
    for n in 1..=v.sde_depth() {
        let c_in = if n == 1 { 3 } else { sde_width(c, n - 1) };
        ext = a.conv_block(&format!("ssa.sde.{n}"), c_in, sde_width(c, n), 3, 2, ext, ext).0;
    }
    if v == SsaVariant::EarlyF2Fusion {
        a.conv_block("ssa.f2_fuse", 2 * c + db, 2 * c, 1, 1, s / 4, s / 4);
    }
    let f3_in = if v.injects(3) { sde_width(c, 3) + db } else { db };
    a.conv_block("ssa.f3_fuse", f3_in, d, 1, 1, s / 8, s / 8);
    let f4_in = if v.injects(4) { sde_width(c, 4) + db } else { db };
    let bottleneck = v == SsaVariant::BottleneckSpb;
    let spb = |a: &mut Acc, m: &str, c_in: usize, stride: usize, h: usize| {
        if bottleneck {
            let hid = (d / 2).max(1);
            a.conv_block(m, c_in, hid, 1, 1, h, h);
            let (ho, _) = a.conv_block(m, hid, hid, 3, stride, h, h);
            a.conv_block(m, hid, d, 1, 1, ho, ho);
        } else {
            let k = if stride == 2 { 3 } else { 1 };
            a.conv_block(m, c_in, d, k, stride, h, h);
        }
    };
    spb(&mut a, "ssa.spb4", f4_in, 1, s / 16);
    spb(&mut a, "ssa.spb5", db, 2, s / 16);
    if v.injects(5) {
        a.conv_block("ssa.f5_fuse", sde_width(c, 5) + d, d, 1, 1, s / 32, s / 32);
    }

    // neck
    let nc = cfg.neck_config();
    let k = if nc.mode == NeckMode::Pbm { nc.n_bifusion } else { 0 };
    let (e3, e4, e5) = (s / 8, s / 16, s / 32);
    if nc.needs_f2() {
        let w2 = nc.f2_width.unwrap_or(d);
        a.conv_block("neck.proj2", w2, d, 1, 1, s / 4, s / 4);
    }
    a.conv_block("neck.fpn", d, d, 1, 1, e5, e5);
    if k >= 2 {
        a.conv_block("neck.bif4", d, d, 1, 1, e5, e5);
        a.conv_block("neck.bif4", d, d, 3, 2, e3, e3);
        a.fusion("neck.bif4", d, e4, e4);
        a.conv_block("neck.top5", d, d, 3, 2, e4, e4);
    } else {
        a.conv_block("neck.fpn", d, d, 1, 1, e4, e4);
        a.conv_block("neck.fpn", d, d, 3, 1, e4, e4);
    }
    if k >= 1 {
        a.conv_block("neck.bif3", d, d, 1, 1, e4, e4);
        a.conv_block("neck.bif3", d, d, 3, 2, s / 4, s / 4);
        a.fusion("neck.bif3", d, e3, e3);
    } else {
        a.conv_block("neck.fpn", d, d, 1, 1, e3, e3);
        a.conv_block("neck.fpn", d, d, 3, 1, e3, e3);
    }
    a.conv_block("neck.pan", d, d, 3, 2, e3, e3);
    a.conv_block("neck.pan", d, d, 3, 2, e4, e4);
    a.conv_block("neck.pan", d, d, 3, 1, e4, e4);
    a.conv_block("neck.pan", d, d, 3, 1, e5, e5);

    // head
    let mut levels = vec![e3, e4, e5];
    if nc.emit_f2_tokens {
        levels.insert(0, s / 4);
    }
    let mem: usize = levels.iter().map(|e| e * e).sum();
    for e in &levels {
        a.add("head.memory", linear_macs(e * e, d, dd), 0);
    }
    // every level owns a projection and an embedding, used or not
    a.add("head.memory", 0, (4 * (d * dd + dd) + 4 * dd) as u64);
    let q = cfg.n_queries;
    a.add("head.queries", 0, (q * dd) as u64);
    for i in 0..cfg.n_dec_layers {
        let m = format!("head.layers.{i}");
        a.layer_norm(&m, dd);
        a.attention(&m, q, q, dd);
        a.layer_norm(&m, dd);
        a.attention(&m, q, mem, dd);
        a.layer_norm(&m, dd);
        a.mlp(&m, q, dd, 4 * dd, dd);
    }
    a.layer_norm("head.out", dd);
    a.linear("head.out", q, dd, cfg.num_classes, true);
    a.linear("head.out", q, dd, dd, true);
    a.linear("head.out", q, dd, dd, true);
    a.linear("head.out", q, dd, 4, true);

    FlopsReport { image_size: s, entries: a.entries }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_conv_closed_form() {
        assert_eq!(2 * conv_macs(4, 8, 1, 8, 8), 4096);
    }
}
