//! Model presets and the flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::backbone::VitConfig;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::neck::{FusionMode, NeckConfig, NeckMode};
use crate::ssa::{SsaConfig, SsaVariant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    S,
    M,
    L,
    X,
    XL,
    Toy,
}

impl Preset {
    pub const ALL: [Preset; 6] = [Preset::S, Preset::M, Preset::L, Preset::X, Preset::XL, Preset::Toy];

    pub fn name(self) -> &'static str {
        match self {
            Preset::S => "s",
            Preset::M => "m",
            Preset::L => "l",
            Preset::X => "x",
            Preset::XL => "xl",
            Preset::Toy => "toy",
        }
    }

    /// Model dimensions with the full adapter and two bi-fusion blocks.
    pub fn model(self) -> ModelConfig {
        // (C, d_back, d_neck, d_dec, backbone blocks, decoder layers)
        let (c, d_back, d_neck, d_dec, n_blocks, n_dec) = match self {
            Preset::XL => (128, 768, 384, 256, 12, 6),
            Preset::X => (64, 384, 256, 256, 12, 6),
            Preset::L => (32, 384, 256, 256, 12, 4),
            Preset::M => (16, 256, 256, 256, 12, 4),
            Preset::S => (16, 192, 192, 192, 12, 4),
            Preset::Toy => (16, 64, 64, 64, 4, 2),
        };
        let toy = self == Preset::Toy;
        ModelConfig {
            c,
            d_back,
            n_blocks,
            back_heads: if toy { 4 } else { d_back / 64 },
            d_neck,
            d_dec,
            n_dec_layers: n_dec,
            dec_heads: if toy { 4 } else { 8 },
            n_queries: if toy { 10 } else { 300 },
            num_classes: if toy { 3 } else { 80 },
            ssa: SsaVariant::Proposed,
            neck: NeckMode::Pbm,
            n_bifusion: 2,
            fusion_mode: FusionMode::AddDeepConcatShallow,
            emit_f2_tokens: false,
            image_size: if toy { 64 } else { 640 },
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub c: usize,
    pub d_back: usize,
    pub n_blocks: usize,
    pub back_heads: usize,
    pub d_neck: usize,
    pub d_dec: usize,
    pub n_dec_layers: usize,
    pub dec_heads: usize,
    pub n_queries: usize,
    pub num_classes: usize,
    pub ssa: SsaVariant,
    pub neck: NeckMode,
    pub n_bifusion: usize,
    pub fusion_mode: FusionMode,
    pub emit_f2_tokens: bool,
    pub image_size: usize,
}

impl ModelConfig {
    pub fn vit(&self) -> VitConfig {
        VitConfig { d_back: self.d_back, n_blocks: self.n_blocks, n_heads: self.back_heads }
    }

    pub fn neck_config(&self) -> NeckConfig {
        let needs_f2 = self.neck == NeckMode::Pbm && (self.n_bifusion >= 1 || self.emit_f2_tokens);
        let ssa = SsaConfig { want_f2: needs_f2, ..self.ssa_base() };
        NeckConfig {
            mode: self.neck,
            d_neck: self.d_neck,
            n_bifusion: if self.neck == NeckMode::Pbm { self.n_bifusion } else { 0 },
            fusion_mode: self.fusion_mode,
            emit_f2_tokens: self.emit_f2_tokens,
            f2_width: ssa.emits_f2().then(|| ssa.f2_width()),
        }
    }

    fn ssa_base(&self) -> SsaConfig {
        SsaConfig { variant: self.ssa, c: self.c, d_back: self.d_back, d_neck: self.d_neck, want_f2: false }
    }

    pub fn ssa_config(&self) -> SsaConfig {
        SsaConfig { want_f2: self.neck_config().needs_f2(), ..self.ssa_base() }
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            d_neck: self.d_neck,
            n_queries: self.n_queries,
            d_dec: self.d_dec,
            n_dec_layers: self.n_dec_layers,
            n_heads: self.dec_heads,
            num_classes: self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("c", self.c),
            ("d_back", self.d_back),
            ("n_blocks", self.n_blocks),
            ("back_heads", self.back_heads),
            ("d_neck", self.d_neck),
            ("d_dec", self.d_dec),
            ("dec_heads", self.dec_heads),
            ("n_queries", self.n_queries),
            ("num_classes", self.num_classes),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.d_back % self.back_heads != 0 || self.d_dec % self.dec_heads != 0 {
            return Err(Error::Config("attention widths must be divisible by their head counts".into()));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!("image_size {} must be a positive multiple of 32", self.image_size)));
        }
        if self.n_bifusion > 2 {
            return Err(Error::Config(format!("n_bifusion {} (expected 0, 1 or 2)", self.n_bifusion)));
        }
        match self.neck {
            NeckMode::Baseline3Scale => {
                if !matches!(self.ssa, SsaVariant::F3Only | SsaVariant::Off) {
                    return Err(Error::Config(format!(
                        "the 3-scale baseline neck takes ssa = f3-only or off, not {}",
                        self.ssa
                    )));
                }
                if self.n_bifusion > 0 || self.emit_f2_tokens {
                    return Err(Error::Config("n_bifusion and emit_f2_tokens need neck = pbm".into()));
                }
            }
            NeckMode::Pbm => {
                if self.ssa == SsaVariant::F3Only && (self.n_bifusion >= 1 || self.emit_f2_tokens) {
                    return Err(Error::Config("ssa = f3-only provides no level-2 map for the bi-fusion neck".into()));
                }
            }
        }
        self.neck_config().validate()?;
        self.ssa_config().validate()
    }
}

/// One ablation row: adapter and neck switched on or off.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub name: &'static str,
    pub ssa: bool,
    pub pbm: bool,
}

pub const ABLATION_ROWS: [AblationRow; 4] = [
    AblationRow { name: "baseline", ssa: false, pbm: false },
    AblationRow { name: "+ssa", ssa: true, pbm: false },
    AblationRow { name: "+pbm", ssa: false, pbm: true },
    AblationRow { name: "+ssa+pbm", ssa: true, pbm: true },
];

impl AblationRow {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut m = *base;
        m.ssa = match (self.ssa, self.pbm) {
            (false, _) => SsaVariant::Off,
            (true, false) => SsaVariant::F3Only,
            (true, true) => SsaVariant::Proposed,
        };
        if self.pbm {
            m.neck = NeckMode::Pbm;
            m.n_bifusion = 2;
        } else {
            m.neck = NeckMode::Baseline3Scale;
            m.n_bifusion = 0;
            m.emit_f2_tokens = false;
        }
        m
    }
}

/// Learning-rate multiplier over the optimizer steps of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` down to zero at the last step.
    Cosine,
}

impl LrSchedule {
    /// Learning rate for step `t` of `total` (0-based).
    pub fn lr_at(self, lr: f64, t: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine if total <= 1 => lr,
            LrSchedule::Cosine => 0.5 * lr * (1.0 + (std::f64::consts::PI * t as f64 / (total - 1) as f64).cos()),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::Config(format!("lr_schedule: expected constant or cosine, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub seed: u64,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_grad: f64,
    pub train_images: usize,
    pub eval_images: usize,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub data: SynthConfig,
    pub ablate_seeds: usize,
    /// Evaluate on the eval set after every epoch (0 = only after the last).
    pub eval_every: usize,
    pub score_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let preset = Preset::Toy;
        Self {
            preset,
            model: preset.model(),
            seed: 0,
            lr: 1e-3,
            lr_schedule: LrSchedule::Constant,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 16,
            clip_grad: 1.0,
            train_images: 2000,
            eval_images: 500,
            train_data: None,
            eval_data: None,
            data: SynthConfig::default(),
            ablate_seeds: 3,
            eval_every: 1,
            score_threshold: 0.0,
        }
    }
}

/// Keys accepted in config files, in documentation order.
pub const KEYS: &[&str] = &[
    "preset",
    "ssa",
    "neck",
    "n_bifusion",
    "fusion_mode",
    "emit_f2_tokens",
    "c",
    "d_back",
    "n_blocks",
    "back_heads",
    "d_neck",
    "d_dec",
    "n_dec_layers",
    "dec_heads",
    "n_queries",
    "num_classes",
    "image_size",
    "seed",
    "lr",
    "lr_schedule",
    "weight_decay",
    "epochs",
    "batch_size",
    "clip_grad",
    "train_images",
    "eval_images",
    "train_data",
    "eval_data",
    "objects_min",
    "objects_max",
    "mix_small",
    "mix_medium",
    "mix_large",
    "ablate_seeds",
    "eval_every",
    "score_threshold",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. The preset is
    /// applied first, so other keys override its dimensions regardless of
    /// their position in the file.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", ln + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", ln + 1)));
            }
            if kv.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", ln + 1)));
            }
        }
        let mut cfg = RunConfig::default();
        if let Some(p) = kv.get("preset") {
            cfg.preset = p.parse()?;
            cfg.model = cfg.preset.model();
            cfg.data.extent = cfg.model.image_size;
        }
        for (k, v) in &kv {
            cfg.set(k, v)?;
        }
        // presets carry two bi-fusion blocks; a baseline neck drops them
        // unless the file asks for them explicitly
        if cfg.model.neck == NeckMode::Baseline3Scale && !kv.contains_key("n_bifusion") {
            cfg.model.n_bifusion = 0;
        }
        cfg.data.num_classes = cfg.model.num_classes;
        cfg.data.extent = cfg.model.image_size;
        cfg.data.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, k: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match k {
            "preset" => {}
            "ssa" => m.ssa = v.parse()?,
            "neck" => m.neck = v.parse()?,
            "n_bifusion" => m.n_bifusion = parse(k, v)?,
            "fusion_mode" => m.fusion_mode = v.parse()?,
            "emit_f2_tokens" => m.emit_f2_tokens = parse_bool(k, v)?,
            "c" => m.c = parse(k, v)?,
            "d_back" => m.d_back = parse(k, v)?,
            "n_blocks" => m.n_blocks = parse(k, v)?,
            "back_heads" => m.back_heads = parse(k, v)?,
            "d_neck" => m.d_neck = parse(k, v)?,
            "d_dec" => m.d_dec = parse(k, v)?,
            "n_dec_layers" => m.n_dec_layers = parse(k, v)?,
            "dec_heads" => m.dec_heads = parse(k, v)?,
            "n_queries" => m.n_queries = parse(k, v)?,
            "num_classes" => m.num_classes = parse(k, v)?,
            "image_size" => m.image_size = parse(k, v)?,
            "seed" => self.seed = parse(k, v)?,
            "lr" => self.lr = parse(k, v)?,
            "lr_schedule" => self.lr_schedule = v.parse()?,
            "weight_decay" => self.weight_decay = parse(k, v)?,
            "epochs" => self.epochs = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "clip_grad" => self.clip_grad = parse(k, v)?,
            "train_images" => self.train_images = parse(k, v)?,
            "eval_images" => self.eval_images = parse(k, v)?,
            "train_data" => self.train_data = Some(PathBuf::from(v)),
            "eval_data" => self.eval_data = Some(PathBuf::from(v)),
            "objects_min" => self.data.objects_min = parse(k, v)?,
            "objects_max" => self.data.objects_max = parse(k, v)?,
            "mix_small" => self.data.mix[0] = parse(k, v)?,
            "mix_medium" => self.data.mix[1] = parse(k, v)?,
            "mix_large" => self.data.mix[2] = parse(k, v)?,
            "ablate_seeds" => self.ablate_seeds = parse(k, v)?,
            "eval_every" => self.eval_every = parse(k, v)?,
            "score_threshold" => self.score_threshold = parse(k, v)?,
            _ => return Err(Error::Config(format!("unknown key `{k}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay {} must be non-negative", self.weight_decay)));
        }
        if !(self.clip_grad.is_finite() && self.clip_grad >= 0.0) {
            return Err(Error::Config(format!("clip_grad {} must be non-negative (0 disables)", self.clip_grad)));
        }
        if !(0.0..1.0).contains(&self.score_threshold) {
            return Err(Error::Config("score_threshold must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.ablate_seeds == 0 {
            return Err(Error::Config("ablate_seeds must be positive".into()));
        }
        Ok(())
    }

    /// Renders every key, so that `parse(render())` reproduces the config.
    pub fn render(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        put("preset", self.preset.to_string());
        put("ssa", m.ssa.to_string());
        put("neck", m.neck.to_string());
        put("n_bifusion", m.n_bifusion.to_string());
        put("fusion_mode", m.fusion_mode.to_string());
        put("emit_f2_tokens", m.emit_f2_tokens.to_string());
        put("c", m.c.to_string());
        put("d_back", m.d_back.to_string());
        put("n_blocks", m.n_blocks.to_string());
        put("back_heads", m.back_heads.to_string());
        put("d_neck", m.d_neck.to_string());
        put("d_dec", m.d_dec.to_string());
        put("n_dec_layers", m.n_dec_layers.to_string());
        put("dec_heads", m.dec_heads.to_string());
        put("n_queries", m.n_queries.to_string());
        put("num_classes", m.num_classes.to_string());
        put("image_size", m.image_size.to_string());
        put("seed", self.seed.to_string());
        put("lr", format!("{:e}", self.lr));
        put("lr_schedule", self.lr_schedule.to_string());
        put("weight_decay", format!("{:e}", self.weight_decay));
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("clip_grad", self.clip_grad.to_string());
        put("train_images", self.train_images.to_string());
        put("eval_images", self.eval_images.to_string());
        if let Some(p) = &self.train_data {
            put("train_data", p.display().to_string());
        }
        if let Some(p) = &self.eval_data {
            put("eval_data", p.display().to_string());
        }
        put("objects_min", self.data.objects_min.to_string());
        put("objects_max", self.data.objects_max.to_string());
        put("mix_small", self.data.mix[0].to_string());
        put("mix_medium", self.data.mix[1].to_string());
        put("mix_large", self.data.mix[2].to_string());
        put("ablate_seeds", self.ablate_seeds.to_string());
        put("eval_every", self.eval_every.to_string());
        put("score_threshold", self.score_threshold.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_the_architecture_table() {
        let x = Preset::X.model();
        assert_eq!((x.c, x.d_back, x.d_neck, x.d_dec, x.n_blocks, x.n_dec_layers), (64, 384, 256, 256, 12, 6));
        let s = Preset::S.model();
        assert_eq!((s.c, s.d_back, s.d_neck, s.d_dec, s.n_blocks, s.n_dec_layers), (16, 192, 192, 192, 12, 4));
        let xl = Preset::XL.model();
        assert_eq!((xl.c, xl.d_back, xl.d_neck, xl.d_dec), (128, 768, 384, 256));
        for p in Preset::ALL {
            p.model().validate().unwrap();
        }
    }

    #[test]
    fn unknown_and_out_of_range_keys_fail() {
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("lr = -1").is_err());
        assert!(RunConfig::parse("n_bifusion = 3").is_err());
        assert!(RunConfig::parse("neck = baseline\nssa = proposed").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("epochs").is_err());
    }

    #[test]
    fn render_round_trips() {
        let cfg = RunConfig::parse("preset = toy\nseed = 7\nlr = 0.003 # faster\nneck = baseline\nssa = f3-only").unwrap();
        assert_eq!(cfg.model.neck, NeckMode::Baseline3Scale);
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn ablation_rows_validate() {
        for row in ABLATION_ROWS {
            row.apply(&Preset::Toy.model()).validate().unwrap();
        }
    }
}
