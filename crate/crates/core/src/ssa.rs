//! Spatial adapter: a strided conv ladder over the raw image (SDE) and
//! projections of the ViT taps (SPB), fused into a stride 4–32 pyramid.

use std::fmt;
use std::str::FromStr;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Builder, ConvBlock, Ctx};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SsaVariant {
    /// SDE injected at levels 2 and 3.
    Proposed,
    /// Injection extended to level 4.
    UpToF4,
    /// Injection extended to levels 4 and 5.
    UpToF5,
    /// Injection at levels 2, 3 and 5.
    F2F3F5,
    /// Proposed injection with bottleneck projections of the ViT taps.
    BottleneckSpb,
    /// Proposed, plus level 2 fused with the upsampled `F3` tap.
    EarlyF2Fusion,
    /// Injection at level 3 only; no level 2 output.
    F3Only,
    /// No image branch: the pyramid comes from the ViT taps alone.
    Off,
}

impl SsaVariant {
    pub const ALL: [SsaVariant; 8] = [
        SsaVariant::Proposed,
        SsaVariant::UpToF4,
        SsaVariant::UpToF5,
        SsaVariant::F2F3F5,
        SsaVariant::BottleneckSpb,
        SsaVariant::EarlyF2Fusion,
        SsaVariant::F3Only,
        SsaVariant::Off,
    ];

    /// Deepest SDE stage this variant needs.
    pub fn sde_depth(self) -> usize {
        match self {
            SsaVariant::Off => 0,
            SsaVariant::UpToF4 => 4,
            SsaVariant::UpToF5 | SsaVariant::F2F3F5 => 5,
            _ => 3,
        }
    }

    /// Whether the SDE output is fused into `level`.
    pub fn injects(self, level: usize) -> bool {
        use SsaVariant::*;
        match (self, level) {
            (Off, _) => false,
            (F3Only, 2) => false,
            (_, 2) | (_, 3) => true,
            (UpToF4 | UpToF5, 4) => true,
            (UpToF5 | F2F3F5, 5) => true,
            _ => false,
        }
    }

    /// Whether the variant produces a level-2 map on its own.
    pub fn has_f2(self) -> bool {
        !matches!(self, SsaVariant::F3Only | SsaVariant::Off)
    }

    pub fn name(self) -> &'static str {
        match self {
            SsaVariant::Proposed => "proposed",
            SsaVariant::UpToF4 => "up-to-f4",
            SsaVariant::UpToF5 => "up-to-f5",
            SsaVariant::F2F3F5 => "f2-f3-f5",
            SsaVariant::BottleneckSpb => "bottleneck-spb",
            SsaVariant::EarlyF2Fusion => "early-f2-fusion",
            SsaVariant::F3Only => "f3-only",
            SsaVariant::Off => "off",
        }
    }
}

impl fmt::Display for SsaVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SsaVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ssa variant `{s}`")))
    }
}

/// Feature maps at strides 4, 8, 16, 32.
#[derive(Clone, Copy, Debug)]
pub struct Pyramid {
    pub p2: Option<Var>,
    pub p3: Var,
    pub p4: Var,
    pub p5: Var,
}

impl Pyramid {
    pub fn level(&self, i: usize) -> Option<Var> {
        match i {
            2 => self.p2,
            3 => Some(self.p3),
            4 => Some(self.p4),
            5 => Some(self.p5),
            _ => None,
        }
    }

    /// `(level, map)` pairs in ascending level order.
    pub fn levels(&self) -> Vec<(usize, Var)> {
        (2..=5).filter_map(|i| self.level(i).map(|v| (i, v))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsaConfig {
    pub variant: SsaVariant,
    /// Adapter base channel.
    pub c: usize,
    pub d_back: usize,
    pub d_neck: usize,
    /// Emit a level-2 map even when the variant has none of its own
    /// (`Off` falls back to the twice-upsampled `F3` tap).
    pub want_f2: bool,
}

impl SsaConfig {
    /// Channel width of the emitted level-2 map.
    pub fn f2_width(&self) -> usize {
        if self.variant.has_f2() {
            2 * self.c
        } else {
            self.d_back
        }
    }

    pub fn emits_f2(&self) -> bool {
        self.variant.has_f2() || (self.want_f2 && self.variant == SsaVariant::Off)
    }

    pub fn validate(&self) -> Result<()> {
        if self.want_f2 && self.variant == SsaVariant::F3Only {
            return Err(Error::Config("ssa variant f3-only has no level-2 output".into()));
        }
        if self.c == 0 || self.d_back == 0 || self.d_neck == 0 {
            return Err(Error::Config("ssa widths must be positive".into()));
        }
        Ok(())
    }
}

/// Projection of a ViT tap into the neck width; `stride` 1 for level 4, 2
/// for level 5.
#[derive(Clone, Debug)]
enum Spb {
    Plain(ConvBlock),
    Bottleneck([ConvBlock; 3]),
}

impl Spb {
    fn new(b: &mut Builder<'_>, c_in: usize, d: usize, stride: usize, bottleneck: bool) -> Result<Self> {
        if bottleneck {
            let hid = (d / 2).max(1);
            Ok(Spb::Bottleneck([
                ConvBlock::new(&mut b.sub("reduce"), c_in, hid, 1, 1)?,
                ConvBlock::new(&mut b.sub("mid"), hid, hid, 3, stride)?,
                ConvBlock::new(&mut b.sub("expand"), hid, d, 1, 1)?,
            ]))
        } else {
            let k = if stride == 2 { 3 } else { 1 };
            Ok(Spb::Plain(ConvBlock::new(b, c_in, d, k, stride)?))
        }
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match self {
            Spb::Plain(c) => c.forward(ctx, x),
            Spb::Bottleneck(cs) => {
                let mut y = x;
                for c in cs {
                    y = c.forward(ctx, y)?;
                }
                Ok(y)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Ssa {
    pub cfg: SsaConfig,
    sde: Vec<ConvBlock>,
    f2_fuse: Option<ConvBlock>,
    f3_fuse: ConvBlock,
    /// Level-4 projection; takes `Concat[SDE4, F4vit]` when level 4 is injected.
    spb4: Spb,
    spb5: Spb,
    f5_fuse: Option<ConvBlock>,
}

/// SDE stage `n` output width: `C · 2^(n−1)`.
pub fn sde_width(c: usize, n: usize) -> usize {
    c << (n - 1)
}

impl Ssa {
    pub fn new(b: &mut Builder<'_>, cfg: SsaConfig) -> Result<Self> {
        cfg.validate()?;
        let v = cfg.variant;
        let (c, db, d) = (cfg.c, cfg.d_back, cfg.d_neck);
        let sde = (1..=v.sde_depth())
            .map(|n| {
                let c_in = if n == 1 { 3 } else { sde_width(c, n - 1) };
                ConvBlock::new(&mut b.sub(&format!("sde.{n}")), c_in, sde_width(c, n), 3, 2)
            })
            .collect::<Result<_>>()?;
        let f2_fuse = if v == SsaVariant::EarlyF2Fusion {
            Some(ConvBlock::new(&mut b.sub("f2_fuse"), 2 * c + db, 2 * c, 1, 1)?)
        } else {
            None
        };
        let f3_in = if v.injects(3) { sde_width(c, 3) + db } else { db };
        let f3_fuse = ConvBlock::new(&mut b.sub("f3_fuse"), f3_in, d, 1, 1)?;
        let bottleneck = v == SsaVariant::BottleneckSpb;
        let f4_in = if v.injects(4) { sde_width(c, 4) + db } else { db };
        let spb4 = Spb::new(&mut b.sub("spb4"), f4_in, d, 1, bottleneck)?;
        let spb5 = Spb::new(&mut b.sub("spb5"), db, d, 2, bottleneck)?;
        let f5_fuse = if v.injects(5) {
            Some(ConvBlock::new(&mut b.sub("f5_fuse"), sde_width(c, 5) + d, d, 1, 1)?)
        } else {
            None
        };
        Ok(Self { cfg, sde, f2_fuse, f3_fuse, spb4, spb5, f5_fuse })
    }

    /// Runs the first `n` SDE stages; `n = 0` returns the image.
    pub fn sde(&self, ctx: &mut Ctx<'_>, image: Var, n: usize) -> Result<Var> {
        if n > self.sde.len() {
            return Err(Error::InvalidArgument(format!("sde stage {n} beyond depth {}", self.sde.len())));
        }
        let mut x = image;
        for stage in &self.sde[..n] {
            x = stage.forward(ctx, x)?;
        }
        Ok(x)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, image: Var, taps: [Var; 3]) -> Result<Pyramid> {
        let si = ctx.tape.shape(image);
        if si.h() % 32 != 0 || si.w() % 32 != 0 {
            return Err(Error::Shape {
                op: "ssa",
                detail: format!("image {si:?} extents must be divisible by 32"),
            });
        }
        for t in taps {
            let st = ctx.tape.shape(t);
            if st.c() != self.cfg.d_back || st.h() * 16 != si.h() || st.w() * 16 != si.w() {
                return Err(Error::Shape {
                    op: "ssa",
                    detail: format!("tap {st:?} is not a stride-16 width-{} map of {si:?}", self.cfg.d_back),
                });
            }
        }
        let [f3v, f4v, f5v] = taps;
        let v = self.cfg.variant;

        // Walk the SDE ladder once, keeping every stage output.
        let mut stages = Vec::with_capacity(self.sde.len());
        let mut x = image;
        for stage in &self.sde {
            x = stage.forward(ctx, x)?;
            stages.push(x);
        }
        let stage = |n: usize| stages[n - 1];

        let up3 = ctx.tape.upsample_bilinear_x2(f3v)?;
        let p2 = if v.has_f2() {
            let s2 = stage(2);
            match &self.f2_fuse {
                Some(fuse) => {
                    let up4 = ctx.tape.upsample_bilinear_x2(up3)?;
                    let cat = ctx.tape.concat_channels(&[s2, up4])?;
                    Some(fuse.forward(ctx, cat)?)
                }
                None => Some(s2),
            }
        } else if self.cfg.emits_f2() {
            Some(ctx.tape.upsample_bilinear_x2(up3)?)
        } else {
            None
        };

        let f3_in = if v.injects(3) {
            ctx.tape.concat_channels(&[stage(3), up3])?
        } else {
            up3
        };
        let p3 = self.f3_fuse.forward(ctx, f3_in)?;

        let f4_in = if v.injects(4) {
            ctx.tape.concat_channels(&[stage(4), f4v])?
        } else {
            f4v
        };
        let p4 = self.spb4.forward(ctx, f4_in)?;

        let mut p5 = self.spb5.forward(ctx, f5v)?;
        if let Some(fuse) = &self.f5_fuse {
            let cat = ctx.tape.concat_channels(&[stage(5), p5])?;
            p5 = fuse.forward(ctx, cat)?;
        }
        Ok(Pyramid { p2, p3, p4, p5 })
    }
}
