//! Multi-scale necks: a 3-scale FPN+PAN baseline and the parallel bi-fusion
//! variant that pulls stride-4 detail into levels 3 and 4.

use std::fmt;
use std::str::FromStr;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Builder, ConvBlock, Ctx};
use crate::ssa::Pyramid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NeckMode {
    Baseline3Scale,
    Pbm,
}

impl NeckMode {
    pub fn name(self) -> &'static str {
        match self {
            NeckMode::Baseline3Scale => "baseline",
            NeckMode::Pbm => "pbm",
        }
    }
}

impl fmt::Display for NeckMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NeckMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(NeckMode::Baseline3Scale),
            "pbm" => Ok(NeckMode::Pbm),
            _ => Err(Error::Config(format!("unknown neck mode `{s}`"))),
        }
    }
}

/// Which neighbour is added to the current level and which one joins it
/// through the fusion block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// Deeper level upsampled and added; shallower level downsampled and
    /// concatenated.
    AddDeepConcatShallow,
    /// The reverse assignment.
    AddShallowConcatDeep,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::AddDeepConcatShallow => "proposed",
            FusionMode::AddShallowConcatDeep => "swapped",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(FusionMode::AddDeepConcatShallow),
            "swapped" => Ok(FusionMode::AddShallowConcatDeep),
            _ => Err(Error::Config(format!("unknown fusion mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NeckConfig {
    pub mode: NeckMode,
    pub d_neck: usize,
    pub n_bifusion: usize,
    pub fusion_mode: FusionMode,
    pub emit_f2_tokens: bool,
    /// Channel width of the incoming level-2 map, if any.
    pub f2_width: Option<usize>,
}

impl NeckConfig {
    pub fn needs_f2(&self) -> bool {
        self.mode == NeckMode::Pbm && (self.n_bifusion >= 1 || self.emit_f2_tokens)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bifusion > 2 {
            return Err(Error::Config(format!("n_bifusion {} (expected 0, 1 or 2)", self.n_bifusion)));
        }
        if self.d_neck == 0 || self.d_neck % 8 != 0 {
            return Err(Error::Config(format!("d_neck {} must be a positive multiple of 8", self.d_neck)));
        }
        if self.mode == NeckMode::Baseline3Scale && (self.n_bifusion > 0 || self.emit_f2_tokens) {
            return Err(Error::Config("the baseline neck takes neither bi-fusion blocks nor level-2 tokens".into()));
        }
        if self.needs_f2() && self.f2_width.is_none() {
            return Err(Error::Config("this neck configuration needs a level-2 input".into()));
        }
        Ok(())
    }
}

/// Concatenate two inputs, reduce with a 1×1 block, then split the channels
/// in half three times: each time one half is kept as is and the other half
/// goes through two 3×3 blocks and is split again. A final 1×1 block mixes
/// the kept halves with the last transformed part.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub d: usize,
    entry: ConvBlock,
    stages: Vec<[ConvBlock; 2]>,
    exit: ConvBlock,
}

impl FusionBlock {
    pub const PARTITIONS: usize = 3;

    pub fn new(b: &mut Builder<'_>, d: usize) -> Result<Self> {
        if d % (1 << Self::PARTITIONS) != 0 {
            return Err(Error::InvalidArgument(format!("fusion width {d} not divisible by 8")));
        }
        let entry = ConvBlock::new(&mut b.sub("entry"), 2 * d, d, 1, 1)?;
        let mut stages = Vec::new();
        let mut w = d;
        for s in 0..Self::PARTITIONS {
            w /= 2;
            stages.push([
                ConvBlock::new(&mut b.sub(&format!("part{s}.a")), w, w, 3, 1)?,
                ConvBlock::new(&mut b.sub(&format!("part{s}.b")), w, w, 3, 1)?,
            ]);
        }
        let exit = ConvBlock::new(&mut b.sub("exit"), d, d, 1, 1)?;
        Ok(Self { d, entry, stages, exit })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (ctx.tape.shape(a), ctx.tape.shape(b));
        if sa.c() + sb.c() != 2 * self.d {
            return Err(Error::Shape {
                op: "fusion_block",
                detail: format!("input widths {} + {} != {}", sa.c(), sb.c(), 2 * self.d),
            });
        }
        let cat = ctx.tape.concat_channels(&[a, b])?;
        let mut x = self.entry.forward(ctx, cat)?;
        let mut kept = Vec::with_capacity(Self::PARTITIONS + 1);
        for [ca, cb] in &self.stages {
            let half = ctx.tape.shape(x).c() / 2;
            let parts = ctx.tape.split_channels(x, &[half, half])?;
            kept.push(parts[0]);
            let t = ca.forward(ctx, parts[1])?;
            x = cb.forward(ctx, t)?;
        }
        kept.push(x);
        let cat = ctx.tape.concat_channels(&kept)?;
        self.exit.forward(ctx, cat)
    }
}

/// One bi-fusion block at level `i`, reading levels `i−1`, `i`, `i+1`.
#[derive(Clone, Debug)]
pub struct BiFusion {
    pub mode: FusionMode,
    proj_next: ConvBlock,
    proj_prev: ConvBlock,
    fuse: FusionBlock,
}

impl BiFusion {
    pub fn new(b: &mut Builder<'_>, d: usize, mode: FusionMode) -> Result<Self> {
        Ok(Self {
            mode,
            proj_next: ConvBlock::new(&mut b.sub("next"), d, d, 1, 1)?,
            proj_prev: ConvBlock::new(&mut b.sub("prev"), d, d, 3, 2)?,
            fuse: FusionBlock::new(&mut b.sub("fuse"), d)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, prev: Var, cur: Var, next: Var) -> Result<Var> {
        let (sp, sc, sn) = (ctx.tape.shape(prev), ctx.tape.shape(cur), ctx.tape.shape(next));
        let d = self.fuse.d;
        let ok = [sp, sc, sn].iter().all(|s| s.c() == d)
            && sp.h() == 2 * sc.h()
            && sp.w() == 2 * sc.w()
            && sc.h() == 2 * sn.h()
            && sc.w() == 2 * sn.w();
        if !ok {
            return Err(Error::Shape {
                op: "bifusion",
                detail: format!("levels {sp:?}, {sc:?}, {sn:?} are not consecutive width-{d} strides"),
            });
        }
        let deep = self.proj_next.forward(ctx, next)?;
        let deep = ctx.tape.upsample_bilinear_x2(deep)?;
        let shallow = self.proj_prev.forward(ctx, prev)?;
        match self.mode {
            FusionMode::AddDeepConcatShallow => {
                let aligned = ctx.tape.add(cur, deep)?;
                self.fuse.forward(ctx, aligned, shallow)
            }
            FusionMode::AddShallowConcatDeep => {
                let aligned = ctx.tape.add(cur, shallow)?;
                self.fuse.forward(ctx, aligned, deep)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NeckOutput {
    /// Final maps after the bottom-up pass (level 2 only with
    /// `emit_f2_tokens`).
    pub out: Pyramid,
    /// Top-down / bi-fusion results for levels 3, 4, 5 before the bottom-up
    /// pass.
    pub fused: [Var; 3],
}

#[derive(Clone, Debug)]
pub struct Neck {
    pub cfg: NeckConfig,
    /// Top-down lateral and smoothing blocks, present where no bi-fusion
    /// block replaces them.
    lat3: Option<ConvBlock>,
    lat4: Option<ConvBlock>,
    lat5: ConvBlock,
    smooth3: Option<ConvBlock>,
    smooth4: Option<ConvBlock>,
    down4: ConvBlock,
    down5: ConvBlock,
    pan4: ConvBlock,
    pan5: ConvBlock,
    proj2: Option<ConvBlock>,
    bif3: Option<BiFusion>,
    bif4: Option<BiFusion>,
    top5: Option<ConvBlock>,
}

impl Neck {
    pub fn new(b: &mut Builder<'_>, cfg: NeckConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_neck;
        let block = |b: &mut Builder<'_>, name: &str, k: usize, s: usize| ConvBlock::new(&mut b.sub(name), d, d, k, s);
        let k = if cfg.mode == NeckMode::Pbm { cfg.n_bifusion } else { 0 };
        let proj2 = match cfg.f2_width {
            Some(w) if cfg.needs_f2() => Some(ConvBlock::new(&mut b.sub("proj2"), w, d, 1, 1)?),
            _ => None,
        };
        Ok(Self {
            cfg,
            lat3: if k < 1 { Some(block(b, "lat3", 1, 1)?) } else { None },
            lat4: if k < 2 { Some(block(b, "lat4", 1, 1)?) } else { None },
            lat5: block(b, "lat5", 1, 1)?,
            smooth3: if k < 1 { Some(block(b, "smooth3", 3, 1)?) } else { None },
            smooth4: if k < 2 { Some(block(b, "smooth4", 3, 1)?) } else { None },
            down4: block(b, "down4", 3, 2)?,
            down5: block(b, "down5", 3, 2)?,
            pan4: block(b, "pan4", 3, 1)?,
            pan5: block(b, "pan5", 3, 1)?,
            proj2,
            bif3: if k >= 1 { Some(BiFusion::new(&mut b.sub("bif3"), d, cfg.fusion_mode)?) } else { None },
            bif4: if k >= 2 { Some(BiFusion::new(&mut b.sub("bif4"), d, cfg.fusion_mode)?) } else { None },
            top5: if k >= 2 { Some(block(b, "top5", 3, 2)?) } else { None },
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, pyr: &Pyramid) -> Result<NeckOutput> {
        let d = self.cfg.d_neck;
        for (i, v) in [(3, pyr.p3), (4, pyr.p4), (5, pyr.p5)] {
            let c = ctx.tape.shape(v).c();
            if c != d {
                return Err(Error::Shape {
                    op: "neck",
                    detail: format!("level {i} has width {c}, expected {d}"),
                });
            }
        }
        let f2 = match (&self.proj2, pyr.p2) {
            (Some(p), Some(x)) => Some(p.forward(ctx, x)?),
            (Some(_), None) => return Err(Error::Config("neck needs a level-2 input".into())),
            _ => None,
        };

        // Both bi-fusion blocks read only the incoming pyramid.
        let l5 = self.lat5.forward(ctx, pyr.p5)?;
        let t4 = match &self.bif4 {
            Some(bf) => bf.forward(ctx, pyr.p3, pyr.p4, pyr.p5)?,
            None => {
                let (lat4, smooth4) = (self.lat4.as_ref().expect("built"), self.smooth4.as_ref().expect("built"));
                let l4 = lat4.forward(ctx, pyr.p4)?;
                let up = ctx.tape.upsample_bilinear_x2(l5)?;
                let s = ctx.tape.add(l4, up)?;
                smooth4.forward(ctx, s)?
            }
        };
        let t5 = match &self.top5 {
            Some(top) => {
                let dn = top.forward(ctx, t4)?;
                ctx.tape.add(dn, l5)?
            }
            None => l5,
        };
        let t3 = match &self.bif3 {
            Some(bf) => {
                let f2 = f2.expect("validated at construction");
                bf.forward(ctx, f2, pyr.p3, pyr.p4)?
            }
            None => {
                let (lat3, smooth3) = (self.lat3.as_ref().expect("built"), self.smooth3.as_ref().expect("built"));
                let l3 = lat3.forward(ctx, pyr.p3)?;
                let up = ctx.tape.upsample_bilinear_x2(t4)?;
                let s = ctx.tape.add(l3, up)?;
                smooth3.forward(ctx, s)?
            }
        };

        let n3 = t3;
        let dn = self.down4.forward(ctx, n3)?;
        let s = ctx.tape.add(t4, dn)?;
        let n4 = self.pan4.forward(ctx, s)?;
        let dn = self.down5.forward(ctx, n4)?;
        let s = ctx.tape.add(t5, dn)?;
        let n5 = self.pan5.forward(ctx, s)?;
        let n2 = if self.cfg.emit_f2_tokens { f2 } else { None };
        Ok(NeckOutput {
            out: Pyramid { p2: n2, p3: n3, p4: n4, p5: n5 },
            fused: [t3, t4, t5],
        })
    }
}
