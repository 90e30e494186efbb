//! Video Swin U-Net: a hierarchical encoder-decoder of shifted 3D window
//! attention blocks over a `[N, T, H, W, C]` token grid.

mod attention;
mod block;
mod sampling;
pub mod window;

pub use attention::WindowAttention;
pub use block::{Conv2dBlock, Conv3dBlock, VstBlock};
pub use sampling::{PatchMerge, Upsample, Upsampler};
pub use window::{relative_index, WindowGeometry, MASK_VALUE};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::{Linear, Norm, ParamSpec};
use crate::numerics::{Bound, Element, Var};

pub const NUM_STAGES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderBlock {
    Vst,
    Conv2d,
    Conv3d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VstConfig {
    pub embed_dim: usize,
    pub depths: [usize; NUM_STAGES],
    /// `[wT, wH, wW]`.
    pub window: [usize; 3],
    pub head_dim: usize,
    pub mlp_ratio: f64,
    pub decoder_block: DecoderBlock,
    pub upsampler: Upsampler,
}

impl Default for VstConfig {
    fn default() -> Self {
        VstConfig {
            embed_dim: 24,
            depths: [2, 2, 2, 1],
            window: [2, 7, 7],
            head_dim: 8,
            mlp_ratio: 4.0,
            decoder_block: DecoderBlock::Vst,
            upsampler: Upsampler::PatchExpand,
        }
    }
}

impl VstConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.head_dim == 0 || !self.embed_dim.is_multiple_of(self.head_dim) {
            return Err(config_err!(
                "embed_dim {} must be a positive multiple of head_dim {}",
                self.embed_dim,
                self.head_dim
            ));
        }
        if !self.embed_dim.is_multiple_of(2) {
            return Err(config_err!("embed_dim {} must be even", self.embed_dim));
        }
        if self.depths.contains(&0) {
            return Err(config_err!("every stage needs at least one block, got {:?}", self.depths));
        }
        if self.window.contains(&0) {
            return Err(config_err!("window extents must be positive, got {:?}", self.window));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return Err(config_err!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn heads(&self, stage: usize) -> usize {
        self.stage_dim(stage) / self.head_dim
    }

    /// Spatial size of the token grid must be a multiple of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (NUM_STAGES - 1)
    }
}

#[derive(Clone, Debug)]
enum Blocks {
    Vst(Vec<VstBlock>),
    Conv2d(Vec<Conv2dBlock>),
    Conv3d(Vec<Conv3dBlock>),
}

impl Blocks {
    fn vst(prefix: &str, cfg: &VstConfig, stage: usize, depth: usize) -> Result<Self> {
        let dim = cfg.stage_dim(stage);
        let blocks = (0..depth)
            .map(|i| {
                VstBlock::new(
                    format!("{prefix}.block{i}"),
                    dim,
                    cfg.heads(stage),
                    cfg.window,
                    i % 2 == 1,
                    cfg.mlp_ratio,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Blocks::Vst(blocks))
    }

    fn decoder(prefix: &str, cfg: &VstConfig, stage: usize, depth: usize) -> Result<Self> {
        let dim = cfg.stage_dim(stage);
        let name = |i| format!("{prefix}.block{i}");
        Ok(match cfg.decoder_block {
            DecoderBlock::Vst => Self::vst(prefix, cfg, stage, depth)?,
            DecoderBlock::Conv2d => Blocks::Conv2d((0..depth).map(|i| Conv2dBlock::new(name(i), dim)).collect()),
            DecoderBlock::Conv3d => Blocks::Conv3d((0..depth).map(|i| Conv3dBlock::new(name(i), dim)).collect()),
        })
    }

    fn specs(&self, out: &mut Vec<ParamSpec>) {
        match self {
            Blocks::Vst(b) => b.iter().for_each(|b| b.specs(out)),
            Blocks::Conv2d(b) => b.iter().for_each(|b| b.specs(out)),
            Blocks::Conv3d(b) => b.iter().for_each(|b| b.specs(out)),
        }
    }

    fn forward<'g, F: Element>(&self, p: &Bound<'g, F>, mut x: Var<'g, F>) -> Result<Var<'g, F>> {
        match self {
            Blocks::Vst(b) => {
                for b in b {
                    x = b.forward(p, x)?;
                }
            }
            Blocks::Conv2d(b) => {
                for b in b {
                    x = b.forward(p, x)?;
                }
            }
            Blocks::Conv3d(b) => {
                for b in b {
                    x = b.forward(p, x)?;
                }
            }
        }
        Ok(x)
    }

    fn flops(&self, n: usize, grid: [usize; 3]) -> u64 {
        match self {
            Blocks::Vst(b) => b.iter().map(|b| b.flops(n, grid)).sum(),
            Blocks::Conv2d(b) => b.iter().map(|b| b.flops(n, grid)).sum(),
            Blocks::Conv3d(b) => b.iter().map(|b| b.flops(n, grid)).sum(),
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    blocks: Blocks,
    merge: Option<PatchMerge>,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: Upsample,
    fuse: Linear,
    blocks: Blocks,
}

/// Encoder stages with patch merging, a bottleneck, and a mirrored decoder
/// with skip connections. Input and output are `[N, T, H, W, C]`.
#[derive(Clone, Debug)]
pub struct VstUnet {
    pub cfg: VstConfig,
    encoder: Vec<EncoderStage>,
    encoder_norm: Norm,
    decoder: Vec<DecoderStage>,
    decoder_norm: Norm,
}

impl VstUnet {
    pub fn new(cfg: &VstConfig) -> Result<Self> {
        cfg.validate()?;
        let mut encoder = Vec::with_capacity(NUM_STAGES);
        for s in 0..NUM_STAGES {
            let prefix = format!("encoder.stage{s}");
            encoder.push(EncoderStage {
                blocks: Blocks::vst(&prefix, cfg, s, cfg.depths[s])?,
                merge: (s + 1 < NUM_STAGES).then(|| PatchMerge::new(format!("{prefix}.merge"), cfg.stage_dim(s))),
            });
        }
        // decoder stage s restores the resolution of encoder stage s
        let mut decoder = Vec::with_capacity(NUM_STAGES - 1);
        for s in (0..NUM_STAGES - 1).rev() {
            let prefix = format!("decoder.stage{s}");
            let dim = cfg.stage_dim(s);
            decoder.push(DecoderStage {
                up: Upsample::new(format!("{prefix}.up"), 2 * dim, cfg.upsampler),
                fuse: Linear::new(format!("{prefix}.fuse"), 2 * dim, dim, true),
                blocks: Blocks::decoder(&prefix, cfg, s, cfg.depths[s])?,
            });
        }
        Ok(VstUnet {
            encoder,
            encoder_norm: Norm::new("encoder.norm", cfg.stage_dim(NUM_STAGES - 1)),
            decoder,
            decoder_norm: Norm::new("decoder.norm", cfg.embed_dim),
            cfg: cfg.clone(),
        })
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for st in &self.encoder {
            st.blocks.specs(&mut out);
            if let Some(m) = &st.merge {
                m.specs(&mut out);
            }
        }
        self.encoder_norm.specs(&mut out);
        for st in &self.decoder {
            st.up.specs(&mut out);
            st.fuse.specs(&mut out);
            st.blocks.specs(&mut out);
        }
        self.decoder_norm.specs(&mut out);
        out
    }

    fn check_grid(&self, grid: [usize; 3]) -> Result<()> {
        let m = self.cfg.spatial_multiple();
        if grid[0] == 0 || grid[1] == 0 || grid[2] == 0 || !grid[1].is_multiple_of(m) || !grid[2].is_multiple_of(m) {
            return Err(config_err!("token grid {grid:?} must have H and W divisible by {m}"));
        }
        Ok(())
    }

    pub fn forward<'g, F: Element>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        let s = x.shape();
        if s.len() != 5 || s[4] != self.cfg.embed_dim {
            return Err(config_err!("expected [N, T, H, W, {}], got {s:?}", self.cfg.embed_dim));
        }
        self.check_grid([s[1], s[2], s[3]])?;
        let mut skips = Vec::with_capacity(NUM_STAGES - 1);
        let mut h = x;
        for st in &self.encoder {
            h = st.blocks.forward(p, h)?;
            if let Some(m) = &st.merge {
                skips.push(h);
                h = m.forward(p, h)?;
            }
        }
        h = self.encoder_norm.forward(p, h)?;
        for st in &self.decoder {
            let up = st.up.forward(p, h)?;
            let skip = skips.pop().expect("one skip per decoder stage");
            let cat = Var::concat(&[up, skip], 4)?;
            h = st.blocks.forward(p, st.fuse.forward(p, cat)?)?;
        }
        self.decoder_norm.forward(p, h)
    }

    /// FLOPs for `n` samples with a `[t, h, w]` token grid at full resolution.
    pub fn flops(&self, n: usize, grid: [usize; 3]) -> Result<u64> {
        self.check_grid(grid)?;
        let at = |s: usize| [grid[0], grid[1] >> s, grid[2] >> s];
        let mut total = 0;
        for (s, st) in self.encoder.iter().enumerate() {
            total += st.blocks.flops(n, at(s));
            if let Some(m) = &st.merge {
                total += m.flops(n, at(s));
            }
        }
        for (i, st) in self.decoder.iter().enumerate() {
            let s = NUM_STAGES - 2 - i;
            let rows = n * at(s).iter().product::<usize>();
            total += st.up.flops(n, at(s + 1)) + st.fuse.flops(rows) + st.blocks.flops(n, at(s));
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests;
