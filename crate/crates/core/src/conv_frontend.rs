//! Convolutional U-Net around the transformer: a two-level encoder of
//! multi-scale feature fusion (MSFF) blocks that brings frames down to
//! quarter-resolution tokens, and the mirrored decoder that brings the
//! transformer output back to full resolution.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::{Conv, ParamSpec};
use crate::numerics::rearrange::{channel_to_space, space_to_channel};
use crate::numerics::{Bound, Element, Var};

/// Total spatial reduction between frames and tokens.
pub const PATCH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsffMode {
    /// Parallel convolutions of several kernel sizes, fused.
    Msff,
    /// A single 3x3 convolution with a residual.
    ResBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvUNetConfig {
    /// Channels at full resolution; doubled at half resolution.
    pub base_channels: usize,
    pub msff_kernels: Vec<usize>,
    /// When false, frames are patchified by a single strided convolution and
    /// the decoder is a linear projection followed by pixel shuffle.
    pub enabled: bool,
    pub msff_mode: MsffMode,
}

impl Default for ConvUNetConfig {
    fn default() -> Self {
        ConvUNetConfig {
            base_channels: 6,
            msff_kernels: vec![3, 5, 7],
            enabled: true,
            msff_mode: MsffMode::Msff,
        }
    }
}

impl ConvUNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(config_err!("base_channels must be positive"));
        }
        if self.msff_kernels.is_empty() || self.msff_kernels.iter().any(|&k| k % 2 == 0) {
            return Err(config_err!("MSFF kernels must be a non-empty list of odd sizes, got {:?}", self.msff_kernels));
        }
        Ok(())
    }
}

/// Feature block `cin -> cout` at constant resolution.
#[derive(Clone, Debug)]
struct Feature {
    branches: Vec<Conv>,
    fuse: Conv,
    proj: Option<Conv>,
}

impl Feature {
    fn new(prefix: &str, cin: usize, cout: usize, cfg: &ConvUNetConfig) -> Self {
        let proj = (cin != cout).then(|| Conv::same(format!("{prefix}.proj"), cin, cout, 1));
        match cfg.msff_mode {
            MsffMode::Msff => {
                let branches: Vec<Conv> = cfg
                    .msff_kernels
                    .iter()
                    .map(|&k| Conv::same(format!("{prefix}.branch{k}"), cin, cout, k))
                    .collect();
                let fuse = Conv::same(format!("{prefix}.fuse"), branches.len() * cout, cout, 3);
                Feature { branches, fuse, proj }
            }
            MsffMode::ResBlock => Feature {
                branches: Vec::new(),
                fuse: Conv::same(format!("{prefix}.conv"), cin, cout, 3),
                proj,
            },
        }
    }

    fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.branches.iter().for_each(|c| c.specs(out));
        self.fuse.specs(out);
        if let Some(c) = &self.proj {
            c.specs(out);
        }
    }

    fn forward<'g, F: Element>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        let y = if self.branches.is_empty() {
            self.fuse.forward(p, x)?
        } else {
            let parts = self
                .branches
                .iter()
                .map(|b| b.forward(p, x))
                .collect::<Result<Vec<_>>>()?;
            self.fuse.forward(p, Var::concat(&parts, 1)?)?
        };
        let skip = match &self.proj {
            Some(c) => c.forward(p, x)?,
            None => x,
        };
        y.add(skip)?.relu()
    }

    fn flops(&self, n: usize, h: usize, w: usize) -> u64 {
        let mut total: u64 = self.branches.iter().map(|c| c.flops(n, h, w)).sum();
        total += self.fuse.flops(n, h, w);
        if let Some(c) = &self.proj {
            total += c.flops(n, h, w);
        }
        total
    }
}

/// Encoder activations kept for the decoder, full resolution first.
pub struct Skips<'g, F: Element> {
    pub levels: Vec<Var<'g, F>>,
}

#[derive(Clone, Debug)]
enum Layout {
    Full {
        feat1: Feature,
        down1: Conv,
        feat2: Feature,
        down2: Conv,
        up2: Conv,
        fuse2: Conv,
        block2: Conv,
        up1: Conv,
        fuse1: Conv,
        block1: Conv,
    },
    Linear {
        patchify: Conv,
        unpatchify: Conv,
    },
}

/// Frames `[B, 1, H, W]` to tokens `[B, C, H/4, W/4]` and back to
/// `[B, c0, H, W]` features.
#[derive(Clone, Debug)]
pub struct ConvUNet {
    pub cfg: ConvUNetConfig,
    pub embed_dim: usize,
    layout: Layout,
}

impl ConvUNet {
    pub fn new(cfg: &ConvUNetConfig, embed_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let c0 = cfg.base_channels;
        let c1 = 2 * c0;
        let name = |s: &str| format!("conv_unet.{s}");
        let layout = if cfg.enabled {
            Layout::Full {
                feat1: Feature::new(&name("enc1"), 1, c0, cfg),
                down1: Conv::same(name("down1"), 4 * c0, c1, 3),
                feat2: Feature::new(&name("enc2"), c1, c1, cfg),
                down2: Conv::same(name("down2"), 4 * c1, embed_dim, 3),
                up2: Conv::same(name("up2"), embed_dim, 4 * c1, 3),
                fuse2: Conv::same(name("fuse2"), 2 * c1, c1, 3),
                block2: Conv::same(name("dec2"), c1, c1, 3),
                up1: Conv::same(name("up1"), c1, 4 * c0, 3),
                fuse1: Conv::same(name("fuse1"), 2 * c0, c0, 3),
                block1: Conv::same(name("dec1"), c0, c0, 3),
            }
        } else {
            Layout::Linear {
                patchify: Conv::strided(name("patchify"), 1, embed_dim, PATCH, PATCH),
                unpatchify: Conv::same(name("unpatchify"), embed_dim, PATCH * PATCH * c0, 1),
            }
        };
        Ok(ConvUNet {
            cfg: cfg.clone(),
            embed_dim,
            layout,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.cfg.base_channels
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        match &self.layout {
            Layout::Full {
                feat1,
                down1,
                feat2,
                down2,
                up2,
                fuse2,
                block2,
                up1,
                fuse1,
                block1,
            } => {
                feat1.specs(&mut out);
                down1.specs(&mut out);
                feat2.specs(&mut out);
                down2.specs(&mut out);
                for c in [up2, fuse2, block2, up1, fuse1, block1] {
                    c.specs(&mut out);
                }
            }
            Layout::Linear { patchify, unpatchify } => {
                patchify.specs(&mut out);
                unpatchify.specs(&mut out);
            }
        }
        out
    }

    fn check_frames(&self, s: &[usize]) -> Result<()> {
        if s.len() != 4 || s[1] != 1 || !s[2].is_multiple_of(PATCH) || !s[3].is_multiple_of(PATCH) {
            return Err(config_err!("frames must be [B, 1, H, W] with H, W divisible by {PATCH}, got {s:?}"));
        }
        Ok(())
    }

    pub fn encode<'g, F: Element>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Result<(Var<'g, F>, Skips<'g, F>)> {
        self.check_frames(&x.shape())?;
        match &self.layout {
            Layout::Full {
                feat1,
                down1,
                feat2,
                down2,
                ..
            } => {
                let s1 = feat1.forward(p, x)?;
                let h = down1.forward(p, space_to_channel(s1, 2)?)?;
                let s2 = feat2.forward(p, h)?;
                let t = down2.forward(p, space_to_channel(s2, 2)?)?;
                Ok((t, Skips { levels: vec![s1, s2] }))
            }
            Layout::Linear { patchify, .. } => Ok((patchify.forward(p, x)?, Skips { levels: Vec::new() })),
        }
    }

    pub fn decode<'g, F: Element>(&self, p: &Bound<'g, F>, x: Var<'g, F>, skips: Skips<'g, F>) -> Result<Var<'g, F>> {
        match &self.layout {
            Layout::Full {
                up2,
                fuse2,
                block2,
                up1,
                fuse1,
                block1,
                ..
            } => {
                let [s1, s2] = <[Var<'g, F>; 2]>::try_from(skips.levels)
                    .map_err(|_| config_err!("decoder needs two skip levels"))?;
                let h = channel_to_space(up2.forward(p, x)?, 2)?;
                let h = fuse2.forward(p, Var::concat(&[h, s2], 1)?)?.relu()?;
                let h = block2.forward(p, h)?.add(h)?.relu()?;
                let h = channel_to_space(up1.forward(p, h)?, 2)?;
                let h = fuse1.forward(p, Var::concat(&[h, s1], 1)?)?.relu()?;
                block1.forward(p, h)?.add(h)?.relu()
            }
            Layout::Linear { unpatchify, .. } => channel_to_space(unpatchify.forward(p, x)?, PATCH),
        }
    }

    /// FLOPs for `b` frames of `h x w`.
    pub fn flops(&self, b: usize, h: usize, w: usize) -> u64 {
        match &self.layout {
            Layout::Full {
                feat1,
                down1,
                feat2,
                down2,
                up2,
                fuse2,
                block2,
                up1,
                fuse1,
                block1,
            } => {
                let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);
                feat1.flops(b, h, w)
                    + down1.flops(b, h2, w2)
                    + feat2.flops(b, h2, w2)
                    + down2.flops(b, h4, w4)
                    + up2.flops(b, h4, w4)
                    + fuse2.flops(b, h2, w2)
                    + block2.flops(b, h2, w2)
                    + up1.flops(b, h2, w2)
                    + fuse1.flops(b, h, w)
                    + block1.flops(b, h, w)
            }
            Layout::Linear { patchify, unpatchify } => {
                patchify.flops(b, h, w) + unpatchify.flops(b, h / PATCH, w / PATCH)
            }
        }
    }
}
