//! Configuration rows for the ablation axes, each derived from a base config.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::LVNetConfig;
use crate::conv_frontend::MsffMode;
use crate::error::{Error, Result};
use crate::vst::{DecoderBlock, Upsampler};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Clip length 2 / 4 / 8.
    T,
    /// Temporal window 2 / 4 / 8 at clip length 8.
    Window,
    /// Embedding dimension 12 / 24 / 48.
    Dims,
    /// Encoder depths {1,1,1,1} / {2,2,2,1} / {3,3,3,1}.
    Layers,
    /// Conv U-Net with MSFF blocks, with plain residual blocks, or disabled.
    ConvUnet,
    DecoderBlock,
    Upsampler,
}

impl Axis {
    pub const ALL: [Axis; 7] = [
        Axis::T,
        Axis::Window,
        Axis::Dims,
        Axis::Layers,
        Axis::ConvUnet,
        Axis::DecoderBlock,
        Axis::Upsampler,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::T => "T",
            Axis::Window => "window",
            Axis::Dims => "dims",
            Axis::Layers => "layers",
            Axis::ConvUnet => "conv_unet",
            Axis::DecoderBlock => "decoder_block",
            Axis::Upsampler => "upsampler",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = Axis::ALL.iter().map(|a| a.name()).collect();
                Error::Usage(format!("unknown axis {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub config: LVNetConfig,
}

fn row(label: impl Into<String>, base: &LVNetConfig, edit: impl FnOnce(&mut LVNetConfig)) -> AblationRow {
    let mut config = base.clone();
    edit(&mut config);
    AblationRow {
        label: label.into(),
        config,
    }
}

/// Rows for `axis`, in table order. Every row is validated.
pub fn rows(axis: Axis, base: &LVNetConfig) -> Result<Vec<AblationRow>> {
    let out: Vec<AblationRow> = match axis {
        Axis::T => [2, 4, 8]
            .into_iter()
            .map(|t| row(format!("T={t}"), base, |c| c.clip_len = t))
            .collect(),
        Axis::Window => [2, 4, 8]
            .into_iter()
            .map(|wt| {
                let [_, wh, ww] = base.vst.window;
                row(format!("{wt}x{wh}x{ww}"), base, |c| {
                    c.clip_len = 8;
                    c.vst.window[0] = wt;
                })
            })
            .collect(),
        Axis::Dims => [12, 24, 48]
            .into_iter()
            .map(|d| {
                row(format!("C={d}"), base, |c| {
                    c.vst.embed_dim = d;
                    c.conv.base_channels = d / 4;
                    // keep at least three heads in the first stage
                    c.vst.head_dim = c.vst.head_dim.min(d / 3);
                })
            })
            .collect(),
        Axis::Layers => [[1, 1, 1, 1], [2, 2, 2, 1], [3, 3, 3, 1]]
            .into_iter()
            .map(|d| row(format!("{{{},{},{},{}}}", d[0], d[1], d[2], d[3]), base, |c| c.vst.depths = d))
            .collect(),
        Axis::ConvUnet => vec![
            row("Conv U-Net (MSFF)", base, |c| {
                c.conv.enabled = true;
                c.conv.msff_mode = MsffMode::Msff;
            }),
            row("Conv U-Net (ResBlock)", base, |c| {
                c.conv.enabled = true;
                c.conv.msff_mode = MsffMode::ResBlock;
            }),
            row("w/o Conv U-Net", base, |c| c.conv.enabled = false),
        ],
        Axis::DecoderBlock => [DecoderBlock::Conv2d, DecoderBlock::Conv3d, DecoderBlock::Vst]
            .into_iter()
            .map(|b| row(format!("{b:?}"), base, |c| c.vst.decoder_block = b))
            .collect(),
        Axis::Upsampler => [Upsampler::Bilinear, Upsampler::TransConv, Upsampler::PatchExpand]
            .into_iter()
            .map(|u| row(format!("{u:?}"), base, |c| c.vst.upsampler = u))
            .collect(),
    };
    for r in &out {
        r.config.validate()?;
    }
    Ok(out)
}
