use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::{Init, Linear, Norm, ParamSpec};
use crate::numerics::{Bound, Element, Var};

/// Halves `H` and `W`, doubles the channel dimension.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub dim: usize,
    norm: Norm,
    reduction: Linear,
}

impl PatchMerge {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        let prefix = prefix.into();
        PatchMerge {
            dim,
            norm: Norm::new(format!("{prefix}.norm"), 4 * dim),
            reduction: Linear::new(format!("{prefix}.reduction"), 4 * dim, 2 * dim, false),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.norm.specs(out);
        self.reduction.specs(out);
    }

    pub fn forward<'g, F: Element>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        let s = x.shape();
        let (n, t, h, w, d) = (s[0], s[1], s[2], s[3], s[4]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(config_err!("patch merging needs even H and W, got {h}x{w}"));
        }
        let y = x
            .reshape(&[n, t, h / 2, 2, w / 2, 2, d])?
            .permute(&[0, 1, 2, 4, 3, 5, 6])?
            .reshape(&[n, t, h / 2, w / 2, 4 * d])?;
        self.reduction.forward(p, self.norm.forward(p, y)?)
    }

    /// FLOPs for an input grid of `n x [t, h, w]` tokens.
    pub fn flops(&self, n: usize, grid: [usize; 3]) -> u64 {
        self.reduction.flops(n * grid[0] * (grid[1] / 2) * (grid[2] / 2))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsampler {
    PatchExpand,
    Bilinear,
    TransConv,
}

/// Doubles `H` and `W`, halves the channel dimension.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub prefix: String,
    pub dim: usize,
    pub kind: Upsampler,
}

impl Upsample {
    pub fn new(prefix: impl Into<String>, dim: usize, kind: Upsampler) -> Self {
        Upsample {
            prefix: prefix.into(),
            dim,
            kind,
        }
    }

    fn expand(&self) -> Linear {
        Linear::new(format!("{}.expand", self.prefix), self.dim, 2 * self.dim, false)
    }

    fn project(&self) -> Linear {
        Linear::new(format!("{}.proj", self.prefix), self.dim, self.dim / 2, true)
    }

    fn norm(&self) -> Norm {
        Norm::new(format!("{}.norm", self.prefix), self.dim / 2)
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        match self.kind {
            Upsampler::PatchExpand => {
                self.expand().specs(out);
                self.norm().specs(out);
            }
            Upsampler::Bilinear => self.project().specs(out),
            Upsampler::TransConv => {
                self.expand().specs(out);
                out.push(ParamSpec::new(
                    format!("{}.bias", self.prefix),
                    &[self.dim / 2],
                    Init::Zeros,
                ));
            }
        }
    }

    /// `[N, T, H, W, 2C] -> [N, T, H, W, 4C] -> [N, T, 2H, 2W, C]`: each token's
    /// channels are dealt out to a 2x2 block.
    fn pixel_shuffle<'g, F: Element>(x: Var<'g, F>) -> Result<Var<'g, F>> {
        let s = x.shape();
        let (n, t, h, w, d) = (s[0], s[1], s[2], s[3], s[4] / 4);
        x.reshape(&[n, t, h, w, 2, 2, d])?
            .permute(&[0, 1, 2, 4, 3, 5, 6])?
            .reshape(&[n, t, 2 * h, 2 * w, d])
    }

    pub fn forward<'g, F: Element>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        let s = x.shape();
        if s.len() != 5 || s[4] != self.dim || !self.dim.is_multiple_of(2) {
            return Err(config_err!("upsampler {} got {s:?}", self.prefix));
        }
        match self.kind {
            Upsampler::PatchExpand => {
                let y = Self::pixel_shuffle(self.expand().forward(p, x)?)?;
                self.norm().forward(p, y)
            }
            Upsampler::Bilinear => {
                let (n, t, h, w, d) = (s[0], s[1], s[2], s[3], s[4]);
                let y = x
                    .reshape(&[n * t, h, w, d])?
                    .upsample_bilinear2x()?
                    .reshape(&[n, t, 2 * h, 2 * w, d])?;
                self.project().forward(p, y)
            }
            Upsampler::TransConv => {
                let y = Self::pixel_shuffle(self.expand().forward(p, x)?)?;
                y.add(p.get(&format!("{}.bias", self.prefix))?)
            }
        }
    }

    pub fn flops(&self, n: usize, grid: [usize; 3]) -> u64 {
        let rows = n * grid.iter().product::<usize>();
        match self.kind {
            Upsampler::PatchExpand | Upsampler::TransConv => self.expand().flops(rows),
            Upsampler::Bilinear => self.project().flops(4 * rows),
        }
    }
}
