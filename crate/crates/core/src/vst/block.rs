use super::attention::WindowAttention;
use super::window::WindowGeometry;
use crate::error::{config_err, Result};
use crate::nn::{tokens_to_frames, frames_to_tokens, Conv, Init, Linear, Norm, ParamSpec};
use crate::numerics::rearrange::{window_partition, window_reverse};
use crate::numerics::{Bound, Element, Var};

/// Pre-norm transformer block with (shifted) 3D window attention and an MLP.
#[derive(Clone, Debug)]
pub struct VstBlock {
    pub prefix: String,
    pub dim: usize,
    pub window: [usize; 3],
    pub shifted: bool,
    norm1: Norm,
    pub attn: WindowAttention,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
}

impl VstBlock {
    pub fn new(
        prefix: impl Into<String>,
        dim: usize,
        heads: usize,
        window: [usize; 3],
        shifted: bool,
        mlp_ratio: f64,
    ) -> Result<Self> {
        let prefix = prefix.into();
        let hidden = (dim as f64 * mlp_ratio).round() as usize;
        if hidden == 0 {
            return Err(config_err!("mlp ratio {mlp_ratio} leaves no hidden units at dim {dim}"));
        }
        Ok(VstBlock {
            norm1: Norm::new(format!("{prefix}.norm1"), dim),
            attn: WindowAttention::new(format!("{prefix}.attn"), dim, heads, window)?,
            norm2: Norm::new(format!("{prefix}.norm2"), dim),
            fc1: Linear::new(format!("{prefix}.mlp.fc1"), dim, hidden, true),
            fc2: Linear::new(format!("{prefix}.mlp.fc2"), hidden, dim, true),
            prefix,
            dim,
            window,
            shifted,
        })
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.norm1.specs(out);
        self.attn.specs(out);
        self.norm2.specs(out);
        self.fc1.specs(out);
        self.fc2.specs(out);
    }

    pub fn geometry(&self, grid: [usize; 3]) -> WindowGeometry {
        WindowGeometry::resolve(grid, self.window, self.shifted)
    }

    /// `[N, T, H, W, D] -> [N, T, H, W, D]`.
    pub fn forward<'g, F: Element>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        let s = x.shape();
        let geom = self.geometry([s[1], s[2], s[3]]);
        self.forward_with_geometry(p, x, &geom)
    }

    pub fn forward_with_geometry<'g, F: Element>(
        &self,
        p: &Bound<'g, F>,
        x: Var<'g, F>,
        geom: &WindowGeometry,
    ) -> Result<Var<'g, F>> {
        let s = x.shape();
        if s.len() != 5 || s[4] != self.dim || [s[1], s[2], s[3]] != geom.grid {
            return Err(config_err!("block {} got {s:?} for grid {:?}", self.prefix, geom.grid));
        }
        let n = s[0];
        let mut h = self.norm1.forward(p, x)?;
        if geom.is_padded() {
            let pads: Vec<_> = (0..3)
                .filter(|&a| geom.padded[a] > geom.grid[a])
                .map(|a| (a + 1, 0, geom.padded[a] - geom.grid[a]))
                .collect();
            h = h.pad(&pads)?;
        }
        let rolls: Vec<_> = (0..3)
            .filter(|&a| geom.shift[a] > 0)
            .map(|a| (a + 1, geom.shift[a] as isize))
            .collect();
        if !rolls.is_empty() {
            let back: Vec<_> = rolls.iter().map(|&(a, s)| (a, -s)).collect();
            h = h.roll(&back)?;
        }
        let windows = window_partition(h, geom.window)?;
        let attended = self.attn.forward(p, windows, geom)?;
        let [pt, ph, pw] = geom.padded;
        h = window_reverse(attended, [n, pt, ph, pw], geom.window)?;
        if !rolls.is_empty() {
            h = h.roll(&rolls)?;
        }
        for a in 0..3 {
            if geom.padded[a] > geom.grid[a] {
                h = h.narrow(a + 1, 0, geom.grid[a])?;
            }
        }
        let x = x.add(h)?;
        let m = self.fc1.forward(p, self.norm2.forward(p, x)?)?.gelu()?;
        x.add(self.fc2.forward(p, m)?)
    }

    pub fn flops(&self, n: usize, grid: [usize; 3]) -> u64 {
        let geom = self.geometry(grid);
        let rows = n * grid.iter().product::<usize>();
        self.attn.flops(n, &geom) + self.fc1.flops(rows) + self.fc2.flops(rows)
    }
}

/// Per-frame residual 3x3 convolution: `relu(conv(x) + x)`.
#[derive(Clone, Debug)]
pub struct Conv2dBlock {
    conv: Conv,
}

impl Conv2dBlock {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        Conv2dBlock {
            conv: Conv::same(format!("{}.conv", prefix.into()), dim, dim, 3),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.conv.specs(out);
    }

    pub fn forward<'g, F: Element>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        let n = x.shape()[0];
        let f = tokens_to_frames(x)?;
        let y = self.conv.forward(p, f)?.add(f)?.relu()?;
        frames_to_tokens(y, n)
    }

    pub fn flops(&self, n: usize, grid: [usize; 3]) -> u64 {
        self.conv.flops(n * grid[0], grid[1], grid[2])
    }
}

/// Residual 3x3x3 convolution over `(T, H, W)` with zero temporal padding.
#[derive(Clone, Debug)]
pub struct Conv3dBlock {
    name: String,
    dim: usize,
}

impl Conv3dBlock {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        Conv3dBlock {
            name: format!("{}.conv", prefix.into()),
            dim,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        let d = self.dim;
        out.push(ParamSpec::new(
            format!("{}.weight", self.name),
            &[d, d, 3, 3, 3],
            Init::Kaiming(d * 27),
        ));
        out.push(ParamSpec::new(format!("{}.bias", self.name), &[d], Init::Zeros));
    }

    pub fn forward<'g, F: Element>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        let s = x.shape();
        let (n, t, h, w, d) = (s[0], s[1], s[2], s[3], s[4]);
        let weight = p.get(&format!("{}.weight", self.name))?;
        let bias = p.get(&format!("{}.bias", self.name))?;
        // [N, T, D, H, W]: frames stay contiguous so a temporal shift is a row move
        let v = x.permute(&[0, 1, 4, 2, 3])?;
        let mut acc: Option<Var<'g, F>> = None;
        for k in 0..3 {
            let shifted = v.shift_zero(1, k as isize - 1)?.reshape(&[n * t, d, h, w])?;
            let wk = weight.narrow(2, k, 1)?.reshape(&[d, d, 3, 3])?;
            let b = if k == 1 { Some(bias) } else { None };
            let y = shifted.conv2d(wk, b, 1, 1)?;
            acc = Some(match acc {
                None => y,
                Some(a) => a.add(y)?,
            });
        }
        let frames = v.reshape(&[n * t, d, h, w])?;
        let y = acc.expect("three taps").add(frames)?.relu()?;
        frames_to_tokens(y, n)
    }

    pub fn flops(&self, n: usize, grid: [usize; 3]) -> u64 {
        let [t, h, w] = grid;
        2 * (n * t * h * w * self.dim * self.dim * 27) as u64
    }
}
