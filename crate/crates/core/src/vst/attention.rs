use super::window::{relative_index, WindowGeometry};
use crate::error::{config_err, Result};
use crate::nn::{Init, Linear, ParamSpec};
use crate::numerics::{Bound, Element, Var};

/// Multi-head self-attention inside 3D windows with a relative position bias.
///
/// The bias is factored into a spatial table indexed by `(dy, dx)` and a
/// temporal table indexed by `dt`; their sum is added to the logits.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
    /// Configured window, which sizes the bias tables.
    pub max_window: [usize; 3],
    qkv: Linear,
    proj: Linear,
}

impl WindowAttention {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize, max_window: [usize; 3]) -> Result<Self> {
        let prefix = prefix.into();
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(config_err!("attention dim {dim} is not divisible by {heads} heads"));
        }
        Ok(WindowAttention {
            qkv: Linear::new(format!("{prefix}.qkv"), dim, 3 * dim, true),
            proj: Linear::new(format!("{prefix}.proj"), dim, dim, true),
            prefix,
            dim,
            heads,
            max_window,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn spatial_rows(&self) -> usize {
        (2 * self.max_window[1] - 1) * (2 * self.max_window[2] - 1)
    }

    fn temporal_rows(&self) -> usize {
        2 * self.max_window[0] - 1
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.qkv.specs(out);
        self.proj.specs(out);
        out.push(ParamSpec::new(
            format!("{}.rel_bias_spatial", self.prefix),
            &[self.spatial_rows(), self.heads],
            Init::Zeros,
        ));
        out.push(ParamSpec::new(
            format!("{}.rel_bias_temporal", self.prefix),
            &[self.temporal_rows(), self.heads],
            Init::Zeros,
        ));
    }

    /// `[heads, n, n]` bias for a window of the given extent.
    pub fn position_bias<'g, F: Element>(&self, p: &Bound<'g, F>, window: [usize; 3]) -> Result<Var<'g, F>> {
        if (0..3).any(|a| window[a] > self.max_window[a]) {
            return Err(config_err!("window {window:?} exceeds bias tables for {:?}", self.max_window));
        }
        let n: usize = window.iter().product();
        let (si, ti) = relative_index(window, self.max_window);
        let s = p.get(&format!("{}.rel_bias_spatial", self.prefix))?.gather_rows(si)?;
        let t = p.get(&format!("{}.rel_bias_temporal", self.prefix))?.gather_rows(ti)?;
        s.add(t)?.permute(&[1, 0])?.reshape(&[self.heads, n, n])
    }

    /// Attention over `[samples * nWindows, n, D]` windows laid out by
    /// `geom`. Returns the projected output and the attention weights
    /// `[samples, nWindows, heads, n, n]`.
    pub fn forward_with_weights<'g, F: Element>(
        &self,
        p: &Bound<'g, F>,
        x: Var<'g, F>,
        geom: &WindowGeometry,
    ) -> Result<(Var<'g, F>, Var<'g, F>)> {
        let s = x.shape();
        let (b, n, d) = (s[0], s[1], s[2]);
        let nw = geom.num_windows();
        if d != self.dim || n != geom.tokens_per_window() || b % nw != 0 {
            return Err(config_err!(
                "attention input {s:?} does not match dim {} / geometry {geom:?}",
                self.dim
            ));
        }
        let samples = b / nw;
        let (h, hd) = (self.heads, self.head_dim());
        let qkv = self
            .qkv
            .forward(p, x)?
            .reshape(&[b, n, 3, h, hd])?
            .permute(&[2, 0, 3, 1, 4])?;
        let pick = |i: usize| qkv.narrow(0, i, 1)?.reshape(&[b * h, n, hd]);
        let q = pick(0)?.scale(F::c(1.0 / (hd as f64).sqrt()))?;
        let k = pick(1)?;
        let v = pick(2)?;
        let mut scores = q
            .bmm(k, true)?
            .reshape(&[samples, nw, h, n, n])?
            .add(self.position_bias(p, geom.window)?)?;
        if let Some(mask) = geom.attention_mask::<F>() {
            scores = scores.add(x.graph().var(mask)?)?;
        }
        let attn = scores.softmax()?;
        let out = attn
            .reshape(&[b * h, n, n])?
            .bmm(v, false)?
            .reshape(&[b, h, n, hd])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, n, d])?;
        Ok((self.proj.forward(p, out)?, attn))
    }

    pub fn forward<'g, F: Element>(&self, p: &Bound<'g, F>, x: Var<'g, F>, geom: &WindowGeometry) -> Result<Var<'g, F>> {
        Ok(self.forward_with_weights(p, x, geom)?.0)
    }

    /// FLOPs for `samples` grids laid out by `geom` (padding included).
    pub fn flops(&self, samples: usize, geom: &WindowGeometry) -> u64 {
        let n = geom.tokens_per_window();
        let rows = samples * geom.num_windows() * n;
        let attn = 2 * 2 * (rows * n * self.dim) as u64;
        self.qkv.flops(rows) + self.proj.flops(rows) + attn
    }
}
