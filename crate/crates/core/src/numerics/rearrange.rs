//! Pure data-movement layouts built on top of permute/reshape.

use super::element::Element;
use super::graph::Var;
use crate::error::{config_err, Result};

/// `[N, C, H, W] -> [N, C*r*r, H/r, W/r]`; output channel is `c*r*r + dy*r + dx`.
pub fn space_to_channel<'g, F: Element>(x: Var<'g, F>, r: usize) -> Result<Var<'g, F>> {
    let s = x.shape();
    if s.len() != 4 || r == 0 || !s[2].is_multiple_of(r) || !s[3].is_multiple_of(r) {
        return Err(config_err!("space_to_channel({r}) needs [N,C,H,W] divisible by {r}, got {s:?}"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    x.reshape(&[n, c, h / r, r, w / r, r])?
        .permute(&[0, 1, 3, 5, 2, 4])?
        .reshape(&[n, c * r * r, h / r, w / r])
}

/// Inverse of [`space_to_channel`].
pub fn channel_to_space<'g, F: Element>(x: Var<'g, F>, r: usize) -> Result<Var<'g, F>> {
    let s = x.shape();
    if s.len() != 4 || r == 0 || !s[1].is_multiple_of(r * r) {
        return Err(config_err!("channel_to_space({r}) needs channels divisible by {}, got {s:?}", r * r));
    }
    let (n, c, h, w) = (s[0], s[1] / (r * r), s[2], s[3]);
    x.reshape(&[n, c, r, r, h, w])?
        .permute(&[0, 1, 4, 2, 5, 3])?
        .reshape(&[n, c, h * r, w * r])
}

/// `[N, T, H, W, D] -> [N * nWindows, wt*wh*ww, D]`, windows ordered (n, t, h, w).
pub fn window_partition<'g, F: Element>(x: Var<'g, F>, window: [usize; 3]) -> Result<Var<'g, F>> {
    let s = x.shape();
    let [wt, wh, ww] = window;
    if s.len() != 5 || window.contains(&0) || !s[1].is_multiple_of(wt) || !s[2].is_multiple_of(wh) || !s[3].is_multiple_of(ww) {
        return Err(config_err!("window {window:?} does not tile {s:?}"));
    }
    let (n, t, h, w, d) = (s[0], s[1], s[2], s[3], s[4]);
    x.reshape(&[n, t / wt, wt, h / wh, wh, w / ww, ww, d])?
        .permute(&[0, 1, 3, 5, 2, 4, 6, 7])?
        .reshape(&[n * (t / wt) * (h / wh) * (w / ww), wt * wh * ww, d])
}

/// Inverse of [`window_partition`] for a grid of `[n, t, h, w]` tokens.
pub fn window_reverse<'g, F: Element>(
    x: Var<'g, F>,
    grid: [usize; 4],
    window: [usize; 3],
) -> Result<Var<'g, F>> {
    let s = x.shape();
    let [n, t, h, w] = grid;
    let [wt, wh, ww] = window;
    if s.len() != 3 || t % wt != 0 || h % wh != 0 || w % ww != 0 || s[1] != wt * wh * ww {
        return Err(config_err!("cannot reverse windows {s:?} onto grid {grid:?} with {window:?}"));
    }
    let d = s[2];
    x.reshape(&[n, t / wt, h / wh, w / ww, wt, wh, ww, d])?
        .permute(&[0, 1, 4, 2, 5, 3, 6, 7])?
        .reshape(&[n, t, h, w, d])
}

/// Splits `x` along `axis` into consecutive pieces of the given sizes.
pub fn split<'g, F: Element>(x: Var<'g, F>, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'g, F>>> {
    let s = x.shape();
    if axis >= s.len() || sizes.iter().sum::<usize>() != s[axis] {
        return Err(config_err!("split {sizes:?} along {axis} of {s:?}"));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let v = x.narrow(axis, start, len);
            start += len;
            v
        })
        .collect()
}
