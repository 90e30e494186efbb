//! Window geometry for 3D (shifted) window attention: padding, shifts,
//! the additive attention mask and the relative-position lookup.

use crate::numerics::{Element, Tensor};

/// Additive mask value standing in for minus infinity.
pub const MASK_VALUE: f64 = -1e4;

/// Resolved layout of one attention layer over a `(T, H, W)` token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeometry {
    /// Token grid before padding.
    pub grid: [usize; 3],
    /// Effective window extent per axis.
    pub window: [usize; 3],
    /// Cyclic shift per axis (0 for a non-shifted layer).
    pub shift: [usize; 3],
    /// Grid after zero-padding to whole windows.
    pub padded: [usize; 3],
}

impl WindowGeometry {
    /// Explicit window and shift (no clamping).
    pub fn new(grid: [usize; 3], window: [usize; 3], shift: [usize; 3]) -> Self {
        let padded = std::array::from_fn(|a| grid[a].div_ceil(window[a]) * window[a]);
        WindowGeometry {
            grid,
            window,
            shift,
            padded,
        }
    }

    /// Spatial axes whose grid extent fits inside one window use the whole
    /// extent and no shift. The temporal window is clamped the same way but
    /// a shifted layer still rolls it by half its effective extent, so that
    /// consecutive frame groups change between blocks. Other axes use the
    /// configured window and, if `shifted`, a shift of half the window.
    pub fn resolve(grid: [usize; 3], window: [usize; 3], shifted: bool) -> Self {
        let mut win = [0; 3];
        let mut shift = [0; 3];
        for a in 0..3 {
            win[a] = window[a].min(grid[a]);
            if shifted && (grid[a] > window[a] || a == 0) {
                shift[a] = win[a] / 2;
            }
        }
        Self::new(grid, win, shift)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.iter().product()
    }

    /// Windows per sample.
    pub fn num_windows(&self) -> usize {
        (0..3).map(|a| self.padded[a] / self.window[a]).product()
    }

    pub fn is_shifted(&self) -> bool {
        self.shift.iter().any(|&s| s > 0)
    }

    pub fn is_padded(&self) -> bool {
        self.padded != self.grid
    }

    pub fn needs_mask(&self) -> bool {
        self.is_shifted() || self.is_padded()
    }

    /// Per-axis region label in rolled, padded coordinates.
    fn region(&self, axis: usize, r: usize) -> u8 {
        let (p, w, s) = (self.padded[axis], self.window[axis], self.shift[axis]);
        if s == 0 || r < p - w {
            0
        } else if r < p - s {
            1
        } else {
            2
        }
    }

    /// Whether a rolled, padded coordinate maps back onto a real token.
    fn real(&self, axis: usize, r: usize) -> bool {
        (r + self.shift[axis]) % self.padded[axis] < self.grid[axis]
    }

    /// `[nWindows, 1, n, n]` additive mask: 0 for allowed pairs, [`MASK_VALUE`]
    /// for pairs from different shift regions or keys on padding.
    pub fn attention_mask<F: Element>(&self) -> Option<Tensor<F>> {
        if !self.needs_mask() {
            return None;
        }
        let n = self.tokens_per_window();
        let counts: [usize; 3] = std::array::from_fn(|a| self.padded[a] / self.window[a]);
        let nw = self.num_windows();
        let mut mask = Tensor::zeros(&[nw, 1, n, n]);
        let data = mask.data_mut();
        let mut label = vec![(0u32, false); n];
        let mut widx = 0;
        for bt in 0..counts[0] {
            for bh in 0..counts[1] {
                for bw in 0..counts[2] {
                    let mut i = 0;
                    for t in 0..self.window[0] {
                        for y in 0..self.window[1] {
                            for x in 0..self.window[2] {
                                let r = [bt * self.window[0] + t, bh * self.window[1] + y, bw * self.window[2] + x];
                                let reg = (0..3).fold(0u32, |acc, a| acc * 3 + self.region(a, r[a]) as u32);
                                let real = (0..3).all(|a| self.real(a, r[a]));
                                label[i] = (reg, real);
                                i += 1;
                            }
                        }
                    }
                    let m = &mut data[widx * n * n..(widx + 1) * n * n];
                    for q in 0..n {
                        for k in 0..n {
                            if label[q].0 != label[k].0 || !label[k].1 {
                                m[q * n + k] = F::c(MASK_VALUE);
                            }
                        }
                    }
                    widx += 1;
                }
            }
        }
        Some(mask)
    }
}

/// Relative-position lookup indices for every (query, key) pair in a window.
///
/// Returns `(spatial, temporal)` row indices into tables of
/// `(2*max_h-1)*(2*max_w-1)` and `2*max_t-1` rows.
pub fn relative_index(window: [usize; 3], max_window: [usize; 3]) -> (Vec<usize>, Vec<usize>) {
    let coords: Vec<[usize; 3]> = (0..window[0])
        .flat_map(|t| (0..window[1]).flat_map(move |y| (0..window[2]).map(move |x| [t, y, x])))
        .collect();
    let n = coords.len();
    let span_w = 2 * max_window[2] - 1;
    let mut spatial = Vec::with_capacity(n * n);
    let mut temporal = Vec::with_capacity(n * n);
    for q in &coords {
        for k in &coords {
            let dt = q[0] + max_window[0] - 1 - k[0];
            let dy = q[1] + max_window[1] - 1 - k[1];
            let dx = q[2] + max_window[2] - 1 - k[2];
            spatial.push(dy * span_w + dx);
            temporal.push(dt);
        }
    }
    (spatial, temporal)
}
