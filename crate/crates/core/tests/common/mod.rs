//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use lvnet::numerics::{ParameterStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

// ---- dense masked attention ------------------------------------------------

fn ln(v: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    v.iter().enumerate().map(|(i, x)| (x - mean) * inv * gamma[i] + beta[i]).collect()
}

fn dense(v: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let dout = b.len();
    (0..dout)
        .map(|j| b[j] + v.iter().enumerate().map(|(i, x)| x * w[i * dout + j]).sum::<f64>())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// One transformer block evaluated over every token pair of the grid.
///
/// A key is visible to a query iff, after rolling the grid back by `shift`,
/// both land in the same window cell and on the same side of each wrap seam.
/// Tokens `[N, T, H, W, D]`; parameters under `prefix` as the block names them.
#[allow(clippy::too_many_arguments)]
pub fn dense_block(
    p: &ParameterStore<f64>,
    prefix: &str,
    x: &Tensor<f64>,
    heads: usize,
    window: [usize; 3],
    shift: [usize; 3],
    table_window: [usize; 3],
) -> Vec<f64> {
    let s = x.shape();
    let (nb, grid, d) = (s[0], [s[1], s[2], s[3]], s[4]);
    let hd = d / heads;
    let get = |n: &str| p.get(&format!("{prefix}.{n}")).unwrap().data().to_vec();
    let (g1, b1, g2, b2) = (get("norm1.gamma"), get("norm1.beta"), get("norm2.gamma"), get("norm2.beta"));
    let (wqkv, bqkv) = (get("attn.qkv.weight"), get("attn.qkv.bias"));
    let (wp, bp) = (get("attn.proj.weight"), get("attn.proj.bias"));
    let (bs, bt) = (get("attn.rel_bias_spatial"), get("attn.rel_bias_temporal"));
    let (w1, c1, w2, c2) = (get("mlp.fc1.weight"), get("mlp.fc1.bias"), get("mlp.fc2.weight"), get("mlp.fc2.bias"));
    let padded: Vec<usize> = (0..3).map(|a| grid[a].div_ceil(window[a]) * window[a]).collect();
    let coords: Vec<[usize; 3]> = (0..grid[0])
        .flat_map(|t| (0..grid[1]).flat_map(move |y| (0..grid[2]).map(move |x| [t, y, x])))
        .collect();
    let region = |c: &[usize; 3], a: usize| {
        let r = (c[a] + padded[a] - shift[a]) % padded[a];
        (r / window[a], c[a] < shift[a])
    };
    let n_tok = coords.len();
    let mut out = vec![0.0; x.numel()];
    for n in 0..nb {
        let tok = |i: usize| &x.data()[(n * n_tok + i) * d..(n * n_tok + i + 1) * d];
        let qkv: Vec<Vec<f64>> = (0..n_tok).map(|i| dense(&ln(tok(i), &g1, &b1), &wqkv, &bqkv)).collect();
        for (qi, qc) in coords.iter().enumerate() {
            let mut merged = vec![0.0; d];
            for h in 0..heads {
                let mut logits = Vec::new();
                for (ki, kc) in coords.iter().enumerate() {
                    if (0..3).any(|a| region(qc, a) != region(kc, a)) {
                        continue;
                    }
                    let dot: f64 = (0..hd).map(|e| qkv[qi][h * hd + e] * qkv[ki][d + h * hd + e]).sum();
                    let dt = qc[0] + table_window[0] - 1 - kc[0];
                    let dy = qc[1] + table_window[1] - 1 - kc[1];
                    let dx = qc[2] + table_window[2] - 1 - kc[2];
                    let bias = bs[(dy * (2 * table_window[2] - 1) + dx) * heads + h] + bt[dt * heads + h];
                    logits.push((ki, dot / (hd as f64).sqrt() + bias));
                }
                let m = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l.1 - m).exp()).sum();
                for &(ki, l) in &logits {
                    let a = (l - m).exp() / z;
                    for e in 0..hd {
                        merged[h * hd + e] += a * qkv[ki][2 * d + h * hd + e];
                    }
                }
            }
            let attn = dense(&merged, &wp, &bp);
            let x1: Vec<f64> = tok(qi).iter().zip(&attn).map(|(u, v)| u + v).collect();
            let hidden: Vec<f64> = dense(&ln(&x1, &g2, &b2), &w1, &c1).into_iter().map(gelu).collect();
            let y = dense(&hidden, &w2, &c2);
            for e in 0..d {
                out[(n * n_tok + qi) * d + e] = x1[e] + y[e];
            }
        }
    }
    out
}

// ---- detection metrics by direct counting ----------------------------------

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<u8> {
    let mut m = vec![0u8; h * w];
    for _ in 0..rng.random_range(0..6) {
        let (y, x) = (rng.random_range(0..h), rng.random_range(0..w));
        let (dy, dx) = (rng.random_range(1..4), rng.random_range(1..4));
        for yy in y..(y + dy).min(h) {
            for xx in x..(x + dx).min(w) {
                m[yy * w + xx] = 1;
            }
        }
    }
    for _ in 0..rng.random_range(0..8) {
        m[rng.random_range(0..h * w)] = 1;
    }
    m
}

pub fn flood_fill(mask: &[u8], h: usize, w: usize) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            comp.push((y as usize, x as usize));
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] == 1 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

fn centre(c: &[(usize, usize)]) -> (f64, f64) {
    let n = c.len() as f64;
    (
        c.iter().map(|p| p.0 as f64).sum::<f64>() / n,
        c.iter().map(|p| p.1 as f64).sum::<f64>() / n,
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub t: u64,
    pub p: u64,
    pub n_true: u64,
    pub n_gt: u64,
    pub n_false: u64,
}

/// Pixel counts plus target matching that repeatedly pairs the globally
/// closest free targets while they are less than 3 px apart.
pub fn brute_force(pred: &[u8], gt: &[u8], h: usize, w: usize) -> Counts {
    let tp = pred.iter().zip(gt).filter(|(&p, &g)| p == 1 && g == 1).count() as u64;
    let t = gt.iter().filter(|&&g| g == 1).count() as u64;
    let p = pred.iter().filter(|&&v| v == 1).count() as u64;
    let gc = flood_fill(gt, h, w);
    let pc = flood_fill(pred, h, w);
    let mut gfree = vec![true; gc.len()];
    let mut pfree = vec![true; pc.len()];
    let mut n_true = 0;
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, g) in gc.iter().enumerate().filter(|(i, _)| gfree[*i]) {
            for (j, q) in pc.iter().enumerate().filter(|(j, _)| pfree[*j]) {
                let (a, b) = (centre(g), centre(q));
                let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                if d < 3.0 && best.is_none_or(|bst| d < bst.0) {
                    best = Some((d, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else { break };
        gfree[i] = false;
        pfree[j] = false;
        n_true += 1;
    }
    let n_false = pc.iter().zip(&pfree).filter(|(_, &f)| f).map(|(c, _)| c.len() as u64).sum();
    Counts {
        tp,
        t,
        p,
        n_true,
        n_gt: gc.len() as u64,
        n_false,
    }
}

pub fn mask_from(h: usize, w: usize, on: &[(usize, usize)]) -> Vec<u8> {
    let mut m = vec![0u8; h * w];
    for &(y, x) in on {
        m[y * w + x] = 1;
    }
    m
}
