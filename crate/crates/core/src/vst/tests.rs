use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::materialize_all;
use crate::numerics::{grad_check_sampled, Graph, ParameterStore, Tensor};

fn random_store(specs: &[ParamSpec], seed: u64) -> ParameterStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store: ParameterStore<f64> = materialize_all(specs, &mut rng).unwrap();
    for (name, t) in store.iter_mut() {
        let centre = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        t.data_mut().iter_mut().for_each(|v| *v = centre + rng.random_range(-0.5..0.5));
    }
    store
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

// ---- dense reference for one block -----------------------------------------

fn ln(v: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    v.iter().enumerate().map(|(i, x)| (x - mean) * inv * gamma[i] + beta[i]).collect()
}

fn dense(v: &[f64], w: &[f64], b: Option<&[f64]>, dout: usize) -> Vec<f64> {
    (0..dout)
        .map(|j| {
            let s: f64 = v.iter().enumerate().map(|(i, x)| x * w[i * dout + j]).sum();
            s + b.map_or(0.0, |b| b[j])
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Every query attends to all keys that share its window after the cyclic
/// shift and sit on the same side of every wrap boundary; padding never
/// appears as a key. Loops over all token pairs of the grid.
#[allow(clippy::too_many_arguments)]
fn dense_block(
    p: &ParameterStore<f64>,
    prefix: &str,
    x: &Tensor<f64>,
    heads: usize,
    window: [usize; 3],
    shift: [usize; 3],
    max_window: [usize; 3],
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
    let hidden = c1.len();
    let padded: Vec<usize> = (0..3).map(|a| grid[a].div_ceil(window[a]) * window[a]).collect();
    let tokens: Vec<[usize; 3]> = (0..grid[0])
        .flat_map(|t| (0..grid[1]).flat_map(move |y| (0..grid[2]).map(move |xx| [t, y, xx])))
        .collect();
    let key = |c: &[usize; 3], a: usize| {
        let r = (c[a] + padded[a] - shift[a]) % padded[a];
        (r / window[a], c[a] < shift[a])
    };
    let mut out = vec![0.0; x.numel()];
    for n in 0..nb {
        let tok = |i: usize| &x.data()[(n * tokens.len() + i) * d..(n * tokens.len() + i + 1) * d];
        let qkv: Vec<Vec<f64>> = (0..tokens.len())
            .map(|i| dense(&ln(tok(i), &g1, &b1), &wqkv, Some(&bqkv), 3 * d))
            .collect();
        for (qi, qc) in tokens.iter().enumerate() {
            let mut merged = vec![0.0; d];
            for h in 0..heads {
                let mut logits = Vec::new();
                for (ki, kc) in tokens.iter().enumerate() {
                    if (0..3).any(|a| key(qc, a) != key(kc, a)) {
                        continue;
                    }
                    let dot: f64 = (0..hd).map(|e| qkv[qi][h * hd + e] * qkv[ki][d + h * hd + e]).sum();
                    let dt = qc[0] + max_window[0] - 1 - kc[0];
                    let dy = qc[1] + max_window[1] - 1 - kc[1];
                    let dx = qc[2] + max_window[2] - 1 - kc[2];
                    let bias = bs[(dy * (2 * max_window[2] - 1) + dx) * heads + h] + bt[dt * heads + h];
                    logits.push((ki, dot / (hd as f64).sqrt() + bias));
                }
                let m = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l.1 - m).exp()).sum();
                for &(ki, l) in &logits {
                    let w = (l - m).exp() / z;
                    for e in 0..hd {
                        merged[h * hd + e] += w * qkv[ki][2 * d + h * hd + e];
                    }
                }
            }
            let a = dense(&merged, &wp, Some(&bp), d);
            let x1: Vec<f64> = tok(qi).iter().zip(&a).map(|(u, v)| u + v).collect();
            let m: Vec<f64> = dense(&ln(&x1, &g2, &b2), &w1, Some(&c1), hidden).into_iter().map(gelu).collect();
            let y = dense(&m, &w2, Some(&c2), d);
            let o = &mut out[(n * tokens.len() + qi) * d..(n * tokens.len() + qi + 1) * d];
            for e in 0..d {
                o[e] = x1[e] + y[e];
            }
        }
    }
    out
}

fn check_block_against_dense(grid: [usize; 3], window: [usize; 3], shift: Option<[usize; 3]>, seed: u64) {
    let (dim, heads) = (8, 2);
    let shifted = shift.is_some_and(|s| s.iter().any(|&v| v > 0));
    let block = VstBlock::new("blk", dim, heads, window, shifted, 2.0).unwrap();
    let mut specs = Vec::new();
    block.specs(&mut specs);
    let store = random_store(&specs, seed);
    let x = random_tensor(&[2, grid[0], grid[1], grid[2], dim], seed + 1);
    let geom = match shift {
        Some(s) => {
            let win = std::array::from_fn(|a| window[a].min(grid[a]));
            WindowGeometry::new(grid, win, s)
        }
        None => block.geometry(grid),
    };
    let g = Graph::new();
    let p = store.bind(&g).unwrap();
    let y = block.forward_with_geometry(&p, g.constant(&x).unwrap(), &geom).unwrap().value();
    let want = dense_block(&store, "blk", &x, heads, geom.window, geom.shift, window);
    let err = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-5, "grid {grid:?} geom {geom:?}: max err {err}");
}

#[test]
fn plain_windows_match_dense() {
    check_block_against_dense([2, 14, 14], [2, 7, 7], None, 1);
}

#[test]
fn shifted_windows_match_dense() {
    check_block_against_dense([2, 14, 14], [2, 7, 7], Some([1, 3, 3]), 2);
    check_block_against_dense([2, 14, 14], [1, 7, 7], Some([0, 3, 3]), 3);
}

#[test]
fn padded_grids_match_dense() {
    check_block_against_dense([2, 10, 12], [2, 7, 7], None, 4);
    check_block_against_dense([2, 10, 12], [2, 7, 7], Some([1, 3, 3]), 5);
    check_block_against_dense([1, 9, 5], [2, 4, 4], Some([0, 2, 2]), 6);
}

#[test]
fn resolved_shift_matches_dense() {
    // grid larger than the window on every axis: the block picks the shift itself
    let block = VstBlock::new("blk", 8, 2, [2, 4, 4], true, 2.0).unwrap();
    let geom = block.geometry([4, 8, 8]);
    assert_eq!(geom.shift, [1, 2, 2]);
    check_block_against_dense([4, 8, 8], [2, 4, 4], Some([1, 2, 2]), 7);
}

#[test]
fn short_clips_still_shift_in_time() {
    let g = WindowGeometry::resolve([2, 16, 16], [2, 7, 7], true);
    assert_eq!((g.window, g.shift), ([2, 7, 7], [1, 3, 3]));
    // a spatial grid inside one window is neither padded nor shifted
    let g = WindowGeometry::resolve([2, 4, 4], [2, 7, 7], true);
    assert_eq!((g.window, g.shift, g.padded), ([2, 4, 4], [1, 0, 0], [2, 4, 4]));
    let g = WindowGeometry::resolve([1, 4, 4], [2, 7, 7], true);
    assert_eq!(g.shift, [0, 0, 0]);
    check_block_against_dense([2, 4, 4], [2, 7, 7], Some([1, 0, 0]), 8);
}

#[test]
fn attention_rows_sum_to_one_under_masks() {
    let attn = WindowAttention::new("a", 8, 2, [2, 7, 7]).unwrap();
    let mut specs = Vec::new();
    attn.specs(&mut specs);
    let store = random_store(&specs, 11);
    for geom in [
        WindowGeometry::new([2, 14, 14], [2, 7, 7], [1, 3, 3]),
        WindowGeometry::resolve([2, 10, 10], [2, 7, 7], true),
        WindowGeometry::resolve([2, 7, 7], [2, 7, 7], false),
    ] {
        let nw = geom.num_windows();
        let x = random_tensor(&[nw, geom.tokens_per_window(), 8], 12);
        let g = Graph::new();
        let p = store.bind(&g).unwrap();
        let (_, w) = attn.forward_with_weights(&p, g.constant(&x).unwrap(), &geom).unwrap();
        let n = geom.tokens_per_window();
        w.with_data(|d| {
            for row in d.chunks(n) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
            }
        });
    }
}

#[test]
fn bias_tables_do_not_depend_on_grid() {
    let attn = WindowAttention::new("a", 16, 2, [8, 7, 7]).unwrap();
    let mut specs = Vec::new();
    attn.specs(&mut specs);
    let table: Vec<_> = specs.iter().filter(|s| s.name.contains("rel_bias")).collect();
    assert_eq!(table[0].shape, vec![169, 2]);
    assert_eq!(table[1].shape, vec![15, 2]);
}

// ---- network level ---------------------------------------------------------

fn small_cfg() -> VstConfig {
    VstConfig {
        embed_dim: 8,
        depths: [2, 1, 1, 1],
        window: [2, 2, 2],
        head_dim: 4,
        mlp_ratio: 2.0,
        ..VstConfig::default()
    }
}

fn variants() -> Vec<VstConfig> {
    let mut out = Vec::new();
    for decoder_block in [DecoderBlock::Vst, DecoderBlock::Conv2d, DecoderBlock::Conv3d] {
        for upsampler in [Upsampler::PatchExpand, Upsampler::Bilinear, Upsampler::TransConv] {
            out.push(VstConfig {
                decoder_block,
                upsampler,
                ..small_cfg()
            });
        }
    }
    out
}

#[test]
fn unet_preserves_shape_and_matches_flop_count() {
    for cfg in variants() {
        let net = VstUnet::new(&cfg).unwrap();
        let store = random_store(&net.specs(), 3);
        let x = random_tensor(&[1, 2, 8, 16, 8], 4);
        let g = Graph::new();
        let p = store.bind(&g).unwrap();
        let y = net.forward(&p, g.constant(&x).unwrap()).unwrap();
        assert_eq!(y.shape(), x.shape(), "{cfg:?}");
        assert_eq!(g.flops(), net.flops(1, [2, 8, 16]).unwrap(), "{cfg:?}");
    }
}

#[test]
fn unet_rejects_indivisible_grid() {
    let net = VstUnet::new(&small_cfg()).unwrap();
    let store = random_store(&net.specs(), 3);
    let g = Graph::new();
    let p = store.bind(&g).unwrap();
    let x = g.constant(&random_tensor(&[1, 2, 12, 8, 8], 1)).unwrap();
    assert!(net.forward(&p, x).is_err());
}

#[test]
fn patch_merge_rejects_odd_extent() {
    let m = PatchMerge::new("m", 4);
    let mut specs = Vec::new();
    m.specs(&mut specs);
    let store = random_store(&specs, 1);
    let g = Graph::new();
    let p = store.bind(&g).unwrap();
    let x = g.constant(&random_tensor(&[1, 1, 3, 4, 4], 1)).unwrap();
    assert!(m.forward(&p, x).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        VstConfig { embed_dim: 25, ..VstConfig::default() },
        VstConfig { depths: [2, 0, 2, 1], ..VstConfig::default() },
        VstConfig { window: [0, 7, 7], ..VstConfig::default() },
        VstConfig { mlp_ratio: -1.0, ..VstConfig::default() },
    ];
    for cfg in bad {
        assert!(VstUnet::new(&cfg).is_err(), "{cfg:?}");
    }
}

#[test]
fn temporal_window_barely_changes_parameter_count() {
    let count = |wt| -> usize {
        let cfg = VstConfig {
            window: [wt, 7, 7],
            ..VstConfig::default()
        };
        VstUnet::new(&cfg).unwrap().specs().iter().map(ParamSpec::numel).sum()
    };
    let (a, b) = (count(2), count(8));
    assert!(b > a);
    assert!(((b - a) as f64) / (a as f64) < 0.005, "{a} vs {b}");
}

fn grad_check_module<M>(specs: Vec<ParamSpec>, x_shape: &[usize], forward: M, per_input: usize)
where
    M: for<'g> Fn(&Bound<'g, f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let store = random_store(&specs, 21);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut inputs = vec![random_tensor(x_shape, 22)];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let err = grad_check_sampled(
        |g, v| {
            let p = Bound::from_vars(names.clone(), &v[1..]);
            let y = forward(&p, v[0])?;
            // per-channel weights so the loss is not invariant to channel swaps
            let c = *y.shape().last().unwrap();
            let per = g.constant(&Tensor::from_fn(&[c], |i| 0.5 + i as f64 / c as f64))?;
            y.mul(per)?.sum()
        },
        &inputs,
        1e-6,
        per_input,
        5,
    )
    .unwrap();
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn block_gradients_match_finite_differences() {
    let block = VstBlock::new("b", 8, 2, [2, 3, 3], true, 2.0).unwrap();
    let mut specs = Vec::new();
    block.specs(&mut specs);
    grad_check_module(specs, &[1, 2, 5, 6, 8], |p, x| block.forward(p, x), 12);
}

#[test]
fn merge_and_upsample_gradients_match_finite_differences() {
    let m = PatchMerge::new("m", 4);
    let mut specs = Vec::new();
    m.specs(&mut specs);
    grad_check_module(specs, &[1, 2, 4, 4, 4], |p, x| m.forward(p, x), 16);
    for kind in [Upsampler::PatchExpand, Upsampler::Bilinear, Upsampler::TransConv] {
        let u = Upsample::new("u", 8, kind);
        let mut specs = Vec::new();
        u.specs(&mut specs);
        grad_check_module(specs, &[1, 2, 3, 2, 8], |p, x| u.forward(p, x), 16);
    }
}

#[test]
fn conv_decoder_block_gradients_match_finite_differences() {
    let c3 = Conv3dBlock::new("c", 4);
    let mut specs = Vec::new();
    c3.specs(&mut specs);
    grad_check_module(specs, &[1, 3, 4, 4, 4], |p, x| c3.forward(p, x), 16);
    let c2 = Conv2dBlock::new("c", 4);
    let mut specs = Vec::new();
    c2.specs(&mut specs);
    grad_check_module(specs, &[2, 2, 4, 4, 4], |p, x| c2.forward(p, x), 16);
}
