use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{adam_step, grad_check_sampled, AdamConfig, AdamState};

fn tiny_cfg() -> LVNetConfig {
    LVNetConfig {
        conv: ConvUNetConfig {
            base_channels: 2,
            ..Default::default()
        },
        vst: VstConfig {
            embed_dim: 8,
            depths: [1, 1, 1, 1],
            window: [2, 2, 2],
            head_dim: 4,
            mlp_ratio: 1.0,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn clip(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

#[test]
fn default_config_builds_in_bracket() {
    let (store, net) = LVNet::build::<f32>(&LVNetConfig::default(), 0).unwrap();
    let n = net.count_params();
    assert_eq!(n, store.num_elements());
    assert!((1_200_000..=2_400_000).contains(&n), "{n}");
}

#[test]
fn same_seed_same_store() {
    let (a, _) = LVNet::build::<f32>(&tiny_cfg(), 7).unwrap();
    let (b, _) = LVNet::build::<f32>(&tiny_cfg(), 7).unwrap();
    let (c, _) = LVNet::build::<f32>(&tiny_cfg(), 8).unwrap();
    let flat = |s: &ParameterStore<f32>| -> Vec<u32> {
        s.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
    };
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
}

#[test]
fn names_are_hierarchical() {
    let (store, _) = LVNet::build::<f32>(&LVNetConfig::default(), 0).unwrap();
    for name in [
        "conv_unet.enc1.branch7.weight",
        "encoder.stage0.block1.attn.qkv.weight",
        "encoder.stage2.merge.reduction.weight",
        "decoder.stage0.up.expand.weight",
        "decoder.norm.gamma",
        "head.bias",
    ] {
        assert!(store.get(name).is_some(), "{name}");
    }
}

#[test]
fn inconsistent_configs_are_rejected() {
    let mut cfg = LVNetConfig::default();
    cfg.vst.embed_dim = 25;
    assert!(matches!(LVNet::new(&cfg), Err(Error::Config(_))));
    let mut cfg = LVNetConfig::default();
    cfg.clip_len = 3;
    assert!(LVNet::new(&cfg).is_err());
    assert!(LVNetConfig::from_json(r#"{"clip_len": 2, "bogus": 1}"#).is_err());
}

#[test]
fn config_json_round_trip() {
    let mut cfg = LVNetConfig::default();
    cfg.vst.window = [8, 7, 7];
    cfg.clip_len = 8;
    let back = LVNetConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    assert_ne!(LVNetConfig::default().hash(), cfg.hash());
}

#[test]
fn forward_shape_and_zero_clip() {
    let (store, net) = LVNet::build::<f32>(&LVNetConfig::default(), 1).unwrap();
    let out = net.predict(&store, &clip(&[1, 1, 2, 64, 64], 2)).unwrap();
    assert_eq!(out.logits.shape(), &[1, 2, 64, 64]);
    assert!(out.probabilities.data().iter().all(|&p| p > 0.0 && p < 1.0));
    let zero = net.predict(&store, &Tensor::zeros(&[1, 1, 2, 32, 32])).unwrap();
    assert!(zero.logits.data().iter().all(|v| v.is_finite()));
}

#[test]
fn out_of_range_input_is_rejected() {
    let (store, net) = LVNet::build::<f32>(&tiny_cfg(), 1).unwrap();
    let mut c = clip(&[1, 1, 2, 32, 32], 2);
    c.data_mut()[5] = 1.5;
    assert!(matches!(net.predict(&store, &c), Err(Error::Validation(_))));
}

#[test]
fn analytic_flops_match_executed_graph() {
    // 24x40 frames give a 6x10 token grid that the model pads to 8x16
    for cfg in [tiny_cfg(), LVNetConfig::default()] {
        for conv_enabled in [true, false] {
            let mut cfg = cfg.clone();
            cfg.conv.enabled = conv_enabled;
            let (store, net) = LVNet::build::<f32>(&cfg, 1).unwrap();
            let g = Graph::new();
            let p = store.bind_frozen(&g).unwrap();
            let x = g.constant(&clip(&[1, 1, 2, 24, 40], 3)).unwrap();
            let y = net.forward(&p, x).unwrap();
            assert_eq!(y.shape(), vec![1, 2, 24, 40]);
            assert_eq!(g.flops(), net.count_flops(24, 40).unwrap());
        }
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = tiny_cfg();
    let (store, net) = LVNet::build::<f64>(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut inputs = vec![Tensor::from_fn(&[1, 1, 2, 16, 16], |_| rng.random_range(0.0..1.0))];
    // random (not default) values so zero-initialized tables and biases are tested too
    for (_, t) in store.iter() {
        let mut t = t.clone();
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
        inputs.push(t);
    }
    let target = Tensor::from_fn(&[1, 2, 16, 16], |i| if i % 37 == 0 { 1.0 } else { 0.0 });
    let err = grad_check_sampled(
        |g, v| {
            let p = Bound::from_vars(names.clone(), &v[1..]);
            let logits = net.forward(&p, v[0])?;
            loss(LossKind::SoftIou, logits, g.constant(&target)?)
        },
        &inputs,
        1e-6,
        3,
        11,
    )
    .unwrap();
    assert!(err < 1e-3, "relative error {err}");
}

fn loss_value(kind: LossKind, p_or_logits: &[f64], g: &[f64]) -> f64 {
    let graph = Graph::new();
    let n = p_or_logits.len();
    let a = graph.constant(&Tensor::new(&[n], p_or_logits.to_vec()).unwrap()).unwrap();
    let b = graph.constant(&Tensor::new(&[n], g.to_vec()).unwrap()).unwrap();
    match kind {
        LossKind::SoftIou => soft_iou_loss(a, b, LOSS_EPS).unwrap().item(),
        LossKind::BceDice => bce_dice_loss(a, b, LOSS_EPS).unwrap().item(),
    }
}

#[test]
fn soft_iou_loss_cases() {
    let g: Vec<f64> = (0..400).map(|i| if i < 200 { 1.0 } else { 0.0 }).collect();
    assert!(loss_value(LossKind::SoftIou, &g, &g) < 1e-12);
    // half the pixels flipped
    let p: Vec<f64> = g.iter().enumerate().map(|(i, &v)| if i % 2 == 0 { 1.0 - v } else { v }).collect();
    let l = loss_value(LossKind::SoftIou, &p, &g);
    // direct evaluation: inter 100, union 300
    assert!((l - (1.0 - 101.0 / 301.0)).abs() < 1e-12, "{l}");
    assert!(l > 0.4);
    let empty = vec![0.0; 400];
    assert!(loss_value(LossKind::SoftIou, &vec![1e-9; 400], &empty) < 1e-6);
}

#[test]
fn loss_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let p: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let g: Vec<f64> = (0..64).map(|_| if rng.random_bool(0.2) { 1.0 } else { 0.0 }).collect();
        let l = loss_value(LossKind::SoftIou, &p, &g);
        assert!((0.0..1.0).contains(&l), "{l}");
    }
}

#[test]
fn bce_dice_matches_direct_evaluation() {
    let z = [-2.0, 0.5, 3.0, -0.1];
    let g = [0.0, 1.0, 1.0, 0.0];
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let bce: f64 = z
        .iter()
        .zip(&g)
        .map(|(&z, &g)| -(g * sig(z).ln() + (1.0 - g) * (1.0 - sig(z)).ln()))
        .sum::<f64>()
        / 4.0;
    let inter: f64 = z.iter().zip(&g).map(|(&z, &g)| sig(z) * g).sum();
    let ps: f64 = z.iter().map(|&z| sig(z)).sum();
    let dice = 1.0 - (2.0 * inter + 1.0) / (ps + 2.0 + 1.0);
    assert!((loss_value(LossKind::BceDice, &z, &g) - (bce + dice)).abs() < 1e-12);
}

#[test]
fn small_step_decreases_loss() {
    let cfg = tiny_cfg();
    let (mut store, net) = LVNet::build::<f32>(&cfg, 2).unwrap();
    let x = clip(&[1, 1, 2, 32, 32], 4);
    let target = Tensor::from_fn(&[1, 2, 32, 32], |i| if (i / 32) % 32 == 10 && i % 32 == 12 { 1.0 } else { 0.0 });
    let eval = |store: &mut ParameterStore<f32>, step: bool| -> f32 {
        let g = Graph::new();
        let p = store.bind(&g).unwrap();
        let l = loss(LossKind::SoftIou, net.forward(&p, g.constant(&x).unwrap()).unwrap(), g.constant(&target).unwrap()).unwrap();
        let v = l.item();
        if step {
            let mut grads = g.backward(l).unwrap();
            p.accumulate_grads(&mut grads, store);
        }
        v
    };
    let before = eval(&mut store, true);
    let mut state = AdamState::default();
    adam_step(&mut store, &mut state, &AdamConfig { lr: 1e-5, ..Default::default() }).unwrap();
    let after = eval(&mut store, false);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn frame_order_matters() {
    let (mut store, net) = LVNet::build::<f32>(&tiny_cfg(), 3).unwrap();
    // the temporal bias starts at zero, which leaves attention blind to frame
    // order; any learned value breaks the symmetry
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (name, t) in store.iter_mut() {
        if name.ends_with("rel_bias_temporal") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let a = clip(&[1, 1, 2, 32, 32], 9);
    let frame = 32 * 32;
    let mut swapped = a.data()[frame..].to_vec();
    swapped.extend_from_slice(&a.data()[..frame]);
    let b = Tensor::new(&[1, 1, 2, 32, 32], swapped).unwrap();
    let ya = net.predict(&store, &a).unwrap().logits;
    let yb = net.predict(&store, &b).unwrap().logits;
    // frame 0 of the swapped clip sees the same pixels as frame 1 of the original
    let diff = ya.data()[frame..]
        .iter()
        .zip(&yb.data()[..frame])
        .map(|(u, v)| (u - v).abs())
        .fold(0.0f32, f32::max);
    assert!(diff > 1e-6, "outputs are permutation-equivariant ({diff})");
}
