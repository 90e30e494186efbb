use super::*;
use crate::conv_frontend::ConvUNetConfig;
use crate::datagen::{clip_batches, synth_sequence, SynthSpec};
use crate::model::LVNetConfig;
use crate::vst::VstConfig;

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

fn tiny_clips() -> Vec<Clip> {
    let spec = SynthSpec {
        frames_per_seq: 4,
        height: 16,
        width: 16,
        n_targets: [1, 1],
        velocity: [0.2, 0.4],
        seed: 3,
        ..Default::default()
    };
    clip_batches(&synth_sequence(&spec, "seq_000").unwrap(), 2).unwrap()
}

fn flat_schedule(epochs: usize) -> Vec<f64> {
    let cfg = TrainConfig::default();
    let mut s = PlateauState::new(&cfg);
    (0..epochs).map(|_| reduce_on_plateau(&mut s, 1.0, &cfg)).collect()
}

#[test]
fn flat_loss_follows_closed_form() {
    // the first epoch sets the best; every later one counts as bad
    let cfg = TrainConfig::default();
    for (e, lr) in flat_schedule(50).into_iter().enumerate() {
        let k = e / cfg.plateau_patience;
        let want = (cfg.lr0 * cfg.plateau_factor.powi(k as i32)).max(cfg.min_lr);
        assert!((lr - want).abs() <= 1e-12 * want, "epoch {}: {lr} vs {want}", e + 1);
    }
}

#[test]
fn rate_is_clamped_at_floor_and_training_stops() {
    let cfg = TrainConfig::default();
    let mut s = PlateauState::new(&cfg);
    let mut epochs = 0;
    while !s.exhausted(&cfg) {
        reduce_on_plateau(&mut s, 1.0, &cfg);
        epochs += 1;
        assert!(s.lr >= cfg.min_lr);
        assert!(epochs < 100_000);
    }
    assert_eq!(s.lr, cfg.min_lr);
}

#[test]
fn improving_losses_keep_rate() {
    let cfg = TrainConfig::default();
    let mut s = PlateauState::new(&cfg);
    for l in [1.0, 0.9, 0.8] {
        assert_eq!(reduce_on_plateau(&mut s, l, &cfg), cfg.lr0);
    }
    assert_eq!(s.best, 0.8);
}

#[test]
fn one_reduction_after_patience_flat_epochs() {
    let cfg = TrainConfig::default();
    let mut s = PlateauState::new(&cfg);
    reduce_on_plateau(&mut s, 1.0, &cfg);
    for _ in 0..5 {
        reduce_on_plateau(&mut s, 1.0, &cfg);
    }
    assert!((s.lr - cfg.lr0 * 0.9).abs() < 1e-18);
}

#[test]
fn config_rejects_bad_factor() {
    let bad = TrainConfig {
        plateau_factor: 1.0,
        ..Default::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = TrainConfig {
        min_lr: 1.0,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn epoch_runs_and_reports_finite_loss() {
    let (store, net) = LVNet::build::<f32>(&tiny_cfg(), 0).unwrap();
    let mut t = Trainer::new(&net, store, &TrainConfig::default()).unwrap();
    let log = t.run_epoch(&tiny_clips()).unwrap();
    assert_eq!(log.epoch, 1);
    assert!(log.mean_loss.is_finite() && log.mean_loss > 0.0 && log.mean_loss <= 1.0);
    assert_eq!(t.adam.t, 2);
}

#[test]
fn checkpoint_bytes_round_trip() {
    let (store, net) = LVNet::build::<f32>(&tiny_cfg(), 0).unwrap();
    let mut t = Trainer::new(&net, store, &TrainConfig::default()).unwrap();
    t.run_epoch(&tiny_clips()).unwrap();
    let ck = t.checkpoint();
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.adam, ck.adam);
    assert_eq!(back.plateau, ck.plateau);
    for (name, p) in ck.params.iter() {
        assert_eq!(back.params.get(name).unwrap().data(), p.data(), "{name}");
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let (store, net) = LVNet::build::<f32>(&tiny_cfg(), 0).unwrap();
    let t = Trainer::new(&net, store, &TrainConfig::default()).unwrap();
    let bytes = t.checkpoint().to_bytes();
    let p = Path::new("x.ckpt");
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad, p).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra, p).is_err());
}

#[test]
fn resume_is_bit_exact() {
    let clips = tiny_clips();
    let cfg = TrainConfig {
        lr0: 1e-3,
        seed: 5,
        ..Default::default()
    };
    let (store, net) = LVNet::build::<f32>(&tiny_cfg(), 1).unwrap();
    let mut straight = Trainer::new(&net, store.clone(), &cfg).unwrap();
    for _ in 0..4 {
        straight.run_epoch(&clips).unwrap();
    }

    let mut first = Trainer::new(&net, store, &cfg).unwrap();
    for _ in 0..2 {
        first.run_epoch(&clips).unwrap();
    }
    let bytes = first.checkpoint().to_bytes();
    drop(first);
    let ck = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
    let mut resumed = Trainer::from_checkpoint(&net, ck, &cfg).unwrap();
    for _ in 0..2 {
        resumed.run_epoch(&clips).unwrap();
    }
    assert_eq!(resumed.history, straight.history);
    for (name, p) in straight.store.iter() {
        assert_eq!(resumed.store.get(name).unwrap().data(), p.data(), "{name}");
    }
}

#[test]
fn checkpoint_from_other_config_is_refused() {
    let (store, net) = LVNet::build::<f32>(&tiny_cfg(), 0).unwrap();
    let ck = Trainer::new(&net, store, &TrainConfig::default()).unwrap().checkpoint();
    let mut other = tiny_cfg();
    other.vst.embed_dim = 16;
    let net2 = LVNet::new(&other).unwrap();
    assert!(Trainer::from_checkpoint(&net2, ck, &TrainConfig::default()).is_err());
}

#[test]
fn fit_writes_log_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (store, net) = LVNet::build::<f32>(&tiny_cfg(), 0).unwrap();
    let cfg = TrainConfig {
        max_epochs: 2,
        ..Default::default()
    };
    let mut t = Trainer::new(&net, store, &cfg).unwrap();
    let mut seen = 0;
    t.fit(&tiny_clips(), Some(dir.path()), |_| seen += 1).unwrap();
    assert_eq!(seen, 2);
    let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("epoch,mean_loss,lr\n"));
    assert_eq!(Checkpoint::load(&checkpoint_path(dir.path())).unwrap().epoch, 2);
}

#[test]
fn evaluation_is_deterministic_and_respects_threshold() {
    let (store, net) = LVNet::build::<f32>(&tiny_cfg(), 0).unwrap();
    let clips = tiny_clips();
    let a = evaluate(&net, &store, &clips, 0.5).unwrap();
    let b = evaluate(&net, &store, &clips, 0.5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n_frames, 4);
    let top = evaluate(&net, &store, &clips, 1.0).unwrap();
    assert_eq!(top.pd, 0.0);
    assert_eq!(top.totals.p_pred, 0);
}
