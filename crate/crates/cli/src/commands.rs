use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lvnet::datagen::{clip_batches, read_dataset, synth_dataset, write_dataset, Clip, Split, SynthSpec, MANIFEST};
use lvnet::metrics::{default_thresholds, roc, roc_csv, MetricReport};
use lvnet::model::ablation::{self, Axis};
use lvnet::model::{LVNet, LVNetConfig};
use lvnet::trainer::{evaluate, predict_clips, Checkpoint, TrainConfig, Trainer, CHECKPOINT_FILE};
use lvnet::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::{Command, TableFormat};

/// Contents of a `--config` file: model and training sections, both optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: LVNetConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Accepts `{"model": .., "train": ..}` or a bare model config.
    fn parse(text: &str, path: &Path) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        let sectioned = value
            .as_object()
            .is_some_and(|o| o.contains_key("model") || o.contains_key("train"));
        let cfg = if sectioned {
            serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            RunConfig {
                model: serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
                train: TrainConfig::default(),
            }
        };
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                RunConfig::parse(&text, p)
            }
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// `dir` itself when it holds a manifest, else its `split` subdirectory.
fn dataset_dir(dir: &Path, split: Split) -> PathBuf {
    if dir.join(MANIFEST).exists() {
        return dir.to_path_buf();
    }
    dir.join(match split {
        Split::Train => "train",
        Split::Val => "val",
    })
}

fn load_clips(dir: &Path, split: Split, t: usize) -> Result<Vec<Clip>> {
    let root = dataset_dir(dir, split);
    let (_, seqs) = read_dataset(&root)?;
    if seqs.is_empty() {
        return Err(Error::Usage(format!("dataset {} is empty", root.display())));
    }
    let mut clips = Vec::new();
    for s in &seqs {
        clips.extend(clip_batches(s, t)?);
    }
    Ok(clips)
}

fn load_checkpoint(net: &LVNet, path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.config_hash != net.cfg.hash() {
        return Err(Error::Config(format!(
            "checkpoint {} was written for config {}, not {}",
            path.display(),
            ckpt.config_hash,
            net.cfg.hash()
        )));
    }
    Ok(ckpt)
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    config_hash: String,
    epoch: usize,
    #[serde(flatten)]
    report: &'a MetricReport,
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            spec,
            out,
            n_train,
            n_val,
            seed,
        } => synth(spec.as_deref(), &out, n_train, n_val, seed),
        Command::Train {
            config,
            data,
            out,
            seed,
            epochs,
            resume,
        } => train(config.as_deref(), &data, &out, seed, epochs, resume),
        Command::Eval {
            config,
            data,
            checkpoint,
            threshold,
            out,
        } => eval(config.as_deref(), &data, &checkpoint, threshold, out.as_deref()),
        Command::Roc {
            config,
            data,
            checkpoint,
            out,
        } => roc_cmd(config.as_deref(), &data, &checkpoint, out.as_deref()),
        Command::Params { config } => {
            let cfg = RunConfig::load(config.as_deref())?.model;
            let net = LVNet::new(&cfg)?;
            println!("Params: {:.2} M", net.count_params() as f64 / 1e6);
            println!("Config: {}", cfg.hash());
            Ok(())
        }
        Command::Flops { config, height, width } => {
            let cfg = RunConfig::load(config.as_deref())?.model;
            let net = LVNet::new(&cfg)?;
            let flops = net.count_flops(height, width)?;
            println!("FLOPs: {:.2} G", flops as f64 / 1e9);
            println!("Input: T={} {height}x{width}", cfg.clip_len);
            println!("Config: {}", cfg.hash());
            Ok(())
        }
        Command::Ablate {
            axis,
            config,
            data,
            epochs,
            seed,
            out,
            format,
            height,
            width,
        } => ablate(
            axis.parse()?,
            config.as_deref(),
            data.as_deref(),
            epochs,
            seed,
            out.as_deref(),
            format,
            (height, width),
        ),
    }
}

fn synth(spec_path: Option<&Path>, out: &Path, n_train: usize, n_val: usize, seed: Option<u64>) -> Result<()> {
    let mut spec = match spec_path {
        None => SynthSpec::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    if n_train == 0 {
        return Err(Error::Usage("--n-train must be positive".into()));
    }
    for (split, name, n, first) in [(Split::Train, "train", n_train, 0), (Split::Val, "val", n_val, n_train)] {
        if n == 0 {
            continue;
        }
        let samples = synth_dataset(&spec, n, first)?;
        let dir = out.join(name);
        let m = write_dataset(&samples, &dir, split)?;
        let frames: usize = m.sequences.iter().map(|s| s.n_frames).sum();
        println!(
            "{name}: {} sequences, {frames} frames of {}x{} -> {}",
            m.sequences.len(),
            spec.width,
            spec.height,
            dir.display()
        );
    }
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, out: &Path, seed: Option<u64>, epochs: Option<usize>, resume: bool) -> Result<()> {
    let mut run = RunConfig::load(config)?;
    if let Some(s) = seed {
        run.train.seed = s;
    }
    if let Some(e) = epochs {
        run.train.max_epochs = e;
    }
    run.train.validate()?;
    let clips = load_clips(data, Split::Train, run.model.clip_len)?;
    create_dir(out)?;
    write_file(&out.join("config.json"), &serde_json::to_string_pretty(&run).expect("config serializes"))?;

    let (store, net) = LVNet::build::<f32>(&run.model, run.train.seed)?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut trainer = if resume && ckpt_path.exists() {
        let t = Trainer::from_checkpoint(&net, load_checkpoint(&net, &ckpt_path)?, &run.train)?;
        eprintln!("resuming after epoch {}", t.epoch());
        t
    } else {
        Trainer::new(&net, store, &run.train)?
    };
    trainer.fit(&clips, Some(out), |log| {
        eprintln!("epoch {:>4}  loss {:.6}  lr {:.3e}", log.epoch, log.mean_loss, log.lr);
    })?;
    let report = evaluate(&net, &trainer.store, &clips, run.model.threshold)?;
    let text = serde_json::to_string_pretty(&EvalOutput {
        config_hash: run.model.hash(),
        epoch: trainer.epoch(),
        report: &report,
    })
    .expect("report serializes");
    write_file(&out.join("train_report.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn eval(config: Option<&Path>, data: &Path, ckpt: &Path, threshold: Option<f64>, out: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?.model;
    let threshold = threshold.unwrap_or(cfg.threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Usage(format!("threshold {threshold} is outside [0, 1]")));
    }
    let net = LVNet::new(&cfg)?;
    let ckpt = load_checkpoint(&net, ckpt)?;
    let clips = load_clips(data, Split::Val, cfg.clip_len)?;
    let report = evaluate(&net, &ckpt.params, &clips, threshold)?;
    let text = serde_json::to_string_pretty(&EvalOutput {
        config_hash: cfg.hash(),
        epoch: ckpt.epoch,
        report: &report,
    })
    .expect("report serializes");
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join("report.json"), &text)?;
    }
    println!("{text}");
    Ok(())
}

fn roc_cmd(config: Option<&Path>, data: &Path, ckpt: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?.model;
    let net = LVNet::new(&cfg)?;
    let ckpt = load_checkpoint(&net, ckpt)?;
    let clips = load_clips(data, Split::Val, cfg.clip_len)?;
    let probs = predict_clips(&net, &ckpt.params, &clips)?;
    let mut prob_frames: Vec<&[f32]> = Vec::new();
    let mut gt_frames: Vec<Vec<u8>> = Vec::new();
    let s = clips[0].masks.shape();
    let (h, w) = (s[2], s[3]);
    for (c, p) in clips.iter().zip(&probs) {
        prob_frames.extend(p.data().chunks(h * w));
        gt_frames.extend(c.masks.data().chunks(h * w).map(|f| f.iter().map(|&v| v as u8).collect()));
    }
    let gt_refs: Vec<&[u8]> = gt_frames.iter().map(Vec::as_slice).collect();
    let csv = roc_csv(&roc(&prob_frames, &gt_refs, h, w, &default_thresholds())?);
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join("roc.csv"), &csv)?;
    }
    eprintln!("config {}", cfg.hash());
    print!("{csv}");
    Ok(())
}

struct TableRow {
    label: String,
    params: f64,
    gflops: f64,
    metrics: Option<MetricReport>,
    hash: String,
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    axis: Axis,
    config: Option<&Path>,
    data: Option<&Path>,
    epochs: Option<usize>,
    seed: Option<u64>,
    out: Option<&Path>,
    format: TableFormat,
    (height, width): (usize, usize),
) -> Result<()> {
    let mut run = RunConfig::load(config)?;
    if let Some(s) = seed {
        run.train.seed = s;
    }
    if let Some(e) = epochs {
        run.train.max_epochs = e;
    }
    run.train.validate()?;
    if let Some(dir) = out {
        create_dir(dir)?;
    }
    let mut rows = Vec::new();
    for (i, r) in ablation::rows(axis, &run.model)?.into_iter().enumerate() {
        let net = LVNet::new(&r.config)?;
        let metrics = match data {
            None => None,
            Some(d) => {
                eprintln!("training row {}", r.label);
                let train_clips = load_clips(d, Split::Train, r.config.clip_len)?;
                let val_dir = dataset_dir(d, Split::Val);
                let eval_clips = if val_dir.join(MANIFEST).exists() {
                    load_clips(&val_dir, Split::Val, r.config.clip_len)?
                } else {
                    train_clips.clone()
                };
                let (store, _) = LVNet::build::<f32>(&r.config, run.train.seed)?;
                let mut trainer = Trainer::new(&net, store, &run.train)?;
                let row_dir = out.map(|o| o.join(format!("row{i}")));
                trainer.fit(&train_clips, row_dir.as_deref(), |log| {
                    eprintln!("  epoch {:>4}  loss {:.6}", log.epoch, log.mean_loss);
                })?;
                Some(evaluate(&net, &trainer.store, &eval_clips, r.config.threshold)?)
            }
        };
        rows.push(TableRow {
            label: r.label,
            params: net.count_params() as f64 / 1e6,
            gflops: net.count_flops(height, width)? as f64 / 1e9,
            metrics,
            hash: r.config.hash(),
        });
    }
    let table = render_table(axis, &rows, format, (height, width));
    if let Some(dir) = out {
        let name = match format {
            TableFormat::Markdown => "ablation.md",
            TableFormat::Csv => "ablation.csv",
        };
        write_file(&dir.join(name), &table)?;
    }
    print!("{table}");
    Ok(())
}

fn render_table(axis: Axis, rows: &[TableRow], format: TableFormat, (h, w): (usize, usize)) -> String {
    let with_metrics = rows.iter().any(|r| r.metrics.is_some());
    let mut head = vec![axis.name().to_string(), "Params (M)".into(), format!("FLOPs (G, {h}x{w})")];
    if with_metrics {
        head.extend(["IoU", "nIoU", "Pd", "Fa (1e-6)"].map(String::from));
    }
    head.push("config_hash".into());
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut c = vec![r.label.clone(), format!("{:.2}", r.params), format!("{:.2}", r.gflops)];
            if let Some(m) = &r.metrics {
                c.extend([
                    format!("{:.4}", m.iou),
                    format!("{:.4}", m.niou),
                    format!("{:.4}", m.pd),
                    format!("{:.2}", m.fa),
                ]);
            }
            c.push(r.hash.clone());
            c
        })
        .collect();
    let mut s = String::new();
    match format {
        TableFormat::Markdown => {
            writeln!(s, "| {} |", head.join(" | ")).expect("write to string");
            writeln!(s, "|{}", "---|".repeat(head.len())).expect("write to string");
            for c in &cells {
                writeln!(s, "| {} |", c.join(" | ")).expect("write to string");
            }
        }
        TableFormat::Csv => {
            let csv_head: Vec<&str> = if with_metrics {
                vec!["row", "params_m", "gflops", "iou", "niou", "pd", "fa", "config_hash"]
            } else {
                vec!["row", "params_m", "gflops", "config_hash"]
            };
            writeln!(s, "{}", csv_head.join(",")).expect("write to string");
            for c in &cells {
                writeln!(s, "{}", c.join(",")).expect("write to string");
            }
        }
    }
    s
}
