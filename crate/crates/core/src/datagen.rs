//! Synthetic infrared sequences with small moving targets, dataset files on
//! disk (binary PGM frames and masks plus a JSON manifest), and clip batching.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numerics::Tensor;

pub const BACKGROUND_BLUR: f64 = 8.0;
pub const BACKGROUND_MEAN: f64 = 0.3;
pub const BACKGROUND_STD: f64 = 0.05;
/// Side of the neighbourhood used for local contrast statistics.
pub const LOCAL_WINDOW: usize = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub frames_per_seq: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of targets per sequence.
    pub n_targets: [usize; 2],
    pub target_sigma: [f64; 2],
    /// Speed range in px/frame.
    pub velocity: [f64; 2],
    pub scr: [f64; 2],
    /// Background translation `(dx, dy)` in px/frame.
    pub background_drift: [f64; 2],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            frames_per_seq: 20,
            height: 128,
            width: 128,
            n_targets: [1, 3],
            target_sigma: [0.7, 1.5],
            velocity: [0.2, 1.0],
            scr: [2.0, 8.0],
            background_drift: [0.0, 0.0],
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], positive: bool) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) || (positive && r[0] <= 0.0) || r[0] < 0.0 {
        return Err(config_err!("{name} range {r:?} is invalid"));
    }
    Ok(())
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_seq == 0 || self.height < LOCAL_WINDOW || self.width < LOCAL_WINDOW {
            return Err(config_err!(
                "need at least one frame and {LOCAL_WINDOW}x{LOCAL_WINDOW} pixels, got {} frames of {}x{}",
                self.frames_per_seq,
                self.height,
                self.width
            ));
        }
        if self.n_targets[0] > self.n_targets[1] {
            return Err(config_err!("n_targets range {:?} is invalid", self.n_targets));
        }
        check_range("target_sigma", self.target_sigma, true)?;
        check_range("velocity", self.velocity, false)?;
        check_range("scr", self.scr, true)?;
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(config_err!("noise_sigma {} is invalid", self.noise_sigma));
        }
        if !self.background_drift.iter().all(|v| v.is_finite()) {
            return Err(config_err!("background_drift {:?} is invalid", self.background_drift));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetTrack {
    /// `(y, x)` at frame 0.
    pub start: [f64; 2],
    /// `(vy, vx)` in px/frame.
    pub velocity: [f64; 2],
    pub sigma: f64,
    pub scr: f64,
    pub amplitude: f64,
    /// Standard deviation of the target-free frame-0 neighbourhood.
    pub sigma_local: f64,
}

impl TargetTrack {
    pub fn center(&self, frame: usize) -> [f64; 2] {
        let k = frame as f64;
        [self.start[0] + k * self.velocity[0], self.start[1] + k * self.velocity[1]]
    }
}

/// One sequence of 8-bit frames and binary masks.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// `n_frames * H * W` gray levels.
    pub frames: Vec<u8>,
    /// `n_frames * H * W` values in {0, 1}.
    pub masks: Vec<u8>,
    /// Generation record; absent for sequences read from disk.
    pub tracks: Option<Vec<TargetTrack>>,
}

impl SequenceSample {
    pub fn n_frames(&self) -> usize {
        self.frames.len() / (self.height * self.width)
    }

    pub fn frame(&self, k: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.frames[k * n..(k + 1) * n]
    }

    pub fn mask(&self, k: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.masks[k * n..(k + 1) * n]
    }
}

/// Periodic separable Gaussian blur.
fn blur_periodic(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let wrap = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * img[y * w + wrap(x as isize + d, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * tmp[wrap(y as isize + d, h) * w + x])
                .sum();
        }
    }
    out
}

fn background<R: Rng>(h: usize, w: usize, rng: &mut R) -> Vec<f64> {
    let noise: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let b = blur_periodic(&noise, h, w, BACKGROUND_BLUR);
    let n = b.len() as f64;
    let mean = b.iter().sum::<f64>() / n;
    let std = (b.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    b.iter().map(|v| BACKGROUND_MEAN + BACKGROUND_STD * (v - mean) / std).collect()
}

/// Bilinear sample with wrap-around at `(y, x)`.
fn sample_wrap(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| {
        let yi = (yy as isize).rem_euclid(h as isize) as usize;
        let xi = (xx as isize).rem_euclid(w as isize) as usize;
        img[yi * w + xi]
    };
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0))
}

/// Mean and standard deviation of the `LOCAL_WINDOW` square around `(cy, cx)`,
/// clipped to the image, skipping pixels for which `skip` returns true.
pub fn local_stats(img: &[f64], h: usize, w: usize, cy: usize, cx: usize, skip: impl Fn(usize, usize) -> bool) -> (f64, f64) {
    let half = LOCAL_WINDOW / 2;
    let mut vals = Vec::with_capacity(LOCAL_WINDOW * LOCAL_WINDOW);
    for y in cy.saturating_sub(half)..(cy + half + 1).min(h) {
        for x in cx.saturating_sub(half)..(cx + half + 1).min(w) {
            if !skip(y, x) {
                vals.push(img[y * w + x]);
            }
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Integer frame-0 coordinate along one axis such that the whole trajectory
/// keeps `margin` px from the border.
fn start_coord<R: Rng>(rng: &mut R, extent: usize, margin: f64, travel: f64) -> Option<f64> {
    let lo = (margin - travel.min(0.0)).ceil();
    let hi = (extent as f64 - 1.0 - margin - travel.max(0.0)).floor();
    (lo <= hi).then(|| rng.random_range(lo as i64..=hi as i64) as f64)
}

/// Generates one sequence. Background, target parameters and sensor noise
/// are all drawn from `spec.seed`.
pub fn synth_sequence(spec: &SynthSpec, id: impl Into<String>) -> Result<SequenceSample> {
    spec.validate()?;
    let (h, w, nf) = (spec.height, spec.width, spec.frames_per_seq);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bg = background(h, w, &mut rng);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| config_err!("noise_sigma: {e}"))?;
    let noise: Vec<f64> = (0..nf * h * w).map(|_| noise.sample(&mut rng)).collect();
    let [dx, dy] = spec.background_drift;
    let mut frames: Vec<f64> = Vec::with_capacity(nf * h * w);
    for k in 0..nf {
        let (oy, ox) = (k as f64 * dy, k as f64 * dx);
        for y in 0..h {
            for x in 0..w {
                let v = if ox == 0.0 && oy == 0.0 {
                    bg[y * w + x]
                } else {
                    sample_wrap(&bg, h, w, y as f64 - oy, x as f64 - ox)
                };
                frames.push(v + noise[(k * h + y) * w + x]);
            }
        }
    }

    let count = rng.random_range(spec.n_targets[0]..=spec.n_targets[1]);
    let mut tracks = Vec::with_capacity(count);
    for _ in 0..count {
        let sigma = uniform(&mut rng, spec.target_sigma);
        let speed = uniform(&mut rng, spec.velocity);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let scr = uniform(&mut rng, spec.scr);
        let velocity = [speed * angle.sin(), speed * angle.cos()];
        let margin = (3.0 * sigma).ceil();
        let travel = (nf - 1) as f64;
        let (Some(sy), Some(sx)) = (
            start_coord(&mut rng, h, margin, travel * velocity[0]),
            start_coord(&mut rng, w, margin, travel * velocity[1]),
        ) else {
            return Err(config_err!(
                "a target moving {speed:.2} px/frame for {nf} frames cannot stay inside {h}x{w}"
            ));
        };
        let (_, sigma_local) = local_stats(&frames[..h * w], h, w, sy as usize, sx as usize, |_, _| false);
        tracks.push(TargetTrack {
            start: [sy, sx],
            velocity,
            sigma,
            scr,
            amplitude: scr * sigma_local,
            sigma_local,
        });
    }

    let mut masks = vec![0u8; nf * h * w];
    for (k, frame) in frames.chunks_mut(h * w).enumerate() {
        let mask = &mut masks[k * h * w..(k + 1) * h * w];
        for t in &tracks {
            let [cy, cx] = t.center(k);
            let reach = (4.0 * t.sigma).ceil() as isize;
            for y in (cy.round() as isize - reach).max(0)..=(cy.round() as isize + reach).min(h as isize - 1) {
                for x in (cx.round() as isize - reach).max(0)..=(cx.round() as isize + reach).min(w as isize - 1) {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let blob = t.amplitude * (-d2 / (2.0 * t.sigma * t.sigma)).exp();
                    let i = y as usize * w + x as usize;
                    frame[i] += blob;
                    if blob >= 0.5 * t.amplitude {
                        mask[i] = 1;
                    }
                }
            }
        }
    }
    let frames = frames.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Ok(SequenceSample {
        id: id.into(),
        height: h,
        width: w,
        frames,
        masks,
        tracks: Some(tracks),
    })
}

// ---- PGM ------------------------------------------------------------------

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a binary (P5) PGM with maxval 255. Returns `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::format(path, msg);
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?.to_string());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (missing P5 magic)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero image extent"));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != width * height {
        return Err(bad(&format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            width * height
        )));
    }
    Ok((width, height, payload.to_vec()))
}

// ---- datasets -------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub n_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    /// Name of the dataset directory; kept relative so trees are relocatable.
    pub root: String,
    pub split: Split,
    pub sequences: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";

fn frame_name(k: usize) -> String {
    format!("{k:03}.pgm")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes every sequence under `root/<id>/{frames,masks}/NNN.pgm`, then the
/// manifest. The manifest is written last, so a failed write leaves none.
pub fn write_dataset(samples: &[SequenceSample], root: &Path, split: Split) -> Result<Manifest> {
    let mut seen = std::collections::BTreeSet::new();
    for s in samples {
        if !seen.insert(&s.id) {
            return Err(Error::Usage(format!("duplicate sequence id {}", s.id)));
        }
    }
    create_dir(root)?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let frames_dir = root.join(&s.id).join("frames");
        let masks_dir = root.join(&s.id).join("masks");
        create_dir(&frames_dir)?;
        create_dir(&masks_dir)?;
        for k in 0..s.n_frames() {
            write_pgm(&frames_dir.join(frame_name(k)), s.width, s.height, s.frame(k))?;
            let mask: Vec<u8> = s.mask(k).iter().map(|&m| if m > 0 { 255 } else { 0 }).collect();
            write_pgm(&masks_dir.join(frame_name(k)), s.width, s.height, &mask)?;
        }
        entries.push(ManifestEntry {
            id: s.id.clone(),
            n_frames: s.n_frames(),
        });
    }
    let manifest = Manifest {
        root: root
            .file_name()
            .map_or_else(|| root.display().to_string(), |n| n.to_string_lossy().into_owned()),
        split,
        sequences: entries,
    };
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

fn read_sequence(root: &Path, entry: &ManifestEntry) -> Result<SequenceSample> {
    let mut frames = Vec::new();
    let mut masks = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for k in 0..entry.n_frames {
        for (dir, out) in [("frames", &mut frames), ("masks", &mut masks)] {
            let path = root.join(&entry.id).join(dir).join(frame_name(k));
            let (w, h, px) = read_pgm(&path)?;
            match dims {
                None => dims = Some((w, h)),
                Some(d) if d != (w, h) => {
                    return Err(Error::format(&path, format!("size {w}x{h} differs from {}x{}", d.0, d.1)))
                }
                _ => {}
            }
            if dir == "masks" {
                if px.iter().any(|&v| v != 0 && v != 255) {
                    return Err(Error::format(&path, "mask values must be 0 or 255"));
                }
                out.extend(px.iter().map(|&v| (v == 255) as u8));
            } else {
                out.extend_from_slice(&px);
            }
        }
    }
    let (width, height) = dims.ok_or_else(|| Error::format(root.join(&entry.id), "sequence has no frames"))?;
    Ok(SequenceSample {
        id: entry.id.clone(),
        height,
        width,
        frames,
        masks,
        tracks: None,
    })
}

/// Reads every sequence listed in `root/manifest.json`.
pub fn read_dataset(root: &Path) -> Result<(Manifest, Vec<SequenceSample>)> {
    let manifest = read_manifest(root)?;
    let samples = manifest
        .sequences
        .iter()
        .map(|e| read_sequence(root, e))
        .collect::<Result<_>>()?;
    Ok((manifest, samples))
}

/// Sequences `seq_000 .. seq_{n-1}` with per-sequence seeds derived from `spec.seed`.
pub fn synth_dataset(spec: &SynthSpec, n: usize, first_index: usize) -> Result<Vec<SequenceSample>> {
    (first_index..first_index + n)
        .map(|i| {
            let s = SynthSpec {
                seed: spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                ..spec.clone()
            };
            synth_sequence(&s, format!("seq_{i:03}"))
        })
        .collect()
}

// ---- clips ----------------------------------------------------------------

/// `T` consecutive frames of one sequence, normalized to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Clip {
    pub sequence: String,
    pub start: usize,
    /// `[1, 1, T, H, W]`.
    pub frames: Tensor<f32>,
    /// `[1, T, H, W]` with values in {0, 1}.
    pub masks: Tensor<f32>,
}

/// Non-overlapping clips of `t` frames; a trailing remainder is dropped.
pub fn clip_batches(seq: &SequenceSample, t: usize) -> Result<Vec<Clip>> {
    let n = seq.n_frames();
    if t == 0 || t > n {
        return Err(Error::Usage(format!("clip length {t} does not fit a {n}-frame sequence {}", seq.id)));
    }
    let rest = n % t;
    if rest > 0 {
        log::warn!("sequence {}: dropping {rest} trailing frame(s) for clip length {t}", seq.id);
    }
    let px = seq.height * seq.width;
    let (h, w) = (seq.height, seq.width);
    (0..n / t)
        .map(|c| {
            let range = c * t * px..(c + 1) * t * px;
            let frames = seq.frames[range.clone()].iter().map(|&v| v as f32 / 255.0).collect();
            let masks = seq.masks[range].iter().map(|&v| v as f32).collect();
            Ok(Clip {
                sequence: seq.id.clone(),
                start: c * t,
                frames: Tensor::new(&[1, 1, t, h, w], frames)?,
                masks: Tensor::new(&[1, t, h, w], masks)?,
            })
        })
        .collect()
}
