//! Pixel-level (IoU, nIoU) and target-level (Pd, Fa) detection metrics.
//!
//! Masks are row-major `H * W` byte slices holding 0 or 1. Targets are
//! 8-connected components; a prediction detects a ground-truth target when
//! their centroids are closer than [`MATCH_DISTANCE`] pixels.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Centroid distance below which a prediction matches a target (strict).
pub const MATCH_DISTANCE: f64 = 3.0;

pub fn default_thresholds() -> Vec<f64> {
    let mut t: Vec<f64> = (1..=19).map(|i| i as f64 * 0.05).collect();
    t.extend([0.99, 0.999]);
    t.reverse();
    t
}

fn check_binary(mask: &[u8], what: &str) -> Result<()> {
    match mask.iter().find(|&&v| v > 1) {
        Some(v) => Err(Error::Validation(format!("{what} mask holds value {v}; expected 0 or 1"))),
        None => Ok(()),
    }
}

fn check_pair(pred: &[u8], gt: &[u8], h: usize, w: usize) -> Result<()> {
    if pred.len() != h * w || gt.len() != h * w {
        return Err(Error::Validation(format!(
            "mask sizes {} and {} do not match {h}x{w}",
            pred.len(),
            gt.len()
        )));
    }
    check_binary(pred, "predicted")?;
    check_binary(gt, "ground-truth")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionTotals {
    pub tp: u64,
    pub t_gt: u64,
    pub p_pred: u64,
}

impl ConfusionTotals {
    pub fn of(pred: &[u8], gt: &[u8]) -> Self {
        let mut c = ConfusionTotals::default();
        for (&p, &g) in pred.iter().zip(gt) {
            c.tp += (p & g) as u64;
            c.t_gt += g as u64;
            c.p_pred += p as u64;
        }
        c
    }

    /// `TP / (T + P - TP)`; 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let union = self.t_gt + self.p_pred - self.tp;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    fn add(&mut self, o: &Self) {
        self.tp += o.tp;
        self.t_gt += o.t_gt;
        self.p_pred += o.p_pred;
    }
}

/// Global IoU and per-frame mean IoU over paired frames.
pub fn pixel_iou(preds: &[&[u8]], gts: &[&[u8]]) -> Result<(f64, f64)> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Validation(format!("{} predicted vs {} ground-truth frames", preds.len(), gts.len())));
    }
    let mut total = ConfusionTotals::default();
    let mut sum = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        if p.len() != g.len() {
            return Err(Error::Validation("frame sizes differ".into()));
        }
        check_binary(p, "predicted")?;
        check_binary(g, "ground-truth")?;
        let c = ConfusionTotals::of(p, g);
        sum += c.iou();
        total.add(&c);
    }
    Ok((total.iou(), sum / preds.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    /// `(y, x)` in raster order.
    pub pixels: Vec<(usize, usize)>,
    /// Unweighted mean `(y, x)`.
    pub centroid: [f64; 2],
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// 8-connected components, ordered by their first pixel in raster order.
pub fn extract_targets(mask: &[u8], h: usize, w: usize) -> Vec<Component> {
    debug_assert_eq!(mask.len(), h * w);
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if mask[i] == 0 {
                continue;
            }
            // already-visited neighbours: W, NW, N, NE
            let mut link = |j: usize| {
                if mask[j] != 0 {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            };
            if x > 0 {
                link(i - 1);
            }
            if y > 0 {
                link(i - w);
                if x > 0 {
                    link(i - w - 1);
                }
                if x + 1 < w {
                    link(i - w + 1);
                }
            }
        }
    }
    let mut slot = vec![usize::MAX; h * w];
    let mut comps: Vec<Vec<(usize, usize)>> = Vec::new();
    for i in 0..h * w {
        if mask[i] == 0 {
            continue;
        }
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = comps.len();
            comps.push(Vec::new());
        }
        comps[slot[r]].push((i / w, i % w));
    }
    comps
        .into_iter()
        .map(|pixels| {
            let n = pixels.len() as f64;
            let cy = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
            let cx = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
            Component {
                pixels,
                centroid: [cy, cx],
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetMatchResult {
    pub n_true: u64,
    pub n_gt: u64,
    pub n_false_pixels: u64,
    pub n_all: u64,
    /// `(gt index, predicted index, centroid distance)`.
    pub pairs: Vec<(usize, usize, f64)>,
}

/// Greedy one-to-one matching in ascending centroid distance.
pub fn match_components(gt: &[Component], pred: &[Component], h: usize, w: usize) -> TargetMatchResult {
    let mut cand = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        for (j, p) in pred.iter().enumerate() {
            let d = (g.centroid[0] - p.centroid[0]).hypot(g.centroid[1] - p.centroid[1]);
            if d < MATCH_DISTANCE {
                cand.push((i, j, d));
            }
        }
    }
    cand.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut pairs = Vec::new();
    for (i, j, d) in cand {
        if !gt_used[i] && !pred_used[j] {
            gt_used[i] = true;
            pred_used[j] = true;
            pairs.push((i, j, d));
        }
    }
    let n_false_pixels = pred
        .iter()
        .zip(&pred_used)
        .filter(|(_, &u)| !u)
        .map(|(p, _)| p.pixels.len() as u64)
        .sum();
    TargetMatchResult {
        n_true: pairs.len() as u64,
        n_gt: gt.len() as u64,
        n_false_pixels,
        n_all: (h * w) as u64,
        pairs,
    }
}

pub fn match_and_count(pred: &[u8], gt: &[u8], h: usize, w: usize) -> Result<TargetMatchResult> {
    check_pair(pred, gt, h, w)?;
    Ok(match_components(
        &extract_targets(gt, h, w),
        &extract_targets(pred, h, w),
        h,
        w,
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTotals {
    pub tp: u64,
    pub t_gt: u64,
    pub p_pred: u64,
    pub n_true: u64,
    pub n_gt: u64,
    pub n_false: u64,
    pub n_all: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou: f64,
    pub niou: f64,
    pub pd: f64,
    /// False-alarm rate in units of 1e-6.
    pub fa: f64,
    pub n_frames: usize,
    pub threshold: f64,
    pub totals: RawTotals,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accumulates frames in any order; every total is a plain sum.
#[derive(Clone, Debug, Default)]
pub struct Evaluator {
    totals: RawTotals,
    niou_sum: f64,
    n_frames: usize,
}

impl Evaluator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_frame(&mut self, pred: &[u8], gt: &[u8], h: usize, w: usize) -> Result<()> {
        let m = match_and_count(pred, gt, h, w)?;
        let c = ConfusionTotals::of(pred, gt);
        let t = &mut self.totals;
        t.tp += c.tp;
        t.t_gt += c.t_gt;
        t.p_pred += c.p_pred;
        t.n_true += m.n_true;
        t.n_gt += m.n_gt;
        t.n_false += m.n_false_pixels;
        t.n_all += m.n_all;
        self.niou_sum += c.iou();
        self.n_frames += 1;
        Ok(())
    }

    pub fn report(&self, threshold: f64) -> MetricReport {
        let t = &self.totals;
        let conf = ConfusionTotals {
            tp: t.tp,
            t_gt: t.t_gt,
            p_pred: t.p_pred,
        };
        MetricReport {
            iou: conf.iou(),
            niou: if self.n_frames == 0 { 0.0 } else { self.niou_sum / self.n_frames as f64 },
            pd: ratio(t.n_true, t.n_gt),
            fa: ratio(t.n_false, t.n_all) * 1e6,
            n_frames: self.n_frames,
            threshold,
            totals: *t,
        }
    }
}

/// Pixels with probability strictly above `threshold`.
pub fn binarize(prob: &[f32], threshold: f64) -> Vec<u8> {
    prob.iter().map(|&p| (p as f64 > threshold) as u8).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub pd: f64,
    /// In units of 1e-6.
    pub fa: f64,
}

/// One `(threshold, Pd, Fa)` row per threshold over all frames.
pub fn roc(probs: &[&[f32]], gts: &[&[u8]], h: usize, w: usize, thresholds: &[f64]) -> Result<Vec<RocPoint>> {
    if probs.len() != gts.len() {
        return Err(Error::Validation(format!("{} probability maps vs {} masks", probs.len(), gts.len())));
    }
    if let Some(v) = probs.iter().flat_map(|p| p.iter()).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!("probability {v} is outside [0, 1]")));
    }
    let gt_components: Vec<Vec<Component>> = gts
        .iter()
        .map(|g| {
            check_binary(g, "ground-truth")?;
            Ok(extract_targets(g, h, w))
        })
        .collect::<Result<_>>()?;
    thresholds
        .iter()
        .map(|&t| {
            let mut tot = TargetMatchResult::default();
            for (p, gc) in probs.iter().zip(&gt_components) {
                let pred = binarize(p, t);
                let m = match_components(gc, &extract_targets(&pred, h, w), h, w);
                tot.n_true += m.n_true;
                tot.n_gt += m.n_gt;
                tot.n_false_pixels += m.n_false_pixels;
                tot.n_all += m.n_all;
            }
            Ok(RocPoint {
                threshold: t,
                pd: ratio(tot.n_true, tot.n_gt),
                fa: ratio(tot.n_false_pixels, tot.n_all) * 1e6,
            })
        })
        .collect()
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("threshold,Pd,Fa\n");
    for p in points {
        writeln!(s, "{},{},{}", p.threshold, p.pd, p.fa).expect("write to string");
    }
    s
}
