//! Soft per-pixel and per-centroid precision/recall/F1.
//!
//! Per-pixel scores treat the predicted class probability at each pixel as
//! a fractional detection: with target `t` in {0,1} and prediction `p` in
//! [0,1], `tp = sum(t*p)`, `tn = sum((1-t)*(1-p))`, `fp = sum(p*(1-t))`
//! and `fn = sum(t*(1-p))`. Per-centroid scores reduce each 4-connected
//! component to one representative point and compare classes there.

use rayon::prelude::*;

use crate::labels::{CellClass, LabelMap, CLASS_COUNT};
use crate::net::Network;
use crate::pipeline::{normalize_patch, PatchPair};
use crate::{Error, Result};

/// Fractional confusion totals, accumulated in f64.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SoftConfusion {
    pub tp: f64,
    pub tn: f64,
    pub fp: f64,
    pub fn_: f64,
}

impl SoftConfusion {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Add one plane of target/prediction pairs. Targets are expected in
    /// {0,1} and predictions in [0,1]; both are only assumed finite.
    pub fn accumulate(&mut self, target: &[f32], predicted: &[f32]) -> Result<()> {
        if target.len() != predicted.len() {
            return Err(Error::ShapeMismatch(format!(
                "confusion planes differ in length: {} vs {}",
                target.len(),
                predicted.len()
            )));
        }
        for (&t, &p) in target.iter().zip(predicted) {
            let (t, p) = (f64::from(t), f64::from(p));
            self.tp += t * p;
            self.tn += (1.0 - t) * (1.0 - p);
            self.fp += p * (1.0 - t);
            self.fn_ += t * (1.0 - p);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &SoftConfusion) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> f64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn prf(&self) -> (f64, f64, f64) {
        prf(self.tp, self.fp, self.fn_)
    }
}

/// Precision, recall and F1. A class absent from target and prediction
/// alike (both denominators zero) scores (1, 1, 1): predicting absence
/// correctly is a success. When exactly one denominator is zero the
/// affected score is 0.
pub fn prf(tp: f64, fp: f64, fn_: f64) -> (f64, f64, f64) {
    if tp + fp == 0.0 && tp + fn_ == 0.0 {
        return (1.0, 1.0, 1.0);
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

/// One-vs-rest soft confusions for every class over a single patch.
/// `probs` is a `[C, plane]`-shaped slice stack: channel c at
/// `probs[c * plane .. (c+1) * plane]`.
pub fn soft_confusion_per_class(
    labels: &LabelMap,
    probs: &[f32],
) -> Result<[SoftConfusion; CLASS_COUNT]> {
    let plane = labels.raw().len();
    if probs.len() != CLASS_COUNT * plane {
        return Err(Error::ShapeMismatch(format!(
            "expected {} probability values for {CLASS_COUNT} classes over {plane} pixels, got {}",
            CLASS_COUNT * plane,
            probs.len()
        )));
    }
    let mut out = [SoftConfusion::zero(); CLASS_COUNT];
    let mut target = vec![0.0f32; plane];
    for (c, conf) in out.iter_mut().enumerate() {
        for (t, &cls) in target.iter_mut().zip(labels.raw()) {
            *t = if cls as usize == c { 1.0 } else { 0.0 };
        }
        conf.accumulate(&target, &probs[c * plane..(c + 1) * plane])?;
    }
    Ok(out)
}

/// A 4-connected same-class region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub class: CellClass,
    /// Member pixels in row-major discovery order.
    pub pixels: Vec<(usize, usize)>,
    /// Rounded (half-up) mean of member pixel coordinates. May fall
    /// outside the component for non-convex shapes.
    pub centroid: (usize, usize),
}

/// Find every 4-connected component of every class (background included),
/// in row-major discovery order.
pub fn extract_centroids(labels: &LabelMap) -> Vec<Component> {
    let (w, h) = (labels.width(), labels.height());
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if seen[y0 * w + x0] {
                continue;
            }
            let class = labels.get(x0, y0);
            seen[y0 * w + x0] = true;
            stack.push((x0, y0));
            let mut pixels = Vec::new();
            let (mut sx, mut sy) = (0u64, 0u64);
            while let Some((x, y)) = stack.pop() {
                pixels.push((x, y));
                sx += x as u64;
                sy += y as u64;
                let visit = |nx: usize, ny: usize, seen: &mut Vec<bool>, stack: &mut Vec<(usize, usize)>| {
                    if !seen[ny * w + nx] && labels.get(nx, ny) == class {
                        seen[ny * w + nx] = true;
                        stack.push((nx, ny));
                    }
                };
                if x > 0 {
                    visit(x - 1, y, &mut seen, &mut stack);
                }
                if x + 1 < w {
                    visit(x + 1, y, &mut seen, &mut stack);
                }
                if y > 0 {
                    visit(x, y - 1, &mut seen, &mut stack);
                }
                if y + 1 < h {
                    visit(x, y + 1, &mut seen, &mut stack);
                }
            }
            let n = pixels.len() as f64;
            let centroid = (
                (sx as f64 / n + 0.5).floor() as usize,
                (sy as f64 / n + 0.5).floor() as usize,
            );
            out.push(Component { class, pixels, centroid });
        }
    }
    out
}

impl Component {
    /// The centroid when it lies inside the component, otherwise the
    /// member pixel closest to it (ties break in row-major order).
    pub fn representative(&self) -> (usize, usize) {
        let (cx, cy) = self.centroid;
        if self.pixels.contains(&(cx, cy)) {
            return (cx, cy);
        }
        let mut best = self.pixels[0];
        let mut best_d = u64::MAX;
        let mut ordered: Vec<(usize, usize)> = self.pixels.clone();
        ordered.sort_unstable_by_key(|&(x, y)| (y, x));
        for (x, y) in ordered {
            let dx = x as i64 - cx as i64;
            let dy = y as i64 - cy as i64;
            let d = (dx * dx + dy * dy) as u64;
            if d < best_d {
                best_d = d;
                best = (x, y);
            }
        }
        best
    }
}

/// Hard detection counts at component representatives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CentroidCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl CentroidCounts {
    pub fn merge(&mut self, other: &CentroidCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn prf(&self) -> (f64, f64, f64) {
        prf(self.tp as f64, self.fp as f64, self.fn_ as f64)
    }
}

/// Compare two label maps object-wise. Each ground-truth component scores
/// a true positive when the prediction agrees at its representative
/// point, else a false negative; each predicted component whose
/// representative disagrees with the ground truth scores a false
/// positive.
pub fn centroid_metrics(gt: &LabelMap, pred: &LabelMap) -> Result<[CentroidCounts; CLASS_COUNT]> {
    if gt.width() != pred.width() || gt.height() != pred.height() {
        return Err(Error::ShapeMismatch(format!(
            "label maps differ: {}x{} vs {}x{}",
            gt.width(),
            gt.height(),
            pred.width(),
            pred.height()
        )));
    }
    let mut out = [CentroidCounts::default(); CLASS_COUNT];
    for comp in extract_centroids(gt) {
        let (x, y) = comp.representative();
        if pred.get(x, y) == comp.class {
            out[comp.class.index()].tp += 1;
        } else {
            out[comp.class.index()].fn_ += 1;
        }
    }
    for comp in extract_centroids(pred) {
        let (x, y) = comp.representative();
        if gt.get(x, y) != comp.class {
            out[comp.class.index()].fp += 1;
        }
    }
    Ok(out)
}

/// Scores for one class (or a macro average).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClassReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<(f64, f64, f64)> for ClassReport {
    fn from((precision, recall, f1): (f64, f64, f64)) -> Self {
        ClassReport { precision, recall, f1 }
    }
}

/// Per-class and macro scores under both regimes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_pixel: [ClassReport; CLASS_COUNT],
    pub per_centroid: [ClassReport; CLASS_COUNT],
    pub macro_pixel: ClassReport,
    pub macro_centroid: ClassReport,
}

fn macro_of(reports: &[ClassReport; CLASS_COUNT]) -> ClassReport {
    let n = CLASS_COUNT as f64;
    ClassReport {
        precision: reports.iter().map(|r| r.precision).sum::<f64>() / n,
        recall: reports.iter().map(|r| r.recall).sum::<f64>() / n,
        f1: reports.iter().map(|r| r.f1).sum::<f64>() / n,
    }
}

/// Run the network over the selected patches and score both regimes.
/// With `hard_pixels`, per-pixel scoring uses the argmax indicator
/// instead of the class probability.
pub fn evaluate(
    net: &Network,
    pairs: &[PatchPair],
    indices: &[usize],
    hard_pixels: bool,
) -> Result<EvalReport> {
    if indices.iter().any(|&i| i >= pairs.len()) {
        return Err(Error::Config(format!(
            "evaluation index out of range (dataset holds {})",
            pairs.len()
        )));
    }
    let per_patch: Vec<([SoftConfusion; CLASS_COUNT], [CentroidCounts; CLASS_COUNT])> = indices
        .par_iter()
        .map(|&i| -> Result<_> {
            let pair = &pairs[i];
            let input = normalize_patch(&pair.image);
            let (probs, maps) = net.predict(&input)?;
            let plane = pair.labels.raw().len();
            let soft = if hard_pixels {
                let mut hard = vec![0.0f32; CLASS_COUNT * plane];
                for (p, &cls) in maps[0].raw().iter().enumerate() {
                    hard[cls as usize * plane + p] = 1.0;
                }
                soft_confusion_per_class(&pair.labels, &hard)?
            } else {
                soft_confusion_per_class(&pair.labels, probs.data())?
            };
            let centroid = centroid_metrics(&pair.labels, &maps[0])?;
            Ok((soft, centroid))
        })
        .collect::<Result<_>>()?;

    let mut soft_total = [SoftConfusion::zero(); CLASS_COUNT];
    let mut centroid_total = [CentroidCounts::default(); CLASS_COUNT];
    for (soft, centroid) in &per_patch {
        for c in 0..CLASS_COUNT {
            soft_total[c].merge(&soft[c]);
            centroid_total[c].merge(&centroid[c]);
        }
    }
    let per_pixel: [ClassReport; CLASS_COUNT] =
        std::array::from_fn(|c| soft_total[c].prf().into());
    let per_centroid: [ClassReport; CLASS_COUNT] =
        std::array::from_fn(|c| centroid_total[c].prf().into());
    Ok(EvalReport {
        macro_pixel: macro_of(&per_pixel),
        macro_centroid: macro_of(&per_centroid),
        per_pixel,
        per_centroid,
    })
}
