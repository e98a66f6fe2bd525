//! Model interrogation: per-class input optimisation and hierarchical
//! perturbation saliency.
//!
//! Input optimisation asks "what image maximally activates each positive
//! class in its own quadrant": a four-quadrant mask assigns one class per
//! quadrant and a loss rewards in-quadrant probability mass, penalises
//! out-of-quadrant mass, and penalises imbalance between the four class
//! means. Saliency asks "which image regions support this prediction":
//! regions are faded to zero and the drop in total class probability is
//! credited to their pixels, refining coarse regions hierarchically.

use rayon::prelude::*;

use crate::labels::CellClass;
use crate::net::Network;
use crate::pipeline::PatchPair;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Number of quadrant-assigned classes.
pub const QUADRANT_CLASSES: usize = 4;

/// Assigns each positive class one quadrant of a `d x d` image:
/// class 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadrantMask {
    d: usize,
}

impl QuadrantMask {
    pub fn new(d: usize) -> Result<Self> {
        if d < 2 || d % 2 != 0 {
            return Err(Error::Config(format!("quadrant mask needs an even side >= 2, got {d}")));
        }
        Ok(QuadrantMask { d })
    }

    pub fn side(&self) -> usize {
        self.d
    }

    /// Top-left corner of the quadrant owned by `class_index`.
    pub fn quadrant_origin(&self, class_index: usize) -> (usize, usize) {
        let half = self.d / 2;
        match class_index {
            0 => (0, 0),
            1 => (half, 0),
            2 => (0, half),
            _ => (half, half),
        }
    }

    pub fn contains(&self, class_index: usize, x: usize, y: usize) -> bool {
        let (ox, oy) = self.quadrant_origin(class_index);
        let half = self.d / 2;
        x >= ox && x < ox + half && y >= oy && y < oy + half
    }

    /// The mask plane for one class: 1 inside its quadrant, 0 elsewhere.
    pub fn mask_plane(&self, class_index: usize) -> Vec<f32> {
        let mut plane = vec![0.0f32; self.d * self.d];
        for y in 0..self.d {
            for x in 0..self.d {
                if self.contains(class_index, x, y) {
                    plane[y * self.d + x] = 1.0;
                }
            }
        }
        plane
    }
}

/// Quadrant loss over class responses `rho` of shape `[1, 4, d, d]`:
///
/// `(1 / (d^2 * C)) * sum_c sum_xy (relu(rho * |mu - 1|) - mu * rho)
///  + variance(per-class spatial means of rho)`
///
/// where `mu` is the class's quadrant indicator and the variance is the
/// population variance over the four means. Minimising concentrates each
/// class's response in its own quadrant at equal strength.
pub fn quadrant_loss(tape: &mut Tape, rho: Var, mask: &QuadrantMask) -> Result<Var> {
    let shape = tape.shape(rho).to_vec();
    let d = mask.side();
    if shape != [1, QUADRANT_CLASSES, d, d] {
        return Err(Error::ShapeMismatch(format!(
            "quadrant loss expects shape [1, {QUADRANT_CLASSES}, {d}, {d}], got {shape:?}"
        )));
    }
    let plane = d * d;
    let mut inside = Vec::with_capacity(QUADRANT_CLASSES * plane);
    let mut outside = Vec::with_capacity(QUADRANT_CLASSES * plane);
    for c in 0..QUADRANT_CLASSES {
        let mu = mask.mask_plane(c);
        inside.extend_from_slice(&mu);
        outside.extend(mu.iter().map(|&m| 1.0 - m));
    }
    let shape4 = vec![1, QUADRANT_CLASSES, d, d];
    let inside = tape.constant(&Tensor::new(shape4.clone(), inside)?);
    let outside = tape.constant(&Tensor::new(shape4, outside)?);

    let leak = tape.mul(rho, outside)?;
    let leak = tape.relu(leak);
    let leak_sum = tape.sum_all(leak);
    let captured = tape.mul(rho, inside)?;
    let captured_sum = tape.sum_all(captured);
    let main = tape.sub(leak_sum, captured_sum)?;
    let scale = tape.constant(&Tensor::scalar(1.0 / (plane * QUADRANT_CLASSES) as f32));
    let main = tape.mul(main, scale)?;

    let means = tape.channel_mean(rho)?;
    let spread = tape.variance(means)?;
    tape.add(main, spread)
}

/// Pixel-wise mean of the normalised training patches, as a starting
/// point for input optimisation. All selected patches must share one
/// size.
pub fn mean_training_image(pairs: &[PatchPair], indices: &[usize]) -> Result<Tensor> {
    if indices.is_empty() {
        return Err(Error::Config("mean image needs at least one patch".into()));
    }
    let first = &pairs[indices[0]];
    let (w, h) = (first.image.width(), first.image.height());
    let mut acc = vec![0.0f64; w * h];
    for &i in indices {
        let pair = pairs.get(i).ok_or_else(|| {
            Error::Config(format!("mean image index {i} out of range ({} patches)", pairs.len()))
        })?;
        if pair.image.width() != w || pair.image.height() != h {
            return Err(Error::ShapeMismatch(format!(
                "mean image patch {i} is {}x{}, expected {w}x{h}",
                pair.image.width(),
                pair.image.height()
            )));
        }
        let norm = crate::pipeline::normalize_patch(&pair.image);
        for (a, &v) in acc.iter_mut().zip(norm.data()) {
            *a += f64::from(v);
        }
    }
    let n = indices.len() as f64;
    let data: Vec<f32> = acc.iter().map(|&v| (v / n) as f32).collect();
    Tensor::new(vec![1, 1, h, w], data)
}

/// Which network response the quadrant loss sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizeTarget {
    /// Softmax over all classes, restricted to the positive four.
    #[default]
    Softmax,
    /// Raw logits of the positive four classes.
    Logits,
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizeSettings {
    pub steps: usize,
    pub lr: f32,
    pub target: OptimizeTarget,
}

impl Default for OptimizeSettings {
    fn default() -> Self {
        OptimizeSettings { steps: 1000, lr: 1.0, target: OptimizeTarget::Softmax }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub image: Tensor,
    pub initial_loss: f32,
    pub final_loss: f32,
    /// Loss after each step, `steps` entries.
    pub curve: Vec<f32>,
}

fn class_response(
    tape: &mut Tape,
    net: &Network,
    input: Var,
    target: OptimizeTarget,
) -> Result<Var> {
    let pass = net.forward_on(tape, input, false)?;
    match target {
        OptimizeTarget::Softmax => {
            let probs = tape.softmax_channels(pass.logits)?;
            tape.slice_channels(probs, 0, QUADRANT_CLASSES)
        }
        OptimizeTarget::Logits => tape.slice_channels(pass.logits, 0, QUADRANT_CLASSES),
    }
}

/// Gradient-descend the input image under the quadrant loss, holding the
/// network fixed. `start` must be `[1, 1, d, d]` with `d` compatible with
/// the network's pooling depth.
pub fn optimize_input(
    net: &Network,
    start: &Tensor,
    settings: &OptimizeSettings,
) -> Result<OptimizeOutcome> {
    if settings.steps == 0 {
        return Err(Error::Config("optimisation needs at least one step".into()));
    }
    if !(settings.lr.is_finite() && settings.lr > 0.0) {
        return Err(Error::Config(format!("learning rate {} must be positive", settings.lr)));
    }
    let (n, c, h, w) = start.dims4()?;
    if n != 1 || c != 1 || h != w {
        return Err(Error::ShapeMismatch(format!(
            "optimisation image must be [1, 1, d, d], got [{n}, {c}, {h}, {w}]"
        )));
    }
    let mask = QuadrantMask::new(h)?;
    let mut image = start.clone();
    let mut initial_loss = 0.0f32;
    let mut curve = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let mut tape = Tape::new();
        let x = tape.leaf(&image, true);
        let rho = class_response(&mut tape, net, x, settings.target)?;
        let loss = quadrant_loss(&mut tape, rho, &mask)?;
        let loss_value = tape.data(loss)[0];
        if step == 0 {
            initial_loss = loss_value;
        }
        tape.backward(loss)?;
        let grad = tape.grad(x).expect("input is tracked");
        for (p, &g) in image.data_mut().iter_mut().zip(grad) {
            *p -= settings.lr * g;
        }
        // Loss after the step, so the curve reflects the returned image.
        let mut check = Tape::new();
        let x2 = check.leaf(&image, false);
        let rho2 = class_response(&mut check, net, x2, settings.target)?;
        let loss2 = quadrant_loss(&mut check, rho2, &mask)?;
        curve.push(check.data(loss2)[0]);
    }
    let final_loss = *curve.last().expect("steps >= 1");
    Ok(OptimizeOutcome { image, initial_loss, final_loss, curve })
}

/// Mean response of each quadrant class over its own quadrant.
pub fn quadrant_response(
    net: &Network,
    image: &Tensor,
    target: OptimizeTarget,
) -> Result<[f64; QUADRANT_CLASSES]> {
    let (_, _, h, w) = image.dims4()?;
    if h != w {
        return Err(Error::ShapeMismatch(format!("quadrant response needs a square image, got {h}x{w}")));
    }
    let mask = QuadrantMask::new(h)?;
    let mut tape = Tape::new();
    let x = tape.leaf(image, false);
    let rho = class_response(&mut tape, net, x, target)?;
    let data = tape.data(rho);
    let plane = h * w;
    let mut out = [0.0f64; QUADRANT_CLASSES];
    for (c, slot) in out.iter_mut().enumerate() {
        let mu = mask.mask_plane(c);
        let sum: f64 = data[c * plane..(c + 1) * plane]
            .iter()
            .zip(&mu)
            .filter(|(_, &m)| m > 0.0)
            .map(|(&v, _)| f64::from(v))
            .sum();
        *slot = sum / (plane / 4) as f64;
    }
    Ok(out)
}

/// When to refine a saliency region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThresholdPolicy {
    /// Refine regions whose contribution reaches the mean contribution of
    /// their level.
    #[default]
    LevelMean,
    /// Refine every region (exhaustive within the depth budget).
    None,
}

#[derive(Debug, Clone, Copy)]
pub struct SaliencySettings {
    /// Stop refining once a region's longest side is at most this.
    pub min_cell: usize,
    pub threshold: ThresholdPolicy,
}

impl Default for SaliencySettings {
    fn default() -> Self {
        SaliencySettings { min_cell: 4, threshold: ThresholdPolicy::LevelMean }
    }
}

/// Additive multi-scale attribution map.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    /// Row-major accumulated contributions, non-negative.
    pub values: Vec<f32>,
    /// Number of refinement levels actually processed.
    pub levels: usize,
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

impl Cell {
    fn split(&self) -> Vec<Cell> {
        let w0 = self.w.div_ceil(2);
        let h0 = self.h.div_ceil(2);
        let mut out = Vec::with_capacity(4);
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let x = self.x + dx * w0;
            let y = self.y + dy * h0;
            let w = if dx == 0 { w0 } else { self.w - w0 };
            let h = if dy == 0 { h0 } else { self.h - h0 };
            if w > 0 && h > 0 {
                out.push(Cell { x, y, w, h });
            }
        }
        out
    }
}

/// Total probability mass the network assigns to `class` over the image.
pub fn class_mass(net: &Network, input: &Tensor, class: CellClass) -> Result<f64> {
    let (probs, _) = net.predict(input)?;
    let (_, c, h, w) = probs.dims4()?;
    if class.index() >= c {
        return Err(Error::InvalidClass(class.index() as u8));
    }
    let plane = h * w;
    Ok(probs.data()[class.index() * plane..(class.index() + 1) * plane]
        .iter()
        .map(|&v| f64::from(v))
        .sum())
}

fn faded(input: &Tensor, cell: &Cell, width: usize) -> Tensor {
    let mut out = input.clone();
    for y in cell.y..cell.y + cell.h {
        let row = y * width + cell.x;
        out.data_mut()[row..row + cell.w].fill(0.0);
    }
    out
}

/// Hierarchical perturbation saliency for one class. Starting from four
/// quadrant-sized regions, each region is faded to zero and the drop in
/// the class's total probability mass is spread uniformly over the
/// region's pixels (contribution density, so a level's total credit
/// equals its measured drop regardless of cell size); regions passing
/// the refinement policy split 2x2 and recurse until `min_cell`.
pub fn hipe_saliency(
    net: &Network,
    input: &Tensor,
    class: CellClass,
    settings: &SaliencySettings,
) -> Result<SaliencyMap> {
    if settings.min_cell == 0 {
        return Err(Error::Config("min_cell must be >= 1".into()));
    }
    let (n, c, h, w) = input.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::ShapeMismatch(format!(
            "saliency input must be [1, 1, H, W], got [{n}, {c}, {h}, {w}]"
        )));
    }
    let base = class_mass(net, input, class)?;
    let mut values = vec![0.0f32; h * w];
    let root = Cell { x: 0, y: 0, w, h };
    let mut frontier: Vec<Cell> = root.split();
    let mut levels = 0usize;
    while !frontier.is_empty() {
        levels += 1;
        let contributions: Vec<f32> = frontier
            .par_iter()
            .map(|cell| -> Result<f32> {
                let perturbed = faded(input, cell, w);
                let mass = class_mass(net, &perturbed, class)?;
                Ok((base - mass).max(0.0) as f32)
            })
            .collect::<Result<_>>()?;
        for (cell, &contrib) in frontier.iter().zip(&contributions) {
            if contrib > 0.0 {
                let density = contrib / (cell.w * cell.h) as f32;
                for y in cell.y..cell.y + cell.h {
                    let row = y * w + cell.x;
                    for v in &mut values[row..row + cell.w] {
                        *v += density;
                    }
                }
            }
        }
        let cutoff = match settings.threshold {
            ThresholdPolicy::LevelMean => {
                contributions.iter().map(|&v| f64::from(v)).sum::<f64>()
                    / contributions.len() as f64
            }
            ThresholdPolicy::None => f64::NEG_INFINITY,
        };
        // Cells at or below min_cell are leaves: scored above, never
        // split, so the frontier drains and the loop terminates.
        frontier = frontier
            .iter()
            .zip(&contributions)
            .filter(|(cell, &contrib)| {
                cell.w.max(cell.h) > settings.min_cell && f64::from(contrib) >= cutoff
            })
            .flat_map(|(cell, _)| cell.split())
            .collect();
    }
    Ok(SaliencyMap { width: w, height: h, values, levels })
}

/// Flat single-scale occlusion: fade each cell of a `grid x grid`
/// partition and credit the mass drop to its pixels as a uniform
/// density. Used as the reference saliency for validating the
/// hierarchical version.
pub fn exhaustive_occlusion(
    net: &Network,
    input: &Tensor,
    class: CellClass,
    grid: usize,
) -> Result<SaliencyMap> {
    if grid == 0 {
        return Err(Error::Config("occlusion grid must be >= 1".into()));
    }
    let (n, c, h, w) = input.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::ShapeMismatch(format!(
            "occlusion input must be [1, 1, H, W], got [{n}, {c}, {h}, {w}]"
        )));
    }
    if w % grid != 0 || h % grid != 0 {
        return Err(Error::Config(format!(
            "occlusion grid {grid} must divide image {w}x{h}"
        )));
    }
    let base = class_mass(net, input, class)?;
    let (cw, ch) = (w / grid, h / grid);
    let cells: Vec<Cell> = (0..grid * grid)
        .map(|i| Cell { x: (i % grid) * cw, y: (i / grid) * ch, w: cw, h: ch })
        .collect();
    let contributions: Vec<f32> = cells
        .par_iter()
        .map(|cell| -> Result<f32> {
            let perturbed = faded(input, cell, w);
            let mass = class_mass(net, &perturbed, class)?;
            Ok((base - mass).max(0.0) as f32)
        })
        .collect::<Result<_>>()?;
    let mut values = vec![0.0f32; h * w];
    for (cell, &contrib) in cells.iter().zip(&contributions) {
        let density = contrib / (cell.w * cell.h) as f32;
        for y in cell.y..cell.y + cell.h {
            let row = y * w + cell.x;
            for v in &mut values[row..row + cell.w] {
                *v = density;
            }
        }
    }
    Ok(SaliencyMap { width: w, height: h, values, levels: 1 })
}
