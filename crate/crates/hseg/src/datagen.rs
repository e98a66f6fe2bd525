//! Synthetic slide generation and intensity-threshold labelling.
//!
//! A slide is four co-registered 16-bit channels: one nuclear stain plus
//! three marker channels (CD20, CD8, CD3). Nuclei are non-overlapping
//! ellipses. On the nuclear channel each class carries a distinct
//! band-limited chromatin texture (different base level, amplitude and
//! spatial scale), so class identity is recoverable from that channel
//! alone. Marker channels are constant over each nucleus at levels that
//! clear the labelling thresholds with at least a 10% margin on both
//! sides, so threshold labels are unambiguous ground truth.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::labels::{CellClass, LabelMap};
use crate::rasters::Raster16;
use crate::{Error, Result};

/// Marker-intensity cutoffs for labelling.
///
/// Precedence: CD20 first, then CD8 (split into high/low CD3 co-expression
/// at `cd3_hi`), then CD3, otherwise background.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Thresholds {
    pub cd20: u16,
    pub cd8: u16,
    pub cd3: u16,
    /// CD3 level above which a CD8-positive cell counts as CD3-high.
    pub cd3_hi: u16,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { cd20: 5000, cd8: 4000, cd3: 2200, cd3_hi: 4400 }
    }
}

/// Geometry and seeding for one synthetic slide.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideSpec {
    pub width: usize,
    pub height: usize,
    /// Nucleus counts for the four positive classes, in class-index order
    /// (CD3, CD8_CD3LO, CD8_CD3HI, CD20).
    pub nuclei_per_class: [usize; 4],
    /// Ellipse semi-axis range in pixels.
    pub radius_range: (f32, f32),
    pub seed: u64,
}

impl Default for SlideSpec {
    fn default() -> Self {
        SlideSpec {
            width: 320,
            height: 320,
            nuclei_per_class: [12, 12, 12, 12],
            radius_range: (6.0, 10.0),
            seed: 0,
        }
    }
}

impl SlideSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.radius_range;
        if !(lo.is_finite() && hi.is_finite()) || lo < 2.0 || hi < lo {
            return Err(Error::Config(format!(
                "radius_range ({lo}, {hi}) must satisfy 2 <= lo <= hi"
            )));
        }
        let margin = (hi.ceil() as usize + PLACEMENT_GAP as usize + 1) * 2;
        if self.width < margin || self.height < margin {
            return Err(Error::Config(format!(
                "slide {}x{} too small for radius up to {hi}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// One placed nucleus: class plus ellipse geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nucleus {
    pub class: CellClass,
    pub cx: f32,
    pub cy: f32,
    /// Semi-axes.
    pub a: f32,
    pub b: f32,
    /// Rotation in radians.
    pub theta: f32,
}

impl Nucleus {
    /// Squared normalised elliptical radius of a pixel centre; <= 1 means
    /// inside.
    pub fn r2(&self, x: f32, y: f32) -> f32 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (sin, cos) = self.theta.sin_cos();
        let u = (dx * cos + dy * sin) / self.a;
        let v = (-dx * sin + dy * cos) / self.b;
        u * u + v * v
    }

    fn bound(&self) -> f32 {
        self.a.max(self.b)
    }
}

/// The four channels of one slide.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelStack {
    pub nuclear: Raster16,
    pub cd20: Raster16,
    pub cd8: Raster16,
    pub cd3: Raster16,
}

impl ChannelStack {
    pub fn new(nuclear: Raster16, cd20: Raster16, cd8: Raster16, cd3: Raster16) -> Result<Self> {
        let (w, h) = (nuclear.width(), nuclear.height());
        for (name, r) in [("cd20", &cd20), ("cd8", &cd8), ("cd3", &cd3)] {
            if r.width() != w || r.height() != h {
                return Err(Error::ShapeMismatch(format!(
                    "channel {name} is {}x{}, nuclear is {w}x{h}",
                    r.width(),
                    r.height()
                )));
            }
        }
        Ok(ChannelStack { nuclear, cd20, cd8, cd3 })
    }

    pub fn width(&self) -> usize {
        self.nuclear.width()
    }

    pub fn height(&self) -> usize {
        self.nuclear.height()
    }
}

/// Band-limited texture parameters for the nuclear channel.
struct ClassTexture {
    base: f32,
    amplitude: f32,
    /// Lattice spacing of the value noise, in pixels.
    scale: f32,
}

/// Textures per positive class, in class-index order. Each class owns a
/// disjoint brightness band (base +- amplitude, edge gaps of 7000) and
/// its own noise scale, so the classes differ both in level and in
/// frequency content. Per-patch normalisation rescales all bands by one
/// patch constant, so the band ordering survives it. Nuclei are painted
/// hard-edged: every labelled pixel shows its own class's band and
/// never another class's, which keeps argmax maps clean inside nuclei;
/// the component-wise metrics depend on that.
const TEXTURES: [ClassTexture; 4] = [
    ClassTexture { base: 16000.0, amplitude: 1500.0, scale: 2.0 },
    ClassTexture { base: 26000.0, amplitude: 1500.0, scale: 5.0 },
    ClassTexture { base: 36000.0, amplitude: 1500.0, scale: 10.0 },
    ClassTexture { base: 46000.0, amplitude: 1500.0, scale: 24.0 },
];

const BACKGROUND: ClassTexture = ClassTexture { base: 3000.0, amplitude: 800.0, scale: 3.0 };

/// Marker levels per class: (cd20, cd8, cd3). Every level sits at least
/// 10% away from the threshold it is compared against.
const MARKER_LEVELS: [(u16, u16, u16); 4] = [
    (800, 800, 2800),  // CD3: cd3 > 2200 * 1.1, cd8 < 4000 * 0.9
    (800, 5200, 2800), // CD8_CD3LO: cd8 high, cd3 < 4400 * 0.9
    (800, 5200, 5200), // CD8_CD3HI: cd8 high, cd3 > 4400 * 1.1
    (6500, 800, 800),  // CD20
];

const MARKER_BACKGROUND: u16 = 800;

/// Minimum clearance between nucleus bounding circles, in pixels.
const PLACEMENT_GAP: f32 = 3.0;

/// Value noise on a per-nucleus random lattice, bilinearly interpolated.
struct ValueNoise {
    lattice: Vec<f32>,
    cols: usize,
    scale: f32,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, extent_x: f32, extent_y: f32, scale: f32) -> Self {
        let cols = (extent_x / scale).ceil() as usize + 2;
        let rows = (extent_y / scale).ceil() as usize + 2;
        let lattice = (0..cols * rows).map(|_| rng.gen::<f32>()).collect();
        ValueNoise { lattice, cols, scale }
    }

    /// Sample at local coordinates (relative to the noise field origin).
    /// Returns a value in [-1, 1].
    fn sample(&self, x: f32, y: f32) -> f32 {
        let fx = x / self.scale;
        let fy = y / self.scale;
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let tx = fx - fx.floor();
        let ty = fy - fy.floor();
        let rows = self.lattice.len() / self.cols;
        let x1 = (x0 + 1).min(self.cols - 1);
        let y1 = (y0 + 1).min(rows - 1);
        let x0 = x0.min(self.cols - 1);
        let y0 = y0.min(rows - 1);
        let v00 = self.lattice[y0 * self.cols + x0];
        let v10 = self.lattice[y0 * self.cols + x1];
        let v01 = self.lattice[y1 * self.cols + x0];
        let v11 = self.lattice[y1 * self.cols + x1];
        let top = v00 + (v10 - v00) * tx;
        let bot = v01 + (v11 - v01) * tx;
        ((top + (bot - top) * ty) - 0.5) * 2.0
    }
}

/// Place nuclei by rejection sampling, then paint all four channels.
pub fn generate_slide(spec: &SlideSpec) -> Result<(ChannelStack, Vec<Nucleus>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut order: Vec<CellClass> = Vec::new();
    for (ci, &count) in spec.nuclei_per_class.iter().enumerate() {
        let class = CellClass::from_index(ci).expect("four positive classes");
        order.extend(std::iter::repeat(class).take(count));
    }
    order.shuffle(&mut rng);

    let (rlo, rhi) = spec.radius_range;
    let mut nuclei: Vec<Nucleus> = Vec::with_capacity(order.len());
    let attempts_per = 500usize;
    for class in order {
        let mut placed = false;
        for _ in 0..attempts_per {
            let a = rng.gen_range(rlo..=rhi);
            let b = rng.gen_range(rlo..=rhi);
            let theta = rng.gen_range(0.0..std::f32::consts::PI);
            let bound = a.max(b) + PLACEMENT_GAP;
            let cx = rng.gen_range(bound..(spec.width as f32 - bound));
            let cy = rng.gen_range(bound..(spec.height as f32 - bound));
            let cand = Nucleus { class, cx, cy, a, b, theta };
            let clear = nuclei.iter().all(|n| {
                let d = ((n.cx - cx).powi(2) + (n.cy - cy).powi(2)).sqrt();
                d > n.bound() + cand.bound() + PLACEMENT_GAP
            });
            if clear {
                nuclei.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            let total: usize = spec.nuclei_per_class.iter().sum();
            let occupied: f32 = nuclei
                .iter()
                .map(|n| std::f32::consts::PI * n.a * n.b)
                .sum::<f32>()
                / (spec.width * spec.height) as f32;
            return Err(Error::Placement(format!(
                "placed {} of {total} nuclei on a {}x{} slide ({:.1}% occupied); \
                 reduce counts or radii",
                nuclei.len(),
                spec.width,
                spec.height,
                occupied * 100.0
            )));
        }
    }

    let mut nuclear = Raster16::filled(spec.width, spec.height, 0);
    let mut cd20 = Raster16::filled(spec.width, spec.height, MARKER_BACKGROUND);
    let mut cd8 = Raster16::filled(spec.width, spec.height, MARKER_BACKGROUND);
    let mut cd3 = Raster16::filled(spec.width, spec.height, MARKER_BACKGROUND);

    let bg_noise = ValueNoise::new(
        &mut rng,
        spec.width as f32,
        spec.height as f32,
        BACKGROUND.scale,
    );
    for y in 0..spec.height {
        for x in 0..spec.width {
            let v = BACKGROUND.base + BACKGROUND.amplitude * bg_noise.sample(x as f32, y as f32);
            nuclear.set(x, y, v.round().clamp(0.0, 65535.0) as u16);
        }
    }

    for nucleus in &nuclei {
        let tex = &TEXTURES[nucleus.class.index()];
        let bound = nucleus.bound();
        // Per-nucleus noise field: every nucleus gets its own phase.
        let noise = ValueNoise::new(&mut rng, 2.0 * bound + 2.0, 2.0 * bound + 2.0, tex.scale);
        let (x0, x1) = clamp_span(nucleus.cx, bound, spec.width);
        let (y0, y1) = clamp_span(nucleus.cy, bound, spec.height);
        let (m20, m8, m3) = MARKER_LEVELS[nucleus.class.index()];
        for y in y0..y1 {
            for x in x0..x1 {
                let (fx, fy) = (x as f32, y as f32);
                let r2 = nucleus.r2(fx, fy);
                if r2 > 1.0 {
                    continue;
                }
                let value = tex.base
                    + tex.amplitude
                        * noise.sample(fx - nucleus.cx + bound + 1.0, fy - nucleus.cy + bound + 1.0);
                nuclear.set(x, y, value.round().clamp(0.0, 65535.0) as u16);
                cd20.set(x, y, m20);
                cd8.set(x, y, m8);
                cd3.set(x, y, m3);
            }
        }
    }

    let stack = ChannelStack::new(nuclear, cd20, cd8, cd3)?;
    Ok((stack, nuclei))
}

fn clamp_span(centre: f32, bound: f32, limit: usize) -> (usize, usize) {
    let lo = (centre - bound - 1.0).floor().max(0.0) as usize;
    let hi = ((centre + bound + 2.0).ceil() as usize).min(limit);
    (lo, hi)
}

/// Label each pixel from its marker intensities. CD20 wins first; then
/// CD8-positive pixels split on the CD3-high cutoff; then CD3; else
/// background.
pub fn threshold_label(stack: &ChannelStack, thresholds: &Thresholds) -> LabelMap {
    let (w, h) = (stack.width(), stack.height());
    let mut labels = LabelMap::filled(w, h, CellClass::Other);
    for y in 0..h {
        for x in 0..w {
            let cd20 = stack.cd20.get(x, y);
            let cd8 = stack.cd8.get(x, y);
            let cd3 = stack.cd3.get(x, y);
            let class = if cd20 > thresholds.cd20 {
                CellClass::Cd20
            } else if cd8 > thresholds.cd8 {
                if cd3 > thresholds.cd3_hi {
                    CellClass::Cd8Cd3Hi
                } else {
                    CellClass::Cd8Cd3Lo
                }
            } else if cd3 > thresholds.cd3 {
                CellClass::Cd3
            } else {
                CellClass::Other
            };
            labels.set(x, y, class);
        }
    }
    labels
}
