//! Patch extraction, normalisation, dataset splits and class statistics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::labels::{LabelMap, CLASS_COUNT};
use crate::rasters::Raster16;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// One image patch with its label crop and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub slide: String,
    /// Top-left corner in slide coordinates.
    pub x: usize,
    pub y: usize,
    pub image: Raster16,
    pub labels: LabelMap,
}

/// Tile a slide into square patches. `overlap` in [0, 1) sets the stride
/// to `round(size * (1 - overlap))`; windows that would cross the right
/// or bottom edge are discarded.
pub fn extract_patches(
    image: &Raster16,
    labels: &LabelMap,
    slide: &str,
    size: usize,
    overlap: f64,
) -> Result<Vec<PatchPair>> {
    if size == 0 {
        return Err(Error::Config("patch size must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap {overlap} must be in [0, 1)")));
    }
    if labels.width() != image.width() || labels.height() != image.height() {
        return Err(Error::ShapeMismatch(format!(
            "label map {}x{} does not match image {}x{}",
            labels.width(),
            labels.height(),
            image.width(),
            image.height()
        )));
    }
    let stride = ((size as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    let mut out = Vec::new();
    if image.width() < size || image.height() < size {
        return Ok(out);
    }
    let nx = (image.width() - size) / stride + 1;
    let ny = (image.height() - size) / stride + 1;
    out.reserve(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            let (x, y) = (ix * stride, iy * stride);
            out.push(PatchPair {
                slide: slide.to_string(),
                x,
                y,
                image: image.crop(x, y, size, size)?,
                labels: labels.crop(x, y, size, size)?,
            });
        }
    }
    Ok(out)
}

/// Z-score a raw patch into a `[1, 1, H, W]` float tensor. Mean and
/// standard deviation accumulate in f64; a constant patch maps to zeros.
pub fn normalize_patch(raw: &Raster16) -> Tensor {
    let n = raw.data().len() as f64;
    let mean = raw.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = raw
        .data()
        .iter()
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    let data: Vec<f32> = if std > 0.0 {
        raw.data().iter().map(|&v| ((f64::from(v) - mean) / std) as f32).collect()
    } else {
        vec![0.0; raw.data().len()]
    };
    Tensor::new(vec![1, 1, raw.height(), raw.width()], data).expect("sized from raster")
}

/// Split proportions. Must be non-negative and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.train, self.val, self.test];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("split ratios {vals:?} must be non-negative")));
        }
        if (vals.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {vals:?} must sum to 1")));
        }
        if self.train <= 0.0 {
            return Err(Error::Config("train ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Index partition of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Random split: shuffle `0..n`, take `floor(n * train)` for training and
/// `floor(n * val)` for validation; the remainder is the test set.
pub fn split_dataset(n: usize, ratios: &SplitRatios, seed: u64) -> Result<DatasetSplit> {
    ratios.validate()?;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let n_train = ((n as f64) * ratios.train).floor() as usize;
    let n_val = ((n as f64) * ratios.val).floor() as usize;
    let val_end = (n_train + n_val).min(n);
    Ok(DatasetSplit {
        train: indices[..n_train].to_vec(),
        val: indices[n_train..val_end].to_vec(),
        test: indices[val_end..].to_vec(),
    })
}

/// Slide-holdout split: every patch of `holdout` becomes test data, the
/// rest shuffle into train/val at `train_ratio : val_ratio`.
pub fn split_holdout(
    slides: &[String],
    holdout: &str,
    ratios: &SplitRatios,
    seed: u64,
) -> Result<DatasetSplit> {
    ratios.validate()?;
    let test: Vec<usize> = (0..slides.len()).filter(|&i| slides[i] == holdout).collect();
    if test.is_empty() {
        return Err(Error::Config(format!("holdout slide {holdout:?} has no patches")));
    }
    let mut rest: Vec<usize> = (0..slides.len()).filter(|&i| slides[i] != holdout).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rest.shuffle(&mut rng);
    let frac = ratios.train / (ratios.train + ratios.val);
    let n_train = ((rest.len() as f64) * frac).floor() as usize;
    Ok(DatasetSplit {
        train: rest[..n_train].to_vec(),
        val: rest[n_train..].to_vec(),
        test,
    })
}

/// Per-class statistics over a patch set.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClassStats {
    /// 4-connected components of the class summed over patches, the
    /// cheap stand-in for a cell count.
    pub count: u64,
    /// Total labelled pixels of the class.
    pub pixels: u64,
    /// Number of patches containing at least one pixel of the class.
    pub presence: u64,
    /// `pixels` as a fraction of every pixel in the set.
    pub coverage: f64,
}

pub fn class_stats(pairs: &[PatchPair]) -> [ClassStats; CLASS_COUNT] {
    let mut stats = [ClassStats::default(); CLASS_COUNT];
    let mut total: u64 = 0;
    for pair in pairs {
        total += pair.labels.raw().len() as u64;
        let mut seen = [false; CLASS_COUNT];
        for &cls in pair.labels.raw() {
            stats[cls as usize].pixels += 1;
            seen[cls as usize] = true;
        }
        for (stat, present) in stats.iter_mut().zip(seen) {
            if present {
                stat.presence += 1;
            }
        }
        for comp in crate::metrics::extract_centroids(&pair.labels) {
            stats[comp.class.index()].count += 1;
        }
    }
    if total > 0 {
        for stat in &mut stats {
            stat.coverage = stat.pixels as f64 / total as f64;
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::CellClass;

    fn flat_image(w: usize, h: usize) -> Raster16 {
        Raster16::new(w, h, (0..w * h).map(|v| (v % 7) as u16 * 100).collect()).unwrap()
    }

    #[test]
    fn half_overlap_tiling_count() {
        let img = flat_image(512, 512);
        let lbl = LabelMap::filled(512, 512, CellClass::Other);
        let patches = extract_patches(&img, &lbl, "s", 256, 0.5).unwrap();
        assert_eq!(patches.len(), 9);
        let corners: Vec<(usize, usize)> = patches.iter().map(|p| (p.x, p.y)).collect();
        assert!(corners.contains(&(0, 0)));
        assert!(corners.contains(&(256, 256)));
        assert!(corners.iter().all(|&(x, y)| x + 256 <= 512 && y + 256 <= 512));
    }

    #[test]
    fn zero_overlap_tiles_without_gaps() {
        let img = flat_image(512, 512);
        let lbl = LabelMap::filled(512, 512, CellClass::Other);
        let patches = extract_patches(&img, &lbl, "s", 256, 0.0).unwrap();
        assert_eq!(patches.len(), 4);
    }

    #[test]
    fn incomplete_edges_are_dropped() {
        let img = flat_image(500, 500);
        let lbl = LabelMap::filled(500, 500, CellClass::Other);
        let patches = extract_patches(&img, &lbl, "s", 256, 0.5).unwrap();
        // stride 128: corners 0 and 128 fit, 256 would overrun.
        assert_eq!(patches.len(), 4);
    }

    #[test]
    fn undersized_slide_yields_nothing() {
        let img = flat_image(100, 100);
        let lbl = LabelMap::filled(100, 100, CellClass::Other);
        assert!(extract_patches(&img, &lbl, "s", 256, 0.5).unwrap().is_empty());
    }

    #[test]
    fn patch_crops_align_with_labels() {
        let img = flat_image(8, 8);
        let mut lbl = LabelMap::filled(8, 8, CellClass::Other);
        lbl.set(5, 6, CellClass::Cd20);
        let patches = extract_patches(&img, &lbl, "s", 4, 0.0).unwrap();
        let bottom_right = patches.iter().find(|p| p.x == 4 && p.y == 4).unwrap();
        assert_eq!(bottom_right.labels.get(1, 2), CellClass::Cd20);
        assert_eq!(bottom_right.image.get(1, 2), img.get(5, 6));
    }

    #[test]
    fn normalize_centres_and_scales() {
        let raw = Raster16::new(2, 2, vec![100, 200, 300, 400]).unwrap();
        let t = normalize_patch(&raw);
        assert_eq!(t.shape(), &[1, 1, 2, 2]);
        let mean: f64 = t.data().iter().map(|&v| f64::from(v)).sum::<f64>() / 4.0;
        let var: f64 = t.data().iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn normalize_constant_patch_is_zero() {
        let raw = Raster16::filled(3, 3, 777);
        let t = normalize_patch(&raw);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paper_scale_split_sizes() {
        let split = split_dataset(7413, &SplitRatios::default(), 0).unwrap();
        assert_eq!(split.train.len(), 5930);
        assert_eq!(split.val.len(), 741);
        assert_eq!(split.test.len(), 742);
    }

    #[test]
    fn split_partitions_everything_once() {
        let split = split_dataset(101, &SplitRatios::default(), 5).unwrap();
        let mut all: Vec<usize> =
            split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_seeded() {
        let a = split_dataset(50, &SplitRatios::default(), 1).unwrap();
        let b = split_dataset(50, &SplitRatios::default(), 1).unwrap();
        let c = split_dataset(50, &SplitRatios::default(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn split_rejects_bad_ratios() {
        assert!(split_dataset(10, &SplitRatios { train: 0.5, val: 0.2, test: 0.2 }, 0).is_err());
        assert!(split_dataset(10, &SplitRatios { train: -0.1, val: 0.6, test: 0.5 }, 0).is_err());
    }

    #[test]
    fn holdout_split_isolates_slide() {
        let slides: Vec<String> = ["a", "a", "b", "b", "b", "c"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let split = split_holdout(&slides, "b", &SplitRatios::default(), 0).unwrap();
        assert_eq!(split.test, vec![2, 3, 4]);
        assert_eq!(split.train.len() + split.val.len(), 3);
        assert!(split.train.iter().chain(&split.val).all(|&i| slides[i] != "b"));
        assert!(split_holdout(&slides, "zzz", &SplitRatios::default(), 0).is_err());
    }

    #[test]
    fn class_stats_counts_pixels_and_presence() {
        let img = flat_image(2, 2);
        let mut l1 = LabelMap::filled(2, 2, CellClass::Other);
        l1.set(0, 0, CellClass::Cd20);
        l1.set(1, 0, CellClass::Cd20);
        let l2 = LabelMap::filled(2, 2, CellClass::Cd3);
        let pairs = vec![
            PatchPair { slide: "s".into(), x: 0, y: 0, image: img.clone(), labels: l1 },
            PatchPair { slide: "s".into(), x: 0, y: 2, image: img, labels: l2 },
        ];
        let stats = class_stats(&pairs);
        assert_eq!(stats[CellClass::Cd20.index()].pixels, 2);
        assert_eq!(stats[CellClass::Cd20.index()].presence, 1);
        assert_eq!(stats[CellClass::Cd20.index()].count, 1);
        assert_eq!(stats[CellClass::Cd3.index()].pixels, 4);
        assert_eq!(stats[CellClass::Cd3.index()].presence, 1);
        assert_eq!(stats[CellClass::Cd3.index()].count, 1);
        assert_eq!(stats[CellClass::Other.index()].pixels, 2);
        assert_eq!(stats[CellClass::Other.index()].count, 1);
        assert!((stats[CellClass::Cd3.index()].coverage - 0.5).abs() < 1e-12);
        let coverage_sum: f64 = stats.iter().map(|s| s.coverage).sum();
        assert!((coverage_sum - 1.0).abs() < 1e-3);
    }

    #[test]
    fn class_stats_empty_dataset_is_all_zeros() {
        let stats = class_stats(&[]);
        for s in stats {
            assert_eq!((s.count, s.pixels, s.presence), (0, 0, 0));
            assert_eq!(s.coverage, 0.0);
        }
    }
}
