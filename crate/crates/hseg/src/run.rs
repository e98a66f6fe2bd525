//! The four pipeline stages behind the CLI: generate, train, eval,
//! explain. Each stage reads and writes the dataset/output directories
//! named in the run configuration, so stages can run in separate
//! processes.

use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::{EvalSplit, RunConfig, SplitMode};
use crate::datagen::{generate_slide, threshold_label, SlideSpec};
use crate::dataset;
use crate::explain::{
    hipe_saliency, mean_training_image, optimize_input, quadrant_response, OptimizeSettings,
    SaliencySettings,
};
use crate::labels::{CellClass, CLASS_COUNT};
use crate::metrics::{evaluate, EvalReport};
use crate::net::{Network, NetworkConfig};
use crate::optim::AdamW;
use crate::pipeline::{
    class_stats, extract_patches, split_dataset, split_holdout, ClassStats, DatasetSplit,
    PatchPair,
};
use crate::rasters::write_png_scaled;
use crate::train::{fit, TrainOutcome, TrainSettings};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub slides: usize,
    pub patches: usize,
    pub stats: [ClassStats; CLASS_COUNT],
    pub stats_file: PathBuf,
}

/// Build the synthetic dataset: slides, labels, patches and a class
/// statistics table.
pub fn run_generate(cfg: &RunConfig) -> Result<GenerateSummary> {
    cfg.validate()?;
    let mut pairs: Vec<PatchPair> = Vec::new();
    for s in 0..cfg.slides {
        let id = format!("s{s}");
        let spec = SlideSpec {
            width: cfg.slide_width,
            height: cfg.slide_height,
            nuclei_per_class: cfg.nuclei_per_class,
            radius_range: (cfg.radius_min, cfg.radius_max),
            seed: cfg.seed.wrapping_add(s as u64),
        };
        let (stack, _) = generate_slide(&spec)?;
        dataset::save_slide(&cfg.data, &id, &stack)?;
        let labels = threshold_label(&stack, &cfg.thresholds);
        let slide_pairs =
            extract_patches(&stack.nuclear, &labels, &id, cfg.patch_size, cfg.overlap)?;
        println!("generate: slide {id} -> {} patches", slide_pairs.len());
        pairs.extend(slide_pairs);
    }
    if pairs.is_empty() {
        return Err(Error::Config(format!(
            "no patches: slides {}x{} are smaller than patch-size {}",
            cfg.slide_width, cfg.slide_height, cfg.patch_size
        )));
    }
    dataset::save_patches(&cfg.data, &pairs)?;
    let stats = class_stats(&pairs);
    let stats_file = cfg.data.join("stats.csv");
    let mut csv = String::from("class,count,pixels,presence,coverage\n");
    for class in CellClass::ALL {
        let s = stats[class.index()];
        csv.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            class.name(),
            s.count,
            s.pixels,
            s.presence,
            s.coverage
        ));
    }
    std::fs::write(&stats_file, csv)?;
    println!("generate: {} patches total, stats in {}", pairs.len(), stats_file.display());
    Ok(GenerateSummary { slides: cfg.slides, patches: pairs.len(), stats, stats_file })
}

fn split_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("split.txt")
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("model.ckpt")
}

pub fn write_split(path: &Path, split: &DatasetSplit) -> Result<()> {
    let mut text = String::new();
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        text.push_str(name);
        for &i in part.iter() {
            text.push_str(&format!(" {i}"));
        }
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_split(path: &Path) -> Result<DatasetSplit> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!(
            "cannot read split {}: {e} (run the train stage first?)",
            path.display()
        ))
    })?;
    let mut parts: [Option<Vec<usize>>; 3] = [None, None, None];
    for (i, raw) in text.lines().enumerate() {
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let name = fields.next().expect("non-empty line");
        let indices: Vec<usize> = fields
            .map(|v| {
                v.parse().map_err(|_| {
                    Error::Format(format!("split line {}: bad index {v:?}", i + 1))
                })
            })
            .collect::<Result<_>>()?;
        let slot = match name {
            "train" => 0,
            "val" => 1,
            "test" => 2,
            _ => {
                return Err(Error::Format(format!(
                    "split line {}: unknown part {name:?}",
                    i + 1
                )))
            }
        };
        if parts[slot].replace(indices).is_some() {
            return Err(Error::Format(format!("split line {}: duplicate part {name:?}", i + 1)));
        }
    }
    match parts {
        [Some(train), Some(val), Some(test)] => Ok(DatasetSplit { train, val, test }),
        _ => Err(Error::Format("split file must list train, val and test".into())),
    }
}

fn make_split(cfg: &RunConfig, pairs: &[PatchPair]) -> Result<DatasetSplit> {
    match &cfg.split {
        SplitMode::Random => split_dataset(pairs.len(), &cfg.ratios, cfg.seed),
        SplitMode::Holdout(id) => {
            let slides: Vec<String> = pairs.iter().map(|p| p.slide.clone()).collect();
            split_holdout(&slides, id, &cfg.ratios, cfg.seed)
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub outcome: TrainOutcome,
    pub checkpoint: PathBuf,
    pub split_file: PathBuf,
    pub log_file: PathBuf,
}

/// Split the dataset, train the network, and write the checkpoint, the
/// split assignment and a per-epoch loss log.
pub fn run_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let pairs = dataset::load_patches(&cfg.data)?;
    let split = make_split(cfg, &pairs)?;
    std::fs::create_dir_all(&cfg.out)?;
    let split_file = split_path(cfg);
    write_split(&split_file, &split)?;
    println!(
        "train: {} train / {} val / {} test patches",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );

    let mut net = Network::new(NetworkConfig {
        input_channels: 1,
        classes: CLASS_COUNT,
        widths: cfg.widths.clone(),
        seed: cfg.seed,
    })?;
    let settings = TrainSettings {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        optimizer: AdamW { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamW::default() },
        seed: cfg.seed,
    };
    let epochs = cfg.epochs;
    let outcome = fit(&mut net, &pairs, &split.train, &split.val, &settings, |log| {
        println!(
            "train: epoch {}/{} train_loss {:.4} val_loss {:.4}",
            log.epoch + 1,
            epochs,
            log.train_loss,
            log.val_loss
        );
    })?;

    let log_file = cfg.out.join("train_log.csv");
    let mut csv = String::from("epoch,train_loss,val_loss\n");
    for entry in &outcome.log {
        csv.push_str(&format!("{},{:.6},{:.6}\n", entry.epoch, entry.train_loss, entry.val_loss));
    }
    std::fs::write(&log_file, csv)?;

    let ckpt = checkpoint_path(cfg);
    checkpoint::save(&ckpt, &net)?;
    println!(
        "train: kept epoch {} (loss {:.4}), checkpoint {}",
        outcome.best_epoch + 1,
        outcome.best_loss,
        ckpt.display()
    );
    Ok(TrainSummary { outcome, checkpoint: ckpt, split_file, log_file })
}

fn eval_indices<'a>(split: &'a DatasetSplit, which: EvalSplit) -> &'a [usize] {
    match which {
        EvalSplit::Train => &split.train,
        EvalSplit::Val => &split.val,
        EvalSplit::Test => &split.test,
    }
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub report: EvalReport,
    pub report_file: PathBuf,
    pub patches: usize,
}

/// Score the checkpoint on the configured split and write the report
/// table.
pub fn run_eval(cfg: &RunConfig) -> Result<EvalSummary> {
    cfg.validate()?;
    let pairs = dataset::load_patches(&cfg.data)?;
    let net = checkpoint::load(&checkpoint_path(cfg))?;
    let split = read_split(&split_path(cfg))?;
    let indices = eval_indices(&split, cfg.eval_split);
    if indices.is_empty() {
        return Err(Error::Config(format!(
            "{} split is empty, nothing to evaluate",
            cfg.eval_split.name()
        )));
    }
    let report = evaluate(&net, &pairs, indices, cfg.hard_pixels)?;

    let report_file = cfg.out.join("report.csv");
    let mut csv = String::from("class,regime,split,precision,recall,f1\n");
    let split_name = cfg.eval_split.name();
    for (regime, rows, macro_row) in [
        ("per-pixel", &report.per_pixel, &report.macro_pixel),
        ("per-centroid", &report.per_centroid, &report.macro_centroid),
    ] {
        for class in CellClass::ALL {
            let r = rows[class.index()];
            csv.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6}\n",
                class.name(),
                regime,
                split_name,
                r.precision,
                r.recall,
                r.f1
            ));
        }
        csv.push_str(&format!(
            "macro,{},{},{:.6},{:.6},{:.6}\n",
            regime, split_name, macro_row.precision, macro_row.recall, macro_row.f1
        ));
    }
    std::fs::write(&report_file, csv)?;
    println!(
        "eval: {} {} patches, macro F1 per-pixel {:.4} per-centroid {:.4} -> {}",
        indices.len(),
        split_name,
        report.macro_pixel.f1,
        report.macro_centroid.f1,
        report_file.display()
    );
    Ok(EvalSummary { report, report_file, patches: indices.len() })
}

#[derive(Debug, Clone)]
pub struct ExplainSummary {
    pub optimized_png: PathBuf,
    pub curve_file: PathBuf,
    pub response_file: PathBuf,
    pub saliency_pngs: Vec<PathBuf>,
    pub initial_loss: f32,
    pub final_loss: f32,
    pub response_before: [f64; 4],
    pub response_after: [f64; 4],
}

/// Interrogate the checkpoint: optimise a quadrant image from the mean
/// training patch, then write saliency maps for a few evaluation
/// patches.
pub fn run_explain(cfg: &RunConfig) -> Result<ExplainSummary> {
    cfg.validate()?;
    let pairs = dataset::load_patches(&cfg.data)?;
    let net = checkpoint::load(&checkpoint_path(cfg))?;
    let split = read_split(&split_path(cfg))?;
    std::fs::create_dir_all(&cfg.out)?;

    let start = mean_training_image(&pairs, &split.train)?;
    let response_before = quadrant_response(&net, &start, cfg.optimize_target)?;
    let settings = OptimizeSettings {
        steps: cfg.optimize_steps,
        lr: cfg.optimize_lr,
        target: cfg.optimize_target,
    };
    let outcome = optimize_input(&net, &start, &settings)?;
    let response_after = quadrant_response(&net, &outcome.image, cfg.optimize_target)?;

    let (_, _, h, w) = outcome.image.dims4()?;
    let optimized_png = cfg.out.join("optimized.png");
    write_png_scaled(&optimized_png, w, h, outcome.image.data())?;

    let curve_file = cfg.out.join("optimize_curve.csv");
    let mut csv = String::from("step,loss\n");
    for (step, loss) in outcome.curve.iter().enumerate() {
        csv.push_str(&format!("{},{:.6}\n", step + 1, loss));
    }
    std::fs::write(&curve_file, csv)?;

    let response_file = cfg.out.join("quadrant_response.csv");
    let mut csv = String::from("class,before,after\n");
    for (c, class) in CellClass::POSITIVE.iter().enumerate() {
        csv.push_str(&format!(
            "{},{:.6},{:.6}\n",
            class.name(),
            response_before[c],
            response_after[c]
        ));
    }
    std::fs::write(&response_file, csv)?;
    println!(
        "explain: quadrant loss {:.4} -> {:.4} over {} steps",
        outcome.initial_loss, outcome.final_loss, cfg.optimize_steps
    );

    let indices = eval_indices(&split, cfg.eval_split);
    let saliency_settings = SaliencySettings {
        min_cell: cfg.saliency_min_cell,
        threshold: cfg.saliency_threshold,
    };
    let mut saliency_pngs = Vec::new();
    for &i in indices.iter().take(cfg.saliency_count) {
        let pair = &pairs[i];
        let input = crate::pipeline::normalize_patch(&pair.image);
        let map = hipe_saliency(&net, &input, cfg.saliency_class, &saliency_settings)?;
        let stem = format!("{}_{}_{}", pair.slide, pair.x, pair.y);
        let png = cfg
            .out
            .join(format!("saliency_{stem}_{}.png", cfg.saliency_class.name()));
        write_png_scaled(&png, map.width, map.height, &map.values)?;
        let input_png = cfg.out.join(format!("saliency_{stem}_input.png"));
        write_png_scaled(&input_png, map.width, map.height, input.data())?;
        println!("explain: saliency for patch {stem} -> {}", png.display());
        saliency_pngs.push(png);
    }

    Ok(ExplainSummary {
        optimized_png,
        curve_file,
        response_file,
        saliency_pngs,
        initial_loss: outcome.initial_loss,
        final_loss: outcome.final_loss,
        response_before,
        response_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.txt");
        let split = DatasetSplit { train: vec![3, 1, 4], val: vec![0], test: vec![2, 5] };
        write_split(&path, &split).unwrap();
        assert_eq!(read_split(&path).unwrap(), split);
    }

    #[test]
    fn split_file_allows_empty_parts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.txt");
        let split = DatasetSplit { train: vec![0, 1], val: vec![], test: vec![2] };
        write_split(&path, &split).unwrap();
        assert_eq!(read_split(&path).unwrap(), split);
    }

    #[test]
    fn split_file_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.txt");
        std::fs::write(&path, "train 0\nval 1\ntest x\n").unwrap();
        assert!(read_split(&path).is_err());
        std::fs::write(&path, "train 0\nval 1\n").unwrap();
        assert!(read_split(&path).is_err());
        std::fs::write(&path, "train 0\ntrain 1\nval 2\ntest 3\n").unwrap();
        assert!(read_split(&path).is_err());
    }
}
