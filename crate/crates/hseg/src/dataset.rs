//! Dataset directory layout.
//!
//! ```text
//! <root>/slides/<id>/nuclear.img    16-bit channels of each slide
//! <root>/slides/<id>/cd20.img
//! <root>/slides/<id>/cd8.img
//! <root>/slides/<id>/cd3.img
//! <root>/patches/<id>_<x>_<y>.img   raw patch crop
//! <root>/patches/<id>_<x>_<y>.lbl   matching label crop
//! <root>/manifest.txt               one "id x y" line per patch, in order
//! ```
//!
//! The manifest fixes patch order, so split indices stay meaningful
//! across save/load.

use std::path::{Path, PathBuf};

use crate::datagen::ChannelStack;
use crate::pipeline::PatchPair;
use crate::rasters;
use crate::{Error, Result};

const CHANNEL_FILES: [&str; 4] = ["nuclear.img", "cd20.img", "cd8.img", "cd3.img"];

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
        return Err(Error::Config(format!(
            "slide id {id:?} must be non-empty and use only letters, digits and '-'"
        )));
    }
    Ok(())
}

pub fn slide_dir(root: &Path, id: &str) -> PathBuf {
    root.join("slides").join(id)
}

pub fn save_slide(root: &Path, id: &str, stack: &ChannelStack) -> Result<()> {
    check_id(id)?;
    let dir = slide_dir(root, id);
    std::fs::create_dir_all(&dir)?;
    for (name, raster) in
        CHANNEL_FILES.iter().zip([&stack.nuclear, &stack.cd20, &stack.cd8, &stack.cd3])
    {
        rasters::write_img(&dir.join(name), raster)?;
    }
    Ok(())
}

pub fn load_slide(root: &Path, id: &str) -> Result<ChannelStack> {
    check_id(id)?;
    let dir = slide_dir(root, id);
    let mut channels = CHANNEL_FILES.iter().map(|name| rasters::read_img(&dir.join(name)));
    let nuclear = channels.next().expect("four channels")?;
    let cd20 = channels.next().expect("four channels")?;
    let cd8 = channels.next().expect("four channels")?;
    let cd3 = channels.next().expect("four channels")?;
    ChannelStack::new(nuclear, cd20, cd8, cd3)
}

/// Slide ids present under `<root>/slides`, sorted.
pub fn slide_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("slides");
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(&dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

fn patch_stem(pair: &PatchPair) -> String {
    format!("{}_{}_{}", pair.slide, pair.x, pair.y)
}

/// Write every patch pair plus the manifest. Replaces any existing
/// manifest; patch files are overwritten by stem.
pub fn save_patches(root: &Path, pairs: &[PatchPair]) -> Result<()> {
    let dir = root.join("patches");
    std::fs::create_dir_all(&dir)?;
    let mut manifest = String::new();
    for pair in pairs {
        check_id(&pair.slide)?;
        let stem = patch_stem(pair);
        rasters::write_img(&dir.join(format!("{stem}.img")), &pair.image)?;
        rasters::write_lbl(&dir.join(format!("{stem}.lbl")), &pair.labels)?;
        manifest.push_str(&format!("{} {} {}\n", pair.slide, pair.x, pair.y));
    }
    std::fs::write(root.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Load all patches in manifest order.
pub fn load_patches(root: &Path) -> Result<Vec<PatchPair>> {
    let manifest_path = root.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Config(format!(
            "cannot read manifest {}: {e} (run the generate stage first?)",
            manifest_path.display()
        ))
    })?;
    let dir = root.join("patches");
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let (slide, x, y) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(s), Some(x), Some(y), None) => (s, x, y),
            _ => {
                return Err(Error::Format(format!(
                    "manifest line {line}: expected \"id x y\", got {trimmed:?}"
                )))
            }
        };
        let parse = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| {
                Error::Format(format!("manifest line {line}: bad coordinate {v:?}"))
            })
        };
        let (x, y) = (parse(x)?, parse(y)?);
        let stem = format!("{slide}_{x}_{y}");
        let image = rasters::read_img(&dir.join(format!("{stem}.img")))?;
        let labels = rasters::read_lbl(&dir.join(format!("{stem}.lbl")))?;
        if labels.width() != image.width() || labels.height() != image.height() {
            return Err(Error::Format(format!(
                "patch {stem}: image {}x{} but labels {}x{}",
                image.width(),
                image.height(),
                labels.width(),
                labels.height()
            )));
        }
        pairs.push(PatchPair { slide: slide.to_string(), x, y, image, labels });
    }
    Ok(pairs)
}
