//! Build a small synthetic slide set, label it, cut patches and print
//! the class-representation table.
//!
//! Writes into a temporary directory; pass a path argument to keep the
//! dataset around instead.

use hseg::config::RunConfig;
use hseg::labels::CellClass;
use hseg::run::run_generate;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let keep = std::env::args().nth(1);
    let tmp;
    let root = match &keep {
        Some(path) => std::path::PathBuf::from(path),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };

    let cfg = RunConfig {
        seed: 7,
        data: root.join("data"),
        out: root.join("out"),
        slides: 3,
        slide_width: 128,
        slide_height: 128,
        nuclei_per_class: [4, 4, 4, 4],
        radius_min: 5.0,
        radius_max: 8.0,
        patch_size: 32,
        overlap: 0.5,
        ..RunConfig::default()
    };

    let summary = run_generate(&cfg)?;
    println!();
    println!("{} slides -> {} patches", summary.slides, summary.patches);
    println!("{:<10} {:>7} {:>9} {:>9} {:>9}", "class", "count", "pixels", "presence", "coverage");
    for class in CellClass::ALL {
        let s = summary.stats[class.index()];
        println!(
            "{:<10} {:>7} {:>9} {:>9} {:>9.4}",
            class.name(),
            s.count,
            s.pixels,
            s.presence,
            s.coverage
        );
    }
    if keep.is_some() {
        println!("\ndataset kept under {}", root.display());
    }
    Ok(())
}
