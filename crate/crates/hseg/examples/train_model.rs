//! Generate a tiny dataset, train a small network on it for a few
//! epochs, and print the loss log plus where the artifacts went.

use hseg::config::RunConfig;
use hseg::run::{run_generate, run_train};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let cfg = RunConfig {
        seed: 5,
        data: tmp.path().join("data"),
        out: tmp.path().join("out"),
        slides: 2,
        slide_width: 96,
        slide_height: 96,
        nuclei_per_class: [3, 3, 3, 3],
        radius_min: 4.0,
        radius_max: 6.0,
        patch_size: 32,
        overlap: 0.0,
        widths: vec![4, 8],
        epochs: 4,
        batch_size: 8,
        ..RunConfig::default()
    };

    run_generate(&cfg)?;
    let summary = run_train(&cfg)?;

    println!();
    println!("{:>6} {:>12} {:>12}", "epoch", "train_loss", "val_loss");
    for entry in &summary.outcome.log {
        println!("{:>6} {:>12.4} {:>12.4}", entry.epoch + 1, entry.train_loss, entry.val_loss);
    }
    println!(
        "\nkept epoch {} (val loss {:.4})",
        summary.outcome.best_epoch + 1,
        summary.outcome.best_loss
    );
    println!("checkpoint: {}", summary.checkpoint.display());
    println!("split:      {}", summary.split_file.display());
    Ok(())
}
