//! Input optimisation demo: starting from a smooth image, gradient
//! descent under the quadrant loss concentrates each positive class's
//! response in its own quadrant of the input.
//!
//! Uses an untrained network, so this shows the mechanism rather than
//! a learned texture preference. An untrained softmax sits near uniform
//! and moves slowly, so the demo takes more and larger steps than the
//! pipeline's explain stage, which runs the same optimisation against a
//! trained checkpoint.

use hseg::explain::{optimize_input, quadrant_response, OptimizeSettings, OptimizeTarget};
use hseg::net::{Network, NetworkConfig};
use hseg::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let net = Network::new(NetworkConfig {
        input_channels: 1,
        classes: 5,
        widths: vec![4, 8],
        seed: 21,
    })?;

    let d = 32;
    let data: Vec<f32> = (0..d * d)
        .map(|i| {
            let (x, y) = ((i % d) as f32, (i / d) as f32);
            0.3 * ((0.2 * x).sin() + (0.17 * y).cos())
        })
        .collect();
    let start = Tensor::new(vec![1, 1, d, d], data)?;

    let settings = OptimizeSettings { steps: 400, lr: 8.0, target: OptimizeTarget::Softmax };
    let before = quadrant_response(&net, &start, settings.target)?;
    let outcome = optimize_input(&net, &start, &settings)?;
    let after = quadrant_response(&net, &outcome.image, settings.target)?;

    println!("loss: {:.4} -> {:.4} over {} steps", outcome.initial_loss, outcome.final_loss, settings.steps);
    for (step, loss) in outcome.curve.iter().enumerate().step_by(50) {
        println!("  step {:>3}: {loss:.4}", step + 1);
    }
    println!("\nmean in-quadrant response (softmax probability):");
    println!("{:>10} {:>10} {:>10}", "class", "before", "after");
    for (c, (b, a)) in before.iter().zip(&after).enumerate() {
        println!("{:>10} {:>10.4} {:>10.4}", c, b, a);
    }
    Ok(())
}
