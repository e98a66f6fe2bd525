//! Central finite-difference check of the reverse-mode gradients on a
//! small composite graph: conv -> ReLU -> pool -> upsample -> softmax
//! -> cross-entropy, the same op chain the network trains through.

use hseg::labels::{CellClass, LabelMap};
use hseg::tape::Tape;
use hseg::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central differences straddle the ReLU kink and max-pool ties, so
/// draws whose first-stage activations sit within the probe step of
/// either non-smooth point are rejected and redrawn.
fn clean_draw(seed: u64) -> Option<(Tensor, Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensor = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect()).unwrap()
    };
    let x0 = tensor(vec![1, 1, 8, 8]);
    let w0 = tensor(vec![3, 1, 3, 3]);
    let b0 = tensor(vec![3]);

    let mut probe = Tape::new();
    let vi = probe.leaf(&x0, false);
    let vk = probe.leaf(&w0, false);
    let vb = probe.leaf(&b0, false);
    let conv = probe.conv2d(vi, vk, vb, 1, 1).unwrap();
    let acts = probe.data(conv);
    if acts.iter().any(|a| a.abs() < 0.05) {
        return None;
    }
    for c in 0..3 {
        for oy in 0..4 {
            for ox in 0..4 {
                let mut vals = [0.0f32; 4];
                for (d, v) in vals.iter_mut().enumerate() {
                    *v = acts[(c * 8 + oy * 2 + d / 2) * 8 + ox * 2 + d % 2].max(0.0);
                }
                for a in 0..4 {
                    for b in a + 1..4 {
                        // Ties at zero are clipped values with zero
                        // gradient on both sides; only live pairs can
                        // flip the pool argmax under perturbation.
                        if vals[a] > 0.0 && vals[b] > 0.0 && (vals[a] - vals[b]).abs() < 0.05 {
                            return None;
                        }
                    }
                }
            }
        }
    }
    Some((x0, w0, b0))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (x0, w0, b0) = (13..).find_map(clean_draw).expect("a clean draw exists");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tensor = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect()).unwrap()
    };
    let w1 = tensor(vec![5, 3, 1, 1]);
    let b1 = tensor(vec![5]);
    let mut labels = LabelMap::filled(8, 8, CellClass::Other);
    for i in 0..64 {
        if i % 3 == 0 {
            labels.set(i % 8, i / 8, CellClass::Cd20);
        }
    }

    // Forward returning the loss; leaves are re-supplied so the same
    // graph can be rebuilt with perturbed inputs.
    let build = |vals: &[&Tensor]| -> (Tape, Vec<hseg::tape::Var>, hseg::tape::Var) {
        let mut tape = Tape::new();
        let leaves: Vec<_> = vals.iter().map(|t| tape.leaf(t, true)).collect();
        let conv = tape.conv2d(leaves[0], leaves[1], leaves[2], 1, 1).unwrap();
        let act = tape.relu(conv);
        let pooled = tape.max_pool2(act).unwrap();
        let up = tape.upsample_nearest2(pooled).unwrap();
        let logits = tape.conv2d(up, leaves[3], leaves[4], 1, 0).unwrap();
        let probs = tape.softmax_channels(logits).unwrap();
        let loss = tape.cross_entropy(probs, &[&labels]).unwrap();
        (tape, leaves, loss)
    };

    let inputs = [&x0, &w0, &b0, &w1, &b1];
    let names = ["input", "conv.weight", "conv.bias", "head.weight", "head.bias"];
    let (mut tape, leaves, loss) = build(&inputs);
    tape.backward(loss)?;

    // Per-element budget: 1e-3 relative with a 2e-4 absolute floor (the
    // f32 forward pass quantises the difference quotient near zero).
    let h = 1e-2f32;
    let mut worst = 0.0f64;
    println!("{:<12} {:>8} {:>14}", "leaf", "checked", "budget_used");
    for (li, (&base, name)) in inputs.iter().zip(names).enumerate() {
        let analytic = tape.grad(leaves[li]).unwrap().to_vec();
        let mut max_used = 0.0f64;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[i] += h;
            let mut minus = base.clone();
            minus.data_mut()[i] -= h;
            let mut probe = inputs.to_vec();
            probe[li] = &plus;
            let (tp, _, lp) = build(&probe);
            probe[li] = &minus;
            let (tm, _, lm) = build(&probe);
            let fd = f64::from(tp.data(lp)[0] - tm.data(lm)[0]) / (2.0 * f64::from(h));
            let a = f64::from(analytic[i]);
            let tol = (1e-3 * a.abs().max(fd.abs())).max(2e-4);
            max_used = max_used.max((a - fd).abs() / tol);
        }
        worst = worst.max(max_used);
        println!("{:<12} {:>8} {:>13.1}%", name, base.len(), max_used * 100.0);
    }

    println!("\nworst tolerance budget used: {:.1}%", worst * 100.0);
    assert!(worst <= 1.0, "gradient check failed");
    println!("gradients agree with central finite differences");
    Ok(())
}
