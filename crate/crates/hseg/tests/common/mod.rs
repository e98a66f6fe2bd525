//! Shared test oracles: naive f64 reference implementations of every
//! numeric operation, a central finite-difference gradient harness, and
//! the random-tensor samplers the gradient suite uses.
//!
//! References here are deliberately written as plain index loops with no
//! shared code with the crate, so agreement is evidence rather than
//! tautology.

#![allow(dead_code)]

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use hseg::labels::{CellClass, LabelMap, CLASS_COUNT};
use hseg::tape::{Tape, Var};
use hseg::tensor::Tensor;

// ---------------------------------------------------------------------------
// Naive references
// ---------------------------------------------------------------------------

/// Plain quadruple-loop convolution, f64 throughout.
/// Input `[n, cin, h, w]`, kernel `[cout, cin, k, k]`, bias `[cout]`.
pub fn naive_conv2d(
    input: &[f32],
    (n, cin, h, w): (usize, usize, usize, usize),
    kernel: &[f32],
    (cout, k): (usize, usize),
    bias: &[f32],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, (usize, usize)) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f64; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = f64::from(bias[co]);
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let iv = input[((b * cin + ci) * h + iy as usize) * w + ix as usize];
                                let kv = kernel[((co * cin + ci) * k + ky) * k + kx];
                                acc += f64::from(iv) * f64::from(kv);
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, (oh, ow))
}

/// Per-pixel channel softmax of `[n, c, h, w]` data.
pub fn naive_softmax(input: &[f32], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0f64; input.len()];
    let plane = h * w;
    for b in 0..n {
        for p in 0..plane {
            let at = |ch: usize| f64::from(input[(b * c + ch) * plane + p]);
            let max = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..c).map(|ch| (at(ch) - max).exp()).sum();
            for ch in 0..c {
                out[(b * c + ch) * plane + p] = (at(ch) - max).exp() / sum;
            }
        }
    }
    out
}

/// Mean negative log-probability of the target class, clamped like the
/// tape op.
pub fn naive_cross_entropy(
    rho: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    targets: &[&LabelMap],
) -> f64 {
    let plane = h * w;
    let mut sum = 0.0;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let cls = targets[b].get(x, y).index();
                let p = rho[(b * c + cls) * plane + y * w + x].max(1e-12);
                sum -= p.ln();
            }
        }
    }
    sum / (n * plane) as f64
}

/// 2x2 max pooling with stride 2.
pub fn naive_max_pool2(input: &[f32], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f64; n * c * oh * ow];
    for bc in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = f64::from(input[(bc * h + oy * 2 + dy) * w + ox * 2 + dx]);
                        best = best.max(v);
                    }
                }
                out[(bc * oh + oy) * ow + ox] = best;
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling.
pub fn naive_upsample2(input: &[f32], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0f64; n * c * oh * ow];
    for bc in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                out[(bc * oh + oy) * ow + ox] = f64::from(input[(bc * h + oy / 2) * w + ox / 2]);
            }
        }
    }
    out
}

/// Soft one-vs-rest confusion for a single class over one map, written as
/// an explicit y/x double loop. Returns (tp, tn, fp, fn).
pub fn naive_soft_confusion(
    labels: &LabelMap,
    class: CellClass,
    prob_plane: &[f32],
) -> (f64, f64, f64, f64) {
    let (w, h) = (labels.width(), labels.height());
    let (mut tp, mut tn, mut fp, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let t = if labels.get(x, y) == class { 1.0 } else { 0.0 };
            let p = f64::from(prob_plane[y * w + x]);
            tp += t * p;
            tn += (1.0 - t) * (1.0 - p);
            fp += p * (1.0 - t);
            fn_ += t * (1.0 - p);
        }
    }
    (tp, tn, fp, fn_)
}

/// Quadrant objective, triple loop over class/row/column. `rho` is
/// `[4, d, d]` channel-major; quadrant c is the d/2 x d/2 block in
/// row-major quadrant order (TL, TR, BL, BR).
pub fn naive_quadrant_loss(rho: &[f32], d: usize) -> f64 {
    let half = d / 2;
    let classes = 4usize;
    let mut relu_sum = 0.0f64;
    let mut in_sum = 0.0f64;
    let mut means = [0.0f64; 4];
    for c in 0..classes {
        let (qx, qy) = ((c % 2) * half, (c / 2) * half);
        for y in 0..d {
            for x in 0..d {
                let v = f64::from(rho[(c * d + y) * d + x]);
                let inside = x >= qx && x < qx + half && y >= qy && y < qy + half;
                let mu = if inside { 1.0 } else { 0.0 };
                relu_sum += (v * (1.0 - mu)).max(0.0);
                in_sum += mu * v;
                means[c] += v;
            }
        }
        means[c] /= (d * d) as f64;
    }
    let base = (relu_sum - in_sum) / ((d * d * classes) as f64);
    let mean_of_means: f64 = means.iter().sum::<f64>() / classes as f64;
    let variance: f64 =
        means.iter().map(|m| (m - mean_of_means).powi(2)).sum::<f64>() / classes as f64;
    base + variance
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    pearson(&ra, &rb)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values on a shuffled arithmetic grid with spacing 0.06 whose points
/// all sit at least 0.03 from zero. This keeps every element clear of the
/// ReLU kink and every pair separated beyond the finite-difference step,
/// so piecewise-linear ops stay locally linear under perturbation.
pub fn separated_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(rng);
    let offset = (n as f32) * 0.03;
    let data: Vec<f32> = slots.iter().map(|&s| (s as f32) * 0.06 + 0.03 - offset).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_label_map(rng: &mut ChaCha8Rng, w: usize, h: usize) -> LabelMap {
    let raw: Vec<u8> = (0..w * h).map(|_| rng.gen_range(0..CLASS_COUNT as u8)).collect();
    LabelMap::from_raw(w, h, raw).unwrap()
}

// ---------------------------------------------------------------------------
// Finite-difference harness
// ---------------------------------------------------------------------------

pub struct FdCheck {
    /// Central-difference step.
    pub h: f64,
    pub rel_tol: f64,
    /// Absolute tolerance floor; relative error is meaningless near zero
    /// and f32 forward values quantise the difference quotient.
    pub abs_floor: f64,
}

impl Default for FdCheck {
    fn default() -> Self {
        FdCheck { h: 1e-2, rel_tol: 1e-3, abs_floor: 2e-4 }
    }
}

/// Check the tape gradient of a scalar-valued graph against central
/// finite differences, element by element over every leaf.
///
/// `build` must construct the same graph for any leaf contents; it runs
/// once for the backward pass and twice per leaf element for the
/// difference quotient.
pub fn check_gradients<F>(name: &str, leaves: &[Tensor], build: F, cfg: &FdCheck)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |bumped: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = bumped.iter().map(|t| tape.leaf(t, false)).collect();
        let loss = build(&mut tape, &vars);
        f64::from(tape.data(loss)[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t, true)).collect();
    let loss = build(&mut tape, &vars);
    assert_eq!(tape.data(loss).len(), 1, "{name}: loss must be scalar");
    tape.backward(loss).unwrap();
    let grads: Vec<Vec<f32>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf requires grad").to_vec())
        .collect();

    let mut work: Vec<Tensor> = leaves.to_vec();
    for li in 0..leaves.len() {
        for i in 0..leaves[li].len() {
            let orig = leaves[li].data()[i];
            let xp = orig + cfg.h as f32;
            let xm = orig - cfg.h as f32;
            work[li].data_mut()[i] = xp;
            let fp = eval(&work);
            work[li].data_mut()[i] = xm;
            let fm = eval(&work);
            work[li].data_mut()[i] = orig;
            let fd = (fp - fm) / (f64::from(xp) - f64::from(xm));
            let a = f64::from(grads[li][i]);
            let tol = (cfg.rel_tol * a.abs().max(fd.abs())).max(cfg.abs_floor);
            assert!(
                (a - fd).abs() <= tol,
                "{name}: leaf {li} element {i}: autodiff {a:.6e} vs finite difference \
                 {fd:.6e} (|diff| {:.3e} > tol {tol:.3e})",
                (a - fd).abs()
            );
        }
    }
}

// ---------------------------------------------------------------------------
// The per-op gradient suite. Each function checks `n` random tensors and
// returns the number checked, so callers can both test granularly and
// report totals.
// ---------------------------------------------------------------------------

pub fn check_conv2d(n: usize) -> usize {
    let cfg = FdCheck::default();
    for seed in 0..n as u64 {
        let mut r = rng(0x10 + seed);
        let h = r.gen_range(4..=8);
        let w = r.gen_range(4..=8);
        let cin = r.gen_range(1..=3);
        let cout = r.gen_range(1..=3);
        let (k, stride, pad) = *[(3, 1, 0), (3, 1, 1), (3, 2, 1), (1, 1, 0)]
            .choose(&mut r)
            .unwrap();
        let input = uniform_tensor(&mut r, &[1, cin, h, w]);
        let kernel = uniform_tensor(&mut r, &[cout, cin, k, k]);
        let bias = uniform_tensor(&mut r, &[cout]);
        check_gradients(
            &format!("conv2d k{k} s{stride} p{pad}"),
            &[input, kernel, bias],
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
                t.sum_all(y)
            },
            &cfg,
        );
    }
    n
}

pub fn check_relu(n: usize) -> usize {
    let cfg = FdCheck::default();
    for seed in 0..n as u64 {
        let mut r = rng(0x20 + seed);
        let h = r.gen_range(4..=8);
        let w = r.gen_range(4..=8);
        let x = separated_tensor(&mut r, &[1, 2, h, w]);
        check_gradients(
            "relu",
            &[x],
            |t, v| {
                let y = t.relu(v[0]);
                t.sum_all(y)
            },
            &cfg,
        );
    }
    n
}

pub fn check_max_pool2(n: usize) -> usize {
    let cfg = FdCheck::default();
    for seed in 0..n as u64 {
        let mut r = rng(0x30 + seed);
        let h = 2 * r.gen_range(2..=4);
        let w = 2 * r.gen_range(2..=4);
        let x = separated_tensor(&mut r, &[1, 2, h, w]);
        check_gradients(
            "max_pool2",
            &[x],
            |t, v| {
                let y = t.max_pool2(v[0]).unwrap();
                t.sum_all(y)
            },
            &cfg,
        );
    }
    n
}

pub fn check_upsample2(n: usize) -> usize {
    let cfg = FdCheck::default();
    for seed in 0..n as u64 {
        let mut r = rng(0x40 + seed);
        let h = r.gen_range(2..=4);
        let w = r.gen_range(2..=4);
        let x = uniform_tensor(&mut r, &[1, 3, h, w]);
        // Mix with weights so distinct output positions matter unequally.
        let weights: Vec<f32> = (0..3 * h * w * 4).map(|_| r.gen_range(-1.0..1.0)).collect();
        check_gradients(
            "upsample_nearest2",
            &[x],
            |t, v| {
                let y = t.upsample_nearest2(v[0]).unwrap();
                t.weighted_sum(y, &weights).unwrap()
            },
            &cfg,
        );
    }
    n
}

pub fn check_concat_slice(n: usize) -> usize {
    let cfg = FdCheck::default();
    for seed in 0..n as u64 {
        let mut r = rng(0x50 + seed);
        let h = r.gen_range(4..=8);
        let w = r.gen_range(4..=8);
        let a = uniform_tensor(&mut r, &[1, 2, h, w]);
        let b = uniform_tensor(&mut r, &[1, 3, h, w]);
        let weights: Vec<f32> = (0..2 * h * w).map(|_| r.gen_range(-1.0..1.0)).collect();
        check_gradients(
            "concat_channels + slice_channels",
            &[a, b],
            |t, v| {
                let y = t.concat_channels(v[0], v[1]).unwrap();
                let s = t.slice_channels(y, 1, 2).unwrap();
                t.weighted_sum(s, &weights).unwrap()
            },
            &cfg,
        );
    }
    n
}

pub fn check_softmax(n: usize) -> usize {
    let cfg = FdCheck::default();
    for seed in 0..n as u64 {
        let mut r = rng(0x60 + seed);
        let h = r.gen_range(4..=6);
        let w = r.gen_range(4..=6);
        let x = uniform_tensor(&mut r, &[1, CLASS_COUNT, h, w]);
        let weights: Vec<f32> =
            (0..CLASS_COUNT * h * w).map(|_| r.gen_range(-1.0..1.0)).collect();
        check_gradients(
            "softmax_channels",
            &[x],
            |t, v| {
                let y = t.softmax_channels(v[0]).unwrap();
                t.weighted_sum(y, &weights).unwrap()
            },
            &cfg,
        );
    }
    n
}

pub fn check_cross_entropy(n: usize) -> usize {
    let cfg = FdCheck::default();
    for seed in 0..n as u64 {
        let mut r = rng(0x70 + seed);
        let h = r.gen_range(2..=4);
        let w = r.gen_range(2..=4);
        let labels = random_label_map(&mut r, w, h);
        // Through softmax: the gradient path exercised by training.
        let logits = uniform_tensor(&mut r, &[1, CLASS_COUNT, h, w]);
        check_gradients(
            "softmax + cross_entropy",
            &[logits],
            |t, v| {
                let p = t.softmax_channels(v[0]).unwrap();
                t.cross_entropy(p, &[&labels]).unwrap()
            },
            &cfg,
        );
        // Direct positive probabilities: the op in isolation. -1/rho has a
        // large third derivative at small rho, so the step shrinks and the
        // draw floor rises to keep central-difference truncation in budget.
        let nrho = CLASS_COUNT * h * w;
        let data: Vec<f32> = (0..nrho).map(|_| r.gen_range(0.1..1.0)).collect();
        let rho = Tensor::new(vec![1, CLASS_COUNT, h, w], data).unwrap();
        check_gradients(
            "cross_entropy",
            &[rho],
            |t, v| t.cross_entropy(v[0], &[&labels]).unwrap(),
            &FdCheck { h: 1e-3, ..FdCheck::default() },
        );
    }
    n
}

pub fn check_arithmetic(n: usize) -> usize {
    let cfg = FdCheck::default();
    for seed in 0..n as u64 {
        let mut r = rng(0x80 + seed);
        let h = r.gen_range(4..=8);
        let w = r.gen_range(4..=8);
        let a = uniform_tensor(&mut r, &[1, 2, h, w]);
        let b = uniform_tensor(&mut r, &[1, 2, h, w]);
        check_gradients(
            "add/sub/mul chain",
            &[a, b],
            |t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                let d = t.sub(v[0], v[1]).unwrap();
                let m = t.mul(s, d).unwrap();
                t.sum_all(m)
            },
            &cfg,
        );
    }
    n
}

pub fn check_reductions(n: usize) -> usize {
    let cfg = FdCheck::default();
    for seed in 0..n as u64 {
        let mut r = rng(0x90 + seed);
        let h = r.gen_range(4..=8);
        let w = r.gen_range(4..=8);
        let x = uniform_tensor(&mut r, &[1, 3, h, w]);
        check_gradients("mean_all", &[x.clone()], |t, v| t.mean_all(v[0]), &cfg);
        check_gradients(
            "channel_mean + variance",
            &[x],
            |t, v| {
                let m = t.channel_mean(v[0]).unwrap();
                t.variance(m).unwrap()
            },
            &cfg,
        );
    }
    n
}

pub fn check_quadrant_loss_grad(n: usize) -> usize {
    let cfg = FdCheck::default();
    for seed in 0..n as u64 {
        let mut r = rng(0xa0 + seed);
        let d = 2 * r.gen_range(2..=4);
        let mask = hseg::explain::QuadrantMask::new(d).unwrap();
        let rho = separated_tensor(&mut r, &[1, 4, d, d]);
        check_gradients(
            "quadrant_loss",
            &[rho],
            |t, v| hseg::explain::quadrant_loss(t, v[0], &mask).unwrap(),
            &cfg,
        );
    }
    n
}

/// A small end-to-end graph shaped like one network stage, with rejection
/// sampling to keep conv outputs away from ReLU kinks and pool ties.
pub fn check_composite(n: usize) -> usize {
    let cfg = FdCheck::default();
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < n {
        seed += 1;
        let mut r = rng(0xb0 + seed);
        let (h, w) = (4, 4);
        let input = uniform_tensor(&mut r, &[1, 1, h, w]);
        let kernel = uniform_tensor(&mut r, &[2, 1, 3, 3]);
        let bias = uniform_tensor(&mut r, &[2]);
        let labels = random_label_map(&mut r, w, h);

        // Reject draws whose conv activations sit near the ReLU kink or
        // tie within a pool window; the difference quotient would
        // straddle the non-smooth point.
        let mut probe = Tape::new();
        let vi = probe.leaf(&input, false);
        let vk = probe.leaf(&kernel, false);
        let vb = probe.leaf(&bias, false);
        let conv = probe.conv2d(vi, vk, vb, 1, 1).unwrap();
        let activations = probe.data(conv).to_vec();
        if activations.iter().any(|a| a.abs() < 0.05) {
            continue;
        }
        let mut tie = false;
        for c in 0..2 {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let mut vals = [0.0f32; 4];
                    for (d, val) in vals.iter_mut().enumerate() {
                        *val = activations[(c * h + oy * 2 + d / 2) * w + ox * 2 + d % 2];
                    }
                    for a in 0..4 {
                        for b in a + 1..4 {
                            if (vals[a] - vals[b]).abs() < 0.05 {
                                tie = true;
                            }
                        }
                    }
                }
            }
        }
        if tie {
            continue;
        }

        let head = uniform_tensor(&mut r, &[CLASS_COUNT, 4, 1, 1]);
        let head_bias = uniform_tensor(&mut r, &[CLASS_COUNT]);
        check_gradients(
            "conv/relu/pool/upsample/concat/head/softmax/ce composite",
            &[input, kernel, bias, head, head_bias],
            |t, v| {
                let c1 = t.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
                let a1 = t.relu(c1);
                let p = t.max_pool2(a1).unwrap();
                let u = t.upsample_nearest2(p).unwrap();
                let cat = t.concat_channels(u, a1).unwrap();
                let logits = t.conv2d(cat, v[3], v[4], 1, 0).unwrap();
                let probs = t.softmax_channels(logits).unwrap();
                t.cross_entropy(probs, &[&labels]).unwrap()
            },
            &cfg,
        );
        checked += 1;
    }
    n
}

/// Run every op check with `per_op` tensors each; returns (label, count)
/// rows for reporting.
pub fn gradient_suite(per_op: usize) -> Vec<(&'static str, usize)> {
    vec![
        ("conv2d", check_conv2d(per_op)),
        ("relu", check_relu(per_op)),
        ("max_pool2", check_max_pool2(per_op)),
        ("upsample_nearest2", check_upsample2(per_op)),
        ("concat/slice", check_concat_slice(per_op)),
        ("softmax_channels", check_softmax(per_op)),
        ("cross_entropy", check_cross_entropy(per_op)),
        ("add/sub/mul", check_arithmetic(per_op)),
        ("reductions", check_reductions(per_op)),
        ("quadrant_loss", check_quadrant_loss_grad(per_op)),
        ("composite stage", check_composite(per_op)),
    ]
}
