//! Reverse-mode differentiation over a linear operation tape.
//!
//! Forward calls record one node per operation; [`Tape::backward`] replays
//! the tape in reverse, accumulating vector-Jacobian products into every
//! node that (transitively) depends on a gradient-tracked leaf. Scalar
//! reductions accumulate in f64 before storing f32 results.
//!
//! A tape is single-writer: build and differentiate it on one thread.
//! Parallelism across samples uses one tape per sample.

use crate::labels::LabelMap;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Probabilities are clamped to this floor before `ln` in the cross-entropy.
pub const PROB_FLOOR: f32 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: usize, kernel: usize, bias: usize, stride: usize, pad: usize },
    Relu { x: usize },
    MaxPool2 { x: usize, argmax: Vec<u32> },
    Upsample2 { x: usize },
    ConcatChannels { a: usize, b: usize },
    SliceChannels { x: usize, start: usize },
    SoftmaxChannels { x: usize },
    CrossEntropy { rho: usize, targets: Vec<u8> },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    SumAll { x: usize },
    MeanAll { x: usize },
    ChannelMean { x: usize },
    Variance { x: usize },
    WeightedSum { x: usize, weights: Vec<f32> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

/// Operation tape. Nodes only reference earlier nodes, so reverse index
/// order is a valid reverse-topological traversal.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. `requires_grad` marks it as a gradient
    /// target for subsequent backward passes.
    pub fn leaf(&mut self, tensor: &Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, tensor.shape().to_vec(), tensor.data().to_vec(), requires_grad)
    }

    /// Register a constant (no gradient tracking).
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        self.leaf(tensor, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    /// Copy a node's value out as a tensor.
    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("tape nodes hold consistent shapes")
    }

    /// Gradient accumulated for `v` by the most recent backward pass.
    /// `None` when the node is not gradient-tracked.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { op, shape, data, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims4(&self, v: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        match *self.nodes[v.0].shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            ref s => Err(Error::ShapeMismatch(format!(
                "{what} must be 4-D (NCHW), got shape {s:?}"
            ))),
        }
    }

    // ── forward ops ─────────────────────────────────────────────────────

    /// 2-D convolution with zero padding. Output spatial dims are
    /// `floor((H + 2*pad - K) / stride) + 1`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, ci, h, w) = self.dims4(x, "conv2d input")?;
        let (co, kci, kh, kw) = self.dims4(kernel, "conv2d kernel")?;
        if kci != ci {
            return Err(Error::ShapeMismatch(format!(
                "conv2d kernel expects {kci} input channels, input has {ci}"
            )));
        }
        if self.nodes[bias.0].shape != [co] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d bias shape {:?} does not match {co} output channels",
                self.nodes[bias.0].shape
            )));
        }
        if stride == 0 {
            return Err(Error::ShapeMismatch("conv2d stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::ShapeMismatch(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;

        let mut out = vec![0.0f32; n * co * ho * wo];
        {
            let xd = &self.nodes[x.0].data;
            let kd = &self.nodes[kernel.0].data;
            let bd = &self.nodes[bias.0].data;
            for in_idx in 0..n {
                for oc in 0..co {
                    let plane = &mut out[(in_idx * co + oc) * ho * wo..(in_idx * co + oc + 1) * ho * wo];
                    plane.fill(bd[oc]);
                    for ic in 0..ci {
                        let x_plane = &xd[(in_idx * ci + ic) * h * w..(in_idx * ci + ic + 1) * h * w];
                        let k_base = ((oc * ci) + ic) * kh * kw;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wgt = kd[k_base + ky * kw + kx];
                                if wgt == 0.0 {
                                    continue;
                                }
                                accumulate_rows(
                                    plane, x_plane, wgt, ho, wo, h, w, ky, kx, stride, pad,
                                );
                            }
                        }
                    }
                }
            }
        }
        let requires = self.requires(x) || self.requires(kernel) || self.requires(bias);
        Ok(self.push(
            Op::Conv2d { x: x.0, kernel: kernel.0, bias: bias.0, stride, pad },
            vec![n, co, ho, wo],
            out,
            requires,
        ))
    }

    /// Elementwise `max(0, x)`. The backward pass routes gradient only
    /// where the input was strictly positive.
    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let requires = self.requires(x);
        self.push(Op::Relu { x: x.0 }, shape, data, requires)
    }

    /// 2x2 non-overlapping max pooling. Ties resolve to the first maximum
    /// in row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "max_pool2 input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "max_pool2 requires even spatial dims, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0f32; n * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        {
            let xd = &self.nodes[x.0].data;
            for plane in 0..n * c {
                let src = plane * h * w;
                let dst = plane * ho * wo;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best_idx = src + (2 * oy) * w + 2 * ox;
                        let mut best = xd[best_idx];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = src + (2 * oy + dy) * w + 2 * ox + dx;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                        out[dst + oy * wo + ox] = best;
                        argmax[dst + oy * wo + ox] = best_idx as u32;
                    }
                }
            }
        }
        let requires = self.requires(x);
        Ok(self.push(Op::MaxPool2 { x: x.0, argmax }, vec![n, c, ho, wo], out, requires))
    }

    /// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "upsample_nearest2 input")?;
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; n * c * ho * wo];
        {
            let xd = &self.nodes[x.0].data;
            for plane in 0..n * c {
                let src = plane * h * w;
                let dst = plane * ho * wo;
                for y in 0..h {
                    for x_ in 0..w {
                        let v = xd[src + y * w + x_];
                        let base = dst + (2 * y) * wo + 2 * x_;
                        out[base] = v;
                        out[base + 1] = v;
                        out[base + wo] = v;
                        out[base + wo + 1] = v;
                    }
                }
            }
        }
        let requires = self.requires(x);
        Ok(self.push(Op::Upsample2 { x: x.0 }, vec![n, c, ho, wo], out, requires))
    }

    /// Concatenate along the channel axis, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.dims4(a, "concat_channels lhs")?;
        let (nb, cb, hb, wb) = self.dims4(b, "concat_channels rhs")?;
        if na != nb || ha != hb || wa != wb {
            return Err(Error::ShapeMismatch(format!(
                "concat_channels batch/spatial mismatch: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let co = ca + cb;
        let mut out = vec![0.0f32; na * co * ha * wa];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            let plane = ha * wa;
            for in_idx in 0..na {
                let dst = in_idx * co * plane;
                out[dst..dst + ca * plane]
                    .copy_from_slice(&ad[in_idx * ca * plane..(in_idx + 1) * ca * plane]);
                out[dst + ca * plane..dst + co * plane]
                    .copy_from_slice(&bd[in_idx * cb * plane..(in_idx + 1) * cb * plane]);
            }
        }
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(Op::ConcatChannels { a: a.0, b: b.0 }, vec![na, co, ha, wa], out, requires))
    }

    /// Keep channels `start .. start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "slice_channels input")?;
        if start + len > c || len == 0 {
            return Err(Error::ShapeMismatch(format!(
                "slice_channels {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let mut out = vec![0.0f32; n * len * plane];
        {
            let xd = &self.nodes[x.0].data;
            for in_idx in 0..n {
                let src = (in_idx * c + start) * plane;
                out[in_idx * len * plane..(in_idx + 1) * len * plane]
                    .copy_from_slice(&xd[src..src + len * plane]);
            }
        }
        let requires = self.requires(x);
        Ok(self.push(Op::SliceChannels { x: x.0, start }, vec![n, len, h, w], out, requires))
    }

    /// Per-pixel softmax over the channel axis, stabilised by max
    /// subtraction. Each pixel's channel vector sums to 1.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "softmax_channels input")?;
        if c < 2 {
            return Err(Error::ShapeMismatch(format!(
                "softmax_channels needs >= 2 channels, got {c}"
            )));
        }
        let plane = h * w;
        let mut out = vec![0.0f32; n * c * plane];
        {
            let xd = &self.nodes[x.0].data;
            for in_idx in 0..n {
                let base = in_idx * c * plane;
                for p in 0..plane {
                    let mut max = f32::NEG_INFINITY;
                    for ch in 0..c {
                        max = max.max(xd[base + ch * plane + p]);
                    }
                    let mut sum = 0.0f64;
                    for ch in 0..c {
                        let e = f64::from(xd[base + ch * plane + p] - max).exp();
                        out[base + ch * plane + p] = e as f32;
                        sum += e;
                    }
                    for ch in 0..c {
                        out[base + ch * plane + p] =
                            (f64::from(out[base + ch * plane + p]) / sum) as f32;
                    }
                }
            }
        }
        let requires = self.requires(x);
        Ok(self.push(Op::SoftmaxChannels { x: x.0 }, vec![n, c, h, w], out, requires))
    }

    /// Mean over all pixels of `-ln(rho)` at the true class, with `rho`
    /// clamped to [`PROB_FLOOR`] before the log. `targets` supplies one
    /// label map per batch sample.
    pub fn cross_entropy(&mut self, rho: Var, targets: &[&LabelMap]) -> Result<Var> {
        let (n, c, h, w) = self.dims4(rho, "cross_entropy input")?;
        if targets.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy got {} label maps for batch of {n}",
                targets.len()
            )));
        }
        let mut flat = Vec::with_capacity(n * h * w);
        for map in targets {
            if map.width() != w || map.height() != h {
                return Err(Error::ShapeMismatch(format!(
                    "cross_entropy label map {}x{} does not match {}x{}",
                    map.width(),
                    map.height(),
                    w,
                    h
                )));
            }
            for &cls in map.raw() {
                if cls as usize >= c {
                    return Err(Error::InvalidClass(cls));
                }
                flat.push(cls);
            }
        }
        let plane = h * w;
        let mut sum = 0.0f64;
        {
            let rd = &self.nodes[rho.0].data;
            for in_idx in 0..n {
                let base = in_idx * c * plane;
                for p in 0..plane {
                    let cls = flat[in_idx * plane + p] as usize;
                    let prob = rd[base + cls * plane + p].max(PROB_FLOOR);
                    sum -= f64::from(prob).ln();
                }
            }
        }
        let loss = (sum / (n * plane) as f64) as f32;
        let requires = self.requires(rho);
        Ok(self.push(Op::CrossEntropy { rho: rho.0, targets: flat }, vec![], vec![loss], requires))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, "add", |x, y| x + y, |aa, bb| Op::Add { a: aa, b: bb })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, "sub", |x, y| x - y, |aa, bb| Op::Sub { a: aa, b: bb })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, "mul", |x, y| x * y, |aa, bb| Op::Mul { a: aa, b: bb })
    }

    fn zip_elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f32, f32) -> f32,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch(format!(
                "{name} shape mismatch: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(op(a.0, b.0), shape, data, requires))
    }

    /// Scalar sum of every element.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let sum: f64 = self.nodes[x.0].data.iter().map(|&v| f64::from(v)).sum();
        let requires = self.requires(x);
        self.push(Op::SumAll { x: x.0 }, vec![], vec![sum as f32], requires)
    }

    /// Scalar mean of every element.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len();
        let sum: f64 = self.nodes[x.0].data.iter().map(|&v| f64::from(v)).sum();
        let requires = self.requires(x);
        self.push(Op::MeanAll { x: x.0 }, vec![], vec![(sum / n as f64) as f32], requires)
    }

    /// Per-channel spatial mean of a single-sample 4-D tensor: `[1, C, H, W] -> [C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "channel_mean input")?;
        if n != 1 {
            return Err(Error::ShapeMismatch(format!(
                "channel_mean expects batch of 1, got {n}"
            )));
        }
        let plane = h * w;
        let xd = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            let sum: f64 = xd[ch * plane..(ch + 1) * plane].iter().map(|&v| f64::from(v)).sum();
            out.push((sum / plane as f64) as f32);
        }
        let requires = self.requires(x);
        Ok(self.push(Op::ChannelMean { x: x.0 }, vec![c], out, requires))
    }

    /// Population variance of a 1-D tensor: `sum((x - mean)^2) / len`.
    pub fn variance(&mut self, x: Var) -> Result<Var> {
        let shape = &self.nodes[x.0].shape;
        if shape.len() != 1 || shape[0] == 0 {
            return Err(Error::ShapeMismatch(format!(
                "variance expects a non-empty 1-D tensor, got shape {shape:?}"
            )));
        }
        let xd = &self.nodes[x.0].data;
        let k = xd.len() as f64;
        let mean: f64 = xd.iter().map(|&v| f64::from(v)).sum::<f64>() / k;
        let var: f64 = xd.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / k;
        let requires = self.requires(x);
        Ok(self.push(Op::Variance { x: x.0 }, vec![], vec![var as f32], requires))
    }

    /// Scalar `sum(weights * x)`; `weights` is a fixed coefficient vector.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f32]) -> Result<Var> {
        if weights.len() != self.nodes[x.0].data.len() {
            return Err(Error::ShapeMismatch(format!(
                "weighted_sum got {} weights for {} elements",
                weights.len(),
                self.nodes[x.0].data.len()
            )));
        }
        let sum: f64 = self.nodes[x.0]
            .data
            .iter()
            .zip(weights)
            .map(|(&v, &w)| f64::from(v) * f64::from(w))
            .sum();
        let requires = self.requires(x);
        Ok(self.push(
            Op::WeightedSum { x: x.0, weights: weights.to_vec() },
            vec![],
            vec![sum as f32],
            requires,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every gradient-tracked node
    /// receives dLoss/dNode; previously accumulated gradients are reset,
    /// so repeated calls produce identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for node in &mut self.nodes {
            node.grad = if node.requires_grad {
                Some(vec![0.0; node.data.len()])
            } else {
                None
            };
        }
        if !self.nodes[loss.0].requires_grad {
            // Loss does not depend on any tracked leaf; all grads stay zero.
            return Ok(());
        }
        self.nodes[loss.0].grad.as_mut().expect("just allocated")[0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backward_node(idx);
        }
        Ok(())
    }

    fn backward_node(&mut self, idx: usize) {
        // Split off the upstream gradient to appease the borrow checker;
        // it is restored at the end.
        let upstream = match self.nodes[idx].grad.take() {
            Some(g) => g,
            None => return,
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d { x, kernel, bias, stride, pad } => {
                let (x, kernel, bias, stride, pad) = (*x, *kernel, *bias, *stride, *pad);
                self.backward_conv2d(idx, x, kernel, bias, stride, pad, &upstream);
            }
            Op::Relu { x } => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    let mask: Vec<bool> = self.nodes[x].data.iter().map(|&v| v > 0.0).collect();
                    let g = self.nodes[x].grad.as_mut().expect("tracked");
                    for (i, (&up, &m)) in upstream.iter().zip(&mask).enumerate() {
                        if m {
                            g[i] += up;
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    let routes: Vec<u32> = argmax.clone();
                    let g = self.nodes[x].grad.as_mut().expect("tracked");
                    for (&up, &src) in upstream.iter().zip(&routes) {
                        g[src as usize] += up;
                    }
                }
            }
            Op::Upsample2 { x } => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    let [n, c, h, w] = match *self.nodes[x].shape.as_slice() {
                        [n, c, h, w] => [n, c, h, w],
                        _ => unreachable!("upsample input is 4-D"),
                    };
                    let wo = 2 * w;
                    let g = self.nodes[x].grad.as_mut().expect("tracked");
                    for plane in 0..n * c {
                        let src = plane * h * w;
                        let dst = plane * 4 * h * w;
                        for y in 0..h {
                            for x_ in 0..w {
                                let base = dst + (2 * y) * wo + 2 * x_;
                                g[src + y * w + x_] += upstream[base]
                                    + upstream[base + 1]
                                    + upstream[base + wo]
                                    + upstream[base + wo + 1];
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels { a, b } => {
                let (a, b) = (*a, *b);
                let (ca, plane, n) = {
                    let sa = &self.nodes[a].shape;
                    (sa[1], sa[2] * sa[3], sa[0])
                };
                let cb = self.nodes[b].shape[1];
                let co = ca + cb;
                if self.nodes[a].requires_grad {
                    let g = self.nodes[a].grad.as_mut().expect("tracked");
                    for in_idx in 0..n {
                        let src = in_idx * co * plane;
                        let dst = in_idx * ca * plane;
                        for i in 0..ca * plane {
                            g[dst + i] += upstream[src + i];
                        }
                    }
                }
                if self.nodes[b].requires_grad {
                    let g = self.nodes[b].grad.as_mut().expect("tracked");
                    for in_idx in 0..n {
                        let src = in_idx * co * plane + ca * plane;
                        let dst = in_idx * cb * plane;
                        for i in 0..cb * plane {
                            g[dst + i] += upstream[src + i];
                        }
                    }
                }
            }
            Op::SliceChannels { x, start } => {
                let (x, start) = (*x, *start);
                if self.nodes[x].requires_grad {
                    let (c, plane, n, len) = {
                        let sx = &self.nodes[x].shape;
                        let so = &self.nodes[idx].shape;
                        (sx[1], sx[2] * sx[3], sx[0], so[1])
                    };
                    let g = self.nodes[x].grad.as_mut().expect("tracked");
                    for in_idx in 0..n {
                        let dst = (in_idx * c + start) * plane;
                        let src = in_idx * len * plane;
                        for i in 0..len * plane {
                            g[dst + i] += upstream[src + i];
                        }
                    }
                }
            }
            Op::SoftmaxChannels { x } => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    let [n, c, h, w] = match *self.nodes[idx].shape.as_slice() {
                        [n, c, h, w] => [n, c, h, w],
                        _ => unreachable!(),
                    };
                    let plane = h * w;
                    let rho = self.nodes[idx].data.clone();
                    let g = self.nodes[x].grad.as_mut().expect("tracked");
                    for in_idx in 0..n {
                        let base = in_idx * c * plane;
                        for p in 0..plane {
                            let mut dot = 0.0f64;
                            for ch in 0..c {
                                let i = base + ch * plane + p;
                                dot += f64::from(upstream[i]) * f64::from(rho[i]);
                            }
                            for ch in 0..c {
                                let i = base + ch * plane + p;
                                g[i] += (f64::from(rho[i]) * (f64::from(upstream[i]) - dot)) as f32;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { rho, targets } => {
                let rho = *rho;
                if self.nodes[rho].requires_grad {
                    let [n, c, h, w] = match *self.nodes[rho].shape.as_slice() {
                        [n, c, h, w] => [n, c, h, w],
                        _ => unreachable!(),
                    };
                    let plane = h * w;
                    let scale = f64::from(upstream[0]) / (n * plane) as f64;
                    let targets = targets.clone();
                    let probs = self.nodes[rho].data.clone();
                    let g = self.nodes[rho].grad.as_mut().expect("tracked");
                    for in_idx in 0..n {
                        let base = in_idx * c * plane;
                        for p in 0..plane {
                            let cls = targets[in_idx * plane + p] as usize;
                            let i = base + cls * plane + p;
                            // The clamp is flat below the floor: no gradient there.
                            if probs[i] > PROB_FLOOR {
                                g[i] += (-scale / f64::from(probs[i])) as f32;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                for operand in [a, b] {
                    if self.nodes[operand].requires_grad {
                        let g = self.nodes[operand].grad.as_mut().expect("tracked");
                        for (gi, &up) in g.iter_mut().zip(&upstream) {
                            *gi += up;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a].requires_grad {
                    let g = self.nodes[a].grad.as_mut().expect("tracked");
                    for (gi, &up) in g.iter_mut().zip(&upstream) {
                        *gi += up;
                    }
                }
                if self.nodes[b].requires_grad {
                    let g = self.nodes[b].grad.as_mut().expect("tracked");
                    for (gi, &up) in g.iter_mut().zip(&upstream) {
                        *gi -= up;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a].requires_grad {
                    let other = self.nodes[b].data.clone();
                    let g = self.nodes[a].grad.as_mut().expect("tracked");
                    for ((gi, &up), &o) in g.iter_mut().zip(&upstream).zip(&other) {
                        *gi += up * o;
                    }
                }
                if self.nodes[b].requires_grad {
                    let other = self.nodes[a].data.clone();
                    let g = self.nodes[b].grad.as_mut().expect("tracked");
                    for ((gi, &up), &o) in g.iter_mut().zip(&upstream).zip(&other) {
                        *gi += up * o;
                    }
                }
            }
            Op::SumAll { x } => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    let up = upstream[0];
                    let g = self.nodes[x].grad.as_mut().expect("tracked");
                    for gi in g.iter_mut() {
                        *gi += up;
                    }
                }
            }
            Op::MeanAll { x } => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    let n = self.nodes[x].data.len();
                    let up = upstream[0] / n as f32;
                    let g = self.nodes[x].grad.as_mut().expect("tracked");
                    for gi in g.iter_mut() {
                        *gi += up;
                    }
                }
            }
            Op::ChannelMean { x } => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    let (c, plane) = {
                        let sx = &self.nodes[x].shape;
                        (sx[1], sx[2] * sx[3])
                    };
                    let g = self.nodes[x].grad.as_mut().expect("tracked");
                    for ch in 0..c {
                        let up = upstream[ch] / plane as f32;
                        for gi in &mut g[ch * plane..(ch + 1) * plane] {
                            *gi += up;
                        }
                    }
                }
            }
            Op::Variance { x } => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    let xd = self.nodes[x].data.clone();
                    let k = xd.len() as f64;
                    let mean: f64 = xd.iter().map(|&v| f64::from(v)).sum::<f64>() / k;
                    let up = f64::from(upstream[0]);
                    let g = self.nodes[x].grad.as_mut().expect("tracked");
                    for (gi, &v) in g.iter_mut().zip(&xd) {
                        *gi += (up * 2.0 * (f64::from(v) - mean) / k) as f32;
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    let up = upstream[0];
                    let weights = weights.clone();
                    let g = self.nodes[x].grad.as_mut().expect("tracked");
                    for (gi, &w) in g.iter_mut().zip(&weights) {
                        *gi += up * w;
                    }
                }
            }
        }
        self.nodes[idx].grad = Some(upstream);
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv2d(
        &mut self,
        out_idx: usize,
        x: usize,
        kernel: usize,
        bias: usize,
        stride: usize,
        pad: usize,
        upstream: &[f32],
    ) {
        let (n, ci, h, w) = {
            let s = &self.nodes[x].shape;
            (s[0], s[1], s[2], s[3])
        };
        let (co, kh, kw) = {
            let s = &self.nodes[kernel].shape;
            (s[0], s[2], s[3])
        };
        let (ho, wo) = {
            let s = &self.nodes[out_idx].shape;
            (s[2], s[3])
        };

        if self.nodes[bias].requires_grad {
            let g = self.nodes[bias].grad.as_mut().expect("tracked");
            for in_idx in 0..n {
                for oc in 0..co {
                    let base = (in_idx * co + oc) * ho * wo;
                    let mut sum = 0.0f64;
                    for &up in &upstream[base..base + ho * wo] {
                        sum += f64::from(up);
                    }
                    g[oc] += sum as f32;
                }
            }
        }

        if self.nodes[x].requires_grad {
            let kd = self.nodes[kernel].data.clone();
            let g = self.nodes[x].grad.as_mut().expect("tracked");
            for in_idx in 0..n {
                for oc in 0..co {
                    let up_plane = &upstream[(in_idx * co + oc) * ho * wo..(in_idx * co + oc + 1) * ho * wo];
                    for ic in 0..ci {
                        let g_plane = &mut g[(in_idx * ci + ic) * h * w..(in_idx * ci + ic + 1) * h * w];
                        let k_base = (oc * ci + ic) * kh * kw;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wgt = kd[k_base + ky * kw + kx];
                                if wgt == 0.0 {
                                    continue;
                                }
                                scatter_rows(g_plane, up_plane, wgt, ho, wo, h, w, ky, kx, stride, pad);
                            }
                        }
                    }
                }
            }
        }

        if self.nodes[kernel].requires_grad {
            let xd = self.nodes[x].data.clone();
            let g = self.nodes[kernel].grad.as_mut().expect("tracked");
            for in_idx in 0..n {
                for oc in 0..co {
                    let up_plane = &upstream[(in_idx * co + oc) * ho * wo..(in_idx * co + oc + 1) * ho * wo];
                    for ic in 0..ci {
                        let x_plane = &xd[(in_idx * ci + ic) * h * w..(in_idx * ci + ic + 1) * h * w];
                        let k_base = (oc * ci + ic) * kh * kw;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                g[k_base + ky * kw + kx] +=
                                    dot_rows(x_plane, up_plane, ho, wo, h, w, ky, kx, stride, pad);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Valid output-column range for kernel offset `k` with padding `p`:
/// columns whose sampled input column lands inside `[0, limit)`.
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // in = out * stride + k - pad must satisfy 0 <= in < in_len
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi_excl = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi_excl), hi_excl)
}

/// out[oy, ox] += w * x[oy*stride + ky - pad, ox*stride + kx - pad] over valid indices.
#[allow(clippy::too_many_arguments)]
fn accumulate_rows(
    out: &mut [f32],
    x: &[f32],
    wgt: f32,
    ho: usize,
    wo: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
) {
    let (oy0, oy1) = valid_range(ho, h, ky, stride, pad);
    let (ox0, ox1) = valid_range(wo, w, kx, stride, pad);
    for oy in oy0..oy1 {
        let iy = oy * stride + ky - pad;
        let out_row = &mut out[oy * wo + ox0..oy * wo + ox1];
        if stride == 1 {
            let ix0 = ox0 + kx - pad;
            let in_row = &x[iy * w + ix0..iy * w + ix0 + out_row.len()];
            for (o, &i) in out_row.iter_mut().zip(in_row) {
                *o += wgt * i;
            }
        } else {
            for (off, o) in out_row.iter_mut().enumerate() {
                let ix = (ox0 + off) * stride + kx - pad;
                *o += wgt * x[iy * w + ix];
            }
        }
    }
}

/// g[oy*stride + ky - pad, ox*stride + kx - pad] += w * up[oy, ox] (transpose of accumulate_rows).
#[allow(clippy::too_many_arguments)]
fn scatter_rows(
    g: &mut [f32],
    up: &[f32],
    wgt: f32,
    ho: usize,
    wo: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
) {
    let (oy0, oy1) = valid_range(ho, h, ky, stride, pad);
    let (ox0, ox1) = valid_range(wo, w, kx, stride, pad);
    for oy in oy0..oy1 {
        let iy = oy * stride + ky - pad;
        let up_row = &up[oy * wo + ox0..oy * wo + ox1];
        if stride == 1 {
            let ix0 = ox0 + kx - pad;
            let g_row = &mut g[iy * w + ix0..iy * w + ix0 + up_row.len()];
            for (gi, &u) in g_row.iter_mut().zip(up_row) {
                *gi += wgt * u;
            }
        } else {
            for (off, &u) in up_row.iter().enumerate() {
                let ix = (ox0 + off) * stride + kx - pad;
                g[iy * w + ix] += wgt * u;
            }
        }
    }
}

/// sum over valid (oy, ox) of x[sampled] * up[oy, ox].
#[allow(clippy::too_many_arguments)]
fn dot_rows(
    x: &[f32],
    up: &[f32],
    ho: usize,
    wo: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
) -> f32 {
    let (oy0, oy1) = valid_range(ho, h, ky, stride, pad);
    let (ox0, ox1) = valid_range(wo, w, kx, stride, pad);
    let mut acc = 0.0f32;
    for oy in oy0..oy1 {
        let iy = oy * stride + ky - pad;
        let up_row = &up[oy * wo + ox0..oy * wo + ox1];
        if stride == 1 {
            let ix0 = ox0 + kx - pad;
            let in_row = &x[iy * w + ix0..iy * w + ix0 + up_row.len()];
            for (&i, &u) in in_row.iter().zip(up_row) {
                acc += i * u;
            }
        } else {
            for (off, &u) in up_row.iter().enumerate() {
                let ix = (ox0 + off) * stride + kx - pad;
                acc += x[iy * w + ix] * u;
            }
        }
    }
    acc
}
