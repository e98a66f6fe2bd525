//! U-shaped encoder/decoder for per-pixel classification.
//!
//! Each encoder stage applies two 3x3 convolutions (ReLU after each),
//! records the result as a skip tensor, then halves resolution with 2x2
//! max pooling. The deepest stage has no skip. Each decoder stage doubles
//! resolution with nearest-neighbour upsampling, concatenates the matching
//! skip tensor on the channel axis, and applies two more 3x3 convolutions.
//! A final 1x1 convolution maps to per-class logits at input resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::labels::LabelMap;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub classes: usize,
    /// Channel widths per resolution level, shallow to deep.
    pub widths: Vec<usize>,
    /// Seed for parameter initialisation.
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { input_channels: 1, classes: 5, widths: vec![16, 32, 64, 128], seed: 0 }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be >= 2".into()));
        }
        if self.widths.is_empty() {
            return Err(Error::Config("widths must name at least one level".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("widths must all be >= 1".into()));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this (one halving per
    /// level above the deepest).
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// The network: a config plus its flat, ordered parameter list.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<Param>,
}

/// Vars produced by one forward construction on a tape.
pub struct ForwardPass {
    /// Per-class logits, same spatial size as the input.
    pub logits: Var,
    /// Param leaves in [`Network::params`] order.
    pub param_vars: Vec<Var>,
}

impl Network {
    /// Build a network with Kaiming-uniform weights (`+-sqrt(6 / fan_in)`)
    /// and zero biases, drawn deterministically from `config.seed`.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let depth = config.widths.len();

        let push_conv = |params: &mut Vec<Param>,
                             rng: &mut ChaCha8Rng,
                             name: &str,
                             ci: usize,
                             co: usize,
                             k: usize| {
            let fan_in = ci * k * k;
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let weight: Vec<f32> =
                (0..co * ci * k * k).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(Param {
                name: format!("{name}.weight"),
                tensor: Tensor::new(vec![co, ci, k, k], weight).expect("sized above"),
            });
            params.push(Param {
                name: format!("{name}.bias"),
                tensor: Tensor::zeros(vec![co]),
            });
        };

        let mut ci = config.input_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            push_conv(&mut params, &mut rng, &format!("enc{i}.conv1"), ci, w, 3);
            push_conv(&mut params, &mut rng, &format!("enc{i}.conv2"), w, w, 3);
            ci = w;
        }
        for i in (0..depth - 1).rev() {
            let up_ch = config.widths[i + 1];
            let skip_ch = config.widths[i];
            push_conv(&mut params, &mut rng, &format!("dec{i}.conv1"), up_ch + skip_ch, skip_ch, 3);
            push_conv(&mut params, &mut rng, &format!("dec{i}.conv2"), skip_ch, skip_ch, 3);
        }
        push_conv(&mut params, &mut rng, "head", config.widths[0], config.classes, 1);

        Ok(Network { config, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_lens(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.tensor.len()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Replace all parameter values. Names and shapes must match the
    /// existing list exactly (used by checkpoint restore).
    pub fn set_params(&mut self, new: Vec<Param>) -> Result<()> {
        if new.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                new.len()
            )));
        }
        for (cur, repl) in self.params.iter().zip(&new) {
            if cur.name != repl.name || cur.tensor.shape() != repl.tensor.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {} with shape {:?} cannot be replaced by {} with shape {:?}",
                    cur.name,
                    cur.tensor.shape(),
                    repl.name,
                    repl.tensor.shape()
                )));
            }
        }
        self.params = new;
        Ok(())
    }

    fn check_input_shape(&self, shape: &[usize]) -> Result<()> {
        let (c, h, w) = match *shape {
            [_, c, h, w] => (c, h, w),
            ref s => {
                return Err(Error::ShapeMismatch(format!(
                    "network input must be 4-D (NCHW), got {s:?}"
                )))
            }
        };
        if c != self.config.input_channels {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        let m = self.config.spatial_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input {h}x{w} must be a positive multiple of {m} in each dimension"
            )));
        }
        Ok(())
    }

    /// Record the forward computation on `tape` starting from `input`.
    /// With `track_params`, parameter leaves are gradient targets.
    pub fn forward_on(&self, tape: &mut Tape, input: Var, track_params: bool) -> Result<ForwardPass> {
        self.check_input_shape(tape.shape(input))?;
        let param_vars: Vec<Var> =
            self.params.iter().map(|p| tape.leaf(&p.tensor, track_params)).collect();
        let mut next = 0usize;
        let mut take2 = || {
            let pair = (param_vars[next], param_vars[next + 1]);
            next += 2;
            pair
        };

        let depth = self.config.widths.len();
        let mut cur = input;
        let mut skips = Vec::with_capacity(depth - 1);
        for i in 0..depth {
            let (w1, b1) = take2();
            cur = tape.conv2d(cur, w1, b1, 1, 1)?;
            cur = tape.relu(cur);
            let (w2, b2) = take2();
            cur = tape.conv2d(cur, w2, b2, 1, 1)?;
            cur = tape.relu(cur);
            if i < depth - 1 {
                skips.push(cur);
                cur = tape.max_pool2(cur)?;
            }
        }
        for skip in skips.into_iter().rev() {
            let up = tape.upsample_nearest2(cur)?;
            cur = tape.concat_channels(up, skip)?;
            let (w1, b1) = take2();
            cur = tape.conv2d(cur, w1, b1, 1, 1)?;
            cur = tape.relu(cur);
            let (w2, b2) = take2();
            cur = tape.conv2d(cur, w2, b2, 1, 1)?;
            cur = tape.relu(cur);
        }
        let (hw, hb) = take2();
        let logits = tape.conv2d(cur, hw, hb, 1, 0)?;
        Ok(ForwardPass { logits, param_vars })
    }

    /// Class probabilities and argmax labels for a batch. Ties at the
    /// argmax resolve to the lowest class index.
    pub fn predict(&self, input: &Tensor) -> Result<(Tensor, Vec<LabelMap>)> {
        let mut tape = Tape::new();
        let x = tape.leaf(input, false);
        let pass = self.forward_on(&mut tape, x, false)?;
        let probs_var = tape.softmax_channels(pass.logits)?;
        let probs = tape.value(probs_var);
        let (n, c, h, w) = probs.dims4()?;
        let plane = h * w;
        let mut maps = Vec::with_capacity(n);
        for in_idx in 0..n {
            let base = in_idx * c * plane;
            let mut map = LabelMap::filled(w, h, crate::labels::CellClass::Cd3);
            for p in 0..plane {
                let mut best = 0usize;
                let mut best_v = probs.data()[base + p];
                for ch in 1..c {
                    let v = probs.data()[base + ch * plane + p];
                    if v > best_v {
                        best_v = v;
                        best = ch;
                    }
                }
                let class = crate::labels::CellClass::from_index(best)
                    .ok_or(Error::InvalidClass(best as u8))?;
                map.set(p % w, p / w, class);
            }
            maps.push(map);
        }
        Ok((probs, maps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> NetworkConfig {
        NetworkConfig { input_channels: 1, classes: 5, widths: vec![4, 8], seed: 7 }
    }

    #[test]
    fn two_level_param_count() {
        let net = Network::new(NetworkConfig {
            input_channels: 1,
            classes: 5,
            widths: vec![16, 32],
            seed: 0,
        })
        .unwrap();
        assert_eq!(net.param_count(), 25_701);
    }

    #[test]
    fn forward_preserves_resolution() {
        let net = Network::new(small_config()).unwrap();
        let input = Tensor::zeros(vec![2, 1, 8, 8]);
        let mut tape = Tape::new();
        let x = tape.leaf(&input, false);
        let pass = net.forward_on(&mut tape, x, false).unwrap();
        assert_eq!(tape.shape(pass.logits), &[2, 5, 8, 8]);
    }

    #[test]
    fn forward_rejects_unaligned_input() {
        let net = Network::new(NetworkConfig {
            widths: vec![4, 8, 16],
            ..small_config()
        })
        .unwrap();
        // Three levels halve twice; 6 is not a multiple of 4.
        let input = Tensor::zeros(vec![1, 1, 6, 6]);
        let mut tape = Tape::new();
        let x = tape.leaf(&input, false);
        assert!(net.forward_on(&mut tape, x, false).is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let a = Network::new(small_config()).unwrap();
        let b = Network::new(small_config()).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor.data(), pb.tensor.data());
        }
        let c = Network::new(NetworkConfig { seed: 8, ..small_config() }).unwrap();
        let differs = a
            .params()
            .iter()
            .zip(c.params())
            .any(|(pa, pc)| pa.tensor.data() != pc.tensor.data());
        assert!(differs);
    }

    #[test]
    fn biases_start_at_zero() {
        let net = Network::new(small_config()).unwrap();
        for p in net.params() {
            if p.name.ends_with(".bias") {
                assert!(p.tensor.data().iter().all(|&v| v == 0.0), "{}", p.name);
            }
        }
    }

    #[test]
    fn predict_probabilities_sum_to_one() {
        let net = Network::new(small_config()).unwrap();
        let data: Vec<f32> = (0..64).map(|v| (v as f32 * 0.17).sin()).collect();
        let input = Tensor::new(vec![1, 1, 8, 8], data).unwrap();
        let (probs, maps) = net.predict(&input).unwrap();
        let (_, c, h, w) = probs.dims4().unwrap();
        assert_eq!((c, h, w), (5, 8, 8));
        for p in 0..h * w {
            let sum: f32 = (0..c).map(|ch| probs.data()[ch * h * w + p]).sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
        assert_eq!(maps.len(), 1);
        assert_eq!((maps[0].width(), maps[0].height()), (8, 8));
    }

    #[test]
    fn skip_path_carries_signal_when_bottleneck_is_dead() {
        let mut net = Network::new(small_config()).unwrap();
        // Zero the deepest stage entirely: whatever reaches the decoder
        // through upsampling is then constant, so any input sensitivity
        // must travel the skip concatenation.
        for p in net.params_mut() {
            if p.name.starts_with("enc1.") {
                p.tensor.data_mut().fill(0.0);
            }
        }
        let a = Tensor::zeros(vec![1, 1, 8, 8]);
        let b = Tensor::full(vec![1, 1, 8, 8], 1.0);
        let (pa, _) = net.predict(&a).unwrap();
        let (pb, _) = net.predict(&b).unwrap();
        let max_diff = pa
            .data()
            .iter()
            .zip(pb.data())
            .map(|(&x, &y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff > 1e-6, "skip connection appears disconnected");
    }

    #[test]
    fn config_validation_catches_bad_values() {
        assert!(NetworkConfig { classes: 1, ..small_config() }.validate().is_err());
        assert!(NetworkConfig { widths: vec![], ..small_config() }.validate().is_err());
        assert!(NetworkConfig { input_channels: 0, ..small_config() }.validate().is_err());
        assert!(NetworkConfig { widths: vec![4, 0], ..small_config() }.validate().is_err());
    }
}
