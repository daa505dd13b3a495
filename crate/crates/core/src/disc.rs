//! Wave-U-Net discriminator.
//!
//! An encoder of strided residual blocks, a stride-1 bottleneck block and a
//! decoder of transposed-convolution residual blocks fed by skip
//! concatenations. The output head scores every input sample, so the score
//! map has exactly the input's time resolution.
//!
//! Every residual block runs `conv -> global norm -> lrelu -> conv -> global
//! norm -> lrelu` on its main path and combines it with a resampled shortcut
//! as `(main + shortcut) * residual_scale`. Global normalization is the only
//! normalization and carries no parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{conv_out_len, ConvSpec};
use crate::nn::{Bound, Conv1d, ConvTranspose1d, ParamStore};
use crate::tensor::{Real, Tensor3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaveUNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    /// Channel width of level `l` is `base_channels * channel_multipliers[l]`.
    pub channel_multipliers: Vec<usize>,
    /// Encoder strides; the decoder mirrors them in reverse.
    pub down_strides: Vec<usize>,
    /// Kernel of the input and output convolutions.
    pub io_kernel: usize,
    /// Kernel of every convolution inside the residual blocks.
    pub block_kernel: usize,
    pub residual_scale: f64,
    pub lrelu_slope: f64,
}

impl Default for WaveUNetConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 24,
            channel_multipliers: vec![2, 4, 8, 16],
            down_strides: vec![4, 4, 4, 4],
            io_kernel: 15,
            block_kernel: 5,
            residual_scale: 0.4,
            lrelu_slope: 0.1,
        }
    }
}

impl WaveUNetConfig {
    /// Channel widths from the input conv (`[0]`) to the deepest level.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.base_channels)
            .chain(self.channel_multipliers.iter().map(|m| m * self.base_channels))
            .collect()
    }

    pub fn total_stride(&self) -> usize {
        self.down_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::config(format!("{key}: {why}")));
        if self.levels == 0 {
            return bad("levels", "must be >= 1".into());
        }
        if self.base_channels == 0 {
            return bad("base_channels", "must be >= 1".into());
        }
        if self.channel_multipliers.len() != self.levels {
            return bad(
                "channel_multipliers",
                format!("needs {} entries, has {}", self.levels, self.channel_multipliers.len()),
            );
        }
        if self.down_strides.len() != self.levels {
            return bad(
                "down_strides",
                format!("needs {} entries, has {}", self.levels, self.down_strides.len()),
            );
        }
        if self.down_strides.contains(&0) {
            return bad("down_strides", "strides must be >= 1".into());
        }
        if self.io_kernel == 0 || self.io_kernel % 2 == 0 {
            return bad("io_kernel", "must be odd".into());
        }
        if self.block_kernel % 2 == 0 {
            return bad("block_kernel", "must be odd".into());
        }
        let max_stride = self.down_strides.iter().copied().max().unwrap_or(1);
        if self.block_kernel < max_stride {
            return bad(
                "block_kernel",
                format!("must be >= the largest stride ({max_stride}) so upsampling covers every skip"),
            );
        }
        let widths = self.widths();
        for l in 1..widths.len() {
            if widths[l] == 0 || widths[l] % widths[l - 1] != 0 {
                return bad(
                    "channel_multipliers",
                    format!(
                        "level {} width {} must be a positive multiple of {}",
                        l - 1,
                        widths[l],
                        widths[l - 1]
                    ),
                );
            }
        }
        if !(self.residual_scale.is_finite() && self.residual_scale > 0.0) {
            return bad("residual_scale", "must be positive".into());
        }
        if !(self.lrelu_slope.is_finite() && self.lrelu_slope >= 0.0) {
            return bad("lrelu_slope", "must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DownBlock {
    conv1: Conv1d,
    conv2: Conv1d,
    shortcut: Conv1d,
    dup: usize,
}

#[derive(Debug, Clone)]
struct MidBlock {
    conv1: Conv1d,
    conv2: Conv1d,
}

#[derive(Debug, Clone)]
struct UpBlock {
    conv1: ConvTranspose1d,
    conv2: Conv1d,
    shortcut: ConvTranspose1d,
    out_ch: usize,
}

/// Graph handles produced by [`WaveUNet::forward`].
#[derive(Debug, Clone)]
pub struct DiscVars {
    pub score: Var,
    /// Input conv, every residual block, output conv; input to output order.
    pub features: Vec<Var>,
}

/// Evaluated discriminator output.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscOutput<T> {
    /// `[batch, 1, time]`, one score per input sample.
    pub score_map: Tensor3<T>,
    pub features: Vec<Tensor3<T>>,
}

impl<T: Real> DiscOutput<T> {
    pub fn from_vars(g: &Graph<T>, vars: &DiscVars) -> Self {
        Self {
            score_map: g.value(vars.score).clone(),
            features: vars.features.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WaveUNet<T> {
    config: WaveUNetConfig,
    params: ParamStore<T>,
    input: Conv1d,
    down: Vec<DownBlock>,
    mid: MidBlock,
    up: Vec<UpBlock>,
    output: Conv1d,
}

impl<T: Real> WaveUNet<T> {
    /// Builds the network with seeded Kaiming-uniform weights.
    pub fn new(config: WaveUNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let widths = config.widths();
        let k = config.block_kernel;
        let pad = k / 2;

        let input = Conv1d::new(
            &mut params,
            "input",
            1,
            widths[0],
            config.io_kernel,
            ConvSpec::new(1, config.io_kernel / 2),
            &mut rng,
        );
        let mut down = Vec::with_capacity(config.levels);
        for (l, &stride) in config.down_strides.iter().enumerate() {
            let (cin, cout) = (widths[l], widths[l + 1]);
            let name = format!("down.{l}");
            down.push(DownBlock {
                conv1: Conv1d::new(
                    &mut params,
                    &format!("{name}.conv1"),
                    cin,
                    cout,
                    k,
                    ConvSpec::new(stride, pad),
                    &mut rng,
                ),
                conv2: Conv1d::new(
                    &mut params,
                    &format!("{name}.conv2"),
                    cout,
                    cout,
                    k,
                    ConvSpec::new(1, pad),
                    &mut rng,
                ),
                shortcut: Conv1d::new(
                    &mut params,
                    &format!("{name}.shortcut"),
                    cin,
                    cin,
                    k,
                    ConvSpec::new(stride, pad),
                    &mut rng,
                ),
                dup: cout / cin,
            });
        }
        let deep = widths[config.levels];
        let mid = MidBlock {
            conv1: Conv1d::new(&mut params, "mid.conv1", deep, deep, k, ConvSpec::new(1, pad), &mut rng),
            conv2: Conv1d::new(&mut params, "mid.conv2", deep, deep, k, ConvSpec::new(1, pad), &mut rng),
        };
        let mut up = Vec::with_capacity(config.levels);
        for l in (0..config.levels).rev() {
            let (cin, cout) = (2 * widths[l + 1], widths[l]);
            let stride = config.down_strides[l];
            let name = format!("up.{l}");
            up.push(UpBlock {
                conv1: ConvTranspose1d::new(
                    &mut params,
                    &format!("{name}.conv1"),
                    cin,
                    cout,
                    k,
                    stride,
                    0,
                    &mut rng,
                ),
                conv2: Conv1d::new(
                    &mut params,
                    &format!("{name}.conv2"),
                    cout,
                    cout,
                    k,
                    ConvSpec::new(1, pad),
                    &mut rng,
                ),
                shortcut: ConvTranspose1d::new(
                    &mut params,
                    &format!("{name}.shortcut"),
                    cout,
                    cout,
                    k,
                    stride,
                    0,
                    &mut rng,
                ),
                out_ch: cout,
            });
        }
        let output = Conv1d::new(
            &mut params,
            "output",
            widths[0],
            1,
            config.io_kernel,
            ConvSpec::new(1, config.io_kernel / 2),
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            input,
            down,
            mid,
            up,
            output,
        })
    }

    pub fn config(&self) -> &WaveUNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Number of feature maps [`WaveUNet::forward`] reports.
    pub fn feature_count(&self) -> usize {
        2 * self.config.levels + 3
    }

    /// Time length after each encoder level for an input of `time` samples.
    pub fn level_lengths(&self, time: usize) -> Vec<usize> {
        let k = self.config.block_kernel;
        let mut lens = vec![time];
        for &s in &self.config.down_strides {
            let last = *lens.last().unwrap();
            lens.push(conv_out_len(last, k, s, k / 2).unwrap_or(0));
        }
        lens
    }

    fn gn_lrelu(&self, g: &mut Graph<T>, x: Var) -> Var {
        let n = g.global_norm(x);
        g.leaky_relu(n, T::lit(self.config.lrelu_slope))
    }

    /// Records the forward pass of a `[batch, 1, time]` waveform.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, wave: Var) -> Result<DiscVars> {
        let s = g.shape(wave);
        if s.channels != 1 {
            return Err(Error::shape(format!(
                "discriminator expects 1-channel audio, got {s}"
            )));
        }
        if s.time == 0 || s.batch == 0 {
            return Err(Error::shape("discriminator input is empty"));
        }
        let scale = T::lit(self.config.residual_scale);
        let mut features = Vec::with_capacity(self.feature_count());

        let mut h = self.input.forward(g, p, wave)?;
        features.push(h);
        let mut skips = Vec::with_capacity(self.config.levels + 1);
        skips.push(h);
        for block in &self.down {
            let m = block.conv1.forward(g, p, h)?;
            let m = self.gn_lrelu(g, m);
            let m = block.conv2.forward(g, p, m)?;
            let m = self.gn_lrelu(g, m);
            let sc = block.shortcut.forward(g, p, h)?;
            let sc = g.duplicate_channels(sc, block.dup)?;
            h = g.residual_combine(m, sc, scale)?;
            features.push(h);
            skips.push(h);
        }

        let m = self.mid.conv1.forward(g, p, h)?;
        let m = self.gn_lrelu(g, m);
        let m = self.mid.conv2.forward(g, p, m)?;
        let m = self.gn_lrelu(g, m);
        h = g.residual_combine(m, h, scale)?;
        features.push(h);

        for block in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let target = g.shape(*skips.last().expect("shallower level exists")).time;
            let x = g.concat_channels(h, skip)?;
            let m = block.conv1.forward(g, p, x)?;
            let m = g.trim_time(m, target)?;
            let m = self.gn_lrelu(g, m);
            let m = block.conv2.forward(g, p, m)?;
            let m = self.gn_lrelu(g, m);
            let sc = g.group_mean_channels(x, block.out_ch)?;
            let sc = block.shortcut.forward(g, p, sc)?;
            let sc = g.trim_time(sc, target)?;
            h = g.residual_combine(m, sc, scale)?;
            features.push(h);
        }

        let score = self.output.forward(g, p, h)?;
        features.push(score);
        Ok(DiscVars { score, features })
    }

    /// Tape-backed forward without gradients.
    pub fn infer(&self, wave: &Tensor3<T>) -> Result<DiscOutput<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(wave.clone());
        let vars = self.forward(&mut g, &p, x)?;
        Ok(DiscOutput::from_vars(&g, &vars))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn tiny() -> WaveUNetConfig {
        WaveUNetConfig {
            levels: 2,
            base_channels: 2,
            channel_multipliers: vec![2, 4],
            down_strides: vec![4, 4],
            io_kernel: 5,
            block_kernel: 5,
            ..WaveUNetConfig::default()
        }
    }

    #[test]
    fn default_param_count_near_target() {
        let d = WaveUNet::<f32>::new(WaveUNetConfig::default(), 0).unwrap();
        let n = d.param_count() as f64;
        assert!((n / 4.9e6 - 1.0).abs() <= 0.05, "{n}");
    }

    #[test]
    fn default_bottleneck_length() {
        let d = WaveUNet::<f32>::new(WaveUNetConfig::default(), 0).unwrap();
        assert_eq!(d.level_lengths(8192), vec![8192, 2048, 512, 128, 32]);
        assert_eq!(d.config().total_stride(), 256);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = WaveUNet::<f32>::new(tiny(), 5).unwrap();
        let b = WaveUNet::<f32>::new(tiny(), 5).unwrap();
        let c = WaveUNet::<f32>::new(tiny(), 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn no_normalization_parameters() {
        let d = WaveUNet::<f32>::new(WaveUNetConfig::default(), 0).unwrap();
        assert!(d.params().names().iter().all(|n| n.ends_with(".weight") || n.ends_with(".bias")));
        assert!(d.params().names().iter().all(|n| !n.contains("norm")));
    }

    #[test]
    fn score_map_keeps_resolution_for_odd_lengths() {
        let d = WaveUNet::<f64>::new(tiny(), 1).unwrap();
        for t in [1usize, 7, 16, 33, 100] {
            let x = Tensor3::new(Shape::new(2, 1, t), (0..2 * t).map(|i| (i as f64).sin()).collect())
                .unwrap();
            let out = d.infer(&x).unwrap();
            assert_eq!(out.score_map.shape(), Shape::new(2, 1, t));
            assert_eq!(out.features.len(), 2 + 2 * 2 + 1);
            assert!(out.score_map.all_finite());
        }
    }

    #[test]
    fn rejects_bad_inputs_and_configs() {
        let d = WaveUNet::<f64>::new(tiny(), 1).unwrap();
        assert!(d.infer(&Tensor3::zeros(Shape::new(1, 2, 16))).is_err());
        assert!(d.infer(&Tensor3::zeros(Shape::new(1, 1, 0))).is_err());
        let mut cfg = tiny();
        cfg.channel_multipliers = vec![3, 4];
        let err = WaveUNet::<f64>::new(cfg, 0).unwrap_err().to_string();
        assert!(err.contains("channel_multipliers"), "{err}");
        let mut cfg = tiny();
        cfg.down_strides = vec![4];
        assert!(WaveUNet::<f64>::new(cfg, 0).is_err());
    }
}
