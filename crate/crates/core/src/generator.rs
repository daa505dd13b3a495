//! Small mel-to-waveform generator used to drive adversarial training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvSpec;
use crate::nn::{Bound, Conv1d, ConvTranspose1d, ParamStore};
use crate::tensor::{Real, Tensor3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_mels: usize,
    /// Upsampling factor of each stage; their product is samples per mel frame.
    pub up_strides: Vec<usize>,
    /// Width after the input conv; halved by every stage.
    pub base_channels: usize,
    pub io_kernel: usize,
    pub res_kernel: usize,
    pub lrelu_slope: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            up_strides: vec![8, 8, 2, 2],
            base_channels: 256,
            io_kernel: 7,
            res_kernel: 3,
            lrelu_slope: 0.1,
        }
    }
}

impl GeneratorConfig {
    pub fn total_stride(&self) -> usize {
        self.up_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::config(format!("{key}: {why}")));
        if self.n_mels == 0 {
            return bad("n_mels", "must be >= 1");
        }
        if self.up_strides.is_empty() || self.up_strides.contains(&0) {
            return bad("up_strides", "needs at least one stride, all >= 1");
        }
        let halvings = 1usize << self.up_strides.len();
        if self.base_channels == 0 || self.base_channels % halvings != 0 {
            return bad(
                "base_channels",
                "must stay a positive integer after halving once per stage",
            );
        }
        if self.io_kernel % 2 == 0 || self.res_kernel % 2 == 0 {
            return bad("io_kernel", "input/output and residual kernels must be odd");
        }
        if !(self.lrelu_slope >= 0.0) {
            return bad("lrelu_slope", "must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Stage {
    upsample: ConvTranspose1d,
    res1: Conv1d,
    res2: Conv1d,
}

#[derive(Debug, Clone)]
pub struct Generator<T> {
    config: GeneratorConfig,
    params: ParamStore<T>,
    input: Conv1d,
    stages: Vec<Stage>,
    output: Conv1d,
}

impl<T: Real> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut ch = config.base_channels;
        let input = Conv1d::new(
            &mut params,
            "input",
            config.n_mels,
            ch,
            config.io_kernel,
            ConvSpec::new(1, config.io_kernel / 2),
            &mut rng,
        );
        let rk = config.res_kernel;
        let mut stages = Vec::with_capacity(config.up_strides.len());
        for (i, &s) in config.up_strides.iter().enumerate() {
            let out = ch / 2;
            // kernel = s + 2 * (s / 2) with padding s / 2 upsamples exactly by s
            let pad = s / 2;
            stages.push(Stage {
                upsample: ConvTranspose1d::new(
                    &mut params,
                    &format!("stage.{i}.upsample"),
                    ch,
                    out,
                    s + 2 * pad,
                    s,
                    pad,
                    &mut rng,
                ),
                res1: Conv1d::new(
                    &mut params,
                    &format!("stage.{i}.res1"),
                    out,
                    out,
                    rk,
                    ConvSpec::new(1, rk / 2),
                    &mut rng,
                ),
                res2: Conv1d::new(
                    &mut params,
                    &format!("stage.{i}.res2"),
                    out,
                    out,
                    rk,
                    ConvSpec::new(1, rk / 2),
                    &mut rng,
                ),
            });
            ch = out;
        }
        let output = Conv1d::new(
            &mut params,
            "output",
            ch,
            1,
            config.io_kernel,
            ConvSpec::new(1, config.io_kernel / 2),
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            input,
            stages,
            output,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
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

    /// Records `[batch, n_mels, frames] -> [batch, 1, frames * total_stride]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, mel: Var) -> Result<Var> {
        let s = g.shape(mel);
        if s.channels != self.config.n_mels {
            return Err(Error::shape(format!(
                "generator expects {} mel bands, got {}",
                self.config.n_mels, s.channels
            )));
        }
        let slope = T::lit(self.config.lrelu_slope);
        let mut h = self.input.forward(g, p, mel)?;
        for stage in &self.stages {
            let a = g.leaky_relu(h, slope);
            h = stage.upsample.forward(g, p, a)?;
            let r = g.leaky_relu(h, slope);
            let r = stage.res1.forward(g, p, r)?;
            let r = g.leaky_relu(r, slope);
            let r = stage.res2.forward(g, p, r)?;
            h = g.add(h, r)?;
        }
        let a = g.leaky_relu(h, slope);
        let y = self.output.forward(g, p, a)?;
        Ok(g.tanh(y))
    }

    /// Waveform for a `[batch, n_mels, frames]` tensor, without gradients.
    pub fn generate(&self, mel: &Tensor3<T>) -> Result<Tensor3<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let m = g.constant(mel.clone());
        let y = self.forward(&mut g, &p, m)?;
        Ok(g.value(y).clone())
    }
}
