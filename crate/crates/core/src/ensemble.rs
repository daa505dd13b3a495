//! Multi-period plus multi-scale discriminator ensemble.
//!
//! Forward-only baseline used for size and speed comparisons. Layer specs
//! follow the widely used reference topology: five period discriminators that
//! fold the waveform into `period` columns and three scale discriminators
//! running on progressively average-pooled input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::disc::DiscOutput;
use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec};
use crate::nn::{Conv1d, ParamStore};
use crate::tensor::{Real, Shape, Tensor3};

/// One convolution of a sub-discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub padding: usize,
}

const fn layer(out_channels: usize, kernel: usize, stride: usize, groups: usize, padding: usize) -> LayerSpec {
    LayerSpec {
        out_channels,
        kernel,
        stride,
        groups,
        padding,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub periods: Vec<usize>,
    pub msd_scales: usize,
    /// Convolutions along each period column (the last one feeds `period_post`).
    pub period_layers: Vec<LayerSpec>,
    pub period_post: LayerSpec,
    pub scale_layers: Vec<LayerSpec>,
    pub scale_post: LayerSpec,
    /// Downsampling applied between successive scale discriminators.
    pub scale_pool: PoolSpec,
    pub lrelu_slope: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            periods: vec![2, 3, 5, 7, 11],
            msd_scales: 3,
            period_layers: vec![
                layer(32, 5, 3, 1, 2),
                layer(128, 5, 3, 1, 2),
                layer(512, 5, 3, 1, 2),
                layer(1024, 5, 3, 1, 2),
                layer(1024, 5, 1, 1, 2),
            ],
            period_post: layer(1, 3, 1, 1, 1),
            scale_layers: vec![
                layer(128, 15, 1, 1, 7),
                layer(128, 41, 2, 4, 20),
                layer(256, 41, 2, 16, 20),
                layer(512, 41, 4, 16, 20),
                layer(1024, 41, 4, 16, 20),
                layer(1024, 41, 1, 16, 20),
                layer(1024, 5, 1, 1, 2),
            ],
            scale_post: layer(1, 3, 1, 1, 1),
            scale_pool: PoolSpec {
                kernel: 4,
                stride: 2,
                padding: 2,
            },
            lrelu_slope: 0.1,
        }
    }
}

impl EnsembleConfig {
    pub fn sub_count(&self) -> usize {
        self.periods.len() + self.msd_scales
    }

    /// Trainable parameters, counted from the layer specs without building weights.
    pub fn param_count(&self) -> usize {
        let stack = |layers: &[LayerSpec], post: &LayerSpec| {
            let mut cin = 1;
            let mut n = 0;
            for l in layers.iter().chain(std::iter::once(post)) {
                n += l.out_channels * (cin / l.groups) * l.kernel + l.out_channels;
                cin = l.out_channels;
            }
            n
        };
        self.periods.len() * stack(&self.period_layers, &self.period_post)
            + self.msd_scales * stack(&self.scale_layers, &self.scale_post)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::config(format!("{key}: {why}")));
        if self.periods.contains(&0) {
            return bad("periods", "every period must be >= 1".into());
        }
        if self.periods.windows(2).any(|w| w[0] >= w[1]) {
            return bad("periods", "must be strictly increasing".into());
        }
        if self.sub_count() == 0 {
            return bad("msd_scales", "ensemble has no sub-discriminators".into());
        }
        for (key, layers, post) in [
            ("period_layers", &self.period_layers, &self.period_post),
            ("scale_layers", &self.scale_layers, &self.scale_post),
        ] {
            let mut cin = 1;
            for (i, l) in layers.iter().chain(std::iter::once(post)).enumerate() {
                if l.kernel == 0 || l.stride == 0 || l.groups == 0 || l.out_channels == 0 {
                    return bad(key, format!("layer {i} has a zero field"));
                }
                if cin % l.groups != 0 || l.out_channels % l.groups != 0 {
                    return bad(
                        key,
                        format!("layer {i}: {} groups do not divide {cin} -> {}", l.groups, l.out_channels),
                    );
                }
                cin = l.out_channels;
            }
        }
        if self.scale_pool.kernel == 0 || self.scale_pool.stride == 0 {
            return bad("scale_pool", "kernel and stride must be >= 1".into());
        }
        if self.scale_pool.padding * 2 > self.scale_pool.kernel {
            return bad("scale_pool", "padding must be at most half the kernel".into());
        }
        if !(self.lrelu_slope >= 0.0) {
            return bad("lrelu_slope", "must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubKind {
    Period(usize),
    /// Number of pooling stages applied to the input.
    Scale(usize),
}

#[derive(Debug, Clone)]
struct SubDisc {
    kind: SubKind,
    convs: Vec<Conv1d>,
    post: Conv1d,
}

#[derive(Debug, Clone)]
pub struct Ensemble<T> {
    config: EnsembleConfig,
    params: ParamStore<T>,
    subs: Vec<SubDisc>,
}

fn build_stack<T: Real>(
    params: &mut ParamStore<T>,
    prefix: &str,
    layers: &[LayerSpec],
    post: &LayerSpec,
    rng: &mut ChaCha8Rng,
) -> (Vec<Conv1d>, Conv1d) {
    let mut cin = 1;
    let mut make = |name: String, l: &LayerSpec, cin: usize| {
        Conv1d::new(
            params,
            &name,
            cin,
            l.out_channels,
            l.kernel,
            ConvSpec::grouped(l.stride, l.padding, l.groups),
            rng,
        )
    };
    let mut convs = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        convs.push(make(format!("{prefix}.conv{i}"), l, cin));
        cin = l.out_channels;
    }
    let post = make(format!("{prefix}.post"), post, cin);
    (convs, post)
}

impl<T: Real> Ensemble<T> {
    pub fn new(config: EnsembleConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut subs = Vec::with_capacity(config.sub_count());
        for &p in &config.periods {
            let (convs, post) = build_stack(
                &mut params,
                &format!("mpd.{p}"),
                &config.period_layers,
                &config.period_post,
                &mut rng,
            );
            subs.push(SubDisc {
                kind: SubKind::Period(p),
                convs,
                post,
            });
        }
        for s in 0..config.msd_scales {
            let (convs, post) = build_stack(
                &mut params,
                &format!("msd.{s}"),
                &config.scale_layers,
                &config.scale_post,
                &mut rng,
            );
            subs.push(SubDisc {
                kind: SubKind::Scale(s),
                convs,
                post,
            });
        }
        Ok(Self {
            config,
            params,
            subs,
        })
    }

    pub fn config(&self) -> &EnsembleConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn kinds(&self) -> Vec<SubKind> {
        self.subs.iter().map(|s| s.kind).collect()
    }

    /// One output per sub-discriminator, periods first.
    ///
    /// Period outputs keep the folded layout: features are
    /// `[batch * period, channels, rows]` and the score is flattened to
    /// `[batch, 1, rows * period]` in row-major `(row, column)` order.
    pub fn forward(&self, wave: &Tensor3<T>) -> Result<Vec<DiscOutput<T>>> {
        let s = wave.shape();
        if s.channels != 1 {
            return Err(Error::shape(format!(
                "ensemble expects mono input [batch, 1, time], got {s}"
            )));
        }
        if s.time == 0 {
            return Err(Error::shape("ensemble input is empty"));
        }
        let slope = T::lit(self.config.lrelu_slope);
        let mut pooled = wave.clone();
        let mut pool_level = 0;
        let mut outputs = Vec::with_capacity(self.subs.len());
        for sub in &self.subs {
            let (x, period) = match sub.kind {
                SubKind::Period(p) => (fold_periods(wave, p)?, p),
                SubKind::Scale(level) => {
                    while pool_level < level {
                        pooled = avg_pool(&pooled, self.config.scale_pool)?;
                        pool_level += 1;
                    }
                    (pooled.clone(), 1)
                }
            };
            outputs.push(self.run_stack(sub, x, slope, s.batch, period)?);
        }
        Ok(outputs)
    }

    fn run_stack(
        &self,
        sub: &SubDisc,
        mut x: Tensor3<T>,
        slope: T,
        batch: usize,
        period: usize,
    ) -> Result<DiscOutput<T>> {
        let mut features = Vec::with_capacity(sub.convs.len() + 1);
        for conv in &sub.convs {
            x = kernels::leaky_relu(&conv.apply(&self.params, &x)?, slope);
            features.push(x.clone());
        }
        let y = sub.post.apply(&self.params, &x)?;
        features.push(y.clone());
        let score = if period == 1 {
            y
        } else {
            unfold_periods(&y, batch, period)?
        };
        Ok(DiscOutput {
            score_map: score,
            features,
        })
    }
}

/// Length after right-padding `time` to a multiple of `period`.
pub fn padded_len(time: usize, period: usize) -> usize {
    time.div_ceil(period) * period
}

/// `[batch, 1, time]` -> `[batch * period, 1, rows]` with reflect right padding.
/// Column `j` of item `b` holds samples `j, j + period, ...`.
pub fn fold_periods<T: Real>(x: &Tensor3<T>, period: usize) -> Result<Tensor3<T>> {
    let s = x.shape();
    let len = padded_len(s.time, period);
    if len - s.time >= s.time {
        return Err(Error::shape(format!(
            "input of {} samples is too short to reflect-pad to period {period}",
            s.time
        )));
    }
    let rows = len / period;
    let mut out = vec![T::zero(); s.batch * len];
    for b in 0..s.batch {
        let src = x.item(b);
        let dst = &mut out[b * len..(b + 1) * len];
        for i in 0..len {
            // reflect without repeating the edge sample
            let v = if i < s.time { src[i] } else { src[2 * (s.time - 1) - i] };
            let (row, col) = (i / period, i % period);
            dst[col * rows + row] = v;
        }
    }
    Tensor3::new(Shape::new(s.batch * period, 1, rows), out)
}

/// Inverse of the column fold for a single-channel map.
fn unfold_periods<T: Real>(y: &Tensor3<T>, batch: usize, period: usize) -> Result<Tensor3<T>> {
    let s = y.shape();
    let rows = s.time;
    let mut out = vec![T::zero(); batch * rows * period];
    for b in 0..batch {
        for col in 0..period {
            let src = y.item(b * period + col);
            for row in 0..rows {
                out[b * rows * period + row * period + col] = src[row];
            }
        }
    }
    Tensor3::new(Shape::new(batch, 1, rows * period), out)
}

/// Average pooling with zero padding counted in the divisor.
pub fn avg_pool<T: Real>(x: &Tensor3<T>, pool: PoolSpec) -> Result<Tensor3<T>> {
    let s = x.shape();
    let t_out = kernels::conv_out_len(s.time, pool.kernel, pool.stride, pool.padding)
        .ok_or_else(|| Error::shape(format!("time {} too short to pool", s.time)))?;
    let inv = T::one() / T::from_usize(pool.kernel).unwrap();
    let mut out = Vec::with_capacity(s.batch * s.channels * t_out);
    for row in x.data().chunks(s.time) {
        for t in 0..t_out {
            let start = (t * pool.stride) as isize - pool.padding as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + pool.kernel as isize).max(0) as usize).min(s.time);
            let sum = row[lo.min(hi)..hi].iter().fold(T::zero(), |a, &v| a + v);
            out.push(sum * inv);
        }
    }
    Tensor3::new(Shape::new(s.batch, s.channels, t_out), out)
}
