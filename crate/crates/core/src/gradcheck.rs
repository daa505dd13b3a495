//! Float64 finite-difference checks of every differentiable op and of the
//! composed discriminator and generator.
//!
//! Each check reduces the op's output to a scalar with a fixed random
//! projection, then compares the tape gradient of a sample of input entries
//! against the central difference `(L(x + h) - L(x - h)) / 2h`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::disc::{WaveUNet, WaveUNetConfig};
use crate::error::Result;
use crate::generator::{Generator, GeneratorConfig};
use crate::graph::{Graph, Var};
use crate::kernels::ConvSpec;
use crate::losses::{self, LossWeights};
use crate::nn::Bound;
use crate::signal::mel::{LogMel, MelConfig};
use crate::tensor::{Shape, Tensor3};

pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub results: Vec<CheckResult>,
}

impl Report {
    pub fn max_rel_err(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < TOLERANCE
    }

    pub fn worst(&self) -> Option<&CheckResult> {
        self.results
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Finite-difference check of `build` with respect to every tensor in `inputs`.
///
/// At most `samples` entries per input are perturbed.
pub fn check(
    name: &str,
    inputs: &[Tensor3<f64>],
    samples: usize,
    rng: &mut ChaCha8Rng,
    build: &Build<'_>,
) -> Result<CheckResult> {
    let eval = |values: &[Tensor3<f64>], proj: Option<&Tensor3<f64>>| -> Result<(Graph<f64>, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|v| g.param(v.clone())).collect();
        let out = build(&mut g, &vars)?;
        let loss = match proj {
            Some(p) => g.dot(out, p.clone())?,
            None => out,
        };
        Ok((g, loss, vars))
    };

    let (probe, out, _) = eval(inputs, None)?;
    let out_shape = probe.shape(out);
    let proj = Tensor3::new(
        out_shape,
        (0..out_shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;

    let (g, loss, vars) = eval(inputs, Some(&proj))?;
    let grads = g.backward(loss)?;
    let mut worst = 0.0f64;
    let mut entries = 0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], input.len());
        let picks: Vec<usize> = if input.len() <= samples {
            (0..input.len()).collect()
        } else {
            (0..samples).map(|_| rng.gen_range(0..input.len())).collect()
        };
        for j in picks {
            let mut shifted = inputs.to_vec();
            shifted[i].data_mut()[j] += STEP;
            let (gp, lp, _) = eval(&shifted, Some(&proj))?;
            shifted[i].data_mut()[j] -= 2.0 * STEP;
            let (gm, lm, _) = eval(&shifted, Some(&proj))?;
            let numeric = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
            entries += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        entries,
        max_rel_err: worst,
    })
}

fn randn(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor3<f64> {
    Tensor3::new(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("shape and data agree")
}

/// Random values kept at least `gap` away from zero, so kinks are not crossed.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape, gap: f64) -> Tensor3<f64> {
    randn(rng, shape).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

pub fn tiny_disc_config() -> WaveUNetConfig {
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

pub fn tiny_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        n_mels: 4,
        up_strides: vec![2, 3],
        base_channels: 8,
        ..GeneratorConfig::default()
    }
}

pub fn tiny_mel_config() -> MelConfig {
    MelConfig {
        n_fft: 32,
        hop: 8,
        win: 24,
        n_mels: 6,
        ..MelConfig::default()
    }
}

/// Runs the full suite.
pub fn run_suite(seed: u64) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut results = Vec::new();
    const N: usize = 12;

    let x = randn(r, Shape::new(2, 4, 11));
    let w = randn(r, Shape::new(6, 2, 3));
    let b = randn(r, Shape::new(1, 1, 6));
    results.push(check("conv1d", &[x, w, b], N, r, &|g, v| {
        g.conv1d(v[0], v[1], Some(v[2]), ConvSpec::grouped(2, 1, 2))
    })?);

    let x = randn(r, Shape::new(2, 3, 7));
    let w = randn(r, Shape::new(3, 2, 5));
    let b = randn(r, Shape::new(1, 1, 2));
    results.push(check("conv_transpose1d", &[x, w, b], N, r, &|g, v| {
        g.conv_transpose1d(v[0], v[1], Some(v[2]), 3, 1)
    })?);

    let x = away_from_zero(r, Shape::new(2, 3, 5), 0.05);
    results.push(check("leaky_relu", &[x], N, r, &|g, v| Ok(g.leaky_relu(v[0], 0.1)))?);

    let x = randn(r, Shape::new(3, 2, 6));
    results.push(check("global_norm", &[x], N, r, &|g, v| Ok(g.global_norm(v[0])))?);

    let a = randn(r, Shape::new(2, 3, 4));
    let s = randn(r, Shape::new(2, 3, 4));
    results.push(check("residual_combine", &[a, s], N, r, &|g, v| {
        g.residual_combine(v[0], v[1], 0.4)
    })?);

    let x = randn(r, Shape::new(2, 2, 3));
    results.push(check("duplicate_channels", &[x], N, r, &|g, v| {
        g.duplicate_channels(v[0], 3)
    })?);

    let x = randn(r, Shape::new(2, 6, 3));
    results.push(check("group_mean_channels", &[x], N, r, &|g, v| {
        g.group_mean_channels(v[0], 2)
    })?);

    let x = randn(r, Shape::new(2, 5, 3));
    results.push(check("slice_channels", &[x], N, r, &|g, v| {
        g.slice_channels(v[0], 1, 3)
    })?);

    let a = randn(r, Shape::new(2, 2, 3));
    let c = randn(r, Shape::new(2, 3, 3));
    results.push(check("concat_channels", &[a, c], N, r, &|g, v| {
        g.concat_channels(v[0], v[1])
    })?);

    let x = randn(r, Shape::new(2, 2, 9));
    results.push(check("trim_time", &[x], N, r, &|g, v| g.trim_time(v[0], 5))?);

    let a = randn(r, Shape::new(2, 2, 3));
    let c = randn(r, Shape::new(2, 2, 3));
    results.push(check("add", &[a, c], N, r, &|g, v| g.add(v[0], v[1]))?);

    let x = randn(r, Shape::new(2, 2, 5));
    results.push(check("tanh", &[x], N, r, &|g, v| Ok(g.tanh(v[0])))?);

    let x = randn(r, Shape::new(2, 1, 7));
    results.push(check("mse_to", &[x], N, r, &|g, v| Ok(g.mse_to(v[0], 1.0)))?);

    let a = randn(r, Shape::new(2, 2, 4));
    let gap = away_from_zero(r, Shape::new(2, 2, 4), 0.05);
    let c = Tensor3::new(
        a.shape(),
        a.data().iter().zip(gap.data()).map(|(x, d)| x + d).collect(),
    )?;
    results.push(check("l1_mean", &[a, c], N, r, &|g, v| g.l1_mean(v[0], v[1]))?);

    let x = randn(r, Shape::new(2, 3, 4));
    results.push(check("mean", std::slice::from_ref(&x), N, r, &|g, v| Ok(g.mean(v[0])))?);
    results.push(check("sum", &[x], N, r, &|g, v| Ok(g.sum(v[0])))?);

    let x = randn(r, Shape::new(2, 2, 3));
    let wts = randn(r, Shape::new(2, 2, 3));
    results.push(check("dot", &[x], N, r, &|g, v| g.dot(v[0], wts.clone()))?);

    let a = randn(r, Shape::scalar());
    let c = randn(r, Shape::scalar());
    results.push(check("linear", &[a, c], N, r, &|g, v| {
        g.linear(&[(v[0], 2.0), (v[1], -0.5)])
    })?);

    let mel = Arc::new(LogMel::<f64>::new(&tiny_mel_config())?);
    // tonal signal keeps every mel band well above the log floor
    let wave = Tensor3::new(
        Shape::new(2, 1, 64),
        (0..128)
            .map(|i| {
                let t = (i % 64) as f64;
                0.6 * (0.9 * t + (i / 64) as f64).sin() + 0.3 * (2.3 * t).cos() + 0.2 * r.gen_range(-1.0..1.0)
            })
            .collect(),
    )?;
    {
        let mel = Arc::clone(&mel);
        results.push(check("log_mel", std::slice::from_ref(&wave), 24, r, &move |g, v| {
            g.log_mel(v[0], &mel)
        })?);
    }

    results.extend(check_discriminator(r)?);
    results.push(check_generator(r, &mel)?);
    Ok(Report { results })
}

fn check_discriminator(r: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let d = WaveUNet::<f64>::new(tiny_disc_config(), r.gen())?;
    let wave = randn(r, Shape::new(2, 1, 37));
    let mut inputs = vec![wave.clone()];
    inputs.extend(d.params().values().iter().cloned());

    let score = check("waveunet.score", &inputs, 4, r, &|g, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        Ok(d.forward(g, &p, v[0])?.score)
    })?;

    // every feature map at once through a smooth reduction
    let features = check("waveunet.features", &inputs, 4, r, &|g, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        let out = d.forward(g, &p, v[0])?;
        let terms: Vec<(Var, f64)> = out.features.iter().map(|&f| (g.mse_to(f, 0.0), 1.0)).collect();
        g.linear(&terms)
    })?;

    let fake = randn(r, Shape::new(2, 1, 37));
    let adv = check("waveunet.adv_loss_d", &inputs, 3, r, &|g, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        let real = d.forward(g, &p, v[0])?;
        let fake_wave = g.constant(fake.clone());
        let fake = d.forward(g, &p, fake_wave)?;
        losses::adv_loss_d(g, real.score, fake.score)
    })?;
    Ok(vec![score, features, adv])
}

/// Full generator objective through a frozen discriminator.
fn check_generator(r: &mut ChaCha8Rng, mel: &Arc<LogMel<f64>>) -> Result<CheckResult> {
    let gen = Generator::<f64>::new(tiny_generator_config(), r.gen())?;
    let d = WaveUNet::<f64>::new(tiny_disc_config(), r.gen())?;
    let mel_in = randn(r, Shape::new(2, 4, 6));
    let real = randn(r, Shape::new(2, 1, 36)).map(|v| 0.5 * v);
    let weights = LossWeights::default();
    let mut inputs = vec![mel_in];
    inputs.extend(gen.params().values().iter().cloned());
    check("generator.total", &inputs, 3, r, &|g, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        let fake = gen.forward(g, &p, v[0])?;
        let dp = d.params().bind(g, false);
        let real_v = g.constant(real.clone());
        let real_out = d.forward(g, &dp, real_v)?;
        let fake_out = d.forward(g, &dp, fake)?;
        let adv = losses::adv_loss_g(g, fake_out.score);
        let fm = losses::feature_matching_vars(g, &real_out, &fake_out)?;
        let recon = losses::mel_loss(g, mel, real_v, fake)?;
        g.linear(&[
            (adv, 1.0),
            (fm, weights.feature_matching),
            (recon, weights.mel),
        ])
    })
}
