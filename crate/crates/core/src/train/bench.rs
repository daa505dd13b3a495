//! Discriminator forward timing.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::disc::WaveUNet;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor3};

/// A model that can be timed by [`benchmark_disc`].
pub trait Discriminator {
    fn name(&self) -> &'static str;
    fn param_count(&self) -> usize;
    fn forward_only(&self, wave: &Tensor3<f32>) -> Result<()>;
}

impl Discriminator for WaveUNet<f32> {
    fn name(&self) -> &'static str {
        "waveunet"
    }

    fn param_count(&self) -> usize {
        WaveUNet::param_count(self)
    }

    fn forward_only(&self, wave: &Tensor3<f32>) -> Result<()> {
        self.infer(wave).map(|_| ())
    }
}

impl Discriminator for Ensemble<f32> {
    fn name(&self) -> &'static str {
        "ensemble"
    }

    fn param_count(&self) -> usize {
        Ensemble::param_count(self)
    }

    fn forward_only(&self, wave: &Tensor3<f32>) -> Result<()> {
        self.forward(wave).map(|_| ())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub model: String,
    pub params: usize,
    pub batch: usize,
    pub segment: usize,
    pub threads: usize,
    /// Seconds per batch (one real and one fake forward) for each timed run.
    pub times: Vec<f64>,
    pub median: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn noise<T: Real>(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor3<T> {
    Tensor3::new(
        shape,
        (0..shape.len()).map(|_| T::lit(rng.gen_range(-0.5..0.5))).collect(),
    )
    .expect("shape and data agree")
}

/// Median wall time of a real and a fake forward per batch, over `iters` runs
/// after `warmup` untimed ones. Runs on the calling thread only.
pub fn benchmark_disc(
    model: &dyn Discriminator,
    batch: usize,
    segment: usize,
    warmup: usize,
    iters: usize,
    seed: u64,
) -> Result<BenchResult> {
    if warmup == 0 || iters == 0 {
        return Err(Error::Usage("benchmark needs warmup >= 1 and iters >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let real = noise(&mut rng, Shape::new(batch, 1, segment));
    let fake = noise(&mut rng, Shape::new(batch, 1, segment));
    for _ in 0..warmup {
        model.forward_only(&real)?;
        model.forward_only(&fake)?;
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        model.forward_only(&real)?;
        model.forward_only(&fake)?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(BenchResult {
        model: model.name().to_string(),
        params: model.param_count(),
        batch,
        segment,
        threads: 1,
        median: median(&times),
        times,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disc::WaveUNetConfig;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn reports_every_iteration() {
        let d = WaveUNet::<f32>::new(
            WaveUNetConfig {
                base_channels: 2,
                ..WaveUNetConfig::default()
            },
            0,
        )
        .unwrap();
        let r = benchmark_disc(&d, 2, 1024, 1, 3, 0).unwrap();
        assert_eq!(r.times.len(), 3);
        assert!(r.median > 0.0);
        assert!(benchmark_disc(&d, 2, 1024, 0, 3, 0).is_err());
    }
}
