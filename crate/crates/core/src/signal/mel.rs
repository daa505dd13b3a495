//! STFT and log-mel extraction, including a differentiable log-mel transform
//! used by the mel reconstruction loss.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor3};

/// Log-mel extraction settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Mel energies are clamped to this floor before the log.
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            n_fft: 1024,
            hop: 256,
            win: 1024,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::config(format!("mel.{key}: {why}")));
        if self.n_fft < 2 || self.n_fft % 2 != 0 {
            return bad("n_fft", "must be an even number >= 2");
        }
        if self.hop == 0 {
            return bad("hop", "must be >= 1");
        }
        if self.win == 0 || self.win > self.n_fft {
            return bad("win", "must be in 1..=n_fft");
        }
        if self.n_mels == 0 {
            return bad("n_mels", "must be >= 1");
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax) {
            return bad("fmin", "must satisfy 0 <= fmin < fmax");
        }
        if self.fmax > self.sample_rate as f64 / 2.0 {
            return bad("fmax", "must not exceed the Nyquist frequency");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor", "must be positive");
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames produced by a centered STFT of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        len / self.hop + 1
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// Triangular filters on the Slaney mel scale with Slaney area normalization,
/// stored row-major `[n_mels, n_bins]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        cfg.validate()?;
        let n_bins = cfg.n_bins();
        let sr = cfg.sample_rate as f64;
        let fft_freqs: Vec<f64> = (0..n_bins)
            .map(|k| k as f64 * sr / cfg.n_fft as f64)
            .collect();
        let (mel_lo, mel_hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (hi - lo);
            for (k, &f) in fft_freqs.iter().enumerate() {
                let rising = (f - lo) / (mid - lo);
                let falling = (hi - f) / (hi - mid);
                weights[m * n_bins + k] = rising.min(falling).max(0.0) * norm;
            }
        }
        Ok(Self {
            n_mels: cfg.n_mels,
            n_bins,
            weights,
        })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }
}

/// Maps any integer index into `[0, len)` by repeated mirror reflection
/// (edge samples are not repeated).
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Periodic Hann window of length `win`, centered inside `n_fft` zeros.
fn hann_window(n_fft: usize, win: usize) -> Vec<f64> {
    let mut w = vec![0.0; n_fft];
    let offset = (n_fft - win) / 2;
    for n in 0..win {
        w[offset + n] = 0.5 - 0.5 * (2.0 * PI * n as f64 / win as f64).cos();
    }
    w
}

/// STFT + mel projection engine at a fixed precision.
pub struct LogMel<T: Real> {
    cfg: MelConfig,
    filterbank: Vec<T>,
    window: Vec<T>,
    fft: Arc<dyn Fft<T>>,
    ifft: Arc<dyn Fft<T>>,
}

impl<T: Real> std::fmt::Debug for LogMel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMel").field("cfg", &self.cfg).finish()
    }
}

/// Values the log-mel backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct LogMelCache<T> {
    /// Per batch item: `[n_bins, frames]` complex spectrum.
    spectra: Vec<Vec<Complex<T>>>,
    /// `[batch, n_mels, frames]` mel energies before the log.
    mel: Vec<T>,
    frames: usize,
    len: usize,
}

impl<T: Real> LogMel<T> {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        let fb = MelFilterbank::new(cfg)?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg: cfg.clone(),
            filterbank: fb.weights.iter().map(|&v| T::lit(v)).collect(),
            window: hann_window(cfg.n_fft, cfg.win)
                .into_iter()
                .map(T::lit)
                .collect(),
            fft: planner.plan_fft_forward(cfg.n_fft),
            ifft: planner.plan_fft_inverse(cfg.n_fft),
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Centered (reflect-padded) STFT, returned `[n_bins, frames]` bin-major.
    pub fn stft(&self, samples: &[T]) -> Result<Vec<Complex<T>>> {
        if samples.is_empty() {
            return Err(Error::shape("stft needs at least one sample"));
        }
        let n_fft = self.cfg.n_fft;
        let n_bins = self.cfg.n_bins();
        let frames = self.cfg.frame_count(samples.len());
        let half = (n_fft / 2) as isize;
        let mut spec = vec![Complex::new(T::zero(), T::zero()); n_bins * frames];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n_fft];
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); self.fft.get_inplace_scratch_len()];
        for f in 0..frames {
            let start = (f * self.cfg.hop) as isize - half;
            for (n, slot) in buf.iter_mut().enumerate() {
                let x = samples[reflect_index(start + n as isize, samples.len())];
                *slot = Complex::new(x * self.window[n], T::zero());
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..n_bins {
                spec[k * frames + f] = buf[k];
            }
        }
        Ok(spec)
    }

    /// `[n_mels, frames]` mel energies from `[n_bins, frames]` magnitudes.
    pub fn project(&self, magnitudes: &[T], frames: usize) -> Vec<T> {
        let (n_mels, n_bins) = (self.cfg.n_mels, self.cfg.n_bins());
        let mut mel = vec![T::zero(); n_mels * frames];
        T::gemm(
            n_mels,
            n_bins,
            frames,
            T::one(),
            &self.filterbank,
            n_bins as isize,
            1,
            magnitudes,
            frames as isize,
            1,
            T::zero(),
            &mut mel,
            frames as isize,
            1,
        );
        mel
    }

    /// Log-mel of every batch item of a 1-channel tensor: `[batch, n_mels, frames]`.
    pub fn forward(&self, x: &Tensor3<T>) -> Result<(Tensor3<T>, LogMelCache<T>)> {
        let s = x.shape();
        if s.channels != 1 {
            return Err(Error::shape(format!(
                "log-mel expects 1-channel audio, got {s}"
            )));
        }
        let frames = self.cfg.frame_count(s.time);
        let floor = T::lit(self.cfg.log_floor);
        let mut spectra = Vec::with_capacity(s.batch);
        let mut mel = Vec::with_capacity(s.batch * self.cfg.n_mels * frames);
        for b in 0..s.batch {
            let spec = self.stft(x.item(b))?;
            let mags: Vec<T> = spec.iter().map(|c| c.norm()).collect();
            mel.extend(self.project(&mags, frames));
            spectra.push(spec);
        }
        let out = mel.iter().map(|&m| m.max(floor).ln()).collect();
        let out = Tensor3::new(Shape::new(s.batch, self.cfg.n_mels, frames), out)?;
        Ok((
            out,
            LogMelCache {
                spectra,
                mel,
                frames,
                len: s.time,
            },
        ))
    }

    pub fn backward(&self, cache: &LogMelCache<T>, grad_out: &[T]) -> Vec<T> {
        let (n_mels, n_bins, n_fft) = (self.cfg.n_mels, self.cfg.n_bins(), self.cfg.n_fft);
        let frames = cache.frames;
        let floor = T::lit(self.cfg.log_floor);
        let half = (n_fft / 2) as isize;
        let block = n_mels * frames;
        let mut dx = vec![T::zero(); cache.spectra.len() * cache.len];
        let mut g_mag = vec![T::zero(); n_bins * frames];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n_fft];
        let mut scratch =
            vec![Complex::new(T::zero(), T::zero()); self.ifft.get_inplace_scratch_len()];
        for (b, spec) in cache.spectra.iter().enumerate() {
            let g_mel: Vec<T> = cache.mel[b * block..(b + 1) * block]
                .iter()
                .zip(&grad_out[b * block..(b + 1) * block])
                .map(|(&m, &g)| if m > floor { g / m } else { T::zero() })
                .collect();
            // g_mag[n_bins, frames] = fb^T * g_mel
            T::gemm(
                n_bins,
                n_mels,
                frames,
                T::one(),
                &self.filterbank,
                1,
                n_bins as isize,
                &g_mel,
                frames as isize,
                1,
                T::zero(),
                &mut g_mag,
                frames as isize,
                1,
            );
            let dxi = &mut dx[b * cache.len..(b + 1) * cache.len];
            for f in 0..frames {
                buf.fill(Complex::new(T::zero(), T::zero()));
                for k in 0..n_bins {
                    let c = spec[k * frames + f];
                    let mag = c.norm();
                    if mag > T::zero() {
                        buf[k] = c * (g_mag[k * frames + f] / mag);
                    }
                }
                // Re(sum_k G_k e^{+i 2 pi k n / N}) is the adjoint of the one-sided DFT.
                self.ifft.process_with_scratch(&mut buf, &mut scratch);
                let start = (f * self.cfg.hop) as isize - half;
                for (n, c) in buf.iter().enumerate() {
                    dxi[reflect_index(start + n as isize, cache.len)] += c.re * self.window[n];
                }
            }
        }
        dx
    }
}

/// 80-band (by default) log-mel frames of one clip, row-major `[n_mels, frames]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    pub n_mels: usize,
    pub n_frames: usize,
    pub hop: usize,
    pub frames: Vec<f32>,
}

impl MelSpectrogram {
    pub fn to_tensor(&self) -> Tensor3<f32> {
        Tensor3::new(
            Shape::new(1, self.n_mels, self.n_frames),
            self.frames.clone(),
        )
        .expect("mel frames match their declared shape")
    }

    pub fn from_tensor(t: &Tensor3<f32>, hop: usize) -> Result<Self> {
        let s = t.shape();
        if s.batch != 1 {
            return Err(Error::shape("mel spectrogram tensor must have batch 1"));
        }
        Ok(Self {
            n_mels: s.channels,
            n_frames: s.time,
            hop,
            frames: t.data().to_vec(),
        })
    }
}

/// Complex STFT frames of `samples`, `[n_bins, frames]` bin-major.
pub fn stft(samples: &[f32], cfg: &MelConfig) -> Result<Vec<Complex<f32>>> {
    LogMel::<f32>::new(cfg)?.stft(samples)
}

/// Projects `[n_bins, frames]` magnitudes onto the mel filterbank and takes
/// the floored log.
pub fn mel_project(magnitudes: &[f32], frames: usize, cfg: &MelConfig) -> Result<MelSpectrogram> {
    if magnitudes.len() != cfg.n_bins() * frames {
        return Err(Error::shape(format!(
            "{} magnitudes do not form {} bins x {frames} frames",
            magnitudes.len(),
            cfg.n_bins()
        )));
    }
    let engine = LogMel::<f32>::new(cfg)?;
    let floor = cfg.log_floor as f32;
    let frames_out = engine
        .project(magnitudes, frames)
        .into_iter()
        .map(|m| m.max(floor).ln())
        .collect();
    Ok(MelSpectrogram {
        n_mels: cfg.n_mels,
        n_frames: frames,
        hop: cfg.hop,
        frames: frames_out,
    })
}

/// STFT magnitudes followed by [`mel_project`].
pub fn log_mel(samples: &[f32], cfg: &MelConfig) -> Result<MelSpectrogram> {
    let spec = stft(samples, cfg)?;
    let mags: Vec<f32> = spec.iter().map(|c| c.norm()).collect();
    mel_project(&mags, cfg.frame_count(samples.len()), cfg)
}
