//! Adversarial training loop.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::{SaturationConfig, TrainConfig};
use super::metrics::{MetricsWriter, StepRecord};
use super::optim::{adamw_step, lr_at, AdamState, AdamWHyper};
use crate::disc::WaveUNet;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::graph::{Graph, Gradients};
use crate::losses::{self, LossBundle};
use crate::nn::{Bound, ParamStore};
use crate::signal::mel::LogMel;
use crate::signal::segment::{sample_segment, SegmentPair};
use crate::signal::wav::{load_wav, AudioClip};
use crate::signal::synth_corpus;
use crate::tensor::{Real, Tensor3};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Counts consecutive steps that look like a saturated discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SaturationMonitor {
    pub config: SaturationConfig,
    pub run: usize,
    /// Step at which the run length first reached `patience`.
    pub tripped_at: Option<u64>,
}

impl SaturationMonitor {
    pub fn new(config: SaturationConfig) -> Self {
        Self {
            config,
            run: 0,
            tripped_at: None,
        }
    }

    /// Returns true on the step that trips the monitor.
    pub fn observe(&mut self, step: u64, d_loss: f64, g_adv: f64) -> bool {
        if d_loss < self.config.d_loss_floor && g_adv > self.config.g_adv_ceiling {
            self.run += 1;
        } else {
            self.run = 0;
        }
        if self.run >= self.config.patience && self.tripped_at.is_none() {
            self.tripped_at = Some(step);
            return true;
        }
        false
    }
}

/// Outcome of [`Trainer::run`].
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub steps: u64,
    pub last: Option<StepRecord>,
    pub saturation_tripped_at: Option<u64>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator<f32>,
    pub discriminator: WaveUNet<f32>,
    pub opt_g: AdamState<f32>,
    pub opt_d: AdamState<f32>,
    pub rng: ChaCha8Rng,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub monitor: SaturationMonitor,
    corpus: Vec<AudioClip>,
    mel: Arc<LogMel<f32>>,
}

pub fn load_corpus(config: &TrainConfig) -> Result<Vec<AudioClip>> {
    let Some(dir) = &config.corpus_dir else {
        return Ok(synth_corpus(config.n_clips, config.corpus_seed));
    };
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<_> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::config(format!("corpus_dir: no .wav files in {dir}")));
    }
    paths.iter().map(load_wav).collect()
}

fn grads_for<T: Real>(grads: &Gradients<T>, bound: &Bound, store: &ParamStore<T>) -> Vec<Vec<T>> {
    bound
        .vars()
        .iter()
        .zip(store.values())
        .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
        .collect()
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let corpus = load_corpus(&config)?;
        let generator = Generator::new(config.generator.clone(), config.seed)?;
        let discriminator = WaveUNet::new(config.discriminator.clone(), config.seed.wrapping_add(1))?;
        let opt_g = AdamState::zeros_like(generator.params().values());
        let opt_d = AdamState::zeros_like(discriminator.params().values());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(2);
        Ok(Self {
            mel: Arc::new(LogMel::new(&config.mel)?),
            monitor: SaturationMonitor::new(config.saturation),
            config,
            generator,
            discriminator,
            opt_g,
            opt_d,
            rng,
            step: 0,
            corpus,
        })
    }

    pub fn corpus(&self) -> &[AudioClip] {
        &self.corpus
    }

    pub fn steps_per_epoch(&self) -> u64 {
        ((self.corpus.len() / self.config.batch) as u64).max(1)
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.steps_per_epoch()
    }

    pub fn lr(&self) -> f64 {
        let decays = self.epoch() / self.config.decay_interval;
        lr_at(self.config.lr0, self.config.lr_decay, decays)
    }

    fn hyper(&self) -> AdamWHyper {
        AdamWHyper {
            lr: self.lr(),
            beta1: self.config.betas[0],
            beta2: self.config.betas[1],
            weight_decay: self.config.weight_decay,
        }
    }

    /// Draws `batch` random segments from the corpus.
    pub fn sample_batch(&mut self) -> Result<Vec<SegmentPair>> {
        (0..self.config.batch)
            .map(|_| {
                let clip = &self.corpus[self.rng.gen_range(0..self.corpus.len())];
                sample_segment(clip, self.config.segment, &self.config.mel, &mut self.rng)
            })
            .collect()
    }

    /// Discriminator update on fixed real and fake waveforms. Returns the loss.
    pub fn d_step(&mut self, real: &Tensor3<f32>, fake: &Tensor3<f32>) -> Result<f64> {
        let hyper = self.hyper();
        let mut g = Graph::new();
        let p = self.discriminator.params().bind(&mut g, true);
        let real_v = g.constant(real.clone());
        let fake_v = g.constant(fake.clone());
        let real_out = self.discriminator.forward(&mut g, &p, real_v)?;
        let fake_out = self.discriminator.forward(&mut g, &p, fake_v)?;
        let loss = losses::adv_loss_d(&mut g, real_out.score, fake_out.score)?;
        let grads = g.backward(loss)?;
        let grads = grads_for(&grads, &p, self.discriminator.params());
        adamw_step(
            self.discriminator.params_mut().values_mut(),
            &grads,
            &mut self.opt_d,
            hyper,
        )?;
        Ok(g.scalar(loss) as f64)
    }

    /// One D step followed by one G step.
    pub fn train_step(&mut self, batch: &[SegmentPair]) -> Result<StepRecord> {
        if batch.len() != self.config.batch {
            return Err(Error::shape(format!(
                "batch has {} segments, config says {}",
                batch.len(),
                self.config.batch
            )));
        }
        let started = Instant::now();
        let lr = self.lr();
        let epoch = self.epoch();
        let waves: Vec<Tensor3<f32>> = batch.iter().map(|s| s.wave.clone()).collect();
        let mels: Vec<Tensor3<f32>> = batch.iter().map(|s| s.mel.to_tensor()).collect();
        let real = Tensor3::stack(&waves)?;
        let mel = Tensor3::stack(&mels)?;
        let seg = real.shape().time;

        // generator graph, kept alive for the G step
        let mut g = Graph::new();
        let gp = self.generator.params().bind(&mut g, true);
        let mel_v = g.constant(mel);
        let fake_full = self.generator.forward(&mut g, &gp, mel_v)?;
        let fake = g.trim_time(fake_full, seg)?;

        let fake_value = g.value(fake).clone();
        let d_loss = self.d_step(&real, &fake_value)?;

        let dp = self.discriminator.params().bind(&mut g, false);
        let real_v = g.constant(real);
        let real_out = self.discriminator.forward(&mut g, &dp, real_v)?;
        let fake_out = self.discriminator.forward(&mut g, &dp, fake)?;
        let adv = losses::adv_loss_g(&mut g, fake_out.score);
        let fm = losses::feature_matching_vars(&mut g, &real_out, &fake_out)?;
        let recon = losses::mel_loss(&mut g, &self.mel, real_v, fake)?;
        let w = self.config.loss_weights;
        let total = g.linear(&[
            (adv, 1.0),
            (fm, w.feature_matching as f32),
            (recon, w.mel as f32),
        ])?;
        let grads = g.backward(total)?;
        let grads = grads_for(&grads, &gp, self.generator.params());
        let hyper = self.hyper();
        adamw_step(
            self.generator.params_mut().values_mut(),
            &grads,
            &mut self.opt_g,
            hyper,
        )?;
        self.step += 1;

        let bundle = LossBundle::new(
            d_loss,
            g.scalar(adv) as f64,
            g.scalar(fm) as f64,
            g.scalar(recon) as f64,
            w,
        );
        Ok(StepRecord {
            step: self.step,
            epoch,
            lr,
            d_loss: bundle.d_loss,
            g_adv: bundle.g_adv,
            g_fm: bundle.g_fm,
            g_mel: bundle.g_mel,
            g_total: g.scalar(total) as f64,
            wall_time: started.elapsed().as_secs_f64(),
        })
    }

    /// Generator update on the mel term alone. The discriminator and the step
    /// counter are left untouched. Returns the mel loss before the update.
    pub fn mel_only_step(&mut self, batch: &[SegmentPair]) -> Result<f64> {
        let waves: Vec<Tensor3<f32>> = batch.iter().map(|s| s.wave.clone()).collect();
        let mels: Vec<Tensor3<f32>> = batch.iter().map(|s| s.mel.to_tensor()).collect();
        let real = Tensor3::stack(&waves)?;
        let seg = real.shape().time;
        let mut g = Graph::new();
        let gp = self.generator.params().bind(&mut g, true);
        let mel_v = g.constant(Tensor3::stack(&mels)?);
        let fake_full = self.generator.forward(&mut g, &gp, mel_v)?;
        let fake = g.trim_time(fake_full, seg)?;
        let real_v = g.constant(real);
        let loss = losses::mel_loss(&mut g, &self.mel, real_v, fake)?;
        let grads = g.backward(loss)?;
        let grads = grads_for(&grads, &gp, self.generator.params());
        let hyper = self.hyper();
        adamw_step(
            self.generator.params_mut().values_mut(),
            &grads,
            &mut self.opt_g,
            hyper,
        )?;
        Ok(g.scalar(loss) as f64)
    }

    /// Trains until `config.steps`, writing metrics and checkpoints under `out_dir`.
    ///
    /// With `deterministic`, wall-clock fields are zeroed so two runs with the
    /// same config produce identical files.
    pub fn run(&mut self, out_dir: Option<&Path>, deterministic: bool) -> Result<RunSummary> {
        let mut writer = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let cfg_path = dir.join(CONFIG_FILE);
                std::fs::write(&cfg_path, self.config.to_json()).map_err(|e| Error::io(&cfg_path, e))?;
                Some(MetricsWriter::append(dir.join(METRICS_FILE))?)
            }
            None => None,
        };
        let mut last = None;
        while self.step < self.config.steps {
            let batch = self.sample_batch()?;
            let mut rec = self.train_step(&batch)?;
            if deterministic {
                rec.wall_time = 0.0;
            }
            if let Some(w) = writer.as_mut() {
                w.write(&rec)?;
            }
            if !rec.all_finite() {
                return Err(Error::Diverged(format!("non-finite loss at step {}", rec.step)));
            }
            if self.monitor.observe(rec.step, rec.d_loss, rec.g_adv) {
                log::warn!(
                    "saturation monitor tripped at step {}: d_loss < {} and g_adv > {} for {} steps",
                    rec.step,
                    self.config.saturation.d_loss_floor,
                    self.config.saturation.g_adv_ceiling,
                    self.config.saturation.patience
                );
            }
            if rec.step % 50 == 0 || rec.step == 1 {
                log::info!(
                    "step {} d {:.4} adv {:.4} fm {:.4} mel {:.4} lr {:.3e}",
                    rec.step,
                    rec.d_loss,
                    rec.g_adv,
                    rec.g_fm,
                    rec.g_mel,
                    rec.lr
                );
            }
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step % every == 0 {
                    self.checkpoint()?.save(dir.join(format!("step_{:06}.ckpt", self.step)))?;
                }
            }
            last = Some(rec);
        }
        if let Some(dir) = out_dir {
            self.checkpoint()?.save(dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(RunSummary {
            steps: self.step,
            last,
            saturation_tripped_at: self.monitor.tripped_at,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let config = serde_json::to_value(&self.config)?;
        let mut c = Checkpoint::new("train", config);
        let counters = &mut c.header.counters;
        counters.insert("step".into(), self.step);
        counters.insert("epoch".into(), self.epoch());
        counters.insert("opt_g_step".into(), self.opt_g.step);
        counters.insert("opt_d_step".into(), self.opt_d.step);
        counters.insert("saturation_run".into(), self.monitor.run as u64);
        if let Some(s) = self.monitor.tripped_at {
            counters.insert("saturation_tripped_at".into(), s);
        }
        c.header.rng = Some(serde_json::to_value(&self.rng)?);
        c.push_store("generator/", self.generator.params());
        c.push_store("discriminator/", self.discriminator.params());
        for (prefix, opt, store) in [
            ("opt_g", &self.opt_g, self.generator.params()),
            ("opt_d", &self.opt_d, self.discriminator.params()),
        ] {
            for (name, m) in store.names().iter().zip(&opt.m) {
                c.push(format!("{prefix}/m/{name}"), m.clone());
            }
            for (name, v) in store.names().iter().zip(&opt.v) {
                c.push(format!("{prefix}/v/{name}"), v.clone());
            }
        }
        Ok(c)
    }

    /// Restores a run saved by [`Trainer::checkpoint`].
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.header.kind != "train" {
            return Err(Error::Checkpoint(format!(
                "expected a training checkpoint, found kind {:?}",
                c.header.kind
            )));
        }
        let config: TrainConfig = serde_json::from_value(c.header.config.clone())?;
        let mut t = Self::new(config)?;
        t.generator.params_mut().load(c.with_prefix("generator/"))?;
        t.discriminator.params_mut().load(c.with_prefix("discriminator/"))?;
        for (prefix, opt, store) in [
            ("opt_g", &mut t.opt_g, t.generator.params()),
            ("opt_d", &mut t.opt_d, t.discriminator.params()),
        ] {
            let mut m = store.clone();
            m.load(c.with_prefix(&format!("{prefix}/m/")))?;
            let mut v = store.clone();
            v.load(c.with_prefix(&format!("{prefix}/v/")))?;
            opt.m = m.values().to_vec();
            opt.v = v.values().to_vec();
        }
        t.step = c.counter("step")?;
        t.opt_g.step = c.counter("opt_g_step")?;
        t.opt_d.step = c.counter("opt_d_step")?;
        t.monitor.run = c.counter("saturation_run")? as usize;
        t.monitor.tripped_at = c.header.counters.get("saturation_tripped_at").copied();
        let rng = c
            .header
            .rng
            .clone()
            .ok_or_else(|| Error::Checkpoint("missing rng state".into()))?;
        t.rng = serde_json::from_value(rng)?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disc::WaveUNetConfig;
    use crate::generator::GeneratorConfig;

    pub(crate) fn small_config() -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch: 2,
            segment: 512,
            n_clips: 3,
            discriminator: WaveUNetConfig {
                base_channels: 2,
                ..WaveUNetConfig::default()
            },
            generator: GeneratorConfig {
                base_channels: 16,
                ..GeneratorConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn max_delta(a: &ParamStore<f32>, b: &ParamStore<f32>) -> f32 {
        a.values()
            .iter()
            .zip(b.values())
            .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f32::max)
    }

    #[test]
    fn one_step_moves_both_models() {
        let mut t = Trainer::new(small_config()).unwrap();
        let g0 = t.generator.params().clone();
        let d0 = t.discriminator.params().clone();
        let batch = t.sample_batch().unwrap();
        let rec = t.train_step(&batch).unwrap();
        assert!(rec.all_finite());
        assert_eq!(rec.step, 1);
        assert!(max_delta(&g0, t.generator.params()) > 0.0);
        assert!(max_delta(&d0, t.discriminator.params()) > 0.0);
    }

    #[test]
    fn d_step_leaves_generator_untouched() {
        let mut t = Trainer::new(small_config()).unwrap();
        let g0 = t.generator.params().clone();
        let batch = t.sample_batch().unwrap();
        let real = Tensor3::stack(&batch.iter().map(|s| s.wave.clone()).collect::<Vec<_>>()).unwrap();
        let fake = real.map(|v| 0.5 * v);
        t.d_step(&real, &fake).unwrap();
        assert_eq!(&g0, t.generator.params());
        assert_eq!(t.opt_g.step, 0);
    }

    #[test]
    fn lr_decays_per_epoch() {
        let mut t = Trainer::new(small_config()).unwrap();
        // 3 clips, batch 2 -> one step per epoch
        assert_eq!(t.steps_per_epoch(), 1);
        assert_eq!(t.lr(), 2e-4);
        t.step = 1;
        assert!((t.lr() - 1.998e-4).abs() < 1e-15);
    }

    #[test]
    fn monitor_needs_consecutive_steps() {
        let mut m = SaturationMonitor::new(SaturationConfig {
            patience: 3,
            ..SaturationConfig::default()
        });
        assert!(!m.observe(1, 1e-5, 0.95));
        assert!(!m.observe(2, 1e-5, 0.95));
        assert!(!m.observe(3, 0.2, 0.95));
        assert!(!m.observe(4, 1e-5, 0.95));
        assert!(!m.observe(5, 1e-5, 0.95));
        assert!(m.observe(6, 1e-5, 0.95));
        assert_eq!(m.tripped_at, Some(6));
        assert!(!m.observe(7, 1e-5, 0.95));
    }

    #[test]
    fn checkpoint_resume_is_exact() {
        let mut a = Trainer::new(small_config()).unwrap();
        let batch = a.sample_batch().unwrap();
        a.train_step(&batch).unwrap();
        let ckpt = a.checkpoint().unwrap();
        let bytes = ckpt.to_bytes();
        let mut b = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(b.checkpoint().unwrap().to_bytes(), bytes);

        let ba = a.sample_batch().unwrap();
        let bb = b.sample_batch().unwrap();
        assert_eq!(ba, bb);
        let mut ra = a.train_step(&ba).unwrap();
        let mut rb = b.train_step(&bb).unwrap();
        ra.wall_time = 0.0;
        rb.wall_time = 0.0;
        assert_eq!(ra, rb);
    }
}
