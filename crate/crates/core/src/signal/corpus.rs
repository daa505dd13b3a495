//! Seeded synthetic corpus of harmonic tones.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::wav::{AudioClip, SAMPLE_RATE};

/// Peak level of every synthesized clip.
pub const PEAK: f32 = 0.95;

/// One clip per index; each clip draws from its own ChaCha stream, so the
/// corpus does not depend on generation order.
pub fn synth_clip(seed: u64, index: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let sr = SAMPLE_RATE as f64;
    let len = rng.gen_range(SAMPLE_RATE as usize..=2 * SAMPLE_RATE as usize);
    let f0 = rng.gen_range(80.0..1000.0);
    let partials = rng.gen_range(2..=5usize);
    let tones: Vec<(f64, f64, f64)> = (1..=partials)
        .map(|h| {
            let amp = rng.gen_range(0.5..1.0) / h as f64;
            let phase = rng.gen_range(0.0..2.0 * PI);
            (f0 * h as f64, amp, phase)
        })
        .collect();
    let vibrato_rate = rng.gen_range(3.0..7.0);
    let vibrato_depth = rng.gen_range(0.0..0.01);
    let attack = rng.gen_range(0.01..0.1);
    let decay = rng.gen_range(0.5..2.0);

    let mut samples: Vec<f64> = Vec::with_capacity(len);
    let mut phase_acc = 0.0;
    for n in 0..len {
        let t = n as f64 / sr;
        let bend = 1.0 + vibrato_depth * (2.0 * PI * vibrato_rate * t).sin();
        phase_acc += 2.0 * PI * bend / sr;
        let env = (1.0 - (-t / attack).exp()) * (-t / decay).exp();
        let v: f64 = tones
            .iter()
            .map(|&(f, a, p)| a * (f * phase_acc + p).sin())
            .sum();
        samples.push(env * v);
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { PEAK as f64 / peak } else { 0.0 };
    let samples = samples
        .into_iter()
        .map(|v| ((v * gain) as f32).clamp(-PEAK, PEAK))
        .collect();
    AudioClip::new(samples, SAMPLE_RATE)
}

pub fn synth_corpus(n_clips: usize, seed: u64) -> Vec<AudioClip> {
    (0..n_clips as u64).map(|i| synth_clip(seed, i)).collect()
}
