//! Least-squares adversarial losses, feature matching and mel reconstruction.
//!
//! The discriminator emits a score per sample, so each squared error is
//! averaged over every element of the score map and the batch.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::disc::{DiscOutput, DiscVars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::signal::mel::LogMel;
use crate::tensor::{Real, Tensor3};

/// Discriminator objective: `mean((D(x) - 1)^2) + mean(D(G(s))^2)`.
pub fn adv_loss_d<T: Real>(g: &mut Graph<T>, real_score: Var, fake_score: Var) -> Result<Var> {
    if g.shape(real_score) != g.shape(fake_score) {
        return Err(Error::shape(format!(
            "score maps differ: {} vs {}",
            g.shape(real_score),
            g.shape(fake_score)
        )));
    }
    let r = g.mse_to(real_score, T::one());
    let f = g.mse_to(fake_score, T::zero());
    g.linear(&[(r, T::one()), (f, T::one())])
}

/// Generator objective: `mean((D(G(s)) - 1)^2)`.
pub fn adv_loss_g<T: Real>(g: &mut Graph<T>, fake_score: Var) -> Var {
    g.mse_to(fake_score, T::one())
}

/// `sum_i mean(|D_i(x) - D_i(G(s))|)`; real features are detached.
pub fn feature_matching<T: Real>(g: &mut Graph<T>, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(Error::shape(format!(
            "feature lists differ in length: {} vs {}",
            real.len(),
            fake.len()
        )));
    }
    let mut terms = Vec::with_capacity(real.len());
    for (&r, &f) in real.iter().zip(fake) {
        let r = g.detach(r);
        terms.push((g.l1_mean(f, r)?, T::one()));
    }
    g.linear(&terms)
}

/// Mean absolute log-mel difference; the real branch is detached.
pub fn mel_loss<T: Real>(
    g: &mut Graph<T>,
    engine: &Arc<LogMel<T>>,
    real_wave: Var,
    fake_wave: Var,
) -> Result<Var> {
    if g.shape(real_wave) != g.shape(fake_wave) {
        return Err(Error::shape(format!(
            "waveforms differ: {} vs {}",
            g.shape(real_wave),
            g.shape(fake_wave)
        )));
    }
    let real = g.detach(real_wave);
    let real_mel = g.log_mel(real, engine)?;
    let fake_mel = g.log_mel(fake_wave, engine)?;
    g.l1_mean(fake_mel, real_mel)
}

/// Feature lists of two discriminator passes, as graph handles.
pub fn feature_matching_vars<T: Real>(
    g: &mut Graph<T>,
    real: &DiscVars,
    fake: &DiscVars,
) -> Result<Var> {
    feature_matching(g, &real.features, &fake.features)
}

/// Evaluates [`adv_loss_d`] on already computed outputs.
pub fn adv_loss_d_value<T: Real>(real: &DiscOutput<T>, fake: &DiscOutput<T>) -> Result<T> {
    let mut g = Graph::new();
    let r = g.constant(real.score_map.clone());
    let f = g.constant(fake.score_map.clone());
    let l = adv_loss_d(&mut g, r, f)?;
    Ok(g.scalar(l))
}

pub fn adv_loss_g_value<T: Real>(fake: &DiscOutput<T>) -> T {
    let mut g = Graph::new();
    let f = g.constant(fake.score_map.clone());
    let l = adv_loss_g(&mut g, f);
    g.scalar(l)
}

pub fn feature_matching_value<T: Real>(real: &[Tensor3<T>], fake: &[Tensor3<T>]) -> Result<T> {
    let mut g = Graph::new();
    let r: Vec<Var> = real.iter().map(|t| g.constant(t.clone())).collect();
    let f: Vec<Var> = fake.iter().map(|t| g.constant(t.clone())).collect();
    let l = feature_matching(&mut g, &r, &f)?;
    Ok(g.scalar(l))
}

pub fn mel_loss_value<T: Real>(
    engine: &Arc<LogMel<T>>,
    real: &Tensor3<T>,
    fake: &Tensor3<T>,
) -> Result<T> {
    let mut g = Graph::new();
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let l = mel_loss(&mut g, engine, r, f)?;
    Ok(g.scalar(l))
}

/// Loss weights for the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub feature_matching: f64,
    pub mel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            feature_matching: 2.0,
            mel: 45.0,
        }
    }
}

/// All loss values of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_fm: f64,
    pub g_mel: f64,
    pub g_total: f64,
    pub weights: LossWeights,
}

impl LossBundle {
    pub fn new(d_loss: f64, g_adv: f64, g_fm: f64, g_mel: f64, weights: LossWeights) -> Self {
        Self {
            d_loss,
            g_adv,
            g_fm,
            g_mel,
            g_total: g_adv + weights.feature_matching * g_fm + weights.mel * g_mel,
            weights,
        }
    }

    pub fn all_finite(&self) -> bool {
        [self.d_loss, self.g_adv, self.g_fm, self.g_mel, self.g_total]
            .iter()
            .all(|v| v.is_finite())
    }
}
