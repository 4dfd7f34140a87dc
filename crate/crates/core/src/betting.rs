//! Betting scores: batch test statistics, antisymmetric score functions,
//! and the K-fold de-randomized average score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSnapshot;
use crate::rng::RngStream;
use crate::sampler::DummySampler;
use crate::types::{Observation, ScoreKind};

/// Denominator floor for the tanh score; the statistic comparison must stay
/// total even at 0/0.
pub const TANH_EPSILON_GUARD: f64 = 1e-12;

/// Scale constant inside the tanh score, fixed as published.
const TANH_SCALE: f64 = 20.0;

/// Antisymmetric score function `g`: `g(a, b) = -g(b, a)`, bounded by the
/// magnitude `m`, positive when the dummy statistic exceeds the original.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreFn {
    pub kind: ScoreKind,
    pub magnitude: f64,
    pub epsilon_guard: f64,
}

impl ScoreFn {
    pub fn new(kind: ScoreKind, magnitude: f64) -> Result<Self> {
        if !(magnitude > 0.0 && magnitude <= 1.0) {
            return Err(Error::Domain(format!(
                "score magnitude must be in (0,1], got {magnitude}"
            )));
        }
        Ok(Self { kind, magnitude, epsilon_guard: TANH_EPSILON_GUARD })
    }

    /// Score the original statistic `q` against the dummy statistic
    /// `q_tilde`.
    pub fn score(&self, q: f64, q_tilde: f64) -> f64 {
        let diff = q_tilde - q;
        match self.kind {
            ScoreKind::Sign => {
                if diff > 0.0 {
                    self.magnitude
                } else if diff < 0.0 {
                    -self.magnitude
                } else {
                    0.0
                }
            }
            ScoreKind::Tanh => {
                let denom = q.abs().max(q_tilde.abs()).max(self.epsilon_guard);
                let s = TANH_SCALE * diff / denom;
                // Odd symmetry must hold bitwise, so evaluate on |s|.
                let mag = s.abs().tanh() * self.magnitude;
                if s < 0.0 {
                    -mag
                } else if s > 0.0 {
                    mag
                } else {
                    0.0
                }
            }
        }
    }
}

/// Mean squared prediction error of a frozen model on a batch.
pub fn batch_mse(model: &ModelSnapshot, batch: &[Observation]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sse = 0.0;
    for obs in batch {
        let r = model.predict(obs.x, &obs.z)? - obs.y;
        sse += r * r;
    }
    Ok(sse / batch.len() as f64)
}

/// Same statistic with the batch's feature column replaced by dummies.
fn batch_mse_with_dummies(model: &ModelSnapshot, batch: &[Observation], dummies: &[f64]) -> f64 {
    let mut sse = 0.0;
    for (obs, &x_tilde) in batch.iter().zip(dummies) {
        let r = model.predict_unchecked(x_tilde, &obs.z) - obs.y;
        sse += r * r;
    }
    sse / batch.len() as f64
}

/// Average betting score over `k` independent dummy copies of the batch.
/// The original statistic is computed once and reused across copies; the
/// average stays bounded by the score magnitude.
pub fn derandomized_score(
    model: &ModelSnapshot,
    batch: &[Observation],
    sampler: &dyn DummySampler,
    k: usize,
    score_fn: &ScoreFn,
    rng: &mut RngStream,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if k == 0 {
        return Err(Error::Domain("k must be >= 1".into()));
    }
    let q = batch_mse(model, batch)?;
    let mut sum = 0.0;
    let mut dummies = vec![0.0; batch.len()];
    for _ in 0..k {
        for (slot, obs) in dummies.iter_mut().zip(batch) {
            *slot = sampler.sample(&obs.z, rng)?;
        }
        let q_tilde = batch_mse_with_dummies(model, batch, &dummies);
        sum += score_fn.score(q, q_tilde);
    }
    Ok(sum / k as f64)
}
