//! Domain types shared by the whole engine: observations, test
//! configuration, and test outcomes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One `(x, y, z)` triplet of the stream: the tested feature, the response,
/// and the covariate vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: f64,
    pub y: f64,
    pub z: Vec<f64>,
}

impl Observation {
    pub fn dim(&self) -> usize {
        self.z.len()
    }
}

/// A record as it appears on the wire (NDJSON). `y` is optional so the same
/// format serves both labeled streams and unlabeled sampler-fitting files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRecord {
    pub x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
    pub z: Vec<f64>,
}

/// Validate a wire record against the configured covariate dimension.
pub fn validate_observation(raw: &RawRecord, d: usize) -> Result<Observation> {
    if raw.z.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: raw.z.len(),
        });
    }
    if !raw.x.is_finite() {
        return Err(Error::NonFinite { field: "x" });
    }
    let y = raw.y.ok_or(Error::NonFinite { field: "y" })?;
    if !y.is_finite() {
        return Err(Error::NonFinite { field: "y" });
    }
    if raw.z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { field: "z" });
    }
    Ok(Observation {
        x: raw.x,
        y,
        z: raw.z.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Sign,
    Tanh,
}

/// Configuration of the sequential test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    /// Significance level in (0, 1).
    pub alpha: f64,
    /// Number of warm-up samples consumed for initial model training.
    pub n_init: usize,
    /// Batch sizes of the ensemble; distinct positive integers.
    pub batch_sizes: Vec<usize>,
    /// Number of dummy copies averaged per betting score.
    pub k_derandomize: usize,
    /// Resolution of the discrete betting-fraction grid.
    pub grid_size: usize,
    pub score_kind: ScoreKind,
    /// Betting score magnitude bound, in (0, 1].
    pub score_magnitude: f64,
    pub seed: u64,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            n_init: 20,
            batch_sizes: vec![2, 5, 10],
            k_derandomize: 20,
            grid_size: 1000,
            score_kind: ScoreKind::Sign,
            score_magnitude: 1.0,
            seed: 0,
        }
    }
}

impl TestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Domain(format!("alpha must be in (0,1), got {}", self.alpha)));
        }
        if self.batch_sizes.is_empty() {
            return Err(Error::Domain("batch_sizes must be non-empty".into()));
        }
        if self.batch_sizes.contains(&0) {
            return Err(Error::Domain("batch sizes must be >= 1".into()));
        }
        let mut sorted = self.batch_sizes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.batch_sizes.len() {
            return Err(Error::Domain("batch sizes must be distinct".into()));
        }
        if self.k_derandomize == 0 {
            return Err(Error::Domain("k_derandomize must be >= 1".into()));
        }
        if self.grid_size < 2 {
            return Err(Error::Domain("grid_size must be >= 2".into()));
        }
        if !(self.score_magnitude > 0.0 && self.score_magnitude <= 1.0) {
            return Err(Error::Domain(format!(
                "score_magnitude must be in (0,1], got {}",
                self.score_magnitude
            )));
        }
        Ok(())
    }

    pub fn max_batch_size(&self) -> usize {
        self.batch_sizes.iter().copied().max().unwrap_or(1)
    }
}

/// Rejection threshold `1/alpha` from Ville's inequality.
pub fn ville_threshold(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must be in (0,1), got {alpha}")));
    }
    Ok(1.0 / alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Rejected,
    NotRejected,
}

/// Result of a sequential run: decision, test-clock stopping index, final
/// wealth, and the full wealth trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub decision: Decision,
    pub stop_time: usize,
    pub final_wealth: f64,
    pub trajectory: Vec<(usize, f64)>,
}
