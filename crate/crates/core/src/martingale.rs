//! Wealth processes: the discrete-mixture test martingale, per-batch-size
//! martingales, the batch-ensemble wealth, and the sequential tester with
//! its rejection threshold.
//!
//! The mixture over betting fractions is realized as a discrete uniform
//! mixture over grid midpoints `v_i = (i - 0.5) / V`, maintained as `V`
//! running products. A finite convex combination of valid test martingales
//! is itself a valid test martingale, and the midpoint rule approximates
//! the continuous uniform mixture to `O(1/V^2)`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::betting::{derandomized_score, ScoreFn};
use crate::error::{Error, Result};
use crate::model::{ModelLadder, ModelSnapshot, DEFAULT_LADDER_SIZE, DEFAULT_SWEEPS_PER_STEP};
use crate::rng::RngStream;
use crate::sampler::DummySampler;
use crate::types::{ville_threshold, Decision, Observation, TestConfig, TestOutcome};

/// Running products `prod_j (1 + v_i * W_j)` over the betting-fraction
/// grid, stored in log space. A product driven exactly to zero is kept as
/// negative infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureState {
    grid_size: usize,
    log_products: Vec<f64>,
    num_bets: usize,
}

impl MixtureState {
    pub fn new(grid_size: usize) -> Self {
        Self { grid_size, log_products: vec![0.0; grid_size], num_bets: 0 }
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn num_bets(&self) -> usize {
        self.num_bets
    }

    #[inline]
    pub fn grid_point(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.grid_size as f64
    }

    /// Apply one betting score to every grid product.
    pub fn update(&mut self, w: f64) {
        debug_assert!(w.abs() <= 1.0 + 1e-12, "betting score out of range: {w}");
        let v_step = 1.0 / self.grid_size as f64;
        let mut v = 0.5 * v_step;
        for lp in &mut self.log_products {
            *lp += (v * w).ln_1p();
            v += v_step;
        }
        self.num_bets += 1;
    }

    /// Grid-mean wealth, computed by shifted exponentiation so large
    /// products do not overflow.
    pub fn wealth(&self) -> f64 {
        let m = self.max_log_product();
        if m == f64::NEG_INFINITY {
            return 0.0;
        }
        let sum: f64 = self.log_products.iter().map(|lp| (lp - m).exp()).sum();
        (m + (sum / self.grid_size as f64).ln()).exp()
    }

    /// Largest log product. An upper bound on the wealth: the grid mean can
    /// never exceed the best base martingale.
    pub fn max_log_product(&self) -> f64 {
        self.log_products.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Wealth of the base martingale at grid index `i`.
    pub fn base_wealth_at(&self, i: usize) -> f64 {
        self.log_products[i].exp()
    }
}

/// Wealth from betting a fixed fraction `v` on a given score history.
pub fn base_wealth(history: &[f64], v: f64) -> f64 {
    history.iter().map(|w| 1.0 + v * w).product()
}

/// Rejection rule: the wealth crossed the Ville threshold.
pub fn decide(wealth: f64, alpha: f64) -> Result<Decision> {
    let threshold = ville_threshold(alpha)?;
    Ok(if wealth >= threshold { Decision::Rejected } else { Decision::NotRejected })
}

/// One batch size of the ensemble: its mixture martingale, the buffer of
/// observations waiting for the batch to fill, and the model frozen at the
/// start of the current batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchTrack {
    pub b: usize,
    pub mixture: MixtureState,
    pending: Vec<Observation>,
    frozen_model: ModelSnapshot,
}

impl BatchTrack {
    fn new(b: usize, grid_size: usize, frozen_model: ModelSnapshot) -> Self {
        Self { b, mixture: MixtureState::new(grid_size), pending: Vec::with_capacity(b), frozen_model }
    }

    pub fn frozen_model(&self) -> &ModelSnapshot {
        &self.frozen_model
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// The sequential tester: batch ensemble over mixture martingales, an
/// online model ladder, and the Ville-threshold decision rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TesterState {
    config: TestConfig,
    score_fn: ScoreFn,
    tracks: Vec<BatchTrack>,
    ladder: ModelLadder,
    rng: RngStream,
    /// Test clock: observations consumed after warm-up.
    t: usize,
    wealth: f64,
    decided: bool,
}

impl TesterState {
    /// Initialize from warm-up data: fits the model ladder and freezes the
    /// initial batch-scoring model for every batch size.
    pub fn new(config: TestConfig, warmup: &[Observation]) -> Result<Self> {
        config.validate()?;
        if warmup.len() < config.n_init {
            return Err(Error::InsufficientWarmup { needed: config.n_init, got: warmup.len() });
        }
        let score_fn = ScoreFn::new(config.score_kind, config.score_magnitude)?;
        let holdout_len = 25usize.max(5 * config.max_batch_size());
        let ladder =
            ModelLadder::warm_fit(&warmup[..config.n_init], DEFAULT_LADDER_SIZE, holdout_len, None)?;
        let initial = ladder.snapshot(1);
        let tracks = config
            .batch_sizes
            .iter()
            .map(|&b| BatchTrack::new(b, config.grid_size, initial.clone()))
            .collect();
        let rng = RngStream::new(config.seed, 0);
        Ok(Self { config, score_fn, tracks, ladder, rng, t: 0, wealth: 1.0, decided: false })
    }

    pub fn config(&self) -> &TestConfig {
        &self.config
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn wealth(&self) -> f64 {
        self.wealth
    }

    pub fn decided(&self) -> bool {
        self.decided
    }

    pub fn tracks(&self) -> &[BatchTrack] {
        &self.tracks
    }

    fn ensemble_wealth(&self) -> f64 {
        let sum: f64 = self.tracks.iter().map(|tr| tr.mixture.wealth()).sum();
        sum / self.tracks.len() as f64
    }

    /// Consume one observation. A track bets only when its buffer fills;
    /// mid-batch the track's wealth is carried forward. The decision is
    /// checked on the ensemble wealth after all tracks have updated; the
    /// model absorbs the observation only if the test continues, and tracks
    /// that completed a batch refreeze their scoring model from the updated
    /// ladder.
    pub fn step(
        &mut self,
        obs: &Observation,
        sampler: &dyn DummySampler,
    ) -> Result<(f64, Decision)> {
        if self.decided {
            return Err(Error::TesterDecided);
        }
        self.t += 1;
        let k = self.config.k_derandomize;

        let mut completed = Vec::new();
        for (i, track) in self.tracks.iter_mut().enumerate() {
            track.pending.push(obs.clone());
            if track.pending.len() == track.b {
                let w = derandomized_score(
                    &track.frozen_model,
                    &track.pending,
                    sampler,
                    k,
                    &self.score_fn,
                    &mut self.rng,
                )?;
                track.mixture.update(w);
                track.pending.clear();
                completed.push(i);
            }
        }

        self.wealth = self.ensemble_wealth();
        let decision = decide(self.wealth, self.config.alpha)?;
        if decision == Decision::Rejected {
            self.decided = true;
            return Ok((self.wealth, decision));
        }

        self.ladder.online_update(obs, DEFAULT_SWEEPS_PER_STEP);
        // The next batch of a completed track is scored by the model that
        // has seen exactly the stream up to and including this observation.
        for i in completed {
            self.tracks[i].frozen_model = self.ladder.snapshot(self.t + 1);
        }
        Ok((self.wealth, Decision::NotRejected))
    }
}

/// Run the full sequential test over a stream: consume `n_init` warm-up
/// observations, then step until rejection or stream exhaustion. After a
/// rejection the stream is not read any further.
pub fn run_sequential<I>(
    mut stream: I,
    config: &TestConfig,
    sampler: &dyn DummySampler,
) -> Result<TestOutcome>
where
    I: Iterator<Item = Result<Observation>>,
{
    let mut warmup = Vec::with_capacity(config.n_init);
    for _ in 0..config.n_init {
        match stream.next() {
            Some(obs) => warmup.push(obs?),
            None => {
                return Err(Error::InsufficientWarmup {
                    needed: config.n_init,
                    got: warmup.len(),
                })
            }
        }
    }
    let mut tester = TesterState::new(config.clone(), &warmup)?;
    let mut trajectory = Vec::new();
    for obs in stream {
        let (wealth, decision) = tester.step(&obs?, sampler)?;
        trajectory.push((tester.t(), wealth));
        if decision == Decision::Rejected {
            return Ok(TestOutcome {
                decision,
                stop_time: tester.t(),
                final_wealth: wealth,
                trajectory,
            });
        }
    }
    Ok(TestOutcome {
        decision: Decision::NotRejected,
        stop_time: tester.t(),
        final_wealth: tester.wealth(),
        trajectory,
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointBlob {
    version: u32,
    config_hash: String,
    state: TesterState,
}

/// Hash of the canonical JSON serialization of a config.
pub fn config_hash(config: &TestConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Serialize the full tester state, including the RNG position, pending
/// buffers, grid products, and model coefficients.
pub fn checkpoint(tester: &TesterState) -> Result<Vec<u8>> {
    let blob = CheckpointBlob {
        version: CHECKPOINT_VERSION,
        config_hash: config_hash(&tester.config),
        state: tester.clone(),
    };
    serde_json::to_vec(&blob).map_err(|e| Error::CorruptCheckpoint(e.to_string()))
}

pub fn restore(bytes: &[u8]) -> Result<TesterState> {
    let blob: CheckpointBlob =
        serde_json::from_slice(bytes).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    if blob.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            expected: CHECKPOINT_VERSION,
            got: blob.version,
        });
    }
    if blob.config_hash != config_hash(&blob.state.config) {
        return Err(Error::CorruptCheckpoint("config hash does not match state".into()));
    }
    Ok(blob.state)
}
