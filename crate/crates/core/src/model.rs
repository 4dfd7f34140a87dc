//! Online predictive models: warm-started coordinate-descent lasso, the
//! hyper-parameter ladder that tunes the penalty without refitting from
//! scratch, and immutable snapshots for leak-free batch scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Observation;

/// Training data in column-major layout: column 0 is the tested feature,
/// columns 1..=d are the covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSet {
    cols: Vec<Vec<f64>>,
    ys: Vec<f64>,
    /// Per-column sum of squares, kept incrementally.
    col_sq: Vec<f64>,
    /// Optional bound on the window length; unbounded by default.
    max_len: Option<usize>,
}

impl TrainSet {
    pub fn new(d: usize, max_len: Option<usize>) -> Self {
        Self {
            cols: vec![Vec::new(); d + 1],
            ys: Vec::new(),
            col_sq: vec![0.0; d + 1],
            max_len,
        }
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.cols.len()
    }

    pub fn push(&mut self, obs: &Observation) {
        debug_assert_eq!(obs.z.len() + 1, self.cols.len());
        self.cols[0].push(obs.x);
        self.col_sq[0] += obs.x * obs.x;
        for (j, &v) in obs.z.iter().enumerate() {
            self.cols[j + 1].push(v);
            self.col_sq[j + 1] += v * v;
        }
        self.ys.push(obs.y);
        if let Some(cap) = self.max_len {
            while self.ys.len() > cap {
                self.ys.remove(0);
                for (col, sq) in self.cols.iter_mut().zip(&mut self.col_sq) {
                    let dropped = col.remove(0);
                    *sq -= dropped * dropped;
                }
            }
        }
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn feature(&self, row: usize, col: usize) -> f64 {
        self.cols[col][row]
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Coefficients and penalty of one lasso model; the training window is held
/// by the ladder and shared across rungs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoState {
    /// Coefficients for `[x, z_1, ..., z_d]`.
    pub beta: Vec<f64>,
    pub intercept: f64,
    /// Regularization strength.
    pub eta: f64,
    /// Samples absorbed so far.
    pub n_seen: usize,
}

impl LassoState {
    pub fn new(p: usize, eta: f64) -> Self {
        Self { beta: vec![0.0; p], intercept: 0.0, eta, n_seen: 0 }
    }

    pub fn predict(&self, x: f64, z: &[f64]) -> Result<f64> {
        if z.len() + 1 != self.beta.len() {
            return Err(Error::DimensionMismatch {
                expected: self.beta.len() - 1,
                got: z.len(),
            });
        }
        Ok(self.predict_unchecked(x, z))
    }

    #[inline]
    pub fn predict_unchecked(&self, x: f64, z: &[f64]) -> f64 {
        let mut p = self.intercept + self.beta[0] * x;
        for (b, v) in self.beta[1..].iter().zip(z) {
            p += b * v;
        }
        p
    }

    /// Lasso objective `(1/n) sum r^2 + eta * |beta|_1` on `data`.
    pub fn objective(&self, data: &TrainSet) -> f64 {
        let n = data.len();
        if n == 0 {
            return self.eta * self.beta.iter().map(|b| b.abs()).sum::<f64>();
        }
        let mut sse = 0.0;
        for i in 0..n {
            let mut pred = self.intercept;
            for (j, b) in self.beta.iter().enumerate() {
                pred += b * data.feature(i, j);
            }
            let r = data.ys()[i] - pred;
            sse += r * r;
        }
        sse / n as f64 + self.eta * self.beta.iter().map(|b| b.abs()).sum::<f64>()
    }

    /// Run `sweeps` full cyclic coordinate-descent passes with
    /// soft-thresholding over the window. The objective is non-increasing
    /// sweep to sweep.
    pub fn cd_sweep(&mut self, data: &TrainSet, sweeps: usize) {
        let n = data.len();
        if n == 0 || sweeps == 0 {
            return;
        }
        let nf = n as f64;
        let p = self.beta.len();

        // Residuals under the current coefficients.
        let mut r = vec![0.0; n];
        for (i, res) in r.iter_mut().enumerate() {
            let mut pred = self.intercept;
            for (j, b) in self.beta.iter().enumerate() {
                pred += b * data.feature(i, j);
            }
            *res = data.ys()[i] - pred;
        }

        for _ in 0..sweeps {
            // Unpenalized intercept step.
            let shift = r.iter().sum::<f64>() / nf;
            self.intercept += shift;
            for res in r.iter_mut() {
                *res -= shift;
            }

            for j in 0..p {
                let a_j = 2.0 * data.col_sq[j] / nf;
                if a_j == 0.0 {
                    continue;
                }
                let col = &data.cols[j];
                let old = self.beta[j];
                let mut c_j = 0.0;
                for (res, &v) in r.iter().zip(col) {
                    c_j += v * *res;
                }
                c_j = 2.0 * c_j / nf + a_j * old;
                let new = soft_threshold(c_j, self.eta) / a_j;
                if new != old {
                    let delta = new - old;
                    for (res, &v) in r.iter_mut().zip(col) {
                        *res -= delta * v;
                    }
                    self.beta[j] = new;
                }
            }
        }
    }

    /// Sweep until the relative objective change falls below `tol` or
    /// `max_sweeps` is reached.
    pub fn cd_converge(&mut self, data: &TrainSet, max_sweeps: usize, tol: f64) {
        let mut prev = self.objective(data);
        for _ in 0..max_sweeps {
            self.cd_sweep(data, 1);
            let cur = self.objective(data);
            if (prev - cur).abs() <= tol * prev.abs().max(1e-12) {
                return;
            }
            prev = cur;
        }
    }
}

/// Frozen copy of a model's coefficients; predictions from a snapshot are a
/// deterministic function of the input, unaffected by later stream progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub beta: Vec<f64>,
    pub intercept: f64,
    /// Test-clock index at which the snapshot was taken.
    pub frozen_at: usize,
}

impl ModelSnapshot {
    pub fn predict(&self, x: f64, z: &[f64]) -> Result<f64> {
        if z.len() + 1 != self.beta.len() {
            return Err(Error::DimensionMismatch {
                expected: self.beta.len() - 1,
                got: z.len(),
            });
        }
        Ok(self.predict_unchecked(x, z))
    }

    #[inline]
    pub fn predict_unchecked(&self, x: f64, z: &[f64]) -> f64 {
        let mut p = self.intercept + self.beta[0] * x;
        for (b, v) in self.beta[1..].iter().zip(z) {
            p += b * v;
        }
        p
    }
}

pub const DEFAULT_LADDER_SIZE: usize = 20;
pub const DEFAULT_SWEEPS_PER_STEP: usize = 3;
pub const WARMUP_MAX_SWEEPS: usize = 500;
pub const WARMUP_TOL: f64 = 1e-8;

/// A series of lasso models over a penalty grid, all warm-started on the
/// same window; the running model is the selected rung.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelLadder {
    pub rungs: Vec<LassoState>,
    data: TrainSet,
    /// Trailing points used for penalty selection.
    pub holdout_len: usize,
    pub selected: usize,
}

impl ModelLadder {
    /// Fit `ladder_size` rungs on the warm-up observations. The penalty grid
    /// is log-spaced in [1e-3, 10] scaled by `max_j |X^T y| / n` of the
    /// warm-up data.
    pub fn warm_fit(
        warmup: &[Observation],
        ladder_size: usize,
        holdout_len: usize,
        max_window: Option<usize>,
    ) -> Result<Self> {
        if warmup.is_empty() {
            return Err(Error::InsufficientWarmup { needed: 1, got: 0 });
        }
        let d = warmup[0].dim();
        let mut data = TrainSet::new(d, max_window);
        for obs in warmup {
            if obs.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, got: obs.dim() });
            }
            data.push(obs);
        }

        let n = data.len() as f64;
        let p = d + 1;
        let mut scale = 0.0f64;
        for j in 0..p {
            let dot: f64 = data.cols[j].iter().zip(data.ys()).map(|(v, y)| v * y).sum();
            scale = scale.max((dot / n).abs());
        }
        if scale == 0.0 {
            scale = 1.0;
        }
        let etas = crate::sampler::log_spaced(1e-3 * scale, 10.0 * scale, ladder_size);

        let mut rungs: Vec<LassoState> = etas.into_iter().map(|eta| LassoState::new(p, eta)).collect();
        for rung in &mut rungs {
            rung.cd_converge(&data, WARMUP_MAX_SWEEPS, WARMUP_TOL);
            rung.n_seen = data.len();
        }

        let mut ladder = Self { rungs, data, holdout_len, selected: 0 };
        ladder.selected = ladder.select_eta()?;
        Ok(ladder)
    }

    pub fn data(&self) -> &TrainSet {
        &self.data
    }

    pub fn n_seen(&self) -> usize {
        self.data.len()
    }

    /// Absorb one observation into every rung with a few warm-started
    /// sweeps; no refit from scratch.
    pub fn online_update(&mut self, obs: &Observation, sweeps_per_step: usize) {
        self.data.push(obs);
        for rung in &mut self.rungs {
            rung.cd_sweep(&self.data, sweeps_per_step);
            rung.n_seen += 1;
        }
        if let Ok(sel) = self.select_eta() {
            self.selected = sel;
        }
    }

    /// Index of the rung with the smallest mean squared error on the
    /// trailing holdout window; ties break toward the smallest penalty.
    pub fn select_eta(&self) -> Result<usize> {
        let n = self.data.len();
        let h = self.holdout_len.min(n);
        if h == 0 {
            return Err(Error::EmptyHoldout);
        }
        let start = n - h;
        let mut best = (f64::INFINITY, 0usize);
        // Rungs are ordered by ascending eta, so strict improvement keeps
        // the smallest-eta argmin.
        for (l, rung) in self.rungs.iter().enumerate() {
            let mut sse = 0.0;
            for i in start..n {
                let mut pred = rung.intercept;
                for (j, b) in rung.beta.iter().enumerate() {
                    pred += b * self.data.feature(i, j);
                }
                let r = self.data.ys()[i] - pred;
                sse += r * r;
            }
            let mse = sse / h as f64;
            if mse < best.0 {
                best = (mse, l);
            }
        }
        Ok(best.1)
    }

    pub fn selected_rung(&self) -> &LassoState {
        &self.rungs[self.selected]
    }

    /// Deep copy of the selected rung's coefficients, frozen at `t`.
    pub fn snapshot(&self, t: usize) -> ModelSnapshot {
        let rung = self.selected_rung();
        ModelSnapshot {
            beta: rung.beta.clone(),
            intercept: rung.intercept,
            frozen_at: t,
        }
    }
}
