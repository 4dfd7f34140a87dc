//! Offline randomization tests against the same conditional samplers: the
//! refit-per-dummy conditional randomization test and the cheaper
//! holdout-resampling variant.
//!
//! Both compare the observed prediction error of a fitted model against
//! the errors obtained after replacing the tested feature with draws from
//! its conditional distribution. Under conditional independence the
//! observed column and the dummy columns are exchangeable, so the rank
//! p-value `(1 + #{dummy stat <= observed stat}) / (1 + M)` is valid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::betting::batch_mse;
use crate::error::{Error, Result};
use crate::model::{LassoState, ModelSnapshot, TrainSet, WARMUP_MAX_SWEEPS, WARMUP_TOL};
use crate::rng::RngStream;
use crate::sampler::{log_spaced, DummySampler};
use crate::types::Observation;

/// Output of an offline randomization test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineResult {
    pub p_value: f64,
    /// Prediction error of the model fitted on the observed feature.
    pub observed_stat: f64,
    /// Prediction errors under each dummy replacement.
    pub dummy_stats: Vec<f64>,
}

/// A fitting procedure pluggable into the offline tests. Implementations
/// must be deterministic given the provided random stream.
pub trait OfflineTrainer: Send + Sync {
    fn fit(&self, data: &[Observation], rng: &mut RngStream) -> Result<ModelSnapshot>;
}

fn train_set(data: &[Observation]) -> TrainSet {
    let d = data[0].z.len();
    let mut set = TrainSet::new(d, None);
    for obs in data {
        set.push(obs);
    }
    set
}

fn eta_grid(data: &TrainSet, ladder_size: usize) -> Vec<f64> {
    let n = data.len() as f64;
    let mut scale = 0.0f64;
    for col in 0..data.n_features() {
        let mut dot = 0.0;
        for row in 0..data.len() {
            dot += data.feature(row, col) * data.ys()[row];
        }
        scale = scale.max(dot.abs() / n);
    }
    if scale <= 0.0 {
        scale = 1.0;
    }
    log_spaced(1e-3 * scale, 10.0 * scale, ladder_size)
}

/// Cross-validated lasso: a warm-started penalty path fitted per fold,
/// penalty chosen by mean validation error, final refit on all data.
#[derive(Debug, Clone)]
pub struct CvLassoTrainer {
    pub ladder_size: usize,
    pub cv_folds: usize,
}

impl Default for CvLassoTrainer {
    fn default() -> Self {
        Self { ladder_size: 20, cv_folds: 5 }
    }
}

impl CvLassoTrainer {
    /// Fit the penalty path from largest to smallest penalty on `rows`,
    /// returning the validation MSE per penalty on `val_rows`.
    fn path_errors(
        &self,
        data: &[Observation],
        rows: &[usize],
        val_rows: &[usize],
        etas_desc: &[f64],
    ) -> Result<Vec<f64>> {
        let subset: Vec<Observation> = rows.iter().map(|&i| data[i].clone()).collect();
        let set = train_set(&subset);
        let p = data[0].z.len() + 1;
        let mut state = LassoState::new(p, etas_desc[0]);
        let mut errs = Vec::with_capacity(etas_desc.len());
        for &eta in etas_desc {
            state.eta = eta;
            state.cd_converge(&set, WARMUP_MAX_SWEEPS, WARMUP_TOL);
            let mse = val_rows
                .iter()
                .map(|&i| {
                    let o = &data[i];
                    (state.predict_unchecked(o.x, &o.z) - o.y).powi(2)
                })
                .sum::<f64>()
                / val_rows.len() as f64;
            errs.push(mse);
        }
        Ok(errs)
    }
}

impl OfflineTrainer for CvLassoTrainer {
    fn fit(&self, data: &[Observation], rng: &mut RngStream) -> Result<ModelSnapshot> {
        let n = data.len();
        if n < 2 * self.cv_folds {
            return Err(Error::DegenerateSplit);
        }
        let full = train_set(data);
        let mut etas = eta_grid(&full, self.ladder_size);
        etas.reverse(); // fit from strongest penalty down, warm-starting

        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(rng);
        let folds: Vec<Vec<usize>> =
            (0..self.cv_folds).map(|f| order[f..].iter().step_by(self.cv_folds).copied().collect()).collect();

        let mut cv_err = vec![0.0; etas.len()];
        for f in 0..self.cv_folds {
            let val = &folds[f];
            let train: Vec<usize> =
                (0..self.cv_folds).filter(|&g| g != f).flat_map(|g| folds[g].iter().copied()).collect();
            if val.is_empty() || train.is_empty() {
                return Err(Error::DegenerateSplit);
            }
            let errs = self.path_errors(data, &train, val, &etas)?;
            for (acc, e) in cv_err.iter_mut().zip(errs) {
                *acc += e / self.cv_folds as f64;
            }
        }
        // Smallest mean validation error; ties go to the stronger penalty,
        // which comes first in the descending path.
        let best = cv_err
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .ok_or(Error::EmptyBatch)?;

        let p = data[0].z.len() + 1;
        let mut state = LassoState::new(p, etas[0]);
        for &eta in &etas[..=best] {
            state.eta = eta;
            state.cd_converge(&full, WARMUP_MAX_SWEEPS, WARMUP_TOL);
        }
        Ok(ModelSnapshot { beta: state.beta, intercept: state.intercept, frozen_at: n })
    }
}

/// Lasso at one fixed penalty; no data-driven selection, so it is cheap
/// enough to run inside large refit loops.
#[derive(Debug, Clone)]
pub struct FixedEtaLassoTrainer {
    pub eta: f64,
}

impl OfflineTrainer for FixedEtaLassoTrainer {
    fn fit(&self, data: &[Observation], _rng: &mut RngStream) -> Result<ModelSnapshot> {
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let set = train_set(data);
        let mut state = LassoState::new(data[0].z.len() + 1, self.eta);
        state.cd_converge(&set, WARMUP_MAX_SWEEPS, WARMUP_TOL);
        Ok(ModelSnapshot { beta: state.beta, intercept: state.intercept, frozen_at: data.len() })
    }
}

fn rank_pvalue(observed: f64, dummies: &[f64]) -> f64 {
    let le = dummies.iter().filter(|&&t| t <= observed).count();
    (1 + le) as f64 / (1 + dummies.len()) as f64
}

fn resample_x(
    data: &[Observation],
    sampler: &dyn DummySampler,
    rng: &mut RngStream,
) -> Result<Vec<Observation>> {
    data.iter()
        .map(|o| {
            let x = sampler.sample(&o.z, rng)?;
            Ok(Observation { x, ..o.clone() })
        })
        .collect()
}

/// Refit-per-dummy randomization test: the model is retrained on every
/// dummy dataset, so the fitted error is computed the same way for the
/// observed feature and each replacement. Dummies run in parallel on
/// deterministic child streams keyed by dummy index.
pub fn crt_pvalue(
    data: &[Observation],
    sampler: &dyn DummySampler,
    trainer: &dyn OfflineTrainer,
    m: usize,
    rng: &mut RngStream,
) -> Result<OfflineResult> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if m == 0 {
        return Err(Error::Domain("number of dummies must be >= 1".into()));
    }
    let model = trainer.fit(data, &mut rng.child(0))?;
    let observed_stat = batch_mse(&model, data)?;

    let base = rng.child(1);
    let dummy_stats: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|k| {
            let mut child = base.child(k as u64 + 1);
            let dummy = resample_x(data, sampler, &mut child)?;
            let model = trainer.fit(&dummy, &mut child)?;
            batch_mse(&model, &dummy)
        })
        .collect::<Result<_>>()?;

    Ok(OfflineResult { p_value: rank_pvalue(observed_stat, &dummy_stats), observed_stat, dummy_stats })
}

/// Holdout-resampling variant: one fit on the training split, dummy
/// feature draws only in the holdout split, no refitting.
pub fn hrt_pvalue(
    data: &[Observation],
    sampler: &dyn DummySampler,
    trainer: &dyn OfflineTrainer,
    m: usize,
    split_fraction: f64,
    rng: &mut RngStream,
) -> Result<OfflineResult> {
    if m == 0 {
        return Err(Error::Domain("number of dummies must be >= 1".into()));
    }
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::Domain(format!(
            "split_fraction must be in (0, 1), got {split_fraction}"
        )));
    }
    let n_train = (data.len() as f64 * split_fraction).round() as usize;
    if n_train == 0 || n_train == data.len() {
        return Err(Error::DegenerateSplit);
    }
    let (train, holdout) = data.split_at(n_train);
    let model = trainer.fit(train, &mut rng.child(0))?;
    let observed_stat = batch_mse(&model, holdout)?;

    let base = rng.child(1);
    let dummy_stats: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|k| {
            let mut child = base.child(k as u64 + 1);
            let dummy = resample_x(holdout, sampler, &mut child)?;
            batch_mse(&model, &dummy)
        })
        .collect::<Result<_>>()?;

    Ok(OfflineResult { p_value: rank_pvalue(observed_stat, &dummy_stats), observed_stat, dummy_stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_dataset, Regime, SyntheticConfig};

    #[test]
    fn rank_pvalue_bounds_and_values() {
        assert_eq!(rank_pvalue(1.0, &[2.0, 3.0, 4.0]), 0.25);
        assert_eq!(rank_pvalue(5.0, &[2.0, 3.0, 4.0]), 1.0);
        assert_eq!(rank_pvalue(3.0, &[2.0, 3.0, 4.0]), 0.75);
    }

    #[test]
    fn fixed_eta_trainer_recovers_strong_signal() {
        let mut rng = RngStream::new(3, 0);
        let cfg = SyntheticConfig {
            regime: Regime::Alternative,
            n: 400,
            d: 5,
            ..SyntheticConfig::default()
        };
        let (data, _) = gen_dataset(&cfg, &mut rng).unwrap();
        let trainer = FixedEtaLassoTrainer { eta: 0.1 };
        let model = trainer.fit(&data, &mut rng.child(0)).unwrap();
        assert!(model.beta[0] > 1.0, "x coefficient {}", model.beta[0]);
    }

    #[test]
    fn cv_trainer_deterministic_given_stream() {
        let mut rng = RngStream::new(5, 0);
        let cfg = SyntheticConfig { n: 120, d: 4, ..SyntheticConfig::default() };
        let (data, _) = gen_dataset(&cfg, &mut rng).unwrap();
        let trainer = CvLassoTrainer::default();
        let a = trainer.fit(&data, &mut RngStream::new(9, 1)).unwrap();
        let b = trainer.fit(&data, &mut RngStream::new(9, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crt_rejects_strong_alternative() {
        let mut rng = RngStream::new(17, 0);
        let cfg = SyntheticConfig {
            regime: Regime::Alternative,
            n: 300,
            d: 5,
            ..SyntheticConfig::default()
        };
        let (data, sampler) = gen_dataset(&cfg, &mut rng).unwrap();
        let trainer = FixedEtaLassoTrainer { eta: 0.05 };
        let res = crt_pvalue(&data, &sampler, &trainer, 99, &mut rng.child(0)).unwrap();
        assert_eq!(res.p_value, 1.0 / 100.0, "p = {}", res.p_value);
    }

    #[test]
    fn crt_parallel_degree_invariance() {
        let mut rng = RngStream::new(19, 0);
        let cfg = SyntheticConfig { n: 150, d: 4, ..SyntheticConfig::default() };
        let (data, sampler) = gen_dataset(&cfg, &mut rng).unwrap();
        let trainer = FixedEtaLassoTrainer { eta: 0.1 };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                crt_pvalue(&data, &sampler, &trainer, 40, &mut RngStream::new(19, 7)).unwrap()
            })
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a, b);
    }

    #[test]
    fn hrt_rejects_strong_alternative_and_respects_split() {
        let mut rng = RngStream::new(23, 0);
        let cfg = SyntheticConfig {
            regime: Regime::Alternative,
            n: 400,
            d: 5,
            ..SyntheticConfig::default()
        };
        let (data, sampler) = gen_dataset(&cfg, &mut rng).unwrap();
        let trainer = FixedEtaLassoTrainer { eta: 0.05 };
        let res = hrt_pvalue(&data, &sampler, &trainer, 99, 0.5, &mut rng.child(0)).unwrap();
        assert!(res.p_value <= 0.05, "p = {}", res.p_value);

        assert!(hrt_pvalue(&data, &sampler, &trainer, 99, 0.0, &mut rng.child(1)).is_err());
        assert!(hrt_pvalue(&data[..1], &sampler, &trainer, 9, 0.5, &mut rng.child(2)).is_err());
    }

    /// Under the null the rank p-value is (discretely) uniform: over many
    /// trials its mean is near 1/2 and level-0.1 rejections are near 10%.
    #[test]
    fn crt_null_pvalues_uniform() {
        let trials = 60;
        let m = 19;
        let trainer = FixedEtaLassoTrainer { eta: 0.2 };
        let results: Vec<f64> = (0..trials)
            .into_par_iter()
            .map(|trial| {
                let mut rng = RngStream::new(500, trial);
                let cfg = SyntheticConfig { n: 120, d: 4, ..SyntheticConfig::default() };
                let (data, sampler) = gen_dataset(&cfg, &mut rng).unwrap();
                crt_pvalue(&data, &sampler, &trainer, m, &mut rng.child(1)).unwrap().p_value
            })
            .collect();
        let mean: f64 = results.iter().sum::<f64>() / trials as f64;
        let rej = results.iter().filter(|&&p| p <= 0.1).count() as f64 / trials as f64;
        assert!((mean - 0.5).abs() < 0.12, "mean p {mean}");
        assert!(rej < 0.25, "level-0.1 rejection rate {rej}");
    }
}
