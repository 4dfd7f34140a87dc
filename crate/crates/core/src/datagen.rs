//! Synthetic data generators for the simulation harness.
//!
//! The baseline design draws `Z ~ N(0, I_d)` and `X | Z ~ N(u' Z, 1)` with
//! a fresh random direction `u` per trial. Responses are
//! `Y = (w' Z)^2 + noise` under the null and gain an additive `amp * X`
//! term under the alternative, so the conditional signal is linear in `x`
//! while the nuisance is nonlinear in `z`.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::sampler::{DummySampler, GaussianLinearSampler};
use crate::types::Observation;
use rand::Rng;
use rand_distr::StandardNormal;

/// Whether the response carries a conditional dependence on `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Null,
    Alternative,
}

/// Parameters of one synthetic trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub regime: Regime,
    /// Number of observations to generate.
    pub n: usize,
    /// Dimension of the conditioning vector `z`.
    pub d: usize,
    /// Coefficient on `x` in the alternative response.
    pub signal_amp: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { regime: Regime::Null, n: 500, d: 19, signal_amp: 3.0 }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Domain("d must be >= 1".into()));
        }
        if !self.signal_amp.is_finite() {
            return Err(Error::NonFinite { field: "signal_amp" });
        }
        Ok(())
    }
}

fn standard_normal_vec(d: usize, rng: &mut RngStream) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn response(cfg: &SyntheticConfig, x: f64, z: &[f64], w: &[f64], rng: &mut RngStream) -> f64 {
    let wz: f64 = w.iter().zip(z).map(|(a, b)| a * b).sum();
    let mut y = wz * wz + rng.sample::<f64, _>(StandardNormal);
    if cfg.regime == Regime::Alternative {
        y += cfg.signal_amp * x;
    }
    y
}

/// Generate one trial: fresh directions `u` (design) and `w` (nuisance),
/// the observations, and the exact conditional sampler for `x | z`.
pub fn gen_dataset(
    cfg: &SyntheticConfig,
    rng: &mut RngStream,
) -> Result<(Vec<Observation>, GaussianLinearSampler)> {
    cfg.validate()?;
    let u = standard_normal_vec(cfg.d, rng);
    let w = standard_normal_vec(cfg.d, rng);
    let sampler = GaussianLinearSampler::new(u, 1.0)?;
    let obs = (0..cfg.n)
        .map(|_| {
            let z = standard_normal_vec(cfg.d, rng);
            let x = sampler.sample(&z, rng)?;
            let y = response(cfg, x, &z, &w, rng);
            Ok(Observation { x, y, z })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((obs, sampler))
}

/// Generate a trial with an autocorrelated design: `(x, z)` is jointly
/// Gaussian with covariance `rho^|i - j|` over `d + 1` coordinates, `x`
/// taken as coordinate 0 and `z` as the remaining `d`. Returns the exact
/// conditional sampler of `x | z` derived from the covariance.
pub fn gen_autocorrelated(
    cfg: &SyntheticConfig,
    rho: f64,
    rng: &mut RngStream,
) -> Result<(Vec<Observation>, GaussianLinearSampler)> {
    cfg.validate()?;
    if rho.is_nan() || rho.abs() >= 1.0 {
        return Err(Error::Domain(format!("rho must be in (-1, 1), got {rho}")));
    }
    let dim = cfg.d + 1;
    let cov = DMatrix::from_fn(dim, dim, |i, j| rho.powi((i as i64 - j as i64).abs() as i32));
    let chol = Cholesky::new(cov.clone()).ok_or(Error::SingularCovariance)?;
    let factor = chol.l();

    // Exact conditional of coordinate 0 given the rest:
    // mean = cov_xz * cov_zz^{-1} z, var = 1 - cov_xz * cov_zz^{-1} * cov_zx.
    let cov_zz = cov.view((1, 1), (cfg.d, cfg.d)).into_owned();
    let cov_zx = DVector::from_fn(cfg.d, |i, _| cov[(0, i + 1)]);
    let solved = Cholesky::new(cov_zz)
        .ok_or(Error::SingularCovariance)?
        .solve(&cov_zx);
    let cond_var = 1.0 - cov_zx.dot(&solved);
    if cond_var.is_nan() || cond_var <= 0.0 {
        return Err(Error::SingularCovariance);
    }
    let sampler = GaussianLinearSampler::new(solved.iter().copied().collect(), cond_var.sqrt())?;

    let w = standard_normal_vec(cfg.d, rng);
    let obs = (0..cfg.n)
        .map(|_| {
            let iid = DVector::from_iterator(
                dim,
                (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)),
            );
            let joint = &factor * iid;
            let x = joint[0];
            let z: Vec<f64> = joint.iter().skip(1).copied().collect();
            let y = response(cfg, x, &z, &w, rng);
            Ok(Observation { x, y, z })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((obs, sampler))
}

/// A deliberately wrong conditional sampler: same mean, inflated or
/// deflated conditional standard deviation.
pub fn misspecified_sampler(
    sampler: &GaussianLinearSampler,
    sigma_tilde: f64,
) -> Result<GaussianLinearSampler> {
    sampler.with_sigma(sigma_tilde)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n;
        cov / (va * vb).sqrt()
    }

    #[test]
    fn dataset_shapes_and_finiteness() {
        let mut rng = RngStream::new(7, 0);
        let cfg = SyntheticConfig { n: 100, ..SyntheticConfig::default() };
        let (obs, sampler) = gen_dataset(&cfg, &mut rng).unwrap();
        assert_eq!(obs.len(), 100);
        assert_eq!(sampler.dim(), 19);
        for o in &obs {
            assert_eq!(o.z.len(), 19);
            assert!(o.x.is_finite() && o.y.is_finite());
        }
    }

    #[test]
    fn determinism_across_replays() {
        let cfg = SyntheticConfig { n: 50, ..SyntheticConfig::default() };
        let (a, _) = gen_dataset(&cfg, &mut RngStream::new(11, 3)).unwrap();
        let (b, _) = gen_dataset(&cfg, &mut RngStream::new(11, 3)).unwrap();
        assert_eq!(a, b);
        let (c, _) = gen_dataset(&cfg, &mut RngStream::new(11, 4)).unwrap();
        assert_ne!(a, c);
    }

    /// The design is linear-Gaussian: regressing x on z recovers a residual
    /// variance of 1 (the conditional noise scale).
    #[test]
    fn design_residual_variance_is_one() {
        let mut rng = RngStream::new(13, 0);
        let cfg = SyntheticConfig { n: 20_000, d: 5, ..SyntheticConfig::default() };
        let (obs, _) = gen_dataset(&cfg, &mut rng).unwrap();
        let zmat = DMatrix::from_fn(obs.len(), cfg.d, |i, j| obs[i].z[j]);
        let xs = DVector::from_iterator(obs.len(), obs.iter().map(|o| o.x));
        let gram = zmat.transpose() * &zmat;
        let coefs = Cholesky::new(gram).unwrap().solve(&(zmat.transpose() * &xs));
        let resid = &xs - zmat * coefs;
        let var = resid.dot(&resid) / obs.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "residual variance {var}");
    }

    /// Alternative responses differ from null responses by amp * x when
    /// generated from the same stream.
    #[test]
    fn alternative_adds_linear_signal() {
        let null_cfg = SyntheticConfig { n: 200, d: 4, ..SyntheticConfig::default() };
        let alt_cfg = SyntheticConfig { regime: Regime::Alternative, ..null_cfg.clone() };
        let (null_obs, _) = gen_dataset(&null_cfg, &mut RngStream::new(21, 0)).unwrap();
        let (alt_obs, _) = gen_dataset(&alt_cfg, &mut RngStream::new(21, 0)).unwrap();
        for (a, b) in null_obs.iter().zip(&alt_obs) {
            assert_eq!(a.x, b.x);
            assert_eq!(a.z, b.z);
            assert!((b.y - a.y - 3.0 * a.x).abs() < 1e-12);
        }
    }

    /// Empirical lag-1 correlation of the joint (x, z) vector matches rho,
    /// and the derived conditional sampler for an AR(1) edge coordinate is
    /// N(rho * z_1, 1 - rho^2).
    #[test]
    fn autocorrelated_design_moments() {
        let mut rng = RngStream::new(31, 0);
        let cfg = SyntheticConfig { n: 20_000, d: 4, ..SyntheticConfig::default() };
        let rho = 0.5;
        let (obs, sampler) = gen_autocorrelated(&cfg, rho, &mut rng).unwrap();

        let xs: Vec<f64> = obs.iter().map(|o| o.x).collect();
        let z0: Vec<f64> = obs.iter().map(|o| o.z[0]).collect();
        let z1: Vec<f64> = obs.iter().map(|o| o.z[1]).collect();
        assert!((sample_corr(&xs, &z0) - rho).abs() < 0.02);
        assert!((sample_corr(&xs, &z1) - rho * rho).abs() < 0.02);

        // For an AR(1) chain, coordinate 0 given the rest depends only on
        // its neighbor.
        let mut fresh = RngStream::new(99, 0);
        let z = vec![2.0, -1.0, 0.5, 0.3];
        let n = 200_000;
        let draws: Vec<f64> =
            (0..n).map(|_| sampler.sample(&z, &mut fresh).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var =
            draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - rho * z[0]).abs() < 0.01, "mean {mean}");
        assert!((var - (1.0 - rho * rho)).abs() < 0.01, "var {var}");
    }

    #[test]
    fn invalid_rho_rejected() {
        let cfg = SyntheticConfig::default();
        assert!(gen_autocorrelated(&cfg, 1.0, &mut RngStream::new(0, 0)).is_err());
        assert!(gen_autocorrelated(&cfg, -1.5, &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn misspecified_sampler_changes_spread_only() {
        let base = GaussianLinearSampler::new(vec![1.0, -2.0], 1.0).unwrap();
        let wide = misspecified_sampler(&base, 2.0).unwrap();
        let mut r1 = RngStream::new(5, 0);
        let mut r2 = RngStream::new(5, 0);
        let z = vec![0.5, 0.5];
        let a = base.sample(&z, &mut r1).unwrap();
        let b = wide.sample(&z, &mut r2).unwrap();
        // Same underlying normal draw, scaled about the shared mean.
        let mean = 1.0 * 0.5 + (-2.0) * 0.5;
        assert!(((b - mean) - 2.0 * (a - mean)).abs() < 1e-12);
        assert!(misspecified_sampler(&base, 0.0).is_err());
    }
}
