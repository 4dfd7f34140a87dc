//! Conditional dummy-feature generation: draws of `x̃` from (a model of)
//! `P(X | Z)`. Samplers only ever see covariates; the interface has no
//! access to responses, which is what keeps the dummies exchangeable with
//! the original feature under the null.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Conditional generator for the tested feature given covariates.
///
/// Note the signature: a sampler is handed `z` only. Responses are not
/// reachable from this interface.
pub trait DummySampler: Send + Sync {
    fn dim(&self) -> usize;

    /// One draw from the sampler's conditional law given `z`.
    fn sample(&self, z: &[f64], rng: &mut RngStream) -> Result<f64> {
        self.check_dim(z)?;
        Ok(self.sample_unchecked(z, rng))
    }

    fn sample_unchecked(&self, z: &[f64], rng: &mut RngStream) -> f64;

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(())
    }
}

/// Draw one dummy per covariate vector.
pub fn sample_dummy_batch(
    sampler: &dyn DummySampler,
    z_batch: &[&[f64]],
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    z_batch.iter().map(|z| sampler.sample(z, rng)).collect()
}

/// `k` independent dummy copies of the batch's feature column.
pub fn sample_dummy_batches(
    sampler: &dyn DummySampler,
    z_batch: &[&[f64]],
    k: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec<f64>>> {
    (0..k).map(|_| sample_dummy_batch(sampler, z_batch, rng)).collect()
}

/// Exact Gaussian-linear conditional: `X | Z ~ N(u·z, sigma^2)`.
///
/// Misspecification is expressed by constructing this type with a
/// conditional standard deviation different from the true one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLinearSampler {
    pub u: Vec<f64>,
    pub sigma: f64,
}

impl GaussianLinearSampler {
    pub fn new(u: Vec<f64>, sigma: f64) -> Result<Self> {
        if sigma.is_nan() || sigma <= 0.0 {
            return Err(Error::Domain(format!("sigma must be > 0, got {sigma}")));
        }
        Ok(Self { u, sigma })
    }

    /// Copy with the conditional standard deviation replaced; the mean
    /// function is unchanged.
    pub fn with_sigma(&self, sigma_tilde: f64) -> Result<Self> {
        Self::new(self.u.clone(), sigma_tilde)
    }
}

impl DummySampler for GaussianLinearSampler {
    fn dim(&self) -> usize {
        self.u.len()
    }

    fn sample_unchecked(&self, z: &[f64], rng: &mut RngStream) -> f64 {
        let mean = dot(&self.u, z);
        mean + self.sigma * rng.sample::<f64, _>(StandardNormal)
    }
}

/// Conditional of `x | z` under a joint Gaussian fitted to unlabeled data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedGaussianSampler {
    pub cond_coef: Vec<f64>,
    pub cond_mean_offset: f64,
    pub cond_std: f64,
}

impl DummySampler for FittedGaussianSampler {
    fn dim(&self) -> usize {
        self.cond_coef.len()
    }

    fn sample_unchecked(&self, z: &[f64], rng: &mut RngStream) -> f64 {
        let mean = self.cond_mean_offset + dot(&self.cond_coef, z);
        mean + self.cond_std * rng.sample::<f64, _>(StandardNormal)
    }
}

/// Floor on the fitted conditional standard deviation; prevents degenerate
/// point-mass dummies.
pub const COND_STD_FLOOR: f64 = 1e-8;

/// Fit a joint Gaussian on `(x, z)` rows and return the analytic
/// conditional of `x | z`:
/// `coef = Sigma_xz Sigma_zz^-1`, `offset = mu_x - coef·mu_z`,
/// `var = Sigma_xx - Sigma_xz Sigma_zz^-1 Sigma_zx`.
pub fn fit_gaussian_sampler(xs: &[f64], zs: &[Vec<f64>]) -> Result<FittedGaussianSampler> {
    let n = xs.len();
    if n != zs.len() {
        return Err(Error::DimensionMismatch { expected: n, got: zs.len() });
    }
    let d = zs.first().map(|z| z.len()).unwrap_or(0);
    if n < d + 2 {
        return Err(Error::Domain(format!(
            "need at least d+2 = {} rows to fit a joint Gaussian, got {n}",
            d + 2
        )));
    }
    for z in zs {
        if z.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: z.len() });
        }
    }

    let mu_x = xs.iter().sum::<f64>() / n as f64;
    let mut mu_z = vec![0.0; d];
    for z in zs {
        for (m, v) in mu_z.iter_mut().zip(z) {
            *m += v;
        }
    }
    for m in &mut mu_z {
        *m /= n as f64;
    }

    let denom = (n - 1) as f64;
    let mut sigma_zz = DMatrix::<f64>::zeros(d, d);
    let mut sigma_xz = DVector::<f64>::zeros(d);
    let mut sigma_xx = 0.0;
    for (x, z) in xs.iter().zip(zs) {
        let cx = x - mu_x;
        sigma_xx += cx * cx;
        for i in 0..d {
            let ci = z[i] - mu_z[i];
            sigma_xz[i] += cx * ci;
            for j in i..d {
                sigma_zz[(i, j)] += ci * (z[j] - mu_z[j]);
            }
        }
    }
    sigma_xx /= denom;
    sigma_xz /= denom;
    for i in 0..d {
        for j in i..d {
            sigma_zz[(i, j)] /= denom;
            sigma_zz[(j, i)] = sigma_zz[(i, j)];
        }
    }

    // Ridge term keeps the solve well-posed on near-collinear covariates.
    let lambda = 1e-6 * sigma_zz.trace() / d.max(1) as f64;
    for i in 0..d {
        sigma_zz[(i, i)] += lambda;
    }

    let chol = sigma_zz.clone().cholesky().ok_or(Error::SingularCovariance)?;
    let coef = chol.solve(&sigma_xz);
    let var = (sigma_xx - sigma_xz.dot(&coef)).max(COND_STD_FLOOR * COND_STD_FLOOR);
    let offset = mu_x - coef.dot(&DVector::from_column_slice(&mu_z));

    Ok(FittedGaussianSampler {
        cond_coef: coef.as_slice().to_vec(),
        cond_mean_offset: offset,
        cond_std: var.sqrt().max(COND_STD_FLOOR),
    })
}

/// Bernoulli dummies for a binary feature, with a ridge-penalized logistic
/// model of the success probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BernoulliLogisticSampler {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2_penalty: f64,
}

impl DummySampler for BernoulliLogisticSampler {
    fn dim(&self) -> usize {
        self.weights.len()
    }

    fn sample_unchecked(&self, z: &[f64], rng: &mut RngStream) -> f64 {
        let p = sigmoid(self.bias + dot(&self.weights, z));
        if rng.random::<f64>() < p {
            1.0
        } else {
            0.0
        }
    }
}

/// Default penalty grid: 10 log-spaced values in [1e-3, 10].
pub fn default_logistic_penalty_grid() -> Vec<f64> {
    log_spaced(1e-3, 10.0, 10)
}

pub(crate) fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (llo + (lhi - llo) * i as f64 / (n - 1).max(1) as f64).exp())
        .collect()
}

/// Penalized logistic fit of `P(x = 1 | z)`, with the penalty chosen among
/// `penalty_grid` by cross-validated log-loss.
pub fn fit_logistic_sampler(
    xs: &[f64],
    zs: &[Vec<f64>],
    penalty_grid: &[f64],
    cv_folds: usize,
    rng: &mut RngStream,
) -> Result<BernoulliLogisticSampler> {
    let n = xs.len();
    if n == 0 || n != zs.len() {
        return Err(Error::DimensionMismatch { expected: n, got: zs.len() });
    }
    if xs.iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::Domain("x column must be binary (0/1)".into()));
    }
    if xs.iter().all(|&x| x == xs[0]) {
        return Err(Error::DegenerateClass);
    }
    if penalty_grid.is_empty() {
        return Err(Error::Domain("penalty grid must be non-empty".into()));
    }
    let d = zs[0].len();

    // Shuffled fold assignment.
    let folds = cv_folds.clamp(2, n);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let fold_of: Vec<usize> = {
        let mut f = vec![0usize; n];
        for (rank, &i) in order.iter().enumerate() {
            f[i] = rank % folds;
        }
        f
    };

    let mut best = (f64::INFINITY, penalty_grid[0]);
    for &lambda in penalty_grid {
        let mut loss = 0.0;
        let mut count = 0usize;
        for fold in 0..folds {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
            if train.is_empty() || test.is_empty() {
                continue;
            }
            // Skip folds whose training part is single-class.
            let first = xs[train[0]];
            if train.iter().all(|&i| xs[i] == first) {
                continue;
            }
            let (w, b) = logistic_newton(xs, zs, &train, lambda, d);
            for &i in &test {
                let p = sigmoid(b + dot(&w, &zs[i])).clamp(1e-12, 1.0 - 1e-12);
                loss -= xs[i] * p.ln() + (1.0 - xs[i]) * (1.0 - p).ln();
                count += 1;
            }
        }
        if count == 0 {
            continue;
        }
        let mean_loss = loss / count as f64;
        if mean_loss < best.0 {
            best = (mean_loss, lambda);
        }
    }

    let all: Vec<usize> = (0..n).collect();
    let (weights, bias) = logistic_newton(xs, zs, &all, best.1, d);
    Ok(BernoulliLogisticSampler { weights, bias, l2_penalty: best.1 })
}

/// Newton iterations for ridge-penalized logistic regression. The bias is
/// unpenalized.
fn logistic_newton(xs: &[f64], zs: &[Vec<f64>], idx: &[usize], lambda: f64, d: usize) -> (Vec<f64>, f64) {
    let p = d + 1; // [bias, weights]
    let n = idx.len() as f64;
    let mut theta = DVector::<f64>::zeros(p);
    for _ in 0..50 {
        let mut grad = DVector::<f64>::zeros(p);
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for &i in idx {
            let z = &zs[i];
            let lin = theta[0] + (0..d).map(|j| theta[j + 1] * z[j]).sum::<f64>();
            let mu = sigmoid(lin);
            let r = mu - xs[i];
            let wgt = (mu * (1.0 - mu)).max(1e-10);
            grad[0] += r;
            hess[(0, 0)] += wgt;
            for a in 0..d {
                grad[a + 1] += r * z[a];
                hess[(0, a + 1)] += wgt * z[a];
                for b in a..d {
                    hess[(a + 1, b + 1)] += wgt * z[a] * z[b];
                }
            }
        }
        grad /= n;
        hess /= n;
        for a in 0..p {
            for b in (a + 1)..p {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        for j in 1..p {
            grad[j] += 2.0 * lambda * theta[j];
            hess[(j, j)] += 2.0 * lambda;
        }
        // Small extra ridge on the Newton system itself.
        for j in 0..p {
            hess[(j, j)] += 1e-10;
        }
        let step = match hess.cholesky() {
            Some(c) => c.solve(&grad),
            None => break,
        };
        theta -= &step;
        if step.amax() < 1e-10 {
            break;
        }
    }
    let bias = theta[0];
    let weights = theta.as_slice()[1..].to_vec();
    (weights, bias)
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_coef_gaussian_is_standard_normal() {
        let s = GaussianLinearSampler::new(vec![0.0; 3], 1.0).unwrap();
        let mut rng = RngStream::new(1, 0);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let z = [0.3, -1.0, 2.0];
        for _ in 0..n {
            let v = s.sample(&z, &mut rng).unwrap();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn same_seed_same_draw() {
        let s = GaussianLinearSampler::new(vec![0.5, -0.2], 2.0).unwrap();
        let z = [1.0, 3.0];
        let a = s.sample(&z, &mut RngStream::new(9, 4)).unwrap();
        let b = s.sample(&z, &mut RngStream::new(9, 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch() {
        let s = GaussianLinearSampler::new(vec![0.0; 2], 1.0).unwrap();
        assert!(s.sample(&[1.0], &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn sigma_must_be_positive() {
        assert!(GaussianLinearSampler::new(vec![0.0], 0.0).is_err());
        assert!(GaussianLinearSampler::new(vec![0.0], -1.0).is_err());
    }

    #[test]
    fn batches_shapes() {
        let s = GaussianLinearSampler::new(vec![0.0], 1.0).unwrap();
        let z1 = [0.0f64];
        let z2 = [1.0f64];
        let batch: Vec<&[f64]> = vec![&z1, &z2];
        let mut rng = RngStream::new(3, 0);
        let out = sample_dummy_batches(&s, &batch, 4, &mut rng).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|b| b.len() == 2));

        let empty: Vec<&[f64]> = vec![];
        let out = sample_dummy_batches(&s, &empty, 3, &mut rng).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|b| b.is_empty()));
    }

    #[test]
    fn k_one_matches_single_batch() {
        let s = GaussianLinearSampler::new(vec![1.0], 1.0).unwrap();
        let z1 = [0.5f64];
        let batch: Vec<&[f64]> = vec![&z1, &z1, &z1];
        let a = sample_dummy_batches(&s, &batch, 1, &mut RngStream::new(8, 1)).unwrap();
        let b = sample_dummy_batch(&s, &batch, &mut RngStream::new(8, 1)).unwrap();
        assert_eq!(a[0], b);
    }

    /// Closed-form bivariate Gaussian conditional as oracle: for a joint
    /// N(0, [[1, rho], [rho, 1]]) the conditional of x given z has slope
    /// rho and std sqrt(1 - rho^2).
    #[test]
    fn fitted_gaussian_recovers_bivariate_conditional() {
        let rho: f64 = 0.6;
        let mut rng = RngStream::new(11, 0);
        let n = 100_000;
        let mut xs = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        for _ in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            let x = rho * z + (1.0 - rho * rho).sqrt() * e;
            xs.push(x);
            zs.push(vec![z]);
        }
        let fit = fit_gaussian_sampler(&xs, &zs).unwrap();
        assert!((fit.cond_coef[0] - rho).abs() < 0.05, "coef {}", fit.cond_coef[0]);
        assert!((fit.cond_std - 0.8).abs() < 0.05, "std {}", fit.cond_std);
        assert!(fit.cond_mean_offset.abs() < 0.05);
    }

    #[test]
    fn fitted_gaussian_independent_case() {
        let mut rng = RngStream::new(12, 0);
        let n = 50_000;
        let mut xs = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        for _ in 0..n {
            xs.push(rng.sample::<f64, _>(StandardNormal));
            zs.push(vec![rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)]);
        }
        let fit = fit_gaussian_sampler(&xs, &zs).unwrap();
        assert!(fit.cond_coef.iter().all(|c| c.abs() < 0.05));
        assert!((fit.cond_std - 1.0).abs() < 0.05);
    }

    #[test]
    fn fitted_gaussian_rank_deficiency() {
        // n = d + 1 is below the precondition.
        let xs = vec![0.0, 1.0, 2.0];
        let zs = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(fit_gaussian_sampler(&xs, &zs).is_err());
    }

    #[test]
    fn logistic_no_signal() {
        let mut rng = RngStream::new(13, 0);
        let n = 4000;
        let mut xs = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        for i in 0..n {
            xs.push((i % 2) as f64);
            zs.push(vec![rng.sample::<f64, _>(StandardNormal)]);
        }
        let fit =
            fit_logistic_sampler(&xs, &zs, &default_logistic_penalty_grid(), 10, &mut rng).unwrap();
        assert!(fit.bias.abs() < 0.1, "bias {}", fit.bias);
        assert!(fit.weights[0].abs() < 0.1, "weight {}", fit.weights[0]);
    }

    #[test]
    fn logistic_separable_data_stays_bounded() {
        // Perfectly separable; the penalty must keep the weights finite.
        let xs: Vec<f64> = (0..100).map(|i| if i < 50 { 0.0 } else { 1.0 }).collect();
        let zs: Vec<Vec<f64>> = (0..100).map(|i| vec![if i < 50 { -1.0 } else { 1.0 }]).collect();
        let mut rng = RngStream::new(14, 0);
        let fit = fit_logistic_sampler(&xs, &zs, &[1.0], 5, &mut rng).unwrap();
        assert!(fit.weights[0].is_finite() && fit.weights[0].abs() < 50.0);
    }

    #[test]
    fn logistic_recovers_known_weights() {
        let w_true = [1.5, -0.8];
        let mut rng = RngStream::new(15, 0);
        let n = 100_000;
        let mut xs = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        for _ in 0..n {
            let z = vec![rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)];
            let p = sigmoid(dot(&w_true, &z));
            xs.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
            zs.push(z);
        }
        // Tiny penalty: the target check is recovery, not regularization.
        let fit = fit_logistic_sampler(&xs, &zs, &[1e-4], 10, &mut rng).unwrap();
        for (est, tru) in fit.weights.iter().zip(w_true) {
            assert!(
                (est - tru).abs() / tru.abs() < 0.1,
                "weight {est} vs {tru}"
            );
        }
    }

    #[test]
    fn logistic_degenerate_class() {
        let xs = vec![1.0; 10];
        let zs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let mut rng = RngStream::new(16, 0);
        let err = fit_logistic_sampler(&xs, &zs, &[1.0], 5, &mut rng).unwrap_err();
        assert!(matches!(err, Error::DegenerateClass));
    }
}
