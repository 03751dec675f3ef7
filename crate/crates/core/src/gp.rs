//! Single-task exact Gaussian-process regression around a supplied mean.
//!
//! Targets enter as residuals `y - y'`, where `y'` is whatever mean function
//! the caller uses (a constant, or a boosted ensemble).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::{self, KernelSpec, NoiseModel};
use crate::linalg::{cholesky_jittered, symmetrize, Factor};
use crate::optim::{DescentConfig, DescentState};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Gaussian predictive distribution over a set of outputs.
///
/// `covariance` is the latent covariance; `noise` holds the observation noise
/// variance of each output.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub noise: DVector<f64>,
}

impl PredictiveDistribution {
    /// Latent marginal variances.
    pub fn variance(&self) -> DVector<f64> {
        self.covariance.diagonal()
    }

    /// Covariance of a new noisy observation.
    pub fn observation_covariance(&self) -> DMatrix<f64> {
        &self.covariance + DMatrix::from_diagonal(&self.noise)
    }
}

fn check_inputs(inputs: &[Vec<f64>], spec: &KernelSpec) -> Result<usize> {
    let dim = inputs.first().map(Vec::len).ok_or_else(|| Error::domain("no training inputs"))?;
    if let Some(p) = inputs.iter().find(|p| p.len() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            got: p.len(),
        });
    }
    spec.check_dim(dim)?;
    Ok(dim)
}

fn single_noise(noise: &NoiseModel) -> Result<f64> {
    match noise.variances() {
        [v] => Ok(*v),
        other => Err(Error::Dimension {
            expected: 1,
            got: other.len(),
        }),
    }
}

/// `K + noise * I` with the kernel's jitter, factorised.
pub(crate) fn factor_covariance(inputs: &[Vec<f64>], spec: &KernelSpec, noise: f64) -> Result<Factor> {
    let mut c = kernels::gram(inputs, spec)?;
    for i in 0..c.nrows() {
        c[(i, i)] += noise;
    }
    cholesky_jittered(&c, kernels::jitter(spec).max(1e-8 * noise))
}

/// Fitted GP: Cholesky factor of `K + Sigma` and weights `w = (K + Sigma)^{-1} (y - y')`.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    inputs: Vec<Vec<f64>>,
    kernel: KernelSpec,
    noise: f64,
    factor: Factor,
    weights: DVector<f64>,
}

/// Fits the GP on residuals `targets - offsets`.
pub fn fit_gp(
    inputs: &[Vec<f64>],
    targets: &[f64],
    offsets: &[f64],
    spec: &KernelSpec,
    noise: &NoiseModel,
) -> Result<GpPosterior> {
    if inputs.len() < 2 {
        return Err(Error::domain(format!("GP fit needs at least 2 samples, got {}", inputs.len())));
    }
    if targets.len() != inputs.len() || offsets.len() != inputs.len() {
        return Err(Error::Dimension {
            expected: inputs.len(),
            got: targets.len().min(offsets.len()),
        });
    }
    check_inputs(inputs, spec)?;
    spec.validate()?;
    let noise = single_noise(noise)?;
    let factor = factor_covariance(inputs, spec, noise)?;
    let r = DVector::from_iterator(targets.len(), targets.iter().zip(offsets).map(|(y, m)| y - m));
    let weights = factor.solve(&r);
    Ok(GpPosterior {
        inputs: inputs.to_vec(),
        kernel: spec.clone(),
        noise,
        factor,
        weights,
    })
}

impl GpPosterior {
    /// Rebuilds a posterior from stored parts without refactorising.
    pub fn from_parts(
        inputs: Vec<Vec<f64>>,
        kernel: KernelSpec,
        noise: f64,
        factor_l: DMatrix<f64>,
        extra_jitter: f64,
        weights: DVector<f64>,
    ) -> Result<Self> {
        let n = inputs.len();
        if factor_l.nrows() != n || factor_l.ncols() != n || weights.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: factor_l.nrows(),
            });
        }
        check_inputs(&inputs, &kernel)?;
        let chol = nalgebra::Cholesky::pack_dirty(factor_l);
        Ok(Self {
            inputs,
            kernel,
            noise,
            factor: Factor { chol, extra_jitter },
            weights,
        })
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn factor_l(&self) -> DMatrix<f64> {
        self.factor.l()
    }

    pub fn extra_jitter(&self) -> f64 {
        self.factor.extra_jitter
    }

    /// Joint prediction at `queries`; `offsets` is the mean function there.
    pub fn predict(&self, queries: &[Vec<f64>], offsets: &[f64]) -> Result<PredictiveDistribution> {
        if offsets.len() != queries.len() {
            return Err(Error::Dimension {
                expected: queries.len(),
                got: offsets.len(),
            });
        }
        let dim = self.inputs[0].len();
        if let Some(q) = queries.iter().find(|q| q.len() != dim) {
            return Err(Error::Dimension {
                expected: dim,
                got: q.len(),
            });
        }
        let k_qn = kernels::cross_covariance(queries, &self.inputs, &self.kernel)?;
        let mean = &k_qn * &self.weights + DVector::from_column_slice(offsets);
        let v = self.factor.forward(&k_qn.transpose());
        let mut cov = symmetrize(&(kernels::cross_covariance(queries, queries, &self.kernel)? - v.transpose() * &v));
        for i in 0..cov.nrows() {
            if cov[(i, i)] < 0.0 {
                cov[(i, i)] = 0.0;
            }
        }
        Ok(PredictiveDistribution {
            mean,
            covariance: cov,
            noise: DVector::from_element(queries.len(), self.noise),
        })
    }

    /// Mean and latent variance at a single query.
    pub fn predict_point(&self, query: &[f64], offset: f64) -> Result<(f64, f64)> {
        let p = self.predict(&[query.to_vec()], &[offset])?;
        Ok((p.mean[0], p.covariance[(0, 0)]))
    }

    /// GP correction `w^T k(q, X)` without the mean offset.
    pub fn correction(&self, query: &[f64]) -> f64 {
        self.inputs
            .iter()
            .zip(self.weights.iter())
            .map(|(x, w)| w * self.kernel.eval(query, x))
            .sum()
    }
}

/// `0.5 r^T C^{-1} r + 0.5 log|C| + n/2 log(2 pi)` with `C = K + Sigma`.
pub fn nll(inputs: &[Vec<f64>], residuals: &[f64], spec: &KernelSpec, noise: &NoiseModel) -> Result<f64> {
    check_inputs(inputs, spec)?;
    let noise = single_noise(noise)?;
    let factor = factor_covariance(inputs, spec, noise)?;
    let r = DVector::from_column_slice(residuals);
    let alpha = factor.solve(&r);
    Ok(0.5 * r.dot(&alpha) + 0.5 * factor.log_det() + 0.5 * residuals.len() as f64 * LN_2PI)
}

/// Split of the NLL into its data-fit and complexity parts.
pub fn nll_terms(inputs: &[Vec<f64>], residuals: &[f64], spec: &KernelSpec, noise: &NoiseModel) -> Result<(f64, f64)> {
    check_inputs(inputs, spec)?;
    let noise = single_noise(noise)?;
    let factor = factor_covariance(inputs, spec, noise)?;
    let r = DVector::from_column_slice(residuals);
    Ok((0.5 * r.dot(&factor.solve(&r)), 0.5 * factor.log_det()))
}

/// NLL and its gradient with respect to the kernel log-parameters followed by
/// the log noise variance.
pub fn nll_grad(
    inputs: &[Vec<f64>],
    residuals: &[f64],
    spec: &KernelSpec,
    noise: &NoiseModel,
) -> Result<(f64, Vec<f64>)> {
    check_inputs(inputs, spec)?;
    let noise = single_noise(noise)?;
    let factor = factor_covariance(inputs, spec, noise)?;
    let r = DVector::from_column_slice(residuals);
    let alpha = factor.solve(&r);
    let value = 0.5 * r.dot(&alpha) + 0.5 * factor.log_det() + 0.5 * residuals.len() as f64 * LN_2PI;
    // dNLL/dtheta = sum_ab W_ab dC_ab with W = (C^{-1} - alpha alpha^T) / 2
    let w = (factor.inverse() - &alpha * alpha.transpose()) * 0.5;
    let mut grad = kernels::gram_gradient_contract(inputs, spec, &w);
    grad.push(noise * w.trace());
    Ok((value, grad))
}

/// Hyperparameter vector layout: kernel log-parameters then log noise.
pub fn pack_params(spec: &KernelSpec, noise: &NoiseModel) -> Vec<f64> {
    let mut p = spec.log_params();
    p.extend(noise.log_params());
    p
}

pub fn unpack_params(template: &KernelSpec, p: &[f64]) -> Result<(KernelSpec, NoiseModel)> {
    let k = template.n_params();
    if p.len() != k + 1 {
        return Err(Error::Dimension {
            expected: k + 1,
            got: p.len(),
        });
    }
    let mut spec = template.clone();
    spec.set_log_params(&p[..k]);
    spec.validate()?;
    Ok((spec, NoiseModel::new(vec![p[k].exp()])?))
}

/// Objective closure over packed log-parameters.
pub fn objective<'a>(
    inputs: &'a [Vec<f64>],
    residuals: &'a [f64],
    template: &'a KernelSpec,
) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + 'a {
    move |p: &[f64]| {
        let (spec, noise) = unpack_params(template, p)?;
        nll_grad(inputs, residuals, &spec, &noise)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpTrainConfig {
    pub max_iters: usize,
    pub descent: DescentConfig,
}

impl Default for GpTrainConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            descent: DescentConfig::default(),
        }
    }
}

/// Outcome of hyperparameter optimisation.
#[derive(Debug, Clone)]
pub struct GpFit {
    pub kernel: KernelSpec,
    pub noise: NoiseModel,
    pub nll_trace: Vec<f64>,
    pub converged: bool,
}

/// Minimises the NLL over kernel and noise parameters.
pub fn optimize_hyperparameters(
    inputs: &[Vec<f64>],
    residuals: &[f64],
    spec: &KernelSpec,
    noise: &NoiseModel,
    cfg: &GpTrainConfig,
) -> Result<GpFit> {
    let mut f = objective(inputs, residuals, spec);
    let mut state = DescentState::new(pack_params(spec, noise), &mut f)?;
    state.run(&mut f, cfg.max_iters, &cfg.descent);
    let (kernel, noise) = unpack_params(spec, &state.params)?;
    if !state.converged {
        log::warn!("GP hyperparameter optimisation stopped after {} iterations without converging", cfg.max_iters);
    }
    Ok(GpFit {
        kernel,
        noise,
        nll_trace: state.trace,
        converged: state.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(seed: u64, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let y = x.iter().map(|p| p.iter().map(|v| v.sin()).sum::<f64>() + 0.1 * rng.random_range(-1.0..1.0)).collect();
        (x, y)
    }

    #[test]
    fn identity_solve() {
        let spec = KernelSpec::rbf(1.0, vec![1e-3]);
        let noise = NoiseModel::new(vec![1e-12]).unwrap();
        let post = fit_gp(&[vec![0.0], vec![10.0]], &[1.0, -1.0], &[0.0, 0.0], &spec, &noise).unwrap();
        assert!((post.weights()[0] - 1.0).abs() < 1e-6);
        assert!((post.weights()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_residuals_give_offsets() {
        let (x, _) = random_problem(1, 10, 2);
        let spec = KernelSpec::rbf(1.0, vec![1.0, 1.0]);
        let noise = NoiseModel::new(vec![0.01]).unwrap();
        let y = vec![3.0; 10];
        let post = fit_gp(&x, &y, &y, &spec, &noise).unwrap();
        assert!(post.weights().iter().all(|w| *w == 0.0));
        let (m, _) = post.predict_point(&[0.3, 0.1], 7.5).unwrap();
        assert_eq!(m, 7.5);
    }

    #[test]
    fn weights_solve_the_system() {
        let (x, y) = random_problem(2, 20, 3);
        let spec = KernelSpec::feature_mixture(1.3, 0.5, 0.5, vec![0.8, 1.2, 2.0]);
        let noise = NoiseModel::new(vec![0.05]).unwrap();
        let post = fit_gp(&x, &y, &vec![0.0; 20], &spec, &noise).unwrap();
        let mut c = kernels::gram(&x, &spec).unwrap();
        for i in 0..20 {
            c[(i, i)] += 0.05;
        }
        let resid = &c * post.weights() - DVector::from_column_slice(&y);
        assert!(resid.amax() < 1e-8);
    }

    #[test]
    fn nll_scalar() {
        let spec = KernelSpec::rbf(1.0 - 1e-8, vec![1.0]);
        let noise = NoiseModel::new(vec![1e-30]).unwrap();
        let v = nll(&[vec![0.0]], &[0.0], &spec, &noise).unwrap();
        assert!((v - 0.918_938_533_204_672_7).abs() < 1e-8);
    }

    #[test]
    fn nll_quadratic_scales_by_four() {
        let (x, y) = random_problem(3, 8, 2);
        let spec = KernelSpec::rbf(1.0, vec![1.0, 1.0]);
        let noise = NoiseModel::new(vec![0.1]).unwrap();
        let (q1, l1) = nll_terms(&x, &y, &spec, &noise).unwrap();
        let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let (q2, l2) = nll_terms(&x, &y2, &spec, &noise).unwrap();
        assert!((q2 - 4.0 * q1).abs() < 1e-10 * q2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (x, y) = random_problem(10 + seed, 10, 2);
            let spec = KernelSpec::feature_mixture(1.1, 0.4, 0.7, vec![0.9, 1.3]);
            let noise = NoiseModel::new(vec![0.2]).unwrap();
            let p0 = pack_params(&spec, &noise);
            let mut f = objective(&x, &y, &spec);
            let (_, g) = f(&p0).unwrap();
            for k in 0..p0.len() {
                let mut pp = p0.clone();
                pp[k] += 1e-5;
                let fp = f(&pp).unwrap().0;
                pp[k] -= 2e-5;
                let fm = f(&pp).unwrap().0;
                let fd = (fp - fm) / 2e-5;
                assert!((fd - g[k]).abs() / fd.abs().max(1e-6) < 1e-4, "param {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn constant_feature_has_zero_lengthscale_gradient() {
        let (mut x, y) = random_problem(4, 12, 2);
        for p in &mut x {
            p[1] = 5.0;
        }
        let spec = KernelSpec::rbf(1.0, vec![1.0, 1.0]);
        let noise = NoiseModel::new(vec![0.1]).unwrap();
        let (_, g) = nll_grad(&x, &y, &spec, &noise).unwrap();
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn optimisation_decreases_nll_and_noise_gradient_vanishes() {
        let (x, y) = random_problem(5, 40, 2);
        let spec = KernelSpec::rbf(1.0, vec![1.0, 1.0]);
        let noise = NoiseModel::new(vec![0.5]).unwrap();
        let cfg = GpTrainConfig {
            max_iters: 500,
            descent: DescentConfig {
                rel_tol: 1e-12,
                ..DescentConfig::default()
            },
        };
        let fit = optimize_hyperparameters(&x, &y, &spec, &noise, &cfg).unwrap();
        assert!(fit.nll_trace.windows(2).all(|w| w[1] <= w[0]));
        let (_, g) = nll_grad(&x, &y, &fit.kernel, &fit.noise).unwrap();
        assert!(g.last().unwrap().abs() < 1e-3, "{g:?}");
    }

    #[test]
    fn far_query_reverts_to_prior() {
        let (x, y) = random_problem(6, 15, 1);
        let spec = KernelSpec::rbf(2.0, vec![0.5]);
        let noise = NoiseModel::new(vec![0.01]).unwrap();
        let post = fit_gp(&x, &y, &vec![1.0; 15], &spec, &noise).unwrap();
        let (m, v) = post.predict_point(&[1e3], 1.0).unwrap();
        assert!((m - 1.0).abs() < 1e-12);
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn interpolates_with_tiny_noise() {
        let (x, y) = random_problem(7, 12, 2);
        let spec = KernelSpec::rbf(1.0, vec![0.7, 0.7]);
        let noise = NoiseModel::new(vec![1e-10]).unwrap();
        let post = fit_gp(&x, &y, &vec![0.0; 12], &spec, &noise).unwrap();
        let p = post.predict(&x, &vec![0.0; 12]).unwrap();
        for i in 0..12 {
            assert!((p.mean[i] - y[i]).abs() < 1e-6);
            assert!(p.covariance[(i, i)] < 1e-6);
        }
    }
}
