use nalgebra::DVector;

use super::tree::{fit_tree, RegressionTree};
use crate::data::{Dataset, FeatureSchema, GeoLocation, Isotope};
use crate::error::{Error, Result};
use crate::gp::{self, GpPosterior, PredictiveDistribution};
use crate::kernels::{KernelSpec, NoiseModel};
use crate::optim::{DescentConfig, DescentState};

pub const MIN_TRAINING_SAMPLES: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct GbConfig {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Covariance descent iterations per boosting round.
    pub inner_iters: usize,
    /// Covariance descent iterations after the last round.
    pub final_iters: usize,
    /// Step halvings tried before a round's tree is skipped.
    pub max_halvings: usize,
    pub optimize_covariance: bool,
    /// Initial spatial kernel; derived from the data when absent.
    pub kernel: Option<KernelSpec>,
    /// Initial noise variance; derived from the data when absent.
    pub noise: Option<f64>,
    pub descent: DescentConfig,
}

impl Default for GbConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            learning_rate: 0.03,
            max_depth: 5,
            min_leaf: 5,
            inner_iters: 10,
            final_iters: 500,
            max_halvings: 10,
            optimize_covariance: true,
            kernel: None,
            noise: None,
            descent: DescentConfig::default(),
        }
    }
}

impl GbConfig {
    /// Total covariance iterations a GP-only fit needs to match this schedule.
    pub fn total_covariance_iters(&self) -> usize {
        self.n_trees * self.inner_iters + self.final_iters
    }
}

/// `F(x) = f0 + sum_t weight_t * tree_t(x)`; every weight is the learning
/// rate unless the round's step had to be halved.
#[derive(Debug, Clone, PartialEq)]
pub struct BoostedEnsemble {
    pub f0: f64,
    pub learning_rate: f64,
    pub trees: Vec<(RegressionTree, f64)>,
}

impl BoostedEnsemble {
    pub fn constant(f0: f64, learning_rate: f64) -> Self {
        Self {
            f0,
            learning_rate,
            trees: Vec::new(),
        }
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        self.f0 + self.trees.iter().map(|(t, w)| w * t.predict(features)).sum::<f64>()
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}

/// Result of the alternating optimisation on raw arrays.
#[derive(Debug, Clone)]
pub struct GbFit {
    pub ensemble: BoostedEnsemble,
    pub posterior: GpPosterior,
    /// NLL after every accepted covariance step or ensemble update.
    pub nll_trace: Vec<f64>,
    pub converged: bool,
}

/// Trained GB model: tree ensemble on atmospheric features as the mean of a
/// spatial GP on coordinates.
#[derive(Debug, Clone)]
pub struct GbModel {
    pub isotope: Isotope,
    pub schema: FeatureSchema,
    pub ensemble: BoostedEnsemble,
    pub posterior: GpPosterior,
    pub nll_trace: Vec<f64>,
    pub converged: bool,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

/// Data-derived starting kernel for the spatial GP.
pub fn initial_kernel(locations: &[Vec<f64>], residual_var: f64) -> KernelSpec {
    let lat: Vec<f64> = locations.iter().map(|p| p[0]).collect();
    let lon: Vec<f64> = locations.iter().map(|p| p[1]).collect();
    let spread = (0.5 * (variance(&lat) + variance(&lon))).sqrt().max(0.1);
    KernelSpec::spatial(residual_var / 6.0, spread, 1.0, 360.0)
}

fn initial_hyper(locations: &[Vec<f64>], y: &[f64], cfg: &GbConfig) -> Result<(KernelSpec, NoiseModel)> {
    let v = variance(y);
    let v = if v > 0.0 { v } else { 1.0 };
    let kernel = cfg.kernel.clone().unwrap_or_else(|| initial_kernel(locations, v));
    kernel.validate()?;
    if locations.iter().any(|p| p.len() != 2) {
        return Err(Error::Dimension {
            expected: 2,
            got: locations.iter().map(Vec::len).find(|&l| l != 2).unwrap_or(0),
        });
    }
    let noise = NoiseModel::new(vec![cfg.noise.unwrap_or(0.5 * v)])?;
    Ok((kernel, noise))
}

fn check_arrays(locations: &[Vec<f64>], features: &[Vec<f64>], y: &[f64]) -> Result<()> {
    if locations.len() != y.len() || features.len() != y.len() {
        return Err(Error::Dimension {
            expected: y.len(),
            got: locations.len().min(features.len()),
        });
    }
    if y.len() < MIN_TRAINING_SAMPLES {
        return Err(Error::domain(format!(
            "boosted training needs at least {MIN_TRAINING_SAMPLES} samples, got {}",
            y.len()
        )));
    }
    Ok(())
}

fn residuals(y: &[f64], f: &[f64]) -> Vec<f64> {
    y.iter().zip(f).map(|(a, b)| a - b).collect()
}

/// Alternating optimisation: per round, covariance descent at fixed mean,
/// then one Newton tree on the NLL's derivatives with respect to the mean.
pub fn train_arrays(locations: &[Vec<f64>], features: &[Vec<f64>], y: &[f64], cfg: &GbConfig) -> Result<GbFit> {
    check_arrays(locations, features, y)?;
    let f0 = mean(y);
    let (kernel0, noise0) = initial_hyper(locations, y, cfg)?;
    let mut f = vec![f0; y.len()];
    let mut ensemble = BoostedEnsemble::constant(f0, cfg.learning_rate);

    let r = residuals(y, &f);
    let mut state = DescentState::new(gp::pack_params(&kernel0, &noise0), &mut gp::objective(locations, &r, &kernel0))?;
    let nll0 = state.value;
    let limit = nll0 + 10.0 * nll0.abs();

    for round in 0..cfg.n_trees {
        let r = residuals(y, &f);
        if cfg.optimize_covariance {
            state.run(&mut gp::objective(locations, &r, &kernel0), cfg.inner_iters, &cfg.descent);
        }
        let (kernel, noise) = gp::unpack_params(&kernel0, &state.params)?;
        let factor = gp::factor_covariance(locations, &kernel, noise.variances()[0])?;
        let rv = DVector::from_column_slice(&r);
        let alpha = factor.solve(&rv);
        let quad0 = rv.dot(&alpha);
        let cinv_diag = factor.inverse().diagonal();
        // derivatives of the NLL in F: g = -C^{-1} r, h = diag(C^{-1}), rescaled by mean(h)
        let scale = cinv_diag.mean();
        let g: Vec<f64> = alpha.iter().map(|a| -a / scale).collect();
        let h: Vec<f64> = cinv_diag.iter().map(|d| d / scale).collect();
        let tree = fit_tree(features, &g, &h, cfg.max_depth, cfg.min_leaf)?;
        let step: Vec<f64> = features.iter().map(|x| tree.predict(x)).collect();

        let mut nu = cfg.learning_rate;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let cand: Vec<f64> = f.iter().zip(&step).map(|(a, s)| a + nu * s).collect();
            let rc = DVector::from_column_slice(&residuals(y, &cand));
            if rc.dot(&factor.solve(&rc)) <= quad0 {
                accepted = Some(cand);
                break;
            }
            nu *= 0.5;
        }
        match accepted {
            Some(cand) if cand != f => {
                f = cand;
                ensemble.trees.push((tree, nu));
                let r = residuals(y, &f);
                state.reset(&mut gp::objective(locations, &r, &kernel0))?;
            }
            Some(_) => {}
            None => log::debug!("round {round}: no step size decreased the data-fit term; tree skipped"),
        }
        if state.value > limit || !state.value.is_finite() {
            return Err(Error::Divergence(format!(
                "NLL {} after round {round} exceeds initial {nll0} by more than 10x",
                state.value
            )));
        }
    }

    if cfg.optimize_covariance {
        let r = residuals(y, &f);
        state.run(&mut gp::objective(locations, &r, &kernel0), cfg.final_iters, &cfg.descent);
    }
    let (kernel, noise) = gp::unpack_params(&kernel0, &state.params)?;
    let posterior = gp::fit_gp(locations, y, &f, &kernel, &noise)?;
    Ok(GbFit {
        ensemble,
        posterior,
        nll_trace: state.trace,
        converged: state.converged || !cfg.optimize_covariance,
    })
}

/// GP on a constant mean with the same initialisation and iteration budget as
/// [`train_arrays`]; the GP-only ablation.
pub fn train_gpr_arrays(locations: &[Vec<f64>], y: &[f64], cfg: &GbConfig) -> Result<GbFit> {
    let dummy: Vec<Vec<f64>> = vec![Vec::new(); y.len()];
    check_arrays(locations, &dummy, y)?;
    let f0 = mean(y);
    let (kernel0, noise0) = initial_hyper(locations, y, cfg)?;
    let f = vec![f0; y.len()];
    let r = residuals(y, &f);
    let mut obj = gp::objective(locations, &r, &kernel0);
    let mut state = DescentState::new(gp::pack_params(&kernel0, &noise0), &mut obj)?;
    if cfg.optimize_covariance {
        state.run(&mut obj, cfg.total_covariance_iters(), &cfg.descent);
    }
    let (kernel, noise) = gp::unpack_params(&kernel0, &state.params)?;
    let posterior = gp::fit_gp(locations, y, &f, &kernel, &noise)?;
    Ok(GbFit {
        ensemble: BoostedEnsemble::constant(f0, cfg.learning_rate),
        posterior,
        nll_trace: state.trace,
        converged: state.converged || !cfg.optimize_covariance,
    })
}

/// Plain squared-error boosting with the same tree settings; the
/// boosting-only ablation.
pub fn train_boosting_only(features: &[Vec<f64>], y: &[f64], cfg: &GbConfig) -> Result<BoostedEnsemble> {
    if features.len() != y.len() || y.is_empty() {
        return Err(Error::Dimension {
            expected: y.len(),
            got: features.len(),
        });
    }
    let f0 = mean(y);
    let mut f = vec![f0; y.len()];
    let mut ensemble = BoostedEnsemble::constant(f0, cfg.learning_rate);
    let ones = vec![1.0; y.len()];
    for _ in 0..cfg.n_trees {
        let g: Vec<f64> = f.iter().zip(y).map(|(a, b)| a - b).collect();
        let tree = fit_tree(features, &g, &ones, cfg.max_depth, cfg.min_leaf)?;
        for (fi, x) in f.iter_mut().zip(features) {
            *fi += cfg.learning_rate * tree.predict(x);
        }
        ensemble.trees.push((tree, cfg.learning_rate));
    }
    Ok(ensemble)
}

fn training_arrays(dataset: &Dataset, isotope: Isotope) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let mut locs = Vec::new();
    let mut feats = Vec::new();
    let mut y = Vec::new();
    for s in dataset.samples() {
        if let Some(v) = s.isotopes.get(isotope) {
            locs.push(s.location.to_input());
            feats.push(s.features.clone());
            y.push(v);
        }
    }
    (locs, feats, y)
}

/// Trains a GB model for one isotope; samples missing that isotope are skipped.
pub fn gpboost_train(dataset: &Dataset, isotope: Isotope, cfg: &GbConfig) -> Result<GbModel> {
    let (locs, feats, y) = training_arrays(dataset, isotope);
    let fit = train_arrays(&locs, &feats, &y, cfg)?;
    Ok(GbModel {
        isotope,
        schema: dataset.schema().clone(),
        ensemble: fit.ensemble,
        posterior: fit.posterior,
        nll_trace: fit.nll_trace,
        converged: fit.converged,
    })
}

/// GP-only ablation packaged as a GB model with an empty ensemble.
pub fn gpr_train(dataset: &Dataset, isotope: Isotope, cfg: &GbConfig) -> Result<GbModel> {
    let (locs, _, y) = training_arrays(dataset, isotope);
    let fit = train_gpr_arrays(&locs, &y, cfg)?;
    Ok(GbModel {
        isotope,
        schema: dataset.schema().clone(),
        ensemble: fit.ensemble,
        posterior: fit.posterior,
        nll_trace: fit.nll_trace,
        converged: fit.converged,
    })
}

impl GbModel {
    /// Ensemble mean plus GP correction and latent variance at one location.
    pub fn predict(&self, location: GeoLocation, features: &[f64]) -> Result<PredictiveDistribution> {
        self.predict_many(&[location], &[features.to_vec()])
    }

    pub fn predict_many(&self, locations: &[GeoLocation], features: &[Vec<f64>]) -> Result<PredictiveDistribution> {
        if let Some(f) = features.iter().find(|f| f.len() != self.schema.dim()) {
            return Err(Error::Schema(format!(
                "query has {} features, model expects {}",
                f.len(),
                self.schema.dim()
            )));
        }
        let queries: Vec<Vec<f64>> = locations.iter().map(GeoLocation::to_input).collect();
        let offsets: Vec<f64> = features.iter().map(|f| self.ensemble.predict(f)).collect();
        self.posterior.predict(&queries, &offsets)
    }
}
