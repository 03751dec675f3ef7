use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::metrics::{r2, rmse};
use crate::boosting::{gpboost_train, gpr_train, train_boosting_only, GbConfig};
use crate::data::{Dataset, Isotope};
use crate::error::{Error, Result};
use crate::multitask::{fit_multitask, MtgConfig};

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// The five ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    BoostingOnly,
    GprOnly,
    BoostingGpr,
    MultivariateGp,
    MultitaskGp,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::BoostingOnly,
        ModelVariant::GprOnly,
        ModelVariant::BoostingGpr,
        ModelVariant::MultivariateGp,
        ModelVariant::MultitaskGp,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ModelVariant::BoostingOnly => "Boosting-only",
            ModelVariant::GprOnly => "GPR-only",
            ModelVariant::BoostingGpr => "Boosting+GPR",
            ModelVariant::MultivariateGp => "Multivariate GP",
            ModelVariant::MultitaskGp => "Multivariate+Multitask GP",
        }
    }

    fn key(self) -> &'static str {
        match self {
            ModelVariant::BoostingOnly => "boosting",
            ModelVariant::GprOnly => "gpr",
            ModelVariant::BoostingGpr => "gb",
            ModelVariant::MultivariateGp => "mvgp",
            ModelVariant::MultitaskGp => "mtg",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| Error::domain(format!("unknown model '{s}' (expected boosting, gpr, gb, mvgp or mtg)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub folds: usize,
    pub seed: u64,
    /// Isotopes to score; by default those with at least 10 observations.
    pub isotopes: Option<Vec<Isotope>>,
    pub gb: GbConfig,
    pub mtg: MtgConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            folds: DEFAULT_FOLDS,
            seed: 0,
            isotopes: None,
            gb: GbConfig::default(),
            mtg: MtgConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskMetric {
    pub isotope: Isotope,
    pub r2: f64,
    pub rmse: f64,
    /// Held-out predictions scored, summed over folds.
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub variant: ModelVariant,
    pub seed: u64,
    pub folds: usize,
    pub fold_hash: String,
    pub split: String,
    pub tasks: Vec<TaskMetric>,
}

impl MetricReport {
    pub fn task(&self, iso: Isotope) -> Option<&TaskMetric> {
        self.tasks.iter().find(|t| t.isotope == iso)
    }

    pub fn mean_r2(&self) -> f64 {
        self.tasks.iter().map(|t| t.r2).sum::<f64>() / self.tasks.len().max(1) as f64
    }
}

/// Shuffled partition of `0..n` into `k` test folds (each sorted).
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::domain(format!("k-fold needs k >= 2, got {k}")));
    }
    if n / k < 2 {
        return Err(Error::domain(format!("{n} samples give folds smaller than 2 for k = {k}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds: Vec<Vec<usize>> = (0..k)
        .map(|f| {
            let (lo, hi) = (f * n / k, (f + 1) * n / k);
            idx[lo..hi].to_vec()
        })
        .collect();
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Shuffled train/test split; returns `(train, test)` sorted.
pub fn train_test_split(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::domain(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let n_test = ((n as f64) * test_fraction).round() as usize;
    if n_test < 2 || n - n_test < 2 {
        return Err(Error::domain(format!("{n} samples are too few for a {test_fraction} split")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

/// FNV-1a over the fold contents.
pub fn fold_hash(folds: &[Vec<usize>]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (f, fold) in folds.iter().enumerate() {
        for v in std::iter::once(f).chain(fold.iter().copied()) {
            for b in (v as u64).to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    format!("{h:016x}")
}

fn complement(n: usize, test: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    for &i in test {
        mask[i] = false;
    }
    (0..n).filter(|&i| mask[i]).collect()
}

/// Held-out `(observed, predicted)` per isotope for one split.
pub fn split_predictions(
    dataset: &Dataset,
    train: &[usize],
    test: &[usize],
    variant: ModelVariant,
    isotopes: &[Isotope],
    cfg: &EvalConfig,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    assert!(
        train.iter().all(|i| test.binary_search(i).is_err()),
        "training and test index sets overlap"
    );
    let train_ds = dataset.subset(train);
    let test_ds = dataset.subset(test);
    let observed = |iso: Isotope| -> Vec<(usize, f64)> {
        test_ds
            .samples()
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.isotopes.get(iso).map(|v| (i, v)))
            .collect()
    };
    let joint = if variant == ModelVariant::MultitaskGp {
        let mtg = MtgConfig {
            tasks: Some(isotopes.to_vec()),
            ..cfg.mtg.clone()
        };
        Some(fit_multitask(&train_ds, &mtg)?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(isotopes.len());
    for (k, &iso) in isotopes.iter().enumerate() {
        let obs = observed(iso);
        let samples = test_ds.samples();
        let preds: Vec<f64> = match variant {
            ModelVariant::BoostingOnly => {
                let (x, y): (Vec<Vec<f64>>, Vec<f64>) = train_ds
                    .samples()
                    .iter()
                    .filter_map(|s| s.isotopes.get(iso).map(|v| (s.features.clone(), v)))
                    .unzip();
                let ens = train_boosting_only(&x, &y, &cfg.gb)?;
                obs.iter().map(|&(i, _)| ens.predict(&samples[i].features)).collect()
            }
            ModelVariant::GprOnly | ModelVariant::BoostingGpr => {
                let m = if variant == ModelVariant::GprOnly {
                    gpr_train(&train_ds, iso, &cfg.gb)?
                } else {
                    gpboost_train(&train_ds, iso, &cfg.gb)?
                };
                obs.iter()
                    .map(|&(i, _)| m.predict(samples[i].location, &samples[i].features).map(|p| p.mean[0]))
                    .collect::<Result<_>>()?
            }
            ModelVariant::MultivariateGp => {
                let mtg = MtgConfig {
                    tasks: Some(vec![iso]),
                    ..cfg.mtg.clone()
                };
                let m = fit_multitask(&train_ds, &mtg)?;
                obs.iter()
                    .map(|&(i, _)| m.predict(&samples[i].features).map(|p| p.mean[0]))
                    .collect::<Result<_>>()?
            }
            ModelVariant::MultitaskGp => {
                let m = joint.as_ref().expect("joint model fitted above");
                obs.iter()
                    .map(|&(i, _)| m.predict(&samples[i].features).map(|p| p.mean[k]))
                    .collect::<Result<_>>()?
            }
        };
        out.push((obs.into_iter().map(|o| o.1).collect(), preds));
    }
    Ok(out)
}

fn resolve_isotopes(dataset: &Dataset, cfg: &EvalConfig) -> Result<Vec<Isotope>> {
    let isotopes = match &cfg.isotopes {
        Some(v) => v.clone(),
        None => dataset.observed_isotopes(10),
    };
    if isotopes.is_empty() {
        return Err(Error::domain("no isotope has enough observations to evaluate"));
    }
    Ok(isotopes)
}

fn report_from_folds(
    variant: ModelVariant,
    cfg: &EvalConfig,
    folds: &[Vec<usize>],
    isotopes: &[Isotope],
    per_fold: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
) -> Result<MetricReport> {
    let mut tasks = Vec::with_capacity(isotopes.len());
    for (k, &iso) in isotopes.iter().enumerate() {
        let (mut sr2, mut srmse, mut used, mut n) = (0.0, 0.0, 0usize, 0usize);
        for fold in &per_fold {
            let (y, p) = &fold[k];
            if y.len() < 2 {
                continue;
            }
            sr2 += r2(y, p)?;
            srmse += rmse(y, p)?;
            used += 1;
            n += y.len();
        }
        if used == 0 {
            return Err(Error::domain(format!("no fold holds at least 2 test values of {iso}")));
        }
        tasks.push(TaskMetric {
            isotope: iso,
            r2: sr2 / used as f64,
            rmse: srmse / used as f64,
            n_test: n,
        });
    }
    Ok(MetricReport {
        variant,
        seed: cfg.seed,
        folds: folds.len(),
        fold_hash: fold_hash(folds),
        split: format!(
            "{}-fold cross-validation, shuffled with seed {}; fold count and shuffling are protocol assumptions",
            folds.len(),
            cfg.seed
        ),
        tasks,
    })
}

/// Mean held-out metrics over `cfg.folds` folds for one variant.
pub fn kfold_cv(dataset: &Dataset, variant: ModelVariant, cfg: &EvalConfig) -> Result<MetricReport> {
    let folds = kfold_indices(dataset.len(), cfg.folds, cfg.seed)?;
    let isotopes = resolve_isotopes(dataset, cfg)?;
    let per_fold = folds
        .par_iter()
        .map(|test| split_predictions(dataset, &complement(dataset.len(), test), test, variant, &isotopes, cfg))
        .collect::<Result<Vec<_>>>()?;
    report_from_folds(variant, cfg, &folds, &isotopes, per_fold)
}

/// Runs all five variants on identical folds.
pub fn ablation_suite(dataset: &Dataset, cfg: &EvalConfig) -> Result<Vec<MetricReport>> {
    ModelVariant::ALL
        .par_iter()
        .map(|&v| kfold_cv(dataset, v, cfg))
        .collect()
}

pub fn reports_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("model,isotope,r2,rmse,n_test,folds,seed,fold_hash\n");
    for r in reports {
        for t in &r.tasks {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.variant, t.isotope, t.r2, t.rmse, t.n_test, r.folds, r.seed, r.fold_hash
            );
        }
    }
    out
}

/// Human-readable table, one row per model.
pub fn reports_table(reports: &[MetricReport]) -> String {
    let mut out = String::new();
    if let Some(first) = reports.first() {
        let _ = writeln!(out, "# {}", first.split);
        let _ = writeln!(out, "# seed {}, fold hash {}", first.seed, first.fold_hash);
        let _ = write!(out, "{:<28}", "model");
        for t in &first.tasks {
            let _ = write!(out, " {:>9} {:>9}", format!("{} R2", t.isotope), "RMSE");
        }
        out.push('\n');
    }
    for r in reports {
        let _ = write!(out, "{:<28}", r.variant.label());
        for t in &r.tasks {
            let _ = write!(out, " {:>9.3} {:>9.3}", t.r2, t.rmse);
        }
        out.push('\n');
    }
    out
}
