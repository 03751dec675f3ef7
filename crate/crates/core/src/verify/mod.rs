//! Origin-claim testing: a chi-squared test of a measured isotope vector
//! against the multitask predictive distribution at the claimed origin, and
//! the false-claim experiment that displaces true origins by fixed distances.

mod chi2;
mod geo;

use std::fmt::{self, Write as _};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{AggregationMode, Atmosphere, GeoLocation, Isotope, IsotopeVector, Sample};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, symmetrize};
use crate::multitask::MultitaskModel;

pub use chi2::{chi2_sf, gamma_q, ln_gamma};
pub use geo::{destination, haversine_km, perturb_location, perturb_with_mode, PerturbationMode, EARTH_RADIUS_KM};

pub const DEFAULT_ALPHA: f64 = 0.05;
const LN_2PI: f64 = 1.837_877_066_409_345_3;
const MAX_BEARING_ATTEMPTS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Claim {
    pub id: String,
    pub measured: IsotopeVector,
    pub claimed_origin: GeoLocation,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Consistent,
    Rejected,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Consistent => "consistent",
            Decision::Rejected => "rejected",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationResult {
    /// Isotopes entering the test, in model task order.
    pub isotopes: Vec<Isotope>,
    pub mu_mod: DVector<f64>,
    /// Predictive covariance of an observation (latent plus noise).
    pub sigma_mod: DMatrix<f64>,
    pub chi2: f64,
    pub dof: usize,
    pub p_value: f64,
    pub decision: Decision,
    pub log_likelihood: f64,
}

/// Tests a measured vector against a Gaussian predictive `(mu, sigma)`.
pub fn test_against(
    isotopes: Vec<Isotope>,
    measured: &DVector<f64>,
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    alpha: f64,
) -> Result<VerificationResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain(format!("significance {alpha} outside (0, 1)")));
    }
    let dof = measured.len();
    if dof == 0 || mu.len() != dof || sigma.nrows() != dof {
        return Err(Error::Dimension {
            expected: dof,
            got: mu.len(),
        });
    }
    let sigma = symmetrize(&sigma);
    let factor = cholesky_jittered(&sigma, 1e-10 * sigma.diagonal().max().max(f64::MIN_POSITIVE))?;
    let r = measured - &mu;
    let chi2 = r.dot(&factor.solve(&r)).max(0.0);
    let p_value = chi2_sf(chi2, dof)?;
    Ok(VerificationResult {
        isotopes,
        log_likelihood: -0.5 * chi2 - 0.5 * factor.log_det() - 0.5 * dof as f64 * LN_2PI,
        mu_mod: mu,
        sigma_mod: sigma,
        chi2,
        dof,
        p_value,
        decision: if p_value < alpha {
            Decision::Rejected
        } else {
            Decision::Consistent
        },
    })
}

/// Verifies a measured vector given the feature vector of the claimed origin.
pub fn verify_features(
    model: &MultitaskModel,
    features: &[f64],
    measured: &IsotopeVector,
    alpha: f64,
) -> Result<VerificationResult> {
    let present: Vec<(usize, Isotope, f64)> = model
        .tasks
        .iter()
        .enumerate()
        .filter_map(|(k, &t)| measured.get(t).map(|v| (k, t, v)))
        .collect();
    if present.is_empty() {
        return Err(Error::domain("claim has no isotope value modelled by this model"));
    }
    let pred = model.predict(features)?;
    let cov = pred.observation_covariance();
    let idx: Vec<usize> = present.iter().map(|p| p.0).collect();
    let mu = DVector::from_iterator(idx.len(), idx.iter().map(|&k| pred.mean[k]));
    let sigma = DMatrix::from_fn(idx.len(), idx.len(), |a, b| cov[(idx[a], idx[b])]);
    let y = DVector::from_iterator(idx.len(), present.iter().map(|p| p.2));
    test_against(present.iter().map(|p| p.1).collect(), &y, mu, sigma, alpha)
}

/// Builds the claimed origin's features from the atmosphere and verifies.
pub fn verify(
    model: &MultitaskModel,
    atmosphere: &Atmosphere,
    mode: AggregationMode,
    claim: &Claim,
) -> Result<VerificationResult> {
    let features = atmosphere.features_for(claim.claimed_origin, mode, &model.schema)?;
    verify_features(model, &features, &claim.measured, claim.alpha)
}

/// Reads claims from `claim_id,lat,lon,d18O,d13C,d2H,d34S[,alpha]`. Empty
/// isotope cells are missing; an empty or absent alpha uses `default_alpha`.
pub fn read_claims(path: impl AsRef<Path>, default_alpha: f64) -> Result<Vec<Claim>> {
    const HEADER: [&str; 7] = ["claim_id", "lat", "lon", "d18O", "d13C", "d2H", "d34S"];
    let path = path.as_ref();
    let csv_err = |e: csv::Error| {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            kind => Error::parse(path, line, format!("{kind:?}")),
        }
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    let got: Vec<&str> = header.iter().collect();
    let has_alpha = got.len() == 8 && got[7] == "alpha";
    if got.len() < 7 || got[..7] != HEADER || (got.len() > 7 && !has_alpha) {
        return Err(Error::parse(path, 1, format!("expected header '{}[,alpha]'", HEADER.join(","))));
    }
    let mut claims = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != got.len() {
            return Err(Error::parse(path, line, format!("expected {} fields, found {}", got.len(), rec.len())));
        }
        let num = |col: usize| -> Result<Option<f64>> {
            let cell = &rec[col];
            if cell.is_empty() {
                return Ok(None);
            }
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Some)
                .ok_or_else(|| Error::parse(path, line, format!("column '{}': invalid number '{cell}'", got[col])))
        };
        let (lat, lon) = match (num(1)?, num(2)?) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::parse(path, line, "lat and lon are required")),
        };
        let claimed_origin = GeoLocation::new(lat, lon).map_err(|e| Error::parse(path, line, e.to_string()))?;
        let measured = IsotopeVector::new([num(3)?, num(4)?, num(5)?, num(6)?])
            .map_err(|e| Error::parse(path, line, e.to_string()))?;
        let alpha = if has_alpha { num(7)?.unwrap_or(default_alpha) } else { default_alpha };
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::parse(path, line, format!("column 'alpha': {alpha} outside (0, 1)")));
        }
        claims.push(Claim {
            id: rec[0].to_string(),
            measured,
            claimed_origin,
            alpha,
        });
    }
    Ok(claims)
}

/// CSV report with one row per claim.
pub fn report_csv(rows: &[(String, VerificationResult)]) -> String {
    let mut out = String::from("claim_id,chi2,dof,p_value,decision");
    for iso in Isotope::ALL {
        let _ = write!(out, ",mu_{iso},var_{iso}");
    }
    out.push('\n');
    for (id, r) in rows {
        let _ = write!(out, "{id},{:e},{},{:e},{}", r.chi2, r.dof, r.p_value, r.decision);
        for iso in Isotope::ALL {
            match r.isotopes.iter().position(|&t| t == iso) {
                Some(k) => {
                    let _ = write!(out, ",{:e},{:e}", r.mu_mod[k], r.sigma_mod[(k, k)]);
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationConfig {
    pub distances_km: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub alpha: f64,
    pub mode: PerturbationMode,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            distances_km: (1..=10).map(|k| 500.0 * k as f64).collect(),
            trials: 500,
            seed: 0,
            alpha: DEFAULT_ALPHA,
            mode: PerturbationMode::Fixed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub d_km: f64,
    /// Trials that produced a decision (skipped trials excluded).
    pub trials: usize,
    pub rejections: usize,
    pub accuracy: f64,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("d_km,trials,rejections,accuracy\n");
    for p in curve {
        let _ = writeln!(out, "{},{},{},{}", p.d_km, p.trials, p.rejections, p.accuracy);
    }
    out
}

/// Outcome of one false-claim trial: `None` when skipped.
fn run_trial(
    model: &MultitaskModel,
    atmosphere: &Atmosphere,
    agg: AggregationMode,
    samples: &[Sample],
    d: f64,
    cfg: &PerturbationConfig,
    stream: u64,
) -> Option<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let sample = &samples[rng.random_range(0..samples.len())];
    for _ in 0..MAX_BEARING_ATTEMPTS {
        let claimed = perturb_with_mode(sample.location, d, cfg.mode, &mut rng);
        if !atmosphere.covers(claimed) {
            continue;
        }
        let claim = Claim {
            id: String::new(),
            measured: sample.isotopes,
            claimed_origin: claimed,
            alpha: cfg.alpha,
        };
        return match verify(model, atmosphere, agg, &claim) {
            Ok(r) => Some(r.decision == Decision::Rejected),
            Err(e) => {
                log::debug!("trial {stream} skipped: {e}");
                None
            }
        };
    }
    log::debug!("trial {stream} skipped: no covered location after {MAX_BEARING_ATTEMPTS} bearings");
    None
}

/// Fraction of displaced claims rejected at each distance.
pub fn run_perturbation_experiment(
    model: &MultitaskModel,
    atmosphere: &Atmosphere,
    agg: AggregationMode,
    test_samples: &[Sample],
    cfg: &PerturbationConfig,
) -> Result<Vec<CurvePoint>> {
    if test_samples.is_empty() {
        return Err(Error::domain("no test samples"));
    }
    if cfg.trials == 0 {
        return Err(Error::domain("trials must be at least 1"));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::domain(format!("significance {} outside (0, 1)", cfg.alpha)));
    }
    let mut curve = Vec::with_capacity(cfg.distances_km.len());
    for (k, &d) in cfg.distances_km.iter().enumerate() {
        if !(d >= 0.0) || !d.is_finite() {
            return Err(Error::domain(format!("distance {d} km is not a non-negative number")));
        }
        let outcomes: Vec<Option<bool>> = (0..cfg.trials)
            .into_par_iter()
            .map(|t| run_trial(model, atmosphere, agg, test_samples, d, cfg, (k * cfg.trials + t) as u64))
            .collect();
        let done = outcomes.iter().flatten().count();
        let rejections = outcomes.iter().flatten().filter(|&&r| r).count();
        if done < cfg.trials {
            log::warn!("{} of {} trials at {d} km were skipped", cfg.trials - done, cfg.trials);
        }
        curve.push(CurvePoint {
            d_km: d,
            trials: done,
            rejections,
            accuracy: if done == 0 { 0.0 } else { rejections as f64 / done as f64 },
        });
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iso() -> Vec<Isotope> {
        vec![Isotope::D18O, Isotope::D2H]
    }

    #[test]
    fn exact_match_is_consistent() {
        let mu = DVector::from_vec(vec![-5.0, -40.0]);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 4.0]);
        let r = test_against(iso(), &mu.clone(), mu, s, 0.05).unwrap();
        assert_eq!(r.chi2, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.decision, Decision::Consistent);
    }

    #[test]
    fn one_dimensional_threshold() {
        let r = test_against(
            vec![Isotope::D18O],
            &DVector::from_vec(vec![1.96 * 2.0]),
            DVector::from_vec(vec![0.0]),
            DMatrix::from_element(1, 1, 4.0),
            0.05,
        )
        .unwrap();
        assert!((r.chi2 - 3.8416).abs() < 1e-12);
        assert!((r.p_value - 0.05).abs() < 1e-4);
        let ll = -0.5 * 3.8416 - 0.5 * 4f64.ln() - 0.5 * LN_2PI;
        assert!((r.log_likelihood - ll).abs() < 1e-12);
    }

    #[test]
    fn inflating_covariance_never_lowers_p() {
        let y = DVector::from_vec(vec![1.0, -2.0]);
        let mu = DVector::from_vec(vec![0.0, 0.0]);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let mut last = 0.0;
        for c in [1.0, 1.5, 2.0, 5.0] {
            let p = test_against(iso(), &y, mu.clone(), &s * c, 0.05).unwrap().p_value;
            assert!(p >= last);
            last = p;
        }
    }

    #[test]
    fn bad_alpha_rejected() {
        let mu = DVector::from_vec(vec![0.0]);
        assert!(test_against(vec![Isotope::D18O], &mu, mu.clone(), DMatrix::identity(1, 1), 1.0).is_err());
    }

    #[test]
    fn csv_has_fixed_columns() {
        let mu = DVector::from_vec(vec![0.0, 0.0]);
        let r = test_against(iso(), &mu, mu.clone(), DMatrix::identity(2, 2), 0.05).unwrap();
        let csv = report_csv(&[("c1".into(), r)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
        assert!(lines[1].starts_with("c1,0e0,2,1e0,consistent"));
    }
}
