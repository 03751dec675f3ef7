use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{
    write_atmospheric_csv, write_samples, AggregationMode, Atmosphere, AtmosphericSeries, GeoLocation, IsotopeVector,
    Sample,
};
use crate::error::{Error, Result};
use crate::raster::Bounds;

const FOURIER_TERMS: usize = 64;

/// Parameters of a reproducible synthetic world.
///
/// Isotope links (z are the mean-aggregated informative features, u smooth
/// unit-variance spatial fields, e independent standard normals):
///
/// * d18O = -8 + 1.2 z1 - 0.8 z2 + 0.9 sin(1.5 z3) + 0.5 z4 z5 + s u1 + n0 e1
/// * d2H  = 10 + 8 (-8 + r h + r' g + s (r u1 + r' u2)) + n2 e2
/// * d13C = -26 + 0.4 z2 + n1 e3
/// * d34S = 6 + 0.8 z4 - 0.6 z5 + s u3 + n3 e4
///
/// where `h` is the non-constant part of the d18O link, `g = 0.8 z1 + 1.2 z2 +
/// 0.5 z3 z4 + 0.9 sin(1.5 z5)` is orthogonal to it for independent standard
/// normal z, `r` is the task correlation and `r' = sqrt(1 - r^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorldSpec {
    pub seed: u64,
    pub bounds: Bounds,
    pub grid_step: f64,
    pub first_year: i32,
    pub n_years: usize,
    pub n_informative: usize,
    pub n_noise: usize,
    pub n_samples: usize,
    pub task_correlation: f64,
    /// Standard deviation of the spatial residual in d18O units.
    pub spatial_std: f64,
    pub spatial_lengthscale: f64,
    pub field_lengthscale: f64,
    /// Observation noise standard deviation per isotope, canonical order.
    pub noise_std: [f64; 4],
    /// Probability that each isotope is missing from a sample.
    pub missing_fraction: [f64; 4],
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            bounds: Bounds {
                lat_min: 35.0,
                lat_max: 65.0,
                lon_min: 0.0,
                lon_max: 60.0,
            },
            grid_step: 1.0,
            first_year: 2001,
            n_years: 1,
            n_informative: 5,
            n_noise: 14,
            n_samples: 300,
            task_correlation: 0.9,
            spatial_std: 0.4,
            spatial_lengthscale: 3.0,
            field_lengthscale: 8.0,
            noise_std: [0.3, 1.5, 2.4, 0.8],
            missing_fraction: [0.0, 0.2, 0.5, 0.5],
        }
    }
}

impl SyntheticWorldSpec {
    fn validate(&self) -> Result<()> {
        let b = &self.bounds;
        Bounds::new(b.lat_min, b.lat_max, b.lon_min, b.lon_max)?;
        if !(self.grid_step > 0.0) || self.grid_step > (b.lat_max - b.lat_min).min(b.lon_max - b.lon_min) {
            return Err(Error::domain(format!("grid step {} does not fit the bounds", self.grid_step)));
        }
        if self.n_informative < 5 {
            return Err(Error::domain("synthetic links need at least 5 informative variables"));
        }
        if self.n_years == 0 || self.n_samples == 0 {
            return Err(Error::domain("synthetic world needs at least one year and one sample"));
        }
        if !(-1.0..=1.0).contains(&self.task_correlation) {
            return Err(Error::domain(format!("task correlation {} outside [-1, 1]", self.task_correlation)));
        }
        if self.noise_std.iter().any(|v| !(*v >= 0.0)) || self.missing_fraction.iter().any(|v| !(0.0..1.0).contains(v)) {
            return Err(Error::domain("noise must be non-negative and missing fractions in [0, 1)"));
        }
        if [self.spatial_lengthscale, self.field_lengthscale].iter().any(|v| !(*v > 0.0)) || !(self.spatial_std >= 0.0) {
            return Err(Error::domain("lengthscales must be positive and spatial std non-negative"));
        }
        Ok(())
    }

    /// Plain-text record of the generating parameters.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        let b = &self.bounds;
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "bounds {} {} {} {}", b.lat_min, b.lat_max, b.lon_min, b.lon_max);
        let _ = writeln!(out, "grid_step {}", self.grid_step);
        let _ = writeln!(out, "years {} {}", self.first_year, self.n_years);
        let _ = writeln!(out, "informative {}", self.n_informative);
        let _ = writeln!(out, "noise_features {}", self.n_noise);
        let _ = writeln!(out, "samples {}", self.n_samples);
        let _ = writeln!(out, "task_correlation {}", self.task_correlation);
        let _ = writeln!(out, "spatial_std {}", self.spatial_std);
        let _ = writeln!(out, "spatial_lengthscale {}", self.spatial_lengthscale);
        let _ = writeln!(out, "field_lengthscale {}", self.field_lengthscale);
        let _ = writeln!(out, "noise_std {:?}", self.noise_std);
        let _ = writeln!(out, "missing_fraction {:?}", self.missing_fraction);
        out
    }
}

/// Random-Fourier approximation of a unit-variance RBF field on (lat, lon).
#[derive(Debug, Clone)]
struct FourierField {
    omegas: Vec<[f64; 2]>,
    phases: Vec<f64>,
}

impl FourierField {
    fn sample(rng: &mut ChaCha8Rng, lengthscale: f64) -> Self {
        let omegas = (0..FOURIER_TERMS)
            .map(|_| {
                let a: f64 = StandardNormal.sample(rng);
                let b: f64 = StandardNormal.sample(rng);
                [a / lengthscale, b / lengthscale]
            })
            .collect();
        let phases = (0..FOURIER_TERMS).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        Self { omegas, phases }
    }

    fn eval(&self, lat: f64, lon: f64) -> f64 {
        let s: f64 = self
            .omegas
            .iter()
            .zip(&self.phases)
            .map(|(w, p)| (w[0] * lat + w[1] * lon + p).cos())
            .sum();
        s * (2.0 / FOURIER_TERMS as f64).sqrt()
    }
}

/// Generated samples and atmosphere plus everything needed to recompute the truth.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub spec: SyntheticWorldSpec,
    pub series: Vec<AtmosphericSeries>,
    pub atmosphere: Atmosphere,
    pub samples: Vec<Sample>,
    /// Noise-free isotope values at each sample, canonical order.
    pub truth: Vec<[f64; 4]>,
    /// Generated observation noise at each sample (before masking).
    pub noise: Vec<[f64; 4]>,
    spatial: [FourierField; 3],
}

pub fn variable_name(k: usize) -> String {
    format!("atm{:02}", k + 1)
}

impl SyntheticWorld {
    pub fn informative_features(&self) -> Vec<String> {
        (0..self.spec.n_informative).map(variable_name).collect()
    }

    /// Noise-free isotope values at a location given its mean-aggregated features.
    pub fn signal(&self, location: GeoLocation, features: &[f64]) -> [f64; 4] {
        let z = features;
        let (lat, lon) = (location.lat(), location.lon());
        let s = self.spec.spatial_std;
        let r = self.spec.task_correlation;
        let rp = (1.0 - r * r).max(0.0).sqrt();
        let u: Vec<f64> = self.spatial.iter().map(|f| f.eval(lat, lon)).collect();
        let h18 = 1.2 * z[0] - 0.8 * z[1] + 0.9 * (1.5 * z[2]).sin() + 0.5 * z[3] * z[4];
        let d18o = -8.0 + h18 + s * u[0];
        let g = 0.8 * z[0] + 1.2 * z[1] + 0.5 * z[2] * z[3] + 0.9 * (1.5 * z[4]).sin();
        let d2h = 10.0 + 8.0 * (-8.0 + r * h18 + rp * g + s * (r * u[0] + rp * u[1]));
        let d13c = -26.0 + 0.4 * z[1];
        let d34s = 6.0 + 0.8 * z[3] - 0.6 * z[4] + s * u[2];
        [d18o, d13c, d2h, d34s]
    }

    /// Spatial residual component of each isotope at a location (d13C has none).
    pub fn spatial_residual(&self, location: GeoLocation) -> [f64; 4] {
        let s = self.spec.spatial_std;
        let r = self.spec.task_correlation;
        let rp = (1.0 - r * r).max(0.0).sqrt();
        let u: Vec<f64> = self.spatial.iter().map(|f| f.eval(location.lat(), location.lon())).collect();
        [s * u[0], 0.0, 8.0 * s * (r * u[0] + rp * u[1]), s * u[2]]
    }

    /// Noise-free values at any covered location.
    pub fn truth_at(&self, location: GeoLocation) -> Result<[f64; 4]> {
        let f = self.atmosphere.aggregate_features(location, AggregationMode::Mean)?;
        Ok(self.signal(location, &f))
    }

    /// Writes `samples.csv`, `atmosphere.csv`, `truth.csv` and `world.txt`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_samples(dir.join("samples.csv"), &self.samples)?;
        write_atmospheric_csv(dir.join("atmosphere.csv"), &self.series)?;
        let mut truth = String::from("lat,lon,d18O,d13C,d2H,d34S\n");
        for (s, t) in self.samples.iter().zip(&self.truth) {
            let _ = writeln!(truth, "{},{},{},{},{},{}", s.location.lat(), s.location.lon(), t[0], t[1], t[2], t[3]);
        }
        let p = dir.join("truth.csv");
        std::fs::write(&p, truth).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("world.txt");
        std::fs::write(&p, self.spec.describe()).map_err(|e| Error::io(&p, e))
    }
}

/// Builds the world deterministically from `spec.seed`.
pub fn generate_world(spec: &SyntheticWorldSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let b = spec.bounds;
    let n_var = spec.n_informative + spec.n_noise;
    let fields: Vec<FourierField> = (0..n_var).map(|_| FourierField::sample(&mut rng, spec.field_lengthscale)).collect();
    let seasonal: Vec<(f64, f64)> = (0..n_var)
        .map(|_| (rng.random_range(0.2..1.0), rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let yearly: Vec<Vec<f64>> = (0..n_var)
        .map(|_| (0..spec.n_years).map(|_| 0.05 * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let spatial = [
        FourierField::sample(&mut rng, spec.spatial_lengthscale),
        FourierField::sample(&mut rng, spec.spatial_lengthscale),
        FourierField::sample(&mut rng, spec.spatial_lengthscale),
    ];

    let n_lat = ((b.lat_max - b.lat_min) / spec.grid_step).round() as usize;
    let n_lon = ((b.lon_max - b.lon_min) / spec.grid_step).round() as usize;
    let mut series = Vec::with_capacity(n_var);
    for v in 0..n_var {
        let mut s = AtmosphericSeries::new(variable_name(v)).with_units("1");
        for i in 0..n_lat {
            let lat = b.lat_min + (i as f64 + 0.5) * spec.grid_step;
            for j in 0..n_lon {
                let lon = b.lon_min + (j as f64 + 0.5) * spec.grid_step;
                let base = fields[v].eval(lat, lon);
                let loc = GeoLocation::new(lat, lon)?;
                for (y, dy) in yearly[v].iter().enumerate() {
                    for month in 1..=12u8 {
                        let phase = std::f64::consts::TAU * (month as f64 - 1.0) / 12.0;
                        let val = base + seasonal[v].0 * (phase + seasonal[v].1).sin() + dy;
                        s.insert(loc, spec.first_year + y as i32, month, Some(val))?;
                    }
                }
            }
        }
        series.push(s);
    }
    let atmosphere = Atmosphere::new(&series)?;

    let mut world = SyntheticWorld {
        spec: spec.clone(),
        series,
        atmosphere,
        samples: Vec::with_capacity(spec.n_samples),
        truth: Vec::with_capacity(spec.n_samples),
        noise: Vec::with_capacity(spec.n_samples),
        spatial,
    };
    let span_lat = (n_lat as f64) * spec.grid_step;
    let span_lon = (n_lon as f64) * spec.grid_step;
    for _ in 0..spec.n_samples {
        let lat = b.lat_min + rng.random_range(0.0..span_lat);
        let lon = b.lon_min + rng.random_range(0.0..span_lon);
        let loc = GeoLocation::new(lat, lon)?;
        let truth = world.truth_at(loc)?;
        let e: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = spec.noise_std;
        let noise = [n[0] * e[0], n[1] * e[2], n[2] * e[1], n[3] * e[3]];
        let mut values: [Option<f64>; 4] = std::array::from_fn(|k| Some(truth[k] + noise[k]));
        for (k, v) in values.iter_mut().enumerate() {
            if rng.random::<f64>() < spec.missing_fraction[k] {
                *v = None;
            }
        }
        if values.iter().all(Option::is_none) {
            values[0] = Some(truth[0] + noise[0]);
        }
        world.samples.push(Sample {
            location: loc,
            isotopes: IsotopeVector::new(values)?,
            features: Vec::new(),
        });
        world.truth.push(truth);
        world.noise.push(noise);
    }
    Ok(world)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticWorldSpec {
        SyntheticWorldSpec {
            bounds: Bounds::new(40.0, 50.0, 10.0, 25.0).unwrap(),
            n_samples: 40,
            ..SyntheticWorldSpec::default()
        }
    }

    #[test]
    fn zero_noise_equals_link() {
        let spec = SyntheticWorldSpec {
            noise_std: [0.0; 4],
            missing_fraction: [0.0; 4],
            ..small()
        };
        let w = generate_world(&spec).unwrap();
        for (s, t) in w.samples.iter().zip(&w.truth) {
            for (k, iso) in crate::data::Isotope::ALL.into_iter().enumerate() {
                assert_eq!(s.isotopes.get(iso), Some(t[k]));
            }
        }
    }

    #[test]
    fn degenerate_bounds_rejected() {
        let spec = SyntheticWorldSpec {
            bounds: Bounds {
                lat_min: 10.0,
                lat_max: 10.0,
                lon_min: 0.0,
                lon_max: 5.0,
            },
            ..small()
        };
        assert!(generate_world(&spec).is_err());
    }
}
