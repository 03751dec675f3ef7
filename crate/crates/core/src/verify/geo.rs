use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::GeoLocation;

pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Great-circle distance in km on the mean-radius sphere.
pub fn haversine_km(a: GeoLocation, b: GeoLocation) -> f64 {
    let (p1, p2) = (a.lat().to_radians(), b.lat().to_radians());
    let dp = p2 - p1;
    let dl = (b.lon() - a.lon()).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Point reached from `start` after `distance_km` along initial bearing
/// `bearing` (radians clockwise from north).
pub fn destination(start: GeoLocation, distance_km: f64, bearing: f64) -> GeoLocation {
    let delta = distance_km / EARTH_RADIUS_KM;
    let p1 = start.lat().to_radians();
    let l1 = start.lon().to_radians();
    let sin_p2 = (p1.sin() * delta.cos() + p1.cos() * delta.sin() * bearing.cos()).clamp(-1.0, 1.0);
    let p2 = sin_p2.asin();
    let l2 = l1 + (bearing.sin() * delta.sin() * p1.cos()).atan2(delta.cos() - p1.sin() * sin_p2);
    GeoLocation::wrapped(p2.to_degrees(), l2.to_degrees())
}

/// How a claimed origin is displaced from the true one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PerturbationMode {
    /// Exactly `d` km along a uniform random bearing.
    #[default]
    Fixed,
    /// Isotropic Gaussian displacement whose mean length is `d` km.
    Gaussian,
}

impl std::str::FromStr for PerturbationMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "fixed" => Ok(PerturbationMode::Fixed),
            "gaussian" => Ok(PerturbationMode::Gaussian),
            other => Err(crate::error::Error::domain(format!(
                "unknown perturbation mode '{other}' (expected fixed or gaussian)"
            ))),
        }
    }
}

/// Displaces `x` by `d` km in a uniformly random direction.
pub fn perturb_location<R: Rng + ?Sized>(x: GeoLocation, d: f64, rng: &mut R) -> GeoLocation {
    perturb_with_mode(x, d, PerturbationMode::Fixed, rng)
}

pub fn perturb_with_mode<R: Rng + ?Sized>(x: GeoLocation, d: f64, mode: PerturbationMode, rng: &mut R) -> GeoLocation {
    let bearing = rng.random_range(0.0..std::f64::consts::TAU);
    let dist = match mode {
        PerturbationMode::Fixed => d,
        PerturbationMode::Gaussian => {
            // Rayleigh length with mean d.
            let s = d * (2.0 / std::f64::consts::PI).sqrt();
            let n = Normal::new(0.0, s.max(f64::MIN_POSITIVE)).expect("finite scale");
            n.sample(rng).hypot(n.sample(rng))
        }
    };
    if dist == 0.0 {
        return x;
    }
    destination(x, dist, bearing)
}
