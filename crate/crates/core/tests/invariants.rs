use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sira_core::data::{ingest_samples, read_atmospheric_csv, GeoLocation};
use sira_core::gp::fit_gp;
use sira_core::kernels::{gram, KernelSpec, NoiseModel};
use sira_core::raster::{read_ascii_grid, RasterGrid};
use sira_core::verify::{chi2_sf, haversine_km, perturb_location};

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn perturbation_lands_at_requested_distance(
        lat in -80.0f64..80.0, lon in -180.0f64..180.0, d in 1.0f64..5000.0, seed in any::<u64>(),
    ) {
        let x = GeoLocation::new(lat, lon).unwrap();
        let y = perturb_location(x, d, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((haversine_km(x, y) - d).abs() < 1e-6 * d.max(1.0));
    }

    #[test]
    fn chi2_survival_is_a_decreasing_probability(dof in 1usize..8, a in 0.0f64..40.0, b in 0.0f64..40.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (p_lo, p_hi) = (chi2_sf(lo, dof).unwrap(), chi2_sf(hi, dof).unwrap());
        prop_assert!((0.0..=1.0).contains(&p_lo) && (0.0..=1.0).contains(&p_hi));
        prop_assert!(p_hi <= p_lo + 1e-12);
    }

    #[test]
    fn gram_is_symmetric_with_prior_diagonal(
        pts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 2..12),
        sigma2 in 0.2f64..3.0, l0 in 0.3f64..3.0, l1 in 0.3f64..3.0,
    ) {
        let spec = KernelSpec::matern32(sigma2, vec![l0, l1]);
        let k = gram(&pts, &spec).unwrap();
        for i in 0..pts.len() {
            prop_assert!((k[(i, i)] - sigma2).abs() < 1e-6 * sigma2);
            for j in 0..pts.len() {
                prop_assert_eq!(k[(i, j)], k[(j, i)]);
                prop_assert!(k[(i, j)] <= k[(i, i)] + 1e-12);
            }
        }
    }

    #[test]
    fn posterior_variance_never_exceeds_prior(
        xs in prop::collection::vec(-5.0f64..5.0, 3..15), q in -8.0f64..8.0, noise in 1e-3f64..1.0,
    ) {
        let inputs: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let y: Vec<f64> = xs.iter().map(|x| x.sin()).collect();
        let spec = KernelSpec::rbf(1.3, vec![1.1]);
        let post = fit_gp(&inputs, &y, &vec![0.0; y.len()], &spec, &NoiseModel::new(vec![noise]).unwrap()).unwrap();
        let (_, var) = post.predict_point(&[q], 0.0).unwrap();
        prop_assert!(var >= -1e-9 && var <= 1.3 * (1.0 + 1e-6));
    }

    #[test]
    fn ascii_grid_round_trips(
        ncols in 1usize..6, nrows in 1usize..6, seed in any::<u64>(), cell in 0.1f64..2.0,
    ) {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..ncols * nrows).map(|_| (r.random_range(-50.0..50.0f64) * 100.0).round() / 100.0).collect();
        let grid = RasterGrid::new(ncols, nrows, 10.0, 40.0, cell, values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.asc");
        std::fs::write(&path, grid.to_ascii()).unwrap();
        let back = read_ascii_grid(&path).unwrap();
        prop_assert_eq!(back.to_ascii(), grid.to_ascii());
    }
}

#[test]
fn fixtures_ingest() {
    let series = read_atmospheric_csv(format!("{FIXTURES}/atmosphere.csv")).unwrap();
    assert_eq!(series.len(), 2);
    let samples = ingest_samples(format!("{FIXTURES}/samples.csv")).unwrap();
    assert_eq!(samples.len(), 5);
    let grid = read_ascii_grid(format!("{FIXTURES}/grid.asc")).unwrap();
    assert_eq!((grid.ncols, grid.nrows), (4, 3));
    assert_eq!(grid.values.iter().filter(|&&v| grid.is_nodata(v)).count(), 1);
}

#[test]
fn missing_file_error_names_path() {
    let err = ingest_samples("/nonexistent/samples.csv").unwrap_err().to_string();
    assert!(err.contains("/nonexistent/samples.csv"), "{err}");
}
