//! Domain types, sample and atmospheric ingestion, temporal aggregation and
//! feature selection.

mod atmosphere;
mod samples;
mod selection;

pub use atmosphere::{
    drop_sparse_variables, read_atmospheric_csv, write_atmospheric_csv, AggregationMode,
    Atmosphere, AtmosphericSeries, DEFAULT_DROP_THRESHOLD,
};
pub use samples::{ingest_samples, read_dataset, write_dataset, write_samples};
pub use selection::{select_features, spearman, DEFAULT_SELECT_K};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A point on the globe in degrees.
///
/// Longitude is stored in `[-180, 180)`; an input of exactly `180` maps to `-180`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoLocation {
    lat: f64,
    lon: f64,
}

impl GeoLocation {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::domain(format!("latitude {lat} outside [-90, 90]")));
        }
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::domain(format!("longitude {lon} outside [-180, 180]")));
        }
        let lon = if lon == 180.0 { -180.0 } else { lon };
        Ok(Self { lat, lon })
    }

    /// Builds a location from arbitrary finite coordinates, clamping latitude
    /// and wrapping longitude into `[-180, 180)`.
    pub fn wrapped(lat: f64, lon: f64) -> Self {
        let lat = lat.clamp(-90.0, 90.0);
        let mut lon = (lon + 180.0).rem_euclid(360.0) - 180.0;
        if lon >= 180.0 {
            lon -= 360.0;
        }
        Self { lat, lon }
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// Coordinates as a `[lat, lon]` input vector for the spatial kernel.
    pub fn to_input(&self) -> Vec<f64> {
        vec![self.lat, self.lon]
    }
}

/// The four stable isotope ratios, in the column order of the sample CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Isotope {
    D18O,
    D13C,
    D2H,
    D34S,
}

impl Isotope {
    pub const ALL: [Isotope; 4] = [Isotope::D18O, Isotope::D13C, Isotope::D2H, Isotope::D34S];

    pub fn name(self) -> &'static str {
        match self {
            Isotope::D18O => "d18O",
            Isotope::D13C => "d13C",
            Isotope::D2H => "d2H",
            Isotope::D34S => "d34S",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Isotope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Isotope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Isotope::ALL
            .into_iter()
            .find(|iso| iso.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::domain(format!("unknown isotope '{s}'")))
    }
}

/// Per-mil delta values for the four isotopes; any of them may be missing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsotopeVector {
    values: [Option<f64>; 4],
}

impl IsotopeVector {
    pub fn new(values: [Option<f64>; 4]) -> Result<Self> {
        if values.iter().all(Option::is_none) {
            return Err(Error::domain("isotope vector has no values"));
        }
        if let Some(v) = values.iter().flatten().find(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite isotope value {v}")));
        }
        Ok(Self { values })
    }

    pub fn get(&self, isotope: Isotope) -> Option<f64> {
        self.values[isotope.index()]
    }

    pub fn values(&self) -> &[Option<f64>; 4] {
        &self.values
    }

    /// Present isotopes in canonical order.
    pub fn present(&self) -> impl Iterator<Item = (Isotope, f64)> + '_ {
        Isotope::ALL
            .into_iter()
            .filter_map(|iso| self.get(iso).map(|v| (iso, v)))
    }

    /// Number of present values (the task count of this vector).
    pub fn count(&self) -> usize {
        self.values.iter().flatten().count()
    }
}

/// Ordered feature names shared by every sample of a dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeatureSchema {
    names: Vec<String>,
}

impl FeatureSchema {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for name in &names {
            if name.is_empty() || !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("empty or duplicate feature name '{name}'")));
            }
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn project(&self, indices: &[usize]) -> FeatureSchema {
        FeatureSchema {
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
        }
    }

    /// Plain-text manifest: one feature name per line, in model order.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for name in &self.names {
            out.push_str(name);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub location: GeoLocation,
    pub isotopes: IsotopeVector,
    pub features: Vec<f64>,
}

/// Samples together with the schema their feature vectors follow.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: FeatureSchema,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(schema: FeatureSchema, samples: Vec<Sample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != schema.dim() {
                return Err(Error::Schema(format!(
                    "sample {i} has {} features, schema has {}",
                    s.features.len(),
                    schema.dim()
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("sample {i} has missing feature values")));
            }
        }
        Ok(Self { schema, samples })
    }

    /// Attaches features built from the atmosphere to raw samples.
    pub fn from_atmosphere(
        samples: &[Sample],
        atmosphere: &Atmosphere,
        mode: AggregationMode,
    ) -> Result<Self> {
        let schema = atmosphere.schema(mode);
        let samples = samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    location: s.location,
                    isotopes: s.isotopes,
                    features: atmosphere.aggregate_features(s.location, mode)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(schema, samples)
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Keeps only the given feature columns, in the given order.
    pub fn project(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.schema.dim()) {
            return Err(Error::Dimension {
                expected: self.schema.dim(),
                got: bad + 1,
            });
        }
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                location: s.location,
                isotopes: s.isotopes,
                features: indices.iter().map(|&i| s.features[i]).collect(),
            })
            .collect();
        Ok(Dataset {
            schema: self.schema.project(indices),
            samples,
        })
    }

    /// Subset of samples by index, preserving the schema.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Isotopes with at least `min_count` observed values.
    pub fn observed_isotopes(&self, min_count: usize) -> Vec<Isotope> {
        Isotope::ALL
            .into_iter()
            .filter(|&iso| {
                self.samples.iter().filter(|s| s.isotopes.get(iso).is_some()).count() >= min_count
            })
            .collect()
    }
}

/// Per-mil deviation of a sample isotope ratio from a reference standard.
pub fn delta_notation(ratio_sample: f64, ratio_standard: f64) -> Result<f64> {
    if !(ratio_standard > 0.0) || !ratio_standard.is_finite() {
        return Err(Error::domain(format!(
            "standard ratio must be positive, got {ratio_standard}"
        )));
    }
    if !ratio_sample.is_finite() {
        return Err(Error::domain(format!("sample ratio {ratio_sample} is not finite")));
    }
    Ok((ratio_sample / ratio_standard - 1.0) * 1000.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_of_standard_is_zero() {
        assert_eq!(delta_notation(0.0020052, 0.0020052).unwrap(), 0.0);
    }

    #[test]
    fn delta_small_depletion() {
        let standard = 0.0020052 * 1.001;
        let d = delta_notation(0.0020052, standard).unwrap();
        // (1/1.001 - 1) * 1000
        let expected = (1.0 / 1.001 - 1.0) * 1000.0;
        assert!((d - expected).abs() < 1e-12);
        assert!((d + 0.999).abs() < 1e-3);
    }

    #[test]
    fn delta_doubled_ratio() {
        let r = 0.011237;
        assert!((delta_notation(2.0 * r, r).unwrap() - 1000.0).abs() < 1e-12);
    }

    #[test]
    fn delta_rejects_non_positive_standard() {
        assert!(matches!(delta_notation(1.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(delta_notation(1.0, -2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn delta_is_scale_free() {
        for s in [1e-4, 0.0112, 3.0, 250.0] {
            let d = delta_notation(1.0123 * s, s).unwrap();
            assert!((d - 12.3).abs() < 1e-9, "{d}");
        }
    }

    #[test]
    fn location_bounds() {
        assert!(GeoLocation::new(91.0, 0.0).is_err());
        assert!(GeoLocation::new(-90.5, 0.0).is_err());
        assert!(GeoLocation::new(0.0, 180.5).is_err());
        assert_eq!(GeoLocation::new(10.0, 180.0).unwrap().lon(), -180.0);
        assert_eq!(GeoLocation::wrapped(10.0, 190.0).lon(), -170.0);
        assert_eq!(GeoLocation::wrapped(10.0, -540.0).lon(), -180.0);
    }

    #[test]
    fn isotope_vector_needs_a_value() {
        assert!(IsotopeVector::new([None; 4]).is_err());
        let v = IsotopeVector::new([Some(-5.0), None, Some(-40.0), None]).unwrap();
        assert_eq!(v.count(), 2);
        let present: Vec<_> = v.present().map(|(i, _)| i).collect();
        assert_eq!(present, vec![Isotope::D18O, Isotope::D2H]);
    }

    #[test]
    fn schema_rejects_duplicates() {
        assert!(FeatureSchema::new(vec!["a".into(), "a".into()]).is_err());
        let s = FeatureSchema::new(vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(s.manifest(), "a\nb\n");
    }
}
