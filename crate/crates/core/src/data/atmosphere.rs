use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ordered_float::OrderedFloat;

use super::{FeatureSchema, GeoLocation, Sample};
use crate::error::{Error, Result};

/// Variables missing in more than this fraction of lookups are dropped.
pub const DEFAULT_DROP_THRESHOLD: f64 = 0.5;

const ATMOS_HEADER: [&str; 6] = ["variable", "lat", "lon", "year", "month", "value"];

type RecordKey = (OrderedFloat<f64>, OrderedFloat<f64>, i32, u8);

/// Monthly values of one atmospheric variable on a set of grid cells.
/// Missing values are stored as NaN.
#[derive(Debug, Clone)]
pub struct AtmosphericSeries {
    name: String,
    units: String,
    values: BTreeMap<RecordKey, f64>,
}

/// Bitwise value equality, so two missing cells compare equal.
impl PartialEq for AtmosphericSeries {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.units == other.units
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|((ka, va), (kb, vb))| ka == kb && va.to_bits() == vb.to_bits())
    }
}

impl AtmosphericSeries {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            units: String::new(),
            values: BTreeMap::new(),
        }
    }

    pub fn with_units(mut self, units: impl Into<String>) -> Self {
        self.units = units.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn units(&self) -> &str {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn insert(
        &mut self,
        location: GeoLocation,
        year: i32,
        month: u8,
        value: Option<f64>,
    ) -> Result<()> {
        if !(1..=12).contains(&month) {
            return Err(Error::domain(format!("month {month} outside 1..=12")));
        }
        let value = match value {
            Some(v) if !v.is_finite() => {
                return Err(Error::domain(format!("non-finite value {v} for '{}'", self.name)))
            }
            Some(v) => v,
            None => f64::NAN,
        };
        let key = (OrderedFloat(location.lat()), OrderedFloat(location.lon()), year, month);
        if self.values.insert(key, value).is_some() {
            return Err(Error::domain(format!(
                "duplicate record for '{}' at ({}, {}) {year}-{month:02}",
                self.name,
                location.lat(),
                location.lon()
            )));
        }
        Ok(())
    }

    pub fn years(&self) -> BTreeSet<i32> {
        self.values.keys().map(|k| k.2).collect()
    }

    /// `(lat, lon, year, month, value)` in key order; missing values are `None`.
    pub fn records(&self) -> impl Iterator<Item = (f64, f64, i32, u8, Option<f64>)> + '_ {
        self.values
            .iter()
            .map(|(k, &v)| (k.0 .0, k.1 .0, k.2, k.3, if v.is_nan() { None } else { Some(v) }))
    }

    /// Every covered (cell, year) must carry all twelve months.
    pub fn validate_months(&self) -> Result<()> {
        let mut counts: BTreeMap<(OrderedFloat<f64>, OrderedFloat<f64>, i32), u8> = BTreeMap::new();
        for k in self.values.keys() {
            *counts.entry((k.0, k.1, k.2)).or_default() += 1;
        }
        if let Some(((lat, lon, year), n)) = counts.into_iter().find(|(_, n)| *n != 12) {
            return Err(Error::domain(format!(
                "variable '{}' has {n} months for ({}, {}) in {year}; expected 12",
                self.name, lat.0, lon.0
            )));
        }
        Ok(())
    }
}

/// Reads the long atmospheric CSV (`variable,lat,lon,year,month,value`).
/// An empty `value` cell marks a missing observation. Series are returned
/// sorted by variable name.
pub fn read_atmospheric_csv(path: impl AsRef<Path>) -> Result<Vec<AtmosphericSeries>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, 0, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != ATMOS_HEADER {
        return Err(Error::parse(
            path,
            1,
            format!("expected header '{}'", ATMOS_HEADER.join(",")),
        ));
    }
    let mut by_name: BTreeMap<String, AtmosphericSeries> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::parse(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let bad = |col: &str, cell: &str| Error::parse(path, line, format!("column '{col}': invalid value '{cell}'"));
        let name = &record[0];
        if name.is_empty() {
            return Err(Error::parse(path, line, "empty variable name"));
        }
        let lat: f64 = record[1].parse().map_err(|_| bad("lat", &record[1]))?;
        let lon: f64 = record[2].parse().map_err(|_| bad("lon", &record[2]))?;
        let year: i32 = record[3].parse().map_err(|_| bad("year", &record[3]))?;
        let month: u8 = record[4].parse().map_err(|_| bad("month", &record[4]))?;
        let value = if record[5].is_empty() {
            None
        } else {
            Some(record[5].parse::<f64>().map_err(|_| bad("value", &record[5]))?)
        };
        let location = GeoLocation::new(lat, lon).map_err(|e| Error::parse(path, line, e.to_string()))?;
        by_name
            .entry(name.to_string())
            .or_insert_with(|| AtmosphericSeries::new(name))
            .insert(location, year, month, value)
            .map_err(|e| Error::parse(path, line, e.to_string()))?;
    }
    let series: Vec<_> = by_name.into_values().collect();
    for s in &series {
        s.validate_months().map_err(|e| Error::parse(path, 0, e.to_string()))?;
    }
    Ok(series)
}

pub fn write_atmospheric_csv(path: impl AsRef<Path>, series: &[AtmosphericSeries]) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::parse(path, 0, e.to_string()))?;
    let io_err = |e: csv::Error| Error::parse(path, 0, e.to_string());
    writer.write_record(ATMOS_HEADER).map_err(io_err)?;
    let mut ordered: Vec<&AtmosphericSeries> = series.iter().collect();
    ordered.sort_by(|a, b| a.name.cmp(&b.name));
    for s in ordered {
        for (lat, lon, year, month, value) in s.records() {
            writer
                .write_record([
                    s.name.clone(),
                    lat.to_string(),
                    lon.to_string(),
                    year.to_string(),
                    month.to_string(),
                    value.map(|v| v.to_string()).unwrap_or_default(),
                ])
                .map_err(io_err)?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// How the monthly series at a location is reduced to features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AggregationMode {
    /// One feature per variable: the mean over the whole window.
    #[default]
    Mean,
    /// Mean plus the max-min range of the monthly climatology.
    MeanSeasonalAmplitude,
    /// Mean plus the standard deviation of annual means.
    MeanInterannualStd,
}

impl AggregationMode {
    fn extra_suffix(self) -> Option<&'static str> {
        match self {
            AggregationMode::Mean => None,
            AggregationMode::MeanSeasonalAmplitude => Some("seasonal_amplitude"),
            AggregationMode::MeanInterannualStd => Some("interannual_std"),
        }
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationMode::Mean => "mean",
            AggregationMode::MeanSeasonalAmplitude => "mean+seasonal",
            AggregationMode::MeanInterannualStd => "mean+interannual",
        })
    }
}

impl FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(AggregationMode::Mean),
            "mean+seasonal" => Ok(AggregationMode::MeanSeasonalAmplitude),
            "mean+interannual" => Ok(AggregationMode::MeanInterannualStd),
            other => Err(Error::domain(format!(
                "unknown aggregation mode '{other}' (expected mean, mean+seasonal or mean+interannual)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
struct VariableGrid {
    name: String,
    lats: Vec<f64>,
    lons: Vec<f64>,
    lat_half: f64,
    lon_half: f64,
    /// Per cell, `years * 12` slots in (year, month) order; NaN when missing.
    cells: HashMap<(usize, usize), Vec<f64>>,
    /// Spatial mean of each (year, month) slot over all cells.
    slot_means: Vec<f64>,
    overall_mean: f64,
}

fn half_spacing(axis: &[f64]) -> Option<f64> {
    axis.windows(2)
        .map(|w| w[1] - w[0])
        .min_by(|a, b| a.total_cmp(b))
        .map(|d| d / 2.0)
}

fn nearest(axis: &[f64], v: f64) -> usize {
    let i = axis.partition_point(|&x| x < v);
    if i == 0 {
        0
    } else if i == axis.len() {
        axis.len() - 1
    } else if (v - axis[i - 1]) <= (axis[i] - v) {
        i - 1
    } else {
        i
    }
}

impl VariableGrid {
    fn build(series: &AtmosphericSeries, years: &[i32]) -> Self {
        let year_index: HashMap<i32, usize> = years.iter().enumerate().map(|(i, &y)| (y, i)).collect();
        let lats: Vec<f64> = series.values.keys().map(|k| k.0).collect::<BTreeSet<_>>().into_iter().map(|v| v.0).collect();
        let lons: Vec<f64> = series.values.keys().map(|k| k.1).collect::<BTreeSet<_>>().into_iter().map(|v| v.0).collect();
        let lat_half = half_spacing(&lats);
        let lon_half = half_spacing(&lons);
        let (lat_half, lon_half) = match (lat_half, lon_half) {
            (Some(a), Some(b)) => (a, b),
            (Some(a), None) => (a, a),
            (None, Some(b)) => (b, b),
            (None, None) => (0.5, 0.5),
        };
        let slots = years.len() * 12;
        let mut cells: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
        for (k, &v) in &series.values {
            let li = lats.partition_point(|&x| x < k.0 .0);
            let oi = lons.partition_point(|&x| x < k.1 .0);
            let slot = year_index[&k.2] * 12 + (k.3 as usize - 1);
            cells.entry((li, oi)).or_insert_with(|| vec![f64::NAN; slots])[slot] = v;
        }
        let mut sums = vec![0.0; slots];
        let mut counts = vec![0usize; slots];
        for values in cells.values() {
            for (slot, &v) in values.iter().enumerate() {
                if !v.is_nan() {
                    sums[slot] += v;
                    counts[slot] += 1;
                }
            }
        }
        // Sum in key order so the result does not depend on hash iteration.
        let mut total = 0.0;
        let mut total_n = 0usize;
        for &v in series.values.values() {
            if !v.is_nan() {
                total += v;
                total_n += 1;
            }
        }
        let slot_means = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
            .collect();
        Self {
            name: series.name.clone(),
            lats,
            lons,
            lat_half,
            lon_half,
            cells,
            slot_means,
            overall_mean: if total_n > 0 { total / total_n as f64 } else { f64::NAN },
        }
    }

    fn locate(&self, location: GeoLocation) -> Option<(usize, usize)> {
        if self.lats.is_empty() {
            return None;
        }
        let li = nearest(&self.lats, location.lat());
        let oi = nearest(&self.lons, location.lon());
        let tol = 1e-9;
        let inside = (location.lat() - self.lats[li]).abs() <= self.lat_half + tol
            && (location.lon() - self.lons[oi]).abs() <= self.lon_half + tol;
        inside.then_some((li, oi))
    }

    fn raw_values(&self, location: GeoLocation) -> Option<Option<&Vec<f64>>> {
        self.locate(location).map(|cell| self.cells.get(&cell))
    }

    /// Monthly slots at the nearest cell with missing entries filled by the
    /// spatial mean of the same (year, month).
    fn imputed_values(&self, location: GeoLocation, slots: usize) -> Result<Vec<f64>> {
        let raw = self.raw_values(location).ok_or_else(|| Error::Coverage {
            lat: location.lat(),
            lon: location.lon(),
            variable: self.name.clone(),
        })?;
        if self.overall_mean.is_nan() {
            return Err(Error::domain(format!("variable '{}' has no observed values", self.name)));
        }
        Ok((0..slots)
            .map(|slot| {
                let v = raw.map(|r| r[slot]).unwrap_or(f64::NAN);
                if !v.is_nan() {
                    v
                } else if !self.slot_means[slot].is_nan() {
                    self.slot_means[slot]
                } else {
                    self.overall_mean
                }
            })
            .collect())
    }
}

/// Lookup index over a set of atmospheric series sharing one time window
/// (the union of their years).
#[derive(Debug, Clone)]
pub struct Atmosphere {
    years: Vec<i32>,
    grids: Vec<VariableGrid>,
}

impl Atmosphere {
    pub fn new(series: &[AtmosphericSeries]) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::domain("no atmospheric variables"));
        }
        let mut names = BTreeSet::new();
        for s in series {
            if !names.insert(s.name()) {
                return Err(Error::domain(format!("duplicate variable '{}'", s.name())));
            }
        }
        let years: Vec<i32> = series
            .iter()
            .flat_map(|s| s.years())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut grids: Vec<VariableGrid> = series.iter().map(|s| VariableGrid::build(s, &years)).collect();
        grids.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(Self { years, grids })
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn variable_names(&self) -> Vec<&str> {
        self.grids.iter().map(|g| g.name.as_str()).collect()
    }

    /// True when every variable's grid covers the location.
    pub fn covers(&self, location: GeoLocation) -> bool {
        self.grids.iter().all(|g| g.locate(location).is_some())
    }

    /// Feature names produced by [`Atmosphere::aggregate_features`]: variables
    /// in name order, each followed by its optional extra statistic.
    pub fn schema(&self, mode: AggregationMode) -> FeatureSchema {
        let mut names = Vec::new();
        for g in &self.grids {
            names.push(g.name.clone());
            if let Some(suffix) = mode.extra_suffix() {
                names.push(format!("{}:{suffix}", g.name));
            }
        }
        FeatureSchema { names }
    }

    pub fn aggregate_features(&self, location: GeoLocation, mode: AggregationMode) -> Result<Vec<f64>> {
        let n_years = self.years.len();
        let slots = n_years * 12;
        let mut out = Vec::with_capacity(self.grids.len() * 2);
        for g in &self.grids {
            let values = g.imputed_values(location, slots)?;
            out.push(values.iter().sum::<f64>() / slots as f64);
            match mode {
                AggregationMode::Mean => {}
                AggregationMode::MeanSeasonalAmplitude => {
                    let climatology: Vec<f64> = (0..12)
                        .map(|m| (0..n_years).map(|y| values[y * 12 + m]).sum::<f64>() / n_years as f64)
                        .collect();
                    let max = climatology.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let min = climatology.iter().cloned().fold(f64::INFINITY, f64::min);
                    out.push(max - min);
                }
                AggregationMode::MeanInterannualStd => {
                    let annual: Vec<f64> = values.chunks(12).map(|c| c.iter().sum::<f64>() / 12.0).collect();
                    out.push(sample_std(&annual));
                }
            }
        }
        Ok(out)
    }

    /// Aggregated features at `location` reordered to match `schema`.
    pub fn features_for(
        &self,
        location: GeoLocation,
        mode: AggregationMode,
        schema: &FeatureSchema,
    ) -> Result<Vec<f64>> {
        let full_schema = self.schema(mode);
        let full = self.aggregate_features(location, mode)?;
        schema
            .names()
            .iter()
            .map(|name| {
                full_schema
                    .index_of(name)
                    .map(|i| full[i])
                    .ok_or_else(|| Error::Schema(format!("feature '{name}' not produced by the atmosphere")))
            })
            .collect()
    }

    /// Fraction of (sample, year, month) lookups that are missing, per
    /// variable in name order.
    fn missing_fractions(&self, samples: &[Sample]) -> Vec<(String, f64)> {
        let slots = self.years.len() * 12;
        self.grids
            .iter()
            .map(|g| {
                let missing: usize = samples
                    .iter()
                    .map(|s| match g.raw_values(s.location) {
                        None | Some(None) => slots,
                        Some(Some(values)) => values.iter().filter(|v| v.is_nan()).count(),
                    })
                    .sum();
                (g.name.clone(), missing as f64 / (samples.len() * slots) as f64)
            })
            .collect()
    }
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Removes variables whose values at the sample locations are missing in
/// more than `threshold` of all (sample, year, month) lookups.
pub fn drop_sparse_variables(
    series: &[AtmosphericSeries],
    samples: &[Sample],
    threshold: f64,
) -> Result<Vec<AtmosphericSeries>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::domain(format!("threshold {threshold} outside (0, 1)")));
    }
    if samples.is_empty() {
        return Err(Error::domain("no samples to evaluate missingness against"));
    }
    let atmosphere = Atmosphere::new(series)?;
    let fractions: HashMap<String, f64> = atmosphere.missing_fractions(samples).into_iter().collect();
    let kept: Vec<AtmosphericSeries> = series
        .iter()
        .filter(|s| {
            let frac = fractions[s.name()];
            if frac > threshold {
                log::info!("dropping variable '{}': {:.1}% missing", s.name(), 100.0 * frac);
                false
            } else {
                true
            }
        })
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::domain("every atmospheric variable exceeds the missing-value threshold"));
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::IsotopeVector;

    fn loc(lat: f64, lon: f64) -> GeoLocation {
        GeoLocation::new(lat, lon).unwrap()
    }

    fn grid_series(name: &str, years: &[i32], f: impl Fn(f64, f64, i32, u8) -> Option<f64>) -> AtmosphericSeries {
        let mut s = AtmosphericSeries::new(name);
        for lat in [40.0, 41.0, 42.0] {
            for lon in [10.0, 11.0, 12.0] {
                for &y in years {
                    for m in 1..=12 {
                        s.insert(loc(lat, lon), y, m, f(lat, lon, y, m)).unwrap();
                    }
                }
            }
        }
        s
    }

    fn sample_at(lat: f64, lon: f64) -> Sample {
        Sample {
            location: loc(lat, lon),
            isotopes: IsotopeVector::new([Some(1.0), None, None, None]).unwrap(),
            features: vec![],
        }
    }

    #[test]
    fn constant_series_mean() {
        let s = grid_series("c", &[2000, 2001], |_, _, _, _| Some(3.25));
        let atm = Atmosphere::new(&[s]).unwrap();
        assert_eq!(atm.aggregate_features(loc(41.2, 10.9), AggregationMode::Mean).unwrap(), vec![3.25]);
    }

    #[test]
    fn month_index_series() {
        let s = grid_series("m", &[2000, 2001, 2002], |_, _, _, m| Some(m as f64));
        let atm = Atmosphere::new(&[s]).unwrap();
        let mean = atm.aggregate_features(loc(40.0, 10.0), AggregationMode::Mean).unwrap();
        assert!((mean[0] - 6.5).abs() < 1e-12);
        let amp = atm
            .aggregate_features(loc(40.0, 10.0), AggregationMode::MeanSeasonalAmplitude)
            .unwrap();
        assert!((amp[0] - 6.5).abs() < 1e-12);
        assert!((amp[1] - 11.0).abs() < 1e-12);
        let std = atm
            .aggregate_features(loc(40.0, 10.0), AggregationMode::MeanInterannualStd)
            .unwrap();
        assert!(std[1].abs() < 1e-12);
        assert_eq!(
            atm.schema(AggregationMode::MeanSeasonalAmplitude).names(),
            &["m".to_string(), "m:seasonal_amplitude".to_string()]
        );
    }

    #[test]
    fn interannual_std_of_year_trend() {
        let s = grid_series("t", &[2000, 2001, 2002], |_, _, y, _| Some((y - 2000) as f64));
        let atm = Atmosphere::new(&[s]).unwrap();
        let f = atm.aggregate_features(loc(40.0, 10.0), AggregationMode::MeanInterannualStd).unwrap();
        assert!((f[0] - 1.0).abs() < 1e-12);
        assert!((f[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_cell_and_coverage() {
        let s = grid_series("g", &[2000], |lat, lon, _, _| Some(lat * 100.0 + lon));
        let atm = Atmosphere::new(&[s]).unwrap();
        let f = atm.aggregate_features(loc(41.4, 11.6), AggregationMode::Mean).unwrap();
        assert_eq!(f, vec![4112.0]);
        assert!(atm.covers(loc(42.5, 12.5)));
        assert!(!atm.covers(loc(42.6, 12.0)));
        assert!(matches!(
            atm.aggregate_features(loc(45.0, 11.0), AggregationMode::Mean),
            Err(Error::Coverage { .. })
        ));
    }

    #[test]
    fn missing_cells_use_monthly_spatial_mean() {
        let s = grid_series("g", &[2000], |lat, lon, _, m| {
            if lat == 40.0 && lon == 10.0 && m == 1 {
                None
            } else {
                Some(m as f64 + (lat - 41.0))
            }
        });
        let atm = Atmosphere::new(&[s]).unwrap();
        let f = atm.aggregate_features(loc(40.0, 10.0), AggregationMode::MeanSeasonalAmplitude).unwrap();
        // January is replaced by the spatial January mean over the 8 other cells:
        // lat offsets (-1 x2, 0 x3, +1 x3) / 8 = 1/8, so January = 1.125.
        let months: Vec<f64> = (1..=12).map(|m| if m == 1 { 1.125 } else { m as f64 - 1.0 }).collect();
        let mean = months.iter().sum::<f64>() / 12.0;
        assert!((f[0] - mean).abs() < 1e-12);
        assert!((f[1] - (11.0 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn duplicate_records_rejected() {
        let mut s = AtmosphericSeries::new("x");
        s.insert(loc(1.0, 1.0), 2000, 1, Some(1.0)).unwrap();
        assert!(s.insert(loc(1.0, 1.0), 2000, 1, Some(2.0)).is_err());
        assert!(s.insert(loc(1.0, 1.0), 2000, 13, Some(2.0)).is_err());
    }

    #[test]
    fn incomplete_year_fails_validation() {
        let mut s = AtmosphericSeries::new("x");
        for m in 1..=11 {
            s.insert(loc(1.0, 1.0), 2000, m, Some(1.0)).unwrap();
        }
        assert!(s.validate_months().is_err());
        s.insert(loc(1.0, 1.0), 2000, 12, None).unwrap();
        assert!(s.validate_months().is_ok());
    }

    #[test]
    fn drop_rule_boundary_and_idempotence() {
        let samples = vec![sample_at(40.0, 10.0), sample_at(42.0, 12.0)];
        let full = grid_series("full", &[2000], |_, _, _, _| Some(1.0));
        // Missing at exactly one of the two sample cells: 50% missing.
        let half = grid_series("half", &[2000], |lat, _, _, _| if lat == 42.0 { None } else { Some(1.0) });
        // Missing at one sample cell plus one extra month at the other: > 50%.
        let sparse = grid_series("sparse", &[2000], |lat, _, _, m| {
            if lat == 42.0 || m == 5 {
                None
            } else {
                Some(1.0)
            }
        });
        let all = vec![full, half, sparse];
        let kept = drop_sparse_variables(&all, &samples, 0.5).unwrap();
        let names: Vec<_> = kept.iter().map(|s| s.name().to_string()).collect();
        assert_eq!(names, vec!["full", "half"]);
        let again = drop_sparse_variables(&kept, &samples, 0.5).unwrap();
        assert_eq!(again, kept);
        assert_eq!(drop_sparse_variables(&all[..1], &samples, 0.5).unwrap(), all[..1].to_vec());
        assert!(drop_sparse_variables(&all[2..], &samples, 0.5).is_err());
        assert!(drop_sparse_variables(&all, &samples, 1.0).is_err());
    }

    #[test]
    fn csv_round_trip_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let a = grid_series("b_var", &[2001], |lat, _, _, m| if m == 3 { None } else { Some(lat / 3.0) });
        let b = grid_series("a_var", &[2001], |_, lon, _, m| Some(lon * m as f64));
        let p1 = dir.path().join("a1.csv");
        let p2 = dir.path().join("a2.csv");
        write_atmospheric_csv(&p1, &[a.clone(), b.clone()]).unwrap();
        let back = read_atmospheric_csv(&p1).unwrap();
        assert_eq!(back, vec![b, a]);
        write_atmospheric_csv(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn csv_duplicate_line_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "variable,lat,lon,year,month,value\nx,1,1,2000,1,3\nx,1,1,2000,1,4\n").unwrap();
        match read_atmospheric_csv(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
