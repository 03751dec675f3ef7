//! Isoscape rasters as ESRI ASCII grids.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{AggregationMode, Atmosphere, GeoLocation, Isotope};
use crate::error::{Error, Result};
use crate::model_io::{model_to_string, TrainedModel};

pub const NODATA: f64 = -9999.0;
pub const DEFAULT_CELL_SIZE: f64 = 0.5;

/// Latitude/longitude box in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl Bounds {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        let b = Self {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        };
        if ![lat_min, lat_max, lon_min, lon_max].iter().all(|v| v.is_finite())
            || lat_min >= lat_max
            || lon_min >= lon_max
            || lat_min < -90.0
            || lat_max > 90.0
            || lon_min < -180.0
            || lon_max > 180.0
        {
            return Err(Error::domain(format!("invalid bounds {b:?}")));
        }
        Ok(b)
    }
}

/// Row-major grid, first row northernmost.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    pub ncols: usize,
    pub nrows: usize,
    /// Longitude of the western edge.
    pub xllcorner: f64,
    /// Latitude of the southern edge.
    pub yllcorner: f64,
    pub cellsize: f64,
    pub nodata: f64,
    pub values: Vec<f64>,
}

impl RasterGrid {
    pub fn new(ncols: usize, nrows: usize, xllcorner: f64, yllcorner: f64, cellsize: f64, values: Vec<f64>) -> Result<Self> {
        if ncols == 0 || nrows == 0 || values.len() != ncols * nrows {
            return Err(Error::Dimension {
                expected: ncols * nrows,
                got: values.len(),
            });
        }
        if !(cellsize > 0.0) || !cellsize.is_finite() {
            return Err(Error::domain(format!("cell size {cellsize} must be positive")));
        }
        Ok(Self {
            ncols,
            nrows,
            xllcorner,
            yllcorner,
            cellsize,
            nodata: NODATA,
            values,
        })
    }

    /// Grid covering `bounds` with cells of `cellsize` degrees, filled with nodata.
    pub fn covering(bounds: &Bounds, cellsize: f64) -> Result<Self> {
        if !(cellsize > 0.0) || !cellsize.is_finite() {
            return Err(Error::domain(format!("cell size {cellsize} must be positive")));
        }
        let cells = |span: f64| {
            let c = span / cellsize;
            (if (c - c.round()).abs() < 1e-9 { c.round() } else { c.ceil() }).max(1.0) as usize
        };
        let ncols = cells(bounds.lon_max - bounds.lon_min);
        let nrows = cells(bounds.lat_max - bounds.lat_min);
        Self::new(ncols, nrows, bounds.lon_min, bounds.lat_min, cellsize, vec![NODATA; ncols * nrows])
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.ncols + col]
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.nodata
    }

    /// Centre of a cell.
    pub fn cell_center(&self, row: usize, col: usize) -> GeoLocation {
        let lon = self.xllcorner + (col as f64 + 0.5) * self.cellsize;
        let lat = self.yllcorner + (self.nrows as f64 - row as f64 - 0.5) * self.cellsize;
        GeoLocation::wrapped(lat, lon)
    }

    /// Cell containing a location, if inside the grid.
    pub fn cell_of(&self, loc: GeoLocation) -> Option<(usize, usize)> {
        let c = ((loc.lon() - self.xllcorner) / self.cellsize).floor();
        let r_from_south = ((loc.lat() - self.yllcorner) / self.cellsize).floor();
        if c < 0.0 || r_from_south < 0.0 || c >= self.ncols as f64 || r_from_south >= self.nrows as f64 {
            return None;
        }
        Some((self.nrows - 1 - r_from_south as usize, c as usize))
    }

    pub fn to_ascii(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "ncols {}", self.ncols);
        let _ = writeln!(out, "nrows {}", self.nrows);
        let _ = writeln!(out, "xllcorner {}", self.xllcorner);
        let _ = writeln!(out, "yllcorner {}", self.yllcorner);
        let _ = writeln!(out, "cellsize {}", self.cellsize);
        let _ = writeln!(out, "NODATA_value {}", format_g6(self.nodata));
        for row in self.values.chunks(self.ncols) {
            let cells: Vec<String> = row.iter().map(|&v| format_g6(v)).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_ascii(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut header = |key: &str| -> Result<f64> {
            let (i, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, 0, format!("missing header '{key}'")))?;
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(k), Some(v), None) if k.eq_ignore_ascii_case(key) => v
                    .parse()
                    .map_err(|_| Error::parse(path, i + 1, format!("bad value '{v}' for '{key}'"))),
                _ => Err(Error::parse(path, i + 1, format!("expected header '{key} <value>', found '{line}'"))),
            }
        };
        let ncols = header("ncols")?;
        let nrows = header("nrows")?;
        let xll = header("xllcorner")?;
        let yll = header("yllcorner")?;
        let cellsize = header("cellsize")?;
        let nodata = header("NODATA_value")?;
        if ncols < 1.0 || nrows < 1.0 || ncols.fract() != 0.0 || nrows.fract() != 0.0 {
            return Err(Error::parse(path, 1, "ncols and nrows must be positive integers"));
        }
        let (ncols, nrows) = (ncols as usize, nrows as usize);
        let mut values = Vec::with_capacity(ncols * nrows);
        let mut rows = 0;
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::parse(path, i + 1, format!("bad cell value '{t}'"))))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != ncols {
                return Err(Error::parse(path, i + 1, format!("expected {ncols} values, found {}", row.len())));
            }
            values.extend(row);
            rows += 1;
        }
        if rows != nrows {
            return Err(Error::parse(path, 2, format!("header declares {nrows} rows, file has {rows}")));
        }
        let mut grid = Self::new(ncols, nrows, xll, yll, cellsize, values)?;
        grid.nodata = nodata;
        Ok(grid)
    }
}

/// C `%g` formatting with 6 significant digits.
pub fn format_g6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if !(-4..6).contains(&exp) {
        let m = strip_zeros(mantissa);
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        strip_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_ascii_grid(grid: &RasterGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, grid.to_ascii()).map_err(|e| Error::io(path, e))
}

pub fn read_ascii_grid(path: impl AsRef<Path>) -> Result<RasterGrid> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RasterGrid::from_ascii(&text, path)
}

/// FNV-1a hash of the serialized model, used as its identifier.
pub fn model_id(model: &TrainedModel) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in model_to_string(model).bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Companion metadata text for a raster layer.
pub fn meta_text(model: &TrainedModel, isotope: Isotope, layer: &str, timestamp: u64) -> String {
    format!(
        "model_id {}\nmodel_variant {}\ntask {isotope}\nlayer {layer}\ntimestamp {timestamp}\n",
        model_id(model),
        model.variant()
    )
}

/// Writes `grid` to `path` and the metadata to the same path with extension `.meta`.
pub fn write_layer(grid: &RasterGrid, path: impl AsRef<Path>, meta: &str) -> Result<()> {
    let path = path.as_ref();
    write_ascii_grid(grid, path)?;
    let meta_path = path.with_extension("meta");
    std::fs::write(&meta_path, meta).map_err(|e| Error::io(meta_path, e))
}

/// Mean and standard-deviation rasters of one isotope over `bounds`.
///
/// The standard deviation is that of the latent surface (observation noise
/// excluded). Cells whose centre lies outside the atmospheric coverage hold
/// nodata.
pub fn render_isoscape(
    model: &TrainedModel,
    atmosphere: &Atmosphere,
    mode: AggregationMode,
    bounds: &Bounds,
    cellsize: f64,
    isotope: Isotope,
) -> Result<(RasterGrid, RasterGrid)> {
    if !model.isotopes().contains(&isotope) {
        return Err(Error::domain(format!("model does not predict {isotope}")));
    }
    let mut mean = RasterGrid::covering(bounds, cellsize)?;
    let mut std = mean.clone();
    let ncols = mean.ncols;
    let rows: Vec<Vec<(f64, f64)>> = (0..mean.nrows)
        .into_par_iter()
        .map(|r| {
            (0..ncols)
                .map(|c| {
                    let loc = mean.cell_center(r, c);
                    if !atmosphere.covers(loc) {
                        return Ok((NODATA, NODATA));
                    }
                    let f = atmosphere.features_for(loc, mode, model.schema())?;
                    let (m, v) = model.predict_isotope(isotope, loc, &f)?;
                    Ok((m, v.sqrt()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut any = false;
    for (r, row) in rows.into_iter().enumerate() {
        for (c, (m, s)) in row.into_iter().enumerate() {
            mean.values[r * ncols + c] = m;
            std.values[r * ncols + c] = s;
            any |= m != NODATA;
        }
    }
    if !any {
        return Err(Error::domain("no raster cell lies inside the atmospheric coverage"));
    }
    Ok((mean, std))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g6_matches_c_printf() {
        let cases = [
            (1.0, "1"),
            (-9999.0, "-9999"),
            (0.5, "0.5"),
            (123456.0, "123456"),
            (1234567.0, "1.23457e+06"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (-5.123456789, "-5.12346"),
            (100.0, "100"),
            (99999.95, "99999.9"),
            (999999.5, "1e+06"),
        ];
        for (v, s) in cases {
            assert_eq!(format_g6(v), s, "{v}");
        }
    }

    #[test]
    fn known_two_by_two_file() {
        let g = RasterGrid::new(2, 2, 30.0, 45.0, 0.5, vec![-5.25, NODATA, 1.0, -12.3456789]).unwrap();
        assert_eq!(
            g.to_ascii(),
            "ncols 2\nnrows 2\nxllcorner 30\nyllcorner 45\ncellsize 0.5\nNODATA_value -9999\n-5.25 -9999\n1 -12.3457\n"
        );
        let back = RasterGrid::from_ascii(&g.to_ascii(), Path::new("mem")).unwrap();
        assert_eq!(back.to_ascii(), g.to_ascii());
        assert!(back.is_nodata(back.get(0, 1)));
    }

    #[test]
    fn malformed_header_names_line() {
        let e = RasterGrid::from_ascii("ncols 2\nnrows x\n", Path::new("g.asc")).unwrap_err();
        assert_eq!(e.to_string(), "g.asc:2: bad value 'x' for 'nrows'");
    }

    #[test]
    fn cell_geometry() {
        let b = Bounds::new(45.0, 50.0, 30.0, 40.0).unwrap();
        let g = RasterGrid::covering(&b, 0.5).unwrap();
        assert_eq!((g.nrows, g.ncols), (10, 20));
        let c = g.cell_center(0, 0);
        assert_eq!((c.lat(), c.lon()), (49.75, 30.25));
        assert_eq!(g.cell_of(c), Some((0, 0)));
        assert_eq!(g.cell_of(GeoLocation::new(45.1, 39.9).unwrap()), Some((9, 19)));
    }
}
