use std::path::Path;

use super::{Dataset, FeatureSchema, GeoLocation, Isotope, IsotopeVector, Sample};
use crate::error::{Error, Result};

const SAMPLE_HEADER: [&str; 6] = ["lat", "lon", "d18O", "d13C", "d2H", "d34S"];

fn csv_error(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map(|p| p.line() as usize).unwrap_or(0);
    match err.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        kind => Error::parse(path, line, format!("{kind:?}")),
    }
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn parse_number(path: &Path, line: usize, column: &str, cell: &str) -> Result<f64> {
    cell.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::parse(path, line, format!("column '{column}': invalid number '{cell}'")))
}

fn parse_row_prefix(path: &Path, line: usize, record: &csv::StringRecord) -> Result<(GeoLocation, IsotopeVector)> {
    let lat = parse_number(path, line, "lat", &record[0])?;
    let lon = parse_number(path, line, "lon", &record[1])?;
    let location =
        GeoLocation::new(lat, lon).map_err(|e| Error::parse(path, line, e.to_string()))?;
    let mut values = [None; 4];
    for (k, iso) in Isotope::ALL.into_iter().enumerate() {
        let cell = &record[2 + k];
        if !cell.is_empty() {
            values[k] = Some(parse_number(path, line, iso.name(), cell)?);
        }
    }
    let isotopes = IsotopeVector::new(values).map_err(|e| Error::parse(path, line, e.to_string()))?;
    Ok((location, isotopes))
}

fn check_header(path: &Path, header: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = header.iter().collect();
    if got.len() < expected.len() || got[..expected.len()] != *expected {
        return Err(Error::parse(
            path,
            1,
            format!("expected header starting with '{}', got '{}'", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

/// Reads the sample CSV (`lat,lon,d18O,d13C,d2H,d34S`). Empty isotope cells
/// are missing values; the returned samples carry no features.
pub fn ingest_samples(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let mut reader = open_reader(path)?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    check_header(path, &header, &SAMPLE_HEADER)?;
    if header.len() != SAMPLE_HEADER.len() {
        return Err(Error::parse(path, 1, "unexpected extra columns in sample header"));
    }
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let (location, isotopes) = parse_row_prefix(path, line, &record)?;
        samples.push(Sample {
            location,
            isotopes,
            features: Vec::new(),
        });
    }
    Ok(samples)
}

fn format_isotopes(isotopes: &IsotopeVector) -> impl Iterator<Item = String> + '_ {
    isotopes
        .values()
        .iter()
        .map(|v| v.map(|x| x.to_string()).unwrap_or_default())
}

/// Writes samples in the ingestion format (features are not written).
pub fn write_samples(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer.write_record(SAMPLE_HEADER).map_err(|e| csv_error(path, e))?;
    for s in samples {
        let mut row = vec![s.location.lat().to_string(), s.location.lon().to_string()];
        row.extend(format_isotopes(&s.isotopes));
        writer.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Writes a dataset bundle table: the sample columns followed by one column
/// per feature, in schema order.
pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<String> = SAMPLE_HEADER.iter().map(|s| s.to_string()).collect();
    header.extend(dataset.schema().names().iter().cloned());
    writer.write_record(&header).map_err(|e| csv_error(path, e))?;
    for s in dataset.samples() {
        let mut row = vec![s.location.lat().to_string(), s.location.lon().to_string()];
        row.extend(format_isotopes(&s.isotopes));
        row.extend(s.features.iter().map(|v| v.to_string()));
        writer.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Reads a table written by [`write_dataset`].
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = open_reader(path)?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    check_header(path, &header, &SAMPLE_HEADER)?;
    let names: Vec<String> = header.iter().skip(SAMPLE_HEADER.len()).map(str::to_string).collect();
    let schema = FeatureSchema::new(names.clone()).map_err(|e| Error::parse(path, 1, e.to_string()))?;
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let (location, isotopes) = parse_row_prefix(path, line, &record)?;
        let features = names
            .iter()
            .enumerate()
            .map(|(k, name)| parse_number(path, line, name, &record[SAMPLE_HEADER.len() + k]))
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            location,
            isotopes,
            features,
        });
    }
    Dataset::new(schema, samples).map_err(|e| Error::parse(path, 0, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, name: &str, content: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    #[test]
    fn single_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "s.csv", "lat,lon,d18O,d13C,d2H,d34S\n50.1,30.5,25.1,-27.3,-60.2,5.5\n");
        let samples = ingest_samples(&path).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].isotopes.get(Isotope::D2H), Some(-60.2));
    }

    #[test]
    fn latitude_out_of_range_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "s.csv",
            "lat,lon,d18O,d13C,d2H,d34S\n50,30,1,2,3,4\n91,30,1,2,3,4\n",
        );
        let err = ingest_samples(&path).unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("latitude"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_number_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "s.csv", "lat,lon,d18O,d13C,d2H,d34S\n50,30,abc,2,3,4\n");
        let err = ingest_samples(&path).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("d18O"), "{err}");
    }

    #[test]
    fn ten_rows_two_missing_sulfur() {
        let dir = tempfile::tempdir().unwrap();
        let mut content = String::from("lat,lon,d18O,d13C,d2H,d34S\n");
        for i in 0..10 {
            let s = if i == 3 || i == 7 { String::new() } else { format!("{}.5", i) };
            content.push_str(&format!("{},{},24.{},-26.{},-55.{},{}\n", 45 + i, 20 + i, i, i, i, s));
        }
        let path = write_file(&dir, "s.csv", &content);
        let samples = ingest_samples(&path).unwrap();
        assert_eq!(samples.len(), 10);
        let missing = samples.iter().filter(|s| s.isotopes.get(Isotope::D34S).is_none()).count();
        assert_eq!(missing, 2);
        assert!(samples.iter().all(|s| s.isotopes.get(Isotope::D18O).is_some()));
    }

    #[test]
    fn wrong_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "s.csv", "lat,lon,d13C,d18O,d2H,d34S\n1,2,3,4,5,6\n");
        assert!(matches!(ingest_samples(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn dataset_bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let schema = FeatureSchema::new(vec!["precip".into(), "temp".into()]).unwrap();
        let samples = vec![Sample {
            location: GeoLocation::new(48.25, 31.125).unwrap(),
            isotopes: IsotopeVector::new([Some(25.5), None, Some(-61.25), Some(4.0)]).unwrap(),
            features: vec![0.1, 281.15],
        }];
        let ds = Dataset::new(schema, samples).unwrap();
        let path = dir.path().join("d.csv");
        write_dataset(&path, &ds).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), ds);
    }
}
