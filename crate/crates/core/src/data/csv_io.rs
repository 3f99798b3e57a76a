use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};

use super::{CoordinateSystem, SensorDataset};
use crate::error::{Error, Result};

/// Forecast interval length used when none is given (the last 9 steps).
pub const DEFAULT_HORIZON: usize = 9;

#[derive(Clone, Copy, Debug)]
pub struct CsvOptions {
    pub coordinate_system: CoordinateSystem,
    /// Number of trailing steps held out as the forecast interval.
    pub horizon: usize,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            coordinate_system: CoordinateSystem::Geodetic,
            horizon: DEFAULT_HORIZON,
        }
    }
}

fn malformed(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn coord_header(system: CoordinateSystem) -> [&'static str; 3] {
    match system {
        CoordinateSystem::Geodetic => ["location_id", "lat", "lon"],
        CoordinateSystem::Planar => ["location_id", "x", "y"],
    }
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: u64, name: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| malformed(path, line, format!("cannot parse {name} from {raw:?}")))
}

fn read_locations(path: &Path, system: CoordinateSystem) -> Result<Vec<[f64; 2]>> {
    let mut reader = csv::ReaderBuilder::new().from_path(path)?;
    let expected = coord_header(system);
    let header = reader.headers()?.clone();
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(malformed(
            path,
            1,
            format!(
                "expected header {}, found {}",
                expected.join(","),
                got.join(",")
            ),
        ));
    }
    let mut by_id: BTreeMap<usize, [f64; 2]> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(malformed(
                path,
                line,
                format!("expected 3 fields, found {}", record.len()),
            ));
        }
        let id: usize = parse_field(path, line, "location_id", &record[0])?;
        let a: f64 = parse_field(path, line, expected[1], &record[1])?;
        let b: f64 = parse_field(path, line, expected[2], &record[2])?;
        if by_id.insert(id, [a, b]).is_some() {
            return Err(malformed(path, line, format!("duplicate location_id {id}")));
        }
    }
    for (expect, &id) in by_id.keys().enumerate() {
        if id != expect {
            return Err(malformed(
                path,
                0,
                format!("location ids must be contiguous from 0; missing {expect}"),
            ));
        }
    }
    Ok(by_id.into_values().collect())
}

struct Row {
    features: Vec<f64>,
    label: Option<f64>,
}

/// Reads `locations.csv` and `observations.csv` into a dataset whose last
/// `options.horizon` steps form the forecast interval.
pub fn load_csv(
    locations_path: impl AsRef<Path>,
    observations_path: impl AsRef<Path>,
    options: &CsvOptions,
) -> Result<SensorDataset> {
    let locations_path = locations_path.as_ref();
    let path = observations_path.as_ref();
    let coords = read_locations(locations_path, options.coordinate_system)?;
    let n = coords.len();

    let mut reader = csv::ReaderBuilder::new().from_path(path)?;
    let header = reader.headers()?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.len() < 4
        || cols[0] != "time"
        || cols[1] != "location_id"
        || cols[cols.len() - 1] != "label"
    {
        return Err(malformed(
            path,
            1,
            "expected header time,location_id,f1,...,fD,label",
        ));
    }
    let d = cols.len() - 3;

    let mut rows: BTreeMap<(usize, usize), Row> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != d + 3 {
            return Err(malformed(
                path,
                line,
                format!("expected {} fields, found {}", d + 3, record.len()),
            ));
        }
        let t: usize = parse_field(path, line, "time", &record[0])?;
        let i: usize = parse_field(path, line, "location_id", &record[1])?;
        if i >= n {
            return Err(malformed(path, line, format!("unknown location_id {i}")));
        }
        let features = (0..d)
            .map(|k| parse_field::<f64>(path, line, cols[k + 2], &record[k + 2]))
            .collect::<Result<Vec<_>>>()?;
        if features.iter().any(|v| !v.is_finite()) {
            return Err(malformed(path, line, "features must be finite"));
        }
        let raw = record[d + 2].trim();
        let label = if raw.is_empty() {
            None
        } else {
            let v: f64 = parse_field(path, line, "label", raw)?;
            if !v.is_finite() {
                return Err(malformed(path, line, "label must be finite"));
            }
            Some(v)
        };
        if rows.insert((t, i), Row { features, label }).is_some() {
            return Err(malformed(
                path,
                line,
                format!("duplicate observation for time {t}, location {i}"),
            ));
        }
    }

    let times: Vec<usize> = {
        let mut v: Vec<usize> = rows.keys().map(|&(t, _)| t).collect();
        v.dedup();
        v
    };
    for (expect, &t) in times.iter().enumerate() {
        if t != expect {
            return Err(malformed(
                path,
                0,
                format!("time indices must be contiguous from 0; missing {expect}"),
            ));
        }
    }
    let t_total = times.len();
    if rows.len() != t_total * n {
        let (t, i) = ndarray::indices((t_total, n))
            .into_iter()
            .find(|k| !rows.contains_key(k))
            .expect("some cell is missing");
        return Err(malformed(
            path,
            0,
            format!("missing observation for time {t}, location {i}"),
        ));
    }

    let mut features = Array3::zeros((t_total, n, d));
    let mut labels = Array2::from_elem((t_total, n), f64::NAN);
    let mut mask = Array2::from_elem((t_total, n), false);
    for ((t, i), row) in rows {
        for (k, v) in row.features.into_iter().enumerate() {
            features[[t, i, k]] = v;
        }
        if let Some(v) = row.label {
            labels[[t, i]] = v;
            mask[[t, i]] = true;
        }
    }
    let train_end = t_total.checked_sub(options.horizon).ok_or_else(|| {
        Error::InvalidDataset(format!(
            "horizon {} exceeds the {t_total} available steps",
            options.horizon
        ))
    })?;
    SensorDataset::new(
        coords,
        options.coordinate_system,
        features,
        labels,
        mask,
        train_end,
    )
}

/// Writes `locations.csv` and `observations.csv` into `dir`.
pub fn save_csv(dataset: &SensorDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut loc = std::io::BufWriter::new(File::create(dir.join("locations.csv"))?);
    writeln!(loc, "{}", coord_header(dataset.coordinate_system).join(","))?;
    for (i, c) in dataset.coords.iter().enumerate() {
        writeln!(loc, "{i},{},{}", c[0], c[1])?;
    }
    loc.flush()?;

    let mut obs = std::io::BufWriter::new(File::create(dir.join("observations.csv"))?);
    let d = dataset.num_features();
    let names: Vec<String> = (1..=d).map(|k| format!("f{k}")).collect();
    writeln!(obs, "time,location_id,{},label", names.join(","))?;
    for t in 0..dataset.num_time_steps() {
        for i in 0..dataset.num_locations() {
            write!(obs, "{t},{i}")?;
            for k in 0..d {
                write!(obs, ",{}", dataset.features[[t, i, k]])?;
            }
            if dataset.label_mask[[t, i]] {
                writeln!(obs, ",{}", dataset.labels[[t, i]])?;
            } else {
                writeln!(obs, ",")?;
            }
        }
    }
    obs.flush()?;
    Ok(())
}
