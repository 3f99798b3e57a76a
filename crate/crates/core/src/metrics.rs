//! RMSE, SMAPE and Pearson correlation per location over the test interval.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Predictions;

pub fn rmse(actual: &[f64], predicted: &[f64]) -> f64 {
    assert_eq!(actual.len(), predicted.len());
    if actual.is_empty() {
        return f64::NAN;
    }
    let sse: f64 = actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (a - p).powi(2))
        .sum();
    (sse / actual.len() as f64).sqrt()
}

/// `100 · mean(|s − ŝ| / (|s| + |ŝ|))`, with `0/0` terms counted as 0.
/// Always within `[0, 100]`.
pub fn smape_percent(actual: &[f64], predicted: &[f64]) -> f64 {
    assert_eq!(actual.len(), predicted.len());
    if actual.is_empty() {
        return f64::NAN;
    }
    let sum: f64 = actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| {
            let den = a.abs() + p.abs();
            if den == 0.0 {
                0.0
            } else {
                (a - p).abs() / den
            }
        })
        .sum();
    100.0 * sum / actual.len() as f64
}

/// Sample correlation; `None` with fewer than two points or when either
/// series is constant.
pub fn pearson(actual: &[f64], predicted: &[f64]) -> Option<f64> {
    assert_eq!(actual.len(), predicted.len());
    let n = actual.len();
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if n < 2 || constant(actual) || constant(predicted) {
        return None;
    }
    let ma = actual.iter().sum::<f64>() / n as f64;
    let mp = predicted.iter().sum::<f64>() / n as f64;
    let (mut sap, mut saa, mut spp) = (0.0, 0.0, 0.0);
    for (a, p) in actual.iter().zip(predicted) {
        let (da, dp) = (a - ma, p - mp);
        sap += da * dp;
        saa += da * da;
        spp += dp * dp;
    }
    if saa == 0.0 || spp == 0.0 {
        return None;
    }
    Some((sap / (saa.sqrt() * spp.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationMetrics {
    pub location_id: usize,
    pub rmse: f64,
    pub smape_percent: f64,
    /// `None` is reported as NA.
    pub pearson: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub locations: Vec<LocationMetrics>,
    pub mean_rmse: f64,
    pub mean_smape_percent: f64,
    /// Mean over locations with a defined correlation.
    pub mean_pearson: Option<f64>,
    pub count: usize,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

impl EvalReport {
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "location_id,rmse,smape_percent,pearson,count")?;
        for l in &self.locations {
            writeln!(
                out,
                "{},{},{},{},{}",
                l.location_id,
                l.rmse,
                l.smape_percent,
                fmt_opt(l.pearson),
                l.count
            )?;
        }
        writeln!(
            out,
            "AVERAGE,{},{},{},{}",
            self.mean_rmse,
            self.mean_smape_percent,
            fmt_opt(self.mean_pearson),
            self.count
        )
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

/// Actual and predicted series of one location over `interval`,
/// labeled steps only.
pub fn paired_series(
    predictions: &Predictions,
    labels: &Array2<f64>,
    mask: &Array2<bool>,
    interval: Range<usize>,
    location: usize,
) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut steps = Vec::new();
    let mut actual = Vec::new();
    let mut predicted = Vec::new();
    for t in interval {
        if mask[[t, location]] {
            steps.push(t);
            actual.push(labels[[t, location]]);
            predicted.push(predictions.get(t, location).expect("checked range"));
        }
    }
    (steps, actual, predicted)
}

/// Per-location metrics over labeled cells in `interval`, and their
/// unweighted means. Locations without any labeled cell are left out.
pub fn evaluate(
    predictions: &Predictions,
    labels: &Array2<f64>,
    mask: &Array2<bool>,
    interval: Range<usize>,
) -> Result<EvalReport> {
    let steps = predictions.steps();
    if interval.start < steps.start || interval.end > steps.end {
        return Err(Error::OutOfRange {
            what: format!("evaluation interval {interval:?} outside predictions {steps:?}"),
            value: interval.end as f64,
        });
    }
    let n = predictions.values.ncols();
    if labels.dim() != mask.dim() || labels.ncols() != n || labels.nrows() < interval.end {
        return Err(Error::DimensionMismatch {
            what: "labels".into(),
            expected: n,
            actual: labels.ncols(),
        });
    }
    let mut locations = Vec::new();
    for i in 0..n {
        let (_, a, p) = paired_series(predictions, labels, mask, interval.clone(), i);
        if a.is_empty() {
            continue;
        }
        locations.push(LocationMetrics {
            location_id: i,
            rmse: rmse(&a, &p),
            smape_percent: smape_percent(&a, &p),
            pearson: pearson(&a, &p),
            count: a.len(),
        });
    }
    if locations.is_empty() {
        return Err(Error::NoLabels(format!(
            "no ground truth in steps {interval:?}"
        )));
    }
    let m = locations.len() as f64;
    let defined: Vec<f64> = locations.iter().filter_map(|l| l.pearson).collect();
    Ok(EvalReport {
        mean_rmse: locations.iter().map(|l| l.rmse).sum::<f64>() / m,
        mean_smape_percent: locations.iter().map(|l| l.smape_percent).sum::<f64>() / m,
        mean_pearson: (!defined.is_empty())
            .then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        count: locations.iter().map(|l| l.count).sum(),
        locations,
    })
}
