//! Sensor dataset model, feature standardization and label masking.

mod csv_io;
mod synthetic;

pub use csv_io::{load_csv, save_csv, CsvOptions, DEFAULT_HORIZON};
pub use synthetic::{
    generate_synthetic, generate_synthetic_with_truth, kmeans, SyntheticSpec, SyntheticTruth,
};

use ndarray::{Array2, Array3, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordinateSystem {
    /// Latitude / longitude in degrees.
    Geodetic,
    /// Planar coordinates already in kilometres.
    Planar,
}

/// Great-circle distance in km between two (lat, lon) points in degrees.
pub fn haversine_km(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (lat1, lon1) = (a[0].to_radians(), a[1].to_radians());
    let (lat2, lon2) = (b[0].to_radians(), b[1].to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

pub fn pairwise_distances(coords: &[[f64; 2]], system: CoordinateSystem) -> Array2<f64> {
    let n = coords.len();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = match system {
                CoordinateSystem::Geodetic => haversine_km(coords[i], coords[j]),
                CoordinateSystem::Planar => {
                    let dx = coords[i][0] - coords[j][0];
                    let dy = coords[i][1] - coords[j][1];
                    (dx * dx + dy * dy).sqrt()
                }
            };
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Locations, per-step features and partially observed labels.
///
/// Time is 0-based: steps `0..train_end` are trainable and
/// `train_end..num_time_steps()` form the forecast interval. Labels at
/// cells whose mask is false are stored as NaN.
#[derive(Clone, Debug)]
pub struct SensorDataset {
    pub coords: Vec<[f64; 2]>,
    pub coordinate_system: CoordinateSystem,
    pub distances: Array2<f64>,
    /// `T_total × N × D`.
    pub features: Array3<f64>,
    /// `T_total × N`.
    pub labels: Array2<f64>,
    pub label_mask: Array2<bool>,
    pub train_end: usize,
}

impl SensorDataset {
    /// Assembles a dataset, computing distances from `coords` and
    /// checking every structural invariant.
    pub fn new(
        coords: Vec<[f64; 2]>,
        coordinate_system: CoordinateSystem,
        features: Array3<f64>,
        labels: Array2<f64>,
        label_mask: Array2<bool>,
        train_end: usize,
    ) -> Result<Self> {
        let distances = pairwise_distances(&coords, coordinate_system);
        let mut labels = labels;
        ndarray::Zip::from(&mut labels)
            .and(&label_mask)
            .for_each(|l, &m| {
                if !m {
                    *l = f64::NAN;
                }
            });
        let ds = Self {
            coords,
            coordinate_system,
            distances,
            features,
            labels,
            label_mask,
            train_end,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn num_locations(&self) -> usize {
        self.coords.len()
    }

    pub fn num_time_steps(&self) -> usize {
        self.features.dim().0
    }

    pub fn num_features(&self) -> usize {
        self.features.dim().2
    }

    /// Length of the forecast interval.
    pub fn horizon(&self) -> usize {
        self.num_time_steps() - self.train_end
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_locations();
        let (t, fn_, _) = self.features.dim();
        let bad = |m: String| Err(Error::InvalidDataset(m));
        if n == 0 || t == 0 {
            return bad("dataset is empty".into());
        }
        if fn_ != n {
            return bad(format!("features cover {fn_} locations, expected {n}"));
        }
        if self.labels.dim() != (t, n) || self.label_mask.dim() != (t, n) {
            return bad("labels / mask shape does not match features".into());
        }
        if self.distances.dim() != (n, n) {
            return bad("distance matrix shape".into());
        }
        for i in 0..n {
            if self.distances[[i, i]] != 0.0 {
                return bad(format!("distance diagonal nonzero at {i}"));
            }
            for j in 0..n {
                let d = self.distances[[i, j]];
                if d.is_nan() || d < 0.0 || d != self.distances[[j, i]] {
                    return bad(format!("distance ({i},{j}) invalid or asymmetric"));
                }
            }
        }
        if self.train_end < 1 || self.train_end >= t {
            return bad(format!(
                "train_end {} must lie in 1..{t} (exclusive)",
                self.train_end
            ));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return bad("features must be complete and finite".into());
        }
        for ((&l, &m), (ti, i)) in self
            .labels
            .iter()
            .zip(self.label_mask.iter())
            .zip(ndarray::indices((t, n)))
        {
            if m && !l.is_finite() {
                return bad(format!("label at time {ti}, location {i} is not finite"));
            }
        }
        Ok(())
    }

    /// Returns a copy with a different train/forecast boundary.
    pub fn with_train_end(mut self, train_end: usize) -> Result<Self> {
        self.train_end = train_end;
        self.validate()?;
        Ok(self)
    }

    /// Number of labeled cells within the training interval.
    pub fn train_label_count(&self) -> usize {
        self.label_mask
            .slice(ndarray::s![..self.train_end, ..])
            .iter()
            .filter(|&&m| m)
            .count()
    }

    /// Copy with every label in the forecast interval hidden.
    pub fn without_test_labels(&self) -> Self {
        let mut ds = self.clone();
        for t in ds.train_end..ds.num_time_steps() {
            for i in 0..ds.num_locations() {
                ds.label_mask[[t, i]] = false;
                ds.labels[[t, i]] = f64::NAN;
            }
        }
        ds
    }
}

/// Per-feature statistics from the training interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    /// Zero-variance channels are stored as 1.
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn fit(dataset: &SensorDataset) -> Self {
        let d = dataset.num_features();
        let train = dataset
            .features
            .slice(ndarray::s![..dataset.train_end, .., ..]);
        let count = (train.dim().0 * train.dim().1) as f64;
        let mut mean = vec![0.0; d];
        let mut std = vec![1.0; d];
        for (k, channel) in train.axis_iter(Axis(2)).enumerate() {
            let m = channel.sum() / count;
            let var = channel.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
            mean[k] = m;
            if var > 0.0 {
                std[k] = var.sqrt();
            }
        }
        Self { mean, std }
    }

    pub fn apply(&self, dataset: &SensorDataset) -> Result<SensorDataset> {
        if self.mean.len() != dataset.num_features() {
            return Err(Error::DimensionMismatch {
                what: "normalization features".into(),
                expected: self.mean.len(),
                actual: dataset.num_features(),
            });
        }
        let mut out = dataset.clone();
        for (k, mut channel) in out.features.axis_iter_mut(Axis(2)).enumerate() {
            let (m, s) = (self.mean[k], self.std[k]);
            channel.mapv_inplace(|v| (v - m) / s);
        }
        Ok(out)
    }
}

/// Standardizes each feature channel with statistics from the training
/// interval only.
pub fn normalize_features(dataset: &SensorDataset) -> (SensorDataset, NormalizationStats) {
    let stats = NormalizationStats::fit(dataset);
    let out = stats
        .apply(dataset)
        .expect("stats fitted on the same dataset");
    (out, stats)
}

/// Hides a fraction `p` of the currently labeled training cells, chosen
/// uniformly at random. Forecast-interval labels are left alone.
pub fn mask_labels(dataset: &SensorDataset, fraction: f64, seed: u64) -> Result<SensorDataset> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!(
            "mask fraction {fraction} must lie in [0, 1)"
        )));
    }
    let n = dataset.num_locations();
    let labeled: Vec<(usize, usize)> = ndarray::indices((dataset.train_end, n))
        .into_iter()
        .filter(|&(t, i)| dataset.label_mask[[t, i]])
        .collect();
    let remove = (fraction * labeled.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dataset.clone();
    for idx in sample(&mut rng, labeled.len(), remove) {
        let (t, i) = labeled[idx];
        out.label_mask[[t, i]] = false;
        out.labels[[t, i]] = f64::NAN;
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use ndarray::{array, Array2, Array3};

    pub(crate) fn tiny(n: usize, t: usize, d: usize) -> SensorDataset {
        let coords = (0..n).map(|i| [i as f64, 0.0]).collect();
        let features = Array3::from_shape_fn((t, n, d), |(a, b, c)| (a + 2 * b + 3 * c) as f64);
        let labels = Array2::from_shape_fn((t, n), |(a, b)| 0.1 + 0.01 * (a + b) as f64);
        let mask = Array2::from_elem((t, n), true);
        SensorDataset::new(
            coords,
            CoordinateSystem::Planar,
            features,
            labels,
            mask,
            t - 1,
        )
        .unwrap()
    }

    #[test]
    fn same_location_has_zero_distance() {
        let d = pairwise_distances(&[[41.0, -5.5], [41.0, -5.5]], CoordinateSystem::Geodetic);
        assert_eq!(d, array![[0.0, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn unit_planar_distance() {
        let d = pairwise_distances(&[[0.0, 0.0], [0.0, 1.0]], CoordinateSystem::Planar);
        assert_eq!(d[[0, 1]], 1.0);
        assert_eq!(d[[1, 0]], 1.0);
    }

    #[test]
    fn haversine_quarter_meridian() {
        let d = haversine_km([0.0, 0.0], [90.0, 0.0]);
        assert!((d - EARTH_RADIUS_KM * std::f64::consts::FRAC_PI_2).abs() < 1e-9);
    }

    #[test]
    fn train_end_bounds_are_checked() {
        let ds = tiny(2, 3, 1);
        assert!(ds.clone().with_train_end(0).is_err());
        assert!(ds.clone().with_train_end(3).is_err());
        assert!(ds.with_train_end(2).is_ok());
    }

    #[test]
    fn constant_channel_becomes_zero() {
        let mut ds = tiny(2, 4, 1);
        ds.features.fill(5.0);
        let (out, stats) = normalize_features(&ds);
        assert!(out.features.iter().all(|&v| v == 0.0));
        assert_eq!(stats.std, vec![1.0]);
    }

    #[test]
    fn two_value_channel_becomes_unit() {
        let coords = vec![[0.0, 0.0]];
        let features = Array3::from_shape_vec((3, 1, 1), vec![1.0, 3.0, 10.0]).unwrap();
        let labels = Array2::zeros((3, 1));
        let mask = Array2::from_elem((3, 1), true);
        let ds = SensorDataset::new(coords, CoordinateSystem::Planar, features, labels, mask, 2)
            .unwrap();
        let (out, stats) = normalize_features(&ds);
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.std, vec![1.0]);
        assert_eq!(out.features[[0, 0, 0]], -1.0);
        assert_eq!(out.features[[1, 0, 0]], 1.0);
        // test-interval values use training statistics
        assert_eq!(out.features[[2, 0, 0]], 8.0);
    }

    #[test]
    fn normalization_is_idempotent() {
        let ds = tiny(3, 6, 2);
        let (once, _) = normalize_features(&ds);
        let (twice, _) = normalize_features(&once);
        for (a, b) in once.features.iter().zip(twice.features.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_zero_is_identity() {
        let ds = tiny(4, 6, 1);
        let out = mask_labels(&ds, 0.0, 3).unwrap();
        assert_eq!(out.label_mask, ds.label_mask);
    }

    #[test]
    fn mask_counts_and_test_interval() {
        // 10 locations × 11 steps with train_end 10 → 100 labeled train cells
        let ds = tiny(10, 11, 1);
        assert_eq!(ds.train_label_count(), 100);
        let out = mask_labels(&ds, 0.3, 9).unwrap();
        assert_eq!(out.train_label_count(), 70);
        assert_eq!(out.label_mask.row(10), ds.label_mask.row(10));
        let again = mask_labels(&ds, 0.3, 9).unwrap();
        assert_eq!(out.label_mask, again.label_mask);
    }

    #[test]
    fn mask_never_restores_labels() {
        let ds = tiny(5, 8, 1);
        let once = mask_labels(&ds, 0.4, 1).unwrap();
        let twice = mask_labels(&once, 0.5, 2).unwrap();
        for (a, b) in once.label_mask.iter().zip(twice.label_mask.iter()) {
            assert!(*a || !*b);
        }
    }

    #[test]
    fn mask_fraction_must_be_below_one() {
        assert!(mask_labels(&tiny(2, 3, 1), 1.0, 0).is_err());
    }
}
