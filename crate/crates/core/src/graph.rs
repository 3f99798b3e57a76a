//! Initial distance-threshold graph and adjacency reconstruction from
//! node embeddings.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Tolerance for the row-stochastic invariant.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Target mean degree (self-loop excluded) of the default threshold.
const DEFAULT_MEAN_DEGREE: usize = 4;

/// Adjacencies fed to the attention layers, one per training step.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalGraph {
    /// Row-normalized distance graph with self-loops.
    pub initial: Array2<f64>,
    /// `Ã^t` for each training step.
    pub current: Vec<Array2<f64>>,
    /// Pairs allowed to carry a reconstructed edge; `None` allows all.
    pub cutoff_mask: Option<Array2<bool>>,
}

impl TemporalGraph {
    /// Starts with the initial adjacency replicated over `steps`.
    pub fn new(initial: Array2<f64>, steps: usize, cutoff_mask: Option<Array2<bool>>) -> Self {
        Self {
            current: vec![initial.clone(); steps],
            initial,
            cutoff_mask,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.initial.nrows()
    }

    pub fn num_steps(&self) -> usize {
        self.current.len()
    }

    /// Adjacency for step `t`; steps past the training interval reuse the
    /// last learned graph.
    pub fn adjacency_at(&self, t: usize) -> &Array2<f64> {
        &self.current[t.min(self.current.len() - 1)]
    }

    pub fn check_invariants(&self) -> Result<()> {
        check_row_stochastic(&self.initial, "initial adjacency")?;
        if let Some((i, _)) = self
            .initial
            .diag()
            .iter()
            .enumerate()
            .find(|(_, &v)| v <= 0.0)
        {
            return Err(Error::OutOfRange {
                what: format!("self-loop of node {i}"),
                value: self.initial[[i, i]],
            });
        }
        for (t, a) in self.current.iter().enumerate() {
            check_row_stochastic(a, &format!("adjacency at step {t}"))?;
        }
        Ok(())
    }

    /// Writes each `Ã^t` as a dense CSV `adjacency_<t>.csv` in `dir`.
    pub fn dump(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (t, a) in self.current.iter().enumerate() {
            let mut w = csv::Writer::from_path(dir.join(format!("adjacency_{t:04}.csv")))?;
            for row in a.outer_iter() {
                w.write_record(row.iter().map(|v| v.to_string()))?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

/// Every entry nonnegative and every row summing to 1.
pub fn check_row_stochastic(a: &Array2<f64>, what: &str) -> Result<()> {
    for (i, row) in a.outer_iter().enumerate() {
        if let Some(&v) = row.iter().find(|&&v| v.is_nan() || v < 0.0) {
            return Err(Error::OutOfRange {
                what: format!("{what}, row {i}"),
                value: v,
            });
        }
        let total: f64 = row.sum();
        if (total - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::OutOfRange {
                what: format!("{what}, row {i} sum"),
                value: total,
            });
        }
    }
    Ok(())
}

/// Divides each row by its sum.
pub fn row_normalize(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.outer_iter_mut() {
        let total: f64 = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// Threshold giving the binary graph a mean degree of about four: the
/// midpoint between the `2N`-th and `(2N+1)`-th smallest pair distance.
pub fn default_threshold(distances: &Array2<f64>) -> f64 {
    let n = distances.nrows();
    let mut pairs: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| distances[[i, j]])
        .collect();
    pairs.sort_by(f64::total_cmp);
    let edges = DEFAULT_MEAN_DEGREE * n / 2;
    match (
        edges.checked_sub(1).and_then(|k| pairs.get(k)),
        pairs.get(edges),
    ) {
        (Some(&lo), Some(&hi)) if hi > lo => 0.5 * (lo + hi),
        (Some(&lo), Some(_)) => lo + f64::EPSILON.max(lo * 1e-12),
        (_, None) => pairs.last().map_or(1.0, |&m| m + 1.0),
        (None, Some(&hi)) => hi.max(f64::MIN_POSITIVE),
    }
}

/// Binary graph with an edge wherever `d_ij < threshold_km` plus
/// self-loops, row-normalized by degree.
pub fn build_initial_graph(distances: &Array2<f64>, threshold_km: f64) -> Result<Array2<f64>> {
    if threshold_km.is_nan() || threshold_km <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "threshold_km must be positive, got {threshold_km}"
        )));
    }
    let n = distances.nrows();
    let binary = Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j || distances[[i, j]] < threshold_km {
            1.0
        } else {
            0.0
        }
    });
    Ok(row_normalize(&binary))
}

/// Pairs closer than `radius_km`; the diagonal is always allowed.
pub fn cutoff_mask(distances: &Array2<f64>, radius_km: f64) -> Array2<bool> {
    Array2::from_shape_fn(distances.dim(), |(i, j)| {
        i == j || distances[[i, j]] < radius_km
    })
}

pub(crate) fn mask_as_weights(mask: &Array2<bool>) -> Array2<f64> {
    mask.mapv(|m| if m { 1.0 } else { 0.0 })
}

/// Records `ReLU(H Hᵀ)` on the tape, zeroed outside `cutoff`.
pub(crate) fn record_gram_relu(tape: &mut Tape, embeddings: Var, cutoff: Option<Var>) -> Var {
    let ht = tape.transpose(embeddings);
    let gram = tape.matmul(embeddings, ht);
    let relu = tape.relu(gram);
    match cutoff {
        Some(mask) => tape.mul(relu, mask),
        None => relu,
    }
}

/// Records the full reconstruction: Gram matrix, ReLU, cutoff, zero-row
/// rescue and row normalization.
pub(crate) fn record_reconstruction(tape: &mut Tape, embeddings: Var, cutoff: Option<Var>) -> Var {
    let raw = record_gram_relu(tape, embeddings, cutoff);
    tape.row_normalize_rescue(raw)
}

fn reconstruct_on_tape(
    embeddings: &Array2<f64>,
    cutoff: Option<&Array2<bool>>,
    normalize: bool,
) -> Result<Array2<f64>> {
    if embeddings.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embeddings".into()));
    }
    let n = embeddings.nrows();
    if let Some(m) = cutoff {
        if m.dim() != (n, n) {
            return Err(Error::DimensionMismatch {
                what: "cutoff mask".into(),
                expected: n,
                actual: m.nrows(),
            });
        }
    }
    let mut tape = Tape::new();
    let h = tape.constant(embeddings.clone());
    let mask = cutoff.map(|m| tape.constant(mask_as_weights(m)));
    let out = if normalize {
        record_reconstruction(&mut tape, h, mask)
    } else {
        record_gram_relu(&mut tape, h, mask)
    };
    Ok(tape.value(out).clone())
}

/// `ReLU(H Hᵀ)` restricted to `cutoff`, before the rescue and
/// normalization steps.
pub fn reconstruct_unnormalized(
    embeddings: &Array2<f64>,
    cutoff: Option<&Array2<bool>>,
) -> Result<Array2<f64>> {
    reconstruct_on_tape(embeddings, cutoff, false)
}

/// Learned adjacency from node embeddings (`N × K`): elementwise
/// `ReLU(H Hᵀ)`, entries outside `cutoff` zeroed, all-zero rows given a
/// unit self-loop, then row-normalized.
pub fn reconstruct_adjacency(
    embeddings: &Array2<f64>,
    cutoff: Option<&Array2<bool>>,
) -> Result<Array2<f64>> {
    reconstruct_on_tape(embeddings, cutoff, true)
}
