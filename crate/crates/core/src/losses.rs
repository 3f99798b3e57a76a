//! Prediction loss, graph regularizers and their weighted combination.
//!
//! All terms are plain sums over steps and node pairs (no averaging).
//! Labels are only read where the mask is set.

use ndarray::{Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Predictions;
use crate::tape::{Tape, Var};

/// Clamp applied to reconstructed entries before taking logarithms.
pub const BCE_EPSILON: f64 = 1e-7;

/// Term weights `α1..α4` for prediction, closeness, feature smoothness
/// and target smoothness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub stsm: f64,
    pub gc: f64,
    pub fs: f64,
    pub ts: f64,
}

impl LossWeights {
    pub const ONES: Self = Self {
        stsm: 1.0,
        gc: 1.0,
        fs: 1.0,
        ts: 1.0,
    };

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            stsm: a[0],
            gc: a[1],
            fs: a[2],
            ts: a[3],
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.stsm, self.gc, self.fs, self.ts]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub stsm: f64,
    pub gc: f64,
    pub fs: f64,
    pub ts: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn new(raw: [f64; 4], weights: LossWeights) -> Self {
        let total = raw
            .iter()
            .zip(weights.to_array())
            .map(|(l, a)| if a == 0.0 { 0.0 } else { a * l })
            .sum();
        Self {
            stsm: raw[0],
            gc: raw[1],
            fs: raw[2],
            ts: raw[3],
            total,
            weights,
        }
    }

    pub fn raw(&self) -> [f64; 4] {
        [self.stsm, self.gc, self.fs, self.ts]
    }
}

/// Weights giving every active term the same weighted value:
/// `α_k ∝ 1 / L_k`, normalized so the active weights sum to 1.
///
/// Inactive terms get weight 0. An active term whose raw value is 0 gets
/// weight 1 and the remaining active terms are balanced among themselves.
pub fn auto_balance_active(raw: [f64; 4], active: [bool; 4]) -> LossWeights {
    let mut w = [0.0; 4];
    let mut inv_sum = 0.0;
    for k in 0..4 {
        if active[k] {
            if raw[k] > 0.0 {
                inv_sum += 1.0 / raw[k];
            } else {
                w[k] = 1.0;
            }
        }
    }
    for k in 0..4 {
        if active[k] && raw[k] > 0.0 {
            w[k] = (1.0 / raw[k]) / inv_sum;
        }
    }
    LossWeights::from_array(w)
}

/// [`auto_balance_active`] with all four terms active.
pub fn auto_balance_weights(raw: [f64; 4]) -> LossWeights {
    auto_balance_active(raw, [true; 4])
}

/// `‖x_i − x_j‖²` for every pair, zero on the diagonal.
pub fn feature_distance_matrix(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            0.0
        } else {
            x.row(i)
                .iter()
                .zip(x.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        }
    })
}

/// `(s_i − s_j)²` for pairs of distinct labeled nodes, zero elsewhere.
pub fn label_distance_matrix(
    labels: ndarray::ArrayView1<f64>,
    mask: ndarray::ArrayView1<bool>,
) -> Array2<f64> {
    let n = labels.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i != j && mask[i] && mask[j] {
            (labels[i] - labels[j]).powi(2)
        } else {
            0.0
        }
    })
}

/// Label column and 0/1 mask column for one step; unlabeled cells hold 0.
pub(crate) fn masked_target(
    labels: ndarray::ArrayView1<f64>,
    mask: ndarray::ArrayView1<bool>,
) -> (Array2<f64>, Array2<f64>) {
    let n = labels.len();
    let target = Array2::from_shape_fn((n, 1), |(i, _)| if mask[i] { labels[i] } else { 0.0 });
    let m = Array2::from_shape_fn((n, 1), |(i, _)| if mask[i] { 1.0 } else { 0.0 });
    (target, m)
}

/// Squared error of `predictions[r]` (step `first_step + r`) over labeled
/// cells.
pub(crate) fn record_stsm(
    tape: &mut Tape,
    predictions: &[Var],
    first_step: usize,
    labels: &Array2<f64>,
    mask: &Array2<bool>,
) -> Var {
    let parts: Vec<Var> = predictions
        .iter()
        .enumerate()
        .map(|(r, &p)| {
            let t = first_step + r;
            let (target, m) = masked_target(labels.row(t), mask.row(t));
            let target = tape.constant(target);
            let m = tape.constant(m);
            tape.masked_sq_err(p, target, m)
        })
        .collect();
    tape.sum(&parts)
}

pub(crate) fn record_closeness(tape: &mut Tape, reconstructed: &[Var], initial: Var) -> Var {
    let parts: Vec<Var> = reconstructed
        .iter()
        .map(|&a| tape.bce_sum(a, initial, BCE_EPSILON))
        .collect();
    tape.sum(&parts)
}

/// `Σ_t Σ_ij Â^t_ij · weights[t]_ij`, used for both smoothness terms.
pub(crate) fn record_smoothness(
    tape: &mut Tape,
    reconstructed: &[Var],
    weights: &[Array2<f64>],
) -> Var {
    let parts: Vec<Var> = reconstructed
        .iter()
        .zip(weights)
        .map(|(&a, w)| {
            let w = tape.constant(w.clone());
            tape.weighted_sum(a, w)
        })
        .collect();
    tape.sum(&parts)
}

fn check_unit_interval(a: &Array2<f64>, what: &str) -> Result<()> {
    match a.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        Some(&value) => Err(Error::OutOfRange {
            what: what.into(),
            value,
        }),
        None => Ok(()),
    }
}

/// `Σ_t Σ_{i ∈ labeled} (s_i^t − ŝ_i^t)²` over the prediction steps.
pub fn loss_stsm(
    predictions: &Predictions,
    labels: &Array2<f64>,
    mask: &Array2<bool>,
) -> Result<f64> {
    let steps = predictions.steps();
    if steps.end > labels.nrows() || labels.dim() != mask.dim() {
        return Err(Error::DimensionMismatch {
            what: "label steps".into(),
            expected: steps.end,
            actual: labels.nrows(),
        });
    }
    if !steps.clone().any(|t| mask.row(t).iter().any(|&m| m)) {
        return Err(Error::NoLabels(format!("steps {steps:?}")));
    }
    let mut tape = Tape::new();
    let preds: Vec<Var> = predictions
        .values
        .outer_iter()
        .map(|row| tape.constant(row.to_owned().insert_axis(ndarray::Axis(1))))
        .collect();
    let out = record_stsm(&mut tape, &preds, predictions.first_step, labels, mask);
    Ok(tape.scalar_value(out))
}

/// Summed binary cross entropy between `initial` and each reconstructed
/// adjacency, the latter clamped to `[ε, 1−ε]`.
pub fn loss_graph_closeness(initial: &Array2<f64>, reconstructed: &[Array2<f64>]) -> Result<f64> {
    check_unit_interval(initial, "initial adjacency")?;
    let mut tape = Tape::new();
    let a = tape.constant(initial.clone());
    let mut parts = Vec::with_capacity(reconstructed.len());
    for (t, r) in reconstructed.iter().enumerate() {
        check_unit_interval(r, &format!("reconstructed adjacency at step {t}"))?;
        if r.dim() != initial.dim() {
            return Err(Error::DimensionMismatch {
                what: "reconstructed adjacency".into(),
                expected: initial.nrows(),
                actual: r.nrows(),
            });
        }
        parts.push(tape.constant(r.clone()));
    }
    let out = record_closeness(&mut tape, &parts, a);
    Ok(tape.scalar_value(out))
}

/// `Σ_t Σ_{i≠j} Â^t_ij ‖x_i^t − x_j^t‖²` for `t < reconstructed.len()`.
pub fn loss_feature_smoothness(reconstructed: &[Array2<f64>], features: ArrayView3<f64>) -> f64 {
    let weights: Vec<Array2<f64>> = (0..reconstructed.len())
        .map(|t| feature_distance_matrix(features.slice(ndarray::s![t, .., ..])))
        .collect();
    let mut tape = Tape::new();
    let parts: Vec<Var> = reconstructed
        .iter()
        .map(|r| tape.constant(r.clone()))
        .collect();
    let out = record_smoothness(&mut tape, &parts, &weights);
    tape.scalar_value(out)
}

/// `Σ_t Σ_{i≠j both labeled} Â^t_ij (s_i^t − s_j^t)²`.
pub fn loss_target_smoothness(
    reconstructed: &[Array2<f64>],
    labels: &Array2<f64>,
    mask: &Array2<bool>,
) -> f64 {
    let weights: Vec<Array2<f64>> = (0..reconstructed.len())
        .map(|t| label_distance_matrix(labels.row(t), mask.row(t)))
        .collect();
    let mut tape = Tape::new();
    let parts: Vec<Var> = reconstructed
        .iter()
        .map(|r| tape.constant(r.clone()))
        .collect();
    let out = record_smoothness(&mut tape, &parts, &weights);
    tape.scalar_value(out)
}
