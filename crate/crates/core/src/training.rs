//! Full-batch training with periodic graph re-estimation, and forecasting
//! past the training interval.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{normalize_features, NormalizationStats, SensorDataset};
use crate::error::{Error, Result};
use crate::graph::{
    build_initial_graph, cutoff_mask, default_threshold, mask_as_weights, reconstruct_adjacency,
    record_reconstruction, TemporalGraph,
};
use crate::losses::{
    auto_balance_active, feature_distance_matrix, label_distance_matrix, record_closeness,
    record_smoothness, record_stsm, LossBreakdown, LossWeights,
};
use crate::model::{forward_all, record_forward, Activation, ModelDims, ModelParams, Predictions};
use crate::optim::OptimizerState;
use crate::tape::{Tape, Var};

/// Share of training steps held out when validation is enabled.
pub const HOLDOUT_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    /// One GRU shared by every node.
    Shared,
    /// No structure learning: structure terms off, graph never updated.
    NoSl,
    /// Smoothness terms off.
    NoSm,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Self::Full, Self::Shared, Self::NoSl, Self::NoSm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Shared => "shared",
            Self::NoSl => "no-sl",
            Self::NoSm => "no-sm",
        }
    }

    pub fn shared_gru(self) -> bool {
        self == Self::Shared
    }

    pub fn learns_structure(self) -> bool {
        self != Self::NoSl
    }

    /// Which of (stsm, gc, fs, ts) enter the objective.
    pub fn active_terms(self) -> [bool; 4] {
        match self {
            Self::Full | Self::Shared => [true; 4],
            Self::NoSl => [true, false, false, false],
            Self::NoSm => [true, true, false, false],
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "full" => Ok(Self::Full),
            "shared" => Ok(Self::Shared),
            "no-sl" => Ok(Self::NoSl),
            "no-sm" => Ok(Self::NoSm),
            _ => Err(Error::InvalidConfig(format!("unknown ablation '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Balance the terms on the first epoch's raw values.
    #[default]
    Auto,
    /// Fixed `α1..α4`.
    Manual([f64; 4]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub embedding_dim: usize,
    pub window: usize,
    pub learning_rate: f64,
    pub epochs_per_outer_iter: usize,
    pub outer_iters: usize,
    pub weighting: Weighting,
    /// Edge threshold for the initial graph; derived from the distances
    /// when unset.
    pub threshold_km: Option<f64>,
    /// Reconstructed edges are limited to `multiplier × threshold`;
    /// unset allows every pair.
    pub cutoff_multiplier: Option<f64>,
    pub seed: u64,
    pub ablation: Ablation,
    pub activation: Activation,
    /// Recompute automatic weights at the start of every outer iteration.
    pub rebalance_each_outer: bool,
    /// Hold out the last training steps and keep the parameters with the
    /// lowest held-out error.
    pub validation_holdout: bool,
    /// Checkpoint callback cadence in epochs; 0 disables it.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 10,
            window: 1,
            learning_rate: 0.005,
            epochs_per_outer_iter: 300,
            outer_iters: 2,
            weighting: Weighting::Auto,
            threshold_km: None,
            cutoff_multiplier: Some(3.0),
            seed: 0,
            ablation: Ablation::Full,
            activation: Activation::Elu,
            rebalance_each_outer: false,
            validation_holdout: false,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be at least 1".into());
        }
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        if self.outer_iters == 0 {
            return bad("outer_iters must be at least 1".into());
        }
        if self.epochs_per_outer_iter == 0 {
            return bad("epochs_per_outer_iter must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if let Some(t) = self.threshold_km {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("threshold_km must be positive, got {t}"));
            }
        }
        if let Some(m) = self.cutoff_multiplier {
            if m.is_nan() || m <= 0.0 {
                return bad(format!("cutoff_multiplier must be positive, got {m}"));
            }
        }
        if let Weighting::Manual(a) = self.weighting {
            if a.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return bad(format!(
                    "manual weights must be finite and non-negative, got {a:?}"
                ));
            }
        }
        Ok(())
    }

    /// Weights for the chosen ablation, or `None` when they come from the
    /// first epoch.
    fn fixed_weights(&self) -> Option<LossWeights> {
        match self.weighting {
            Weighting::Auto => None,
            Weighting::Manual(a) => {
                let active = self.ablation.active_terms();
                let mut w = a;
                for k in 0..4 {
                    if !active[k] {
                        w[k] = 0.0;
                    }
                }
                Some(LossWeights::from_array(w))
            }
        }
    }
}

/// Everything needed to forecast: parameters, graphs and the feature
/// standardization fitted during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub graph: TemporalGraph,
    pub stats: NormalizationStats,
    /// Number of training steps `T`.
    pub train_end: usize,
    pub seed: u64,
    /// Optimizer steps taken.
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub losses: LossBreakdown,
    /// Held-out squared error, when validation is enabled.
    pub validation: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "epoch,stsm,gc,fs,ts,total";

    pub fn first(&self) -> Option<&LogRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", Self::HEADER)?;
        for r in &self.rows {
            let l = &r.losses;
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, l.stsm, l.gc, l.fs, l.ts, l.total
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii")
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub log: TrainingLog,
    /// Initial graph followed by the graph after each outer iteration.
    pub graph_history: Vec<TemporalGraph>,
    pub weights: LossWeights,
}

/// Training stopped on an error; `last_good` holds the most recent finite
/// state, if training had started.
#[derive(Debug, thiserror::Error)]
#[error("training stopped after {} logged epochs", .log.rows.len())]
pub struct TrainFailure {
    #[source]
    pub error: Error,
    pub last_good: Option<Box<TrainedModel>>,
    pub log: TrainingLog,
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        Self {
            error,
            last_good: None,
            log: TrainingLog::default(),
        }
    }
}

/// Constant inputs of the objective for one dataset.
struct Objective<'a> {
    features: ArrayView3<'a, f64>,
    labels: &'a Array2<f64>,
    /// Label mask with held-out steps cleared.
    mask: Array2<bool>,
    window: usize,
    fit_end: usize,
    feature_dists: Vec<Array2<f64>>,
    label_dists: Vec<Array2<f64>>,
}

struct Evaluation {
    losses: LossBreakdown,
    grads: ModelParams,
    validation: Option<f64>,
}

impl<'a> Objective<'a> {
    fn new(data: &'a SensorDataset, window: usize, holdout: bool) -> Result<Self> {
        let steps = data.train_end;
        if steps < window + 1 {
            return Err(Error::InvalidDataset(format!(
                "{steps} training steps, need at least window + 1 = {}",
                window + 1
            )));
        }
        let fit_end = if holdout {
            let hold = ((steps as f64 * HOLDOUT_FRACTION).round() as usize).max(1);
            if steps - hold < window + 1 {
                return Err(Error::InvalidDataset(format!(
                    "{steps} training steps leave too few after holding out {hold}"
                )));
            }
            steps - hold
        } else {
            steps
        };
        let mut mask = data.label_mask.slice(s![..steps, ..]).to_owned();
        mask.slice_mut(s![fit_end.., ..]).fill(false);
        if !mask.slice(s![window.., ..]).iter().any(|&m| m) {
            return Err(Error::NoLabels(format!(
                "no labeled cell in training steps {window}..{fit_end}"
            )));
        }
        let features = data.features.slice(s![..steps, .., ..]);
        let feature_dists = (0..steps)
            .map(|t| feature_distance_matrix(features.slice(s![t, .., ..])))
            .collect();
        let label_dists = (0..steps)
            .map(|t| label_distance_matrix(data.labels.row(t), mask.row(t)))
            .collect();
        Ok(Self {
            features,
            labels: &data.labels,
            mask,
            window,
            fit_end,
            feature_dists,
            label_dists,
        })
    }

    fn holdout_range(&self) -> std::ops::Range<usize> {
        self.fit_end..self.features.dim().0
    }

    /// Raw terms, weighted total and its gradient. With `weights` unset the
    /// weights are balanced on this evaluation's raw values.
    fn evaluate(
        &self,
        params: &ModelParams,
        graph: &TemporalGraph,
        weights: Option<LossWeights>,
        active: [bool; 4],
    ) -> Result<Evaluation> {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let trace = record_forward(&mut tape, params, &vars, self.features, |t| {
            graph.adjacency_at(t)
        })?;
        let stsm = record_stsm(
            &mut tape,
            &trace.predictions,
            self.window,
            self.labels,
            &self.mask,
        );
        let cutoff = graph
            .cutoff_mask
            .as_ref()
            .map(|m| tape.constant(mask_as_weights(m)));
        let recon: Vec<Var> = trace
            .embeddings
            .iter()
            .map(|&h| record_reconstruction(&mut tape, h, cutoff))
            .collect();
        let initial = tape.constant(graph.initial.clone());
        let gc = record_closeness(&mut tape, &recon, initial);
        let fs = record_smoothness(&mut tape, &recon, &self.feature_dists);
        let ts = record_smoothness(&mut tape, &recon, &self.label_dists);
        let terms = [stsm, gc, fs, ts];
        let raw = terms.map(|v| tape.scalar_value(v));
        let weights = weights.unwrap_or_else(|| auto_balance_active(raw, active));
        let alpha = weights.to_array();
        let weighted: Vec<Var> = (0..4)
            .filter(|&k| alpha[k] != 0.0)
            .map(|k| tape.scale(terms[k], alpha[k]))
            .collect();
        let total = tape.sum(&weighted);
        let losses = LossBreakdown::new(raw, weights);
        if !tape.scalar_value(total).is_finite() {
            return Err(Error::NonFinite(format!(
                "total loss {}",
                tape.scalar_value(total)
            )));
        }
        let grads = params.collect_gradients(&vars, &tape.backward(total));
        for (name, g) in grads.tensors() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.into()));
            }
        }
        let validation = (self.fit_end < self.features.dim().0).then(|| {
            self.holdout_range()
                .map(|t| {
                    let p = tape.value(trace.predictions[t - self.window]);
                    (0..p.nrows())
                        .filter(|&i| self.has_label(t, i))
                        .map(|i| (p[[i, 0]] - self.labels[[t, i]]).powi(2))
                        .sum::<f64>()
                })
                .sum()
        });
        Ok(Evaluation {
            losses,
            grads,
            validation,
        })
    }

    fn has_label(&self, t: usize, i: usize) -> bool {
        self.labels[[t, i]].is_finite()
    }
}

fn check_graph_steps(graph: &TemporalGraph, data: &SensorDataset) -> Result<()> {
    if graph.num_steps() != data.train_end || graph.num_nodes() != data.num_locations() {
        return Err(Error::DimensionMismatch {
            what: "graph steps".into(),
            expected: data.train_end,
            actual: graph.num_steps(),
        });
    }
    Ok(())
}

/// Gradient of the weighted objective over the training interval of
/// `data`, whose features are used as given.
pub fn compute_gradients(
    params: &ModelParams,
    graph: &TemporalGraph,
    data: &SensorDataset,
    weights: LossWeights,
) -> Result<(ModelParams, LossBreakdown)> {
    params.validate()?;
    check_graph_steps(graph, data)?;
    let objective = Objective::new(data, params.dims.window, false)?;
    let e = objective.evaluate(params, graph, Some(weights), [true; 4])?;
    Ok((e.grads, e.losses))
}

/// The four raw loss terms at `params`, with `weights` applied to the total.
pub fn evaluate_losses(
    params: &ModelParams,
    graph: &TemporalGraph,
    data: &SensorDataset,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    compute_gradients(params, graph, data, weights).map(|(_, l)| l)
}

/// Distance graph and cutoff used at the start of training.
pub fn initial_graph(data: &SensorDataset, config: &TrainConfig) -> Result<TemporalGraph> {
    let threshold = config
        .threshold_km
        .unwrap_or_else(|| default_threshold(&data.distances));
    let initial = build_initial_graph(&data.distances, threshold)?;
    let cutoff = config
        .cutoff_multiplier
        .map(|m| cutoff_mask(&data.distances, m * threshold));
    let graph = TemporalGraph::new(initial, data.train_end, cutoff);
    graph.check_invariants()?;
    Ok(graph)
}

/// Parameter initialization; the head bias starts at the mean training
/// label so that initial predictions sit inside the label range.
pub fn init_params(data: &SensorDataset, config: &TrainConfig) -> ModelParams {
    let dims = ModelDims {
        nodes: data.num_locations(),
        features: data.num_features(),
        embedding: config.embedding_dim,
        window: config.window,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(
        dims,
        config.ablation.shared_gru(),
        config.activation,
        &mut rng,
    );
    let (mut sum, mut count) = (0.0, 0usize);
    for t in config.window.min(data.train_end)..data.train_end {
        for i in 0..data.num_locations() {
            if data.label_mask[[t, i]] {
                sum += data.labels[[t, i]];
                count += 1;
            }
        }
    }
    if count > 0 {
        params.head.bias = sum / count as f64;
    }
    params
}

pub fn train(data: &SensorDataset, config: &TrainConfig) -> Result<TrainOutcome, TrainFailure> {
    train_with(data, config, |_, _| Ok(()))
}

/// [`train`] with a callback invoked every `checkpoint_every` epochs.
pub fn train_with(
    data: &SensorDataset,
    config: &TrainConfig,
    mut on_checkpoint: impl FnMut(&TrainedModel, &TrainingLog) -> Result<()>,
) -> Result<TrainOutcome, TrainFailure> {
    config.validate()?;
    data.validate()?;
    let (norm, stats) = normalize_features(data);
    let mut graph = initial_graph(&norm, config)?;
    let objective = Objective::new(&norm, config.window, config.validation_holdout)?;
    let mut params = init_params(&norm, config);
    let mut opt = OptimizerState::new(&params, config.learning_rate);
    let active = config.ablation.active_terms();
    let mut weights = config.fixed_weights();
    let mut log = TrainingLog::default();
    let mut history = vec![graph.clone()];
    let mut epoch = 0;

    let snapshot = |params: &ModelParams, graph: &TemporalGraph, epoch: usize| TrainedModel {
        params: params.clone(),
        graph: graph.clone(),
        stats: stats.clone(),
        train_end: norm.train_end,
        seed: config.seed,
        epoch,
    };

    for outer in 0..config.outer_iters {
        if outer > 0 && config.rebalance_each_outer && config.weighting == Weighting::Auto {
            weights = None;
        }
        let mut best: Option<(f64, ModelParams)> = None;
        for _ in 0..config.epochs_per_outer_iter {
            let e = match objective.evaluate(&params, &graph, weights, active) {
                Ok(e) => e,
                Err(error) => {
                    return Err(TrainFailure {
                        error,
                        last_good: Some(Box::new(snapshot(&params, &graph, epoch))),
                        log,
                    })
                }
            };
            weights = Some(e.losses.weights);
            if let Some(v) = e.validation {
                if best.as_ref().is_none_or(|(b, _)| v < *b) {
                    best = Some((v, params.clone()));
                }
            }
            log.rows.push(LogRow {
                epoch,
                losses: e.losses,
                validation: e.validation,
            });
            let previous = params.clone();
            opt.update(&mut params, &e.grads);
            if let Err(error) = params.check_finite() {
                return Err(TrainFailure {
                    error,
                    last_good: Some(Box::new(snapshot(&previous, &graph, epoch))),
                    log,
                });
            }
            epoch += 1;
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                on_checkpoint(&snapshot(&params, &graph, epoch), &log).map_err(|error| {
                    TrainFailure {
                        error,
                        last_good: Some(Box::new(snapshot(&params, &graph, epoch))),
                        log: log.clone(),
                    }
                })?;
            }
        }
        if let Some((_, p)) = best {
            params = p;
        }
        if config.ablation.learns_structure() {
            let updated = update_graph(&params, &graph, objective.features).map_err(|error| {
                TrainFailure {
                    error,
                    last_good: Some(Box::new(snapshot(&params, &graph, epoch))),
                    log: log.clone(),
                }
            })?;
            graph = updated;
        }
        history.push(graph.clone());
    }

    Ok(TrainOutcome {
        model: snapshot(&params, &graph, epoch),
        log,
        graph_history: history,
        weights: weights.unwrap_or(LossWeights::ONES),
    })
}

/// Replaces every `Ã^t` with the adjacency reconstructed from the final
/// embeddings at `t`.
pub fn update_graph(
    params: &ModelParams,
    graph: &TemporalGraph,
    features: ArrayView3<f64>,
) -> Result<TemporalGraph> {
    let out = forward_all(params, features, &graph.current)?;
    let mut next = graph.clone();
    for (t, a) in next.current.iter_mut().enumerate() {
        let h = out.embeddings.slice(s![t, .., ..]).to_owned();
        *a = reconstruct_adjacency(&h, graph.cutoff_mask.as_ref())?;
    }
    next.check_invariants()?;
    Ok(next)
}

/// Predictions for steps `T..T + horizon`. The model runs from step 0
/// with the learned graphs, reusing the last one past `T`. Labels are not
/// read.
pub fn forecast(model: &TrainedModel, data: &SensorDataset, horizon: usize) -> Result<Predictions> {
    let t_end = model.train_end;
    let n = model.params.dims.nodes;
    if data.num_locations() != n {
        return Err(Error::DimensionMismatch {
            what: "locations".into(),
            expected: n,
            actual: data.num_locations(),
        });
    }
    if data.num_features() != model.params.dims.features {
        return Err(Error::DimensionMismatch {
            what: "features".into(),
            expected: model.params.dims.features,
            actual: data.num_features(),
        });
    }
    if horizon == 0 {
        return Ok(Predictions {
            first_step: t_end,
            values: Array2::zeros((0, n)),
        });
    }
    let needed = t_end + horizon;
    if data.num_time_steps() < needed {
        return Err(Error::InvalidDataset(format!(
            "features cover {} steps, forecast needs {needed}",
            data.num_time_steps()
        )));
    }
    let norm = model.stats.apply(data)?;
    let features = norm.features.slice(s![..needed, .., ..]);
    let out = forward_all(&model.params, features, &model.graph.current)?;
    let first = out.predictions.first_step;
    Ok(Predictions {
        first_step: t_end,
        values: out
            .predictions
            .values
            .slice(s![t_end - first.., ..])
            .to_owned(),
    })
}

/// Forecast over the dataset's own test interval.
pub fn forecast_test(model: &TrainedModel, data: &SensorDataset) -> Result<Predictions> {
    let horizon = data.num_time_steps().saturating_sub(model.train_end);
    forecast(model, data, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn small_data(seed: u64) -> SensorDataset {
        let spec = SyntheticSpec {
            nodes: 5,
            steps: 16,
            features: 3,
            clusters: 2,
            horizon: 4,
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec, seed).unwrap()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            embedding_dim: 4,
            epochs_per_outer_iter: 5,
            learning_rate: 0.01,
            checkpoint_every: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert_eq!("no_sl".parse::<Ablation>().unwrap(), Ablation::NoSl);
        assert!("none".parse::<Ablation>().is_err());
    }

    #[test]
    fn config_rejects_bad_values() {
        for c in [
            TrainConfig {
                window: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                outer_iters: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                epochs_per_outer_iter: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                weighting: Weighting::Manual([1.0, -1.0, 0.0, 0.0]),
                ..TrainConfig::default()
            },
        ] {
            assert!(c.validate().is_err(), "{c:?}");
        }
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn config_parses_from_partial_json() {
        let c: TrainConfig =
            serde_json::from_str(r#"{"learning_rate": 0.0001, "ablation": "no-sm", "weighting": {"manual": [1, 0.5, 0, 0]}}"#)
                .unwrap();
        assert_eq!(c.learning_rate, 0.0001);
        assert_eq!(c.ablation, Ablation::NoSm);
        assert_eq!(c.weighting, Weighting::Manual([1.0, 0.5, 0.0, 0.0]));
        assert_eq!(c.embedding_dim, 10);
    }

    #[test]
    fn no_sl_keeps_graph_and_excludes_structure_terms() {
        let data = small_data(1);
        let config = TrainConfig {
            outer_iters: 1,
            ablation: Ablation::NoSl,
            ..quick_config()
        };
        let out = train(&data, &config).unwrap();
        assert_eq!(out.model.graph, out.graph_history[0]);
        assert_eq!(out.weights.to_array(), [1.0, 0.0, 0.0, 0.0]);
        for r in &out.log.rows {
            assert_eq!(r.losses.total, r.losses.stsm);
            assert!(r.losses.gc > 0.0);
        }
    }

    #[test]
    fn full_run_updates_graph_and_stays_row_stochastic() {
        let data = small_data(2);
        let out = train(&data, &quick_config()).unwrap();
        assert_eq!(out.graph_history.len(), 3);
        assert_ne!(out.graph_history[1].current, out.graph_history[0].current);
        for g in &out.graph_history {
            g.check_invariants().unwrap();
        }
        assert_eq!(out.log.rows.len(), 10);
        let first = out.log.first().unwrap().losses;
        let products: Vec<f64> = (0..4)
            .map(|k| first.raw()[k] * first.weights.to_array()[k])
            .collect();
        for p in &products {
            assert!((p - products[0]).abs() < 1e-9 * products[0]);
        }
    }

    #[test]
    fn no_sm_total_uses_two_terms() {
        let data = small_data(3);
        let config = TrainConfig {
            ablation: Ablation::NoSm,
            weighting: Weighting::Manual([1.0, 0.1, 5.0, 5.0]),
            ..quick_config()
        };
        let out = train(&data, &config).unwrap();
        for r in &out.log.rows {
            let l = r.losses;
            assert_eq!(l.weights.to_array(), [1.0, 0.1, 0.0, 0.0]);
            assert!((l.total - (l.stsm + 0.1 * l.gc)).abs() < 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = small_data(4);
        let a = train(&data, &quick_config()).unwrap();
        let b = train(&data, &quick_config()).unwrap();
        assert_eq!(a.log.to_csv_string(), b.log.to_csv_string());
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn checkpoints_fire_on_cadence() {
        let data = small_data(5);
        let mut seen = Vec::new();
        train_with(&data, &quick_config(), |m, log| {
            seen.push((m.epoch, log.rows.len()));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![(3, 3), (6, 6), (9, 9)]);
    }

    #[test]
    fn holdout_tracks_validation() {
        let data = small_data(6);
        let config = TrainConfig {
            validation_holdout: true,
            ..quick_config()
        };
        let out = train(&data, &config).unwrap();
        assert!(out.log.rows.iter().all(|r| r.validation.is_some()));
        let plain = train(&data, &quick_config()).unwrap();
        assert!(plain.log.rows.iter().all(|r| r.validation.is_none()));
    }

    #[test]
    fn forecast_shapes_and_range() {
        let data = small_data(7);
        let out = train(&data, &quick_config()).unwrap();
        let empty = forecast(&out.model, &data, 0).unwrap();
        assert_eq!(empty.num_steps(), 0);
        let p = forecast_test(&out.model, &data).unwrap();
        assert_eq!(p.first_step, 12);
        assert_eq!(p.values.dim(), (4, 5));
        assert!(p.values.iter().all(|&v| v >= 0.0));
        assert!(forecast(&out.model, &data, 5).is_err());
    }

    #[test]
    fn forecast_ignores_labels() {
        let data = small_data(8);
        let out = train(&data, &quick_config()).unwrap();
        let hidden = data.without_test_labels();
        let mut scrambled = data.clone();
        scrambled.labels.fill(123.0);
        let a = forecast_test(&out.model, &data).unwrap();
        assert_eq!(a, forecast_test(&out.model, &hidden).unwrap());
        assert_eq!(a, forecast_test(&out.model, &scrambled).unwrap());
    }

    #[test]
    fn structure_weights_off_match_prediction_gradient() {
        let data = small_data(9);
        let config = quick_config();
        let (norm, _) = normalize_features(&data);
        let graph = initial_graph(&norm, &config).unwrap();
        let params = init_params(&norm, &config);
        let only = LossWeights::from_array([1.0, 0.0, 0.0, 0.0]);
        let (g1, l1) = compute_gradients(&params, &graph, &norm, only).unwrap();
        // reference: the prediction term alone on a separate tape
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let trace = record_forward(
            &mut tape,
            &params,
            &vars,
            norm.features.slice(s![..norm.train_end, .., ..]),
            |t| graph.adjacency_at(t),
        )
        .unwrap();
        let stsm = record_stsm(
            &mut tape,
            &trace.predictions,
            1,
            &norm.labels,
            &norm.label_mask,
        );
        let g2 = params.collect_gradients(&vars, &tape.backward(stsm));
        assert_eq!(l1.total, tape.scalar_value(stsm));
        assert_eq!(g1, g2);
    }

    #[test]
    fn divergence_returns_last_good_state() {
        let data = small_data(10);
        let config = TrainConfig {
            learning_rate: 1e300,
            ..quick_config()
        };
        let err = train(&data, &config).unwrap_err();
        assert!(err.error.is_numeric(), "{}", err.error);
        let good = err.last_good.expect("snapshot");
        good.params.check_finite().unwrap();
    }
}
