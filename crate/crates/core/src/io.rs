//! Checkpoint files and long-format prediction CSVs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::graph::TemporalGraph;
use crate::model::{Activation, ModelDims, ModelParams, Predictions};
use crate::training::TrainedModel;

pub const CHECKPOINT_VERSION: &str = "dglr-ckpt-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major.
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    fn from_array(a: &Array2<f64>) -> Self {
        Self {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    fn into_array(self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data)
            .map_err(|e| Error::Checkpoint(format!("bad matrix: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GraphRecord {
    initial: Matrix,
    current: Vec<Matrix>,
    cutoff_mask: Option<Vec<Vec<bool>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    version: String,
    dims: ModelDims,
    shared_gru: bool,
    activation: Activation,
    seed: u64,
    epoch: usize,
    train_end: usize,
    tensors: Vec<Tensor>,
    normalization: NormalizationStats,
    graph: GraphRecord,
}

impl CheckpointFile {
    fn from_model(m: &TrainedModel) -> Self {
        let p = &m.params;
        let tensors = p
            .tensors()
            .into_iter()
            .zip(p.shapes())
            .map(|((name, data), shape)| Tensor {
                name: name.to_string(),
                shape,
                data: data.to_vec(),
            })
            .collect();
        let g = &m.graph;
        Self {
            version: CHECKPOINT_VERSION.into(),
            dims: p.dims,
            shared_gru: p.shared_gru,
            activation: p.activation,
            seed: m.seed,
            epoch: m.epoch,
            train_end: m.train_end,
            tensors,
            normalization: m.stats.clone(),
            graph: GraphRecord {
                initial: Matrix::from_array(&g.initial),
                current: g.current.iter().map(Matrix::from_array).collect(),
                cutoff_mask: g
                    .cutoff_mask
                    .as_ref()
                    .map(|c| c.outer_iter().map(|r| r.to_vec()).collect()),
            },
        }
    }

    fn into_model(self) -> Result<TrainedModel> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {:?}, expected {CHECKPOINT_VERSION:?}",
                self.version
            )));
        }
        let mut params = ModelParams::zeros(self.dims, self.shared_gru, self.activation);
        let shapes = params.shapes();
        let mut by_name: BTreeMap<String, Tensor> = self
            .tensors
            .into_iter()
            .map(|t| (t.name.clone(), t))
            .collect();
        for ((name, slot), shape) in params.tensors_mut().into_iter().zip(shapes) {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape != shape || t.data.len() != slot.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            slot.copy_from_slice(&t.data);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        params.check_finite()?;
        let n = self.dims.nodes;
        let cutoff_mask = match self.graph.cutoff_mask {
            Some(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Checkpoint("cutoff mask is not N × N".into()));
                }
                Some(Array2::from_shape_fn((n, n), |(i, j)| rows[i][j]))
            }
            None => None,
        };
        let graph = TemporalGraph {
            initial: self.graph.initial.into_array()?,
            current: self
                .graph
                .current
                .into_iter()
                .map(Matrix::into_array)
                .collect::<Result<_>>()?,
            cutoff_mask,
        };
        if graph.num_nodes() != n || graph.num_steps() != self.train_end {
            return Err(Error::Checkpoint(format!(
                "graph covers {} nodes × {} steps, expected {n} × {}",
                graph.num_nodes(),
                graph.num_steps(),
                self.train_end
            )));
        }
        graph.check_invariants()?;
        if self.normalization.mean.len() != self.dims.features
            || self.normalization.std.len() != self.dims.features
        {
            return Err(Error::Checkpoint(
                "normalization length differs from feature count".into(),
            ));
        }
        Ok(TrainedModel {
            params,
            graph,
            stats: self.normalization,
            train_end: self.train_end,
            seed: self.seed,
            epoch: self.epoch,
        })
    }
}

pub fn checkpoint_to_json(model: &TrainedModel) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&CheckpointFile::from_model(model))?;
    s.push('\n');
    Ok(s)
}

pub fn checkpoint_from_json(text: &str) -> Result<TrainedModel> {
    let file: CheckpointFile = serde_json::from_str(text)
        .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
    file.into_model()
}

pub fn save_checkpoint(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_to_json(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    checkpoint_from_json(&std::fs::read_to_string(path)?)
}

/// `time,location_id,prediction`, one row per step and location.
pub fn write_predictions_csv(predictions: &Predictions, mut out: impl Write) -> Result<()> {
    writeln!(out, "time,location_id,prediction")?;
    for t in predictions.steps() {
        for i in 0..predictions.values.ncols() {
            writeln!(out, "{t},{i},{}", predictions.get(t, i).expect("in range"))?;
        }
    }
    Ok(())
}

pub fn save_predictions_csv(predictions: &Predictions, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_predictions_csv(predictions, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads a prediction file written by [`write_predictions_csv`]. Every
/// (time, location) cell of a contiguous block must appear exactly once.
pub fn load_predictions_csv(path: impl AsRef<Path>) -> Result<Predictions> {
    let path = path.as_ref();
    let display = path.to_path_buf();
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header != ["time", "location_id", "prediction"] {
        return Err(Error::Malformed {
            path: display,
            line: 1,
            message: format!(
                "expected header time,location_id,prediction, got {}",
                header.join(",")
            ),
        });
    }
    let mut cells = BTreeMap::new();
    for (k, rec) in reader.records().enumerate() {
        let line = k as u64 + 2;
        let rec = rec?;
        let bad = |message: String| Error::Malformed {
            path: display.clone(),
            line,
            message,
        };
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", rec.len())));
        }
        let t: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad time {:?}", &rec[0])))?;
        let i: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad location_id {:?}", &rec[1])))?;
        let v: f64 = rec[2]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad prediction {:?}", &rec[2])))?;
        if cells.insert((t, i), v).is_some() {
            return Err(bad(format!("duplicate cell ({t}, {i})")));
        }
    }
    let Some((&(first, _), _)) = cells.iter().next() else {
        return Err(Error::Malformed {
            path: display,
            line: 1,
            message: "no prediction rows".into(),
        });
    };
    let last = cells.keys().map(|&(t, _)| t).max().expect("non-empty");
    let n = cells.keys().map(|&(_, i)| i).max().expect("non-empty") + 1;
    let steps = last - first + 1;
    if cells.len() != steps * n {
        return Err(Error::Malformed {
            path: display,
            line: 1,
            message: format!(
                "expected {} rows for {steps} steps × {n} locations, got {}",
                steps * n,
                cells.len()
            ),
        });
    }
    let values = Array2::from_shape_fn((steps, n), |(r, i)| cells[&(first + r, i)]);
    Ok(Predictions {
        first_step: first,
        values,
    })
}
