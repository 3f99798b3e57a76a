//! Two stacked (attention GNN → per-node GRU) layers followed by a
//! sliding-window prediction head.
//!
//! Each step `t` runs layer-1 attention message passing over `x^t`, the
//! layer-1 GRU of every node, then the same pair again for layer 2. The
//! prediction for step `t` reads the final-layer states of steps
//! `t-w..t-1`, so it never sees inputs from step `t` itself.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Dimension};
use rand::distr::Uniform;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};

/// Negative slope of the LeakyReLU applied to attention logits.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Nonlinearity applied after message aggregation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Elu,
    Tanh,
    Relu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elu" => Ok(Self::Elu),
            "tanh" => Ok(Self::Tanh),
            "relu" => Ok(Self::Relu),
            other => Err(Error::InvalidConfig(format!(
                "unknown activation {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub nodes: usize,
    pub features: usize,
    /// Embedding width `K` of both layers.
    pub embedding: usize,
    /// Number of past steps concatenated by the head.
    pub window: usize,
}

/// Shared projection and attention vector of one message-passing layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnLayerParams {
    /// `K_out × K_in`.
    pub weight: Array2<f64>,
    /// Length `2 K_out`: the first half scores the receiving node, the
    /// second half the sender.
    pub attention: Array1<f64>,
}

/// GRU parameters for every node (or one set shared by all nodes).
///
/// Matrices are stored as `units × K × K` and biases as `units × K`,
/// where `units` is the node count, or 1 when shared.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeGruParams {
    pub w_u: Array3<f64>,
    pub w_r: Array3<f64>,
    pub w_h: Array3<f64>,
    pub p_u: Array3<f64>,
    pub p_r: Array3<f64>,
    pub p_h: Array3<f64>,
    pub b_u: Array2<f64>,
    pub b_r: Array2<f64>,
    pub b_h: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// Length `w · K`, oldest step first.
    pub weight: Array1<f64>,
    pub bias: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub shared_gru: bool,
    pub activation: Activation,
    pub layer1: GnnLayerParams,
    pub layer2: GnnLayerParams,
    pub gru1: NodeGruParams,
    pub gru2: NodeGruParams,
    pub head: HeadParams,
}

fn uniform_array<D: Dimension, Sh: ndarray::ShapeBuilder<Dim = D>>(
    shape: Sh,
    fan_in: usize,
    rng: &mut impl Rng,
) -> ndarray::Array<f64, D> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    ndarray::Array::from_shape_simple_fn(shape, || rng.sample(dist))
}

fn flat<D: Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are contiguous")
}

fn flat_mut<D: Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are contiguous")
}

impl GnnLayerParams {
    pub fn init(k_in: usize, k_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: uniform_array((k_out, k_in), k_in, rng),
            attention: uniform_array(2 * k_out, 2 * k_out, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

impl NodeGruParams {
    pub fn zeros(units: usize, k: usize) -> Self {
        let m = || Array3::zeros((units, k, k));
        let b = || Array2::zeros((units, k));
        Self {
            w_u: m(),
            w_r: m(),
            w_h: m(),
            p_u: m(),
            p_r: m(),
            p_h: m(),
            b_u: b(),
            b_r: b(),
            b_h: b(),
        }
    }

    pub fn init(units: usize, k: usize, rng: &mut impl Rng) -> Self {
        let mut m = || uniform_array((units, k, k), k, rng);
        let (w_u, w_r, w_h, p_u, p_r, p_h) = (m(), m(), m(), m(), m(), m());
        let mut b = || uniform_array((units, k), k, rng);
        let (b_u, b_r, b_h) = (b(), b(), b());
        Self {
            w_u,
            w_r,
            w_h,
            p_u,
            p_r,
            p_h,
            b_u,
            b_r,
            b_h,
        }
    }

    pub fn units(&self) -> usize {
        self.b_u.nrows()
    }

    pub fn width(&self) -> usize {
        self.b_u.ncols()
    }

    /// Index of the parameter set used by `node`.
    pub fn unit_for(&self, node: usize) -> usize {
        if self.units() == 1 {
            0
        } else {
            node
        }
    }
}

impl ModelParams {
    /// Fan-in scaled uniform initialization.
    pub fn init(
        dims: ModelDims,
        shared_gru: bool,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let k = dims.embedding;
        let units = if shared_gru { 1 } else { dims.nodes };
        let layer1 = GnnLayerParams::init(dims.features, k, rng);
        let gru1 = NodeGruParams::init(units, k, rng);
        let layer2 = GnnLayerParams::init(k, k, rng);
        let gru2 = NodeGruParams::init(units, k, rng);
        let fan = dims.window * k;
        let head = HeadParams {
            weight: uniform_array(fan, fan, rng),
            bias: uniform_array(1, fan, rng)[0],
        };
        Self {
            dims,
            shared_gru,
            activation,
            layer1,
            layer2,
            gru1,
            gru2,
            head,
        }
    }

    pub fn zeros(dims: ModelDims, shared_gru: bool, activation: Activation) -> Self {
        let k = dims.embedding;
        let units = if shared_gru { 1 } else { dims.nodes };
        let layer = |k_in: usize| GnnLayerParams {
            weight: Array2::zeros((k, k_in)),
            attention: Array1::zeros(2 * k),
        };
        Self {
            dims,
            shared_gru,
            activation,
            layer1: layer(dims.features),
            layer2: layer(k),
            gru1: NodeGruParams::zeros(units, k),
            gru2: NodeGruParams::zeros(units, k),
            head: HeadParams {
                weight: Array1::zeros(dims.window * k),
                bias: 0.0,
            },
        }
    }

    /// Shapes matching [`ModelParams::tensors`], same order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let (l1, l2) = (&self.layer1, &self.layer2);
        let mut out = vec![
            l1.weight.shape().to_vec(),
            l1.attention.shape().to_vec(),
            l2.weight.shape().to_vec(),
            l2.attention.shape().to_vec(),
        ];
        for g in [&self.gru1, &self.gru2] {
            for m in [&g.w_u, &g.w_r, &g.w_h, &g.p_u, &g.p_r, &g.p_h] {
                out.push(m.shape().to_vec());
            }
            for b in [&g.b_u, &g.b_r, &g.b_h] {
                out.push(b.shape().to_vec());
            }
        }
        out.push(self.head.weight.shape().to_vec());
        out.push(vec![]);
        out
    }

    /// Same structure with every entry set to zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    /// Named flat views of every parameter tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let g1 = &self.gru1;
        let g2 = &self.gru2;
        vec![
            ("layer1.weight", flat(&self.layer1.weight)),
            ("layer1.attention", flat(&self.layer1.attention)),
            ("layer2.weight", flat(&self.layer2.weight)),
            ("layer2.attention", flat(&self.layer2.attention)),
            ("gru1.w_u", flat(&g1.w_u)),
            ("gru1.w_r", flat(&g1.w_r)),
            ("gru1.w_h", flat(&g1.w_h)),
            ("gru1.p_u", flat(&g1.p_u)),
            ("gru1.p_r", flat(&g1.p_r)),
            ("gru1.p_h", flat(&g1.p_h)),
            ("gru1.b_u", flat(&g1.b_u)),
            ("gru1.b_r", flat(&g1.b_r)),
            ("gru1.b_h", flat(&g1.b_h)),
            ("gru2.w_u", flat(&g2.w_u)),
            ("gru2.w_r", flat(&g2.w_r)),
            ("gru2.w_h", flat(&g2.w_h)),
            ("gru2.p_u", flat(&g2.p_u)),
            ("gru2.p_r", flat(&g2.p_r)),
            ("gru2.p_h", flat(&g2.p_h)),
            ("gru2.b_u", flat(&g2.b_u)),
            ("gru2.b_r", flat(&g2.b_r)),
            ("gru2.b_h", flat(&g2.b_h)),
            ("head.weight", flat(&self.head.weight)),
            ("head.bias", std::slice::from_ref(&self.head.bias)),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let g1 = &mut self.gru1;
        let g2 = &mut self.gru2;
        vec![
            ("layer1.weight", flat_mut(&mut self.layer1.weight)),
            ("layer1.attention", flat_mut(&mut self.layer1.attention)),
            ("layer2.weight", flat_mut(&mut self.layer2.weight)),
            ("layer2.attention", flat_mut(&mut self.layer2.attention)),
            ("gru1.w_u", flat_mut(&mut g1.w_u)),
            ("gru1.w_r", flat_mut(&mut g1.w_r)),
            ("gru1.w_h", flat_mut(&mut g1.w_h)),
            ("gru1.p_u", flat_mut(&mut g1.p_u)),
            ("gru1.p_r", flat_mut(&mut g1.p_r)),
            ("gru1.p_h", flat_mut(&mut g1.p_h)),
            ("gru1.b_u", flat_mut(&mut g1.b_u)),
            ("gru1.b_r", flat_mut(&mut g1.b_r)),
            ("gru1.b_h", flat_mut(&mut g1.b_h)),
            ("gru2.w_u", flat_mut(&mut g2.w_u)),
            ("gru2.w_r", flat_mut(&mut g2.w_r)),
            ("gru2.w_h", flat_mut(&mut g2.w_h)),
            ("gru2.p_u", flat_mut(&mut g2.p_u)),
            ("gru2.p_r", flat_mut(&mut g2.p_r)),
            ("gru2.p_h", flat_mut(&mut g2.p_h)),
            ("gru2.b_u", flat_mut(&mut g2.b_u)),
            ("gru2.b_r", flat_mut(&mut g2.b_r)),
            ("gru2.b_h", flat_mut(&mut g2.b_h)),
            ("head.weight", flat_mut(&mut self.head.weight)),
            ("head.bias", std::slice::from_mut(&mut self.head.bias)),
        ]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        let k = d.embedding;
        let units = if self.shared_gru { 1 } else { d.nodes };
        let mismatch = |what: &str, expected: usize, actual: usize| {
            Err(Error::DimensionMismatch {
                what: what.into(),
                expected,
                actual,
            })
        };
        if d.window == 0 {
            return Err(Error::InvalidConfig("window must be at least 1".into()));
        }
        for (name, layer, k_in) in [
            ("layer1", &self.layer1, d.features),
            ("layer2", &self.layer2, k),
        ] {
            if layer.weight.dim() != (k, k_in) {
                return mismatch(
                    &format!("{name}.weight columns"),
                    k_in,
                    layer.weight.ncols(),
                );
            }
            if layer.attention.len() != 2 * k {
                return mismatch(&format!("{name}.attention"), 2 * k, layer.attention.len());
            }
        }
        for (name, g) in [("gru1", &self.gru1), ("gru2", &self.gru2)] {
            for m in [&g.w_u, &g.w_r, &g.w_h, &g.p_u, &g.p_r, &g.p_h] {
                if m.dim() != (units, k, k) {
                    return mismatch(&format!("{name} matrices"), units, m.dim().0);
                }
            }
            for b in [&g.b_u, &g.b_r, &g.b_h] {
                if b.dim() != (units, k) {
                    return mismatch(&format!("{name} biases"), units, b.nrows());
                }
            }
        }
        if self.head.weight.len() != d.window * k {
            return mismatch("head.weight", d.window * k, self.head.weight.len());
        }
        Ok(())
    }

    pub(crate) fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut leaf = |a: Array2<f64>| {
            if trainable {
                tape.param(a)
            } else {
                tape.constant(a)
            }
        };
        let layer = |leaf: &mut dyn FnMut(Array2<f64>) -> Var, p: &GnnLayerParams| LayerVars {
            weight: leaf(p.weight.clone()),
            attention: leaf(p.attention.clone().insert_axis(ndarray::Axis(0))),
            width: p.output_dim(),
        };
        let gru = |leaf: &mut dyn FnMut(Array2<f64>) -> Var, g: &NodeGruParams| {
            let (u, k) = (g.units(), g.width());
            let m = |a: &Array3<f64>| {
                a.clone()
                    .into_shape_with_order((u, k * k))
                    .expect("contiguous")
            };
            GruVars {
                w_u: leaf(m(&g.w_u)),
                w_r: leaf(m(&g.w_r)),
                w_h: leaf(m(&g.w_h)),
                p_u: leaf(m(&g.p_u)),
                p_r: leaf(m(&g.p_r)),
                p_h: leaf(m(&g.p_h)),
                b_u: leaf(g.b_u.clone()),
                b_r: leaf(g.b_r.clone()),
                b_h: leaf(g.b_h.clone()),
                width: k,
            }
        };
        let layer1 = layer(&mut leaf, &self.layer1);
        let gru1 = gru(&mut leaf, &self.gru1);
        let layer2 = layer(&mut leaf, &self.layer2);
        let gru2 = gru(&mut leaf, &self.gru2);
        let head_weight = leaf(self.head.weight.clone().insert_axis(ndarray::Axis(1)));
        let head_bias = leaf(Array2::from_elem((1, 1), self.head.bias));
        ParamVars {
            layer1,
            layer2,
            gru1,
            gru2,
            head_weight,
            head_bias,
        }
    }

    /// Collects adjoints of the registered leaves into a structure that
    /// mirrors `self`.
    pub(crate) fn collect_gradients(&self, vars: &ParamVars, grads: &Gradients) -> ModelParams {
        let g2 = |v: Var, shape: (usize, usize)| {
            grads
                .get_or_zeros(v, shape)
                .as_standard_layout()
                .into_owned()
        };
        let layer = |lv: &LayerVars, p: &GnnLayerParams| GnnLayerParams {
            weight: g2(lv.weight, p.weight.dim()),
            attention: g2(lv.attention, (1, p.attention.len())).row(0).to_owned(),
        };
        let gru = |gv: &GruVars, p: &NodeGruParams| {
            let (u, k) = (p.units(), p.width());
            let m = |v: Var| {
                g2(v, (u, k * k))
                    .into_shape_with_order((u, k, k))
                    .expect("contiguous")
            };
            NodeGruParams {
                w_u: m(gv.w_u),
                w_r: m(gv.w_r),
                w_h: m(gv.w_h),
                p_u: m(gv.p_u),
                p_r: m(gv.p_r),
                p_h: m(gv.p_h),
                b_u: g2(gv.b_u, (u, k)),
                b_r: g2(gv.b_r, (u, k)),
                b_h: g2(gv.b_h, (u, k)),
            }
        };
        ModelParams {
            dims: self.dims,
            shared_gru: self.shared_gru,
            activation: self.activation,
            layer1: layer(&vars.layer1, &self.layer1),
            layer2: layer(&vars.layer2, &self.layer2),
            gru1: gru(&vars.gru1, &self.gru1),
            gru2: gru(&vars.gru2, &self.gru2),
            head: HeadParams {
                weight: g2(vars.head_weight, (self.head.weight.len(), 1))
                    .column(0)
                    .to_owned(),
                bias: g2(vars.head_bias, (1, 1))[[0, 0]],
            },
        }
    }
}

pub(crate) struct LayerVars {
    weight: Var,
    attention: Var,
    width: usize,
}

pub(crate) struct GruVars {
    w_u: Var,
    w_r: Var,
    w_h: Var,
    p_u: Var,
    p_r: Var,
    p_h: Var,
    b_u: Var,
    b_r: Var,
    b_h: Var,
    width: usize,
}

pub(crate) struct ParamVars {
    layer1: LayerVars,
    layer2: LayerVars,
    gru1: GruVars,
    gru2: GruVars,
    head_weight: Var,
    head_bias: Var,
}

/// Records `W x` for every node and the attention coefficients over the
/// support of `adjacency`. Returns `(projected, alpha)`.
fn record_attention(
    tape: &mut Tape,
    layer: &LayerVars,
    x: Var,
    adjacency: &Array2<f64>,
) -> (Var, Var) {
    let k = layer.width;
    let wt = tape.transpose(layer.weight);
    let z = tape.matmul(x, wt);
    let a_self = tape.slice_cols(layer.attention, 0, k);
    let a_nbr = tape.slice_cols(layer.attention, k, 2 * k);
    let a_self_t = tape.transpose(a_self);
    let a_nbr_t = tape.transpose(a_nbr);
    let src = tape.matmul(z, a_self_t);
    let dst = tape.matmul(z, a_nbr_t);
    let logits = tape.outer_sum(src, dst);
    let leaky = tape.leaky_relu(logits, LEAKY_SLOPE);
    let alpha = tape.masked_row_softmax(leaky, adjacency);
    (z, alpha)
}

fn record_activation(tape: &mut Tape, x: Var, activation: Activation) -> Var {
    match activation {
        Activation::Elu => tape.elu(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Relu => tape.relu(x),
    }
}

/// `σ(Σ_j α_ij Ã_ij W x_j)` for every node.
fn record_gnn(
    tape: &mut Tape,
    layer: &LayerVars,
    x: Var,
    adjacency: &Array2<f64>,
    activation: Activation,
) -> Var {
    let (z, alpha) = record_attention(tape, layer, x, adjacency);
    let adj = tape.constant(adjacency.clone());
    let coef = tape.mul(alpha, adj);
    let agg = tape.matmul(coef, z);
    record_activation(tape, agg, activation)
}

fn record_gru(tape: &mut Tape, gru: &GruVars, input: Var, state: Var) -> Var {
    let k = gru.width;
    let gate = |tape: &mut Tape, w: Var, p: Var, b: Var, h: Var| {
        let wx = tape.batch_matvec(w, input, k, k);
        let ph = tape.batch_matvec(p, h, k, k);
        let sum = tape.add(wx, ph);
        tape.add(sum, b)
    };
    let u_pre = gate(tape, gru.w_u, gru.p_u, gru.b_u, state);
    let update = tape.sigmoid(u_pre);
    let r_pre = gate(tape, gru.w_r, gru.p_r, gru.b_r, state);
    let reset = tape.sigmoid(r_pre);
    let reset_state = tape.mul(reset, state);
    let c_pre = gate(tape, gru.w_h, gru.p_h, gru.b_h, reset_state);
    let candidate = tape.tanh(c_pre);
    let keep = tape.affine(update, -1.0, 1.0);
    let kept = tape.mul(keep, state);
    let fresh = tape.mul(update, candidate);
    tape.add(kept, fresh)
}

/// Tape handles produced by [`record_forward`].
pub(crate) struct ForwardTrace {
    /// Final-layer states, one `N × K` value per step.
    pub embeddings: Vec<Var>,
    /// `N × 1` predictions for steps `window..steps`.
    pub predictions: Vec<Var>,
}

fn check_finite(tape: &Tape, v: Var, step: usize, layer: &str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation {
            step,
            layer: layer.into(),
        })
    }
}

pub(crate) fn record_forward<'a>(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ParamVars,
    features: ArrayView3<f64>,
    adjacency: impl Fn(usize) -> &'a Array2<f64>,
) -> Result<ForwardTrace> {
    let (steps, n, _) = features.dim();
    let k = params.dims.embedding;
    let w = params.dims.window;
    let zero = Array2::zeros((n, k));
    let mut state1 = tape.constant(zero.clone());
    let mut state2 = tape.constant(zero);
    let mut embeddings = Vec::with_capacity(steps);
    for t in 0..steps {
        let adj = adjacency(t);
        let x = tape.constant(features.slice(s![t, .., ..]).to_owned());
        let g1 = record_gnn(tape, &vars.layer1, x, adj, params.activation);
        check_finite(tape, g1, t, "layer1 message passing")?;
        state1 = record_gru(tape, &vars.gru1, g1, state1);
        check_finite(tape, state1, t, "layer1 gru")?;
        let g2 = record_gnn(tape, &vars.layer2, state1, adj, params.activation);
        check_finite(tape, g2, t, "layer2 message passing")?;
        state2 = record_gru(tape, &vars.gru2, g2, state2);
        check_finite(tape, state2, t, "layer2 gru")?;
        embeddings.push(state2);
    }
    let mut predictions = Vec::with_capacity(steps.saturating_sub(w));
    for t in w..steps {
        let window = tape.concat_cols(&embeddings[t - w..t]);
        let lin = tape.matmul(window, vars.head_weight);
        let biased = tape.add(lin, vars.head_bias);
        let pred = tape.relu(biased);
        check_finite(tape, pred, t, "prediction head")?;
        predictions.push(pred);
    }
    Ok(ForwardTrace {
        embeddings,
        predictions,
    })
}

/// Predicted values for a contiguous run of steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// Time index of the first row.
    pub first_step: usize,
    /// `steps × N`.
    pub values: Array2<f64>,
}

impl Predictions {
    pub fn num_steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn steps(&self) -> std::ops::Range<usize> {
        self.first_step..self.first_step + self.num_steps()
    }

    pub fn get(&self, t: usize, node: usize) -> Option<f64> {
        t.checked_sub(self.first_step)
            .and_then(|r| self.values.get((r, node)).copied())
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Final-layer states, `T' × N × K`.
    pub embeddings: Array3<f64>,
    pub predictions: Predictions,
}

fn check_square(adjacency: &Array2<f64>, n: usize) -> Result<()> {
    if adjacency.dim() != (n, n) {
        return Err(Error::DimensionMismatch {
            what: "adjacency".into(),
            expected: n,
            actual: adjacency.nrows(),
        });
    }
    if let Some(i) = (0..n).find(|&i| !adjacency.row(i).iter().any(|&v| v > 0.0)) {
        return Err(Error::InvalidConfig(format!("node {i} has no neighbors")));
    }
    Ok(())
}

fn check_layer_input(
    layer: &GnnLayerParams,
    x: &Array2<f64>,
    adjacency: &Array2<f64>,
) -> Result<()> {
    if x.ncols() != layer.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "layer input width".into(),
            expected: layer.input_dim(),
            actual: x.ncols(),
        });
    }
    if layer.attention.len() != 2 * layer.output_dim() {
        return Err(Error::DimensionMismatch {
            what: "attention vector".into(),
            expected: 2 * layer.output_dim(),
            actual: layer.attention.len(),
        });
    }
    check_square(adjacency, x.nrows())
}

fn layer_vars(tape: &mut Tape, layer: &GnnLayerParams) -> LayerVars {
    LayerVars {
        weight: tape.constant(layer.weight.clone()),
        attention: tape.constant(layer.attention.clone().insert_axis(ndarray::Axis(0))),
        width: layer.output_dim(),
    }
}

/// Attention coefficients `α_ij` over the neighbor sets `{j : Ã_ij > 0}`;
/// zero outside them.
pub fn attention_coefficients(
    layer: &GnnLayerParams,
    x: &Array2<f64>,
    adjacency: &Array2<f64>,
) -> Result<Array2<f64>> {
    check_layer_input(layer, x, adjacency)?;
    let mut tape = Tape::new();
    let lv = layer_vars(&mut tape, layer);
    let xv = tape.constant(x.clone());
    let (_, alpha) = record_attention(&mut tape, &lv, xv, adjacency);
    Ok(tape.value(alpha).clone())
}

/// One message-passing layer: `h_i = σ(Σ_j α_ij Ã_ij W x_j)`.
pub fn gnn_forward(
    layer: &GnnLayerParams,
    x: &Array2<f64>,
    adjacency: &Array2<f64>,
    activation: Activation,
) -> Result<Array2<f64>> {
    check_layer_input(layer, x, adjacency)?;
    let mut tape = Tape::new();
    let lv = layer_vars(&mut tape, layer);
    let xv = tape.constant(x.clone());
    let out = record_gnn(&mut tape, &lv, xv, adjacency, activation);
    Ok(tape.value(out).clone())
}

/// One GRU update for `node`, given its layer input and previous state.
pub fn gru_step(
    gru: &NodeGruParams,
    node: usize,
    input: &Array1<f64>,
    state: &Array1<f64>,
) -> Result<Array1<f64>> {
    let k = gru.width();
    for (what, len) in [("gru input", input.len()), ("gru state", state.len())] {
        if len != k {
            return Err(Error::DimensionMismatch {
                what: what.into(),
                expected: k,
                actual: len,
            });
        }
    }
    let u = gru.unit_for(node);
    if u >= gru.units() {
        return Err(Error::DimensionMismatch {
            what: "gru node index".into(),
            expected: gru.units(),
            actual: node,
        });
    }
    let mut tape = Tape::new();
    let mut mat = |a: &Array3<f64>| {
        tape.constant(
            a.slice(s![u, .., ..])
                .to_owned()
                .into_shape_with_order((1, k * k))
                .expect("contiguous"),
        )
    };
    let (w_u, w_r, w_h, p_u, p_r, p_h) = (
        mat(&gru.w_u),
        mat(&gru.w_r),
        mat(&gru.w_h),
        mat(&gru.p_u),
        mat(&gru.p_r),
        mat(&gru.p_h),
    );
    let mut bias = |b: &Array2<f64>| tape.constant(b.slice(s![u..u + 1, ..]).to_owned());
    let (b_u, b_r, b_h) = (bias(&gru.b_u), bias(&gru.b_r), bias(&gru.b_h));
    let vars = GruVars {
        w_u,
        w_r,
        w_h,
        p_u,
        p_r,
        p_h,
        b_u,
        b_r,
        b_h,
        width: k,
    };
    let x = tape.constant(input.clone().insert_axis(ndarray::Axis(0)));
    let h = tape.constant(state.clone().insert_axis(ndarray::Axis(0)));
    let out = record_gru(&mut tape, &vars, x, h);
    Ok(tape.value(out).row(0).to_owned())
}

/// Runs the full model over `features` (`T' × N × D`). Step `t` uses
/// `adjacencies[t]`, or the last entry once `t` runs past the slice.
pub fn forward_all(
    params: &ModelParams,
    features: ArrayView3<f64>,
    adjacencies: &[Array2<f64>],
) -> Result<ForwardOutput> {
    params.validate()?;
    let (steps, n, d) = features.dim();
    let dims = params.dims;
    if n != dims.nodes {
        return Err(Error::DimensionMismatch {
            what: "nodes".into(),
            expected: dims.nodes,
            actual: n,
        });
    }
    if d != dims.features {
        return Err(Error::DimensionMismatch {
            what: "features".into(),
            expected: dims.features,
            actual: d,
        });
    }
    if steps < dims.window + 1 {
        return Err(Error::InvalidConfig(format!(
            "need at least window + 1 = {} steps, got {steps}",
            dims.window + 1
        )));
    }
    if adjacencies.is_empty() {
        return Err(Error::InvalidConfig("no adjacency given".into()));
    }
    for a in adjacencies {
        check_square(a, n)?;
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let last = adjacencies.len() - 1;
    let trace = record_forward(&mut tape, params, &vars, features, |t| {
        &adjacencies[t.min(last)]
    })?;
    let k = dims.embedding;
    let mut embeddings = Array3::zeros((steps, n, k));
    for (t, &e) in trace.embeddings.iter().enumerate() {
        embeddings.slice_mut(s![t, .., ..]).assign(tape.value(e));
    }
    let mut values = Array2::zeros((trace.predictions.len(), n));
    for (r, &p) in trace.predictions.iter().enumerate() {
        values.row_mut(r).assign(&tape.value(p).column(0));
    }
    Ok(ForwardOutput {
        embeddings,
        predictions: Predictions {
            first_step: dims.window,
            values,
        },
    })
}
