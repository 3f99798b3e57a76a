//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value on the tape is an `Array2<f64>`; scalars are `1 × 1`.
//! Operations are evaluated eagerly when recorded, so values can be read
//! back at any point. [`Tape::backward`] walks the recorded nodes in
//! reverse and accumulates adjoints only into nodes that depend on a
//! parameter.

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    MatMul(Var, Var),
    Transpose(Var),
    /// `b` may be a single row broadcast over the rows of `a`.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    BatchMatVec {
        mats: Var,
        x: Var,
        rows: usize,
        cols: usize,
    },
    OuterSum(Var, Var),
    MaskedRowSoftmax(Var),
    RowNormalizeRescue(Var),
    BceSum {
        pred: Var,
        target: Var,
        eps: f64,
    },
    WeightedSum(Var, Var),
    MaskedSqErr {
        pred: Var,
        target: Var,
        mask: Var,
    },
    Sum(Vec<Var>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn scalar(x: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.derived(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.derived(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert!(
            ca == cb && (ra == rb || rb == 1),
            "add: incompatible shapes {ra}x{ca} and {rb}x{cb}"
        );
        let value = self.value(a) + self.value(b);
        self.derived(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.derived(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.derived(value, Op::Mul(a, b), &[a, b])
    }

    /// `scale * a + offset`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, offset: f64) -> Var {
        let value = self.value(a).mapv(|x| scale * x + offset);
        self.derived(value, Op::Affine(a, scale), &[a])
    }

    pub fn scale(&mut self, a: Var, by: f64) -> Var {
        self.affine(a, by, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.derived(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.derived(value, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.derived(value, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.derived(value, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.derived(value, Op::Elu(a), &[a])
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.derived(value, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.derived(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Row-wise matrix-vector products.
    ///
    /// `mats` holds one flattened `rows × cols` matrix per row of `x`
    /// (row-major), or a single row shared by all rows of `x`.
    pub fn batch_matvec(&mut self, mats: Var, x: Var, rows: usize, cols: usize) -> Var {
        let (units, flat) = self.shape(mats);
        let (n, xc) = self.shape(x);
        assert_eq!(flat, rows * cols, "batch_matvec: matrix size");
        assert_eq!(xc, cols, "batch_matvec: input width");
        assert!(units == n || units == 1, "batch_matvec: unit count");
        let m = self.value(mats);
        let xv = self.value(x);
        let mut value = Array2::zeros((n, rows));
        for i in 0..n {
            let mi = m.row(if units == 1 { 0 } else { i });
            let xi = xv.row(i);
            for r in 0..rows {
                let mut acc = 0.0;
                for c in 0..cols {
                    acc += mi[r * cols + c] * xi[c];
                }
                value[[i, r]] = acc;
            }
        }
        self.derived(
            value,
            Op::BatchMatVec {
                mats,
                x,
                rows,
                cols,
            },
            &[mats, x],
        )
    }

    /// `out[i][j] = a[i] + b[j]` for column vectors `a` and `b`.
    pub fn outer_sum(&mut self, a: Var, b: Var) -> Var {
        let (n, ca) = self.shape(a);
        let (m, cb) = self.shape(b);
        assert!(ca == 1 && cb == 1, "outer_sum: expects column vectors");
        let av = self.value(a);
        let bv = self.value(b);
        let value = Array2::from_shape_fn((n, m), |(i, j)| av[[i, 0]] + bv[[j, 0]]);
        self.derived(value, Op::OuterSum(a, b), &[a, b])
    }

    /// Softmax of each row of `logits` restricted to the entries where
    /// `support` is strictly positive; zero elsewhere.
    ///
    /// Panics if a row has empty support.
    pub fn masked_row_softmax(&mut self, logits: Var, support: &Array2<f64>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.dim(), support.dim(), "masked_row_softmax: support shape");
        let mut value = Array2::zeros(x.dim());
        for (i, (xr, sr)) in x.outer_iter().zip(support.outer_iter()).enumerate() {
            let max = xr
                .iter()
                .zip(sr.iter())
                .filter(|(_, &s)| s > 0.0)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(
                sr.iter().any(|&s| s > 0.0),
                "row {i} has an empty neighbor set"
            );
            let mut total = 0.0;
            for j in 0..xr.len() {
                if sr[j] > 0.0 {
                    let e = (xr[j] - max).exp();
                    value[[i, j]] = e;
                    total += e;
                }
            }
            value.row_mut(i).mapv_inplace(|v| v / total);
        }
        self.derived(value, Op::MaskedRowSoftmax(logits), &[logits])
    }

    /// Divides each row of a nonnegative square matrix by its sum. Rows
    /// summing to zero become the matching unit row (self-loop only).
    pub fn row_normalize_rescue(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, m) = x.dim();
        assert_eq!(n, m, "row_normalize_rescue: expects a square matrix");
        let mut value = x.clone();
        for (i, mut row) in value.outer_iter_mut().enumerate() {
            let total: f64 = row.sum();
            if total > 0.0 {
                row.mapv_inplace(|v| v / total);
            } else {
                row.fill(0.0);
                row[i] = 1.0;
            }
        }
        self.derived(value, Op::RowNormalizeRescue(a), &[a])
    }

    /// Summed binary cross entropy with `pred` clamped to `[eps, 1 - eps]`.
    pub fn bce_sum(&mut self, pred: Var, target: Var, eps: f64) -> Var {
        assert_eq!(
            self.shape(pred),
            self.shape(target),
            "bce_sum: shape mismatch"
        );
        let p = self.value(pred);
        let t = self.value(target);
        let total: f64 = p
            .iter()
            .zip(t.iter())
            .map(|(&p, &t)| {
                let p = p.clamp(eps, 1.0 - eps);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        self.derived(
            scalar(total),
            Op::BceSum { pred, target, eps },
            &[pred, target],
        )
    }

    /// `sum(a ⊙ weights)`.
    pub fn weighted_sum(&mut self, a: Var, weights: Var) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(weights),
            "weighted_sum: shape mismatch"
        );
        let total = (self.value(a) * self.value(weights)).sum();
        self.derived(scalar(total), Op::WeightedSum(a, weights), &[a, weights])
    }

    /// `sum(mask ⊙ (target - pred)²)`. Entries of `target` under a zero
    /// mask are never read.
    pub fn masked_sq_err(&mut self, pred: Var, target: Var, mask: Var) -> Var {
        assert_eq!(self.shape(pred), self.shape(target), "masked_sq_err: shape");
        assert_eq!(
            self.shape(pred),
            self.shape(mask),
            "masked_sq_err: mask shape"
        );
        let p = self.value(pred);
        let t = self.value(target);
        let m = self.value(mask);
        let mut total = 0.0;
        for ((&p, &t), &m) in p.iter().zip(t.iter()).zip(m.iter()) {
            if m != 0.0 {
                total += m * (t - p) * (t - p);
            }
        }
        self.derived(
            scalar(total),
            Op::MaskedSqErr { pred, target, mask },
            &[pred, target, mask],
        )
    }

    /// Elementwise sum of same-shaped values. An empty slice yields a
    /// `1 × 1` zero.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let value = match parts.split_first() {
            None => scalar(0.0),
            Some((first, rest)) => {
                let mut acc = self.value(*first).clone();
                for p in rest {
                    acc += self.value(*p);
                }
                acc
            }
        };
        self.derived(value, Op::Sum(parts.to_vec()), parts)
    }

    /// Adjoints of every parameter-dependent node with respect to the
    /// scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones(self.shape(output)));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Input) {
                grads[idx] = Some(g);
                continue;
            }
            let mut emit = |v: Var, delta: Array2<f64>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Input => unreachable!(),
                Op::MatMul(a, b) => {
                    emit(*a, g.dot(&self.value(*b).t()));
                    emit(*b, self.value(*a).t().dot(&g));
                }
                Op::Transpose(a) => emit(*a, g.t().to_owned()),
                Op::Add(a, b) => {
                    if self.shape(*b) == g.dim() {
                        emit(*b, g.clone());
                    } else {
                        emit(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    emit(*a, g);
                }
                Op::Sub(a, b) => {
                    emit(*b, -&g);
                    emit(*a, g);
                }
                Op::Mul(a, b) => {
                    emit(*a, &g * self.value(*b));
                    emit(*b, &g * self.value(*a));
                }
                Op::Affine(a, scale) => emit(*a, g * *scale),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    emit(*a, &g * &y.mapv(|y| y * (1.0 - y)));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    emit(*a, &g * &y.mapv(|y| 1.0 - y * y));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    emit(*a, &g * &x.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    emit(*a, &g * &x.mapv(|x| if x > 0.0 { 1.0 } else { *slope }));
                }
                Op::Elu(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut d = g;
                    ndarray::Zip::from(&mut d)
                        .and(x)
                        .and(y)
                        .for_each(|d, &x, &y| {
                            if x <= 0.0 {
                                *d *= y + 1.0;
                            }
                        });
                    emit(*a, d);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    let width = g.ncols();
                    d.slice_mut(s![.., *start..*start + width]).assign(&g);
                    emit(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let width = self.shape(*p).1;
                        emit(*p, g.slice(s![.., offset..offset + width]).to_owned());
                        offset += width;
                    }
                }
                Op::BatchMatVec {
                    mats,
                    x,
                    rows,
                    cols,
                } => {
                    let (rows, cols) = (*rows, *cols);
                    let m = self.value(*mats);
                    let xv = self.value(*x);
                    let units = m.nrows();
                    let n = xv.nrows();
                    let mut dm = Array2::zeros(m.dim());
                    let mut dx = Array2::zeros(xv.dim());
                    for i in 0..n {
                        let u = if units == 1 { 0 } else { i };
                        for r in 0..rows {
                            let gr = g[[i, r]];
                            if gr == 0.0 {
                                continue;
                            }
                            for c in 0..cols {
                                dm[[u, r * cols + c]] += gr * xv[[i, c]];
                                dx[[i, c]] += gr * m[[u, r * cols + c]];
                            }
                        }
                    }
                    emit(*mats, dm);
                    emit(*x, dx);
                }
                Op::OuterSum(a, b) => {
                    emit(*a, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                    emit(*b, g.sum_axis(Axis(0)).insert_axis(Axis(1)));
                }
                Op::MaskedRowSoftmax(a) => {
                    let y = &node.value;
                    let mut d = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let dot: f64 = g.row(i).dot(&y.row(i));
                        for j in 0..y.ncols() {
                            d[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    emit(*a, d);
                }
                Op::RowNormalizeRescue(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut d = Array2::zeros(x.dim());
                    for i in 0..x.nrows() {
                        let total: f64 = x.row(i).sum();
                        if total > 0.0 {
                            let dot: f64 = g.row(i).dot(&y.row(i));
                            for j in 0..x.ncols() {
                                d[[i, j]] = (g[[i, j]] - dot) / total;
                            }
                        }
                    }
                    emit(*a, d);
                }
                Op::BceSum { pred, target, eps } => {
                    let g0 = g[[0, 0]];
                    let eps = *eps;
                    let p = self.value(*pred);
                    let t = self.value(*target);
                    let dp = ndarray::Zip::from(p).and(t).map_collect(|&p, &t| {
                        if p < eps || p > 1.0 - eps {
                            0.0
                        } else {
                            g0 * (-t / p + (1.0 - t) / (1.0 - p))
                        }
                    });
                    let dt = p.mapv(|p| {
                        let p = p.clamp(eps, 1.0 - eps);
                        g0 * ((1.0 - p).ln() - p.ln())
                    });
                    emit(*pred, dp);
                    emit(*target, dt);
                }
                Op::WeightedSum(a, w) => {
                    let g0 = g[[0, 0]];
                    emit(*a, self.value(*w) * g0);
                    emit(*w, self.value(*a) * g0);
                }
                Op::MaskedSqErr { pred, target, mask } => {
                    let g0 = g[[0, 0]];
                    let p = self.value(*pred);
                    let t = self.value(*target);
                    let m = self.value(*mask);
                    let dp = ndarray::Zip::from(p)
                        .and(t)
                        .and(m)
                        .map_collect(|&p, &t, &m| {
                            if m != 0.0 {
                                g0 * m * 2.0 * (p - t)
                            } else {
                                0.0
                            }
                        });
                    emit(*target, -&dp);
                    emit(*pred, dp);
                }
                Op::Sum(parts) => {
                    for p in parts {
                        emit(*p, g.clone());
                    }
                }
            }
        }
        Gradients { grads }
    }
}
