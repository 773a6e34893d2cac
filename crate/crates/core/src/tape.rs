//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Every forward computation in the model is recorded on a [`Tape`]. Each
//! node stores its value and the operation that produced it; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients for every parameter
//! leaf. Operations are coarse (layer norm, row normalization, the Gaussian
//! position kernel, ...) with hand-written adjoints, which keeps tapes short
//! and the finite-difference check meaningful.

use ndarray::{s, Array2, ArrayView2, Axis, CowArray, Ix2, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    RowScale(Var, Vec<f64>),
    MulConst(Var, Array2<f64>),
    Exp(Var),
    Gelu(Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    RowMaxShift {
        x: Var,
        argmax: Vec<Option<usize>>,
    },
    RowNormalize {
        w: Var,
        denom: Vec<f64>,
    },
    ColNormalize {
        w: Var,
        denom: Vec<f64>,
    },
    Gaussian {
        p: Var,
        q: Vec<f64>,
        h: f64,
    },
    MaskedSoftmax(Var),
    DepthwiseConv {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CrossEntropySum {
        logits: Var,
        labels: Vec<u8>,
        valid: usize,
        probs: Array2<f64>,
    },
}

struct Node<'a> {
    value: CowArray<'a, f64, Ix2>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph. Parameter leaves may borrow their values.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: CowArray::from(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    pub fn constant_view(&mut self, value: ArrayView2<'a, f64>) -> Var {
        self.nodes.push(Node {
            value: CowArray::from(value),
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf; `index` is the position of the tensor in its store.
    pub fn param(&mut self, index: usize, value: &'a Array2<f64>) -> Var {
        self.nodes.push(Node {
            value: CowArray::from(value.view()),
            op: Op::Param(index),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        self.nodes[v.0].value.view()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.value(a) + &self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.value(a) - &self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.value(a) * &self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 x c` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let value = &self.value(x) + &self.value(bias);
        self.push(value, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = &self.value(a) * k;
        self.push(value, Op::Scale(a, k), &[a])
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn row_scale(&mut self, x: Var, factors: Vec<f64>) -> Var {
        let mut value = self.value(x).to_owned();
        for (mut row, &f) in value.rows_mut().into_iter().zip(&factors) {
            row *= f;
        }
        self.push(value, Op::RowScale(x, factors), &[x])
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, x: Var, c: Array2<f64>) -> Var {
        let value = &self.value(x) * &c;
        self.push(value, Op::MulConst(x, c), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::exp);
        self.push(value, Op::Exp(x), &[x])
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * sigmoid(v));
        self.push(value, Op::Silu(x), &[x])
    }

    /// Row-wise layer normalization with affine `1 x c` scale and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = &(&xhat * &self.value(gamma)) + &self.value(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// `x_ij - max_{k < valid_cols} x_ik`. Rows are shifted by zero when no
    /// column is valid.
    pub fn row_max_shift(&mut self, x: Var, valid_cols: usize) -> Var {
        let mut value = self.value(x).to_owned();
        let mut argmax = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let best = row.slice(s![..valid_cols]).iter().enumerate().fold(
                None,
                |best: Option<(usize, f64)>, (k, &v)| match best {
                    Some((_, b)) if b >= v => best,
                    _ => Some((k, v)),
                },
            );
            if let Some((_, max)) = best {
                row -= max;
            }
            argmax.push(best.map(|(k, _)| k));
        }
        self.push(value, Op::RowMaxShift { x, argmax }, &[x])
    }

    /// `w_ij / (sum_k w_ik + eps)`.
    pub fn row_normalize(&mut self, w: Var, eps: f64) -> Var {
        let wv = self.value(w);
        let denom: Vec<f64> = wv.rows().into_iter().map(|r| r.sum() + eps).collect();
        let mut value = wv.to_owned();
        for (mut row, &d) in value.rows_mut().into_iter().zip(&denom) {
            row /= d;
        }
        self.push(value, Op::RowNormalize { w, denom }, &[w])
    }

    /// `w_ij / (sum_k w_kj + eps)`.
    pub fn col_normalize(&mut self, w: Var, eps: f64) -> Var {
        let wv = self.value(w);
        let denom: Vec<f64> = wv.columns().into_iter().map(|c| c.sum() + eps).collect();
        let mut value = wv.to_owned();
        for (mut col, &d) in value.columns_mut().into_iter().zip(&denom) {
            col /= d;
        }
        self.push(value, Op::ColNormalize { w, denom }, &[w])
    }

    /// `exp(-(p_i - q_j)^2 / (2 h^2))` for a column of positions `p` (`m x 1`).
    pub fn gaussian(&mut self, p: Var, q: Vec<f64>, h: f64) -> Var {
        let pv = self.value(p);
        let value = Array2::from_shape_fn((pv.nrows(), q.len()), |(i, j)| {
            let d = pv[[i, 0]] - q[j];
            (-d * d / (2.0 * h * h)).exp()
        });
        self.push(value, Op::Gaussian { p, q, h }, &[p])
    }

    /// Row softmax restricted to the first `valid_cols` columns; the rest are 0.
    pub fn masked_softmax(&mut self, x: Var, valid_cols: usize) -> Var {
        let mut value = Array2::zeros(self.shape(x));
        for (src, mut dst) in self.value(x).rows().into_iter().zip(value.rows_mut()) {
            if valid_cols == 0 {
                continue;
            }
            let keys = src.slice(s![..valid_cols]);
            let max = keys.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for (k, &v) in keys.iter().enumerate() {
                let e = (v - max).exp();
                dst[k] = e;
                total += e;
            }
            dst.slice_mut(s![..valid_cols]).mapv_inplace(|e| e / total);
        }
        self.push(value, Op::MaskedSoftmax(x), &[x])
    }

    /// Per-channel 1-D convolution along rows, same-length zero padding.
    /// `kernel` is `k x c` (odd `k`), `bias` is `1 x c`.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let kv = self.value(kernel);
        let bv = self.value(bias);
        let (len, channels) = xv.dim();
        let half = kv.nrows() / 2;
        let mut value = Array2::zeros((len, channels));
        for i in 0..len {
            for c in 0..channels {
                let mut acc = bv[[0, c]];
                for k in 0..kv.nrows() {
                    if let Some(src) = (i + k).checked_sub(half).filter(|&s| s < len) {
                        acc += kv[[k, c]] * xv[[src, c]];
                    }
                }
                value[[i, c]] = acc;
            }
        }
        self.push(
            value,
            Op::DepthwiseConv { x, kernel, bias },
            &[x, kernel, bias],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + width]).to_owned();
        self.push(value, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&v| self.value(v)).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Sum over the first `valid` rows of `-log softmax(logits_i)[labels_i]`, as a `1 x 1`.
    pub fn cross_entropy_sum(&mut self, logits: Var, labels: Vec<u8>, valid: usize) -> Var {
        let lv = self.value(logits);
        let mut probs = Array2::zeros(lv.dim());
        let mut total = 0.0;
        for i in 0..valid {
            let row = lv.row(i);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (c, &v) in row.iter().enumerate() {
                probs[[i, c]] = (v - lse).exp();
            }
            total += lse - row[labels[i] as usize];
        }
        let value = Array2::from_elem((1, 1), total);
        self.push(
            value,
            Op::CrossEntropySum {
                logits,
                labels,
                valid,
                probs,
            },
            &[logits],
        )
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf,
    /// indexed by the store index passed to [`Tape::param`].
    pub fn backward(&self, loss: Var, n_params: usize) -> Vec<Option<Array2<f64>>> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut params = vec![None; n_params];

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let mut acc = |v: Var, delta: Array2<f64>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &delta,
                    slot => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(i) => {
                    params[*i] = Some(match params[*i].take() {
                        Some(existing) => existing + &g,
                        None => g,
                    });
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if self.nodes[a.0].requires_grad {
                        acc(*a, g.dot(&bv.t()));
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, av.t().dot(&g));
                    }
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * &self.value(*b));
                    acc(*b, &g * &self.value(*a));
                }
                Op::AddBias(x, bias) => {
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*x, g);
                }
                Op::Scale(a, k) => acc(*a, g * *k),
                Op::RowScale(x, factors) => {
                    let mut d = g;
                    for (mut row, &f) in d.rows_mut().into_iter().zip(factors) {
                        row *= f;
                    }
                    acc(*x, d);
                }
                Op::MulConst(x, c) => acc(*x, g * c),
                Op::Exp(x) => acc(*x, g * &node.value),
                Op::Gelu(x) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&self.value(*x)).for_each(|d, &v| {
                        let inner = GELU_C * (v + GELU_A * v * v * v);
                        let t = inner.tanh();
                        let dinner = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *d *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner;
                    });
                    acc(*x, d);
                }
                Op::Silu(x) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&self.value(*x)).for_each(|d, &v| {
                        let s = sigmoid(v);
                        *d *= s * (1.0 + v * (1.0 - s));
                    });
                    acc(*x, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    if self.nodes[x.0].requires_grad {
                        let dxhat = &g * &self.value(*gamma);
                        let n = xhat.ncols() as f64;
                        let mut dx = Array2::zeros(g.dim());
                        for i in 0..g.nrows() {
                            let dr = dxhat.row(i);
                            let xr = xhat.row(i);
                            let sum_d = dr.sum();
                            let sum_dx = dr.dot(&xr);
                            for j in 0..g.ncols() {
                                dx[[i, j]] = inv_std[i] / n * (n * dr[j] - sum_d - xr[j] * sum_dx);
                            }
                        }
                        acc(*x, dx);
                    }
                }
                Op::RowMaxShift { x, argmax } => {
                    let mut d = g.clone();
                    for (i, k) in argmax.iter().enumerate() {
                        if let Some(k) = k {
                            d[[i, *k]] -= g.row(i).sum();
                        }
                    }
                    acc(*x, d);
                }
                Op::RowNormalize { w, denom } => {
                    let wv = self.value(*w);
                    let mut d = Array2::zeros(g.dim());
                    for i in 0..g.nrows() {
                        let dot = g.row(i).dot(&wv.row(i));
                        let di = denom[i];
                        for k in 0..g.ncols() {
                            d[[i, k]] = g[[i, k]] / di - dot / (di * di);
                        }
                    }
                    acc(*w, d);
                }
                Op::ColNormalize { w, denom } => {
                    let wv = self.value(*w);
                    let mut d = Array2::zeros(g.dim());
                    for j in 0..g.ncols() {
                        let dot = g.column(j).dot(&wv.column(j));
                        let dj = denom[j];
                        for k in 0..g.nrows() {
                            d[[k, j]] = g[[k, j]] / dj - dot / (dj * dj);
                        }
                    }
                    acc(*w, d);
                }
                Op::Gaussian { p, q, h } => {
                    let pv = self.value(*p);
                    let sv = &node.value;
                    let mut d = Array2::zeros((pv.nrows(), 1));
                    for i in 0..pv.nrows() {
                        let mut total = 0.0;
                        for (j, &qj) in q.iter().enumerate() {
                            total -= g[[i, j]] * sv[[i, j]] * (pv[[i, 0]] - qj) / (h * h);
                        }
                        d[[i, 0]] = total;
                    }
                    acc(*p, d);
                }
                Op::MaskedSoftmax(x) => {
                    let y = &node.value;
                    let mut d = &g * y;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let s = drow.sum();
                        drow.scaled_add(-s, &yrow);
                    }
                    acc(*x, d);
                }
                Op::DepthwiseConv { x, kernel, bias } => {
                    let xv = self.value(*x);
                    let kv = self.value(*kernel);
                    let (len, channels) = xv.dim();
                    let half = kv.nrows() / 2;
                    let mut dx = Array2::zeros(xv.dim());
                    let mut dk = Array2::zeros(kv.dim());
                    for i in 0..len {
                        for k in 0..kv.nrows() {
                            let Some(src) = (i + k).checked_sub(half).filter(|&s| s < len) else {
                                continue;
                            };
                            for c in 0..channels {
                                dx[[src, c]] += g[[i, c]] * kv[[k, c]];
                                dk[[k, c]] += g[[i, c]] * xv[[src, c]];
                            }
                        }
                    }
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*kernel, dk);
                    acc(*x, dx);
                }
                Op::SliceCols { x, start } => {
                    let mut d = Array2::zeros(self.shape(*x));
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*x, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &part in parts {
                        let w = self.shape(part).1;
                        acc(part, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::CrossEntropySum {
                    logits,
                    labels,
                    valid,
                    probs,
                } => {
                    let upstream = g[[0, 0]];
                    let mut d = Array2::zeros(probs.dim());
                    for i in 0..*valid {
                        for c in 0..probs.ncols() {
                            let target = if labels[i] as usize == c { 1.0 } else { 0.0 };
                            d[[i, c]] = upstream * (probs[[i, c]] - target);
                        }
                    }
                    acc(*logits, d);
                }
            }
        }
        params
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
