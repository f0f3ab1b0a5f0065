//! Reverse-mode differentiation over row-major `f64` matrices.
//!
//! Each forward operation appends a node holding its value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates parameter gradients. Parameter
//! leaves borrow their value from the [`ParamStore`], so building a tape never
//! copies weights.

use ndarray::{concatenate, s, Axis};

use super::params::{Gradients, ParamId, ParamStore};
use super::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Mat),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// Sum of `log softmax(row)[target]` over rows that have a target.
    LogSoftmaxPick {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Mat,
    },
}

struct Node {
    value: Option<Mat>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(value), _) => value,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor))
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        let value = self.value(a) * &c;
        self.push(value, Op::MulConst(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// Row-wise layer normalization with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax. With `causal`, row `i` only sees columns `0..=i + offset`
    /// where `offset = ncols - nrows`.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let mut value = self.value(x).clone();
        let offset = value.ncols() as isize - value.nrows() as isize;
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            let visible = if causal {
                ((i as isize + offset + 1).max(0) as usize).min(row.len())
            } else {
                row.len()
            };
            let max = row
                .iter()
                .take(visible)
                .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if j < visible {
                    *v = (*v - max).exp();
                    sum += *v;
                } else {
                    *v = 0.0;
                }
            }
            row.mapv_inplace(|v| v / sum);
        }
        self.push(value, Op::Softmax(x))
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let value = t.select(Axis(0), ids);
        self.push(value, Op::Gather(table, ids.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("row counts agree");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("column counts agree");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    /// `Σ_i log softmax(logits_i)[targets_i]` as a `1 × 1` value.
    pub fn log_softmax_pick(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let probs = softmax_rows(self.value(logits));
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.nrows());
        let mut total = 0.0;
        for (i, target) in targets.iter().enumerate() {
            if let Some(t) = *target {
                total += log_softmax_at(lv.row(i).as_slice().expect("contiguous"), t);
            }
        }
        self.push(
            Mat::from_elem((1, 1), total),
            Op::LogSoftmaxPick {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Back-propagates from the `1 × 1` node `loss`, scaled by `seed`, and
    /// adds parameter gradients into `grads`.
    pub fn backward(&self, loss: Var, seed: f64, grads: &mut Gradients) {
        let mut adj: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        adj.resize_with(self.nodes.len(), || None);
        adj[loss.0] = Some(Mat::from_elem((1, 1), seed));

        fn acc(adj: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut adj[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => *grads.get_mut(*id) += &g,
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut adj, *row, gr);
                    acc(&mut adj, *a, g);
                }
                Op::Scale(a, f) => acc(&mut adj, *a, g * *f),
                Op::MulConst(a, c) => acc(&mut adj, *a, g * c),
                Op::Relu(a) => {
                    let out = node.value.as_ref().expect("relu value");
                    let mut ga = g;
                    ga.zip_mut_with(out, |gv, &o| {
                        if o <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    acc(&mut adj, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gain_v = self.value(*gain);
                    acc(&mut adj, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(
                        &mut adj,
                        *gain,
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let dxhat = &g * gain_v;
                    let n = xhat.ncols() as f64;
                    let mut gx = Mat::zeros(xhat.raw_dim());
                    for i in 0..xhat.nrows() {
                        let dh = dxhat.row(i);
                        let h = xhat.row(i);
                        let sum_dh = dh.sum();
                        let sum_dh_h = dh.dot(&h);
                        let k = inv_std[i] / n;
                        for j in 0..xhat.ncols() {
                            gx[[i, j]] = k * (n * dh[j] - sum_dh - h[j] * sum_dh_h);
                        }
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::Softmax(x) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let mut gx = &g * y;
                    for (mut row, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yrow, |v, &p| *v -= p * dot);
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::Gather(table, ids) => {
                    let shape = self.value(*table).raw_dim();
                    let mut gt = Mat::zeros(shape);
                    for (row, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &g.row(row);
                    }
                    acc(&mut adj, *table, gt);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut adj, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut adj, p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(&mut adj, p, g.slice(s![offset..offset + h, ..]).to_owned());
                        offset += h;
                    }
                }
                Op::LogSoftmaxPick {
                    logits,
                    targets,
                    probs,
                } => {
                    let seed = g[[0, 0]];
                    let mut gl = Mat::zeros(probs.raw_dim());
                    for (i, target) in targets.iter().enumerate() {
                        if let Some(t) = *target {
                            let mut row = gl.row_mut(i);
                            row.assign(&probs.row(i));
                            row[t] -= 1.0;
                            row.mapv_inplace(|v| -v * seed);
                        }
                    }
                    acc(&mut adj, *logits, gl);
                }
            }
        }
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// `log softmax(row)` as a vector.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[t] - lse
}
