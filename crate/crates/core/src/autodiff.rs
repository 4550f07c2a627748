//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the ids of its inputs, so node order is already a topological order.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node that depends on a parameter leaf.
//!
//! Shape mismatches inside the graph are programming errors and panic; the
//! model layer validates user-facing inputs before building graphs.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{invalid, Result};

pub type Tensor = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a + b` with `b` a `1 x cols` row broadcast over `a`.
    AddRow(Var, Var),
    /// `a * b` elementwise with `b` a broadcast row.
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    /// Row softmax; blocked entries get zero weight, fully blocked rows are zero.
    Softmax(Var),
    /// Row standardization without affine terms; keeps `1 / std` per row.
    Normalize(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    /// `sin`/`cos` features of every column at the given angular frequencies.
    Sine(Var, Rc<Vec<f64>>),
    Sum(Var),
    SigmoidFocal {
        logits: Var,
        targets: Rc<Tensor>,
        alpha: f64,
        gamma: f64,
    },
    L1(Var, Rc<Tensor>),
    GiouLoss(Var, Rc<Tensor>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where no parameter is upstream.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise sigmoid focal loss and its derivative w.r.t. the logit.
pub fn focal_term(x: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    if positive {
        let log_p = -softplus(-x);
        let q = 1.0 - p;
        let w = q.powf(gamma);
        (-alpha * w * log_p, -alpha * w * (q - gamma * p * log_p))
    } else {
        let log_q = -softplus(x);
        let w = p.powf(gamma);
        (
            -(1.0 - alpha) * w * log_q,
            (1.0 - alpha) * w * (p - gamma * (1.0 - p) * log_q),
        )
    }
}

/// `1 - GIoU` for center-form boxes and its gradient w.r.t. `pred`.
pub fn giou_loss_term(pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4]) {
    let corners = |b: [f64; 4]| {
        [
            b[0] - b[2] / 2.0,
            b[1] - b[3] / 2.0,
            b[0] + b[2] / 2.0,
            b[1] + b[3] / 2.0,
        ]
    };
    let [x0, y0, x1, y1] = corners(pred);
    let [tx0, ty0, tx1, ty1] = corners(target);

    let iw_raw = x1.min(tx1) - x0.max(tx0);
    let ih_raw = y1.min(ty1) - y0.max(ty0);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let (pw, ph) = (x1 - x0, y1 - y0);
    let area_p = pw * ph;
    let area_t = (tx1 - tx0) * (ty1 - ty0);
    let union = area_p + area_t - inter;
    let ew = x1.max(tx1) - x0.min(tx0);
    let eh = y1.max(ty1) - y0.min(ty0);
    let hull = ew * eh;
    let loss = 2.0 - inter / union - union / hull;

    let d_inter = -1.0 / union - inter / (union * union) + 1.0 / hull;
    let d_area = inter / (union * union) - 1.0 / hull;
    let d_hull = union / (hull * hull);

    let ind = |c: bool| if c { 1.0 } else { 0.0 };
    // d iw / d corners, zero when the boxes do not overlap
    let (diw_x0, diw_x1) = if iw_raw > 0.0 {
        (-ind(x0 > tx0), ind(x1 < tx1))
    } else {
        (0.0, 0.0)
    };
    let (dih_y0, dih_y1) = if ih_raw > 0.0 {
        (-ind(y0 > ty0), ind(y1 < ty1))
    } else {
        (0.0, 0.0)
    };
    let (dew_x0, dew_x1) = (-ind(x0 <= tx0), ind(x1 >= tx1));
    let (deh_y0, deh_y1) = (-ind(y0 <= ty0), ind(y1 >= ty1));

    let g_x0 = d_inter * ih * diw_x0 + d_area * (-ph) + d_hull * eh * dew_x0;
    let g_x1 = d_inter * ih * diw_x1 + d_area * ph + d_hull * eh * dew_x1;
    let g_y0 = d_inter * iw * dih_y0 + d_area * (-pw) + d_hull * ew * deh_y0;
    let g_y1 = d_inter * iw * dih_y1 + d_area * pw + d_hull * ew * deh_y1;

    (
        loss,
        [
            g_x0 + g_x1,
            g_y0 + g_y1,
            (g_x1 - g_x0) / 2.0,
            (g_y1 - g_y0) / 2.0,
        ],
    )
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::from_elem((1, 1), v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.dim(), (1, 1), "not a scalar node");
        t[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul {:?} x {:?}", va.dim(), vb.dim());
        let out = va.dot(vb);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.ncols(), "matmul_t {:?} x {:?}^T", va.dim(), vb.dim());
        let out = va.dot(&vb.t());
        self.push(out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert!(vr.nrows() == 1 && vr.ncols() == va.ncols(), "add_row shape mismatch");
        let out = va + vr;
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert!(vr.nrows() == 1 && vr.ncols() == va.ncols(), "mul_row shape mismatch");
        let out = va * vr;
        self.push(out, Op::MulRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(out, Op::Scale(a, k), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// Row softmax. `blocked` is row-major with the input's shape.
    pub fn softmax(&mut self, a: Var, blocked: Option<Rc<Vec<bool>>>) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        if let Some(m) = &blocked {
            assert_eq!(m.len(), rows * cols, "softmax mask shape mismatch");
        }
        let mut out = Tensor::zeros((rows, cols));
        for i in 0..rows {
            let open = |j: usize| blocked.as_ref().is_none_or(|m| !m[i * cols + j]);
            let mut max = f64::NEG_INFINITY;
            for j in (0..cols).filter(|&j| open(j)) {
                max = max.max(x[[i, j]]);
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for j in (0..cols).filter(|&j| open(j)) {
                let e = (x[[i, j]] - max).exp();
                out[[i, j]] = e;
                sum += e;
            }
            out.row_mut(i).mapv_inplace(|e| e / sum);
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    /// `(x - mean) / sqrt(var + eps)` per row.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let cols = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / cols;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / cols;
            let r = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * r);
            inv_std.push(r);
        }
        self.push(out, Op::Normalize(a, inv_std), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let x = self.value(a);
        let out = x.select(Axis(0), &idx);
        self.push(out, Op::Gather(a, idx), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start, end), &[a])
    }

    /// For each input column `c` and frequency `w_k`, emits `sin(w_k x_c)` and
    /// `cos(w_k x_c)` in that order, columns grouped by input column.
    pub fn sine(&mut self, a: Var, freqs: Rc<Vec<f64>>) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        let nf = freqs.len();
        let mut out = Tensor::zeros((rows, cols * 2 * nf));
        for i in 0..rows {
            for c in 0..cols {
                for (k, w) in freqs.iter().enumerate() {
                    let (s, co) = (w * x[[i, c]]).sin_cos();
                    out[[i, c * 2 * nf + 2 * k]] = s;
                    out[[i, c * 2 * nf + 2 * k + 1]] = co;
                }
            }
        }
        self.push(out, Op::Sine(a, freqs), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    /// Sum of elementwise sigmoid focal losses against 0/1 `targets`.
    pub fn sigmoid_focal(&mut self, logits: Var, targets: Tensor, alpha: f64, gamma: f64) -> Var {
        let x = self.value(logits);
        assert_eq!(x.dim(), targets.dim(), "focal target shape mismatch");
        let mut total = 0.0;
        Zip::from(x).and(&targets).for_each(|&x, &t| {
            total += focal_term(x, t > 0.5, alpha, gamma).0;
        });
        let op = Op::SigmoidFocal {
            logits,
            targets: Rc::new(targets),
            alpha,
            gamma,
        };
        self.push(Tensor::from_elem((1, 1), total), op, &[logits])
    }

    /// Sum of absolute differences to a fixed target.
    pub fn l1_to(&mut self, a: Var, target: Tensor) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), target.dim(), "l1 target shape mismatch");
        let total: f64 = Zip::from(x)
            .and(&target)
            .fold(0.0, |acc, &p, &t| acc + (p - t).abs());
        self.push(
            Tensor::from_elem((1, 1), total),
            Op::L1(a, Rc::new(target)),
            &[a],
        )
    }

    /// Sum over rows of `1 - GIoU` for center-form boxes against fixed targets.
    pub fn giou_loss_to(&mut self, a: Var, target: Tensor) -> Var {
        let x = self.value(a);
        assert!(x.ncols() == 4 && x.dim() == target.dim(), "giou shape mismatch");
        let total: f64 = x
            .rows()
            .into_iter()
            .zip(target.rows())
            .map(|(p, t)| giou_loss_term([p[0], p[1], p[2], p[3]], [t[0], t[1], t[2], t[3]]).0)
            .sum();
        self.push(
            Tensor::from_elem((1, 1), total),
            Op::GiouLoss(a, Rc::new(target)),
            &[a],
        )
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(invalid(format!("backward from non-scalar node of shape {shape:?}")));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones((1, 1)));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, g: Tensor| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(*a, dy.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    acc(*b, self.value(*a).t().dot(dy));
                }
            }
            Op::MatMulT(a, b) => {
                if self.wants(*a) {
                    acc(*a, dy.dot(self.value(*b)));
                }
                if self.wants(*b) {
                    acc(*b, dy.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::AddRow(a, r) => {
                acc(*a, dy.clone());
                if self.wants(*r) {
                    acc(*r, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, r) => {
                let (va, vr) = (self.value(*a), self.value(*r));
                if self.wants(*a) {
                    acc(*a, dy * vr);
                }
                if self.wants(*r) {
                    acc(*r, (dy * va).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    acc(*a, dy * vb);
                }
                if self.wants(*b) {
                    acc(*b, dy * va);
                }
            }
            Op::Scale(a, k) => acc(*a, dy * *k),
            Op::Relu(a) => {
                let mut g = dy.clone();
                Zip::from(&mut g)
                    .and(self.value(*a))
                    .for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0;
                        }
                    });
                acc(*a, g);
            }
            Op::Sigmoid(a) => {
                let mut g = dy.clone();
                Zip::from(&mut g)
                    .and(&node.value)
                    .for_each(|g, &y| *g *= y * (1.0 - y));
                acc(*a, g);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut g = Tensor::zeros(y.dim());
                for ((mut gr, yr), dr) in g.rows_mut().into_iter().zip(y.rows()).zip(dy.rows()) {
                    let dot: f64 = yr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    Zip::from(&mut gr)
                        .and(&yr)
                        .and(&dr)
                        .for_each(|g, &y, &d| *g = y * (d - dot));
                }
                acc(*a, g);
            }
            Op::Normalize(a, inv_std) => {
                let xhat = &node.value;
                let cols = xhat.ncols() as f64;
                let mut g = Tensor::zeros(xhat.dim());
                for (i, ((mut gr, xr), dr)) in g
                    .rows_mut()
                    .into_iter()
                    .zip(xhat.rows())
                    .zip(dy.rows())
                    .enumerate()
                {
                    let mean_d = dr.sum() / cols;
                    let mean_dx: f64 = dr.iter().zip(xr.iter()).map(|(d, x)| d * x).sum::<f64>() / cols;
                    let r = inv_std[i];
                    Zip::from(&mut gr)
                        .and(&xr)
                        .and(&dr)
                        .for_each(|g, &x, &d| *g = r * (d - mean_d - x * mean_dx));
                }
                acc(*a, g);
            }
            Op::Gather(a, idx) => {
                let mut g = Tensor::zeros(self.shape(*a));
                for (k, &i) in idx.iter().enumerate() {
                    let mut row = g.row_mut(i);
                    row += &dy.row(k);
                }
                acc(*a, g);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.shape(p).0;
                    if self.wants(p) {
                        acc(p, dy.slice(s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.shape(p).1;
                    if self.wants(p) {
                        acc(p, dy.slice(s![.., start..start + n]).to_owned());
                    }
                    start += n;
                }
            }
            Op::SliceRows(a, start, end) => {
                let mut g = Tensor::zeros(self.shape(*a));
                g.slice_mut(s![*start..*end, ..]).assign(dy);
                acc(*a, g);
            }
            Op::Sine(a, freqs) => {
                let x = self.value(*a);
                let nf = freqs.len();
                let mut g = Tensor::zeros(x.dim());
                for ((i, c), gv) in g.indexed_iter_mut() {
                    let mut total = 0.0;
                    for (k, w) in freqs.iter().enumerate() {
                        let (s, co) = (w * x[[i, c]]).sin_cos();
                        let base = c * 2 * nf + 2 * k;
                        total += w * (co * dy[[i, base]] - s * dy[[i, base + 1]]);
                    }
                    *gv = total;
                }
                acc(*a, g);
            }
            Op::Sum(a) => {
                let d = dy[[0, 0]];
                acc(*a, Tensor::from_elem(self.shape(*a), d));
            }
            Op::SigmoidFocal {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let d = dy[[0, 0]];
                let mut g = Tensor::zeros(self.shape(*logits));
                Zip::from(&mut g)
                    .and(self.value(*logits))
                    .and(targets.as_ref())
                    .for_each(|g, &x, &t| *g = d * focal_term(x, t > 0.5, *alpha, *gamma).1);
                acc(*logits, g);
            }
            Op::L1(a, target) => {
                let d = dy[[0, 0]];
                let mut g = Tensor::zeros(self.shape(*a));
                Zip::from(&mut g)
                    .and(self.value(*a))
                    .and(target.as_ref())
                    .for_each(|g, &p, &t| {
                        *g = if p > t {
                            d
                        } else if p < t {
                            -d
                        } else {
                            0.0
                        }
                    });
                acc(*a, g);
            }
            Op::GiouLoss(a, target) => {
                let d = dy[[0, 0]];
                let x = self.value(*a);
                let mut g = Tensor::zeros(x.dim());
                for (i, (p, t)) in x.rows().into_iter().zip(target.rows()).enumerate() {
                    let (_, gr) =
                        giou_loss_term([p[0], p[1], p[2], p[3]], [t[0], t[1], t[2], t[3]]);
                    for k in 0..4 {
                        g[[i, k]] = d * gr[k];
                    }
                }
                acc(*a, g);
            }
        }
    }
}
