//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value. `backward`
//! walks the nodes once in reverse order of recording and accumulates
//! adjoints; parameter leaves deposit theirs into a [`Gradients`] set.

use std::collections::HashMap;

use rand::Rng;

use super::kernels;
use super::{Gradients, NumericError, ParamId, ParamSet, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    GatherRows { table: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    NllRows { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    SqDist(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. One tape serves one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> NumericError {
    NumericError::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter leaf. Repeated calls for the same id return the same node.
    /// Non-trainable parameters behave as constants.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = params.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_named(&mut self, params: &ParamSet, name: &str) -> Result<Var, NumericError> {
        let id = params.id(name)?;
        Ok(self.param(params, id))
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), ng))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericError> {
        if self.value(a).len() != self.value(b).len() {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, data), op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(a);
        self.push(Tensor::from_parts(shape, data), Op::Scale(a, c), ng)
    }

    /// Add a bias vector (length = cols) to every row.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var, NumericError> {
        let cols = self.value(a).cols();
        if self.value(bias).len() != cols {
            return Err(shape_err("add_row_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(cols) {
            row.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddRowBias(a, bias), ng))
    }

    /// Add a constant tensor (e.g. an additive attention mask).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var, NumericError> {
        if self.value(a).len() != c.len() {
            return Err(shape_err("add_const", self.shape(a), c.shape()));
        }
        let data = self.value(a).data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddConst(a), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(a);
        self.push(Tensor::from_parts(shape, data), op, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu, Op::Gelu(a))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut data = t.data().to_vec();
        data.chunks_mut(cols).for_each(kernels::softmax_in_place);
        let shape = t.shape().to_vec();
        let ng = self.needs(a);
        self.push(Tensor::from_parts(shape, data), Op::SoftmaxRows(a), ng)
    }

    /// Layer normalization over the last axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericError> {
        let cols = self.value(x).cols();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (xhat, inv) = kernels::layer_norm_rows(self.value(x).data(), cols, eps);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for row in out.chunks_mut(cols) {
            for ((o, gv), bv) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, gain, bias, xhat, inv }, ng))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, NumericError> {
        check_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> =
            (0..self.value(x).len()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Dropout { x, mask }, ng))
    }

    /// Select rows of a 2-D table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var, NumericError> {
        let (rows, cols) = self.dims2(table);
        if idx.is_empty() {
            return Err(NumericError::Shape("gather_rows: empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(NumericError::Index { index: bad, len: rows });
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(t.row_slice(i));
        }
        let ng = self.needs(table);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), cols], data),
            Op::GatherRows { table, idx: idx.to_vec() },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.shape(parts[0]), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::from_parts(vec![rows, cols], data), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericError> {
        let (rows, cols) = self.dims2(x);
        if len == 0 || start + len > rows {
            return Err(NumericError::Shape(format!("slice_rows {start}+{len} of {rows}")));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![len, cols], data), Op::SliceRows { x, start }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericError> {
        let (rows, cols) = self.dims2(x);
        if len == 0 || start + len > cols {
            return Err(NumericError::Shape(format!("slice_cols {start}+{len} of {cols}")));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![rows, len], data), Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(NumericError::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::from_parts(vec![rows, total], data), Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Column-wise mean over rows, producing `1×cols`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = self.dims2(x);
        let mut data = vec![0.0; cols];
        for row in self.value(x).data().chunks(cols) {
            data.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        data.iter_mut().for_each(|v| *v /= rows as f64);
        let ng = self.needs(x);
        self.push(Tensor::from_parts(vec![1, cols], data), Op::MeanRows(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Summed negative log-likelihood of `targets[r]` under a softmax of
    /// each logit row.
    pub fn nll_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericError> {
        let (rows, cols) = self.dims2(logits);
        if rows != targets.len() {
            return Err(NumericError::Shape(format!("nll_rows: {rows} rows, {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(NumericError::Index { index: bad, len: cols });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(cols).enumerate() {
            loss += kernels::log_sum_exp(row) - row[targets[r]];
            kernels::softmax_in_place(row);
        }
        let ng = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::NllRows { logits, targets: targets.to_vec(), probs }, ng))
    }

    /// `Σ (a − b)²`
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        if self.value(a).len() != self.value(b).len() {
            return Err(shape_err("sq_dist", self.shape(a), self.shape(b)));
        }
        let s = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(s), Op::SqDist(a, b), ng))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every
    /// trainable parameter reached; unreached parameters get none.
    pub fn backward(&self, loss: Var, params: &ParamSet) -> Result<Gradients, NumericError> {
        if self.value(loss).len() != 1 {
            return Err(NumericError::Shape(format!("backward on non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::empty(params.len());

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.set(*id, g.to_vec()),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.value(*b).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    let d = kernels::matmul_nt(g, val(*b), m, n, k);
                    ga.iter_mut().zip(d).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_tn_acc(gb, val(*a), g, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.value(*b).rows();
                if let Some(ga) = self.acc(grads, *a) {
                    let d = kernels::matmul(g, val(*b), m, n, k);
                    ga.iter_mut().zip(d).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_tn_acc(gb, g, val(*a), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *x += gy * bv;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, gy), av) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *x += gy * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * c);
                }
            }
            Op::AddRowBias(a, bias) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let cols = self.value(*a).cols();
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddConst(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), yv) in ga.iter_mut().zip(g).zip(y) {
                        *x += gy * yv * (1.0 - yv);
                    }
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), yv) in ga.iter_mut().zip(g).zip(y) {
                        *x += gy * (1.0 - yv * yv);
                    }
                }
            }
            Op::Gelu(a) => {
                let xin = val(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), xv) in ga.iter_mut().zip(g).zip(xin) {
                        *x += gy * kernels::gelu_grad(*xv);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let cols = node.value.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, yr), gar) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let s: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for ((o, gv), yv) in gar.iter_mut().zip(gr).zip(yr) {
                            *o += yv * (gv - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv } => {
                let cols = node.value.cols();
                let gv = val(*gain);
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(gg) = self.acc(grads, *gain) {
                    for (row, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((a, b), c) in gg.iter_mut().zip(row).zip(xr) {
                            *a += b * c;
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let nf = cols as f64;
                    for (r, ((gr, xr), gxr)) in
                        g.chunks(cols).zip(xhat.chunks(cols)).zip(gx.chunks_mut(cols)).enumerate()
                    {
                        let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for ((o, d), xh) in gxr.iter_mut().zip(&dxhat).zip(xr) {
                            *o += inv[r] / nf * (nf * d - s1 - xh * s2);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, gy), m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gy * m;
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let cols = node.value.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (row, &i) in g.chunks(cols).zip(idx) {
                        gt[i * cols..(i + 1) * cols].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(a, b)| *a += b);
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    gx[start * cols..start * cols + g.len()].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::SliceCols { x, start } => {
                let len = node.value.cols();
                let cols = self.value(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, row) in g.chunks(len).enumerate() {
                        gx[r * cols + start..r * cols + start + len]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for (r, row) in gp.chunks_mut(w).enumerate() {
                            row.iter_mut()
                                .zip(&g[r * total + off..r * total + off + w])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    off += w;
                }
            }
            Op::MeanRows(x) => {
                let (rows, cols) = self.dims2(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for row in gx.chunks_mut(cols) {
                        row.iter_mut().zip(g).for_each(|(a, b)| *a += b / rows as f64);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::NllRows { logits, targets, probs } => {
                let cols = self.value(*logits).cols();
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, (gr, pr)) in gl.chunks_mut(cols).zip(probs.chunks(cols)).enumerate() {
                        gr.iter_mut().zip(pr).for_each(|(a, p)| *a += g[0] * p);
                        gr[targets[r]] -= g[0];
                    }
                }
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, x), y) in ga.iter_mut().zip(av).zip(bv) {
                        *o += 2.0 * g[0] * (x - y);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, x), y) in gb.iter_mut().zip(av).zip(bv) {
                        *o -= 2.0 * g[0] * (x - y);
                    }
                }
            }
        }
    }
}

pub(crate) fn check_rate(rate: f64) -> Result<(), NumericError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NumericError::Parameter(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}
