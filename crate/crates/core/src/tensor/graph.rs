use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mm, mm_at, mm_bt, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Dropout(Var, Vec<f64>),
    Embedding(Var, Vec<usize>),
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
    SumBlocks(Var, usize),
    MaskedFill(Var, Vec<bool>),
    MulConst(Var, Vec<f64>),
    PickCols(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of tensor operations supporting reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order and [`backward`](Graph::backward) walks it in reverse.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    rng: ChaCha8Rng,
    training: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter of `store` touched by the graph, in
    /// store order.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out = vec![None; store.len()];
        for &(id, var) in &self.params {
            if let Some(g) = self.get(var) {
                out[id.index()] = Some(g.clone());
            } else {
                let [r, c] = store.value(id).shape();
                out[id.index()] = Some(Tensor::zeros(r, c));
            }
        }
        out
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let [r, c] = x.shape();
    let mut out = x.data().to_vec();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(r, c, out).expect("shape preserved")
}

impl Graph {
    pub fn new(training: bool, seed: u64) -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), rng: ChaCha8Rng::seed_from_u64(seed), training }
    }

    /// An inference graph: dropout disabled.
    pub fn inference() -> Self {
        Self::new(false, 0)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf value, optionally differentiable.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Loads a parameter onto the tape (once per graph).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(Error::dim("matmul", format!("{m}x{k} * {k2}x{n}")));
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [n, k2] = self.shape(b);
        if k != k2 {
            return Err(Error::dim("matmul_bt", format!("{m}x{k} * ({n}x{k2})^T")));
        }
        let out = mm_bt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(m, n, out)?, Op::MatMulBt(a, b), rg))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(op, self.value(a), self.value(b))?;
        let [r, c] = self.shape(a);
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(r, c, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        if self.shape(row) != [1, c] {
            return Err(Error::dim("add_row", format!("{r}x{c} + {:?}", self.shape(row))));
        }
        let rv = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..r {
            for (x, b) in data[i * c..(i + 1) * c].iter_mut().zip(&rv) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::new(r, c, data)?, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Var {
        let mut t = self.value(a).clone();
        t.scale_assign(f);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, f), rg)
    }

    /// Divides every element of `a` by the scalar `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != [1, 1] {
            return Err(Error::dim("div_scalar", format!("divisor has shape {:?}", self.shape(s))));
        }
        let d = self.value(s).item();
        let mut t = self.value(a).clone();
        t.scale_assign(1.0 / d);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::DivScalar(a, s), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let c = self.shape(*first)[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let [r, pc] = self.shape(p);
            if pc != c {
                return Err(Error::dim("concat_rows", format!("column counts {c} and {pc}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(rows, c, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let r = self.shape(*first)[0];
        let mut cols = 0;
        for &p in parts {
            let [pr, pc] = self.shape(p);
            if pr != r {
                return Err(Error::dim("concat_cols", format!("row counts {r} and {pr}")));
            }
            cols += pc;
        }
        let mut data = vec![0.0; r * cols];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let pc = t.cols();
            for i in 0..r {
                data[i * cols + off..i * cols + off + pc].copy_from_slice(t.row(i));
            }
            off += pc;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(r, cols, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        if start + len > r {
            return Err(Error::dim("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(len, c, data)?, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        if start + len > c {
            return Err(Error::dim("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(r, len, data)?, Op::SliceCols(a, start), rg))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [r, c] = x.shape();
        let mut out = x.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(r, c, out).expect("shape preserved"), Op::LogSoftmax(a), rg)
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias` (both `1 x c`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let [r, c] = self.shape(x);
        if self.shape(gain) != [1, c] || self.shape(bias) != [1, c] {
            return Err(Error::dim("layer_norm", format!("input {r}x{c}, gain {:?}", self.shape(gain))));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(Tensor::new(r, c, out)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        for v in t.data_mut() {
            *v = v.max(0.0);
        }
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        for v in t.data_mut() {
            *v = sigmoid(*v);
        }
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        for v in t.data_mut() {
            *v = v.ln();
        }
        let rg = self.rg(a);
        self.push(t, Op::Log(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        for v in t.data_mut() {
            *v = v.exp();
        }
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - p)`. Identity
    /// when not training or `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n).map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let mut t = self.value(a).clone();
        for (v, m) in t.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let rg = self.rg(a);
        self.push(t, Op::Dropout(a, mask), rg)
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let [v, d] = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::dim("embedding", format!("id {bad} outside table of {v} rows")));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::new(ids.len(), d, data)?, Op::Embedding(table, ids.to_vec()), rg))
    }

    /// Sum over rows (the length axis): `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let [r, c] = t.shape();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::row_vector(out), Op::SumRows(a), rg)
    }

    /// Sum over columns: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = (0..t.rows()).map(|i| t.row(i).iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::column(out), Op::SumCols(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums consecutive blocks of `block` rows: `(k*block) x c -> k x c`.
    pub fn sum_blocks(&mut self, a: Var, block: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        if block == 0 || r % block != 0 {
            return Err(Error::dim("sum_blocks", format!("{r} rows not divisible into blocks of {block}")));
        }
        let k = r / block;
        let t = self.value(a);
        let mut out = vec![0.0; k * c];
        for i in 0..r {
            let b = i / block;
            for (o, v) in out[b * c..(b + 1) * c].iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(k, c, out)?, Op::SumBlocks(a, block), rg))
    }

    /// Replaces entries where `mask` is true with `value`; those entries get
    /// no gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        let mut t = self.value(a).clone();
        if mask.len() != t.len() {
            return Err(Error::dim("masked_fill", format!("mask of {} for {} values", mask.len(), t.len())));
        }
        for (v, &m) in t.data_mut().iter_mut().zip(mask) {
            if m {
                *v = value;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(t, Op::MaskedFill(a, mask.to_vec()), rg))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, factor: &Tensor) -> Result<Var> {
        same_shape("mul_const", self.value(a), factor)?;
        let mut t = self.value(a).clone();
        for (v, f) in t.data_mut().iter_mut().zip(factor.data()) {
            *v *= f;
        }
        let rg = self.rg(a);
        Ok(self.push(t, Op::MulConst(a, factor.data().to_vec()), rg))
    }

    /// Picks `a[i, cols[i]]` for every row: `r x c -> r x 1`.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let [r, c] = self.shape(a);
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(Error::dim("pick_cols", format!("{} indices for {r}x{c}", cols.len())));
        }
        let t = self.value(a);
        let out = cols.iter().enumerate().map(|(i, &j)| t.get(i, j)).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::column(out), Op::PickCols(a, cols.to_vec()), rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let [gr, gc] = g.shape();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let [m, k] = val(*a).shape();
                let n = val(*b).cols();
                if self.rg(*a) {
                    let da = mm_bt(g.data(), val(*b).data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::new(m, k, da).unwrap());
                }
                if self.rg(*b) {
                    let db = mm_at(val(*a).data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, Tensor::new(k, n, db).unwrap());
                }
            }
            Op::MatMulBt(a, b) => {
                let [m, k] = val(*a).shape();
                let n = val(*b).rows();
                if self.rg(*a) {
                    let da = mm(g.data(), val(*b).data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::new(m, k, da).unwrap());
                }
                if self.rg(*b) {
                    let db = mm_at(g.data(), val(*a).data(), m, n, k);
                    self.accumulate(grads, *b, Tensor::new(n, k, db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let mut n = g.clone();
                n.scale_assign(-1.0);
                self.accumulate(grads, *b, n);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = g.data().iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(gr, gc, d).unwrap());
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(gr, gc, d).unwrap());
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    let mut d = vec![0.0; gc];
                    for i in 0..gr {
                        for (o, v) in d.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::row_vector(d));
                }
            }
            Op::Scale(a, f) => {
                let mut d = g.clone();
                d.scale_assign(*f);
                self.accumulate(grads, *a, d);
            }
            Op::DivScalar(a, s) => {
                let sv = val(*s).item();
                if self.rg(*a) {
                    let mut d = g.clone();
                    d.scale_assign(1.0 / sv);
                    self.accumulate(grads, *a, d);
                }
                if self.rg(*s) {
                    let dot: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, *s, Tensor::scalar(-dot / (sv * sv)));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let [r, c] = val(p).shape();
                    let d = g.data()[off * c..(off + r) * c].to_vec();
                    self.accumulate(grads, p, Tensor::new(r, c, d).unwrap());
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let [r, c] = val(p).shape();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(r * c);
                        for i in 0..r {
                            d.extend_from_slice(&g.row(i)[off..off + c]);
                        }
                        self.accumulate(grads, p, Tensor::new(r, c, d).unwrap());
                    }
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                let [r, c] = val(*a).shape();
                let mut d = vec![0.0; r * c];
                d[start * c..(start + gr) * c].copy_from_slice(g.data());
                self.accumulate(grads, *a, Tensor::new(r, c, d).unwrap());
            }
            Op::SliceCols(a, start) => {
                let [r, c] = val(*a).shape();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + gc].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, Tensor::new(r, c, d).unwrap());
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = vec![0.0; gr * gc];
                for i in 0..gr {
                    let (yr, grow) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(grow).map(|(p, q)| p * q).sum();
                    for j in 0..gc {
                        d[i * gc + j] = yr[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(gr, gc, d).unwrap());
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut d = vec![0.0; gr * gc];
                for i in 0..gr {
                    let (yr, grow) = (y.row(i), g.row(i));
                    let s: f64 = grow.iter().sum();
                    for j in 0..gc {
                        d[i * gc + j] = grow[j] - yr[j].exp() * s;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(gr, gc, d).unwrap());
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = val(*gain).data();
                if self.rg(*gain) {
                    let mut dg = vec![0.0; gc];
                    for i in 0..gr {
                        for j in 0..gc {
                            dg[j] += g.get(i, j) * xhat[i * gc + j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::row_vector(dg));
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; gc];
                    for i in 0..gr {
                        for (o, v) in db.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::row_vector(db));
                }
                if self.rg(*x) {
                    let n = gc as f64;
                    let mut d = vec![0.0; gr * gc];
                    for i in 0..gr {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..gc {
                            let dh = g.get(i, j) * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[i * gc + j];
                        }
                        for j in 0..gc {
                            let dh = g.get(i, j) * gv[j];
                            let h = xhat[i * gc + j];
                            d[i * gc + j] = rstd[i] / n * (n * dh - sum_dh - h * sum_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(gr, gc, d).unwrap());
                }
            }
            Op::Relu(a) => {
                let d = g.data().iter().zip(val(*a).data()).map(|(q, x)| if *x > 0.0 { *q } else { 0.0 }).collect();
                self.accumulate(grads, *a, Tensor::new(gr, gc, d).unwrap());
            }
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(node.value.data()).map(|(q, y)| q * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, Tensor::new(gr, gc, d).unwrap());
            }
            Op::Log(a) => {
                let d = g.data().iter().zip(val(*a).data()).map(|(q, x)| q / x).collect();
                self.accumulate(grads, *a, Tensor::new(gr, gc, d).unwrap());
            }
            Op::Exp(a) => {
                let d = g.data().iter().zip(node.value.data()).map(|(q, y)| q * y).collect();
                self.accumulate(grads, *a, Tensor::new(gr, gc, d).unwrap());
            }
            Op::Dropout(a, mask) | Op::MulConst(a, mask) => {
                let d = g.data().iter().zip(mask).map(|(q, m)| q * m).collect();
                self.accumulate(grads, *a, Tensor::new(gr, gc, d).unwrap());
            }
            Op::Embedding(table, ids) => {
                let [v, d] = val(*table).shape();
                let mut out = vec![0.0; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for (o, q) in out[id * d..(id + 1) * d].iter_mut().zip(g.row(i)) {
                        *o += q;
                    }
                }
                self.accumulate(grads, *table, Tensor::new(v, d, out).unwrap());
            }
            Op::SumRows(a) => {
                let [r, c] = val(*a).shape();
                let mut d = Vec::with_capacity(r * c);
                for _ in 0..r {
                    d.extend_from_slice(g.data());
                }
                self.accumulate(grads, *a, Tensor::new(r, c, d).unwrap());
            }
            Op::SumCols(a) => {
                let [r, c] = val(*a).shape();
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    d.extend(std::iter::repeat_n(g.data()[i], c));
                }
                self.accumulate(grads, *a, Tensor::new(r, c, d).unwrap());
            }
            Op::SumAll(a) => {
                let [r, c] = val(*a).shape();
                self.accumulate(grads, *a, Tensor::full(r, c, g.item()));
            }
            Op::SumBlocks(a, block) => {
                let [r, c] = val(*a).shape();
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    d.extend_from_slice(g.row(i / block));
                }
                self.accumulate(grads, *a, Tensor::new(r, c, d).unwrap());
            }
            Op::MaskedFill(a, mask) => {
                let d = g.data().iter().zip(mask).map(|(q, &m)| if m { 0.0 } else { *q }).collect();
                self.accumulate(grads, *a, Tensor::new(gr, gc, d).unwrap());
            }
            Op::PickCols(a, cols) => {
                let [r, c] = val(*a).shape();
                let mut d = vec![0.0; r * c];
                for (i, &j) in cols.iter().enumerate() {
                    d[i * c + j] = g.data()[i];
                }
                self.accumulate(grads, *a, Tensor::new(r, c, d).unwrap());
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::new(rows, cols, (0..rows * cols).map(f).collect()).unwrap()
    }

    /// Central-difference gradient check of `build` w.r.t. every entry of
    /// every input. `build` returns a scalar.
    fn check<F>(inputs: &[Tensor], build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new(false, 0);
        let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss).unwrap();
        let h = 1e-5;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
            for e in 0..x.len() {
                let eval = |delta: f64| {
                    let mut xs = inputs.to_vec();
                    xs[k].data_mut()[e] += delta;
                    let mut g = Graph::new(false, 0);
                    let vs: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), true)).collect();
                    let l = build(&mut g, &vs);
                    g.value(l).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[e];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!((a - numeric).abs() / denom < 1e-6, "input {k} entry {e}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn weights(r: usize, c: usize) -> Tensor {
        t(r, c, |i| ((i as f64) * 0.7).sin())
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut g = Graph::inference();
        let x = g.leaf(t(2, 3, |i| i as f64), true);
        let s = g.sum_all(x);
        let gr = g.backward(s).unwrap();
        assert!(gr.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_grad_is_twice_x() {
        let mut g = Graph::inference();
        let xv = t(2, 2, |i| i as f64 - 1.5);
        let x = g.leaf(xv.clone(), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq);
        let gr = g.backward(s).unwrap();
        for (d, v) in gr.get(x).unwrap().data().iter().zip(xv.data()) {
            assert_eq!(*d, 2.0 * v);
        }
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::inference();
        let x = g.leaf(t(2, 2, |i| i as f64), true);
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::inference();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        let row = g.constant(Tensor::zeros(1, 3));
        assert!(g.add(a, row).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::inference();
        let x = g.constant(t(4, 7, |i| (i as f64 * 1.3).cos() * 20.0));
        let y = g.softmax(x);
        for r in 0..4 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_zero_is_identity_and_reproducible() {
        let mut g = Graph::new(true, 5);
        let x = g.constant(t(3, 3, |i| i as f64));
        assert_eq!(g.dropout(x, 0.0), x);

        let run = |seed| {
            let mut g = Graph::new(true, seed);
            let x = g.constant(Tensor::full(100, 100, 1.0));
            let y = g.dropout(x, 0.3);
            g.value(y).clone()
        };
        assert_eq!(run(9), run(9));
        let kept = run(9).data().iter().filter(|&&v| v != 0.0).count() as f64 / 10_000.0;
        assert!((kept - 0.7).abs() < 0.02, "kept fraction {kept}");
        // inverted scaling preserves the mean
        let mean = run(11).sum() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.03);
    }

    #[test]
    fn reduce_sum_of_ones() {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::full(5, 3, 1.0));
        let s = g.sum_rows(x);
        assert_eq!(g.value(s).data(), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn ops_leave_inputs_untouched() {
        let mut g = Graph::inference();
        let xv = t(3, 4, |i| i as f64 - 5.0);
        let x = g.constant(xv.clone());
        let _ = g.relu(x);
        let _ = g.softmax(x);
        let _ = g.scale(x, 3.0);
        let _ = g.masked_fill(x, &[true; 12], 0.0).unwrap();
        assert_eq!(g.value(x), &xv);
    }

    #[test]
    fn grad_matmul_and_bt() {
        check(&[weights(3, 4), weights(4, 2)], |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            let y2 = g.mul(y, y).unwrap();
            g.sum_all(y2)
        });
        check(&[weights(3, 4), weights(5, 4)], |g, v| {
            let y = g.matmul_bt(v[0], v[1]).unwrap();
            let s = g.sigmoid(y);
            g.sum_all(s)
        });
    }

    #[test]
    fn grad_elementwise() {
        // offset keeps the relu input away from its kink
        check(&[t(2, 3, |i| ((i as f64) * 0.7).sin() + 0.05), t(2, 3, |i| (i as f64 * 0.3).cos())], |g, v| {
            let a = g.add(v[0], v[1]).unwrap();
            let b = g.sub(a, v[1]).unwrap();
            let c = g.mul(b, v[1]).unwrap();
            let d = g.scale(c, 1.7);
            let e = g.relu(d);
            let f = g.sigmoid(e);
            let l = g.log(f);
            let e = g.exp(l);
            let s1 = g.sum_all(l);
            let s2 = g.sum_all(e);
            g.add(s1, s2).unwrap()
        });
    }

    #[test]
    fn grad_row_and_scalar_ops() {
        check(&[weights(3, 4), t(1, 4, |i| i as f64 * 0.1), t(1, 1, |_| 1.7)], |g, v| {
            let a = g.add_row(v[0], v[1]).unwrap();
            let a2 = g.mul(a, a).unwrap();
            let b = g.div_scalar(a2, v[2]).unwrap();
            let c = g.sum_cols(b);
            let c2 = g.mul(c, c).unwrap();
            g.sum_all(c2)
        });
    }

    #[test]
    fn grad_softmax_family() {
        check(&[weights(3, 5), t(3, 5, |i| (i as f64).cos())], |g, v| {
            let s = g.softmax(v[0]);
            let w = g.mul(s, v[1]).unwrap();
            let ls = g.log_softmax(v[0]);
            let picked = g.pick_cols(ls, &[0, 4, 2]).unwrap();
            let a = g.sum_all(w);
            let b = g.sum_all(picked);
            g.add(a, b).unwrap()
        });
    }

    #[test]
    fn grad_layer_norm() {
        check(
            &[
                weights(3, 6),
                t(1, 6, |i| 1.0 + i as f64 * 0.1),
                t(1, 6, |i| i as f64 * 0.05),
                t(3, 6, |i| (i as f64).sin()),
            ],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
                let w = g.mul(y, v[3]).unwrap();
                g.sum_all(w)
            },
        );
    }

    #[test]
    fn grad_structural_ops() {
        check(&[weights(4, 6), weights(2, 6), t(3, 2, |i| (i as f64 * 0.4).cos())], |g, v| {
            let c = g.concat_rows(&[v[0], v[1]]).unwrap(); // 6x6
            let s = g.slice_rows(c, 1, 4).unwrap(); // 4x6
            let a = g.slice_cols(s, 0, 3).unwrap();
            let b = g.slice_cols(s, 3, 3).unwrap();
            let cc = g.concat_cols(&[b, a]).unwrap(); // 4x6
            let tr = g.transpose(cc); // 6x4
            let blocks = g.sum_blocks(tr, 3).unwrap(); // 2x4
            let r = g.sum_rows(blocks);
            let e = g.embedding(v[2], &[2, 0, 2, 1]).unwrap(); // 4x2
            let er = g.sum_cols(e); // 4x1
            let ert = g.transpose(er);
            let m = g.mul(r, ert).unwrap();
            let mf = g.masked_fill(m, &[false, true, false, false], -3.0).unwrap();
            let k = g.mul_const(mf, &Tensor::row_vector(vec![1.0, 2.0, 0.0, -1.0])).unwrap();
            let k2 = g.mul(k, k).unwrap();
            g.mean_all(k2)
        });
    }
}
