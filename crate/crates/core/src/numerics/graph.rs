//! Reverse-mode automatic differentiation over a recorded tape of matrix ops.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter as named
//! leaves; only leaves registered as trainable (and everything computed from
//! them) carry gradients, so frozen weights never receive a gradient entry and
//! their weight-gradient products are skipped entirely.

use std::collections::{BTreeMap, HashMap};

use super::mat::{matmul, matmul_a_bt, matmul_at_b, Mat};
use super::tensor::{ParameterTree, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<Mat>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Mat,
        count: usize,
    },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by parameter name, in 64-bit precision, with the
/// parameter's original shape.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.map.get(name).map(|(_, g)| g.as_slice())
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.map.get(name).map(|(s, _)| s.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, grad: Vec<f64>) {
        self.map.insert(name.into(), (shape, grad));
    }

    /// `self += scale * other`, adding entries that are missing.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (name, (shape, g)) in &other.map {
            let slot = self
                .map
                .entry(name.clone())
                .or_insert_with(|| (shape.clone(), vec![0.0; g.len()]));
            for (a, b) in slot.1.iter_mut().zip(g) {
                *a += scale * b;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for (_, g) in self.map.values_mut() {
                for v in g.iter_mut() {
                    *v *= s;
                }
            }
        }
        norm
    }

    pub fn to_tensor(&self, name: &str) -> Option<Tensor> {
        self.map.get(name).map(|(shape, g)| {
            Tensor::new(shape.clone(), g.iter().map(|&v| v as f32).collect())
                .expect("gradient shape")
        })
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_shapes: Vec<(String, Vec<usize>, Var)>,
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

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.data.len(), 1, "not a scalar");
        m.data[0]
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Registers a named parameter leaf. A name registered twice returns the same node.
    pub fn param(&mut self, name: &str, t: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(Mat::from_tensor(t), Op::Param, trainable);
        self.params.insert(name.to_string(), v);
        self.param_shapes
            .push((name.to_string(), t.shape().to_vec(), v));
        v
    }

    /// Looks a parameter up in `tree`; it is trainable iff not frozen there.
    pub fn param_from(&mut self, tree: &ParameterTree, name: &str) -> Result<Var> {
        let e = tree
            .entry(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        Ok(self.param(name, &e.tensor, !e.frozen))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Adds a 1×c row to every row of an r×c matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.data.len(), self.value(a).cols, "bias width");
        let bias = r.data.clone();
        let mut v = self.value(a).clone();
        for i in 0..v.rows {
            for (x, b) in v.row_mut(i).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// `x · W + b` with W stored as (in × out).
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let y = self.matmul(x, weight);
        self.add_row(y, bias)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = gelu_scalar(*x));
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with affine gain and bias (each 1×c).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let (rows, cols) = (xm.rows, xm.cols);
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        assert_eq!(g.len(), cols, "layer norm gain width");
        let mut xhat = Mat::zeros(rows, cols);
        let mut out = Mat::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xm.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for j in 0..cols {
                let h = (row[j] - mean) * rs;
                xhat.data[i * cols + j] = h;
                out.data[i * cols + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product self-attention over a packed n×3d
    /// query/key/value matrix. Returns n×d.
    pub fn attention(&mut self, qkv: Var, heads: usize, causal: bool) -> Var {
        let m = self.value(qkv);
        assert_eq!(m.cols % 3, 0, "packed qkv width");
        let d = m.cols / 3;
        assert_eq!(d % heads, 0, "width divisible by heads");
        let hd = d / heads;
        let n = m.rows;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Mat::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
            let mut p = Mat::zeros(n, n);
            for i in 0..n {
                let q = &m.row(i)[qo..qo + hd];
                let upto = if causal { i + 1 } else { n };
                let prow = p.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for (j, s) in prow.iter_mut().enumerate().take(upto) {
                    let k = &m.row(j)[ko..ko + hd];
                    let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                    *s = dot * scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in prow.iter_mut().take(upto) {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for s in prow.iter_mut().take(upto) {
                    *s /= z;
                }
                let orow = &mut out.data[i * d + h * hd..i * d + (h + 1) * hd];
                for j in 0..upto {
                    let pij = prow[j];
                    let v = &m.row(j)[vo..vo + hd];
                    for (o, &vv) in orow.iter_mut().zip(v) {
                        *o += pij * vv;
                    }
                }
            }
            probs.push(p);
        }
        let rg = self.rg(qkv);
        self.push(out, Op::Attention { qkv, heads, probs }, rg)
    }

    /// Selects rows of `table` by index.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros(ids.len(), t.cols);
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < t.rows, "gather index {id} out of range {}", t.rows);
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat width mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Mat::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let m = self.value(x);
        assert!(start <= end && end <= m.rows, "row slice out of range");
        let v = Mat::from_vec(
            end - start,
            m.cols,
            m.data[start * m.cols..end * m.cols].to_vec(),
        );
        let rg = self.rg(x);
        self.push(v, Op::SliceRows { x, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let m = self.value(x);
        assert_eq!(m.data.len(), rows * cols, "reshape size");
        let v = Mat::from_vec(rows, cols, m.data.clone());
        let rg = self.rg(x);
        self.push(v, Op::Reshape(x), rg)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let m = self.value(x);
        assert!(m.rows > 0, "mean of zero rows");
        let mut v = Mat::zeros(1, m.cols);
        for i in 0..m.rows {
            for (a, b) in v.data.iter_mut().zip(m.row(i)) {
                *a += b;
            }
        }
        let inv = 1.0 / m.rows as f64;
        v.data.iter_mut().for_each(|a| *a *= inv);
        let rg = self.rg(x);
        self.push(v, Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::Sum(x), rg)
    }

    /// Mean over masked rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lm = self.value(logits);
        if targets.len() != lm.rows || mask.len() != lm.rows {
            return Err(Error::Shape(format!(
                "{} logit rows, {} targets, {} mask entries",
                lm.rows,
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let v = lm.cols;
        let mut probs = Mat::zeros(lm.rows, v);
        let mut total = 0.0;
        for i in 0..lm.rows {
            if !mask[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(Error::OutOfVocabulary {
                    id: targets[i],
                    vocab: v,
                });
            }
            let row = lm.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[targets[i]];
            for (p, x) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = total / count as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical("non-finite cross-entropy".into()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Mat::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every trainable parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.nodes.get(loss.0).ok_or_else(|| {
            Error::MissingGraph(format!("node {} was not recorded on this graph", loss.0))
        })?;
        if node.value.data.len() != 1 {
            return Err(Error::MissingGraph(format!(
                "backward needs a scalar, got {}×{}",
                node.value.rows, node.value.cols
            )));
        }
        let mut grads: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = Gradients::default();
        for (name, shape, v) in &self.param_shapes {
            if !self.rg(*v) || v.0 > loss.0 {
                continue;
            }
            let g = grads[v.0]
                .take()
                .unwrap_or_else(|| Mat::zeros(self.value(*v).rows, self.value(*v).cols));
            out.insert(name.clone(), shape.clone(), g.data);
        }
        Ok(out)
    }

    fn accum(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accum(grads, *a, matmul_a_bt(g, self.value(*b)));
                }
                if self.rg(*b) {
                    self.accum(grads, *b, matmul_at_b(self.value(*a), g));
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accum(grads, *a, g.clone());
                if self.rg(*row) {
                    let mut gr = Mat::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (s, v) in gr.data.iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                    let shape = self.value(*row);
                    gr.rows = shape.rows;
                    gr.cols = shape.cols;
                    self.accum(grads, *row, gr);
                }
            }
            Op::Scale(a, s) => {
                let mut ga = g.clone();
                ga.data.iter_mut().for_each(|x| *x *= s);
                self.accum(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for (gv, &xv) in ga.data.iter_mut().zip(&x.data) {
                    *gv *= gelu_derivative(xv);
                }
                self.accum(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = (g.rows, g.cols);
                let gm = &self.value(*gamma).data;
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = Mat::zeros(1, cols);
                    let mut db = Mat::zeros(1, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            let gij = g.data[i * cols + j];
                            dg.data[j] += gij * xhat.data[i * cols + j];
                            db.data[j] += gij;
                        }
                    }
                    let gshape = self.value(*gamma);
                    dg.rows = gshape.rows;
                    dg.cols = gshape.cols;
                    db.rows = gshape.rows;
                    db.cols = gshape.cols;
                    self.accum(grads, *gamma, dg);
                    self.accum(grads, *beta, db);
                }
                if self.rg(*x) {
                    let mut dx = Mat::zeros(rows, cols);
                    let nf = cols as f64;
                    for i in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..cols {
                            let d = g.data[i * cols + j] * gm[j];
                            mean_d += d;
                            mean_dx += d * xhat.data[i * cols + j];
                        }
                        mean_d /= nf;
                        mean_dx /= nf;
                        for j in 0..cols {
                            let d = g.data[i * cols + j] * gm[j];
                            dx.data[i * cols + j] =
                                rstd[i] * (d - mean_d - xhat.data[i * cols + j] * mean_dx);
                        }
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let m = self.value(*qkv);
                let n = m.rows;
                let d = m.cols / 3;
                let hd = d / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut dqkv = Mat::zeros(n, 3 * d);
                for (h, p) in probs.iter().enumerate() {
                    let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
                    for i in 0..n {
                        let go = &g.row(i)[h * hd..(h + 1) * hd];
                        let prow = p.row(i);
                        // dP_ij = dO_i · v_j; dV_j += P_ij dO_i
                        let mut dp = vec![0.0; n];
                        for j in 0..n {
                            let pij = prow[j];
                            if pij == 0.0 {
                                continue;
                            }
                            let v = &m.row(j)[vo..vo + hd];
                            dp[j] = go.iter().zip(v).map(|(a, b)| a * b).sum();
                            let dv = &mut dqkv.row_mut(j)[vo..vo + hd];
                            for (t, &gv) in dv.iter_mut().zip(go) {
                                *t += pij * gv;
                            }
                        }
                        let dot: f64 = (0..n).map(|j| dp[j] * prow[j]).sum();
                        for j in 0..n {
                            let pij = prow[j];
                            if pij == 0.0 {
                                continue;
                            }
                            let ds = pij * (dp[j] - dot) * scale;
                            let (qrow, krow) = (m.row(i), m.row(j));
                            for t in 0..hd {
                                dqkv.data[i * 3 * d + qo + t] += ds * krow[ko + t];
                                dqkv.data[j * 3 * d + ko + t] += ds * qrow[qo + t];
                            }
                        }
                    }
                }
                self.accum(grads, *qkv, dqkv);
            }
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let t = self.value(*table);
                    let mut dt = Mat::zeros(t.rows, t.cols);
                    for (i, &id) in ids.iter().enumerate() {
                        for (a, b) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                    self.accum(grads, *table, dt);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pm = self.value(p);
                    let len = pm.rows * pm.cols;
                    if self.rg(p) {
                        let gp = Mat::from_vec(pm.rows, pm.cols, g.data[offset..offset + len].to_vec());
                        self.accum(grads, p, gp);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let xm = self.value(*x);
                let mut gx = Mat::zeros(xm.rows, xm.cols);
                let off = start * xm.cols;
                gx.data[off..off + g.data.len()].copy_from_slice(&g.data);
                self.accum(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let xm = self.value(*x);
                self.accum(grads, *x, Mat::from_vec(xm.rows, xm.cols, g.data.clone()));
            }
            Op::MeanRows(x) => {
                let xm = self.value(*x);
                let inv = 1.0 / xm.rows as f64;
                let mut gx = Mat::zeros(xm.rows, xm.cols);
                for i in 0..xm.rows {
                    for (a, b) in gx.row_mut(i).iter_mut().zip(&g.data) {
                        *a = b * inv;
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::Sum(x) => {
                let xm = self.value(*x);
                let gx = Mat::from_vec(xm.rows, xm.cols, vec![g.data[0]; xm.data.len()]);
                self.accum(grads, *x, gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let s = g.data[0] / *count as f64;
                let mut gl = Mat::zeros(probs.rows, probs.cols);
                for i in 0..probs.rows {
                    if !mask[i] {
                        continue;
                    }
                    for (a, p) in gl.row_mut(i).iter_mut().zip(probs.row(i)) {
                        *a = p * s;
                    }
                    gl.data[i * probs.cols + targets[i]] -= s;
                }
                self.accum(grads, *logits, gl);
            }
        }
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
        + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}
