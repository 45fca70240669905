//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records primitive operations in evaluation order. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for every trainable leaf. A graph can be differentiated once.

use crate::error::{Error, Result};
use crate::numerics::tensor::{gelu, gelu_grad, log_sum_exp, matmul_into, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `aᵀ · b`
    MatMulTn(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    FrobeniusSq(Var),
    GroupMean(Var, usize),
    RepeatRows(Var, usize),
    MulCol(Var, Var, usize),
    ColMean(Var),
    RowSlice(Var, usize),
    DotConst(Var, Tensor),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    Combine(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    trainable: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros when the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, trainable: false });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].trainable = true;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2();
        let (rb, cb) = self.value(b).dims2();
        if ra != rb {
            return Err(Error::Shape(format!(
                "transposed matmul row counts disagree: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; ca * cb];
        for r in 0..ra {
            for i in 0..ca {
                let x = av[r * ca + i];
                for j in 0..cb {
                    out[i * cb + j] += x * bv[r * cb + j];
                }
            }
        }
        let t = Tensor::new(vec![ca, cb], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatMulTn(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Broadcast a `[C]` bias over every row of an `R×C` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if self.value(bias).len() != c {
            return Err(Error::Shape(format!(
                "bias {:?} does not match row width of {:?}",
                self.value(bias).shape(),
                self.value(x).shape()
            )));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in 0..r {
            for (o, bv) in out.data_mut()[row * c..(row + 1) * c].iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Softmax over the last axis of an `R×C` matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = if t.shape().len() == 1 { t.softmax(0)? } else { t.softmax(t.shape().len() - 1)? };
        let ng = self.needs(x);
        Ok(self.push(out, Op::SoftmaxRows(x), ng))
    }

    /// Row-wise log-sum-exp, `R×C -> [R]`.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = (0..t.rows()).map(|r| log_sum_exp(t.row(r))).collect();
        let ng = self.needs(x);
        self.push(Tensor::vector(out), Op::LogSumExpRows(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let ng = self.needs(x);
        self.push(out, Op::Square(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let ng = self.needs(x);
        self.push(out, Op::Mean(x), ng)
    }

    pub fn frobenius_sq(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).norm_sq());
        let ng = self.needs(x);
        self.push(out, Op::FrobeniusSq(x), ng)
    }

    /// Mean over consecutive blocks of `group` rows: `(G·group)×C -> G×C`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if group == 0 || r % group != 0 {
            return Err(Error::Shape(format!("{r} rows do not split into groups of {group}")));
        }
        let g = r / group;
        let src = self.value(x).data();
        let mut out = vec![0.0; g * c];
        for row in 0..r {
            let dst = &mut out[(row / group) * c..(row / group + 1) * c];
            for (o, v) in dst.iter_mut().zip(&src[row * c..(row + 1) * c]) {
                *o += v;
            }
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::new(vec![g, c], out)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::GroupMean(x, group), ng))
    }

    /// Repeat each row `times` times: `G×C -> (G·times)×C`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * c * times);
        for row in 0..r {
            for _ in 0..times {
                out.extend_from_slice(&src[row * c..(row + 1) * c]);
            }
        }
        let t = Tensor::new(vec![r * times, c], out)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::RepeatRows(x, times), ng))
    }

    /// Scale row `r` of `x` by `w[r, col]`.
    pub fn mul_col(&mut self, x: Var, w: Var, col: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        let (wr, wc) = self.value(w).dims2();
        if r != wr || col >= wc {
            return Err(Error::Shape(format!(
                "column weights {:?}[.., {col}] do not match {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        let mut out = self.value(x).clone();
        let wd = self.value(w).data().to_vec();
        for row in 0..r {
            let s = wd[row * wc + col];
            out.data_mut()[row * c..(row + 1) * c].iter_mut().for_each(|v| *v *= s);
        }
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::MulCol(x, w, col), ng))
    }

    /// Column means, `R×C -> [C]`.
    pub fn col_mean(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).dims2();
        let src = self.value(x).data();
        let mut out = vec![0.0; c];
        for row in 0..r {
            for (o, v) in out.iter_mut().zip(&src[row * c..(row + 1) * c]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        let ng = self.needs(x);
        self.push(Tensor::vector(out), Op::ColMean(x), ng)
    }

    /// Rows `start..start + len` of an `R×C` matrix.
    pub fn row_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if len == 0 || start + len > r {
            return Err(Error::Shape(format!("rows {start}..{} out of {r}", start + len)));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(vec![len, c], data)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::RowSlice(x, start), ng))
    }

    /// `Σ x ⊙ c` for a constant `c`; no gradient flows into `c`.
    pub fn dot_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        if self.value(x).len() != c.len() {
            return Err(Error::Shape(format!(
                "dot with constant {:?} vs {:?}",
                c.shape(),
                self.value(x).shape()
            )));
        }
        let s: f64 = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::DotConst(x, c), ng))
    }

    /// Mean token cross-entropy of `B×V` logits against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, v) = t.dims2();
        if targets.len() != b {
            return Err(Error::Shape(format!("{} targets for {b} logit rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::Index(format!("target {bad} outside vocabulary of {v}")));
        }
        let mut loss = 0.0;
        let mut probs = vec![0.0; b * v];
        for (r, &y) in targets.iter().enumerate() {
            let row = t.row(r);
            let lse = log_sum_exp(row);
            loss += lse - row[y];
            for (p, &z) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        let probs = Tensor::new(vec![b, v], probs)?;
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    /// Linear combination `Σ cᵢ·xᵢ` of same-shaped nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms.first().ok_or_else(|| Error::Graph("empty combination".into()))?;
        let mut out = self.value(first.0).scale(first.1);
        for &(v, c) in &terms[1..] {
            out.axpy(c, self.value(v))?;
        }
        let ng = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(out, Op::Combine(terms.to_vec()), ng))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Graph("graph already differentiated; record a new one".into()));
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::Graph("root is not on this graph".into()));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::Graph(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(upstream) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let contributions = self.local_grads(idx, &upstream)?;
            grads[idx] = Some(upstream);
            for (parent, g) in contributions {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.axpy(1.0, &g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if !node.trainable {
                grads[i] = None;
            } else if grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn local_grads(&self, idx: usize, up: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.dims2();
                let n = tb.cols();
                let mut res = Vec::with_capacity(2);
                if self.needs(*a) {
                    // dA = up · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    matmul_into(up.data(), tb.transpose().data(), &mut ga, m, n, k);
                    res.push((*a, Tensor::new(ta.shape().to_vec(), ga)?));
                }
                if self.needs(*b) {
                    // dB = Aᵀ · up
                    let mut gb = vec![0.0; k * n];
                    matmul_into(ta.transpose().data(), up.data(), &mut gb, k, m, n);
                    res.push((*b, Tensor::new(tb.shape().to_vec(), gb)?));
                }
                res
            }
            Op::MatMulTn(a, b) => {
                // out = Aᵀ B with A: r×p, B: r×q, up: p×q
                let (ta, tb) = (val(*a), val(*b));
                let (r, p) = ta.dims2();
                let q = tb.cols();
                let mut res = Vec::with_capacity(2);
                if self.needs(*a) {
                    // dA = B · upᵀ
                    let mut ga = vec![0.0; r * p];
                    matmul_into(tb.data(), up.transpose().data(), &mut ga, r, q, p);
                    res.push((*a, Tensor::new(ta.shape().to_vec(), ga)?));
                }
                if self.needs(*b) {
                    // dB = A · up
                    let mut gb = vec![0.0; r * q];
                    matmul_into(ta.data(), up.data(), &mut gb, r, p, q);
                    res.push((*b, Tensor::new(tb.shape().to_vec(), gb)?));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, up.clone()), (*b, up.clone())],
            Op::AddBias(x, bias) => {
                let (r, c) = up.dims2();
                let mut gb = vec![0.0; c];
                for row in 0..r {
                    for (g, u) in gb.iter_mut().zip(up.row(row)) {
                        *g += u;
                    }
                }
                let gb = Tensor::new(val(*bias).shape().to_vec(), gb)?;
                vec![(*x, up.clone()), (*bias, gb)]
            }
            Op::Scale(x, s) => vec![(*x, up.scale(*s))],
            Op::Gelu(x) => {
                let g = val(*x).zip_map(up, |xv, u| gelu_grad(xv) * u)?;
                vec![(*x, g)]
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (r, c) = y.dims2();
                let mut g = vec![0.0; r * c];
                for row in 0..r {
                    let yr = y.row(row);
                    let ur = up.row(row);
                    let dot: f64 = yr.iter().zip(ur).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        g[row * c + j] = yr[j] * (ur[j] - dot);
                    }
                }
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), g)?)]
            }
            Op::LogSumExpRows(x) => {
                let tx = val(*x);
                let (r, c) = tx.dims2();
                let mut g = vec![0.0; r * c];
                for row in 0..r {
                    let lse = node.value.data()[row];
                    let u = up.data()[row];
                    for (j, &z) in tx.row(row).iter().enumerate() {
                        g[row * c + j] = u * (z - lse).exp();
                    }
                }
                vec![(*x, Tensor::new(tx.shape().to_vec(), g)?)]
            }
            Op::Square(x) => vec![(*x, val(*x).zip_map(up, |a, u| 2.0 * a * u)?)],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), up.item()))],
            Op::Mean(x) => {
                let t = val(*x);
                vec![(*x, Tensor::full(t.shape(), up.item() / t.len() as f64))]
            }
            Op::FrobeniusSq(x) => vec![(*x, val(*x).scale(2.0 * up.item()))],
            Op::GroupMean(x, group) => {
                let tx = val(*x);
                let (r, c) = tx.dims2();
                let inv = 1.0 / *group as f64;
                let mut g = vec![0.0; r * c];
                for row in 0..r {
                    for (dst, u) in g[row * c..(row + 1) * c].iter_mut().zip(up.row(row / group)) {
                        *dst = u * inv;
                    }
                }
                vec![(*x, Tensor::new(tx.shape().to_vec(), g)?)]
            }
            Op::RepeatRows(x, times) => {
                let tx = val(*x);
                let (r, c) = tx.dims2();
                let mut g = vec![0.0; r * c];
                for row in 0..r * times {
                    let dst = &mut g[(row / times) * c..(row / times + 1) * c];
                    for (d, u) in dst.iter_mut().zip(up.row(row)) {
                        *d += u;
                    }
                }
                vec![(*x, Tensor::new(tx.shape().to_vec(), g)?)]
            }
            Op::MulCol(x, w, col) => {
                let (tx, tw) = (val(*x), val(*w));
                let (r, c) = tx.dims2();
                let wc = tw.cols();
                let mut gx = vec![0.0; r * c];
                let mut gw = vec![0.0; tw.len()];
                for row in 0..r {
                    let s = tw.data()[row * wc + col];
                    let mut acc = 0.0;
                    for j in 0..c {
                        let u = up.data()[row * c + j];
                        gx[row * c + j] = u * s;
                        acc += u * tx.data()[row * c + j];
                    }
                    gw[row * wc + col] = acc;
                }
                vec![
                    (*x, Tensor::new(tx.shape().to_vec(), gx)?),
                    (*w, Tensor::new(tw.shape().to_vec(), gw)?),
                ]
            }
            Op::ColMean(x) => {
                let tx = val(*x);
                let (r, c) = tx.dims2();
                let mut g = vec![0.0; r * c];
                for row in 0..r {
                    for j in 0..c {
                        g[row * c + j] = up.data()[j] / r as f64;
                    }
                }
                vec![(*x, Tensor::new(tx.shape().to_vec(), g)?)]
            }
            Op::RowSlice(x, start) => {
                let tx = val(*x);
                let c = tx.cols();
                let mut g = vec![0.0; tx.len()];
                g[start * c..start * c + up.len()].copy_from_slice(up.data());
                vec![(*x, Tensor::new(tx.shape().to_vec(), g)?)]
            }
            Op::DotConst(x, c) => {
                let g = Tensor::new(val(*x).shape().to_vec(), c.scale(up.item()).into_data())?;
                vec![(*x, g)]
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (b, v) = probs.dims2();
                let scale = up.item() / b as f64;
                let mut g = probs.data().to_vec();
                for (r, &y) in targets.iter().enumerate() {
                    g[r * v + y] -= 1.0;
                }
                g.iter_mut().for_each(|x| *x *= scale);
                vec![(*logits, Tensor::new(val(*logits).shape().to_vec(), g)?)]
            }
            Op::Combine(terms) => terms.iter().map(|&(v, c)| (v, up.scale(c))).collect(),
        };
        Ok(out)
    }
}
