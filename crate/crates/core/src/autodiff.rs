//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation applied during a forward pass. Each
//! node stores its value plus whatever the backward rule needs; calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every trainable parameter leaf. Nodes that cannot reach a trainable leaf
//! are skipped on the way back, which is how frozen sub-networks stay cheap.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Input,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix<F>, inv_std: Vec<F> },
    Attention { qkv: Var, heads: usize, probs: Vec<Matrix<F>> },
    Gather(Vec<(Var, usize)>),
    L2NormalizeRows { x: Var, norms: Vec<F> },
    SumScalars(Vec<Var>),
    InfoNce { g: Var, s: Var, inv_temp: F, dlogits: Matrix<F> },
    MaskedMse { pred: Var, target: Matrix<F>, rows: Vec<usize>, denom: F },
    Bce { logits: Var, dlogits: Vec<F> },
    SoftCrossEntropy { logits: Var, dlogits: Matrix<F> },
}

struct Node<F> {
    value: Matrix<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Parameter gradients keyed by canonical parameter name.
pub type Gradients<F> = BTreeMap<String, Matrix<F>>;

/// Recording tape for one forward/backward pass.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    params: HashMap<String, Var>,
    grad_enabled: bool,
    frozen_prefixes: Vec<String>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    /// A graph whose parameter leaves are trainable.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), grad_enabled: true, frozen_prefixes: Vec::new() }
    }

    /// A graph that never produces gradients.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    /// Parameters whose names start with `prefix` become constants.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen_prefixes.push(prefix.into());
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.grad_enabled && !self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn value(&self, v: Var) -> &Matrix<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn input(&mut self, value: Matrix<F>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Leaf for a named parameter. Repeated requests return the same node so
    /// gradients from every use accumulate into one entry.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))?
            .clone();
        let trainable = self.is_trainable(name);
        let v = self.push(value, Op::Param(name.to_string()), trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", av.shape(), bv.shape())));
        }
        let value = av.matmul(bv);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::Shape(format!("add_row {:?} + {:?}", av.shape(), rv.shape())));
        }
        let mut value = av.clone();
        let r = rv.as_slice().to_vec();
        for i in 0..value.rows() {
            for (x, &b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let mut value = self.value(a).clone();
        value.scale(factor);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// `x · W + b` with `W` stored `in × out` and `b` stored `1 × out`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_row(y, bias)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| gelu_value(x));
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let eps = F::of(1e-6);
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != (1, cols) || bv.shape() != (1, cols) {
            return Err(Error::Shape(format!("layer_norm width {cols} vs {:?}", gv.shape())));
        }
        let n = F::of_usize(cols);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * gv.as_slice()[c] + bv.as_slice()[c]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Multi-head scaled dot-product self-attention. `qkv` is `T × 3d` laid out
    /// as `[Q | K | V]`; head `h` reads columns `h·d/heads .. (h+1)·d/heads` of each.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let qv = self.value(qkv);
        let (t, three_d) = qv.shape();
        if three_d % 3 != 0 || (three_d / 3) % heads != 0 {
            return Err(Error::Shape(format!("attention width {three_d} with {heads} heads")));
        }
        let d = three_d / 3;
        let dh = d / heads;
        let scale = F::one() / F::of_usize(dh).sqrt();
        let mut out = Matrix::zeros(t, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (q, k, v) = split_head(qv, d, dh, h);
            let mut p = q.matmul_nt(&k);
            p.scale(scale);
            softmax_rows_in_place(&mut p);
            let o = p.matmul(&v);
            for r in 0..t {
                out.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(o.row(r));
            }
            probs.push(p);
        }
        let rg = self.rg(&[qkv]);
        Ok(self.push(out, Op::Attention { qkv, heads, probs }, rg))
    }

    /// Softmax attention weights of the last attention node built from `v`.
    pub fn attention_probs(&self, v: Var) -> Option<&[Matrix<F>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Builds a matrix whose `i`-th row is row `parts[i].1` of node `parts[i].0`.
    pub fn gather(&mut self, parts: Vec<(Var, usize)>) -> Result<Var> {
        let cols = match parts.first() {
            Some(&(v, _)) => self.value(v).cols(),
            None => return Err(Error::Shape("gather of zero rows".into())),
        };
        let mut value = Matrix::zeros(parts.len(), cols);
        for (i, &(v, r)) in parts.iter().enumerate() {
            let src = self.value(v);
            if src.cols() != cols || r >= src.rows() {
                return Err(Error::Shape(format!(
                    "gather row {r} of {:?} into width {cols}",
                    src.shape()
                )));
            }
            value.row_mut(i).copy_from_slice(src.row(r));
        }
        let srcs: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&srcs);
        Ok(self.push(value, Op::Gather(parts), rg))
    }

    pub fn rows(&mut self, v: Var, range: std::ops::Range<usize>) -> Result<Var> {
        self.gather(range.map(|r| (v, r)).collect())
    }

    /// Stacks all rows of each input, in order.
    pub fn concat_rows(&mut self, vars: &[Var]) -> Result<Var> {
        let mut parts = Vec::new();
        for &v in vars {
            parts.extend((0..self.value(v).rows()).map(|r| (v, r)));
        }
        self.gather(parts)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = crate::tensor::l2_norm(xv.row(r)).max(F::of(1e-12));
            norms.push(n);
            for v in value.row_mut(r) {
                *v /= n;
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Sum of `1 × 1` nodes.
    pub fn sum_scalars(&mut self, vars: &[Var]) -> Var {
        let total = vars.iter().map(|&v| self.scalar(v)).fold(F::zero(), |a, b| a + b);
        let rg = self.rg(vars);
        self.push(Matrix::scalar(total), Op::SumScalars(vars.to_vec()), rg)
    }

    /// Symmetric InfoNCE over row-aligned embedding batches; see
    /// [`crate::objectives::info_nce_symmetric`] for the value semantics.
    pub fn info_nce(&mut self, g: Var, s: Var, temperature: F) -> Result<Var> {
        let (gv, sv) = (self.value(g), self.value(s));
        if gv.shape() != sv.shape() {
            return Err(Error::Shape(format!("info_nce {:?} vs {:?}", gv.shape(), sv.shape())));
        }
        let n = gv.rows();
        if n < 2 {
            return Err(Error::DegenerateBatch { needed: 2, got: n });
        }
        let inv_temp = F::one() / temperature;
        let mut logits = gv.matmul_nt(sv);
        logits.scale(inv_temp);
        let (loss, dlogits) = crate::objectives::info_nce_from_logits(&logits);
        let rg = self.rg(&[g, s]);
        Ok(self.push(Matrix::scalar(loss), Op::InfoNce { g, s, inv_temp, dlogits }, rg))
    }

    /// Mean squared error over the listed rows (all rows when `rows` covers them).
    pub fn masked_mse(&mut self, pred: Var, target: Matrix<F>, rows: Vec<usize>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::Shape(format!("mse {:?} vs {:?}", pv.shape(), target.shape())));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= pv.rows()) {
            return Err(Error::Shape(format!("mse row {bad} of {}", pv.rows())));
        }
        let denom = F::of_usize(rows.len() * pv.cols());
        let mut loss = F::zero();
        for &r in &rows {
            for (&p, &t) in pv.row(r).iter().zip(target.row(r)) {
                loss += (p - t) * (p - t);
            }
        }
        let loss = if rows.is_empty() { F::zero() } else { loss / denom };
        let rg = self.rg(&[pred]);
        Ok(self.push(Matrix::scalar(loss), Op::MaskedMse { pred, target, rows, denom }, rg))
    }

    /// Binary cross-entropy on sigmoid probabilities clamped to `[eps, 1-eps]`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[F], eps: F) -> Result<Var> {
        let lv = self.value(logits).as_slice().to_vec();
        if lv.len() != labels.len() {
            return Err(Error::Shape(format!("bce {} logits vs {} labels", lv.len(), labels.len())));
        }
        let probs: Vec<F> = lv.iter().map(|&z| sigmoid(z)).collect();
        let loss = crate::objectives::bce_mean(&probs, labels, eps)?;
        let n = F::of_usize(labels.len());
        let dlogits = probs
            .iter()
            .zip(labels)
            .map(|(&p, &y)| if p < eps || p > F::one() - eps { F::zero() } else { (p - y) / n })
            .collect();
        let rg = self.rg(&[logits]);
        Ok(self.push(Matrix::scalar(loss), Op::Bce { logits, dlogits }, rg))
    }

    /// Cross-entropy against soft target distributions, averaged over rows.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Matrix<F>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(Error::Shape(format!("xent {:?} vs {:?}", lv.shape(), targets.shape())));
        }
        let n = F::of_usize(lv.rows());
        let mut probs = lv.clone();
        softmax_rows_in_place(&mut probs);
        let mut loss = F::zero();
        for r in 0..lv.rows() {
            let row = lv.row(r);
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<F>().ln();
            for (&z, &t) in row.iter().zip(targets.row(r)) {
                loss -= t * (z - lse);
            }
        }
        let mut dlogits = probs;
        for r in 0..dlogits.rows() {
            for (d, &t) in dlogits.row_mut(r).iter_mut().zip(targets.row(r)) {
                *d = (*d - t) / n;
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(Matrix::scalar(loss / n), Op::SoftCrossEntropy { logits, dlogits }, rg))
    }

    /// Reverse sweep from a scalar node; returns gradients of every trainable
    /// parameter reached.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let mut grads: Vec<Option<Matrix<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, F::one()));
        let mut out = Gradients::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads, &mut out);
        }
        out
    }

    fn propagate(
        &self,
        node: &Node<F>,
        dy: &Matrix<F>,
        grads: &mut [Option<Matrix<F>>],
        out: &mut Gradients<F>,
    ) {
        let mut acc = |v: Var, g: Matrix<F>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Input => {}
            Op::Param(name) => {
                out.insert(name.clone(), dy.clone());
            }
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    acc(*a, dy.matmul_nt(self.value(*b)));
                }
                if self.requires_grad(*b) {
                    acc(*b, self.value(*a).matmul_tn(dy));
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, dy.clone());
                if self.requires_grad(*row) {
                    acc(*row, column_sums(dy));
                }
            }
            Op::Scale(a, f) => {
                let mut g = dy.clone();
                g.scale(*f);
                acc(*a, g);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = x.as_slice().iter().zip(dy.as_slice()).map(|(&x, &d)| d * gelu_grad(x)).collect();
                acc(*a, Matrix::from_vec(x.rows(), x.cols(), data).expect("same shape"));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (rows, cols) = xhat.shape();
                let gv = self.value(*gamma).as_slice();
                if self.requires_grad(*gamma) {
                    let mut dg = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let v = dg.get(0, c) + dy.get(r, c) * xhat.get(r, c);
                            dg.set(0, c, v);
                        }
                    }
                    acc(*gamma, dg);
                }
                if self.requires_grad(*beta) {
                    acc(*beta, column_sums(dy));
                }
                if self.requires_grad(*x) {
                    let n = F::of_usize(cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let dxhat: Vec<F> = (0..cols).map(|c| dy.get(r, c) * gv[c]).collect();
                        let sum_d: F = dxhat.iter().copied().sum();
                        let sum_dx: F = dxhat.iter().zip(xhat.row(r)).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            let v = inv_std[r] / n * (n * dxhat[c] - sum_d - xhat.get(r, c) * sum_dx);
                            dx.set(r, c, v);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let qv = self.value(*qkv);
                let (t, three_d) = qv.shape();
                let d = three_d / 3;
                let dh = d / heads;
                let scale = F::one() / F::of_usize(dh).sqrt();
                let mut dqkv = Matrix::zeros(t, three_d);
                for (h, p) in probs.iter().enumerate() {
                    let (q, k, v) = split_head(qv, d, dh, h);
                    let mut d_o = Matrix::zeros(t, dh);
                    for r in 0..t {
                        d_o.row_mut(r).copy_from_slice(&dy.row(r)[h * dh..(h + 1) * dh]);
                    }
                    let dv = p.matmul_tn(&d_o);
                    let dp = d_o.matmul_nt(&v);
                    let mut ds = Matrix::zeros(t, t);
                    for r in 0..t {
                        let pr = p.row(r);
                        let dpr = dp.row(r);
                        let inner: F = pr.iter().zip(dpr).map(|(&a, &b)| a * b).sum();
                        for c in 0..t {
                            ds.set(r, c, pr[c] * (dpr[c] - inner) * scale);
                        }
                    }
                    let dq = ds.matmul(&k);
                    let dk = ds.matmul_tn(&q);
                    for r in 0..t {
                        let row = dqkv.row_mut(r);
                        row[h * dh..(h + 1) * dh].copy_from_slice(dq.row(r));
                        row[d + h * dh..d + (h + 1) * dh].copy_from_slice(dk.row(r));
                        row[2 * d + h * dh..2 * d + (h + 1) * dh].copy_from_slice(dv.row(r));
                    }
                }
                acc(*qkv, dqkv);
            }
            Op::Gather(parts) => {
                // Group by source so each source receives a single accumulation.
                let mut per_src: Vec<(Var, Matrix<F>)> = Vec::new();
                for (i, &(v, r)) in parts.iter().enumerate() {
                    if !self.requires_grad(v) {
                        continue;
                    }
                    let pos = match per_src.iter().position(|(s, _)| *s == v) {
                        Some(p) => p,
                        None => {
                            let (rows, cols) = self.value(v).shape();
                            per_src.push((v, Matrix::zeros(rows, cols)));
                            per_src.len() - 1
                        }
                    };
                    let g = &mut per_src[pos].1;
                    for (a, &b) in g.row_mut(r).iter_mut().zip(dy.row(i)) {
                        *a += b;
                    }
                }
                for (v, g) in per_src {
                    acc(v, g);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dyr = dy.row(r);
                    let inner: F = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = (dyr[c] - yr[c] * inner) / norms[r];
                    }
                }
                acc(*x, dx);
            }
            Op::SumScalars(vars) => {
                for &v in vars {
                    acc(v, dy.clone());
                }
            }
            Op::InfoNce { g, s, inv_temp, dlogits } => {
                let up = dy.item() * *inv_temp;
                if self.requires_grad(*g) {
                    let mut dg = dlogits.matmul(self.value(*s));
                    dg.scale(up);
                    acc(*g, dg);
                }
                if self.requires_grad(*s) {
                    let mut ds = dlogits.matmul_tn(self.value(*g));
                    ds.scale(up);
                    acc(*s, ds);
                }
            }
            Op::MaskedMse { pred, target, rows, denom } => {
                let pv = self.value(*pred);
                let mut dp = Matrix::zeros(pv.rows(), pv.cols());
                let f = dy.item() * F::of(2.0) / *denom;
                for &r in rows {
                    for ((o, &p), &t) in dp.row_mut(r).iter_mut().zip(pv.row(r)).zip(target.row(r)) {
                        *o = (p - t) * f;
                    }
                }
                acc(*pred, dp);
            }
            Op::Bce { logits, dlogits } => {
                let (rows, cols) = self.value(*logits).shape();
                let up = dy.item();
                let data = dlogits.iter().map(|&d| d * up).collect();
                acc(*logits, Matrix::from_vec(rows, cols, data).expect("same shape"));
            }
            Op::SoftCrossEntropy { logits, dlogits } => {
                let mut g = dlogits.clone();
                g.scale(dy.item());
                acc(*logits, g);
            }
        }
    }
}

fn split_head<F: Scalar>(qkv: &Matrix<F>, d: usize, dh: usize, h: usize) -> (Matrix<F>, Matrix<F>, Matrix<F>) {
    let t = qkv.rows();
    let mut q = Matrix::zeros(t, dh);
    let mut k = Matrix::zeros(t, dh);
    let mut v = Matrix::zeros(t, dh);
    for r in 0..t {
        let row = qkv.row(r);
        q.row_mut(r).copy_from_slice(&row[h * dh..(h + 1) * dh]);
        k.row_mut(r).copy_from_slice(&row[d + h * dh..d + (h + 1) * dh]);
        v.row_mut(r).copy_from_slice(&row[2 * d + h * dh..2 * d + (h + 1) * dh]);
    }
    (q, k, v)
}

fn column_sums<F: Scalar>(m: &Matrix<F>) -> Matrix<F> {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, &v) in out.as_mut_slice().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

pub(crate) fn softmax_rows_in_place<F: Scalar>(m: &mut Matrix<F>) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

#[inline]
pub fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

const GELU_C: f64 = 0.044715;

#[inline]
fn gelu_value<F: Scalar>(x: F) -> F {
    let k = (F::of(2.0) / F::PI()).sqrt();
    let u = k * (x + F::of(GELU_C) * x * x * x);
    F::of(0.5) * x * (F::one() + u.tanh())
}

#[inline]
fn gelu_grad<F: Scalar>(x: F) -> F {
    let k = (F::of(2.0) / F::PI()).sqrt();
    let u = k * (x + F::of(GELU_C) * x * x * x);
    let t = u.tanh();
    F::of(0.5) * (F::one() + t)
        + F::of(0.5) * x * (F::one() - t * t) * k * (F::one() + F::of(3.0 * GELU_C) * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Checks every parameter entry of `store` against central differences of `f`.
    fn check(store: &mut ParamStore<f64>, f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var) {
        let mut g = Graph::new();
        let loss = f(&mut g, store);
        let grads = g.backward(loss);
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            let n = store.get(&name).unwrap().len();
            for i in 0..n {
                let h = 1e-6;
                let orig = store.get(&name).unwrap().as_slice()[i];
                store.get_mut(&name).unwrap().as_mut_slice()[i] = orig + h;
                let mut gp = Graph::new();
                let lp = f(&mut gp, store);
                let up = gp.scalar(lp);
                store.get_mut(&name).unwrap().as_mut_slice()[i] = orig - h;
                let mut gm = Graph::new();
                let lm = f(&mut gm, store);
                let down = gm.scalar(lm);
                store.get_mut(&name).unwrap().as_mut_slice()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.get(&name).map_or(0.0, |m| m.as_slice()[i]);
                let denom = analytic.abs().max(numeric.abs()).max(1e-7);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-5,
                    "{name}[{i}]: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn layer_norm_attention_gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("x", random(5, 6, &mut rng));
        store.insert("gamma", random(1, 6, &mut rng));
        store.insert("beta", random(1, 6, &mut rng));
        store.insert("w", random(6, 18, &mut rng));
        store.insert("b", random(1, 18, &mut rng));
        let target = random(5, 6, &mut rng);
        check(&mut store, |g, s| {
            let x = g.param(s, "x").unwrap();
            let gamma = g.param(s, "gamma").unwrap();
            let beta = g.param(s, "beta").unwrap();
            let h = g.layer_norm(x, gamma, beta).unwrap();
            let w = g.param(s, "w").unwrap();
            let b = g.param(s, "b").unwrap();
            let qkv = g.linear(h, w, b).unwrap();
            let a = g.attention(qkv, 2).unwrap();
            let a = g.gelu(a);
            let y = g.add(a, x).unwrap();
            g.masked_mse(y, target.clone(), vec![0, 2, 4]).unwrap()
        });
    }

    #[test]
    fn gather_normalize_info_nce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.insert("a", random(4, 3, &mut rng));
        store.insert("b", random(3, 3, &mut rng));
        check(&mut store, |g, s| {
            let a = g.param(s, "a").unwrap();
            let b = g.param(s, "b").unwrap();
            let left = g.gather(vec![(a, 0), (b, 1), (a, 2)]).unwrap();
            let right = g.gather(vec![(b, 0), (a, 3), (b, 2)]).unwrap();
            let left = g.l2_normalize_rows(left);
            let right = g.l2_normalize_rows(right);
            g.info_nce(left, right, 0.5).unwrap()
        });
    }

    #[test]
    fn bce_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        store.insert("z", random(4, 1, &mut rng));
        store.insert("logits", random(3, 4, &mut rng));
        let targets = Matrix::from_rows(&[
            vec![0.7, 0.1, 0.1, 0.1],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.25, 0.25, 0.25, 0.25],
        ])
        .unwrap();
        check(&mut store, |g, s| {
            let z = g.param(s, "z").unwrap();
            let l1 = g.bce_with_logits(z, &[1.0, 0.0, 1.0, 0.0], 1e-7).unwrap();
            let lg = g.param(s, "logits").unwrap();
            let l2 = g.soft_cross_entropy(lg, &targets).unwrap();
            let l2 = g.scale(l2, 0.5);
            g.sum_scalars(&[l1, l2])
        });
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("enc.w", Matrix::filled(2, 2, 0.5));
        store.insert("head.w", Matrix::filled(2, 1, 0.5));
        let mut g = Graph::new();
        g.freeze_prefix("enc.");
        let x = g.input(Matrix::filled(1, 2, 1.0));
        let w = g.param(&store, "enc.w").unwrap();
        let h = g.param(&store, "head.w").unwrap();
        let y = g.matmul(x, w).unwrap();
        let z = g.matmul(y, h).unwrap();
        let grads = g.backward(z);
        assert!(!grads.contains_key("enc.w"));
        assert!(grads.contains_key("head.w"));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::<f64>::inference();
        let qkv = g.input(random(7, 12, &mut rng));
        let a = g.attention(qkv, 2).unwrap();
        for p in g.attention_probs(a).unwrap() {
            for r in 0..p.rows() {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Matrix::zeros(2, 3));
        let b = g.input(Matrix::zeros(2, 3));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
        let c = g.input(Matrix::zeros(1, 4));
        assert!(matches!(g.add_row(a, c), Err(Error::Shape(_))));
    }
}
