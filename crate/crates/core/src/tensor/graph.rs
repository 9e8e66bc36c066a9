use super::{matmul_into, Tensor};
use crate::error::{Error, Result};

/// Row norms below this are clamped before division in `l2_normalize`.
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Lower clamp applied to squared distances before `sqrt` in `pairwise_dist`.
pub const DIST_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    DivBy(usize, usize),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    RowNorm(usize),
    RowNormalize(usize),
    PairwiseSqDist(usize),
    PairwiseDist(usize),
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize> },
    AddRow(usize, usize),
    SubRow(usize, usize),
    Gather(usize, Vec<usize>),
    SelectRows(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    Huber(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of operations recorded during one forward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order; `backward` walks it once in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

    /// Adds an input tensor. Parameters are leaves with `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient after [`Graph::backward`]; `None` for nodes that
    /// do not require gradients.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x.0]);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x.0, s), |v| v * s)
    }

    /// `x / s` where `s` is a one-element node; the gradient reaches both.
    pub fn div_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let st = self.value(s);
        if st.numel() != 1 {
            return Err(mismatch("div_by", self.value(x), st));
        }
        let d = st.data()[0];
        let value = self.value(x).map(|v| v / d);
        let rg = self.rg(&[x.0, s.0]);
        Ok(self.push(value, Op::DivBy(x.0, s.0), rg))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar(x.0), |v| v + s)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(value, Op::Transpose(x.0), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x.0), |v| v.max(0.0))
    }

    /// `max(0, x)`; identical to [`Graph::relu`], named for loss code.
    pub fn hinge(&mut self, x: Var) -> Var {
        self.relu(x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x.0), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x.0), f64::ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x.0), f64::sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x.0), |v| v * v)
    }

    /// Smooth-L1 with transition at 1: `0.5 x²` if `|x| < 1`, else `|x| − 0.5`.
    pub fn huber(&mut self, x: Var) -> Var {
        self.unary(x, Op::Huber(x.0), |v| {
            if v.abs() < 1.0 {
                0.5 * v * v
            } else {
                v.abs() - 0.5
            }
        })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(m), Op::Mean(x.0), rg)
    }

    /// Row-wise Euclidean norm of an `n×d` matrix, as an `n×1` matrix.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, _) = t.dims2()?;
        let data = (0..n).map(|i| norm(t.row(i))).collect();
        let value = Tensor::new(vec![n, 1], data)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(value, Op::RowNorm(x.0), rg))
    }

    /// Divides each row by `max(‖row‖, 1e-12)`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.dims2()?;
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let r = t.row(i);
            let nrm = norm(r).max(NORMALIZE_EPS);
            data.extend(r.iter().map(|v| v / nrm));
        }
        let value = Tensor::new(vec![n, d], data)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(value, Op::RowNormalize(x.0), rg))
    }

    /// `D[i][j] = ‖x_i − x_j‖²`, computed from explicit differences so the
    /// result is exactly symmetric with a zero diagonal.
    pub fn pairwise_sqdist(&mut self, x: Var) -> Result<Var> {
        let value = sqdist_matrix(self.value(x))?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(value, Op::PairwiseSqDist(x.0), rg))
    }

    /// `D[i][j] = sqrt(max(ε, ‖x_i − x_j‖²))`; exactly 0 on the diagonal and
    /// for coincident rows.
    pub fn pairwise_dist(&mut self, x: Var) -> Result<Var> {
        let mut value = sqdist_matrix(self.value(x))?;
        let n = value.shape()[0];
        for (idx, v) in value.data_mut().iter_mut().enumerate() {
            *v = if idx / n == idx % n || *v == 0.0 {
                0.0
            } else {
                v.max(DIST_EPS).sqrt()
            };
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(value, Op::PairwiseDist(x.0), rg))
    }

    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, c) = t.dims2()?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(crate::error::invalid(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = t.row(i);
            total += log_sum_exp(row) - row[y];
        }
        let value = Tensor::scalar(total / n as f64);
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    fn row_op(&mut self, name: &'static str, m: Var, r: Var, sign: f64) -> Result<Var> {
        let (vm, vr) = (self.value(m), self.value(r));
        let (n, d) = vm.dims2()?;
        if vr.numel() != d {
            return Err(mismatch(name, vm, vr));
        }
        let mut data = vm.data().to_vec();
        for i in 0..n {
            for (o, &b) in data[i * d..(i + 1) * d].iter_mut().zip(vr.data()) {
                *o += sign * b;
            }
        }
        let value = Tensor::new(vec![n, d], data)?;
        let rg = self.rg(&[m.0, r.0]);
        let op = if sign > 0.0 {
            Op::AddRow(m.0, r.0)
        } else {
            Op::SubRow(m.0, r.0)
        };
        Ok(self.push(value, op, rg))
    }

    /// Adds a `d`-element row vector to every row of an `n×d` matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        self.row_op("add_row", m, row, 1.0)
    }

    /// Subtracts a `d`-element row vector from every row of an `n×d` matrix.
    pub fn sub_row(&mut self, m: Var, row: Var) -> Result<Var> {
        self.row_op("sub_row", m, row, -1.0)
    }

    /// Picks flat (row-major) entries into a 1-D tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.numel()) {
            return Err(crate::error::invalid(format!(
                "gather index {bad} out of range for {:?}",
                t.shape()
            )));
        }
        let data = indices.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor::vector(data);
        let rg = self.rg(&[x.0]);
        Ok(self.push(value, Op::Gather(x.0, indices.to_vec()), rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(crate::error::invalid(format!(
                "row {bad} out of range for {n} rows"
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let value = Tensor::new(vec![rows.len(), d], data)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(value, Op::SelectRows(x.0, rows.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_cols(&tensors)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::ConcatCols(ids), rg))
    }

    /// Reverse pass from a scalar `loss`. Afterwards every node with
    /// `requires_grad` holds `∂loss/∂node` (zeros when it does not
    /// influence the loss).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], idx: usize, contrib: Tensor) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(acc) => {
                for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |j: usize| &self.nodes[j].value;
        let needs = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    self.accumulate(grads, a, zip_map(g, val(b), |gv, bv| gv * bv));
                }
                if needs(b) {
                    self.accumulate(grads, b, zip_map(g, val(a), |gv, av| gv * av));
                }
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.map(|v| v * s)),
            &Op::DivBy(a, s) => {
                let d = val(s).data()[0];
                if needs(a) {
                    self.accumulate(grads, a, g.map(|v| v / d));
                }
                if needs(s) {
                    // ∂(x/s)/∂s = −x/s² = −y/s
                    let gs = -dot(g.data(), y.data()) / d;
                    self.accumulate(grads, s, Tensor::new(val(s).shape().to_vec(), vec![gs])?);
                }
            }
            &Op::AddScalar(a) => self.accumulate(grads, a, g.clone()),
            &Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (n, k) = ta.dims2()?;
                let (_, m) = tb.dims2()?;
                if needs(a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; n * k];
                    for r in 0..n {
                        let grow = &g.data()[r * m..(r + 1) * m];
                        for p in 0..k {
                            let brow = &tb.data()[p * m..(p + 1) * m];
                            da[r * k + p] = dot(grow, brow);
                        }
                    }
                    self.accumulate(grads, a, Tensor::new(vec![n, k], da)?);
                }
                if needs(b) {
                    // dB = Aᵀ · G
                    let at = ta.transpose()?;
                    let mut db = vec![0.0; k * m];
                    matmul_into(at.data(), g.data(), &mut db, k, n, m);
                    self.accumulate(grads, b, Tensor::new(vec![k, m], db)?);
                }
            }
            &Op::Transpose(a) => self.accumulate(grads, a, g.transpose()?),
            &Op::Relu(a) => {
                let gx = zip_map(g, val(a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, a, gx);
            }
            &Op::Exp(a) => self.accumulate(grads, a, zip_map(g, y, |gv, yv| gv * yv)),
            &Op::Log(a) => self.accumulate(grads, a, zip_map(g, val(a), |gv, x| gv / x)),
            &Op::Sqrt(a) => {
                let gx = zip_map(g, y, |gv, yv| if yv > 0.0 { gv * 0.5 / yv } else { 0.0 });
                self.accumulate(grads, a, gx);
            }
            &Op::Square(a) => {
                self.accumulate(grads, a, zip_map(g, val(a), |gv, x| 2.0 * x * gv));
            }
            &Op::Huber(a) => {
                let gx = zip_map(g, val(a), |gv, x| gv * x.clamp(-1.0, 1.0));
                self.accumulate(grads, a, gx);
            }
            &Op::Sum(a) => self.accumulate(grads, a, Tensor::filled(val(a).shape(), g.item())),
            &Op::Mean(a) => {
                let t = val(a);
                let gv = g.item() / t.numel() as f64;
                self.accumulate(grads, a, Tensor::filled(t.shape(), gv));
            }
            &Op::RowNorm(a) => {
                let x = val(a);
                let (n, d) = x.dims2()?;
                let mut gx = vec![0.0; n * d];
                for r in 0..n {
                    let nr = y.data()[r];
                    if nr > 0.0 {
                        let s = g.data()[r] / nr;
                        for (o, &xv) in gx[r * d..(r + 1) * d].iter_mut().zip(x.row(r)) {
                            *o = s * xv;
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::new(vec![n, d], gx)?);
            }
            &Op::RowNormalize(a) => {
                let x = val(a);
                let (n, d) = x.dims2()?;
                let mut gx = vec![0.0; n * d];
                for r in 0..n {
                    let nr = norm(x.row(r));
                    let yr = y.row(r);
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let out = &mut gx[r * d..(r + 1) * d];
                    if nr > NORMALIZE_EPS {
                        let proj = dot(yr, gr);
                        for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                            *o = (gv - yv * proj) / nr;
                        }
                    } else {
                        for (o, &gv) in out.iter_mut().zip(gr) {
                            *o = gv / NORMALIZE_EPS;
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::new(vec![n, d], gx)?);
            }
            &Op::PairwiseSqDist(a) => {
                let x = val(a);
                let (n, d) = x.dims2()?;
                let mut gx = vec![0.0; n * d];
                for r in 0..n {
                    for c in 0..n {
                        if r == c {
                            continue;
                        }
                        let w = 2.0 * (g.data()[r * n + c] + g.data()[c * n + r]);
                        if w == 0.0 {
                            continue;
                        }
                        let (xr, xc) = (x.row(r), x.row(c));
                        for k in 0..d {
                            gx[r * d + k] += w * (xr[k] - xc[k]);
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::new(vec![n, d], gx)?);
            }
            &Op::PairwiseDist(a) => {
                let x = val(a);
                let (n, d) = x.dims2()?;
                let mut gx = vec![0.0; n * d];
                for r in 0..n {
                    for c in 0..n {
                        if r == c {
                            continue;
                        }
                        let dist = y.data()[r * n + c];
                        // Inside the ε-clamp the distance is constant.
                        if dist * dist <= DIST_EPS {
                            continue;
                        }
                        let w = (g.data()[r * n + c] + g.data()[c * n + r]) / dist;
                        if w == 0.0 {
                            continue;
                        }
                        let (xr, xc) = (x.row(r), x.row(c));
                        for k in 0..d {
                            gx[r * d + k] += w * (xr[k] - xc[k]);
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::new(vec![n, d], gx)?);
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let t = val(*logits);
                let (n, c) = t.dims2()?;
                let scale = g.item() / n as f64;
                let mut gx = vec![0.0; n * c];
                for (r, &lab) in labels.iter().enumerate() {
                    let row = t.row(r);
                    let lse = log_sum_exp(row);
                    for k in 0..c {
                        let p = (row[k] - lse).exp();
                        let target = if k == lab { 1.0 } else { 0.0 };
                        gx[r * c + k] = scale * (p - target);
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(vec![n, c], gx)?);
            }
            &Op::AddRow(m, r) | &Op::SubRow(m, r) => {
                let sign = if matches!(node.op, Op::AddRow(..)) { 1.0 } else { -1.0 };
                self.accumulate(grads, m, g.clone());
                if needs(r) {
                    let (n, d) = g.dims2()?;
                    let mut gr = vec![0.0; d];
                    for i in 0..n {
                        for (o, &gv) in gr.iter_mut().zip(g.row(i)) {
                            *o += sign * gv;
                        }
                    }
                    let shape = val(r).shape().to_vec();
                    self.accumulate(grads, r, Tensor::new(shape, gr)?);
                }
            }
            Op::Gather(a, indices) => {
                let mut gx = Tensor::zeros(val(*a).shape());
                for (&idx, &gv) in indices.iter().zip(g.data()) {
                    gx.data_mut()[idx] += gv;
                }
                self.accumulate(grads, *a, gx);
            }
            Op::SelectRows(a, rows) => {
                let mut gx = Tensor::zeros(val(*a).shape());
                let d = gx.shape()[1];
                for (k, &r) in rows.iter().enumerate() {
                    let src = &g.data()[k * d..(k + 1) * d];
                    for (o, &gv) in gx.data_mut()[r * d..(r + 1) * d].iter_mut().zip(src) {
                        *o += gv;
                    }
                }
                self.accumulate(grads, *a, gx);
            }
            Op::ConcatCols(parts) => {
                let (n, total) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (_, c) = val(p).dims2()?;
                    if needs(p) {
                        let mut gp = Vec::with_capacity(n * c);
                        for r in 0..n {
                            gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![n, c], gp)?);
                    }
                    offset += c;
                }
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same-shape zip")
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn sqdist_matrix(x: &Tensor) -> Result<Tensor> {
    let (n, _) = x.dims2()?;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    Tensor::new(vec![n, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn l2_normalize_three_four() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[3.0, 4.0]]));
        let y = g.l2_normalize(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);
    }

    #[test]
    fn pairwise_sqdist_example() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[0.0, 0.0], &[3.0, 4.0]]));
        let d = g.pairwise_sqdist(x).unwrap();
        assert_eq!(g.value(d).data(), &[0.0, 25.0, 25.0, 0.0]);
        let e = g.pairwise_dist(x).unwrap();
        assert_eq!(g.value(e).data(), &[0.0, 5.0, 5.0, 0.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = g.square(x);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_of_constant_loss_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let c = g.constant(Tensor::scalar(4.0));
        let loss = g.scale(c, 2.0);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn reused_tensor_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![3.0]));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap();
        let loss = g.sum(z);
        g.backward(loss).unwrap();
        // z = 2x² → dz/dx = 4x
        assert_eq!(g.grad(x).unwrap().data(), &[12.0]);
    }

    #[test]
    fn rejects_non_scalar_loss_and_bad_shapes() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let y = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        match g.add(x, y) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0, -1.0, 2.0]));
        let r = g.relu(x);
        let loss = g.sum(r);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 4]));
        let loss = g.softmax_cross_entropy(x, &[0, 3]).unwrap();
        assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-15);
        g.backward(loss).unwrap();
        let gx = g.grad(x).unwrap();
        assert!((gx.at(0, 0) - (0.25 - 1.0) / 2.0).abs() < 1e-15);
        assert!((gx.at(0, 1) - 0.125).abs() < 1e-15);
    }
}
