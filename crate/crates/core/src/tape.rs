//! Reverse-mode differentiation over a Wengert tape.
//!
//! Operations are recorded in forward order together with their forward
//! values; `backward` replays them in reverse, accumulating vector-Jacobian
//! products. Discrete selections (argmin/argmax inside min/max ops, the
//! per-row min/max indices of `row_min_max_norm`) are frozen at forward time
//! and treated as constants during differentiation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    /// Max over all elements; the selected flat index is frozen at forward time.
    MaxOverSet(Var, usize),
    MinOverSet(Var, usize),
    Square(Var),
    Sqrt(Var),
    /// Row-wise log-softmax of a rank-2 tensor.
    LogSoftmax(Var),
    /// Row selection; duplicate indices scatter-add in backward.
    GatherRows(Var, Vec<usize>),
    /// Entry (i,j) = sum_k (A[i,k] - B[j,k])^2.
    PairwiseSqDist(Var, Var),
    /// Per-row min-max normalization with frozen min/max column indices:
    /// out[i,j] = (x[i,j] - x[i,min_idx[i]]) / max(x[i,max_idx[i]] - x[i,min_idx[i]], eps).
    RowMinMaxNorm {
        input: Var,
        min_idx: Vec<usize>,
        max_idx: Vec<usize>,
        eps: f64,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of a scalar loss with respect to every tape node.
///
/// Nodes not on any path to the loss hold the zero tensor of their shape.
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    /// Gradient tensor for `v`. Panics if `v` is not from the same tape.
    pub fn get(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Gradient for `v` if the id is in range and the shape matches `expect`.
    pub fn checked_get(&self, v: Var, expect: &[usize]) -> Result<&Tensor> {
        let g = self.grads.get(v.0).ok_or_else(|| {
            Error::invalid(format!("no gradient recorded for node {}", v.0))
        })?;
        if g.shape() != expect {
            return Err(Error::ShapeMismatch {
                op: "gradient lookup",
                lhs: g.shape().to_vec(),
                rhs: expect.to_vec(),
            });
        }
        Ok(g)
    }
}

/// Append-only operation tape. One tape per differentiation pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shapes_match(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Register an input or parameter tensor as a leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Register a constant (a leaf whose gradient is never used).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op_name: &'static str, op: Op, value: Tensor) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::invalid(format!(
                "{op_name} produced a non-finite value"
            )));
        }
        Ok(self.push(op, value))
    }

    // ---- forward operation catalogue -----------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        shapes_match("add", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked("add", Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        shapes_match("subtract", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked("subtract", Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        shapes_match("elementwise-multiply", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked("elementwise-multiply", Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked("scalar-scale", Op::Scale(a, c), out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matrix-multiply",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for j in 0..m {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let out = Tensor::matrix(n, m, out)?;
        self.push_checked("matrix-multiply", Op::Matmul(a, b), out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked("relu", Op::Relu(a), out)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x.exp()).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked("exp", Op::Exp(a), out)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::invalid(format!(
                "log of non-positive value {bad}; clamp inputs first"
            )));
        }
        let data = self.value(a).data().iter().map(|x| x.ln()).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked("log", Op::Log(a), out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push_checked("sum", Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.push_checked("mean", Op::Mean(a), Tensor::scalar(s * (1.0 / n)))
    }

    /// Max over all elements; ties resolve to the lowest flat index and the
    /// selection stays fixed through the backward pass.
    pub fn max_over_set(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data();
        let mut idx = 0;
        for (i, &v) in data.iter().enumerate() {
            if v > data[idx] {
                idx = i;
            }
        }
        let out = Tensor::scalar(data[idx]);
        self.push_checked("max-over-set", Op::MaxOverSet(a, idx), out)
    }

    /// Min over all elements; ties resolve to the lowest flat index.
    pub fn min_over_set(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data();
        let mut idx = 0;
        for (i, &v) in data.iter().enumerate() {
            if v < data[idx] {
                idx = i;
            }
        }
        let out = Tensor::scalar(data[idx]);
        self.push_checked("min-over-set", Op::MinOverSet(a, idx), out)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * x).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked("square", Op::Square(a), out)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x < 0.0) {
            return Err(Error::invalid(format!("square-root of negative value {bad}")));
        }
        let data = self.value(a).data().iter().map(|x| x.sqrt()).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked("square-root", Op::Sqrt(a), out)
    }

    /// Row-wise log-softmax, stabilized by max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        let x = self.value(a).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &x[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..m {
                out[i * m + j] = row[j] - lse;
            }
        }
        let out = Tensor::matrix(n, m, out)?;
        self.push_checked("softmax-with-log", Op::LogSoftmax(a), out)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::invalid(format!(
                "gather-rows index {bad} out of range for {n} rows"
            )));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            out.extend_from_slice(&x[r * m..(r + 1) * m]);
        }
        let out = Tensor::matrix(rows.len(), m, out)?;
        self.push_checked("gather-rows", Op::GatherRows(a, rows.to_vec()), out)
    }

    /// Entry (i,j) = squared Euclidean distance between row i of `a` and
    /// row j of `b`. Differentiable with respect to both inputs.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2()?;
        let (m, d2) = self.value(b).dims2()?;
        if d != d2 {
            return Err(Error::ShapeMismatch {
                op: "pairwise-sq-dist",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ar = &av[i * d..(i + 1) * d];
            for j in 0..m {
                let br = &bv[j * d..(j + 1) * d];
                out[i * m + j] = crate::tensor::sq_dist(ar, br);
            }
        }
        let out = Tensor::matrix(n, m, out)?;
        self.push_checked("pairwise-sq-dist", Op::PairwiseSqDist(a, b), out)
    }

    /// Per-row min-max normalization with frozen index selections.
    ///
    /// `min_idx[i]`/`max_idx[i]` name the columns holding row i's reference
    /// minimum and maximum. Output entry (i,j) is
    /// `(x[i,j] - x[i,min]) / max(x[i,max] - x[i,min], eps)`, so the selected
    /// minimum maps to exactly 0 and the selected maximum to exactly 1
    /// whenever the denominator is not clamped.
    pub fn row_min_max_norm(
        &mut self,
        a: Var,
        min_idx: &[usize],
        max_idx: &[usize],
        eps: f64,
    ) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        if min_idx.len() != n || max_idx.len() != n {
            return Err(Error::invalid(format!(
                "row-min-max-norm needs one min/max index per row: {n} rows, {} min, {} max",
                min_idx.len(),
                max_idx.len()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("row-min-max-norm eps must be positive"));
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let lo = x[i * m + min_idx[i]];
            let hi = x[i * m + max_idx[i]];
            let denom = (hi - lo).max(eps);
            for j in 0..m {
                out[i * m + j] = (x[i * m + j] - lo) / denom;
            }
        }
        let out = Tensor::matrix(n, m, out)?;
        self.push_checked(
            "row-min-max-norm",
            Op::RowMinMaxNorm {
                input: a,
                min_idx: min_idx.to_vec(),
                max_idx: max_idx.to_vec(),
                eps,
            },
            out,
        )
    }

    // ---- composed helpers ----------------------------------------------

    /// max(v, c) elementwise against a constant, as relu(v - c) + c.
    /// Gradient flows only where v > c.
    pub fn clamp_min(&mut self, v: Var, c: f64) -> Result<Var> {
        let shape = self.value(v).shape().to_vec();
        let cv = self.constant(Tensor::full(shape, c));
        let shifted = self.sub(v, cv)?;
        let r = self.relu(shifted)?;
        self.add(r, cv)
    }

    /// x^a via exp(a log x) for fractional exponents; the exponent-1 case
    /// returns the input unchanged so identity powers stay bit-exact.
    pub fn powf(&mut self, v: Var, a: f64) -> Result<Var> {
        if a == 1.0 {
            return Ok(v);
        }
        let l = self.log(v)?;
        let s = self.scale(l, a)?;
        self.exp(s)
    }

    // ---- reverse pass ----------------------------------------------------

    /// Reverse-mode accumulation from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        grads[loss.0].data_mut()[0] = 1.0;

        for id in (0..=loss.0).rev() {
            let g = grads[id].clone();
            if g.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.data(), |x| x);
                    accumulate(&mut grads[b.0], g.data(), |x| x);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], g.data(), |x| x);
                    accumulate(&mut grads[b.0], g.data(), |x| -x);
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a.0].value.data().to_vec();
                    let bv = self.nodes[b.0].value.data().to_vec();
                    for (i, gi) in g.data().iter().enumerate() {
                        grads[a.0].data_mut()[i] += gi * bv[i];
                    }
                    for (i, gi) in g.data().iter().enumerate() {
                        grads[b.0].data_mut()[i] += gi * av[i];
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads[a.0], g.data(), |x| x * c);
                }
                Op::Matmul(a, b) => {
                    let (n, k) = self.nodes[a.0].value.dims2().unwrap();
                    let (_, m) = self.nodes[b.0].value.dims2().unwrap();
                    let av = self.nodes[a.0].value.data().to_vec();
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let gv = g.data();
                    // dA = G . B^T
                    {
                        let ga = grads[a.0].data_mut();
                        for i in 0..n {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..m {
                                    acc += gv[i * m + j] * bv[p * m + j];
                                }
                                ga[i * k + p] += acc;
                            }
                        }
                    }
                    // dB = A^T . G
                    {
                        let gb = grads[b.0].data_mut();
                        for p in 0..k {
                            for j in 0..m {
                                let mut acc = 0.0;
                                for i in 0..n {
                                    acc += av[i * k + p] * gv[i * m + j];
                                }
                                gb[p * m + j] += acc;
                            }
                        }
                    }
                }
                Op::Relu(a) => {
                    let xv = self.nodes[a.0].value.data().to_vec();
                    for (i, gi) in g.data().iter().enumerate() {
                        if xv[i] > 0.0 {
                            grads[a.0].data_mut()[i] += gi;
                        }
                    }
                }
                Op::Exp(a) => {
                    let yv = self.nodes[id].value.data().to_vec();
                    for (i, gi) in g.data().iter().enumerate() {
                        grads[a.0].data_mut()[i] += gi * yv[i];
                    }
                }
                Op::Log(a) => {
                    let xv = self.nodes[a.0].value.data().to_vec();
                    for (i, gi) in g.data().iter().enumerate() {
                        grads[a.0].data_mut()[i] += gi / xv[i];
                    }
                }
                Op::Sum(a) => {
                    let gs = g.item();
                    accumulate_broadcast(&mut grads[a.0], gs);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.len() as f64;
                    let gs = g.item() * (1.0 / n);
                    accumulate_broadcast(&mut grads[a.0], gs);
                }
                Op::MaxOverSet(a, idx) | Op::MinOverSet(a, idx) => {
                    grads[a.0].data_mut()[*idx] += g.item();
                }
                Op::Square(a) => {
                    let xv = self.nodes[a.0].value.data().to_vec();
                    for (i, gi) in g.data().iter().enumerate() {
                        grads[a.0].data_mut()[i] += gi * 2.0 * xv[i];
                    }
                }
                Op::Sqrt(a) => {
                    let yv = self.nodes[id].value.data().to_vec();
                    for (i, gi) in g.data().iter().enumerate() {
                        if *gi != 0.0 {
                            grads[a.0].data_mut()[i] += gi * 0.5 / yv[i];
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let (n, m) = self.nodes[id].value.dims2().unwrap();
                    let yv = self.nodes[id].value.data().to_vec();
                    let gv = g.data();
                    let ga = grads[a.0].data_mut();
                    for i in 0..n {
                        let gsum: f64 = gv[i * m..(i + 1) * m].iter().sum();
                        for j in 0..m {
                            let p = yv[i * m + j].exp();
                            ga[i * m + j] += gv[i * m + j] - p * gsum;
                        }
                    }
                }
                Op::GatherRows(a, rows) => {
                    let (_, m) = self.nodes[a.0].value.dims2().unwrap();
                    let gv = g.data();
                    let ga = grads[a.0].data_mut();
                    for (out_r, &src_r) in rows.iter().enumerate() {
                        for j in 0..m {
                            ga[src_r * m + j] += gv[out_r * m + j];
                        }
                    }
                }
                Op::PairwiseSqDist(a, b) => {
                    let (n, d) = self.nodes[a.0].value.dims2().unwrap();
                    let (m, _) = self.nodes[b.0].value.dims2().unwrap();
                    let av = self.nodes[a.0].value.data().to_vec();
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let gv = g.data();
                    {
                        let ga = grads[a.0].data_mut();
                        for i in 0..n {
                            for j in 0..m {
                                let gij = gv[i * m + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                for t in 0..d {
                                    ga[i * d + t] +=
                                        gij * 2.0 * (av[i * d + t] - bv[j * d + t]);
                                }
                            }
                        }
                    }
                    {
                        let gb = grads[b.0].data_mut();
                        for i in 0..n {
                            for j in 0..m {
                                let gij = gv[i * m + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                for t in 0..d {
                                    gb[j * d + t] +=
                                        gij * 2.0 * (bv[j * d + t] - av[i * d + t]);
                                }
                            }
                        }
                    }
                }
                Op::RowMinMaxNorm { input, min_idx, max_idx, eps } => {
                    let (n, m) = self.nodes[input.0].value.dims2().unwrap();
                    let xv = self.nodes[input.0].value.data().to_vec();
                    let gv = g.data();
                    let gx = grads[input.0].data_mut();
                    for i in 0..n {
                        let jmin = min_idx[i];
                        let jmax = max_idx[i];
                        let lo = xv[i * m + jmin];
                        let hi = xv[i * m + jmax];
                        let raw = hi - lo;
                        let denom = raw.max(*eps);
                        let clamped = raw < *eps;
                        let inv = 1.0 / denom;
                        for j in 0..m {
                            let gij = gv[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let num = xv[i * m + j] - lo;
                            // d/dx[i,j] of the numerator
                            gx[i * m + j] += gij * inv;
                            // d/d lo: numerator -1/denom; denominator +num/denom^2
                            gx[i * m + jmin] += gij * (-inv);
                            if !clamped {
                                gx[i * m + jmin] += gij * num * inv * inv;
                                gx[i * m + jmax] += gij * (-num) * inv * inv;
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(dst: &mut Tensor, src: &[f64], f: impl Fn(f64) -> f64) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += f(*s);
    }
}

fn accumulate_broadcast(dst: &mut Tensor, v: f64) {
    for d in dst.data_mut().iter_mut() {
        *d += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn leafv(tape: &mut Tape, v: Vec<f64>) -> Var {
        tape.leaf(Tensor::from_vec(v))
    }

    #[test]
    fn relu_definition() {
        let mut t = Tape::new();
        let x = leafv(&mut t, vec![-1.0, 0.0, 2.0]);
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i3 = t.leaf(Tensor::eye(3));
        let a = t
            .leaf(Tensor::matrix(3, 4, (0..12).map(|v| v as f64 * 0.5 - 2.0).collect()).unwrap());
        let y = t.matmul(i3, a).unwrap();
        assert_eq!(t.value(y).data(), t.value(a).data());
    }

    #[test]
    fn sum_of_squares() {
        let mut t = Tape::new();
        let x = leafv(&mut t, vec![3.0, 4.0]);
        let sq = t.square(x).unwrap();
        let s = t.sum(sq).unwrap();
        assert_eq!(t.value(s).item(), 25.0);
    }

    #[test]
    fn pairwise_sq_dist_hand() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        let d = t.pairwise_sq_dist(a, a).unwrap();
        assert_eq!(t.value(d).data(), &[0.0, 25.0, 25.0, 0.0]);
    }

    #[test]
    fn pairwise_sq_dist_matches_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut t = Tape::new();
        let av = t.leaf(Tensor::matrix(4, 3, a.clone()).unwrap());
        let bv = t.leaf(Tensor::matrix(5, 3, b.clone()).unwrap());
        let d = t.pairwise_sq_dist(av, bv).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..3 {
                    let diff = a[i * 3 + k] - b[j * 3 + k];
                    acc += diff * diff;
                }
                assert_relative_eq!(t.value(d).data()[i * 5 + j], acc, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn backward_sum_square() {
        let mut t = Tape::new();
        let x = leafv(&mut t, vec![1.0, -2.0]);
        let sq = t.square(x).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_constant_gives_zero_gradients() {
        let mut t = Tape::new();
        let x = leafv(&mut t, vec![1.0, 2.0, 3.0]);
        let c = t.scalar(5.0);
        let g = t.backward(c).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = leafv(&mut t, vec![1.0, 2.0]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = leafv(&mut t, vec![1.0, 2.0]);
        let b = leafv(&mut t, vec![1.0, 2.0, 3.0]);
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn log_of_non_positive_rejected() {
        let mut t = Tape::new();
        let x = leafv(&mut t, vec![1.0, 0.0]);
        assert!(t.log(x).is_err());
        let y = leafv(&mut t, vec![1.0, -3.0]);
        assert!(t.log(y).is_err());
    }

    #[test]
    fn min_max_tie_goes_to_lowest_index_and_gradient_is_selective() {
        let mut t = Tape::new();
        let x = leafv(&mut t, vec![2.0, 5.0, 5.0, 1.0, 1.0]);
        let mx = t.max_over_set(x).unwrap();
        let g = t.backward(mx).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 1.0, 0.0, 0.0, 0.0]);

        let mut t = Tape::new();
        let x = leafv(&mut t, vec![2.0, 5.0, 5.0, 1.0, 1.0]);
        let mn = t.min_over_set(x).unwrap();
        assert_eq!(t.value(mn).item(), 1.0);
        let g = t.backward(mn).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn gather_rows_scatter_adds_duplicates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let gth = t.gather_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(t.value(gth).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let s = t.sum(gth).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn clamp_min_passthrough_and_floor() {
        let mut t = Tape::new();
        let x = leafv(&mut t, vec![0.5, 1e-15, -3.0]);
        let y = t.clamp_min(x, 1e-12).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 1e-12, 1e-12]);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1000.0]).unwrap());
        let ls = t.log_softmax(x).unwrap();
        for i in 0..2 {
            let p: f64 = t.value(ls).row(i).iter().map(|v| v.exp()).sum();
            assert_relative_eq!(p, 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn row_min_max_norm_endpoints_exact() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 3, vec![0.3, 0.1, 0.9]).unwrap());
        let h = t.row_min_max_norm(x, &[1], &[2], 1e-12).unwrap();
        let hv = t.value(h).data();
        assert_eq!(hv[1], 0.0);
        assert_eq!(hv[2], 1.0);
        assert_relative_eq!(hv[0], 0.25, max_relative = 1e-12);
    }

    #[test]
    fn row_min_max_norm_degenerate_row_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 3, vec![0.5, 0.5, 0.5]).unwrap());
        let h = t.row_min_max_norm(x, &[0], &[1], 1e-12).unwrap();
        assert_eq!(t.value(h).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn tape_determinism_bit_identical() {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::matrix(3, 2, vec![0.3, -1.2, 0.7, 2.0, -0.5, 0.9]).unwrap());
            let w = t.leaf(Tensor::matrix(2, 2, vec![0.11, -0.7, 0.35, 1.4]).unwrap());
            let e = t.matmul(x, w).unwrap();
            let r = t.relu(e).unwrap();
            let d = t.pairwise_sq_dist(r, r).unwrap();
            let s = t.mean(d).unwrap();
            let g = t.backward(s).unwrap();
            (
                t.value(s).data().to_vec(),
                g.get(x).data().to_vec(),
                g.get(w).data().to_vec(),
            )
        };
        let (s1, gx1, gw1) = run();
        let (s2, gx2, gw2) = run();
        assert!(s1.iter().zip(&s2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gx1.iter().zip(&gx2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gw1.iter().zip(&gw2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
