//! Prototype construction and squared-distance classification with
//! cross-entropy.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-class mean of support embeddings, differentiable w.r.t. them.
///
/// Implemented as a constant averaging matrix times the embedding matrix, so
/// row k is the arithmetic mean of class k's rows. Every class in
/// `0..ways` must be present.
pub fn compute_prototypes(
    tape: &mut Tape,
    support_emb: Var,
    support_y: &[usize],
    ways: usize,
) -> Result<Var> {
    let (n, _) = tape.value(support_emb).dims2()?;
    if support_y.len() != n {
        return Err(Error::invalid(format!(
            "{n} embedding rows but {} labels",
            support_y.len()
        )));
    }
    let mut counts = vec![0usize; ways];
    for &y in support_y {
        if y >= ways {
            return Err(Error::invalid(format!("label {y} out of range for {ways} classes")));
        }
        counts[y] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!(
            "class {missing} has no support rows; prototypes undefined"
        )));
    }
    let mut avg = vec![0.0; ways * n];
    for (i, &y) in support_y.iter().enumerate() {
        avg[y * n + i] = 1.0 / counts[y] as f64;
    }
    let m = tape.constant(Tensor::matrix(ways, n, avg)?);
    tape.matmul(m, support_emb)
}

/// Plain-value prototypes for frozen evaluation.
pub fn prototypes_values(emb: &Tensor, labels: &[usize], ways: usize) -> Result<Tensor> {
    let (n, d) = emb.dims2()?;
    if labels.len() != n {
        return Err(Error::invalid("label count does not match rows"));
    }
    let mut out = vec![0.0; ways * d];
    let mut counts = vec![0usize; ways];
    for (i, &y) in labels.iter().enumerate() {
        if y >= ways {
            return Err(Error::invalid(format!("label {y} out of range for {ways} classes")));
        }
        counts[y] += 1;
        for j in 0..d {
            out[y * d + j] += emb.data()[i * d + j];
        }
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("class {missing} has no rows")));
    }
    for (y, &c) in counts.iter().enumerate() {
        for j in 0..d {
            out[y * d + j] /= c as f64;
        }
    }
    Tensor::matrix(ways, d, out)
}

/// Logits are negative squared Euclidean distances to the prototypes.
pub fn classify(tape: &mut Tape, query_emb: Var, protos: Var) -> Result<Var> {
    let d = tape.pairwise_sq_dist(query_emb, protos)?;
    tape.scale(d, -1.0)
}

/// Plain-value logits for frozen evaluation.
pub fn classify_values(query_emb: &Tensor, protos: &Tensor) -> Result<Tensor> {
    let (m, d) = query_emb.dims2()?;
    let (k, d2) = protos.dims2()?;
    if d != d2 {
        return Err(Error::ShapeMismatch {
            op: "classify",
            lhs: query_emb.shape().to_vec(),
            rhs: protos.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            out[i * k + j] = -crate::tensor::sq_dist(query_emb.row(i), protos.row(j));
        }
    }
    Tensor::matrix(m, k, out)
}

/// Mean over rows of -log softmax(logits)[label], stabilized by max
/// subtraction inside the log-softmax.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (m, k) = tape.value(logits).dims2()?;
    if labels.len() != m {
        return Err(Error::invalid(format!("{m} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let ls = tape.log_softmax(logits)?;
    let mut mask = vec![0.0; m * k];
    for (i, &y) in labels.iter().enumerate() {
        mask[i * k + y] = 1.0;
    }
    let mask = tape.constant(Tensor::matrix(m, k, mask)?);
    let picked = tape.mul(ls, mask)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / m as f64)
}

/// Fraction of rows whose argmax logit equals the label; ties break to the
/// lowest class index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let (m, k) = (logits.shape()[0], logits.shape()[1]);
    let mut correct = 0usize;
    for i in 0..m {
        let row = logits.row(i);
        let mut best = 0usize;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / m as f64
}
