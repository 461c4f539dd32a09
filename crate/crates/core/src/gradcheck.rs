//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative step used for central differences.
pub const FD_STEP: f64 = 1e-6;

/// Compare the analytic gradient of `f` at `x` against central finite
/// differences, returning the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
///
/// `f` builds a scalar from a single leaf on a fresh tape. It is evaluated
/// once for the analytic gradient and twice per coordinate for the
/// differences, so any discrete selections inside `f` must be frozen by the
/// caller (capture them in the closure) or the comparison straddles a kink.
/// A non-finite value anywhere is reported as failure via `f64::INFINITY`.
pub fn finite_diff_check<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(t.clone());
        let out = f(&mut tape, leaf)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(leaf).data().to_vec();

    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        let h = FD_STEP * x.data()[i].abs().max(1.0);
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fp = eval(&plus)?;
        let fm = eval(&minus)?;
        let numeric = (fp - fm) / (2.0 * h);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Ok(f64::INFINITY);
        }
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_rounding() {
        // f = x^2 at x = 3: central differences are exact for quadratics.
        let x = Tensor::scalar(3.0);
        let err = finite_diff_check(
            |t, v| {
                let sq = t.square(v)?;
                t.sum(sq)
            },
            &x,
        )
        .unwrap();
        assert!(err <= 1e-8, "max_rel_err = {err}");
    }

    #[test]
    fn mean_of_matmul_matches() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xv: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = Tensor::matrix(3, 4, w).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let x = t.constant(Tensor::matrix(4, 2, xv.clone()).unwrap());
                let y = t.matmul(v, x)?;
                t.mean(y)
            },
            &w,
        )
        .unwrap();
        assert!(err <= 1e-6, "max_rel_err = {err}");
    }

    #[test]
    fn every_catalogue_op_passes_on_100_seeds() {
        use rand::{Rng, SeedableRng};
        // A composite graph exercising each differentiable catalogue op plus
        // pairwise-sq-dist and the row normalization.
        for seed in 0..100u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let xv: Vec<f64> = (0..12).map(|_| rng.gen_range(0.5..2.0)).collect();
            let x = Tensor::matrix(4, 3, xv).unwrap();
            let other: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let err = finite_diff_check(
                |t, v| {
                    let o = t.constant(Tensor::matrix(3, 4, other.clone()).unwrap());
                    let mm = t.matmul(v, o)?; // 4x4
                    let r = t.relu(mm)?;
                    let sq = t.square(r)?;
                    let sc = t.scale(sq, 0.25)?;
                    let l = t.log(v)?; // inputs strictly positive
                    let e = t.exp(l)?;
                    let s = t.sqrt(e)?;
                    let prod = t.mul(s, v)?;
                    let diff = t.sub(prod, v)?;
                    let addv = t.add(diff, v)?;
                    let pd = t.pairwise_sq_dist(addv, addv)?; // 4x4, zero diagonal
                    let norm = t.row_min_max_norm(pd, &[0, 1, 2, 3], &[1, 2, 3, 0], 1e-12)?;
                    let ls = t.log_softmax(sc)?;
                    let g = t.gather_rows(ls, &[0, 2, 2])?;
                    let m1 = t.mean(g)?;
                    let m2 = t.sum(norm)?;
                    let mx = t.max_over_set(pd)?;
                    let mn = t.min_over_set(sc)?;
                    let a = t.add(m1, m2)?;
                    let b = t.sub(mx, mn)?;
                    let tot = t.add(a, b)?;
                    t.mean(tot)
                },
                &x,
            )
            .unwrap();
            assert!(err <= 1e-5, "seed {seed}: max_rel_err = {err}");
        }
    }
}
