//! Prototype-anchored triplet loss: the query is the anchor, its class
//! prototype the positive, and the nearest different-class prototype(s) the
//! negatives. Negative selection is frozen during differentiation.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TripletConfig {
    /// Hinge margin between positive and negative squared distances.
    pub margin: f64,
    /// Number of nearest different-class prototypes per anchor; `None`
    /// resolves to ways-1.
    pub k_negatives: Option<usize>,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig { margin: 0.5, k_negatives: None }
    }
}

impl TripletConfig {
    pub fn validate(&self, ways: usize) -> Result<usize> {
        if self.margin < 0.0 {
            return Err(Error::invalid("triplet margin must be non-negative"));
        }
        let k = self.k_negatives.unwrap_or(ways.saturating_sub(1));
        if k == 0 || k > ways.saturating_sub(1) {
            return Err(Error::invalid(format!(
                "k_negatives {k} must be in 1..={} for {ways}-way episodes",
                ways.saturating_sub(1)
            )));
        }
        Ok(k)
    }
}

/// Extract entry `col` of a 1 x k row as a scalar node.
fn pick(tape: &mut Tape, row: Var, col: usize, k: usize) -> Result<Var> {
    let mut mask = vec![0.0; k];
    mask[col] = 1.0;
    let m = tape.constant(Tensor::matrix(1, k, mask)?);
    let picked = tape.mul(row, m)?;
    tape.sum(picked)
}

/// Different-class prototype indices sorted by squared distance ascending,
/// ties to the lowest index.
fn sorted_negatives(dists: &[f64], true_class: usize) -> Vec<usize> {
    let mut negs: Vec<usize> = (0..dists.len()).filter(|&j| j != true_class).collect();
    negs.sort_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap().then(a.cmp(&b)));
    negs
}

fn hinge(tape: &mut Tape, pos: Var, neg: Var, margin: f64) -> Result<Var> {
    let gap = tape.sub(pos, neg)?;
    let m = tape.constant(Tensor::scalar(margin));
    let arg = tape.add(gap, m)?;
    tape.relu(arg)
}

/// Shared core: hinge losses against an explicit negative list, averaged.
fn proto_triplet_against(
    tape: &mut Tape,
    query_emb: Var,
    protos: Var,
    true_class: usize,
    margin: f64,
    negatives: &[usize],
) -> Result<Var> {
    let (ways, _) = tape.value(protos).dims2()?;
    let d = tape.pairwise_sq_dist(query_emb, protos)?;
    let pos = pick(tape, d, true_class, ways)?;
    let mut acc: Option<Var> = None;
    for &j in negatives {
        let neg = pick(tape, d, j, ways)?;
        let h = hinge(tape, pos, neg, margin)?;
        acc = Some(match acc {
            None => h,
            Some(a) => tape.add(a, h)?,
        });
    }
    let total = acc.expect("negatives list is non-empty");
    tape.scale(total, 1.0 / negatives.len() as f64)
}

fn check_inputs(tape: &Tape, query_emb: Var, protos: Var, true_class: usize) -> Result<usize> {
    let (one, dq) = tape.value(query_emb).dims2()?;
    if one != 1 {
        return Err(Error::invalid("proto_triplet anchors one query row at a time"));
    }
    let (ways, dp) = tape.value(protos).dims2()?;
    if dq != dp {
        return Err(Error::ShapeMismatch {
            op: "proto-triplet",
            lhs: tape.value(query_emb).shape().to_vec(),
            rhs: tape.value(protos).shape().to_vec(),
        });
    }
    if ways < 2 {
        return Err(Error::invalid(
            "proto_triplet needs at least 2 prototypes; no negative exists",
        ));
    }
    if true_class >= ways {
        return Err(Error::invalid(format!(
            "true class {true_class} out of range for {ways} prototypes"
        )));
    }
    Ok(ways)
}

/// Hinge on the gap between the positive prototype distance and the nearest
/// different-class prototype distance:
/// max(0, ||f_a - f_p||^2 - ||f_a - f_n||^2 + margin).
pub fn proto_triplet(
    tape: &mut Tape,
    query_emb: Var,
    protos: Var,
    true_class: usize,
    margin: f64,
) -> Result<Var> {
    check_inputs(tape, query_emb, protos, true_class)?;
    let d = {
        // forward distances only, for negative selection
        let dv = tape.pairwise_sq_dist(query_emb, protos)?;
        tape.value(dv).data().to_vec()
    };
    let nearest = sorted_negatives(&d, true_class)[0];
    proto_triplet_against(tape, query_emb, protos, true_class, margin, &[nearest])
}

/// Mean of the hinge over the K nearest different-class prototypes.
pub fn proto_triplet_k(
    tape: &mut Tape,
    query_emb: Var,
    protos: Var,
    true_class: usize,
    margin: f64,
    k: usize,
) -> Result<Var> {
    let ways = check_inputs(tape, query_emb, protos, true_class)?;
    if k == 0 || k > ways - 1 {
        return Err(Error::invalid(format!(
            "k = {k} negatives requested but only {} different-class prototypes exist",
            ways - 1
        )));
    }
    let d = {
        let dv = tape.pairwise_sq_dist(query_emb, protos)?;
        tape.value(dv).data().to_vec()
    };
    let negs = sorted_negatives(&d, true_class);
    proto_triplet_against(tape, query_emb, protos, true_class, margin, &negs[..k])
}

/// Mean of `proto_triplet_k` over all query rows. Returns the scalar loss and
/// the per-query frozen negative selections.
pub fn task_proto_triplet_with(
    tape: &mut Tape,
    query_emb: Var,
    query_y: &[usize],
    protos: Var,
    config: &TripletConfig,
    frozen: Option<&[Vec<usize>]>,
) -> Result<(Var, Vec<Vec<usize>>)> {
    let (m, _) = tape.value(query_emb).dims2()?;
    if m == 0 || query_y.len() != m {
        return Err(Error::invalid(format!(
            "task_proto_triplet: {m} query rows, {} labels",
            query_y.len()
        )));
    }
    let (ways, _) = tape.value(protos).dims2()?;
    let k = config.validate(ways)?;
    if let Some(f) = frozen {
        if f.len() != m {
            return Err(Error::invalid("frozen selections do not cover the queries"));
        }
    }

    let mut selections = Vec::with_capacity(m);
    let mut acc: Option<Var> = None;
    for i in 0..m {
        let q = tape.gather_rows(query_emb, &[i])?;
        check_inputs(tape, q, protos, query_y[i])?;
        let negs: Vec<usize> = match frozen {
            Some(f) => f[i].clone(),
            None => {
                let dv = tape.pairwise_sq_dist(q, protos)?;
                let d = tape.value(dv).data().to_vec();
                sorted_negatives(&d, query_y[i])[..k].to_vec()
            }
        };
        let li = proto_triplet_against(tape, q, protos, query_y[i], config.margin, &negs)?;
        selections.push(negs);
        acc = Some(match acc {
            None => li,
            Some(a) => tape.add(a, li)?,
        });
    }
    let total = acc.expect("at least one query");
    let loss = tape.scale(total, 1.0 / m as f64)?;
    Ok((loss, selections))
}

/// Mean of `proto_triplet_k` over all query rows of a task.
pub fn task_proto_triplet(
    tape: &mut Tape,
    query_emb: Var,
    query_y: &[usize],
    protos: Var,
    config: &TripletConfig,
) -> Result<Var> {
    task_proto_triplet_with(tape, query_emb, query_y, protos, config, None).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn setup(protos: Vec<f64>, ways: usize, d: usize, query: Vec<f64>) -> (Tape, Var, Var) {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::matrix(ways, d, protos).unwrap());
        let q = t.leaf(Tensor::matrix(1, d, query).unwrap());
        (t, q, p)
    }

    #[test]
    fn satisfied_margin_gives_zero() {
        // f_a = f_p = (0,0), f_n = (3,0), margin 1: max(0, 0 - 9 + 1) = 0
        let (mut t, q, p) = setup(vec![0.0, 0.0, 3.0, 0.0], 2, 2, vec![0.0, 0.0]);
        let l = proto_triplet(&mut t, q, p, 0, 1.0).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn violated_margin_hand_value() {
        // f_a=(0,0), f_p=(1,0), f_n=(1,1): pos 1, neg 2, margin 2 -> 1
        let (mut t, q, p) = setup(vec![1.0, 0.0, 1.0, 1.0], 2, 2, vec![0.0, 0.0]);
        let l = proto_triplet(&mut t, q, p, 0, 2.0).unwrap();
        assert_relative_eq!(t.value(l).item(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn zero_margin_equidistant_boundary() {
        let (mut t, q, p) = setup(vec![1.0, 0.0, -1.0, 0.0], 2, 2, vec![0.0, 0.0]);
        let l = proto_triplet(&mut t, q, p, 0, 0.0).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn single_class_rejected() {
        let (mut t, q, p) = setup(vec![1.0, 0.0], 1, 2, vec![0.0, 0.0]);
        assert!(proto_triplet(&mut t, q, p, 0, 0.5).is_err());
    }

    #[test]
    fn k_too_large_rejected() {
        let (mut t, q, p) = setup(vec![1.0, 0.0, -1.0, 0.0], 2, 2, vec![0.0, 0.0]);
        assert!(proto_triplet_k(&mut t, q, p, 0, 0.5, 2).is_err());
    }

    #[test]
    fn k1_reduces_to_plain_bitwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..1000 {
            let ways = rng.gen_range(2..6);
            let d = rng.gen_range(1..5);
            let protos: Vec<f64> = (0..ways * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let query: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let tc = rng.gen_range(0..ways);
            let margin = rng.gen_range(0.0..2.0);

            let (mut t1, q1, p1) = setup(protos.clone(), ways, d, query.clone());
            let a = proto_triplet(&mut t1, q1, p1, tc, margin).unwrap();
            let (mut t2, q2, p2) = setup(protos, ways, d, query);
            let b = proto_triplet_k(&mut t2, q2, p2, tc, margin, 1).unwrap();
            assert_eq!(
                t1.value(a).item().to_bits(),
                t2.value(b).item().to_bits(),
                "K=1 must equal the plain hinge bit-for-bit"
            );
        }
    }

    #[test]
    fn all_negatives_beyond_margin_gives_zero() {
        let protos = vec![0.0, 0.0, 10.0, 0.0, 0.0, 10.0, -10.0, 0.0];
        let (mut t, q, p) = setup(protos, 4, 2, vec![0.1, 0.0]);
        let l = proto_triplet_k(&mut t, q, p, 0, 0.5, 3).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn three_class_k2_mean_of_two_hinges() {
        // anchor (0,0), positive proto (1,0) -> pos = 1
        // negatives (1,1) -> 2 and (0,2) -> 4; margin 2
        // hinges: max(0, 1-2+2) = 1 and max(0, 1-4+2) = 0; mean = 0.5
        let protos = vec![1.0, 0.0, 1.0, 1.0, 0.0, 2.0];
        let (mut t, q, p) = setup(protos, 3, 2, vec![0.0, 0.0]);
        let l = proto_triplet_k(&mut t, q, p, 0, 2.0, 2).unwrap();
        assert_relative_eq!(t.value(l).item(), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn task_means_per_query_losses() {
        // protos (1,0) and (1,1), margin 2.
        // query (0,0) of class 0: pos 1, neg 2 -> hinge 1
        // query (1,5) of class 1: pos 16, neg 25 -> hinge 0
        // mean = 0.5
        let mut t = Tape::new();
        let protos = t.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 1.0]).unwrap());
        let queries = t.leaf(Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 5.0]).unwrap());
        let cfg = TripletConfig { margin: 2.0, k_negatives: Some(1) };
        let (loss, _) =
            task_proto_triplet_with(&mut t, queries, &[0, 1], protos, &cfg, None).unwrap();
        assert_relative_eq!(t.value(loss).item(), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn single_query_task_equals_proto_triplet_k() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let protos: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let query: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let mut t = Tape::new();
        let p = t.leaf(Tensor::matrix(4, 2, protos.clone()).unwrap());
        let q = t.leaf(Tensor::matrix(1, 2, query.clone()).unwrap());
        let cfg = TripletConfig { margin: 0.5, k_negatives: Some(2) };
        let (task_loss, _) = task_proto_triplet_with(&mut t, q, &[1], p, &cfg, None).unwrap();

        let (mut t2, q2, p2) = setup(protos, 4, 2, query);
        let single = proto_triplet_k(&mut t2, q2, p2, 1, 0.5, 2).unwrap();
        assert_eq!(
            t.value(task_loss).item().to_bits(),
            t2.value(single).item().to_bits()
        );
    }

    #[test]
    fn queries_at_prototypes_with_satisfied_margins_give_zero() {
        let mut t = Tape::new();
        let protos = t.leaf(Tensor::matrix(3, 2, vec![0.0, 0.0, 10.0, 0.0, 0.0, 10.0]).unwrap());
        let queries =
            t.leaf(Tensor::matrix(3, 2, vec![0.0, 0.0, 10.0, 0.0, 0.0, 10.0]).unwrap());
        let cfg = TripletConfig { margin: 1.0, k_negatives: None };
        let (loss, _) =
            task_proto_triplet_with(&mut t, queries, &[0, 1, 2], protos, &cfg, None).unwrap();
        assert_eq!(t.value(loss).item(), 0.0);
    }

    proptest::proptest! {
        #[test]
        fn non_negative_and_monotone_in_margin(
            seed in 0u64..500,
            m1 in 0.0f64..1.0,
            dm in 0.0f64..1.0,
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let ways = rng.gen_range(2..5);
            let protos: Vec<f64> = (0..ways * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let query: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let tc = rng.gen_range(0..ways);

            let (mut t1, q1, p1) = setup(protos.clone(), ways, 3, query.clone());
            let a = proto_triplet_k(&mut t1, q1, p1, tc, m1, ways - 1).unwrap();
            let (mut t2, q2, p2) = setup(protos, ways, 3, query);
            let b = proto_triplet_k(&mut t2, q2, p2, tc, m1 + dm, ways - 1).unwrap();

            proptest::prop_assert!(t1.value(a).item() >= 0.0);
            proptest::prop_assert!(t2.value(b).item() >= t1.value(a).item());
        }
    }

    #[test]
    fn gradient_matches_finite_differences_with_frozen_selection() {
        use crate::gradcheck::finite_diff_check;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for case in 0..20u64 {
            let emb: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let x = Tensor::matrix(5, 3, emb).unwrap();
            let query_y = [0, 1];
            let cfg = TripletConfig { margin: 0.4 + 0.05 * case as f64, k_negatives: Some(2) };

            // freeze selections at the base point
            let frozen = {
                let mut t = Tape::new();
                let v = t.leaf(x.clone());
                let sup = t.gather_rows(v, &[0, 1, 2]).unwrap();
                let qry = t.gather_rows(v, &[3, 4]).unwrap();
                let protos =
                    crate::protonet::compute_prototypes(&mut t, sup, &[0, 1, 2], 3).unwrap();
                let (_, sel) =
                    task_proto_triplet_with(&mut t, qry, &query_y, protos, &cfg, None).unwrap();
                sel
            };
            let err = finite_diff_check(
                |t, v| {
                    let sup = t.gather_rows(v, &[0, 1, 2])?;
                    let qry = t.gather_rows(v, &[3, 4])?;
                    let protos = crate::protonet::compute_prototypes(t, sup, &[0, 1, 2], 3)?;
                    let (l, _) = task_proto_triplet_with(
                        t,
                        qry,
                        &query_y,
                        protos,
                        &cfg,
                        Some(&frozen),
                    )?;
                    Ok(l)
                },
                &x,
            )
            .unwrap();
            assert!(err <= 1e-5, "case {case}: max_rel_err = {err}");
        }
    }
}
