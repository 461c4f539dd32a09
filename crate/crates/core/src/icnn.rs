//! The inter/intra-class nearest-neighbor score and its loss.
//!
//! Each scored point gets three per-point terms built from its k-nearest
//! same-class and different-class neighborhoods: a separation penalty λ over
//! min-max normalized distances, a variance penalty ω, and the same-class
//! neighborhood ratio γ. The aggregate score is the mean of
//! λ^(1/p)·ω^(1/q)·γ^(1/r); the loss is its negative logarithm. Gradients
//! flow through the distances only: neighborhood membership and the per-point
//! min/max selections are frozen constants.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{euclidean, Tensor};

/// Squared-distance floor applied before the tape square-root, so coincident
/// points keep finite derivatives. Far below any meaningful distance.
const DIST_SQ_FLOOR: f64 = 1e-24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaVariant {
    /// (λ_x̃ + λ_x) / |N_x̃ ∪ N_x|
    Original,
    /// λ_x̃/|N_x̃| + λ_x/|N_x|
    Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// ω shared across the batch: (k1²+k2²) − Var(λ_x̃) − Var(λ_x), variances
    /// taken over the scored points (population).
    Batch,
    /// ω per point from the variance of its own neighbor h values.
    PerPoint,
}

/// Which task data is scored (the ablation grid's data choices).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IcnnMode {
    SupportOnly,
    SupportPlusQuery,
    QueryVsPrototypes,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct IcnnConfig {
    /// Neighborhood size cap; `None` resolves per scored set to
    /// max(1, min(5, fewest same-class candidates, fewest different-class
    /// candidates)).
    pub k_neighbors: Option<usize>,
    pub p: f64,
    pub q: f64,
    pub r: f64,
    pub lambda_variant: LambdaVariant,
    pub variance_mode: VarianceMode,
    pub epsilon: f64,
    pub mode: IcnnMode,
}

impl Default for IcnnConfig {
    fn default() -> Self {
        IcnnConfig {
            k_neighbors: None,
            p: 1.0,
            q: 1.0,
            r: 1.0,
            lambda_variant: LambdaVariant::Split,
            variance_mode: VarianceMode::Batch,
            epsilon: 1e-12,
            mode: IcnnMode::Full,
        }
    }
}

impl IcnnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-6) {
            return Err(Error::invalid(format!(
                "icnn epsilon must lie in (0, 1e-6], got {}",
                self.epsilon
            )));
        }
        if self.p <= 0.0 || self.q <= 0.0 || self.r <= 0.0 {
            return Err(Error::invalid("icnn exponents p, q, r must be positive"));
        }
        if self.k_neighbors == Some(0) {
            return Err(Error::invalid("k_neighbors must be positive"));
        }
        Ok(())
    }
}

/// One point's neighbor lists: `(pool index, Euclidean distance)`, ascending
/// by distance with ties on the lower index. `same` never contains the point
/// itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub same: Vec<(usize, f64)>,
    pub diff: Vec<(usize, f64)>,
}

/// Neighborhoods for every scored point plus the batch-wide maxima
/// k1 = max |N_x̃| and k2 = max |N_x|.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodIndex {
    pub points: Vec<Neighborhood>,
    pub k1: usize,
    pub k2: usize,
}

/// Resolve the automatic neighborhood size for a scored set.
pub fn auto_k(point_labels: &[usize], pool_labels: &[usize], exclude_identity: bool) -> usize {
    let self_cost = usize::from(exclude_identity);
    let mut min_same = usize::MAX;
    let mut min_diff = usize::MAX;
    for &y in point_labels {
        let same = pool_labels.iter().filter(|&&p| p == y).count() - self_cost;
        let diff = pool_labels.len() - same - self_cost;
        min_same = min_same.min(same);
        min_diff = min_diff.min(diff);
    }
    5usize.min(min_same).min(min_diff).max(1)
}

/// Exact k-NN per point, split into same-class and different-class lists over
/// an explicit candidate pool. Set `exclude_identity` when `points` and
/// `pool` are the same matrix so a point never neighbors itself.
pub fn build_neighborhoods_against(
    points: &Tensor,
    point_labels: &[usize],
    pool: &Tensor,
    pool_labels: &[usize],
    k: usize,
    exclude_identity: bool,
) -> Result<NeighborhoodIndex> {
    let (s, d) = points.dims2()?;
    let (m, d2) = pool.dims2()?;
    if d != d2 {
        return Err(Error::ShapeMismatch {
            op: "build-neighborhoods",
            lhs: points.shape().to_vec(),
            rhs: pool.shape().to_vec(),
        });
    }
    if point_labels.len() != s || pool_labels.len() != m {
        return Err(Error::invalid("label counts do not match the rows"));
    }
    if k == 0 {
        return Err(Error::invalid("neighborhood size k must be positive"));
    }
    if exclude_identity && s != m {
        return Err(Error::invalid(
            "identity exclusion requires points and pool of equal size",
        ));
    }
    let mut out = Vec::with_capacity(s);
    let mut k1 = 0;
    let mut k2 = 0;
    for i in 0..s {
        let mut same: Vec<(usize, f64)> = Vec::new();
        let mut diff: Vec<(usize, f64)> = Vec::new();
        for j in 0..m {
            if exclude_identity && j == i {
                continue;
            }
            let dist = euclidean(points.row(i), pool.row(j));
            if pool_labels[j] == point_labels[i] {
                same.push((j, dist));
            } else {
                diff.push((j, dist));
            }
        }
        if diff.is_empty() {
            return Err(Error::data(format!(
                "point {i} has no different-class candidates; the neighborhood ratio is undefined"
            )));
        }
        let by_dist = |a: &(usize, f64), b: &(usize, f64)| {
            a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0))
        };
        same.sort_by(by_dist);
        diff.sort_by(by_dist);
        same.truncate(k);
        diff.truncate(k);
        k1 = k1.max(diff.len());
        k2 = k2.max(same.len());
        out.push(Neighborhood { same, diff });
    }
    Ok(NeighborhoodIndex { points: out, k1, k2 })
}

/// Exact k-NN within one labeled set (self excluded from the candidates).
pub fn build_neighborhoods(emb: &Tensor, labels: &[usize], k: usize) -> Result<NeighborhoodIndex> {
    if emb.shape()[0] < 2 {
        return Err(Error::invalid("need at least two points"));
    }
    build_neighborhoods_against(emb, labels, emb, labels, k, true)
}

/// Min-max normalized distances of one point's neighbors.
#[derive(Debug, Clone)]
pub struct HValues {
    pub theta: f64,
    pub alpha: f64,
    /// h per same-class neighbor, in list order.
    pub same: Vec<f64>,
    /// h per different-class neighbor, in list order.
    pub diff: Vec<f64>,
}

/// h(i, p) = (d(i,p) − θ(i)) / max(α(i) − θ(i), eps), with θ/α the min/max
/// distance over N_x ∪ N_x̃. All h lie in [0, 1].
pub fn normalize_h(index: &NeighborhoodIndex, i: usize, eps: f64) -> Result<HValues> {
    let nb = index
        .points
        .get(i)
        .ok_or_else(|| Error::invalid(format!("point {i} not in the index")))?;
    let mut theta = f64::INFINITY;
    let mut alpha = f64::NEG_INFINITY;
    for &(_, d) in nb.same.iter().chain(nb.diff.iter()) {
        theta = theta.min(d);
        alpha = alpha.max(d);
    }
    if !theta.is_finite() {
        return Err(Error::invalid(format!("point {i} has no neighbors")));
    }
    let denom = (alpha - theta).max(eps);
    let h = |d: f64| (d - theta) / denom;
    Ok(HValues {
        theta,
        alpha,
        same: nb.same.iter().map(|&(_, d)| h(d)).collect(),
        diff: nb.diff.iter().map(|&(_, d)| h(d)).collect(),
    })
}

/// Per-point separation penalty. `Split`: λ_x̃/|N_x̃| + λ_x/|N_x| with an
/// empty same-class term skipped; `Original`: (λ_x̃ + λ_x)/|N_x̃ ∪ N_x|.
pub fn lambda_term(
    index: &NeighborhoodIndex,
    i: usize,
    variant: LambdaVariant,
    eps: f64,
) -> Result<f64> {
    let h = normalize_h(index, i, eps)?;
    let lam_diff: f64 = h.diff.iter().sum();
    let lam_same: f64 = h.same.iter().map(|v| 1.0 - v).sum();
    Ok(match variant {
        LambdaVariant::Split => {
            let mut v = lam_diff * (1.0 / h.diff.len() as f64);
            if !h.same.is_empty() {
                v += lam_same * (1.0 / h.same.len() as f64);
            }
            v
        }
        LambdaVariant::Original => {
            let union = h.diff.len() + h.same.len();
            (lam_diff + lam_same) * (1.0 / union as f64)
        }
    })
}

/// Same-class share of the neighborhood: |N_x| / (|N_x| + |N_x̃|).
pub fn gamma_term(index: &NeighborhoodIndex, i: usize) -> f64 {
    let nb = &index.points[i];
    nb.same.len() as f64 / (nb.same.len() + nb.diff.len()) as f64
}

/// Per-point variance penalty ω (unclamped). Batch mode returns the shared
/// value (k1²+k2²) − [Var(λ_x̃) + Var(λ_x)] for every point; per-point mode
/// uses |N_x̃|²·Var(h over N_x̃) + |N_x|²·Var(1−h over N_x).
pub fn omega_terms(index: &NeighborhoodIndex, mode: VarianceMode, eps: f64) -> Result<Vec<f64>> {
    let n = index.points.len();
    let cap = (index.k1 * index.k1 + index.k2 * index.k2) as f64;
    match mode {
        VarianceMode::Batch => {
            let mut lam_diff = Vec::with_capacity(n);
            let mut lam_same = Vec::with_capacity(n);
            for i in 0..n {
                let h = normalize_h(index, i, eps)?;
                lam_diff.push(h.diff.iter().sum::<f64>());
                lam_same.push(h.same.iter().map(|v| 1.0 - v).sum::<f64>());
            }
            let omega = cap - (population_variance(&lam_diff) + population_variance(&lam_same));
            Ok(vec![omega; n])
        }
        VarianceMode::PerPoint => {
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let h = normalize_h(index, i, eps)?;
                let ones_minus: Vec<f64> = h.same.iter().map(|v| 1.0 - v).collect();
                let nd = h.diff.len() as f64;
                let ns = h.same.len() as f64;
                let mut v = cap - nd * nd * population_variance(&h.diff);
                if !ones_minus.is_empty() {
                    v -= ns * ns * population_variance(&ones_minus);
                }
                out.push(v);
            }
            Ok(out)
        }
    }
}

fn population_variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let inv = 1.0 / v.len() as f64;
    let m2 = v.iter().map(|x| x * x).sum::<f64>() * inv;
    let m1 = v.iter().sum::<f64>() * inv;
    m2 - m1 * m1
}

/// Everything frozen during one differentiation pass: the neighbor lists and
/// the per-row min/max column selections of the normalization.
#[derive(Debug, Clone)]
pub struct FrozenSelection {
    pub index: NeighborhoodIndex,
    pub min_col: Vec<usize>,
    pub max_col: Vec<usize>,
}

/// Per-point terms and batch aggregates of one scored set.
#[derive(Debug, Clone, serde::Serialize)]
pub struct IcnnTerms {
    pub lambda: Vec<f64>,
    pub omega: Vec<f64>,
    pub gamma: Vec<f64>,
    /// λ_x̃ per point (sum of h over the different-class list).
    pub lambda_diff: Vec<f64>,
    /// λ_x per point (sum of 1−h over the same-class list).
    pub lambda_same: Vec<f64>,
    pub score: f64,
    pub loss: f64,
    pub k1: usize,
    pub k2: usize,
    /// Var(λ_x̃) + Var(λ_x) over the scored points (population).
    pub var_sum: f64,
    pub warnings: Vec<String>,
}

/// Tape handles and extracted terms for one scored set.
pub struct ScoredSet {
    pub score: Var,
    pub loss: Var,
    pub lambda_col: Var,
    pub terms: IcnnTerms,
    pub selection: FrozenSelection,
}

/// Score one set of points against a candidate pool on the tape.
///
/// This is the engine behind `icnn_loss`, `icnn_score`, and the task modes.
/// Pass `frozen` to reuse a previous call's discrete selections (finite
/// difference checks perturb inputs without re-selecting).
#[allow(clippy::too_many_arguments)]
pub fn score_set(
    tape: &mut Tape,
    points: Var,
    point_labels: &[usize],
    pool: Var,
    pool_labels: &[usize],
    exclude_identity: bool,
    cfg: &IcnnConfig,
    frozen: Option<&FrozenSelection>,
) -> Result<ScoredSet> {
    cfg.validate()?;
    let (s, _) = tape.value(points).dims2()?;
    let (m, _) = tape.value(pool).dims2()?;
    let eps = cfg.epsilon;

    let selection = match frozen {
        Some(f) => f.clone(),
        None => {
            let k = cfg
                .k_neighbors
                .unwrap_or_else(|| auto_k(point_labels, pool_labels, exclude_identity));
            let index = build_neighborhoods_against(
                tape.value(points),
                point_labels,
                tape.value(pool),
                pool_labels,
                k,
                exclude_identity,
            )?;
            // per-row argmin/argmax over the union, ties to the lowest index
            let mut min_col = Vec::with_capacity(s);
            let mut max_col = Vec::with_capacity(s);
            for nb in &index.points {
                let mut lo: Option<(usize, f64)> = None;
                let mut hi: Option<(usize, f64)> = None;
                for &(j, d) in nb.same.iter().chain(nb.diff.iter()) {
                    let better_lo = match lo {
                        None => true,
                        Some((bj, bd)) => d < bd || (d == bd && j < bj),
                    };
                    if better_lo {
                        lo = Some((j, d));
                    }
                    let better_hi = match hi {
                        None => true,
                        Some((bj, bd)) => d > bd || (d == bd && j < bj),
                    };
                    if better_hi {
                        hi = Some((j, d));
                    }
                }
                min_col.push(lo.expect("diff list is non-empty").0);
                max_col.push(hi.expect("diff list is non-empty").0);
            }
            FrozenSelection { index, min_col, max_col }
        }
    };
    let index = &selection.index;
    if index.points.len() != s {
        return Err(Error::invalid("frozen selection does not match the points"));
    }

    // distances on the tape
    let dsq = tape.pairwise_sq_dist(points, pool)?;
    let dsq_floored = tape.clamp_min(dsq, DIST_SQ_FLOOR)?;
    let dist = tape.sqrt(dsq_floored)?;
    let h = tape.row_min_max_norm(dist, &selection.min_col, &selection.max_col, eps)?;

    // constant masks and per-point counts
    let mut mask_diff = vec![0.0; s * m];
    let mut mask_same = vec![0.0; s * m];
    let mut cnt_same = vec![0.0; s];
    let mut inv_diff = vec![0.0; s];
    let mut inv_same = vec![0.0; s];
    let mut inv_union = vec![0.0; s];
    let mut gamma_vals = vec![0.0; s];
    for (i, nb) in index.points.iter().enumerate() {
        for &(j, _) in &nb.diff {
            mask_diff[i * m + j] = 1.0;
        }
        for &(j, _) in &nb.same {
            mask_same[i * m + j] = 1.0;
        }
        cnt_same[i] = nb.same.len() as f64;
        inv_diff[i] = 1.0 / nb.diff.len() as f64;
        if !nb.same.is_empty() {
            inv_same[i] = 1.0 / nb.same.len() as f64;
        }
        inv_union[i] = 1.0 / (nb.same.len() + nb.diff.len()) as f64;
        gamma_vals[i] = gamma_term(index, i);
    }

    let md = tape.constant(Tensor::matrix(s, m, mask_diff)?);
    let ms = tape.constant(Tensor::matrix(s, m, mask_same)?);
    let ones_m1 = tape.constant(Tensor::full(vec![m, 1], 1.0));

    let hd = tape.mul(h, md)?;
    let sum_h_diff = tape.matmul(hd, ones_m1)?; // λ_x̃ per point, [s,1]
    let hs = tape.mul(h, ms)?;
    let sum_h_same = tape.matmul(hs, ones_m1)?;
    let cnt_same_c = tape.constant(Tensor::matrix(s, 1, cnt_same)?);
    let lam_same_col = tape.sub(cnt_same_c, sum_h_same)?; // λ_x per point

    let lambda_col = match cfg.lambda_variant {
        LambdaVariant::Split => {
            let invd = tape.constant(Tensor::matrix(s, 1, inv_diff.clone())?);
            let invs = tape.constant(Tensor::matrix(s, 1, inv_same)?);
            let mean_diff = tape.mul(sum_h_diff, invd)?;
            let mean_same = tape.mul(lam_same_col, invs)?;
            tape.add(mean_diff, mean_same)?
        }
        LambdaVariant::Original => {
            let invu = tape.constant(Tensor::matrix(s, 1, inv_union)?);
            let tot = tape.add(sum_h_diff, lam_same_col)?;
            tape.mul(tot, invu)?
        }
    };

    let cap = (index.k1 * index.k1 + index.k2 * index.k2) as f64;
    let lam_f = tape.clamp_min(lambda_col, eps)?;
    let f_lambda = tape.powf(lam_f, 1.0 / cfg.p)?;
    let gamma_c = tape.constant(Tensor::matrix(s, 1, gamma_vals.clone())?);
    let gam_f = tape.clamp_min(gamma_c, eps)?;
    let f_gamma = tape.powf(gam_f, 1.0 / cfg.r)?;

    let (score, omega_vals) = match cfg.variance_mode {
        VarianceMode::Batch => {
            let sq_d = tape.square(sum_h_diff)?;
            let m2_d = tape.mean(sq_d)?;
            let m1_d = tape.mean(sum_h_diff)?;
            let m1_d_sq = tape.square(m1_d)?;
            let var_d = tape.sub(m2_d, m1_d_sq)?;
            let sq_s = tape.square(lam_same_col)?;
            let m2_s = tape.mean(sq_s)?;
            let m1_s = tape.mean(lam_same_col)?;
            let m1_s_sq = tape.square(m1_s)?;
            let var_s = tape.sub(m2_s, m1_s_sq)?;
            let vsum = tape.add(var_d, var_s)?;
            let cap_c = tape.constant(Tensor::scalar(cap));
            let omega = tape.sub(cap_c, vsum)?;
            let om_f = tape.clamp_min(omega, eps)?;
            let f_omega = tape.powf(om_f, 1.0 / cfg.q)?;
            // the shared omega factors out of the per-point mean
            let per_point = tape.mul(f_lambda, f_gamma)?;
            let mean_pp = tape.mean(per_point)?;
            let score = tape.mul(mean_pp, f_omega)?;
            (score, vec![tape.value(omega).item(); s])
        }
        VarianceMode::PerPoint => {
            let h_sq = tape.square(h)?;
            let hd2 = tape.mul(h_sq, md)?;
            let sum_h2_diff = tape.matmul(hd2, ones_m1)?;
            let invd = tape.constant(Tensor::matrix(s, 1, inv_diff)?);
            let m2_d = tape.mul(sum_h2_diff, invd)?;
            let m1_d = tape.mul(sum_h_diff, invd)?;
            let m1_d_sq = tape.square(m1_d)?;
            let var_d = tape.sub(m2_d, m1_d_sq)?;

            // literal Var(1−h) over the same-class list
            let ones_sm = tape.constant(Tensor::full(vec![s, m], 1.0));
            let g = tape.sub(ones_sm, h)?;
            let g_masked = tape.mul(g, ms)?;
            let sum_g = tape.matmul(g_masked, ones_m1)?;
            let g_sq = tape.square(g)?;
            let g_sq_masked = tape.mul(g_sq, ms)?;
            let sum_g2 = tape.matmul(g_sq_masked, ones_m1)?;
            let inv_same_c = {
                let vals: Vec<f64> = index
                    .points
                    .iter()
                    .map(|nb| {
                        if nb.same.is_empty() {
                            0.0
                        } else {
                            1.0 / nb.same.len() as f64
                        }
                    })
                    .collect();
                tape.constant(Tensor::matrix(s, 1, vals)?)
            };
            let m2_s = tape.mul(sum_g2, inv_same_c)?;
            let m1_s = tape.mul(sum_g, inv_same_c)?;
            let m1_s_sq = tape.square(m1_s)?;
            let var_s = tape.sub(m2_s, m1_s_sq)?;

            let cnt_d_sq: Vec<f64> = index
                .points
                .iter()
                .map(|nb| (nb.diff.len() * nb.diff.len()) as f64)
                .collect();
            let cnt_s_sq: Vec<f64> = index
                .points
                .iter()
                .map(|nb| (nb.same.len() * nb.same.len()) as f64)
                .collect();
            let cd = tape.constant(Tensor::matrix(s, 1, cnt_d_sq)?);
            let cs = tape.constant(Tensor::matrix(s, 1, cnt_s_sq)?);
            let vd_scaled = tape.mul(var_d, cd)?;
            let vs_scaled = tape.mul(var_s, cs)?;
            let vtot = tape.add(vd_scaled, vs_scaled)?;
            let cap_c = tape.constant(Tensor::full(vec![s, 1], cap));
            let omega_col = tape.sub(cap_c, vtot)?;
            let om_f = tape.clamp_min(omega_col, eps)?;
            let f_omega = tape.powf(om_f, 1.0 / cfg.q)?;
            let lo = tape.mul(f_lambda, f_omega)?;
            let per_point = tape.mul(lo, f_gamma)?;
            let score = tape.mean(per_point)?;
            (score, tape.value(omega_col).data().to_vec())
        }
    };

    let score_f = tape.clamp_min(score, eps)?;
    let log_score = tape.log(score_f)?;
    let loss = tape.scale(log_score, -1.0)?;

    let lambda_vals = tape.value(lambda_col).data().to_vec();
    let lam_diff_vals = tape.value(sum_h_diff).data().to_vec();
    let lam_same_vals = tape.value(lam_same_col).data().to_vec();
    let var_sum = population_variance(&lam_diff_vals) + population_variance(&lam_same_vals);
    let mut warnings = Vec::new();
    if index.points.iter().all(|nb| nb.same.is_empty()) {
        warnings.push(
            "every scored point has an empty same-class neighborhood; gamma is 0 throughout \
             (degenerate one-shot case)"
                .to_string(),
        );
    }
    let terms = IcnnTerms {
        lambda: lambda_vals,
        omega: omega_vals,
        gamma: gamma_vals,
        lambda_diff: lam_diff_vals,
        lambda_same: lam_same_vals,
        score: tape.value(score).item(),
        loss: tape.value(loss).item(),
        k1: index.k1,
        k2: index.k2,
        var_sum,
        warnings,
    };
    Ok(ScoredSet { score, loss, lambda_col, terms, selection })
}

/// ICNN loss of one labeled set (self-pool), differentiable through the
/// distances.
pub fn icnn_loss(
    tape: &mut Tape,
    emb: Var,
    labels: &[usize],
    cfg: &IcnnConfig,
) -> Result<ScoredSet> {
    score_set(tape, emb, labels, emb, labels, true, cfg, None)
}

/// Forward-only score of a labeled feature table.
pub fn icnn_score(emb: &Tensor, labels: &[usize], cfg: &IcnnConfig) -> Result<(IcnnTerms, f64)> {
    let mut tape = Tape::new();
    let v = tape.leaf(emb.clone());
    let scored = icnn_loss(&mut tape, v, labels, cfg)?;
    let s = scored.terms.score;
    Ok((scored.terms, s))
}

/// Task embeddings as one matrix plus row/label bookkeeping; labels are the
/// task-local 0..K-1 ids.
pub struct TaskEmbeddings {
    pub all: Var,
    pub support_rows: Vec<usize>,
    pub query_rows: Vec<usize>,
    pub support_y: Vec<usize>,
    pub query_y: Vec<usize>,
}

/// Mode-resolved task loss: the per-part scored sets and their summed loss.
pub struct TaskIcnn {
    pub loss: Var,
    pub parts: Vec<(&'static str, ScoredSet)>,
}

/// Score a task under `cfg.mode`. Combined modes add the part losses without
/// weights. `protos` is required for the prototype-pool mode.
pub fn icnn_task_loss(
    tape: &mut Tape,
    te: &TaskEmbeddings,
    protos: Option<Var>,
    cfg: &IcnnConfig,
) -> Result<TaskIcnn> {
    icnn_task_loss_with(tape, te, protos, cfg, None)
}

/// `icnn_task_loss` with previously captured selections (one per part, in
/// part order).
pub fn icnn_task_loss_with(
    tape: &mut Tape,
    te: &TaskEmbeddings,
    protos: Option<Var>,
    cfg: &IcnnConfig,
    frozen: Option<&[FrozenSelection]>,
) -> Result<TaskIcnn> {
    cfg.validate()?;
    if te.support_rows.is_empty() {
        return Err(Error::invalid("task has no support rows"));
    }
    if te.support_rows.len() != te.support_y.len() || te.query_rows.len() != te.query_y.len() {
        return Err(Error::invalid("row/label bookkeeping mismatch"));
    }
    let needs_query = !matches!(cfg.mode, IcnnMode::SupportOnly);
    if needs_query && te.query_rows.is_empty() {
        return Err(Error::invalid(format!(
            "icnn mode {:?} requires a non-empty query set",
            cfg.mode
        )));
    }
    let frozen_part = |i: usize| -> Result<Option<&FrozenSelection>> {
        match frozen {
            None => Ok(None),
            Some(f) => f
                .get(i)
                .map(Some)
                .ok_or_else(|| Error::invalid("frozen selections do not cover every part")),
        }
    };

    let sup = tape.gather_rows(te.all, &te.support_rows)?;
    let mut parts: Vec<(&'static str, ScoredSet)> = Vec::new();
    match cfg.mode {
        IcnnMode::SupportOnly => {
            let s = score_set(
                tape,
                sup,
                &te.support_y,
                sup,
                &te.support_y,
                true,
                cfg,
                frozen_part(0)?,
            )?;
            parts.push(("support", s));
        }
        IcnnMode::SupportPlusQuery => {
            let s = score_set(
                tape,
                sup,
                &te.support_y,
                sup,
                &te.support_y,
                true,
                cfg,
                frozen_part(0)?,
            )?;
            let qry = tape.gather_rows(te.all, &te.query_rows)?;
            let q = score_set(
                tape,
                qry,
                &te.query_y,
                sup,
                &te.support_y,
                false,
                cfg,
                frozen_part(1)?,
            )?;
            parts.push(("support", s));
            parts.push(("query", q));
        }
        IcnnMode::QueryVsPrototypes => {
            let protos = protos.ok_or_else(|| {
                Error::invalid("query_vs_prototypes mode needs the task prototypes")
            })?;
            let s = score_set(
                tape,
                sup,
                &te.support_y,
                sup,
                &te.support_y,
                true,
                cfg,
                frozen_part(0)?,
            )?;
            let (ways, _) = tape.value(protos).dims2()?;
            let proto_labels: Vec<usize> = (0..ways).collect();
            let qry = tape.gather_rows(te.all, &te.query_rows)?;
            let q = score_set(
                tape,
                qry,
                &te.query_y,
                protos,
                &proto_labels,
                false,
                cfg,
                frozen_part(1)?,
            )?;
            parts.push(("support", s));
            parts.push(("query_vs_prototypes", q));
        }
        IcnnMode::Full => {
            let rows: Vec<usize> = te
                .support_rows
                .iter()
                .chain(te.query_rows.iter())
                .copied()
                .collect();
            let labels: Vec<usize> = te
                .support_y
                .iter()
                .chain(te.query_y.iter())
                .copied()
                .collect();
            let all = tape.gather_rows(te.all, &rows)?;
            let s = score_set(tape, all, &labels, all, &labels, true, cfg, frozen_part(0)?)?;
            parts.push(("full", s));
        }
    }
    let mut loss = parts[0].1.loss;
    for part in &parts[1..] {
        loss = tape.add(loss, part.1.loss)?;
    }
    Ok(TaskIcnn { loss, parts })
}

/// Mean λ over a self-pool scored set, the ascent objective of the
/// separability dynamics harness.
pub fn mean_lambda_objective(
    tape: &mut Tape,
    emb: Var,
    labels: &[usize],
    k: usize,
    variant: LambdaVariant,
    eps: f64,
) -> Result<(Var, ScoredSet)> {
    let cfg = IcnnConfig {
        k_neighbors: Some(k),
        lambda_variant: variant,
        epsilon: eps,
        ..IcnnConfig::default()
    };
    let scored = icnn_loss(tape, emb, labels, &cfg)?;
    let mean_lambda = tape.mean(scored.lambda_col)?;
    Ok((mean_lambda, scored))
}
