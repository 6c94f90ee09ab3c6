//! Alignment/uniformity objectives on normalized embeddings, their analytic
//! gradients restricted to batch-touched rows, and the BPR baseline.
//!
//! Alignment is the in-batch mean of per-pair weights times squared distances
//! between normalized embeddings; uniformity is the log of the average
//! pairwise Gaussian potential over the batch's unique users and items,
//! halved and summed. The per-pair gradient decomposition
//! (`pair_distance_grads`) exposes the fact that alignment is linear in the
//! weights, which the matcher's outer step builds on.

use crate::data::TrainBatch;
use crate::encoder::Embeddings;
use crate::math::{axpy, dot, norm2, sigmoid, Mat};
use crate::{Error, Result};

/// Norm guard for `l2_normalize`.
pub const EPS_NORM: f64 = 1e-12;

/// Where a batch's pair weights came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSource {
    /// Interaction indicators: exactly 0 or 1.
    FromA,
    /// Generated interest values in [0, 1].
    FromR,
}

/// Per-pair weights aligned index-for-index with a batch's pairs (positives
/// first, then negatives).
#[derive(Debug, Clone)]
pub struct PairWeights {
    pub source: WeightSource,
    values: Vec<f64>,
}

impl PairWeights {
    /// Indicator weights from the train adjacency: 1 iff the pair is a train
    /// edge.
    pub fn from_interactions(batch: &TrainBatch, split: &crate::data::SplitDataset) -> Self {
        let values = batch
            .pairs()
            .map(|(u, i)| if split.is_train_edge(u, i) { 1.0 } else { 0.0 })
            .collect();
        PairWeights {
            source: WeightSource::FromA,
            values,
        }
    }

    /// Indicator weights given directly (0 or 1 per pair).
    pub fn from_indicator(values: Vec<f64>) -> Self {
        assert!(values.iter().all(|&w| w == 0.0 || w == 1.0));
        PairWeights {
            source: WeightSource::FromA,
            values,
        }
    }

    /// Generated interest weights in [0, 1].
    pub fn from_interest(values: Vec<f64>) -> Self {
        assert!(values.iter().all(|&w| (0.0..=1.0).contains(&w)));
        PairWeights {
            source: WeightSource::FromR,
            values,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Loss decomposition; `total = alignment + alpha * uniformity` by
/// construction.
#[derive(Debug, Clone, Copy)]
pub struct LossValue {
    pub total: f64,
    pub alignment: f64,
    pub uniformity: f64,
    pub alpha: f64,
}

/// v / ||v||, rejecting degenerate norms.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm2(v);
    if n <= EPS_NORM {
        return Err(Error::DegenerateNorm { norm: n, eps: EPS_NORM });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Normalized rows for the batch's unique users and items, computed once per
/// loss/gradient evaluation.
pub struct NormalizedBatch {
    pub users: Vec<u32>,
    pub items: Vec<u32>,
    pub user_norms: Vec<f64>,
    pub item_norms: Vec<f64>,
    /// Row k is the unit vector for `users[k]`.
    pub user_unit: Mat,
    pub item_unit: Mat,
}

impl NormalizedBatch {
    pub fn new(batch: &TrainBatch, z: &Embeddings<'_>) -> Result<Self> {
        let d = z.dim();
        let mut user_unit = Mat::zeros(batch.users_unique.len(), d);
        let mut user_norms = Vec::with_capacity(batch.users_unique.len());
        for (k, &u) in batch.users_unique.iter().enumerate() {
            let row = z.user_row(u);
            let n = norm2(row);
            if n <= EPS_NORM {
                return Err(Error::DegenerateNorm { norm: n, eps: EPS_NORM });
            }
            for (c, v) in row.iter().enumerate() {
                user_unit.set(k, c, v / n);
            }
            user_norms.push(n);
        }
        let mut item_unit = Mat::zeros(batch.items_unique.len(), d);
        let mut item_norms = Vec::with_capacity(batch.items_unique.len());
        for (k, &i) in batch.items_unique.iter().enumerate() {
            let row = z.item_row(i);
            let n = norm2(row);
            if n <= EPS_NORM {
                return Err(Error::DegenerateNorm { norm: n, eps: EPS_NORM });
            }
            for (c, v) in row.iter().enumerate() {
                item_unit.set(k, c, v / n);
            }
            item_norms.push(n);
        }
        Ok(NormalizedBatch {
            users: batch.users_unique.clone(),
            items: batch.items_unique.clone(),
            user_norms,
            item_norms,
            user_unit,
            item_unit,
        })
    }

    #[inline]
    pub fn user_slot(&self, u: u32) -> usize {
        self.users.binary_search(&u).expect("user in batch")
    }

    #[inline]
    pub fn item_slot(&self, i: u32) -> usize {
        self.items.binary_search(&i).expect("item in batch")
    }
}

/// Mean over batch pairs of weight times squared normalized distance.
pub fn alignment_term(
    batch: &TrainBatch,
    weights: &PairWeights,
    z: &Embeddings<'_>,
) -> Result<f64> {
    assert_eq!(weights.len(), batch.num_pairs(), "weights misaligned with batch");
    let nb = NormalizedBatch::new(batch, z)?;
    Ok(alignment_value(&nb, batch, weights.values()))
}

/// Alignment mean on a precomputed normalized batch.
pub fn alignment_value(nb: &NormalizedBatch, batch: &TrainBatch, weights: &[f64]) -> f64 {
    let b = batch.num_pairs() as f64;
    let mut sum = 0.0;
    for ((u, i), &w) in batch.pairs().zip(weights) {
        let zu = nb.user_unit.row(nb.user_slot(u));
        let zi = nb.item_unit.row(nb.item_slot(i));
        let c = dot(zu, zi);
        sum += w * (2.0 - 2.0 * c);
    }
    sum / b
}

/// Halved sum of the log average pairwise Gaussian potentials over unique
/// in-batch users and items. A side with fewer than two unique indices
/// contributes zero.
pub fn uniformity_term(batch: &TrainBatch, z: &Embeddings<'_>) -> Result<f64> {
    let nb = NormalizedBatch::new(batch, z)?;
    Ok(uniformity_value(&nb))
}

fn half_potential(unit: &Mat) -> f64 {
    let n = unit.rows();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for a in 0..n {
        for b in (a + 1)..n {
            let c = dot(unit.row(a), unit.row(b));
            // exp(-2 * ||za - zb||^2) with unit rows = exp(4c - 4)
            sum += (4.0 * c - 4.0).exp();
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    (sum / pairs).ln()
}

/// Uniformity on a precomputed normalized batch.
pub fn uniformity_value(nb: &NormalizedBatch) -> f64 {
    (half_potential(&nb.user_unit) + half_potential(&nb.item_unit)) / 2.0
}

/// Weighted alignment plus alpha-scaled uniformity.
pub fn wau_loss(
    batch: &TrainBatch,
    weights: &PairWeights,
    z: &Embeddings<'_>,
    alpha: f64,
) -> Result<LossValue> {
    assert_eq!(weights.len(), batch.num_pairs(), "weights misaligned with batch");
    let nb = NormalizedBatch::new(batch, z)?;
    let alignment = alignment_value(&nb, batch, weights.values());
    let uniformity = uniformity_value(&nb);
    Ok(LossValue {
        total: alignment + alpha * uniformity,
        alignment,
        uniformity,
        alpha,
    })
}

/// Gradients on batch-touched embedding rows; rows are sorted unique, in the
/// batch's `users_unique`/`items_unique` order. Untouched rows are implicitly
/// zero.
#[derive(Debug, Clone)]
pub struct RowGrads {
    pub users: Vec<u32>,
    pub items: Vec<u32>,
    pub user_grad: Mat,
    pub item_grad: Mat,
}

impl RowGrads {
    pub fn zeros(batch: &TrainBatch, dim: usize) -> Self {
        RowGrads {
            users: batch.users_unique.clone(),
            items: batch.items_unique.clone(),
            user_grad: Mat::zeros(batch.users_unique.len(), dim),
            item_grad: Mat::zeros(batch.items_unique.len(), dim),
        }
    }

    #[inline]
    pub fn user_slot(&self, u: u32) -> usize {
        self.users.binary_search(&u).expect("user in grads")
    }

    #[inline]
    pub fn item_slot(&self, i: u32) -> usize {
        self.items.binary_search(&i).expect("item in grads")
    }

    pub fn add_scaled(&mut self, other: &RowGrads, scale: f64) {
        debug_assert_eq!(self.users, other.users);
        debug_assert_eq!(self.items, other.items);
        self.user_grad.add_scaled(&other.user_grad, scale);
        self.item_grad.add_scaled(&other.item_grad, scale);
    }

    pub fn is_finite(&self) -> bool {
        self.user_grad.is_finite() && self.item_grad.is_finite()
    }

    pub fn same_rows_as(&self, other: &RowGrads) -> bool {
        self.users == other.users && self.items == other.items
    }
}

/// d/dz_u of ||norm(z_u) - norm(z_i)||^2, written onto `out`.
#[inline]
fn pair_grad_into(out: &mut [f64], self_unit: &[f64], other_unit: &[f64], self_norm: f64, scale: f64) {
    // -(2/||z||) * (other_unit - cos * self_unit), times scale.
    let c = dot(self_unit, other_unit);
    let k = -2.0 * scale / self_norm;
    for idx in 0..out.len() {
        out[idx] += k * (other_unit[idx] - c * self_unit[idx]);
    }
}

fn accumulate_alignment_grads(
    grads: &mut RowGrads,
    nb: &NormalizedBatch,
    batch: &TrainBatch,
    weights: &[f64],
) {
    let b = batch.num_pairs() as f64;
    for ((u, i), &w) in batch.pairs().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let us = nb.user_slot(u);
        let is = nb.item_slot(i);
        let scale = w / b;
        // Split borrows: user grad row then item grad row.
        pair_grad_into(
            grads.user_grad.row_mut(us),
            nb.user_unit.row(us),
            nb.item_unit.row(is),
            nb.user_norms[us],
            scale,
        );
        pair_grad_into(
            grads.item_grad.row_mut(is),
            nb.item_unit.row(is),
            nb.user_unit.row(us),
            nb.item_norms[is],
            scale,
        );
    }
}

fn accumulate_uniformity_grads(grad: &mut Mat, unit: &Mat, norms: &[f64], alpha: f64) {
    let n = unit.rows();
    if n < 2 || alpha == 0.0 {
        return;
    }
    let d = unit.cols();
    let pairs = (n * (n - 1) / 2) as f64;
    // Pairwise potentials.
    let mut w = vec![0.0; n * n];
    let mut cos = vec![0.0; n * n];
    let mut total = 0.0;
    for a in 0..n {
        for b in (a + 1)..n {
            let c = dot(unit.row(a), unit.row(b));
            let p = (4.0 * c - 4.0).exp();
            w[a * n + b] = p;
            w[b * n + a] = p;
            cos[a * n + b] = c;
            cos[b * n + a] = c;
            total += p;
        }
    }
    let s = total / pairs;
    // d/dz_a [alpha/2 * ln S] = alpha * 2/(S * pairs * ||z_a||)
    //   * sum_b w_ab (unit_b - cos_ab unit_a)
    for a in 0..n {
        let mut acc = vec![0.0; d];
        let mut coef_self = 0.0;
        for b in 0..n {
            if a == b {
                continue;
            }
            let p = w[a * n + b];
            axpy(&mut acc, unit.row(b), p);
            coef_self -= p * cos[a * n + b];
        }
        axpy(&mut acc, unit.row(a), coef_self);
        let k = alpha * 2.0 / (s * pairs * norms[a]);
        axpy(grad.row_mut(a), &acc, k);
    }
}

/// Analytic gradient of `wau_loss` with respect to each touched embedding
/// row.
pub fn wau_grad(
    batch: &TrainBatch,
    weights: &PairWeights,
    z: &Embeddings<'_>,
    alpha: f64,
) -> Result<RowGrads> {
    assert_eq!(weights.len(), batch.num_pairs(), "weights misaligned with batch");
    let nb = NormalizedBatch::new(batch, z)?;
    Ok(wau_grad_with(&nb, batch, weights.values(), alpha, z.dim()))
}

/// `wau_grad` on a precomputed normalized batch.
pub fn wau_grad_with(
    nb: &NormalizedBatch,
    batch: &TrainBatch,
    weights: &[f64],
    alpha: f64,
    dim: usize,
) -> RowGrads {
    let mut grads = RowGrads::zeros(batch, dim);
    accumulate_alignment_grads(&mut grads, nb, batch, weights);
    accumulate_uniformity_grads(&mut grads.user_grad, &nb.user_unit, &nb.user_norms, alpha);
    accumulate_uniformity_grads(&mut grads.item_grad, &nb.item_unit, &nb.item_norms, alpha);
    grads
}

/// Uniformity-only gradient (unit weight) on touched rows.
pub fn uniformity_grads(nb: &NormalizedBatch, batch: &TrainBatch, dim: usize) -> RowGrads {
    let mut grads = RowGrads::zeros(batch, dim);
    accumulate_uniformity_grads(&mut grads.user_grad, &nb.user_unit, &nb.user_norms, 1.0);
    accumulate_uniformity_grads(&mut grads.item_grad, &nb.item_unit, &nb.item_norms, 1.0);
    grads
}

/// The two touched rows of one pair's distance gradient, divided by the batch
/// pair count. The alignment gradient is exactly the weight-weighted sum of
/// these.
#[derive(Debug, Clone)]
pub struct PairGrad {
    pub user: u32,
    pub item: u32,
    pub user_grad: Vec<f64>,
    pub item_grad: Vec<f64>,
}

/// Per-pair sparse gradients g_{u,i} = grad of ||norm(z_u) - norm(z_i)||^2 /
/// |batch| on the two touched rows.
pub fn pair_distance_grads(batch: &TrainBatch, z: &Embeddings<'_>) -> Result<Vec<PairGrad>> {
    let nb = NormalizedBatch::new(batch, z)?;
    Ok(pair_distance_grads_with(&nb, batch, z.dim()))
}

/// `pair_distance_grads` on a precomputed normalized batch.
pub fn pair_distance_grads_with(
    nb: &NormalizedBatch,
    batch: &TrainBatch,
    d: usize,
) -> Vec<PairGrad> {
    let b = batch.num_pairs() as f64;
    let scale = 1.0 / b;
    let mut out = Vec::with_capacity(batch.num_pairs());
    for (u, i) in batch.pairs() {
        let us = nb.user_slot(u);
        let is = nb.item_slot(i);
        let mut user_grad = vec![0.0; d];
        let mut item_grad = vec![0.0; d];
        pair_grad_into(
            &mut user_grad,
            nb.user_unit.row(us),
            nb.item_unit.row(is),
            nb.user_norms[us],
            scale,
        );
        pair_grad_into(
            &mut item_grad,
            nb.item_unit.row(is),
            nb.user_unit.row(us),
            nb.item_norms[is],
            scale,
        );
        out.push(PairGrad {
            user: u,
            item: i,
            user_grad,
            item_grad,
        });
    }
    out
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// BPR over (user, positive, negative) triples on normalized embeddings:
/// mean of -log sigmoid(score(u, i+) - score(u, i-)). Requires k_neg >= 1.
pub fn bpr_loss(batch: &TrainBatch, z: &Embeddings<'_>) -> Result<f64> {
    assert!(!batch.negatives.is_empty(), "BPR requires k_neg >= 1");
    let nb = NormalizedBatch::new(batch, z)?;
    let k_neg = batch.negatives.len() / batch.positives.len();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, &(u, ipos)) in batch.positives.iter().enumerate() {
        let zu = nb.user_unit.row(nb.user_slot(u));
        let zp = nb.item_unit.row(nb.item_slot(ipos));
        let c_pos = dot(zu, zp);
        for j in 0..k_neg {
            let (_, ineg) = batch.negatives[p * k_neg + j];
            let zn = nb.item_unit.row(nb.item_slot(ineg));
            let gap = c_pos - dot(zu, zn);
            sum += softplus(-gap);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Analytic gradient of `bpr_loss` on touched rows.
pub fn bpr_grad(batch: &TrainBatch, z: &Embeddings<'_>) -> Result<RowGrads> {
    assert!(!batch.negatives.is_empty(), "BPR requires k_neg >= 1");
    let nb = NormalizedBatch::new(batch, z)?;
    let mut grads = RowGrads::zeros(batch, z.dim());
    let k_neg = batch.negatives.len() / batch.positives.len();
    let count = (batch.positives.len() * k_neg) as f64;
    for (p, &(u, ipos)) in batch.positives.iter().enumerate() {
        let us = nb.user_slot(u);
        let ps = nb.item_slot(ipos);
        for j in 0..k_neg {
            let (_, ineg) = batch.negatives[p * k_neg + j];
            let ns = nb.item_slot(ineg);
            let zu = nb.user_unit.row(us);
            let zp = nb.item_unit.row(ps);
            let zn = nb.item_unit.row(ns);
            let c_pos = dot(zu, zp);
            let c_neg = dot(zu, zn);
            let gap = c_pos - c_neg;
            // d/dgap of softplus(-gap) = sigmoid(gap) - 1
            let dgap = (sigmoid(gap) - 1.0) / count;

            // d c_pos/dz_u = (zp - c_pos zu)/||z_u||, etc.
            let row = grads.user_grad.row_mut(us);
            let ku = dgap / nb.user_norms[us];
            for idx in 0..row.len() {
                row[idx] += ku * ((zp[idx] - c_pos * zu[idx]) - (zn[idx] - c_neg * zu[idx]));
            }
            let row = grads.item_grad.row_mut(ps);
            let kp = dgap / nb.item_norms[ps];
            for idx in 0..row.len() {
                row[idx] += kp * (zu[idx] - c_pos * zp[idx]);
            }
            let row = grads.item_grad.row_mut(ns);
            let kn = -dgap / nb.item_norms[ns];
            for idx in 0..row.len() {
                row[idx] += kn * (zu[idx] - c_neg * zn[idx]);
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EmbeddingState, EncoderKind};

    fn state_from_rows(users: &[&[f64]], items: &[&[f64]]) -> EmbeddingState {
        let d = users[0].len();
        let mut user_table = Mat::zeros(users.len(), d);
        for (r, row) in users.iter().enumerate() {
            user_table.row_mut(r).copy_from_slice(row);
        }
        let mut item_table = Mat::zeros(items.len(), d);
        for (r, row) in items.iter().enumerate() {
            item_table.row_mut(r).copy_from_slice(row);
        }
        EmbeddingState {
            user_table,
            item_table,
            kind: EncoderKind::Gmf,
            num_layers: 0,
        }
    }

    fn batch(positives: &[(u32, u32)], negatives: &[(u32, u32)]) -> TrainBatch {
        TrainBatch::from_pairs(positives.to_vec(), negatives.to_vec())
    }

    #[test]
    fn l2_normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        let unit = vec![0.0, 1.0];
        assert_eq!(l2_normalize(&unit).unwrap(), unit);
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::DegenerateNorm { .. })
        ));
    }

    #[test]
    fn alignment_zero_when_embeddings_coincide() {
        let state = state_from_rows(&[&[1.0, 2.0]], &[&[1.0, 2.0]]);
        let b = batch(&[(0, 0), (0, 0)], &[]);
        let w = PairWeights::from_indicator(vec![1.0, 1.0]);
        let z = Embeddings::Tables(&state);
        let a = alignment_term(&b, &w, &z).unwrap();
        assert!(a.abs() < 1e-15);
    }

    #[test]
    fn alignment_orthogonal_unit_pair_is_two() {
        let state = state_from_rows(&[&[1.0, 0.0]], &[&[0.0, 1.0]]);
        let b = batch(&[(0, 0)], &[]);
        let w = PairWeights::from_indicator(vec![1.0]);
        let z = Embeddings::Tables(&state);
        assert!((alignment_term(&b, &w, &z).unwrap() - 2.0).abs() < 1e-15);
    }

    /// Straight-line scalar oracle for the alignment mean.
    fn alignment_oracle(pairs: &[(Vec<f64>, Vec<f64>, f64)]) -> f64 {
        let mut sum = 0.0;
        for (zu, zi, w) in pairs {
            let nu: f64 = zu.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ni: f64 = zi.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dist: f64 = zu
                .iter()
                .zip(zi)
                .map(|(a, b)| (a / nu - b / ni).powi(2))
                .sum();
            sum += w * dist;
        }
        sum / pairs.len() as f64
    }

    #[test]
    fn alignment_four_pair_oracle() {
        let users: Vec<Vec<f64>> = vec![vec![1.0, 0.5], vec![-0.3, 0.8]];
        let items: Vec<Vec<f64>> = vec![vec![0.2, -0.9], vec![1.1, 1.2], vec![-0.4, -0.1]];
        let state = state_from_rows(
            &users.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
            &items.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
        );
        let b = batch(&[(0, 0), (1, 1)], &[(0, 2), (1, 0)]);
        let weights = vec![1.0, 0.5, 0.0, 0.25];
        let w = PairWeights::from_interest(weights.clone());
        let z = Embeddings::Tables(&state);
        let got = alignment_term(&b, &w, &z).unwrap();
        let expected = alignment_oracle(&[
            (users[0].clone(), items[0].clone(), 1.0),
            (users[1].clone(), items[1].clone(), 0.5),
            (users[0].clone(), items[2].clone(), 0.0),
            (users[1].clone(), items[0].clone(), 0.25),
        ]);
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
    }

    #[test]
    fn uniformity_identical_embeddings_is_zero() {
        let state = state_from_rows(&[&[1.0, 1.0], &[1.0, 1.0]], &[&[0.5, 0.1], &[0.5, 0.1]]);
        let b = batch(&[(0, 0), (1, 1)], &[]);
        let z = Embeddings::Tables(&state);
        let u = uniformity_term(&b, &z).unwrap();
        assert!(u.abs() < 1e-14);
    }

    #[test]
    fn uniformity_orthogonal_pairs_is_minus_four() {
        let state = state_from_rows(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[2.0, 0.0], &[0.0, 3.0]]);
        let b = batch(&[(0, 0), (1, 1)], &[]);
        let z = Embeddings::Tables(&state);
        let u = uniformity_term(&b, &z).unwrap();
        assert!((u + 4.0).abs() < 1e-12, "{u}");
    }

    /// Brute-force oracle over explicit unordered distinct pairs.
    fn uniformity_oracle(user_rows: &[Vec<f64>], item_rows: &[Vec<f64>]) -> f64 {
        let half = |rows: &[Vec<f64>]| -> f64 {
            if rows.len() < 2 {
                return 0.0;
            }
            let mut vals = Vec::new();
            for a in 0..rows.len() {
                for b in (a + 1)..rows.len() {
                    let na: f64 = rows[a].iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb: f64 = rows[b].iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dist: f64 = rows[a]
                        .iter()
                        .zip(&rows[b])
                        .map(|(x, y)| (x / na - y / nb).powi(2))
                        .sum();
                    vals.push((-2.0 * dist).exp());
                }
            }
            (vals.iter().sum::<f64>() / vals.len() as f64).ln()
        };
        (half(user_rows) + half(item_rows)) / 2.0
    }

    #[test]
    fn uniformity_matches_brute_force_oracle() {
        let mut rng = crate::config::seeded_rng(40, crate::config::RngStream::Batch);
        use rand::Rng;
        let user_rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let item_rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let state = state_from_rows(
            &user_rows.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
            &item_rows.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
        );
        let b = batch(&[(0, 0), (1, 1), (2, 2), (3, 3), (4, 4)], &[]);
        let z = Embeddings::Tables(&state);
        let got = uniformity_term(&b, &z).unwrap();
        let expected = uniformity_oracle(&user_rows, &item_rows);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn uniformity_single_user_side_contributes_zero() {
        let state = state_from_rows(&[&[1.0, 0.0]], &[&[2.0, 0.0], &[0.0, 3.0]]);
        let b = batch(&[(0, 0), (0, 1)], &[]);
        let z = Embeddings::Tables(&state);
        let u = uniformity_term(&b, &z).unwrap();
        // Item half is exp(-4): (0 + ln e^-4)/2 = -2.
        assert!((u + 2.0).abs() < 1e-12);
    }

    #[test]
    fn wau_total_decomposes() {
        let mut rng = crate::config::seeded_rng(41, crate::config::RngStream::Batch);
        let state = random_state(&mut rng, 3, 4, 3);
        let b = batch(&[(0, 0), (1, 2), (2, 3)], &[(0, 1), (1, 0), (2, 2)]);
        let w = PairWeights::from_interest(vec![0.9, 0.4, 0.1, 0.0, 0.7, 0.3]);
        let z = Embeddings::Tables(&state);
        let lv = wau_loss(&b, &w, &z, 1.7).unwrap();
        assert!((lv.total - (lv.alignment + 1.7 * lv.uniformity)).abs() < 1e-12);
        let lv0 = wau_loss(&b, &w, &z, 0.0).unwrap();
        assert_eq!(lv0.total, lv0.alignment);
    }

    /// WAU with indicator weights must equal an AU path that sums plain
    /// distances over the batch's train pairs with the same in-batch mean
    /// (denominator = all batch pairs): the weight multiply collapses.
    #[test]
    fn wau_from_a_collapses_to_au() {
        let mut rng = crate::config::seeded_rng(42, crate::config::RngStream::Batch);
        let state = random_state(&mut rng, 4, 5, 3);
        let b = batch(&[(0, 0), (1, 2), (3, 4)], &[(0, 1), (1, 3), (3, 0)]);
        let indicator = vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let w = PairWeights::from_indicator(indicator.clone());
        let z = Embeddings::Tables(&state);
        let wau = wau_loss(&b, &w, &z, 1.0).unwrap();

        // Independent AU path restricted to the positive pairs.
        let nb = NormalizedBatch::new(&b, &z).unwrap();
        let mut align = 0.0;
        for ((u, i), &ind) in b.pairs().zip(&indicator) {
            if ind == 1.0 {
                let zu = nb.user_unit.row(nb.user_slot(u));
                let zi = nb.item_unit.row(nb.item_slot(i));
                align += 2.0 - 2.0 * dot(zu, zi);
            }
        }
        align /= b.num_pairs() as f64;
        let unif = uniformity_value(&nb);
        assert_eq!(wau.alignment, align);
        assert_eq!(wau.uniformity, unif);
        assert_eq!(wau.total, align + unif);
    }

    fn random_state(
        rng: &mut impl rand::Rng,
        m: usize,
        n: usize,
        d: usize,
    ) -> EmbeddingState {
        let mut user_table = Mat::zeros(m, d);
        for v in user_table.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut item_table = Mat::zeros(n, d);
        for v in item_table.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        EmbeddingState {
            user_table,
            item_table,
            kind: EncoderKind::Gmf,
            num_layers: 0,
        }
    }

    /// Central finite differences of the WAU total over every touched table
    /// entry.
    fn finite_diff_wau(
        state: &EmbeddingState,
        b: &TrainBatch,
        w: &PairWeights,
        alpha: f64,
        h: f64,
    ) -> RowGrads {
        let mut grads = RowGrads::zeros(b, state.dim());
        let eval = |s: &EmbeddingState| -> f64 {
            wau_loss(b, w, &Embeddings::Tables(s), alpha).unwrap().total
        };
        for (slot, &u) in b.users_unique.iter().enumerate() {
            for c in 0..state.dim() {
                let mut plus = state.clone();
                plus.user_table.set(u as usize, c, plus.user_table.get(u as usize, c) + h);
                let mut minus = state.clone();
                minus.user_table.set(u as usize, c, minus.user_table.get(u as usize, c) - h);
                grads.user_grad.set(slot, c, (eval(&plus) - eval(&minus)) / (2.0 * h));
            }
        }
        for (slot, &i) in b.items_unique.iter().enumerate() {
            for c in 0..state.dim() {
                let mut plus = state.clone();
                plus.item_table.set(i as usize, c, plus.item_table.get(i as usize, c) + h);
                let mut minus = state.clone();
                minus.item_table.set(i as usize, c, minus.item_table.get(i as usize, c) - h);
                grads.item_grad.set(slot, c, (eval(&plus) - eval(&minus)) / (2.0 * h));
            }
        }
        grads
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                let scale = x.abs().max(y.abs());
                if scale < 1e-10 {
                    0.0
                } else {
                    (x - y).abs() / scale
                }
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn wau_grad_matches_finite_differences() {
        let mut rng = crate::config::seeded_rng(77, crate::config::RngStream::Batch);
        use rand::Rng;
        let state = random_state(&mut rng, 4, 5, 3);
        let b = batch(&[(0, 1), (1, 2), (2, 3), (3, 4)], &[(0, 0), (1, 4), (2, 0), (3, 1)]);
        let w = PairWeights::from_interest((0..8).map(|_| rng.gen_range(0.0..1.0)).collect());
        let alpha = 0.8;
        let z = Embeddings::Tables(&state);
        let analytic = wau_grad(&b, &w, &z, alpha).unwrap();
        let numeric = finite_diff_wau(&state, &b, &w, alpha, 1e-6);
        let err_u = max_rel_err(analytic.user_grad.data(), numeric.user_grad.data());
        let err_i = max_rel_err(analytic.item_grad.data(), numeric.item_grad.data());
        assert!(err_u < 1e-5 && err_i < 1e-5, "errors {err_u} {err_i}");
    }

    #[test]
    fn wau_grad_zero_weights_zero_alpha_is_zero() {
        let mut rng = crate::config::seeded_rng(78, crate::config::RngStream::Batch);
        let state = random_state(&mut rng, 3, 3, 2);
        let b = batch(&[(0, 0), (1, 1)], &[(2, 2)]);
        let w = PairWeights::from_interest(vec![0.0, 0.0, 0.0]);
        let z = Embeddings::Tables(&state);
        let g = wau_grad(&b, &w, &z, 0.0).unwrap();
        assert!(g.user_grad.data().iter().all(|&v| v == 0.0));
        assert!(g.item_grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alignment_gradient_scales_linearly_with_weights() {
        let mut rng = crate::config::seeded_rng(79, crate::config::RngStream::Batch);
        use rand::Rng;
        let state = random_state(&mut rng, 3, 4, 3);
        let b = batch(&[(0, 1), (1, 2)], &[(2, 3), (0, 0)]);
        let base: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..0.5)).collect();
        let lambda = 1.9;
        let z = Embeddings::Tables(&state);
        let g1 = wau_grad(&b, &PairWeights::from_interest(base.clone()), &z, 0.0).unwrap();
        let scaled: Vec<f64> = base.iter().map(|w| w * lambda).collect();
        let g2 = wau_grad(&b, &PairWeights::from_interest(scaled), &z, 0.0).unwrap();
        for (a, b) in g1.user_grad.data().iter().zip(g2.user_grad.data()) {
            assert!((a * lambda - b).abs() < 1e-15);
        }
        for (a, b) in g1.item_grad.data().iter().zip(g2.item_grad.data()) {
            assert!((a * lambda - b).abs() < 1e-15);
        }
    }

    #[test]
    fn alignment_is_linear_in_weights() {
        let mut rng = crate::config::seeded_rng(80, crate::config::RngStream::Batch);
        use rand::Rng;
        let state = random_state(&mut rng, 4, 4, 3);
        let b = batch(&[(0, 1), (1, 2), (2, 3)], &[(3, 0)]);
        let z = Embeddings::Tables(&state);
        let w1: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
        let w2: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
        for &lambda in &[0.0, 0.25, 0.5, 0.9, 1.0] {
            let mix: Vec<f64> = w1
                .iter()
                .zip(&w2)
                .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
                .collect();
            let am = alignment_term(&b, &PairWeights::from_interest(mix), &z).unwrap();
            let a1 = alignment_term(&b, &PairWeights::from_interest(w1.clone()), &z).unwrap();
            let a2 = alignment_term(&b, &PairWeights::from_interest(w2.clone()), &z).unwrap();
            assert!((am - (lambda * a1 + (1.0 - lambda) * a2)).abs() < 1e-12);
        }
    }

    #[test]
    fn pair_grads_reconstruct_alignment_gradient() {
        let mut rng = crate::config::seeded_rng(81, crate::config::RngStream::Batch);
        use rand::Rng;
        let state = random_state(&mut rng, 4, 5, 3);
        let b = batch(&[(0, 1), (1, 2), (2, 3)], &[(3, 4), (0, 0)]);
        let weights: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
        let z = Embeddings::Tables(&state);
        let direct = wau_grad(&b, &PairWeights::from_interest(weights.clone()), &z, 0.0).unwrap();
        let pair_grads = pair_distance_grads(&b, &z).unwrap();
        let mut rebuilt = RowGrads::zeros(&b, 3);
        for (pg, &w) in pair_grads.iter().zip(&weights) {
            let us = rebuilt.user_slot(pg.user);
            axpy(rebuilt.user_grad.row_mut(us), &pg.user_grad, w);
            let is = rebuilt.item_slot(pg.item);
            axpy(rebuilt.item_grad.row_mut(is), &pg.item_grad, w);
        }
        for (a, b) in direct.user_grad.data().iter().zip(rebuilt.user_grad.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in direct.item_grad.data().iter().zip(rebuilt.item_grad.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pair_grad_single_orthogonal_pair_closed_form() {
        let state = state_from_rows(&[&[1.0, 0.0]], &[&[0.0, 1.0]]);
        let b = batch(&[(0, 0)], &[]);
        let z = Embeddings::Tables(&state);
        let pg = &pair_distance_grads(&b, &z).unwrap()[0];
        // g_u = (2/|batch|) * (0, -1), g_i = (2/|batch|) * (-1, 0), |batch|=1.
        assert!((pg.user_grad[0] - 0.0).abs() < 1e-15);
        assert!((pg.user_grad[1] + 2.0).abs() < 1e-15);
        assert!((pg.item_grad[0] + 2.0).abs() < 1e-15);
        assert!((pg.item_grad[1] - 0.0).abs() < 1e-15);
    }

    #[test]
    fn pair_grad_vanishes_iff_directions_coincide() {
        let state = state_from_rows(&[&[2.0, 0.0]], &[&[5.0, 0.0], &[0.0, 1.0]]);
        let b = batch(&[(0, 0), (0, 1)], &[]);
        let z = Embeddings::Tables(&state);
        let pgs = pair_distance_grads(&b, &z).unwrap();
        // Same direction: zero gradient.
        assert!(pgs[0].user_grad.iter().all(|&v| v.abs() < 1e-15));
        assert!(pgs[0].item_grad.iter().all(|&v| v.abs() < 1e-15));
        // Different direction: nonzero.
        assert!(pgs[1].user_grad.iter().any(|&v| v.abs() > 1e-3));
    }

    #[test]
    fn bpr_equal_scores_is_log_two() {
        let state = state_from_rows(&[&[1.0, 0.0]], &[&[0.0, 1.0], &[0.0, 2.0]]);
        let b = batch(&[(0, 0)], &[(0, 1)]);
        let z = Embeddings::Tables(&state);
        let l = bpr_loss(&b, &z).unwrap();
        assert!((l - 2.0_f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn bpr_large_gap_tends_to_zero() {
        // Normalized scores are bounded by 1, so build the gap directly on
        // the softplus scale used by the loss.
        assert!(softplus(-20.0) < 1e-8);
    }

    #[test]
    fn bpr_three_triple_oracle() {
        let mut rng = crate::config::seeded_rng(82, crate::config::RngStream::Batch);
        let state = random_state(&mut rng, 3, 4, 3);
        let b = batch(&[(0, 0), (1, 1), (2, 2)], &[(0, 3), (1, 0), (2, 1)]);
        let z = Embeddings::Tables(&state);
        let got = bpr_loss(&b, &z).unwrap();
        // Scalar oracle.
        let mut expected = 0.0;
        for (p, &(u, ip)) in b.positives.iter().enumerate() {
            let (_, ineg) = b.negatives[p];
            let zu = l2_normalize(state.user_table.row(u as usize)).unwrap();
            let zp = l2_normalize(state.item_table.row(ip as usize)).unwrap();
            let zn = l2_normalize(state.item_table.row(ineg as usize)).unwrap();
            let gap = dot(&zu, &zp) - dot(&zu, &zn);
            expected += -(sigmoid(gap)).ln();
        }
        expected /= 3.0;
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn bpr_grad_matches_finite_differences() {
        let mut rng = crate::config::seeded_rng(83, crate::config::RngStream::Batch);
        let state = random_state(&mut rng, 3, 4, 3);
        let b = batch(&[(0, 0), (1, 1), (2, 2)], &[(0, 3), (1, 0), (2, 1)]);
        let z = Embeddings::Tables(&state);
        let analytic = bpr_grad(&b, &z).unwrap();
        let h = 1e-6;
        let eval = |s: &EmbeddingState| bpr_loss(&b, &Embeddings::Tables(s)).unwrap();
        for (slot, &u) in b.users_unique.iter().enumerate() {
            for c in 0..3 {
                let mut plus = state.clone();
                plus.user_table.set(u as usize, c, plus.user_table.get(u as usize, c) + h);
                let mut minus = state.clone();
                minus.user_table.set(u as usize, c, minus.user_table.get(u as usize, c) - h);
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.user_grad.get(slot, c);
                let scale = fd.abs().max(an.abs()).max(1e-8);
                assert!((fd - an).abs() / scale < 1e-4, "user ({slot},{c}): {an} vs {fd}");
            }
        }
        for (slot, &i) in b.items_unique.iter().enumerate() {
            for c in 0..3 {
                let mut plus = state.clone();
                plus.item_table.set(i as usize, c, plus.item_table.get(i as usize, c) + h);
                let mut minus = state.clone();
                minus.item_table.set(i as usize, c, minus.item_table.get(i as usize, c) - h);
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.item_grad.get(slot, c);
                let scale = fd.abs().max(an.abs()).max(1e-8);
                assert!((fd - an).abs() / scale < 1e-4, "item ({slot},{c}): {an} vs {fd}");
            }
        }
    }

    /// Random rotation via Gram-Schmidt on a Gaussian-ish matrix.
    fn random_rotation(rng: &mut impl rand::Rng, d: usize) -> Vec<Vec<f64>> {
        loop {
            let mut basis: Vec<Vec<f64>> = Vec::new();
            for _ in 0..d {
                let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                for u in &basis {
                    let c = dot(&v, u);
                    for (vi, ui) in v.iter_mut().zip(u) {
                        *vi -= c * ui;
                    }
                }
                let n = norm2(&v);
                if n < 1e-6 {
                    break;
                }
                for vi in &mut v {
                    *vi /= n;
                }
                basis.push(v);
            }
            if basis.len() == d {
                return basis;
            }
        }
    }

    #[test]
    fn uniformity_is_rotation_invariant() {
        let mut rng = crate::config::seeded_rng(84, crate::config::RngStream::Batch);
        for trial in 0..5 {
            let d = 3;
            let state = random_state(&mut rng, 4, 4, d);
            let rot = random_rotation(&mut rng, d);
            let mut rotated = state.clone();
            let apply = |table: &Mat, out: &mut Mat| {
                for r in 0..table.rows() {
                    let row = table.row(r);
                    for (c, basis) in rot.iter().enumerate() {
                        out.set(r, c, dot(row, basis));
                    }
                }
            };
            apply(&state.user_table, &mut rotated.user_table);
            apply(&state.item_table, &mut rotated.item_table);
            let b = batch(&[(0, 0), (1, 1), (2, 2), (3, 3)], &[]);
            let u1 = uniformity_term(&b, &Embeddings::Tables(&state)).unwrap();
            let u2 = uniformity_term(&b, &Embeddings::Tables(&rotated)).unwrap();
            assert!((u1 - u2).abs() < 1e-10, "trial {trial}: {u1} vs {u2}");
        }
    }
}
