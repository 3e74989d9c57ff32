//! Training objectives: symmetric InfoNCE, masked L2 reconstruction and
//! ground–satellite matching with batch-roll negatives.
//!
//! The functions here compute plain values. Their differentiable counterparts
//! live on [`crate::autodiff::Graph`] and share the same arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{l2_norm, Matrix};
use crate::vit::MaskPlan;

/// Probability clamp used by the matching loss.
pub const MATCH_EPS: f64 = 1e-7;
/// Tolerance on row norms of a normalized embedding batch.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch<F> {
    pub vectors: Matrix<F>,
    pub normalized: bool,
}

impl<F: Scalar> EmbeddingBatch<F> {
    /// L2-normalizes every row.
    pub fn normalized(mut vectors: Matrix<F>) -> Self {
        for r in 0..vectors.rows() {
            let n = l2_norm(vectors.row(r)).max(F::of(1e-12));
            for v in vectors.row_mut(r) {
                *v /= n;
            }
        }
        Self { vectors, normalized: true }
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    fn check_unit_rows(&self) -> Result<()> {
        if !self.normalized {
            return Err(Error::Contract("embedding batch is not marked normalized".into()));
        }
        for r in 0..self.vectors.rows() {
            let n = l2_norm(self.vectors.row(r)).to_f64_lossy();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Contract(format!("row {r} has norm {n}, expected 1")));
            }
        }
        Ok(())
    }
}

/// Loss and `∂loss/∂logits` for symmetric InfoNCE on a square logit matrix with
/// positives on the diagonal: the mean of row-wise and column-wise cross-entropy.
pub(crate) fn info_nce_from_logits<F: Scalar>(logits: &Matrix<F>) -> (F, Matrix<F>) {
    let n = logits.rows();
    let nf = F::of_usize(n);
    let half = F::of(0.5);
    let mut row_p = logits.clone();
    crate::autodiff::softmax_rows_in_place(&mut row_p);
    let mut col_p = logits.transpose();
    crate::autodiff::softmax_rows_in_place(&mut col_p);
    let (mut lg, mut ls) = (F::zero(), F::zero());
    for i in 0..n {
        lg -= row_p.get(i, i).ln();
        ls -= col_p.get(i, i).ln();
    }
    let loss = (lg / nf + ls / nf) * half;
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { F::one() } else { F::zero() };
            // row term over (i, j) and column term with roles swapped
            let v = (row_p.get(i, j) - delta) + (col_p.get(j, i) - delta);
            d.set(i, j, v * half / nf);
        }
    }
    (loss, d)
}

/// Symmetric InfoNCE between row-aligned, unit-norm ground and satellite embeddings.
pub fn info_nce_symmetric<F: Scalar>(g: &EmbeddingBatch<F>, s: &EmbeddingBatch<F>, temperature: F) -> Result<F> {
    if g.vectors.shape() != s.vectors.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", g.vectors.shape(), s.vectors.shape())));
    }
    if g.len() < 2 {
        return Err(Error::DegenerateBatch { needed: 2, got: g.len() });
    }
    if !(temperature > F::zero()) {
        return Err(Error::range("temperature", temperature));
    }
    g.check_unit_rows()?;
    s.check_unit_rows()?;
    let mut logits = g.vectors.matmul_nt(&s.vectors);
    logits.scale(F::one() / temperature);
    Ok(info_nce_from_logits(&logits).0)
}

/// Which patches contribute to the reconstruction loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconScope {
    #[default]
    MaskedOnly,
    AllPatches,
}

impl ReconScope {
    pub fn rows(self, plan: &MaskPlan) -> Vec<usize> {
        match self {
            ReconScope::MaskedOnly => plan.masked_idx.clone(),
            ReconScope::AllPatches => (0..plan.num_patches()).collect(),
        }
    }
}

/// Mean squared error over the patches selected by `scope`, averaged over
/// patches and patch elements. An empty selection contributes zero.
pub fn reconstruction_loss<F: Scalar>(pred: &Matrix<F>, target: &Matrix<F>, plan: &MaskPlan, scope: ReconScope) -> Result<F> {
    if pred.shape() != target.shape() || pred.rows() != plan.num_patches() {
        return Err(Error::Shape(format!(
            "pred {:?}, target {:?}, plan over {} patches",
            pred.shape(),
            target.shape(),
            plan.num_patches()
        )));
    }
    let rows = scope.rows(plan);
    if rows.is_empty() {
        return Ok(F::zero());
    }
    let mut sum = F::zero();
    for &r in &rows {
        for (&p, &t) in pred.row(r).iter().zip(target.row(r)) {
            sum += (p - t) * (p - t);
        }
    }
    Ok(sum / F::of_usize(rows.len() * pred.cols()))
}

/// One ground/satellite pairing produced by batch rolling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchPair {
    pub ground: usize,
    pub satellite: usize,
    pub label: u8,
}

/// `N` aligned positives followed by `N` negatives pairing ground `i` with
/// satellite `(i + 1) mod N`.
pub fn match_pairs(n: usize) -> Result<Vec<MatchPair>> {
    if n < 2 {
        return Err(Error::DegenerateBatch { needed: 2, got: n });
    }
    let pos = (0..n).map(|i| MatchPair { ground: i, satellite: i, label: 1 });
    let neg = (0..n).map(|i| MatchPair { ground: i, satellite: (i + 1) % n, label: 0 });
    Ok(pos.chain(neg).collect())
}

/// Pairs references from two equal-length batches via [`match_pairs`].
pub fn make_match_batch<'a, G, S>(ground: &'a [G], satellite: &'a [S]) -> Result<Vec<(&'a G, &'a S, u8)>> {
    if ground.len() != satellite.len() {
        return Err(Error::Shape(format!("{} ground vs {} satellite samples", ground.len(), satellite.len())));
    }
    Ok(match_pairs(ground.len())?.into_iter().map(|p| (&ground[p.ground], &satellite[p.satellite], p.label)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchBatch<F> {
    pub pair_logits: Vec<F>,
    pub labels: Vec<F>,
}

/// Mean binary cross-entropy of probabilities clamped to `[eps, 1 - eps]`.
pub fn bce_mean<F: Scalar>(probs: &[F], labels: &[F], eps: F) -> Result<F> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Shape(format!("{} probabilities vs {} labels", probs.len(), labels.len())));
    }
    let mut sum = F::zero();
    for (&p, &y) in probs.iter().zip(labels) {
        if y != F::zero() && y != F::one() {
            return Err(Error::Contract(format!("label {y} is not 0 or 1")));
        }
        let p = p.max(eps).min(F::one() - eps);
        sum -= y * p.ln() + (F::one() - y) * (F::one() - p).ln();
    }
    Ok(sum / F::of_usize(probs.len()))
}

/// Binary cross-entropy of sigmoid(logits) against {0, 1} labels.
pub fn matching_loss<F: Scalar>(batch: &MatchBatch<F>) -> Result<F> {
    let probs: Vec<F> = batch.pair_logits.iter().map(|&z| crate::autodiff::sigmoid(z)).collect();
    bce_mean(&probs, &batch.labels, F::of(MATCH_EPS))
}

fn finite<F: Scalar>(name: &str, v: F) -> Result<F> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(name.to_string()))
    }
}

/// Dual-stream objective `L_c + L_r`.
pub fn total_loss_cve<F: Scalar>(contrastive: F, reconstruction: F) -> Result<F> {
    Ok(finite("L_c", contrastive)? + finite("L_r", reconstruction)?)
}

/// Single-stream objective `L_m + L_r`.
pub fn total_loss_cvm<F: Scalar>(matching: F, reconstruction: F) -> Result<F> {
    Ok(finite("L_m", matching)? + finite("L_r", reconstruction)?)
}
