//! Patch-wise InfoNCE, masked entropy reconstruction, and the combined loss.
//!
//! Contrastive logits are `q · k / τ` on unit vectors. The negative term is a
//! sum of exponentials over every negative key. For patch-wise training the
//! positive of query patch `(i, j)` is key patch `(i, j)` and the negatives
//! are all other key patches in the mini-batch (or, with
//! [`NegativeScope::SameImage`], the other patches of image `i`).

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchify::MaskPlan;

/// Which key features count as negatives for a query patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeScope {
    /// Every other patch of every image in the mini-batch.
    #[default]
    Batch,
    /// Only the other patches of the same image.
    SameImage,
}

/// Projected query/key features for one mini-batch.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    /// Per image: `G' × d` query features, rows in ascending visible-index order.
    pub queries: Vec<Array2<f64>>,
    /// Per image: `G × d` key features, row `j` is patch `j`.
    pub keys: Vec<Array2<f64>>,
    pub mask_plans: Vec<MaskPlan>,
    pub temperature: f64,
    pub negatives: NegativeScope,
}

/// Loss value with the gradient w.r.t. every query row.
#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub query_grads: Vec<Array2<f64>>,
    /// Per-term losses in (image, visible patch) order.
    pub terms: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pwin: f64,
    pub l_rec: f64,
    pub lambda: f64,
    pub total: f64,
}

/// `-log(exp(a) / (exp(a) + Σ exp(b_z)))` for a positive logit `a` and
/// negative logits `b`, evaluated without overflow and with full precision
/// when the positive dominates.
fn infonce_from_logits(pos: f64, negs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max_neg = negs.clone().fold(f64::NEG_INFINITY, f64::max);
    if pos >= max_neg {
        negs.map(|b| (b - pos).exp()).sum::<f64>().ln_1p()
    } else {
        let sum = (pos - max_neg).exp() + negs.map(|b| (b - max_neg).exp()).sum::<f64>();
        max_neg - pos + sum.ln()
    }
}

/// InfoNCE loss for a single query with one positive and a set of negatives.
pub fn per_patch_infonce(
    q: ArrayView1<f64>,
    k_pos: ArrayView1<f64>,
    negatives: &[ArrayView1<f64>],
    temperature: f64,
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Contract("InfoNCE needs at least one negative".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!("temperature {temperature} must be positive")));
    }
    if negatives.iter().any(|n| n.len() != q.len()) || k_pos.len() != q.len() {
        return Err(Error::Contract("feature widths differ".into()));
    }
    let pos = q.dot(&k_pos) / temperature;
    Ok(infonce_from_logits(pos, negatives.iter().map(|n| q.dot(n) / temperature)))
}

impl ContrastiveBatch {
    fn validate(&self) -> Result<(usize, usize)> {
        let n = self.keys.len();
        if n == 0 || self.queries.len() != n || self.mask_plans.len() != n {
            return Err(Error::Contract("queries, keys and mask plans must align per image".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Contract(format!("temperature {} must be positive", self.temperature)));
        }
        let grid = self.keys[0].nrows();
        let dim = self.keys[0].ncols();
        for ((q, k), m) in self.queries.iter().zip(&self.keys).zip(&self.mask_plans) {
            if k.nrows() != grid || k.ncols() != dim || q.ncols() != dim || m.grid_len != grid {
                return Err(Error::Contract("inconsistent feature shapes in batch".into()));
            }
            if q.nrows() != grid - m.masked_count() {
                return Err(Error::Contract(format!(
                    "{} query rows for {} unmasked patches",
                    q.nrows(),
                    grid - m.masked_count()
                )));
            }
        }
        let negatives = match self.negatives {
            NegativeScope::Batch => n * grid - 1,
            NegativeScope::SameImage => grid - 1,
        };
        if negatives == 0 {
            return Err(Error::Contract("no negatives exist for this batch shape".into()));
        }
        Ok((grid, negatives))
    }

    /// Number of negatives each term sees.
    pub fn negatives_per_term(&self) -> Result<usize> {
        self.validate().map(|(_, k)| k)
    }

    /// Total number of per-patch terms (unmasked query patches).
    pub fn term_count(&self) -> usize {
        self.queries.iter().map(|q| q.nrows()).sum()
    }
}

/// Mean per-patch InfoNCE over all unmasked query patches of the batch.
pub fn patch_wise_loss(batch: &ContrastiveBatch) -> Result<f64> {
    Ok(patch_wise_loss_with_grad(batch)?.loss)
}

/// [`patch_wise_loss`] together with its gradient w.r.t. the query rows.
/// Keys come from the momentum branch and are treated as constants.
pub fn patch_wise_loss_with_grad(batch: &ContrastiveBatch) -> Result<ContrastiveOutput> {
    let (grid, _) = batch.validate()?;
    let tau = batch.temperature;
    let n_terms = batch.term_count();
    if n_terms == 0 {
        return Err(Error::Contract("every patch is masked; no contrastive terms".into()));
    }
    let key_views: Vec<_> = batch.keys.iter().map(|k| k.view()).collect();
    let all_keys = ndarray::concatenate(Axis(0), &key_views).map_err(|e| Error::Contract(e.to_string()))?;
    let mut terms = Vec::with_capacity(n_terms);
    let mut query_grads = Vec::with_capacity(batch.queries.len());
    for (i, (q, plan)) in batch.queries.iter().zip(&batch.mask_plans).enumerate() {
        let (candidates, offset) = match batch.negatives {
            NegativeScope::Batch => (all_keys.view(), i * grid),
            NegativeScope::SameImage => (batch.keys[i].view(), 0),
        };
        // Row r: logits of query r against every candidate key.
        let logits = q.dot(&candidates.t()) / tau;
        let mut grad = Array2::zeros(q.raw_dim());
        for (r, j) in plan.visible_indices().into_iter().enumerate() {
            let row = logits.row(r);
            let pos_col = offset + j;
            let pos = row[pos_col];
            let negs = row.iter().enumerate().filter(move |(c, _)| *c != pos_col).map(|(_, v)| *v);
            terms.push(infonce_from_logits(pos, negs));
            // d/dq = (Σ_c softmax_c k_c − k_pos) / τ
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut p: Array1<f64> = row.mapv(|v| (v - max).exp());
            p /= p.sum();
            p[pos_col] -= 1.0;
            let g = candidates.t().dot(&p) / (tau * n_terms as f64);
            grad.row_mut(r).assign(&g);
        }
        query_grads.push(grad);
    }
    let loss = terms.iter().sum::<f64>() / n_terms as f64;
    Ok(ContrastiveOutput { loss, query_grads, terms })
}

/// Image-wise InfoNCE on pooled features: one query and one key per image,
/// negatives are the other images' keys.
pub fn image_wise_loss_with_grad(queries: &Array2<f64>, keys: &Array2<f64>, temperature: f64) -> Result<ContrastiveOutput> {
    let n = queries.nrows();
    let batch = ContrastiveBatch {
        queries: (0..n).map(|i| queries.slice(ndarray::s![i..i + 1, ..]).to_owned()).collect(),
        keys: (0..n).map(|i| keys.slice(ndarray::s![i..i + 1, ..]).to_owned()).collect(),
        mask_plans: vec![MaskPlan::none(1); n],
        temperature,
        negatives: NegativeScope::Batch,
    };
    patch_wise_loss_with_grad(&batch)
}

/// Mean squared error between predictions and targets over all masked
/// patches (and all values per patch). An empty set gives zero.
pub fn entropy_recon_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    Ok(entropy_recon_loss_with_grad(pred, target)?.0)
}

pub fn entropy_recon_loss_with_grad(pred: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::Contract(format!(
            "prediction shape {:?} differs from target shape {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.is_empty() {
        return Ok((0.0, Array2::zeros(pred.raw_dim())));
    }
    let diff = pred - target;
    let n = diff.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff * (2.0 / n)))
}

/// `total = l_pwin + λ · l_rec`.
pub fn total_loss(l_pwin: f64, l_rec: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown { l_pwin, l_rec, lambda, total: l_pwin + lambda * l_rec }
}
