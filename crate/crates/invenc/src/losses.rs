//! Contrastive and adversarial loss primitives.
//!
//! Everything in this module is a pure function of its inputs: no shared
//! state, safe to call concurrently. Gradients are provided alongside the
//! values because the training loop drives a hand-rolled backward pass.

use ndarray::{Array2, ArrayView1, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Temperature setting for the contrastive loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
}

impl ContrastiveConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidTemperature(temperature));
        }
        Ok(Self { temperature })
    }
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { temperature: 0.5 }
    }
}

/// A batch of 2N unit-norm embeddings plus the positive-pair assignment.
///
/// Row `i` and row `pairing[i]` are the two augmented views of one image.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    vectors: Array2<f64>,
    pairing: Vec<usize>,
}

const UNIT_NORM_TOL: f64 = 1e-5;

impl EmbeddingBatch {
    /// Validates the pairing (an involution without fixed points) and that
    /// every row is unit length within 1e-5.
    pub fn new(vectors: Array2<f64>, pairing: Vec<usize>) -> Result<Self> {
        let rows = vectors.nrows();
        if rows < 2 || rows % 2 != 0 {
            return Err(Error::BatchTooSmall { rows });
        }
        if pairing.len() != rows {
            return Err(Error::InvalidPairing(format!(
                "pairing length {} does not match {} rows",
                pairing.len(),
                rows
            )));
        }
        for (i, &j) in pairing.iter().enumerate() {
            if j >= rows {
                return Err(Error::InvalidPairing(format!(
                    "partner index {j} out of range for {rows} rows"
                )));
            }
            if j == i {
                return Err(Error::InvalidPairing(format!("row {i} paired with itself")));
            }
            if pairing[j] != i {
                return Err(Error::InvalidPairing(format!(
                    "pairing is not an involution at rows {i} and {j}"
                )));
            }
        }
        for (i, row) in vectors.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::NotNormalized { row: i, norm });
            }
        }
        Ok(Self { vectors, pairing })
    }

    /// Stacks two aligned view matrices; row `i` of `view_a` pairs with row
    /// `i` of `view_b` (stored at row `i + N`).
    pub fn from_two_views(view_a: Array2<f64>, view_b: Array2<f64>) -> Result<Self> {
        if view_a.dim() != view_b.dim() {
            return Err(Error::ShapeMismatch(format!(
                "view shapes differ: {:?} vs {:?}",
                view_a.dim(),
                view_b.dim()
            )));
        }
        let n = view_a.nrows();
        let d = view_a.ncols();
        let mut vectors = Array2::zeros((2 * n, d));
        vectors.slice_mut(ndarray::s![..n, ..]).assign(&view_a);
        vectors.slice_mut(ndarray::s![n.., ..]).assign(&view_b);
        let pairing = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
        Self::new(vectors, pairing)
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn partner(&self, i: usize) -> usize {
        self.pairing[i]
    }

    pub fn rows(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Integer domain labels in `[0, num_domains)`.
#[derive(Debug, Clone)]
pub struct DomainLabels {
    labels: Vec<usize>,
    num_domains: usize,
}

impl DomainLabels {
    pub fn new(labels: Vec<usize>, num_domains: usize) -> Result<Self> {
        if num_domains == 0 {
            return Err(Error::InvalidConfig("num_domains must be positive".into()));
        }
        for &l in &labels {
            if l >= num_domains {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    num_domains,
                });
            }
        }
        Ok(Self {
            labels,
            num_domains,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`, clamped to [-1, 1].
pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Pairwise cosine similarity matrix of the batch rows.
fn similarity_matrix(batch: &EmbeddingBatch) -> Array2<f64> {
    let z = batch.vectors();
    let norms: Vec<f64> = z
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();
    let mut sims = z.dot(&z.t());
    for ((i, j), s) in sims.indexed_iter_mut() {
        *s = (*s / (norms[i] * norms[j])).clamp(-1.0, 1.0);
    }
    sims
}

/// Per-anchor contrastive term: the anchor's positive must win a softmax
/// over every other row at temperature τ (the positive itself stays in the
/// denominator; only `k = i` is excluded).
pub fn ntxent_pair_loss(i: usize, batch: &EmbeddingBatch, cfg: &ContrastiveConfig) -> Result<f64> {
    let rows = batch.rows();
    if i >= rows {
        return Err(Error::ShapeMismatch(format!(
            "anchor index {i} out of range for {rows} rows"
        )));
    }
    let j = batch.partner(i);
    let zi = batch.vectors().row(i);
    let mut scaled = Vec::with_capacity(rows - 1);
    let mut pos = f64::NAN;
    for k in 0..rows {
        if k == i {
            continue;
        }
        let s = cosine_similarity(zi, batch.vectors().row(k))? / cfg.temperature;
        if k == j {
            pos = s;
        }
        scaled.push(s);
    }
    // log-sum-exp with max subtraction
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scaled.iter().map(|s| (s - max).exp()).sum();
    Ok(max + sum.ln() - pos)
}

/// Mean of the per-anchor terms over all 2N rows.
pub fn ntxent_batch_loss(batch: &EmbeddingBatch, cfg: &ContrastiveConfig) -> Result<f64> {
    let rows = batch.rows();
    let mut total = 0.0;
    for i in 0..rows {
        total += ntxent_pair_loss(i, batch, cfg)?;
    }
    Ok(total / rows as f64)
}

/// Batch loss together with its gradient with respect to the embedding rows.
///
/// The gradient treats `sim` as the dot product, which is exact for the
/// unit-norm rows the batch type enforces; the radial component a full
/// cosine derivative would add is annihilated by the projection head's
/// normalization backward anyway.
pub fn ntxent_batch_grad(
    batch: &EmbeddingBatch,
    cfg: &ContrastiveConfig,
) -> Result<(f64, Array2<f64>)> {
    let rows = batch.rows();
    let tau = cfg.temperature;
    let sims = similarity_matrix(batch);

    // Row-wise softmax over k != i, and the loss as a by-product.
    let mut coeff = Array2::<f64>::zeros((rows, rows));
    let mut loss = 0.0;
    for i in 0..rows {
        let j = batch.partner(i);
        let mut max = f64::NEG_INFINITY;
        for k in 0..rows {
            if k != i {
                max = max.max(sims[[i, k]] / tau);
            }
        }
        let mut denom = 0.0;
        for k in 0..rows {
            if k != i {
                denom += (sims[[i, k]] / tau - max).exp();
            }
        }
        loss += max + denom.ln() - sims[[i, j]] / tau;
        for k in 0..rows {
            if k != i {
                let p = (sims[[i, k]] / tau - max).exp() / denom;
                coeff[[i, k]] = (p - if k == j { 1.0 } else { 0.0 }) / tau;
            }
        }
    }
    loss /= rows as f64;

    // dL/dZ = (C + Cᵀ) Z / 2N  with C the per-anchor softmax coefficients.
    let sym = &coeff + &coeff.t();
    let grad = sym.dot(batch.vectors()) / rows as f64;
    Ok((loss, grad))
}

/// Mean negative log-softmax of the true-domain logit (Eq. 1's classifier
/// term with the probability realized as a softmax over G logits).
pub fn domain_loss(logits: &Array2<f64>, labels: &DomainLabels) -> Result<f64> {
    Ok(domain_loss_grad(logits, labels)?.0)
}

/// Domain loss plus its gradient with respect to the logits.
pub fn domain_loss_grad(
    logits: &Array2<f64>,
    labels: &DomainLabels,
) -> Result<(f64, Array2<f64>)> {
    let (b, g) = logits.dim();
    if b == 0 {
        return Err(Error::ShapeMismatch("empty logits batch".into()));
    }
    if b != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows vs {} labels",
            b,
            labels.len()
        )));
    }
    if g != labels.num_domains() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit columns vs {} domains",
            g,
            labels.num_domains()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("domain logits".into()));
    }

    let mut grad = Array2::<f64>::zeros((b, g));
    let mut loss = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let label = labels.labels()[i];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += max + denom.ln() - row[label];
        for k in 0..g {
            let p = (row[k] - max).exp() / denom;
            grad[[i, k]] = (p - if k == label { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

/// Gradient reversal: identity forward, `-coeff` scaled gradient backward.
#[derive(Debug, Clone, Copy)]
pub struct GradientReversal {
    coeff: f64,
}

impl GradientReversal {
    pub fn new(coeff: f64) -> Self {
        assert!(coeff >= 0.0, "GRL coefficient must be nonnegative");
        Self { coeff }
    }

    pub fn coeff(&self) -> f64 {
        self.coeff
    }

    /// Forward pass: returns the input unchanged (bitwise).
    pub fn forward<D: Dimension>(&self, x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
        x.clone()
    }

    /// Backward pass: the upstream gradient times `-coeff`.
    pub fn backward<D: Dimension>(
        &self,
        upstream: &ndarray::Array<f64, D>,
    ) -> ndarray::Array<f64, D> {
        upstream.mapv(|g| -self.coeff * g)
    }
}

/// Convenience forward wrapper mirroring the operation name.
pub fn grl_apply(x: &Array2<f64>, coeff: f64) -> Array2<f64> {
    GradientReversal::new(coeff).forward(x)
}

/// Hybrid objective: contrastive term plus `lambda` times the domain term.
pub fn total_loss(l_con: f64, l_dom: f64, lambda: f64) -> f64 {
    l_con + lambda * l_dom
}
