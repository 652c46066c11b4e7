//! Triplet losses over a batch similarity matrix and their gradients.
//!
//! For a batch of `K` pairs, `S[i][j]` is the similarity of image `i` and text
//! `j` and `l[i][j]` says whether that cell is a positive. Every pair `i`
//! contributes an image-to-text term over row `i` and a text-to-image term
//! over column `i`. Each term compares a soft positive
//!
//! ```text
//! S⁺ = Σ_j α_j S_j,   α = softmax over positives of S/τ
//! ```
//!
//! against the negatives of that row/column:
//!
//! | variant | negative aggregate                         |
//! |---------|--------------------------------------------|
//! | TAL     | `[m − S⁺ + τ·log Σ_neg exp(S_j/τ)]₊`        |
//! | TRL     | `[m − S⁺ + max_neg S_j]₊`                    |
//! | TRL-S   | `Σ_neg [m − S⁺ + S_j]₊`                      |
//!
//! Since `max ≤ τ·logΣexp ≤ max + τ·log n`, TAL bounds TRL from above and
//! approaches it as `τ → 0`.
//!
//! A direction without negatives (every text in the batch shares the anchor's
//! identity) or without positives contributes zero. A hinge argument of
//! exactly zero counts as inactive.
//!
//! [`gradients`] gives `∂L/∂S` for the whole batch; [`grad_tal`] and friends
//! lift it to embeddings when `S = V·Tᵀ`. The [`anchor`] module holds the
//! closed-form single-positive, single-direction gradients used to explain
//! why TRL collapses under noise, and [`gradcheck`] the central-difference
//! checker the tests use against both.

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub tau: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            tau: 0.015,
            reduction: Reduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn new(margin: f64, tau: f64) -> Result<Self> {
        let cfg = Self {
            margin,
            tau,
            reduction: Reduction::Sum,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be nonnegative, got {}", self.margin)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossVariant {
    Tal,
    Trl,
    TrlS,
}

impl LossVariant {
    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Tal => "tal",
            LossVariant::Trl => "trl",
            LossVariant::TrlS => "trls",
        }
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tal" => Ok(LossVariant::Tal),
            "trl" => Ok(LossVariant::Trl),
            "trls" | "trl-s" | "trl_s" => Ok(LossVariant::TrlS),
            other => Err(Error::Config(format!("unknown loss variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Bge,
    Tse,
}

/// Square boolean matrix of positives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    size: usize,
    data: Vec<bool>,
}

impl LabelMatrix {
    pub fn diagonal(size: usize) -> Self {
        let mut m = Self {
            size,
            data: vec![false; size * size],
        };
        for i in 0..size {
            m.set(i, i, true);
        }
        m
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                data.push(f(i, j));
            }
        }
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.size + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.size + j] = v;
    }

    pub fn row(&self, i: usize) -> Vec<bool> {
        self.data[i * self.size..(i + 1) * self.size].to_vec()
    }

    pub fn col(&self, j: usize) -> Vec<bool> {
        (0..self.size).map(|i| self.get(i, j)).collect()
    }
}

/// One branch's `K × K` similarity block with its positive mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSimilarities {
    pub sims: Matrix,
    pub labels: LabelMatrix,
    pub branch: Branch,
}

impl BatchSimilarities {
    pub fn new(sims: Matrix, labels: LabelMatrix, branch: Branch) -> Result<Self> {
        let b = Self { sims, labels, branch };
        b.validate()?;
        Ok(b)
    }

    pub fn size(&self) -> usize {
        self.labels.size()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.labels.size();
        if self.sims.shape() != (k, k) {
            return Err(Error::Shape(format!(
                "similarities are {:?} but labels are {k}x{k}",
                self.sims.shape()
            )));
        }
        if let Some(bad) = self.sims.as_slice().iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite similarity {bad}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    /// Σ `per_pair` (or its mean, under [`Reduction::Mean`]).
    pub total: f64,
    pub per_pair: Vec<f64>,
    pub i2t: Vec<f64>,
    pub t2i: Vec<f64>,
}

/// `Σ_j α_j S_j` over the positives of one row or column.
pub fn weighted_positive(sims: &[f64], labels: &[bool], tau: f64) -> Result<f64> {
    if sims.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} similarities but {} labels",
            sims.len(),
            labels.len()
        )));
    }
    soft_positive(sims, labels, tau)
        .map(|(v, _)| v)
        .ok_or_else(|| Error::Contract("weighted_positive needs at least one positive".into()))
}

/// `S⁺` and the weights `α` (zero off the positives).
fn soft_positive(sims: &[f64], labels: &[bool], tau: f64) -> Option<(f64, Vec<f64>)> {
    let max = sims
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut alpha: Vec<f64> = sims
        .iter()
        .zip(labels)
        .map(|(s, &l)| if l { ((s - max) / tau).exp() } else { 0.0 })
        .collect();
    let z: f64 = alpha.iter().sum();
    for a in &mut alpha {
        *a /= z;
    }
    let value = alpha.iter().zip(sims).map(|(a, s)| a * s).sum();
    Some((value, alpha))
}

/// `β_j = softmax_{j ∈ neg}(S_j / τ)`, zero off the negatives. `None` if
/// there are no negatives.
pub fn negative_weights(sims: &[f64], labels: &[bool], tau: f64) -> Option<Vec<f64>> {
    let lse = log_sum_exp(
        sims.iter()
            .zip(labels)
            .filter(|(_, &l)| !l)
            .map(|(s, _)| s / tau),
    )?;
    Some(
        sims.iter()
            .zip(labels)
            .map(|(s, &l)| if l { 0.0 } else { (s / tau - lse).exp() })
            .collect(),
    )
}

/// Value and `∂/∂S` of one direction (a row, or a column read as a row).
fn direction(
    sims: &[f64],
    labels: &[bool],
    variant: LossVariant,
    cfg: &LossConfig,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let zero = |k: usize| (0.0, want_grad.then(|| vec![0.0; k]));
    let k = sims.len();
    let Some((s_pos, alpha)) = soft_positive(sims, labels, cfg.tau) else {
        return zero(k);
    };
    let negatives: Vec<usize> = (0..k).filter(|&j| !labels[j]).collect();
    if negatives.is_empty() {
        return zero(k);
    }
    let base = cfg.margin - s_pos;

    // Negative-side contribution and the multiplicity of -S⁺.
    let (value, neg_grad, pos_multiplier) = match variant {
        LossVariant::Tal => {
            let lse = log_sum_exp(negatives.iter().map(|&j| sims[j] / cfg.tau))
                .expect("nonempty negatives");
            let h = base + cfg.tau * lse;
            if h <= 0.0 {
                return zero(k);
            }
            let g = want_grad.then(|| {
                let mut g = vec![0.0; k];
                for &j in &negatives {
                    g[j] = (sims[j] / cfg.tau - lse).exp();
                }
                g
            });
            (h, g, 1.0)
        }
        LossVariant::Trl => {
            // Hardest negative, ties to the lowest index.
            let hardest = negatives
                .iter()
                .copied()
                .reduce(|a, b| if sims[b] > sims[a] { b } else { a })
                .expect("nonempty negatives");
            let h = base + sims[hardest];
            if h <= 0.0 {
                return zero(k);
            }
            let g = want_grad.then(|| {
                let mut g = vec![0.0; k];
                g[hardest] = 1.0;
                g
            });
            (h, g, 1.0)
        }
        LossVariant::TrlS => {
            let mut total = 0.0;
            let mut g = want_grad.then(|| vec![0.0; k]);
            let mut active = 0usize;
            for &j in &negatives {
                let h = base + sims[j];
                if h > 0.0 {
                    total += h;
                    active += 1;
                    if let Some(g) = g.as_mut() {
                        g[j] = 1.0;
                    }
                }
            }
            if active == 0 {
                return zero(k);
            }
            (total, g, active as f64)
        }
    };

    let grad = neg_grad.map(|mut g| {
        // ∂S⁺/∂S_j = α_j (1 + (S_j − S⁺)/τ)
        for j in 0..k {
            if labels[j] {
                g[j] -= pos_multiplier * alpha[j] * (1.0 + (sims[j] - s_pos) / cfg.tau);
            }
        }
        g
    });
    (value, grad)
}

fn per_pair_terms(
    batch: &BatchSimilarities,
    variant: LossVariant,
    cfg: &LossConfig,
    weights: Option<&[f64]>,
) -> Result<(LossValue, Option<Matrix>)> {
    cfg.validate()?;
    batch.validate()?;
    let k = batch.size();
    if let Some(w) = weights {
        if w.len() != k {
            return Err(Error::Shape(format!("{} weights for a batch of {k}", w.len())));
        }
    }
    let mut grad = weights.map(|_| Matrix::zeros(k, k));
    let mut i2t = Vec::with_capacity(k);
    let mut t2i = Vec::with_capacity(k);
    for i in 0..k {
        let w = weights.map_or(1.0, |w| w[i]);
        let want = grad.is_some() && w != 0.0;

        let (v_row, g_row) = direction(batch.sims.row(i), &batch.labels.row(i), variant, cfg, want);
        let (v_col, g_col) = direction(
            &batch.sims.col(i),
            &batch.labels.col(i),
            variant,
            cfg,
            want,
        );
        if let (Some(gm), Some(gr), Some(gc)) = (grad.as_mut(), g_row, g_col) {
            for j in 0..k {
                gm.add_at(i, j, w * gr[j]);
                gm.add_at(j, i, w * gc[j]);
            }
        }
        i2t.push(v_row);
        t2i.push(v_col);
    }
    let per_pair: Vec<f64> = i2t.iter().zip(&t2i).map(|(a, b)| a + b).collect();
    if let Some(bad) = per_pair.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss for pair {bad}")));
    }
    let total = match (weights, cfg.reduction) {
        (Some(w), _) => per_pair.iter().zip(w).map(|(l, w)| l * w).sum::<f64>(),
        (None, _) => per_pair.iter().sum::<f64>(),
    };
    let (total, grad) = match cfg.reduction {
        Reduction::Sum => (total, grad),
        Reduction::Mean => {
            let scale = 1.0 / k.max(1) as f64;
            (
                total * scale,
                grad.map(|mut g| {
                    g.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
                    g
                }),
            )
        }
    };
    Ok((
        LossValue {
            total,
            per_pair,
            i2t,
            t2i,
        },
        grad,
    ))
}

/// Per-pair loss of `variant` over the batch.
pub fn loss(batch: &BatchSimilarities, variant: LossVariant, cfg: &LossConfig) -> Result<LossValue> {
    per_pair_terms(batch, variant, cfg, None).map(|(v, _)| v)
}

pub fn tal(batch: &BatchSimilarities, cfg: &LossConfig) -> Result<LossValue> {
    loss(batch, LossVariant::Tal, cfg)
}

pub fn trl(batch: &BatchSimilarities, cfg: &LossConfig) -> Result<LossValue> {
    loss(batch, LossVariant::Trl, cfg)
}

pub fn trl_s(batch: &BatchSimilarities, cfg: &LossConfig) -> Result<LossValue> {
    loss(batch, LossVariant::TrlS, cfg)
}

/// Weighted loss `Σ_i w_i · per_pair[i]` and its gradient with respect to
/// every entry of the similarity matrix. In the returned [`LossValue`],
/// `per_pair` is unweighted and `total` is weighted.
pub fn gradients(
    batch: &BatchSimilarities,
    variant: LossVariant,
    cfg: &LossConfig,
    weights: &[f64],
) -> Result<(LossValue, Matrix)> {
    let (v, g) = per_pair_terms(batch, variant, cfg, Some(weights))?;
    Ok((v, g.expect("weights given")))
}

/// Row-wise embeddings of a batch: `images[i]` and `texts[j]`, with
/// similarities `S = images · textsᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub images: Matrix,
    pub texts: Matrix,
}

impl Embeddings {
    pub fn similarities(&self) -> Result<Matrix> {
        self.images.mul_transpose(&self.texts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrads {
    pub images: Matrix,
    pub texts: Matrix,
}

/// Chain rule through `S = V·Tᵀ` for the full two-direction loss.
pub fn embedding_gradients(
    labels: &LabelMatrix,
    emb: &Embeddings,
    variant: LossVariant,
    cfg: &LossConfig,
) -> Result<(LossValue, EmbeddingGrads)> {
    let sims = emb.similarities()?;
    let batch = BatchSimilarities::new(sims, labels.clone(), Branch::Bge)?;
    let ones = vec![1.0; batch.size()];
    let (value, g) = gradients(&batch, variant, cfg, &ones)?;
    let images = g.matmul(&emb.texts)?;
    let texts = g.transpose().matmul(&emb.images)?;
    Ok((value, EmbeddingGrads { images, texts }))
}

pub fn grad_tal(labels: &LabelMatrix, emb: &Embeddings, cfg: &LossConfig) -> Result<EmbeddingGrads> {
    embedding_gradients(labels, emb, LossVariant::Tal, cfg).map(|(_, g)| g)
}

pub fn grad_trl(labels: &LabelMatrix, emb: &Embeddings, cfg: &LossConfig) -> Result<EmbeddingGrads> {
    embedding_gradients(labels, emb, LossVariant::Trl, cfg).map(|(_, g)| g)
}

pub fn grad_trl_s(labels: &LabelMatrix, emb: &Embeddings, cfg: &LossConfig) -> Result<EmbeddingGrads> {
    embedding_gradients(labels, emb, LossVariant::TrlS, cfg).map(|(_, g)| g)
}

/// Closed-form image-to-text gradients for a single anchor `v_i` whose only
/// positive is `t_i`, every other text being a negative:
///
/// ```text
/// TRL:   ∂v_i = t̂_i − t_i              ∂t_i = −v_i      ∂t̂_i = v_i
/// TRL-S: ∂v_i = Σ_{j∈Z} (t_j − t_i)     ∂t_i = −|Z| v_i  ∂t_j = v_i  (j ∈ Z)
/// TAL:   ∂v_i = Σ_{j≠i} β_j (t_j − t_i)  ∂t_i = −v_i      ∂t_j = β_j v_i
/// ```
///
/// with `t̂_i` the hardest negative, `Z` the negatives with an active hinge
/// and `β = softmax_{j≠i}(v_iᵀt_j / τ)`. An inactive hinge yields zeros.
pub mod anchor {
    use super::*;
    use crate::math::{axpy, dot};

    #[derive(Debug, Clone, PartialEq)]
    pub struct AnchorGrads {
        /// `∂L/∂v_i`
        pub anchor: Vec<f64>,
        /// `∂L/∂t_j` for every text row.
        pub texts: Matrix,
    }

    fn check(v: &[f64], texts: &Matrix, i: usize) -> Result<()> {
        if texts.cols() != v.len() {
            return Err(Error::Shape(format!(
                "anchor has {} dims, texts have {}",
                v.len(),
                texts.cols()
            )));
        }
        if i >= texts.rows() || texts.rows() < 2 {
            return Err(Error::Contract(format!(
                "anchor index {i} needs a positive and at least one negative among {} texts",
                texts.rows()
            )));
        }
        Ok(())
    }

    fn scores(v: &[f64], texts: &Matrix) -> Vec<f64> {
        (0..texts.rows()).map(|j| dot(v, texts.row(j))).collect()
    }

    /// `β_j` over `j ≠ i` (`β_i = 0`).
    pub fn tal_beta(v: &[f64], texts: &Matrix, i: usize, tau: f64) -> Result<Vec<f64>> {
        check(v, texts, i)?;
        let s = scores(v, texts);
        let mut labels = vec![false; s.len()];
        labels[i] = true;
        Ok(negative_weights(&s, &labels, tau).expect("at least one negative"))
    }

    /// The one-direction, single-positive loss the closed forms differentiate.
    pub fn loss(variant: LossVariant, v: &[f64], texts: &Matrix, i: usize, cfg: &LossConfig) -> Result<f64> {
        check(v, texts, i)?;
        let s = scores(v, texts);
        let neg = (0..s.len()).filter(|&j| j != i);
        let base = cfg.margin - s[i];
        Ok(match variant {
            LossVariant::Trl => (base + neg.map(|j| s[j]).fold(f64::NEG_INFINITY, f64::max)).max(0.0),
            LossVariant::TrlS => neg.map(|j| (base + s[j]).max(0.0)).sum(),
            LossVariant::Tal => {
                let lse = log_sum_exp(neg.map(|j| s[j] / cfg.tau)).expect("nonempty");
                (base + cfg.tau * lse).max(0.0)
            }
        })
    }

    pub fn grad_trl(v: &[f64], texts: &Matrix, i: usize, cfg: &LossConfig) -> Result<AnchorGrads> {
        check(v, texts, i)?;
        let s = scores(v, texts);
        let d = v.len();
        let mut out = AnchorGrads {
            anchor: vec![0.0; d],
            texts: Matrix::zeros(texts.rows(), d),
        };
        let hardest = (0..s.len())
            .filter(|&j| j != i)
            .reduce(|a, b| if s[b] > s[a] { b } else { a })
            .expect("nonempty");
        if cfg.margin - s[i] + s[hardest] <= 0.0 {
            return Ok(out);
        }
        out.anchor = texts.row(hardest).to_vec();
        axpy(-1.0, texts.row(i), &mut out.anchor);
        axpy(-1.0, v, out.texts.row_mut(i));
        axpy(1.0, v, out.texts.row_mut(hardest));
        Ok(out)
    }

    pub fn grad_trl_s(v: &[f64], texts: &Matrix, i: usize, cfg: &LossConfig) -> Result<AnchorGrads> {
        check(v, texts, i)?;
        let s = scores(v, texts);
        let d = v.len();
        let mut out = AnchorGrads {
            anchor: vec![0.0; d],
            texts: Matrix::zeros(texts.rows(), d),
        };
        let active: Vec<usize> = (0..s.len())
            .filter(|&j| j != i && cfg.margin - s[i] + s[j] > 0.0)
            .collect();
        for &j in &active {
            axpy(1.0, texts.row(j), &mut out.anchor);
            axpy(-1.0, texts.row(i), &mut out.anchor);
            axpy(1.0, v, out.texts.row_mut(j));
        }
        axpy(-(active.len() as f64), v, out.texts.row_mut(i));
        Ok(out)
    }

    pub fn grad_tal(v: &[f64], texts: &Matrix, i: usize, cfg: &LossConfig) -> Result<AnchorGrads> {
        let d = v.len();
        let mut out = AnchorGrads {
            anchor: vec![0.0; d],
            texts: Matrix::zeros(texts.rows(), d),
        };
        if loss(LossVariant::Tal, v, texts, i, cfg)? <= 0.0 {
            return Ok(out);
        }
        let beta = tal_beta(v, texts, i, cfg.tau)?;
        for (j, b) in beta.iter().enumerate() {
            if j == i {
                continue;
            }
            axpy(*b, texts.row(j), &mut out.anchor);
            axpy(-*b, texts.row(i), &mut out.anchor);
            axpy(*b, v, out.texts.row_mut(j));
        }
        axpy(-1.0, v, out.texts.row_mut(i));
        Ok(out)
    }

    pub fn grad(variant: LossVariant, v: &[f64], texts: &Matrix, i: usize, cfg: &LossConfig) -> Result<AnchorGrads> {
        match variant {
            LossVariant::Tal => grad_tal(v, texts, i, cfg),
            LossVariant::Trl => grad_trl(v, texts, i, cfg),
            LossVariant::TrlS => grad_trl_s(v, texts, i, cfg),
        }
    }
}

/// Central finite differences.
pub mod gradcheck {
    /// Gradient of `f` at `x` by central differences with step `h`.
    pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|k| {
                let orig = probe[k];
                probe[k] = orig + h;
                let fp = f(&probe);
                probe[k] = orig - h;
                let fm = f(&probe);
                probe[k] = orig;
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    /// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
    pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
        let diff = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = crate::math::norm(a).max(crate::math::norm(b));
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }
}
