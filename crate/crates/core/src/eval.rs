//! Text-to-image retrieval evaluation.
//!
//! Queries are captions, the gallery holds each distinct image once, and a
//! gallery image is relevant to a query when they share an identity. Both
//! branches are combined by averaging their similarity matrices. For every
//! query the gallery is ranked by descending similarity, ties going to the
//! lower gallery index, and scored with:
//!
//! - Rank-K: whether a relevant image appears in the top K;
//! - AP: mean of the precision at each relevant position;
//! - INP: `G / R_hard`, the number of relevant images over the rank of the
//!   last one retrieved.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_item, EncoderParams, ItemEncoding, Modality};
use crate::error::{Error, Result};
use crate::losses::Branch;
use crate::math::{mean_std, Matrix};
use crate::encoder::similarity_block;
use crate::synth_data::PairDataset;

/// `(S_b + S_t) / 2`
pub fn joint_similarity(bge: &Matrix, tse: &Matrix) -> Result<Matrix> {
    if bge.shape() != tse.shape() {
        return Err(Error::Shape(format!(
            "cannot average {:?} and {:?} similarity matrices",
            bge.shape(),
            tse.shape()
        )));
    }
    let (r, c) = bge.shape();
    Ok(Matrix::from_fn(r, c, |i, j| (bge.get(i, j) + tse.get(i, j)) / 2.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub minp: f64,
    /// 1-based positions of the relevant items in each query's ranking.
    pub per_query_ranks: Vec<Vec<usize>>,
}

impl RetrievalResult {
    /// Fraction of queries with a relevant item in the top `k`.
    pub fn rank_k(&self, k: usize) -> f64 {
        let hits = self
            .per_query_ranks
            .iter()
            .filter(|r| r.first().is_some_and(|&p| p <= k))
            .count();
        hits as f64 / self.per_query_ranks.len() as f64
    }

    pub fn rank_map(&self) -> BTreeMap<usize, f64> {
        BTreeMap::from([(1, self.rank1), (5, self.rank5), (10, self.rank10)])
    }
}

/// Gallery order for one query: indices by descending similarity, ties by
/// ascending index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Score a query × gallery similarity matrix against a relevance matrix of
/// the same shape.
pub fn evaluate(similarities: &Matrix, relevance: &[Vec<bool>]) -> Result<RetrievalResult> {
    let (q, g) = similarities.shape();
    if relevance.len() != q || relevance.iter().any(|r| r.len() != g) {
        return Err(Error::Shape(format!(
            "relevance does not match the {q}x{g} similarity matrix"
        )));
    }
    if q == 0 {
        return Err(Error::Evaluation("no queries".into()));
    }
    if !similarities.is_finite() {
        return Err(Error::Numeric("similarities are not finite".into()));
    }
    let mut per_query_ranks = Vec::with_capacity(q);
    let (mut ap_sum, mut inp_sum) = (0.0, 0.0);
    for (qi, rel) in relevance.iter().enumerate() {
        let order = ranking(similarities.row(qi));
        let ranks: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(_, &gi)| rel[gi])
            .map(|(pos, _)| pos + 1)
            .collect();
        if ranks.is_empty() {
            return Err(Error::Evaluation(format!("query {qi} has no relevant gallery item")));
        }
        let ap: f64 = ranks
            .iter()
            .enumerate()
            .map(|(n, &pos)| (n + 1) as f64 / pos as f64)
            .sum::<f64>()
            / ranks.len() as f64;
        ap_sum += ap;
        inp_sum += ranks.len() as f64 / *ranks.last().unwrap() as f64;
        per_query_ranks.push(ranks);
    }
    let mut out = RetrievalResult {
        rank1: 0.0,
        rank5: 0.0,
        rank10: 0.0,
        map: ap_sum / q as f64,
        minp: inp_sum / q as f64,
        per_query_ranks,
    };
    out.rank1 = out.rank_k(1);
    out.rank5 = out.rank_k(5);
    out.rank10 = out.rank_k(10);
    Ok(out)
}

/// The `metrics.json` record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsJson {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mINP")]
    pub minp: f64,
    pub num_queries: usize,
    pub num_gallery: usize,
}

impl MetricsJson {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("plain struct serialises");
        std::fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(e.line(), e.to_string()))
    }
}

/// Retrieval metrics of a model on a dataset, plus the spread of the joint
/// similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEval {
    pub metrics: RetrievalResult,
    pub num_queries: usize,
    pub num_gallery: usize,
    /// Population standard deviation over every query × gallery entry.
    pub similarity_std: f64,
    pub similarity_mean: f64,
}

impl ModelEval {
    pub fn to_json(&self) -> MetricsJson {
        MetricsJson {
            rank1: self.metrics.rank1,
            rank5: self.metrics.rank5,
            rank10: self.metrics.rank10,
            map: self.metrics.map,
            minp: self.metrics.minp,
            num_queries: self.num_queries,
            num_gallery: self.num_gallery,
        }
    }
}

/// Captions of clean pairs query a gallery of the distinct images of those
/// pairs (first occurrence of each image label).
pub fn evaluate_model(params: &EncoderParams, dataset: &PairDataset) -> Result<ModelEval> {
    let clean: Vec<_> = dataset.items.iter().filter(|it| it.true_clean).collect();
    if clean.is_empty() {
        return Err(Error::Evaluation("no clean pairs to evaluate".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    let gallery: Vec<_> = clean.iter().filter(|it| seen.insert(it.image_label)).collect();
    let queries: Vec<ItemEncoding> = clean
        .iter()
        .map(|it| encode_item(params, &it.text_raw, Modality::Text))
        .collect::<Result<_>>()?;
    let images: Vec<ItemEncoding> = gallery
        .iter()
        .map(|it| encode_item(params, &it.image_raw, Modality::Image))
        .collect::<Result<_>>()?;
    let q: Vec<&ItemEncoding> = queries.iter().collect();
    let g: Vec<&ItemEncoding> = images.iter().collect();
    let sims = joint_similarity(
        &similarity_block(&q, &g, Branch::Bge),
        &similarity_block(&q, &g, Branch::Tse),
    )?;
    let relevance: Vec<Vec<bool>> = clean
        .iter()
        .map(|qi| gallery.iter().map(|gi| gi.identity == qi.identity).collect())
        .collect();
    let metrics = evaluate(&sims, &relevance)?;
    let (similarity_mean, similarity_std) = mean_std(sims.as_slice());
    Ok(ModelEval {
        metrics,
        num_queries: queries.len(),
        num_gallery: images.len(),
        similarity_std,
        similarity_mean,
    })
}

/// Expected Rank-1 of a uniformly random ranking: mean over queries of the
/// fraction of the gallery that is relevant.
pub fn random_rank1(dataset: &PairDataset) -> f64 {
    let clean: Vec<_> = dataset.items.iter().filter(|it| it.true_clean).collect();
    let mut seen = std::collections::BTreeSet::new();
    let gallery: Vec<_> = clean.iter().filter(|it| seen.insert(it.image_label)).collect();
    let total: f64 = clean
        .iter()
        .map(|q| gallery.iter().filter(|g| g.identity == q.identity).count() as f64 / gallery.len() as f64)
        .sum();
    total / clean.len() as f64
}
