//! Retrieval metrics: Rank-k, mAP and mINP for text queries against an
//! image gallery.

mod io;
pub mod oracle;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{read_embeddings, read_similarity_csv, similarity_from_embeddings, write_embeddings, write_similarity_csv, SimilarityTable};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Gallery indices by descending score; equal scores keep ascending index order.
pub fn rank_gallery(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: usize,
    /// Gallery indices, best first.
    pub ranking: Vec<usize>,
    /// Relevance of each entry of `ranking`.
    pub relevant: Vec<bool>,
    pub average_precision: f64,
    pub inverse_negative_penalty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankK {
    pub k: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mINP")]
    pub minp: f64,
    pub num_queries: usize,
    pub num_gallery: usize,
    /// Rank-k for every requested k.
    pub cmc: Vec<RankK>,
    pub per_query: Vec<QueryResult>,
}

impl RetrievalReport {
    pub fn rank_at(&self, k: usize) -> Option<f64> {
        self.cmc.iter().find(|r| r.k == k).map(|r| r.value)
    }

    /// Same report without the per-query listing.
    pub fn summary(&self) -> RetrievalReport {
        RetrievalReport {
            per_query: Vec::new(),
            ..self.clone()
        }
    }
}

fn score_query(query: usize, scores: &[f64], query_id: usize, gallery_ids: &[usize]) -> Result<QueryResult> {
    if let Some(g) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Contract(format!("query {query}: similarity to gallery item {g} is not finite")));
    }
    let ranking = rank_gallery(scores);
    let relevant: Vec<bool> = ranking.iter().map(|&g| gallery_ids[g] == query_id).collect();
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(Error::Contract(format!(
            "query {query} (identity {query_id}) has no relevant gallery item"
        )));
    }
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut last = 0;
    for (i, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            precision_sum += hits as f64 / (i + 1) as f64;
            last = i + 1;
        }
    }
    Ok(QueryResult {
        query,
        ranking,
        relevant,
        average_precision: precision_sum / total as f64,
        inverse_negative_penalty: total as f64 / last as f64,
    })
}

/// Scores every query row of `sim` (`[Q, G]`) against the gallery.
pub fn evaluate(sim: &Tensor, query_ids: &[usize], gallery_ids: &[usize], ks: &[usize]) -> Result<RetrievalReport> {
    let (q, g) = sim.dims2()?;
    if query_ids.len() != q || gallery_ids.len() != g {
        return Err(Error::shape("evaluate", &[q, g], &[query_ids.len(), gallery_ids.len()]));
    }
    if ks.contains(&0) {
        return Err(Error::Contract("rank-k needs k >= 1".into()));
    }
    if q == 0 {
        return Err(Error::Contract("no queries to evaluate".into()));
    }
    let per_query: Vec<QueryResult> = (0..q)
        .into_par_iter()
        .map(|i| score_query(i, sim.row(i), query_ids[i], gallery_ids))
        .collect::<Result<_>>()?;
    let nq = q as f64;
    let rank_k = |k: usize| {
        per_query
            .iter()
            .filter(|r| r.relevant.iter().take(k).any(|&x| x))
            .count() as f64
            / nq
    };
    let map = per_query.iter().map(|r| r.average_precision).sum::<f64>() / nq;
    let minp = per_query.iter().map(|r| r.inverse_negative_penalty).sum::<f64>() / nq;
    Ok(RetrievalReport {
        rank1: rank_k(1),
        rank5: rank_k(5),
        rank10: rank_k(10),
        map,
        minp,
        num_queries: q,
        num_gallery: g,
        cmc: ks.iter().map(|&k| RankK { k, value: rank_k(k) }).collect(),
        per_query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_gallery(&[0.1, 0.9, 0.5]), vec![1, 2, 0]);
        assert_eq!(rank_gallery(&[0.3; 4]), vec![0, 1, 2, 3]);
    }

    #[test]
    fn hand_checked_ap_and_inp() {
        // relevance by rank [0, 1, 0, 1]
        let sim = Tensor::from_rows(&[vec![0.9, 0.8, 0.7, 0.6]]).unwrap();
        let r = evaluate(&sim, &[1], &[0, 1, 2, 1], &DEFAULT_KS).unwrap();
        assert_eq!(r.map, 0.5);
        assert_eq!(r.minp, 0.5);
        assert_eq!(r.rank1, 0.0);
        assert_eq!(r.rank5, 1.0);

        let sim = Tensor::from_rows(&[vec![5.0, 4.0, 3.0, 2.0, 1.0]]).unwrap();
        let r = evaluate(&sim, &[7], &[0, 1, 7, 2, 3], &DEFAULT_KS).unwrap();
        assert_eq!((r.rank1, r.rank5), (0.0, 1.0));
        assert!((r.map - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.minp - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_retrieval() {
        let sim = Tensor::from_rows(&[vec![1.0, 0.9, 0.1], vec![0.0, 0.1, 0.5]]).unwrap();
        let r = evaluate(&sim, &[4, 5], &[4, 4, 5], &DEFAULT_KS).unwrap();
        assert_eq!((r.rank1, r.map, r.minp), (1.0, 1.0, 1.0));
    }

    #[test]
    fn query_without_match_is_named() {
        let sim = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let err = evaluate(&sim, &[0, 9], &[0, 1], &DEFAULT_KS).unwrap_err();
        assert!(matches!(err, Error::Contract(ref m) if m.contains("query 1")), "{err}");
    }
}
