//! Literal-definition metric computation, quadratic in the gallery size.
//! Used by `eval --oracle` to cross-check [`super::evaluate`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 1-based rank of gallery item `g`: one plus the number of items that beat it
/// (higher score, or equal score with a smaller index).
fn rank_of(scores: &[f64], g: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&h| scores[h] > scores[g] || (scores[h] == scores[g] && h < g))
        .count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleMetrics {
    /// `(k, rank-k)` for each requested k.
    pub rank_k: Vec<(usize, f64)>,
    pub map: f64,
    pub minp: f64,
}

pub fn evaluate_oracle(sim: &Tensor, query_ids: &[usize], gallery_ids: &[usize], ks: &[usize]) -> Result<OracleMetrics> {
    let (q, g) = sim.dims2()?;
    let mut aps = Vec::with_capacity(q);
    let mut inps = Vec::with_capacity(q);
    let mut best = Vec::with_capacity(q);
    for i in 0..q {
        let scores = sim.row(i);
        let ranks: Vec<usize> = (0..g).map(|j| rank_of(scores, j)).collect();
        let rel = |j: usize| gallery_ids[j] == query_ids[i];
        let total = (0..g).filter(|&j| rel(j)).count();
        if total == 0 {
            return Err(Error::Contract(format!("query {i} has no relevant gallery item")));
        }
        // walk positions r = 1..=G in order; count relevant items ranked <= r
        let mut sum = 0.0;
        let mut hardest = 0;
        for r in 1..=g {
            let at_r = (0..g).find(|&j| ranks[j] == r).expect("ranks are a permutation");
            if rel(at_r) {
                let hits = (0..g).filter(|&j| rel(j) && ranks[j] <= r).count();
                sum += hits as f64 / r as f64;
                hardest = r;
            }
        }
        aps.push(sum / total as f64);
        inps.push(total as f64 / hardest as f64);
        best.push((0..g).filter(|&j| rel(j)).map(|j| ranks[j]).min().expect("nonempty"));
    }
    let n = q as f64;
    Ok(OracleMetrics {
        rank_k: ks
            .iter()
            .map(|&k| (k, best.iter().filter(|&&b| b <= k).count() as f64 / n))
            .collect(),
        map: aps.iter().sum::<f64>() / n,
        minp: inps.iter().sum::<f64>() / n,
    })
}

/// Checks a report against the oracle; exact equality on every number.
pub fn check_report(report: &super::RetrievalReport, sim: &Tensor, query_ids: &[usize], gallery_ids: &[usize]) -> Result<()> {
    let ks: Vec<usize> = report.cmc.iter().map(|r| r.k).collect();
    let o = evaluate_oracle(sim, query_ids, gallery_ids, &ks)?;
    let mut mismatches = Vec::new();
    for (rk, (k, v)) in report.cmc.iter().zip(&o.rank_k) {
        if rk.value != *v {
            mismatches.push(format!("rank{k}: {} vs oracle {v}", rk.value));
        }
    }
    if report.map != o.map {
        mismatches.push(format!("mAP: {} vs oracle {}", report.map, o.map));
    }
    if report.minp != o.minp {
        mismatches.push(format!("mINP: {} vs oracle {}", report.minp, o.minp));
    }
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("metric oracle mismatch: {}", mismatches.join("; "))))
    }
}
