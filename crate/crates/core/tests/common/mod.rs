//! Independent scalar oracles shared by the integration tests.
#![allow(dead_code)]

/// Compensated (Neumaier) summation.
pub fn csum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot = csum(a.iter().zip(b).map(|(x, y)| x * y));
    let na = csum(a.iter().map(|x| x * x)).sqrt();
    let nb = csum(b.iter().map(|x| x * x)).sqrt();
    dot / (na * nb)
}

/// One direction: mean over rows of sum_j p_ij (log p_ij - log(q_ij + eps)).
pub fn oracle_direction(logits: &[Vec<f64>], q: &[Vec<f64>], eps: f64) -> f64 {
    let n = logits.len() as f64;
    let rows = logits.iter().zip(q).map(|(row, qrow)| {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + csum(row.iter().map(|l| (l - m).exp())).ln();
        csum(row.iter().zip(qrow).map(|(l, qv)| {
            let logp = l - lse;
            logp.exp() * (logp - (qv + eps).ln())
        }))
    });
    csum(rows) / n
}

pub fn oracle_sdm(img: &[Vec<f64>], txt: &[Vec<f64>], labels: &[usize], tau: f64, eps: f64) -> f64 {
    let n = labels.len();
    let q: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let c = labels.iter().filter(|&&l| l == labels[i]).count() as f64;
            (0..n).map(|j| if labels[i] == labels[j] { 1.0 / c } else { 0.0 }).collect()
        })
        .collect();
    let i2t: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| cos(&img[i], &txt[j]) / tau).collect()).collect();
    let t2i: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| i2t[j][i]).collect()).collect();
    oracle_direction(&i2t, &q, eps) + oracle_direction(&t2i, &q, eps)
}
