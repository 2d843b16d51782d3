// Slice-level numeric kernels shared by the tape's forward and backward passes.

/// C[m×n] = A[m×k] · B[k×n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// C += A[m×k] · B[k×n]
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// C += A[m×k] · Bᵀ where B is [n×k]
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// C += Aᵀ · B where A is [m×k] and B is [m×n]; C is [k×n]
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along a strided axis.
pub fn softmax_axis(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    out
}

pub fn log_softmax_axis(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..len).map(|j| (x[at(j)] - max).exp()).sum::<f64>().ln();
            for j in 0..len {
                out[at(j)] = x[at(j)] - lse;
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Multi-head scaled dot-product attention probabilities.
///
/// `q` is `[batch*lq, dim]`, `k` is `[batch*lk, dim]`; returns probabilities laid
/// out `[batch, heads, lq, lk]`. With `causal`, query `i` only sees keys `j <= i`.
#[allow(clippy::too_many_arguments)]
pub fn attention_probs(
    q: &[f64],
    k: &[f64],
    batch: usize,
    lq: usize,
    lk: usize,
    dim: usize,
    heads: usize,
    causal: bool,
) -> Vec<f64> {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; batch * heads * lq * lk];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..lq {
                let qrow = &q[(b * lq + i) * dim + h * dh..(b * lq + i) * dim + (h + 1) * dh];
                let base = ((b * heads + h) * lq + i) * lk;
                let row = &mut probs[base..base + lk];
                let visible = if causal { (i + 1).min(lk) } else { lk };
                let mut max = f64::NEG_INFINITY;
                for j in 0..visible {
                    let krow = &k[(b * lk + j) * dim + h * dh..(b * lk + j) * dim + (h + 1) * dh];
                    let s = dot(qrow, krow) * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for v in row.iter_mut().take(visible) {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut().take(visible) {
                    *v /= sum;
                }
            }
        }
    }
    probs
}
