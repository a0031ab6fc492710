//! Slice-level numeric kernels shared by the tape ops.

/// Floor applied to the product of norms in cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

/// `out[m, n] = x[m, k] · w[k, n]`; `out` is overwritten.
pub(crate) fn matmul(x: &[f64], w: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (kk, &a) in x[i * k..(i + 1) * k].iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let w_row = &w[kk * n..(kk + 1) * n];
            for (o, &b) in row.iter_mut().zip(w_row) {
                *o += a * b;
            }
        }
    }
}

/// `out[m, k] += g[m, n] · w[k, n]ᵀ`.
pub(crate) fn matmul_bt_acc(g: &[f64], w: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let w_row = &w[kk * n..(kk + 1) * n];
            out[i * k + kk] += dot(g_row, w_row);
        }
    }
}

/// `out[k, n] += x[m, k]ᵀ · g[m, n]`.
pub(crate) fn matmul_at_acc(x: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for (kk, &a) in x[i * k..(i + 1) * k].iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let o_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &b) in o_row.iter_mut().zip(g_row) {
                *o += a * b;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity with the norm product floored at [`COSINE_EPS`].
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    let denom = (dot(a, a).sqrt() * dot(b, b).sqrt()).max(COSINE_EPS);
    dot(a, b) / denom
}

/// Numerically stable softmax of one vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], w: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    out[i * n + j] += x[i * k + kk] * w[kk * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let x: Vec<f64> = (0..12).map(|v| v as f64 * 0.3 - 1.0).collect();
        let w: Vec<f64> = (0..20).map(|v| (v as f64).sin()).collect();
        let mut out = vec![0.0; 15];
        matmul(&x, &w, 3, 4, 5, &mut out);
        for (a, b) in out.iter().zip(naive(&x, &w, 3, 4, 5)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[3.0, 4.0], &[3.0, 4.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, 1000.0, 999.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
    }
}
