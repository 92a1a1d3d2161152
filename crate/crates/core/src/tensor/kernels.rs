//! Row-major matrix kernels. Each accumulates into `c`.

/// `c[p×r] += a[p×q] · b[q×r]`
pub fn gemm(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), q * r);
    debug_assert_eq!(c.len(), p * r);
    if r == 0 {
        return;
    }
    for (a_row, c_row) in a.chunks_exact(q.max(1)).zip(c.chunks_exact_mut(r)) {
        for (&aik, b_row) in a_row.iter().zip(b.chunks_exact(r)) {
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    }
}

/// `c[p×q] += g[p×r] · b[q×r]ᵀ`
pub fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], p: usize, r: usize, q: usize) {
    debug_assert_eq!(g.len(), p * r);
    debug_assert_eq!(b.len(), q * r);
    debug_assert_eq!(c.len(), p * q);
    if r == 0 || q == 0 {
        return;
    }
    for (g_row, c_row) in g.chunks_exact(r).zip(c.chunks_exact_mut(q)) {
        for (ck, b_row) in c_row.iter_mut().zip(b.chunks_exact(r)) {
            *ck += dot(g_row, b_row);
        }
    }
}

/// `c[q×r] += a[p×q]ᵀ · g[p×r]`
pub fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(g.len(), p * r);
    debug_assert_eq!(c.len(), q * r);
    if r == 0 || q == 0 {
        return;
    }
    for (a_row, g_row) in a.chunks_exact(q).zip(g.chunks_exact(r)) {
        for (&aik, c_row) in a_row.iter().zip(c.chunks_exact_mut(r)) {
            for (cj, &gj) in c_row.iter_mut().zip(g_row) {
                *cj += aik * gj;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
        let mut c = vec![0.0; p * r];
        for i in 0..p {
            for j in 0..r {
                for k in 0..q {
                    c[i * r + j] += a[i * q + k] * b[k * r + j];
                }
            }
        }
        c
    }

    fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; m.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = m[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn kernels_agree_with_naive_triple_loop() {
        let (p, q, r) = (3, 4, 5);
        let a: Vec<f64> = (0..p * q).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..q * r).map(|i| (i as f64 * 0.91).cos()).collect();
        let expect = naive(&a, &b, p, q, r);

        let mut c = vec![0.0; p * r];
        gemm(&a, &b, &mut c, p, q, r);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-14);
        }

        // a · b == gemm_nt(a, bᵀ)
        let bt = transpose(&b, q, r);
        let mut c2 = vec![0.0; p * r];
        gemm_nt(&a, &bt, &mut c2, p, q, r);
        for (x, y) in c2.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-14);
        }

        // a · b == gemm_tn(aᵀ, b)
        let at = transpose(&a, p, q);
        let mut c3 = vec![0.0; p * r];
        gemm_tn(&at, &b, &mut c3, q, p, r);
        for (x, y) in c3.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
