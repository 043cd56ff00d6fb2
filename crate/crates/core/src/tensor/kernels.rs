//! Raw dense-matrix kernels shared by the tape's forward and backward passes.
//!
//! All matrices are row-major slices. Kernels accumulate into `out`
//! (`out += ...`), so callers zero the buffer when they want a plain product.

/// out[m x n] += a[m x k] * b[k x n]
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// out[m x n] += a[m x k] * b[n x k]^T
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// out[k x n] += a[m x k]^T * b[m x n]
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for r in 0..m {
        let b_row = &b[r * n..(r + 1) * n];
        for i in 0..k {
            let ari = a[r * k + i];
            if ari == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += ari * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_result() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul_acc(&a, &b, &mut out, 2, 2, 2);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let a = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0]; // 2x3
        let b = [2.0, 1.0, 0.0, -1.0, 1.5, 2.5]; // 3x2
        let mut plain = [0.0; 4];
        matmul_acc(&a, &b, &mut plain, 2, 3, 2);

        // a * (b^T)^T via matmul_nt with b stored transposed (2x3)
        let bt = [2.0, 0.0, 1.5, 1.0, -1.0, 2.5];
        let mut nt = [0.0; 4];
        matmul_nt_acc(&a, &bt, &mut nt, 2, 3, 2);
        assert_eq!(plain, nt);

        // (a^T)^T * b via matmul_tn with a stored transposed (3x2)
        let at = [1.0, 3.0, -2.0, 4.0, 0.5, -1.0];
        let mut tn = [0.0; 4];
        matmul_tn_acc(&at, &b, &mut tn, 3, 2, 2);
        assert_eq!(plain, tn);
    }
}
