//! Row-major matrix products. Each returns (output, executed multiply count).

use super::for_each_chunk_mut;

/// C (m x n) = A (m x k) * B (k x n). Parallel over output rows.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> (Vec<f64>, u64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for_each_chunk_mut(&mut out, n.max(1), |i, row| {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..p * n + n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    (out, (m as u64) * (k as u64) * (n as u64))
}

/// C (m x n) = A (m x k) * B^T where B is (n x k).
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> (Vec<f64>, u64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    for_each_chunk_mut(&mut out, n.max(1), |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    });
    (out, (m as u64) * (k as u64) * (n as u64))
}

/// C (k x n) = A^T * B where A is (m x k), B is (m x n).
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> (Vec<f64>, u64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![0.0; k * n];
    for_each_chunk_mut(&mut out, n.max(1), |r, row| {
        for p in 0..m {
            let av = a[p * k + r];
            let brow = &b[p * n..p * n + n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    (out, (m as u64) * (k as u64) * (n as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_product() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let (c, count) = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(count, 8);
    }

    #[test]
    fn transposed_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let (c, _) = matmul(&a, &b, 2, 3, 2);

        // B^T stored as (2 x 3)
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let (c_nt, _) = matmul_nt(&a, &bt, 2, 3, 2);
        assert_eq!(c, c_nt);

        // A^T stored as (3 x 2); (A^T)^T * B == A * B
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let (c_tn, _) = matmul_tn(&at, &b, 3, 2, 2);
        assert_eq!(c, c_tn);
    }
}
