//! Numeric kernels behind the tape ops.
//!
//! Every kernel writes each output element from exactly one task with a fixed
//! inner summation order, so results are bit-identical whether the `parallel`
//! feature (rayon) is enabled or not. Cross-sample reductions (weight
//! gradients) fold per-sample partials in batch order for the same reason.
//!
//! The matmul kernels report how many fused multiply-adds they executed; the
//! cost analyzer is tied to that executable count by tests.

pub mod conv;
pub mod matmul;

pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvShape};
pub use matmul::{matmul, matmul_nt, matmul_tn};

/// Apply `f` to disjoint fixed-size chunks of `out`, in parallel when enabled.
pub(crate) fn for_each_chunk_mut<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert_eq!(out.len() % chunk.max(1), 0);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Map over `0..n`, collecting results in index order.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential reference entry points, kept unconditionally compiled so the
/// bench suite can compare them against the parallel dispatch above.
pub mod seq {
    use super::conv::{ConvGrads, ConvShape};

    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> (Vec<f64>, u64) {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * n..p * n + n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        (out, (m as u64) * (k as u64) * (n as u64))
    }

    pub fn conv2d_forward(
        x: &[f64],
        w: &[f64],
        bias: Option<&[f64]>,
        sh: &ConvShape,
    ) -> (Vec<f64>, u64) {
        super::conv::conv2d_forward_impl(x, w, bias, sh, false)
    }

    pub fn conv2d_backward(
        x: &[f64],
        w: &[f64],
        dy: &[f64],
        sh: &ConvShape,
        need_dx: bool,
        need_db: bool,
    ) -> ConvGrads {
        super::conv::conv2d_backward_impl(x, w, dy, sh, need_dx, need_db, false)
    }
}
