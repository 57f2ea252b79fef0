//! Grouped 2-D convolution via im2col + matmul.
//!
//! Weight layout is (M, C/g, k, k): output channel m belongs to group
//! m / (M/g) and only reads the matching slice of input channels. The im2col
//! matrix is built once per sample; each group consumes a contiguous row band.

use super::matmul::{matmul_nt, matmul_tn};
use super::{map_indexed, seq};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvShape {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvShape {
    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Forward multiply-adds for one sample: h_out * w_out * k * k * (c_in/g) * c_out.
    pub fn madds_per_sample(&self) -> u64 {
        let hw = (self.h_out() * self.w_out()) as u64;
        hw * (self.k * self.k) as u64 * (self.c_in / self.groups) as u64 * self.c_out as u64
    }
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Vec<f64>,
    pub db: Option<Vec<f64>>,
}

fn im2col(x: &[f64], sh: &ConvShape) -> Vec<f64> {
    let (h, w, k, s, p) = (sh.h, sh.w, sh.k, sh.stride, sh.pad);
    let (ho, wo) = (sh.h_out(), sh.w_out());
    let cols = ho * wo;
    let mut col = vec![0.0; sh.c_in * k * k * cols];
    for c in 0..sh.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oh in 0..ho {
                    let ih = (oh * s + ky) as isize - p as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * s + kx) as isize - p as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dst[oh * wo + ow] = x[(c * h + ih as usize) * w + iw as usize];
                    }
                }
            }
        }
    }
    col
}

fn col2im_add(dcol: &[f64], sh: &ConvShape, dx: &mut [f64]) {
    let (h, w, k, s, p) = (sh.h, sh.w, sh.k, sh.stride, sh.pad);
    let (ho, wo) = (sh.h_out(), sh.w_out());
    let cols = ho * wo;
    for c in 0..sh.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &dcol[row * cols..(row + 1) * cols];
                for oh in 0..ho {
                    let ih = (oh * s + ky) as isize - p as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * s + kx) as isize - p as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dx[(c * h + ih as usize) * w + iw as usize] += src[oh * wo + ow];
                    }
                }
            }
        }
    }
}

fn forward_one(x_n: &[f64], w: &[f64], bias: Option<&[f64]>, sh: &ConvShape) -> (Vec<f64>, u64) {
    let g = sh.groups;
    let (ho, wo) = (sh.h_out(), sh.w_out());
    let cols = ho * wo;
    let m_g = sh.c_out / g;
    let row_len = (sh.c_in / g) * sh.k * sh.k;
    let col = im2col(x_n, sh);
    let mut out = vec![0.0; sh.c_out * cols];
    let mut count = 0u64;
    for j in 0..g {
        let wj = &w[j * m_g * row_len..(j + 1) * m_g * row_len];
        let colj = &col[j * row_len * cols..(j + 1) * row_len * cols];
        let (oj, c) = seq::matmul(wj, colj, m_g, row_len, cols);
        count += c;
        out[j * m_g * cols..(j + 1) * m_g * cols].copy_from_slice(&oj);
    }
    if let Some(b) = bias {
        for m in 0..sh.c_out {
            let bv = b[m];
            for v in &mut out[m * cols..(m + 1) * cols] {
                *v += bv;
            }
        }
    }
    (out, count)
}

/// Returns (output NCHW, executed multiply count). Samples run in parallel;
/// each output element is produced by exactly one task.
pub fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    sh: &ConvShape,
) -> (Vec<f64>, u64) {
    conv2d_forward_impl(x, w, bias, sh, cfg!(feature = "parallel"))
}

pub(crate) fn conv2d_forward_impl(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    sh: &ConvShape,
    parallel: bool,
) -> (Vec<f64>, u64) {
    let in_stride = sh.c_in * sh.h * sh.w;
    let out_stride = sh.c_out * sh.h_out() * sh.w_out();
    let per_sample: Vec<(Vec<f64>, u64)> = if parallel {
        map_indexed(sh.n, |i| {
            forward_one(&x[i * in_stride..(i + 1) * in_stride], w, bias, sh)
        })
    } else {
        (0..sh.n)
            .map(|i| forward_one(&x[i * in_stride..(i + 1) * in_stride], w, bias, sh))
            .collect()
    };
    let mut out = vec![0.0; sh.n * out_stride];
    let mut count = 0u64;
    for (i, (o, c)) in per_sample.into_iter().enumerate() {
        out[i * out_stride..(i + 1) * out_stride].copy_from_slice(&o);
        count += c;
    }
    (out, count)
}

struct SampleGrads {
    dx: Option<Vec<f64>>,
    dw: Vec<f64>,
    db: Option<Vec<f64>>,
}

fn backward_one(
    x_n: &[f64],
    w: &[f64],
    dy_n: &[f64],
    sh: &ConvShape,
    need_dx: bool,
    need_db: bool,
) -> SampleGrads {
    let g = sh.groups;
    let cols = sh.h_out() * sh.w_out();
    let m_g = sh.c_out / g;
    let row_len = (sh.c_in / g) * sh.k * sh.k;
    let col = im2col(x_n, sh);

    let mut dw = vec![0.0; sh.c_out * row_len];
    let mut dcol = if need_dx {
        vec![0.0; sh.c_in * sh.k * sh.k * cols]
    } else {
        Vec::new()
    };
    for j in 0..g {
        let wj = &w[j * m_g * row_len..(j + 1) * m_g * row_len];
        let dyj = &dy_n[j * m_g * cols..(j + 1) * m_g * cols];
        let colj = &col[j * row_len * cols..(j + 1) * row_len * cols];

        let (dwj, _) = matmul_nt(dyj, colj, m_g, cols, row_len);
        dw[j * m_g * row_len..(j + 1) * m_g * row_len].copy_from_slice(&dwj);

        if need_dx {
            let (dcolj, _) = matmul_tn(wj, dyj, m_g, row_len, cols);
            dcol[j * row_len * cols..(j + 1) * row_len * cols].copy_from_slice(&dcolj);
        }
    }

    let dx = if need_dx {
        let mut dx_n = vec![0.0; sh.c_in * sh.h * sh.w];
        col2im_add(&dcol, sh, &mut dx_n);
        Some(dx_n)
    } else {
        None
    };

    let db = if need_db {
        let mut db = vec![0.0; sh.c_out];
        for (m, acc) in db.iter_mut().enumerate() {
            for q in 0..cols {
                *acc += dy_n[m * cols + q];
            }
        }
        Some(db)
    } else {
        None
    };

    SampleGrads { dx, dw, db }
}

/// Gradients for input, weight, and bias. Weight/bias partials are folded in
/// batch order so the result does not depend on scheduling.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    sh: &ConvShape,
    need_dx: bool,
    need_db: bool,
) -> ConvGrads {
    conv2d_backward_impl(x, w, dy, sh, need_dx, need_db, cfg!(feature = "parallel"))
}

pub(crate) fn conv2d_backward_impl(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    sh: &ConvShape,
    need_dx: bool,
    need_db: bool,
    parallel: bool,
) -> ConvGrads {
    let in_stride = sh.c_in * sh.h * sh.w;
    let out_stride = sh.c_out * sh.h_out() * sh.w_out();
    let per_sample: Vec<SampleGrads> = if parallel {
        map_indexed(sh.n, |i| {
            backward_one(
                &x[i * in_stride..(i + 1) * in_stride],
                w,
                &dy[i * out_stride..(i + 1) * out_stride],
                sh,
                need_dx,
                need_db,
            )
        })
    } else {
        (0..sh.n)
            .map(|i| {
                backward_one(
                    &x[i * in_stride..(i + 1) * in_stride],
                    w,
                    &dy[i * out_stride..(i + 1) * out_stride],
                    sh,
                    need_dx,
                    need_db,
                )
            })
            .collect()
    };

    let row_len = (sh.c_in / sh.groups) * sh.k * sh.k;
    let mut dw = vec![0.0; sh.c_out * row_len];
    let mut db = if need_db {
        Some(vec![0.0; sh.c_out])
    } else {
        None
    };
    let mut dx = if need_dx {
        Some(vec![0.0; sh.n * in_stride])
    } else {
        None
    };
    for (i, sg) in per_sample.into_iter().enumerate() {
        for (acc, v) in dw.iter_mut().zip(&sg.dw) {
            *acc += v;
        }
        if let (Some(db), Some(dbi)) = (db.as_mut(), sg.db.as_ref()) {
            for (acc, v) in db.iter_mut().zip(dbi) {
                *acc += v;
            }
        }
        if let (Some(dx), Some(dxi)) = (dx.as_mut(), sg.dx) {
            dx[i * in_stride..(i + 1) * in_stride].copy_from_slice(&dxi);
        }
    }
    ConvGrads { dx, dw, db }
}
