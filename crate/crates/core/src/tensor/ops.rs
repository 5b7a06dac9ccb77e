//! Forward and backward math kernels.
//!
//! Kernels work on raw `f32` slices with explicit dimension structs so the
//! pure entry points and the gradient tape share one implementation.
//! Convolutions run as cross-correlation (no kernel flip) over zero-padded
//! input via per-sample im2col and a small accumulating matmul.

use super::{Tensor, TensorError};

// ── low-level helpers ───────────────────────────────────────────────

const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 16;

/// Lhs element accessor: row-major or transposed storage.
#[derive(Clone, Copy)]
enum LhsLayout {
    RowMajor,
    Transposed,
}

impl LhsLayout {
    #[inline(always)]
    fn get(self, lhs: &[f32], i: usize, p: usize, m: usize, k: usize) -> f32 {
        match self {
            LhsLayout::RowMajor => lhs[i * k + p],
            LhsLayout::Transposed => lhs[p * m + i],
        }
    }
}

/// Register-tiled dst[m×n] += lhs @ rhs[k×n]: 4x16 accumulator blocks live
/// in registers across the whole k loop.
#[inline(always)]
fn matmul_impl(
    dst: &mut [f32],
    lhs: &[f32],
    rhs: &[f32],
    m: usize,
    k: usize,
    n: usize,
    layout: LhsLayout,
) {
    let mut i = 0;
    while i < m {
        let mr = (m - i).min(TILE_ROWS);
        let mut j = 0;
        while j < n {
            let nr = (n - j).min(TILE_COLS);
            if mr == TILE_ROWS && nr == TILE_COLS {
                let mut acc = [[0.0f32; TILE_COLS]; TILE_ROWS];
                for p in 0..k {
                    let row = &rhs[p * n + j..p * n + j + TILE_COLS];
                    for (ii, acc_row) in acc.iter_mut().enumerate() {
                        let a = layout.get(lhs, i + ii, p, m, k);
                        for (slot, &r) in acc_row.iter_mut().zip(row) {
                            *slot += a * r;
                        }
                    }
                }
                for (ii, acc_row) in acc.iter().enumerate() {
                    let out = &mut dst[(i + ii) * n + j..(i + ii) * n + j + TILE_COLS];
                    for (o, &v) in out.iter_mut().zip(acc_row) {
                        *o += v;
                    }
                }
            } else {
                for ii in i..i + mr {
                    let out = &mut dst[ii * n + j..ii * n + j + nr];
                    for p in 0..k {
                        let a = layout.get(lhs, ii, p, m, k);
                        let row = &rhs[p * n + j..p * n + j + nr];
                        for (o, r) in out.iter_mut().zip(row) {
                            *o += a * r;
                        }
                    }
                }
            }
            j += nr;
        }
        i += mr;
    }
}

// The same tiled body compiled with FMA/AVX2 enabled; dispatched at runtime
// so the binary stays portable while modern x86-64 gets wide vectors.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn matmul_impl_avx2(
    dst: &mut [f32],
    lhs: &[f32],
    rhs: &[f32],
    m: usize,
    k: usize,
    n: usize,
    layout: LhsLayout,
) {
    matmul_impl(dst, lhs, rhs, m, k, n, layout);
}

#[inline]
fn have_avx2_fma() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

fn matmul_dispatch(
    dst: &mut [f32],
    lhs: &[f32],
    rhs: &[f32],
    m: usize,
    k: usize,
    n: usize,
    layout: LhsLayout,
) {
    #[cfg(target_arch = "x86_64")]
    if have_avx2_fma() {
        // feature presence was just checked
        return unsafe { matmul_impl_avx2(dst, lhs, rhs, m, k, n, layout) };
    }
    matmul_impl(dst, lhs, rhs, m, k, n, layout);
}

/// dst[m×n] += lhs[m×k] @ rhs[k×n], all row-major.
pub(crate) fn matmul_acc(dst: &mut [f32], lhs: &[f32], rhs: &[f32], m: usize, k: usize, n: usize) {
    matmul_dispatch(dst, lhs, rhs, m, k, n, LhsLayout::RowMajor);
}

/// dst[m×n] += lhs' @ rhs[k×n] with the left operand stored transposed
/// (`lhs_t[p*m + i]` holds element (i, p)).
pub(crate) fn matmul_acc_tn(dst: &mut [f32], lhs_t: &[f32], rhs: &[f32], m: usize, k: usize, n: usize) {
    matmul_dispatch(dst, lhs_t, rhs, m, k, n, LhsLayout::Transposed);
}

/// Eight-lane dot product. The fixed lane split keeps results deterministic
/// while letting the lanes vectorize; a strictly sequential fold would not.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let mut ac = a.chunks_exact(8);
    let mut bc = b.chunks_exact(8);
    for (xa, xb) in (&mut ac).zip(&mut bc) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ac.remainder().iter().zip(bc.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn sigmoid64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logistic function, numerically stable on both tails.
pub fn sigmoid(z: f64) -> f64 {
    sigmoid64(z)
}

// ── conv2d ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dSpec {
    pub n: usize,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub k_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
    /// Input had rank 3 (no batch axis); outputs keep that rank.
    pub batched: bool,
}

fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel > padded || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl Conv2dSpec {
    pub(crate) fn from_shapes(
        x: &[usize],
        w: &[usize],
        bias_len: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        let (batched, n, c_in, h_in, w_in) = match x {
            [c, h, w] => (false, 1, *c, *h, *w),
            [n, c, h, w] => (true, *n, *c, *h, *w),
            _ => {
                return Err(TensorError::InvalidShape(format!(
                    "conv2d input must be CxHxW or NxCxHxW, got {x:?}"
                )))
            }
        };
        let [k_out, kc, kh, kw] = match w {
            [a, b, c, d] => [*a, *b, *c, *d],
            _ => {
                return Err(TensorError::InvalidShape(format!(
                    "conv2d kernels must be KxCxKhxKw, got {w:?}"
                )))
            }
        };
        if kc != c_in {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d input has {c_in} channels but kernels expect {kc}"
            )));
        }
        if bias_len != k_out {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d bias has {bias_len} entries for {k_out} output channels"
            )));
        }
        if stride == 0 {
            return Err(TensorError::InvalidShape("conv2d stride must be >= 1".into()));
        }
        let h_out = out_extent(h_in, kh, stride, padding).ok_or_else(|| {
            TensorError::InvalidShape(format!(
                "kernel {kh}x{kw} exceeds padded input {}x{}",
                h_in + 2 * padding,
                w_in + 2 * padding
            ))
        })?;
        let w_out = out_extent(w_in, kw, stride, padding).ok_or_else(|| {
            TensorError::InvalidShape(format!(
                "kernel {kh}x{kw} exceeds padded input {}x{}",
                h_in + 2 * padding,
                w_in + 2 * padding
            ))
        })?;
        Ok(Conv2dSpec { n, c_in, h_in, w_in, k_out, kh, kw, stride, padding, h_out, w_out, batched })
    }

    pub(crate) fn out_shape(&self) -> Vec<usize> {
        if self.batched {
            vec![self.n, self.k_out, self.h_out, self.w_out]
        } else {
            vec![self.k_out, self.h_out, self.w_out]
        }
    }

    fn sample_len(&self) -> usize {
        self.c_in * self.h_in * self.w_in
    }

    fn cols_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

/// Unfold sample `n` into `cols` with `c_in*kh*kw` rows of `h_out*w_out`
/// patch values; out-of-bounds taps are zero.
fn im2col(x: &[f32], s: &Conv2dSpec, n: usize, cols: &mut [f32]) {
    let hw_out = s.h_out * s.w_out;
    let plane_len = s.h_in * s.w_in;
    let x_n = &x[n * s.sample_len()..(n + 1) * s.sample_len()];
    let pad = s.padding as isize;
    let mut row = 0;
    for c in 0..s.c_in {
        let plane = &x_n[c * plane_len..(c + 1) * plane_len];
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oh in 0..s.h_out {
                    let ih = (oh * s.stride + ki) as isize - pad;
                    let dst_row = &mut dst[oh * s.w_out..(oh + 1) * s.w_out];
                    if ih < 0 || ih >= s.h_in as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[ih as usize * s.w_in..(ih as usize + 1) * s.w_in];
                    if s.stride == 1 {
                        // contiguous interior span, padded flanks zeroed
                        let lo = pad.saturating_sub(kj as isize).max(0) as usize;
                        let hi_signed = s.w_in as isize + pad - kj as isize;
                        let hi = hi_signed.clamp(0, s.w_out as isize) as usize;
                        dst_row[..lo.min(s.w_out)].fill(0.0);
                        if hi > lo {
                            let src_start = (lo as isize + kj as isize - pad) as usize;
                            dst_row[lo..hi].copy_from_slice(&src_row[src_start..src_start + (hi - lo)]);
                        }
                        dst_row[hi.max(lo)..].fill(0.0);
                    } else {
                        for (ow, d) in dst_row.iter_mut().enumerate() {
                            let iw = (ow * s.stride + kj) as isize - pad;
                            *d = if iw < 0 || iw >= s.w_in as isize {
                                0.0
                            } else {
                                src_row[iw as usize]
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the column gradient of sample `n` back onto `dx`.
fn col2im_acc(dcols: &[f32], s: &Conv2dSpec, n: usize, dx: &mut [f32]) {
    let hw_out = s.h_out * s.w_out;
    let plane_len = s.h_in * s.w_in;
    let dx_n = &mut dx[n * s.sample_len()..(n + 1) * s.sample_len()];
    let pad = s.padding as isize;
    let mut row = 0;
    for c in 0..s.c_in {
        let plane = &mut dx_n[c * plane_len..(c + 1) * plane_len];
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let src = &dcols[row * hw_out..(row + 1) * hw_out];
                for oh in 0..s.h_out {
                    let ih = (oh * s.stride + ki) as isize - pad;
                    if ih < 0 || ih >= s.h_in as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ih as usize * s.w_in..(ih as usize + 1) * s.w_in];
                    let src_row = &src[oh * s.w_out..(oh + 1) * s.w_out];
                    if s.stride == 1 {
                        // contiguous interior span, mirroring im2col
                        let lo = pad.saturating_sub(kj as isize).max(0) as usize;
                        let hi_signed = s.w_in as isize + pad - kj as isize;
                        let hi = hi_signed.clamp(0, s.w_out as isize) as usize;
                        if hi > lo {
                            let dst_start = (lo as isize + kj as isize - pad) as usize;
                            axpy(1.0, &src_row[lo..hi], &mut dst_row[dst_start..dst_start + (hi - lo)]);
                        }
                    } else {
                        for (ow, &g) in src_row.iter().enumerate() {
                            let iw = (ow * s.stride + kj) as isize - pad;
                            if iw >= 0 && iw < s.w_in as isize {
                                dst_row[iw as usize] += g;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

impl Conv2dSpec {
    /// A 1x1 stride-1 unpadded conv reads the input as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

pub(crate) fn conv2d_forward(x: &[f32], w: &[f32], b: &[f32], s: &Conv2dSpec) -> Vec<f32> {
    let hw_out = s.h_out * s.w_out;
    let rows = s.cols_rows();
    let mut out = vec![0.0f32; s.n * s.k_out * hw_out];
    let mut cols_buf = if s.is_pointwise() { Vec::new() } else { vec![0.0f32; rows * hw_out] };
    for n in 0..s.n {
        let cols: &[f32] = if s.is_pointwise() {
            &x[n * s.sample_len()..(n + 1) * s.sample_len()]
        } else {
            im2col(x, s, n, &mut cols_buf);
            &cols_buf
        };
        let out_n = &mut out[n * s.k_out * hw_out..(n + 1) * s.k_out * hw_out];
        matmul_acc(out_n, w, cols, s.k_out, rows, hw_out);
        for k in 0..s.k_out {
            let bias = b[k];
            for v in &mut out_n[k * hw_out..(k + 1) * hw_out] {
                *v += bias;
            }
        }
    }
    out
}

/// Kernel-gradient pass: dw[k][r] += dout_k . cols_r. The r-outer order
/// streams the column matrix once while the dout rows stay cache-resident.
#[inline(always)]
fn dw_pass_impl(dw: &mut [f32], dout_n: &[f32], cols: &[f32], k_out: usize, rows: usize, hw: usize) {
    for r in 0..rows {
        let col_row = &cols[r * hw..(r + 1) * hw];
        for k in 0..k_out {
            dw[k * rows + r] += dot(&dout_n[k * hw..(k + 1) * hw], col_row);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn dw_pass_avx2(dw: &mut [f32], dout_n: &[f32], cols: &[f32], k_out: usize, rows: usize, hw: usize) {
    dw_pass_impl(dw, dout_n, cols, k_out, rows, hw);
}

fn dw_pass(dw: &mut [f32], dout_n: &[f32], cols: &[f32], k_out: usize, rows: usize, hw: usize) {
    #[cfg(target_arch = "x86_64")]
    if have_avx2_fma() {
        return unsafe { dw_pass_avx2(dw, dout_n, cols, k_out, rows, hw) };
    }
    dw_pass_impl(dw, dout_n, cols, k_out, rows, hw);
}

pub(crate) fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    dout: &[f32],
    s: &Conv2dSpec,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let hw_out = s.h_out * s.w_out;
    let rows = s.cols_rows();
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; w.len()];
    let mut db = vec![0.0f32; s.k_out];
    let pointwise = s.is_pointwise();
    let mut cols_buf = if pointwise { Vec::new() } else { vec![0.0f32; rows * hw_out] };
    let mut dcols = if pointwise { Vec::new() } else { vec![0.0f32; rows * hw_out] };
    for n in 0..s.n {
        let cols: &[f32] = if pointwise {
            &x[n * s.sample_len()..(n + 1) * s.sample_len()]
        } else {
            im2col(x, s, n, &mut cols_buf);
            &cols_buf
        };
        let dout_n = &dout[n * s.k_out * hw_out..(n + 1) * s.k_out * hw_out];
        for k in 0..s.k_out {
            db[k] += dout_n[k * hw_out..(k + 1) * hw_out].iter().sum::<f32>();
        }
        dw_pass(&mut dw, dout_n, cols, s.k_out, rows, hw_out);
        // dcols = W' @ dout: the kernel matrix is stored k_out x rows, which
        // is exactly the transposed layout matmul_acc_tn consumes
        let dcols_n: &mut [f32] = if pointwise {
            &mut dx[n * s.sample_len()..(n + 1) * s.sample_len()]
        } else {
            dcols.fill(0.0);
            &mut dcols
        };
        matmul_acc_tn(dcols_n, w, dout_n, rows, s.k_out, hw_out);
        if !pointwise {
            col2im_acc(&dcols, s, n, &mut dx);
        }
    }
    (dx, dw, db)
}

// ── depthwise conv2d ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub(crate) struct DepthwiseSpec {
    pub n: usize,
    pub c: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub batched: bool,
}

impl DepthwiseSpec {
    pub(crate) fn from_shapes(
        x: &[usize],
        w: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        let (batched, n, c, h_in, w_in) = match x {
            [c, h, w] => (false, 1, *c, *h, *w),
            [n, c, h, w] => (true, *n, *c, *h, *w),
            _ => {
                return Err(TensorError::InvalidShape(format!(
                    "depthwise input must be CxHxW or NxCxHxW, got {x:?}"
                )))
            }
        };
        let [kc, kh, kw] = match w {
            [a, b, c] => [*a, *b, *c],
            _ => {
                return Err(TensorError::InvalidShape(format!(
                    "depthwise kernels must be CxKhxKw, got {w:?}"
                )))
            }
        };
        if kc != c {
            return Err(TensorError::ShapeMismatch(format!(
                "depthwise input has {c} channels but kernels have {kc}"
            )));
        }
        if stride == 0 {
            return Err(TensorError::InvalidShape("depthwise stride must be >= 1".into()));
        }
        let h_out = out_extent(h_in, kh, stride, padding).ok_or_else(|| {
            TensorError::InvalidShape(format!("depthwise kernel {kh}x{kw} too large for input"))
        })?;
        let w_out = out_extent(w_in, kw, stride, padding).ok_or_else(|| {
            TensorError::InvalidShape(format!("depthwise kernel {kh}x{kw} too large for input"))
        })?;
        Ok(DepthwiseSpec { n, c, h_in, w_in, kh, kw, stride, padding, h_out, w_out, batched })
    }

    pub(crate) fn out_shape(&self) -> Vec<usize> {
        if self.batched {
            vec![self.n, self.c, self.h_out, self.w_out]
        } else {
            vec![self.c, self.h_out, self.w_out]
        }
    }
}

pub(crate) fn depthwise_forward(x: &[f32], w: &[f32], s: &DepthwiseSpec) -> Vec<f32> {
    let plane_in = s.h_in * s.w_in;
    let plane_out = s.h_out * s.w_out;
    let mut out = vec![0.0f32; s.n * s.c * plane_out];
    let pad = s.padding as isize;
    for n in 0..s.n {
        for c in 0..s.c {
            let src = &x[(n * s.c + c) * plane_in..(n * s.c + c + 1) * plane_in];
            let ker = &w[c * s.kh * s.kw..(c + 1) * s.kh * s.kw];
            let dst = &mut out[(n * s.c + c) * plane_out..(n * s.c + c + 1) * plane_out];
            for oh in 0..s.h_out {
                for ow in 0..s.w_out {
                    let mut acc = 0.0f32;
                    for ki in 0..s.kh {
                        let ih = (oh * s.stride + ki) as isize - pad;
                        if ih < 0 || ih >= s.h_in as isize {
                            continue;
                        }
                        for kj in 0..s.kw {
                            let iw = (ow * s.stride + kj) as isize - pad;
                            if iw < 0 || iw >= s.w_in as isize {
                                continue;
                            }
                            acc += src[ih as usize * s.w_in + iw as usize] * ker[ki * s.kw + kj];
                        }
                    }
                    dst[oh * s.w_out + ow] = acc;
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward(
    x: &[f32],
    w: &[f32],
    dout: &[f32],
    s: &DepthwiseSpec,
) -> (Vec<f32>, Vec<f32>) {
    let plane_in = s.h_in * s.w_in;
    let plane_out = s.h_out * s.w_out;
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; w.len()];
    let pad = s.padding as isize;
    for n in 0..s.n {
        for c in 0..s.c {
            let src = &x[(n * s.c + c) * plane_in..(n * s.c + c + 1) * plane_in];
            let ker = &w[c * s.kh * s.kw..(c + 1) * s.kh * s.kw];
            let dker = &mut dw[c * s.kh * s.kw..(c + 1) * s.kh * s.kw];
            let dsrc = &mut dx[(n * s.c + c) * plane_in..(n * s.c + c + 1) * plane_in];
            let g = &dout[(n * s.c + c) * plane_out..(n * s.c + c + 1) * plane_out];
            for oh in 0..s.h_out {
                for ow in 0..s.w_out {
                    let gv = g[oh * s.w_out + ow];
                    if gv == 0.0 {
                        continue;
                    }
                    for ki in 0..s.kh {
                        let ih = (oh * s.stride + ki) as isize - pad;
                        if ih < 0 || ih >= s.h_in as isize {
                            continue;
                        }
                        for kj in 0..s.kw {
                            let iw = (ow * s.stride + kj) as isize - pad;
                            if iw < 0 || iw >= s.w_in as isize {
                                continue;
                            }
                            let xi = ih as usize * s.w_in + iw as usize;
                            dker[ki * s.kw + kj] += gv * src[xi];
                            dsrc[xi] += gv * ker[ki * s.kw + kj];
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

// ── batch normalization ─────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub(crate) struct Bn2dSpec {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Bn2dSpec {
    pub(crate) fn from_shapes(x: &[usize], channels: usize) -> Result<Self, TensorError> {
        let (n, c, h, w) = match x {
            [c, h, w] => (1, *c, *h, *w),
            [n, c, h, w] => (*n, *c, *h, *w),
            _ => {
                return Err(TensorError::InvalidShape(format!(
                    "batchnorm input must be CxHxW or NxCxHxW, got {x:?}"
                )))
            }
        };
        if c != channels {
            return Err(TensorError::ShapeMismatch(format!(
                "batchnorm input has {c} channels, parameters have {channels}"
            )));
        }
        Ok(Bn2dSpec { n, c, h, w })
    }

    fn reduce_len(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// Per-channel moments over the N*H*W reduction axis; f64 accumulation.
pub(crate) fn channel_moments(x: &[f32], s: &Bn2dSpec) -> (Vec<f32>, Vec<f32>) {
    let plane = s.h * s.w;
    let m = s.reduce_len() as f64;
    let mut means = vec![0.0f32; s.c];
    let mut vars = vec![0.0f32; s.c];
    for c in 0..s.c {
        let mut sum = 0.0f64;
        for n in 0..s.n {
            let sl = &x[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
            sum += sl.iter().map(|&v| v as f64).sum::<f64>();
        }
        let mean = sum / m;
        let mut sq = 0.0f64;
        for n in 0..s.n {
            let sl = &x[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
            sq += sl.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>();
        }
        means[c] = mean as f32;
        vars[c] = (sq / m) as f32;
    }
    (means, vars)
}

pub(crate) fn batchnorm_forward(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
    s: &Bn2dSpec,
) -> (Vec<f32>, Vec<f32>) {
    let plane = s.h * s.w;
    let mut inv_std = vec![0.0f32; s.c];
    for c in 0..s.c {
        inv_std[c] = 1.0 / (var[c] + eps).sqrt();
    }
    let mut out = vec![0.0f32; x.len()];
    for n in 0..s.n {
        for c in 0..s.c {
            let scale = gamma[c] * inv_std[c];
            let shift = beta[c] - mean[c] * scale;
            let src = &x[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
            let dst = &mut out[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v * scale + shift;
            }
        }
    }
    (out, inv_std)
}

/// Backward through batch normalization.
///
/// `through_stats` distinguishes train mode (mean/var are functions of the
/// input) from inference (they are constants).
pub(crate) fn batchnorm_backward(
    x: &[f32],
    gamma: &[f32],
    mean: &[f32],
    inv_std: &[f32],
    dout: &[f32],
    s: &Bn2dSpec,
    through_stats: bool,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let plane = s.h * s.w;
    let m = s.reduce_len() as f32;
    let mut dx = vec![0.0f32; x.len()];
    let mut dgamma = vec![0.0f32; s.c];
    let mut dbeta = vec![0.0f32; s.c];
    for c in 0..s.c {
        let mut sum_dy = [0.0f32; 4];
        let mut sum_dy_xhat = [0.0f32; 4];
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            let xs = &x[base..base + plane];
            let dys = &dout[base..base + plane];
            for (i, (&xv, &dy)) in xs.iter().zip(dys).enumerate() {
                let xhat = (xv - mean[c]) * inv_std[c];
                sum_dy[i & 3] += dy;
                sum_dy_xhat[i & 3] += dy * xhat;
            }
        }
        let sum_dy = (sum_dy[0] + sum_dy[1]) + (sum_dy[2] + sum_dy[3]);
        let sum_dy_xhat = (sum_dy_xhat[0] + sum_dy_xhat[1]) + (sum_dy_xhat[2] + sum_dy_xhat[3]);
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let scale = gamma[c] * inv_std[c];
        let dy_mean = sum_dy / m;
        let dyx_mean = sum_dy_xhat / m;
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            let xs = &x[base..base + plane];
            let dys = &dout[base..base + plane];
            let dxs = &mut dx[base..base + plane];
            if through_stats {
                for ((slot, &xv), &dy) in dxs.iter_mut().zip(xs).zip(dys) {
                    let xhat = (xv - mean[c]) * inv_std[c];
                    *slot = scale * (dy - dy_mean - xhat * dyx_mean);
                }
            } else {
                for (slot, &dy) in dxs.iter_mut().zip(dys) {
                    *slot = scale * dy;
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ── pooling ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub(crate) struct Pool2dSpec {
    pub n: usize,
    pub c: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub window: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub batched: bool,
}

impl Pool2dSpec {
    pub(crate) fn from_shapes(x: &[usize], window: usize, stride: usize) -> Result<Self, TensorError> {
        let (batched, n, c, h_in, w_in) = match x {
            [c, h, w] => (false, 1, *c, *h, *w),
            [n, c, h, w] => (true, *n, *c, *h, *w),
            _ => {
                return Err(TensorError::InvalidShape(format!(
                    "pool input must be CxHxW or NxCxHxW, got {x:?}"
                )))
            }
        };
        if window == 0 || stride == 0 {
            return Err(TensorError::InvalidShape("pool window and stride must be >= 1".into()));
        }
        if window > h_in || window > w_in {
            return Err(TensorError::InvalidShape(format!(
                "pool window {window} exceeds input {h_in}x{w_in}"
            )));
        }
        let h_out = (h_in - window) / stride + 1;
        let w_out = (w_in - window) / stride + 1;
        Ok(Pool2dSpec { n, c, h_in, w_in, window, stride, h_out, w_out, batched })
    }

    pub(crate) fn out_shape(&self) -> Vec<usize> {
        if self.batched {
            vec![self.n, self.c, self.h_out, self.w_out]
        } else {
            vec![self.c, self.h_out, self.w_out]
        }
    }
}

pub(crate) fn avg_pool_forward(x: &[f32], s: &Pool2dSpec) -> Vec<f32> {
    let plane_in = s.h_in * s.w_in;
    let plane_out = s.h_out * s.w_out;
    let norm = 1.0 / (s.window * s.window) as f32;
    let mut out = vec![0.0f32; s.n * s.c * plane_out];
    for p in 0..s.n * s.c {
        let src = &x[p * plane_in..(p + 1) * plane_in];
        let dst = &mut out[p * plane_out..(p + 1) * plane_out];
        for oh in 0..s.h_out {
            for ow in 0..s.w_out {
                let mut acc = 0.0f32;
                for ki in 0..s.window {
                    let row = (oh * s.stride + ki) * s.w_in + ow * s.stride;
                    acc += src[row..row + s.window].iter().sum::<f32>();
                }
                dst[oh * s.w_out + ow] = acc * norm;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(dout: &[f32], s: &Pool2dSpec) -> Vec<f32> {
    let plane_in = s.h_in * s.w_in;
    let plane_out = s.h_out * s.w_out;
    let norm = 1.0 / (s.window * s.window) as f32;
    let mut dx = vec![0.0f32; s.n * s.c * plane_in];
    for p in 0..s.n * s.c {
        let g = &dout[p * plane_out..(p + 1) * plane_out];
        let dst = &mut dx[p * plane_in..(p + 1) * plane_in];
        for oh in 0..s.h_out {
            for ow in 0..s.w_out {
                let gv = g[oh * s.w_out + ow] * norm;
                for ki in 0..s.window {
                    let row = (oh * s.stride + ki) * s.w_in + ow * s.stride;
                    for v in &mut dst[row..row + s.window] {
                        *v += gv;
                    }
                }
            }
        }
    }
    dx
}

/// Returns the pooled values and the flat input index of each maximum.
pub(crate) fn max_pool_forward(x: &[f32], s: &Pool2dSpec) -> (Vec<f32>, Vec<usize>) {
    let plane_in = s.h_in * s.w_in;
    let plane_out = s.h_out * s.w_out;
    let mut out = vec![0.0f32; s.n * s.c * plane_out];
    let mut arg = vec![0usize; s.n * s.c * plane_out];
    for p in 0..s.n * s.c {
        let src = &x[p * plane_in..(p + 1) * plane_in];
        for oh in 0..s.h_out {
            for ow in 0..s.w_out {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ki in 0..s.window {
                    let row = (oh * s.stride + ki) * s.w_in + ow * s.stride;
                    for kj in 0..s.window {
                        let idx = row + kj;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[p * plane_out + oh * s.w_out + ow] = best;
                arg[p * plane_out + oh * s.w_out + ow] = p * plane_in + best_idx;
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool_backward(dout: &[f32], arg: &[usize], input_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; input_len];
    for (g, &idx) in dout.iter().zip(arg) {
        dx[idx] += g;
    }
    dx
}

// ── global average pool ─────────────────────────────────────────────

pub(crate) fn gap_spec(x: &[usize]) -> Result<(usize, usize, usize, usize, bool), TensorError> {
    match x {
        [k, h, w] => Ok((1, *k, *h, *w, false)),
        [n, k, h, w] => Ok((*n, *k, *h, *w, true)),
        _ => Err(TensorError::InvalidShape(format!(
            "global_avg_pool input must be KxHxW or NxKxHxW, got {x:?}"
        ))),
    }
}

pub(crate) fn gap_forward(x: &[f32], n: usize, k: usize, h: usize, w: usize) -> Vec<f32> {
    let plane = h * w;
    let norm = 1.0 / plane as f32;
    let mut out = vec![0.0f32; n * k];
    for p in 0..n * k {
        out[p] = x[p * plane..(p + 1) * plane].iter().sum::<f32>() * norm;
    }
    out
}

pub(crate) fn gap_backward(dout: &[f32], n: usize, k: usize, h: usize, w: usize) -> Vec<f32> {
    let plane = h * w;
    let norm = 1.0 / plane as f32;
    let mut dx = vec![0.0f32; n * k * plane];
    for p in 0..n * k {
        let g = dout[p] * norm;
        dx[p * plane..(p + 1) * plane].fill(g);
    }
    dx
}

// ── fully connected ─────────────────────────────────────────────────

pub(crate) fn fc_spec(
    x: &[usize],
    w: &[usize],
    bias_len: usize,
) -> Result<(usize, usize, usize, bool), TensorError> {
    let (batched, n, d) = match x {
        [d] => (false, 1, *d),
        [n, d] => (true, *n, *d),
        _ => {
            return Err(TensorError::InvalidShape(format!(
                "fully_connected input must be D or NxD, got {x:?}"
            )))
        }
    };
    let [o, wd] = match w {
        [o, d] => [*o, *d],
        _ => {
            return Err(TensorError::InvalidShape(format!(
                "fully_connected weights must be OxD, got {w:?}"
            )))
        }
    };
    if wd != d {
        return Err(TensorError::ShapeMismatch(format!(
            "fully_connected input dim {d} does not match weight dim {wd}"
        )));
    }
    if bias_len != o {
        return Err(TensorError::ShapeMismatch(format!(
            "fully_connected bias has {bias_len} entries for {o} outputs"
        )));
    }
    Ok((n, d, o, batched))
}

pub(crate) fn fc_forward(x: &[f32], w: &[f32], b: &[f32], n: usize, d: usize, o: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * o];
    for i in 0..n {
        let xr = &x[i * d..(i + 1) * d];
        let dst = &mut out[i * o..(i + 1) * o];
        for (j, dv) in dst.iter_mut().enumerate() {
            *dv = dot(xr, &w[j * d..(j + 1) * d]) + b[j];
        }
    }
    out
}

pub(crate) fn fc_backward(
    x: &[f32],
    w: &[f32],
    dout: &[f32],
    n: usize,
    d: usize,
    o: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0f32; n * d];
    let mut dw = vec![0.0f32; o * d];
    let mut db = vec![0.0f32; o];
    for i in 0..n {
        let xr = &x[i * d..(i + 1) * d];
        let g = &dout[i * o..(i + 1) * o];
        let dxr = &mut dx[i * d..(i + 1) * d];
        for j in 0..o {
            let gv = g[j];
            db[j] += gv;
            axpy(gv, &w[j * d..(j + 1) * d], dxr);
            axpy(gv, xr, &mut dw[j * d..(j + 1) * d]);
        }
    }
    (dx, dw, db)
}

// ── losses ──────────────────────────────────────────────────────────

/// Per-sample binary cross entropy on a raw logit, stable form.
pub(crate) fn bce_with_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// Binary cross entropy of a single logit against target 0 or 1.
pub fn sigmoid_bce(logit: f32, target: f32) -> f32 {
    bce_with_logit(logit as f64, target as f64) as f32
}

pub(crate) fn softmax_ce_mean_forward(logits: &[f32], classes: &[usize], n: usize, c: usize) -> f32 {
    let mut total = 0.0f64;
    for i in 0..n {
        let row = &logits[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[classes[i]] as f64;
    }
    (total / n as f64) as f32
}

pub(crate) fn softmax_ce_mean_backward(
    logits: &[f32],
    classes: &[usize],
    n: usize,
    c: usize,
    upstream: f32,
) -> Vec<f32> {
    let mut dz = vec![0.0f32; n * c];
    let scale = upstream as f64 / n as f64;
    for i in 0..n {
        let row = &logits[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for j in 0..c {
            let p = exps[j] / sum;
            let t = if j == classes[i] { 1.0 } else { 0.0 };
            dz[i * c + j] = (scale * (p - t)) as f32;
        }
    }
    dz
}

// ── bilinear upsample ───────────────────────────────────────────────

/// Bilinear interpolation of a 2D map up to `target_h` x `target_w`.
///
/// With `align_corners` the corner samples map exactly onto the corner
/// targets; a source extent of 1 produces a constant along that axis.
/// Downsampling is rejected.
pub fn bilinear_upsample(
    map: &Tensor,
    target_h: usize,
    target_w: usize,
    align_corners: bool,
) -> Result<Tensor, TensorError> {
    let [h, w] = match map.shape() {
        [h, w] => [*h, *w],
        other => {
            return Err(TensorError::InvalidShape(format!(
                "bilinear_upsample expects a 2D map, got {other:?}"
            )))
        }
    };
    if target_h < h || target_w < w {
        return Err(TensorError::UpsampleTarget { from: (h, w), target: (target_h, target_w) });
    }
    let src = map.data();
    let mut out = vec![0.0f32; target_h * target_w];
    let coord = |o: usize, src_len: usize, dst_len: usize| -> f64 {
        if src_len == 1 || dst_len == 1 {
            return 0.0;
        }
        if align_corners {
            o as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64
        } else {
            let s = src_len as f64 / dst_len as f64;
            ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (src_len - 1) as f64)
        }
    };
    for oy in 0..target_h {
        let sy = coord(oy, h, target_h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = (sy - y0 as f64) as f32;
        for ox in 0..target_w {
            let sx = coord(ox, w, target_w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = (sx - x0 as f64) as f32;
            let v00 = src[y0 * w + x0];
            let v01 = src[y0 * w + x1];
            let v10 = src[y1 * w + x0];
            let v11 = src[y1 * w + x1];
            let top = v00 + (v01 - v00) * wx;
            let bot = v10 + (v11 - v10) * wx;
            out[oy * target_w + ox] = top + (bot - top) * wy;
        }
    }
    Tensor::new(&[target_h, target_w], out)
}

// ── pure single-image entry points ──────────────────────────────────

/// Elementwise max(0, x).
pub fn relu(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(t.shape(), data).expect("shape preserved")
}

/// Cross-correlation of a CxHxW image with KxCxKhxKw kernels.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &[f32],
    stride: usize,
    padding: usize,
) -> Result<Tensor, TensorError> {
    let s = Conv2dSpec::from_shapes(input.shape(), kernels.shape(), bias.len(), stride, padding)?;
    let out = conv2d_forward(input.data(), kernels.data(), bias, &s);
    Tensor::new(&s.out_shape(), out)
}

/// Per-channel convolution: channel `c` of the input sees only kernel `c`.
pub fn depthwise_conv2d(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor, TensorError> {
    let s = DepthwiseSpec::from_shapes(input.shape(), kernels.shape(), stride, padding)?;
    let out = depthwise_forward(input.data(), kernels.data(), &s);
    Tensor::new(&s.out_shape(), out)
}

pub fn avg_pool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor, TensorError> {
    let s = Pool2dSpec::from_shapes(input.shape(), window, stride)?;
    Tensor::new(&s.out_shape(), avg_pool_forward(input.data(), &s))
}

pub fn max_pool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor, TensorError> {
    let s = Pool2dSpec::from_shapes(input.shape(), window, stride)?;
    Tensor::new(&s.out_shape(), max_pool_forward(input.data(), &s).0)
}

/// Mean over each KxHxW activation map, yielding a K-vector.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor, TensorError> {
    let (n, k, h, w, batched) = gap_spec(input.shape())?;
    let out = gap_forward(input.data(), n, k, h, w);
    let shape: Vec<usize> = if batched { vec![n, k] } else { vec![k] };
    Tensor::new(&shape, out)
}

/// Stack parts along the channel axis; all parts must share H x W.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
    let (shape, _) = concat_shape(parts.iter().map(|t| t.shape()))?;
    let mut out = Vec::with_capacity(shape.iter().product());
    if shape.len() == 3 {
        for t in parts {
            out.extend_from_slice(t.data());
        }
    } else {
        let n = shape[0];
        for i in 0..n {
            for t in parts {
                let sample = t.numel() / n;
                out.extend_from_slice(&t.data()[i * sample..(i + 1) * sample]);
            }
        }
    }
    Tensor::new(&shape, out)
}

/// Output shape plus per-part channel offsets for channel concatenation.
pub(crate) fn concat_shape<'a>(
    shapes: impl Iterator<Item = &'a [usize]>,
) -> Result<(Vec<usize>, Vec<usize>), TensorError> {
    let mut iter = shapes.peekable();
    let first = iter
        .peek()
        .ok_or_else(|| TensorError::InvalidShape("concat_channels needs at least one part".into()))?;
    let rank = first.len();
    if rank != 3 && rank != 4 {
        return Err(TensorError::InvalidShape(format!(
            "concat_channels parts must be CxHxW or NxCxHxW, got {first:?}"
        )));
    }
    let mut total_c = 0usize;
    let mut offsets = Vec::new();
    let mut ref_dims: Option<Vec<usize>> = None;
    for sh in iter {
        if sh.len() != rank {
            return Err(TensorError::ShapeMismatch("concat_channels rank mismatch".into()));
        }
        let (c, rest) = if rank == 3 {
            (sh[0], vec![sh[1], sh[2]])
        } else {
            (sh[1], vec![sh[0], sh[2], sh[3]])
        };
        match &ref_dims {
            None => ref_dims = Some(rest),
            Some(r) => {
                if *r != rest {
                    return Err(TensorError::ShapeMismatch(format!(
                        "concat_channels parts disagree beyond the channel axis: {sh:?}"
                    )));
                }
            }
        }
        offsets.push(total_c);
        total_c += c;
    }
    let r = ref_dims.unwrap();
    let shape = if rank == 3 {
        vec![total_c, r[0], r[1]]
    } else {
        vec![r[0], total_c, r[1], r[2]]
    };
    Ok((shape, offsets))
}

/// Dense affine map of a D-vector: y = W x + b with W of shape OxD.
pub fn fully_connected(x: &Tensor, w: &Tensor, b: &[f32]) -> Result<Tensor, TensorError> {
    let (n, d, o, batched) = fc_spec(x.shape(), w.shape(), b.len())?;
    let out = fc_forward(x.data(), w.data(), b, n, d, o);
    let shape: Vec<usize> = if batched { vec![n, o] } else { vec![o] };
    Tensor::new(&shape, out)
}
