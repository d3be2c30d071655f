// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense kernels and their hand-written backward passes.
//!
//! Slice-level kernels are what the model code calls in hot loops; the
//! `Tensor`-level wrappers add shape and finiteness checks.

use std::cmp::Ordering;

use super::tensor::Tensor;
use crate::error::{CloomError, Result};

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), where `op(a)` is
/// `m × k` and `op(b)` is `k × n`. Transposed operands are stored in their
/// untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the three slices, and `c` does not alias `a` or `b` (borrow rules).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Strided operand view: `(slice, offset, row stride, column stride)`.
pub type View<'a> = (&'a [f32], usize, usize, usize);

fn view_fits(v: &View<'_>, rows: usize, cols: usize) -> bool {
    let (s, off, rs, cs) = *v;
    rows == 0 || cols == 0 || off + (rows - 1) * rs + (cols - 1) * cs < s.len()
}

/// General strided product `C[m×n] (+)= A[m×k] · B[k×n]`; used for per-head
/// attention where operands are column slices of wider matrices.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: View<'_>,
    b: View<'_>,
    c: &mut [f32],
    c_off: usize,
    c_rs: usize,
    c_cs: usize,
    accumulate: bool,
) {
    assert!(view_fits(&a, m, k), "gemm_strided: lhs out of bounds");
    assert!(view_fits(&b, k, n), "gemm_strided: rhs out of bounds");
    assert!(
        m == 0 || n == 0 || c_off + (m - 1) * c_rs + (n - 1) * c_cs < c.len(),
        "gemm_strided: output out of bounds"
    );
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[c_off + i * c_rs + j * c_cs] = 0.0;
                }
            }
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds of every strided access were checked above; `c` is a
    // unique borrow so it cannot alias the inputs.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr().add(a.1),
            a.2 as isize,
            a.3 as isize,
            b.0.as_ptr().add(b.1),
            b.2 as isize,
            b.3 as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            c_rs as isize,
            c_cs as isize,
        );
    }
}

/// `y = W x` for a row-major `rows × cols` matrix.
pub fn matvec(w: &[f32], rows: usize, cols: usize, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), cols);
    for (r, out) in y.iter_mut().enumerate().take(rows) {
        *out = dot(&w[r * cols..(r + 1) * cols], x);
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(CloomError::shape(
            "matmul",
            format!("inner dimensions {k} and {k2} disagree"),
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    let t = Tensor::from_parts(vec![m, n], out);
    t.ensure_finite("matmul")?;
    Ok(t)
}

/// In-place numerically stable softmax. `-inf` entries become exact zeros.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = if *v == f32::NEG_INFINITY {
            0.0
        } else {
            (*v - max).exp()
        };
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Backward of softmax given its output `y` and upstream `dy`; writes `dx`.
pub fn softmax_backward(y: &[f32], dy: &[f32], dx: &mut [f32]) {
    let s: f32 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    for ((o, yi), dyi) in dx.iter_mut().zip(y).zip(dy) {
        *o = yi * (dyi - s);
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2("softmax_rows")?;
    if c == 0 {
        return Err(CloomError::InvalidArgument("softmax_rows: empty row".into()));
    }
    let mut out = x.clone();
    for i in 0..r {
        softmax_in_place(out.row_mut(i));
    }
    out.ensure_finite("softmax_rows")?;
    Ok(out)
}

/// RMS-normalizes one row into `out`; returns the denominator
/// `sqrt(mean(x²) + eps)`.
pub fn rmsnorm_row(x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) -> f32 {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let denom = (ms + eps).sqrt();
    let inv = 1.0 / denom;
    for ((o, xi), g) in out.iter_mut().zip(x).zip(gain) {
        *o = xi * inv * g;
    }
    denom
}

/// Applies a frozen denominator: `out = x / denom ⊙ gain`.
pub fn rmsnorm_row_frozen(x: &[f32], gain: &[f32], denom: f32, out: &mut [f32]) {
    let inv = 1.0 / denom;
    for ((o, xi), g) in out.iter_mut().zip(x).zip(gain) {
        *o = xi * inv * g;
    }
}

/// Backward of [`rmsnorm_row`]. Accumulates into `dx` and `dgain`.
pub fn rmsnorm_backward_row(
    x: &[f32],
    gain: &[f32],
    denom: f32,
    dy: &[f32],
    dx: &mut [f32],
    dgain: &mut [f32],
) {
    let n = x.len() as f32;
    let inv = 1.0 / denom;
    let mut proj = 0.0;
    for i in 0..x.len() {
        proj += gain[i] * dy[i] * x[i];
        dgain[i] += dy[i] * x[i] * inv;
    }
    let coef = proj * inv * inv * inv / n;
    for i in 0..x.len() {
        dx[i] += gain[i] * dy[i] * inv - x[i] * coef;
    }
}

/// RMS normalization over the last dimension.
pub fn rmsnorm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<(Tensor, Tensor)> {
    let c = x.last_dim();
    if gain.len() != c {
        return Err(CloomError::shape(
            "rmsnorm",
            format!("gain has {} entries, last dimension is {c}", gain.len()),
        ));
    }
    let rows = x.n_rows();
    let mut y = Tensor::zeros(x.shape());
    let mut denoms = Vec::with_capacity(rows);
    for i in 0..rows {
        let d = rmsnorm_row(x.row(i), gain.data(), eps, y.row_mut(i));
        denoms.push(d);
    }
    y.ensure_finite("rmsnorm")?;
    let denoms = Tensor::from_parts(vec![rows], denoms);
    Ok((y, denoms))
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Total order used for top-k selection: larger value first, then lower index.
#[inline]
pub(crate) fn rank_desc(a: (usize, f32), b: (usize, f32)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Indices of the `k` largest entries of `row`, ties to the lower index,
/// returned in rank order.
pub fn topk_indices(row: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<(usize, f32)> = row.iter().copied().enumerate().collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |a, b| rank_desc(*a, *b));
        idx.truncate(k);
    }
    idx.sort_by(|a, b| rank_desc(*a, *b));
    idx.into_iter().map(|(i, _)| i).collect()
}

/// Keeps the `k` largest values of each row (last dimension), zeroing the rest.
pub fn topk_mask(x: &Tensor, k: usize) -> Result<Tensor> {
    let c = x.last_dim();
    if k > c {
        return Err(CloomError::InvalidArgument(format!(
            "topk_mask: k = {k} exceeds dimension {c}"
        )));
    }
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.n_rows() {
        let src = x.row(r);
        let dst = out.row_mut(r);
        for i in topk_indices(src, k) {
            dst[i] = src[i];
        }
    }
    Ok(out)
}
