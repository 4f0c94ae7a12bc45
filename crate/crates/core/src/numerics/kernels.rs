//! Raw compute kernels shared by the eager ops and the autodiff tape.
//!
//! Convolutions are lowered to GEMM through im2col; the column matrix is
//! returned to the caller so the weight-gradient GEMM can reuse it.

use crate::error::{Error, Result};
use crate::numerics::tensor::Scalar;

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("stride must be >= 1"));
    }
    if input + 2 * pad < kernel {
        return Err(Error::shape(format!(
            "kernel {kernel} larger than padded input {input}+2*{pad}"
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// C = A(m x k) * B(k x n), row-major, overwriting C.
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(
        m, k, n,
        T::one(),
        a, k as isize, 1,
        b, n as isize, 1,
        T::zero(),
        c, n as isize, 1,
    );
}

/// C += A(m x k) * B(k x n), row-major.
pub fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(
        m, k, n,
        T::one(),
        a, k as isize, 1,
        b, n as isize, 1,
        T::one(),
        c, n as isize, 1,
    );
}

/// C += A^T(m x k) * B(k x n) where A is stored k x m row-major.
pub fn gemm_at_b_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(
        m, k, n,
        T::one(),
        a, 1, m as isize,
        b, n as isize, 1,
        T::one(),
        c, n as isize, 1,
    );
}

/// C += A(m x k) * B^T(k x n) where B is stored n x k row-major.
pub fn gemm_a_bt_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(
        m, k, n,
        T::one(),
        a, k as isize, 1,
        b, 1, k as isize,
        T::one(),
        c, n as isize, 1,
    );
}

/// C = A(m x k) * B^T, B stored n x k row-major.
pub fn gemm_a_bt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(
        m, k, n,
        T::one(),
        a, k as isize, 1,
        b, 1, k as isize,
        T::zero(),
        c, n as isize, 1,
    );
}

/// Unfold x [C, H, W] into columns [C*kh*kw, oh*ow] for a zero-padded
/// cross-correlation with the given stride.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    let spatial = oh * ow;
    for ci in 0..c {
        let x_plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * spatial;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let out_row = row + oy * ow;
                    if iy < 0 || iy >= h as isize {
                        col[out_row..out_row + ow].fill(T::zero());
                        continue;
                    }
                    let x_row = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        col[out_row + ox] = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            x_plane[x_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatter-add columns back into an input-shaped buffer.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let spatial = oh * ow;
    for ci in 0..c {
        let x_plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * spatial;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_row = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let idx = x_row + ix as usize;
                            x_plane[idx] = x_plane[idx] + col[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward: y [Cout, oh, ow] = w [Cout, Cin, kh, kw] * x + b.
/// Returns the column matrix for reuse in the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w_in: usize,
    weight: &[T],
    cout: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<(Vec<T>, usize, usize, Vec<T>)> {
    let oh = conv_out_extent(h, kh, stride, pad)?;
    let ow = conv_out_extent(w_in, kw, stride, pad)?;
    let k = cin * kh * kw;
    let spatial = oh * ow;
    let mut col = vec![T::zero(); k * spatial];
    im2col(x, cin, h, w_in, kh, kw, stride, pad, oh, ow, &mut col);
    let mut y = vec![T::zero(); cout * spatial];
    gemm(cout, k, spatial, weight, &col, &mut y);
    if let Some(b) = bias {
        for co in 0..cout {
            let bv = b[co];
            for v in &mut y[co * spatial..(co + 1) * spatial] {
                *v = *v + bv;
            }
        }
    }
    Ok((y, oh, ow, col))
}

/// Gradient of conv2d w.r.t. its input: dx = W^T dy folded back through col2im.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_input<T: Scalar>(
    dy: &[T],
    weight: &[T],
    cin: usize,
    h: usize,
    w_in: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let k = cin * kh * kw;
    let spatial = oh * ow;
    let mut dcol = vec![T::zero(); k * spatial];
    // dcol = W^T (cout x k)^T * dy (cout x spatial)
    gemm_at_b_acc(k, cout, spatial, weight, dy, &mut dcol);
    let mut dx = vec![T::zero(); cin * h * w_in];
    col2im_add(&dcol, cin, h, w_in, kh, kw, stride, pad, oh, ow, &mut dx);
    dx
}

/// Gradient of conv2d w.r.t. weight and bias, accumulating into dw/db.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_weight<T: Scalar>(
    dy: &[T],
    col: &[T],
    cout: usize,
    k: usize,
    spatial: usize,
    dw: &mut [T],
    db: Option<&mut [T]>,
) {
    // dw (cout x k) += dy (cout x spatial) * col^T (spatial x k)
    gemm_a_bt_acc(cout, spatial, k, dy, col, dw);
    if let Some(db) = db {
        for co in 0..cout {
            let mut acc = T::zero();
            for &v in &dy[co * spatial..(co + 1) * spatial] {
                acc = acc + v;
            }
            db[co] = db[co] + acc;
        }
    }
}

/// Transposed convolution forward (the adjoint map of a stride-`s` conv):
/// y [Cout, (h-1)s - 2p + kh, ...] from x [Cin, h, w], weight [Cin, Cout, kh, kw].
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w_in: usize,
    weight: &[T],
    cout: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<(Vec<T>, usize, usize)> {
    let oh = (h - 1) * stride + kh;
    let ow = (w_in - 1) * stride + kw;
    if oh < 2 * pad || ow < 2 * pad {
        return Err(Error::shape("conv_transpose2d: padding exceeds output"));
    }
    let oh = oh - 2 * pad;
    let ow = ow - 2 * pad;
    let k = cout * kh * kw;
    let spatial = h * w_in;
    // cols (k x spatial) = W^T (cin x k)^T * x (cin x spatial)
    let mut cols = vec![T::zero(); k * spatial];
    gemm_at_b_acc(k, cin, spatial, weight, x, &mut cols);
    let mut y = vec![T::zero(); cout * oh * ow];
    col2im_add(&cols, cout, oh, ow, kh, kw, stride, pad, h, w_in, &mut y);
    if let Some(b) = bias {
        for co in 0..cout {
            let bv = b[co];
            for v in &mut y[co * oh * ow..(co + 1) * oh * ow] {
                *v = *v + bv;
            }
        }
    }
    Ok((y, oh, ow))
}

/// dx of conv_transpose2d is an ordinary strided cross-correlation of dy.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    weight: &[T],
    cin: usize,
    h: usize,
    w_in: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dw: &mut [T],
    db: Option<&mut [T]>,
) -> Result<Vec<T>> {
    let k = cout * kh * kw;
    let spatial = h * w_in;
    let mut dy_col = vec![T::zero(); k * spatial];
    im2col(dy, cout, oh, ow, kh, kw, stride, pad, h, w_in, &mut dy_col);
    // dx (cin x spatial) = W (cin x k) * dy_col (k x spatial)
    let mut dx = vec![T::zero(); cin * spatial];
    gemm(cin, k, spatial, weight, &dy_col, &mut dx);
    // dw (cin x k) += x (cin x spatial) * dy_col^T
    gemm_a_bt_acc(cin, spatial, k, x, &dy_col, dw);
    if let Some(db) = db {
        let plane = oh * ow;
        for co in 0..cout {
            let mut acc = T::zero();
            for &v in &dy[co * plane..(co + 1) * plane] {
                acc = acc + v;
            }
            db[co] = db[co] + acc;
        }
    }
    Ok(dx)
}

/// Group normalization over [C, H, W]; returns per-group (mean, inv_std).
pub fn group_norm_forward<T: Scalar>(
    x: &[T],
    c: usize,
    spatial: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
    y: &mut [T],
) -> Vec<(T, T)> {
    let per = c / groups;
    let group_len = per * spatial;
    let mut stats = Vec::with_capacity(groups);
    for g in 0..groups {
        let lo = g * group_len;
        let seg = &x[lo..lo + group_len];
        let mut sum = T::zero();
        for &v in seg {
            sum = sum + v;
        }
        let mean = sum / T::from_f64(group_len as f64);
        let mut var = T::zero();
        for &v in seg {
            let d = v - mean;
            var = var + d * d;
        }
        let var = var / T::from_f64(group_len as f64);
        let inv_std = T::one() / (var + eps).sqrt();
        stats.push((mean, inv_std));
        for ci in 0..per {
            let ch = g * per + ci;
            let gsc = gamma[ch];
            let bsc = beta[ch];
            let base = ch * spatial;
            for i in 0..spatial {
                y[base + i] = (x[base + i] - mean) * inv_std * gsc + bsc;
            }
        }
    }
    stats
}

/// Backward of group_norm_forward; accumulates dgamma/dbeta, returns dx.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    c: usize,
    spatial: usize,
    groups: usize,
    gamma: &[T],
    stats: &[(T, T)],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let per = c / groups;
    let group_len = per * spatial;
    let n = T::from_f64(group_len as f64);
    let mut dx = vec![T::zero(); c * spatial];
    for g in 0..groups {
        let (mean, inv_std) = stats[g];
        // accumulate the two reductions the dx formula needs
        let mut sum_dyg = T::zero(); // sum(dy * gamma)
        let mut sum_dyg_xhat = T::zero(); // sum(dy * gamma * xhat)
        for ci in 0..per {
            let ch = g * per + ci;
            let base = ch * spatial;
            let gsc = gamma[ch];
            let mut dg = T::zero();
            let mut db = T::zero();
            for i in 0..spatial {
                let xhat = (x[base + i] - mean) * inv_std;
                let d = dy[base + i];
                dg = dg + d * xhat;
                db = db + d;
                sum_dyg = sum_dyg + d * gsc;
                sum_dyg_xhat = sum_dyg_xhat + d * gsc * xhat;
            }
            dgamma[ch] = dgamma[ch] + dg;
            dbeta[ch] = dbeta[ch] + db;
        }
        let mean_dyg = sum_dyg / n;
        let mean_dyg_xhat = sum_dyg_xhat / n;
        for ci in 0..per {
            let ch = g * per + ci;
            let base = ch * spatial;
            let gsc = gamma[ch];
            for i in 0..spatial {
                let xhat = (x[base + i] - mean) * inv_std;
                dx[base + i] = (dy[base + i] * gsc - mean_dyg - xhat * mean_dyg_xhat) * inv_std;
            }
        }
    }
    dx
}

/// Row-wise layer norm over [rows, d]; returns per-row (mean, inv_std).
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    rows: usize,
    d: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
    y: &mut [T],
) -> Vec<(T, T)> {
    let n = T::from_f64(d as f64);
    let mut stats = Vec::with_capacity(rows);
    for r in 0..rows {
        let seg = &x[r * d..(r + 1) * d];
        let mut sum = T::zero();
        for &v in seg {
            sum = sum + v;
        }
        let mean = sum / n;
        let mut var = T::zero();
        for &v in seg {
            let dlt = v - mean;
            var = var + dlt * dlt;
        }
        let inv_std = T::one() / (var / n + eps).sqrt();
        stats.push((mean, inv_std));
        let out = &mut y[r * d..(r + 1) * d];
        for i in 0..d {
            out[i] = (seg[i] - mean) * inv_std * gamma[i] + beta[i];
        }
    }
    stats
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    rows: usize,
    d: usize,
    gamma: &[T],
    stats: &[(T, T)],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let n = T::from_f64(d as f64);
    let mut dx = vec![T::zero(); rows * d];
    for r in 0..rows {
        let (mean, inv_std) = stats[r];
        let xs = &x[r * d..(r + 1) * d];
        let dys = &dy[r * d..(r + 1) * d];
        let mut sum_dyg = T::zero();
        let mut sum_dyg_xhat = T::zero();
        for i in 0..d {
            let xhat = (xs[i] - mean) * inv_std;
            let g = dys[i] * gamma[i];
            sum_dyg = sum_dyg + g;
            sum_dyg_xhat = sum_dyg_xhat + g * xhat;
            dgamma[i] = dgamma[i] + dys[i] * xhat;
            dbeta[i] = dbeta[i] + dys[i];
        }
        let mean_dyg = sum_dyg / n;
        let mean_dyg_xhat = sum_dyg_xhat / n;
        let dxs = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            let xhat = (xs[i] - mean) * inv_std;
            dxs[i] = (dys[i] * gamma[i] - mean_dyg - xhat * mean_dyg_xhat) * inv_std;
        }
    }
    dx
}

/// Stable row softmax over [rows, cols], in place into y.
pub fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize, y: &mut [T]) {
    for r in 0..rows {
        let xs = &x[r * cols..(r + 1) * cols];
        let ys = &mut y[r * cols..(r + 1) * cols];
        let mut m = T::neg_infinity();
        for &v in xs {
            if v > m {
                m = v;
            }
        }
        let mut sum = T::zero();
        for i in 0..cols {
            let e = (xs[i] - m).exp();
            ys[i] = e;
            sum = sum + e;
        }
        for v in ys {
            *v = *v / sum;
        }
    }
}

/// dsoftmax: dx = y .* (dy - rowsum(dy .* y))
pub fn softmax_rows_backward<T: Scalar>(dy: &[T], y: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let ys = &y[r * cols..(r + 1) * cols];
        let dys = &dy[r * cols..(r + 1) * cols];
        let mut dot = T::zero();
        for i in 0..cols {
            dot = dot + ys[i] * dys[i];
        }
        let dxs = &mut dx[r * cols..(r + 1) * cols];
        for i in 0..cols {
            dxs[i] = ys[i] * (dys[i] - dot);
        }
    }
    dx
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// tanh-form GELU; the gradient differentiates exactly this expression.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Nearest-neighbour upsample of [C, H, W] by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let oh = h * factor;
    let ow = w * factor;
    let mut y = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            let iy = oy / factor;
            let src = ci * h * w + iy * w;
            let dst = ci * oh * ow + oy * ow;
            for ox in 0..ow {
                y[dst + ox] = x[src + ox / factor];
            }
        }
    }
    y
}

/// Adjoint of nearest upsample: sum each factor x factor block.
pub fn upsample_nearest_backward<T: Scalar>(
    dy: &[T],
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let oh = h * factor;
    let ow = w * factor;
    let mut dx = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for oy in 0..oh {
            let iy = oy / factor;
            let dst = ci * h * w + iy * w;
            let src = ci * oh * ow + oy * ow;
            for ox in 0..ow {
                dx[dst + ox / factor] = dx[dst + ox / factor] + dy[src + ox];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_extent_contract() {
        assert_eq!(conv_out_extent(5, 3, 2, 1).unwrap(), 3);
        assert_eq!(conv_out_extent(32, 4, 2, 1).unwrap(), 16);
        assert!(conv_out_extent(2, 5, 1, 0).is_err());
    }

    #[test]
    fn upsample_roundtrip_shapes() {
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let y = upsample_nearest(&x, 1, 3, 4, 2);
        assert_eq!(y.len(), 48);
        assert_eq!(y[0], 0.0);
        assert_eq!(y[1], 0.0);
        assert_eq!(y[2], 1.0);
        let dx = upsample_nearest_backward(&y, 1, 3, 4, 2);
        // each source pixel contributes to 4 outputs of its own value
        assert_eq!(dx[0], 0.0);
        assert_eq!(dx[1], 4.0);
    }
}
