//! Reverse-mode automatic differentiation on a linear tape.
//!
//! The forward pass records each operation together with whatever the
//! backward rule needs (column matrices for convolutions, normalization
//! statistics, softmax outputs). `backward` then replays the tape in reverse,
//! accumulating vector-Jacobian products into per-buffer gradient slots.
//!
//! Everything is eager: an op executes when recorded, so `value` is always
//! available. One tape corresponds to one scalar loss evaluation.

use crate::error::{Error, Result};
use crate::numerics::kernels as k;
use crate::numerics::tensor::{Scalar, Tensor};

/// Handle to a buffer on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Scale { a: Var, c: T, out: Var },
    Exp { a: Var, out: Var },
    Matmul { a: Var, b: Var, out: Var },
    /// out = a * b^T with a [m,k], b [n,k]
    MatmulTB { a: Var, b: Var, out: Var },
    Transpose2d { a: Var, out: Var },
    Reshape { a: Var, out: Var },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        out: Var,
        stride: usize,
        pad: usize,
        col: Vec<T>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        out: Var,
        stride: usize,
        pad: usize,
    },
    Relu { a: Var, out: Var },
    Silu { a: Var, out: Var },
    Gelu { a: Var, out: Var },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        out: Var,
        groups: usize,
        stats: Vec<(T, T)>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        out: Var,
        stats: Vec<(T, T)>,
    },
    SoftmaxRows { a: Var, out: Var },
    SliceCols { a: Var, out: Var, from: usize, to: usize },
    ConcatCols { parts: Vec<Var>, out: Var },
    ConcatRows { parts: Vec<Var>, out: Var },
    ConcatChannels { a: Var, b: Var, out: Var },
    AddRowBroadcast { a: Var, b: Var, out: Var },
    AddChanBroadcast { a: Var, b: Var, out: Var },
    UpsampleNearest { a: Var, out: Var, factor: usize },
    Patchify { a: Var, out: Var, patch: usize },
    MeanAll { a: Var, out: Var },
}

pub struct Tape<T> {
    bufs: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    ops: Vec<Op<T>>,
    /// Check every op output for NaN/Inf; on by default per the numerics
    /// contract (non-finite values are surfaced, never propagated).
    pub check_finite: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            bufs: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            check_finite: true,
        }
    }

    /// Register a leaf buffer (input or parameter; gradients accumulate for
    /// any leaf that ends up on a differentiable path).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let id = self.bufs.len();
        self.bufs.push(t);
        self.grads.push(None);
        Var(id)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.bufs[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.bufs[v.0].shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    fn push(&mut self, t: Tensor<T>, make: impl FnOnce(Var) -> Op<T>) -> Result<Var> {
        if self.check_finite {
            t.ensure_finite("tape op output")?;
        }
        let out = self.leaf(t);
        let op = make(out);
        self.ops.push(op);
        Ok(out)
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.bufs[a.0].add(&self.bufs[b.0])?;
        self.push(t, |out| Op::Add { a, b, out })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.bufs[a.0].sub(&self.bufs[b.0])?;
        self.push(t, |out| Op::Sub { a, b, out })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.bufs[a.0].mul(&self.bufs[b.0])?;
        self.push(t, |out| Op::Mul { a, b, out })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let t = self.bufs[a.0].scale(c);
        self.push(t, |out| Op::Scale { a, c, out })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.bufs[a.0].map(|v| v.exp());
        self.push(t, |out| Op::Exp { a, out })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.bufs[a.0].map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(t, |out| Op::Relu { a, out })
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let t = self.bufs[a.0].map(k::silu);
        self.push(t, |out| Op::Silu { a, out })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.bufs[a.0].map(k::gelu);
        self.push(t, |out| Op::Gelu { a, out })
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = dims2(&self.bufs[a.0], "matmul lhs")?;
        let (kb, n) = dims2(&self.bufs[b.0], "matmul rhs")?;
        if ka != kb {
            return Err(Error::shape(format!(
                "matmul inner extents disagree: {m}x{ka} vs {kb}x{n}"
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        k::gemm(m, ka, n, self.bufs[a.0].data(), self.bufs[b.0].data(), out.data_mut());
        self.push(out, |out| Op::Matmul { a, b, out })
    }

    /// a [m,k] * b^T with b stored [n,k]; the attention score shape.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = dims2(&self.bufs[a.0], "matmul_tb lhs")?;
        let (n, kb) = dims2(&self.bufs[b.0], "matmul_tb rhs")?;
        if ka != kb {
            return Err(Error::shape(format!(
                "matmul_tb inner extents disagree: {m}x{ka} vs {n}x{kb}"
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        k::gemm_a_bt(m, ka, n, self.bufs[a.0].data(), self.bufs[b.0].data(), out.data_mut());
        self.push(out, |out| Op::MatmulTB { a, b, out })
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(&self.bufs[a.0], "transpose2d")?;
        let src = self.bufs[a.0].data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        self.push(t, |out| Op::Transpose2d { a, out })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.bufs[a.0].clone().reshape(shape)?;
        self.push(t, |out| Op::Reshape { a, out })
    }

    // ── convolution ─────────────────────────────────────────────────

    /// Cross-correlation of x [Cin,H,W] with w [Cout,Cin,kh,kw], zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, win) = dims3(&self.bufs[x.0], "conv2d input")?;
        let ws = self.bufs[w.0].shape().to_vec();
        if ws.len() != 4 || ws[1] != cin {
            return Err(Error::shape(format!(
                "conv2d weight {ws:?} does not match input channels {cin}"
            )));
        }
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if let Some(bv) = b {
            if self.bufs[bv.0].shape() != [cout] {
                return Err(Error::shape("conv2d bias shape"));
            }
        }
        let bias_data = b.map(|bv| self.bufs[bv.0].data().to_vec());
        let (y, oh, ow, col) = k::conv2d_forward(
            self.bufs[x.0].data(),
            cin,
            h,
            win,
            self.bufs[w.0].data(),
            cout,
            kh,
            kw,
            bias_data.as_deref(),
            stride,
            pad,
        )?;
        let t = Tensor::new(vec![cout, oh, ow], y)?;
        self.push(t, |out| Op::Conv2d { x, w, b, out, stride, pad, col })
    }

    /// Transposed convolution of x [Cin,H,W] with w [Cin,Cout,kh,kw].
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (cin, h, win) = dims3(&self.bufs[x.0], "conv_transpose2d input")?;
        let ws = self.bufs[w.0].shape().to_vec();
        if ws.len() != 4 || ws[0] != cin {
            return Err(Error::shape(format!(
                "conv_transpose2d weight {ws:?} does not match input channels {cin}"
            )));
        }
        let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
        let bias_data = b.map(|bv| self.bufs[bv.0].data().to_vec());
        let (y, oh, ow) = k::conv_transpose2d_forward(
            self.bufs[x.0].data(),
            cin,
            h,
            win,
            self.bufs[w.0].data(),
            cout,
            kh,
            kw,
            bias_data.as_deref(),
            stride,
            pad,
        )?;
        let t = Tensor::new(vec![cout, oh, ow], y)?;
        self.push(t, |out| Op::ConvTranspose2d { x, w, b, out, stride, pad })
    }

    // ── normalization / softmax ─────────────────────────────────────

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (c, h, w) = dims3(&self.bufs[x.0], "group_norm input")?;
        if c % groups != 0 {
            return Err(Error::config(format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        if self.bufs[gamma.0].shape() != [c] || self.bufs[beta.0].shape() != [c] {
            return Err(Error::shape("group_norm scale/shift shape"));
        }
        let mut y = Tensor::zeros(&[c, h, w]);
        let stats = k::group_norm_forward(
            self.bufs[x.0].data(),
            c,
            h * w,
            groups,
            self.bufs[gamma.0].data(),
            self.bufs[beta.0].data(),
            T::from_f64(1e-5),
            y.data_mut(),
        );
        self.push(y, |out| Op::GroupNorm { x, gamma, beta, out, groups, stats })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, d) = dims2(&self.bufs[x.0], "layer_norm input")?;
        if self.bufs[gamma.0].shape() != [d] || self.bufs[beta.0].shape() != [d] {
            return Err(Error::shape("layer_norm scale/shift shape"));
        }
        let mut y = Tensor::zeros(&[rows, d]);
        let stats = k::layer_norm_forward(
            self.bufs[x.0].data(),
            rows,
            d,
            self.bufs[gamma.0].data(),
            self.bufs[beta.0].data(),
            T::from_f64(1e-5),
            y.data_mut(),
        );
        self.push(y, |out| Op::LayerNorm { x, gamma, beta, out, stats })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = dims2(&self.bufs[a.0], "softmax_rows input")?;
        let mut y = Tensor::zeros(&[rows, cols]);
        k::softmax_rows(self.bufs[a.0].data(), rows, cols, y.data_mut());
        self.push(y, |out| Op::SoftmaxRows { a, out })
    }

    // ── slicing / concatenation / broadcasting ──────────────────────

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let (rows, d) = dims2(&self.bufs[a.0], "slice_cols input")?;
        if from >= to || to > d {
            return Err(Error::index(format!("slice_cols {from}..{to} of width {d}")));
        }
        let width = to - from;
        let src = self.bufs[a.0].data();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&src[r * d + from..r * d + to]);
        }
        let t = Tensor::new(vec![rows, width], out)?;
        self.push(t, |out| Op::SliceCols { a, out, from, to })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of nothing"));
        }
        let rows = dims2(&self.bufs[parts[0].0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, d) = dims2(&self.bufs[p.0], "concat_cols part")?;
            if r != rows {
                return Err(Error::shape("concat_cols row mismatch"));
            }
            widths.push(d);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &d) in parts.iter().zip(&widths) {
                let src = self.bufs[p.0].data();
                out.extend_from_slice(&src[r * d..(r + 1) * d]);
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        let parts = parts.to_vec();
        self.push(t, |out| Op::ConcatCols { parts, out })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows of nothing"));
        }
        let d = dims2(&self.bufs[parts[0].0], "concat_rows")?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, dp) = dims2(&self.bufs[p.0], "concat_rows part")?;
            if dp != d {
                return Err(Error::shape("concat_rows width mismatch"));
            }
            rows += r;
            out.extend_from_slice(self.bufs[p.0].data());
        }
        let t = Tensor::new(vec![rows, d], out)?;
        let parts = parts.to_vec();
        self.push(t, |out| Op::ConcatRows { parts, out })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, h, w) = dims3(&self.bufs[a.0], "concat_channels lhs")?;
        let (cb, hb, wb) = dims3(&self.bufs[b.0], "concat_channels rhs")?;
        if h != hb || w != wb {
            return Err(Error::shape("concat_channels spatial mismatch"));
        }
        let mut out = Vec::with_capacity((ca + cb) * h * w);
        out.extend_from_slice(self.bufs[a.0].data());
        out.extend_from_slice(self.bufs[b.0].data());
        let t = Tensor::new(vec![ca + cb, h, w], out)?;
        self.push(t, |out| Op::ConcatChannels { a, b, out })
    }

    /// x [n,d] + b [d] broadcast over rows.
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, d) = dims2(&self.bufs[a.0], "add_row_broadcast lhs")?;
        if self.bufs[b.0].shape() != [d] {
            return Err(Error::shape("add_row_broadcast rhs shape"));
        }
        let xs = self.bufs[a.0].data();
        let bs = self.bufs[b.0].data();
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            for j in 0..d {
                out.push(xs[r * d + j] + bs[j]);
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        self.push(t, |out| Op::AddRowBroadcast { a, b, out })
    }

    /// x [C,H,W] + b [C] broadcast over the spatial plane.
    pub fn add_chan_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (c, h, w) = dims3(&self.bufs[a.0], "add_chan_broadcast lhs")?;
        if self.bufs[b.0].shape() != [c] {
            return Err(Error::shape("add_chan_broadcast rhs shape"));
        }
        let xs = self.bufs[a.0].data();
        let bs = self.bufs[b.0].data();
        let spatial = h * w;
        let mut out = Vec::with_capacity(c * spatial);
        for ci in 0..c {
            let bv = bs[ci];
            for i in 0..spatial {
                out.push(xs[ci * spatial + i] + bv);
            }
        }
        let t = Tensor::new(vec![c, h, w], out)?;
        self.push(t, |out| Op::AddChanBroadcast { a, b, out })
    }

    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = dims3(&self.bufs[a.0], "upsample_nearest input")?;
        let y = k::upsample_nearest(self.bufs[a.0].data(), c, h, w, factor);
        let t = Tensor::new(vec![c, h * factor, w * factor], y)?;
        self.push(t, |out| Op::UpsampleNearest { a, out, factor })
    }

    /// Cut x [C,H,W] into non-overlapping p x p patches, flattened row-major
    /// to [ (H/p)*(W/p), C*p*p ] with features ordered (channel, ky, kx).
    pub fn patchify(&mut self, a: Var, patch: usize) -> Result<Var> {
        let (c, h, w) = dims3(&self.bufs[a.0], "patchify input")?;
        if h % patch != 0 || w % patch != 0 {
            return Err(Error::shape(format!(
                "patchify: {h}x{w} not divisible by patch {patch}"
            )));
        }
        let ph = h / patch;
        let pw = w / patch;
        let feat = c * patch * patch;
        let src = self.bufs[a.0].data();
        let mut out = vec![T::zero(); ph * pw * feat];
        for py in 0..ph {
            for px in 0..pw {
                let row = (py * pw + px) * feat;
                for ci in 0..c {
                    for ky in 0..patch {
                        let src_base = ci * h * w + (py * patch + ky) * w + px * patch;
                        let dst = row + (ci * patch + ky) * patch;
                        out[dst..dst + patch].copy_from_slice(&src[src_base..src_base + patch]);
                    }
                }
            }
        }
        let t = Tensor::new(vec![ph * pw, feat], out)?;
        self.push(t, |out| Op::Patchify { a, out, patch })
    }

    /// Mean over all elements; the usual loss head.
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let m = self.bufs[a.0].mean();
        let t = Tensor::scalar(m);
        self.push(t, |out| Op::MeanAll { a, out })
    }

    // ── backward ────────────────────────────────────────────────────

    fn grad_of(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].clone()
    }

    fn accumulate(&mut self, v: Var, add: &[T]) {
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, ai) in g.iter_mut().zip(add) {
                    *gi = *gi + *ai;
                }
            }
            None => self.grads[v.0] = Some(add.to_vec()),
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl Fn(usize) -> T) {
        let n = self.bufs[v.0].numel();
        match &mut self.grads[v.0] {
            Some(g) => {
                for (i, gi) in g.iter_mut().enumerate() {
                    *gi = *gi + f(i);
                }
            }
            None => self.grads[v.0] = Some((0..n).map(f).collect()),
        }
    }

    fn ensure_grad(&mut self, v: Var) -> &mut Vec<T> {
        let n = self.bufs[v.0].numel();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    /// Run reverse accumulation from a scalar loss (seeded with 1).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.bufs[loss.0].numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.bufs[loss.0].shape()
            )));
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..self.ops.len()).rev() {
            self.backward_op(idx)?;
        }
        if self.check_finite {
            for (g, b) in self.grads.iter().zip(&self.bufs) {
                if let Some(g) = g {
                    if !g.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFinite(format!(
                            "gradient of buffer with shape {:?}",
                            b.shape()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn backward_op(&mut self, idx: usize) -> Result<()> {
        // Ops own immutable metadata; buffers/grads live beside them. Taking
        // the op out avoids aliasing &self.ops[idx] against &mut self.grads.
        let op = std::mem::replace(&mut self.ops[idx], Op::MeanAll { a: Var(0), out: Var(0) });
        match &op {
            Op::Add { a, b, out } => {
                if let Some(dy) = self.grad_of(*out) {
                    self.accumulate(*a, &dy);
                    self.accumulate(*b, &dy);
                }
            }
            Op::Sub { a, b, out } => {
                if let Some(dy) = self.grad_of(*out) {
                    self.accumulate(*a, &dy);
                    self.accumulate_with(*b, |i| -dy[i]);
                }
            }
            Op::Mul { a, b, out } => {
                if let Some(dy) = self.grad_of(*out) {
                    let av = self.bufs[a.0].data().to_vec();
                    let bv = self.bufs[b.0].data().to_vec();
                    self.accumulate_with(*a, |i| dy[i] * bv[i]);
                    self.accumulate_with(*b, |i| dy[i] * av[i]);
                }
            }
            Op::Scale { a, c, out } => {
                if let Some(dy) = self.grad_of(*out) {
                    let c = *c;
                    self.accumulate_with(*a, |i| dy[i] * c);
                }
            }
            Op::Exp { a, out } => {
                if let Some(dy) = self.grad_of(*out) {
                    let y = self.bufs[out.0].data().to_vec();
                    self.accumulate_with(*a, |i| dy[i] * y[i]);
                }
            }
            Op::Matmul { a, b, out } => {
                if let Some(dy) = self.grad_of(*out) {
                    let (m, kk) = dims2(&self.bufs[a.0], "")?;
                    let n = self.bufs[b.0].shape()[1];
                    let av = self.bufs[a.0].data().to_vec();
                    let bv = self.bufs[b.0].data().to_vec();
                    // da += dy * b^T
                    k::gemm_a_bt_acc(m, n, kk, &dy, &bv, self.ensure_grad(*a));
                    // db += a^T * dy
                    k::gemm_at_b_acc(kk, m, n, &av, &dy, self.ensure_grad(*b));
                }
            }
            Op::MatmulTB { a, b, out } => {
                if let Some(dy) = self.grad_of(*out) {
                    let (m, kk) = dims2(&self.bufs[a.0], "")?;
                    let n = self.bufs[b.0].shape()[0];
                    let av = self.bufs[a.0].data().to_vec();
                    let bv = self.bufs[b.0].data().to_vec();
                    // da += dy * b
                    k::gemm_acc(m, n, kk, &dy, &bv, self.ensure_grad(*a));
                    // db += dy^T * a
                    k::gemm_at_b_acc(n, m, kk, &dy, &av, self.ensure_grad(*b));
                }
            }
            Op::Transpose2d { a, out } => {
                if let Some(dy) = self.grad_of(*out) {
                    let (m, n) = dims2(&self.bufs[a.0], "")?;
                    // dy has shape [n, m]; transpose back
                    self.accumulate_with(*a, |i| {
                        let r = i / n;
                        let c = i % n;
                        dy[c * m + r]
                    });
                }
            }
            Op::Reshape { a, out } => {
                if let Some(dy) = self.grad_of(*out) {
                    self.accumulate(*a, &dy);
                }
            }
            Op::Conv2d { x, w, b, out, stride, pad, col } => {
                if let Some(dy) = self.grad_of(*out) {
                    let (cin, h, win) = dims3(&self.bufs[x.0], "")?;
                    let ws = self.bufs[w.0].shape().to_vec();
                    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                    let os = self.bufs[out.0].shape().to_vec();
                    let (oh, ow) = (os[1], os[2]);
                    let weight = self.bufs[w.0].data().to_vec();
                    let dx = k::conv2d_backward_input(
                        &dy, &weight, cin, h, win, cout, kh, kw, *stride, *pad, oh, ow,
                    );
                    self.accumulate(*x, &dx);
                    let kdim = cin * kh * kw;
                    {
                        // split borrows: weight grad slot, optional bias grad slot
                        let dw = self.ensure_grad(*w) as *mut Vec<T>;
                        let db = b.map(|bv| self.ensure_grad(bv) as *mut Vec<T>);
                        unsafe {
                            k::conv2d_backward_weight(
                                &dy,
                                col,
                                cout,
                                kdim,
                                oh * ow,
                                &mut *dw,
                                db.map(|p| &mut *p as &mut [T]),
                            );
                        }
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, out, stride, pad } => {
                if let Some(dy) = self.grad_of(*out) {
                    let (cin, h, win) = dims3(&self.bufs[x.0], "")?;
                    let ws = self.bufs[w.0].shape().to_vec();
                    let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
                    let os = self.bufs[out.0].shape().to_vec();
                    let (oh, ow) = (os[1], os[2]);
                    let xv = self.bufs[x.0].data().to_vec();
                    let weight = self.bufs[w.0].data().to_vec();
                    let dx = {
                        let dw = self.ensure_grad(*w) as *mut Vec<T>;
                        let db = b.map(|bv| self.ensure_grad(bv) as *mut Vec<T>);
                        unsafe {
                            k::conv_transpose2d_backward(
                                &dy,
                                &xv,
                                &weight,
                                cin,
                                h,
                                win,
                                cout,
                                kh,
                                kw,
                                *stride,
                                *pad,
                                oh,
                                ow,
                                &mut *dw,
                                db.map(|p| &mut *p as &mut [T]),
                            )?
                        }
                    };
                    self.accumulate(*x, &dx);
                }
            }
            Op::Relu { a, out } => {
                if let Some(dy) = self.grad_of(*out) {
                    let xv = self.bufs[a.0].data().to_vec();
                    self.accumulate_with(*a, |i| {
                        if xv[i] > T::zero() {
                            dy[i]
                        } else {
                            T::zero()
                        }
                    });
                }
            }
            Op::Silu { a, out } => {
                if let Some(dy) = self.grad_of(*out) {
                    let xv = self.bufs[a.0].data().to_vec();
                    self.accumulate_with(*a, |i| dy[i] * k::silu_grad(xv[i]));
                }
            }
            Op::Gelu { a, out } => {
                if let Some(dy) = self.grad_of(*out) {
                    let xv = self.bufs[a.0].data().to_vec();
                    self.accumulate_with(*a, |i| dy[i] * k::gelu_grad(xv[i]));
                }
            }
            Op::GroupNorm { x, gamma, beta, out, groups, stats } => {
                if let Some(dy) = self.grad_of(*out) {
                    let (c, h, w) = dims3(&self.bufs[x.0], "")?;
                    let xv = self.bufs[x.0].data().to_vec();
                    let gv = self.bufs[gamma.0].data().to_vec();
                    let dx = {
                        let dgamma = self.ensure_grad(*gamma) as *mut Vec<T>;
                        let dbeta = self.ensure_grad(*beta) as *mut Vec<T>;
                        unsafe {
                            k::group_norm_backward(
                                &dy,
                                &xv,
                                c,
                                h * w,
                                *groups,
                                &gv,
                                stats,
                                &mut *dgamma,
                                &mut *dbeta,
                            )
                        }
                    };
                    self.accumulate(*x, &dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, out, stats } => {
                if let Some(dy) = self.grad_of(*out) {
                    let (rows, d) = dims2(&self.bufs[x.0], "")?;
                    let xv = self.bufs[x.0].data().to_vec();
                    let gv = self.bufs[gamma.0].data().to_vec();
                    let dx = {
                        let dgamma = self.ensure_grad(*gamma) as *mut Vec<T>;
                        let dbeta = self.ensure_grad(*beta) as *mut Vec<T>;
                        unsafe {
                            k::layer_norm_backward(
                                &dy,
                                &xv,
                                rows,
                                d,
                                &gv,
                                stats,
                                &mut *dgamma,
                                &mut *dbeta,
                            )
                        }
                    };
                    self.accumulate(*x, &dx);
                }
            }
            Op::SoftmaxRows { a, out } => {
                if let Some(dy) = self.grad_of(*out) {
                    let (rows, cols) = dims2(&self.bufs[out.0], "")?;
                    let y = self.bufs[out.0].data().to_vec();
                    let dx = k::softmax_rows_backward(&dy, &y, rows, cols);
                    self.accumulate(*a, &dx);
                }
            }
            Op::SliceCols { a, out, from, to } => {
                if let Some(dy) = self.grad_of(*out) {
                    let (_rows, d) = dims2(&self.bufs[a.0], "")?;
                    let width = *to - *from;
                    let from = *from;
                    self.accumulate_with(*a, |i| {
                        let r = i / d;
                        let c = i % d;
                        if c >= from && c < from + width {
                            dy[r * width + (c - from)]
                        } else {
                            T::zero()
                        }
                    });
                }
            }
            Op::ConcatCols { parts, out } => {
                if let Some(dy) = self.grad_of(*out) {
                    let total = self.bufs[out.0].shape()[1];
                    let mut offset = 0;
                    for p in parts {
                        let (_rows, d) = dims2(&self.bufs[p.0], "")?;
                        let off = offset;
                        self.accumulate_with(*p, |i| {
                            let r = i / d;
                            let c = i % d;
                            dy[r * total + off + c]
                        });
                        offset += d;
                    }
                }
            }
            Op::ConcatRows { parts, out } => {
                if let Some(dy) = self.grad_of(*out) {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.bufs[p.0].numel();
                        self.accumulate(*p, &dy[offset..offset + n]);
                        offset += n;
                    }
                }
            }
            Op::ConcatChannels { a, b, out } => {
                if let Some(dy) = self.grad_of(*out) {
                    let na = self.bufs[a.0].numel();
                    let nb = self.bufs[b.0].numel();
                    self.accumulate(*a, &dy[..na]);
                    self.accumulate(*b, &dy[na..na + nb]);
                }
            }
            Op::AddRowBroadcast { a, b, out } => {
                if let Some(dy) = self.grad_of(*out) {
                    let (rows, d) = dims2(&self.bufs[a.0], "")?;
                    self.accumulate(*a, &dy);
                    self.accumulate_with(*b, |j| {
                        let mut acc = T::zero();
                        for r in 0..rows {
                            acc = acc + dy[r * d + j];
                        }
                        acc
                    });
                }
            }
            Op::AddChanBroadcast { a, b, out } => {
                if let Some(dy) = self.grad_of(*out) {
                    let (_c, h, w) = dims3(&self.bufs[a.0], "")?;
                    let spatial = h * w;
                    self.accumulate(*a, &dy);
                    self.accumulate_with(*b, |ci| {
                        let mut acc = T::zero();
                        for i in 0..spatial {
                            acc = acc + dy[ci * spatial + i];
                        }
                        acc
                    });
                }
            }
            Op::UpsampleNearest { a, out, factor } => {
                if let Some(dy) = self.grad_of(*out) {
                    let (c, h, w) = dims3(&self.bufs[a.0], "")?;
                    let dx = k::upsample_nearest_backward(&dy, c, h, w, *factor);
                    self.accumulate(*a, &dx);
                }
            }
            Op::Patchify { a, out, patch } => {
                if let Some(dy) = self.grad_of(*out) {
                    let (c, h, w) = dims3(&self.bufs[a.0], "")?;
                    let p = *patch;
                    let pw = w / p;
                    let feat = c * p * p;
                    let mut dx = vec![T::zero(); c * h * w];
                    for (i, dv) in dy.iter().enumerate() {
                        let row = i / feat;
                        let f = i % feat;
                        let ci = f / (p * p);
                        let ky = (f / p) % p;
                        let kx = f % p;
                        let py = row / pw;
                        let px = row % pw;
                        dx[ci * h * w + (py * p + ky) * w + px * p + kx] = *dv;
                    }
                    self.accumulate(*a, &dx);
                }
            }
            Op::MeanAll { a, out } => {
                if let Some(dy) = self.grad_of(*out) {
                    let n = self.bufs[a.0].numel();
                    let g = dy[0] / T::from_f64(n as f64);
                    self.accumulate_with(*a, |_| g);
                }
            }
        }
        self.ops[idx] = op;
        Ok(())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::shape(format!("{what}: expected 2-D, got {other:?}"))),
    }
}

fn dims3<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::shape(format!("{what}: expected 3-D, got {other:?}"))),
    }
}
