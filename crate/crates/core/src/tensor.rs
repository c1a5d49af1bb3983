//! Dense row-major f64 tensors (rank 1-4) and the forward/backward kernels
//! shared by the attention generator, the projection head and the backbone.
//!
//! Everything here is a pure function: same inputs, bit-identical outputs.
//! Backward passes are hand-derived; `gradcheck` verifies each one against
//! central finite differences.

use crate::error::{Error, Result};
use rand::Rng;

/// Dense tensor, contiguous f64 storage, row-major with the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        if shape.is_empty() || shape.len() > 4 || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(
                "from_vec",
                format!("rank 1-4 with positive extents required, got {:?}", shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform values in `[lo, hi)` from the caller's RNG.
    pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn ensure_finite(&self, ctx: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(ctx.to_string()))
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// self += other, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// self += s * other, shapes must match.
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "axpy",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Elementwise product, shapes must match.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::shape(
            "hadamard",
            format!("{:?} vs {:?}", a.shape, b.shape),
        ));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Matrix multiplication
// ---------------------------------------------------------------------------

/// c[m x n] += a[m x k] * b[k x n] over raw slices (row-major).
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m x k] += a[m x n] * b[k x n]^T (dot-product form; both rows contiguous).
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += dot(arow, brow);
        }
    }
}

/// c[k x n] += a[m x k]^T * b[m x n].
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C = A * B for rank-2 tensors; inner extents must agree.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape("matmul", "rank-2 operands required"));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} by {}x{}", m, k, k2, n),
        ));
    }
    let mut c = Tensor::zeros(&[m, n]);
    matmul_acc(&a.data, &b.data, &mut c.data, m, k, n);
    Ok(c)
}

/// Gradients of `matmul`: dA = dC * B^T, dB = A^T * dC.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_c: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    if grad_c.shape != [m, n] {
        return Err(Error::shape(
            "matmul_backward",
            format!("grad {:?}, expected [{}, {}]", grad_c.shape, m, n),
        ));
    }
    let mut ga = Tensor::zeros(&[m, k]);
    let mut gb = Tensor::zeros(&[k, n]);
    matmul_nt_acc(&grad_c.data, &b.data, &mut ga.data, m, n, k);
    matmul_tn_acc(&a.data, &grad_c.data, &mut gb.data, m, k, n);
    Ok((ga, gb))
}

// ---------------------------------------------------------------------------
// Row softmax
// ---------------------------------------------------------------------------

/// Row-wise softmax with max subtraction; each output row sums to 1.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    if m.rank() != 2 {
        return Err(Error::shape("softmax_rows", "rank-2 input required"));
    }
    m.ensure_finite("softmax_rows input")?;
    let (r, c) = (m.shape[0], m.shape[1]);
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let row = &m.data[i * c..(i + 1) * c];
        let hi = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let orow = &mut out.data[i * c..(i + 1) * c];
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - hi).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

/// Backward through `softmax_rows` given its output `y`:
/// dX[i,j] = y[i,j] * (g[i,j] - sum_k g[i,k] y[i,k]).
pub fn softmax_rows_backward(y: &Tensor, grad_y: &Tensor) -> Tensor {
    let (r, c) = (y.shape[0], y.shape[1]);
    let mut gx = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let yr = &y.data[i * c..(i + 1) * c];
        let gr = &grad_y.data[i * c..(i + 1) * c];
        let s = dot(yr, gr);
        let xr = &mut gx.data[i * c..(i + 1) * c];
        for j in 0..c {
            xr[j] = yr[j] * (gr[j] - s);
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Temporal 1-D convolution (kernel 3, zero padding 1, channel mixing C -> C)
// ---------------------------------------------------------------------------

pub const CONV1D_KERNEL: usize = 3;

/// x: [T, C], weight: [C, C, 3], bias: [C] -> [T, C].
/// y[t,o] = b[o] + sum_{c,k} w[o,c,k] * x[t+k-1, c]  (zero padded).
pub fn conv1d(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::shape("conv1d", "rank-2 input [T, C] required"));
    }
    let (t_len, c) = (x.shape[0], x.shape[1]);
    if weight.shape != [c, c, CONV1D_KERNEL] || bias.shape != [c] {
        return Err(Error::shape(
            "conv1d",
            format!(
                "weight {:?} / bias {:?} for C={}",
                weight.shape, bias.shape, c
            ),
        ));
    }
    let mut y = Tensor::zeros(&[t_len, c]);
    for t in 0..t_len {
        let yrow = &mut y.data[t * c..(t + 1) * c];
        yrow.copy_from_slice(&bias.data);
        for k in 0..CONV1D_KERNEL {
            let src = t as isize + k as isize - 1;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            let xrow = &x.data[src as usize * c..(src as usize + 1) * c];
            for o in 0..c {
                let wrow = &weight.data[(o * c) * CONV1D_KERNEL..];
                let mut acc = 0.0;
                for (ci, &xv) in xrow.iter().enumerate() {
                    acc += wrow[ci * CONV1D_KERNEL + k] * xv;
                }
                yrow[o] += acc;
            }
        }
    }
    Ok(y)
}

/// Gradients of `conv1d` w.r.t. input, weight and bias.
pub fn conv1d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_y: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (t_len, c) = (x.shape[0], x.shape[1]);
    if grad_y.shape != x.shape {
        return Err(Error::shape("conv1d_backward", "grad shape"));
    }
    let mut gx = Tensor::zeros(&[t_len, c]);
    let mut gw = Tensor::zeros(&[c, c, CONV1D_KERNEL]);
    let mut gb = Tensor::zeros(&[c]);
    for t in 0..t_len {
        let grow = &grad_y.data[t * c..(t + 1) * c];
        for (o, &g) in grow.iter().enumerate() {
            gb.data[o] += g;
        }
        for k in 0..CONV1D_KERNEL {
            let src = t as isize + k as isize - 1;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            let s = src as usize;
            let xrow = &x.data[s * c..(s + 1) * c];
            let gxrow_base = s * c;
            for (o, &g) in grow.iter().enumerate() {
                let wrow = &weight.data[(o * c) * CONV1D_KERNEL..];
                for ci in 0..c {
                    gw.data[(o * c + ci) * CONV1D_KERNEL + k] += g * xrow[ci];
                    gx.data[gxrow_base + ci] += g * wrow[ci * CONV1D_KERNEL + k];
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Mean over H and W: [T, C, H, W] -> [T, C].
pub fn spatial_pool(f: &Tensor) -> Result<Tensor> {
    if f.rank() != 4 {
        return Err(Error::shape("spatial_pool", "rank-4 input required"));
    }
    let (t, c, h, w) = dims4(f);
    let hw = h * w;
    let mut out = Tensor::zeros(&[t, c]);
    for i in 0..t * c {
        let plane = &f.data[i * hw..(i + 1) * hw];
        out.data[i] = plane.iter().sum::<f64>() / hw as f64;
    }
    Ok(out)
}

/// Backward of `spatial_pool`: spreads grad / (H*W) over each plane.
pub fn spatial_pool_backward(grad: &Tensor, h: usize, w: usize) -> Tensor {
    let (t, c) = (grad.shape[0], grad.shape[1]);
    let hw = h * w;
    let mut gx = Tensor::zeros(&[t, c, h, w]);
    for i in 0..t * c {
        let g = grad.data[i] / hw as f64;
        for v in &mut gx.data[i * hw..(i + 1) * hw] {
            *v = g;
        }
    }
    gx
}

/// Mean over the channel axis: [T, C, H, W] -> [T, H, W].
pub fn channel_pool(f: &Tensor) -> Result<Tensor> {
    if f.rank() != 4 {
        return Err(Error::shape("channel_pool", "rank-4 input required"));
    }
    let (t, c, h, w) = dims4(f);
    let hw = h * w;
    let mut out = Tensor::zeros(&[t, h, w]);
    for ti in 0..t {
        let orow = &mut out.data[ti * hw..(ti + 1) * hw];
        for ci in 0..c {
            let plane = &f.data[(ti * c + ci) * hw..(ti * c + ci + 1) * hw];
            for (o, &v) in orow.iter_mut().zip(plane) {
                *o += v;
            }
        }
        for o in orow.iter_mut() {
            *o /= c as f64;
        }
    }
    Ok(out)
}

/// Backward of `channel_pool`: spreads grad / C over the channel axis.
pub fn channel_pool_backward(grad: &Tensor, c: usize) -> Tensor {
    let (t, h, w) = (grad.shape[0], grad.shape[1], grad.shape[2]);
    let hw = h * w;
    let mut gx = Tensor::zeros(&[t, c, h, w]);
    for ti in 0..t {
        let grow = &grad.data[ti * hw..(ti + 1) * hw];
        for ci in 0..c {
            let plane = &mut gx.data[(ti * c + ci) * hw..(ti * c + ci + 1) * hw];
            for (p, &g) in plane.iter_mut().zip(grow) {
                *p = g / c as f64;
            }
        }
    }
    gx
}

/// Temporal pooling mode; mean keeps gradients smooth, max routes to argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Mean,
    Max,
}

/// Pool over the leading time axis: [T, D] -> [D].
pub fn temporal_pool(x: &Tensor, mode: PoolMode) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::shape("temporal_pool", "rank-2 input required"));
    }
    let (t, d) = (x.shape[0], x.shape[1]);
    let mut out = Tensor::zeros(&[d]);
    match mode {
        PoolMode::Mean => {
            for ti in 0..t {
                let row = &x.data[ti * d..(ti + 1) * d];
                for (o, &v) in out.data.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out.scale(1.0 / t as f64);
        }
        PoolMode::Max => {
            out.data.copy_from_slice(&x.data[0..d]);
            for ti in 1..t {
                let row = &x.data[ti * d..(ti + 1) * d];
                for (o, &v) in out.data.iter_mut().zip(row) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward of `temporal_pool`. For max mode, the first argmax row gets the
/// gradient (ties broken by earliest frame, matching forward recomputation).
pub fn temporal_pool_backward(x: &Tensor, grad: &Tensor, mode: PoolMode) -> Tensor {
    let (t, d) = (x.shape[0], x.shape[1]);
    let mut gx = Tensor::zeros(&[t, d]);
    match mode {
        PoolMode::Mean => {
            let s = 1.0 / t as f64;
            for ti in 0..t {
                let row = &mut gx.data[ti * d..(ti + 1) * d];
                for (r, &g) in row.iter_mut().zip(&grad.data) {
                    *r = g * s;
                }
            }
        }
        PoolMode::Max => {
            for j in 0..d {
                let mut best = 0;
                let mut bv = x.data[j];
                for ti in 1..t {
                    let v = x.data[ti * d + j];
                    if v > bv {
                        bv = v;
                        best = ti;
                    }
                }
                gx.data[best * d + j] = grad.data[j];
            }
        }
    }
    gx
}

#[inline]
pub fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    (t.shape[0], t.shape[1], t.shape[2], t.shape[3])
}
