//! Fourier projection head.
//!
//! Per frame and channel the input map goes through a centered 2-D FFT; real
//! and imaginary stacks are concatenated along the channel axis, the centered
//! k x k low-frequency window is cropped and passed through a sigmoid, the
//! channel axis is projected 2C -> 2C_o by a weight shared across spectral
//! positions, and frames are pooled over time. The result is a flat vector of
//! length 2 * C_o * k^2, independent of the spatial extents of the input.

use crate::error::{Error, Result};
use crate::fft::{Fft2d, Fft2dScratch};
use crate::instrument::record_cltd_op;
use crate::param::{GradBuffer, ParamId, ParamStore};
use crate::tensor::{
    dims4, hadamard, matmul_acc, matmul_nt_acc, matmul_tn_acc, temporal_pool,
    temporal_pool_backward, PoolMode, Tensor,
};
use rand::Rng;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Projection head parameters; the window size k must be odd and fit inside
/// every feature map handed to [`fph_forward`].
#[derive(Debug, Clone)]
pub struct FphParams {
    pub w_p: ParamId,
    pub b_p: ParamId,
    pub k: usize,
    pub c_o: usize,
    pub c_in: usize,
    pub pool: PoolMode,
}

/// Length of the projected spectral feature: 2 * C_o * k^2.
pub fn feature_len(c_o: usize, k: usize) -> usize {
    2 * c_o * k * k
}

impl FphParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_o: usize,
        k: usize,
        pool: PoolMode,
        rng: &mut R,
    ) -> Result<FphParams> {
        if k % 2 == 0 || k == 0 {
            return Err(Error::InvalidParam(format!(
                "window size k must be odd, got {k}"
            )));
        }
        if c_o == 0 {
            return Err(Error::InvalidParam("C_o must be at least 1".into()));
        }
        let scale = (1.0 / (2.0 * c_in as f64)).sqrt();
        let w_p = store.register(
            format!("{prefix}.w_p"),
            Tensor::uniform(&[2 * c_in, 2 * c_o], -scale, scale, rng),
        );
        let b_p = store.register(format!("{prefix}.b_p"), Tensor::zeros(&[2 * c_o]));
        Ok(FphParams {
            w_p,
            b_p,
            k,
            c_o,
            c_in,
            pool,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w_p, self.b_p]
    }
}

/// Elementwise attention application: a .* f, identical shapes.
pub fn apply_attention(a: &Tensor, f_next: &Tensor) -> Result<Tensor> {
    if a.shape() != f_next.shape() {
        return Err(Error::shape(
            "apply_attention",
            format!("{:?} vs {:?}", a.shape(), f_next.shape()),
        ));
    }
    hadamard(a, f_next)
}

/// Start row/column of the centered k x k crop under the floor convention.
pub fn crop_origin(h: usize, w: usize, k: usize) -> (usize, usize) {
    ((h - k) / 2, (w - k) / 2)
}

/// Centered low-frequency window with sigmoid: [T, 2C, H, W] -> [T, 2C, k, k].
/// Expects the zero-frequency bin already shifted to (floor(H/2), floor(W/2)).
pub fn low_freq_select(spec: &Tensor, k: usize) -> Result<Tensor> {
    if spec.rank() != 4 {
        return Err(Error::shape("low_freq_select", "rank-4 spectrum required"));
    }
    let (t, c2, h, w) = dims4(spec);
    if k > h || k > w {
        return Err(Error::InvalidParam(format!(
            "window {k} exceeds spectrum extents {h}x{w}"
        )));
    }
    let (r0, c0) = crop_origin(h, w, k);
    let mut out = Tensor::zeros(&[t, c2, k, k]);
    for tc in 0..t * c2 {
        let plane = &spec.data()[tc * h * w..(tc + 1) * h * w];
        let dst = &mut out.data_mut()[tc * k * k..(tc + 1) * k * k];
        for i in 0..k {
            for j in 0..k {
                dst[i * k + j] = sigmoid(plane[(r0 + i) * w + (c0 + j)]);
            }
        }
    }
    Ok(out)
}

/// Forward intermediates needed for the backward pass and for spectrum-level
/// assertions.
pub struct FphCtx {
    /// Pre-sigmoid cropped concatenated spectrum, [T, 2C, k, k].
    pub crop_pre: Tensor,
    /// Sigmoid outputs, same shape.
    pub gated: Tensor,
    /// Projected frames before temporal pooling, [T, 2*C_o*k^2].
    pub projected: Tensor,
}

/// Project a feature map into the flat spectral feature of length
/// 2 * C_o * k^2.
pub fn fph_forward(x: &Tensor, store: &ParamStore, params: &FphParams) -> Result<(Tensor, FphCtx)> {
    record_cltd_op();
    if x.rank() != 4 {
        return Err(Error::shape("fph_forward", "rank-4 input required"));
    }
    x.ensure_finite("fph input")?;
    let (t, c, h, w) = dims4(x);
    if c != params.c_in {
        return Err(Error::shape(
            "fph_forward",
            format!("input C={c}, params expect {}", params.c_in),
        ));
    }
    let k = params.k;
    if k > h || k > w {
        return Err(Error::InvalidParam(format!(
            "window {k} exceeds feature extents {h}x{w}"
        )));
    }
    let plan = Fft2d::new(h, w);
    let mut scratch = Fft2dScratch::new(&plan);
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    let (r0, c0) = crop_origin(h, w, k);
    let c2 = 2 * c;
    let kk = k * k;
    let mut crop_pre = Tensor::zeros(&[t, c2, k, k]);
    for ti in 0..t {
        for ci in 0..c {
            let plane = &x.data()[(ti * c + ci) * h * w..(ti * c + ci + 1) * h * w];
            plan.forward_real(plane, &mut re, &mut im, &mut scratch, true);
            let dst_re = (ti * c2 + ci) * kk;
            let dst_im = (ti * c2 + c + ci) * kk;
            for i in 0..k {
                for j in 0..k {
                    crop_pre.data_mut()[dst_re + i * k + j] = re[(r0 + i) * w + (c0 + j)];
                    crop_pre.data_mut()[dst_im + i * k + j] = im[(r0 + i) * w + (c0 + j)];
                }
            }
        }
    }
    let mut gated = crop_pre.clone();
    for v in gated.data_mut() {
        *v = sigmoid(*v);
    }
    // Channel projection shared across the k^2 spectral positions:
    // projected[t] = W_P^T * gated[t]  with gated[t] viewed as [2C, k^2].
    let w_p = store.value(params.w_p);
    let b_p = store.value(params.b_p);
    let co2 = 2 * params.c_o;
    let mut projected = Tensor::zeros(&[t, co2 * kk]);
    for ti in 0..t {
        let src = &gated.data()[ti * c2 * kk..(ti + 1) * c2 * kk];
        let dst = &mut projected.data_mut()[ti * co2 * kk..(ti + 1) * co2 * kk];
        matmul_tn_acc(w_p.data(), src, dst, c2, co2, kk);
        for oc in 0..co2 {
            let bias = b_p.data()[oc];
            for v in &mut dst[oc * kk..(oc + 1) * kk] {
                *v += bias;
            }
        }
    }
    let feature = temporal_pool(&projected, params.pool)?;
    Ok((
        feature,
        FphCtx {
            crop_pre,
            gated,
            projected,
        },
    ))
}

/// Backward of [`fph_forward`]; accumulates W_P/bias grads into `sink` and
/// returns the gradient w.r.t. the input map.
pub fn fph_backward(
    grad_feature: &Tensor,
    x: &Tensor,
    store: &ParamStore,
    params: &FphParams,
    ctx: &FphCtx,
    sink: &mut GradBuffer,
) -> Result<Tensor> {
    record_cltd_op();
    let (t, c, h, w) = dims4(x);
    let k = params.k;
    let kk = k * k;
    let c2 = 2 * c;
    let co2 = 2 * params.c_o;
    let g_projected = temporal_pool_backward(&ctx.projected, grad_feature, params.pool);
    let w_p = store.value(params.w_p);
    let mut g_wp = Tensor::zeros(w_p.shape());
    let mut g_bp = Tensor::zeros(&[co2]);
    let mut g_gated = Tensor::zeros(&[t, c2, k, k]);
    for ti in 0..t {
        let g_dst = &g_projected.data()[ti * co2 * kk..(ti + 1) * co2 * kk];
        let src = &ctx.gated.data()[ti * c2 * kk..(ti + 1) * c2 * kk];
        // d gated[t] = W_P * g[t]   ([2C, 2C_o] x [2C_o, k^2])
        matmul_acc(
            w_p.data(),
            g_dst,
            &mut g_gated.data_mut()[ti * c2 * kk..(ti + 1) * c2 * kk],
            c2,
            co2,
            kk,
        );
        // d W_P += gated[t] * g[t]^T  ([2C, k^2] x [k^2, 2C_o])
        matmul_nt_acc(src, g_dst, g_wp.data_mut(), c2, kk, co2);
        for oc in 0..co2 {
            g_bp.data_mut()[oc] += g_dst[oc * kk..(oc + 1) * kk].iter().sum::<f64>();
        }
    }
    sink.add(params.w_p, &g_wp);
    sink.add(params.b_p, &g_bp);
    // Sigmoid gate.
    for (g, &s) in g_gated.data_mut().iter_mut().zip(ctx.gated.data()) {
        *g *= s * (1.0 - s);
    }
    // Spread crop grads into full planes and push through the DFT.
    let plan = Fft2d::new(h, w);
    let mut scratch = Fft2dScratch::new(&plan);
    let (r0, c0) = crop_origin(h, w, k);
    let mut g_re = vec![0.0; h * w];
    let mut g_im = vec![0.0; h * w];
    let mut g_plane = vec![0.0; h * w];
    let mut g_x = Tensor::zeros(&[t, c, h, w]);
    for ti in 0..t {
        for ci in 0..c {
            g_re.iter_mut().for_each(|v| *v = 0.0);
            g_im.iter_mut().for_each(|v| *v = 0.0);
            let src_re = (ti * c2 + ci) * kk;
            let src_im = (ti * c2 + c + ci) * kk;
            for i in 0..k {
                for j in 0..k {
                    g_re[(r0 + i) * w + (c0 + j)] = g_gated.data()[src_re + i * k + j];
                    g_im[(r0 + i) * w + (c0 + j)] = g_gated.data()[src_im + i * k + j];
                }
            }
            plan.input_grad(&g_re, &g_im, &mut g_plane, &mut scratch, true);
            g_x.data_mut()[(ti * c + ci) * h * w..(ti * c + ci + 1) * h * w]
                .copy_from_slice(&g_plane);
        }
    }
    Ok(g_x)
}
