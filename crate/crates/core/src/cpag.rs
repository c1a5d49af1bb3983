//! Cross pixel-wise attention generator.
//!
//! Builds a temporal correlation matrix from spatially pooled, temporally
//! convolved query/key sequences, then maps the channel-pooled input through
//! per-row (H-FC) and per-column (V-FC) separate fully connected layers into
//! an attention map shaped like the next stage's feature map. The decomposed
//! form costs O(t^2 (c + hw)) attention MACs instead of the O(2 t^2 h^2 w^2 c)
//! of dense spatio-temporal self-attention.

use crate::error::{Error, Result};
use crate::instrument::record_cltd_op;
use crate::param::{GradBuffer, ParamId, ParamStore};
use crate::tensor::{
    channel_pool, channel_pool_backward, conv1d, conv1d_backward, dims4, matmul, matmul_backward,
    softmax_rows, softmax_rows_backward, spatial_pool, spatial_pool_backward, Tensor,
};
use rand::Rng;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Static extents: input feature map (C, H, W) and target map (C', H', W').
/// The frame count T is free and checked per call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CpagShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Parameter handles for one attention generator.
#[derive(Debug, Clone)]
pub struct CpagParams {
    pub q_weight: ParamId,
    pub q_bias: ParamId,
    pub k_weight: ParamId,
    pub k_bias: ParamId,
    /// gamma = softplus(gamma_raw) keeps the correlation temperature positive.
    pub gamma_raw: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub shape: CpagShape,
}

impl CpagParams {
    /// Register freshly initialized parameters under `prefix.*`.
    /// Weight scales follow 1/sqrt(fan_in); biases start at zero so that
    /// zero inputs produce zero attention; gamma starts at sqrt(C).
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        shape: CpagShape,
        rng: &mut R,
    ) -> CpagParams {
        let CpagShape {
            c, h, w, h_out, w_out, ..
        } = shape;
        let conv_scale = (1.0 / (3.0 * c as f64)).sqrt();
        let q_weight = store.register(
            format!("{prefix}.q_conv.weight"),
            Tensor::uniform(&[c, c, 3], -conv_scale, conv_scale, rng),
        );
        let q_bias = store.register(format!("{prefix}.q_conv.bias"), Tensor::zeros(&[c]));
        let k_weight = store.register(
            format!("{prefix}.k_conv.weight"),
            Tensor::uniform(&[c, c, 3], -conv_scale, conv_scale, rng),
        );
        let k_bias = store.register(format!("{prefix}.k_conv.bias"), Tensor::zeros(&[c]));
        let gamma_raw = store.register(
            format!("{prefix}.gamma_raw"),
            Tensor::filled(&[1], softplus_inverse((c as f64).sqrt())),
        );
        let h_scale = (1.0 / w as f64).sqrt();
        let w_h = store.register(
            format!("{prefix}.w_h"),
            Tensor::uniform(&[h, w, w_out], -h_scale, h_scale, rng),
        );
        let b_h = store.register(format!("{prefix}.b_h"), Tensor::zeros(&[h, w_out]));
        let v_scale = (1.0 / h as f64).sqrt();
        let w_v = store.register(
            format!("{prefix}.w_v"),
            Tensor::uniform(&[w_out, h, h_out], -v_scale, v_scale, rng),
        );
        let b_v = store.register(format!("{prefix}.b_v"), Tensor::zeros(&[w_out, h_out]));
        CpagParams {
            q_weight,
            q_bias,
            k_weight,
            k_bias,
            gamma_raw,
            w_h,
            b_h,
            w_v,
            b_v,
            shape,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.q_weight,
            self.q_bias,
            self.k_weight,
            self.k_bias,
            self.gamma_raw,
            self.w_h,
            self.b_h,
            self.w_v,
            self.b_v,
        ]
    }

    pub fn gamma(&self, store: &ParamStore) -> f64 {
        softplus(store.value(self.gamma_raw).data()[0])
    }
}

/// Exact multiply-accumulate counts recorded by the forward kernels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CpagMacs {
    /// Q K^T correlation matmul.
    pub qk: u64,
    /// M_c V temporal mixing matmul.
    pub mix: u64,
    /// Q/K temporal convolutions.
    pub conv: u64,
    pub h_fc: u64,
    pub v_fc: u64,
}

impl CpagMacs {
    /// MACs of the two attention matmuls, the quantity the t^2(c+hw) law
    /// describes.
    pub fn attention(&self) -> u64 {
        self.qk + self.mix
    }

    pub fn total(&self) -> u64 {
        self.qk + self.mix + self.conv + self.h_fc + self.v_fc
    }
}

/// Saved intermediates for one forward pass.
pub struct CpagCtx {
    pub pooled_sp: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub logits: Tensor,
    pub m_c: Tensor,
    pub gamma: f64,
    pub pooled_ch: Tensor,
    pub v: Tensor,
    pub mixed_t: Tensor,
    pub macs: CpagMacs,
}

pub struct TemporalCorrCtx {
    pub pooled_sp: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub logits: Tensor,
    pub m_c: Tensor,
    pub gamma: f64,
    pub macs: CpagMacs,
}

fn check_input(f: &Tensor, shape: &CpagShape) -> Result<(usize, usize, usize, usize)> {
    if f.rank() != 4 {
        return Err(Error::shape("cpag", "rank-4 feature map required"));
    }
    let (t, c, h, w) = dims4(f);
    if (c, h, w) != (shape.c, shape.h, shape.w) {
        return Err(Error::shape(
            "cpag",
            format!(
                "input {:?} does not match declared (C,H,W)=({},{},{})",
                f.shape(),
                shape.c,
                shape.h,
                shape.w
            ),
        ));
    }
    Ok((t, c, h, w))
}

/// Row-stochastic temporal correlation matrix M_c in R^{T x T}.
pub fn temporal_correlation(
    f: &Tensor,
    store: &ParamStore,
    params: &CpagParams,
) -> Result<(Tensor, TemporalCorrCtx)> {
    record_cltd_op();
    let (t, c, _, _) = check_input(f, &params.shape)?;
    let gamma = params.gamma(store);
    if gamma <= 0.0 {
        return Err(Error::InvalidParam(format!(
            "correlation temperature gamma must be positive, got {gamma}"
        )));
    }
    let pooled = spatial_pool(f)?;
    let q = conv1d(
        &pooled,
        store.value(params.q_weight),
        store.value(params.q_bias),
    )?;
    let k = conv1d(
        &pooled,
        store.value(params.k_weight),
        store.value(params.k_bias),
    )?;
    // logits = Q K^T / gamma
    let mut logits = Tensor::zeros(&[t, t]);
    crate::tensor::matmul_nt_acc(q.data(), k.data(), logits.data_mut(), t, c, t);
    logits.scale(1.0 / gamma);
    let m_c = softmax_rows(&logits)?;
    let macs = CpagMacs {
        qk: (t * t * c) as u64,
        conv: 2 * conv1d_macs(t, c),
        ..CpagMacs::default()
    };
    Ok((
        m_c.clone(),
        TemporalCorrCtx {
            pooled_sp: pooled,
            q,
            k,
            logits,
            m_c,
            gamma,
            macs,
        },
    ))
}

fn conv1d_macs(t: usize, c: usize) -> u64 {
    // kernel 3, zero pad 1: interior frames see 3 taps, the two edges 2.
    let taps = if t >= 2 { 3 * t - 2 } else { 1 };
    (taps * c * c) as u64
}

/// Per-row FC: out[t,h,:] = in[t,h,:] * w[h] + b[h].
/// in: [T,H,W], w: [H,W,W'], b: [H,W'] -> [T,H,W'].
pub fn horizontal_fc(v_in: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if v_in.rank() != 3 || w.rank() != 3 {
        return Err(Error::shape("horizontal_fc", "rank-3 input and weights"));
    }
    let (t, h, win) = (v_in.shape()[0], v_in.shape()[1], v_in.shape()[2]);
    let (hw, wi, wo) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if hw != h || wi != win || b.shape() != [h, wo] {
        return Err(Error::shape(
            "horizontal_fc",
            format!("in {:?} w {:?} b {:?}", v_in.shape(), w.shape(), b.shape()),
        ));
    }
    let mut out = Tensor::zeros(&[t, h, wo]);
    for ti in 0..t {
        for hi in 0..h {
            let row = &v_in.data()[(ti * h + hi) * win..(ti * h + hi + 1) * win];
            let orow = &mut out.data_mut()[(ti * h + hi) * wo..(ti * h + hi + 1) * wo];
            orow.copy_from_slice(&b.data()[hi * wo..(hi + 1) * wo]);
            crate::tensor::matmul_acc(row, &w.data()[hi * win * wo..(hi + 1) * win * wo], orow, 1, win, wo);
        }
    }
    Ok(out)
}

/// Gradients of [`horizontal_fc`]; returns grad for the input, accumulates
/// weight/bias grads into the provided tensors.
pub fn horizontal_fc_backward(
    v_in: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    grad_w: &mut Tensor,
    grad_b: &mut Tensor,
) -> Result<Tensor> {
    let (t, h, win) = (v_in.shape()[0], v_in.shape()[1], v_in.shape()[2]);
    let wo = w.shape()[2];
    if grad_out.shape() != [t, h, wo] {
        return Err(Error::shape("horizontal_fc_backward", "grad shape"));
    }
    let mut gin = Tensor::zeros(&[t, h, win]);
    for ti in 0..t {
        for hi in 0..h {
            let g = &grad_out.data()[(ti * h + hi) * wo..(ti * h + hi + 1) * wo];
            let x = &v_in.data()[(ti * h + hi) * win..(ti * h + hi + 1) * win];
            let wmat = &w.data()[hi * win * wo..(hi + 1) * win * wo];
            // d in = g * w^T
            crate::tensor::matmul_nt_acc(
                g,
                wmat,
                &mut gin.data_mut()[(ti * h + hi) * win..(ti * h + hi + 1) * win],
                1,
                wo,
                win,
            );
            // d w[h] += x^T g ; d b[h] += g
            crate::tensor::matmul_tn_acc(
                x,
                g,
                &mut grad_w.data_mut()[hi * win * wo..(hi + 1) * win * wo],
                1,
                win,
                wo,
            );
            for (bg, gv) in grad_b.data_mut()[hi * wo..(hi + 1) * wo].iter_mut().zip(g) {
                *bg += gv;
            }
        }
    }
    Ok(gin)
}

/// Per-column FC: out[t,w,:] = in[t,w,:] * w[w] + b[w].
/// in: [T,W',H], w: [W',H,H'], b: [W',H'] -> [T,W',H'].
pub fn vertical_fc(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 || w.rank() != 3 {
        return Err(Error::shape("vertical_fc", "rank-3 input and weights"));
    }
    let (t, wn, hin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ww, wi, ho) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if ww != wn || wi != hin || b.shape() != [wn, ho] {
        return Err(Error::shape(
            "vertical_fc",
            format!("in {:?} w {:?} b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let mut out = Tensor::zeros(&[t, wn, ho]);
    for ti in 0..t {
        for wj in 0..wn {
            let row = &x.data()[(ti * wn + wj) * hin..(ti * wn + wj + 1) * hin];
            let orow = &mut out.data_mut()[(ti * wn + wj) * ho..(ti * wn + wj + 1) * ho];
            orow.copy_from_slice(&b.data()[wj * ho..(wj + 1) * ho]);
            crate::tensor::matmul_acc(row, &w.data()[wj * hin * ho..(wj + 1) * hin * ho], orow, 1, hin, ho);
        }
    }
    Ok(out)
}

pub fn vertical_fc_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    grad_w: &mut Tensor,
    grad_b: &mut Tensor,
) -> Result<Tensor> {
    let (t, wn, hin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = w.shape()[2];
    if grad_out.shape() != [t, wn, ho] {
        return Err(Error::shape("vertical_fc_backward", "grad shape"));
    }
    let mut gin = Tensor::zeros(&[t, wn, hin]);
    for ti in 0..t {
        for wj in 0..wn {
            let g = &grad_out.data()[(ti * wn + wj) * ho..(ti * wn + wj + 1) * ho];
            let xr = &x.data()[(ti * wn + wj) * hin..(ti * wn + wj + 1) * hin];
            let wmat = &w.data()[wj * hin * ho..(wj + 1) * hin * ho];
            crate::tensor::matmul_nt_acc(
                g,
                wmat,
                &mut gin.data_mut()[(ti * wn + wj) * hin..(ti * wn + wj + 1) * hin],
                1,
                ho,
                hin,
            );
            crate::tensor::matmul_tn_acc(
                xr,
                g,
                &mut grad_w.data_mut()[wj * hin * ho..(wj + 1) * hin * ho],
                1,
                hin,
                ho,
            );
            for (bg, gv) in grad_b.data_mut()[wj * ho..(wj + 1) * ho].iter_mut().zip(g) {
                *bg += gv;
            }
        }
    }
    Ok(gin)
}

/// Transpose the trailing two axes of a [T, A, B] tensor.
fn transpose_frames(x: &Tensor) -> Tensor {
    let (t, a, b) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[t, b, a]);
    for ti in 0..t {
        for ai in 0..a {
            for bi in 0..b {
                out.data_mut()[(ti * b + bi) * a + ai] = x.data()[(ti * a + ai) * b + bi];
            }
        }
    }
    out
}

/// Attention map shaped like the target feature map; all C' slices of a frame
/// are identical by construction (channel repeat). Values are unbounded.
pub fn generate_attention(
    f: &Tensor,
    target: (usize, usize, usize, usize),
    store: &ParamStore,
    params: &CpagParams,
) -> Result<(Tensor, CpagCtx)> {
    let (t, _, h, _) = check_input(f, &params.shape)?;
    let (tt, c_out, h_out, w_out) = target;
    let sh = &params.shape;
    if tt != t {
        return Err(Error::shape(
            "generate_attention",
            format!("frame count {t} vs target {tt}"),
        ));
    }
    if (c_out, h_out, w_out) != (sh.c_out, sh.h_out, sh.w_out) {
        return Err(Error::shape(
            "generate_attention",
            format!(
                "target ({c_out},{h_out},{w_out}) does not match declared ({},{},{})",
                sh.c_out, sh.h_out, sh.w_out
            ),
        ));
    }
    let (m_c, tc) = temporal_correlation(f, store, params)?;
    let pooled_ch = channel_pool(f)?;
    let v = horizontal_fc(&pooled_ch, store.value(params.w_h), store.value(params.b_h))?;
    // Temporal mixing: rows of M_c blend whole V frames.
    let v_flat = v.clone().reshape(&[t, h * w_out])?;
    let mixed = matmul(&m_c, &v_flat)?.reshape(&[t, h, w_out])?;
    let mixed_t = transpose_frames(&mixed); // [T, W', H]
    let o = vertical_fc(&mixed_t, store.value(params.w_v), store.value(params.b_v))?; // [T, W', H']
    let o_t = transpose_frames(&o); // [T, H', W']
    // Channel repeat.
    let hw_out = h_out * w_out;
    let mut a = Tensor::zeros(&[t, c_out, h_out, w_out]);
    for ti in 0..t {
        let frame = &o_t.data()[ti * hw_out..(ti + 1) * hw_out];
        for ci in 0..c_out {
            a.data_mut()[(ti * c_out + ci) * hw_out..(ti * c_out + ci + 1) * hw_out]
                .copy_from_slice(frame);
        }
    }
    let mut macs = tc.macs;
    macs.mix = (t * t * h * w_out) as u64;
    macs.h_fc = (t * h * sh.w * w_out) as u64;
    macs.v_fc = (t * w_out * h * h_out) as u64;
    let ctx = CpagCtx {
        pooled_sp: tc.pooled_sp,
        q: tc.q,
        k: tc.k,
        logits: tc.logits,
        m_c,
        gamma: tc.gamma,
        pooled_ch,
        v,
        mixed_t,
        macs,
    };
    Ok((a, ctx))
}

/// Backward of [`generate_attention`]; accumulates parameter grads into
/// `sink` and returns the gradient w.r.t. the input feature map.
pub fn generate_attention_backward(
    grad_a: &Tensor,
    f: &Tensor,
    store: &ParamStore,
    params: &CpagParams,
    ctx: &CpagCtx,
    sink: &mut GradBuffer,
) -> Result<Tensor> {
    record_cltd_op();
    let (t, c, h, w) = dims4(f);
    let sh = &params.shape;
    let (c_out, h_out, w_out) = (sh.c_out, sh.h_out, sh.w_out);
    let hw_out = h_out * w_out;
    // Undo channel repeat: sum over C'.
    let mut g_frame = Tensor::zeros(&[t, h_out, w_out]);
    for ti in 0..t {
        let dst = &mut g_frame.data_mut()[ti * hw_out..(ti + 1) * hw_out];
        for ci in 0..c_out {
            let src = &grad_a.data()[(ti * c_out + ci) * hw_out..(ti * c_out + ci + 1) * hw_out];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let g_o = transpose_frames(&g_frame); // [T, W', H']
    let mut g_wv = Tensor::zeros(store.value(params.w_v).shape());
    let mut g_bv = Tensor::zeros(store.value(params.b_v).shape());
    let g_mixed_t =
        vertical_fc_backward(&ctx.mixed_t, store.value(params.w_v), &g_o, &mut g_wv, &mut g_bv)?;
    sink.add(params.w_v, &g_wv);
    sink.add(params.b_v, &g_bv);
    let g_mixed = transpose_frames(&g_mixed_t); // [T, H, W']
    // Mixing backward: d M_c = g R^T-style, d V = M_c^T g.
    let g_mixed_flat = g_mixed.reshape(&[t, h * w_out])?;
    let v_flat = ctx.v.clone().reshape(&[t, h * w_out])?;
    let (g_mc, g_vflat) = matmul_backward(&ctx.m_c, &v_flat, &g_mixed_flat)?;
    let g_v = g_vflat.reshape(&[t, h, w_out])?;
    let mut g_wh = Tensor::zeros(store.value(params.w_h).shape());
    let mut g_bh = Tensor::zeros(store.value(params.b_h).shape());
    let g_pooled_ch =
        horizontal_fc_backward(&ctx.pooled_ch, store.value(params.w_h), &g_v, &mut g_wh, &mut g_bh)?;
    sink.add(params.w_h, &g_wh);
    sink.add(params.b_h, &g_bh);
    let mut g_f = channel_pool_backward(&g_pooled_ch, c);

    // Correlation path.
    let g_logits = softmax_rows_backward(&ctx.m_c, &g_mc);
    // gamma enters as logits = S / gamma.
    let d_gamma = -crate::tensor::dot(g_logits.data(), ctx.logits.data()) / ctx.gamma;
    let raw = store.value(params.gamma_raw).data()[0];
    sink.grad_mut(params.gamma_raw).data_mut()[0] += d_gamma * sigmoid(raw);
    // d Q = (g_logits / gamma) K ; d K = (g_logits^T / gamma) Q.
    let mut g_q = Tensor::zeros(&[t, c]);
    let mut g_k = Tensor::zeros(&[t, c]);
    let mut scaled = g_logits.clone();
    scaled.scale(1.0 / ctx.gamma);
    crate::tensor::matmul_acc(scaled.data(), ctx.k.data(), g_q.data_mut(), t, t, c);
    crate::tensor::matmul_tn_acc(scaled.data(), ctx.q.data(), g_k.data_mut(), t, t, c);
    let (g_sp_q, g_qw, g_qb) = conv1d_backward(&ctx.pooled_sp, store.value(params.q_weight), &g_q)?;
    let (g_sp_k, g_kw, g_kb) = conv1d_backward(&ctx.pooled_sp, store.value(params.k_weight), &g_k)?;
    sink.add(params.q_weight, &g_qw);
    sink.add(params.q_bias, &g_qb);
    sink.add(params.k_weight, &g_kw);
    sink.add(params.k_bias, &g_kb);
    let mut g_sp = g_sp_q;
    g_sp.add_assign(&g_sp_k)?;
    g_f.add_assign(&spatial_pool_backward(&g_sp, h, w))?;
    Ok(g_f)
}

// ---------------------------------------------------------------------------
// Complexity formulas
// ---------------------------------------------------------------------------

/// Leading-order MAC count of dense spatio-temporal self-attention on a
/// t x c x h x w map: 2 t^2 h^2 w^2 c (scores plus aggregation).
pub fn naive_attention_flops(t: usize, c: usize, h: usize, w: usize) -> u64 {
    let n = (t * h * w) as u64;
    2 * n * n * c as u64
}

/// Leading-order MAC count of the decomposed attention: t^2 (c + h w).
pub fn cpag_formula_flops(t: usize, c: usize, h: usize, w: usize) -> u64 {
    let t2 = (t * t) as u64;
    t2 * (c + h * w) as u64
}

/// Exact attention-kernel MACs this implementation performs for the given
/// extents: the Q K^T matmul plus the M_c V mixing.
pub fn cpag_attention_macs(t: usize, c: usize, h: usize, w_out: usize) -> u64 {
    let t2 = (t * t) as u64;
    t2 * c as u64 + t2 * (h * w_out) as u64
}
