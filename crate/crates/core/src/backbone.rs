//! Toy staged backbone: per-frame 3x3 convolution + leaky ReLU per stage,
//! optional 2x mean-pool downsample (applied before the convolution), and a
//! linear embedding head over spatially and temporally pooled features.
//!
//! The backbone is the whole inference path; training stages hook onto the
//! intermediate maps but never run during evaluation.

use crate::error::{Error, Result};
use crate::param::{GradBuffer, ParamId, ParamStore};
use crate::tensor::{
    dims4, spatial_pool, spatial_pool_backward, temporal_pool, temporal_pool_backward, PoolMode,
    Tensor,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Channel widths along the stage chain, input first: 1 -> 32 -> 64 -> 128.
    pub widths: Vec<usize>,
    /// Per-stage 2x downsample flags (applied to the stage input).
    pub downsample: Vec<bool>,
    pub embedding_dim: usize,
    /// How many leading stages carry a training hook.
    pub cltd_stages: usize,
}

impl Default for BackboneConfig {
    fn default() -> BackboneConfig {
        BackboneConfig {
            widths: vec![1, 32, 64, 128],
            downsample: vec![false, true, true],
            embedding_dim: 128,
            cltd_stages: 3,
        }
    }
}

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages() < 1 {
            return Err(Error::Validation("backbone needs at least one stage".into()));
        }
        if self.downsample.len() != self.stages() {
            return Err(Error::Validation(format!(
                "downsample flags ({}) must match stage count ({})",
                self.downsample.len(),
                self.stages()
            )));
        }
        if self.cltd_stages > self.stages() {
            return Err(Error::Validation(format!(
                "cltd stage count {} exceeds backbone stages {}",
                self.cltd_stages,
                self.stages()
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Validation("embedding dim must be positive".into()));
        }
        Ok(())
    }

    /// (C, H, W) of every map f_1..f_{S+1} for the given input extents.
    pub fn map_shapes(&self, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        let mut shapes = vec![(self.widths[0], h, w)];
        let (mut ch, mut cw) = (h, w);
        for s in 0..self.stages() {
            if self.downsample[s] {
                ch /= 2;
                cw /= 2;
            }
            shapes.push((self.widths[s + 1], ch, cw));
        }
        shapes
    }
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub conv_w: Vec<ParamId>,
    pub conv_b: Vec<ParamId>,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub config: BackboneConfig,
}

impl BackboneParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        config: &BackboneConfig,
        rng: &mut R,
    ) -> Result<BackboneParams> {
        config.validate()?;
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        for s in 0..config.stages() {
            let (cin, cout) = (config.widths[s], config.widths[s + 1]);
            let scale = (1.0 / (9.0 * cin as f64)).sqrt();
            conv_w.push(store.register(
                format!("backbone.stage{}.conv.weight", s + 1),
                Tensor::uniform(&[cout, cin, 3, 3], -scale, scale, rng),
            ));
            conv_b.push(store.register(
                format!("backbone.stage{}.conv.bias", s + 1),
                Tensor::zeros(&[cout]),
            ));
        }
        let c_last = *config.widths.last().unwrap();
        let scale = (1.0 / c_last as f64).sqrt();
        let embed_w = store.register(
            "backbone.embed.weight",
            Tensor::uniform(&[c_last, config.embedding_dim], -scale, scale, rng),
        );
        let embed_b = store.register(
            "backbone.embed.bias",
            Tensor::zeros(&[config.embedding_dim]),
        );
        Ok(BackboneParams {
            conv_w,
            conv_b,
            embed_w,
            embed_b,
            config: config.clone(),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.conv_w.clone();
        ids.extend(self.conv_b.iter().copied());
        ids.push(self.embed_w);
        ids.push(self.embed_b);
        ids
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// Per-frame 3x3 convolution, zero padding 1, stride 1.
/// x: [T, Cin, H, W], w: [Cout, Cin, 3, 3], b: [Cout] -> [T, Cout, H, W].
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (t, cin, h, wd) = dims4(x);
    let cout = w.shape()[0];
    if w.shape() != [cout, cin, 3, 3] || b.shape() != [cout] {
        return Err(Error::shape("conv2d", format!("weight {:?}", w.shape())));
    }
    let mut y = Tensor::zeros(&[t, cout, h, wd]);
    let hw = h * wd;
    let xd = x.data();
    let wdat = w.data();
    let yd = y.data_mut();
    for ti in 0..t {
        for o in 0..cout {
            let y_plane = (ti * cout + o) * hw;
            let bias = b.data()[o];
            for v in &mut yd[y_plane..y_plane + hw] {
                *v = bias;
            }
            for ci in 0..cin {
                let x_plane = (ti * cin + ci) * hw;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let wv = wdat[((o * cin + ci) * 3 + ky) * 3 + kx];
                        let dy = ky as isize - 1;
                        let dx = kx as isize - 1;
                        let i_lo = (-dy).max(0) as usize;
                        let i_hi = (h as isize - dy).min(h as isize) as usize;
                        let j_lo = (-dx).max(0) as usize;
                        let j_hi = (wd as isize - dx).min(wd as isize) as usize;
                        for i in i_lo..i_hi {
                            let src = x_plane + (i as isize + dy) as usize * wd;
                            let dst = y_plane + i * wd;
                            let x_off = (src as isize + dx + j_lo as isize) as usize;
                            let xs = &xd[x_off..x_off + (j_hi - j_lo)];
                            let ys = &mut yd[dst + j_lo..dst + j_hi];
                            for (yv, xv) in ys.iter_mut().zip(xs) {
                                *yv += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of [`conv2d`] w.r.t. input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_y: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (t, cin, h, wd) = dims4(x);
    let cout = w.shape()[0];
    if grad_y.shape() != [t, cout, h, wd] {
        return Err(Error::shape("conv2d_backward", "grad shape"));
    }
    let hw = h * wd;
    let mut gx = Tensor::zeros(&[t, cin, h, wd]);
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[cout]);
    for ti in 0..t {
        for o in 0..cout {
            let g_plane = (ti * cout + o) * hw;
            gb.data_mut()[o] += grad_y.data()[g_plane..g_plane + hw].iter().sum::<f64>();
            for ci in 0..cin {
                let x_plane = (ti * cin + ci) * hw;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let dy = ky as isize - 1;
                        let dx = kx as isize - 1;
                        let widx = ((o * cin + ci) * 3 + ky) * 3 + kx;
                        let wv = w.data()[widx];
                        let i_lo = (-dy).max(0) as usize;
                        let i_hi = (h as isize - dy).min(h as isize) as usize;
                        let j_lo = (-dx).max(0) as usize;
                        let j_hi = (wd as isize - dx).min(wd as isize) as usize;
                        let mut wacc = 0.0;
                        for i in i_lo..i_hi {
                            let src = x_plane + (i as isize + dy) as usize * wd;
                            let grow = g_plane + i * wd;
                            for j in j_lo..j_hi {
                                let xv = x.data()[src + (j as isize + dx) as usize];
                                let gv = grad_y.data()[grow + j];
                                wacc += gv * xv;
                                gx.data_mut()[src + (j as isize + dx) as usize] += wv * gv;
                            }
                        }
                        gw.data_mut()[widx] += wacc;
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

/// 2x2 mean pool per frame/channel; odd trailing rows/cols are dropped.
pub fn pool2x2(x: &Tensor) -> Result<Tensor> {
    let (t, c, h, w) = dims4(x);
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::shape("pool2x2", "input too small to pool"));
    }
    let mut y = Tensor::zeros(&[t, c, oh, ow]);
    for tc in 0..t * c {
        let xp = &x.data()[tc * h * w..(tc + 1) * h * w];
        let yp = &mut y.data_mut()[tc * oh * ow..(tc + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                yp[i * ow + j] = 0.25
                    * (xp[2 * i * w + 2 * j]
                        + xp[2 * i * w + 2 * j + 1]
                        + xp[(2 * i + 1) * w + 2 * j]
                        + xp[(2 * i + 1) * w + 2 * j + 1]);
            }
        }
    }
    Ok(y)
}

pub fn pool2x2_backward(grad: &Tensor, h: usize, w: usize) -> Tensor {
    let (t, c, oh, ow) = dims4(grad);
    let mut gx = Tensor::zeros(&[t, c, h, w]);
    for tc in 0..t * c {
        let gp = &grad.data()[tc * oh * ow..(tc + 1) * oh * ow];
        let xp = &mut gx.data_mut()[tc * h * w..(tc + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let g = 0.25 * gp[i * ow + j];
                xp[2 * i * w + 2 * j] += g;
                xp[2 * i * w + 2 * j + 1] += g;
                xp[(2 * i + 1) * w + 2 * j] += g;
                xp[(2 * i + 1) * w + 2 * j + 1] += g;
            }
        }
    }
    gx
}

pub fn leaky_relu(x: &mut Tensor) {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Backward through leaky ReLU using the forward output (sign-preserving).
pub fn leaky_relu_backward(y: &Tensor, grad: &mut Tensor) {
    for (g, &v) in grad.data_mut().iter_mut().zip(y.data()) {
        if v < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

// ---------------------------------------------------------------------------
// Forward / backward over the stage chain
// ---------------------------------------------------------------------------

pub struct BackboneCtx {
    /// Stage inputs after optional pooling (what each conv actually saw).
    pub conv_inputs: Vec<Tensor>,
    /// Spatially pooled last map [T, C] and its temporal mean [C].
    pub sp: Tensor,
    pub tp: Tensor,
}

/// Full forward: returns all maps f_1..f_{S+1} (f_1 is the input itself),
/// the embedding, and saved intermediates.
pub fn backbone_forward(
    x: &Tensor,
    store: &ParamStore,
    params: &BackboneParams,
) -> Result<(Vec<Tensor>, Tensor, BackboneCtx)> {
    let cfg = &params.config;
    if x.rank() != 4 || x.shape()[1] != cfg.widths[0] {
        return Err(Error::shape(
            "backbone_forward",
            format!("input {:?}, expected [T, {}, H, W]", x.shape(), cfg.widths[0]),
        ));
    }
    let mut maps = vec![x.clone()];
    let mut conv_inputs = Vec::with_capacity(cfg.stages());
    let mut cur = x.clone();
    for s in 0..cfg.stages() {
        if cfg.downsample[s] {
            cur = pool2x2(&cur)?;
        }
        conv_inputs.push(cur.clone());
        let mut y = conv2d(&cur, store.value(params.conv_w[s]), store.value(params.conv_b[s]))?;
        leaky_relu(&mut y);
        maps.push(y.clone());
        cur = y;
    }
    let sp = spatial_pool(&cur)?;
    let tp = temporal_pool(&sp, PoolMode::Mean)?;
    // embedding = tp * W + b
    let w = store.value(params.embed_w);
    let b = store.value(params.embed_b);
    let emb_dim = cfg.embedding_dim;
    let mut emb = Tensor::zeros(&[emb_dim]);
    emb.data_mut().copy_from_slice(b.data());
    crate::tensor::matmul_acc(tp.data(), w.data(), emb.data_mut(), 1, tp.len(), emb_dim);
    Ok((maps, emb, BackboneCtx { conv_inputs, sp, tp }))
}

/// Embedding only, dropping intermediates (the inference path).
pub fn backbone_embed(x: &Tensor, store: &ParamStore, params: &BackboneParams) -> Result<Tensor> {
    let cfg = &params.config;
    let mut cur = x.clone();
    for s in 0..cfg.stages() {
        if cfg.downsample[s] {
            cur = pool2x2(&cur)?;
        }
        let mut y = conv2d(&cur, store.value(params.conv_w[s]), store.value(params.conv_b[s]))?;
        leaky_relu(&mut y);
        cur = y;
    }
    let sp = spatial_pool(&cur)?;
    let tp = temporal_pool(&sp, PoolMode::Mean)?;
    let w = store.value(params.embed_w);
    let b = store.value(params.embed_b);
    let mut emb = Tensor::zeros(&[cfg.embedding_dim]);
    emb.data_mut().copy_from_slice(b.data());
    crate::tensor::matmul_acc(tp.data(), w.data(), emb.data_mut(), 1, tp.len(), cfg.embedding_dim);
    Ok(emb)
}

/// Backward through the chain. `grad_emb` drives the embedding head;
/// `grad_maps[i]`, when present, adds an external gradient on map f_{i+1}
/// (training hooks attach there). Parameter grads accumulate into `sink`.
pub fn backbone_backward(
    grad_emb: &Tensor,
    grad_maps: &mut [Option<Tensor>],
    store: &ParamStore,
    params: &BackboneParams,
    maps: &[Tensor],
    ctx: &BackboneCtx,
    sink: &mut GradBuffer,
) -> Result<()> {
    let cfg = &params.config;
    let stages = cfg.stages();
    debug_assert_eq!(grad_maps.len(), maps.len());
    // Embedding head.
    let w = store.value(params.embed_w);
    let c_last = ctx.tp.len();
    let emb_dim = cfg.embedding_dim;
    let mut g_w = Tensor::zeros(&[c_last, emb_dim]);
    crate::tensor::matmul_tn_acc(ctx.tp.data(), grad_emb.data(), g_w.data_mut(), 1, c_last, emb_dim);
    sink.add(params.embed_w, &g_w);
    sink.add(params.embed_b, grad_emb);
    let mut g_tp = Tensor::zeros(&[c_last]);
    crate::tensor::matmul_nt_acc(grad_emb.data(), w.data(), g_tp.data_mut(), 1, emb_dim, c_last);
    let g_sp = temporal_pool_backward(&ctx.sp, &g_tp, PoolMode::Mean);
    let last = maps.last().unwrap();
    let (_, _, h_last, w_last) = dims4(last);
    let mut g = spatial_pool_backward(&g_sp, h_last, w_last);
    if let Some(extra) = grad_maps[stages].take() {
        g.add_assign(&extra)?;
    }
    // Stage chain in reverse.
    for s in (0..stages).rev() {
        leaky_relu_backward(&maps[s + 1], &mut g);
        let (gx, gw, gb) =
            conv2d_backward(&ctx.conv_inputs[s], store.value(params.conv_w[s]), &g)?;
        sink.add(params.conv_w[s], &gw);
        sink.add(params.conv_b[s], &gb);
        let mut g_prev = if cfg.downsample[s] {
            let (_, _, ph, pw) = dims4(&maps[s]);
            pool2x2_backward(&gx, ph, pw)
        } else {
            gx
        };
        if let Some(extra) = grad_maps[s].take() {
            g_prev.add_assign(&extra)?;
        }
        g = g_prev;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn default_shape_contract() {
        let cfg = BackboneConfig::default();
        let shapes = cfg.map_shapes(64, 44);
        assert_eq!(shapes[0], (1, 64, 44));
        assert_eq!(shapes[1], (32, 64, 44));
        assert_eq!(shapes[2], (64, 32, 22));
        assert_eq!(shapes[3], (128, 16, 11));

        // Forward on a short random clip matches the declared shapes.
        let mut store = ParamStore::new();
        let mut r = rng(1);
        let params = BackboneParams::init(&mut store, &cfg, &mut r).unwrap();
        let x = Tensor::uniform(&[2, 1, 64, 44], 0.0, 1.0, &mut r);
        let (maps, emb, _) = backbone_forward(&x, &store, &params).unwrap();
        assert_eq!(maps[1].shape(), &[2, 32, 64, 44]);
        assert_eq!(maps[2].shape(), &[2, 64, 32, 22]);
        assert_eq!(maps[3].shape(), &[2, 128, 16, 11]);
        assert_eq!(emb.shape(), &[128]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_embedding() {
        let cfg = BackboneConfig {
            widths: vec![1, 4, 8],
            downsample: vec![false, true],
            embedding_dim: 16,
            cltd_stages: 2,
        };
        let mut store = ParamStore::new();
        let mut r = rng(2);
        let params = BackboneParams::init(&mut store, &cfg, &mut r).unwrap();
        let x = Tensor::zeros(&[3, 1, 8, 8]);
        let (_, emb, _) = backbone_forward(&x, &store, &params).unwrap();
        assert!(emb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_matches_direct_loop_oracle() {
        let mut r = rng(3);
        let x = Tensor::uniform(&[2, 3, 5, 4], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[2], -0.5, 0.5, &mut r);
        let y = conv2d(&x, &w, &b).unwrap();
        let (h, wd) = (5usize, 4usize);
        for t in 0..2 {
            for o in 0..2 {
                for i in 0..h {
                    for j in 0..wd {
                        let mut acc = b.data()[o];
                        for ci in 0..3 {
                            for ky in 0..3usize {
                                for kx in 0..3usize {
                                    let si = i as isize + ky as isize - 1;
                                    let sj = j as isize + kx as isize - 1;
                                    if si >= 0 && si < h as isize && sj >= 0 && sj < wd as isize {
                                        acc += w.data()[((o * 3 + ci) * 3 + ky) * 3 + kx]
                                            * x.data()[((t * 3 + ci) * h + si as usize) * wd
                                                + sj as usize];
                                    }
                                }
                            }
                        }
                        let got = y.data()[((t * 2 + o) * h + i) * wd + j];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn embedding_matches_composition_oracle() {
        let cfg = BackboneConfig {
            widths: vec![1, 2, 3],
            downsample: vec![false, true],
            embedding_dim: 4,
            cltd_stages: 1,
        };
        let mut store = ParamStore::new();
        let mut r = rng(4);
        let params = BackboneParams::init(&mut store, &cfg, &mut r).unwrap();
        let x = Tensor::uniform(&[3, 1, 6, 6], -1.0, 1.0, &mut r);
        let (maps, emb, _) = backbone_forward(&x, &store, &params).unwrap();
        // Oracle: compose the public kernels step by step.
        let s1 = {
            let mut y = conv2d(&x, store.value(params.conv_w[0]), store.value(params.conv_b[0]))
                .unwrap();
            leaky_relu(&mut y);
            y
        };
        assert_eq!(s1.data(), maps[1].data());
        let pooled = pool2x2(&s1).unwrap();
        let mut s2 = conv2d(
            &pooled,
            store.value(params.conv_w[1]),
            store.value(params.conv_b[1]),
        )
        .unwrap();
        leaky_relu(&mut s2);
        assert_eq!(s2.data(), maps[2].data());
        let sp = spatial_pool(&s2).unwrap();
        let tp = temporal_pool(&sp, PoolMode::Mean).unwrap();
        let wm = store.value(params.embed_w);
        for j in 0..4 {
            let mut acc = store.value(params.embed_b).data()[j];
            for c in 0..3 {
                acc += tp.data()[c] * wm.data()[c * 4 + j];
            }
            assert!((emb.data()[j] - acc).abs() < 1e-9);
        }
        assert_eq!(
            backbone_embed(&x, &store, &params).unwrap().data(),
            emb.data()
        );
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = BackboneConfig {
            widths: vec![1, 2, 3],
            downsample: vec![false, true],
            embedding_dim: 3,
            cltd_stages: 2,
        };
        let mut store = ParamStore::new();
        let mut r = rng(5);
        let params = BackboneParams::init(&mut store, &cfg, &mut r).unwrap();
        let x = Tensor::uniform(&[2, 1, 6, 6], -1.0, 1.0, &mut r);
        let probe_emb = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
        let probe_map = Tensor::uniform(&[2, 2, 6, 6], -1.0, 1.0, &mut r);
        // Loss probes both the embedding and an intermediate map so the
        // grad_maps plumbing is exercised.
        let loss = |store: &ParamStore| {
            let (maps, emb, _) = backbone_forward(&x, store, &params).unwrap();
            crate::tensor::dot(emb.data(), probe_emb.data())
                + crate::tensor::dot(maps[1].data(), probe_map.data())
        };
        let (maps, _, ctx) = backbone_forward(&x, &store, &params).unwrap();
        let mut sink = store.grad_buffer();
        let mut grad_maps: Vec<Option<Tensor>> = vec![None, Some(probe_map.clone()), None];
        backbone_backward(
            &probe_emb,
            &mut grad_maps,
            &store,
            &params,
            &maps,
            &ctx,
            &mut sink,
        )
        .unwrap();
        let eps = 1e-5;
        for id in params.param_ids() {
            let n = store.value(id).len();
            for i in [0, n / 2, n - 1] {
                let orig = store.value(id).data()[i];
                store.value_mut(id).data_mut()[i] = orig + eps;
                let lp = loss(&store);
                store.value_mut(id).data_mut()[i] = orig - eps;
                let lm = loss(&store);
                store.value_mut(id).data_mut()[i] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let got = sink.grad(id).data()[i];
                let rel = (fd - got).abs() / fd.abs().max(got.abs()).max(1e-8);
                assert!(rel < 1e-6, "{} coord {i}: fd {fd} vs {got}", store.name(id));
            }
        }
    }
}
