//! Factual/counterfactual stage losses.
//!
//! One stage owns twin attention generators (factual and counterfactual), a
//! projection head shared by the anchor/factual/counterfactual paths, and a
//! linear ID classifier over the spectral feature. The stage loss combines a
//! contrastive term that pulls the anchor toward factual features of the same
//! subject and away from counterfactual ones, and a classification term on
//! the factual logits plus the logit difference (total direct effect).

use crate::cpag::{generate_attention, generate_attention_backward, CpagCtx, CpagParams, CpagShape};
use crate::error::{Error, Result};
use crate::fph::{apply_attention, feature_len, fph_backward, fph_forward, FphCtx, FphParams};
use crate::param::{GradBuffer, ParamId, ParamStore};
use crate::tensor::{dims4, hadamard, PoolMode, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Contrastive loss flavor. `Exp` exponentiates cosine similarities (the
/// standard numerically safe form, temperature 1); `Literal` takes the ratio
/// of raw similarities and errors out when a numerator or denominator is not
/// positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfoNceVariant {
    #[default]
    Exp,
    Literal,
}

/// Per-stage scalar losses; `total` is always the sum of the parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageLossBundle {
    pub l_nce: f64,
    pub l_ce_fcf: f64,
    pub total: f64,
}

impl StageLossBundle {
    pub fn new(l_nce: f64, l_ce_fcf: f64) -> StageLossBundle {
        StageLossBundle {
            l_nce,
            l_ce_fcf,
            total: l_nce + l_ce_fcf,
        }
    }
}

/// Parameters of one training stage.
#[derive(Debug, Clone)]
pub struct CltdStage {
    pub index: usize,
    pub lambda: f64,
    pub factual: CpagParams,
    pub counterfactual: CpagParams,
    pub fph: FphParams,
    pub w_c: ParamId,
    pub b_c: ParamId,
    pub num_classes: usize,
    pub nce_variant: InfoNceVariant,
}

impl CltdStage {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        index: usize,
        lambda: f64,
        in_shape: (usize, usize, usize),
        next_shape: (usize, usize, usize),
        k: usize,
        c_o: usize,
        num_classes: usize,
        nce_variant: InfoNceVariant,
        rng: &mut R,
    ) -> Result<CltdStage> {
        if lambda < 0.0 {
            return Err(Error::InvalidParam(format!(
                "stage weight lambda must be nonnegative, got {lambda}"
            )));
        }
        let shape = CpagShape {
            c: in_shape.0,
            h: in_shape.1,
            w: in_shape.2,
            c_out: next_shape.0,
            h_out: next_shape.1,
            w_out: next_shape.2,
        };
        let prefix = format!("cltd.stage{index}");
        let factual = CpagParams::init(store, &format!("{prefix}.cpag_f"), shape, rng);
        let counterfactual = CpagParams::init(store, &format!("{prefix}.cpag_cf"), shape, rng);
        let fph = FphParams::init(
            store,
            &format!("{prefix}.fph"),
            next_shape.0,
            c_o,
            k,
            PoolMode::Mean,
            rng,
        )?;
        let d = feature_len(c_o, k);
        let scale = (1.0 / d as f64).sqrt();
        let w_c = store.register(
            format!("{prefix}.classifier.weight"),
            Tensor::uniform(&[num_classes, d], -scale, scale, rng),
        );
        let b_c = store.register(
            format!("{prefix}.classifier.bias"),
            Tensor::zeros(&[num_classes]),
        );
        Ok(CltdStage {
            index,
            lambda,
            factual,
            counterfactual,
            fph,
            w_c,
            b_c,
            num_classes,
            nce_variant,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.factual.param_ids();
        ids.extend(self.counterfactual.param_ids());
        ids.extend(self.fph.param_ids());
        ids.push(self.w_c);
        ids.push(self.b_c);
        ids
    }
}

/// Saved state from [`stage_features`] for one sample.
pub struct StageFeaturesCtx {
    pub a_f: Tensor,
    pub a_cf: Tensor,
    pub x_in_f: Tensor,
    pub x_in_cf: Tensor,
    pub cpag_f: CpagCtx,
    pub cpag_cf: CpagCtx,
    pub fph_f: FphCtx,
    pub fph_cf: FphCtx,
    pub fph_a: FphCtx,
}

/// Factual, counterfactual and anchor spectral features for one sample.
pub fn stage_features(
    f_i: &Tensor,
    f_next: &Tensor,
    store: &ParamStore,
    stage: &CltdStage,
) -> Result<(Tensor, Tensor, Tensor, StageFeaturesCtx)> {
    let (t, c_next, h_next, w_next) = dims4(f_next);
    let target = (t, c_next, h_next, w_next);
    let (a_f, cpag_f) = generate_attention(f_i, target, store, &stage.factual)?;
    let (a_cf, cpag_cf) = generate_attention(f_i, target, store, &stage.counterfactual)?;
    let x_in_f = apply_attention(&a_f, f_next)?;
    let x_in_cf = apply_attention(&a_cf, f_next)?;
    let (x_f, fph_f) = fph_forward(&x_in_f, store, &stage.fph)?;
    let (x_cf, fph_cf) = fph_forward(&x_in_cf, store, &stage.fph)?;
    let (x_a, fph_a) = fph_forward(f_next, store, &stage.fph)?;
    Ok((
        x_f,
        x_cf,
        x_a,
        StageFeaturesCtx {
            a_f,
            a_cf,
            x_in_f,
            x_in_cf,
            cpag_f,
            cpag_cf,
            fph_f,
            fph_cf,
            fph_a,
        },
    ))
}

/// Backward of [`stage_features`]; returns gradients w.r.t. (f_i, f_next).
pub fn stage_features_backward(
    grads: (&Tensor, &Tensor, &Tensor),
    maps: (&Tensor, &Tensor),
    store: &ParamStore,
    stage: &CltdStage,
    ctx: &StageFeaturesCtx,
    sink: &mut GradBuffer,
) -> Result<(Tensor, Tensor)> {
    let (g_xf, g_xcf, g_xa) = grads;
    let (f_i, f_next) = maps;
    // Factual path.
    let g_xin_f = fph_backward(g_xf, &ctx.x_in_f, store, &stage.fph, &ctx.fph_f, sink)?;
    let g_af = hadamard(&g_xin_f, f_next)?;
    let mut g_f_next = hadamard(&g_xin_f, &ctx.a_f)?;
    let mut g_f_i =
        generate_attention_backward(&g_af, f_i, store, &stage.factual, &ctx.cpag_f, sink)?;
    // Counterfactual path.
    let g_xin_cf = fph_backward(g_xcf, &ctx.x_in_cf, store, &stage.fph, &ctx.fph_cf, sink)?;
    let g_acf = hadamard(&g_xin_cf, f_next)?;
    g_f_next.add_assign(&hadamard(&g_xin_cf, &ctx.a_cf)?)?;
    g_f_i.add_assign(&generate_attention_backward(
        &g_acf,
        f_i,
        store,
        &stage.counterfactual,
        &ctx.cpag_cf,
        sink,
    )?)?;
    // Anchor path feeds f_next directly.
    g_f_next.add_assign(&fph_backward(g_xa, f_next, store, &stage.fph, &ctx.fph_a, sink)?)?;
    Ok((g_f_i, g_f_next))
}

// ---------------------------------------------------------------------------
// Cosine similarity
// ---------------------------------------------------------------------------

const NORM_FLOOR: f64 = 1e-12;

/// a . b / (|a| |b|); defined as 0 (and logged) when either norm vanishes.
pub fn cosine_sim(a: &Tensor, b: &Tensor) -> f64 {
    let na = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        log::warn!("cosine_sim on near-zero vector (|a|={na:.3e}, |b|={nb:.3e}); returning 0");
        return 0.0;
    }
    crate::tensor::dot(a.data(), b.data()) / (na * nb)
}

/// Gradients of `g * cosine_sim(a, b)` w.r.t. a and b, accumulated in place.
fn cosine_sim_backward(a: &Tensor, b: &Tensor, g: f64, ga: &mut Tensor, gb: &mut Tensor) {
    let na = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return; // similarity was pinned to a constant 0
    }
    let d = crate::tensor::dot(a.data(), b.data());
    let inv = 1.0 / (na * nb);
    let s = d * inv;
    for i in 0..a.len() {
        ga.data_mut()[i] += g * (b.data()[i] * inv - s * a.data()[i] / (na * na));
        gb.data_mut()[i] += g * (a.data()[i] * inv - s * b.data()[i] / (nb * nb));
    }
}

// ---------------------------------------------------------------------------
// InfoNCE
// ---------------------------------------------------------------------------

/// Similarities computed during the forward pass, reused by the backward.
pub struct InfoNceCtx {
    pub pos_sims: Vec<f64>,
    pub neg_sims: Vec<f64>,
}

/// Contrastive loss of one anchor against its subject's factual features
/// (positives) and counterfactual features (negatives). Summed over
/// positives, matching the closed form |S_f| * log(1 + |S_cf|) when all
/// similarities coincide under the `Exp` variant.
pub fn info_nce(
    x_a: &Tensor,
    s_f: &[&Tensor],
    s_cf: &[&Tensor],
    variant: InfoNceVariant,
) -> Result<(f64, InfoNceCtx)> {
    if s_f.is_empty() || s_cf.is_empty() {
        return Err(Error::Loss(
            "info_nce needs at least one positive and one negative".into(),
        ));
    }
    let pos_sims: Vec<f64> = s_f.iter().map(|x| cosine_sim(x_a, x)).collect();
    let neg_sims: Vec<f64> = s_cf.iter().map(|x| cosine_sim(x_a, x)).collect();
    let loss = match variant {
        InfoNceVariant::Exp => {
            let neg_exp: f64 = neg_sims.iter().map(|s| s.exp()).sum();
            pos_sims
                .iter()
                .map(|&sp| {
                    let e = sp.exp();
                    -(e / (e + neg_exp)).ln()
                })
                .sum()
        }
        InfoNceVariant::Literal => {
            let neg_sum: f64 = neg_sims.iter().sum();
            let mut acc = 0.0;
            for &sp in &pos_sims {
                let den = sp + neg_sum;
                if sp <= 0.0 || den <= 0.0 {
                    log::warn!(
                        "literal info_nce undefined: positive {sp:.4}, denominator {den:.4}"
                    );
                    return Err(Error::Loss(format!(
                        "literal info_nce needs positive ratio terms (num {sp:.4}, den {den:.4})"
                    )));
                }
                acc -= (sp / den).ln();
            }
            acc
        }
    };
    Ok((loss, InfoNceCtx { pos_sims, neg_sims }))
}

/// Backward of [`info_nce`] scaled by `g`; accumulates into the anchor,
/// positive and negative feature gradients (index-aligned with the inputs).
#[allow(clippy::too_many_arguments)]
pub fn info_nce_backward(
    x_a: &Tensor,
    s_f: &[&Tensor],
    s_cf: &[&Tensor],
    variant: InfoNceVariant,
    ctx: &InfoNceCtx,
    g: f64,
    g_xa: &mut Tensor,
    g_sf: &mut [Tensor],
    g_scf: &mut [Tensor],
) {
    let (mut d_pos, mut d_neg) = (vec![0.0; s_f.len()], vec![0.0; s_cf.len()]);
    match variant {
        InfoNceVariant::Exp => {
            let neg_exp: f64 = ctx.neg_sims.iter().map(|s| s.exp()).sum();
            for (i, &sp) in ctx.pos_sims.iter().enumerate() {
                let den = sp.exp() + neg_exp;
                d_pos[i] = -neg_exp / den;
                for (j, &sn) in ctx.neg_sims.iter().enumerate() {
                    d_neg[j] += sn.exp() / den;
                }
            }
        }
        InfoNceVariant::Literal => {
            let neg_sum: f64 = ctx.neg_sims.iter().sum();
            for (i, &sp) in ctx.pos_sims.iter().enumerate() {
                let den = sp + neg_sum;
                d_pos[i] = -1.0 / sp + 1.0 / den;
                for dn in d_neg.iter_mut() {
                    *dn += 1.0 / den;
                }
            }
        }
    }
    for (i, x) in s_f.iter().enumerate() {
        cosine_sim_backward(x_a, x, g * d_pos[i], g_xa, &mut g_sf[i]);
    }
    for (j, x) in s_cf.iter().enumerate() {
        cosine_sim_backward(x_a, x, g * d_neg[j], g_xa, &mut g_scf[j]);
    }
}

// ---------------------------------------------------------------------------
// TDE classification loss
// ---------------------------------------------------------------------------

/// Stable -log softmax(logits)[y] plus the softmax itself.
pub(crate) fn cross_entropy(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let hi = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|v| (v - hi).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let p: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    ((sum.ln() + hi) - logits[y], p)
}

pub struct TdeCtx {
    pub p_tde: Vec<f64>,
    pub p_f: Vec<f64>,
}

/// CE(TDE, y) + CE(Y_f, y) with Y_f = W_c x_f + b, Y_cf = W_c x_cf + b and
/// TDE = Y_f - Y_cf (the bias cancels, so TDE = W_c (x_f - x_cf) exactly).
pub fn tde_loss(
    x_f: &Tensor,
    x_cf: &Tensor,
    store: &ParamStore,
    w_c: ParamId,
    b_c: ParamId,
    y: usize,
) -> Result<(f64, TdeCtx)> {
    let w = store.value(w_c);
    let b = store.value(b_c);
    let classes = w.shape()[0];
    let d = w.shape()[1];
    if y >= classes {
        return Err(Error::Validation(format!(
            "label {y} out of range for {classes} classes"
        )));
    }
    if x_f.len() != d || x_cf.len() != d {
        return Err(Error::shape("tde_loss", "feature length"));
    }
    let mut y_f = vec![0.0; classes];
    let mut y_cf = vec![0.0; classes];
    for cl in 0..classes {
        let row = &w.data()[cl * d..(cl + 1) * d];
        y_f[cl] = crate::tensor::dot(row, x_f.data()) + b.data()[cl];
        y_cf[cl] = crate::tensor::dot(row, x_cf.data()) + b.data()[cl];
    }
    let tde: Vec<f64> = y_f.iter().zip(&y_cf).map(|(a, b)| a - b).collect();
    let (l_tde, p_tde) = cross_entropy(&tde, y);
    let (l_f, p_f) = cross_entropy(&y_f, y);
    Ok((l_tde + l_f, TdeCtx { p_tde, p_f }))
}

/// Backward of [`tde_loss`] scaled by `g`; accumulates classifier grads into
/// `sink` and feature grads into the provided tensors.
#[allow(clippy::too_many_arguments)]
pub fn tde_loss_backward(
    x_f: &Tensor,
    x_cf: &Tensor,
    store: &ParamStore,
    w_c: ParamId,
    b_c: ParamId,
    y: usize,
    ctx: &TdeCtx,
    g: f64,
    g_xf: &mut Tensor,
    g_xcf: &mut Tensor,
    sink: &mut GradBuffer,
) {
    let w = store.value(w_c);
    let classes = w.shape()[0];
    let d = w.shape()[1];
    let mut d_yf = vec![0.0; classes];
    let mut d_ycf = vec![0.0; classes];
    for cl in 0..classes {
        let onehot = if cl == y { 1.0 } else { 0.0 };
        let d_tde = ctx.p_tde[cl] - onehot;
        d_yf[cl] = g * (d_tde + (ctx.p_f[cl] - onehot));
        d_ycf[cl] = -g * d_tde;
    }
    let mut g_w = Tensor::zeros(w.shape());
    let mut g_b = Tensor::zeros(&[classes]);
    for cl in 0..classes {
        let row = &w.data()[cl * d..(cl + 1) * d];
        let gw_row = &mut g_w.data_mut()[cl * d..(cl + 1) * d];
        for i in 0..d {
            g_xf.data_mut()[i] += d_yf[cl] * row[i];
            g_xcf.data_mut()[i] += d_ycf[cl] * row[i];
            gw_row[i] += d_yf[cl] * x_f.data()[i] + d_ycf[cl] * x_cf.data()[i];
        }
        g_b.data_mut()[cl] += d_yf[cl] + d_ycf[cl];
    }
    sink.add(w_c, &g_w);
    sink.add(b_c, &g_b);
}

// ---------------------------------------------------------------------------
// Batched stage loss
// ---------------------------------------------------------------------------

/// Group sample indices by label, in first-appearance order.
pub fn subject_groups(labels: &[usize]) -> Vec<(usize, Vec<usize>)> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match groups.iter_mut().find(|(gl, _)| *gl == l) {
            Some((_, v)) => v.push(i),
            None => groups.push((l, vec![i])),
        }
    }
    groups
}

/// Everything saved by [`stage_loss`] for the paired backward.
pub struct StageLossCtx {
    pub features: Vec<(Tensor, Tensor, Tensor)>,
    pub sample_ctx: Vec<StageFeaturesCtx>,
    pub nce: Vec<(usize, InfoNceCtx)>,
    pub tde: Vec<TdeCtx>,
    pub n_anchors: usize,
}

/// Batch stage loss: contrastive term averaged over anchors whose subject has
/// at least two sequences in the batch, classification term averaged over all
/// samples. Subjects with a single sequence contribute only the latter.
pub fn stage_loss(
    f_i: &[Tensor],
    f_next: &[Tensor],
    labels: &[usize],
    store: &ParamStore,
    stage: &CltdStage,
) -> Result<(StageLossBundle, StageLossCtx)> {
    let n = f_i.len();
    if n == 0 || f_next.len() != n || labels.len() != n {
        return Err(Error::Validation(
            "stage_loss needs equal-length nonempty batches".into(),
        ));
    }
    let mut features = Vec::with_capacity(n);
    let mut sample_ctx = Vec::with_capacity(n);
    for s in 0..n {
        let (x_f, x_cf, x_a, ctx) = stage_features(&f_i[s], &f_next[s], store, stage)?;
        features.push((x_f, x_cf, x_a));
        sample_ctx.push(ctx);
    }
    let groups = subject_groups(labels);
    let mut nce = Vec::new();
    let mut nce_sum = 0.0;
    for (_, members) in &groups {
        if members.len() < 2 {
            log::debug!(
                "subject with a single sequence in batch; contributes only the TDE term"
            );
            continue;
        }
        for &anchor in members {
            let s_f: Vec<&Tensor> = members.iter().map(|&m| &features[m].0).collect();
            let s_cf: Vec<&Tensor> = members.iter().map(|&m| &features[m].1).collect();
            let (l, ctx) = info_nce(&features[anchor].2, &s_f, &s_cf, stage.nce_variant)?;
            nce_sum += l;
            nce.push((anchor, ctx));
        }
    }
    let n_anchors = nce.len();
    let l_nce = if n_anchors > 0 {
        nce_sum / n_anchors as f64
    } else {
        log::warn!("no subject with >=2 sequences in batch; contrastive term skipped");
        0.0
    };
    let mut tde = Vec::with_capacity(n);
    let mut tde_sum = 0.0;
    for s in 0..n {
        let (l, ctx) = tde_loss(
            &features[s].0,
            &features[s].1,
            store,
            stage.w_c,
            stage.b_c,
            labels[s],
        )?;
        tde_sum += l;
        tde.push(ctx);
    }
    let bundle = StageLossBundle::new(l_nce, tde_sum / n as f64);
    if !bundle.total.is_finite() {
        return Err(Error::NonFinite(format!("stage {} loss", stage.index)));
    }
    Ok((
        bundle,
        StageLossCtx {
            features,
            sample_ctx,
            nce,
            tde,
            n_anchors,
        },
    ))
}

/// Backward of [`stage_loss`] scaled by `g`; returns per-sample gradients
/// w.r.t. (f_i, f_next).
pub fn stage_loss_backward(
    f_i: &[Tensor],
    f_next: &[Tensor],
    labels: &[usize],
    store: &ParamStore,
    stage: &CltdStage,
    ctx: &StageLossCtx,
    g: f64,
    sink: &mut GradBuffer,
) -> Result<Vec<(Tensor, Tensor)>> {
    let n = f_i.len();
    let d = ctx.features[0].0.shape().to_vec();
    let mut g_feat: Vec<(Tensor, Tensor, Tensor)> = (0..n)
        .map(|_| (Tensor::zeros(&d), Tensor::zeros(&d), Tensor::zeros(&d)))
        .collect();
    // Contrastive term.
    if ctx.n_anchors > 0 {
        let groups = subject_groups(labels);
        let g_nce = g / ctx.n_anchors as f64;
        let mut it = ctx.nce.iter();
        for (_, members) in &groups {
            if members.len() < 2 {
                continue;
            }
            for &anchor in members {
                let (stored_anchor, nce_ctx) =
                    it.next().expect("nce ctx count matches anchor count");
                debug_assert_eq!(*stored_anchor, anchor);
                let s_f: Vec<&Tensor> = members.iter().map(|&m| &ctx.features[m].0).collect();
                let s_cf: Vec<&Tensor> = members.iter().map(|&m| &ctx.features[m].1).collect();
                let mut g_xa = Tensor::zeros(&d);
                let mut g_sf: Vec<Tensor> = members.iter().map(|_| Tensor::zeros(&d)).collect();
                let mut g_scf: Vec<Tensor> = members.iter().map(|_| Tensor::zeros(&d)).collect();
                info_nce_backward(
                    &ctx.features[anchor].2,
                    &s_f,
                    &s_cf,
                    stage.nce_variant,
                    nce_ctx,
                    g_nce,
                    &mut g_xa,
                    &mut g_sf,
                    &mut g_scf,
                );
                g_feat[anchor].2.add_assign(&g_xa)?;
                for (slot, &m) in members.iter().enumerate() {
                    g_feat[m].0.add_assign(&g_sf[slot])?;
                    g_feat[m].1.add_assign(&g_scf[slot])?;
                }
            }
        }
    }
    // Classification term.
    let g_tde = g / n as f64;
    for s in 0..n {
        let slot = &mut g_feat[s];
        tde_loss_backward(
            &ctx.features[s].0,
            &ctx.features[s].1,
            store,
            stage.w_c,
            stage.b_c,
            labels[s],
            &ctx.tde[s],
            g_tde,
            &mut slot.0,
            &mut slot.1,
            sink,
        );
    }
    // Push through the attention/projection stack per sample.
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let (gf, gn) = stage_features_backward(
            (&g_feat[s].0, &g_feat[s].1, &g_feat[s].2),
            (&f_i[s], &f_next[s]),
            store,
            stage,
            &ctx.sample_ctx[s],
            sink,
        )?;
        out.push((gf, gn));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn micro_stage(seed: u64, variant: InfoNceVariant) -> (ParamStore, CltdStage) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let stage = CltdStage::init(
            &mut store,
            1,
            0.1,
            (2, 6, 5),
            (3, 6, 5),
            3,
            2,
            4,
            variant,
            &mut r,
        )
        .unwrap();
        (store, stage)
    }

    fn vecs(vals: &[f64]) -> Tensor {
        Tensor::from_vec(&[vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn cosine_sim_basics() {
        let v = vecs(&[1.0, 2.0, -0.5]);
        assert!((cosine_sim(&v, &v) - 1.0).abs() < 1e-12);
        let mut neg = v.clone();
        neg.scale(-1.0);
        assert!((cosine_sim(&v, &neg) + 1.0).abs() < 1e-12);
        let e1 = vecs(&[1.0, 0.0]);
        let e2 = vecs(&[0.0, 1.0]);
        assert!(cosine_sim(&e1, &e2).abs() < 1e-15);
        let zero = vecs(&[0.0, 0.0]);
        assert_eq!(cosine_sim(&zero, &e1), 0.0);
    }

    #[test]
    fn info_nce_hand_evaluated_cases() {
        // One positive with s=1, one negative with s=-1 (exp variant):
        // -log(e / (e + e^-1)) = log(1 + e^-2).
        let a = vecs(&[1.0, 0.0]);
        let pos = vecs(&[2.0, 0.0]);
        let neg = vecs(&[-3.0, 0.0]);
        let (l, _) = info_nce(&a, &[&pos], &[&neg], InfoNceVariant::Exp).unwrap();
        assert!((l - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn info_nce_symmetric_closed_form() {
        // All similarities equal -> |S_f| * log(1 + |S_cf|).
        let a = vecs(&[1.0, 1.0]);
        let same = vecs(&[2.0, 2.0]);
        let pos: Vec<&Tensor> = vec![&same; 3];
        let negs: Vec<&Tensor> = vec![&same; 2];
        let (l, _) = info_nce(&a, &pos, &negs, InfoNceVariant::Exp).unwrap();
        assert!((l - 3.0 * (3.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn info_nce_literal_value_and_guard() {
        // s+ = 0.8, one negative s = 0.2 -> -log(0.8 / 1.0).
        let a = vecs(&[1.0, 0.0]);
        let pos = vecs(&[0.8, 0.6]); // cos = 0.8
        let neg = vecs(&[0.2, (1.0f64 - 0.04).sqrt()]); // cos = 0.2
        let (l, _) = info_nce(&a, &[&pos], &[&neg], InfoNceVariant::Literal).unwrap();
        assert!((l - 0.223144).abs() < 1e-6, "{l}");

        let bad = vecs(&[-1.0, 0.0]);
        assert!(matches!(
            info_nce(&a, &[&bad], &[&neg], InfoNceVariant::Literal),
            Err(Error::Loss(_))
        ));
    }

    #[test]
    fn info_nce_decreases_as_positive_similarity_rises() {
        let a = vecs(&[1.0, 0.0, 0.0]);
        let neg = vecs(&[0.1, 0.9, 0.0]);
        let lo = vecs(&[0.4, 0.5, 0.0]);
        let hi = vecs(&[0.9, 0.1, 0.0]);
        let (l_lo, _) = info_nce(&a, &[&lo], &[&neg], InfoNceVariant::Exp).unwrap();
        let (l_hi, _) = info_nce(&a, &[&hi], &[&neg], InfoNceVariant::Exp).unwrap();
        assert!(l_lo > 0.0 && l_hi > 0.0);
        assert!(l_hi < l_lo);
    }

    #[test]
    fn tde_degenerate_cases() {
        let mut store = ParamStore::new();
        let mut r = rng(3);
        let w_c = store.register("w", Tensor::uniform(&[4, 6], -0.5, 0.5, &mut r));
        let b_c = store.register("b", Tensor::uniform(&[4], -0.1, 0.1, &mut r));
        let x = Tensor::uniform(&[6], -1.0, 1.0, &mut r);
        // x_f == x_cf: TDE logits vanish, CE(TDE) = ln(num_classes).
        let (l, ctx) = tde_loss(&x, &x, &store, w_c, b_c, 2).unwrap();
        let ce_f = -ctx.p_f[2].ln();
        assert!((l - ((4.0f64).ln() + ce_f)).abs() < 1e-12);

        // Zero classifier: both terms are ln(num_classes).
        let w0 = store.register("w0", Tensor::zeros(&[4, 6]));
        let b0 = store.register("b0", Tensor::zeros(&[4]));
        let y = Tensor::uniform(&[6], -1.0, 1.0, &mut r);
        let (l0, _) = tde_loss(&x, &y, &store, w0, b0, 1).unwrap();
        assert!((l0 - 2.0 * (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn tde_matches_two_term_loop_oracle() {
        let mut store = ParamStore::new();
        let mut r = rng(4);
        let (classes, d) = (4, 6);
        let w_c = store.register("w", Tensor::uniform(&[classes, d], -1.0, 1.0, &mut r));
        let b_c = store.register("b", Tensor::uniform(&[classes], -0.3, 0.3, &mut r));
        let x_f = Tensor::uniform(&[d], -1.0, 1.0, &mut r);
        let x_cf = Tensor::uniform(&[d], -1.0, 1.0, &mut r);
        let y = 3usize;
        let (l, _) = tde_loss(&x_f, &x_cf, &store, w_c, b_c, y).unwrap();

        let logits = |x: &Tensor| -> Vec<f64> {
            (0..classes)
                .map(|cl| {
                    let mut s = store.value(b_c).data()[cl];
                    for i in 0..d {
                        s += store.value(w_c).data()[cl * d + i] * x.data()[i];
                    }
                    s
                })
                .collect()
        };
        let ce = |z: &[f64]| -> f64 {
            let sum: f64 = z.iter().map(|v| v.exp()).sum();
            sum.ln() - z[y]
        };
        let y_f = logits(&x_f);
        let y_cf = logits(&x_cf);
        let tde: Vec<f64> = y_f.iter().zip(&y_cf).map(|(a, b)| a - b).collect();
        assert!((l - (ce(&tde) + ce(&y_f))).abs() < 1e-12);
    }

    #[test]
    fn tde_bilinearity() {
        // TDE logits equal W_c (x_f - x_cf) exactly, bias cancelled.
        let mut store = ParamStore::new();
        let mut r = rng(5);
        let (classes, d) = (5, 7);
        let w_c = store.register("w", Tensor::uniform(&[classes, d], -1.0, 1.0, &mut r));
        let b_c = store.register("b", Tensor::uniform(&[classes], -1.0, 1.0, &mut r));
        let x_f = Tensor::uniform(&[d], -1.0, 1.0, &mut r);
        let x_cf = Tensor::uniform(&[d], -1.0, 1.0, &mut r);
        let w = store.value(w_c);
        let b = store.value(b_c);
        for cl in 0..classes {
            let row = &w.data()[cl * d..(cl + 1) * d];
            let tde = (crate::tensor::dot(row, x_f.data()) + b.data()[cl])
                - (crate::tensor::dot(row, x_cf.data()) + b.data()[cl]);
            let mut diff = 0.0;
            for i in 0..d {
                diff += row[i] * (x_f.data()[i] - x_cf.data()[i]);
            }
            assert!((tde - diff).abs() < 1e-12);
        }
    }

    #[test]
    fn tied_branches_make_factual_equal_counterfactual() {
        let (mut store, stage) = micro_stage(6, InfoNceVariant::Exp);
        // Copy factual parameter values into the counterfactual branch.
        let pairs: Vec<_> = stage
            .factual
            .param_ids()
            .into_iter()
            .zip(stage.counterfactual.param_ids())
            .collect();
        for (src, dst) in pairs {
            let v = store.value(src).clone();
            *store.value_mut(dst) = v;
        }
        let mut r = rng(7);
        let f_i = Tensor::uniform(&[2, 2, 6, 5], -1.0, 1.0, &mut r);
        let f_next = Tensor::uniform(&[2, 3, 6, 5], -1.0, 1.0, &mut r);
        let (x_f, x_cf, _, _) = stage_features(&f_i, &f_next, &store, &stage).unwrap();
        assert_eq!(x_f.data(), x_cf.data());
    }

    #[test]
    fn swapping_branch_parameters_swaps_features() {
        let (mut store, stage) = micro_stage(8, InfoNceVariant::Exp);
        let mut r = rng(9);
        let f_i = Tensor::uniform(&[2, 2, 6, 5], -1.0, 1.0, &mut r);
        let f_next = Tensor::uniform(&[2, 3, 6, 5], -1.0, 1.0, &mut r);
        let (x_f, x_cf, x_a, _) = stage_features(&f_i, &f_next, &store, &stage).unwrap();
        let pairs: Vec<_> = stage
            .factual
            .param_ids()
            .into_iter()
            .zip(stage.counterfactual.param_ids())
            .collect();
        for (a, b) in pairs {
            let va = store.value(a).clone();
            let vb = store.value(b).clone();
            *store.value_mut(a) = vb;
            *store.value_mut(b) = va;
        }
        let (x_f2, x_cf2, x_a2, _) = stage_features(&f_i, &f_next, &store, &stage).unwrap();
        assert_eq!(x_f.data(), x_cf2.data());
        assert_eq!(x_cf.data(), x_f2.data());
        assert_eq!(x_a.data(), x_a2.data());
    }

    #[test]
    fn zero_next_map_collapses_features_to_anchor_value() {
        let (store, stage) = micro_stage(10, InfoNceVariant::Exp);
        let mut r = rng(11);
        let f_i = Tensor::uniform(&[2, 2, 6, 5], -1.0, 1.0, &mut r);
        let f_next = Tensor::zeros(&[2, 3, 6, 5]);
        let (x_f, x_cf, x_a, _) = stage_features(&f_i, &f_next, &store, &stage).unwrap();
        assert_eq!(x_f.data(), x_a.data());
        assert_eq!(x_cf.data(), x_a.data());
    }

    #[test]
    fn stage_features_match_independent_composition() {
        let (store, stage) = micro_stage(12, InfoNceVariant::Exp);
        let mut r = rng(13);
        let f_i = Tensor::uniform(&[2, 2, 6, 5], -1.0, 1.0, &mut r);
        let f_next = Tensor::uniform(&[2, 3, 6, 5], -1.0, 1.0, &mut r);
        let (x_f, x_cf, x_a, _) = stage_features(&f_i, &f_next, &store, &stage).unwrap();
        // Compose the public ops independently.
        let (a_f, _) = generate_attention(&f_i, (2, 3, 6, 5), &store, &stage.factual).unwrap();
        let (want_f, _) =
            fph_forward(&apply_attention(&a_f, &f_next).unwrap(), &store, &stage.fph).unwrap();
        let (a_cf, _) =
            generate_attention(&f_i, (2, 3, 6, 5), &store, &stage.counterfactual).unwrap();
        let (want_cf, _) =
            fph_forward(&apply_attention(&a_cf, &f_next).unwrap(), &store, &stage.fph).unwrap();
        let (want_a, _) = fph_forward(&f_next, &store, &stage.fph).unwrap();
        for (got, want) in [(&x_f, &want_f), (&x_cf, &want_cf), (&x_a, &want_a)] {
            for i in 0..got.len() {
                assert!((got.data()[i] - want.data()[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bundle_total_is_sum_of_parts() {
        let b = StageLossBundle::new(0.3, 0.9);
        assert!((b.total - 1.2).abs() < 1e-15);
    }

    #[test]
    fn stage_loss_on_identical_single_subject_batch() {
        let (mut store, stage) = micro_stage(14, InfoNceVariant::Exp);
        // Tie branches so x_f == x_cf.
        let pairs: Vec<_> = stage
            .factual
            .param_ids()
            .into_iter()
            .zip(stage.counterfactual.param_ids())
            .collect();
        for (src, dst) in pairs {
            let v = store.value(src).clone();
            *store.value_mut(dst) = v;
        }
        let mut r = rng(15);
        let f_i = Tensor::uniform(&[2, 2, 6, 5], -1.0, 1.0, &mut r);
        let f_next = Tensor::uniform(&[2, 3, 6, 5], -1.0, 1.0, &mut r);
        let batch_fi = vec![f_i.clone(), f_i.clone(), f_i];
        let batch_fn = vec![f_next.clone(), f_next.clone(), f_next];
        let labels = vec![2usize, 2, 2];
        let (bundle, ctx) = stage_loss(&batch_fi, &batch_fn, &labels, &store, &stage).unwrap();
        // All features identical: every similarity is 1, so each anchor sees
        // |S_f| * log(1 + |S_cf|) = 3 log 4; the average equals the same.
        assert!((bundle.l_nce - 3.0 * (4.0f64).ln()).abs() < 1e-9);
        // Tied branches: TDE logits are zero, so CE(TDE) = ln(4).
        let (x_f, _, _) = &ctx.features[0];
        let (_, p_f) = {
            let w = store.value(stage.w_c);
            let b = store.value(stage.b_c);
            let logits: Vec<f64> = (0..4)
                .map(|cl| {
                    crate::tensor::dot(&w.data()[cl * x_f.len()..(cl + 1) * x_f.len()], x_f.data())
                        + b.data()[cl]
                })
                .collect();
            let sum: f64 = logits.iter().map(|v| v.exp()).sum();
            (0.0, sum.ln() - logits[2])
        };
        assert!((bundle.l_ce_fcf - ((4.0f64).ln() + p_f)).abs() < 1e-9);
        assert!((bundle.total - bundle.l_nce - bundle.l_ce_fcf).abs() < 1e-15);
    }

    #[test]
    fn stage_loss_matches_straight_line_oracle() {
        let (store, stage) = micro_stage(16, InfoNceVariant::Exp);
        let mut r = rng(17);
        // 2 subjects x 2 sequences.
        let batch_fi: Vec<Tensor> = (0..4)
            .map(|_| Tensor::uniform(&[2, 2, 6, 5], -1.0, 1.0, &mut r))
            .collect();
        let batch_fn: Vec<Tensor> = (0..4)
            .map(|_| Tensor::uniform(&[2, 3, 6, 5], -1.0, 1.0, &mut r))
            .collect();
        let labels = vec![0usize, 0, 1, 1];
        let (bundle, ctx) = stage_loss(&batch_fi, &batch_fn, &labels, &store, &stage).unwrap();

        // Straight-line recomputation from the features.
        let mut nce_sum = 0.0;
        for (gl, members) in [(0usize, [0usize, 1]), (1, [2, 3])] {
            let _ = gl;
            for &anchor in &members {
                let s_f: Vec<&Tensor> = members.iter().map(|&m| &ctx.features[m].0).collect();
                let s_cf: Vec<&Tensor> = members.iter().map(|&m| &ctx.features[m].1).collect();
                let (l, _) =
                    info_nce(&ctx.features[anchor].2, &s_f, &s_cf, InfoNceVariant::Exp).unwrap();
                nce_sum += l;
            }
        }
        let mut tde_sum = 0.0;
        for s in 0..4 {
            let (l, _) = tde_loss(
                &ctx.features[s].0,
                &ctx.features[s].1,
                &store,
                stage.w_c,
                stage.b_c,
                labels[s],
            )
            .unwrap();
            tde_sum += l;
        }
        assert!((bundle.l_nce - nce_sum / 4.0).abs() < 1e-9);
        assert!((bundle.l_ce_fcf - tde_sum / 4.0).abs() < 1e-9);
    }

    #[test]
    fn stage_loss_backward_matches_finite_differences() {
        for variant in [InfoNceVariant::Exp, InfoNceVariant::Literal] {
            let (mut store, mut stage) = micro_stage(18, variant);
            stage.nce_variant = variant;
            let mut r = rng(19);
            let batch_fi: Vec<Tensor> = (0..2)
                .map(|_| Tensor::uniform(&[2, 2, 6, 5], 0.1, 1.0, &mut r))
                .collect();
            let batch_fn: Vec<Tensor> = (0..2)
                .map(|_| Tensor::uniform(&[2, 3, 6, 5], 0.1, 1.0, &mut r))
                .collect();
            let labels = vec![1usize, 1];
            if variant == InfoNceVariant::Literal {
                // Keep cosine similarities positive for the literal form:
                // make the projection weights small and positive.
                let w = store.value_mut(stage.fph.w_p);
                for v in w.data_mut() {
                    *v = v.abs() * 0.3 + 0.05;
                }
            }
            let loss = |store: &ParamStore| {
                stage_loss(&batch_fi, &batch_fn, &labels, store, &stage)
                    .unwrap()
                    .0
                    .total
            };
            let (_, ctx) = stage_loss(&batch_fi, &batch_fn, &labels, &store, &stage).unwrap();
            let mut sink = store.grad_buffer();
            stage_loss_backward(
                &batch_fi, &batch_fn, &labels, &store, &stage, &ctx, 1.0, &mut sink,
            )
            .unwrap();
            let eps = 1e-5;
            for id in stage.param_ids() {
                let n = store.value(id).len();
                for i in [0, n / 3, n - 1] {
                    let orig = store.value(id).data()[i];
                    store.value_mut(id).data_mut()[i] = orig + eps;
                    let lp = loss(&store);
                    store.value_mut(id).data_mut()[i] = orig - eps;
                    let lm = loss(&store);
                    store.value_mut(id).data_mut()[i] = orig;
                    let fd = (lp - lm) / (2.0 * eps);
                    let got = sink.grad(id).data()[i];
                    let rel = (fd - got).abs() / fd.abs().max(got.abs()).max(1e-8);
                    assert!(
                        rel < 1e-4,
                        "variant {variant:?} {} coord {i}: fd {fd} vs {got}",
                        store.name(id)
                    );
                }
            }
        }
    }
}
