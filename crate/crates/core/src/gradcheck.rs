//! Central finite-difference verification of every analytic backward pass.
//!
//! The oracle is `(f(x + eps e) - f(x - eps e)) / (2 eps)` per coordinate,
//! compared with max-relative error against the hand-derived gradients. The
//! suite instantiates each parameterized op on micro shapes and sweeps every
//! parameter tensor (subsampled evenly above a per-tensor cap).

use crate::backbone::BackboneConfig;
use crate::cpag::{generate_attention, generate_attention_backward, CpagParams, CpagShape};
use crate::error::{Error, Result};
use crate::fph::{feature_len, fph_backward, fph_forward, FphParams};
use crate::loss::{
    info_nce, info_nce_backward, tde_loss, tde_loss_backward, InfoNceVariant,
};
use crate::param::{GradBuffer, ParamId, ParamStore};
use crate::tensor::{dot, PoolMode, Tensor};
use crate::train::{triplet_backward, triplet_loss, BatchItem, Model, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Central differences of a scalar function at `point`. Errors out if any
/// evaluation goes non-finite.
pub fn finite_diff_grad<F>(f: &mut F, point: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    let mut grad = Tensor::zeros(point.shape());
    let mut x = point.clone();
    for i in 0..point.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let fp = f(&x);
        x.data_mut()[i] = orig - eps;
        let fm = f(&x);
        x.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite_diff_grad evaluation at coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}

/// max(|a - b|) / max(|a|, |b|, 1e-8). Values with both sides under the
/// 1e-8 floor are indistinguishable from zero at f64 finite-difference
/// resolution (the oracle's own noise is ~1e-11 at eps=1e-5) and count as
/// exact agreement.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let floor = 1e-8;
    if a.abs() <= floor && b.abs() <= floor {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub op: String,
    pub seed: u64,
    pub coords: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn coords_for(len: usize, cap: usize) -> Vec<usize> {
    if len <= cap {
        (0..len).collect()
    } else {
        (0..cap).map(|i| i * len / cap).collect()
    }
}

/// FD-sweep selected coordinates of store parameters against an analytic
/// gradient buffer.
fn check_param_coords(
    store: &mut ParamStore,
    ids: &[ParamId],
    analytic: &GradBuffer,
    loss: &mut dyn FnMut(&ParamStore) -> f64,
    eps: f64,
    cap: usize,
) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut count = 0usize;
    for &id in ids {
        let n = store.value(id).len();
        for i in coords_for(n, cap) {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let fp = loss(store);
            store.value_mut(id).data_mut()[i] = orig - eps;
            let fm = loss(store);
            store.value_mut(id).data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            worst = worst.max(rel_err(fd, analytic.grad(id).data()[i]));
            count += 1;
        }
    }
    (worst, count)
}

/// FD-sweep the coordinates of a free tensor (an op input) against its
/// analytic gradient.
fn check_tensor_coords(
    x: &Tensor,
    analytic: &Tensor,
    loss: &mut dyn FnMut(&Tensor) -> f64,
    eps: f64,
    cap: usize,
) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut pt = x.clone();
    let idx = coords_for(x.len(), cap);
    for &i in &idx {
        let orig = pt.data()[i];
        pt.data_mut()[i] = orig + eps;
        let fp = loss(&pt);
        pt.data_mut()[i] = orig - eps;
        let fm = loss(&pt);
        pt.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        worst = worst.max(rel_err(fd, analytic.data()[i]));
    }
    (worst, idx.len())
}

fn report(op: &str, seed: u64, coords: usize, max_rel_err: f64, tol: f64) -> CheckReport {
    CheckReport {
        op: op.to_string(),
        seed,
        coords,
        max_rel_err,
        tol,
    }
}

fn check_conv1d(seed: u64, tol: f64, out: &mut Vec<CheckReport>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, c) = (5usize, 3usize);
    let x = Tensor::uniform(&[t, c], -1.0, 1.0, &mut rng);
    let mut store = ParamStore::new();
    let w = store.register("w", Tensor::uniform(&[c, c, 3], -1.0, 1.0, &mut rng));
    let b = store.register("b", Tensor::uniform(&[c], -0.5, 0.5, &mut rng));
    let probe = Tensor::uniform(&[t, c], -1.0, 1.0, &mut rng);
    let (gx, gw, gb) = crate::tensor::conv1d_backward(&x, store.value(w), &probe).unwrap();
    let mut analytic = store.grad_buffer();
    analytic.add(w, &gw);
    analytic.add(b, &gb);
    let x_for_params = x.clone();
    let mut loss_params = |s: &ParamStore| {
        dot(
            crate::tensor::conv1d(&x_for_params, s.value(w), s.value(b))
                .unwrap()
                .data(),
            probe.data(),
        )
    };
    let (werr, wc) = check_param_coords(
        &mut store,
        &[w, b],
        &analytic,
        &mut loss_params,
        DEFAULT_EPS,
        200,
    );
    let mut loss_input = |pt: &Tensor| {
        dot(
            crate::tensor::conv1d(pt, store.value(w), store.value(b))
                .unwrap()
                .data(),
            probe.data(),
        )
    };
    let (xerr, xc) = check_tensor_coords(&x, &gx, &mut loss_input, DEFAULT_EPS, 200);
    out.push(report("conv1d", seed, wc + xc, werr.max(xerr), tol));
}

fn check_cpag(seed: u64, tol: f64, out: &mut Vec<CheckReport>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = CpagShape {
        c: 2,
        h: 5,
        w: 4,
        c_out: 3,
        h_out: 4,
        w_out: 3,
    };
    let mut store = ParamStore::new();
    let params = CpagParams::init(&mut store, "cpag", shape, &mut rng);
    let t = 3;
    let f = Tensor::uniform(&[t, shape.c, shape.h, shape.w], -1.0, 1.0, &mut rng);
    let probe = Tensor::uniform(&[t, shape.c_out, shape.h_out, shape.w_out], -1.0, 1.0, &mut rng);
    let target = (t, shape.c_out, shape.h_out, shape.w_out);
    let (_, ctx) = generate_attention(&f, target, &store, &params).unwrap();
    let mut analytic = store.grad_buffer();
    generate_attention_backward(&probe, &f, &store, &params, &ctx, &mut analytic).unwrap();
    let mut loss = |s: &ParamStore| {
        let (a, _) = generate_attention(&f, target, s, &params).unwrap();
        dot(a.data(), probe.data())
    };
    for (name, ids) in [
        ("cpag.h_fc", vec![params.w_h, params.b_h]),
        ("cpag.v_fc", vec![params.w_v, params.b_v]),
        ("cpag.gamma", vec![params.gamma_raw]),
        (
            "cpag.qk_conv",
            vec![params.q_weight, params.q_bias, params.k_weight, params.k_bias],
        ),
    ] {
        let (err, n) =
            check_param_coords(&mut store, &ids, &analytic, &mut loss, DEFAULT_EPS, 120);
        out.push(report(name, seed, n, err, tol));
    }
}

fn check_fph(seed: u64, tol: f64, out: &mut Vec<CheckReport>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = FphParams::init(&mut store, "fph", 2, 2, 3, PoolMode::Mean, &mut rng).unwrap();
    let x = Tensor::uniform(&[2, 2, 6, 5], -1.0, 1.0, &mut rng);
    let probe = Tensor::uniform(&[feature_len(2, 3)], -1.0, 1.0, &mut rng);
    let (_, ctx) = fph_forward(&x, &store, &params).unwrap();
    let mut analytic = store.grad_buffer();
    let gx = fph_backward(&probe, &x, &store, &params, &ctx, &mut analytic).unwrap();
    let mut loss = |s: &ParamStore| {
        let (feat, _) = fph_forward(&x, s, &params).unwrap();
        dot(feat.data(), probe.data())
    };
    let (werr, wn) = check_param_coords(
        &mut store,
        &[params.w_p, params.b_p],
        &analytic,
        &mut loss,
        DEFAULT_EPS,
        120,
    );
    out.push(report("fph.w_p", seed, wn, werr, tol));
    let mut loss_in = |pt: &Tensor| {
        let (feat, _) = fph_forward(pt, &store, &params).unwrap();
        dot(feat.data(), probe.data())
    };
    let (xerr, xn) = check_tensor_coords(&x, &gx, &mut loss_in, DEFAULT_EPS, 120);
    out.push(report("fph.input", seed, xn, xerr, tol));
}

fn check_classifier_and_tde(seed: u64, tol: f64, out: &mut Vec<CheckReport>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (classes, d) = (4usize, 6usize);
    let mut store = ParamStore::new();
    let w_c = store.register("w_c", Tensor::uniform(&[classes, d], -1.0, 1.0, &mut rng));
    let b_c = store.register("b_c", Tensor::uniform(&[classes], -0.3, 0.3, &mut rng));
    let x_f = Tensor::uniform(&[d], -1.0, 1.0, &mut rng);
    let x_cf = Tensor::uniform(&[d], -1.0, 1.0, &mut rng);
    let y = 2usize;
    let (_, ctx) = tde_loss(&x_f, &x_cf, &store, w_c, b_c, y).unwrap();
    let mut analytic = store.grad_buffer();
    let mut g_xf = Tensor::zeros(&[d]);
    let mut g_xcf = Tensor::zeros(&[d]);
    tde_loss_backward(
        &x_f, &x_cf, &store, w_c, b_c, y, &ctx, 1.0, &mut g_xf, &mut g_xcf, &mut analytic,
    );
    let xf_outer = x_f.clone();
    let xcf_outer = x_cf.clone();
    let mut loss = |s: &ParamStore| tde_loss(&xf_outer, &xcf_outer, s, w_c, b_c, y).unwrap().0;
    let (werr, wn) =
        check_param_coords(&mut store, &[w_c, b_c], &analytic, &mut loss, DEFAULT_EPS, 200);
    out.push(report("classifier.w_c", seed, wn, werr, tol));

    let mut loss_f = |pt: &Tensor| tde_loss(pt, &x_cf, &store, w_c, b_c, y).unwrap().0;
    let (e1, n1) = check_tensor_coords(&x_f, &g_xf, &mut loss_f, DEFAULT_EPS, 200);
    let mut loss_cf = |pt: &Tensor| tde_loss(&x_f, pt, &store, w_c, b_c, y).unwrap().0;
    let (e2, n2) = check_tensor_coords(&x_cf, &g_xcf, &mut loss_cf, DEFAULT_EPS, 200);
    out.push(report("tde", seed, n1 + n2, e1.max(e2), tol));
}

fn check_triplet(seed: u64, tol: f64, out: &mut Vec<CheckReport>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = vec![0usize, 0, 1, 1, 2, 2];
    let embs: Vec<Tensor> = (0..6)
        .map(|_| Tensor::uniform(&[4], -1.0, 1.0, &mut rng))
        .collect();
    let margin = 0.2;
    let (_, ctx) = triplet_loss(&embs, &labels, margin).unwrap();
    let mut analytic: Vec<Tensor> = (0..6).map(|_| Tensor::zeros(&[4])).collect();
    triplet_backward(&embs, &labels, margin, &ctx, 1.0, &mut analytic);
    let mut worst = 0.0f64;
    let mut coords = 0usize;
    for i in 0..embs.len() {
        let mut loss = |pt: &Tensor| {
            let mut all = embs.clone();
            all[i] = pt.clone();
            triplet_loss(&all, &labels, margin).unwrap().0
        };
        let (e, n) = check_tensor_coords(&embs[i], &analytic[i], &mut loss, DEFAULT_EPS, 50);
        worst = worst.max(e);
        coords += n;
    }
    out.push(report("triplet", seed, coords, worst, tol));
}

fn check_info_nce(seed: u64, tol: f64, variant: InfoNceVariant, out: &mut Vec<CheckReport>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 6usize;
    // Positive-quadrant features keep the literal variant's ratios positive
    // under perturbation.
    let (lo, hi) = match variant {
        InfoNceVariant::Exp => (-1.0, 1.0),
        InfoNceVariant::Literal => (0.1, 1.0),
    };
    let x_a = Tensor::uniform(&[d], lo, hi, &mut rng);
    let s_f: Vec<Tensor> = (0..2).map(|_| Tensor::uniform(&[d], lo, hi, &mut rng)).collect();
    let s_cf: Vec<Tensor> = (0..2).map(|_| Tensor::uniform(&[d], lo, hi, &mut rng)).collect();
    let refs_f: Vec<&Tensor> = s_f.iter().collect();
    let refs_cf: Vec<&Tensor> = s_cf.iter().collect();
    let (_, ctx) = info_nce(&x_a, &refs_f, &refs_cf, variant).unwrap();
    let mut g_xa = Tensor::zeros(&[d]);
    let mut g_sf: Vec<Tensor> = (0..2).map(|_| Tensor::zeros(&[d])).collect();
    let mut g_scf: Vec<Tensor> = (0..2).map(|_| Tensor::zeros(&[d])).collect();
    info_nce_backward(
        &x_a, &refs_f, &refs_cf, variant, &ctx, 1.0, &mut g_xa, &mut g_sf, &mut g_scf,
    );
    let eval = |xa: &Tensor, sf: &[Tensor], scf: &[Tensor]| -> f64 {
        let rf: Vec<&Tensor> = sf.iter().collect();
        let rcf: Vec<&Tensor> = scf.iter().collect();
        info_nce(xa, &rf, &rcf, variant).unwrap().0
    };
    let mut worst = 0.0f64;
    let mut coords = 0usize;
    {
        let mut loss = |pt: &Tensor| eval(pt, &s_f, &s_cf);
        let (e, n) = check_tensor_coords(&x_a, &g_xa, &mut loss, DEFAULT_EPS, 50);
        worst = worst.max(e);
        coords += n;
    }
    for i in 0..2 {
        let mut loss = |pt: &Tensor| {
            let mut sf = s_f.clone();
            sf[i] = pt.clone();
            eval(&x_a, &sf, &s_cf)
        };
        let (e, n) = check_tensor_coords(&s_f[i], &g_sf[i], &mut loss, DEFAULT_EPS, 50);
        worst = worst.max(e);
        coords += n;
        let mut loss = |pt: &Tensor| {
            let mut scf = s_cf.clone();
            scf[i] = pt.clone();
            eval(&x_a, &s_f, &scf)
        };
        let (e, n) = check_tensor_coords(&s_cf[i], &g_scf[i], &mut loss, DEFAULT_EPS, 50);
        worst = worst.max(e);
        coords += n;
    }
    let name = match variant {
        InfoNceVariant::Exp => "info_nce.exp",
        InfoNceVariant::Literal => "info_nce.literal",
    };
    out.push(report(name, seed, coords, worst, tol));
}

/// Full training-step objective on the micro model (stage widths 2-4-8,
/// T=4, 8x8 frames): every parameter tensor in the store is swept.
fn check_total_loss(seed: u64, tol: f64, out: &mut Vec<CheckReport>) {
    let bb = BackboneConfig {
        widths: vec![1, 2, 4, 8],
        downsample: vec![false, false, false],
        embedding_dim: 8,
        cltd_stages: 3,
    };
    let tr = TrainConfig {
        lambda: vec![0.1, 0.2, 0.3],
        window: 3,
        c_o: 2,
        seed,
        ..TrainConfig::default()
    };
    let mut model = Model::init(&bb, &tr, 3, (8, 8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let batch: Vec<BatchItem> = [0usize, 0, 1, 1]
        .iter()
        .map(|&label| BatchItem {
            input: Tensor::uniform(&[4, 1, 8, 8], 0.0, 1.0, &mut rng),
            label,
        })
        .collect();
    let (_, state) = model.forward_losses(&batch).unwrap();
    let analytic = model.backward(&batch, &state).unwrap();
    let ids: Vec<ParamId> = model.store.ids().collect();
    let mut worst = 0.0f64;
    let mut coords = 0usize;
    let mut skipped = 0usize;
    for id in ids {
        let n = model.store.value(id).len();
        for i in coords_for(n, 16) {
            let orig = model.store.value(id).data()[i];
            model.store.value_mut(id).data_mut()[i] = orig + DEFAULT_EPS;
            let (lp, sp) = model.forward_losses(&batch).unwrap();
            model.store.value_mut(id).data_mut()[i] = orig - DEFAULT_EPS;
            let (lm, sm) = model.forward_losses(&batch).unwrap();
            model.store.value_mut(id).data_mut()[i] = orig;
            // A leaky-ReLU kink between the two evaluation points makes the
            // central difference invalid for this coordinate; skip it.
            if sp.activation_signs() != sm.activation_signs() {
                skipped += 1;
                continue;
            }
            let fd = (lp.total - lm.total) / (2.0 * DEFAULT_EPS);
            worst = worst.max(rel_err(fd, analytic.grad(id).data()[i]));
            coords += 1;
        }
    }
    log::debug!("total_loss gradcheck: {coords} coords, {skipped} skipped at activation kinks");
    out.push(report("total_loss", seed, coords, worst, tol));
}

/// Run every check for every seed. The CLI `gradcheck` subcommand prints one
/// line per report and fails when any exceeds the tolerance.
pub fn run_suite(seeds: &[u64], tol: f64) -> Vec<CheckReport> {
    let mut out = Vec::new();
    for &seed in seeds {
        check_conv1d(seed, tol, &mut out);
        check_cpag(seed, tol, &mut out);
        check_fph(seed, tol, &mut out);
        check_classifier_and_tde(seed, tol, &mut out);
        check_triplet(seed, tol, &mut out);
        check_info_nce(seed, tol, InfoNceVariant::Exp, &mut out);
        check_info_nce(seed, tol, InfoNceVariant::Literal, &mut out);
        check_total_loss(seed, tol, &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut f = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
        let g = finite_diff_grad(&mut f, &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        // CE of softmax at logits (0,0), label 0: gradient (-0.5, +0.5).
        let x = Tensor::zeros(&[2]);
        let mut f = |t: &Tensor| {
            let m = t.data().iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let sum: f64 = t.data().iter().map(|v| (v - m).exp()).sum();
            sum.ln() + m - t.data()[0]
        };
        let g = finite_diff_grad(&mut f, &x, 1e-5).unwrap();
        assert!((g.data()[0] + 0.5).abs() < 1e-6);
        assert!((g.data()[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_finite_evaluation_is_an_oracle_failure() {
        // ln(x) at 0: the negative-side evaluation is NaN.
        let x = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let mut f = |t: &Tensor| t.data()[0].ln();
        assert!(finite_diff_grad(&mut f, &x, 1e-5).is_err());
    }

    #[test]
    fn suite_passes_on_one_seed() {
        let reports = run_suite(&[1], DEFAULT_TOL);
        assert!(!reports.is_empty());
        for r in &reports {
            assert!(
                r.passed(),
                "{} seed {}: max rel err {:.3e} over {} coords",
                r.op,
                r.seed,
                r.max_rel_err,
                r.coords
            );
        }
        // Every op the acceptance gate names is present.
        for op in [
            "conv1d",
            "cpag.h_fc",
            "cpag.v_fc",
            "cpag.gamma",
            "fph.w_p",
            "classifier.w_c",
            "triplet",
            "info_nce.exp",
            "info_nce.literal",
            "tde",
            "total_loss",
        ] {
            assert!(reports.iter().any(|r| r.op == op), "missing {op}");
        }
    }
}
