//! Training loop: staged backbone with per-stage training hooks, plain SGD,
//! P x K batch sampling, JSON-lines metrics and binary checkpoints.
//!
//! A step runs batched forward passes (parallel over fixed-size sample
//! chunks), computes the batch-level losses (triplet + cross-entropy on the
//! embedding, contrastive + TDE terms per stage), then pushes gradients back
//! through every path. Chunk gradient buffers merge in index order, so the
//! result is bit-identical no matter how many threads run.

use crate::backbone::{backbone_backward, backbone_forward, BackboneConfig, BackboneCtx, BackboneParams};
use crate::error::{Error, Result};
use crate::loss::{
    cross_entropy, info_nce, info_nce_backward, stage_features, stage_features_backward,
    subject_groups, tde_loss, tde_loss_backward, CltdStage, InfoNceCtx, InfoNceVariant,
    StageFeaturesCtx, StageLossBundle, TdeCtx,
};
use crate::param::{GradBuffer, ParamId, ParamStore};
use crate::synth::Dataset;
use crate::tensor::{PoolMode, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Per-stage loss weights; the count must match the backbone hook count.
    pub lambda: Vec<f64>,
    pub triplet_margin: f64,
    pub learning_rate: f64,
    pub steps: usize,
    /// Batch sampler: P subjects x K sequences.
    pub p_subjects: usize,
    pub k_sequences: usize,
    pub seed: u64,
    pub nce_variant: InfoNceVariant,
    /// Low-frequency window size (odd).
    pub window: usize,
    /// Projection head output channels.
    pub c_o: usize,
    pub temporal_pool: PoolMode,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lambda: vec![0.1, 0.2, 0.3],
            triplet_margin: 0.2,
            learning_rate: 0.05,
            steps: 2000,
            p_subjects: 4,
            k_sequences: 4,
            seed: 0,
            nce_variant: InfoNceVariant::Exp,
            window: 7,
            c_o: 128,
            temporal_pool: PoolMode::Mean,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|&l| l < 0.0) {
            return Err(Error::Validation("lambda weights must be nonnegative".into()));
        }
        if self.p_subjects < 2 || self.k_sequences < 2 {
            return Err(Error::Validation(
                "batch sampler needs P >= 2 subjects and K >= 2 sequences".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Validation("learning rate must be positive".into()));
        }
        Ok(())
    }
}

fn component_seed(base: u64, tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One training sample handed to the step: input clip plus class index.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub input: Tensor,
    pub label: usize,
}

/// Backbone plus training-only heads. Stages exist only for hooks whose
/// lambda is nonzero, and their parameters come from RNG streams independent
/// of the backbone's, so the inference path is identical with or without
/// them.
pub struct Model {
    pub store: ParamStore,
    pub backbone: BackboneParams,
    /// (1-based backbone stage index, stage parameters).
    pub stages: Vec<(usize, CltdStage)>,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub num_classes: usize,
    pub triplet_margin: f64,
}

impl Model {
    pub fn init(
        bb_cfg: &BackboneConfig,
        tr_cfg: &TrainConfig,
        num_classes: usize,
        input_hw: (usize, usize),
    ) -> Result<Model> {
        bb_cfg.validate()?;
        tr_cfg.validate()?;
        if tr_cfg.lambda.len() != bb_cfg.cltd_stages {
            return Err(Error::Validation(format!(
                "{} lambda weights for {} hook stages",
                tr_cfg.lambda.len(),
                bb_cfg.cltd_stages
            )));
        }
        if num_classes < 2 {
            return Err(Error::Validation("need at least 2 training classes".into()));
        }
        let mut store = ParamStore::new();
        let mut bb_rng = ChaCha8Rng::seed_from_u64(component_seed(tr_cfg.seed, "backbone"));
        let backbone = BackboneParams::init(&mut store, bb_cfg, &mut bb_rng)?;
        let mut head_rng = ChaCha8Rng::seed_from_u64(component_seed(tr_cfg.seed, "head"));
        let emb = bb_cfg.embedding_dim;
        let scale = (1.0 / emb as f64).sqrt();
        let head_w = store.register(
            "head.weight",
            Tensor::uniform(&[num_classes, emb], -scale, scale, &mut head_rng),
        );
        let head_b = store.register("head.bias", Tensor::zeros(&[num_classes]));

        let shapes = bb_cfg.map_shapes(input_hw.0, input_hw.1);
        let mut stages = Vec::new();
        for (i, &lambda) in tr_cfg.lambda.iter().enumerate() {
            if lambda == 0.0 {
                continue;
            }
            let stage_idx = i + 1;
            let (c_next, h_next, w_next) = shapes[stage_idx];
            if tr_cfg.window > h_next.min(w_next) {
                return Err(Error::Validation(format!(
                    "window {} exceeds stage {} map {}x{}",
                    tr_cfg.window, stage_idx, h_next, w_next
                )));
            }
            let mut rng =
                ChaCha8Rng::seed_from_u64(component_seed(tr_cfg.seed, &format!("cltd.stage{stage_idx}")));
            let stage = CltdStage::init(
                &mut store,
                stage_idx,
                lambda,
                shapes[stage_idx - 1],
                (c_next, h_next, w_next),
                tr_cfg.window,
                tr_cfg.c_o,
                num_classes,
                tr_cfg.nce_variant,
                &mut rng,
            )?;
            stages.push((stage_idx, stage));
        }
        Ok(Model {
            store,
            backbone,
            stages,
            head_w,
            head_b,
            num_classes,
            triplet_margin: tr_cfg.triplet_margin,
        })
    }
}

// ---------------------------------------------------------------------------
// Batch-level losses
// ---------------------------------------------------------------------------

pub struct TripletCtx {
    /// Pairwise Euclidean distances, row-major N x N.
    pub dists: Vec<f64>,
    pub valid: usize,
}

/// Batch-all triplet loss: mean over every valid (anchor, positive,
/// negative) combination of max(0, d_ap - d_an + margin).
pub fn triplet_loss(
    embeddings: &[Tensor],
    labels: &[usize],
    margin: f64,
) -> Result<(f64, TripletCtx)> {
    let n = embeddings.len();
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::Loss("triplet loss needs at least two classes in the batch".into()));
    }
    let mut dists = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = embeddings[i]
                .data()
                .iter()
                .zip(embeddings[j].data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dists[i * n + j] = d;
            dists[j * n + i] = d;
        }
    }
    let mut sum = 0.0;
    let mut valid = 0usize;
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for neg in 0..n {
                if labels[neg] == labels[a] {
                    continue;
                }
                valid += 1;
                sum += (dists[a * n + p] - dists[a * n + neg] + margin).max(0.0);
            }
        }
    }
    Ok((sum / valid as f64, TripletCtx { dists, valid }))
}

/// Backward of [`triplet_loss`] scaled by `g`, accumulated into per-sample
/// embedding gradients.
pub fn triplet_backward(
    embeddings: &[Tensor],
    labels: &[usize],
    margin: f64,
    ctx: &TripletCtx,
    g: f64,
    grads: &mut [Tensor],
) {
    let n = embeddings.len();
    let coef = g / ctx.valid as f64;
    let pair = |i: usize, j: usize, scale: f64, grads: &mut [Tensor]| {
        // d d(i,j) / d e_i = (e_i - e_j) / d
        let d = ctx.dists[i * n + j];
        if d < 1e-12 {
            return;
        }
        for k in 0..embeddings[i].len() {
            let diff = (embeddings[i].data()[k] - embeddings[j].data()[k]) / d;
            grads[i].data_mut()[k] += scale * diff;
            grads[j].data_mut()[k] -= scale * diff;
        }
    };
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for neg in 0..n {
                if labels[neg] == labels[a] {
                    continue;
                }
                let hinge = ctx.dists[a * n + p] - ctx.dists[a * n + neg] + margin;
                if hinge > 0.0 {
                    pair(a, p, coef, grads);
                    pair(a, neg, -coef, grads);
                }
            }
        }
    }
}

/// Combined objective: tri + ce + sum_i lambda_i * stage_total_i.
pub fn total_loss(tri: f64, ce: f64, stage_totals: &[f64], lambda: &[f64]) -> Result<f64> {
    if stage_totals.len() != lambda.len() {
        return Err(Error::Validation(format!(
            "{} stage totals vs {} lambda weights",
            stage_totals.len(),
            lambda.len()
        )));
    }
    Ok(tri
        + ce
        + stage_totals
            .iter()
            .zip(lambda)
            .map(|(t, l)| l * t)
            .sum::<f64>())
}

// ---------------------------------------------------------------------------
// Step execution
// ---------------------------------------------------------------------------

struct StageSampleFwd {
    x_f: Tensor,
    x_cf: Tensor,
    x_a: Tensor,
    ctx: StageFeaturesCtx,
}

struct SampleFwd {
    maps: Vec<Tensor>,
    emb: Tensor,
    bb_ctx: BackboneCtx,
    stages: Vec<StageSampleFwd>,
}

pub struct ForwardState {
    samples: Vec<SampleFwd>,
    nce: Vec<Vec<(usize, InfoNceCtx)>>,
    tde: Vec<Vec<TdeCtx>>,
    tri: TripletCtx,
    ce_probs: Vec<Vec<f64>>,
}

impl ForwardState {
    /// Sign pattern of every backbone activation. Two nearby parameter
    /// points with different patterns straddle a leaky-ReLU kink, where
    /// finite differences stop being a valid oracle.
    pub fn activation_signs(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for s in &self.samples {
            for m in &s.maps[1..] {
                out.extend(m.data().iter().map(|&v| v >= 0.0));
            }
        }
        out
    }
}

/// Scalar losses of one step.
#[derive(Debug, Clone, Serialize)]
pub struct StepLosses {
    pub tri: f64,
    pub ce: f64,
    pub bundles: Vec<StageLossBundle>,
    pub total: f64,
}

/// Fixed chunking: at most four chunks regardless of thread count, so float
/// accumulation order is a function of the batch alone.
fn chunk_len(n: usize) -> usize {
    n.div_ceil(4)
}

fn par_map<T: Sync, U: Send>(
    items: &[T],
    f: impl Fn(&T) -> Result<U> + Sync,
) -> Result<Vec<U>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(&f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(&f).collect()
    }
}

impl Model {
    fn forward_one(&self, item: &BatchItem) -> Result<SampleFwd> {
        let (maps, emb, bb_ctx) = backbone_forward(&item.input, &self.store, &self.backbone)?;
        let mut stage_fwd = Vec::with_capacity(self.stages.len());
        for (idx, stage) in &self.stages {
            let (x_f, x_cf, x_a, ctx) =
                stage_features(&maps[idx - 1], &maps[*idx], &self.store, stage)?;
            stage_fwd.push(StageSampleFwd { x_f, x_cf, x_a, ctx });
        }
        Ok(SampleFwd {
            maps,
            emb,
            bb_ctx,
            stages: stage_fwd,
        })
    }

    /// Forward pass plus every scalar loss; no gradients yet.
    pub fn forward_losses(&self, batch: &[BatchItem]) -> Result<(StepLosses, ForwardState)> {
        let samples = {
            let chunks: Vec<&[BatchItem]> = batch.chunks(chunk_len(batch.len())).collect();
            let per_chunk = par_map(&chunks, |chunk| {
                chunk.iter().map(|item| self.forward_one(item)).collect::<Result<Vec<_>>>()
            })?;
            per_chunk.into_iter().flatten().collect::<Vec<_>>()
        };
        let labels: Vec<usize> = batch.iter().map(|b| b.label).collect();
        let embeddings: Vec<Tensor> = samples.iter().map(|s| s.emb.clone()).collect();
        let (tri, tri_ctx) = triplet_loss(&embeddings, &labels, self.triplet_margin)?;

        let head_w = self.store.value(self.head_w);
        let head_b = self.store.value(self.head_b);
        let mut ce_sum = 0.0;
        let mut ce_probs = Vec::with_capacity(samples.len());
        for (s, &label) in samples.iter().zip(&labels) {
            let mut logits = vec![0.0; self.num_classes];
            for cl in 0..self.num_classes {
                logits[cl] = crate::tensor::dot(
                    &head_w.data()[cl * s.emb.len()..(cl + 1) * s.emb.len()],
                    s.emb.data(),
                ) + head_b.data()[cl];
            }
            let (l, p) = cross_entropy(&logits, label);
            ce_sum += l;
            ce_probs.push(p);
        }
        let ce = ce_sum / samples.len() as f64;

        let groups = subject_groups(&labels);
        let mut bundles = Vec::with_capacity(self.stages.len());
        let mut nce_state = Vec::with_capacity(self.stages.len());
        let mut tde_state = Vec::with_capacity(self.stages.len());
        for (si, (_, stage)) in self.stages.iter().enumerate() {
            let mut anchors = Vec::new();
            let mut nce_sum = 0.0;
            for (_, members) in &groups {
                if members.len() < 2 {
                    log::debug!("singleton subject in batch: TDE term only");
                    continue;
                }
                for &a in members {
                    let s_f: Vec<&Tensor> =
                        members.iter().map(|&m| &samples[m].stages[si].x_f).collect();
                    let s_cf: Vec<&Tensor> =
                        members.iter().map(|&m| &samples[m].stages[si].x_cf).collect();
                    let (l, ctx) =
                        info_nce(&samples[a].stages[si].x_a, &s_f, &s_cf, stage.nce_variant)?;
                    nce_sum += l;
                    anchors.push((a, ctx));
                }
            }
            let l_nce = if anchors.is_empty() {
                0.0
            } else {
                nce_sum / anchors.len() as f64
            };
            let mut tdes = Vec::with_capacity(samples.len());
            let mut tde_sum = 0.0;
            for (s, &label) in samples.iter().zip(&labels) {
                let (l, ctx) = tde_loss(
                    &s.stages[si].x_f,
                    &s.stages[si].x_cf,
                    &self.store,
                    stage.w_c,
                    stage.b_c,
                    label,
                )?;
                tde_sum += l;
                tdes.push(ctx);
            }
            bundles.push(StageLossBundle::new(l_nce, tde_sum / samples.len() as f64));
            nce_state.push(anchors);
            tde_state.push(tdes);
        }

        let lambdas: Vec<f64> = self.stages.iter().map(|(_, s)| s.lambda).collect();
        let totals: Vec<f64> = bundles.iter().map(|b| b.total).collect();
        let total = total_loss(tri, ce, &totals, &lambdas)?;
        let losses = StepLosses {
            tri,
            ce,
            bundles,
            total,
        };
        for (name, v) in [("tri", tri), ("ce", ce), ("total", total)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss term {name} = {v}")));
            }
        }
        Ok((
            losses,
            ForwardState {
                samples,
                nce: nce_state,
                tde: tde_state,
                tri: tri_ctx,
                ce_probs,
            },
        ))
    }

    /// Full batch gradient for the combined objective.
    pub fn backward(&self, batch: &[BatchItem], state: &ForwardState) -> Result<GradBuffer> {
        let n = batch.len();
        let labels: Vec<usize> = batch.iter().map(|b| b.label).collect();
        let emb_dim = state.samples[0].emb.len();
        let mut g_emb: Vec<Tensor> = (0..n).map(|_| Tensor::zeros(&[emb_dim])).collect();
        let embeddings: Vec<Tensor> = state.samples.iter().map(|s| s.emb.clone()).collect();
        triplet_backward(
            &embeddings,
            &labels,
            self.triplet_margin,
            &state.tri,
            1.0,
            &mut g_emb,
        );
        // Cross-entropy head; classifier grads go into a batch-level sink.
        let mut batch_sink = self.store.grad_buffer();
        let head_w = self.store.value(self.head_w);
        let g_ce = 1.0 / n as f64;
        let mut g_head_w = Tensor::zeros(head_w.shape());
        let mut g_head_b = Tensor::zeros(&[self.num_classes]);
        for (s, sample) in state.samples.iter().enumerate() {
            for cl in 0..self.num_classes {
                let onehot = if cl == labels[s] { 1.0 } else { 0.0 };
                let d = g_ce * (state.ce_probs[s][cl] - onehot);
                for k in 0..emb_dim {
                    g_emb[s].data_mut()[k] += d * head_w.data()[cl * emb_dim + k];
                    g_head_w.data_mut()[cl * emb_dim + k] += d * sample.emb.data()[k];
                }
                g_head_b.data_mut()[cl] += d;
            }
        }
        batch_sink.add(self.head_w, &g_head_w);
        batch_sink.add(self.head_b, &g_head_b);

        // Stage feature gradients (batch-coupled terms).
        let feat_dim = self
            .stages
            .first()
            .map(|(_, s)| crate::fph::feature_len(s.fph.c_o, s.fph.k));
        let mut g_feats: Vec<Vec<(Tensor, Tensor, Tensor)>> = (0..n)
            .map(|_| {
                self.stages
                    .iter()
                    .map(|_| {
                        let d = feat_dim.unwrap();
                        (
                            Tensor::zeros(&[d]),
                            Tensor::zeros(&[d]),
                            Tensor::zeros(&[d]),
                        )
                    })
                    .collect()
            })
            .collect();
        let groups = subject_groups(&labels);
        for (si, (_, stage)) in self.stages.iter().enumerate() {
            let anchors = &state.nce[si];
            if !anchors.is_empty() {
                let g_nce = stage.lambda / anchors.len() as f64;
                let mut it = anchors.iter();
                for (_, members) in &groups {
                    if members.len() < 2 {
                        continue;
                    }
                    for &a in members {
                        let (stored, nce_ctx) = it.next().expect("anchor alignment");
                        debug_assert_eq!(*stored, a);
                        let s_f: Vec<&Tensor> =
                            members.iter().map(|&m| &state.samples[m].stages[si].x_f).collect();
                        let s_cf: Vec<&Tensor> =
                            members.iter().map(|&m| &state.samples[m].stages[si].x_cf).collect();
                        let dlen = feat_dim.unwrap();
                        let mut g_xa = Tensor::zeros(&[dlen]);
                        let mut g_sf: Vec<Tensor> =
                            members.iter().map(|_| Tensor::zeros(&[dlen])).collect();
                        let mut g_scf: Vec<Tensor> =
                            members.iter().map(|_| Tensor::zeros(&[dlen])).collect();
                        info_nce_backward(
                            &state.samples[a].stages[si].x_a,
                            &s_f,
                            &s_cf,
                            stage.nce_variant,
                            nce_ctx,
                            g_nce,
                            &mut g_xa,
                            &mut g_sf,
                            &mut g_scf,
                        );
                        g_feats[a][si].2.add_assign(&g_xa)?;
                        for (slot, &m) in members.iter().enumerate() {
                            g_feats[m][si].0.add_assign(&g_sf[slot])?;
                            g_feats[m][si].1.add_assign(&g_scf[slot])?;
                        }
                    }
                }
            }
            let g_tde = stage.lambda / n as f64;
            for s in 0..n {
                let slot = &mut g_feats[s][si];
                tde_loss_backward(
                    &state.samples[s].stages[si].x_f,
                    &state.samples[s].stages[si].x_cf,
                    &self.store,
                    stage.w_c,
                    stage.b_c,
                    labels[s],
                    &state.tde[si][s],
                    g_tde,
                    &mut slot.0,
                    &mut slot.1,
                    &mut batch_sink,
                );
            }
        }

        // Per-sample backward in fixed chunks.
        let jobs: Vec<usize> = (0..n).collect();
        let chunk = chunk_len(n);
        let chunks: Vec<&[usize]> = jobs.chunks(chunk).collect();
        let chunk_sinks = par_map(&chunks, |chunk| {
            let mut sink = self.store.grad_buffer();
            for &s in *chunk {
                let sample = &state.samples[s];
                let mut grad_maps: Vec<Option<Tensor>> = vec![None; sample.maps.len()];
                for (si, (idx, stage)) in self.stages.iter().enumerate() {
                    let g = &g_feats[s][si];
                    let (g_fi, g_fnext) = stage_features_backward(
                        (&g.0, &g.1, &g.2),
                        (&sample.maps[idx - 1], &sample.maps[*idx]),
                        &self.store,
                        stage,
                        &sample.stages[si].ctx,
                        &mut sink,
                    )?;
                    match &mut grad_maps[idx - 1] {
                        Some(t) => t.add_assign(&g_fi)?,
                        slot => *slot = Some(g_fi),
                    }
                    match &mut grad_maps[*idx] {
                        Some(t) => t.add_assign(&g_fnext)?,
                        slot => *slot = Some(g_fnext),
                    }
                }
                backbone_backward(
                    &g_emb[s],
                    &mut grad_maps,
                    &self.store,
                    &self.backbone,
                    &sample.maps,
                    &sample.bb_ctx,
                    &mut sink,
                )?;
            }
            Ok(sink)
        })?;
        for sink in chunk_sinks {
            batch_sink.merge(&sink);
        }
        Ok(batch_sink)
    }

    /// One SGD step over the batch. Returns the pre-update losses.
    pub fn train_step(&mut self, batch: &[BatchItem], lr: f64) -> Result<StepLosses> {
        let (losses, state) = self.forward_losses(batch)?;
        let grads = self.backward(batch, &state)?;
        self.store.zero_grads();
        self.store.accumulate(&grads);
        self.store.sgd_step(lr);
        Ok(losses)
    }
}

// ---------------------------------------------------------------------------
// P x K batch sampler
// ---------------------------------------------------------------------------

pub struct PkSampler {
    groups: Vec<(usize, Vec<usize>)>,
    p: usize,
    k: usize,
    rng: ChaCha8Rng,
}

impl PkSampler {
    pub fn new(labels: &[usize], p: usize, k: usize, seed: u64) -> Result<PkSampler> {
        let groups = subject_groups(labels);
        if p < 2 || k < 2 {
            return Err(Error::Validation("sampler needs P >= 2 and K >= 2".into()));
        }
        if groups.len() < p {
            return Err(Error::Validation(format!(
                "sampler wants {p} subjects, dataset has {}",
                groups.len()
            )));
        }
        Ok(PkSampler {
            groups,
            p,
            k,
            rng: ChaCha8Rng::seed_from_u64(component_seed(seed, "sampler")),
        })
    }

    /// Indices of the next batch: P subjects, K sequences each (with
    /// replacement only when a subject has fewer than K sequences).
    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut subject_order: Vec<usize> = (0..self.groups.len()).collect();
        subject_order.shuffle(&mut self.rng);
        let mut batch = Vec::with_capacity(self.p * self.k);
        for &g in subject_order.iter().take(self.p) {
            let members = &self.groups[g].1;
            if members.len() >= self.k {
                let mut order: Vec<usize> = (0..members.len()).collect();
                order.shuffle(&mut self.rng);
                batch.extend(order.iter().take(self.k).map(|&i| members[i]));
            } else {
                for _ in 0..self.k {
                    batch.push(members[self.rng.gen_range(0..members.len())]);
                }
            }
        }
        batch
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One JSON-lines metrics record.
#[derive(Debug, Serialize)]
pub struct StepLog {
    pub event: &'static str,
    pub step: usize,
    pub tri: f64,
    pub ce: f64,
    pub stages: Vec<StageLossBundle>,
    pub total: f64,
    pub wall_ms: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub losses: Vec<StepLosses>,
}

/// Map raw identity labels to dense class indices in first-appearance order.
pub fn class_indices(dataset: &Dataset) -> Vec<(usize, usize)> {
    let mut classes: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(dataset.train.len());
    for s in &dataset.train {
        let cls = match classes.iter().position(|&c| c == s.identity) {
            Some(i) => i,
            None => {
                classes.push(s.identity);
                classes.len() - 1
            }
        };
        out.push((s.identity, cls));
    }
    out
}

/// SGD training over the dataset's train split. Writes one JSON line per
/// step into `metrics` when provided; aborts with a diagnostic on any
/// non-finite loss term.
pub fn train(
    dataset: &Dataset,
    bb_cfg: &BackboneConfig,
    tr_cfg: &TrainConfig,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    tr_cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Validation("empty training split".into()));
    }
    let mapping = class_indices(dataset);
    let labels: Vec<usize> = mapping.iter().map(|(_, c)| *c).collect();
    let num_classes = labels.iter().max().unwrap() + 1;
    let (h, w) = (dataset.config.height, dataset.config.width);
    let mut model = Model::init(bb_cfg, tr_cfg, num_classes, (h, w))?;
    let mut sampler = PkSampler::new(&labels, tr_cfg.p_subjects, tr_cfg.k_sequences, tr_cfg.seed)?;
    let mut losses = Vec::with_capacity(tr_cfg.steps);
    for step in 0..tr_cfg.steps {
        let t0 = Instant::now();
        let idx = sampler.next_batch();
        let batch: Vec<BatchItem> = idx
            .iter()
            .map(|&i| BatchItem {
                input: dataset.train[i].as_input(),
                label: labels[i],
            })
            .collect();
        let step_losses = model.train_step(&batch, tr_cfg.learning_rate).map_err(|e| {
            log::error!("step {step} aborted: {e}");
            e
        })?;
        if let Some(out) = metrics.as_deref_mut() {
            if step % tr_cfg.log_every == 0 || step + 1 == tr_cfg.steps {
                let line = StepLog {
                    event: "step",
                    step,
                    tri: step_losses.tri,
                    ce: step_losses.ce,
                    stages: step_losses.bundles.clone(),
                    total: step_losses.total,
                    wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                };
                serde_json::to_writer(&mut *out, &line)
                    .map_err(|e| Error::Format(format!("metrics serialization: {e}")))?;
                out.write_all(b"\n")?;
            }
        }
        losses.push(step_losses);
    }
    Ok(TrainOutcome { model, losses })
}
