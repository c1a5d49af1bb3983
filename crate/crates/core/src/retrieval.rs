//! Gallery/probe retrieval: nearest-neighbor by Euclidean distance with
//! deterministic tie-breaks, reported as Rank-1 / Rank-5 percentages.

use crate::backbone::{backbone_embed, BackboneParams};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::synth::SyntheticSample;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankResult {
    /// Percentages in [0, 100].
    pub rank1: f64,
    pub rank5: f64,
}

/// Embedding tagged with its identity and sequence number.
#[derive(Debug, Clone)]
pub struct TaggedEmbedding {
    pub identity: usize,
    pub sequence: usize,
    pub embedding: Tensor,
}

/// Inference-path embeddings for a set of samples. Runs only the backbone;
/// no training-module kernel is touched.
pub fn compute_embeddings(
    samples: &[SyntheticSample],
    store: &ParamStore,
    backbone: &BackboneParams,
) -> Result<Vec<TaggedEmbedding>> {
    let embed_one = |s: &SyntheticSample| -> Result<TaggedEmbedding> {
        Ok(TaggedEmbedding {
            identity: s.identity,
            sequence: s.sequence,
            embedding: backbone_embed(&s.as_input(), store, backbone)?,
        })
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        samples.par_iter().map(embed_one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        samples.iter().map(embed_one).collect()
    }
}

fn sq_dist(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Rank-r = fraction of probes whose true label appears among the r nearest
/// gallery items (ties broken by gallery index order). Probes whose label is
/// absent from the gallery count as misses and are logged.
pub fn evaluate_rank(
    gallery: &[(usize, Tensor)],
    probe: &[(usize, Tensor)],
) -> Result<RankResult> {
    if gallery.is_empty() {
        return Err(Error::Validation("empty gallery".into()));
    }
    if probe.is_empty() {
        return Err(Error::Validation("empty probe set".into()));
    }
    let mut hit1 = 0usize;
    let mut hit5 = 0usize;
    for (label, emb) in probe {
        if !gallery.iter().any(|(gl, _)| gl == label) {
            log::warn!("probe label {label} absent from gallery; counted as miss");
            continue;
        }
        let mut order: Vec<usize> = (0..gallery.len()).collect();
        let dists: Vec<f64> = gallery.iter().map(|(_, g)| sq_dist(emb, g)).collect();
        // Stable sort keeps gallery index order on ties.
        order.sort_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap());
        if gallery[order[0]].0 == *label {
            hit1 += 1;
        }
        if order.iter().take(5).any(|&i| gallery[i].0 == *label) {
            hit5 += 1;
        }
    }
    let n = probe.len() as f64;
    Ok(RankResult {
        rank1: 100.0 * hit1 as f64 / n,
        rank5: 100.0 * hit5 as f64 / n,
    })
}

/// CSV rows `id,seq,d0..dD-1`, one embedding per line, with header.
pub fn embeddings_to_csv(embs: &[TaggedEmbedding]) -> String {
    let mut out = String::new();
    if let Some(first) = embs.first() {
        out.push_str("id,seq");
        for i in 0..first.embedding.len() {
            out.push_str(&format!(",d{i}"));
        }
        out.push('\n');
    }
    for e in embs {
        out.push_str(&format!("{},{}", e.identity, e.sequence));
        for v in e.embedding.data() {
            out.push_str(&format!(",{v:.17e}"));
        }
        out.push('\n');
    }
    out
}
