//! Empirical check of the attention-decomposition cost claim: exact
//! multiply-accumulate counts and single-threaded wall clock for dense
//! spatio-temporal self-attention versus the decomposed generator.
//!
//! The naive path treats every (t, h, w) position as a token of dimension c
//! and runs scores + aggregation (2 n^2 c MACs, softmax not counted). The
//! decomposed path counts its two attention matmuls, t^2 c + t^2 h w'.

use crate::cpag::{
    cpag_attention_macs, cpag_formula_flops, generate_attention, naive_attention_flops,
    CpagParams, CpagShape,
};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{dims4, dot, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Refuse naive attention beyond this many tokens unless a caller opts in
/// with an explicit limit.
pub const DEFAULT_TOKEN_GUARD: usize = 4096;

pub struct NaiveAttentionOutput {
    pub output: Tensor,
    /// Exact MAC count of the scores and aggregation matmuls.
    pub macs: u64,
}

/// Dense self-attention over all t*h*w tokens of dimension c, streamed row
/// by row so no n^2 matrix is materialized. Guarded to small shapes.
pub fn naive_attention_forward(f: &Tensor) -> Result<NaiveAttentionOutput> {
    naive_attention_forward_with_limit(f, DEFAULT_TOKEN_GUARD)
}

pub fn naive_attention_forward_with_limit(
    f: &Tensor,
    max_tokens: usize,
) -> Result<NaiveAttentionOutput> {
    if f.rank() != 4 {
        return Err(Error::shape("naive_attention", "rank-4 input required"));
    }
    let (t, c, h, w) = dims4(f);
    let n = t * h * w;
    if n > max_tokens {
        return Err(Error::Validation(format!(
            "naive attention refused: {n} tokens exceed the {max_tokens}-token guard"
        )));
    }
    // Gather tokens: token (t, h, w) -> row of dimension c.
    let hw = h * w;
    let mut tokens = vec![0.0f64; n * c];
    for ti in 0..t {
        for ci in 0..c {
            let plane = &f.data()[(ti * c + ci) * hw..(ti * c + ci + 1) * hw];
            for p in 0..hw {
                tokens[(ti * hw + p) * c + ci] = plane[p];
            }
        }
    }
    let mut out_tokens = vec![0.0f64; n * c];
    let mut scores = vec![0.0f64; n];
    let mut macs = 0u64;
    for i in 0..n {
        let q = &tokens[i * c..(i + 1) * c];
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(q, &tokens[j * c..(j + 1) * c]);
        }
        macs += (n * c) as u64;
        // Row softmax (not counted; the complexity law tracks the matmuls).
        let hi = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - hi).exp();
            sum += *s;
        }
        let orow = &mut out_tokens[i * c..(i + 1) * c];
        for (j, &s) in scores.iter().enumerate() {
            let wgt = s / sum;
            let v = &tokens[j * c..(j + 1) * c];
            for (o, &vv) in orow.iter_mut().zip(v) {
                *o += wgt * vv;
            }
        }
        macs += (n * c) as u64;
    }
    // Scatter back to [T, C, H, W].
    let mut output = Tensor::zeros(&[t, c, h, w]);
    for ti in 0..t {
        for ci in 0..c {
            let plane = &mut output.data_mut()[(ti * c + ci) * hw..(ti * c + ci + 1) * hw];
            for p in 0..hw {
                plane[p] = out_tokens[(ti * hw + p) * c + ci];
            }
        }
    }
    Ok(NaiveAttentionOutput { output, macs })
}

/// One measured shape. MAC counts are exact and deterministic; wall times
/// are medians over the repetitions, measured single-threaded.
#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub mac_naive: u64,
    pub mac_cpag: u64,
    pub formula_naive: u64,
    pub formula_cpag: u64,
    pub wall_ns_naive: u64,
    pub wall_ns_cpag: u64,
    pub reps: usize,
}

impl BenchRecord {
    pub fn formula_ratio(&self) -> f64 {
        self.formula_naive as f64 / self.formula_cpag as f64
    }

    pub fn wall_ratio(&self) -> f64 {
        self.wall_ns_naive as f64 / self.wall_ns_cpag.max(1) as f64
    }
}

fn median_ns(mut samples: Vec<u64>) -> u64 {
    samples.sort_unstable();
    samples[samples.len() / 2]
}

/// Run both paths on every shape. The naive token guard is lifted to each
/// shape's own token count so listed shapes always run; MAC assertions
/// (naive exact, decomposed within 20% of the t^2(c+hw) law) fail the run
/// with the offending shape named.
pub fn run_bench(shapes: &[(usize, usize, usize, usize)], reps: usize) -> Result<Vec<BenchRecord>> {
    if reps == 0 {
        return Err(Error::Validation("reps must be at least 1".into()));
    }
    let mut records = Vec::with_capacity(shapes.len());
    for &(t, c, h, w) in shapes {
        let mut rng = ChaCha8Rng::seed_from_u64(0xBE_EC4);
        let f = Tensor::uniform(&[t, c, h, w], -1.0, 1.0, &mut rng);
        // Attention target shaped like the input itself.
        let shape = CpagShape {
            c,
            h,
            w,
            c_out: c,
            h_out: h,
            w_out: w,
        };
        let mut store = ParamStore::new();
        let params = CpagParams::init(&mut store, "bench", shape, &mut rng);

        let mut mac_naive = 0u64;
        let mut naive_times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            let out = naive_attention_forward_with_limit(&f, t * h * w)?;
            naive_times.push(t0.elapsed().as_nanos() as u64);
            mac_naive = out.macs;
        }
        let mut mac_cpag = 0u64;
        let mut cpag_times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            let (_, ctx) = generate_attention(&f, (t, c, h, w), &store, &params)?;
            cpag_times.push(t0.elapsed().as_nanos() as u64);
            mac_cpag = ctx.macs.attention();
        }

        let formula_naive = naive_attention_flops(t, c, h, w);
        let formula_cpag = cpag_formula_flops(t, c, h, w);
        if mac_naive != formula_naive {
            return Err(Error::Validation(format!(
                "shape {t}x{c}x{h}x{w}: naive MACs {mac_naive} != 2t^2h^2w^2c = {formula_naive}"
            )));
        }
        debug_assert_eq!(mac_cpag, cpag_attention_macs(t, c, h, w));
        let rel = (mac_cpag as f64 - formula_cpag as f64).abs() / formula_cpag as f64;
        if rel >= 0.2 {
            return Err(Error::Validation(format!(
                "shape {t}x{c}x{h}x{w}: decomposed MACs {mac_cpag} deviate {rel:.2} from t^2(c+hw) = {formula_cpag}"
            )));
        }
        records.push(BenchRecord {
            t,
            c,
            h,
            w,
            mac_naive,
            mac_cpag,
            formula_naive,
            formula_cpag,
            wall_ns_naive: median_ns(naive_times),
            wall_ns_cpag: median_ns(cpag_times),
            reps,
        });
    }
    Ok(records)
}

/// CSV with the fixed column set.
pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(
        "t,c,h,w,mac_naive,mac_cpag,formula_naive,formula_cpag,wall_ns_naive,wall_ns_cpag\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.t,
            r.c,
            r.h,
            r.w,
            r.mac_naive,
            r.mac_cpag,
            r.formula_naive,
            r.formula_cpag,
            r.wall_ns_naive,
            r.wall_ns_cpag
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_count_example() {
        // t=2,c=3,h=2,w=2: 8 tokens, 192 + 192 = 384 MACs.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut rng);
        let out = naive_attention_forward(&f).unwrap();
        assert_eq!(out.macs, 384);
        assert_eq!(out.macs, naive_attention_flops(2, 3, 2, 2));
    }

    #[test]
    fn single_token_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::uniform(&[1, 5, 1, 1], -1.0, 1.0, &mut rng);
        let out = naive_attention_forward(&f).unwrap();
        for i in 0..5 {
            assert!((out.output.data()[i] - f.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_dense_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, c, h, w) = (2usize, 3usize, 2usize, 3usize);
        let f = Tensor::uniform(&[t, c, h, w], -1.0, 1.0, &mut rng);
        let out = naive_attention_forward(&f).unwrap();
        // Dense oracle with explicit token matrix and full score matrix.
        let n = t * h * w;
        let hw = h * w;
        let tok = |i: usize, ci: usize| -> f64 {
            let (ti, p) = (i / hw, i % hw);
            f.data()[(ti * c + ci) * hw + p]
        };
        for i in 0..n {
            let mut scores = vec![0.0; n];
            for (j, s) in scores.iter_mut().enumerate() {
                for ci in 0..c {
                    *s += tok(i, ci) * tok(j, ci);
                }
            }
            let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|v| (v - hi).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for ci in 0..c {
                let want: f64 = (0..n).map(|j| exps[j] / sum * tok(j, ci)).sum();
                let (ti, p) = (i / hw, i % hw);
                let got = out.output.data()[(ti * c + ci) * hw + p];
                assert!((got - want).abs() < 1e-12, "token {i} ch {ci}");
            }
        }
    }

    #[test]
    fn guard_refuses_big_shapes() {
        let f = Tensor::zeros(&[40, 2, 16, 11]);
        assert!(matches!(
            naive_attention_forward(&f),
            Err(Error::Validation(_))
        ));
        // With an explicit limit it runs.
        assert!(naive_attention_forward_with_limit(&Tensor::zeros(&[5, 2, 4, 4]), 80).is_ok());
    }

    #[test]
    fn mac_counts_are_deterministic_across_reps() {
        let shapes = [(4, 8, 6, 5)];
        let r1 = run_bench(&shapes, 1).unwrap();
        let r9 = run_bench(&shapes, 9).unwrap();
        assert_eq!(r1[0].mac_naive, r9[0].mac_naive);
        assert_eq!(r1[0].mac_cpag, r9[0].mac_cpag);
    }

    #[test]
    fn doubling_t_quadruples_the_decomposed_formula() {
        let base = cpag_formula_flops(15, 64, 16, 11);
        let doubled = cpag_formula_flops(30, 64, 16, 11);
        assert_eq!(doubled, 4 * base);
    }

    #[test]
    fn csv_has_exact_columns_and_ratio() {
        let shapes = [(6, 8, 4, 4)];
        let records = run_bench(&shapes, 2).unwrap();
        let csv = records_to_csv(&records);
        assert!(csv.starts_with(
            "t,c,h,w,mac_naive,mac_cpag,formula_naive,formula_cpag,wall_ns_naive,wall_ns_cpag\n"
        ));
        assert_eq!(csv.lines().count(), 2);
        // The stated reference shape ratio.
        let r = naive_attention_flops(30, 64, 16, 11) as f64
            / cpag_formula_flops(30, 64, 16, 11) as f64;
        assert!((r - 16520.5).abs() < 1.0);
    }
}
