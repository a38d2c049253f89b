//! Attention LSTM sentence decoder.
//!
//! Each step embeds the previous token, concatenates it with the averaged
//! concept vector, advances the LSTM, attends over the relationship
//! embedding rows (`r` of them in coarse mode, `3r` in fine mode) and
//! projects the attended vector together with the hidden state onto the
//! vocabulary.
//!
//! Decoding never emits `PAD` or `BOS`; `EOS` terminates a sequence and is
//! kept as its final element.

use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::fmath;
use crate::lstm::{lstm_step, LstmParams};
use crate::tape::{Tape, TensorError, TensorId};
use crate::vocab::{TokenId, BOS, EOS, PAD};

/// Decoder weights on the tape. Projections are stored in their natural
/// orientation (`w_pr` is `|D| x e`, `w_ph` is `|D| x d`); the context
/// transposes them once per sequence.
#[derive(Clone, Copy, Debug)]
pub struct DecoderParams {
    pub lstm: LstmParams,
    /// `d_a x e`
    pub w_m: TensorId,
    /// `d_a x d`
    pub w_h: TensorId,
    /// `1 x d_a`
    pub w_a: TensorId,
    /// `|D| x e`
    pub w_pr: TensorId,
    /// `|D| x d`
    pub w_ph: TensorId,
}

/// Hidden and cell state plus the step index.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h: TensorId,
    pub c: TensorId,
    pub t: usize,
}

/// Per-sequence precomputation: the relationship embedding, its projection
/// for the attention score, and transposed output projections.
#[derive(Clone, Copy, Debug)]
pub struct DecoderContext {
    pub m: TensorId,
    pub c_avg: TensorId,
    pub rows: usize,
    m_att: TensorId,
    w_pr_t: TensorId,
    w_ph_t: TensorId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DecoderError {
    /// The relationship embedding must have `r` or `3r` rows.
    BadEmbeddingRows { rows: usize, r: usize },
    Tensor(TensorError),
}

impl fmt::Display for DecoderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecoderError::BadEmbeddingRows { rows, r } => {
                write!(f, "relationship embedding has {rows} rows, expected {r} or {}", 3 * r)
            }
            DecoderError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for DecoderError {}

impl From<TensorError> for DecoderError {
    fn from(e: TensorError) -> Self {
        DecoderError::Tensor(e)
    }
}

/// Zeroed state at `t = 0`.
pub fn initial_state(tape: &mut Tape, d: usize) -> Result<DecoderState, DecoderError> {
    let h = tape.zeros(1, d)?;
    let c = tape.zeros(1, d)?;
    Ok(DecoderState { h, c, t: 0 })
}

/// Build the per-sequence context, validating the embedding row count.
pub fn decoder_context(
    tape: &mut Tape,
    params: &DecoderParams,
    m: TensorId,
    c_avg: TensorId,
    r: usize,
) -> Result<DecoderContext, DecoderError> {
    let (rows, _) = tape.shape(m);
    if rows != r && rows != 3 * r {
        return Err(DecoderError::BadEmbeddingRows { rows, r });
    }
    let mt = tape.transpose(m)?;
    let m_att = tape.matmul(params.w_m, mt)?;
    let w_pr_t = tape.transpose(params.w_pr)?;
    let w_ph_t = tape.transpose(params.w_ph)?;
    Ok(DecoderContext { m, c_avg, rows, m_att, w_pr_t, w_ph_t })
}

/// One decoding step. Returns the next-token distribution `p (1 x |D|)`, the
/// advanced state, and the attention weights `alpha (1 x rows)`.
pub fn decode_step(
    tape: &mut Tape,
    table: TensorId,
    params: &DecoderParams,
    ctx: &DecoderContext,
    prev: TokenId,
    state: &DecoderState,
) -> Result<(TensorId, DecoderState, TensorId), DecoderError> {
    let w_emb = tape.gather_rows(table, &[prev])?;
    let x = tape.concat_cols(&[w_emb, ctx.c_avg])?;
    let (h, c) = lstm_step(tape, x, state.h, state.c, &params.lstm)?;

    let ht = tape.transpose(h)?;
    let hv = tape.matmul(params.w_h, ht)?;
    let pre = tape.add_col(ctx.m_att, hv)?;
    let act = tape.tanh(pre)?;
    let alpha_logits = tape.matmul(params.w_a, act)?;
    let alpha = tape.softmax_rows(alpha_logits, None)?;
    let r_t = tape.matmul(alpha, ctx.m)?;

    let logit_r = tape.matmul(r_t, ctx.w_pr_t)?;
    let logit_h = tape.matmul(h, ctx.w_ph_t)?;
    let logits = tape.add(logit_r, logit_h)?;
    let p = tape.softmax_rows(logits, None)?;

    Ok((p, DecoderState { h, c, t: state.t + 1 }, alpha))
}

fn emittable(token: usize) -> bool {
    token != PAD as usize && token != BOS as usize
}

/// Argmax over emittable tokens, ties resolved to the lowest id.
fn argmax_emittable(p: &[f64]) -> TokenId {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in p.iter().enumerate() {
        if emittable(i) && v > best_v {
            best_v = v;
            best = i;
        }
    }
    best as TokenId
}

/// Greedy decoding from `BOS`. The returned sequence contains the emitted
/// tokens including the terminating `EOS` (absent when `max_len` cut it off).
pub fn greedy_decode(
    tape: &mut Tape,
    table: TensorId,
    params: &DecoderParams,
    ctx: &DecoderContext,
    d_hidden: usize,
    max_len: usize,
) -> Result<Vec<TokenId>, DecoderError> {
    let mut state = initial_state(tape, d_hidden)?;
    let mut prev = BOS;
    let mut seq = Vec::new();
    for _ in 0..max_len {
        let (p, next, _) = decode_step(tape, table, params, ctx, prev, &state)?;
        let tok = argmax_emittable(tape.values(p));
        seq.push(tok);
        if tok == EOS {
            break;
        }
        prev = tok;
        state = next;
    }
    Ok(seq)
}

/// A sampled rollout with the tape nodes needed for policy gradients.
pub struct SampledSequence {
    pub tokens: Vec<TokenId>,
    /// Distribution tensor of each step, aligned with `tokens`.
    pub step_distributions: Vec<TensorId>,
    /// Sum of `ln p_t[token_t]` over the sequence.
    pub log_prob: f64,
}

/// Multinomial sampling from each step's distribution, restricted to
/// emittable tokens. The reported log-probability sums the raw `ln p` of the
/// chosen tokens and can be reproduced by re-scoring the sequence.
pub fn sample_decode(
    tape: &mut Tape,
    table: TensorId,
    params: &DecoderParams,
    ctx: &DecoderContext,
    d_hidden: usize,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<SampledSequence, DecoderError> {
    let mut state = initial_state(tape, d_hidden)?;
    let mut prev = BOS;
    let mut tokens = Vec::new();
    let mut step_distributions = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let (p, next, _) = decode_step(tape, table, params, ctx, prev, &state)?;
        let probs = tape.values(p);
        let total: f64 = probs
            .iter()
            .enumerate()
            .filter(|(i, _)| emittable(*i))
            .map(|(_, &v)| v)
            .sum();
        let draw = rng.random_range(0.0..1.0) * total;
        let mut acc = 0.0;
        let mut tok = EOS;
        for (i, &v) in probs.iter().enumerate() {
            if !emittable(i) || v <= 0.0 {
                continue;
            }
            acc += v;
            if draw < acc {
                tok = i as TokenId;
                break;
            }
        }
        log_prob += fmath::ln(probs[tok as usize].max(crate::tape::LN_CLAMP));
        tokens.push(tok);
        step_distributions.push(p);
        if tok == EOS {
            break;
        }
        prev = tok;
        state = next;
    }
    Ok(SampledSequence { tokens, step_distributions, log_prob })
}

/// Teacher-force `tokens` through the decoder and return each step's
/// distribution plus the summed `ln p` of the given tokens.
pub fn score_sequence(
    tape: &mut Tape,
    table: TensorId,
    params: &DecoderParams,
    ctx: &DecoderContext,
    d_hidden: usize,
    tokens: &[TokenId],
) -> Result<(Vec<TensorId>, f64), DecoderError> {
    let mut state = initial_state(tape, d_hidden)?;
    let mut prev = BOS;
    let mut dists = Vec::with_capacity(tokens.len());
    let mut log_prob = 0.0;
    for &tok in tokens {
        let (p, next, _) = decode_step(tape, table, params, ctx, prev, &state)?;
        log_prob += fmath::ln(tape.values(p)[tok as usize].max(crate::tape::LN_CLAMP));
        dists.push(p);
        prev = tok;
        state = next;
    }
    Ok((dists, log_prob))
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<TokenId>,
    state: Option<DecoderState>,
    log_prob: f64,
}

fn better(a: &Hypothesis, b: &Hypothesis) -> core::cmp::Ordering {
    // Higher log-probability first; ties prefer the lexicographically
    // smaller token sequence.
    b.log_prob
        .total_cmp(&a.log_prob)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Length-terminated beam search over summed log-probabilities. `beam = 1`
/// reproduces greedy decoding exactly.
pub fn beam_search(
    tape: &mut Tape,
    table: TensorId,
    params: &DecoderParams,
    ctx: &DecoderContext,
    d_hidden: usize,
    beam: usize,
    max_len: usize,
) -> Result<Vec<TokenId>, DecoderError> {
    let beam = beam.max(1);
    let mut alive = Vec::with_capacity(beam);
    alive.push(Hypothesis { tokens: Vec::new(), state: None, log_prob: 0.0 });
    let mut completed: Vec<Hypothesis> = Vec::new();

    for step in 0..max_len {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &alive {
            let state = match &hyp.state {
                Some(s) => *s,
                None => initial_state(tape, d_hidden)?,
            };
            let prev = *hyp.tokens.last().unwrap_or(&BOS);
            let (p, next, _) = decode_step(tape, table, params, ctx, prev, &state)?;
            let probs = tape.values(p).to_vec();
            for (i, &v) in probs.iter().enumerate() {
                if !emittable(i) {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(i as TokenId);
                candidates.push(Hypothesis {
                    tokens,
                    state: Some(next),
                    log_prob: hyp.log_prob + fmath::ln(v.max(crate::tape::LN_CLAMP)),
                });
            }
        }
        candidates.sort_by(better);
        candidates.truncate(beam);
        alive.clear();
        for cand in candidates {
            if *cand.tokens.last().unwrap() == EOS || step + 1 == max_len {
                completed.push(cand);
            } else {
                alive.push(cand);
            }
        }
        if alive.is_empty() {
            break;
        }
    }
    completed.extend(alive);
    completed.sort_by(better);
    Ok(completed
        .into_iter()
        .next()
        .map(|h| h.tokens)
        .unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::UNK;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    pub(crate) struct Setup {
        pub table: TensorId,
        pub params: DecoderParams,
        pub ctx: DecoderContext,
        pub d: usize,
        pub vocab: usize,
    }

    pub(crate) fn setup(tape: &mut Tape, rng: &mut ChaCha12Rng, zero: bool) -> Setup {
        let (vocab, e, d, d_a, rows) = (9usize, 6usize, 5usize, 4usize, 3usize);
        let mut mat = |tape: &mut Tape, r: usize, c: usize| -> TensorId {
            if zero {
                tape.zeros(r, c).unwrap()
            } else {
                let data: Vec<f64> = (0..r * c).map(|_| rng.random_range(-0.6..0.6)).collect();
                tape.leaf(r, c, data).unwrap()
            }
        };
        let table = mat(tape, vocab, e);
        let lstm = LstmParams {
            w_i: mat(tape, 2 * e + d, d),
            b_i: mat(tape, 1, d),
            w_f: mat(tape, 2 * e + d, d),
            b_f: mat(tape, 1, d),
            w_g: mat(tape, 2 * e + d, d),
            b_g: mat(tape, 1, d),
            w_o: mat(tape, 2 * e + d, d),
            b_o: mat(tape, 1, d),
        };
        let params = DecoderParams {
            lstm,
            w_m: mat(tape, d_a, e),
            w_h: mat(tape, d_a, d),
            w_a: mat(tape, 1, d_a),
            w_pr: mat(tape, vocab, e),
            w_ph: mat(tape, vocab, d),
        };
        let m = mat(tape, rows, e);
        let c_avg = mat(tape, 1, e);
        let ctx = decoder_context(tape, &params, m, c_avg, rows).unwrap();
        Setup { table, params, ctx, d, vocab }
    }

    #[test]
    fn alpha_is_a_distribution_over_rows() {
        let mut rng = ChaCha12Rng::seed_from_u64(51);
        let mut tape = Tape::new();
        let s = setup(&mut tape, &mut rng, false);
        let st = initial_state(&mut tape, s.d).unwrap();
        let (p, _, alpha) = decode_step(&mut tape, s.table, &s.params, &s.ctx, BOS, &st).unwrap();
        assert_eq!(tape.shape(alpha), (1, 3));
        let asum: f64 = tape.values(alpha).iter().sum();
        assert!((asum - 1.0).abs() < 1e-12);
        let psum: f64 = tape.values(p).iter().sum();
        assert!((psum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_parameters_give_uniform_distribution() {
        let mut rng = ChaCha12Rng::seed_from_u64(53);
        let mut tape = Tape::new();
        let s = setup(&mut tape, &mut rng, true);
        let st = initial_state(&mut tape, s.d).unwrap();
        let (p, st1, _) = decode_step(&mut tape, s.table, &s.params, &s.ctx, BOS, &st).unwrap();
        let uniform = 1.0 / s.vocab as f64;
        assert!(tape.values(p).iter().all(|&v| v == uniform));
        let (p2, _, _) = decode_step(&mut tape, s.table, &s.params, &s.ctx, UNK, &st1).unwrap();
        assert!(tape.values(p2).iter().all(|&v| v == uniform));
    }

    #[test]
    fn embedding_row_count_validation() {
        let mut rng = ChaCha12Rng::seed_from_u64(57);
        let mut tape = Tape::new();
        let s = setup(&mut tape, &mut rng, false);
        let bad_m = tape.zeros(5, 6).unwrap();
        let c_avg = tape.zeros(1, 6).unwrap();
        let err = decoder_context(&mut tape, &s.params, bad_m, c_avg, 3).unwrap_err();
        assert_eq!(err, DecoderError::BadEmbeddingRows { rows: 5, r: 3 });
        // 3r rows are fine.
        let m9 = tape.zeros(9, 6).unwrap();
        assert!(decoder_context(&mut tape, &s.params, m9, c_avg, 3).is_ok());
    }

    #[test]
    fn greedy_is_deterministic_and_bounded() {
        let mut rng = ChaCha12Rng::seed_from_u64(59);
        let mut tape = Tape::new();
        let s = setup(&mut tape, &mut rng, false);
        let a = greedy_decode(&mut tape, s.table, &s.params, &s.ctx, s.d, 7).unwrap();
        let b = greedy_decode(&mut tape, s.table, &s.params, &s.ctx, s.d, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 7);
        assert!(a.iter().all(|&t| t != PAD && t != BOS));
    }

    #[test]
    fn sampling_log_prob_matches_rescoring() {
        let mut rng = ChaCha12Rng::seed_from_u64(61);
        let mut tape = Tape::new();
        let s = setup(&mut tape, &mut rng, false);
        let mut sampler = ChaCha12Rng::seed_from_u64(99);
        let rollout =
            sample_decode(&mut tape, s.table, &s.params, &s.ctx, s.d, 6, &mut sampler).unwrap();
        let (_, rescored) =
            score_sequence(&mut tape, s.table, &s.params, &s.ctx, s.d, &rollout.tokens).unwrap();
        assert!((rollout.log_prob - rescored).abs() < 1e-10);
    }

    #[test]
    fn same_seed_same_sample() {
        let mut rng = ChaCha12Rng::seed_from_u64(63);
        let mut tape = Tape::new();
        let s = setup(&mut tape, &mut rng, false);
        let mut r1 = ChaCha12Rng::seed_from_u64(7);
        let mut r2 = ChaCha12Rng::seed_from_u64(7);
        let a = sample_decode(&mut tape, s.table, &s.params, &s.ctx, s.d, 6, &mut r1).unwrap();
        let b = sample_decode(&mut tape, s.table, &s.params, &s.ctx, s.d, 6, &mut r2).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.log_prob, b.log_prob);
    }

    #[test]
    fn beam_one_equals_greedy() {
        for seed in 0..10 {
            let mut rng = ChaCha12Rng::seed_from_u64(1000 + seed);
            let mut tape = Tape::new();
            let s = setup(&mut tape, &mut rng, false);
            let g = greedy_decode(&mut tape, s.table, &s.params, &s.ctx, s.d, 6).unwrap();
            let b = beam_search(&mut tape, s.table, &s.params, &s.ctx, s.d, 1, 6).unwrap();
            assert_eq!(g, b, "seed {seed}");
        }
    }

    #[test]
    fn beam_never_scores_below_greedy() {
        for seed in 0..10 {
            let mut rng = ChaCha12Rng::seed_from_u64(2000 + seed);
            let mut tape = Tape::new();
            let s = setup(&mut tape, &mut rng, false);
            let g = greedy_decode(&mut tape, s.table, &s.params, &s.ctx, s.d, 5).unwrap();
            let b = beam_search(&mut tape, s.table, &s.params, &s.ctx, s.d, 4, 5).unwrap();
            let (_, gs) = score_sequence(&mut tape, s.table, &s.params, &s.ctx, s.d, &g).unwrap();
            let (_, bs) = score_sequence(&mut tape, s.table, &s.params, &s.ctx, s.d, &b).unwrap();
            assert!(bs >= gs - 1e-12, "seed {seed}: beam {bs} < greedy {gs}");
        }
    }
}
