//! Finite-difference verification of the tape's gradients.
//!
//! [`finite_difference_gradient`] is the central-difference oracle. The
//! suite re-runs every differentiable operation at small-preset sizes,
//! compares analytic gradients coordinate by coordinate against the oracle,
//! and reports the worst relative error per operation. Large tensors are
//! spot-checked on a seeded random subset of coordinates to keep the suite
//! fast.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::concepts::extract_sentence_concepts;
use crate::config::{Mode, TrainConfig};
use crate::decoder::{decode_step, decoder_context, initial_state};
use crate::lstm::{lstm_step, LstmParams};
use crate::model::{bind, encode_concepts, init_parameters, ModelParameters};
use crate::tape::{Activation, Tape, TensorId};
use crate::text::normalize;
use crate::trainer::xe_loss;
use crate::vocab::{Category, ConceptVocabulary};

/// Central-difference step.
pub const FD_EPSILON: f64 = 1e-5;
/// Acceptance threshold on the relative error.
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Coordinates checked per tensor (all of them when the tensor is smaller).
const COORD_CAP: usize = 32;

/// Central differences `(f(x+eps) - f(x-eps)) / (2 eps)` per coordinate.
pub fn finite_difference_gradient(
    f: &mut dyn FnMut(&[f64]) -> f64,
    theta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut grad = Vec::with_capacity(theta.len());
    let mut work = theta.to_vec();
    for i in 0..theta.len() {
        work[i] = theta[i] + eps;
        let plus = f(&work);
        work[i] = theta[i] - eps;
        let minus = f(&work);
        work[i] = theta[i];
        grad.push((plus - minus) / (2.0 * eps));
    }
    grad
}

/// Relative error with an absolute floor so near-zero gradients compare on
/// an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Worst relative error of one operation across the seeds it was run with.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRAD_REL_TOL
    }
}

/// Differentiable slots: shape plus current values.
type Slot = (usize, usize, Vec<f64>);

fn rand_slot(rng: &mut ChaCha12Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Slot {
    (rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

/// Compare analytic vs numeric gradients of `build` over every slot.
/// `build` must be a pure function of the slot values.
fn max_err(
    slots: &[Slot],
    build: &dyn Fn(&mut Tape, &[TensorId]) -> TensorId,
    rng: &mut ChaCha12Rng,
) -> f64 {
    let run = |values: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = slots
            .iter()
            .zip(values)
            .map(|((r, c, _), v)| tape.leaf(*r, *c, v.clone()).expect("slot shape"))
            .collect();
        let loss = build(&mut tape, &ids);
        tape.scalar(loss)
    };

    let mut tape = Tape::new();
    let ids: Vec<TensorId> = slots
        .iter()
        .map(|(r, c, v)| tape.leaf(*r, *c, v.clone()).expect("slot shape"))
        .collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss).expect("scalar loss");
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad(id).unwrap().to_vec()).collect();

    let mut values: Vec<Vec<f64>> = slots.iter().map(|(_, _, v)| v.clone()).collect();
    let mut worst = 0.0f64;
    for s in 0..slots.len() {
        let len = values[s].len();
        let coords: Vec<usize> = if len <= COORD_CAP {
            (0..len).collect()
        } else {
            (0..COORD_CAP).map(|_| rng.random_range(0..len)).collect()
        };
        for i in coords {
            let orig = values[s][i];
            values[s][i] = orig + FD_EPSILON;
            let plus = run(&values);
            values[s][i] = orig - FD_EPSILON;
            let minus = run(&values);
            values[s][i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_EPSILON);
            worst = worst.max(relative_error(analytic[s][i], numeric));
        }
    }
    worst
}

/// Reduce any output to a scalar through a fixed random weighting, so every
/// output coordinate influences the loss.
fn weighted_sum(tape: &mut Tape, out: TensorId, weights: &[f64]) -> TensorId {
    let (r, c) = tape.shape(out);
    let w = tape.leaf(r, c, weights.to_vec()).unwrap();
    let prod = tape.mul(out, w).unwrap();
    tape.sum_all(prod).unwrap()
}

fn check_matmul(seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x11);
    let (m, k, n) = (5, 64, 8);
    let slots = [rand_slot(&mut rng, m, k, -1.0, 1.0), rand_slot(&mut rng, k, n, -1.0, 1.0)];
    let w: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    max_err(
        &slots,
        &|tape, ids| {
            let out = tape.matmul(ids[0], ids[1]).unwrap();
            weighted_sum(tape, out, &w)
        },
        &mut rng,
    )
}

fn check_softmax(seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x22);
    let (m, n) = (6, 9);
    let slots = [rand_slot(&mut rng, m, n, -2.0, 2.0)];
    let w: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    // Mask a couple of fixed positions in each row.
    let mut mask = alloc::vec![false; m * n];
    for r in 0..m {
        mask[r * n + (r % n)] = true;
    }
    let unmasked = max_err(
        &slots,
        &|tape, ids| {
            let out = tape.softmax_rows(ids[0], None).unwrap();
            weighted_sum(tape, out, &w)
        },
        &mut rng,
    );
    let masked = max_err(
        &slots,
        &|tape, ids| {
            let out = tape.softmax_rows(ids[0], Some(mask.clone())).unwrap();
            weighted_sum(tape, out, &w)
        },
        &mut rng,
    );
    unmasked.max(masked)
}

fn check_activations(seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x33);
    let (m, n) = (5, 7);
    // Keep relu inputs away from the kink at zero.
    let relu_slot: Slot = (
        m,
        n,
        (0..m * n)
            .map(|_| {
                let sign = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
                sign * rng.random_range(0.05..1.5)
            })
            .collect(),
    );
    let smooth_slot = rand_slot(&mut rng, m, n, -2.0, 2.0);
    let w: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut worst = 0.0f64;
    for (kind, slot) in [
        (Activation::Relu, &relu_slot),
        (Activation::Tanh, &smooth_slot),
        (Activation::Sigmoid, &smooth_slot),
    ] {
        let err = max_err(
            core::slice::from_ref(slot),
            &|tape, ids| {
                let out = tape.activation(ids[0], kind).unwrap();
                weighted_sum(tape, out, &w)
            },
            &mut rng,
        );
        worst = worst.max(err);
    }
    worst
}

fn check_lstm(seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x44);
    let cfg = TrainConfig::desk();
    let (e, d) = (cfg.e, cfg.d);
    let input = 2 * e;
    let rows = input + d;
    let mut slots = Vec::new();
    for _ in 0..4 {
        slots.push(rand_slot(&mut rng, rows, d, -0.3, 0.3)); // weights
        slots.push(rand_slot(&mut rng, 1, d, -0.3, 0.3)); // biases
    }
    slots.push(rand_slot(&mut rng, 1, input, -1.0, 1.0)); // x
    slots.push(rand_slot(&mut rng, 1, d, -1.0, 1.0)); // h
    slots.push(rand_slot(&mut rng, 1, d, -1.0, 1.0)); // c
    let w1: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w2: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    max_err(
        &slots,
        &|tape, ids| {
            let params = LstmParams {
                w_i: ids[0],
                b_i: ids[1],
                w_f: ids[2],
                b_f: ids[3],
                w_g: ids[4],
                b_g: ids[5],
                w_o: ids[6],
                b_o: ids[7],
            };
            let (h, c) = lstm_step(tape, ids[8], ids[9], ids[10], &params).unwrap();
            let sh = weighted_sum(tape, h, &w1);
            let sc = weighted_sum(tape, c, &w2);
            tape.add(sh, sc).unwrap()
        },
        &mut rng,
    )
}

fn attention_slots(rng: &mut ChaCha12Rng, e: usize, d_ff: usize) -> Vec<Slot> {
    alloc::vec![
        rand_slot(rng, e, e, -0.3, 0.3),    // w_q
        rand_slot(rng, e, e, -0.3, 0.3),    // w_k
        rand_slot(rng, e, e, -0.3, 0.3),    // w_v
        rand_slot(rng, e, e, -0.3, 0.3),    // w_o
        rand_slot(rng, e, d_ff, -0.3, 0.3), // w_f
        rand_slot(rng, 1, d_ff, -0.3, 0.3), // b_f
        rand_slot(rng, d_ff, e, -0.3, 0.3), // w_ff
        rand_slot(rng, 1, e, -0.3, 0.3),    // b_ff
    ]
}

fn block_from(ids: &[TensorId], e: usize, n_heads: usize) -> crate::attention::AttentionBlockParams {
    crate::attention::AttentionBlockParams::new(
        e, n_heads, ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6], ids[7],
    )
    .unwrap()
}

fn check_multi_head_attention(seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x55);
    let cfg = TrainConfig::desk();
    let (e, n_heads, d_ff) = (cfg.e, cfg.n_heads, cfg.d_ff);
    let (l, k) = (5, 6);
    let mut slots = attention_slots(&mut rng, e, d_ff);
    slots.push(rand_slot(&mut rng, l, e, -1.0, 1.0)); // query
    slots.push(rand_slot(&mut rng, k, e, -1.0, 1.0)); // key
    slots.push(rand_slot(&mut rng, k, e, -1.0, 1.0)); // value
    let w: Vec<f64> = (0..l * e).map(|_| rng.random_range(-1.0..1.0)).collect();
    max_err(
        &slots,
        &|tape, ids| {
            let p = block_from(ids, e, n_heads);
            let out =
                crate::attention::multi_head_attention(tape, ids[8], ids[9], ids[10], &p, None)
                    .unwrap();
            weighted_sum(tape, out, &w)
        },
        &mut rng,
    )
}

fn check_feed_forward(seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x66);
    let cfg = TrainConfig::desk();
    let (e, n_heads, d_ff) = (cfg.e, cfg.n_heads, cfg.d_ff);
    let m = 5;
    let mut slots = attention_slots(&mut rng, e, d_ff);
    slots.push(rand_slot(&mut rng, m, e, -1.0, 1.0)); // x
    let w: Vec<f64> = (0..m * e).map(|_| rng.random_range(-1.0..1.0)).collect();
    max_err(
        &slots,
        &|tape, ids| {
            let p = block_from(ids, e, n_heads);
            let out = crate::attention::feed_forward(tape, ids[8], &p).unwrap();
            weighted_sum(tape, out, &w)
        },
        &mut rng,
    )
}

fn check_structured_embed(seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x77);
    let cfg = TrainConfig::desk();
    let (e, d_a, r) = (cfg.e, cfg.d_a, cfg.r);
    let n = 7;
    let slots = [
        rand_slot(&mut rng, d_a, e, -0.3, 0.3),
        rand_slot(&mut rng, r, d_a, -0.3, 0.3),
        rand_slot(&mut rng, n, e, -1.0, 1.0),
    ];
    let w: Vec<f64> = (0..r * e).map(|_| rng.random_range(-1.0..1.0)).collect();
    max_err(
        &slots,
        &|tape, ids| {
            let p = crate::embedding::EmbeddingParams { w1: ids[0], w2: ids[1] };
            let out = crate::embedding::structured_embed(tape, ids[2], &p).unwrap();
            weighted_sum(tape, out, &w)
        },
        &mut rng,
    )
}

fn check_decode_step(seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x88);
    let cfg = TrainConfig::desk();
    let (e, d, d_a, r) = (cfg.e, cfg.d, cfg.d_a, cfg.r);
    let vocab = 20;
    let rows = 2 * e + d;
    let mut slots = Vec::new();
    slots.push(rand_slot(&mut rng, vocab, e, -0.5, 0.5)); // table
    for _ in 0..4 {
        slots.push(rand_slot(&mut rng, rows, d, -0.2, 0.2));
        slots.push(rand_slot(&mut rng, 1, d, -0.2, 0.2));
    }
    slots.push(rand_slot(&mut rng, d_a, e, -0.3, 0.3)); // w_m
    slots.push(rand_slot(&mut rng, d_a, d, -0.3, 0.3)); // w_h
    slots.push(rand_slot(&mut rng, 1, d_a, -0.3, 0.3)); // w_a
    slots.push(rand_slot(&mut rng, vocab, e, -0.3, 0.3)); // w_pr
    slots.push(rand_slot(&mut rng, vocab, d, -0.3, 0.3)); // w_ph
    slots.push(rand_slot(&mut rng, r, e, -1.0, 1.0)); // m
    slots.push(rand_slot(&mut rng, 1, e, -1.0, 1.0)); // c_avg
    let w: Vec<f64> = (0..vocab).map(|_| rng.random_range(-1.0..1.0)).collect();
    let prev = 4u32;
    max_err(
        &slots,
        &|tape, ids| {
            let params = crate::decoder::DecoderParams {
                lstm: LstmParams {
                    w_i: ids[1],
                    b_i: ids[2],
                    w_f: ids[3],
                    b_f: ids[4],
                    w_g: ids[5],
                    b_g: ids[6],
                    w_o: ids[7],
                    b_o: ids[8],
                },
                w_m: ids[9],
                w_h: ids[10],
                w_a: ids[11],
                w_pr: ids[12],
                w_ph: ids[13],
            };
            let ctx = decoder_context(tape, &params, ids[14], ids[15], r).unwrap();
            let state = initial_state(tape, d).unwrap();
            let (p, _, _) = decode_step(tape, ids[0], &params, &ctx, prev, &state).unwrap();
            weighted_sum(tape, p, &w)
        },
        &mut rng,
    )
}

fn gradcheck_vocab() -> (ConceptVocabulary, Vec<String>) {
    let sentence = "a young woman wearing a black shirt";
    let sentences: Vec<Vec<String>> = (0..5).map(|_| normalize(sentence)).collect();
    let lexicon = alloc::vec![
        (String::from("young"), Category::Attribute),
        (String::from("black"), Category::Attribute),
        (String::from("woman"), Category::Object),
        (String::from("shirt"), Category::Object),
        (String::from("wearing"), Category::Relation),
    ];
    let vocab = ConceptVocabulary::build(&sentences, &lexicon).unwrap();
    (vocab, normalize(sentence))
}

/// End-to-end check: full-model teacher-forced loss in both explorer modes,
/// perturbing a sampled subset of every named parameter.
fn check_xe_end_to_end(seed: u64, mode: Mode) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x99);
    let cfg = TrainConfig { mode, ..TrainConfig::desk() };
    let (vocab, tokens) = gradcheck_vocab();
    let set = extract_sentence_concepts(&tokens, &vocab, cfg.n_gmax);
    let mut targets = vocab.encode(&tokens);
    targets.push(crate::vocab::EOS);

    let mut init_rng = ChaCha12Rng::seed_from_u64(seed ^ 0xAA);
    let params = init_parameters(&cfg, &vocab, &mut init_rng);

    let forward = |params: &ModelParameters, want_grads: bool| {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, params, &cfg).unwrap();
        let enc = encode_concepts(&mut tape, &bound, &set).unwrap();
        let ctx = decoder_context(&mut tape, &bound.decoder, enc.m, enc.c_avg, cfg.r).unwrap();
        let mut state = initial_state(&mut tape, cfg.d).unwrap();
        let mut prev = crate::vocab::BOS;
        let mut dists = Vec::new();
        for &t in &targets {
            let (p, next, _) =
                decode_step(&mut tape, bound.table, &bound.decoder, &ctx, prev, &state).unwrap();
            dists.push(p);
            prev = t;
            state = next;
        }
        let loss = xe_loss(&mut tape, &dists, &targets).unwrap();
        let value = tape.scalar(loss);
        let grads = if want_grads {
            tape.backward(loss).unwrap();
            Some(bound.read_grads(&tape))
        } else {
            None
        };
        (value, grads)
    };

    let (_, grads) = forward(&params, true);
    let grads = grads.unwrap();

    let names: Vec<String> = grads.keys().cloned().collect();
    let mut worst = 0.0f64;
    let per_tensor = 12usize;
    let mut perturbed = params.clone();
    for name in names {
        let len = params.get(&name).unwrap().values.len();
        let coords: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        for i in coords {
            let orig = perturbed.get(&name).unwrap().values[i];
            perturbed.get_mut(&name).unwrap().values[i] = orig + FD_EPSILON;
            let (plus, _) = forward(&perturbed, false);
            perturbed.get_mut(&name).unwrap().values[i] = orig - FD_EPSILON;
            let (minus, _) = forward(&perturbed, false);
            perturbed.get_mut(&name).unwrap().values[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_EPSILON);
            worst = worst.max(relative_error(grads[&name][i], numeric));
        }
    }
    worst
}

/// Run every check over `seeds`, returning the worst error per operation.
pub fn run_suite(seeds: &[u64]) -> Vec<CheckReport> {
    let agg = |name: &'static str, f: &dyn Fn(u64) -> f64| -> CheckReport {
        let max_rel_err = seeds.iter().map(|&s| f(s)).fold(0.0, f64::max);
        CheckReport { name, max_rel_err }
    };
    alloc::vec![
        agg("matmul", &check_matmul),
        agg("softmax_rows", &check_softmax),
        agg("activations", &check_activations),
        agg("lstm_step", &check_lstm),
        agg("multi_head_attention", &check_multi_head_attention),
        agg("feed_forward", &check_feed_forward),
        agg("structured_embed", &check_structured_embed),
        agg("decode_step", &check_decode_step),
        agg("xe_loss_coarse", &|s| check_xe_end_to_end(s, Mode::Coarse)),
        agg("xe_loss_fine", &|s| check_xe_end_to_end(s, Mode::Fine)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_on_square_function() {
        let mut f = |x: &[f64]| x[0] * x[0];
        let g = finite_difference_gradient(&mut f, &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn fd_on_constant_function_is_zero() {
        let mut f = |_: &[f64]| 42.0;
        let g = finite_difference_gradient(&mut f, &[1.0, -2.0, 0.5], 1e-5);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fd_matches_backward_on_two_layer_network() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let (n_in, n_hidden) = (4, 3);
        let w1: Vec<f64> = (0..n_in * n_hidden).map(|_| rng.random_range(-0.8..0.8)).collect();
        let w2: Vec<f64> = (0..n_hidden).map(|_| rng.random_range(-0.8..0.8)).collect();
        let x: Vec<f64> = (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect();

        let run = |w1v: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let xt = tape.leaf(1, n_in, x.clone()).unwrap();
            let w1t = tape.leaf(n_in, n_hidden, w1v.to_vec()).unwrap();
            let w2t = tape.leaf(n_hidden, 1, w2.clone()).unwrap();
            let h = tape.matmul(xt, w1t).unwrap();
            let a = tape.tanh(h).unwrap();
            let out = tape.matmul(a, w2t).unwrap();
            tape.scalar(out)
        };
        let mut f = |w1v: &[f64]| run(w1v);
        let numeric = finite_difference_gradient(&mut f, &w1, 1e-5);

        let mut tape = Tape::new();
        let xt = tape.leaf(1, n_in, x.clone()).unwrap();
        let w1t = tape.leaf(n_in, n_hidden, w1.clone()).unwrap();
        let w2t = tape.leaf(n_hidden, 1, w2.clone()).unwrap();
        let h = tape.matmul(xt, w1t).unwrap();
        let a = tape.tanh(h).unwrap();
        let out = tape.matmul(a, w2t).unwrap();
        tape.backward(out).unwrap();
        let analytic = tape.grad(w1t).unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(relative_error(*a, *n) <= GRAD_REL_TOL);
        }
    }

    #[test]
    fn quick_suite_on_one_seed() {
        for report in run_suite(&[0]) {
            assert!(
                report.passed(),
                "{} failed with max rel err {}",
                report.name,
                report.max_rel_err
            );
        }
    }
}
