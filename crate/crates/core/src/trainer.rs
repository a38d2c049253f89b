//! Sentence-reconstruction training: cross-entropy teacher forcing followed
//! by self-critical policy-gradient fine-tuning with a greedy baseline, plus
//! checkpoint assembly and per-epoch logging.
//!
//! Each example flows through concepts -> explorer -> embedding -> decoder
//! and is trained to reproduce its own sentence. Batches group examples; the
//! batch gradient is the mean of per-example gradients, clipped to a global
//! norm of [`GRAD_CLIP_NORM`] before the Adam step.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::concepts::{extract_sentence_concepts, ConceptSet};
use crate::config::{ConfigError, Phase, TrainConfig};
use crate::decoder::{
    decoder_context, greedy_decode, sample_decode, DecoderError,
};
use crate::metrics::{build_idf, cider_d, IdfTable, MetricsError, DEFAULT_SIGMA};
use crate::model::{
    bind, encode_concepts, init_parameters, ModelError, ModelParameters,
};
use crate::optim::{adam_update, clip_global_norm, AdamHyper, AdamState, GradMap};
use crate::tape::{Tape, TensorError, TensorId};
use crate::vocab::{Category, ConceptVocabulary, TokenId, VocabError, EOS};

pub const GRAD_CLIP_NORM: f64 = 5.0;

/// Policy-gradient steps use `learning_rate * RL_LR_SCALE`. Self-critical
/// updates carry reward-scaled magnitudes an order above the cross-entropy
/// phase and destabilize at the XE step size.
pub const RL_LR_SCALE: f64 = 0.05;

/// One corpus example: an id and its reference sentences, tokenized.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusExample {
    pub id: String,
    pub sentences: Vec<Vec<String>>,
}

/// Training inputs. `heldout` examples are only evaluated, never trained on.
pub struct TrainInput<'a> {
    pub train: &'a [CorpusExample],
    pub heldout: &'a [CorpusExample],
    pub lexicon: &'a [(String, Category)],
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    /// XE: mean per-token cross entropy. RL: mean surrogate loss.
    pub loss: f64,
    /// Mean held-out CIDEr-D of greedy decodes, when a held-out set exists.
    pub cider: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainError {
    EmptyCorpus,
    Config(ConfigError),
    Vocab(VocabError),
    Model(ModelError),
    Decoder(DecoderError),
    Tensor(TensorError),
    Metrics(MetricsError),
    StepCountMismatch { steps: usize, targets: usize },
    TargetOutOfVocab { id: TokenId, vocab: usize },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::EmptyCorpus => write!(f, "training corpus is empty"),
            TrainError::Config(e) => write!(f, "{e}"),
            TrainError::Vocab(e) => write!(f, "{e}"),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Decoder(e) => write!(f, "{e}"),
            TrainError::Tensor(e) => write!(f, "{e}"),
            TrainError::Metrics(e) => write!(f, "{e}"),
            TrainError::StepCountMismatch { steps, targets } => {
                write!(f, "{steps} step distributions for {targets} targets")
            }
            TrainError::TargetOutOfVocab { id, vocab } => {
                write!(f, "target token {id} outside vocabulary of size {vocab}")
            }
        }
    }
}

impl core::error::Error for TrainError {}

impl From<ConfigError> for TrainError {
    fn from(e: ConfigError) -> Self {
        TrainError::Config(e)
    }
}

impl From<VocabError> for TrainError {
    fn from(e: VocabError) -> Self {
        TrainError::Vocab(e)
    }
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<DecoderError> for TrainError {
    fn from(e: DecoderError) -> Self {
        TrainError::Decoder(e)
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

impl From<MetricsError> for TrainError {
    fn from(e: MetricsError) -> Self {
        TrainError::Metrics(e)
    }
}

/// Teacher-forced cross-entropy: `-sum_t ln p_t[y_t]` as a tape scalar.
pub fn xe_loss(
    tape: &mut Tape,
    step_distributions: &[TensorId],
    targets: &[TokenId],
) -> Result<TensorId, TrainError> {
    if step_distributions.len() != targets.len() {
        return Err(TrainError::StepCountMismatch {
            steps: step_distributions.len(),
            targets: targets.len(),
        });
    }
    let (_, vocab) = tape.shape(step_distributions[0]);
    for &t in targets {
        if t as usize >= vocab {
            return Err(TrainError::TargetOutOfVocab { id: t, vocab });
        }
    }
    let stacked = tape.concat_rows(step_distributions)?;
    let picked = tape.pick_per_row(stacked, targets)?;
    let logs = tape.ln(picked)?;
    let total = tape.sum_all(logs)?;
    Ok(tape.scale(total, -1.0)?)
}

/// One training item: a concept set, the target token sequence, and the
/// example's reference sentences for reward computation.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub set: ConceptSet,
    pub targets: Vec<TokenId>,
    pub references: Vec<Vec<String>>,
}

/// Build per-sentence training items: concepts from the sentence itself,
/// targets are its tokens (truncated to `max_len - 1`) plus `EOS`.
pub fn build_items(
    examples: &[CorpusExample],
    vocab: &ConceptVocabulary,
    cfg: &TrainConfig,
) -> Vec<TrainItem> {
    let mut items = Vec::new();
    for ex in examples {
        for sentence in &ex.sentences {
            let set = extract_sentence_concepts(sentence, vocab, cfg.n_gmax);
            let mut targets = vocab.encode(sentence);
            targets.truncate(cfg.max_len.saturating_sub(1));
            targets.push(EOS);
            items.push(TrainItem { set, targets, references: ex.sentences.clone() });
        }
    }
    items
}

/// Held-out evaluation item: concepts from the example's first sentence,
/// scored against all of its references.
pub fn build_eval_items(
    examples: &[CorpusExample],
    vocab: &ConceptVocabulary,
    cfg: &TrainConfig,
) -> Vec<TrainItem> {
    examples
        .iter()
        .filter(|ex| !ex.sentences.is_empty())
        .map(|ex| TrainItem {
            set: extract_sentence_concepts(&ex.sentences[0], vocab, cfg.n_gmax),
            targets: Vec::new(),
            references: ex.sentences.clone(),
        })
        .collect()
}

/// Strip the terminating `EOS` and map ids back to words.
pub fn tokens_to_words(tokens: &[TokenId], vocab: &ConceptVocabulary) -> Vec<String> {
    tokens
        .iter()
        .filter(|&&t| t != EOS)
        .map(|&t| vocab.word(t).to_string())
        .collect()
}

/// Teacher-forced forward pass for one item; returns the loss node and the
/// number of target tokens.
fn item_xe_loss(
    tape: &mut Tape,
    params: &ModelParameters,
    cfg: &TrainConfig,
    item: &TrainItem,
) -> Result<(TensorId, crate::model::BoundModel, usize), TrainError> {
    let bound = bind(tape, params, cfg)?;
    let enc = encode_concepts(tape, &bound, &item.set)?;
    let ctx = decoder_context(tape, &bound.decoder, enc.m, enc.c_avg, cfg.r)?;
    let mut state = crate::decoder::initial_state(tape, cfg.d)?;
    let mut prev = crate::vocab::BOS;
    let mut dists = Vec::with_capacity(item.targets.len());
    for &target in &item.targets {
        let (p, next, _) = crate::decoder::decode_step(tape, bound.table, &bound.decoder, &ctx, prev, &state)?;
        dists.push(p);
        prev = target;
        state = next;
    }
    let loss = xe_loss(tape, &dists, &item.targets)?;
    Ok((loss, bound, item.targets.len()))
}

fn accumulate(acc: &mut GradMap, delta: GradMap) {
    for (name, g) in delta {
        match acc.get_mut(&name) {
            Some(dst) => {
                for (d, x) in dst.iter_mut().zip(&g) {
                    *d += x;
                }
            }
            None => {
                acc.insert(name, g);
            }
        }
    }
}

fn scale_grads(acc: &mut GradMap, factor: f64) {
    for g in acc.values_mut() {
        for x in g.iter_mut() {
            *x *= factor;
        }
    }
}

/// Mean per-token teacher-forced cross entropy over `items`, no updates.
pub fn mean_xe_loss(
    params: &ModelParameters,
    cfg: &TrainConfig,
    items: &[TrainItem],
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for item in items {
        let mut tape = Tape::new();
        let (loss, _, n) = item_xe_loss(&mut tape, params, cfg, item)?;
        total += tape.scalar(loss);
        tokens += n;
    }
    Ok(total / tokens.max(1) as f64)
}

/// Greedy-decode a caption for one concept set (`beam <= 1`) or run beam
/// search. Returns token ids, including a terminating `EOS` when emitted.
pub fn generate_caption(
    params: &ModelParameters,
    cfg: &TrainConfig,
    set: &ConceptSet,
    beam: usize,
    max_len: usize,
) -> Result<Vec<TokenId>, TrainError> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, cfg)?;
    let enc = encode_concepts(&mut tape, &bound, set)?;
    let ctx = decoder_context(&mut tape, &bound.decoder, enc.m, enc.c_avg, cfg.r)?;
    let tokens = if beam <= 1 {
        greedy_decode(&mut tape, bound.table, &bound.decoder, &ctx, cfg.d, max_len)?
    } else {
        crate::decoder::beam_search(&mut tape, bound.table, &bound.decoder, &ctx, cfg.d, beam, max_len)?
    };
    Ok(tokens)
}

/// Mean CIDEr-D of greedy decodes over evaluation items.
pub fn evaluate_greedy_cider(
    params: &ModelParameters,
    cfg: &TrainConfig,
    vocab: &ConceptVocabulary,
    items: &[TrainItem],
    idf: &IdfTable,
) -> Result<f64, TrainError> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for item in items {
        let tokens = generate_caption(params, cfg, &item.set, 1, cfg.max_len)?;
        let words = tokens_to_words(&tokens, vocab);
        total += cider_d(&words, &item.references, idf, DEFAULT_SIGMA);
    }
    Ok(total / items.len() as f64)
}

/// Outcome statistics of one self-critical batch step.
#[derive(Clone, Copy, Debug, Default)]
pub struct ScstStats {
    pub mean_sample_reward: f64,
    pub mean_greedy_reward: f64,
    pub mean_surrogate: f64,
}

/// One self-critical policy-gradient step over a batch: sample a caption,
/// decode the greedy baseline, weight the sampled sequence's log-probability
/// by the reward advantage, average gradients over the batch and apply Adam.
pub fn scst_step(
    params: &mut ModelParameters,
    opt: &mut AdamState,
    cfg: &TrainConfig,
    vocab: &ConceptVocabulary,
    batch: &[TrainItem],
    reward_fn: &dyn Fn(&[String], &[Vec<String>]) -> Result<f64, MetricsError>,
    rng: &mut ChaCha12Rng,
) -> Result<ScstStats, TrainError> {
    if batch.is_empty() {
        return Ok(ScstStats::default());
    }
    let hyper = AdamHyper {
        learning_rate: cfg.learning_rate * RL_LR_SCALE,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        ..AdamHyper::default()
    };
    let mut acc = GradMap::new();
    let mut stats = ScstStats::default();
    for item in batch {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, params, cfg)?;
        let enc = encode_concepts(&mut tape, &bound, &item.set)?;
        let ctx = decoder_context(&mut tape, &bound.decoder, enc.m, enc.c_avg, cfg.r)?;

        let sampled = sample_decode(
            &mut tape, bound.table, &bound.decoder, &ctx, cfg.d, cfg.max_len, rng,
        )?;
        let greedy = greedy_decode(&mut tape, bound.table, &bound.decoder, &ctx, cfg.d, cfg.max_len)?;

        let sample_words = tokens_to_words(&sampled.tokens, vocab);
        let greedy_words = tokens_to_words(&greedy, vocab);
        let r_sample = reward_fn(&sample_words, &item.references)?;
        let r_greedy = reward_fn(&greedy_words, &item.references)?;
        let advantage = r_sample - r_greedy;
        stats.mean_sample_reward += r_sample;
        stats.mean_greedy_reward += r_greedy;

        // Zero advantage contributes exactly nothing.
        if advantage != 0.0 {
            let stacked = tape.concat_rows(&sampled.step_distributions)?;
            let picked = tape.pick_per_row(stacked, &sampled.tokens)?;
            let logs = tape.ln(picked)?;
            let logp = tape.sum_all(logs)?;
            let loss = tape.scale(logp, -advantage)?;
            stats.mean_surrogate += tape.scalar(loss);
            tape.backward(loss)?;
            accumulate(&mut acc, bound.read_grads(&tape));
        }
    }
    let n = batch.len() as f64;
    stats.mean_sample_reward /= n;
    stats.mean_greedy_reward /= n;
    stats.mean_surrogate /= n;
    scale_grads(&mut acc, 1.0 / n);
    clip_global_norm(&mut acc, GRAD_CLIP_NORM);
    adam_update(params, &acc, opt, &hyper);
    Ok(stats)
}

/// Full training run: vocabulary construction, XE epochs, then RL epochs.
pub fn train(input: &TrainInput, cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let train_sentences: Vec<Vec<String>> = input
        .train
        .iter()
        .flat_map(|ex| ex.sentences.iter().cloned())
        .collect();
    if train_sentences.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let vocab = ConceptVocabulary::build(&train_sentences, input.lexicon)?;
    let items = build_items(input.train, &vocab, cfg);
    let eval_items = build_eval_items(input.heldout, &vocab, cfg);
    let idf = build_idf(
        &input
            .train
            .iter()
            .map(|ex| ex.sentences.clone())
            .collect::<Vec<_>>(),
    )?;

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut params = init_parameters(cfg, &vocab, &mut rng);
    let mut opt = AdamState::new();
    let hyper = AdamHyper {
        learning_rate: cfg.learning_rate,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        ..AdamHyper::default()
    };

    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut epoch = 0usize;
    let mut phase = Phase::Xe;

    for _ in 0..cfg.epochs_xe {
        epoch += 1;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc = GradMap::new();
            for &idx in chunk {
                let item = &items[idx];
                let mut tape = Tape::new();
                let (loss, bound, n_tokens) = item_xe_loss(&mut tape, &params, cfg, item)?;
                epoch_loss += tape.scalar(loss);
                epoch_tokens += n_tokens;
                tape.backward(loss)?;
                accumulate(&mut acc, bound.read_grads(&tape));
            }
            scale_grads(&mut acc, 1.0 / chunk.len() as f64);
            clip_global_norm(&mut acc, GRAD_CLIP_NORM);
            adam_update(&mut params, &acc, &mut opt, &hyper);
        }
        let cider = if eval_items.is_empty() {
            None
        } else {
            Some(evaluate_greedy_cider(&params, cfg, &vocab, &eval_items, &idf)?)
        };
        log.push(EpochLog {
            epoch,
            phase: Phase::Xe,
            loss: epoch_loss / epoch_tokens.max(1) as f64,
            cider,
        });
    }

    let reward = |cand: &[String], refs: &[Vec<String>]| -> Result<f64, MetricsError> {
        Ok(cider_d(cand, refs, &idf, DEFAULT_SIGMA))
    };
    for _ in 0..cfg.epochs_rl {
        epoch += 1;
        phase = Phase::Rl;
        order.shuffle(&mut rng);
        let mut surrogate = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainItem> = chunk.iter().map(|&i| items[i].clone()).collect();
            let stats = scst_step(&mut params, &mut opt, cfg, &vocab, &batch, &reward, &mut rng)?;
            surrogate += stats.mean_surrogate;
            batches += 1;
        }
        let cider = if eval_items.is_empty() {
            None
        } else {
            Some(evaluate_greedy_cider(&params, cfg, &vocab, &eval_items, &idf)?)
        };
        log.push(EpochLog {
            epoch,
            phase: Phase::Rl,
            loss: surrogate / batches.max(1) as f64,
            cider,
        });
    }

    if cfg.epochs_rl == 0 {
        phase = Phase::Xe;
    }
    let checkpoint = Checkpoint {
        version: FORMAT_VERSION,
        config: cfg.clone(),
        vocab,
        epoch: epoch as u64,
        phase,
        params,
        opt,
    };
    Ok(TrainOutput { checkpoint, log })
}
