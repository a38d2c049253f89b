//! The full captioning model: named parameter store, seeded initialization,
//! tape binding, and the shared forward pass from a concept set to the
//! relationship embedding consumed by the decoder.
//!
//! Parameters live outside any tape as named buffers. Each forward pass
//! copies them onto a fresh tape as leaves; after `backward` the gradients
//! are read back per name.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::attention::{
    attribute_aggregate, coarse_explore, object_aggregate, relation_aggregate, AttentionBlockParams,
    AttentionError,
};
use crate::concepts::ConceptSet;
use crate::config::{Mode, TrainConfig};
use crate::decoder::DecoderParams;
use crate::embedding::{assemble_fine, structured_embed, EmbeddingError, EmbeddingParams};
use crate::lstm::LstmParams;
use crate::optim::GradMap;
use crate::tape::{Tape, TensorError, TensorId};
use crate::vocab::ConceptVocabulary;

/// One named parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Named-tensor collection; iteration order is the sorted name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParameters {
    tensors: BTreeMap<String, ParamTensor>,
}

impl ModelParameters {
    pub fn new() -> Self {
        ModelParameters::default()
    }

    pub fn insert(&mut self, name: String, tensor: ParamTensor) {
        self.tensors.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamTensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.values().map(|t| t.values.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    MissingParameter(String),
    Attention(AttentionError),
    Embedding(EmbeddingError),
    Tensor(TensorError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::MissingParameter(name) => write!(f, "missing parameter '{name}'"),
            ModelError::Attention(e) => write!(f, "{e}"),
            ModelError::Embedding(e) => write!(f, "{e}"),
            ModelError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for ModelError {}

impl From<AttentionError> for ModelError {
    fn from(e: AttentionError) -> Self {
        ModelError::Attention(e)
    }
}

impl From<EmbeddingError> for ModelError {
    fn from(e: EmbeddingError) -> Self {
        ModelError::Embedding(e)
    }
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

/// Relationship kinds keyed into parameter names.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum RelKind {
    Global,
    Attribute,
    Object,
    Relation,
}

impl RelKind {
    pub fn key(self) -> &'static str {
        match self {
            RelKind::Global => "g",
            RelKind::Attribute => "a",
            RelKind::Object => "o",
            RelKind::Relation => "r",
        }
    }
}

fn explorer_kinds(mode: Mode) -> &'static [RelKind] {
    match mode {
        Mode::Coarse => &[RelKind::Global],
        Mode::Fine => &[RelKind::Attribute, RelKind::Object, RelKind::Relation],
    }
}

/// Declared name/shape pairs for a configuration, in creation order.
fn param_specs(cfg: &TrainConfig, vocab_size: usize) -> Vec<(String, usize, usize)> {
    let (e, d, d_ff, d_a, r) = (cfg.e, cfg.d, cfg.d_ff, cfg.d_a, cfg.r);
    let mut specs = vec![(format!("embed.table"), vocab_size, e)];
    for kind in explorer_kinds(cfg.mode) {
        let k = kind.key();
        specs.push((format!("explorer.{k}.w_q"), e, e));
        specs.push((format!("explorer.{k}.w_k"), e, e));
        specs.push((format!("explorer.{k}.w_v"), e, e));
        specs.push((format!("explorer.{k}.w_o"), e, e));
        specs.push((format!("explorer.{k}.ffn.w1"), e, d_ff));
        specs.push((format!("explorer.{k}.ffn.b1"), 1, d_ff));
        specs.push((format!("explorer.{k}.ffn.w2"), d_ff, e));
        specs.push((format!("explorer.{k}.ffn.b2"), 1, e));
        specs.push((format!("selfatt.{k}.w1"), d_a, e));
        specs.push((format!("selfatt.{k}.w2"), r, d_a));
    }
    for gate in ["i", "f", "g", "o"] {
        specs.push((format!("decoder.lstm.w_{gate}"), 2 * e + d, d));
        specs.push((format!("decoder.lstm.b_{gate}"), 1, d));
    }
    specs.push((format!("decoder.att.w_m"), d_a, e));
    specs.push((format!("decoder.att.w_h"), d_a, d));
    specs.push((format!("decoder.att.w_a"), 1, d_a));
    specs.push((format!("decoder.out.w_r"), vocab_size, e));
    specs.push((format!("decoder.out.w_h"), vocab_size, d));
    specs
}

const INIT_RANGE: f64 = 0.08;

fn is_bias(name: &str) -> bool {
    name.rsplit('.')
        .next()
        .is_some_and(|leaf| leaf.starts_with('b'))
}

/// Seed-deterministic initialization: weights uniform in
/// `[-INIT_RANGE, INIT_RANGE]`, biases zero.
pub fn init_parameters(
    cfg: &TrainConfig,
    vocab: &ConceptVocabulary,
    rng: &mut impl Rng,
) -> ModelParameters {
    let mut params = ModelParameters::new();
    for (name, rows, cols) in param_specs(cfg, vocab.len()) {
        let values = if is_bias(&name) {
            vec![0.0; rows * cols]
        } else {
            (0..rows * cols)
                .map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE))
                .collect()
        };
        params.insert(name, ParamTensor { rows, cols, values });
    }
    params
}

/// Tape handles for one explorer/embedding pair.
#[derive(Clone, Copy, Debug)]
pub struct BoundBlock {
    pub kind: RelKind,
    pub attention: AttentionBlockParams,
    pub selfatt: EmbeddingParams,
}

/// All parameters leased onto one tape for a forward/backward pass.
pub struct BoundModel {
    pub mode: Mode,
    pub table: TensorId,
    pub blocks: Vec<BoundBlock>,
    pub decoder: DecoderParams,
    names: Vec<(String, TensorId)>,
}

impl BoundModel {
    /// Read accumulated gradients back per parameter name.
    pub fn read_grads(&self, tape: &Tape) -> GradMap {
        self.names
            .iter()
            .map(|(name, id)| {
                let g = tape
                    .grad(*id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.values(*id).len()]);
                (name.clone(), g)
            })
            .collect()
    }
}

/// Copy every parameter onto the tape as a leaf and assemble typed handles.
pub fn bind(
    tape: &mut Tape,
    params: &ModelParameters,
    cfg: &TrainConfig,
) -> Result<BoundModel, ModelError> {
    let mut names = Vec::with_capacity(params.len());
    let mut lease = |tape: &mut Tape, name: String| -> Result<TensorId, ModelError> {
        let t = params
            .get(&name)
            .ok_or_else(|| ModelError::MissingParameter(name.clone()))?;
        let id = tape.leaf(t.rows, t.cols, t.values.clone())?;
        names.push((name, id));
        Ok(id)
    };

    let table = lease(tape, "embed.table".into())?;
    let mut blocks = Vec::new();
    for &kind in explorer_kinds(cfg.mode) {
        let k = kind.key();
        let w_q = lease(tape, format!("explorer.{k}.w_q"))?;
        let w_k = lease(tape, format!("explorer.{k}.w_k"))?;
        let w_v = lease(tape, format!("explorer.{k}.w_v"))?;
        let w_o = lease(tape, format!("explorer.{k}.w_o"))?;
        let w_f = lease(tape, format!("explorer.{k}.ffn.w1"))?;
        let b_f = lease(tape, format!("explorer.{k}.ffn.b1"))?;
        let w_ff = lease(tape, format!("explorer.{k}.ffn.w2"))?;
        let b_ff = lease(tape, format!("explorer.{k}.ffn.b2"))?;
        let attention = AttentionBlockParams::new(
            cfg.e, cfg.n_heads, w_q, w_k, w_v, w_o, w_f, b_f, w_ff, b_ff,
        )?;
        let selfatt = EmbeddingParams {
            w1: lease(tape, format!("selfatt.{k}.w1"))?,
            w2: lease(tape, format!("selfatt.{k}.w2"))?,
        };
        blocks.push(BoundBlock { kind, attention, selfatt });
    }

    let lstm = LstmParams {
        w_i: lease(tape, "decoder.lstm.w_i".into())?,
        b_i: lease(tape, "decoder.lstm.b_i".into())?,
        w_f: lease(tape, "decoder.lstm.w_f".into())?,
        b_f: lease(tape, "decoder.lstm.b_f".into())?,
        w_g: lease(tape, "decoder.lstm.w_g".into())?,
        b_g: lease(tape, "decoder.lstm.b_g".into())?,
        w_o: lease(tape, "decoder.lstm.w_o".into())?,
        b_o: lease(tape, "decoder.lstm.b_o".into())?,
    };
    let decoder = DecoderParams {
        lstm,
        w_m: lease(tape, "decoder.att.w_m".into())?,
        w_h: lease(tape, "decoder.att.w_h".into())?,
        w_a: lease(tape, "decoder.att.w_a".into())?,
        w_pr: lease(tape, "decoder.out.w_r".into())?,
        w_ph: lease(tape, "decoder.out.w_h".into())?,
    };

    Ok(BoundModel { mode: cfg.mode, table, blocks, decoder, names })
}

/// Embedded concept matrices for one example.
#[derive(Clone, Copy, Debug)]
pub struct ConceptMatrices {
    pub c_g: TensorId,
    pub c_a: TensorId,
    pub c_o: TensorId,
    pub c_r: TensorId,
}

/// Look up embedding rows for the global list and each category partition.
pub fn embed_concepts(
    tape: &mut Tape,
    table: TensorId,
    set: &ConceptSet,
) -> Result<ConceptMatrices, TensorError> {
    Ok(ConceptMatrices {
        c_g: tape.gather_rows(table, &set.global)?,
        c_a: tape.gather_rows(table, &set.attributes)?,
        c_o: tape.gather_rows(table, &set.objects)?,
        c_r: tape.gather_rows(table, &set.relations)?,
    })
}

/// Arithmetic mean of the global concept rows, a `1 x e` vector.
pub fn average_concepts(tape: &mut Tape, c_g: TensorId) -> Result<TensorId, TensorError> {
    tape.mean_rows(c_g)
}

/// Result of the encoder side: relationship embedding rows and `c_avg`.
#[derive(Clone, Copy, Debug)]
pub struct ExampleEncoding {
    /// `r x e` (coarse) or `3r x e` (fine).
    pub m: TensorId,
    pub c_avg: TensorId,
}

/// Shared forward pass: embed concepts, explore relationships, compress to
/// the fixed-size embedding.
pub fn encode_concepts(
    tape: &mut Tape,
    bound: &BoundModel,
    set: &ConceptSet,
) -> Result<ExampleEncoding, ModelError> {
    let mats = embed_concepts(tape, bound.table, set)?;
    let c_avg = average_concepts(tape, mats.c_g)?;
    let m = match bound.mode {
        Mode::Coarse => {
            let block = &bound.blocks[0];
            let r_g = coarse_explore(tape, mats.c_g, &block.attention)?;
            structured_embed(tape, r_g, &block.selfatt)?
        }
        Mode::Fine => {
            let attr = &bound.blocks[0];
            let obj = &bound.blocks[1];
            let rel = &bound.blocks[2];
            let r_a = attribute_aggregate(tape, mats.c_o, mats.c_a, &attr.attention)?;
            let r_o = object_aggregate(tape, mats.c_r, mats.c_o, &obj.attention)?;
            let r_r = relation_aggregate(tape, mats.c_o, mats.c_r, &rel.attention)?;
            let m_a = structured_embed(tape, r_a, &attr.selfatt)?;
            let m_o = structured_embed(tape, r_o, &obj.selfatt)?;
            let m_r = structured_embed(tape, r_r, &rel.selfatt)?;
            assemble_fine(tape, m_a, m_o, m_r)?
        }
    };
    Ok(ExampleEncoding { m, c_avg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::extract_sentence_concepts;
    use crate::text::normalize;
    use crate::vocab::Category;
    use alloc::string::ToString;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn toy_vocab() -> ConceptVocabulary {
        let sentences: Vec<Vec<String>> = (0..5)
            .map(|_| normalize("a young woman wearing a black shirt"))
            .collect();
        let lexicon = vec![
            ("young".to_string(), Category::Attribute),
            ("black".to_string(), Category::Attribute),
            ("woman".to_string(), Category::Object),
            ("shirt".to_string(), Category::Object),
            ("wearing".to_string(), Category::Relation),
        ];
        ConceptVocabulary::build(&sentences, &lexicon).unwrap()
    }

    fn desk_cfg(mode: Mode) -> TrainConfig {
        TrainConfig { mode, e: 16, d: 12, n_heads: 2, d_ff: 20, d_a: 10, r: 4, ..TrainConfig::desk() }
    }

    #[test]
    fn init_is_seed_deterministic_with_zero_biases() {
        let vocab = toy_vocab();
        let cfg = desk_cfg(Mode::Fine);
        let mut r1 = ChaCha12Rng::seed_from_u64(5);
        let mut r2 = ChaCha12Rng::seed_from_u64(5);
        let p1 = init_parameters(&cfg, &vocab, &mut r1);
        let p2 = init_parameters(&cfg, &vocab, &mut r2);
        assert_eq!(p1, p2);
        for (name, t) in p1.iter() {
            if is_bias(name) {
                assert!(t.values.iter().all(|&v| v == 0.0), "{name} not zero");
            } else {
                assert!(t.values.iter().all(|&v| v.abs() <= INIT_RANGE), "{name} out of range");
                assert!(t.values.iter().any(|&v| v != 0.0), "{name} all zero");
            }
        }
    }

    #[test]
    fn mode_controls_explorer_blocks() {
        let vocab = toy_vocab();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let coarse = init_parameters(&desk_cfg(Mode::Coarse), &vocab, &mut rng);
        assert!(coarse.get("explorer.g.w_q").is_some());
        assert!(coarse.get("explorer.a.w_q").is_none());
        let fine = init_parameters(&desk_cfg(Mode::Fine), &vocab, &mut rng);
        assert!(fine.get("explorer.a.w_q").is_some());
        assert!(fine.get("explorer.o.w_q").is_some());
        assert!(fine.get("explorer.r.w_q").is_some());
        assert!(fine.get("explorer.g.w_q").is_none());
    }

    #[test]
    fn encode_shapes_follow_mode() {
        let vocab = toy_vocab();
        let set = extract_sentence_concepts(
            &normalize("a young woman wearing a black shirt"),
            &vocab,
            20,
        );
        for (mode, want_rows) in [(Mode::Coarse, 4), (Mode::Fine, 12)] {
            let cfg = desk_cfg(mode);
            let mut rng = ChaCha12Rng::seed_from_u64(9);
            let params = init_parameters(&cfg, &vocab, &mut rng);
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &params, &cfg).unwrap();
            let enc = encode_concepts(&mut tape, &bound, &set).unwrap();
            assert_eq!(tape.shape(enc.m), (want_rows, cfg.e));
            assert_eq!(tape.shape(enc.c_avg), (1, cfg.e));
        }
    }

    #[test]
    fn grads_cover_every_parameter() {
        let vocab = toy_vocab();
        let set = extract_sentence_concepts(
            &normalize("a young woman wearing a black shirt"),
            &vocab,
            20,
        );
        let cfg = desk_cfg(Mode::Fine);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let params = init_parameters(&cfg, &vocab, &mut rng);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params, &cfg).unwrap();
        let enc = encode_concepts(&mut tape, &bound, &set).unwrap();
        let s = tape.sum_all(enc.m).unwrap();
        tape.backward(s).unwrap();
        let grads = bound.read_grads(&tape);
        assert_eq!(grads.len(), params.len());
        for (name, t) in params.iter() {
            assert_eq!(grads[name].len(), t.values.len());
        }
        // The embedding table feeds the encoder, so it must receive signal.
        assert!(grads["embed.table"].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn average_concepts_single_and_two_rows() {
        let mut tape = Tape::new();
        let one = tape.leaf(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let avg1 = average_concepts(&mut tape, one).unwrap();
        assert_eq!(tape.values(avg1), &[0.5, -1.0, 2.0]);
        let two = tape.leaf(2, 2, vec![1.0, 1.0, 3.0, 3.0]).unwrap();
        let avg2 = average_concepts(&mut tape, two).unwrap();
        assert_eq!(tape.values(avg2), &[2.0, 2.0]);
    }
}
