//! Relationship exploration over concept embeddings.
//!
//! The building block is multi-head scaled dot-product attention followed by
//! a position-wise feed-forward network (no residuals, no layer norm). The
//! coarse explorer runs it with the global concept matrix as query, key and
//! value at once; the fine explorer runs three category-restricted
//! aggregators:
//!
//! * attribute aggregator: objects attend to attributes,
//! * object aggregator: relations attend to objects,
//! * relation aggregator: objects attend to relations.

use alloc::vec::Vec;
use core::fmt;

use crate::fmath;
use crate::tape::{Tape, TensorError, TensorId};

/// One attention block: projection matrices `e x e` (read as `n_heads` slices
/// of width `e / n_heads`), output projection, and the feed-forward weights.
#[derive(Clone, Copy, Debug)]
pub struct AttentionBlockParams {
    pub w_q: TensorId,
    pub w_k: TensorId,
    pub w_v: TensorId,
    pub w_o: TensorId,
    pub w_f: TensorId,
    pub b_f: TensorId,
    pub w_ff: TensorId,
    pub b_ff: TensorId,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl AttentionBlockParams {
    /// Validates the head split; `e` must be divisible by `n_heads`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        e: usize,
        n_heads: usize,
        w_q: TensorId,
        w_k: TensorId,
        w_v: TensorId,
        w_o: TensorId,
        w_f: TensorId,
        b_f: TensorId,
        w_ff: TensorId,
        b_ff: TensorId,
    ) -> Result<Self, AttentionError> {
        if n_heads == 0 || e % n_heads != 0 {
            return Err(AttentionError::HeadsDontDivide { e, n_heads });
        }
        Ok(AttentionBlockParams {
            w_q,
            w_k,
            w_v,
            w_o,
            w_f,
            b_f,
            w_ff,
            b_ff,
            n_heads,
            head_dim: e / n_heads,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttentionError {
    HeadsDontDivide { e: usize, n_heads: usize },
    KeyValueRows { keys: usize, values: usize },
    MaskLength { expected: usize, found: usize },
    Tensor(TensorError),
}

impl fmt::Display for AttentionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionError::HeadsDontDivide { e, n_heads } => {
                write!(f, "width {e} is not divisible by {n_heads} heads")
            }
            AttentionError::KeyValueRows { keys, values } => {
                write!(f, "key rows {keys} != value rows {values}")
            }
            AttentionError::MaskLength { expected, found } => {
                write!(f, "key mask has {found} entries, expected {expected}")
            }
            AttentionError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for AttentionError {}

impl From<TensorError> for AttentionError {
    fn from(e: TensorError) -> Self {
        AttentionError::Tensor(e)
    }
}

/// Multi-head scaled dot-product attention. `query` is `l x e`, `key` and
/// `value` are `k x e`. `key_mask[j] == true` hides key row `j` from every
/// query. Heads are concatenated and projected by `w_o`.
pub fn multi_head_attention(
    tape: &mut Tape,
    query: TensorId,
    key: TensorId,
    value: TensorId,
    params: &AttentionBlockParams,
    key_mask: Option<&[bool]>,
) -> Result<TensorId, AttentionError> {
    let (l, _) = tape.shape(query);
    let (k_rows, _) = tape.shape(key);
    let (v_rows, _) = tape.shape(value);
    if k_rows != v_rows {
        return Err(AttentionError::KeyValueRows { keys: k_rows, values: v_rows });
    }
    if let Some(m) = key_mask {
        if m.len() != k_rows {
            return Err(AttentionError::MaskLength { expected: k_rows, found: m.len() });
        }
    }

    let pq = tape.matmul(query, params.w_q)?;
    let pk = tape.matmul(key, params.w_k)?;
    let pv = tape.matmul(value, params.w_v)?;

    let scale = 1.0 / fmath::sqrt(params.head_dim as f64);
    let mask_matrix = key_mask.map(|m| {
        let mut full = Vec::with_capacity(l * k_rows);
        for _ in 0..l {
            full.extend_from_slice(m);
        }
        full
    });

    let mut heads = Vec::with_capacity(params.n_heads);
    for h in 0..params.n_heads {
        let from = h * params.head_dim;
        let to = from + params.head_dim;
        let qh = tape.slice_cols(pq, from, to)?;
        let kh = tape.slice_cols(pk, from, to)?;
        let vh = tape.slice_cols(pv, from, to)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale)?;
        let weights = tape.softmax_rows(scaled, mask_matrix.clone())?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    Ok(tape.matmul(merged, params.w_o)?)
}

/// Attention weights of a single head, for inspection in tests.
/// Returns the `l x k` row-stochastic matrix of head `h`.
pub fn head_attention_weights(
    tape: &mut Tape,
    query: TensorId,
    key: TensorId,
    params: &AttentionBlockParams,
    h: usize,
) -> Result<TensorId, AttentionError> {
    let pq = tape.matmul(query, params.w_q)?;
    let pk = tape.matmul(key, params.w_k)?;
    let from = h * params.head_dim;
    let to = from + params.head_dim;
    let qh = tape.slice_cols(pq, from, to)?;
    let kh = tape.slice_cols(pk, from, to)?;
    let kt = tape.transpose(kh)?;
    let scores = tape.matmul(qh, kt)?;
    let scaled = tape.scale(scores, 1.0 / fmath::sqrt(params.head_dim as f64))?;
    Ok(tape.softmax_rows(scaled, None)?)
}

/// Position-wise feed-forward: `relu(x W_f + b_f) W_ff + b_ff`.
pub fn feed_forward(
    tape: &mut Tape,
    x: TensorId,
    params: &AttentionBlockParams,
) -> Result<TensorId, AttentionError> {
    let lin = tape.matmul(x, params.w_f)?;
    let biased = tape.add_row(lin, params.b_f)?;
    let hidden = tape.relu(biased)?;
    let out = tape.matmul(hidden, params.w_ff)?;
    Ok(tape.add_row(out, params.b_ff)?)
}

fn explore(
    tape: &mut Tape,
    q: TensorId,
    kv: TensorId,
    params: &AttentionBlockParams,
) -> Result<TensorId, AttentionError> {
    let att = multi_head_attention(tape, q, kv, kv, params, None)?;
    feed_forward(tape, att, params)
}

/// Coarse relationship exploration: all concepts attend to all concepts.
pub fn coarse_explore(
    tape: &mut Tape,
    c_g: TensorId,
    params: &AttentionBlockParams,
) -> Result<TensorId, AttentionError> {
    explore(tape, c_g, c_g, params)
}

/// Objects attend to attributes; result has one row per object.
pub fn attribute_aggregate(
    tape: &mut Tape,
    c_o: TensorId,
    c_a: TensorId,
    params: &AttentionBlockParams,
) -> Result<TensorId, AttentionError> {
    explore(tape, c_o, c_a, params)
}

/// Relations attend to objects; result has one row per relation.
pub fn object_aggregate(
    tape: &mut Tape,
    c_r: TensorId,
    c_o: TensorId,
    params: &AttentionBlockParams,
) -> Result<TensorId, AttentionError> {
    explore(tape, c_r, c_o, params)
}

/// Objects attend to relations; result has one row per object.
pub fn relation_aggregate(
    tape: &mut Tape,
    c_o: TensorId,
    c_r: TensorId,
    params: &AttentionBlockParams,
) -> Result<TensorId, AttentionError> {
    explore(tape, c_o, c_r, params)
}

/// The three fine-grained aggregators with independent parameter blocks.
pub fn fine_explore(
    tape: &mut Tape,
    c_a: TensorId,
    c_o: TensorId,
    c_r: TensorId,
    attr_params: &AttentionBlockParams,
    obj_params: &AttentionBlockParams,
    rel_params: &AttentionBlockParams,
) -> Result<(TensorId, TensorId, TensorId), AttentionError> {
    let r_a = attribute_aggregate(tape, c_o, c_a, attr_params)?;
    let r_o = object_aggregate(tape, c_r, c_o, obj_params)?;
    let r_r = relation_aggregate(tape, c_o, c_r, rel_params)?;
    Ok((r_a, r_o, r_r))
}
