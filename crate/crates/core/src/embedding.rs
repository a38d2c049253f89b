//! Structured self-attention that compresses a variable-row relationship
//! matrix `R (N x e)` into exactly `r` rows:
//!
//! `A = softmax(W2 tanh(W1 R^T))` with the softmax over the `N` axis,
//! `M = A R`.
//!
//! Coarse mode uses `M_c = M_g`; fine mode stacks `M_f = [M_a; M_o; M_r]`.

use core::fmt;

use crate::tape::{Tape, TensorError, TensorId};

/// `w1` is `d_a x e`, `w2` is `r x d_a`.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingParams {
    pub w1: TensorId,
    pub w2: TensorId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EmbeddingError {
    /// Fine assembly requires all three parts to be `r x e`.
    ComponentShape {
        part: &'static str,
        found: (usize, usize),
        expected: (usize, usize),
    },
    Tensor(TensorError),
}

impl fmt::Display for EmbeddingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbeddingError::ComponentShape { part, found, expected } => write!(
                f,
                "{part} is {}x{}, expected {}x{}",
                found.0, found.1, expected.0, expected.1
            ),
            EmbeddingError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for EmbeddingError {}

impl From<TensorError> for EmbeddingError {
    fn from(e: TensorError) -> Self {
        EmbeddingError::Tensor(e)
    }
}

/// The attention matrix `A (r x N)` and the embedding `M (r x e)`.
pub fn structured_attention(
    tape: &mut Tape,
    relationships: TensorId,
    params: &EmbeddingParams,
) -> Result<(TensorId, TensorId), EmbeddingError> {
    let rt = tape.transpose(relationships)?;
    let hidden_lin = tape.matmul(params.w1, rt)?;
    let hidden = tape.tanh(hidden_lin)?;
    let logits = tape.matmul(params.w2, hidden)?;
    let a = tape.softmax_rows(logits, None)?;
    let m = tape.matmul(a, relationships)?;
    Ok((a, m))
}

/// Compress `R (N x e)` to `M (r x e)`.
pub fn structured_embed(
    tape: &mut Tape,
    relationships: TensorId,
    params: &EmbeddingParams,
) -> Result<TensorId, EmbeddingError> {
    structured_attention(tape, relationships, params).map(|(_, m)| m)
}

/// Coarse assembly is the identity on `M_g`.
pub fn assemble_coarse(m_g: TensorId) -> TensorId {
    m_g
}

/// Fine assembly stacks the three embeddings into `3r x e`.
pub fn assemble_fine(
    tape: &mut Tape,
    m_a: TensorId,
    m_o: TensorId,
    m_r: TensorId,
) -> Result<TensorId, EmbeddingError> {
    let expected = tape.shape(m_a);
    for (part, id) in [("object embedding", m_o), ("relation embedding", m_r)] {
        let found = tape.shape(id);
        if found != expected {
            return Err(EmbeddingError::ComponentShape { part, found, expected });
        }
    }
    Ok(tape.concat_rows(&[m_a, m_o, m_r])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_mat(rng: &mut ChaCha12Rng, r: usize, c: usize) -> Vec<f64> {
        (0..r * c).map(|_| rng.random_range(-0.8..0.8)).collect()
    }

    fn params(tape: &mut Tape, rng: &mut ChaCha12Rng, d_a: usize, e: usize, r: usize) -> EmbeddingParams {
        EmbeddingParams {
            w1: tape.leaf(d_a, e, rand_mat(rng, d_a, e)).unwrap(),
            w2: tape.leaf(r, d_a, rand_mat(rng, r, d_a)).unwrap(),
        }
    }

    #[test]
    fn single_input_row_repeats_r_times() {
        let (d_a, e, r) = (5, 6, 4);
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let mut tape = Tape::new();
        let p = params(&mut tape, &mut rng, d_a, e, r);
        let row = rand_mat(&mut rng, 1, e);
        let x = tape.leaf(1, e, row.clone()).unwrap();
        let (a, m) = structured_attention(&mut tape, x, &p).unwrap();
        assert_eq!(tape.shape(a), (r, 1));
        assert!(tape.values(a).iter().all(|&v| v == 1.0));
        for i in 0..r {
            for j in 0..e {
                assert!((tape.values(m)[i * e + j] - row[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn output_always_has_r_rows() {
        let (d_a, e, r) = (5, 6, 3);
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        let mut tape = Tape::new();
        let p = params(&mut tape, &mut rng, d_a, e, r);
        for n in [1usize, 2, 7, 19] {
            let x = tape.leaf(n, e, rand_mat(&mut rng, n, e)).unwrap();
            let m = structured_embed(&mut tape, x, &p).unwrap();
            assert_eq!(tape.shape(m), (r, e));
        }
    }

    #[test]
    fn matches_explicit_two_matrix_oracle() {
        let (d_a, e, r, n) = (5, 6, 4, 7);
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let mut tape = Tape::new();
        let p = params(&mut tape, &mut rng, d_a, e, r);
        let x_data = rand_mat(&mut rng, n, e);
        let x = tape.leaf(n, e, x_data.clone()).unwrap();
        let (a, m) = structured_attention(&mut tape, x, &p).unwrap();

        let w1 = tape.values(p.w1).to_vec();
        let w2 = tape.values(p.w2).to_vec();
        // hidden[da][n] = tanh(sum_e w1[da][e] * x[n][e])
        let mut hidden = alloc::vec![0.0; d_a * n];
        for i in 0..d_a {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..e {
                    acc += w1[i * e + l] * x_data[j * e + l];
                }
                hidden[i * n + j] = libm::tanh(acc);
            }
        }
        // logits[r][n], row-wise softmax, M = A X
        for i in 0..r {
            let mut logits = alloc::vec![0.0; n];
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..d_a {
                    acc += w2[i * d_a + l] * hidden[l * n + j];
                }
                logits[j] = acc;
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| libm::exp(v - mx)).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..n {
                assert!((tape.values(a)[i * n + j] - exps[j] / sum).abs() < 1e-10);
            }
            for jj in 0..e {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += exps[j] / sum * x_data[j * e + jj];
                }
                assert!((tape.values(m)[i * e + jj] - acc).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic_and_m_in_convex_hull() {
        let (d_a, e, r, n) = (5, 6, 4, 9);
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        let mut tape = Tape::new();
        let p = params(&mut tape, &mut rng, d_a, e, r);
        let x_data = rand_mat(&mut rng, n, e);
        let x = tape.leaf(n, e, x_data.clone()).unwrap();
        let (a, m) = structured_attention(&mut tape, x, &p).unwrap();
        for i in 0..r {
            let sum: f64 = tape.values(a)[i * n..(i + 1) * n].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        // Convex combination stays inside the per-column value range.
        for j in 0..e {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for i in 0..n {
                lo = lo.min(x_data[i * e + j]);
                hi = hi.max(x_data[i * e + j]);
            }
            for i in 0..r {
                let v = tape.values(m)[i * e + j];
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn fine_assembly_stacks_in_order_and_checks_shapes() {
        let e = 6;
        let mut rng = ChaCha12Rng::seed_from_u64(47);
        let mut tape = Tape::new();
        let a = tape.leaf(2, e, rand_mat(&mut rng, 2, e)).unwrap();
        let o = tape.leaf(2, e, rand_mat(&mut rng, 2, e)).unwrap();
        let r = tape.leaf(2, e, rand_mat(&mut rng, 2, e)).unwrap();
        let m = assemble_fine(&mut tape, a, o, r).unwrap();
        assert_eq!(tape.shape(m), (6, e));
        assert_eq!(&tape.values(m)[..2 * e], tape.values(a));
        assert_eq!(&tape.values(m)[2 * e..4 * e], tape.values(o));
        assert_eq!(&tape.values(m)[4 * e..], tape.values(r));

        let bad = tape.leaf(3, e, rand_mat(&mut rng, 3, e)).unwrap();
        let err = assemble_fine(&mut tape, a, o, bad).unwrap_err();
        assert!(matches!(err, EmbeddingError::ComponentShape { .. }));
    }

    #[test]
    fn coarse_assembly_is_identity() {
        let mut tape = Tape::new();
        let m_g = tape.zeros(3, 4).unwrap();
        assert_eq!(assemble_coarse(m_g), m_g);
    }
}
