//! Desk-scale tripartite speech transcription decoder: a CTC branch, an
//! autoregressive decoder, and a block-based attention-mask decoder over a
//! shared micro transformer encoder, with fused beam search, synthetic data,
//! training, and evaluation tooling.

pub mod ctc;
pub mod eval;
pub mod io;
pub mod model;
pub mod search;
pub mod synthdata;
pub mod tensor;
pub mod training;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TridecError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: String,
        lhs: String,
        rhs: String,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },
    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: usize, step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TridecError>;

/// Row-major `f64` matrix used for plain (non-differentiated) values.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Mat { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Deterministic named sub-stream of a master seed, so corpus generation,
/// weight init, and block-size sampling can be varied independently.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the stream name, folded into the master seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}
