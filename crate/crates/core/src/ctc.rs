//! Exact CTC machinery: training loss, greedy collapse decoding, and
//! incremental prefix scoring for beam-search fusion.
//!
//! Blank id is 0 everywhere. All accumulation is in log space.

use crate::tensor::{ctc_forward_backward, log_add_exp};
use crate::{Mat, Result, TridecError};

pub const BLANK: usize = 0;

/// CTC negative log-likelihood of `target` given `T' x V` log-prob rows.
/// Infeasible targets (longer than the frame count allows) yield `+inf`.
pub fn ctc_loss(logprobs: &Mat, target: &[usize]) -> Result<f64> {
    if target.iter().any(|&t| t == BLANK) {
        return Err(TridecError::Contract(
            "ctc target must not contain blank".into(),
        ));
    }
    let (nll, _, _) = ctc_forward_backward(
        &logprobs.data,
        logprobs.rows,
        logprobs.cols,
        target,
        BLANK,
    );
    Ok(nll)
}

/// Per-frame argmax (ties to the lowest token id), collapse repeats, drop
/// blanks.
pub fn ctc_greedy(logprobs: &Mat) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for t in 0..logprobs.rows {
        let row = logprobs.row(t);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if best != prev && best != BLANK {
            out.push(best);
        }
        prev = best;
    }
    out
}

/// Immutable incremental prefix-scorer state. `score()` is the log mass of
/// all complete label sequences that begin with this prefix.
#[derive(Clone, Debug)]
pub struct CtcPrefixState {
    prefix: Vec<usize>,
    /// Per frame: log prob of emitting exactly the prefix with paths ending
    /// in a non-blank (the prefix's last label).
    r_nonblank: Vec<f64>,
    /// Per frame: log prob of emitting exactly the prefix, ending in blank.
    r_blank: Vec<f64>,
    score: f64,
}

impl CtcPrefixState {
    /// State for the empty prefix: total mass 1, so score 0.
    pub fn new(logprobs: &Mat) -> Self {
        let frames = logprobs.rows;
        let mut r_blank = vec![f64::NEG_INFINITY; frames];
        let mut acc = 0.0;
        for t in 0..frames {
            acc += logprobs.row(t)[BLANK];
            r_blank[t] = acc;
        }
        CtcPrefixState {
            prefix: Vec::new(),
            r_nonblank: vec![f64::NEG_INFINITY; frames],
            r_blank,
            score: 0.0,
        }
    }

    pub fn prefix(&self) -> &[usize] {
        &self.prefix
    }

    /// Prefix score: log total probability of all complete sequences that
    /// share this prefix (Eq. 3 accounting).
    pub fn score(&self) -> f64 {
        self.score
    }

    /// Log probability that the emitted sequence equals the prefix exactly.
    pub fn terminal_score(&self) -> f64 {
        let t = self.r_blank.len();
        if t == 0 {
            return if self.prefix.is_empty() {
                0.0
            } else {
                f64::NEG_INFINITY
            };
        }
        log_add_exp(self.r_blank[t - 1], self.r_nonblank[t - 1])
    }

    /// Extend the prefix by one non-blank token, returning the new state and
    /// its prefix score.
    pub fn extend(&self, token: usize, logprobs: &Mat) -> Result<(CtcPrefixState, f64)> {
        if token == BLANK {
            return Err(TridecError::Contract(
                "cannot extend a ctc prefix with blank".into(),
            ));
        }
        if token >= logprobs.cols {
            return Err(TridecError::Contract(format!(
                "token {token} out of range for vocab {}",
                logprobs.cols
            )));
        }
        let frames = logprobs.rows;
        let last = self.prefix.last().copied();
        let mut r_nonblank = vec![f64::NEG_INFINITY; frames];
        let mut r_blank = vec![f64::NEG_INFINITY; frames];
        let mut score = f64::NEG_INFINITY;
        let mut prev_nb = f64::NEG_INFINITY;
        let mut prev_b = f64::NEG_INFINITY;
        // phi(t) = r_blank(t) (+ r_nonblank(t) when the new token differs
        // from the prefix's last); phi(-1) = 0 only for the empty prefix.
        let mut prev_phi = if self.prefix.is_empty() {
            0.0
        } else {
            f64::NEG_INFINITY
        };
        for t in 0..frames {
            let p_tok = logprobs.row(t)[token];
            let p_blank = logprobs.row(t)[BLANK];
            let nb = log_add_exp(prev_nb, prev_phi) + p_tok;
            let b = log_add_exp(prev_b, prev_nb) + p_blank;
            score = log_add_exp(score, prev_phi + p_tok);
            r_nonblank[t] = nb;
            r_blank[t] = b;
            prev_nb = nb;
            prev_b = b;
            prev_phi = if last == Some(token) {
                self.r_blank[t]
            } else {
                log_add_exp(self.r_blank[t], self.r_nonblank[t])
            };
        }
        let mut prefix = self.prefix.clone();
        prefix.push(token);
        Ok((
            CtcPrefixState {
                prefix,
                r_nonblank,
                r_blank,
                score,
            },
            score,
        ))
    }
}

/// Exhaustive-enumeration reference implementations. Deliberately
/// brute-force and independent of the incremental scorer; used by tests and
/// the acceptance suite as ground truth on small instances.
pub mod oracle {
    use super::BLANK;
    use crate::Mat;

    /// Collapse a frame-level path: merge repeats, then drop blanks.
    pub fn collapse(path: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = usize::MAX;
        for &p in path {
            if p != prev && p != BLANK {
                out.push(p);
            }
            prev = p;
        }
        out
    }

    fn for_each_path(logprobs: &Mat, mut f: impl FnMut(&[usize], f64)) {
        let frames = logprobs.rows;
        let vocab = logprobs.cols;
        let total = (vocab as u64).pow(frames as u32);
        let mut path = vec![0usize; frames];
        for mut idx in 0..total {
            let mut logp = 0.0;
            for t in 0..frames {
                let k = (idx % vocab as u64) as usize;
                idx /= vocab as u64;
                path[t] = k;
                logp += logprobs.row(t)[k];
            }
            f(&path, logp);
        }
    }

    /// Log probability that the collapsed emission equals `target` exactly.
    pub fn exact_sequence_log_prob(logprobs: &Mat, target: &[usize]) -> f64 {
        let mut mass = f64::NEG_INFINITY;
        for_each_path(logprobs, |path, logp| {
            if collapse(path) == target {
                mass = crate::tensor::log_add_exp(mass, logp);
            }
        });
        mass
    }

    /// Log total probability of all complete sequences beginning with
    /// `prefix`.
    pub fn prefix_log_prob(logprobs: &Mat, prefix: &[usize]) -> f64 {
        let mut mass = f64::NEG_INFINITY;
        for_each_path(logprobs, |path, logp| {
            let c = collapse(path);
            if c.len() >= prefix.len() && c[..prefix.len()] == *prefix {
                mass = crate::tensor::log_add_exp(mass, logp);
            }
        });
        mass
    }
}
