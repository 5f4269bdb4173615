//! Training: the three loss compositions, marginalized block-size sampling,
//! and an Adam loop with inverse-square-root warmup over the synthetic
//! corpus.

use crate::ctc::BLANK;
use crate::eval::wer;
use crate::io::{BinReader, BinWriter};
use crate::model::{encoder_forward, EncoderOutput, ForwardBuilder, ModelParams, SOS_EOS};
use crate::search::{greedy_ar, make_schedule, ModelArScorer, ScheduleSpec};
use crate::synthdata::{Corpus, Utterance};
use crate::tensor::TensorId;
use crate::{substream, Result, TridecError};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::time::Instant;

pub const TRAIN_STATE_MAGIC: &[u8; 4] = b"AMDS";

/// Interpolation weights of the tripartite training loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub gamma_ctc: f64,
    pub gamma_ar: f64,
    pub gamma_amd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma_ctc: 0.4,
            gamma_ar: 0.3,
            gamma_amd: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_ctc < 0.0 || self.gamma_ar < 0.0 || self.gamma_amd < 0.0 {
            return Err(TridecError::Contract(
                "loss weights must be non-negative".into(),
            ));
        }
        if self.gamma_ctc + self.gamma_ar + self.gamma_amd <= 0.0 {
            return Err(TridecError::Contract(
                "loss weights must sum to a positive value".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Block sizes sampled per utterance and step for the AMD loss.
    pub n_block_samples: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            peak_lr: 2e-3,
            warmup_steps: 100,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            n_block_samples: 4,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.peak_lr < 0.0 || !self.peak_lr.is_finite() {
            return Err(TridecError::Contract("peak_lr must be finite and >= 0".into()));
        }
        if self.warmup_steps == 0 {
            return Err(TridecError::Contract("warmup_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TridecError::Contract("batch_size must be >= 1".into()));
        }
        if self.n_block_samples == 0 {
            return Err(TridecError::Contract("n_block_samples must be >= 1".into()));
        }
        if self.grad_clip < 0.0 {
            return Err(TridecError::Contract("grad_clip must be >= 0".into()));
        }
        Ok(())
    }
}

/// `n` block sizes, each uniform on `[1, label_len]`.
pub fn sample_block_sizes(label_len: usize, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(label_len >= 1, "block sizes need at least one label");
    (0..n).map(|_| rng.gen_range(1..=label_len)).collect()
}

/// Component values of one utterance's loss (unweighted).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ctc: f64,
    pub ar: f64,
    pub amd: f64,
    pub total: f64,
}

/// Build the weighted loss graph for one utterance on top of an existing
/// encoder node. Branches with zero weight are skipped entirely.
fn build_loss_graph(
    fb: &mut ForwardBuilder,
    enc: TensorId,
    target: &[usize],
    weights: &LossWeights,
    block_sizes: &[usize],
) -> Result<(TensorId, LossParts)> {
    if target.is_empty() {
        return Err(TridecError::EmptyInput("training target".into()));
    }
    let mut parts = LossParts::default();
    let mut terms: Vec<TensorId> = Vec::new();
    if weights.gamma_ctc > 0.0 {
        let lp = fb.ctc_log_probs(enc)?;
        let l = fb.g.ctc_loss(lp, target, BLANK)?;
        parts.ctc = fb.g.values(l)[0];
        let scaled = fb.g.scale(l, weights.gamma_ctc);
        terms.push(scaled);
    }
    if weights.gamma_ar > 0.0 {
        let mut input = Vec::with_capacity(target.len() + 1);
        input.push(SOS_EOS);
        input.extend_from_slice(target);
        let mut shifted = target.to_vec();
        shifted.push(SOS_EOS);
        let lp = fb.ar_log_probs(&input, enc)?;
        let l = fb.g.pick_neg_sum(lp, &shifted)?;
        parts.ar = fb.g.values(l)[0];
        let scaled = fb.g.scale(l, weights.gamma_ar);
        terms.push(scaled);
    }
    if weights.gamma_amd > 0.0 {
        let mut amd_terms = Vec::new();
        for &b in block_sizes {
            let schedule = make_schedule(target.len(), ScheduleSpec::Fixed(b))?;
            for &(bs, be) in &schedule.blocks {
                let rows = fb.amd_block_log_probs(target, bs, be, enc)?;
                amd_terms.push(fb.g.pick_neg_sum(rows, &target[bs - 1..be])?);
            }
        }
        let mut sum = amd_terms[0];
        for &t in &amd_terms[1..] {
            sum = fb.g.add(sum, t)?;
        }
        parts.amd = fb.g.values(sum)[0];
        let scaled = fb.g.scale(sum, weights.gamma_amd);
        terms.push(scaled);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = fb.g.add(total, t)?;
    }
    parts.total = fb.g.values(total)[0];
    Ok((total, parts))
}

/// Eq.-6 style AMD loss: for each sampled block size the sentence is tiled
/// into anchor-1 blocks, each block concealed in turn with ground-truth
/// context elsewhere; the result sums per-token NLL over all passes.
pub fn amd_loss(
    params: &ModelParams,
    enc: &EncoderOutput,
    target: &[usize],
    block_sizes: &[usize],
) -> Result<f64> {
    if target.is_empty() {
        return Err(TridecError::EmptyInput("amd_loss target".into()));
    }
    if block_sizes.is_empty() {
        return Err(TridecError::EmptyInput("amd_loss block sizes".into()));
    }
    let mut fb = ForwardBuilder::new(params);
    let e = fb.encoder_leaf(enc);
    let weights = LossWeights {
        gamma_ctc: 0.0,
        gamma_ar: 0.0,
        gamma_amd: 1.0,
    };
    let (_, parts) = build_loss_graph(&mut fb, e, target, &weights, block_sizes)?;
    Ok(parts.amd)
}

/// Eq.-7 tripartite loss over a batch: mean of per-utterance
/// `γ1 L_CTC + γ2 L_AR + γ3 L_AMD`, block sizes drawn from `rng`.
pub fn tripartite_loss(
    params: &ModelParams,
    batch: &[Utterance],
    weights: &LossWeights,
    n_block_samples: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(TridecError::EmptyInput("tripartite_loss batch".into()));
    }
    let mut total = 0.0;
    for utt in batch {
        let block_sizes = if weights.gamma_amd > 0.0 {
            sample_block_sizes(utt.transcript.len(), n_block_samples, rng)
        } else {
            Vec::new()
        };
        let mut fb = ForwardBuilder::new(params);
        let enc = fb.encoder(&utt.features)?;
        let (_, parts) = build_loss_graph(&mut fb, enc, &utt.transcript, weights, &block_sizes)?;
        total += parts.total;
    }
    Ok(total / batch.len() as f64)
}

/// Per-epoch metrics log entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_ctc: f64,
    pub mean_ar: f64,
    pub mean_amd: f64,
    /// Greedy-AR token error rate on the dev split.
    pub dev_token_error_rate: f64,
    pub learning_rate: f64,
    pub wall_seconds: f64,
}

/// Adam with inverse-square-root warmup. All state needed to resume at an
/// epoch boundary lives here (plus the parameter checkpoint).
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
    epochs_done: usize,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Trainer {
    pub fn new(config: TrainConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let m = (0..params.len()).map(|i| vec![0.0; params.values(i).len()]).collect();
        let v = (0..params.len()).map(|i| vec![0.0; params.values(i).len()]).collect();
        Ok(Trainer {
            config,
            params,
            m,
            v,
            step: 0,
            epochs_done: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn step(&self) -> usize {
        self.step
    }

    fn learning_rate(&self, step: usize) -> f64 {
        let s = step as f64;
        let w = self.config.warmup_steps as f64;
        self.config.peak_lr * (s / w).min((w / s).sqrt())
    }

    /// One pass over the shuffled training split. Deterministic given the
    /// seed and epoch index, so training can resume at epoch boundaries.
    pub fn run_epoch(&mut self, corpus: &Corpus) -> Result<EpochMetrics> {
        if corpus.train.is_empty() {
            return Err(TridecError::EmptyInput("training split".into()));
        }
        if self.config.weights.gamma_ctc > 0.0 {
            check_ctc_feasibility(&self.params.config, &corpus.train)?;
        }
        let t0 = Instant::now();
        let epoch = self.epochs_done;
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        order.shuffle(&mut substream(
            self.config.seed,
            &format!("train.order.{epoch}"),
        ));
        let mut block_rng = substream(self.config.seed, &format!("train.blocks.{epoch}"));
        let mut sums = LossParts::default();
        let mut seen = 0usize;
        let mut last_lr = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let mut grads: Vec<Vec<f64>> = (0..self.params.len())
                .map(|i| vec![0.0; self.params.values(i).len()])
                .collect();
            let scale = 1.0 / chunk.len() as f64;
            for &ui in chunk {
                let utt = &corpus.train[ui];
                let block_sizes = if self.config.weights.gamma_amd > 0.0 {
                    sample_block_sizes(
                        utt.transcript.len(),
                        self.config.n_block_samples,
                        &mut block_rng,
                    )
                } else {
                    Vec::new()
                };
                let mut fb = ForwardBuilder::new(&self.params);
                let enc = fb.encoder(&utt.features)?;
                let (total, parts) = build_loss_graph(
                    &mut fb,
                    enc,
                    &utt.transcript,
                    &self.config.weights,
                    &block_sizes,
                )?;
                if !parts.total.is_finite() {
                    return Err(TridecError::Diverged {
                        epoch,
                        step: self.step,
                    });
                }
                sums.ctc += parts.ctc;
                sums.ar += parts.ar;
                sums.amd += parts.amd;
                sums.total += parts.total;
                seen += 1;
                let g = fb.g.backward(total)?;
                for (pi, leaf) in fb.touched_leaves() {
                    if let Some(dg) = g.get(leaf) {
                        let acc = &mut grads[pi];
                        for (a, &d) in acc.iter_mut().zip(dg) {
                            *a += scale * d;
                        }
                    }
                }
            }
            if self.config.grad_clip > 0.0 {
                let norm: f64 = grads
                    .iter()
                    .flat_map(|g| g.iter())
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                if norm > self.config.grad_clip {
                    let s = self.config.grad_clip / norm;
                    for g in &mut grads {
                        for x in g.iter_mut() {
                            *x *= s;
                        }
                    }
                }
            }
            self.step += 1;
            let lr = self.learning_rate(self.step);
            last_lr = lr;
            let bc1 = 1.0 - ADAM_B1.powi(self.step as i32);
            let bc2 = 1.0 - ADAM_B2.powi(self.step as i32);
            for pi in 0..self.params.len() {
                let g = &grads[pi];
                let m = &mut self.m[pi];
                let v = &mut self.v[pi];
                let p = self.params.values_mut(pi);
                for j in 0..g.len() {
                    m[j] = ADAM_B1 * m[j] + (1.0 - ADAM_B1) * g[j];
                    v[j] = ADAM_B2 * v[j] + (1.0 - ADAM_B2) * g[j] * g[j];
                    let mh = m[j] / bc1;
                    let vh = v[j] / bc2;
                    p[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
        self.epochs_done += 1;
        let n = seen as f64;
        Ok(EpochMetrics {
            epoch,
            mean_loss: sums.total / n,
            mean_ctc: sums.ctc / n,
            mean_ar: sums.ar / n,
            mean_amd: sums.amd / n,
            dev_token_error_rate: dev_token_error_rate(&self.params, &corpus.dev)?,
            learning_rate: last_lr,
            wall_seconds: t0.elapsed().as_secs_f64(),
        })
    }

    /// Persist the optimizer state (moments, step, epoch). Pairs with a
    /// parameter checkpoint saved at the same epoch boundary.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::new(BufWriter::new(File::create(path)?));
        w.magic(TRAIN_STATE_MAGIC)?;
        w.u64(self.step as u64)?;
        w.u64(self.epochs_done as u64)?;
        w.u64(self.m.len() as u64)?;
        for pi in 0..self.m.len() {
            w.u64(self.m[pi].len() as u64)?;
            w.f64_slice(&self.m[pi])?;
            w.f64_slice(&self.v[pi])?;
        }
        Ok(())
    }

    /// Resume from a parameter checkpoint and optimizer state.
    pub fn resume(config: TrainConfig, params: ModelParams, state_path: &Path) -> Result<Self> {
        config.validate()?;
        let mut r = BinReader::new(BufReader::new(File::open(state_path)?));
        r.magic(TRAIN_STATE_MAGIC)?;
        let step = r.usize("optimizer step", 1 << 40)?;
        let epochs_done = r.usize("epochs done", 1 << 32)?;
        let count = r.usize("tensor count", 1 << 20)?;
        if count != params.len() {
            return Err(r.err(format!(
                "state holds {count} tensors, checkpoint has {}",
                params.len()
            )));
        }
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for pi in 0..count {
            let n = r.usize("tensor size", 1 << 32)?;
            if n != params.values(pi).len() {
                return Err(r.err(format!(
                    "state tensor {pi} has {n} scalars, checkpoint has {}",
                    params.values(pi).len()
                )));
            }
            m.push(r.f64_vec(n)?);
            v.push(r.f64_vec(n)?);
        }
        r.expect_eof()?;
        Ok(Trainer {
            config,
            params,
            m,
            v,
            step,
            epochs_done,
        })
    }
}

/// CTC needs at least `L + adjacent repeats` subsampled frames per
/// utterance; an infeasible utterance would make the loss infinite, so fail
/// up front with the offending id instead of mid-epoch.
pub fn check_ctc_feasibility(config: &crate::model::ModelConfig, split: &[Utterance]) -> Result<()> {
    for utt in split {
        let frames = utt.features.rows.div_ceil(config.subsample_factor);
        let repeats = utt
            .transcript
            .windows(2)
            .filter(|w| w[0] == w[1])
            .count();
        let need = utt.transcript.len() + repeats;
        if frames < need {
            return Err(TridecError::Contract(format!(
                "utterance {} is CTC-infeasible: {frames} subsampled frames < {need} \
                 (labels + adjacent repeats); raise frames per token or lower subsampling",
                utt.id
            )));
        }
    }
    Ok(())
}

/// Greedy-AR token error rate over a split (WER at the token level).
pub fn dev_token_error_rate(params: &ModelParams, split: &[Utterance]) -> Result<f64> {
    if split.is_empty() {
        return Ok(f64::NAN);
    }
    let mut errors = 0usize;
    let mut refs = 0usize;
    for utt in split {
        let enc = encoder_forward(&utt.features, params)?;
        let mut ar = ModelArScorer::new(params, &enc);
        let out = greedy_ar(&mut ar, params.config.max_len - 1);
        let w = wer(&utt.transcript, out.best_tokens());
        errors += w.errors;
        refs += w.ref_len;
    }
    Ok(errors as f64 / refs as f64)
}
