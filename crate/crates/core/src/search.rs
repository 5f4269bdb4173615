//! Decoding strategies: AR greedy, label-synchronous CTC+AR beam search, and
//! the tripartite beam search that fuses CTC, AR, and block-mask decoder
//! scores over a block schedule.

use crate::ctc::{ctc_greedy, CtcPrefixState};
use crate::model::{
    amd_decoder_forward, ar_decoder_forward, ctc_head, encoder_forward, EncoderOutput, ModelParams,
    NUM_SPECIALS, SOS_EOS,
};
use crate::{Mat, Result, TridecError};
use serde::{Deserialize, Serialize};

/// Decoding-time interpolation weights of the tripartite score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub lambda_ctc: f64,
    pub lambda_amd: f64,
    pub lambda_ar: f64,
}

impl FusionWeights {
    /// Baseline CTC+AR decoding split.
    pub fn ctc_ar_baseline() -> Self {
        FusionWeights {
            lambda_ctc: 0.7,
            lambda_amd: 0.0,
            lambda_ar: 0.3,
        }
    }

    /// Tripartite split: in-block CTC/AMD weights (0.3, 0.3), with the
    /// final CTC+AMD vs AR re-rank realized as 0.6 vs 0.4.
    pub fn tripartite_default() -> Self {
        FusionWeights {
            lambda_ctc: 0.3,
            lambda_amd: 0.3,
            lambda_ar: 0.4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_ctc < 0.0 || self.lambda_amd < 0.0 || self.lambda_ar < 0.0 {
            return Err(TridecError::Contract(
                "fusion weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Ordered contiguous blocks of 1-based inclusive label indices.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSchedule {
    pub blocks: Vec<(usize, usize)>,
}

impl BlockSchedule {
    /// True iff the blocks exactly partition `[1, len]` in order.
    pub fn partitions(&self, len: usize) -> bool {
        let mut next = 1;
        for &(s, e) in &self.blocks {
            if s != next || e < s {
                return false;
            }
            next = e + 1;
        }
        next == len + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ScheduleSpec {
    /// Uniform tiling by block size B, last block truncated.
    Fixed(usize),
    /// N leading singleton (AR-style) blocks, then Fixed(B) on the rest.
    Mixed { ar_prefix: usize, block: usize },
}

impl ScheduleSpec {
    /// Parse `fixed:B` or `mixed:N-B`.
    pub fn parse(s: &str) -> Result<Self> {
        let err = || TridecError::Contract(format!("bad schedule spec '{s}', expected fixed:B or mixed:N-B"));
        if let Some(b) = s.strip_prefix("fixed:") {
            let b: usize = b.parse().map_err(|_| err())?;
            if b == 0 {
                return Err(err());
            }
            return Ok(ScheduleSpec::Fixed(b));
        }
        if let Some(nb) = s.strip_prefix("mixed:") {
            let (n, b) = nb.split_once('-').ok_or_else(err)?;
            let n: usize = n.parse().map_err(|_| err())?;
            let b: usize = b.parse().map_err(|_| err())?;
            if b == 0 {
                return Err(err());
            }
            return Ok(ScheduleSpec::Mixed {
                ar_prefix: n,
                block: b,
            });
        }
        Err(err())
    }
}

impl std::fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleSpec::Fixed(b) => write!(f, "fixed:{b}"),
            ScheduleSpec::Mixed { ar_prefix, block } => write!(f, "mixed:{ar_prefix}-{block}"),
        }
    }
}

pub fn make_schedule(len: usize, spec: ScheduleSpec) -> Result<BlockSchedule> {
    if len == 0 {
        return Err(TridecError::EmptyInput("schedule over zero labels".into()));
    }
    let mut blocks = Vec::new();
    let (singles, block_size) = match spec {
        ScheduleSpec::Fixed(b) => (0, b),
        ScheduleSpec::Mixed { ar_prefix, block } => (ar_prefix.min(len), block),
    };
    if block_size == 0 {
        return Err(TridecError::Contract("block size must be >= 1".into()));
    }
    for i in 1..=singles {
        blocks.push((i, i));
    }
    let mut start = singles + 1;
    while start <= len {
        let end = (start + block_size - 1).min(len);
        blocks.push((start, end));
        start = end + 1;
    }
    Ok(BlockSchedule { blocks })
}

/// Decoder-call accounting for a schedule: AMD forwards per surviving path
/// versus the label-synchronous AR step count.
pub fn count_decoder_calls(schedule: &BlockSchedule, len: usize) -> (usize, usize) {
    (schedule.blocks.len(), len)
}

/// Partial or complete hypothesis carried through beam search.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub alpha_ctc: f64,
    pub alpha_ar: f64,
    pub alpha_amd: f64,
    pub ctc_state: CtcPrefixState,
    /// AMD forwards consumed along this hypothesis' path.
    pub amd_path_calls: usize,
}

pub fn fused_score_ctc_ar(h: &Hypothesis, w: &FusionWeights) -> f64 {
    w.lambda_ctc * h.alpha_ctc + w.lambda_ar * h.alpha_ar
}

pub fn tripartite_score(h: &Hypothesis, w: &FusionWeights) -> f64 {
    w.lambda_ctc * h.alpha_ctc + w.lambda_amd * h.alpha_amd + w.lambda_ar * h.alpha_ar
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredHypothesis {
    pub tokens: Vec<usize>,
    pub alpha_ctc: f64,
    pub alpha_amd: f64,
    pub alpha_ar: f64,
    pub fused: f64,
    pub amd_path_calls: usize,
}

/// Ranked decode result with instrumentation counters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NBestList {
    pub hyps: Vec<ScoredHypothesis>,
    /// Set when the encoder/CTC input was empty and no search ran.
    pub empty_input: bool,
    pub amd_calls: usize,
    pub ar_calls: usize,
}

impl NBestList {
    pub fn best_tokens(&self) -> &[usize] {
        self.hyps.first().map(|h| h.tokens.as_slice()).unwrap_or(&[])
    }
}

/// Ranking order: higher fused score first, ties by lexicographically
/// smaller token sequence. Deterministic output is a hard requirement.
fn sort_ranked<T, F: Fn(&T) -> (f64, &[usize])>(items: &mut [T], key: F) {
    items.sort_by(|a, b| {
        let (sa, ta) = key(a);
        let (sb, tb) = key(b);
        sb.partial_cmp(&sa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| ta.cmp(tb))
    });
}

/// Next-token and whole-sequence scoring interface of the AR branch, so the
/// searches run identically on the trained model and on tabular toy scorers.
pub trait ArScorer {
    /// Distribution over the vocabulary for the next token after `prefix`
    /// (sos implied, not included).
    fn next_log_probs(&mut self, prefix: &[usize]) -> Vec<f64>;
    /// One row per position of `tokens` plus a final end-of-sequence row:
    /// row j is the distribution of token j given tokens `< j`.
    fn seq_log_probs(&mut self, tokens: &[usize]) -> Vec<Vec<f64>>;
    fn calls(&self) -> usize;
}

/// Block-parallel scoring interface of the attention-mask decoder branch.
pub trait AmdScorer {
    /// Distributions for the concealed 1-based inclusive block positions of
    /// `tokens`. Implementations must be invariant to the token ids stored
    /// inside the block.
    fn block_log_probs(&mut self, tokens: &[usize], block: (usize, usize)) -> Vec<Vec<f64>>;
    fn calls(&self) -> usize;
}

pub struct ModelArScorer<'a> {
    params: &'a ModelParams,
    enc: &'a EncoderOutput,
    calls: usize,
}

impl<'a> ModelArScorer<'a> {
    pub fn new(params: &'a ModelParams, enc: &'a EncoderOutput) -> Self {
        ModelArScorer {
            params,
            enc,
            calls: 0,
        }
    }
}

impl ArScorer for ModelArScorer<'_> {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Vec<f64> {
        self.calls += 1;
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(SOS_EOS);
        input.extend_from_slice(prefix);
        let lp = crate::model::ar_next_log_probs(&input, self.enc, self.params)
            .expect("ar forward failed");
        lp
    }

    fn seq_log_probs(&mut self, tokens: &[usize]) -> Vec<Vec<f64>> {
        self.calls += 1;
        let mut input = Vec::with_capacity(tokens.len() + 1);
        input.push(SOS_EOS);
        input.extend_from_slice(tokens);
        let lp = ar_decoder_forward(&input, self.enc, self.params).expect("ar forward failed");
        (0..lp.rows).map(|r| lp.row(r).to_vec()).collect()
    }

    fn calls(&self) -> usize {
        self.calls
    }
}

pub struct ModelAmdScorer<'a> {
    params: &'a ModelParams,
    enc: &'a EncoderOutput,
    calls: usize,
}

impl<'a> ModelAmdScorer<'a> {
    pub fn new(params: &'a ModelParams, enc: &'a EncoderOutput) -> Self {
        ModelAmdScorer {
            params,
            enc,
            calls: 0,
        }
    }
}

impl AmdScorer for ModelAmdScorer<'_> {
    fn block_log_probs(&mut self, tokens: &[usize], block: (usize, usize)) -> Vec<Vec<f64>> {
        self.calls += 1;
        let lp = amd_decoder_forward(tokens, block.0, block.1, self.enc, self.params)
            .expect("amd forward failed");
        (0..lp.rows).map(|r| lp.row(r).to_vec()).collect()
    }

    fn calls(&self) -> usize {
        self.calls
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CtcArOptions {
    pub beam_size: usize,
    pub weights: FusionWeights,
    pub max_len: usize,
}

/// Label-synchronous CTC+AR beam search. Every live hypothesis is
/// expanded over the real-token vocabulary plus eos; candidates are scored by
/// the interpolated CTC-prefix and accumulated AR scores.
pub fn beam_search_ctc_ar(
    ctc_log_probs: &Mat,
    ar: &mut dyn ArScorer,
    opts: &CtcArOptions,
) -> Result<NBestList> {
    if opts.beam_size == 0 {
        return Err(TridecError::Contract("beam size must be >= 1".into()));
    }
    opts.weights.validate()?;
    if ctc_log_probs.rows == 0 {
        return Ok(NBestList {
            empty_input: true,
            ..NBestList::default()
        });
    }
    let vocab = ctc_log_probs.cols;
    let root = Hypothesis {
        tokens: Vec::new(),
        alpha_ctc: 0.0,
        alpha_ar: 0.0,
        alpha_amd: 0.0,
        ctc_state: CtcPrefixState::new(ctc_log_probs),
        amd_path_calls: 0,
    };
    let mut live = vec![root];
    let mut finalized: Vec<Hypothesis> = Vec::new();
    for _step in 0..=opts.max_len {
        if live.is_empty() {
            break;
        }
        // (hypothesis, is_final, prune score)
        let mut pool: Vec<(Hypothesis, bool, f64)> = Vec::new();
        for h in &live {
            let dist = ar.next_log_probs(&h.tokens);
            if h.tokens.len() < opts.max_len {
                for token in NUM_SPECIALS..vocab {
                    let (state, alpha_ctc) = h.ctc_state.extend(token, ctc_log_probs)?;
                    let mut tokens = h.tokens.clone();
                    tokens.push(token);
                    let cand = Hypothesis {
                        tokens,
                        alpha_ctc,
                        alpha_ar: h.alpha_ar + dist[token],
                        alpha_amd: 0.0,
                        ctc_state: state,
                        amd_path_calls: 0,
                    };
                    let score = fused_score_ctc_ar(&cand, &opts.weights);
                    pool.push((cand, false, score));
                }
            }
            // eos: hypothesis completes; CTC switches to the exact-sequence
            // score.
            let done = Hypothesis {
                tokens: h.tokens.clone(),
                alpha_ctc: h.ctc_state.terminal_score(),
                alpha_ar: h.alpha_ar + dist[SOS_EOS],
                alpha_amd: 0.0,
                ctc_state: h.ctc_state.clone(),
                amd_path_calls: 0,
            };
            let score = fused_score_ctc_ar(&done, &opts.weights);
            pool.push((done, true, score));
        }
        sort_ranked(&mut pool, |(h, _, s)| (*s, h.tokens.as_slice()));
        pool.truncate(opts.beam_size);
        live = Vec::new();
        for (h, is_final, _) in pool {
            if is_final {
                finalized.push(h);
            } else {
                live.push(h);
            }
        }
    }
    // Length limit reached: close out the survivors on their exact-sequence
    // CTC mass (no eos term available).
    for mut h in live {
        h.alpha_ctc = h.ctc_state.terminal_score();
        finalized.push(h);
    }
    let weights = opts.weights;
    let mut scored: Vec<ScoredHypothesis> = finalized
        .into_iter()
        .map(|h| ScoredHypothesis {
            fused: fused_score_ctc_ar(&h, &weights),
            tokens: h.tokens,
            alpha_ctc: h.alpha_ctc,
            alpha_amd: 0.0,
            alpha_ar: h.alpha_ar,
            amd_path_calls: 0,
        })
        .collect();
    sort_ranked(&mut scored, |h| (h.fused, h.tokens.as_slice()));
    scored.dedup_by(|a, b| a.tokens == b.tokens);
    Ok(NBestList {
        hyps: scored,
        empty_input: false,
        amd_calls: 0,
        ar_calls: ar.calls(),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct AmdOptions {
    pub k_amd: usize,
    pub k_main: usize,
    pub weights: FusionWeights,
    /// Ablation: include the AR term in the in-block pruning score, at the
    /// cost of one AR forward per candidate slot.
    pub ar_per_slot: bool,
}

struct Partial {
    parent: usize,
    tokens: Vec<usize>,
    alpha_ctc: f64,
    alpha_amd: f64,
    ctc_state: CtcPrefixState,
    amd_path_calls: usize,
}

/// Tripartite beam search: CTC greedy pins the hypothesis length, blocks of
/// the schedule are refilled in parallel by the attention-mask decoder, the
/// CTC 1-best token is merged into every slot's candidate set, and survivors
/// are re-ranked with the AR score at each block boundary.
pub fn beam_search_amd(
    ctc_log_probs: &Mat,
    ar: &mut dyn ArScorer,
    amd: &mut dyn AmdScorer,
    spec: ScheduleSpec,
    opts: &AmdOptions,
) -> Result<NBestList> {
    if opts.k_amd == 0 || opts.k_main == 0 {
        return Err(TridecError::Contract("K_AMD and K_main must be >= 1".into()));
    }
    opts.weights.validate()?;
    if ctc_log_probs.rows == 0 {
        return Ok(NBestList {
            empty_input: true,
            ..NBestList::default()
        });
    }
    let ctc_best = ctc_greedy(ctc_log_probs);
    let len = ctc_best.len();
    if len == 0 {
        // Empty CTC 1-best: the empty hypothesis is the result.
        let state = CtcPrefixState::new(ctc_log_probs);
        let h = ScoredHypothesis {
            tokens: Vec::new(),
            alpha_ctc: state.terminal_score(),
            alpha_amd: 0.0,
            alpha_ar: 0.0,
            fused: opts.weights.lambda_ctc * state.terminal_score(),
            amd_path_calls: 0,
        };
        return Ok(NBestList {
            hyps: vec![h],
            empty_input: false,
            amd_calls: 0,
            ar_calls: 0,
        });
    }
    let schedule = make_schedule(len, spec)?;
    if !schedule.partitions(len) {
        return Err(TridecError::Contract(format!(
            "schedule does not partition [1, {len}]"
        )));
    }
    let vocab = ctc_log_probs.cols;
    let mut beam = vec![Hypothesis {
        tokens: Vec::new(),
        alpha_ctc: 0.0,
        alpha_ar: 0.0,
        alpha_amd: 0.0,
        ctc_state: CtcPrefixState::new(ctc_log_probs),
        amd_path_calls: 0,
    }];
    for &(bs, be) in &schedule.blocks {
        // (a) one parallel AMD forward per beam member for the whole block
        let mut block_rows: Vec<Vec<Vec<f64>>> = Vec::with_capacity(beam.len());
        for h in &beam {
            let mut input = Vec::with_capacity(len);
            input.extend_from_slice(&h.tokens);
            input.extend_from_slice(&ctc_best[bs - 1..]);
            debug_assert_eq!(input.len(), len);
            block_rows.push(amd.block_log_probs(&input, (bs, be)));
        }
        // (b) slot-by-slot expansion with CTC 1-best merging
        let mut partials: Vec<Partial> = beam
            .iter()
            .enumerate()
            .map(|(i, h)| Partial {
                parent: i,
                tokens: h.tokens.clone(),
                alpha_ctc: h.alpha_ctc,
                alpha_amd: h.alpha_amd,
                ctc_state: h.ctc_state.clone(),
                amd_path_calls: h.amd_path_calls + 1,
            })
            .collect();
        for j in bs..=be {
            let mut expanded: Vec<(Partial, f64)> = Vec::new();
            for p in &partials {
                let dist = &block_rows[p.parent][j - bs];
                let mut candidates: Vec<usize> = {
                    let mut idx: Vec<usize> = (NUM_SPECIALS..vocab).collect();
                    idx.sort_by(|&a, &b| {
                        dist[b]
                            .partial_cmp(&dist[a])
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(a.cmp(&b))
                    });
                    idx.truncate(opts.k_amd);
                    idx
                };
                // Merge the CTC 1-best token into the candidate set (real
                // tokens only; an untrained CTC head may argmax a special).
                let merge = ctc_best[j - 1];
                if merge >= NUM_SPECIALS && !candidates.contains(&merge) {
                    candidates.push(merge);
                }
                for cand in candidates {
                    let (state, alpha_ctc) = p.ctc_state.extend(cand, ctc_log_probs)?;
                    let mut tokens = p.tokens.clone();
                    tokens.push(cand);
                    let alpha_amd = p.alpha_amd + dist[cand];
                    let mut prune = opts.weights.lambda_ctc * alpha_ctc
                        + opts.weights.lambda_amd * alpha_amd;
                    if opts.ar_per_slot {
                        let rows = ar.seq_log_probs(&tokens);
                        let alpha_ar: f64 =
                            tokens.iter().enumerate().map(|(i, &t)| rows[i][t]).sum();
                        prune += opts.weights.lambda_ar * alpha_ar;
                    }
                    expanded.push((
                        Partial {
                            parent: p.parent,
                            tokens,
                            alpha_ctc,
                            alpha_amd,
                            ctc_state: state,
                            amd_path_calls: p.amd_path_calls,
                        },
                        prune,
                    ));
                }
            }
            sort_ranked(&mut expanded, |(p, s)| (*s, p.tokens.as_slice()));
            expanded.truncate(opts.k_amd);
            partials = expanded.into_iter().map(|(p, _)| p).collect();
        }
        // (c) block complete: AR re-rank over full prefixes, prune to K_main
        let mut survivors: Vec<(Hypothesis, f64)> = Vec::with_capacity(partials.len());
        for p in partials {
            let rows = ar.seq_log_probs(&p.tokens);
            let alpha_ar: f64 = p.tokens.iter().enumerate().map(|(i, &t)| rows[i][t]).sum();
            let h = Hypothesis {
                tokens: p.tokens,
                alpha_ctc: p.alpha_ctc,
                alpha_ar,
                alpha_amd: p.alpha_amd,
                ctc_state: p.ctc_state,
                amd_path_calls: p.amd_path_calls,
            };
            let score = tripartite_score(&h, &opts.weights);
            survivors.push((h, score));
        }
        sort_ranked(&mut survivors, |(h, s)| (*s, h.tokens.as_slice()));
        survivors.truncate(opts.k_main);
        beam = survivors.into_iter().map(|(h, _)| h).collect();
    }
    let weights = opts.weights;
    let mut scored: Vec<ScoredHypothesis> = beam
        .into_iter()
        .map(|h| ScoredHypothesis {
            fused: tripartite_score(&h, &weights),
            tokens: h.tokens,
            alpha_ctc: h.alpha_ctc,
            alpha_amd: h.alpha_amd,
            alpha_ar: h.alpha_ar,
            amd_path_calls: h.amd_path_calls,
        })
        .collect();
    sort_ranked(&mut scored, |h| (h.fused, h.tokens.as_slice()));
    debug_assert!(scored.iter().all(|h| h.tokens.len() == len));
    Ok(NBestList {
        hyps: scored,
        empty_input: false,
        amd_calls: amd.calls(),
        ar_calls: ar.calls(),
    })
}

/// Pure AR greedy decoding (argmax next token until eos or the limit).
pub fn greedy_ar(ar: &mut dyn ArScorer, max_len: usize) -> NBestList {
    let mut tokens = Vec::new();
    let mut alpha_ar = 0.0;
    for _ in 0..max_len {
        let dist = ar.next_log_probs(&tokens);
        let mut best = SOS_EOS;
        let mut best_v = dist[SOS_EOS];
        for (k, &v) in dist.iter().enumerate().skip(NUM_SPECIALS) {
            if v > best_v {
                best = k;
                best_v = v;
            }
        }
        alpha_ar += best_v;
        if best == SOS_EOS {
            break;
        }
        tokens.push(best);
    }
    NBestList {
        hyps: vec![ScoredHypothesis {
            fused: alpha_ar,
            tokens,
            alpha_ctc: 0.0,
            alpha_amd: 0.0,
            alpha_ar,
            amd_path_calls: 0,
        }],
        empty_input: false,
        amd_calls: 0,
        ar_calls: ar.calls(),
    }
}

/// One decode configuration, as selected on the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DecodeMode {
    GreedyAr,
    BeamCtcAr {
        beam: usize,
        weights: FusionWeights,
    },
    Amd {
        spec: ScheduleSpec,
        k_amd: usize,
        k_main: usize,
        weights: FusionWeights,
        ar_per_slot: bool,
    },
}

impl DecodeMode {
    pub fn label(&self) -> String {
        match self {
            DecodeMode::GreedyAr => "greedy-ar".into(),
            DecodeMode::BeamCtcAr { beam, .. } => format!("beam-ctc-ar:{beam}"),
            DecodeMode::Amd {
                spec, k_amd, k_main, ..
            } => format!("amd:{spec}:k{k_amd}-{k_main}"),
        }
    }
}

/// Run one utterance end to end (encoder included) under a decode mode.
pub fn decode_utterance(params: &ModelParams, features: &Mat, mode: &DecodeMode) -> Result<NBestList> {
    let enc = encoder_forward(features, params)?;
    let max_len = params.config.max_len - 1;
    match mode {
        DecodeMode::GreedyAr => {
            let mut ar = ModelArScorer::new(params, &enc);
            Ok(greedy_ar(&mut ar, max_len))
        }
        DecodeMode::BeamCtcAr { beam, weights } => {
            let lp = ctc_head(&enc, params)?;
            let mut ar = ModelArScorer::new(params, &enc);
            beam_search_ctc_ar(
                &lp,
                &mut ar,
                &CtcArOptions {
                    beam_size: *beam,
                    weights: *weights,
                    max_len,
                },
            )
        }
        DecodeMode::Amd {
            spec,
            k_amd,
            k_main,
            weights,
            ar_per_slot,
        } => {
            let lp = ctc_head(&enc, params)?;
            let mut ar = ModelArScorer::new(params, &enc);
            let mut amd = ModelAmdScorer::new(params, &enc);
            beam_search_amd(
                &lp,
                &mut ar,
                &mut amd,
                *spec,
                &AmdOptions {
                    k_amd: *k_amd,
                    k_main: *k_main,
                    weights: *weights,
                    ar_per_slot: *ar_per_slot,
                },
            )
        }
    }
}

/// Per-utterance decode record emitted as one JSON line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub utterance_id: String,
    pub reference: Vec<usize>,
    pub best: Vec<usize>,
    pub nbest: Vec<ScoredHypothesis>,
    pub wall_seconds: f64,
    pub amd_calls: usize,
    pub ar_calls: usize,
    pub empty_input: bool,
}

/// Deterministic tabular scorers for oracle tests: every distribution is a
/// seeded hash of the visible conditioning context, so toy searches are
/// reproducible and the AMD scorer is leakage-free by construction.
pub mod toy {
    use super::{AmdScorer, ArScorer};
    use crate::Mat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn context_hash(seed: u64, tag: u64, ctx: &[usize]) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        h ^= tag;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
        for &t in ctx {
            h ^= (t as u64).wrapping_add(1);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    fn random_log_dist(seed: u64, vocab: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut row: Vec<f64> = (0..vocab).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v = (*v / s).ln();
        }
        row
    }

    pub struct RandomTabularAr {
        pub vocab: usize,
        pub seed: u64,
        calls: usize,
    }

    impl RandomTabularAr {
        pub fn new(vocab: usize, seed: u64) -> Self {
            RandomTabularAr {
                vocab,
                seed,
                calls: 0,
            }
        }
    }

    impl ArScorer for RandomTabularAr {
        fn next_log_probs(&mut self, prefix: &[usize]) -> Vec<f64> {
            self.calls += 1;
            random_log_dist(context_hash(self.seed, 0xa1, prefix), self.vocab)
        }

        fn seq_log_probs(&mut self, tokens: &[usize]) -> Vec<Vec<f64>> {
            self.calls += 1;
            (0..=tokens.len())
                .map(|j| random_log_dist(context_hash(self.seed, 0xa1, &tokens[..j]), self.vocab))
                .collect()
        }

        fn calls(&self) -> usize {
            self.calls
        }
    }

    pub struct RandomTabularAmd {
        pub vocab: usize,
        pub seed: u64,
        calls: usize,
    }

    impl RandomTabularAmd {
        pub fn new(vocab: usize, seed: u64) -> Self {
            RandomTabularAmd {
                vocab,
                seed,
                calls: 0,
            }
        }

        /// Distribution for slot `j` (1-based) given the visible context:
        /// tokens outside the block, with block positions blanked out.
        pub fn slot_log_probs(
            &self,
            tokens: &[usize],
            block: (usize, usize),
            j: usize,
        ) -> Vec<f64> {
            let concealed: Vec<usize> = tokens
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    if i + 1 >= block.0 && i + 1 <= block.1 {
                        usize::MAX - 1
                    } else {
                        t
                    }
                })
                .collect();
            let mut ctx = concealed;
            ctx.push(usize::MAX - 2);
            ctx.push(j);
            random_log_dist(context_hash(self.seed, 0xb2, &ctx), self.vocab)
        }
    }

    impl AmdScorer for RandomTabularAmd {
        fn block_log_probs(&mut self, tokens: &[usize], block: (usize, usize)) -> Vec<Vec<f64>> {
            self.calls += 1;
            (block.0..=block.1)
                .map(|j| self.slot_log_probs(tokens, block, j))
                .collect()
        }

        fn calls(&self) -> usize {
            self.calls
        }
    }

    /// Random normalized `frames x vocab` log-probability matrix.
    pub fn random_ctc_matrix(frames: usize, vocab: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; frames * vocab];
        for r in 0..frames {
            let mut row: Vec<f64> = (0..vocab).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v = (*v / s).ln();
            }
            data[r * vocab..(r + 1) * vocab].copy_from_slice(&row);
        }
        Mat::new(frames, vocab, data)
    }
}

/// Exhaustive-enumeration references for the beam searches. Independent of
/// the beam implementations: they enumerate candidate sequences outright and
/// score them from the component definitions.
pub mod oracle {
    use super::{toy, FusionWeights, ScheduleSpec};
    use crate::ctc::{ctc_greedy, CtcPrefixState};
    use crate::model::{NUM_SPECIALS, SOS_EOS};
    use crate::Mat;

    /// Argmax of the fused CTC+AR objective over all eos-terminated real-token
    /// sequences of length `<= max_len`. Returns (tokens, fused score).
    pub fn ctc_ar_argmax(
        ctc_log_probs: &Mat,
        ar: &mut dyn super::ArScorer,
        weights: &FusionWeights,
        max_len: usize,
    ) -> (Vec<usize>, f64) {
        let vocab = ctc_log_probs.cols;
        let mut best: Option<(Vec<usize>, f64)> = None;
        let reals: Vec<usize> = (NUM_SPECIALS..vocab).collect();
        let mut stack: Vec<Vec<usize>> = vec![Vec::new()];
        while let Some(seq) = stack.pop() {
            // score the eos-terminated form of `seq`
            let mut state = CtcPrefixState::new(ctc_log_probs);
            let mut feasible = true;
            for &t in &seq {
                let (s, a) = state.extend(t, ctc_log_probs).unwrap();
                state = s;
                if a == f64::NEG_INFINITY {
                    feasible = false;
                    break;
                }
            }
            if feasible {
                let alpha_ctc = state.terminal_score();
                let mut alpha_ar = 0.0;
                for j in 0..seq.len() {
                    alpha_ar += ar.next_log_probs(&seq[..j])[seq[j]];
                }
                alpha_ar += ar.next_log_probs(&seq)[SOS_EOS];
                let fused = weights.lambda_ctc * alpha_ctc + weights.lambda_ar * alpha_ar;
                let better = match &best {
                    None => true,
                    Some((bt, bf)) => fused > *bf || (fused == *bf && seq < *bt),
                };
                if better {
                    best = Some((seq.clone(), fused));
                }
            }
            if seq.len() < max_len {
                for &t in reals.iter().rev() {
                    let mut next = seq.clone();
                    next.push(t);
                    stack.push(next);
                }
            }
        }
        best.unwrap()
    }

    /// Full tripartite ranking over every real-token sequence with the
    /// CTC-greedy length, under a schedule. The conditioning context of each
    /// block is the sequence's own committed prefix plus the CTC 1-best right
    /// context, exactly as in the beam search.
    pub fn amd_ranking(
        ctc_log_probs: &Mat,
        ar_seed: u64,
        amd: &toy::RandomTabularAmd,
        spec: ScheduleSpec,
        weights: &FusionWeights,
    ) -> Vec<(Vec<usize>, f64)> {
        let vocab = ctc_log_probs.cols;
        let ctc_best = ctc_greedy(ctc_log_probs);
        let len = ctc_best.len();
        let schedule = super::make_schedule(len, spec).unwrap();
        let reals: Vec<usize> = (NUM_SPECIALS..vocab).collect();
        let mut seqs: Vec<Vec<usize>> = vec![Vec::new()];
        for _ in 0..len {
            let mut next = Vec::new();
            for s in &seqs {
                for &t in &reals {
                    let mut v = s.clone();
                    v.push(t);
                    next.push(v);
                }
            }
            seqs = next;
        }
        let mut ar = toy::RandomTabularAr::new(vocab, ar_seed);
        let mut out: Vec<(Vec<usize>, f64)> = Vec::with_capacity(seqs.len());
        for seq in seqs {
            let mut state = CtcPrefixState::new(ctc_log_probs);
            let mut alpha_ctc = 0.0;
            for &t in &seq {
                let (s, a) = state.extend(t, ctc_log_probs).unwrap();
                state = s;
                alpha_ctc = a;
            }
            let mut alpha_amd = 0.0;
            for &(bs, be) in &schedule.blocks {
                let mut input: Vec<usize> = seq[..bs - 1].to_vec();
                input.extend_from_slice(&ctc_best[bs - 1..]);
                for j in bs..=be {
                    alpha_amd += amd.slot_log_probs(&input, (bs, be), j)[seq[j - 1]];
                }
            }
            let mut alpha_ar = 0.0;
            for j in 0..seq.len() {
                alpha_ar += super::ArScorer::next_log_probs(&mut ar, &seq[..j])[seq[j]];
            }
            let fused = weights.lambda_ctc * alpha_ctc
                + weights.lambda_amd * alpha_amd
                + weights.lambda_ar * alpha_ar;
            out.push((seq, fused));
        }
        out.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        out
    }
}
