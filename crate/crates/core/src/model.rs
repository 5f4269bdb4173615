//! Micro transformer encoder plus tripartite decoder: CTC head, causal AR
//! decoder, and the block-attention-mask decoder (AMD).
//!
//! The encoder is a plain pre-norm transformer with frame-stacking
//! subsampling. The AMD branch conceals a contiguous block of label slots by
//! zeroing their token embeddings before the positional encoding is added and
//! masking their key columns in self-attention, so block outputs are exactly
//! invariant to the token ids stored there.

use crate::io::{BinReader, BinWriter};
use crate::tensor::{Graph, TensorId, MASK_NEG};
use crate::{Mat, Result, TridecError};
use rand::Rng;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// Shared start/end-of-sequence sentinel id.
pub const SOS_EOS: usize = 1;
/// Display-only mask placeholder id; its embedding is never consumed.
pub const MASK_TOKEN: usize = 2;
/// First real token id.
pub const NUM_SPECIALS: usize = 3;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMD1";

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub max_len: usize,
    pub feature_dim: usize,
    pub subsample_factor: usize,
    /// Ablation flag: alias the AMD branch onto the AR decoder weights.
    pub share_decoder_weights: bool,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 32,
            d_model: 64,
            n_heads: 4,
            ff_dim: 128,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            max_len: 64,
            feature_dim: 16,
            subsample_factor: 2,
            share_decoder_weights: false,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < NUM_SPECIALS + 1 {
            return Err(TridecError::Contract(format!(
                "vocab_size {} must hold blank, sos/eos, mask and at least one real token",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(TridecError::Contract(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ff_dim == 0
            || self.n_encoder_layers == 0
            || self.n_decoder_layers == 0
            || self.max_len == 0
            || self.feature_dim == 0
            || self.subsample_factor == 0
        {
            return Err(TridecError::Contract(
                "all model dimensions must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TridecError::Contract(format!(
                "dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn real_tokens(&self) -> std::ops::Range<usize> {
        NUM_SPECIALS..self.vocab_size
    }
}

/// All learnable weights, stored flat in a fixed, named order.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    values: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

/// Weight groups used by the gradient-flow diagnostics.
pub fn param_group(name: &str) -> &'static str {
    if name.starts_with("enc.") {
        "encoder"
    } else if name.starts_with("ctc.") {
        "ctc"
    } else if name.starts_with("ar.") {
        "ar"
    } else {
        "amd"
    }
}

impl ModelParams {
    /// Xavier-style initialization, deterministic under the given rng.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ModelParams {
            config: config.clone(),
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        };
        let d = config.d_model;
        let v = config.vocab_size;
        let ff = config.ff_dim;
        let linear = |p: &mut ModelParams, name: &str, rows: usize, cols: usize, rng: &mut dyn rand::RngCore| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let w: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
            p.insert(&format!("{name}.w"), rows, cols, w);
            p.insert(&format!("{name}.b"), 1, cols, vec![0.0; cols]);
        };
        let norm = |p: &mut ModelParams, name: &str, n: usize| {
            p.insert(&format!("{name}.g"), 1, n, vec![1.0; n]);
            p.insert(&format!("{name}.b"), 1, n, vec![0.0; n]);
        };
        let attn = |p: &mut ModelParams, name: &str, rng: &mut dyn rand::RngCore| {
            for part in ["q", "k", "v", "o"] {
                let a = (6.0 / (2 * d) as f64).sqrt();
                let w: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-a..a)).collect();
                p.insert(&format!("{name}.w{part}"), d, d, w);
                p.insert(&format!("{name}.b{part}"), 1, d, vec![0.0; d]);
            }
        };
        let ffn = |p: &mut ModelParams, name: &str, rng: &mut dyn rand::RngCore| {
            let a1 = (6.0 / (d + ff) as f64).sqrt();
            let w1: Vec<f64> = (0..d * ff).map(|_| rng.gen_range(-a1..a1)).collect();
            p.insert(&format!("{name}.w1"), d, ff, w1);
            p.insert(&format!("{name}.b1"), 1, ff, vec![0.0; ff]);
            let w2: Vec<f64> = (0..ff * d).map(|_| rng.gen_range(-a1..a1)).collect();
            p.insert(&format!("{name}.w2"), ff, d, w2);
            p.insert(&format!("{name}.b2"), 1, d, vec![0.0; d]);
        };

        linear(
            &mut p,
            "enc.in",
            config.subsample_factor * config.feature_dim,
            d,
            rng,
        );
        for i in 0..config.n_encoder_layers {
            norm(&mut p, &format!("enc.l{i}.ln1"), d);
            attn(&mut p, &format!("enc.l{i}.attn"), rng);
            norm(&mut p, &format!("enc.l{i}.ln2"), d);
            ffn(&mut p, &format!("enc.l{i}.ff"), rng);
        }
        norm(&mut p, "enc.ln", d);
        linear(&mut p, "ctc.out", d, v, rng);

        let decoder_branches: &[&str] = if config.share_decoder_weights {
            &["ar"]
        } else {
            &["ar", "amd"]
        };
        for branch in decoder_branches {
            let ae = (6.0 / (v + d) as f64).sqrt();
            let emb: Vec<f64> = (0..v * d).map(|_| rng.gen_range(-ae..ae)).collect();
            p.insert(&format!("{branch}.embed"), v, d, emb);
            for i in 0..config.n_decoder_layers {
                norm(&mut p, &format!("{branch}.l{i}.ln1"), d);
                attn(&mut p, &format!("{branch}.l{i}.self"), rng);
                norm(&mut p, &format!("{branch}.l{i}.ln2"), d);
                attn(&mut p, &format!("{branch}.l{i}.cross"), rng);
                norm(&mut p, &format!("{branch}.l{i}.ln3"), d);
                ffn(&mut p, &format!("{branch}.l{i}.ff"), rng);
            }
            norm(&mut p, &format!("{branch}.ln"), d);
            linear(&mut p, &format!("{branch}.out"), d, v, rng);
        }
        Ok(p)
    }

    fn insert(&mut self, name: &str, rows: usize, cols: usize, values: Vec<f64>) {
        debug_assert_eq!(rows * cols, values.len());
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.shapes.push((rows, cols));
        self.values.push(values);
    }

    /// Resolve a parameter name, honoring the decoder weight-sharing alias.
    fn resolve(&self, name: &str) -> String {
        if self.config.share_decoder_weights {
            if let Some(rest) = name.strip_prefix("amd.") {
                return format!("ar.{rest}");
            }
        }
        name.to_string()
    }

    pub fn idx(&self, name: &str) -> usize {
        let resolved = self.resolve(name);
        *self
            .index
            .get(&resolved)
            .unwrap_or_else(|| panic!("unknown parameter {resolved}"))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn shape(&self, i: usize) -> (usize, usize) {
        self.shapes[i]
    }

    pub fn values(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn values_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::new(BufWriter::new(File::create(path)?));
        w.magic(CHECKPOINT_MAGIC)?;
        let c = &self.config;
        for v in [
            c.vocab_size,
            c.d_model,
            c.n_heads,
            c.ff_dim,
            c.n_encoder_layers,
            c.n_decoder_layers,
            c.max_len,
            c.feature_dim,
            c.subsample_factor,
            c.share_decoder_weights as usize,
        ] {
            w.u64(v as u64)?;
        }
        w.f64(c.dropout)?;
        w.u64(self.names.len() as u64)?;
        let mut offset = 0u64;
        for i in 0..self.names.len() {
            w.str(&self.names[i])?;
            w.u64(self.shapes[i].0 as u64)?;
            w.u64(self.shapes[i].1 as u64)?;
            w.u64(offset)?;
            offset += (self.values[i].len() * 8) as u64;
        }
        for v in &self.values {
            w.f64_slice(v)?;
        }
        use std::io::Write;
        w.into_inner().flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BinReader::new(BufReader::new(File::open(path)?));
        r.magic(CHECKPOINT_MAGIC)?;
        let mut ints = [0usize; 10];
        for v in ints.iter_mut() {
            *v = r.usize("config field", 1 << 32)?;
        }
        let dropout = r.f64()?;
        let config = ModelConfig {
            vocab_size: ints[0],
            d_model: ints[1],
            n_heads: ints[2],
            ff_dim: ints[3],
            n_encoder_layers: ints[4],
            n_decoder_layers: ints[5],
            max_len: ints[6],
            feature_dim: ints[7],
            subsample_factor: ints[8],
            share_decoder_weights: ints[9] != 0,
            dropout,
        };
        config.validate()?;
        let count = r.usize("tensor count", 1 << 20)?;
        let mut names = Vec::with_capacity(count);
        let mut shapes = Vec::with_capacity(count);
        let mut offsets = Vec::with_capacity(count);
        for _ in 0..count {
            names.push(r.str()?);
            let rows = r.usize("tensor rows", 1 << 24)?;
            let cols = r.usize("tensor cols", 1 << 24)?;
            offsets.push(r.u64()?);
            shapes.push((rows, cols));
        }
        let mut expected = 0u64;
        let mut values = Vec::with_capacity(count);
        for i in 0..count {
            if offsets[i] != expected {
                return Err(r.err(format!(
                    "tensor {} payload offset {} != expected {}",
                    names[i], offsets[i], expected
                )));
            }
            let n = shapes[i].0 * shapes[i].1;
            values.push(r.f64_vec(n)?);
            expected += (n * 8) as u64;
        }
        r.expect_eof()?;
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(ModelParams {
            config,
            names,
            shapes,
            values,
            index,
        })
    }
}

/// Query x key attention-permission matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.size + k]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// Additive form: 0 where allowed, a large negative sentinel where not.
    pub fn to_additive(&self) -> Mat {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { MASK_NEG })
            .collect();
        Mat::new(self.size, self.size, data)
    }
}

/// Lower-triangular permission: query q may attend keys k <= q (0-based).
pub fn build_causal_mask(len: usize) -> Result<AttentionMask> {
    if len == 0 {
        return Err(TridecError::EmptyInput("causal mask of length 0".into()));
    }
    let mut allowed = vec![false; len * len];
    for q in 0..len {
        for k in 0..=q {
            allowed[q * len + k] = true;
        }
    }
    Ok(AttentionMask { size: len, allowed })
}

/// Block concealment: every query may attend exactly the keys outside the
/// 1-based inclusive block `[block_start, block_end]`; attention is otherwise
/// bidirectional.
pub fn build_block_mask(len: usize, block_start: usize, block_end: usize) -> Result<AttentionMask> {
    if len == 0 {
        return Err(TridecError::EmptyInput("block mask of length 0".into()));
    }
    if block_start < 1 || block_start > block_end || block_end > len {
        return Err(TridecError::Contract(format!(
            "block [{block_start}, {block_end}] out of range for length {len}"
        )));
    }
    let mut allowed = vec![false; len * len];
    for q in 0..len {
        for k in 0..len {
            let inside = k + 1 >= block_start && k + 1 <= block_end;
            allowed[q * len + k] = !inside;
        }
    }
    Ok(AttentionMask { size: len, allowed })
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `T' x d_model`.
    pub frames: Mat,
    pub frame_count: usize,
}

/// Sinusoidal position table for `len` positions.
fn positional_encoding(len: usize, d: usize) -> Mat {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Mat::new(len, d, data)
}

/// Frame stacking: `T x F` -> `ceil(T/s) x (s*F)`, zero-padded at the tail.
fn stack_frames(features: &Mat, factor: usize) -> Mat {
    let t_out = features.rows.div_ceil(factor);
    let cols = factor * features.cols;
    let mut data = vec![0.0; t_out * cols];
    for t in 0..t_out {
        for s in 0..factor {
            let src = t * factor + s;
            if src < features.rows {
                data[t * cols + s * features.cols..t * cols + (s + 1) * features.cols]
                    .copy_from_slice(features.row(src));
            }
        }
    }
    Mat::new(t_out, cols, data)
}

/// Builds forward graphs against one parameter set, caching parameter leaves
/// so a training graph shares them across branches.
pub struct ForwardBuilder<'a> {
    pub g: Graph,
    params: &'a ModelParams,
    leaves: Vec<Option<TensorId>>,
}

impl<'a> ForwardBuilder<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        ForwardBuilder {
            g: Graph::new(),
            params,
            leaves: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    pub fn param(&mut self, name: &str) -> TensorId {
        let i = self.params.idx(name);
        if let Some(id) = self.leaves[i] {
            return id;
        }
        let (rows, cols) = self.params.shape(i);
        let id = self.g.leaf(rows, cols, self.params.values(i).to_vec());
        self.leaves[i] = Some(id);
        id
    }

    /// Iterate `(param_index, leaf_id)` for every parameter touched so far,
    /// in fixed parameter order.
    pub fn touched_leaves(&self) -> impl Iterator<Item = (usize, TensorId)> + '_ {
        self.leaves
            .iter()
            .enumerate()
            .filter_map(|(i, id)| id.map(|id| (i, id)))
    }

    fn linear(&mut self, x: TensorId, name: &str) -> Result<TensorId> {
        let w = self.param(&format!("{name}.w"));
        let b = self.param(&format!("{name}.b"));
        let y = self.g.matmul(x, w)?;
        self.g.add_row(y, b)
    }

    fn layer_norm(&mut self, x: TensorId, name: &str) -> Result<TensorId> {
        let g = self.param(&format!("{name}.g"));
        let b = self.param(&format!("{name}.b"));
        self.g.layer_norm(x, g, b)
    }

    fn feed_forward(&mut self, x: TensorId, name: &str) -> Result<TensorId> {
        let w1 = self.param(&format!("{name}.w1"));
        let b1 = self.param(&format!("{name}.b1"));
        let w2 = self.param(&format!("{name}.w2"));
        let b2 = self.param(&format!("{name}.b2"));
        let h = self.g.matmul(x, w1)?;
        let h = self.g.add_row(h, b1)?;
        let h = self.g.relu(h);
        let h = self.g.matmul(h, w2)?;
        self.g.add_row(h, b2)
    }

    /// Multi-head attention; `mask` is an additive `Lq x Lk` leaf.
    fn attention(
        &mut self,
        q_in: TensorId,
        kv_in: TensorId,
        mask: Option<TensorId>,
        name: &str,
    ) -> Result<TensorId> {
        let d = self.params.config.d_model;
        let heads = self.params.config.n_heads;
        let dh = d / heads;
        let wq = self.param(&format!("{name}.wq"));
        let bq = self.param(&format!("{name}.bq"));
        let wk = self.param(&format!("{name}.wk"));
        let bk = self.param(&format!("{name}.bk"));
        let wv = self.param(&format!("{name}.wv"));
        let bv = self.param(&format!("{name}.bv"));
        let wo = self.param(&format!("{name}.wo"));
        let bo = self.param(&format!("{name}.bo"));
        let q = self.g.matmul(q_in, wq)?;
        let q = self.g.add_row(q, bq)?;
        let k = self.g.matmul(kv_in, wk)?;
        let k = self.g.add_row(k, bk)?;
        let v = self.g.matmul(kv_in, wv)?;
        let v = self.g.add_row(v, bv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qs = self.g.slice_cols(q, h * dh, (h + 1) * dh)?;
            let ks = self.g.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vs = self.g.slice_cols(v, h * dh, (h + 1) * dh)?;
            let kt = self.g.transpose(ks);
            let scores = self.g.matmul(qs, kt)?;
            let scores = self.g.scale(scores, scale);
            let weights = self.g.row_softmax(scores, mask)?;
            head_outs.push(self.g.matmul(weights, vs)?);
        }
        let cat = self.g.concat_cols(&head_outs)?;
        let out = self.g.matmul(cat, wo)?;
        self.g.add_row(out, bo)
    }

    /// Encoder forward; returns the `T' x d_model` output node.
    pub fn encoder(&mut self, features: &Mat) -> Result<TensorId> {
        let cfg = &self.params.config;
        if features.rows == 0 {
            return Err(TridecError::EmptyInput("encoder features".into()));
        }
        if features.cols != cfg.feature_dim {
            return Err(TridecError::Contract(format!(
                "feature dim {} != configured {}",
                features.cols, cfg.feature_dim
            )));
        }
        if features.data.iter().any(|v| !v.is_finite()) {
            return Err(TridecError::Contract(
                "encoder features must be finite".into(),
            ));
        }
        let stacked = stack_frames(features, cfg.subsample_factor);
        let x = self.g.leaf(stacked.rows, stacked.cols, stacked.data);
        let mut h = self.linear(x, "enc.in")?;
        let pe = positional_encoding(self.g.shape(h).0, cfg.d_model);
        let pe = self.g.leaf(pe.rows, pe.cols, pe.data);
        h = self.g.add(h, pe)?;
        for i in 0..cfg.n_encoder_layers {
            let a = self.layer_norm(h, &format!("enc.l{i}.ln1"))?;
            let att = self.attention(a, a, None, &format!("enc.l{i}.attn"))?;
            h = self.g.add(h, att)?;
            let f = self.layer_norm(h, &format!("enc.l{i}.ln2"))?;
            let ff = self.feed_forward(f, &format!("enc.l{i}.ff"))?;
            h = self.g.add(h, ff)?;
        }
        self.layer_norm(h, "enc.ln")
    }

    /// Insert precomputed encoder output as a constant leaf.
    pub fn encoder_leaf(&mut self, enc: &EncoderOutput) -> TensorId {
        self.g
            .leaf(enc.frames.rows, enc.frames.cols, enc.frames.data.clone())
    }

    /// CTC head over an encoder node: `T' x V` log-probabilities.
    pub fn ctc_log_probs(&mut self, enc: TensorId) -> Result<TensorId> {
        let logits = self.linear(enc, "ctc.out")?;
        Ok(self.g.row_log_softmax(logits))
    }

    fn decoder_stack(
        &mut self,
        branch: &str,
        h0: TensorId,
        self_mask: TensorId,
        enc: TensorId,
    ) -> Result<TensorId> {
        let mut h = h0;
        for i in 0..self.params.config.n_decoder_layers {
            let a = self.layer_norm(h, &format!("{branch}.l{i}.ln1"))?;
            let att = self.attention(a, a, Some(self_mask), &format!("{branch}.l{i}.self"))?;
            h = self.g.add(h, att)?;
            let c = self.layer_norm(h, &format!("{branch}.l{i}.ln2"))?;
            let cross = self.attention(c, enc, None, &format!("{branch}.l{i}.cross"))?;
            h = self.g.add(h, cross)?;
            let f = self.layer_norm(h, &format!("{branch}.l{i}.ln3"))?;
            let ff = self.feed_forward(f, &format!("{branch}.l{i}.ff"))?;
            h = self.g.add(h, ff)?;
        }
        self.layer_norm(h, &format!("{branch}.ln"))
    }

    /// AR decoder forward over `tokens` (must begin with sos). Returns the
    /// `L x V` log-probability node; row j is the next-token distribution
    /// after tokens `0..=j`.
    pub fn ar_log_probs(&mut self, tokens: &[usize], enc: TensorId) -> Result<TensorId> {
        let cfg = &self.params.config;
        if tokens.first() != Some(&SOS_EOS) {
            return Err(TridecError::Contract(
                "ar decoder input must begin with sos".into(),
            ));
        }
        if tokens.len() > cfg.max_len {
            return Err(TridecError::Contract(format!(
                "ar input length {} exceeds max_len {}",
                tokens.len(),
                cfg.max_len
            )));
        }
        let len = tokens.len();
        let table = self.param("ar.embed");
        let emb = self.g.embedding(table, tokens)?;
        let emb = self.g.scale(emb, (cfg.d_model as f64).sqrt());
        let pe = positional_encoding(len, cfg.d_model);
        let pe = self.g.leaf(pe.rows, pe.cols, pe.data);
        let h0 = self.g.add(emb, pe)?;
        let mask = build_causal_mask(len)?.to_additive();
        let mask = self.g.leaf(mask.rows, mask.cols, mask.data);
        let h = self.decoder_stack("ar", h0, mask, enc)?;
        let logits = self.linear(h, "ar.out")?;
        Ok(self.g.row_log_softmax(logits))
    }

    /// AMD decoder forward: conceal the 1-based inclusive block
    /// `[block_start, block_end]` of `tokens` and return the log-probability
    /// rows for exactly those positions.
    pub fn amd_block_log_probs(
        &mut self,
        tokens: &[usize],
        block_start: usize,
        block_end: usize,
        enc: TensorId,
    ) -> Result<TensorId> {
        let cfg = &self.params.config;
        let len = tokens.len();
        if len == 0 {
            return Err(TridecError::EmptyInput("amd decoder input".into()));
        }
        if len > cfg.max_len {
            return Err(TridecError::Contract(format!(
                "amd input length {len} exceeds max_len {}",
                cfg.max_len
            )));
        }
        if block_start < 1 || block_start > block_end || block_end > len {
            return Err(TridecError::Contract(format!(
                "amd block [{block_start}, {block_end}] out of range for length {len}"
            )));
        }
        let table = self.param("amd.embed");
        let emb = self.g.embedding(table, tokens)?;
        let emb = self.g.scale(emb, (cfg.d_model as f64).sqrt());
        // Zero block-position embeddings before positions are added: token
        // identity concealed, slot position kept.
        let mut keep = vec![1.0; len * cfg.d_model];
        for pos in block_start - 1..block_end {
            keep[pos * cfg.d_model..(pos + 1) * cfg.d_model].fill(0.0);
        }
        let keep = self.g.leaf(len, cfg.d_model, keep);
        let emb = self.g.mul(emb, keep)?;
        let pe = positional_encoding(len, cfg.d_model);
        let pe = self.g.leaf(pe.rows, pe.cols, pe.data);
        let h0 = self.g.add(emb, pe)?;
        let mask = build_block_mask(len, block_start, block_end)?.to_additive();
        let mask = self.g.leaf(mask.rows, mask.cols, mask.data);
        let h = self.decoder_stack("amd", h0, mask, enc)?;
        let rows = self.g.slice_rows(h, block_start - 1, block_end)?;
        let logits = self.linear(rows, "amd.out")?;
        Ok(self.g.row_log_softmax(logits))
    }
}

fn node_to_mat(g: &Graph, id: TensorId) -> Mat {
    let (rows, cols) = g.shape(id);
    Mat::new(rows, cols, g.values(id).to_vec())
}

/// Run the encoder on `T x feature_dim` features.
pub fn encoder_forward(features: &Mat, params: &ModelParams) -> Result<EncoderOutput> {
    let mut fb = ForwardBuilder::new(params);
    let id = fb.encoder(features)?;
    let frames = node_to_mat(&fb.g, id);
    let frame_count = frames.rows;
    Ok(EncoderOutput {
        frames,
        frame_count,
    })
}

/// CTC head log-probabilities, `T' x V`.
pub fn ctc_head(enc: &EncoderOutput, params: &ModelParams) -> Result<Mat> {
    let mut fb = ForwardBuilder::new(params);
    let e = fb.encoder_leaf(enc);
    let id = fb.ctc_log_probs(e)?;
    Ok(node_to_mat(&fb.g, id))
}

/// Full AR decoder forward: `L x V` log-probabilities.
pub fn ar_decoder_forward(tokens: &[usize], enc: &EncoderOutput, params: &ModelParams) -> Result<Mat> {
    let mut fb = ForwardBuilder::new(params);
    let e = fb.encoder_leaf(enc);
    let id = fb.ar_log_probs(tokens, e)?;
    Ok(node_to_mat(&fb.g, id))
}

/// Next-token distribution of the AR decoder: last row of the forward over
/// `tokens` (which must begin with sos).
pub fn ar_next_log_probs(
    tokens: &[usize],
    enc: &EncoderOutput,
    params: &ModelParams,
) -> Result<Vec<f64>> {
    let lp = ar_decoder_forward(tokens, enc, params)?;
    Ok(lp.row(lp.rows - 1).to_vec())
}

/// AMD decoder forward for one concealed block (1-based inclusive indices):
/// one log-probability row per block position.
pub fn amd_decoder_forward(
    tokens: &[usize],
    block_start: usize,
    block_end: usize,
    enc: &EncoderOutput,
    params: &ModelParams,
) -> Result<Mat> {
    let mut fb = ForwardBuilder::new(params);
    let e = fb.encoder_leaf(enc);
    let id = fb.amd_block_log_probs(tokens, block_start, block_end, e)?;
    Ok(node_to_mat(&fb.g, id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 8,
            d_model: 8,
            n_heads: 2,
            ff_dim: 16,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            max_len: 16,
            feature_dim: 4,
            ..ModelConfig::default()
        }
    }

    fn tiny_params(seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams::init(tiny_config(), &mut rng).unwrap()
    }

    fn rand_features(t: usize, f: usize, seed: u64) -> Mat {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::new(t, f, (0..t * f).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let params = tiny_params(1);
        let features = rand_features(8, 4, 2);
        let out = encoder_forward(&features, &params).unwrap();
        assert_eq!(out.frame_count, 4);
        assert_eq!(out.frames.cols, 8);
        let out2 = encoder_forward(&features, &params).unwrap();
        assert_eq!(out.frames, out2.frames);
    }

    #[test]
    fn encoder_rejects_empty_input() {
        let params = tiny_params(1);
        let features = Mat::zeros(0, 4);
        assert!(matches!(
            encoder_forward(&features, &params),
            Err(TridecError::EmptyInput(_))
        ));
    }

    #[test]
    fn encoder_weight_sensitivity() {
        let params = tiny_params(1);
        let features = rand_features(8, 4, 2);
        let base = encoder_forward(&features, &params).unwrap();
        for i in 0..params.len() {
            if !params.name(i).starts_with("enc.") {
                continue;
            }
            let mut perturbed = params.clone();
            perturbed.values_mut(i)[0] += 1e-3;
            let out = encoder_forward(&features, &perturbed).unwrap();
            let maxdiff = base
                .frames
                .data
                .iter()
                .zip(&out.frames.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(maxdiff > 0.0, "no sensitivity to {}", params.name(i));
        }
    }

    #[test]
    fn ctc_head_rows_normalized_and_uniform_when_zeroed() {
        let mut params = tiny_params(1);
        let features = rand_features(8, 4, 2);
        let enc = encoder_forward(&features, &params).unwrap();
        let lp = ctc_head(&enc, &params).unwrap();
        assert_eq!(lp.rows, 4);
        assert_eq!(lp.cols, 8);
        for r in 0..lp.rows {
            let s: f64 = lp.row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let wi = params.idx("ctc.out.w");
        params.values_mut(wi).fill(0.0);
        let bi = params.idx("ctc.out.b");
        params.values_mut(bi).fill(0.0);
        let lp = ctc_head(&enc, &params).unwrap();
        let want = -(8f64.ln());
        for v in &lp.data {
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_shape() {
        let m = build_causal_mask(1).unwrap();
        assert!(m.allowed(0, 0));
        let m = build_causal_mask(3).unwrap();
        for q in 0..3 {
            for k in 0..3 {
                assert_eq!(m.allowed(q, k), k <= q);
            }
        }
        assert_eq!(m.count_allowed(), 6); // L(L+1)/2
        assert!(build_causal_mask(0).is_err());
    }

    #[test]
    fn block_mask_semantics() {
        let m = build_block_mask(4, 2, 3).unwrap();
        for q in 0..4 {
            for k in 0..4 {
                assert_eq!(m.allowed(q, k), k == 0 || k == 3);
            }
        }
        // whole-sequence block: nothing attendable
        let m = build_block_mask(3, 1, 3).unwrap();
        assert_eq!(m.count_allowed(), 0);
        let m = build_block_mask(5, 5, 5).unwrap();
        for q in 0..5 {
            assert!((0..4).all(|k| m.allowed(q, k)) && !m.allowed(q, 4));
        }
        assert!(build_block_mask(4, 0, 2).is_err());
        assert!(build_block_mask(4, 3, 5).is_err());
    }

    #[test]
    fn ar_rows_normalized_and_causal() {
        let params = tiny_params(3);
        let features = rand_features(8, 4, 4);
        let enc = encoder_forward(&features, &params).unwrap();
        let toks = vec![SOS_EOS, 3, 4, 5, 6];
        let lp = ar_decoder_forward(&toks, &enc, &params).unwrap();
        assert_eq!(lp.rows, 5);
        assert_eq!(lp.cols, 8);
        for r in 0..lp.rows {
            let s: f64 = lp.row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        // editing a future token leaves earlier rows bit-identical
        let mut toks2 = toks.clone();
        toks2[3] = 7;
        let lp2 = ar_decoder_forward(&toks2, &enc, &params).unwrap();
        for r in 0..3 {
            assert_eq!(lp.row(r), lp2.row(r), "row {r} changed");
        }
        assert_ne!(lp.row(3), lp2.row(3));
    }

    #[test]
    fn amd_block_leakage_free() {
        let params = tiny_params(5);
        let features = rand_features(10, 4, 6);
        let enc = encoder_forward(&features, &params).unwrap();
        let toks = vec![3, 4, 5, 6, 7];
        let lp = amd_decoder_forward(&toks, 2, 3, &enc, &params).unwrap();
        assert_eq!(lp.rows, 2);
        // permute block tokens: output identical
        let mut toks2 = toks.clone();
        toks2[1] = 7;
        toks2[2] = 3;
        let lp2 = amd_decoder_forward(&toks2, 2, 3, &enc, &params).unwrap();
        assert_eq!(lp.data, lp2.data);
        // changing context outside the block changes the rows
        let mut toks3 = toks.clone();
        toks3[0] = 6;
        let lp3 = amd_decoder_forward(&toks3, 2, 3, &enc, &params).unwrap();
        assert_ne!(lp.data, lp3.data);
        // full-sequence block: independent of all token ids
        let lp_all = amd_decoder_forward(&toks, 1, 5, &enc, &params).unwrap();
        let lp_all2 = amd_decoder_forward(&[7, 6, 5, 4, 3], 1, 5, &enc, &params).unwrap();
        assert_eq!(lp_all.data, lp_all2.data);
        for r in 0..lp_all.rows {
            let s: f64 = lp_all.row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let params = tiny_params(9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.amd1");
        params.save(&path).unwrap();
        let loaded = ModelParams::load(&path).unwrap();
        assert_eq!(params.config, loaded.config);
        assert_eq!(params.len(), loaded.len());
        for i in 0..params.len() {
            assert_eq!(params.name(i), loaded.name(i));
            assert_eq!(params.values(i), loaded.values(i));
        }
        let features = rand_features(8, 4, 2);
        let a = encoder_forward(&features, &params).unwrap();
        let b = encoder_forward(&features, &loaded).unwrap();
        assert_eq!(a.frames.data, b.frames.data);
        // save -> load -> save is byte-identical
        let path2 = dir.path().join("model2.amd1");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_checkpoint_fails_with_offset() {
        let params = tiny_params(9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.amd1");
        params.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match ModelParams::load(&path) {
            Err(TridecError::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn shared_decoder_weights_alias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ModelConfig {
            share_decoder_weights: true,
            ..tiny_config()
        };
        let params = ModelParams::init(cfg, &mut rng).unwrap();
        assert_eq!(params.idx("amd.embed"), params.idx("ar.embed"));
    }
}
