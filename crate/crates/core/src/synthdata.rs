//! Deterministic synthetic transcription-task generator. Each real token has
//! a fixed Gaussian prototype vector; an utterance renders its transcript by
//! repeating each token's prototype for a sampled duration and adding
//! Gaussian noise. Everything is determined by the seed.

use crate::io::{BinReader, BinWriter};
use crate::model::NUM_SPECIALS;
use crate::{substream, Mat, Result, TridecError};
use rand::Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

pub const CORPUS_MAGIC: &[u8; 4] = b"AMDC";
/// Standard 10 ms frame shift, so RTF numbers carry conventional meaning.
pub const FRAME_SHIFT_SECONDS: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Real tokens, excluding the blank/sos-eos/mask specials.
    pub vocab_size: usize,
    /// Training-split size; dev and test each get a tenth of this.
    pub utterance_count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            vocab_size: 26,
            utterance_count: 2000,
            min_len: 5,
            max_len: 30,
            min_frames_per_token: 2,
            max_frames_per_token: 4,
            feature_dim: 16,
            noise_std: 0.3,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(TridecError::Contract("vocab_size must be positive".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(TridecError::Contract(format!(
                "invalid length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        if self.min_frames_per_token == 0 || self.min_frames_per_token > self.max_frames_per_token {
            return Err(TridecError::Contract(format!(
                "invalid frames-per-token range [{}, {}]",
                self.min_frames_per_token, self.max_frames_per_token
            )));
        }
        if self.feature_dim == 0 {
            return Err(TridecError::Contract("feature_dim must be positive".into()));
        }
        if self.noise_std < 0.0 {
            return Err(TridecError::Contract("noise_std must be >= 0".into()));
        }
        Ok(())
    }

    /// Model vocabulary that covers this corpus plus the special ids.
    pub fn model_vocab_size(&self) -> usize {
        NUM_SPECIALS + self.vocab_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Token ids in model space (first real token is `NUM_SPECIALS`).
    pub transcript: Vec<usize>,
    /// `T x feature_dim` frames.
    pub features: Mat,
}

impl Utterance {
    pub fn duration_seconds(&self) -> f64 {
        self.features.rows as f64 * FRAME_SHIFT_SECONDS
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn splits(&self) -> [(&str, &[Utterance]); 3] {
        [
            ("train", &self.train),
            ("dev", &self.dev),
            ("test", &self.test),
        ]
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; one value per call keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let mut proto_rng = substream(config.seed, "corpus.prototypes");
    let prototypes: Vec<Vec<f64>> = (0..config.vocab_size)
        .map(|_| (0..config.feature_dim).map(|_| gaussian(&mut proto_rng)).collect())
        .collect();
    let mut utt_rng = substream(config.seed, "corpus.utterances");
    let side_count = (config.utterance_count / 10).max(1);
    let mut make_split = |name: &str, count: usize| -> Vec<Utterance> {
        (0..count)
            .map(|i| {
                let len = utt_rng.gen_range(config.min_len..=config.max_len);
                // Adjacent repeats are resampled away: with sampled durations
                // a repeated prototype is indistinguishable from one longer
                // token, so repeats would make transcripts unrecoverable.
                let mut transcript: Vec<usize> = Vec::with_capacity(len);
                for _ in 0..len {
                    let mut tok = NUM_SPECIALS + utt_rng.gen_range(0..config.vocab_size);
                    while config.vocab_size > 1 && transcript.last() == Some(&tok) {
                        tok = NUM_SPECIALS + utt_rng.gen_range(0..config.vocab_size);
                    }
                    transcript.push(tok);
                }
                let durations: Vec<usize> = (0..len)
                    .map(|_| {
                        utt_rng
                            .gen_range(config.min_frames_per_token..=config.max_frames_per_token)
                    })
                    .collect();
                let frames: usize = durations.iter().sum();
                let mut data = vec![0.0; frames * config.feature_dim];
                let mut t = 0;
                for (tok, &dur) in transcript.iter().zip(&durations) {
                    let proto = &prototypes[tok - NUM_SPECIALS];
                    for _ in 0..dur {
                        for f in 0..config.feature_dim {
                            data[t * config.feature_dim + f] =
                                proto[f] + config.noise_std * gaussian(&mut utt_rng);
                        }
                        t += 1;
                    }
                }
                Utterance {
                    id: format!("{name}-{i:05}"),
                    transcript,
                    features: Mat::new(frames, config.feature_dim, data),
                }
            })
            .collect()
    };
    let train = make_split("train", config.utterance_count);
    let dev = make_split("dev", side_count);
    let test = make_split("test", side_count);
    Ok(Corpus {
        config: config.clone(),
        train,
        dev,
        test,
    })
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = BinWriter::new(BufWriter::new(File::create(path)?));
    w.magic(CORPUS_MAGIC)?;
    let c = &corpus.config;
    for v in [
        c.seed,
        c.vocab_size as u64,
        c.utterance_count as u64,
        c.min_len as u64,
        c.max_len as u64,
        c.min_frames_per_token as u64,
        c.max_frames_per_token as u64,
        c.feature_dim as u64,
    ] {
        w.u64(v)?;
    }
    w.f64(c.noise_std)?;
    for (_, split) in corpus.splits() {
        w.u64(split.len() as u64)?;
    }
    for (_, split) in corpus.splits() {
        for utt in split {
            w.str(&utt.id)?;
            w.u64(utt.transcript.len() as u64)?;
            for &t in &utt.transcript {
                w.u64(t as u64)?;
            }
            w.u64(utt.features.rows as u64)?;
            w.f64_slice(&utt.features.data)?;
        }
    }
    w.into_inner().flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let mut r = BinReader::new(BufReader::new(File::open(path)?));
    r.magic(CORPUS_MAGIC)?;
    let seed = r.u64()?;
    let vocab_size = r.usize("vocab_size", 1 << 32)?;
    let utterance_count = r.usize("utterance_count", 1 << 32)?;
    let min_len = r.usize("min_len", 1 << 32)?;
    let max_len = r.usize("max_len", 1 << 32)?;
    let min_fpt = r.usize("min_frames_per_token", 1 << 32)?;
    let max_fpt = r.usize("max_frames_per_token", 1 << 32)?;
    let feature_dim = r.usize("feature_dim", 1 << 24)?;
    let noise_std = r.f64()?;
    let config = CorpusConfig {
        seed,
        vocab_size,
        utterance_count,
        min_len,
        max_len,
        min_frames_per_token: min_fpt,
        max_frames_per_token: max_fpt,
        feature_dim,
        noise_std,
    };
    config.validate()?;
    let sizes = [
        r.usize("train size", 1 << 32)?,
        r.usize("dev size", 1 << 32)?,
        r.usize("test size", 1 << 32)?,
    ];
    let mut splits: Vec<Vec<Utterance>> = Vec::with_capacity(3);
    for &n in &sizes {
        let mut split = Vec::with_capacity(n);
        for _ in 0..n {
            let id = r.str()?;
            let tlen = r.usize("transcript length", 1 << 24)?;
            let mut transcript = Vec::with_capacity(tlen);
            for _ in 0..tlen {
                transcript.push(r.usize("token id", 1 << 32)?);
            }
            let frames = r.usize("frame count", 1 << 32)?;
            let data = r.f64_vec(frames * feature_dim)?;
            split.push(Utterance {
                id,
                transcript,
                features: Mat::new(frames, feature_dim, data),
            });
        }
        splits.push(split);
    }
    r.expect_eof()?;
    let test = splits.pop().unwrap();
    let dev = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Corpus {
        config,
        train,
        dev,
        test,
    })
}
