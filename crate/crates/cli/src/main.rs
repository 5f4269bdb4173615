//! `tridec`: corpus generation, training, decoding, benchmarking, and
//! lattice analysis for the tripartite decoder, as one subcommand binary.
//!
//! Every run is fully specified by (config file, seed); flags override file
//! values, and the effective config is echoed into the run directory next
//! to a manifest listing inputs, config hash, and produced files.

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;
use tridec_core::eval::{self, SystemReport};
use tridec_core::model::{ModelConfig, ModelParams};
use tridec_core::search::{
    decode_utterance, DecodeMode, DecodeRecord, FusionWeights, ScheduleSpec,
};
use tridec_core::synthdata::{generate_corpus, load_corpus, save_corpus, Corpus, CorpusConfig, Utterance};
use tridec_core::training::{LossWeights, TrainConfig, Trainer};
use tridec_core::{substream, TridecError};

#[derive(Parser)]
#[command(name = "tridec", about = "tripartite CTC/AR/AMD decoder toolkit")]
struct Cli {
    /// TOML config file; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus
    Gen(GenArgs),
    /// Train a model on a generated corpus
    Train(TrainArgs),
    /// Decode a corpus split with a trained checkpoint
    Decode(DecodeArgs),
    /// Benchmark decode systems head to head
    Bench(BenchArgs),
    /// Emit the density / oracle-WER depth sweep CSV
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Run directory for corpus + manifest
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    utterances: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    min_frames: Option<usize>,
    #[arg(long)]
    max_frames: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus file produced by `gen`
    #[arg(long)]
    corpus: PathBuf,
    /// Run directory for checkpoint, optimizer state, and metrics
    #[arg(long)]
    out: PathBuf,
    /// Training loss weights, e.g. 0.4,0.3,0.3
    #[arg(long)]
    gammas: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    block_samples: Option<usize>,
    /// Continue from the checkpoint + optimizer state in the run directory
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// greedy-ar | beam-ctc-ar | amd
    #[arg(long)]
    mode: Option<String>,
    /// fixed:B or mixed:N-B (amd mode)
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    k_amd: Option<usize>,
    #[arg(long)]
    k_main: Option<usize>,
    /// beam width (beam-ctc-ar mode)
    #[arg(long)]
    beam: Option<usize>,
    /// Fusion weights: ctc,ar for beam-ctc-ar; ctc,amd,ar for amd
    #[arg(long)]
    lambdas: Option<String>,
    #[arg(long)]
    ar_per_slot: bool,
    /// train | dev | test
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    split: Option<String>,
    /// Comma-separated AMD schedules, e.g. fixed:8,mixed:10-2
    #[arg(long)]
    schedules: Option<String>,
    #[arg(long)]
    k_amd: Option<usize>,
    #[arg(long)]
    k_main: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sweep depth limit (top-K from 1 to this)
    #[arg(long)]
    max_k: Option<usize>,
    /// Comma-separated fixed block sizes to sweep, e.g. 1,2,4,8
    #[arg(long)]
    blocks: Option<String>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
}

/// File-level configuration; every section has full defaults so a missing or
/// partial file is fine.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    corpus: CorpusConfig,
    model: ModelConfig,
    train: TrainConfig,
    decode: DecodeConfig,
    bench: BenchConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct DecodeConfig {
    mode: String,
    schedule: String,
    k_amd: usize,
    k_main: usize,
    beam: usize,
    /// ctc,ar for beam-ctc-ar; ctc,amd,ar for amd
    lambdas: Vec<f64>,
    ar_per_slot: bool,
    split: String,
    workers: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        let w = FusionWeights::tripartite_default();
        DecodeConfig {
            mode: "amd".into(),
            schedule: "mixed:10-2".into(),
            k_amd: 2,
            k_main: 2,
            beam: 10,
            lambdas: vec![w.lambda_ctc, w.lambda_amd, w.lambda_ar],
            ar_per_slot: false,
            split: "test".into(),
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct BenchConfig {
    reps: usize,
    alpha: f64,
    split: String,
    /// AMD systems to benchmark against the baselines
    schedules: Vec<String>,
    k_amd: usize,
    k_main: usize,
    /// System name the MAPSSWE / speedup comparisons are made against
    baseline: String,
    max_k: usize,
    sweep_blocks: Vec<usize>,
    workers: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            reps: 3,
            alpha: 0.05,
            split: "test".into(),
            schedules: vec!["fixed:8".into(), "mixed:10-2".into(), "mixed:30-8".into()],
            k_amd: 2,
            k_main: 2,
            baseline: "beam-ctc-ar:1".into(),
            max_k: 20,
            sweep_blocks: vec![1, 2, 4, 8],
            workers: 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Stable exit-code contract: 1 validation, 2 I/O, 3 numeric failure.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<TridecError>() {
        Some(TridecError::Diverged { .. }) => 3,
        Some(TridecError::Io(_)) | Some(TridecError::Parse { .. }) => 2,
        Some(_) => 1,
        None => {
            if e.downcast_ref::<std::io::Error>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Gen(a) => cmd_gen(&mut cfg, a),
        Cmd::Train(a) => cmd_train(&mut cfg, a),
        Cmd::Decode(a) => cmd_decode(&mut cfg, a),
        Cmd::Bench(a) => cmd_bench(&mut cfg, a),
        Cmd::Analyze(a) => cmd_analyze(&mut cfg, a),
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(TridecError::Io)
        .with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text)
        .map_err(|e| anyhow!(TridecError::Contract(format!("config parse: {e}"))))
}

/// Write the effective config and a manifest into the run directory.
fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &FileConfig,
    inputs: &[&Path],
    outputs: &[&str],
) -> anyhow::Result<()> {
    fs::create_dir_all(out).map_err(TridecError::Io)?;
    let echoed = toml::to_string_pretty(cfg)?;
    fs::write(out.join("effective_config.toml"), &echoed).map_err(TridecError::Io)?;
    let hash = hex(&Sha256::digest(echoed.as_bytes()));
    let manifest = serde_json::json!({
        "command": command,
        "config_sha256": hash,
        "inputs": inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "outputs": outputs,
    });
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )
    .map_err(TridecError::Io)?;
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_list(s: &str, what: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| anyhow!(TridecError::Contract(format!("bad {what} value '{x}'"))))
        })
        .collect()
}

fn cmd_gen(cfg: &mut FileConfig, a: GenArgs) -> anyhow::Result<()> {
    if let Some(v) = a.seed {
        cfg.corpus.seed = v;
    }
    if let Some(v) = a.vocab_size {
        cfg.corpus.vocab_size = v;
    }
    if let Some(v) = a.utterances {
        cfg.corpus.utterance_count = v;
    }
    if let Some(v) = a.min_len {
        cfg.corpus.min_len = v;
    }
    if let Some(v) = a.max_len {
        cfg.corpus.max_len = v;
    }
    if let Some(v) = a.noise_std {
        cfg.corpus.noise_std = v;
    }
    if let Some(v) = a.min_frames {
        cfg.corpus.min_frames_per_token = v;
    }
    if let Some(v) = a.max_frames {
        cfg.corpus.max_frames_per_token = v;
    }
    if let Some(v) = a.feature_dim {
        cfg.corpus.feature_dim = v;
    }
    // fail fast before creating anything
    cfg.corpus.validate()?;
    let corpus = generate_corpus(&cfg.corpus)?;
    fs::create_dir_all(&a.out).map_err(TridecError::Io)?;
    let path = a.out.join("corpus.bin");
    save_corpus(&corpus, &path)?;
    write_manifest(&a.out, "gen", cfg, &[], &["corpus.bin"])?;
    println!(
        "wrote {} ({} train / {} dev / {} test utterances)",
        path.display(),
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len()
    );
    Ok(())
}

/// Model config fitted to a corpus: vocabulary and feature dim come from the
/// data; max_len must cover both label sequences and encoder frames.
fn fit_model_config(mut model: ModelConfig, corpus: &Corpus) -> ModelConfig {
    model.vocab_size = corpus.config.model_vocab_size();
    model.feature_dim = corpus.config.feature_dim;
    let mut need = model.max_len;
    for utt in corpus
        .train
        .iter()
        .chain(&corpus.dev)
        .chain(&corpus.test)
    {
        let frames = utt.features.rows.div_ceil(model.subsample_factor);
        need = need.max(utt.transcript.len() + 1).max(frames);
    }
    model.max_len = need;
    model
}

fn cmd_train(cfg: &mut FileConfig, a: TrainArgs) -> anyhow::Result<()> {
    if let Some(g) = &a.gammas {
        let v = parse_list(g, "gamma")?;
        if v.len() != 3 {
            bail!(TridecError::Contract("--gammas expects three values".into()));
        }
        cfg.train.weights = LossWeights {
            gamma_ctc: v[0],
            gamma_ar: v[1],
            gamma_amd: v[2],
        };
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.peak_lr {
        cfg.train.peak_lr = v;
    }
    if let Some(v) = a.warmup {
        cfg.train.warmup_steps = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.block_samples {
        cfg.train.n_block_samples = v;
    }
    cfg.train.validate()?;
    if !a.corpus.exists() {
        bail!(TridecError::Contract(format!(
            "corpus {} does not exist (run `tridec gen` first)",
            a.corpus.display()
        )));
    }
    let corpus = load_corpus(&a.corpus)?;
    cfg.corpus = corpus.config.clone();
    cfg.model = fit_model_config(cfg.model.clone(), &corpus);
    fs::create_dir_all(&a.out).map_err(TridecError::Io)?;
    let ckpt = a.out.join("checkpoint.bin");
    let state = a.out.join("optimizer.bin");
    let metrics_path = a.out.join("metrics.jsonl");

    let mut trainer = if a.resume {
        if !ckpt.exists() || !state.exists() {
            bail!(TridecError::Contract(
                "--resume needs checkpoint.bin and optimizer.bin in the run directory".into()
            ));
        }
        let params = ModelParams::load(&ckpt)?;
        Trainer::resume(cfg.train.clone(), params, &state)?
    } else {
        let mut rng = substream(cfg.train.seed, "init");
        let params = ModelParams::init(cfg.model.clone(), &mut rng)?;
        Trainer::new(cfg.train.clone(), params)?
    };
    let mut metrics_lines: Vec<String> = if a.resume && metrics_path.exists() {
        fs::read_to_string(&metrics_path)
            .map_err(TridecError::Io)?
            .lines()
            .take(trainer.epochs_done())
            .map(String::from)
            .collect()
    } else {
        Vec::new()
    };
    while trainer.epochs_done() < cfg.train.epochs {
        let m = trainer.run_epoch(&corpus)?;
        println!(
            "epoch {:>3}  loss {:8.4}  (ctc {:7.4} ar {:7.4} amd {:8.4})  dev ter {:6.2}%  lr {:.2e}  {:.1}s",
            m.epoch,
            m.mean_loss,
            m.mean_ctc,
            m.mean_ar,
            m.mean_amd,
            100.0 * m.dev_token_error_rate,
            m.learning_rate,
            m.wall_seconds
        );
        metrics_lines.push(serde_json::to_string(&m)?);
        trainer.params.save(&ckpt)?;
        trainer.save_state(&state)?;
        fs::write(&metrics_path, metrics_lines.join("\n") + "\n").map_err(TridecError::Io)?;
    }
    write_manifest(
        &a.out,
        "train",
        cfg,
        &[&a.corpus],
        &["checkpoint.bin", "optimizer.bin", "metrics.jsonl"],
    )?;
    Ok(())
}

fn pick_split<'c>(corpus: &'c Corpus, split: &str) -> anyhow::Result<&'c [Utterance]> {
    match split {
        "train" => Ok(&corpus.train),
        "dev" => Ok(&corpus.dev),
        "test" => Ok(&corpus.test),
        other => bail!(TridecError::Contract(format!(
            "unknown split '{other}' (expected train, dev, or test)"
        ))),
    }
}

fn decode_mode_from_config(d: &DecodeConfig) -> anyhow::Result<DecodeMode> {
    match d.mode.as_str() {
        "greedy-ar" => Ok(DecodeMode::GreedyAr),
        "beam-ctc-ar" => {
            let (lc, la) = match d.lambdas.as_slice() {
                [lc, la] => (*lc, *la),
                [lc, _, la] => (*lc, *la),
                _ => bail!(TridecError::Contract(
                    "beam-ctc-ar lambdas expect ctc,ar".into()
                )),
            };
            Ok(DecodeMode::BeamCtcAr {
                beam: d.beam,
                weights: FusionWeights {
                    lambda_ctc: lc,
                    lambda_amd: 0.0,
                    lambda_ar: la,
                },
            })
        }
        "amd" => {
            let [lc, lm, la] = match d.lambdas.as_slice() {
                [lc, lm, la] => [*lc, *lm, *la],
                _ => bail!(TridecError::Contract(
                    "amd lambdas expect ctc,amd,ar".into()
                )),
            };
            Ok(DecodeMode::Amd {
                spec: ScheduleSpec::parse(&d.schedule)?,
                k_amd: d.k_amd,
                k_main: d.k_main,
                weights: FusionWeights {
                    lambda_ctc: lc,
                    lambda_amd: lm,
                    lambda_ar: la,
                },
                ar_per_slot: d.ar_per_slot,
            })
        }
        other => bail!(TridecError::Contract(format!(
            "unknown mode '{other}' (expected greedy-ar, beam-ctc-ar, or amd)"
        ))),
    }
}

/// Decode a split with utterance-level parallelism; output order is the
/// input order regardless of worker count.
fn decode_split(
    params: &ModelParams,
    utts: &[Utterance],
    mode: &DecodeMode,
    workers: usize,
) -> anyhow::Result<Vec<DecodeRecord>> {
    let workers = workers.max(1);
    let decode_one = |utt: &Utterance| -> Result<DecodeRecord, TridecError> {
        let t0 = Instant::now();
        let out = decode_utterance(params, &utt.features, mode)?;
        Ok(DecodeRecord {
            utterance_id: utt.id.clone(),
            reference: utt.transcript.clone(),
            best: out.best_tokens().to_vec(),
            nbest: out.hyps.clone(),
            wall_seconds: t0.elapsed().as_secs_f64(),
            amd_calls: out.amd_calls,
            ar_calls: out.ar_calls,
            empty_input: out.empty_input,
        })
    };
    if workers == 1 {
        return utts
            .iter()
            .map(|u| decode_one(u).map_err(Into::into))
            .collect();
    }
    let mut slots: Vec<Option<Result<DecodeRecord, TridecError>>> = Vec::new();
    slots.resize_with(utts.len(), || None);
    std::thread::scope(|scope| {
        for (w, chunk) in slots.chunks_mut(utts.len().div_ceil(workers)).enumerate() {
            let base = w * utts.len().div_ceil(workers);
            let utts = &utts;
            scope.spawn(move || {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(decode_one(&utts[base + i]));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("worker filled every slot").map_err(Into::into))
        .collect()
}

fn cmd_decode(cfg: &mut FileConfig, a: DecodeArgs) -> anyhow::Result<()> {
    let d = &mut cfg.decode;
    if let Some(v) = a.mode {
        d.mode = v;
    }
    if let Some(v) = a.schedule {
        d.schedule = v;
    }
    if let Some(v) = a.k_amd {
        d.k_amd = v;
    }
    if let Some(v) = a.k_main {
        d.k_main = v;
    }
    if let Some(v) = a.beam {
        d.beam = v;
    }
    if let Some(v) = &a.lambdas {
        d.lambdas = parse_list(v, "lambda")?;
    }
    if a.ar_per_slot {
        d.ar_per_slot = true;
    }
    if let Some(v) = a.split {
        d.split = v;
    }
    if let Some(v) = a.workers {
        d.workers = v;
    }
    let mode = decode_mode_from_config(d)?;
    let params = ModelParams::load(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    cfg.corpus = corpus.config.clone();
    cfg.model = params.config.clone();
    let utts = pick_split(&corpus, &cfg.decode.split)?;
    let records = decode_split(&params, utts, &mode, cfg.decode.workers)?;
    fs::create_dir_all(&a.out).map_err(TridecError::Io)?;
    let mut lines = String::new();
    let mut errors = 0usize;
    let mut refs = 0usize;
    for r in &records {
        errors += eval::wer(&r.reference, &r.best).errors;
        refs += r.reference.len();
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    fs::write(a.out.join("decode.jsonl"), lines).map_err(TridecError::Io)?;
    write_manifest(
        &a.out,
        "decode",
        cfg,
        &[&a.checkpoint, &a.corpus],
        &["decode.jsonl"],
    )?;
    println!(
        "{} on {} ({} utterances): WER {:.2}%",
        mode.label(),
        cfg.decode.split,
        records.len(),
        100.0 * errors as f64 / refs.max(1) as f64
    );
    Ok(())
}

/// The benchmark system roster: CTC+AR greedy and beam-10 baselines plus one
/// tripartite system per configured schedule.
fn bench_systems(b: &BenchConfig) -> anyhow::Result<Vec<(String, DecodeMode)>> {
    let mut systems = vec![(
        "beam-ctc-ar:1".to_string(),
        DecodeMode::BeamCtcAr {
            beam: 1,
            weights: FusionWeights::ctc_ar_baseline(),
        },
    )];
    for s in &b.schedules {
        let spec = ScheduleSpec::parse(s)?;
        systems.push((
            format!("amd:{spec}"),
            DecodeMode::Amd {
                spec,
                k_amd: b.k_amd,
                k_main: b.k_main,
                weights: FusionWeights::tripartite_default(),
                ar_per_slot: false,
            },
        ));
    }
    // The slow wide-beam baseline runs last so its sustained load cannot
    // heat the machine before the fast systems are timed.
    systems.push((
        "beam-ctc-ar:10".to_string(),
        DecodeMode::BeamCtcAr {
            beam: 10,
            weights: FusionWeights::ctc_ar_baseline(),
        },
    ));
    Ok(systems)
}

fn cmd_bench(cfg: &mut FileConfig, a: BenchArgs) -> anyhow::Result<()> {
    let b = &mut cfg.bench;
    if let Some(v) = a.reps {
        b.reps = v;
    }
    if let Some(v) = a.alpha {
        b.alpha = v;
    }
    if let Some(v) = a.split {
        b.split = v;
    }
    if let Some(v) = &a.schedules {
        b.schedules = v.split(',').map(str::to_string).collect();
    }
    if let Some(v) = a.k_amd {
        b.k_amd = v;
    }
    if let Some(v) = a.k_main {
        b.k_main = v;
    }
    if let Some(v) = a.workers {
        b.workers = v;
    }
    let params = ModelParams::load(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    cfg.corpus = corpus.config.clone();
    cfg.model = params.config.clone();
    let utts = pick_split(&corpus, &cfg.bench.split)?;
    let b = &cfg.bench;
    let systems = bench_systems(b)?;
    let mut reports: Vec<SystemReport> = Vec::new();
    for (name, mode) in &systems {
        let r = eval::evaluate_system(&params, utts, mode, name, b.reps)?;
        println!(
            "{:<18} WER {:6.2}%  oracle {:6.2}%  density {:5.2}  RTF {:.4}",
            r.name,
            100.0 * r.wer,
            100.0 * r.oracle_wer,
            r.mean_density,
            r.rtf
        );
        reports.push(r);
    }
    let baseline = reports
        .iter()
        .find(|r| r.name == b.baseline)
        .ok_or_else(|| {
            TridecError::Contract(format!("baseline system '{}' not in roster", b.baseline))
        })?
        .clone();
    let mut text = String::new();
    text.push_str(&format!(
        "benchmark: split={} reps={} workers={} alpha={}\n\n",
        b.split, b.reps, b.workers, b.alpha
    ));
    text.push_str(&eval::report_csv(&reports));
    text.push('\n');
    for r in &reports {
        if r.name == baseline.name {
            continue;
        }
        let c = eval::compare(&baseline, r, b.alpha)?;
        text.push_str(&format!(
            "{} vs {}: speedup {:.2}x, MAPSSWE z = {:+.3} (threshold {:.3}) -> {}\n",
            c.contender,
            c.baseline,
            c.speedup,
            c.mapsswe.z,
            c.mapsswe.threshold,
            if c.mapsswe.significant {
                "significant"
            } else {
                "not significant"
            }
        ));
    }
    fs::create_dir_all(&a.out).map_err(TridecError::Io)?;
    fs::write(a.out.join("report.txt"), &text).map_err(TridecError::Io)?;
    fs::write(a.out.join("report.csv"), eval::report_csv(&reports)).map_err(TridecError::Io)?;
    write_manifest(
        &a.out,
        "bench",
        cfg,
        &[&a.checkpoint, &a.corpus],
        &["report.txt", "report.csv"],
    )?;
    print!("{text}");
    Ok(())
}

fn cmd_analyze(cfg: &mut FileConfig, a: AnalyzeArgs) -> anyhow::Result<()> {
    let b = &mut cfg.bench;
    if let Some(v) = a.max_k {
        b.max_k = v;
    }
    if let Some(v) = &a.blocks {
        b.sweep_blocks = v
            .split(',')
            .map(|x| {
                x.trim()
                    .parse::<usize>()
                    .map_err(|_| TridecError::Contract(format!("bad block size '{x}'")))
            })
            .collect::<Result<_, _>>()?;
    }
    if let Some(v) = a.split {
        b.split = v;
    }
    if let Some(v) = a.workers {
        b.workers = v;
    }
    let params = ModelParams::load(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    cfg.corpus = corpus.config.clone();
    cfg.model = params.config.clone();
    let utts = pick_split(&corpus, &cfg.bench.split)?;
    let b = &cfg.bench;
    // Fig.-3 style sweep: decode once per system at depth max_k, then read
    // density / oracle WER off truncated n-best lists.
    let mut systems = vec![(
        "beam-ctc-ar".to_string(),
        DecodeMode::BeamCtcAr {
            beam: b.max_k,
            weights: FusionWeights::ctc_ar_baseline(),
        },
    )];
    // The tripartite systems keep their operating in-block width `k_amd` and
    // widen only the final beam: block commitment at the working width is
    // what produces the sparser lattices the sweep is meant to expose.
    for &block in &b.sweep_blocks {
        systems.push((
            format!("amd:fixed:{block}"),
            DecodeMode::Amd {
                spec: ScheduleSpec::Fixed(block),
                k_amd: b.k_amd,
                k_main: b.max_k,
                weights: FusionWeights::tripartite_default(),
                ar_per_slot: false,
            },
        ));
    }
    let mut reports = Vec::new();
    for (name, mode) in &systems {
        reports.push(eval::evaluate_system(&params, utts, mode, name, 1)?);
    }
    let sweep = eval::depth_sweep_csv(&reports, b.max_k)?;
    fs::create_dir_all(&a.out).map_err(TridecError::Io)?;
    fs::write(a.out.join("sweep.csv"), &sweep).map_err(TridecError::Io)?;
    write_manifest(
        &a.out,
        "analyze",
        cfg,
        &[&a.checkpoint, &a.corpus],
        &["sweep.csv"],
    )?;
    println!("wrote {} ({} systems, K 1..{})", a.out.join("sweep.csv").display(), systems.len(), b.max_k);
    Ok(())
}
