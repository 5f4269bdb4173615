//! Acceptance gate for the tripartite decoder. Runs as a harness-less test
//! target so that exactly one pass/fail line per criterion always reaches the
//! console, plus a trailing summary. Exits non-zero if any criterion fails.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tridec_core::ctc::{self, ctc_greedy, ctc_loss, CtcPrefixState};
use tridec_core::eval::{self, evaluate_system, mapsswe, SystemReport};
use tridec_core::model::{
    amd_decoder_forward, ar_decoder_forward, encoder_forward, ModelConfig, ModelParams,
    NUM_SPECIALS, SOS_EOS,
};
use tridec_core::search::{
    beam_search_amd, beam_search_ctc_ar, count_decoder_calls, make_schedule,
    oracle as search_oracle, toy, AmdOptions, CtcArOptions, DecodeMode, FusionWeights,
    ScheduleSpec,
};
use tridec_core::synthdata::{generate_corpus, Corpus, CorpusConfig};
use tridec_core::tensor::fd;
use tridec_core::training::{amd_loss, LossWeights, TrainConfig, Trainer};
use tridec_core::{substream, Mat};

fn main() {
    let mut failed = 0usize;
    let mut run = |n: usize, result: Result<String, String>| match result {
        Ok(detail) => println!("criterion {n}: pass - {detail}"),
        Err(detail) => {
            failed += 1;
            println!("criterion {n}: FAIL - {detail}");
        }
    };

    run(1, criterion1());
    run(2, criterion2());
    run(3, criterion3());
    run(4, criterion4());
    run(5, criterion5());
    run(6, criterion6());
    let fixture = build_fixture();
    match &fixture {
        Ok((corpus, params, train_secs)) => {
            run(7, criterion7(corpus, params, *train_secs));
            run(8, criterion8(corpus, params));
            run(9, criterion9(corpus, params));
        }
        Err(e) => {
            for n in [7, 8, 9] {
                run(n, Err(format!("reference fixture failed to train: {e}")));
            }
        }
    }
    run(10, criterion10());
    run(11, criterion11());

    if failed == 0 {
        println!("acceptance: all 11 criteria pass");
    } else {
        println!("acceptance: {failed} criteria FAILED");
        std::process::exit(1);
    }
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a == b) || (a - b).abs() <= tol || (a.is_infinite() && b.is_infinite() && a.signum() == b.signum())
}

/// Criterion 1: paper-scale results are replaced by the scaled-down
/// property suite, by design.
fn criterion1() -> Result<String, String> {
    Ok("paper-scale WER/RTF tables are out of scope at desk scale; \
        criteria 2-11 below are the substituted property checks"
        .into())
}

/// Criterion 2: leakage suite over 100 random (model, sequence, block)
/// triples. AMD outputs must be bit-invariant to permutations of the
/// concealed block; AR rows up to j must be bit-invariant to edits of tokens
/// after j.
fn criterion2() -> Result<String, String> {
    let t0 = Instant::now();
    let vocab = 11;
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x2000 + case);
        let config = ModelConfig {
            vocab_size: vocab,
            d_model: 16,
            n_heads: 2,
            ff_dim: 32,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            max_len: 24,
            feature_dim: 6,
            subsample_factor: 2,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(config, &mut rng).map_err(|e| e.to_string())?;
        let frames = rng.gen_range(8..=14);
        let feats = Mat::new(
            frames,
            6,
            (0..frames * 6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let enc = encoder_forward(&feats, &params).map_err(|e| e.to_string())?;

        let len = rng.gen_range(3..=8);
        let mut tokens: Vec<usize> =
            (0..len).map(|_| rng.gen_range(NUM_SPECIALS..vocab)).collect();
        let bs = rng.gen_range(1..=len);
        let be = rng.gen_range(bs..=len);
        // distinct block tokens make the permutation below meaningful
        for (off, t) in tokens[bs - 1..be].iter_mut().enumerate() {
            *t = NUM_SPECIALS + (off % (vocab - NUM_SPECIALS));
        }
        let base = amd_decoder_forward(&tokens, bs, be, &enc, &params).map_err(|e| e.to_string())?;
        let mut permuted = tokens.clone();
        permuted[bs - 1..be].shuffle(&mut rng);
        permuted[bs - 1..be].reverse();
        let alt = amd_decoder_forward(&permuted, bs, be, &enc, &params).map_err(|e| e.to_string())?;
        if !bits_eq(&base.data, &alt.data) {
            return Err(format!(
                "case {case}: AMD block rows changed under an in-block permutation \
                 (block {bs}..={be}, len {len})"
            ));
        }

        let mut ar_in = vec![SOS_EOS];
        ar_in.extend_from_slice(&tokens);
        let lp = ar_decoder_forward(&ar_in, &enc, &params).map_err(|e| e.to_string())?;
        let edit_pos = rng.gen_range(1..ar_in.len());
        let mut edited = ar_in.clone();
        let old = edited[edit_pos];
        edited[edit_pos] = NUM_SPECIALS
            + ((old - NUM_SPECIALS + 1 + rng.gen_range(0..vocab - NUM_SPECIALS - 1))
                % (vocab - NUM_SPECIALS));
        let lp2 = ar_decoder_forward(&edited, &enc, &params).map_err(|e| e.to_string())?;
        for r in 0..edit_pos {
            if !bits_eq(lp.row(r), lp2.row(r)) {
                return Err(format!(
                    "case {case}: AR row {r} changed after editing future token at {edit_pos}"
                ));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    if secs >= 60.0 {
        return Err(format!("leakage suite took {secs:.1}s, budget is 60s"));
    }
    Ok(format!("100 triples bit-invariant in {secs:.1}s"))
}

/// Criterion 3: ctc_loss and ctc_prefix extend against exhaustive alignment
/// enumeration for all T' <= 5, |V| <= 4, targets/prefixes of length <= 3.
fn criterion3() -> Result<String, String> {
    let t0 = Instant::now();
    let tol = 1e-9;
    let mut checked = 0usize;
    for frames in 1..=5usize {
        for vocab in 2..=4usize {
            for rep in 0..3u64 {
                let seed = (frames as u64) * 1000 + (vocab as u64) * 10 + rep;
                let lp = toy::random_ctc_matrix(frames, vocab, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc3);
                for _ in 0..4 {
                    let tl = rng.gen_range(1..=3usize);
                    let target: Vec<usize> = (0..tl).map(|_| rng.gen_range(1..vocab)).collect();
                    let nll = ctc_loss(&lp, &target).map_err(|e| e.to_string())?;
                    let oracle = ctc::oracle::exact_sequence_log_prob(&lp, &target);
                    if !close(-nll, oracle, tol) {
                        return Err(format!(
                            "ctc_loss mismatch T'={frames} V={vocab} target {target:?}: \
                             -nll {} vs enumeration {oracle}",
                            -nll
                        ));
                    }
                    checked += 1;
                }
                // prefix chain of length <= 3
                let mut state = CtcPrefixState::new(&lp);
                for _ in 0..3 {
                    let tok = rng.gen_range(1..vocab);
                    let (next, score) = state.extend(tok, &lp).map_err(|e| e.to_string())?;
                    state = next;
                    let oracle = ctc::oracle::prefix_log_prob(&lp, state.prefix());
                    if !close(score, oracle, tol) {
                        return Err(format!(
                            "prefix score mismatch T'={frames} V={vocab} prefix {:?}: \
                             {score} vs enumeration {oracle}",
                            state.prefix()
                        ));
                    }
                    let term = state.terminal_score();
                    let term_oracle = ctc::oracle::exact_sequence_log_prob(&lp, state.prefix());
                    if !close(term, term_oracle, tol) {
                        return Err(format!(
                            "terminal score mismatch T'={frames} V={vocab} prefix {:?}: \
                             {term} vs enumeration {term_oracle}",
                            state.prefix()
                        ));
                    }
                    checked += 2;
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    if secs >= 120.0 {
        return Err(format!("CTC oracle suite took {secs:.1}s, budget is 120s"));
    }
    Ok(format!("{checked} enumeration comparisons within 1e-9 in {secs:.1}s"))
}

/// Criterion 4: central finite-difference checks for every graph primitive
/// plus ctc_loss and amd_loss, 20 seeds, relative error < 1e-4.
fn criterion4() -> Result<String, String> {
    let t0 = Instant::now();
    let tol = 1e-4;
    type Build = Box<dyn Fn(&mut tridec_core::tensor::Graph, &[tridec_core::tensor::TensorId]) -> tridec_core::tensor::TensorId>;
    let ops: Vec<(&str, Vec<(usize, usize)>, (f64, f64), Build)> = vec![
        ("add", vec![(2, 3), (2, 3)], (-1.0, 1.0), Box::new(|g, l| {
            let s = g.add(l[0], l[1]).unwrap();
            g.reduce_sum(s)
        })),
        ("add_row", vec![(2, 3), (1, 3)], (-1.0, 1.0), Box::new(|g, l| {
            let s = g.add_row(l[0], l[1]).unwrap();
            let e = g.exp(s);
            g.reduce_sum(e)
        })),
        ("mul", vec![(2, 3), (2, 3)], (-1.0, 1.0), Box::new(|g, l| {
            let s = g.mul(l[0], l[1]).unwrap();
            g.reduce_sum(s)
        })),
        ("matmul", vec![(2, 3), (3, 2)], (-1.0, 1.0), Box::new(|g, l| {
            let s = g.matmul(l[0], l[1]).unwrap();
            g.reduce_sum(s)
        })),
        ("transpose", vec![(2, 3), (2, 3)], (-1.0, 1.0), Box::new(|g, l| {
            let t = g.transpose(l[1]);
            let s = g.matmul(l[0], t).unwrap();
            g.reduce_sum(s)
        })),
        ("scale", vec![(2, 3)], (-1.0, 1.0), Box::new(|g, l| {
            let s = g.scale(l[0], 1.7);
            g.reduce_sum(s)
        })),
        ("relu+", vec![(2, 3)], (0.1, 1.0), Box::new(|g, l| {
            let s = g.relu(l[0]);
            g.reduce_sum(s)
        })),
        ("relu-", vec![(2, 3)], (-1.0, -0.1), Box::new(|g, l| {
            let s = g.relu(l[0]);
            g.reduce_sum(s)
        })),
        ("log", vec![(2, 3)], (0.5, 2.0), Box::new(|g, l| {
            let s = g.log(l[0]);
            g.reduce_sum(s)
        })),
        ("exp", vec![(2, 3)], (-1.0, 1.0), Box::new(|g, l| {
            let s = g.exp(l[0]);
            g.reduce_sum(s)
        })),
        ("row_softmax", vec![(3, 4), (3, 4)], (-1.0, 1.0), Box::new(|g, l| {
            let s = g.row_softmax(l[0], None).unwrap();
            let w = g.mul(s, l[1]).unwrap();
            g.reduce_sum(w)
        })),
        ("row_log_softmax", vec![(3, 4), (3, 4)], (-1.0, 1.0), Box::new(|g, l| {
            let s = g.row_log_softmax(l[0]);
            let w = g.mul(s, l[1]).unwrap();
            g.reduce_sum(w)
        })),
        ("layer_norm", vec![(3, 4), (1, 4), (1, 4), (3, 4)], (-1.0, 1.0), Box::new(|g, l| {
            let s = g.layer_norm(l[0], l[1], l[2]).unwrap();
            let w = g.mul(s, l[3]).unwrap();
            g.reduce_sum(w)
        })),
        ("embedding", vec![(5, 3), (4, 3)], (-1.0, 1.0), Box::new(|g, l| {
            let s = g.embedding(l[0], &[0, 2, 4, 2]).unwrap();
            let w = g.mul(s, l[1]).unwrap();
            g.reduce_sum(w)
        })),
        ("concat_rows", vec![(2, 3), (1, 3), (3, 3)], (-1.0, 1.0), Box::new(|g, l| {
            let s = g.concat_rows(&[l[0], l[1]]).unwrap();
            let w = g.mul(s, l[2]).unwrap();
            g.reduce_sum(w)
        })),
        ("concat_cols", vec![(2, 2), (2, 3), (2, 5)], (-1.0, 1.0), Box::new(|g, l| {
            let s = g.concat_cols(&[l[0], l[1]]).unwrap();
            let w = g.mul(s, l[2]).unwrap();
            g.reduce_sum(w)
        })),
        ("slice_rows", vec![(4, 3), (2, 3)], (-1.0, 1.0), Box::new(|g, l| {
            let s = g.slice_rows(l[0], 1, 3).unwrap();
            let w = g.mul(s, l[1]).unwrap();
            g.reduce_sum(w)
        })),
        ("slice_cols", vec![(3, 5), (3, 2)], (-1.0, 1.0), Box::new(|g, l| {
            let s = g.slice_cols(l[0], 2, 4).unwrap();
            let w = g.mul(s, l[1]).unwrap();
            g.reduce_sum(w)
        })),
        ("reduce_sum", vec![(3, 3)], (-1.0, 1.0), Box::new(|g, l| {
            let e = g.exp(l[0]);
            g.reduce_sum(e)
        })),
        ("reduce_mean", vec![(3, 3)], (-1.0, 1.0), Box::new(|g, l| {
            let e = g.exp(l[0]);
            g.reduce_mean(e)
        })),
        ("pick_neg_sum", vec![(3, 4)], (-1.0, 1.0), Box::new(|g, l| {
            let s = g.row_log_softmax(l[0]);
            g.pick_neg_sum(s, &[1, 0, 2]).unwrap()
        })),
        ("ctc_loss", vec![(4, 3)], (-1.0, 1.0), Box::new(|g, l| {
            let s = g.row_log_softmax(l[0]);
            g.ctc_loss(s, &[1, 2], 0).unwrap()
        })),
    ];
    for (name, shapes, range, build) in &ops {
        for seed in 0..20u64 {
            fd::check_gradients(shapes, seed, *range, tol, build)
                .map_err(|e| format!("op {name} seed {seed}: {e}"))?;
        }
    }

    // amd_loss against finite differences of the model parameters it touches
    // (the encoder output is a fixed input of amd_loss, so encoder weights
    // are out of scope by its signature).
    for seed in 0..20u64 {
        amd_loss_fd_check(seed, tol).map_err(|e| format!("amd_loss seed {seed}: {e}"))?;
    }

    let secs = t0.elapsed().as_secs_f64();
    if secs >= 300.0 {
        return Err(format!("gradient suite took {secs:.1}s, budget is 300s"));
    }
    Ok(format!(
        "{} primitives + ctc_loss + amd_loss over 20 seeds in {secs:.1}s",
        ops.len() - 1
    ))
}

fn amd_loss_fd_check(seed: u64, tol: f64) -> Result<(), String> {
    use tridec_core::model::ForwardBuilder;

    let mut rng = ChaCha8Rng::seed_from_u64(0x4000 + seed);
    let config = ModelConfig {
        vocab_size: 7,
        d_model: 8,
        n_heads: 2,
        ff_dim: 16,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        max_len: 12,
        feature_dim: 4,
        subsample_factor: 2,
        ..ModelConfig::default()
    };
    let mut params = ModelParams::init(config, &mut rng).map_err(|e| e.to_string())?;
    let frames = 6;
    let feats = Mat::new(
        frames,
        4,
        (0..frames * 4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let enc = encoder_forward(&feats, &params).map_err(|e| e.to_string())?;
    let target: Vec<usize> = (0..3).map(|_| rng.gen_range(NUM_SPECIALS..7)).collect();
    let block_sizes = [1usize, 2, 3];

    // analytic gradients via an explicit Eq.-6 graph; the builder borrow of
    // `params` ends with this block so the FD loop can perturb them
    let analytic: Vec<(usize, Vec<f64>)> = {
        let mut fb = ForwardBuilder::new(&params);
        let e = fb.encoder_leaf(&enc);
        let mut root = None;
        for &b in &block_sizes {
            let schedule =
                make_schedule(target.len(), ScheduleSpec::Fixed(b)).map_err(|e| e.to_string())?;
            for &(bs, be) in &schedule.blocks {
                let rows = fb
                    .amd_block_log_probs(&target, bs, be, e)
                    .map_err(|e| e.to_string())?;
                let part = fb
                    .g
                    .pick_neg_sum(rows, &target[bs - 1..be])
                    .map_err(|e| e.to_string())?;
                root = Some(match root {
                    None => part,
                    Some(r) => fb.g.add(r, part).map_err(|e| e.to_string())?,
                });
            }
        }
        let root = root.unwrap();
        let direct = amd_loss(&params, &enc, &target, &block_sizes).map_err(|e| e.to_string())?;
        let graph_value = fb.g.scalar_value(root);
        if !close(graph_value, direct, 1e-9) {
            return Err(format!(
                "explicit Eq.-6 graph value {graph_value} disagrees with amd_loss {direct}"
            ));
        }
        let grads = fb.g.backward(root).map_err(|e| e.to_string())?;
        fb.touched_leaves()
            .map(|(pi, tid)| {
                let n = fb.params().values(pi).len();
                let g = grads
                    .get(tid)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; n]);
                (pi, g)
            })
            .collect()
    };

    let h = 1e-5;
    for (pi, analytic) in analytic {
        let n = params.values(pi).len();
        // three spread sample elements per tensor keep the suite fast
        for &ei in [0, n / 2, n - 1].iter().take(n.min(3)) {
            let orig = params.values(pi)[ei];
            params.values_mut(pi)[ei] = orig + h;
            let plus = amd_loss(&params, &enc, &target, &block_sizes).map_err(|e| e.to_string())?;
            params.values_mut(pi)[ei] = orig - h;
            let minus = amd_loss(&params, &enc, &target, &block_sizes).map_err(|e| e.to_string())?;
            params.values_mut(pi)[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ei];
            let scale = a.abs().max(numeric.abs()).max(1.0);
            if (a - numeric).abs() > tol * scale {
                return Err(format!(
                    "param {} element {ei}: analytic {a} vs central diff {numeric}",
                    params.name(pi)
                ));
            }
        }
    }
    Ok(())
}

/// Criterion 5: saturated-beam searches reproduce the exhaustive argmax of
/// their fused objectives on tabular toy scorers, 50 instances.
fn criterion5() -> Result<String, String> {
    let t0 = Instant::now();
    let vocab = NUM_SPECIALS + 3; // |V| = 3 real tokens
    let max_len = 3;
    let specs = [
        ScheduleSpec::Fixed(1),
        ScheduleSpec::Fixed(2),
        ScheduleSpec::Fixed(3),
        ScheduleSpec::Mixed { ar_prefix: 1, block: 2 },
    ];
    let mut ctc_ar_cases = 0usize;
    let mut amd_cases = 0usize;
    let mut seed = 0u64;
    while ctc_ar_cases + amd_cases < 50 {
        seed += 1;
        if (ctc_ar_cases + amd_cases) % 2 == 0 {
            let lp = toy::random_ctc_matrix(3, vocab, seed);
            let mut ar = toy::RandomTabularAr::new(vocab, seed ^ 0x55);
            let weights = FusionWeights::ctc_ar_baseline();
            let got = beam_search_ctc_ar(
                &lp,
                &mut ar,
                &CtcArOptions {
                    beam_size: 64,
                    weights,
                    max_len,
                },
            )
            .map_err(|e| e.to_string())?;
            let mut ar2 = toy::RandomTabularAr::new(vocab, seed ^ 0x55);
            let (want, want_score) =
                search_oracle::ctc_ar_argmax(&lp, &mut ar2, &weights, max_len);
            if got.best_tokens() != want.as_slice() {
                return Err(format!(
                    "ctc+ar seed {seed}: beam {:?} vs exhaustive argmax {want:?} ({want_score})",
                    got.best_tokens()
                ));
            }
            ctc_ar_cases += 1;
        } else {
            let lp = toy::random_ctc_matrix(4, vocab, seed);
            if ctc_greedy(&lp).is_empty() {
                continue; // zero-length pin: nothing to rank
            }
            let spec = specs[amd_cases % specs.len()];
            let weights = FusionWeights::tripartite_default();
            let amd = toy::RandomTabularAmd::new(vocab, seed ^ 0xaa);
            let mut amd_s = toy::RandomTabularAmd::new(vocab, seed ^ 0xaa);
            let mut ar = toy::RandomTabularAr::new(vocab, seed ^ 0x55);
            let got = beam_search_amd(
                &lp,
                &mut ar,
                &mut amd_s,
                spec,
                &AmdOptions {
                    k_amd: 64,
                    k_main: 64,
                    weights,
                    ar_per_slot: false,
                },
            )
            .map_err(|e| e.to_string())?;
            let ranking = search_oracle::amd_ranking(&lp, seed ^ 0x55, &amd, spec, &weights);
            if got.hyps[0].tokens != ranking[0].0 {
                return Err(format!(
                    "amd seed {seed} spec {spec}: beam {:?} vs exhaustive argmax {:?} ({})",
                    got.hyps[0].tokens, ranking[0].0, ranking[0].1
                ));
            }
            amd_cases += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    if secs >= 120.0 {
        return Err(format!("search oracle suite took {secs:.1}s, budget is 120s"));
    }
    Ok(format!(
        "{ctc_ar_cases} ctc+ar + {amd_cases} tripartite instances match the exhaustive argmax in {secs:.1}s"
    ))
}

/// Criterion 6: AMD forwards per path equal the block count of the schedule
/// for every L in [1, 64]; Fixed(8) on L=16 gives exactly 2 vs 16 AR steps.
fn criterion6() -> Result<String, String> {
    for len in 1..=64usize {
        for b in [1usize, 2, 3, 5, 8, 13, 16] {
            let schedule = make_schedule(len, ScheduleSpec::Fixed(b)).map_err(|e| e.to_string())?;
            if !schedule.partitions(len) {
                return Err(format!("Fixed({b}) does not partition L={len}"));
            }
            let want = len.div_ceil(b);
            let (amd_calls, ar_steps) = count_decoder_calls(&schedule, len);
            if amd_calls != want || ar_steps != len {
                return Err(format!(
                    "Fixed({b}) L={len}: counted ({amd_calls}, {ar_steps}), want ({want}, {len})"
                ));
            }
        }
        for (n, b) in [(1usize, 2usize), (5, 3), (10, 2), (30, 8)] {
            let spec = ScheduleSpec::Mixed { ar_prefix: n, block: b };
            let schedule = make_schedule(len, spec).map_err(|e| e.to_string())?;
            if !schedule.partitions(len) {
                return Err(format!("Mixed({n},{b}) does not partition L={len}"));
            }
            let singles = n.min(len);
            let want = singles + (len - singles).div_ceil(b);
            let (amd_calls, ar_steps) = count_decoder_calls(&schedule, len);
            if amd_calls != want || ar_steps != len {
                return Err(format!(
                    "Mixed({n},{b}) L={len}: counted ({amd_calls}, {ar_steps}), want ({want}, {len})"
                ));
            }
        }
    }
    let schedule = make_schedule(16, ScheduleSpec::Fixed(8)).map_err(|e| e.to_string())?;
    let (amd_calls, ar_steps) = count_decoder_calls(&schedule, 16);
    if (amd_calls, ar_steps) != (2, 16) {
        return Err(format!(
            "Fixed(8) on L=16: counted ({amd_calls}, {ar_steps}), want (2, 16)"
        ));
    }
    Ok("AMD forwards per path = |blocks| for all L in [1, 64]; Fixed(8) on L=16 gives 2 vs 16".into())
}

/// The reference corpus and trained micro model shared by criteria 7-9.
fn build_fixture() -> Result<(Corpus, ModelParams, f64), String> {
    let corpus_config = CorpusConfig {
        seed: 9,
        vocab_size: 24,
        utterance_count: 600,
        min_len: 4,
        max_len: 10,
        min_frames_per_token: 8,
        max_frames_per_token: 8,
        feature_dim: 16,
        noise_std: 0.05,
    };
    let corpus = generate_corpus(&corpus_config).map_err(|e| e.to_string())?;
    let model_config = ModelConfig {
        vocab_size: corpus_config.model_vocab_size(),
        d_model: 32,
        n_heads: 4,
        ff_dim: 64,
        n_encoder_layers: 3,
        n_decoder_layers: 1,
        max_len: 80,
        feature_dim: corpus_config.feature_dim,
        subsample_factor: 2,
        ..ModelConfig::default()
    };
    let train_config = TrainConfig {
        weights: LossWeights::default(),
        peak_lr: 2e-3,
        warmup_steps: 100,
        batch_size: 8,
        epochs: 60,
        seed: 1,
        n_block_samples: 3,
        grad_clip: 5.0,
    };
    let t0 = Instant::now();
    let mut rng = substream(train_config.seed, "init");
    let params = ModelParams::init(model_config, &mut rng).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(train_config.clone(), params).map_err(|e| e.to_string())?;
    while trainer.epochs_done() < train_config.epochs {
        trainer.run_epoch(&corpus).map_err(|e| e.to_string())?;
    }
    let train_secs = t0.elapsed().as_secs_f64();
    Ok((corpus, trainer.params, train_secs))
}

fn greedy_tripartite(spec: ScheduleSpec) -> DecodeMode {
    DecodeMode::Amd {
        spec,
        k_amd: 1,
        k_main: 1,
        weights: FusionWeights::tripartite_default(),
        ar_per_slot: false,
    }
}

fn baseline_greedy() -> DecodeMode {
    DecodeMode::BeamCtcAr {
        beam: 1,
        weights: FusionWeights::ctc_ar_baseline(),
    }
}

fn bench(
    corpus: &Corpus,
    params: &ModelParams,
    mode: &DecodeMode,
    name: &str,
    reps: usize,
) -> Result<SystemReport, String> {
    evaluate_system(params, &corpus.test, mode, name, reps).map_err(|e| e.to_string())
}

/// Criterion 7: tripartite greedy speed on the trained micro model:
/// Fixed(8) >= 1.3x over CTC+AR greedy; Mixed(10,2) RTF within 15% of it.
fn criterion7(corpus: &Corpus, params: &ModelParams, train_secs: f64) -> Result<String, String> {
    let t0 = Instant::now();
    let reps = 5;
    // Two interleaved measurement rounds, keeping each system's faster one:
    // timing starts right after minutes of full-load training, so the clock
    // frequency drifts across the bench and a single pass biases whichever
    // system ran later. A discarded warmup pass settles caches first.
    let mixed_mode = greedy_tripartite(ScheduleSpec::Mixed { ar_prefix: 10, block: 2 });
    bench(corpus, params, &baseline_greedy(), "warmup", 1)?;
    let mut base = bench(corpus, params, &baseline_greedy(), "beam-ctc-ar:1", reps)?;
    let mut fixed8 = bench(
        corpus,
        params,
        &greedy_tripartite(ScheduleSpec::Fixed(8)),
        "amd:fixed:8",
        reps,
    )?;
    let mut mixed = bench(corpus, params, &mixed_mode, "amd:mixed:10-2", reps)?;
    for _ in 0..3 {
        let b = bench(corpus, params, &baseline_greedy(), "beam-ctc-ar:1", reps)?;
        if b.total_wall_seconds < base.total_wall_seconds {
            base = b;
        }
        let f = bench(
            corpus,
            params,
            &greedy_tripartite(ScheduleSpec::Fixed(8)),
            "amd:fixed:8",
            reps,
        )?;
        if f.total_wall_seconds < fixed8.total_wall_seconds {
            fixed8 = f;
        }
        let m = bench(corpus, params, &mixed_mode, "amd:mixed:10-2", reps)?;
        if m.total_wall_seconds < mixed.total_wall_seconds {
            mixed = m;
        }
    }
    let speedup = base.total_wall_seconds / fixed8.total_wall_seconds;
    let ratio = mixed.rtf / base.rtf;
    let secs = t0.elapsed().as_secs_f64();
    let detail = format!(
        "Fixed(8) speedup {speedup:.2}x (need >= 1.3), Mixed(10,2) RTF ratio {ratio:.3} \
         (need 0.85..1.15); fixture train {train_secs:.0}s + bench {secs:.0}s"
    );
    if speedup < 1.3 {
        return Err(detail);
    }
    if !(0.85..=1.15).contains(&ratio) {
        return Err(detail);
    }
    if train_secs + secs >= 600.0 {
        return Err(format!("{detail}; over the 600s budget"));
    }
    Ok(detail)
}

/// Criterion 8: tripartite Mixed(30,8) greedy WER is not significantly worse
/// than CTC+AR greedy under MAPSSWE at alpha = 0.05.
fn criterion8(corpus: &Corpus, params: &ModelParams) -> Result<String, String> {
    let base = bench(corpus, params, &baseline_greedy(), "beam-ctc-ar:1", 1)?;
    let amd = bench(
        corpus,
        params,
        &greedy_tripartite(ScheduleSpec::Mixed { ar_prefix: 30, block: 8 }),
        "amd:mixed:30-8",
        1,
    )?;
    let cmp = eval::compare(&base, &amd, 0.05).map_err(|e| e.to_string())?;
    let detail = format!(
        "baseline WER {:.2}% vs Mixed(30,8) WER {:.2}%, MAPSSWE z {:+.3} \
         (threshold {:.3})",
        100.0 * base.wer,
        100.0 * amd.wer,
        cmp.mapsswe.z,
        cmp.mapsswe.threshold
    );
    // negative z means the contender makes more errors than the baseline
    if cmp.mapsswe.significant && cmp.mapsswe.z < 0.0 {
        return Err(format!("{detail}; significantly worse"));
    }
    Ok(detail)
}

/// Criterion 9: depth sweep. Density and oracle-WER gap to the K=20
/// saturation point are monotone non-increasing in block size at fixed K,
/// and AMD density <= baseline density at equal K for B >= 2.
fn criterion9(corpus: &Corpus, params: &ModelParams) -> Result<String, String> {
    let max_k = 20;
    let base = bench(
        corpus,
        params,
        &DecodeMode::BeamCtcAr {
            beam: max_k,
            weights: FusionWeights::ctc_ar_baseline(),
        },
        "beam-ctc-ar",
        1,
    )?;
    let blocks = [1usize, 2, 4, 8];
    let mut amd_reports = Vec::new();
    for &b in &blocks {
        amd_reports.push(bench(
            corpus,
            params,
            &DecodeMode::Amd {
                spec: ScheduleSpec::Fixed(b),
                k_amd: 2,
                k_main: max_k,
                weights: FusionWeights::tripartite_default(),
                ar_per_slot: false,
            },
            &format!("amd:fixed:{b}"),
            1,
        )?);
    }
    let tol = 1e-9;
    for k in 1..=max_k {
        let base_density = base.density_at_depth(k).map_err(|e| e.to_string())?;
        let mut prev_density = f64::INFINITY;
        let mut prev_gap = f64::INFINITY;
        for (i, r) in amd_reports.iter().enumerate() {
            let density = r.density_at_depth(k).map_err(|e| e.to_string())?;
            let gap = r.oracle_wer_at_depth(k).map_err(|e| e.to_string())?
                - r.oracle_wer_at_depth(max_k).map_err(|e| e.to_string())?;
            if density > prev_density + tol {
                return Err(format!(
                    "density not monotone in B at K={k}: B={} gives {density:.4} after {prev_density:.4}",
                    blocks[i]
                ));
            }
            if gap > prev_gap + tol {
                return Err(format!(
                    "oracle-WER gap to K=20 not monotone in B at K={k}: B={} gives {gap:.4} after {prev_gap:.4}",
                    blocks[i]
                ));
            }
            if blocks[i] >= 2 && density > base_density + tol {
                return Err(format!(
                    "AMD density above baseline at K={k}, B={}: {density:.4} > {base_density:.4}",
                    blocks[i]
                ));
            }
            prev_density = density;
            prev_gap = gap;
        }
    }
    let base20 = base.density_at_depth(max_k).map_err(|e| e.to_string())?;
    let amd20 = amd_reports[3].density_at_depth(max_k).map_err(|e| e.to_string())?;
    Ok(format!(
        "monotone over B in {{1,2,4,8}} for all K <= 20; at K=20 baseline density {base20:.2} \
         vs Fixed(8) {amd20:.2}"
    ))
}

/// Criterion 10: generation, training, and decoding are bit-reproducible
/// under identical configs and seeds.
fn criterion10() -> Result<String, String> {
    let corpus_config = CorpusConfig {
        seed: 3,
        vocab_size: 8,
        utterance_count: 60,
        min_len: 3,
        max_len: 6,
        min_frames_per_token: 3,
        max_frames_per_token: 5,
        feature_dim: 8,
        noise_std: 0.1,
    };
    let c1 = generate_corpus(&corpus_config).map_err(|e| e.to_string())?;
    let c2 = generate_corpus(&corpus_config).map_err(|e| e.to_string())?;
    if c1 != c2 {
        return Err("two corpus generations with the same seed differ".into());
    }
    let model_config = ModelConfig {
        vocab_size: corpus_config.model_vocab_size(),
        d_model: 16,
        n_heads: 2,
        ff_dim: 32,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        max_len: 16,
        feature_dim: 8,
        subsample_factor: 2,
        ..ModelConfig::default()
    };
    let train_config = TrainConfig {
        epochs: 2,
        seed: 5,
        warmup_steps: 10,
        ..TrainConfig::default()
    };
    let mut trained = Vec::new();
    for _ in 0..2 {
        let mut rng = substream(train_config.seed, "init");
        let params = ModelParams::init(model_config.clone(), &mut rng).map_err(|e| e.to_string())?;
        let mut trainer = Trainer::new(train_config.clone(), params).map_err(|e| e.to_string())?;
        for _ in 0..train_config.epochs {
            trainer.run_epoch(&c1).map_err(|e| e.to_string())?;
        }
        trained.push(trainer.params);
    }
    for i in 0..trained[0].len() {
        if !bits_eq(trained[0].values(i), trained[1].values(i)) {
            return Err(format!(
                "two training runs with the same seed diverge in parameter {}",
                trained[0].name(i)
            ));
        }
    }
    let mode = DecodeMode::Amd {
        spec: ScheduleSpec::Mixed { ar_prefix: 2, block: 2 },
        k_amd: 2,
        k_main: 2,
        weights: FusionWeights::tripartite_default(),
        ar_per_slot: false,
    };
    for utt in c1.test.iter().take(5) {
        let a = tridec_core::search::decode_utterance(&trained[0], &utt.features, &mode)
            .map_err(|e| e.to_string())?;
        let b = tridec_core::search::decode_utterance(&trained[0], &utt.features, &mode)
            .map_err(|e| e.to_string())?;
        if a.hyps.len() != b.hyps.len() {
            return Err(format!("decode of {} is not reproducible", utt.id));
        }
        for (x, y) in a.hyps.iter().zip(&b.hyps) {
            if x.tokens != y.tokens || x.fused.to_bits() != y.fused.to_bits() {
                return Err(format!("decode of {} is not reproducible", utt.id));
            }
        }
    }
    Ok("corpus, trained parameters, and decodes bit-identical across reruns".into())
}

/// Criterion 11: MAPSSWE unit values and sign antisymmetry.
fn criterion11() -> Result<String, String> {
    let z = mapsswe(&[2, 0, 2, 0], &[0, 0, 0, 0], 0.05)
        .map_err(|e| e.to_string())?
        .z;
    if (z - 1.732).abs() > 1e-3 {
        return Err(format!("z([2,0,2,0] vs zero) = {z}, want 1.732 +- 1e-3"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x1100);
    for case in 0..100 {
        let n = rng.gen_range(2..=12);
        let a: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
        let ab = mapsswe(&a, &b, 0.05).map_err(|e| e.to_string())?;
        let ba = mapsswe(&b, &a, 0.05).map_err(|e| e.to_string())?;
        if (ab.z + ba.z).abs() > 1e-12 {
            return Err(format!(
                "pair {case}: z(a,b) = {} and z(b,a) = {} are not antisymmetric",
                ab.z, ba.z
            ));
        }
    }
    Ok(format!(
        "z([2,0,2,0] vs zero) = {z:.4}; sign antisymmetric on 100 random pairs"
    ))
}
