//! Evaluation: word error rate, n-best oracle error, lattice density,
//! MAPSSWE significance testing, and the decode benchmark harness.

use crate::model::ModelParams;
use crate::search::{decode_utterance, DecodeMode};
use crate::synthdata::Utterance;
use crate::{Result, TridecError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::time::Instant;

/// Edit-distance outcome for one reference/hypothesis pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerOutcome {
    pub errors: usize,
    pub ref_len: usize,
}

impl WerOutcome {
    /// Error rate; undefined (None) for an empty reference.
    pub fn rate(&self) -> Option<f64> {
        if self.ref_len == 0 {
            None
        } else {
            Some(self.errors as f64 / self.ref_len as f64)
        }
    }
}

/// Levenshtein distance between token sequences (unit costs).
pub fn wer(reference: &[usize], hypothesis: &[usize]) -> WerOutcome {
    let n = reference.len();
    let m = hypothesis.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    WerOutcome {
        errors: prev[m],
        ref_len: n,
    }
}

/// Fewest errors any list entry achieves against the reference; ties keep
/// the lowest-ranked (earliest) entry.
pub fn oracle_errors(nbest: &[Vec<usize>], reference: &[usize]) -> Result<WerOutcome> {
    if nbest.is_empty() {
        return Err(TridecError::EmptyInput("oracle over empty n-best".into()));
    }
    let mut best = wer(reference, &nbest[0]);
    for hyp in &nbest[1..] {
        let w = wer(reference, hyp);
        if w.errors < best.errors {
            best = w;
        }
    }
    Ok(best)
}

/// Alignment of the hypothesis onto reference positions: entry i is the
/// hypothesis token matched or substituted at reference position i, or None
/// for a deletion. Equal-cost choices prefer substitution over insertion
/// over deletion, resolved left to right.
pub fn align(reference: &[usize], hypothesis: &[usize]) -> Vec<Option<usize>> {
    walk(reference, hypothesis).0
}

/// Inserted hypothesis tokens under the same alignment, each paired with the
/// reference position it precedes (= `reference.len()` for a final append).
fn insertions(reference: &[usize], hypothesis: &[usize]) -> Vec<(usize, usize)> {
    walk(reference, hypothesis).1
}

#[allow(clippy::type_complexity)]
fn walk(reference: &[usize], hypothesis: &[usize]) -> (Vec<Option<usize>>, Vec<(usize, usize)>) {
    let n = reference.len();
    let m = hypothesis.len();
    // e[i][j] = edit distance between ref[i..] and hyp[j..]
    let mut e = vec![vec![0usize; m + 1]; n + 1];
    for j in 0..=m {
        e[n][j] = m - j;
    }
    for i in (0..n).rev() {
        e[i][m] = n - i;
        for j in (0..m).rev() {
            let sub = e[i + 1][j + 1] + usize::from(reference[i] != hypothesis[j]);
            e[i][j] = sub.min(e[i][j + 1] + 1).min(e[i + 1][j] + 1);
        }
    }
    let mut out = Vec::with_capacity(n);
    let mut ins = Vec::new();
    let (mut i, mut j) = (0usize, 0usize);
    while i < n || j < m {
        if i == n {
            ins.push((i, hypothesis[j]));
            j += 1;
            continue;
        }
        if j == m {
            out.push(None);
            i += 1;
            continue;
        }
        let here = e[i][j];
        let sub_cost = e[i + 1][j + 1] + usize::from(reference[i] != hypothesis[j]);
        if sub_cost == here {
            out.push(Some(hypothesis[j]));
            i += 1;
            j += 1;
        } else if e[i][j + 1] + 1 == here {
            // insertion: hypothesis token consumed without a reference slot
            ins.push((i, hypothesis[j]));
            j += 1;
        } else {
            out.push(None);
            i += 1;
        }
    }
    (out, ins)
}

/// One aligned prediction at a reference position; insertions are kept
/// distinct from substitutions so that an inserted copy of the reference
/// token still counts as a separate prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Prediction {
    Token(usize),
    Inserted(usize),
    Absent,
}

/// Mean number of distinct aligned predictions per reference position across
/// the n-best list. Deletions count as one distinct "absent" value;
/// insertions attach to the reference position they precede (clamped to the
/// final position) as insertion-marked tokens.
pub fn lattice_density(nbest: &[Vec<usize>], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(TridecError::EmptyInput("density over empty reference".into()));
    }
    if nbest.is_empty() {
        return Err(TridecError::EmptyInput("density over empty n-best".into()));
    }
    let last = reference.len() - 1;
    let mut sets: Vec<BTreeSet<Prediction>> = vec![BTreeSet::new(); reference.len()];
    for hyp in nbest {
        for (i, tok) in align(reference, hyp).into_iter().enumerate() {
            sets[i].insert(match tok {
                Some(t) => Prediction::Token(t),
                None => Prediction::Absent,
            });
        }
        for (pos, t) in insertions(reference, hyp) {
            sets[pos.min(last)].insert(Prediction::Inserted(t));
        }
    }
    let total: usize = sets.iter().map(|s| s.len()).sum();
    Ok(total as f64 / reference.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapssweOutcome {
    pub z: f64,
    pub threshold: f64,
    pub significant: bool,
}

/// Matched-pairs sentence-segment word error test: z-statistic of the
/// per-segment error differences `a - b` against the two-sided normal
/// threshold at level `alpha`.
pub fn mapsswe(errors_a: &[usize], errors_b: &[usize], alpha: f64) -> Result<MapssweOutcome> {
    if errors_a.len() != errors_b.len() {
        return Err(TridecError::ShapeMismatch {
            op: "mapsswe".into(),
            lhs: errors_a.len().to_string(),
            rhs: errors_b.len().to_string(),
        });
    }
    let n = errors_a.len();
    if n < 2 {
        return Err(TridecError::Contract(
            "mapsswe needs at least two segments".into(),
        ));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(TridecError::Contract("alpha must be in (0, 1)".into()));
    }
    let d: Vec<f64> = errors_a
        .iter()
        .zip(errors_b)
        .map(|(&a, &b)| a as f64 - b as f64)
        .collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let z = if var == 0.0 {
        0.0
    } else {
        mean / (var.sqrt() / (n as f64).sqrt())
    };
    let threshold = normal_quantile(1.0 - alpha / 2.0);
    Ok(MapssweOutcome {
        z,
        threshold,
        significant: z.abs() > threshold,
    })
}

/// Inverse standard normal CDF (Acklam's rational approximation, ~1e-9
/// absolute error; plenty for significance thresholds).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile domain");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile(1.0 - p)
    }
}

/// One utterance's decode outcome inside a benchmark run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: String,
    pub reference: Vec<usize>,
    pub nbest: Vec<Vec<usize>>,
    pub errors: usize,
    pub ref_len: usize,
    pub oracle_errors: usize,
    /// Median wall time over the benchmark repetitions.
    pub wall_seconds: f64,
    pub audio_seconds: f64,
    pub amd_calls: usize,
    pub ar_calls: usize,
    pub density: f64,
}

/// Aggregate benchmark report for one decode configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SystemReport {
    pub name: String,
    pub wer: f64,
    pub oracle_wer: f64,
    pub mean_density: f64,
    pub total_wall_seconds: f64,
    /// Real-time factor: decode seconds per second of audio.
    pub rtf: f64,
    pub per_utterance: Vec<UtteranceResult>,
}

impl SystemReport {
    pub fn per_segment_errors(&self) -> Vec<usize> {
        self.per_utterance.iter().map(|u| u.errors).collect()
    }

    /// Oracle WER when each n-best list is truncated to depth `k`.
    pub fn oracle_wer_at_depth(&self, k: usize) -> Result<f64> {
        let mut errs = 0usize;
        let mut refs = 0usize;
        for u in &self.per_utterance {
            let depth = k.min(u.nbest.len()).max(1);
            let o = oracle_errors(&u.nbest[..depth], &u.reference)?;
            errs += o.errors;
            refs += o.ref_len;
        }
        if refs == 0 {
            return Err(TridecError::EmptyInput("no reference tokens".into()));
        }
        Ok(errs as f64 / refs as f64)
    }

    /// Mean lattice density at n-best depth `k`.
    pub fn density_at_depth(&self, k: usize) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for u in &self.per_utterance {
            if u.reference.is_empty() || u.nbest.is_empty() {
                continue;
            }
            let depth = k.min(u.nbest.len()).max(1);
            total += lattice_density(&u.nbest[..depth], &u.reference)?;
            count += 1;
        }
        if count == 0 {
            return Err(TridecError::EmptyInput("no scorable utterances".into()));
        }
        Ok(total / count as f64)
    }
}

/// Decode every utterance `reps` times under `mode`, keeping the median wall
/// time per utterance, and aggregate WER / oracle WER / density / RTF.
pub fn evaluate_system(
    params: &ModelParams,
    utterances: &[Utterance],
    mode: &DecodeMode,
    name: &str,
    reps: usize,
) -> Result<SystemReport> {
    if utterances.is_empty() {
        return Err(TridecError::EmptyInput("benchmark over no utterances".into()));
    }
    if reps == 0 {
        return Err(TridecError::Contract("reps must be >= 1".into()));
    }
    let mut per_utterance = Vec::with_capacity(utterances.len());
    let mut total_errors = 0usize;
    let mut total_oracle = 0usize;
    let mut total_refs = 0usize;
    let mut total_wall = 0.0;
    let mut total_audio = 0.0;
    let mut density_sum = 0.0;
    let mut density_count = 0usize;
    for utt in utterances {
        let mut times = Vec::with_capacity(reps);
        let mut out = None;
        for _ in 0..reps {
            let t0 = Instant::now();
            let o = decode_utterance(params, &utt.features, mode)?;
            times.push(t0.elapsed().as_secs_f64());
            out = Some(o);
        }
        let out = out.unwrap();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let wall = times[times.len() / 2];
        let nbest: Vec<Vec<usize>> = out.hyps.iter().map(|h| h.tokens.clone()).collect();
        let best: &[usize] = nbest.first().map(|v| v.as_slice()).unwrap_or(&[]);
        let w = wer(&utt.transcript, best);
        let o = if nbest.is_empty() {
            w
        } else {
            oracle_errors(&nbest, &utt.transcript)?
        };
        let density = if utt.transcript.is_empty() || nbest.is_empty() {
            0.0
        } else {
            let d = lattice_density(&nbest, &utt.transcript)?;
            density_sum += d;
            density_count += 1;
            d
        };
        total_errors += w.errors;
        total_oracle += o.errors;
        total_refs += w.ref_len;
        total_wall += wall;
        total_audio += utt.duration_seconds();
        per_utterance.push(UtteranceResult {
            id: utt.id.clone(),
            reference: utt.transcript.clone(),
            nbest,
            errors: w.errors,
            ref_len: w.ref_len,
            oracle_errors: o.errors,
            wall_seconds: wall,
            audio_seconds: utt.duration_seconds(),
            amd_calls: out.amd_calls,
            ar_calls: out.ar_calls,
            density,
        });
    }
    if total_refs == 0 {
        return Err(TridecError::EmptyInput("no reference tokens".into()));
    }
    Ok(SystemReport {
        name: name.to_string(),
        wer: total_errors as f64 / total_refs as f64,
        oracle_wer: total_oracle as f64 / total_refs as f64,
        mean_density: if density_count == 0 {
            0.0
        } else {
            density_sum / density_count as f64
        },
        total_wall_seconds: total_wall,
        rtf: total_wall / total_audio,
        per_utterance,
    })
}

/// Head-to-head comparison of two systems over the same utterance set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub contender: String,
    /// baseline wall time / contender wall time (>1 means contender faster)
    pub speedup: f64,
    pub mapsswe: MapssweOutcome,
}

pub fn compare(baseline: &SystemReport, contender: &SystemReport, alpha: f64) -> Result<Comparison> {
    let a = baseline.per_segment_errors();
    let b = contender.per_segment_errors();
    Ok(Comparison {
        baseline: baseline.name.clone(),
        contender: contender.name.clone(),
        speedup: baseline.total_wall_seconds / contender.total_wall_seconds,
        mapsswe: mapsswe(&a, &b, alpha)?,
    })
}

/// Summary table, one CSV row per system.
pub fn report_csv(reports: &[SystemReport]) -> String {
    let mut s = String::from("system,wer,oracle_wer,density,total_wall_seconds,rtf\n");
    for r in reports {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.4},{:.6},{:.6}\n",
            r.name, r.wer, r.oracle_wer, r.mean_density, r.total_wall_seconds, r.rtf
        ));
    }
    s
}

/// Depth sweep (oracle WER and density per n-best depth 1..=max_depth) as CSV.
pub fn depth_sweep_csv(reports: &[SystemReport], max_depth: usize) -> Result<String> {
    let mut s = String::from("system,k,density,oracle_wer\n");
    for r in reports {
        for k in 1..=max_depth {
            s.push_str(&format!(
                "{},{},{:.4},{:.6}\n",
                r.name,
                k,
                r.density_at_depth(k)?,
                r.oracle_wer_at_depth(k)?
            ));
        }
    }
    Ok(s)
}
