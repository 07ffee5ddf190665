//! Efficiency and robustness benchmarks: exact AR step-count arithmetic for
//! six token-arrangement patterns, wall-clock scaling of the cached AR loop,
//! reconstruction-quality ordering across merge configs, and decoder A/B
//! robustness sweeps over top_p.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::codec::{
    decode as codec_decode, encode, reconstruction_snr, LatentSeq, MergeConfig,
    TrainOpts,
};
use crate::corpus::{PhonemeId, SyntheticUtterance};
use crate::decode::{
    baseline_decode, ma_decode, AdvanceMode, DecodeSession, DecodeStatus,
};
use crate::error::{Error, Result};
use crate::lm::cache::ArSession;
use crate::lm::LmWeights;
use crate::scalar::Scalar;
use crate::seed::{derive_seed, Stream};

// ---------------------------------------------------------------------------
// Step-count arithmetic
// ---------------------------------------------------------------------------

/// Token arrangement patterns whose AR step counts are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Pattern {
    /// All Q layers autoregressive: T x Q steps.
    Flatten,
    /// First layer AR, rest handled non-autoregressively: T steps.
    CoarseToFine,
    /// Phoneme tokens spliced into the AR stream: 2P + T steps.
    PhonemeInterleave,
    /// Duration/pitch prefix before the acoustic stream: P + T steps.
    CotPrefix,
    /// Layer-delayed flattening without a NAR stage: (Q-1) + T steps.
    Delay,
    /// First layer AR at the merged rate: ceil(T/m) steps.
    MergedCoarseToFine,
}

impl Pattern {
    pub fn all() -> [Pattern; 6] {
        [
            Pattern::Flatten,
            Pattern::CoarseToFine,
            Pattern::PhonemeInterleave,
            Pattern::CotPrefix,
            Pattern::Delay,
            Pattern::MergedCoarseToFine,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Pattern::Flatten => "flatten",
            Pattern::CoarseToFine => "coarse-to-fine",
            Pattern::PhonemeInterleave => "phoneme-interleave",
            Pattern::CotPrefix => "cot-prefix",
            Pattern::Delay => "delay",
            Pattern::MergedCoarseToFine => "merged-coarse-to-fine",
        }
    }

    pub fn parse(s: &str) -> Result<Pattern> {
        Pattern::all()
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown pattern {s:?}")))
    }

    /// Whether the pattern pairs with a NAR completion stage.
    pub fn has_nar(&self) -> bool {
        !matches!(self, Pattern::Flatten | Pattern::Delay)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PatternSpec {
    pub pattern: Pattern,
    /// Codec quantizer layers Q.
    pub layers: usize,
    /// Codec frame rate in Hz.
    pub hz: f64,
    /// Phoneme count P for the text-bearing patterns.
    pub phonemes: usize,
    /// Merge rate m for the merged pattern.
    pub merge: usize,
    /// Delay offset; defaults to Q - 1.
    pub delay_offset: Option<usize>,
}

impl PatternSpec {
    pub fn new(pattern: Pattern, layers: usize, hz: f64, phonemes: usize, merge: usize) -> Self {
        PatternSpec {
            pattern,
            layers,
            hz,
            phonemes,
            merge,
            delay_offset: None,
        }
    }
}

/// Exact integer AR step count for synthesizing `duration_s` seconds.
pub fn count_ar_steps(spec: &PatternSpec, duration_s: f64) -> Result<usize> {
    if duration_s <= 0.0 {
        return Err(Error::invalid("duration must be positive"));
    }
    if spec.layers == 0 || spec.merge == 0 || spec.hz <= 0.0 {
        return Err(Error::invalid("pattern parameters must be positive"));
    }
    let t = (duration_s * spec.hz).round() as usize;
    Ok(match spec.pattern {
        Pattern::Flatten => t * spec.layers,
        Pattern::CoarseToFine => t,
        Pattern::PhonemeInterleave => 2 * spec.phonemes + t,
        Pattern::CotPrefix => spec.phonemes + t,
        Pattern::Delay => spec.delay_offset.unwrap_or(spec.layers - 1) + t,
        Pattern::MergedCoarseToFine => t.div_ceil(spec.merge),
    })
}

// ---------------------------------------------------------------------------
// Wall-clock timing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct TimingStats {
    pub steps: usize,
    pub reps: usize,
    pub median_s: f64,
    pub iqr_s: f64,
    pub steps_per_sec: f64,
}

/// Median and IQR of `reps` runs of `steps` sequential cached-forward steps.
/// Runs on one thread; session setup happens outside the timed region.
pub fn time_ar_loop<S: Scalar>(
    w: &LmWeights<S>,
    steps: usize,
    reps: usize,
) -> Result<TimingStats> {
    if steps == 0 {
        return Err(Error::invalid("steps must be positive"));
    }
    if reps == 0 {
        return Err(Error::invalid("reps must be positive"));
    }
    if steps + 3 > w.config.max_seq {
        return Err(Error::invalid(format!(
            "{} steps do not fit in max_seq {}",
            steps, w.config.max_seq
        )));
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let mut session = ArSession::new(w, false)?;
        session.prime(&[0], &[])?;
        let code = 0u16;
        let phoneme = 0u16;
        let start = Instant::now();
        for _ in 0..steps {
            session.step(code, phoneme)?;
        }
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = percentile(&times, 0.5);
    let iqr = percentile(&times, 0.75) - percentile(&times, 0.25);
    Ok(TimingStats {
        steps,
        reps,
        median_s: median,
        iqr_s: iqr,
        steps_per_sec: steps as f64 / median,
    })
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EnvMeta {
    pub os: String,
    pub arch: String,
    pub cpu: String,
    pub threads: usize,
}

pub fn env_meta() -> EnvMeta {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .map(|l| l.splitn(2, ':').nth(1).unwrap_or("").trim().to_string())
        })
        .unwrap_or_else(|| "unknown".into());
    EnvMeta {
        os: std::env::consts::OS.into(),
        arch: std::env::consts::ARCH.into(),
        cpu,
        threads: std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1),
    }
}

// ---------------------------------------------------------------------------
// Merge-quality sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct MergeSweepRow {
    pub label: String,
    pub merge: String,
    pub mean_snr_db: f64,
    pub utterances: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderingCheck {
    pub description: String,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MergeSweepReport {
    pub rows: Vec<MergeSweepRow>,
    pub checks: Vec<OrderingCheck>,
    pub k: usize,
    pub iters: usize,
    pub seed: u64,
}

fn padded_latents<S: Scalar>(
    utts: &[SyntheticUtterance<S>],
    merge: &MergeConfig,
) -> Vec<LatentSeq<S>> {
    let multiple = merge.frame_multiple();
    utts.iter().map(|u| u.padded(multiple).0).collect()
}

/// Train one codebook set per merge config and report held-out mean SNR.
pub fn merge_quality_sweep<S: Scalar>(
    train: &[SyntheticUtterance<S>],
    heldout: &[SyntheticUtterance<S>],
    configs: &[(String, MergeConfig)],
    opts: &TrainOpts,
) -> Result<Vec<MergeSweepRow>> {
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::invalid("merge sweep needs train and held-out sets"));
    }
    configs
        .par_iter()
        .map(|(label, merge)| {
            let train_latents = padded_latents(train, merge);
            let (books, _) = crate::codec::train_codebooks(&train_latents, merge, opts)?;
            let snrs: Vec<f64> = heldout
                .iter()
                .map(|u| {
                    let z = u.padded(merge.frame_multiple()).0;
                    let codes = encode(&z, &books)?;
                    let zhat = codec_decode(&codes, &books)?;
                    reconstruction_snr(&z, &zhat)
                })
                .collect::<Result<_>>()?;
            let mean = snrs.iter().sum::<f64>() / snrs.len() as f64;
            Ok(MergeSweepRow {
                label: label.clone(),
                merge: merge.to_string(),
                mean_snr_db: mean,
                utterances: heldout.len(),
            })
        })
        .collect()
}

/// The canonical six-config sweep with its ordering assertions.
pub fn standard_merge_sweep<S: Scalar>(
    train: &[SyntheticUtterance<S>],
    heldout: &[SyntheticUtterance<S>],
    opts: &TrainOpts,
) -> Result<MergeSweepReport> {
    let configs = vec![
        ("no-merge".to_string(), MergeConfig::none()),
        ("merge-l1-m2".to_string(), MergeConfig::first_layer(2)),
        ("merge-l1-4-m2".to_string(), MergeConfig::first_n_layers(4, 2)),
        ("merge-l1-8-m2".to_string(), MergeConfig::all_layers(2)),
        ("merge-l1-m3".to_string(), MergeConfig::first_layer(3)),
        ("merge-l1-m4".to_string(), MergeConfig::first_layer(4)),
    ];
    let rows = merge_quality_sweep(train, heldout, &configs, opts)?;
    let snr = |label: &str| {
        rows.iter()
            .find(|r| r.label == label)
            .map(|r| r.mean_snr_db)
            .unwrap()
    };
    let full = snr("no-merge");
    let l1m2 = snr("merge-l1-m2");
    let l14 = snr("merge-l1-4-m2");
    let l18 = snr("merge-l1-8-m2");
    let l1m3 = snr("merge-l1-m3");
    let l1m4 = snr("merge-l1-m4");
    let checks = vec![
        OrderingCheck {
            description: "no-merge >= merge-l1-m2".into(),
            pass: full >= l1m2,
        },
        OrderingCheck {
            description: "merge-l1-m2 >= merge-l1-4-m2".into(),
            pass: l1m2 >= l14,
        },
        OrderingCheck {
            description: "merge-l1-4-m2 >= merge-l1-8-m2".into(),
            pass: l14 >= l18,
        },
        OrderingCheck {
            description: "merge-l1-m2 within 10% of no-merge".into(),
            pass: (full - l1m2) <= 0.10 * full.abs(),
        },
        OrderingCheck {
            description: "layer-1 SNR non-increasing in m (2, 3, 4)".into(),
            pass: l1m2 >= l1m3 && l1m3 >= l1m4,
        },
    ];
    Ok(MergeSweepReport {
        rows,
        checks,
        k: opts.k,
        iters: opts.iters,
        seed: opts.seed,
    })
}

// ---------------------------------------------------------------------------
// Run-sequence analysis (phoneme-error proxy)
// ---------------------------------------------------------------------------

/// Collapse consecutive repeats into a run symbol sequence.
pub fn collapse_runs(stream: &[PhonemeId]) -> Vec<PhonemeId> {
    let mut out: Vec<PhonemeId> = Vec::new();
    for &p in stream {
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditBreakdown {
    pub distance: usize,
    /// Extra emitted runs beyond the target (repetition events).
    pub insertions: usize,
    /// Target runs never realized, excluding a trailing gap on truncation.
    pub skips: usize,
    /// Wrong-symbol runs (count toward skips of the true phoneme).
    pub substitutions: usize,
}

/// Levenshtein with a deterministic backtrace classifying edits. `truncated`
/// reattributes a trailing block of deletions to the truncation rather than
/// counting them as skips.
pub fn edit_breakdown(emitted: &[PhonemeId], target: &[PhonemeId], truncated: bool) -> EditBreakdown {
    let n = emitted.len();
    let m = target.len();
    let mut dp = vec![vec![0usize; n + 1]; m + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=n {
        dp[0][j] = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            let sub = dp[i - 1][j - 1] + usize::from(target[i - 1] != emitted[j - 1]);
            let del = dp[i - 1][j] + 1;
            let ins = dp[i][j - 1] + 1;
            dp[i][j] = sub.min(del).min(ins);
        }
    }
    let distance = dp[m][n];

    // Backtrace. While still at the emitted tail, prefer deletions so a
    // truncated prefix aligns as "match the prefix, drop the suffix" instead
    // of a tied suffix-match that would misread trailing loss as skips.
    let mut i = m;
    let mut j = n;
    let mut insertions = 0usize;
    let mut substitutions = 0usize;
    let mut deletions_trailing = 0usize;
    let mut deletions_internal = 0usize;
    let mut at_tail = true;
    while i > 0 || j > 0 {
        if at_tail && j == n && i > 0 && dp[i][j] == dp[i - 1][j] + 1 {
            deletions_trailing += 1;
            i -= 1;
        } else if i > 0
            && j > 0
            && dp[i][j] == dp[i - 1][j - 1] + usize::from(target[i - 1] != emitted[j - 1])
        {
            if target[i - 1] != emitted[j - 1] {
                substitutions += 1;
            }
            i -= 1;
            j -= 1;
            at_tail = false;
        } else if i > 0 && dp[i][j] == dp[i - 1][j] + 1 {
            deletions_internal += 1;
            i -= 1;
        } else {
            insertions += 1;
            j -= 1;
            at_tail = false;
        }
    }
    let mut skips = deletions_internal + substitutions;
    if !truncated {
        skips += deletions_trailing;
    }
    EditBreakdown {
        distance,
        insertions,
        skips,
        substitutions,
    }
}

// ---------------------------------------------------------------------------
// Robustness sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DecoderKind {
    Ma,
    Baseline,
}

impl DecoderKind {
    pub fn name(&self) -> &'static str {
        match self {
            DecoderKind::Ma => "ma",
            DecoderKind::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<DecoderKind> {
        match s {
            "ma" => Ok(DecoderKind::Ma),
            "baseline" => Ok(DecoderKind::Baseline),
            other => Err(Error::invalid(format!("unknown decoder {other:?}"))),
        }
    }
}

/// One decode task: a prompt (codes + transcription) and target phonemes.
#[derive(Debug, Clone)]
pub struct RobustnessCase {
    pub prompt_phonemes: Vec<PhonemeId>,
    pub prompt_pairs: Vec<(u16, PhonemeId)>,
    pub target_phonemes: Vec<PhonemeId>,
    pub expected_steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessCell {
    pub decoder: String,
    pub top_p: f64,
    pub error_proxy: f64,
    pub repetition_rate: f64,
    pub skip_rate: f64,
    pub truncation_rate: f64,
    pub utterances: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessReport {
    pub cells: Vec<RobustnessCell>,
    pub seed: u64,
    pub mode: AdvanceMode,
}

/// Decode every case under every (decoder, top_p) cell and aggregate the
/// phoneme-error proxy and structural violation rates.
pub fn robustness_sweep<S: Scalar>(
    ar: &LmWeights<S>,
    cases: &[RobustnessCase],
    decoders: &[DecoderKind],
    grid: &[f64],
    mode: AdvanceMode,
    seed: u64,
) -> Result<RobustnessReport> {
    if cases.is_empty() {
        return Err(Error::invalid("robustness sweep needs at least one case"));
    }
    let eos = ar.config.p_eos();
    let mut cells = Vec::new();
    for &decoder in decoders {
        for (gi, &top_p) in grid.iter().enumerate() {
            let results: Vec<(f64, bool, bool, bool)> = cases
                .par_iter()
                .enumerate()
                .map(|(ci, case)| -> Result<(f64, bool, bool, bool)> {
                    let session = DecodeSession {
                        prompt_phonemes: case.prompt_phonemes.clone(),
                        prompt_pairs: case.prompt_pairs.clone(),
                        target_phonemes: case.target_phonemes.clone(),
                        top_p,
                        mode,
                        step_budget: 0,
                        expected_steps: case.expected_steps,
                        seed: derive_seed(
                            seed,
                            Stream::Sweep,
                            (decoder as u64) << 32 | (gi as u64) << 16 | ci as u64,
                        ),
                    };
                    let mut stepper = ArSession::new(ar, false)?;
                    let raw = match decoder {
                        DecoderKind::Ma => ma_decode(&mut stepper, &session, eos)?,
                        DecoderKind::Baseline => baseline_decode(&mut stepper, &session, eos)?,
                    };
                    let truncated = raw.status == DecodeStatus::Truncated;
                    let emitted = collapse_runs(&raw.phonemes);
                    let target = collapse_runs(&case.target_phonemes);
                    let b = edit_breakdown(&emitted, &target, truncated);
                    let proxy = b.distance as f64 / target.len().max(1) as f64;
                    Ok((proxy, b.insertions > 0, b.skips > 0, truncated))
                })
                .collect::<Result<_>>()?;
            let n = results.len() as f64;
            cells.push(RobustnessCell {
                decoder: decoder.name().to_string(),
                top_p,
                error_proxy: results.iter().map(|r| r.0).sum::<f64>() / n,
                repetition_rate: results.iter().filter(|r| r.1).count() as f64 / n,
                skip_rate: results.iter().filter(|r| r.2).count() as f64 / n,
                truncation_rate: results.iter().filter(|r| r.3).count() as f64 / n,
                utterances: results.len(),
            });
        }
    }
    Ok(RobustnessReport { cells, seed, mode })
}

/// Build cross-sentence decode cases: prompt utterances come from one corpus,
/// targets from another.
pub fn build_cases<S: Scalar>(
    prompts: &[crate::lm::train::ArExample],
    targets: &[SyntheticUtterance<S>],
    block_rate: usize,
) -> Vec<RobustnessCase> {
    targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let p = &prompts[i % prompts.len()];
            let expected = t.alignment.total_frames().div_ceil(block_rate);
            RobustnessCase {
                prompt_phonemes: p.prompt.clone(),
                prompt_pairs: p
                    .block_codes
                    .iter()
                    .copied()
                    .zip(p.block_aligned.iter().copied())
                    .collect(),
                target_phonemes: t.phonemes.symbols().to_vec(),
                expected_steps: expected,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Table rendering
// ---------------------------------------------------------------------------

pub fn render_step_table(specs: &[(PatternSpec, usize)]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<24} {:>12}\n", "pattern", "ar-steps"));
    for (spec, steps) in specs {
        out.push_str(&format!("{:<24} {:>12}\n", spec.pattern.name(), steps));
    }
    out
}

pub fn render_merge_table(report: &MergeSweepReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:<18} {:>12} {:>6}\n",
        "config", "merge-rates", "mean-snr-db", "utts"
    ));
    for row in &report.rows {
        out.push_str(&format!(
            "{:<16} {:<18} {:>12.3} {:>6}\n",
            row.label, row.merge, row.mean_snr_db, row.utterances
        ));
    }
    out.push('\n');
    for check in &report.checks {
        out.push_str(&format!(
            "[{}] {}\n",
            if check.pass { "pass" } else { "FAIL" },
            check.description
        ));
    }
    out
}

pub fn render_robustness_table(report: &RobustnessReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>6} {:>12} {:>10} {:>10} {:>10}\n",
        "decoder", "top_p", "err-proxy", "rep-rate", "skip-rate", "trunc-rate"
    ));
    for c in &report.cells {
        out.push_str(&format!(
            "{:<10} {:>6.2} {:>12.4} {:>10.3} {:>10.3} {:>10.3}\n",
            c.decoder, c.top_p, c.error_proxy, c.repetition_rate, c.skip_rate, c.truncation_rate
        ));
    }
    out
}

pub fn robustness_csv(report: &RobustnessReport) -> String {
    let mut out = String::from("decoder,top_p,error_proxy,repetition_rate,skip_rate,truncation_rate,utterances\n");
    for c in &report.cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.decoder, c.top_p, c.error_proxy, c.repetition_rate, c.skip_rate, c.truncation_rate, c.utterances
        ));
    }
    out
}
