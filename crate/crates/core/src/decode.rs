//! Inference engines over a trained AR model: the monotonic-alignment decoder
//! (phoneme pointer restricted to stay/advance), a free-phoneme baseline for
//! A/B robustness runs, greedy NAR completion of layers 2..8, and
//! prosody transfer with a forced pointer schedule.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codec::{CodeId, CodeMatrix, MergeConfig};
use crate::corpus::{AlignedPhonemeSeq, PhonemeId};
use crate::error::{Error, Result};
use crate::lm::cache::{ArSession, StepLogits};
use crate::lm::model::{nar_forward, NarBatch};
use crate::lm::{LmWeights, QUANT_LAYERS};
use crate::scalar::Scalar;
use crate::seed::rng_from_seed;

// ---------------------------------------------------------------------------
// Stepper abstraction
// ---------------------------------------------------------------------------

/// One autoregressive step source. The production impl wraps a KV-cached
/// transformer session; tests substitute scripted logits.
pub trait ArStepper<S: Scalar> {
    /// Process the phoneme prompt region and any known (acoustic, phoneme)
    /// pairs; returns logits predicting the first unseen pair.
    fn prime(&mut self, prompt: &[PhonemeId], pairs: &[(CodeId, PhonemeId)])
        -> Result<StepLogits<S>>;
    /// Feed the pair emitted at the previous step.
    fn step(&mut self, a: CodeId, p: PhonemeId) -> Result<StepLogits<S>>;
    /// How many more steps fit before the position space is exhausted.
    fn capacity_left(&self) -> usize;
    /// Head-averaged first-block attention over the prompt columns for the
    /// most recent step, if captured.
    fn prompt_attention(&self) -> Option<Vec<f64>>;
}

impl<S: Scalar> ArStepper<S> for ArSession<'_, S> {
    fn prime(
        &mut self,
        prompt: &[PhonemeId],
        pairs: &[(CodeId, PhonemeId)],
    ) -> Result<StepLogits<S>> {
        ArSession::prime(self, prompt, pairs)
    }

    fn step(&mut self, a: CodeId, p: PhonemeId) -> Result<StepLogits<S>> {
        ArSession::step(self, a, p)
    }

    fn capacity_left(&self) -> usize {
        self.max_positions().saturating_sub(self.positions_used())
    }

    fn prompt_attention(&self) -> Option<Vec<f64>> {
        self.last_prompt_attention()
            .map(|row| row.iter().map(|v| v.as_f64()).collect())
    }
}

// ---------------------------------------------------------------------------
// Alignment paths
// ---------------------------------------------------------------------------

/// Phoneme pointer positions, one per emitted AR step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentPath {
    pub positions: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MaProperties {
    pub locality: bool,
    pub monotonicity: bool,
    pub completeness: bool,
}

impl MaProperties {
    pub fn all(&self) -> bool {
        self.locality && self.monotonicity && self.completeness
    }
}

/// Check the three alignment-path properties against a target of `l_t`
/// phonemes: locality (every step maps to one in-range phoneme, moves of at
/// most one position), monotonicity (non-decreasing), completeness (starts at
/// 0, ends at l_t-1, covers every index).
pub fn check_ma_properties(path: &[u32], l_t: usize) -> MaProperties {
    let in_range = path.iter().all(|&p| (p as usize) < l_t);
    let small_steps = path
        .windows(2)
        .all(|w| (w[1] as i64 - w[0] as i64).abs() <= 1);
    let locality = in_range && small_steps;
    let monotonicity = path.windows(2).all(|w| w[1] >= w[0]);
    let completeness = if path.is_empty() || l_t == 0 {
        false
    } else {
        let mut seen = vec![false; l_t];
        for &p in path {
            if (p as usize) < l_t {
                seen[p as usize] = true;
            }
        }
        path[0] == 0 && *path.last().unwrap() as usize == l_t - 1 && seen.iter().all(|&s| s)
    };
    MaProperties {
        locality,
        monotonicity,
        completeness,
    }
}

// ---------------------------------------------------------------------------
// Pointer advance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AdvanceMode {
    /// Renormalize the phoneme softmax over {stay, advance} and move with the
    /// advance share. Default.
    RestrictedSoftmax,
    /// Move with probability 1/(1+exp(e)), e being the restricted stay share.
    Eq5Literal,
}

#[derive(Debug, Clone, Copy)]
pub struct AdvanceOutcome {
    pub advance: bool,
    pub advance_prob: f64,
}

/// Decide stay-or-advance for pointer `j` over the target phonemes. At the
/// final phoneme the advance candidate is EOS.
pub fn advance_decision<S: Scalar>(
    phoneme_logits: &[S],
    target: &[PhonemeId],
    j: usize,
    eos: PhonemeId,
    mode: AdvanceMode,
    rng: &mut ChaCha8Rng,
) -> Result<AdvanceOutcome> {
    if j >= target.len() {
        return Err(Error::Pointer(format!(
            "pointer {j} out of range for {} target phonemes",
            target.len()
        )));
    }
    let stay_tok = target[j] as usize;
    let adv_tok = if j + 1 < target.len() {
        target[j + 1] as usize
    } else {
        eos as usize
    };
    if stay_tok >= phoneme_logits.len() || adv_tok >= phoneme_logits.len() {
        return Err(Error::Pointer("phoneme token outside logit range".into()));
    }
    let probs = softmax_f64(phoneme_logits);
    let advance_prob = if stay_tok == adv_tok {
        0.5
    } else {
        let p_stay = probs[stay_tok];
        let p_adv = probs[adv_tok];
        let denom = p_stay + p_adv;
        let restricted_adv = if denom > 0.0 { p_adv / denom } else { 0.5 };
        match mode {
            AdvanceMode::RestrictedSoftmax => restricted_adv,
            AdvanceMode::Eq5Literal => {
                let e = 1.0 - restricted_adv; // restricted probability of staying
                1.0 / (1.0 + e.exp())
            }
        }
    };
    let advance = rng_f64(rng) < advance_prob;
    Ok(AdvanceOutcome {
        advance,
        advance_prob,
    })
}

fn softmax_f64<S: Scalar>(logits: &[S]) -> Vec<f64> {
    let mut maxv = f64::NEG_INFINITY;
    for v in logits {
        maxv = maxv.max(v.as_f64());
    }
    let mut out: Vec<f64> = logits.iter().map(|v| (v.as_f64() - maxv).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

fn rng_f64(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    rng.random::<f64>()
}

// ---------------------------------------------------------------------------
// Nucleus sampling
// ---------------------------------------------------------------------------

/// Keep the smallest descending-probability prefix with cumulative mass
/// >= top_p (at least one token); ties sort by index for determinism.
pub fn top_p_filter(probs: &[f64], top_p: f64) -> (Vec<usize>, Vec<f64>) {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for idx in order {
        kept.push(idx);
        mass += probs[idx];
        if mass >= top_p {
            break;
        }
    }
    let renorm: Vec<f64> = kept.iter().map(|&i| probs[i] / mass).collect();
    (kept, renorm)
}

#[derive(Debug, Clone, Copy)]
pub struct SampledToken {
    pub token: usize,
    pub support: usize,
    /// Renormalized probability of the sampled token.
    pub prob: f64,
}

pub fn sample_top_p<S: Scalar>(
    logits: &[S],
    top_p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SampledToken> {
    if !(0.0..=1.0).contains(&top_p) || top_p <= 0.0 {
        return Err(Error::invalid(format!("top_p {top_p} not in (0, 1]")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits in top-p sampling".into()));
    }
    let probs = softmax_f64(logits);
    let (kept, renorm) = top_p_filter(&probs, top_p);
    let u = rng_f64(rng);
    let mut acc = 0.0;
    let mut chosen = kept.len() - 1;
    for (i, &p) in renorm.iter().enumerate() {
        acc += p;
        if u < acc {
            chosen = i;
            break;
        }
    }
    Ok(SampledToken {
        token: kept[chosen],
        support: kept.len(),
        prob: renorm[chosen],
    })
}

// ---------------------------------------------------------------------------
// Decode sessions
// ---------------------------------------------------------------------------

/// Everything a decode run needs besides the weights.
#[derive(Debug, Clone)]
pub struct DecodeSession {
    /// Transcription phonemes of the acoustic prompt (p^p).
    pub prompt_phonemes: Vec<PhonemeId>,
    /// Block-rate (merged) layer-1 codes of the prompt with their aligned
    /// phonemes, consumed as teacher-forced context.
    pub prompt_pairs: Vec<(CodeId, PhonemeId)>,
    /// Target phonemes to synthesize (p^t).
    pub target_phonemes: Vec<PhonemeId>,
    pub top_p: f64,
    pub mode: AdvanceMode,
    /// Hard cap on emitted steps; 0 means auto: 4 x (prompt pairs + expected).
    pub step_budget: usize,
    /// Expected emitted steps for the auto budget.
    pub expected_steps: usize,
    pub seed: u64,
}

impl DecodeSession {
    pub fn budget(&self) -> usize {
        if self.step_budget > 0 {
            self.step_budget
        } else {
            4 * (self.prompt_pairs.len() + self.expected_steps.max(self.target_phonemes.len()))
        }
    }

    fn validate(&self) -> Result<()> {
        if self.target_phonemes.is_empty() {
            return Err(Error::invalid("decode needs at least one target phoneme"));
        }
        if self.prompt_phonemes.is_empty() {
            return Err(Error::invalid("decode needs a prompt transcription"));
        }
        if self.budget() == 0 {
            return Err(Error::invalid("step budget must be positive"));
        }
        Ok(())
    }

    fn full_prompt(&self) -> Vec<PhonemeId> {
        let mut p = self.prompt_phonemes.clone();
        p.extend_from_slice(&self.target_phonemes);
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DecodeStatus {
    Complete,
    Truncated,
}

/// Per-step audit record; serialized as the decode audit log.
#[derive(Debug, Clone, Serialize)]
pub struct AuditRecord {
    pub step: usize,
    pub pointer: Option<u32>,
    pub advance_prob: Option<f64>,
    pub acoustic_token: CodeId,
    pub kept_support_size: usize,
    pub sampled_prob: f64,
}

/// Output of one AR decode before NAR completion.
#[derive(Debug, Clone)]
pub struct RawDecode {
    /// Block-rate layer-1 codes, one per emitted step.
    pub block_codes: Vec<CodeId>,
    /// Emitted phoneme per step (pointer phonemes for MA, free samples for
    /// the baseline).
    pub phonemes: Vec<PhonemeId>,
    /// Pointer path (MA and prosody only).
    pub path: Option<AlignmentPath>,
    pub status: DecodeStatus,
    pub audit: Vec<AuditRecord>,
    /// Per-step head-averaged first-block attention over the prompt region.
    pub attention: Option<Vec<Vec<f64>>>,
}

pub fn write_audit_log(path: &Path, records: &[AuditRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Monotonic-alignment decode: the phoneme stream is the pointer's phoneme,
/// never free-sampled; completion means the pointer advanced past the final
/// target phoneme.
pub fn ma_decode<S: Scalar, M: ArStepper<S>>(
    stepper: &mut M,
    session: &DecodeSession,
    eos: PhonemeId,
) -> Result<RawDecode> {
    session.validate()?;
    let mut rng = rng_from_seed(session.seed);
    let target = &session.target_phonemes;
    let budget = session.budget();

    let mut logits = stepper.prime(&session.full_prompt(), &session.prompt_pairs)?;
    let mut block_codes = Vec::new();
    let mut phonemes = Vec::new();
    let mut positions: Vec<u32> = Vec::new();
    let mut audit = Vec::new();
    let mut attention: Vec<Vec<f64>> = Vec::new();
    let mut j = 0usize;
    let mut status = DecodeStatus::Truncated;

    loop {
        // Pointer decision; the entry step is pinned to the first target
        // phoneme so paths always start at position 0. The entry decision is
        // still drawn (and discarded) so rng consumption matches the baseline
        // decoder step for step.
        let advance_prob = if positions.is_empty() {
            let _ = advance_decision(&logits.phoneme, target, j, eos, session.mode, &mut rng)?;
            None
        } else {
            let outcome =
                advance_decision(&logits.phoneme, target, j, eos, session.mode, &mut rng)?;
            if outcome.advance {
                if j + 1 >= target.len() {
                    status = DecodeStatus::Complete;
                    break;
                }
                j += 1;
            }
            Some(outcome.advance_prob)
        };
        let phoneme = target[j];
        let sampled = sample_top_p(&logits.acoustic, session.top_p, &mut rng)?;
        block_codes.push(sampled.token as CodeId);
        phonemes.push(phoneme);
        positions.push(j as u32);
        audit.push(AuditRecord {
            step: positions.len(),
            pointer: Some(j as u32),
            advance_prob,
            acoustic_token: sampled.token as CodeId,
            kept_support_size: sampled.support,
            sampled_prob: sampled.prob,
        });
        if let Some(row) = stepper.prompt_attention() {
            attention.push(row);
        }
        if positions.len() >= budget || stepper.capacity_left() <= 1 {
            break;
        }
        logits = stepper.step(sampled.token as CodeId, phoneme)?;
    }

    let path = AlignmentPath { positions };
    if status == DecodeStatus::Complete {
        let props = check_ma_properties(&path.positions, target.len());
        debug_assert!(props.all(), "complete MA path failed its own properties");
    }
    Ok(RawDecode {
        block_codes,
        phonemes,
        path: Some(path),
        status,
        audit,
        attention: if attention.is_empty() {
            None
        } else {
            Some(attention)
        },
    })
}

/// Identical AR loop but the phoneme token is sampled from the full phoneme
/// softmax; termination only on EOS or budget. Structural violations are
/// possible by design and are measured downstream on the emitted stream.
pub fn baseline_decode<S: Scalar, M: ArStepper<S>>(
    stepper: &mut M,
    session: &DecodeSession,
    eos: PhonemeId,
) -> Result<RawDecode> {
    session.validate()?;
    let mut rng = rng_from_seed(session.seed);
    let budget = session.budget();

    let mut logits = stepper.prime(&session.full_prompt(), &session.prompt_pairs)?;
    let mut block_codes = Vec::new();
    let mut phonemes = Vec::new();
    let mut audit = Vec::new();
    let mut attention: Vec<Vec<f64>> = Vec::new();
    let mut status = DecodeStatus::Truncated;

    loop {
        // Free phoneme sample over the full vocabulary (real phonemes plus
        // EOS; the BOS/PAD bookkeeping tokens are never valid emissions).
        let mut masked: Vec<f64> = logits.phoneme.iter().map(|v| v.as_f64()).collect();
        for (i, l) in masked.iter_mut().enumerate() {
            if i > eos as usize || i + 1 == eos as usize {
                *l = f64::NEG_INFINITY;
            }
        }
        let probs = softmax_f64(&masked);
        let u = rng_f64(&mut rng);
        let mut acc = 0.0;
        let mut phoneme = probs.len() - 1;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                phoneme = i;
                break;
            }
        }
        if phoneme == eos as usize {
            status = DecodeStatus::Complete;
            break;
        }
        let phoneme = phoneme as PhonemeId;
        let sampled = sample_top_p(&logits.acoustic, session.top_p, &mut rng)?;
        block_codes.push(sampled.token as CodeId);
        phonemes.push(phoneme);
        audit.push(AuditRecord {
            step: phonemes.len(),
            pointer: None,
            advance_prob: None,
            acoustic_token: sampled.token as CodeId,
            kept_support_size: sampled.support,
            sampled_prob: sampled.prob,
        });
        if let Some(row) = stepper.prompt_attention() {
            attention.push(row);
        }
        if phonemes.len() >= budget || stepper.capacity_left() <= 1 {
            break;
        }
        logits = stepper.step(sampled.token as CodeId, phoneme)?;
    }

    Ok(RawDecode {
        block_codes,
        phonemes,
        path: None,
        status,
        audit,
        attention: if attention.is_empty() {
            None
        } else {
            Some(attention)
        },
    })
}

/// Force the pointer schedule to a preset alignment (downsampled to the block
/// rate); acoustic tokens are still sampled. The resulting path equals the
/// forced schedule exactly and the emitted step count is a pure function of
/// the preset.
pub fn prosody_transfer<S: Scalar, M: ArStepper<S>>(
    stepper: &mut M,
    session: &DecodeSession,
    preset: &AlignedPhonemeSeq,
    block_rate: usize,
) -> Result<RawDecode> {
    session.validate()?;
    let blocks = preset.downsample(block_rate)?;
    let schedule: Vec<(u32, PhonemeId)> = blocks
        .runs()
        .iter()
        .enumerate()
        .flat_map(|(i, &(p, n))| std::iter::repeat((i as u32, p)).take(n))
        .collect();
    if schedule.len() > session.budget() {
        return Err(Error::Capacity(format!(
            "preset needs {} steps, budget is {}",
            schedule.len(),
            session.budget()
        )));
    }
    if schedule.len() + 1 > stepper.capacity_left() {
        return Err(Error::Capacity(format!(
            "preset needs {} steps, model positions left: {}",
            schedule.len(),
            stepper.capacity_left()
        )));
    }
    let mut rng = rng_from_seed(session.seed);

    // The prompt's target text is the preset's phoneme sequence.
    let mut full_prompt = session.prompt_phonemes.clone();
    full_prompt.extend(blocks.run_phonemes());
    let mut logits = stepper.prime(&full_prompt, &session.prompt_pairs)?;

    let mut block_codes = Vec::new();
    let mut phonemes = Vec::new();
    let mut positions = Vec::new();
    let mut audit = Vec::new();
    for &(pos, phoneme) in &schedule {
        let sampled = sample_top_p(&logits.acoustic, session.top_p, &mut rng)?;
        block_codes.push(sampled.token as CodeId);
        phonemes.push(phoneme);
        positions.push(pos);
        audit.push(AuditRecord {
            step: positions.len(),
            pointer: Some(pos),
            advance_prob: None,
            acoustic_token: sampled.token as CodeId,
            kept_support_size: sampled.support,
            sampled_prob: sampled.prob,
        });
        if positions.len() < schedule.len() {
            logits = stepper.step(sampled.token as CodeId, phoneme)?;
        }
    }
    Ok(RawDecode {
        block_codes,
        phonemes,
        path: Some(AlignmentPath { positions }),
        status: DecodeStatus::Complete,
        audit,
        attention: None,
    })
}

/// Repeat each block-rate code m times to recover the full frame rate.
pub fn repeat_expand<T: Copy>(block: &[T], m: usize) -> Vec<T> {
    block
        .iter()
        .flat_map(|&c| std::iter::repeat(c).take(m))
        .collect()
}

/// Greedy NAR completion: fill layers 2..8 one layer at a time, argmax per
/// frame, conditioning each layer on everything below it.
pub fn nar_complete<S: Scalar>(
    nar: &LmWeights<S>,
    layer1_full: &[CodeId],
    aligned_full: &[PhonemeId],
    merge: &MergeConfig,
) -> Result<CodeMatrix> {
    if layer1_full.len() != aligned_full.len() {
        return Err(Error::invalid(format!(
            "layer-1 length {} != alignment length {}",
            layer1_full.len(),
            aligned_full.len()
        )));
    }
    if layer1_full.is_empty() {
        return Err(Error::invalid("cannot complete an empty code stream"));
    }
    let t = layer1_full.len();
    let mut rows: Vec<Vec<CodeId>> = vec![layer1_full.to_vec()];
    for n in 2..=QUANT_LAYERS {
        let batch = NarBatch {
            aligned: aligned_full.to_vec(),
            context: rows.clone(),
            target_layer: n,
            targets: vec![0; t],
        };
        let logits = nar_forward(nar, &batch)?;
        let mut row = Vec::with_capacity(t);
        for r in 0..t {
            let mut best = 0usize;
            let mut best_v = S::neg_infinity();
            for (idx, &v) in logits.row(r).iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = idx;
                }
            }
            row.push(best as CodeId);
        }
        rows.push(row);
    }
    CodeMatrix::new(rows, merge.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    // Scripted stepper: fixed acoustic logits, per-step phoneme logits from a
    // closure over the step index.
    struct Scripted {
        vocab_p: usize,
        vocab_a: usize,
        step: usize,
        capacity: usize,
        phoneme_fn: Box<dyn Fn(usize) -> Vec<f64>>,
    }

    impl Scripted {
        fn uniform(vocab_a: usize, vocab_p: usize, capacity: usize) -> Self {
            Scripted {
                vocab_p,
                vocab_a,
                step: 0,
                capacity,
                phoneme_fn: Box::new(move |_| vec![0.0; vocab_p]),
            }
        }

        fn logits(&self) -> StepLogits<f64> {
            StepLogits {
                acoustic: vec![0.0; self.vocab_a],
                phoneme: (self.phoneme_fn)(self.step),
            }
        }
    }

    impl ArStepper<f64> for Scripted {
        fn prime(
            &mut self,
            _prompt: &[PhonemeId],
            _pairs: &[(CodeId, PhonemeId)],
        ) -> Result<StepLogits<f64>> {
            self.step = 0;
            Ok(self.logits())
        }
        fn step(&mut self, _a: CodeId, _p: PhonemeId) -> Result<StepLogits<f64>> {
            self.step += 1;
            self.capacity -= 1;
            Ok(self.logits())
        }
        fn capacity_left(&self) -> usize {
            self.capacity
        }
        fn prompt_attention(&self) -> Option<Vec<f64>> {
            None
        }
    }

    fn session(target: Vec<PhonemeId>, top_p: f64, seed: u64) -> DecodeSession {
        DecodeSession {
            prompt_phonemes: vec![0],
            prompt_pairs: vec![(0, 0)],
            target_phonemes: target,
            top_p,
            mode: AdvanceMode::RestrictedSoftmax,
            step_budget: 0,
            expected_steps: 8,
            seed,
        }
    }

    #[test]
    fn advance_probability_algebra() {
        let mut rng = rng_from_seed(0);
        // Equal logits for stay (tok 1) and advance (tok 2): prob 0.5.
        let logits = vec![0.0f64, 1.0, 1.0, -5.0];
        let out = advance_decision(&logits, &[1, 2], 0, 3, AdvanceMode::RestrictedSoftmax, &mut rng)
            .unwrap();
        assert!((out.advance_prob - 0.5).abs() < 1e-12);

        // Advance logit = stay logit + ln 3: prob 0.75.
        let logits = vec![0.0f64, 1.0, 1.0 + 3.0f64.ln(), -5.0];
        let out = advance_decision(&logits, &[1, 2], 0, 3, AdvanceMode::RestrictedSoftmax, &mut rng)
            .unwrap();
        assert!((out.advance_prob - 0.75).abs() < 1e-12);
    }

    #[test]
    fn eq5_literal_with_zero_stay_share_is_half() {
        let mut rng = rng_from_seed(0);
        // Stay token has essentially zero probability: e = 0, prob = 1/(1+e^0).
        let logits = vec![0.0f64, -1e9, 5.0, 0.0];
        let out =
            advance_decision(&logits, &[1, 2], 0, 3, AdvanceMode::Eq5Literal, &mut rng).unwrap();
        assert!((out.advance_prob - 0.5).abs() < 1e-9);
    }

    #[test]
    fn eq5_literal_range_matches_its_definition() {
        let mut rng = rng_from_seed(0);
        // Stay share 1 gives the lower end 1/(1+e).
        let logits = vec![0.0f64, 1e9, -1e9, 0.0];
        let out =
            advance_decision(&logits, &[1, 2], 0, 3, AdvanceMode::Eq5Literal, &mut rng).unwrap();
        assert!((out.advance_prob - 1.0 / (1.0 + std::f64::consts::E)).abs() < 1e-9);
    }

    #[test]
    fn pointer_out_of_range_errors() {
        let mut rng = rng_from_seed(0);
        let logits = vec![0.0f64; 4];
        match advance_decision(&logits, &[1], 1, 3, AdvanceMode::RestrictedSoftmax, &mut rng) {
            Err(Error::Pointer(_)) => {}
            other => panic!("expected pointer error, got {other:?}"),
        }
    }

    #[test]
    fn top_p_known_prefix() {
        // probs [0.5, 0.3, 0.2], top_p = 0.6 -> keep {0, 1}, renorm [0.625, 0.375].
        let probs = vec![0.5, 0.3, 0.2];
        let (kept, renorm) = top_p_filter(&probs, 0.6);
        assert_eq!(kept, vec![0, 1]);
        assert!((renorm[0] - 0.625).abs() < 1e-12);
        assert!((renorm[1] - 0.375).abs() < 1e-12);
    }

    #[test]
    fn tiny_top_p_is_argmax() {
        let mut rng = rng_from_seed(1);
        let logits = vec![0.1f64, 2.0, 0.3];
        for _ in 0..20 {
            let s = sample_top_p(&logits, 1e-9, &mut rng).unwrap();
            assert_eq!(s.token, 1);
            assert_eq!(s.support, 1);
        }
    }

    #[test]
    fn top_p_support_mass_invariant() {
        let mut rng = rng_from_seed(2);
        use rand::Rng;
        for _ in 0..200 {
            let n = rng.random_range(2..12);
            let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let top_p: f64 = rng.random_range(0.05..1.0);
            let probs = softmax_f64(&logits);
            let (kept, _) = top_p_filter(&probs, top_p);
            assert!(!kept.is_empty());
            let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
            assert!(mass >= top_p - 1e-12);
        }
    }

    #[test]
    fn non_finite_logits_rejected() {
        let mut rng = rng_from_seed(0);
        let logits = vec![0.0f64, f64::NAN];
        match sample_top_p(&logits, 0.5, &mut rng) {
            Err(Error::Numeric(_)) => {}
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn ma_property_examples() {
        let p = check_ma_properties(&[0, 0, 1, 1, 2], 3);
        assert!(p.locality && p.monotonicity && p.completeness);

        let p = check_ma_properties(&[0, 2, 2], 3);
        assert!(!p.locality);
        assert!(p.monotonicity);
        assert!(!p.completeness);

        let p = check_ma_properties(&[0, 1, 0], 2);
        assert!(p.locality);
        assert!(!p.monotonicity);
        assert!(!p.completeness); // covers both indices but ends at 0, not L-1
    }

    #[test]
    fn single_phoneme_target_completes_with_zero_path() {
        let mut stepper = Scripted::uniform(8, 6, 1000);
        let s = session(vec![3], 1.0, 7);
        let out = ma_decode(&mut stepper, &s, 5).unwrap();
        assert_eq!(out.status, DecodeStatus::Complete);
        let path = out.path.unwrap();
        assert!(path.positions.iter().all(|&p| p == 0));
        assert!(out.phonemes.iter().all(|&p| p == 3));
    }

    #[test]
    fn ma_decode_is_bit_reproducible() {
        let s = session(vec![1, 2, 3], 0.8, 42);
        let mut a = Scripted::uniform(8, 6, 1000);
        let mut b = Scripted::uniform(8, 6, 1000);
        let ra = ma_decode(&mut a, &s, 5).unwrap();
        let rb = ma_decode(&mut b, &s, 5).unwrap();
        assert_eq!(ra.block_codes, rb.block_codes);
        assert_eq!(ra.path, rb.path);
    }

    #[test]
    fn budget_exhaustion_truncates() {
        // Phoneme head always insists on staying: the pointer never reaches
        // the end, so the budget must fire.
        let mut stepper = Scripted {
            vocab_p: 6,
            vocab_a: 8,
            step: 0,
            capacity: 10_000,
            phoneme_fn: Box::new(|_| {
                let mut l = vec![-1e9; 6];
                l[1] = 0.0; // all mass on phoneme 1 (the first target)
                l
            }),
        };
        let mut s = session(vec![1, 2], 1.0, 3);
        s.step_budget = 12;
        let out = ma_decode(&mut stepper, &s, 5).unwrap();
        assert_eq!(out.status, DecodeStatus::Truncated);
        assert_eq!(out.block_codes.len(), 12);
    }

    #[test]
    fn baseline_and_ma_coincide_on_saturated_head() {
        // Phoneme head is one-hot on a monotone-perfect schedule: emit
        // phoneme 1, then 2, then 2, then EOS (token 5). The restriction to
        // {stay, advance} is a no-op, so both decoders must match bit for bit.
        let schedule = [1usize, 2, 2, 5];
        let make = move || Scripted {
            vocab_p: 6,
            vocab_a: 8,
            step: 0,
            capacity: 1000,
            phoneme_fn: Box::new(move |s| {
                let mut l = vec![-1e9; 6];
                l[schedule[s.min(schedule.len() - 1)]] = 1e9;
                l
            }),
        };
        let s = session(vec![1, 2], 1.0, 99);
        let mut m1 = make();
        let ma = ma_decode(&mut m1, &s, 5).unwrap();
        let mut m2 = make();
        let bl = baseline_decode(&mut m2, &s, 5).unwrap();
        assert_eq!(ma.status, DecodeStatus::Complete);
        assert_eq!(bl.status, DecodeStatus::Complete);
        assert_eq!(ma.phonemes, bl.phonemes);
        assert_eq!(ma.block_codes, bl.block_codes);
    }

    #[test]
    fn prosody_path_equals_preset_schedule() {
        let preset = AlignedPhonemeSeq::new(vec![(4, 4), (2, 2), (3, 4)]).unwrap();
        let mut stepper = Scripted::uniform(8, 6, 1000);
        let mut s = session(vec![9], 1.0, 5);
        s.step_budget = 100;
        let out = prosody_transfer(&mut stepper, &s, &preset, 2).unwrap();
        let path = out.path.unwrap();
        assert_eq!(path.positions, vec![0, 0, 1, 2, 2]);
        assert_eq!(out.phonemes, vec![4, 4, 2, 3, 3]);
        assert_eq!(out.block_codes.len(), 5);
        // Full-rate frame count recovers the (padded) preset length.
        assert_eq!(repeat_expand(&out.block_codes, 2).len(), 10);
    }

    #[test]
    fn prosody_over_budget_is_capacity_error() {
        let preset = AlignedPhonemeSeq::new(vec![(1, 40)]).unwrap();
        let mut stepper = Scripted::uniform(8, 6, 1000);
        let mut s = session(vec![9], 1.0, 5);
        s.step_budget = 3;
        match prosody_transfer(&mut stepper, &s, &preset, 2) {
            Err(Error::Capacity(_)) => {}
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn prosody_length_is_rng_independent() {
        let preset = AlignedPhonemeSeq::new(vec![(1, 5), (2, 3)]).unwrap();
        let mut lens = Vec::new();
        for seed in 0..5 {
            let mut stepper = Scripted::uniform(8, 6, 1000);
            let mut s = session(vec![9], 1.0, seed);
            s.step_budget = 100;
            let out = prosody_transfer(&mut stepper, &s, &preset, 2).unwrap();
            lens.push(out.block_codes.len());
        }
        assert!(lens.iter().all(|&l| l == lens[0]));
    }
}
