//! Adam training with linear warm-up / linear decay, teacher forcing, and
//! deterministic batch assembly from encoded corpus utterances.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::codec::{encode, CodeId, CodebookSet};
use crate::corpus::{concat_utterances, PhonemeId, SyntheticUtterance};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, rng_from_seed, Stream};

use super::model::{
    ar_forward, ar_targets, ar_train_step, argmax_accuracy, nar_forward, nar_train_step, ArBatch,
    Dropout, NarBatch,
};
use super::tensor::Tensor;
use super::{LmConfig, LmWeights, ModelKind, QUANT_LAYERS};

#[derive(Debug, Clone, Serialize)]
pub struct LmTrainOpts {
    pub steps: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    /// Sequences accumulated per optimizer step.
    pub micro_batch: usize,
    /// Phoneme-head loss weight (AR only).
    pub lambda: f64,
    pub seed: u64,
    /// Optimizer steps per loss-curve window.
    pub eval_every: usize,
    pub eval_utterances: usize,
    pub clip_norm: Option<f64>,
    pub weight_decay: f64,
    /// Probability of splicing two utterances into one AR sequence, which
    /// teaches continuation across a prompt boundary.
    pub concat_prob: f64,
}

impl Default for LmTrainOpts {
    fn default() -> Self {
        LmTrainOpts {
            steps: 1200,
            lr_peak: 1e-3,
            warmup_steps: 120,
            micro_batch: 4,
            lambda: 1.0,
            seed: 0,
            eval_every: 50,
            eval_utterances: 16,
            clip_norm: Some(1.0),
            weight_decay: 0.0,
            concat_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub kind: ModelKind,
    pub steps: usize,
    pub seed: u64,
    /// Mean training loss per evaluation window.
    pub loss_curve: Vec<f64>,
    pub final_acoustic_accuracy: f64,
    pub final_phoneme_accuracy: f64,
    pub param_count: usize,
    pub config_hash: String,
    pub wall_seconds: f64,
}

/// Per-utterance AR streams precomputed once: block-rate layer-1 codes and
/// the matching block-rate aligned phonemes.
#[derive(Debug, Clone)]
pub struct ArExample {
    pub prompt: Vec<PhonemeId>,
    pub block_codes: Vec<CodeId>,
    pub block_aligned: Vec<PhonemeId>,
}

/// Per-utterance NAR streams: full-rate aligned phonemes and all 8 code rows.
#[derive(Debug, Clone)]
pub struct NarExample {
    pub aligned: Vec<PhonemeId>,
    pub rows: Vec<Vec<CodeId>>,
}

/// Encode an utterance and reduce row 1 to the block rate.
pub fn ar_example<S: Scalar>(
    utt: &SyntheticUtterance<S>,
    books: &CodebookSet<S>,
) -> Result<ArExample> {
    let multiple = books.merge.frame_multiple();
    let (frames, alignment) = utt.padded(multiple);
    let codes = encode(&frames, books)?;
    let m = books.merge.rate(0);
    let block_codes: Vec<CodeId> = codes.row(0).iter().copied().step_by(m).collect();
    let block_aligned = alignment.downsample(m)?.expand();
    if block_aligned.len() != block_codes.len() {
        return Err(Error::invalid(format!(
            "block alignment length {} != block code length {} (degenerate downsample)",
            block_aligned.len(),
            block_codes.len()
        )));
    }
    Ok(ArExample {
        prompt: utt.phonemes.symbols().to_vec(),
        block_codes,
        block_aligned,
    })
}

pub fn nar_example<S: Scalar>(
    utt: &SyntheticUtterance<S>,
    books: &CodebookSet<S>,
) -> Result<NarExample> {
    let multiple = books.merge.frame_multiple();
    let (frames, alignment) = utt.padded(multiple);
    let codes = encode(&frames, books)?;
    Ok(NarExample {
        aligned: alignment.expand(),
        rows: (0..QUANT_LAYERS).map(|d| codes.row(d).to_vec()).collect(),
    })
}

pub fn prepare_ar_examples<S: Scalar>(
    utts: &[SyntheticUtterance<S>],
    books: &CodebookSet<S>,
) -> Result<Vec<ArExample>> {
    use rayon::prelude::*;
    utts.par_iter().map(|u| ar_example(u, books)).collect()
}

pub fn prepare_nar_examples<S: Scalar>(
    utts: &[SyntheticUtterance<S>],
    books: &CodebookSet<S>,
) -> Result<Vec<NarExample>> {
    use rayon::prelude::*;
    utts.par_iter().map(|u| nar_example(u, books)).collect()
}

/// Splice two utterances end to end (padding-safe because both sides are
/// already padded to the merge block size).
pub fn concat_ar_examples(a: &ArExample, b: &ArExample) -> ArExample {
    let mut prompt = a.prompt.clone();
    prompt.extend_from_slice(&b.prompt);
    let mut block_codes = a.block_codes.clone();
    block_codes.extend_from_slice(&b.block_codes);
    let mut block_aligned = a.block_aligned.clone();
    block_aligned.extend_from_slice(&b.block_aligned);
    ArExample {
        prompt,
        block_codes,
        block_aligned,
    }
}

fn ar_batch_from(example: &ArExample) -> ArBatch {
    ArBatch {
        prompt: example.prompt.clone(),
        acoustic: example.block_codes.clone(),
        aligned: example.block_aligned.clone(),
    }
}

struct Adam<S: Scalar> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
}

impl<S: Scalar> Adam<S> {
    fn new(w: &LmWeights<S>) -> Self {
        let shapes: Vec<(usize, usize)> = w
            .store
            .ids()
            .map(|id| {
                let t = w.store.value(id);
                (t.rows, t.cols)
            })
            .collect();
        Adam {
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    fn step(&mut self, w: &mut LmWeights<S>, lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (S::from_f64(self.beta1), S::from_f64(self.beta2));
        let (ob1, ob2) = (S::from_f64(1.0 - self.beta1), S::from_f64(1.0 - self.beta2));
        let eps = S::from_f64(self.eps);
        let step_size = S::from_f64(lr / bc1);
        let bc2_sqrt = S::from_f64(bc2.sqrt());
        let wd = S::from_f64(lr * weight_decay);
        let (values, grads) = w.store.values_and_grads();
        for ((val, grad), (m, v)) in values
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..val.data.len() {
                let g = grad.data[i];
                m.data[i] = b1 * m.data[i] + ob1 * g;
                v.data[i] = b2 * v.data[i] + ob2 * g * g;
                let denom = (v.data[i].sqrt() / bc2_sqrt) + eps;
                let mut x = val.data[i];
                if weight_decay > 0.0 {
                    x = x - wd * x;
                }
                val.data[i] = x - step_size * m.data[i] / denom;
            }
        }
    }
}

/// Linear warm-up to `lr_peak`, then linear decay toward zero.
pub fn lr_at(step: usize, opts: &LmTrainOpts) -> f64 {
    let warm = opts.warmup_steps.max(1);
    if step <= warm {
        opts.lr_peak * step as f64 / warm as f64
    } else if opts.steps <= warm {
        opts.lr_peak
    } else {
        let frac = (opts.steps - step) as f64 / (opts.steps - warm) as f64;
        opts.lr_peak * frac.max(0.0)
    }
}

fn scale_and_clip<S: Scalar>(w: &mut LmWeights<S>, scale: f64, clip: Option<f64>) {
    let mut norm_sq = 0.0f64;
    for id in w.store.ids().collect::<Vec<_>>() {
        for g in w.store.grad_mut(id).data.iter_mut() {
            *g = *g * S::from_f64(scale);
            let gv = g.as_f64();
            norm_sq += gv * gv;
        }
    }
    if let Some(c) = clip {
        let norm = norm_sq.sqrt();
        if norm > c {
            let f = S::from_f64(c / norm);
            for id in w.store.ids().collect::<Vec<_>>() {
                for g in w.store.grad_mut(id).data.iter_mut() {
                    *g = *g * f;
                }
            }
        }
    }
}

fn shuffled_order(len: usize, epoch: u64, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = rng_from_seed(derive_seed(seed, Stream::TrainOrder, epoch));
    order.shuffle(&mut rng);
    order
}

/// Teacher-forced argmax accuracy of both AR heads over the first `limit`
/// examples.
pub fn ar_accuracy<S: Scalar>(
    w: &LmWeights<S>,
    data: &[ArExample],
    limit: usize,
) -> Result<(f64, f64)> {
    let mut a_correct = 0usize;
    let mut a_total = 0usize;
    let mut p_correct = 0usize;
    let mut p_total = 0usize;
    for example in data.iter().take(limit.max(1)) {
        let batch = ar_batch_from(example);
        let logits = ar_forward(w, &batch)?;
        let (a_targets, p_targets) = ar_targets(&w.config, &batch);
        let (c, t) = argmax_accuracy(&logits.acoustic, &a_targets, w.config.a_pad());
        a_correct += c;
        a_total += t;
        let (c, t) = argmax_accuracy(&logits.phoneme, &p_targets, w.config.p_pad());
        p_correct += c;
        p_total += t;
    }
    Ok((
        a_correct as f64 / a_total.max(1) as f64,
        p_correct as f64 / p_total.max(1) as f64,
    ))
}

/// Per-frame argmax accuracy of the NAR head, cycling target layers.
pub fn nar_accuracy<S: Scalar>(
    w: &LmWeights<S>,
    data: &[NarExample],
    limit: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (i, example) in data.iter().take(limit.max(1)).enumerate() {
        let n = 2 + (i % (QUANT_LAYERS - 1));
        let batch = nar_batch_from(example, n);
        let logits = nar_forward(w, &batch)?;
        let (c, t) = argmax_accuracy(&logits, &batch.targets, w.config.a_pad());
        correct += c;
        total += t;
    }
    Ok(correct as f64 / total.max(1) as f64)
}

fn nar_batch_from(example: &NarExample, n: usize) -> NarBatch {
    NarBatch {
        aligned: example.aligned.clone(),
        context: example.rows[..n - 1].to_vec(),
        target_layer: n,
        targets: example.rows[n - 1].clone(),
    }
}

pub fn train_ar<S: Scalar>(
    config: &LmConfig,
    data: &[ArExample],
    opts: &LmTrainOpts,
) -> Result<(LmWeights<S>, TrainReport)> {
    if data.is_empty() {
        return Err(Error::invalid("AR training needs a non-empty corpus"));
    }
    let start = std::time::Instant::now();
    let mut w = LmWeights::<S>::new_ar(config.clone(), opts.seed)?;
    let mut adam = Adam::new(&w);
    let mut sample_rng = rng_from_seed(derive_seed(opts.seed, Stream::TrainOrder, u64::MAX));
    let mut dropout_rng = rng_from_seed(derive_seed(opts.seed, Stream::Dropout, 0));

    let mut order = shuffled_order(data.len(), 0, opts.seed);
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    let mut window_sum = 0.0f64;
    let mut window_count = 0usize;
    let mut loss_curve = Vec::new();

    for step in 1..=opts.steps {
        for _ in 0..opts.micro_batch {
            if cursor >= order.len() {
                epoch += 1;
                order = shuffled_order(data.len(), epoch, opts.seed);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let concat = sample_rng.random::<f64>() < opts.concat_prob;
            let partner = sample_rng.random_range(0..data.len());
            let mut example = if concat {
                concat_ar_examples(&data[idx], &data[partner])
            } else {
                data[idx].clone()
            };
            // Fall back to the single utterance if the splice is too long.
            if example.prompt.len() + example.block_codes.len() + 1 > config.max_seq {
                example = data[idx].clone();
            }
            let batch = ar_batch_from(&example);
            let drop = if config.dropout > 0.0 {
                Some(Dropout {
                    rng: &mut dropout_rng,
                    p: config.dropout,
                })
            } else {
                None
            };
            let parts = ar_train_step(&mut w, &batch, opts.lambda, drop)?;
            if !parts.total.is_finite() {
                return Err(Error::TrainingFailure { step });
            }
            window_sum += parts.total;
            window_count += 1;
        }
        scale_and_clip(&mut w, 1.0 / opts.micro_batch as f64, opts.clip_norm);
        adam.step(&mut w, lr_at(step, opts), opts.weight_decay);
        w.store.zero_grads();
        if !w.store.all_finite() {
            return Err(Error::TrainingFailure { step });
        }
        if step % opts.eval_every == 0 || step == opts.steps {
            loss_curve.push(window_sum / window_count.max(1) as f64);
            window_sum = 0.0;
            window_count = 0;
        }
    }

    let (a_acc, p_acc) = ar_accuracy(&w, data, opts.eval_utterances)?;
    let report = TrainReport {
        kind: ModelKind::Ar,
        steps: opts.steps,
        seed: opts.seed,
        loss_curve,
        final_acoustic_accuracy: a_acc,
        final_phoneme_accuracy: p_acc,
        param_count: w.param_count(),
        config_hash: format!("{:016x}", config.config_hash()),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((w, report))
}

pub fn train_nar<S: Scalar>(
    config: &LmConfig,
    data: &[NarExample],
    opts: &LmTrainOpts,
) -> Result<(LmWeights<S>, TrainReport)> {
    if data.is_empty() {
        return Err(Error::invalid("NAR training needs a non-empty corpus"));
    }
    let start = std::time::Instant::now();
    let mut w = LmWeights::<S>::new_nar(config.clone(), opts.seed)?;
    let mut adam = Adam::new(&w);
    let mut sample_rng = rng_from_seed(derive_seed(opts.seed, Stream::TrainOrder, u64::MAX));
    let mut dropout_rng = rng_from_seed(derive_seed(opts.seed, Stream::Dropout, 0));

    let mut order = shuffled_order(data.len(), 0, opts.seed);
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    let mut window_sum = 0.0f64;
    let mut window_count = 0usize;
    let mut loss_curve = Vec::new();

    for step in 1..=opts.steps {
        for _ in 0..opts.micro_batch {
            if cursor >= order.len() {
                epoch += 1;
                order = shuffled_order(data.len(), epoch, opts.seed);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            // Target layer drawn uniformly per sample.
            let n = sample_rng.random_range(2..=QUANT_LAYERS);
            let batch = nar_batch_from(&data[idx], n);
            let drop = if config.dropout > 0.0 {
                Some(Dropout {
                    rng: &mut dropout_rng,
                    p: config.dropout,
                })
            } else {
                None
            };
            let parts = nar_train_step(&mut w, &batch, drop)?;
            if !parts.total.is_finite() {
                return Err(Error::TrainingFailure { step });
            }
            window_sum += parts.total;
            window_count += 1;
        }
        scale_and_clip(&mut w, 1.0 / opts.micro_batch as f64, opts.clip_norm);
        adam.step(&mut w, lr_at(step, opts), opts.weight_decay);
        w.store.zero_grads();
        if !w.store.all_finite() {
            return Err(Error::TrainingFailure { step });
        }
        if step % opts.eval_every == 0 || step == opts.steps {
            loss_curve.push(window_sum / window_count.max(1) as f64);
            window_sum = 0.0;
            window_count = 0;
        }
    }

    let acc = nar_accuracy(&w, data, opts.eval_utterances)?;
    let report = TrainReport {
        kind: ModelKind::Nar,
        steps: opts.steps,
        seed: opts.seed,
        loss_curve,
        final_acoustic_accuracy: acc,
        final_phoneme_accuracy: 0.0,
        param_count: w.param_count(),
        config_hash: format!("{:016x}", config.config_hash()),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((w, report))
}

/// Build a full utterance by splicing two corpus entries (used by callers
/// assembling cross-sentence decode sessions).
pub fn spliced_utterance<S: Scalar>(
    a: &SyntheticUtterance<S>,
    b: &SyntheticUtterance<S>,
    v_p: u16,
) -> SyntheticUtterance<S> {
    concat_utterances(a, b, v_p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_shape() {
        let opts = LmTrainOpts {
            steps: 100,
            warmup_steps: 10,
            lr_peak: 1.0,
            ..LmTrainOpts::default()
        };
        assert!(lr_at(1, &opts) < lr_at(5, &opts));
        assert!((lr_at(10, &opts) - 1.0).abs() < 1e-12);
        assert!(lr_at(50, &opts) < 1.0);
        assert!(lr_at(100, &opts) < lr_at(50, &opts));
        assert!(lr_at(100, &opts) >= 0.0);
    }

    fn tiny_config() -> LmConfig {
        LmConfig {
            layers: 1,
            heads: 2,
            dim: 16,
            ffn_dim: 32,
            dropout: 0.1,
            max_seq: 64,
            acoustic_k: 8,
            phoneme_vocab: 6,
        }
    }

    fn tiny_data() -> Vec<ArExample> {
        vec![
            ArExample {
                prompt: vec![0, 1],
                block_codes: vec![1, 1, 2, 2],
                block_aligned: vec![0, 0, 1, 1],
            },
            ArExample {
                prompt: vec![2, 3],
                block_codes: vec![3, 3, 4, 4],
                block_aligned: vec![2, 2, 3, 3],
            },
        ]
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let opts = LmTrainOpts {
            steps: 12,
            warmup_steps: 3,
            micro_batch: 2,
            eval_every: 6,
            seed: 42,
            ..LmTrainOpts::default()
        };
        let (w1, r1) = train_ar::<f32>(&tiny_config(), &tiny_data(), &opts).unwrap();
        let (w2, r2) = train_ar::<f32>(&tiny_config(), &tiny_data(), &opts).unwrap();
        assert_eq!(r1.loss_curve, r2.loss_curve);
        for id in w1.store.ids() {
            assert_eq!(w1.store.value(id).data, w2.store.value(id).data);
        }
    }

    #[test]
    fn training_loss_decreases_on_fixed_data() {
        let opts = LmTrainOpts {
            steps: 60,
            warmup_steps: 6,
            micro_batch: 2,
            eval_every: 20,
            seed: 7,
            concat_prob: 0.0,
            ..LmTrainOpts::default()
        };
        let (_, report) = train_ar::<f32>(&tiny_config(), &tiny_data(), &opts).unwrap();
        assert!(report.loss_curve.len() >= 2);
        assert!(
            report.loss_curve[1] < report.loss_curve[0],
            "loss did not decrease: {:?}",
            report.loss_curve
        );
    }

    #[test]
    fn diverging_lr_reports_training_failure() {
        let opts = LmTrainOpts {
            steps: 60,
            warmup_steps: 1,
            lr_peak: 1e30,
            clip_norm: None,
            micro_batch: 2,
            seed: 1,
            ..LmTrainOpts::default()
        };
        match train_ar::<f32>(&tiny_config(), &tiny_data(), &opts) {
            Err(Error::TrainingFailure { .. }) => {}
            Ok(_) => panic!("expected divergence"),
            Err(e) => panic!("unexpected error {e:?}"),
        }
    }
}
