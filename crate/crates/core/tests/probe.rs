//! Scratch probes for tuning pipeline parameters. Run manually:
//!   cargo test --release -p valler-core --test probe -- --ignored --nocapture

use valler_core::bench::*;
use valler_core::codec::{MergeConfig, TrainOpts};
use valler_core::corpus::{gen_corpus_in_memory, CorpusConfig};
use valler_core::decode::AdvanceMode;
use valler_core::lm::train::*;
use valler_core::lm::LmConfig;
use valler_core::Scalar;

fn corpus(count: usize, seed: u64, noise: f64, lmin: usize, lmax: usize, dmin: usize, dmax: usize)
    -> Vec<valler_core::corpus::SyntheticUtterance<f32>>
{
    let config = CorpusConfig {
        count,
        seed,
        noise_std: noise,
        min_phonemes: lmin,
        max_phonemes: lmax,
        min_duration: dmin,
        max_duration: dmax,
        unique_phonemes: true,
        ..CorpusConfig::default()
    };
    gen_corpus_in_memory::<f32>(&config).unwrap().1
}

#[test]
#[ignore]
fn probe_merge_sweep() {
    for (noise, seed) in [(0.2f64, 1u64), (0.2, 11), (0.2, 21), (0.3, 1), (0.3, 11), (0.3, 21)] {
        let train = corpus(100, seed, noise, 4, 10, 2, 12);
        let heldout = corpus(30, seed + 1, noise, 4, 10, 2, 12);
        let opts = TrainOpts {
            k: 64,
            iters: 30,
            seed: 5,
            ..TrainOpts::default()
        };
        let t0 = std::time::Instant::now();
        let report = standard_merge_sweep(&train, &heldout, &opts).unwrap();
        println!("=== noise_std {noise} seed {seed} ({:.1}s) ===", t0.elapsed().as_secs_f64());
        println!("{}", render_merge_table(&report));
    }
}

#[test]
#[ignore]
fn probe_ar_accuracy() {
    // Fixed durations: phoneme -> code map injective, everything predictable.
    let train = corpus(80, 3, 0.0, 4, 8, 4, 4);
    let multiple = 2;
    let latents: Vec<_> = train.iter().map(|u| u.padded(multiple).0).collect();
    let merge = MergeConfig::first_layer(2);
    let copts = TrainOpts {
        k: 64,
        iters: 30,
        seed: 5,
        ..TrainOpts::default()
    };
    let (books, _) = valler_core::codec::train_codebooks(&latents, &merge, &copts).unwrap();
    let data = prepare_ar_examples(&train, &books).unwrap();

    let config = LmConfig::default();
    for steps in [800usize, 1500] {
        let opts = LmTrainOpts {
            steps,
            warmup_steps: steps / 10,
            micro_batch: 4,
            seed: 11,
            eval_utterances: 80,
            ..LmTrainOpts::default()
        };
        let t0 = std::time::Instant::now();
        let (_, report) = train_ar::<f32>(&config, &data, &opts).unwrap();
        println!(
            "steps {steps}: acoustic acc {:.4}, phoneme acc {:.4}, loss curve [{:.3} .. {:.3}], {:.1}s",
            report.final_acoustic_accuracy,
            report.final_phoneme_accuracy,
            report.loss_curve[0],
            report.loss_curve.last().unwrap(),
            t0.elapsed().as_secs_f64()
        );
    }
}

#[test]
#[ignore]
fn probe_robustness() {
    let noise = 0.0f64;
    let train = corpus(400, 7, noise, 4, 10, 2, 12);
    let test = corpus(32, 8, noise, 4, 10, 2, 12);
    let merge = MergeConfig::first_layer(2);
    let copts = TrainOpts {
        k: 64,
        iters: 30,
        seed: 5,
        ..TrainOpts::default()
    };
    let latents: Vec<_> = train.iter().map(|u| u.padded(2).0).collect();
    let (books, _) = valler_core::codec::train_codebooks(&latents, &merge, &copts).unwrap();
    let data = prepare_ar_examples(&train, &books).unwrap();
    let config = LmConfig::default();
    for steps in [2000usize] {
        let opts = LmTrainOpts {
            steps,
            warmup_steps: steps / 10,
            micro_batch: 4,
            seed: 11,
            concat_prob: 0.9,
            ..LmTrainOpts::default()
        };
        let t0 = std::time::Instant::now();
        let (w, report) = train_ar::<f32>(&config, &data, &opts).unwrap();
        println!(
            "in-dist steps {steps}: trained {:.1}s acc {:.3}/{:.3}",
            t0.elapsed().as_secs_f64(),
            report.final_acoustic_accuracy,
            report.final_phoneme_accuracy
        );
        let cases = build_cases(&data, &test, 2);
        let t0 = std::time::Instant::now();
        let sweep = robustness_sweep(
            &w,
            &cases,
            &[DecoderKind::Ma, DecoderKind::Baseline],
            &[0.3, 0.5, 0.8, 1.0],
            AdvanceMode::RestrictedSoftmax,
            99,
        )
        .unwrap();
        println!("sweep {:.1}s\n{}", t0.elapsed().as_secs_f64(), render_robustness_table(&sweep));

        // Peek at a few baseline decodes to see the failure mode.
        use valler_core::decode::{baseline_decode, DecodeSession};
        for top_p in [0.3, 1.0] {
            for (ci, case) in cases.iter().take(3).enumerate() {
                let session = DecodeSession {
                    prompt_phonemes: case.prompt_phonemes.clone(),
                    prompt_pairs: case.prompt_pairs.clone(),
                    target_phonemes: case.target_phonemes.clone(),
                    top_p,
                    mode: AdvanceMode::RestrictedSoftmax,
                    step_budget: 0,
                    expected_steps: case.expected_steps,
                    seed: 1234 + ci as u64,
                };
                let mut stepper = valler_core::lm::cache::ArSession::new(&w, false).unwrap();
                let raw = baseline_decode(&mut stepper, &session, w.config.p_eos()).unwrap();
                println!(
                    "  top_p {top_p} case {ci} [{:?}]: target {:?} emitted {:?}",
                    raw.status,
                    case.target_phonemes,
                    valler_core::bench::collapse_runs(&raw.phonemes)
                );
            }
        }
    }
}

#[test]
#[ignore]
fn probe_timing() {
    let config = LmConfig {
        max_seq: 1024,
        ..LmConfig::default()
    };
    let w = valler_core::lm::LmWeights::<f32>::new_ar(config, 1).unwrap();
    let t375 = time_ar_loop(&w, 375, 5).unwrap();
    let t750 = time_ar_loop(&w, 750, 5).unwrap();
    println!(
        "375: {:.4}s ({:.0}/s), 750: {:.4}s ({:.0}/s), ratio {:.3}",
        t375.median_s,
        t375.steps_per_sec,
        t750.median_s,
        t750.steps_per_sec,
        t750.median_s / t375.median_s
    );
    let _ = f32::as_f64; // keep Scalar import alive
}

#[test]
#[ignore]
fn probe_diag_continuation() {
    let noise = 0.0f64;
    let all = corpus(4032, 7, noise, 4, 10, 2, 12);
    let (train, test) = all.split_at(4000);
    let train = train.to_vec();
    let test = test[..8].to_vec();
    let merge = MergeConfig::first_layer(2);
    let copts = TrainOpts { k: 64, iters: 30, seed: 5, ..TrainOpts::default() };
    let latents: Vec<_> = train.iter().map(|u| u.padded(2).0).collect();
    let (books, _) = valler_core::codec::train_codebooks(&latents, &merge, &copts).unwrap();
    let data = prepare_ar_examples(&train, &books).unwrap();
    let config = LmConfig::default();
    let opts = LmTrainOpts {
        steps: 2000,
        warmup_steps: 200,
        micro_batch: 4,
        seed: 11,
        concat_prob: 0.9,
        ..LmTrainOpts::default()
    };
    let (w, report) = train_ar::<f32>(&config, &data, &opts).unwrap();
    println!("acc {:.3}/{:.3}", report.final_acoustic_accuracy, report.final_phoneme_accuracy);

    // Teacher-forced continuation: prompt = train utterance A, continuation =
    // test utterance B with its TRUE codes. Report per-step top-1 agreement.
    let test_examples = prepare_ar_examples(&test, &books).unwrap();
    let mut first_ok = 0usize;
    let mut rest_ok = 0usize;
    let mut rest_total = 0usize;
    for (ci, b) in test_examples.iter().enumerate() {
        let a = &data[ci % data.len()];
        let spliced = valler_core::lm::train::concat_ar_examples(a, b);
        let batch = valler_core::lm::model::ArBatch {
            prompt: spliced.prompt.clone(),
            acoustic: spliced.block_codes.clone(),
            aligned: spliced.block_aligned.clone(),
        };
        let logits = valler_core::lm::model::ar_forward(&w, &batch).unwrap();
        let (at, pt) = valler_core::lm::model::ar_targets(&w.config, &batch);
        let boundary = a.block_codes.len(); // first step of B's pairs
        let argmax = |row: &[f32]| {
            row.iter().enumerate().fold((0usize, f32::NEG_INFINITY), |acc, (i, &v)| {
                if v > acc.1 { (i, v) } else { acc }
            }).0
        };
        let p_hat = argmax(logits.phoneme.row(boundary));
        let a_hat = argmax(logits.acoustic.row(boundary));
        println!(
            "case {ci}: B[0] phoneme {} predicted {} | code {} predicted {}",
            pt[boundary], p_hat, at[boundary], a_hat
        );
        if p_hat == pt[boundary] as usize { first_ok += 1; }
        for s in boundary + 1..batch.steps() {
            if argmax(logits.phoneme.row(s)) == pt[s] as usize { rest_ok += 1; }
            rest_total += 1;
        }
    }
    println!(
        "boundary phoneme top-1: {}/{}; later steps: {}/{}",
        first_ok, test_examples.len(), rest_ok, rest_total
    );
}
