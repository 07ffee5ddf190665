//! Convergence on the fully deterministic corpus: fixed durations make the
//! phoneme -> code map injective and every next token predictable, so
//! teacher-forced accuracy must approach 1. The corpus construction itself is
//! the oracle.

use valler_core::codec::{train_codebooks, MergeConfig, TrainOpts};
use valler_core::corpus::{gen_corpus_in_memory, CorpusConfig};
use valler_core::lm::train::{prepare_ar_examples, train_ar, LmTrainOpts};
use valler_core::lm::LmConfig;

#[test]
fn ar_reaches_99_percent_on_deterministic_corpus() {
    let config = CorpusConfig {
        count: 80,
        seed: 3,
        noise_std: 0.0,
        min_phonemes: 4,
        max_phonemes: 8,
        min_duration: 4,
        max_duration: 4,
        ..CorpusConfig::default()
    };
    let (_, corpus) = gen_corpus_in_memory::<f32>(&config).unwrap();

    let merge = MergeConfig::first_layer(2);
    let copts = TrainOpts {
        k: 64,
        iters: 30,
        seed: 5,
        ..TrainOpts::default()
    };
    let latents: Vec<_> = corpus.iter().map(|u| u.padded(2).0).collect();
    let (books, _) = train_codebooks(&latents, &merge, &copts).unwrap();
    let data = prepare_ar_examples(&corpus, &books).unwrap();

    let opts = LmTrainOpts {
        steps: 1500,
        warmup_steps: 150,
        micro_batch: 4,
        seed: 11,
        eval_utterances: 80,
        ..LmTrainOpts::default()
    };
    let (_, report) = train_ar::<f32>(&LmConfig::default(), &data, &opts).unwrap();
    println!(
        "teacher-forced accuracy: acoustic {:.4}, phoneme {:.4}",
        report.final_acoustic_accuracy, report.final_phoneme_accuracy
    );
    assert!(
        report.final_acoustic_accuracy >= 0.99,
        "next-acoustic accuracy {:.4} < 0.99",
        report.final_acoustic_accuracy
    );
    // Loss strictly decreases over the first evaluation windows.
    assert!(report.loss_curve.len() >= 2);
    assert!(
        report.loss_curve[1] < report.loss_curve[0],
        "loss curve did not decrease: {:?}",
        &report.loss_curve[..2]
    );
}
