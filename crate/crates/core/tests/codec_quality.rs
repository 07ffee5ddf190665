//! Reconstruction-quality checks on trained codebooks.

use valler_core::codec::{
    decode, decode_prefix, encode, reconstruction_snr, train_codebooks, MergeConfig, TrainOpts,
};
use valler_core::corpus::{gen_corpus_in_memory, CorpusConfig};

#[test]
fn eight_layer_decode_beats_single_layer() {
    let config = CorpusConfig {
        count: 40,
        seed: 17,
        noise_std: 0.3,
        ..CorpusConfig::default()
    };
    let (_, utts) = gen_corpus_in_memory::<f32>(&config).unwrap();
    let merge = MergeConfig::first_layer(2);
    let opts = TrainOpts {
        k: 32,
        iters: 20,
        seed: 3,
        ..TrainOpts::default()
    };
    let latents: Vec<_> = utts.iter().map(|u| u.padded(2).0).collect();
    let (books, _) = train_codebooks(&latents[..30], &merge, &opts).unwrap();

    let mut full_better = 0;
    for z in &latents[30..] {
        let c = encode(z, &books).unwrap();
        let zhat_full = decode(&c, &books).unwrap();
        let zhat_one = decode_prefix(&c, &books, 1).unwrap();
        let snr_full = reconstruction_snr(z, &zhat_full).unwrap();
        let snr_one = reconstruction_snr(z, &zhat_one).unwrap();
        if snr_full > snr_one {
            full_better += 1;
        }
    }
    assert_eq!(
        full_better,
        latents.len() - 30,
        "full decode must beat the 1-layer decode on every held-out utterance"
    );
}

#[test]
fn merged_encode_codes_decode_without_error() {
    let config = CorpusConfig {
        count: 10,
        seed: 19,
        noise_std: 0.2,
        ..CorpusConfig::default()
    };
    let (_, utts) = gen_corpus_in_memory::<f32>(&config).unwrap();
    let merge = MergeConfig::first_n_layers(4, 2);
    let opts = TrainOpts {
        k: 16,
        iters: 10,
        seed: 3,
        ..TrainOpts::default()
    };
    let latents: Vec<_> = utts.iter().map(|u| u.padded(2).0).collect();
    let (books, _) = train_codebooks(&latents, &merge, &opts).unwrap();
    for z in &latents {
        let c = encode(z, &books).unwrap();
        decode(&c, &books).unwrap();
    }
}
