//! Central finite-difference oracle for the analytic gradients of both model
//! losses, run at f64 on the frozen tiny configuration.

use rand::Rng;
use valler_core::lm::model::{
    ar_loss_value, ar_train_step, nar_loss_value, nar_train_step, ArBatch, NarBatch,
};
use valler_core::lm::{LmConfig, LmWeights};
use valler_core::seed::rng_from_seed;

fn tiny_config() -> LmConfig {
    LmConfig {
        layers: 2,
        heads: 2,
        dim: 16,
        ffn_dim: 32,
        dropout: 0.0,
        max_seq: 64,
        acoustic_k: 8,
        phoneme_vocab: 6,
    }
}

fn ar_batch() -> ArBatch {
    ArBatch {
        prompt: vec![0, 1, 2, 4],
        acoustic: vec![3, 5, 1, 7, 2, 2],
        aligned: vec![0, 0, 1, 1, 2, 4],
    }
}

fn nar_batch() -> NarBatch {
    NarBatch {
        aligned: vec![0, 1, 1, 2, 3, 3, 4, 4],
        context: vec![
            vec![1, 2, 3, 4, 5, 6, 7, 0],
            vec![0, 0, 1, 1, 2, 2, 3, 3],
        ],
        target_layer: 3,
        targets: vec![1, 2, 3, 4, 5, 6, 7, 0],
    }
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Check >= `samples` randomly chosen parameters of `w` against central
/// differences of `loss_fn`. Gradients must already be accumulated in `w`.
fn check_sampled_params(
    w: &mut LmWeights<f64>,
    loss_fn: &dyn Fn(&LmWeights<f64>) -> f64,
    samples: usize,
    seed: u64,
    label: &str,
) {
    let ids: Vec<_> = w.store.ids().collect();
    let mut rng = rng_from_seed(seed);
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    while checked < samples {
        let id = ids[rng.random_range(0..ids.len())];
        let len = w.store.value(id).data.len();
        let idx = rng.random_range(0..len);
        let analytic = w.store.grad(id).data[idx];
        let orig = w.store.value(id).data[idx];
        let h = 1e-5 * orig.abs().max(1.0);

        w.store.value_mut(id).data[idx] = orig + h;
        let plus = loss_fn(w);
        w.store.value_mut(id).data[idx] = orig - h;
        let minus = loss_fn(w);
        w.store.value_mut(id).data[idx] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        // Skip parameters the loss genuinely does not touch (unused embedding
        // rows); both sides must agree they are zero.
        if numeric.abs() < 1e-12 && analytic.abs() < 1e-12 {
            continue;
        }
        let rel = relative_error(numeric, analytic);
        worst = worst.max(rel);
        assert!(
            rel < 1e-4,
            "{label}: param {} index {idx}: analytic {analytic:.10e} vs numeric {numeric:.10e} (rel {rel:.3e})",
            w.store.name(id),
        );
        checked += 1;
    }
    println!("{label}: {checked} parameters checked, worst relative error {worst:.3e}");
}

#[test]
fn ar_loss_gradients_match_finite_differences() {
    let mut w = LmWeights::<f64>::new_ar(tiny_config(), 11).unwrap();
    let batch = ar_batch();
    let lambda = 1.0;
    w.store.zero_grads();
    ar_train_step(&mut w, &batch, lambda, None).unwrap();
    let loss_fn = move |w: &LmWeights<f64>| ar_loss_value(w, &ar_batch(), lambda).unwrap().total;
    check_sampled_params(&mut w, &loss_fn, 80, 101, "ar-gradcheck");
}

#[test]
fn ar_loss_gradients_with_phoneme_weighting() {
    let mut w = LmWeights::<f64>::new_ar(tiny_config(), 13).unwrap();
    let batch = ar_batch();
    let lambda = 0.5;
    w.store.zero_grads();
    ar_train_step(&mut w, &batch, lambda, None).unwrap();
    let loss_fn = move |w: &LmWeights<f64>| ar_loss_value(w, &ar_batch(), lambda).unwrap().total;
    check_sampled_params(&mut w, &loss_fn, 32, 103, "ar-gradcheck-lambda");
}

#[test]
fn nar_loss_gradients_match_finite_differences() {
    let mut w = LmWeights::<f64>::new_nar(tiny_config(), 17).unwrap();
    let batch = nar_batch();
    w.store.zero_grads();
    nar_train_step(&mut w, &batch, None).unwrap();
    let loss_fn = move |w: &LmWeights<f64>| nar_loss_value(w, &nar_batch()).unwrap().total;
    check_sampled_params(&mut w, &loss_fn, 80, 107, "nar-gradcheck");
}

#[test]
fn tied_parameter_gradient_includes_both_roles() {
    // An n=4 batch reads embedding tables 1..3 (table 3 doubles as the head
    // of layer 2) and predicts through the layer-4 head (the embedding table
    // of layer 5). Sampling across all parameters covers slots serving both
    // roles; finite differences on the single storage slot see the sum.
    let mut w = LmWeights::<f64>::new_nar(tiny_config(), 19).unwrap();
    let batch = NarBatch {
        aligned: vec![0, 1, 2, 3],
        context: vec![
            vec![1, 2, 3, 4],
            vec![0, 1, 0, 1],
            vec![7, 6, 5, 4],
        ],
        target_layer: 4,
        targets: vec![1, 2, 3, 4],
    };
    w.store.zero_grads();
    nar_train_step(&mut w, &batch, None).unwrap();
    let loss_fn = move |w: &LmWeights<f64>| {
        nar_loss_value(
            w,
            &NarBatch {
                aligned: vec![0, 1, 2, 3],
                context: vec![
                    vec![1, 2, 3, 4],
                    vec![0, 1, 0, 1],
                    vec![7, 6, 5, 4],
                ],
                target_layer: 4,
                targets: vec![1, 2, 3, 4],
            },
        )
        .unwrap()
        .total
    };
    check_sampled_params(&mut w, &loss_fn, 48, 109, "nar-tied-gradcheck");
}
