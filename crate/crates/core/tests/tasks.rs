mod common;

use modprec_core::tasks::{covariance_trace_estimate, Samples, TaskKind};
use modprec_core::{Matrix, Modality, ModalityTaskSpec, Task};
use proptest::prelude::*;
use rand::Rng;

fn small_token(seed: u64) -> ModalityTaskSpec {
    ModalityTaskSpec {
        vocab_image: 24,
        vocab_text: 20,
        embed_dim: 6,
        seq_len: 8,
        seed,
        ..ModalityTaskSpec::toy_token()
    }
}

/// Central-difference check of `coords` random coordinates; returns the worst
/// relative error.
fn finite_difference_error(task: &Task, params: &[Matrix], index: u64, coords: usize) -> f64 {
    let batch = task.sample_micro_batch(index, 4);
    let analytic = task.loss_and_grad(params, &batch).unwrap().grads;
    let mut r = common::rng(index ^ 0xfd);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let t = r.random_range(0..params.len());
        let (i, j) = (r.random_range(0..params[t].rows()), r.random_range(0..params[t].cols()));
        let mut plus = params.to_vec();
        plus[t][(i, j)] += h;
        let mut minus = params.to_vec();
        minus[t][(i, j)] -= h;
        let lp = task.loss_and_grad(&plus, &batch).unwrap().loss;
        let lm = task.loss_and_grad(&minus, &batch).unwrap().loss;
        let fd = (lp - lm) / (2.0 * h);
        let an = analytic[t][(i, j)];
        worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()).max(1e-3));
    }
    worst
}

#[test]
fn toy_token_gradients_match_finite_differences() {
    for seed in 0..5 {
        let task = Task::new(small_token(seed)).unwrap();
        let mut params = task.initial_params();
        // move away from the identity mixing matrix so every term is active
        let mut r = common::rng(seed);
        params[1] = common::gaussian(&mut r, 6, 6).scale(0.5);
        params[0] = params[0].scale(5.0);
        let err = finite_difference_error(&task, &params, seed, 20);
        assert!(err <= 1e-5, "seed {seed}: relative error {err}");
    }
}

#[test]
fn image_fraction_of_the_stream() {
    let task = Task::new(ModalityTaskSpec::default()).unwrap();
    let images = (0..10_000u64)
        .filter(|&i| task.sample_micro_batch(i, 1).modality == Modality::Image)
        .count();
    let frac = images as f64 / 10_000.0;
    assert!((0.48..=0.52).contains(&frac), "{frac}");
}

#[test]
fn configured_covariance_ratio_is_realized() {
    let task = Task::new(ModalityTaskSpec {
        image_noise: 1.0,
        text_noise: 0.01,
        shared_curvature: true,
        ..ModalityTaskSpec::default()
    })
    .unwrap();
    let params = task.initial_params();
    let grads: Vec<(Modality, Matrix)> = (0..64u64)
        .map(|i| {
            let b = task.sample_micro_batch(i, 4);
            (b.modality, task.loss_and_grad(&params, &b).unwrap().grads.remove(0))
        })
        .collect();
    let refs: Vec<(Modality, &Matrix)> = grads.iter().map(|(m, g)| (*m, g)).collect();
    let (ti, tt) = covariance_trace_estimate(&refs).unwrap();
    let ratio = ti / tt;
    assert!((50.0..=200.0).contains(&ratio), "{ratio}");
}

#[test]
fn population_loss_matches_sample_average() {
    let task = Task::new(ModalityTaskSpec {
        mixing: 1.0,
        ..ModalityTaskSpec::default()
    })
    .unwrap();
    let params = vec![Matrix::from_fn(4, 2, |i, j| 0.2 * i as f64 - 0.1 * j as f64)];
    let mean = (0..4000u64)
        .map(|i| {
            task.loss_and_grad(&params, &task.sample_micro_batch(i, 1))
                .unwrap()
                .loss
        })
        .sum::<f64>()
        / 4000.0;
    let pop = task.population_loss(&params).unwrap();
    assert!((mean - pop.image).abs() <= 0.05 * pop.image, "{mean} vs {}", pop.image);
}

#[test]
fn token_population_loss_of_uniform_model_is_log_vocab() {
    let task = Task::new(small_token(1)).unwrap();
    let mut params = task.initial_params();
    params[0] = Matrix::zeros(44, 6);
    let pop = task.population_loss(&params).unwrap();
    let want = (44f64).ln();
    assert!((pop.image - want).abs() < 1e-12 && (pop.text - want).abs() < 1e-12);
}

#[test]
fn spec_round_trips_and_defaults() {
    let spec = ModalityTaskSpec::toy_token();
    assert_eq!(spec.kind, TaskKind::ToyToken);
    assert_eq!(
        (spec.vocab_image, spec.vocab_text, spec.embed_dim, spec.seq_len),
        (256, 256, 32, 16)
    );
    let json = serde_json::to_string(&spec).unwrap();
    assert_eq!(serde_json::from_str::<ModalityTaskSpec>(&json).unwrap(), spec);
    let partial: ModalityTaskSpec = serde_json::from_str(r#"{"kind":"toy_token","seq_len":4}"#).unwrap();
    assert_eq!(partial.seq_len, 4);
    assert_eq!(partial.mixing, 0.5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sampling_is_a_function_of_seed_and_index(seed in any::<u64>(), index in any::<u64>()) {
        let task = Task::new(small_token(seed)).unwrap();
        let a = task.sample_micro_batch(index, 3);
        let b = Task::new(small_token(seed)).unwrap().sample_micro_batch(index, 3);
        prop_assert_eq!(&a, &b);
        let Samples::Sequences(seqs) = &a.samples else { unreachable!() };
        prop_assert_eq!(seqs.len(), 3);
    }

    #[test]
    fn losses_and_gradients_are_finite(seed in any::<u64>(), index in 0u64..1000) {
        let task = Task::new(small_token(seed)).unwrap();
        let out = task.loss_and_grad(&task.initial_params(), &task.sample_micro_batch(index, 2)).unwrap();
        prop_assert!(out.loss.is_finite() && out.loss > 0.0);
        prop_assert!(out.grads.iter().all(|g| g.is_finite()));
    }
}
