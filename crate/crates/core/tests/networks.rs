mod common;

use cdal::networks::checkpoint::{load_params_into, save_params};
use cdal::networks::{DiscriminatorState, GeneratorConfig, GeneratorState};
use cdal::nn::gradcheck::check_gradients;
use cdal::rng::{standard_normal, stream_rng};
use common::*;
use ndarray::{Array2, Array4};

fn inputs(n: usize, seed: u64) -> (Array4<f64>, Array2<f64>, Array4<f64>) {
    let mut rng = stream_rng(seed, 0);
    let x: Array4<f64> = standard_normal(&mut rng, (n, 1, 8, 8));
    let z: Array2<f64> = standard_normal(&mut rng, (n, 4));
    let image: Array4<f64> = standard_normal(&mut rng, (n, 1, 8, 8));
    (x, z, image)
}

fn max_abs_diff(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn output_shapes() {
    let g = GeneratorState::<f64>::new(&tiny_generator(), 1).unwrap();
    let d = DiscriminatorState::<f64>::new(&tiny_discriminator(), 2).unwrap();
    let (x, z, image) = inputs(3, 0);
    assert_eq!(g.predict_x0(&x, 2, &z, &image).unwrap().dim(), (3, 1, 8, 8));
    let out = d.forward(&x, &x, 2).unwrap();
    assert_eq!(out.logits.len(), 3);
    assert_eq!(out.features.keys().copied().collect::<Vec<_>>(), vec![4, 8]);
    assert_eq!(out.features[&8].dim().2, 8);
    assert_eq!(out.features[&4].dim().3, 4);
}

#[test]
fn shape_mismatch_is_an_error() {
    let g = GeneratorState::<f64>::new(&tiny_generator(), 1).unwrap();
    let (x, z, _) = inputs(2, 0);
    let wrong = Array4::<f64>::zeros((2, 1, 16, 16));
    assert!(g.predict_x0(&x, 1, &z, &wrong).is_err());
}

#[test]
fn latent_and_step_reach_the_output() {
    let g = GeneratorState::<f64>::new(&tiny_generator(), 1).unwrap();
    let (x, z, image) = inputs(2, 0);
    let base = g.predict_x0(&x, 1, &z, &image).unwrap();
    let other_z = g.predict_x0(&x, 1, &(&z + 1.0), &image).unwrap();
    let other_t = g.predict_x0(&x, 4, &z, &image).unwrap();
    assert!(max_abs_diff(&base, &other_z) > 0.0);
    assert!(max_abs_diff(&base, &other_t) > 0.0);
}

#[test]
fn construction_is_deterministic() {
    let a = GeneratorState::<f32>::new(&tiny_generator(), 7).unwrap();
    let b = GeneratorState::<f32>::new(&tiny_generator(), 7).unwrap();
    let c = GeneratorState::<f32>::new(&tiny_generator(), 8).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
    let (x, z, image) = inputs(2, 3);
    let (x, z, image) = (x.mapv(|v| v as f32), z.mapv(|v| v as f32), image.mapv(|v| v as f32));
    assert_eq!(a.predict_x0(&x, 2, &z, &image).unwrap(), b.predict_x0(&x, 2, &z, &image).unwrap());
}

#[test]
fn default_encoder_is_within_budget() {
    let g = GeneratorState::<f32>::new(&GeneratorConfig::default(), 0).unwrap();
    let count = g.encoder_param_count();
    assert!(count > 0 && count <= 1_150_000, "encoder has {count} parameters");
}

#[test]
fn distinct_images_encode_differently() {
    let g = GeneratorState::<f64>::new(&tiny_generator(), 1).unwrap();
    let (_, _, a) = inputs(1, 10);
    let (_, _, b) = inputs(1, 11);
    let ea = g.encode_condition(&a).unwrap();
    let eb = g.encode_condition(&b).unwrap();
    assert_eq!(ea.dim(), (1, 2, 8, 8));
    assert!(max_abs_diff(&ea, &eb) > 0.0);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let g = GeneratorState::<f32>::new(&tiny_generator(), 3).unwrap();
    let path = dir.path().join("g.safetensors");
    save_params(&path, &g.params).unwrap();
    let mut fresh = GeneratorState::<f32>::new(&tiny_generator(), 4).unwrap();
    load_params_into(&path, &mut fresh.params).unwrap();
    let bits = |p: &cdal::nn::ParamStore<f32>| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&g.params), bits(&fresh.params));
}

#[test]
fn loading_into_a_different_architecture_fails() {
    let dir = tempfile::tempdir().unwrap();
    let g = GeneratorState::<f32>::new(&tiny_generator(), 3).unwrap();
    let path = dir.path().join("g.safetensors");
    save_params(&path, &g.params).unwrap();
    let wider = GeneratorConfig { base_channels: 8, ..tiny_generator() };
    let mut other = GeneratorState::<f32>::new(&wider, 3).unwrap();
    assert!(load_params_into(&path, &mut other.params).is_err());
}

#[test]
fn generator_loss_gradients_match_finite_differences() {
    let mut trainer = tiny_trainer::<f64>(tiny_train(0), 4);
    let (x, z, image) = inputs(2, 5);
    let (_, _, target) = inputs(2, 6);
    let target = target.mapv(f64::tanh);
    let (_, grads) = trainer.generator_loss(&x, 3, &z, &image, &target).unwrap();
    let report = check_gradients(
        &mut trainer,
        |t| &mut t.generator.params,
        |t| t.generator_loss(&x, 3, &z, &image, &target).unwrap().0,
        &grads,
        3,
        1e-6,
        1,
    );
    assert!(report.checked > 50);
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn discriminator_loss_gradients_match_finite_differences() {
    let mut trainer = tiny_trainer::<f64>(tiny_train(0), 4);
    let (x_t, _, x_prev) = inputs(2, 7);
    for real in [true, false] {
        let (_, grads) = trainer.discriminator_loss(&x_t, &x_prev, 2, real).unwrap();
        let report = check_gradients(
            &mut trainer,
            |t| &mut t.discriminator.params,
            |t| t.discriminator_loss(&x_t, &x_prev, 2, real).unwrap().0,
            &grads,
            3,
            1e-6,
            2,
        );
        assert!(report.checked > 30);
        assert!(report.max_rel_error < 1e-3, "real={real} {report:?}");
    }
}
