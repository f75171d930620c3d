mod common;

use std::rc::Rc;

use common::synth::{constant_critic, gradient_check, linear_critic_max_error, loss_identity_max, random_tensor, tiny_model};
use pathosynth::autodiff::Tape;
use pathosynth::mask_sampler::LesionPrior;
use pathosynth::seed::rng_from_seed;
use pathosynth::synthesis::{
    abnormality_mask_loss, critic_loss, cycle_loss, gen_adv_loss, hph_step, l1, php_step, synthesize_pathological,
    train, Direction, HealthyPool, LossHistory, PathologicalPool, SynthError, SynthModel,
};
use pathosynth::tensor::Tensor;
use pathosynth::volume::{extract_patches, PatchSpec, PathologyMask, Volume};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn identity_cases_are_exactly_zero() {
    assert_eq!(loss_identity_max(100, 1), 0.0);
}

#[test]
fn l1_examples() {
    let tape = Tape::new();
    let zeros = tape.leaf(Tensor::zeros(vec![1, 1, 2, 2, 2]));
    let ones = tape.leaf(Tensor::filled(vec![1, 1, 2, 2, 2], 1.0f64));
    assert_eq!(l1(zeros, ones).item(), 1.0);
    assert_eq!(l1(ones, ones).item(), 0.0);
}

proptest! {
    #[test]
    fn l1_matches_elementwise_mean_and_is_symmetric(seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let shape = [2, 1, 3, 4, 2];
        let a = random_tensor(&shape, -1.0, 1.0, &mut rng);
        let b = random_tensor(&shape, -1.0, 1.0, &mut rng);
        let oracle = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        let tape = Tape::new();
        let (va, vb) = (tape.leaf(a), tape.leaf(b));
        prop_assert!((l1(va, vb).item() - oracle).abs() < 1e-12);
        prop_assert_eq!(cycle_loss(va, vb).item(), cycle_loss(vb, va).item());
    }

    #[test]
    fn abnormality_loss_is_masked_mean(seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let shape = [1, 1, 4, 3, 5];
        let a = random_tensor(&shape, 0.0, 1.0, &mut rng);
        let b = random_tensor(&shape, 0.0, 1.0, &mut rng);
        let m = Tensor::new(shape.to_vec(), (0..60).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect());
        let outside: Vec<f64> = (0..60).filter(|&i| m.data()[i] == 0.0).map(|i| (a.data()[i] - b.data()[i]).abs()).collect();
        let oracle = if outside.is_empty() { 0.0 } else { outside.iter().sum::<f64>() / outside.len() as f64 };
        let tape = Tape::new();
        let v = abnormality_mask_loss(tape.leaf(a), tape.leaf(b), &m).item();
        prop_assert!((v - oracle).abs() < 1e-12);
        prop_assert!(v >= 0.0);
    }

    #[test]
    fn gen_adv_loss_is_negative_batch_mean(scores in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let tape = Tape::new();
        let n = scores.len();
        let v = gen_adv_loss(tape.leaf(Tensor::new(vec![n], scores.clone()))).item();
        prop_assert!((v + scores.iter().sum::<f64>() / n as f64).abs() < 1e-12);
    }
}

#[test]
fn abnormality_loss_half_mask() {
    let shape = vec![1, 1, 2, 2, 2];
    let m = Tensor::new(shape.clone(), vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    let tape = Tape::new();
    let v = abnormality_mask_loss(tape.leaf(Tensor::zeros(shape.clone())), tape.leaf(Tensor::filled(shape.clone(), 1.0)), &m);
    assert_eq!(v.item(), 1.0);
    let all = Tensor::filled(shape.clone(), 1.0);
    let v = abnormality_mask_loss(tape.leaf(Tensor::zeros(shape.clone())), tape.leaf(Tensor::filled(shape, 1.0)), &all);
    assert_eq!(v.item(), 0.0);
}

#[test]
fn linear_critic_penalty_is_analytic() {
    assert!(linear_critic_max_error(50, 3) < 1e-5);
}

#[test]
fn constant_critic_penalty_is_one_and_distance_zero() {
    let (penalty, w) = constant_critic(4);
    assert!((penalty - 1.0).abs() < 1e-5);
    assert_eq!(w, 0.0);
}

#[test]
fn unit_linear_critic_on_equal_batches_costs_nothing() {
    let shape = [2, 1, 2, 2, 2];
    let mut w = vec![0.0; 8];
    w[3] = 1.0;
    let w = Rc::new(Tensor::new(shape.to_vec(), w.repeat(2)));
    let x = random_tensor(&shape, 0.0, 1.0, &mut rng_from_seed(5));
    let tape = Tape::new();
    let l = critic_loss(&tape, |v| v.mul_const(w.clone()).sum_per_sample(), &x, &x, 10.0, &mut rng_from_seed(6));
    assert!(l.total.item().abs() < 1e-10);
}

#[test]
fn every_loss_term_matches_finite_differences() {
    for (term, err, n) in gradient_check(11) {
        assert!(n > 0);
        assert!(err < 1e-3, "{term}: relative error {err}");
    }
}

#[test]
fn breakdown_total_is_weighted_sum() {
    let model = tiny_model(2);
    let mut rng = rng_from_seed(8);
    let x = random_tensor(&[2, 1, 8, 8, 8], 0.2, 0.8, &mut rng);
    let y = Tensor::new(vec![2, 1, 8, 8, 8], (0..1024).map(|i| f64::from(i % 7 == 0)).collect());
    let tape = Tape::new();
    let vars = model.vars(&tape);
    for b in [hph_step(&model, &vars, tape.leaf(x.clone()), &y), php_step(&model, &vars, tape.leaf(x.clone()), &y)] {
        let sum: f64 = b.terms.iter().map(|t| t.weight * t.value.item()).sum();
        assert!((sum - b.total.item()).abs() < 1e-12);
        assert!(b.terms.iter().all(|t| t.value.item().is_finite()));
    }
}

#[test]
fn untrained_generator_is_near_identity() {
    let model = SynthModel::<f32>::new(Default::default(), [16, 16, 8], 3).unwrap();
    let mut rng = rng_from_seed(1);
    let v = Volume::from_fn([16, 16, 8], [1.0; 3], |_, _, _| rng.gen_range(0.0f32..1.0));
    let m = PathologyMask::from_fn([16, 16, 8], |x, y, z| x + y + z < 6);
    for dir in [Direction::HealthyToPathological, Direction::PathologicalToHealthy] {
        let out = model.gen_forward(dir, &v, &m).unwrap();
        assert_eq!(out.shape(), v.shape());
        let dev = out.data().iter().zip(v.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(dev <= 0.1, "{dir:?}: {dev}");
        assert!(out.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }
    let wrong = Volume::filled([8, 8, 8], [1.0; 3], 0.5f32);
    assert!(matches!(
        model.gen_forward(Direction::HealthyToPathological, &wrong, &PathologyMask::empty([8, 8, 8])),
        Err(SynthError::Shape { .. })
    ));
}

fn pools(seed: u64) -> (HealthyPool<f64>, PathologicalPool<f64>) {
    let mut rng = rng_from_seed(seed);
    let healthy: Vec<Volume<f64>> =
        (0..3).map(|_| Volume::from_fn([8, 8, 8], [1.0; 3], |_, _, _| rng.gen_range(0.4..0.6))).collect();
    let prior = LesionPrior { count_range: [1, 1], radius_range_mm: [1.0, 1.2], foreground_margin_vox: 1, ..Default::default() };
    let hp = HealthyPool::new(healthy, prior, 0.1).unwrap();
    let mut patches = Vec::new();
    for k in 0..3 {
        let m = PathologyMask::from_fn([8, 8, 16], |x, y, z| {
            let d = (x as f64 - 4.0).powi(2) + (y as f64 - 3.0).powi(2) + (z as f64 - 4.0 - 5.0 * k as f64).powi(2);
            d <= 2.0
        });
        let v = Volume::from_fn([8, 8, 16], [1.0; 3], |x, y, z| if m.get(x, y, z) { 0.1 } else { rng.gen_range(0.4..0.6) });
        patches.extend(extract_patches(&v, &m, &PatchSpec::new([8, 8, 8], 0.5).unwrap()).unwrap());
    }
    (hp, PathologicalPool::new(patches).unwrap())
}

#[test]
fn zero_steps_leave_the_model_unchanged() {
    let (hp, pp) = pools(1);
    let mut model = tiny_model(4);
    let before = model.clone();
    let history = train(&mut model, &hp, &pp, 0, &mut rng_from_seed(0)).unwrap();
    assert!(history.records.is_empty());
    assert_eq!(model, before);
}

#[test]
fn training_is_deterministic_and_finite() {
    let (hp, pp) = pools(2);
    let run = || {
        let mut model = tiny_model(5);
        let h = train(&mut model, &hp, &pp, 3, &mut rng_from_seed(7)).unwrap();
        (model, h)
    };
    let (m1, h1) = run();
    let (m2, h2) = run();
    assert_eq!(h1, h2);
    assert_eq!(m1, m2);
    assert_eq!(m1.steps_done, 3);
    assert!(h1.records.iter().all(|r| r.value.is_finite()));
    for term in ["hph_cycle", "hph_identity", "php_abnormality_mask", "critic_total", "generator_total"] {
        assert_eq!(h1.values(term).len(), 3, "{term}");
    }
    assert!(m1 != tiny_model(5));
}

#[test]
fn non_finite_loss_aborts_with_the_term_name() {
    let (hp, pp) = pools(3);
    let mut model = tiny_model(6);
    model.g_hp.params[0].data_mut()[0] = f64::NAN;
    match train(&mut model, &hp, &pp, 1, &mut rng_from_seed(0)) {
        Err(SynthError::NonFinite { step: 0, term }) => assert!(term.starts_with("critic_p")),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (hp, pp) = pools(4);
    let mut model = tiny_model(7);
    train(&mut model, &hp, &pp, 1, &mut rng_from_seed(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let back = SynthModel::<f64>::load(&path).unwrap();
    assert_eq!(back, model);
    for (a, b) in back.g_hp.params.iter().zip(&model.g_hp.params) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert!(SynthModel::<f32>::load(&path).is_err());
}

#[test]
fn loss_history_csv_round_trip() {
    let mut h = LossHistory::default();
    h.push(0, "hph_cycle", 0.25);
    h.push(1, "critic_total", -1.0 / 3.0);
    let mut buf = Vec::new();
    h.write_csv(&mut buf).unwrap();
    assert!(String::from_utf8(buf.clone()).unwrap().starts_with("step,term,value\n"));
    assert_eq!(LossHistory::read_csv(&buf[..]).unwrap(), h);
}

#[test]
fn synthesis_with_empty_mask_preserves_shape_and_range() {
    let model = tiny_model(9);
    let mut rng = rng_from_seed(2);
    let v = Volume::from_fn([8, 8, 20], [1.0; 3], |_, _, _| rng.gen_range(0.0..1.0));
    let spec = PatchSpec::new([8, 8, 8], 0.5).unwrap();
    let out = synthesize_pathological(&model, &v, &PathologyMask::empty(v.shape()), &spec).unwrap();
    assert_eq!(out.shape(), v.shape());
    assert!(out.data().iter().all(|x| (0.0..=1.0).contains(x)));
}
