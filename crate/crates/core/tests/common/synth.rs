//! Loss identities, the linear-critic penalty and finite-difference gradient checks.

use std::rc::Rc;

use pathosynth::autodiff::{Tape, Var};
use pathosynth::seed::rng_from_seed;
use pathosynth::synthesis::{
    abnormality_mask_loss, critic_loss, cycle_loss, hph_step, identity_loss, php_step, DiscriminatorConfig,
    GeneratorConfig, SynthConfig, SynthModel,
};
use pathosynth::tensor::Tensor;
use rand::Rng;

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

fn binary_tensor(shape: &[usize], p: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect())
}

/// Largest absolute value over the identity cases of the cycle, identity and
/// abnormality-mask losses, including `trials` random in-mask perturbations.
pub fn loss_identity_max(trials: usize, seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let shape = [2, 1, 6, 5, 4];
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let tape = Tape::new();
        let x = random_tensor(&shape, 0.0, 1.0, &mut rng);
        let mask = binary_tensor(&shape, 0.3, &mut rng);
        let mut perturbed = x.clone();
        for (p, &m) in perturbed.data_mut().iter_mut().zip(mask.data()) {
            if m > 0.0 {
                *p = rng.gen_range(0.0..1.0);
            }
        }
        let a = tape.leaf(x.clone());
        let b = tape.leaf(x.clone());
        let c = tape.leaf(perturbed);
        for v in [
            cycle_loss(a, b),
            identity_loss(a, b),
            abnormality_mask_loss(a, b, &mask),
            abnormality_mask_loss(a, c, &mask),
        ] {
            worst = worst.max(v.item().abs());
        }
    }
    worst
}

fn linear_critic<'t>(w: &Rc<Tensor<f64>>) -> impl Fn(Var<'t, f64>) -> Var<'t, f64> + '_ {
    move |x: Var<'t, f64>| x.mul_const(w.clone()).sum_per_sample()
}

/// Largest `|penalty - (||w|| - 1)^2|` over random linear critics and batches.
pub fn linear_critic_max_error(trials: usize, seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.gen_range(1..4);
        let shape = [n, 1, 4, 3, 3];
        let scale = rng.gen_range(0.05..0.8);
        let w_one = random_tensor(&shape[1..], -scale, scale, &mut rng);
        let norm = w_one.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let w = Rc::new(Tensor::new(shape.to_vec(), w_one.data().repeat(n)));
        let real = random_tensor(&shape, 0.0, 1.0, &mut rng);
        let fake = random_tensor(&shape, 0.0, 1.0, &mut rng);
        let tape = Tape::new();
        let loss = critic_loss(&tape, linear_critic(&w), &real, &fake, 10.0, &mut rng);
        worst = worst.max((loss.penalty.item() - (norm - 1.0).powi(2)).abs());
    }
    worst
}

/// `(penalty, wasserstein)` of a constant critic.
pub fn constant_critic(seed: u64) -> (f64, f64) {
    let mut rng = rng_from_seed(seed);
    let shape = [3, 1, 4, 4, 4];
    let real = random_tensor(&shape, 0.0, 1.0, &mut rng);
    let fake = random_tensor(&shape, 0.0, 1.0, &mut rng);
    let tape = Tape::new();
    let loss = critic_loss(&tape, |x| x.scale(0.0).sum_per_sample().add_scalar(0.7), &real, &fake, 10.0, &mut rng);
    (loss.penalty.item(), loss.wasserstein.item())
}

/// Tiny model used by the gradient check: 8³ patches, two base channels.
pub fn tiny_model(seed: u64) -> SynthModel<f64> {
    let config = SynthConfig {
        generator: GeneratorConfig { base_channels: 2, num_downsamples: 1, num_resblocks: 1, head_init_std: 0.3, ..Default::default() },
        critic: DiscriminatorConfig { base_channels: 2, num_layers: 2, ..Default::default() },
        batch_size: 2,
        ..Default::default()
    };
    SynthModel::new(config, [8, 8, 8], seed).unwrap()
}

#[derive(Clone, Copy, Debug)]
enum Net {
    GHp,
    GPh,
    DP,
    DH,
}

fn params_mut(m: &mut SynthModel<f64>, net: Net) -> &mut Vec<Tensor<f64>> {
    match net {
        Net::GHp => &mut m.g_hp.params,
        Net::GPh => &mut m.g_ph.params,
        Net::DP => &mut m.d_p.params,
        Net::DH => &mut m.d_h.params,
    }
}

struct Batch {
    x_h: Tensor<f64>,
    y_s: Tensor<f64>,
    x_p: Tensor<f64>,
    y_p: Tensor<f64>,
    real: Tensor<f64>,
}

/// Value of term `term` and, if requested, its gradient w.r.t. every parameter of `net`.
fn evaluate(model: &SynthModel<f64>, b: &Batch, term: &str, net: Option<Net>) -> (f64, Vec<Tensor<f64>>) {
    let tape = Tape::new();
    let vars = model.vars(&tape);
    let value = match term {
        "critic_wasserstein" | "critic_gradient_penalty" => {
            let mut rng = rng_from_seed(99);
            let fake = model.g_hp.apply(&b.x_h, &b.y_s);
            let l = critic_loss(&tape, |x| model.d_p.forward(&vars.d_p, x), &b.real, &fake, 10.0, &mut rng);
            if term == "critic_wasserstein" { l.wasserstein } else { l.penalty }
        }
        t if t.starts_with("hph") => {
            let terms = hph_step(model, &vars, tape.leaf(b.x_h.clone()), &b.y_s).terms;
            terms.into_iter().find(|x| x.name == t).unwrap().value
        }
        t => {
            let terms = php_step(model, &vars, tape.leaf(b.x_p.clone()), &b.y_p).terms;
            terms.into_iter().find(|x| x.name == t).unwrap().value
        }
    };
    let grads = match net {
        Some(n) => {
            let wrt = match n {
                Net::GHp => &vars.g_hp,
                Net::GPh => &vars.g_ph,
                Net::DP => &vars.d_p,
                Net::DH => &vars.d_h,
            };
            tape.grad(value, wrt).iter().map(|g| (*g.value()).clone()).collect()
        }
        None => Vec::new(),
    };
    (value.item(), grads)
}

/// One row per checked loss term: `(term, worst relative error, entries checked)`.
///
/// Each term is differentiated w.r.t. every parameter tensor of every network
/// it depends on; two entries per tensor are compared against central differences.
pub fn gradient_check(seed: u64) -> Vec<(String, f64, usize)> {
    let model = tiny_model(seed);
    let mut rng = rng_from_seed(seed ^ 0x5eed);
    let shape = [2, 1, 8, 8, 8];
    let batch = Batch {
        x_h: random_tensor(&shape, 0.25, 0.75, &mut rng),
        y_s: binary_tensor(&shape, 0.2, &mut rng),
        x_p: random_tensor(&shape, 0.25, 0.75, &mut rng),
        y_p: binary_tensor(&shape, 0.2, &mut rng),
        real: random_tensor(&shape, 0.25, 0.75, &mut rng),
    };
    let plan: [(&str, &[Net]); 8] = [
        ("hph_cycle", &[Net::GHp, Net::GPh]),
        ("hph_identity", &[Net::GPh]),
        ("hph_adversarial", &[Net::GHp, Net::DP]),
        ("php_cycle", &[Net::GHp, Net::GPh]),
        ("php_abnormality_mask", &[Net::GPh]),
        ("php_adversarial", &[Net::GPh, Net::DH]),
        ("critic_wasserstein", &[Net::DP]),
        ("critic_gradient_penalty", &[Net::DP]),
    ];
    let h = 1e-6;
    let mut rows = Vec::new();
    for (term, nets) in plan {
        let mut worst = 0.0f64;
        let mut checked = 0;
        for &net in nets {
            let (_, grads) = evaluate(&model, &batch, term, Some(net));
            for (ti, g) in grads.iter().enumerate() {
                for _ in 0..2 {
                    let j = rng.gen_range(0..g.len());
                    let mut plus = model.clone();
                    params_mut(&mut plus, net)[ti].data_mut()[j] += h;
                    let mut minus = model.clone();
                    params_mut(&mut minus, net)[ti].data_mut()[j] -= h;
                    let fd = (evaluate(&plus, &batch, term, None).0 - evaluate(&minus, &batch, term, None).0) / (2.0 * h);
                    let a = g.data()[j];
                    let scale = a.abs().max(fd.abs());
                    let rel = if scale < 1e-8 { 0.0 } else { (a - fd).abs() / scale };
                    worst = worst.max(rel);
                    checked += 1;
                }
            }
        }
        rows.push((term.to_string(), worst, checked));
    }
    rows
}
