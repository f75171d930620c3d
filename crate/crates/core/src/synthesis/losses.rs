//! L1 reconstruction losses and the Wasserstein critic objective with gradient penalty.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;
use crate::Scalar;

/// Mean absolute difference.
pub fn l1<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    assert_eq!(a.shape(), b.shape(), "l1 operands differ in shape");
    (a - b).abs().mean()
}

pub fn cycle_loss<'t, T: Scalar>(x: Var<'t, T>, x_recon: Var<'t, T>) -> Var<'t, T> {
    l1(x, x_recon)
}

/// `l1(x_h, G_PH(x_h ⊕ 0))`; `g_ph_out` is the generator output for the healthy input.
pub fn identity_loss<'t, T: Scalar>(x_h: Var<'t, T>, g_ph_out: Var<'t, T>) -> Var<'t, T> {
    l1(x_h, g_ph_out)
}

/// Mean absolute difference over voxels where `y_p == 0`; zero if there are none.
pub fn abnormality_mask_loss<'t, T: Scalar>(
    x_p: Var<'t, T>,
    x_tilde_h: Var<'t, T>,
    y_p: &Tensor<T>,
) -> Var<'t, T> {
    assert_eq!(x_p.shape(), x_tilde_h.shape(), "abnormality mask loss operands differ in shape");
    assert_eq!(x_p.shape(), y_p.shape(), "abnormality mask shape");
    let outside = y_p.map(|v| if v > T::zero() { T::zero() } else { T::one() });
    let count = outside.data().iter().filter(|&&v| v > T::zero()).count();
    let diff = (x_p - x_tilde_h).abs().mul_const(Rc::new(outside)).sum();
    if count == 0 {
        diff
    } else {
        diff.scale(T::of(1.0 / count as f64))
    }
}

/// `-mean(D(fake))` given the per-sample critic scores of the fake batch.
pub fn gen_adv_loss<'t, T: Scalar>(fake_scores: Var<'t, T>) -> Var<'t, T> {
    fake_scores.mean().neg()
}

pub struct CriticLoss<'t, T> {
    /// `mean(D(fake)) - mean(D(real))`.
    pub wasserstein: Var<'t, T>,
    /// Unweighted `mean((||grad D(x_hat)|| - 1)^2)`.
    pub penalty: Var<'t, T>,
    pub total: Var<'t, T>,
}

/// Interpolates each sample pair with its own `eps ~ U(0, 1)`.
pub fn interpolate<T: Scalar, R: Rng + ?Sized>(real: &Tensor<T>, fake: &Tensor<T>, rng: &mut R) -> Tensor<T> {
    assert_eq!(real.shape(), fake.shape(), "real and fake batches differ in shape");
    let n = real.shape()[0];
    let per = real.len() / n.max(1);
    let eps: Vec<T> = (0..n).map(|_| T::of(rng.gen::<f64>())).collect();
    let data = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(i, (&r, &f))| {
            let e = eps[i / per];
            e * r + (T::one() - e) * f
        })
        .collect();
    Tensor::new(real.shape().to_vec(), data)
}

/// Critic objective for a critic `d` mapping a `[N, ...]` batch to `[N]` scores.
pub fn critic_loss<'t, T: Scalar, R: Rng + ?Sized>(
    tape: &'t Tape<T>,
    d: impl Fn(Var<'t, T>) -> Var<'t, T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    lambda_gp: f64,
    rng: &mut R,
) -> CriticLoss<'t, T> {
    let x_hat = tape.leaf(interpolate(real, fake, rng));
    let wasserstein = d(tape.leaf(fake.clone())).mean() - d(tape.leaf(real.clone())).mean();
    let scores = d(x_hat);
    let g = tape.grad(scores.sum(), &[x_hat])[0];
    let norm = g.square().sum_per_sample().add_scalar(T::of(1e-12)).sqrt();
    let penalty = norm.add_scalar(-T::one()).square().mean();
    let total = wasserstein + penalty.scale(T::of(lambda_gp));
    CriticLoss { wasserstein, penalty, total }
}
