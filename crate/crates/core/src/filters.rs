//! Separable Gaussian smoothing with zero padding.

use crate::volume::linear_index;
use crate::Scalar;

/// Normalized Gaussian taps over `[-r, r]`, `r = ceil(3 sigma)`. `sigma <= 0` gives the identity.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Convolves an x-fastest volume buffer with `kernel` along each axis in turn.
/// Samples outside the volume are zero.
pub fn separable_filter<T: Scalar>(data: &[T], shape: [usize; 3], kernel: &[f64]) -> Vec<T> {
    let k: Vec<T> = kernel.iter().map(|&v| T::of(v)).collect();
    let r = (k.len() / 2) as isize;
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let mut next = vec![T::zero(); cur.len()];
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    let p = [x, y, z];
                    let mut acc = T::zero();
                    for (t, &w) in k.iter().enumerate() {
                        let q = p[axis] as isize + t as isize - r;
                        if q < 0 || q >= shape[axis] as isize {
                            continue;
                        }
                        let mut qp = p;
                        qp[axis] = q as usize;
                        acc += w * cur[linear_index(shape, qp[0], qp[1], qp[2])];
                    }
                    next[linear_index(shape, x, y, z)] = acc;
                }
            }
        }
        cur = next;
    }
    cur
}

pub fn gaussian_smooth<T: Scalar>(data: &[T], shape: [usize; 3], sigma: f64) -> Vec<T> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    separable_filter(data, shape, &gaussian_kernel(sigma))
}
