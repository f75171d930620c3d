//! 3D fast radial symmetry transform, dark polarity.

use serde::{Deserialize, Serialize};

use crate::filters::gaussian_smooth;
use crate::volume::{linear_index, Volume};
use crate::Scalar;

use super::DetectError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FRSTParams {
    /// Voting radii in voxels.
    pub radii_vox: Vec<usize>,
    /// Radial strictness exponent.
    pub alpha: f64,
    /// Gradients weaker than this fraction of the largest magnitude do not vote.
    pub gradient_threshold_fraction: f64,
    /// `k_n = k_base * n^2` normalizes and clamps the orientation projection.
    pub k_base: f64,
    /// Gaussian width per radius: `sigma_n = smoothing_factor * n`.
    pub smoothing_factor: f64,
}

impl Default for FRSTParams {
    fn default() -> Self {
        Self {
            radii_vox: vec![2, 3, 4, 5],
            alpha: 2.0,
            gradient_threshold_fraction: 0.1,
            k_base: 8.0,
            smoothing_factor: 0.25,
        }
    }
}

impl FRSTParams {
    pub fn validate(&self) -> Result<(), DetectError> {
        let ok = !self.radii_vox.is_empty()
            && self.radii_vox.iter().all(|&n| n >= 1)
            && self.alpha.is_finite()
            && self.alpha > 0.0
            && (0.0..1.0).contains(&self.gradient_threshold_fraction)
            && self.k_base.is_finite()
            && self.k_base > 0.0
            && self.smoothing_factor.is_finite()
            && self.smoothing_factor >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(DetectError::Config(format!("invalid FRST parameters {self:?}")))
        }
    }
}

/// Central-difference gradient in voxel units with edge replication.
pub fn gradient<T: Scalar>(v: &Volume<T>) -> Vec<[f64; 3]> {
    let s = v.shape();
    let at = |p: [isize; 3]| {
        let c = |a: usize| p[a].clamp(0, s[a] as isize - 1) as usize;
        v.get(c(0), c(1), c(2)).as_f64()
    };
    let mut out = vec![[0.0; 3]; v.len()];
    for z in 0..s[2] {
        for y in 0..s[1] {
            for x in 0..s[0] {
                let p = [x as isize, y as isize, z as isize];
                let mut g = [0.0; 3];
                for (a, ga) in g.iter_mut().enumerate() {
                    let (mut hi, mut lo) = (p, p);
                    hi[a] += 1;
                    lo[a] -= 1;
                    *ga = 0.5 * (at(hi) - at(lo));
                }
                out[linear_index(s, x, y, z)] = g;
            }
        }
    }
    out
}

/// Symmetry map `S`: the mean over radii of the smoothed per-radius responses.
///
/// Each voxel whose gradient magnitude exceeds the threshold votes at
/// `p - round(g/|g| * n)`, the point a dark blob's center would occupy. The
/// orientation image `O_n` counts votes and `M_n` sums magnitudes;
/// `F_n = (M_n / k_n) * (min(O_n, k_n) / k_n)^alpha`.
pub fn frst3d<T: Scalar>(v: &Volume<T>, p: &FRSTParams) -> Result<Volume<T>, DetectError> {
    p.validate()?;
    let shape = v.shape();
    let grad = gradient(v);
    let mags: Vec<f64> = grad.iter().map(|g| (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt()).collect();
    let max = mags.iter().copied().fold(0.0, f64::max);
    let mut total = vec![0.0f64; v.len()];
    if max > 0.0 {
        let thr = p.gradient_threshold_fraction * max;
        for &n in &p.radii_vox {
            let mut o = vec![0.0f64; v.len()];
            let mut m = vec![0.0f64; v.len()];
            for z in 0..shape[2] {
                for y in 0..shape[1] {
                    for x in 0..shape[0] {
                        let i = linear_index(shape, x, y, z);
                        let mag = mags[i];
                        if mag <= thr || mag == 0.0 {
                            continue;
                        }
                        let g = grad[i];
                        let q = [x, y, z].map(|c| c as isize);
                        let mut t = [0isize; 3];
                        let mut inside = true;
                        for a in 0..3 {
                            t[a] = q[a] - (g[a] / mag * n as f64).round() as isize;
                            inside &= t[a] >= 0 && t[a] < shape[a] as isize;
                        }
                        if inside {
                            let j = linear_index(shape, t[0] as usize, t[1] as usize, t[2] as usize);
                            o[j] += 1.0;
                            m[j] += mag;
                        }
                    }
                }
            }
            let k = p.k_base * (n * n) as f64;
            let f: Vec<f64> = o
                .iter()
                .zip(&m)
                .map(|(&oc, &mc)| (mc / k) * (oc.min(k) / k).powf(p.alpha))
                .collect();
            let s = gaussian_smooth(&f, shape, p.smoothing_factor * n as f64);
            for (acc, sv) in total.iter_mut().zip(s) {
                *acc += sv;
            }
        }
    }
    let r = p.radii_vox.len() as f64;
    Ok(Volume::new(shape, v.spacing(), total.into_iter().map(|s| T::of(s / r)).collect())?)
}
