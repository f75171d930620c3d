//! Brute-force radial symmetry oracle and planted-sphere volumes.

use pathosynth::detection::{frst3d, FRSTParams};
use pathosynth::mask_sampler::LesionPrior;
use pathosynth::phantom::{generate_phantom, PhantomConfig};
use pathosynth::seed::rng_from_seed;
use pathosynth::volume::Volume;
use rand::Rng;

/// Direct per-voxel evaluation: clamped central differences, one vote per
/// voxel and radius, a dense 3D Gaussian with zero padding, mean over radii.
pub fn naive_frst(v: &Volume<f64>, p: &FRSTParams) -> Vec<f64> {
    let [sx, sy, sz] = v.shape();
    let n = sx * sy * sz;
    let idx = |x: usize, y: usize, z: usize| x + sx * (y + sy * z);
    let at = |x: isize, y: isize, z: isize| {
        v.get(x.clamp(0, sx as isize - 1) as usize, y.clamp(0, sy as isize - 1) as usize, z.clamp(0, sz as isize - 1) as usize)
    };
    let mut grad = vec![[0.0f64; 3]; n];
    let mut mag = vec![0.0f64; n];
    for z in 0..sz {
        for y in 0..sy {
            for x in 0..sx {
                let (xi, yi, zi) = (x as isize, y as isize, z as isize);
                let g = [
                    (at(xi + 1, yi, zi) - at(xi - 1, yi, zi)) / 2.0,
                    (at(xi, yi + 1, zi) - at(xi, yi - 1, zi)) / 2.0,
                    (at(xi, yi, zi + 1) - at(xi, yi, zi - 1)) / 2.0,
                ];
                grad[idx(x, y, z)] = g;
                mag[idx(x, y, z)] = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            }
        }
    }
    let gmax = mag.iter().cloned().fold(0.0, f64::max);
    let mut total = vec![0.0; n];
    if gmax == 0.0 {
        return total;
    }
    for &r in &p.radii_vox {
        let (mut o, mut m) = (vec![0.0f64; n], vec![0.0f64; n]);
        for z in 0..sz {
            for y in 0..sy {
                for x in 0..sx {
                    let i = idx(x, y, z);
                    if mag[i] <= p.gradient_threshold_fraction * gmax {
                        continue;
                    }
                    let t: Vec<isize> = [x, y, z]
                        .iter()
                        .zip(grad[i])
                        .map(|(&c, g)| c as isize - (g / mag[i] * r as f64).round() as isize)
                        .collect();
                    if t.iter().zip([sx, sy, sz]).all(|(&c, s)| c >= 0 && c < s as isize) {
                        let j = idx(t[0] as usize, t[1] as usize, t[2] as usize);
                        o[j] += 1.0;
                        m[j] += mag[i];
                    }
                }
            }
        }
        let k = p.k_base * (r * r) as f64;
        let f: Vec<f64> = (0..n).map(|i| m[i] / k * (o[i].min(k) / k).powf(p.alpha)).collect();
        let sigma = p.smoothing_factor * r as f64;
        let taps: Vec<f64> = if sigma > 0.0 {
            let w = (3.0 * sigma).ceil() as isize;
            (-w..=w).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect()
        } else {
            vec![1.0]
        };
        let norm: f64 = taps.iter().sum();
        let w = (taps.len() / 2) as isize;
        for z in 0..sz as isize {
            for y in 0..sy as isize {
                for x in 0..sx as isize {
                    let mut acc = 0.0;
                    for dz in -w..=w {
                        for dy in -w..=w {
                            for dx in -w..=w {
                                let (qx, qy, qz) = (x + dx, y + dy, z + dz);
                                if qx < 0 || qy < 0 || qz < 0 || qx >= sx as isize || qy >= sy as isize || qz >= sz as isize {
                                    continue;
                                }
                                let wt = taps[(dx + w) as usize] * taps[(dy + w) as usize] * taps[(dz + w) as usize]
                                    / (norm * norm * norm);
                                acc += wt * f[idx(qx as usize, qy as usize, qz as usize)];
                            }
                        }
                    }
                    total[idx(x as usize, y as usize, z as usize)] += acc;
                }
            }
        }
    }
    total.iter().map(|t| t / p.radii_vox.len() as f64).collect()
}

/// Largest `|frst3d - oracle|` over `count` random 9³ volumes.
pub fn oracle_max_error(count: u64, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..count {
        let mut rng = rng_from_seed(seed + k);
        let params = FRSTParams {
            radii_vox: if k % 2 == 0 { vec![1, 2, 3] } else { vec![2, 4] },
            alpha: rng.gen_range(1.0..3.0),
            gradient_threshold_fraction: rng.gen_range(0.0..0.5),
            k_base: rng.gen_range(1.0..10.0),
            smoothing_factor: rng.gen_range(0.0..0.6),
        };
        let v = Volume::from_fn([9, 9, 9], [1.0; 3], |_, _, _| rng.gen_range(0.0..1.0));
        let s = frst3d(&v, &params).unwrap();
        for (a, b) in s.data().iter().zip(naive_frst(&v, &params)) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// A 32³ lesion-free phantom with a dark sphere of radius 3 planted at a random interior center.
pub fn planted_sphere(seed: u64) -> (Volume<f64>, [usize; 3]) {
    let cfg = PhantomConfig {
        shape: [32; 3],
        spacing: [1.0; 3],
        vessel_count: 0,
        lesion_prior: LesionPrior { count_range: [0, 0], ..Default::default() },
        seed,
        ..PhantomConfig::default()
    };
    let mut v = generate_phantom::<f64>(&cfg).unwrap().volume;
    let mut rng = rng_from_seed(seed ^ 0xfeed);
    let c = [rng.gen_range(12..20), rng.gen_range(12..20), rng.gen_range(12..20)];
    for z in 0..32 {
        for y in 0..32 {
            for x in 0..32 {
                let d2 = [x, y, z].iter().zip(c).map(|(&a, b)| (a as f64 - b as f64).powi(2)).sum::<f64>();
                if d2 <= 9.0 {
                    v.set(x, y, z, v.get(x, y, z) * 0.2);
                }
            }
        }
    }
    (v, c)
}

/// Chebyshev distance from the argmax of the symmetry map to the planted center.
pub fn sphere_argmax_offset(seed: u64) -> usize {
    let (v, c) = planted_sphere(seed);
    let s = frst3d(&v, &FRSTParams::default()).unwrap();
    let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
    for (i, &x) in s.data().iter().enumerate() {
        if x > best {
            best = x;
            arg = i;
        }
    }
    let p = [arg % 32, (arg / 32) % 32, arg / 1024];
    (0..3).map(|a| p[a].abs_diff(c[a])).max().unwrap()
}
