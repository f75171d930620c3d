//! Lesion-mask geometry oracles: Feret diameter and brute-force erosion.

use pathosynth::mask_sampler::{sample_pathology_mask, LesionPrior};
use pathosynth::morphology::connected_components;
use pathosynth::phantom::brain_support;
use pathosynth::seed::rng_from_seed;
use pathosynth::volume::PathologyMask;
use rand::Rng;

/// Largest distance between two voxel centers of the component, in mm.
pub fn feret_mm(comp: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in comp.iter().enumerate() {
        for b in &comp[i + 1..] {
            let d2: f64 = (0..3).map(|k| ((a[k] as f64 - b[k] as f64) * spacing[k]).powi(2)).sum();
            best = best.max(d2);
        }
    }
    best.sqrt()
}

/// Voxel is kept iff the whole cube of half-width r around it is in-bounds foreground.
pub fn eroded_oracle(fg: &PathologyMask, r: usize) -> PathologyMask {
    let [sx, sy, sz] = fg.shape();
    PathologyMask::from_fn(fg.shape(), |x, y, z| {
        if x < r || y < r || z < r || x + r >= sx || y + r >= sy || z + r >= sz {
            return false;
        }
        (z - r..=z + r).all(|zz| (y - r..=y + r).all(|yy| (x - r..=x + r).all(|xx| fg.get(xx, yy, zz))))
    })
}

fn random_prior(rng: &mut impl Rng) -> LesionPrior {
    let rmin = rng.gen_range(0.5..2.0);
    let emax = rng.gen_range(1.0..3.0);
    LesionPrior {
        count_range: [0, rng.gen_range(1..5)],
        radius_range_mm: [rmin, rng.gen_range(rmin..=5.0)],
        elongation_prob: rng.gen_range(0.0..=1.0),
        elongation_ratio_range: [1.0, emax],
        foreground_margin_vox: rng.gen_range(0..4),
    }
}

/// `(violations, components)` over `seeds` random priors and spacings. A
/// violation is a voxel outside the eroded foreground, a component wider than
/// 10 mm, or more components than the prior allows.
pub fn mask_geometry_violations(seeds: u64) -> (usize, usize) {
    let fg = brain_support([40, 40, 28]);
    let spacings = [[1.0, 1.0, 1.0], [0.98, 0.98, 1.0], [0.6, 0.6, 2.0]];
    let mut violations = 0;
    let mut components = 0;
    for seed in 0..seeds {
        let mut rng = rng_from_seed(seed);
        let prior = random_prior(&mut rng);
        let spacing = spacings[seed as usize % spacings.len()];
        let m = sample_pathology_mask(&fg, spacing, &prior, &mut rng).unwrap();
        let allowed = eroded_oracle(&fg, prior.foreground_margin_vox);
        for (i, (&a, &b)) in m.data().iter().zip(allowed.data()).enumerate() {
            if a == 1 && b == 0 {
                violations += 1;
                eprintln!("seed {seed}: voxel {i} outside eroded foreground");
            }
        }
        let comps = connected_components(&m);
        if comps.len() > prior.count_range[1] {
            violations += 1;
        }
        for c in &comps {
            components += 1;
            if feret_mm(c, spacing) > 10.0 {
                violations += 1;
                eprintln!("seed {seed}: component spans {} mm", feret_mm(c, spacing));
            }
        }
    }
    (violations, components)
}
