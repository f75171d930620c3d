//! Procedural brain-like phantoms with dark tubular vessels and microbleed-like lesions.
//!
//! The phantom is an engineered test oracle, not an MR simulation: a bright
//! ellipsoidal "brain" with smooth texture, dark polyline vessel tubes and dark
//! ellipsoidal lesions placed exactly where the returned mask is 1.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filters::gaussian_smooth;
use crate::mask_sampler::{sample_pathology_mask, LesionPrior, SamplerError};
use crate::morphology::{connected_components, for_each_neighbor};
use crate::record::{Domain, SampleRecord};
use crate::seed::{derive_seed, rng_from_seed};
use crate::volume::{linear_index, PathologyMask, Volume};
use crate::Scalar;

/// Shell width used by the hypointensity contract.
pub const SHELL_VOX: usize = 2;

const PLACEMENT_RETRIES: usize = 32;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("lesions could not be placed: {0}")]
    Unplaceable(#[source] SamplerError),
    #[error("lesion contrast contract could not be met after {0} placements")]
    Contrast(usize),
    #[error("invalid phantom config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Mean tissue intensity inside the brain.
    pub background_level: f64,
    /// Standard deviation of the smooth tissue texture.
    pub tissue_texture_scale: f64,
    /// Gaussian width (voxels) of the texture field.
    pub texture_smoothing_vox: f64,
    /// Independent per-voxel noise.
    pub noise_std: f64,
    pub vessel_count: usize,
    pub vessel_radius_range_vox: [f64; 2],
    /// Fractional darkening inside vessels.
    pub vessel_contrast: f64,
    pub lesion_prior: LesionPrior,
    /// Lesion hypointensity depth in `(0, 1]`.
    pub lesion_contrast: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            shape: [64, 64, 32],
            spacing: [0.98, 0.98, 1.0],
            background_level: 0.7,
            tissue_texture_scale: 0.04,
            texture_smoothing_vox: 2.0,
            noise_std: 0.01,
            vessel_count: 4,
            vessel_radius_range_vox: [0.8, 1.3],
            vessel_contrast: 0.4,
            lesion_prior: LesionPrior::default(),
            lesion_contrast: 0.5,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::Config(m));
        if self.shape.iter().any(|&s| s < 8) {
            return bad(format!("shape {:?} too small (min 8 per axis)", self.shape));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad(format!("spacing {:?} must be positive", self.spacing));
        }
        if !(self.lesion_contrast > 0.0 && self.lesion_contrast <= 1.0) {
            return bad(format!("lesion contrast {} outside (0, 1]", self.lesion_contrast));
        }
        if !(0.0..=1.0).contains(&self.background_level) {
            return bad(format!("background level {} outside [0, 1]", self.background_level));
        }
        if !(0.0..1.0).contains(&self.vessel_contrast) {
            return bad(format!("vessel contrast {} outside [0, 1)", self.vessel_contrast));
        }
        let [rmin, rmax] = self.vessel_radius_range_vox;
        if !(rmin > 0.0 && rmin <= rmax) {
            return bad(format!("vessel radius range [{rmin}, {rmax}] invalid"));
        }
        self.lesion_prior.validate().map_err(|e| PhantomError::Config(e.to_string()))
    }
}

/// A phantom plus the intermediate structures used to build it.
#[derive(Debug, Clone)]
pub struct PhantomDetails<T> {
    pub record: SampleRecord<T>,
    pub brain: PathologyMask,
    /// Voxels of each vessel tube, before clipping to other structures.
    pub vessels: Vec<Vec<[usize; 3]>>,
}

/// Ellipsoidal brain support centered in the volume.
pub fn brain_support(shape: [usize; 3]) -> PathologyMask {
    let c = shape.map(|s| (s as f64 - 1.0) / 2.0);
    let semi = [0.45 * shape[0] as f64, 0.45 * shape[1] as f64, 0.75 * shape[2] as f64];
    PathologyMask::from_fn(shape, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        (0..3).map(|a| ((p[a] - c[a]) / semi[a]).powi(2)).sum::<f64>() <= 1.0
    })
}

fn segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab.iter().map(|v| v * v).sum::<f64>();
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum::<f64>().sqrt()
}

/// Rasterizes a random vessel: a polyline running along x or y across the
/// middle of the brain with bounded lateral wander, swept by a sphere.
pub fn sample_vessel<R: Rng + ?Sized>(
    shape: [usize; 3],
    radius_range: [f64; 2],
    rng: &mut R,
) -> Vec<[usize; 3]> {
    let axis = rng.gen_range(0..2usize);
    let extent = shape[axis] as f64;
    let length = rng.gen_range(0.5..0.75) * extent;
    let start = (extent - length) / 2.0 + rng.gen_range(-0.05..0.05) * extent;
    let radius = if radius_range[1] > radius_range[0] {
        rng.gen_range(radius_range[0]..=radius_range[1])
    } else {
        radius_range[0]
    };
    let mut base = [0.0; 3];
    for a in 0..3 {
        let s = shape[a] as f64;
        base[a] = s / 2.0 + rng.gen_range(-0.2..0.2) * s;
    }
    let wander = 3.0f64.min(shape[2] as f64 / 8.0);
    let nodes = 5;
    let mut offsets = [0.0f64; 3];
    let mut points = Vec::with_capacity(nodes);
    for i in 0..nodes {
        let mut p = base;
        p[axis] = start + length * i as f64 / (nodes - 1) as f64;
        for a in (0..3).filter(|&a| a != axis) {
            offsets[a] = (offsets[a] + rng.gen_range(-1.5..1.5)).clamp(-wander, wander);
            p[a] = base[a] + offsets[a];
        }
        points.push(p);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a] - radius);
            hi[a] = hi[a].max(p[a] + radius);
        }
    }
    let range = |a: usize| {
        let l = lo[a].floor().max(0.0) as usize;
        let h = (hi[a].ceil().max(0.0) as usize).min(shape[a] - 1);
        l..=h
    };
    let mut out = Vec::new();
    for z in range(2) {
        for y in range(1) {
            for x in range(0) {
                let p = [x as f64, y as f64, z as f64];
                let d = points
                    .windows(2)
                    .map(|w| segment_distance(p, w[0], w[1]))
                    .fold(f64::INFINITY, f64::min);
                if d <= radius {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Voxels within Chebyshev distance `SHELL_VOX` of the component, outside it.
pub fn lesion_shell(component: &[[usize; 3]], mask: &PathologyMask) -> Vec<[usize; 3]> {
    let shape = mask.shape();
    let mut seen = PathologyMask::empty(shape);
    let mut out = Vec::new();
    for &v in component {
        for_each_neighbor(v, shape, SHELL_VOX, |q| {
            if !mask.get(q[0], q[1], q[2]) && !seen.get(q[0], q[1], q[2]) {
                seen.set(q[0], q[1], q[2], true);
                out.push(q);
            }
        });
    }
    out
}

fn mean_at<T: Scalar>(v: &Volume<T>, voxels: &[[usize; 3]]) -> f64 {
    voxels.iter().map(|p| v.get(p[0], p[1], p[2]).as_f64()).sum::<f64>() / voxels.len().max(1) as f64
}

/// True when every lesion of `mask` is darker than its shell by more than `contrast / 2`.
pub fn lesions_meet_contrast<T: Scalar>(v: &Volume<T>, mask: &PathologyMask, contrast: f64) -> bool {
    connected_components(mask).iter().all(|comp| {
        let shell = lesion_shell(comp, mask);
        mean_at(v, comp) + contrast / 2.0 < mean_at(v, &shell)
    })
}

pub fn generate_phantom<T: Scalar>(config: &PhantomConfig) -> Result<SampleRecord<T>, PhantomError> {
    generate_phantom_detailed(config).map(|d| d.record)
}

pub fn generate_phantom_detailed<T: Scalar>(config: &PhantomConfig) -> Result<PhantomDetails<T>, PhantomError> {
    config.validate()?;
    let shape = config.shape;
    let n = shape.iter().product();
    let mut rng = rng_from_seed(config.seed);
    let brain = brain_support(shape);

    let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let texture = gaussian_smooth(&noise, shape, config.texture_smoothing_vox);
    let mean = texture.iter().sum::<f64>() / n as f64;
    let std = (texture.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12);
    let mut img: Vec<f64> = (0..n)
        .map(|i| {
            if brain.data()[i] != 0 {
                config.background_level + config.tissue_texture_scale * (texture[i] - mean) / std
            } else {
                0.0
            }
        })
        .collect();

    let mut vessels = Vec::with_capacity(config.vessel_count);
    for _ in 0..config.vessel_count {
        let tube = sample_vessel(shape, config.vessel_radius_range_vox, &mut rng);
        for p in &tube {
            let i = linear_index(shape, p[0], p[1], p[2]);
            if brain.data()[i] != 0 {
                img[i] *= 1.0 - config.vessel_contrast;
            }
        }
        vessels.push(tube);
    }
    for v in img.iter_mut() {
        *v += config.noise_std * rng.sample::<f64, _>(StandardNormal);
        *v = v.clamp(0.0, 1.0);
    }
    let base = Volume::new(shape, config.spacing, img.into_iter().map(T::of).collect())
        .expect("phantom voxels are finite");

    let mut lesion_rng = rng_from_seed(derive_seed(config.seed, "lesions"));
    for _ in 0..PLACEMENT_RETRIES {
        let mask = sample_pathology_mask(&brain, config.spacing, &config.lesion_prior, &mut lesion_rng)
            .map_err(PhantomError::Unplaceable)?;
        let mut vol = base.clone();
        for (i, &m) in mask.data().iter().enumerate() {
            if m != 0 {
                let v = vol.data()[i].as_f64();
                vol.data_mut()[i] = T::of((v - config.lesion_contrast).max(0.0));
            }
        }
        if lesions_meet_contrast(&vol, &mask, config.lesion_contrast) {
            let domain = if mask.is_empty() { Domain::Healthy } else { Domain::Pathological };
            return Ok(PhantomDetails {
                record: SampleRecord {
                    volume: vol,
                    mask,
                    domain,
                    subject_id: format!("phantom-{:016x}", config.seed),
                },
                brain,
                vessels,
            });
        }
    }
    Err(PhantomError::Contrast(PLACEMENT_RETRIES))
}

/// `n_healthy` lesion-free phantoms followed by `n_pathological` phantoms with
/// at least one lesion, each with its own derived seed.
pub fn generate_dataset<T: Scalar>(
    n_healthy: usize,
    n_pathological: usize,
    config: &PhantomConfig,
    seed: u64,
) -> Result<Vec<SampleRecord<T>>, PhantomError> {
    let mut out = Vec::with_capacity(n_healthy + n_pathological);
    for i in 0..n_healthy {
        let mut cfg = config.clone();
        cfg.seed = derive_seed(seed, &format!("healthy/{i}"));
        cfg.lesion_prior.count_range = [0, 0];
        let mut r = generate_phantom::<T>(&cfg)?;
        r.subject_id = format!("healthy-{i:03}");
        out.push(r);
    }
    for i in 0..n_pathological {
        let mut cfg = config.clone();
        cfg.seed = derive_seed(seed, &format!("pathological/{i}"));
        let [lo, hi] = cfg.lesion_prior.count_range;
        cfg.lesion_prior.count_range = [lo.max(1), hi.max(1)];
        let mut r = generate_phantom::<T>(&cfg)?;
        r.subject_id = format!("pathological-{i:03}");
        out.push(r);
    }
    Ok(out)
}
