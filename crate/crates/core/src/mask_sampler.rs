//! Semi-random pathology masks for healthy-to-pathological synthesis.
//!
//! A sampled mask is a union of rasterized ellipsoids placed uniformly inside
//! the eroded foreground. A voxel belongs to a lesion iff its center lies inside
//! the continuous ellipsoid. The longest semi-axis never exceeds
//! `radius_range_mm[1]` (at most 5 mm), so every lesion spans at most 10 mm.
//! Lesions are kept at least [`LESION_GAP_VOX`] voxels apart so each one is its
//! own connected component with a clean surrounding shell.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::morphology::{erode, for_each_neighbor};
use crate::record::{Domain, SampleRecord};
use crate::volume::{extract_patches, PatchSpec, PathologyMask, Volume, VolumeError};
use crate::Scalar;

/// Minimum Chebyshev distance, in voxels, kept clear between two lesions.
pub const LESION_GAP_VOX: usize = 3;

const ATTEMPTS_PER_LESION: usize = 200;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("no placement region: foreground is empty after eroding by {margin} voxels")]
    NoPlacementRegion { margin: usize },
    #[error("could only place {placed} of the required {required} lesions")]
    Crowded { placed: usize, required: usize },
    #[error("invalid lesion prior: {0}")]
    InvalidPrior(String),
    #[error("foreground shape {foreground:?} differs from the patch shape {expected:?}")]
    Shape { foreground: [usize; 3], expected: [usize; 3] },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Geometry prior for sampled microbleeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LesionPrior {
    /// Inclusive `[min, max]` number of lesions per mask.
    pub count_range: [usize; 2],
    /// Inclusive `[rmin, rmax]` of the longest semi-axis, in mm.
    pub radius_range_mm: [f64; 2],
    pub elongation_prob: f64,
    /// `[1, emax]` ratio between the long semi-axis and the two short ones.
    pub elongation_ratio_range: [f64; 2],
    pub foreground_margin_vox: usize,
}

impl Default for LesionPrior {
    fn default() -> Self {
        Self {
            count_range: [1, 3],
            radius_range_mm: [1.5, 3.0],
            elongation_prob: 0.2,
            elongation_ratio_range: [1.0, 2.0],
            foreground_margin_vox: 3,
        }
    }
}

impl LesionPrior {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: String| Err(SamplerError::InvalidPrior(m));
        let [cmin, cmax] = self.count_range;
        let [rmin, rmax] = self.radius_range_mm;
        let [emin, emax] = self.elongation_ratio_range;
        if cmin > cmax {
            return bad(format!("count range [{cmin}, {cmax}] is inverted"));
        }
        if !(rmin > 0.0 && rmin <= rmax) {
            return bad(format!("radius range [{rmin}, {rmax}] must satisfy 0 < rmin <= rmax"));
        }
        if 2.0 * rmax > 10.0 {
            return bad(format!("diameter 2*{rmax} mm exceeds 10 mm"));
        }
        if !(0.0..=1.0).contains(&self.elongation_prob) {
            return bad(format!("elongation probability {} outside [0, 1]", self.elongation_prob));
        }
        if !(emin >= 1.0 && emin <= emax && emax.is_finite()) {
            return bad(format!("elongation ratios [{emin}, {emax}] must satisfy 1 <= emin <= emax"));
        }
        Ok(())
    }
}

/// A sampled ellipsoid in physical (mm) coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center_mm: [f64; 3],
    /// Orthonormal axes; `axes[0]` is the long axis.
    pub axes: [[f64; 3]; 3],
    pub semi_axes_mm: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p_mm: [f64; 3]) -> bool {
        let d = [
            p_mm[0] - self.center_mm[0],
            p_mm[1] - self.center_mm[1],
            p_mm[2] - self.center_mm[2],
        ];
        let mut r = 0.0;
        for (axis, &semi) in self.axes.iter().zip(&self.semi_axes_mm) {
            let proj = d[0] * axis[0] + d[1] * axis[1] + d[2] * axis[2];
            r += (proj / semi) * (proj / semi);
        }
        r <= 1.0
    }

    /// Voxels whose centers fall inside the ellipsoid, clipped to `shape`.
    pub fn rasterize(&self, shape: [usize; 3], spacing: [f64; 3]) -> Vec<[usize; 3]> {
        let reach = self.semi_axes_mm[0];
        let range = |a: usize| {
            let lo = ((self.center_mm[a] - reach) / spacing[a]).floor().max(0.0) as usize;
            let hi = ((self.center_mm[a] + reach) / spacing[a]).ceil().max(0.0) as usize;
            lo..=hi.min(shape[a] - 1)
        };
        let mut out = Vec::new();
        for z in range(2) {
            for y in range(1) {
                for x in range(0) {
                    let p = [x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]];
                    if self.contains(p) {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0f64),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return v.map(|c| c / n);
        }
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn orthonormal_frame(long: [f64; 3]) -> [[f64; 3]; 3] {
    let helper = if long[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = cross(long, helper);
    let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    let u = u.map(|c| c / n);
    let w = cross(long, u);
    [long, u, w]
}

/// Draws one lesion shape centered on the voxel `center`.
pub fn sample_ellipsoid<R: Rng + ?Sized>(
    center: [usize; 3],
    spacing: [f64; 3],
    prior: &LesionPrior,
    rng: &mut R,
) -> Ellipsoid {
    let [rmin, rmax] = prior.radius_range_mm;
    let long = if rmax > rmin { rng.gen_range(rmin..=rmax) } else { rmin };
    let ratio = if rng.gen_bool(prior.elongation_prob) {
        let [emin, emax] = prior.elongation_ratio_range;
        if emax > emin { rng.gen_range(emin..=emax) } else { emin }
    } else {
        1.0
    };
    Ellipsoid {
        center_mm: [0, 1, 2].map(|a| center[a] as f64 * spacing[a]),
        axes: orthonormal_frame(random_unit(rng)),
        semi_axes_mm: [long, long / ratio, long / ratio],
    }
}

/// Samples a lesion mask inside `foreground` (eroded by the prior's margin).
pub fn sample_pathology_mask<R: Rng + ?Sized>(
    foreground: &PathologyMask,
    spacing: [f64; 3],
    prior: &LesionPrior,
    rng: &mut R,
) -> Result<PathologyMask, SamplerError> {
    prior.validate()?;
    sample_in_region(&placement_region(foreground, prior), spacing, prior, rng)
}

/// Voxels eligible to host lesion voxels: the foreground eroded by the prior's margin.
pub fn placement_region(foreground: &PathologyMask, prior: &LesionPrior) -> PathologyMask {
    erode(foreground, prior.foreground_margin_vox)
}

/// Like [`sample_pathology_mask`] with a precomputed [`placement_region`].
pub fn sample_in_region<R: Rng + ?Sized>(
    region: &PathologyMask,
    spacing: [f64; 3],
    prior: &LesionPrior,
    rng: &mut R,
) -> Result<PathologyMask, SamplerError> {
    let shape = region.shape();
    let sites: Vec<[usize; 3]> = (0..region.data().len())
        .filter(|&i| region.data()[i] != 0)
        .map(|i| [i % shape[0], (i / shape[0]) % shape[1], i / (shape[0] * shape[1])])
        .collect();
    if sites.is_empty() {
        return Err(SamplerError::NoPlacementRegion { margin: prior.foreground_margin_vox });
    }
    let [cmin, cmax] = prior.count_range;
    let target = rng.gen_range(cmin..=cmax);
    let mut mask = PathologyMask::empty(shape);
    // voxels within LESION_GAP_VOX of a placed lesion
    let mut blocked = PathologyMask::empty(shape);
    let mut placed = 0;
    'lesions: for _ in 0..target {
        for _ in 0..ATTEMPTS_PER_LESION {
            let center = sites[rng.gen_range(0..sites.len())];
            let e = sample_ellipsoid(center, spacing, prior, rng);
            let voxels = e.rasterize(shape, spacing);
            let fits = voxels
                .iter()
                .all(|v| region.get(v[0], v[1], v[2]) && !blocked.get(v[0], v[1], v[2]));
            if !fits {
                continue;
            }
            for &v in &voxels {
                mask.set(v[0], v[1], v[2], true);
                blocked.set(v[0], v[1], v[2], true);
                for_each_neighbor(v, shape, LESION_GAP_VOX, |q| blocked.set(q[0], q[1], q[2], true));
            }
            placed += 1;
            continue 'lesions;
        }
        break;
    }
    if placed < cmin {
        return Err(SamplerError::Crowded { placed, required: cmin });
    }
    Ok(mask)
}

/// Voxels brighter than `threshold`; a brain-support estimate for skull-stripped images.
pub fn intensity_foreground<T: Scalar>(v: &Volume<T>, threshold: f64) -> PathologyMask {
    let t = T::of(threshold);
    PathologyMask::from_fn(v.shape(), |x, y, z| v.get(x, y, z) > t)
}

/// The healthy mask `y_h`.
pub fn empty_mask(shape: [usize; 3]) -> PathologyMask {
    PathologyMask::empty(shape)
}

/// Patch-cut annotated masks of every pathological record.
pub fn harvest_real_masks<T: Scalar>(
    records: &[SampleRecord<T>],
    spec: &PatchSpec,
) -> Result<Vec<PathologyMask>, SamplerError> {
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.domain == Domain::Pathological) {
        for p in extract_patches(&r.volume, &r.mask, spec)? {
            out.push(p.mask);
        }
    }
    Ok(out)
}
