//! Classical data augmentation: axial flip, in-plane rotation, isotropic
//! scaling, shear and intensity scaling/shifting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::volume::{PathologyMask, Volume};
use crate::Scalar;

use super::DetectError;

/// Sampling ranges. Each transform is drawn independently.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CdaParams {
    pub flip_probability: f64,
    /// In-plane rotation angle drawn from `[-max, max]` degrees.
    pub max_rotation_deg: f64,
    pub scale_range: [f64; 2],
    /// `x += shear * y` with shear drawn from `[-max, max]`.
    pub max_shear: f64,
    pub intensity_scale_range: [f64; 2],
    pub intensity_shift_range: [f64; 2],
}

impl Default for CdaParams {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            max_rotation_deg: 15.0,
            scale_range: [0.9, 1.1],
            max_shear: 0.1,
            intensity_scale_range: [0.9, 1.1],
            intensity_shift_range: [-0.05, 0.05],
        }
    }
}

impl CdaParams {
    pub fn validate(&self) -> Result<(), DetectError> {
        let range = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        let ok = (0.0..=1.0).contains(&self.flip_probability)
            && self.max_rotation_deg.is_finite()
            && self.max_rotation_deg >= 0.0
            && range(self.scale_range)
            && self.scale_range[0] > 0.0
            && self.max_shear.is_finite()
            && self.max_shear >= 0.0
            && range(self.intensity_scale_range)
            && range(self.intensity_shift_range);
        if ok {
            Ok(())
        } else {
            Err(DetectError::Config(format!("invalid augmentation ranges {self:?}")))
        }
    }
}

/// One concrete augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CdaTransform {
    /// Mirror along x (left-right), which flips the axial plane.
    pub flip: bool,
    pub rotation_rad: f64,
    pub scale: f64,
    pub shear: f64,
    /// `out = intensity_scale * in + intensity_shift`.
    pub intensity_scale: f64,
    pub intensity_shift: f64,
}

impl CdaTransform {
    pub const IDENTITY: Self =
        Self { flip: false, rotation_rad: 0.0, scale: 1.0, shear: 0.0, intensity_scale: 1.0, intensity_shift: 0.0 };

    pub fn sample<R: Rng + ?Sized>(p: &CdaParams, rng: &mut R) -> Self {
        let uniform = |rng: &mut R, r: [f64; 2]| if r[0] < r[1] { rng.gen_range(r[0]..=r[1]) } else { r[0] };
        let sym = |rng: &mut R, m: f64| uniform(rng, [-m, m]);
        Self {
            flip: rng.gen_bool(p.flip_probability),
            rotation_rad: sym(rng, p.max_rotation_deg).to_radians(),
            scale: uniform(rng, p.scale_range),
            shear: sym(rng, p.max_shear),
            intensity_scale: uniform(rng, p.intensity_scale_range),
            intensity_shift: uniform(rng, p.intensity_shift_range),
        }
    }

    fn is_rigid_identity(&self) -> bool {
        self.rotation_rad == 0.0 && self.scale == 1.0 && self.shear == 0.0
    }

    /// Inverse of the in-plane matrix `R(theta) * s * [[1, shear], [0, 1]]`.
    fn inverse_in_plane(&self) -> [[f64; 2]; 2] {
        let (c, s) = (self.rotation_rad.cos(), self.rotation_rad.sin());
        let a = [
            [self.scale * c, self.scale * (c * self.shear - s)],
            [self.scale * s, self.scale * (s * self.shear + c)],
        ];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]]
    }

    /// Source position (in the unflipped input) sampled by output voxel `(x, y)`.
    fn source(&self, inv: &[[f64; 2]; 2], center: [f64; 2], x: usize, y: usize) -> [f64; 2] {
        let d = [x as f64 - center[0], y as f64 - center[1]];
        [
            center[0] + inv[0][0] * d[0] + inv[0][1] * d[1],
            center[1] + inv[1][0] * d[0] + inv[1][1] * d[1],
        ]
    }
}

fn flip_x<T: Copy>(data: &[T], shape: [usize; 3]) -> Vec<T> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(shape[0]) {
        row.reverse();
    }
    out
}

/// Applies `t` to an image and its mask. The mask uses nearest-neighbour
/// sampling and stays binary; image samples outside the patch repeat the edge.
pub fn apply_transform<T: Scalar>(
    image: &Volume<T>,
    mask: &PathologyMask,
    t: &CdaTransform,
) -> Result<(Volume<T>, PathologyMask), DetectError> {
    mask.check_pairs_with(image)?;
    let shape = image.shape();
    let (mut img, mut msk) = (image.data().to_vec(), mask.data().to_vec());
    if t.flip {
        img = flip_x(&img, shape);
        msk = flip_x(&msk, shape);
    }
    if !t.is_rigid_identity() {
        let inv = t.inverse_in_plane();
        let center = [(shape[0] as f64 - 1.0) / 2.0, (shape[1] as f64 - 1.0) / 2.0];
        let (src_img, src_msk) = (img.clone(), msk.clone());
        let plane = shape[0] * shape[1];
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                let [sx, sy] = t.source(&inv, center, x, y);
                let (nx, ny) = (sx.round(), sy.round());
                let in_bounds = |v: f64, n: usize| v >= 0.0 && v <= (n - 1) as f64;
                let nearest = (in_bounds(nx, shape[0]) && in_bounds(ny, shape[1]))
                    .then(|| nx as usize + shape[0] * ny as usize);
                let cx = sx.clamp(0.0, (shape[0] - 1) as f64);
                let cy = sy.clamp(0.0, (shape[1] - 1) as f64);
                let (x0, y0) = (cx.floor() as usize, cy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(shape[0] - 1), (y0 + 1).min(shape[1] - 1));
                let (fx, fy) = (cx - x0 as f64, cy - y0 as f64);
                for z in 0..shape[2] {
                    let base = z * plane;
                    let at = |xx: usize, yy: usize| src_img[base + xx + shape[0] * yy].as_f64();
                    let v = (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x1, y0))
                        + fy * ((1.0 - fx) * at(x0, y1) + fx * at(x1, y1));
                    let o = base + x + shape[0] * y;
                    img[o] = T::of(v);
                    msk[o] = nearest.map_or(0, |i| src_msk[base + i]);
                }
            }
        }
    }
    if t.intensity_scale != 1.0 || t.intensity_shift != 0.0 {
        let (a, b) = (t.intensity_scale, t.intensity_shift);
        for v in img.iter_mut() {
            *v = T::of((a * v.as_f64() + b).clamp(0.0, 1.0));
        }
    } else {
        for v in img.iter_mut() {
            *v = v.max(T::zero()).min(T::one());
        }
    }
    Ok((Volume::new(shape, image.spacing(), img)?, PathologyMask::new(shape, msk)?))
}

/// Samples a transform from `params` and applies it.
pub fn apply_cda<T: Scalar, R: Rng + ?Sized>(
    image: &Volume<T>,
    mask: &PathologyMask,
    rng: &mut R,
    params: &CdaParams,
) -> Result<(Volume<T>, PathologyMask), DetectError> {
    let t = CdaTransform::sample(params, rng);
    apply_transform(image, mask, &t)
}
