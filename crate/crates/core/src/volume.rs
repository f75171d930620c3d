//! Volumes, pathology masks, intensity normalization and axial-slab patching.
//!
//! Voxel data is stored x-fastest: `index = x + X * (y + Y * z)`. This is the
//! same order NIfTI uses on disk and the same order as the `[Z, Y, X]` spatial
//! layout of [`crate::tensor::Tensor`].

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ShapeBuilder};
use nifti::{IntoNdArray, NiftiError, NiftiHeader, NiftiObject, NiftiType, ReaderOptions};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("file not found: {0}")]
    Missing(PathBuf),
    #[error("non-3D payload: dimensions {0:?}")]
    NotThreeD(Vec<u16>),
    #[error("non-scalar payload: datatype {0}")]
    NonScalar(String),
    #[error("corrupt header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad sidecar metadata in {path}: {reason}")]
    Sidecar { path: PathBuf, reason: String },
    #[error("data length {got} does not match shape {shape:?}")]
    Length { got: usize, shape: [usize; 3] },
    #[error("non-finite voxel value at index {0}")]
    NonFinite(usize),
    #[error("voxel spacing must be positive, got {0:?}")]
    Spacing([f64; 3]),
    #[error("mask values must be 0 or 1, found {value} at index {index}")]
    NotBinary { index: usize, value: u8 },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: [usize; 3], right: [usize; 3] },
    #[error("invalid percentile range [{low}, {high}]")]
    Percentiles { low: f64, high: f64 },
    #[error("invalid patch spec: {0}")]
    PatchSpec(String),
    #[error("volume axial plane {volume:?} must equal the patch axial plane {patch:?}")]
    AxialPlane { volume: [usize; 2], patch: [usize; 2] },
    #[error("z extent {z} is smaller than the patch depth {pz}")]
    ZExtent { z: usize, pz: usize },
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

#[inline]
pub(crate) fn linear_index(shape: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + shape[0] * (y + shape[1] * z)
}

fn check_len(len: usize, shape: [usize; 3]) -> Result<()> {
    if len != shape.iter().product::<usize>() {
        return Err(VolumeError::Length { got: len, shape });
    }
    Ok(())
}

/// A 3D scalar image with voxel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    data: Vec<T>,
    shape: [usize; 3],
    spacing: [f64; 3],
}

impl<T: Scalar> Volume<T> {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        check_len(data.len(), shape)?;
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VolumeError::Spacing(spacing));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self { data, shape, spacing })
    }

    pub fn filled(shape: [usize; 3], spacing: [f64; 3], value: T) -> Self {
        Self {
            data: vec![value; shape.iter().product()],
            shape,
            spacing,
        }
    }

    pub fn zeros(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        Self::filled(shape, spacing, T::zero())
    }

    pub fn from_fn(
        shape: [usize; 3],
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { data, shape, spacing }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to voxels. Callers are responsible for keeping values finite.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        linear_index(self.shape, x, y, z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            shape: self.shape,
            spacing: self.spacing,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Volume<U> {
        Volume {
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            shape: self.shape,
            spacing: self.spacing,
        }
    }

    /// Copies the box `[origin, origin + shape)`, which must lie inside the volume.
    pub fn crop(&self, origin: [usize; 3], shape: [usize; 3]) -> Self {
        Self::from_fn(shape, self.spacing, |x, y, z| {
            self.get(origin[0] + x, origin[1] + y, origin[2] + z)
        })
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }
}

/// Binary 3D mask aligned with a [`Volume`]. All zeros for healthy samples.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PathologyMask {
    data: Vec<u8>,
    shape: [usize; 3],
}

impl PathologyMask {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        check_len(data.len(), shape)?;
        if let Some(index) = data.iter().position(|&v| v > 1) {
            return Err(VolumeError::NotBinary { index, value: data[index] });
        }
        Ok(Self { data, shape })
    }

    /// The all-zero healthy mask.
    pub fn empty(shape: [usize; 3]) -> Self {
        Self {
            data: vec![0; shape.iter().product()],
            shape,
        }
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    data.push(f(x, y, z) as u8);
                }
            }
        }
        Self { data, shape }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        linear_index(self.shape, x, y, z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.index(x, y, z)] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.index(x, y, z);
        self.data[i] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn crop(&self, origin: [usize; 3], shape: [usize; 3]) -> Self {
        Self::from_fn(shape, |x, y, z| self.get(origin[0] + x, origin[1] + y, origin[2] + z))
    }

    /// Mask values as scalars (0 or 1).
    pub fn to_scalars<T: Scalar>(&self) -> Vec<T> {
        self.data.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect()
    }

    pub fn check_pairs_with<T: Scalar>(&self, v: &Volume<T>) -> Result<()> {
        if self.shape != v.shape() {
            return Err(VolumeError::ShapeMismatch { left: v.shape(), right: self.shape });
        }
        Ok(())
    }
}

/// Patch geometry for axial-slab extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSpec {
    /// `(px, py, pz)` in voxels.
    pub patch_shape: [usize; 3],
    /// Fraction of `pz` shared by consecutive patches, in `[0, 1)`.
    pub z_overlap_fraction: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            patch_shape: [160, 146, 32],
            z_overlap_fraction: 0.5,
        }
    }
}

impl PatchSpec {
    pub fn new(patch_shape: [usize; 3], z_overlap_fraction: f64) -> Result<Self> {
        let spec = Self { patch_shape, z_overlap_fraction };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_shape.contains(&0) {
            return Err(VolumeError::PatchSpec(format!(
                "patch shape {:?} has a zero extent",
                self.patch_shape
            )));
        }
        if !(0.0..1.0).contains(&self.z_overlap_fraction) {
            return Err(VolumeError::PatchSpec(format!(
                "z overlap fraction {} outside [0, 1)",
                self.z_overlap_fraction
            )));
        }
        if self.raw_stride() < 1 {
            return Err(VolumeError::PatchSpec("z stride rounds to 0".into()));
        }
        Ok(())
    }

    fn raw_stride(&self) -> usize {
        (self.patch_shape[2] as f64 * (1.0 - self.z_overlap_fraction)).round() as usize
    }

    pub fn stride_z(&self) -> usize {
        self.raw_stride().max(1)
    }

    /// Z origins of the slabs covering `[0, z_extent)`. A tail slab anchored at
    /// `z_extent - pz` is appended when the regular grid stops short.
    pub fn z_origins(&self, z_extent: usize) -> Result<Vec<usize>> {
        self.validate()?;
        let pz = self.patch_shape[2];
        if z_extent < pz {
            return Err(VolumeError::ZExtent { z: z_extent, pz });
        }
        let stride = self.stride_z();
        let mut origins: Vec<usize> = (0..=(z_extent - pz) / stride).map(|i| i * stride).collect();
        let last = *origins.last().expect("at least one origin");
        if last + pz < z_extent {
            origins.push(z_extent - pz);
        }
        Ok(origins)
    }
}

/// One slab cut from a volume/mask pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch<T> {
    pub volume: Volume<T>,
    pub mask: PathologyMask,
    pub origin: [usize; 3],
}

/// Cuts full-axial-plane slabs with the configured z overlap.
pub fn extract_patches<T: Scalar>(
    v: &Volume<T>,
    m: &PathologyMask,
    spec: &PatchSpec,
) -> Result<Vec<Patch<T>>> {
    m.check_pairs_with(v)?;
    let [px, py, _] = spec.patch_shape;
    let [x, y, z] = v.shape();
    if [x, y] != [px, py] {
        return Err(VolumeError::AxialPlane { volume: [x, y], patch: [px, py] });
    }
    Ok(spec
        .z_origins(z)?
        .into_iter()
        .map(|oz| {
            let origin = [0, 0, oz];
            Patch {
                volume: v.crop(origin, spec.patch_shape),
                mask: m.crop(origin, spec.patch_shape),
                origin,
            }
        })
        .collect())
}

/// Reassembles patches into a volume of `full_shape`, averaging overlaps voxelwise.
/// Voxels covered by no patch are zero.
pub fn stitch_patches<T: Scalar>(
    patches: &[Volume<T>],
    origins: &[[usize; 3]],
    full_shape: [usize; 3],
) -> Result<Volume<T>> {
    if patches.len() != origins.len() {
        return Err(VolumeError::PatchSpec(format!(
            "{} patches but {} origins",
            patches.len(),
            origins.len()
        )));
    }
    let spacing = patches.first().map(|p| p.spacing()).unwrap_or([1.0; 3]);
    let n = full_shape.iter().product();
    let mut sum = vec![T::zero(); n];
    let mut count = vec![0u32; n];
    for (p, o) in patches.iter().zip(origins) {
        let s = p.shape();
        if (0..3).any(|a| o[a] + s[a] > full_shape[a]) {
            return Err(VolumeError::PatchSpec(format!(
                "patch at {o:?} with shape {s:?} exceeds {full_shape:?}"
            )));
        }
        for z in 0..s[2] {
            for y in 0..s[1] {
                for x in 0..s[0] {
                    let i = linear_index(full_shape, o[0] + x, o[1] + y, o[2] + z);
                    sum[i] += p.get(x, y, z);
                    count[i] += 1;
                }
            }
        }
    }
    let data = sum
        .into_iter()
        .zip(count)
        .map(|(s, c)| if c == 0 { T::zero() } else { s / T::of(c as f64) })
        .collect();
    Volume::new(full_shape, spacing, data)
}

/// Percentile of ascending-sorted data using linear interpolation between closest ranks.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let rank = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Clips to the `[low_pct, high_pct]` percentile range of this volume and
/// rescales to `[0, 1]`. A constant volume maps to zeros.
pub fn clip_and_rescale<T: Scalar>(v: &Volume<T>, low_pct: f64, high_pct: f64) -> Result<Volume<T>> {
    if !(0.0 <= low_pct && low_pct < high_pct && high_pct <= 100.0) {
        return Err(VolumeError::Percentiles { low: low_pct, high: high_pct });
    }
    if v.is_empty() {
        return Ok(v.clone());
    }
    let mut sorted: Vec<f64> = v.data().iter().map(|x| x.as_f64()).collect();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, low_pct);
    let hi = percentile_sorted(&sorted, high_pct);
    if hi <= lo {
        return Ok(Volume::zeros(v.shape(), v.spacing()));
    }
    let range = hi - lo;
    Ok(v.map(|x| T::of((x.as_f64().clamp(lo, hi) - lo) / range)))
}

// ---------------------------------------------------------------------------
// NIfTI-1

fn nifti_err(path: &Path, e: NiftiError) -> VolumeError {
    match e {
        NiftiError::Io(source) if source.kind() != std::io::ErrorKind::UnexpectedEof => {
            VolumeError::Io { path: path.to_owned(), source }
        }
        NiftiError::UnsupportedDataType(t) => VolumeError::NonScalar(format!("{t:?}")),
        other => VolumeError::CorruptHeader { path: path.to_owned(), reason: other.to_string() },
    }
}

fn read_nifti_xyz(path: &Path) -> Result<(Vec<f64>, [usize; 3], [f64; 3], NiftiType)> {
    if !path.exists() {
        return Err(VolumeError::Missing(path.to_owned()));
    }
    let obj = ReaderOptions::new().read_file(path).map_err(|e| nifti_err(path, e))?;
    let header = obj.header();
    let dims = header.dim().map_err(|e| nifti_err(path, e))?.to_vec();
    if dims.len() < 3 || dims[3..].iter().any(|&d| d != 1) {
        return Err(VolumeError::NotThreeD(dims));
    }
    let datatype = header.data_type().map_err(|e| nifti_err(path, e))?;
    match datatype {
        NiftiType::Rgb24
        | NiftiType::Rgba32
        | NiftiType::Complex64
        | NiftiType::Complex128
        | NiftiType::Complex256 => return Err(VolumeError::NonScalar(format!("{datatype:?}"))),
        _ => {}
    }
    let shape = [dims[0] as usize, dims[1] as usize, dims[2] as usize];
    let spacing = [1, 2, 3].map(|i| pixdim_to_f64(header.pixdim[i]));
    let arr = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| nifti_err(path, e))?;
    let arr = arr
        .into_shape(shape.to_vec())
        .map_err(|e| VolumeError::CorruptHeader { path: path.to_owned(), reason: e.to_string() })?;
    let mut data = Vec::with_capacity(arr.len());
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                data.push(arr[[x, y, z].as_slice()]);
            }
        }
    }
    Ok((data, shape, spacing, datatype))
}

/// `pixdim` is stored as f32; decode through its shortest decimal form so
/// spacings such as 0.98 come back exactly as written.
fn pixdim_to_f64(p: f32) -> f64 {
    p.to_string().parse().unwrap_or(p as f64)
}

fn reference_header(spacing: [f64; 3]) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.pixdim = [1.0, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    // mm
    h.xyzt_units = 2;
    h
}

fn to_array3<E: Copy>(shape: [usize; 3], data: &[E]) -> Array3<E> {
    // x-fastest buffer is Fortran order for a logical (x, y, z) array
    Array3::from_shape_vec((shape[0], shape[1], shape[2]).f(), data.to_vec())
        .expect("length checked by constructor")
}

fn write_nifti<E>(path: &Path, shape: [usize; 3], spacing: [f64; 3], data: &[E]) -> Result<()>
where
    E: nifti::DataElement + bytemuck::Pod,
{
    let header = reference_header(spacing);
    let arr = to_array3(shape, data);
    nifti::writer::WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&arr)
        .map_err(|e| nifti_err(path, e))
}

/// Reads a scalar 3D NIfTI-1 volume (`.nii` or `.nii.gz`). No normalization is applied.
pub fn load_volume<T: Scalar>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let path = path.as_ref();
    let (data, shape, spacing, _) = read_nifti_xyz(path)?;
    let spacing = if spacing.iter().all(|s| *s > 0.0) { spacing } else { [1.0; 3] };
    Volume::new(shape, spacing, data.into_iter().map(T::of).collect())
}

/// Writes a volume as NIfTI-1 at the precision of `T` (FLOAT32 or FLOAT64).
pub fn save_volume<T: Scalar>(v: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if T::NAME == "f32" {
        let data: Vec<f32> = v.data().iter().map(|x| x.as_f64() as f32).collect();
        write_nifti(path, v.shape(), v.spacing(), &data)
    } else {
        let data: Vec<f64> = v.data().iter().map(|x| x.as_f64()).collect();
        write_nifti(path, v.shape(), v.spacing(), &data)
    }
}

/// Reads a mask; any non-zero voxel becomes 1.
pub fn load_mask(path: impl AsRef<Path>) -> Result<PathologyMask> {
    let path = path.as_ref();
    let (data, shape, _, _) = read_nifti_xyz(path)?;
    PathologyMask::new(shape, data.into_iter().map(|v| (v != 0.0) as u8).collect())
}

/// Writes a mask as 8-bit NIfTI-1.
pub fn save_mask(m: &PathologyMask, spacing: [f64; 3], path: impl AsRef<Path>) -> Result<()> {
    write_nifti(path.as_ref(), m.shape(), spacing, m.data())
}

// ---------------------------------------------------------------------------
// Raw test format: little-endian f32, x-fastest, plus a JSON sidecar.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSidecar {
    shape: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_raw<T: Scalar>(v: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| VolumeError::Io { path: path.to_owned(), source };
    let bytes: Vec<u8> = v
        .data()
        .iter()
        .flat_map(|x| (x.as_f64() as f32).to_le_bytes())
        .collect();
    fs::write(path, bytes).map_err(io)?;
    let meta = RawSidecar {
        shape: v.shape(),
        spacing: v.spacing(),
        dtype: "float32-le".into(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("sidecar serializes");
    fs::write(sidecar_path(path), json).map_err(io)
}

pub fn load_raw<T: Scalar>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    for p in [path, side.as_path()] {
        if !p.exists() {
            return Err(VolumeError::Missing(p.to_owned()));
        }
    }
    let io = |source| VolumeError::Io { path: path.to_owned(), source };
    let meta: RawSidecar = serde_json::from_str(&fs::read_to_string(&side).map_err(io)?)
        .map_err(|e| VolumeError::Sidecar { path: side.clone(), reason: e.to_string() })?;
    if meta.dtype != "float32-le" {
        return Err(VolumeError::Sidecar { path: side, reason: format!("dtype {}", meta.dtype) });
    }
    let bytes = fs::read(path).map_err(io)?;
    if bytes.len() % 4 != 0 {
        return Err(VolumeError::Length { got: bytes.len() / 4, shape: meta.shape });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Volume::new(meta.shape, meta.spacing, data)
}
