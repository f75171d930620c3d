//! Dense row-major tensors and the raw 3D convolution kernels behind [`crate::autodiff`].
//!
//! Image batches are `[N, C, Z, Y, X]`; convolution weights are `[Cout, Cin, K, K, K]`.

use serde::{Deserialize, Serialize};

use crate::volume::Volume;
use crate::scalar::{Mat, MatMut};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match data length {}",
            data.len()
        );
        Self { shape, data }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![v; n] }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

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

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks single-channel volumes into a `[N, 1, Z, Y, X]` batch.
    pub fn from_volumes(vols: &[&Volume<T>]) -> Self {
        assert!(!vols.is_empty(), "empty batch");
        let [x, y, z] = vols[0].shape();
        let mut data = Vec::with_capacity(vols.len() * x * y * z);
        for v in vols {
            assert_eq!(v.shape(), [x, y, z], "batch volumes differ in shape");
            data.extend_from_slice(v.data());
        }
        Self::new(vec![vols.len(), 1, z, y, x], data)
    }

    /// Stacks equally-shaped `[Z, Y, X]` channel buffers into a `[N, 1, Z, Y, X]` batch.
    pub fn from_channels(spatial_xyz: [usize; 3], items: &[Vec<T>]) -> Self {
        let [x, y, z] = spatial_xyz;
        let data: Vec<T> = items.iter().flat_map(|v| v.iter().copied()).collect();
        Self::new(vec![items.len(), 1, z, y, x], data)
    }

    /// Sample `n`, channel `c` of a 5D batch as a volume.
    pub fn to_volume(&self, n: usize, c: usize, spacing: [f64; 3]) -> Volume<T> {
        let [_, ch, z, y, x] = dims5(self);
        let sz = x * y * z;
        let start = (n * ch + c) * sz;
        Volume::new([x, y, z], spacing, self.data[start..start + sz].to_vec())
            .expect("tensor values are finite")
    }
}

pub(crate) fn dims5<T>(t: &Tensor<T>) -> [usize; 5] {
    let s = &t.shape;
    assert_eq!(s.len(), 5, "expected a 5D tensor, got shape {s:?}");
    [s[0], s[1], s[2], s[3], s[4]]
}

/// Isotropic stride and zero padding of a 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }

    /// Output length along one axis, or `None` when the kernel does not fit.
    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        (padded >= kernel).then(|| (padded - kernel) / self.stride + 1)
    }

    /// Output indices `o` with `0 <= o * stride + k - pad < input`.
    #[inline]
    fn valid(&self, k: usize, input: usize, output: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        let top = input + self.pad;
        if top <= k {
            return (0, 0);
        }
        let hi = ((top - 1 - k) / s + 1).min(output);
        (lo.min(hi), hi)
    }
}

fn out_dims(g: ConvGeom, input: [usize; 3], kernel: [usize; 3]) -> [usize; 3] {
    let f = |a: usize| {
        g.out_len(input[a], kernel[a])
            .unwrap_or_else(|| panic!("kernel {kernel:?} larger than padded input {input:?}"))
    };
    [f(0), f(1), f(2)]
}

/// Geometry of one convolution: input, kernel and output extents.
struct Lowering {
    geom: ConvGeom,
    ci: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
}

impl Lowering {
    fn rows(&self) -> usize {
        self.ci * self.kernel.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.output.iter().product()
    }

    /// Calls `f(col_offset, x_offset, len)` for every run of the lowered matrix.
    /// A run covers `len` consecutive matrix entries and input voxels `stride` apart.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [d, h, wd] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let (s, pad) = (self.geom.stride, self.geom.pad);
        let p = self.cols();
        for c in 0..self.ci {
            for kz in 0..kd {
                let (zlo, zhi) = self.geom.valid(kz, d, od);
                for ky in 0..kh {
                    let (ylo, yhi) = self.geom.valid(ky, h, oh);
                    for kx in 0..kw {
                        let (xlo, xhi) = self.geom.valid(kx, wd, ow);
                        if xlo >= xhi {
                            continue;
                        }
                        let row = ((c * kd + kz) * kh + ky) * kw + kx;
                        for oz in zlo..zhi {
                            let iz = oz * s + kz - pad;
                            for oy in ylo..yhi {
                                let iy = oy * s + ky - pad;
                                let col = row * p + (oz * oh + oy) * ow;
                                let xrow = ((c * d + iz) * h + iy) * wd;
                                f(col + xlo, xrow + xlo * s + kx - pad, xhi - xlo);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Gathers the receptive fields of one sample into a `rows x cols` matrix.
    /// Entries that fall into the padding are left untouched (zero).
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let s = self.geom.stride;
        self.for_each_run(|c, i, n| {
            if s == 1 {
                col[c..c + n].copy_from_slice(&x[i..i + n]);
            } else if n > 0 {
                let src = &x[i..i + (n - 1) * s + 1];
                for (j, dst) in col[c..c + n].iter_mut().enumerate() {
                    *dst = src[j * s];
                }
            }
        });
    }

    /// Scatter-adds a lowered matrix back onto one input-shaped sample.
    fn col2im<T: Scalar>(&self, col: &[T], x: &mut [T]) {
        let s = self.geom.stride;
        self.for_each_run(|c, i, n| {
            for (xv, &cv) in x[i..].iter_mut().step_by(s).zip(&col[c..c + n]) {
                *xv += cv;
            }
        });
    }
}

fn mat<T>(data: &[T], rs: usize, cs: usize) -> Mat<'_, T> {
    Mat { data, rs, cs }
}

fn mat_mut<T>(data: &mut [T], rs: usize, cs: usize) -> MatMut<'_, T> {
    MatMut { data, rs, cs }
}

/// Eight-lane dot product.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ac.remainder().iter().zip(bc.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Zero-padded copy of a 5D tensor with every `[Z, Y, X]` volume grown by `pad`
/// on each side, plus `slack` trailing zeros so shifted plane reads stay in bounds.
struct Padded<T> {
    data: Vec<T>,
    dims: [usize; 3],
}

impl<T: Scalar> Padded<T> {
    fn new(x: &Tensor<T>, pad: usize, slack: usize) -> Self {
        let [n, c, d, h, w] = dims5(x);
        let dims = [d + 2 * pad, h + 2 * pad, w + 2 * pad];
        let [dp, hp, wp] = dims;
        let mut data = vec![T::zero(); n * c * dp * hp * wp + slack];
        for v in 0..n * c {
            for z in 0..d {
                for y in 0..h {
                    let src = ((v * d + z) * h + y) * w;
                    let dst = ((v * dp + z + pad) * hp + y + pad) * wp + pad;
                    data[dst..dst + w].copy_from_slice(&x.data[src..src + w]);
                }
            }
        }
        Self { data, dims }
    }

    fn plane(&self, volume: usize, z: usize) -> usize {
        (volume * self.dims[0] + z) * self.dims[1] * self.dims[2]
    }
}

/// Stride-1 correlation. Each output z-plane is accumulated as one run of
/// `oh * wp` values over the padded width; the extra columns are cropped.
fn conv3d_direct<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, pad: usize) -> Tensor<T> {
    let [n, ci, d, h, wd] = dims5(x);
    let [co, _, kd, kh, kw] = dims5(w);
    let [od, oh, ow] = out_dims(ConvGeom::new(1, pad), [d, h, wd], [kd, kh, kw]);
    let xp = Padded::new(x, pad, kw);
    let wp = xp.dims[2];
    let run = oh * wp;
    let ksz = kd * kh * kw;
    let mut out = vec![T::zero(); n * co * od * oh * ow];
    let mut acc = vec![T::zero(); run];
    for b in 0..n {
        for o in 0..co {
            for oz in 0..od {
                acc.iter_mut().for_each(|v| *v = T::zero());
                for c in 0..ci {
                    let wk = &w.data[(o * ci + c) * ksz..][..ksz];
                    for kz in 0..kd {
                        let base = xp.plane(b * ci + c, oz + kz);
                        for ky in 0..kh {
                            let row = &wk[(kz * kh + ky) * kw..][..kw];
                            let start = base + ky * wp;
                            if kw == 3 {
                                let (w0, w1, w2) = (row[0], row[1], row[2]);
                                let s0 = &xp.data[start..][..run];
                                let s1 = &xp.data[start + 1..][..run];
                                let s2 = &xp.data[start + 2..][..run];
                                for (((a, &v0), &v1), &v2) in acc.iter_mut().zip(s0).zip(s1).zip(s2) {
                                    *a += w0 * v0 + w1 * v1 + w2 * v2;
                                }
                                continue;
                            }
                            for (kx, &wv) in row.iter().enumerate() {
                                let src = &xp.data[start + kx..][..run];
                                for (a, &v) in acc.iter_mut().zip(src) {
                                    *a += wv * v;
                                }
                            }
                        }
                    }
                }
                for oy in 0..oh {
                    let dst = (((b * co + o) * od + oz) * oh + oy) * ow;
                    out[dst..dst + ow].copy_from_slice(&acc[oy * wp..oy * wp + ow]);
                }
            }
        }
    }
    Tensor::new(vec![n, co, od, oh, ow], out)
}

/// Stride-1 weight gradient: dot products of padded-width output-gradient planes
/// with shifted input planes.
fn weight_grad_direct<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, pad: usize, kernel: [usize; 3]) -> Tensor<T> {
    let [n, ci, _, _, _] = dims5(x);
    let [_, co, od, oh, ow] = dims5(g);
    let [kd, kh, kw] = kernel;
    let xp = Padded::new(x, pad, kw);
    let wp = xp.dims[2];
    let run = oh * wp;
    let ksz = kd * kh * kw;
    let mut out = vec![T::zero(); co * ci * ksz];
    let mut grow = vec![T::zero(); run];
    for b in 0..n {
        for o in 0..co {
            for oz in 0..od {
                for oy in 0..oh {
                    let src = (((b * co + o) * od + oz) * oh + oy) * ow;
                    grow[oy * wp..oy * wp + ow].copy_from_slice(&g.data[src..src + ow]);
                }
                for c in 0..ci {
                    for kz in 0..kd {
                        let base = xp.plane(b * ci + c, oz + kz);
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let src = &xp.data[base + ky * wp + kx..][..run];
                                out[(o * ci + c) * ksz + (kz * kh + ky) * kw + kx] += dot(&grow, src);
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, ci, kd, kh, kw], out)
}

/// `w[o, c, k]` to `w[c, o, K - 1 - k]`.
fn flip_kernel<T: Scalar>(w: &Tensor<T>) -> Tensor<T> {
    let [co, ci, kd, kh, kw] = dims5(w);
    let mut out = vec![T::zero(); w.len()];
    for o in 0..co {
        for c in 0..ci {
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let src = (((o * ci + c) * kd + kz) * kh + ky) * kw + kx;
                        let dst = (((c * co + o) * kd + kd - 1 - kz) * kh + kh - 1 - ky) * kw + kw - 1 - kx;
                        out[dst] = w.data[src];
                    }
                }
            }
        }
    }
    Tensor::new(vec![ci, co, kd, kh, kw], out)
}

/// Cross-correlation `y[n, o] = sum_c w[o, c] * x[n, c]`. No bias.
pub fn conv3d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: ConvGeom) -> Tensor<T> {
    let [n, ci, d, h, wd] = dims5(x);
    let [co, wci, kd, kh, kw] = dims5(w);
    assert_eq!(ci, wci, "conv input channels {ci} vs weight {wci}");
    if g.stride == 1 {
        return conv3d_direct(x, w, g.pad);
    }
    let output = out_dims(g, [d, h, wd], [kd, kh, kw]);
    let low = Lowering { geom: g, ci, input: [d, h, wd], kernel: [kd, kh, kw], output };
    let (k, p, isz) = (low.rows(), low.cols(), d * h * wd);
    let mut col = vec![T::zero(); k * p];
    let mut out = vec![T::zero(); n * co * p];
    for b in 0..n {
        low.im2col(&x.data[b * ci * isz..][..ci * isz], &mut col);
        let o = &mut out[b * co * p..][..co * p];
        T::gemm(co, k, p, mat(&w.data, k, 1), mat(&col, p, 1), T::zero(), mat_mut(o, p, 1));
    }
    Tensor::new(vec![n, co, output[0], output[1], output[2]], out)
}

/// Adjoint of [`conv3d`] with respect to its input (a transposed convolution).
/// `g` is output-shaped; the result has spatial shape `in_spatial` (`[Z, Y, X]`).
pub fn conv3d_input_grad<T: Scalar>(
    g: &Tensor<T>,
    w: &Tensor<T>,
    geom: ConvGeom,
    in_spatial: [usize; 3],
) -> Tensor<T> {
    let [n, co, od, oh, ow] = dims5(g);
    let [wco, ci, kd, kh, kw] = dims5(w);
    assert_eq!(co, wco, "transposed conv channels {co} vs weight {wco}");
    assert_eq!(out_dims(geom, in_spatial, [kd, kh, kw]), [od, oh, ow], "inconsistent transposed conv shape");
    if geom.stride == 1 && geom.pad < kd.min(kh).min(kw) && kd == kh && kh == kw {
        return conv3d_direct(g, &flip_kernel(w), kd - 1 - geom.pad);
    }
    let low = Lowering { geom, ci, input: in_spatial, kernel: [kd, kh, kw], output: [od, oh, ow] };
    let (k, p) = (low.rows(), low.cols());
    let isz: usize = in_spatial.iter().product();
    let mut col = vec![T::zero(); k * p];
    let mut out = vec![T::zero(); n * ci * isz];
    for b in 0..n {
        let gb = &g.data[b * co * p..][..co * p];
        T::gemm(k, co, p, mat(&w.data, 1, k), mat(gb, p, 1), T::zero(), mat_mut(&mut col, p, 1));
        low.col2im(&col, &mut out[b * ci * isz..][..ci * isz]);
    }
    let [d, h, wd] = in_spatial;
    Tensor::new(vec![n, ci, d, h, wd], out)
}

/// Adjoint of [`conv3d`] with respect to its weights: correlates `x` with the
/// output-shaped `g`, producing a `[Cout, Cin, K, K, K]` tensor.
pub fn conv3d_weight_grad<T: Scalar>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    geom: ConvGeom,
    kernel: [usize; 3],
) -> Tensor<T> {
    let [n, ci, d, h, wd] = dims5(x);
    let [gn, co, od, oh, ow] = dims5(g);
    assert_eq!(n, gn, "batch mismatch in weight gradient");
    assert_eq!(out_dims(geom, [d, h, wd], kernel), [od, oh, ow], "inconsistent weight-gradient shape");
    if geom.stride == 1 {
        return weight_grad_direct(x, g, geom.pad, kernel);
    }
    let low = Lowering { geom, ci, input: [d, h, wd], kernel, output: [od, oh, ow] };
    let (k, p, isz) = (low.rows(), low.cols(), d * h * wd);
    let mut col = vec![T::zero(); k * p];
    let mut out = vec![T::zero(); co * k];
    for b in 0..n {
        low.im2col(&x.data[b * ci * isz..][..ci * isz], &mut col);
        let gb = &g.data[b * co * p..][..co * p];
        T::gemm(co, p, k, mat(gb, p, 1), mat(&col, 1, p), T::one(), mat_mut(&mut out, k, 1));
    }
    let [kd, kh, kw] = kernel;
    Tensor::new(vec![co, ci, kd, kh, kw], out)
}
