//! Convolution layer specs, parameter initialization and the Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::tensor::{ConvGeom, Tensor};
use crate::Scalar;

/// A 3D convolution (or transposed convolution) with bias.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvLayer {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub geom: ConvGeom,
    pub transpose: bool,
}

impl ConvLayer {
    pub const fn conv(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { cin, cout, kernel, geom: ConvGeom::new(stride, pad), transpose: false }
    }

    pub const fn up(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { cin, cout, kernel, geom: ConvGeom::new(stride, pad), transpose: true }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let k = self.kernel;
        if self.transpose {
            vec![self.cin, self.cout, k, k, k]
        } else {
            vec![self.cout, self.cin, k, k, k]
        }
    }

    /// He-normal weights (or `N(0, std)` when given) and zero bias.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, std: Option<f64>, rng: &mut R) -> [Tensor<T>; 2] {
        let taps = (self.kernel as f64).powi(3);
        let fan_in = if self.transpose {
            self.cin as f64 * taps / (self.geom.stride as f64).powi(3)
        } else {
            self.cin as f64 * taps
        };
        let std = std.unwrap_or_else(|| (2.0 / fan_in).sqrt());
        let shape = self.weight_shape();
        let n: usize = shape.iter().product();
        let data = if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| T::of(normal.sample(rng))).collect()
        } else {
            vec![T::zero(); n]
        };
        [Tensor::new(shape, data), Tensor::zeros(vec![self.cout])]
    }

    /// Spatial output shape `[Z, Y, X]` for a `[Z, Y, X]` input, or `None` if invalid.
    pub fn out_spatial(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let (k, s, p) = (self.kernel, self.geom.stride, self.geom.pad);
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = if self.transpose {
                let o = (input[a] - 1) * s + k;
                o.checked_sub(2 * p).filter(|&o| self.geom.out_len(o, k) == Some(input[a]))?
            } else {
                self.geom.out_len(input[a], k).filter(|&o| o > 0)?
            };
        }
        Some(out)
    }

    pub fn apply<'t, T: Scalar>(&self, x: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
        let y = if self.transpose {
            let s = x.shape();
            let out = self.out_spatial([s[2], s[3], s[4]]).expect("transposed conv shape");
            x.conv3d_transpose(w, self.geom, out)
        } else {
            x.conv3d(w, self.geom)
        };
        y.add_channel_bias(b)
    }
}

/// Puts every parameter tensor on the tape as a leaf.
pub fn leaves<'t, T: Scalar>(tape: &'t Tape<T>, params: &[Tensor<T>]) -> Vec<Var<'t, T>> {
    params.iter().map(|p| tape.leaf(p.clone())).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.5, beta2: 0.99, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), String> {
        let ok = self.lr.is_finite()
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps.is_finite()
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(format!("invalid Adam settings {self:?}"))
        }
    }
}

/// Adam first and second moments for one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self { config, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (a1, a2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let step = T::of(lr / c1);
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mv = b1 * *mv + a1 * gv;
                *vv = b2 * *vv + a2 * gv * gv;
                *pv -= step * *mv / ((*vv * inv_c2).sqrt() + eps);
            }
        }
    }
}
