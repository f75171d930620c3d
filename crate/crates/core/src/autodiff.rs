//! Tape-based reverse-mode automatic differentiation.
//!
//! Every backward rule is expressed with the same differentiable operations
//! that build the forward graph, so gradients returned by [`Tape::grad`] are
//! ordinary graph nodes and can be differentiated again. The WGAN-GP critic
//! loss relies on this: it penalizes the norm of `dD/dx` and is then
//! differentiated with respect to the critic parameters.
//!
//! Nodes are appended in evaluation order, so node ids are a topological order.
//! Piecewise-linear activations (`leaky_relu`, `abs`, `clamp01`) have zero
//! second derivative almost everywhere; their backward multiplies by a
//! constant slope tensor. `bce_with_logits` tracks first-order gradients only.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{conv3d, conv3d_input_grad, conv3d_weight_grad, dims5, ConvGeom, Tensor};
use crate::Scalar;

#[derive(Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddScalar(usize),
    MulConst(usize, Rc<Tensor<T>>),
    /// `a * (src > 0 ? 1 : slope)`; `src` is not differentiated.
    Gate(usize, usize, T),
    AddBias(usize, usize),
    Sqrt(usize),
    Recip(usize),
    Tanh(usize),
    Sigmoid(usize),
    SumAll(usize),
    BroadcastScalar(usize),
    SumPerSample(usize),
    BroadcastPerSample(usize),
    SpatialSum(usize),
    BroadcastSpatial(usize),
    ChannelSum(usize),
    BroadcastChannels(usize),
    ConcatChannels(usize, usize),
    SliceChannels(usize, usize),
    EmbedChannels(usize, usize),
    Conv(usize, usize, ConvGeom),
    ConvInputGrad(usize, usize, ConvGeom),
    ConvWeightGrad(usize, usize, ConvGeom),
    BceWithLogits(usize, Rc<Tensor<T>>),
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match *self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | ConcatChannels(a, b) | AddBias(a, b) => vec![a, b],
            Gate(a, _, _) => vec![a],
            Conv(a, b, _) | ConvInputGrad(a, b, _) | ConvWeightGrad(a, b, _) => vec![a, b],
            Neg(a) | Scale(a, _) | AddScalar(a) | MulConst(a, _) | Sqrt(a) | Recip(a) | Tanh(a)
            | Sigmoid(a) | SumAll(a) | BroadcastScalar(a) | SumPerSample(a)
            | BroadcastPerSample(a) | SpatialSum(a) | BroadcastSpatial(a) | ChannelSum(a)
            | BroadcastChannels(a) | SliceChannels(a, _) | EmbedChannels(a, _)
            | BceWithLogits(a, _) => vec![a],
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
}

/// Append-only computation graph. Create one per forward/backward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A graph input. Any leaf can be passed to [`Tape::grad`] as a target.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.leaf(Tensor::scalar(v))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn var(&self, id: usize) -> Var<'_, T> {
        Var { tape: self, id }
    }

    /// Gradients of the sum of `out` with respect to each of `wrt`.
    ///
    /// The returned vars live on this tape and are differentiable. Targets that
    /// `out` does not depend on get a zero gradient.
    pub fn grad<'t>(&'t self, out: Var<'t, T>, wrt: &[Var<'t, T>]) -> Vec<Var<'t, T>> {
        let ops: Vec<Op<T>> = self.nodes.borrow()[..=out.id].iter().map(|n| n.op.clone()).collect();
        let mut reach = vec![false; out.id + 1];
        for w in wrt {
            if w.id <= out.id {
                reach[w.id] = true;
            }
        }
        for id in 0..=out.id {
            if !reach[id] {
                reach[id] = ops[id].parents().iter().any(|&p| reach[p]);
            }
        }
        let mut grads: Vec<Option<Var<'t, T>>> = vec![None; out.id + 1];
        if reach[out.id] {
            let shape = out.value().shape().to_vec();
            grads[out.id] = Some(self.leaf(Tensor::filled(shape, T::one())));
        }
        for id in (0..=out.id).rev() {
            if !reach[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            for (p, gp) in self.vjp(id, &ops[id], g, &reach) {
                grads[p] = Some(match grads[p] {
                    Some(acc) => acc + gp,
                    None => gp,
                });
            }
        }
        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.leaf(Tensor::zeros(w.value().shape().to_vec())),
            })
            .collect()
    }

    fn vjp<'t>(&'t self, id: usize, op: &Op<T>, g: Var<'t, T>, reach: &[bool]) -> Vec<(usize, Var<'t, T>)> {
        use Op::*;
        let mut out = Vec::with_capacity(2);
        let mut emit = |p: usize, f: &dyn Fn() -> Var<'t, T>| {
            if reach[p] {
                out.push((p, f()));
            }
        };
        let v = |i: usize| self.var(i);
        match op {
            Leaf => {}
            Add(a, b) => {
                emit(*a, &|| g);
                emit(*b, &|| g);
            }
            Sub(a, b) => {
                emit(*a, &|| g);
                emit(*b, &|| g.neg());
            }
            Mul(a, b) => {
                emit(*a, &|| g * v(*b));
                emit(*b, &|| g * v(*a));
            }
            Neg(a) => emit(*a, &|| g.neg()),
            Scale(a, c) => emit(*a, &|| g.scale(*c)),
            AddScalar(a) => emit(*a, &|| g),
            MulConst(a, c) => emit(*a, &|| g.mul_const(c.clone())),
            Gate(a, src, slope) => emit(*a, &|| g.gate(v(*src), *slope)),
            AddBias(a, b) => {
                emit(*a, &|| g);
                emit(*b, &|| g.channel_sum());
            }
            Sqrt(a) => emit(*a, &|| g * v(id).recip().scale(T::of(0.5))),
            Recip(a) => emit(*a, &|| {
                let r = v(id);
                (g * r * r).neg()
            }),
            Tanh(a) => emit(*a, &|| {
                let y = v(id);
                g - g * y * y
            }),
            Sigmoid(a) => emit(*a, &|| {
                let y = v(id);
                g * y - g * y * y
            }),
            SumAll(a) => emit(*a, &|| g.broadcast_scalar(&self.value_of(*a).shape().to_vec())),
            BroadcastScalar(a) => emit(*a, &|| g.sum()),
            SumPerSample(a) => emit(*a, &|| g.broadcast_per_sample(&self.value_of(*a).shape().to_vec())),
            BroadcastPerSample(a) => emit(*a, &|| g.sum_per_sample()),
            SpatialSum(a) => emit(*a, &|| g.broadcast_spatial(&self.value_of(*a).shape().to_vec())),
            BroadcastSpatial(a) => emit(*a, &|| g.spatial_sum()),
            ChannelSum(a) => emit(*a, &|| g.broadcast_channels(&self.value_of(*a).shape().to_vec())),
            BroadcastChannels(a) => emit(*a, &|| g.channel_sum()),
            ConcatChannels(a, b) => {
                let ca = self.value_of(*a).shape()[1];
                let cb = self.value_of(*b).shape()[1];
                emit(*a, &|| g.slice_channels(0, ca));
                emit(*b, &|| g.slice_channels(ca, cb));
            }
            SliceChannels(a, start) => {
                let total = self.value_of(*a).shape()[1];
                emit(*a, &|| g.embed_channels(*start, total));
            }
            EmbedChannels(a, start) => {
                let len = self.value_of(*a).shape()[1];
                emit(*a, &|| g.slice_channels(*start, len));
            }
            Conv(x, w, geom) => {
                let xs = self.value_of(*x);
                let sp = [xs.shape()[2], xs.shape()[3], xs.shape()[4]];
                let k = kernel_of(&self.value_of(*w));
                emit(*x, &|| g.conv3d_transpose(v(*w), *geom, sp));
                emit(*w, &|| v(*x).conv3d_weight_grad(g, *geom, k));
            }
            ConvInputGrad(go, w, geom) => {
                // forward: out = conv_input_grad(go, w); upstream g is input-shaped
                let k = kernel_of(&self.value_of(*w));
                emit(*go, &|| g.conv3d(v(*w), *geom));
                emit(*w, &|| g.conv3d_weight_grad(v(*go), *geom, k));
            }
            ConvWeightGrad(x, go, geom) => {
                // forward: out = conv_weight_grad(x, go); upstream g is weight-shaped
                let xs = self.value_of(*x);
                let sp = [xs.shape()[2], xs.shape()[3], xs.shape()[4]];
                emit(*x, &|| v(*go).conv3d_transpose(g, *geom, sp));
                emit(*go, &|| v(*x).conv3d(g, *geom));
            }
            BceWithLogits(z, targets) => {
                let zv = self.value_of(*z);
                let n = T::of(zv.len() as f64);
                let slope = zv.zip_map(targets, |zi, yi| (sigmoid(zi) - yi) / n);
                emit(*z, &|| g.broadcast_scalar(&zv.shape().to_vec()).mul_const(Rc::new(slope.clone())));
            }
        }
        out
    }
}

fn kernel_of<T: Scalar>(w: &Tensor<T>) -> [usize; 3] {
    let [_, _, a, b, c] = dims5(w);
    [a, b, c]
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(z: T) -> T {
    // log(1 + e^z) without overflow
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element var.
    pub fn item(&self) -> T {
        self.value().item()
    }

    /// A new leaf holding this value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.leaf((*self.value()).clone())
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let value = self.value().map(f);
        self.tape.push(value, op)
    }

    fn binary(&self, other: Var<'t, T>, op: Op<T>, f: impl Fn(T, T) -> T) -> Var<'t, T> {
        let value = self.value().zip_map(&other.value(), f);
        self.tape.push(value, op)
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(Op::Neg(self.id), |a| -a)
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        self.unary(Op::Scale(self.id, c), |a| a * c)
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        self.unary(Op::AddScalar(self.id), |a| a + c)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(self, c: Rc<Tensor<T>>) -> Var<'t, T> {
        let value = self.value().zip_map(&c, |a, b| a * b);
        self.tape.push(value, Op::MulConst(self.id, c))
    }

    pub fn square(self) -> Var<'t, T> {
        self * self
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(Op::Sqrt(self.id), |a| a.sqrt())
    }

    pub fn recip(self) -> Var<'t, T> {
        self.unary(Op::Recip(self.id), |a| a.recip())
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(Op::Tanh(self.id), |a| a.tanh())
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn leaky_relu(self, slope: T) -> Var<'t, T> {
        self.gate(self, slope)
    }

    /// Multiplies by 1 where `src > 0` and by `slope` elsewhere.
    pub fn gate(self, src: Var<'t, T>, slope: T) -> Var<'t, T> {
        let value = self.value().zip_map(&src.value(), |a, s| if s > T::zero() { a } else { a * slope });
        self.tape.push(value, Op::Gate(self.id, src.id, slope))
    }

    pub fn abs(self) -> Var<'t, T> {
        let x = self.value();
        let sign = Rc::new(x.map(|a| if a > T::zero() { T::one() } else if a < T::zero() { -T::one() } else { T::zero() }));
        self.mul_const(sign)
    }

    /// Clamps to `[0, 1]`; the gradient is passed only where the input is inside the range.
    pub fn clamp01(self) -> Var<'t, T> {
        let x = self.value();
        let pass = Rc::new(x.map(|a| if a >= T::zero() && a <= T::one() { T::one() } else { T::zero() }));
        let value = x.map(|a| a.max(T::zero()).min(T::one()));
        // clipped voxels enter as a constant
        let inside = self.mul_const(pass.clone());
        let outside = self.tape.leaf(value.zip_map(&pass, |v, p| if p == T::one() { T::zero() } else { v }));
        inside + outside
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().data().iter().copied().sum();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len();
        self.sum().scale(T::of(1.0 / n as f64))
    }

    /// Broadcasts a one-element var to `shape`.
    pub fn broadcast_scalar(self, shape: &[usize]) -> Var<'t, T> {
        let s = self.item();
        self.tape.push(Tensor::filled(shape.to_vec(), s), Op::BroadcastScalar(self.id))
    }

    /// `[N, ...] -> [N]`
    pub fn sum_per_sample(self) -> Var<'t, T> {
        let x = self.value();
        let n = x.shape()[0];
        let per = x.len() / n;
        let data = x.data().chunks(per).map(|c| c.iter().copied().sum()).collect();
        self.tape.push(Tensor::new(vec![n], data), Op::SumPerSample(self.id))
    }

    /// `[N] -> shape` with `shape[0] == N`.
    pub fn broadcast_per_sample(self, shape: &[usize]) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(x.shape(), &[shape[0]]);
        let per: usize = shape[1..].iter().product();
        let data = x.data().iter().flat_map(|&v| std::iter::repeat(v).take(per)).collect();
        self.tape.push(Tensor::new(shape.to_vec(), data), Op::BroadcastPerSample(self.id))
    }

    /// `[N, C, Z, Y, X] -> [N, C, 1, 1, 1]`
    pub fn spatial_sum(self) -> Var<'t, T> {
        let x = self.value();
        let [n, c, d, h, w] = dims5(&x);
        let data = x.data().chunks(d * h * w).map(|s| s.iter().copied().sum()).collect();
        self.tape.push(Tensor::new(vec![n, c, 1, 1, 1], data), Op::SpatialSum(self.id))
    }

    pub fn spatial_mean(self) -> Var<'t, T> {
        let [_, _, d, h, w] = dims5(&self.value());
        self.spatial_sum().scale(T::of(1.0 / (d * h * w) as f64))
    }

    /// `[N, C, 1, 1, 1] -> shape`
    pub fn broadcast_spatial(self, shape: &[usize]) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(x.shape(), &[shape[0], shape[1], 1, 1, 1]);
        let per: usize = shape[2..].iter().product();
        let data = x.data().iter().flat_map(|&v| std::iter::repeat(v).take(per)).collect();
        self.tape.push(Tensor::new(shape.to_vec(), data), Op::BroadcastSpatial(self.id))
    }

    /// `[N, C, ...] -> [C]`
    pub fn channel_sum(self) -> Var<'t, T> {
        let x = self.value();
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let per = x.len() / (n * c);
        let mut data = vec![T::zero(); c];
        for (i, chunk) in x.data().chunks(per).enumerate() {
            data[i % c] += chunk.iter().copied().sum();
        }
        self.tape.push(Tensor::new(vec![c], data), Op::ChannelSum(self.id))
    }

    /// `[C] -> [N, C, ...]`
    pub fn broadcast_channels(self, shape: &[usize]) -> Var<'t, T> {
        let b = self.value();
        let (n, c) = (shape[0], shape[1]);
        assert_eq!(b.shape(), &[c]);
        let per: usize = shape[2..].iter().product();
        let mut data = Vec::with_capacity(n * c * per);
        for _ in 0..n {
            for &v in b.data() {
                data.extend(std::iter::repeat(v).take(per));
            }
        }
        self.tape.push(Tensor::new(shape.to_vec(), data), Op::BroadcastChannels(self.id))
    }

    /// Adds a per-channel bias `[C]` to `[N, C, ...]`.
    pub fn add_channel_bias(self, bias: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let b = bias.value();
        let c = x.shape()[1];
        assert_eq!(b.shape(), &[c], "bias shape");
        let per: usize = x.shape()[2..].iter().product();
        let mut out = (*x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            let bv = b.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        self.tape.push(out, Op::AddBias(self.id, bias.id))
    }

    pub fn concat_channels(self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        let (n, ca, cb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        assert_eq!(a.shape()[0], b.shape()[0]);
        assert_eq!(a.shape()[2..], b.shape()[2..], "concat spatial mismatch");
        let per: usize = a.shape()[2..].iter().product();
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..n {
            data.extend_from_slice(&a.data()[i * ca * per..(i + 1) * ca * per]);
            data.extend_from_slice(&b.data()[i * cb * per..(i + 1) * cb * per]);
        }
        let mut shape = a.shape().to_vec();
        shape[1] = ca + cb;
        self.tape.push(Tensor::new(shape, data), Op::ConcatChannels(self.id, other.id))
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Var<'t, T> {
        let x = self.value();
        let (n, c) = (x.shape()[0], x.shape()[1]);
        assert!(start + len <= c);
        let per: usize = x.shape()[2..].iter().product();
        let mut data = Vec::with_capacity(n * len * per);
        for i in 0..n {
            data.extend_from_slice(&x.data()[(i * c + start) * per..(i * c + start + len) * per]);
        }
        let mut shape = x.shape().to_vec();
        shape[1] = len;
        self.tape.push(Tensor::new(shape, data), Op::SliceChannels(self.id, start))
    }

    /// Places this `[N, C, ...]` var at channel offset `start` of a zero `[N, total, ...]` tensor.
    pub fn embed_channels(self, start: usize, total: usize) -> Var<'t, T> {
        let x = self.value();
        let (n, c) = (x.shape()[0], x.shape()[1]);
        assert!(start + c <= total);
        let per: usize = x.shape()[2..].iter().product();
        let mut data = vec![T::zero(); n * total * per];
        for i in 0..n {
            data[(i * total + start) * per..(i * total + start + c) * per]
                .copy_from_slice(&x.data()[i * c * per..(i + 1) * c * per]);
        }
        let mut shape = x.shape().to_vec();
        shape[1] = total;
        self.tape.push(Tensor::new(shape, data), Op::EmbedChannels(self.id, start))
    }

    pub fn conv3d(self, w: Var<'t, T>, geom: ConvGeom) -> Var<'t, T> {
        let value = conv3d(&self.value(), &w.value(), geom);
        self.tape.push(value, Op::Conv(self.id, w.id, geom))
    }

    /// Transposed convolution: the input-adjoint of `conv3d(·, w, geom)` producing
    /// spatial extent `out_spatial` (`[Z, Y, X]`). `w` is `[Cin_self, Cout, K, K, K]`.
    pub fn conv3d_transpose(self, w: Var<'t, T>, geom: ConvGeom, out_spatial: [usize; 3]) -> Var<'t, T> {
        let value = conv3d_input_grad(&self.value(), &w.value(), geom, out_spatial);
        self.tape.push(value, Op::ConvInputGrad(self.id, w.id, geom))
    }

    pub fn conv3d_weight_grad(self, g: Var<'t, T>, geom: ConvGeom, kernel: [usize; 3]) -> Var<'t, T> {
        let value = conv3d_weight_grad(&self.value(), &g.value(), geom, kernel);
        self.tape.push(value, Op::ConvWeightGrad(self.id, g.id, geom))
    }

    /// Mean binary cross-entropy of logits against constant `targets` in `[0, 1]`.
    pub fn bce_with_logits(self, targets: Rc<Tensor<T>>) -> Var<'t, T> {
        let z = self.value();
        assert_eq!(z.shape(), targets.shape());
        let n = T::of(z.len() as f64);
        let loss: T = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&zi, &yi)| softplus(zi) - yi * zi)
            .sum::<T>()
            / n;
        self.tape.push(Tensor::scalar(loss), Op::BceWithLogits(self.id, targets))
    }
}

impl<'t, T: Scalar> std::ops::Add for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, rhs: Self) -> Self::Output {
        self.binary(rhs, Op::Add(self.id, rhs.id), |a, b| a + b)
    }
}

impl<'t, T: Scalar> std::ops::Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        self.binary(rhs, Op::Sub(self.id, rhs.id), |a, b| a - b)
    }
}

impl<'t, T: Scalar> std::ops::Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.binary(rhs, Op::Mul(self.id, rhs.id), |a, b| a * b)
    }
}
