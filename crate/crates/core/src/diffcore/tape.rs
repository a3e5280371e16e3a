use rand::Rng;

use super::conv::{self, Conv3dGeometry, Conv3dGrads, UpGeometry};
use super::{DiffTensor, Real, SELU_ALPHA, SELU_LAMBDA};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: Conv3dGeometry,
    },
    ConvTransposed {
        input: Var,
        kernel: Var,
        geom: UpGeometry,
    },
    Selu(Var),
    Sigmoid(Var),
    /// Per-element multiplier: 0 for dropped, 1/(1−rate) for kept.
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Concat {
        a: Var,
        b: Var,
        ca: usize,
        cb: usize,
    },
    Sum(Var),
    Mean(Var),
    SampleSums(Var),
}

#[derive(Debug)]
struct Node<T> {
    tensor: DiffTensor<T>,
    op: Op<T>,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a valid topological order,
/// so the backward sweep is a reverse scan. Leaf gradients persist in the
/// leaf tensors and accumulate across `backward` calls until
/// [`Tape::zero_grads`].
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, tensor: DiffTensor<T>) -> Var {
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        Ok(self.leaf(DiffTensor::new(shape, values)?))
    }

    pub fn tensor(&self, v: Var) -> &DiffTensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn value(&self, v: Var) -> &[T] {
        self.nodes[v.0].tensor.values()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) {
                node.tensor.zero_grad();
            }
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let mut tensor = DiffTensor::new(shape, values).expect("op produced inconsistent shape");
        tensor.set_requires_grad(requires_grad);
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Cross-correlation of `[N,C,D,H,W]` with `[K,C,kd,kh,kw]` plus a `[K]` bias.
    pub fn conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = Conv3dGeometry::resolve(self.shape(input), self.shape(kernel), stride, padding)?;
        if self.shape(bias) != [geom.out_channels] {
            return Err(Error::Shape(format!(
                "conv3d bias {:?} does not match {} output channels",
                self.shape(bias),
                geom.out_channels
            )));
        }
        let out = conv::conv3d_forward(
            &geom,
            self.value(input),
            self.value(kernel),
            self.value(bias),
        );
        Ok(self.push(
            geom.output_shape(),
            out,
            Op::Conv3d {
                input,
                kernel,
                bias,
                geom,
            },
            &[input, kernel, bias],
        ))
    }

    /// Non-overlapping transposed convolution (kernel extent = stride), the
    /// adjoint of a stride-`s` conv3d with an `s³` kernel.
    pub fn conv3d_transposed(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let geom = UpGeometry::resolve(self.shape(input), self.shape(kernel), stride)?;
        let out = conv::conv_transposed_forward(&geom, self.value(input), self.value(kernel));
        Ok(self.push(
            geom.output_shape(),
            out,
            Op::ConvTransposed {
                input,
                kernel,
                geom,
            },
            &[input, kernel],
        ))
    }

    pub fn selu(&mut self, x: Var) -> Var {
        let (lambda, alpha) = (T::of(SELU_LAMBDA), T::of(SELU_ALPHA));
        let out = self
            .value(x)
            .iter()
            .map(|&v| {
                if v > T::zero() {
                    lambda * v
                } else {
                    lambda * alpha * v.exp_m1()
                }
            })
            .collect();
        self.push(self.shape(x).to_vec(), out, Op::Selu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| stable_sigmoid(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), &[x])
    }

    /// Inverted dropout. With `training == false` or `rate == 0` the input
    /// handle itself is returned, so inference is the exact identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.tensor(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::Dropout { input: x, mask },
            &[x],
        ))
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
        what: &str,
    ) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Div(a, b), |x, y| x / y, "div")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let out = self.value(x).iter().map(|&v| v * f).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, f), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let c = T::of(offset);
        let out = self.value(x).iter().map(|&v| v + c).collect();
        self.push(self.shape(x).to_vec(), out, Op::AddScalar(x), &[x])
    }

    /// Concatenates two `[N,C,...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::Shape(format!(
                "concat_channels needs equal shapes except axis 1: {sa:?} vs {sb:?}"
            )));
        }
        let (ca, cb) = (sa[1], sb[1]);
        let inner: usize = sa[2..].iter().product();
        let mut shape = sa.to_vec();
        shape[1] = ca + cb;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for n in 0..sa[0] {
            out.extend_from_slice(&va[n * ca * inner..(n + 1) * ca * inner]);
            out.extend_from_slice(&vb[n * cb * inner..(n + 1) * cb * inner]);
        }
        Ok(self.push(shape, out, Op::Concat { a, b, ca, cb }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![total], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.tensor(x).len() as f64);
        let total: T = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![total / n], Op::Mean(x), &[x])
    }

    /// Sums over every axis but the first: `[N, ...] → [N]`.
    pub fn sample_sums(&mut self, x: Var) -> Var {
        let n = self.shape(x)[0];
        let out = self
            .value(x)
            .chunks(self.tensor(x).len() / n)
            .map(|c| c.iter().copied().sum())
            .collect();
        self.push(vec![n], out, Op::SampleSums(x), &[x])
    }

    /// Accumulates `∂result/∂leaf` into every grad-requiring leaf.
    pub fn backward(&mut self, result: Var) -> Result<()> {
        if self.tensor(result).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar result, got shape {:?}",
                self.shape(result)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(result.0 + 1, || None);
        grads[result.0] = Some(vec![T::one()]);

        for i in (0..=result.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tensor.requires_grad() {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].tensor.accumulate_grad(&g)?;
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let wants = |v: Var| self.requires_grad(v);
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                let mut dx = wants(input).then(|| take_buf(grads, input, self));
                let mut dk = wants(kernel).then(|| take_buf(grads, kernel, self));
                let mut db = wants(bias).then(|| take_buf(grads, bias, self));
                conv::conv3d_backward(
                    geom,
                    self.value(input),
                    self.value(kernel),
                    g,
                    Conv3dGrads {
                        input: dx.as_deref_mut(),
                        kernel: dk.as_deref_mut(),
                        bias: db.as_deref_mut(),
                    },
                );
                restore(grads, input, dx);
                restore(grads, kernel, dk);
                restore(grads, bias, db);
            }
            Op::ConvTransposed {
                input,
                kernel,
                geom,
            } => {
                let (input, kernel) = (*input, *kernel);
                let mut dx = wants(input).then(|| take_buf(grads, input, self));
                let mut dk = wants(kernel).then(|| take_buf(grads, kernel, self));
                conv::conv_transposed_backward(
                    geom,
                    self.value(input),
                    self.value(kernel),
                    g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                restore(grads, input, dx);
                restore(grads, kernel, dk);
            }
            Op::Selu(x) => {
                let (lambda, la) = (T::of(SELU_LAMBDA), T::of(SELU_LAMBDA * SELU_ALPHA));
                let xv = self.value(*x);
                let buf = buf(grads, *x, self);
                for ((d, &gi), &v) in buf.iter_mut().zip(g).zip(xv) {
                    *d += gi * if v > T::zero() { lambda } else { la * v.exp() };
                }
            }
            Op::Sigmoid(x) => {
                let y = node.tensor.values();
                let buf = buf(grads, *x, self);
                for ((d, &gi), &s) in buf.iter_mut().zip(g).zip(y) {
                    *d += gi * s * (T::one() - s);
                }
            }
            Op::Dropout { input, mask } => {
                let buf = buf(grads, *input, self);
                for ((d, &gi), &m) in buf.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                if wants(*a) {
                    add_into(buf(grads, *a, self), g, T::one());
                }
                if wants(*b) {
                    let sign = if negate { -T::one() } else { T::one() };
                    add_into(buf(grads, *b, self), g, sign);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if wants(a) {
                    let bv = self.value(b);
                    for ((d, &gi), &y) in buf(grads, a, self).iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                }
                if wants(b) {
                    let av = self.value(a);
                    for ((d, &gi), &x) in buf(grads, b, self).iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let bv = self.value(b);
                if wants(a) {
                    for ((d, &gi), &y) in buf(grads, a, self).iter_mut().zip(g).zip(bv) {
                        *d += gi / y;
                    }
                }
                if wants(b) {
                    let q = node.tensor.values();
                    for (((d, &gi), &y), &qi) in
                        buf(grads, b, self).iter_mut().zip(g).zip(bv).zip(q)
                    {
                        *d -= gi * qi / y;
                    }
                }
            }
            Op::Scale(x, f) => add_into(buf(grads, *x, self), g, *f),
            Op::AddScalar(x) => add_into(buf(grads, *x, self), g, T::one()),
            Op::Concat { a, b, ca, cb } => {
                let (a, b, ca, cb) = (*a, *b, *ca, *cb);
                let shape = node.tensor.shape();
                let inner: usize = shape[2..].iter().product();
                for n in 0..shape[0] {
                    let base = n * (ca + cb) * inner;
                    if wants(a) {
                        let dst = &mut buf(grads, a, self)[n * ca * inner..(n + 1) * ca * inner];
                        add_into(dst, &g[base..base + ca * inner], T::one());
                    }
                    if wants(b) {
                        let dst = &mut buf(grads, b, self)[n * cb * inner..(n + 1) * cb * inner];
                        add_into(
                            dst,
                            &g[base + ca * inner..base + (ca + cb) * inner],
                            T::one(),
                        );
                    }
                }
            }
            Op::Sum(x) => {
                let gi = g[0];
                buf(grads, *x, self).iter_mut().for_each(|d| *d += gi);
            }
            Op::Mean(x) => {
                let gi = g[0] / T::of(self.tensor(*x).len() as f64);
                buf(grads, *x, self).iter_mut().for_each(|d| *d += gi);
            }
            Op::SampleSums(x) => {
                let per = self.tensor(*x).len() / g.len();
                for (chunk, &gi) in buf(grads, *x, self).chunks_mut(per).zip(g) {
                    chunk.iter_mut().for_each(|d| *d += gi);
                }
            }
        }
    }
}

#[inline]
fn stable_sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T], factor: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * factor;
    }
}

fn buf<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], v: Var, tape: &Tape<T>) -> &'a mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); tape.tensor(v).len()])
}

fn take_buf<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, tape: &Tape<T>) -> Vec<T> {
    grads[v.0]
        .take()
        .unwrap_or_else(|| vec![T::zero(); tape.tensor(v).len()])
}

fn restore<T>(grads: &mut [Option<Vec<T>>], v: Var, value: Option<Vec<T>>) {
    if let Some(value) = value {
        grads[v.0] = Some(value);
    }
}
