//! Reverse-mode automatic differentiation.
//!
//! The tape only ever records real tensors. A complex quantity is carried as
//! a pair of tape variables (real plane, imaginary plane), and complex layers
//! are compositions of real ops. The gradient of the real loss with respect
//! to a complex parameter `w = w_r + i w_i` therefore comes out as
//! `(dL/dw_r, dL/dw_i)`: the split-real gradient, which equals twice the
//! conjugate Wirtinger derivative `2 dL/d(conj w)`.

use std::sync::Arc;

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{gemm, ComplexTensor, Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Real,
    Complex,
}

impl Domain {
    /// Real scalar coordinates per element.
    pub fn coords(self) -> usize {
        match self {
            Domain::Real => 1,
            Domain::Complex => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub enum ParamValue<T> {
    Real(Tensor<T>),
    Complex(ComplexTensor<T>),
}

impl<T: Scalar> ParamValue<T> {
    pub fn domain(&self) -> Domain {
        match self {
            ParamValue::Real(_) => Domain::Real,
            ParamValue::Complex(_) => Domain::Complex,
        }
    }

    pub fn shape(&self) -> &Shape {
        match self {
            ParamValue::Real(t) => t.shape(),
            ParamValue::Complex(z) => z.shape(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            ParamValue::Real(t) => ParamValue::Real(t.zeros_like()),
            ParamValue::Complex(z) => ParamValue::Complex(ComplexTensor {
                re: z.re.zeros_like(),
                im: z.im.zeros_like(),
            }),
        }
    }

    /// The real planes, in storage order (real first).
    pub fn planes(&self) -> Vec<&Tensor<T>> {
        match self {
            ParamValue::Real(t) => vec![t],
            ParamValue::Complex(z) => vec![&z.re, &z.im],
        }
    }

    pub(crate) fn planes_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            ParamValue::Real(t) => vec![t],
            ParamValue::Complex(z) => vec![&mut z.re, &mut z.im],
        }
    }

    pub fn coords(&self) -> usize {
        self.shape().numel() * self.domain().coords()
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub id: ParamId,
    pub name: String,
    pub value: ParamValue<T>,
    pub grad: ParamValue<T>,
    /// Non-trainable entries hold running statistics.
    pub trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn domain(&self) -> Domain {
        self.value.domain()
    }

    /// Trainable real coordinates: a complex element counts twice.
    pub fn trainable_count(&self) -> usize {
        if self.trainable {
            self.value.coords()
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ParamValue<T>, trainable: bool) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            id,
            name: name.into(),
            grad: value.zeros_like(),
            value,
            trainable,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().map(Parameter::trainable_count).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for plane in p.grad.planes_mut() {
                plane.data_mut().fill(T::zero());
            }
        }
    }

    /// Adds `grads` into the parameters' gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in &grads.entries {
            let p = &mut self.params[id.0];
            for (dst, src) in p.grad.planes_mut().into_iter().zip(g.planes()) {
                dst.add_assign(src);
            }
        }
    }

    pub fn apply_stats(&mut self, stats: Vec<(ParamId, ParamValue<T>)>) {
        for (id, v) in stats {
            self.params[id.0].value = v;
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().find(|p| p.name == name).map(|p| p.id)
    }
}

/// Handle to a recorded tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A layer input/output: a real tensor or a planar complex pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feat {
    Real(Var),
    Complex(Var, Var),
}

impl Feat {
    pub fn domain(&self) -> Domain {
        match self {
            Feat::Real(_) => Domain::Real,
            Feat::Complex(..) => Domain::Complex,
        }
    }

    pub fn planes(&self) -> Vec<Var> {
        match *self {
            Feat::Real(v) => vec![v],
            Feat::Complex(r, i) => vec![r, i],
        }
    }

    /// The first (real) plane.
    pub fn re(&self) -> Var {
        match *self {
            Feat::Real(v) | Feat::Complex(v, _) => v,
        }
    }

    pub fn real(&self) -> Result<Var> {
        match *self {
            Feat::Real(v) => Ok(v),
            Feat::Complex(..) => Err(Error::contract("expected a real feature, got complex")),
        }
    }

    /// Rebuilds a feature of the same domain from per-plane results.
    pub fn map_planes(&self, mut f: impl FnMut(Var) -> Result<Var>) -> Result<Feat> {
        Ok(match *self {
            Feat::Real(v) => Feat::Real(f(v)?),
            Feat::Complex(r, i) => Feat::Complex(f(r)?, f(i)?),
        })
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Magnitude(Var, Var),
    Sum(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    AddChannelBias {
        x: Var,
        b: Var,
    },
    MulPlane {
        alpha: Var,
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Gather {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    Upsample {
        x: Var,
        f: usize,
    },
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Resize(Var),
    Matmul {
        a: Var,
        b: Var,
        tb: bool,
    },
    AddRowBias {
        x: Var,
        b: Var,
    },
    CrossEntropy {
        scores: Var,
        labels: Vec<usize>,
        softmax: Tensor<T>,
    },
    DiceLoss {
        scores: Var,
        mask: Tensor<T>,
        prob: Tensor<T>,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Plane {
    Re,
    Im,
}

/// Batch-norm statistics source.
#[derive(Clone, Debug)]
pub enum NormStats<'a, T> {
    /// Normalize with the batch's own statistics.
    Batch { eps: T },
    /// Normalize with fixed (running) statistics.
    Fixed { mean: &'a [T], var: &'a [T], eps: T },
}

/// Recorded forward computation. One tape per training thread.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(ParamId, Plane, Var)>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.bindings.clear();
        self.consumed = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records a parameter as a leaf. Trainable parameters receive gradients
    /// in [`Tape::backward`]; others behave as constants.
    pub fn param(&mut self, p: &Parameter<T>) -> Feat {
        let feat = match &p.value {
            ParamValue::Real(t) => Feat::Real(self.constant(t.clone())),
            ParamValue::Complex(z) => {
                Feat::Complex(self.constant(z.re.clone()), self.constant(z.im.clone()))
            }
        };
        if p.trainable {
            match feat {
                Feat::Real(v) => self.bindings.push((p.id, Plane::Re, v)),
                Feat::Complex(r, i) => {
                    self.bindings.push((p.id, Plane::Re, r));
                    self.bindings.push((p.id, Plane::Im, i));
                }
            }
        }
        feat
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x < T::zero() { T::zero() } else { x });
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// `sqrt(re^2 + im^2)`; the gradient at the origin is taken as zero.
    pub fn magnitude(&mut self, re: Var, im: Var) -> Result<Var> {
        let v = self.value(re).zip_map(self.value(im), |r, i| r.hypot(i))?;
        Ok(self.push(v, Op::Magnitude(re, im)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).numel()).expect("count fits");
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    pub fn reshape(&mut self, a: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).reshape(dims)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let v = conv::conv2d_forward(self.value(x), self.value(w), geom)?;
        Ok(self.push(v, Op::Conv2d { x, w, geom }))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, geom: ConvGeom, output_padding: (usize, usize)) -> Result<Var> {
        let v = conv::conv_transpose2d_forward(self.value(x), self.value(w), geom, output_padding)?;
        Ok(self.push(v, Op::ConvTranspose2d { x, w, geom }))
    }

    /// Adds `b[c]` to every element of channel `c` of `x` (`[B, C, ...]`).
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let d = xv.dims();
        if d.len() < 2 || bv.dims() != [d[1]] {
            return Err(Error::shape(format!(
                "bias {} does not match channels of {}",
                bv.shape(),
                xv.shape()
            )));
        }
        let inner: usize = d[2..].iter().product();
        let c = d[1];
        let bias = bv.data();
        let mut out = xv.data().to_vec();
        for (j, chunk) in out.chunks_mut(inner).enumerate() {
            let bc = bias[j % c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let v = Tensor::from_shape_vec(xv.shape().clone(), out);
        Ok(self.push(v, Op::AddChannelBias { x, b }))
    }

    /// `alpha` is `[B,1,H,W]` and scales every channel of `x` (`[B,C,H,W]`).
    pub fn mul_plane(&mut self, alpha: Var, x: Var) -> Result<Var> {
        let (av, xv) = (self.value(alpha), self.value(x));
        let [b, c, h, w] = xv.shape().nchw()?;
        if av.dims() != [b, 1, h, w] {
            return Err(Error::shape(format!(
                "coefficient map {} does not match {}",
                av.shape(),
                xv.shape()
            )));
        }
        let hw = h * w;
        let a = av.data();
        let mut out = xv.data().to_vec();
        for (j, chunk) in out.chunks_mut(hw).enumerate() {
            let base = (j / c) * hw;
            for (k, v) in chunk.iter_mut().enumerate() {
                *v *= a[base + k];
            }
        }
        let v = Tensor::from_shape_vec(xv.shape().clone(), out);
        Ok(self.push(v, Op::MulPlane { alpha, x }))
    }

    /// Per-channel normalization of `[B,C,H,W]` followed by `gamma * xhat +
    /// beta`. With batch statistics, also returns the batch mean and the
    /// unbiased batch variance for running-average updates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.shape().nchw()?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.dims() != [c] || bv.dims() != [c] {
            return Err(Error::shape(format!(
                "batch-norm affine parameters must be [{c}], got {} and {}",
                gv.shape(),
                bv.shape()
            )));
        }
        let hw = h * w;
        let n = b * hw;
        let data = xv.data();
        let (mean, var, eps, training) = match stats {
            NormStats::Batch { eps } => {
                if b < 2 {
                    return Err(Error::contract("batch norm in training mode needs a batch of at least 2"));
                }
                let nf = T::from_usize(n).expect("count fits");
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..b {
                        s += data[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    let m = s / nf;
                    let mut q = T::zero();
                    for bi in 0..b {
                        for &v in &data[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                            q += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q / nf;
                }
                (mean, var, eps, true)
            }
            NormStats::Fixed { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("running statistics do not match channel count"));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, be) = (gv.data(), bv.data());
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for (j, (chunk, (xh, o))) in data
            .chunks(hw)
            .zip(xhat.chunks_mut(hw).zip(out.chunks_mut(hw)))
            .enumerate()
        {
            let ch = j % c;
            for k in 0..hw {
                xh[k] = (chunk[k] - mean[ch]) * inv_std[ch];
                o[k] = g[ch] * xh[k] + be[ch];
            }
        }
        let shape = xv.shape().clone();
        let batch_stats = training.then(|| {
            let corr = if n > 1 {
                T::from_usize(n).unwrap() / T::from_usize(n - 1).unwrap()
            } else {
                T::one()
            };
            (mean.clone(), var.iter().map(|&v| v * corr).collect())
        });
        let v = self.push(
            Tensor::from_shape_vec(shape.clone(), out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::from_shape_vec(shape, xhat),
                inv_std,
                training,
            },
        );
        Ok((v, batch_stats))
    }

    /// `out[j] = x[idx[j]]`, shaped `dims`.
    pub fn gather(&mut self, x: Var, idx: Arc<Vec<usize>>, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = Shape::new(dims)?;
        let xv = self.value(x);
        if shape.numel() != idx.len() || idx.iter().any(|&i| i >= xv.numel()) {
            return Err(Error::shape("gather index out of range or wrong count"));
        }
        let data = idx.iter().map(|&i| xv.data()[i]).collect();
        Ok(self.push(Tensor::from_shape_vec(shape, data), Op::Gather { x, idx }))
    }

    /// Non-overlapping `k x k` average pooling; leftover rows/columns are
    /// dropped.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.shape().nchw()?;
        let (ho, wo) = (h / k.max(1), w / k.max(1));
        if k == 0 || ho == 0 || wo == 0 {
            return Err(Error::Geometry(format!("avg pool window {k} too large for {h}x{w}")));
        }
        let inv = T::one() / T::from_usize(k * k).unwrap();
        let d = xv.data();
        let mut out = vec![T::zero(); b * c * ho * wo];
        for p in 0..b * c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut s = T::zero();
                    for i in 0..k {
                        for j in 0..k {
                            s += d[(p * h + oh * k + i) * w + ow * k + j];
                        }
                    }
                    out[(p * ho + oh) * wo + ow] = s * inv;
                }
            }
        }
        let shape = Shape::new([b, c, ho, wo])?;
        Ok(self.push(Tensor::from_shape_vec(shape, out), Op::AvgPool { x, k }))
    }

    pub fn upsample_nearest(&mut self, x: Var, f: usize) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.shape().nchw()?;
        if f == 0 {
            return Err(Error::Geometry("upsample factor must be positive".into()));
        }
        let (ho, wo) = (h * f, w * f);
        let d = xv.data();
        let mut out = vec![T::zero(); b * c * ho * wo];
        for p in 0..b * c {
            for oh in 0..ho {
                for ow in 0..wo {
                    out[(p * ho + oh) * wo + ow] = d[(p * h + oh / f) * w + ow / f];
                }
            }
        }
        let shape = Shape::new([b, c, ho, wo])?;
        Ok(self.push(Tensor::from_shape_vec(shape, out), Op::Upsample { x, f }))
    }

    /// `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.shape().nchw()?;
        let inv = T::one() / T::from_usize(h * w).unwrap();
        let data = xv.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let shape = Shape::new([b, c])?;
        Ok(self.push(Tensor::from_shape_vec(shape, data), Op::GlobalAvgPool(x)))
    }

    /// Channel concatenation of `[B,C_k,H,W]` inputs.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| Error::contract("concat of nothing"))?);
        let [b, _, h, w] = first.shape().nchw()?;
        let mut chans = Vec::with_capacity(xs.len());
        for &x in xs {
            let [bb, c, hh, ww] = self.value(x).shape().nchw()?;
            if (bb, hh, ww) != (b, h, w) {
                return Err(Error::shape(format!(
                    "concat inputs disagree: {} vs {}",
                    first.shape(),
                    self.value(x).shape()
                )));
            }
            chans.push(c);
        }
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for (&x, &c) in xs.iter().zip(&chans) {
                out.extend_from_slice(&self.value(x).data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let shape = Shape::new([b, total, h, w])?;
        Ok(self.push(Tensor::from_shape_vec(shape, out), Op::Concat(xs.to_vec())))
    }

    /// Zero-pads or crops the bottom/right edges to `h x w`.
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, hi, wi] = xv.shape().nchw()?;
        if (hi, wi) == (h, w) {
            return Ok(x);
        }
        let d = xv.data();
        let mut out = vec![T::zero(); b * c * h * w];
        for p in 0..b * c {
            for i in 0..h.min(hi) {
                let n = w.min(wi);
                out[(p * h + i) * w..(p * h + i) * w + n].copy_from_slice(&d[(p * hi + i) * wi..(p * hi + i) * wi + n]);
            }
        }
        let shape = Shape::new([b, c, h, w])?;
        Ok(self.push(Tensor::from_shape_vec(shape, out), Op::Resize(x)))
    }

    /// `a [M,K] x b [K,N]`, or `a x b^T` with `b [N,K]` when `transpose_b`.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (&[m, k], bd) = (av.dims(), bv.dims()) else {
            return Err(Error::shape(format!("matmul lhs must be a matrix, got {}", av.shape())));
        };
        let n = match (bd, transpose_b) {
            (&[kk, n], false) if kk == k => n,
            (&[n, kk], true) if kk == k => n,
            _ => {
                return Err(Error::shape(format!(
                    "matmul shapes {} and {} (transpose_b = {transpose_b}) disagree",
                    av.shape(),
                    bv.shape()
                )))
            }
        };
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, av.data(), false, bv.data(), transpose_b, T::zero(), &mut out);
        let shape = Shape::new([m, n])?;
        Ok(self.push(Tensor::from_shape_vec(shape, out), Op::Matmul { a, b, tb: transpose_b }))
    }

    /// `x [M,N] + b [N]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (&[_, n], &[nb]) = (xv.dims(), bv.dims()) else {
            return Err(Error::shape("row bias expects [M,N] and [N]"));
        };
        if n != nb {
            return Err(Error::shape(format!("row bias [{nb}] does not match width {n}")));
        }
        let bias = bv.data();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(bias).for_each(|(v, &b)| *v += b);
        }
        let v = Tensor::from_shape_vec(xv.shape().clone(), out);
        Ok(self.push(v, Op::AddRowBias { x, b }))
    }

    /// Mean over the batch of `-log softmax(scores)[label]`.
    pub fn cross_entropy(&mut self, scores: Var, labels: &[usize]) -> Result<Var> {
        let sv = self.value(scores);
        let &[b, k] = sv.dims() else {
            return Err(Error::shape(format!("scores must be [B,K], got {}", sv.shape())));
        };
        if k < 2 {
            return Err(Error::contract("cross entropy needs at least two classes"));
        }
        if labels.len() != b {
            return Err(Error::shape(format!("{} labels for a batch of {b}", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!("label {l} out of range for {k} classes")));
        }
        let mut softmax = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for (bi, row) in sv.data().chunks(k).enumerate() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&s| (s - m).exp()).sum();
            for (j, &s) in row.iter().enumerate() {
                softmax[bi * k + j] = (s - m).exp() / z;
            }
            loss += z.ln() + m - row[labels[bi]];
        }
        loss /= T::from_usize(b).unwrap();
        let softmax = Tensor::from_shape_vec(sv.shape().clone(), softmax);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                scores,
                labels: labels.to_vec(),
                softmax,
            },
        ))
    }

    /// Soft Dice loss `1 - mean_b (2 sum(p g) + 1) / (sum p + sum g + 1)`
    /// with `p = sigmoid(scores)`.
    pub fn dice_loss(&mut self, scores: Var, mask: &Tensor<T>) -> Result<Var> {
        let sv = self.value(scores);
        sv.expect_same_shape(mask)?;
        let b = sv.dims()[0];
        let per = sv.numel() / b;
        let prob = sv.map(sigmoid);
        let smooth = T::one();
        let two = T::one() + T::one();
        let mut total = T::zero();
        for bi in 0..b {
            let p = &prob.data()[bi * per..(bi + 1) * per];
            let g = &mask.data()[bi * per..(bi + 1) * per];
            let inter: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
            let s: T = p.iter().copied().sum::<T>() + g.iter().copied().sum::<T>();
            total += (two * inter + smooth) / (s + smooth);
        }
        let loss = T::one() - total / T::from_usize(b).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::DiceLoss {
                scores,
                mask: mask.clone(),
                prob,
            },
        ))
    }

    /// Back-propagates from the scalar `loss` and returns the gradient of
    /// every trainable parameter recorded on this tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::State("backward already ran on this tape; record a new forward pass".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "loss must be a scalar, got shape {}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let grads = self.backprop(loss);
        let mut entries: Vec<(ParamId, ParamValue<T>)> = Vec::new();
        for &(id, plane, v) in &self.bindings {
            let g = grads[v.0].clone().unwrap_or_else(|| self.value(v).zeros_like());
            let pos = match entries.iter().position(|(pid, _)| *pid == id) {
                Some(pos) => pos,
                None => {
                    let complex = self.bindings.iter().any(|&(p, pl, _)| p == id && pl == Plane::Im);
                    let init = if complex {
                        ParamValue::Complex(ComplexTensor {
                            re: g.zeros_like(),
                            im: g.zeros_like(),
                        })
                    } else {
                        ParamValue::Real(g.zeros_like())
                    };
                    entries.push((id, init));
                    entries.len() - 1
                }
            };
            match (&mut entries[pos].1, plane) {
                (ParamValue::Real(t), _) => t.add_assign(&g),
                (ParamValue::Complex(z), Plane::Re) => z.re.add_assign(&g),
                (ParamValue::Complex(z), Plane::Im) => z.im.add_assign(&g),
            }
        }
        Ok(Gradients { entries })
    }

    fn backprop(&self, loss: Var) -> Vec<Option<Tensor<T>>> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_shape_vec(self.value(loss).shape().clone(), vec![T::one()]));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backward_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        grads
    }

    fn backward_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, dy.clone());
                acc(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, dy.clone());
                acc(grads, *b, dy.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, dy.mul(val(*b)).unwrap());
                acc(grads, *b, dy.mul(val(*a)).unwrap());
            }
            Op::Scale(a, s) => acc(grads, *a, dy.scale(*s)),
            Op::Relu(a) => {
                let g = dy.zip_map(val(*a), |g, x| if x > T::zero() { g } else { T::zero() }).unwrap();
                acc(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let g = dy.zip_map(&node.value, |g, s| g * s * (T::one() - s)).unwrap();
                acc(grads, *a, g);
            }
            Op::Magnitude(r, im) => {
                let (rv, iv, m) = (val(*r).data(), val(*im).data(), node.value.data());
                let n = m.len();
                let mut gr = Vec::with_capacity(n);
                let mut gi = Vec::with_capacity(n);
                for j in 0..n {
                    if m[j] > T::zero() {
                        gr.push(dy.data()[j] * rv[j] / m[j]);
                        gi.push(dy.data()[j] * iv[j] / m[j]);
                    } else {
                        gr.push(T::zero());
                        gi.push(T::zero());
                    }
                }
                acc(grads, *r, Tensor::from_shape_vec(node.value.shape().clone(), gr));
                acc(grads, *im, Tensor::from_shape_vec(node.value.shape().clone(), gi));
            }
            Op::Sum(a) => {
                let s = dy.data()[0];
                acc(grads, *a, val(*a).map(|_| s));
            }
            Op::Reshape(a) => acc(grads, *a, dy.reshape(val(*a).dims().to_vec()).unwrap()),
            Op::Conv2d { x, w, geom } => {
                let xv = val(*x);
                let xd = xv.shape().nchw().unwrap();
                let wd = val(*w).shape().nchw().unwrap();
                acc(grads, *x, conv::conv2d_backward_input(dy, val(*w), *geom, xd).unwrap());
                acc(grads, *w, conv::conv2d_backward_weight(dy, xv, *geom, wd).unwrap());
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let wd = val(*w).shape().nchw().unwrap();
                acc(grads, *x, conv::conv_transpose2d_backward_input(dy, val(*w), *geom).unwrap());
                acc(grads, *w, conv::conv_transpose2d_backward_weight(dy, val(*x), *geom, wd).unwrap());
            }
            Op::AddChannelBias { x, b } => {
                let d = dy.dims();
                let c = d[1];
                let inner: usize = d[2..].iter().product();
                let mut gb = vec![T::zero(); c];
                for (j, chunk) in dy.data().chunks(inner).enumerate() {
                    gb[j % c] += chunk.iter().copied().sum::<T>();
                }
                acc(grads, *x, dy.clone());
                acc(grads, *b, Tensor::from_shape_vec(val(*b).shape().clone(), gb));
            }
            Op::MulPlane { alpha, x } => {
                let (av, xv) = (val(*alpha), val(*x));
                let [_, c, h, w] = xv.shape().nchw().unwrap();
                let hw = h * w;
                let mut ga = vec![T::zero(); av.numel()];
                let mut gx = dy.data().to_vec();
                for (j, chunk) in gx.chunks_mut(hw).enumerate() {
                    let base = (j / c) * hw;
                    let xs = &xv.data()[j * hw..(j + 1) * hw];
                    for k in 0..hw {
                        ga[base + k] += chunk[k] * xs[k];
                        chunk[k] *= av.data()[base + k];
                    }
                }
                acc(grads, *alpha, Tensor::from_shape_vec(av.shape().clone(), ga));
                acc(grads, *x, Tensor::from_shape_vec(xv.shape().clone(), gx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let [b, c, h, w] = xhat.shape().nchw().unwrap();
                let hw = h * w;
                let n = T::from_usize(b * hw).unwrap();
                let g = val(*gamma).data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for (j, (d, xh)) in dy.data().chunks(hw).zip(xhat.data().chunks(hw)).enumerate() {
                    let ch = j % c;
                    for k in 0..hw {
                        sum_dy[ch] += d[k];
                        sum_dy_xhat[ch] += d[k] * xh[k];
                    }
                }
                let mut gx = vec![T::zero(); dy.numel()];
                for (j, ((o, d), xh)) in gx
                    .chunks_mut(hw)
                    .zip(dy.data().chunks(hw))
                    .zip(xhat.data().chunks(hw))
                    .enumerate()
                {
                    let ch = j % c;
                    let scale = g[ch] * inv_std[ch];
                    for k in 0..hw {
                        o[k] = if *training {
                            scale * (d[k] - sum_dy[ch] / n - xh[k] * sum_dy_xhat[ch] / n)
                        } else {
                            scale * d[k]
                        };
                    }
                }
                acc(grads, *x, Tensor::from_shape_vec(dy.shape().clone(), gx));
                acc(grads, *gamma, Tensor::from_shape_vec(val(*gamma).shape().clone(), sum_dy_xhat));
                acc(grads, *beta, Tensor::from_shape_vec(val(*beta).shape().clone(), sum_dy));
            }
            Op::Gather { x, idx } => {
                let mut g = vec![T::zero(); val(*x).numel()];
                for (&i, &d) in idx.iter().zip(dy.data()) {
                    g[i] += d;
                }
                acc(grads, *x, Tensor::from_shape_vec(val(*x).shape().clone(), g));
            }
            Op::AvgPool { x, k } => {
                let k = *k;
                let [b, c, h, w] = val(*x).shape().nchw().unwrap();
                let [_, _, ho, wo] = dy.shape().nchw().unwrap();
                let inv = T::one() / T::from_usize(k * k).unwrap();
                let mut g = vec![T::zero(); b * c * h * w];
                for p in 0..b * c {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let d = dy.data()[(p * ho + oh) * wo + ow] * inv;
                            for i in 0..k {
                                for j in 0..k {
                                    g[(p * h + oh * k + i) * w + ow * k + j] += d;
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, Tensor::from_shape_vec(val(*x).shape().clone(), g));
            }
            Op::Upsample { x, f } => {
                let f = *f;
                let [b, c, h, w] = val(*x).shape().nchw().unwrap();
                let (ho, wo) = (h * f, w * f);
                let mut g = vec![T::zero(); b * c * h * w];
                for p in 0..b * c {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            g[(p * h + oh / f) * w + ow / f] += dy.data()[(p * ho + oh) * wo + ow];
                        }
                    }
                }
                acc(grads, *x, Tensor::from_shape_vec(val(*x).shape().clone(), g));
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = val(*x).shape().nchw().unwrap();
                let inv = T::one() / T::from_usize(h * w).unwrap();
                let mut g = Vec::with_capacity(val(*x).numel());
                for &d in dy.data() {
                    g.extend(std::iter::repeat_n(d * inv, h * w));
                }
                acc(grads, *x, Tensor::from_shape_vec(val(*x).shape().clone(), g));
            }
            Op::Concat(xs) => {
                let [b, total, h, w] = dy.shape().nchw().unwrap();
                let hw = h * w;
                let mut offset = 0;
                for &x in xs {
                    let c = val(x).dims()[1];
                    let mut g = Vec::with_capacity(b * c * hw);
                    for bi in 0..b {
                        let start = (bi * total + offset) * hw;
                        g.extend_from_slice(&dy.data()[start..start + c * hw]);
                    }
                    acc(grads, x, Tensor::from_shape_vec(val(x).shape().clone(), g));
                    offset += c;
                }
            }
            Op::Resize(x) => {
                let [b, c, hi, wi] = val(*x).shape().nchw().unwrap();
                let [_, _, h, w] = dy.shape().nchw().unwrap();
                let mut g = vec![T::zero(); b * c * hi * wi];
                for p in 0..b * c {
                    for i in 0..h.min(hi) {
                        let n = w.min(wi);
                        g[(p * hi + i) * wi..(p * hi + i) * wi + n]
                            .copy_from_slice(&dy.data()[(p * h + i) * w..(p * h + i) * w + n]);
                    }
                }
                acc(grads, *x, Tensor::from_shape_vec(val(*x).shape().clone(), g));
            }
            Op::Matmul { a, b, tb } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.dims()[0], av.dims()[1]);
                let n = dy.dims()[1];
                let mut ga = vec![T::zero(); m * k];
                let mut gb = vec![T::zero(); k * n];
                if *tb {
                    gemm(m, n, k, dy.data(), false, bv.data(), false, T::zero(), &mut ga);
                    gemm(n, m, k, dy.data(), true, av.data(), false, T::zero(), &mut gb);
                } else {
                    gemm(m, n, k, dy.data(), false, bv.data(), true, T::zero(), &mut ga);
                    gemm(k, m, n, av.data(), true, dy.data(), false, T::zero(), &mut gb);
                }
                acc(grads, *a, Tensor::from_shape_vec(av.shape().clone(), ga));
                acc(grads, *b, Tensor::from_shape_vec(bv.shape().clone(), gb));
            }
            Op::AddRowBias { x, b } => {
                let n = val(*b).numel();
                let mut gb = vec![T::zero(); n];
                for row in dy.data().chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                }
                acc(grads, *x, dy.clone());
                acc(grads, *b, Tensor::from_shape_vec(val(*b).shape().clone(), gb));
            }
            Op::CrossEntropy { scores, labels, softmax } => {
                let k = softmax.dims()[1];
                let scale = dy.data()[0] / T::from_usize(labels.len()).unwrap();
                let mut g = softmax.data().to_vec();
                for (bi, &l) in labels.iter().enumerate() {
                    g[bi * k + l] -= T::one();
                }
                g.iter_mut().for_each(|v| *v *= scale);
                acc(grads, *scores, Tensor::from_shape_vec(softmax.shape().clone(), g));
            }
            Op::DiceLoss { scores, mask, prob } => {
                let b = prob.dims()[0];
                let per = prob.numel() / b;
                let two = T::one() + T::one();
                let scale = dy.data()[0] / T::from_usize(b).unwrap();
                let mut g = vec![T::zero(); prob.numel()];
                for bi in 0..b {
                    let p = &prob.data()[bi * per..(bi + 1) * per];
                    let m = &mask.data()[bi * per..(bi + 1) * per];
                    let inter: T = p.iter().zip(m).map(|(&a, &b)| a * b).sum();
                    let den = p.iter().copied().sum::<T>() + m.iter().copied().sum::<T>() + T::one();
                    let num = two * inter + T::one();
                    for j in 0..per {
                        let ddice = (two * m[j] * den - num) / (den * den);
                        g[bi * per + j] = -scale * ddice * p[j] * (T::one() - p[j]);
                    }
                }
                acc(grads, *scores, Tensor::from_shape_vec(prob.shape().clone(), g));
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Gradients of a backward pass, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    entries: Vec<(ParamId, ParamValue<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&ParamValue<T>> {
        self.entries.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamValue<T>)> {
        self.entries.iter().map(|(id, g)| (*id, g))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward-pass context: the tape being recorded, read access to the
/// parameters, and running-statistic updates collected along the way.
pub struct Ctx<'p, T> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    pub mode: Mode,
    stats: Vec<(ParamId, ParamValue<T>)>,
}

impl<'p, T: Scalar> Ctx<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: Mode) -> Self {
        Ctx {
            tape: Tape::new(),
            params,
            mode,
            stats: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Feat {
        let p = self.params.get(id);
        self.tape.param(p)
    }

    pub fn input(&mut self, x: &Tensor<T>) -> Var {
        self.tape.constant(x.clone())
    }

    pub(crate) fn push_stat(&mut self, id: ParamId, value: ParamValue<T>) {
        self.stats.push((id, value));
    }

    pub fn into_parts(self) -> (Tape<T>, Vec<(ParamId, ParamValue<T>)>) {
        (self.tape, self.stats)
    }
}

/// Outcome of [`finite_difference_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

pub(crate) const FD_DENOMINATOR_FLOOR: f64 = 1e-3;

/// Compares `backward` against central differences over every real
/// coordinate of every trainable parameter (both planes of complex ones).
/// `f` records a forward pass in training mode and returns a scalar loss.
pub fn finite_difference_check<T, F>(params: &mut ParamStore<T>, eps: f64, f: F) -> Result<FdReport>
where
    T: Scalar,
    F: Fn(&mut Ctx<'_, T>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let eval = |params: &ParamStore<T>| -> Result<f64> {
        let mut ctx = Ctx::new(params, Mode::Train);
        let loss = f(&mut ctx)?;
        Ok(ctx.tape.value(loss).data()[0].as_f64())
    };
    let (analytic, base) = {
        let mut ctx = Ctx::new(params, Mode::Train);
        let loss = f(&mut ctx)?;
        let base = ctx.tape.value(loss).data()[0].as_f64();
        let (mut tape, _) = ctx.into_parts();
        (tape.backward(loss)?, base)
    };
    if eval(params)?.to_bits() != base.to_bits() {
        return Err(Error::Oracle("function is not deterministic".into()));
    }
    let ids: Vec<ParamId> = params.iter().filter(|p| p.trainable).map(|p| p.id).collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for id in ids {
        let grad = analytic.get(id).cloned().unwrap_or_else(|| params.get(id).value.zeros_like());
        let n_planes = params.get(id).value.planes().len();
        for plane in 0..n_planes {
            let len = params.get(id).value.planes()[plane].numel();
            for j in 0..len {
                let orig = params.get(id).value.planes()[plane].data()[j];
                let set = |params: &mut ParamStore<T>, v: T| {
                    params.get_mut(id).value.planes_mut()[plane].data_mut()[j] = v;
                };
                set(params, T::from_f64_lossy(orig.as_f64() + eps));
                let up = eval(params)?;
                set(params, T::from_f64_lossy(orig.as_f64() - eps));
                let down = eval(params)?;
                set(params, orig);
                let numeric = (up - down) / (2.0 * eps);
                let a = grad.planes()[plane].data()[j].as_f64();
                let denom = a.abs().max(numeric.abs()).max(FD_DENOMINATOR_FLOOR);
                let err = (a - numeric).abs() / denom;
                if !err.is_finite() {
                    return Err(Error::Oracle(format!("non-finite gradient at {} plane {plane}[{j}]", params.get(id).name)));
                }
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    Ok(FdReport {
        max_rel_error: worst,
        coords_checked: checked,
    })
}
