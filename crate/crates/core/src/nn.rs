//! Real and complex layers.
//!
//! Every layer carries a [`Domain`]. Complex layers take and return planar
//! [`Feat::Complex`] pairs and are built from real tape ops, so gradients
//! follow the split-real convention of [`crate::autodiff`].

use std::f64::consts::PI;
use std::sync::Arc;

use crate::autodiff::{Ctx, Domain, Feat, Mode, NormStats, ParamId, ParamStore, ParamValue, Var};
use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::rng::XorShift64Star;
use crate::tensor::{ComplexTensor, Scalar, Tensor};

/// Parameter initialization rule.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Real: uniform in `±sqrt(6 / fan_in)`. Complex: Rayleigh magnitude
    /// with scale `1 / sqrt(fan_in)` (the same `E|w|^2 = 2 / fan_in`) and
    /// phase uniform in `(-pi, pi]`.
    FanIn(usize),
    Zeros,
    /// Both planes set to one for complex parameters.
    Ones,
}

/// Allocates parameters for a network under construction. In counting mode
/// no tensors are allocated; only the trainable coordinate total is kept.
pub struct ParamBuilder<T> {
    store: ParamStore<T>,
    rng: XorShift64Star,
    scope: Vec<String>,
    counting: bool,
    counted: usize,
    next_id: usize,
}

impl<T: Scalar> ParamBuilder<T> {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            store: ParamStore::new(),
            rng: XorShift64Star::new(seed),
            scope: Vec::new(),
            counting: false,
            counted: 0,
            next_id: 0,
        }
    }

    pub fn counting() -> Self {
        ParamBuilder {
            counting: true,
            ..Self::new(0)
        }
    }

    pub fn is_counting(&self) -> bool {
        self.counting
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scope.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.scope.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    pub fn counted(&self) -> usize {
        if self.counting {
            self.counted
        } else {
            self.store.trainable_count()
        }
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, name: &str, dims: &[usize], domain: Domain, init: Init) -> Result<ParamId> {
        self.add(name, dims, domain, init, true)
    }

    pub fn buffer(&mut self, name: &str, dims: &[usize], domain: Domain, init: Init) -> Result<ParamId> {
        self.add(name, dims, domain, init, false)
    }

    fn add(&mut self, name: &str, dims: &[usize], domain: Domain, init: Init, trainable: bool) -> Result<ParamId> {
        let n = crate::tensor::Shape::new(dims)?.numel();
        if self.counting {
            if trainable {
                self.counted += n * domain.coords();
            }
            self.next_id += 1;
            return Ok(ParamId(self.next_id - 1));
        }
        let constant = |v: f64| Tensor::full(dims, T::from_f64_lossy(v));
        let value = match (domain, init) {
            (Domain::Real, Init::Zeros) => ParamValue::Real(constant(0.0)?),
            (Domain::Real, Init::Ones) => ParamValue::Real(constant(1.0)?),
            (Domain::Complex, Init::Zeros) => ParamValue::Complex(ComplexTensor::zeros(dims)?),
            (Domain::Complex, Init::Ones) => ParamValue::Complex(ComplexTensor::from_parts(constant(1.0)?, constant(1.0)?)?),
            (Domain::Real, Init::FanIn(fan_in)) => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                let data = (0..n).map(|_| T::from_f64_lossy(self.rng.uniform(-bound, bound))).collect();
                ParamValue::Real(Tensor::from_vec(dims, data)?)
            }
            (Domain::Complex, Init::FanIn(fan_in)) => {
                let sigma = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut re = Vec::with_capacity(n);
                let mut im = Vec::with_capacity(n);
                for _ in 0..n {
                    let u = 1.0 - self.rng.next_f64();
                    let mag = sigma * (-2.0 * u.ln()).sqrt();
                    // (-pi, pi]
                    let phase = PI - 2.0 * PI * self.rng.next_f64();
                    re.push(T::from_f64_lossy(mag * phase.cos()));
                    im.push(T::from_f64_lossy(mag * phase.sin()));
                }
                ParamValue::Complex(ComplexTensor::from_parts(Tensor::from_vec(dims, re)?, Tensor::from_vec(dims, im)?)?)
            }
        };
        Ok(self.store.add(self.full_name(name), value, trainable))
    }
}

fn expect_domain(x: &Feat, domain: Domain, layer: &str) -> Result<()> {
    if x.domain() != domain {
        return Err(Error::contract(format!(
            "{layer} is {domain:?} but received a {:?} feature",
            x.domain()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
    pub domain: Domain,
}

impl Conv2dSpec {
    pub fn new(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Conv2dSpec {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: 1,
            padding: 0,
            dilation: 1,
            bias: true,
            domain: Domain::Real,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn bias(mut self, b: bool) -> Self {
        self.bias = b;
        self
    }

    pub fn domain(mut self, d: Domain) -> Self {
        self.domain = d;
        self
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom {
            kernel: self.kernel,
            stride: (self.stride, self.stride),
            padding: (self.padding, self.padding),
            dilation: (self.dilation, self.dilation),
        }
    }

    pub fn param_count(&self) -> usize {
        let per = self.in_channels * self.out_channels * self.kernel.0 * self.kernel.1
            + if self.bias { self.out_channels } else { 0 };
        per * self.domain.coords()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.geom().output_hw(h, w)
    }
}

/// Applies `op(x_plane, w_plane)` with Eq.-2 style complex bookkeeping:
/// `re = op(xr, wr) - op(xi, wi)`, `im = op(xr, wi) + op(xi, wr)`.
fn complex_bilinear<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    x: Feat,
    w: Feat,
    mut op: impl FnMut(&mut Ctx<'_, T>, Var, Var) -> Result<Var>,
) -> Result<Feat> {
    match (x, w) {
        (Feat::Real(x), Feat::Real(w)) => Ok(Feat::Real(op(ctx, x, w)?)),
        (Feat::Complex(xr, xi), Feat::Complex(wr, wi)) => {
            let rr = op(ctx, xr, wr)?;
            let ii = op(ctx, xi, wi)?;
            let ri = op(ctx, xr, wi)?;
            let ir = op(ctx, xi, wr)?;
            let re = ctx.tape.sub(rr, ii)?;
            let im = ctx.tape.add(ri, ir)?;
            Ok(Feat::Complex(re, im))
        }
        _ => Err(Error::contract("input and weight domains differ")),
    }
}

fn add_bias<T: Scalar>(ctx: &mut Ctx<'_, T>, y: Feat, bias: Option<ParamId>, rowwise: bool) -> Result<Feat> {
    let Some(b) = bias else { return Ok(y) };
    let b = ctx.param(b);
    let add = |ctx: &mut Ctx<'_, T>, y: Var, b: Var| {
        if rowwise {
            ctx.tape.add_row_bias(y, b)
        } else {
            ctx.tape.add_channel_bias(y, b)
        }
    };
    match (y, b) {
        (Feat::Real(y), Feat::Real(b)) => Ok(Feat::Real(add(ctx, y, b)?)),
        (Feat::Complex(yr, yi), Feat::Complex(br, bi)) => Ok(Feat::Complex(add(ctx, yr, br)?, add(ctx, yi, bi)?)),
        _ => Err(Error::contract("bias domain differs from output")),
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: Conv2dSpec,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, spec: Conv2dSpec) -> Result<Self> {
        let (kh, kw) = spec.kernel;
        let fan_in = spec.in_channels * kh * kw;
        pb.push_scope(name);
        let weight = pb.param("weight", &[spec.out_channels, spec.in_channels, kh, kw], spec.domain, Init::FanIn(fan_in));
        let bias = if spec.bias {
            Some(pb.param("bias", &[spec.out_channels], spec.domain, Init::Zeros))
        } else {
            None
        };
        pb.pop_scope();
        Ok(Conv2d {
            spec,
            weight: weight?,
            bias: bias.transpose()?,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Feat) -> Result<Feat> {
        expect_domain(&x, self.spec.domain, "conv2d")?;
        let geom = self.spec.geom();
        let w = ctx.param(self.weight);
        let y = complex_bilinear(ctx, x, w, |ctx, x, w| ctx.tape.conv2d(x, w, geom))?;
        add_bias(ctx, y, self.bias, false)
    }
}

/// Transposed convolution; weight layout `[in, out, kh, kw]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub spec: Conv2dSpec,
    pub output_padding: usize,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, spec: Conv2dSpec, output_padding: usize) -> Result<Self> {
        let (kh, kw) = spec.kernel;
        let fan_in = spec.in_channels * kh * kw;
        pb.push_scope(name);
        let weight = pb.param("weight", &[spec.in_channels, spec.out_channels, kh, kw], spec.domain, Init::FanIn(fan_in));
        let bias = if spec.bias {
            Some(pb.param("bias", &[spec.out_channels], spec.domain, Init::Zeros))
        } else {
            None
        };
        pb.pop_scope();
        Ok(ConvTranspose2d {
            spec,
            output_padding,
            weight: weight?,
            bias: bias.transpose()?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Feat) -> Result<Feat> {
        expect_domain(&x, self.spec.domain, "conv_transpose2d")?;
        let geom = self.spec.geom();
        let op = (self.output_padding, self.output_padding);
        let w = ctx.param(self.weight);
        let y = complex_bilinear(ctx, x, w, |ctx, x, w| ctx.tape.conv_transpose2d(x, w, geom, op))?;
        add_bias(ctx, y, self.bias, false)
    }
}

/// Affine map over the last axis of `[N, in]`; weight `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub domain: Domain,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, in_features: usize, out_features: usize, domain: Domain) -> Result<Self> {
        pb.push_scope(name);
        let weight = pb.param("weight", &[out_features, in_features], domain, Init::FanIn(in_features));
        let bias = pb.param("bias", &[out_features], domain, Init::Zeros);
        pb.pop_scope();
        Ok(Linear {
            in_features,
            out_features,
            domain,
            weight: weight?,
            bias: Some(bias?),
        })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn param_count(&self) -> usize {
        (self.in_features + 1) * self.out_features * self.domain.coords()
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Feat) -> Result<Feat> {
        expect_domain(&x, self.domain, "linear")?;
        let w = ctx.param(self.weight);
        let y = complex_bilinear(ctx, x, w, |ctx, x, w| ctx.tape.matmul(x, w, true))?;
        add_bias(ctx, y, self.bias, true)
    }
}

/// Per-channel batch normalization. In the complex domain each plane is
/// normalized independently with its own scale and shift: the real plane
/// of `gamma`/`beta` applies to the real plane of the input, the imaginary
/// plane to the imaginary plane.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub domain: Domain,
    pub momentum: f64,
    pub eps: f64,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, channels: usize, domain: Domain) -> Result<Self> {
        pb.push_scope(name);
        let ids = (|| {
            Ok((
                pb.param("gamma", &[channels], domain, Init::Ones)?,
                pb.param("beta", &[channels], domain, Init::Zeros)?,
                pb.buffer("running_mean", &[channels], domain, Init::Zeros)?,
                pb.buffer("running_var", &[channels], domain, Init::Ones)?,
            ))
        })();
        pb.pop_scope();
        let (gamma, beta, running_mean, running_var) = ids?;
        Ok(BatchNorm2d {
            channels,
            domain,
            momentum: 0.1,
            eps: 1e-5,
            gamma,
            beta,
            running_mean,
            running_var,
        })
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    pub fn beta(&self) -> ParamId {
        self.beta
    }

    pub fn running_stats(&self) -> (ParamId, ParamId) {
        (self.running_mean, self.running_var)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels * self.domain.coords()
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Feat) -> Result<Feat> {
        expect_domain(&x, self.domain, "batchnorm")?;
        let eps = T::from_f64_lossy(self.eps);
        let gamma = ctx.param(self.gamma).planes();
        let beta = ctx.param(self.beta).planes();
        let params = ctx.params();
        let rm = params.get(self.running_mean).value.clone();
        let rv = params.get(self.running_var).value.clone();
        let mode = ctx.mode;
        let mut outs = Vec::new();
        let mut new_mean = Vec::new();
        let mut new_var = Vec::new();
        for (k, &plane) in x.planes().iter().enumerate() {
            let (m_old, v_old) = (rm.planes()[k], rv.planes()[k]);
            let stats = match mode {
                Mode::Train => NormStats::Batch { eps },
                Mode::Eval => NormStats::Fixed {
                    mean: m_old.data(),
                    var: v_old.data(),
                    eps,
                },
            };
            let (y, batch) = ctx.tape.batch_norm(plane, gamma[k], beta[k], stats)?;
            outs.push(y);
            if let Some((bm, bv)) = batch {
                let m = T::from_f64_lossy(self.momentum);
                let blend = |old: &Tensor<T>, new: &[T]| {
                    let data = old.data().iter().zip(new).map(|(&o, &n)| (T::one() - m) * o + m * n).collect();
                    Tensor::from_vec(old.dims().to_vec(), data)
                };
                new_mean.push(blend(m_old, &bm)?);
                new_var.push(blend(v_old, &bv)?);
            }
        }
        if !new_mean.is_empty() {
            let pack = |mut v: Vec<Tensor<T>>| -> Result<ParamValue<T>> {
                Ok(if v.len() == 1 {
                    ParamValue::Real(v.remove(0))
                } else {
                    let im = v.remove(1);
                    ParamValue::Complex(ComplexTensor::from_parts(v.remove(0), im)?)
                })
            };
            ctx.push_stat(self.running_mean, pack(new_mean)?);
            ctx.push_stat(self.running_var, pack(new_var)?);
        }
        Ok(match outs.as_slice() {
            &[y] => Feat::Real(y),
            &[r, i] => Feat::Complex(r, i),
            _ => unreachable!("a feature has one or two planes"),
        })
    }
}

/// ReLU for real features; CReLU (ReLU on each plane) for complex ones.
pub fn relu<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Feat) -> Feat {
    x.map_planes(|v| Ok(ctx.tape.relu(v))).expect("relu cannot fail")
}

pub fn crelu<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Feat) -> Feat {
    relu(ctx, x)
}

pub fn add<T: Scalar>(ctx: &mut Ctx<'_, T>, a: Feat, b: Feat) -> Result<Feat> {
    match (a, b) {
        (Feat::Real(a), Feat::Real(b)) => Ok(Feat::Real(ctx.tape.add(a, b)?)),
        (Feat::Complex(ar, ai), Feat::Complex(br, bi)) => Ok(Feat::Complex(ctx.tape.add(ar, br)?, ctx.tape.add(ai, bi)?)),
        _ => Err(Error::contract("cannot add features of different domains")),
    }
}

pub fn concat<T: Scalar>(ctx: &mut Ctx<'_, T>, xs: &[Feat]) -> Result<Feat> {
    let domain = xs.first().ok_or_else(|| Error::contract("concat of nothing"))?.domain();
    if xs.iter().any(|x| x.domain() != domain) {
        return Err(Error::contract("cannot concatenate features of different domains"));
    }
    let re: Vec<Var> = xs.iter().map(|x| x.planes()[0]).collect();
    let r = ctx.tape.concat(&re)?;
    Ok(match domain {
        Domain::Real => Feat::Real(r),
        Domain::Complex => {
            let im: Vec<Var> = xs.iter().map(|x| x.planes()[1]).collect();
            Feat::Complex(r, ctx.tape.concat(&im)?)
        }
    })
}

pub fn resize<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Feat, h: usize, w: usize) -> Result<Feat> {
    x.map_planes(|v| ctx.tape.resize(v, h, w))
}

pub fn spatial<T: Scalar>(ctx: &Ctx<'_, T>, x: Feat) -> Result<[usize; 4]> {
    ctx.tape.value(x.re()).shape().nchw()
}

/// Max pooling. Complex windows select the element of largest magnitude,
/// the first in row-major scan order on exact ties; padded positions never
/// win.
pub fn maxpool2d<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Feat, k: usize, stride: usize, padding: usize) -> Result<Feat> {
    let [b, c, h, w] = spatial(ctx, x)?;
    if k == 0 || stride == 0 || padding >= k {
        return Err(Error::Geometry(format!("invalid pooling window {k}/{stride}/{padding}")));
    }
    let ho = ConvGeom::out_len(h, k, stride, padding, 1)?;
    let wo = ConvGeom::out_len(w, k, stride, padding, 1)?;
    let planes: Vec<&[T]> = x.planes().iter().map(|&v| ctx.tape.value(v).data()).collect();
    let key = |j: usize| -> T {
        match planes.as_slice() {
            [r] => r[j],
            [r, i] => r[j] * r[j] + i[j] * i[j],
            _ => unreachable!(),
        }
    };
    let mut idx = Vec::with_capacity(b * c * ho * wo);
    for p in 0..b * c {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best: Option<(usize, T)> = None;
                for i in 0..k {
                    let ih = (oh * stride + i) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for j in 0..k {
                        let iw = (ow * stride + j) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let e = (p * h + ih as usize) * w + iw as usize;
                        let v = key(e);
                        if best.is_none_or(|(_, bv)| v > bv) {
                            best = Some((e, v));
                        }
                    }
                }
                idx.push(best.expect("window overlaps the input").0);
            }
        }
    }
    let idx = Arc::new(idx);
    x.map_planes(|v| ctx.tape.gather(v, Arc::clone(&idx), [b, c, ho, wo]))
}

pub fn avgpool2d<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Feat, k: usize) -> Result<Feat> {
    x.map_planes(|v| ctx.tape.avg_pool(v, k))
}

pub fn upsample_nearest<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Feat, factor: usize) -> Result<Feat> {
    x.map_planes(|v| ctx.tape.upsample_nearest(v, factor))
}

pub fn global_avg_pool<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Feat) -> Result<Feat> {
    x.map_planes(|v| ctx.tape.global_avg_pool(v))
}

/// Additive attention gate: `alpha = sigmoid(psi(relu(Wg g + Ws s)))`,
/// output `alpha * skip`. In the complex domain the sigmoid acts on the
/// magnitude of `psi`'s output, so `alpha` is real and scales both planes of
/// the skip features without changing their phase.
#[derive(Clone, Debug)]
pub struct AttentionGate {
    pub wg: Conv2d,
    pub ws: Conv2d,
    pub psi: Conv2d,
}

impl AttentionGate {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        gate_channels: usize,
        skip_channels: usize,
        inter_channels: usize,
        domain: Domain,
    ) -> Result<Self> {
        pb.push_scope(name);
        let r = (|| {
            Ok(AttentionGate {
                wg: Conv2d::new(pb, "wg", Conv2dSpec::new(gate_channels, inter_channels, 1).domain(domain))?,
                ws: Conv2d::new(pb, "ws", Conv2dSpec::new(skip_channels, inter_channels, 1).domain(domain))?,
                psi: Conv2d::new(pb, "psi", Conv2dSpec::new(inter_channels, 1, 1).domain(domain))?,
            })
        })();
        pb.pop_scope();
        r
    }

    /// The `[B,1,H,W]` coefficient map.
    pub fn coefficients<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, gate: Feat, skip: Feat) -> Result<Var> {
        let g = self.wg.forward(ctx, gate)?;
        let s = self.ws.forward(ctx, skip)?;
        let a = add(ctx, g, s).map_err(|_| Error::shape("gate and skip disagree after 1x1 mapping"))?;
        let a = relu(ctx, a);
        let q = self.psi.forward(ctx, a)?;
        let pre = match q {
            Feat::Real(v) => v,
            Feat::Complex(r, i) => ctx.tape.magnitude(r, i)?,
        };
        Ok(ctx.tape.sigmoid(pre))
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, gate: Feat, skip: Feat) -> Result<Feat> {
        let alpha = self.coefficients(ctx, gate, skip)?;
        skip.map_planes(|v| ctx.tape.mul_plane(alpha, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv;

    fn store_with<T: Scalar>(f: impl FnOnce(&mut ParamBuilder<T>)) -> ParamStore<T> {
        let mut pb = ParamBuilder::new(1);
        f(&mut pb);
        pb.finish()
    }

    fn set_real(store: &mut ParamStore<f64>, id: ParamId, data: Vec<f64>) {
        let p = store.get_mut(id);
        let dims = p.value.shape().dims().to_vec();
        p.value = ParamValue::Real(Tensor::from_vec(dims, data).unwrap());
    }

    fn set_complex(store: &mut ParamStore<f64>, id: ParamId, re: Vec<f64>, im: Vec<f64>) {
        let p = store.get_mut(id);
        let dims = p.value.shape().dims().to_vec();
        p.value = ParamValue::Complex(
            ComplexTensor::from_parts(Tensor::from_vec(dims.clone(), re).unwrap(), Tensor::from_vec(dims, im).unwrap()).unwrap(),
        );
    }

    fn values(ctx: &Ctx<'_, f64>, f: Feat) -> Vec<Vec<f64>> {
        f.planes().iter().map(|&v| ctx.tape.value(v).data().to_vec()).collect()
    }

    fn complex_input(ctx: &mut Ctx<'_, f64>, dims: [usize; 4], re: Vec<f64>, im: Vec<f64>) -> Feat {
        let r = ctx.input(&Tensor::from_vec(dims, re).unwrap());
        let i = ctx.input(&Tensor::from_vec(dims, im).unwrap());
        Feat::Complex(r, i)
    }

    #[test]
    fn identity_kernels() {
        let mut conv = None;
        let mut store = store_with(|pb| conv = Some(Conv2d::new(pb, "c", Conv2dSpec::new(1, 1, 1).bias(false)).unwrap()));
        let conv = conv.unwrap();
        set_real(&mut store, conv.weight(), vec![1.0]);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let data: Vec<f64> = (0..9).map(|v| v as f64 - 4.0).collect();
        let x = ctx.input(&Tensor::from_vec([1, 1, 3, 3], data.clone()).unwrap());
        let y = conv.forward(&mut ctx, Feat::Real(x)).unwrap();
        assert_eq!(values(&ctx, y)[0], data);
    }

    #[test]
    fn all_ones_kernel_counts_window() {
        let mut conv = None;
        let mut store = store_with(|pb| conv = Some(Conv2d::new(pb, "c", Conv2dSpec::new(1, 1, 3)).unwrap()));
        let conv = conv.unwrap();
        set_real(&mut store, conv.weight(), vec![1.0; 9]);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let x = ctx.input(&Tensor::ones([1, 1, 5, 5]).unwrap());
        let y = conv.forward(&mut ctx, Feat::Real(x)).unwrap();
        assert_eq!(values(&ctx, y)[0], vec![9.0; 9]);
    }

    #[test]
    fn complex_unit_and_imaginary_kernels() {
        let mut conv = None;
        let spec = Conv2dSpec::new(1, 1, 1).bias(false).domain(Domain::Complex);
        let mut store = store_with(|pb| conv = Some(Conv2d::new(pb, "c", spec).unwrap()));
        let conv = conv.unwrap();
        let re: Vec<f64> = vec![1.0, -2.0, 0.5, 3.0];
        let im: Vec<f64> = vec![0.0, 1.0, -1.5, 2.0];

        set_complex(&mut store, conv.weight(), vec![1.0], vec![0.0]);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let x = complex_input(&mut ctx, [1, 1, 2, 2], re.clone(), im.clone());
        let y = conv.forward(&mut ctx, x).unwrap();
        assert_eq!(values(&ctx, y), vec![re.clone(), im.clone()]);

        set_complex(&mut store, conv.weight(), vec![0.0], vec![1.0]);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let x = complex_input(&mut ctx, [1, 1, 2, 2], re.clone(), vec![0.0; 4]);
        let y = conv.forward(&mut ctx, x).unwrap();
        let v = values(&ctx, y);
        assert!(v[0].iter().all(|&r| r == 0.0));
        assert_eq!(v[1], re);
    }

    #[test]
    fn complex_layer_matches_four_real_convolutions_exactly() {
        let mut conv = None;
        let spec = Conv2dSpec::new(2, 3, 3).padding(1).stride(2).domain(Domain::Complex);
        let store: ParamStore<f32> = store_with(|pb| conv = Some(Conv2d::new(pb, "c", spec).unwrap()));
        let conv = conv.unwrap();
        let mut rng = XorShift64Star::new(8);
        let mut plane = || Tensor::from_vec([2, 2, 7, 6], (0..168).map(|_| rng.uniform(-2.0, 2.0) as f32).collect()).unwrap();
        let x = ComplexTensor::from_parts(plane(), plane()).unwrap();
        let w = match &store.get(conv.weight()).value {
            ParamValue::Complex(z) => z.clone(),
            _ => unreachable!(),
        };
        let expect = conv::conv2d_complex(&x, &w, None, spec.geom()).unwrap();
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let xr = ctx.input(&x.re);
        let xi = ctx.input(&x.im);
        let y = conv.forward(&mut ctx, Feat::Complex(xr, xi)).unwrap();
        let Feat::Complex(yr, yi) = y else { unreachable!() };
        assert_eq!(ctx.tape.value(yr).data(), expect.re.data());
        assert_eq!(ctx.tape.value(yi).data(), expect.im.data());
    }

    #[test]
    fn domain_mismatch_is_contract_error() {
        let mut conv = None;
        let store: ParamStore<f64> = store_with(|pb| conv = Some(Conv2d::new(pb, "c", Conv2dSpec::new(1, 1, 1).domain(Domain::Complex)).unwrap()));
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let x = ctx.input(&Tensor::ones([1, 1, 2, 2]).unwrap());
        assert!(matches!(conv.unwrap().forward(&mut ctx, Feat::Real(x)), Err(Error::Contract(_))));
    }

    #[test]
    fn conv_param_count_doubles() {
        let spec = Conv2dSpec::new(4, 8, 3);
        assert_eq!(spec.param_count(), 296);
        assert_eq!(spec.domain(Domain::Complex).param_count(), 592);
        let mut pb = ParamBuilder::<f32>::new(0);
        Conv2d::new(&mut pb, "c", spec.domain(Domain::Complex)).unwrap();
        assert_eq!(pb.counted(), 592);
        let mut counting = ParamBuilder::<f32>::counting();
        Conv2d::new(&mut counting, "c", spec.domain(Domain::Complex)).unwrap();
        assert_eq!(counting.counted(), 592);
    }

    #[test]
    fn linear_identity_and_rotation() {
        let mut lin = None;
        let mut store = store_with(|pb| lin = Some(Linear::new(pb, "fc", 2, 2, Domain::Real).unwrap()));
        let lin = lin.unwrap();
        set_real(&mut store, lin.weight(), vec![1.0, 0.0, 0.0, 1.0]);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let x = ctx.input(&Tensor::from_vec([1, 2], vec![3.0, -4.0]).unwrap());
        let y = lin.forward(&mut ctx, Feat::Real(x)).unwrap();
        assert_eq!(values(&ctx, y)[0], vec![3.0, -4.0]);

        let mut lin = None;
        let mut store = store_with(|pb| lin = Some(Linear::new(pb, "fc", 1, 1, Domain::Complex).unwrap()));
        let lin = lin.unwrap();
        set_complex(&mut store, lin.weight(), vec![0.0], vec![1.0]);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let r = ctx.input(&Tensor::from_vec([1, 1], vec![2.0]).unwrap());
        let i = ctx.input(&Tensor::from_vec([1, 1], vec![5.0]).unwrap());
        let y = lin.forward(&mut ctx, Feat::Complex(r, i)).unwrap();
        // i * (2 + 5i) = -5 + 2i
        assert_eq!(values(&ctx, y), vec![vec![-5.0], vec![2.0]]);
    }

    #[test]
    fn crelu_clamps_planes() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let x = complex_input(&mut ctx, [1, 1, 1, 3], vec![-1.0, 2.0, -3.0], vec![2.0, 1.0, -4.0]);
        let y = crelu(&mut ctx, x);
        assert_eq!(values(&ctx, y), vec![vec![0.0, 2.0, 0.0], vec![2.0, 1.0, 0.0]]);
    }

    #[test]
    fn batchnorm_training_statistics() {
        let mut bn = None;
        let store: ParamStore<f64> = store_with(|pb| bn = Some(BatchNorm2d::new(pb, "bn", 2, Domain::Complex).unwrap()));
        let bn = bn.unwrap();
        let mut rng = XorShift64Star::new(4);
        let n = 3 * 2 * 4 * 4;
        let re: Vec<f64> = (0..n).map(|_| rng.uniform(-3.0, 5.0)).collect();
        let im: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut ctx = Ctx::new(&store, Mode::Train);
        let x = complex_input(&mut ctx, [3, 2, 4, 4], re, im);
        let y = bn.forward(&mut ctx, x).unwrap();
        for plane in values(&ctx, y) {
            for ch in 0..2 {
                let vals: Vec<f64> = (0..3).flat_map(|b| plane[(b * 2 + ch) * 16..(b * 2 + ch + 1) * 16].to_vec()).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4, "{mean} {var}");
            }
        }
    }

    #[test]
    fn batchnorm_eval_matches_train_with_batch_stats() {
        let mut bn = None;
        let mut store: ParamStore<f64> = store_with(|pb| bn = Some(BatchNorm2d::new(pb, "bn", 1, Domain::Real).unwrap()));
        let mut bn = bn.unwrap();
        bn.eps = 1e-5;
        let data = vec![1.0, 2.0, 4.0, 7.0, -1.0, 0.0, 3.0, 2.0];
        let mean = data.iter().sum::<f64>() / 8.0;
        let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        let (rm, rv) = bn.running_stats();
        set_real(&mut store, rm, vec![mean]);
        set_real(&mut store, rv, vec![var]);
        let run = |mode| {
            let mut ctx = Ctx::new(&store, mode);
            let x = ctx.input(&Tensor::from_vec([2, 1, 2, 2], data.clone()).unwrap());
            let y = bn.forward(&mut ctx, Feat::Real(x)).unwrap();
            values(&ctx, y)[0].clone()
        };
        let (a, b) = (run(Mode::Train), run(Mode::Eval));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_constant_channel_gives_shift() {
        let mut bn = None;
        let mut store: ParamStore<f64> = store_with(|pb| bn = Some(BatchNorm2d::new(pb, "bn", 1, Domain::Real).unwrap()));
        let bn = bn.unwrap();
        set_real(&mut store, bn.beta(), vec![0.25]);
        set_real(&mut store, bn.gamma(), vec![3.0]);
        let mut ctx = Ctx::new(&store, Mode::Train);
        let x = ctx.input(&Tensor::full([2, 1, 2, 2], 7.0).unwrap());
        let y = bn.forward(&mut ctx, Feat::Real(x)).unwrap();
        assert!(values(&ctx, y)[0].iter().all(|&v| v == 0.25));
    }

    #[test]
    fn batchnorm_rejects_single_sample_batch() {
        let mut bn = None;
        let store: ParamStore<f64> = store_with(|pb| bn = Some(BatchNorm2d::new(pb, "bn", 1, Domain::Real).unwrap()));
        let mut ctx = Ctx::new(&store, Mode::Train);
        let x = ctx.input(&Tensor::ones([1, 1, 2, 2]).unwrap());
        assert!(matches!(bn.unwrap().forward(&mut ctx, Feat::Real(x)), Err(Error::Contract(_))));
    }

    #[test]
    fn batchnorm_updates_running_stats() {
        let mut bn = None;
        let mut store: ParamStore<f64> = store_with(|pb| bn = Some(BatchNorm2d::new(pb, "bn", 1, Domain::Real).unwrap()));
        let bn = bn.unwrap();
        let mut ctx = Ctx::new(&store, Mode::Train);
        let x = ctx.input(&Tensor::from_vec([2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        bn.forward(&mut ctx, Feat::Real(x)).unwrap();
        let (_, stats) = ctx.into_parts();
        store.apply_stats(stats);
        let (rm, rv) = bn.running_stats();
        assert!((store.get(rm).value.planes()[0].data()[0] - 0.4).abs() < 1e-12);
        // unbiased variance of {1,3,5,7} = 20/3
        let expect = 0.9 + 0.1 * 20.0 / 3.0;
        assert!((store.get(rv).value.planes()[0].data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn complex_maxpool_picks_largest_magnitude() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let x = complex_input(&mut ctx, [1, 1, 2, 2], vec![1.0, 0.0, -2.0, 1.0], vec![0.0, 3.0, 0.0, 1.0]);
        let y = maxpool2d(&mut ctx, x, 2, 2, 0).unwrap();
        assert_eq!(values(&ctx, y), vec![vec![0.0], vec![3.0]]);
    }

    #[test]
    fn pooling_constant_and_up_down_identity() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let c = ctx.input(&Tensor::full([1, 2, 4, 4], 1.5).unwrap());
        for y in [
            maxpool2d(&mut ctx, Feat::Real(c), 2, 2, 0).unwrap(),
            avgpool2d(&mut ctx, Feat::Real(c), 2).unwrap(),
        ] {
            assert!(values(&ctx, y)[0].iter().all(|&v| v == 1.5));
        }
        let up = upsample_nearest(&mut ctx, Feat::Real(c), 2).unwrap();
        assert!(values(&ctx, up)[0].iter().all(|&v| v == 1.5));

        let mut rng = XorShift64Star::new(9);
        let data: Vec<f64> = (0..2 * 3 * 3).map(|_| rng.uniform(-5.0, 5.0)).collect();
        let x = complex_input(&mut ctx, [1, 2, 3, 3], data.clone(), data.iter().map(|v| -v).collect());
        let up = upsample_nearest(&mut ctx, x, 2).unwrap();
        let down = avgpool2d(&mut ctx, up, 2).unwrap();
        assert_eq!(values(&ctx, down), values(&ctx, x));
    }

    #[test]
    fn maxpool_is_permutation_stable() {
        // Same multiset of window values, different scan positions: the
        // selected value is unchanged when magnitudes are distinct.
        let store: ParamStore<f64> = ParamStore::new();
        let vals = [(1.0, 0.5), (-2.0, 0.1), (0.3, -1.9), (0.0, 0.4)];
        let mut picks = Vec::new();
        for rot in 0..4 {
            let mut ctx = Ctx::new(&store, Mode::Eval);
            let (re, im): (Vec<f64>, Vec<f64>) = (0..4).map(|j| vals[(j + rot) % 4]).unzip();
            let x = complex_input(&mut ctx, [1, 1, 2, 2], re, im);
            let y = maxpool2d(&mut ctx, x, 2, 2, 0).unwrap();
            picks.push(values(&ctx, y));
        }
        assert!(picks.windows(2).all(|w| w[0] == w[1]));
    }

    fn gate_fixture(domain: Domain, psi_bias: f64) -> (AttentionGate, ParamStore<f64>) {
        let mut gate = None;
        let mut store = store_with(|pb| gate = Some(AttentionGate::new(pb, "att", 2, 3, 2, domain).unwrap()));
        let gate = gate.unwrap();
        let bias = gate.psi.bias().unwrap();
        match domain {
            Domain::Real => set_real(&mut store, bias, vec![psi_bias]),
            Domain::Complex => set_complex(&mut store, bias, vec![psi_bias], vec![0.0]),
        }
        let w = gate.psi.weight();
        let zeros = vec![0.0; 2];
        match domain {
            Domain::Real => set_real(&mut store, w, zeros),
            Domain::Complex => set_complex(&mut store, w, zeros.clone(), zeros),
        }
        (gate, store)
    }

    #[test]
    fn attention_gate_saturation() {
        let mut rng = XorShift64Star::new(2);
        let g: Vec<f64> = (0..2 * 4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let s: Vec<f64> = (0..3 * 4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        for (bias, expect_pass) in [(60.0, true), (-60.0, false)] {
            let (gate, store) = gate_fixture(Domain::Real, bias);
            let mut ctx = Ctx::new(&store, Mode::Eval);
            let gv = ctx.input(&Tensor::from_vec([1, 2, 2, 2], g.clone()).unwrap());
            let sv = ctx.input(&Tensor::from_vec([1, 3, 2, 2], s.clone()).unwrap());
            let y = gate.forward(&mut ctx, Feat::Real(gv), Feat::Real(sv)).unwrap();
            let out = &values(&ctx, y)[0];
            for (o, e) in out.iter().zip(&s) {
                let want = if expect_pass { *e } else { 0.0 };
                assert!((o - want).abs() < 1e-12, "{o} vs {want}");
            }
        }
        // Complex: |psi| = 60 saturates the gate open; phase of skip kept.
        let (gate, store) = gate_fixture(Domain::Complex, 60.0);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let gv = complex_input(&mut ctx, [1, 2, 2, 2], g.clone(), g.clone());
        let sv = complex_input(&mut ctx, [1, 3, 2, 2], s.clone(), s.iter().map(|v| 2.0 * v).collect());
        let y = gate.forward(&mut ctx, gv, sv).unwrap();
        assert_eq!(values(&ctx, y), values(&ctx, sv));
    }
}
