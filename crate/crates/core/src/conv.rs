//! 2-D convolution kernels (im2col + GEMM) and their adjoints.
//!
//! Weights are `[out, in, kh, kw]` for convolution and `[in, out, kh, kw]`
//! for transposed convolution. All kernels are sample-parallel; the weight
//! gradient is reduced over fixed-size batch chunks in index order so the
//! result does not depend on thread count.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{gemm, ComplexTensor, Scalar, Shape, Tensor};

const WEIGHT_GRAD_CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl ConvGeom {
    pub fn square(k: usize, stride: usize, padding: usize) -> Self {
        ConvGeom {
            kernel: (k, k),
            stride: (stride, stride),
            padding: (padding, padding),
            dilation: (1, 1),
        }
    }

    fn check(&self) -> Result<()> {
        let ok = self.kernel.0 > 0
            && self.kernel.1 > 0
            && self.stride.0 > 0
            && self.stride.1 > 0
            && self.dilation.0 > 0
            && self.dilation.1 > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Geometry(format!(
                "kernel, stride and dilation must be positive: {self:?}"
            )))
        }
    }

    /// Convolution output extent along one axis.
    pub fn out_len(input: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Result<usize> {
        let span = dil * (k - 1) + 1;
        let padded = input + 2 * pad;
        if padded < span {
            return Err(Error::Geometry(format!(
                "input extent {input} with padding {pad} is smaller than kernel span {span}"
            )));
        }
        Ok((padded - span) / stride + 1)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.check()?;
        Ok((
            Self::out_len(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0)?,
            Self::out_len(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1)?,
        ))
    }

    /// Transposed-convolution output extent, `output_padding` added on the
    /// bottom/right edge.
    pub fn transposed_hw(&self, h: usize, w: usize, output_padding: (usize, usize)) -> Result<(usize, usize)> {
        self.check()?;
        let axis = |i: usize, k: usize, s: usize, p: usize, d: usize, op: usize| {
            let full = (i - 1) * s + d * (k - 1) + 1 + op;
            if full <= 2 * p {
                Err(Error::Geometry(format!(
                    "transposed output extent {full} vanishes with padding {p}"
                )))
            } else {
                Ok(full - 2 * p)
            }
        };
        Ok((
            axis(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0, output_padding.0)?,
            axis(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1, output_padding.1)?,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }
}

struct Plan {
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    g: ConvGeom,
}

impl Plan {
    fn rows(&self) -> usize {
        self.c * self.g.kernel.0 * self.g.kernel.1
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let (kh, kw) = self.g.kernel;
        let (sh, sw) = self.g.stride;
        let (ph, pw) = self.g.padding;
        let (dh, dw) = self.g.dilation;
        let n = self.cols();
        let mut row = 0;
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let out = &mut cols[row * n..(row + 1) * n];
                    for oh in 0..self.ho {
                        let dst = &mut out[oh * self.wo..(oh + 1) * self.wo];
                        let ih = (oh * sh + ki * dh) as isize - ph as isize;
                        if ih < 0 || ih >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * sw + kj * dw) as isize - pw as isize;
                            *d = if iw < 0 || iw >= self.w as isize {
                                T::zero()
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let (kh, kw) = self.g.kernel;
        let (sh, sw) = self.g.stride;
        let (ph, pw) = self.g.padding;
        let (dh, dw) = self.g.dilation;
        let n = self.cols();
        x.fill(T::zero());
        let mut row = 0;
        for c in 0..self.c {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let src_row = &cols[row * n..(row + 1) * n];
                    for oh in 0..self.ho {
                        let ih = (oh * sh + ki * dh) as isize - ph as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        let src = &src_row[oh * self.wo..(oh + 1) * self.wo];
                        for (ow, &v) in src.iter().enumerate() {
                            let iw = (ow * sw + kj * dw) as isize - pw as isize;
                            if iw >= 0 && iw < self.w as isize {
                                dst[iw as usize] += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn plan_for(x_dims: [usize; 4], g: ConvGeom) -> Result<Plan> {
    let [_, c, h, w] = x_dims;
    let (ho, wo) = g.output_hw(h, w)?;
    Ok(Plan { c, h, w, ho, wo, g })
}

fn weight_dims(w: &Tensor<impl Scalar>, g: &ConvGeom) -> Result<[usize; 4]> {
    let d = w.shape().nchw()?;
    if (d[2], d[3]) != g.kernel {
        return Err(Error::shape(format!(
            "weight {} does not match kernel {:?}",
            w.shape(),
            g.kernel
        )));
    }
    Ok(d)
}

/// Cross-correlation `y[b,o] = sum_c w[o,c] * x[b,c]` with the given geometry.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: ConvGeom) -> Result<Tensor<T>> {
    let xd = x.shape().nchw()?;
    let [o, c, _, _] = weight_dims(w, &g)?;
    if xd[1] != c {
        return Err(Error::shape(format!(
            "input has {} channels, weight expects {c}",
            xd[1]
        )));
    }
    let plan = plan_for(xd, g)?;
    Ok(forward_with_plan(x.data(), xd[0], w.data(), o, &plan))
}

fn forward_with_plan<T: Scalar>(x: &[T], b: usize, w: &[T], o: usize, plan: &Plan) -> Tensor<T> {
    let (rows, n) = (plan.rows(), plan.cols());
    let in_len = plan.c * plan.h * plan.w;
    let mut out = vec![T::zero(); b * o * n];
    parallel::for_each_chunk(&mut out, o * n, |bi, y| {
        let xs = &x[bi * in_len..(bi + 1) * in_len];
        if plan.g.is_pointwise() {
            gemm(o, rows, n, w, false, xs, false, T::zero(), y);
        } else {
            let mut cols = vec![T::zero(); rows * n];
            plan.im2col(xs, &mut cols);
            gemm(o, rows, n, w, false, &cols, false, T::zero(), y);
        }
    });
    Tensor::from_shape_vec(
        Shape::new([b, o, plan.ho, plan.wo]).expect("valid output shape"),
        out,
    )
}

/// Adjoint of [`conv2d_forward`] with respect to its input.
pub fn conv2d_backward_input<T: Scalar>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    g: ConvGeom,
    x_dims: [usize; 4],
) -> Result<Tensor<T>> {
    let [o, c, _, _] = weight_dims(w, &g)?;
    let plan = plan_for(x_dims, g)?;
    let [b, xc, _, _] = x_dims;
    if xc != c || dy.dims() != [b, o, plan.ho, plan.wo] {
        return Err(Error::shape(format!(
            "output gradient {} does not match input {x_dims:?} and weight {}",
            dy.shape(),
            w.shape()
        )));
    }
    Ok(backward_input_with_plan(dy.data(), b, w.data(), o, &plan))
}

fn backward_input_with_plan<T: Scalar>(dy: &[T], b: usize, w: &[T], o: usize, plan: &Plan) -> Tensor<T> {
    let (rows, n) = (plan.rows(), plan.cols());
    let in_len = plan.c * plan.h * plan.w;
    let mut dx = vec![T::zero(); b * in_len];
    parallel::for_each_chunk(&mut dx, in_len, |bi, dxs| {
        let dys = &dy[bi * o * n..(bi + 1) * o * n];
        if plan.g.is_pointwise() {
            gemm(rows, o, n, w, true, dys, false, T::zero(), dxs);
        } else {
            let mut cols = vec![T::zero(); rows * n];
            gemm(rows, o, n, w, true, dys, false, T::zero(), &mut cols);
            plan.col2im(&cols, dxs);
        }
    });
    Tensor::from_shape_vec(
        Shape::new([b, plan.c, plan.h, plan.w]).expect("valid input shape"),
        dx,
    )
}

/// Adjoint of [`conv2d_forward`] with respect to its weight.
pub fn conv2d_backward_weight<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    g: ConvGeom,
    w_dims: [usize; 4],
) -> Result<Tensor<T>> {
    let xd = x.shape().nchw()?;
    let plan = plan_for(xd, g)?;
    let [o, c, kh, kw] = w_dims;
    if c != xd[1] || (kh, kw) != g.kernel || dy.dims() != [xd[0], o, plan.ho, plan.wo] {
        return Err(Error::shape(format!(
            "output gradient {} does not match input {} and weight {w_dims:?}",
            dy.shape(),
            x.shape()
        )));
    }
    let dw = backward_weight_with_plan(dy.data(), x.data(), xd[0], o, &plan);
    Ok(Tensor::from_shape_vec(Shape::new(w_dims)?, dw))
}

fn backward_weight_with_plan<T: Scalar>(dy: &[T], x: &[T], b: usize, o: usize, plan: &Plan) -> Vec<T> {
    let (rows, n) = (plan.rows(), plan.cols());
    let in_len = plan.c * plan.h * plan.w;
    let chunks = b.div_ceil(WEIGHT_GRAD_CHUNK);
    let partials = parallel::map_range(chunks, |ci| {
        let mut acc = vec![T::zero(); o * rows];
        let mut cols = vec![T::zero(); if plan.g.is_pointwise() { 0 } else { rows * n }];
        for bi in ci * WEIGHT_GRAD_CHUNK..((ci + 1) * WEIGHT_GRAD_CHUNK).min(b) {
            let dys = &dy[bi * o * n..(bi + 1) * o * n];
            let xs = &x[bi * in_len..(bi + 1) * in_len];
            let src = if plan.g.is_pointwise() {
                xs
            } else {
                plan.im2col(xs, &mut cols);
                &cols
            };
            gemm(o, n, rows, dys, false, src, true, T::one(), &mut acc);
        }
        acc
    });
    let mut total = vec![T::zero(); o * rows];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Transposed convolution; `w` is `[in, out, kh, kw]`.
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: ConvGeom,
    output_padding: (usize, usize),
) -> Result<Tensor<T>> {
    let [b, c, h, wd] = x.shape().nchw()?;
    let [ci, o, _, _] = weight_dims(w, &g)?;
    if ci != c {
        return Err(Error::shape(format!(
            "input has {c} channels, transposed weight expects {ci}"
        )));
    }
    let (ho, wo) = g.transposed_hw(h, wd, output_padding)?;
    let plan = plan_for([b, o, ho, wo], g)?;
    if (plan.ho, plan.wo) != (h, wd) {
        return Err(Error::Geometry(format!(
            "transposed geometry {g:?} with output padding {output_padding:?} is inconsistent"
        )));
    }
    Ok(backward_input_with_plan(x.data(), b, w.data(), c, &plan))
}

/// Adjoint of [`conv_transpose2d_forward`] with respect to its input.
pub fn conv_transpose2d_backward_input<T: Scalar>(dy: &Tensor<T>, w: &Tensor<T>, g: ConvGeom) -> Result<Tensor<T>> {
    conv2d_forward(dy, w, g)
}

/// Adjoint of [`conv_transpose2d_forward`] with respect to its weight.
pub fn conv_transpose2d_backward_weight<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    g: ConvGeom,
    w_dims: [usize; 4],
) -> Result<Tensor<T>> {
    let yd = dy.shape().nchw()?;
    let xd = x.shape().nchw()?;
    let plan = plan_for(yd, g)?;
    let [ci, o, kh, kw] = w_dims;
    if ci != xd[1] || o != yd[1] || (kh, kw) != g.kernel || (plan.ho, plan.wo) != (xd[2], xd[3]) {
        return Err(Error::shape(format!(
            "transposed weight {w_dims:?} does not match input {} and output {}",
            x.shape(),
            dy.shape()
        )));
    }
    let dw = backward_weight_with_plan(x.data(), dy.data(), xd[0], ci, &plan);
    Ok(Tensor::from_shape_vec(Shape::new(w_dims)?, dw))
}

/// Complex cross-correlation from four real ones:
/// `re = wr*xr - wi*xi`, `im = wi*xr + wr*xi`, then the complex bias.
pub fn conv2d_complex<T: Scalar>(
    x: &ComplexTensor<T>,
    w: &ComplexTensor<T>,
    bias: Option<&ComplexTensor<T>>,
    g: ConvGeom,
) -> Result<ComplexTensor<T>> {
    let rr = conv2d_forward(&x.re, &w.re, g)?;
    let ii = conv2d_forward(&x.im, &w.im, g)?;
    let ri = conv2d_forward(&x.re, &w.im, g)?;
    let ir = conv2d_forward(&x.im, &w.re, g)?;
    let mut re = rr.sub(&ii)?;
    let mut im = ri.add(&ir)?;
    if let Some(b) = bias {
        let [_, o, _, _] = re.shape().nchw()?;
        if b.numel() != o {
            return Err(Error::shape(format!("bias has {} entries for {o} channels", b.numel())));
        }
        add_channel_bias(&mut re, b.re.data());
        add_channel_bias(&mut im, b.im.data());
    }
    ComplexTensor::from_parts(re, im)
}

fn add_channel_bias<T: Scalar>(y: &mut Tensor<T>, b: &[T]) {
    let plane = y.numel() / y.dims()[0] / b.len();
    for (j, v) in y.data_mut().iter_mut().enumerate() {
        *v += b[(j / plane) % b.len()];
    }
}

/// The same complex convolution as one real convolution on stacked planes:
/// `[sr; si] = [[wr, -wi], [wi, wr]] * [xr; xi]`.
pub fn conv2d_complex_block<T: Scalar>(x: &ComplexTensor<T>, w: &ComplexTensor<T>, g: ConvGeom) -> Result<ComplexTensor<T>> {
    let [b, c, h, wd] = x.shape().nchw()?;
    let [o, wc, kh, kw] = weight_dims(&w.re, &g)?;
    w.re.expect_same_shape(&w.im)?;
    let plane = h * wd;
    let mut stacked = Vec::with_capacity(2 * x.numel());
    for bi in 0..b {
        let s = bi * c * plane..(bi + 1) * c * plane;
        stacked.extend_from_slice(&x.re.data()[s.clone()]);
        stacked.extend_from_slice(&x.im.data()[s]);
    }
    let xs = Tensor::from_vec([b, 2 * c, h, wd], stacked)?;
    let k = kh * kw;
    let mut block = vec![T::zero(); 4 * o * wc * k];
    for oc in 0..o {
        for ic in 0..wc {
            let src = (oc * wc + ic) * k..(oc * wc + ic + 1) * k;
            let at = |row: usize, col: usize| (row * 2 * wc + col) * k;
            for (j, (&r, &i)) in w.re.data()[src.clone()].iter().zip(&w.im.data()[src]).enumerate() {
                block[at(oc, ic) + j] = r;
                block[at(oc, wc + ic) + j] = -i;
                block[at(o + oc, ic) + j] = i;
                block[at(o + oc, wc + ic) + j] = r;
            }
        }
    }
    let wb = Tensor::from_vec([2 * o, 2 * wc, kh, kw], block)?;
    let y = conv2d_forward(&xs, &wb, g)?;
    let [_, _, ho, wo] = y.shape().nchw()?;
    let n = o * ho * wo;
    let (mut re, mut im) = (Vec::with_capacity(b * n), Vec::with_capacity(b * n));
    for chunk in y.data().chunks(2 * n) {
        re.extend_from_slice(&chunk[..n]);
        im.extend_from_slice(&chunk[n..]);
    }
    ComplexTensor::from_parts(Tensor::from_vec([b, o, ho, wo], re)?, Tensor::from_vec([b, o, ho, wo], im)?)
}

/// Direct nested-loop convolution in `f64`, independent of the im2col path.
/// Used as an oracle by the test suites.
#[doc(hidden)]
pub mod reference {
    use super::ConvGeom;

    /// `x` is `[b,c,h,w]`, `w` is `[o,c,kh,kw]`; returns `[b,o,ho,wo]` and
    /// the output spatial size.
    pub fn conv2d(
        x: &[f64],
        xd: [usize; 4],
        w: &[f64],
        wd: [usize; 4],
        bias: Option<&[f64]>,
        g: ConvGeom,
    ) -> (Vec<f64>, (usize, usize)) {
        let [b, c, h, wi] = xd;
        let [o, _, kh, kw] = wd;
        let ho = (h + 2 * g.padding.0 - g.dilation.0 * (kh - 1) - 1) / g.stride.0 + 1;
        let wo = (wi + 2 * g.padding.1 - g.dilation.1 * (kw - 1) - 1) / g.stride.1 + 1;
        let mut y = vec![0.0; b * o * ho * wo];
        for bi in 0..b {
            for oc in 0..o {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = bias.map_or(0.0, |bb| bb[oc]);
                        for ic in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ih = (oh * g.stride.0 + ki * g.dilation.0) as isize - g.padding.0 as isize;
                                    let iw = (ow * g.stride.1 + kj * g.dilation.1) as isize - g.padding.1 as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wi as isize {
                                        continue;
                                    }
                                    acc += x[((bi * c + ic) * h + ih as usize) * wi + iw as usize]
                                        * w[((oc * c + ic) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        y[((bi * o + oc) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
        (y, (ho, wo))
    }

    /// Complex convolution evaluated one complex multiply-accumulate at a
    /// time. Returns `(re, im)` planes.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_complex(
        xr: &[f64],
        xi: &[f64],
        xd: [usize; 4],
        wr: &[f64],
        wi: &[f64],
        wd: [usize; 4],
        g: ConvGeom,
    ) -> (Vec<f64>, Vec<f64>) {
        let [b, c, h, width] = xd;
        let [o, _, kh, kw] = wd;
        let ho = (h + 2 * g.padding.0 - g.dilation.0 * (kh - 1) - 1) / g.stride.0 + 1;
        let wo = (width + 2 * g.padding.1 - g.dilation.1 * (kw - 1) - 1) / g.stride.1 + 1;
        let mut yr = vec![0.0; b * o * ho * wo];
        let mut yi = vec![0.0; b * o * ho * wo];
        for bi in 0..b {
            for oc in 0..o {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let (mut ar, mut ai) = (0.0, 0.0);
                        for ic in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ih = (oh * g.stride.0 + ki * g.dilation.0) as isize - g.padding.0 as isize;
                                    let iw = (ow * g.stride.1 + kj * g.dilation.1) as isize - g.padding.1 as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= width as isize {
                                        continue;
                                    }
                                    let xe = ((bi * c + ic) * h + ih as usize) * width + iw as usize;
                                    let we = ((oc * c + ic) * kh + ki) * kw + kj;
                                    ar += wr[we] * xr[xe] - wi[we] * xi[xe];
                                    ai += wi[we] * xr[xe] + wr[we] * xi[xe];
                                }
                            }
                        }
                        let ye = ((bi * o + oc) * ho + oh) * wo + ow;
                        yr[ye] = ar;
                        yi[ye] = ai;
                    }
                }
            }
        }
        (yr, yi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::XorShift64Star;

    fn rand_vec(rng: &mut XorShift64Star, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }

    #[test]
    fn matches_nested_loops_over_random_geometry() {
        let mut rng = XorShift64Star::new(3);
        for _ in 0..60 {
            let b = 1 + rng.below(2);
            let c = 1 + rng.below(3);
            let o = 1 + rng.below(3);
            let k = 1 + rng.below(3);
            let g = ConvGeom {
                kernel: (k, 1 + rng.below(3)),
                stride: (1 + rng.below(2), 1 + rng.below(2)),
                padding: (rng.below(3), rng.below(3)),
                dilation: (1 + rng.below(2), 1),
            };
            let h = 5 + rng.below(4);
            let w = 5 + rng.below(4);
            let x = Tensor::from_vec([b, c, h, w], rand_vec(&mut rng, b * c * h * w)).unwrap();
            let wt = Tensor::from_vec(
                [o, c, g.kernel.0, g.kernel.1],
                rand_vec(&mut rng, o * c * g.kernel.0 * g.kernel.1),
            )
            .unwrap();
            let y = conv2d_forward(&x, &wt, g).unwrap();
            let (yr, _) = reference::conv2d(x.data(), [b, c, h, w], wt.data(), [o, c, g.kernel.0, g.kernel.1], None, g);
            for (a, e) in y.data().iter().zip(&yr) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e} for {g:?}");
            }
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        // <conv(x), dy> == <x, conv_input_adjoint(dy)> == <w, conv_weight_adjoint(dy)>
        let mut rng = XorShift64Star::new(11);
        let g = ConvGeom {
            kernel: (3, 2),
            stride: (2, 1),
            padding: (1, 1),
            dilation: (1, 2),
        };
        let xd = [5, 3, 7, 6];
        let x = Tensor::from_vec(xd, rand_vec(&mut rng, xd.iter().product())).unwrap();
        let w = Tensor::from_vec([4, 3, 3, 2], rand_vec(&mut rng, 72)).unwrap();
        let y = conv2d_forward(&x, &w, g).unwrap();
        let dy = Tensor::from_vec(y.dims().to_vec(), rand_vec(&mut rng, y.numel())).unwrap();
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&y, &dy);
        let dx = conv2d_backward_input(&dy, &w, g, xd).unwrap();
        let dw = conv2d_backward_weight(&dy, &x, g, [4, 3, 3, 2]).unwrap();
        assert!((lhs - dot(&x, &dx)).abs() < 1e-10);
        assert!((lhs - dot(&w, &dw)).abs() < 1e-10);
    }

    #[test]
    fn transposed_conv_is_input_adjoint() {
        let mut rng = XorShift64Star::new(5);
        let g = ConvGeom::square(3, 2, 1);
        let x = Tensor::from_vec([2, 4, 3, 3], rand_vec(&mut rng, 72)).unwrap();
        let w = Tensor::from_vec([4, 2, 3, 3], rand_vec(&mut rng, 72)).unwrap();
        let y = conv_transpose2d_forward(&x, &w, g, (1, 1)).unwrap();
        assert_eq!(y.dims(), &[2, 2, 6, 6]);
        let dy = Tensor::from_vec(y.dims().to_vec(), rand_vec(&mut rng, y.numel())).unwrap();
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        let dx = conv_transpose2d_backward_input(&dy, &w, g).unwrap();
        let dw = conv_transpose2d_backward_weight(&dy, &x, g, [4, 2, 3, 3]).unwrap();
        assert!((dot(&y, &dy) - dot(&x, &dx)).abs() < 1e-10);
        assert!((dot(&y, &dy) - dot(&w, &dw)).abs() < 1e-10);
    }

    #[test]
    fn complex_conv_agrees_with_block_and_scalar_forms() {
        let mut rng = XorShift64Star::new(21);
        let g = ConvGeom::square(3, 2, 1);
        let (xd, wd) = ([2, 3, 6, 5], [4, 3, 3, 3]);
        let cplx = |rng: &mut XorShift64Star, d: [usize; 4]| {
            let n = d.iter().product();
            ComplexTensor::from_parts(Tensor::from_vec(d, rand_vec(rng, n)).unwrap(), Tensor::from_vec(d, rand_vec(rng, n)).unwrap()).unwrap()
        };
        let x = cplx(&mut rng, xd);
        let w = cplx(&mut rng, wd);
        let y = conv2d_complex(&x, &w, None, g).unwrap();
        let yb = conv2d_complex_block(&x, &w, g).unwrap();
        let (sr, si) = reference::conv2d_complex(x.re.data(), x.im.data(), xd, w.re.data(), w.im.data(), wd, g);
        for (a, (b, e)) in y.re.data().iter().chain(y.im.data()).zip(yb.re.data().iter().chain(yb.im.data()).zip(sr.iter().chain(&si))) {
            assert!((a - b).abs() < 1e-12 && (a - e).abs() < 1e-12);
        }
        let bias = ComplexTensor::from_parts(Tensor::from_vec([4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), Tensor::from_vec([4], vec![-1.0; 4]).unwrap()).unwrap();
        let yb = conv2d_complex(&x, &w, Some(&bias), g).unwrap();
        let per = y.numel() / 8;
        for (j, (a, b)) in yb.re.data().iter().zip(y.re.data()).enumerate() {
            assert_eq!(*a, *b + (1 + (j / per) % 4) as f64);
        }
    }

    #[test]
    fn geometry_errors() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 2]).unwrap();
        let w = Tensor::<f32>::zeros([1, 1, 3, 3]).unwrap();
        assert!(matches!(conv2d_forward(&x, &w, ConvGeom::square(3, 1, 0)), Err(Error::Geometry(_))));
        let w2 = Tensor::<f32>::zeros([1, 2, 1, 1]).unwrap();
        assert!(matches!(conv2d_forward(&x, &w2, ConvGeom::square(1, 1, 0)), Err(Error::Shape(_))));
    }
}
