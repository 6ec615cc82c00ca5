//! Randomized finite-difference checks for every exported layer and loss.
//!
//! Each case draws a small random geometry from its seed, makes the layer
//! input a trainable parameter (so input gradients are checked alongside
//! weight gradients) and reduces the output with a fixed random probe,
//! `L = sum_planes sum(probe * y)`.

use crate::autodiff::{finite_difference_check, Ctx, Domain, FdReport, Feat, ParamId, ParamStore, ParamValue, Var};
use crate::error::Result;
use crate::nn::{self, AttentionGate, BatchNorm2d, Conv2d, Conv2dSpec, ConvTranspose2d, Linear, ParamBuilder};
use crate::rng::XorShift64Star;
use crate::tensor::{ComplexTensor, Tensor};

pub const FD_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    Conv2d(Domain),
    ConvTranspose2d(Domain),
    Linear(Domain),
    BatchNorm(Domain),
    Relu(Domain),
    MaxPool(Domain),
    AvgPool(Domain),
    Upsample(Domain),
    GlobalAvgPool(Domain),
    AttentionGate(Domain),
    CrossEntropy,
    Dice,
    /// Complex convolution whose real plane feeds the Dice loss.
    ComplexConvDice,
}

pub fn all_cases() -> Vec<Case> {
    let mut v = Vec::new();
    for d in [Domain::Real, Domain::Complex] {
        v.extend([
            Case::Conv2d(d),
            Case::ConvTranspose2d(d),
            Case::Linear(d),
            Case::BatchNorm(d),
            Case::Relu(d),
            Case::MaxPool(d),
            Case::AvgPool(d),
            Case::Upsample(d),
            Case::GlobalAvgPool(d),
            Case::AttentionGate(d),
        ]);
    }
    v.extend([Case::CrossEntropy, Case::Dice, Case::ComplexConvDice]);
    v
}

/// Entries have magnitude in `[0.05, 1)` with random sign, which keeps ReLU
/// kinks outside the difference stencil.
fn random(rng: &mut XorShift64Star, dims: &[usize]) -> Tensor<f64> {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform(0.05, 1.0);
            if rng.below(2) == 0 { m } else { -m }
        })
        .collect();
    Tensor::from_vec(dims.to_vec(), data).expect("valid dims")
}

fn random_value(rng: &mut XorShift64Star, dims: &[usize], domain: Domain) -> ParamValue<f64> {
    match domain {
        Domain::Real => ParamValue::Real(random(rng, dims)),
        Domain::Complex => {
            let re = random(rng, dims);
            ParamValue::Complex(ComplexTensor::from_parts(re, random(rng, dims)).expect("same dims"))
        }
    }
}

/// Random non-zero initial values for every trainable parameter, so bias
/// and shift gradients are exercised away from special points.
fn perturb(store: &mut ParamStore<f64>, rng: &mut XorShift64Star) {
    for p in store.iter_mut().filter(|p| p.trainable) {
        let dims = p.value.shape().dims().to_vec();
        p.value = random_value(rng, &dims, p.value.domain());
    }
}

struct Probe {
    planes: Vec<Tensor<f64>>,
}

impl Probe {
    fn new(rng: &mut XorShift64Star, dims: &[usize], domain: Domain) -> Self {
        Probe {
            planes: (0..domain.coords()).map(|_| random(rng, dims)).collect(),
        }
    }

    fn reduce(&self, ctx: &mut Ctx<'_, f64>, y: Feat) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (v, p) in y.planes().into_iter().zip(&self.planes) {
            let c = ctx.tape.constant(p.clone());
            let m = ctx.tape.mul(v, c)?;
            let s = ctx.tape.sum(m);
            total = Some(match total {
                Some(t) => ctx.tape.add(t, s)?,
                None => s,
            });
        }
        Ok(total.expect("at least one plane"))
    }
}

fn output_dims(store: &ParamStore<f64>, f: &dyn Fn(&mut Ctx<'_, f64>) -> Result<Feat>) -> Result<Vec<usize>> {
    let mut ctx = Ctx::new(store, crate::autodiff::Mode::Train);
    let y = f(&mut ctx)?;
    Ok(ctx.tape.value(y.re()).dims().to_vec())
}

fn run_layer(
    mut store: ParamStore<f64>,
    rng: &mut XorShift64Star,
    domain: Domain,
    f: impl Fn(&mut Ctx<'_, f64>) -> Result<Feat>,
) -> Result<FdReport> {
    perturb(&mut store, rng);
    let dims = output_dims(&store, &f)?;
    let probe = Probe::new(rng, &dims, domain);
    finite_difference_check(&mut store, FD_EPS, |ctx| {
        let y = f(ctx)?;
        probe.reduce(ctx, y)
    })
}

fn add_input(store: &mut ParamStore<f64>, rng: &mut XorShift64Star, name: &str, dims: &[usize], domain: Domain) -> ParamId {
    store.add(name, random_value(rng, dims, domain), true)
}

/// Runs one randomized instance of `case`.
pub fn check(case: Case, seed: u64) -> Result<FdReport> {
    let mut rng = XorShift64Star::stream(seed, 0x6772_6164);
    let mut pb = ParamBuilder::<f64>::new(rng.next_u64());
    let b = 2 + rng.below(2);
    match case {
        Case::Conv2d(d) => {
            let (c, o, k, s, pad) = (1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(2), rng.below(2));
            let (h, w) = (k + 1 + rng.below(4), k + 1 + rng.below(4));
            let conv = Conv2d::new(&mut pb, "conv", Conv2dSpec::new(c, o, k).stride(s).padding(pad).bias(rng.below(2) == 0).domain(d))?;
            let mut store = pb.finish();
            let x = add_input(&mut store, &mut rng, "x", &[b, c, h, w], d);
            run_layer(store, &mut rng, d, move |ctx| {
                let xv = ctx.param(x);
                conv.forward(ctx, xv)
            })
        }
        Case::ConvTranspose2d(d) => {
            let (c, o, k, s) = (1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(2));
            let op = if s > 1 { rng.below(s) } else { 0 };
            let (h, w) = (2 + rng.below(3), 2 + rng.below(3));
            let conv = ConvTranspose2d::new(&mut pb, "up", Conv2dSpec::new(c, o, k).stride(s).domain(d), op)?;
            let mut store = pb.finish();
            let x = add_input(&mut store, &mut rng, "x", &[b, c, h, w], d);
            run_layer(store, &mut rng, d, move |ctx| {
                let xv = ctx.param(x);
                conv.forward(ctx, xv)
            })
        }
        Case::Linear(d) => {
            let (i, o) = (1 + rng.below(6), 1 + rng.below(5));
            let lin = Linear::new(&mut pb, "fc", i, o, d)?;
            let mut store = pb.finish();
            let x = add_input(&mut store, &mut rng, "x", &[b, i], d);
            run_layer(store, &mut rng, d, move |ctx| {
                let xv = ctx.param(x);
                lin.forward(ctx, xv)
            })
        }
        Case::BatchNorm(d) => {
            let c = 1 + rng.below(3);
            let (h, w) = (1 + rng.below(3), 2 + rng.below(3));
            let bn = BatchNorm2d::new(&mut pb, "bn", c, d)?;
            let mut store = pb.finish();
            let x = add_input(&mut store, &mut rng, "x", &[b, c, h, w], d);
            run_layer(store, &mut rng, d, move |ctx| {
                let xv = ctx.param(x);
                bn.forward(ctx, xv)
            })
        }
        Case::Relu(d) | Case::AvgPool(d) | Case::Upsample(d) | Case::GlobalAvgPool(d) | Case::MaxPool(d) => {
            let c = 1 + rng.below(3);
            let (k, s, pad) = (2 + rng.below(2), 1 + rng.below(2), rng.below(2));
            let (h, w) = (k + rng.below(4), k + rng.below(4));
            let factor = 2 + rng.below(2);
            let mut store = pb.finish();
            let x = add_input(&mut store, &mut rng, "x", &[b, c, h, w], d);
            run_layer(store, &mut rng, d, move |ctx| {
                let xv = ctx.param(x);
                match case {
                    Case::Relu(_) => Ok(nn::crelu(ctx, xv)),
                    Case::AvgPool(_) => nn::avgpool2d(ctx, xv, 2),
                    Case::Upsample(_) => nn::upsample_nearest(ctx, xv, factor),
                    Case::GlobalAvgPool(_) => nn::global_avg_pool(ctx, xv),
                    _ => nn::maxpool2d(ctx, xv, k, s, pad.min(k - 1)),
                }
            })
        }
        Case::AttentionGate(d) => {
            let (gc, sc, ic) = (1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3));
            let (h, w) = (2 + rng.below(3), 2 + rng.below(3));
            let gate = AttentionGate::new(&mut pb, "att", gc, sc, ic, d)?;
            let mut store = pb.finish();
            let g = add_input(&mut store, &mut rng, "g", &[b, gc, h, w], d);
            let s = add_input(&mut store, &mut rng, "s", &[b, sc, h, w], d);
            run_layer(store, &mut rng, d, move |ctx| {
                let (gv, sv) = (ctx.param(g), ctx.param(s));
                gate.forward(ctx, gv, sv)
            })
        }
        Case::CrossEntropy => {
            let k = 2 + rng.below(4);
            let labels: Vec<usize> = (0..b).map(|_| rng.below(k)).collect();
            let mut store = pb.finish();
            let x = store.add("scores", ParamValue::Real(random(&mut rng, &[b, k]).scale(3.0)), true);
            finite_difference_check(&mut store, FD_EPS, |ctx| {
                let s = ctx.param(x).real()?;
                ctx.tape.cross_entropy(s, &labels)
            })
        }
        Case::Dice => {
            let (h, w) = (2 + rng.below(4), 2 + rng.below(4));
            let mask = binary_mask(&mut rng, &[b, 1, h, w]);
            let mut store = pb.finish();
            let x = store.add("scores", ParamValue::Real(random(&mut rng, &[b, 1, h, w]).scale(3.0)), true);
            finite_difference_check(&mut store, FD_EPS, |ctx| {
                let s = ctx.param(x).real()?;
                ctx.tape.dice_loss(s, &mask)
            })
        }
        Case::ComplexConvDice => {
            let (c, k) = (1 + rng.below(3), 1 + rng.below(3));
            let (h, w) = (k + 1 + rng.below(4), k + 1 + rng.below(4));
            let conv = Conv2d::new(&mut pb, "conv", Conv2dSpec::new(c, 1, k).padding(k / 2).domain(Domain::Complex))?;
            let mut store = pb.finish();
            perturb(&mut store, &mut rng);
            let x = add_input(&mut store, &mut rng, "x", &[b, c, h, w], Domain::Complex);
            let probe_dims = {
                let mut ctx = Ctx::new(&store, crate::autodiff::Mode::Train);
                let xv = ctx.param(x);
                let y = conv.forward(&mut ctx, xv)?;
                ctx.tape.value(y.re()).dims().to_vec()
            };
            let mask = binary_mask(&mut rng, &probe_dims);
            finite_difference_check(&mut store, FD_EPS, |ctx| {
                let xv = ctx.param(x);
                let y = conv.forward(ctx, xv)?;
                ctx.tape.dice_loss(y.re(), &mask)
            })
        }
    }
}

fn binary_mask(rng: &mut XorShift64Star, dims: &[usize]) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::from_vec(dims.to_vec(), (0..n).map(|_| (rng.below(2)) as f64).collect()).expect("valid dims")
}
