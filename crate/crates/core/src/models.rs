//! Architecture builders and the three-variant construction.
//!
//! A [`ModelHandle`] is built from an [`ArchSpec`] and a [`Variant`]:
//!
//! * `Real` keeps the canonical channel counts with real layers.
//! * `WidenedReal(m)` multiplies every channel count by `sqrt(m)` (rounded,
//!   at least 1), so the trainable-parameter count grows by about `m`.
//! * `Complex` keeps the channel counts and switches every layer to the
//!   complex domain, exactly doubling the trainable coordinates.
//! * `WidenedFeatures(f)` multiplies channel counts by `f` literally.
//!
//! Input and output channel counts are fixed by the data and the task and
//! never widened. Complex models lift their real input with a zero
//! imaginary plane and project the final complex map to real scores
//! ([`Head`]).

use std::fmt;

use crate::autodiff::{Ctx, Domain, Feat, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{self, AttentionGate, BatchNorm2d, Conv2d, Conv2dSpec, ConvTranspose2d, Linear, ParamBuilder};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    ResNet18,
    ResNet34,
    ResNet50,
    UNet,
    AttentionUNet,
    ReconResNet,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::ResNet18,
        Family::ResNet34,
        Family::ResNet50,
        Family::UNet,
        Family::AttentionUNet,
        Family::ReconResNet,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            Family::ResNet18 => "ResNet18",
            Family::ResNet34 => "ResNet34",
            Family::ResNet50 => "ResNet50",
            Family::UNet => "UNet",
            Family::AttentionUNet => "Attention UNet",
            Family::ReconResNet => "ReconResNet",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Family::ResNet18 => "resnet18",
            Family::ResNet34 => "resnet34",
            Family::ResNet50 => "resnet50",
            Family::UNet => "unet",
            Family::AttentionUNet => "attention-unet",
            Family::ReconResNet => "reconresnet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let k = s.to_ascii_lowercase().replace(['_', ' '], "-");
        Family::ALL
            .into_iter()
            .find(|f| f.key() == k || (k == "attunet" && *f == Family::AttentionUNet))
            .ok_or_else(|| Error::Spec(format!("unknown architecture `{s}`")))
    }

    pub fn canonical_depth(self) -> Vec<usize> {
        match self {
            Family::ResNet18 => vec![2, 2, 2, 2],
            Family::ResNet34 | Family::ResNet50 => vec![3, 4, 6, 3],
            Family::UNet | Family::AttentionUNet => vec![4],
            Family::ReconResNet => vec![14],
        }
    }

    pub fn canonical_width(self) -> usize {
        64
    }

    pub fn is_resnet(self) -> bool {
        matches!(self, Family::ResNet18 | Family::ResNet34 | Family::ResNet50)
    }

    /// Smallest supported spatial input extent.
    pub fn min_input(self) -> usize {
        if self.is_resnet() {
            32
        } else {
            16
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Classification(usize),
    Segmentation(usize),
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::Classification(k) | Task::Segmentation(k) => k,
        }
    }

    pub fn is_segmentation(self) -> bool {
        matches!(self, Task::Segmentation(_))
    }
}

/// How a complex output map becomes real scores. Real models ignore it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    Magnitude,
    RealPart,
}

impl Head {
    /// Magnitude for classification. Segmentation scores go through a
    /// sigmoid thresholded at 0.5, which a non-negative magnitude can never
    /// fall below, so segmentation uses the real part.
    pub fn default_for(task: Task) -> Self {
        if task.is_segmentation() {
            Head::RealPart
        } else {
            Head::Magnitude
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub family: Family,
    pub task: Task,
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: Vec<usize>,
    /// Multiplier on every hidden channel count; set by [`widen`].
    pub width_scale: f64,
    /// `(canonical count, channels)` pairs that bypass `width_scale`.
    pub channel_overrides: Vec<(usize, usize)>,
    pub head: Head,
}

impl ArchSpec {
    pub fn new(family: Family, task: Task) -> Self {
        ArchSpec {
            family,
            task,
            in_channels: 1,
            base_width: family.canonical_width(),
            depth: family.canonical_depth(),
            width_scale: 1.0,
            channel_overrides: Vec::new(),
            head: Head::default_for(task),
        }
    }

    /// The configuration used for parameter accounting: one input channel,
    /// three classes for classification and one foreground class for
    /// segmentation.
    pub fn canonical(family: Family) -> Self {
        let task = if family.is_resnet() {
            Task::Classification(3)
        } else {
            Task::Segmentation(1)
        };
        Self::new(family, task)
    }

    pub fn with_base_width(mut self, w: usize) -> Self {
        self.base_width = w;
        self
    }

    pub fn with_depth(mut self, depth: Vec<usize>) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_in_channels(mut self, c: usize) -> Self {
        self.in_channels = c;
        self
    }

    /// Hidden channel count for a canonical count `c`.
    pub fn channels(&self, c: usize) -> usize {
        if let Some(&(_, n)) = self.channel_overrides.iter().find(|&&(k, _)| k == c) {
            return n;
        }
        ((c as f64 * self.width_scale).round() as usize).max(1)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.in_channels == 0 || self.base_width == 0 || self.task.num_classes() == 0 {
            return bad("input channels, base width and class count must be positive".into());
        }
        if !(self.width_scale.is_finite() && self.width_scale > 0.0) {
            return bad(format!("width scale {} must be positive", self.width_scale));
        }
        match (self.family.is_resnet(), self.task) {
            (true, Task::Segmentation(_)) => {
                return bad(format!("{} supports classification only", self.family.display_name()))
            }
            (false, Task::Classification(_)) => {
                return bad(format!("{} supports segmentation only", self.family.display_name()))
            }
            _ => {}
        }
        let expect = if self.family.is_resnet() { 4 } else { 1 };
        if self.depth.len() != expect || self.depth.contains(&0) {
            return bad(format!(
                "{} expects {expect} positive depth entries, got {:?}",
                self.family.display_name(),
                self.depth
            ));
        }
        if matches!(self.family, Family::UNet | Family::AttentionUNet) && self.depth[0] > 6 {
            return bad("at most 6 UNet levels are supported".into());
        }
        Ok(())
    }
}

/// Returns `spec` with channel counts scaled by `sqrt(param_multiplier)`.
pub fn widen(spec: &ArchSpec, param_multiplier: f64) -> Result<ArchSpec> {
    if !(param_multiplier >= 1.0) || !param_multiplier.is_finite() {
        return Err(Error::Spec(format!("parameter multiplier {param_multiplier} must be at least 1")));
    }
    let mut s = spec.clone();
    s.width_scale *= param_multiplier.sqrt();
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    Real,
    WidenedReal(f64),
    Complex,
    WidenedFeatures(f64),
}

impl Variant {
    /// The three variants compared in a sweep.
    pub const TRIPLET: [Variant; 3] = [Variant::Real, Variant::WidenedReal(2.0), Variant::Complex];

    pub fn domain(self) -> Domain {
        match self {
            Variant::Complex => Domain::Complex,
            _ => Domain::Real,
        }
    }

    pub fn label(self) -> String {
        match self {
            Variant::Real => "CNN".into(),
            Variant::WidenedReal(m) if m == 2.0 => "CNNx2".into(),
            Variant::WidenedReal(m) => format!("CNNx{m}"),
            Variant::Complex => "CV-CNN".into(),
            Variant::WidenedFeatures(f) => format!("CNNx{f}-features"),
        }
    }

    pub fn key(self) -> String {
        match self {
            Variant::Real => "real".into(),
            Variant::WidenedReal(m) => format!("widened:{m}"),
            Variant::Complex => "complex".into(),
            Variant::WidenedFeatures(f) => format!("features:{f}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::Spec(format!("bad variant multiplier `{v}`")))
        };
        Ok(match s.as_str() {
            "real" | "cnn" => Variant::Real,
            "complex" | "cv-cnn" | "cvcnn" => Variant::Complex,
            "widened" | "cnnx2" | "widened-real" => Variant::WidenedReal(2.0),
            _ => {
                if let Some(v) = s.strip_prefix("widened:") {
                    Variant::WidenedReal(num(v)?)
                } else if let Some(v) = s.strip_prefix("features:") {
                    Variant::WidenedFeatures(num(v)?)
                } else {
                    return Err(Error::Spec(format!("unknown variant `{s}`")));
                }
            }
        })
    }

    /// The spec actually built for this variant.
    pub fn apply(self, spec: &ArchSpec) -> Result<ArchSpec> {
        match self {
            Variant::WidenedReal(m) => fit_widening(spec, m),
            Variant::WidenedFeatures(f) => {
                if !(f >= 1.0) || !f.is_finite() {
                    return Err(Error::Spec(format!("feature multiplier {f} must be at least 1")));
                }
                let mut s = spec.clone();
                s.width_scale *= f;
                Ok(s)
            }
            _ => Ok(spec.clone()),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Relative tolerance on the parameter ratio of a widened model.
pub const WIDEN_TOLERANCE: f64 = 0.03;

/// [`widen`], falling back to per-count channel adjustments when uniform
/// rounding (at very small widths) pushes the parameter ratio outside
/// [`WIDEN_TOLERANCE`]. The adjustment is a greedy coordinate search that
/// nudges individual channel counts by up to two and keeps the closest ratio.
fn fit_widening(spec: &ArchSpec, m: f64) -> Result<ArchSpec> {
    let mut best = widen(spec, m)?;
    let base = plan(spec, Variant::Real)?.trainable as f64;
    let miss = |s: &ArchSpec| -> Result<f64> { Ok((plan(s, Variant::Real)?.trainable as f64 / base - m).abs()) };
    let mut best_miss = miss(&best)?;
    let mut keys: Vec<usize> = (0..8)
        .flat_map(|k| {
            let c = spec.base_width << k;
            [c / 2, c, c * 4]
        })
        .filter(|&c| c > 0)
        .collect();
    keys.sort_unstable();
    keys.dedup();
    let mut improved = true;
    while improved && best_miss > WIDEN_TOLERANCE * m {
        improved = false;
        for &key in &keys {
            let current = best.channels(key);
            for delta in [-2isize, -1, 1, 2] {
                let Some(c) = current.checked_add_signed(delta).filter(|&c| c >= 1) else {
                    continue;
                };
                let mut s = best.clone();
                s.channel_overrides.retain(|&(k, _)| k != key);
                s.channel_overrides.push((key, c));
                s.channel_overrides.sort_unstable();
                let e = miss(&s)?;
                if e < best_miss {
                    best_miss = e;
                    best = s;
                    improved = true;
                }
            }
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metadata {
    pub family: Family,
    pub variant: Variant,
    /// Output channels of each stage (ResNet stages, UNet levels, or the
    /// ReconResNet encoder widths).
    pub stage_features: Vec<usize>,
    /// Output channels summed over every convolution and linear layer.
    pub features: usize,
    pub trainable: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub features: usize,
    pub trainable: usize,
}

struct Builder<'a, T> {
    pb: &'a mut ParamBuilder<T>,
    domain: Domain,
    features: usize,
}

impl<T: Scalar> Builder<'_, T> {
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Result<Conv2d> {
        self.features += cout;
        Conv2d::new(
            self.pb,
            name,
            Conv2dSpec::new(cin, cout, k).stride(stride).padding(pad).bias(bias).domain(self.domain),
        )
    }

    fn convt(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, op: usize) -> Result<ConvTranspose2d> {
        self.features += cout;
        ConvTranspose2d::new(
            self.pb,
            name,
            Conv2dSpec::new(cin, cout, k).stride(stride).padding(pad).domain(self.domain),
            op,
        )
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<BatchNorm2d> {
        BatchNorm2d::new(self.pb, name, c, self.domain)
    }

    fn scope<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.pb.push_scope(name);
        let r = f(self);
        self.pb.pop_scope();
        r
    }
}

/// Convolution followed by batch normalization.
#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(ConvBn {
                conv: b.conv("conv", cin, cout, k, stride, pad, false)?,
                bn: b.bn("bn", cout)?,
            })
        })
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Feat) -> Result<Feat> {
        let y = self.conv.forward(ctx, x)?;
        self.bn.forward(ctx, y)
    }
}

#[derive(Clone, Debug)]
enum Block {
    Basic {
        a: ConvBn,
        b: ConvBn,
        down: Option<ConvBn>,
    },
    Bottleneck {
        a: ConvBn,
        b: ConvBn,
        c: ConvBn,
        down: Option<ConvBn>,
    },
}

impl Block {
    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Feat) -> Result<Feat> {
        let (y, down) = match self {
            Block::Basic { a, b, down } => {
                let y = a.forward(ctx, x)?;
                let y = nn::relu(ctx, y);
                (b.forward(ctx, y)?, down)
            }
            Block::Bottleneck { a, b, c, down } => {
                let y = a.forward(ctx, x)?;
                let y = nn::relu(ctx, y);
                let y = b.forward(ctx, y)?;
                let y = nn::relu(ctx, y);
                (c.forward(ctx, y)?, down)
            }
        };
        let shortcut = match down {
            Some(d) => d.forward(ctx, x)?,
            None => x,
        };
        let s = nn::add(ctx, y, shortcut)?;
        Ok(nn::relu(ctx, s))
    }
}

#[derive(Clone, Debug)]
struct ResNet {
    stem: ConvBn,
    blocks: Vec<Block>,
    fc: Linear,
}

impl ResNet {
    fn build<T: Scalar>(spec: &ArchSpec, b: &mut Builder<'_, T>) -> Result<(Self, Vec<usize>)> {
        let bottleneck = spec.family == Family::ResNet50;
        let expansion = if bottleneck { 4 } else { 1 };
        let stem_c = spec.channels(spec.base_width);
        let stem = ConvBn::new(b, "stem", spec.in_channels, stem_c, 7, 2, 3)?;
        let mut cin = stem_c;
        let mut blocks = Vec::new();
        let mut stages = Vec::new();
        for (si, &n) in spec.depth.iter().enumerate() {
            let width = spec.channels(spec.base_width << si);
            let cout = spec.channels((spec.base_width << si) * expansion);
            for bi in 0..n {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let block = b.scope(format!("layer{}.{bi}", si + 1), |b| {
                    let down = if stride != 1 || cin != cout {
                        Some(ConvBn::new(b, "down", cin, cout, 1, stride, 0)?)
                    } else {
                        None
                    };
                    Ok(if bottleneck {
                        Block::Bottleneck {
                            a: ConvBn::new(b, "a", cin, width, 1, 1, 0)?,
                            b: ConvBn::new(b, "b", width, width, 3, stride, 1)?,
                            c: ConvBn::new(b, "c", width, cout, 1, 1, 0)?,
                            down,
                        }
                    } else {
                        Block::Basic {
                            a: ConvBn::new(b, "a", cin, cout, 3, stride, 1)?,
                            b: ConvBn::new(b, "b", cout, cout, 3, 1, 1)?,
                            down,
                        }
                    })
                })?;
                blocks.push(block);
                cin = cout;
            }
            stages.push(cout);
        }
        b.features += spec.task.num_classes();
        let fc = Linear::new(b.pb, "fc", cin, spec.task.num_classes(), b.domain)?;
        Ok((ResNet { stem, blocks, fc }, stages))
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Feat) -> Result<Feat> {
        let y = self.stem.forward(ctx, x)?;
        let y = nn::relu(ctx, y);
        let mut y = nn::maxpool2d(ctx, y, 3, 2, 1)?;
        for block in &self.blocks {
            y = block.forward(ctx, y)?;
        }
        let pooled = nn::global_avg_pool(ctx, y)?;
        self.fc.forward(ctx, pooled)
    }
}

#[derive(Clone, Debug)]
struct DoubleConv {
    a: ConvBn,
    b: ConvBn,
}

impl DoubleConv {
    fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(DoubleConv {
                a: ConvBn::new(b, "a", cin, cout, 3, 1, 1)?,
                b: ConvBn::new(b, "b", cout, cout, 3, 1, 1)?,
            })
        })
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Feat) -> Result<Feat> {
        let y = self.a.forward(ctx, x)?;
        let y = nn::relu(ctx, y);
        let y = self.b.forward(ctx, y)?;
        Ok(nn::relu(ctx, y))
    }
}

#[derive(Clone, Debug)]
struct UpLevel {
    up: ConvTranspose2d,
    gate: Option<AttentionGate>,
    conv: DoubleConv,
}

#[derive(Clone, Debug)]
struct UNet {
    down: Vec<DoubleConv>,
    bottom: DoubleConv,
    up: Vec<UpLevel>,
    out: Conv2d,
}

impl UNet {
    fn build<T: Scalar>(spec: &ArchSpec, b: &mut Builder<'_, T>) -> Result<(Self, Vec<usize>)> {
        let levels = spec.depth[0];
        let width = |l: usize| spec.channels(spec.base_width << l);
        let mut down = Vec::new();
        let mut cin = spec.in_channels;
        for l in 0..levels {
            down.push(DoubleConv::new(b, &format!("down{l}"), cin, width(l))?);
            cin = width(l);
        }
        let bottom = DoubleConv::new(b, "bottom", cin, width(levels))?;
        let mut up = Vec::new();
        for l in (0..levels).rev() {
            let level = b.scope(format!("up{l}"), |b| {
                let (c_low, c) = (width(l + 1), width(l));
                let up = b.convt("up", c_low, c, 2, 2, 0, 0)?;
                let gate = if spec.family == Family::AttentionUNet {
                    b.features += spec.channels((spec.base_width << l) / 2) * 2 + 1;
                    Some(AttentionGate::new(b.pb, "gate", c, c, spec.channels((spec.base_width << l) / 2), b.domain)?)
                } else {
                    None
                };
                Ok(UpLevel {
                    up,
                    gate,
                    conv: DoubleConv::new(b, "conv", 2 * c, c)?,
                })
            })?;
            up.push(level);
        }
        let out = b.conv("out", width(0), spec.task.num_classes(), 1, 1, 0, true)?;
        let stages = (0..=levels).map(width).collect();
        Ok((UNet { down, bottom, up, out }, stages))
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Feat, ablate: Option<usize>) -> Result<Feat> {
        let mut skips = Vec::new();
        let mut y = x;
        for d in &self.down {
            let s = d.forward(ctx, y)?;
            skips.push(s);
            y = nn::maxpool2d(ctx, s, 2, 2, 0)?;
        }
        y = self.bottom.forward(ctx, y)?;
        for (i, (level, skip)) in self.up.iter().zip(skips.into_iter().rev()).enumerate() {
            let [_, _, h, w] = nn::spatial(ctx, skip)?;
            let l = self.down.len() - 1 - i;
            let u = level.up.forward(ctx, y)?;
            let u = nn::resize(ctx, u, h, w)?;
            let mut s = match &level.gate {
                Some(g) => g.forward(ctx, u, skip)?,
                None => skip,
            };
            if ablate == Some(l) {
                s = s.map_planes(|v| Ok(ctx.tape.scale(v, T::zero())))?;
            }
            let cat = nn::concat(ctx, &[s, u])?;
            y = level.conv.forward(ctx, cat)?;
        }
        self.out.forward(ctx, y)
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    a: ConvBn,
    b: ConvBn,
}

#[derive(Clone, Debug)]
struct ReconResNet {
    stem: ConvBn,
    down: Vec<ConvBn>,
    blocks: Vec<ResidualBlock>,
    up: Vec<(ConvTranspose2d, BatchNorm2d)>,
    out: Conv2d,
}

impl ReconResNet {
    fn build<T: Scalar>(spec: &ArchSpec, b: &mut Builder<'_, T>) -> Result<(Self, Vec<usize>)> {
        let c = |m: usize| spec.channels(spec.base_width * m);
        let stem = ConvBn::new(b, "stem", spec.in_channels, c(1), 7, 1, 3)?;
        let down = vec![
            ConvBn::new(b, "down0", c(1), c(2), 3, 2, 1)?,
            ConvBn::new(b, "down1", c(2), c(4), 3, 2, 1)?,
        ];
        let mut blocks = Vec::new();
        for i in 0..spec.depth[0] {
            blocks.push(b.scope(format!("res{i}"), |b| {
                Ok(ResidualBlock {
                    a: ConvBn::new(b, "a", c(4), c(4), 3, 1, 1)?,
                    b: ConvBn::new(b, "b", c(4), c(4), 3, 1, 1)?,
                })
            })?);
        }
        let mut up = Vec::new();
        for (i, (ci, co)) in [(c(4), c(2)), (c(2), c(1))].into_iter().enumerate() {
            up.push(b.scope(format!("up{i}"), |b| Ok((b.convt("conv", ci, co, 3, 2, 1, 1)?, b.bn("bn", co)?)))?);
        }
        let out = b.conv("out", c(1), spec.task.num_classes(), 7, 1, 3, true)?;
        Ok((ReconResNet { stem, down, blocks, up, out }, vec![c(1), c(2), c(4)]))
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Feat) -> Result<Feat> {
        let [_, _, h, w] = nn::spatial(ctx, x)?;
        let y = self.stem.forward(ctx, x)?;
        let mut y = nn::relu(ctx, y);
        for d in &self.down {
            let z = d.forward(ctx, y)?;
            y = nn::relu(ctx, z);
        }
        for r in &self.blocks {
            let z = r.a.forward(ctx, y)?;
            let z = nn::relu(ctx, z);
            let z = r.b.forward(ctx, z)?;
            y = nn::add(ctx, y, z)?;
        }
        for (conv, bn) in &self.up {
            let z = conv.forward(ctx, y)?;
            let z = bn.forward(ctx, z)?;
            y = nn::relu(ctx, z);
        }
        let y = nn::resize(ctx, y, h, w)?;
        self.out.forward(ctx, y)
    }
}

#[derive(Clone, Debug)]
enum Net {
    ResNet(ResNet),
    UNet(UNet),
    Recon(ReconResNet),
}

/// A built model: its layer graph, parameters and accounting metadata.
#[derive(Clone, Debug)]
pub struct ModelHandle<T = f32> {
    pub spec: ArchSpec,
    pub variant: Variant,
    pub params: ParamStore<T>,
    pub meta: Metadata,
    net: Net,
}

fn construct<T: Scalar>(spec: &ArchSpec, variant: Variant, pb: &mut ParamBuilder<T>) -> Result<(Net, Metadata)> {
    let built = variant.apply(spec)?;
    built.validate()?;
    let mut b = Builder {
        pb,
        domain: variant.domain(),
        features: 0,
    };
    let (net, stage_features) = match built.family {
        Family::ResNet18 | Family::ResNet34 | Family::ResNet50 => {
            let (n, s) = ResNet::build(&built, &mut b)?;
            (Net::ResNet(n), s)
        }
        Family::UNet | Family::AttentionUNet => {
            let (n, s) = UNet::build(&built, &mut b)?;
            (Net::UNet(n), s)
        }
        Family::ReconResNet => {
            let (n, s) = ReconResNet::build(&built, &mut b)?;
            (Net::Recon(n), s)
        }
    };
    let features = b.features;
    let trainable = pb.counted();
    Ok((
        net,
        Metadata {
            family: spec.family,
            variant,
            stage_features,
            features,
            trainable,
        },
    ))
}

fn check_widening(spec: &ArchSpec, variant: Variant, trainable: usize) -> Result<()> {
    if let Variant::WidenedReal(m) = variant {
        let base = plan(spec, Variant::Real)?.trainable as f64;
        let target = m * base;
        let achieved = trainable as f64 / base;
        if (trainable as f64 - target).abs() > WIDEN_TOLERANCE * target {
            return Err(Error::Widening { achieved, target: m });
        }
    }
    Ok(())
}

/// Counts features and trainable parameters without allocating weights.
pub fn plan(spec: &ArchSpec, variant: Variant) -> Result<Metadata> {
    let mut pb = ParamBuilder::<f32>::counting();
    let (_, meta) = construct(spec, variant, &mut pb)?;
    Ok(meta)
}

/// [`plan`] plus the widening tolerance check that [`build`] applies.
pub fn plan_checked(spec: &ArchSpec, variant: Variant) -> Result<Metadata> {
    let meta = plan(spec, variant)?;
    check_widening(spec, variant, meta.trainable)?;
    Ok(meta)
}

/// Builds a deterministic model for `(spec, variant, seed)`.
pub fn build<T: Scalar>(spec: &ArchSpec, variant: Variant, seed: u64) -> Result<ModelHandle<T>> {
    let mut pb = ParamBuilder::new(seed);
    let (net, meta) = construct(spec, variant, &mut pb)?;
    check_widening(spec, variant, meta.trainable)?;
    let params = pb.finish();
    debug_assert_eq!(params.trainable_count(), meta.trainable);
    Ok(ModelHandle {
        spec: spec.clone(),
        variant,
        params,
        meta,
        net,
    })
}

pub fn count_parameters<T: Scalar>(m: &ModelHandle<T>) -> ParamCount {
    ParamCount {
        features: m.meta.features,
        trainable: m.params.trainable_count(),
    }
}

impl<T: Scalar> ModelHandle<T> {
    /// Records a forward pass and returns real scores: `[B, K]` for
    /// classification, `[B, K, H, W]` for segmentation.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> Result<Var> {
        self.forward_inner(ctx, x, None)
    }

    /// As [`forward`](Self::forward) with the skip connection of UNet level
    /// `level` (0 = full resolution) replaced by zeros.
    pub fn forward_ablating_skip(&self, ctx: &mut Ctx<'_, T>, x: &Tensor<T>, level: usize) -> Result<Var> {
        if !matches!(self.net, Net::UNet(_)) {
            return Err(Error::Spec("only UNet-family models have skip connections".into()));
        }
        self.forward_inner(ctx, x, Some(level))
    }

    fn forward_inner(&self, ctx: &mut Ctx<'_, T>, x: &Tensor<T>, ablate: Option<usize>) -> Result<Var> {
        let [_, c, h, w] = x.shape().nchw()?;
        if c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let min = self.spec.family.min_input();
        if h < min || w < min {
            return Err(Error::shape(format!(
                "{} needs inputs of at least {min}x{min}, got {h}x{w}",
                self.spec.family.display_name()
            )));
        }
        let re = ctx.input(x);
        let input = match self.variant.domain() {
            Domain::Real => Feat::Real(re),
            Domain::Complex => {
                let im = ctx.tape.constant(Tensor::zeros(x.dims().to_vec())?);
                Feat::Complex(re, im)
            }
        };
        let y = match &self.net {
            Net::ResNet(n) => n.forward(ctx, input)?,
            Net::UNet(n) => n.forward(ctx, input, ablate)?,
            Net::Recon(n) => n.forward(ctx, input)?,
        };
        match y {
            Feat::Real(v) => Ok(v),
            Feat::Complex(r, i) => match self.spec.head {
                Head::Magnitude => ctx.tape.magnitude(r, i),
                Head::RealPart => Ok(r),
            },
        }
    }
}
