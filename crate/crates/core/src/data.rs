//! Synthetic phantoms, intensity normalization and augmentation.
//!
//! Images are single-channel `[1, H, W]` tensors in `[0, 1]`. Every sample
//! draws from its own RNG stream `XorShift64Star::stream(seed, index)`, so
//! a dataset is a pure function of its [`DatasetSpec`].

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::rng::XorShift64Star;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Classification,
    Segmentation,
}

/// Classification: class 0 has no blob, class 1 a small dim blob, class 2
/// a large bright blob. Segmentation: every image carries one blob (small
/// and large alternate) and the target is its half-maximum support.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub task: TaskKind,
    /// Per class for classification; the total count for segmentation.
    pub n_per_class: usize,
    pub image_size: (usize, usize),
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

pub const NUM_CLASSES: usize = 3;
pub const MIN_IMAGE_SIZE: usize = 16;
/// No class-0 pixel reaches this intensity at the default noise level,
/// while every blob peak exceeds it.
pub const BLOB_THRESHOLD: f64 = 0.5;

impl DatasetSpec {
    pub fn classification(n_per_class: usize, size: usize, seed: u64) -> Self {
        DatasetSpec {
            task: TaskKind::Classification,
            n_per_class,
            image_size: (size, size),
            noise: 0.03,
            seed,
        }
    }

    pub fn segmentation(n: usize, size: usize, seed: u64) -> Self {
        DatasetSpec {
            task: TaskKind::Segmentation,
            ..Self::classification(n, size, seed)
        }
    }

    pub fn len(&self) -> usize {
        match self.task {
            TaskKind::Classification => self.n_per_class * NUM_CLASSES,
            TaskKind::Segmentation => self.n_per_class,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h.min(w) < MIN_IMAGE_SIZE {
            return Err(Error::Spec(format!(
                "image size {h}x{w} is too small for the blob scale (minimum {MIN_IMAGE_SIZE})"
            )));
        }
        if self.n_per_class == 0 {
            return Err(Error::Spec("sample count must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Spec(format!("noise level {} must be non-negative", self.noise)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Label(usize),
    Mask(Tensor<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub target: Target,
}

impl Sample {
    pub fn label(&self) -> Option<usize> {
        match self.target {
            Target::Label(l) => Some(l),
            Target::Mask(_) => None,
        }
    }

    pub fn mask(&self) -> Option<&Tensor<f32>> {
        match &self.target {
            Target::Mask(m) => Some(m),
            Target::Label(_) => None,
        }
    }
}

struct Gaussian {
    cy: f64,
    cx: f64,
    sigma: f64,
    amp: f64,
}

fn blob(rng: &mut XorShift64Star, h: usize, w: usize, large: bool) -> Vec<Gaussian> {
    let s = h.min(w) as f64 / 64.0;
    let (sig_lo, sig_hi, amp_lo, amp_hi) = if large { (6.0, 9.0, 0.55, 0.7) } else { (3.0, 4.5, 0.3, 0.4) };
    let margin = (if large { 14.0 } else { 9.0 } * s).min(h.min(w) as f64 / 3.0);
    let cy = rng.uniform(margin, h as f64 - margin);
    let cx = rng.uniform(margin, w as f64 - margin);
    let parts = 1 + rng.below(3);
    (0..parts)
        .map(|i| {
            let jitter = if i == 0 { 0.0 } else { 0.6 * sig_lo * s };
            Gaussian {
                cy: cy + rng.uniform(-jitter, jitter),
                cx: cx + rng.uniform(-jitter, jitter),
                sigma: rng.uniform(sig_lo, sig_hi) * s,
                amp: rng.uniform(amp_lo, amp_hi) / parts as f64 * if i == 0 { 1.5 } else { 0.75 },
            }
        })
        .collect()
}

fn field(g: &[Gaussian], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = g
                .iter()
                .map(|b| {
                    let d2 = (y as f64 - b.cy).powi(2) + (x as f64 - b.cx).powi(2);
                    b.amp * (-d2 / (2.0 * b.sigma * b.sigma)).exp()
                })
                .sum();
        }
    }
    out
}

fn background(rng: &mut XorShift64Star, h: usize, w: usize, noise: f64) -> Vec<f64> {
    let base = rng.uniform(0.2, 0.26);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| (rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0.0, 2.0 * PI), rng.uniform(0.005, 0.02)))
        .collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (y as f64 / h as f64, x as f64 / w as f64);
            let texture: f64 = waves.iter().map(|&(fy, fx, ph, a)| a * (2.0 * PI * (fy * u + fx * v) + ph).sin()).sum();
            out[y * w + x] = base + texture + noise * rng.normal();
        }
    }
    out
}

fn to_image(v: Vec<f64>, h: usize, w: usize) -> Tensor<f32> {
    let data = v.into_iter().map(|p| p.clamp(0.0, 1.0) as f32).collect();
    Tensor::from_vec([1, h, w], data).expect("valid image shape")
}

/// One sample of the dataset; `index` fixes both the class and the stream.
pub fn generate_one(spec: &DatasetSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let mut rng = XorShift64Star::stream(spec.seed, index as u64);
    let mut img = background(&mut rng, h, w, spec.noise);
    let (class, large) = match spec.task {
        TaskKind::Classification => {
            let c = index % NUM_CLASSES;
            (Some(c), c == 2)
        }
        TaskKind::Segmentation => (None, index % 2 == 1),
    };
    let has_blob = class != Some(0);
    let mut support = vec![0.0; h * w];
    if has_blob {
        let f = field(&blob(&mut rng, h, w, large), h, w);
        let peak = f.iter().cloned().fold(0.0, f64::max);
        for (j, v) in f.iter().enumerate() {
            img[j] += v;
            if *v >= 0.5 * peak {
                support[j] = 1.0;
            }
        }
    }
    let image = to_image(img, h, w);
    let target = match class {
        Some(c) => Target::Label(c),
        None => Target::Mask(to_image(support, h, w)),
    };
    Ok(Sample { image, target })
}

pub fn generate(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.len()).map(|i| generate_one(spec, i)).collect()
}

/// Min-max rescale to `[0, 1]`; constant images map to zeros.
pub fn normalize(image: &Tensor<f32>) -> Tensor<f32> {
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return image.map(|_| 0.0);
    }
    image.map(|v| (v - lo) / range)
}

/// Augmentation families that may be drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentKinds {
    pub intensity: bool,
    pub spatial: bool,
}

impl AugmentKinds {
    pub const ALL: AugmentKinds = AugmentKinds {
        intensity: true,
        spatial: true,
    };
    pub const NONE: AugmentKinds = AugmentKinds {
        intensity: false,
        spatial: false,
    };
}

/// Concrete transform parameters. The default value is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub rotation_deg: f64,
    pub scale: f64,
    pub gamma: f64,
    pub noise_std: f64,
    pub noise_seed: u64,
    /// Coefficients of `1 + c0 x + c1 y + c2 x^2 + c3 x y + c4 y^2` on
    /// coordinates normalized to `[-1, 1]`.
    pub bias_field: Option<[f64; 5]>,
    /// `(vertical axis?, shift in pixels, amplitude)`.
    pub ghosting: Option<(bool, usize, f64)>,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            hflip: false,
            vflip: false,
            rotation_deg: 0.0,
            scale: 1.0,
            gamma: 1.0,
            noise_std: 0.0,
            noise_seed: 0,
            bias_field: None,
            ghosting: None,
        }
    }
}

impl AugmentParams {
    /// Each transform of an enabled family is included with probability 1/2.
    pub fn sample(kinds: AugmentKinds, h: usize, w: usize, rng: &mut XorShift64Star) -> Self {
        let mut p = AugmentParams::default();
        let coin = |rng: &mut XorShift64Star| rng.below(2) == 1;
        if kinds.spatial {
            p.hflip = coin(rng);
            p.vflip = coin(rng);
            if coin(rng) {
                p.rotation_deg = rng.uniform(-15.0, 15.0);
            }
            if coin(rng) {
                p.scale = rng.uniform(0.9, 1.1);
            }
        }
        if kinds.intensity {
            if coin(rng) {
                p.gamma = rng.uniform(0.7, 1.5);
            }
            if coin(rng) {
                p.noise_std = rng.uniform(0.01, 0.05);
                p.noise_seed = rng.next_u64();
            }
            if coin(rng) {
                let mut c = [0.0; 5];
                c.iter_mut().for_each(|v| *v = rng.uniform(-0.15, 0.15));
                p.bias_field = Some(c);
            }
            if coin(rng) {
                let vertical = coin(rng);
                let extent = if vertical { h } else { w };
                let shift = (extent / (2 + rng.below(3))).max(1);
                p.ghosting = Some((vertical, shift, rng.uniform(0.05, 0.2)));
            }
        }
        p
    }

    fn is_affine_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.scale == 1.0
    }

    /// Source coordinate `(y, x)` sampled for each output pixel by the
    /// spatial part of the transform (flips, then rotation and scale about
    /// the image centre).
    pub fn source_coords(&self, h: usize, w: usize) -> Vec<(f64, f64)> {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let theta = self.rotation_deg.to_radians();
        let (s, c) = theta.sin_cos();
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let (mut sy, mut sx) = if self.is_affine_identity() {
                    (y as f64, x as f64)
                } else {
                    (cy + (c * dy + s * dx) / self.scale, cx + (-s * dy + c * dx) / self.scale)
                };
                if self.vflip {
                    sy = h as f64 - 1.0 - sy;
                }
                if self.hflip {
                    sx = w as f64 - 1.0 - sx;
                }
                out.push((sy, sx));
            }
        }
        out
    }
}

fn bilinear(src: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| src[yy * w + xx] as f64;
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

fn nearest(src: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let yy = y.round().clamp(0.0, (h - 1) as f64) as usize;
    let xx = x.round().clamp(0.0, (w - 1) as f64) as usize;
    src[yy * w + xx]
}

fn resample(t: &Tensor<f32>, coords: &[(f64, f64)], exact: bool, interp: fn(&[f32], usize, usize, f64, f64) -> f32) -> Tensor<f32> {
    let [_, h, w] = [t.dims()[0], t.dims()[1], t.dims()[2]];
    let src = t.data();
    let data = coords
        .iter()
        .map(|&(y, x)| if exact { src[y as usize * w + x as usize] } else { interp(src, h, w, y, x) })
        .collect();
    Tensor::from_vec(t.dims().to_vec(), data).expect("same shape")
}

/// Applies `p`: spatial transforms to image and mask alike (bilinear for
/// the image, nearest for the mask), intensity transforms to the image.
pub fn apply(sample: &Sample, p: &AugmentParams) -> Sample {
    let (h, w) = (sample.image.dims()[1], sample.image.dims()[2]);
    let coords = p.source_coords(h, w);
    let exact = p.is_affine_identity();
    let mut image = resample(&sample.image, &coords, exact, bilinear);
    let target = match &sample.target {
        Target::Label(l) => Target::Label(*l),
        Target::Mask(m) => Target::Mask(resample(m, &coords, exact, nearest)),
    };
    if let Some(c) = p.bias_field {
        let mut data = image.data().to_vec();
        for y in 0..h {
            for x in 0..w {
                let u = 2.0 * x as f64 / (w as f64 - 1.0) - 1.0;
                let v = 2.0 * y as f64 / (h as f64 - 1.0) - 1.0;
                let f = 1.0 + c[0] * u + c[1] * v + c[2] * u * u + c[3] * u * v + c[4] * v * v;
                data[y * w + x] = (data[y * w + x] as f64 * f) as f32;
            }
        }
        image = Tensor::from_vec(image.dims().to_vec(), data).expect("same shape");
    }
    if let Some((vertical, shift, amp)) = p.ghosting {
        let src = image.data().to_vec();
        let mut data = src.clone();
        for y in 0..h {
            for x in 0..w {
                let (a, b) = if vertical {
                    (((y + shift) % h) * w + x, ((y + h - shift % h) % h) * w + x)
                } else {
                    (y * w + (x + shift) % w, y * w + (x + w - shift % w) % w)
                };
                data[y * w + x] += (amp * 0.5 * (src[a] as f64 + src[b] as f64)) as f32;
            }
        }
        image = Tensor::from_vec(image.dims().to_vec(), data).expect("same shape");
    }
    if p.gamma != 1.0 {
        image = image.map(|v| (v.max(0.0) as f64).powf(p.gamma) as f32);
    }
    if p.noise_std > 0.0 {
        let mut rng = XorShift64Star::new(p.noise_seed);
        let data = image.data().iter().map(|&v| v + (p.noise_std * rng.normal()) as f32).collect();
        image = Tensor::from_vec(image.dims().to_vec(), data).expect("same shape");
    }
    let intensity_changed = p.gamma != 1.0 || p.noise_std > 0.0 || p.bias_field.is_some() || p.ghosting.is_some();
    if intensity_changed {
        image = image.map(|v| v.clamp(0.0, 1.0));
    }
    Sample { image, target }
}

/// Draws a random subset of the enabled transforms and applies them.
pub fn augment(sample: &Sample, kinds: AugmentKinds, rng: &mut XorShift64Star) -> Sample {
    let (h, w) = (sample.image.dims()[1], sample.image.dims()[2]);
    let p = AugmentParams::sample(kinds, h, w, rng);
    apply(sample, &p)
}
