//! File formats: `.cxt` tensors, dataset manifests, checkpoints, and
//! PGM/PPM images.
//!
//! A `.cxt` file is
//!
//! ```text
//! "CXT1" | dtype u8 (0 = f32, 1 = f64) | domain u8 (0 = real, 1 = complex)
//!        | ndim u32 LE | ndim x u64 LE dims | payload
//! ```
//!
//! with a row-major little-endian payload; complex tensors store the whole
//! real plane, then the whole imaginary plane.

use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::{Domain, ParamValue};
use crate::data::{Sample, Target};
use crate::error::{Error, Result};
use crate::models::{self, ArchSpec, Family, Head, ModelHandle, Task, Variant};
use crate::tensor::{ComplexTensor, DType, Scalar, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"CXT1";
const HEADER_LEN: usize = 10;

/// Header fields of a `.cxt` file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CxtHeader {
    pub dtype: DType,
    pub domain: Domain,
    pub dims: Vec<usize>,
}

/// A decoded tensor of either precision.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(ParamValue<f32>),
    F64(ParamValue<f64>),
}

pub fn encode<T: Scalar>(value: &ParamValue<T>) -> Vec<u8> {
    let planes = value.planes();
    let dims = value.shape().dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * dims.len() + value.coords() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(match value.domain() {
        Domain::Real => 0,
        Domain::Complex => 1,
    });
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for p in planes {
        for &v in p.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.pos,
                format!(
                    "truncated {what}: expected {n} more bytes, {} available",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }
}

pub fn decode_header(bytes: &[u8]) -> Result<(CxtHeader, usize)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"CXT1\""));
    }
    let dtype = match r.take(1, "dtype")?[0] {
        0 => DType::F32,
        1 => DType::F64,
        c => return Err(Error::format(4, format!("unknown dtype code {c}"))),
    };
    let domain = match r.take(1, "domain")?[0] {
        0 => Domain::Real,
        1 => Domain::Complex,
        c => return Err(Error::format(5, format!("unknown domain code {c}"))),
    };
    let ndim = u32::from_le_bytes(r.take(4, "rank")?.try_into().expect("four bytes")) as usize;
    if ndim == 0 {
        return Err(Error::format(6, "rank must be at least 1"));
    }
    let dims_at = r.pos;
    let dim_bytes = ndim
        .checked_mul(8)
        .ok_or_else(|| Error::format(6, format!("rank {ndim} overflows")))?;
    let raw = r.take(dim_bytes, "dimensions")?;
    let mut dims = Vec::with_capacity(ndim);
    for (i, c) in raw.chunks_exact(8).enumerate() {
        let d = u64::from_le_bytes(c.try_into().expect("eight bytes"));
        let d = usize::try_from(d).map_err(|_| Error::format(dims_at + 8 * i, format!("dimension {d} too large")))?;
        dims.push(d);
    }
    Shape::new(dims.clone()).map_err(|e| Error::format(dims_at, e.to_string()))?;
    Ok((CxtHeader { dtype, domain, dims }, r.pos))
}

fn read_planes<T: Scalar>(bytes: &[u8], h: &CxtHeader) -> Result<ParamValue<T>> {
    let n: usize = h.dims.iter().product();
    let need = n * T::DTYPE.size();
    let planes = h.domain.coords();
    let plane = |k: usize| -> Tensor<T> {
        let data = bytes[k * need..(k + 1) * need]
            .chunks_exact(T::DTYPE.size())
            .map(T::read_le)
            .collect();
        Tensor::from_vec(h.dims.clone(), data).expect("checked shape")
    };
    debug_assert_eq!(bytes.len(), planes * need);
    Ok(match h.domain {
        Domain::Real => ParamValue::Real(plane(0)),
        Domain::Complex => ParamValue::Complex(ComplexTensor::from_parts(plane(0), plane(1))?),
    })
}

/// Parses a complete `.cxt` buffer. Never reads out of bounds; any
/// inconsistency is a format error carrying the byte offset.
pub fn decode(bytes: &[u8]) -> Result<StoredTensor> {
    let (h, start) = decode_header(bytes)?;
    let n: usize = h.dims.iter().product();
    let need = n
        .checked_mul(h.dtype.size())
        .and_then(|v| v.checked_mul(h.domain.coords()))
        .ok_or_else(|| Error::format(start, "payload size overflows"))?;
    let have = bytes.len() - start;
    if have != need {
        return Err(Error::format(
            start,
            format!("payload length mismatch: expected {need} bytes, found {have}"),
        ));
    }
    let payload = &bytes[start..];
    Ok(match h.dtype {
        DType::F32 => StoredTensor::F32(read_planes(payload, &h)?),
        DType::F64 => StoredTensor::F64(read_planes(payload, &h)?),
    })
}

/// Decodes and checks the stored precision against `T`.
pub fn decode_as<T: Scalar>(bytes: &[u8]) -> Result<ParamValue<T>> {
    let stored = decode(bytes)?;
    match (stored, T::DTYPE) {
        (StoredTensor::F32(v), DType::F32) => Ok(cast_value(v)),
        (StoredTensor::F64(v), DType::F64) => Ok(cast_value(v)),
        (s, want) => Err(Error::format(
            4,
            format!(
                "dtype mismatch: file holds {:?}, expected {want:?}",
                match s {
                    StoredTensor::F32(_) => DType::F32,
                    StoredTensor::F64(_) => DType::F64,
                }
            ),
        )),
    }
}

fn cast_value<S: Scalar, T: Scalar>(v: ParamValue<S>) -> ParamValue<T> {
    match v {
        ParamValue::Real(t) => ParamValue::Real(t.cast()),
        ParamValue::Complex(z) => ParamValue::Complex(ComplexTensor {
            re: z.re.cast(),
            im: z.im.cast(),
        }),
    }
}

pub fn save_tensor<T: Scalar>(path: impl AsRef<Path>, value: &ParamValue<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(value)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<ParamValue<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_as(&bytes)
}

/// Parses `key = value` lines with `#` comments. Returns
/// `(line number, key, value)` triples; the caller decides which keys exist.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Spec(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Spec(format!("line {}: empty key", i + 1)));
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ManifestTarget {
    Label(usize),
    Mask(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub target: ManifestTarget,
}

/// One sample per line: `image.cxt<TAB>label-or-mask.cxt`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (img, tgt) = t
                .split_once('\t')
                .ok_or_else(|| Error::Spec(format!("manifest line {}: expected two tab-separated fields", i + 1)))?;
            let tgt = tgt.trim();
            let target = match tgt.parse::<usize>() {
                Ok(l) => ManifestTarget::Label(l),
                Err(_) if !tgt.is_empty() => ManifestTarget::Mask(PathBuf::from(tgt)),
                Err(_) => return Err(Error::Spec(format!("manifest line {}: empty target", i + 1))),
            };
            entries.push(ManifestEntry {
                image: PathBuf::from(img.trim()),
                target,
            });
        }
        Ok(Manifest { entries })
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# image\tlabel-or-mask\n");
        for e in &self.entries {
            let t = match &e.target {
                ManifestTarget::Label(l) => l.to_string(),
                ManifestTarget::Mask(p) => p.display().to_string(),
            };
            s.push_str(&format!("{}\t{t}\n", e.image.display()));
        }
        s
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `images/NNNNNN.cxt`, `masks/NNNNNN.cxt` and `manifest.tsv`
/// under `dir`; returns the manifest path.
pub fn save_dataset(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    create_dir(&dir.join("images"))?;
    let mut manifest = Manifest::default();
    for (i, s) in samples.iter().enumerate() {
        let image = PathBuf::from(format!("images/{i:06}.cxt"));
        save_tensor(dir.join(&image), &ParamValue::Real(s.image.clone()))?;
        let target = match &s.target {
            Target::Label(l) => ManifestTarget::Label(*l),
            Target::Mask(m) => {
                create_dir(&dir.join("masks"))?;
                let p = PathBuf::from(format!("masks/{i:06}.cxt"));
                save_tensor(dir.join(&p), &ParamValue::Real(m.clone()))?;
                ManifestTarget::Mask(p)
            }
        };
        manifest.entries.push(ManifestEntry { image, target });
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest.render()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn load_real(path: &Path) -> Result<Tensor<f32>> {
    match load_tensor::<f32>(path)? {
        ParamValue::Real(t) => Ok(t),
        ParamValue::Complex(_) => Err(Error::Spec(format!("{}: expected a real tensor", path.display()))),
    }
}

/// Loads a dataset from a manifest; relative paths resolve against the
/// manifest's directory. Images may be `[H, W]` or `[1, H, W]`.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = Manifest::parse(&text)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let as_image = |t: Tensor<f32>, p: &Path| -> Result<Tensor<f32>> {
        match *t.dims() {
            [h, w] => t.reshape([1, h, w]),
            [1, _, _] => Ok(t),
            _ => Err(Error::shape(format!("{}: expected [H, W] or [1, H, W], got {}", p.display(), t.shape()))),
        }
    };
    manifest
        .entries
        .iter()
        .map(|e| {
            let ip = base.join(&e.image);
            let image = as_image(load_real(&ip)?, &ip)?;
            let target = match &e.target {
                ManifestTarget::Label(l) => Target::Label(*l),
                ManifestTarget::Mask(p) => {
                    let mp = base.join(p);
                    let m = as_image(load_real(&mp)?, &mp)?;
                    if m.dims() != image.dims() {
                        return Err(Error::shape(format!("{}: mask shape differs from its image", mp.display())));
                    }
                    Target::Mask(m)
                }
            };
            Ok(Sample { image, target })
        })
        .collect()
}

/// `key = value` description of an architecture and variant.
pub fn render_model_config(spec: &ArchSpec, variant: Variant) -> String {
    let (task, classes) = match spec.task {
        Task::Classification(k) => ("classification", k),
        Task::Segmentation(k) => ("segmentation", k),
    };
    let depth: Vec<String> = spec.depth.iter().map(|d| d.to_string()).collect();
    format!(
        "arch = {}\ntask = {task}\nclasses = {classes}\nin_channels = {}\nbase_width = {}\ndepth = {}\nhead = {}\nvariant = {}\n",
        spec.family.key(),
        spec.in_channels,
        spec.base_width,
        depth.join(","),
        match spec.head {
            Head::Magnitude => "magnitude",
            Head::RealPart => "real",
        },
        variant.key()
    )
}

pub fn parse_model_config(text: &str) -> Result<(ArchSpec, Variant)> {
    let mut family = None;
    let mut task = None;
    let mut classes = None;
    let mut rest = Vec::new();
    let mut variant = Variant::Real;
    let bad = |line: usize, k: &str, v: &str| Error::Spec(format!("line {line}: bad value `{v}` for `{k}`"));
    for (line, k, v) in parse_key_values(text)? {
        match k.as_str() {
            "arch" => family = Some(Family::parse(&v)?),
            "task" => task = Some(v),
            "classes" => classes = Some(v.parse::<usize>().map_err(|_| bad(line, &k, &v))?),
            "variant" => variant = Variant::parse(&v)?,
            "in_channels" | "base_width" | "depth" | "head" => rest.push((line, k, v)),
            _ => return Err(Error::Spec(format!("line {line}: unknown key `{k}`"))),
        }
    }
    let family = family.ok_or_else(|| Error::Spec("missing `arch`".into()))?;
    let k = classes.unwrap_or(if family.is_resnet() { 3 } else { 1 });
    let task = match task.as_deref() {
        None if family.is_resnet() => Task::Classification(k),
        None => Task::Segmentation(k),
        Some("classification") => Task::Classification(k),
        Some("segmentation") => Task::Segmentation(k),
        Some(other) => return Err(Error::Spec(format!("unknown task `{other}`"))),
    };
    let mut spec = ArchSpec::new(family, task);
    for (line, k, v) in rest {
        match k.as_str() {
            "in_channels" => spec.in_channels = v.parse().map_err(|_| bad(line, &k, &v))?,
            "base_width" => spec.base_width = v.parse().map_err(|_| bad(line, &k, &v))?,
            "depth" => {
                spec.depth = v
                    .split(',')
                    .map(|d| d.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(line, &k, &v))?
            }
            _ => {
                spec.head = match v.as_str() {
                    "magnitude" => Head::Magnitude,
                    "real" => Head::RealPart,
                    _ => return Err(bad(line, &k, &v)),
                }
            }
        }
    }
    Ok((spec, variant))
}

/// Writes `model.txt`, `params.manifest` and one `.cxt` per parameter
/// (BatchNorm running statistics included).
pub fn save_checkpoint<T: Scalar>(dir: impl AsRef<Path>, model: &ModelHandle<T>) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(&dir.join("params"))?;
    let cfg = dir.join("model.txt");
    fs::write(&cfg, render_model_config(&model.spec, model.variant)).map_err(|e| Error::io(&cfg, e))?;
    let mut listing = String::from("# name\tfile\ttrainable\n");
    for (i, p) in model.params.iter().enumerate() {
        let file = format!("params/{i:05}.cxt");
        save_tensor(dir.join(&file), &p.value)?;
        listing.push_str(&format!("{}\t{file}\t{}\n", p.name, p.trainable as u8));
    }
    let path = dir.join("params.manifest");
    fs::write(&path, listing).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<ModelHandle<T>> {
    let dir = dir.as_ref();
    let cfg = dir.join("model.txt");
    let text = fs::read_to_string(&cfg).map_err(|e| Error::io(&cfg, e))?;
    let (spec, variant) = parse_model_config(&text)?;
    let mut model = models::build::<T>(&spec, variant, 0)?;
    let listing_path = dir.join("params.manifest");
    let listing = fs::read_to_string(&listing_path).map_err(|e| Error::io(&listing_path, e))?;
    let mut seen = 0;
    for (i, line) in listing.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, file, _] = fields[..] else {
            return Err(Error::Spec(format!("params.manifest line {}: expected three fields", i + 1)));
        };
        let id = model
            .params
            .find(name)
            .ok_or_else(|| Error::Spec(format!("params.manifest line {}: unknown parameter `{name}`", i + 1)))?;
        let value = load_tensor::<T>(dir.join(file))?;
        let p = model.params.get_mut(id);
        if value.domain() != p.value.domain() || value.shape() != p.value.shape() {
            return Err(Error::Spec(format!("parameter `{name}` does not match the architecture")));
        }
        p.value = value;
        seen += 1;
    }
    if seen != model.params.len() {
        return Err(Error::Spec(format!(
            "checkpoint holds {seen} parameters, the architecture has {}",
            model.params.len()
        )));
    }
    Ok(model)
}

/// Binary 8-bit greymap (P5).
pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if pixels.len() != width * height {
        return Err(Error::shape(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Binary 8-bit RGB pixmap (P6).
pub fn write_ppm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[[u8; 3]]) -> Result<()> {
    let path = path.as_ref();
    if pixels.len() != width * height {
        return Err(Error::shape(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().flatten());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
