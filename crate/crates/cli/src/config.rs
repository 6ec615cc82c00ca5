//! Flat `key = value` run configuration.

use std::path::PathBuf;

use cxnn::data::{DatasetSpec, TaskKind};
use cxnn::io::parse_key_values;
use cxnn::models::{ArchSpec, Family, Head, Task, Variant};
use cxnn::train::TrainConfig;
use cxnn::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: ArchSpec,
    pub variants: Vec<Variant>,
    pub data: DatasetSpec,
    pub train: TrainConfig,
    pub out: PathBuf,
}

/// Every key with its default and meaning, as listed in `--help`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("arch", "resnet18", "resnet18 | resnet34 | resnet50 | unet | attention-unet | reconresnet"),
    ("classes", "3 (ResNets) / 1 (others)", "output classes"),
    ("in_channels", "1", "input image channels"),
    ("base_width", "64", "stage-0 channel count"),
    ("depth", "family canonical", "comma list: 4 block counts for ResNets, levels for UNets, residual blocks for ReconResNet"),
    ("head", "magnitude (classification) / real (segmentation)", "complex-to-real output head: magnitude | real"),
    ("variants", "real,widened,complex", "comma list of real | widened[:m] | complex | features:f"),
    ("samples", "300 per class / 300 total", "dataset size"),
    ("image_size", "64", "square image side in pixels"),
    ("noise", "0.03", "additive Gaussian noise std"),
    ("epochs", "80", "training epochs"),
    ("batch_size", "64", "mini-batch size"),
    ("lr", "0.0001", "Adam learning rate"),
    ("beta1", "0.9", "Adam first-moment decay"),
    ("beta2", "0.999", "Adam second-moment decay"),
    ("adam_eps", "0.00000001", "Adam epsilon"),
    ("folds", "5 (classification) / 3 (segmentation)", "cross-validation folds"),
    ("augment", "true", "random flips, affine, bias field, ghosting, gamma and noise"),
    ("seed", "0", "seed for data generation, initialization and shuffling"),
    ("out", "out", "output directory"),
];

impl RunConfig {
    pub fn for_family(family: Family) -> Self {
        let arch = ArchSpec::canonical(family);
        let (data, train) = if family.is_resnet() {
            (DatasetSpec::classification(300, 64, 0), TrainConfig::classification())
        } else {
            (DatasetSpec::segmentation(300, 64, 0), TrainConfig::segmentation())
        };
        RunConfig {
            arch,
            variants: Variant::TRIPLET.to_vec(),
            data,
            train,
            out: PathBuf::from("out"),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = parse_key_values(text)?;
        let mut seen = std::collections::HashSet::new();
        for (line, k, _) in &entries {
            if !KEYS.iter().any(|(name, _, _)| name == k) {
                return Err(Error::Spec(format!("line {line}: unknown key `{k}`")));
            }
            if !seen.insert(k.clone()) {
                return Err(Error::Spec(format!("line {line}: duplicate key `{k}`")));
            }
        }
        let family = match entries.iter().find(|(_, k, _)| k == "arch") {
            Some((line, _, v)) => Family::parse(v).map_err(|e| at(*line, e))?,
            None => Family::ResNet18,
        };
        let mut c = RunConfig::for_family(family);
        let mut classes = c.arch.task.num_classes();
        let mut head = None;
        for (line, k, v) in &entries {
            let line = *line;
            let bad = || Error::Spec(format!("line {line}: invalid value `{v}` for `{k}`"));
            let num = || v.parse::<usize>().map_err(|_| bad());
            let float = || v.parse::<f64>().map_err(|_| bad());
            match k.as_str() {
                "arch" => {}
                "classes" => classes = num()?,
                "in_channels" => c.arch.in_channels = num()?,
                "base_width" => c.arch.base_width = num()?,
                "depth" => {
                    c.arch.depth = v
                        .split(',')
                        .map(|d| d.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad())?
                }
                "head" => {
                    head = Some(match v.as_str() {
                        "magnitude" => Head::Magnitude,
                        "real" => Head::RealPart,
                        _ => return Err(bad()),
                    })
                }
                "variants" => {
                    c.variants = v
                        .split(',')
                        .map(|s| Variant::parse(s.trim()))
                        .collect::<Result<_>>()
                        .map_err(|e| at(line, e))?
                }
                "samples" => c.data.n_per_class = num()?,
                "image_size" => {
                    let s = num()?;
                    c.data.image_size = (s, s);
                }
                "noise" => c.data.noise = float()?,
                "epochs" => c.train.epochs = num()?,
                "batch_size" => c.train.batch_size = num()?,
                "lr" => c.train.lr = float()?,
                "beta1" => c.train.adam.beta1 = float()?,
                "beta2" => c.train.adam.beta2 = float()?,
                "adam_eps" => c.train.adam.eps = float()?,
                "folds" => c.train.folds = num()?,
                "augment" => c.train.augment = v.parse::<bool>().map_err(|_| bad())?,
                "seed" => {
                    let s = v.parse::<u64>().map_err(|_| bad())?;
                    c.set_seed(s);
                }
                "out" => c.out = PathBuf::from(v),
                _ => unreachable!("keys were checked above"),
            }
        }
        c.arch.task = match c.arch.task {
            Task::Classification(_) => Task::Classification(classes),
            Task::Segmentation(_) => Task::Segmentation(classes),
        };
        c.arch.head = head.unwrap_or_else(|| Head::default_for(c.arch.task));
        c.train.validate()?;
        if c.variants.is_empty() {
            return Err(Error::Spec("`variants` must name at least one variant".into()));
        }
        Ok(c)
    }

    /// Emits every key, so `parse(emit(c)) == c`.
    pub fn emit(&self) -> String {
        let depth: Vec<String> = self.arch.depth.iter().map(|d| d.to_string()).collect();
        let variants: Vec<String> = self.variants.iter().map(|v| v.key()).collect();
        let head = match self.arch.head {
            Head::Magnitude => "magnitude",
            Head::RealPart => "real",
        };
        let t = &self.train;
        format!(
            "arch = {}\nclasses = {}\nin_channels = {}\nbase_width = {}\ndepth = {}\nhead = {head}\n\
             variants = {}\nsamples = {}\nimage_size = {}\nnoise = {:?}\nepochs = {}\nbatch_size = {}\n\
             lr = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\nadam_eps = {:?}\nfolds = {}\naugment = {}\nseed = {}\nout = {}\n",
            self.arch.family.key(),
            self.arch.task.num_classes(),
            self.arch.in_channels,
            self.arch.base_width,
            depth.join(","),
            variants.join(","),
            self.data.n_per_class,
            self.data.image_size.0,
            self.data.noise,
            t.epochs,
            t.batch_size,
            t.lr,
            t.adam.beta1,
            t.adam.beta2,
            t.adam.eps,
            t.folds,
            t.augment,
            t.seed,
            self.out.display(),
        )
    }

    pub fn is_segmentation(&self) -> bool {
        self.data.task == TaskKind::Segmentation
    }
}

fn at(line: usize, e: Error) -> Error {
    Error::Spec(format!("line {line}: {e}"))
}

pub fn keys_help() -> String {
    let mut s = String::from("Config keys (`key = value`, `#` starts a comment):\n");
    for (k, d, m) in KEYS {
        s.push_str(&format!("  {k:<12} {m} [default: {d}]\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let text = "arch = unet\nbase_width = 8 # tiny\ndepth = 2\nvariants = real, complex, widened:2\nlr=0.003\nseed = 42\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.arch.family, Family::UNet);
        assert_eq!(c.train.folds, 3);
        assert_eq!(c.data.seed, 42);
        assert_eq!(c.arch.head, Head::RealPart);
        let again = RunConfig::parse(&c.emit()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.emit(), c.emit());
    }

    #[test]
    fn defaults_round_trip() {
        for f in Family::ALL {
            let c = RunConfig::for_family(f);
            assert_eq!(RunConfig::parse(&c.emit()).unwrap(), c);
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = RunConfig::parse("arch = unet\n\nwidth = 3\n").unwrap_err().to_string();
        assert!(e.contains("line 3") && e.contains("width"), "{e}");
        let e = RunConfig::parse("epochs = many\n").unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
        assert!(RunConfig::parse("lr = 0\n").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2\n").is_err());
    }

    #[test]
    fn help_lists_every_key() {
        let h = keys_help();
        for (k, _, _) in KEYS {
            assert!(h.contains(k));
        }
    }
}
