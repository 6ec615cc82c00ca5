use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use cxnn::data::{self, Target};
use cxnn::io;
use cxnn::models::{self, ArchSpec, Family, ModelHandle, Variant};
use cxnn::train::{self, ExperimentOptions, MetricReport};
use cxnn::Error;

use crate::config::RunConfig;

/// An error with its process exit code: 1 for runtime and training
/// failures, 2 for usage, configuration and I/O errors.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Spec(_) | Error::Io { .. } | Error::Format { .. } | Error::Widening { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn write(path: &Path, contents: &str) -> Outcome {
    fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn make_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

pub fn gen_data(c: &RunConfig, out: &Path) -> Outcome {
    let samples = data::generate(&c.data)?;
    make_dir(out)?;
    let manifest = io::save_dataset(out, &samples)?;
    if c.is_segmentation() {
        let fg: f64 = samples.iter().filter_map(|s| s.mask()).map(|m| m.sum() as f64).sum();
        println!("images\t{}", samples.len());
        println!("foreground_pixels\t{fg}");
    } else {
        for k in 0..data::NUM_CLASSES {
            let n = samples.iter().filter(|s| s.label() == Some(k)).count();
            println!("class {k}\t{n}");
        }
        println!("total\t{}", samples.len());
    }
    println!("manifest\t{}", manifest.display());
    Ok(())
}

pub fn count_params(base: &ArchSpec, arch: Option<&str>, variant: Option<&str>, canonical: bool) -> Outcome {
    let family = arch.map(Family::parse).transpose()?.unwrap_or(base.family);
    let spec = if canonical {
        ArchSpec::canonical(family)
    } else if family != base.family {
        RunConfig::for_family(family).arch
    } else {
        base.clone()
    };
    let variants = match variant {
        Some(v) => vec![Variant::parse(v)?],
        None => Variant::TRIPLET.to_vec(),
    };
    let depth: Vec<String> = spec.depth.iter().map(|d| d.to_string()).collect();
    println!(
        "{} (base width {}, depth {}, {} input channel(s), {} class(es))",
        family.display_name(),
        spec.base_width,
        depth.join(","),
        spec.in_channels,
        spec.task.num_classes()
    );
    println!("{:<18}{:>12}{:>14}", "Type", "Features", "Trainable");
    for v in variants {
        let m = models::plan_checked(&spec, v)?;
        println!("{:<18}{:>12}{:>14}", v.to_string(), m.features, m.trainable);
    }
    Ok(())
}

fn pick(samples: &[data::Sample], idx: &[usize]) -> Vec<data::Sample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

pub fn train(c: &RunConfig, variant: Option<&str>, out: &Path) -> Outcome {
    let variant = match variant {
        Some(v) => Variant::parse(v)?,
        None => c.variants[0],
    };
    models::plan_checked(&c.arch, variant)?;
    make_dir(out)?;
    let samples = data::generate(&c.data)?;
    let folds = train::kfold_split(samples.len(), c.train.folds.max(2), c.train.seed)?;
    let seed = train::job_seed(c.train.seed, 0, 0);
    let mut model = models::build::<f32>(&c.arch, variant, seed)?;
    let log = train::train_model(&mut model, &pick(&samples, &folds[0].train), &c.train, seed)
        .map_err(|e| Failure::runtime(e.to_string()))?;
    let metrics = train::evaluate(&model, &pick(&samples, &folds[0].test), c.train.batch_size)?;
    io::save_checkpoint(out.join("checkpoint"), &model)?;
    let [a, b] = train::metric_names(c.arch.task);
    let row = format!(
        "Model\tType\t{a}\t{b}\n{}\t{variant}\t{}\t{}\n",
        c.arch.family.display_name(),
        metrics[0],
        metrics[1]
    );
    write(&out.join("metrics.tsv"), &row)?;
    let mut losses = String::from("epoch\tloss\n");
    for (i, l) in log.epoch_loss.iter().enumerate() {
        writeln!(losses, "{i}\t{l}").expect("string write");
    }
    write(&out.join("loss.tsv"), &losses)?;
    print!("{row}");
    Ok(())
}

fn checkpoint_name(v: Variant, fold: usize) -> String {
    format!("{}-fold{fold}", v.key().replace(':', "-"))
}

pub fn compare(c: &RunConfig, out: &Path, jobs: usize) -> Outcome {
    for &v in &c.variants {
        models::plan_checked(&c.arch, v)?;
    }
    let ckpt = out.join("checkpoints");
    make_dir(&ckpt)?;
    write(&out.join("config.txt"), &c.emit())?;
    let save = |vi: usize, fi: usize, m: &ModelHandle<f32>| io::save_checkpoint(ckpt.join(checkpoint_name(c.variants[vi], fi)), m);
    let opts = ExperimentOptions { jobs, max_folds: None };
    let reports: Vec<MetricReport> = train::run_experiment_with(&c.arch, &c.variants, &c.data, &c.train, opts, save)?;
    write(&out.join("report.tsv"), &train::render_tsv(&reports)?)?;
    let table = train::render_table(&reports)?;
    write(&out.join("report.txt"), &table)?;
    write(&out.join("folds.tsv"), &train::render_folds_tsv(&reports)?)?;
    print!("{table}");
    let failed: usize = reports.iter().map(MetricReport::failed_folds).sum();
    let total: usize = reports.iter().map(|r| r.folds.len()).sum();
    if failed > 0 {
        eprintln!("warning: {failed} of {total} folds failed; see folds.tsv");
    }
    if failed == total {
        return Err(Failure::runtime("every fold failed"));
    }
    Ok(())
}

/// Pixel classes of an overlay.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OverlayCounts {
    pub true_positive: usize,
    pub under: usize,
    pub over: usize,
}

/// Colours each pixel (green: true positive, red: under-segmented, blue:
/// over-segmented, grey: image intensity elsewhere).
pub fn overlay(image: &[f32], pred: &[f32], truth: &[f32]) -> (Vec<[u8; 3]>, OverlayCounts) {
    let mut counts = OverlayCounts::default();
    let px = image
        .iter()
        .zip(pred)
        .zip(truth)
        .map(|((&v, &p), &t)| match (p > 0.5, t > 0.5) {
            (true, true) => {
                counts.true_positive += 1;
                [0, 255, 0]
            }
            (false, true) => {
                counts.under += 1;
                [255, 0, 0]
            }
            (true, false) => {
                counts.over += 1;
                [0, 0, 255]
            }
            (false, false) => {
                let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                [g, g, g]
            }
        })
        .collect();
    (px, counts)
}

pub fn export_masks(checkpoint: &Path, manifest: &Path, out: &Path) -> Outcome {
    let model = io::load_checkpoint::<f32>(checkpoint)?;
    if !model.spec.task.is_segmentation() {
        return Err(Failure::usage(format!("{}: not a segmentation checkpoint", checkpoint.display())));
    }
    let samples = io::load_dataset(manifest)?;
    make_dir(out)?;
    let preds = train::predict(&model, &samples, 16)?;
    let mut summary = String::from("index\ttrue_positive\tunder_segmented\tover_segmented\n");
    let mut total = OverlayCounts::default();
    for (i, (s, p)) in samples.iter().zip(&preds).enumerate() {
        let (Target::Mask(p), Some(t)) = (p, s.mask()) else {
            return Err(Failure::usage(format!("{}: samples need ground-truth masks", manifest.display())));
        };
        let [_, h, w] = *s.image.dims() else {
            return Err(Failure::usage("images must be [1, H, W]"));
        };
        let mask: Vec<u8> = p.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
        io::write_pgm(out.join(format!("{i:06}-pred.pgm")), w, h, &mask)?;
        let (px, n) = overlay(s.image.data(), p.data(), t.data());
        io::write_ppm(out.join(format!("{i:06}-overlay.ppm")), w, h, &px)?;
        writeln!(summary, "{i}\t{}\t{}\t{}", n.true_positive, n.under, n.over).expect("string write");
        total.true_positive += n.true_positive;
        total.under += n.under;
        total.over += n.over;
    }
    write(&out.join("summary.tsv"), &summary)?;
    println!(
        "images {}\ttrue_positive {}\tunder_segmented {}\tover_segmented {}",
        samples.len(),
        total.true_positive,
        total.under,
        total.over
    );
    Ok(())
}
