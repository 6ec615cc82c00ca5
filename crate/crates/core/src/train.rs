//! Losses are recorded on the tape (see [`Tape::cross_entropy`] and
//! [`Tape::dice_loss`]); this module holds the optimizer, the metrics, the
//! fold splitter, the training loop and the cross-validation driver.
//!
//! [`Tape::cross_entropy`]: crate::autodiff::Tape::cross_entropy
//! [`Tape::dice_loss`]: crate::autodiff::Tape::dice_loss

use std::fmt::Write as _;

use crate::autodiff::{Ctx, Mode, ParamStore, ParamValue};
use crate::data::{self, AugmentKinds, DatasetSpec, Sample, Target, TaskKind};
use crate::error::{Error, Result};
use crate::models::{self, ArchSpec, ModelHandle, Task, Variant};
use crate::parallel;
use crate::rng::{splitmix64, XorShift64Star};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Dice,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub loss: LossKind,
    pub folds: usize,
    pub seed: u64,
    pub augment: bool,
}

impl TrainConfig {
    /// 80 epochs, batch 64, learning rate 1e-4, cross-entropy, 5 folds.
    pub fn classification() -> Self {
        TrainConfig {
            epochs: 80,
            batch_size: 64,
            lr: 1e-4,
            adam: AdamConfig::default(),
            loss: LossKind::CrossEntropy,
            folds: 5,
            seed: 0,
            augment: true,
        }
    }

    /// As [`classification`](Self::classification) with Dice loss and 3 folds.
    pub fn segmentation() -> Self {
        TrainConfig {
            loss: LossKind::Dice,
            folds: 3,
            ..Self::classification()
        }
    }

    pub fn for_task(task: Task) -> Self {
        if task.is_segmentation() {
            Self::segmentation()
        } else {
            Self::classification()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.folds == 0 {
            return Err(Error::Spec("epochs, batch size and folds must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Spec(format!("learning rate {} must be positive", self.lr)));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Spec("Adam needs betas in [0, 1) and a positive epsilon".into()));
        }
        Ok(())
    }
}

/// First and second moment buffers, one entry per parameter. Complex
/// parameters are treated as two independent real planes.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    m: Vec<ParamValue<T>>,
    v: Vec<ParamValue<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| p.value.zeros_like()).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter from the
/// gradients accumulated in `params`.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let (c1, c2) = (T::from_f64_lossy(c1), T::from_f64_lossy(c2));
    let (lr, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(cfg.eps));
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if !p.trainable {
            continue;
        }
        let grads = p.grad.planes();
        let planes = p.value.planes_mut();
        for (((w, g), m), v) in planes
            .into_iter()
            .zip(grads)
            .zip(m.planes_mut())
            .zip(v.planes_mut())
        {
            for (((w, &g), m), v) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub f1: f64,
    pub accuracy: f64,
}

/// Accuracy and macro-averaged F1. Per class, F1 is `2 tp / (2 tp + fp + fn)`
/// (equal to `2PR / (P + R)`), and 0 when the class never occurs in either
/// vector.
pub fn classification_metrics(pred: &[usize], truth: &[usize], k: usize) -> Result<ClassificationMetrics> {
    if pred.is_empty() {
        return Err(Error::contract("metrics need at least one prediction"));
    }
    if pred.len() != truth.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c >= k) {
        return Err(Error::contract(format!("class {bad} out of range for {k} classes")));
    }
    let mut tp = vec![0usize; k];
    let mut pc = vec![0usize; k];
    let mut tc = vec![0usize; k];
    for (&p, &t) in pred.iter().zip(truth) {
        pc[p] += 1;
        tc[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let f1_sum: f64 = (0..k)
        .map(|c| {
            let denom = pc[c] + tc[c];
            if denom == 0 {
                0.0
            } else {
                (2 * tp[c]) as f64 / denom as f64
            }
        })
        .sum();
    Ok(ClassificationMetrics {
        f1: f1_sum / k as f64,
        accuracy: correct as f64 / pred.len() as f64,
    })
}

/// Pixel counts behind Dice and IoU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: usize,
    pub predicted: usize,
    pub truth: usize,
}

impl Overlap {
    pub fn union(&self) -> usize {
        self.predicted + self.truth - self.intersection
    }

    pub fn dice(&self) -> f64 {
        match self.predicted + self.truth {
            0 => 1.0,
            s => (2 * self.intersection) as f64 / s as f64,
        }
    }

    pub fn iou(&self) -> f64 {
        match self.union() {
            0 => 1.0,
            u => self.intersection as f64 / u as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentationMetrics {
    pub dice: f64,
    pub iou: f64,
}

pub fn overlap<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<Overlap> {
    pred.expect_same_shape(truth)?;
    let half = T::from_f64_lossy(0.5);
    let mut o = Overlap {
        intersection: 0,
        predicted: 0,
        truth: 0,
    };
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (p, t) = (p > half, t > half);
        o.predicted += p as usize;
        o.truth += t as usize;
        o.intersection += (p && t) as usize;
    }
    Ok(o)
}

/// Dice and IoU of two binary masks; both are 1 when both masks are empty.
pub fn segmentation_metrics<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<SegmentationMetrics> {
    let o = overlap(pred, truth)?;
    Ok(SegmentationMetrics {
        dice: o.dice(),
        iou: o.iou(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

const KFOLD_STREAM: u64 = 0x6b66_6f6c_64;

/// Shuffles `0..n` with `seed` and cuts it into `k` test folds whose sizes
/// differ by at most one (the first `n % k` folds are larger).
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::contract(format!("k-fold needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::contract(format!("cannot split {n} samples into {k} folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    XorShift64Star::stream(seed, KFOLD_STREAM).shuffle(&mut perm);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = n / k + usize::from(i < n % k);
        let mut test = perm[start..start + len].to_vec();
        let mut train: Vec<usize> = perm[..start].iter().chain(&perm[start + len..]).copied().collect();
        test.sort_unstable();
        train.sort_unstable();
        folds.push(Fold { train, test });
        start += len;
    }
    Ok(folds)
}

/// Stacks `[1, H, W]` images into `[B, 1, H, W]`.
pub fn stack_images<T: Scalar>(samples: &[&Sample]) -> Result<Tensor<T>> {
    stack(samples.iter().map(|s| &s.image))
}

fn stack<'a, T: Scalar>(mut ts: impl ExactSizeIterator<Item = &'a Tensor<f32>>) -> Result<Tensor<T>> {
    let b = ts.len();
    let first = ts.next().ok_or_else(|| Error::contract("empty batch"))?;
    let dims = first.dims().to_vec();
    let mut data: Vec<T> = Vec::with_capacity(b * first.numel());
    data.extend(first.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
    for t in ts {
        if t.dims() != dims.as_slice() {
            return Err(Error::shape("images in a batch must share a shape"));
        }
        data.extend(t.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    let mut out = vec![b];
    out.extend(dims);
    Tensor::from_vec(out, data)
}

fn task_loss(task: TaskKind) -> LossKind {
    match task {
        TaskKind::Classification => LossKind::CrossEntropy,
        TaskKind::Segmentation => LossKind::Dice,
    }
}

fn batch_loss<T: Scalar>(
    model: &ModelHandle<T>,
    ctx: &mut Ctx<'_, T>,
    batch: &[&Sample],
    loss: LossKind,
) -> Result<crate::autodiff::Var> {
    let x = stack_images::<T>(batch)?;
    let scores = model.forward(ctx, &x)?;
    match loss {
        LossKind::CrossEntropy => {
            let labels: Vec<usize> = batch
                .iter()
                .map(|s| s.label().ok_or_else(|| Error::Spec("cross-entropy needs labelled samples".into())))
                .collect::<Result<_>>()?;
            ctx.tape.cross_entropy(scores, &labels)
        }
        LossKind::Dice => {
            let masks: Vec<&Tensor<f32>> = batch
                .iter()
                .map(|s| s.mask().ok_or_else(|| Error::Spec("Dice loss needs masks".into())))
                .collect::<Result<_>>()?;
            let g = stack::<T>(masks.into_iter())?;
            ctx.tape.dice_loss(scores, &g)
        }
    }
}

/// Mean training loss of every epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

/// Trains `model` in place. Each epoch reshuffles the samples, optionally
/// augments them, and drops a trailing batch of one (BatchNorm needs two).
/// A non-finite loss stops training with [`Error::Diverged`].
pub fn train_model<T: Scalar>(
    model: &mut ModelHandle<T>,
    samples: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    cfg.validate()?;
    if samples.len() < 2 {
        return Err(Error::contract("training needs at least two samples"));
    }
    let mut state = AdamState::new(&model.params);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = XorShift64Star::stream(seed, epoch as u64);
        rng.shuffle(&mut order);
        let epoch_samples: Vec<Sample> = order
            .iter()
            .map(|&i| {
                if cfg.augment {
                    data::augment(&samples[i], AugmentKinds::ALL, &mut rng)
                } else {
                    samples[i].clone()
                }
            })
            .collect();
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in epoch_samples.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Sample> = chunk.iter().collect();
            let mut ctx = Ctx::new(&model.params, Mode::Train);
            let loss = batch_loss(model, &mut ctx, &batch, cfg.loss)?;
            let value = ctx.tape.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            let (mut tape, stats) = ctx.into_parts();
            let grads = tape.backward(loss)?;
            drop(tape);
            model.params.zero_grads();
            model.params.accumulate(&grads);
            model.params.apply_stats(stats);
            adam_step(&mut model.params, &mut state, cfg.lr, &cfg.adam);
            total += value;
            batches += 1;
        }
        log.epoch_loss.push(total / batches.max(1) as f64);
    }
    Ok(log)
}

/// Eval-mode predictions: class indices, or binary masks (score > 0, i.e.
/// sigmoid > 0.5) as `[1, H, W]` tensors.
pub fn predict<T: Scalar>(model: &ModelHandle<T>, samples: &[Sample], batch_size: usize) -> Result<Vec<Target>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let x = stack_images::<T>(&batch)?;
        let mut ctx = Ctx::new(&model.params, Mode::Eval);
        let scores = model.forward(&mut ctx, &x)?;
        let s = ctx.tape.value(scores);
        let per = s.numel() / chunk.len();
        for row in s.data().chunks(per) {
            out.push(if model.spec.task.is_segmentation() {
                let (_, h, w) = (1, x.dims()[2], x.dims()[3]);
                let m = row.iter().map(|&v| if v > T::zero() { 1.0f32 } else { 0.0 }).collect();
                Target::Mask(Tensor::from_vec([1, h, w], m)?)
            } else {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
                Target::Label(best)
            });
        }
    }
    Ok(out)
}

/// Metrics of `model` on `samples`: `[f1, accuracy]` for classification,
/// per-image mean `[dice, iou]` for segmentation.
pub fn evaluate<T: Scalar>(model: &ModelHandle<T>, samples: &[Sample], batch_size: usize) -> Result<[f64; 2]> {
    let preds = predict(model, samples, batch_size)?;
    match model.spec.task {
        Task::Classification(k) => {
            let p: Vec<usize> = preds.iter().filter_map(|t| match t {
                Target::Label(l) => Some(*l),
                Target::Mask(_) => None,
            }).collect();
            let t: Vec<usize> = samples
                .iter()
                .map(|s| s.label().ok_or_else(|| Error::Spec("classification needs labels".into())))
                .collect::<Result<_>>()?;
            let m = classification_metrics(&p, &t, k)?;
            Ok([m.f1, m.accuracy])
        }
        Task::Segmentation(_) => {
            let mut sum = [0.0; 2];
            for (p, s) in preds.iter().zip(samples) {
                let (Target::Mask(p), Some(t)) = (p, s.mask()) else {
                    return Err(Error::Spec("segmentation needs masks".into()));
                };
                let m = segmentation_metrics(p, t)?;
                sum[0] += m.dice;
                sum[1] += m.iou;
            }
            let n = samples.len().max(1) as f64;
            Ok([sum[0] / n, sum[1] / n])
        }
    }
}

/// One (variant, fold) outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldRecord {
    pub fold: usize,
    pub outcome: std::result::Result<[f64; 2], String>,
}

/// Per-fold and aggregate metrics of one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub model: String,
    pub variant: Variant,
    pub metric_names: [&'static str; 2],
    pub folds: Vec<FoldRecord>,
}

pub fn metric_names(task: Task) -> [&'static str; 2] {
    if task.is_segmentation() {
        ["Dice", "IoU"]
    } else {
        ["F1", "Accuracy"]
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

impl MetricReport {
    /// Mean and population std per metric over the folds that finished.
    pub fn aggregate(&self) -> [Option<(f64, f64)>; 2] {
        let ok: Vec<[f64; 2]> = self.folds.iter().filter_map(|f| f.outcome.clone().ok()).collect();
        [0, 1].map(|i| mean_std(&ok.iter().map(|v| v[i]).collect::<Vec<_>>()))
    }

    pub fn failed_folds(&self) -> usize {
        self.folds.iter().filter(|f| f.outcome.is_err()).count()
    }

    fn cells(&self) -> [String; 2] {
        self.aggregate().map(|a| match a {
            Some((m, s)) => format!("{m:.3} ± {s:.3}"),
            None => "failed".to_string(),
        })
    }
}

fn check_uniform(reports: &[MetricReport]) -> Result<[&'static str; 2]> {
    let first = reports.first().ok_or_else(|| Error::contract("no reports to render"))?;
    if reports.iter().any(|r| r.metric_names != first.metric_names) {
        return Err(Error::contract("reports mix classification and segmentation metrics"));
    }
    Ok(first.metric_names)
}

/// `Model  Type  metric1  metric2` as tab-separated values.
pub fn render_tsv(reports: &[MetricReport]) -> Result<String> {
    let [a, b] = check_uniform(reports)?;
    let mut s = format!("Model\tType\t{a}\t{b}\n");
    for r in reports {
        let [x, y] = r.cells();
        writeln!(s, "{}\t{}\t{x}\t{y}", r.model, r.variant).expect("string write");
    }
    Ok(s)
}

/// The same table with space-aligned columns.
pub fn render_table(reports: &[MetricReport]) -> Result<String> {
    let [a, b] = check_uniform(reports)?;
    let mut rows = vec![["Model".to_string(), "Type".to_string(), a.to_string(), b.to_string()]];
    for r in reports {
        let [x, y] = r.cells();
        rows.push([r.model.clone(), r.variant.to_string(), x, y]);
    }
    let widths: Vec<usize> = (0..4).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut s = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
            .collect();
        s.push_str(line.join("  ").trim_end());
        s.push('\n');
    }
    Ok(s)
}

/// One line per (variant, fold) with full-precision values.
pub fn render_folds_tsv(reports: &[MetricReport]) -> Result<String> {
    let [a, b] = check_uniform(reports)?;
    let mut s = format!("Model\tType\tFold\t{a}\t{b}\tStatus\n");
    for r in reports {
        for f in &r.folds {
            match &f.outcome {
                Ok([x, y]) => writeln!(s, "{}\t{}\t{}\t{x}\t{y}\tok", r.model, r.variant, f.fold),
                Err(e) => writeln!(s, "{}\t{}\t{}\t\t\tfailed: {e}", r.model, r.variant, f.fold),
            }
            .expect("string write");
        }
    }
    Ok(s)
}

/// Seed for the model and the training shuffle of one (variant, fold).
pub fn job_seed(seed: u64, variant_index: usize, fold: usize) -> u64 {
    splitmix64(seed ^ splitmix64(((variant_index as u64) << 32) | fold as u64))
}

/// Options for [`run_experiment_with`].
#[derive(Clone, Copy, Debug)]
pub struct ExperimentOptions {
    /// Concurrent (variant, fold) jobs; 1 runs them in order on the caller.
    pub jobs: usize,
    /// Train on only the first `max_folds` folds (all when `None`).
    pub max_folds: Option<usize>,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            jobs: 1,
            max_folds: None,
        }
    }
}

/// Cross-validates every variant on the generated dataset. Each (variant,
/// fold) starts from a fresh model seeded by [`job_seed`]; a divergent fold
/// is recorded as failed instead of aborting the sweep.
pub fn run_experiment(
    arch: &ArchSpec,
    variants: &[Variant],
    data: &DatasetSpec,
    cfg: &TrainConfig,
) -> Result<Vec<MetricReport>> {
    run_experiment_with(arch, variants, data, cfg, ExperimentOptions::default(), |_, _, _| Ok(()))
}

/// [`run_experiment`] with job control and a callback that receives every
/// trained model (for checkpointing).
pub fn run_experiment_with<F>(
    arch: &ArchSpec,
    variants: &[Variant],
    data: &DatasetSpec,
    cfg: &TrainConfig,
    opts: ExperimentOptions,
    on_model: F,
) -> Result<Vec<MetricReport>>
where
    F: Fn(usize, usize, &ModelHandle<f32>) -> Result<()> + Sync + Send,
{
    cfg.validate()?;
    if task_loss(data.task) != cfg.loss || arch.task.is_segmentation() != (data.task == TaskKind::Segmentation) {
        return Err(Error::Spec("architecture task, loss and dataset task disagree".into()));
    }
    for &v in variants {
        models::plan_checked(arch, v)?;
    }
    let samples = data::generate(data)?;
    let folds = kfold_split(samples.len(), cfg.folds.max(2), cfg.seed)?;
    let nf = opts.max_folds.map_or(folds.len(), |m| m.min(folds.len()));
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let results = parallel::map_range_jobs(variants.len() * nf, opts.jobs, |job| {
        let (vi, fi) = (job / nf, job % nf);
        let seed = job_seed(cfg.seed, vi, fi);
        let run = || -> Result<[f64; 2]> {
            let mut model = models::build::<f32>(arch, variants[vi], seed)?;
            train_model(&mut model, &pick(&folds[fi].train), cfg, seed)?;
            let metrics = evaluate(&model, &pick(&folds[fi].test), cfg.batch_size)?;
            on_model(vi, fi, &model)?;
            Ok(metrics)
        };
        match run() {
            Ok(m) => Ok(FoldRecord { fold: fi, outcome: Ok(m) }),
            Err(e @ Error::Diverged { .. }) => Ok(FoldRecord {
                fold: fi,
                outcome: Err(e.to_string()),
            }),
            Err(e) => Err(e),
        }
    });
    let mut results = results.into_iter();
    variants
        .iter()
        .map(|&variant| {
            let folds = results.by_ref().take(nf).collect::<Result<Vec<_>>>()?;
            Ok(MetricReport {
                model: arch.family.display_name().to_string(),
                variant,
                metric_names: metric_names(arch.task),
                folds,
            })
        })
        .collect()
}
