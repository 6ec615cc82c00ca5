//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use cxnn::autodiff::ParamValue;
use cxnn::conv::{self, reference, ConvGeom};
use cxnn::data::{self, DatasetSpec, Sample};
use cxnn::gradcheck;
use cxnn::io;
use cxnn::models::{self, ArchSpec, Family, Task, Variant};
use cxnn::train::{self, FoldRecord, MetricReport, TrainConfig};
use cxnn::{ComplexTensor, Tensor, XorShift64Star};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel_norm_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

fn random_vec(rng: &mut XorShift64Star, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn conv_oracle_equivalence() -> Outcome {
    let mut rng = XorShift64Star::new(2024);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    let mut done = 0;
    while done < 200 {
        let (b, c, o) = (1 + rng.below(4), 1 + rng.below(8), 1 + rng.below(8));
        let (h, w) = (1 + rng.below(16), 1 + rng.below(16));
        let (k, s, p) = (1 + rng.below(5), 1 + rng.below(2), rng.below(3));
        if h + 2 * p < k || w + 2 * p < k {
            continue;
        }
        let g = ConvGeom::square(k, s, p);
        let xd = [b, c, h, w];
        let wd = [o, c, k, k];
        let (xr, xi) = (random_vec(&mut rng, b * c * h * w), random_vec(&mut rng, b * c * h * w));
        let (wr, wi) = (random_vec(&mut rng, o * c * k * k), random_vec(&mut rng, o * c * k * k));

        let x64 = ComplexTensor::from_parts(Tensor::from_vec(xd, xr.clone()).unwrap(), Tensor::from_vec(xd, xi.clone()).unwrap()).unwrap();
        let w64 = ComplexTensor::from_parts(Tensor::from_vec(wd, wr.clone()).unwrap(), Tensor::from_vec(wd, wi.clone()).unwrap()).unwrap();
        let y64 = conv::conv2d_complex(&x64, &w64, None, g).unwrap();
        let (rr, ri) = reference::conv2d_complex(&xr, &xi, xd, &wr, &wi, wd, g);
        let mut got = y64.re.data().to_vec();
        got.extend_from_slice(y64.im.data());
        let mut want = rr;
        want.extend(ri);
        worst64 = worst64.max(rel_norm_error(&got, &want));

        let (x32, w32) = (x64.cast_f32(), w64.cast_f32());
        let y = conv::conv2d_complex(&x32, &w32, None, g).unwrap();
        let yb = conv::conv2d_complex_block(&x32, &w32, g).unwrap();
        let mut a = to_f64(&y.re);
        a.extend(to_f64(&y.im));
        let mut bb = to_f64(&yb.re);
        bb.extend(to_f64(&yb.im));
        worst32 = worst32.max(rel_norm_error(&a, &bb));
        done += 1;
    }
    outcome(
        worst32 < 1e-6 && worst64 < 1e-12,
        format!("200 configs; f32 vs block {worst32:.2e} (< 1e-6), f64 vs nested loops {worst64:.2e} (< 1e-12)"),
    )
}

trait CastF32 {
    fn cast_f32(&self) -> ComplexTensor<f32>;
}

impl CastF32 for ComplexTensor<f64> {
    fn cast_f32(&self) -> ComplexTensor<f32> {
        ComplexTensor::from_parts(self.re.cast(), self.im.cast()).unwrap()
    }
}

fn gradient_correctness() -> Outcome {
    let mut worst = 0.0f64;
    let mut worst_case = String::new();
    let mut failures = Vec::new();
    let cases = gradcheck::all_cases();
    for &case in &cases {
        for seed in 0..20 {
            match gradcheck::check(case, seed) {
                Ok(r) => {
                    if r.max_rel_error > worst {
                        worst = r.max_rel_error;
                        worst_case = format!("{case:?} seed {seed}");
                    }
                    if !(r.max_rel_error < 1e-6) {
                        failures.push(format!("{case:?}/{seed}: {:.2e}", r.max_rel_error));
                    }
                }
                Err(e) => failures.push(format!("{case:?}/{seed}: {e}")),
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{} layer/loss cases x 20 instances, eps {}; worst {worst:.2e} ({worst_case}){}",
            cases.len(),
            gradcheck::FD_EPS,
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    )
}

fn parameter_accounting() -> Outcome {
    let targets = [
        (Family::ResNet18, 11.4e6, 0.05),
        (Family::ResNet34, 21.5e6, 0.05),
        (Family::ResNet50, 23.9e6, 0.05),
        (Family::UNet, 31.4e6, 0.10),
        (Family::AttentionUNet, 34.3e6, 0.10),
        (Family::ReconResNet, 17.3e6, 0.10),
    ];
    let mut ok = true;
    let mut detail = Vec::new();
    for (family, target, tol) in targets {
        let real = models::plan(&ArchSpec::canonical(family), Variant::Real).unwrap().trainable as f64;
        let ratio = real / target;
        ok &= (ratio - 1.0).abs() <= tol;
        detail.push(format!("{} {:.2}M ({ratio:.3})", family.display_name(), real / 1e6));
        for width in [2, 4, 8, 16, 32, 64] {
            let spec = ArchSpec::canonical(family).with_base_width(width);
            let r = models::plan(&spec, Variant::Real).unwrap().trainable;
            let c = models::plan(&spec, Variant::Complex).unwrap().trainable;
            let w = models::plan(&spec, Variant::WidenedReal(2.0)).unwrap().trainable;
            let widened_ok = (w as f64 - c as f64).abs() <= 0.03 * c as f64;
            if c != 2 * r || !widened_ok {
                ok = false;
                detail.push(format!("{} width {width}: real {r} complex {c} widened {w}", family.display_name()));
            }
        }
    }
    outcome(ok, format!("{}; Complex = 2 x Real and CNNx2 within 3% at widths 2..64", detail.join(", ")))
}

fn split(samples: &[Sample], seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let f = &train::kfold_split(samples.len(), 5, seed).unwrap()[0];
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    (pick(&f.train), pick(&f.test))
}

fn desk_scale_training() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();

    let samples = data::generate(&DatasetSpec::classification(300, 64, 42)).unwrap();
    let (tr, te) = split(&samples, 42);
    let arch = ArchSpec::new(Family::ResNet18, Task::Classification(3))
        .with_base_width(8)
        .with_depth(vec![1, 1, 1, 1]);
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 16,
        lr: 1e-3,
        seed: 42,
        ..TrainConfig::classification()
    };
    for v in [Variant::Real, Variant::Complex] {
        let t = Instant::now();
        let mut m = models::build::<f32>(&arch, v, train::job_seed(42, 0, 0)).unwrap();
        let acc = train::train_model(&mut m, &tr, &cfg, 42)
            .and_then(|_| train::evaluate(&m, &te, 64))
            .map(|r| r[1]);
        match acc {
            Ok(a) => {
                ok &= a >= 0.90;
                detail.push(format!("ResNet18/8 {v} accuracy {a:.3} ({:.0}s)", t.elapsed().as_secs_f64()));
            }
            Err(e) => {
                ok = false;
                detail.push(format!("ResNet18/8 {v}: {e}"));
            }
        }
    }

    let samples = data::generate(&DatasetSpec::segmentation(300, 32, 42)).unwrap();
    let (tr, te) = split(&samples, 42);
    let arch = ArchSpec::new(Family::UNet, Task::Segmentation(1)).with_base_width(8).with_depth(vec![2]);
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 16,
        lr: 3e-3,
        seed: 42,
        ..TrainConfig::segmentation()
    };
    for v in Variant::TRIPLET {
        let t = Instant::now();
        let mut m = models::build::<f32>(&arch, v, train::job_seed(42, 0, 0)).unwrap();
        let dice = train::train_model(&mut m, &tr, &cfg, 42)
            .and_then(|_| train::evaluate(&m, &te, 64))
            .map(|r| r[0]);
        match dice {
            Ok(d) => {
                ok &= d >= 0.85;
                detail.push(format!("UNet/8 {v} Dice {d:.3} ({:.0}s)", t.elapsed().as_secs_f64()));
            }
            Err(e) => {
                ok = false;
                detail.push(format!("UNet/8 {v}: {e}"));
            }
        }
    }
    outcome(ok, format!("held-out fold of 5, 20 epochs; {}", detail.join(", ")))
}

fn protocol_report() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();

    let fake = MetricReport {
        model: "ResNet18".into(),
        variant: Variant::Real,
        metric_names: ["F1", "Accuracy"],
        folds: vec![
            FoldRecord { fold: 0, outcome: Ok([0.625, 0.5]) },
            FoldRecord { fold: 1, outcome: Ok([0.875, 1.0]) },
        ],
    };
    // mean (0.625 + 0.875) / 2 = 0.75, population std 0.125; accuracy 0.75 +/- 0.25
    ok &= fake.aggregate() == [Some((0.75, 0.125)), Some((0.75, 0.25))];
    ok &= train::render_tsv(&[fake]).unwrap() == "Model\tType\tF1\tAccuracy\nResNet18\tCNN\t0.750 ± 0.125\t0.750 ± 0.250\n";

    for n in [90, 300, 900] {
        let folds = train::kfold_split(n, 2, 42).unwrap();
        let mut seen = vec![0; n];
        folds.iter().flat_map(|f| &f.test).for_each(|&i| seen[i] += 1);
        ok &= seen.iter().all(|&c| c == 1) && folds.iter().all(|f| f.train.iter().all(|i| !f.test.contains(i)));
    }

    let sweeps = [
        (
            ArchSpec::new(Family::ResNet18, Task::Classification(3)).with_base_width(8).with_depth(vec![1, 1, 1, 1]),
            DatasetSpec::classification(300, 64, 42),
            TrainConfig { epochs: 2, batch_size: 16, lr: 1e-3, folds: 2, seed: 42, ..TrainConfig::classification() },
            ["F1", "Accuracy"],
        ),
        (
            ArchSpec::new(Family::UNet, Task::Segmentation(1)).with_base_width(8).with_depth(vec![2]),
            DatasetSpec::segmentation(300, 32, 42),
            TrainConfig { epochs: 2, batch_size: 16, lr: 3e-3, folds: 2, seed: 42, ..TrainConfig::segmentation() },
            ["Dice", "IoU"],
        ),
    ];
    for (arch, data, cfg, names) in sweeps {
        match train::run_experiment(&arch, &Variant::TRIPLET, &data, &cfg) {
            Ok(reports) => {
                let table = train::render_table(&reports).unwrap();
                let rows: Vec<String> = train::render_tsv(&reports)
                    .unwrap()
                    .lines()
                    .map(|l| l.split('\t').collect::<Vec<_>>().join("|"))
                    .collect();
                let shape_ok = rows.len() == 4
                    && rows[0] == format!("Model|Type|{}|{}", names[0], names[1])
                    && reports.iter().map(|r| r.variant.to_string()).collect::<Vec<_>>() == ["CNN", "CNNx2", "CV-CNN"]
                    && reports.iter().all(|r| r.folds.len() == 2 && r.aggregate().iter().all(Option::is_some));
                let agg_ok = reports.iter().all(|r| {
                    let vals: Vec<[f64; 2]> = r.folds.iter().filter_map(|f| f.outcome.clone().ok()).collect();
                    (0..2).all(|i| {
                        let (a, b) = (vals[0][i], vals[1][i]);
                        let (m, s) = r.aggregate()[i].unwrap();
                        m == (a + b) / 2.0 && s == (((a - m) * (a - m) + (b - m) * (b - m)) / 2.0).sqrt()
                    })
                });
                ok &= shape_ok && agg_ok;
                detail.push(format!("{}: {}", arch.family.display_name(), table.lines().skip(1).map(str::trim).collect::<Vec<_>>().join("; ")));
            }
            Err(e) => {
                ok = false;
                detail.push(format!("{}: {e}", arch.family.display_name()));
            }
        }
    }
    outcome(ok, format!("fake-fold aggregates exact, folds disjoint; 2-fold sweeps (2 epochs) {}", detail.join(" | ")))
}

fn brute_force_classification(pred: &[usize], truth: &[usize], k: usize) -> (f64, f64) {
    let mut cm = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        cm[t][p] += 1;
    }
    let mut f1 = 0.0;
    for c in 0..k {
        let tp = cm[c][c];
        let fp: usize = (0..k).filter(|&r| r != c).map(|r| cm[r][c]).sum();
        let fneg: usize = (0..k).filter(|&p| p != c).map(|p| cm[c][p]).sum();
        if tp + fp + fneg > 0 {
            f1 += (2 * tp) as f64 / (2 * tp + fp + fneg) as f64;
        }
    }
    let correct: usize = (0..k).map(|c| cm[c][c]).sum();
    (f1 / k as f64, correct as f64 / pred.len() as f64)
}

fn metric_oracles() -> Outcome {
    let mut rng = XorShift64Star::new(77);
    let mut mismatches = 0;
    let mut identity_failures = 0;
    for _ in 0..1000 {
        let k = 2 + rng.below(4);
        let n = 1 + rng.below(40);
        let pred: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let m = train::classification_metrics(&pred, &truth, k).unwrap();
        let (f1, acc) = brute_force_classification(&pred, &truth, k);
        mismatches += usize::from(m.f1 != f1 || m.accuracy != acc);

        let len = 1 + rng.below(64);
        let p_bits: Vec<bool> = (0..len).map(|_| rng.below(3) == 0).collect();
        let t_bits: Vec<bool> = (0..len).map(|_| rng.below(2) == 0).collect();
        let to_t = |b: &[bool]| Tensor::from_vec([b.len()], b.iter().map(|&x| x as u8 as f64).collect()).unwrap();
        let s = train::segmentation_metrics(&to_t(&p_bits), &to_t(&t_bits)).unwrap();
        let inter = p_bits.iter().zip(&t_bits).filter(|(a, b)| **a && **b).count();
        let union = p_bits.iter().zip(&t_bits).filter(|(a, b)| **a || **b).count();
        let (np, nt) = (p_bits.iter().filter(|b| **b).count(), t_bits.iter().filter(|b| **b).count());
        let (dice, iou) = if union == 0 {
            (1.0, 1.0)
        } else {
            ((2 * inter) as f64 / (np + nt) as f64, inter as f64 / union as f64)
        };
        mismatches += usize::from(s.dice != dice || s.iou != iou);
        // dice = 2i/(np+nt) and iou = i/u; dice/(2 - dice) = i/(np+nt-i), which
        // equals iou exactly iff np + nt - i = u as integers
        if union > 0 && (np + nt - inter != union || (s.iou - s.dice / (2.0 - s.dice)).abs() > 4.0 * f64::EPSILON) {
            identity_failures += 1;
        }
    }
    outcome(
        mismatches == 0 && identity_failures == 0,
        format!("1000 classification + 1000 mask instances: {mismatches} mismatches, {identity_failures} identity failures"),
    )
}

fn tree_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism_and_format() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut checks = Vec::new();

    let spec = DatasetSpec::segmentation(12, 16, 42);
    for run in ["a", "b"] {
        io::save_dataset(root.join(format!("data-{run}")), &data::generate(&spec).unwrap()).unwrap();
    }
    checks.push(("datasets", tree_bytes(&root.join("data-a")) == tree_bytes(&root.join("data-b"))));

    let arch = ArchSpec::new(Family::UNet, Task::Segmentation(1)).with_base_width(4).with_depth(vec![1]);
    let cfg = TrainConfig { epochs: 2, batch_size: 4, lr: 1e-3, folds: 2, seed: 42, ..TrainConfig::segmentation() };
    let samples = data::generate(&spec).unwrap();
    for run in ["a", "b"] {
        let mut m = models::build::<f32>(&arch, Variant::Complex, 9).unwrap();
        train::train_model(&mut m, &samples, &cfg, 9).unwrap();
        io::save_checkpoint(root.join(format!("ckpt-{run}")), &m).unwrap();
    }
    checks.push(("checkpoints", tree_bytes(&root.join("ckpt-a")) == tree_bytes(&root.join("ckpt-b"))));

    let reports: Vec<String> = (0..2)
        .map(|_| {
            let r = train::run_experiment(&arch, &Variant::TRIPLET, &spec, &cfg).unwrap();
            train::render_tsv(&r).unwrap() + &train::render_table(&r).unwrap() + &train::render_folds_tsv(&r).unwrap()
        })
        .collect();
    checks.push(("reports", reports[0] == reports[1]));

    let mut rng = XorShift64Star::new(5);
    let mut exact = true;
    for i in 0..50 {
        let dims: Vec<usize> = (0..1 + rng.below(4)).map(|_| 1 + rng.below(5)).collect();
        let n: usize = dims.iter().product();
        let bits64 = |rng: &mut XorShift64Star| -> Vec<f64> { (0..n).map(|_| f64::from_bits(rng.next_u64())).collect() };
        let v64 = if i % 2 == 0 {
            ParamValue::Real(Tensor::from_vec(dims.clone(), bits64(&mut rng)).unwrap())
        } else {
            ParamValue::Complex(ComplexTensor::from_parts(
                Tensor::from_vec(dims.clone(), bits64(&mut rng)).unwrap(),
                Tensor::from_vec(dims.clone(), bits64(&mut rng)).unwrap(),
            ).unwrap())
        };
        let v32 = ParamValue::Real(Tensor::from_vec(dims.clone(), (0..n).map(|_| f32::from_bits(rng.next_u64() as u32)).collect()).unwrap());
        let same64 = |a: &ParamValue<f64>, b: &ParamValue<f64>| {
            a.domain() == b.domain()
                && a.planes().iter().zip(b.planes()).all(|(x, y)| x.dims() == y.dims() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()))
        };
        exact &= same64(&io::decode_as::<f64>(&io::encode(&v64)).unwrap(), &v64);
        let back32 = io::decode_as::<f32>(&io::encode(&v32)).unwrap();
        exact &= back32.planes()[0].data().iter().zip(v32.planes()[0].data()).all(|(p, q)| p.to_bits() == q.to_bits());
        exact &= io::encode(&v64) == io::encode(&io::decode_as::<f64>(&io::encode(&v64)).unwrap());
    }
    checks.push(("cxt round trip", exact));

    let base = io::encode(&ParamValue::Complex(
        ComplexTensor::from_parts(Tensor::from_vec([2, 3, 2], random_vec(&mut rng, 12)).unwrap(), Tensor::from_vec([2, 3, 2], random_vec(&mut rng, 12)).unwrap()).unwrap(),
    ));
    let mut panics = 0;
    let mut rejected = 0;
    for _ in 0..10_000 {
        let mut b = base.clone();
        for _ in 0..1 + rng.below(4) {
            match rng.below(3) {
                0 => {
                    let i = rng.below(b.len());
                    b[i] = rng.next_u64() as u8;
                }
                1 => b.truncate(rng.below(b.len() + 1)),
                _ => b.extend((0..rng.below(9)).map(|_| rng.next_u64() as u8)),
            }
            if b.is_empty() {
                break;
            }
        }
        match catch_unwind(AssertUnwindSafe(|| io::decode(&b))) {
            Ok(Ok(_)) => {}
            Ok(Err(_)) => rejected += 1,
            Err(_) => panics += 1,
        }
    }
    checks.push(("fuzz", panics == 0));

    let pass = checks.iter().all(|(_, ok)| *ok);
    let list: Vec<String> = checks.iter().map(|(n, ok)| format!("{n} {}", if *ok { "ok" } else { "MISMATCH" })).collect();
    outcome(pass, format!("{}; 10000 mutations, {rejected} rejected, {panics} panics", list.join(", ")))
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("1 complex conv oracle equivalence", conv_oracle_equivalence),
        ("2 gradient correctness", gradient_correctness),
        ("3 parameter accounting", parameter_accounting),
        ("4 desk-scale training", desk_scale_training),
        ("5 experimental protocol report", protocol_report),
        ("6 metric oracles", metric_oracles),
        ("7 determinism and format", determinism_and_format),
    ];
    let mut failed = false;
    for (name, f) in criteria {
        if !args.is_empty() && !args.iter().any(|a| name.starts_with(a.as_str())) {
            continue;
        }
        let t = Instant::now();
        let o = catch_unwind(f).unwrap_or_else(|_| outcome(false, "panicked"));
        failed |= !o.pass;
        println!(
            "{} criterion {name} [{:.1}s]: {}",
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if failed {
        std::process::exit(1);
    }
}
