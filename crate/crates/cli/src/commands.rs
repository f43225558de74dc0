use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use rdns_core::densenet::checkpoint::{load, save};
use rdns_core::densenet::{Checkpoint, DenseNetConfig};
use rdns_core::gradcheck::{run_gradcheck, GradcheckOptions};
use rdns_core::pipeline::classifier::{CropConfig, CLASSIFIER_KIND};
use rdns_core::pipeline::detector::DETECTOR_KIND;
use rdns_core::pipeline::{
    evaluate_classifier, evaluate_detector, train_classifier, train_detector, Classifier, ClassifierReport,
    DetectorConfig, DetectorReport, LabelOracle, MiniDetector, TrainConfig, TrainLog, TruthOracle,
};
use rdns_core::roi::{roi_align, roi_pool, RoIBox, RoiSpec};

use rdns_core::synth::{export_dataset, generate_dataset, import_dataset, Case, Dataset, DatasetSpec, MANIFEST};
use rdns_core::{Rng, Shape, Tensor};

use crate::{EvalArgs, GenDataArgs, GradcheckArgs, ModelKind, RoiDemoArgs, SplitArg, TrainArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] rdns_core::Error),
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        use rdns_core::Error as E;
        match self {
            CliError::Verification(_) => ExitCode::from(1),
            CliError::Core(E::Training { .. } | E::Numeric(_)) => ExitCode::from(3),
            CliError::Usage(_) | CliError::Core(_) => ExitCode::from(2),
        }
    }
}

type Outcome = Result<ExitCode, CliError>;

/// Worker cap from `RDNS_THREADS`. Everything runs on one thread, which
/// every valid cap admits.
pub fn threads() -> Result<usize, CliError> {
    match std::env::var("RDNS_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!(
                "RDNS_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

/// Rejects a file path, or a non-empty directory without `--force`.
/// Creates nothing.
fn check_out_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
        }
        if !force && fs::read_dir(dir)?.next().is_some() {
            return Err(CliError::Usage(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    if !dir.join(MANIFEST).is_file() {
        return Err(CliError::Usage(format!(
            "no dataset at {} (missing {MANIFEST})",
            dir.display()
        )));
    }
    Ok(import_dataset(dir)?)
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> rdns_core::Result<()>) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "undefined".into())
}

pub fn gen_data(a: GenDataArgs) -> Outcome {
    let spec = DatasetSpec {
        count: a.count,
        benign_count: a.benign,
        malignant_count: a.malignant,
        image_size: a.image_size,
        master_seed: a.seed,
        ..DatasetSpec::default()
    };
    spec.validate()?;
    check_out_dir(&a.out, a.force)?;
    let d = generate_dataset(&spec)?;
    if a.out.is_dir() {
        for entry in fs::read_dir(&a.out)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if name == MANIFEST || (name.starts_with("case_") && name.ends_with(".bin")) {
                fs::remove_file(&path)?;
            }
        }
    }
    export_dataset(&d, &a.out)?;
    println!("cases {}", d.len());
    println!("train {}", d.train.len());
    println!("validation {}", d.validation.len());
    Ok(ExitCode::SUCCESS)
}

fn print_epochs(log: &TrainLog) {
    for e in &log.epochs {
        let mut line = format!("epoch {} train_loss {:.6}", e.epoch, e.train.total());
        for (name, v) in log.metric_names.iter().zip(&e.metrics) {
            line.push_str(&format!(" {name} {}", fmt_opt(*v)));
        }
        println!("{line}");
    }
}

pub fn train(a: TrainArgs) -> Outcome {
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    check_out_dir(&a.out, a.force)?;
    let d = load_dataset(&a.dataset)?;
    let (ckpt, log, best_epoch): (Checkpoint, TrainLog, Option<usize>) = match a.kind {
        ModelKind::Classifier => {
            let mut net = DenseNetConfig {
                growth_rate: a.k,
                compression: a.theta,
                ..DenseNetConfig::micro()
            };
            if let Some(b) = a.blocks {
                net.block_layers = b;
            }
            let mut run = train_classifier(&d, &net, &CropConfig::default(), &cfg)?;
            (run.best.to_checkpoint()?, run.log, run.best_epoch)
        }
        ModelKind::Detector => {
            let block_layers = match a.blocks.as_deref() {
                None => DetectorConfig::default().block_layers,
                Some([one]) => *one,
                Some(_) => return Err(CliError::Usage("the detector trunk has exactly one dense block".into())),
            };
            let det = DetectorConfig {
                image_size: d.spec.image_size,
                growth_rate: a.k,
                block_layers,
                compression: a.theta,
                ..DetectorConfig::default()
            };
            let mut run = train_detector(&d, &det, &cfg)?;
            (run.best.to_checkpoint()?, run.log, run.best_epoch)
        }
    };
    fs::create_dir_all(&a.out)?;
    save(&a.out.join("checkpoint.bin"), &ckpt)?;
    write_file(&a.out.join("log.csv"), |w| log.write_csv(w))?;
    write_file(&a.out.join("steps.csv"), |w| log.write_steps_csv(w))?;
    print_epochs(&log);
    match best_epoch {
        Some(e) => println!("best epoch {e}"),
        None => println!("no epochs run; checkpoint holds the initialisation"),
    }
    Ok(ExitCode::SUCCESS)
}

fn classifier_outputs(report: &ClassifierReport, out: &Path) -> Result<(), CliError> {
    write_file(&out.join("metrics.csv"), |w| report.write_metrics_csv(w))?;
    write_file(&out.join("roc.csv"), |w| report.write_roc_csv(w))?;
    write_file(&out.join("predictions.csv"), |w| report.write_predictions_csv(w))?;
    let c = report.counts;
    println!("tp {} fp {} tn {} fn {}", c.tp, c.fp, c.tn, c.fn_);
    println!(
        "accuracy {} sensitivity {} specificity {} precision {} f1 {} auc {}",
        fmt_opt(report.accuracy),
        fmt_opt(report.sensitivity),
        fmt_opt(report.specificity),
        fmt_opt(report.precision),
        fmt_opt(report.f1),
        fmt_opt(report.auc)
    );
    Ok(())
}

fn detector_outputs(report: &DetectorReport, out: &Path) -> Result<(), CliError> {
    write_file(&out.join("metrics.csv"), |w| report.write_metrics_csv(w))?;
    write_file(&out.join("cases.csv"), |w| report.write_cases_csv(w))?;
    println!("map {:.4} mean_iou {:.4}", report.map, report.mean_iou);
    Ok(())
}

fn split_cases(d: &Dataset, split: SplitArg) -> &[Case] {
    match split {
        SplitArg::Train => &d.train,
        SplitArg::Validation => &d.validation,
    }
}

pub fn eval(a: EvalArgs) -> Outcome {
    check_out_dir(&a.out, a.force)?;
    if let Some(path) = &a.predictions {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let report = ClassifierReport::from_predictions(ClassifierReport::read_predictions_csv(&text)?)?;
        fs::create_dir_all(&a.out)?;
        classifier_outputs(&report, &a.out)?;
        return Ok(ExitCode::SUCCESS);
    }
    let ckpt = match &a.checkpoint {
        Some(path) if !path.is_file() => {
            return Err(CliError::Usage(format!("no checkpoint at {}", path.display())));
        }
        Some(path) => Some(load(path)?),
        None => None,
    };
    let d = load_dataset(&a.dataset)?;
    let cases = split_cases(&d, a.split);
    fs::create_dir_all(&a.out)?;
    match (a.oracle, ckpt) {
        (Some(ModelKind::Classifier), _) => classifier_outputs(&evaluate_classifier(&mut LabelOracle, cases)?, &a.out)?,
        (Some(ModelKind::Detector), _) => detector_outputs(&evaluate_detector(&mut TruthOracle, cases)?, &a.out)?,
        (None, Some(ckpt)) => match ckpt.config.get("kind").and_then(|k| k.as_str()) {
            Some(CLASSIFIER_KIND) => {
                let mut model = Classifier::from_checkpoint(&ckpt)?;
                classifier_outputs(&evaluate_classifier(&mut model, cases)?, &a.out)?;
            }
            Some(DETECTOR_KIND) => {
                let mut model = MiniDetector::from_checkpoint(&ckpt)?;
                detector_outputs(&evaluate_detector(&mut model, cases)?, &a.out)?;
            }
            other => return Err(CliError::Usage(format!("checkpoint kind {other:?} is not evaluable"))),
        },
        (None, None) => return Err(CliError::Usage("pass --checkpoint, --oracle or --predictions".into())),
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: GradcheckArgs) -> Outcome {
    let opts = GradcheckOptions {
        cases: a.cases,
        eps: a.eps,
        broken: a.break_op,
        only: a.ops,
    };
    let reports = run_gradcheck(&opts)?;
    println!("op,cases,eps,max_relative_error,tolerance,status");
    for r in &reports {
        println!(
            "{},{},{:e},{:e},{:e},{}",
            r.op,
            r.cases,
            r.eps,
            r.max_relative_error,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(CliError::Verification(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}

fn parse_map(spec: &str, h: usize, w: usize) -> Result<Tensor, CliError> {
    let shape = Shape::new(1, 1, h, w);
    let bad = || CliError::Usage(format!("bad --map {spec:?}; use constant:<v>, ramp or random:<seed>"));
    match spec.split_once(':') {
        Some(("constant", v)) => Ok(Tensor::full(shape, v.parse().map_err(|_| bad())?)),
        Some(("random", s)) => Ok(Tensor::uniform(
            shape,
            -1.0,
            1.0,
            &mut Rng::new(s.parse().map_err(|_| bad())?),
        )),
        None if spec == "ramp" => Ok(Tensor::from_fn(shape, |_, _, r, c| (r * w + c) as f64)),
        _ => Err(bad()),
    }
}

fn parse_roi(text: &str) -> Result<RoIBox, CliError> {
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad --roi {text:?}; expected x1,y1,x2,y2")))?;
    match v[..] {
        [x1, y1, x2, y2] => Ok(RoIBox::new(0, x1, y1, x2, y2)),
        _ => Err(CliError::Usage(format!("bad --roi {text:?}; expected four numbers"))),
    }
}

fn parse_bins(text: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("bad --bins {text:?}; expected <rows>x<cols>"));
    let (r, c) = text.split_once('x').ok_or_else(bad)?;
    Ok((r.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?))
}

pub fn roi_demo(a: RoiDemoArgs) -> Outcome {
    if a.height == 0 || a.width == 0 {
        return Err(CliError::Usage("map height and width must be positive".into()));
    }
    let map = parse_map(&a.map, a.height, a.width)?;
    let roi = parse_roi(&a.roi)?;
    let (rows, cols) = parse_bins(&a.bins)?;
    let spec = RoiSpec::new(rows, cols, a.sampling_ratio)?;
    let align = roi_align(&map, &[roi], &spec)?;
    let (pool, _) = roi_pool(&map, &[roi], &spec)?;
    let mut text = String::from("bin_row,bin_col,align,pool\n");
    for i in 0..rows {
        for j in 0..cols {
            text.push_str(&format!("{i},{j},{},{}\n", align.at(0, 0, i, j), pool.at(0, 0, i, j)));
        }
    }
    match &a.out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}
