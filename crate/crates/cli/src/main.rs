mod cli;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime};

use candle_core::Device;
use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches};
use d24fad::backbone::{load_teacher, TeacherSpec, WeightsSource};
use d24fad::checkpoint;
use d24fad::episodes::{build_leave_one_out, load_benchmark, load_folder_dataset, FolderLayout, Label};
use d24fad::metrics::{export_embeddings, export_score_distribution, run_eval, write_scores_csv};
use d24fad::scoring::{export_heatmap, Detector};
use d24fad::student::StudentSpec;
use d24fad::synth::{generate_benchmark, BenchmarkConfig, SynthCounts, Variation};
use d24fad::train::{TrainConfig, Trainer};
use d24fad::Error;
use serde::Serialize;

use cli::{Cli, Command, EmbedArgs, EvalArgs, ModelArgs, ScoreArgs, SynthArgs, TrainArgs};
use config::FileConfig;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Shape(_) | Error::State(_) | Error::Precondition(_) | Error::UndefinedMetric(_) => 2,
        Error::Io { .. } | Error::Layout { .. } | Error::Image { .. } | Error::Data(_) | Error::Incompatible { .. } => 3,
        Error::Numeric { .. } => 4,
        Error::Tensor(_) => 1,
    }
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => e.exit(),
    };
    let parsed = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    let result = match parsed.command {
        Command::Synth(a) => synth(a, sub),
        Command::Train(a) => train(a, sub),
        Command::Eval(a) => eval(a, sub),
        Command::Score(a) => score(a, sub),
        Command::ExportEmbeddings(a) => embed(a, sub),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Command-line value if given there, else the config file, else the flag default.
fn pick<T>(m: &ArgMatches, id: &str, flag: T, file: Option<T>) -> T {
    if m.value_source(id) == Some(ValueSource::CommandLine) {
        flag
    } else {
        file.unwrap_or(flag)
    }
}

fn required<T>(v: Option<T>, what: &str) -> Result<T, Error> {
    v.ok_or_else(|| Error::Config(format!("{what} is required (flag or config file)")))
}

fn name_of<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn synth(a: SynthArgs, m: &ArgMatches) -> Result<(), Error> {
    let f = FileConfig::load(a.common.config.as_deref())?.synth;
    let base = Variation::default();
    let cfg = BenchmarkConfig {
        families: pick(m, "families", a.families, f.families),
        image_size: pick(m, "image_size", a.image_size, f.image_size),
        counts: SynthCounts {
            train_normal: pick(m, "train_normal", a.train_normal, f.train_normal),
            test_normal: pick(m, "test_normal", a.test_normal, f.test_normal),
            test_abnormal: pick(m, "test_abnormal", a.test_abnormal, f.test_abnormal),
        },
        noise_level: pick(m, "noise_level", a.noise_level, f.noise_level),
        variation: Variation {
            shift: f.shift.unwrap_or(base.shift),
            phase: f.phase.unwrap_or(base.phase),
            gain: f.gain.unwrap_or(base.gain),
            brightness: f.brightness.unwrap_or(base.brightness),
        },
        seed: pick(m, "seed", a.seed, f.seed),
    };
    let (tasks, summary) = generate_benchmark(&cfg, &a.out)?;
    for t in &tasks {
        println!(
            "{}: {} train normal, {} test normal, {} test abnormal",
            t.task_id,
            t.normal_train.len(),
            t.normal_test.len(),
            t.abnormal_test.len()
        );
    }
    println!("cross-family correlation {:.4}", summary.cross_family_correlation);
    Ok(())
}

fn teacher_spec(a: ModelArgs, m: &ArgMatches, f: &config::TeacherSection) -> Result<TeacherSpec, Error> {
    let backbone = pick(m, "backbone", a.backbone, f.backbone.clone());
    let weights = pick(m, "weights", a.weights, f.weights.clone());
    let seed = pick(m, "teacher_seed", a.teacher_seed, f.seed);
    let precision = pick(m, "precision", a.precision, f.precision);
    let source = match weights.as_str() {
        "random" => WeightsSource::RandomFrozen { seed },
        "imagenet" => WeightsSource::ImagenetPretrained,
        path => WeightsSource::FilePath { path: path.into() },
    };
    let mut spec = if backbone == "tiny" {
        TeacherSpec::tiny(seed, precision)
    } else {
        TeacherSpec::reference(source.clone())
    };
    spec.backbone_name = backbone;
    spec.weights_source = source;
    spec.precision = precision;
    Ok(spec)
}

fn train(a: TrainArgs, m: &ArgMatches) -> Result<(), Error> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let device = Device::Cpu;
    let ckpt_dir = a.out.join("checkpoints");
    let t0 = (SystemTime::now(), Instant::now());
    let (mut trainer, effective) = match &a.resume {
        Some(path) => {
            let trainer = Trainer::resume(path, &device)?;
            eprintln!("resumed {} at epoch {}", path.display(), trainer.epoch());
            (trainer, None)
        }
        None => {
            let (trainer, effective) = fresh_trainer(&a, m, &file, &device)?;
            (trainer, Some(effective))
        }
    };
    let total = trainer.config().epochs;
    let remaining = total - trainer.epoch();
    let n = a.stop_after.map_or(remaining, |s| s.min(remaining));
    for _ in 0..n {
        let l = trainer.train_epoch()?;
        let ssd = l.ssd.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        eprintln!(
            "epoch {}/{total} lr {:.3e} loss {:.6} tsd {:.6} ssd {ssd}",
            l.epoch,
            l.lr,
            l.total,
            l.tsd
        );
    }
    create_dir(&ckpt_dir)?;
    let (path, manifest) = trainer.finish(&ckpt_dir, effective, Some(t0))?;
    println!("{}", path.display());
    eprintln!("trained on {:?}", manifest.split.train_task_ids());
    Ok(())
}

fn fresh_trainer(
    a: &TrainArgs,
    m: &ArgMatches,
    file: &FileConfig,
    device: &Device,
) -> Result<(Trainer, serde_json::Value), Error> {
    let root = required(pick(m, "data", a.data.clone(), file.data.root.clone().map(Some)), "--data")?;
    let holdout = required(pick(m, "holdout", a.holdout.clone(), file.data.holdout.clone().map(Some)), "--holdout")?;
    let spec = teacher_spec(a.model.clone(), m, &file.teacher)?;

    let (t, l) = (&file.train, &file.loss);
    let mut cfg = TrainConfig {
        epochs: pick(m, "epochs", a.epochs, t.epochs),
        batch_size: pick(m, "batch_size", a.batch_size, t.batch_size),
        learning_rate: pick(m, "lr", a.lr, t.learning_rate),
        seed: pick(m, "seed", a.seed, t.seed),
        k: pick(m, "k", a.k, t.k),
        batching: pick(m, "batching", a.batching, t.batching),
        ..TrainConfig::default()
    };
    if let Some(s) = t.lr_schedule {
        cfg.lr_schedule = s;
    }
    cfg.adam.beta1 = t.beta1.unwrap_or(cfg.adam.beta1);
    cfg.adam.beta2 = t.beta2.unwrap_or(cfg.adam.beta2);
    cfg.adam.weight_decay = t.weight_decay.unwrap_or(cfg.adam.weight_decay);
    cfg.l2w_init_noise = t.l2w_init_noise.unwrap_or(cfg.l2w_init_noise);
    cfg.loss.lambda_weight = pick(m, "lambda", a.lambda, l.lambda);
    if a.no_tsd || l.use_tsd == Some(false) {
        cfg.loss.lambda_weight = 0.0;
    }
    cfg.loss.use_ssd = !a.no_ssd && l.use_ssd.unwrap_or(true);
    cfg.loss.use_l2w = !a.no_l2w && l.use_l2w.unwrap_or(true);
    cfg.loss.l2w_variant = pick(m, "l2w_variant", a.l2w_variant, l.l2w_variant);
    cfg.loss.epsilon = l.epsilon.unwrap_or(cfg.loss.epsilon);
    cfg.loss.support_stop_gradient = l.support_stop_gradient.unwrap_or(cfg.loss.support_stop_gradient);
    cfg.validate()?;

    let tasks = load_benchmark(&root, &FolderLayout::default())?;
    let (train_tasks, _) = build_leave_one_out(&tasks, &holdout)?;
    let teacher = load_teacher(&spec, device)?;
    let mut student = StudentSpec::for_teacher(&teacher, file.student.seed.unwrap_or(cfg.seed));
    student.blocks_per_stage = pick(m, "blocks_per_stage", a.blocks_per_stage, file.student.blocks_per_stage);
    if let Some(b) = file.student.conv_bias {
        student.conv_bias = b;
    }

    let effective = serde_json::json!({
        "data": { "root": root, "holdout": holdout },
        "teacher": spec,
        "student": student,
        "train": cfg,
    });
    let trainer = Trainer::new(cfg, teacher, &student, train_tasks, Some(holdout))?;
    Ok((trainer, effective))
}

fn checkpoint_holdout(path: &Path) -> Result<Option<String>, Error> {
    Ok(checkpoint::load(path, &Device::Cpu)?.meta.split.held_out)
}

fn eval(a: EvalArgs, m: &ArgMatches) -> Result<(), Error> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let e = &file.eval;
    let k = pick(m, "k", a.k, e.k);
    let mode = pick(m, "support_mode", a.support_mode, e.support_mode);
    let trials = pick(m, "trials", a.trials, e.trials);
    let seed = pick(m, "seed", a.seed, e.seed);
    let workers = pick(m, "workers", a.workers, e.workers);
    let reduce = pick(m, "score_reduce", a.score_reduce, e.score_reduce);
    let root = required(pick(m, "data", a.data, file.data.root.map(Some)), "--data")?;
    let holdout = match pick(m, "holdout", a.holdout, file.data.holdout.map(Some)) {
        Some(h) => h,
        None => required(checkpoint_holdout(&a.checkpoint)?, "--holdout")?,
    };

    let detector = Detector::from_checkpoint(&a.checkpoint, &Device::Cpu)?.with_reduce(reduce);
    let task = load_folder_dataset(&root.join(&holdout), &FolderLayout::default())?;
    let seeds: Vec<u64> = (0..trials as u64).map(|i| seed + i).collect();
    let (mut report, rows) = run_eval(&detector, &task, k, mode, &seeds, workers)?;

    let stem = format!("{}_k{k}_{}", task.task_id, name_of(&mode));
    let reports = a.out.join("reports");
    let exports = a.out.join("exports");
    create_dir(&reports)?;
    create_dir(&exports)?;
    let scores_path = exports.join(format!("scores_{stem}.csv"));
    write_scores_csv(&rows, &scores_path)?;
    let dist: Vec<(f64, Label)> = rows.iter().map(|r| (r.score, r.label)).collect();
    export_score_distribution(&dist, &exports.join(format!("distribution_{stem}.csv")))?;
    report.score_table = Some(format!("exports/scores_{stem}.csv"));
    report.write_json(&reports.join(format!("eval_{stem}.json")))?;
    for t in &report.trials {
        println!("trial seed {} auroc {:.4}", t.seed, t.auroc);
    }
    println!(
        "{} K={k} {}: auroc {:.4} ± {:.4}",
        task.task_id,
        name_of(&mode),
        report.mean_auroc,
        report.std_auroc
    );
    Ok(())
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let exts = FolderLayout::default().extensions;
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| exts.iter().any(|x| x.eq_ignore_ascii_case(e)))
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::Data(format!("no support images in {}", dir.display())));
    }
    Ok(out)
}

fn score(a: ScoreArgs, m: &ArgMatches) -> Result<(), Error> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let reduce = pick(m, "score_reduce", a.score_reduce, file.eval.score_reduce);
    let detector = Detector::from_checkpoint(&a.checkpoint, &Device::Cpu)?.with_reduce(reduce);
    let support = list_images(&a.support)?;
    let map = detector.score_query(&support, &a.query)?;
    if let Some(out) = &a.heatmap {
        export_heatmap(&map, &a.query, out)?;
    }
    println!("{}", map.image_score);
    Ok(())
}

fn embed(a: EmbedArgs, m: &ArgMatches) -> Result<(), Error> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let root = required(pick(m, "data", a.data, file.data.root.map(Some)), "--data")?;
    let task_id = match a.task {
        Some(t) => t,
        None => required(checkpoint_holdout(&a.checkpoint)?, "--task")?,
    };
    let detector = Detector::from_checkpoint(&a.checkpoint, &Device::Cpu)?;
    let task = load_folder_dataset(&root.join(&task_id), &FolderLayout::default())?;
    let exports = a.out.join("exports");
    create_dir(&exports)?;
    let path = exports.join(format!("embeddings_{task_id}.csv"));
    let n = export_embeddings(&detector, &task.test_items(), &path)?;
    println!("{n} embeddings written to {}", path.display());
    Ok(())
}
