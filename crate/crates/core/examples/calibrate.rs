//! Trains on three synthetic tasks and evaluates the fourth, before and
//! after training. Used to pick the CI-scale benchmark settings.
//!
//! cargo run --release -p d24fad --example calibrate -- [holdout] [epochs] [batch] [lr]

use std::time::Instant;

use candle_core::Device;
use d24fad::backbone::{load_teacher, TeacherSpec};
use d24fad::episodes::{build_leave_one_out, SupportMode};
use d24fad::metrics::{run_eval, DEFAULT_TRIAL_SEEDS};
use d24fad::nn::Precision;
use d24fad::scoring::Detector;
use d24fad::student::{build_student, StudentSpec};
use d24fad::synth::{generate_benchmark, BenchmarkConfig};
use d24fad::train::{TrainConfig, Trainer};

fn main() -> d24fad::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let holdout = args.first().cloned().unwrap_or_else(|| "rings".into());
    let epochs: usize = args.get(1).map_or(20, |s| s.parse().unwrap());
    let batch: usize = args.get(2).map_or(8, |s| s.parse().unwrap());
    let lr: f64 = args.get(3).map_or(5e-3, |s| s.parse().unwrap());

    let dev = Device::Cpu;
    let dir = tempfile::tempdir().unwrap();
    let keep = std::env::var("KEEP").ok();
    let root = keep.as_ref().map(std::path::PathBuf::from).unwrap_or_else(|| dir.path().to_path_buf());
    let mut bench = BenchmarkConfig::default();
    let env = |k: &str, d: f64| std::env::var(k).ok().map_or(d, |v| v.parse().unwrap());
    bench.variation.shift = env("SYN_SHIFT", bench.variation.shift);
    bench.variation.phase = env("SYN_PHASE", bench.variation.phase);
    bench.variation.gain = env("SYN_GAIN", bench.variation.gain);
    bench.variation.brightness = env("SYN_BRIGHT", bench.variation.brightness);
    bench.noise_level = env("SYN_NOISE", bench.noise_level);
    let (tasks, summary) = generate_benchmark(&bench, &root)?;
    println!("cross-family correlation {:.3}", summary.cross_family_correlation);
    let (train, test) = build_leave_one_out(&tasks, &holdout)?;

    let teacher = load_teacher(&TeacherSpec::tiny(0, Precision::F32), &dev)?;
    let cfg = TrainConfig {
        epochs,
        batch_size: batch,
        learning_rate: lr,
        ..TrainConfig::default()
    };
    let mut cfg = cfg;
    cfg.loss.lambda_weight = env("LAMBDA", cfg.loss.lambda_weight);
    cfg.loss.support_stop_gradient = env("STOPGRAD", 0.0) > 0.0;
    cfg.loss.use_ssd = env("NOSSD", 0.0) == 0.0;
    cfg.loss.use_l2w = env("NOL2W", 0.0) == 0.0;
    let mut sspec = StudentSpec::for_teacher(&teacher, 0);
    sspec.conv_bias = env("STUDENT_BIAS", 1.0) > 0.0;
    sspec.blocks_per_stage = env("BLOCKS", 1.0) as usize;
    let untrained = build_student(&sspec, &teacher)?;
    let mut trainer = Trainer::new(cfg.clone(), teacher.clone(), &sspec, train, Some(holdout.clone()))?;
    let base = Detector::new(teacher.clone(), untrained, trainer.l2w().clone(), cfg.loss.clone());
    let (r0, _) = run_eval(&base, &test, cfg.k, SupportMode::Random, &DEFAULT_TRIAL_SEEDS, 1)?;
    println!("untrained {holdout}: {:.4} ± {:.4}", r0.mean_auroc, r0.std_auroc);

    {
        let paths: Vec<_> = trainer.split().train_tasks.iter().flat_map(|t| t.normal_train.clone()).collect();
        let b = d24fad::image_io::load_batch(&paths, 32, teacher.dtype(), &dev)?;
        let tp = teacher.extract(&b)?;
        let mut line = String::new();
        for l in tp.levels() {
            let m = l.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?.broadcast_as(l.shape())?.contiguous()?;
            let d = d24fad::losses::dissimilarity_map(l, &m, 1e-8)?.mean_all()?.to_scalar::<f32>()?;
            line += &format!(" {d:.3}");
        }
        println!("constant-predictor tsd per level:{line}");
    }
    // reference: compare teacher pyramids directly
    for seed in 0..3u64 {
        let sel = d24fad::episodes::select_infer_support(&test, 4, SupportMode::Random, seed)?;
        let sb = d24fad::image_io::load_batch(&sel.support, 32, teacher.dtype(), &dev)?;
        let bank = d24fad::student::SupportFeatureBank::new(teacher.extract(&sb)?, vec!["x".into(); 4])?;
        let paths: Vec<_> = sel.queries.iter().map(|q| q.0.clone()).collect();
        let qb = d24fad::image_io::load_batch(&paths, 32, teacher.dtype(), &dev)?;
        let q = teacher.extract(&qb)?;
        let maps = d24fad::l2w::mean_dissimilarity_maps(&q, &bank, 1e-8)?;
        let mut line = String::new();
        for (li, m) in maps.iter().enumerate() {
            let s: Vec<f64> = m.flatten_from(1)?.mean(1)?.to_dtype(candle_core::DType::F64)?.to_vec1()?;
            let sc: Vec<_> = s.iter().zip(&sel.queries).map(|(a, q)| (*a, q.1)).collect();
            line += &format!(" L{li} {:.3}", d24fad::metrics::auroc(&sc)?);
            // pixel-level reference on level 0 position
            let _ = li;
        }
        println!("teacher-feature auroc seed {seed}:{line}");
    }
    let t0 = Instant::now();
    for _ in 0..epochs {
        let e = trainer.train_epoch()?;
        println!("epoch {:>3} lr {:.2e} total {:.5} tsd {:.5} ssd {:?}", e.epoch, e.lr, e.total, e.tsd, e.ssd);
    }
    println!("train time {:.1}s", t0.elapsed().as_secs_f64());
    let det = Detector::new(teacher, trainer.student().clone(), trainer.l2w().clone(), cfg.loss.clone());
    let (r1, _) = run_eval(&det, &test, cfg.k, SupportMode::Random, &DEFAULT_TRIAL_SEEDS, 1)?;
    println!("trained {holdout}: {:.4} ± {:.4} {:?}", r1.mean_auroc, r1.std_auroc, r1.trials.iter().map(|t| t.auroc).collect::<Vec<_>>());
    Ok(())
}
