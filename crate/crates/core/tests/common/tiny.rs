//! Tiny end-to-end fixtures: a small synthetic benchmark and trainer.

use std::path::Path;

use candle_core::Device;
use d24fad::backbone::{load_teacher, TeacherSpec};
use d24fad::episodes::{build_leave_one_out, TaskManifest};
use d24fad::nn::Precision;
use d24fad::student::StudentSpec;
use d24fad::synth::{generate_benchmark, BenchmarkConfig, SynthCounts};
use d24fad::train::{TrainConfig, Trainer};

pub const HOLDOUT: &str = "rings";

pub fn bench(root: &Path, train_normal: usize, test_each: usize) -> Vec<TaskManifest> {
    let cfg = BenchmarkConfig {
        counts: SynthCounts {
            train_normal,
            test_normal: test_each,
            test_abnormal: test_each,
        },
        ..Default::default()
    };
    generate_benchmark(&cfg, root).unwrap().0
}

pub fn config(epochs: usize, batch_size: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        ..TrainConfig::default()
    }
}

pub fn trainer(tasks: &[TaskManifest], cfg: TrainConfig, precision: Precision) -> Trainer {
    let (train, _) = build_leave_one_out(tasks, HOLDOUT).unwrap();
    let teacher = load_teacher(&TeacherSpec::tiny(0, precision), &Device::Cpu).unwrap();
    let spec = StudentSpec::for_teacher(&teacher, cfg.seed);
    Trainer::new(cfg, teacher, &spec, train, Some(HOLDOUT.into())).unwrap()
}
