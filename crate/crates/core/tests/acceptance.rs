//! Acceptance suite. Every criterion runs in isolation and prints one
//! PASS/FAIL line; the test fails if any criterion fails.
//!
//! cargo test -p d24fad --test acceptance -- --nocapture

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::{Device, Tensor, Var};
use common::*;
use d24fad::backbone::{load_teacher, TeacherSpec};
use d24fad::episodes::{build_leave_one_out, select_infer_support, Label, SupportMode, TaskManifest};
use d24fad::l2w::{compute_weights, ssd_l2w_loss_per_item, L2WParams, L2WVariant};
use d24fad::losses::{ssd_loss_per_item, tsd_loss_per_item};
use d24fad::metrics::{auroc, run_eval, DEFAULT_TRIAL_SEEDS};
use d24fad::nn::Precision;
use d24fad::pyramid::Source;
use d24fad::scoring::Detector;
use d24fad::student::{build_student, StudentSpec, SupportFeatureBank};
use d24fad::synth::{generate_benchmark, BenchmarkConfig};
use d24fad::train::{TrainConfig, Trainer};
use rand::seq::SliceRandom;
use rand::Rng;

const VARIANTS: [L2WVariant; 4] = [
    L2WVariant::ScaledDot,
    L2WVariant::Gaussian,
    L2WVariant::EmbeddedGaussian,
    L2WVariant::Concatenation,
];

/// Held-out task of the end-to-end runs.
const E2E_HOLDOUT: &str = "rings";
const E2E_EPOCHS: usize = 20;
const E2E_MIN_AUROC: f64 = 0.90;
const BASELINE_BAND: (f64, f64) = (0.35, 0.65);
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_SLACK: f64 = 0.02;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs() < limit_s, || {
        format!("runtime {:.1}s over the {limit_s}s limit", elapsed.as_secs_f64())
    })
}

fn bank(levels: &[Arr4]) -> SupportFeatureBank {
    let k = levels[0].n;
    SupportFeatureBank::new(pyramid(levels, Source::Student), (0..k).map(|i| i.to_string()).collect()).unwrap()
}

fn loss_oracles() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    let cases = 120;
    for case in 0..cases {
        let shapes = random_shapes(&mut r);
        let n = r.random_range(1..=3);
        let k = r.random_range(1..=4);
        let t = random_levels(&mut r, n, &shapes);
        let q = random_levels(&mut r, n, &shapes);
        let s = random_levels(&mut r, k, &shapes);
        let qp = pyramid(&q, Source::Student);
        let b = bank(&s);
        let tsd = vec1(&tsd_loss_per_item(&pyramid(&t, Source::Teacher), &qp, EPS).unwrap());
        let ssd = vec1(&ssd_loss_per_item(&b, &qp, EPS, false).unwrap());
        let head = L2WParams::new(VARIANTS[case % 4], &shapes, case as u64, 0.3, Precision::F64, &Device::Cpu).unwrap();
        let arrays = head_arrays(&head);
        let l2w = vec1(&ssd_l2w_loss_per_item(&head, &qp, &b, EPS, false).unwrap());
        for i in 0..n {
            worst = worst
                .max((tsd[i] - oracle_tsd_item(&t, &q, i)).abs())
                .max((ssd[i] - oracle_ssd_item(&s, &q, i)).abs())
                .max((l2w[i] - oracle_ssd_l2w_item(&arrays, &s, &q, i)).abs());
        }
    }
    ensure(worst < 1e-10, || format!("max deviation {worst:e}"))?;
    within(t0.elapsed(), 60)?;
    Ok(format!("{cases} pyramids, max deviation {worst:.1e}"))
}

fn grad_rel_error(var: &Var, loss: &dyn Fn() -> Tensor, picks: &[usize]) -> f64 {
    let analytic = loss()
        .backward()
        .unwrap()
        .get(var.as_tensor())
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let shape = var.as_tensor().shape().clone();
    let eval_at = |i: usize, d: f64| {
        let mut v = base.clone();
        v[i] += d;
        var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()).unwrap();
        scalar(&loss())
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &i in picks {
        let numeric = (eval_at(i, h) - eval_at(i, -h)) / (2.0 * h);
        let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    var.set(&Tensor::from_vec(base, shape, &Device::Cpu).unwrap()).unwrap();
    worst
}

fn gradient_checks() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(202);
    let shapes = vec![(4, 3, 3), (5, 2, 2)];
    let t = random_levels(&mut r, 2, &shapes);
    let q = random_levels(&mut r, 2, &shapes);
    let s = random_levels(&mut r, 3, &shapes);
    let tp = pyramid(&t, Source::Teacher);
    let (qp, qvars) = var_pyramid(&q, Source::Student);
    let (sp, svars) = var_pyramid(&s, Source::Student);
    let b = SupportFeatureBank::new(sp, (0..3).map(|i| i.to_string()).collect()).unwrap();
    let mut picks = |len: usize| (0..20).map(|_| r.random_range(0..len)).collect::<Vec<_>>();

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let tsd = || tsd_loss_per_item(&tp, &qp, EPS).unwrap().mean_all().unwrap();
    let ssd = || ssd_loss_per_item(&b, &qp, EPS, false).unwrap().mean_all().unwrap();
    for v in &qvars {
        worst = worst.max(grad_rel_error(v, &tsd, &picks(v.as_tensor().elem_count())));
        worst = worst.max(grad_rel_error(v, &ssd, &picks(v.as_tensor().elem_count())));
        checked += 40;
    }
    for v in &svars {
        worst = worst.max(grad_rel_error(v, &ssd, &picks(v.as_tensor().elem_count())));
        checked += 20;
    }
    for variant in VARIANTS {
        let head = L2WParams::new(variant, &shapes, 3, 0.3, Precision::F64, &Device::Cpu).unwrap();
        let loss = || ssd_l2w_loss_per_item(&head, &qp, &b, EPS, false).unwrap().mean_all().unwrap();
        for v in qvars.iter().chain(&svars) {
            worst = worst.max(grad_rel_error(v, &loss, &picks(v.as_tensor().elem_count())));
            checked += 20;
        }
        for (_, v) in head.params().iter() {
            worst = worst.max(grad_rel_error(v, &loss, &picks(v.as_tensor().elem_count())));
            checked += 20;
        }
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:e}"))?;
    within(t0.elapsed(), 120)?;
    Ok(format!("{checked} coordinates, max relative error {worst:.1e}"))
}

fn l2w_invariants() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(303);
    let cases = 200;
    for case in 0..cases {
        let variant = VARIANTS[case % 4];
        let shapes = random_shapes(&mut r);
        let k = r.random_range(1..=6);
        let q = random_levels(&mut r, 2, &shapes);
        let s = random_levels(&mut r, k, &shapes);
        let head = L2WParams::new(variant, &shapes, case as u64, 0.3, Precision::F64, &Device::Cpu).unwrap();
        let qp = pyramid(&q, Source::Student);
        let b = bank(&s);
        let w = compute_weights(&head, &qp, &b).unwrap();
        for i in 0..2 {
            for lw in w.for_query(i).unwrap() {
                let sum: f64 = lw.iter().sum();
                ensure((sum - 1.0).abs() < 1e-6, || format!("{variant:?} case {case}: weights sum to {sum}"))?;
            }
        }

        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut r);
        let bp = b.permuted(&order).unwrap();
        let wp = compute_weights(&head, &qp, &bp).unwrap();
        let l = vec1(&ssd_l2w_loss_per_item(&head, &qp, &b, EPS, false).unwrap());
        let lp = vec1(&ssd_l2w_loss_per_item(&head, &qp, &bp, EPS, false).unwrap());
        for i in 0..2 {
            for (a, p) in w.for_query(i).unwrap().iter().zip(wp.for_query(i).unwrap()) {
                for (j, &o) in order.iter().enumerate() {
                    ensure((p[j] - a[o]).abs() < 1e-8, || format!("{variant:?} case {case}: permutation"))?;
                }
            }
            ensure((l[i] - lp[i]).abs() < 1e-8, || format!("{variant:?} case {case}: permuted loss"))?;
        }

        let one = bank(&s.iter().map(|a| Arr4 { n: 1, data: a.data[..a.c * a.h * a.w].to_vec(), ..a.clone() }).collect::<Vec<_>>());
        let weighted = vec1(&ssd_l2w_loss_per_item(&head, &qp, &one, EPS, false).unwrap());
        let plain = vec1(&ssd_loss_per_item(&one, &qp, EPS, false).unwrap());
        for (a, p) in weighted.iter().zip(&plain) {
            ensure((a - p).abs() < 1e-8, || format!("{variant:?} case {case}: K=1 differs"))?;
        }

        let same = bank(&s.iter().map(|a| {
            let first = &a.data[..a.c * a.h * a.w];
            Arr4 { data: first.repeat(k), ..a.clone() }
        }).collect::<Vec<_>>());
        for lw in compute_weights(&head, &qp, &same).unwrap().for_query(0).unwrap() {
            ensure(lw.iter().all(|x| *x == 1.0 / k as f64), || format!("{variant:?} case {case}: not uniform {lw:?}"))?;
        }
    }
    within(t0.elapsed(), 60)?;
    Ok(format!("{cases} cases over 4 variants"))
}

fn pairwise_auroc(s: &[(f64, Label)]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (a, _) in s.iter().filter(|x| x.1 == Label::Abnormal) {
        for (n, _) in s.iter().filter(|x| x.1 == Label::Normal) {
            pairs += 1.0;
            wins += if a > n { 1.0 } else if a == n { 0.5 } else { 0.0 };
        }
    }
    wins / pairs
}

fn auroc_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(404);
    let sets = 1000;
    let mut tie_heavy = 0;
    for set in 0..sets {
        let len = r.random_range(2..120);
        let levels: Option<u32> = if set % 2 == 0 { Some(r.random_range(1..8)) } else { None };
        tie_heavy += levels.is_some() as usize;
        let mut s: Vec<(f64, Label)> = (0..len)
            .map(|_| {
                let v = match levels {
                    Some(l) => r.random_range(0..l) as f64 / 4.0,
                    None => r.random::<f64>() * 10.0 - 5.0,
                };
                (v, if r.random_bool(0.5) { Label::Abnormal } else { Label::Normal })
            })
            .collect();
        s[0].1 = Label::Normal;
        s[1].1 = Label::Abnormal;
        let got = auroc(&s).unwrap();
        let want = pairwise_auroc(&s);
        ensure(got == want, || format!("set {set}: {got} vs pairwise {want}"))?;
        let (a, c) = (r.random_range(0.1..3.0), r.random_range(-2.0..2.0));
        let mapped: Vec<_> = s.iter().map(|(v, l)| ((a * v + c).exp() + v.powi(3), *l)).collect();
        ensure(auroc(&mapped).unwrap() == got, || format!("set {set}: monotone map changed the value"))?;
    }
    within(t0.elapsed(), 60)?;
    Ok(format!("{sets} sets ({tie_heavy} tie-heavy) exact; monotone invariance holds"))
}

struct Bench {
    _dir: tempfile::TempDir,
    root: PathBuf,
    tasks: Vec<TaskManifest>,
}

fn benchmark() -> Bench {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("bench");
    let (tasks, _) = generate_benchmark(&BenchmarkConfig::default(), &root).unwrap();
    Bench { _dir: dir, root, tasks }
}

fn e2e_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: E2E_EPOCHS,
        seed,
        ..TrainConfig::default()
    }
}

struct Run {
    untrained: Detector,
    trained: Detector,
    manifest_checksum: String,
    parameter_checksum: String,
    train_time: Duration,
}

fn train_run(bench: &Bench, cfg: TrainConfig, out: &Path) -> Run {
    let (train, _) = build_leave_one_out(&bench.tasks, E2E_HOLDOUT).unwrap();
    let teacher = load_teacher(&TeacherSpec::tiny(0, Precision::F32), &Device::Cpu).unwrap();
    let spec = StudentSpec::for_teacher(&teacher, cfg.seed);
    // fresh modules: clones of the trainer's would share its variables
    let l2w = L2WParams::new(
        cfg.loss.l2w_variant,
        teacher.level_shapes(),
        spec.seed,
        cfg.l2w_init_noise,
        spec.precision,
        &Device::Cpu,
    )
    .unwrap();
    let untrained = Detector::new(teacher.clone(), build_student(&spec, &teacher).unwrap(), l2w, cfg.loss.clone());
    let t0 = Instant::now();
    let mut t = Trainer::new(cfg, teacher, &spec, train, Some(E2E_HOLDOUT.into())).unwrap();
    t.run_to_end().unwrap();
    std::fs::create_dir_all(out).unwrap();
    let (ckpt, manifest) = t.finish(out, None, None).unwrap();
    Run {
        untrained,
        trained: Detector::from_checkpoint(&ckpt, &Device::Cpu).unwrap(),
        manifest_checksum: manifest.content_checksum,
        parameter_checksum: manifest.parameter_checksum,
        train_time: t0.elapsed(),
    }
}

fn held_out(bench: &Bench) -> &TaskManifest {
    bench.tasks.iter().find(|t| t.task_id == E2E_HOLDOUT).unwrap()
}

fn random_trials(d: &Detector, task: &TaskManifest) -> Vec<f64> {
    let (report, _) = run_eval(d, task, 4, SupportMode::Random, &DEFAULT_TRIAL_SEEDS, 1).unwrap();
    report.trials.iter().map(|t| t.auroc).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn protocol(bench: &Bench, run: &Run) -> Outcome {
    let mut episodes = 0;
    let mut leaks = 0;
    for held in &bench.tasks {
        let (train, test) = build_leave_one_out(&bench.tasks, &held.task_id).unwrap();
        let forbidden: BTreeSet<&PathBuf> = test.all_images().collect();
        let teacher = load_teacher(&TeacherSpec::tiny(0, Precision::F32), &Device::Cpu).unwrap();
        let spec = StudentSpec::for_teacher(&teacher, 0);
        let t = Trainer::new(e2e_config(0), teacher, &spec, train, Some(held.task_id.clone())).unwrap();
        for epoch in 0..E2E_EPOCHS {
            for e in t.epoch_episodes(epoch).unwrap() {
                episodes += 1;
                leaks += e.support.iter().chain([&e.query]).filter(|p| forbidden.contains(p)).count();
                leaks += e.support.contains(&e.query) as usize;
            }
        }
        for mode in [SupportMode::Fixed, SupportMode::Random] {
            for seed in DEFAULT_TRIAL_SEEDS {
                let s = select_infer_support(&test, 4, mode, seed).unwrap();
                leaks += s.queries.iter().filter(|(q, _)| s.support.contains(q)).count();
            }
        }
    }
    let task = held_out(bench);
    let (report, rows) = run_eval(&run.trained, task, 4, SupportMode::Random, &DEFAULT_TRIAL_SEEDS, 1).unwrap();
    for trial in &report.trials {
        leaks += rows
            .iter()
            .filter(|r| r.trial_seed == trial.seed && trial.support.contains(&r.path))
            .count();
    }
    let (fixed, _) = run_eval(&run.trained, task, 4, SupportMode::Fixed, &DEFAULT_TRIAL_SEEDS, 1).unwrap();
    ensure(leaks == 0, || format!("{leaks} leakage events"))?;
    ensure(fixed.std_auroc == 0.0, || format!("fixed-support std {}", fixed.std_auroc))?;
    Ok(format!("{episodes} training episodes over 4 splits, 0 leakage events, fixed std 0"))
}

fn end_to_end(bench: &Bench, run: &Run) -> (Outcome, Vec<f64>) {
    let task = held_out(bench);
    let base = mean(&random_trials(&run.untrained, task));
    let trained = random_trials(&run.trained, task);
    let m = mean(&trained);
    let detail = format!(
        "held-out {E2E_HOLDOUT}: trained mean AUROC {m:.4} (need >= {E2E_MIN_AUROC}), untrained {base:.4} (need within [{}, {}]), train {:.0}s",
        BASELINE_BAND.0,
        BASELINE_BAND.1,
        run.train_time.as_secs_f64()
    );
    let ok = m >= E2E_MIN_AUROC && (BASELINE_BAND.0..=BASELINE_BAND.1).contains(&base);
    (if ok { Ok(detail) } else { Err(detail) }, trained)
}

fn ablation(bench: &Bench, out: &Path) -> Outcome {
    let configs: [(&str, fn(&mut TrainConfig)); 4] = [
        ("full", |_| {}),
        ("no-tsd", |c| c.loss.lambda_weight = 0.0),
        ("no-ssd", |c| c.loss.use_ssd = false),
        ("no-l2w", |c| c.loss.use_l2w = false),
    ];
    let task = held_out(bench);
    let mut means = Vec::new();
    for (name, apply) in configs {
        let mut per_seed = Vec::new();
        for seed in ABLATION_SEEDS {
            let mut cfg = e2e_config(seed);
            apply(&mut cfg);
            let run = train_run(bench, cfg, &out.join(format!("{name}-{seed}")));
            per_seed.push(mean(&random_trials(&run.trained, task)));
        }
        means.push((name, mean(&per_seed)));
    }
    let full = means[0].1;
    let table = means.iter().map(|(n, m)| format!("{n} {m:.4}")).collect::<Vec<_>>().join(", ");
    let ok = means[1..].iter().all(|(_, m)| full >= m - ABLATION_SLACK);
    if ok {
        Ok(table)
    } else {
        Err(table)
    }
}

fn determinism(bench: &Bench, first: &Run, first_aurocs: &[f64], out: &Path) -> Outcome {
    let again = train_run(bench, e2e_config(0), out);
    let aurocs = random_trials(&again.trained, held_out(bench));
    let worst = first_aurocs
        .iter()
        .zip(&aurocs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(worst <= 1e-6, || format!("AUROC drift {worst:e}"))?;
    ensure(again.manifest_checksum == first.manifest_checksum, || "manifest checksum differs".into())?;
    ensure(again.parameter_checksum == first.parameter_checksum, || "parameter checksum differs".into())?;
    let base_a = mean(&random_trials(&first.untrained, held_out(bench)));
    let base_b = mean(&random_trials(&again.untrained, held_out(bench)));
    ensure(base_a == base_b, || "untrained baseline differs".into())?;
    Ok(format!("{} AUROCs within {worst:.1e}, manifest checksum identical", aurocs.len()))
}

fn split_run() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let tasks = tiny::bench(&dir.path().join("bench"), 8, 2);
    let cfg = tiny::config(5, 4);
    let mut full = tiny::trainer(&tasks, cfg.clone(), Precision::F64);
    full.run_to_end().unwrap();
    let mut part = tiny::trainer(&tasks, cfg, Precision::F64);
    part.run_epochs(3).unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for d in [&a, &b, &c] {
        std::fs::create_dir_all(d).unwrap();
    }
    let mid = part.save_checkpoint(&a).unwrap();
    drop(part);
    let mut resumed = Trainer::resume(&mid, &Device::Cpu).unwrap();
    resumed.run_to_end().unwrap();
    let pa = full.save_checkpoint(&b).unwrap();
    let pb = resumed.save_checkpoint(&c).unwrap();
    ensure(full.parameter_checksum().unwrap() == resumed.parameter_checksum().unwrap(), || {
        "parameter checksums differ".into()
    })?;
    ensure(std::fs::read(pa).unwrap() == std::fs::read(pb).unwrap(), || "checkpoint bytes differ".into())?;
    Ok("3 + 2 epochs equals 5 epochs: parameters and checkpoint bytes identical".into())
}

fn report(results: &mut Vec<bool>, id: usize, name: &str, f: impl FnOnce() -> Outcome) {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    match &outcome {
        Ok(d) => println!("PASS criterion {id} ({name}): {d}"),
        Err(d) => println!("FAIL criterion {id} ({name}): {d}"),
    }
    results.push(outcome.is_ok());
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    report(&mut results, 1, "loss oracles", loss_oracles);
    report(&mut results, 2, "gradient checks", gradient_checks);
    report(&mut results, 3, "weighting invariants", l2w_invariants);
    report(&mut results, 4, "AUROC oracle", auroc_oracle);

    let bench = benchmark();
    let out = bench.root.parent().unwrap().join("runs");
    let t0 = Instant::now();
    let main = catch_unwind(AssertUnwindSafe(|| train_run(&bench, e2e_config(0), &out.join("main"))));
    match main {
        Ok(run) => {
            report(&mut results, 5, "protocol invariants", || protocol(&bench, &run));
            let mut aurocs = Vec::new();
            report(&mut results, 6, "synthetic end-to-end", || {
                let (o, a) = end_to_end(&bench, &run);
                aurocs = a;
                within(t0.elapsed(), 3600)?;
                o
            });
            report(&mut results, 7, "ablation direction", || ablation(&bench, &out.join("ablation")));
            report(&mut results, 8, "determinism", || determinism(&bench, &run, &aurocs, &out.join("repeat")));
        }
        Err(_) => {
            for (id, name) in [(5, "protocol invariants"), (6, "synthetic end-to-end"), (7, "ablation direction"), (8, "determinism")] {
                report(&mut results, id, name, || Err("end-to-end training run failed".into()));
            }
        }
    }
    report(&mut results, 9, "split-run equivalence", split_run);

    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    println!("acceptance: {} of {} criteria pass", results.len() - failed.len(), results.len());
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
