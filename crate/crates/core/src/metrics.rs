//! AUROC, evaluation trials and CSV exports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::episodes::{select_infer_support, Label, SupportMode, TaskManifest};
use crate::error::{Error, Result};
use crate::scoring::Detector;

/// Seeds of random-support trials when none are given.
pub const DEFAULT_TRIAL_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Probability that a random abnormal outscores a random normal, ties
/// counted one half. Computed from the exact doubled Mann-Whitney count.
pub fn auroc(scores: &[(f64, Label)]) -> Result<f64> {
    if scores.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::numeric("auroc scores"));
    }
    let n_abn = scores.iter().filter(|(_, l)| *l == Label::Abnormal).count() as u64;
    let n_norm = scores.len() as u64 - n_abn;
    if n_abn == 0 || n_norm == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes; got {n_norm} normal and {n_abn} abnormal"
        )));
    }
    let mut sorted: Vec<(f64, Label)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Walk tie groups in ascending order: each abnormal beats every normal
    // below its group (2 points) and ties the normals inside it (1 point).
    let mut doubled: u128 = 0;
    let mut normals_below: u64 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let group = &sorted[i..j];
        let abn = group.iter().filter(|(_, l)| *l == Label::Abnormal).count() as u64;
        let norm = group.len() as u64 - abn;
        doubled += abn as u128 * (2 * normals_below as u128 + norm as u128);
        normals_below += norm;
        i = j;
    }
    Ok(doubled as f64 / (2.0 * n_abn as f64 * n_norm as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub seed: u64,
    pub auroc: f64,
    pub support: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: String,
    pub k: usize,
    pub mode: SupportMode,
    pub trials: Vec<Trial>,
    pub mean_auroc: f64,
    /// Population standard deviation over trials.
    pub std_auroc: f64,
    pub score_table: Option<String>,
}

impl EvalReport {
    pub fn from_trials(task_id: &str, k: usize, mode: SupportMode, trials: Vec<Trial>) -> Self {
        let (mean, std) = mean_std(&trials.iter().map(|t| t.auroc).collect::<Vec<_>>());
        Self {
            task_id: task_id.to_string(),
            k,
            mode,
            trials,
            mean_auroc: mean,
            std_auroc: std,
            score_table: None,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One scored query of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredQuery {
    pub trial_seed: u64,
    pub path: PathBuf,
    pub label: Label,
    pub score: f64,
}

/// Scores the task's test images once per trial seed and summarizes AUROC.
/// Fixed mode uses one deterministic support set for every trial.
pub fn run_eval(
    detector: &Detector,
    task: &TaskManifest,
    k: usize,
    mode: SupportMode,
    seeds: &[u64],
    workers: usize,
) -> Result<(EvalReport, Vec<ScoredQuery>)> {
    if seeds.is_empty() {
        return Err(Error::Config("evaluation needs at least one trial".into()));
    }
    if task.normal_test.is_empty() || task.abnormal_test.is_empty() {
        return Err(Error::Data(format!(
            "task {} needs normal and abnormal test images",
            task.task_id
        )));
    }
    let mut trials = Vec::with_capacity(seeds.len());
    let mut rows = Vec::new();
    for &seed in seeds {
        let sel = select_infer_support(task, k, mode, seed)?;
        let bank = detector.support_bank(&sel.support)?;
        let paths: Vec<PathBuf> = sel.queries.iter().map(|(p, _)| p.clone()).collect();
        let maps = detector.score_paths_parallel(&bank, &paths, workers)?;
        let scored: Vec<(f64, Label)> = maps
            .iter()
            .zip(&sel.queries)
            .map(|(m, (_, l))| (m.image_score, *l))
            .collect();
        trials.push(Trial {
            seed,
            auroc: auroc(&scored)?,
            support: sel.support.clone(),
        });
        rows.extend(sel.queries.iter().zip(&maps).map(|((p, l), m)| ScoredQuery {
            trial_seed: seed,
            path: p.clone(),
            label: *l,
            score: m.image_score,
        }));
    }
    Ok((EvalReport::from_trials(&task.task_id, k, mode, trials), rows))
}

pub fn write_scores_csv(rows: &[ScoredQuery], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["trial_seed", "query_path", "score", "label"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.trial_seed.to_string(),
            r.path.display().to_string(),
            format!("{:.17e}", r.score),
            r.label.as_str().to_string(),
        ])
        .map_err(csv_err)?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| Error::State(e.to_string()))?)
}

fn csv_err(e: csv::Error) -> Error {
    Error::State(format!("csv encoding: {e}"))
}

/// Linear-interpolation quantile of sorted data (the common "type 7" rule).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassSummary {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl ClassSummary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Some(Self {
            count: s.len(),
            min: s[0],
            q1: quantile_sorted(&s, 0.25),
            median: quantile_sorted(&s, 0.5),
            q3: quantile_sorted(&s, 0.75),
            max: s[s.len() - 1],
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// CSV with one `data` row per score and one `summary` row per class.
/// Columns: `row_type,label,score,count,min,q1,median,q3,max,iqr`.
pub fn export_score_distribution(scores: &[(f64, Label)], path: &Path) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Precondition("no scores to export".into()));
    }
    let mut out = String::from("row_type,label,score,count,min,q1,median,q3,max,iqr\n");
    for (s, l) in scores {
        writeln!(out, "data,{},{s:e},,,,,,,", l.as_str()).expect("string write");
    }
    for label in [Label::Normal, Label::Abnormal] {
        let values: Vec<f64> = scores.iter().filter(|(_, l)| *l == label).map(|(s, _)| *s).collect();
        if let Some(c) = ClassSummary::of(&values) {
            writeln!(
                out,
                "summary,{},,{},{:e},{:e},{:e},{:e},{:e},{:e}",
                label.as_str(),
                c.count,
                c.min,
                c.q1,
                c.median,
                c.q3,
                c.max,
                c.iqr()
            )
            .expect("string write");
        }
    }
    write_atomic(path, out.as_bytes())
}

/// CSV rows `path,label,f0,…` with the pooled deepest student feature.
pub fn export_embeddings(detector: &Detector, items: &[(PathBuf, Label)], path: &Path) -> Result<usize> {
    let paths: Vec<PathBuf> = items.iter().map(|(p, _)| p.clone()).collect();
    let vectors = detector.embed(&paths)?;
    let dim = vectors.first().map_or(0, |v| v.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["path".to_string(), "label".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for ((p, l), v) in items.iter().zip(&vectors) {
        let mut rec = vec![p.display().to_string(), l.as_str().to_string()];
        rec.extend(v.iter().map(|x| format!("{x:e}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| Error::State(e.to_string()))?)?;
    Ok(vectors.len())
}
