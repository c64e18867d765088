//! Task manifests, leave-one-out splits, and episode construction.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::nn::init_rng;

pub const MANIFEST_FILE: &str = "manifest.json";
/// Seed of the single support draw used by fixed-support evaluation.
pub const FIXED_SUPPORT_SEED: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Normal => Label::Abnormal,
            Label::Abnormal => Label::Normal,
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Label::Normal),
            "abnormal" => Ok(Label::Abnormal),
            other => Err(Error::Data(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub task_id: String,
    pub modality: String,
    pub normal_train: Vec<PathBuf>,
    pub normal_test: Vec<PathBuf>,
    pub abnormal_test: Vec<PathBuf>,
}

impl TaskManifest {
    /// Errors if any image appears in two splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for p in self
            .normal_train
            .iter()
            .chain(&self.normal_test)
            .chain(&self.abnormal_test)
        {
            if !seen.insert(p) {
                return Err(Error::Data(format!(
                    "task {}: {} appears in more than one split",
                    self.task_id,
                    p.display()
                )));
            }
        }
        Ok(())
    }

    /// All test images with their labels, normals first.
    pub fn test_items(&self) -> Vec<(PathBuf, Label)> {
        self.normal_test
            .iter()
            .map(|p| (p.clone(), Label::Normal))
            .chain(self.abnormal_test.iter().map(|p| (p.clone(), Label::Abnormal)))
            .collect()
    }

    pub fn all_images(&self) -> impl Iterator<Item = &PathBuf> {
        self.normal_train
            .iter()
            .chain(&self.normal_test)
            .chain(&self.abnormal_test)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").at(path)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("bad manifest {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeRole {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub task_id: String,
    pub query: PathBuf,
    pub support: Vec<PathBuf>,
    pub role: EpisodeRole,
}

impl Episode {
    pub fn id(&self) -> String {
        format!(
            "{}:{}",
            self.task_id,
            self.query.file_name().map(|f| f.to_string_lossy()).unwrap_or_default()
        )
    }
}

/// Splits `manifests` into training tasks and the held-out test task.
pub fn build_leave_one_out(
    manifests: &[TaskManifest],
    held_out: &str,
) -> Result<(Vec<TaskManifest>, TaskManifest)> {
    if manifests.len() < 2 {
        return Err(Error::Config(format!(
            "leave-one-out needs at least 2 tasks, got {}",
            manifests.len()
        )));
    }
    let test = manifests
        .iter()
        .find(|m| m.task_id == held_out)
        .cloned()
        .ok_or_else(|| {
            Error::Config(format!(
                "held-out task `{held_out}` not among {:?}",
                manifests.iter().map(|m| &m.task_id).collect::<Vec<_>>()
            ))
        })?;
    let train = manifests
        .iter()
        .filter(|m| m.task_id != held_out)
        .cloned()
        .collect();
    Ok((train, test))
}

fn seeded_shuffle(items: &[PathBuf], seed: u64, stream: &str) -> Vec<PathBuf> {
    let mut v = items.to_vec();
    v.shuffle(&mut init_rng(seed, stream));
    v
}

/// The task's fixed training supports: the first `k` normals of the
/// split-seeded shuffle of `normal_train`.
pub fn fixed_train_support(task: &TaskManifest, k: usize, split_seed: u64) -> Result<Vec<PathBuf>> {
    if k == 0 {
        return Err(Error::Precondition("support size K must be at least 1".into()));
    }
    if task.normal_train.len() < k + 1 {
        return Err(Error::Data(format!(
            "task {} has {} training normals; K={k} needs at least {}",
            task.task_id,
            task.normal_train.len(),
            k + 1
        )));
    }
    let shuffled = seeded_shuffle(&task.normal_train, split_seed, &format!("support/{}", task.task_id));
    Ok(shuffled[..k].to_vec())
}

/// Training episode number `draw_index`: fixed supports, query drawn
/// uniformly from the task's remaining normals.
pub fn sample_train_episode(
    rng_seed: u64,
    task: &TaskManifest,
    k: usize,
    draw_index: u64,
) -> Result<Episode> {
    let support = fixed_train_support(task, k, rng_seed)?;
    let pool: Vec<&PathBuf> = task
        .normal_train
        .iter()
        .filter(|p| !support.contains(p))
        .collect();
    let mut rng = init_rng(rng_seed, &format!("query/{}/{draw_index}", task.task_id));
    let query = pool[rng.random_range(0..pool.len())].clone();
    Ok(Episode {
        task_id: task.task_id.clone(),
        query,
        support,
        role: EpisodeRole::Train,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportMode {
    Fixed,
    Random,
}

impl std::str::FromStr for SupportMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(SupportMode::Fixed),
            "random" => Ok(SupportMode::Random),
            other => Err(Error::Config(format!("unknown support mode `{other}` (fixed|random)"))),
        }
    }
}

/// Supports for one evaluation trial and the queries left to score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferSupport {
    pub support: Vec<PathBuf>,
    pub queries: Vec<(PathBuf, Label)>,
}

/// Draws `k` inference supports from the task's reserved normal pool
/// (`normal_train`, never scored) and removes them from the query pool.
pub fn select_infer_support(
    task: &TaskManifest,
    k: usize,
    mode: SupportMode,
    trial_seed: u64,
) -> Result<InferSupport> {
    if k == 0 {
        return Err(Error::Precondition("support size K must be at least 1".into()));
    }
    if task.normal_train.len() < k {
        return Err(Error::Data(format!(
            "task {} has {} reserved normals, fewer than K={k}",
            task.task_id,
            task.normal_train.len()
        )));
    }
    let seed = match mode {
        SupportMode::Fixed => FIXED_SUPPORT_SEED,
        SupportMode::Random => trial_seed,
    };
    let support = seeded_shuffle(&task.normal_train, seed, &format!("infer/{}", task.task_id))[..k].to_vec();
    let queries = task
        .test_items()
        .into_iter()
        .filter(|(p, _)| !support.contains(p))
        .collect();
    Ok(InferSupport { support, queries })
}

/// Relative locations of the three image folders under a task root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FolderLayout {
    pub train_normal: PathBuf,
    pub test_normal: PathBuf,
    pub test_abnormal: PathBuf,
    pub extensions: Vec<String>,
}

impl Default for FolderLayout {
    fn default() -> Self {
        Self {
            train_normal: "train/normal".into(),
            test_normal: "test/normal".into(),
            test_abnormal: "test/abnormal".into(),
            extensions: ["png", "jpg", "jpeg", "bmp"].map(String::from).to_vec(),
        }
    }
}

fn list_images(root: &Path, rel: &Path, extensions: &[String]) -> Result<Vec<PathBuf>> {
    let dir = root.join(rel);
    if !dir.is_dir() {
        return Err(Error::Layout {
            root: root.to_path_buf(),
            missing: rel.display().to_string(),
        });
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(&dir).at(&dir)? {
        let path = entry.at(&dir)?.path();
        let ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| extensions.iter().any(|x| x.eq_ignore_ascii_case(e)));
        if ok && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Scans one task folder. Paths are sorted; images are decoded lazily.
pub fn load_folder_dataset(root: &Path, layout: &FolderLayout) -> Result<TaskManifest> {
    let task_id = root
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .ok_or_else(|| Error::Config(format!("cannot name task at {}", root.display())))?;
    let modality = match TaskManifest::read_json(&root.join(MANIFEST_FILE)) {
        Ok(cached) => cached.modality,
        Err(_) => "unknown".to_string(),
    };
    let manifest = TaskManifest {
        task_id,
        modality,
        normal_train: list_images(root, &layout.train_normal, &layout.extensions)?,
        normal_test: list_images(root, &layout.test_normal, &layout.extensions)?,
        abnormal_test: list_images(root, &layout.test_abnormal, &layout.extensions)?,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Every task folder directly under `root`, ordered by name.
pub fn load_benchmark(root: &Path, layout: &FolderLayout) -> Result<Vec<TaskManifest>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).at(root)? {
        let path = entry.at(root)?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no task folders under {}", root.display())));
    }
    dirs.iter().map(|d| load_folder_dataset(d, layout)).collect()
}
