//! Episodic training of the student decoder and the support weighting.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{load_teacher, Teacher};
use crate::checkpoint::{self, CheckpointMeta, FORMAT_VERSION};
use crate::episodes::{fixed_train_support, sample_train_episode, Episode, TaskManifest};
use crate::error::{Error, Result};
use crate::image_io::load_batch;
use crate::l2w::{ssd_l2w_loss_per_item, L2WParams};
use crate::losses::{combine, ssd_loss_per_item, tsd_loss_per_item, LossConfig};
use crate::nn::{self, init_rng};
use crate::optim::{Adam, AdamConfig};
use crate::pyramid::FeaturePyramid;
use crate::student::{build_student, StudentDecoder, StudentSpec, SupportFeatureBank};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    /// Every batch holds episodes of one task, sharing its supports.
    #[default]
    PerTask,
    Mixed,
}

impl std::str::FromStr for Batching {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_task" | "per-task" => Ok(Batching::PerTask),
            "mixed" => Ok(Batching::Mixed),
            other => Err(Error::Config(format!("unknown batching `{other}` (per_task|mixed)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// `lr · ½(1 + cos(π e / epochs))` at epoch `e` (0-based).
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    pub k: usize,
    pub loss: LossConfig,
    pub batching: Batching,
    /// Noise scale around identity for the support-weighting projections.
    pub l2w_init_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 70,
            batch_size: 64,
            learning_rate: 5e-3,
            lr_schedule: LrSchedule::Cosine,
            adam: AdamConfig::default(),
            seed: 0,
            k: 4,
            loss: LossConfig::default(),
            batching: Batching::PerTask,
            l2w_init_noise: crate::l2w::DEFAULT_INIT_NOISE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let a = &self.adam;
        let finite = [self.learning_rate, a.beta1, a.beta2, a.eps, a.weight_decay, self.l2w_init_noise];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("training hyperparameters must be finite".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        self.loss.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Which tasks a run trained on and the supports each one used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub held_out: Option<String>,
    pub train_tasks: Vec<TaskManifest>,
    pub supports: BTreeMap<String, Vec<PathBuf>>,
}

impl SplitInfo {
    pub fn train_task_ids(&self) -> Vec<&str> {
        self.train_tasks.iter().map(|t| t.task_id.as_str()).collect()
    }
}

/// Epoch means of the objective and its terms. `ssd` is absent when the
/// support term is disabled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub tsd: f64,
    pub ssd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub started_unix: u64,
    pub finished_unix: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    /// Merged configuration as supplied by the caller (CLI config file plus flags).
    pub effective_config: Option<serde_json::Value>,
    pub teacher: crate::backbone::TeacherSpec,
    pub student: StudentSpec,
    pub split: SplitInfo,
    pub teacher_checksum: String,
    pub parameter_checksum: String,
    pub loss_trace: Vec<EpochLoss>,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    /// Excluded from `content_checksum`.
    pub wall_clock: Option<WallClock>,
    /// sha256 over the manifest with `wall_clock` and this field cleared.
    pub content_checksum: String,
}

impl RunManifest {
    pub fn compute_content_checksum(&self) -> String {
        let mut stripped = self.clone();
        stripped.wall_clock = None;
        stripped.content_checksum = String::new();
        let bytes = serde_json::to_vec(&stripped).expect("manifest serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        checkpoint::write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Incompatible {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Teacher pyramids for individual images, computed once.
#[derive(Default)]
pub struct TeacherCache {
    items: HashMap<PathBuf, FeaturePyramid>,
}

const EXTRACT_CHUNK: usize = 32;

impl TeacherCache {
    pub fn warm(&mut self, teacher: &Teacher, paths: &[PathBuf]) -> Result<()> {
        let missing: Vec<PathBuf> = paths
            .iter()
            .filter(|p| !self.items.contains_key(*p))
            .cloned()
            .collect();
        for chunk in missing.chunks(EXTRACT_CHUNK) {
            let images = load_batch(chunk, teacher.input_size(), teacher.dtype(), teacher.device())?;
            for (path, pyr) in chunk.iter().zip(teacher.extract_pyramid(&images)?) {
                self.items.insert(path.clone(), pyr);
            }
        }
        Ok(())
    }

    /// Batched pyramid for `paths`, extracting any that are not cached.
    pub fn batch(&mut self, teacher: &Teacher, paths: &[PathBuf]) -> Result<FeaturePyramid> {
        self.warm(teacher, paths)?;
        let parts: Vec<&FeaturePyramid> = paths.iter().map(|p| &self.items[p]).collect();
        FeaturePyramid::cat(&parts)
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    teacher: Teacher,
    teacher_checksum: String,
    student: StudentDecoder,
    l2w: L2WParams,
    adam: Adam,
    epoch: usize,
    split: SplitInfo,
    loss_trace: Vec<EpochLoss>,
    cache: TeacherCache,
}

struct StepTotals {
    n: usize,
    tsd: f64,
    ssd: f64,
}

impl Trainer {
    /// Fresh run on `train_tasks`.
    pub fn new(
        cfg: TrainConfig,
        teacher: Teacher,
        student_spec: &StudentSpec,
        train_tasks: Vec<TaskManifest>,
        held_out: Option<String>,
    ) -> Result<Self> {
        cfg.validate()?;
        if train_tasks.is_empty() {
            return Err(Error::Config("no training tasks".into()));
        }
        if let Some(h) = &held_out {
            if train_tasks.iter().any(|t| &t.task_id == h) {
                return Err(Error::Config(format!("held-out task `{h}` is among the training tasks")));
            }
        }
        let mut supports = BTreeMap::new();
        for task in &train_tasks {
            task.validate()?;
            if supports.contains_key(&task.task_id) {
                return Err(Error::Config(format!("duplicate training task `{}`", task.task_id)));
            }
            supports.insert(task.task_id.clone(), fixed_train_support(task, cfg.k, cfg.seed)?);
        }
        let student = build_student(student_spec, &teacher)?;
        let l2w = L2WParams::new(
            cfg.loss.l2w_variant,
            teacher.level_shapes(),
            student_spec.seed,
            cfg.l2w_init_noise,
            student_spec.precision,
            teacher.device(),
        )?;
        let teacher_checksum = teacher.checksum()?;
        // Warm in a fixed order so fresh and resumed runs see identical features.
        let mut cache = TeacherCache::default();
        let mut all: Vec<PathBuf> = train_tasks.iter().flat_map(|t| t.normal_train.iter().cloned()).collect();
        all.sort();
        cache.warm(&teacher, &all)?;
        Ok(Self {
            adam: Adam::new(cfg.adam),
            cfg,
            teacher,
            teacher_checksum,
            student,
            l2w,
            epoch: 0,
            split: SplitInfo {
                held_out,
                train_tasks,
                supports,
            },
            loss_trace: Vec::new(),
            cache,
        })
    }

    /// Restores the full training state from a checkpoint.
    pub fn resume(path: &Path, device: &Device) -> Result<Self> {
        let ckpt = checkpoint::load(path, device)?;
        let meta = ckpt.meta;
        let teacher = load_teacher(&meta.teacher, device)?;
        let teacher_checksum = teacher.checksum()?;
        if teacher_checksum != meta.teacher_checksum {
            return Err(Error::Incompatible {
                path: path.to_path_buf(),
                reason: "teacher weights differ from the ones the run started with".into(),
            });
        }
        let mut trainer = Self::new(
            meta.train.clone(),
            teacher,
            &meta.student,
            meta.split.train_tasks.clone(),
            meta.split.held_out.clone(),
        )?;
        if trainer.split != meta.split {
            return Err(Error::Incompatible {
                path: path.to_path_buf(),
                reason: "recorded support split does not match its tasks".into(),
            });
        }
        trainer
            .student
            .params()
            .load(&ckpt.tensors, "student.")?;
        trainer
            .l2w
            .params()
            .load(&ckpt.tensors, "l2w.")?;
        trainer.adam = Adam::from_state(meta.train.adam, meta.optimizer_steps, &ckpt.tensors)?;
        trainer.epoch = meta.epoch;
        trainer.loss_trace = meta.loss_trace;
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn teacher(&self) -> &Teacher {
        &self.teacher
    }

    pub fn student(&self) -> &StudentDecoder {
        &self.student
    }

    pub fn l2w(&self) -> &L2WParams {
        &self.l2w
    }

    pub fn split(&self) -> &SplitInfo {
        &self.split
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn loss_trace(&self) -> &[EpochLoss] {
        &self.loss_trace
    }

    /// Checksum over student and weighting parameters.
    pub fn parameter_checksum(&self) -> Result<String> {
        let named = self.trainable_tensors();
        nn::checksum(named.iter().map(|(k, v)| (k, v)))
    }

    fn trainable_tensors(&self) -> Vec<(String, Tensor)> {
        let mut v = self.student.params().named_tensors("student.");
        v.extend(self.l2w.params().named_tensors("l2w."));
        v
    }

    /// Episodes of epoch `epoch` (0-based) in task order: each task yields
    /// `|normal_train| - K` draws.
    pub fn epoch_episodes(&self, epoch: usize) -> Result<Vec<Episode>> {
        let mut out = Vec::new();
        for task in &self.split.train_tasks {
            let n = (task.normal_train.len() - self.cfg.k) as u64;
            for j in 0..n {
                out.push(sample_train_episode(self.cfg.seed, task, self.cfg.k, epoch as u64 * n + j)?);
            }
        }
        Ok(out)
    }

    /// The epoch's episodes cut into batches in training order.
    pub fn epoch_batches(&self, epoch: usize) -> Result<Vec<Vec<Episode>>> {
        let episodes = self.epoch_episodes(epoch)?;
        let bs = self.cfg.batch_size;
        let mut rng = init_rng(self.cfg.seed, &format!("batches/{epoch}"));
        let mut batches: Vec<Vec<Episode>> = match self.cfg.batching {
            Batching::Mixed => {
                let mut all = episodes;
                all.shuffle(&mut rng);
                all.chunks(bs).map(|c| c.to_vec()).collect()
            }
            Batching::PerTask => {
                let mut by_task: BTreeMap<String, Vec<Episode>> = BTreeMap::new();
                for e in episodes {
                    by_task.entry(e.task_id.clone()).or_default().push(e);
                }
                let mut out = Vec::new();
                for (_, mut eps) in by_task {
                    eps.shuffle(&mut rng);
                    out.extend(eps.chunks(bs).map(|c| c.to_vec()));
                }
                out
            }
        };
        batches.shuffle(&mut rng);
        Ok(batches)
    }

    /// Trains up to `n` more epochs, stopping at the configured total.
    pub fn run_epochs(&mut self, n: usize) -> Result<&[EpochLoss]> {
        let start = self.loss_trace.len();
        for _ in 0..n {
            if self.is_finished() {
                break;
            }
            self.train_epoch()?;
        }
        Ok(&self.loss_trace[start..])
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        let remaining = self.cfg.epochs.saturating_sub(self.epoch);
        self.run_epochs(remaining).map(|_| ())
    }

    pub fn train_epoch(&mut self) -> Result<EpochLoss> {
        let epoch = self.epoch;
        let lr = self.cfg.lr_at(epoch);
        let mut sum = StepTotals { n: 0, tsd: 0.0, ssd: 0.0 };
        for batch in self.epoch_batches(epoch)? {
            let step = self.step(&batch, lr)?;
            sum.n += step.n;
            sum.tsd += step.tsd;
            sum.ssd += step.ssd;
        }
        let n = sum.n.max(1) as f64;
        let tsd = sum.tsd / n;
        let ssd = self.cfg.loss.use_ssd.then_some(sum.ssd / n);
        let record = EpochLoss {
            epoch: epoch + 1,
            lr,
            total: self.cfg.loss.lambda_weight * tsd + ssd.unwrap_or(0.0),
            tsd,
            ssd,
        };
        self.loss_trace.push(record);
        self.epoch += 1;
        Ok(record)
    }

    fn step(&mut self, batch: &[Episode], lr: f64) -> Result<StepTotals> {
        let loss_cfg = self.cfg.loss.clone();
        let eps = loss_cfg.epsilon;
        let mut groups: BTreeMap<&str, Vec<&Episode>> = BTreeMap::new();
        for e in batch {
            groups.entry(e.task_id.as_str()).or_default().push(e);
        }
        let mut tsd_terms = Vec::new();
        let mut ssd_terms = Vec::new();
        let mut totals = StepTotals { n: 0, tsd: 0.0, ssd: 0.0 };
        for (_, eps_group) in groups {
            let queries: Vec<PathBuf> = eps_group.iter().map(|e| e.query.clone()).collect();
            let support = &eps_group[0].support;
            let n = queries.len();
            let mut paths = queries.clone();
            paths.extend(support.iter().cloned());
            let teacher_pyr = self.cache.batch(&self.teacher, &paths)?;
            let student_pyr = self.student.forward(teacher_pyr.deepest())?;
            let q_teacher = teacher_pyr.narrow(0, n)?;
            let q_student = student_pyr.narrow(0, n)?;

            let tsd = tsd_loss_per_item(&q_teacher, &q_student, eps)?;
            check_items(&tsd, "tsd", &eps_group)?;
            totals.tsd += tsd.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            tsd_terms.push(tsd.sum_all()?);

            if loss_cfg.use_ssd {
                let ids = support.iter().map(|p| p.display().to_string()).collect();
                let bank = SupportFeatureBank::new(student_pyr.narrow(n, support.len())?, ids)?;
                let ssd = if loss_cfg.use_l2w {
                    ssd_l2w_loss_per_item(&self.l2w, &q_student, &bank, eps, loss_cfg.support_stop_gradient)
                } else {
                    ssd_loss_per_item(&bank, &q_student, eps, loss_cfg.support_stop_gradient)
                }
                .map_err(|e| with_episode(e, &eps_group))?;
                check_items(&ssd, "ssd", &eps_group)?;
                totals.ssd += ssd.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
                ssd_terms.push(ssd.sum_all()?);
            }
            totals.n += n;
        }
        let n = totals.n as f64;
        let tsd = (Tensor::stack(&tsd_terms, 0)?.sum_all()? / n)?;
        let ssd = if ssd_terms.is_empty() {
            None
        } else {
            Some((Tensor::stack(&ssd_terms, 0)?.sum_all()? / n)?)
        };
        let tsd = (loss_cfg.lambda_weight > 0.0).then_some(tsd);
        let loss = combine(&loss_cfg, tsd.as_ref(), ssd.as_ref())?;
        let grads = loss.backward()?;
        self.adam.step(
            &[("student", self.student.params()), ("l2w", self.l2w.params())],
            &grads,
            lr,
        )?;
        Ok(totals)
    }

    fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            epoch: self.epoch,
            optimizer_steps: self.adam.steps_taken(),
            teacher: self.teacher.spec().clone(),
            teacher_checksum: self.teacher_checksum.clone(),
            student: self.student.spec().clone(),
            l2w_variant: self.l2w.variant(),
            train: self.cfg.clone(),
            split: self.split.clone(),
            loss_trace: self.loss_trace.clone(),
        }
    }

    /// Writes `student_ep{epoch}.ckpt` into `dir` and returns its path.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        let mut tensors = self.trainable_tensors();
        tensors.extend(self.adam.state_tensors());
        let path = dir.join(checkpoint::checkpoint_file_name(self.epoch));
        checkpoint::save(&path, &self.checkpoint_meta(), tensors)?;
        Ok(path)
    }

    /// Fails if the frozen teacher's parameters changed during the run.
    pub fn verify_teacher_unchanged(&self) -> Result<()> {
        if self.teacher.checksum()? != self.teacher_checksum {
            return Err(Error::State("teacher parameters changed during training".into()));
        }
        Ok(())
    }

    /// Saves the checkpoint and writes the run manifest next to it.
    pub fn finish(
        &self,
        dir: &Path,
        effective_config: Option<serde_json::Value>,
        started: Option<(SystemTime, Instant)>,
    ) -> Result<(PathBuf, RunManifest)> {
        self.verify_teacher_unchanged()?;
        let ckpt = self.save_checkpoint(dir)?;
        let wall_clock = started.map(|(t0, i0)| WallClock {
            started_unix: unix(t0),
            finished_unix: unix(SystemTime::now()),
            seconds: i0.elapsed().as_secs_f64(),
        });
        let mut manifest = RunManifest {
            config: self.cfg.clone(),
            effective_config,
            teacher: self.teacher.spec().clone(),
            student: self.student.spec().clone(),
            split: self.split.clone(),
            teacher_checksum: self.teacher_checksum.clone(),
            parameter_checksum: self.parameter_checksum()?,
            loss_trace: self.loss_trace.clone(),
            checkpoint: ckpt
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            checkpoint_sha256: checkpoint::sha256_file(&ckpt)?,
            wall_clock,
            content_checksum: String::new(),
        };
        manifest.content_checksum = manifest.compute_content_checksum();
        manifest.write(&dir.join(MANIFEST_FILE))?;
        Ok((ckpt, manifest))
    }
}

fn unix(t: SystemTime) -> u64 {
    t.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn with_episode(err: Error, group: &[&Episode]) -> Error {
    match err {
        Error::Numeric { term, context: None } => Error::Numeric {
            term,
            context: Some(format!("batch starting at episode {}", group[0].id())),
        },
        other => other,
    }
}

fn check_items(values: &Tensor, term: &str, group: &[&Episode]) -> Result<()> {
    let v = values.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    match v.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numeric {
            term: term.to_string(),
            context: Some(format!("episode {}", group[i].id())),
        }),
    }
}
