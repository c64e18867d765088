//! Anomaly maps and image scores for queries against a support set.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, D};
use image::{ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backbone::{load_teacher, Teacher};
use crate::checkpoint;
use crate::error::{Error, IoContext, Result};
use crate::image_io::{load_batch, open_image};
use crate::l2w::{compute_weights, mean_dissimilarity_maps, weighted_dissimilarity_maps, L2WParams};
use crate::losses::LossConfig;
use crate::pyramid::FeaturePyramid;
use crate::student::{support_forward, StudentDecoder, SupportFeatureBank};

/// Queries per forward pass. Fixed so scores never depend on how callers
/// split their work.
pub const SCORE_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreReduce {
    #[default]
    Mean,
    /// Comparison only; not the method's score.
    Max,
}

impl FromStr for ScoreReduce {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ScoreReduce::Mean),
            "max" => Ok(ScoreReduce::Max),
            other => Err(Error::Config(format!("unknown score reduction `{other}` (mean|max)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    /// Row-major `height × width`, every value ≥ 0.
    pub map: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub image_score: f64,
    /// Per-level maps at their native resolution, row-major.
    pub per_level: Vec<Vec<f64>>,
}

impl AnomalyMap {
    pub fn mean(&self) -> f64 {
        self.map.iter().sum::<f64>() / self.map.len() as f64
    }
}

/// Trained student plus weighting head, ready to score.
#[derive(Debug, Clone)]
pub struct Detector {
    teacher: Teacher,
    student: StudentDecoder,
    l2w: L2WParams,
    loss: LossConfig,
    reduce: ScoreReduce,
}

impl Detector {
    /// Detector from in-memory modules; performs no training-state check.
    pub fn new(teacher: Teacher, student: StudentDecoder, l2w: L2WParams, loss: LossConfig) -> Self {
        Self {
            teacher,
            student,
            l2w,
            loss,
            reduce: ScoreReduce::Mean,
        }
    }

    /// Loads a trained checkpoint. A checkpoint saved before any training
    /// epoch is a state error.
    pub fn from_checkpoint(path: &Path, device: &Device) -> Result<Self> {
        let ckpt = checkpoint::load(path, device)?;
        let meta = &ckpt.meta;
        if meta.epoch == 0 {
            return Err(Error::State(format!("{} holds an untrained student", path.display())));
        }
        let teacher = load_teacher(&meta.teacher, device)?;
        if teacher.checksum()? != meta.teacher_checksum {
            return Err(Error::Incompatible {
                path: path.to_path_buf(),
                reason: "teacher weights differ from the ones used in training".into(),
            });
        }
        let student = crate::student::build_student(&meta.student, &teacher)?;
        student.params().load(&ckpt.tensors, "student.")?;
        let l2w = L2WParams::new(
            meta.l2w_variant,
            teacher.level_shapes(),
            meta.student.seed,
            0.0,
            meta.student.precision,
            device,
        )?;
        l2w.params().load(&ckpt.tensors, "l2w.")?;
        Ok(Self::new(teacher, student, l2w, meta.train.loss.clone()))
    }

    pub fn with_reduce(mut self, reduce: ScoreReduce) -> Self {
        self.reduce = reduce;
        self
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

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    pub fn input_size(&self) -> usize {
        self.teacher.input_size()
    }

    /// Student pyramids of the support images, computed once per support set.
    pub fn support_bank(&self, support: &[PathBuf]) -> Result<SupportFeatureBank> {
        let images = self.load(support)?;
        let ids = support.iter().map(|p| p.display().to_string()).collect();
        Ok(support_forward(&self.student, &self.teacher, &images, ids)?.detach())
    }

    fn load(&self, paths: &[PathBuf]) -> Result<Tensor> {
        load_batch(paths, self.teacher.input_size(), self.teacher.dtype(), self.teacher.device())
    }

    pub fn student_pyramid(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let t = self.teacher.extract(images)?;
        Ok(self.student.forward(t.deepest())?.detach())
    }

    /// Scores preprocessed images `(N, 3, S, S)`.
    pub fn score_tensor(&self, bank: &SupportFeatureBank, images: &Tensor) -> Result<Vec<AnomalyMap>> {
        let query = self.student_pyramid(images)?;
        let eps = self.loss.epsilon;
        let maps = if self.loss.use_l2w {
            let w = compute_weights(&self.l2w, &query, bank)?;
            weighted_dissimilarity_maps(&w, &query, bank, eps, true)?
        } else {
            mean_dissimilarity_maps(&query, bank, eps)?
        };
        aggregate(&maps, self.teacher.input_size(), self.reduce)
    }

    pub fn score_paths(&self, bank: &SupportFeatureBank, paths: &[PathBuf]) -> Result<Vec<AnomalyMap>> {
        let mut out = Vec::with_capacity(paths.len());
        for chunk in paths.chunks(SCORE_CHUNK) {
            out.extend(self.score_tensor(bank, &self.load(chunk)?)?);
        }
        Ok(out)
    }

    /// Like [`Self::score_paths`], with chunks spread over `workers` threads.
    pub fn score_paths_parallel(
        &self,
        bank: &SupportFeatureBank,
        paths: &[PathBuf],
        workers: usize,
    ) -> Result<Vec<AnomalyMap>> {
        let chunks: Vec<&[PathBuf]> = paths.chunks(SCORE_CHUNK).collect();
        if workers <= 1 || chunks.len() <= 1 {
            return self.score_paths(bank, paths);
        }
        let per_worker = chunks.len().div_ceil(workers);
        let results: Vec<Result<Vec<AnomalyMap>>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .chunks(per_worker)
                .map(|group| {
                    s.spawn(move || {
                        let mut out = Vec::new();
                        for chunk in group {
                            out.extend(self.score_tensor(bank, &self.load(chunk)?)?);
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("scoring thread panicked")).collect()
        });
        let mut out = Vec::with_capacity(paths.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }

    pub fn score_query(&self, support: &[PathBuf], query: &Path) -> Result<AnomalyMap> {
        let bank = self.support_bank(support)?;
        let mut maps = self.score_paths(&bank, &[query.to_path_buf()])?;
        Ok(maps.remove(0))
    }

    /// Spatially averaged deepest student level per image.
    pub fn embed(&self, paths: &[PathBuf]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(paths.len());
        for chunk in paths.chunks(SCORE_CHUNK) {
            let pyr = self.student_pyramid(&self.load(chunk)?)?;
            let pooled = pyr.deepest().mean(D::Minus1)?.mean(D::Minus1)?.to_dtype(DType::F64)?;
            out.extend(pooled.to_vec2::<f64>()?);
        }
        Ok(out)
    }
}

/// Bilinear upsampling of every level to `size`×`size`, mean across levels,
/// clamp at zero, then the image score.
fn aggregate(levels: &[Tensor], size: usize, reduce: ScoreReduce) -> Result<Vec<AnomalyMap>> {
    let mut up = Vec::with_capacity(levels.len());
    let mut native = Vec::with_capacity(levels.len());
    for m in levels {
        let m = m.to_dtype(DType::F64)?;
        native.push(m.flatten_from(1)?.to_vec2::<f64>()?);
        let (_, h, w) = m.dims3()?;
        let u = if (h, w) == (size, size) {
            m
        } else {
            m.unsqueeze(1)?.upsample_bilinear2d(size, size, false)?.squeeze(1)?
        };
        up.push(u);
    }
    let combined = Tensor::stack(&up, 0)?.mean(0)?.clamp(0.0, f64::INFINITY)?;
    let flat = combined.flatten_from(1)?.to_vec2::<f64>()?;
    let mut out = Vec::with_capacity(flat.len());
    for (i, map) in flat.into_iter().enumerate() {
        if map.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("anomaly map"));
        }
        let image_score = match reduce {
            ScoreReduce::Mean => map.iter().sum::<f64>() / map.len() as f64,
            ScoreReduce::Max => map.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        };
        out.push(AnomalyMap {
            map,
            height: size,
            width: size,
            image_score,
            per_level: native.iter().map(|lvl| lvl[i].clone()).collect(),
        });
    }
    Ok(out)
}

fn jet(t: f32) -> [f32; 3] {
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Path of the query copy written next to a heatmap.
pub fn query_copy_path(heatmap: &Path) -> PathBuf {
    let stem = heatmap.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    heatmap.with_file_name(format!("{stem}_query.png"))
}

/// Writes a min-max normalized jet overlay at the query's dimensions to
/// `path` (PNG) and a copy of the query next to it.
pub fn export_heatmap(map: &AnomalyMap, query_image: &Path, path: &Path) -> Result<()> {
    if map.map.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("heatmap source map has non-finite values".into()));
    }
    let query = open_image(query_image)?.to_rgb8();
    let (qw, qh) = query.dimensions();
    let lo = map.map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let norm: Vec<f32> = map
        .map
        .iter()
        .map(|v| if span > 0.0 { ((v - lo) / span) as f32 } else { 0.0 })
        .collect();
    let small: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(map.width as u32, map.height as u32, norm)
            .ok_or_else(|| Error::Shape("map size does not match its dimensions".into()))?;
    let resized = image::imageops::resize(&small, qw, qh, image::imageops::FilterType::Triangle);
    let overlay = RgbImage::from_fn(qw, qh, |x, y| {
        let c = jet(resized.get_pixel(x, y)[0].clamp(0.0, 1.0));
        let q = query.get_pixel(x, y);
        Rgb(std::array::from_fn(|i| {
            (0.5 * q[i] as f32 + 0.5 * 255.0 * c[i]).round().clamp(0.0, 255.0) as u8
        }))
    });
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    save_png(&overlay, path)?;
    save_png(&query, &query_copy_path(path))
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}
