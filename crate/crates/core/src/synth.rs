//! Procedural few-shot anomaly benchmark.
//!
//! Each task is one pattern family. The task draws a template once; its
//! normals are the template with small shifts, phase, contrast and brightness
//! changes plus pixel noise. Abnormal images are normals with one localized
//! edit covering 1–10% of the image. Output follows the folder layout read by
//! [`crate::episodes::load_folder_dataset`].

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::episodes::{TaskManifest, MANIFEST_FILE};
use crate::error::{Error, IoContext, Result};
use crate::nn::init_rng;

pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";
pub const BENCHMARK_FILE: &str = "benchmark.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternFamily {
    Blobs,
    Stripes,
    Rings,
    Checker,
}

impl PatternFamily {
    pub const ALL: [PatternFamily; 4] = [Self::Blobs, Self::Stripes, Self::Rings, Self::Checker];

    pub fn name(self) -> &'static str {
        match self {
            Self::Blobs => "blobs",
            Self::Stripes => "stripes",
            Self::Rings => "rings",
            Self::Checker => "checker",
        }
    }
}

impl std::str::FromStr for PatternFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pattern family `{s}` (blobs|stripes|rings|checker)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyOp {
    PatchSwap,
    IntensitySpot,
    ShapeInsert,
}

impl std::str::FromStr for AnomalyOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch_swap" => Ok(Self::PatchSwap),
            "intensity_spot" => Ok(Self::IntensitySpot),
            "shape_insert" => Ok(Self::ShapeInsert),
            other => Err(Error::Config(format!(
                "unknown anomaly op `{other}` (patch_swap|intensity_spot|shape_insert)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthCounts {
    pub train_normal: usize,
    pub test_normal: usize,
    pub test_abnormal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub task_id: String,
    pub pattern_family: PatternFamily,
    pub anomaly_op: AnomalyOp,
    pub image_size: usize,
    pub counts: SynthCounts,
    pub noise_level: f64,
    #[serde(default)]
    pub variation: Variation,
    pub seed: u64,
}

/// Ground truth of one abnormal image (inspection only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyBox {
    pub file: String,
    pub op: AnomalyOp,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub area_fraction: f64,
}

/// Grayscale canvas with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub size: usize,
    pub pixels: Vec<f64>,
}

impl Canvas {
    fn new(size: usize, fill: f64) -> Self {
        Self {
            size,
            pixels: vec![fill; size * size],
        }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.size + x]
    }

    fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.size + x] = v;
    }

    pub fn to_image(&self) -> GrayImage {
        let n = self.size as u32;
        GrayImage::from_fn(n, n, |x, y| {
            let v = self.at(x as usize, y as usize).clamp(0.0, 1.0);
            Luma([(v * 255.0).round() as u8])
        })
    }
}

/// Per-image deviation of a normal from its task template.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Variation {
    /// Maximum translation of pattern features, in units of `size / 32` pixels.
    pub shift: f64,
    /// Maximum phase offset of periodic patterns, radians.
    pub phase: f64,
    /// Maximum relative change of pattern contrast.
    pub gain: f64,
    /// Maximum change of background brightness.
    pub brightness: f64,
}

impl Default for Variation {
    fn default() -> Self {
        Self {
            shift: 2.0,
            phase: 0.6,
            gain: 0.1,
            brightness: 0.03,
        }
    }
}

impl Variation {
    fn validate(&self) -> Result<()> {
        let v = [self.shift, self.phase, self.gain, self.brightness];
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) || self.gain >= 1.0 {
            return Err(Error::Config(format!("invalid variation {self:?}")));
        }
        Ok(())
    }
}

/// Concrete layout of one pattern; a task draws one as its template.
#[derive(Debug, Clone, PartialEq)]
pub enum Pattern {
    Blobs { base: f64, blobs: Vec<(f64, f64, f64, f64)> },
    Stripes { base: f64, theta: f64, period: f64, phase: f64, amp: f64 },
    Rings { base: f64, cx: f64, cy: f64, period: f64, phase: f64, amp: f64 },
    Checker { base: f64, cell: f64, ox: f64, oy: f64, amp: f64 },
}

fn sym(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    if max > 0.0 {
        rng.random_range(-max..=max)
    } else {
        0.0
    }
}

impl Pattern {
    pub fn draw(family: PatternFamily, size: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = size as f64;
        let unit = s / 32.0;
        let base = rng.random_range(0.4..0.6);
        match family {
            PatternFamily::Blobs => {
                let n = rng.random_range(4..=7);
                let blobs = (0..n)
                    .map(|_| {
                        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        (
                            rng.random_range(0.0..s),
                            rng.random_range(0.0..s),
                            rng.random_range(2.5..4.5) * unit,
                            sign * rng.random_range(0.15..0.3),
                        )
                    })
                    .collect();
                Pattern::Blobs { base, blobs }
            }
            PatternFamily::Stripes => Pattern::Stripes {
                base,
                theta: rng.random_range(0.0..PI),
                period: rng.random_range(5.0..8.0) * unit,
                phase: rng.random_range(0.0..2.0 * PI),
                amp: rng.random_range(0.2..0.3),
            },
            PatternFamily::Rings => Pattern::Rings {
                base,
                cx: s / 2.0 + rng.random_range(-3.0..3.0) * unit,
                cy: s / 2.0 + rng.random_range(-3.0..3.0) * unit,
                period: rng.random_range(5.0..8.0) * unit,
                phase: rng.random_range(0.0..2.0 * PI),
                amp: rng.random_range(0.2..0.3),
            },
            PatternFamily::Checker => {
                let cell = rng.random_range(4.0..6.0) * unit;
                Pattern::Checker {
                    base,
                    cell,
                    ox: rng.random_range(0.0..2.0 * cell),
                    oy: rng.random_range(0.0..2.0 * cell),
                    amp: rng.random_range(0.15..0.25),
                }
            }
        }
    }

    /// A normal instance: the template moved, re-phased and re-scaled within `var`.
    pub fn jittered(&self, var: &Variation, size: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = var.shift * size as f64 / 32.0;
        let gain = 1.0 + sym(rng, var.gain);
        let db = sym(rng, var.brightness);
        match self {
            Pattern::Blobs { base, blobs } => Pattern::Blobs {
                base: base + db,
                blobs: blobs
                    .iter()
                    .map(|&(x, y, sg, a)| (x + sym(rng, d), y + sym(rng, d), sg, a * gain))
                    .collect(),
            },
            Pattern::Stripes { base, theta, period, phase, amp } => Pattern::Stripes {
                base: base + db,
                theta: *theta,
                period: *period,
                phase: phase + sym(rng, var.phase) + 2.0 * PI * sym(rng, d) / period,
                amp: amp * gain,
            },
            Pattern::Rings { base, cx, cy, period, phase, amp } => Pattern::Rings {
                base: base + db,
                cx: cx + sym(rng, d),
                cy: cy + sym(rng, d),
                period: *period,
                phase: phase + sym(rng, var.phase),
                amp: amp * gain,
            },
            Pattern::Checker { base, cell, ox, oy, amp } => Pattern::Checker {
                base: base + db,
                cell: *cell,
                ox: ox + sym(rng, d),
                oy: oy + sym(rng, d),
                amp: amp * gain,
            },
        }
    }

    pub fn render(&self, size: usize) -> Canvas {
        let mut c = Canvas::new(size, 0.0);
        for y in 0..size {
            for x in 0..size {
                let (xf, yf) = (x as f64, y as f64);
                let v = match self {
                    Pattern::Blobs { base, blobs } => {
                        base + blobs
                            .iter()
                            .map(|&(cx, cy, sigma, amp)| {
                                let d2 = (xf - cx).powi(2) + (yf - cy).powi(2);
                                amp * (-d2 / (2.0 * sigma * sigma)).exp()
                            })
                            .sum::<f64>()
                    }
                    Pattern::Stripes { base, theta, period, phase, amp } => {
                        let u = xf * theta.cos() + yf * theta.sin();
                        base + amp * (2.0 * PI * u / period + phase).sin()
                    }
                    Pattern::Rings { base, cx, cy, period, phase, amp } => {
                        let r = ((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt();
                        base + amp * (2.0 * PI * r / period + phase).sin()
                    }
                    Pattern::Checker { base, cell, ox, oy, amp } => {
                        let i = ((xf + ox) / cell).floor() as i64;
                        let j = ((yf + oy) / cell).floor() as i64;
                        base + if (i + j).rem_euclid(2) == 0 { *amp } else { -amp }
                    }
                };
                c.set(x, y, v);
            }
        }
        c
    }
}

/// The template every normal of a task is drawn around.
pub fn task_template(spec: &SynthTaskSpec) -> Pattern {
    let mut rng = init_rng(spec.seed, &format!("template/{}", spec.task_id));
    Pattern::draw(spec.pattern_family, spec.image_size, &mut rng)
}

/// Renders one normal image around `template` (noise included).
pub fn render_normal(template: &Pattern, var: &Variation, size: usize, noise: f64, rng: &mut ChaCha8Rng) -> Canvas {
    let mut c = template.jittered(var, size, rng).render(size);
    if noise > 0.0 {
        let dist = Normal::new(0.0, noise).expect("noise level is finite");
        for v in &mut c.pixels {
            *v += dist.sample(rng);
        }
    }
    for v in &mut c.pixels {
        *v = v.clamp(0.0, 1.0);
    }
    c
}

/// Applies a localized edit in place and returns its bounding box.
fn apply_anomaly(
    canvas: &mut Canvas,
    op: AnomalyOp,
    template: &Pattern,
    var: &Variation,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> (usize, usize, usize, usize) {
    let size = canvas.size;
    let unit = size as f64 / 32.0;
    let min_side = if op == AnomalyOp::ShapeInsert { 6.0 } else { 5.0 };
    let side = ((rng.random_range(min_side..9.0) * unit).round() as usize).clamp(2, size);
    let x0 = rng.random_range(0..=size - side);
    let y0 = rng.random_range(0..=size - side);
    match op {
        AnomalyOp::PatchSwap => {
            // transposed patch from another normal of the task
            let donor = render_normal(template, var, size, noise, rng);
            let sx = rng.random_range(0..=size - side);
            let sy = rng.random_range(0..=size - side);
            let offset = rng.random_range(0.15..0.25) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            for dy in 0..side {
                for dx in 0..side {
                    let v = donor.at(sx + dy, sy + dx) + offset;
                    canvas.set(x0 + dx, y0 + dy, v.clamp(0.0, 1.0));
                }
            }
        }
        AnomalyOp::IntensitySpot => {
            let r = side as f64 / 2.0;
            let (cx, cy) = (x0 as f64 + r - 0.5, y0 as f64 + r - 0.5);
            let delta = rng.random_range(0.3..0.4) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r {
                        let v = canvas.at(x, y);
                        // reflect instead of clipping so every covered pixel changes
                        let nv = if (0.0..=1.0).contains(&(v + delta)) { v + delta } else { v - delta };
                        canvas.set(x, y, nv.clamp(0.0, 1.0));
                    }
                }
            }
        }
        AnomalyOp::ShapeInsert => {
            let delta = rng.random_range(0.10..0.15) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let shape = rng.random_range(0..3);
            let half = side / 2;
            for dy in 0..side {
                for dx in 0..side {
                    let inside = match shape {
                        0 => true,
                        1 => dx.abs_diff(half) <= side / 6 || dy.abs_diff(half) <= side / 6,
                        _ => dx <= dy,
                    };
                    if inside {
                        let v = canvas.at(x0 + dx, y0 + dy);
                        let nv = if (0.0..=1.0).contains(&(v + delta)) { v + delta } else { v - delta };
                        canvas.set(x0 + dx, y0 + dy, nv.clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    (x0, y0, side, side)
}

/// The `index`-th abnormal image of a task together with its normal base.
pub fn render_pair(spec: &SynthTaskSpec, index: usize) -> (Canvas, Canvas, (usize, usize, usize, usize)) {
    let template = task_template(spec);
    let mut rng = init_rng(spec.seed, &format!("{}/abnormal/{index}", spec.task_id));
    let base = render_normal(&template, &spec.variation, spec.image_size, spec.noise_level, &mut rng);
    let mut edited = base.clone();
    let bbox = apply_anomaly(
        &mut edited,
        spec.anomaly_op,
        &template,
        &spec.variation,
        spec.noise_level,
        &mut rng,
    );
    (base, edited, bbox)
}

fn render_split_normal(spec: &SynthTaskSpec, template: &Pattern, split: &str, index: usize) -> Canvas {
    let mut rng = init_rng(spec.seed, &format!("{}/{split}/{index}", spec.task_id));
    render_normal(template, &spec.variation, spec.image_size, spec.noise_level, &mut rng)
}

fn save_png(canvas: &Canvas, path: &Path) -> Result<()> {
    canvas.to_image().save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

/// Writes one task under `out_root/<task_id>/` and returns its manifest.
pub fn generate_task(spec: &SynthTaskSpec, out_root: &Path) -> Result<TaskManifest> {
    if spec.image_size < 8 {
        return Err(Error::Config(format!("image size {} is below 8", spec.image_size)));
    }
    if spec.counts.train_normal < 2 || spec.counts.test_normal == 0 || spec.counts.test_abnormal == 0 {
        return Err(Error::Config(format!(
            "task {} needs ≥2 training normals and ≥1 of each test class, got {:?}",
            spec.task_id, spec.counts
        )));
    }
    if !(spec.noise_level.is_finite() && spec.noise_level >= 0.0) {
        return Err(Error::Config(format!("invalid noise level {}", spec.noise_level)));
    }
    spec.variation.validate()?;
    let template = task_template(spec);
    let root = out_root.join(&spec.task_id);
    let dirs = ["train/normal", "test/normal", "test/abnormal"];
    for d in dirs {
        let p = root.join(d);
        fs::create_dir_all(&p).at(&p)?;
    }
    let write_split = |rel: &str, split: &str, n: usize| -> Result<Vec<PathBuf>> {
        (0..n)
            .map(|i| {
                let path = root.join(rel).join(format!("{i:04}.png"));
                save_png(&render_split_normal(spec, &template, split, i), &path)?;
                Ok(path)
            })
            .collect()
    };
    let normal_train = write_split(dirs[0], "train", spec.counts.train_normal)?;
    let normal_test = write_split(dirs[1], "test", spec.counts.test_normal)?;

    let gt_path = root.join(GROUND_TRUTH_FILE);
    let mut gt = BufWriter::new(File::create(&gt_path).at(&gt_path)?);
    let mut abnormal_test = Vec::with_capacity(spec.counts.test_abnormal);
    let area = (spec.image_size * spec.image_size) as f64;
    for i in 0..spec.counts.test_abnormal {
        let (_, edited, (x, y, w, h)) = render_pair(spec, i);
        let name = format!("{i:04}.png");
        let path = root.join(dirs[2]).join(&name);
        save_png(&edited, &path)?;
        let record = AnomalyBox {
            file: format!("{}/{name}", dirs[2]),
            op: spec.anomaly_op,
            x,
            y,
            w,
            h,
            area_fraction: (w * h) as f64 / area,
        };
        writeln!(gt, "{}", serde_json::to_string(&record).expect("serializes")).at(&gt_path)?;
        abnormal_test.push(path);
    }
    gt.flush().at(&gt_path)?;

    let manifest = TaskManifest {
        task_id: spec.task_id.clone(),
        modality: format!("synthetic/{}", spec.pattern_family.name()),
        normal_train,
        normal_test,
        abnormal_test,
    };
    manifest.write_json(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Knobs shared by every task of a generated benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub families: Vec<PatternFamily>,
    pub image_size: usize,
    pub counts: SynthCounts,
    pub noise_level: f64,
    pub variation: Variation,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            families: PatternFamily::ALL.to_vec(),
            image_size: 32,
            counts: SynthCounts {
                train_normal: 40,
                test_normal: 20,
                test_abnormal: 20,
            },
            noise_level: 0.03,
            variation: Variation::default(),
            seed: 1,
        }
    }
}

/// Anomaly edit paired with each family in the default benchmark.
pub fn default_anomaly(family: PatternFamily) -> AnomalyOp {
    match family {
        PatternFamily::Blobs => AnomalyOp::ShapeInsert,
        PatternFamily::Stripes => AnomalyOp::PatchSwap,
        PatternFamily::Rings => AnomalyOp::IntensitySpot,
        PatternFamily::Checker => AnomalyOp::PatchSwap,
    }
}

impl BenchmarkConfig {
    pub fn task_specs(&self) -> Vec<SynthTaskSpec> {
        self.families
            .iter()
            .map(|&f| SynthTaskSpec {
                task_id: f.name().to_string(),
                pattern_family: f,
                anomaly_op: default_anomaly(f),
                image_size: self.image_size,
                counts: self.counts,
                noise_level: self.noise_level,
                variation: self.variation,
                seed: self.seed,
            })
            .collect()
    }
}

/// Summary written next to the generated tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub config: BenchmarkConfig,
    pub tasks: Vec<SynthTaskSpec>,
    pub cross_family_correlation: f64,
}

/// Generates every task of `cfg` under `out_root`.
pub fn generate_benchmark(cfg: &BenchmarkConfig, out_root: &Path) -> Result<(Vec<TaskManifest>, BenchmarkSummary)> {
    let mut seen = std::collections::BTreeSet::new();
    for f in &cfg.families {
        if !seen.insert(*f) {
            return Err(Error::Config(format!("family {} listed twice", f.name())));
        }
    }
    fs::create_dir_all(out_root).at(out_root)?;
    let specs = cfg.task_specs();
    let manifests = specs
        .iter()
        .map(|s| generate_task(s, out_root))
        .collect::<Result<Vec<_>>>()?;
    let summary = BenchmarkSummary {
        config: cfg.clone(),
        cross_family_correlation: cross_family_correlation(&specs, 8),
        tasks: specs,
    };
    let path = out_root.join(BENCHMARK_FILE);
    fs::write(&path, serde_json::to_string_pretty(&summary).expect("serializes") + "\n").at(&path)?;
    Ok((manifests, summary))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt().max(1e-12)
}

/// Mean absolute pixel correlation between normals of different tasks,
/// over `per_task` draws each.
pub fn cross_family_correlation(specs: &[SynthTaskSpec], per_task: usize) -> f64 {
    let draws: Vec<Vec<Canvas>> = specs
        .iter()
        .map(|spec| {
            let template = task_template(spec);
            (0..per_task)
                .map(|i| {
                    let mut rng = init_rng(spec.seed, &format!("corr/{}/{i}", spec.task_id));
                    render_normal(&template, &spec.variation, spec.image_size, spec.noise_level, &mut rng)
                })
                .collect()
        })
        .collect();
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..draws.len() {
        for j in i + 1..draws.len() {
            for a in &draws[i] {
                for b in &draws[j] {
                    total += pearson(&a.pixels, &b.pixels).abs();
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: PatternFamily, op: AnomalyOp) -> SynthTaskSpec {
        SynthTaskSpec {
            task_id: family.name().into(),
            pattern_family: family,
            anomaly_op: op,
            image_size: 32,
            counts: SynthCounts {
                train_normal: 20,
                test_normal: 10,
                test_abnormal: 10,
            },
            noise_level: 0.03,
            variation: Variation::default(),
            seed: 1,
        }
    }

    #[test]
    fn generation_is_byte_identical() {
        let s = spec(PatternFamily::Blobs, AnomalyOp::PatchSwap);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = generate_task(&s, a.path()).unwrap();
        let mb = generate_task(&s, b.path()).unwrap();
        assert_eq!(ma.normal_train.len(), 20);
        assert_eq!(ma.abnormal_test.len(), 10);
        for (pa, pb) in ma.all_images().zip(mb.all_images()) {
            assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());
        }
        assert_eq!(
            fs::read(a.path().join("blobs").join(GROUND_TRUTH_FILE)).unwrap(),
            fs::read(b.path().join("blobs").join(GROUND_TRUTH_FILE)).unwrap()
        );
    }

    #[test]
    fn edits_cover_one_to_ten_percent() {
        for family in PatternFamily::ALL {
            for op in [AnomalyOp::PatchSwap, AnomalyOp::IntensitySpot, AnomalyOp::ShapeInsert] {
                let s = spec(family, op);
                for i in 0..25 {
                    let (base, edited, _) = render_pair(&s, i);
                    let (b, e) = (base.to_image(), edited.to_image());
                    let changed = b.pixels().zip(e.pixels()).filter(|(p, q)| p != q).count();
                    let frac = changed as f64 / (32.0 * 32.0);
                    assert!(
                        (0.01..=0.10).contains(&frac),
                        "{family:?}/{op:?}/{i}: {frac}"
                    );
                }
            }
        }
    }

    #[test]
    fn families_are_distinct() {
        let r = cross_family_correlation(&BenchmarkConfig::default().task_specs(), 8);
        assert!(r < 0.5, "cross-family correlation {r}");
    }

    #[test]
    fn four_families_four_tasks() {
        let cfg = BenchmarkConfig {
            counts: SynthCounts {
                train_normal: 3,
                test_normal: 1,
                test_abnormal: 1,
            },
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let (manifests, _) = generate_benchmark(&cfg, dir.path()).unwrap();
        let ids: std::collections::BTreeSet<_> = manifests.iter().map(|m| m.task_id.clone()).collect();
        assert_eq!(ids.len(), 4);
    }

    #[test]
    fn invalid_counts_rejected() {
        let mut s = spec(PatternFamily::Rings, AnomalyOp::IntensitySpot);
        s.counts.test_abnormal = 0;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(generate_task(&s, dir.path()), Err(Error::Config(_))));
    }
}
