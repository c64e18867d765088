//! Frozen multi-scale teacher encoder.
//!
//! Two ResNet-family backbones are registered: `wide_resnet50_2` (the
//! reference teacher, torchvision parameter names) and `tiny`, a three-stage
//! basic-block network with 8/16/32 channels for desk-scale runs. Weights are
//! either loaded from a safetensors file or drawn once from a seeded
//! generator and then frozen.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv, Precision};
use crate::pyramid::{FeaturePyramid, LevelShape, Source};

pub const WEIGHTS_DIR_ENV: &str = "D24FAD_WEIGHTS_DIR";

/// Channel statistics used to standardize inputs (ImageNet).
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightsSource {
    /// `<weights dir>/<backbone>.safetensors`.
    ImagenetPretrained,
    RandomFrozen { seed: u64 },
    FilePath { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub backbone_name: String,
    pub layer_ids: Vec<String>,
    pub weights_source: WeightsSource,
    pub input_size: usize,
    #[serde(default)]
    pub precision: Precision,
}

impl TeacherSpec {
    /// WideResNet-50-2 tapped at its first three residual stages, 128×128.
    pub fn reference(weights_source: WeightsSource) -> Self {
        Self {
            backbone_name: "wide_resnet50_2".into(),
            layer_ids: vec!["layer1".into(), "layer2".into(), "layer3".into()],
            weights_source,
            input_size: 128,
            precision: Precision::F32,
        }
    }

    /// The tiny random-frozen teacher on 32×32 inputs.
    pub fn tiny(seed: u64, precision: Precision) -> Self {
        Self {
            backbone_name: "tiny".into(),
            layer_ids: vec!["layer1".into(), "layer2".into(), "layer3".into()],
            weights_source: WeightsSource::RandomFrozen { seed },
            input_size: 32,
            precision,
        }
    }
}

/// Directory searched for pretrained weight files.
pub fn weights_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(WEIGHTS_DIR_ENV) {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_default();
    home.join(".cache").join("d24fad").join("weights")
}

#[derive(Debug, Clone, Copy)]
enum BlockKind {
    Basic,
    Bottleneck { width: usize },
}

#[derive(Debug, Clone)]
struct StageDef {
    name: &'static str,
    blocks: usize,
    out_channels: usize,
    stride: usize,
    kind: BlockKind,
}

#[derive(Debug, Clone)]
struct ArchDef {
    stem_channels: usize,
    stem_kernel: usize,
    stem_stride: usize,
    stem_pool: bool,
    stages: Vec<StageDef>,
}

pub fn registered_backbones() -> &'static [&'static str] {
    &["wide_resnet50_2", "tiny"]
}

fn arch(name: &str) -> Result<ArchDef> {
    match name {
        "wide_resnet50_2" => {
            let stage = |name, blocks, planes: usize, stride| StageDef {
                name,
                blocks,
                out_channels: planes * 4,
                stride,
                kind: BlockKind::Bottleneck { width: planes * 2 },
            };
            Ok(ArchDef {
                stem_channels: 64,
                stem_kernel: 7,
                stem_stride: 2,
                stem_pool: true,
                stages: vec![
                    stage("layer1", 3, 64, 1),
                    stage("layer2", 4, 128, 2),
                    stage("layer3", 6, 256, 2),
                    stage("layer4", 3, 512, 2),
                ],
            })
        }
        "tiny" => {
            let stage = |name, out_channels, stride| StageDef {
                name,
                blocks: 1,
                out_channels,
                stride,
                kind: BlockKind::Basic,
            };
            Ok(ArchDef {
                stem_channels: 8,
                stem_kernel: 3,
                stem_stride: 2,
                stem_pool: false,
                stages: vec![stage("layer1", 8, 1), stage("layer2", 16, 2), stage("layer3", 32, 2)],
            })
        }
        other => Err(Error::Config(format!(
            "unknown backbone `{other}`; registered: {}",
            registered_backbones().join(", ")
        ))),
    }
}

/// Eval-mode batch norm folded into a per-channel affine map.
#[derive(Debug, Clone)]
struct FrozenBn {
    scale: Tensor,
    shift: Tensor,
}

impl FrozenBn {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.scale)?.broadcast_add(&self.shift)?)
    }
}

#[derive(Debug, Clone)]
struct Block {
    convs: Vec<(Conv, FrozenBn)>,
    downsample: Option<(Conv, FrozenBn)>,
}

impl Block {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.clone();
        let last = self.convs.len() - 1;
        for (i, (conv, bn)) in self.convs.iter().enumerate() {
            out = bn.forward(&conv.forward(&out)?)?;
            if i < last {
                out = out.relu()?;
            }
        }
        let identity = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        Ok((out + identity)?.relu()?)
    }
}

/// Frozen teacher handle. Parameters are plain tensors, never variables, so
/// no gradient can reach them and no method mutates them.
#[derive(Debug, Clone)]
pub struct Teacher {
    spec: TeacherSpec,
    device: Device,
    dtype: DType,
    params: BTreeMap<String, Tensor>,
    stem: (Conv, FrozenBn),
    stem_pool: bool,
    stages: Vec<(String, Vec<Block>)>,
    /// Index into `stages` for every tapped layer, in depth order.
    taps: Vec<usize>,
    shapes: Vec<LevelShape>,
}

/// Parameter tensor names with their shapes, torchvision conventions.
fn parameter_layout(arch: &ArchDef, depth: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let bn = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, c: usize| {
        for suffix in ["weight", "bias", "running_mean", "running_var"] {
            out.push((format!("{prefix}.{suffix}"), vec![c]));
        }
    };
    let k = arch.stem_kernel;
    out.push(("conv1.weight".into(), vec![arch.stem_channels, 3, k, k]));
    bn(&mut out, "bn1", arch.stem_channels);
    let mut in_c = arch.stem_channels;
    for stage in arch.stages.iter().take(depth) {
        for b in 0..stage.blocks {
            let p = format!("{}.{b}", stage.name);
            let convs: Vec<(usize, usize, usize)> = match stage.kind {
                BlockKind::Basic => vec![
                    (stage.out_channels, in_c, 3),
                    (stage.out_channels, stage.out_channels, 3),
                ],
                BlockKind::Bottleneck { width } => vec![
                    (width, in_c, 1),
                    (width, width, 3),
                    (stage.out_channels, width, 1),
                ],
            };
            for (i, (o, ic, k)) in convs.into_iter().enumerate() {
                out.push((format!("{p}.conv{}.weight", i + 1), vec![o, ic, k, k]));
                bn(&mut out, &format!("{p}.bn{}", i + 1), o);
            }
            let stride = if b == 0 { stage.stride } else { 1 };
            if b == 0 && (stride != 1 || in_c != stage.out_channels) {
                out.push((format!("{p}.downsample.0.weight"), vec![stage.out_channels, in_c, 1, 1]));
                bn(&mut out, &format!("{p}.downsample.1"), stage.out_channels);
            }
            in_c = stage.out_channels;
        }
    }
    out
}

fn random_params(
    layout: &[(String, Vec<usize>)],
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<BTreeMap<String, Tensor>> {
    let mut rng = nn::init_rng(seed, "teacher");
    let mut out = BTreeMap::new();
    for (name, shape) in layout {
        let t = if shape.len() == 4 {
            nn::kaiming_kernel(&mut rng, shape[0], shape[1], shape[2], dtype, device)?
        } else if name.ends_with(".weight") || name.ends_with("running_var") {
            Tensor::ones(shape.as_slice(), dtype, device)?
        } else {
            Tensor::zeros(shape.as_slice(), dtype, device)?
        };
        out.insert(name.clone(), t);
    }
    Ok(out)
}

fn file_params(
    layout: &[(String, Vec<usize>)],
    path: &Path,
    dtype: DType,
    device: &Device,
) -> Result<BTreeMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "weight file not found"),
        ));
    }
    let loaded: HashMap<String, Tensor> = candle_core::safetensors::load(path, device)?;
    let mut out = BTreeMap::new();
    for (name, shape) in layout {
        let t = loaded.get(name).ok_or_else(|| {
            Error::Config(format!("weight file {} lacks tensor {name}", path.display()))
        })?;
        if t.dims() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "{name} in {}: {:?}, expected {shape:?}",
                path.display(),
                t.dims()
            )));
        }
        out.insert(name.clone(), t.to_dtype(dtype)?);
    }
    Ok(out)
}

/// Builds a frozen teacher from its spec.
pub fn load_teacher(spec: &TeacherSpec, device: &Device) -> Result<Teacher> {
    let arch = arch(&spec.backbone_name)?;
    if spec.layer_ids.is_empty() {
        return Err(Error::Config("teacher needs at least one layer id".into()));
    }
    let mut taps = Vec::with_capacity(spec.layer_ids.len());
    for id in &spec.layer_ids {
        let idx = arch
            .stages
            .iter()
            .position(|s| s.name == id)
            .ok_or_else(|| {
                Error::Config(format!(
                    "backbone `{}` has no stage `{id}`",
                    spec.backbone_name
                ))
            })?;
        if taps.last().is_some_and(|&prev| idx <= prev) {
            return Err(Error::Config(format!(
                "layer ids must be distinct and ordered shallow to deep: {:?}",
                spec.layer_ids
            )));
        }
        taps.push(idx);
    }
    if spec.input_size == 0 {
        return Err(Error::Config("teacher input size must be positive".into()));
    }
    let depth = taps.last().copied().unwrap_or(0) + 1;
    let dtype = spec.precision.dtype();
    let layout = parameter_layout(&arch, depth);
    let params = match &spec.weights_source {
        WeightsSource::RandomFrozen { seed } => random_params(&layout, *seed, dtype, device)?,
        WeightsSource::FilePath { path } => file_params(&layout, path, dtype, device)?,
        WeightsSource::ImagenetPretrained => {
            let path = weights_dir().join(format!("{}.safetensors", spec.backbone_name));
            file_params(&layout, &path, dtype, device)?
        }
    };

    let bn = |prefix: &str| -> Result<FrozenBn> {
        let g = &params[&format!("{prefix}.weight")];
        let b = &params[&format!("{prefix}.bias")];
        let m = &params[&format!("{prefix}.running_mean")];
        let v = &params[&format!("{prefix}.running_var")];
        let c = g.elem_count();
        let scale = g.div(&(v + BN_EPS)?.sqrt()?)?;
        let shift = (b - m.mul(&scale)?)?;
        Ok(FrozenBn {
            scale: scale.reshape((1, c, 1, 1))?,
            shift: shift.reshape((1, c, 1, 1))?,
        })
    };
    let conv = |name: &str, stride: usize| -> Conv {
        let w = params[&format!("{name}.weight")].clone();
        let k = w.dims()[2];
        Conv::new(w, None, stride, k / 2)
    };

    let stem = (conv("conv1", arch.stem_stride), bn("bn1")?);
    let mut stages = Vec::new();
    for stage in arch.stages.iter().take(depth) {
        let mut blocks = Vec::with_capacity(stage.blocks);
        for b in 0..stage.blocks {
            let p = format!("{}.{b}", stage.name);
            let stride = if b == 0 { stage.stride } else { 1 };
            let convs = match stage.kind {
                BlockKind::Basic => vec![
                    (conv(&format!("{p}.conv1"), stride), bn(&format!("{p}.bn1"))?),
                    (conv(&format!("{p}.conv2"), 1), bn(&format!("{p}.bn2"))?),
                ],
                BlockKind::Bottleneck { .. } => vec![
                    (conv(&format!("{p}.conv1"), 1), bn(&format!("{p}.bn1"))?),
                    (conv(&format!("{p}.conv2"), stride), bn(&format!("{p}.bn2"))?),
                    (conv(&format!("{p}.conv3"), 1), bn(&format!("{p}.bn3"))?),
                ],
            };
            let ds_key = format!("{p}.downsample.0.weight");
            let downsample = if params.contains_key(&ds_key) {
                Some((
                    conv(&format!("{p}.downsample.0"), stride),
                    bn(&format!("{p}.downsample.1"))?,
                ))
            } else {
                None
            };
            blocks.push(Block { convs, downsample });
        }
        stages.push((stage.name.to_string(), blocks));
    }

    let mut teacher = Teacher {
        spec: spec.clone(),
        device: device.clone(),
        dtype,
        params,
        stem,
        stem_pool: arch.stem_pool,
        stages,
        taps,
        shapes: Vec::new(),
    };
    let probe = Tensor::zeros((1, 3, spec.input_size, spec.input_size), dtype, device)?;
    teacher.shapes = teacher.forward(&probe)?.shapes();
    Ok(teacher)
}

impl Teacher {
    pub fn spec(&self) -> &TeacherSpec {
        &self.spec
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn input_size(&self) -> usize {
        self.spec.input_size
    }

    /// Per-level `(C, H, W)` for inputs of the configured size.
    pub fn level_shapes(&self) -> &[LevelShape] {
        &self.shapes
    }

    pub fn parameters(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn checksum(&self) -> Result<String> {
        nn::checksum(self.params.iter())
    }

    fn forward(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let (stem_conv, stem_bn) = &self.stem;
        let mut x = stem_bn.forward(&stem_conv.forward(images)?)?.relu()?;
        if self.stem_pool {
            // zero padding is exact for max pooling after a ReLU
            x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
            x = x.max_pool2d_with_stride(3, 2)?;
        }
        let mut levels = Vec::with_capacity(self.taps.len());
        let mut next_tap = 0;
        for (idx, (_, blocks)) in self.stages.iter().enumerate() {
            for block in blocks {
                x = block.forward(&x)?;
            }
            if self.taps.get(next_tap) == Some(&idx) {
                levels.push(x.clone());
                next_tap += 1;
            }
        }
        FeaturePyramid::new(levels, self.spec.layer_ids.clone(), Source::Teacher)
    }

    /// Batched feature pyramid for preprocessed images `(B, 3, S, S)`.
    pub fn extract(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = images.dims4().map_err(|_| {
            Error::Shape(format!("expected images (B, 3, S, S), got {:?}", images.dims()))
        })?;
        let s = self.spec.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::Shape(format!(
                "teacher expects (B, 3, {s}, {s}) inputs, got {:?}",
                images.dims()
            )));
        }
        let images = images.to_dtype(self.dtype)?.detach();
        Ok(self.forward(&images)?.detach())
    }

    /// One pyramid per image in the batch.
    pub fn extract_pyramid(&self, images: &Tensor) -> Result<Vec<FeaturePyramid>> {
        self.extract(images)?.split()
    }
}
