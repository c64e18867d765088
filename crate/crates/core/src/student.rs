//! Learnable decoder that rebuilds the teacher pyramid from its deepest level.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::Teacher;
use crate::error::{Error, Result};
use crate::nn::{self, Conv, ParamStore, Precision};
use crate::pyramid::{FeaturePyramid, LevelShape, Source};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSpec {
    pub layer_ids: Vec<String>,
    /// Output channels per level, shallow to deep; must equal the teacher's.
    pub channel_plan: Vec<usize>,
    pub upsample_factor: usize,
    #[serde(default = "default_blocks")]
    pub blocks_per_stage: usize,
    /// Learnable biases on every convolution.
    #[serde(default = "default_true")]
    pub conv_bias: bool,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

fn default_blocks() -> usize {
    1
}

fn default_true() -> bool {
    true
}

impl StudentSpec {
    /// Spec mirroring a loaded teacher.
    pub fn for_teacher(teacher: &Teacher, seed: u64) -> Self {
        Self {
            layer_ids: teacher.spec().layer_ids.clone(),
            channel_plan: teacher.level_shapes().iter().map(|s| s.0).collect(),
            upsample_factor: 2,
            blocks_per_stage: 1,
            conv_bias: true,
            seed,
            precision: teacher.spec().precision,
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?.relu()?;
        Ok((x + self.conv2.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    /// Upsample-and-project entry; absent on the deepest stage.
    up: Option<Conv>,
    blocks: Vec<ResBlock>,
}

/// Student decoder. Every parameter is a trainable variable.
#[derive(Debug, Clone)]
pub struct StudentDecoder {
    spec: StudentSpec,
    params: ParamStore,
    shapes: Vec<LevelShape>,
    /// `stages[i]` produces level `i`.
    stages: Vec<Stage>,
}

impl StudentDecoder {
    /// Builds a decoder whose outputs match `teacher_shapes` exactly.
    pub fn new(spec: &StudentSpec, teacher_shapes: &[LevelShape], device: &Device) -> Result<Self> {
        let levels = teacher_shapes.len();
        if levels == 0 || spec.layer_ids.len() != levels || spec.channel_plan.len() != levels {
            return Err(Error::Shape(format!(
                "student spec has {} layer ids and {} channels for a {levels}-level teacher",
                spec.layer_ids.len(),
                spec.channel_plan.len()
            )));
        }
        for (i, (&c, shape)) in spec.channel_plan.iter().zip(teacher_shapes).enumerate() {
            if c != shape.0 {
                return Err(Error::Shape(format!(
                    "student level {i} has {c} channels, teacher has {}",
                    shape.0
                )));
            }
        }
        for i in 0..levels - 1 {
            let (_, h, w) = teacher_shapes[i];
            let (_, hd, wd) = teacher_shapes[i + 1];
            if h != hd * spec.upsample_factor || w != wd * spec.upsample_factor {
                return Err(Error::Shape(format!(
                    "levels {i} ({h}x{w}) and {} ({hd}x{wd}) are not related by upsample factor {}",
                    i + 1,
                    spec.upsample_factor
                )));
            }
        }

        let dtype = spec.precision.dtype();
        let mut params = ParamStore::new(dtype, device);
        let mut rng = nn::init_rng(spec.seed, "student");
        let mut conv = |params: &mut ParamStore, name: &str, out_c: usize, in_c: usize| {
            let w = nn::kaiming_kernel(&mut rng, out_c, in_c, 3, dtype, device)?;
            let w = params.insert(format!("{name}.weight"), w)?;
            let b = if spec.conv_bias {
                let b = params.insert(format!("{name}.bias"), Tensor::zeros(out_c, dtype, device)?)?;
                Some(b.as_tensor().clone())
            } else {
                None
            };
            Ok::<_, Error>(Conv::new(w.as_tensor().clone(), b, 1, 1))
        };

        let mut stages = Vec::with_capacity(levels);
        for i in (0..levels).rev() {
            let c = spec.channel_plan[i];
            let up = if i + 1 < levels {
                Some(conv(&mut params, &format!("stage{i}.up"), c, spec.channel_plan[i + 1])?)
            } else {
                None
            };
            let blocks = (0..spec.blocks_per_stage)
                .map(|j| {
                    Ok(ResBlock {
                        conv1: conv(&mut params, &format!("stage{i}.res{j}.conv1"), c, c)?,
                        conv2: conv(&mut params, &format!("stage{i}.res{j}.conv2"), c, c)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { up, blocks });
        }
        stages.reverse();
        Ok(Self {
            spec: spec.clone(),
            params,
            shapes: teacher_shapes.to_vec(),
            stages,
        })
    }

    pub fn spec(&self) -> &StudentSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn level_shapes(&self) -> &[LevelShape] {
        &self.shapes
    }

    /// Student pyramid from the deepest teacher level `(N, C_L, H_L, W_L)`.
    pub fn forward(&self, deepest: &Tensor) -> Result<FeaturePyramid> {
        let expected = *self.shapes.last().expect("non-empty");
        let (_, c, h, w) = deepest
            .dims4()
            .map_err(|_| Error::Shape(format!("student input must be rank 4, got {:?}", deepest.dims())))?;
        if (c, h, w) != expected {
            return Err(Error::Shape(format!(
                "student expects deepest feature {expected:?}, got {:?}",
                (c, h, w)
            )));
        }
        let levels = self.stages.len();
        let mut outputs = vec![None; levels];
        let mut x = deepest.to_dtype(self.params.dtype())?;
        for i in (0..levels).rev() {
            let stage = &self.stages[i];
            if let Some(up) = &stage.up {
                x = up.forward(&nn::upsample_nearest(&x, self.spec.upsample_factor)?)?.relu()?;
            }
            for block in &stage.blocks {
                x = block.forward(&x)?;
            }
            outputs[i] = Some(x.clone());
        }
        let pyramid = FeaturePyramid::new(
            outputs.into_iter().map(|o| o.expect("every level produced")).collect(),
            self.spec.layer_ids.clone(),
            Source::Student,
        )?;
        if pyramid.shapes() != self.shapes {
            return Err(Error::Shape(format!(
                "student produced {:?}, teacher shapes are {:?}",
                pyramid.shapes(),
                self.shapes
            )));
        }
        Ok(pyramid)
    }
}

/// Builds a student paired with `teacher`, checking the shape contract.
pub fn build_student(spec: &StudentSpec, teacher: &Teacher) -> Result<StudentDecoder> {
    if spec.layer_ids != teacher.spec().layer_ids {
        return Err(Error::Shape(format!(
            "student layer ids {:?} differ from teacher {:?}",
            spec.layer_ids,
            teacher.spec().layer_ids
        )));
    }
    if spec.precision != teacher.spec().precision {
        return Err(Error::Config("student and teacher precision differ".into()));
    }
    StudentDecoder::new(spec, teacher.level_shapes(), teacher.device())
}

/// Student pyramids for the `K` support images of one task.
#[derive(Debug, Clone)]
pub struct SupportFeatureBank {
    pyramid: FeaturePyramid,
    support_ids: Vec<String>,
}

impl SupportFeatureBank {
    pub fn new(pyramid: FeaturePyramid, support_ids: Vec<String>) -> Result<Self> {
        if pyramid.batch_size() == 0 {
            return Err(Error::Precondition("support bank is empty".into()));
        }
        if support_ids.len() != pyramid.batch_size() {
            return Err(Error::Precondition(format!(
                "{} support ids for {} support pyramids",
                support_ids.len(),
                pyramid.batch_size()
            )));
        }
        Ok(Self {
            pyramid,
            support_ids,
        })
    }

    /// Levels are `(K, C_i, H_i, W_i)`.
    pub fn pyramid(&self) -> &FeaturePyramid {
        &self.pyramid
    }

    pub fn k(&self) -> usize {
        self.support_ids.len()
    }

    pub fn support_ids(&self) -> &[String] {
        &self.support_ids
    }

    pub fn detach(&self) -> Self {
        Self {
            pyramid: self.pyramid.detach(),
            support_ids: self.support_ids.clone(),
        }
    }

    /// Bank with supports reordered so entry `j` is old entry `order[j]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let idx = Tensor::new(
            order.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            self.pyramid.level(0).device(),
        )?;
        let pyramid = self.pyramid.map_levels(|l| l.index_select(&idx, 0))?;
        let ids = order.iter().map(|&i| self.support_ids[i].clone()).collect();
        Self::new(pyramid, ids)
    }
}

/// Teacher then student over preprocessed support images `(K, 3, S, S)`.
pub fn support_forward(
    student: &StudentDecoder,
    teacher: &Teacher,
    support_images: &Tensor,
    support_ids: Vec<String>,
) -> Result<SupportFeatureBank> {
    let k = support_images.dims().first().copied().unwrap_or(0);
    if k == 0 {
        return Err(Error::Precondition("support set is empty".into()));
    }
    let teacher_pyr = teacher.extract(support_images)?;
    let student_pyr = student.forward(teacher_pyr.deepest())?;
    teacher_pyr.ensure_same_shapes(&student_pyr)?;
    SupportFeatureBank::new(student_pyr, support_ids)
}
