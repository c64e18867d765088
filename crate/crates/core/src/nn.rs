//! Small building blocks shared by the teacher, student and weighting head.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Floating-point precision of a model and all tensors flowing through it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}` (f32|f64)"))),
        }
    }
}

/// Deterministic generator for parameter initialization.
pub(crate) fn init_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

pub(crate) fn normal_tensor(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    std: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// He-normal initialized convolution kernel `(out, in, k, k)`.
pub(crate) fn kaiming_kernel(
    rng: &mut ChaCha8Rng,
    out_c: usize,
    in_c: usize,
    k: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let fan_in = (in_c * k * k) as f64;
    normal_tensor(rng, &[out_c, in_c, k, k], (2.0 / fan_in).sqrt(), dtype, device)
}

/// Identity 1×1 kernel plus seeded Gaussian noise of the given scale.
pub(crate) fn near_identity_kernel(
    rng: &mut ChaCha8Rng,
    channels: usize,
    noise: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let eye = Tensor::eye(channels, DType::F64, device)?.reshape((channels, channels, 1, 1))?;
    let out = if noise > 0.0 {
        (eye + normal_tensor(rng, &[channels, channels, 1, 1], noise, DType::F64, device)?)?
    } else {
        eye
    };
    Ok(out.to_dtype(dtype)?)
}

pub(crate) fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => flat
            .to_vec1::<f64>()?
            .into_iter()
            .flat_map(f64::to_le_bytes)
            .collect(),
        DType::F32 => flat
            .to_vec1::<f32>()?
            .into_iter()
            .flat_map(f32::to_le_bytes)
            .collect(),
        other => flat
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?
            .into_iter()
            .flat_map(f64::to_le_bytes)
            .chain(format!("{other:?}").into_bytes())
            .collect(),
    })
}

/// SHA-256 over names, shapes, dtypes and raw values, in name order.
pub fn checksum<'a, I>(named: I) -> Result<String>
where
    I: IntoIterator<Item = (&'a String, &'a Tensor)>,
{
    let mut h = Sha256::new();
    for (name, t) in named {
        h.update(name.as_bytes());
        h.update(format!("{:?}{:?}", t.dtype(), t.dims()).as_bytes());
        h.update(tensor_bytes(t)?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Named trainable parameters, iterated in name order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            dtype,
            device: device.clone(),
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub(crate) fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var> {
        let name = name.into();
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        if self.vars.insert(name.clone(), var.clone()).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn checksum(&self) -> Result<String> {
        let tensors: Vec<(&String, &Tensor)> =
            self.vars.iter().map(|(k, v)| (k, v.as_tensor())).collect();
        checksum(tensors)
    }

    /// Snapshot of every parameter value, keyed with `prefix`.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.vars
            .iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v.as_tensor().detach()))
            .collect()
    }

    /// Overwrites parameters from `source` (names looked up with `prefix`).
    /// Every parameter must be present with a matching shape.
    pub fn load(&self, source: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let t = source
                .get(&key)
                .ok_or_else(|| Error::State(format!("missing parameter {key}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter {key}: stored {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// 2-D convolution over `(N, C, H, W)` inputs.
#[derive(Debug, Clone)]
pub(crate) struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?)?,
            None => y,
        })
    }
}

/// Nearest-neighbour upsampling by an integer factor, written with
/// broadcasting so the backward pass is plain summation.
pub(crate) fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, factor, w, factor))?
        .reshape((n, c, h * factor, w * factor))?)
}
