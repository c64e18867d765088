//! TOML run configuration. Every key is optional; flags override it and
//! library defaults fill the rest.

use std::path::{Path, PathBuf};

use d24fad::episodes::SupportMode;
use d24fad::l2w::L2WVariant;
use d24fad::nn::Precision;
use d24fad::scoring::ScoreReduce;
use d24fad::synth::PatternFamily;
use d24fad::train::{Batching, LrSchedule};
use d24fad::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FileConfig {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub teacher: TeacherSection,
    #[serde(default)]
    pub student: StudentSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub synth: SynthSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub root: Option<PathBuf>,
    pub holdout: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TeacherSection {
    pub backbone: Option<String>,
    /// `random`, `imagenet`, or a path to a safetensors file.
    pub weights: Option<String>,
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StudentSection {
    pub blocks_per_stage: Option<usize>,
    pub conv_bias: Option<bool>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub lr_schedule: Option<LrSchedule>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub weight_decay: Option<f64>,
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub batching: Option<Batching>,
    pub l2w_init_noise: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSection {
    pub lambda: Option<f64>,
    pub use_tsd: Option<bool>,
    pub use_ssd: Option<bool>,
    pub use_l2w: Option<bool>,
    pub l2w_variant: Option<L2WVariant>,
    pub epsilon: Option<f64>,
    pub support_stop_gradient: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub k: Option<usize>,
    pub support_mode: Option<SupportMode>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub score_reduce: Option<ScoreReduce>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthSection {
    pub seed: Option<u64>,
    pub families: Option<Vec<PatternFamily>>,
    pub image_size: Option<usize>,
    pub train_normal: Option<usize>,
    pub test_normal: Option<usize>,
    pub test_abnormal: Option<usize>,
    pub noise_level: Option<f64>,
    pub shift: Option<f64>,
    pub phase: Option<f64>,
    pub gain: Option<f64>,
    pub brightness: Option<f64>,
}

impl FileConfig {
    /// Parses TOML, rejecting any key the schema does not know by its full path.
    pub fn parse(text: &str, origin: &Path) -> Result<Self, Error> {
        let de = toml::Deserializer::new(text);
        let mut unknown = Vec::new();
        let cfg: FileConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "{}: unknown config key{} {}",
                origin.display(),
                if unknown.len() > 1 { "s" } else { "" },
                unknown.iter().map(|k| format!("`{k}`")).collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, Error> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                Self::parse(&text, p)
            }
        }
    }
}
