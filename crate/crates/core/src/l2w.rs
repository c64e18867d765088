//! Query-conditioned weighting of support features.
//!
//! For each pyramid level the query map is flattened to one `C·H·W` vector
//! and every (projected) support map to a row of a `K × C·H·W` matrix; the
//! resulting `1 × K` logit row is soft-maxed over the supports. The weighted
//! support map then replaces the plain support mean in the self-distillation
//! term.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::losses::{dissimilarity_map, pairwise_dissimilarity};
use crate::nn::{self, ParamStore, Precision};
use crate::pyramid::{FeaturePyramid, LevelShape};
use crate::student::SupportFeatureBank;

/// Exponentiated variants clamp their scaled dot product to ±this value.
pub const LOGIT_CLAMP: f64 = 30.0;
pub const DEFAULT_INIT_NOISE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2WVariant {
    /// `softmax(q · φ(s)ᵀ / √C)`
    #[default]
    ScaledDot,
    /// `softmax(exp(q · sᵀ))`, no projection
    Gaussian,
    /// `softmax(exp(θ(q) · φ(s)ᵀ))`
    EmbeddedGaussian,
    /// `softmax(relu(wᵀ [θ(q), φ(s)]))`
    Concatenation,
}

impl std::str::FromStr for L2WVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaled_dot" => Ok(Self::ScaledDot),
            "gaussian" => Ok(Self::Gaussian),
            "embedded_gaussian" => Ok(Self::EmbeddedGaussian),
            "concatenation" => Ok(Self::Concatenation),
            other => Err(Error::Config(format!(
                "unknown l2w variant `{other}` (scaled_dot|gaussian|embedded_gaussian|concatenation)"
            ))),
        }
    }
}

impl L2WVariant {
    fn has_phi(self) -> bool {
        !matches!(self, Self::Gaussian)
    }

    fn has_theta(self) -> bool {
        matches!(self, Self::EmbeddedGaussian | Self::Concatenation)
    }
}

#[derive(Debug, Clone)]
struct LevelParams {
    phi: Option<Tensor>,
    theta: Option<Tensor>,
    /// Length `2·C·H·W`: query half first, then support half.
    concat_w: Option<Tensor>,
}

/// Learnable projections of the weighting head, one set per level.
#[derive(Debug, Clone)]
pub struct L2WParams {
    variant: L2WVariant,
    shapes: Vec<LevelShape>,
    store: ParamStore,
    levels: Vec<LevelParams>,
}

impl L2WParams {
    /// Near-identity projections (identity plus seeded noise of scale
    /// `init_noise`); the concatenation vector is drawn with std `1/√(2CHW)`.
    pub fn new(
        variant: L2WVariant,
        shapes: &[LevelShape],
        seed: u64,
        init_noise: f64,
        precision: Precision,
        device: &Device,
    ) -> Result<Self> {
        let dtype = precision.dtype();
        let mut store = ParamStore::new(dtype, device);
        let mut rng = nn::init_rng(seed, "l2w");
        let mut levels = Vec::with_capacity(shapes.len());
        for (i, &(c, h, w)) in shapes.iter().enumerate() {
            let phi = if variant.has_phi() {
                let k = nn::near_identity_kernel(&mut rng, c, init_noise, dtype, device)?;
                Some(store.insert(format!("level{i}.phi"), k)?.as_tensor().clone())
            } else {
                None
            };
            let theta = if variant.has_theta() {
                let k = nn::near_identity_kernel(&mut rng, c, init_noise, dtype, device)?;
                Some(store.insert(format!("level{i}.theta"), k)?.as_tensor().clone())
            } else {
                None
            };
            let concat_w = if variant == L2WVariant::Concatenation {
                let d = 2 * c * h * w;
                let v = nn::normal_tensor(&mut rng, &[d], 1.0 / (d as f64).sqrt(), dtype, device)?;
                Some(store.insert(format!("level{i}.concat_w"), v)?.as_tensor().clone())
            } else {
                None
            };
            levels.push(LevelParams {
                phi,
                theta,
                concat_w,
            });
        }
        Ok(Self {
            variant,
            shapes: shapes.to_vec(),
            store,
            levels,
        })
    }

    /// Exact identity projections.
    pub fn identity(
        variant: L2WVariant,
        shapes: &[LevelShape],
        seed: u64,
        precision: Precision,
        device: &Device,
    ) -> Result<Self> {
        Self::new(variant, shapes, seed, 0.0, precision, device)
    }

    pub fn variant(&self) -> L2WVariant {
        self.variant
    }

    pub fn level_shapes(&self) -> &[LevelShape] {
        &self.shapes
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn project(kernel: &Option<Tensor>, x: &Tensor) -> Result<Tensor> {
        Ok(match kernel {
            Some(k) => x.conv2d(k, 0, 1, 1, 1)?,
            None => x.clone(),
        })
    }

    /// Logits `(N, K)` for one level.
    fn level_logits(&self, i: usize, query: &Tensor, support: &Tensor) -> Result<Tensor> {
        let lp = &self.levels[i];
        let c = query.dims()[1];
        let scale = 1.0 / (c as f64).sqrt();
        let n = query.dims()[0];
        let k = support.dims()[0];
        let logits = match self.variant {
            L2WVariant::ScaledDot => {
                let s = Self::project(&lp.phi, support)?.reshape((k, ()))?;
                let q = query.reshape((n, ()))?;
                (q.matmul(&s.t()?)? * scale)?
            }
            L2WVariant::Gaussian | L2WVariant::EmbeddedGaussian => {
                let s = Self::project(&lp.phi, support)?.reshape((k, ()))?;
                let q = Self::project(&lp.theta, query)?.reshape((n, ()))?;
                (q.matmul(&s.t()?)? * scale)?
                    .clamp(-LOGIT_CLAMP, LOGIT_CLAMP)?
                    .exp()?
            }
            L2WVariant::Concatenation => {
                let w = lp.concat_w.as_ref().expect("concatenation has a weight vector");
                let d = w.dims()[0] / 2;
                let wq = w.narrow(0, 0, d)?.unsqueeze(1)?;
                let ws = w.narrow(0, d, d)?.unsqueeze(1)?;
                let q = Self::project(&lp.theta, query)?.reshape((n, ()))?;
                let s = Self::project(&lp.phi, support)?.reshape((k, ()))?;
                let qa = q.matmul(&wq)?; // (N, 1)
                let sa = s.matmul(&ws)?.t()?; // (1, K)
                qa.broadcast_add(&sa)?.relu()?
            }
        };
        Ok(logits)
    }
}

/// Per-level support weights `(N, K)`; each row is a probability vector.
#[derive(Debug, Clone)]
pub struct SupportWeights {
    per_level: Vec<Tensor>,
}

impl SupportWeights {
    pub fn levels(&self) -> &[Tensor] {
        &self.per_level
    }

    pub fn num_levels(&self) -> usize {
        self.per_level.len()
    }

    /// Weights of query `n`, one `K`-vector per level.
    pub fn for_query(&self, n: usize) -> Result<Vec<Vec<f64>>> {
        self.per_level
            .iter()
            .map(|w| Ok(w.get(n)?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?))
            .collect()
    }

    /// Uniform `1/K` weights for `n` queries at every level.
    pub fn uniform(levels: usize, n: usize, k: usize, like: &Tensor) -> Result<Self> {
        let w = Tensor::full(1.0 / k as f64, (n, k), like.device())?.to_dtype(like.dtype())?;
        Ok(Self {
            per_level: vec![w; levels],
        })
    }
}

fn check_inputs(params: &L2WParams, query: &FeaturePyramid, bank: &SupportFeatureBank) -> Result<()> {
    if bank.k() == 0 {
        return Err(Error::Precondition("support bank is empty".into()));
    }
    bank.pyramid().ensure_same_shapes(query)?;
    if query.shapes() != params.shapes {
        return Err(Error::Shape(format!(
            "weighting head built for {:?}, got pyramid {:?}",
            params.shapes,
            query.shapes()
        )));
    }
    Ok(())
}

fn ensure_finite(t: &Tensor, term: &str) -> Result<()> {
    let v = t
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(term))
    }
}

/// Support weights for every query in `query` against `bank`.
pub fn compute_weights(
    params: &L2WParams,
    query: &FeaturePyramid,
    bank: &SupportFeatureBank,
) -> Result<SupportWeights> {
    check_inputs(params, query, bank)?;
    let mut per_level = Vec::with_capacity(query.num_levels());
    for (i, (q, s)) in query.levels().iter().zip(bank.pyramid().levels()).enumerate() {
        let logits = params.level_logits(i, q, s)?;
        ensure_finite(&logits, "l2w logits")?;
        per_level.push(candle_nn::ops::softmax(&logits, D::Minus1)?);
    }
    Ok(SupportWeights { per_level })
}

/// Convex combination of support maps `(N, C, H, W)` under `weights (N, K)`.
pub(crate) fn weighted_support(weights: &Tensor, support: &Tensor) -> Result<Tensor> {
    let (k, c, h, w) = support.dims4()?;
    let n = weights.dims()[0];
    Ok(weights
        .matmul(&support.reshape((k, c * h * w))?)?
        .reshape((n, c, h, w))?)
}

/// Per-level dissimilarity maps `(N, H_i, W_i)` between each query and its
/// weighted support reference.
pub fn weighted_dissimilarity_maps(
    weights: &SupportWeights,
    query: &FeaturePyramid,
    bank: &SupportFeatureBank,
    eps: f64,
    stop_support_grad: bool,
) -> Result<Vec<Tensor>> {
    query
        .levels()
        .iter()
        .zip(bank.pyramid().levels())
        .zip(weights.levels())
        .map(|((q, s), w)| {
            let s = if stop_support_grad { s.detach() } else { s.clone() };
            dissimilarity_map(&weighted_support(w, &s)?, q, eps)
        })
        .collect()
}

/// Per-level maps of the support-averaged dissimilarity (no weighting).
pub fn mean_dissimilarity_maps(
    query: &FeaturePyramid,
    bank: &SupportFeatureBank,
    eps: f64,
) -> Result<Vec<Tensor>> {
    bank.pyramid().ensure_same_shapes(query)?;
    query
        .levels()
        .iter()
        .zip(bank.pyramid().levels())
        .map(|(q, s)| Ok(pairwise_dissimilarity(s, q, eps)?.mean(1)?))
        .collect()
}

/// Weighted self-distillation loss per query `(N,)`.
pub fn ssd_l2w_loss_per_item(
    params: &L2WParams,
    query: &FeaturePyramid,
    bank: &SupportFeatureBank,
    eps: f64,
    stop_support_grad: bool,
) -> Result<Tensor> {
    let weights = compute_weights(params, query, bank)?;
    let maps = weighted_dissimilarity_maps(&weights, query, bank, eps, stop_support_grad)?;
    let mut total: Option<Tensor> = None;
    for m in maps {
        let term = m.mean(D::Minus1)?.mean(D::Minus1)?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok(total.expect("pyramids are non-empty"))
}

pub fn ssd_l2w_loss(
    params: &L2WParams,
    query: &FeaturePyramid,
    bank: &SupportFeatureBank,
    eps: f64,
) -> Result<Tensor> {
    Ok(ssd_l2w_loss_per_item(params, query, bank, eps, false)?.mean_all()?)
}

/// One line of a weight dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub episode_id: String,
    pub level_index: usize,
    pub support_ids: Vec<String>,
    pub weights: Vec<f64>,
}

impl WeightRecord {
    pub fn read_all(path: &Path) -> Result<Vec<WeightRecord>> {
        let file = File::open(path).at(path)?;
        let mut out = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.at(path)?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| {
                Error::Data(format!("bad weight record in {}: {e}", path.display()))
            })?);
        }
        Ok(out)
    }
}

/// Writes the weights of query `query_index` as JSON lines, one per level.
pub fn export_weights(
    weights: &SupportWeights,
    query_index: usize,
    episode_id: &str,
    support_ids: &[String],
    path: &Path,
) -> Result<Vec<WeightRecord>> {
    let rows = weights.for_query(query_index)?;
    let records: Vec<WeightRecord> = rows
        .into_iter()
        .enumerate()
        .map(|(level_index, w)| {
            if w.len() != support_ids.len() {
                return Err(Error::Precondition(format!(
                    "{} weights but {} support ids",
                    w.len(),
                    support_ids.len()
                )));
            }
            Ok(WeightRecord {
                episode_id: episode_id.to_string(),
                level_index,
                support_ids: support_ids.to_vec(),
                weights: w,
            })
        })
        .collect::<Result<_>>()?;
    let file = File::create(path).at(path)?;
    let mut out = BufWriter::new(file);
    for r in &records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(out, "{line}").at(path)?;
    }
    out.flush().at(path)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::Source;
    use candle_core::DType;

    fn shapes() -> Vec<LevelShape> {
        vec![(4, 4, 4), (8, 2, 2)]
    }

    fn random_pyramid(n: usize, seed: u64) -> FeaturePyramid {
        let mut rng = nn::init_rng(seed, "test");
        let levels = shapes()
            .iter()
            .map(|&(c, h, w)| {
                nn::normal_tensor(&mut rng, &[n, c, h, w], 1.0, DType::F64, &Device::Cpu).unwrap()
            })
            .collect();
        FeaturePyramid::new(levels, vec!["a".into(), "b".into()], Source::Student).unwrap()
    }

    fn ids(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn concat_vector_only_for_concatenation() {
        for v in [
            L2WVariant::ScaledDot,
            L2WVariant::Gaussian,
            L2WVariant::EmbeddedGaussian,
            L2WVariant::Concatenation,
        ] {
            let p = L2WParams::new(v, &shapes(), 0, 0.01, Precision::F64, &Device::Cpu).unwrap();
            let has_w = p.params().iter().any(|(k, _)| k.ends_with("concat_w"));
            assert_eq!(has_w, v == L2WVariant::Concatenation);
        }
    }

    #[test]
    fn single_support_gets_full_weight() {
        let q = random_pyramid(2, 1);
        let bank = SupportFeatureBank::new(random_pyramid(1, 2), ids(1)).unwrap();
        for v in [
            L2WVariant::ScaledDot,
            L2WVariant::Gaussian,
            L2WVariant::EmbeddedGaussian,
            L2WVariant::Concatenation,
        ] {
            let p = L2WParams::new(v, &shapes(), 0, 0.01, Precision::F64, &Device::Cpu).unwrap();
            let w = compute_weights(&p, &q, &bank).unwrap();
            for row in w.for_query(1).unwrap() {
                assert_eq!(row, vec![1.0]);
            }
        }
    }

    #[test]
    fn non_finite_query_is_numeric_error() {
        let q = random_pyramid(1, 1)
            .map_levels(|l| l.affine(0.0, f64::NAN))
            .unwrap();
        let bank = SupportFeatureBank::new(random_pyramid(2, 2), ids(2)).unwrap();
        let p = L2WParams::new(L2WVariant::ScaledDot, &shapes(), 0, 0.0, Precision::F64, &Device::Cpu)
            .unwrap();
        assert!(matches!(compute_weights(&p, &q, &bank), Err(Error::Numeric { .. })));
    }

    #[test]
    fn unknown_variant_name() {
        assert!("dot".parse::<L2WVariant>().is_err());
        assert_eq!("gaussian".parse::<L2WVariant>().unwrap(), L2WVariant::Gaussian);
    }

    #[test]
    fn export_symmetric_weights() {
        let q = random_pyramid(1, 1);
        let s = random_pyramid(1, 5);
        let twice = FeaturePyramid::cat(&[&s, &s]).unwrap();
        let bank = SupportFeatureBank::new(twice, ids(2)).unwrap();
        let p = L2WParams::identity(L2WVariant::ScaledDot, &shapes(), 0, Precision::F64, &Device::Cpu)
            .unwrap();
        let w = compute_weights(&p, &q, &bank).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.jsonl");
        export_weights(&w, 0, "ep0", bank.support_ids(), &path).unwrap();
        let back = WeightRecord::read_all(&path).unwrap();
        assert_eq!(back.len(), 2);
        for r in back {
            assert_eq!(r.weights, vec![0.5, 0.5]);
            assert_eq!(r.support_ids, ids(2));
        }
    }

    #[test]
    fn export_to_unwritable_path_is_io_error() {
        let q = random_pyramid(1, 1);
        let bank = SupportFeatureBank::new(random_pyramid(2, 5), ids(2)).unwrap();
        let p = L2WParams::identity(L2WVariant::ScaledDot, &shapes(), 0, Precision::F64, &Device::Cpu)
            .unwrap();
        let w = compute_weights(&p, &q, &bank).unwrap();
        let err = export_weights(&w, 0, "e", bank.support_ids(), Path::new("/nonexistent/dir/w.jsonl"));
        assert!(matches!(err, Err(Error::Io { .. })));
    }
}
