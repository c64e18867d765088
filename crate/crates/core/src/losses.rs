//! Cosine-similarity distillation losses.
//!
//! Every loss works on batched pyramids: the `*_per_item` forms return one
//! value per query `(N,)`, the plain forms average them. With a single query
//! the two coincide with the per-episode objective.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::l2w::L2WVariant;
use crate::pyramid::FeaturePyramid;
use crate::student::SupportFeatureBank;

pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the teacher-student term.
    pub lambda_weight: f64,
    /// Train with the support term at all (`false` leaves the teacher term only).
    pub use_ssd: bool,
    /// Query-conditioned support weighting instead of the plain support mean.
    pub use_l2w: bool,
    pub l2w_variant: L2WVariant,
    pub epsilon: f64,
    /// Cut gradients through support features in the support term.
    pub support_stop_gradient: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_weight: DEFAULT_LAMBDA,
            use_ssd: true,
            use_l2w: true,
            l2w_variant: L2WVariant::ScaledDot,
            epsilon: DEFAULT_EPSILON,
            support_stop_gradient: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_weight.is_finite() || self.lambda_weight < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda_weight
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !self.use_ssd && self.lambda_weight == 0.0 {
            return Err(Error::Config(
                "disabling both the support term and the teacher term leaves no objective".into(),
            ));
        }
        Ok(())
    }
}

/// `aᵀb / sqrt(‖a‖²‖b‖² + eps)`.
pub fn cosine_sim(a: &[f64], b: &[f64], eps: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_sim on vectors of different length");
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na * nb + eps).sqrt()
}

/// Cosine similarity along `dim` (the channel axis), broadcasting the rest.
pub fn channel_cosine(a: &Tensor, b: &Tensor, dim: usize, eps: f64) -> Result<Tensor> {
    let dot = a.broadcast_mul(b)?.sum(dim)?;
    let na = a.sqr()?.sum(dim)?;
    let nb = b.sqr()?.sum(dim)?;
    let denom = (na.broadcast_mul(&nb)? + eps)?.sqrt()?;
    Ok(dot.div(&denom)?)
}

/// `1 - cos` between two `(N, C, H, W)` maps, giving `(N, H, W)`.
pub fn dissimilarity_map(a: &Tensor, b: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(channel_cosine(a, b, 1, eps)?.affine(-1.0, 1.0)?)
}

fn spatial_mean(x: &Tensor) -> Result<Tensor> {
    // (..., H, W) -> (...)
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// Teacher-student loss per query. The teacher side carries no gradient.
pub fn tsd_loss_per_item(
    teacher: &FeaturePyramid,
    student: &FeaturePyramid,
    eps: f64,
) -> Result<Tensor> {
    teacher.ensure_same_shapes(student)?;
    if teacher.batch_size() != student.batch_size() {
        return Err(Error::Shape(format!(
            "teacher batch {} vs student batch {}",
            teacher.batch_size(),
            student.batch_size()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (t, s) in teacher.levels().iter().zip(student.levels()) {
        let term = spatial_mean(&dissimilarity_map(&t.detach(), s, eps)?)?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok(total.expect("pyramids are non-empty"))
}

pub fn tsd_loss(teacher: &FeaturePyramid, student: &FeaturePyramid, eps: f64) -> Result<Tensor> {
    Ok(tsd_loss_per_item(teacher, student, eps)?.mean_all()?)
}

/// Per-location dissimilarity of each query to each support: `(N, K, H, W)`.
pub(crate) fn pairwise_dissimilarity(support: &Tensor, query: &Tensor, eps: f64) -> Result<Tensor> {
    let s = support.unsqueeze(0)?; // (1, K, C, H, W)
    let q = query.unsqueeze(1)?; // (N, 1, C, H, W)
    Ok(channel_cosine(&s, &q, 2, eps)?.affine(-1.0, 1.0)?)
}

fn check_bank(bank: &SupportFeatureBank, query: &FeaturePyramid) -> Result<()> {
    if bank.k() == 0 {
        return Err(Error::Precondition("support bank is empty".into()));
    }
    bank.pyramid().ensure_same_shapes(query)
}

/// Unweighted student self-distillation per query: the support-averaged
/// multi-scale dissimilarity.
pub fn ssd_loss_per_item(
    bank: &SupportFeatureBank,
    query: &FeaturePyramid,
    eps: f64,
    stop_support_grad: bool,
) -> Result<Tensor> {
    check_bank(bank, query)?;
    let mut total: Option<Tensor> = None;
    for (s, q) in bank.pyramid().levels().iter().zip(query.levels()) {
        let s = if stop_support_grad { s.detach() } else { s.clone() };
        let d = pairwise_dissimilarity(&s, q, eps)?; // (N, K, H, W)
        let term = spatial_mean(&d)?.mean(1)?; // (N,)
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok(total.expect("pyramids are non-empty"))
}

pub fn ssd_loss(bank: &SupportFeatureBank, query: &FeaturePyramid, eps: f64) -> Result<Tensor> {
    Ok(ssd_loss_per_item(bank, query, eps, false)?.mean_all()?)
}

/// `λ·tsd + ssd` on already-evaluated terms.
pub fn total_loss(cfg: &LossConfig, tsd: f64, ssd: f64) -> Result<f64> {
    for (name, v) in [("tsd", tsd), ("ssd", ssd)] {
        if !v.is_finite() {
            return Err(Error::numeric(name));
        }
        if v < 0.0 {
            return Err(Error::Precondition(format!("{name} term is negative: {v}")));
        }
    }
    Ok(cfg.lambda_weight * tsd + ssd)
}

/// Graph-level form of [`total_loss`]; either term may be absent.
pub(crate) fn combine(cfg: &LossConfig, tsd: Option<&Tensor>, ssd: Option<&Tensor>) -> Result<Tensor> {
    match (tsd, ssd) {
        (Some(t), Some(s)) => Ok(((t * cfg.lambda_weight)? + s)?),
        (Some(t), None) => Ok((t * cfg.lambda_weight)?),
        (None, Some(s)) => Ok(s.clone()),
        (None, None) => Err(Error::Config("objective has no terms".into())),
    }
}
