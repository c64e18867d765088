use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Teacher,
    Student,
}

/// Per-level shape `(channels, height, width)`.
pub type LevelShape = (usize, usize, usize);

/// Multi-scale feature maps for a batch of `N` images.
///
/// Every level is a rank-4 tensor `(N, C_i, H_i, W_i)`, ordered from the
/// shallowest tapped stage to the deepest. A pyramid with `N = 1` is the
/// per-image pyramid; batching along the leading axis keeps forward passes
/// cheap.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
    layer_ids: Vec<String>,
    source: Source,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>, layer_ids: Vec<String>, source: Source) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Shape("feature pyramid has no levels".into()));
        }
        if levels.len() != layer_ids.len() {
            return Err(Error::Shape(format!(
                "{} levels but {} layer ids",
                levels.len(),
                layer_ids.len()
            )));
        }
        let mut batch = None;
        let mut prev_area = usize::MAX;
        for (i, level) in levels.iter().enumerate() {
            let (n, c, h, w) = level
                .dims4()
                .map_err(|_| Error::Shape(format!("level {i} is not rank 4: {:?}", level.dims())))?;
            if c == 0 || h == 0 || w == 0 {
                return Err(Error::Shape(format!("level {i} has an empty axis: {:?}", level.dims())));
            }
            if *batch.get_or_insert(n) != n {
                return Err(Error::Shape(format!("level {i} batch size {n} differs from level 0")));
            }
            if h * w > prev_area {
                return Err(Error::Shape(format!(
                    "level {i} spatial size {h}x{w} grows with depth"
                )));
            }
            prev_area = h * w;
        }
        Ok(Self {
            levels,
            layer_ids,
            source,
        })
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i]
    }

    pub fn deepest(&self) -> &Tensor {
        self.levels.last().expect("non-empty by construction")
    }

    pub fn layer_ids(&self) -> &[String] {
        &self.layer_ids
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Number of images in the batch.
    pub fn batch_size(&self) -> usize {
        self.levels[0].dims()[0]
    }

    pub fn shapes(&self) -> Vec<LevelShape> {
        self.levels
            .iter()
            .map(|l| {
                let d = l.dims();
                (d[1], d[2], d[3])
            })
            .collect()
    }

    /// Errors unless both pyramids have the same per-level `(C, H, W)`.
    pub fn ensure_same_shapes(&self, other: &FeaturePyramid) -> Result<()> {
        let (a, b) = (self.shapes(), other.shapes());
        if a != b {
            return Err(Error::Shape(format!(
                "pyramid shapes differ: {a:?} vs {b:?}"
            )));
        }
        Ok(())
    }

    /// Items `start..start + len` along the batch axis.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        let levels = self
            .levels
            .iter()
            .map(|l| l.narrow(0, start, len))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            levels,
            layer_ids: self.layer_ids.clone(),
            source: self.source,
        })
    }

    pub fn item(&self, i: usize) -> Result<Self> {
        self.narrow(i, 1)
    }

    /// One single-image pyramid per batch entry.
    pub fn split(&self) -> Result<Vec<Self>> {
        (0..self.batch_size()).map(|i| self.item(i)).collect()
    }

    /// Concatenates pyramids along the batch axis.
    pub fn cat(parts: &[&FeaturePyramid]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Precondition("cannot concatenate zero pyramids".into()))?;
        for p in &parts[1..] {
            first.ensure_same_shapes(p)?;
        }
        let levels = (0..first.num_levels())
            .map(|i| {
                let ls: Vec<&Tensor> = parts.iter().map(|p| &p.levels[i]).collect();
                Tensor::cat(&ls, 0)
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            levels,
            layer_ids: first.layer_ids.clone(),
            source: first.source,
        })
    }

    /// Same values, cut from the autodiff graph.
    pub fn detach(&self) -> Self {
        Self {
            levels: self.levels.iter().map(|l| l.detach()).collect(),
            layer_ids: self.layer_ids.clone(),
            source: self.source,
        }
    }

    pub fn map_levels<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(&Tensor) -> candle_core::Result<Tensor>,
    {
        let levels = self
            .levels
            .iter()
            .map(f)
            .collect::<candle_core::Result<Vec<_>>>()?;
        Self::new(levels, self.layer_ids.clone(), self.source)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn zeros(shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::zeros(shape, DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn rejects_empty_and_growing_levels() {
        assert!(FeaturePyramid::new(vec![], vec![], Source::Teacher).is_err());
        let grow = FeaturePyramid::new(
            vec![zeros((1, 2, 2, 2)), zeros((1, 2, 4, 4))],
            vec!["a".into(), "b".into()],
            Source::Teacher,
        );
        assert!(matches!(grow, Err(Error::Shape(_))));
    }

    #[test]
    fn split_and_cat_preserve_shapes() {
        let p = FeaturePyramid::new(
            vec![zeros((3, 4, 8, 8)), zeros((3, 8, 4, 4))],
            vec!["a".into(), "b".into()],
            Source::Student,
        )
        .unwrap();
        let items = p.split().unwrap();
        assert_eq!(items.len(), 3);
        assert_eq!(items[0].shapes(), vec![(4, 8, 8), (8, 4, 4)]);
        let refs: Vec<&FeaturePyramid> = items.iter().collect();
        let back = FeaturePyramid::cat(&refs).unwrap();
        assert_eq!(back.batch_size(), 3);
    }
}
