//! Shared helpers: random pyramids and plain-loop reference implementations
//! of the losses and support weights.

#![allow(dead_code)]

use candle_core::{Device, Tensor, Var};
use d24fad::l2w::{L2WParams, L2WVariant};
use d24fad::pyramid::{FeaturePyramid, LevelShape, Source};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense `(N, C, H, W)` array in row-major order.
#[derive(Debug, Clone)]
pub struct Arr4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Arr4 {
    pub fn random(rng: &mut ChaCha8Rng, n: usize, (c, h, w): LevelShape) -> Self {
        let data = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { n, c, h, w, data }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    /// Channel vector at one location.
    pub fn vec_at(&self, n: usize, y: usize, x: usize) -> Vec<f64> {
        (0..self.c).map(|c| self.at(n, c, y, x)).collect()
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::from_vec(self.data.clone(), (self.n, self.c, self.h, self.w), &Device::Cpu).unwrap()
    }
}

/// Random tiny level shapes with non-increasing spatial area.
pub fn random_shapes(rng: &mut ChaCha8Rng) -> Vec<LevelShape> {
    let levels = rng.random_range(1..=3);
    let mut side = rng.random_range(2..=5);
    let mut out = Vec::new();
    for _ in 0..levels {
        out.push((rng.random_range(1..=5), side, side));
        side = (side - rng.random_range(0..=1)).max(1);
    }
    out
}

pub fn random_levels(rng: &mut ChaCha8Rng, n: usize, shapes: &[LevelShape]) -> Vec<Arr4> {
    shapes.iter().map(|&s| Arr4::random(rng, n, s)).collect()
}

pub fn pyramid(levels: &[Arr4], source: Source) -> FeaturePyramid {
    FeaturePyramid::new(
        levels.iter().map(Arr4::tensor).collect(),
        (0..levels.len()).map(|i| format!("l{i}")).collect(),
        source,
    )
    .unwrap()
}

/// Pyramid whose levels are trainable variables.
pub fn var_pyramid(levels: &[Arr4], source: Source) -> (FeaturePyramid, Vec<Var>) {
    let vars: Vec<Var> = levels.iter().map(|l| Var::from_tensor(&l.tensor()).unwrap()).collect();
    let p = FeaturePyramid::new(
        vars.iter().map(|v| v.as_tensor().clone()).collect(),
        (0..levels.len()).map(|i| format!("l{i}")).collect(),
        source,
    )
    .unwrap();
    (p, vars)
}

pub fn cos(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa * bb + eps).sqrt()
}

/// Mean over locations of `1 - cos(f(y, x), g(y, x))`.
fn mean_dissim(h: usize, w: usize, f: impl Fn(usize, usize) -> (Vec<f64>, Vec<f64>)) -> f64 {
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (a, b) = f(y, x);
            acc += 1.0 - cos(&a, &b, EPS);
        }
    }
    acc / (h * w) as f64
}

pub fn oracle_tsd_item(teacher: &[Arr4], student: &[Arr4], n: usize) -> f64 {
    teacher
        .iter()
        .zip(student)
        .map(|(t, s)| mean_dissim(t.h, t.w, |y, x| (t.vec_at(n, y, x), s.vec_at(n, y, x))))
        .sum()
}

pub fn oracle_ssd_item(support: &[Arr4], query: &[Arr4], n: usize) -> f64 {
    let k = support[0].n;
    let mut total = 0.0;
    for j in 0..k {
        for (s, q) in support.iter().zip(query) {
            total += mean_dissim(q.h, q.w, |y, x| (s.vec_at(j, y, x), q.vec_at(n, y, x)));
        }
    }
    total / k as f64
}

/// Per-level weighting parameters as plain arrays.
pub struct HeadArrays {
    pub variant: L2WVariant,
    /// `C×C` row-major (output channel, input channel).
    pub phi: Vec<Option<Vec<f64>>>,
    pub theta: Vec<Option<Vec<f64>>>,
    pub concat_w: Vec<Option<Vec<f64>>>,
}

pub fn head_arrays(params: &L2WParams) -> HeadArrays {
    let get = |name: String| {
        params
            .params()
            .get(&name)
            .map(|v| v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap())
    };
    let n = params.level_shapes().len();
    HeadArrays {
        variant: params.variant(),
        phi: (0..n).map(|i| get(format!("level{i}.phi"))).collect(),
        theta: (0..n).map(|i| get(format!("level{i}.theta"))).collect(),
        concat_w: (0..n).map(|i| get(format!("level{i}.concat_w"))).collect(),
    }
}

/// Applies an optional 1x1 projection to item `n`, flattened `(C, H, W)`.
fn projected_flat(a: &Arr4, n: usize, m: &Option<Vec<f64>>) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.c * a.h * a.w);
    for o in 0..a.c {
        for y in 0..a.h {
            for x in 0..a.w {
                let v = match m {
                    None => a.at(n, o, y, x),
                    Some(m) => (0..a.c).map(|i| m[o * a.c + i] * a.at(n, i, y, x)).sum(),
                };
                out.push(v);
            }
        }
    }
    out
}

pub fn oracle_weights(head: &HeadArrays, level: usize, support: &Arr4, query: &Arr4, n: usize) -> Vec<f64> {
    let k = support.n;
    let scale = 1.0 / (query.c as f64).sqrt();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let logits: Vec<f64> = (0..k)
        .map(|j| {
            let s = projected_flat(support, j, &head.phi[level]);
            let q = projected_flat(query, n, &head.theta[level]);
            match head.variant {
                L2WVariant::ScaledDot => dot(&q, &s) * scale,
                L2WVariant::Gaussian | L2WVariant::EmbeddedGaussian => {
                    (dot(&q, &s) * scale).clamp(-30.0, 30.0).exp()
                }
                L2WVariant::Concatenation => {
                    let w = head.concat_w[level].as_ref().unwrap();
                    let d = q.len();
                    (dot(&w[..d], &q) + dot(&w[d..], &s)).max(0.0)
                }
            }
        })
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn oracle_ssd_l2w_item(head: &HeadArrays, support: &[Arr4], query: &[Arr4], n: usize) -> f64 {
    let mut total = 0.0;
    for (i, (s, q)) in support.iter().zip(query).enumerate() {
        let w = oracle_weights(head, i, s, q, n);
        total += mean_dissim(q.h, q.w, |y, x| {
            let mut agg = vec![0.0; q.c];
            for (j, wj) in w.iter().enumerate() {
                for (c, a) in agg.iter_mut().enumerate() {
                    *a += wj * s.at(j, c, y, x);
                }
            }
            (agg, q.vec_at(n, y, x))
        });
    }
    total
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(candle_core::DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn vec1(t: &Tensor) -> Vec<f64> {
    t.to_dtype(candle_core::DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

pub mod tiny;
