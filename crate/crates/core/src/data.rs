//! Seeded synthetic classification tasks.
//!
//! `gaussian_blobs` places class `c` of `k` at radius `separation / 2` on the
//! circle spanned by the first two coordinates (angle `2πc/k`), or on a line
//! spaced by `separation` when `dims == 1`, with unit-variance noise.
//! `xor_grid` draws points uniformly inside the four quadrants of `[-1, 1]²`
//! in round-robin order and labels them by the sign of `x·y`. `shifted`
//! regenerates its base with the same seed and translates every point.

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum GeneratorSpec {
    GaussianBlobs {
        classes: usize,
        dims: usize,
        separation: f64,
        samples: usize,
    },
    XorGrid {
        samples: usize,
    },
    Shifted {
        base: Box<GeneratorSpec>,
        delta: Vec<f64>,
    },
}

impl GeneratorSpec {
    pub fn dims(&self) -> usize {
        match self {
            GeneratorSpec::GaussianBlobs { dims, .. } => *dims,
            GeneratorSpec::XorGrid { .. } => 2,
            GeneratorSpec::Shifted { base, .. } => base.dims(),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            GeneratorSpec::GaussianBlobs { classes, .. } => *classes,
            GeneratorSpec::XorGrid { .. } => 2,
            GeneratorSpec::Shifted { base, .. } => base.classes(),
        }
    }

    /// Per-class means of the generating distribution.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        match self {
            GeneratorSpec::GaussianBlobs {
                classes,
                dims,
                separation,
                ..
            } => (0..*classes)
                .map(|c| blob_mean(c, *classes, *dims, *separation))
                .collect(),
            GeneratorSpec::XorGrid { .. } => vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            GeneratorSpec::Shifted { base, delta } => base
                .class_means()
                .into_iter()
                .map(|m| m.iter().zip(delta).map(|(a, d)| a + d).collect())
                .collect(),
        }
    }
}

fn blob_mean(c: usize, k: usize, dims: usize, sep: f64) -> Vec<f64> {
    let mut mean = vec![0.0; dims];
    if dims == 1 {
        mean[0] = sep * (c as f64 - (k as f64 - 1.0) / 2.0);
    } else {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
        mean[0] = 0.5 * sep * angle.cos();
        mean[1] = 0.5 * sep * angle.sin();
    }
    mean
}

/// Features `[n, d]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rank() != 2 || features.rows() != labels.len() {
            return Err(Error::dim("dataset", features.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {bad} >= {classes} classes")));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Seeded shuffle, then the first `1 - test_fraction` rows train.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction must be in [0, 1), got {test_fraction}"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seeded(seed));
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let (test, train) = idx.split_at(n_test);
        Ok((self.subset(train), self.subset(test)))
    }
}

pub fn generate(spec: &GeneratorSpec, seed: u64) -> Result<Dataset> {
    match spec {
        GeneratorSpec::GaussianBlobs {
            classes,
            dims,
            separation,
            samples,
        } => {
            if *classes < 2 || *dims < 1 || *samples < 1 {
                return Err(Error::Config(format!(
                    "gaussian_blobs needs classes >= 2, dims >= 1, samples >= 1; got {classes}, {dims}, {samples}"
                )));
            }
            let means: Vec<_> = (0..*classes)
                .map(|c| blob_mean(c, *classes, *dims, *separation))
                .collect();
            let mut rng = seeded(seed);
            let mut data = Vec::with_capacity(samples * dims);
            let mut labels = Vec::with_capacity(*samples);
            for i in 0..*samples {
                let c = i % classes;
                for &m in &means[c] {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push(m + z);
                }
                labels.push(c);
            }
            Dataset::new(Tensor::new(vec![*samples, *dims], data)?, labels, *classes)
        }
        GeneratorSpec::XorGrid { samples } => {
            if *samples < 1 {
                return Err(Error::Config("xor_grid needs samples >= 1".into()));
            }
            let mut rng = seeded(seed);
            let mut data = Vec::with_capacity(samples * 2);
            let mut labels = Vec::with_capacity(*samples);
            for i in 0..*samples {
                let (sx, sy) = match i % 4 {
                    0 => (1.0, 1.0),
                    1 => (-1.0, 1.0),
                    2 => (-1.0, -1.0),
                    _ => (1.0, -1.0),
                };
                let x: f64 = rng.random_range(0.05..1.0);
                let y: f64 = rng.random_range(0.05..1.0);
                data.push(sx * x);
                data.push(sy * y);
                labels.push(usize::from(sx * sy < 0.0));
            }
            Dataset::new(Tensor::new(vec![*samples, 2], data)?, labels, 2)
        }
        GeneratorSpec::Shifted { base, delta } => {
            let mut ds = generate(base, seed)?;
            if delta.len() != base.dims() {
                return Err(Error::Config(format!(
                    "shift has {} components, data has {} dims",
                    delta.len(),
                    base.dims()
                )));
            }
            let d = delta.len();
            for (i, x) in ds.features.data_mut().iter_mut().enumerate() {
                *x += delta[i % d];
            }
            Ok(ds)
        }
    }
}

/// Train/test pair produced from one generator spec.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
}

impl TaskData {
    pub fn generate(spec: &GeneratorSpec, seed: u64, test_fraction: f64) -> Result<Self> {
        let all = generate(spec, seed)?;
        let (train, test) = all.split(test_fraction, seed.wrapping_add(1))?;
        Ok(TaskData { train, test })
    }
}
