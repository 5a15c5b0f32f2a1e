//! Synthetic labelled 2-D datasets.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::net::Label;
use crate::rng::Rng;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Coordinates are clamped to this box.
pub const BOUND: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    /// Eight isotropic modes on a circle of radius 4; label is the mode.
    Gaussians8,
    /// Uniform over the dark squares of an 8×8 unit board on `[-4, 4]²`;
    /// label is the parity of the square's column index.
    Checkerboard,
    /// Two interleaved half circles; label is the moon.
    Moons,
    /// Two interleaved spiral arms; label is the arm.
    Spirals,
}

impl DatasetKind {
    pub fn class_count(self) -> usize {
        match self {
            DatasetKind::Gaussians8 => 8,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Gaussians8 => "gaussians8",
            DatasetKind::Checkerboard => "checkerboard",
            DatasetKind::Moons => "moons",
            DatasetKind::Spirals => "spirals",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussians8" => Ok(DatasetKind::Gaussians8),
            "checkerboard" => Ok(DatasetKind::Checkerboard),
            "moons" => Ok(DatasetKind::Moons),
            "spirals" => Ok(DatasetKind::Spirals),
            other => Err(Error::invalid(format!("unknown dataset kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub size: usize,
    pub seed: u64,
    /// Isotropic Gaussian jitter; unused by the checkerboard.
    pub noise: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::Gaussians8,
            size: 50_000,
            seed: 0,
            noise: 0.3,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::invalid("dataset size must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("dataset noise must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledPoint {
    pub x: [f64; 2],
    pub label: usize,
}

/// Draws `count` points from the density described by `spec`.
pub fn sample(spec: &DatasetSpec, count: usize, rng: &mut Rng) -> Result<Vec<LabeledPoint>> {
    spec.validate()?;
    let sigma = spec.noise;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (x, label) = match spec.kind {
            DatasetKind::Gaussians8 => {
                let k = rng.below(8);
                let angle = std::f64::consts::TAU * k as f64 / 8.0;
                let c = [4.0 * angle.cos(), 4.0 * angle.sin()];
                ([c[0] + sigma * rng.normal(), c[1] + sigma * rng.normal()], k)
            }
            DatasetKind::Checkerboard => {
                // 32 dark squares: column i in 0..8, row j with (i + j) even.
                let square = rng.below(32);
                let col = square / 4;
                let row = 2 * (square % 4) + (col % 2);
                let x = -4.0 + col as f64 + rng.uniform();
                let y = -4.0 + row as f64 + rng.uniform();
                ([x, y], col % 2)
            }
            DatasetKind::Moons => {
                let label = rng.below(2);
                let a = std::f64::consts::PI * rng.uniform();
                let (x, y) = if label == 0 {
                    (a.cos(), a.sin())
                } else {
                    (1.0 - a.cos(), 0.5 - a.sin())
                };
                (
                    [
                        2.5 * (x - 0.5) + sigma * rng.normal(),
                        2.5 * (y - 0.25) + sigma * rng.normal(),
                    ],
                    label,
                )
            }
            DatasetKind::Spirals => {
                let label = rng.below(2);
                let s = rng.uniform().sqrt();
                let a = 3.0 * std::f64::consts::PI * s + std::f64::consts::PI * label as f64;
                let r = 4.0 * s;
                (
                    [r * a.cos() + sigma * rng.normal(), r * a.sin() + sigma * rng.normal()],
                    label,
                )
            }
        };
        out.push(LabeledPoint {
            x: [x[0].clamp(-BOUND, BOUND), x[1].clamp(-BOUND, BOUND)],
            label,
        });
    }
    Ok(out)
}

/// Seeded choice of `m` points without replacement, in draw order.
pub fn few_shot_subset(data: &[LabeledPoint], m: usize, seed: u64) -> Result<Vec<LabeledPoint>> {
    Ok(choose_indices(data.len(), m, seed)?
        .into_iter()
        .map(|i| data[i])
        .collect())
}

/// First `m` positions of a seeded partial Fisher-Yates shuffle of `0..len`.
fn choose_indices(len: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m == 0 || m > len {
        return Err(Error::invalid(format!("few-shot subset of {m} from {len} points")));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..m {
        let j = i + rng.below(len - i);
        idx.swap(i, j);
    }
    idx.truncate(m);
    Ok(idx)
}

/// Per-coordinate affine standardization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            mean: [0.0; 2],
            std: [1.0; 2],
        }
    }

    /// Zero mean, unit variance for `points`.
    pub fn fit(points: &[LabeledPoint]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("cannot standardize an empty dataset"));
        }
        let n = points.len() as f64;
        let mut mean = [0.0; 2];
        for p in points {
            mean[0] += p.x[0];
            mean[1] += p.x[1];
        }
        mean = [mean[0] / n, mean[1] / n];
        let mut var = [0.0; 2];
        for p in points {
            var[0] += (p.x[0] - mean[0]).powi(2);
            var[1] += (p.x[1] - mean[1]).powi(2);
        }
        let std = [(var[0] / n).sqrt(), (var[1] / n).sqrt()];
        if !(std[0] > 0.0 && std[1] > 0.0) {
            return Err(Error::invalid("dataset has zero variance"));
        }
        Ok(Normalization { mean, std })
    }

    pub fn apply(&self, x: [f64; 2]) -> [f64; 2] {
        [
            (x[0] - self.mean[0]) / self.std[0],
            (x[1] - self.mean[1]) / self.std[1],
        ]
    }

    pub fn invert(&self, z: [f64; 2]) -> [f64; 2] {
        [
            z[0] * self.std[0] + self.mean[0],
            z[1] * self.std[1] + self.mean[1],
        ]
    }

    /// Maps a `[n, 2]` tensor back to data coordinates.
    pub fn invert_tensor<S: Scalar>(&self, t: &Tensor<S>) -> Result<Tensor<S>> {
        let rows: Vec<[S; 2]> = (0..t.rows())
            .map(|i| {
                let r = t.row(i);
                let z = [r[0].to_f64().unwrap_or(f64::NAN), r[1].to_f64().unwrap_or(f64::NAN)];
                let x = self.invert(z);
                [lit(x[0]), lit(x[1])]
            })
            .collect();
        Tensor::from_points(&rows)
    }
}

/// Standardized points ready for training.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    points: Tensor<S>,
    labels: Vec<usize>,
    class_count: usize,
    normalization: Normalization,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(raw: &[LabeledPoint], class_count: usize, normalization: Normalization) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::invalid("dataset must be non-empty"));
        }
        if let Some(p) = raw.iter().find(|p| p.label >= class_count.max(1)) {
            return Err(Error::LabelOutOfRange {
                label: p.label,
                class_count,
            });
        }
        let pts: Vec<[S; 2]> = raw
            .iter()
            .map(|p| {
                let z = normalization.apply(p.x);
                [lit(z[0]), lit(z[1])]
            })
            .collect();
        Ok(Dataset {
            points: Tensor::from_points(&pts)?,
            labels: raw.iter().map(|p| p.label).collect(),
            class_count,
            normalization,
        })
    }

    /// Samples `spec.size` points from `rng` and standardizes them with
    /// constants fitted to the sample.
    pub fn generate(spec: &DatasetSpec, rng: &mut Rng) -> Result<Self> {
        let raw = sample(spec, spec.size, rng)?;
        let norm = Normalization::fit(&raw)?;
        Dataset::new(&raw, spec.kind.class_count(), norm)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn points(&self) -> &Tensor<S> {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    /// Labels as network conditions.
    pub fn conditions(&self, indices: &[usize]) -> Vec<Label> {
        indices.iter().map(|&i| Some(self.labels[i])).collect()
    }

    /// Rows at `indices` with their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<S>, Vec<usize>)> {
        Ok((
            self.points.select_rows(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    /// Fixed subset keeping this dataset's normalization.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (points, labels) = self.batch(indices)?;
        Ok(Dataset {
            points,
            labels,
            class_count: self.class_count,
            normalization: self.normalization,
        })
    }

    /// Seeded `m`-point subset, see [`few_shot_subset`].
    pub fn few_shot(&self, m: usize, seed: u64) -> Result<Self> {
        self.subset(&choose_indices(self.len(), m, seed)?)
    }
}
