//! Distances, straightness and self-consistency measures on 2-D samples.

use crate::distill::{sample_triple, self_skips, target_parts, TripleTimes};
use crate::error::{Error, Result};
use crate::flow::{euler_sample, gaussian, interpolate_rows, TimeGrid};
use crate::net::{Label, VelocityField};
use crate::rng::{self, Rng, Streams};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Unit directions `(cos φ, sin φ)` with `φ = 2πu`, `u` from the
/// `projections` stream of `seed`.
pub fn projection_directions(n_proj: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = Streams::new(seed).stream(rng::PROJECTIONS);
    (0..n_proj)
        .map(|_| {
            let phi = std::f64::consts::TAU * rng.uniform();
            [phi.cos(), phi.sin()]
        })
        .collect()
}

/// 2-Wasserstein distance between two empirical 1-D distributions.
///
/// The quantile functions are step functions with jumps at `i/n` and `j/m`;
/// the integral of their squared difference is accumulated exactly over the
/// merged breakpoints, which are compared as integers `i·m` and `j·n`.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("wasserstein distance of an empty set"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as u128, b.len() as u128);
    let total = (n * m) as f64;
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = 0u128;
    let mut acc = 0.0;
    while i < a.len() && j < b.len() {
        let next_a = (i as u128 + 1) * m;
        let next_b = (j as u128 + 1) * n;
        let cur = next_a.min(next_b);
        let diff = a[i] - b[j];
        acc += (cur - prev) as f64 / total * diff * diff;
        prev = cur;
        if next_a == cur {
            i += 1;
        }
        if next_b == cur {
            j += 1;
        }
    }
    Ok(acc.sqrt())
}

/// Mean over seeded directions of the 1-D 2-Wasserstein distance between the
/// projected point sets.
pub fn sliced_wasserstein<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, n_proj: usize, seed: u64) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::invalid("sliced wasserstein of an empty set"));
    }
    if a.cols() != 2 || b.cols() != 2 {
        return Err(Error::shape("sliced wasserstein", "point sets must be 2-D"));
    }
    if n_proj == 0 {
        return Err(Error::invalid("at least one projection is required"));
    }
    let a = a.to_f64_vec();
    let b = b.to_f64_vec();
    let dirs = projection_directions(n_proj, seed);
    let project = |pts: &[f64], d: [f64; 2]| -> Vec<f64> {
        pts.chunks_exact(2).map(|p| p[0] * d[0] + p[1] * d[1]).collect()
    };
    let mut sum = 0.0;
    for d in dirs {
        sum += wasserstein_1d(&project(&a, d), &project(&b, d))?;
    }
    Ok(sum / n_proj as f64)
}

/// Mean path-length excess over trajectories with a non-zero chord.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Straightness {
    pub mean: f64,
    /// Trajectories whose endpoints coincide.
    pub excluded: usize,
}

/// `Σ‖x_{i+1} − x_i‖ / ‖x_n − x_0‖ − 1` per row of the stacked states,
/// averaged over rows.
pub fn straightness<S: Scalar>(trajectory: &[Tensor<S>]) -> Result<Straightness> {
    if trajectory.len() < 2 {
        return Err(Error::invalid("a trajectory needs at least two states"));
    }
    for s in &trajectory[1..] {
        trajectory[0].same_shape(s, "straightness")?;
    }
    let rows = trajectory[0].rows();
    let dist = |a: &[S], b: &[S]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                let d = (x - y).to_f64().unwrap_or(f64::NAN);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    };
    let (mut sum, mut used, mut excluded) = (0.0, 0usize, 0usize);
    for r in 0..rows {
        let chord = dist(trajectory[0].row(r), trajectory[trajectory.len() - 1].row(r));
        if chord == 0.0 {
            excluded += 1;
            continue;
        }
        let length: f64 = trajectory.windows(2).map(|w| dist(w[0].row(r), w[1].row(r))).sum();
        sum += (length / chord - 1.0).max(0.0);
        used += 1;
    }
    if used == 0 {
        return Err(Error::invalid("every trajectory has a zero chord"));
    }
    Ok(Straightness {
        mean: sum / used as f64,
        excluded,
    })
}

/// Mean squared distance between a field and its own two-step shortcut
/// target, over `trials` random triples per data row.
///
/// Triples use skips from `{1, 2, 4, …, n/4}` on `grid`.
pub fn consistency_residual<S: Scalar>(
    model: &dyn VelocityField<S>,
    x0: &Tensor<S>,
    labels: &[Label],
    grid: &TimeGrid<S>,
    trials: usize,
    guidance: S,
    rng: &mut Rng,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let mut skips = vec![1];
    if let Ok(more) = self_skips(grid.steps()) {
        skips.extend(more);
    }
    let b = x0.rows();
    let w = vec![guidance; b];
    let mut total = 0.0;
    for _ in 0..trials {
        let triples = (0..b)
            .map(|_| sample_triple(grid, skips[rng.below(skips.len())], rng))
            .collect::<Result<Vec<TripleTimes<S>>>>()?;
        let x1 = gaussian(b, x0.cols(), rng);
        let t1: Vec<S> = triples.iter().map(|t| t.t1).collect();
        let xt = interpolate_rows(x0, &x1, &t1)?;
        let parts = target_parts(model, model, &xt, &triples, labels, &w)?;
        let diff = parts.v_a.sub(&parts.target)?;
        total += diff.data().iter().map(|&d| (d * d).to_f64().unwrap_or(f64::NAN)).sum::<f64>();
    }
    let value = total / (trials * b) as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("consistency residual".into()));
    }
    Ok(value)
}

/// Initial noise and uniform labels, one row per seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedBatch<S> {
    pub z: Tensor<S>,
    pub labels: Vec<Label>,
}

/// Row `i` is drawn from the `eval` stream of `seeds[i]` alone, so the same
/// seed always yields the same noise and label.
pub fn seed_batch<S: Scalar>(seeds: &[u64], class_count: usize) -> Result<SeedBatch<S>> {
    if seeds.is_empty() {
        return Err(Error::invalid("seed list is empty"));
    }
    let mut z = Vec::with_capacity(seeds.len() * 2);
    let mut labels = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let mut r = Streams::new(s).stream(rng::EVAL);
        z.push(lit::<S>(r.normal()));
        z.push(lit::<S>(r.normal()));
        labels.push((class_count > 0).then(|| r.below(class_count)));
    }
    Ok(SeedBatch {
        z: Tensor::new(vec![seeds.len(), 2], z)?,
        labels,
    })
}

/// Sampler settings shared by both sides of a fidelity comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalProtocol {
    pub shift: f64,
    pub guidance: f64,
    pub n_proj: usize,
    pub projection_seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            shift: 3.0,
            guidance: 2.0,
            n_proj: 128,
            projection_seed: 0,
        }
    }
}

/// Full trajectory of `model` from the seed batch on an `steps`-step grid.
pub fn trajectories<S: Scalar>(
    model: &dyn VelocityField<S>,
    batch: &SeedBatch<S>,
    steps: usize,
    protocol: &EvalProtocol,
) -> Result<Vec<Tensor<S>>> {
    let grid = TimeGrid::uniform(steps)?.shifted(lit(protocol.shift))?;
    let w = if batch.labels.iter().any(Option::is_some) {
        lit(protocol.guidance)
    } else {
        S::zero()
    };
    euler_sample(model, &grid, &batch.z, &batch.labels, w)
}

pub fn samples<S: Scalar>(
    model: &dyn VelocityField<S>,
    batch: &SeedBatch<S>,
    steps: usize,
    protocol: &EvalProtocol,
) -> Result<Tensor<S>> {
    Ok(trajectories(model, batch, steps, protocol)?.pop().unwrap())
}

/// Sliced Wasserstein between the teacher's `steps_teacher`-step outputs and
/// the student's `steps_student`-step outputs from the same seeds.
pub fn teacher_student_fidelity<S: Scalar>(
    teacher: &dyn VelocityField<S>,
    student: &dyn VelocityField<S>,
    seeds: &[u64],
    class_count: usize,
    steps_teacher: usize,
    steps_student: usize,
    protocol: &EvalProtocol,
) -> Result<f64> {
    let batch = seed_batch(seeds, class_count)?;
    let reference = samples(teacher, &batch, steps_teacher, protocol)?;
    fidelity_to_reference(&reference, student, &batch, steps_student, protocol)
}

/// Same as [`teacher_student_fidelity`] with the teacher outputs precomputed.
pub fn fidelity_to_reference<S: Scalar>(
    reference: &Tensor<S>,
    student: &dyn VelocityField<S>,
    batch: &SeedBatch<S>,
    steps_student: usize,
    protocol: &EvalProtocol,
) -> Result<f64> {
    let out = samples(student, batch, steps_student, protocol)?;
    sliced_wasserstein(reference, &out, protocol.n_proj, protocol.projection_seed)
}
