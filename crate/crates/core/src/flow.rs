//! Flow-matching paths, timestep grids, the Euler sampler and teacher
//! training.
//!
//! Time runs from noise at `t = 1` to data at `t = 0`; a sampler step from
//! `t_i` to `t_{i+1} < t_i` moves `x ← x − (t_i − t_{i+1}) · v`.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{bind, guided_on_tape, Conditioning, Label, NetConfig, Theta, Trainable, VelocityField};
use crate::optim::{adamw_step, AdamWConfig, OptimState};
use crate::rng::{self, Rng, Streams};
use crate::scalar::{count, lit, Scalar};
use crate::tape::{ParamId, Tape};
use crate::tensor::Tensor;

/// Strictly decreasing timesteps from 1 to 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid<S> {
    times: Vec<S>,
    shift: S,
}

impl<S: Scalar> TimeGrid<S> {
    /// `n + 1` equally spaced values from 1 down to 0.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("a time grid needs at least one step"));
        }
        let times = (0..=n)
            .map(|i| count::<S>(n - i) / count::<S>(n))
            .collect();
        Ok(TimeGrid {
            times,
            shift: S::one(),
        })
    }

    /// Applies `t ↦ s·t / (1 + (s − 1)·t)` to every interior point.
    pub fn shifted(&self, s: S) -> Result<Self> {
        if !(s >= S::one()) || !s.is_finite() {
            return Err(Error::invalid(format!("shift {s} must be a finite value ≥ 1")));
        }
        let n = self.times.len() - 1;
        let times = self
            .times
            .iter()
            .enumerate()
            .map(|(i, &t)| if i == 0 || i == n { t } else { shift_time(t, s) })
            .collect();
        Ok(TimeGrid {
            times,
            shift: self.shift * s,
        })
    }

    /// Validates an explicit ladder (used for non-uniform grids in tests and
    /// checkpoints).
    pub fn from_times(times: Vec<S>) -> Result<Self> {
        if times.len() < 2 || times[0] != S::one() || *times.last().unwrap() != S::zero() {
            return Err(Error::invalid("grid must start at 1 and end at 0"));
        }
        if times.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::invalid("grid must be strictly decreasing"));
        }
        Ok(TimeGrid {
            times,
            shift: S::one(),
        })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[S] {
        &self.times
    }

    pub fn shift(&self) -> S {
        self.shift
    }

    /// Interval lengths `t_{i-1} − t_i`.
    pub fn intervals(&self) -> Vec<S> {
        self.times.windows(2).map(|w| w[0] - w[1]).collect()
    }
}

pub fn make_grid<S: Scalar>(n: usize) -> Result<TimeGrid<S>> {
    TimeGrid::uniform(n)
}

pub fn shift_grid<S: Scalar>(grid: &TimeGrid<S>, s: S) -> Result<TimeGrid<S>> {
    grid.shifted(s)
}

/// Timestep shift of a single value.
pub fn shift_time<S: Scalar>(t: S, s: S) -> S {
    s * t / (S::one() + (s - S::one()) * t)
}

/// `(1 − t)·x0 + t·x1`.
pub fn interpolate<S: Scalar>(x0: &Tensor<S>, x1: &Tensor<S>, t: S) -> Result<Tensor<S>> {
    interpolate_rows(x0, x1, &vec![t; x0.rows()])
}

/// Row-wise interpolation with a time per row.
pub fn interpolate_rows<S: Scalar>(x0: &Tensor<S>, x1: &Tensor<S>, times: &[S]) -> Result<Tensor<S>> {
    x0.same_shape(x1, "interpolate")?;
    if times.len() != x0.rows() {
        return Err(Error::shape(
            "interpolate",
            format!("{} times for {} rows", times.len(), x0.rows()),
        ));
    }
    let c = x0.cols();
    let mut out = Vec::with_capacity(x0.len());
    for (i, &t) in times.iter().enumerate() {
        if !(t >= S::zero() && t <= S::one()) {
            return Err(Error::invalid(format!("time {t} outside [0, 1]")));
        }
        for j in 0..c {
            out.push((S::one() - t) * x0.data()[i * c + j] + t * x1.data()[i * c + j]);
        }
    }
    Tensor::new(x0.shape().to_vec(), out)
}

/// One signed Euler step per row: `x − (from − to) · v`.
///
/// Shared by the sampler, the shortcut targets and the distillation targets.
pub fn euler_step_rows<S: Scalar>(x: &Tensor<S>, v: &Tensor<S>, from: &[S], to: &[S]) -> Result<Tensor<S>> {
    x.same_shape(v, "euler_step")?;
    if from.len() != x.rows() || to.len() != x.rows() {
        return Err(Error::shape("euler_step", "time count does not match rows"));
    }
    let c = x.cols();
    let mut out = x.clone();
    for (i, (&a, &b)) in from.iter().zip(to).enumerate() {
        let d = a - b;
        for j in 0..c {
            let k = i * c + j;
            out.data_mut()[k] = x.data()[k] - d * v.data()[k];
        }
    }
    Ok(out)
}

/// A batch of points on the linear noising path.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample<S> {
    pub x0: Tensor<S>,
    pub x1: Tensor<S>,
    pub times: Vec<S>,
    pub xt: Tensor<S>,
    pub v_target: Tensor<S>,
    pub labels: Vec<Label>,
}

impl<S: Scalar> PathSample<S> {
    pub fn new(x0: Tensor<S>, x1: Tensor<S>, times: Vec<S>, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != x0.rows() {
            return Err(Error::shape("path sample", "label count does not match rows"));
        }
        let xt = interpolate_rows(&x0, &x1, &times)?;
        let v_target = x1.sub(&x0)?;
        Ok(PathSample {
            x0,
            x1,
            times,
            xt,
            v_target,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Flow-matching loss of `theta` on `batch` and its gradient with respect to
/// every tensor of `theta` (in [`Theta::tensors`] order).
///
/// Each label is replaced by the null condition with probability
/// `label_dropout`, drawn from `dropout_rng`.
pub fn fm_loss<S: Scalar>(
    theta: &Theta<S>,
    batch: &PathSample<S>,
    label_dropout: f64,
    dropout_rng: &mut Rng,
) -> Result<(S, Vec<Tensor<S>>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let labels: Vec<Label> = batch
        .labels
        .iter()
        .map(|&l| {
            if label_dropout > 0.0 && dropout_rng.bernoulli(label_dropout) {
                None
            } else {
                l
            }
        })
        .collect();
    let mut tape = Tape::new();
    let binding = bind(&mut tape, theta, None, Trainable::Base)?;
    let zero_w = vec![S::zero(); batch.len()];
    let pred = guided_on_tape(
        &mut tape,
        &binding,
        &batch.xt,
        Conditioning {
            times: &batch.times,
            labels: &labels,
            steps: None,
        },
        &zero_w,
    )?;
    let target = tape.constant(batch.v_target.clone());
    let loss = tape.mse(pred, target)?;
    let value = tape.value(loss)?.item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("flow-matching loss".into()));
    }
    let mut grads = tape.backward(loss)?;
    let tensors = theta.tensors();
    let out = (0..tensors.len())
        .map(|i| {
            grads
                .remove(&ParamId(i))
                .unwrap_or_else(|| Tensor::zeros(tensors[i].shape()))
        })
        .collect();
    Ok((value, out))
}

/// Integrates the field from `t = 1` to `t = 0` on `grid`, returning all
/// `n + 1` states (the first is `z`).
pub fn euler_sample<S: Scalar>(
    model: &dyn VelocityField<S>,
    grid: &TimeGrid<S>,
    z: &Tensor<S>,
    labels: &[Label],
    guidance: S,
) -> Result<Vec<Tensor<S>>> {
    z.ensure_finite("initial noise")?;
    let b = z.rows();
    let w = vec![guidance; b];
    let mut traj = Vec::with_capacity(grid.steps() + 1);
    traj.push(z.clone());
    for pair in grid.times().windows(2) {
        let x = traj.last().unwrap();
        let from = vec![pair[0]; b];
        let to = vec![pair[1]; b];
        let v = model.velocity(x, &from, labels, &w)?;
        let next = euler_step_rows(x, &v, &from, &to)?;
        next.ensure_finite("sampler state")?;
        traj.push(next);
    }
    Ok(traj)
}

/// Final state of [`euler_sample`].
pub fn sample_final<S: Scalar>(
    model: &dyn VelocityField<S>,
    grid: &TimeGrid<S>,
    z: &Tensor<S>,
    labels: &[Label],
    guidance: S,
) -> Result<Tensor<S>> {
    Ok(euler_sample(model, grid, z, labels, guidance)?.pop().unwrap())
}

/// Draws a `[rows, cols]` standard normal tensor.
pub fn gaussian<S: Scalar>(rows: usize, cols: usize, rng: &mut Rng) -> Tensor<S> {
    Tensor::from_parts(
        vec![rows, cols],
        (0..rows * cols).map(|_| lit::<S>(rng.normal())).collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub label_dropout: f64,
    pub seed: u64,
    pub optim: AdamWConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            iters: 20_000,
            batch_size: 256,
            label_dropout: 0.1,
            seed: 0,
            optim: AdamWConfig::default(),
        }
    }
}

/// Result of [`train_teacher`].
#[derive(Clone, Debug)]
pub struct TeacherRun<S> {
    pub theta: Theta<S>,
    pub optim: OptimState<S>,
    pub losses: Vec<S>,
}

/// Trains a flow-matching velocity network from scratch.
///
/// Each iteration draws a batch of data points (`data` stream), Gaussian
/// noise (`noise`), continuous times `t ~ U[0, 1]` (`times`) and label
/// dropout (`dropout`), all from substreams of `cfg.seed`. The callback sees
/// the iteration index (1-based) and loss after each update.
pub fn train_teacher<S: Scalar>(
    data: &Dataset<S>,
    net: NetConfig,
    cfg: &TeacherConfig,
    mut on_step: impl FnMut(usize, S),
) -> Result<TeacherRun<S>> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let streams = Streams::new(cfg.seed);
    let mut theta = Theta::init(net, &mut streams.stream(rng::INIT))?;
    let mut optim = OptimState::new(cfg.optim);
    let mut data_rng = streams.stream(rng::DATA);
    let mut noise_rng = streams.stream(rng::NOISE);
    let mut time_rng = streams.stream(rng::TIMES);
    let mut dropout_rng = streams.stream(rng::DROPOUT);
    let mut losses = Vec::with_capacity(cfg.iters);
    let conditional = net.is_conditional();
    for it in 0..cfg.iters {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| data_rng.below(data.len())).collect();
        let (x0, labels) = data.batch(&idx)?;
        let x1 = gaussian(cfg.batch_size, x0.cols(), &mut noise_rng);
        let times: Vec<S> = (0..cfg.batch_size).map(|_| lit(time_rng.uniform())).collect();
        let labels: Vec<Label> = labels
            .into_iter()
            .map(|l| conditional.then_some(l))
            .collect();
        let batch = PathSample::new(x0, x1, times, labels)?;
        let (loss, grads) = fm_loss(&theta, &batch, cfg.label_dropout, &mut dropout_rng).map_err(|e| {
            match e {
                Error::NonFinite(_) => Error::Divergence {
                    iteration: it as u64,
                    last_finite_loss: losses.last().and_then(|l: &S| l.to_f64()),
                },
                other => other,
            }
        })?;
        let grad_refs: Vec<&Tensor<S>> = grads.iter().collect();
        adamw_step(&mut theta.tensors_mut(), &grad_refs, &mut optim)?;
        losses.push(loss);
        on_step(it + 1, loss);
    }
    Ok(TeacherRun {
        theta,
        optim,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetKind, DatasetSpec};
    use proptest::prelude::*;
    use crate::rng::Rng;

    /// Field that ignores position and time.
    struct Constant([f64; 2]);

    impl VelocityField<f64> for Constant {
        fn velocity(&self, x: &Tensor<f64>, _: &[f64], _: &[Label], _: &[f64]) -> Result<Tensor<f64>> {
            Ok(Tensor::from_parts(
                x.shape().to_vec(),
                (0..x.rows()).flat_map(|_| self.0).collect(),
            ))
        }
    }

    #[test]
    fn uniform_grids() {
        assert_eq!(make_grid::<f64>(4).unwrap().times(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        assert_eq!(make_grid::<f64>(1).unwrap().times(), &[1.0, 0.0]);
        assert_eq!(make_grid::<f64>(2).unwrap().times(), &[1.0, 0.5, 0.0]);
        assert!(make_grid::<f64>(0).is_err());
    }

    #[test]
    fn shift_examples() {
        let g = make_grid::<f64>(8).unwrap();
        assert_eq!(shift_grid(&g, 1.0).unwrap().times(), g.times());
        let s3 = shift_grid(&g, 3.0).unwrap();
        assert_eq!(s3.times()[0], 1.0);
        assert_eq!(s3.times()[8], 0.0);
        assert_eq!(s3.times()[4], 0.75);
        assert_eq!(shift_time(0.5f64, 3.0), 0.75);
        assert_eq!(shift_time(0.0f64, 4.2), 0.0);
        assert_eq!(shift_time(1.0f64, 3.0), 1.0);
        assert!(shift_grid(&g, 0.9).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let x0 = Tensor::from_rows(&[[0.0, 0.0]]).unwrap();
        let x1 = Tensor::from_rows(&[[2.0, 4.0]]).unwrap();
        assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1);
        assert_eq!(interpolate(&x0, &x1, 0.25).unwrap().data(), &[0.5, 1.0]);
        let bad = Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        assert!(interpolate(&x0, &bad, 0.5).is_err());
    }

    #[test]
    fn path_sample_target_is_displacement() {
        let x0 = Tensor::from_rows(&[[1.0, -1.0], [0.5, 2.0]]).unwrap();
        let x1 = Tensor::from_rows(&[[0.0, 3.0], [-1.0, 1.0]]).unwrap();
        let p = PathSample::new(x0.clone(), x1.clone(), vec![0.3, 0.9], vec![None, None]).unwrap();
        assert_eq!(p.v_target, x1.sub(&x0).unwrap());
        assert_eq!(p.xt, interpolate_rows(&x0, &x1, &[0.3, 0.9]).unwrap());
    }

    #[test]
    fn constant_field_single_step() {
        let z = Tensor::from_rows(&[[0.3, -0.2], [1.0, 1.0]]).unwrap();
        let grid = make_grid(1).unwrap();
        let out = sample_final(&Constant([0.5, -1.5]), &grid, &z, &[None, None], 0.0).unwrap();
        assert_eq!(out.data(), &[0.3 - 0.5, -0.2 + 1.5, 1.0 - 0.5, 1.0 + 1.5]);
        let zero = sample_final(&Constant([0.0, 0.0]), &make_grid(7).unwrap(), &z, &[None, None], 0.0).unwrap();
        assert_eq!(zero, z);
    }

    proptest! {
        #[test]
        fn constant_field_telescopes_on_any_grid(
            cuts in proptest::collection::btree_set(1u32..100_000, 0..40),
            v in proptest::array::uniform2(-3.0f64..3.0),
            z in proptest::array::uniform2(-3.0f64..3.0),
        ) {
            let mut times = vec![1.0];
            times.extend(cuts.iter().rev().map(|&c| f64::from(c) / 100_000.0));
            times.push(0.0);
            let grid = TimeGrid::from_times(times).unwrap();
            let zt = Tensor::from_rows(&[z]).unwrap();
            let out = sample_final(&Constant(v), &grid, &zt, &[None], 0.0).unwrap();
            prop_assert!((out.data()[0] - (z[0] - v[0])).abs() <= 1e-12);
            prop_assert!((out.data()[1] - (z[1] - v[1])).abs() <= 1e-12);
            let total: f64 = grid.intervals().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn shift_keeps_grids_monotone(n in 1usize..200, s in 1.0f64..20.0) {
            let g = make_grid::<f64>(n).unwrap().shifted(s).unwrap();
            prop_assert_eq!(g.times()[0], 1.0);
            prop_assert_eq!(g.times()[n], 0.0);
            prop_assert!(g.times().windows(2).all(|w| w[0] > w[1]));
        }

        #[test]
        fn shift_moves_times_toward_noise(t in 0.0001f64..0.9999, s in 1.0001f64..10.0) {
            prop_assert!(shift_time(t, s) >= t);
            prop_assert_eq!(shift_time(t, 1.0), t);
        }
    }

    fn tiny_net() -> NetConfig {
        NetConfig {
            hidden_dim: 6,
            num_hidden_layers: 2,
            time_embed_dim: 4,
            class_count: 3,
            class_embed_dim: 2,
            ..NetConfig::default()
        }
    }

    #[test]
    fn fm_loss_hand_values() {
        // A network whose output layer is zero predicts its bias everywhere.
        let mut theta = Theta::<f64>::init(tiny_net(), &mut Rng::seed_from_u64(0)).unwrap();
        let last = theta.tensors().len() - 3;
        for v in theta.tensors_mut()[last].data_mut() {
            *v = 0.0;
        }
        let x0 = Tensor::from_rows(&[[0.0, 0.0], [0.0, 0.0]]).unwrap();
        let x1 = Tensor::from_rows(&[[0.0, 0.0], [0.0, 0.0]]).unwrap();
        let batch = PathSample::new(x0, x1, vec![0.2, 0.7], vec![Some(0), Some(1)]).unwrap();
        let (loss, _) = fm_loss(&theta, &batch, 0.0, &mut Rng::seed_from_u64(1)).unwrap();
        assert_eq!(loss, 0.0);

        theta.tensors_mut()[last + 1].data_mut().copy_from_slice(&[1.0, 0.0]);
        let (loss, _) = fm_loss(&theta, &batch, 0.0, &mut Rng::seed_from_u64(1)).unwrap();
        assert_eq!(loss, 0.5);

        let x0 = Tensor::from_rows(&[[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]]).unwrap();
        let doubled = PathSample::new(x0.clone(), x0, vec![0.2, 0.7, 0.2, 0.7], vec![Some(0), Some(1), Some(0), Some(1)]).unwrap();
        let (loss2, _) = fm_loss(&theta, &doubled, 0.0, &mut Rng::seed_from_u64(1)).unwrap();
        assert_eq!(loss2, loss);
    }

    #[test]
    fn fm_loss_gradient_matches_finite_differences() {
        let mut rng = Rng::seed_from_u64(3);
        let theta = Theta::<f64>::init(tiny_net(), &mut rng).unwrap();
        let x0 = gaussian::<f64>(5, 2, &mut rng);
        let x1 = gaussian::<f64>(5, 2, &mut rng);
        let times = (0..5).map(|_| rng.uniform()).collect();
        let labels = vec![Some(0), Some(2), None, Some(1), Some(1)];
        let batch = PathSample::new(x0, x1, times, labels).unwrap();
        let (_, grads) = fm_loss(&theta, &batch, 0.0, &mut rng).unwrap();
        let eps = 1e-5;
        for (pi, g) in grads.iter().enumerate() {
            for k in (0..g.len()).step_by(7) {
                let mut plus = theta.clone();
                plus.tensors_mut()[pi].data_mut()[k] += eps;
                let mut minus = theta.clone();
                minus.tensors_mut()[pi].data_mut()[k] -= eps;
                let lp = fm_loss(&plus, &batch, 0.0, &mut rng).unwrap().0;
                let lm = fm_loss(&minus, &batch, 0.0, &mut rng).unwrap().0;
                let numeric = (lp - lm) / (2.0 * eps);
                let a = g.data()[k];
                assert!((a - numeric).abs() / (a.abs() + 1e-12) <= 1e-4 || (a - numeric).abs() < 1e-10,
                    "param {pi}[{k}]: {a} vs {numeric}");
            }
        }
    }

    #[test]
    fn teacher_training_is_deterministic_and_moves() {
        let spec = DatasetSpec { kind: DatasetKind::Gaussians8, size: 500, seed: 0, noise: 0.3 };
        let data = Dataset::<f64>::generate(&spec, &mut Rng::seed_from_u64(0)).unwrap();
        let cfg = TeacherConfig { iters: 3, batch_size: 16, seed: 5, ..TeacherConfig::default() };
        let a = train_teacher(&data, NetConfig { class_count: 8, ..tiny_net() }, &cfg, |_, _| {}).unwrap();
        let b = train_teacher(&data, NetConfig { class_count: 8, ..tiny_net() }, &cfg, |_, _| {}).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.losses, b.losses);
        let init = Theta::<f64>::init(NetConfig { class_count: 8, ..tiny_net() }, &mut Streams::new(5).stream(rng::INIT)).unwrap();
        let one = train_teacher(&data, NetConfig { class_count: 8, ..tiny_net() }, &TeacherConfig { iters: 1, ..cfg }, |_, _| {}).unwrap();
        assert_ne!(one.theta, init);
        assert_eq!(one.optim.step(), 1);
    }
}
