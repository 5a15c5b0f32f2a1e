//! Step-size-conditioned shortcut model trained from scratch.
//!
//! Steps follow the sampler convention: from `t` a `d`-step lands at `t − d`,
//! so a `2d` shortcut from `t` needs `t − 2d ≥ 0`.

use crate::data::Dataset;
use crate::distill::ema_in_place;
use crate::error::{Error, Result};
use crate::flow::{euler_step_rows, gaussian, interpolate_rows, make_grid, sample_final, PathSample};
use crate::net::{bind, forward_on_tape, forward_velocity, Conditioning, GuidedNet, Label, NetConfig, Theta, Trainable};
use crate::optim::{adamw_step, AdamWConfig, OptimState};
use crate::rng::{self, Rng, Streams};
use crate::scalar::{count, lit, Scalar};
use crate::tape::{NodeId, ParamId, Tape};
use crate::tensor::Tensor;

/// Uniform draw from `{1/n, 2/n, 4/n, …, 1/2}`.
pub fn sample_d<S: Scalar>(n: usize, rng: &mut Rng) -> Result<S> {
    if n < 2 || !n.is_power_of_two() {
        return Err(Error::invalid(format!("{n} must be a power of two ≥ 2")));
    }
    let levels = n.trailing_zeros() as usize;
    let k = rng.below(levels);
    Ok(count::<S>(1 << k) / count::<S>(n))
}

fn check_step<S: Scalar>(times: &[S], d: S) -> Result<()> {
    if !(d > S::zero() && d <= lit(0.5)) {
        return Err(Error::invalid(format!("step size {d} outside (0, 1/2]")));
    }
    if let Some(t) = times.iter().find(|&&t| t - d - d < S::zero() || t > S::one()) {
        return Err(Error::invalid(format!("time {t} leaves no room for two {d}-steps")));
    }
    Ok(())
}

fn step_velocity<S: Scalar>(theta: &Theta<S>, x: &Tensor<S>, times: &[S], labels: &[Label], d: S) -> Result<Tensor<S>> {
    let steps = vec![d; x.rows()];
    forward_velocity(
        theta,
        None,
        x,
        Conditioning {
            times,
            labels,
            steps: Some(&steps),
        },
    )
}

/// `½·V⁻(x_t, t, d) + ½·V⁻(x_{t−d}, t − d, d)` with `x_{t−d}` one `d`-step
/// of the stop-gradient model away from `x_t`.
pub fn sc_target<S: Scalar>(theta_minus: &Theta<S>, x_t: &Tensor<S>, times: &[S], labels: &[Label], d: S) -> Result<Tensor<S>> {
    check_step(times, d)?;
    let v1 = step_velocity(theta_minus, x_t, times, labels, d)?;
    let mid: Vec<S> = times.iter().map(|&t| t - d).collect();
    let x_mid = euler_step_rows(x_t, &v1, times, &mid)?;
    let v2 = step_velocity(theta_minus, &x_mid, &mid, labels, d)?;
    let half = lit::<S>(0.5);
    let out = v1.zip_map(&v2, "sc target", |a, b| half * a + half * b)?;
    out.ensure_finite("shortcut target")?;
    Ok(out)
}

/// Points for the self-consistency term.
#[derive(Clone, Debug, PartialEq)]
pub struct ScBatch<S> {
    pub xt: Tensor<S>,
    pub times: Vec<S>,
    pub labels: Vec<Label>,
}

fn record_sc<S: Scalar>(
    tape: &mut Tape<S>,
    theta: &Theta<S>,
    theta_minus: &Theta<S>,
    batch: &ScBatch<S>,
    d: S,
    trainable: Trainable,
) -> Result<NodeId> {
    let target = sc_target(theta_minus, &batch.xt, &batch.times, &batch.labels, d)?;
    let binding = bind(tape, theta, None, trainable)?;
    let steps = vec![d + d; batch.xt.rows()];
    let pred = forward_on_tape(
        tape,
        &binding,
        &batch.xt,
        Conditioning {
            times: &batch.times,
            labels: &batch.labels,
            steps: Some(&steps),
        },
    )?;
    let target = tape.constant(target);
    tape.mse(pred, target)
}

/// Mean over elements of `(V_θ(x_t, t, 2d) − target)²`.
pub fn sc_loss<S: Scalar>(theta: &Theta<S>, theta_minus: &Theta<S>, batch: &ScBatch<S>, d: S) -> Result<S> {
    let mut tape = Tape::new();
    let loss = record_sc(&mut tape, theta, theta_minus, batch, d, Trainable::Nothing)?;
    tape.value(loss)?.item()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShortcutConfig {
    pub batch_size: usize,
    /// Rows of each batch reused for the self-consistency term.
    pub consistency_batch: usize,
    /// Finest step is `1/grid_steps`.
    pub grid_steps: usize,
    pub mu: f64,
    pub label_dropout: f64,
    /// Disabling leaves plain flow matching at `d = 0`.
    pub consistency: bool,
    pub optim: AdamWConfig,
    pub seed: u64,
}

impl Default for ShortcutConfig {
    fn default() -> Self {
        ShortcutConfig {
            batch_size: 256,
            consistency_batch: 64,
            grid_steps: 128,
            mu: 0.999,
            label_dropout: 0.1,
            consistency: true,
            optim: AdamWConfig::default(),
            seed: 0,
        }
    }
}

/// Losses of one joint update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShortcutLosses<S> {
    pub flow: S,
    pub consistency: S,
}

#[derive(Clone, Debug)]
pub struct ShortcutTrainer<S> {
    theta: Theta<S>,
    ema: Theta<S>,
    optim: OptimState<S>,
    cfg: ShortcutConfig,
    data_rng: Rng,
    noise_rng: Rng,
    time_rng: Rng,
    dropout_rng: Rng,
    iteration: u64,
    last_loss: Option<S>,
}

impl<S: Scalar> ShortcutTrainer<S> {
    pub fn new(net: NetConfig, cfg: ShortcutConfig) -> Result<Self> {
        if !net.has_step_head() {
            return Err(Error::invalid("shortcut training needs a step-conditioned network"));
        }
        if cfg.batch_size == 0 || cfg.consistency_batch > cfg.batch_size {
            return Err(Error::invalid("consistency batch must fit inside a non-empty batch"));
        }
        make_grid::<S>(cfg.grid_steps)?;
        if cfg.grid_steps < 2 || !cfg.grid_steps.is_power_of_two() {
            return Err(Error::invalid("grid size must be a power of two ≥ 2"));
        }
        let streams = Streams::new(cfg.seed);
        let theta = Theta::init(net, &mut streams.stream(rng::INIT))?;
        Ok(ShortcutTrainer {
            ema: theta.clone(),
            theta,
            optim: OptimState::new(cfg.optim),
            cfg,
            data_rng: streams.stream(rng::DATA),
            noise_rng: streams.stream(rng::NOISE),
            time_rng: streams.stream(rng::TIMES),
            dropout_rng: streams.stream(rng::DROPOUT),
            iteration: 0,
            last_loss: None,
        })
    }

    pub fn theta(&self) -> &Theta<S> {
        &self.theta
    }

    pub fn ema(&self) -> &Theta<S> {
        &self.ema
    }

    pub fn optim(&self) -> &OptimState<S> {
        &self.optim
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Flow matching at `d = 0` on the whole batch plus self-consistency at
    /// a sampled `d` on its first rows, equally weighted.
    pub fn step(&mut self, data: &Dataset<S>) -> Result<ShortcutLosses<S>> {
        let b = self.cfg.batch_size;
        let conditional = self.theta.config().is_conditional();
        let idx: Vec<usize> = (0..b).map(|_| self.data_rng.below(data.len())).collect();
        let (x0, raw) = data.batch(&idx)?;
        let x1 = gaussian(b, x0.cols(), &mut self.noise_rng);
        let times: Vec<S> = (0..b).map(|_| lit(self.time_rng.uniform())).collect();
        let labels: Vec<Label> = raw
            .into_iter()
            .map(|l| {
                let drop = self.cfg.label_dropout > 0.0 && self.dropout_rng.bernoulli(self.cfg.label_dropout);
                (conditional && !drop).then_some(l)
            })
            .collect();
        let fm = PathSample::new(x0.clone(), x1.clone(), times, labels.clone())?;

        let mut tape = Tape::new();
        let binding = bind(&mut tape, &self.theta, None, Trainable::Base)?;
        let zeros = vec![S::zero(); b];
        let pred = forward_on_tape(
            &mut tape,
            &binding,
            &fm.xt,
            Conditioning {
                times: &fm.times,
                labels: &fm.labels,
                steps: Some(&zeros),
            },
        )?;
        let target = tape.constant(fm.v_target.clone());
        let fm_node = tape.mse(pred, target)?;
        let mut loss = fm_node;
        let mut sc_value = S::zero();
        if self.cfg.consistency && self.cfg.consistency_batch > 0 {
            let m = self.cfg.consistency_batch;
            let d: S = sample_d(self.cfg.grid_steps, &mut self.time_rng)?;
            let slots = (S::one() / d).round().to_usize().unwrap_or(2);
            let t: Vec<S> = (0..m)
                .map(|_| count::<S>(2 + self.time_rng.below(slots - 1)) * d)
                .map(|t| t.min(S::one()))
                .collect();
            let xt = interpolate_rows(&x0.slice_rows(0, m)?, &x1.slice_rows(0, m)?, &t)?;
            let sc = ScBatch {
                xt,
                times: t,
                labels: labels[..m].to_vec(),
            };
            let target = sc_target(&self.ema, &sc.xt, &sc.times, &sc.labels, d).map_err(|e| self.diverged(e))?;
            let steps = vec![d + d; m];
            let pred = forward_on_tape(
                &mut tape,
                &binding,
                &sc.xt,
                Conditioning {
                    times: &sc.times,
                    labels: &sc.labels,
                    steps: Some(&steps),
                },
            )?;
            let target = tape.constant(target);
            let sc_node = tape.mse(pred, target)?;
            sc_value = tape.value(sc_node)?.item()?;
            loss = tape.add(fm_node, sc_node)?;
        }
        let fm_value = tape.value(fm_node)?.item()?;
        let total = tape.value(loss)?.item()?;
        if !total.is_finite() {
            return Err(self.diverged(Error::NonFinite("shortcut loss".into())));
        }
        let mut grads = tape.backward(loss)?;
        let shapes: Vec<Vec<usize>> = self.theta.tensors().iter().map(|t| t.shape().to_vec()).collect();
        let grads: Vec<Tensor<S>> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| grads.remove(&ParamId(i)).unwrap_or_else(|| Tensor::zeros(s)))
            .collect();
        let refs: Vec<&Tensor<S>> = grads.iter().collect();
        adamw_step(&mut self.theta.tensors_mut(), &refs, &mut self.optim)?;
        ema_in_place(&mut self.ema.tensors_mut(), &self.theta.tensors(), self.cfg.mu)?;
        self.iteration += 1;
        self.last_loss = Some(total);
        Ok(ShortcutLosses {
            flow: fm_value,
            consistency: sc_value,
        })
    }

    fn diverged(&self, e: Error) -> Error {
        match e {
            Error::NonFinite(_) => Error::Divergence {
                iteration: self.iteration,
                last_finite_loss: self.last_loss.and_then(|l| l.to_f64()),
            },
            other => other,
        }
    }
}

/// `steps` uniform shortcut steps of size `1/steps` from `t = 1`.
pub fn shortcut_sample<S: Scalar>(theta: &Theta<S>, z: &Tensor<S>, labels: &[Label], steps: usize, guidance: S) -> Result<Tensor<S>> {
    let grid = make_grid(steps)?;
    let d = S::one() / count::<S>(steps);
    sample_final(&GuidedNet::with_step(theta, d), &grid, z, labels, guidance)
}
