//! Randomised gradient probes of the velocity network.
//!
//! Each probe draws a small network, an adapter with non-zero factors and a
//! guided regression batch, then compares tape gradients of every base and
//! adapter coordinate and of the raw MLP input against central differences.

use crate::error::{Error, Result};
use crate::net::{bind, guided_on_tape, Conditioning, Label, LoraDelta, NetConfig, Theta, Trainable};
use crate::rng::Rng;
use crate::scalar::{lit, Scalar};
use crate::tape::{finite_diff_check, relative_error, NodeId, ParamId, Tape};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Probe<S> {
    pub theta: Theta<S>,
    pub delta: LoraDelta<S>,
    pub x: Tensor<S>,
    pub target: Tensor<S>,
    pub times: Vec<S>,
    pub labels: Vec<Label>,
    pub steps: Option<Vec<S>>,
    pub guidance: Vec<S>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    pub base: f64,
    pub adapter: f64,
    pub input: f64,
    pub coordinates: usize,
}

impl ProbeResult {
    pub fn worst(&self) -> f64 {
        self.base.max(self.adapter).max(self.input)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<ProbeResult>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.probes.iter().map(ProbeResult::worst).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= self.tolerance
    }
}

fn gaussian<S: Scalar>(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor<S> {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| lit::<S>(scale * rng.normal())).collect())
}

impl<S: Scalar> Probe<S> {
    pub fn random(rng: &mut Rng) -> Result<Self> {
        let class_count = [0, 1, 3][rng.below(3)];
        let config = NetConfig {
            input_dim: 2,
            hidden_dim: 3 + rng.below(6),
            num_hidden_layers: 1 + rng.below(2),
            time_embed_dim: 2 * (1 + rng.below(2)),
            class_count,
            class_embed_dim: 2 + rng.below(2),
            step_embed_dim: 2 * rng.below(2),
        };
        let mut theta = Theta::init(config, rng)?;
        for t in theta.tensors_mut() {
            // non-zero biases so every coordinate is exercised
            if t.rank() == 1 {
                *t = gaussian(t.shape(), 0.3, rng);
            }
        }
        let rank = 1 + rng.below(3);
        let mut delta = LoraDelta::init(&theta, rank, 1.0 + rng.uniform(), rng)?;
        for t in delta.tensors_mut() {
            *t = gaussian(t.shape(), 0.5, rng);
        }
        let b = 2 + rng.below(3);
        let x = gaussian(&[b, 2], 1.0, rng);
        let target = gaussian(&[b, 2], 1.0, rng);
        let times = (0..b).map(|_| lit(rng.uniform())).collect();
        let labels = (0..b)
            .map(|_| match class_count {
                0 => None,
                c => rng.bernoulli(0.8).then(|| rng.below(c)),
            })
            .collect();
        let steps = config
            .has_step_head()
            .then(|| (0..b).map(|_| lit(rng.uniform_range(0.01, 0.5))).collect());
        let guidance = (0..b)
            .map(|_| if class_count > 0 { lit(3.0 * rng.uniform()) } else { S::zero() })
            .collect();
        Ok(Probe {
            theta,
            delta,
            x,
            target,
            times,
            labels,
            steps,
            guidance,
        })
    }

    fn loss_on(&self, tape: &mut Tape<S>, theta: &Theta<S>, delta: &LoraDelta<S>, trainable: Trainable) -> Result<NodeId> {
        let binding = bind(tape, theta, Some(delta), trainable)?;
        let cond = Conditioning {
            times: &self.times,
            labels: &self.labels,
            steps: self.steps.as_deref(),
        };
        let out = guided_on_tape(tape, &binding, &self.x, cond, &self.guidance)?;
        let target = tape.constant(self.target.clone());
        tape.mse(out, target)
    }

    fn loss(&self, theta: &Theta<S>, delta: &LoraDelta<S>) -> Result<S> {
        let mut tape = Tape::new();
        let node = self.loss_on(&mut tape, theta, delta, Trainable::Nothing)?;
        let v = tape.value(node)?.item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("gradient probe".into()));
        }
        Ok(v)
    }

    fn analytic(&self, trainable: Trainable) -> Result<Vec<Tensor<S>>> {
        let mut tape = Tape::new();
        let node = self.loss_on(&mut tape, &self.theta, &self.delta, trainable)?;
        let mut grads = tape.backward(node)?;
        let shapes: Vec<Vec<usize>> = match trainable {
            Trainable::Adapter => self.delta.tensors().iter().map(|t| t.shape().to_vec()).collect(),
            _ => self.theta.tensors().iter().map(|t| t.shape().to_vec()).collect(),
        };
        Ok(shapes
            .iter()
            .enumerate()
            .map(|(i, s)| grads.remove(&ParamId(i)).unwrap_or_else(|| Tensor::zeros(s)))
            .collect())
    }

    fn worst_over(
        &self,
        analytic: &[Tensor<S>],
        eps: S,
        perturb: impl Fn(usize, usize, S) -> Result<S>,
    ) -> Result<(S, usize)> {
        let two = lit::<S>(2.0);
        let mut worst = S::zero();
        let mut n = 0;
        for (ti, g) in analytic.iter().enumerate() {
            for (j, &a) in g.data().iter().enumerate() {
                let numeric = (perturb(ti, j, eps)? - perturb(ti, j, -eps)?) / (two * eps);
                worst = worst.max(relative_error(a, numeric));
                n += 1;
            }
        }
        Ok((worst, n))
    }

    /// Worst coordinate error over base parameters, adapter factors and the
    /// input of the plain MLP stack.
    pub fn check(&self, eps: S) -> Result<ProbeResult> {
        let base_grads = self.analytic(Trainable::Base)?;
        let (base, nb) = self.worst_over(&base_grads, eps, |ti, j, h| {
            let mut theta = self.theta.clone();
            let t = &mut theta.tensors_mut()[ti];
            t.data_mut()[j] = t.data()[j] + h;
            self.loss(&theta, &self.delta)
        })?;
        let adapter_grads = self.analytic(Trainable::Adapter)?;
        let (adapter, na) = self.worst_over(&adapter_grads, eps, |ti, j, h| {
            let mut delta = self.delta.clone();
            let t = &mut delta.tensors_mut()[ti];
            t.data_mut()[j] = t.data()[j] + h;
            self.loss(&self.theta, &delta)
        })?;

        // raw MLP on an input wide enough for the first layer
        let width = self.theta.layers()[0].weight.shape()[1];
        let mut rng = Rng::seed_from_u64(width as u64);
        let input = gaussian::<S>(&[self.x.rows(), width], 1.0, &mut rng);
        let target = self.target.clone();
        let mlp = |tape: &mut Tape<S>, mut h: NodeId| -> Result<NodeId> {
            let layers = self.theta.layers();
            for (i, l) in layers.iter().enumerate() {
                let w = tape.constant(l.weight.clone());
                let b = tape.constant(l.bias.clone());
                h = tape.affine(h, w, b)?;
                if i + 1 < layers.len() {
                    h = tape.tanh(h)?;
                }
            }
            let t = tape.constant(target.clone());
            tape.mse(h, t)
        };
        let input_err = finite_diff_check(mlp, &input, eps)?;
        Ok(ProbeResult {
            base: base.to_f64().unwrap_or(f64::INFINITY),
            adapter: adapter.to_f64().unwrap_or(f64::INFINITY),
            input: input_err.to_f64().unwrap_or(f64::INFINITY),
            coordinates: nb + na + input.len(),
        })
    }
}

/// Runs `probes` independent probes drawn from `seed`.
pub fn grad_check(probes: usize, seed: u64, eps: f64, tolerance: f64) -> Result<GradCheckReport> {
    if probes == 0 {
        return Err(Error::InvalidArgument("at least one probe is required".into()));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let results = (0..probes)
        .map(|_| Probe::<f64>::random(&mut rng)?.check(eps))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport {
        probes: results,
        tolerance,
    })
}
