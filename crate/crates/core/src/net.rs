//! MLP velocity predictor with time, class and optional step-size inputs,
//! low-rank adapters, and classifier-free guidance.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{count, lit, Scalar};
use crate::tape::{low_rank_product, NodeId, ParamId, Tape};
use crate::tensor::Tensor;

/// Condition label; `None` is the null condition used for guidance.
pub type Label = Option<usize>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_hidden_layers: usize,
    pub time_embed_dim: usize,
    /// Number of condition labels; 0 builds an unconditional network.
    pub class_count: usize,
    pub class_embed_dim: usize,
    /// 0 disables step-size conditioning.
    pub step_embed_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_dim: 2,
            hidden_dim: 128,
            num_hidden_layers: 3,
            time_embed_dim: 32,
            class_count: 0,
            class_embed_dim: 16,
            step_embed_dim: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_hidden_layers == 0 {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::invalid("time_embed_dim must be positive and even"));
        }
        if self.step_embed_dim % 2 != 0 {
            return Err(Error::invalid("step_embed_dim must be even"));
        }
        if self.class_count > 0 && self.class_embed_dim == 0 {
            return Err(Error::invalid("class_embed_dim must be positive for a conditional net"));
        }
        Ok(())
    }

    pub fn is_conditional(&self) -> bool {
        self.class_count > 0
    }

    pub fn has_step_head(&self) -> bool {
        self.step_embed_dim > 0
    }

    /// Width of the concatenated input features.
    pub fn feature_dim(&self) -> usize {
        let class = if self.is_conditional() { self.class_embed_dim } else { 0 };
        self.input_dim + self.time_embed_dim + class + self.step_embed_dim
    }

    /// `(out, in)` of every dense layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.hidden_dim, self.feature_dim())];
        for _ in 1..self.num_hidden_layers {
            shapes.push((self.hidden_dim, self.hidden_dim));
        }
        shapes.push((self.input_dim, self.hidden_dim));
        shapes
    }
}

/// Interleaved `[sin(f₀t), cos(f₀t), sin(f₁t), …]` with frequencies spaced
/// geometrically from 1 to 1000.
pub fn time_embed<S: Scalar>(t: S, dim: usize) -> Result<Vec<S>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!("embedding dimension {dim} must be positive and even")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq: S = if half == 1 {
            S::one()
        } else {
            lit::<S>(1000.0).powf(count::<S>(k) / count::<S>(half - 1))
        };
        let (s, c) = (freq * t).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

/// Base network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Theta<S> {
    config: NetConfig,
    layers: Vec<Dense<S>>,
    class_table: Option<Tensor<S>>,
}

impl<S: Scalar> Theta<S> {
    /// LeCun-normal weights, zero biases, unit-normal class embeddings.
    pub fn init(config: NetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(out, inp)| {
                let std = (1.0 / inp as f64).sqrt();
                let w = (0..out * inp).map(|_| lit::<S>(std * rng.normal())).collect();
                Dense {
                    weight: Tensor::from_parts(vec![out, inp], w),
                    bias: Tensor::zeros(&[out]),
                }
            })
            .collect();
        let class_table = config.is_conditional().then(|| {
            let n = (config.class_count + 1) * config.class_embed_dim;
            Tensor::from_parts(
                vec![config.class_count + 1, config.class_embed_dim],
                (0..n).map(|_| lit::<S>(rng.normal())).collect(),
            )
        });
        Ok(Theta {
            config,
            layers,
            class_table,
        })
    }

    /// Assembles parameters, naming the first layer whose shape disagrees
    /// with `config`.
    pub fn from_parts(
        config: NetConfig,
        layers: Vec<Dense<S>>,
        class_table: Option<Tensor<S>>,
    ) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if layers.len() != shapes.len() {
            return Err(Error::shape(
                "theta",
                format!("expected {} layers, got {}", shapes.len(), layers.len()),
            ));
        }
        for (i, (layer, (out, inp))) in layers.iter().zip(&shapes).enumerate() {
            if layer.weight.shape() != [*out, *inp] {
                return Err(Error::shape(
                    "theta",
                    format!("layer{i}.weight is {:?}, expected [{out}, {inp}]", layer.weight.shape()),
                ));
            }
            if layer.bias.shape() != [*out] {
                return Err(Error::shape(
                    "theta",
                    format!("layer{i}.bias is {:?}, expected [{out}]", layer.bias.shape()),
                ));
            }
        }
        let expected_table = config
            .is_conditional()
            .then(|| vec![config.class_count + 1, config.class_embed_dim]);
        if class_table.as_ref().map(|t| t.shape().to_vec()) != expected_table {
            return Err(Error::shape(
                "theta",
                format!(
                    "class_table is {:?}, expected {:?}",
                    class_table.as_ref().map(|t| t.shape().to_vec()),
                    expected_table
                ),
            ));
        }
        Ok(Theta {
            config,
            layers,
            class_table,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense<S>] {
        &self.layers
    }

    pub fn class_table(&self) -> Option<&Tensor<S>> {
        self.class_table.as_ref()
    }

    pub fn class_table_mut(&mut self) -> Option<&mut Tensor<S>> {
        self.class_table.as_mut()
    }

    /// Parameters in optimizer order: weight and bias per layer, then the
    /// class table.
    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut v: Vec<&Tensor<S>> = self
            .layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect();
        v.extend(self.class_table.iter());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v: Vec<&mut Tensor<S>> = self
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        v.extend(self.class_table.iter_mut());
        v
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.layers.len())
            .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect();
        if self.class_table.is_some() {
            names.push("class_table".into());
        }
        names
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer<S> {
    /// `[rank, in]`
    pub a: Tensor<S>,
    /// `[out, rank]`
    pub b: Tensor<S>,
}

/// Low-rank adapter for every dense layer; the effective weight is
/// `W + (alpha / rank) · B · A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraDelta<S> {
    rank: usize,
    alpha: f64,
    layers: Vec<LoraLayer<S>>,
}

impl<S: Scalar> LoraDelta<S> {
    /// `A` is Gaussian with variance `1/in`; `B` starts at zero so the
    /// effective delta is exactly zero.
    pub fn init(theta: &Theta<S>, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("LoRA rank must be positive"));
        }
        let layers = theta
            .layers()
            .iter()
            .map(|l| {
                let (out, inp) = (l.weight.shape()[0], l.weight.shape()[1]);
                let std = (1.0 / inp as f64).sqrt();
                LoraLayer {
                    a: Tensor::from_parts(
                        vec![rank, inp],
                        (0..rank * inp).map(|_| lit::<S>(std * rng.normal())).collect(),
                    ),
                    b: Tensor::zeros(&[out, rank]),
                }
            })
            .collect();
        Ok(LoraDelta { rank, alpha, layers })
    }

    pub fn from_parts(rank: usize, alpha: f64, layers: Vec<LoraLayer<S>>) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("LoRA rank must be positive"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.a.rank() != 2 || l.b.rank() != 2 || l.a.shape()[0] != rank || l.b.shape()[1] != rank {
                return Err(Error::shape(
                    "lora",
                    format!("layer{i}: A {:?}, B {:?} for rank {rank}", l.a.shape(), l.b.shape()),
                ));
            }
        }
        Ok(LoraDelta { rank, alpha, layers })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> S {
        lit::<S>(self.alpha / self.rank as f64)
    }

    pub fn layers(&self) -> &[LoraLayer<S>] {
        &self.layers
    }

    /// Adapter factors in optimizer order: `A`, `B` per layer.
    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        self.layers.iter().flat_map(|l| [&l.a, &l.b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.a, &mut l.b]).collect()
    }

    /// Dense `(alpha / rank) · B · A` per layer.
    pub fn effective(&self) -> Result<EffectiveDelta<S>> {
        let scale = self.scale();
        Ok(EffectiveDelta {
            layers: self
                .layers
                .iter()
                .map(|l| low_rank_product(&l.a, &l.b, scale))
                .collect::<Result<_>>()?,
        })
    }
}

/// Per-layer dense weight deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveDelta<S> {
    pub layers: Vec<Tensor<S>>,
}

impl<S: Scalar> EffectiveDelta<S> {
    pub fn zeros_like(theta: &Theta<S>) -> Self {
        EffectiveDelta {
            layers: theta
                .layers()
                .iter()
                .map(|l| Tensor::zeros(l.weight.shape()))
                .collect(),
        }
    }
}

/// Folds the adapter into the dense weights; biases and the class table are
/// untouched.
pub fn merge_params<S: Scalar>(theta: &Theta<S>, delta: &LoraDelta<S>) -> Result<Theta<S>> {
    merge_effective(theta, &delta.effective()?)
}

pub fn merge_effective<S: Scalar>(theta: &Theta<S>, delta: &EffectiveDelta<S>) -> Result<Theta<S>> {
    if delta.layers.len() != theta.layers.len() {
        return Err(Error::shape(
            "merge",
            format!("{} deltas for {} layers", delta.layers.len(), theta.layers.len()),
        ));
    }
    let mut merged = theta.clone();
    for (i, (layer, d)) in merged.layers.iter_mut().zip(&delta.layers).enumerate() {
        if layer.weight.shape() != d.shape() {
            return Err(Error::shape(
                "merge",
                format!("layer{i}: weight {:?}, delta {:?}", layer.weight.shape(), d.shape()),
            ));
        }
        layer.weight.axpy(S::one(), d)?;
    }
    Ok(merged)
}

/// Which parameters of a forward pass are tracked on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    /// Every tensor of `Theta`, keyed by its index in [`Theta::tensors`].
    Base,
    /// Adapter factors, keyed by their index in [`LoraDelta::tensors`].
    Adapter,
}

/// Tape nodes holding the (effective) weights of one network instance.
#[derive(Clone, Debug)]
pub struct Binding {
    layers: Vec<(NodeId, NodeId)>,
    class_table: Option<NodeId>,
    config: NetConfig,
}

impl Binding {
    pub fn config(&self) -> &NetConfig {
        &self.config
    }
}

pub fn bind<S: Scalar>(
    tape: &mut Tape<S>,
    theta: &Theta<S>,
    adapter: Option<&LoraDelta<S>>,
    trainable: Trainable,
) -> Result<Binding> {
    if trainable == Trainable::Adapter && adapter.is_none() {
        return Err(Error::invalid("adapter training requested without an adapter"));
    }
    if let Some(a) = adapter {
        if a.layers.len() != theta.layers.len() {
            return Err(Error::shape(
                "bind",
                format!("{} adapters for {} layers", a.layers.len(), theta.layers.len()),
            ));
        }
    }
    let mut next = 0usize;
    let mut leaf = |tape: &mut Tape<S>, t: &Tensor<S>, tracked: bool| {
        let id = if tracked {
            tape.param(ParamId(next), t.clone())
        } else {
            tape.constant(t.clone())
        };
        next += usize::from(tracked);
        id
    };
    let base_tracked = trainable == Trainable::Base;
    let mut layers = Vec::with_capacity(theta.layers.len());
    for (i, l) in theta.layers.iter().enumerate() {
        let w = leaf(tape, &l.weight, base_tracked);
        let b = leaf(tape, &l.bias, base_tracked);
        let w = match adapter {
            Some(ad) => {
                let layer = &ad.layers[i];
                let tracked = trainable == Trainable::Adapter;
                let a = leaf(tape, &layer.a, tracked);
                let bb = leaf(tape, &layer.b, tracked);
                tape.low_rank(w, a, bb, ad.scale())?
            }
            None => w,
        };
        layers.push((w, b));
    }
    let class_table = theta.class_table.as_ref().map(|t| leaf(tape, t, base_tracked));
    Ok(Binding {
        layers,
        class_table,
        config: theta.config,
    })
}

/// Per-row conditioning for a batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning<'a, S> {
    pub times: &'a [S],
    pub labels: &'a [Label],
    /// Step sizes; required exactly when the network has a step head.
    pub steps: Option<&'a [S]>,
}

fn embed_rows<S: Scalar>(values: &[S], dim: usize) -> Result<Tensor<S>> {
    let mut data = Vec::with_capacity(values.len() * dim);
    for &v in values {
        data.extend(time_embed(v, dim)?);
    }
    Ok(Tensor::from_parts(vec![values.len(), dim], data))
}

/// Records the MLP on `tape` and returns the `[b, input_dim]` output node.
pub fn forward_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    binding: &Binding,
    x: &Tensor<S>,
    cond: Conditioning<'_, S>,
) -> Result<NodeId> {
    let cfg = &binding.config;
    if x.rank() != 2 || x.cols() != cfg.input_dim {
        return Err(Error::shape(
            "forward",
            format!("x {:?}, expected [b, {}]", x.shape(), cfg.input_dim),
        ));
    }
    let b = x.rows();
    if cond.times.len() != b || cond.labels.len() != b {
        return Err(Error::shape(
            "forward",
            format!("{} rows, {} times, {} labels", b, cond.times.len(), cond.labels.len()),
        ));
    }
    if let Some(t) = cond.times.iter().find(|t| !(**t >= S::zero() && **t <= S::one())) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    let mut parts = vec![tape.constant(x.clone())];
    parts.push(tape.constant(embed_rows(cond.times, cfg.time_embed_dim)?));
    if cfg.is_conditional() {
        let mut idx = Vec::with_capacity(b);
        for l in cond.labels {
            idx.push(match *l {
                Some(c) if c < cfg.class_count => c,
                Some(c) => {
                    return Err(Error::LabelOutOfRange {
                        label: c,
                        class_count: cfg.class_count,
                    })
                }
                None => cfg.class_count,
            });
        }
        let table = binding
            .class_table
            .ok_or_else(|| Error::invalid("conditional binding without class table"))?;
        parts.push(tape.gather_rows(table, idx)?);
    } else if let Some(c) = cond.labels.iter().flatten().next() {
        return Err(Error::LabelOutOfRange {
            label: *c,
            class_count: 0,
        });
    }
    match (cfg.has_step_head(), cond.steps) {
        (true, Some(steps)) => {
            if steps.len() != b {
                return Err(Error::shape("forward", format!("{} steps for {b} rows", steps.len())));
            }
            parts.push(tape.constant(embed_rows(steps, cfg.step_embed_dim)?));
        }
        (true, None) => return Err(Error::invalid("step-conditioned network needs a step size")),
        (false, Some(_)) => {
            return Err(Error::invalid("step size supplied to a network without a step head"))
        }
        (false, None) => {}
    }
    let mut h = tape.concat_cols(parts)?;
    let last = binding.layers.len() - 1;
    for (i, &(w, bias)) in binding.layers.iter().enumerate() {
        h = tape.affine(h, w, bias)?;
        if i < last {
            h = tape.tanh(h)?;
        }
    }
    Ok(h)
}

/// Guided velocity `v_c + w · (v_c − v_∅)` per row.
///
/// When every `w` is zero the null pass is skipped and the conditional node
/// is returned unchanged.
pub fn guided_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    binding: &Binding,
    x: &Tensor<S>,
    cond: Conditioning<'_, S>,
    guidance: &[S],
) -> Result<NodeId> {
    if guidance.len() != x.rows() {
        return Err(Error::shape(
            "cfg",
            format!("{} guidance scales for {} rows", guidance.len(), x.rows()),
        ));
    }
    if let Some(w) = guidance.iter().find(|w| !(**w >= S::zero()) || !w.is_finite()) {
        return Err(Error::invalid(format!("guidance scale {w} must be finite and non-negative")));
    }
    if guidance.iter().all(|w| w.is_zero()) {
        return forward_on_tape(tape, binding, x, cond);
    }
    if !binding.config.is_conditional() {
        return Err(Error::invalid("guidance requires a class-conditional network"));
    }
    let b = x.rows();
    let doubled = Tensor::concat_rows(&[x, x])?;
    let times: Vec<S> = cond.times.iter().chain(cond.times).copied().collect();
    let labels: Vec<Label> = cond
        .labels
        .iter()
        .copied()
        .chain(std::iter::repeat(None).take(b))
        .collect();
    let steps: Option<Vec<S>> = cond.steps.map(|s| s.iter().chain(s).copied().collect());
    let both = forward_on_tape(
        tape,
        binding,
        &doubled,
        Conditioning {
            times: &times,
            labels: &labels,
            steps: steps.as_deref(),
        },
    )?;
    let cond_v = tape.slice_rows(both, 0, b)?;
    let null_v = tape.slice_rows(both, b, b)?;
    let neg_null = tape.scale(null_v, -S::one())?;
    let diff = tape.add(cond_v, neg_null)?;
    let push = tape.scale_rows(diff, guidance.to_vec())?;
    tape.add(cond_v, push)
}

/// Unguided batched forward pass.
pub fn forward_velocity<S: Scalar>(
    theta: &Theta<S>,
    adapter: Option<&LoraDelta<S>>,
    x: &Tensor<S>,
    cond: Conditioning<'_, S>,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let binding = bind(&mut tape, theta, adapter, Trainable::Nothing)?;
    let out = forward_on_tape(&mut tape, &binding, x, cond)?;
    Ok(tape.value(out)?.clone())
}

/// Guided batched forward pass; errors for an unconditional network when any
/// scale is positive.
pub fn cfg_velocity<S: Scalar>(
    theta: &Theta<S>,
    adapter: Option<&LoraDelta<S>>,
    x: &Tensor<S>,
    cond: Conditioning<'_, S>,
    guidance: &[S],
) -> Result<Tensor<S>> {
    if !theta.config.is_conditional() {
        return Err(Error::invalid("guidance requires a class-conditional network"));
    }
    let mut tape = Tape::new();
    let binding = bind(&mut tape, theta, adapter, Trainable::Nothing)?;
    let out = guided_on_tape(&mut tape, &binding, x, cond, guidance)?;
    Ok(tape.value(out)?.clone())
}

/// A velocity field evaluated row-wise with per-row times, labels and
/// guidance scales. Implementations are frozen and safe to share.
pub trait VelocityField<S: Scalar>: Sync {
    fn velocity(
        &self,
        x: &Tensor<S>,
        times: &[S],
        labels: &[Label],
        guidance: &[S],
    ) -> Result<Tensor<S>>;
}

/// A frozen network evaluated with guidance.
#[derive(Clone, Copy, Debug)]
pub struct GuidedNet<'a, S> {
    pub theta: &'a Theta<S>,
    /// Fixed step size fed to a step-conditioned network.
    pub step: Option<S>,
}

impl<'a, S: Scalar> GuidedNet<'a, S> {
    pub fn new(theta: &'a Theta<S>) -> Self {
        GuidedNet { theta, step: None }
    }

    pub fn with_step(theta: &'a Theta<S>, step: S) -> Self {
        GuidedNet {
            theta,
            step: Some(step),
        }
    }
}

impl<S: Scalar> VelocityField<S> for GuidedNet<'_, S> {
    fn velocity(
        &self,
        x: &Tensor<S>,
        times: &[S],
        labels: &[Label],
        guidance: &[S],
    ) -> Result<Tensor<S>> {
        let steps = self.step.map(|d| vec![d; x.rows()]);
        let mut tape = Tape::new();
        let binding = bind(&mut tape, self.theta, None, Trainable::Nothing)?;
        let out = guided_on_tape(
            &mut tape,
            &binding,
            x,
            Conditioning {
                times,
                labels,
                steps: steps.as_deref(),
            },
            guidance,
        )?;
        Ok(tape.value(out)?.clone())
    }
}
