//! Velocity-space shortcut distillation of a frozen teacher into a LoRA
//! student with dual teacher/self targets.

use std::fmt;
use std::str::FromStr;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{euler_step_rows, gaussian, interpolate_rows, TimeGrid};
use crate::net::{
    bind, guided_on_tape, merge_effective, Conditioning, EffectiveDelta, GuidedNet, Label, LoraDelta, Theta, Trainable,
    VelocityField,
};
use crate::optim::{adamw_step, AdamWConfig, OptimState};
use crate::rng::{self, Rng, Streams};
use crate::scalar::{lit, Scalar};
use crate::tape::{ParamId, Tape};
use crate::tensor::Tensor;

/// Three consecutive points `t1 > t2 > t3` of a grid, `skip` indices apart.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripleTimes<S> {
    pub t1: S,
    pub t2: S,
    pub t3: S,
    pub start: usize,
    pub skip: usize,
}

impl<S: Scalar> TripleTimes<S> {
    pub fn at(grid: &TimeGrid<S>, start: usize, skip: usize) -> Result<Self> {
        if skip == 0 {
            return Err(Error::invalid("skip must be at least 1"));
        }
        if start + 2 * skip > grid.steps() {
            return Err(Error::invalid(format!(
                "triple at {start} with skip {skip} exceeds a {}-step grid",
                grid.steps()
            )));
        }
        let t = grid.times();
        Ok(TripleTimes {
            t1: t[start],
            t2: t[start + skip],
            t3: t[start + 2 * skip],
            start,
            skip,
        })
    }

    pub fn d_i(&self) -> S {
        self.t1 - self.t2
    }

    pub fn d_next(&self) -> S {
        self.t2 - self.t3
    }
}

/// Draws a start index uniformly among the positions that leave room for
/// two strides of `skip`.
pub fn sample_triple<S: Scalar>(grid: &TimeGrid<S>, skip: usize, rng: &mut Rng) -> Result<TripleTimes<S>> {
    if skip == 0 || 2 * skip > grid.steps() {
        return Err(Error::invalid(format!(
            "a {}-step grid has no room for skip {skip}",
            grid.steps()
        )));
    }
    let start = rng.below(grid.steps() - 2 * skip + 1);
    TripleTimes::at(grid, start, skip)
}

/// Self-teaching skips `{2, 4, …, n/4}`.
pub fn self_skips(n: usize) -> Result<Vec<usize>> {
    if !n.is_power_of_two() || n < 8 {
        return Err(Error::invalid(format!("grid size {n} must be a power of two ≥ 8")));
    }
    Ok(std::iter::successors(Some(2), |s| Some(s * 2)).take_while(|&s| s <= n / 4).collect())
}

/// Intermediate quantities of one target evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetParts<S> {
    pub v_a: Tensor<S>,
    pub x_t2: Tensor<S>,
    pub v_b: Tensor<S>,
    pub target: Tensor<S>,
}

/// `[d_i·v_a + d_next·v_b] / (d_i + d_next)` per row, where `v_a` comes from
/// `provider_a` at `(x_t1, t1)` and `v_b` from `provider_b` at the point one
/// Euler step of `provider_a` away.
pub fn target_parts<S: Scalar>(
    provider_a: &dyn VelocityField<S>,
    provider_b: &dyn VelocityField<S>,
    x_t1: &Tensor<S>,
    triples: &[TripleTimes<S>],
    labels: &[Label],
    guidance: &[S],
) -> Result<TargetParts<S>> {
    if triples.len() != x_t1.rows() {
        return Err(Error::shape("scfm target", "one triple per row required"));
    }
    let t1: Vec<S> = triples.iter().map(|t| t.t1).collect();
    let t2: Vec<S> = triples.iter().map(|t| t.t2).collect();
    let v_a = provider_a.velocity(x_t1, &t1, labels, guidance)?;
    if !v_a.is_finite() {
        return Err(Error::NonFinite("first provider velocity".into()));
    }
    let x_t2 = euler_step_rows(x_t1, &v_a, &t1, &t2)?;
    let v_b = provider_b.velocity(&x_t2, &t2, labels, guidance)?;
    if !v_b.is_finite() {
        return Err(Error::NonFinite("second provider velocity".into()));
    }
    let c = x_t1.cols();
    let mut out = Vec::with_capacity(x_t1.len());
    for (i, tr) in triples.iter().enumerate() {
        let (di, dn) = (tr.d_i(), tr.d_next());
        let sum = di + dn;
        for j in 0..c {
            out.push((di * v_a.at(i, j) + dn * v_b.at(i, j)) / sum);
        }
    }
    let target = Tensor::new(x_t1.shape().to_vec(), out)?;
    Ok(TargetParts { v_a, x_t2, v_b, target })
}

pub fn scfm_target<S: Scalar>(
    provider_a: &dyn VelocityField<S>,
    provider_b: &dyn VelocityField<S>,
    x_t1: &Tensor<S>,
    triples: &[TripleTimes<S>],
    labels: &[Label],
    guidance: &[S],
) -> Result<Tensor<S>> {
    Ok(target_parts(provider_a, provider_b, x_t1, triples, labels, guidance)?.target)
}

/// Mean squared error over all elements of an `N`-row batch whose first `k`
/// rows carry teacher-branch targets.
pub fn scfm_loss<S: Scalar>(predictions: &Tensor<S>, targets: &Tensor<S>, k: usize) -> Result<S> {
    predictions.same_shape(targets, "scfm loss")?;
    let n = predictions.rows();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k = {k} must lie strictly between 0 and {n}")));
    }
    let sq: S = predictions
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(sq / lit::<S>(predictions.len() as f64))
}

/// `μ·slow + (1 − μ)·current`, layer by layer.
pub fn ema_update<S: Scalar>(slow: &EffectiveDelta<S>, current: &EffectiveDelta<S>, mu: f64) -> Result<EffectiveDelta<S>> {
    let mut out = slow.clone();
    ema_in_place(
        &mut out.layers.iter_mut().collect::<Vec<_>>(),
        &current.layers.iter().collect::<Vec<_>>(),
        mu,
    )?;
    Ok(out)
}

/// Full-parameter EMA step applied tensor by tensor.
pub fn ema_in_place<S: Scalar>(ema: &mut [&mut Tensor<S>], current: &[&Tensor<S>], mu: f64) -> Result<()> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::invalid(format!("EMA decay {mu} must lie in (0, 1)")));
    }
    if ema.len() != current.len() || ema.iter().zip(current).any(|(e, c)| e.shape() != c.shape()) {
        return Err(Error::shape("ema", "tracked and current parameters disagree"));
    }
    let m = lit::<S>(mu);
    let one_m = S::one() - m;
    for (e, c) in ema.iter_mut().zip(current) {
        for (a, &b) in e.data_mut().iter_mut().zip(c.data()) {
            *a = m * *a + one_m * b;
        }
    }
    Ok(())
}

/// Stop-gradient adapter copies kept as effective per-layer deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<S> {
    pub slow: EffectiveDelta<S>,
    pub fast: Option<EffectiveDelta<S>>,
    pub iteration: u64,
}

impl<S: Scalar> EmaState<S> {
    pub fn new(delta: &LoraDelta<S>, with_fast: bool) -> Result<Self> {
        let eff = delta.effective()?;
        Ok(EmaState {
            fast: with_fast.then(|| eff.clone()),
            slow: eff,
            iteration: 0,
        })
    }

    /// Moves both copies toward `current`.
    pub fn update(&mut self, current: &EffectiveDelta<S>, mu_slow: f64, mu_fast: f64) -> Result<()> {
        self.slow = ema_update(&self.slow, current, mu_slow)?;
        if let Some(fast) = &self.fast {
            self.fast = Some(ema_update(fast, current, mu_fast)?);
        }
        Ok(())
    }
}

/// Resets the slow copy to `current` when `period > 0` divides `iteration`.
/// Returns whether a restart happened.
pub fn cyclic_restart<S: Scalar>(state: &mut EmaState<S>, current: &EffectiveDelta<S>, period: u64, iteration: u64) -> bool {
    if period > 0 && iteration % period == 0 {
        state.slow = current.clone();
        true
    } else {
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Vanilla,
    VanillaMix,
    Cyclic,
    FastSlow,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Vanilla, Variant::VanillaMix, Variant::Cyclic, Variant::FastSlow];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::VanillaMix => "vanilla-mix",
            Variant::Cyclic => "cyclic",
            Variant::FastSlow => "fast-slow",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    pub batch_size: usize,
    pub teacher_fraction: f64,
    pub mu_slow: f64,
    pub mu_fast: f64,
    /// Cyclic variant only; 0 disables.
    pub restart_period: u64,
    pub variant: Variant,
    pub grid_steps: usize,
    pub shift_range: (f64, f64),
    pub guidance_range: (f64, f64),
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub optim: AdamWConfig,
    /// Use every dataset row in every batch instead of sampling.
    pub full_batch: bool,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            batch_size: 16,
            teacher_fraction: 0.4,
            mu_slow: 0.999,
            mu_fast: 0.99,
            restart_period: 1000,
            variant: Variant::Vanilla,
            grid_steps: 128,
            shift_range: (2.5, 4.5),
            guidance_range: (0.0, 4.0),
            lora_rank: 4,
            lora_alpha: 4.0,
            optim: AdamWConfig::default(),
            full_batch: false,
            seed: 0,
        }
    }
}

impl DistillConfig {
    /// Number of teacher-branch rows.
    pub fn k(&self) -> usize {
        (self.teacher_fraction * self.batch_size as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || k >= self.batch_size {
            return Err(Error::invalid(format!(
                "teacher fraction {} gives k = {k} for batch size {}",
                self.teacher_fraction, self.batch_size
            )));
        }
        if !(0.0 < self.mu_fast && self.mu_fast < self.mu_slow && self.mu_slow < 1.0) {
            return Err(Error::invalid("EMA decays must satisfy 0 < mu_fast < mu_slow < 1"));
        }
        self_skips(self.grid_steps)?;
        let (lo, hi) = self.shift_range;
        if !(lo >= 1.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid("shift range must satisfy 1 ≤ lo ≤ hi"));
        }
        let (lo, hi) = self.guidance_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid("guidance range must satisfy 0 ≤ lo ≤ hi"));
        }
        if self.lora_rank == 0 || !(self.lora_alpha > 0.0) {
            return Err(Error::invalid("LoRA rank and alpha must be positive"));
        }
        Ok(())
    }
}

/// Fixed training subset for few-shot distillation.
pub fn few_shot_mode<S: Scalar>(data: &Dataset<S>, m: usize, seed: u64) -> Result<Dataset<S>> {
    data.few_shot(m, seed)
}

/// Everything sampled for one iteration, kept for inspection.
#[derive(Clone, Debug)]
pub struct DistillBatch<S> {
    pub x_t1: Tensor<S>,
    pub labels: Vec<Label>,
    pub guidance: Vec<S>,
    pub shift: S,
    pub triples: Vec<TripleTimes<S>>,
    pub k: usize,
}

/// Student adapter, optimizer and EMA copies over a frozen teacher.
#[derive(Clone, Debug)]
pub struct Distiller<S> {
    teacher: Theta<S>,
    delta: LoraDelta<S>,
    ema: EmaState<S>,
    optim: OptimState<S>,
    cfg: DistillConfig,
    data_rng: Rng,
    noise_rng: Rng,
    triple_rng: Rng,
    shift_rng: Rng,
    w_rng: Rng,
    last_loss: Option<S>,
}

impl<S: Scalar> Distiller<S> {
    /// Starts the student at the teacher (`θ₀ = θ*`, zero-product adapter).
    pub fn new(teacher: Theta<S>, cfg: DistillConfig) -> Result<Self> {
        cfg.validate()?;
        let streams = Streams::new(cfg.seed);
        let delta = LoraDelta::init(&teacher, cfg.lora_rank, cfg.lora_alpha, &mut streams.stream(rng::INIT))?;
        let ema = EmaState::new(&delta, cfg.variant == Variant::FastSlow)?;
        Ok(Distiller {
            teacher,
            delta,
            ema,
            optim: OptimState::new(cfg.optim),
            cfg,
            data_rng: streams.stream(rng::DATA),
            noise_rng: streams.stream(rng::NOISE),
            triple_rng: streams.stream(rng::TRIPLES),
            shift_rng: streams.stream(rng::SHIFT),
            w_rng: streams.stream(rng::CFG_W),
            last_loss: None,
        })
    }

    pub fn config(&self) -> &DistillConfig {
        &self.cfg
    }

    pub fn teacher(&self) -> &Theta<S> {
        &self.teacher
    }

    pub fn delta(&self) -> &LoraDelta<S> {
        &self.delta
    }

    pub fn ema(&self) -> &EmaState<S> {
        &self.ema
    }

    pub fn optim(&self) -> &OptimState<S> {
        &self.optim
    }

    pub fn iteration(&self) -> u64 {
        self.ema.iteration
    }

    /// `θ₀ + Δθ` with the trainable adapter merged in.
    pub fn student(&self) -> Result<Theta<S>> {
        merge_effective(&self.teacher, &self.delta.effective()?)
    }

    /// `θ₀ + Δθ⁻`.
    pub fn ema_student(&self) -> Result<Theta<S>> {
        merge_effective(&self.teacher, &self.ema.slow)
    }

    /// Draws data, noise, shift, guidance and per-row triples.
    pub fn sample_batch(&mut self, data: &Dataset<S>) -> Result<DistillBatch<S>> {
        let n = if self.cfg.full_batch { data.len() } else { self.cfg.batch_size };
        let k = (self.cfg.teacher_fraction * n as f64).round() as usize;
        if k == 0 || k >= n {
            return Err(Error::invalid(format!("k = {k} must lie strictly between 0 and {n}")));
        }
        let idx: Vec<usize> = if self.cfg.full_batch {
            (0..n).collect()
        } else {
            (0..n).map(|_| self.data_rng.below(data.len())).collect()
        };
        let (x0, raw_labels) = data.batch(&idx)?;
        let x1 = gaussian(n, x0.cols(), &mut self.noise_rng);
        let (lo, hi) = self.cfg.shift_range;
        let shift = lit::<S>(self.shift_rng.uniform_range(lo, hi));
        let grid = TimeGrid::uniform(self.cfg.grid_steps)?.shifted(shift)?;
        let skips = self_skips(self.cfg.grid_steps)?;
        let mut triples = Vec::with_capacity(n);
        for i in 0..n {
            let skip = if i < k { 1 } else { skips[self.triple_rng.below(skips.len())] };
            triples.push(sample_triple(&grid, skip, &mut self.triple_rng)?);
        }
        let conditional = self.teacher.config().is_conditional();
        let (wl, wh) = self.cfg.guidance_range;
        let guidance: Vec<S> = (0..n)
            .map(|_| {
                let w = self.w_rng.uniform_range(wl, wh);
                if conditional {
                    lit(w)
                } else {
                    S::zero()
                }
            })
            .collect();
        let labels: Vec<Label> = raw_labels.into_iter().map(|l| conditional.then_some(l)).collect();
        let t1: Vec<S> = triples.iter().map(|t| t.t1).collect();
        let x_t1 = interpolate_rows(&x0, &x1, &t1)?;
        Ok(DistillBatch {
            x_t1,
            labels,
            guidance,
            shift,
            triples,
            k,
        })
    }

    /// Per-row targets: teacher-branch providers for the first `k` rows,
    /// self-branch providers for the rest.
    pub fn targets(&self, batch: &DistillBatch<S>) -> Result<Tensor<S>> {
        let n = batch.triples.len();
        let k = batch.k;
        let slow = merge_effective(&self.teacher, &self.ema.slow)?;
        let fast = match &self.ema.fast {
            Some(f) => Some(merge_effective(&self.teacher, f)?),
            None => None,
        };
        let teacher = GuidedNet::new(&self.teacher);
        let slow_net = GuidedNet::new(&slow);
        let (ta, tb, sa): (&dyn VelocityField<S>, &dyn VelocityField<S>, GuidedNet<'_, S>) = match self.cfg.variant {
            Variant::Vanilla | Variant::Cyclic => (&teacher, &teacher, slow_net),
            Variant::VanillaMix => (&teacher, &slow_net, slow_net),
            Variant::FastSlow => (
                &teacher,
                &slow_net,
                GuidedNet::new(fast.as_ref().ok_or_else(|| Error::invalid("fast-slow without fast EMA"))?),
            ),
        };
        let head = scfm_target(
            ta,
            tb,
            &batch.x_t1.slice_rows(0, k)?,
            &batch.triples[..k],
            &batch.labels[..k],
            &batch.guidance[..k],
        )?;
        let tail = scfm_target(
            &sa,
            &slow_net,
            &batch.x_t1.slice_rows(k, n - k)?,
            &batch.triples[k..],
            &batch.labels[k..],
            &batch.guidance[k..],
        )?;
        Tensor::concat_rows(&[&head, &tail])
    }

    /// Loss of the current student on `batch` against `targets`, with the
    /// gradient for every adapter factor.
    pub fn loss_and_grads(&self, batch: &DistillBatch<S>, targets: &Tensor<S>) -> Result<(S, Vec<Tensor<S>>)> {
        let mut tape = Tape::new();
        let binding = bind(&mut tape, &self.teacher, Some(&self.delta), Trainable::Adapter)?;
        let t1: Vec<S> = batch.triples.iter().map(|t| t.t1).collect();
        let pred = guided_on_tape(
            &mut tape,
            &binding,
            &batch.x_t1,
            Conditioning {
                times: &t1,
                labels: &batch.labels,
                steps: None,
            },
            &batch.guidance,
        )?;
        let target = tape.constant(targets.clone());
        let loss = tape.mse(pred, target)?;
        let value = tape.value(loss)?.item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite("distillation loss".into()));
        }
        let mut grads = tape.backward(loss)?;
        let shapes: Vec<Vec<usize>> = self.delta.tensors().iter().map(|t| t.shape().to_vec()).collect();
        Ok((
            value,
            shapes
                .iter()
                .enumerate()
                .map(|(i, s)| grads.remove(&ParamId(i)).unwrap_or_else(|| Tensor::zeros(s)))
                .collect(),
        ))
    }

    /// One full iteration; returns the loss before the update.
    pub fn step(&mut self, data: &Dataset<S>) -> Result<S> {
        let it = self.ema.iteration;
        let diverged = |last: Option<S>| Error::Divergence {
            iteration: it,
            last_finite_loss: last.and_then(|l| l.to_f64()),
        };
        let batch = self.sample_batch(data)?;
        let targets = match self.targets(&batch) {
            Err(Error::NonFinite(_)) => return Err(diverged(self.last_loss)),
            other => other?,
        };
        let (loss, grads) = match self.loss_and_grads(&batch, &targets) {
            Err(Error::NonFinite(_)) => return Err(diverged(self.last_loss)),
            other => other?,
        };
        let refs: Vec<&Tensor<S>> = grads.iter().collect();
        adamw_step(&mut self.delta.tensors_mut(), &refs, &mut self.optim)?;
        let current = self.delta.effective()?;
        if current.layers.iter().any(|l| !l.is_finite()) {
            return Err(diverged(Some(loss)));
        }
        self.ema.update(&current, self.cfg.mu_slow, self.cfg.mu_fast)?;
        self.ema.iteration += 1;
        if self.cfg.variant == Variant::Cyclic {
            let it = self.ema.iteration;
            cyclic_restart(&mut self.ema, &current, self.cfg.restart_period, it);
        }
        self.last_loss = Some(loss);
        Ok(loss)
    }
}
