//! The steps behind each subcommand, callable in-process.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use scfm_core::data::{self, Dataset, LabeledPoint, Normalization};
use scfm_core::distill::{few_shot_mode, Distiller};
use scfm_core::flow::{train_teacher as fit_teacher, TimeGrid};
use scfm_core::gradcheck::{self, GradCheckReport};
use scfm_core::metrics::{
    consistency_residual, fidelity_to_reference, samples, seed_batch, sliced_wasserstein, straightness,
    trajectories, EvalProtocol, SeedBatch,
};
use scfm_core::net::{GuidedNet, Label, Theta};
use scfm_core::rng::{self, Streams};
use scfm_core::tensor::Tensor;

use crate::checkpoint::{load_checkpoint, save_checkpoint, ModelCheckpoint};
use crate::config::ExperimentConfig;
use crate::error::{ExperimentError, Result};
use crate::plot::{line_svg, scatter_svg, Series};
use crate::records::{loss_csv, MetricsLog, MetricsRecord, LOGGED_STEPS};

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const TEACHER_LOSS: &str = "teacher_loss.csv";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const METRICS_CSV: &str = "metrics.csv";
pub const RESOLVED_CONFIG: &str = "config.toml";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| ExperimentError::io(path, e))
}

/// Raw training and held-out points for the configured density.
pub fn raw_data(cfg: &ExperimentConfig) -> Result<(Vec<LabeledPoint>, Vec<LabeledPoint>)> {
    let spec = cfg.dataset_spec()?;
    let streams = Streams::new(cfg.seed);
    let train = data::sample(&spec, spec.size, &mut streams.stream(rng::DATASET))?;
    let heldout = data::sample(&spec, cfg.data.heldout, &mut streams.stream(rng::HELDOUT))?;
    Ok((train, heldout))
}

/// Standardized training set; `normalization` defaults to a fit on the
/// training points.
pub fn dataset(cfg: &ExperimentConfig, normalization: Option<Normalization>) -> Result<Dataset<f64>> {
    let (train, _) = raw_data(cfg)?;
    let norm = match normalization {
        Some(n) => n,
        None => Normalization::fit(&train)?,
    };
    Ok(Dataset::new(&train, cfg.dataset_kind()?.class_count(), norm)?)
}

fn labels_for(net_classes: usize, labels: &[usize]) -> Vec<Label> {
    labels.iter().map(|&l| (net_classes > 0).then_some(l)).collect()
}

pub fn train_teacher(cfg: &ExperimentConfig, out_dir: &Path, mut progress: impl FnMut(usize, f64)) -> Result<ModelCheckpoint> {
    let data = dataset(cfg, None)?;
    let run = fit_teacher(&data, cfg.net_config()?, &cfg.teacher_config(), |i, l| progress(i, l))?;
    let ckpt = ModelCheckpoint {
        theta: run.theta,
        delta: None,
        ema: None,
        optim: run.optim,
        normalization: *data.normalization(),
    };
    save_checkpoint(&out_dir.join(TEACHER_CKPT), &ckpt)?;
    write(&out_dir.join(TEACHER_LOSS), loss_csv(&run.losses))?;
    write(&out_dir.join(RESOLVED_CONFIG), cfg.to_toml())?;
    Ok(ckpt)
}

/// Seed-matched evaluation against a fixed teacher reference, all in
/// standardized coordinates.
pub struct Evaluator {
    pub protocol: EvalProtocol,
    pub batch: SeedBatch<f64>,
    /// Teacher outputs at `teacher_steps`.
    pub reference: Tensor<f64>,
    residual_x: Tensor<f64>,
    residual_labels: Vec<Label>,
    residual_grid: TimeGrid<f64>,
    residual_trials: usize,
    residual_seed: u64,
}

impl Evaluator {
    /// The residual batch is the teacher's own output on the first
    /// `residual_batch` seeds, so no dataset is needed.
    pub fn new(cfg: &ExperimentConfig, teacher: &Theta<f64>) -> Result<Self> {
        let protocol = cfg.eval_protocol();
        let classes = teacher.config().class_count;
        let batch = seed_batch(&cfg.eval_seeds(), classes)?;
        let reference = samples(&GuidedNet::new(teacher), &batch, cfg.eval.teacher_steps, &protocol)?;
        let n = cfg.eval.residual_batch.min(batch.labels.len());
        Ok(Evaluator {
            protocol,
            residual_x: reference.slice_rows(0, n)?,
            residual_labels: batch.labels[..n].to_vec(),
            residual_grid: TimeGrid::uniform(cfg.distill.grid_steps)?.shifted(cfg.eval.shift)?,
            residual_trials: cfg.eval.residual_trials,
            residual_seed: cfg.seed,
            batch,
            reference,
        })
    }

    fn guidance(&self) -> f64 {
        if self.batch.labels.iter().any(Option::is_some) {
            self.protocol.guidance
        } else {
            0.0
        }
    }

    pub fn fidelity(&self, model: &Theta<f64>, steps: usize) -> Result<f64> {
        Ok(fidelity_to_reference(&self.reference, &GuidedNet::new(model), &self.batch, steps, &self.protocol)?)
    }

    pub fn straightness(&self, model: &Theta<f64>, steps: usize) -> Result<f64> {
        let traj = trajectories(&GuidedNet::new(model), &self.batch, steps, &self.protocol)?;
        Ok(straightness(&traj)?.mean)
    }

    pub fn residual(&self, model: &Theta<f64>) -> Result<f64> {
        let mut r = Streams::new(self.residual_seed).stream(rng::EVAL);
        Ok(consistency_residual(
            &GuidedNet::new(model),
            &self.residual_x,
            &self.residual_labels,
            &self.residual_grid,
            self.residual_trials,
            self.guidance(),
            &mut r,
        )?)
    }

    pub fn record(&self, iteration: u64, loss: f64, model: &Theta<f64>, seconds: f64) -> Result<MetricsRecord> {
        let mut fidelity = [0.0; 3];
        for (f, &steps) in fidelity.iter_mut().zip(&LOGGED_STEPS) {
            *f = self.fidelity(model, steps)?;
        }
        Ok(MetricsRecord {
            iteration,
            loss,
            residual: self.residual(model)?,
            fidelity,
            straightness_4: self.straightness(model, 4)?,
            seconds,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct DistillOptions {
    pub variant: Option<scfm_core::distill::Variant>,
    pub few_shot: Option<usize>,
    /// Fill the `seconds` column with wall-clock time instead of zeros.
    pub timing: bool,
}

pub struct DistillOutput {
    pub checkpoint: ModelCheckpoint,
    pub log: MetricsLog,
}

/// Applies command-line overrides to the recipe.
pub fn resolve_distill(cfg: &ExperimentConfig, opts: &DistillOptions) -> Result<ExperimentConfig> {
    let mut cfg = cfg.clone();
    if let Some(v) = opts.variant {
        cfg.distill.variant = v.name().to_string();
    }
    if let Some(m) = opts.few_shot {
        cfg.distill.few_shot = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs distillation, logging a metrics row every `eval.every` iterations
/// (and at iterations 0 and the last one).
pub fn distill(
    cfg: &ExperimentConfig,
    teacher: &ModelCheckpoint,
    opts: &DistillOptions,
    out_dir: Option<&Path>,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<DistillOutput> {
    let cfg = resolve_distill(cfg, opts)?;
    let mut data = dataset(&cfg, Some(teacher.normalization))?;
    let mut dcfg = cfg.distill_config()?;
    if cfg.distill.few_shot > 0 {
        data = few_shot_mode(&data, cfg.distill.few_shot, cfg.seed)?;
        dcfg.full_batch = true;
        dcfg.batch_size = cfg.distill.few_shot;
    }
    let evaluator = Evaluator::new(&cfg, &teacher.theta)?;
    let mut distiller = Distiller::new(teacher.theta.clone(), dcfg)?;
    let start = Instant::now();
    let seconds = |s: &Instant| if opts.timing { s.elapsed().as_secs_f64() } else { 0.0 };
    let mut log = MetricsLog::new();
    let first = evaluator.record(0, f64::NAN, &distiller.student()?, seconds(&start))?;
    on_record(&first);
    log.push(first)?;
    let iters = cfg.distill.iters as u64;
    for it in 1..=iters {
        let loss = distiller.step(&data)?;
        if it % cfg.eval.every == 0 || it == iters {
            let rec = evaluator.record(it, loss, &distiller.student()?, seconds(&start))?;
            on_record(&rec);
            log.push(rec)?;
        }
    }
    let checkpoint = ModelCheckpoint {
        theta: teacher.theta.clone(),
        delta: Some(distiller.delta().clone()),
        ema: Some(distiller.ema().clone()),
        optim: distiller.optim().clone(),
        normalization: teacher.normalization,
    };
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join(STUDENT_CKPT), &checkpoint)?;
        write(&dir.join(METRICS_CSV), log.to_csv())?;
        write(&dir.join(RESOLVED_CONFIG), cfg.to_toml())?;
    }
    Ok(DistillOutput { checkpoint, log })
}

pub const EVAL_HEADER: &str = "model,steps,fid_sw,straightness,residual";

/// Fidelity, straightness and residual of teacher and student per step count.
pub fn eval_table(cfg: &ExperimentConfig, teacher: &ModelCheckpoint, student: &ModelCheckpoint, steps: &[usize]) -> Result<String> {
    if steps.is_empty() || steps.contains(&0) {
        return Err(ExperimentError::Config("step counts must be positive".into()));
    }
    let evaluator = Evaluator::new(cfg, &teacher.theta)?;
    let mut out = String::from(EVAL_HEADER);
    out.push('\n');
    for (name, model) in [("teacher", teacher.student()?), ("student", student.student()?)] {
        let residual = evaluator.residual(&model)?;
        for &k in steps {
            let _ = writeln!(
                out,
                "{name},{k},{},{},{residual}",
                evaluator.fidelity(&model, k)?,
                evaluator.straightness(&model, k)?
            );
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleRequest {
    pub steps: usize,
    pub count: usize,
    pub seed: u64,
    pub shift: f64,
    pub guidance: f64,
}

/// Samples in data coordinates with their labels (`-1` when unconditional).
pub fn sample_points(ckpt: &ModelCheckpoint, req: &SampleRequest) -> Result<Vec<([f64; 2], i64)>> {
    if req.count == 0 || req.steps == 0 {
        return Err(ExperimentError::Config("count and steps must be positive".into()));
    }
    let seeds: Vec<u64> = (req.seed..req.seed + req.count as u64).collect();
    let model = ckpt.student()?;
    let batch = seed_batch(&seeds, model.config().class_count)?;
    let protocol = EvalProtocol {
        shift: req.shift,
        guidance: req.guidance,
        ..EvalProtocol::default()
    };
    let out = samples(&GuidedNet::new(&model), &batch, req.steps, &protocol)?;
    let out = ckpt.normalization.invert_tensor(&out)?;
    Ok((0..out.rows())
        .map(|i| {
            let r = out.row(i);
            ([r[0], r[1]], batch.labels[i].map_or(-1, |l| l as i64))
        })
        .collect())
}

pub fn points_csv(points: &[([f64; 2], i64)]) -> String {
    let mut out = String::from("x,y,label\n");
    for (p, l) in points {
        let _ = writeln!(out, "{},{},{l}", p[0], p[1]);
    }
    out
}

/// Writes data/teacher/student overlays and, given a log, metric curves.
/// Returns the files written.
pub fn plot(
    cfg: &ExperimentConfig,
    teacher: &ModelCheckpoint,
    student: Option<&ModelCheckpoint>,
    log: Option<&MetricsLog>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let count = cfg.eval.seeds as usize;
    let (train, _) = raw_data(cfg)?;
    let data_pts: Vec<[f64; 2]> = train.iter().take(count).map(|p| p.x).collect();
    let req = |steps| SampleRequest {
        steps,
        count,
        seed: cfg.eval.seed_offset,
        shift: cfg.eval.shift,
        guidance: cfg.eval.guidance,
    };
    let strip = |v: Vec<([f64; 2], i64)>| v.into_iter().map(|(p, _)| p).collect::<Vec<_>>();
    let mut series = vec![
        Series::new("data", data_pts),
        Series::new(
            format!("teacher {} steps", cfg.eval.teacher_steps),
            strip(sample_points(teacher, &req(cfg.eval.teacher_steps))?),
        ),
    ];
    if let Some(s) = student {
        series.push(Series::new("student 4 steps", strip(sample_points(s, &req(4))?)));
    }
    let mut written = Vec::new();
    let path = out_dir.join("samples.svg");
    write(&path, scatter_svg("data vs teacher vs student", &series))?;
    written.push(path);
    if let Some(log) = log {
        let col = |f: &dyn Fn(&MetricsRecord) -> f64| -> Vec<[f64; 2]> {
            log.records().iter().map(|r| [r.iteration as f64, f(r)]).collect()
        };
        let fid = vec![
            Series::new("fid_sw_3", col(&|r| r.fidelity[0])),
            Series::new("fid_sw_4", col(&|r| r.fidelity[1])),
            Series::new("fid_sw_8", col(&|r| r.fidelity[2])),
        ];
        let path = out_dir.join("fidelity.svg");
        write(&path, line_svg("teacher-student fidelity", "iteration", "sliced W2", &fid))?;
        written.push(path);
        let other = vec![
            Series::new("residual", col(&|r| r.residual)),
            Series::new("straightness_4", col(&|r| r.straightness_4)),
        ];
        let path = out_dir.join("straightening.svg");
        write(&path, line_svg("self-consistency and straightness", "iteration", "value", &other))?;
        written.push(path);
    }
    Ok(written)
}

/// Fidelity of `steps`-step samples to held-out data, in standardized
/// coordinates with unguided sampling conditioned on the data labels.
pub fn data_fidelity(cfg: &ExperimentConfig, model: &ModelCheckpoint, steps: usize) -> Result<f64> {
    let (_, heldout) = raw_data(cfg)?;
    let theta = model.student()?;
    let classes = theta.config().class_count;
    let mut r = Streams::new(cfg.seed).stream(rng::NOISE);
    let z = scfm_core::flow::gaussian(heldout.len(), 2, &mut r);
    let labels: Vec<usize> = heldout.iter().map(|p| p.label).collect();
    let batch = SeedBatch {
        z,
        labels: labels_for(classes, &labels),
    };
    let protocol = EvalProtocol {
        guidance: 0.0,
        ..cfg.eval_protocol()
    };
    let out = samples(&GuidedNet::new(&theta), &batch, steps, &protocol)?;
    let target: Vec<[f64; 2]> = heldout.iter().map(|p| model.normalization.apply(p.x)).collect();
    let target = Tensor::from_points(&target)?;
    Ok(sliced_wasserstein(&target, &out, protocol.n_proj, protocol.projection_seed)?)
}

pub fn grad_check(probes: usize, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    Ok(gradcheck::grad_check(probes, seed, gradcheck::DEFAULT_EPS, tolerance)?)
}

pub fn load(path: &Path) -> Result<ModelCheckpoint> {
    load_checkpoint(path, None)
}
