use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scfm_core::distill::Variant;
use scfm_experiment::config::{parse_config, ExperimentConfig};
use scfm_experiment::error::{ExperimentError, Result};
use scfm_experiment::pipeline::{self, DistillOptions, SampleRequest};
use scfm_experiment::records::MetricsLog;

#[derive(Parser)]
#[command(name = "scfm", about = "Shortcut distillation of flow-matching teachers on 2-D toy densities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a flow-matching teacher.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `output_dir` from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Distill a few-step student from a teacher checkpoint.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        few_shot: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Record wall-clock seconds in the metrics log.
        #[arg(long)]
        timing: bool,
    },
    /// Compare teacher and student per step count.
    Eval {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "3,4,8,128")]
        steps: Vec<usize>,
        /// Evaluation settings; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 4)]
        steps: usize,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3.0)]
        shift: f64,
        #[arg(long, default_value_t = 2.0)]
        guidance: f64,
        /// `.csv` or `.svg`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Scatter overlays and metric curves.
    Plot {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare tape gradients with finite differences on random networks.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| ExperimentError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| ExperimentError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::TrainTeacher { config, out_dir } => {
            let cfg = parse_config(&config)?;
            let dir = out_dir.unwrap_or_else(|| cfg.output_dir.clone());
            let every = (cfg.teacher.iters / 20).max(1);
            pipeline::train_teacher(&cfg, &dir, |i, l| {
                if i % every == 0 {
                    eprintln!("iter {i} loss {l:.5}");
                }
            })?;
            eprintln!("wrote {}", dir.join(pipeline::TEACHER_CKPT).display());
        }
        Command::Distill {
            config,
            teacher,
            variant,
            few_shot,
            out_dir,
            timing,
        } => {
            let cfg = parse_config(&config)?;
            let teacher = pipeline::load(&teacher)?;
            let dir = out_dir.unwrap_or_else(|| cfg.output_dir.clone());
            let opts = DistillOptions {
                variant,
                few_shot,
                timing,
            };
            pipeline::distill(&cfg, &teacher, &opts, Some(&dir), |r| {
                eprintln!(
                    "iter {} loss {:.5} fid_sw_4 {:.5} fid_sw_8 {:.5} residual {:.5}",
                    r.iteration, r.loss, r.fidelity[1], r.fidelity[2], r.residual
                );
            })?;
            eprintln!("wrote {}", dir.join(pipeline::STUDENT_CKPT).display());
        }
        Command::Eval {
            teacher,
            student,
            steps,
            config,
            out,
        } => {
            let cfg = match config {
                Some(p) => parse_config(&p)?,
                None => {
                    let mut c = ExperimentConfig::default();
                    c.apply_seed_env()?;
                    c
                }
            };
            let teacher = pipeline::load(&teacher)?;
            let student = pipeline::load(&student)?;
            let table = pipeline::eval_table(&cfg, &teacher, &student, &steps)?;
            match out {
                Some(p) => write(&p, &table)?,
                None => print!("{table}"),
            }
        }
        Command::Sample {
            ckpt,
            steps,
            count,
            seed,
            shift,
            guidance,
            out,
        } => {
            let model = pipeline::load(&ckpt)?;
            let req = SampleRequest {
                steps,
                count,
                seed,
                shift,
                guidance,
            };
            let points = pipeline::sample_points(&model, &req)?;
            match out.extension().and_then(|e| e.to_str()) {
                Some("csv") => write(&out, &pipeline::points_csv(&points))?,
                Some("svg") => {
                    let series = [scfm_experiment::plot::Series::new(
                        format!("{steps}-step samples"),
                        points.iter().map(|(p, _)| *p).collect(),
                    )];
                    write(&out, &scfm_experiment::plot::scatter_svg("samples", &series))?
                }
                _ => return Err(ExperimentError::Config("--out must end in .csv or .svg".into())),
            }
        }
        Command::Plot {
            config,
            teacher,
            student,
            metrics,
            out_dir,
        } => {
            let cfg = parse_config(&config)?;
            let teacher = pipeline::load(&teacher)?;
            let student = student.as_deref().map(pipeline::load).transpose()?;
            let log = match metrics {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| ExperimentError::Io {
                        path: p.display().to_string(),
                        source: e,
                    })?;
                    Some(MetricsLog::from_csv(&text)?)
                }
                None => None,
            };
            for p in pipeline::plot(&cfg, &teacher, student.as_ref(), log.as_ref(), &out_dir)? {
                eprintln!("wrote {}", p.display());
            }
        }
        Command::GradCheck {
            probes,
            seed,
            tolerance,
        } => {
            let report = pipeline::grad_check(probes, seed, tolerance)?;
            for (i, p) in report.probes.iter().enumerate() {
                println!(
                    "probe {i:3}: base {:.3e} adapter {:.3e} input {:.3e} ({} coordinates)",
                    p.base, p.adapter, p.input, p.coordinates
                );
            }
            let verdict = if report.passed() { "PASS" } else { "FAIL" };
            println!("{verdict}: worst relative error {:.3e} (tolerance {tolerance:.1e})", report.worst());
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
