use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use merlin_core::checks::run_gradcheck;
use merlin_core::config::RunConfig;
use merlin_core::data::{load_csv, Dataset, NormStats};
use merlin_core::eval::{evaluate_rates, evaluate_unfixed, MetricReport};
use merlin_core::io::atomic_write;
use merlin_core::train::{log_to_csv, train_student, train_teacher, Ablation, ModelBundle, TrainMode, TrainOutcome};
use merlin_core::{MerlinError, Result};

#[derive(Parser)]
#[command(name = "merlin", version, about = "Train and evaluate forecasters that tolerate missing inputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multivariate series as CSV.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a teacher on complete windows.
    TrainTeacher {
        #[command(flatten)]
        io: TrainIo,
        /// Fraction of training cells removed before training.
        #[arg(long)]
        premask: Option<f64>,
    },
    /// Train a student on masked views, distilling from a teacher.
    TrainStudent {
        #[command(flatten)]
        io: TrainIo,
        /// Teacher checkpoint; ignored by the wo_kd ablation.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        mode: Option<TrainMode>,
        #[arg(long)]
        ablate: Option<Ablation>,
    },
    /// Report MAE, RMSE and MAPE on the test split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluate one fixed missing rate instead of all configured rates.
        #[arg(long, conflicts_with = "unfixed")]
        rate: Option<f64>,
        /// Split the test period into this many segments with random rates.
        #[arg(long)]
        unfixed: Option<usize>,
        /// Also write the report as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Args)]
struct TrainIo {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch log; defaults to the checkpoint path with a .log.csv suffix.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &MerlinError) -> u8 {
    match err {
        MerlinError::Config(_) | MerlinError::Usage(_) => 2,
        _ => 1,
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let frame = cfg.data.synth.generate()?;
            frame.write_csv(&out)?;
            println!("wrote {} variables x {} steps to {}", frame.n_vars(), frame.len(), out.display());
        }
        Command::TrainTeacher { io, premask } => {
            let mut cfg = RunConfig::load(&io.config)?;
            if let Some(rate) = premask {
                cfg.data.premask_rate = rate;
            }
            cfg.validate()?;
            let data = prepare(&cfg, &io.data, None)?;
            let outcome = train_teacher(&data, &cfg.model, &cfg.trainer, &cfg.optimizer)?;
            finish_training(&io, &outcome)?;
        }
        Command::TrainStudent { io, teacher, mode, ablate } => {
            let mut cfg = RunConfig::load(&io.config)?;
            if let Some(m) = mode {
                cfg.trainer.mode = m;
            }
            if ablate.is_some() {
                cfg.trainer.ablation = ablate;
            }
            let needs_teacher = cfg.trainer.ablation.is_none_or(Ablation::needs_teacher);
            let teacher = if needs_teacher {
                let path = teacher.ok_or_else(|| MerlinError::Usage("--teacher is required unless ablating wo_kd".into()))?;
                let bundle = ModelBundle::load(&path)?;
                // The student sees the same incomplete training split as its teacher.
                cfg.data.premask_rate = bundle.premask_rate;
                Some(bundle)
            } else {
                None
            };
            cfg.validate()?;
            let data = prepare(&cfg, &io.data, None)?;
            let outcome = train_student(
                &data,
                teacher.as_ref().map(|t| &t.model),
                &cfg.model,
                &cfg.trainer,
                &cfg.optimizer,
                &cfg.merlin,
            )?;
            finish_training(&io, &outcome)?;
        }
        Command::Evaluate { config, student, data, rate, unfixed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            let bundle = ModelBundle::load(&student)?;
            cfg.model = bundle.model.config.clone();
            cfg.data.premask_rate = 0.0;
            if let Some(r) = rate {
                cfg.eval.rates = vec![r];
            }
            if let Some(n) = unfixed {
                cfg.eval.n_segments = n;
            }
            cfg.validate()?;
            let dataset = prepare(&cfg, &data, Some(&bundle.stats))?;
            let report = match unfixed {
                Some(_) => evaluate_unfixed(&bundle.model, &dataset, &cfg.eval)?,
                None => evaluate_rates(
                    &bundle.model,
                    &dataset.test,
                    &dataset.stats,
                    &dataset.fills,
                    &cfg.eval.rates,
                    &cfg.eval,
                )?,
            };
            emit_report(&report, out.as_deref())?;
        }
        Command::Gradcheck { seed, inject_fault } => {
            let report = run_gradcheck(seed, inject_fault)?;
            for op in &report.ops {
                let status = if op.passed() { "ok" } else { "FAIL" };
                println!("{:<22} cases={:<3} max_rel_err={:.3e} {status}", op.name, op.cases, op.max_rel_err);
            }
            if !report.passed() {
                let names: Vec<&str> = report.failures().iter().map(|o| o.name.as_str()).collect();
                eprintln!("gradient check failed for: {}", names.join(", "));
                return Ok(ExitCode::from(1));
            }
            println!("all {} ops passed", report.ops.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn prepare(cfg: &RunConfig, path: &Path, stats: Option<&NormStats>) -> Result<Dataset> {
    let frame = load_csv(path, cfg.data.steps_per_day, cfg.data.start_dow, 1)?;
    if frame.n_vars() != cfg.model.n_vars {
        return Err(MerlinError::Config(format!(
            "data has {} variables, model.n_vars is {}",
            frame.n_vars(),
            cfg.model.n_vars
        )));
    }
    Dataset::prepare_with(&frame, &cfg.data, cfg.model.n_history, cfg.model.n_future, cfg.trainer.seed, stats)
}

fn finish_training(io: &TrainIo, outcome: &TrainOutcome) -> Result<()> {
    outcome.best.save(&io.out)?;
    let log_path = io.log.clone().unwrap_or_else(|| {
        let mut p = io.out.clone().into_os_string();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    atomic_write(&log_path, log_to_csv(&outcome.log).as_bytes())?;
    println!(
        "best epoch {} (val MAE {:.4}); checkpoint {}, log {}",
        outcome.best_epoch,
        outcome.best_val_mae,
        io.out.display(),
        log_path.display()
    );
    Ok(())
}

fn emit_report(report: &MetricReport, out: Option<&Path>) -> Result<()> {
    let csv = report.to_csv();
    match out {
        Some(path) => atomic_write(path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    println!("{}", report.to_table());
    Ok(())
}
