use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unlearn_cli::config::parse_classes;
use unlearn_cli::experiment::{self as exp, RunData, RunsRow};
use unlearn_cli::{CliError, ExperimentConfig};
use unlearn_core::eval::{self, REPORT_HEADER};
use unlearn_core::Method;

#[derive(Parser)]
#[command(name = "unlearn", version, about = "Data-free class unlearning experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the original model and write <out>/teacher.ulrn.
    TrainTeacher {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distill an unlearned student from the teacher.
    Unlearn {
        config: PathBuf,
        #[arg(long)]
        method: Option<String>,
        /// Comma-separated forgetting classes, e.g. "3" or "1,2".
        #[arg(long)]
        forget: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Score a student against the gold retrain and print a report row.
    Eval {
        config: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        forget: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Method column of the printed row; defaults to the file stem.
        #[arg(long)]
        label: Option<String>,
    },
    /// Run every configured (forget set, method, seed) and write report.csv.
    Sweep { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn forget_of(cfg: &ExperimentConfig, flag: Option<&str>) -> Result<Vec<usize>, CliError> {
    match flag {
        Some(s) => parse_classes(s),
        None => Ok(cfg.unlearn.forget.clone()),
    }
}

fn prepare(config: &Path, seed: Option<u64>) -> Result<(ExperimentConfig, u64, PathBuf), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let out = cfg.out_dir();
    fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    Ok((cfg, seed, out))
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::TrainTeacher { config, seed } => {
            let (cfg, seed, out) = prepare(&config, seed)?;
            let data = RunData::load(&cfg, seed)?;
            let path = out.join("teacher.ulrn");
            let t = exp::train_teacher(&cfg, &data, seed, &path)?;
            exp::append_runs(
                &out,
                &[RunsRow {
                    event: "teacher".into(),
                    seed,
                    train_acc: Some(t.train_accuracy),
                    test_acc: Some(t.test_accuracy),
                    file: "teacher.ulrn".into(),
                    ..RunsRow::default()
                }],
            )?;
            println!(
                "teacher seed={seed} train_acc={:.2} test_acc={:.2} -> {}",
                t.train_accuracy,
                t.test_accuracy,
                path.display()
            );
        }
        Command::Unlearn {
            config,
            method,
            forget,
            seed,
            teacher,
        } => {
            let (cfg, seed, out) = prepare(&config, seed)?;
            let method: Method = match method {
                Some(m) => m.parse()?,
                None => cfg.unlearn.train.method,
            };
            let forget = forget_of(&cfg, forget.as_deref())?;
            let data = RunData::load(&cfg, seed)?;
            let split = cfg.split(&forget, data.num_classes())?;
            let teacher = exp::load_params(&teacher.unwrap_or_else(|| out.join("teacher.ulrn")))?;
            let outcome = exp::unlearn(&cfg, &data, &teacher, method, &split, seed)?;
            let file = format!("{}.ulrn", exp::run_stem(method, &forget, seed));
            let student = exp::save_params(&outcome.student, &out.join(&file))?;
            fs::write(out.join(format!("{}_steps.csv", method.name())), exp::steps_csv(&outcome.logs))?;
            let spec = data.classifier_spec(&cfg)?;
            let a_f = eval::accuracy(&student, &spec, &data.test, &split.forget_classes())?;
            let a_r = eval::accuracy(&student, &spec, &data.test, &split.retain_classes())?;
            exp::append_runs(
                &out,
                &[RunsRow {
                    event: "unlearn".into(),
                    method: method.name().into(),
                    forget: exp::classes_tag(&forget),
                    seed,
                    a_f: Some(a_f),
                    a_r: Some(a_r),
                    file: file.clone(),
                    ..RunsRow::default()
                }],
            )?;
            println!("{method} forget={forget:?} seed={seed} A_f={a_f:.2} A_r={a_r:.2} -> {file}");
        }
        Command::Eval {
            config,
            student,
            forget,
            seed,
            teacher,
            label,
        } => {
            let (cfg, seed, out) = prepare(&config, seed)?;
            let student_params = exp::load_params(&student)?;
            let teacher = exp::load_params(&teacher.unwrap_or_else(|| out.join("teacher.ulrn")))?;
            let forget = forget_of(&cfg, forget.as_deref())?;
            let data = RunData::load(&cfg, seed)?;
            let split = cfg.split(&forget, data.num_classes())?;
            let gold = exp::ensure_gold(&cfg, &data, &out, &forget, seed)?;
            let label = label.unwrap_or_else(|| {
                student
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "student".into())
            });
            let m = exp::evaluate(&cfg, &data, &student_params, &teacher, &gold, &split, seed, &label)?;
            let file = student.display().to_string();
            exp::append_runs(&out, &[RunsRow::from_metrics("eval", &m, &forget, &file)])?;
            println!("{REPORT_HEADER}");
            for row in eval::assemble_report(&[m]) {
                println!("{}", row.csv_row());
            }
        }
        Command::Sweep { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let summary = exp::sweep(&cfg)?;
            print!("{}", fs::read_to_string(&summary.report)?);
            eprintln!(
                "{} runs ({} reused), {} failed -> {}",
                summary.runs.len() + summary.failures.len(),
                summary.skipped,
                summary.failures.len(),
                summary.report.display()
            );
            if !summary.failures.is_empty() {
                return Err(CliError::Runtime(format!(
                    "{} runs failed; see failures.csv",
                    summary.failures.len()
                )));
            }
        }
    }
    Ok(())
}
