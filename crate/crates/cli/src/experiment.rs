//! Running experiments: data, teacher and gold checkpoints, unlearning runs,
//! evaluation, and the sweep over (forget set, method, seed).

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use unlearn_core::data::{self, NormStats};
use unlearn_core::engine::{self, UnlearnOutcome};
use unlearn_core::eval::{self, RunMetrics};
use unlearn_core::{
    BlobSpec, Checkpoint, ClassifierSpec, Dataset, GeneratorSpec, LabelSplit, Method, ParameterSet, Split, StepLog,
};

use crate::config::{DataSource, ExperimentConfig};
use crate::CliError;

pub const STEPS_HEADER: &str = "step,epoch,loop,loss_g,loss_s,n_forget_synth,n_filtered,kept,H_B,wall_ms";
pub const RUNS_HEADER: &str = "event,method,forget,seed,train_acc,test_acc,A_f,A_r,MIA_I,MIA_II,AIN,file";
const METRICS_HEADER: &str = "method,forget,seed,A_f,A_r,MIA_I,MIA_II,AIN";

pub struct RunData {
    pub train: Dataset,
    pub test: Dataset,
}

impl RunData {
    pub fn load(cfg: &ExperimentConfig, seed: u64) -> Result<Self, CliError> {
        let (mut train, mut test) = match &cfg.data.source {
            DataSource::Blobs {
                num_classes,
                dim,
                radius,
                sigma,
                train_per_class,
                test_per_class,
            } => data::make_blobs(&BlobSpec::circle(
                *num_classes,
                *dim,
                *radius,
                *sigma,
                *train_per_class,
                *test_per_class,
                seed,
            ))?,
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let mut train = data::load_idx(train_images, train_labels, Split::Train)?;
                let mut test = data::load_idx(test_images, test_labels, Split::Test)?;
                let k = train.num_classes.max(test.num_classes);
                train.num_classes = k;
                test.num_classes = k;
                let stats = NormStats::fit(&train.x);
                train.stats = Some(stats.clone());
                test.stats = Some(stats);
                (train, test)
            }
        };
        if train.dim() != test.dim() {
            return Err(CliError::Usage(format!(
                "train features have {} dims but test features have {}",
                train.dim(),
                test.dim()
            )));
        }
        if cfg.data.normalize {
            train = train.normalized()?;
            test = test.normalized()?;
        }
        Ok(Self { train, test })
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    pub fn classifier_spec(&self, cfg: &ExperimentConfig) -> Result<ClassifierSpec, CliError> {
        Ok(ClassifierSpec::new(
            self.train.dim(),
            cfg.teacher.hidden.clone(),
            self.num_classes(),
        )?)
    }

    /// Generator outputs span the observed training feature range.
    pub fn generator_spec(&self, cfg: &ExperimentConfig) -> GeneratorSpec {
        let (lo, hi) = self.train.feature_range();
        GeneratorSpec {
            noise_dim: cfg.unlearn.noise_dim,
            hidden_dims: cfg.unlearn.generator_hidden.clone(),
            output_dim: self.train.dim(),
            lo,
            hi,
        }
    }
}

/// `ISPF_f3_s1`, `GKT_f1-2_s7`.
pub fn run_stem(method: Method, forget: &[usize], seed: u64) -> String {
    format!("{}_f{}_s{seed}", method.name(), classes_tag(forget))
}

pub fn classes_tag(forget: &[usize]) -> String {
    forget.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("-")
}

/// Loads a checkpoint; a missing file is a usage error naming the path.
pub fn load_params(path: &Path) -> Result<ParameterSet, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path)
        .and_then(|c| c.to_params())
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Writes atomically and returns the parameters as they read back from disk.
pub fn save_params(params: &ParameterSet, path: &Path) -> Result<ParameterSet, CliError> {
    let ck = Checkpoint::from_params(params);
    let bytes = ck.to_bytes()?;
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, &bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(Checkpoint::from_bytes(&bytes)?.to_params()?)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn check_spec(params: &ParameterSet, expected: &ClassifierSpec, what: &str) -> Result<(), CliError> {
    let got = ClassifierSpec::infer(params)?;
    if &got != expected {
        return Err(CliError::Usage(format!(
            "{what} has layers {:?} -> {:?} -> {} but the experiment expects {:?} -> {:?} -> {}",
            got.input_dim, got.hidden_dims, got.num_classes, expected.input_dim, expected.hidden_dims, expected.num_classes
        )));
    }
    Ok(())
}

pub struct TeacherSummary {
    pub params: ParameterSet,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub fn train_teacher(cfg: &ExperimentConfig, data: &RunData, seed: u64, path: &Path) -> Result<TeacherSummary, CliError> {
    let spec = data.classifier_spec(cfg)?;
    let sup = engine::SupConfig {
        seed,
        ..cfg.teacher.sup.clone()
    };
    let trained = engine::train_teacher(&data.train, None, &spec, &sup)?;
    let params = save_params(&trained.params, path)?;
    Ok(TeacherSummary {
        train_accuracy: engine::plain_accuracy(&params, &spec, &data.train)?,
        test_accuracy: engine::plain_accuracy(&params, &spec, &data.test)?,
        params,
    })
}

/// Reuses `path` when present, otherwise trains and saves a teacher there.
pub fn ensure_teacher(cfg: &ExperimentConfig, data: &RunData, seed: u64, path: &Path) -> Result<ParameterSet, CliError> {
    if path.exists() {
        let params = load_params(path)?;
        check_spec(&params, &data.classifier_spec(cfg)?, "teacher")?;
        return Ok(params);
    }
    info!("training teacher for seed {seed} -> {}", path.display());
    Ok(train_teacher(cfg, data, seed, path)?.params)
}

pub fn gold_path(cfg: &ExperimentConfig, out: &Path, forget: &[usize], seed: u64) -> PathBuf {
    out.join(format!("gold_{:016x}.ulrn", cfg.gold_hash(forget, seed)))
}

/// Gold retrain, cached under a hash of everything it depends on.
pub fn ensure_gold(
    cfg: &ExperimentConfig,
    data: &RunData,
    out: &Path,
    forget: &[usize],
    seed: u64,
) -> Result<ParameterSet, CliError> {
    let path = gold_path(cfg, out, forget, seed);
    if path.exists() {
        return load_params(&path);
    }
    info!("retraining gold model for forget {forget:?} seed {seed} -> {}", path.display());
    let spec = data.classifier_spec(cfg)?;
    let split = cfg.split(forget, data.num_classes())?;
    let sup = engine::SupConfig {
        seed,
        ..cfg.teacher.sup.clone()
    };
    let gold = engine::retrain_gold(&data.train, None, &split, &spec, &sup)?;
    save_params(&gold.params, &path)
}

pub fn unlearn(
    cfg: &ExperimentConfig,
    data: &RunData,
    teacher: &ParameterSet,
    method: Method,
    split: &LabelSplit,
    seed: u64,
) -> Result<UnlearnOutcome, CliError> {
    let train_cfg = unlearn_core::TrainConfig {
        method,
        seed,
        ..cfg.unlearn.train.clone()
    };
    Ok(engine::run_unlearning(teacher, &train_cfg, split, &data.generator_spec(cfg))?)
}

pub fn steps_csv(logs: &[StepLog]) -> String {
    let mut s = String::from(STEPS_HEADER);
    s.push('\n');
    for l in logs {
        let loss_s = l.student_loss.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{:.3}",
            l.step, l.epoch, l.loop_idx, l.generator_loss, loss_s, l.n_forget_synth, l.n_filtered, l.kept, l.h_b, l.wall_ms
        );
    }
    s
}

/// A_f, A_r, MIA-I, MIA-II and AIN for one unlearned model.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    cfg: &ExperimentConfig,
    data: &RunData,
    student: &ParameterSet,
    teacher: &ParameterSet,
    gold: &ParameterSet,
    split: &LabelSplit,
    seed: u64,
    label: &str,
) -> Result<RunMetrics, CliError> {
    let spec = data.classifier_spec(cfg)?;
    check_spec(student, &spec, "student")?;
    check_spec(teacher, &spec, "teacher")?;
    check_spec(gold, &spec, "gold model")?;
    let forget = split.forget_classes();
    let retain = split.retain_classes();
    let forget_train = data.train.restrict(&forget)?;
    let forget_test = data.test.restrict(&forget)?;
    let retain_train = data.train.restrict(&retain)?;
    let retain_test = data.test.restrict(&retain)?;

    let mia_i = eval::mia_i(student, &spec, &forget_train, &retain_train, &retain_test)?;
    if mia_i.degenerate {
        warn!("{label} seed {seed}: MIA-I fit set degenerate");
    }
    let shadow = eval::ShadowConfig {
        seed,
        ..cfg.eval.shadow.clone()
    };
    let mia_ii = eval::mia_ii(student, &spec, &data.test, &forget_train, &forget_test, &shadow)?;
    let relearn = eval::RelearnConfig {
        seed,
        ..cfg.eval.relearn.clone()
    };
    let ain = eval::ain(student, gold, teacher, &spec, &data.train, &data.test, split, &relearn)?;
    Ok(RunMetrics {
        method: label.to_string(),
        seed,
        a_f: eval::accuracy(student, &spec, &data.test, &forget)?,
        a_r: eval::accuracy(student, &spec, &data.test, &retain)?,
        mia_i: mia_i.percent,
        mia_ii: mia_ii.f1,
        ain,
    })
}

/// One line of `runs.csv`; `None` fields are left empty.
#[derive(Clone, Debug, Default)]
pub struct RunsRow {
    pub event: String,
    pub method: String,
    pub forget: String,
    pub seed: u64,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub a_f: Option<f64>,
    pub a_r: Option<f64>,
    pub mia_i: Option<f64>,
    pub mia_ii: Option<f64>,
    pub ain: Option<f64>,
    pub file: String,
}

impl RunsRow {
    pub fn from_metrics(event: &str, m: &RunMetrics, forget: &[usize], file: &str) -> Self {
        Self {
            event: event.into(),
            method: m.method.clone(),
            forget: classes_tag(forget),
            seed: m.seed,
            a_f: Some(m.a_f),
            a_r: Some(m.a_r),
            mia_i: Some(m.mia_i),
            mia_ii: Some(m.mia_ii),
            ain: Some(m.ain),
            file: file.into(),
            ..Self::default()
        }
    }

    fn line(&self) -> String {
        let f = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.event,
            self.method,
            self.forget,
            self.seed,
            f(self.train_acc),
            f(self.test_acc),
            f(self.a_f),
            f(self.a_r),
            f(self.mia_i),
            f(self.mia_ii),
            f(self.ain),
            self.file
        )
    }
}

pub fn append_runs(out: &Path, rows: &[RunsRow]) -> Result<(), CliError> {
    if rows.is_empty() {
        return Ok(());
    }
    let path = out.join("runs.csv");
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&path)?;
    if fresh {
        writeln!(f, "{RUNS_HEADER}")?;
    }
    for r in rows {
        writeln!(f, "{}", r.line())?;
    }
    Ok(())
}

fn metrics_text(m: &RunMetrics, forget: &[usize]) -> String {
    // `{}` on f64 prints the shortest exact representation, so a resumed
    // sweep aggregates bit-identical values.
    format!(
        "{METRICS_HEADER}\n{},{},{},{},{},{},{},{}\n",
        m.method,
        classes_tag(forget),
        m.seed,
        m.a_f,
        m.a_r,
        m.mia_i,
        m.mia_ii,
        m.ain
    )
}

fn read_metrics(path: &Path) -> Result<RunMetrics, CliError> {
    let text = fs::read_to_string(path)?;
    let bad = || CliError::Runtime(format!("{}: malformed metrics file", path.display()));
    let row = text.lines().nth(1).ok_or_else(bad)?;
    let cols: Vec<&str> = row.split(',').collect();
    if cols.len() != 8 {
        return Err(bad());
    }
    let num = |i: usize| cols[i].parse::<f64>().map_err(|_| bad());
    Ok(RunMetrics {
        method: cols[0].to_string(),
        seed: cols[2].parse().map_err(|_| bad())?,
        a_f: num(3)?,
        a_r: num(4)?,
        mia_i: num(5)?,
        mia_ii: num(6)?,
        ain: num(7)?,
    })
}

fn par_map<T: Sync, R: Send>(parallel: bool, items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    if parallel {
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Job {
    pub forget: Vec<usize>,
    pub method: Method,
    pub seed: u64,
}

pub struct SweepSummary {
    pub runs: Vec<RunMetrics>,
    pub failures: Vec<(String, String)>,
    /// Runs whose metrics file already existed.
    pub skipped: usize,
    pub report: PathBuf,
}

pub fn sweep_jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    let mut jobs = Vec::new();
    for forget in &cfg.forget_sets {
        for &method in &cfg.methods {
            for &seed in &cfg.seeds {
                jobs.push(Job {
                    forget: forget.clone(),
                    method,
                    seed,
                });
            }
        }
    }
    jobs
}

/// Every (forget set, method, seed) combination, then `report.csv`.
///
/// A run whose metrics file exists is not repeated. A failing run is
/// recorded in `failures.csv` and left out of the report.
pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepSummary, CliError> {
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let datasets: Vec<(u64, RunData)> = cfg
        .seeds
        .iter()
        .map(|&s| RunData::load(cfg, s).map(|d| (s, d)))
        .collect::<Result<_, _>>()?;
    let data_for = |seed: u64| &datasets.iter().find(|(s, _)| *s == seed).expect("seed loaded").1;
    for d in &datasets {
        for forget in &cfg.forget_sets {
            cfg.split(forget, d.1.num_classes())?;
        }
    }

    let teachers: Vec<Result<ParameterSet, CliError>> = par_map(cfg.parallel, &cfg.seeds, |&seed| {
        ensure_teacher(cfg, data_for(seed), seed, &out.join(format!("teacher_s{seed}.ulrn")))
    });
    type GoldKey = (u64, Vec<usize>);
    let golds: Vec<(GoldKey, Result<ParameterSet, CliError>)> = {
        let keys: Vec<GoldKey> = cfg
            .seeds
            .iter()
            .flat_map(|&s| cfg.forget_sets.iter().map(move |f| (s, f.clone())))
            .collect();
        let vals = par_map(cfg.parallel, &keys, |(seed, forget)| {
            ensure_gold(cfg, data_for(*seed), &out, forget, *seed)
        });
        keys.into_iter().zip(vals).collect()
    };

    let multi_forget = cfg.forget_sets.len() > 1;
    let jobs = sweep_jobs(cfg);
    let results = par_map(cfg.parallel, &jobs, |job| -> Result<(RunMetrics, Option<RunsRow>), CliError> {
        let stem = run_stem(job.method, &job.forget, job.seed);
        let metrics_path = out.join(format!("{stem}.metrics.csv"));
        if metrics_path.exists() {
            return Ok((read_metrics(&metrics_path)?, None));
        }
        let data = data_for(job.seed);
        let teacher_idx = cfg.seeds.iter().position(|&s| s == job.seed).expect("seed");
        let teacher = teachers[teacher_idx].as_ref().map_err(|e| CliError::Runtime(format!("teacher: {e}")))?;
        let gold = golds
            .iter()
            .find(|((s, f), _)| *s == job.seed && *f == job.forget)
            .expect("gold prepared")
            .1
            .as_ref()
            .map_err(|e| CliError::Runtime(format!("gold retrain: {e}")))?;
        let split = cfg.split(&job.forget, data.num_classes())?;
        let outcome = unlearn(cfg, data, teacher, job.method, &split, job.seed)?;
        let student_file = format!("{stem}.ulrn");
        let student = save_params(&outcome.student, &out.join(&student_file))?;
        fs::write(out.join(format!("{stem}_steps.csv")), steps_csv(&outcome.logs))?;
        let label = if multi_forget {
            format!("{}_f{}", job.method.name(), classes_tag(&job.forget))
        } else {
            job.method.name().to_string()
        };
        let m = evaluate(cfg, data, &student, teacher, gold, &split, job.seed, &label)?;
        fs::write(&metrics_path, metrics_text(&m, &job.forget))?;
        info!(
            "{stem}: A_f {:.2} A_r {:.2} MIA_I {:.2} MIA_II {:.2} AIN {:.3}",
            m.a_f, m.a_r, m.mia_i, m.mia_ii, m.ain
        );
        let row = RunsRow::from_metrics("sweep", &m, &job.forget, &student_file);
        Ok((m, Some(row)))
    });

    let mut runs = Vec::new();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut skipped = 0;
    for (job, res) in jobs.iter().zip(results) {
        match res {
            Ok((m, row)) => {
                match row {
                    Some(r) => rows.push(r),
                    None => skipped += 1,
                }
                runs.push(m);
            }
            Err(e) => {
                let stem = run_stem(job.method, &job.forget, job.seed);
                warn!("{stem} failed: {e}");
                failures.push((stem, e.to_string()));
            }
        }
    }
    append_runs(&out, &rows)?;
    let failures_path = out.join("failures.csv");
    if failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path)?;
        }
    } else {
        let mut s = String::from("run,error\n");
        for (stem, e) in &failures {
            let _ = writeln!(s, "{stem},{}", e.replace([',', '\n'], ";"));
        }
        fs::write(&failures_path, s)?;
    }
    let report = out.join("report.csv");
    fs::write(&report, eval::report_csv(&eval::assemble_report(&runs)))?;
    Ok(SweepSummary {
        runs,
        failures,
        skipped,
        report,
    })
}
