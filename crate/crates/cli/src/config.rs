//! Experiment configuration files.
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! Every key must be known; a typo is an error, never a silent default.
//! Relative paths are resolved against the directory holding the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fnv::FnvHasher;
use std::hash::Hasher;
use unlearn_core::engine::SupConfig;
use unlearn_core::{LabelSplit, LrDecay, Method, RelearnConfig, ShadowConfig, TrainConfig};

use crate::CliError;

const SECTIONS: [&str; 5] = ["experiment", "data", "teacher", "unlearn", "eval"];

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Blobs {
        num_classes: usize,
        dim: usize,
        radius: f64,
        sigma: f64,
        train_per_class: usize,
        test_per_class: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub normalize: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub hidden: Vec<usize>,
    /// `seed` is replaced by the run seed.
    pub sup: SupConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlearnConfig {
    /// `seed` is replaced by the run seed.
    pub train: TrainConfig,
    pub forget: Vec<usize>,
    pub noise_dim: usize,
    pub generator_hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub relearn: RelearnConfig,
    pub shadow: ShadowConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub forget_sets: Vec<Vec<usize>>,
    pub parallel: bool,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub unlearn: UnlearnConfig,
    pub eval: EvalConfig,
}

struct Entry {
    value: String,
    line: usize,
}

struct Section<'a> {
    name: &'static str,
    origin: &'a str,
    entries: BTreeMap<String, Entry>,
}

impl Section<'_> {
    fn raw(&mut self, key: &str) -> Option<Entry> {
        self.entries.remove(key)
    }

    fn bad(&self, key: &str, e: &Entry, why: impl std::fmt::Display) -> CliError {
        CliError::Usage(format!(
            "{}:{}: [{}] {key} = {:?}: {why}",
            self.origin, e.line, self.name, e.value
        ))
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|err| self.bad(key, &e, err)),
        }
    }

    fn or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(e) => parse_list(&e.value).map(Some).map_err(|err| self.bad(key, &e, err)),
        }
    }

    fn path(&mut self, key: &str, base: &Path) -> Result<PathBuf, CliError> {
        let e = self
            .raw(key)
            .ok_or_else(|| CliError::Usage(format!("{}: [{}] missing required key {key}", self.origin, self.name)))?;
        let p = base.join(&e.value);
        if !p.exists() {
            return Err(self.bad(key, &e, format!("{} does not exist", p.display())));
        }
        Ok(p)
    }

    fn finish(self) -> Result<(), CliError> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((k, e)) => Err(CliError::Usage(format!(
                "{}:{}: unknown key {k:?} in [{}]",
                self.origin, e.line, self.name
            ))),
        }
    }
}

/// Comma-separated values; empty input is an empty list.
pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| format!("{:?}: {e}", p.trim())))
        .collect()
}

/// `"3"` or `"1,2"` into sorted, deduplicated class indices.
pub fn parse_classes(s: &str) -> Result<Vec<usize>, CliError> {
    let mut v: Vec<usize> = parse_list(s).map_err(|e| CliError::Usage(format!("bad class list: {e}")))?;
    v.sort_unstable();
    v.dedup();
    Ok(v)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, &path.display().to_string(), base)
    }

    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<Self, CliError> {
        let mut sections: BTreeMap<&'static str, BTreeMap<String, Entry>> =
            SECTIONS.iter().map(|&s| (s, BTreeMap::new())).collect();
        let mut current: Option<&'static str> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                current = Some(
                    SECTIONS
                        .iter()
                        .copied()
                        .find(|&s| s == name)
                        .ok_or_else(|| CliError::Usage(format!("{origin}:{line_no}: unknown section [{name}]")))?,
                );
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{line_no}: expected `key = value`")))?;
            let sec = current
                .ok_or_else(|| CliError::Usage(format!("{origin}:{line_no}: key outside of any [section]")))?;
            let key = key.trim().to_string();
            let entry = Entry {
                value: value.trim().to_string(),
                line: line_no,
            };
            let map = sections.get_mut(sec).expect("known section");
            if let Some(prev) = map.get(&key) {
                return Err(CliError::Usage(format!(
                    "{origin}:{line_no}: duplicate key {key:?} (first set on line {})",
                    prev.line
                )));
            }
            map.insert(key, entry);
        }
        let mut take = |name: &'static str| Section {
            name,
            origin,
            entries: sections.remove(name).unwrap_or_default(),
        };

        let mut s = take("data");
        let kind: String = s.or("source", "blobs".to_string())?;
        let source = match kind.as_str() {
            "blobs" => DataSource::Blobs {
                num_classes: s.or("num_classes", 5)?,
                dim: s.or("dim", 2)?,
                radius: s.or("radius", 3.0)?,
                sigma: s.or("sigma", 0.5)?,
                train_per_class: s.or("train_per_class", 400)?,
                test_per_class: s.or("test_per_class", 200)?,
            },
            "idx" => DataSource::Idx {
                train_images: s.path("train_images", base)?,
                train_labels: s.path("train_labels", base)?,
                test_images: s.path("test_images", base)?,
                test_labels: s.path("test_labels", base)?,
            },
            other => {
                return Err(CliError::Usage(format!(
                    "{origin}: [data] source must be blobs or idx, got {other:?}"
                )))
            }
        };
        let data = DataConfig {
            source,
            normalize: s.or("normalize", false)?,
        };
        s.finish()?;

        let mut s = take("teacher");
        let sd = SupConfig::default();
        let teacher = TeacherConfig {
            hidden: s.list("hidden")?.unwrap_or_else(|| vec![32, 32]),
            sup: SupConfig {
                epochs: s.or("epochs", sd.epochs)?,
                batch_size: s.or("batch_size", sd.batch_size)?,
                lr: s.or("lr", sd.lr)?,
                momentum: s.or("momentum", sd.momentum)?,
                seed: 0,
            },
        };
        s.finish()?;

        let mut s = take("unlearn");
        let td = TrainConfig::default();
        let method: Method = match s.raw("method") {
            None => td.method,
            Some(e) => e.value.parse().map_err(|err| s.bad("method", &e, err))?,
        };
        let train = TrainConfig {
            epochs: s.or("epochs", td.epochs)?,
            loops_per_epoch: s.or("loops_per_epoch", td.loops_per_epoch)?,
            generator_steps: s.or("generator_steps", td.generator_steps)?,
            student_steps: s.or("student_steps", td.student_steps)?,
            generator_lr: s.or("generator_lr", td.generator_lr)?,
            student_lr: s.or("student_lr", td.student_lr)?,
            student_momentum: s.or("student_momentum", td.student_momentum)?,
            batch_size: s.or("batch_size", td.batch_size)?,
            lr_decay: LrDecay {
                milestones: s.list("milestones")?.unwrap_or(td.lr_decay.milestones),
                gamma: s.or("gamma", td.lr_decay.gamma)?,
            },
            seed: 0,
            method,
            delta: s.get("delta")?,
            balance_weight: s.or("balance_weight", td.balance_weight)?,
        };
        train.validate()?;
        let forget = match s.raw("forget_classes") {
            None => vec![0],
            Some(e) => parse_classes(&e.value).map_err(|err| s.bad("forget_classes", &e, err))?,
        };
        let unlearn = UnlearnConfig {
            train,
            forget,
            noise_dim: s.or("noise_dim", 8)?,
            generator_hidden: s.list("generator_hidden")?.unwrap_or_else(|| vec![32]),
        };
        s.finish()?;

        let mut s = take("eval");
        let rd = RelearnConfig::default();
        let sh = ShadowConfig::default();
        let eval = EvalConfig {
            relearn: RelearnConfig {
                lr: s.or("relearn_lr", rd.lr)?,
                max_steps: s.or("relearn_max_steps", rd.max_steps)?,
                margin: s.or("margin", rd.margin)?,
                eval_every: s.or("eval_every", rd.eval_every)?,
                batch_size: s.or("relearn_batch_size", rd.batch_size)?,
                seed: 0,
            },
            shadow: ShadowConfig {
                n_shadow: s.or("n_shadow", sh.n_shadow)?,
                hidden_dims: s.list("shadow_hidden")?.unwrap_or(sh.hidden_dims),
                sup: teacher.sup.clone(),
                attack_hidden: s.or("attack_hidden", sh.attack_hidden)?,
                attack_epochs: s.or("attack_epochs", sh.attack_epochs)?,
                attack_lr: s.or("attack_lr", sh.attack_lr)?,
                seed: 0,
            },
        };
        s.finish()?;

        let mut s = take("experiment");
        let output_dir = base.join(s.or("output_dir", "out".to_string())?);
        let seeds = s.list("seeds")?.unwrap_or_else(|| vec![1]);
        let methods = match s.raw("methods") {
            None => vec![method],
            Some(e) => parse_list::<Method>(&e.value).map_err(|err| s.bad("methods", &e, err))?,
        };
        let forget_sets = match s.raw("forget_sets") {
            None => vec![unlearn.forget.clone()],
            Some(e) => e
                .value
                .split(';')
                .map(parse_classes)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|err| s.bad("forget_sets", &e, err))?,
        };
        let parallel = s.or("parallel", false)?;
        s.finish()?;

        if seeds.is_empty() || methods.is_empty() || forget_sets.is_empty() {
            return Err(CliError::Usage(format!(
                "{origin}: seeds, methods and forget_sets must be non-empty"
            )));
        }
        Ok(Self {
            output_dir,
            seeds,
            methods,
            forget_sets,
            parallel,
            data,
            teacher,
            unlearn,
            eval,
        })
    }

    /// Output directory after the `ULRN_OUT` override.
    pub fn out_dir(&self) -> PathBuf {
        match std::env::var_os("ULRN_OUT") {
            Some(p) if !p.is_empty() => PathBuf::from(p),
            _ => self.output_dir.clone(),
        }
    }

    pub fn split(&self, forget: &[usize], num_classes: usize) -> Result<LabelSplit, CliError> {
        LabelSplit::new(num_classes, forget.iter().copied()).map_err(|e| CliError::Usage(e.to_string()))
    }

    /// Everything that determines a gold retrain, one `key=value` per line.
    pub fn gold_canonical(&self, forget: &[usize], seed: u64) -> String {
        let mut lines = vec![format!("data.normalize={}", self.data.normalize)];
        match &self.data.source {
            DataSource::Blobs {
                num_classes,
                dim,
                radius,
                sigma,
                train_per_class,
                test_per_class,
            } => {
                lines.push("data.source=blobs".into());
                lines.push(format!("data.num_classes={num_classes}"));
                lines.push(format!("data.dim={dim}"));
                lines.push(format!("data.radius={radius:?}"));
                lines.push(format!("data.sigma={sigma:?}"));
                lines.push(format!("data.train_per_class={train_per_class}"));
                lines.push(format!("data.test_per_class={test_per_class}"));
            }
            DataSource::Idx {
                train_images,
                train_labels,
                ..
            } => {
                lines.push("data.source=idx".into());
                lines.push(format!("data.train_images={}", train_images.display()));
                lines.push(format!("data.train_labels={}", train_labels.display()));
            }
        }
        let t = &self.teacher;
        lines.push(format!("teacher.hidden={:?}", t.hidden));
        lines.push(format!("teacher.epochs={}", t.sup.epochs));
        lines.push(format!("teacher.batch_size={}", t.sup.batch_size));
        lines.push(format!("teacher.lr={:?}", t.sup.lr));
        lines.push(format!("teacher.momentum={:?}", t.sup.momentum));
        lines.push(format!("forget={forget:?}"));
        lines.push(format!("seed={seed}"));
        lines.sort();
        lines.join("\n")
    }

    pub fn gold_hash(&self, forget: &[usize], seed: u64) -> u64 {
        let mut h = FnvHasher::default();
        h.write(self.gold_canonical(forget, seed).as_bytes());
        h.finish()
    }
}
