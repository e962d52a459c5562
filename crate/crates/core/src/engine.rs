//! Training loops: supervised teacher training, the gold retrain, and the
//! generator/student unlearning loop shared by every method.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::debug;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::filters::FilterConfig;
use crate::graph::Graph;
use crate::losses::{self, LabelSplit};
use crate::models::{self, Binding, ClassifierSpec, GeneratorSpec};
use crate::optim::{Optimizer, OptimizerSpec};
use crate::params::ParameterSet;
use crate::rng::{sample_noise, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Dfkd,
    BlockF,
    Gkt,
    Is,
    Pf,
    Ispf,
    Pd,
    PdIs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorLoss {
    Adversarial,
    InhibitedSynthesis,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudentTarget {
    Raw,
    PostFilter,
    ProbabilityRenorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterKind {
    None,
    PreFilter,
    BlockF,
}

/// The fixed (generator loss, student target, filter) triple of a method.
///
/// Only constructible from a [`Method`], so combinations outside the
/// method table cannot exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MethodSpec {
    method: Method,
    generator_loss: GeneratorLoss,
    student_target: StudentTarget,
    filter: FilterKind,
}

impl MethodSpec {
    pub fn method(&self) -> Method {
        self.method
    }

    pub fn generator_loss(&self) -> GeneratorLoss {
        self.generator_loss
    }

    pub fn student_target(&self) -> StudentTarget {
        self.student_target
    }

    pub fn filter(&self) -> FilterKind {
        self.filter
    }
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Dfkd,
        Method::BlockF,
        Method::Gkt,
        Method::Is,
        Method::Pf,
        Method::Ispf,
        Method::Pd,
        Method::PdIs,
    ];

    pub fn spec(self) -> MethodSpec {
        use FilterKind as F;
        use GeneratorLoss::*;
        use StudentTarget::*;
        let (generator_loss, student_target, filter) = match self {
            Method::Dfkd => (Adversarial, Raw, F::None),
            Method::BlockF => (Adversarial, Raw, F::BlockF),
            Method::Gkt => (Adversarial, Raw, F::PreFilter),
            Method::Is => (InhibitedSynthesis, Raw, F::PreFilter),
            Method::Pf => (Adversarial, PostFilter, F::None),
            Method::Ispf => (InhibitedSynthesis, PostFilter, F::None),
            Method::Pd => (Adversarial, ProbabilityRenorm, F::None),
            Method::PdIs => (InhibitedSynthesis, ProbabilityRenorm, F::None),
        };
        MethodSpec {
            method: self,
            generator_loss,
            student_target,
            filter,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Dfkd => "DFKD",
            Method::BlockF => "BlockF",
            Method::Gkt => "GKT",
            Method::Is => "IS",
            Method::Pf => "PF",
            Method::Ispf => "ISPF",
            Method::Pd => "PD",
            Method::PdIs => "PD_IS",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method {s:?}; valid methods: {}", valid.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrDecay {
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub loops_per_epoch: usize,
    pub generator_steps: usize,
    pub student_steps: usize,
    pub generator_lr: f64,
    pub student_lr: f64,
    pub student_momentum: f64,
    pub batch_size: usize,
    pub lr_decay: LrDecay,
    pub seed: u64,
    pub method: Method,
    /// PreFilter threshold; `None` means `0.1 / K`.
    pub delta: Option<f64>,
    pub balance_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            loops_per_epoch: 1,
            generator_steps: 1,
            student_steps: 10,
            generator_lr: 1e-3,
            student_lr: 0.05,
            student_momentum: 0.9,
            batch_size: 128,
            lr_decay: LrDecay {
                milestones: vec![45],
                gamma: 0.1,
            },
            seed: 0,
            method: Method::Ispf,
            delta: None,
            balance_weight: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("loops_per_epoch", self.loops_per_epoch),
            ("generator_steps", self.generator_steps),
            ("student_steps", self.student_steps),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.balance_weight.is_nan() || self.balance_weight < 0.0 {
            return Err(Error::Config("balance_weight must be >= 0".into()));
        }
        if self.lr_decay.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("lr milestones must be strictly increasing".into()));
        }
        if self.lr_decay.gamma.is_nan() || self.lr_decay.gamma <= 0.0 {
            return Err(Error::Config("lr decay gamma must be positive".into()));
        }
        Ok(())
    }

    pub fn filter(&self, num_classes: usize) -> Result<FilterConfig> {
        Ok(match self.method.spec().filter() {
            FilterKind::None => FilterConfig::None,
            FilterKind::BlockF => FilterConfig::BlockF,
            FilterKind::PreFilter => {
                FilterConfig::prefilter(self.delta.unwrap_or(FilterConfig::default_delta(num_classes)))?
            }
        })
    }
}

/// Diagnostics recorded after every student step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loop_idx: usize,
    pub generator_loss: f64,
    /// `None` when every sample was filtered and the update was skipped.
    pub student_loss: Option<f64>,
    pub class_counts: Vec<usize>,
    pub n_forget_synth: usize,
    pub n_filtered: usize,
    pub kept: usize,
    pub h_b: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Composition {
    pub counts: Vec<usize>,
    pub n_forget: usize,
}

/// Counts synthetic samples by the teacher's top class (ties to the lowest index).
pub fn synthesis_composition(teacher_probs: &Tensor, split: &LabelSplit) -> Composition {
    let mut counts = vec![0; teacher_probs.cols()];
    for c in teacher_probs.argmax_rows() {
        counts[c] += 1;
    }
    let n_forget = split.forget().map(|f| counts[f]).sum();
    Composition { counts, n_forget }
}

pub struct UnlearnOutcome {
    pub student: ParameterSet,
    pub generator: ParameterSet,
    pub logs: Vec<StepLog>,
}

/// Runs generator/student distillation from a frozen teacher.
///
/// Only the student ever sees a filtered or re-targeted batch; the
/// generator always scores against raw teacher probabilities.
pub fn run_unlearning(
    teacher: &ParameterSet,
    config: &TrainConfig,
    split: &LabelSplit,
    generator_spec: &GeneratorSpec,
) -> Result<UnlearnOutcome> {
    config.validate()?;
    let spec = ClassifierSpec::infer(teacher)?;
    if spec.num_classes != split.num_classes() {
        return Err(Error::Contract(format!(
            "teacher has {} classes, split expects {}",
            spec.num_classes,
            split.num_classes()
        )));
    }
    if generator_spec.output_dim != spec.input_dim {
        return Err(Error::Dimension {
            op: "generator output",
            lhs: vec![generator_spec.output_dim],
            rhs: vec![spec.input_dim],
        });
    }
    let method = config.method.spec();
    let filter = config.filter(spec.num_classes)?;

    let mut rng = Rng::new(config.seed);
    let mut student = models::init_network(&spec, &mut rng)?;
    let mut generator = models::init_network(generator_spec, &mut rng)?;
    let mut student_opt = Optimizer::new(
        OptimizerSpec::sgd(config.student_lr, config.student_momentum),
        &student,
    )?;
    let mut generator_opt = Optimizer::new(OptimizerSpec::adam(config.generator_lr), &generator)?;

    let mut logs = Vec::with_capacity(config.epochs * config.loops_per_epoch * config.student_steps);
    let mut generator_loss = f64::NAN;
    let mut step = 0;

    for epoch in 0..config.epochs {
        for loop_idx in 0..config.loops_per_epoch {
            for _ in 0..config.generator_steps {
                let z = sample_noise(&mut rng, config.batch_size, generator_spec.noise_dim);
                generator_loss = generator_step(
                    &mut generator,
                    &mut generator_opt,
                    generator_spec,
                    teacher,
                    &student,
                    &spec,
                    z,
                    method,
                    split,
                    config.balance_weight,
                )
                .map_err(|e| Error::Training {
                    step,
                    msg: format!("generator update failed: {e}"),
                })?;
            }

            for _ in 0..config.student_steps {
                let started = Instant::now();
                let z = sample_noise(&mut rng, config.batch_size, generator_spec.noise_dim);
                let x = models::generate(&generator, generator_spec, &z)?;
                let t_logits = models::classifier_logits(teacher, &spec, &x)?;
                let t_probs = t_logits.softmax()?;
                let comp = synthesis_composition(&t_probs, split);
                let outcome = filter.apply(&t_probs, split);
                let kept = outcome.kept_indices();
                let h_b = losses::batch_retaining_entropy(kept.iter().map(|&i| t_probs.row(i)), split);

                let student_loss = if kept.is_empty() {
                    debug!("step {step}: every synthetic sample filtered, student update skipped");
                    None
                } else {
                    let target = match method.student_target() {
                        StudentTarget::Raw => t_probs.clone(),
                        StudentTarget::PostFilter => losses::postfilter_target(&t_logits, split)?,
                        StudentTarget::ProbabilityRenorm => losses::pd_target_from_logits(&t_logits, split)?,
                    };
                    let (x_kept, target_kept) = if kept.len() == x.rows() {
                        (x, target)
                    } else {
                        (x.select_rows(&kept)?, target.select_rows(&kept)?)
                    };
                    let loss = student_step(&mut student, &mut student_opt, &spec, x_kept, target_kept)
                        .map_err(|e| Error::Training {
                            step,
                            msg: format!("student update failed: {e}"),
                        })?;
                    Some(loss)
                };

                logs.push(StepLog {
                    step,
                    epoch,
                    loop_idx,
                    generator_loss,
                    student_loss,
                    n_forget_synth: comp.n_forget,
                    class_counts: comp.counts,
                    n_filtered: outcome.dropped_count,
                    kept: outcome.kept_count,
                    h_b,
                    wall_ms: started.elapsed().as_secs_f64() * 1e3,
                });
                step += 1;
            }
        }
        if config.lr_decay.milestones.contains(&(epoch + 1)) {
            let lr = student_opt.lr() * config.lr_decay.gamma;
            student_opt.set_lr(lr)?;
        }
    }

    Ok(UnlearnOutcome {
        student,
        generator,
        logs,
    })
}

#[allow(clippy::too_many_arguments)]
fn generator_step(
    generator: &mut ParameterSet,
    opt: &mut Optimizer,
    generator_spec: &GeneratorSpec,
    teacher: &ParameterSet,
    student: &ParameterSet,
    spec: &ClassifierSpec,
    z: Tensor,
    method: MethodSpec,
    split: &LabelSplit,
    balance_weight: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let zv = g.constant(z);
    let x = models::generate_graph(&mut g, generator, generator_spec, zv, Binding::Trainable)?;
    let t_logits = models::classifier_logits_graph(&mut g, teacher, spec, x, Binding::Frozen)?;
    let t_probs = g.softmax(t_logits)?;
    let s_logits = models::classifier_logits_graph(&mut g, student, spec, x, Binding::Frozen)?;
    let s_log = g.log_softmax(s_logits)?;
    let main = match method.generator_loss() {
        GeneratorLoss::Adversarial => losses::adv_loss(&mut g, t_probs, s_log)?,
        GeneratorLoss::InhibitedSynthesis => losses::is_loss(&mut g, t_probs, s_log, split)?,
    };
    let mut total = main.node;
    if balance_weight > 0.0 {
        let bal = losses::balance_loss(&mut g, t_probs)?;
        let weighted = g.scale(bal.node, balance_weight);
        total = g.add(total, weighted)?;
    }
    let value = g.value(total).item();
    if !value.is_finite() {
        return Err(Error::Contract(format!("generator loss is {value}")));
    }
    generator.zero_grads();
    g.backward(total, generator)?;
    opt.step(generator)?;
    Ok(value)
}

fn student_step(
    student: &mut ParameterSet,
    opt: &mut Optimizer,
    spec: &ClassifierSpec,
    x: Tensor,
    target: Tensor,
) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let tv = g.constant(target);
    let logits = models::classifier_logits_graph(&mut g, student, spec, xv, Binding::Trainable)?;
    let log_probs = g.log_softmax(logits)?;
    let loss = losses::kd_loss(&mut g, tv, log_probs)?;
    student.zero_grads();
    g.backward(loss.node, student)?;
    opt.step(student)?;
    Ok(loss.value)
}

/// Supervised training settings for teachers, gold retrains and shadow models.
#[derive(Clone, Debug, PartialEq)]
pub struct SupConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for SupConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

pub struct TrainedModel {
    pub params: ParameterSet,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// One-hot encodes labels as a probability matrix.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * num_classes];
    for (i, &c) in labels.iter().enumerate() {
        data[i * num_classes + c] = 1.0;
    }
    Tensor::matrix(labels.len(), num_classes, data)
}

/// Mini-batch SGD on cross-entropy, starting from `params`.
pub fn fit_supervised(
    params: &mut ParameterSet,
    spec: &ClassifierSpec,
    data: &Dataset,
    sup: &SupConfig,
) -> Result<()> {
    if sup.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut opt = Optimizer::new(OptimizerSpec::sgd(sup.lr, sup.momentum), params)?;
    let mut rng = Rng::derive(sup.seed, 0x5EED_DA7A);
    let mut step = 0;
    for _ in 0..sup.epochs {
        let order = rng.permutation(data.len());
        for chunk in order.chunks(sup.batch_size) {
            let x = data.x.select_rows(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.y[i]).collect();
            let target = one_hot(&labels, spec.num_classes)?;
            let loss = student_step(params, &mut opt, spec, x, target).map_err(|e| Error::Training {
                step,
                msg: e.to_string(),
            })?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    msg: format!("loss became {loss}"),
                });
            }
            step += 1;
        }
    }
    Ok(())
}

/// Percentage of samples whose argmax prediction equals the label.
pub fn plain_accuracy(params: &ParameterSet, spec: &ClassifierSpec, data: &Dataset) -> Result<f64> {
    let logits = models::classifier_logits(params, spec, &data.x)?;
    let correct = logits
        .argmax_rows()
        .iter()
        .zip(&data.y)
        .filter(|(p, y)| p == y)
        .count();
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Trains a classifier from scratch on labeled data.
pub fn train_teacher(
    train: &Dataset,
    test: Option<&Dataset>,
    spec: &ClassifierSpec,
    sup: &SupConfig,
) -> Result<TrainedModel> {
    if spec.num_classes != train.num_classes || spec.input_dim != train.dim() {
        return Err(Error::Config(format!(
            "classifier ({} inputs, {} classes) does not fit data ({} features, {} classes)",
            spec.input_dim,
            spec.num_classes,
            train.dim(),
            train.num_classes
        )));
    }
    let mut rng = Rng::new(sup.seed);
    let mut params = models::init_network(spec, &mut rng)?;
    fit_supervised(&mut params, spec, train, sup)?;
    Ok(TrainedModel {
        train_accuracy: plain_accuracy(&params, spec, train)?,
        test_accuracy: test.map(|t| plain_accuracy(&params, spec, t)).transpose()?,
        params,
    })
}

/// The reference unlearned model: trained from scratch on retaining classes only.
pub fn retrain_gold(
    train: &Dataset,
    test: Option<&Dataset>,
    split: &LabelSplit,
    spec: &ClassifierSpec,
    sup: &SupConfig,
) -> Result<TrainedModel> {
    let retain = train.restrict(&split.retain_classes())?;
    let retain_test = test.map(|t| t.restrict(&split.retain_classes())).transpose()?;
    train_teacher(&retain, retain_test.as_ref(), spec, sup)
}
