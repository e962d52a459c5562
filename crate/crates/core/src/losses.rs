//! Distillation and unlearning objectives.
//!
//! Trainable losses reduce over the batch by mean; the retaining-entropy
//! diagnostic sums, as it measures information per batch rather than per
//! sample. `0 · ln 0` is taken as 0 throughout.

use std::collections::BTreeSet;

use crate::error::{dim_err, Error, Result};
use crate::graph::{xlogx, Graph, Var};
use crate::tensor::Tensor;

const NORMALIZATION_TOL: f64 = 1e-9;
const DEGENERATE_MASS: f64 = 1e-12;

/// Partition of `0..K` into forgetting and retaining classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSplit {
    num_classes: usize,
    forget: BTreeSet<usize>,
}

impl LabelSplit {
    pub fn new(num_classes: usize, forget: impl IntoIterator<Item = usize>) -> Result<Self> {
        let forget: BTreeSet<usize> = forget.into_iter().collect();
        if let Some(&bad) = forget.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Config(format!(
                "forget class {bad} out of range for {num_classes} classes"
            )));
        }
        if forget.len() >= num_classes {
            return Err(Error::Config(
                "cannot forget every class: retaining set would be empty".into(),
            ));
        }
        Ok(Self { num_classes, forget })
    }

    /// The trivial split that forgets nothing.
    pub fn retain_all(num_classes: usize) -> Self {
        Self {
            num_classes,
            forget: BTreeSet::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_forget(&self, class: usize) -> bool {
        self.forget.contains(&class)
    }

    pub fn forget(&self) -> impl Iterator<Item = usize> + '_ {
        self.forget.iter().copied()
    }

    pub fn retain(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_classes).filter(|c| !self.forget.contains(c))
    }

    pub fn forget_classes(&self) -> Vec<usize> {
        self.forget().collect()
    }

    pub fn retain_classes(&self) -> Vec<usize> {
        self.retain().collect()
    }

    pub fn num_forget(&self) -> usize {
        self.forget.len()
    }

    fn check_width(&self, t: &Tensor) -> Result<()> {
        if t.shape().len() != 2 || t.cols() != self.num_classes {
            return dim_err("label split", t.shape(), &[t.rows(), self.num_classes]);
        }
        Ok(())
    }
}

/// A scalar loss recorded in a graph, together with its value.
#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub node: Var,
    pub value: f64,
}

impl LossValue {
    fn new(g: &Graph, node: Var) -> Result<Self> {
        let value = g.value(node).item();
        if !value.is_finite() {
            return Err(Error::Contract(format!("non-finite loss {value}")));
        }
        Ok(Self { node, value })
    }
}

fn check_probabilities(t: &Tensor) -> Result<()> {
    for i in 0..t.rows() {
        let row = t.row(i);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > NORMALIZATION_TOL || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Contract(format!(
                "teacher row {i} is not a probability vector (sum {s})"
            )));
        }
    }
    Ok(())
}

fn weighted(g: &mut Graph, teacher: Var, student_log: Var, weights: Vec<f64>) -> Result<LossValue> {
    let (t, s) = (g.value(teacher), g.value(student_log));
    if t.shape() != s.shape() {
        return dim_err("kl", t.shape(), s.shape());
    }
    check_probabilities(t)?;
    let node = g.weighted_kl(teacher, student_log, weights)?;
    LossValue::new(g, node)
}

/// Mean KL(T ‖ S) over the batch.
pub fn kd_loss(g: &mut Graph, teacher_probs: Var, student_log_probs: Var) -> Result<LossValue> {
    let k = g.value(teacher_probs).cols();
    weighted(g, teacher_probs, student_log_probs, vec![1.0; k])
}

/// Negated KL: the generator maximizes teacher/student disagreement.
pub fn adv_loss(g: &mut Graph, teacher_probs: Var, student_log_probs: Var) -> Result<LossValue> {
    let k = g.value(teacher_probs).cols();
    weighted(g, teacher_probs, student_log_probs, vec![-1.0; k])
}

/// Inhibited-synthesis loss: disagreement is maximized on retaining classes
/// and minimized on forgetting classes.
pub fn is_loss(
    g: &mut Graph,
    teacher_probs: Var,
    student_log_probs: Var,
    split: &LabelSplit,
) -> Result<LossValue> {
    split.check_width(g.value(teacher_probs))?;
    let weights = (0..split.num_classes())
        .map(|k| if split.is_forget(k) { 1.0 } else { -1.0 })
        .collect();
    weighted(g, teacher_probs, student_log_probs, weights)
}

/// Negative entropy of the batch-mean teacher distribution.
pub fn balance_loss(g: &mut Graph, teacher_probs: Var) -> Result<LossValue> {
    check_probabilities(g.value(teacher_probs))?;
    let mean = g.mean_rows(teacher_probs)?;
    let node = g.plogp(mean);
    LossValue::new(g, node)
}

/// Moves forgetting-class logit mass evenly onto the retaining classes and
/// pins every forgetting logit to the row minimum.
pub fn redistribute_logits(t: &Tensor, split: &LabelSplit) -> Result<Tensor> {
    split.check_width(t)?;
    let k = split.num_classes();
    let n_retain = k - split.num_forget();
    if n_retain == 0 {
        return Err(Error::Contract("redistribution needs a retaining class".into()));
    }
    let mut out = Vec::with_capacity(t.len());
    for i in 0..t.rows() {
        let row = t.row(i);
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        let delta: f64 = split.forget().map(|f| row[f] - min).sum();
        let share = delta / n_retain as f64;
        out.extend(
            row.iter()
                .enumerate()
                .map(|(c, &v)| if split.is_forget(c) { min } else { v + share }),
        );
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Supervision target produced by the post-filter: `softmax(redistribute(t))`.
pub fn postfilter_target(teacher_logits: &Tensor, split: &LabelSplit) -> Result<Tensor> {
    redistribute_logits(teacher_logits, split)?.softmax()
}

/// KD loss against the redistributed teacher logits.
pub fn postfilter_kd_loss(
    g: &mut Graph,
    teacher_logits: &Tensor,
    student_log_probs: Var,
    split: &LabelSplit,
) -> Result<LossValue> {
    let target = postfilter_target(teacher_logits, split)?;
    let tv = g.constant(target);
    kd_loss(g, tv, student_log_probs)
}

/// Zeroes forgetting probabilities and renormalizes the rest of each row.
pub fn pd_target(teacher_probs: &Tensor, split: &LabelSplit) -> Result<Tensor> {
    split.check_width(teacher_probs)?;
    let mut out = Vec::with_capacity(teacher_probs.len());
    for i in 0..teacher_probs.rows() {
        let row = teacher_probs.row(i);
        let mass: f64 = split.retain().map(|c| row[c]).sum();
        if mass <= DEGENERATE_MASS {
            return Err(Error::DegenerateRow { row: i });
        }
        out.extend(
            row.iter()
                .enumerate()
                .map(|(c, &p)| if split.is_forget(c) { 0.0 } else { p / mass }),
        );
    }
    Tensor::new(teacher_probs.shape().to_vec(), out)
}

/// The same target as [`pd_target`], computed from logits as a softmax over
/// the retaining classes only, so it never degenerates.
pub fn pd_target_from_logits(teacher_logits: &Tensor, split: &LabelSplit) -> Result<Tensor> {
    split.check_width(teacher_logits)?;
    let mut out = Vec::with_capacity(teacher_logits.len());
    for i in 0..teacher_logits.rows() {
        let row = teacher_logits.row(i);
        let max = split.retain().map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = split.retain().map(|c| (row[c] - max).exp()).sum();
        out.extend(row.iter().enumerate().map(|(c, &v)| {
            if split.is_forget(c) {
                0.0
            } else {
                (v - max).exp() / z
            }
        }));
    }
    Tensor::new(teacher_logits.shape().to_vec(), out)
}

/// Summed entropy of retaining-class probabilities over the given rows.
pub fn batch_retaining_entropy<'a>(
    rows: impl IntoIterator<Item = &'a [f64]>,
    split: &LabelSplit,
) -> f64 {
    rows.into_iter()
        .map(|row| -split.retain().map(|c| xlogx(row[c])).sum::<f64>())
        .sum()
}
