//! Sample-selection policies applied between synthesis and distillation.

use crate::error::{Error, Result};
use crate::losses::LabelSplit;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FilterConfig {
    None,
    /// Keep a sample only if every forgetting probability is below `delta`.
    PreFilter { delta: f64 },
    /// Keep a sample unless the teacher's top class is a forgetting class.
    BlockF,
}

impl FilterConfig {
    pub fn prefilter(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::Config(format!("prefilter delta must lie in (0, 1], got {delta}")));
        }
        Ok(Self::PreFilter { delta })
    }

    /// 0.01 for ten classes, 0.001 for a hundred; `0.1 / K` elsewhere.
    pub fn default_delta(num_classes: usize) -> f64 {
        0.1 / num_classes as f64
    }

    pub fn apply(&self, teacher_probs: &Tensor, split: &LabelSplit) -> FilterOutcome {
        match *self {
            Self::None => FilterOutcome::from_mask(vec![true; teacher_probs.rows()]),
            Self::PreFilter { delta } => prefilter(teacher_probs, split, delta),
            Self::BlockF => blockf(teacher_probs, split),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilterOutcome {
    pub keep_mask: Vec<bool>,
    pub kept_count: usize,
    pub dropped_count: usize,
}

impl FilterOutcome {
    pub fn from_mask(keep_mask: Vec<bool>) -> Self {
        let kept_count = keep_mask.iter().filter(|&&k| k).count();
        let dropped_count = keep_mask.len() - kept_count;
        Self {
            keep_mask,
            kept_count,
            dropped_count,
        }
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.keep_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }
}

pub fn prefilter(teacher_probs: &Tensor, split: &LabelSplit, delta: f64) -> FilterOutcome {
    let mask = (0..teacher_probs.rows())
        .map(|i| {
            let row = teacher_probs.row(i);
            split.forget().all(|f| row[f] < delta)
        })
        .collect();
    FilterOutcome::from_mask(mask)
}

pub fn blockf(teacher_probs: &Tensor, split: &LabelSplit) -> FilterOutcome {
    let mask = teacher_probs
        .argmax_rows()
        .into_iter()
        .map(|c| !split.is_forget(c))
        .collect();
    FilterOutcome::from_mask(mask)
}
