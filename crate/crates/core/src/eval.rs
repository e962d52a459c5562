//! Unlearning metrics: accuracies, anamnesis index, membership inference,
//! and table assembly.

use log::warn;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::engine::{self, one_hot, SupConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{self, LabelSplit};
use crate::models::{self, Binding, ClassifierSpec};
use crate::optim::{Optimizer, OptimizerSpec};
use crate::params::ParameterSet;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Accuracy (percent) over the samples whose label lies in `classes`.
pub fn accuracy(
    params: &ParameterSet,
    spec: &ClassifierSpec,
    data: &Dataset,
    classes: &[usize],
) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).filter(|&i| classes.contains(&data.y[i])).collect();
    if idx.is_empty() {
        return Err(Error::UndefinedMetric(format!("no samples with labels in {classes:?}")));
    }
    let x = data.x.select_rows(&idx)?;
    let pred = models::classifier_logits(params, spec, &x)?.argmax_rows();
    let correct = idx.iter().zip(pred).filter(|(&i, p)| data.y[i] == *p).count();
    Ok(100.0 * correct as f64 / idx.len() as f64)
}

/// Per-class accuracy vector; classes without samples report `NaN`.
pub fn per_class_accuracy(params: &ParameterSet, spec: &ClassifierSpec, data: &Dataset) -> Result<Vec<f64>> {
    (0..spec.num_classes)
        .map(|c| match accuracy(params, spec, data, &[c]) {
            Err(Error::UndefinedMetric(_)) => Ok(f64::NAN),
            other => other,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelearnConfig {
    pub lr: f64,
    pub max_steps: usize,
    /// Relative margin α: relearning stops at `(1 − α)·A_f(original)`.
    pub margin: f64,
    pub eval_every: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RelearnConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            max_steps: 2000,
            margin: 0.05,
            eval_every: 1,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl RelearnConfig {
    fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return Err(Error::Config(format!("relearn margin must lie in (0, 1), got {}", self.margin)));
        }
        if self.max_steps == 0 || self.eval_every == 0 || self.batch_size == 0 {
            return Err(Error::Config("relearn steps, eval interval and batch must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelearnTime {
    pub steps: usize,
    /// Hit `max_steps` without reaching the target.
    pub censored: bool,
}

/// Fine-tunes a copy of `params` on `train` until forgetting-class test
/// accuracy reaches `target`. A model already at the target counts as one step.
pub fn relearn_time(
    params: &ParameterSet,
    spec: &ClassifierSpec,
    train: &Dataset,
    forget_test: &Dataset,
    forget: &[usize],
    target: f64,
    cfg: &RelearnConfig,
) -> Result<RelearnTime> {
    cfg.validate()?;
    let mut model = params.clone();
    if accuracy(&model, spec, forget_test, forget)? >= target {
        return Ok(RelearnTime {
            steps: 1,
            censored: false,
        });
    }
    let mut opt = Optimizer::new(OptimizerSpec::sgd(cfg.lr, 0.0), &model)?;
    let mut rng = Rng::derive(cfg.seed, 0xA1E);
    let mut order = rng.permutation(train.len());
    let mut cursor = 0;
    for step in 1..=cfg.max_steps {
        if cursor + cfg.batch_size > order.len() {
            order = rng.permutation(train.len());
            cursor = 0;
        }
        let chunk = &order[cursor..(cursor + cfg.batch_size).min(order.len())];
        cursor += chunk.len();
        let x = train.x.select_rows(chunk)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| train.y[i]).collect();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let tv = g.constant(one_hot(&labels, spec.num_classes)?);
        let logits = models::classifier_logits_graph(&mut g, &model, spec, xv, Binding::Trainable)?;
        let lp = g.log_softmax(logits)?;
        let loss = losses::kd_loss(&mut g, tv, lp)?;
        model.zero_grads();
        g.backward(loss.node, &mut model)?;
        opt.step(&mut model)?;
        if step % cfg.eval_every == 0 && accuracy(&model, spec, forget_test, forget)? >= target {
            return Ok(RelearnTime {
                steps: step,
                censored: false,
            });
        }
    }
    warn!("relearning hit max_steps={} without reaching {target:.2}%", cfg.max_steps);
    Ok(RelearnTime {
        steps: cfg.max_steps,
        censored: true,
    })
}

/// Anamnesis index: relearning time of the unlearned model over that of the
/// gold retrain, both fine-tuned on the full training set.
#[allow(clippy::too_many_arguments)]
pub fn ain(
    unlearned: &ParameterSet,
    retrained: &ParameterSet,
    original: &ParameterSet,
    spec: &ClassifierSpec,
    train: &Dataset,
    test: &Dataset,
    split: &LabelSplit,
    cfg: &RelearnConfig,
) -> Result<f64> {
    let forget = split.forget_classes();
    let forget_test = test.restrict(&forget).map_err(|e| Error::UndefinedMetric(e.to_string()))?;
    let a_orig = accuracy(original, spec, &forget_test, &forget)?;
    if a_orig == 0.0 {
        return Err(Error::UndefinedMetric(
            "original model has zero forgetting-class accuracy".into(),
        ));
    }
    let target = (1.0 - cfg.margin) * a_orig;
    let rt_u = relearn_time(unlearned, spec, train, &forget_test, &forget, target, cfg)?;
    let rt_r = relearn_time(retrained, spec, train, &forget_test, &forget, target, cfg)?;
    Ok(rt_u.steps as f64 / rt_r.steps as f64)
}

/// Per-sample cross-entropy `−ln p_y`.
pub fn sample_losses(params: &ParameterSet, spec: &ClassifierSpec, data: &Dataset) -> Result<Vec<f64>> {
    let lp = models::classifier_logits(params, spec, &data.x)?.log_softmax()?;
    Ok((0..data.len()).map(|i| -lp.get(i, data.y[i])).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiaOutcome {
    pub percent: f64,
    pub threshold: f64,
    pub degenerate: bool,
}

/// Loss-threshold membership attack scored on arbitrary sample scores.
///
/// A score strictly above the threshold is judged a non-member. The
/// threshold is one of the observed fit scores, so only the ordering of
/// scores matters.
pub fn mia_threshold(members: &[f64], non_members: &[f64], probe: &[f64]) -> Result<MiaOutcome> {
    if members.is_empty() || non_members.is_empty() || probe.is_empty() {
        return Err(Error::UndefinedMetric("membership attack needs non-empty sets".into()));
    }
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&v| (v, true))
        .chain(non_members.iter().map(|&v| (v, false)))
        .collect();
    if all.iter().all(|&(v, _)| v == all[0].0) {
        warn!("membership fit set is degenerate (all scores equal)");
        return Ok(MiaOutcome {
            percent: 50.0,
            threshold: all[0].0,
            degenerate: true,
        });
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nm, nn) = (members.len() as f64, non_members.len() as f64);
    // Threshold below everything: every fit sample is a non-member.
    let mut members_below = 0usize;
    let mut non_members_below = 0usize;
    let mut best = (0.5, f64::NEG_INFINITY);
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                members_below += 1;
            } else {
                non_members_below += 1;
            }
            i += 1;
        }
        let tpr = members_below as f64 / nm;
        let tnr = 1.0 - non_members_below as f64 / nn;
        let bal = 0.5 * (tpr + tnr);
        if bal > best.0 {
            best = (bal, v);
        }
    }
    let threshold = best.1;
    let out = probe.iter().filter(|&&v| v > threshold).count();
    Ok(MiaOutcome {
        percent: 100.0 * out as f64 / probe.len() as f64,
        threshold,
        degenerate: false,
    })
}

/// Share (percent) of forgetting training samples judged not to be members
/// of the unlearned model's training set.
pub fn mia_i(
    params: &ParameterSet,
    spec: &ClassifierSpec,
    forget_train: &Dataset,
    retain_train: &Dataset,
    retain_test: &Dataset,
) -> Result<MiaOutcome> {
    let members = sample_losses(params, spec, retain_train)?;
    let non_members = sample_losses(params, spec, retain_test)?;
    let probe = sample_losses(params, spec, forget_train)?;
    mia_threshold(&members, &non_members, &probe)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShadowConfig {
    pub n_shadow: usize,
    pub hidden_dims: Vec<usize>,
    pub sup: SupConfig,
    pub attack_hidden: usize,
    pub attack_epochs: usize,
    pub attack_lr: f64,
    pub seed: u64,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        Self {
            n_shadow: 4,
            hidden_dims: vec![32, 32],
            sup: SupConfig::default(),
            attack_hidden: 16,
            attack_epochs: 40,
            attack_lr: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiaIIOutcome {
    pub f1: f64,
    pub accuracy: f64,
}

/// Softmax signals from one shadow model: (in-training rows, out-of-training rows).
fn shadow_signals(pool: &Dataset, cfg: &ShadowConfig, index: usize) -> Result<(Tensor, Tensor)> {
    let seed = cfg.seed.wrapping_add(1 + index as u64);
    let mut rng = Rng::derive(seed, 0x5AAD);
    let order = rng.permutation(pool.len());
    let half = pool.len() / 2;
    let in_set = pool.subset(&order[..half])?;
    let out_set = pool.subset(&order[half..2 * half])?;
    let spec = ClassifierSpec::new(pool.dim(), cfg.hidden_dims.clone(), pool.num_classes)?;
    let sup = SupConfig { seed, ..cfg.sup.clone() };
    let shadow = engine::train_teacher(&in_set, None, &spec, &sup)?;
    Ok((
        models::classifier_probs(&shadow.params, &spec, &in_set.x)?,
        models::classifier_probs(&shadow.params, &spec, &out_set.x)?,
    ))
}

/// Shadow-model membership attack against `target`; reports F1 (percent)
/// with "in training" as the positive class.
///
/// Shadows train on random halves of `shadow_pool`. The attack is tested on
/// `target_in` (members) against an equal number of `target_out` rows.
pub fn mia_ii(
    target: &ParameterSet,
    spec: &ClassifierSpec,
    shadow_pool: &Dataset,
    target_in: &Dataset,
    target_out: &Dataset,
    cfg: &ShadowConfig,
) -> Result<MiaIIOutcome> {
    if cfg.n_shadow < 2 {
        return Err(Error::Config("mia_ii needs at least 2 shadow models".into()));
    }
    if shadow_pool.len() < 4 || target_in.is_empty() || target_out.is_empty() {
        return Err(Error::Config("not enough data to split for shadow training".into()));
    }
    let signals = (0..cfg.n_shadow)
        .into_par_iter()
        .map(|s| shadow_signals(shadow_pool, cfg, s))
        .collect::<Result<Vec<_>>>()?;

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (inside, outside) in &signals {
        xs.push(inside);
        ys.extend(std::iter::repeat_n(1usize, inside.rows()));
        xs.push(outside);
        ys.extend(std::iter::repeat_n(0usize, outside.rows()));
    }
    let attack_x = Tensor::vstack(&xs)?;
    let attack = train_attack(&attack_x, &ys, spec.num_classes, cfg)?;

    let n = target_in.len().min(target_out.len());
    let idx: Vec<usize> = (0..n).collect();
    let probs_in = models::classifier_probs(target, spec, &target_in.subset(&idx)?.x)?;
    let probs_out = models::classifier_probs(target, spec, &target_out.subset(&idx)?.x)?;
    let attack_spec = attack_spec(spec.num_classes, cfg);
    let pred_in = models::classifier_logits(&attack, &attack_spec, &probs_in)?.argmax_rows();
    let pred_out = models::classifier_logits(&attack, &attack_spec, &probs_out)?.argmax_rows();

    let tp = pred_in.iter().filter(|&&p| p == 1).count() as f64;
    let fn_ = n as f64 - tp;
    let fp = pred_out.iter().filter(|&&p| p == 1).count() as f64;
    let tn = n as f64 - fp;
    let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
    Ok(MiaIIOutcome {
        f1: 100.0 * f1,
        accuracy: 100.0 * (tp + tn) / (2 * n) as f64,
    })
}

fn attack_spec(num_classes: usize, cfg: &ShadowConfig) -> ClassifierSpec {
    ClassifierSpec {
        input_dim: num_classes,
        hidden_dims: vec![cfg.attack_hidden],
        num_classes: 2,
    }
}

/// Binary attack MLP; keeps the epoch with the best held-out accuracy.
fn train_attack(x: &Tensor, y: &[usize], num_classes: usize, cfg: &ShadowConfig) -> Result<ParameterSet> {
    let spec = attack_spec(num_classes, cfg);
    let mut rng = Rng::derive(cfg.seed, 0xA77AC);
    let order = rng.permutation(y.len());
    let n_val = (y.len() / 5).max(1);
    let val = Dataset::new(
        x.select_rows(&order[..n_val])?,
        order[..n_val].iter().map(|&i| y[i]).collect(),
        2,
        crate::data::Split::Test,
    )?;
    let fit = Dataset::new(
        x.select_rows(&order[n_val..])?,
        order[n_val..].iter().map(|&i| y[i]).collect(),
        2,
        crate::data::Split::Train,
    )?;
    let mut params = models::init_network(&spec, &mut rng)?;
    let mut best = (engine::plain_accuracy(&params, &spec, &val)?, params.clone());
    let sup = SupConfig {
        epochs: 1,
        batch_size: 64,
        lr: cfg.attack_lr,
        momentum: 0.9,
        seed: cfg.seed,
    };
    for epoch in 0..cfg.attack_epochs {
        let sup = SupConfig {
            seed: sup.seed.wrapping_add(epoch as u64),
            ..sup.clone()
        };
        engine::fit_supervised(&mut params, &spec, &fit, &sup)?;
        let acc = engine::plain_accuracy(&params, &spec, &val)?;
        if acc > best.0 {
            best = (acc, params.clone());
        }
    }
    Ok(best.1)
}

/// One evaluated run, as it appears before aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub method: String,
    pub seed: u64,
    pub a_f: f64,
    pub a_r: f64,
    pub mia_i: f64,
    pub mia_ii: f64,
    pub ain: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub seed_count: usize,
    pub a_f_mean: f64,
    pub a_f_std: f64,
    pub a_r_mean: f64,
    pub a_r_std: f64,
    pub mia_i: f64,
    pub mia_ii: f64,
    pub ain: f64,
}

pub const REPORT_HEADER: &str = "method,seed_count,A_f_mean,A_f_std,A_r_mean,A_r_std,MIA_I,MIA_II,AIN";

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.method,
            self.seed_count,
            self.a_f_mean,
            self.a_f_std,
            self.a_r_mean,
            self.a_r_std,
            self.mia_i,
            self.mia_ii,
            self.ain
        )
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups runs by method (first-appearance order) and aggregates each group.
pub fn assemble_report(runs: &[RunMetrics]) -> Vec<MetricReport> {
    let mut methods: Vec<&str> = Vec::new();
    for r in runs {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let group: Vec<&RunMetrics> = runs.iter().filter(|r| r.method == m).collect();
            let col = |f: fn(&RunMetrics) -> f64| group.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (a_f_mean, a_f_std) = mean_std(&col(|r| r.a_f));
            let (a_r_mean, a_r_std) = mean_std(&col(|r| r.a_r));
            MetricReport {
                method: m.to_string(),
                seed_count: group.len(),
                a_f_mean,
                a_f_std,
                a_r_mean,
                a_r_std,
                mia_i: mean_std(&col(|r| r.mia_i)).0,
                mia_ii: mean_std(&col(|r| r.mia_ii)).0,
                ain: mean_std(&col(|r| r.ain)).0,
            }
        })
        .collect()
}

pub fn report_csv(rows: &[MetricReport]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
