//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in execution order, so the node vector is already a
//! topological order and the backward pass is a single reverse sweep.

use crate::error::{dim_err, Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ParamSlot {
    set: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamSlot>),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, #[allow(dead_code)] f64),
    Relu(Var),
    Tanh(Var),
    LogSoftmax(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    WeightedKl {
        target: Var,
        log_probs: Var,
        weights: Vec<f64>,
    },
    PLogP(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Graph::gradients`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// `0 · ln 0 := 0`.
#[inline]
pub(crate) fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// One KL summand `T·(ln T − log_s)` with the `0 · ln 0` convention.
#[inline]
pub(crate) fn kl_term(t: f64, log_s: f64) -> f64 {
    if t > 0.0 {
        t * (t.ln() - log_s)
    } else {
        0.0
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf(None))
    }

    /// Records a parameter leaf whose gradient flows back into `params`.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        let index = params
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
        let value = params.entry(index).value.clone();
        Ok(self.push(
            value,
            Op::Leaf(Some(ParamSlot {
                set: params.id(),
                index,
            })),
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `m×n` plus a `1×n` bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).log_softmax()?;
        Ok(self.push(out, Op::LogSoftmax(a)))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax()?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Column means of an `m×n` matrix as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.rows() as f64;
        let out = t.sum_rows()?.scale(1.0 / m);
        Ok(self.push(out, Op::MeanRows(a)))
    }

    /// `(1/m) Σ_i Σ_k w_k · T_ik (ln T_ik − L_ik)` where `L` holds log-probabilities.
    ///
    /// Terms with `T_ik = 0` contribute exactly zero.
    pub fn weighted_kl(&mut self, target: Var, log_probs: Var, weights: Vec<f64>) -> Result<Var> {
        let t = self.value(target);
        let l = self.value(log_probs);
        if t.shape() != l.shape() || t.shape().len() != 2 {
            return dim_err("weighted_kl", t.shape(), l.shape());
        }
        let k = t.cols();
        if weights.len() != k {
            return dim_err("weighted_kl weights", t.shape(), &[weights.len()]);
        }
        let m = t.rows();
        let mut total = 0.0;
        for i in 0..m {
            let mut row = 0.0;
            for (j, &w) in weights.iter().enumerate() {
                row += w * kl_term(t.get(i, j), l.get(i, j));
            }
            total += row;
        }
        let out = Tensor::scalar(total / m as f64);
        Ok(self.push(
            out,
            Op::WeightedKl {
                target,
                log_probs,
                weights,
            },
        ))
    }

    /// `Σ p ln p` over every entry, with `0 ln 0 = 0`.
    pub fn plogp(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().map(|&p| xlogx(p)).sum());
        self.push(out, Op::PLogP(a))
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            // Leaf gradients stay in place for the caller; interior ones are consumed.
            if matches!(node.op, Op::Leaf(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let out = &node.value;
            match &node.op {
                Op::Leaf(_) => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.value(*b).transpose()?)?;
                    let gb = self.value(*a).transpose()?.matmul(&g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::AddRow(a, bias) => {
                    let gb = g.sum_rows()?;
                    accumulate(&mut grads, *a, g)?;
                    accumulate(&mut grads, *bias, gb)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(*b))?;
                    let gb = g.mul(self.value(*a))?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s))?,
                Op::AddScalar(a, _) => accumulate(&mut grads, *a, g)?,
                Op::Relu(a) => {
                    let ga = g.zip_with(self.value(*a), "relu", |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Tanh(a) => {
                    let ga = g.zip_with(out, "tanh", |gv, y| gv * (1.0 - y * y))?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::LogSoftmax(a) => {
                    let k = out.cols();
                    let mut ga = Vec::with_capacity(out.len());
                    for (grow, yrow) in g.data().chunks(k).zip(out.data().chunks(k)) {
                        let gsum: f64 = grow.iter().sum();
                        ga.extend(grow.iter().zip(yrow).map(|(&gv, &y)| gv - y.exp() * gsum));
                    }
                    accumulate(&mut grads, *a, Tensor::new(out.shape().to_vec(), ga)?)?;
                }
                Op::Softmax(a) => {
                    let k = out.cols();
                    let mut ga = Vec::with_capacity(out.len());
                    for (grow, yrow) in g.data().chunks(k).zip(out.data().chunks(k)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(&gv, &y)| gv * y).sum();
                        ga.extend(grow.iter().zip(yrow).map(|(&gv, &y)| y * (gv - dot)));
                    }
                    accumulate(&mut grads, *a, Tensor::new(out.shape().to_vec(), ga)?)?;
                }
                Op::Sum(a) => {
                    let ga = Tensor::filled(self.value(*a).shape(), g.item());
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Mean(a) => {
                    let t = self.value(*a);
                    let ga = Tensor::filled(t.shape(), g.item() / t.len() as f64);
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::MeanRows(a) => {
                    let t = self.value(*a);
                    let m = t.rows();
                    let row: Vec<f64> = g.data().iter().map(|&v| v / m as f64).collect();
                    let data = row.iter().copied().cycle().take(t.len()).collect();
                    accumulate(&mut grads, *a, Tensor::new(t.shape().to_vec(), data)?)?;
                }
                Op::WeightedKl {
                    target,
                    log_probs,
                    weights,
                } => {
                    let t = self.value(*target);
                    let l = self.value(*log_probs);
                    let (m, k) = (t.rows(), t.cols());
                    let c = g.item() / m as f64;
                    let mut gt = vec![0.0; m * k];
                    let mut gl = vec![0.0; m * k];
                    for i in 0..m {
                        for (j, &w) in weights.iter().enumerate() {
                            let p = t.get(i, j);
                            let lv = l.get(i, j);
                            if p > 0.0 {
                                gt[i * k + j] = c * w * (p.ln() + 1.0 - lv);
                            }
                            gl[i * k + j] = -c * w * p;
                        }
                    }
                    accumulate(&mut grads, *target, Tensor::new(t.shape().to_vec(), gt)?)?;
                    accumulate(&mut grads, *log_probs, Tensor::new(l.shape().to_vec(), gl)?)?;
                }
                Op::PLogP(a) => {
                    let gv = g.item();
                    let ga = self
                        .value(*a)
                        .map(|p| if p > 0.0 { gv * (p.ln() + 1.0) } else { 0.0 });
                    accumulate(&mut grads, *a, ga)?;
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `∂loss/∂p` into every parameter of `params` bound in this graph.
    pub fn backward(&self, loss: Var, params: &mut ParameterSet) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Leaf(Some(slot)) = node.op {
                if slot.set != params.id() {
                    continue;
                }
                if let Some(g) = &grads.grads[idx] {
                    params.accumulate_grad(slot.index, g)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
