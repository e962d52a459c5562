//! MLP classifiers and generators.
//!
//! Layer `i` owns `l{i}.w` (`fan_in × fan_out`) and `l{i}.b` (`1 × fan_out`).
//! Hidden layers use relu; classifiers emit raw logits, generators squash
//! through a scaled tanh into the data range.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParameterSet;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub noise_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub lo: f64,
    pub hi: f64,
}

/// Whether a network's weights enter the graph as trainable leaves or constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Trainable,
    Frozen,
}

pub trait Architecture {
    /// Layer widths from input to output.
    fn layer_sizes(&self) -> Vec<usize>;

    fn validate(&self) -> Result<()>;
}

impl ClassifierSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Recovers the architecture from the weight shapes of a parameter set.
    pub fn infer(params: &ParameterSet) -> Result<Self> {
        let mut sizes = Vec::new();
        for i in 0.. {
            let Some(w) = params.get(&format!("l{i}.w")) else {
                break;
            };
            if w.shape().len() != 2 {
                return Err(Error::Contract(format!("l{i}.w is not a matrix: {:?}", w.shape())));
            }
            if i == 0 {
                sizes.push(w.shape()[0]);
            } else if sizes.last() != Some(&w.shape()[0]) {
                return Err(Error::Contract(format!(
                    "l{i}.w fan-in {} does not match previous width {:?}",
                    w.shape()[0],
                    sizes.last()
                )));
            }
            sizes.push(w.shape()[1]);
        }
        if sizes.len() < 2 {
            return Err(Error::Contract("parameter set holds no l0.w layer".into()));
        }
        let num_classes = sizes.pop().unwrap_or_default();
        Self::new(sizes[0], sizes[1..].to_vec(), num_classes)
    }
}

impl Architecture for ClassifierSpec {
    fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim];
        s.extend(&self.hidden_dims);
        s.push(self.num_classes);
        s
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "classifier needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.layer_sizes().contains(&0) {
            return Err(Error::Config("classifier dimensions must be >= 1".into()));
        }
        Ok(())
    }
}

impl Architecture for GeneratorSpec {
    fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.noise_dim];
        s.extend(&self.hidden_dims);
        s.push(self.output_dim);
        s
    }

    fn validate(&self) -> Result<()> {
        if self.layer_sizes().contains(&0) {
            return Err(Error::Config("generator dimensions must be >= 1".into()));
        }
        if !self.lo.is_finite() || !self.hi.is_finite() || self.lo >= self.hi {
            return Err(Error::Config(format!(
                "generator range needs lo < hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_network(spec: &impl Architecture, rng: &mut Rng) -> Result<ParameterSet> {
    spec.validate()?;
    let sizes = spec.layer_sizes();
    let mut ps = ParameterSet::new();
    for (i, pair) in sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        ps.insert(format!("l{i}.w"), Tensor::matrix(fan_in, fan_out, w)?)?;
        ps.insert(format!("l{i}.b"), Tensor::zeros(&[1, fan_out]))?;
    }
    Ok(ps)
}

fn check_input(x: &Tensor, expected: usize) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != expected {
        return Err(Error::Dimension {
            op: "network input",
            lhs: x.shape().to_vec(),
            rhs: vec![x.rows(), expected],
        });
    }
    Ok(())
}

fn layer_count(params: &ParameterSet) -> usize {
    params.len() / 2
}

/// Records the MLP body (relu between layers, linear last layer).
fn mlp_graph(g: &mut Graph, params: &ParameterSet, input: Var, binding: Binding) -> Result<Var> {
    let n = layer_count(params);
    let mut h = input;
    for i in 0..n {
        let (w, b) = match binding {
            Binding::Trainable => (
                g.param(params, &format!("l{i}.w"))?,
                g.param(params, &format!("l{i}.b"))?,
            ),
            Binding::Frozen => (
                g.constant(lookup(params, &format!("l{i}.w"))?.clone()),
                g.constant(lookup(params, &format!("l{i}.b"))?.clone()),
            ),
        };
        let a = g.matmul(h, w)?;
        h = g.add_row(a, b)?;
        if i + 1 < n {
            h = g.relu(h);
        }
    }
    Ok(h)
}

fn mlp_eval(params: &ParameterSet, x: &Tensor) -> Result<Tensor> {
    let n = layer_count(params);
    let mut h = x.clone();
    for i in 0..n {
        let w = lookup(params, &format!("l{i}.w"))?;
        let b = lookup(params, &format!("l{i}.b"))?;
        h = h.matmul(w)?.add_row(b)?;
        if i + 1 < n {
            h = h.map(|v| v.max(0.0));
        }
    }
    Ok(h)
}

fn lookup<'a>(params: &'a ParameterSet, name: &str) -> Result<&'a Tensor> {
    params
        .get(name)
        .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
}

/// Raw logits `m × K` for a batch of inputs.
pub fn classifier_logits(params: &ParameterSet, spec: &ClassifierSpec, x: &Tensor) -> Result<Tensor> {
    check_input(x, spec.input_dim)?;
    mlp_eval(params, x)
}

pub fn classifier_probs(params: &ParameterSet, spec: &ClassifierSpec, x: &Tensor) -> Result<Tensor> {
    classifier_logits(params, spec, x)?.softmax()
}

pub fn classifier_logits_graph(
    g: &mut Graph,
    params: &ParameterSet,
    spec: &ClassifierSpec,
    x: Var,
    binding: Binding,
) -> Result<Var> {
    check_input(g.value(x), spec.input_dim)?;
    mlp_graph(g, params, x, binding)
}

/// Maps pre-activations into `[lo, hi]` via `lo + (hi − lo)(tanh(a) + 1)/2`.
fn squash(spec: &GeneratorSpec, a: f64) -> f64 {
    let half = 0.5 * (spec.hi - spec.lo);
    (spec.lo + half + half * a.tanh()).clamp(spec.lo, spec.hi)
}

pub fn generate(params: &ParameterSet, spec: &GeneratorSpec, z: &Tensor) -> Result<Tensor> {
    check_input(z, spec.noise_dim)?;
    Ok(mlp_eval(params, z)?.map(|a| squash(spec, a)))
}

pub fn generate_graph(
    g: &mut Graph,
    params: &ParameterSet,
    spec: &GeneratorSpec,
    z: Var,
    binding: Binding,
) -> Result<Var> {
    check_input(g.value(z), spec.noise_dim)?;
    let a = mlp_graph(g, params, z, binding)?;
    let t = g.tanh(a);
    let half = 0.5 * (spec.hi - spec.lo);
    let scaled = g.scale(t, half);
    Ok(g.add_scalar(scaled, spec.lo + half))
}
