use crate::error::{Error, Result};
use crate::params::ParameterSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerSpec {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerSpec {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self::Sgd { lr, momentum }
    }

    pub fn adam(lr: f64) -> Self {
        Self::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Self::Sgd { lr, .. } | Self::Adam { lr, .. } => lr,
        }
    }

    fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        match *self {
            Self::Sgd { momentum, .. } if !(0.0..1.0).contains(&momentum) => Err(Error::Config(
                format!("momentum must lie in [0, 1), got {momentum}"),
            )),
            Self::Adam { beta1, beta2, eps, .. }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 =>
            {
                Err(Error::Config("adam betas must lie in [0, 1) and eps > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Stateful optimizer bound to the layout of one parameter set.
#[derive(Clone, Debug)]
pub struct Optimizer {
    spec: OptimizerSpec,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, params: &ParameterSet) -> Result<Self> {
        spec.validate()?;
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        let second = match spec {
            OptimizerSpec::Adam { .. } => zeros.clone(),
            OptimizerSpec::Sgd { .. } => Vec::new(),
        };
        Ok(Self {
            spec,
            first: zeros,
            second,
            steps: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.spec.lr()
    }

    pub fn set_lr(&mut self, new_lr: f64) -> Result<()> {
        let mut spec = self.spec;
        match &mut spec {
            OptimizerSpec::Sgd { lr, .. } | OptimizerSpec::Adam { lr, .. } => *lr = new_lr,
        }
        spec.validate()?;
        self.spec = spec;
        Ok(())
    }

    /// Applies one update using the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, parameter set has {}",
                self.first.len(),
                params.len()
            )));
        }
        self.steps += 1;
        match self.spec {
            OptimizerSpec::Sgd { lr, momentum } => {
                for (p, vel) in params.iter_mut().zip(&mut self.first) {
                    let grad = p.grad.data().to_vec();
                    for ((w, v), g) in p.value.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                        *v = momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
            }
            OptimizerSpec::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    let grad = p.grad.data().to_vec();
                    for (i, (w, g)) in p.value.data_mut().iter_mut().zip(grad).enumerate() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
