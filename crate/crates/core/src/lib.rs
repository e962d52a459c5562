//! Data-free class unlearning.
//!
//! A frozen teacher classifier is distilled into a fresh student through
//! samples drawn from an adversarially trained generator. Forgetting is
//! achieved by shaping what the generator explores and what the student is
//! taught, never by touching real data. The crate bundles the numeric
//! substrate (tensors and reverse-mode autodiff), MLP models, all
//! distillation objectives and filters, the training loops, and the
//! evaluation metrics.

pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod filters;
pub mod graph;
pub mod losses;
pub mod models;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use data::{BlobSpec, Dataset, Split};
pub use engine::{LrDecay, Method, MethodSpec, StepLog, SupConfig, TrainConfig};
pub use error::{Error, Result};
pub use eval::{MetricReport, RelearnConfig, RunMetrics, ShadowConfig};
pub use filters::{FilterConfig, FilterOutcome};
pub use graph::{Graph, Var};
pub use losses::{LabelSplit, LossValue};
pub use models::{Binding, ClassifierSpec, GeneratorSpec};
pub use optim::{Optimizer, OptimizerSpec};
pub use params::ParameterSet;
pub use rng::Rng;
pub use tensor::Tensor;
