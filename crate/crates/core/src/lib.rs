//! Federated-learning simulator for studying backdoor attacks on
//! cohort-based secure aggregation (Meta-FL) against plain FL.
//!
//! All numeric code is generic over [`Real`]; the aliases at the crate root
//! fix the scalar to `f64`, which is what the experiment driver uses.

pub mod adversary;
pub mod aggregators;
pub mod config;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod learner;
pub mod linalg;
pub mod metrics;
pub mod orchestrator;
pub mod scalar;
pub mod secagg;
pub mod seed;

pub use adversary::{AttackConfig, Scenario, Scheme, SybilPlacement};
pub use aggregators::{AggregatorConfig, Rule};
pub use config::{ExperimentConfig, Overrides, Topology};
pub use datagen::TriggerSpec;
pub use error::{Error, Result};
pub use experiment::{run_experiment, RunSummary, World};
pub use learner::{ModelSpec, TrainHyper};
pub use metrics::{MetricsLog, RoundRecord};
pub use orchestrator::{FlConfig, Mode, Sampling};
pub use scalar::Real;

pub type Params = linalg::ParameterVector<f64>;
pub type Sample = datagen::Sample<f64>;
pub type Shard = datagen::ClientShard<f64>;
pub type Update = learner::ModelUpdate<f64>;
pub type State = orchestrator::GlobalState<f64>;
pub type Outcome = orchestrator::RoundOutcome<f64>;
pub type Evaluator = orchestrator::Evaluator<f64>;
pub type Trainer = orchestrator::LocalSgdTrainer<f64>;
pub type Simulation = orchestrator::Simulation<f64, Trainer>;
