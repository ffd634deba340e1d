//! Builds a concrete world from an [`ExperimentConfig`] and runs it.

use serde::Serialize;

use crate::adversary::Scheme;
use crate::config::ExperimentConfig;
use crate::datagen::{dirichlet_partition, SyntheticSpec};
use crate::error::Result;
use crate::learner::init_model;
use crate::metrics::{MetricsLog, RoundRecord};
use crate::orchestrator::{Evaluator, GlobalState, Instrumentation, LocalSgdTrainer, Simulation};
use crate::seed::{self, Stream};

/// Data, trainer and initial model for one configuration.
pub struct World {
    pub trainer: LocalSgdTrainer<f64>,
    pub evaluator: Evaluator<f64>,
    pub init: GlobalState<f64>,
}

impl World {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.data;
        let spec = cfg.model_spec();
        let synth = SyntheticSpec { cluster_std: d.cluster_std, ..SyntheticSpec::new(d.train_samples + d.test_samples, d.features, d.classes) };
        let mut all = synth.generate::<f64>(cfg.seed)?;
        let test = all.split_off(d.train_samples);
        let shards = dirichlet_partition(&all, cfg.fl.clients, d.alpha, cfg.seed)?;
        let mut trainer = LocalSgdTrainer::new(shards, spec.clone(), cfg.train, cfg.seed);
        if cfg.attack.scheme != Scheme::None {
            trainer = trainer.with_poison(&cfg.attack)?;
        }
        let evaluator = Evaluator::new(spec.clone(), test, cfg.attack.trigger, cfg.attack.base_label, cfg.attack.target_label);
        let model = init_model(&spec, seed::derive(cfg.seed, Stream::Init, &[]))?;
        Ok(Self { trainer, evaluator, init: GlobalState { round: 0, model, seed: cfg.seed } })
    }
}

/// Runs every round of `cfg` and returns the per-round metrics.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsLog> {
    let World { trainer, evaluator, init } = World::build(cfg)?;
    let mut aggregator = cfg.aggregator;
    aggregator.seed = seed::derive(cfg.seed, Stream::Noise, &[cfg.aggregator.seed]);
    let mut sim = Simulation::new(cfg.fl, aggregator, cfg.attack, trainer);
    if cfg.instrument {
        sim = sim.instrumented(Instrumentation { resamples: cfg.variance_resamples });
    }
    let (_, rows) = sim.run(init, &evaluator)?;
    Ok(MetricsLog { rows })
}

/// Resolved configuration plus the last round's metrics.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub topology: String,
    pub scenario: String,
    pub config: ExperimentConfig,
    pub final_round: Option<RoundRecord>,
}

impl RunSummary {
    pub fn new(cfg: &ExperimentConfig, log: &MetricsLog) -> Self {
        Self {
            topology: cfg.topology().to_string(),
            scenario: cfg.attack.scenario().to_string(),
            config: cfg.clone(),
            final_round: log.last().cloned(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}
