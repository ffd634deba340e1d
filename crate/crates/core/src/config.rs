//! Experiment configuration: TOML schema, compact notations, overrides and
//! cross-field validation.
//!
//! A config file is plain TOML. Every key is optional and falls back to its
//! default. Two shorthand keys are accepted at the top level and expanded on
//! load: `topology = "mfl-15-5" | "fl-5"` and `scenario = "attack-1-3"`.
//!
//! ```toml
//! seed = 7
//! topology = "mfl-15-5"
//! scenario = "attack-1-3"
//!
//! [fl]
//! clients = 100
//! rounds = 30
//! server_lr = 1.0
//! sampling = "in_order"        # or "independent"
//!
//! [aggregator]
//! rule = "krum"                # fedavg | krum | cwm | trimmed_mean | rfa | norm_bound | dp
//! f = 6
//!
//! [attack]
//! scheme = "replacement"       # none | naive | replacement
//! base_label = 0
//! target_label = 1
//! poison_fraction = 0.5
//!
//! [model]
//! hidden = [32]
//!
//! [train]
//! epochs = 5
//! batch_size = 64
//! lr = 0.1
//!
//! [data]
//! train_samples = 4000
//! test_samples = 800
//! features = 32
//! classes = 4
//! alpha = 0.9
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversary::{AttackConfig, Scenario, Scheme};
use crate::aggregators::{AggregatorConfig, Rule};
use crate::error::{Error, Result};
use crate::learner::{Activation, ModelSpec, TrainHyper};
use crate::orchestrator::{FlConfig, Mode};

/// `mfl-<cohorts>-<size>` or `fl-<size>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    pub mode: Mode,
    pub cohorts: usize,
    pub cohort_size: usize,
}

impl Topology {
    pub fn apply(&self, fl: &mut FlConfig) {
        fl.mode = self.mode;
        fl.cohort_size = self.cohort_size;
        if self.mode == Mode::Meta {
            fl.cohorts = self.cohorts;
        }
    }

    pub fn of(fl: &FlConfig) -> Self {
        Self { mode: fl.mode, cohorts: fl.effective_cohorts(), cohort_size: fl.cohort_size }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            Mode::Meta => write!(f, "mfl-{}-{}", self.cohorts, self.cohort_size),
            Mode::Baseline => write!(f, "fl-{}", self.cohort_size),
        }
    }
}

impl FromStr for Topology {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse topology {s:?}; expected mfl-<cohorts>-<size> or fl-<size>"));
        let lower = s.trim().to_ascii_lowercase();
        let num = |x: &str| x.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(bad);
        if let Some(rest) = lower.strip_prefix("mfl-") {
            let (i, j) = rest.split_once('-').ok_or_else(bad)?;
            Ok(Topology { mode: Mode::Meta, cohorts: num(i)?, cohort_size: num(j)? })
        } else if let Some(rest) = lower.strip_prefix("fl-") {
            Ok(Topology { mode: Mode::Baseline, cohorts: 1, cohort_size: num(rest)? })
        } else {
            Err(bad())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![32], activation: Activation::Relu }
    }
}

/// Synthetic dataset and partition parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    pub features: usize,
    pub classes: usize,
    pub cluster_std: f64,
    /// Dirichlet concentration of the client partition.
    pub alpha: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_samples: 4000,
            test_samples: 800,
            features: 32,
            classes: 4,
            cluster_std: crate::datagen::DEFAULT_CLUSTER_STD,
            alpha: 0.9,
        }
    }
}

/// Full description of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    /// Train every client each round and report cohort-variance statistics.
    pub instrument: bool,
    pub variance_resamples: usize,
    pub fl: FlConfig,
    pub aggregator: AggregatorConfig,
    pub attack: AttackConfig,
    pub model: ModelConfig,
    pub train: TrainHyper,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            instrument: false,
            variance_resamples: 500,
            fl: FlConfig::default(),
            aggregator: AggregatorConfig::default(),
            attack: AttackConfig::default(),
            model: ModelConfig::default(),
            train: TrainHyper::default(),
            data: DataConfig::default(),
        }
    }
}

/// Command-line style overrides, applied after the file is read.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<String>,
    pub topology: Option<Topology>,
    pub scenario: Option<Scenario>,
    pub scheme: Option<Scheme>,
    pub mode: Option<Mode>,
    pub rule: Option<Rule>,
    pub rounds: Option<usize>,
    pub instrument: Option<bool>,
}

const SHORTHAND_KEYS: [&str; 2] = ["topology", "scenario"];

impl ExperimentConfig {
    /// Parses TOML text, expanding the shorthand keys. Does not validate.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut shorthand = Vec::new();
        for key in SHORTHAND_KEYS {
            if let Some(v) = table.remove(key) {
                let s = v
                    .as_str()
                    .ok_or_else(|| Error::Config(format!("{key} must be a string like \"mfl-15-5\" or \"attack-1-3\"")))?
                    .to_string();
                shorthand.push((key, s));
            }
        }
        let mut cfg: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (key, s) in shorthand {
            match key {
                "topology" => s.parse::<Topology>()?.apply(&mut cfg.fl),
                _ => cfg.attack.set_scenario(s.parse()?),
            }
        }
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Fully expanded TOML; parsing it back yields `self`.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = Some(d.clone());
        }
        if let Some(t) = o.topology {
            t.apply(&mut self.fl);
        }
        if let Some(m) = o.mode {
            self.fl.mode = m;
        }
        if let Some(s) = o.scenario {
            self.attack.set_scenario(s);
        }
        if let Some(s) = o.scheme {
            self.attack.scheme = s;
        }
        if let Some(r) = o.rule {
            self.aggregator.rule = r;
        }
        if let Some(r) = o.rounds {
            self.fl.rounds = r;
        }
        if let Some(i) = o.instrument {
            self.instrument = i;
        }
    }

    pub fn topology(&self) -> Topology {
        Topology::of(&self.fl)
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            d_in: self.data.features,
            hidden: self.model.hidden.clone(),
            n_classes: self.data.classes,
            activation: self.model.activation,
        }
    }

    /// Cross-field checks; messages name the offending keys.
    pub fn validate(&self) -> Result<()> {
        self.fl.validate()?;
        self.aggregator.validate()?;
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model_spec().validate().map_err(|e| Error::Config(e.to_string()))?;

        let n = self.fl.aggregands_per_round();
        if self.aggregator.rule == Rule::Krum && n < 2 * self.aggregator.f + 3 {
            return Err(Error::Config(format!(
                "krum with f = {} needs at least {} aggregands but {} provides {n}; lower aggregator.f or add cohorts",
                self.aggregator.f,
                2 * self.aggregator.f + 3,
                self.topology()
            )));
        }
        if self.aggregator.rule == Rule::TrimmedMean && n <= 2 * crate::aggregators::trim_count(n, self.aggregator.beta) {
            return Err(Error::Config(format!("trimmed_mean with beta = {} discards all {n} aggregands", self.aggregator.beta)));
        }

        let d = &self.data;
        if d.classes < 2 || d.features < 4 {
            return Err(Error::Config("data needs classes >= 2 and features >= 4".into()));
        }
        if d.train_samples < self.fl.clients {
            return Err(Error::Config(format!(
                "data.train_samples = {} cannot give each of {} clients a sample",
                d.train_samples, self.fl.clients
            )));
        }
        if d.test_samples < d.classes {
            return Err(Error::Config("data.test_samples must cover every class".into()));
        }
        if !(d.alpha > 0.0 && d.alpha.is_finite()) {
            return Err(Error::Config(format!("data.alpha must be positive, got {}", d.alpha)));
        }
        if !(d.cluster_std >= 0.0 && d.cluster_std.is_finite()) {
            return Err(Error::Config("data.cluster_std must be >= 0".into()));
        }

        self.attack.validate(d.classes)?;
        if self.attack.scheme != Scheme::None {
            match self.fl.mode {
                Mode::Meta => {
                    if self.attack.k > self.fl.cohorts {
                        return Err(Error::Config(format!(
                            "attack k = {} exceeds the {} cohorts",
                            self.attack.k, self.fl.cohorts
                        )));
                    }
                    if self.attack.sybils_per_cohort > self.fl.cohort_size {
                        return Err(Error::Config("attack.sybils_per_cohort exceeds the cohort size".into()));
                    }
                }
                Mode::Baseline => {
                    if self.attack.k > self.fl.cohort_size {
                        return Err(Error::Config(format!(
                            "attack k = {} exceeds the cohort size {}",
                            self.attack.k, self.fl.cohort_size
                        )));
                    }
                }
            }
        }
        if self.instrument && self.variance_resamples < 2 {
            return Err(Error::Config("variance_resamples must be >= 2".into()));
        }
        Ok(())
    }
}
