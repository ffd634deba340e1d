//! Backdoor attackers: fixed-frequency sybil placement, naive poisoned
//! training and model-replacement scaling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::datagen::{ClientShard, TriggerSpec};
use crate::error::{Error, Result};
use crate::learner::{local_train, ModelSpec, ModelUpdate, TrainHyper};
use crate::linalg::ParameterVector;
use crate::orchestrator::Mode;
use crate::scalar::Real;
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    None,
    Naive,
    Replacement,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::None => "none",
            Scheme::Naive => "naive",
            Scheme::Replacement => "replacement",
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Scheme::None),
            "naive" => Ok(Scheme::Naive),
            "replacement" => Ok(Scheme::Replacement),
            _ => Err(Error::Config(format!("unknown attack scheme {s:?}; expected none, naive or replacement"))),
        }
    }
}

/// `attack-f-k`: `k` sybils (baseline) or `k` adversarial cohorts (Meta-FL) every `f` rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scenario {
    pub frequency: usize,
    pub k: usize,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "attack-{}-{}", self.frequency, self.k)
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse scenario {s:?}; expected attack-<frequency>-<k>"));
        let rest = s.trim().to_ascii_lowercase();
        let rest = rest.strip_prefix("attack-").ok_or_else(bad)?;
        let (f, k) = rest.split_once('-').ok_or_else(bad)?;
        let frequency: usize = f.parse().map_err(|_| bad())?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if frequency == 0 || k == 0 {
            return Err(Error::Config(format!("scenario {s:?}: frequency and k must be >= 1")));
        }
        Ok(Scenario { frequency, k })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub scheme: Scheme,
    pub frequency: usize,
    pub k: usize,
    pub base_label: usize,
    pub target_label: usize,
    pub poison_fraction: f64,
    /// Sybils per adversarial cohort in Meta-FL.
    pub sybils_per_cohort: usize,
    pub trigger: TriggerSpec,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::None,
            frequency: 1,
            k: 1,
            base_label: 0,
            target_label: 1,
            poison_fraction: 0.5,
            sybils_per_cohort: 1,
            trigger: TriggerSpec::default(),
        }
    }
}

impl AttackConfig {
    pub fn scenario(&self) -> Scenario {
        Scenario { frequency: self.frequency, k: self.k }
    }

    pub fn set_scenario(&mut self, s: Scenario) {
        self.frequency = s.frequency;
        self.k = s.k;
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.frequency == 0 || self.k == 0 || self.sybils_per_cohort == 0 {
            return Err(Error::Config("attack frequency, k and sybils_per_cohort must be >= 1".into()));
        }
        if self.base_label == self.target_label {
            return Err(Error::Config("attack base_label and target_label must differ".into()));
        }
        if self.base_label >= n_classes || self.target_label >= n_classes {
            return Err(Error::Config(format!("attack labels must be below the class count {n_classes}")));
        }
        if !(self.poison_fraction > 0.0 && self.poison_fraction <= 1.0) {
            return Err(Error::Config(format!("poison_fraction must lie in (0, 1], got {}", self.poison_fraction)));
        }
        self.trigger.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// 1-indexed rounds; true iff `round` is a multiple of `frequency`.
pub fn is_attack_round(round: usize, frequency: usize) -> Result<bool> {
    if round == 0 {
        return Err(Error::invalid("rounds are 1-indexed"));
    }
    if frequency == 0 {
        return Err(Error::invalid("attack frequency must be >= 1"));
    }
    Ok(round.is_multiple_of(frequency))
}

/// Which cohort slots are taken over by sybils in one round.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SybilPlacement {
    pub round: usize,
    slots: BTreeMap<usize, BTreeSet<usize>>,
}

impl SybilPlacement {
    pub fn empty(round: usize) -> Self {
        Self { round, slots: BTreeMap::new() }
    }

    pub fn is_sybil(&self, cohort: usize, slot: usize) -> bool {
        self.slots.get(&cohort).is_some_and(|s| s.contains(&slot))
    }

    pub fn sybils_in(&self, cohort: usize) -> usize {
        self.slots.get(&cohort).map_or(0, |s| s.len())
    }

    /// Cohorts holding at least one sybil.
    pub fn adversarial_cohorts(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().filter(|(_, s)| !s.is_empty()).map(|(&c, _)| c)
    }

    /// Sybil slots of the single baseline cohort.
    pub fn baseline_slots(&self) -> BTreeSet<usize> {
        self.slots.get(&0).cloned().unwrap_or_default()
    }

    pub fn total(&self) -> usize {
        self.slots.values().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }
}

/// Seeded sybil placement for `round`. Sybils replace sampled members, so
/// cohort sizes never change.
pub fn place_sybils(
    round: usize,
    cohorts: &[Vec<usize>],
    mode: Mode,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<SybilPlacement> {
    if cfg.scheme == Scheme::None || !is_attack_round(round, cfg.frequency)? {
        return Ok(SybilPlacement::empty(round));
    }
    let mut rng = seed::rng(seed, Stream::Placement, &[round as u64]);
    let mut slots = BTreeMap::new();
    match mode {
        Mode::Baseline => {
            let cohort = cohorts.first().ok_or(Error::Empty("no cohort to attack"))?;
            if cfg.k > cohort.len() {
                return Err(Error::Attack(format!("{} sybils exceed the cohort size {}", cfg.k, cohort.len())));
            }
            slots.insert(0, sample(&mut rng, cohort.len(), cfg.k).into_iter().collect());
        }
        Mode::Meta => {
            if cfg.k > cohorts.len() {
                return Err(Error::Attack(format!("{} adversarial cohorts exceed the {} cohorts", cfg.k, cohorts.len())));
            }
            for c in sample(&mut rng, cohorts.len(), cfg.k).into_iter() {
                let size = cohorts[c].len();
                if cfg.sybils_per_cohort > size {
                    return Err(Error::Attack(format!(
                        "{} sybils per cohort exceed the cohort size {size}",
                        cfg.sybils_per_cohort
                    )));
                }
                slots.insert(c, sample(&mut rng, size, cfg.sybils_per_cohort).into_iter().collect());
            }
        }
    }
    Ok(SybilPlacement { round, slots })
}

/// Plain local training on a poisoned shard.
pub fn craft_naive_update<T: Real>(
    global: &ParameterVector<T>,
    poisoned_shard: &ClientShard<T>,
    spec: &ModelSpec,
    h: &TrainHyper,
) -> Result<ModelUpdate<T>> {
    if !poisoned_shard.poisoned {
        return Err(Error::Attack(format!("shard of client {} is not poisoned", poisoned_shard.client_id)));
    }
    local_train(global, poisoned_shard, spec, h)
}

/// Scales a naive update by `scaling_factor / n_colluders`.
pub fn craft_replacement_update<T: Real>(
    naive: &ModelUpdate<T>,
    scaling_factor: f64,
    n_colluders: usize,
) -> Result<ModelUpdate<T>> {
    if !(scaling_factor > 0.0 && scaling_factor.is_finite()) {
        return Err(Error::invalid(format!("scaling factor must be positive, got {scaling_factor}")));
    }
    if n_colluders == 0 {
        return Err(Error::invalid("at least one colluder required"));
    }
    Ok(ModelUpdate {
        delta: naive.delta.scaled(T::of(scaling_factor / n_colluders as f64)),
        client_id: naive.client_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregators::fedavg;
    use crate::datagen::{build_poisoned_shard, generate_dataset};
    use crate::learner::{attack_success_rate, init_model};

    #[test]
    fn attack_rounds() {
        assert!((1..=10).all(|t| is_attack_round(t, 1).unwrap()));
        let hits: Vec<usize> = (1..=15).filter(|&t| is_attack_round(t, 5).unwrap()).collect();
        assert_eq!(hits, vec![5, 10, 15]);
        assert!(is_attack_round(0, 5).is_err());
    }

    #[test]
    fn scenario_notation() {
        let s: Scenario = "attack-1-5".parse().unwrap();
        assert_eq!(s, Scenario { frequency: 1, k: 5 });
        assert_eq!(s.to_string(), "attack-1-5");
        assert_eq!("Attack-5-3".parse::<Scenario>().unwrap(), Scenario { frequency: 5, k: 3 });
        for bad in ["attack-0-3", "attack-3", "atk-1-1", "attack-a-2", "attack-1-0"] {
            assert!(bad.parse::<Scenario>().is_err(), "{bad}");
        }
    }

    fn cohorts(pi: usize, c: usize) -> Vec<Vec<usize>> {
        (0..pi).map(|j| (0..c).map(|i| j * c + i).collect()).collect()
    }

    fn active(k: usize) -> AttackConfig {
        AttackConfig { scheme: Scheme::Replacement, k, ..Default::default() }
    }

    #[test]
    fn placement_counts() {
        let p = place_sybils(1, &cohorts(15, 5), Mode::Meta, &active(3), 9).unwrap();
        assert_eq!(p.adversarial_cohorts().count(), 3);
        assert!(p.adversarial_cohorts().all(|c| p.sybils_in(c) == 1));
        assert_eq!(p.total(), 3);

        let b = place_sybils(1, &cohorts(1, 5), Mode::Baseline, &active(2), 9).unwrap();
        assert_eq!(b.baseline_slots().len(), 2);
        assert!(b.baseline_slots().iter().all(|&s| s < 5));
    }

    #[test]
    fn placement_quiet_rounds_and_determinism() {
        let cfg = AttackConfig { frequency: 3, ..active(2) };
        assert!(place_sybils(2, &cohorts(4, 3), Mode::Meta, &cfg, 1).unwrap().is_empty());
        assert!(!place_sybils(3, &cohorts(4, 3), Mode::Meta, &cfg, 1).unwrap().is_empty());
        let none = AttackConfig { scheme: Scheme::None, ..cfg };
        assert!(place_sybils(3, &cohorts(4, 3), Mode::Meta, &none, 1).unwrap().is_empty());
        assert_eq!(
            place_sybils(6, &cohorts(4, 3), Mode::Meta, &cfg, 1).unwrap(),
            place_sybils(6, &cohorts(4, 3), Mode::Meta, &cfg, 1).unwrap()
        );
    }

    #[test]
    fn placement_capacity() {
        assert!(place_sybils(1, &cohorts(2, 5), Mode::Meta, &active(3), 0).is_err());
        assert!(place_sybils(1, &cohorts(1, 2), Mode::Baseline, &active(3), 0).is_err());
        let many = AttackConfig { sybils_per_cohort: 4, ..active(1) };
        assert!(place_sybils(1, &cohorts(2, 3), Mode::Meta, &many, 0).is_err());
    }

    #[test]
    fn replacement_scaling() {
        let naive = ModelUpdate { delta: ParameterVector::new(vec![0.2, -1.0, 3.0]).unwrap(), client_id: 4 };
        let five = craft_replacement_update(&naive, 5.0, 1).unwrap();
        assert_eq!(five.delta, naive.delta.scaled(5.0));
        let shared = craft_replacement_update(&naive, 5.0, 5).unwrap();
        assert_eq!(shared.delta, naive.delta);
        assert!(craft_replacement_update(&naive, 0.0, 1).is_err());
        assert!(craft_replacement_update(&naive, 1.0, 0).is_err());
        let ab = craft_replacement_update(&naive, 6.0, 1).unwrap();
        let a_then_b = craft_replacement_update(&craft_replacement_update(&naive, 2.0, 1).unwrap(), 3.0, 1).unwrap();
        assert!(ab.delta.iter().zip(a_then_b.delta.iter()).all(|(x, y): (&f64, &f64)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn replacement_identity_under_mean() {
        // (c * adv + Σ benign) / c = adv + mean(benign) * (c - 1) / c
        let c = 5;
        let benign: Vec<ParameterVector<f64>> = (0..c - 1)
            .map(|i| ParameterVector::new(vec![i as f64 * 0.1, 1.0 - i as f64]).unwrap())
            .collect();
        let naive = ModelUpdate { delta: ParameterVector::new(vec![0.7, -0.3]).unwrap(), client_id: 0 };
        let adv = craft_replacement_update(&naive, c as f64, 1).unwrap();
        let mut all = benign.clone();
        all.push(adv.delta.clone());
        let agg = fedavg(&all).unwrap();
        let mb = fedavg(&benign).unwrap();
        for j in 0..2 {
            let expect = naive.delta[j] + mb[j] * (c - 1) as f64 / c as f64;
            assert!((agg[j] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn naive_update_requires_poisoned_shard_and_learns_backdoor() {
        let spec = ModelSpec::new(32, vec![32], 4);
        let samples = generate_dataset::<f64>(200, 32, 4, 5).unwrap();
        let clean = ClientShard { client_id: 2, samples, poisoned: false };
        let g = init_model(&spec, 3).unwrap();
        let h = TrainHyper { epochs: 10, batch_size: 32, ..TrainHyper::default() }.with_seed(1);
        assert!(craft_naive_update(&g, &clean, &spec, &h).is_err());

        let t = TriggerSpec::default();
        let poisoned = build_poisoned_shard(&clean, 0, 1, 0.5, &t, 7).unwrap();
        let adv = craft_naive_update(&g, &poisoned, &spec, &h).unwrap();
        assert_eq!(adv, craft_naive_update(&g, &poisoned, &spec, &h).unwrap());
        let benign = local_train(&g, &clean, &spec, &h).unwrap();

        let base: Vec<_> = clean.samples.iter().filter(|s| s.label == 0).cloned().collect();
        let adv_model = g.add(&adv.delta).unwrap();
        let clean_model = g.add(&benign.delta).unwrap();
        let asr_adv = attack_success_rate(&adv_model, &base, &t, 1, &spec).unwrap();
        let asr_clean = attack_success_rate(&clean_model, &base, &t, 1, &spec).unwrap();
        assert!(asr_adv > asr_clean, "{asr_adv} vs {asr_clean}");
    }

    #[test]
    fn naive_update_shrinks_towards_benign_with_fraction() {
        let spec = ModelSpec::new(32, vec![32], 4);
        let samples = generate_dataset::<f64>(200, 32, 4, 8).unwrap();
        let clean = ClientShard { client_id: 1, samples, poisoned: false };
        let g = init_model(&spec, 4).unwrap();
        let h = TrainHyper { epochs: 5, batch_size: 32, ..TrainHyper::default() }.with_seed(2);
        let benign = local_train(&g, &clean, &spec, &h).unwrap();
        let t = TriggerSpec::default();
        let dists: Vec<f64> = [0.1, 0.3, 0.5]
            .iter()
            .map(|&frac| {
                let p = build_poisoned_shard(&clean, 0, 1, frac, &t, 3).unwrap();
                craft_naive_update(&g, &p, &spec, &h).unwrap().delta.dist(&benign.delta)
            })
            .collect();
        assert!(dists[0] < dists[1] && dists[1] < dists[2], "{dists:?}");
    }
}
