//! Training loops for baseline FL and Meta-FL, cohort sampling, and the
//! cohort-variance instrumentation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{craft_naive_update, craft_replacement_update, place_sybils, AttackConfig, Scheme, SybilPlacement};
use crate::aggregators::{AggregatorConfig, CohortAggregate};
use crate::datagen::{build_poisoned_shard, ClientShard, Sample, TriggerSpec};
use crate::error::{Error, Result};
use crate::learner::{attack_success_rate, evaluate, local_train, ModelSpec, ModelUpdate, TrainHyper};
use crate::linalg::{mean_vectors, ParameterVector};
use crate::metrics::RoundRecord;
use crate::scalar::Real;
use crate::secagg::{MaskedUpdate, SecAggSession};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    #[default]
    Meta,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Meta => "meta",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "meta" => Ok(Mode::Meta),
            _ => Err(Error::Config(format!("unknown mode {s:?}; expected baseline or meta"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// One shuffled draw split into disjoint cohorts.
    #[default]
    InOrder,
    /// Each cohort drawn on its own; cohorts may overlap.
    Independent,
}

/// Federation topology and server schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlConfig {
    /// Total participating clients.
    pub clients: usize,
    /// Cohorts per round; baseline mode always uses one.
    pub cohorts: usize,
    pub cohort_size: usize,
    pub server_lr: f64,
    pub rounds: usize,
    pub sampling: Sampling,
    pub mode: Mode,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            clients: 100,
            cohorts: 15,
            cohort_size: 5,
            server_lr: 1.0,
            rounds: 30,
            sampling: Sampling::InOrder,
            mode: Mode::Meta,
        }
    }
}

impl FlConfig {
    /// Cohorts actually sampled per round.
    pub fn effective_cohorts(&self) -> usize {
        match self.mode {
            Mode::Baseline => 1,
            Mode::Meta => self.cohorts,
        }
    }

    /// Aggregands the server rule sees per round.
    pub fn aggregands_per_round(&self) -> usize {
        match self.mode {
            Mode::Baseline => self.cohort_size,
            Mode::Meta => self.cohorts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pi = self.effective_cohorts();
        if self.clients < 2 {
            return Err(Error::Config(format!("need at least 2 clients, got {}", self.clients)));
        }
        if self.cohort_size < 2 {
            return Err(Error::Config(format!(
                "cohort_size must be >= 2 for pairwise masking, got {}",
                self.cohort_size
            )));
        }
        if pi == 0 {
            return Err(Error::Config("cohorts must be >= 1".into()));
        }
        if self.cohort_size > self.clients {
            return Err(Error::Config(format!(
                "cohort_size {} exceeds the {} clients",
                self.cohort_size, self.clients
            )));
        }
        if self.sampling == Sampling::InOrder && pi * self.cohort_size > self.clients {
            return Err(Error::Config(format!(
                "in_order sampling needs cohorts * cohort_size <= clients ({pi} * {} > {}); use sampling = \"independent\" or add clients",
                self.cohort_size, self.clients
            )));
        }
        if !(self.server_lr > 0.0 && self.server_lr.is_finite()) {
            return Err(Error::Config(format!("server_lr must be positive, got {}", self.server_lr)));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        Ok(())
    }
}

/// Draws `pi` cohorts of `c` distinct clients each.
pub fn sample_cohorts(
    client_ids: &[usize],
    pi: usize,
    c: usize,
    mode: Sampling,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let p = client_ids.len();
    if pi == 0 || c == 0 {
        return Err(Error::invalid("cohort count and size must be positive"));
    }
    if c > p {
        return Err(Error::invalid(format!("cohort size {c} exceeds the {p} clients")));
    }
    let mut rng = seed::rng(seed, Stream::Cohorts, &[]);
    match mode {
        Sampling::InOrder => {
            if pi * c > p {
                return Err(Error::invalid(format!("{pi} disjoint cohorts of {c} need more than {p} clients")));
            }
            let mut ids = client_ids.to_vec();
            ids.shuffle(&mut rng);
            Ok(ids.chunks(c).take(pi).map(<[usize]>::to_vec).collect())
        }
        Sampling::Independent => Ok((0..pi)
            .map(|_| sample(&mut rng, p, c).into_iter().map(|i| client_ids[i]).collect())
            .collect()),
    }
}

/// Model state carried between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState<T> {
    /// Number of completed rounds.
    pub round: usize,
    pub model: ParameterVector<T>,
    /// Master seed every per-round stream is derived from.
    pub seed: u64,
}

/// Produces client updates for a round. Implementations must be pure in
/// `(round, client_id, global)` so that parallel schedules match serial ones.
pub trait ClientTrainer<T: Real>: Sync {
    fn benign(&self, round: usize, client_id: usize, global: &ParameterVector<T>) -> Result<ModelUpdate<T>>;

    /// Unscaled adversarial update of the sybil occupying `client_id`'s slot.
    fn sybil(&self, round: usize, client_id: usize, global: &ParameterVector<T>) -> Result<ModelUpdate<T>>;
}

/// Local SGD over each client's Dirichlet shard; sybils train on a poisoned
/// copy of the shard of the slot they replaced.
pub struct LocalSgdTrainer<T> {
    pub shards: Vec<ClientShard<T>>,
    poisoned: Vec<ClientShard<T>>,
    pub spec: ModelSpec,
    pub hyper: TrainHyper,
    pub seed: u64,
}

impl<T: Real> LocalSgdTrainer<T> {
    pub fn new(shards: Vec<ClientShard<T>>, spec: ModelSpec, hyper: TrainHyper, seed: u64) -> Self {
        Self { shards, poisoned: Vec::new(), spec, hyper, seed }
    }

    /// Prepares the poisoned shard of every client.
    pub fn with_poison(mut self, atk: &AttackConfig) -> Result<Self> {
        self.poisoned = self
            .shards
            .iter()
            .map(|s| {
                build_poisoned_shard(s, atk.base_label, atk.target_label, atk.poison_fraction, &atk.trigger, self.seed)
            })
            .collect::<Result<_>>()?;
        Ok(self)
    }

    fn shard(&self, client_id: usize) -> Result<&ClientShard<T>> {
        self.shards.get(client_id).ok_or(Error::UnknownClient(client_id))
    }

    fn hyper_for(&self, round: usize, client_id: usize, sybil: bool) -> TrainHyper {
        self.hyper
            .with_seed(seed::derive(self.seed, Stream::Train, &[round as u64, client_id as u64, sybil as u64]))
    }
}

impl<T: Real> ClientTrainer<T> for LocalSgdTrainer<T> {
    fn benign(&self, round: usize, client_id: usize, global: &ParameterVector<T>) -> Result<ModelUpdate<T>> {
        local_train(global, self.shard(client_id)?, &self.spec, &self.hyper_for(round, client_id, false))
    }

    fn sybil(&self, round: usize, client_id: usize, global: &ParameterVector<T>) -> Result<ModelUpdate<T>> {
        let shard = self
            .poisoned
            .get(client_id)
            .ok_or_else(|| Error::Attack(format!("no poisoned shard prepared for client {client_id}")))?;
        craft_naive_update(global, shard, &self.spec, &self.hyper_for(round, client_id, true))
    }
}

/// Counts what crossed the server boundary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServerAudit {
    pub plain_updates: usize,
    pub masked_updates: usize,
    pub sessions_finalized: usize,
}

/// Server-side view: it only ever receives plain updates (baseline) or
/// masked uploads plus a session to finalize (Meta-FL).
#[derive(Debug, Default)]
struct Server {
    audit: ServerAudit,
}

impl Server {
    fn receive_plain<T: Real>(&mut self, updates: Vec<ModelUpdate<T>>) -> Vec<ParameterVector<T>> {
        self.audit.plain_updates += updates.len();
        updates.into_iter().map(|u| u.delta).collect()
    }

    fn unmask<T: Real>(&mut self, session: &mut SecAggSession, masked: &[MaskedUpdate<T>]) -> Result<ParameterVector<T>> {
        self.audit.masked_updates += masked.len();
        let agg = session.finalize(masked, &BTreeSet::new())?;
        self.audit.sessions_finalized += 1;
        Ok(agg)
    }

    fn step<T: Real>(
        &self,
        state: &GlobalState<T>,
        rule: &AggregatorConfig,
        server_lr: f64,
        aggregands: &[ParameterVector<T>],
    ) -> Result<GlobalState<T>> {
        let round = state.round + 1;
        let update = rule.apply(aggregands, round as u64)?;
        let mut model = state.model.clone();
        model.axpy(T::of(server_lr), &update)?;
        if let Some(index) = model.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(GlobalState { round, model, seed: state.seed })
    }
}

/// Everything one round produced.
#[derive(Debug, Clone)]
pub struct RoundOutcome<T> {
    pub state: GlobalState<T>,
    pub cohorts: Vec<Vec<usize>>,
    pub placement: SybilPlacement,
    /// What the server rule consumed: client updates (baseline) or cohort means (Meta-FL).
    pub aggregands: Vec<CohortAggregate<T>>,
    pub variance: Option<VarianceReport>,
}

/// Held-out evaluation data fixed at experiment start.
#[derive(Debug, Clone)]
pub struct Evaluator<T> {
    pub spec: ModelSpec,
    pub test: Vec<Sample<T>>,
    /// Clean base-class test samples; the trigger is applied at evaluation.
    pub base: Vec<Sample<T>>,
    pub trigger: TriggerSpec,
    pub target_label: usize,
}

impl<T: Real> Evaluator<T> {
    pub fn new(spec: ModelSpec, test: Vec<Sample<T>>, trigger: TriggerSpec, base_label: usize, target_label: usize) -> Self {
        let base = test.iter().filter(|s| s.label == base_label).cloned().collect();
        Self { spec, test, base, trigger, target_label }
    }

    pub fn accuracy(&self, params: &ParameterVector<T>) -> Result<f64> {
        evaluate(params, &self.test, &self.spec)
    }

    pub fn attack_success(&self, params: &ParameterVector<T>) -> Result<f64> {
        attack_success_rate(params, &self.base, &self.trigger, self.target_label, &self.spec)
    }
}

/// Variance-instrumentation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Instrumentation {
    /// Cohorts resampled per round to estimate the aggregate variance.
    pub resamples: usize,
}

/// One configured federation, ready to run rounds.
pub struct Simulation<T: Real, C: ClientTrainer<T>> {
    pub fl: FlConfig,
    pub aggregator: AggregatorConfig,
    pub attack: AttackConfig,
    pub trainer: C,
    pub instrumentation: Option<Instrumentation>,
    server: Server,
    _scalar: std::marker::PhantomData<T>,
}

impl<T: Real, C: ClientTrainer<T>> Simulation<T, C> {
    pub fn new(fl: FlConfig, aggregator: AggregatorConfig, attack: AttackConfig, trainer: C) -> Self {
        Self {
            fl,
            aggregator,
            attack,
            trainer,
            instrumentation: None,
            server: Server::default(),
            _scalar: std::marker::PhantomData,
        }
    }

    pub fn instrumented(mut self, inst: Instrumentation) -> Self {
        self.instrumentation = Some(inst);
        self
    }

    pub fn audit(&self) -> ServerAudit {
        self.server.audit
    }

    /// Runs round `state.round + 1` in the configured mode.
    pub fn run_round(&mut self, state: &GlobalState<T>) -> Result<RoundOutcome<T>> {
        let round = state.round + 1;
        let out = match self.fl.mode {
            Mode::Baseline => self.run_round_baseline(state),
            Mode::Meta => self.run_round_meta(state),
        };
        out.map_err(|e| e.at_round(round))
    }

    fn client_ids(&self) -> Vec<usize> {
        (0..self.fl.clients).collect()
    }

    fn sample_and_place(&self, round: usize, seed: u64, mode: Mode) -> Result<(Vec<Vec<usize>>, SybilPlacement)> {
        let pi = match mode {
            Mode::Baseline => 1,
            Mode::Meta => self.fl.cohorts,
        };
        let cohorts = sample_cohorts(
            &self.client_ids(),
            pi,
            self.fl.cohort_size,
            self.fl.sampling,
            seed::derive(seed, Stream::Cohorts, &[round as u64]),
        )?;
        let placement = place_sybils(round, &cohorts, mode, &self.attack, seed)?;
        Ok((cohorts, placement))
    }

    /// Trains every distinct `(client, is_sybil)` pair once, in parallel.
    fn train_all(
        &self,
        round: usize,
        global: &ParameterVector<T>,
        jobs: BTreeSet<(usize, bool)>,
    ) -> Result<BTreeMap<(usize, bool), ModelUpdate<T>>> {
        let jobs: Vec<(usize, bool)> = jobs.into_iter().collect();
        let trained: Vec<ModelUpdate<T>> = jobs
            .par_iter()
            .map(|&(id, sybil)| {
                if sybil {
                    self.trainer.sybil(round, id, global)
                } else {
                    self.trainer.benign(round, id, global)
                }
            })
            .collect::<Result<_>>()?;
        Ok(jobs.into_iter().zip(trained).collect())
    }

    /// Client-side update for one cohort slot, with replacement scaling applied.
    fn slot_update(
        &self,
        trained: &BTreeMap<(usize, bool), ModelUpdate<T>>,
        placement: &SybilPlacement,
        cohort_index: usize,
        slot: usize,
        client_id: usize,
    ) -> Result<ModelUpdate<T>> {
        let sybil = placement.is_sybil(cohort_index, slot);
        let naive = &trained[&(client_id, sybil)];
        if sybil && self.attack.scheme == Scheme::Replacement {
            craft_replacement_update(naive, self.fl.cohort_size as f64, placement.sybils_in(cohort_index))
        } else {
            Ok(naive.clone())
        }
    }

    fn jobs(&self, cohorts: &[Vec<usize>], placement: &SybilPlacement) -> BTreeSet<(usize, bool)> {
        let mut jobs = BTreeSet::new();
        for (j, cohort) in cohorts.iter().enumerate() {
            for (s, &id) in cohort.iter().enumerate() {
                jobs.insert((id, placement.is_sybil(j, s)));
            }
        }
        if self.instrumentation.is_some() {
            jobs.extend((0..self.fl.clients).map(|id| (id, false)));
        }
        jobs
    }

    fn variance(
        &self,
        round: usize,
        seed: u64,
        trained: &BTreeMap<(usize, bool), ModelUpdate<T>>,
    ) -> Result<Option<VarianceReport>> {
        let Some(inst) = self.instrumentation else { return Ok(None) };
        let population: Vec<ParameterVector<T>> =
            (0..self.fl.clients).map(|id| trained[&(id, false)].delta.clone()).collect();
        let c = self.fl.cohort_size;
        let means = resample_cohort_means(&population, c, inst.resamples, seed::derive(seed, Stream::Variance, &[round as u64]))?;
        variance_report(&population, &means, c).map(Some)
    }

    /// One Meta-FL round: per-cohort secure aggregation, then the rule over cohort means.
    pub fn run_round_meta(&mut self, state: &GlobalState<T>) -> Result<RoundOutcome<T>> {
        let round = state.round + 1;
        let (cohorts, placement) = self.sample_and_place(round, state.seed, Mode::Meta)?;
        let trained = self.train_all(round, &state.model, self.jobs(&cohorts, &placement))?;
        let dim = state.model.dim();

        let mut aggregands = Vec::with_capacity(cohorts.len());
        for (j, cohort) in cohorts.iter().enumerate() {
            let mut session =
                SecAggSession::prepare(cohort, dim, seed::derive(state.seed, Stream::SecAgg, &[round as u64, j as u64]))?;
            let mut uploads = Vec::with_capacity(cohort.len());
            for (s, &id) in cohort.iter().enumerate() {
                let update = self.slot_update(&trained, &placement, j, s, id)?;
                uploads.push(session.commit(id, &update.delta)?);
            }
            let delta = self.server.unmask(&mut session, &uploads)?;
            aggregands.push(CohortAggregate { delta, cohort_index: j, adversarial: placement.sybils_in(j) > 0 });
        }

        let deltas: Vec<ParameterVector<T>> = aggregands.iter().map(|a| a.delta.clone()).collect();
        let next = self.server.step(state, &self.aggregator, self.fl.server_lr, &deltas)?;
        let variance = self.variance(round, state.seed, &trained)?;
        Ok(RoundOutcome { state: next, cohorts, placement, aggregands, variance })
    }

    /// One baseline round: the rule runs directly on the cohort's client updates.
    pub fn run_round_baseline(&mut self, state: &GlobalState<T>) -> Result<RoundOutcome<T>> {
        let round = state.round + 1;
        let (cohorts, placement) = self.sample_and_place(round, state.seed, Mode::Baseline)?;
        let trained = self.train_all(round, &state.model, self.jobs(&cohorts, &placement))?;

        let cohort = &cohorts[0];
        let updates = cohort
            .iter()
            .enumerate()
            .map(|(s, &id)| self.slot_update(&trained, &placement, 0, s, id))
            .collect::<Result<Vec<_>>>()?;
        let deltas = self.server.receive_plain(updates);
        let aggregands = deltas
            .iter()
            .enumerate()
            .map(|(s, d)| CohortAggregate { delta: d.clone(), cohort_index: s, adversarial: placement.is_sybil(0, s) })
            .collect();

        let next = self.server.step(state, &self.aggregator, self.fl.server_lr, &deltas)?;
        let variance = self.variance(round, state.seed, &trained)?;
        Ok(RoundOutcome { state: next, cohorts, placement, aggregands, variance })
    }

    /// Runs `fl.rounds` rounds from `init`, recording one metrics row per round.
    pub fn run(&mut self, init: GlobalState<T>, eval: &Evaluator<T>) -> Result<(GlobalState<T>, Vec<RoundRecord>)> {
        let mut state = init;
        let mut rows = Vec::with_capacity(self.fl.rounds);
        for _ in 0..self.fl.rounds {
            let out = self.run_round(&state)?;
            let round = out.state.round;
            let record = RoundRecord::from_outcome(&out, self.fl.mode, self.aggregator.rule, eval)
                .map_err(|e| e.at_round(round))?;
            rows.push(record);
            state = out.state;
        }
        Ok((state, rows))
    }
}

/// Per-coordinate variance statistics of cohort means against the update population.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceReport {
    /// Population variance σ_j² of the client updates (divides by P).
    pub population_variance: Vec<f64>,
    /// Sample variance of the cohort means (divides by count - 1).
    pub aggregate_variance: Vec<f64>,
    /// (P - c) / (c (P - 1))
    pub theoretical_factor: f64,
    /// Aggregate variance over population variance, averaged over coordinates
    /// whose population variance is nonzero.
    pub mean_ratio: f64,
    pub mean_population_variance: f64,
    pub mean_aggregate_variance: f64,
}

/// Sampling-without-replacement variance factor for cohorts of `c` out of `p`.
pub fn theoretical_variance_factor(p: usize, c: usize) -> f64 {
    (p - c) as f64 / (c as f64 * (p - 1) as f64)
}

/// Means of `count` cohorts of `c` clients, each drawn independently without replacement.
pub fn resample_cohort_means<T: Real>(
    population: &[ParameterVector<T>],
    c: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<ParameterVector<T>>> {
    let ids: Vec<usize> = (0..population.len()).collect();
    sample_cohorts(&ids, count, c, Sampling::Independent, seed)?
        .into_iter()
        .map(|cohort| {
            let members: Vec<ParameterVector<T>> = cohort.iter().map(|&i| population[i].clone()).collect();
            mean_vectors(&members)
        })
        .collect()
}

fn column_stats<T: Real>(vs: &[ParameterVector<T>], j: usize, ddof: usize) -> f64 {
    let n = vs.len() as f64;
    let mean = vs.iter().map(|v| v[j].to_f64_lossy()).sum::<f64>() / n;
    vs.iter().map(|v| (v[j].to_f64_lossy() - mean).powi(2)).sum::<f64>() / (n - ddof as f64)
}

pub fn variance_report<T: Real>(
    population: &[ParameterVector<T>],
    cohort_aggregates: &[ParameterVector<T>],
    c: usize,
) -> Result<VarianceReport> {
    let p = population.len();
    if c < 2 {
        return Err(Error::invalid(format!("cohort size must be >= 2, got {c}")));
    }
    if c > p {
        return Err(Error::invalid(format!("cohort size {c} exceeds the population of {p}")));
    }
    if cohort_aggregates.len() < 2 {
        return Err(Error::invalid("need at least 2 cohort aggregates"));
    }
    let d = crate::linalg::common_dim(population)?;
    crate::linalg::ensure_same_dim(d, crate::linalg::common_dim(cohort_aggregates)?)?;

    let population_variance: Vec<f64> = (0..d).map(|j| column_stats(population, j, 0)).collect();
    let aggregate_variance: Vec<f64> = (0..d).map(|j| column_stats(cohort_aggregates, j, 1)).collect();
    let ratios: Vec<f64> = population_variance
        .iter()
        .zip(&aggregate_variance)
        .filter(|(&pv, _)| pv > 1e-300)
        .map(|(pv, av)| av / pv)
        .collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(VarianceReport {
        theoretical_factor: theoretical_variance_factor(p, c),
        mean_ratio: mean(&ratios),
        mean_population_variance: mean(&population_variance),
        mean_aggregate_variance: mean(&aggregate_variance),
        population_variance,
        aggregate_variance,
    })
}
