//! Synthetic classification data, non-i.i.d. partitioning and backdoor triggers.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::seed::{self, Stream};

/// Spread of each class cluster around its mean, in feature units.
pub const DEFAULT_CLUSTER_STD: f64 = 0.15;

/// One labeled example. `id` is its index in the source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub id: usize,
    pub features: Vec<T>,
    pub label: usize,
}

/// The local dataset held by one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard<T> {
    pub client_id: usize,
    pub samples: Vec<Sample<T>>,
    pub poisoned: bool,
}

impl<T> ClientShard<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-class sample counts.
    pub fn histogram(&self, n_classes: usize) -> Vec<usize> {
        let mut h = vec![0; n_classes];
        for s in &self.samples {
            h[s.label] += 1;
        }
        h
    }
}

/// Pixel-pattern trigger: the leading block of features is overwritten.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriggerSpec {
    pub coverage_fraction: f64,
    pub value: f64,
}

impl Default for TriggerSpec {
    fn default() -> Self {
        Self { coverage_fraction: 0.09, value: 1.0 }
    }
}

impl TriggerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.coverage_fraction > 0.0 && self.coverage_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "trigger coverage must lie in (0, 1), got {}",
                self.coverage_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.value) {
            return Err(Error::invalid(format!("trigger value must lie in [0, 1], got {}", self.value)));
        }
        Ok(())
    }

    /// Number of leading coordinates the trigger overwrites for inputs of size `d_in`.
    pub fn width(&self, d_in: usize) -> usize {
        // The epsilon keeps products like 0.09 * 100 from rounding up to 10.
        let w = (self.coverage_fraction * d_in as f64 - 1e-9).ceil();
        (w.max(1.0) as usize).min(d_in)
    }
}

/// Gaussian class-cluster dataset description.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub d_in: usize,
    pub n_classes: usize,
    pub cluster_std: f64,
}

impl SyntheticSpec {
    pub fn new(n_samples: usize, d_in: usize, n_classes: usize) -> Self {
        Self { n_samples, d_in, n_classes, cluster_std: DEFAULT_CLUSTER_STD }
    }

    /// Draws the dataset. Sample `i` has label `i mod n_classes`, so the first
    /// `m * n_classes` samples are always class balanced.
    pub fn generate<T: Real>(&self, seed: u64) -> Result<Vec<Sample<T>>> {
        if self.n_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if self.n_samples < self.n_classes {
            return Err(Error::invalid(format!(
                "{} samples cannot cover {} classes",
                self.n_samples, self.n_classes
            )));
        }
        if self.d_in < 4 {
            return Err(Error::invalid(format!("input dimension must be >= 4, got {}", self.d_in)));
        }
        if !(self.cluster_std >= 0.0 && self.cluster_std.is_finite()) {
            return Err(Error::invalid("cluster std must be finite and non-negative"));
        }
        let mut rng = seed::rng(seed, Stream::Data, &[]);
        let means: Vec<Vec<f64>> = (0..self.n_classes)
            .map(|_| (0..self.d_in).map(|_| rng.random::<f64>()).collect())
            .collect();
        let noise = Normal::new(0.0, self.cluster_std).map_err(|e| Error::invalid(e.to_string()))?;
        Ok((0..self.n_samples)
            .map(|id| {
                let label = id % self.n_classes;
                let features = means[label]
                    .iter()
                    .map(|&m| T::of((m + noise.sample(&mut rng)).clamp(0.0, 1.0)))
                    .collect();
                Sample { id, features, label }
            })
            .collect())
    }
}

/// [`SyntheticSpec::generate`] with the default cluster spread.
pub fn generate_dataset<T: Real>(
    n_samples: usize,
    d_in: usize,
    n_classes: usize,
    seed: u64,
) -> Result<Vec<Sample<T>>> {
    SyntheticSpec::new(n_samples, d_in, n_classes).generate(seed)
}

/// Splits each class among `n_clients` with Dirichlet(`alpha`) proportions.
///
/// Shards come back ordered by client id. Any client left empty receives one
/// sample taken from the currently largest shard.
pub fn dirichlet_partition<T: Real>(
    dataset: &[Sample<T>],
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientShard<T>>> {
    if n_clients < 2 {
        return Err(Error::invalid(format!("need at least 2 clients, got {n_clients}")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    if dataset.len() < n_clients {
        return Err(Error::invalid(format!(
            "dataset of {} samples cannot cover {} clients",
            dataset.len(),
            n_clients
        )));
    }
    let n_classes = dataset.iter().map(|s| s.label).max().map_or(0, |m| m + 1);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = seed::rng(seed, Stream::Partition, &[]);

    let mut buckets: Vec<Vec<&Sample<T>>> = vec![Vec::new(); n_clients];
    for class in 0..n_classes {
        let mut members: Vec<&Sample<T>> = dataset.iter().filter(|s| s.label == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let mut draws: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
        let mut total: f64 = draws.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            // Every gamma draw underflowed; fall back to equal shares.
            draws.iter_mut().for_each(|g| *g = 1.0);
            total = n_clients as f64;
        }
        let n = members.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (client, &g) in draws.iter().enumerate() {
            cum += g;
            let end = if client + 1 == n_clients {
                n
            } else {
                ((cum / total * n as f64).round() as usize).clamp(start, n)
            };
            buckets[client].extend_from_slice(&members[start..end]);
            start = end;
        }
    }

    while let Some(empty) = buckets.iter().position(|b| b.is_empty()) {
        let largest = (0..n_clients)
            .max_by(|&a, &b| buckets[a].len().cmp(&buckets[b].len()).then(b.cmp(&a)))
            .expect("at least two clients");
        let moved = buckets[largest].pop().expect("largest shard is nonempty");
        buckets[empty].push(moved);
    }

    Ok(buckets
        .into_iter()
        .enumerate()
        .map(|(client_id, b)| ClientShard {
            client_id,
            samples: b.into_iter().cloned().collect(),
            poisoned: false,
        })
        .collect())
}

/// Overwrites the leading `t.width(d_in)` features with the trigger value.
pub fn embed_trigger<T: Real>(s: &Sample<T>, t: &TriggerSpec) -> Sample<T> {
    let mut out = s.clone();
    let w = t.width(out.features.len());
    let v = T::of(t.value);
    for x in &mut out.features[..w] {
        *x = v;
    }
    out
}

/// Triggers and relabels a `poison_fraction` share of `shard`.
///
/// Victims are drawn from `base_label` samples first, then from the rest.
/// The count is `ceil(poison_fraction * len)`.
pub fn build_poisoned_shard<T: Real>(
    shard: &ClientShard<T>,
    base_label: usize,
    target_label: usize,
    poison_fraction: f64,
    trigger: &TriggerSpec,
    seed: u64,
) -> Result<ClientShard<T>> {
    if shard.is_empty() {
        return Err(Error::Empty("cannot poison an empty shard"));
    }
    if !(poison_fraction > 0.0 && poison_fraction <= 1.0) {
        return Err(Error::invalid(format!("poison fraction must lie in (0, 1], got {poison_fraction}")));
    }
    if base_label == target_label {
        return Err(Error::invalid("base and target labels must differ"));
    }
    trigger.validate()?;

    let n = shard.len();
    let count = ((poison_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut rng = seed::rng(seed, Stream::Poison, &[shard.client_id as u64]);
    let (mut base, mut rest): (Vec<usize>, Vec<usize>) =
        (0..n).partition(|&i| shard.samples[i].label == base_label);
    base.shuffle(&mut rng);
    rest.shuffle(&mut rng);
    let mut victim = vec![false; n];
    for &i in base.iter().chain(rest.iter()).take(count) {
        victim[i] = true;
    }

    let samples = shard
        .samples
        .iter()
        .zip(victim)
        .map(|(s, hit)| {
            if hit {
                let mut p = embed_trigger(s, trigger);
                p.label = target_label;
                p
            } else {
                s.clone()
            }
        })
        .collect();
    Ok(ClientShard { client_id: shard.client_id, samples, poisoned: true })
}

/// Writes one sample per line: comma-separated features, then the label.
pub fn write_samples<T: Real, W: Write>(samples: &[Sample<T>], mut w: W) -> Result<()> {
    for s in samples {
        for x in &s.features {
            write!(w, "{x},")?;
        }
        writeln!(w, "{}", s.label)?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_samples`]. Sample ids are assigned by line order.
pub fn read_samples<T: Real, R: BufRead>(r: R) -> Result<Vec<Sample<T>>> {
    let mut out = Vec::new();
    let mut width = None;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: lineno + 1, message };
        let fields: Vec<&str> = line.split(',').collect();
        let (label, feats) = fields.split_last().expect("split yields at least one field");
        let label: usize = label
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("bad label {label:?}: {e}")))?;
        let features = feats
            .iter()
            .map(|f| {
                let v: f64 = f.trim().parse().map_err(|e| parse_err(format!("bad feature {f:?}: {e}")))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(parse_err(format!("feature {v} outside [0, 1]")));
                }
                Ok(T::of(v))
            })
            .collect::<Result<Vec<T>>>()?;
        match width {
            None => width = Some(features.len()),
            Some(w) if w != features.len() => {
                return Err(parse_err(format!("expected {w} features, found {}", features.len())))
            }
            _ => {}
        }
        out.push(Sample { id: out.len(), features, label });
    }
    Ok(out)
}
