//! Server-side aggregation rules.
//!
//! Every rule maps a list of aggregands (client updates in baseline FL, cohort
//! aggregates in Meta-FL) to a single update.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{common_dim, mean_vectors, project_to_ball, ParameterVector};
use crate::scalar::Real;
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    #[default]
    Fedavg,
    Krum,
    Cwm,
    TrimmedMean,
    Rfa,
    NormBound,
    Dp,
}

impl Rule {
    pub const ALL: [Rule; 7] =
        [Rule::Fedavg, Rule::Krum, Rule::Cwm, Rule::TrimmedMean, Rule::Rfa, Rule::NormBound, Rule::Dp];

    pub fn as_str(self) -> &'static str {
        match self {
            Rule::Fedavg => "fedavg",
            Rule::Krum => "krum",
            Rule::Cwm => "cwm",
            Rule::TrimmedMean => "trimmed_mean",
            Rule::Rfa => "rfa",
            Rule::NormBound => "norm_bound",
            Rule::Dp => "dp",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Rule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Rule::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Rule::ALL.iter().map(|r| r.as_str()).collect();
                Error::Config(format!("unknown rule {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Aggregation rule and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorConfig {
    pub rule: Rule,
    /// Byzantine bound for Krum.
    pub f: usize,
    /// Trimmed-mean fraction discarded from each end.
    pub beta: f64,
    pub rfa_max_iter: usize,
    pub rfa_smoothing: f64,
    pub dp_sigma: f64,
    /// Salt for the DP noise stream.
    pub seed: u64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self { rule: Rule::Fedavg, f: 6, beta: 0.20, rfa_max_iter: 10, rfa_smoothing: 1e-6, dp_sigma: 0.001, seed: 0 }
    }
}

impl AggregatorConfig {
    pub fn with_rule(rule: Rule) -> Self {
        Self { rule, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 0.5), got {}", self.beta)));
        }
        if !(self.dp_sigma >= 0.0 && self.dp_sigma.is_finite()) {
            return Err(Error::Config(format!("dp_sigma must be >= 0, got {}", self.dp_sigma)));
        }
        if !(self.rfa_smoothing > 0.0 && self.rfa_smoothing.is_finite()) {
            return Err(Error::Config(format!("rfa_smoothing must be > 0, got {}", self.rfa_smoothing)));
        }
        Ok(())
    }

    /// Smallest aggregand count this configuration accepts.
    pub fn min_aggregands(&self) -> usize {
        match self.rule {
            Rule::Krum => 2 * self.f + 3,
            _ => 1,
        }
    }

    /// Applies the configured rule. `noise_key` selects the DP noise draw.
    pub fn apply<T: Real>(&self, aggregands: &[ParameterVector<T>], noise_key: u64) -> Result<ParameterVector<T>> {
        match self.rule {
            Rule::Fedavg => fedavg(aggregands),
            Rule::Krum => krum(aggregands, self.f),
            Rule::Cwm => coordinate_wise_median(aggregands),
            Rule::TrimmedMean => trimmed_mean(aggregands, self.beta),
            Rule::Rfa => rfa_geometric_median(aggregands, self.rfa_max_iter, T::of(self.rfa_smoothing)),
            Rule::NormBound => norm_bounding(aggregands),
            Rule::Dp => dp_aggregate(aggregands, self.dp_sigma, seed::derive(self.seed, Stream::Noise, &[noise_key])),
        }
    }
}

/// Largest Krum `f` admissible for `n` aggregands, if any.
pub fn max_krum_f(n: usize) -> Option<usize> {
    n.checked_sub(3).map(|m| m / 2)
}

/// One cohort's revealed mean. `adversarial` is ground truth for metrics and
/// never reaches an aggregation rule.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortAggregate<T> {
    pub delta: ParameterVector<T>,
    pub cohort_index: usize,
    pub adversarial: bool,
}

pub fn fedavg<T: Real>(aggregands: &[ParameterVector<T>]) -> Result<ParameterVector<T>> {
    mean_vectors(aggregands)
}

/// Krum scores, in aggregand order: each is the sum of squared distances to
/// the `n - f - 2` nearest other aggregands.
pub fn krum_scores<T: Real>(aggregands: &[ParameterVector<T>], f: usize) -> Result<Vec<T>> {
    common_dim(aggregands)?;
    let n = aggregands.len();
    if n < 2 * f + 3 {
        return Err(Error::KrumCondition { n, f });
    }
    let m = n - f - 2;
    let mut d2 = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = aggregands[i].dist_sq(&aggregands[j]);
            d2[i * n + j] = d;
            d2[j * n + i] = d;
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<T> = (0..n).filter(|&j| j != i).map(|j| d2[i * n + j]).collect();
            row.sort_by(cmp);
            row[..m].iter().copied().sum()
        })
        .collect())
}

/// Selects the aggregand with the lowest Krum score; ties go to the lowest index.
pub fn krum<T: Real>(aggregands: &[ParameterVector<T>], f: usize) -> Result<ParameterVector<T>> {
    let scores = krum_scores(aggregands, f)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s < scores[best] {
            best = i;
        }
    }
    Ok(aggregands[best].clone())
}

fn cmp<T: Real>(a: &T, b: &T) -> Ordering {
    a.partial_cmp(b).unwrap_or(Ordering::Equal)
}

/// Applies `reduce` to the sorted values of every coordinate.
fn per_coordinate<T: Real>(aggregands: &[ParameterVector<T>], reduce: impl Fn(&[T]) -> T) -> Result<ParameterVector<T>> {
    let d = common_dim(aggregands)?;
    let mut column = vec![T::zero(); aggregands.len()];
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        for (c, v) in column.iter_mut().zip(aggregands) {
            *c = v[j];
        }
        column.sort_by(cmp);
        out.push(reduce(&column));
    }
    Ok(ParameterVector::from_raw(out))
}

/// Per-coordinate median; an even count averages the two middle values.
pub fn coordinate_wise_median<T: Real>(aggregands: &[ParameterVector<T>]) -> Result<ParameterVector<T>> {
    per_coordinate(aggregands, |col| {
        let n = col.len();
        if n % 2 == 1 {
            col[n / 2]
        } else {
            (col[n / 2 - 1] + col[n / 2]) / T::of(2.0)
        }
    })
}

/// Number of values trimmed from each end: `floor(beta * n)`.
pub fn trim_count(n: usize, beta: f64) -> usize {
    (beta * n as f64 + 1e-9).floor() as usize
}

/// Per-coordinate mean after dropping the `floor(beta * n)` smallest and largest values.
pub fn trimmed_mean<T: Real>(aggregands: &[ParameterVector<T>], beta: f64) -> Result<ParameterVector<T>> {
    if !(0.0..0.5).contains(&beta) {
        return Err(Error::invalid(format!("beta must lie in [0, 0.5), got {beta}")));
    }
    let n = aggregands.len();
    if n == 0 {
        return Err(Error::Empty("no aggregands"));
    }
    let k = trim_count(n, beta);
    if n <= 2 * k {
        return Err(Error::EverythingTrimmed { n, beta });
    }
    let kept = T::of_usize(n - 2 * k);
    per_coordinate(aggregands, |col| col[k..n - k].iter().copied().sum::<T>() / kept)
}

/// Σ_i ||z - v_i||
pub fn geometric_objective<T: Real>(z: &ParameterVector<T>, aggregands: &[ParameterVector<T>]) -> T {
    aggregands.iter().map(|v| z.dist(v)).sum()
}

/// Smoothed Weiszfeld iterations from the mean. Returns the final iterate and
/// the objective before the first and after every iteration.
pub fn rfa_trace<T: Real>(
    aggregands: &[ParameterVector<T>],
    max_iter: usize,
    smoothing: T,
) -> Result<(ParameterVector<T>, Vec<T>)> {
    let d = common_dim(aggregands)?;
    let mut z = mean_vectors(aggregands)?;
    let mut objectives = Vec::with_capacity(max_iter + 1);
    objectives.push(geometric_objective(&z, aggregands));
    for _ in 0..max_iter {
        let mut num = vec![T::zero(); d];
        let mut den = T::zero();
        for v in aggregands {
            let w = T::one() / z.dist(v).max(smoothing);
            den = den + w;
            for (a, &x) in num.iter_mut().zip(v.iter()) {
                *a = *a + w * x;
            }
        }
        z = ParameterVector::from_raw(num.into_iter().map(|a| a / den).collect());
        objectives.push(geometric_objective(&z, aggregands));
    }
    Ok((z, objectives))
}

/// Approximate geometric median (uniform aggregand weights).
pub fn rfa_geometric_median<T: Real>(
    aggregands: &[ParameterVector<T>],
    max_iter: usize,
    smoothing: T,
) -> Result<ParameterVector<T>> {
    rfa_trace(aggregands, max_iter, smoothing).map(|(z, _)| z)
}

/// Projects every aggregand onto the ball whose radius is the smallest
/// aggregand norm, then averages. A zero-norm aggregand yields the zero vector.
pub fn norm_bounding<T: Real>(aggregands: &[ParameterVector<T>]) -> Result<ParameterVector<T>> {
    let d = common_dim(aggregands)?;
    let radius = aggregands.iter().map(|v| v.norm()).fold(T::infinity(), T::min);
    if radius <= T::zero() {
        return Ok(ParameterVector::zeros(d));
    }
    let projected = aggregands
        .iter()
        .map(|v| project_to_ball(v, radius))
        .collect::<Result<Vec<_>>>()?;
    mean_vectors(&projected)
}

/// [`norm_bounding`] followed by i.i.d. Gaussian noise of standard deviation `sigma`.
pub fn dp_aggregate<T: Real>(aggregands: &[ParameterVector<T>], sigma: f64, seed: u64) -> Result<ParameterVector<T>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut out = norm_bounding(aggregands)?;
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = seed::rng(seed, Stream::Noise, &[]);
        for x in out.as_mut_slice() {
            *x = *x + T::of(normal.sample(&mut rng));
        }
    }
    Ok(out)
}
