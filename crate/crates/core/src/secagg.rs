//! Simulated secure aggregation with pairwise additive masks.
//!
//! Each unordered pair of cohort members shares a seed. Client `i` adds the
//! expanded mask for every partner `j > i` and subtracts it for every `j < i`,
//! so masks cancel in the sum and only the cohort mean is ever revealed.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{ensure_same_dim, ParameterVector};
use crate::scalar::Real;
use crate::seed::{self, Stream};

/// Half-width of the uniform distribution mask coordinates are drawn from.
pub const MASK_RANGE: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Preparation,
    Commitment,
    Finalization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedUpdate<T> {
    pub client_id: usize,
    pub masked: ParameterVector<T>,
}

/// Masking state of one cohort across the three protocol phases.
#[derive(Debug, Clone, PartialEq)]
pub struct SecAggSession {
    cohort: Vec<usize>,
    dim: usize,
    pair_seeds: BTreeMap<(usize, usize), u64>,
    phase: Phase,
    committed: BTreeSet<usize>,
}

#[derive(Serialize)]
struct Transcript<'a> {
    phase: Phase,
    dim: usize,
    cohort: &'a [usize],
    committed: Vec<usize>,
    pairs: Vec<(usize, usize, u64)>,
}

impl SecAggSession {
    /// Establishes one mask seed per unordered pair and moves to the commitment phase.
    pub fn prepare(cohort: &[usize], dim: usize, seed: u64) -> Result<Self> {
        if cohort.len() < 2 {
            return Err(Error::SecAgg(format!("cohort of {} cannot be securely aggregated", cohort.len())));
        }
        let mut seen = BTreeSet::new();
        for &id in cohort {
            if !seen.insert(id) {
                return Err(Error::DuplicateClient(id));
            }
        }
        let mut pair_seeds = BTreeMap::new();
        for (a, &i) in cohort.iter().enumerate() {
            for &j in &cohort[a + 1..] {
                let key = (i.min(j), i.max(j));
                pair_seeds.insert(key, seed::derive(seed, Stream::Mask, &[key.0 as u64, key.1 as u64]));
            }
        }
        let mut session = Self {
            cohort: cohort.to_vec(),
            dim,
            pair_seeds,
            phase: Phase::Preparation,
            committed: BTreeSet::new(),
        };
        session.phase = Phase::Commitment;
        Ok(session)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn cohort(&self) -> &[usize] {
        &self.cohort
    }

    pub fn committed(&self) -> &BTreeSet<usize> {
        &self.committed
    }

    pub fn pair_count(&self) -> usize {
        self.pair_seeds.len()
    }

    fn pair_seed(&self, i: usize, j: usize) -> u64 {
        self.pair_seeds[&(i.min(j), i.max(j))]
    }

    /// The mask client `i` applies for partner `j`; `mask_for(j, i)` is its exact negation.
    pub fn mask_for<T: Real>(&self, i: usize, j: usize) -> Result<Vec<T>> {
        if !self.cohort.contains(&i) {
            return Err(Error::UnknownClient(i));
        }
        if !self.cohort.contains(&j) || i == j {
            return Err(Error::UnknownClient(j));
        }
        let mut rng = seed::rng(self.pair_seed(i, j), Stream::Mask, &[]);
        let sign = if j > i { 1.0 } else { -1.0 };
        Ok((0..self.dim)
            .map(|_| T::of(sign * rng.random_range(-MASK_RANGE..MASK_RANGE)))
            .collect())
    }

    /// Client-side: masks `update` for upload and records the commitment.
    pub fn commit<T: Real>(&mut self, client_id: usize, update: &ParameterVector<T>) -> Result<MaskedUpdate<T>> {
        if self.phase != Phase::Commitment {
            return Err(Error::SecAgg(format!("commit during {:?} phase", self.phase)));
        }
        if !self.cohort.contains(&client_id) {
            return Err(Error::UnknownClient(client_id));
        }
        if self.committed.contains(&client_id) {
            return Err(Error::DoubleCommit(client_id));
        }
        ensure_same_dim(self.dim, update.dim())?;
        let mut masked = update.clone().into_vec();
        for &j in &self.cohort {
            if j == client_id {
                continue;
            }
            for (m, x) in self.mask_for::<T>(client_id, j)?.into_iter().zip(masked.iter_mut()) {
                *x = *x + m;
            }
        }
        self.committed.insert(client_id);
        Ok(MaskedUpdate { client_id, masked: ParameterVector::from_raw(masked) })
    }

    /// Server-side: sums the masked uploads of committed, non-dropped clients,
    /// strips the masks they share with absent partners, and returns their mean.
    pub fn finalize<T: Real>(
        &mut self,
        masked: &[MaskedUpdate<T>],
        dropouts: &BTreeSet<usize>,
    ) -> Result<ParameterVector<T>> {
        if self.phase != Phase::Commitment {
            return Err(Error::SecAgg(format!("finalize during {:?} phase", self.phase)));
        }
        if let Some(&d) = dropouts.iter().find(|d| !self.committed.contains(d)) {
            return Err(Error::SecAgg(format!("dropout {d} never committed")));
        }
        let included: BTreeSet<usize> = self.committed.difference(dropouts).copied().collect();
        if included.len() < 2 {
            return Err(Error::SecAgg(format!(
                "only {} client(s) left to aggregate; at least 2 required",
                included.len()
            )));
        }

        let mut sum = vec![T::zero(); self.dim];
        let mut received = BTreeSet::new();
        for m in masked {
            if !self.committed.contains(&m.client_id) {
                return Err(Error::SecAgg(format!("upload from uncommitted client {}", m.client_id)));
            }
            if !received.insert(m.client_id) {
                return Err(Error::DoubleCommit(m.client_id));
            }
            if !included.contains(&m.client_id) {
                continue;
            }
            ensure_same_dim(self.dim, m.masked.dim())?;
            for (s, &x) in sum.iter_mut().zip(m.masked.iter()) {
                *s = *s + x;
            }
        }
        if let Some(&missing) = included.iter().find(|i| !received.contains(i)) {
            return Err(Error::SecAgg(format!("no upload from committed client {missing}")));
        }

        // Surviving clients reveal the seeds they share with absent partners.
        for &i in &included {
            for &j in self.cohort.iter().filter(|j| !included.contains(j)) {
                for (s, m) in sum.iter_mut().zip(self.mask_for::<T>(i, j)?) {
                    *s = *s - m;
                }
            }
        }
        self.phase = Phase::Finalization;
        let n = T::of_usize(included.len());
        Ok(ParameterVector::from_raw(sum.into_iter().map(|s| s / n).collect()))
    }

    /// JSON transcript of the session state for debugging.
    pub fn transcript(&self) -> String {
        let t = Transcript {
            phase: self.phase,
            dim: self.dim,
            cohort: &self.cohort,
            committed: self.committed.iter().copied().collect(),
            pairs: self.pair_seeds.iter().map(|(&(a, b), &s)| (a, b, s)).collect(),
        };
        serde_json::to_string_pretty(&t).expect("transcript serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::mean_vectors;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn updates(n: usize, d: usize, seed: u64) -> Vec<ParameterVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| ParameterVector::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect()
    }

    fn close(a: &ParameterVector<f64>, b: &ParameterVector<f64>, tol: f64) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn pair_counts() {
        for c in 2..9 {
            let cohort: Vec<usize> = (0..c).map(|i| 3 * i + 1).collect();
            assert_eq!(SecAggSession::prepare(&cohort, 4, 0).unwrap().pair_count(), c * (c - 1) / 2);
        }
        let s = SecAggSession::prepare(&[10, 11, 12, 13, 14], 4, 0).unwrap();
        assert_eq!(s.pair_count(), 10);
        assert_eq!(s.phase(), Phase::Commitment);
        assert_eq!(s, SecAggSession::prepare(&[10, 11, 12, 13, 14], 4, 0).unwrap());
    }

    #[test]
    fn prepare_errors() {
        assert!(matches!(SecAggSession::prepare(&[1, 2, 1], 3, 0), Err(Error::DuplicateClient(1))));
        assert!(SecAggSession::prepare(&[1], 3, 0).is_err());
    }

    #[test]
    fn masks_are_antisymmetric() {
        let s = SecAggSession::prepare(&[4, 9, 2], 6, 5).unwrap();
        let a: Vec<f64> = s.mask_for(4, 9).unwrap();
        let b: Vec<f64> = s.mask_for(9, 4).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| *x == -*y));
    }

    #[test]
    fn two_client_masks_cancel() {
        let u = updates(2, 8, 1);
        let mut s = SecAggSession::prepare(&[0, 1], 8, 3).unwrap();
        let m0 = s.commit(0, &u[0]).unwrap();
        let m1 = s.commit(1, &u[1]).unwrap();
        assert_ne!(m0.masked, u[0]);
        assert_ne!(m1.masked, u[1]);
        let plain = u[0].add(&u[1]).unwrap();
        assert!(close(&m0.masked.add(&m1.masked).unwrap(), &plain, 1e-12));
    }

    #[test]
    fn commit_is_deterministic() {
        let u = updates(1, 5, 2);
        let base = SecAggSession::prepare(&[3, 4, 5], 5, 9).unwrap();
        let a = base.clone().commit(4, &u[0]).unwrap();
        let b = base.clone().commit(4, &u[0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn commit_errors() {
        let u = updates(1, 5, 2);
        let mut s = SecAggSession::prepare(&[3, 4, 5], 5, 9).unwrap();
        assert!(matches!(s.commit(7, &u[0]), Err(Error::UnknownClient(7))));
        s.commit(3, &u[0]).unwrap();
        assert!(matches!(s.commit(3, &u[0]), Err(Error::DoubleCommit(3))));
        assert!(matches!(s.commit(4, &ParameterVector::<f64>::zeros(2)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn full_cohort_reveals_mean() {
        let u = updates(3, 7, 4);
        let mut s = SecAggSession::prepare(&[0, 1, 2], 7, 1).unwrap();
        let masked: Vec<_> = (0..3).map(|i| s.commit(i, &u[i]).unwrap()).collect();
        let agg = s.finalize(&masked, &BTreeSet::new()).unwrap();
        assert!(close(&agg, &mean_vectors(&u).unwrap(), 1e-9));
        assert_eq!(s.phase(), Phase::Finalization);
        assert!(s.finalize(&masked, &BTreeSet::new()).is_err());
        assert!(s.commit(0, &u[0]).is_err());
    }

    #[test]
    fn client_missing_commit_is_excluded() {
        // Oracle: the residual masks of survivors against the absent client, removed by hand.
        let u = updates(3, 7, 4);
        let mut s = SecAggSession::prepare(&[0, 1, 2], 7, 1).unwrap();
        let m0 = s.commit(0, &u[0]).unwrap();
        let m1 = s.commit(1, &u[1]).unwrap();
        let r0: Vec<f64> = s.mask_for(0, 2).unwrap();
        let r1: Vec<f64> = s.mask_for(1, 2).unwrap();
        let oracle: Vec<f64> = (0..7).map(|k| (m0.masked[k] + m1.masked[k] - r0[k] - r1[k]) / 2.0).collect();
        let agg = s.finalize(&[m0, m1], &BTreeSet::new()).unwrap();
        assert!(close(&agg, &ParameterVector::new(oracle).unwrap(), 1e-12));
        assert!(close(&agg, &mean_vectors(&u[..2]).unwrap(), 1e-9));
    }

    #[test]
    fn dropout_after_commit_is_excluded() {
        let u = updates(4, 5, 8);
        let mut s = SecAggSession::prepare(&[10, 20, 30, 40], 5, 2).unwrap();
        let masked: Vec<_> = [10, 20, 30, 40].iter().zip(&u).map(|(&i, v)| s.commit(i, v).unwrap()).collect();
        let drop: BTreeSet<usize> = [30].into();
        let agg = s.finalize(&masked, &drop).unwrap();
        let expect = mean_vectors(&[u[0].clone(), u[1].clone(), u[3].clone()]).unwrap();
        assert!(close(&agg, &expect, 1e-9));
    }

    #[test]
    fn identical_updates_reveal_themselves() {
        let v = updates(1, 6, 3).pop().unwrap();
        let mut s = SecAggSession::prepare(&[1, 2, 3, 4], 6, 0).unwrap();
        let masked: Vec<_> = (1..=4).map(|i| s.commit(i, &v).unwrap()).collect();
        assert!(close(&s.finalize(&masked, &BTreeSet::new()).unwrap(), &v, 1e-9));
    }

    #[test]
    fn finalize_errors() {
        let u = updates(3, 4, 1);
        let mut s = SecAggSession::prepare(&[0, 1, 2], 4, 1).unwrap();
        let m0 = s.commit(0, &u[0]).unwrap();
        assert!(s.clone().finalize(std::slice::from_ref(&m0), &BTreeSet::new()).is_err());
        let m1 = s.commit(1, &u[1]).unwrap();
        assert!(s.clone().finalize(&[m0.clone(), m1.clone()], &[1].into()).is_err());
        assert!(s.clone().finalize(std::slice::from_ref(&m0), &BTreeSet::new()).is_err());
        assert!(s.clone().finalize(&[m0.clone(), m1.clone()], &[2].into()).is_err());
        assert!(s.clone().finalize(&[m0.clone(), m0.clone(), m1.clone()], &BTreeSet::new()).is_err());
        assert!(s.finalize(&[m0, m1], &BTreeSet::new()).is_ok());
    }

    #[test]
    fn transcript_mentions_phase_and_pairs() {
        let s = SecAggSession::prepare(&[5, 6, 7], 2, 3).unwrap();
        let t = s.transcript();
        assert!(t.contains("\"commitment\""));
        let v: serde_json::Value = serde_json::from_str(&t).unwrap();
        assert_eq!(v["pairs"].as_array().unwrap().len(), 3);
    }
}
