//! Dense vector algebra over flat model parameters.

use std::ops::{Deref, Index};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// A flat, fixed-dimension vector of model parameters or a model update.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterVector<T>(Vec<T>);

impl<T: Real> ParameterVector<T> {
    /// Wraps `values`, rejecting NaN and infinities.
    pub fn new(values: Vec<T>) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![T::zero(); dim])
    }

    /// Wraps values produced by arithmetic on already-validated vectors.
    pub(crate) fn from_raw(values: Vec<T>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// Euclidean norm without the finiteness check of [`l2_norm`].
    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn norm_sq(&self) -> T {
        self.0.iter().fold(T::zero(), |acc, &x| acc + x * x)
    }

    pub fn dist_sq(&self, other: &Self) -> T {
        self.0
            .iter()
            .zip(&other.0)
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
    }

    pub fn dist(&self, other: &Self) -> T {
        self.dist_sq(other).sqrt()
    }

    pub fn scaled(&self, a: T) -> Self {
        Self(self.0.iter().map(|&x| x * a).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        ensure_same_dim(self.dim(), other.dim())?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(&a, &b)| a + b).collect()))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        ensure_same_dim(self.dim(), other.dim())?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(&a, &b)| a - b).collect()))
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: T, x: &Self) -> Result<()> {
        ensure_same_dim(self.dim(), x.dim())?;
        for (s, &v) in self.0.iter_mut().zip(&x.0) {
            *s = *s + a * v;
        }
        Ok(())
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> ParameterVector<U> {
        ParameterVector(self.0.iter().map(|&x| f(x)).collect())
    }
}

impl<T> Deref for ParameterVector<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> Index<usize> for ParameterVector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

impl<T: Real> TryFrom<Vec<T>> for ParameterVector<T> {
    type Error = Error;
    fn try_from(v: Vec<T>) -> Result<Self> {
        Self::new(v)
    }
}

fn check_finite<T: Real>(values: &[T]) -> Result<()> {
    match values.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

pub(crate) fn ensure_same_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// Checks that `vs` is nonempty and every vector has the same dimension.
/// Returns that dimension.
pub(crate) fn common_dim<T: Real>(vs: &[ParameterVector<T>]) -> Result<usize> {
    let first = vs.first().ok_or(Error::Empty("no vectors"))?;
    let d = first.dim();
    for v in &vs[1..] {
        ensure_same_dim(d, v.dim())?;
    }
    Ok(d)
}

/// Euclidean norm; rejects non-finite input.
pub fn l2_norm<T: Real>(v: &ParameterVector<T>) -> Result<T> {
    check_finite(v)?;
    Ok(v.norm())
}

/// Coordinate-wise arithmetic mean.
pub fn mean_vectors<T: Real>(vs: &[ParameterVector<T>]) -> Result<ParameterVector<T>> {
    let d = common_dim(vs)?;
    let mut acc = vec![T::zero(); d];
    for v in vs {
        for (a, &x) in acc.iter_mut().zip(v.iter()) {
            *a = *a + x;
        }
    }
    let n = T::of_usize(vs.len());
    Ok(ParameterVector(acc.into_iter().map(|a| a / n).collect()))
}

/// Projects `v` onto the closed l2 ball of radius `radius`.
pub fn project_to_ball<T: Real>(v: &ParameterVector<T>, radius: T) -> Result<ParameterVector<T>> {
    if radius.is_nan() || radius <= T::zero() {
        return Err(Error::invalid(format!("ball radius must be positive, got {radius}")));
    }
    let norm = l2_norm(v)?;
    if norm <= radius {
        Ok(v.clone())
    } else {
        Ok(v.scaled(radius / norm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ParameterVector<f64> {
        ParameterVector::new(v.to_vec()).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> ParameterVector<f64> {
        pv(&(0..d).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<_>>())
    }

    #[test]
    fn norm_of_small_vectors() {
        assert_eq!(l2_norm(&pv(&[0.0, 0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(l2_norm(&pv(&[3.0, 4.0])).unwrap(), 5.0);
    }

    #[test]
    fn norm_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = random_vec(&mut rng, 16);
        let mut s = 0.0;
        for i in 0..16 {
            s += v[i] * v[i];
        }
        assert!((l2_norm(&v).unwrap() - s.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            ParameterVector::new(vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        let raw = ParameterVector::from_raw(vec![f64::INFINITY]);
        assert!(l2_norm(&raw).is_err());
    }

    #[test]
    fn mean_examples() {
        assert_eq!(mean_vectors(&[pv(&[1.0, 1.0]), pv(&[3.0, 3.0])]).unwrap(), pv(&[2.0, 2.0]));
        let v = pv(&[0.25, -7.0]);
        assert_eq!(mean_vectors(std::slice::from_ref(&v)).unwrap(), v);
    }

    #[test]
    fn mean_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vs: Vec<_> = (0..5).map(|_| random_vec(&mut rng, 9)).collect();
        let m = mean_vectors(&vs).unwrap();
        for j in 0..9 {
            let mut s = 0.0;
            for v in &vs {
                s += v[j];
            }
            assert!((m[j] - s / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_errors() {
        assert!(matches!(mean_vectors::<f64>(&[]), Err(Error::Empty(_))));
        assert!(matches!(
            mean_vectors(&[pv(&[1.0]), pv(&[1.0, 2.0])]),
            Err(Error::DimensionMismatch { expected: 1, actual: 2 })
        ));
    }

    #[test]
    fn projection_examples() {
        let inside = pv(&[0.3, 0.4]);
        assert_eq!(project_to_ball(&inside, 1.0).unwrap(), inside);
        assert_eq!(project_to_ball(&pv(&[6.0, 8.0]), 5.0).unwrap(), pv(&[3.0, 4.0]));
        assert!(project_to_ball(&inside, 0.0).is_err());
        assert!(project_to_ball(&inside, -1.0).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let v = ParameterVector::new(vec![3.0f32, 4.0]).unwrap();
        assert_eq!(l2_norm(&v).unwrap(), 5.0f32);
        assert_eq!(project_to_ball(&v, 2.5).unwrap().as_slice(), &[1.5f32, 2.0]);
    }

    proptest! {
        #[test]
        fn projection_bounded_and_idempotent(v in prop::collection::vec(-100.0f64..100.0, 1..20), m in 0.01f64..10.0) {
            let v = pv(&v);
            let once = project_to_ball(&v, m).unwrap();
            prop_assert!(once.norm() <= m + 1e-9);
            let twice = project_to_ball(&once, m).unwrap();
            for (a, b) in once.iter().zip(twice.iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn norm_is_absolutely_homogeneous(v in prop::collection::vec(-50.0f64..50.0, 1..20), a in -10.0f64..10.0) {
            let v = pv(&v);
            let lhs = l2_norm(&v.scaled(a)).unwrap();
            let rhs = a.abs() * l2_norm(&v).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs));
        }

        #[test]
        fn mean_is_permutation_invariant(seed in 0u64..1000, n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vs: Vec<_> = (0..n).map(|_| random_vec(&mut rng, 6)).collect();
            let mut rev = vs.clone();
            rev.reverse();
            let a = mean_vectors(&vs).unwrap();
            let b = mean_vectors(&rev).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
