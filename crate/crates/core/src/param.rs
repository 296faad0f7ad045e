//! Flat parameter vectors.
//!
//! Every reduction walks its inputs in ascending index order so results are
//! bit-stable for a given platform.

use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Immutable flat vector of finite weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Wraps `values`, rejecting NaN and infinities.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Largest absolute entry; 0 for an empty vector.
    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        Error::check_len(self.len(), other.len())?;
        ParamVector::new(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ParamVector::new(values)
    }
}

impl<'de> Deserialize<'de> for ParamVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(d)?;
        ParamVector::new(values).map_err(serde::de::Error::custom)
    }
}

/// `a * x + y`.
pub fn axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    if !a.is_finite() {
        return Err(Error::Numeric(format!("scale {a} is not finite")));
    }
    Error::check_len(x.len(), y.len())?;
    ParamVector::new(x.0.iter().zip(&y.0).map(|(xi, yi)| a * xi + yi).collect())
}

/// `Σ (w_i / Σw) · v_i`, accumulated in input order.
///
/// Weights are raw (e.g. sample counts) and normalized here.
pub fn weighted_mean(vectors: &[&ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Argument("weighted mean of an empty list".into()))?;
    if vectors.len() != weights.len() {
        return Err(Error::Argument(format!(
            "{} vectors but {} weights",
            vectors.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::Argument(format!("weight {w} is negative or not finite")));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Argument("weights sum to zero".into()));
    }
    for v in vectors {
        if v.len() != first.len() {
            return Err(Error::Argument(format!(
                "vector length {} differs from {}",
                v.len(),
                first.len()
            )));
        }
    }
    let mut acc = vec![0.0; first.len()];
    for (v, w) in vectors.iter().zip(weights) {
        let share = w / total;
        for (a, x) in acc.iter_mut().zip(&v.0) {
            *a += share * x;
        }
    }
    ParamVector::new(acc)
}

/// True iff `max |x_i - y_i| <= tol`.
pub fn allclose(x: &ParamVector, y: &ParamVector, tol: f64) -> Result<bool> {
    Error::check_len(x.len(), y.len())?;
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Argument(format!("tolerance {tol} must be positive")));
    }
    Ok(x.0.iter().zip(&y.0).all(|(a, b)| (a - b).abs() <= tol))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn axpy_examples() {
        assert_eq!(axpy(0.0, &pv(&[7.0, 7.0]), &pv(&[1.0, 2.0])).unwrap(), pv(&[1.0, 2.0]));
        assert_eq!(axpy(1.0, &pv(&[1.0, 1.0]), &pv(&[0.0, 0.0])).unwrap(), pv(&[1.0, 1.0]));
        assert_eq!(axpy(2.0, &pv(&[1.0, -1.0]), &pv(&[3.0, 3.0])).unwrap(), pv(&[5.0, 1.0]));
    }

    #[test]
    fn axpy_errors() {
        assert!(matches!(
            axpy(1.0, &pv(&[1.0]), &pv(&[1.0, 2.0])),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            axpy(f64::MAX, &pv(&[f64::MAX]), &pv(&[0.0])),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(axpy(f64::NAN, &pv(&[1.0]), &pv(&[0.0])), Err(Error::Numeric(_))));
    }

    #[test]
    fn rejects_non_finite_entries() {
        assert!(ParamVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(ParamVector::new(vec![f64::INFINITY]).is_err());
        assert!(serde_json::from_str::<ParamVector>("[1.0, 2.0]").is_ok());
    }

    #[test]
    fn weighted_mean_examples() {
        assert_eq!(weighted_mean(&[&pv(&[0.0, 4.0])], &[5.0]).unwrap(), pv(&[0.0, 4.0]));
        assert_eq!(
            weighted_mean(&[&pv(&[1.0, 3.0]), &pv(&[3.0, 1.0])], &[1.0, 1.0]).unwrap(),
            pv(&[2.0, 2.0])
        );
        assert_eq!(
            weighted_mean(&[&pv(&[0.0]), &pv(&[4.0])], &[1.0, 3.0]).unwrap(),
            pv(&[3.0])
        );
    }

    #[test]
    fn weighted_mean_errors() {
        assert!(matches!(weighted_mean(&[], &[]), Err(Error::Argument(_))));
        assert!(matches!(
            weighted_mean(&[&pv(&[1.0]), &pv(&[1.0, 2.0])], &[1.0, 1.0]),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            weighted_mean(&[&pv(&[1.0]), &pv(&[2.0])], &[0.0, 0.0]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn allclose_examples() {
        assert!(allclose(&pv(&[1.0, 2.0]), &pv(&[1.0, 2.0]), 1e-12).unwrap());
        assert!(!allclose(&pv(&[1.0]), &pv(&[1.5]), 0.4).unwrap());
        assert!(allclose(&pv(&[1.0]), &pv(&[1.5]), 0.6).unwrap());
        assert!(matches!(
            allclose(&pv(&[1.0]), &pv(&[1.0, 1.0]), 0.1),
            Err(Error::Dimension { .. })
        ));
    }

    fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1e3..1e3f64, len)
    }

    proptest! {
        #[test]
        fn axpy_with_zero_is_identity(x in vec_strategy(8)) {
            let x = pv(&x);
            prop_assert_eq!(axpy(1.0, &x, &ParamVector::zeros(8)).unwrap(), x);
        }

        #[test]
        fn weighted_mean_scale_invariant(
            a in vec_strategy(5),
            b in vec_strategy(5),
            w in prop::collection::vec(0.1..100.0f64, 2),
            c in 0.01..1000.0f64,
        ) {
            let (a, b) = (pv(&a), pv(&b));
            let m1 = weighted_mean(&[&a, &b], &w).unwrap();
            let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
            let m2 = weighted_mean(&[&a, &b], &scaled).unwrap();
            prop_assert!(allclose(&m1, &m2, 1e-12).unwrap());
        }

        #[test]
        fn equal_weights_give_arithmetic_mean(
            vs in prop::collection::vec(vec_strategy(4), 1..6),
        ) {
            let pvs: Vec<ParamVector> = vs.iter().map(|v| pv(v)).collect();
            let refs: Vec<&ParamVector> = pvs.iter().collect();
            let m = weighted_mean(&refs, &vec![2.5; refs.len()]).unwrap();
            for i in 0..4 {
                let mean = vs.iter().map(|v| v[i]).sum::<f64>() / vs.len() as f64;
                prop_assert!((m[i] - mean).abs() <= 1e-9);
            }
        }
    }
}
