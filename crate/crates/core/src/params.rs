//! Flat parameter vectors: the unit every aggregation works on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An ordered, fixed-length list of finite model weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    /// Builds a vector, rejecting empty input and any NaN/Inf entry.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::param("values", "parameter vector must be nonempty"));
        }
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "parameter vector length must be positive");
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

    pub fn ensure_len(&self, expected: usize) -> Result<()> {
        if self.0.len() != expected {
            return Err(Error::Shape {
                expected,
                actual: self.0.len(),
            });
        }
        Ok(())
    }

    pub fn ensure_same_len(&self, other: &ParameterVector) -> Result<()> {
        other.ensure_len(self.len())
    }

    /// Weighted sum `Σ wᵢ·vᵢ` over equally sized vectors.
    pub fn weighted_sum<'a, I>(terms: I) -> Result<ParameterVector>
    where
        I: IntoIterator<Item = (f64, &'a ParameterVector)>,
    {
        let mut iter = terms.into_iter();
        let (w0, v0) = iter
            .next()
            .ok_or_else(|| Error::Aggregation("weighted sum of zero vectors".into()))?;
        let mut acc: Vec<f64> = v0.0.iter().map(|x| w0 * x).collect();
        for (w, v) in iter {
            v.ensure_len(acc.len())?;
            for (a, x) in acc.iter_mut().zip(&v.0) {
                *a += w * x;
            }
        }
        ParameterVector::new(acc)
    }

    /// Elementwise mean of equally sized vectors.
    pub fn mean<'a, I>(vectors: I) -> Result<ParameterVector>
    where
        I: IntoIterator<Item = &'a ParameterVector>,
    {
        let vs: Vec<&ParameterVector> = vectors.into_iter().collect();
        let w = 1.0 / vs.len().max(1) as f64;
        ParameterVector::weighted_sum(vs.into_iter().map(|v| (w, v)))
    }

    /// `(1 - t)·self + t·other`.
    pub fn lerp(&self, other: &ParameterVector, t: f64) -> Result<ParameterVector> {
        self.ensure_same_len(other)?;
        let values = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect();
        ParameterVector::new(values)
    }
}

impl TryFrom<Vec<f64>> for ParameterVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ParameterVector::new(values)
    }
}

impl From<ParameterVector> for Vec<f64> {
    fn from(p: ParameterVector) -> Self {
        p.0
    }
}

impl AsRef<[f64]> for ParameterVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nan_with_index() {
        let err = ParameterVector::new(vec![0.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }

    #[test]
    fn rejects_empty() {
        assert!(ParameterVector::new(vec![]).is_err());
    }

    #[test]
    fn weighted_sum_checks_lengths() {
        let a = ParameterVector::new(vec![1.0, 2.0]).unwrap();
        let b = ParameterVector::new(vec![1.0]).unwrap();
        let err = ParameterVector::weighted_sum([(0.5, &a), (0.5, &b)]).unwrap_err();
        assert_eq!(
            err,
            Error::Shape {
                expected: 2,
                actual: 1
            }
        );
    }

    #[test]
    fn lerp_endpoints() {
        let a = ParameterVector::new(vec![1.0, -1.0]).unwrap();
        let b = ParameterVector::new(vec![3.0, 5.0]).unwrap();
        assert_eq!(a.lerp(&b, 0.0).unwrap(), a);
        assert_eq!(a.lerp(&b, 1.0).unwrap(), b);
    }

    #[test]
    fn serde_rejects_non_finite_on_decode() {
        let v: std::result::Result<ParameterVector, _> = serde_json::from_str("[]");
        assert!(v.is_err());
    }
}
