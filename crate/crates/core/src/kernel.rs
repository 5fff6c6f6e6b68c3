//! Covariance functions over normalized channel coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// Matérn with smoothness ν = 2.5 (fixed).
    Matern25,
    Rbf,
    DotProduct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Ignored by `DotProduct`.
    pub length_scale: f64,
    pub signal_variance: f64,
    /// Only used by `DotProduct`.
    #[serde(default)]
    pub sigma0_sq: f64,
}

impl KernelSpec {
    pub fn matern25(length_scale: f64, signal_variance: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Matern25,
            length_scale,
            signal_variance,
            sigma0_sq: 0.0,
        }
    }

    pub fn rbf(length_scale: f64, signal_variance: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Rbf,
            length_scale,
            signal_variance,
            sigma0_sq: 0.0,
        }
    }

    pub fn dot_product(sigma0_sq: f64, signal_variance: f64) -> Self {
        KernelSpec {
            family: KernelFamily::DotProduct,
            length_scale: 1.0,
            signal_variance,
            sigma0_sq,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.signal_variance > 0.0
            && self.signal_variance.is_finite()
            && match self.family {
                KernelFamily::Matern25 | KernelFamily::Rbf => {
                    self.length_scale > 0.0 && self.length_scale.is_finite()
                }
                KernelFamily::DotProduct => self.sigma0_sq >= 0.0 && self.sigma0_sq.is_finite(),
            };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameters(alloc::format!("{self:?}")))
        }
    }

    pub fn eval(&self, x1: &[f64], x2: &[f64]) -> Result<f64> {
        if x1.len() != x2.len() {
            return Err(Error::DimensionMismatch {
                expected: x1.len(),
                got: x2.len(),
            });
        }
        Ok(self.eval_unchecked(x1, x2))
    }

    pub(crate) fn eval_unchecked(&self, x1: &[f64], x2: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Matern25 => {
                self.signal_variance * matern25_profile(distance(x1, x2) / self.length_scale)
            }
            KernelFamily::Rbf => {
                let r2 = squared_distance(x1, x2);
                self.signal_variance * libm::exp(-r2 / (2.0 * self.length_scale * self.length_scale))
            }
            KernelFamily::DotProduct => {
                let dot: f64 = x1.iter().zip(x2).map(|(a, b)| a * b).sum();
                self.signal_variance * (dot + self.sigma0_sq)
            }
        }
    }

    /// Whether k(x, x) is the same everywhere.
    pub fn is_stationary(&self) -> bool {
        self.family != KernelFamily::DotProduct
    }
}

/// Matérn ν = 2.5 correlation as a function of the scaled distance `r / ℓ`.
pub fn matern25_profile(scaled: f64) -> f64 {
    let s = libm::sqrt(5.0) * scaled;
    (1.0 + s + s * s / 3.0) * libm::exp(-s)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(squared_distance(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matern_at_zero_is_signal_variance() {
        let k = KernelSpec::matern25(1.0, 1.0);
        assert_eq!(k.eval(&[0.3], &[0.3]).unwrap(), 1.0);
        let k = KernelSpec::matern25(0.2, 2.5);
        assert_eq!(k.eval(&[0.3, 0.1], &[0.3, 0.1]).unwrap(), 2.5);
    }

    #[test]
    fn matern_at_unit_distance() {
        let k = KernelSpec::matern25(1.0, 1.0);
        let v = k.eval(&[0.0], &[1.0]).unwrap();
        // (1 + √5 + 5/3)·e^(−√5) = 0.523994...
        assert!((v - 0.523994).abs() < 1e-6, "{v}");
    }

    #[test]
    fn dot_product_is_inner_product_plus_offset() {
        let k = KernelSpec::dot_product(0.0, 1.0);
        assert_eq!(k.eval(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        let k = KernelSpec::dot_product(0.5, 1.0);
        assert_eq!(k.eval(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.5);
    }

    #[test]
    fn rbf_at_one_length_scale() {
        let k = KernelSpec::rbf(2.0, 3.0);
        let v = k.eval(&[0.0], &[2.0]).unwrap();
        assert!((v - 3.0 * libm::exp(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let k = KernelSpec::matern25(1.0, 1.0);
        assert_eq!(
            k.eval(&[0.0], &[0.0, 1.0]),
            Err(Error::DimensionMismatch { expected: 1, got: 2 })
        );
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        assert!(KernelSpec::matern25(0.0, 1.0).validate().is_err());
        assert!(KernelSpec::rbf(1.0, -1.0).validate().is_err());
        assert!(KernelSpec::dot_product(-0.1, 1.0).validate().is_err());
        assert!(KernelSpec::dot_product(0.0, 1.0).validate().is_ok());
    }

    mod props {
        use super::*;
        use alloc::vec::Vec;
        use nalgebra::DMatrix;
        use proptest::prelude::*;

        fn spec() -> impl Strategy<Value = KernelSpec> {
            prop_oneof![
                (0.01f64..5.0, 0.1f64..10.0).prop_map(|(l, v)| KernelSpec::matern25(l, v)),
                (0.01f64..5.0, 0.1f64..10.0).prop_map(|(l, v)| KernelSpec::rbf(l, v)),
                (0.0f64..10.0, 0.1f64..10.0).prop_map(|(s, v)| KernelSpec::dot_product(s, v)),
            ]
        }

        fn point() -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.0f64..1.0, 2)
        }

        proptest! {
            #[test]
            fn symmetric(k in spec(), a in point(), b in point()) {
                prop_assert_eq!(k.eval(&a, &b).unwrap(), k.eval(&b, &a).unwrap());
            }

            #[test]
            fn stationary_kernels_are_shift_invariant(
                k in spec().prop_filter("stationary", |k| k.is_stationary()),
                a in point(), b in point(), shift in point(),
            ) {
                let sa: Vec<f64> = a.iter().zip(&shift).map(|(x, d)| x + d).collect();
                let sb: Vec<f64> = b.iter().zip(&shift).map(|(x, d)| x + d).collect();
                let v = k.eval(&a, &b).unwrap();
                prop_assert!((v - k.eval(&sa, &sb).unwrap()).abs() <= 1e-12 * k.signal_variance);
                prop_assert!(v <= k.signal_variance && v > 0.0);
            }

            #[test]
            fn gram_is_positive_semidefinite(k in spec(), pts in proptest::collection::vec(point(), 1..64)) {
                let n = pts.len();
                let g = DMatrix::from_fn(n, n, |i, j| k.eval(&pts[i], &pts[j]).unwrap());
                let scale = g.diagonal().max().max(1.0);
                let min = g.symmetric_eigenvalues().min();
                prop_assert!(min >= -1e-9 * scale * n as f64, "{}", min);
            }

            #[test]
            fn matern_is_smooth(r in 0.0f64..5.0) {
                // twice differentiable: the first difference quotient is continuous and vanishes at 0
                let h = 1e-6;
                let d1 = (matern25_profile(r + h) - matern25_profile(r)) / h;
                let d2 = (matern25_profile(r + 2.0 * h) - matern25_profile(r + h)) / h;
                prop_assert!((d1 - d2).abs() < 1e-4);
                prop_assert!(d1 <= 1e-6);
            }
        }

        #[test]
        fn matern_slope_vanishes_at_zero() {
            let h = 1e-5;
            assert!(((matern25_profile(h) - 1.0) / h).abs() < 1e-3);
        }
    }
}
