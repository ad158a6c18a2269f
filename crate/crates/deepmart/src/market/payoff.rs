use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discounted payoff families used by the benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PayoffKind {
    /// `e^{-rt} (max_d x_d - K)^+`
    MaxCall { strike: f64, rate: f64 },
    /// `e^{-rt} (K - mean_d x_d)^+`
    BasketPut { strike: f64, rate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PayoffSpec {
    pub kind: PayoffKind,
}

impl PayoffSpec {
    pub fn max_call(strike: f64, rate: f64) -> Self {
        PayoffSpec {
            kind: PayoffKind::MaxCall { strike, rate },
        }
    }

    pub fn basket_put(strike: f64, rate: f64) -> Self {
        PayoffSpec {
            kind: PayoffKind::BasketPut { strike, rate },
        }
    }

    /// Discounted payoff at `(t, x)`; always non-negative.
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match self.kind {
            PayoffKind::MaxCall { strike, rate } => {
                let best = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (-rate * t).exp() * (best - strike).max(0.0)
            }
            PayoffKind::BasketPut { strike, rate } => {
                let mean = x.iter().sum::<f64>() / x.len() as f64;
                (-rate * t).exp() * (strike - mean).max(0.0)
            }
        }
    }

    /// Like [`eval`](Self::eval) but validates the state dimension.
    pub fn eval_checked(&self, t: f64, x: &[f64], dim: usize) -> Result<f64> {
        if x.len() != dim {
            return Err(Error::invalid(format!(
                "payoff state has length {}, expected {dim}",
                x.len()
            )));
        }
        Ok(self.eval(t, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_call_out_of_the_money() {
        let p = PayoffSpec::max_call(100.0, 0.05);
        assert_eq!(p.eval(0.0, &[90.0, 95.0]), 0.0);
    }

    #[test]
    fn max_call_discounted_value() {
        let p = PayoffSpec::max_call(100.0, 0.05);
        let v = p.eval(1.0, &[110.0, 95.0]);
        assert!((v - 10.0 * (-0.05f64).exp()).abs() < 1e-12);
        assert!((v - 9.51229).abs() < 1e-5);
    }

    #[test]
    fn basket_put_uses_arithmetic_mean() {
        let p = PayoffSpec::basket_put(100.0, 0.05);
        assert_eq!(p.eval(0.0, &[80.0, 100.0]), 10.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = PayoffSpec::max_call(100.0, 0.05);
        assert!(p.eval_checked(0.0, &[1.0, 2.0], 3).is_err());
    }
}
