use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficients of the Itô diffusion `dX = a(t,X) dt + b(t,X) dW`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelKind {
    /// Multi-asset geometric Brownian motion with independent drivers:
    /// `a_d = (r - delta_d) x_d`, `(b dW)_d = sigma_d x_d dW_d`.
    Gbm {
        r: f64,
        delta: Vec<f64>,
        sigma: Vec<f64>,
    },
    /// Affine coefficients: `a(x) = A1 x + b1` and
    /// `b(x)[d][e] = sum_f A2[d][e][f] x_f + b2[d][e]`.
    GenericAffine {
        a1: Vec<Vec<f64>>,
        b1: Vec<f64>,
        a2: Vec<Vec<Vec<f64>>>,
        b2: Vec<Vec<f64>>,
    },
}

/// A D-dimensional diffusion together with its initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dim: usize,
    pub x0: Vec<f64>,
    pub kind: ModelKind,
}

impl ModelSpec {
    /// Symmetric GBM: every coordinate starts at `s0` and shares `(r, delta, sigma)`.
    pub fn gbm_symmetric(dim: usize, s0: f64, r: f64, delta: f64, sigma: f64) -> Result<Self> {
        ModelSpec::gbm(
            vec![s0; dim],
            r,
            vec![delta; dim],
            vec![sigma; dim],
        )
    }

    pub fn gbm(x0: Vec<f64>, r: f64, delta: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let dim = x0.len();
        if dim == 0 {
            return Err(Error::invalid("state dimension must be at least 1"));
        }
        if delta.len() != dim || sigma.len() != dim {
            return Err(Error::invalid(format!(
                "parameter lengths (delta {}, sigma {}) must match dimension {dim}",
                delta.len(),
                sigma.len()
            )));
        }
        if sigma.iter().any(|s| *s < 0.0) {
            return Err(Error::invalid("volatilities must be non-negative"));
        }
        Ok(ModelSpec {
            dim,
            x0,
            kind: ModelKind::Gbm { r, delta, sigma },
        })
    }

    /// One-dimensional driftless Brownian motion, `dX = dW`.
    pub fn brownian_1d(x0: f64) -> Self {
        ModelSpec {
            dim: 1,
            x0: vec![x0],
            kind: ModelKind::GenericAffine {
                a1: vec![vec![0.0]],
                b1: vec![0.0],
                a2: vec![vec![vec![0.0]]],
                b2: vec![vec![1.0]],
            },
        }
    }

    pub fn generic_affine(
        x0: Vec<f64>,
        a1: Vec<Vec<f64>>,
        b1: Vec<f64>,
        a2: Vec<Vec<Vec<f64>>>,
        b2: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let dim = x0.len();
        if dim == 0 {
            return Err(Error::invalid("state dimension must be at least 1"));
        }
        let square = |name: &str, m: &Vec<Vec<f64>>| -> Result<()> {
            if m.len() != dim || m.iter().any(|row| row.len() != dim) {
                return Err(Error::invalid(format!("{name} must be {dim}x{dim}")));
            }
            Ok(())
        };
        square("a1", &a1)?;
        square("b2", &b2)?;
        if b1.len() != dim {
            return Err(Error::invalid(format!("b1 must have length {dim}")));
        }
        if a2.len() != dim
            || a2.iter()
                .any(|m| m.len() != dim || m.iter().any(|row| row.len() != dim))
        {
            return Err(Error::invalid(format!("a2 must be {dim}x{dim}x{dim}")));
        }
        Ok(ModelSpec {
            dim,
            x0,
            kind: ModelKind::GenericAffine { a1, b1, a2, b2 },
        })
    }

    pub fn is_gbm(&self) -> bool {
        matches!(self.kind, ModelKind::Gbm { .. })
    }

    /// Rewrite a GBM model as its (diagonal) affine representation.
    pub fn to_generic_affine(&self) -> ModelSpec {
        match &self.kind {
            ModelKind::GenericAffine { .. } => self.clone(),
            ModelKind::Gbm { r, delta, sigma } => {
                let d = self.dim;
                let mut a1 = vec![vec![0.0; d]; d];
                let mut a2 = vec![vec![vec![0.0; d]; d]; d];
                for i in 0..d {
                    a1[i][i] = r - delta[i];
                    a2[i][i][i] = sigma[i];
                }
                ModelSpec {
                    dim: d,
                    x0: self.x0.clone(),
                    kind: ModelKind::GenericAffine {
                        a1,
                        b1: vec![0.0; d],
                        a2,
                        b2: vec![vec![0.0; d]; d],
                    },
                }
            }
        }
    }

    /// Drift vector `a(t, x)` written into `out`.
    ///
    /// The benchmark coefficients are time-homogeneous; `_t` is accepted so
    /// time-dependent extensions keep the same call shape.
    pub fn drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            ModelKind::Gbm { r, delta, .. } => {
                for d in 0..self.dim {
                    out[d] = (r - delta[d]) * x[d];
                }
            }
            ModelKind::GenericAffine { a1, b1, .. } => {
                for d in 0..self.dim {
                    let mut acc = b1[d];
                    for (f, xf) in x.iter().enumerate() {
                        acc += a1[d][f] * xf;
                    }
                    out[d] = acc;
                }
            }
        }
    }

    /// Diffusion response `b(t, x) dw` written into `out`.
    pub fn diffusion_dw(&self, _t: f64, x: &[f64], dw: &[f64], out: &mut [f64]) {
        match &self.kind {
            ModelKind::Gbm { sigma, .. } => {
                for d in 0..self.dim {
                    out[d] = sigma[d] * x[d] * dw[d];
                }
            }
            ModelKind::GenericAffine { a2, b2, .. } => {
                for d in 0..self.dim {
                    let mut acc = 0.0;
                    for e in 0..self.dim {
                        let mut bde = b2[d][e];
                        for (f, xf) in x.iter().enumerate() {
                            bde += a2[d][e][f] * xf;
                        }
                        acc += bde * dw[e];
                    }
                    out[d] = acc;
                }
            }
        }
    }

    /// Euclidean norm of row `d` of `b(0, x)`; used to pick network output scales.
    pub fn diffusion_row_norm(&self, x: &[f64], d: usize) -> f64 {
        match &self.kind {
            ModelKind::Gbm { sigma, .. } => (sigma[d] * x[d]).abs(),
            ModelKind::GenericAffine { a2, b2, .. } => {
                let mut sq = 0.0;
                for e in 0..self.dim {
                    let mut bde = b2[d][e];
                    for (f, xf) in x.iter().enumerate() {
                        bde += a2[d][e][f] * xf;
                    }
                    sq += bde * bde;
                }
                sq.sqrt()
            }
        }
    }

    /// One Euler step `x + a(t,x) dt + b(t,x) dw`.
    pub fn euler_step(&self, t: f64, x: &[f64], dt: f64, dw: &[f64]) -> Vec<f64> {
        let mut drift = vec![0.0; self.dim];
        let mut diff = vec![0.0; self.dim];
        self.drift(t, x, &mut drift);
        self.diffusion_dw(t, x, dw, &mut diff);
        (0..self.dim)
            .map(|d| x[d] + drift[d] * dt + diff[d])
            .collect()
    }

    /// One exact log-normal GBM step. Errors for non-GBM models.
    pub fn exact_gbm_step(&self, x: &[f64], dt: f64, dw: &[f64]) -> Result<Vec<f64>> {
        match &self.kind {
            ModelKind::Gbm { r, delta, sigma } => Ok((0..self.dim)
                .map(|d| {
                    let drift = (r - delta[d] - 0.5 * sigma[d] * sigma[d]) * dt;
                    x[d] * (drift + sigma[d] * dw[d]).exp()
                })
                .collect()),
            _ => Err(Error::UnsupportedModel(
                "exact stepping requires a GBM model".into(),
            )),
        }
    }
}
