//! Augmented space: the hyperrectangle covering design-conditioned and
//! environmental variables, and its linear map to the unit hypercube where
//! the surrogates live.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::distributions::ProbabilisticModel;
use crate::error::{QrbdoError, Result};

/// Hyperrectangular confidence region `X x Z` in physical coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentedSpace {
    lower: Vec<f64>,
    upper: Vec<f64>,
    design_dims: usize,
    env_dims: usize,
}

/// Builds the augmented space at outside-sampling probabilities `alpha_d`
/// (per design dimension) and `alpha_z` (per environmental dimension).
///
/// Random design dimensions take the widest envelope over the design box:
/// the lower bound conditions the marginal at `d_i^-` and the upper bound
/// at `d_i^+`, so every design visited by the optimizer is covered.
/// Deterministic design dimensions reduce exactly to `[d_i^-, d_i^+]`, and
/// with no environmental variables the space reduces to the design region.
pub fn build_augmented(
    model: &ProbabilisticModel,
    alpha_d: f64,
    alpha_z: f64,
) -> Result<AugmentedSpace> {
    for (a, label) in [(alpha_d, "alpha_d"), (alpha_z, "alpha_z")] {
        if !(a > 0.0 && a < 1.0) {
            return Err(QrbdoError::Config(format!(
                "{label} must lie in (0,1), got {a}"
            )));
        }
    }
    let mut lower = Vec::with_capacity(model.dim());
    let mut upper = Vec::with_capacity(model.dim());
    for v in model.design() {
        if v.uncertainty.is_none() {
            lower.push(v.lower);
            upper.push(v.upper);
        } else {
            lower.push(v.conditioned(v.lower)?.inv_cdf(alpha_d / 2.0)?);
            upper.push(v.conditioned(v.upper)?.inv_cdf(1.0 - alpha_d / 2.0)?);
        }
    }
    for e in model.env() {
        lower.push(e.marginal.inv_cdf(alpha_z / 2.0)?);
        upper.push(e.marginal.inv_cdf(1.0 - alpha_z / 2.0)?);
    }
    AugmentedSpace::new(lower, upper, model.s_d(), model.s_z())
}

impl AugmentedSpace {
    pub fn new(
        lower: Vec<f64>,
        upper: Vec<f64>,
        design_dims: usize,
        env_dims: usize,
    ) -> Result<Self> {
        if lower.len() != upper.len() || lower.len() != design_dims + env_dims {
            return Err(QrbdoError::Config("augmented space dimension mismatch".into()));
        }
        for (k, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(QrbdoError::Config(format!(
                    "augmented dimension {k} is degenerate: [{lo}, {hi}]"
                )));
            }
        }
        Ok(AugmentedSpace {
            lower,
            upper,
            design_dims,
            env_dims,
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn design_dims(&self) -> usize {
        self.design_dims
    }

    pub fn env_dims(&self) -> usize {
        self.env_dims
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Physical -> unit-cube coordinates (affine per dimension; points
    /// outside the box map outside [0,1], which is allowed).
    pub fn to_unit(&self, x: &[f64], out: &mut [f64]) {
        for k in 0..self.dim() {
            out[k] = (x[k] - self.lower[k]) / (self.upper[k] - self.lower[k]);
        }
    }

    /// Unit-cube -> physical coordinates.
    pub fn from_unit(&self, u: &[f64], out: &mut [f64]) {
        for k in 0..self.dim() {
            out[k] = self.lower[k] + u[k] * (self.upper[k] - self.lower[k]);
        }
    }

    pub fn to_unit_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.to_unit(x, &mut out);
        out
    }

    pub fn from_unit_vec(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.from_unit(u, &mut out);
        out
    }

    /// Maps a matrix of physical rows to unit-cube rows.
    pub fn to_unit_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for k in 0..self.dim() {
            let w = self.upper[k] - self.lower[k];
            for i in 0..x.nrows() {
                out[(i, k)] = (x[(i, k)] - self.lower[k]) / w;
            }
        }
        out
    }
}
