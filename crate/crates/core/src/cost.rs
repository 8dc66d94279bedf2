//! Quadratic regulation costs and their expansions along a nominal trajectory.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DrocError, Result};

/// Time-invariant quadratic stage and terminal costs
/// `l(x,u) = ½xᵀQx + ½uᵀRu`, `l_f(x) = ½xᵀQ_f x`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qf: DMatrix<f64>,
}

/// Diagonal cost weights as they appear in the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostConfig {
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub qf_diag: Vec<f64>,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            q_diag: vec![1.0, 1.0, 0.1, 0.1],
            r_diag: vec![0.1, 0.1],
            qf_diag: vec![10.0, 10.0, 1.0, 1.0],
        }
    }
}

/// Second-order expansion of the stage cost around `(x_nom, u_nom)`.
/// Exact for quadratic costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostExpansion {
    pub value: f64,
    pub q_vec: DVector<f64>,
    pub r_vec: DVector<f64>,
    pub q_mat: DMatrix<f64>,
    pub r_mat: DMatrix<f64>,
}

impl QuadCost {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, qf: DMatrix<f64>) -> Result<Self> {
        check_dim("cost Q square", q.nrows(), q.ncols())?;
        check_dim("cost R square", r.nrows(), r.ncols())?;
        check_dim("cost Qf", q.nrows(), qf.nrows())?;
        check_dim("cost Qf square", qf.nrows(), qf.ncols())?;
        for (name, m) in [("Q", &q), ("R", &r), ("Qf", &qf)] {
            if (m - m.transpose()).amax() > 1e-12 {
                return Err(DrocError::InvalidConfig(format!("{name} is not symmetric")));
            }
        }
        if q.clone().symmetric_eigenvalues().min() < -1e-12
            || qf.clone().symmetric_eigenvalues().min() < -1e-12
        {
            return Err(DrocError::InvalidConfig("Q and Qf must be PSD".into()));
        }
        if r.clone().symmetric_eigenvalues().min() <= 0.0 {
            return Err(DrocError::InvalidConfig("R must be positive definite".into()));
        }
        Ok(QuadCost { q, r, qf })
    }

    pub fn diagonal(q: &[f64], r: &[f64], qf: &[f64]) -> Result<Self> {
        Self::new(
            DMatrix::from_diagonal(&DVector::from_column_slice(q)),
            DMatrix::from_diagonal(&DVector::from_column_slice(r)),
            DMatrix::from_diagonal(&DVector::from_column_slice(qf)),
        )
    }

    pub fn from_config(cfg: &CostConfig) -> Result<Self> {
        Self::diagonal(&cfg.q_diag, &cfg.r_diag, &cfg.qf_diag)
    }

    pub fn state_dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.r.nrows()
    }

    pub fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        check_dim("stage cost state", self.state_dim(), x.len())?;
        check_dim("stage cost control", self.control_dim(), u.len())?;
        Ok(0.5 * x.dot(&(&self.q * x)) + 0.5 * u.dot(&(&self.r * u)))
    }

    pub fn terminal_cost(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim("terminal cost state", self.state_dim(), x.len())?;
        Ok(0.5 * x.dot(&(&self.qf * x)))
    }

    /// `J = Σ_t l(x_t, u_t) + l_f(x_final)`.
    pub fn total_cost(
        &self,
        states: &[DVector<f64>],
        controls: &[DVector<f64>],
        x_final: &DVector<f64>,
    ) -> Result<f64> {
        check_dim("trajectory length", controls.len(), states.len())?;
        let mut total = 0.0;
        for (x, u) in states.iter().zip(controls) {
            total += self.stage_cost(x, u)?;
        }
        Ok(total + self.terminal_cost(x_final)?)
    }

    pub fn expand(&self, x_nom: &DVector<f64>, u_nom: &DVector<f64>) -> Result<CostExpansion> {
        Ok(CostExpansion {
            value: self.stage_cost(x_nom, u_nom)?,
            q_vec: &self.q * x_nom,
            r_vec: &self.r * u_nom,
            q_mat: self.q.clone(),
            r_mat: self.r.clone(),
        })
    }
}

impl CostExpansion {
    /// Evaluates the expansion at a displacement from the nominal point.
    pub fn evaluate(&self, dx: &DVector<f64>, du: &DVector<f64>) -> f64 {
        self.value
            + self.q_vec.dot(dx)
            + self.r_vec.dot(du)
            + 0.5 * dx.dot(&(&self.q_mat * dx))
            + 0.5 * du.dot(&(&self.r_mat * du))
    }
}
