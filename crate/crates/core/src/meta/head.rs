use serde::{Deserialize, Serialize};

use super::HeadInit;
use crate::error::{contract, Result};
use crate::numerics::{Matrix, RngStream, Vector};

/// Final linear layer `w ∈ R^{N_f × N_way}`; column `k` is `w_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub w: Matrix,
}

impl LinearHead {
    pub fn zeros(n_f: usize, n_way: usize) -> Self {
        Self { w: Matrix::zeros(n_f, n_way) }
    }

    pub fn from_matrix(w: Matrix) -> Self {
        Self { w }
    }

    pub fn feature_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn n_way(&self) -> usize {
        self.w.cols()
    }

    pub fn column(&self, k: usize) -> Vector {
        self.w.col(k)
    }

    pub fn norm(&self) -> f64 {
        self.w.frobenius_norm()
    }

    pub fn is_zero(&self) -> bool {
        self.w.as_slice().iter().all(|v| *v == 0.0)
    }

    /// Logits without shape checks; `feature.len()` must equal `N_f`.
    pub(crate) fn logits_unchecked(&self, feature: &[f64]) -> Vector {
        self.w.matvec_t(feature)
    }
}

/// `[φᵀw_1, …, φᵀw_N]`.
pub fn head_logits(head: &LinearHead, feature: &[f64]) -> Result<Vector> {
    if feature.len() != head.feature_dim() {
        return Err(contract(format!(
            "feature length {} != head feature dimension {}",
            feature.len(),
            head.feature_dim()
        )));
    }
    Ok(head.logits_unchecked(feature))
}

pub fn init_head(policy: HeadInit, n_f: usize, n_way: usize, rng: &mut RngStream) -> Result<LinearHead> {
    if n_f == 0 || n_way == 0 {
        return Err(contract(format!("invalid head shape ({n_f}, {n_way})")));
    }
    let default_sd = 1.0 / (n_f as f64).sqrt();
    let random = |sd: f64, rng: &mut RngStream| {
        let data = (0..n_f * n_way).map(|_| sd * rng.next_gaussian()).collect();
        Matrix::from_vec(n_f, n_way, data)
    };
    let w = match policy {
        HeadInit::Random(sd) => random(sd.unwrap_or(default_sd), rng)?,
        HeadInit::Scaled(c) => {
            let mut w = random(default_sd, rng)?;
            w.scale(c);
            w
        }
        HeadInit::Zero | HeadInit::ZeroingTrick => Matrix::zeros(n_f, n_way),
    };
    Ok(LinearHead { w })
}

/// Column-by-column dot products; a second route to the logits for tests.
#[cfg(test)]
pub(crate) fn logits_by_columns(head: &LinearHead, feature: &[f64]) -> Vector {
    (0..head.n_way()).map(|k| crate::numerics::dot(&head.column(k), feature)).collect()
}
