//! Per-dimension z-score statistics for feature matrices.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::dsp::Matrix;
use crate::error::{invalid, shape_err, Result};

/// Smallest standard deviation used when scaling, so constant dimensions do
/// not blow up.
pub const STD_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Identity scaling over `dim` dimensions.
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Pools every row of every matrix.
    pub fn fit<'a>(mats: impl IntoIterator<Item = &'a Matrix>) -> Result<Self> {
        let mut dim = None;
        let mut n = 0usize;
        let mut sum = Vec::new();
        let mut sq = Vec::new();
        for m in mats {
            let d = *dim.get_or_insert(m.cols());
            if d != m.cols() {
                return Err(shape_err!("feature width {} differs from {d}", m.cols()));
            }
            if sum.is_empty() {
                sum = vec![0.0; d];
                sq = vec![0.0; d];
            }
            for r in 0..m.rows() {
                for (c, &v) in m.row(r).iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += m.rows();
        }
        if n == 0 {
            return Err(invalid!("no frames to fit statistics on"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| Float::sqrt((s / n as f64 - m * m).max(0.0)).max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, m: &Matrix) -> Result<()> {
        if m.cols() != self.dim() {
            return Err(shape_err!("features of width {} against statistics of width {}", m.cols(), self.dim()));
        }
        Ok(())
    }

    pub fn normalize(&self, m: &Matrix) -> Result<Matrix> {
        self.check(m)?;
        Ok(Matrix::from_fn(m.rows(), m.cols(), |r, c| (m.at(r, c) - self.mean[c]) / self.std[c]))
    }

    pub fn denormalize(&self, m: &Matrix) -> Result<Matrix> {
        self.check(m)?;
        Ok(Matrix::from_fn(m.rows(), m.cols(), |r, c| m.at(r, c) * self.std[c] + self.mean[c]))
    }
}
