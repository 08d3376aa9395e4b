use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::View;

/// N×N grid of patch feature vectors for one camera view, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchFeatureGrid {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PatchFeatureGrid {
    pub fn zeros(n: usize, dim: usize) -> Self {
        Self {
            n,
            dim,
            data: vec![0.0; n * n * dim],
        }
    }

    pub fn from_vec(n: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {n}x{n} grid of dim {dim}",
                data.len()
            )));
        }
        Ok(Self { n, dim, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_patches(&self) -> usize {
        self.n * self.n
    }

    /// Feature vector of the patch with flat index `p = row * n + col`.
    pub fn patch(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }

    pub fn patch_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.dim..(p + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// One camera frame per view.
pub type Frame = BTreeMap<View, PatchFeatureGrid>;
