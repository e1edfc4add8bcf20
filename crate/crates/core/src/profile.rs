//! Ragged stacked strategy profiles.
//!
//! Agents may have heterogeneous decision dimensions, so a joint strategy
//! x = col(x_1, ..., x_N) lives in a flat buffer with a per-agent offset
//! table.  Block access is O(1) and returns nalgebra views, so per-agent math
//! never copies the whole profile.

use nalgebra::{DVector, DVectorView, DVectorViewMut};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset table mapping agent indices to contiguous block ranges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    offsets: Vec<usize>, // length N + 1, offsets[N] = total dimension
}

impl Layout {
    pub fn new(dims: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(dims.len() + 1);
        let mut total = 0;
        offsets.push(0);
        for &d in dims {
            total += d;
            offsets.push(total);
        }
        Layout { offsets }
    }

    pub fn n_agents(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total_dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

/// A stacked strategy profile with O(1) per-agent block views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    layout: Layout,
    data: DVector<f64>,
}

impl Profile {
    pub fn zeros(layout: Layout) -> Self {
        let n = layout.total_dim();
        Profile {
            layout,
            data: DVector::zeros(n),
        }
    }

    /// Assemble a profile from per-agent blocks.
    pub fn from_blocks(blocks: &[DVector<f64>]) -> Self {
        let dims: Vec<usize> = blocks.iter().map(|b| b.len()).collect();
        let layout = Layout::new(&dims);
        let mut data = DVector::zeros(layout.total_dim());
        for (i, b) in blocks.iter().enumerate() {
            data.rows_mut(layout.offsets[i], b.len()).copy_from(b);
        }
        Profile { layout, data }
    }

    /// Wrap a flat vector in an existing layout; errors on length mismatch.
    pub fn from_flat(layout: Layout, data: DVector<f64>) -> Result<Self> {
        if data.len() != layout.total_dim() {
            return Err(Error::dim_global(
                "flat profile vector",
                layout.total_dim(),
                data.len(),
            ));
        }
        Ok(Profile { layout, data })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_agents(&self) -> usize {
        self.layout.n_agents()
    }

    pub fn total_dim(&self) -> usize {
        self.layout.total_dim()
    }

    pub fn block(&self, i: usize) -> DVectorView<'_, f64> {
        self.data.rows(self.layout.offsets[i], self.layout.dim(i))
    }

    pub fn block_mut(&mut self, i: usize) -> DVectorViewMut<'_, f64> {
        let off = self.layout.offsets[i];
        let d = self.layout.dim(i);
        self.data.rows_mut(off, d)
    }

    pub fn block_owned(&self, i: usize) -> DVector<f64> {
        self.block(i).into_owned()
    }

    pub fn set_block(&mut self, i: usize, b: &DVector<f64>) {
        assert_eq!(b.len(), self.layout.dim(i), "block length mismatch");
        self.block_mut(i).copy_from(b);
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn as_vector_mut(&mut self) -> &mut DVector<f64> {
        &mut self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean distance to another profile (layouts must match).
    pub fn distance(&self, other: &Profile) -> f64 {
        assert_eq!(self.layout, other.layout, "profile layout mismatch");
        (&self.data - &other.data).norm()
    }
}
