//! Flat parameter vectors.
//!
//! Every per-parameter quantity (weights, gradients, θ* snapshots, importance
//! maps, SI accumulators) is a [`FlatParams`] sharing one [`ParamLayout`], so
//! the same index always names the same connection.
//!
//! Within a layer segment the `out × in` weights come first (row-major), then
//! the `out` biases. Trunk layers come first, then heads in ascending id order.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::layer::Activation;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId(pub u32);

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "head-{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerId {
    Trunk(usize),
    Head(HeadId, usize),
}

impl LayerId {
    pub fn is_trunk(&self) -> bool {
        matches!(self, LayerId::Trunk(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub layer: LayerId,
    pub offset: usize,
    pub len: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl Segment {
    #[inline]
    pub fn weights_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.in_dim * self.out_dim
    }

    #[inline]
    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.offset + self.in_dim * self.out_dim..self.offset + self.len
    }

    #[inline]
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    total: usize,
    trunk_mask: Vec<bool>,
}

impl ParamLayout {
    /// Validates that the segments are contiguous, disjoint and cover
    /// `0..total`.
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut next = 0;
        for s in &segments {
            if s.offset != next {
                return Err(Error::Shape(format!(
                    "segment {:?} starts at {} but previous ended at {next}",
                    s.layer, s.offset
                )));
            }
            if s.len != s.in_dim * s.out_dim + s.out_dim {
                return Err(Error::Shape(format!(
                    "segment {:?} length {} inconsistent with {}x{} layer",
                    s.layer, s.len, s.out_dim, s.in_dim
                )));
            }
            next += s.len;
        }
        let mut trunk_mask = vec![false; next];
        for s in segments.iter().filter(|s| s.layer.is_trunk()) {
            trunk_mask[s.range()].iter_mut().for_each(|m| *m = true);
        }
        Ok(Self {
            segments,
            total: next,
            trunk_mask,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, layer: LayerId) -> Option<&Segment> {
        self.segments.iter().find(|s| s.layer == layer)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.total
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// `true` at indices that belong to shared (trunk) layers.
    pub fn trunk_mask(&self) -> &[bool] {
        &self.trunk_mask
    }

    pub fn trunk_len(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.layer.is_trunk())
            .map(|s| s.len)
            .sum()
    }

    pub fn trunk_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.segments
            .iter()
            .filter(|s| s.layer.is_trunk())
            .flat_map(|s| s.range())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    values: Vec<f64>,
    layout: Arc<ParamLayout>,
}

impl FlatParams {
    pub fn new(values: Vec<f64>, layout: Arc<ParamLayout>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Shape(format!(
                "layout covers {} values, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn zeros_like(other: &FlatParams) -> Self {
        Self::zeros(other.layout.clone())
    }

    /// A vector that is `value` on trunk indices and zero on heads.
    pub fn trunk_filled(layout: Arc<ParamLayout>, value: f64) -> Self {
        let values = layout
            .trunk_mask()
            .iter()
            .map(|&t| if t { value } else { 0.0 })
            .collect();
        Self { values, layout }
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &FlatParams) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub(crate) fn check_layout(&self, other: &FlatParams, what: &str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: parameter layouts differ ({} vs {} values)",
                self.len(),
                other.len()
            )))
        }
    }

    /// Trunk entries in layout order.
    pub fn trunk_values(&self) -> Vec<f64> {
        self.layout
            .trunk_indices()
            .map(|i| self.values[i])
            .collect()
    }

    /// Zeroes every head entry.
    pub fn mask_to_trunk(&mut self) {
        for (v, &t) in self.values.iter_mut().zip(self.layout.trunk_mask()) {
            if !t {
                *v = 0.0;
            }
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &FlatParams) -> Result<()> {
        self.check_layout(other, "axpy")?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn dot(&self, other: &FlatParams) -> Result<f64> {
        self.check_layout(other, "dot")?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn sub(&self, other: &FlatParams) -> Result<FlatParams> {
        self.check_layout(other, "sub")?;
        Ok(FlatParams {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
            layout: self.layout.clone(),
        })
    }

    pub fn max_abs_diff(&self, other: &FlatParams) -> Result<f64> {
        self.check_layout(other, "max_abs_diff")?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Plain SGD: `values - lr * grad`.
pub fn sgd_step(params: &FlatParams, grad: &FlatParams, lr: f64) -> Result<FlatParams> {
    params.check_layout(grad, "sgd_step")?;
    let mut out = params.clone();
    for (v, g) in out.values.iter_mut().zip(&grad.values) {
        *v -= lr * g;
    }
    Ok(out)
}
