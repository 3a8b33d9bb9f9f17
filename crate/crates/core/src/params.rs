//! Flat model parameter vectors.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A named, shaped slice of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            shape,
        }
    }

    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of segments describing how a flat vector is carved up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
}

impl Layout {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    /// A single anonymous segment of `len` values.
    pub fn flat(len: usize) -> Self {
        Self::new(vec![Segment::new("flat", vec![len])])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(Segment::size).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Offset of segment `index` within the flat vector.
    pub fn offset(&self, index: usize) -> usize {
        self.segments[..index].iter().map(Segment::size).sum()
    }
}

/// Flat real-valued parameter vector with layout metadata.
///
/// All values are finite. Binary operations require identical layouts.
#[derive(Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl fmt::Debug for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamVector")
            .field("len", &self.values.len())
            .field("values", &self.values)
            .finish()
    }
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if layout.len() != values.len() {
            return Err(Error::LayoutMismatch {
                expected: layout.len(),
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter vector at index {i}")));
        }
        Ok(Self { values, layout })
    }

    /// Vector with a single flat segment. Handy for tests and 1-D examples.
    pub fn from_flat(values: Vec<f64>) -> Result<Self> {
        let layout = Arc::new(Layout::flat(values.len()));
        Self::new(values, layout)
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    /// Same layout, new values. Values must be finite.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, Arc::clone(&self.layout))
    }

    // Arithmetic results of finite inputs; callers that can overflow must
    // check `is_finite` themselves.
    pub(crate) fn from_raw(values: Vec<f64>, layout: Arc<Layout>) -> Self {
        debug_assert_eq!(values.len(), layout.len());
        Self { values, layout }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// Values of the segment at `index`.
    pub fn segment(&self, index: usize) -> &[f64] {
        let start = self.layout.offset(index);
        let size = self.layout.segments()[index].size();
        &self.values[start..start + size]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn ensure_compatible(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch {
                expected: self.len(),
                found: other.len(),
            })
        }
    }

    fn zip_with(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> Result<ParamVector> {
        self.ensure_compatible(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_raw(values, Arc::clone(&self.layout)))
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_with(other, |a, b| a - b)
    }

    /// `self + alpha * other`
    pub fn axpy(&self, alpha: f64, other: &ParamVector) -> Result<ParamVector> {
        self.zip_with(other, |a, b| a + alpha * b)
    }

    pub fn scale(&self, alpha: f64) -> ParamVector {
        self.map(|v| alpha * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamVector {
        Self::from_raw(
            self.values.iter().map(|&v| f(v)).collect(),
            Arc::clone(&self.layout),
        )
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.ensure_compatible(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dist_sq(&self, other: &ParamVector) -> Result<f64> {
        self.ensure_compatible(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    pub fn dist(&self, other: &ParamVector) -> Result<f64> {
        Ok(self.dist_sq(other)?.sqrt())
    }
}
