//! The multi-channel signal container used everywhere in the crate.

use ndarray::{Array2, ArrayView1, ArrayViewMut1, Axis};

use crate::error::{Error, Result};

/// A `C × T` real-valued multi-channel sequence, stored channel-major.
///
/// Construction through [`ChannelSeries::new`] or [`ChannelSeries::from_rows`]
/// rejects empty shapes and non-finite entries. Arithmetic helpers assume
/// shapes have already been checked by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSeries(Array2<f64>);

impl ChannelSeries {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (c, t) = data.dim();
        if c == 0 || t == 0 {
            return Err(Error::Shape(format!("empty series ({c} x {t})")));
        }
        if let Some(((channel, step), _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { channel, step });
        }
        Ok(Self(data))
    }

    /// Builds a series from one `Vec` per channel; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.len();
        let t = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::Shape("ragged channel rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((c, t), flat).map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(data)
    }

    pub fn zeros(channels: usize, len: usize) -> Self {
        Self(Array2::zeros((channels, len)))
    }

    pub fn constant(channels: usize, len: usize, value: f64) -> Self {
        Self(Array2::from_elem((channels, len), value))
    }

    /// Wraps an array produced internally from finite inputs, skipping validation.
    pub(crate) fn from_array_unchecked(data: Array2<f64>) -> Self {
        debug_assert!(data.nrows() > 0 && data.ncols() > 0);
        Self(data)
    }

    pub fn channels(&self) -> usize {
        self.0.nrows()
    }

    pub fn len(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn channel(&self, c: usize) -> ArrayView1<'_, f64> {
        self.0.row(c)
    }

    pub fn channel_mut(&mut self, c: usize) -> ArrayViewMut1<'_, f64> {
        self.0.row_mut(c)
    }

    pub fn rows(&self) -> impl Iterator<Item = ArrayView1<'_, f64>> {
        self.0.axis_iter(Axis(0))
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub(crate) fn as_array_mut(&mut self) -> &mut Array2<f64> {
        &mut self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(|r| r.to_vec()).collect()
    }

    pub fn get(&self, c: usize, t: usize) -> f64 {
        self.0[[c, t]]
    }

    pub fn set(&mut self, c: usize, t: usize, v: f64) {
        self.0[[c, t]] = v;
    }

    pub fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// `self - other`; shapes must match.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(Self(&self.0 - &other.0))
    }

    /// `self + other`; shapes must match.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(Self(&self.0 + &other.0))
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self(&self.0 * alpha)
    }

    /// `self += alpha * other` without shape checks beyond ndarray's own.
    pub(crate) fn axpy(&mut self, alpha: f64, other: &Self) {
        self.0.scaled_add(alpha, &other.0);
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.0.iter()
    }

    /// Columns `start..end` (time steps) as a new series.
    pub fn slice_steps(&self, start: usize, end: usize) -> Self {
        Self(self.0.slice(ndarray::s![.., start..end]).to_owned())
    }
}
