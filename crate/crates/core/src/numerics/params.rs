use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{Matrix, Real};
use crate::error::{Error, Result};

/// One named tensor inside a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat view over a set of named matrices.
///
/// Offsets are contiguous in insertion order and cover the whole vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<T> {
    values: Vec<T>,
    layout: Vec<ParamSlot>,
}

impl<T: Real> Default for ParamVector<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamVector<T> {
    pub fn new() -> Self {
        Self { values: Vec::new(), layout: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, m: &Matrix<T>) {
        self.layout.push(ParamSlot {
            name: name.into(),
            rows: m.rows(),
            cols: m.cols(),
            offset: self.values.len(),
        });
        self.values.extend_from_slice(m.data());
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn layout(&self) -> &[ParamSlot] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.layout.iter().find(|s| s.name == name)
    }

    /// Copies the named tensor out as a matrix.
    pub fn matrix(&self, name: &str) -> Result<Matrix<T>> {
        let slot = self
            .slot(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))?;
        Matrix::new(slot.rows, slot.cols, self.values[slot.offset..slot.offset + slot.len()].to_vec())
    }

    /// Name of the tensor containing flat coordinate `i`.
    pub fn name_of(&self, i: usize) -> Option<&str> {
        self.layout
            .iter()
            .find(|s| i >= s.offset && i < s.offset + s.len())
            .map(|s| s.name.as_str())
    }

    pub fn cast<U: Real>(&self) -> ParamVector<U> {
        ParamVector {
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Checks that offsets are contiguous and cover the vector exactly.
    pub fn layout_is_contiguous(&self) -> bool {
        let mut next = 0;
        for s in &self.layout {
            if s.offset != next {
                return false;
            }
            next += s.len();
        }
        next == self.values.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_covers_vector() {
        let mut p = ParamVector::<f64>::new();
        p.push("a", &Matrix::zeros(2, 3));
        p.push("b", &Matrix::filled(1, 4, 2.0));
        assert!(p.layout_is_contiguous());
        assert_eq!(p.len(), 10);
        assert_eq!(p.slot("b").unwrap().offset, 6);
        assert_eq!(p.matrix("b").unwrap(), Matrix::filled(1, 4, 2.0));
        assert_eq!(p.name_of(7), Some("b"));
        assert!(p.matrix("c").is_err());
    }
}
