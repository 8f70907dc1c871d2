//! Flat parameter vector with named, disjoint slices.

use std::ops::Range;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl ParamSlice {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// All trainable values of one model. Slices are allocated back to back, so
/// they are disjoint and cover `[0, len)` by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    values: Vec<f64>,
    slices: Vec<ParamSlice>,
    rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        Self { values: Vec::new(), slices: Vec::new(), rng_seed }
    }

    /// Appends a zero-filled slice and returns its offset.
    pub fn alloc(&mut self, name: impl Into<String>, len: usize) -> usize {
        let offset = self.values.len();
        self.values.resize(offset + len, 0.0);
        self.slices.push(ParamSlice { name: name.into(), offset, len });
        offset
    }

    /// Rebuilds a store from raw parts, checking the slice layout.
    pub fn from_parts(values: Vec<f64>, slices: Vec<ParamSlice>, rng_seed: u64) -> Result<Self> {
        let mut cursor = 0;
        for s in &slices {
            if s.offset != cursor {
                return Err(Error::Format(format!(
                    "slice '{}' starts at {} but previous slices end at {}",
                    s.name, s.offset, cursor
                )));
            }
            cursor += s.len;
        }
        if cursor != values.len() {
            return Err(Error::Format(format!("slices cover {cursor} values, payload has {}", values.len())));
        }
        Ok(Self { values, slices, rng_seed })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn slices(&self) -> &[ParamSlice] {
        &self.slices
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn slice(&self, name: &str) -> Option<&ParamSlice> {
        self.slices.iter().find(|s| s.name == name)
    }

    pub fn slice_values(&self, name: &str) -> Option<&[f64]> {
        self.slice(name).map(|s| &self.values[s.range()])
    }

    pub fn slice_values_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.slice(name)?.range();
        Some(&mut self.values[r])
    }

    /// Name of the slice that owns flat index `i`.
    pub fn owner_of(&self, i: usize) -> Option<&str> {
        self.slices.iter().find(|s| s.range().contains(&i)).map(|s| s.name.as_str())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self ← (1 − tau)·self + tau·source`, the polyak average used by target networks.
    pub fn polyak_from(&mut self, source: &ParamStore, tau: f64) -> Result<()> {
        if source.len() != self.len() {
            return Err(Error::Shape(format!("polyak: {} vs {} parameters", self.len(), source.len())));
        }
        for (t, s) in self.values.iter_mut().zip(&source.values) {
            *t = (1.0 - tau) * *t + tau * s;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_are_contiguous_and_cover_store() {
        let mut p = ParamStore::new(7);
        let a = p.alloc("a", 3);
        let b = p.alloc("b", 0);
        let c = p.alloc("c", 2);
        assert_eq!((a, b, c), (0, 3, 3));
        assert_eq!(p.len(), 5);
        let covered: usize = p.slices().iter().map(|s| s.len).sum();
        assert_eq!(covered, p.len());
        assert_eq!(p.owner_of(4), Some("c"));
    }

    #[test]
    fn from_parts_rejects_gaps() {
        let slices = vec![
            ParamSlice { name: "a".into(), offset: 0, len: 2 },
            ParamSlice { name: "b".into(), offset: 3, len: 1 },
        ];
        assert!(ParamStore::from_parts(vec![0.0; 4], slices, 0).is_err());
    }

    #[test]
    fn polyak_identity() {
        let mut target = ParamStore::new(0);
        target.alloc("w", 2);
        target.values_mut().copy_from_slice(&[1.0, -1.0]);
        let mut online = target.clone();
        online.values_mut().copy_from_slice(&[3.0, 5.0]);
        target.polyak_from(&online, 0.25).unwrap();
        assert_eq!(target.values(), &[0.75 * 1.0 + 0.25 * 3.0, 0.75 * -1.0 + 0.25 * 5.0]);
    }
}
