//! Flat parameter storage with a layer partition overlay.
//!
//! Parameters live in one contiguous buffer. A [`LayerPartition`] assigns
//! every index to exactly one segment: either an always-active range
//! (embedding/head analogue, never dropped) or one of `N` sparsifiable
//! layers. Optimizers iterate the buffer in *canonical order*: always-active
//! ranges first, then layers by ascending index, elements by ascending offset.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::real::Real;

/// A contiguous index range `[offset, offset + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Segment {
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(offset: usize, len: usize) -> Self {
        Self { offset, len }
    }

    pub fn end(&self) -> usize {
        self.offset + self.len
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.end()
    }
}

/// Which part of the partition an index belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    AlwaysActive(usize),
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPartition {
    layers: Vec<Segment>,
    always_active: Vec<Segment>,
    total_len: usize,
}

impl LayerPartition {
    /// Contiguous layout: the always-active range first, then layers in the
    /// given order.
    pub fn build(layer_sizes: &[usize], always_active_size: usize) -> Result<Self> {
        if let Some(i) = layer_sizes.iter().position(|&s| s == 0) {
            return Err(Error::Argument(format!("layer {i} has size 0")));
        }
        let mut offset = 0usize;
        let mut always_active = Vec::new();
        if always_active_size > 0 {
            always_active.push(Segment::new(0, always_active_size));
            offset = always_active_size;
        }
        let mut layers = Vec::with_capacity(layer_sizes.len());
        for &size in layer_sizes {
            layers.push(Segment::new(offset, size));
            offset = offset
                .checked_add(size)
                .ok_or_else(|| Error::Size("total parameter count overflows".into()))?;
        }
        // Addressable as a byte buffer of f64s.
        if offset > isize::MAX as usize / 8 {
            return Err(Error::Size(format!(
                "{offset} parameters exceed the addressable range"
            )));
        }
        Ok(Self {
            layers,
            always_active,
            total_len: offset,
        })
    }

    /// General constructor; validates that the segments tile `[0, total_len)`
    /// without overlap and that layers are ordered by offset.
    pub fn from_segments(
        layers: Vec<Segment>,
        always_active: Vec<Segment>,
        total_len: usize,
    ) -> Result<Self> {
        if layers.iter().any(|s| s.len == 0) || always_active.iter().any(|s| s.len == 0) {
            return Err(Error::Argument("empty segment in partition".into()));
        }
        if layers.windows(2).any(|w| w[0].offset >= w[1].offset) {
            return Err(Error::Argument("layers must be ordered by offset".into()));
        }
        let mut all: Vec<Segment> = layers.iter().chain(&always_active).copied().collect();
        all.sort_by_key(|s| s.offset);
        let mut cursor = 0usize;
        for s in &all {
            if s.offset != cursor {
                return Err(Error::Argument(format!(
                    "segments do not tile the index space at {cursor}"
                )));
            }
            cursor = s
                .offset
                .checked_add(s.len)
                .ok_or_else(|| Error::Size("segment end overflows".into()))?;
        }
        if cursor != total_len {
            return Err(Error::Argument(format!(
                "segments cover {cursor} indices, expected {total_len}"
            )));
        }
        Ok(Self {
            layers,
            always_active,
            total_len,
        })
    }

    pub fn layers(&self) -> &[Segment] {
        &self.layers
    }

    pub fn always_active(&self) -> &[Segment] {
        &self.always_active
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn always_active_len(&self) -> usize {
        self.always_active.iter().map(|s| s.len).sum()
    }

    /// Number of elements perturbed when `dropped` layers are skipped.
    pub fn active_len(&self, dropped: &LayerSet) -> usize {
        self.active_segments(dropped).map(|r| r.len()).sum()
    }

    /// Fraction of parameters active under `dropped` (the keep fraction ρ).
    pub fn keep_fraction(&self, dropped: &LayerSet) -> f64 {
        if self.total_len == 0 {
            return 0.0;
        }
        self.active_len(dropped) as f64 / self.total_len as f64
    }

    /// Active ranges in canonical order. Never allocates.
    pub fn active_segments<'a>(
        &'a self,
        dropped: &'a LayerSet,
    ) -> impl Iterator<Item = Range<usize>> + 'a {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .filter(move |(i, _)| !dropped.contains(*i))
            .map(|(_, s)| s.range());
        self.always_active.iter().map(Segment::range).chain(layers)
    }

    pub fn owner(&self, index: usize) -> Option<Owner> {
        if let Some(i) = self
            .always_active
            .iter()
            .position(|s| s.range().contains(&index))
        {
            return Some(Owner::AlwaysActive(i));
        }
        // Layers are sorted by offset.
        let i = self.layers.partition_point(|s| s.end() <= index);
        match self.layers.get(i) {
            Some(s) if s.range().contains(&index) => Some(Owner::Layer(i)),
            _ => None,
        }
    }

    pub fn check_dropped(&self, dropped: &LayerSet) -> Result<()> {
        match dropped.as_slice().last() {
            Some(&max) if max >= self.num_layers() => Err(Error::Argument(format!(
                "dropped layer {max} out of range for {} layers",
                self.num_layers()
            ))),
            _ => Ok(()),
        }
    }
}

/// Free-function form of [`LayerPartition::build`].
pub fn build_partition(layer_sizes: &[usize], always_active_size: usize) -> Result<LayerPartition> {
    LayerPartition::build(layer_sizes, always_active_size)
}

/// A sorted set of distinct layer indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct LayerSet(Vec<usize>);

impl LayerSet {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn all(num_layers: usize) -> Self {
        Self((0..num_layers).collect())
    }

    pub fn from_indices(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self(indices)
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.0.binary_search(&layer).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }
}

impl FromIterator<usize> for LayerSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self::from_indices(iter.into_iter().collect())
    }
}

/// The single mutable state of an optimization run.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector<T: Real = f64> {
    values: Vec<T>,
    partition: LayerPartition,
}

impl<T: Real> ParameterVector<T> {
    pub fn new(values: Vec<T>, partition: LayerPartition) -> Result<Self> {
        if values.len() != partition.total_len() {
            return Err(Error::Size(format!(
                "{} values for a partition of {} parameters",
                values.len(),
                partition.total_len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {i} is not finite")));
        }
        Ok(Self { values, partition })
    }

    pub fn zeros(partition: LayerPartition) -> Self {
        Self {
            values: vec![T::zero(); partition.total_len()],
            partition,
        }
    }

    pub fn partition(&self) -> &LayerPartition {
        &self.partition
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Direct mutable access. Callers own the finiteness invariant.
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// Values and partition borrowed together.
    pub fn split_mut(&mut self) -> (&mut [T], &LayerPartition) {
        (&mut self.values, &self.partition)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Value-equal copy for tests and checkpoints. Never called inside a step.
    pub fn snapshot(&self) -> Vec<T> {
        self.values.clone()
    }

    /// Overwrite values from a same-length slice.
    pub fn copy_from(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Size(format!(
                "{} values for {} parameters",
                values.len(),
                self.values.len()
            )));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }
}

pub fn snapshot<T: Real>(pv: &ParameterVector<T>) -> Vec<T> {
    pv.snapshot()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_puts_always_active_first() {
        let p = build_partition(&[4, 4], 2).unwrap();
        assert_eq!(p.always_active(), &[Segment::new(0, 2)]);
        assert_eq!(p.layers(), &[Segment::new(2, 4), Segment::new(6, 4)]);
        assert_eq!(p.total_len(), 10);
    }

    #[test]
    fn no_sparsifiable_layers() {
        let p = build_partition(&[], 5).unwrap();
        assert_eq!(p.num_layers(), 0);
        assert_eq!(p.total_len(), 5);
    }

    #[test]
    fn all_parameters_sparsifiable() {
        let p = build_partition(&[3], 0).unwrap();
        assert!(p.always_active().is_empty());
        assert_eq!(p.layers(), &[Segment::new(0, 3)]);
    }

    #[test]
    fn overflow_is_a_size_error() {
        let err = build_partition(&[usize::MAX, 2], 1).unwrap_err();
        assert!(matches!(err, Error::Size(_)));
        let err = build_partition(&[usize::MAX / 4], 0).unwrap_err();
        assert!(matches!(err, Error::Size(_)));
    }

    #[test]
    fn zero_sized_layer_rejected() {
        assert!(matches!(
            build_partition(&[2, 0], 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn from_segments_rejects_gaps_and_overlaps() {
        let gap =
            LayerPartition::from_segments(vec![Segment::new(3, 2)], vec![Segment::new(0, 2)], 5);
        assert!(gap.is_err());
        let overlap =
            LayerPartition::from_segments(vec![Segment::new(1, 4)], vec![Segment::new(0, 2)], 5);
        assert!(overlap.is_err());
        let ok = LayerPartition::from_segments(
            vec![Segment::new(0, 2), Segment::new(4, 1)],
            vec![Segment::new(2, 2)],
            5,
        )
        .unwrap();
        assert_eq!(ok.owner(3), Some(Owner::AlwaysActive(0)));
        assert_eq!(ok.owner(4), Some(Owner::Layer(1)));
    }

    #[test]
    fn active_segments_follow_canonical_order() {
        let p = build_partition(&[2, 3, 4], 1).unwrap();
        let dropped = LayerSet::from_indices(vec![1]);
        let ranges: Vec<_> = p.active_segments(&dropped).collect();
        assert_eq!(ranges, vec![0..1, 1..3, 6..10]);
        assert_eq!(p.active_len(&dropped), 7);
        assert!(p.check_dropped(&LayerSet::from_indices(vec![3])).is_err());
    }

    #[test]
    fn snapshot_is_an_isolated_copy() {
        let p = build_partition(&[2], 0).unwrap();
        let pv = ParameterVector::new(vec![1.0, 2.0], p).unwrap();
        let mut copy = snapshot(&pv);
        assert_eq!(copy, vec![1.0, 2.0]);
        copy[0] = 7.0;
        assert_eq!(pv.values(), &[1.0, 2.0]);
        let again = ParameterVector::new(pv.snapshot(), pv.partition().clone()).unwrap();
        assert_eq!(again.snapshot(), pv.snapshot());
    }

    #[test]
    fn rejects_non_finite_and_wrong_length() {
        let p = build_partition(&[2], 0).unwrap();
        assert!(ParameterVector::new(vec![1.0, f64::NAN], p.clone()).is_err());
        assert!(ParameterVector::new(vec![1.0], p).is_err());
    }

    #[test]
    fn exhaustive_coverage_small() {
        let p = build_partition(&[7, 1, 300, 12], 45).unwrap();
        for i in 0..p.total_len() {
            let hits = p
                .always_active()
                .iter()
                .filter(|s| s.range().contains(&i))
                .count()
                + p.layers().iter().filter(|s| s.range().contains(&i)).count();
            assert_eq!(hits, 1, "index {i}");
            assert!(p.owner(i).is_some());
        }
        assert_eq!(p.owner(p.total_len()), None);
    }

    proptest! {
        #[test]
        fn partition_tiles_index_space(
            sizes in proptest::collection::vec(1usize..400, 0..12),
            always in 0usize..300,
        ) {
            let p = build_partition(&sizes, always).unwrap();
            prop_assert_eq!(p.total_len(), sizes.iter().sum::<usize>() + always);
            prop_assume!(p.total_len() > 0);
            // Every index has exactly one owner; checked exhaustively (d ≤ 10^4).
            let mut seen = vec![0u8; p.total_len()];
            for s in p.layers().iter().chain(p.always_active()) {
                for i in s.range() {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            prop_assert!(p.layers().windows(2).all(|w| w[0].offset < w[1].offset));
        }
    }
}
