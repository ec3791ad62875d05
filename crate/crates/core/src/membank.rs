//! Per-modality history of the last τ feature maps.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::streams::{FeatureMap, Modality, Source};

/// Default history length.
pub const DEFAULT_TAU: usize = 6;

#[derive(Clone, Debug)]
pub struct MemoryBank {
    modality: Modality,
    capacity: usize,
    entries: VecDeque<FeatureMap>,
}

impl MemoryBank {
    pub fn new(modality: Modality, capacity: usize) -> Self {
        assert!(capacity >= 1, "memory bank capacity must be positive");
        Self {
            modality,
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &FeatureMap> {
        self.entries.iter()
    }

    pub fn newest(&self) -> Option<&FeatureMap> {
        self.entries.back()
    }

    /// Appends a feature, evicting the oldest entry beyond capacity.
    /// Time indexes must be consecutive.
    pub fn push(&mut self, feature: FeatureMap) -> Result<()> {
        if feature.modality != self.modality {
            return Err(Error::contract(format!(
                "{} feature pushed into {} bank",
                feature.modality, self.modality
            )));
        }
        if let Some(newest) = self.entries.back() {
            if feature.time_index != newest.time_index + 1 {
                return Err(Error::contract(format!(
                    "non-consecutive push into {} bank: t={} after t={}",
                    self.modality, feature.time_index, newest.time_index
                )));
            }
        }
        self.entries.push_back(feature);
        if self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// The τ-long history window, oldest first. While the bank is not yet
    /// full, the oldest entry is repeated at the front.
    pub fn window(&self) -> Result<Vec<&FeatureMap>> {
        let oldest = self
            .entries
            .front()
            .ok_or_else(|| Error::contract(format!("window of empty {} bank", self.modality)))?;
        let pad = self.capacity - self.entries.len();
        Ok(std::iter::repeat_n(oldest, pad).chain(self.entries.iter()).collect())
    }

    /// Stores the extracted feature when the modality is available, otherwise
    /// the compensated one. Supplying the wrong kind is an error.
    pub fn update(
        &mut self,
        available: bool,
        extracted: Option<FeatureMap>,
        compensated: Option<FeatureMap>,
    ) -> Result<()> {
        match (available, extracted, compensated) {
            (true, Some(f), None) => self.push(f.with_source(Source::Extracted)),
            (false, None, Some(f)) => self.push(f.with_source(Source::Compensated)),
            (available, e, c) => Err(Error::contract(format!(
                "{} bank update with available={available} expects only the {} feature, got extracted={} compensated={}",
                self.modality,
                if available { "extracted" } else { "compensated" },
                e.is_some(),
                c.is_some()
            ))),
        }
    }

    /// Checks the continuity invariant: consecutive time indexes ending at `t`.
    pub fn is_continuous_up_to(&self, t: usize) -> bool {
        let n = self.entries.len();
        n == self.capacity.min(t + 1)
            && self
                .entries
                .iter()
                .enumerate()
                .all(|(i, e)| e.time_index + (n - 1 - i) == t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fm(t: usize) -> FeatureMap {
        FeatureMap::zeros(Modality::Img, t, [1, 2, 2], Source::Extracted)
    }

    fn times(bank: &MemoryBank) -> Vec<usize> {
        bank.entries().map(|e| e.time_index).collect()
    }

    #[test]
    fn ring_eviction() {
        let mut b = MemoryBank::new(Modality::Img, 3);
        for t in 0..=3 {
            b.push(fm(t)).unwrap();
        }
        assert_eq!(times(&b), vec![1, 2, 3]);
    }

    #[test]
    fn single_push() {
        let mut b = MemoryBank::new(Modality::Img, 3);
        b.push(fm(0)).unwrap();
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn gap_is_rejected() {
        let mut b = MemoryBank::new(Modality::Img, 6);
        for t in 0..=3 {
            b.push(fm(t)).unwrap();
        }
        assert!(b.push(fm(5)).is_err());
        let mut pts = fm(4);
        pts.modality = Modality::Pts;
        assert!(b.push(pts).is_err());
    }

    #[test]
    fn window_padding() {
        let mut b = MemoryBank::new(Modality::Img, 6);
        assert!(b.window().is_err());
        b.push(fm(0)).unwrap();
        let w: Vec<_> = b.window().unwrap().iter().map(|e| e.time_index).collect();
        assert_eq!(w, vec![0; 6]);
        for t in 1..4 {
            b.push(fm(t)).unwrap();
        }
        let w: Vec<_> = b.window().unwrap().iter().map(|e| e.time_index).collect();
        assert_eq!(w, vec![0, 0, 0, 1, 2, 3]);
        for t in 4..9 {
            b.push(fm(t)).unwrap();
        }
        let w: Vec<_> = b.window().unwrap().iter().map(|e| e.time_index).collect();
        assert_eq!(w, vec![3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn update_tags_source() {
        let mut b = MemoryBank::new(Modality::Img, 6);
        b.update(true, Some(fm(0)), None).unwrap();
        assert_eq!(b.newest().unwrap().source, Source::Extracted);
        b.update(false, None, Some(fm(1))).unwrap();
        assert_eq!(b.newest().unwrap().source, Source::Compensated);
        assert!(b.update(true, None, Some(fm(2))).is_err());
        assert!(b.update(false, Some(fm(2)), None).is_err());
        assert!(b.update(true, Some(fm(2)), Some(fm(2))).is_err());
    }

    #[test]
    fn alternating_availability_keeps_continuity() {
        let mut b = MemoryBank::new(Modality::Img, 6);
        for t in 0..10 {
            let available = t % 2 == 0;
            if available {
                b.update(true, Some(fm(t)), None).unwrap();
            } else {
                b.update(false, None, Some(fm(t))).unwrap();
            }
            assert!(b.is_continuous_up_to(t));
        }
        let sources: Vec<_> = b.entries().map(|e| e.source).collect();
        assert_eq!(times(&b), vec![4, 5, 6, 7, 8, 9]);
        assert!(sources.contains(&Source::Extracted) && sources.contains(&Source::Compensated));
        for e in b.entries() {
            let expect = if e.time_index % 2 == 0 { Source::Extracted } else { Source::Compensated };
            assert_eq!(e.source, expect);
        }
    }

    proptest! {
        #[test]
        fn continuity_for_any_schedule(avail in prop::collection::vec(any::<bool>(), 1..40), tau in 1usize..8) {
            let mut b = MemoryBank::new(Modality::Img, tau);
            for (t, &a) in avail.iter().enumerate() {
                if a {
                    b.update(true, Some(fm(t)), None).unwrap();
                } else {
                    b.update(false, None, Some(fm(t))).unwrap();
                }
                prop_assert!(b.is_continuous_up_to(t));
            }
            prop_assert_eq!(b.len(), avail.len().min(tau));
        }
    }
}
