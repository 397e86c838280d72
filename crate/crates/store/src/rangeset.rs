use std::collections::BTreeMap;

/// Set of `u64` stored as disjoint, non-adjacent inclusive ranges.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RangeSet {
    ranges: BTreeMap<u64, u64>,
    len: u64,
}

impl RangeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, value: u64) -> bool {
        self.ranges.range(..=value).next_back().is_some_and(|(_, &hi)| value <= hi)
    }

    /// Inserts `lo..=hi`; the caller guarantees none of it is present yet.
    pub fn insert_disjoint(&mut self, lo: u64, hi: u64) {
        debug_assert!(lo <= hi);
        self.len += hi - lo + 1;
        let mut lo = lo;
        let mut hi = hi;
        if let Some((&plo, &phi)) = self.ranges.range(..lo).next_back() {
            if phi.checked_add(1) == Some(lo) {
                self.ranges.remove(&plo);
                lo = plo;
            }
        }
        if let Some(next) = hi.checked_add(1) {
            if let Some(nhi) = self.ranges.remove(&next) {
                hi = nhi;
            }
        }
        self.ranges.insert(lo, hi);
    }

    pub fn ranges(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.ranges.iter().map(|(&a, &b)| (a, b))
    }
}
