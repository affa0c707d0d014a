// SPDX-License-Identifier: Apache-2.0

use rand::seq::index;
use rand::seq::SliceRandom;
use rand_core::RngCore;

use crate::block_store::NULL_ADDR;
use crate::error::{Error, Result};

/// Where a selected FBM entry lives. Follows the entry if compaction moves it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectionReceipt {
    pub row: usize,
    pub col: usize,
    /// Row-major rank among valid entries at selection time.
    pub index: u64,
    pub address: u64,
}

/// A compaction step: the donor entry was copied over the victim slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DonorMove {
    pub donor: (usize, usize),
    pub victim: (usize, usize),
}

impl SelectionReceipt {
    /// Re-points the receipt when its entry was the donor of `mv`.
    pub fn follow(&mut self, mv: &DonorMove) {
        if (self.row, self.col) == mv.donor {
            self.row = mv.victim.0;
            self.col = mv.victim.1;
        }
    }
}

/// Coordinate of the `i`-th valid entry (0-based, row-major), given per-row valid counts.
///
/// Valid entries of a row occupy its last `counts[r]` columns.
pub fn locate_valid(counts: &[u32], cols: usize, i: u64) -> Option<(usize, usize)> {
    let mut prefix = 0u64;
    for (r, &c) in counts.iter().enumerate() {
        let c = c as u64;
        if i < prefix + c {
            return Some((r, cols - c as usize + (i - prefix) as usize));
        }
        prefix += c;
    }
    None
}

/// Coordinate of the first valid entry in row-major order.
pub fn first_valid(counts: &[u32], cols: usize) -> Option<(usize, usize)> {
    locate_valid(counts, cols, 0)
}

/// Free-block matrix: `rows x cols` addresses plus one valid-entry counter per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fbm {
    rows: usize,
    cols: usize,
    slots: Vec<u64>,
    counts: Vec<u32>,
}

impl Fbm {
    /// Matrix holding every address in `0..n` exactly once, in the last `n` row-major slots,
    /// randomly permuted.
    pub fn new_full(rows: usize, cols: usize, n: u64, rng: &mut dyn RngCore) -> Self {
        let capacity = rows * cols;
        assert!(n as usize <= capacity, "matrix too small for {n} addresses");
        let mut addrs: Vec<u64> = (0..n).collect();
        addrs.shuffle(rng);
        let lead = capacity - n as usize;
        let mut slots = vec![NULL_ADDR; lead];
        slots.extend(addrs);
        let mut counts = vec![0u32; rows];
        for (r, count) in counts.iter_mut().enumerate() {
            let row_start = r * cols;
            let invalid = lead.saturating_sub(row_start).min(cols);
            *count = (cols - invalid) as u32;
        }
        Fbm {
            rows,
            cols,
            slots,
            counts,
        }
    }

    /// Builds a matrix from explicit contents.
    pub fn from_parts(rows: usize, cols: usize, slots: Vec<u64>, counts: Vec<u32>) -> Result<Self> {
        if slots.len() != rows * cols || counts.len() != rows {
            return Err(Error::Corrupt("free-block matrix dimensions".into()));
        }
        if counts.iter().any(|&c| c as usize > cols) {
            return Err(Error::Corrupt(
                "free-block matrix counter exceeds row width".into(),
            ));
        }
        Ok(Fbm {
            rows,
            cols,
            slots,
            counts,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn slot(&self, row: usize, col: usize) -> u64 {
        self.slots[row * self.cols + col]
    }

    pub fn valid_count(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        col >= self.cols - self.counts[row] as usize
    }

    /// All valid addresses in row-major order.
    pub fn valid_entries(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.rows).flat_map(move |r| {
            let start = self.cols - self.counts[r] as usize;
            (start..self.cols).map(move |c| self.slot(r, c))
        })
    }

    /// Addresses stored in column `col`, top to bottom.
    pub fn column(&self, col: usize) -> Vec<u64> {
        (0..self.rows).map(|r| self.slot(r, col)).collect()
    }

    pub fn set_column(&mut self, col: usize, values: &[u64]) {
        for (r, &v) in values.iter().enumerate() {
            self.slots[r * self.cols + col] = v;
        }
    }

    /// Receipt for the `i`-th valid entry.
    pub fn select(&self, i: u64) -> Result<SelectionReceipt> {
        let (row, col) = locate_valid(&self.counts, self.cols, i).ok_or(Error::NoFreeBlocks)?;
        Ok(SelectionReceipt {
            row,
            col,
            index: i,
            address: self.slot(row, col),
        })
    }

    /// Uniformly random valid entry.
    pub fn select_random(&self, rng: &mut dyn RngCore) -> Result<SelectionReceipt> {
        let v = self.valid_count();
        if v == 0 {
            return Err(Error::NoFreeBlocks);
        }
        let i = crate::crypto::random_below(rng, v)?;
        self.select(i)
    }

    /// `k` distinct uniformly random valid entries.
    pub fn sample_distinct(
        &self,
        k: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<SelectionReceipt>> {
        let v = self.valid_count() as usize;
        if v < k {
            return Err(Error::NoFreeBlocks);
        }
        index::sample(rng, v, k)
            .into_iter()
            .map(|i| self.select(i as u64))
            .collect()
    }

    fn check(&self, r: &SelectionReceipt) -> Result<()> {
        if r.row >= self.rows
            || r.col >= self.cols
            || !self.is_valid(r.row, r.col)
            || self.slot(r.row, r.col) != r.address
        {
            return Err(Error::StaleReceipt(r.row * self.cols + r.col));
        }
        Ok(())
    }

    /// Removes the receipt's entry, keeping compactness by moving the first valid entry into its slot.
    /// Only the victim's column and the header change.
    pub fn invalidate_with_compaction(
        &mut self,
        r: &SelectionReceipt,
    ) -> Result<Option<DonorMove>> {
        self.check(r)?;
        let (dr, dc) = first_valid(&self.counts, self.cols).expect("receipt is valid");
        self.counts[dr] -= 1;
        if (dr, dc) == (r.row, r.col) {
            return Ok(None);
        }
        let donor = self.slot(dr, dc);
        self.slots[r.row * self.cols + r.col] = donor;
        Ok(Some(DonorMove {
            donor: (dr, dc),
            victim: (r.row, r.col),
        }))
    }

    /// Overwrites the receipt's entry with another free address. Counters are unchanged.
    pub fn replace_in_place(&mut self, r: &SelectionReceipt, address: u64) -> Result<()> {
        self.check(r)?;
        self.slots[r.row * self.cols + r.col] = address;
        Ok(())
    }

    /// Whether valid entries form a row-major suffix of the matrix.
    pub fn is_compact(&self) -> bool {
        let mut seen_valid = false;
        for r in 0..self.rows {
            let c = self.counts[r] as usize;
            if seen_valid && c != self.cols {
                return false;
            }
            if c > 0 {
                seen_valid = true;
            }
        }
        true
    }

    /// Test hook: overwrite a header counter.
    #[doc(hidden)]
    pub fn corrupt_counter(&mut self, row: usize, value: u32) {
        self.counts[row] = value;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::seeded_rng;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    // 3x3 layout: row 1 holds one valid entry in its last column, rows 2 and 3 are full.
    fn figure_three() -> Fbm {
        let x = NULL_ADDR;
        let slots = vec![x, x, 1, 2, 3, 4, 6, 8, 9];
        Fbm::from_parts(3, 3, slots, vec![1, 3, 3]).unwrap()
    }

    #[test]
    fn third_valid_entry_is_row_two_column_two() {
        let fbm = figure_three();
        // 1-based third entry, 1-based coordinates (2,2).
        let (r, c) = locate_valid(fbm.counts(), 3, 2).unwrap();
        assert_eq!((r + 1, c + 1), (2, 2));
        assert_eq!(fbm.select(2).unwrap().address, 3);
    }

    #[test]
    fn compaction_moves_first_valid_into_victim() {
        let x = NULL_ADDR;
        let slots = vec![x, 5, 6, 1, 2, 7, 3, 4, 8];
        let mut fbm = Fbm::from_parts(3, 3, slots, vec![2, 3, 3]).unwrap();
        let receipt = fbm.select(4).unwrap();
        assert_eq!(
            (receipt.row + 1, receipt.col + 1, receipt.address),
            (2, 3, 7)
        );
        let mv = fbm.invalidate_with_compaction(&receipt).unwrap().unwrap();
        assert_eq!((mv.donor.0 + 1, mv.donor.1 + 1), (1, 2));
        assert_eq!(fbm.slot(1, 2), 5);
        assert_eq!(fbm.counts(), &[1, 3, 3]);
        assert!(!fbm.is_valid(0, 1));
        assert!(fbm.is_compact());
        let live: BTreeSet<u64> = fbm.valid_entries().collect();
        assert_eq!(live, BTreeSet::from([1, 2, 3, 4, 5, 6, 8]));
    }

    #[test]
    fn invalidating_first_entry_only_decrements() {
        let mut fbm = figure_three();
        let receipt = fbm.select(0).unwrap();
        assert_eq!(fbm.invalidate_with_compaction(&receipt).unwrap(), None);
        assert_eq!(fbm.counts(), &[0, 3, 3]);
        assert!(matches!(
            fbm.invalidate_with_compaction(&receipt),
            Err(Error::StaleReceipt(_))
        ));
    }

    #[test]
    fn single_entry_always_selected() {
        let x = NULL_ADDR;
        let fbm = Fbm::from_parts(2, 2, vec![x, x, x, 42], vec![0, 1]).unwrap();
        for seed in 0..20 {
            assert_eq!(
                fbm.select_random(&mut seeded_rng(seed)).unwrap().address,
                42
            );
        }
        let empty = Fbm::from_parts(2, 2, vec![x; 4], vec![0, 0]).unwrap();
        assert!(matches!(
            empty.select_random(&mut seeded_rng(0)),
            Err(Error::NoFreeBlocks)
        ));
    }

    #[test]
    fn full_init_holds_every_address_once() {
        let fbm = Fbm::new_full(7, 5, 32, &mut seeded_rng(3));
        let live: Vec<u64> = fbm.valid_entries().collect();
        assert_eq!(live.len(), 32);
        assert_eq!(
            live.iter().copied().collect::<BTreeSet<_>>(),
            (0..32).collect()
        );
        assert_eq!(fbm.valid_count(), 32);
        assert!(fbm.is_compact());
        assert_eq!(fbm.counts(), &[2, 5, 5, 5, 5, 5, 5]);
    }

    #[test]
    fn replaced_address_is_reachable() {
        let mut fbm = Fbm::new_full(4, 4, 16, &mut seeded_rng(4));
        let r = fbm.select(7).unwrap();
        let header = fbm.counts().to_vec();
        fbm.replace_in_place(&r, 99).unwrap();
        assert_eq!(fbm.counts(), header.as_slice());
        assert!((0..16).any(|i| fbm.select(i).unwrap().address == 99));
    }

    proptest! {
        #[test]
        fn random_ops_keep_compactness(seed in any::<u64>(), ops in proptest::collection::vec(0u8..3, 1..300)) {
            let mut rng = seeded_rng(seed);
            let mut fbm = Fbm::new_full(9, 8, 70, &mut rng);
            let mut outside: Vec<u64> = Vec::new();
            for op in ops {
                if fbm.valid_count() == 0 {
                    break;
                }
                let r = fbm.select_random(&mut rng).unwrap();
                match op {
                    0 | 1 => {
                        fbm.invalidate_with_compaction(&r).unwrap();
                        outside.push(r.address);
                    }
                    _ => {
                        if let Some(a) = outside.pop() {
                            fbm.replace_in_place(&r, a).unwrap();
                            outside.push(r.address);
                        }
                    }
                }
                prop_assert!(fbm.is_compact());
                let live: Vec<u64> = fbm.valid_entries().collect();
                let set: BTreeSet<u64> = live.iter().copied().collect();
                prop_assert_eq!(set.len(), live.len());
                prop_assert_eq!(live.len() + outside.len(), 70);
            }
        }
    }
}
