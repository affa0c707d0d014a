// SPDX-License-Identifier: Apache-2.0

use rand::Rng;
use rand_core::RngCore;

use crate::block_store::NULL_ADDR;
use crate::error::{Error, Result};

/// Position of an address inside the N-FBM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NfbmCoord {
    pub row: u32,
    pub col: u32,
}

impl NfbmCoord {
    pub const NULL: NfbmCoord = NfbmCoord {
        row: u32::MAX,
        col: u32::MAX,
    };

    pub fn is_null(&self) -> bool {
        *self == Self::NULL
    }
}

/// Occupied-block matrix with a one-bit-per-slot free map. A set bit means the slot is free.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Nfbm {
    rows: usize,
    cols: usize,
    slots: Vec<u64>,
    free: Vec<u64>,
    occupied: usize,
}

impl Nfbm {
    pub fn new_empty(rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        let mut free = vec![u64::MAX; n.div_ceil(64)];
        if !n.is_multiple_of(64) {
            *free.last_mut().unwrap() = (1u64 << (n % 64)) - 1;
        }
        Nfbm {
            rows,
            cols,
            slots: vec![NULL_ADDR; n],
            free,
            occupied: 0,
        }
    }

    /// Builds a matrix from slot contents and a free-bit predicate.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        slots: Vec<u64>,
        is_free: impl Fn(usize) -> bool,
    ) -> Result<Self> {
        if slots.len() != rows * cols {
            return Err(Error::Corrupt("occupied-block matrix dimensions".into()));
        }
        let mut m = Nfbm::new_empty(rows, cols);
        m.slots = slots;
        for s in 0..rows * cols {
            if !is_free(s) {
                m.free[s / 64] &= !(1 << (s % 64));
                m.occupied += 1;
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn slot_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied
    }

    pub fn coord(&self, slot: usize) -> NfbmCoord {
        NfbmCoord {
            row: (slot / self.cols) as u32,
            col: (slot % self.cols) as u32,
        }
    }

    pub fn slot_of(&self, coord: NfbmCoord) -> usize {
        coord.row as usize * self.cols + coord.col as usize
    }

    pub fn is_free(&self, slot: usize) -> bool {
        self.free[slot / 64] & (1 << (slot % 64)) != 0
    }

    /// Address stored at a slot; meaningful only while the slot is occupied.
    pub fn addr_at(&self, slot: usize) -> u64 {
        self.slots[slot]
    }

    pub fn column(&self, col: usize) -> Vec<u64> {
        (0..self.rows)
            .map(|r| self.slots[r * self.cols + col])
            .collect()
    }

    pub fn set_column(&mut self, col: usize, values: &[u64]) {
        for (r, &v) in values.iter().enumerate() {
            self.slots[r * self.cols + col] = v;
        }
    }

    /// Raw free-bit words, least significant bit first.
    pub fn free_words(&self) -> &[u64] {
        &self.free
    }

    /// Uniformly random slot.
    pub fn probe(&self, rng: &mut dyn RngCore) -> usize {
        rng.gen_range(0..self.slot_count())
    }

    /// Single-probe insert: `Some(slot)` when the probed slot was free, `None` otherwise.
    pub fn try_add(&mut self, address: u64, rng: &mut dyn RngCore) -> (usize, Option<NfbmCoord>) {
        let slot = self.probe(rng);
        if self.is_free(slot) {
            self.add_at(slot, address);
            (slot, Some(self.coord(slot)))
        } else {
            (slot, None)
        }
    }

    /// Stores `address` in a free slot.
    pub fn add_at(&mut self, slot: usize, address: u64) {
        assert!(self.is_free(slot), "slot {slot} already occupied");
        self.slots[slot] = address;
        self.free[slot / 64] &= !(1 << (slot % 64));
        self.occupied += 1;
    }

    /// Sets the free bit of an occupied slot. The stale address stays in place.
    pub fn mark_free(&mut self, slot: usize) -> Result<()> {
        if slot >= self.slot_count() || self.is_free(slot) {
            return Err(Error::InvalidArgument(format!(
                "slot {slot} is not occupied"
            )));
        }
        self.free[slot / 64] |= 1 << (slot % 64);
        self.occupied -= 1;
        Ok(())
    }

    /// `k` distinct occupied slots, uniformly.
    pub fn sample_occupied(&self, k: usize, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
        if self.occupied < k {
            return Err(Error::InvalidArgument(format!(
                "{} occupied slots, {k} requested",
                self.occupied
            )));
        }
        if self.occupied * 8 < self.slot_count() {
            let all: Vec<usize> = self.occupied_slots().collect();
            return Ok(rand::seq::index::sample(rng, all.len(), k)
                .into_iter()
                .map(|i| all[i])
                .collect());
        }
        let mut picked = Vec::with_capacity(k);
        while picked.len() < k {
            let s = self.probe(rng);
            if !self.is_free(s) && !picked.contains(&s) {
                picked.push(s);
            }
        }
        Ok(picked)
    }

    pub fn occupied_slots(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.slot_count()).filter(move |&s| !self.is_free(s))
    }

    /// Test hook: flip a free bit without bookkeeping.
    #[doc(hidden)]
    pub fn corrupt_bit(&mut self, slot: usize) {
        self.free[slot / 64] ^= 1 << (slot % 64);
    }
}
