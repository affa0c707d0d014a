// SPDX-License-Identifier: Apache-2.0

use crate::block_store::NULL_ADDR;
use crate::error::{Error, Result};

/// Public position map: public logical id to physical data block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ppm {
    entries: Vec<u64>,
    mapped: u64,
}

impl Ppm {
    pub fn new(capacity: u64) -> Self {
        Ppm {
            entries: vec![NULL_ADDR; capacity as usize],
            mapped: 0,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn mapped(&self) -> u64 {
        self.mapped
    }

    pub fn get(&self, id: u64) -> Option<u64> {
        match self.entries.get(id as usize) {
            Some(&a) if a != NULL_ADDR => Some(a),
            _ => None,
        }
    }

    pub fn set(&mut self, id: u64, addr: u64) {
        let e = &mut self.entries[id as usize];
        if *e == NULL_ADDR {
            self.mapped += 1;
        }
        *e = addr;
    }

    pub fn iter_mapped(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, a)| **a != NULL_ADDR)
            .map(|(i, a)| (i as u64, *a))
    }

    pub fn pages(&self, per_page: usize) -> usize {
        self.entries.len().div_ceil(per_page)
    }

    pub fn encode_page(&self, page: usize, per_page: usize, payload_len: usize) -> Vec<u8> {
        let mut out = vec![0xFFu8; payload_len];
        let lo = page * per_page;
        let hi = (lo + per_page).min(self.entries.len());
        for (chunk, a) in out.chunks_exact_mut(8).zip(&self.entries[lo..hi]) {
            chunk.copy_from_slice(&a.to_le_bytes());
        }
        out
    }

    /// Entry `k` of a decoded page payload.
    pub fn decode_entry(payload: &[u8], k: usize) -> Option<u64> {
        let a = u64::from_le_bytes(payload[k * 8..k * 8 + 8].try_into().unwrap());
        (a != NULL_ADDR).then_some(a)
    }

    pub fn decode(
        pages: &[Vec<u8>],
        capacity: u64,
        per_page: usize,
        data_blocks: u64,
    ) -> Result<Self> {
        let mut ppm = Ppm::new(capacity);
        for id in 0..capacity {
            let (p, k) = (id as usize / per_page, id as usize % per_page);
            if let Some(a) = Self::decode_entry(&pages[p], k) {
                if a >= data_blocks {
                    return Err(Error::Corrupt(format!("public map entry {id}")));
                }
                ppm.set(id, a);
            }
        }
        Ok(ppm)
    }
}
