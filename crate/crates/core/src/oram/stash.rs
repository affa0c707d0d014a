// SPDX-License-Identifier: Apache-2.0

use crate::error::{Error, Result};

pub const STASH_CAPACITY: usize = 50;
const STASH_MAGIC: &[u8; 4] = b"DLST";
const HEADER_LEN: usize = 16;
const ENTRY_META_LEN: usize = 16;
const FLAG_DISPLACED: u32 = 1;

/// A hidden block waiting for a free location.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StashEntry {
    pub id: u64,
    pub data: Vec<u8>,
    /// Its old location was taken by public data and must not be returned to the free map.
    pub displaced: bool,
}

/// Bounded FIFO of pending hidden blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stash {
    entries: Vec<StashEntry>,
    capacity: usize,
    high_water: usize,
}

impl Stash {
    pub fn new(capacity: usize) -> Self {
        Stash {
            entries: Vec::new(),
            capacity,
            high_water: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn high_water(&self) -> usize {
        self.high_water
    }

    pub fn entries(&self) -> &[StashEntry] {
        &self.entries
    }

    pub fn get(&self, id: u64) -> Option<&StashEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Inserts or replaces the block for `id`. `reserved` slots are held by callers outside the stash.
    pub fn upsert(
        &mut self,
        id: u64,
        data: Vec<u8>,
        displaced: bool,
        reserved: usize,
    ) -> Result<()> {
        if let Some(e) = self.entries.iter_mut().find(|e| e.id == id) {
            e.data = data;
            e.displaced |= displaced;
            return Ok(());
        }
        if self.entries.len() + reserved >= self.capacity {
            return Err(Error::StashOverflow {
                capacity: self.capacity,
            });
        }
        self.entries.push(StashEntry {
            id,
            data,
            displaced,
        });
        self.high_water = self.high_water.max(self.entries.len() + reserved);
        Ok(())
    }

    pub fn take(&mut self, index: usize) -> StashEntry {
        self.entries.remove(index)
    }

    /// Size of [`Stash::encode`] output when every slot is used.
    pub fn encoded_len_at_capacity(&self, block_size: usize) -> usize {
        HEADER_LEN + self.capacity * (ENTRY_META_LEN + block_size)
    }

    /// Serialized form: magic, count, then per-entry id and flags, then the blocks.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STASH_MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.id.to_le_bytes());
            let flags = if e.displaced { FLAG_DISPLACED } else { 0 };
            out.extend_from_slice(&flags.to_le_bytes());
            out.extend_from_slice(&0u32.to_le_bytes());
        }
        for e in &self.entries {
            out.extend_from_slice(&e.data);
        }
        out
    }

    pub fn has_magic(bytes: &[u8]) -> bool {
        bytes.len() >= HEADER_LEN && &bytes[..4] == STASH_MAGIC
    }

    /// Parses [`Stash::encode`] output. `None` when the magic is absent.
    pub fn decode(bytes: &[u8], block_size: usize, capacity: usize) -> Result<Option<Self>> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != STASH_MAGIC {
            return Ok(None);
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let needed = HEADER_LEN + count * (ENTRY_META_LEN + block_size);
        if count > capacity || needed > bytes.len() {
            return Err(Error::Corrupt(format!("stash holds {count} entries")));
        }
        let data_start = HEADER_LEN + count * ENTRY_META_LEN;
        let entries = (0..count)
            .map(|i| {
                let m = HEADER_LEN + i * ENTRY_META_LEN;
                let d = data_start + i * block_size;
                StashEntry {
                    id: u64::from_le_bytes(bytes[m..m + 8].try_into().unwrap()),
                    displaced: u32::from_le_bytes(bytes[m + 8..m + 12].try_into().unwrap())
                        & FLAG_DISPLACED
                        != 0,
                    data: bytes[d..d + block_size].to_vec(),
                }
            })
            .collect();
        Ok(Some(Stash {
            entries,
            capacity,
            high_water: count,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overflow_is_an_error() {
        let mut s = Stash::new(3);
        for id in 0..3 {
            s.upsert(id, vec![0; 4], false, 0).unwrap();
        }
        assert!(matches!(
            s.upsert(9, vec![0; 4], false, 0),
            Err(Error::StashOverflow { .. })
        ));
        s.upsert(1, vec![1; 4], false, 0).unwrap();
        assert_eq!(s.get(1).unwrap().data, vec![1; 4]);
        assert_eq!(s.high_water(), 3);
    }

    #[test]
    fn reserved_slots_count() {
        let mut s = Stash::new(3);
        s.upsert(0, vec![], false, 2).unwrap();
        assert!(s.upsert(1, vec![], false, 2).is_err());
    }

    #[test]
    fn encode_decode() {
        let mut s = Stash::new(50);
        s.upsert(4, vec![1; 8], true, 0).unwrap();
        s.upsert(9, vec![2; 8], false, 0).unwrap();
        let mut bytes = s.encode();
        bytes.extend_from_slice(&[0xAA; 100]);
        let back = Stash::decode(&bytes, 8, 50).unwrap().unwrap();
        assert_eq!(back.entries(), s.entries());
        assert!(Stash::decode(&[0u8; 64], 8, 50).unwrap().is_none());
    }
}
