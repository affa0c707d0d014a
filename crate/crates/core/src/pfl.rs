// SPDX-License-Identifier: Apache-2.0

//! Public free list: forward array of non-public blocks and a per-block reverse record.

use rand::Rng;
use rand_core::RngCore;

use crate::block_store::NULL_ADDR;
use crate::crypto::IV_LEN;
use crate::error::{Error, Result};

const RMA_ENTRY_LEN: usize = 8 + IV_LEN;

/// Reverse record for one data block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RmaEntry {
    /// Position in the FMA, or [`NULL_ADDR`] when the block holds public data.
    pub fma_index: u64,
    /// IV of the block's current ciphertext.
    pub iv: [u8; IV_LEN],
}

/// Positions touched by one FMA removal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FmaRemoval {
    pub removed: u64,
    pub moved: u64,
    pub hole: u64,
    pub tail: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pfl {
    fma: Vec<u64>,
    rma: Vec<RmaEntry>,
}

impl Pfl {
    /// Every block is non-public.
    pub fn new_all_free(n: u64) -> Self {
        Pfl {
            fma: (0..n).collect(),
            rma: (0..n)
                .map(|i| RmaEntry {
                    fma_index: i,
                    iv: [0; IV_LEN],
                })
                .collect(),
        }
    }

    pub fn block_count(&self) -> u64 {
        self.rma.len() as u64
    }

    pub fn fma_len(&self) -> u64 {
        self.fma.len() as u64
    }

    pub fn fma_get(&self, i: u64) -> u64 {
        self.fma[i as usize]
    }

    pub fn fma(&self) -> &[u64] {
        &self.fma
    }

    pub fn rma(&self, addr: u64) -> &RmaEntry {
        &self.rma[addr as usize]
    }

    pub fn is_public(&self, addr: u64) -> bool {
        self.rma[addr as usize].fma_index == NULL_ADDR
    }

    pub fn set_iv(&mut self, addr: u64, iv: [u8; IV_LEN]) {
        self.rma[addr as usize].iv = iv;
    }

    /// Uniform non-public block.
    pub fn random_free(&self, rng: &mut dyn RngCore) -> Result<u64> {
        if self.fma.is_empty() {
            return Err(Error::PublicFull);
        }
        Ok(self.fma[rng.gen_range(0..self.fma.len())])
    }

    /// Removes `addr` from the FMA by moving the last entry into its hole.
    pub fn remove(&mut self, addr: u64) -> Result<FmaRemoval> {
        let hole = self.rma[addr as usize].fma_index;
        if hole == NULL_ADDR {
            return Err(Error::InvalidArgument(format!(
                "block {addr} is already public"
            )));
        }
        let tail = self.fma.len() as u64 - 1;
        let moved = self.fma[tail as usize];
        self.fma[hole as usize] = moved;
        self.rma[moved as usize].fma_index = hole;
        self.fma.pop();
        self.rma[addr as usize].fma_index = NULL_ADDR;
        Ok(FmaRemoval {
            removed: addr,
            moved,
            hole,
            tail,
        })
    }

    /// Whether FMA and RMA reference each other exactly.
    pub fn check_bijection(&self) -> bool {
        for (i, &a) in self.fma.iter().enumerate() {
            if a as usize >= self.rma.len() || self.rma[a as usize].fma_index != i as u64 {
                return false;
            }
        }
        let non_public = self.rma.iter().filter(|e| e.fma_index != NULL_ADDR).count();
        non_public == self.fma.len()
    }

    pub fn encode_fma_page(&self, page: usize, per_page: usize, payload_len: usize) -> Vec<u8> {
        let mut out = vec![0u8; payload_len];
        for (j, chunk) in out.chunks_exact_mut(8).take(per_page).enumerate() {
            let v = self
                .fma
                .get(page * per_page + j)
                .copied()
                .unwrap_or(NULL_ADDR);
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn encode_fma_header(&self, payload_len: usize) -> Vec<u8> {
        let mut out = vec![0u8; payload_len];
        out[..8].copy_from_slice(&(self.fma.len() as u64).to_le_bytes());
        out
    }

    pub fn encode_rma_page(&self, page: usize, per_page: usize, payload_len: usize) -> Vec<u8> {
        let mut out = vec![0u8; payload_len];
        for (j, chunk) in out
            .chunks_exact_mut(RMA_ENTRY_LEN)
            .take(per_page)
            .enumerate()
        {
            match self.rma.get(page * per_page + j) {
                Some(e) => {
                    chunk[..8].copy_from_slice(&e.fma_index.to_le_bytes());
                    chunk[8..].copy_from_slice(&e.iv);
                }
                None => chunk[..8].copy_from_slice(&NULL_ADDR.to_le_bytes()),
            }
        }
        out
    }

    /// Rebuilds from decrypted FMA pages, FMA header and RMA pages.
    pub fn decode(
        n: u64,
        fma_pages: &[Vec<u8>],
        fma_header: &[u8],
        rma_pages: &[Vec<u8>],
        fma_per_page: usize,
        rma_per_page: usize,
    ) -> Result<Self> {
        let len = u64::from_le_bytes(fma_header[..8].try_into().unwrap());
        if len > n {
            return Err(Error::Corrupt(format!(
                "free list length {len} exceeds {n}"
            )));
        }
        let mut fma = Vec::with_capacity(len as usize);
        for i in 0..len as usize {
            let page = &fma_pages[i / fma_per_page];
            let off = (i % fma_per_page) * 8;
            fma.push(u64::from_le_bytes(page[off..off + 8].try_into().unwrap()));
        }
        let mut rma = Vec::with_capacity(n as usize);
        for a in 0..n as usize {
            let page = &rma_pages[a / rma_per_page];
            let off = (a % rma_per_page) * RMA_ENTRY_LEN;
            rma.push(RmaEntry {
                fma_index: u64::from_le_bytes(page[off..off + 8].try_into().unwrap()),
                iv: page[off + 8..off + RMA_ENTRY_LEN].try_into().unwrap(),
            });
        }
        let pfl = Pfl { fma, rma };
        if !pfl.check_bijection() {
            return Err(Error::Corrupt("free list and reverse map disagree".into()));
        }
        Ok(pfl)
    }
}

#[cfg(test)]
fn rma_entries_per_page(payload_len: usize) -> usize {
    payload_len / RMA_ENTRY_LEN
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::seeded_rng;

    #[test]
    fn removal_keeps_bijection() {
        let mut pfl = Pfl::new_all_free(10);
        let r = pfl.remove(3).unwrap();
        assert_eq!(
            r,
            FmaRemoval {
                removed: 3,
                moved: 9,
                hole: 3,
                tail: 9
            }
        );
        assert!(pfl.check_bijection());
        assert!(pfl.is_public(3));
        assert!(pfl.remove(3).is_err());
        let last = pfl.fma_get(pfl.fma_len() - 1);
        let r = pfl.remove(last).unwrap();
        assert_eq!(r.moved, last);
        assert!(pfl.check_bijection());
        assert_eq!(pfl.fma_len() + 2, 10);
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut pfl = Pfl::new_all_free(40);
        let mut rng = seeded_rng(1);
        for a in [5, 17, 39, 0] {
            pfl.remove(a).unwrap();
        }
        pfl.set_iv(7, [3; IV_LEN]);
        let payload = 112;
        let fpp = payload / 8;
        let rpp = rma_entries_per_page(payload);
        let fma_pages: Vec<_> = (0..40usize.div_ceil(fpp))
            .map(|p| pfl.encode_fma_page(p, fpp, payload))
            .collect();
        let rma_pages: Vec<_> = (0..40usize.div_ceil(rpp))
            .map(|p| pfl.encode_rma_page(p, rpp, payload))
            .collect();
        let header = pfl.encode_fma_header(payload);
        let back = Pfl::decode(40, &fma_pages, &header, &rma_pages, fpp, rpp).unwrap();
        assert_eq!(back, pfl);
        let drawn = pfl.random_free(&mut rng).unwrap();
        assert!(!pfl.is_public(drawn));
    }

    #[test]
    fn empty_list_reports_full() {
        let mut pfl = Pfl::new_all_free(2);
        pfl.remove(0).unwrap();
        pfl.remove(1).unwrap();
        assert!(matches!(
            pfl.random_free(&mut seeded_rng(0)),
            Err(Error::PublicFull)
        ));
    }
}
