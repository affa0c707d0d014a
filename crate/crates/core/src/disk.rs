// SPDX-License-Identifier: Apache-2.0

//! Sealed block access shared by the public and hidden volumes.
//!
//! Data blocks carry a full block of ciphertext and keep their IV in the RMA, so every data
//! write is paired with one RMA page write. Metadata blocks carry their IV inline.

use rand_core::{CryptoRngCore, RngCore};

use crate::block_store::{BlockStore, DeviceGeometry, Region};
use crate::crypto::{fresh_iv, open_meta, seal_meta, VolumeKey};
use crate::error::{Error, Result};
use crate::pfl::{FmaRemoval, Pfl};

pub struct Disk {
    store: BlockStore,
    geometry: DeviceGeometry,
    public_key: VolumeKey,
    pfl: Pfl,
}

impl Disk {
    pub fn new(store: BlockStore, public_key: VolumeKey, pfl: Pfl) -> Self {
        let geometry = *store.geometry();
        Disk {
            store,
            geometry,
            public_key,
            pfl,
        }
    }

    pub fn geometry(&self) -> &DeviceGeometry {
        &self.geometry
    }

    pub fn store(&self) -> &BlockStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut BlockStore {
        &mut self.store
    }

    pub fn into_store(self) -> BlockStore {
        self.store
    }

    pub fn public_key(&self) -> &VolumeKey {
        &self.public_key
    }

    pub fn pfl(&self) -> &Pfl {
        &self.pfl
    }

    /// Absolute index of block `offset` within `region`.
    pub fn block_in(&self, region: Region, offset: u64) -> u64 {
        let range = self.geometry.region_range(region);
        debug_assert!(offset < range.end - range.start, "{region} offset {offset}");
        range.start + offset
    }

    /// Seals `payload` (zero-padded) into metadata block `idx`.
    pub fn write_meta(
        &mut self,
        idx: u64,
        payload: &[u8],
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<()> {
        let cap = self.geometry.meta_payload();
        if payload.len() > cap {
            return Err(Error::BadLength {
                expected: cap,
                got: payload.len(),
            });
        }
        let block = if payload.len() == cap {
            seal_meta(key, payload, rng)
        } else {
            let mut padded = payload.to_vec();
            padded.resize(cap, 0);
            seal_meta(key, &padded, rng)
        };
        self.store.write_block(idx, &block)
    }

    pub fn read_meta(&mut self, idx: u64, key: &VolumeKey) -> Result<Vec<u8>> {
        let block = self.store.read_block(idx)?;
        Ok(open_meta(key, &block))
    }

    /// Fills block `idx` with random bytes.
    pub fn randomize_block(&mut self, idx: u64, rng: &mut dyn RngCore) -> Result<()> {
        let mut block = vec![0u8; self.geometry.block_size()];
        rng.fill_bytes(&mut block);
        self.store.write_block(idx, &block)
    }

    /// Encrypts `plaintext` into data block `addr` under a fresh IV and persists the IV.
    pub fn write_data(
        &mut self,
        addr: u64,
        plaintext: &[u8],
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<()> {
        if plaintext.len() != self.geometry.block_size() {
            return Err(Error::BadLength {
                expected: self.geometry.block_size(),
                got: plaintext.len(),
            });
        }
        let iv = fresh_iv(rng);
        let mut block = plaintext.to_vec();
        key.apply(&iv, &mut block);
        self.store
            .write_block(self.geometry.data_block(addr), &block)?;
        self.pfl.set_iv(addr, iv);
        self.write_rma_page_of(addr, rng)
    }

    /// Like [`Disk::write_data`] but leaves the RMA page to a later [`Disk::flush_pfl`].
    pub fn write_data_deferred(
        &mut self,
        addr: u64,
        plaintext: &[u8],
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<()> {
        let iv = fresh_iv(rng);
        let mut block = plaintext.to_vec();
        key.apply(&iv, &mut block);
        self.store
            .write_block(self.geometry.data_block(addr), &block)?;
        self.pfl.set_iv(addr, iv);
        Ok(())
    }

    /// Gives every data block a random IV in memory, as for a freshly randomized image.
    pub fn randomize_ivs(&mut self, rng: &mut dyn CryptoRngCore) {
        for a in 0..self.geometry.data_blocks() {
            self.pfl.set_iv(a, fresh_iv(rng));
        }
    }

    pub fn read_data(&mut self, addr: u64, key: &VolumeKey) -> Result<Vec<u8>> {
        let mut block = self.store.read_block(self.geometry.data_block(addr))?;
        let iv = self.pfl.rma(addr).iv;
        key.apply(&iv, &mut block);
        Ok(block)
    }

    /// Rewrites a data block with the same plaintext under a fresh IV.
    pub fn reencrypt_data(
        &mut self,
        addr: u64,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<()> {
        let plain = self.read_data(addr, key)?;
        self.write_data(addr, &plain, key, rng)
    }

    /// Overwrites a data block with random bytes and a random IV.
    pub fn randomize_data(&mut self, addr: u64, rng: &mut dyn CryptoRngCore) -> Result<()> {
        let mut block = vec![0u8; self.geometry.block_size()];
        rng.fill_bytes(&mut block);
        self.store
            .write_block(self.geometry.data_block(addr), &block)?;
        self.pfl.set_iv(addr, fresh_iv(rng));
        self.write_rma_page_of(addr, rng)
    }

    pub fn write_public(
        &mut self,
        addr: u64,
        plaintext: &[u8],
        rng: &mut dyn CryptoRngCore,
    ) -> Result<()> {
        let key = self.public_key.clone();
        self.write_data(addr, plaintext, &key, rng)
    }

    pub fn read_public(&mut self, addr: u64) -> Result<Vec<u8>> {
        let key = self.public_key.clone();
        self.read_data(addr, &key)
    }

    fn write_rma_page_of(&mut self, addr: u64, rng: &mut dyn CryptoRngCore) -> Result<()> {
        let per = self.geometry.rma_entries_per_page();
        self.write_rma_page(addr as usize / per, rng)
    }

    fn write_rma_page(&mut self, page: usize, rng: &mut dyn CryptoRngCore) -> Result<()> {
        let payload = self.pfl.encode_rma_page(
            page,
            self.geometry.rma_entries_per_page(),
            self.geometry.meta_payload(),
        );
        let idx = self.block_in(Region::Rma, page as u64);
        let key = self.public_key.clone();
        self.write_meta(idx, &payload, &key, rng)
    }

    fn write_fma_page(&mut self, page: usize, rng: &mut dyn CryptoRngCore) -> Result<()> {
        let payload = self.pfl.encode_fma_page(
            page,
            self.geometry.fma_entries_per_page(),
            self.geometry.meta_payload(),
        );
        let idx = self.block_in(Region::Fma, page as u64);
        let key = self.public_key.clone();
        self.write_meta(idx, &payload, &key, rng)
    }

    fn write_fma_header(&mut self, rng: &mut dyn CryptoRngCore) -> Result<()> {
        let payload = self.pfl.encode_fma_header(self.geometry.meta_payload());
        let idx = self.block_in(Region::Fma, self.geometry.fma_pages() as u64);
        let key = self.public_key.clone();
        self.write_meta(idx, &payload, &key, rng)
    }

    /// Marks `addr` public: two FMA pages, the FMA length block and two RMA pages.
    pub fn fma_remove(&mut self, addr: u64, rng: &mut dyn CryptoRngCore) -> Result<FmaRemoval> {
        let r = self.pfl.remove(addr)?;
        let per = self.geometry.fma_entries_per_page();
        self.write_fma_page(r.hole as usize / per, rng)?;
        self.write_fma_page(r.tail as usize / per, rng)?;
        self.write_fma_header(rng)?;
        self.write_rma_page_of(r.moved, rng)?;
        self.write_rma_page_of(r.removed, rng)?;
        Ok(r)
    }

    /// Writes every FMA and RMA block.
    pub fn flush_pfl(&mut self, rng: &mut dyn CryptoRngCore) -> Result<()> {
        for p in 0..self.geometry.fma_pages() {
            self.write_fma_page(p, rng)?;
        }
        self.write_fma_header(rng)?;
        for p in 0..self.geometry.rma_pages() {
            self.write_rma_page(p, rng)?;
        }
        Ok(())
    }

    /// Loads the public free list from disk.
    pub fn load_pfl(store: &mut BlockStore, public_key: &VolumeKey) -> Result<Pfl> {
        let g = *store.geometry();
        let fma_start = g.region_start(Region::Fma);
        let rma_start = g.region_start(Region::Rma);
        let mut fma_pages = Vec::with_capacity(g.fma_pages());
        for p in 0..g.fma_pages() as u64 {
            fma_pages.push(open_meta(public_key, &store.read_block(fma_start + p)?));
        }
        let header = open_meta(
            public_key,
            &store.read_block(fma_start + g.fma_pages() as u64)?,
        );
        let mut rma_pages = Vec::with_capacity(g.rma_pages());
        for p in 0..g.rma_pages() as u64 {
            rma_pages.push(open_meta(public_key, &store.read_block(rma_start + p)?));
        }
        Pfl::decode(
            g.data_blocks(),
            &fma_pages,
            &header,
            &rma_pages,
            g.fma_entries_per_page(),
            g.rma_entries_per_page(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block_store::{Fill, OpLabel};
    use crate::crypto::{seeded_rng, KeyRole};

    fn disk() -> Disk {
        let g = DeviceGeometry::new(256, 512).unwrap();
        let store = BlockStore::memory(g, Fill::Zero).unwrap();
        let key = VolumeKey::from_bytes(KeyRole::Public, [1; 32]);
        Disk::new(store, key, Pfl::new_all_free(256))
    }

    #[test]
    fn data_write_pairs_with_rma_write() {
        let mut d = disk();
        let mut rng = seeded_rng(1);
        let key = VolumeKey::from_bytes(KeyRole::Hidden, [2; 32]);
        d.store_mut().begin_trace(OpLabel::Other).unwrap();
        d.write_data(9, &[4u8; 512], &key, &mut rng).unwrap();
        let t = d.store_mut().end_trace().unwrap();
        assert_eq!(t.shape().get(Region::Data), 1);
        assert_eq!(t.shape().get(Region::Rma), 1);
        assert_eq!(d.read_data(9, &key).unwrap(), vec![4u8; 512]);
    }

    #[test]
    fn reencrypt_looks_like_a_write() {
        let mut d = disk();
        let mut rng = seeded_rng(2);
        let key = VolumeKey::from_bytes(KeyRole::Hidden, [2; 32]);
        d.write_data(3, &[8u8; 512], &key, &mut rng).unwrap();
        d.store_mut().begin_trace(OpLabel::Other).unwrap();
        d.write_data(4, &[8u8; 512], &key, &mut rng).unwrap();
        let write = d.store_mut().end_trace().unwrap();
        d.store_mut().begin_trace(OpLabel::Other).unwrap();
        d.reencrypt_data(3, &key, &mut rng).unwrap();
        let re = d.store_mut().end_trace().unwrap();
        assert_eq!(write.shape(), re.shape());
        assert_eq!(d.read_data(3, &key).unwrap(), vec![8u8; 512]);
    }

    #[test]
    fn fma_removal_shape_and_reload() {
        let mut d = disk();
        let mut rng = seeded_rng(3);
        d.flush_pfl(&mut rng).unwrap();
        d.store_mut().begin_trace(OpLabel::Other).unwrap();
        d.fma_remove(17, &mut rng).unwrap();
        let t = d.store_mut().end_trace().unwrap();
        assert_eq!(t.shape().get(Region::Fma), 3);
        assert_eq!(t.shape().get(Region::Rma), 2);
        assert_eq!(t.shape().total(), 5);
        let key = d.public_key().clone();
        let pfl = d.pfl().clone();
        let mut store = d.into_store();
        assert_eq!(Disk::load_pfl(&mut store, &key).unwrap(), pfl);
    }
}
