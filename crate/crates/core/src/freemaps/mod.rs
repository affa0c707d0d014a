// SPDX-License-Identifier: Apache-2.0

//! Free-block matrix (FBM), occupied-block matrix (N-FBM) and its bitmap.
//!
//! [`Fbm`] and [`Nfbm`] are the in-memory matrices. [`FreeMaps`] pairs them with their
//! sealed on-disk columns, header and bitmap blocks and writes through on every change.
//!
//! Inside a batch the FBM header is written once when the batch ends, and bitmap changes are
//! written at round boundaries as exactly two bitmap blocks. The two blocks swap places so that
//! the physical location of a logical bitmap block carries no history.

mod fbm;
mod nfbm;

pub use fbm::{first_valid, locate_valid, DonorMove, Fbm, SelectionReceipt};
pub use nfbm::{Nfbm, NfbmCoord};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_core::CryptoRngCore;

use crate::block_store::{DeviceGeometry, Region};
use crate::crypto::VolumeKey;
use crate::disk::Disk;
use crate::error::{Error, Result};

/// Where the N-FBM bitmap lives between rounds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BitmapMode {
    /// Two bitmap blocks are rewritten every round.
    #[default]
    OnDisk,
    /// Bitmap kept in memory and written only on [`FreeMaps::flush_all`].
    InMemory,
}

pub struct FreeMaps {
    pub fbm: Fbm,
    pub nfbm: Nfbm,
    geometry: DeviceGeometry,
    mode: BitmapMode,
    bitmap_pos: Vec<usize>,
    bitmap_at: Vec<usize>,
    batch: bool,
    header_pending: bool,
    dirty_bitmap: Vec<usize>,
}

impl FreeMaps {
    /// Full FBM holding every data block, empty N-FBM.
    pub fn init(geometry: DeviceGeometry, mode: BitmapMode, rng: &mut dyn CryptoRngCore) -> Self {
        let rows = geometry.matrix_rows();
        let cols = geometry.matrix_cols();
        let fbm = Fbm::new_full(rows, cols, geometry.data_blocks(), rng);
        let nfbm = Nfbm::new_empty(rows, cols);
        let mut bitmap_pos: Vec<usize> = (0..geometry.bitmap_blocks()).collect();
        bitmap_pos.shuffle(rng);
        Self::assemble(fbm, nfbm, geometry, mode, bitmap_pos)
    }

    fn assemble(
        fbm: Fbm,
        nfbm: Nfbm,
        geometry: DeviceGeometry,
        mode: BitmapMode,
        bitmap_pos: Vec<usize>,
    ) -> Self {
        let mut bitmap_at = vec![0; bitmap_pos.len()];
        for (l, &p) in bitmap_pos.iter().enumerate() {
            bitmap_at[p] = l;
        }
        FreeMaps {
            fbm,
            nfbm,
            geometry,
            mode,
            bitmap_pos,
            bitmap_at,
            batch: false,
            header_pending: false,
            dirty_bitmap: Vec::new(),
        }
    }

    pub fn mode(&self) -> BitmapMode {
        self.mode
    }

    fn fbm_col_idx(&self, col: usize) -> u64 {
        self.geometry.region_start(Region::FbmColumns) + col as u64
    }

    fn nfbm_col_idx(&self, col: usize) -> u64 {
        self.geometry.region_start(Region::NfbmColumns) + col as u64
    }

    fn bitmap_idx(&self, phys: usize) -> u64 {
        self.geometry.region_start(Region::Bitmap) + phys as u64
    }

    fn words_per_bitmap_block(&self) -> usize {
        self.geometry.bitmap_bits_per_block() / 64
    }

    fn encode_addrs(&self, addrs: &[u64]) -> Vec<u8> {
        let mut out = vec![0u8; self.geometry.meta_payload()];
        for (chunk, a) in out.chunks_exact_mut(8).zip(addrs) {
            chunk.copy_from_slice(&a.to_le_bytes());
        }
        out
    }

    fn decode_addrs(payload: &[u8], n: usize) -> Vec<u64> {
        payload
            .chunks_exact(8)
            .take(n)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    pub fn write_fbm_column(
        &self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
        col: usize,
    ) -> Result<()> {
        let payload = self.encode_addrs(&self.fbm.column(col));
        disk.write_meta(self.fbm_col_idx(col), &payload, key, rng)
    }

    pub fn write_fbm_header(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<()> {
        let mut payload = vec![0u8; self.geometry.meta_payload()];
        for (chunk, c) in payload.chunks_exact_mut(4).zip(self.fbm.counts()) {
            chunk.copy_from_slice(&c.to_le_bytes());
        }
        self.header_pending = false;
        disk.write_meta(
            self.geometry.region_start(Region::FbmHeader),
            &payload,
            key,
            rng,
        )
    }

    pub fn write_nfbm_column(
        &self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
        col: usize,
    ) -> Result<()> {
        let payload = self.encode_addrs(&self.nfbm.column(col));
        disk.write_meta(self.nfbm_col_idx(col), &payload, key, rng)
    }

    fn write_bitmap_block(
        &self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
        logical: usize,
    ) -> Result<()> {
        let wpb = self.words_per_bitmap_block();
        let words = self.nfbm.free_words();
        let mut payload = vec![0u8; self.geometry.meta_payload()];
        payload[..8].copy_from_slice(&(logical as u64).to_le_bytes());
        let lo = (logical * wpb).min(words.len());
        let hi = ((logical + 1) * wpb).min(words.len());
        for (chunk, w) in payload[8..].chunks_exact_mut(8).zip(&words[lo..hi]) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        disk.write_meta(
            self.bitmap_idx(self.bitmap_pos[logical]),
            &payload,
            key,
            rng,
        )
    }

    /// Starts a run: header writes are deferred to [`FreeMaps::end_batch`].
    pub fn begin_batch(&mut self) {
        self.batch = true;
    }

    /// Writes the FBM header once, changed or not.
    pub fn end_batch(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<()> {
        self.batch = false;
        self.write_fbm_header(disk, key, rng)
    }

    fn header_changed(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<()> {
        if self.batch {
            self.header_pending = true;
            Ok(())
        } else {
            self.write_fbm_header(disk, key, rng)
        }
    }

    fn bitmap_changed(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
        slot: usize,
    ) -> Result<()> {
        let logical = slot / self.geometry.bitmap_bits_per_block();
        if !self.dirty_bitmap.contains(&logical) {
            self.dirty_bitmap.push(logical);
        }
        if self.batch {
            Ok(())
        } else {
            self.end_round(disk, key, rng)
        }
    }

    /// Ends one selection round. In on-disk mode this writes exactly two bitmap blocks: the
    /// changed logical blocks swap places, padded with random partners when fewer than two changed.
    pub fn end_round(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<()> {
        let dirty = std::mem::take(&mut self.dirty_bitmap);
        if self.mode == BitmapMode::InMemory {
            return Ok(());
        }
        if dirty.len() > 2 {
            return Err(Error::InvalidArgument(format!(
                "{} bitmap blocks changed in one round",
                dirty.len()
            )));
        }
        let m = self.bitmap_pos.len();
        if m == 1 {
            self.write_bitmap_block(disk, key, rng, 0)?;
            return self.write_bitmap_block(disk, key, rng, 0);
        }
        let (a, b) = match dirty.as_slice() {
            [a, b] => (*a, *b),
            [a] => (*a, pick_other(rng, m, *a)),
            _ => {
                let a = rng.gen_range(0..m);
                (a, pick_other(rng, m, a))
            }
        };
        self.swap_bitmap(disk, key, rng, a, b)
    }

    fn swap_bitmap(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
        a: usize,
        b: usize,
    ) -> Result<()> {
        self.bitmap_pos.swap(a, b);
        self.bitmap_at[self.bitmap_pos[a]] = a;
        self.bitmap_at[self.bitmap_pos[b]] = b;
        self.write_bitmap_block(disk, key, rng, a)?;
        self.write_bitmap_block(disk, key, rng, b)
    }

    /// Round with no real bitmap change, as issued by the write simulator.
    pub fn simulate_round(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<()> {
        debug_assert!(self.dirty_bitmap.is_empty());
        self.end_round(disk, key, rng)
    }

    pub fn fbm_invalidate(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
        receipt: &SelectionReceipt,
    ) -> Result<Option<DonorMove>> {
        let mv = self.fbm.invalidate_with_compaction(receipt)?;
        self.write_fbm_column(disk, key, rng, receipt.col)?;
        self.header_changed(disk, key, rng)?;
        Ok(mv)
    }

    pub fn fbm_replace(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
        receipt: &SelectionReceipt,
        address: u64,
    ) -> Result<()> {
        self.fbm.replace_in_place(receipt, address)?;
        self.write_fbm_column(disk, key, rng, receipt.col)?;
        self.header_changed(disk, key, rng)
    }

    /// Single-probe N-FBM insert. On a miss the probed column is reencrypted instead.
    pub fn nfbm_add(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
        address: u64,
    ) -> Result<Option<NfbmCoord>> {
        let slot = self.nfbm.probe(rng);
        if self.nfbm.is_free(slot) {
            self.nfbm_add_at(disk, key, rng, slot, address)?;
            Ok(Some(self.nfbm.coord(slot)))
        } else {
            self.write_nfbm_column(disk, key, rng, slot % self.nfbm.cols())?;
            Ok(None)
        }
    }

    pub fn nfbm_add_at(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
        slot: usize,
        address: u64,
    ) -> Result<()> {
        self.nfbm.add_at(slot, address);
        self.write_nfbm_column(disk, key, rng, slot % self.nfbm.cols())?;
        self.bitmap_changed(disk, key, rng, slot)
    }

    pub fn nfbm_mark_free(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
        coord: NfbmCoord,
    ) -> Result<()> {
        let slot = self.nfbm.slot_of(coord);
        self.nfbm.mark_free(slot)?;
        self.bitmap_changed(disk, key, rng, slot)
    }

    /// Writes every column, the header and every bitmap block.
    pub fn flush_all(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<()> {
        for c in 0..self.fbm.cols() {
            self.write_fbm_column(disk, key, rng, c)?;
        }
        self.write_fbm_header(disk, key, rng)?;
        for c in 0..self.nfbm.cols() {
            self.write_nfbm_column(disk, key, rng, c)?;
        }
        for l in 0..self.bitmap_pos.len() {
            self.write_bitmap_block(disk, key, rng, l)?;
        }
        self.dirty_bitmap.clear();
        Ok(())
    }

    /// Reads all free-map blocks back from disk.
    pub fn load(disk: &mut Disk, key: &VolumeKey, mode: BitmapMode) -> Result<Self> {
        let g = *disk.geometry();
        let rows = g.matrix_rows();
        let cols = g.matrix_cols();
        let mut fbm_slots = vec![0u64; rows * cols];
        let mut nfbm_slots = vec![0u64; rows * cols];
        for c in 0..cols {
            let f = Self::decode_addrs(
                &disk.read_meta(g.region_start(Region::FbmColumns) + c as u64, key)?,
                rows,
            );
            let n = Self::decode_addrs(
                &disk.read_meta(g.region_start(Region::NfbmColumns) + c as u64, key)?,
                rows,
            );
            for r in 0..rows {
                fbm_slots[r * cols + c] = f[r];
                nfbm_slots[r * cols + c] = n[r];
            }
        }
        let header = disk.read_meta(g.region_start(Region::FbmHeader), key)?;
        let counts: Vec<u32> = header
            .chunks_exact(4)
            .take(rows)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let fbm = Fbm::from_parts(rows, cols, fbm_slots, counts)?;

        let m = g.bitmap_blocks();
        let wpb = g.bitmap_bits_per_block() / 64;
        let total_words = (rows * cols).div_ceil(64);
        let mut words = vec![0u64; total_words];
        let mut bitmap_pos = vec![usize::MAX; m];
        for p in 0..m {
            let payload = disk.read_meta(g.region_start(Region::Bitmap) + p as u64, key)?;
            let logical = u64::from_le_bytes(payload[..8].try_into().unwrap()) as usize;
            if logical >= m || bitmap_pos[logical] != usize::MAX {
                return Err(Error::Corrupt("bitmap block index".into()));
            }
            bitmap_pos[logical] = p;
            for (j, chunk) in payload[8..].chunks_exact(8).enumerate().take(wpb) {
                let w = logical * wpb + j;
                if w < total_words {
                    words[w] = u64::from_le_bytes(chunk.try_into().unwrap());
                }
            }
        }
        let nfbm = Nfbm::from_parts(rows, cols, nfbm_slots, |s| {
            words[s / 64] & (1 << (s % 64)) != 0
        })?;
        Ok(Self::assemble(fbm, nfbm, g, mode, bitmap_pos))
    }

    /// Physical position of each logical bitmap block.
    pub fn bitmap_positions(&self) -> &[usize] {
        &self.bitmap_pos
    }
}

fn pick_other(rng: &mut dyn CryptoRngCore, m: usize, a: usize) -> usize {
    let b = rng.gen_range(0..m - 1);
    if b >= a {
        b + 1
    } else {
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block_store::{BlockStore, Fill, OpLabel};
    use crate::crypto::{seeded_rng, KeyRole};
    use crate::pfl::Pfl;

    fn setup(n: u64, b: usize) -> (Disk, VolumeKey, FreeMaps) {
        let g = DeviceGeometry::new(n, b).unwrap();
        let store = BlockStore::memory(g, Fill::Zero).unwrap();
        let disk = Disk::new(
            store,
            VolumeKey::from_bytes(KeyRole::Public, [1; 32]),
            Pfl::new_all_free(n),
        );
        let maps = FreeMaps::init(g, BitmapMode::OnDisk, &mut seeded_rng(0));
        (disk, VolumeKey::from_bytes(KeyRole::Hidden, [2; 32]), maps)
    }

    #[test]
    fn invalidate_and_replace_share_a_shape() {
        let (mut disk, key, mut maps) = setup(1024, 512);
        let mut rng = seeded_rng(1);
        let r = maps.fbm.select_random(&mut rng).unwrap();
        disk.store_mut().begin_trace(OpLabel::Other).unwrap();
        maps.fbm_invalidate(&mut disk, &key, &mut rng, &r).unwrap();
        let a = disk.store_mut().end_trace().unwrap();
        let r = maps.fbm.select_random(&mut rng).unwrap();
        let header = maps.fbm.counts().to_vec();
        disk.store_mut().begin_trace(OpLabel::Other).unwrap();
        maps.fbm_replace(&mut disk, &key, &mut rng, &r, 5000)
            .unwrap();
        let b = disk.store_mut().end_trace().unwrap();
        assert_eq!(a.shape(), b.shape());
        assert_eq!(a.writes.len(), 2);
        assert_eq!(maps.fbm.counts(), header.as_slice());
    }

    #[test]
    fn round_always_writes_two_bitmap_blocks() {
        // 512-byte blocks and 2^14 data blocks give several bitmap blocks.
        let (mut disk, key, mut maps) = setup(16384, 512);
        assert!(disk.geometry().bitmap_blocks() > 2);
        let mut rng = seeded_rng(2);
        maps.begin_batch();
        for dirty in 0..3 {
            disk.store_mut().begin_trace(OpLabel::Other).unwrap();
            for _ in 0..dirty {
                let slot = loop {
                    let s = maps.nfbm.probe(&mut rng);
                    if maps.nfbm.is_free(s) {
                        break s;
                    }
                };
                maps.nfbm_add_at(&mut disk, &key, &mut rng, slot, 7)
                    .unwrap();
            }
            maps.end_round(&mut disk, &key, &mut rng).unwrap();
            let t = disk.store_mut().end_trace().unwrap();
            assert_eq!(t.shape().get(Region::Bitmap), 2);
        }
        maps.end_batch(&mut disk, &key, &mut rng).unwrap();
    }

    #[test]
    fn flush_then_load_round_trips() {
        let (mut disk, key, mut maps) = setup(2048, 512);
        let mut rng = seeded_rng(3);
        for _ in 0..50 {
            let r = maps.fbm.select_random(&mut rng).unwrap();
            maps.fbm_invalidate(&mut disk, &key, &mut rng, &r).unwrap();
            maps.nfbm_add(&mut disk, &key, &mut rng, r.address).unwrap();
        }
        maps.flush_all(&mut disk, &key, &mut rng).unwrap();
        let back = FreeMaps::load(&mut disk, &key, BitmapMode::OnDisk).unwrap();
        assert_eq!(back.fbm, maps.fbm);
        assert_eq!(back.nfbm.free_words(), maps.nfbm.free_words());
        assert_eq!(back.nfbm.occupied_count(), maps.nfbm.occupied_count());
        assert_eq!(back.bitmap_positions(), maps.bitmap_positions());
    }

    #[test]
    fn missed_probe_rewrites_one_column() {
        let (mut disk, key, mut maps) = setup(256, 512);
        let mut rng = seeded_rng(4);
        let slots = maps.nfbm.slot_count();
        for s in 0..slots {
            maps.nfbm.add_at(s, s as u64);
        }
        disk.store_mut().begin_trace(OpLabel::Other).unwrap();
        assert_eq!(maps.nfbm_add(&mut disk, &key, &mut rng, 1).unwrap(), None);
        let t = disk.store_mut().end_trace().unwrap();
        assert_eq!(t.shape().get(Region::NfbmColumns), 1);
        assert_eq!(t.shape().total(), 1);
    }
}
