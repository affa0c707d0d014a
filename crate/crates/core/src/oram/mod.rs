// SPDX-License-Identifier: Apache-2.0

//! Write-only ORAM over the data region.
//!
//! The position map is a dense B+ tree whose nodes are ordinary data blocks, so they move on
//! every write just like data. Every write runs `1 + depth` selection runs of `k` rounds each:
//! one run places stash entries, then one run per tree level rewrites the dirty nodes from the
//! leaves up, and finally the root pointer is rewritten. Each run draws `k` items from a shuffled
//! combination of `k` free blocks (from the FBM) and `k` occupied blocks (from the N-FBM). The
//! sequence of regions touched is therefore a fixed function of the geometry, whatever the stash
//! holds, and a simulated write reproduces it from public information alone.

mod stash;
mod tree;

pub use stash::{Stash, StashEntry, STASH_CAPACITY};
pub use tree::{decode_child, decode_leaf_entry, Loc, PositionMap, TreeShape};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_core::CryptoRngCore;

use crate::block_store::{BlockStore, DeviceGeometry, Region, RegionCounts, NULL_ADDR};
use crate::crypto::{KeyRole, VolumeKey};
use crate::disk::Disk;
use crate::error::{Error, Result};
use crate::freemaps::{BitmapMode, DonorMove, FreeMaps, NfbmCoord, SelectionReceipt};
use crate::pfl::Pfl;

const NULL_SLOT: u32 = u32::MAX;

/// How the non-free half of each combined set is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SelectionProtocol {
    /// Occupied set sampled from the N-FBM.
    #[default]
    Combined,
    /// Random set drawn from all non-public blocks, with duplicates against the free set redrawn.
    /// Leaks a small bias towards free blocks; kept for attack experiments.
    BiasedLegacy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OramConfig {
    pub k: usize,
    pub stash_capacity: usize,
    pub protocol: SelectionProtocol,
    pub bitmap: BitmapMode,
}

impl Default for OramConfig {
    fn default() -> Self {
        OramConfig {
            k: 5,
            stash_capacity: STASH_CAPACITY,
            protocol: SelectionProtocol::Combined,
            bitmap: BitmapMode::OnDisk,
        }
    }
}

/// Region write counts of one hidden write (or simulation).
pub fn write_shape(k: usize, depth: usize, bitmap: BitmapMode) -> RegionCounts {
    let runs = (1 + depth) as u64;
    let rounds = runs * k as u64;
    let mut c = RegionCounts::default();
    c.set(Region::Data, rounds);
    c.set(Region::Rma, rounds);
    c.set(Region::FbmColumns, rounds);
    c.set(Region::NfbmColumns, rounds);
    if bitmap == BitmapMode::OnDisk {
        c.set(Region::Bitmap, 2 * rounds);
    }
    c.set(Region::FbmHeader, runs);
    c.set(Region::RootPointer, 1);
    c
}

/// Total blocks written per hidden write.
pub fn write_cost(k: usize, depth: usize, bitmap: BitmapMode) -> u64 {
    write_shape(k, depth, bitmap).total()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Owner {
    /// Not hidden-occupied: truly free or public.
    Free,
    Data(u64),
    Node,
    Filler,
}

#[derive(Clone, Copy, Debug)]
enum Tag {
    Free(usize),
    Other(usize),
}

/// Ground truth around one selection run, captured when recording is on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunRecord {
    /// Per data block: truly free (in the FBM) when the run started.
    pub free_before: Vec<bool>,
    /// Data blocks written by the run, in round order.
    pub touched: Vec<u64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OramStats {
    pub writes: u64,
    pub simulations: u64,
    pub placed: u64,
    pub evictions: u64,
}

/// One named structural check.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Check {
    pub name: &'static str,
    pub ok: bool,
}

/// Address and N-FBM slot of a pick from the other set.
type OtherPick = (u64, usize);

/// Hidden-volume state: free maps, position map and stash, mirrored in trusted memory.
pub struct OramState {
    config: OramConfig,
    key: VolumeKey,
    geometry: DeviceGeometry,
    maps: FreeMaps,
    map: PositionMap,
    stash: Stash,
    owners: Vec<Owner>,
    slot_of: Vec<u32>,
    fillers: Vec<u64>,
    filler_at: Vec<u32>,
    reserved: usize,
    recording: Option<Vec<RunRecord>>,
    stats: OramStats,
}

impl OramState {
    fn empty(
        geometry: DeviceGeometry,
        key: VolumeKey,
        config: OramConfig,
        maps: FreeMaps,
        shape: TreeShape,
    ) -> Self {
        let n = geometry.data_blocks() as usize;
        OramState {
            config,
            key,
            geometry,
            maps,
            map: PositionMap::new(shape),
            stash: Stash::new(config.stash_capacity),
            owners: vec![Owner::Free; n],
            slot_of: vec![NULL_SLOT; n],
            fillers: Vec::new(),
            filler_at: vec![NULL_SLOT; n],
            reserved: 0,
            recording: None,
            stats: OramStats::default(),
        }
    }

    /// Bulk-loads a fresh hidden volume: every id gets random content, the tree is built bottom
    /// up, and filler blocks pad the occupied set to `occupied` blocks.
    pub fn init(
        disk: &mut Disk,
        key: VolumeKey,
        config: OramConfig,
        shape: TreeShape,
        occupied: u64,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<Self> {
        let g = *disk.geometry();
        let used = shape.capacity() + shape.node_count() as u64;
        if used > occupied || occupied > g.data_blocks() / 2 {
            return Err(Error::Geometry(format!(
                "hidden volume of {used} blocks does not fit an occupied budget of {occupied}"
            )));
        }
        let maps = FreeMaps::init(g, config.bitmap, rng);
        let mut s = OramState::empty(g, key.clone(), config, maps, shape.clone());
        let bs = g.block_size();
        let mut plain = vec![0u8; bs];
        for id in 0..shape.capacity() {
            let (y, slot) = s.bulk_alloc(rng)?;
            rng.fill_bytes(&mut plain);
            disk.write_data_deferred(y, &plain, &key, rng)?;
            s.map.set_entry(
                id,
                Loc {
                    phys: y,
                    coord: s.maps.nfbm.coord(slot),
                },
            );
            s.set_owner(y, Owner::Data(id), slot);
        }
        for level in 0..shape.depth() {
            for j in 0..shape.nodes_at(level) {
                let (y, slot) = s.bulk_alloc(rng)?;
                s.map.set_node(
                    level,
                    j,
                    Loc {
                        phys: y,
                        coord: s.maps.nfbm.coord(slot),
                    },
                );
                s.set_owner(y, Owner::Node, slot);
            }
        }
        for level in 0..shape.depth() {
            for j in 0..shape.nodes_at(level) {
                let content = s.map.encode_node(level, j, bs, s.maps.nfbm.cols());
                disk.write_data_deferred(s.map.node(level, j).phys, &content, &key, rng)?;
            }
        }
        for _ in used..occupied {
            let (y, slot) = s.bulk_alloc(rng)?;
            s.set_owner(y, Owner::Filler, slot);
            s.add_filler(y);
        }
        s.maps.flush_all(disk, &key, rng)?;
        s.write_root(disk, &key, rng)?;
        disk.flush_pfl(rng)?;
        Ok(s)
    }

    fn bulk_alloc(&mut self, rng: &mut dyn CryptoRngCore) -> Result<(u64, usize)> {
        let r = self.maps.fbm.select_random(rng)?;
        self.maps.fbm.invalidate_with_compaction(&r)?;
        let slot = self.probe_free_slot(rng);
        self.maps.nfbm.add_at(slot, r.address);
        Ok((r.address, slot))
    }

    fn probe_free_slot(&self, rng: &mut dyn CryptoRngCore) -> usize {
        loop {
            let s = self.maps.nfbm.probe(rng);
            if self.maps.nfbm.is_free(s) {
                return s;
            }
        }
    }

    /// Rebuilds the trusted state from disk.
    pub fn load(
        disk: &mut Disk,
        key: VolumeKey,
        config: OramConfig,
        shape: TreeShape,
        stash: Stash,
    ) -> Result<Self> {
        let g = *disk.geometry();
        let maps = FreeMaps::load(disk, &key, config.bitmap)?;
        let mut s = OramState::empty(g, key.clone(), config, maps, shape.clone());
        s.stash = stash;
        let n = g.data_blocks();
        let cols = s.maps.nfbm.cols();
        for slot in s.maps.nfbm.occupied_slots().collect::<Vec<_>>() {
            let a = s.maps.nfbm.addr_at(slot);
            if a >= n || s.slot_of[a as usize] != NULL_SLOT {
                return Err(Error::Corrupt(format!("occupied-block matrix entry {a}")));
            }
            s.slot_of[a as usize] = slot as u32;
        }
        let coord_of = |s: &OramState, a: u64| -> Result<NfbmCoord> {
            if a >= n || s.slot_of[a as usize] == NULL_SLOT {
                return Err(Error::Corrupt(format!("tree block {a} is not occupied")));
            }
            Ok(s.maps.nfbm.coord(s.slot_of[a as usize] as usize))
        };
        let root_phys = s.read_root(disk)?;
        let top = shape.depth() - 1;
        s.map.set_node(
            top,
            0,
            Loc {
                phys: root_phys,
                coord: coord_of(&s, root_phys)?,
            },
        );
        for level in (1..shape.depth()).rev() {
            for j in 0..shape.nodes_at(level) {
                let block = disk.read_data(s.map.node(level, j).phys, &key)?;
                for (k, child) in shape.children(level, j).enumerate() {
                    let phys = decode_child(&block, k);
                    s.map.set_node(
                        level - 1,
                        child,
                        Loc {
                            phys,
                            coord: coord_of(&s, phys)?,
                        },
                    );
                }
            }
        }
        for j in 0..shape.nodes_at(0) {
            let block = disk.read_data(s.map.node(0, j).phys, &key)?;
            for id in shape.leaf_range(j) {
                let loc = decode_leaf_entry(&block, &shape, id, cols)?;
                s.map.set_entry(id, loc);
            }
        }
        let nodes: Vec<Loc> = s.map.nodes().map(|(_, _, loc)| loc).collect();
        for loc in nodes {
            s.owners[loc.phys as usize] = Owner::Node;
        }
        for id in 0..shape.capacity() {
            let loc = s.map.entry(id);
            let displaced = s.stash.get(id).is_some_and(|e| e.displaced);
            if loc.is_null() || displaced {
                continue;
            }
            if coord_of(&s, loc.phys)? != loc.coord || s.owners[loc.phys as usize] != Owner::Free {
                return Err(Error::Corrupt(format!("leaf entry for id {id}")));
            }
            s.owners[loc.phys as usize] = Owner::Data(id);
        }
        for a in 0..n {
            if s.slot_of[a as usize] != NULL_SLOT && s.owners[a as usize] == Owner::Free {
                s.owners[a as usize] = Owner::Filler;
                s.add_filler(a);
            }
        }
        Ok(s)
    }

    pub fn config(&self) -> &OramConfig {
        &self.config
    }

    pub fn key(&self) -> &VolumeKey {
        &self.key
    }

    pub fn capacity(&self) -> u64 {
        self.map.shape().capacity()
    }

    pub fn depth(&self) -> usize {
        self.map.shape().depth()
    }

    pub fn shape(&self) -> &TreeShape {
        self.map.shape()
    }

    pub fn maps(&self) -> &FreeMaps {
        &self.maps
    }

    #[doc(hidden)]
    pub fn maps_mut(&mut self) -> &mut FreeMaps {
        &mut self.maps
    }

    pub fn position_map(&self) -> &PositionMap {
        &self.map
    }

    pub fn stash(&self) -> &Stash {
        &self.stash
    }

    pub fn stats(&self) -> OramStats {
        self.stats
    }

    pub fn filler_count(&self) -> usize {
        self.fillers.len()
    }

    /// Blocks written per hidden write on this state.
    pub fn write_shape(&self) -> RegionCounts {
        write_shape(self.config.k, self.depth(), self.config.bitmap)
    }

    /// Stash slots held by a queue outside the ORAM.
    pub fn set_reserved(&mut self, reserved: usize) {
        self.reserved = reserved;
    }

    /// Starts or stops capturing per-run ground truth.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = if on { Some(Vec::new()) } else { None };
    }

    pub fn take_records(&mut self) -> Vec<RunRecord> {
        self.recording
            .as_mut()
            .map(std::mem::take)
            .unwrap_or_default()
    }

    fn set_owner(&mut self, a: u64, owner: Owner, slot: usize) {
        self.owners[a as usize] = owner;
        self.slot_of[a as usize] = slot as u32;
    }

    fn set_free(&mut self, a: u64) {
        self.owners[a as usize] = Owner::Free;
        self.slot_of[a as usize] = NULL_SLOT;
    }

    fn add_filler(&mut self, a: u64) {
        self.filler_at[a as usize] = self.fillers.len() as u32;
        self.fillers.push(a);
    }

    fn remove_filler(&mut self, a: u64) {
        let i = self.filler_at[a as usize] as usize;
        let last = *self.fillers.last().expect("filler present");
        self.fillers.swap_remove(i);
        if last != a {
            self.filler_at[last as usize] = i as u32;
        }
        self.filler_at[a as usize] = NULL_SLOT;
    }

    fn coord_of(&self, a: u64) -> NfbmCoord {
        self.maps.nfbm.coord(self.slot_of[a as usize] as usize)
    }

    fn check_id(&self, id: u64) -> Result<()> {
        if id >= self.capacity() {
            return Err(Error::IdOutOfRange {
                id,
                capacity: self.capacity(),
            });
        }
        Ok(())
    }

    fn root_idx(&self) -> u64 {
        self.geometry.region_start(Region::RootPointer)
    }

    fn write_root(
        &self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<()> {
        disk.write_meta(
            self.root_idx(),
            &self.map.root().phys.to_le_bytes(),
            key,
            rng,
        )
    }

    fn read_root(&self, disk: &mut Disk) -> Result<u64> {
        let payload = disk.read_meta(self.root_idx(), &self.key)?;
        let phys = u64::from_le_bytes(payload[..8].try_into().unwrap());
        if phys >= self.geometry.data_blocks() {
            return Err(Error::Corrupt("root pointer".into()));
        }
        Ok(phys)
    }

    /// Reads a hidden block: stash first, then root pointer, tree path and data block.
    pub fn read(&mut self, disk: &mut Disk, id: u64) -> Result<Vec<u8>> {
        self.check_id(id)?;
        if let Some(e) = self.stash.get(id) {
            return Ok(e.data.clone());
        }
        let shape = self.map.shape().clone();
        let mut phys = self.read_root(disk)?;
        for level in (1..shape.depth()).rev() {
            let block = disk.read_data(phys, &self.key)?;
            let k = shape.ancestor(id, level - 1) % shape.beta_internal();
            phys = decode_child(&block, k);
            if phys >= self.geometry.data_blocks() {
                return Err(Error::Corrupt(format!("tree node at level {level}")));
            }
        }
        let leaf = disk.read_data(phys, &self.key)?;
        let loc = decode_leaf_entry(&leaf, &shape, id, self.maps.nfbm.cols())?;
        if loc.is_null() {
            return Err(Error::Unwritten(id));
        }
        disk.read_data(loc.phys, &self.key)
    }

    /// Queues `data` for `id` in the stash and runs one write.
    pub fn write(
        &mut self,
        disk: &mut Disk,
        id: u64,
        data: Vec<u8>,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<()> {
        self.check_id(id)?;
        if data.len() != self.geometry.block_size() {
            return Err(Error::BadLength {
                expected: self.geometry.block_size(),
                got: data.len(),
            });
        }
        self.stash.upsert(id, data, false, self.reserved)?;
        self.write_step(disk, rng)
    }

    /// One full write that only drains the stash.
    pub fn write_step(&mut self, disk: &mut Disk, rng: &mut dyn CryptoRngCore) -> Result<()> {
        let key = self.key.clone();
        let k = self.config.k;
        let depth = self.depth();
        let tags: Vec<Vec<Tag>> = (0..=depth).map(|_| draw_tags(k, rng)).collect();
        let budgets: Vec<usize> = tags[1..]
            .iter()
            .map(|t| t.iter().filter(|x| matches!(x, Tag::Free(_))).count())
            .collect();
        let mut dirty: Vec<Vec<usize>> = vec![Vec::new(); depth];
        self.data_run(disk, &key, rng, &tags[0], &budgets, &mut dirty)?;
        for level in 0..depth {
            self.node_run(disk, &key, rng, level, &tags[level + 1], &dirty[level])?;
        }
        self.write_root(disk, &key, rng)?;
        self.stats.writes += 1;
        Ok(())
    }

    /// Draws the free set and the other set for one run.
    fn draw_sets(
        &self,
        pfl: &Pfl,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<(Vec<SelectionReceipt>, Vec<OtherPick>)> {
        let k = self.config.k;
        let mut free = self.maps.fbm.sample_distinct(k, rng)?;
        let other = match self.config.protocol {
            SelectionProtocol::Combined => self
                .maps
                .nfbm
                .sample_occupied(k, rng)?
                .into_iter()
                .map(|s| (self.maps.nfbm.addr_at(s), s))
                .collect(),
            SelectionProtocol::BiasedLegacy => {
                let mut random = sample_non_public(pfl, k, rng)?;
                loop {
                    let dup = random
                        .iter()
                        .position(|a| free.iter().any(|r| r.address == *a));
                    let Some(i) = dup else { break };
                    if rng.gen_bool(0.5) {
                        let fi = free.iter().position(|r| r.address == random[i]).unwrap();
                        free[fi] = loop {
                            let r = self.maps.fbm.select_random(rng)?;
                            if !free.iter().any(|x| x.address == r.address)
                                && !random.contains(&r.address)
                            {
                                break r;
                            }
                        };
                    } else {
                        random[i] = loop {
                            let a = pfl.random_free(rng)?;
                            if !free.iter().any(|x| x.address == a) && !random.contains(&a) {
                                break a;
                            }
                        };
                    }
                }
                random
                    .into_iter()
                    .map(|a| (a, self.slot_of[a as usize] as usize))
                    .collect()
            }
        };
        Ok((free, other))
    }

    fn record_begin(&mut self) {
        if let Some(records) = self.recording.as_mut() {
            let mut free = vec![false; self.geometry.data_blocks() as usize];
            for a in self.maps.fbm.valid_entries() {
                free[a as usize] = true;
            }
            records.push(RunRecord {
                free_before: free,
                touched: Vec::new(),
            });
        }
    }

    fn record_touch(&mut self, a: u64) {
        if let Some(r) = self.recording.as_mut().and_then(|v| v.last_mut()) {
            r.touched.push(a);
        }
    }

    fn touch_unused_free(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
        r: &SelectionReceipt,
    ) -> Result<()> {
        disk.reencrypt_data(r.address, key, rng)?;
        let probe = self.maps.nfbm.probe(rng);
        self.maps
            .write_nfbm_column(disk, key, rng, probe % self.maps.nfbm.cols())?;
        self.maps.write_fbm_column(disk, key, rng, r.col)
    }

    fn touch_other(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
        a: u64,
    ) -> Result<()> {
        disk.reencrypt_data(a, key, rng)?;
        self.touch_random_columns(disk, key, rng)
    }

    fn touch_random_columns(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<()> {
        let cols = self.maps.nfbm.cols();
        let (n, f) = (rng.gen_range(0..cols), rng.gen_range(0..cols));
        self.maps.write_nfbm_column(disk, key, rng, n)?;
        self.maps.write_fbm_column(disk, key, rng, f)
    }

    /// Oldest stash entry whose tree path still fits the free picks of the node runs.
    fn fitting_entry(&self, budgets: &[usize], dirty: &[Vec<usize>]) -> Option<usize> {
        let shape = self.map.shape();
        self.stash.entries().iter().position(|e| {
            (0..shape.depth()).all(|level| {
                let a = shape.ancestor(e.id, level);
                let extra = usize::from(!dirty[level].contains(&a));
                dirty[level].len() + extra <= budgets[level]
            })
        })
    }

    /// Returns a filler to the FBM in place of the receipt's entry, or compacts when none remain.
    fn release_or_compact(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
        r: &SelectionReceipt,
    ) -> Result<Option<DonorMove>> {
        if self.fillers.is_empty() {
            return self.maps.fbm_invalidate(disk, key, rng, r);
        }
        let f = self.fillers[rng.gen_range(0..self.fillers.len())];
        let coord = self.coord_of(f);
        self.remove_filler(f);
        self.maps.fbm_replace(disk, key, rng, r, f)?;
        self.maps.nfbm_mark_free(disk, key, rng, coord)?;
        self.set_free(f);
        Ok(None)
    }

    /// Removes a free pick taken by public data, shrinking whichever of the free and occupied
    /// pools is larger.
    fn release_public_pick(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
        r: &SelectionReceipt,
    ) -> Result<Option<DonorMove>> {
        if self.maps.fbm.valid_count() > self.maps.nfbm.occupied_count() as u64 {
            return self.maps.fbm_invalidate(disk, key, rng, r);
        }
        self.release_or_compact(disk, key, rng, r)
    }

    fn data_run(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
        tags: &[Tag],
        budgets: &[usize],
        dirty: &mut [Vec<usize>],
    ) -> Result<()> {
        let (mut free, other) = self.draw_sets(disk.pfl(), rng)?;
        self.record_begin();
        self.maps.begin_batch();
        for &tag in tags {
            match tag {
                Tag::Free(j) => {
                    let r = free[j];
                    let probe = self.maps.nfbm.probe(rng);
                    let pick = if self.maps.nfbm.is_free(probe) {
                        self.fitting_entry(budgets, dirty)
                    } else {
                        None
                    };
                    match pick {
                        Some(i) => {
                            let entry = self.stash.take(i);
                            if let Some(mv) =
                                self.place_data(disk, key, rng, &r, probe, entry, dirty)?
                            {
                                free.iter_mut().for_each(|x| x.follow(&mv));
                            }
                        }
                        None => {
                            disk.reencrypt_data(r.address, key, rng)?;
                            self.maps.write_nfbm_column(
                                disk,
                                key,
                                rng,
                                probe % self.maps.nfbm.cols(),
                            )?;
                            self.maps.write_fbm_column(disk, key, rng, r.col)?;
                        }
                    }
                    self.record_touch(r.address);
                }
                Tag::Other(j) => {
                    self.touch_other(disk, key, rng, other[j].0)?;
                    self.record_touch(other[j].0);
                }
            }
            self.maps.end_round(disk, key, rng)?;
        }
        self.maps.end_batch(disk, key, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn place_data(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
        r: &SelectionReceipt,
        slot: usize,
        entry: StashEntry,
        dirty: &mut [Vec<usize>],
    ) -> Result<Option<DonorMove>> {
        let y = r.address;
        disk.write_data(y, &entry.data, key, rng)?;
        self.maps.nfbm_add_at(disk, key, rng, slot, y)?;
        let old = self.map.entry(entry.id);
        let mv = if entry.displaced || old.is_null() {
            self.release_or_compact(disk, key, rng, r)?
        } else {
            self.maps.fbm_replace(disk, key, rng, r, old.phys)?;
            self.maps.nfbm_mark_free(disk, key, rng, old.coord)?;
            self.set_free(old.phys);
            None
        };
        self.set_owner(y, Owner::Data(entry.id), slot);
        self.map.set_entry(
            entry.id,
            Loc {
                phys: y,
                coord: self.maps.nfbm.coord(slot),
            },
        );
        let shape = self.map.shape();
        for (level, nodes) in dirty.iter_mut().enumerate() {
            let a = shape.ancestor(entry.id, level);
            if !nodes.contains(&a) {
                nodes.push(a);
            }
        }
        self.stats.placed += 1;
        Ok(mv)
    }

    fn node_run(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
        level: usize,
        tags: &[Tag],
        nodes: &[usize],
    ) -> Result<()> {
        let (mut free, other) = self.draw_sets(disk.pfl(), rng)?;
        let mut pending = nodes.iter().copied();
        self.record_begin();
        self.maps.begin_batch();
        for &tag in tags {
            match tag {
                Tag::Free(j) => {
                    let r = free[j];
                    match pending.next() {
                        Some(node) => {
                            if let Some(mv) = self.place_node(disk, key, rng, &r, level, node)? {
                                free.iter_mut().for_each(|x| x.follow(&mv));
                            }
                        }
                        None => self.touch_unused_free(disk, key, rng, &r)?,
                    }
                    self.record_touch(r.address);
                }
                Tag::Other(j) => {
                    self.touch_other(disk, key, rng, other[j].0)?;
                    self.record_touch(other[j].0);
                }
            }
            self.maps.end_round(disk, key, rng)?;
        }
        debug_assert!(pending.next().is_none(), "tree budget exceeded");
        self.maps.end_batch(disk, key, rng)
    }

    fn place_node(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
        r: &SelectionReceipt,
        level: usize,
        node: usize,
    ) -> Result<Option<DonorMove>> {
        let slot = self.probe_free_slot(rng);
        let y = r.address;
        let content = self.map.encode_node(
            level,
            node,
            self.geometry.block_size(),
            self.maps.nfbm.cols(),
        );
        disk.write_data(y, &content, key, rng)?;
        self.maps.nfbm_add_at(disk, key, rng, slot, y)?;
        let old = self.map.node(level, node);
        self.maps.fbm_replace(disk, key, rng, r, old.phys)?;
        self.maps.nfbm_mark_free(disk, key, rng, old.coord)?;
        self.set_free(old.phys);
        self.map.set_node(
            level,
            node,
            Loc {
                phys: y,
                coord: self.maps.nfbm.coord(slot),
            },
        );
        self.set_owner(y, Owner::Node, slot);
        Ok(None)
    }

    /// Write-shaped pass that only reencrypts. Each run draws its picks through the selection
    /// protocol and touches them as unused picks. Hidden plaintext is unchanged.
    pub fn simulate(&mut self, disk: &mut Disk, rng: &mut dyn CryptoRngCore) -> Result<()> {
        let key = self.key.clone();
        let k = self.config.k;
        for _ in 0..=self.depth() {
            let tags = draw_tags(k, rng);
            let (free, other) = self.draw_sets(disk.pfl(), rng)?;
            self.maps.begin_batch();
            for tag in tags {
                match tag {
                    Tag::Free(j) => self.touch_unused_free(disk, &key, rng, &free[j])?,
                    Tag::Other(j) => self.touch_other(disk, &key, rng, other[j].0)?,
                }
                self.maps.simulate_round(disk, &key, rng)?;
            }
            self.maps.end_batch(disk, &key, rng)?;
        }
        self.write_root(disk, &key, rng)?;
        self.stats.simulations += 1;
        Ok(())
    }

    /// Places public data through one selection run and returns its block.
    ///
    /// A free pick receives the data directly. With no free pick, an occupied pick holding a
    /// filler or hidden data is overwritten and its hidden content moves to the stash.
    pub fn place_public(
        &mut self,
        disk: &mut Disk,
        data: &[u8],
        rng: &mut dyn CryptoRngCore,
    ) -> Result<u64> {
        let key = self.key.clone();
        let k = self.config.k;
        let (tags, mut free, other, target) = loop {
            let tags = draw_tags(k, rng);
            let (free, other) = self.draw_sets(disk.pfl(), rng)?;
            let stash_room = self.stash.len() + self.reserved < self.stash.capacity();
            let target = tags
                .iter()
                .position(|t| matches!(t, Tag::Free(_)))
                .or_else(|| {
                    tags.iter().position(|t| match t {
                        Tag::Other(j) => match self.owners[other[*j].0 as usize] {
                            Owner::Filler => true,
                            Owner::Data(_) => stash_room,
                            _ => false,
                        },
                        Tag::Free(_) => false,
                    })
                });
            if let Some(t) = target {
                break (tags, free, other, t);
            }
        };
        let mut placed = NULL_ADDR;
        self.record_begin();
        self.maps.begin_batch();
        for (round, &tag) in tags.iter().enumerate() {
            match tag {
                Tag::Free(j) if round == target => {
                    let r = free[j];
                    disk.write_public(r.address, data, rng)?;
                    if let Some(mv) = self.release_public_pick(disk, &key, rng, &r)? {
                        free.iter_mut().for_each(|x| x.follow(&mv));
                    }
                    let col = rng.gen_range(0..self.maps.nfbm.cols());
                    self.maps.write_nfbm_column(disk, &key, rng, col)?;
                    placed = r.address;
                }
                Tag::Other(j) if round == target => {
                    let v = other[j].0;
                    self.evict(disk, &key, rng, v)?;
                    disk.write_public(v, data, rng)?;
                    self.touch_random_columns(disk, &key, rng)?;
                    placed = v;
                }
                Tag::Free(j) => {
                    let r = free[j];
                    self.touch_unused_free(disk, &key, rng, &r)?;
                }
                Tag::Other(j) => self.touch_other(disk, &key, rng, other[j].0)?,
            }
            let touched = match tag {
                Tag::Free(j) => free[j].address,
                Tag::Other(j) => other[j].0,
            };
            self.record_touch(touched);
            self.maps.end_round(disk, &key, rng)?;
        }
        self.maps.end_batch(disk, &key, rng)?;
        Ok(placed)
    }

    fn evict(
        &mut self,
        disk: &mut Disk,
        key: &VolumeKey,
        rng: &mut dyn CryptoRngCore,
        v: u64,
    ) -> Result<()> {
        match self.owners[v as usize] {
            Owner::Data(id) => {
                if self.stash.get(id).is_some() {
                    let data = self.stash.get(id).unwrap().data.clone();
                    self.stash.upsert(id, data, true, self.reserved)?;
                } else {
                    let plain = disk.read_data(v, key)?;
                    self.stash.upsert(id, plain, true, self.reserved)?;
                }
            }
            Owner::Filler => self.remove_filler(v),
            other => unreachable!("eviction of {other:?}"),
        }
        let coord = self.coord_of(v);
        self.maps.nfbm_mark_free(disk, key, rng, coord)?;
        self.set_free(v);
        self.stats.evictions += 1;
        Ok(())
    }

    /// Persists every free-map block and the root pointer.
    pub fn flush(&mut self, disk: &mut Disk, rng: &mut dyn CryptoRngCore) -> Result<()> {
        let key = self.key.clone();
        self.maps.flush_all(disk, &key, rng)?;
        self.write_root(disk, &key, rng)
    }

    /// Structural invariants over the trusted state.
    pub fn audit(&self, pfl: &Pfl) -> Vec<Check> {
        let n = self.geometry.data_blocks() as usize;
        let fbm = &self.maps.fbm;
        let nfbm = &self.maps.nfbm;
        let mut in_fbm = vec![false; n];
        let mut fbm_distinct = true;
        for a in fbm.valid_entries() {
            if a as usize >= n || in_fbm[a as usize] {
                fbm_distinct = false;
                continue;
            }
            in_fbm[a as usize] = true;
        }
        let occupied: Vec<u64> = nfbm.occupied_slots().map(|s| nfbm.addr_at(s)).collect();
        let disjoint = occupied
            .iter()
            .all(|&a| (a as usize) < n && !in_fbm[a as usize]);
        let public = (0..n as u64).filter(|&a| pfl.is_public(a)).count();
        let accounting = fbm.valid_count() as usize + nfbm.occupied_count() + public == n;
        let owners_ok = occupied.iter().all(|&a| {
            (a as usize) < n
                && self.owners[a as usize] != Owner::Free
                && nfbm.addr_at(self.slot_of[a as usize] as usize) == a
        }) && self.owners.iter().filter(|o| **o != Owner::Free).count()
            == occupied.len();
        let public_clear = (0..n)
            .all(|a| !pfl.is_public(a as u64) || (!in_fbm[a] && self.owners[a] == Owner::Free));
        vec![
            Check {
                name: "fbm-compactness",
                ok: fbm.is_compact(),
            },
            Check {
                name: "fbm-distinct",
                ok: fbm_distinct,
            },
            Check {
                name: "fbm-nfbm-disjoint",
                ok: disjoint,
            },
            Check {
                name: "block-accounting",
                ok: accounting,
            },
            Check {
                name: "owner-map",
                ok: owners_ok,
            },
            Check {
                name: "public-blocks-untracked",
                ok: public_clear,
            },
            Check {
                name: "stash-bound",
                ok: self.stash.len() + self.reserved <= self.stash.capacity(),
            },
        ]
    }

    /// Stash replacement for persistence.
    pub(crate) fn stash_mut(&mut self) -> &mut Stash {
        &mut self.stash
    }
}

/// `k` items out of the shuffled combination of `k` free and `k` other candidates.
fn draw_tags(k: usize, rng: &mut dyn CryptoRngCore) -> Vec<Tag> {
    let mut tags: Vec<Tag> = (0..k)
        .map(Tag::Free)
        .chain((0..k).map(Tag::Other))
        .collect();
    tags.shuffle(rng);
    tags.truncate(k);
    tags
}

/// `k` distinct uniformly random non-public data blocks.
pub fn sample_non_public(pfl: &Pfl, k: usize, rng: &mut dyn CryptoRngCore) -> Result<Vec<u64>> {
    let len = pfl.fma_len() as usize;
    if len < k {
        return Err(Error::PublicFull);
    }
    Ok(rand::seq::index::sample(rng, len, k)
        .into_iter()
        .map(|i| pfl.fma_get(i as u64))
        .collect())
}

/// Write-shaped pass for a device without a hidden volume: the same regions receive random bytes.
pub fn simulate_unkeyed(
    disk: &mut Disk,
    k: usize,
    depth: usize,
    bitmap: BitmapMode,
    rng: &mut dyn CryptoRngCore,
) -> Result<()> {
    for _ in 0..=depth {
        for a in sample_non_public(disk.pfl(), k, rng)? {
            disk.randomize_data(a, rng)?;
            randomize_round_metadata(disk, bitmap, rng)?;
        }
        randomize_run_end(disk, rng)?;
    }
    randomize_root_pointer(disk, rng)
}

/// Free-map writes of one selection round, as random bytes: one column of each matrix and the
/// bitmap pair.
pub fn randomize_round_metadata(
    disk: &mut Disk,
    bitmap: BitmapMode,
    rng: &mut dyn CryptoRngCore,
) -> Result<()> {
    let g = *disk.geometry();
    let cols = g.matrix_cols() as u64;
    disk.randomize_block(
        g.region_start(Region::NfbmColumns) + rng.gen_range(0..cols),
        rng,
    )?;
    disk.randomize_block(
        g.region_start(Region::FbmColumns) + rng.gen_range(0..cols),
        rng,
    )?;
    if bitmap == BitmapMode::OnDisk {
        let (x, y) = random_pair(g.bitmap_blocks() as u64, rng);
        let bm = g.region_start(Region::Bitmap);
        disk.randomize_block(bm + x, rng)?;
        disk.randomize_block(bm + y, rng)?;
    }
    Ok(())
}

/// Header write closing one selection run, as random bytes.
pub fn randomize_run_end(disk: &mut Disk, rng: &mut dyn CryptoRngCore) -> Result<()> {
    let idx = disk.geometry().region_start(Region::FbmHeader);
    disk.randomize_block(idx, rng)
}

pub fn randomize_root_pointer(disk: &mut Disk, rng: &mut dyn CryptoRngCore) -> Result<()> {
    let idx = disk.geometry().region_start(Region::RootPointer);
    disk.randomize_block(idx, rng)
}

fn random_pair(m: u64, rng: &mut dyn CryptoRngCore) -> (u64, u64) {
    if m == 1 {
        return (0, 0);
    }
    let a = rng.gen_range(0..m);
    let b = rng.gen_range(0..m - 1);
    (a, if b >= a { b + 1 } else { b })
}

/// Standalone ORAM over a whole device: half the data region is hidden-occupied.
pub struct DlOram {
    disk: Disk,
    state: OramState,
}

impl DlOram {
    /// Formats `store` and bulk-loads random content for every id.
    pub fn format(
        store: BlockStore,
        key: VolumeKey,
        config: OramConfig,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<Self> {
        let g = *store.geometry();
        let public = VolumeKey::random(KeyRole::Throwaway, rng);
        let mut disk = Disk::new(store, public, Pfl::new_all_free(g.data_blocks()));
        disk.randomize_ivs(rng);
        let budget = g.data_blocks() / 2;
        let shape = TreeShape::largest_within(budget, g.beta_leaf(), g.beta_internal());
        let state = OramState::init(&mut disk, key, config, shape, budget, rng)?;
        Ok(DlOram { disk, state })
    }

    pub fn read(&mut self, id: u64) -> Result<Vec<u8>> {
        self.state.read(&mut self.disk, id)
    }

    pub fn write(&mut self, id: u64, data: Vec<u8>, rng: &mut dyn CryptoRngCore) -> Result<()> {
        self.state.write(&mut self.disk, id, data, rng)
    }

    pub fn write_step(&mut self, rng: &mut dyn CryptoRngCore) -> Result<()> {
        self.state.write_step(&mut self.disk, rng)
    }

    pub fn simulate(&mut self, rng: &mut dyn CryptoRngCore) -> Result<()> {
        self.state.simulate(&mut self.disk, rng)
    }

    pub fn state(&self) -> &OramState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut OramState {
        &mut self.state
    }

    pub fn disk(&self) -> &Disk {
        &self.disk
    }

    pub fn parts_mut(&mut self) -> (&mut Disk, &mut OramState) {
        (&mut self.disk, &mut self.state)
    }

    pub fn store_mut(&mut self) -> &mut BlockStore {
        self.disk.store_mut()
    }

    pub fn geometry(&self) -> &DeviceGeometry {
        self.disk.geometry()
    }

    pub fn audit(&self) -> Vec<Check> {
        self.state.audit(self.disk.pfl())
    }
}

#[cfg(test)]
mod tests;
