// SPDX-License-Identifier: Apache-2.0

//! Two-volume device: a public volume placed at random through the public position map, and
//! an optional hidden volume inside the write-only ORAM.
//!
//! A device formatted without a hidden password still runs the ORAM initialization under a
//! throwaway key, and every later hidden step becomes a write-shaped pass of random bytes. The
//! per-operation write counts of the two modes are equal.

mod ppm;

pub use ppm::Ppm;

use std::collections::VecDeque;

use rand::Rng;
use rand_core::CryptoRngCore;

use crate::block_store::{BlockStore, DeviceGeometry, Region, STASH_BLOCKS, SUPERBLOCK_EXT_OFFSET};
use crate::crypto::{open_meta, KdfParams, KeyRole, VolumeKey, SALT_LEN};
use crate::disk::Disk;
use crate::error::{Error, Result};
use crate::freemaps::BitmapMode;
use crate::oram::{
    randomize_root_pointer, randomize_round_metadata, randomize_run_end, sample_non_public,
    simulate_unkeyed, Check, OramConfig, OramState, SelectionProtocol, Stash, TreeShape,
    STASH_CAPACITY,
};
use crate::pfl::Pfl;

const PUBLIC_MAGIC: &[u8; 4] = b"DLRP";
const PUBLIC_VERSION: u32 = 1;
const EXT_LEN: usize = 12 + 2 * SALT_LEN;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    OnlyPub,
    PubHid,
}

/// How many hidden steps accompany public writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhiPolicy {
    /// This many hidden steps after every public write.
    PerWrite(u32),
    /// One hidden step after every n-th public write.
    EveryNth(u32),
    /// One hidden step after every in-place public update; inserts carry none.
    UpdatesOnly,
}

impl Default for PhiPolicy {
    fn default() -> Self {
        PhiPolicy::PerWrite(1)
    }
}

/// Parameters fixed at format time.
#[derive(Clone, Debug)]
pub struct FormatOptions {
    pub public_password: Vec<u8>,
    pub hidden_password: Option<Vec<u8>>,
    pub kdf: KdfParams,
    pub k: usize,
    pub bitmap: BitmapMode,
}

impl FormatOptions {
    pub fn new(public_password: &[u8], hidden_password: Option<&[u8]>) -> Self {
        FormatOptions {
            public_password: public_password.to_vec(),
            hidden_password: hidden_password.map(<[u8]>::to_vec),
            kdf: KdfParams::default(),
            k: OramConfig::default().k,
            bitmap: BitmapMode::OnDisk,
        }
    }

    pub fn with_kdf(mut self, kdf: KdfParams) -> Self {
        self.kdf = kdf;
        self
    }
}

/// Per-mount behaviour.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RuntimeConfig {
    pub phi: PhiPolicy,
    pub protocol: SelectionProtocol,
    /// Skips the simulated write when nothing hidden is pending. Breaks deniability; used only as
    /// a negative control.
    pub leaky_skip_simulation: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DeviceStats {
    pub public_inserts: u64,
    pub public_updates: u64,
    pub hidden_writes: u64,
    pub stash_flushes: u64,
    pub simulations: u64,
    pub skipped_steps: u64,
}

/// Public parameters sealed under the public key in superblock block 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct PublicHeader {
    public_blocks: u64,
    k: usize,
    bitmap: BitmapMode,
}

impl PublicHeader {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24);
        out.extend_from_slice(PUBLIC_MAGIC);
        out.extend_from_slice(&PUBLIC_VERSION.to_le_bytes());
        out.extend_from_slice(&self.public_blocks.to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        let b: u32 = match self.bitmap {
            BitmapMode::OnDisk => 0,
            BitmapMode::InMemory => 1,
        };
        out.extend_from_slice(&b.to_le_bytes());
        out
    }

    fn decode(p: &[u8]) -> Result<Self> {
        if &p[..4] != PUBLIC_MAGIC {
            return Err(Error::Auth);
        }
        let u32_at = |o: usize| u32::from_le_bytes(p[o..o + 4].try_into().unwrap());
        if u32_at(4) != PUBLIC_VERSION {
            return Err(Error::Corrupt("public header version".into()));
        }
        let bitmap = match u32_at(20) {
            0 => BitmapMode::OnDisk,
            1 => BitmapMode::InMemory,
            _ => return Err(Error::Corrupt("public header bitmap mode".into())),
        };
        Ok(PublicHeader {
            public_blocks: u64::from_le_bytes(p[8..16].try_into().unwrap()),
            k: u32_at(16) as usize,
            bitmap,
        })
    }
}

struct SuperExt {
    kdf: KdfParams,
    salt_pub: [u8; SALT_LEN],
    salt_hid: [u8; SALT_LEN],
}

impl SuperExt {
    fn write(&self, block: &mut [u8]) {
        let o = SUPERBLOCK_EXT_OFFSET;
        block[o..].fill(0);
        block[o..o + 4].copy_from_slice(&self.kdf.m_cost_kib.to_le_bytes());
        block[o + 4..o + 8].copy_from_slice(&self.kdf.t_cost.to_le_bytes());
        block[o + 8..o + 12].copy_from_slice(&self.kdf.p_cost.to_le_bytes());
        block[o + 12..o + 12 + SALT_LEN].copy_from_slice(&self.salt_pub);
        block[o + 12 + SALT_LEN..o + EXT_LEN].copy_from_slice(&self.salt_hid);
    }

    fn read(block: &[u8]) -> Self {
        let o = SUPERBLOCK_EXT_OFFSET;
        let u32_at = |x: usize| u32::from_le_bytes(block[x..x + 4].try_into().unwrap());
        SuperExt {
            kdf: KdfParams {
                m_cost_kib: u32_at(o),
                t_cost: u32_at(o + 4),
                p_cost: u32_at(o + 8),
            },
            salt_pub: block[o + 12..o + 12 + SALT_LEN].try_into().unwrap(),
            salt_hid: block[o + 12 + SALT_LEN..o + EXT_LEN].try_into().unwrap(),
        }
    }
}

/// Default public volume size: a quarter of the data region.
pub fn public_capacity(g: &DeviceGeometry) -> u64 {
    g.data_blocks() / 4
}

/// Hidden volume tree: ids plus tree nodes fit in a quarter of the data region.
pub fn hidden_shape(g: &DeviceGeometry) -> TreeShape {
    TreeShape::largest_within(g.data_blocks() / 4, g.beta_leaf(), g.beta_internal())
}

/// A mounted device.
pub struct Device {
    disk: Disk,
    mode: Mode,
    header: PublicHeader,
    config: RuntimeConfig,
    ppm: Ppm,
    oram: Option<OramState>,
    queue: VecDeque<(u64, Vec<u8>)>,
    depth: usize,
    public_writes: u64,
    stats: DeviceStats,
}

impl Device {
    /// Formats `store` and returns the mounted device.
    pub fn format(
        mut store: BlockStore,
        opts: &FormatOptions,
        config: RuntimeConfig,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<Self> {
        let g = *store.geometry();
        if opts.k == 0 || (opts.k as u64) > g.data_blocks() / 8 {
            return Err(Error::InvalidArgument(format!(
                "k = {} is out of range",
                opts.k
            )));
        }
        let stash_bytes = Stash::new(STASH_CAPACITY).encoded_len_at_capacity(g.block_size());
        if stash_bytes > STASH_BLOCKS as usize * g.meta_payload() {
            return Err(Error::Geometry(
                "stash region too small for this block size".into(),
            ));
        }
        let mut ext = SuperExt {
            kdf: opts.kdf,
            salt_pub: [0; SALT_LEN],
            salt_hid: [0; SALT_LEN],
        };
        rng.fill_bytes(&mut ext.salt_pub);
        rng.fill_bytes(&mut ext.salt_hid);
        let mut sb = store.superblock()?;
        ext.write(&mut sb);
        store.write_block(0, &sb)?;

        let public_key = VolumeKey::derive(
            KeyRole::Public,
            &opts.public_password,
            &ext.salt_pub,
            opts.kdf,
        )?;
        let header = PublicHeader {
            public_blocks: public_capacity(&g),
            k: opts.k,
            bitmap: opts.bitmap,
        };
        let mut disk = Disk::new(
            store,
            public_key.clone(),
            Pfl::new_all_free(g.data_blocks()),
        );
        disk.write_meta(
            g.region_start(Region::Superblock) + 1,
            &header.encode(),
            &public_key,
            rng,
        )?;
        disk.randomize_ivs(rng);
        let ppm = Ppm::new(header.public_blocks);
        for p in 0..ppm.pages(g.ppm_entries_per_page()) {
            write_ppm_page(&mut disk, &ppm, p, rng)?;
        }

        let hidden_key = match &opts.hidden_password {
            Some(pw) => VolumeKey::derive(KeyRole::Hidden, pw, &ext.salt_hid, opts.kdf)?,
            None => VolumeKey::random(KeyRole::Throwaway, rng),
        };
        let oram_config = OramConfig {
            k: opts.k,
            stash_capacity: STASH_CAPACITY,
            protocol: config.protocol,
            bitmap: opts.bitmap,
        };
        let shape = hidden_shape(&g);
        let depth = shape.depth();
        let state = OramState::init(
            &mut disk,
            hidden_key,
            oram_config,
            shape,
            g.data_blocks() / 2,
            rng,
        )?;
        let (mode, oram) = if opts.hidden_password.is_some() {
            (Mode::PubHid, Some(state))
        } else {
            drop(state);
            (Mode::OnlyPub, None)
        };
        let mut dev = Device {
            disk,
            mode,
            header,
            config,
            ppm,
            oram,
            queue: VecDeque::new(),
            depth,
            public_writes: 0,
            stats: DeviceStats::default(),
        };
        dev.write_stash_region(rng)?;
        Ok(dev)
    }

    /// Opens a formatted device. A missing or wrong hidden password mounts the public volume only.
    pub fn mount(
        mut store: BlockStore,
        public_password: &[u8],
        hidden_password: Option<&[u8]>,
        config: RuntimeConfig,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<Self> {
        let g = *store.geometry();
        let ext = SuperExt::read(&store.superblock()?);
        let public_key =
            VolumeKey::derive(KeyRole::Public, public_password, &ext.salt_pub, ext.kdf)?;
        let header = PublicHeader::decode(&open_meta(&public_key, &store.read_block(1)?))?;
        if header.public_blocks > g.ppm_capacity() || header.k == 0 {
            return Err(Error::Corrupt("public header".into()));
        }
        let pfl = Disk::load_pfl(&mut store, &public_key)?;
        if !pfl.check_bijection() {
            return Err(Error::Corrupt("public free list".into()));
        }
        let mut disk = Disk::new(store, public_key.clone(), pfl);
        let per = g.ppm_entries_per_page();
        let mut pages = Vec::new();
        for p in 0..(header.public_blocks as usize).div_ceil(per) {
            pages.push(disk.read_meta(g.region_start(Region::Ppm) + p as u64, &public_key)?);
        }
        let ppm = Ppm::decode(&pages, header.public_blocks, per, g.data_blocks())?;
        if ppm.iter_mapped().any(|(_, a)| !disk.pfl().is_public(a)) {
            return Err(Error::Corrupt(
                "public map disagrees with the free list".into(),
            ));
        }
        let shape = hidden_shape(&g);
        let depth = shape.depth();
        let mut oram = None;
        if let Some(pw) = hidden_password {
            let key = VolumeKey::derive(KeyRole::Hidden, pw, &ext.salt_hid, ext.kdf)?;
            if let Some(stash) = read_stash(&mut disk, &key)? {
                let oram_config = OramConfig {
                    k: header.k,
                    stash_capacity: STASH_CAPACITY,
                    protocol: config.protocol,
                    bitmap: header.bitmap,
                };
                oram = Some(OramState::load(&mut disk, key, oram_config, shape, stash)?);
            }
        }
        let mode = if oram.is_some() {
            Mode::PubHid
        } else {
            Mode::OnlyPub
        };
        let mut dev = Device {
            disk,
            mode,
            header,
            config,
            ppm,
            oram,
            queue: VecDeque::new(),
            depth,
            public_writes: 0,
            stats: DeviceStats::default(),
        };
        dev.write_stash_region(rng)?;
        Ok(dev)
    }

    /// Persists the free maps and the stash (or random bytes) and releases the image.
    pub fn unmount(mut self, rng: &mut dyn CryptoRngCore) -> Result<BlockStore> {
        match self.oram.as_mut() {
            Some(o) => {
                while let Some((id, data)) = self.queue.pop_front() {
                    o.set_reserved(self.queue.len());
                    o.stash_mut().upsert(id, data, false, self.queue.len())?;
                }
                o.flush(&mut self.disk, rng)?;
            }
            None => {
                let g = *self.disk.geometry();
                for r in [
                    Region::FbmColumns,
                    Region::FbmHeader,
                    Region::NfbmColumns,
                    Region::Bitmap,
                ] {
                    for idx in g.region_range(r) {
                        self.disk.randomize_block(idx, rng)?;
                    }
                }
                randomize_root_pointer(&mut self.disk, rng)?;
            }
        }
        self.write_stash_region(rng)?;
        let mut store = self.disk.into_store();
        store.sync()?;
        Ok(store)
    }

    fn write_stash_region(&mut self, rng: &mut dyn CryptoRngCore) -> Result<()> {
        let g = *self.disk.geometry();
        let start = g.region_start(Region::Stash);
        match &self.oram {
            Some(o) => {
                let payload = g.meta_payload();
                let mut bytes = o.stash().encode();
                bytes.resize(STASH_BLOCKS as usize * payload, 0);
                let key = o.key().clone();
                for (i, chunk) in bytes.chunks_exact(payload).enumerate() {
                    self.disk.write_meta(start + i as u64, chunk, &key, rng)?;
                }
            }
            None => {
                for i in 0..STASH_BLOCKS {
                    self.disk.randomize_block(start + i, rng)?;
                }
            }
        }
        Ok(())
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn geometry(&self) -> &DeviceGeometry {
        self.disk.geometry()
    }

    pub fn disk(&self) -> &Disk {
        &self.disk
    }

    pub fn store_mut(&mut self) -> &mut BlockStore {
        self.disk.store_mut()
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: RuntimeConfig) {
        self.config = config;
    }

    pub fn k(&self) -> usize {
        self.header.k
    }

    pub fn bitmap_mode(&self) -> BitmapMode {
        self.header.bitmap
    }

    /// Hidden tree depth; also fixes the write shape in public-only mode.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn ppm(&self) -> &Ppm {
        &self.ppm
    }

    pub fn public_capacity(&self) -> u64 {
        self.ppm.capacity()
    }

    pub fn hidden_capacity(&self) -> Option<u64> {
        self.oram.as_ref().map(OramState::capacity)
    }

    pub fn oram(&self) -> Option<&OramState> {
        self.oram.as_ref()
    }

    #[doc(hidden)]
    pub fn oram_mut(&mut self) -> Option<&mut OramState> {
        self.oram.as_mut()
    }

    pub fn stats(&self) -> DeviceStats {
        self.stats
    }

    /// Hidden writes waiting for a public write to carry them.
    pub fn pending_hidden(&self) -> usize {
        self.queue.len() + self.oram.as_ref().map_or(0, |o| o.stash().len())
    }

    fn check_block(&self, data: &[u8]) -> Result<()> {
        let b = self.disk.geometry().block_size();
        if data.len() != b {
            return Err(Error::BadLength {
                expected: b,
                got: data.len(),
            });
        }
        Ok(())
    }

    fn check_public_id(&self, id: u64) -> Result<()> {
        if id >= self.ppm.capacity() {
            return Err(Error::IdOutOfRange {
                id,
                capacity: self.ppm.capacity(),
            });
        }
        Ok(())
    }

    /// Reads one PPM page and one data block.
    pub fn public_read(&mut self, id: u64) -> Result<Vec<u8>> {
        self.check_public_id(id)?;
        let g = *self.disk.geometry();
        let per = g.ppm_entries_per_page();
        let key = self.disk.public_key().clone();
        let page = self
            .disk
            .read_meta(g.region_start(Region::Ppm) + id / per as u64, &key)?;
        match Ppm::decode_entry(&page, id as usize % per) {
            Some(a) => self.disk.read_public(a),
            None => Err(Error::Unwritten(id)),
        }
    }

    /// Writes a public block, then runs the hidden steps the φ policy calls for.
    pub fn public_write(
        &mut self,
        id: u64,
        data: &[u8],
        rng: &mut dyn CryptoRngCore,
    ) -> Result<()> {
        self.check_public_id(id)?;
        self.check_block(data)?;
        let update = match self.ppm.get(id) {
            Some(a) => {
                self.disk.write_public(a, data, rng)?;
                self.stats.public_updates += 1;
                true
            }
            None => {
                self.insert(id, data, rng)?;
                self.stats.public_inserts += 1;
                false
            }
        };
        self.public_writes += 1;
        let steps = match self.config.phi {
            PhiPolicy::PerWrite(phi) => phi,
            PhiPolicy::EveryNth(n) => {
                u32::from(self.public_writes.is_multiple_of(u64::from(n.max(1))))
            }
            PhiPolicy::UpdatesOnly => u32::from(update),
        };
        for _ in 0..steps {
            self.hidden_step(rng)?;
        }
        Ok(())
    }

    fn insert(&mut self, id: u64, data: &[u8], rng: &mut dyn CryptoRngCore) -> Result<()> {
        if self.ppm.mapped() >= self.ppm.capacity() {
            return Err(Error::PublicFull);
        }
        let addr = match self.oram.as_mut() {
            Some(o) => o.place_public(&mut self.disk, data, rng)?,
            None => self.place_public_unkeyed(data, rng)?,
        };
        self.disk.fma_remove(addr, rng)?;
        self.ppm.set(id, addr);
        let page = id as usize / self.disk.geometry().ppm_entries_per_page();
        write_ppm_page(&mut self.disk, &self.ppm, page, rng)
    }

    /// Uniform non-public block; the selection run around it is mimicked with random bytes.
    fn place_public_unkeyed(&mut self, data: &[u8], rng: &mut dyn CryptoRngCore) -> Result<u64> {
        let picks = sample_non_public(self.disk.pfl(), self.header.k, rng)?;
        let target = rng.gen_range(0..picks.len());
        for (round, &a) in picks.iter().enumerate() {
            if round == target {
                self.disk.write_public(a, data, rng)?;
            } else {
                self.disk.randomize_data(a, rng)?;
            }
            randomize_round_metadata(&mut self.disk, self.header.bitmap, rng)?;
        }
        randomize_run_end(&mut self.disk, rng)?;
        Ok(picks[target])
    }

    /// One hidden write, stash flush or simulation.
    fn hidden_step(&mut self, rng: &mut dyn CryptoRngCore) -> Result<()> {
        let Some(o) = self.oram.as_mut() else {
            self.stats.simulations += 1;
            return simulate_unkeyed(
                &mut self.disk,
                self.header.k,
                self.depth,
                self.header.bitmap,
                rng,
            );
        };
        if let Some((id, data)) = self.queue.pop_front() {
            o.set_reserved(self.queue.len());
            self.stats.hidden_writes += 1;
            o.write(&mut self.disk, id, data, rng)
        } else if !o.stash().is_empty() {
            self.stats.stash_flushes += 1;
            o.write_step(&mut self.disk, rng)
        } else if self.config.leaky_skip_simulation {
            self.stats.skipped_steps += 1;
            Ok(())
        } else {
            self.stats.simulations += 1;
            o.simulate(&mut self.disk, rng)
        }
    }

    /// Queues a hidden write for the next hidden step.
    pub fn hidden_write(&mut self, id: u64, data: &[u8]) -> Result<()> {
        self.check_block(data)?;
        let o = self.oram.as_mut().ok_or(Error::NoHiddenVolume)?;
        if id >= o.capacity() {
            return Err(Error::IdOutOfRange {
                id,
                capacity: o.capacity(),
            });
        }
        if let Some(e) = self.queue.iter_mut().find(|(q, _)| *q == id) {
            e.1 = data.to_vec();
            return Ok(());
        }
        if self.queue.len() + o.stash().len() >= o.stash().capacity() {
            return Err(Error::StashOverflow {
                capacity: o.stash().capacity(),
            });
        }
        self.queue.push_back((id, data.to_vec()));
        o.set_reserved(self.queue.len());
        Ok(())
    }

    pub fn hidden_read(&mut self, id: u64) -> Result<Vec<u8>> {
        let o = self.oram.as_mut().ok_or(Error::NoHiddenVolume)?;
        if let Some((_, data)) = self.queue.iter().rev().find(|(q, _)| *q == id) {
            return Ok(data.clone());
        }
        o.read(&mut self.disk, id)
    }

    /// Drains pending hidden writes, pairing each hidden step with an in-place rewrite of a
    /// random public block. Returns the number of steps taken.
    pub fn sync_hidden(&mut self, max_steps: usize, rng: &mut dyn CryptoRngCore) -> Result<usize> {
        if self.oram.is_none() {
            return Err(Error::NoHiddenVolume);
        }
        let mut steps = 0;
        while self.pending_hidden() > 0 && steps < max_steps {
            let mapped = self.ppm.mapped();
            if mapped == 0 {
                return Err(Error::InvalidArgument(
                    "no public block to pair hidden writes with".into(),
                ));
            }
            let (_, addr) = self
                .ppm
                .iter_mapped()
                .nth(rng.gen_range(0..mapped) as usize)
                .expect("mapped entry");
            let data = self.disk.read_public(addr)?;
            self.disk.write_public(addr, &data, rng)?;
            self.hidden_step(rng)?;
            steps += 1;
        }
        Ok(steps)
    }

    /// Structural invariants. Hidden-side checks need the hidden volume mounted.
    pub fn audit(&self) -> Vec<Check> {
        let pfl = self.disk.pfl();
        let n = self.disk.geometry().data_blocks();
        let mut seen = std::collections::HashSet::new();
        let ppm_ok = self
            .ppm
            .iter_mapped()
            .all(|(_, a)| a < n && pfl.is_public(a) && seen.insert(a));
        let public = n - pfl.fma_len();
        let mut checks = vec![
            Check {
                name: "pfl-bijection",
                ok: pfl.check_bijection(),
            },
            Check {
                name: "ppm-matches-pfl",
                ok: ppm_ok && public == self.ppm.mapped(),
            },
        ];
        if let Some(o) = &self.oram {
            checks.extend(o.audit(pfl));
            let hidden = (o.maps().nfbm.occupied_count() - o.filler_count()) as u64;
            checks.push(Check {
                name: "occupancy-cap",
                ok: hidden + public <= n / 2,
            });
        }
        checks
    }
}

fn write_ppm_page(
    disk: &mut Disk,
    ppm: &Ppm,
    page: usize,
    rng: &mut dyn CryptoRngCore,
) -> Result<()> {
    let g = *disk.geometry();
    let payload = ppm.encode_page(page, g.ppm_entries_per_page(), g.meta_payload());
    let key = disk.public_key().clone();
    disk.write_meta(
        g.region_start(Region::Ppm) + page as u64,
        &payload,
        &key,
        rng,
    )
}

fn read_stash(disk: &mut Disk, key: &VolumeKey) -> Result<Option<Stash>> {
    let g = *disk.geometry();
    let start = g.region_start(Region::Stash);
    let first = disk.read_meta(start, key)?;
    if !Stash::has_magic(&first) {
        return Ok(None);
    }
    let mut bytes = first;
    for i in 1..STASH_BLOCKS {
        bytes.extend(disk.read_meta(start + i, key)?);
    }
    Stash::decode(&bytes, g.block_size(), STASH_CAPACITY)
}
