// SPDX-License-Identifier: Apache-2.0

//! Virtual block device with a fixed region layout, write tracing and snapshots.
//!
//! Block 0 carries the plaintext geometry header. Bytes from
//! [`SUPERBLOCK_EXT_OFFSET`] onward belong to the device layer.

mod geometry;
mod trace;

pub use geometry::{
    DeviceGeometry, Region, ADDR_SIZE, META_IV_LEN, MIN_BLOCK_SIZE, MIN_DATA_BLOCKS, NULL_ADDR,
    STASH_BLOCKS, SUPERBLOCK_BLOCKS,
};
pub use trace::{diff, OpLabel, RegionCounts, Snapshot, TraceEntry, WriteTrace};

use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use rand_core::RngCore;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SUPERBLOCK_MAGIC: &[u8; 4] = b"DLR1";
pub const FORMAT_VERSION: u32 = 1;
/// First byte of block 0 owned by the device layer.
pub const SUPERBLOCK_EXT_OFFSET: usize = 208;

/// Initial contents of a freshly created image.
pub enum Fill<'a> {
    Zero,
    Random(&'a mut dyn RngCore),
}

enum Backend {
    File { file: File, path: PathBuf },
    Memory(Vec<u8>),
}

/// Handle to a device image. Single writer, one operation at a time.
pub struct BlockStore {
    geometry: DeviceGeometry,
    backend: Backend,
    trace: Option<WriteTrace>,
    digests: Option<Vec<[u8; 32]>>,
    dirty: Vec<u64>,
    dirty_mark: Vec<bool>,
    reads: u64,
    writes: u64,
}

impl BlockStore {
    /// Opens `path` if it exists (geometry must match), otherwise creates a zero-filled image.
    pub fn open_or_create(path: impl AsRef<Path>, geometry: DeviceGeometry) -> Result<Self> {
        let path = path.as_ref();
        if path.exists() {
            let store = Self::open(path)?;
            if store.geometry != geometry {
                return Err(Error::Geometry(format!(
                    "image holds N={} B={}, requested N={} B={}",
                    store.geometry.data_blocks(),
                    store.geometry.block_size(),
                    geometry.data_blocks(),
                    geometry.block_size()
                )));
            }
            return Ok(store);
        }
        Self::create(path, geometry, Fill::Zero)
    }

    /// Creates (or truncates) an image, materializing every block.
    pub fn create(
        path: impl AsRef<Path>,
        geometry: DeviceGeometry,
        fill: Fill<'_>,
    ) -> Result<Self> {
        let path = path.as_ref();
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        let bs = geometry.block_size() as u64;
        let total = geometry.total_blocks() * bs;
        let mut chunk = vec![0u8; (1 << 20).min(total as usize)];
        let mut fill = fill;
        let mut offset = 0u64;
        while offset < total {
            let len = chunk.len().min((total - offset) as usize);
            if let Fill::Random(rng) = &mut fill {
                rng.fill_bytes(&mut chunk[..len]);
            }
            file.write_all_at(&chunk[..len], offset)?;
            offset += len as u64;
        }
        let mut store = BlockStore::with_backend(
            geometry,
            Backend::File {
                file,
                path: path.to_path_buf(),
            },
        );
        store.write_geometry_header()?;
        Ok(store)
    }

    /// Opens an existing image and reads its geometry from block 0.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let mut head = vec![0u8; MIN_BLOCK_SIZE];
        file.read_exact_at(&mut head, 0)
            .map_err(|_| Error::Corrupt("image shorter than a superblock".into()))?;
        let geometry = parse_geometry_header(&head)?;
        let expected = geometry.total_blocks() * geometry.block_size() as u64;
        if file.metadata()?.len() != expected {
            return Err(Error::Corrupt(format!(
                "image is {} bytes, geometry requires {expected}",
                file.metadata()?.len()
            )));
        }
        Ok(BlockStore::with_backend(
            geometry,
            Backend::File {
                file,
                path: path.to_path_buf(),
            },
        ))
    }

    /// In-memory image, for tests and simulations.
    pub fn memory(geometry: DeviceGeometry, fill: Fill<'_>) -> Result<Self> {
        let total = (geometry.total_blocks() * geometry.block_size() as u64) as usize;
        let mut bytes = vec![0u8; total];
        if let Fill::Random(rng) = fill {
            rng.fill_bytes(&mut bytes);
        }
        let mut store = BlockStore::with_backend(geometry, Backend::Memory(bytes));
        store.write_geometry_header()?;
        Ok(store)
    }

    fn with_backend(geometry: DeviceGeometry, backend: Backend) -> Self {
        BlockStore {
            geometry,
            backend,
            trace: None,
            digests: None,
            dirty: Vec::new(),
            dirty_mark: Vec::new(),
            reads: 0,
            writes: 0,
        }
    }

    fn write_geometry_header(&mut self) -> Result<()> {
        let mut block = self.read_raw(0)?;
        encode_geometry_header(&self.geometry, &mut block);
        self.write_raw(0, &block)
    }

    pub fn geometry(&self) -> &DeviceGeometry {
        &self.geometry
    }

    /// Backing file path, if file-backed.
    pub fn path(&self) -> Option<&Path> {
        match &self.backend {
            Backend::File { path, .. } => Some(path),
            Backend::Memory(_) => None,
        }
    }

    fn check(&self, idx: u64) -> Result<()> {
        let total = self.geometry.total_blocks();
        if idx >= total {
            return Err(Error::OutOfRange { index: idx, total });
        }
        Ok(())
    }

    fn read_raw(&self, idx: u64) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; self.geometry.block_size()];
        self.read_raw_into(idx, &mut buf)?;
        Ok(buf)
    }

    fn read_raw_into(&self, idx: u64, buf: &mut [u8]) -> Result<()> {
        let bs = self.geometry.block_size();
        match &self.backend {
            Backend::File { file, .. } => file.read_exact_at(buf, idx * bs as u64)?,
            Backend::Memory(bytes) => {
                let off = idx as usize * bs;
                buf.copy_from_slice(&bytes[off..off + bs]);
            }
        }
        Ok(())
    }

    fn write_raw(&mut self, idx: u64, data: &[u8]) -> Result<()> {
        let bs = self.geometry.block_size();
        match &mut self.backend {
            Backend::File { file, .. } => file.write_all_at(data, idx * bs as u64)?,
            Backend::Memory(bytes) => {
                let off = idx as usize * bs;
                bytes[off..off + bs].copy_from_slice(data);
            }
        }
        if self.digests.is_some() && !self.dirty_mark[idx as usize] {
            self.dirty_mark[idx as usize] = true;
            self.dirty.push(idx);
        }
        Ok(())
    }

    /// Reads one block.
    pub fn read_block(&mut self, idx: u64) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; self.geometry.block_size()];
        self.read_into(idx, &mut buf)?;
        Ok(buf)
    }

    /// Reads one block into `buf`, which must be exactly one block long.
    pub fn read_into(&mut self, idx: u64, buf: &mut [u8]) -> Result<()> {
        self.check(idx)?;
        if buf.len() != self.geometry.block_size() {
            return Err(Error::BadLength {
                expected: self.geometry.block_size(),
                got: buf.len(),
            });
        }
        self.read_raw_into(idx, buf)?;
        self.reads += 1;
        if let Some(trace) = &mut self.trace {
            trace.reads.push(TraceEntry::new(&self.geometry, idx));
        }
        Ok(())
    }

    /// Writes one block and records it in the active trace.
    pub fn write_block(&mut self, idx: u64, data: &[u8]) -> Result<()> {
        self.check(idx)?;
        if data.len() != self.geometry.block_size() {
            return Err(Error::BadLength {
                expected: self.geometry.block_size(),
                got: data.len(),
            });
        }
        self.write_raw(idx, data)?;
        self.writes += 1;
        if let Some(trace) = &mut self.trace {
            trace.writes.push(TraceEntry::new(&self.geometry, idx));
        }
        Ok(())
    }

    pub fn begin_trace(&mut self, label: OpLabel) -> Result<()> {
        if let Some(active) = &self.trace {
            return Err(Error::TraceActive(active.label.to_string()));
        }
        self.trace = Some(WriteTrace::new(label));
        Ok(())
    }

    pub fn end_trace(&mut self) -> Result<WriteTrace> {
        self.trace.take().ok_or(Error::NoTrace)
    }

    pub fn tracing(&self) -> bool {
        self.trace.is_some()
    }

    /// Total block reads and writes since the handle was opened.
    pub fn io_counts(&self) -> (u64, u64) {
        (self.reads, self.writes)
    }

    /// Digest of every block. Only blocks written since the previous snapshot are rehashed.
    pub fn snapshot(&mut self) -> Result<Snapshot> {
        let total = self.geometry.total_blocks() as usize;
        let mut buf = vec![0u8; self.geometry.block_size()];
        match self.digests.take() {
            None => {
                let mut digests = Vec::with_capacity(total);
                for idx in 0..total as u64 {
                    self.read_raw_into(idx, &mut buf)?;
                    digests.push(Sha256::digest(&buf).into());
                }
                self.digests = Some(digests);
                self.dirty_mark = vec![false; total];
            }
            Some(mut digests) => {
                for idx in std::mem::take(&mut self.dirty) {
                    self.read_raw_into(idx, &mut buf)?;
                    self.dirty_mark[idx as usize] = false;
                    digests[idx as usize] = Sha256::digest(&buf).into();
                }
                self.digests = Some(digests);
            }
        }
        Ok(Snapshot {
            geometry: self.geometry,
            digests: self.digests.clone().expect("digest cache present"),
        })
    }

    pub fn sync(&mut self) -> Result<()> {
        if let Backend::File { file, .. } = &self.backend {
            file.sync_data()?;
        }
        Ok(())
    }

    /// Raw block 0 without tracing, for superblock parsing.
    pub fn superblock(&self) -> Result<Vec<u8>> {
        self.read_raw(0)
    }
}

fn encode_geometry_header(g: &DeviceGeometry, block: &mut [u8]) {
    block[..SUPERBLOCK_EXT_OFFSET].fill(0);
    block[0..4].copy_from_slice(SUPERBLOCK_MAGIC);
    block[4..8].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    block[8..16].copy_from_slice(&g.data_blocks().to_le_bytes());
    block[16..20].copy_from_slice(&(g.block_size() as u32).to_le_bytes());
    block[20..24].copy_from_slice(&(g.addr_size() as u32).to_le_bytes());
    let table = g.region_table();
    block[24..28].copy_from_slice(&(table.len() as u32).to_le_bytes());
    for (i, (_, start, len)) in table.iter().enumerate() {
        let off = 28 + i * 16;
        block[off..off + 8].copy_from_slice(&start.to_le_bytes());
        block[off + 8..off + 16].copy_from_slice(&len.to_le_bytes());
    }
}

fn parse_geometry_header(block: &[u8]) -> Result<DeviceGeometry> {
    let u32_at = |off: usize| u32::from_le_bytes(block[off..off + 4].try_into().unwrap());
    let u64_at = |off: usize| u64::from_le_bytes(block[off..off + 8].try_into().unwrap());
    if &block[0..4] != SUPERBLOCK_MAGIC {
        return Err(Error::Corrupt("missing superblock magic".into()));
    }
    if u32_at(4) != FORMAT_VERSION {
        return Err(Error::Corrupt(format!("unsupported version {}", u32_at(4))));
    }
    if u32_at(20) as usize != ADDR_SIZE {
        return Err(Error::Corrupt("unsupported address size".into()));
    }
    let geometry = DeviceGeometry::new(u64_at(8), u32_at(16) as usize)
        .map_err(|e| Error::Corrupt(e.to_string()))?;
    let table = geometry.region_table();
    if u32_at(24) as usize != table.len() {
        return Err(Error::Corrupt("region table size mismatch".into()));
    }
    for (i, (_, start, len)) in table.iter().enumerate() {
        let off = 28 + i * 16;
        if u64_at(off) != *start || u64_at(off + 8) != *len {
            return Err(Error::Corrupt(
                "region table disagrees with geometry".into(),
            ));
        }
    }
    Ok(geometry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn small() -> DeviceGeometry {
        DeviceGeometry::new(256, 512).unwrap()
    }

    #[test]
    fn created_file_has_exact_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dev.img");
        let g = DeviceGeometry::with_blocks(16384).unwrap();
        let store = BlockStore::open_or_create(&path, g).unwrap();
        drop(store);
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, g.total_blocks() * 4096);
    }

    #[test]
    fn reopen_checks_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dev.img");
        let g = small();
        let mut store = BlockStore::open_or_create(&path, g).unwrap();
        store.write_block(7, &[9u8; 512]).unwrap();
        drop(store);
        let mut again = BlockStore::open_or_create(&path, g).unwrap();
        assert_eq!(again.read_block(7).unwrap(), vec![9u8; 512]);
        let other = DeviceGeometry::new(128, 512).unwrap();
        assert!(matches!(
            BlockStore::open_or_create(&path, other),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn length_and_range_errors() {
        let mut store = BlockStore::memory(small(), Fill::Zero).unwrap();
        assert!(matches!(
            store.write_block(3, &[0u8; 511]),
            Err(Error::BadLength { .. })
        ));
        let total = store.geometry().total_blocks();
        assert!(matches!(
            store.write_block(total, &[0u8; 512]),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn traces_record_writes_in_order() {
        let mut store = BlockStore::memory(small(), Fill::Zero).unwrap();
        store.begin_trace(OpLabel::PublicWrite).unwrap();
        assert!(store.begin_trace(OpLabel::PublicRead).is_err());
        let data_idx = store.geometry().data_block(3);
        for idx in [5, data_idx, 1] {
            store.write_block(idx, &[1u8; 512]).unwrap();
        }
        let t = store.end_trace().unwrap();
        let idxs: Vec<u64> = t.writes.iter().map(|e| e.index).collect();
        assert_eq!(idxs, vec![5, data_idx, 1]);
        assert_eq!(t.writes[1].region, Region::Data);
        assert!(matches!(store.end_trace(), Err(Error::NoTrace)));

        store.begin_trace(OpLabel::PublicWrite).unwrap();
        assert!(store.end_trace().unwrap().writes.is_empty());
    }

    #[test]
    fn snapshot_diff_matches_writes() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut store = BlockStore::memory(small(), Fill::Random(&mut rng)).unwrap();
        let a = store.snapshot().unwrap();
        let b = store.snapshot().unwrap();
        assert!(diff(&a, &b).unwrap().is_empty());
        store.write_block(40, &[3u8; 512]).unwrap();
        let c = store.snapshot().unwrap();
        assert_eq!(
            diff(&b, &c).unwrap().into_iter().collect::<Vec<_>>(),
            vec![40]
        );
        assert_eq!(c.digests.len() as u64, store.geometry().total_blocks());
    }

    #[test]
    fn open_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.img");
        std::fs::write(&path, vec![0u8; 4096]).unwrap();
        assert!(matches!(BlockStore::open(&path), Err(Error::Corrupt(_))));
    }
}
