// SPDX-License-Identifier: Apache-2.0

use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};

/// Per-block overhead of sealed metadata blocks: the IV sits in front of the ciphertext.
pub const META_IV_LEN: usize = 16;
/// Size of one on-disk block address.
pub const ADDR_SIZE: usize = 8;
/// Encoding of an absent address.
pub const NULL_ADDR: u64 = u64::MAX;
/// Fixed size of the stash region in blocks.
pub const STASH_BLOCKS: u64 = 64;
/// Size of the superblock region in blocks (plaintext header plus the sealed public check block).
pub const SUPERBLOCK_BLOCKS: u64 = 2;
/// Smallest supported block size.
pub const MIN_BLOCK_SIZE: usize = 256;
/// Smallest supported data region.
pub const MIN_DATA_BLOCKS: u64 = 64;

const RMA_ENTRY_LEN: usize = 24;
const LEAF_ENTRY_LEN: usize = 20;
const BITMAP_INDEX_LEN: usize = 8;

/// Named regions of the device image, in on-disk order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    Superblock,
    RootPointer,
    FbmColumns,
    FbmHeader,
    NfbmColumns,
    Bitmap,
    Fma,
    Rma,
    Ppm,
    Stash,
    Data,
}

impl Region {
    pub const ALL: [Region; 11] = [
        Region::Superblock,
        Region::RootPointer,
        Region::FbmColumns,
        Region::FbmHeader,
        Region::NfbmColumns,
        Region::Bitmap,
        Region::Fma,
        Region::Rma,
        Region::Ppm,
        Region::Stash,
        Region::Data,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Superblock => "SUPERBLOCK",
            Region::RootPointer => "ROOT_PTR",
            Region::FbmColumns => "FBM_COL",
            Region::FbmHeader => "FBM_HEADER",
            Region::NfbmColumns => "NFBM_COL",
            Region::Bitmap => "BITMAP",
            Region::Fma => "FMA",
            Region::Rma => "RMA",
            Region::Ppm => "PPM",
            Region::Stash => "STASH",
            Region::Data => "DATA",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Size parameters of a device. Everything else is derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DeviceGeometry {
    data_blocks: u64,
    block_size: usize,
}

impl DeviceGeometry {
    /// Validates and builds a geometry for `data_blocks` blocks of `block_size` bytes.
    pub fn new(data_blocks: u64, block_size: usize) -> Result<Self> {
        if block_size < MIN_BLOCK_SIZE || !block_size.is_multiple_of(16) {
            return Err(Error::Geometry(format!(
                "block size {block_size} must be a multiple of 16 and at least {MIN_BLOCK_SIZE}"
            )));
        }
        if data_blocks < MIN_DATA_BLOCKS || !data_blocks.is_multiple_of(4) {
            return Err(Error::Geometry(format!(
                "data block count {data_blocks} must be a multiple of 4 and at least {MIN_DATA_BLOCKS}"
            )));
        }
        if data_blocks >= u32::MAX as u64 {
            return Err(Error::Geometry(
                "data block count exceeds 32-bit coordinates".into(),
            ));
        }
        let g = DeviceGeometry {
            data_blocks,
            block_size,
        };
        let rows = g.matrix_rows() as u64;
        let cols = g.matrix_cols() as u64;
        let counter_bits = 64 - (cols.max(2) - 1).leading_zeros() as u64;
        if rows * counter_bits > 8 * block_size as u64 {
            return Err(Error::Geometry(
                "free-block matrix header does not fit in one block".into(),
            ));
        }
        if rows * ADDR_SIZE as u64 > block_size as u64 {
            return Err(Error::Geometry(
                "matrix column does not fit in one block".into(),
            ));
        }
        Ok(g)
    }

    /// Default 4 KiB blocks.
    pub fn with_blocks(data_blocks: u64) -> Result<Self> {
        Self::new(data_blocks, 4096)
    }

    /// N: number of data-region blocks.
    pub fn data_blocks(&self) -> u64 {
        self.data_blocks
    }

    /// B: block size in bytes.
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn addr_size(&self) -> usize {
        ADDR_SIZE
    }

    /// Usable bytes of a sealed metadata block.
    pub fn meta_payload(&self) -> usize {
        self.block_size - META_IV_LEN
    }

    /// Addresses per metadata block; also the number of matrix rows.
    pub fn beta(&self) -> usize {
        self.meta_payload() / ADDR_SIZE
    }

    pub fn matrix_rows(&self) -> usize {
        self.beta()
    }

    pub fn matrix_cols(&self) -> usize {
        (self.data_blocks as usize).div_ceil(self.matrix_rows())
    }

    pub fn matrix_slots(&self) -> usize {
        self.matrix_rows() * self.matrix_cols()
    }

    /// Bitmap bits held by one bitmap block after its logical-index prefix.
    pub fn bitmap_bits_per_block(&self) -> usize {
        (self.meta_payload() - BITMAP_INDEX_LEN) * 8
    }

    pub fn bitmap_blocks(&self) -> usize {
        self.matrix_slots().div_ceil(self.bitmap_bits_per_block())
    }

    pub fn fma_entries_per_page(&self) -> usize {
        self.meta_payload() / ADDR_SIZE
    }

    /// FMA pages, excluding the trailing length block.
    pub fn fma_pages(&self) -> usize {
        (self.data_blocks as usize).div_ceil(self.fma_entries_per_page())
    }

    pub fn rma_entries_per_page(&self) -> usize {
        self.meta_payload() / RMA_ENTRY_LEN
    }

    pub fn rma_pages(&self) -> usize {
        (self.data_blocks as usize).div_ceil(self.rma_entries_per_page())
    }

    pub fn ppm_entries_per_page(&self) -> usize {
        self.meta_payload() / ADDR_SIZE
    }

    /// Largest public logical volume the PPM region can address.
    pub fn ppm_capacity(&self) -> u64 {
        self.data_blocks / 2
    }

    pub fn ppm_pages(&self) -> usize {
        (self.ppm_capacity() as usize).div_ceil(self.ppm_entries_per_page())
    }

    /// Children per internal tree node. Tree nodes live in the data region, whose IVs are in the RMA.
    pub fn beta_internal(&self) -> usize {
        self.block_size / ADDR_SIZE
    }

    /// Entries per leaf node: physical address, logical id, N-FBM slot.
    pub fn beta_leaf(&self) -> usize {
        self.block_size / LEAF_ENTRY_LEN
    }

    fn region_len(&self, region: Region) -> u64 {
        match region {
            Region::Superblock => SUPERBLOCK_BLOCKS,
            Region::RootPointer => 1,
            Region::FbmColumns | Region::NfbmColumns => self.matrix_cols() as u64,
            Region::FbmHeader => 1,
            Region::Bitmap => self.bitmap_blocks() as u64,
            Region::Fma => self.fma_pages() as u64 + 1,
            Region::Rma => self.rma_pages() as u64,
            Region::Ppm => self.ppm_pages() as u64,
            Region::Stash => STASH_BLOCKS,
            Region::Data => self.data_blocks,
        }
    }

    /// Absolute block range of a region.
    pub fn region_range(&self, region: Region) -> Range<u64> {
        let mut start = 0;
        for r in Region::ALL {
            let len = self.region_len(r);
            if r == region {
                return start..start + len;
            }
            start += len;
        }
        unreachable!("region table covers every region")
    }

    pub fn region_start(&self, region: Region) -> u64 {
        self.region_range(region).start
    }

    /// Region table as (region, start, length) triples.
    pub fn region_table(&self) -> Vec<(Region, u64, u64)> {
        Region::ALL
            .iter()
            .map(|&r| {
                let range = self.region_range(r);
                (r, range.start, range.end - range.start)
            })
            .collect()
    }

    pub fn total_blocks(&self) -> u64 {
        Region::ALL.iter().map(|&r| self.region_len(r)).sum()
    }

    /// Region containing an absolute block index.
    pub fn region_of(&self, idx: u64) -> Option<Region> {
        let mut start = 0;
        for r in Region::ALL {
            let len = self.region_len(r);
            if idx < start + len {
                return Some(r);
            }
            start += len;
        }
        None
    }

    /// Absolute index of data block `addr`.
    pub fn data_block(&self, addr: u64) -> u64 {
        debug_assert!(addr < self.data_blocks);
        self.region_start(Region::Data) + addr
    }
}
