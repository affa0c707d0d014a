// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;
use std::fmt;

use super::geometry::{DeviceGeometry, Region};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpLabel {
    PublicRead,
    PublicWrite,
    HiddenRead,
    HiddenWrite,
    SimulatedHiddenWrite,
    Format,
    Mount,
    Unmount,
    Other,
}

impl fmt::Display for OpLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpLabel::PublicRead => "public-read",
            OpLabel::PublicWrite => "public-write",
            OpLabel::HiddenRead => "hidden-read",
            OpLabel::HiddenWrite => "hidden-write",
            OpLabel::SimulatedHiddenWrite => "simulated-hidden-write",
            OpLabel::Format => "format",
            OpLabel::Mount => "mount",
            OpLabel::Unmount => "unmount",
            OpLabel::Other => "other",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TraceEntry {
    pub region: Region,
    pub index: u64,
}

impl TraceEntry {
    pub(crate) fn new(g: &DeviceGeometry, index: u64) -> Self {
        TraceEntry {
            region: g.region_of(index).expect("index checked against geometry"),
            index,
        }
    }
}

/// Ordered physical I/O caused by one operation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WriteTrace {
    pub label: OpLabel,
    pub writes: Vec<TraceEntry>,
    pub reads: Vec<TraceEntry>,
}

impl WriteTrace {
    pub fn new(label: OpLabel) -> Self {
        WriteTrace {
            label,
            writes: Vec::new(),
            reads: Vec::new(),
        }
    }

    /// Per-region write counts.
    pub fn shape(&self) -> RegionCounts {
        RegionCounts::from_entries(&self.writes)
    }

    pub fn read_shape(&self) -> RegionCounts {
        RegionCounts::from_entries(&self.reads)
    }

    /// Distinct blocks written.
    pub fn touched(&self) -> BTreeSet<u64> {
        self.writes.iter().map(|e| e.index).collect()
    }

    /// Written indices within `region`, in order, relative to the region start.
    pub fn region_writes(&self, g: &DeviceGeometry, region: Region) -> Vec<u64> {
        let start = g.region_start(region);
        self.writes
            .iter()
            .filter(|e| e.region == region)
            .map(|e| e.index - start)
            .collect()
    }

    pub fn extend(&mut self, other: WriteTrace) {
        self.writes.extend(other.writes);
        self.reads.extend(other.reads);
    }
}

/// Write counts per region, indexed by [`Region::index`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct RegionCounts(pub [u64; 11]);

impl RegionCounts {
    pub fn from_entries(entries: &[TraceEntry]) -> Self {
        let mut c = RegionCounts::default();
        for e in entries {
            c.0[e.region.index()] += 1;
        }
        c
    }

    pub fn get(&self, region: Region) -> u64 {
        self.0[region.index()]
    }

    pub fn set(&mut self, region: Region, value: u64) {
        self.0[region.index()] = value;
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    /// Fixed-width little-endian encoding, used for byte-exact comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

impl std::ops::Add for RegionCounts {
    type Output = RegionCounts;
    fn add(mut self, rhs: RegionCounts) -> RegionCounts {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a += b;
        }
        self
    }
}

impl fmt::Display for RegionCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for r in Region::ALL {
            let v = self.get(r);
            if v == 0 {
                continue;
            }
            if !first {
                f.write_str(" ")?;
            }
            first = false;
            write!(f, "{}={}", r.name(), v)?;
        }
        if first {
            f.write_str("(none)")?;
        }
        Ok(())
    }
}

/// Per-block SHA-256 digests of a device image at one instant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub geometry: DeviceGeometry,
    pub digests: Vec<[u8; 32]>,
}

/// Indices whose content differs between two snapshots of the same device.
pub fn diff(a: &Snapshot, b: &Snapshot) -> Result<BTreeSet<u64>> {
    if a.geometry != b.geometry || a.digests.len() != b.digests.len() {
        return Err(Error::SnapshotMismatch);
    }
    Ok(a.digests
        .iter()
        .zip(&b.digests)
        .enumerate()
        .filter(|(_, (x, y))| x != y)
        .map(|(i, _)| i as u64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_display() {
        let g = DeviceGeometry::new(256, 512).unwrap();
        let mut t = WriteTrace::new(OpLabel::HiddenWrite);
        t.writes.push(TraceEntry::new(&g, g.data_block(0)));
        t.writes.push(TraceEntry::new(&g, g.data_block(1)));
        t.writes
            .push(TraceEntry::new(&g, g.region_start(Region::FbmHeader)));
        let s = t.shape();
        assert_eq!(s.get(Region::Data), 2);
        assert_eq!(s.total(), 3);
        assert_eq!(s.to_string(), "FBM_HEADER=1 DATA=2");
        assert_eq!(t.region_writes(&g, Region::Data), vec![0, 1]);
    }

    #[test]
    fn diff_rejects_other_devices() {
        let g1 = DeviceGeometry::new(256, 512).unwrap();
        let g2 = DeviceGeometry::new(128, 512).unwrap();
        let a = Snapshot {
            geometry: g1,
            digests: vec![[0; 32]; g1.total_blocks() as usize],
        };
        let b = Snapshot {
            geometry: g2,
            digests: vec![[0; 32]; g2.total_blocks() as usize],
        };
        assert!(matches!(diff(&a, &b), Err(Error::SnapshotMismatch)));
    }
}
