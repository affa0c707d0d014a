// SPDX-License-Identifier: Apache-2.0

use crate::block_store::NULL_ADDR;
use crate::error::{Error, Result};
use crate::freemaps::NfbmCoord;

const LEAF_ENTRY_LEN: usize = 20;
const NULL_SLOT: u32 = u32::MAX;

/// Dense B+ tree dimensions: node counts per level, leaves first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeShape {
    capacity: u64,
    beta_leaf: usize,
    beta_internal: usize,
    levels: Vec<usize>,
}

impl TreeShape {
    pub fn new(capacity: u64, beta_leaf: usize, beta_internal: usize) -> Self {
        assert!(capacity > 0 && beta_leaf > 0 && beta_internal > 1);
        let mut levels = vec![(capacity as usize).div_ceil(beta_leaf)];
        while *levels.last().unwrap() > 1 {
            let next = levels.last().unwrap().div_ceil(beta_internal);
            levels.push(next);
        }
        TreeShape {
            capacity,
            beta_leaf,
            beta_internal,
            levels,
        }
    }

    /// Largest tree whose ids plus nodes fit in `budget` blocks.
    pub fn largest_within(budget: u64, beta_leaf: usize, beta_internal: usize) -> Self {
        let (mut lo, mut hi) = (1u64, budget);
        while lo < hi {
            let mid = lo + (hi - lo).div_ceil(2);
            if mid + TreeShape::new(mid, beta_leaf, beta_internal).node_count() as u64 <= budget {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        TreeShape::new(lo, beta_leaf, beta_internal)
    }

    /// Number of logical ids.
    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    /// Levels from leaf to root inclusive.
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn nodes_at(&self, level: usize) -> usize {
        self.levels[level]
    }

    pub fn node_count(&self) -> usize {
        self.levels.iter().sum()
    }

    pub fn beta_leaf(&self) -> usize {
        self.beta_leaf
    }

    pub fn beta_internal(&self) -> usize {
        self.beta_internal
    }

    /// Node index at `level` on the path to `id`.
    pub fn ancestor(&self, id: u64, level: usize) -> usize {
        let mut j = id as usize / self.beta_leaf;
        for _ in 0..level {
            j /= self.beta_internal;
        }
        j
    }

    /// Ids covered by leaf `j`.
    pub fn leaf_range(&self, j: usize) -> std::ops::Range<u64> {
        let lo = (j * self.beta_leaf) as u64;
        lo..(lo + self.beta_leaf as u64).min(self.capacity)
    }

    /// Children of node `j` at `level` (level ≥ 1), as node indices one level down.
    pub fn children(&self, level: usize, j: usize) -> std::ops::Range<usize> {
        let lo = j * self.beta_internal;
        lo..(lo + self.beta_internal).min(self.levels[level - 1])
    }
}

/// Physical location of a data block or tree node, with its N-FBM back-reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Loc {
    pub phys: u64,
    pub coord: NfbmCoord,
}

impl Loc {
    pub const NULL: Loc = Loc {
        phys: NULL_ADDR,
        coord: NfbmCoord::NULL,
    };

    pub fn is_null(&self) -> bool {
        self.phys == NULL_ADDR
    }
}

/// Trusted in-memory copy of the position map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionMap {
    shape: TreeShape,
    leaves: Vec<Loc>,
    nodes: Vec<Vec<Loc>>,
}

impl PositionMap {
    pub fn new(shape: TreeShape) -> Self {
        let leaves = vec![Loc::NULL; shape.capacity() as usize];
        let nodes = (0..shape.depth())
            .map(|l| vec![Loc::NULL; shape.nodes_at(l)])
            .collect();
        PositionMap {
            shape,
            leaves,
            nodes,
        }
    }

    pub fn shape(&self) -> &TreeShape {
        &self.shape
    }

    pub fn entry(&self, id: u64) -> Loc {
        self.leaves[id as usize]
    }

    pub fn set_entry(&mut self, id: u64, loc: Loc) {
        self.leaves[id as usize] = loc;
    }

    pub fn node(&self, level: usize, j: usize) -> Loc {
        self.nodes[level][j]
    }

    pub fn set_node(&mut self, level: usize, j: usize, loc: Loc) {
        self.nodes[level][j] = loc;
    }

    pub fn root(&self) -> Loc {
        self.nodes[self.shape.depth() - 1][0]
    }

    pub fn nodes(&self) -> impl Iterator<Item = (usize, usize, Loc)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(l, v)| v.iter().enumerate().map(move |(j, loc)| (l, j, *loc)))
    }

    /// Plaintext of node `j` at `level`. Leaf entries: physical address, logical id, N-FBM slot.
    pub fn encode_node(
        &self,
        level: usize,
        j: usize,
        block_size: usize,
        nfbm_cols: usize,
    ) -> Vec<u8> {
        let mut out = vec![0u8; block_size];
        if level == 0 {
            for (k, id) in self.shape.leaf_range(j).enumerate() {
                let loc = self.leaves[id as usize];
                let off = k * LEAF_ENTRY_LEN;
                let (tag, slot) = if loc.is_null() {
                    (NULL_ADDR, NULL_SLOT)
                } else {
                    (id, loc.coord.row * nfbm_cols as u32 + loc.coord.col)
                };
                out[off..off + 8].copy_from_slice(&loc.phys.to_le_bytes());
                out[off + 8..off + 16].copy_from_slice(&tag.to_le_bytes());
                out[off + 16..off + 20].copy_from_slice(&slot.to_le_bytes());
            }
        } else {
            for (k, child) in self.shape.children(level, j).enumerate() {
                let phys = self.nodes[level - 1][child].phys;
                out[k * 8..k * 8 + 8].copy_from_slice(&phys.to_le_bytes());
            }
        }
        out
    }
}

/// Decodes the entry for `id` from its leaf block.
pub fn decode_leaf_entry(
    block: &[u8],
    shape: &TreeShape,
    id: u64,
    nfbm_cols: usize,
) -> Result<Loc> {
    let k = (id % shape.beta_leaf() as u64) as usize;
    let off = k * LEAF_ENTRY_LEN;
    let phys = u64::from_le_bytes(block[off..off + 8].try_into().unwrap());
    let tag = u64::from_le_bytes(block[off + 8..off + 16].try_into().unwrap());
    let slot = u32::from_le_bytes(block[off + 16..off + 20].try_into().unwrap());
    if tag == NULL_ADDR {
        return Ok(Loc::NULL);
    }
    if tag != id || slot == NULL_SLOT {
        return Err(Error::Corrupt(format!(
            "leaf entry for id {id} is inconsistent"
        )));
    }
    Ok(Loc {
        phys,
        coord: NfbmCoord {
            row: slot / nfbm_cols as u32,
            col: slot % nfbm_cols as u32,
        },
    })
}

/// Decodes child `k` from an internal node block.
pub fn decode_child(block: &[u8], k: usize) -> u64 {
    u64::from_le_bytes(block[k * 8..k * 8 + 8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_follows_fanouts() {
        // 4 KiB blocks: 204 leaf entries, 512 children.
        let shape = |n: u64| TreeShape::largest_within(n / 2, 204, 512);
        assert_eq!(shape(1 << 10).depth(), 2);
        assert_eq!(shape(1 << 14).depth(), 2);
        assert_eq!(shape(1 << 19).depth(), 3);
        let s = shape(1 << 14);
        assert!(s.capacity() + s.node_count() as u64 <= 8192);
        assert!(
            s.capacity() + 1 + TreeShape::new(s.capacity() + 1, 204, 512).node_count() as u64
                > 8192
        );
    }

    #[test]
    fn single_leaf_tree() {
        let s = TreeShape::new(100, 204, 512);
        assert_eq!(s.depth(), 1);
        assert_eq!(s.node_count(), 1);
        assert_eq!(s.ancestor(99, 0), 0);
    }

    #[test]
    fn ancestors_and_children_agree() {
        let s = TreeShape::new(5000, 10, 4);
        for id in [0u64, 9, 10, 4999] {
            for level in 1..s.depth() {
                let parent = s.ancestor(id, level);
                assert!(s
                    .children(level, parent)
                    .contains(&s.ancestor(id, level - 1)));
            }
        }
    }

    #[test]
    fn leaf_encoding_round_trip() {
        let shape = TreeShape::new(30, 10, 4);
        let mut map = PositionMap::new(shape.clone());
        let loc = Loc {
            phys: 77,
            coord: NfbmCoord { row: 3, col: 2 },
        };
        map.set_entry(13, loc);
        let block = map.encode_node(0, 1, 256, 9);
        assert_eq!(decode_leaf_entry(&block, &shape, 13, 9).unwrap(), loc);
        assert_eq!(decode_leaf_entry(&block, &shape, 14, 9).unwrap(), Loc::NULL);
        assert!(decode_leaf_entry(&block, &shape, 3, 9).is_err());
    }

    #[test]
    fn internal_encoding_lists_children() {
        let shape = TreeShape::new(30, 10, 4);
        let mut map = PositionMap::new(shape);
        for j in 0..3 {
            map.set_node(
                0,
                j,
                Loc {
                    phys: 100 + j as u64,
                    coord: NfbmCoord { row: 0, col: 0 },
                },
            );
        }
        let block = map.encode_node(1, 0, 256, 9);
        assert_eq!(
            (0..3).map(|k| decode_child(&block, k)).collect::<Vec<_>>(),
            vec![100, 101, 102]
        );
    }
}
