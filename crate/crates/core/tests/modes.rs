// SPDX-License-Identifier: Apache-2.0

use datalair::block_store::{diff, BlockStore, DeviceGeometry, Fill, OpLabel};
use datalair::crypto::{seeded_rng, KdfParams};
use datalair::device::{Device, FormatOptions, RuntimeConfig};
use datalair::harness::battery::mode_replay;
use std::collections::BTreeSet;

#[test]
fn write_counts_match_exactly_across_modes() {
    let r = mode_replay(1024, 512, 10_000, 11).unwrap();
    let rec = r.exact_record("pat-exact");
    assert!(rec.pass, "{rec}");
}

#[test]
fn distinct_block_counts_share_a_distribution_across_modes() {
    let r = mode_replay(1024, 512, 10_000, 12).unwrap();
    for rec in r.two_sample_records(0.01).unwrap() {
        assert!(rec.pass, "{rec}");
    }
}

#[test]
fn traced_writes_match_snapshot_diffs() {
    let mut rng = seeded_rng(13);
    let g = DeviceGeometry::new(1024, 512).unwrap();
    let store = BlockStore::memory(g, Fill::Random(&mut rng)).unwrap();
    let opts = FormatOptions::new(b"p", Some(b"h")).with_kdf(KdfParams::FAST);
    let mut dev = Device::format(store, &opts, RuntimeConfig::default(), &mut rng).unwrap();
    let mut before = dev.store_mut().snapshot().unwrap();
    for i in 0..200u64 {
        if i % 2 == 0 {
            dev.hidden_write(i % 50, &[i as u8; 512]).unwrap();
        }
        dev.store_mut().begin_trace(OpLabel::PublicWrite).unwrap();
        dev.public_write(i % 120, &[i as u8; 512], &mut rng)
            .unwrap();
        let trace = dev.store_mut().end_trace().unwrap();
        let after = dev.store_mut().snapshot().unwrap();
        let traced: BTreeSet<u64> = trace.writes.iter().map(|e| e.index).collect();
        assert_eq!(diff(&before, &after).unwrap(), traced, "op {i}");
        before = after;
    }
}
