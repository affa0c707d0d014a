// SPDX-License-Identifier: Apache-2.0

use super::*;
use crate::block_store::{Fill, OpLabel};
use crate::crypto::seeded_rng;

fn oram(n: u64, b: usize, config: OramConfig, seed: u64) -> (DlOram, rand_chacha::ChaCha20Rng) {
    let mut rng = seeded_rng(seed);
    let g = DeviceGeometry::new(n, b).unwrap();
    let store = BlockStore::memory(g, Fill::Random(&mut rng)).unwrap();
    let key = VolumeKey::random(KeyRole::Hidden, &mut rng);
    let o = DlOram::format(store, key, config, &mut rng).unwrap();
    (o, rng)
}

fn block(b: usize, v: u8) -> Vec<u8> {
    vec![v; b]
}

fn all_ok(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.ok)
}

#[test]
fn closed_form_shape() {
    let c = write_shape(5, 2, BitmapMode::OnDisk);
    assert_eq!(c.total(), 94);
    assert_eq!(write_cost(5, 2, BitmapMode::InMemory), 64);
}

#[test]
fn write_then_read() {
    let (mut o, mut rng) = oram(1024, 512, OramConfig::default(), 1);
    assert!(all_ok(&o.audit()));
    let cap = o.state().capacity();
    for id in [0, 7, cap - 1] {
        o.write(id, block(512, id as u8 + 1), &mut rng).unwrap();
    }
    for _ in 0..40 {
        o.write_step(&mut rng).unwrap();
    }
    assert!(o.state().stash().is_empty());
    for id in [0, 7, cap - 1] {
        assert_eq!(o.read(id).unwrap(), block(512, id as u8 + 1));
    }
    assert!(all_ok(&o.audit()), "{:?}", o.audit());
}

#[test]
fn write_and_simulate_share_shape() {
    let (mut o, mut rng) = oram(4096, 512, OramConfig::default(), 2);
    let expect = o.state().write_shape();
    for i in 0..20u64 {
        o.store_mut().begin_trace(OpLabel::HiddenWrite).unwrap();
        o.write(i * 13 % o.state().capacity(), block(512, 9), &mut rng)
            .unwrap();
        let w = o.store_mut().end_trace().unwrap();
        assert_eq!(w.shape(), expect);
        o.store_mut()
            .begin_trace(OpLabel::SimulatedHiddenWrite)
            .unwrap();
        o.simulate(&mut rng).unwrap();
        let s = o.store_mut().end_trace().unwrap();
        assert_eq!(s.shape(), expect);
    }
    assert!(all_ok(&o.audit()));
}

#[test]
fn unkeyed_simulation_matches_shape() {
    let (mut o, mut rng) = oram(1024, 512, OramConfig::default(), 3);
    let depth = o.state().depth();
    let expect = o.state().write_shape();
    let (disk, _) = o.parts_mut();
    disk.store_mut()
        .begin_trace(OpLabel::SimulatedHiddenWrite)
        .unwrap();
    simulate_unkeyed(disk, 5, depth, BitmapMode::OnDisk, &mut rng).unwrap();
    assert_eq!(disk.store_mut().end_trace().unwrap().shape(), expect);
}

#[test]
fn read_costs_one_path() {
    let (mut o, mut rng) = oram(1024, 512, OramConfig::default(), 4);
    o.write(3, block(512, 5), &mut rng).unwrap();
    while !o.state().stash().is_empty() {
        o.write_step(&mut rng).unwrap();
    }
    let depth = o.state().depth() as u64;
    o.store_mut().begin_trace(OpLabel::HiddenRead).unwrap();
    o.read(3).unwrap();
    let t = o.store_mut().end_trace().unwrap();
    assert_eq!(t.reads.len() as u64, depth + 2);
    assert!(t.writes.is_empty());
}

#[test]
fn stash_serves_pending_reads() {
    let (mut o, mut rng) = oram(1024, 512, OramConfig::default(), 5);
    o.state_mut()
        .stash_mut()
        .upsert(2, block(512, 44), false, 0)
        .unwrap();
    o.store_mut().begin_trace(OpLabel::HiddenRead).unwrap();
    assert_eq!(o.read(2).unwrap(), block(512, 44));
    assert!(o.store_mut().end_trace().unwrap().reads.is_empty());
    o.write_step(&mut rng).unwrap();
    assert!(o.read(9).is_ok());
}

#[test]
fn init_accounting() {
    let (o, _) = oram(1024, 512, OramConfig::default(), 6);
    let s = o.state();
    let used = s.capacity() + s.shape().node_count() as u64;
    assert_eq!(s.maps().nfbm.occupied_count() as u64, 512);
    assert_eq!(s.filler_count() as u64, 512 - used);
    assert_eq!(s.maps().fbm.valid_count(), 512);
}

#[test]
fn blocks_relocate_on_write() {
    let (mut o, mut rng) = oram(1024, 512, OramConfig::default(), 7);
    let before = o.state().position_map().entry(11).phys;
    o.write(11, block(512, 1), &mut rng).unwrap();
    while !o.state().stash().is_empty() {
        o.write_step(&mut rng).unwrap();
    }
    assert_ne!(o.state().position_map().entry(11).phys, before);
    assert!(o.state().stats().placed >= 1);
}

#[test]
fn reload_from_disk() {
    let (mut o, mut rng) = oram(1024, 512, OramConfig::default(), 8);
    for id in 0..30 {
        o.write(id, block(512, id as u8), &mut rng).unwrap();
    }
    let stash = o.state().stash().clone();
    let key = o.state().key().clone();
    let config = *o.state().config();
    let shape = o.state().shape().clone();
    let (disk, state) = o.parts_mut();
    state.flush(disk, &mut rng).unwrap();
    let loaded = OramState::load(disk, key, config, shape, stash).unwrap();
    assert_eq!(loaded.position_map(), o.state().position_map());
    assert_eq!(loaded.filler_count(), o.state().filler_count());
    let (disk, _) = o.parts_mut();
    assert!(all_ok(&loaded.audit(disk.pfl())));
}

#[test]
fn legacy_protocol_keeps_invariants() {
    let config = OramConfig {
        protocol: SelectionProtocol::BiasedLegacy,
        ..OramConfig::default()
    };
    let (mut o, mut rng) = oram(1024, 512, config, 9);
    let expect = o.state().write_shape();
    for i in 0..50 {
        o.store_mut().begin_trace(OpLabel::HiddenWrite).unwrap();
        o.write(i, block(512, i as u8), &mut rng).unwrap();
        assert_eq!(o.store_mut().end_trace().unwrap().shape(), expect);
    }
    for _ in 0..60 {
        o.write_step(&mut rng).unwrap();
    }
    for i in 0..50 {
        assert_eq!(o.read(i).unwrap(), block(512, i as u8));
    }
    assert!(all_ok(&o.audit()));
}

#[test]
fn public_placement_preserves_hidden_data() {
    let (mut o, mut rng) = oram(1024, 512, OramConfig::default(), 10);
    for id in 0..20 {
        o.write(id, block(512, 100 + id as u8), &mut rng).unwrap();
    }
    let mut placed = Vec::new();
    for i in 0..200u64 {
        let (disk, state) = o.parts_mut();
        let a = state
            .place_public(disk, &block(512, i as u8), &mut rng)
            .unwrap();
        disk.fma_remove(a, &mut rng).unwrap();
        placed.push((a, i as u8));
        state.write_step(disk, &mut rng).unwrap();
    }
    for (a, v) in placed {
        assert_eq!(o.parts_mut().0.read_public(a).unwrap(), block(512, v));
    }
    for id in 0..20 {
        assert_eq!(o.read(id).unwrap(), block(512, 100 + id as u8));
    }
    assert!(all_ok(&o.audit()), "{:?}", o.audit());
}

#[test]
fn recording_captures_every_run() {
    let (mut o, mut rng) = oram(1024, 512, OramConfig::default(), 11);
    o.state_mut().set_recording(true);
    o.write(1, block(512, 1), &mut rng).unwrap();
    let recs = o.state_mut().take_records();
    assert_eq!(recs.len(), 1 + o.state().depth());
    assert!(recs.iter().all(|r| r.touched.len() == 5));
}
