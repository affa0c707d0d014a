// SPDX-License-Identifier: Apache-2.0

//! Writes and reads through a standalone write-only ORAM, with simulations in between.

use datalair::block_store::{BlockStore, DeviceGeometry, Fill};
use datalair::crypto::{seeded_rng, KeyRole, VolumeKey};
use datalair::oram::{DlOram, OramConfig};

fn main() -> datalair::Result<()> {
    let mut rng = seeded_rng(4);
    let g = DeviceGeometry::new(1024, 512)?;
    let store = BlockStore::memory(g, Fill::Random(&mut rng))?;
    let key = VolumeKey::random(KeyRole::Hidden, &mut rng);
    let mut oram = DlOram::format(store, key, OramConfig::default(), &mut rng)?;
    for id in 0..10u64 {
        oram.write(id, vec![id as u8; 512], &mut rng)?;
        oram.simulate(&mut rng)?;
    }
    let ok = (0..10u64).all(|id| {
        oram.read(id)
            .map(|d| d == vec![id as u8; 512])
            .unwrap_or(false)
    });
    println!(
        "capacity={} depth={} reads_ok={ok}",
        oram.state().capacity(),
        oram.state().depth()
    );
    println!(
        "stash={} audit_ok={}",
        oram.state().stash().len(),
        oram.audit().iter().all(|c| c.ok)
    );
    Ok(())
}
