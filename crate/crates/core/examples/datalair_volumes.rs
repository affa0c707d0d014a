// SPDX-License-Identifier: Apache-2.0

//! Formats a dual-volume device, writes to both volumes, remounts and reads back.

use datalair::block_store::{BlockStore, DeviceGeometry, Fill};
use datalair::crypto::{seeded_rng, KdfParams};
use datalair::device::{Device, FormatOptions, RuntimeConfig};

fn main() -> datalair::Result<()> {
    let mut rng = seeded_rng(5);
    let g = DeviceGeometry::new(1024, 512)?;
    let store = BlockStore::memory(g, Fill::Random(&mut rng))?;
    let opts = FormatOptions::new(b"public", Some(b"hidden")).with_kdf(KdfParams::FAST);
    let mut dev = Device::format(store, &opts, RuntimeConfig::default(), &mut rng)?;
    dev.hidden_write(1, &[0xAA; 512])?;
    dev.public_write(1, &[0x55; 512], &mut rng)?;
    let store = dev.unmount(&mut rng)?;

    let mut dev = Device::mount(
        store,
        b"public",
        Some(b"hidden"),
        RuntimeConfig::default(),
        &mut rng,
    )?;
    println!(
        "mode={:?} public_ok={} hidden_ok={}",
        dev.mode(),
        dev.public_read(1)? == [0x55; 512],
        dev.hidden_read(1)? == [0xAA; 512]
    );
    let store = dev.unmount(&mut rng)?;

    let dev = Device::mount(store, b"public", None, RuntimeConfig::default(), &mut rng)?;
    println!(
        "mounted with one password: mode={:?} hidden_capacity={:?}",
        dev.mode(),
        dev.hidden_capacity()
    );
    Ok(())
}
