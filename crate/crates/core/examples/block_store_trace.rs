// SPDX-License-Identifier: Apache-2.0

//! Traces the physical writes of one public write and tags each with its region.

use datalair::block_store::{BlockStore, DeviceGeometry, Fill, OpLabel};
use datalair::crypto::{seeded_rng, KdfParams};
use datalair::device::{Device, FormatOptions, RuntimeConfig};

fn main() -> datalair::Result<()> {
    let mut rng = seeded_rng(1);
    let g = DeviceGeometry::new(1024, 512)?;
    let store = BlockStore::memory(g, Fill::Random(&mut rng))?;
    let opts = FormatOptions::new(b"public", Some(b"hidden")).with_kdf(KdfParams::FAST);
    let mut dev = Device::format(store, &opts, RuntimeConfig::default(), &mut rng)?;
    dev.store_mut().begin_trace(OpLabel::PublicWrite)?;
    dev.public_write(0, &[7u8; 512], &mut rng)?;
    let trace = dev.store_mut().end_trace()?;
    println!("reads={} writes={}", trace.reads.len(), trace.writes.len());
    println!("shape: {}", trace.shape());
    Ok(())
}
