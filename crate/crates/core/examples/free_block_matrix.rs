// SPDX-License-Identifier: Apache-2.0

//! Selects from a free-block matrix, invalidates the picks and checks compactness.

use datalair::crypto::seeded_rng;
use datalair::freemaps::Fbm;

fn main() -> datalair::Result<()> {
    let mut rng = seeded_rng(3);
    let mut fbm = Fbm::new_full(8, 16, 128, &mut rng);
    println!("valid entries: {}", fbm.valid_count());
    for _ in 0..20 {
        let r = fbm.select_random(&mut rng)?;
        fbm.invalidate_with_compaction(&r)?;
    }
    println!(
        "after 20 invalidations: valid={} compact={}",
        fbm.valid_count(),
        fbm.is_compact()
    );
    println!("row counters: {:?}", fbm.counts());
    Ok(())
}
