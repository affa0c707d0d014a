// SPDX-License-Identifier: Apache-2.0

//! Measures the free-block bias of the legacy and combined selection protocols.

use datalair::harness::{bias_attack, BiasConfig};
use datalair::oram::SelectionProtocol;

fn main() -> datalair::Result<()> {
    for (name, protocol) in [
        ("legacy", SelectionProtocol::BiasedLegacy),
        ("combined", SelectionProtocol::Combined),
    ] {
        let r = bias_attack(BiasConfig::new(256, protocol, 200_000, 6))?;
        println!(
            "{name}: advantage={:.5} ci95=[{:.5}, {:.5}] predicted={:.5} z={:.1}",
            r.advantage,
            r.ci95.0,
            r.ci95.1,
            r.config.predicted_advantage(),
            r.z()
        );
    }
    Ok(())
}
