// SPDX-License-Identifier: Apache-2.0

//! Plays the access-pattern game against a compliant and a leaky device.

use datalair::harness::game::{run_battery, GameConfig};

fn main() -> datalair::Result<()> {
    let compliant = GameConfig::default();
    let mut leaky = GameConfig::default();
    leaky.runtime.leaky_skip_simulation = true;
    for (name, config) in [("compliant", compliant), ("leaky", leaky)] {
        for r in run_battery(&config, 300)? {
            println!("{name}: {}", r.record(&r.distinguisher));
        }
    }
    Ok(())
}
