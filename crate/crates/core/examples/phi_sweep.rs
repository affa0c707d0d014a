// SPDX-License-Identifier: Apache-2.0

//! Public-write throughput, in I/O terms, across hidden-step ratios.

use datalair::bench::{phi_sweep, updates_only_gain, Workload};

fn main() -> datalair::Result<()> {
    let points = phi_sweep(1024, 512, Workload::Sequential, 200, 5, 7)?;
    for p in &points {
        println!(
            "{:>13}: {:.2} writes per 1000 I/Os",
            p.label,
            p.report.writes_per_kilo_io()
        );
    }
    println!(
        "updates-only gain: {:.2}",
        updates_only_gain(&points).unwrap_or(0.0)
    );
    Ok(())
}
