// SPDX-License-Identifier: Apache-2.0

//! Free-block bias attack on the selection protocol.
//!
//! For every selection run the adversary guesses, for each data block, "free" if the run
//! wrote it and "occupied" otherwise. Ground truth comes from the run records. One
//! observation is one (run, block) guess; the standard error is computed over per-run means,
//! since guesses within a run are correlated.

use rand::Rng;

use super::report::Record;
use super::stats;
use crate::block_store::{BlockStore, DeviceGeometry, Fill};
use crate::crypto::{seeded_rng, KeyRole, VolumeKey};
use crate::error::Result;
use crate::oram::{DlOram, OramConfig, RunRecord, SelectionProtocol};

#[derive(Clone, Copy, Debug)]
pub struct BiasConfig {
    pub blocks: u64,
    pub block_size: usize,
    pub k: usize,
    pub protocol: SelectionProtocol,
    pub observations: u64,
    pub seed: u64,
}

impl BiasConfig {
    pub fn new(blocks: u64, protocol: SelectionProtocol, observations: u64, seed: u64) -> Self {
        BiasConfig {
            blocks,
            block_size: 512,
            k: 5,
            protocol,
            observations,
            seed,
        }
    }

    /// Expected advantage of the touch classifier.
    pub fn predicted_advantage(&self) -> f64 {
        match self.protocol {
            SelectionProtocol::Combined => 0.0,
            SelectionProtocol::BiasedLegacy => self.k as f64 / (2.0 * self.blocks as f64),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BiasResult {
    pub config: BiasConfig,
    pub runs: u64,
    pub observations: u64,
    pub advantage: f64,
    pub std_error: f64,
    pub ci95: (f64, f64),
}

impl BiasResult {
    /// Advantage in units of its standard error.
    pub fn z(&self) -> f64 {
        if self.std_error == 0.0 {
            0.0
        } else {
            self.advantage / self.std_error
        }
    }

    pub fn ci_contains_zero(&self) -> bool {
        self.ci95.0 <= 0.0 && 0.0 <= self.ci95.1
    }

    pub fn record(&self, test: &str, pass: bool) -> Record {
        Record::new(test, self.advantage, Some(stats::two_sided_p(self.z())), pass).detail(format!(
            "protocol={:?} n={} observations={} runs={} se={:.3e} z={:.2} ci95=[{:.3e},{:.3e}] predicted={:.3e}",
            self.config.protocol,
            self.config.blocks,
            self.observations,
            self.runs,
            self.std_error,
            self.z(),
            self.ci95.0,
            self.ci95.1,
            self.config.predicted_advantage()
        ))
    }
}

/// Accuracy of the touch classifier on one run, minus one half.
pub fn run_advantage(rec: &RunRecord) -> f64 {
    let n = rec.free_before.len();
    let mut touched = vec![false; n];
    for &a in &rec.touched {
        touched[a as usize] = true;
    }
    let correct = rec
        .free_before
        .iter()
        .zip(&touched)
        .filter(|(free, t)| free == t)
        .count();
    correct as f64 / n as f64 - 0.5
}

/// Runs hidden writes on a standalone ORAM until `observations` guesses have been scored.
pub fn bias_attack(config: BiasConfig) -> Result<BiasResult> {
    let mut rng = seeded_rng(config.seed);
    let g = DeviceGeometry::new(config.blocks, config.block_size)?;
    let store = BlockStore::memory(g, Fill::Random(&mut rng))?;
    let key = VolumeKey::random(KeyRole::Hidden, &mut rng);
    let oram_config = OramConfig {
        k: config.k,
        protocol: config.protocol,
        ..OramConfig::default()
    };
    let mut oram = DlOram::format(store, key, oram_config, &mut rng)?;
    oram.state_mut().set_recording(true);
    let capacity = oram.state().capacity();
    let mut data = vec![0u8; config.block_size];
    let mut per_run = Vec::new();
    let mut observations = 0u64;
    while observations < config.observations {
        rng.fill(&mut data[..]);
        let id = rng.gen_range(0..capacity);
        oram.write(id, data.clone(), &mut rng)?;
        for rec in oram.state_mut().take_records() {
            per_run.push(run_advantage(&rec));
            observations += rec.free_before.len() as u64;
        }
    }
    let (advantage, std_error) = stats::mean_se(&per_run);
    let half = stats::z_for(0.95) * std_error;
    Ok(BiasResult {
        config,
        runs: per_run.len() as u64,
        observations,
        advantage,
        std_error,
        ci95: (advantage - half, advantage + half),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_advantage_counts_matches() {
        let rec = RunRecord {
            free_before: vec![true, true, false, false],
            touched: vec![0, 2],
        };
        assert_eq!(run_advantage(&rec), 0.0);
        let rec = RunRecord {
            free_before: vec![true, true, false, false],
            touched: vec![0, 1],
        };
        assert_eq!(run_advantage(&rec), 0.5);
    }

    #[test]
    fn legacy_bias_is_visible_at_small_scale() {
        let legacy = bias_attack(BiasConfig::new(
            256,
            SelectionProtocol::BiasedLegacy,
            200_000,
            1,
        ))
        .unwrap();
        assert!(legacy.z() > 3.0, "{legacy:?}");
        let fixed = bias_attack(BiasConfig::new(
            256,
            SelectionProtocol::Combined,
            200_000,
            1,
        ))
        .unwrap();
        assert!(fixed.z().abs() < 4.0, "{fixed:?}");
        assert!(fixed.advantage.abs() < legacy.advantage / 3.0);
    }
}
