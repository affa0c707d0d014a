// SPDX-License-Identifier: Apache-2.0

//! Adversary game, statistical tests and experiment drivers.

pub mod battery;
pub mod bias;
pub mod game;
pub mod report;
pub mod stats;

pub use bias::{bias_attack, BiasConfig, BiasResult};
pub use game::{
    run_game, AccessOp, AccessPattern, Distinguisher, GameConfig, GameResult, Granularity,
    Observation,
};
pub use report::{summary, Record};
