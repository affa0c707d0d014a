// SPDX-License-Identifier: Apache-2.0

pub mod bench;
pub mod block_store;
pub mod cli;
pub mod crypto;
pub mod device;
pub mod disk;
pub mod error;
pub mod freemaps;
pub mod harness;
pub mod oram;
pub mod pfl;

pub use error::{Error, Result};
