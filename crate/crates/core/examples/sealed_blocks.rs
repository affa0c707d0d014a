// SPDX-License-Identifier: Apache-2.0

//! Seals a block, reencrypts it under a fresh IV and opens both copies.

use datalair::crypto::{reencrypt, seal, seeded_rng, unseal, KdfParams, KeyRole, VolumeKey};

fn main() -> datalair::Result<()> {
    let mut rng = seeded_rng(2);
    let key = VolumeKey::derive(
        KeyRole::Hidden,
        b"correct horse",
        &[9u8; 16],
        KdfParams::FAST,
    )?;
    let plain = b"block contents".to_vec();
    let a = seal(&key, &plain, &mut rng);
    let b = reencrypt(&key, &a, &mut rng);
    println!("ciphertexts differ: {}", a.ciphertext != b.ciphertext);
    println!(
        "plaintexts match: {}",
        unseal(&key, &a) == plain && unseal(&key, &b) == plain
    );
    Ok(())
}
