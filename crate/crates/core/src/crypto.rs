// SPDX-License-Identifier: Apache-2.0

//! Per-block AES-256-CTR with random IVs, password key derivation and RNG helpers.

use aes::cipher::{KeyIvInit, StreamCipher};
use argon2::{Algorithm, Argon2, Params, Version};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_core::{CryptoRngCore, RngCore};

use crate::block_store::META_IV_LEN;
use crate::error::{Error, Result};

type Aes256Ctr = ctr::Ctr128BE<aes::Aes256>;

pub const IV_LEN: usize = 16;
pub const KEY_LEN: usize = 32;
pub const SALT_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyRole {
    Public,
    Hidden,
    /// Random key used to fill hidden regions of a device without a hidden volume, then dropped.
    Throwaway,
}

/// A 256-bit volume key.
#[derive(Clone)]
pub struct VolumeKey {
    role: KeyRole,
    bytes: [u8; KEY_LEN],
}

impl std::fmt::Debug for VolumeKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VolumeKey")
            .field("role", &self.role)
            .finish_non_exhaustive()
    }
}

impl Drop for VolumeKey {
    fn drop(&mut self) {
        self.bytes.fill(0);
    }
}

impl VolumeKey {
    pub fn from_bytes(role: KeyRole, bytes: [u8; KEY_LEN]) -> Self {
        VolumeKey { role, bytes }
    }

    pub fn random(role: KeyRole, rng: &mut dyn CryptoRngCore) -> Self {
        let mut bytes = [0u8; KEY_LEN];
        rng.fill_bytes(&mut bytes);
        VolumeKey { role, bytes }
    }

    /// Derives a key from a password with Argon2id.
    pub fn derive(
        role: KeyRole,
        password: &[u8],
        salt: &[u8; SALT_LEN],
        params: KdfParams,
    ) -> Result<Self> {
        let p = Params::new(
            params.m_cost_kib,
            params.t_cost,
            params.p_cost,
            Some(KEY_LEN),
        )
        .map_err(|e| Error::InvalidArgument(format!("kdf parameters: {e}")))?;
        let mut bytes = [0u8; KEY_LEN];
        Argon2::new(Algorithm::Argon2id, Version::V0x13, p)
            .hash_password_into(password, salt, &mut bytes)
            .map_err(|e| Error::InvalidArgument(format!("kdf: {e}")))?;
        Ok(VolumeKey { role, bytes })
    }

    pub fn role(&self) -> KeyRole {
        self.role
    }

    /// XORs the keystream for `iv` into `buf`. Encryption and decryption are the same call.
    pub fn apply(&self, iv: &[u8; IV_LEN], buf: &mut [u8]) {
        let mut cipher = Aes256Ctr::new((&self.bytes).into(), iv.into());
        cipher.apply_keystream(buf);
    }
}

/// Argon2id cost parameters, stored in the superblock.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KdfParams {
    pub m_cost_kib: u32,
    pub t_cost: u32,
    pub p_cost: u32,
}

impl KdfParams {
    /// Cheap parameters for tests and examples.
    pub const FAST: KdfParams = KdfParams {
        m_cost_kib: 64,
        t_cost: 1,
        p_cost: 1,
    };
}

impl Default for KdfParams {
    fn default() -> Self {
        KdfParams {
            m_cost_kib: 19 * 1024,
            t_cost: 2,
            p_cost: 1,
        }
    }
}

/// A block ciphertext together with its IV.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedBlock {
    pub iv: [u8; IV_LEN],
    pub ciphertext: Vec<u8>,
}

pub fn fresh_iv(rng: &mut dyn CryptoRngCore) -> [u8; IV_LEN] {
    let mut iv = [0u8; IV_LEN];
    rng.fill_bytes(&mut iv);
    iv
}

pub fn seal(key: &VolumeKey, plaintext: &[u8], rng: &mut dyn CryptoRngCore) -> SealedBlock {
    let iv = fresh_iv(rng);
    let mut ciphertext = plaintext.to_vec();
    key.apply(&iv, &mut ciphertext);
    SealedBlock { iv, ciphertext }
}

pub fn unseal(key: &VolumeKey, sealed: &SealedBlock) -> Vec<u8> {
    let mut plaintext = sealed.ciphertext.clone();
    key.apply(&sealed.iv, &mut plaintext);
    plaintext
}

/// Same plaintext under a fresh IV.
pub fn reencrypt(
    key: &VolumeKey,
    sealed: &SealedBlock,
    rng: &mut dyn CryptoRngCore,
) -> SealedBlock {
    seal(key, &unseal(key, sealed), rng)
}

/// Seals `payload` into a metadata block laid out as `[iv][ciphertext]`.
pub fn seal_meta(key: &VolumeKey, payload: &[u8], rng: &mut dyn CryptoRngCore) -> Vec<u8> {
    let iv = fresh_iv(rng);
    let mut block = Vec::with_capacity(META_IV_LEN + payload.len());
    block.extend_from_slice(&iv);
    block.extend_from_slice(payload);
    key.apply(&iv, &mut block[META_IV_LEN..]);
    block
}

/// Inverse of [`seal_meta`].
pub fn open_meta(key: &VolumeKey, block: &[u8]) -> Vec<u8> {
    let iv: [u8; IV_LEN] = block[..META_IV_LEN]
        .try_into()
        .expect("block longer than an IV");
    let mut payload = block[META_IV_LEN..].to_vec();
    key.apply(&iv, &mut payload);
    payload
}

/// Uniform integer in `[0, bound)`.
pub fn random_below(rng: &mut dyn RngCore, bound: u64) -> Result<u64> {
    if bound == 0 {
        return Err(Error::InvalidArgument(
            "random_below bound must be at least 1".into(),
        ));
    }
    Ok(rng.gen_range(0..bound))
}

/// Deterministic generator for reproducible runs.
pub fn seeded_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Generator seeded from OS entropy.
pub fn entropy_rng() -> ChaCha20Rng {
    ChaCha20Rng::from_entropy()
}

/// Seeded when `seed` is given, OS entropy otherwise.
pub fn rng_from(seed: Option<u64>) -> ChaCha20Rng {
    seed.map_or_else(entropy_rng, seeded_rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_core::RngCore;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn key() -> VolumeKey {
        VolumeKey::from_bytes(KeyRole::Hidden, [7u8; KEY_LEN])
    }

    fn chi2_p(counts: &[u64], expected: f64) -> f64 {
        let stat: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        1.0 - ChiSquared::new((counts.len() - 1) as f64)
            .unwrap()
            .cdf(stat)
    }

    #[test]
    fn zero_block_round_trip() {
        let mut rng = seeded_rng(1);
        let sealed = seal(&key(), &[0u8; 4096], &mut rng);
        assert_eq!(unseal(&key(), &sealed), vec![0u8; 4096]);
    }

    #[test]
    fn fresh_iv_each_seal() {
        let mut rng = seeded_rng(2);
        let a = seal(&key(), &[5u8; 64], &mut rng);
        let b = seal(&key(), &[5u8; 64], &mut rng);
        assert_ne!(a.iv, b.iv);
        assert_ne!(a.ciphertext, b.ciphertext);
    }

    #[test]
    fn reencrypt_keeps_plaintext() {
        let mut rng = seeded_rng(3);
        let a = seal(&key(), b"hello block", &mut rng);
        let b = reencrypt(&key(), &a, &mut rng);
        assert_ne!(a.ciphertext, b.ciphertext);
        assert_eq!(unseal(&key(), &b), b"hello block");
    }

    #[test]
    fn wrong_key_gives_garbage() {
        let mut rng = seeded_rng(4);
        let a = seal(&key(), &[0u8; 32], &mut rng);
        let other = VolumeKey::from_bytes(KeyRole::Public, [8u8; KEY_LEN]);
        assert_ne!(unseal(&other, &a), vec![0u8; 32]);
    }

    #[test]
    fn ciphertext_bytes_look_uniform() {
        let mut rng = seeded_rng(5);
        let mut counts = [0u64; 256];
        for _ in 0..10 {
            let s = seal(&key(), &[0u8; 1000], &mut rng);
            for b in s.ciphertext {
                counts[b as usize] += 1;
            }
        }
        assert!(chi2_p(&counts, 10_000.0 / 256.0) > 0.01);
    }

    #[test]
    fn random_below_edges_and_uniformity() {
        let mut rng = seeded_rng(6);
        assert!(random_below(&mut rng, 0).is_err());
        for _ in 0..100 {
            assert_eq!(random_below(&mut rng, 1).unwrap(), 0);
        }
        let mut counts = [0u64; 6];
        for _ in 0..60_000 {
            counts[random_below(&mut rng, 6).unwrap() as usize] += 1;
        }
        assert!(chi2_p(&counts, 10_000.0) > 0.01);
    }

    #[test]
    fn seeded_rng_is_reproducible() {
        let a: Vec<u64> = (0..8).map(|_| seeded_rng(9).next_u64()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let mut r1 = seeded_rng(10);
        let mut r2 = seeded_rng(10);
        for _ in 0..16 {
            assert_eq!(
                random_below(&mut r1, 1000).unwrap(),
                random_below(&mut r2, 1000).unwrap()
            );
        }
    }

    #[test]
    fn kdf_separates_passwords_and_salts() {
        let salt = [1u8; SALT_LEN];
        let a = VolumeKey::derive(KeyRole::Public, b"pw", &salt, KdfParams::FAST).unwrap();
        let b = VolumeKey::derive(KeyRole::Hidden, b"pw2", &salt, KdfParams::FAST).unwrap();
        let c =
            VolumeKey::derive(KeyRole::Public, b"pw", &[2u8; SALT_LEN], KdfParams::FAST).unwrap();
        let a2 = VolumeKey::derive(KeyRole::Public, b"pw", &salt, KdfParams::FAST).unwrap();
        assert_ne!(a.bytes, b.bytes);
        assert_ne!(a.bytes, c.bytes);
        assert_eq!(a.bytes, a2.bytes);
    }

    proptest! {
        #[test]
        fn meta_round_trip(payload in proptest::collection::vec(any::<u8>(), 1..600), seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let block = seal_meta(&key(), &payload, &mut rng);
            prop_assert_eq!(block.len(), payload.len() + META_IV_LEN);
            prop_assert_eq!(open_meta(&key(), &block), payload);
        }
    }
}
