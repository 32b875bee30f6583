//! Additive homomorphic encryption backing the Encrypt, Aggregate and
//! Decrypt stages, plus the fixed-point encoding of real-valued plaintexts.
//!
//! Decryption holds a single secret key; it stands in for committee or
//! threshold decryption and is a simulation only.

mod fixed;
mod paillier;

use num_bigint::BigUint;
use rand::RngCore;
use thiserror::Error;

pub use fixed::{decode_fixed, encode_fixed, FixedPoint, DEFAULT_SCALE};
pub use paillier::{keygen, KeyPair, PublicKey};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CryptoError {
    #[error("key size {0} is below the 64-bit minimum")]
    InvalidKeySize(u64),
    #[error("ciphertexts were produced under different keys")]
    FingerprintMismatch,
    #[error("plaintext out of range for the key modulus")]
    OutOfRange,
    #[error("fixed-point overflow: {0} does not fit the plaintext space")]
    Overflow(f64),
    #[error("invalid key material: {0}")]
    InvalidKey(String),
}

#[derive(Clone, PartialEq, Eq)]
pub struct Ciphertext {
    value: BigUint,
    fingerprint: u64,
}

impl Ciphertext {
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Size in bytes of the serialized ciphertext, for audit logs.
    pub fn byte_len(&self) -> usize {
        (self.value.bits() as usize).div_ceil(8)
    }
}

impl std::fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Ciphertext({} bytes, key {:016x})",
            self.byte_len(),
            self.fingerprint
        )
    }
}

/// An additive homomorphic scheme over plaintext residues in `[0, n)`.
pub trait AheScheme: Send + Sync {
    fn modulus(&self) -> &BigUint;

    fn fingerprint(&self) -> u64;

    fn encrypt(&self, m: &BigUint, rng: &mut dyn RngCore) -> Result<Ciphertext, CryptoError>;

    /// Ciphertext-level ⊕: decrypts to the plaintext sum mod n.
    fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, CryptoError>;

    fn decrypt(&self, c: &Ciphertext) -> Result<BigUint, CryptoError>;

    fn check(&self, c: &Ciphertext) -> Result<(), CryptoError> {
        if c.fingerprint == self.fingerprint() {
            Ok(())
        } else {
            Err(CryptoError::FingerprintMismatch)
        }
    }
}

/// Free-function forms mirroring the scheme methods.
pub fn encrypt(scheme: &dyn AheScheme, m: &BigUint, rng: &mut dyn RngCore) -> Result<Ciphertext, CryptoError> {
    scheme.encrypt(m, rng)
}

pub fn decrypt(scheme: &dyn AheScheme, c: &Ciphertext) -> Result<BigUint, CryptoError> {
    scheme.decrypt(c)
}

pub fn add_cipher(scheme: &dyn AheScheme, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, CryptoError> {
    scheme.add(a, b)
}

/// Identity "encryption" over the ring of integers mod 2⁶⁴, for fast tests.
/// Offers no secrecy.
#[derive(Debug, Clone)]
pub struct MockScheme {
    modulus: BigUint,
}

impl MockScheme {
    const FINGERPRINT: u64 = 0x6d6f_636b_0000_0040;

    pub fn new() -> Self {
        Self {
            modulus: BigUint::from(1u8) << 64,
        }
    }
}

impl Default for MockScheme {
    fn default() -> Self {
        Self::new()
    }
}

impl AheScheme for MockScheme {
    fn modulus(&self) -> &BigUint {
        &self.modulus
    }

    fn fingerprint(&self) -> u64 {
        Self::FINGERPRINT
    }

    fn encrypt(&self, m: &BigUint, _rng: &mut dyn RngCore) -> Result<Ciphertext, CryptoError> {
        if m >= &self.modulus {
            return Err(CryptoError::OutOfRange);
        }
        Ok(Ciphertext {
            value: m.clone(),
            fingerprint: Self::FINGERPRINT,
        })
    }

    fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, CryptoError> {
        self.check(a)?;
        self.check(b)?;
        Ok(Ciphertext {
            value: (&a.value + &b.value) % &self.modulus,
            fingerprint: Self::FINGERPRINT,
        })
    }

    fn decrypt(&self, c: &Ciphertext) -> Result<BigUint, CryptoError> {
        self.check(c)?;
        Ok(c.value.clone())
    }
}
