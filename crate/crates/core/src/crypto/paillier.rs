use std::fmt;

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AheScheme, Ciphertext, CryptoError};

const MILLER_RABIN_ROUNDS: usize = 32;

const SMALL_PRIMES: [u32; 24] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
];

#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    fingerprint: u64,
}

impl PublicKey {
    fn new(n: BigUint) -> Self {
        let n_squared = &n * &n;
        let digest = Sha256::digest(n.to_bytes_be());
        let fingerprint = u64::from_be_bytes(digest[..8].try_into().unwrap());
        Self {
            n,
            n_squared,
            fingerprint,
        }
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PublicKey")
            .field("bits", &self.n.bits())
            .field("fingerprint", &format_args!("{:016x}", self.fingerprint))
            .finish()
    }
}

/// Paillier key pair with generator g = n + 1.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyPair {
    public: PublicKey,
    lambda: BigUint,
    mu: BigUint,
    bits: u64,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public)
            .field("secret", &"<redacted>")
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct KeyFile {
    scheme: String,
    bits: u64,
    n: String,
    lambda: String,
    mu: String,
}

impl KeyPair {
    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    fn from_primes(p: &BigUint, q: &BigUint, bits: u64) -> Result<Self, CryptoError> {
        let n = p * q;
        let one = BigUint::one();
        let lambda = (p - &one).lcm(&(q - &one));
        // with g = n + 1, L(g^λ mod n²) = λ mod n
        let mu = (&lambda % &n)
            .modinv(&n)
            .ok_or_else(|| CryptoError::InvalidKey("λ is not invertible mod n".into()))?;
        Ok(Self {
            public: PublicKey::new(n),
            lambda,
            mu,
            bits,
        })
    }

    pub fn to_json(&self) -> String {
        let file = KeyFile {
            scheme: "paillier".into(),
            bits: self.bits,
            n: self.public.n.to_str_radix(16),
            lambda: self.lambda.to_str_radix(16),
            mu: self.mu.to_str_radix(16),
        };
        serde_json::to_string_pretty(&file).unwrap()
    }

    pub fn from_json(text: &str) -> Result<Self, CryptoError> {
        let file: KeyFile = serde_json::from_str(text).map_err(|e| CryptoError::InvalidKey(e.to_string()))?;
        if file.scheme != "paillier" {
            return Err(CryptoError::InvalidKey(format!("unsupported scheme `{}`", file.scheme)));
        }
        let hex = |s: &str, what: &str| {
            BigUint::parse_bytes(s.as_bytes(), 16)
                .ok_or_else(|| CryptoError::InvalidKey(format!("`{what}` is not hex")))
        };
        let n = hex(&file.n, "n")?;
        let lambda = hex(&file.lambda, "lambda")?;
        let mu = hex(&file.mu, "mu")?;
        if n <= BigUint::one() {
            return Err(CryptoError::InvalidKey("modulus too small".into()));
        }
        Ok(Self {
            public: PublicKey::new(n),
            lambda,
            mu,
            bits: file.bits,
        })
    }
}

/// Generate a key pair whose modulus has exactly `bits` bits.
pub fn keygen(bits: u64, rng: &mut dyn RngCore) -> Result<KeyPair, CryptoError> {
    if bits < 64 {
        return Err(CryptoError::InvalidKeySize(bits));
    }
    let p_bits = bits / 2 + bits % 2;
    let q_bits = bits / 2;
    loop {
        let p = random_prime(p_bits, rng);
        let q = random_prime(q_bits, rng);
        if p == q {
            continue;
        }
        let n = &p * &q;
        let phi = (&p - 1u32) * (&q - 1u32);
        if !n.gcd(&phi).is_one() {
            continue;
        }
        debug_assert_eq!(n.bits(), bits);
        return KeyPair::from_primes(&p, &q, bits);
    }
}

/// Random prime with its two top bits set, so a product of two such primes
/// has the full combined bit length.
fn random_prime(bits: u64, rng: &mut dyn RngCore) -> BigUint {
    let top = (BigUint::one() << (bits - 1)) | (BigUint::one() << (bits - 2));
    loop {
        let candidate = rng.gen_biguint(bits) | &top | BigUint::one();
        if is_probable_prime(&candidate, rng) {
            return candidate;
        }
    }
}

pub(crate) fn is_probable_prime(n: &BigUint, rng: &mut dyn RngCore) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for &p in &SMALL_PRIMES {
        let p = BigUint::from(p);
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    if n.is_even() {
        return *n == two;
    }
    let n_minus_one = n - 1u32;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;
    'witness: for _ in 0..MILLER_RABIN_ROUNDS {
        let a = rng.gen_biguint_range(&two, &n_minus_one);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_one {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

impl AheScheme for KeyPair {
    fn modulus(&self) -> &BigUint {
        &self.public.n
    }

    fn fingerprint(&self) -> u64 {
        self.public.fingerprint
    }

    fn encrypt(&self, m: &BigUint, rng: &mut dyn RngCore) -> Result<Ciphertext, CryptoError> {
        let pk = &self.public;
        if m >= &pk.n {
            return Err(CryptoError::OutOfRange);
        }
        let r = loop {
            let r = rng.gen_biguint_range(&BigUint::one(), &pk.n);
            if r.gcd(&pk.n).is_one() {
                break r;
            }
        };
        // g^m = (1 + n)^m = 1 + m·n  (mod n²)
        let gm = (BigUint::one() + m * &pk.n) % &pk.n_squared;
        let rn = r.modpow(&pk.n, &pk.n_squared);
        Ok(Ciphertext {
            value: gm * rn % &pk.n_squared,
            fingerprint: pk.fingerprint,
        })
    }

    fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, CryptoError> {
        self.check(a)?;
        self.check(b)?;
        Ok(Ciphertext {
            value: &a.value * &b.value % &self.public.n_squared,
            fingerprint: self.public.fingerprint,
        })
    }

    fn decrypt(&self, c: &Ciphertext) -> Result<BigUint, CryptoError> {
        self.check(c)?;
        let pk = &self.public;
        if c.value >= pk.n_squared {
            return Err(CryptoError::OutOfRange);
        }
        let u = c.value.modpow(&self.lambda, &pk.n_squared);
        let l = (u - 1u32) / &pk.n;
        Ok(l * &self.mu % &pk.n)
    }
}
