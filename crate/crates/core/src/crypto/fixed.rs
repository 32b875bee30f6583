use num_bigint::{BigInt, BigUint, Sign};
use num_rational::BigRational;
use num_traits::{FromPrimitive, ToPrimitive};

use super::CryptoError;

/// Two decimal places.
pub const DEFAULT_SCALE: u32 = 100;

/// Fixed-point codec mapping reals onto residues mod n. Negative values use
/// the upper half of the residue range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedPoint {
    pub scale: u32,
}

impl Default for FixedPoint {
    fn default() -> Self {
        Self { scale: DEFAULT_SCALE }
    }
}

impl FixedPoint {
    pub fn new(scale: u32) -> Self {
        assert!(scale > 0, "fixed-point scale must be positive");
        Self { scale }
    }

    /// The scaled integer, rounded half away from zero.
    pub fn scaled(&self, x: f64) -> Result<BigInt, CryptoError> {
        let v = (x * f64::from(self.scale)).round();
        if !v.is_finite() {
            return Err(CryptoError::Overflow(x));
        }
        BigInt::from_f64(v).ok_or(CryptoError::Overflow(x))
    }

    pub fn encode(&self, x: f64, n: &BigUint) -> Result<BigUint, CryptoError> {
        self.encode_int(&self.scaled(x)?, n)
            .map_err(|_| CryptoError::Overflow(x))
    }

    /// Map a signed scaled integer into `[0, n)`; requires `|v| < n/2`.
    pub fn encode_int(&self, v: &BigInt, n: &BigUint) -> Result<BigUint, CryptoError> {
        let half = n >> 1u8;
        let mag = v.magnitude();
        if mag >= &half {
            return Err(CryptoError::OutOfRange);
        }
        Ok(match v.sign() {
            Sign::Minus => n - mag,
            _ => mag.clone(),
        })
    }

    /// Signed scaled integer a residue stands for.
    pub fn decode_int(&self, r: &BigUint, n: &BigUint) -> BigInt {
        let half = n >> 1u8;
        if r > &half {
            -BigInt::from(n - r)
        } else {
            BigInt::from(r.clone())
        }
    }

    pub fn decode_exact(&self, r: &BigUint, n: &BigUint) -> BigRational {
        BigRational::new(self.decode_int(r, n), BigInt::from(self.scale))
    }

    pub fn decode(&self, r: &BigUint, n: &BigUint) -> f64 {
        self.decode_exact(r, n).to_f64().unwrap_or(f64::NAN)
    }
}

pub fn encode_fixed(x: f64, scale: u32, n: &BigUint) -> Result<BigUint, CryptoError> {
    FixedPoint::new(scale).encode(x, n)
}

pub fn decode_fixed(r: &BigUint, scale: u32, n: &BigUint) -> f64 {
    FixedPoint::new(scale).decode(r, n)
}
