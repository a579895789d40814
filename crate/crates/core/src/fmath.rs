//! Float math that works in both `std` and `no_std` builds.
//!
//! Under `std` these delegate to the platform intrinsics; without it they fall
//! back to `libm`. Everything numeric in this crate goes through these helpers
//! so the `no_std` build never touches `std`-only float methods.

#[cfg(feature = "std")]
mod imp {
    #[inline]
    pub fn floor(x: f64) -> f64 {
        x.floor()
    }
    #[inline]
    pub fn sqrt(x: f64) -> f64 {
        x.sqrt()
    }
    #[inline]
    pub fn exp(x: f64) -> f64 {
        x.exp()
    }
    #[inline]
    pub fn ln(x: f64) -> f64 {
        x.ln()
    }
    #[inline]
    pub fn cos(x: f64) -> f64 {
        x.cos()
    }
    #[inline]
    pub fn sin(x: f64) -> f64 {
        x.sin()
    }
    #[inline]
    pub fn powf(x: f64, y: f64) -> f64 {
        x.powf(y)
    }
}

#[cfg(not(feature = "std"))]
mod imp {
    #[inline]
    pub fn floor(x: f64) -> f64 {
        libm::floor(x)
    }
    #[inline]
    pub fn sqrt(x: f64) -> f64 {
        libm::sqrt(x)
    }
    #[inline]
    pub fn exp(x: f64) -> f64 {
        libm::exp(x)
    }
    #[inline]
    pub fn ln(x: f64) -> f64 {
        libm::log(x)
    }
    #[inline]
    pub fn cos(x: f64) -> f64 {
        libm::cos(x)
    }
    #[inline]
    pub fn sin(x: f64) -> f64 {
        libm::sin(x)
    }
    #[inline]
    pub fn powf(x: f64, y: f64) -> f64 {
        libm::pow(x, y)
    }
}

pub use imp::{cos, exp, floor, ln, powf, sin, sqrt};

/// |x| without relying on `std`-only float methods.
#[inline]
pub fn abs(x: f64) -> f64 {
    f64::from_bits(x.to_bits() & !(1u64 << 63))
}

/// 2^k as f64 for small non-negative k.
#[inline]
pub fn pow2(k: u32) -> f64 {
    if k < 64 {
        (1u64 << k) as f64
    } else {
        powf(2.0, k as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abs_matches_native() {
        for x in [0.0, -0.0, 1.5, -1.5, f64::INFINITY, f64::NEG_INFINITY] {
            assert_eq!(abs(x).to_bits(), x.abs().to_bits());
        }
    }

    #[test]
    fn pow2_small_and_large() {
        assert_eq!(pow2(0), 1.0);
        assert_eq!(pow2(10), 1024.0);
        assert_eq!(pow2(64), 2f64.powi(64));
    }

    #[test]
    fn floor_negative() {
        assert_eq!(floor(-250.3), -251.0);
        assert_eq!(floor(250.3), 250.0);
    }
}
