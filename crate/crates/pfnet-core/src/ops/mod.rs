//! Kernel layer: every primitive tensor operation, forward and backward.
//!
//! The fast paths here are f32 and loop/GEMM based; the obviously-correct
//! counterparts live in [`crate::reference`] and the two are held together
//! by the oracle test suite.

pub mod act;
pub mod attention;
pub mod conv;
pub mod gemm;
pub mod linear;
pub mod norm;
pub mod pool;
pub mod sample;
pub mod shift;

pub use act::*;
pub use attention::*;
pub use conv::*;
pub use linear::*;
pub use norm::*;
pub use pool::*;
pub use sample::*;
pub use shift::*;

use crate::error::{Error, Result};

/// Output extent of a windowed op along one axis: floor((len + 2p - k)/r) + 1.
pub fn out_extent(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < k {
        return Err(Error::Geometry(format!(
            "window {k} does not fit extent {len} with padding {pad}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_matches_formula() {
        assert_eq!(out_extent(56, 3, 1, 1).unwrap(), 56);
        assert_eq!(out_extent(56, 3, 2, 1).unwrap(), 28);
        assert_eq!(out_extent(224, 7, 2, 3).unwrap(), 112);
        assert_eq!(out_extent(2, 2, 1, 0).unwrap(), 1);
        assert!(out_extent(1, 4, 1, 1).is_err());
    }
}
