//! Dense matrix kernels and factorizations.
//!
//! Everything computes in `f64`. Storage precision (cache rows, container
//! files) is handled by the callers through [`StorageDtype`].

mod decomp;
mod matrix;

pub use decomp::{
    frobenius_norm, matmul, matmul_nt, matmul_tn, qr_factor, solve_least_squares, thin_svd,
    SvdResult, SVD_MAX_SWEEPS,
};
pub use matrix::{dot, l2_norm, vec_matmul, Matrix};

use half::f16;
use serde::{Deserialize, Serialize};

/// Precision a value is rounded to when it is stored rather than computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StorageDtype {
    #[default]
    F16,
    F32,
    F64,
}

impl StorageDtype {
    pub const fn bytes(self) -> usize {
        match self {
            Self::F16 => 2,
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Self::F16 => f16::from_f64(x).to_f64(),
            Self::F32 => x as f32 as f64,
            Self::F64 => x,
        }
    }

    pub fn round_slice(self, xs: &mut [f64]) {
        if self != Self::F64 {
            xs.iter_mut().for_each(|x| *x = self.round(*x));
        }
    }
}
