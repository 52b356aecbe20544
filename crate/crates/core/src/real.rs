//! Scalar abstraction so the whole model runs in either single or double precision.

use num_traits::{Float, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating point type the model is computed in.
pub trait Real:
    Float + FromPrimitive + NumAssign + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Dtype tag written into checkpoint headers.
    const DTYPE: &'static str;
    const BYTES: usize;

    /// Additive logit applied to disallowed attention positions.
    fn masked_logit() -> Self;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn masked_logit() -> Self {
        -1e9
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn masked_logit() -> Self {
        f64::NEG_INFINITY
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Arithmetic mode selected at run time (`SATLAB_PRECISION`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl Precision {
    pub const ENV_VAR: &'static str = "SATLAB_PRECISION";

    /// Reads `SATLAB_PRECISION`; unset means single.
    pub fn from_env() -> Result<Self, crate::SatError> {
        match std::env::var(Self::ENV_VAR) {
            Ok(v) => v.parse(),
            Err(_) => Ok(Precision::Single),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = crate::SatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(crate::SatError::Config(format!(
                "unknown precision {other:?} (expected single|double)"
            ))),
        }
    }
}
