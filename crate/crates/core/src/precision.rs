//! Process-wide floating point mode.
//!
//! All tensors store `f64`. In [`Precision::Fp32`] mode, layer outputs,
//! gradients and parameter updates are rounded through `f32` so that a
//! training run carries single-precision values end to end. Gradient checks
//! require [`Precision::Fp64`].
//!
//! The initial mode is read from the `FOSSILNET_PRECISION` environment
//! variable (`fp32` or `fp64`); it defaults to `fp64`.

use std::sync::atomic::{AtomicU8, Ordering};

pub const PRECISION_ENV: &str = "FOSSILNET_PRECISION";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Fp64,
}

const UNSET: u8 = 0;
const FP32: u8 = 1;
const FP64: u8 = 2;

static MODE: AtomicU8 = AtomicU8::new(UNSET);

impl Precision {
    pub fn parse(s: &str) -> Option<Precision> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fp32" | "f32" | "32" => Some(Precision::Fp32),
            "fp64" | "f64" | "64" => Some(Precision::Fp64),
            _ => None,
        }
    }

    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::Fp32 => v as f32 as f64,
            Precision::Fp64 => v,
        }
    }

    pub fn round_slice(self, values: &mut [f64]) {
        if self == Precision::Fp32 {
            for v in values {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Current global mode.
pub fn current() -> Precision {
    match MODE.load(Ordering::Relaxed) {
        FP32 => Precision::Fp32,
        FP64 => Precision::Fp64,
        _ => {
            let p = std::env::var(PRECISION_ENV)
                .ok()
                .and_then(|s| Precision::parse(&s))
                .unwrap_or(Precision::Fp64);
            set(p);
            p
        }
    }
}

pub fn set(p: Precision) {
    let code = match p {
        Precision::Fp32 => FP32,
        Precision::Fp64 => FP64,
    };
    MODE.store(code, Ordering::Relaxed);
}
