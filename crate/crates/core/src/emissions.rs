//! Carbon accounting: kg CO2e = carbon intensity × PUE × power × hours.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmissionsError {
    #[error("emissions parameter `{0}` must be strictly positive")]
    NonPositive(&'static str),
    #[error("unknown gpu profile `{0}` (expected h100 or a100_mig)")]
    UnknownProfile(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub const DEFAULT_CARBON_INTENSITY: f64 = 0.22;
pub const DEFAULT_PUE: f64 = 1.2;
pub const H100_KW: f64 = 0.91;
pub const A100_MIG_KW: f64 = 0.65;

/// Footnote carried into every rendered report.
pub const DISCREPANCY_NOTE: &str = "Emissions follow CI × PUE × P × t with CI = 0.22 kg/kWh, PUE = 1.2 and P = 0.91 kW (h100) or 0.65 kW (a100_mig). Published per-run emission totals do not always match this formula: for example 18.24 h on an H100 gives 18.24 × 0.91 × 1.2 × 0.22 ≈ 4.38 kg, not the reported 6.74 kg. The formula is applied as written.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GpuProfile {
    H100,
    A100Mig,
}

impl GpuProfile {
    pub fn power_kw(self) -> f64 {
        match self {
            Self::H100 => H100_KW,
            Self::A100Mig => A100_MIG_KW,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::H100 => "h100",
            Self::A100Mig => "a100_mig",
        }
    }

    pub fn parse(s: &str) -> Result<Self, EmissionsError> {
        match s {
            "h100" => Ok(Self::H100),
            "a100_mig" | "a100-mig" => Ok(Self::A100Mig),
            other => Err(EmissionsError::UnknownProfile(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmissionsParams {
    /// kg CO2e per kWh.
    pub carbon_intensity: f64,
    pub pue: f64,
    /// kW.
    pub power: f64,
    /// Hours.
    pub runtime: f64,
}

impl EmissionsParams {
    pub fn for_profile(profile: GpuProfile, runtime_hours: f64) -> Self {
        Self {
            carbon_intensity: DEFAULT_CARBON_INTENSITY,
            pue: DEFAULT_PUE,
            power: profile.power_kw(),
            runtime: runtime_hours,
        }
    }

    pub fn validate(&self) -> Result<(), EmissionsError> {
        for (name, v) in [
            ("carbon_intensity", self.carbon_intensity),
            ("pue", self.pue),
            ("power", self.power),
            ("runtime", self.runtime),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(EmissionsError::NonPositive(name));
            }
        }
        Ok(())
    }
}

pub fn emissions_estimate(params: &EmissionsParams) -> Result<f64, EmissionsError> {
    params.validate()?;
    Ok(params.carbon_intensity * params.pue * params.power * params.runtime)
}

/// Appends `command,gpu_profile,seconds,kg_co2e`, writing the header first
/// when the file is new. Zero-length runs are logged with 0 kg.
pub fn append_emissions(path: &Path, command: &str, profile: GpuProfile, seconds: f64) -> Result<f64, EmissionsError> {
    let kg = if seconds > 0.0 {
        emissions_estimate(&EmissionsParams::for_profile(profile, seconds / 3600.0))?
    } else {
        0.0
    };
    let io = |source| EmissionsError::Io {
        path: path.display().to_string(),
        source,
    };
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    if fresh {
        writeln!(f, "command,gpu_profile,seconds,kg_co2e").map_err(io)?;
    }
    writeln!(f, "{command},{},{seconds:.3},{kg:.9}", profile.as_str()).map_err(io)?;
    Ok(kg)
}
