//! Noise schedules `t ↦ α_t` on the continuous interval `[0, 1]`.
//!
//! Every schedule satisfies `α(0) = 1` and `α(1) = 0` exactly and is strictly
//! decreasing in between, so `x_t = √α_t x_0 + √(1 − α_t) ε` interpolates
//! between data and pure noise.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use crate::error::{LocoError, Result};

/// Functional form of the schedule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    /// `α_t = cos²(πt/2)`.
    #[default]
    Cosine,
    /// `α_t = 1 − t`.
    LinearAlpha,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Cosine => f.write_str("cosine"),
            ScheduleKind::LinearAlpha => f.write_str("linear"),
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" | "linear-alpha" => Ok(ScheduleKind::LinearAlpha),
            other => Err(format!("unknown schedule `{other}` (expected cosine or linear)")),
        }
    }
}

/// A noise schedule. Pure function of `t`; carries no other state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
}

impl NoiseSchedule {
    pub const fn new(kind: ScheduleKind) -> Self {
        Self { kind }
    }

    pub const fn cosine() -> Self {
        Self::new(ScheduleKind::Cosine)
    }

    pub const fn linear() -> Self {
        Self::new(ScheduleKind::LinearAlpha)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Signal coefficient `α_t`.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        // Endpoints are pinned so that α(1) is exactly zero for the cosine form too.
        if t == 0.0 {
            return Ok(1.0);
        }
        if t == 1.0 {
            return Ok(0.0);
        }
        Ok(match self.kind {
            ScheduleKind::Cosine => {
                let c = (FRAC_PI_2 * t).cos();
                c * c
            }
            ScheduleKind::LinearAlpha => 1.0 - t,
        })
    }

    /// Signal-to-noise ratio `α_t / (1 − α_t)`.
    pub fn snr_ratio(&self, t: f64) -> Result<f64> {
        let alpha = self.alpha(t)?;
        let noise = 1.0 - alpha;
        if noise <= 0.0 {
            return Err(LocoError::Singular {
                t,
                reason: "α/(1 − α) is unbounded where α = 1",
            });
        }
        Ok(alpha / noise)
    }
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(LocoError::Domain {
            what: "t",
            value: t,
            allowed: "[0, 1]",
        })
    }
}
