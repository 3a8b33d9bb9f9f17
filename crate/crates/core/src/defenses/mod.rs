//! Defenses injected before, on, or after aggregation.
//!
//! | stage  | kinds |
//! |--------|-------|
//! | before | krum, mkrum, foolsgold, norm_clip |
//! | on     | geo_median, rfa, slsgd, weak_dp, cclip, coord_median, trimmed_mean, robust_lr |
//! | after  | crfl |
//!
//! [`Defender`] dispatches a [`DefenseSpec`] through the engine's
//! [`DefenseHook`](crate::engine::DefenseHook) interface and is an exact
//! identity at stages its kind does not occupy.

mod clipping;
mod defender;
mod foolsgold;
mod geomedian;
mod krum;
mod robust_stats;
mod state;

pub use clipping::{cclip_aggregate, crfl_postprocess, norm_clip, weak_dp_aggregate};
pub use defender::Defender;
pub use foolsgold::{foolsgold_reweight, foolsgold_weights};
pub use geomedian::{
    geometric_median, rfa_aggregate, smoothed_objective, weighted_distance_sum, GeoMedian,
};
pub use krum::{krum_scores, krum_select};
pub use robust_stats::{
    coord_median_aggregate, robust_lr_aggregate, slsgd_aggregate, trimmed_mean_aggregate,
};
pub use state::DefenderState;

use crate::{Error, Result};

pub const DEFAULT_WEISZFELD_NU: f64 = 1e-6;
pub const DEFAULT_WEISZFELD_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DefenseSpec {
    Krum { byzantine_f: usize },
    MKrum { byzantine_f: usize, krum_m: usize },
    Foolsgold { kappa: f64 },
    NormClip { clip_tau: f64 },
    RobustLr { theta: usize, eta: f64 },
    Slsgd { trim_beta: f64, alpha: f64 },
    GeoMedian { nu: f64, iters: usize },
    WeakDp { clip_tau: f64, noise_sigma: f64 },
    CClip { clip_tau: f64 },
    CoordMedian,
    TrimmedMean { trim_beta: f64 },
    Rfa { nu: f64, iters: usize },
    Crfl { clip_tau: f64, noise_sigma: f64 },
}

/// Stage membership of a defense kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Stages {
    pub before: bool,
    pub on: bool,
    pub after: bool,
}

impl DefenseSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DefenseSpec::Krum { .. } => "krum",
            DefenseSpec::MKrum { .. } => "mkrum",
            DefenseSpec::Foolsgold { .. } => "foolsgold",
            DefenseSpec::NormClip { .. } => "norm_clip",
            DefenseSpec::RobustLr { .. } => "robust_lr",
            DefenseSpec::Slsgd { .. } => "slsgd",
            DefenseSpec::GeoMedian { .. } => "geo_median",
            DefenseSpec::WeakDp { .. } => "weak_dp",
            DefenseSpec::CClip { .. } => "cclip",
            DefenseSpec::CoordMedian => "coord_median",
            DefenseSpec::TrimmedMean { .. } => "trimmed_mean",
            DefenseSpec::Rfa { .. } => "rfa",
            DefenseSpec::Crfl { .. } => "crfl",
        }
    }

    pub fn stages(&self) -> Stages {
        use DefenseSpec::*;
        match self {
            Krum { .. } | MKrum { .. } | Foolsgold { .. } | NormClip { .. } => Stages {
                before: true,
                ..Stages::default()
            },
            RobustLr { .. }
            | Slsgd { .. }
            | GeoMedian { .. }
            | WeakDp { .. }
            | CClip { .. }
            | CoordMedian
            | TrimmedMean { .. }
            | Rfa { .. } => Stages {
                on: true,
                ..Stages::default()
            },
            Crfl { .. } => Stages {
                after: true,
                ..Stages::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: f64) -> Result<()> {
            // +inf is allowed as a "no clipping" sentinel
            if v > 0.0 && !v.is_nan() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        }
        fn sigma(v: f64) -> Result<()> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "noise_sigma must be finite and non-negative, got {v}"
                )))
            }
        }
        fn beta(v: f64) -> Result<()> {
            if (0.0..0.5).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "trim_beta must be in [0, 0.5), got {v}"
                )))
            }
        }
        fn weiszfeld(nu: f64, iters: usize) -> Result<()> {
            if !(nu.is_finite() && nu > 0.0) || iters == 0 {
                return Err(Error::Config(
                    "weiszfeld_nu must be positive and weiszfeld_iters at least 1".into(),
                ));
            }
            Ok(())
        }
        match *self {
            DefenseSpec::Krum { .. } | DefenseSpec::CoordMedian => Ok(()),
            DefenseSpec::MKrum { krum_m, .. } => {
                if krum_m == 0 {
                    Err(Error::Config("krum_m must be at least 1".into()))
                } else {
                    Ok(())
                }
            }
            DefenseSpec::Foolsgold { kappa } => positive("foolsgold_kappa", kappa),
            DefenseSpec::NormClip { clip_tau } | DefenseSpec::CClip { clip_tau } => {
                positive("clip_tau", clip_tau)
            }
            DefenseSpec::RobustLr { theta, eta } => {
                if theta == 0 {
                    return Err(Error::Config("rlr_theta must be at least 1".into()));
                }
                positive("rlr_eta", eta)
            }
            DefenseSpec::Slsgd { trim_beta, alpha } => {
                beta(trim_beta)?;
                if alpha > 0.0 && alpha <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "slsgd_alpha must be in (0, 1], got {alpha}"
                    )))
                }
            }
            DefenseSpec::GeoMedian { nu, iters } | DefenseSpec::Rfa { nu, iters } => {
                weiszfeld(nu, iters)
            }
            DefenseSpec::WeakDp {
                clip_tau,
                noise_sigma,
            }
            | DefenseSpec::Crfl {
                clip_tau,
                noise_sigma,
            } => {
                positive("clip_tau", clip_tau)?;
                sigma(noise_sigma)
            }
            DefenseSpec::TrimmedMean { trim_beta } => beta(trim_beta),
        }
    }

    /// Checks constraints that depend on the number of updates per round.
    pub fn validate_for_clients(&self, n: usize) -> Result<()> {
        match *self {
            DefenseSpec::Krum { byzantine_f } => krum::check_neighbourhood(n, byzantine_f),
            DefenseSpec::MKrum {
                byzantine_f,
                krum_m,
            } => {
                krum::check_neighbourhood(n, byzantine_f)?;
                krum::check_mkrum(n, byzantine_f, krum_m)
            }
            DefenseSpec::Slsgd { trim_beta, .. } | DefenseSpec::TrimmedMean { trim_beta } => {
                robust_stats::trim_count(n, trim_beta).map(|_| ())
            }
            _ => Ok(()),
        }
    }
}

pub fn is_defense_before_aggregation(spec: Option<&DefenseSpec>) -> bool {
    spec.is_some_and(|s| s.stages().before)
}

pub fn is_defense_on_aggregation(spec: Option<&DefenseSpec>) -> bool {
    spec.is_some_and(|s| s.stages().on)
}

pub fn is_defense_after_aggregation(spec: Option<&DefenseSpec>) -> bool {
    spec.is_some_and(|s| s.stages().after)
}
