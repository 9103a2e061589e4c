//! Output perturbation of client updates: norm clipping followed by
//! per-coordinate Laplace noise with scale `clip_norm / epsilon`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{norms, ParameterSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivacyError {
    #[error("invalid privacy config: {0}")]
    InvalidConfig(String),
    #[error("input norm {norm} exceeds clip bound {clip}")]
    NotClipped { norm: f64, clip: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClipKind {
    #[default]
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    #[default]
    Laplace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    pub enabled: bool,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub clip_kind: ClipKind,
    pub mechanism: Mechanism,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            epsilon: f64::INFINITY,
            clip_norm: f64::INFINITY,
            clip_kind: ClipKind::L1,
            mechanism: Mechanism::Laplace,
        }
    }
}

impl PrivacyConfig {
    pub fn validate(&self) -> Result<(), PrivacyError> {
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(PrivacyError::InvalidConfig(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(PrivacyError::InvalidConfig(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        Ok(())
    }

    /// Laplace scale `b = C / ε`; zero when ε is infinite.
    pub fn noise_scale(&self) -> f64 {
        if self.epsilon.is_infinite() {
            0.0
        } else {
            self.clip_norm / self.epsilon
        }
    }
}

fn norm_of(p: &ParameterSet, kind: ClipKind) -> f64 {
    let n = norms(p);
    match kind {
        ClipKind::L1 => n.l1,
        ClipKind::L2 => n.l2,
    }
}

/// Scales `delta` down to norm `clip` when it exceeds it.
pub fn clip(delta: &ParameterSet, clip: f64, kind: ClipKind) -> ParameterSet {
    let norm = norm_of(delta, kind);
    if norm <= clip || clip.is_infinite() {
        delta.clone()
    } else {
        delta.scale(clip / norm)
    }
}

/// One draw from Laplace(0, b) by inverse CDF.
pub fn sample_laplace<R: Rng + ?Sized>(rng: &mut R, b: f64) -> f64 {
    let u = loop {
        let u = rng.random::<f64>() - 0.5;
        if u > -0.5 {
            break u;
        }
    };
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

pub fn perturb<R: Rng + ?Sized>(
    delta: &ParameterSet,
    cfg: &PrivacyConfig,
    rng: &mut R,
) -> Result<ParameterSet, PrivacyError> {
    cfg.validate()?;
    if cfg.epsilon.is_infinite() {
        return Ok(delta.clone());
    }
    let norm = norm_of(delta, cfg.clip_kind);
    if norm > cfg.clip_norm * (1.0 + 1e-9) {
        return Err(PrivacyError::NotClipped { norm, clip: cfg.clip_norm });
    }
    let b = cfg.noise_scale();
    let noisy: Vec<f64> = delta.flatten().into_iter().map(|v| v + sample_laplace(rng, b)).collect();
    Ok(delta.with_flat(&noisy).expect("same layout"))
}

/// Clip then perturb; identity when disabled. Clipping and noise are applied
/// in f64 before the result is cast back to the tensors' dtypes.
pub fn privatize<R: Rng + ?Sized>(
    delta: &ParameterSet,
    cfg: &PrivacyConfig,
    rng: &mut R,
) -> Result<ParameterSet, PrivacyError> {
    if !cfg.enabled {
        return Ok(delta.clone());
    }
    cfg.validate()?;
    if cfg.epsilon.is_infinite() && cfg.clip_norm.is_infinite() {
        return Ok(delta.clone());
    }
    let norm = norm_of(delta, cfg.clip_kind);
    let factor = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
    let b = cfg.noise_scale();
    let out: Vec<f64> = delta
        .flatten()
        .into_iter()
        .map(|v| {
            let clipped = v * factor;
            if b > 0.0 {
                clipped + sample_laplace(rng, b)
            } else {
                clipped
            }
        })
        .collect();
    Ok(delta.with_flat(&out).expect("same layout"))
}
