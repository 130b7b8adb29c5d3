//! Training-time data augmentation: noise-std perturbation and signal
//! amplification.

use rand::Rng;

use crate::chansim::Observation;
use crate::util::{db_to_amp, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    /// Uniform dB perturbation applied to the reported noise std.
    pub snr_jitter_db: (f64, f64),
    /// Uniform amplification factor c applied to y and the target channel.
    pub amp_interval: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            snr_jitter_db: (-5.0, 5.0),
            amp_interval: (0.20, 5.0),
        }
    }
}

impl AugmentConfig {
    /// No-op augmentation (evaluation path).
    pub fn identity() -> Self {
        Self {
            snr_jitter_db: (0.0, 0.0),
            amp_interval: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.snr_jitter_db.0 > self.snr_jitter_db.1 {
            return Err("snr_jitter_db interval is empty".to_string());
        }
        if self.amp_interval.0 > self.amp_interval.1 || self.amp_interval.0 <= 0.0 {
            return Err("amp_interval must be positive and nonempty".to_string());
        }
        Ok(())
    }
}

/// Applies the two augmentations: y and g_true are scaled by sqrt(c) (so the
/// true noise std scales with them), while the reported sigma is additionally
/// perturbed by rho dB. The genie sigma tracks the actual noise in the scaled
/// observation; only the estimator-facing value is jittered.
pub fn augment(obs: &Observation, aug: &AugmentConfig, seed: u64) -> Observation {
    let mut rng = rng_for(seed, "augment", 0);
    let rho = if aug.snr_jitter_db.0 == aug.snr_jitter_db.1 {
        aug.snr_jitter_db.0
    } else {
        rng.random_range(aug.snr_jitter_db.0..aug.snr_jitter_db.1)
    };
    let c = if aug.amp_interval.0 == aug.amp_interval.1 {
        aug.amp_interval.0
    } else {
        rng.random_range(aug.amp_interval.0..aug.amp_interval.1)
    };
    let sqrt_c = c.sqrt();

    let mut out = obs.clone();
    out.y.mapv_inplace(|v| v * sqrt_c);
    out.g_true.mapv_inplace(|v| v * sqrt_c);
    out.sigma = obs.sigma * sqrt_c;
    out.sigma_reported = obs.sigma * sqrt_c * db_to_amp(rho);
    out.amp = obs.amp * c;
    out
}
